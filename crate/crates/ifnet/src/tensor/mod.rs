//! Dense tensor values with reverse-mode automatic differentiation.
//!
//! The engine is deliberately minimal: flat row-major storage, an eager
//! operation tape ([`graph::Graph`]), and exactly the primitives the
//! descriptor network and the loss family need. Training runs at `f32`;
//! gradient checks instantiate the same code at `f64`.

mod gradcheck;
mod graph;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Graph, ValueId};

use std::fmt::{Debug, Display};
use std::io::{BufRead, Write};
use std::iter::Sum;
use std::str::FromStr;

use num_traits::{Float, NumCast};

use crate::error::{Error, Result};

/// Element type the engine is generic over. `f32` for training,
/// `f64` for finite-difference verification.
pub trait Scalar:
    Float
    + NumCast
    + Sum
    + Display
    + Debug
    + Default
    + FromStr
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self {
        <Self as NumCast>::from(x).expect("f64 -> scalar conversion")
    }

    fn to_f64(self) -> f64 {
        <f64 as NumCast>::from(self).expect("scalar -> f64 conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Dense row-major tensor. The gradient accumulator is present iff the
/// tensor participates in differentiation (`with_grad`).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    values: Vec<S>,
    grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, values: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new".into(),
                detail: format!("shape {:?} implies {} values, got {}", shape, numel, values.len()),
            });
        }
        Ok(Tensor { shape, values, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, values: vec![S::zero(); numel], grad: None }
    }

    pub fn scalar(value: S) -> Self {
        Tensor { shape: vec![1], values: vec![value], grad: None }
    }

    /// Enables gradient accumulation, starting from zero.
    pub fn with_grad(mut self) -> Self {
        let n = self.values.len();
        self.grad = Some(vec![S::zero(); n]);
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [S] {
        &mut self.values
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [S]> {
        self.grad.as_deref_mut()
    }

    pub fn accumulate_grad(&mut self, delta: &[S]) {
        if let Some(g) = self.grad.as_mut() {
            debug_assert_eq!(g.len(), delta.len());
            for (gi, di) in g.iter_mut().zip(delta) {
                *gi = *gi + *di;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            for gi in g.iter_mut() {
                *gi = S::zero();
            }
        }
    }

    /// Text snapshot: "shape: d0 d1 ..." then whitespace-separated values
    /// in row-major order.
    pub fn write_snapshot<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        write!(w, "shape:")?;
        for d in &self.shape {
            write!(w, " {}", d)?;
        }
        writeln!(w)?;
        for (i, v) in self.values.iter().enumerate() {
            if i > 0 {
                write!(w, " ")?;
            }
            write!(w, "{}", v)?;
        }
        writeln!(w)?;
        Ok(())
    }

    /// Reads one snapshot from a line-oriented reader. Values may span
    /// multiple lines; reading stops once the shape's element count is met.
    pub fn read_snapshot<R: BufRead>(r: &mut R) -> Result<Self> {
        let mut header = String::new();
        loop {
            header.clear();
            let n = r.read_line(&mut header).map_err(|e| Error::io("reading snapshot header", e))?;
            if n == 0 {
                return Err(Error::ShapeMismatch {
                    op: "Tensor::read_snapshot".into(),
                    detail: "unexpected end of input before header".into(),
                });
            }
            if !header.trim().is_empty() {
                break;
            }
        }
        let rest = header.trim().strip_prefix("shape:").ok_or_else(|| Error::ShapeMismatch {
            op: "Tensor::read_snapshot".into(),
            detail: format!("expected 'shape:' header, got '{}'", header.trim()),
        })?;
        let shape: Vec<usize> = rest
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::ShapeMismatch {
                op: "Tensor::read_snapshot".into(),
                detail: format!("bad extent: {}", e),
            })?;
        let numel: usize = shape.iter().product();
        let mut values = Vec::with_capacity(numel);
        let mut line = String::new();
        while values.len() < numel {
            line.clear();
            let n = r.read_line(&mut line).map_err(|e| Error::io("reading snapshot values", e))?;
            if n == 0 {
                break;
            }
            for tok in line.split_whitespace() {
                let v = tok.parse::<S>().map_err(|_| Error::ShapeMismatch {
                    op: "Tensor::read_snapshot".into(),
                    detail: format!("bad value token '{}'", tok),
                })?;
                values.push(v);
                if values.len() == numel {
                    break;
                }
            }
        }
        if values.len() != numel {
            return Err(Error::ShapeMismatch {
                op: "Tensor::read_snapshot".into(),
                detail: format!("shape {:?} needs {} values, found {}", shape, numel, values.len()),
            });
        }
        Tensor::new(shape, values)
    }
}
