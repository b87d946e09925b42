//! Procedurally rendered correspondence stores: a desk-scale stand-in
//! for large photo-collection training data. Each track gets a random
//! smooth texture; each view warps it geometrically (viewpoint domain)
//! and/or distorts its tone curve (illumination domain).

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{
    CorrespondenceStore, KeypointTrack, Patch, PatchSource, Provenance, SceneInfo, TrackMember,
    PATCH_SIDE,
};
use crate::error::{Error, Result};

const CANVAS: usize = 96;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthMode {
    Geometry,
    Illumination,
    Both,
}

impl SynthMode {
    pub fn name(self) -> &'static str {
        match self {
            SynthMode::Geometry => "geometry",
            SynthMode::Illumination => "illumination",
            SynthMode::Both => "both",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthParams {
    pub seed: u64,
    pub n_tracks: usize,
    pub n_views: usize,
    pub mode: SynthMode,
    /// Photometric gain range.
    pub gain: (f64, f64),
    /// Additive intensity bias range.
    pub bias: (f64, f64),
    /// Gamma exponent range.
    pub gamma: (f64, f64),
    /// Blend weight range toward the simulated night tone curve.
    pub night: (f64, f64),
    /// Max rotation, radians.
    pub rot: f64,
    /// Max relative scale jitter.
    pub scale_jitter: f64,
    /// Max translation, pixels.
    pub translate: f64,
}

impl SynthParams {
    pub fn new(seed: u64, n_tracks: usize, n_views: usize, mode: SynthMode) -> Self {
        let photometric = matches!(mode, SynthMode::Illumination | SynthMode::Both);
        let geometric = matches!(mode, SynthMode::Geometry | SynthMode::Both);
        SynthParams {
            seed,
            n_tracks,
            n_views,
            mode,
            gain: if photometric { (0.55, 1.5) } else { (1.0, 1.0) },
            bias: if photometric { (-0.18, 0.18) } else { (0.0, 0.0) },
            gamma: if photometric { (0.45, 2.1) } else { (1.0, 1.0) },
            night: if photometric { (0.0, 0.85) } else { (0.0, 0.0) },
            rot: if geometric { 0.15 } else { 0.0 },
            scale_jitter: if geometric { 0.12 } else { 0.0 },
            translate: if geometric { 3.0 } else { 0.0 },
        }
    }
}

pub fn synth_store(seed: u64, n_tracks: usize, n_views: usize, mode: SynthMode) -> Result<CorrespondenceStore> {
    synth_store_with(&SynthParams::new(seed, n_tracks, n_views, mode))
}

pub fn synth_store_with(p: &SynthParams) -> Result<CorrespondenceStore> {
    if p.n_tracks < 2 || p.n_views < 2 {
        return Err(Error::InvalidParams(format!(
            "synth store needs n_tracks >= 2 and n_views >= 2, got {} and {}",
            p.n_tracks, p.n_views
        )));
    }
    let scene_id = format!("synth-{}", p.mode.name());
    let mut tracks = Vec::with_capacity(p.n_tracks);
    for t in 0..p.n_tracks {
        let mut texture_rng = ChaCha8Rng::seed_from_u64(mix(p.seed, t as u64, 0x7465_7874));
        let canvas = render_texture(&mut texture_rng);
        let mut members = Vec::with_capacity(p.n_views);
        for v in 0..p.n_views {
            let mut view_rng = ChaCha8Rng::seed_from_u64(mix(p.seed, t as u64, v as u64));
            let values = render_view(&canvas, p, &mut view_rng);
            let data: Vec<u8> = values.iter().map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
            members.push(TrackMember {
                frame_id: v as u64,
                x: 47.5,
                y: 47.5,
                patch: Patch::new(
                    PATCH_SIDE,
                    data,
                    PatchSource { scene_id: scene_id.clone(), frame_id: v as u64, x: 47.5, y: 47.5 },
                ),
            });
        }
        tracks.push(KeypointTrack { track_id: t as u64, scene_id: scene_id.clone(), members });
    }
    Ok(CorrespondenceStore {
        tracks,
        scenes: vec![SceneInfo { scene_id, frame_count: p.n_views, frames_used: p.n_views }],
        provenance: Provenance { detector: "synth".into(), tolerance: 0.0, frames_per_scene: p.n_views },
    })
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 over the packed identifiers
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Random smooth texture: an intensity ramp, a few anisotropic blobs and
/// one soft edge, min-max normalized into [0.1, 0.9].
fn render_texture(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let c = CANVAS as f64;
    let mut img = vec![0.0f64; CANVAS * CANVAS];

    let ramp_theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let ramp_amp: f64 = rng.gen_range(0.2..0.7);
    let (rc, rs) = (ramp_theta.cos(), ramp_theta.sin());
    for y in 0..CANVAS {
        for x in 0..CANVAS {
            let u = x as f64 / c - 0.5;
            let v = y as f64 / c - 0.5;
            img[y * CANVAS + x] = ramp_amp * (u * rc + v * rs);
        }
    }

    let blobs = rng.gen_range(3..=6);
    for _ in 0..blobs {
        let cx: f64 = rng.gen_range(0.15 * c..0.85 * c);
        let cy: f64 = rng.gen_range(0.15 * c..0.85 * c);
        let sx: f64 = rng.gen_range(4.0..18.0);
        let sy: f64 = rng.gen_range(4.0..18.0);
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let amp: f64 = rng.gen_range(0.25..0.8) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let (ct, st) = (theta.cos(), theta.sin());
        for y in 0..CANVAS {
            for x in 0..CANVAS {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                let a = (dx * ct + dy * st) / sx;
                let b = (-dx * st + dy * ct) / sy;
                img[y * CANVAS + x] += amp * (-(a * a + b * b) / 2.0).exp();
            }
        }
    }

    // One soft oriented step through a random interior point.
    let ex: f64 = rng.gen_range(0.3 * c..0.7 * c);
    let ey: f64 = rng.gen_range(0.3 * c..0.7 * c);
    let etheta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let eamp: f64 = rng.gen_range(0.15..0.45) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let (ec, es) = (etheta.cos(), etheta.sin());
    for y in 0..CANVAS {
        for x in 0..CANVAS {
            let d = (x as f64 - ex) * ec + (y as f64 - ey) * es;
            img[y * CANVAS + x] += eamp / (1.0 + (-d / 1.5).exp());
        }
    }

    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in &img {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = (hi - lo).max(1e-9);
    for v in img.iter_mut() {
        *v = 0.1 + 0.8 * (*v - lo) / span;
    }
    img
}

fn render_view(canvas: &[f64], p: &SynthParams, rng: &mut ChaCha8Rng) -> Vec<f64> {
    // Geometry first (draws from the RNG in a fixed order even when the
    // ranges are degenerate, to keep streams aligned across modes).
    let theta: f64 = if p.rot > 0.0 { rng.gen_range(-p.rot..p.rot) } else { 0.0 };
    let scale: f64 =
        if p.scale_jitter > 0.0 { rng.gen_range(1.0 - p.scale_jitter..1.0 + p.scale_jitter) } else { 1.0 };
    let (tx, ty) = if p.translate > 0.0 {
        (rng.gen_range(-p.translate..p.translate), rng.gen_range(-p.translate..p.translate))
    } else {
        (0.0, 0.0)
    };

    let half = (PATCH_SIDE as f64 - 1.0) / 2.0;
    let center = (CANVAS as f64 - 1.0) / 2.0;
    let (ct, st) = (theta.cos(), theta.sin());
    let mut out = vec![0.0f64; PATCH_SIDE * PATCH_SIDE];
    for oy in 0..PATCH_SIDE {
        for ox in 0..PATCH_SIDE {
            let u = ox as f64 - half;
            let v = oy as f64 - half;
            // Inverse similarity transform into canvas coordinates.
            let su = (u * ct + v * st) / scale;
            let sv = (-u * st + v * ct) / scale;
            out[oy * PATCH_SIDE + ox] = bilinear(canvas, su + center - tx, sv + center - ty);
        }
    }

    let gain = range_sample(rng, p.gain);
    let bias = range_sample(rng, p.bias);
    let gamma = range_sample(rng, p.gamma);
    let night = range_sample(rng, p.night);
    if gain != 1.0 || bias != 0.0 || gamma != 1.0 || night != 0.0 {
        for v in out.iter_mut() {
            let toned = (gain * v.max(0.0).powf(gamma) + bias).clamp(0.0, 1.0);
            let dark = 0.05 + 0.45 * toned.powf(2.2);
            *v = (1.0 - night) * toned + night * dark;
        }
    }
    out
}

fn range_sample(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn bilinear(canvas: &[f64], x: f64, y: f64) -> f64 {
    let max = (CANVAS - 1) as f64;
    let x = x.clamp(0.0, max);
    let y = y.clamp(0.0, max);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(CANVAS - 1);
    let y1 = (y0 + 1).min(CANVAS - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let v00 = canvas[y0 * CANVAS + x0];
    let v10 = canvas[y0 * CANVAS + x1];
    let v01 = canvas[y1 * CANVAS + x0];
    let v11 = canvas[y1 * CANVAS + x1];
    v00 * (1.0 - fx) * (1.0 - fy) + v10 * fx * (1.0 - fy) + v01 * (1.0 - fx) * fy + v11 * fx * fy
}
