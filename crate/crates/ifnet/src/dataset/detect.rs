//! Built-in Harris-style corner detector plus a text import path for
//! externally detected keypoints ("frame_id x y score" rows).

use std::fs;
use std::path::{Path, PathBuf};

use crate::dataset::{Frame, PATCH_SIDE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct HarrisParams {
    /// Trace weight in `det - k * trace^2`.
    pub k: f64,
    /// Keep responses above `rel_threshold * max_response`.
    pub rel_threshold: f64,
    /// Chebyshev non-maximum-suppression radius.
    pub nms_radius: usize,
    /// Cap on detections per frame, strongest first.
    pub max_keypoints: usize,
    /// Detections closer than this to the border are skipped.
    pub margin: usize,
    /// Half-size of the structure-tensor summation window.
    pub window: usize,
}

impl Default for HarrisParams {
    fn default() -> Self {
        HarrisParams {
            k: 0.04,
            rel_threshold: 0.01,
            nms_radius: 2,
            max_keypoints: 256,
            margin: 0,
            window: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub enum DetectorConfig {
    Harris(HarrisParams),
    Import(PathBuf),
}

impl DetectorConfig {
    pub fn name(&self) -> &'static str {
        match self {
            DetectorConfig::Harris(_) => "harris",
            DetectorConfig::Import(_) => "import",
        }
    }
}

/// Harris corner response over the frame, thresholded relative to the
/// strongest response, non-maximum suppressed, top-K by score.
pub fn detect_keypoints(frame: &Frame, params: &HarrisParams) -> Result<Vec<Keypoint>> {
    let min_side = PATCH_SIDE + 2 * params.margin;
    if frame.width < min_side || frame.height < min_side {
        return Err(Error::ImageTooSmall { width: frame.width, height: frame.height, min: min_side });
    }
    let (w, h) = (frame.width, frame.height);
    let at = |x: usize, y: usize| frame.data[y * w + x] as f64 / 255.0;

    // Sobel gradients on the interior.
    let mut gx = vec![0.0f64; w * h];
    let mut gy = vec![0.0f64; w * h];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            gx[y * w + x] = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            gy[y * w + x] = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
        }
    }

    // Structure tensor summed over a (2*window+1)^2 box, then the
    // corner response.
    let win = params.window as isize;
    let mut response = vec![0.0f64; w * h];
    let mut max_response = 0.0f64;
    let lo = 1 + params.window;
    for y in lo..h - lo {
        for x in lo..w - lo {
            let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
            for dy in -win..=win {
                for dx in -win..=win {
                    let idx = ((y as isize + dy) as usize) * w + (x as isize + dx) as usize;
                    sxx += gx[idx] * gx[idx];
                    syy += gy[idx] * gy[idx];
                    sxy += gx[idx] * gy[idx];
                }
            }
            let det = sxx * syy - sxy * sxy;
            let tr = sxx + syy;
            let r = det - params.k * tr * tr;
            response[y * w + x] = r;
            if r > max_response {
                max_response = r;
            }
        }
    }
    if max_response <= 0.0 {
        return Ok(Vec::new());
    }
    let threshold = params.rel_threshold * max_response;

    // NMS: survive if no neighbor within the radius is stronger, with
    // plateau ties resolved to the lowest linear index.
    let rad = params.nms_radius as isize;
    let border = lo.max(params.margin);
    let mut kps = Vec::new();
    for y in border..h - border {
        for x in border..w - border {
            let r = response[y * w + x];
            if r <= threshold {
                continue;
            }
            let mut is_max = true;
            'nms: for dy in -rad..=rad {
                for dx in -rad..=rad {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let ny = y as isize + dy;
                    let nx = x as isize + dx;
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let nidx = ny as usize * w + nx as usize;
                    let nr = response[nidx];
                    if nr > r || (nr == r && nidx < y * w + x) {
                        is_max = false;
                        break 'nms;
                    }
                }
            }
            if is_max {
                kps.push(Keypoint { x: x as f64, y: y as f64, score: r });
            }
        }
    }
    kps.sort_by(|a, b| {
        b.score.total_cmp(&a.score).then(a.y.total_cmp(&b.y)).then(a.x.total_cmp(&b.x))
    });
    kps.truncate(params.max_keypoints);
    Ok(kps)
}

/// Parses "frame_id x y score" rows, one detection per line. Blank lines
/// and `#` comments are allowed.
pub fn load_keypoint_import(path: &Path) -> Result<Vec<(u64, Keypoint)>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |detail: &str| Error::MalformedImport {
            path: path.to_path_buf(),
            line: lineno + 1,
            detail: detail.into(),
        };
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 4 {
            return Err(bad(&format!("expected 4 fields, got {}", toks.len())));
        }
        let frame_id: u64 = toks[0].parse().map_err(|_| bad("bad frame_id"))?;
        let x: f64 = toks[1].parse().map_err(|_| bad("bad x"))?;
        let y: f64 = toks[2].parse().map_err(|_| bad("bad y"))?;
        let score: f64 = toks[3].parse().map_err(|_| bad("bad score"))?;
        out.push((frame_id, Keypoint { x, y, score }));
    }
    Ok(out)
}
