//! Patch-correspondence stores: fixed-camera dataset construction,
//! synthetic two-domain generation, and the on-disk store format
//! (`manifest.tsv` + per-patch PGM files + `provenance.txt`).

mod detect;
pub mod pgm;
mod synth;

pub use detect::{detect_keypoints, load_keypoint_import, DetectorConfig, HarrisParams, Keypoint};
pub use synth::{synth_store, synth_store_with, SynthMode, SynthParams};

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Standard patch side in pixels.
pub const PATCH_SIDE: usize = 64;

/// Single-channel intensity image, row-major `u8`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Frame {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width * height);
        Frame { width, height, data }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Frame { width, height, data }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }
}

/// Where a patch was cut from.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSource {
    pub scene_id: String,
    pub frame_id: u64,
    pub x: f64,
    pub y: f64,
}

/// 64×64 intensity square around a keypoint. Stored as 8-bit grayscale;
/// training converts to reals in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    side: usize,
    data: Vec<u8>,
    pub source: PatchSource,
}

impl Patch {
    pub fn new(side: usize, data: Vec<u8>, source: PatchSource) -> Self {
        assert_eq!(data.len(), side * side);
        Patch { side, data, source }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn intensity(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.side + col] as f32 / 255.0
    }

    pub fn to_values<S: Scalar>(&self) -> Vec<S> {
        self.data.iter().map(|&b| S::from_f64(b as f64 / 255.0)).collect()
    }
}

/// Crops the `side`×`side` window centered at the rounded position.
pub fn extract_patch(
    frame: &Frame,
    scene_id: &str,
    frame_id: u64,
    center: (f64, f64),
    side: usize,
) -> Result<Patch> {
    let half = (side / 2) as i64;
    let sx = center.0.round() as i64 - half;
    let sy = center.1.round() as i64 - half;
    if sx < 0 || sy < 0 || sx + side as i64 > frame.width as i64 || sy + side as i64 > frame.height as i64 {
        return Err(Error::OutOfBounds {
            x: center.0,
            y: center.1,
            side,
            width: frame.width,
            height: frame.height,
        });
    }
    let mut data = Vec::with_capacity(side * side);
    for r in 0..side {
        let row = (sy as usize + r) * frame.width + sx as usize;
        data.extend_from_slice(&frame.data[row..row + side]);
    }
    Ok(Patch {
        side,
        data,
        source: PatchSource { scene_id: scene_id.into(), frame_id, x: center.0, y: center.1 },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackMember {
    pub frame_id: u64,
    pub x: f64,
    pub y: f64,
    pub patch: Patch,
}

/// Patches of one 3D point across frames. The canonical position is the
/// seeding detection's, i.e. the first member's.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointTrack {
    pub track_id: u64,
    pub scene_id: String,
    pub members: Vec<TrackMember>,
}

impl KeypointTrack {
    pub fn canonical(&self) -> (f64, f64) {
        (self.members[0].x, self.members[0].y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneInfo {
    pub scene_id: String,
    pub frame_count: usize,
    pub frames_used: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub detector: String,
    pub tolerance: f64,
    pub frames_per_scene: usize,
}

/// Groups of patches indexed by 3D-point identity — the training ground
/// truth.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceStore {
    pub tracks: Vec<KeypointTrack>,
    pub scenes: Vec<SceneInfo>,
    pub provenance: Provenance,
}

impl CorrespondenceStore {
    pub fn patch_count(&self) -> usize {
        self.tracks.iter().map(|t| t.members.len()).sum()
    }

    /// Concatenated track pool with track ids reassigned to stay unique.
    pub fn merge(stores: &[&CorrespondenceStore]) -> CorrespondenceStore {
        let mut tracks = Vec::new();
        let mut scenes = Vec::new();
        let mut next_id = 0u64;
        for store in stores {
            for track in &store.tracks {
                let mut t = track.clone();
                t.track_id = next_id;
                next_id += 1;
                tracks.push(t);
            }
            scenes.extend(store.scenes.iter().cloned());
        }
        CorrespondenceStore {
            tracks,
            scenes,
            provenance: Provenance { detector: "merged".into(), tolerance: 0.0, frames_per_scene: 0 },
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("patches"))
            .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let manifest =
            fs::File::create(dir.join("manifest.tsv")).map_err(|e| Error::io("creating manifest.tsv", e))?;
        let mut m = BufWriter::new(manifest);
        for track in &self.tracks {
            let tdir = dir.join("patches").join(track.track_id.to_string());
            fs::create_dir_all(&tdir).map_err(|e| Error::io(format!("creating {}", tdir.display()), e))?;
            for member in &track.members {
                let rel = format!("patches/{}/{}.pgm", track.track_id, member.frame_id);
                pgm::write_pgm(&dir.join(&rel), member.patch.side, member.patch.side, &member.patch.data)?;
                writeln!(
                    m,
                    "{}\t{}\t{}\t{}\t{}\t{}",
                    track.track_id, track.scene_id, member.frame_id, member.x, member.y, rel
                )
                .map_err(|e| Error::io("writing manifest.tsv", e))?;
            }
        }
        m.flush().map_err(|e| Error::io("writing manifest.tsv", e))?;

        let mut p = String::new();
        p.push_str(&format!("detector={}\n", self.provenance.detector));
        p.push_str(&format!("tolerance={}\n", self.provenance.tolerance));
        p.push_str(&format!("frames_per_scene={}\n", self.provenance.frames_per_scene));
        for s in &self.scenes {
            p.push_str(&format!("scene={}\t{}\t{}\n", s.scene_id, s.frame_count, s.frames_used));
        }
        fs::write(dir.join("provenance.txt"), p).map_err(|e| Error::io("writing provenance.txt", e))
    }

    pub fn load(dir: &Path) -> Result<CorrespondenceStore> {
        let mpath = dir.join("manifest.tsv");
        let corrupt = |detail: String| Error::CorruptManifest { path: mpath.clone(), detail };
        let text = fs::read_to_string(&mpath)
            .map_err(|e| Error::io(format!("reading {}", mpath.display()), e))?;

        let mut tracks: Vec<KeypointTrack> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 6 {
                return Err(corrupt(format!("line {}: expected 6 columns, got {}", lineno + 1, cols.len())));
            }
            let track_id: u64 =
                cols[0].parse().map_err(|_| corrupt(format!("line {}: bad track_id", lineno + 1)))?;
            let scene_id = cols[1].to_string();
            let frame_id: u64 =
                cols[2].parse().map_err(|_| corrupt(format!("line {}: bad frame_id", lineno + 1)))?;
            let x: f64 = cols[3].parse().map_err(|_| corrupt(format!("line {}: bad x", lineno + 1)))?;
            let y: f64 = cols[4].parse().map_err(|_| corrupt(format!("line {}: bad y", lineno + 1)))?;
            let rel = cols[5];

            let ppath = dir.join(rel);
            let (w, h, data) = pgm::read_pgm(&ppath)?;
            if w != h {
                return Err(Error::BadPgm { path: ppath, detail: format!("non-square patch {}x{}", w, h) });
            }
            let patch = Patch {
                side: w,
                data,
                source: PatchSource { scene_id: scene_id.clone(), frame_id, x, y },
            };
            let member = TrackMember { frame_id, x, y, patch };

            match tracks.last_mut() {
                Some(t) if t.track_id == track_id => {
                    if t.scene_id != scene_id {
                        return Err(corrupt(format!(
                            "track {} spans scenes {} and {}",
                            track_id, t.scene_id, scene_id
                        )));
                    }
                    if t.members.iter().any(|m| m.frame_id == frame_id) {
                        return Err(corrupt(format!("track {} lists frame {} twice", track_id, frame_id)));
                    }
                    t.members.push(member);
                }
                _ => {
                    if !seen.insert(track_id) {
                        return Err(corrupt(format!("duplicate track_id {}", track_id)));
                    }
                    tracks.push(KeypointTrack { track_id, scene_id, members: vec![member] });
                }
            }
        }

        let mut provenance = Provenance { detector: String::new(), tolerance: 0.0, frames_per_scene: 0 };
        let mut scenes = Vec::new();
        let ppath = dir.join("provenance.txt");
        if ppath.exists() {
            let ptext = fs::read_to_string(&ppath)
                .map_err(|e| Error::io(format!("reading {}", ppath.display()), e))?;
            for line in ptext.lines() {
                if let Some(v) = line.strip_prefix("detector=") {
                    provenance.detector = v.into();
                } else if let Some(v) = line.strip_prefix("tolerance=") {
                    provenance.tolerance = v.parse().unwrap_or(0.0);
                } else if let Some(v) = line.strip_prefix("frames_per_scene=") {
                    provenance.frames_per_scene = v.parse().unwrap_or(0);
                } else if let Some(v) = line.strip_prefix("scene=") {
                    let parts: Vec<&str> = v.split('\t').collect();
                    if parts.len() == 3 {
                        scenes.push(SceneInfo {
                            scene_id: parts[0].into(),
                            frame_count: parts[1].parse().unwrap_or(0),
                            frames_used: parts[2].parse().unwrap_or(0),
                        });
                    }
                }
            }
        }
        Ok(CorrespondenceStore { tracks, scenes, provenance })
    }
}

/// Evenly spaced frame indices; identity when the sequence is short.
/// Pure function of the two arguments.
pub fn subsample_indices(len: usize, target: usize) -> Vec<usize> {
    if len <= target || target == 0 {
        (0..len).collect()
    } else {
        (0..target).map(|i| i * len / target).collect()
    }
}

/// Proto-track emitted by position grouping, before patch extraction.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedTrack {
    pub canonical: (f64, f64),
    pub members: Vec<(u64, f64, f64)>, // (frame_id, x, y)
}

/// Greedy clustering of fixed-camera detections by pixel position.
///
/// Detections are processed in (frame, score desc) order; each joins the
/// nearest existing track within `tolerance_px` of its canonical position
/// (one member per frame per track) or seeds a new track. Tracks with a
/// single member are discarded.
pub fn group_by_position(per_frame: &[(u64, Vec<Keypoint>)], tolerance_px: f64) -> Vec<GroupedTrack> {
    let mut detections: Vec<(u64, &Keypoint)> = Vec::new();
    for (frame_id, kps) in per_frame {
        for kp in kps {
            detections.push((*frame_id, kp));
        }
    }
    detections.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then(b.1.score.total_cmp(&a.1.score))
            .then(a.1.x.total_cmp(&b.1.x))
            .then(a.1.y.total_cmp(&b.1.y))
    });

    let mut tracks: Vec<GroupedTrack> = Vec::new();
    for (frame_id, kp) in detections {
        let mut best: Option<(usize, f64)> = None;
        for (idx, track) in tracks.iter().enumerate() {
            if track.members.iter().any(|m| m.0 == frame_id) {
                continue;
            }
            let dx = kp.x - track.canonical.0;
            let dy = kp.y - track.canonical.1;
            let dist = (dx * dx + dy * dy).sqrt();
            if dist <= tolerance_px && best.map_or(true, |(_, d)| dist < d) {
                best = Some((idx, dist));
            }
        }
        match best {
            Some((idx, _)) => tracks[idx].members.push((frame_id, kp.x, kp.y)),
            None => tracks.push(GroupedTrack {
                canonical: (kp.x, kp.y),
                members: vec![(frame_id, kp.x, kp.y)],
            }),
        }
    }
    tracks.retain(|t| t.members.len() >= 2);
    tracks
}

/// One scene's frame sequence, in temporal order. `frame_id`s are the
/// positions in the original sequence.
#[derive(Debug, Clone)]
pub struct SceneFrames {
    pub scene_id: String,
    pub frames: Vec<Frame>,
}

/// Full fixed-camera pipeline: subsample frames, detect, group by
/// position, cut patches. Tracks whose patch window leaves the frame in
/// any member frame are dropped.
pub fn build_store(
    scenes: &[SceneFrames],
    detector: &DetectorConfig,
    tolerance_px: f64,
    frames_per_scene: usize,
) -> Result<CorrespondenceStore> {
    let mut tracks = Vec::new();
    let mut infos = Vec::new();
    let mut next_id = 0u64;
    for scene in scenes {
        if scene.frames.len() < 2 {
            return Err(Error::InvalidParams(format!(
                "scene '{}' has {} frames, need at least 2",
                scene.scene_id,
                scene.frames.len()
            )));
        }
        let keep = subsample_indices(scene.frames.len(), frames_per_scene);
        let imported = match detector {
            DetectorConfig::Import(path) => Some(load_keypoint_import(path)?),
            DetectorConfig::Harris(_) => None,
        };
        let mut per_frame = Vec::with_capacity(keep.len());
        for &fi in &keep {
            let frame = &scene.frames[fi];
            let kps = match detector {
                DetectorConfig::Harris(params) => detect_keypoints(frame, params)?,
                DetectorConfig::Import(_) => imported
                    .as_ref()
                    .unwrap()
                    .iter()
                    .filter(|(f, _)| *f == fi as u64)
                    .map(|(_, kp)| kp.clone())
                    .collect(),
            };
            per_frame.push((fi as u64, kps));
        }
        let grouped = group_by_position(&per_frame, tolerance_px);
        'tracks: for group in grouped {
            let mut members = Vec::with_capacity(group.members.len());
            for (frame_id, x, y) in group.members {
                let frame = &scene.frames[frame_id as usize];
                match extract_patch(frame, &scene.scene_id, frame_id, (x, y), PATCH_SIDE) {
                    Ok(patch) => members.push(TrackMember { frame_id, x, y, patch }),
                    Err(Error::OutOfBounds { .. }) => continue 'tracks,
                    Err(other) => return Err(other),
                }
            }
            tracks.push(KeypointTrack { track_id: next_id, scene_id: scene.scene_id.clone(), members });
            next_id += 1;
        }
        infos.push(SceneInfo {
            scene_id: scene.scene_id.clone(),
            frame_count: scene.frames.len(),
            frames_used: keep.len(),
        });
    }
    Ok(CorrespondenceStore {
        tracks,
        scenes: infos,
        provenance: Provenance {
            detector: detector.name().into(),
            tolerance: tolerance_px,
            frames_per_scene,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn white_square_frame(cx: usize, cy: usize) -> Frame {
        Frame::from_fn(128, 128, |x, y| {
            let inside = x >= cx - 2 && x <= cx + 2 && y >= cy - 2 && y <= cy + 2;
            if inside {
                255
            } else {
                0
            }
        })
    }

    #[test]
    fn extract_patch_at_frame_center_succeeds() {
        let frame = Frame::from_fn(128, 128, |x, y| ((x + y) % 256) as u8);
        let p = extract_patch(&frame, "s", 0, (64.0, 64.0), 64).unwrap();
        assert_eq!(p.side(), 64);
        assert_eq!(p.intensity(0, 0), frame.get(32, 32) as f32 / 255.0);
    }

    #[test]
    fn extract_patch_near_corner_is_out_of_bounds() {
        let frame = Frame::from_fn(128, 128, |_, _| 7);
        let err = extract_patch(&frame, "s", 0, (10.0, 10.0), 64).unwrap_err();
        assert!(matches!(err, Error::OutOfBounds { .. }));
    }

    #[test]
    fn extract_patch_of_constant_frame_is_constant() {
        let frame = Frame::from_fn(128, 128, |_, _| 42);
        let p = extract_patch(&frame, "s", 0, (64.0, 64.0), 64).unwrap();
        assert!(p.data().iter().all(|&v| v == 42));
    }

    #[test]
    fn grouping_merges_nearby_detections() {
        let kp = |x: f64, y: f64| Keypoint { x, y, score: 1.0 };
        let frames = vec![(0u64, vec![kp(100.0, 100.0)]), (1u64, vec![kp(100.4, 99.8)])];
        let tracks = group_by_position(&frames, 1.0);
        assert_eq!(tracks.len(), 1);
        assert_eq!(tracks[0].members.len(), 2);
        assert_eq!(tracks[0].canonical, (100.0, 100.0));
    }

    #[test]
    fn grouping_discards_singletons() {
        let kp = |x: f64, y: f64| Keypoint { x, y, score: 1.0 };
        let frames = vec![(0u64, vec![kp(100.0, 100.0)]), (1u64, vec![kp(105.0, 100.0)])];
        let tracks = group_by_position(&frames, 1.0);
        assert!(tracks.is_empty());
    }

    #[test]
    fn grouping_two_hundred_frames_ten_positions() {
        let positions: Vec<(f64, f64)> = (0..10).map(|i| (70.0 + 40.0 * (i % 4) as f64, 70.0 + 40.0 * (i / 4) as f64)).collect();
        let frames: Vec<(u64, Vec<Keypoint>)> = (0..200u64)
            .map(|f| {
                (f, positions.iter().map(|&(x, y)| Keypoint { x, y, score: 1.0 }).collect())
            })
            .collect();
        let tracks = group_by_position(&frames, 2.0);
        assert_eq!(tracks.len(), 10);
        assert!(tracks.iter().all(|t| t.members.len() == 200));
    }

    #[test]
    fn subsample_is_identity_when_short() {
        assert_eq!(subsample_indices(5, 10), vec![0, 1, 2, 3, 4]);
        let idx = subsample_indices(1000, 200);
        assert_eq!(idx.len(), 200);
        assert_eq!(idx[0], 0);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn build_store_on_two_identical_frames() {
        let scene = SceneFrames {
            scene_id: "cam0".into(),
            frames: vec![white_square_frame(64, 64), white_square_frame(64, 64)],
        };
        let store =
            build_store(&[scene], &DetectorConfig::Harris(HarrisParams::default()), 2.0, 200).unwrap();
        assert!(!store.tracks.is_empty());
        for track in &store.tracks {
            assert_eq!(track.members.len(), 2);
            assert_eq!(track.members[0].patch.data(), track.members[1].patch.data());
        }
    }

    #[test]
    fn empty_scene_list_round_trips() {
        let store = build_store(
            &[],
            &DetectorConfig::Harris(HarrisParams::default()),
            2.0,
            200,
        )
        .unwrap();
        assert!(store.tracks.is_empty());
        let dir = tempfile::tempdir().unwrap();
        store.save(dir.path()).unwrap();
        let back = CorrespondenceStore::load(dir.path()).unwrap();
        assert_eq!(back, store);
    }

    #[test]
    fn corrupt_manifest_duplicate_track_id() {
        let dir = tempfile::tempdir().unwrap();
        let store = synth_store(3, 2, 2, SynthMode::Illumination).unwrap();
        store.save(dir.path()).unwrap();
        // Re-list track 0 after track 1 has started.
        let mpath = dir.path().join("manifest.tsv");
        let mut text = fs::read_to_string(&mpath).unwrap();
        let first = text.lines().next().unwrap().to_string();
        text.push_str(&first.replace("\t0\t", "\t9\t"));
        text.push('\n');
        fs::write(&mpath, text).unwrap();
        let err = CorrespondenceStore::load(dir.path()).unwrap_err();
        assert!(matches!(err, Error::CorruptManifest { .. }), "{:?}", err);
    }

    #[test]
    fn missing_patch_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let store = synth_store(3, 2, 2, SynthMode::Illumination).unwrap();
        store.save(dir.path()).unwrap();
        let victim = dir.path().join("patches/0/0.pgm");
        fs::remove_file(&victim).unwrap();
        match CorrespondenceStore::load(dir.path()).unwrap_err() {
            Error::MissingPatchFile(p) => assert_eq!(p, victim),
            other => panic!("unexpected error {:?}", other),
        }
    }
}
