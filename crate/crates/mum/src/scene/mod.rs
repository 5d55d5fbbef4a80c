//! Scene data: frames, sequences, overlap-driven sequence construction, a
//! synthetic generator with exact ground-truth warps, and manifest loading.

pub mod manifest;
pub mod synthetic;

pub use manifest::{load_manifest, save_dataset, ManifestIndex, WarpIndex};
pub use synthetic::{generate_synthetic_scene, render_scene, Homography, Texture};

use crate::error::{MumError, Result};
use crate::numerics::Array;
use crate::rng::Rng;

/// One image of one scene.
#[derive(Clone, Debug)]
pub struct FrameRecord {
    pub frame_id: String,
    /// (3, H, W) pixel values in [0, 1].
    pub image: Array,
    pub scene_id: String,
    pub order_index: usize,
}

impl FrameRecord {
    pub fn validate(&self) -> Result<()> {
        let shape = self.image.shape();
        if shape.len() != 3 || shape[0] != 3 || shape[1] == 0 || shape[2] == 0 {
            return Err(MumError::Shape {
                op: "frame_record",
                shape: shape.to_vec(),
                reason: format!("frame '{}' must be (3, H, W)", self.frame_id),
            });
        }
        if !self.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)) {
            return Err(MumError::Ingest {
                frame_id: self.frame_id.clone(),
                reason: "pixel values outside [0, 1]".into(),
            });
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

/// An ordered list of frames of one scene.
#[derive(Clone, Debug)]
pub struct SceneSequence {
    pub scene_id: String,
    pub frames: Vec<FrameRecord>,
}

impl SceneSequence {
    pub fn new(scene_id: String, frames: Vec<FrameRecord>) -> Result<SceneSequence> {
        if frames.is_empty() {
            return Err(MumError::contract("scene_sequence", "no frames"));
        }
        if let Some(f) = frames.iter().find(|f| f.scene_id != scene_id) {
            return Err(MumError::contract(
                "scene_sequence",
                format!(
                    "frame '{}' belongs to scene '{}', not '{}'",
                    f.frame_id, f.scene_id, scene_id
                ),
            ));
        }
        Ok(SceneSequence { scene_id, frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Pairwise overlap scores between frames; symmetric, diagonal ignored.
#[derive(Clone, Debug)]
pub struct OverlapMatrix {
    scores: Array,
    pub frame_ids: Vec<String>,
}

impl OverlapMatrix {
    pub fn new(scores: Array, frame_ids: Vec<String>) -> Result<OverlapMatrix> {
        let f = frame_ids.len();
        if scores.shape() != [f, f] {
            return Err(MumError::Shape {
                op: "overlap_matrix",
                shape: scores.shape().to_vec(),
                reason: format!("expected ({f}, {f}) for {f} frame ids"),
            });
        }
        for i in 0..f {
            for j in 0..f {
                let v = scores.at2(i, j);
                if v < 0.0 || !v.is_finite() {
                    return Err(MumError::contract(
                        "overlap_matrix",
                        format!("score ({i},{j}) = {v} must be finite and >= 0"),
                    ));
                }
                if (v - scores.at2(j, i)).abs() > 1e-12 {
                    return Err(MumError::contract(
                        "overlap_matrix",
                        format!("matrix not symmetric at ({i},{j})"),
                    ));
                }
            }
        }
        Ok(OverlapMatrix { scores, frame_ids })
    }

    pub fn len(&self) -> usize {
        self.frame_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_ids.is_empty()
    }

    pub fn score(&self, i: usize, j: usize) -> f64 {
        self.scores.at2(i, j)
    }
}

/// Dense correspondence field from a source view to a target view.
///
/// `warp` has shape (H, W, 2) holding target (x, y) pixel coordinates for
/// each source pixel; `valid` marks source pixels whose target lands inside
/// the target image bounds `[0, W-1] × [0, H-1]`.
#[derive(Clone, Debug)]
pub struct GroundTruthWarp {
    pub source_id: String,
    pub target_id: String,
    pub warp: Array,
    pub valid: Vec<bool>,
}

impl GroundTruthWarp {
    pub fn from_homography(
        source_id: String,
        target_id: String,
        hom: &Homography,
        h: usize,
        w: usize,
    ) -> Result<GroundTruthWarp> {
        let mut data = Vec::with_capacity(h * w * 2);
        let mut valid = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let (u, v) = hom.apply(x as f64, y as f64);
                data.push(u);
                data.push(v);
                valid.push(u >= 0.0 && u <= (w - 1) as f64 && v >= 0.0 && v <= (h - 1) as f64);
            }
        }
        Ok(GroundTruthWarp {
            source_id,
            target_id,
            warp: Array::from_vec(&[h, w, 2], data)?,
            valid,
        })
    }

    pub fn height(&self) -> usize {
        self.warp.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.warp.shape()[1]
    }

    /// Target coordinates (x, y) for source pixel (x, y).
    pub fn at(&self, x: usize, y: usize) -> (f64, f64) {
        let w = self.width();
        let base = (y * w + x) * 2;
        (self.warp.data()[base], self.warp.data()[base + 1])
    }

    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.width() + x]
    }

    /// Bilinear sample of the warp field at fractional source coordinates.
    /// Returns `None` when any of the four surrounding pixels is invalid or
    /// out of range.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let (h, w) = (self.height(), self.width());
        if !(0.0..=(w - 1) as f64).contains(&x) || !(0.0..=(h - 1) as f64).contains(&y) {
            return None;
        }
        let x0 = (x.floor() as usize).min(w.saturating_sub(2));
        let y0 = (y.floor() as usize).min(h.saturating_sub(2));
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        for &(xx, yy) in &[(x0, y0), (x1, y0), (x0, y1), (x1, y1)] {
            if !self.is_valid(xx, yy) {
                return None;
            }
        }
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let lerp =
            |a: (f64, f64), b: (f64, f64), t: f64| (a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t);
        let top = lerp(self.at(x0, y0), self.at(x1, y0), fx);
        let bot = lerp(self.at(x0, y1), self.at(x1, y1), fx);
        Some(lerp(top, bot, fy))
    }

    /// The warp after horizontally mirroring both source and target images.
    pub fn hflip(&self) -> GroundTruthWarp {
        let (h, w) = (self.height(), self.width());
        let mut data = vec![0.0; h * w * 2];
        let mut valid = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                let sx = w - 1 - x;
                let (u, v) = self.at(sx, y);
                let base = (y * w + x) * 2;
                data[base] = (w - 1) as f64 - u;
                data[base + 1] = v;
                valid[y * w + x] = self.is_valid(sx, y);
            }
        }
        GroundTruthWarp {
            source_id: self.source_id.clone(),
            target_id: self.target_id.clone(),
            warp: Array::from_vec(&[h, w, 2], data).unwrap(),
            valid,
        }
    }
}

/// Split ordered frames of one scene into consecutive disjoint chunks of at
/// most `chunk_size`. A final short chunk is kept only when it has at least
/// two frames.
pub fn build_sequences_chunked(
    frames: &[FrameRecord],
    chunk_size: usize,
) -> Result<Vec<SceneSequence>> {
    if chunk_size == 0 {
        return Err(MumError::contract(
            "build_sequences_chunked",
            "chunk_size must be positive",
        ));
    }
    if frames.is_empty() {
        return Ok(vec![]);
    }
    let scene_id = &frames[0].scene_id;
    if frames.iter().any(|f| &f.scene_id != scene_id) {
        return Err(MumError::contract(
            "build_sequences_chunked",
            "frames span multiple scenes",
        ));
    }
    if frames
        .windows(2)
        .any(|w| w[0].order_index > w[1].order_index)
    {
        return Err(MumError::contract(
            "build_sequences_chunked",
            "frames must be sorted by order_index",
        ));
    }
    let mut out = Vec::new();
    for chunk in frames.chunks(chunk_size) {
        if chunk.len() < chunk_size && chunk.len() < 2 {
            continue; // drop a degenerate final chunk
        }
        out.push(SceneSequence::new(scene_id.clone(), chunk.to_vec())?);
    }
    Ok(out)
}

/// Greedily chain frames by positive overlap: each sequence starts at a
/// random anchor and repeatedly appends the unused frame with the highest
/// positive overlap to the current frame (ties to the lowest index) until
/// none remains. Sequences shorter than `min_len` are discarded, so fewer
/// than `num_sequences` may be returned.
pub fn build_sequences_chained(
    overlap: &OverlapMatrix,
    num_sequences: usize,
    min_len: usize,
    rng_seed: u64,
) -> Vec<Vec<String>> {
    let f = overlap.len();
    if f == 0 {
        return vec![];
    }
    let mut rng = Rng::new(rng_seed);
    let mut out = Vec::new();
    for _ in 0..num_sequences {
        let anchor = rng.below(f);
        let mut used = vec![false; f];
        used[anchor] = true;
        let mut chain = vec![anchor];
        let mut current = anchor;
        loop {
            let mut best: Option<(usize, f64)> = None;
            for j in 0..f {
                if used[j] || j == current {
                    continue;
                }
                let s = overlap.score(current, j);
                if s > 0.0 && best.map_or(true, |(_, bs)| s > bs) {
                    best = Some((j, s));
                }
            }
            match best {
                Some((j, _)) => {
                    used[j] = true;
                    chain.push(j);
                    current = j;
                }
                None => break,
            }
        }
        if chain.len() >= min_len {
            out.push(
                chain
                    .into_iter()
                    .map(|i| overlap.frame_ids[i].clone())
                    .collect(),
            );
        }
    }
    out
}
