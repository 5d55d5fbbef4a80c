//! Training batch composition.
//!
//! Multi-view batches draw a sequence length S uniformly, then pack
//! `floor(frames_per_device / S)` sequences of S frames each; with
//! `single_view_prob` a batch of single frames is drawn instead. Frames are
//! resized to a square and flipped horizontally per frame, independently.

use serde::{Deserialize, Serialize};

use crate::error::{MumError, Result};
use crate::numerics::Array;
use crate::rng::Rng;
use crate::scene::{FrameRecord, SceneSequence};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub min_len: usize,
    pub max_len: usize,
    pub frames_per_device: usize,
    pub single_view_prob: f64,
    pub image_size: usize,
    pub flip_prob: f64,
    pub rng_seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            min_len: 2,
            max_len: 24,
            frames_per_device: 96,
            single_view_prob: 0.1,
            image_size: 256,
            flip_prob: 0.5,
            rng_seed: 0,
        }
    }
}

impl SamplerConfig {
    /// All configuration problems, empty when valid.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.min_len < 1 {
            out.push("sampler.min_len must be >= 1".into());
        }
        if self.min_len > self.max_len {
            out.push(format!(
                "sampler.min_len {} exceeds max_len {}",
                self.min_len, self.max_len
            ));
        }
        if self.max_len > self.frames_per_device {
            out.push(format!(
                "sampler.max_len {} exceeds frames_per_device {}",
                self.max_len, self.frames_per_device
            ));
        }
        if !(0.0..=1.0).contains(&self.single_view_prob) {
            out.push("sampler.single_view_prob must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            out.push("sampler.flip_prob must lie in [0, 1]".into());
        }
        if self.image_size == 0 {
            out.push("sampler.image_size must be positive".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(MumError::config(problems))
        }
    }
}

/// A composed batch of shape (B, S, 3, image_size, image_size).
#[derive(Clone, Debug)]
pub struct MultiViewBatch {
    pub pixels: Array,
    pub scene_ids: Vec<String>,
    /// flipped[b][s]: whether frame s of row b was mirrored.
    pub flipped: Vec<Vec<bool>>,
}

impl MultiViewBatch {
    pub fn rows(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn views(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn image_size(&self) -> usize {
        self.pixels.shape()[3]
    }

    /// Copy of view `s` of row `b` as a (3, size, size) array.
    pub fn frame(&self, b: usize, s: usize) -> Array {
        let sz = self.image_size();
        let stride = 3 * sz * sz;
        let base = (b * self.views() + s) * stride;
        Array::from_vec(
            &[3, sz, sz],
            self.pixels.data()[base..base + stride].to_vec(),
        )
        .unwrap()
    }
}

/// Sequence length uniform on [min_len, max_len].
pub fn draw_sequence_length(cfg: &SamplerConfig, rng: &mut Rng) -> usize {
    rng.range_inclusive(cfg.min_len, cfg.max_len)
}

/// Draw `s` distinct frames uniformly without replacement, keeping their
/// original order.
pub fn select_frames<'a>(
    seq: &'a SceneSequence,
    s: usize,
    rng: &mut Rng,
) -> Result<Vec<&'a FrameRecord>> {
    if s == 0 {
        return Err(MumError::contract("select_frames", "S must be positive"));
    }
    if seq.len() < s {
        return Err(MumError::contract(
            "select_frames",
            format!("sequence '{}' has {} < {s} frames", seq.scene_id, seq.len()),
        ));
    }
    Ok(rng
        .distinct_sorted(seq.len(), s)
        .into_iter()
        .map(|i| &seq.frames[i])
        .collect())
}

/// Bilinear resize of a (3, H, W) image to (3, size, size); no aspect
/// preservation, no antialiasing. Source coordinates follow the
/// half-pixel-center convention `(dst + 0.5) * scale - 0.5`.
pub fn resize_bilinear(image: &Array, size: usize) -> Result<Array> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(MumError::Shape {
            op: "resize_bilinear",
            shape: shape.to_vec(),
            reason: "expected (3, H, W)".into(),
        });
    }
    let (h, w) = (shape[1], shape[2]);
    if h == size && w == size {
        return Ok(image.clone());
    }
    let sy = h as f64 / size as f64;
    let sx = w as f64 / size as f64;
    let data = image.data();
    let mut out = vec![0.0; 3 * size * size];
    for y in 0..size {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for x in 0..size {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            for c in 0..3 {
                let plane = &data[c * h * w..(c + 1) * h * w];
                let v00 = plane[y0 * w + x0];
                let v10 = plane[y0 * w + x1];
                let v01 = plane[y1 * w + x0];
                let v11 = plane[y1 * w + x1];
                let top = v00 + (v10 - v00) * tx;
                let bot = v01 + (v11 - v01) * tx;
                out[c * size * size + y * size + x] = top + (bot - top) * ty;
            }
        }
    }
    Array::from_vec(&[3, size, size], out)
}

/// Mirror a (3, H, W) image left-right.
pub fn hflip_image(image: &Array) -> Array {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let data = image.data();
    let mut out = vec![0.0; data.len()];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                out[c * h * w + y * w + x] = data[c * h * w + y * w + (w - 1 - x)];
            }
        }
    }
    Array::from_vec(image.shape(), out).unwrap()
}

const RESAMPLE_LIMIT: usize = 256;

/// A pool of sequences with a relative sampling weight, for mixtures of
/// datasets ("dataset" probabilities are the caller's to provide).
pub struct WeightedPool<'a> {
    pub sequences: &'a [SceneSequence],
    pub weight: f64,
}

struct RowBuilder {
    s: usize,
    size: usize,
    pixels: Vec<f64>,
    scene_ids: Vec<String>,
    flipped: Vec<Vec<bool>>,
}

impl RowBuilder {
    fn new(b: usize, s: usize, size: usize) -> RowBuilder {
        RowBuilder {
            s,
            size,
            pixels: Vec::with_capacity(b * s * 3 * size * size),
            scene_ids: Vec::with_capacity(b),
            flipped: Vec::with_capacity(b),
        }
    }

    fn push(&mut self, seq: &SceneSequence, cfg: &SamplerConfig, rng: &mut Rng) -> Result<()> {
        let frames = select_frames(seq, self.s, rng)?;
        let mut row_flips = Vec::with_capacity(self.s);
        for f in frames {
            let mut img = resize_bilinear(&f.image, self.size)?;
            let flip = rng.bernoulli(cfg.flip_prob);
            if flip {
                img = hflip_image(&img);
            }
            row_flips.push(flip);
            self.pixels.extend_from_slice(img.data());
        }
        self.scene_ids.push(seq.scene_id.clone());
        self.flipped.push(row_flips);
        Ok(())
    }

    fn finish(self, b: usize) -> Result<MultiViewBatch> {
        Ok(MultiViewBatch {
            pixels: Array::from_vec(&[b, self.s, 3, self.size, self.size], self.pixels)?,
            scene_ids: self.scene_ids,
            flipped: self.flipped,
        })
    }
}

fn rows_for(s: usize, cfg: &SamplerConfig) -> Result<usize> {
    let b = cfg.frames_per_device / s;
    if b == 0 {
        return Err(MumError::Sampling(format!(
            "sequence length {s} exceeds frames_per_device {}",
            cfg.frames_per_device
        )));
    }
    Ok(b)
}

/// Compose a multi-view batch of a fixed sequence length `s`:
/// `floor(frames_per_device / s)` rows, each holding `s` frames of one
/// sequence, resized and per-frame flipped.
pub fn compose_multiview(
    pool: &[SceneSequence],
    s: usize,
    cfg: &SamplerConfig,
    rng: &mut Rng,
) -> Result<MultiViewBatch> {
    if pool.is_empty() {
        return Err(MumError::Sampling("multi-view pool is empty".into()));
    }
    let b = rows_for(s, cfg)?;
    let mut rows = RowBuilder::new(b, s, cfg.image_size);
    for _ in 0..b {
        let mut attempts = 0;
        let seq = loop {
            let candidate = &pool[rng.below(pool.len())];
            if candidate.len() >= s {
                break candidate;
            }
            attempts += 1;
            if attempts >= RESAMPLE_LIMIT {
                return Err(MumError::Sampling(format!(
                    "no sequence of length >= {s} found after {RESAMPLE_LIMIT} draws"
                )));
            }
        };
        rows.push(seq, cfg, rng)?;
    }
    rows.finish(b)
}

/// Like [`compose_multiview`] but drawing each row's dataset first by the
/// given weights, then a sequence uniformly within it.
pub fn compose_multiview_weighted(
    pools: &[WeightedPool],
    s: usize,
    cfg: &SamplerConfig,
    rng: &mut Rng,
) -> Result<MultiViewBatch> {
    if pools.iter().all(|p| p.sequences.is_empty()) {
        return Err(MumError::Sampling("every weighted pool is empty".into()));
    }
    let total: f64 = pools.iter().map(|p| p.weight).sum();
    if !total.is_finite() || total <= 0.0 || pools.iter().any(|p| p.weight < 0.0) {
        return Err(MumError::Sampling(
            "pool weights must be non-negative with a positive sum".into(),
        ));
    }
    let b = rows_for(s, cfg)?;
    let mut rows = RowBuilder::new(b, s, cfg.image_size);
    for _ in 0..b {
        let mut attempts = 0;
        let seq = loop {
            let mut x = rng.uniform() * total;
            let mut chosen = &pools[pools.len() - 1];
            for p in pools {
                if x < p.weight {
                    chosen = p;
                    break;
                }
                x -= p.weight;
            }
            if !chosen.sequences.is_empty() {
                let candidate = &chosen.sequences[rng.below(chosen.sequences.len())];
                if candidate.len() >= s {
                    break candidate;
                }
            }
            attempts += 1;
            if attempts >= RESAMPLE_LIMIT {
                return Err(MumError::Sampling(format!(
                    "no sequence of length >= {s} found after {RESAMPLE_LIMIT} weighted draws"
                )));
            }
        };
        rows.push(seq, cfg, rng)?;
    }
    rows.finish(b)
}

/// Compose a single-view batch of shape (frames_per_device, 1, 3, size, size)
/// drawn uniformly with replacement from the single-view pool.
pub fn compose_single_view(
    single_view_pool: &[FrameRecord],
    cfg: &SamplerConfig,
    rng: &mut Rng,
) -> Result<MultiViewBatch> {
    if single_view_pool.is_empty() {
        return Err(MumError::Sampling("single-view pool is empty".into()));
    }
    let b = cfg.frames_per_device;
    let sz = cfg.image_size;
    let mut pixels = Vec::with_capacity(b * 3 * sz * sz);
    let mut scene_ids = Vec::with_capacity(b);
    let mut flipped = Vec::with_capacity(b);
    for _ in 0..b {
        let f = &single_view_pool[rng.below(single_view_pool.len())];
        let mut img = resize_bilinear(&f.image, sz)?;
        let flip = rng.bernoulli(cfg.flip_prob);
        if flip {
            img = hflip_image(&img);
        }
        pixels.extend_from_slice(img.data());
        scene_ids.push(f.scene_id.clone());
        flipped.push(vec![flip]);
    }
    Ok(MultiViewBatch {
        pixels: Array::from_vec(&[b, 1, 3, sz, sz], pixels)?,
        scene_ids,
        flipped,
    })
}

/// One training batch: the single-view branch with probability
/// `single_view_prob`, otherwise a multi-view batch at a uniformly drawn
/// sequence length.
pub fn compose_batch(
    pool: &[SceneSequence],
    single_view_pool: &[FrameRecord],
    cfg: &SamplerConfig,
    rng: &mut Rng,
) -> Result<MultiViewBatch> {
    if rng.bernoulli(cfg.single_view_prob) {
        compose_single_view(single_view_pool, cfg, rng)
    } else {
        let s = draw_sequence_length(cfg, rng);
        compose_multiview(pool, s, cfg, rng)
    }
}

/// [`compose_batch`] over a weighted dataset mixture.
pub fn compose_batch_weighted(
    pools: &[WeightedPool],
    single_view_pool: &[FrameRecord],
    cfg: &SamplerConfig,
    rng: &mut Rng,
) -> Result<MultiViewBatch> {
    if rng.bernoulli(cfg.single_view_prob) {
        compose_single_view(single_view_pool, cfg, rng)
    } else {
        let s = draw_sequence_length(cfg, rng);
        compose_multiview_weighted(pools, s, cfg, rng)
    }
}
