//! Synthetic multi-view scenes with exact ground-truth warps.
//!
//! A scene is an analytic texture (sum of random low-frequency sinusoids plus
//! mild lattice noise) viewed through per-view similarity homographies with
//! bounded rotation (≤15°), scale ([0.8, 1.25]) and translation (≤12% of the
//! image size). Every view samples the texture analytically, so warps between
//! views are exact homography compositions rather than resampled rasters.

use crate::error::{MumError, Result};
use crate::numerics::Array;
use crate::rng::Rng;
use crate::scene::{FrameRecord, GroundTruthWarp, SceneSequence};

/// 3×3 projective transform acting on pixel coordinates (x, y).
#[derive(Clone, Copy, Debug)]
pub struct Homography {
    pub m: [[f64; 3]; 3],
}

impl Homography {
    pub fn identity() -> Homography {
        Homography {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Homography {
        Homography {
            m: [[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]],
        }
    }

    /// Rotation by `angle` and uniform `scale` about (cx, cy), then a
    /// translation by (tx, ty).
    pub fn similarity_about(
        cx: f64,
        cy: f64,
        angle: f64,
        scale: f64,
        tx: f64,
        ty: f64,
    ) -> Homography {
        let (s, c) = angle.sin_cos();
        let (a, b) = (scale * c, scale * s);
        // T(center+t) · R·S · T(-center)
        Homography {
            m: [
                [a, -b, cx + tx - a * cx + b * cy],
                [b, a, cy + ty - b * cx - a * cy],
                [0.0, 0.0, 1.0],
            ],
        }
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.m;
        let u = m[0][0] * x + m[0][1] * y + m[0][2];
        let v = m[1][0] * x + m[1][1] * y + m[1][2];
        let w = m[2][0] * x + m[2][1] * y + m[2][2];
        (u / w, v / w)
    }

    /// self ∘ other: apply `other` first.
    pub fn after(&self, other: &Homography) -> Homography {
        let (a, b) = (&self.m, &other.m);
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    m[i][j] += a[i][k] * b[k][j];
                }
            }
        }
        Homography { m }
    }

    pub fn inverse(&self) -> Homography {
        let m = &self.m;
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        let d = 1.0 / det;
        Homography {
            m: [
                [
                    (m[1][1] * m[2][2] - m[1][2] * m[2][1]) * d,
                    (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * d,
                    (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * d,
                ],
                [
                    (m[1][2] * m[2][0] - m[1][0] * m[2][2]) * d,
                    (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * d,
                    (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * d,
                ],
                [
                    (m[1][0] * m[2][1] - m[1][1] * m[2][0]) * d,
                    (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * d,
                    (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * d,
                ],
            ],
        }
    }
}

struct Wave {
    kx: f64,
    ky: f64,
    phase: f64,
    amp: [f64; 3],
}

/// Analytic scene texture evaluated in canonical (view 0) coordinates.
pub struct Texture {
    waves: Vec<Wave>,
    amp_total: [f64; 3],
    noise_seed: u64,
    noise_amp: f64,
    noise_cell: f64,
}

const NOISE_MIX: u64 = 0x2545_f491_4f6c_dd1d;

fn lattice_hash(ix: i64, iy: i64, seed: u64) -> f64 {
    let mut z = seed
        ^ (ix as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (iy as u64).wrapping_mul(NOISE_MIX);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

impl Texture {
    pub fn sample(rng: &mut Rng, h: usize, w: usize) -> Texture {
        let size = h.max(w) as f64;
        let n_waves = 5;
        let mut waves = Vec::with_capacity(n_waves);
        let mut amp_total = [0.0; 3];
        for _ in 0..n_waves {
            let cycles = rng.uniform_in(0.4, 1.6);
            let theta = rng.uniform_in(0.0, std::f64::consts::TAU);
            let k = std::f64::consts::TAU * cycles / size;
            let amp = [
                rng.uniform_in(0.3, 1.0),
                rng.uniform_in(0.3, 1.0),
                rng.uniform_in(0.3, 1.0),
            ];
            for c in 0..3 {
                amp_total[c] += amp[c];
            }
            waves.push(Wave {
                kx: k * theta.cos(),
                ky: k * theta.sin(),
                phase: rng.uniform_in(0.0, std::f64::consts::TAU),
                amp,
            });
        }
        Texture {
            waves,
            amp_total,
            noise_seed: rng.next_u64(),
            noise_amp: 0.02,
            noise_cell: 6.0,
        }
    }

    fn noise(&self, x: f64, y: f64) -> f64 {
        let gx = x / self.noise_cell;
        let gy = y / self.noise_cell;
        let ix = gx.floor();
        let iy = gy.floor();
        let fx = gx - ix;
        let fy = gy - iy;
        let (ix, iy) = (ix as i64, iy as i64);
        let v00 = lattice_hash(ix, iy, self.noise_seed);
        let v10 = lattice_hash(ix + 1, iy, self.noise_seed);
        let v01 = lattice_hash(ix, iy + 1, self.noise_seed);
        let v11 = lattice_hash(ix + 1, iy + 1, self.noise_seed);
        let a = v00 + (v10 - v00) * fx;
        let b = v01 + (v11 - v01) * fx;
        a + (b - a) * fy
    }

    /// RGB value at canonical coordinates, inside [0.08, 0.92].
    pub fn eval(&self, x: f64, y: f64) -> [f64; 3] {
        let mut acc = [0.0; 3];
        for wave in &self.waves {
            let s = (wave.kx * x + wave.ky * y + wave.phase).sin();
            for c in 0..3 {
                acc[c] += wave.amp[c] * s;
            }
        }
        let n = self.noise(x, y) * self.noise_amp;
        let mut out = [0.0; 3];
        for c in 0..3 {
            out[c] = 0.5 + 0.38 * acc[c] / self.amp_total[c] + n;
        }
        out
    }
}

/// Render a scene from explicit per-view homographies (canonical → view) and
/// per-view photometric jitter `(gain, bias)`. Returns the frames plus the
/// exact warp for every ordered view pair.
pub fn render_scene(
    scene_id: &str,
    texture: &Texture,
    homographies: &[Homography],
    jitter: &[(f64, f64)],
    h: usize,
    w: usize,
) -> Result<(SceneSequence, Vec<GroundTruthWarp>)> {
    if homographies.is_empty() || jitter.len() != homographies.len() {
        return Err(MumError::contract(
            "render_scene",
            "need one homography and one jitter pair per view",
        ));
    }
    let mut frames = Vec::with_capacity(homographies.len());
    for (i, (hom, &(gain, bias))) in homographies.iter().zip(jitter).enumerate() {
        let inv = hom.inverse();
        let mut data = vec![0.0; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let (cx, cy) = inv.apply(x as f64, y as f64);
                let rgb = texture.eval(cx, cy);
                for (c, &v) in rgb.iter().enumerate() {
                    data[c * h * w + y * w + x] = (gain * v + bias).clamp(0.0, 1.0);
                }
            }
        }
        frames.push(FrameRecord {
            frame_id: format!("{scene_id}-f{i:03}"),
            image: Array::from_vec(&[3, h, w], data)?,
            scene_id: scene_id.to_string(),
            order_index: i,
        });
    }

    let mut warps = Vec::new();
    for a in 0..homographies.len() {
        for b in 0..homographies.len() {
            if a == b {
                continue;
            }
            let hab = homographies[b].after(&homographies[a].inverse());
            warps.push(GroundTruthWarp::from_homography(
                frames[a].frame_id.clone(),
                frames[b].frame_id.clone(),
                &hab,
                h,
                w,
            )?);
        }
    }
    Ok((SceneSequence::new(scene_id.to_string(), frames)?, warps))
}

/// Generate a scene of `n_views` views of one random texture. View 0 is the
/// canonical view; the others are bounded random similarities of it with
/// small photometric jitter.
pub fn generate_synthetic_scene(
    rng_seed: u64,
    n_views: usize,
    h: usize,
    w: usize,
) -> Result<(SceneSequence, Vec<GroundTruthWarp>)> {
    if n_views < 1 {
        return Err(MumError::contract(
            "generate_synthetic_scene",
            "n_views must be >= 1",
        ));
    }
    if h < 32 || w < 32 {
        return Err(MumError::contract(
            "generate_synthetic_scene",
            format!("image {h}x{w} below the 32-pixel minimum"),
        ));
    }
    let mut tex_rng = Rng::stream(rng_seed, 0, 0);
    let mut geo_rng = Rng::stream(rng_seed, 1, 0);
    let mut photo_rng = Rng::stream(rng_seed, 2, 0);

    let texture = Texture::sample(&mut tex_rng, h, w);
    let max_angle = 15.0_f64.to_radians();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let mut homographies = vec![Homography::identity()];
    let mut jitter = vec![(1.0, 0.0)];
    for _ in 1..n_views {
        homographies.push(Homography::similarity_about(
            cx,
            cy,
            geo_rng.uniform_in(-max_angle, max_angle),
            geo_rng.uniform_in(0.8, 1.25),
            geo_rng.uniform_in(-0.12, 0.12) * w as f64,
            geo_rng.uniform_in(-0.12, 0.12) * h as f64,
        ));
        jitter.push((
            photo_rng.uniform_in(0.96, 1.04),
            photo_rng.uniform_in(-0.03, 0.03),
        ));
    }
    let scene_id = format!("synth-{rng_seed:08x}");
    render_scene(&scene_id, &texture, &homographies, &jitter, h, w)
}
