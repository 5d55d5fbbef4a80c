//! Axial rotary position embedding: precomputed rotation tables.
//!
//! For a head dimension `d`, the first `d/2` lanes are rotated by angles
//! derived from the token's grid row and the second `d/2` lanes by angles
//! from its grid column. Within each half, adjacent pairs `(2j, 2j+1)` are
//! rotated by `pos * base^(-2j/(d/2))`.

use crate::error::{MumError, Result};

/// Per-token cos/sin tables shared by every head.
#[derive(Clone, Debug)]
pub struct RopePlan {
    pub head_dim: usize,
    /// pairs per half = head_dim / 4
    pairs: usize,
    tokens: usize,
    cos_row: Vec<f64>,
    sin_row: Vec<f64>,
    cos_col: Vec<f64>,
    sin_col: Vec<f64>,
}

impl RopePlan {
    pub fn new(positions: &[(u32, u32)], head_dim: usize, base: f64) -> Result<RopePlan> {
        if head_dim % 4 != 0 {
            return Err(MumError::Contract {
                op: "rope",
                reason: format!("head_dim {head_dim} must be divisible by 4"),
            });
        }
        let half = head_dim / 2;
        let pairs = half / 2;
        let tokens = positions.len();
        let freqs: Vec<f64> = (0..pairs)
            .map(|j| base.powf(-2.0 * j as f64 / half as f64))
            .collect();
        let mut cos_row = Vec::with_capacity(tokens * pairs);
        let mut sin_row = Vec::with_capacity(tokens * pairs);
        let mut cos_col = Vec::with_capacity(tokens * pairs);
        let mut sin_col = Vec::with_capacity(tokens * pairs);
        for &(r, c) in positions {
            for &f in &freqs {
                let ar = r as f64 * f;
                let ac = c as f64 * f;
                cos_row.push(ar.cos());
                sin_row.push(ar.sin());
                cos_col.push(ac.cos());
                sin_col.push(ac.sin());
            }
        }
        Ok(RopePlan {
            head_dim,
            pairs,
            tokens,
            cos_row,
            sin_row,
            cos_col,
            sin_col,
        })
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    /// Rotate `data` of shape (tokens, heads*head_dim) in place.
    /// `invert` applies the transpose (inverse) rotation.
    pub fn apply(&self, data: &mut [f64], heads: usize, invert: bool) {
        let width = heads * self.head_dim;
        debug_assert_eq!(data.len(), self.tokens * width);
        let half = self.head_dim / 2;
        let sgn = if invert { -1.0 } else { 1.0 };
        for t in 0..self.tokens {
            let row = &mut data[t * width..(t + 1) * width];
            let tab = t * self.pairs;
            for h in 0..heads {
                let head = &mut row[h * self.head_dim..(h + 1) * self.head_dim];
                for j in 0..self.pairs {
                    let (cr, sr) = (self.cos_row[tab + j], sgn * self.sin_row[tab + j]);
                    let (x, y) = (head[2 * j], head[2 * j + 1]);
                    head[2 * j] = x * cr - y * sr;
                    head[2 * j + 1] = x * sr + y * cr;

                    let (cc, sc) = (self.cos_col[tab + j], sgn * self.sin_col[tab + j]);
                    let (x, y) = (head[half + 2 * j], head[half + 2 * j + 1]);
                    head[half + 2 * j] = x * cc - y * sc;
                    head[half + 2 * j + 1] = x * sc + y * cc;
                }
            }
        }
    }
}
