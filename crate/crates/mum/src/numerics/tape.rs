//! Reverse-mode automatic differentiation over [`Array`] values.
//!
//! A [`Tape`] records the forward computation as a flat list of nodes; each
//! non-leaf node owns a closure that maps its output gradient to parent
//! gradients. [`Tape::backward`] walks the list in reverse from a scalar
//! root, accumulating gradients in index order so results are deterministic.
//!
//! Forward evaluation is single-threaded per tape; independent tapes may run
//! in parallel. Arrays are immutable once recorded.

use crate::error::{MumError, Result};
use crate::numerics::array::{matmul_nn, matmul_nt, matmul_tn, Array};
use crate::numerics::rope::RopePlan;

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    id: usize,
}

type GradFn = Box<dyn Fn(&Tape, &Array) -> Vec<Array>>;

struct Node {
    value: Array,
    parents: Vec<usize>,
    grad_fn: Option<GradFn>,
    needs_grad: bool,
    is_leaf: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    /// Gradient of the root w.r.t. `v`; `None` when `v` was not tracked or
    /// does not influence the root (i.e. the gradient is zero).
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

/// Attention configuration: head count, contiguous token groups, and an
/// optional rotary plan applied to queries and keys.
pub struct AttnSpec {
    pub heads: usize,
    /// (start, len) spans that partition 0..tokens in ascending order.
    pub groups: Vec<(usize, usize)>,
    pub rope: Option<RopePlan>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value held by `v`.
    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.id].value
    }

    fn push(&mut self, value: Array, parents: Vec<usize>, grad_fn: Option<GradFn>) -> Var {
        let needs_grad = parents.iter().any(|&p| self.nodes[p].needs_grad);
        self.nodes.push(Node {
            value,
            parents,
            grad_fn: if needs_grad { grad_fn } else { None },
            needs_grad,
            is_leaf: false,
        });
        Var {
            id: self.nodes.len() - 1,
        }
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.id].needs_grad)
    }

    /// Record a tracked input. Gradients are produced for it when
    /// `requires_grad` is true.
    pub fn leaf(&mut self, value: Array, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: vec![],
            grad_fn: None,
            needs_grad: requires_grad,
            is_leaf: true,
        });
        Var {
            id: self.nodes.len() - 1,
        }
    }

    /// Record an untracked constant.
    pub fn constant(&mut self, value: Array) -> Var {
        self.leaf(value, false)
    }

    // ── basic ops ───────────────────────────────────────────────────

    /// Standard matrix product (m,k)·(k,n).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.value(a).dims2("matmul")?;
        let (kb, n) = self.value(b).dims2("matmul")?;
        if ka != kb {
            return Err(MumError::DimensionMismatch {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let data = matmul_nn(self.value(a).data(), self.value(b).data(), m, ka, n);
        let value = Array::from_vec(&[m, n], data)?;
        let gf: Option<GradFn> = if self.needs(&[a, b]) {
            Some(Box::new(move |t: &Tape, g: &Array| {
                let av = t.value(a);
                let bv = t.value(b);
                let da = matmul_nt(g.data(), bv.data(), m, n, ka);
                let db = matmul_tn(av.data(), g.data(), m, ka, n);
                vec![
                    Array::from_vec(&[m, ka], da).unwrap(),
                    Array::from_vec(&[ka, n], db).unwrap(),
                ]
            }))
        } else {
            None
        };
        Ok(self.push(value, vec![a.id, b.id], gf))
    }

    /// (m,k)·(n,k)ᵀ.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.value(a).dims2("matmul_nt")?;
        let (n, kb) = self.value(b).dims2("matmul_nt")?;
        if ka != kb {
            return Err(MumError::DimensionMismatch {
                op: "matmul_nt",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let data = matmul_nt(self.value(a).data(), self.value(b).data(), m, ka, n);
        let value = Array::from_vec(&[m, n], data)?;
        let gf: Option<GradFn> = if self.needs(&[a, b]) {
            Some(Box::new(move |t: &Tape, g: &Array| {
                let av = t.value(a);
                let bv = t.value(b);
                let da = matmul_nn(g.data(), bv.data(), m, n, ka);
                let db = matmul_tn(g.data(), av.data(), m, n, ka);
                vec![
                    Array::from_vec(&[m, ka], da).unwrap(),
                    Array::from_vec(&[n, ka], db).unwrap(),
                ]
            }))
        } else {
            None
        };
        Ok(self.push(value, vec![a.id, b.id], gf))
    }

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(MumError::DimensionMismatch {
                op,
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let gf: Option<GradFn> = if self.needs(&[a, b]) {
            Some(Box::new(|_, g| vec![g.clone(), g.clone()]))
        } else {
            None
        };
        Ok(self.push(value, vec![a.id, b.id], gf))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let gf: Option<GradFn> = if self.needs(&[a, b]) {
            Some(Box::new(|_, g| vec![g.clone(), g.map(|x| -x)]))
        } else {
            None
        };
        Ok(self.push(value, vec![a.id, b.id], gf))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let gf: Option<GradFn> = if self.needs(&[a, b]) {
            Some(Box::new(move |t: &Tape, g: &Array| {
                vec![
                    g.zip_map(t.value(b), |gv, bv| gv * bv),
                    g.zip_map(t.value(a), |gv, av| gv * av),
                ]
            }))
        } else {
            None
        };
        Ok(self.push(value, vec![a.id, b.id], gf))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        let gf: Option<GradFn> = if self.needs(&[a]) {
            Some(Box::new(move |_, g| vec![g.map(|x| x * c)]))
        } else {
            None
        };
        self.push(value, vec![a.id], gf)
    }

    /// Add a length-n row vector to every row of (m,n).
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2("add_row")?;
        if self.value(bias).shape() != [n] {
            return Err(MumError::DimensionMismatch {
                op: "add_row",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(bias).shape().to_vec(),
            });
        }
        let bv = self.value(bias).data();
        let mut data = self.value(a).data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += bv[j];
            }
        }
        let value = Array::from_vec(&[m, n], data)?;
        let gf: Option<GradFn> = if self.needs(&[a, bias]) {
            Some(Box::new(move |_, g: &Array| {
                let mut db = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        db[j] += g.data()[i * n + j];
                    }
                }
                vec![g.clone(), Array::from_vec(&[n], db).unwrap()]
            }))
        } else {
            None
        };
        Ok(self.push(value, vec![a.id, bias.id], gf))
    }

    /// Sum of all elements, producing a rank-0 scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let shape = self.value(a).shape().to_vec();
        let gf: Option<GradFn> = if self.needs(&[a]) {
            Some(Box::new(move |_, g: &Array| {
                vec![Array::full(&shape, g.item())]
            }))
        } else {
            None
        };
        self.push(Array::scalar(s), vec![a.id], gf)
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        const S: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const C: f64 = 0.044_715;
        let value = self.value(a).map(|x| {
            let u = S * (x + C * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        });
        let gf: Option<GradFn> = if self.needs(&[a]) {
            Some(Box::new(move |t: &Tape, g: &Array| {
                let d = t.value(a).map(|x| {
                    let u = S * (x + C * x * x * x);
                    let th = u.tanh();
                    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * S * (1.0 + 3.0 * C * x * x)
                });
                vec![g.zip_map(&d, |gv, dv| gv * dv)]
            }))
        } else {
            None
        };
        self.push(value, vec![a.id], gf)
    }

    /// |x| with subgradient 0 at the origin.
    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        let gf: Option<GradFn> = if self.needs(&[a]) {
            Some(Box::new(move |t: &Tape, g: &Array| {
                let d = t.value(a).map(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                vec![g.zip_map(&d, |gv, dv| gv * dv)]
            }))
        } else {
            None
        };
        self.push(value, vec![a.id], gf)
    }

    /// Layer normalization over the last axis, then affine gain/bias.
    /// Rows are standardized with the population variance and
    /// `1/sqrt(var + eps)`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.is_empty() {
            return Err(MumError::Shape {
                op: "layer_norm",
                shape,
                reason: "rank must be >= 1".into(),
            });
        }
        let n = shape[shape.len() - 1];
        for (v, name) in [(gain, "gain"), (bias, "bias")] {
            if self.value(v).shape() != [n] {
                return Err(MumError::DimensionMismatch {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.value(v).shape().to_vec(),
                });
            }
            let _ = name;
        }
        let rows = self.value(x).len() / n;
        let mut xhat = vec![0.0; rows * n];
        let mut inv = vec![0.0; rows];
        {
            let xd = self.value(x).data();
            for r in 0..rows {
                let row = &xd[r * n..(r + 1) * n];
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let iv = 1.0 / (var + eps).sqrt();
                inv[r] = iv;
                for j in 0..n {
                    xhat[r * n + j] = (row[j] - mean) * iv;
                }
            }
        }
        let gd = self.value(gain).data();
        let bd = self.value(bias).data();
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            for j in 0..n {
                out[r * n + j] = xhat[r * n + j] * gd[j] + bd[j];
            }
        }
        let value = Array::from_vec(&shape, out)?;
        let gf: Option<GradFn> = if self.needs(&[x, gain, bias]) {
            let xhat_c = xhat;
            let inv_c = inv;
            let shape_c = shape.clone();
            Some(Box::new(move |t: &Tape, g: &Array| {
                let gd = t.value(gain).data();
                let gdat = g.data();
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                let mut dx = vec![0.0; rows * n];
                for r in 0..rows {
                    let xh = &xhat_c[r * n..(r + 1) * n];
                    let go = &gdat[r * n..(r + 1) * n];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..n {
                        let dxh = go[j] * gd[j];
                        m1 += dxh;
                        m2 += dxh * xh[j];
                        dgain[j] += go[j] * xh[j];
                        dbias[j] += go[j];
                    }
                    m1 /= n as f64;
                    m2 /= n as f64;
                    let iv = inv_c[r];
                    for j in 0..n {
                        let dxh = go[j] * gd[j];
                        dx[r * n + j] = iv * (dxh - m1 - xh[j] * m2);
                    }
                }
                vec![
                    Array::from_vec(&shape_c, dx).unwrap(),
                    Array::from_vec(&[n], dgain).unwrap(),
                    Array::from_vec(&[n], dbias).unwrap(),
                ]
            }))
        } else {
            None
        };
        Ok(self.push(value, vec![x.id, gain.id, bias.id], gf))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(MumError::Contract {
                op: "softmax",
                reason: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        let lanes = lane_layout(&shape, axis);
        let mut out = self.value(x).data().to_vec();
        softmax_lanes(&mut out, &lanes);
        let value = Array::from_vec(&shape, out)?;
        let gf: Option<GradFn> = if self.needs(&[x]) {
            let y = value.clone();
            Some(Box::new(move |_, g: &Array| {
                let mut dx = vec![0.0; y.len()];
                let (outer, len, inner) = lanes;
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut s = 0.0;
                        for l in 0..len {
                            let idx = base + l * inner;
                            s += g.data()[idx] * y.data()[idx];
                        }
                        for l in 0..len {
                            let idx = base + l * inner;
                            dx[idx] = y.data()[idx] * (g.data()[idx] - s);
                        }
                    }
                }
                vec![Array::from_vec(y.shape(), dx).unwrap()]
            }))
        } else {
            None
        };
        Ok(self.push(value, vec![x.id], gf))
    }

    /// Select rows of a rank-2 array. Indices may repeat.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let (m, n) = self.value(x).dims2("gather_rows")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(MumError::Contract {
                op: "gather_rows",
                reason: format!("row index {bad} out of range for {m} rows"),
            });
        }
        let xd = self.value(x).data();
        let k = indices.len();
        let mut out = Vec::with_capacity(k * n);
        for &i in indices {
            out.extend_from_slice(&xd[i * n..(i + 1) * n]);
        }
        let value = Array::from_vec(&[k, n], out)?;
        let gf: Option<GradFn> = if self.needs(&[x]) {
            let idx = indices.to_vec();
            Some(Box::new(move |_, g: &Array| {
                let mut dx = vec![0.0; m * n];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..n {
                        dx[i * n + j] += g.data()[r * n + j];
                    }
                }
                vec![Array::from_vec(&[m, n], dx).unwrap()]
            }))
        } else {
            None
        };
        Ok(self.push(value, vec![x.id], gf))
    }

    /// Build an (n_total, n) array holding `visible` rows at `visible_idx`
    /// (strictly increasing) and `fill` everywhere else.
    pub fn insert_rows(
        &mut self,
        visible: Var,
        fill: Var,
        visible_idx: &[usize],
        n_total: usize,
    ) -> Result<Var> {
        let (k, n) = self.value(visible).dims2("insert_rows")?;
        if self.value(fill).shape() != [n] {
            return Err(MumError::DimensionMismatch {
                op: "insert_rows",
                lhs: self.value(visible).shape().to_vec(),
                rhs: self.value(fill).shape().to_vec(),
            });
        }
        if visible_idx.len() != k {
            return Err(MumError::Contract {
                op: "insert_rows",
                reason: format!("{k} visible rows but {} indices", visible_idx.len()),
            });
        }
        if !visible_idx.windows(2).all(|w| w[0] < w[1])
            || visible_idx.last().is_some_and(|&l| l >= n_total)
        {
            return Err(MumError::Contract {
                op: "insert_rows",
                reason: "indices must be strictly increasing and < n_total".into(),
            });
        }
        let mut out = vec![0.0; n_total * n];
        {
            let fd = self.value(fill).data();
            for r in 0..n_total {
                out[r * n..(r + 1) * n].copy_from_slice(fd);
            }
            let vd = self.value(visible).data();
            for (r, &i) in visible_idx.iter().enumerate() {
                out[i * n..(i + 1) * n].copy_from_slice(&vd[r * n..(r + 1) * n]);
            }
        }
        let value = Array::from_vec(&[n_total, n], out)?;
        let gf: Option<GradFn> = if self.needs(&[visible, fill]) {
            let idx = visible_idx.to_vec();
            Some(Box::new(move |_, g: &Array| {
                let mut dvis = Vec::with_capacity(k * n);
                let mut mask = vec![false; n_total];
                for &i in &idx {
                    mask[i] = true;
                    dvis.extend_from_slice(&g.data()[i * n..(i + 1) * n]);
                }
                let mut dfill = vec![0.0; n];
                for r in 0..n_total {
                    if !mask[r] {
                        for j in 0..n {
                            dfill[j] += g.data()[r * n + j];
                        }
                    }
                }
                vec![
                    Array::from_vec(&[k, n], dvis).unwrap(),
                    Array::from_vec(&[n], dfill).unwrap(),
                ]
            }))
        } else {
            None
        };
        Ok(self.push(value, vec![visible.id, fill.id], gf))
    }

    /// Stack rank-2 arrays with equal column counts along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(MumError::Contract {
                op: "concat_rows",
                reason: "no parts".into(),
            });
        }
        let (_, n) = self.value(parts[0]).dims2("concat_rows")?;
        let mut counts = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for &p in parts {
            let (m, np) = self.value(p).dims2("concat_rows")?;
            if np != n {
                return Err(MumError::DimensionMismatch {
                    op: "concat_rows",
                    lhs: vec![n],
                    rhs: vec![np],
                });
            }
            counts.push(m);
            data.extend_from_slice(self.value(p).data());
        }
        let total: usize = counts.iter().sum();
        let value = Array::from_vec(&[total, n], data)?;
        let gf: Option<GradFn> = if self.needs(parts) {
            let counts_c = counts;
            Some(Box::new(move |_, g: &Array| {
                let mut out = Vec::with_capacity(counts_c.len());
                let mut off = 0;
                for &m in &counts_c {
                    let part = g.data()[off * n..(off + m) * n].to_vec();
                    out.push(Array::from_vec(&[m, n], part).unwrap());
                    off += m;
                }
                out
            }))
        } else {
            None
        };
        Ok(self.push(value, parts.iter().map(|v| v.id).collect(), gf))
    }

    /// Multi-head scaled dot-product attention within token groups.
    ///
    /// Queries and keys are rotated by `spec.rope` when present. Attention is
    /// restricted to each `(start, len)` group: a single group spanning all
    /// tokens is global attention, per-view spans give frame-wise attention.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: &AttnSpec) -> Result<Var> {
        self.attention_impl(q, k, v, spec, false)
            .map(|(out, _)| out)
    }

    /// Like [`Tape::attention`] but also returns the post-softmax attention
    /// probabilities, one `(heads, len, len)` array per group.
    pub fn attention_with_probs(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttnSpec,
    ) -> Result<(Var, Vec<Array>)> {
        let (out, probs) = self.attention_impl(q, k, v, spec, true)?;
        Ok((out, probs.expect("probs requested")))
    }

    fn attention_impl(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttnSpec,
        want_probs: bool,
    ) -> Result<(Var, Option<Vec<Array>>)> {
        let (t, w) = self.value(q).dims2("attention")?;
        self.check_same_shape("attention", q, k)?;
        self.check_same_shape("attention", q, v)?;
        if spec.heads == 0 || w % spec.heads != 0 {
            return Err(MumError::Contract {
                op: "attention",
                reason: format!("width {w} not divisible by {} heads", spec.heads),
            });
        }
        let hd = w / spec.heads;
        let mut cursor = 0;
        for &(start, len) in &spec.groups {
            if start != cursor || len == 0 {
                return Err(MumError::Contract {
                    op: "attention",
                    reason: "groups must be non-empty and partition the tokens in order".into(),
                });
            }
            cursor = start + len;
        }
        if cursor != t {
            return Err(MumError::Contract {
                op: "attention",
                reason: format!("groups cover {cursor} of {t} tokens"),
            });
        }
        if let Some(plan) = &spec.rope {
            if plan.tokens() != t || plan.head_dim != hd {
                return Err(MumError::Contract {
                    op: "attention",
                    reason: "rope plan does not match token count or head_dim".into(),
                });
            }
        }

        let heads = spec.heads;
        let scale = 1.0 / (hd as f64).sqrt();

        let mut q_rot = self.value(q).data().to_vec();
        let mut k_rot = self.value(k).data().to_vec();
        if let Some(plan) = &spec.rope {
            plan.apply(&mut q_rot, heads, false);
            plan.apply(&mut k_rot, heads, false);
        }

        let vd = self.value(v).data();
        let mut out = vec![0.0; t * w];
        // probs[g][h] flattened: (len, len) row-major per group/head
        let mut probs: Vec<Vec<f64>> = Vec::with_capacity(spec.groups.len() * heads);
        for &(start, len) in &spec.groups {
            for h in 0..heads {
                let qh = gather_head(&q_rot, start, len, w, h, hd);
                let kh = gather_head(&k_rot, start, len, w, h, hd);
                let vh = gather_head(vd, start, len, w, h, hd);
                let mut s = matmul_nt(&qh, &kh, len, hd, len);
                for x in s.iter_mut() {
                    *x *= scale;
                }
                softmax_lanes(&mut s, &(len, len, 1));
                let oh = matmul_nn(&s, &vh, len, len, hd);
                scatter_head(&mut out, &oh, start, len, w, h, hd);
                probs.push(s);
            }
        }

        let returned_probs = if want_probs {
            let mut per_group = Vec::with_capacity(spec.groups.len());
            for (gi, &(_, len)) in spec.groups.iter().enumerate() {
                let mut data = Vec::with_capacity(heads * len * len);
                for h in 0..heads {
                    data.extend_from_slice(&probs[gi * heads + h]);
                }
                per_group.push(Array::from_vec(&[heads, len, len], data)?);
            }
            Some(per_group)
        } else {
            None
        };

        let value = Array::from_vec(&[t, w], out)?;
        let gf: Option<GradFn> = if self.needs(&[q, k, v]) {
            let groups = spec.groups.clone();
            let rope = spec.rope.clone();
            Some(Box::new(move |tape: &Tape, g: &Array| {
                let mut q_rot = tape.value(q).data().to_vec();
                let mut k_rot = tape.value(k).data().to_vec();
                if let Some(plan) = &rope {
                    plan.apply(&mut q_rot, heads, false);
                    plan.apply(&mut k_rot, heads, false);
                }
                let vd = tape.value(v).data();
                let gd = g.data();
                let mut dq = vec![0.0; t * w];
                let mut dk = vec![0.0; t * w];
                let mut dv = vec![0.0; t * w];
                for (gi, &(start, len)) in groups.iter().enumerate() {
                    for h in 0..heads {
                        let p = &probs[gi * heads + h];
                        let qh = gather_head(&q_rot, start, len, w, h, hd);
                        let kh = gather_head(&k_rot, start, len, w, h, hd);
                        let vh = gather_head(vd, start, len, w, h, hd);
                        let gh = gather_head(gd, start, len, w, h, hd);
                        // dv = pᵀ·gh
                        let dvh = matmul_tn(p, &gh, len, len, hd);
                        // dp = gh·vhᵀ
                        let dp = matmul_nt(&gh, &vh, len, hd, len);
                        // softmax backward rows: ds = p ⊙ (dp − Σ dp⊙p)
                        let mut ds = vec![0.0; len * len];
                        for i in 0..len {
                            let pi = &p[i * len..(i + 1) * len];
                            let dpi = &dp[i * len..(i + 1) * len];
                            let dot: f64 = pi.iter().zip(dpi.iter()).map(|(a, b)| a * b).sum();
                            for j in 0..len {
                                ds[i * len + j] = pi[j] * (dpi[j] - dot) * scale;
                            }
                        }
                        let dqh = matmul_nn(&ds, &kh, len, len, hd);
                        let dkh = matmul_tn(&ds, &qh, len, len, hd);
                        scatter_head(&mut dq, &dqh, start, len, w, h, hd);
                        scatter_head(&mut dk, &dkh, start, len, w, h, hd);
                        scatter_head(&mut dv, &dvh, start, len, w, h, hd);
                    }
                }
                if let Some(plan) = &rope {
                    plan.apply(&mut dq, heads, true);
                    plan.apply(&mut dk, heads, true);
                }
                vec![
                    Array::from_vec(&[t, w], dq).unwrap(),
                    Array::from_vec(&[t, w], dk).unwrap(),
                    Array::from_vec(&[t, w], dv).unwrap(),
                ]
            }))
        } else {
            None
        };
        let var = self.push(value, vec![q.id, k.id, v.id], gf);
        Ok((var, returned_probs))
    }

    /// Mean negative log-softmax probability of the target class over rows
    /// with `Some` target. Rows with `None` contribute nothing.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (m, n) = self.value(logits).dims2("softmax_cross_entropy")?;
        if targets.len() != m {
            return Err(MumError::Contract {
                op: "softmax_cross_entropy",
                reason: format!("{m} rows but {} targets", targets.len()),
            });
        }
        if let Some(&bad) = targets.iter().flatten().find(|&&t| t >= n) {
            return Err(MumError::Contract {
                op: "softmax_cross_entropy",
                reason: format!("target class {bad} out of range for {n} classes"),
            });
        }
        let n_valid = targets.iter().flatten().count();
        if n_valid == 0 {
            return Err(MumError::Contract {
                op: "softmax_cross_entropy",
                reason: "no valid supervision rows".into(),
            });
        }
        let xd = self.value(logits).data();
        let mut probs = vec![0.0; m * n];
        let mut loss = 0.0;
        for (r, tgt) in targets.iter().enumerate() {
            let Some(tc) = tgt else { continue };
            let row = &xd[r * n..(r + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                probs[r * n + j] = e;
                z += e;
            }
            for j in 0..n {
                probs[r * n + j] /= z;
            }
            loss += z.ln() + mx - row[*tc];
        }
        loss /= n_valid as f64;
        let value = Array::scalar(loss);
        let gf: Option<GradFn> = if self.needs(&[logits]) {
            let targets_c = targets.to_vec();
            Some(Box::new(move |_, g: &Array| {
                let gs = g.item() / n_valid as f64;
                let mut dx = vec![0.0; m * n];
                for (r, tgt) in targets_c.iter().enumerate() {
                    let Some(tc) = tgt else { continue };
                    for j in 0..n {
                        let p = probs[r * n + j];
                        dx[r * n + j] = gs * (p - if j == *tc { 1.0 } else { 0.0 });
                    }
                }
                vec![Array::from_vec(&[m, n], dx).unwrap()]
            }))
        } else {
            None
        };
        Ok(self.push(value, vec![logits.id], gf))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse pass from a scalar root. Gradients accumulate in node index
    /// order, so the result is deterministic for a given forward graph.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.nodes[root.id].value.len() != 1 {
            return Err(MumError::Contract {
                op: "backward",
                reason: format!(
                    "root must be scalar, has shape {:?}",
                    self.nodes[root.id].value.shape()
                ),
            });
        }
        let mut grads: Vec<Option<Array>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if !self.nodes[root.id].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[root.id] = Some(Array::full(self.nodes[root.id].value.shape(), 1.0));
        for id in (0..=root.id).rev() {
            if grads[id].is_none() {
                continue;
            }
            let node = &self.nodes[id];
            if let Some(f) = &node.grad_fn {
                let g = grads[id].as_ref().unwrap();
                let parent_grads = f(self, g);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (&p, pg) in node.parents.iter().zip(parent_grads) {
                    if !self.nodes[p].needs_grad {
                        continue;
                    }
                    debug_assert_eq!(pg.shape(), self.nodes[p].value.shape());
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&pg),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            if !node.is_leaf {
                grads[id] = None; // free intermediates
            }
        }
        Ok(Gradients { grads })
    }
}

/// Decompose `shape` into (outer, axis length, inner) for lane iteration.
fn lane_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// In-place stable softmax over each lane of the (outer, len, inner) layout.
fn softmax_lanes(data: &mut [f64], &(outer, len, inner): &(usize, usize, usize)) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for l in 0..len {
                mx = mx.max(data[base + l * inner]);
            }
            let mut z = 0.0;
            for l in 0..len {
                let idx = base + l * inner;
                data[idx] = (data[idx] - mx).exp();
                z += data[idx];
            }
            for l in 0..len {
                data[base + l * inner] /= z;
            }
        }
    }
}

fn gather_head(
    data: &[f64],
    start: usize,
    len: usize,
    width: usize,
    head: usize,
    hd: usize,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(len * hd);
    for i in 0..len {
        let off = (start + i) * width + head * hd;
        out.extend_from_slice(&data[off..off + hd]);
    }
    out
}

fn scatter_head(
    data: &mut [f64],
    block: &[f64],
    start: usize,
    len: usize,
    width: usize,
    head: usize,
    hd: usize,
) {
    for i in 0..len {
        let off = (start + i) * width + head * hd;
        data[off..off + hd].copy_from_slice(&block[i * hd..(i + 1) * hd]);
    }
}
