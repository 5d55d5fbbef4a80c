//! The network: a shared ViT encoder over visible tokens, mask-token
//! insertion, a multi-view decoder with alternating frame-wise/global
//! attention, axial RoPE, and a linear pixel head.
//!
//! The design is symmetric across views: tokens carry only their grid
//! position, never a view-identity embedding, so the full forward pass is
//! equivariant to view permutation. With a single view the frame-wise/global
//! distinction vanishes and the model reduces to a standard masked
//! autoencoder.

use serde::{Deserialize, Serialize};

use crate::error::{MumError, Result};
use crate::masking::{MaskedViewTokens, PatchGrid, PatchMask};
use crate::numerics::{Array, AttnSpec, RopePlan, Tape, Var};
use crate::rng::Rng;

/// Positional information: rotary embeddings on queries/keys, or learned
/// absolute embeddings added to tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosMode {
    Rope,
    Absolute,
}

/// Where views exchange information: alternating attention in the decoder
/// (default) or in the encoder (ablation; the decoder is then frame-wise
/// only).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CommSite {
    Decoder,
    Encoder,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub enc_width: usize,
    pub enc_depth: usize,
    pub enc_heads: usize,
    pub dec_width: usize,
    pub dec_depth: usize,
    pub dec_heads: usize,
    pub patch_size: usize,
    pub pos_mode: PosMode,
    pub comm_site: CommSite,
    pub rope_base: f64,
    pub mlp_ratio: f64,
    /// Whether the prediction head carries a bias term.
    pub head_bias: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

impl ModelConfig {
    /// Minimal configuration used by gradient checks and smoke tests.
    pub fn tiny() -> ModelConfig {
        ModelConfig {
            enc_width: 16,
            enc_depth: 2,
            enc_heads: 2,
            dec_width: 16,
            dec_depth: 2,
            dec_heads: 2,
            patch_size: 4,
            pos_mode: PosMode::Rope,
            comm_site: CommSite::Decoder,
            rope_base: 100.0,
            mlp_ratio: 4.0,
            head_bias: true,
        }
    }

    /// Small model that trains in minutes on one CPU core.
    pub fn desk() -> ModelConfig {
        ModelConfig {
            enc_width: 64,
            enc_depth: 4,
            enc_heads: 4,
            dec_width: 48,
            dec_depth: 4,
            dec_heads: 4,
            patch_size: 8,
            pos_mode: PosMode::Rope,
            comm_site: CommSite::Decoder,
            rope_base: 100.0,
            mlp_ratio: 4.0,
            head_bias: true,
        }
    }

    /// The full-scale reference: ViT-L encoder (1024/24/16) and ViT-B
    /// decoder (768/12/12) with 16-pixel patches. Not runnable at desk
    /// scale; provided for completeness.
    pub fn reference_full_scale() -> ModelConfig {
        ModelConfig {
            enc_width: 1024,
            enc_depth: 24,
            enc_heads: 16,
            dec_width: 768,
            dec_depth: 12,
            dec_heads: 12,
            patch_size: 16,
            pos_mode: PosMode::Rope,
            comm_site: CommSite::Decoder,
            rope_base: 100.0,
            mlp_ratio: 4.0,
            head_bias: true,
        }
    }

    pub fn enc_head_dim(&self) -> usize {
        self.enc_width / self.enc_heads
    }

    pub fn dec_head_dim(&self) -> usize {
        self.dec_width / self.dec_heads
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (what, width, heads, depth) in [
            ("enc", self.enc_width, self.enc_heads, self.enc_depth),
            ("dec", self.dec_width, self.dec_heads, self.dec_depth),
        ] {
            if width == 0 || heads == 0 || depth == 0 {
                out.push(format!("model.{what}: width/heads/depth must be positive"));
                continue;
            }
            if width % heads != 0 {
                out.push(format!(
                    "model.{what}_width {width} not divisible by {heads} heads"
                ));
            } else if (width / heads) % 4 != 0 {
                out.push(format!(
                    "model.{what} head dimension {} must be divisible by 4 (axial rope halves)",
                    width / heads
                ));
            }
        }
        match self.comm_site {
            CommSite::Decoder => {
                if self.dec_depth % 2 != 0 {
                    out.push(format!(
                        "model.dec_depth {} must be even for alternating decoder attention",
                        self.dec_depth
                    ));
                }
            }
            CommSite::Encoder => {
                if self.enc_depth % 2 != 0 {
                    out.push(format!(
                        "model.enc_depth {} must be even for alternating encoder attention",
                        self.enc_depth
                    ));
                }
            }
        }
        if self.patch_size == 0 {
            out.push("model.patch_size must be positive".into());
        }
        if self.rope_base <= 0.0 {
            out.push("model.rope_base must be positive".into());
        }
        if self.mlp_ratio <= 0.0 {
            out.push("model.mlp_ratio must be positive".into());
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

    fn mlp_hidden(&self, width: usize) -> usize {
        ((width as f64) * self.mlp_ratio).round() as usize
    }
}

// ── parameter storage ───────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Flat list of named parameter arrays with per-parameter weight-decay
/// eligibility (weight matrices decay; biases, norms, positions, and the
/// mask token do not).
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array>,
    decay: Vec<bool>,
}

impl ParamStore {
    pub(crate) fn add(&mut self, name: String, value: Array, decay: bool) -> ParamId {
        self.names.push(name);
        self.values.push(value);
        self.decay.push(decay);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.values[id.0]
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.decay[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn total_values(&self) -> usize {
        self.values.iter().map(Array::len).sum()
    }
}

#[derive(Clone, Debug)]
struct BlockIds {
    norm1_g: ParamId,
    norm1_b: ParamId,
    q_w: ParamId,
    q_b: ParamId,
    k_w: ParamId,
    k_b: ParamId,
    v_w: ParamId,
    v_b: ParamId,
    o_w: ParamId,
    o_b: ParamId,
    norm2_g: ParamId,
    norm2_b: ParamId,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

#[derive(Clone, Debug)]
struct Layout {
    patch_embed_w: ParamId,
    patch_embed_b: ParamId,
    enc_pos: Option<ParamId>,
    enc_blocks: Vec<BlockIds>,
    enc_to_dec_w: ParamId,
    enc_to_dec_b: ParamId,
    mask_token: ParamId,
    dec_pos: Option<ParamId>,
    dec_blocks: Vec<BlockIds>,
    final_norm_g: ParamId,
    final_norm_b: ParamId,
    head_w: ParamId,
    head_b: Option<ParamId>,
}

/// All learnable state plus the configuration and the patch grid the
/// absolute position tables (when present) were sized for.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub cfg: ModelConfig,
    pub grid: PatchGrid,
    pub store: ParamStore,
    layout: Layout,
}

fn trunc_normal(shape: &[usize], rng: &mut Rng) -> Array {
    Array::from_fn(shape, |_| rng.trunc_normal(0.02))
}

fn init_block(
    store: &mut ParamStore,
    prefix: &str,
    width: usize,
    hidden: usize,
    rng: &mut Rng,
) -> BlockIds {
    let mut w = |name: &str, shape: &[usize]| -> ParamId {
        store.add(format!("{prefix}.{name}"), trunc_normal(shape, rng), true)
    };
    let q_w = w("attn.q.w", &[width, width]);
    let k_w = w("attn.k.w", &[width, width]);
    let v_w = w("attn.v.w", &[width, width]);
    let o_w = w("attn.o.w", &[width, width]);
    let fc1_w = w("mlp.fc1.w", &[width, hidden]);
    let fc2_w = w("mlp.fc2.w", &[hidden, width]);
    let mut b = |name: &str, shape: &[usize], one: bool| -> ParamId {
        let v = if one {
            Array::full(shape, 1.0)
        } else {
            Array::zeros(shape)
        };
        store.add(format!("{prefix}.{name}"), v, false)
    };
    BlockIds {
        norm1_g: b("norm1.g", &[width], true),
        norm1_b: b("norm1.b", &[width], false),
        q_w,
        q_b: b("attn.q.b", &[width], false),
        k_w,
        k_b: b("attn.k.b", &[width], false),
        v_w,
        v_b: b("attn.v.b", &[width], false),
        o_w,
        o_b: b("attn.o.b", &[width], false),
        norm2_g: b("norm2.g", &[width], true),
        norm2_b: b("norm2.b", &[width], false),
        fc1_w,
        fc1_b: b("mlp.fc1.b", &[hidden], false),
        fc2_w,
        fc2_b: b("mlp.fc2.b", &[width], false),
    }
}

impl ModelParams {
    /// Initialize from a seed: truncated-normal (std 0.02) embeddings,
    /// attention/MLP weights and head; zero biases; unit norms. Values are
    /// rounded through f32 so checkpoints round-trip exactly.
    pub fn init(cfg: &ModelConfig, grid: &PatchGrid, seed: u64) -> Result<ModelParams> {
        cfg.validate()?;
        if grid.patch_size != cfg.patch_size {
            return Err(MumError::contract(
                "model_init",
                format!(
                    "grid patch_size {} does not match model patch_size {}",
                    grid.patch_size, cfg.patch_size
                ),
            ));
        }
        let mut rng = Rng::stream(seed, 100, 0);
        let mut store = ParamStore::default();
        let pd = cfg.patch_dim();
        let n = grid.n();

        let patch_embed_w = store.add(
            "patch_embed.w".into(),
            trunc_normal(&[pd, cfg.enc_width], &mut rng),
            true,
        );
        let patch_embed_b = store.add(
            "patch_embed.b".into(),
            Array::zeros(&[cfg.enc_width]),
            false,
        );
        let enc_pos = match cfg.pos_mode {
            PosMode::Absolute => Some(store.add(
                "enc.pos".into(),
                trunc_normal(&[n, cfg.enc_width], &mut rng),
                false,
            )),
            PosMode::Rope => None,
        };
        let enc_blocks = (0..cfg.enc_depth)
            .map(|i| {
                init_block(
                    &mut store,
                    &format!("enc.block{i:02}"),
                    cfg.enc_width,
                    cfg.mlp_hidden(cfg.enc_width),
                    &mut rng,
                )
            })
            .collect();
        let enc_to_dec_w = store.add(
            "enc_to_dec.w".into(),
            trunc_normal(&[cfg.enc_width, cfg.dec_width], &mut rng),
            true,
        );
        let enc_to_dec_b = store.add("enc_to_dec.b".into(), Array::zeros(&[cfg.dec_width]), false);
        let mask_token = store.add(
            "mask_token".into(),
            trunc_normal(&[cfg.dec_width], &mut rng),
            false,
        );
        let dec_pos = match cfg.pos_mode {
            PosMode::Absolute => Some(store.add(
                "dec.pos".into(),
                trunc_normal(&[n, cfg.dec_width], &mut rng),
                false,
            )),
            PosMode::Rope => None,
        };
        let dec_blocks = (0..cfg.dec_depth)
            .map(|i| {
                init_block(
                    &mut store,
                    &format!("dec.block{i:02}"),
                    cfg.dec_width,
                    cfg.mlp_hidden(cfg.dec_width),
                    &mut rng,
                )
            })
            .collect();
        let final_norm_g = store.add(
            "final_norm.g".into(),
            Array::full(&[cfg.dec_width], 1.0),
            false,
        );
        let final_norm_b = store.add("final_norm.b".into(), Array::zeros(&[cfg.dec_width]), false);
        let head_w = store.add(
            "head.w".into(),
            trunc_normal(&[cfg.dec_width, pd], &mut rng),
            true,
        );
        let head_b = if cfg.head_bias {
            Some(store.add("head.b".into(), Array::zeros(&[pd]), false))
        } else {
            None
        };

        for id in store.ids().collect::<Vec<_>>() {
            store.value_mut(id).quantize_f32();
        }

        Ok(ModelParams {
            cfg: cfg.clone(),
            grid: *grid,
            store,
            layout: Layout {
                patch_embed_w,
                patch_embed_b,
                enc_pos,
                enc_blocks,
                enc_to_dec_w,
                enc_to_dec_b,
                mask_token,
                dec_pos,
                dec_blocks,
                final_norm_g,
                final_norm_b,
                head_w,
                head_b,
            },
        })
    }

    /// Rebuild the layout for parameters loaded from a checkpoint. Names and
    /// shapes must match what [`ModelParams::init`] produces.
    pub fn from_store(
        cfg: &ModelConfig,
        grid: &PatchGrid,
        store: ParamStore,
    ) -> Result<ModelParams> {
        let reference = ModelParams::init(cfg, grid, 0)?;
        if reference.store.len() != store.len() {
            return Err(MumError::Checkpoint(format!(
                "expected {} parameters, found {}",
                reference.store.len(),
                store.len()
            )));
        }
        for id in reference.store.ids() {
            if reference.store.name(id) != store.name(id) {
                return Err(MumError::Checkpoint(format!(
                    "parameter {} has name '{}', expected '{}'",
                    id.0,
                    store.name(id),
                    reference.store.name(id)
                )));
            }
            if reference.store.value(id).shape() != store.value(id).shape() {
                return Err(MumError::Checkpoint(format!(
                    "parameter '{}' has shape {:?}, expected {:?}",
                    store.name(id),
                    store.value(id).shape(),
                    reference.store.value(id).shape()
                )));
            }
        }
        Ok(ModelParams {
            cfg: cfg.clone(),
            grid: *grid,
            store,
            layout: reference.layout,
        })
    }

    /// Register every parameter on a tape; `trainable` controls whether
    /// gradients flow to them.
    pub fn tape_vars(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        ParamVars {
            vars: self
                .store
                .ids()
                .map(|id| tape.leaf(self.store.value(id).clone(), trainable))
                .collect(),
        }
    }
}

/// Tape handles for every parameter, aligned with [`ParamStore`] ids.
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    /// Wrap externally registered leaves; order must match the store's ids.
    pub fn from_vars(vars: Vec<Var>) -> ParamVars {
        ParamVars { vars }
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn all(&self) -> &[Var] {
        &self.vars
    }
}

// ── forward passes ──────────────────────────────────────────────────

/// Encoder output for one view: visible-token features plus the grid
/// positions and indices of those tokens.
pub struct EncodedView {
    pub feats: Var,
    pub visible_indices: Vec<usize>,
    pub positions: Vec<(u32, u32)>,
}

/// Per-view encoded tokens. Positions refer to the shared patch grid; no
/// view-identity embedding exists anywhere.
pub struct TokenSet {
    pub views: Vec<EncodedView>,
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

#[allow(clippy::too_many_arguments)]
fn block_forward(
    tape: &mut Tape,
    pv: &ParamVars,
    ids: &BlockIds,
    x: Var,
    heads: usize,
    groups: &[(usize, usize)],
    rope: Option<&RopePlan>,
) -> Result<Var> {
    let h = tape.layer_norm(x, pv.get(ids.norm1_g), pv.get(ids.norm1_b), LAYER_NORM_EPS)?;
    let q = linear(tape, h, pv.get(ids.q_w), pv.get(ids.q_b))?;
    let k = linear(tape, h, pv.get(ids.k_w), pv.get(ids.k_b))?;
    let v = linear(tape, h, pv.get(ids.v_w), pv.get(ids.v_b))?;
    let spec = AttnSpec {
        heads,
        groups: groups.to_vec(),
        rope: rope.cloned(),
    };
    let a = tape.attention(q, k, v, &spec)?;
    let a = linear(tape, a, pv.get(ids.o_w), pv.get(ids.o_b))?;
    let x = tape.add(x, a)?;
    let h2 = tape.layer_norm(x, pv.get(ids.norm2_g), pv.get(ids.norm2_b), LAYER_NORM_EPS)?;
    let m = linear(tape, h2, pv.get(ids.fc1_w), pv.get(ids.fc1_b))?;
    let m = tape.gelu(m);
    let m = linear(tape, m, pv.get(ids.fc2_w), pv.get(ids.fc2_b))?;
    tape.add(x, m)
}

fn rope_plan_for(
    cfg: &ModelConfig,
    positions: &[(u32, u32)],
    head_dim: usize,
) -> Result<Option<RopePlan>> {
    match cfg.pos_mode {
        PosMode::Rope => Ok(Some(RopePlan::new(positions, head_dim, cfg.rope_base)?)),
        PosMode::Absolute => Ok(None),
    }
}

/// Encode each view's visible tokens. With `comm_site = decoder` (default)
/// views are processed independently; with `comm_site = encoder` the
/// encoder itself alternates frame-wise and global attention over the
/// concatenated visible tokens, starting frame-wise.
pub fn encode(
    tape: &mut Tape,
    model: &ModelParams,
    pv: &ParamVars,
    views: &[MaskedViewTokens],
    grid: &PatchGrid,
) -> Result<TokenSet> {
    let cfg = &model.cfg;
    if views.is_empty() {
        return Err(MumError::contract("encode", "no views"));
    }
    check_grid(model, grid, "encode")?;

    // patch embedding per view
    let mut embedded = Vec::with_capacity(views.len());
    for (i, view) in views.iter().enumerate() {
        if view.n_visible() == 0 {
            return Err(MumError::contract(
                "encode",
                format!("view {i} has no visible tokens (ratio 1 leaves nothing to encode)"),
            ));
        }
        let x = tape.constant(view.visible_patches.clone());
        let mut x = linear(
            tape,
            x,
            pv.get(model.layout.patch_embed_w),
            pv.get(model.layout.patch_embed_b),
        )?;
        if let Some(pos_id) = model.layout.enc_pos {
            let pos_table = pv.get(pos_id);
            let rows = tape.gather_rows(pos_table, &view.visible_indices)?;
            x = tape.add(x, rows)?;
        }
        let positions: Vec<(u32, u32)> = view
            .visible_indices
            .iter()
            .map(|&k| grid.position(k))
            .collect();
        embedded.push((x, positions, view.visible_indices.clone()));
    }

    let feats: Vec<Var> = match cfg.comm_site {
        CommSite::Decoder => {
            let mut out = Vec::with_capacity(embedded.len());
            for (x, positions, _) in &embedded {
                let groups = vec![(0, positions.len())];
                let plan = rope_plan_for(cfg, positions, cfg.enc_head_dim())?;
                let mut x = *x;
                for ids in &model.layout.enc_blocks {
                    x = block_forward(tape, pv, ids, x, cfg.enc_heads, &groups, plan.as_ref())?;
                }
                out.push(x);
            }
            out
        }
        CommSite::Encoder => {
            let parts: Vec<Var> = embedded.iter().map(|(x, _, _)| *x).collect();
            let mut all_positions = Vec::new();
            let mut frame_groups = Vec::new();
            let mut start = 0;
            for (_, positions, _) in &embedded {
                frame_groups.push((start, positions.len()));
                start += positions.len();
                all_positions.extend_from_slice(positions);
            }
            let global_groups = vec![(0, start)];
            let plan = rope_plan_for(cfg, &all_positions, cfg.enc_head_dim())?;
            let mut x = tape.concat_rows(&parts)?;
            for (i, ids) in model.layout.enc_blocks.iter().enumerate() {
                let groups = if i % 2 == 0 {
                    &frame_groups
                } else {
                    &global_groups
                };
                x = block_forward(tape, pv, ids, x, cfg.enc_heads, groups, plan.as_ref())?;
            }
            // split back per view
            let mut out = Vec::with_capacity(embedded.len());
            for &(s0, len) in &frame_groups {
                let idx: Vec<usize> = (s0..s0 + len).collect();
                out.push(tape.gather_rows(x, &idx)?);
            }
            out
        }
    };

    Ok(TokenSet {
        views: feats
            .into_iter()
            .zip(embedded)
            .map(|(feats, (_, positions, visible_indices))| EncodedView {
                feats,
                visible_indices,
                positions,
            })
            .collect(),
    })
}

fn check_grid(model: &ModelParams, grid: &PatchGrid, op: &'static str) -> Result<()> {
    if grid.patch_size != model.cfg.patch_size {
        return Err(MumError::contract(
            op,
            format!(
                "grid patch_size {} does not match model patch_size {}",
                grid.patch_size, model.cfg.patch_size
            ),
        ));
    }
    if model.cfg.pos_mode == PosMode::Absolute && *grid != model.grid {
        return Err(MumError::contract(
            op,
            "absolute position tables were sized for a different grid",
        ));
    }
    Ok(())
}

/// Decode encoded views back to per-patch pixel predictions of shape
/// (S·N, patch_dim). Ordering is view-major: token `i·N + k` is patch `k`
/// of view `i`.
pub fn decode(
    tape: &mut Tape,
    model: &ModelParams,
    pv: &ParamVars,
    encoded: &TokenSet,
    masks: &[PatchMask],
    grid: &PatchGrid,
) -> Result<Var> {
    decode_impl(tape, model, pv, encoded, masks, grid, false, None).map(|(v, _)| v)
}

/// Decode while forcing every decoder block to use global attention.
/// With S = 1 this must agree with [`decode`] exactly; exposed for that
/// equivalence check.
#[doc(hidden)]
pub fn decode_all_global(
    tape: &mut Tape,
    model: &ModelParams,
    pv: &ParamVars,
    encoded: &TokenSet,
    masks: &[PatchMask],
    grid: &PatchGrid,
) -> Result<Var> {
    decode_impl(tape, model, pv, encoded, masks, grid, true, None).map(|(v, _)| v)
}

#[allow(clippy::too_many_arguments)]
fn decode_impl(
    tape: &mut Tape,
    model: &ModelParams,
    pv: &ParamVars,
    encoded: &TokenSet,
    masks: &[PatchMask],
    grid: &PatchGrid,
    force_global: bool,
    capture_block: Option<usize>,
) -> Result<(Var, Option<Vec<Array>>)> {
    let cfg = &model.cfg;
    check_grid(model, grid, "decode")?;
    let s = encoded.views.len();
    if s == 0 {
        return Err(MumError::contract("decode", "no views"));
    }
    if masks.len() != s {
        return Err(MumError::contract(
            "decode",
            format!("{s} encoded views but {} masks", masks.len()),
        ));
    }
    let n = grid.n();
    let mut parts = Vec::with_capacity(s);
    for (i, (view, mask)) in encoded.views.iter().zip(masks).enumerate() {
        if mask.n() != n {
            return Err(MumError::contract(
                "decode",
                format!("mask {i} covers {} patches, grid has {n}", mask.n()),
            ));
        }
        let visible = mask.visible_indices();
        if visible != view.visible_indices {
            return Err(MumError::contract(
                "decode",
                format!("mask {i} does not match the encoded visible indices"),
            ));
        }
        let mut x = linear(
            tape,
            view.feats,
            pv.get(model.layout.enc_to_dec_w),
            pv.get(model.layout.enc_to_dec_b),
        )?;
        x = tape.insert_rows(x, pv.get(model.layout.mask_token), &visible, n)?;
        if let Some(pos_id) = model.layout.dec_pos {
            x = tape.add(x, pv.get(pos_id))?;
        }
        parts.push(x);
    }
    let mut x = tape.concat_rows(&parts)?;

    let frame_groups: Vec<(usize, usize)> = (0..s).map(|i| (i * n, n)).collect();
    let global_groups = vec![(0, s * n)];
    let mut positions = Vec::with_capacity(s * n);
    for _ in 0..s {
        positions.extend(grid.positions());
    }
    let plan = rope_plan_for(cfg, &positions, cfg.dec_head_dim())?;

    let mut captured = None;
    for (i, ids) in model.layout.dec_blocks.iter().enumerate() {
        let global = force_global
            || match cfg.comm_site {
                CommSite::Decoder => i % 2 == 1,
                CommSite::Encoder => false, // decoder is frame-wise only
            };
        let groups = if global {
            &global_groups
        } else {
            &frame_groups
        };
        if capture_block == Some(i) {
            // inline block_forward with probability capture on the attention
            let h = tape.layer_norm(x, pv.get(ids.norm1_g), pv.get(ids.norm1_b), LAYER_NORM_EPS)?;
            let q = linear(tape, h, pv.get(ids.q_w), pv.get(ids.q_b))?;
            let k = linear(tape, h, pv.get(ids.k_w), pv.get(ids.k_b))?;
            let v = linear(tape, h, pv.get(ids.v_w), pv.get(ids.v_b))?;
            let spec = AttnSpec {
                heads: cfg.dec_heads,
                groups: groups.to_vec(),
                rope: plan.clone(),
            };
            let (a, probs) = tape.attention_with_probs(q, k, v, &spec)?;
            captured = Some(probs);
            let a = linear(tape, a, pv.get(ids.o_w), pv.get(ids.o_b))?;
            let xr = tape.add(x, a)?;
            let h2 =
                tape.layer_norm(xr, pv.get(ids.norm2_g), pv.get(ids.norm2_b), LAYER_NORM_EPS)?;
            let m = linear(tape, h2, pv.get(ids.fc1_w), pv.get(ids.fc1_b))?;
            let m = tape.gelu(m);
            let m = linear(tape, m, pv.get(ids.fc2_w), pv.get(ids.fc2_b))?;
            x = tape.add(xr, m)?;
        } else {
            x = block_forward(tape, pv, ids, x, cfg.dec_heads, groups, plan.as_ref())?;
        }
    }

    let x = tape.layer_norm(
        x,
        pv.get(model.layout.final_norm_g),
        pv.get(model.layout.final_norm_b),
        LAYER_NORM_EPS,
    )?;
    let preds = match model.layout.head_b {
        Some(b) => linear(tape, x, pv.get(model.layout.head_w), pv.get(b))?,
        None => tape.matmul(x, pv.get(model.layout.head_w))?,
    };
    Ok((preds, captured))
}

/// Full forward pass: encode visible tokens, decode to per-patch pixel
/// predictions of shape (S·N, patch_dim).
pub fn forward(
    tape: &mut Tape,
    model: &ModelParams,
    pv: &ParamVars,
    views: &[MaskedViewTokens],
    masks: &[PatchMask],
    grid: &PatchGrid,
) -> Result<Var> {
    let encoded = encode(tape, model, pv, views, grid)?;
    decode(tape, model, pv, &encoded, masks, grid)
}

// ── evaluation-time entry points ────────────────────────────────────

/// Apply axial rotary embedding to a (T, heads, head_dim) array at the given
/// grid positions. Position (0, 0) is the identity; the rotation preserves
/// per-token norms; dot products depend only on position offsets.
pub fn rope_rotate(x: &Array, positions: &[(u32, u32)], base: f64) -> Result<Array> {
    let shape = x.shape().to_vec();
    if shape.len() != 3 {
        return Err(MumError::Shape {
            op: "rope_rotate",
            shape,
            reason: "expected (tokens, heads, head_dim)".into(),
        });
    }
    let (t, heads, hd) = (shape[0], shape[1], shape[2]);
    if positions.len() != t {
        return Err(MumError::contract(
            "rope_rotate",
            format!("{t} tokens but {} positions", positions.len()),
        ));
    }
    let plan = RopePlan::new(positions, hd, base)?;
    let mut data = x.data().to_vec();
    plan.apply(&mut data, heads, false);
    Array::from_vec(&shape, data)
}

/// Run the encoder over fully visible views and return token features after
/// encoder block `layer` (1-based; `enc_depth` selects the final layer).
/// Views are processed independently.
pub fn extract_features(images: &Array, layer: usize, model: &ModelParams) -> Result<Array> {
    let cfg = &model.cfg;
    let shape = images.shape().to_vec();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(MumError::Shape {
            op: "extract_features",
            shape,
            reason: "expected (S, 3, H, W)".into(),
        });
    }
    if layer < 1 || layer > cfg.enc_depth {
        return Err(MumError::contract(
            "extract_features",
            format!("layer {layer} outside [1, {}]", cfg.enc_depth),
        ));
    }
    let (s, h, w) = (shape[0], shape[2], shape[3]);
    let grid = PatchGrid::for_image(h, w, cfg.patch_size)?;
    check_grid(model, &grid, "extract_features")?;
    let n = grid.n();
    let positions = grid.positions();
    let plan = rope_plan_for(cfg, &positions, cfg.enc_head_dim())?;
    let groups = vec![(0, n)];
    let frame_len = 3 * h * w;

    let mut out = Vec::with_capacity(s * n * cfg.enc_width);
    for v in 0..s {
        let frame = Array::from_vec(
            &[3, h, w],
            images.data()[v * frame_len..(v + 1) * frame_len].to_vec(),
        )?;
        let patches = crate::masking::patchify(&frame, &grid)?;
        let mut tape = Tape::new();
        let pv = model.tape_vars(&mut tape, false);
        let x = tape.constant(patches);
        let mut x = linear(
            &mut tape,
            x,
            pv.get(model.layout.patch_embed_w),
            pv.get(model.layout.patch_embed_b),
        )?;
        if let Some(pos_id) = model.layout.enc_pos {
            x = tape.add(x, pv.get(pos_id))?;
        }
        for ids in model.layout.enc_blocks.iter().take(layer) {
            x = block_forward(
                &mut tape,
                &pv,
                ids,
                x,
                cfg.enc_heads,
                &groups,
                plan.as_ref(),
            )?;
        }
        out.extend_from_slice(tape.value(x).data());
    }
    Array::from_vec(&[s, n, cfg.enc_width], out)
}

/// Head-averaged decoder attention from one query token to all tokens.
#[derive(Clone, Debug)]
pub struct AttentionMap {
    /// Raw softmax row reshaped to (S, N); sums to 1 over all entries.
    pub weights: Array,
    /// Per-target-view renormalized weights for display; each view's N
    /// entries sum to 1.
    pub per_view: Array,
}

/// Attention map of a global decoder block for a query patch, computed on
/// fully visible views.
pub fn attention_map(
    images: &Array,
    query: (usize, usize, usize),
    model: &ModelParams,
    block: usize,
) -> Result<AttentionMap> {
    attention_map_with_masks(images, None, query, model, block)
}

/// Like [`attention_map`] but with explicit per-view masks (`None` means
/// fully visible). Masking the query's view while leaving a reference view
/// visible shows where a mask token looks for its content.
pub fn attention_map_with_masks(
    images: &Array,
    view_masks: Option<&[PatchMask]>,
    query: (usize, usize, usize),
    model: &ModelParams,
    block: usize,
) -> Result<AttentionMap> {
    let cfg = &model.cfg;
    let shape = images.shape().to_vec();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(MumError::Shape {
            op: "attention_map",
            shape,
            reason: "expected (S, 3, H, W)".into(),
        });
    }
    if block >= cfg.dec_depth {
        return Err(MumError::contract(
            "attention_map",
            format!("block {block} outside [0, {})", cfg.dec_depth),
        ));
    }
    let global = matches!(cfg.comm_site, CommSite::Decoder) && block % 2 == 1;
    if !global {
        return Err(MumError::contract(
            "attention_map",
            format!("decoder block {block} is frame-wise; attention maps need a global block"),
        ));
    }
    let (s, h, w) = (shape[0], shape[2], shape[3]);
    let grid = PatchGrid::for_image(h, w, cfg.patch_size)?;
    check_grid(model, &grid, "attention_map")?;
    let n = grid.n();
    let (qv, qr, qc) = query;
    if qv >= s || qr >= grid.grid_h || qc >= grid.grid_w {
        return Err(MumError::contract(
            "attention_map",
            format!(
                "query ({qv}, {qr}, {qc}) outside (views {s}, grid {}x{})",
                grid.grid_h, grid.grid_w
            ),
        ));
    }

    let frame_len = 3 * h * w;
    let mut views = Vec::with_capacity(s);
    let masks: Vec<PatchMask> = match view_masks {
        Some(m) => {
            if m.len() != s || m.iter().any(|mask| mask.n() != n) {
                return Err(MumError::contract(
                    "attention_map",
                    "per-view masks must match the view count and grid",
                ));
            }
            m.to_vec()
        }
        None => (0..s).map(|_| PatchMask::all_visible(n)).collect(),
    };
    for v in 0..s {
        let frame = Array::from_vec(
            &[3, h, w],
            images.data()[v * frame_len..(v + 1) * frame_len].to_vec(),
        )?;
        let patches = crate::masking::patchify(&frame, &grid)?;
        views.push(MaskedViewTokens::new(&patches, &masks[v], true, 1e-6)?);
    }

    let mut tape = Tape::new();
    let pv = model.tape_vars(&mut tape, false);
    let encoded = encode(&mut tape, model, &pv, &views, &grid)?;
    let (_, captured) = decode_impl(
        &mut tape,
        model,
        &pv,
        &encoded,
        &masks,
        &grid,
        false,
        Some(block),
    )?;
    let probs = captured.ok_or_else(|| MumError::contract("attention_map", "no capture"))?;
    // global block => a single group of all S·N tokens
    let p = &probs[0];
    let heads = cfg.dec_heads;
    let total = s * n;
    let q_idx = qv * n + qr * grid.grid_w + qc;
    let mut row = vec![0.0; total];
    for hh in 0..heads {
        let base = hh * total * total + q_idx * total;
        for j in 0..total {
            row[j] += p.data()[base + j] / heads as f64;
        }
    }
    let weights = Array::from_vec(&[s, n], row.clone())?;
    let mut per_view = row;
    for v in 0..s {
        let sum: f64 = per_view[v * n..(v + 1) * n].iter().sum();
        if sum > 0.0 {
            for x in &mut per_view[v * n..(v + 1) * n] {
                *x /= sum;
            }
        }
    }
    Ok(AttentionMap {
        weights,
        per_view: Array::from_vec(&[s, n], per_view)?,
    })
}
