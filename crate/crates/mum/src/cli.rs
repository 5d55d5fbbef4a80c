//! Command-line entry point: `gen-data`, `pretrain`, `probe`, `inspect`,
//! and `config`.
//!
//! Configuration comes from an optional JSON file (unknown keys rejected)
//! with command-line flags taking precedence. Validation is fail-fast and
//! exhaustive: no command starts compute with an invalid configuration.
//! Exit codes: 0 success, 1 runtime failure, 2 configuration/validation
//! error. Every run is deterministic given `--seed`; `MUM_DATA_DIR` provides
//! the default data root. Ctrl-C during pretraining writes a final
//! checkpoint before exiting.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, OnceLock};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{MumError, Result};
use crate::masking::PatchGrid;
use crate::model::{attention_map, extract_features, ModelConfig, ModelParams};
use crate::numerics::Array;
use crate::probe::{
    cosine_match, match_metrics, sample_at_patch_centers, train_probe_with_eval, write_probe_csv,
    MatchMetrics, MatchMode, ProbeConfig, ProbePair, WarpEstimate,
};
use crate::sampler::SamplerConfig;
use crate::scene::{
    generate_synthetic_scene, load_manifest, manifest::save_warp, GroundTruthWarp, SceneSequence,
    WarpIndex,
};
use crate::train::{
    load_checkpoint, train, ObjectiveConfig, OptimizerState, TrainConfig, TrainOptions,
};

/// Serializable probe section of the run configuration (the projection
/// itself is initialized at runtime from the encoder width and seed).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub temperature: f64,
    pub train_steps: usize,
    pub probe_lr: f64,
    pub eval_interval: usize,
    pub batch_pairs: usize,
}

impl Default for ProbeSection {
    fn default() -> Self {
        ProbeSection {
            temperature: 0.07,
            train_steps: 2000,
            probe_lr: 1e-3,
            eval_interval: 250,
            batch_pairs: 8,
        }
    }
}

/// The full run configuration: JSON-serializable, desk-scale defaults.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub deterministic: bool,
    pub data_dir: Option<PathBuf>,
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub objective: ObjectiveConfig,
    pub train: TrainConfig,
    pub probe: ProbeSection,
    pub log_interval: usize,
    pub ckpt_interval: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            deterministic: true,
            data_dir: None,
            model: ModelConfig::desk(),
            sampler: SamplerConfig {
                min_len: 2,
                max_len: 6,
                frames_per_device: 12,
                single_view_prob: 0.1,
                image_size: 64,
                flip_prob: 0.5,
                rng_seed: 0,
            },
            objective: ObjectiveConfig::default(),
            // the linear scaling rule yields a peak of base_lr/256*12 ≈ 1e-3
            // at the desk batch of 12 frames
            train: TrainConfig {
                base_lr: 2.2e-2,
                batch_size_for_scaling: 12,
                warmup_steps: 100,
                total_steps: 1000,
                ..TrainConfig::default()
            },
            probe: ProbeSection::default(),
            log_interval: 10,
            ckpt_interval: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| MumError::ManifestParse {
            location: path.display().to_string(),
            reason: e.to_string(),
        })?;
        serde_json::from_str(&text).map_err(|e| MumError::ManifestParse {
            location: format!("{}:{}:{}", path.display(), e.line(), e.column()),
            reason: e.to_string(),
        })
    }
}

#[derive(Parser)]
#[command(
    name = "mum",
    version,
    about = "Multi-view masked image modeling at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-view dataset with ground-truth warps
    GenData(GenDataArgs),
    /// Pretrain the encoder/decoder with the multi-view reconstruction loss
    Pretrain(PretrainArgs),
    /// Train and evaluate the dense-matching probe on frozen features
    Probe(ProbeArgs),
    /// Emit attention maps and estimated warps for a checkpoint
    Inspect(InspectArgs),
    /// Print the effective configuration
    Config(ConfigArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// JSON configuration file; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for all randomness
    #[arg(long)]
    seed: Option<u64>,
    /// Force fully deterministic execution (always on; flag kept for
    /// compatibility)
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Output directory (defaults to MUM_DATA_DIR)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of scenes
    #[arg(long, default_value_t = 4)]
    scenes: usize,
    /// Views per scene (1 produces single-view fallback data)
    #[arg(long, default_value_t = 6)]
    views: usize,
    /// Square image size in pixels (>= 32)
    #[arg(long, default_value_t = 64)]
    size: usize,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Dataset directory or manifest.json (defaults to MUM_DATA_DIR)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for checkpoints and metrics
    #[arg(long)]
    out: PathBuf,
    /// Total optimization steps (overrides config)
    #[arg(long)]
    steps: Option<usize>,
    /// Warmup steps (overrides config)
    #[arg(long)]
    warmup: Option<usize>,
    /// Resume from a checkpoint directory
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Ablation toggles: mask_ratio=G, reference_view=on|off,
    /// comm=encoder|decoder, pos=rope|absolute, norm_target=on|off,
    /// min_len=N, max_len=N
    #[arg(long = "ablate")]
    ablate: Vec<String>,
    /// Checkpoint every N steps
    #[arg(long)]
    ckpt_interval: Option<usize>,
    /// Log metrics every N steps
    #[arg(long)]
    log_interval: Option<usize>,
}

#[derive(Args)]
struct ProbeArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Checkpoint directory to evaluate
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory with manifest.json and warps.json (defaults to
    /// MUM_DATA_DIR)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Held-out dataset for evaluation (defaults to --data)
    #[arg(long)]
    eval_data: Option<PathBuf>,
    /// Output directory for probe.csv (and layers.csv with --sweep-layers)
    #[arg(long)]
    out: PathBuf,
    /// Encoder layer to probe (1-based; default: last)
    #[arg(long)]
    layer: Option<usize>,
    /// Probe every encoder layer and emit an EPE-vs-layer table
    #[arg(long)]
    sweep_layers: bool,
    /// Matching mode: soft, hard, or cosine (probe-free)
    #[arg(long, default_value = "soft")]
    mode: String,
    /// Probe learning rates to sweep (comma-separated; best EPE wins)
    #[arg(long)]
    probe_lr: Option<String>,
    /// Probe training steps (overrides config)
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct InspectArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Checkpoint directory
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory (defaults to MUM_DATA_DIR)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Scene index within the manifest
    #[arg(long, default_value_t = 0)]
    scene: usize,
    /// Number of leading frames to feed the decoder
    #[arg(long, default_value_t = 2)]
    views: usize,
    /// Query patch as view,row,col
    #[arg(long, default_value = "0,0,0")]
    query: String,
    /// Decoder block index (must be a global-attention block)
    #[arg(long, default_value_t = 1)]
    block: usize,
}

#[derive(Args)]
struct ConfigArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Print the effective configuration as JSON
    #[arg(long)]
    dump: bool,
}

/// Run the CLI with explicit arguments; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Probe(a) => cmd_probe(a),
        Command::Inspect(a) => cmd_inspect(a),
        Command::Config(a) => cmd_config(a),
    };
    match outcome {
        Ok(()) => 0,
        Err(CliError::Validation(e)) => {
            eprintln!("error: {e}");
            2
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

enum CliError {
    /// Configuration or validation problem detected before compute starts.
    Validation(MumError),
    /// Failure during the work itself.
    Runtime(MumError),
}

trait Phase<T> {
    fn or_validation(self) -> std::result::Result<T, CliError>;
    fn or_runtime(self) -> std::result::Result<T, CliError>;
}

impl<T> Phase<T> for Result<T> {
    fn or_validation(self) -> std::result::Result<T, CliError> {
        self.map_err(CliError::Validation)
    }
    fn or_runtime(self) -> std::result::Result<T, CliError> {
        self.map_err(CliError::Runtime)
    }
}

fn load_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if common.deterministic {
        cfg.deterministic = true;
    }
    cfg.sampler.rng_seed = cfg.seed;
    cfg.train.seed = cfg.seed;
    Ok(cfg)
}

fn data_root(flag: &Option<PathBuf>) -> Result<PathBuf> {
    match flag {
        Some(p) => Ok(p.clone()),
        None => std::env::var_os("MUM_DATA_DIR")
            .map(PathBuf::from)
            .ok_or_else(|| {
                MumError::config(vec![
                    "no data directory: pass --data/--out or set MUM_DATA_DIR".into(),
                ])
            }),
    }
}

/// Resolve a dataset argument to its manifest path and root directory.
fn dataset_paths(dir_or_manifest: &Path) -> Result<(PathBuf, PathBuf)> {
    let (manifest, root) = if dir_or_manifest.is_dir() {
        (
            dir_or_manifest.join("manifest.json"),
            dir_or_manifest.to_path_buf(),
        )
    } else {
        (
            dir_or_manifest.to_path_buf(),
            dir_or_manifest
                .parent()
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from(".")),
        )
    };
    if !manifest.is_file() {
        return Err(MumError::config(vec![format!(
            "manifest not found at {}",
            manifest.display()
        )]));
    }
    Ok((manifest, root))
}

// ── gen-data ────────────────────────────────────────────────────────

fn cmd_gen_data(args: GenDataArgs) -> std::result::Result<(), CliError> {
    let cfg = load_config(&args.common).or_validation()?;
    let out = data_root(&args.out).or_validation()?;
    let mut problems = Vec::new();
    if args.scenes == 0 {
        problems.push("--scenes must be positive".into());
    }
    if args.views == 0 {
        problems.push("--views must be positive".into());
    }
    if args.size < 32 {
        problems.push(format!("--size {} below the 32-pixel minimum", args.size));
    }
    if !problems.is_empty() {
        return Err(CliError::Validation(MumError::config(problems)));
    }
    fs::create_dir_all(&out)
        .map_err(MumError::from)
        .or_validation()?;

    let mut scenes = Vec::with_capacity(args.scenes);
    for i in 0..args.scenes {
        let scene_seed = cfg.seed.wrapping_add(i as u64);
        scenes.push(
            generate_synthetic_scene(scene_seed, args.views, args.size, args.size).or_runtime()?,
        );
    }
    crate::scene::save_dataset(&out, &scenes).or_runtime()?;
    let n_warps: usize = scenes.iter().map(|(_, w)| w.len()).sum();
    println!(
        "wrote {} scenes x {} views ({}x{}) and {} warps to {}",
        args.scenes,
        args.views,
        args.size,
        args.size,
        n_warps,
        out.display()
    );
    Ok(())
}

// ── pretrain ────────────────────────────────────────────────────────

static SIGINT_FLAG: OnceLock<Arc<AtomicBool>> = OnceLock::new();

extern "C" fn sigint_handler(_: libc::c_int) {
    if let Some(flag) = SIGINT_FLAG.get() {
        flag.store(true, Ordering::SeqCst);
    }
}

fn install_sigint_flag() -> Arc<AtomicBool> {
    let flag = SIGINT_FLAG
        .get_or_init(|| Arc::new(AtomicBool::new(false)))
        .clone();
    unsafe {
        libc::signal(
            libc::SIGINT,
            sigint_handler as *const () as libc::sighandler_t,
        );
    }
    flag
}

fn apply_ablations(cfg: &mut RunConfig, toggles: &[String]) -> Result<()> {
    let mut problems = Vec::new();
    for toggle in toggles {
        let Some((key, value)) = toggle.split_once('=') else {
            problems.push(format!("--ablate '{toggle}' is not key=value"));
            continue;
        };
        let on_off = |v: &str| match v {
            "on" | "true" => Ok(true),
            "off" | "false" => Ok(false),
            other => Err(format!("'{other}' is not on/off")),
        };
        match key {
            "mask_ratio" => match value.parse::<f64>() {
                Ok(g) => cfg.objective.mask_ratio = g,
                Err(_) => problems.push(format!("mask_ratio '{value}' is not a number")),
            },
            "reference_view" => match on_off(value) {
                Ok(b) => cfg.objective.reference_view = b,
                Err(e) => problems.push(format!("reference_view: {e}")),
            },
            "norm_target" => match on_off(value) {
                Ok(b) => cfg.objective.normalize_target = b,
                Err(e) => problems.push(format!("norm_target: {e}")),
            },
            "comm" => match value {
                "encoder" => cfg.model.comm_site = crate::model::CommSite::Encoder,
                "decoder" => cfg.model.comm_site = crate::model::CommSite::Decoder,
                other => problems.push(format!("comm '{other}' is not encoder/decoder")),
            },
            "pos" => match value {
                "rope" => cfg.model.pos_mode = crate::model::PosMode::Rope,
                "absolute" => cfg.model.pos_mode = crate::model::PosMode::Absolute,
                other => problems.push(format!("pos '{other}' is not rope/absolute")),
            },
            "min_len" => match value.parse() {
                Ok(v) => cfg.sampler.min_len = v,
                Err(_) => problems.push(format!("min_len '{value}' is not an integer")),
            },
            "max_len" => match value.parse() {
                Ok(v) => cfg.sampler.max_len = v,
                Err(_) => problems.push(format!("max_len '{value}' is not an integer")),
            },
            other => problems.push(format!("unknown ablation key '{other}'")),
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(MumError::config(problems))
    }
}

fn cmd_pretrain(args: PretrainArgs) -> std::result::Result<(), CliError> {
    let mut cfg = load_config(&args.common).or_validation()?;
    apply_ablations(&mut cfg, &args.ablate).or_validation()?;
    if let Some(steps) = args.steps {
        cfg.train.total_steps = steps;
        cfg.train.warmup_steps = cfg.train.warmup_steps.min(steps);
    }
    if let Some(warmup) = args.warmup {
        cfg.train.warmup_steps = warmup;
    }
    if let Some(interval) = args.log_interval {
        cfg.log_interval = interval;
    }
    if args.ckpt_interval.is_some() {
        cfg.ckpt_interval = args.ckpt_interval;
    }

    let data = data_root(&args.data.clone().or(cfg.data_dir.clone())).or_validation()?;
    let (manifest_path, _) = dataset_paths(&data).or_validation()?;
    cfg.model.validate().or_validation()?;
    crate::train::validate_training_setup(
        cfg.model.patch_size,
        &cfg.train,
        &cfg.sampler,
        &cfg.objective,
    )
    .or_validation()?;
    if let Some(resume) = &args.resume {
        if !resume.join("manifest.json").is_file() {
            return Err(CliError::Validation(MumError::config(vec![format!(
                "--resume checkpoint not found at {}",
                resume.display()
            )])));
        }
    }
    fs::create_dir_all(&args.out)
        .map_err(MumError::from)
        .or_validation()?;

    let pool = load_manifest(&manifest_path).or_runtime()?;
    if pool.is_empty() {
        return Err(CliError::Validation(MumError::config(vec![
            "dataset has no scenes".into(),
        ])));
    }
    let longest = pool.iter().map(SceneSequence::len).max().unwrap_or(0);
    if longest < cfg.sampler.max_len {
        return Err(CliError::Validation(MumError::config(vec![format!(
            "sampler.max_len {} exceeds the longest sequence ({longest}); lower it \
             (e.g. --ablate max_len={longest}) or regenerate data with more views",
            cfg.sampler.max_len
        )])));
    }
    let single_view_pool: Vec<_> = pool.iter().flat_map(|s| s.frames.clone()).collect();

    let grid = PatchGrid::for_image(
        cfg.sampler.image_size,
        cfg.sampler.image_size,
        cfg.model.patch_size,
    )
    .or_validation()?;
    let (mut model, mut opt, start_step) = match &args.resume {
        Some(dir) => {
            let (model, opt, step) = load_checkpoint(dir).or_runtime()?;
            let opt = opt.unwrap_or_else(|| OptimizerState::new(&model.store));
            (model, opt, step)
        }
        None => {
            let model = ModelParams::init(&cfg.model, &grid, cfg.seed).or_validation()?;
            let opt = OptimizerState::new(&model.store);
            (model, opt, 0)
        }
    };

    let stop_flag = install_sigint_flag();
    let opts = TrainOptions {
        log_interval: cfg.log_interval,
        ckpt_interval: cfg.ckpt_interval,
        out_dir: Some(args.out.clone()),
        metrics_path: Some(args.out.join("metrics.csv")),
        start_step,
        stop_at_step: None,
        stop_flag: Some(stop_flag),
    };
    let outcome = train(
        &mut model,
        &mut opt,
        &pool,
        &single_view_pool,
        &cfg.train,
        &cfg.sampler,
        &cfg.objective,
        &opts,
        None,
    )
    .or_runtime()?;
    println!(
        "trained to step {}{}; metrics at {}",
        outcome.final_step,
        if outcome.stopped_early {
            " (interrupted)"
        } else {
            ""
        },
        args.out.join("metrics.csv").display()
    );
    if let Some(ckpt) = outcome.final_checkpoint {
        println!("final checkpoint: {}", ckpt.display());
    }
    Ok(())
}

// ── probe ───────────────────────────────────────────────────────────

/// Features plus sampled ground truth for every warp-indexed pair of a
/// dataset, at one encoder layer.
fn build_probe_pairs(
    scenes: &[SceneSequence],
    warps: &WarpIndex,
    layer: usize,
    model: &ModelParams,
) -> Result<Vec<ProbePair>> {
    let mut frame_lookup: HashMap<&str, &crate::scene::FrameRecord> = HashMap::new();
    for scene in scenes {
        for frame in &scene.frames {
            frame_lookup.insert(frame.frame_id.as_str(), frame);
        }
    }
    let mut feature_cache: HashMap<String, Array> = HashMap::new();
    let mut features_of = |frame: &crate::scene::FrameRecord| -> Result<Array> {
        if let Some(f) = feature_cache.get(&frame.frame_id) {
            return Ok(f.clone());
        }
        let (h, w) = (frame.height(), frame.width());
        let images = frame.image.clone().reshaped(&[1, 3, h, w])?;
        let feats = extract_features(&images, layer, model)?;
        let n = feats.shape()[1];
        let width = feats.shape()[2];
        let flat = feats.reshaped(&[n, width])?;
        feature_cache.insert(frame.frame_id.clone(), flat.clone());
        Ok(flat)
    };

    let mut pairs = Vec::new();
    for entry in &warps.entries {
        let (Some(src), Some(dst)) = (
            frame_lookup.get(entry.source_id.as_str()),
            frame_lookup.get(entry.target_id.as_str()),
        ) else {
            return Err(MumError::Contract {
                op: "probe",
                reason: format!(
                    "warp references unknown frames '{}' -> '{}'",
                    entry.source_id, entry.target_id
                ),
            });
        };
        let grid = PatchGrid::for_image(src.height(), src.width(), model.cfg.patch_size)?;
        let gt_full = warps.load(entry)?;
        let gt = sample_at_patch_centers(&gt_full, &grid)?;
        if !gt.valid.iter().any(|&v| v) {
            continue; // no usable supervision in this pair
        }
        pairs.push(ProbePair {
            pair_id: format!("{}__{}", entry.source_id, entry.target_id),
            feat_a: features_of(src)?,
            feat_b: features_of(dst)?,
            gt,
        });
    }
    if pairs.is_empty() {
        return Err(MumError::contract(
            "probe",
            "dataset has no usable warp pairs",
        ));
    }
    Ok(pairs)
}

fn per_pair_rows(
    pairs: &[ProbePair],
    projection: &Array,
    temperature: f64,
    mode: MatchMode,
) -> Result<Vec<(String, MatchMetrics)>> {
    pairs
        .iter()
        .map(|p| {
            let s = crate::probe::similarity(&p.feat_a, &p.feat_b, projection, temperature)?;
            let est = crate::probe::warp_from_similarity(&s, &p.gt.grid, mode)?;
            Ok((p.pair_id.clone(), match_metrics(&est, &p.gt)?))
        })
        .collect()
}

fn micro_summary(rows: &[(String, MatchMetrics)]) -> MatchMetrics {
    let n: usize = rows.iter().map(|(_, m)| m.n_valid).sum();
    let err: f64 = rows.iter().map(|(_, m)| m.epe * m.n_valid as f64).sum();
    let robust: f64 = rows
        .iter()
        .map(|(_, m)| m.robustness * m.n_valid as f64)
        .sum();
    MatchMetrics {
        epe: err / n as f64,
        robustness: robust / n as f64,
        n_valid: n,
    }
}

fn cmd_probe(args: ProbeArgs) -> std::result::Result<(), CliError> {
    let cfg = load_config(&args.common).or_validation()?;
    if !args.checkpoint.join("manifest.json").is_file() {
        return Err(CliError::Validation(MumError::config(vec![format!(
            "checkpoint not found at {}",
            args.checkpoint.display()
        )])));
    }
    let data = data_root(&args.data.clone().or(cfg.data_dir.clone())).or_validation()?;
    let (manifest_path, root) = dataset_paths(&data).or_validation()?;
    let (eval_manifest, eval_root) = match &args.eval_data {
        Some(d) => dataset_paths(d).or_validation()?,
        None => (manifest_path.clone(), root.clone()),
    };
    let mode = match args.mode.as_str() {
        "soft" => MatchMode::Soft,
        "hard" => MatchMode::Hard,
        "cosine" => MatchMode::Hard, // probe-free path below
        other => {
            return Err(CliError::Validation(MumError::config(vec![format!(
                "--mode '{other}' is not soft/hard/cosine"
            )])))
        }
    };
    let lr_grid: Vec<f64> = match &args.probe_lr {
        Some(text) => {
            let mut lrs = Vec::new();
            let mut problems = Vec::new();
            for part in text.split(',') {
                match part.trim().parse::<f64>() {
                    Ok(v) if v > 0.0 => lrs.push(v),
                    _ => problems.push(format!(
                        "--probe-lr entry '{part}' is not a positive number"
                    )),
                }
            }
            if !problems.is_empty() {
                return Err(CliError::Validation(MumError::config(problems)));
            }
            lrs
        }
        None => vec![cfg.probe.probe_lr],
    };
    fs::create_dir_all(&args.out)
        .map_err(MumError::from)
        .or_validation()?;

    let (model, _, ckpt_step) = load_checkpoint(&args.checkpoint).or_runtime()?;
    let layer = args.layer.unwrap_or(model.cfg.enc_depth);
    if layer < 1 || layer > model.cfg.enc_depth {
        return Err(CliError::Validation(MumError::config(vec![format!(
            "--layer {layer} outside [1, {}]",
            model.cfg.enc_depth
        )])));
    }

    let scenes = load_manifest(&manifest_path).or_runtime()?;
    let warps = WarpIndex::open(&root).or_runtime()?;
    let (eval_scenes, eval_warps);
    let (eval_scenes_ref, eval_warps_ref) = if args.eval_data.is_some() {
        eval_scenes = load_manifest(&eval_manifest).or_runtime()?;
        eval_warps = WarpIndex::open(&eval_root).or_runtime()?;
        (&eval_scenes, &eval_warps)
    } else {
        (&scenes, &warps)
    };

    if args.mode == "cosine" {
        // probe-free matching, best of with/without feature standardization
        let pairs =
            build_probe_pairs(eval_scenes_ref, eval_warps_ref, layer, &model).or_runtime()?;
        let mut best: Option<(bool, Vec<(String, MatchMetrics)>, MatchMetrics)> = None;
        for apply_norm in [false, true] {
            let rows: Vec<(String, MatchMetrics)> = pairs
                .iter()
                .map(|p| {
                    let est = cosine_match(&p.feat_a, &p.feat_b, &p.gt.grid, apply_norm)?;
                    Ok((p.pair_id.clone(), match_metrics(&est, &p.gt)?))
                })
                .collect::<Result<_>>()
                .or_runtime()?;
            let summary = micro_summary(&rows);
            if best.as_ref().map_or(true, |(_, _, b)| summary.epe < b.epe) {
                best = Some((apply_norm, rows, summary));
            }
        }
        let (apply_norm, rows, summary) = best.expect("two variants evaluated");
        let path = args.out.join("probe.csv");
        write_probe_csv(&path, &rows, &summary).or_runtime()?;
        println!(
            "cosine matching (layer {layer}, norm={}): epe {:.3} robustness {:.3} over {} points -> {}",
            if apply_norm { "on" } else { "off" },
            summary.epe,
            summary.robustness,
            summary.n_valid,
            path.display()
        );
        return Ok(());
    }

    let train_pairs = build_probe_pairs(&scenes, &warps, layer, &model).or_runtime()?;
    let eval_pairs = if args.eval_data.is_some() {
        build_probe_pairs(eval_scenes_ref, eval_warps_ref, layer, &model).or_runtime()?
    } else {
        train_pairs.clone()
    };
    let width = model.cfg.enc_width;

    let run_probe = |layer_pairs: (&[ProbePair], &[ProbePair])| -> Result<(Array, MatchMetrics)> {
        let (tr, ev) = layer_pairs;
        let mut best: Option<(Array, MatchMetrics)> = None;
        for &lr in &lr_grid {
            let probe_cfg = ProbeConfig {
                temperature: cfg.probe.temperature,
                train_steps: args.steps.unwrap_or(cfg.probe.train_steps),
                probe_lr: lr,
                eval_interval: cfg.probe.eval_interval,
                batch_pairs: cfg.probe.batch_pairs,
                ..ProbeConfig::new(width, cfg.seed)
            };
            let (proj, metrics) = train_probe_with_eval(tr, ev, &probe_cfg)?;
            if best.as_ref().map_or(true, |(_, b)| metrics.epe < b.epe) {
                best = Some((proj, metrics));
            }
        }
        Ok(best.expect("at least one learning rate"))
    };

    if args.sweep_layers {
        let mut table = Vec::new();
        for l in 1..=model.cfg.enc_depth {
            let tr = build_probe_pairs(&scenes, &warps, l, &model).or_runtime()?;
            let ev = if args.eval_data.is_some() {
                build_probe_pairs(eval_scenes_ref, eval_warps_ref, l, &model).or_runtime()?
            } else {
                tr.clone()
            };
            let (_, metrics) = run_probe((&tr, &ev)).or_runtime()?;
            println!(
                "layer {l}: epe {:.3} robustness {:.3}",
                metrics.epe, metrics.robustness
            );
            table.push((l, metrics));
        }
        let path = args.out.join("layers.csv");
        let mut text = String::from("layer,epe,robustness,n_valid\n");
        for (l, m) in &table {
            text.push_str(&format!("{l},{},{},{}\n", m.epe, m.robustness, m.n_valid));
        }
        fs::write(&path, text)
            .map_err(MumError::from)
            .or_runtime()?;
        println!("layer sweep written to {}", path.display());
    }

    let (projection, best) = run_probe((&train_pairs, &eval_pairs)).or_runtime()?;
    let rows = per_pair_rows(&eval_pairs, &projection, cfg.probe.temperature, mode).or_runtime()?;
    let summary = micro_summary(&rows);
    let path = args.out.join("probe.csv");
    write_probe_csv(&path, &rows, &summary).or_runtime()?;
    println!(
        "probe (checkpoint step {ckpt_step}, layer {layer}): best epe {:.3} robustness {:.3}; per-pair results -> {}",
        best.epe,
        best.robustness,
        path.display()
    );
    Ok(())
}

// ── inspect ─────────────────────────────────────────────────────────

fn cmd_inspect(args: InspectArgs) -> std::result::Result<(), CliError> {
    let cfg = load_config(&args.common).or_validation()?;
    if !args.checkpoint.join("manifest.json").is_file() {
        return Err(CliError::Validation(MumError::config(vec![format!(
            "checkpoint not found at {}",
            args.checkpoint.display()
        )])));
    }
    let data = data_root(&args.data.clone().or(cfg.data_dir.clone())).or_validation()?;
    let (manifest_path, _) = dataset_paths(&data).or_validation()?;
    let query: Vec<usize> = args
        .query
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| {
            CliError::Validation(MumError::config(vec![format!(
                "--query '{}' is not view,row,col",
                args.query
            )]))
        })?;
    if query.len() != 3 {
        return Err(CliError::Validation(MumError::config(vec![
            "--query needs exactly view,row,col".into(),
        ])));
    }
    if args.views < 2 {
        return Err(CliError::Validation(MumError::config(vec![
            "--views must be at least 2".into(),
        ])));
    }
    fs::create_dir_all(&args.out)
        .map_err(MumError::from)
        .or_validation()?;

    let (model, _, _) = load_checkpoint(&args.checkpoint).or_runtime()?;
    let scenes = load_manifest(&manifest_path).or_runtime()?;
    let Some(scene) = scenes.get(args.scene) else {
        return Err(CliError::Validation(MumError::config(vec![format!(
            "--scene {} outside the manifest's {} scenes",
            args.scene,
            scenes.len()
        )])));
    };
    if scene.len() < args.views {
        return Err(CliError::Validation(MumError::config(vec![format!(
            "scene '{}' has {} frames, --views wants {}",
            scene.scene_id,
            scene.len(),
            args.views
        )])));
    }
    let frames = &scene.frames[..args.views];
    let (h, w) = (frames[0].height(), frames[0].width());
    let mut stacked = Vec::with_capacity(args.views * 3 * h * w);
    for f in frames {
        stacked.extend_from_slice(f.image.data());
    }
    let images = Array::from_vec(&[args.views, 3, h, w], stacked).map_err(CliError::Runtime)?;

    let map =
        attention_map(&images, (query[0], query[1], query[2]), &model, args.block).or_runtime()?;
    let grid = PatchGrid::for_image(h, w, model.cfg.patch_size).or_runtime()?;
    let attn_path = args.out.join("attention.csv");
    {
        let mut text = String::from("view,patch_row,patch_col,weight,weight_per_view\n");
        for v in 0..args.views {
            for k in 0..grid.n() {
                let (r, c) = grid.position(k);
                text.push_str(&format!(
                    "{v},{r},{c},{},{}\n",
                    map.weights.data()[v * grid.n() + k],
                    map.per_view.data()[v * grid.n() + k]
                ));
            }
        }
        fs::write(&attn_path, text)
            .map_err(MumError::from)
            .or_runtime()?;
    }

    // estimated warp between the first two views via cosine matching on
    // final-layer features
    let feats = extract_features(&images, model.cfg.enc_depth, &model).or_runtime()?;
    let n = grid.n();
    let width = model.cfg.enc_width;
    let fa = Array::from_vec(&[n, width], feats.data()[..n * width].to_vec())
        .map_err(CliError::Runtime)?;
    let fb = Array::from_vec(&[n, width], feats.data()[n * width..2 * n * width].to_vec())
        .map_err(CliError::Runtime)?;
    let est = cosine_match(&fa, &fb, &grid, false).or_runtime()?;
    let warp_path = args.out.join(format!(
        "warp_{}__{}.mumw",
        frames[0].frame_id, frames[1].frame_id
    ));
    save_warp(
        &warp_path,
        &estimate_to_warp(&est, &frames[0].frame_id, &frames[1].frame_id),
    )
    .or_runtime()?;
    let warp_csv = args.out.join("warp.csv");
    {
        let mut text = String::from("patch_row,patch_col,target_x,target_y,valid\n");
        for k in 0..n {
            let (r, c) = grid.position(k);
            text.push_str(&format!(
                "{r},{c},{},{},{}\n",
                est.coords.data()[k * 2],
                est.coords.data()[k * 2 + 1],
                est.valid[k] as u8
            ));
        }
        fs::write(&warp_csv, text)
            .map_err(MumError::from)
            .or_runtime()?;
    }
    println!(
        "attention map -> {}; estimated warp -> {}",
        attn_path.display(),
        warp_path.display()
    );
    Ok(())
}

/// Store a patch-resolution estimate in the dense warp binary layout.
fn estimate_to_warp(est: &WarpEstimate, source_id: &str, target_id: &str) -> GroundTruthWarp {
    GroundTruthWarp {
        source_id: source_id.to_string(),
        target_id: target_id.to_string(),
        warp: est.coords.clone(),
        valid: est.valid.clone(),
    }
}

// ── config ──────────────────────────────────────────────────────────

fn cmd_config(args: ConfigArgs) -> std::result::Result<(), CliError> {
    let cfg = load_config(&args.common).or_validation()?;
    let mut problems = cfg.model.problems();
    problems.extend(cfg.sampler.problems());
    problems.extend(cfg.train.problems());
    problems.extend(cfg.objective.problems());
    if !problems.is_empty() {
        return Err(CliError::Validation(MumError::config(problems)));
    }
    if args.dump {
        let text = serde_json::to_string_pretty(&cfg)
            .map_err(|e| CliError::Runtime(MumError::contract("config", e.to_string())))?;
        println!("{text}");
    } else {
        println!("configuration is valid; use --dump to print it");
    }
    Ok(())
}
