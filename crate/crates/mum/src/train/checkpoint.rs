//! Checkpoint directory format.
//!
//! A checkpoint is a directory holding `manifest.json` (parameter names,
//! shapes, dtype, the training step, model configuration and patch grid)
//! plus one raw little-endian f32 blob per named parameter under `params/`,
//! and, when optimizer state is saved, first/second moment blobs under
//! `opt/`. Round-trips are bit-exact: trainable state is kept
//! f32-representable at all times.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MumError, Result};
use crate::masking::PatchGrid;
use crate::model::{ModelConfig, ModelParams, ParamStore};
use crate::numerics::Array;
use crate::train::adamw::OptimizerState;

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    version: u32,
    step: usize,
    model: ModelConfig,
    grid: GridDoc,
    params: Vec<ParamDoc>,
    optimizer: bool,
}

#[derive(Serialize, Deserialize)]
struct GridDoc {
    patch_size: usize,
    grid_h: usize,
    grid_w: usize,
}

#[derive(Serialize, Deserialize)]
struct ParamDoc {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    decay: bool,
}

fn write_blob(path: &Path, values: &Array) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for &v in values.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_blob(path: &Path, shape: &[usize]) -> Result<Array> {
    let n: usize = shape.iter().product();
    let mut bytes = Vec::with_capacity(n * 4);
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() != n * 4 {
        return Err(MumError::Checkpoint(format!(
            "{}: expected {} bytes, found {}",
            path.display(),
            n * 4,
            bytes.len()
        )));
    }
    let data = (0..n)
        .map(|i| f32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap()) as f64)
        .collect();
    Array::from_vec(shape, data)
}

pub fn save_checkpoint(
    dir: &Path,
    model: &ModelParams,
    opt: Option<&OptimizerState>,
    step: usize,
) -> Result<()> {
    fs::create_dir_all(dir.join("params"))?;
    if opt.is_some() {
        fs::create_dir_all(dir.join("opt"))?;
    }
    let manifest = CheckpointManifest {
        format: "mum-checkpoint".into(),
        version: 1,
        step,
        model: model.cfg.clone(),
        grid: GridDoc {
            patch_size: model.grid.patch_size,
            grid_h: model.grid.grid_h,
            grid_w: model.grid.grid_w,
        },
        params: model
            .store
            .ids()
            .map(|id| ParamDoc {
                name: model.store.name(id).to_string(),
                shape: model.store.value(id).shape().to_vec(),
                dtype: "f32".into(),
                decay: model.store.decays(id),
            })
            .collect(),
        optimizer: opt.is_some(),
    };
    let text =
        serde_json::to_string_pretty(&manifest).map_err(|e| MumError::Checkpoint(e.to_string()))?;
    fs::write(dir.join("manifest.json"), text)?;
    for (idx, id) in model.store.ids().enumerate() {
        let name = model.store.name(id);
        write_blob(
            &dir.join("params").join(format!("{name}.bin")),
            model.store.value(id),
        )?;
        if let Some(state) = opt {
            write_blob(
                &dir.join("opt").join(format!("{name}.m.bin")),
                &state.m[idx],
            )?;
            write_blob(
                &dir.join("opt").join(format!("{name}.v.bin")),
                &state.v[idx],
            )?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(ModelParams, Option<OptimizerState>, usize)> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| MumError::Checkpoint(format!("{}: {e}", manifest_path.display())))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)
        .map_err(|e| MumError::Checkpoint(format!("{}: {e}", manifest_path.display())))?;
    if manifest.format != "mum-checkpoint" || manifest.version != 1 {
        return Err(MumError::Checkpoint(format!(
            "unsupported checkpoint format '{}' v{}",
            manifest.format, manifest.version
        )));
    }
    let grid = PatchGrid {
        patch_size: manifest.grid.patch_size,
        grid_h: manifest.grid.grid_h,
        grid_w: manifest.grid.grid_w,
    };
    let mut store = ParamStore::default();
    for p in &manifest.params {
        let value = read_blob(
            &dir.join("params").join(format!("{}.bin", p.name)),
            &p.shape,
        )?;
        store.add(p.name.clone(), value, p.decay);
    }
    let model = ModelParams::from_store(&manifest.model, &grid, store)?;
    let opt = if manifest.optimizer {
        let mut state = OptimizerState::new(&model.store);
        state.step = manifest.step;
        for (idx, id) in model.store.ids().enumerate() {
            let name = model.store.name(id);
            let shape = model.store.value(id).shape().to_vec();
            state.m[idx] = read_blob(&dir.join("opt").join(format!("{name}.m.bin")), &shape)?;
            state.v[idx] = read_blob(&dir.join("opt").join(format!("{name}.v.bin")), &shape)?;
        }
        Some(state)
    } else {
        None
    };
    Ok((model, opt, manifest.step))
}
