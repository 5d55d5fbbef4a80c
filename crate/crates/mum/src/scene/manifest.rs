//! Dataset manifest and image/warp file formats.
//!
//! Manifest: JSON `{"scenes":[{"scene_id", "frames":[{"frame_id", "path",
//! "order_index"}]}]}` with paths resolved relative to the manifest file.
//!
//! Images are 8-bit PNG (normalized to [0, 1]) or raw `MUMF` blobs: a
//! 16-byte header (magic "MUMF", u32 C, H, W little-endian) followed by
//! C·H·W little-endian f32 values in (C, H, W) row-major order.
//!
//! Warps are `MUMW` blobs: magic "MUMW", u32 H, W, flags(=0), two
//! length-prefixed id strings, H·W·2 f32 target coordinates (x, y), then
//! H·W validity bytes.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{MumError, Result};
use crate::numerics::Array;
use crate::scene::{FrameRecord, GroundTruthWarp, SceneSequence};

const MUMF_MAGIC: &[u8; 4] = b"MUMF";
const MUMW_MAGIC: &[u8; 4] = b"MUMW";

#[derive(Serialize, Deserialize)]
struct ManifestDoc {
    scenes: Vec<SceneDoc>,
}

#[derive(Serialize, Deserialize)]
struct SceneDoc {
    scene_id: String,
    frames: Vec<FrameDoc>,
}

#[derive(Serialize, Deserialize)]
struct FrameDoc {
    frame_id: String,
    path: String,
    order_index: usize,
}

/// Parsed manifest with frame metadata; pixel data loads on demand.
pub struct ManifestIndex {
    root: PathBuf,
    doc: ManifestDoc,
}

impl ManifestIndex {
    /// Parse and validate a manifest without decoding any image.
    pub fn open(path: &Path) -> Result<ManifestIndex> {
        let text = fs::read_to_string(path).map_err(|e| MumError::ManifestParse {
            location: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let doc: ManifestDoc =
            serde_json::from_str(&text).map_err(|e| MumError::ManifestParse {
                location: format!("{}:{}:{}", path.display(), e.line(), e.column()),
                reason: e.to_string(),
            })?;
        let root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(ManifestIndex { root, doc })
    }

    pub fn n_scenes(&self) -> usize {
        self.doc.scenes.len()
    }

    /// Decode one frame of one scene.
    pub fn load_frame(&self, scene: usize, frame: usize) -> Result<FrameRecord> {
        let s = &self.doc.scenes[scene];
        let f = &s.frames[frame];
        let image = load_image(&self.root.join(&f.path)).map_err(|e| MumError::Ingest {
            frame_id: f.frame_id.clone(),
            reason: e.to_string(),
        })?;
        let rec = FrameRecord {
            frame_id: f.frame_id.clone(),
            image,
            scene_id: s.scene_id.clone(),
            order_index: f.order_index,
        };
        rec.validate()?;
        Ok(rec)
    }

    /// Decode a whole scene as a sequence, frames sorted by order_index.
    pub fn load_sequence(&self, scene: usize) -> Result<SceneSequence> {
        let s = &self.doc.scenes[scene];
        let mut frames = Vec::with_capacity(s.frames.len());
        for i in 0..s.frames.len() {
            frames.push(self.load_frame(scene, i)?);
        }
        frames.sort_by_key(|f| f.order_index);
        SceneSequence::new(s.scene_id.clone(), frames)
    }
}

/// Load every scene of a manifest. See [`ManifestIndex`] for on-demand
/// decoding of individual frames.
pub fn load_manifest(path: &Path) -> Result<Vec<SceneSequence>> {
    let index = ManifestIndex::open(path)?;
    (0..index.n_scenes())
        .map(|i| index.load_sequence(i))
        .collect()
}

// ── image IO ────────────────────────────────────────────────────────

/// Decode a PNG or MUMF image into a (3, H, W) array in [0, 1], sniffing the
/// format from the file's magic bytes.
pub fn load_image(path: &Path) -> Result<Array> {
    let mut file = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)?;
    if &magic == MUMF_MAGIC {
        return read_mumf_body(&mut file);
    }
    drop(file);
    if magic == [0x89, b'P', b'N', b'G'] {
        return read_png(path);
    }
    Err(MumError::contract(
        "load_image",
        format!("{}: unrecognized image format", path.display()),
    ))
}

fn read_mumf_body(r: &mut impl Read) -> Result<Array> {
    let mut dims = [0u8; 12];
    r.read_exact(&mut dims)?;
    let c = u32::from_le_bytes(dims[0..4].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(dims[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(dims[8..12].try_into().unwrap()) as usize;
    if c != 3 || h == 0 || w == 0 {
        return Err(MumError::contract(
            "load_image",
            format!("MUMF dims ({c}, {h}, {w}) unsupported"),
        ));
    }
    let n = c * h * w;
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let v = f32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap()) as f64;
        if !v.is_finite() || !(-1e-6..=1.0 + 1e-6).contains(&v) {
            return Err(MumError::contract(
                "load_image",
                format!("pixel value {v} outside [0, 1]"),
            ));
        }
        data.push(v.clamp(0.0, 1.0));
    }
    Array::from_vec(&[3, h, w], data)
}

fn read_png(path: &Path) -> Result<Array> {
    let decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    let mut reader = decoder
        .read_info()
        .map_err(|e| MumError::contract("load_image", format!("png: {e}")))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| MumError::contract("load_image", format!("png: {e}")))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(MumError::contract(
            "load_image",
            "only 8-bit PNG is supported",
        ));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let px = &buf[..info.buffer_size()];
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        other => {
            return Err(MumError::contract(
                "load_image",
                format!("png color type {other:?} unsupported"),
            ))
        }
    };
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * channels;
            for c in 0..3 {
                let v = px[base + c.min(channels - 1).min(2)] as f64 / 255.0;
                data[c * h * w + y * w + x] = v;
            }
        }
    }
    Array::from_vec(&[3, h, w], data)
}

/// Write a (3, H, W) array as a MUMF blob.
pub fn save_image_mumf(path: &Path, image: &Array) -> Result<()> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(MumError::Shape {
            op: "save_image_mumf",
            shape: shape.to_vec(),
            reason: "expected (3, H, W)".into(),
        });
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MUMF_MAGIC)?;
    w.write_all(&(shape[0] as u32).to_le_bytes())?;
    w.write_all(&(shape[1] as u32).to_le_bytes())?;
    w.write_all(&(shape[2] as u32).to_le_bytes())?;
    for &v in image.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

// ── warp IO ─────────────────────────────────────────────────────────

pub fn save_warp(path: &Path, warp: &GroundTruthWarp) -> Result<()> {
    let (h, w) = (warp.height(), warp.width());
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(MUMW_MAGIC)?;
    f.write_all(&(h as u32).to_le_bytes())?;
    f.write_all(&(w as u32).to_le_bytes())?;
    f.write_all(&0u32.to_le_bytes())?;
    for id in [&warp.source_id, &warp.target_id] {
        f.write_all(&(id.len() as u32).to_le_bytes())?;
        f.write_all(id.as_bytes())?;
    }
    for &v in warp.warp.data() {
        f.write_all(&(v as f32).to_le_bytes())?;
    }
    for &v in &warp.valid {
        f.write_all(&[v as u8])?;
    }
    f.flush()?;
    Ok(())
}

pub fn load_warp(path: &Path) -> Result<GroundTruthWarp> {
    let mut f = BufReader::new(File::open(path)?);
    let mut head = [0u8; 16];
    f.read_exact(&mut head)?;
    if &head[0..4] != MUMW_MAGIC {
        return Err(MumError::contract("load_warp", "bad magic"));
    }
    let h = u32::from_le_bytes(head[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    let read_id = |f: &mut BufReader<File>| -> Result<String> {
        let mut len = [0u8; 4];
        f.read_exact(&mut len)?;
        let mut bytes = vec![0u8; u32::from_le_bytes(len) as usize];
        f.read_exact(&mut bytes)?;
        String::from_utf8(bytes)
            .map_err(|e| MumError::contract("load_warp", format!("bad id string: {e}")))
    };
    let source_id = read_id(&mut f)?;
    let target_id = read_id(&mut f)?;
    let n = h * w * 2;
    let mut bytes = vec![0u8; n * 4];
    f.read_exact(&mut bytes)?;
    let data: Vec<f64> = (0..n)
        .map(|i| f32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap()) as f64)
        .collect();
    let mut vbytes = vec![0u8; h * w];
    f.read_exact(&mut vbytes)?;
    Ok(GroundTruthWarp {
        source_id,
        target_id,
        warp: Array::from_vec(&[h, w, 2], data)?,
        valid: vbytes.into_iter().map(|b| b != 0).collect(),
    })
}

// ── dataset layout ──────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct WarpIndexDoc {
    warps: Vec<WarpEntry>,
}

#[derive(Serialize, Deserialize, Clone)]
pub struct WarpEntry {
    pub source_id: String,
    pub target_id: String,
    pub path: String,
}

/// Index of the ground-truth warp files next to a manifest.
pub struct WarpIndex {
    root: PathBuf,
    pub entries: Vec<WarpEntry>,
}

impl WarpIndex {
    pub fn open(dir: &Path) -> Result<WarpIndex> {
        let path = dir.join("warps.json");
        let text = fs::read_to_string(&path).map_err(|e| MumError::ManifestParse {
            location: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let doc: WarpIndexDoc =
            serde_json::from_str(&text).map_err(|e| MumError::ManifestParse {
                location: format!("{}:{}:{}", path.display(), e.line(), e.column()),
                reason: e.to_string(),
            })?;
        Ok(WarpIndex {
            root: dir.to_path_buf(),
            entries: doc.warps,
        })
    }

    pub fn load(&self, entry: &WarpEntry) -> Result<GroundTruthWarp> {
        load_warp(&self.root.join(&entry.path))
    }
}

/// Write scenes and their warps as a self-contained dataset directory:
/// `manifest.json`, `images/*.mumf`, `warps/*.mumw`, and `warps.json`.
pub fn save_dataset(dir: &Path, scenes: &[(SceneSequence, Vec<GroundTruthWarp>)]) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("warps"))?;
    let mut doc = ManifestDoc { scenes: vec![] };
    let mut warp_doc = WarpIndexDoc { warps: vec![] };
    for (seq, warps) in scenes {
        let mut frames = Vec::with_capacity(seq.frames.len());
        for f in &seq.frames {
            let rel = format!("images/{}.mumf", f.frame_id);
            save_image_mumf(&dir.join(&rel), &f.image)?;
            frames.push(FrameDoc {
                frame_id: f.frame_id.clone(),
                path: rel,
                order_index: f.order_index,
            });
        }
        doc.scenes.push(SceneDoc {
            scene_id: seq.scene_id.clone(),
            frames,
        });
        for w in warps {
            let rel = format!("warps/{}__{}.mumw", w.source_id, w.target_id);
            save_warp(&dir.join(&rel), w)?;
            warp_doc.warps.push(WarpEntry {
                source_id: w.source_id.clone(),
                target_id: w.target_id.clone(),
                path: rel,
            });
        }
    }
    let manifest = serde_json::to_string_pretty(&doc)
        .map_err(|e| MumError::contract("save_dataset", e.to_string()))?;
    fs::write(dir.join("manifest.json"), manifest)?;
    let warps = serde_json::to_string_pretty(&warp_doc)
        .map_err(|e| MumError::contract("save_dataset", e.to_string()))?;
    fs::write(dir.join("warps.json"), warps)?;
    Ok(())
}
