//! Binary checkpoint format: magic, schema version, training step, ablation
//! mode, a JSON snapshot of the model config, then every parameter sorted by
//! name as f64 little-endian. Round trips are bit-exact for both precisions
//! (f32 widens losslessly).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};

use crate::autodiff::param::ParamStore;
use crate::autodiff::tensor::Elem;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::AblationMode;

const MAGIC: &[u8; 8] = b"DVCHKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub step: u64,
    pub mode: AblationMode,
    pub config: ModelConfig,
    pub params: BTreeMap<String, ArrayD<f64>>,
}

fn mode_tag(mode: AblationMode) -> u8 {
    match mode {
        AblationMode::Full => 0,
        AblationMode::VitdOnly => 1,
        AblationMode::FpdOnly => 2,
    }
}

fn tag_mode(tag: u8) -> Option<AblationMode> {
    match tag {
        0 => Some(AblationMode::Full),
        1 => Some(AblationMode::VitdOnly),
        2 => Some(AblationMode::FpdOnly),
        _ => None,
    }
}

pub fn save_checkpoint<F: Elem>(
    store: &ParamStore<F>,
    config: &ModelConfig,
    mode: AblationMode,
    step: u64,
    path: &Path,
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.write_all(MAGIC).unwrap();
    buf.write_u32::<LittleEndian>(VERSION).unwrap();
    buf.write_u64::<LittleEndian>(step).unwrap();
    buf.write_u8(mode_tag(mode)).unwrap();

    let cfg_json = serde_json::to_vec(config)?;
    buf.write_u32::<LittleEndian>(cfg_json.len() as u32).unwrap();
    buf.write_all(&cfg_json).unwrap();

    let mut names = store.names();
    names.sort();
    buf.write_u32::<LittleEndian>(names.len() as u32).unwrap();
    for name in &names {
        let p = store.get(name).unwrap();
        let value = p.get();
        buf.write_u32::<LittleEndian>(name.len() as u32).unwrap();
        buf.write_all(name.as_bytes()).unwrap();
        buf.write_u32::<LittleEndian>(value.ndim() as u32).unwrap();
        for &d in value.shape() {
            buf.write_u64::<LittleEndian>(d as u64).unwrap();
        }
        for v in value.iter() {
            buf.write_f64::<LittleEndian>(v.to_f64().unwrap()).unwrap();
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reader wrapper tracking the byte offset so corruption errors can name it.
struct Tracked<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Tracked<R> {
    fn corrupt(&self, detail: impl Into<String>) -> Error {
        Error::CheckpointCorrupt { offset: self.offset, detail: detail.into() }
    }
}

impl<R: Read> Read for Tracked<R> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.offset += n as u64;
        Ok(n)
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Tracked { inner: std::io::BufReader::new(file), offset: 0 };

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| r.corrupt(format!("missing magic: {e}")))?;
    if &magic != MAGIC {
        return Err(r.corrupt("bad magic bytes (not a checkpoint file)"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(|e| r.corrupt(e.to_string()))?;
    if version != VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: VERSION });
    }
    let step = r.read_u64::<LittleEndian>().map_err(|e| r.corrupt(e.to_string()))?;
    let tag = r.read_u8().map_err(|e| r.corrupt(e.to_string()))?;
    let mode = tag_mode(tag).ok_or_else(|| r.corrupt(format!("unknown ablation tag {tag}")))?;

    let cfg_len = r.read_u32::<LittleEndian>().map_err(|e| r.corrupt(e.to_string()))? as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_bytes).map_err(|e| r.corrupt(format!("truncated config: {e}")))?;
    let config: ModelConfig =
        serde_json::from_slice(&cfg_bytes).map_err(|e| r.corrupt(format!("bad config JSON: {e}")))?;

    let n_params = r.read_u32::<LittleEndian>().map_err(|e| r.corrupt(e.to_string()))? as usize;
    let mut params = BTreeMap::new();
    for _ in 0..n_params {
        let name_len = r.read_u32::<LittleEndian>().map_err(|e| r.corrupt(e.to_string()))? as usize;
        if name_len > 4096 {
            return Err(r.corrupt(format!("implausible parameter name length {name_len}")));
        }
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(|e| r.corrupt(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name_bytes).map_err(|e| r.corrupt(e.to_string()))?;
        let ndim = r.read_u32::<LittleEndian>().map_err(|e| r.corrupt(e.to_string()))? as usize;
        if ndim > 8 {
            return Err(r.corrupt(format!("implausible rank {ndim} for {name}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.read_u64::<LittleEndian>().map_err(|e| r.corrupt(e.to_string()))? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(
                r.read_f64::<LittleEndian>()
                    .map_err(|e| r.corrupt(format!("truncated data for {name}: {e}")))?,
            );
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|e| r.corrupt(e.to_string()))?;
        params.insert(name, arr);
    }
    Ok(Checkpoint { step, mode, config, params })
}

/// Writes checkpoint parameters into a live store, verifying the config and
/// parameter sets agree first.
pub fn apply_checkpoint<F: Elem>(
    ckpt: &Checkpoint,
    store: &ParamStore<F>,
    config: &ModelConfig,
    mode: AblationMode,
) -> Result<()> {
    if &ckpt.config != config {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint config {:?} differs from model config {:?}",
            ckpt.config, config
        )));
    }
    if ckpt.mode != mode {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint ablation mode {} differs from model mode {}",
            ckpt.mode, mode
        )));
    }
    let live: std::collections::BTreeSet<String> = store.names().into_iter().collect();
    let stored: std::collections::BTreeSet<String> = ckpt.params.keys().cloned().collect();
    if live != stored {
        let only_live: Vec<_> = live.difference(&stored).take(3).cloned().collect();
        let only_ckpt: Vec<_> = stored.difference(&live).take(3).cloned().collect();
        return Err(Error::ConfigMismatch(format!(
            "parameter sets differ (model-only: {only_live:?}, checkpoint-only: {only_ckpt:?})"
        )));
    }
    for (name, value) in &ckpt.params {
        let p = store.get(name).unwrap();
        if p.shape() != value.shape() {
            return Err(Error::ConfigMismatch(format!(
                "shape of {name} differs: model {:?}, checkpoint {:?}",
                p.shape(),
                value.shape()
            )));
        }
        p.set(value.mapv(F::c));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;
    use ndarray::Array2;

    fn cfg() -> ModelConfig {
        ModelConfig {
            num_object_queries: 4,
            num_link_queries: 3,
            num_vitd_blocks: 2,
            num_heads: 2,
            fusion_downsample: 2,
            embed_dim: 8,
            backbone_channels: [4, 4, 8, 8],
            mask_dim: 8,
            ffn_mult: 2,
        }
    }

    #[test]
    fn round_trip_forward_pass_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let c = cfg();
        let mut store = ParamStore::<f32>::new();
        let model = Model::new(&mut store, 11, &c, AblationMode::Full).unwrap();
        let img = Array2::<f32>::from_shape_fn((32, 32), |(i, j)| ((i * 3 + j) % 7) as f32 / 7.0);
        let before = model.forward(&img, &img).unwrap();

        save_checkpoint(&store, &c, AblationMode::Full, 42, &path).unwrap();
        let ckpt = load_checkpoint(&path).unwrap();
        assert_eq!(ckpt.step, 42);
        assert_eq!(ckpt.mode, AblationMode::Full);
        assert_eq!(ckpt.config, c);

        // Fresh model with a different seed, then restore.
        let mut store2 = ParamStore::<f32>::new();
        let model2 = Model::new(&mut store2, 999, &c, AblationMode::Full).unwrap();
        apply_checkpoint(&ckpt, &store2, &c, AblationMode::Full).unwrap();
        let after = model2.forward(&img, &img).unwrap();
        assert_eq!(
            before.preds.last().unwrap().cc.masks.value(),
            after.preds.last().unwrap().cc.masks.value()
        );
        assert_eq!(
            before.link.as_ref().unwrap().pair_logits.value(),
            after.link.as_ref().unwrap().pair_logits.value()
        );
    }

    #[test]
    fn truncated_file_is_a_corruption_error_with_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let c = cfg();
        let mut store = ParamStore::<f32>::new();
        Model::new(&mut store, 1, &c, AblationMode::Full).unwrap();
        save_checkpoint(&store, &c, AblationMode::Full, 0, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = bytes.len() / 2;
        std::fs::write(&path, &bytes[..cut]).unwrap();
        match load_checkpoint(&path) {
            Err(Error::CheckpointCorrupt { offset, .. }) => assert!(offset <= cut as u64),
            other => panic!("expected corruption error, got {other:?}"),
        }
    }

    #[test]
    fn version_and_config_mismatches_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let c = cfg();
        let mut store = ParamStore::<f32>::new();
        Model::new(&mut store, 1, &c, AblationMode::Full).unwrap();
        save_checkpoint(&store, &c, AblationMode::Full, 0, &path).unwrap();

        // Bump the version field in place (bytes 8..12).
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 9;
        std::fs::write(&path, &bytes).unwrap();
        match load_checkpoint(&path) {
            Err(Error::CheckpointVersion { found, expected }) => {
                assert_eq!(found, 9);
                assert_eq!(expected, VERSION);
            }
            other => panic!("expected version error, got {other:?}"),
        }

        // num_heads mismatch on apply.
        save_checkpoint(&store, &c, AblationMode::Full, 0, &path).unwrap();
        let ckpt = load_checkpoint(&path).unwrap();
        let mut c2 = c.clone();
        c2.num_heads = 4;
        let mut store2 = ParamStore::<f32>::new();
        Model::new(&mut store2, 1, &c2, AblationMode::Full).unwrap();
        assert!(matches!(
            apply_checkpoint(&ckpt, &store2, &c2, AblationMode::Full),
            Err(Error::ConfigMismatch(_))
        ));
    }

    #[test]
    fn not_a_checkpoint_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"these are not the bytes you are looking for").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::CheckpointCorrupt { .. })));
    }
}
