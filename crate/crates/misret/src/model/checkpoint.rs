//! Checkpoint format: a single-line JSON header (version, config, vocab,
//! tensor table) followed by raw little-endian f32 tensor data concatenated
//! in table order.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, PolicyModel};
use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    rows: usize,
    cols: usize,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    cfg: ModelConfig,
    vocab: Option<String>,
    /// Free-form label recorded by training (variant name etc.).
    tag: String,
    tensors: Vec<TensorMeta>,
}

/// A checkpoint read back into memory.
pub struct Checkpoint {
    pub cfg: ModelConfig,
    pub vocab: Option<Vec<char>>,
    pub tag: String,
    pub tensors: Vec<(String, Array2<f64>)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Array2<f64>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn tensors_with_prefix<'a>(
        &'a self,
        prefixes: &'a [&'a str],
    ) -> impl Iterator<Item = (&'a str, &'a Array2<f64>)> + 'a {
        self.tensors
            .iter()
            .filter(move |(n, _)| prefixes.iter().any(|p| n.starts_with(p)))
            .map(|(n, t)| (n.as_str(), t))
    }
}

pub fn save_model_tagged(model: &PolicyModel, path: &Path, tag: &str) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    let mut tensors = Vec::with_capacity(model.params.len());
    let mut offset = 0u64;
    for (_, e) in model.params.iter() {
        tensors.push(TensorMeta {
            name: e.name.clone(),
            rows: e.value.nrows(),
            cols: e.value.ncols(),
            offset,
        });
        offset += (e.value.len() * 4) as u64;
    }
    let header = Header {
        version: CHECKPOINT_VERSION,
        cfg: model.cfg.clone(),
        vocab: model.vocab.as_ref().map(|v| v.iter().collect()),
        tag: tag.to_string(),
        tensors,
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for (_, e) in model.params.iter() {
        for &v in e.value.iter() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_model(model: &PolicyModel, path: &Path) -> Result<()> {
    save_model_tagged(model, path, "")
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let mut header_bytes = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let n = r.read(&mut byte)?;
        if n == 0 {
            return Err(Error::Parse {
                record: 0,
                message: "unterminated checkpoint header".into(),
            });
        }
        if byte[0] == b'\n' {
            break;
        }
        header_bytes.push(byte[0]);
    }
    let header: Header = serde_json::from_slice(&header_bytes).map_err(|e| Error::Parse {
        record: 0,
        message: format!("corrupted header: {e}"),
    })?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: header.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        let n = t.rows * t.cols;
        let start = t.offset as usize;
        let end = start + 4 * n;
        if end > data.len() {
            return Err(Error::Parse {
                record: 0,
                message: format!("tensor {} data truncated", t.name),
            });
        }
        let mut arr = Array2::zeros((t.rows, t.cols));
        for (i, chunk) in data[start..end].chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("checkpoint tensor {}", t.name),
                });
            }
            arr[(i / t.cols, i % t.cols)] = v as f64;
        }
        tensors.push((t.name.clone(), arr));
    }
    Ok(Checkpoint {
        cfg: header.cfg,
        vocab: header.vocab.map(|s| s.chars().collect()),
        tag: header.tag,
        tensors,
    })
}

/// Rebuild a model from a checkpoint, verifying the tensor set against the
/// configuration.
pub fn load_model(path: &Path) -> Result<PolicyModel> {
    let ck = load_checkpoint(path)?;
    ck.cfg.validate()?;
    let with_lora = ck.tensors.iter().any(|(n, _)| super::is_lora_adapter(n));
    let expected = PolicyModel::expected_shapes(&ck.cfg, with_lora);
    let mut mismatched = Vec::new();
    for (name, shape) in &expected {
        match ck.tensors.iter().find(|(n, _)| n == name) {
            None => {
                return Err(Error::MissingTensor {
                    name: name.clone(),
                })
            }
            Some((_, t)) => {
                if t.dim() != *shape {
                    mismatched.push(format!(
                        "{name} (checkpoint {:?}, expected {:?})",
                        t.dim(),
                        shape
                    ));
                }
            }
        }
    }
    if !mismatched.is_empty() {
        return Err(Error::DimMismatch { names: mismatched });
    }
    for (name, _) in &ck.tensors {
        if !expected.iter().any(|(n, _)| n == name) {
            return Err(Error::Parse {
                record: 0,
                message: format!("unexpected tensor {name}"),
            });
        }
    }
    let mut params = ParamStore::new();
    for (name, t) in &ck.tensors {
        params.add(name, t.clone(), true);
    }
    let mut model = PolicyModel {
        cfg: ck.cfg,
        params,
        vocab: ck.vocab,
        lora_attached: with_lora,
        forward_count: Default::default(),
    };
    model.apply_freeze();
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward::tests::tiny_cfg;

    #[test]
    fn roundtrip_preserves_parameters() {
        let m = PolicyModel::init(tiny_cfg(), None, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("m1.ckpt");
        let p2 = dir.path().join("m2.ckpt");
        save_model(&m, &p1).unwrap();
        let m1 = load_model(&p1).unwrap();
        save_model(&m1, &p2).unwrap();
        let m2 = load_model(&p2).unwrap();
        assert_eq!(m1.params.checksum(), m2.params.checksum());
        // After one f32 quantization, further round trips are bitwise fixed.
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn prior_backbone_copied_exactly() {
        let mut cfg = tiny_cfg();
        cfg.lm_vocab = 7;
        let prior_model = PolicyModel::init(cfg.clone(), None, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("prior.ckpt");
        save_model(&prior_model, &p).unwrap();
        let ck = load_checkpoint(&p).unwrap();
        let fresh = PolicyModel::init(cfg, Some(&ck), 99).unwrap();
        for (name, tensor) in ck.tensors_with_prefix(&["backbone.", "lm."]) {
            let id = fresh.params.id_of(name).unwrap();
            assert_eq!(fresh.params.get(id), tensor, "{name}");
        }
        // Heads and embeddings are freshly drawn, not copied.
        let head = fresh.params.id_of("head.bin.w").unwrap();
        assert_ne!(
            fresh.params.get(head),
            prior_model
                .params
                .get(prior_model.params.id_of("head.bin.w").unwrap())
        );
    }

    #[test]
    fn dim_mismatch_names_tensors() {
        let mut cfg = tiny_cfg();
        let prior_model = PolicyModel::init(cfg.clone(), None, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("prior.ckpt");
        save_model(&prior_model, &p).unwrap();
        let ck = load_checkpoint(&p).unwrap();
        cfg.d_model = 32;
        cfg.d_ff = 64;
        match PolicyModel::init(cfg, Some(&ck), 1) {
            Err(Error::DimMismatch { names }) => {
                assert!(names.iter().any(|n| n.contains("backbone.l0.attn.wq")));
            }
            other => panic!("expected dim mismatch, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn missing_tensor_named_on_load() {
        let m = PolicyModel::init(tiny_cfg(), None, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_model(&m, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let split = bytes.iter().position(|&b| b == b'\n').unwrap();
        let mut header: serde_json::Value = serde_json::from_slice(&bytes[..split]).unwrap();
        let tensors = header["tensors"].as_array_mut().unwrap();
        let dropped = tensors.pop().unwrap();
        let name = dropped["name"].as_str().unwrap().to_string();
        let offset = dropped["offset"].as_u64().unwrap() as usize;
        let mut out = serde_json::to_vec(&header).unwrap();
        out.push(b'\n');
        out.extend_from_slice(&bytes[split + 1..split + 1 + offset]);
        std::fs::write(&p, out).unwrap();
        match load_model(&p) {
            Err(Error::MissingTensor { name: n }) => assert_eq!(n, name),
            other => panic!("expected missing tensor, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn version_mismatch_refused() {
        let m = PolicyModel::init(tiny_cfg(), None, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_model(&m, &p).unwrap();
        let content = std::fs::read(&p).unwrap();
        let split = content.iter().position(|&b| b == b'\n').unwrap();
        let header = String::from_utf8(content[..split].to_vec()).unwrap();
        let bumped = header.replacen("\"version\":1", "\"version\":99", 1);
        let mut out = bumped.into_bytes();
        out.push(b'\n');
        out.extend_from_slice(&content[split + 1..]);
        std::fs::write(&p, out).unwrap();
        assert!(matches!(
            load_model(&p),
            Err(Error::VersionMismatch { found: 99, .. })
        ));
    }

    #[test]
    fn corrupted_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ckpt");
        std::fs::write(&p, b"{not json\nxxxx").unwrap();
        assert!(matches!(load_model(&p), Err(Error::Parse { .. })));
    }
}
