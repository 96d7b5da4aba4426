//! Checkpoint container.
//!
//! Layout:
//!
//! ```text
//! DOCVQA-CKPT\n
//! <header byte length, decimal>\n
//! <JSON header: version, configs, tensor table (name, shape, byte offset)>
//! <raw little-endian f64 tensor data>
//! ```
//!
//! Model tensors live under `model.`, scorer tensors under `scorer.`; a
//! stage-1 checkpoint simply has no scorer section. Values are stored as
//! f64, so a save/load/save cycle of an f64 model is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, VqaModel, MODEL_NAMESPACE};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::scorer::{PageScorer, ScorerConfig, SCORER_NAMESPACE};
use crate::tensor::Matrix;

const MAGIC: &str = "DOCVQA-CKPT\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    /// Byte offset from the start of the data section.
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: String,
    model: ModelConfig,
    scorer: Option<ScorerConfig>,
    tensors: Vec<TensorEntry>,
}

/// Artifacts restored from a checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub model: VqaModel<T>,
    pub scorer: Option<PageScorer<T>>,
}

fn err(entry: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        entry: entry.into(),
        message: message.into(),
    }
}

/// Serializes the model and, for stage-2 artifacts, the scorer.
pub fn checkpoint_bytes<T: Scalar>(model: &VqaModel<T>, scorer: Option<&PageScorer<T>>) -> Vec<u8> {
    let sets: Vec<&ParamSet<T>> = std::iter::once(model.params()).chain(scorer.map(|s| s.params())).collect();
    let mut tensors = Vec::new();
    let mut offset = 0;
    for set in &sets {
        for (name, m) in set.iter() {
            tensors.push(TensorEntry {
                name: name.to_string(),
                rows: m.rows(),
                cols: m.cols(),
                offset,
            });
            offset += m.len() * 8;
        }
    }
    let header = Header {
        version: FORMAT_VERSION,
        dtype: "f64-le".into(),
        model: model.config().clone(),
        scorer: scorer.map(|s| s.config().clone()),
        tensors,
    };
    let json = serde_json::to_string(&header).expect("header serializes");
    let mut out = Vec::with_capacity(MAGIC.len() + 24 + json.len() + offset);
    out.extend_from_slice(MAGIC.as_bytes());
    out.extend_from_slice(format!("{}\n", json.len()).as_bytes());
    out.extend_from_slice(json.as_bytes());
    for set in &sets {
        for m in set.values() {
            for v in m.data() {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
    }
    out
}

pub fn save_checkpoint<T: Scalar>(model: &VqaModel<T>, scorer: Option<&PageScorer<T>>, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_bytes(model, scorer)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes)
}

fn sections(bytes: &[u8]) -> Result<(Header, &[u8])> {
    let rest = bytes
        .strip_prefix(MAGIC.as_bytes())
        .ok_or_else(|| err("magic", "not a checkpoint file"))?;
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| err("header", "missing header length"))?;
    let header_len: usize = std::str::from_utf8(&rest[..nl])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| err("header", "unreadable header length"))?;
    let rest = &rest[nl + 1..];
    if rest.len() < header_len {
        return Err(err("header", "file truncated inside the header"));
    }
    let header: Header =
        serde_json::from_slice(&rest[..header_len]).map_err(|e| err("header", format!("malformed header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(err("version", format!("unsupported version {} (expected {FORMAT_VERSION})", header.version)));
    }
    if header.dtype != "f64-le" {
        return Err(err("dtype", format!("unsupported dtype {}", header.dtype)));
    }
    let data = &rest[header_len..];
    for t in &header.tensors {
        let end = t
            .rows
            .checked_mul(t.cols * 8)
            .and_then(|l| t.offset.checked_add(l))
            .ok_or_else(|| err(&t.name, "offset overflow"))?;
        if end > data.len() {
            return Err(err(&t.name, format!("data truncated: need {end} bytes, file has {}", data.len())));
        }
    }
    Ok((header, data))
}

/// Raw stored bytes of every tensor, by name, in file order.
pub fn tensor_bytes(bytes: &[u8]) -> Result<Vec<(String, Vec<u8>)>> {
    let (header, data) = sections(bytes)?;
    Ok(header
        .tensors
        .iter()
        .map(|t| (t.name.clone(), data[t.offset..t.offset + t.rows * t.cols * 8].to_vec()))
        .collect())
}

pub fn parse_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let (header, data) = sections(bytes)?;
    let mut model_params = ParamSet::new();
    let mut scorer_params = ParamSet::new();
    let mut expected_end = 0;
    for t in &header.tensors {
        let end = t.offset + t.rows * t.cols * 8;
        let values = data[t.offset..end]
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
            .collect();
        let m = Matrix::from_vec(t.rows, t.cols, values);
        let (ns, _) = t.name.split_once('.').unwrap_or((t.name.as_str(), ""));
        match ns {
            n if n == MODEL_NAMESPACE => model_params.insert(t.name.clone(), m),
            n if n == SCORER_NAMESPACE && header.scorer.is_some() => scorer_params.insert(t.name.clone(), m),
            _ => return Err(err(&t.name, "tensor outside the known namespaces")),
        };
        expected_end = expected_end.max(end);
    }
    if data.len() != expected_end {
        return Err(err("data", format!("{} trailing bytes after the last tensor", data.len() - expected_end)));
    }
    let model = VqaModel::from_params(header.model, model_params)?;
    let scorer = header
        .scorer
        .map(|cfg| PageScorer::from_params(cfg, model.config().d_model, scorer_params))
        .transpose()?;
    Ok(Checkpoint { model, scorer })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (VqaModel<f64>, PageScorer<f64>) {
        let model = VqaModel::new(ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ff: 16,
            max_patches: 16,
            max_answer_len: 4,
            ..ModelConfig::default()
        })
        .unwrap();
        let scorer = PageScorer::new(
            ScorerConfig {
                n_heads: 2,
                ..ScorerConfig::for_width(8)
            },
            8,
        )
        .unwrap();
        (model, scorer)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (model, scorer) = tiny();
        let bytes = checkpoint_bytes(&model, Some(&scorer));
        let back: Checkpoint<f64> = parse_checkpoint(&bytes).unwrap();
        assert_eq!(back.model.params(), model.params());
        assert_eq!(back.scorer.as_ref().unwrap().params(), scorer.params());
        assert_eq!(checkpoint_bytes(&back.model, back.scorer.as_ref()), bytes);
    }

    #[test]
    fn stage1_checkpoint_has_no_scorer() {
        let (model, _) = tiny();
        let back: Checkpoint<f64> = parse_checkpoint(&checkpoint_bytes(&model, None)).unwrap();
        assert!(back.scorer.is_none());
        assert_eq!(back.model.config(), model.config());
    }

    #[test]
    fn truncation_names_the_entry() {
        let (model, scorer) = tiny();
        let bytes = checkpoint_bytes(&model, Some(&scorer));
        match parse_checkpoint::<f64>(&bytes[..bytes.len() - 3]) {
            Err(Error::Checkpoint { entry, .. }) => assert!(entry.starts_with("scorer."), "{entry}"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse_checkpoint::<f64>(&bytes[..20]), Err(Error::Checkpoint { .. })));
        assert!(matches!(parse_checkpoint::<f64>(b"junk"), Err(Error::Checkpoint { .. })));
    }

    /// Overwrites the first occurrence of `from` with the equally long `to`.
    fn patch(bytes: &[u8], from: &str, to: &str) -> Vec<u8> {
        assert_eq!(from.len(), to.len());
        let at = bytes.windows(from.len()).position(|w| w == from.as_bytes()).unwrap();
        let mut out = bytes.to_vec();
        out[at..at + to.len()].copy_from_slice(to.as_bytes());
        out
    }

    #[test]
    fn shape_mismatch_names_the_entry() {
        let (model, _) = tiny();
        let bytes = checkpoint_bytes(&model, None);
        // the header now claims a wider feed-forward than the stored tensors
        match parse_checkpoint::<f64>(&patch(&bytes, "\"d_ff\":16", "\"d_ff\":17")) {
            Err(Error::Checkpoint { entry, message }) => {
                assert!(entry.contains("ff.up"), "{entry}: {message}")
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let (model, _) = tiny();
        let bytes = checkpoint_bytes(&model, None);
        match parse_checkpoint::<f64>(&patch(&bytes, "\"version\":1", "\"version\":9")) {
            Err(Error::Checkpoint { entry, .. }) => assert_eq!(entry, "version"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn f32_models_store_and_restore() {
        let model: VqaModel<f32> = VqaModel::new(tiny().0.config().clone()).unwrap();
        let back: Checkpoint<f32> = parse_checkpoint(&checkpoint_bytes(&model, None)).unwrap();
        assert_eq!(back.model.params(), model.params());
    }
}
