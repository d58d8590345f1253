//! Checkpoint file (magic "STQK"): the full model — per-layer named tensors
//! in a raw f64 payload, everything else (layer kinds, quantizer params,
//! seeds, the pipeline stage tag) in the JSON header. The same container
//! framing as the calibration file.

use crate::backbone::{FpLayer, ModelLayer, QuantModel};
use crate::container::{write_container, ContainerReader};
use crate::error::{Error, Result};
use crate::qlayer::{LayerKind, QLayer};
use crate::quant::QuantParams;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"STQK";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerHeader {
    quantized: bool,
    kind: LayerKind,
    rank: usize,
    hadamard_seed: u64,
    rotate: bool,
    wq: Option<QuantParams>,
    aq: Option<QuantParams>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    kind: String,
    dtype: String,
    stage: String,
    silu_after: Vec<bool>,
    layers: Vec<LayerHeader>,
    count: usize,
    extra: serde_json::Value,
}

fn push_tensor(
    entries: &mut Vec<TensorEntry>,
    payload: &mut Vec<f64>,
    name: &str,
    t: &Tensor,
) {
    entries.push(TensorEntry {
        name: name.to_string(),
        shape: t.shape().to_vec(),
        offset: payload.len(),
    });
    payload.extend_from_slice(t.data());
}

/// Write the model and its stage tag; `extra` is free-form pipeline metadata
/// (config echo, stage log) carried verbatim.
pub fn save_checkpoint(
    path: &Path,
    model: &QuantModel,
    stage: &str,
    extra: &serde_json::Value,
) -> Result<()> {
    let mut payload: Vec<f64> = Vec::new();
    let mut layers = Vec::new();
    for layer in &model.layers {
        let mut tensors = Vec::new();
        let header = match layer {
            ModelLayer::Fp(l) => {
                push_tensor(&mut tensors, &mut payload, "weight", &l.weight);
                if let Some(b) = &l.bias {
                    push_tensor(&mut tensors, &mut payload, "bias", b);
                }
                LayerHeader {
                    quantized: false,
                    kind: l.kind,
                    rank: 0,
                    hadamard_seed: 0,
                    rotate: false,
                    wq: None,
                    aq: None,
                    tensors,
                }
            }
            ModelLayer::Quant(l) => {
                push_tensor(&mut tensors, &mut payload, "weight", &l.weight);
                if let Some(b) = &l.bias {
                    push_tensor(&mut tensors, &mut payload, "bias", b);
                }
                if let Some(t) = &l.l1 {
                    push_tensor(&mut tensors, &mut payload, "l1", t);
                }
                if let Some(t) = &l.l2 {
                    push_tensor(&mut tensors, &mut payload, "l2", t);
                }
                push_tensor(&mut tensors, &mut payload, "a_bias", &l.a_bias);
                LayerHeader {
                    quantized: true,
                    kind: l.kind,
                    rank: l.rank,
                    hadamard_seed: l.hadamard_seed,
                    rotate: l.rotate,
                    wq: l.wq.clone(),
                    aq: l.aq.clone(),
                    tensors,
                }
            }
        };
        layers.push(header);
    }
    let header = CheckpointHeader {
        kind: "checkpoint".to_string(),
        dtype: "f64".to_string(),
        stage: stage.to_string(),
        silu_after: model.silu_after.clone(),
        layers,
        count: payload.len(),
        extra: extra.clone(),
    };
    let header = serde_json::to_value(&header).map_err(Error::format)?;
    write_container(path, MAGIC, &header, &payload)
}

fn take_tensor(
    entries: &[TensorEntry],
    payload: &[f64],
    name: &str,
) -> Result<Option<Tensor>> {
    let Some(e) = entries.iter().find(|e| e.name == name) else {
        return Ok(None);
    };
    let len: usize = e.shape.iter().product();
    if e.offset + len > payload.len() {
        return Err(Error::format(format!(
            "tensor {} extends past payload end",
            name
        )));
    }
    Ok(Some(Tensor::new(
        e.shape.clone(),
        payload[e.offset..e.offset + len].to_vec(),
    )?))
}

fn require_tensor(entries: &[TensorEntry], payload: &[f64], name: &str) -> Result<Tensor> {
    take_tensor(entries, payload, name)?
        .ok_or_else(|| Error::format(format!("checkpoint layer missing tensor {}", name)))
}

/// Read a checkpoint back; returns the model, its stage tag, and the
/// free-form metadata stored alongside.
pub fn load_checkpoint(path: &Path) -> Result<(QuantModel, String, serde_json::Value)> {
    let reader = ContainerReader::open(path, MAGIC)?;
    let header: CheckpointHeader = serde_json::from_value(reader.header().clone())
        .map_err(|e| Error::format(format!("malformed checkpoint header: {}", e)))?;
    if header.kind != "checkpoint" || header.dtype != "f64" {
        return Err(Error::format(format!(
            "unexpected checkpoint header kind {} / dtype {}",
            header.kind, header.dtype
        )));
    }
    if header.silu_after.len() != header.layers.len() {
        return Err(Error::format(
            "silu_after length does not match layer count",
        ));
    }
    let payload = reader.payload(header.count)?;
    let mut layers = Vec::new();
    for lh in &header.layers {
        let weight = require_tensor(&lh.tensors, &payload, "weight")?;
        let bias = take_tensor(&lh.tensors, &payload, "bias")?;
        if lh.quantized {
            let layer = QLayer {
                kind: lh.kind,
                weight,
                bias,
                rank: lh.rank,
                l1: take_tensor(&lh.tensors, &payload, "l1")?,
                l2: take_tensor(&lh.tensors, &payload, "l2")?,
                hadamard_seed: lh.hadamard_seed,
                rotate: lh.rotate,
                wq: lh.wq.clone(),
                aq: lh.aq.clone(),
                a_bias: require_tensor(&lh.tensors, &payload, "a_bias")?,
            };
            if layer.rank > 0 && (layer.l1.is_none() || layer.l2.is_none()) {
                return Err(Error::format(
                    "checkpoint declares a nonzero rank without low-rank factors",
                ));
            }
            layers.push(ModelLayer::Quant(layer));
        } else {
            layers.push(ModelLayer::Fp(FpLayer {
                kind: lh.kind,
                weight,
                bias,
            }));
        }
    }
    let model = QuantModel {
        layers,
        silu_after: header.silu_after,
    };
    Ok((model, header.stage, header.extra))
}

/// Stage tag stored in a checkpoint, without deserializing the tensors.
pub fn peek_stage(path: &Path) -> Result<String> {
    let reader = ContainerReader::open(path, MAGIC)?;
    reader
        .header()
        .get("stage")
        .and_then(|v| v.as_str())
        .map(|s| s.to_string())
        .ok_or_else(|| Error::format("checkpoint header has no stage tag"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qlayer::ForwardMode;
    use crate::stca::tests_helpers::prep;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("stq-checkpoint-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    fn bits_of(t: &Tensor) -> Vec<u64> {
        t.data().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let (model, calib) = prep(400, 4, 8, 2);
        let path = tmp("rt.stqk");
        let extra = serde_json::json!({"note": "unit"});
        save_checkpoint(&path, &model, "refine", &extra).unwrap();
        let (loaded, stage, got_extra) = load_checkpoint(&path).unwrap();
        assert_eq!(stage, "refine");
        assert_eq!(got_extra, extra);
        assert_eq!(loaded.silu_after, model.silu_after);
        assert_eq!(loaded.layers.len(), model.layers.len());
        for (a, b) in loaded.layers.iter().zip(&model.layers) {
            match (a, b) {
                (ModelLayer::Quant(x), ModelLayer::Quant(y)) => {
                    assert_eq!(x.kind, y.kind);
                    assert_eq!(x.rank, y.rank);
                    assert_eq!(x.hadamard_seed, y.hadamard_seed);
                    assert_eq!(x.rotate, y.rotate);
                    assert_eq!(x.wq, y.wq);
                    assert_eq!(x.aq, y.aq);
                    assert_eq!(bits_of(&x.weight), bits_of(&y.weight));
                    assert_eq!(bits_of(&x.a_bias), bits_of(&y.a_bias));
                    assert_eq!(
                        x.l1.as_ref().map(bits_of),
                        y.l1.as_ref().map(bits_of)
                    );
                    assert_eq!(
                        x.l2.as_ref().map(bits_of),
                        y.l2.as_ref().map(bits_of)
                    );
                    assert_eq!(
                        x.bias.as_ref().map(bits_of),
                        y.bias.as_ref().map(bits_of)
                    );
                }
                (ModelLayer::Fp(x), ModelLayer::Fp(y)) => {
                    assert_eq!(x.kind, y.kind);
                    assert_eq!(bits_of(&x.weight), bits_of(&y.weight));
                }
                _ => panic!("layer kind mismatch after reload"),
            }
        }
        // same forward output, bit for bit
        let x = &calib.pairs[0].input;
        let y0 = model.forward(x, ForwardMode::FakeQuant).unwrap();
        let y1 = loaded.forward(x, ForwardMode::FakeQuant).unwrap();
        assert_eq!(bits_of(&y0), bits_of(&y1));
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let (model, _) = prep(401, 4, 8, 1);
        let path = tmp("magic.stqk");
        save_checkpoint(&path, &model, "allocate-ranks", &serde_json::Value::Null).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{}", err);
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let (model, _) = prep(402, 4, 8, 1);
        let path = tmp("crc.stqk");
        save_checkpoint(&path, &model, "train-lba", &serde_json::Value::Null).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() - 100;
        bytes[mid] ^= 0xff;
        std::fs::write(&path, bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{}", err);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let (model, _) = prep(403, 4, 8, 1);
        let path = tmp("trunc.stqk");
        save_checkpoint(&path, &model, "refine", &serde_json::Value::Null).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 32]).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{}", err);
    }

    #[test]
    fn peek_stage_reads_tag() {
        let (model, _) = prep(404, 4, 8, 1);
        let path = tmp("peek.stqk");
        save_checkpoint(&path, &model, "allocate-ranks", &serde_json::Value::Null).unwrap();
        assert_eq!(peek_stage(&path).unwrap(), "allocate-ranks");
    }
}
