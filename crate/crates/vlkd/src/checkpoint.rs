//! Binary checkpoints.
//!
//! Layout: the magic `VLKDCKPT`, a little-endian `u32` format version, a
//! little-endian `u64` header length, a JSON header, then every tensor as raw
//! little-endian `f64` in header order. Values are stored bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vlkd_core::autodiff::Tensor;
use vlkd_core::losses::FeatureProjector;
use vlkd_core::model::{LmParams, ModelSpec, TransformerLM, VisualEncoder};
use vlkd_core::train::{AdamState, RunLog, TrainState};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"VLKDCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    spec: ModelSpec,
    tensors: Vec<Entry>,
    #[serde(default)]
    training: Option<Training>,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Training {
    step: usize,
    adam_t: u64,
    projectors: usize,
    log: RunLog,
}

/// A decoded checkpoint: always a model, optionally the optimizer state of
/// an unfinished run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: TransformerLM,
    pub state: Option<TrainState>,
    pub meta: BTreeMap<String, String>,
}

fn model_tensors(m: &TransformerLM) -> Vec<(String, &Tensor)> {
    let mut out = vec![
        ("encoder.weight".to_string(), &m.encoder.weight),
        ("encoder.bias".to_string(), &m.encoder.bias),
    ];
    out.extend(m.params.entries());
    out
}

fn encode(spec: ModelSpec, tensors: Vec<(String, &Tensor)>, training: Option<Training>, meta: &BTreeMap<String, String>) -> Vec<u8> {
    let header = Header {
        spec,
        tensors: tensors
            .iter()
            .map(|(n, t)| Entry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        training,
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let total: usize = tensors.iter().map(|(_, t)| t.len()).sum();
    let mut out = Vec::with_capacity(20 + json.len() + 8 * total);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &tensors {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

/// Serializes a finished model.
pub fn model_to_bytes(model: &TransformerLM, meta: &BTreeMap<String, String>) -> Vec<u8> {
    encode(model.spec, model_tensors(model), None, meta)
}

/// Serializes a run in progress, including optimizer moments and the log.
pub fn state_to_bytes(state: &TrainState, meta: &BTreeMap<String, String>) -> Vec<u8> {
    let mut owned: Vec<(String, Tensor)> = Vec::new();
    for (k, p) in state.projectors.iter().enumerate() {
        for (n, t) in ["w1", "b1", "w2", "b2"].iter().zip(p.tensors()) {
            owned.push((format!("feature_projector.{k}.{n}"), t.clone()));
        }
    }
    for (kind, moments) in [("m", &state.adam.m), ("v", &state.adam.v)] {
        for (i, x) in moments.iter().enumerate() {
            let t = Tensor::new(vec![x.len()], x.clone()).expect("1-d");
            owned.push((format!("adam.{kind}.{i}"), t));
        }
    }
    let mut tensors = model_tensors(&state.model);
    tensors.extend(owned.iter().map(|(n, t)| (n.clone(), t)));
    let training = Training {
        step: state.step,
        adam_t: state.adam.t,
        projectors: state.projectors.len(),
        log: state.log.clone(),
    };
    encode(state.model.spec, tensors, Some(training), meta)
}

fn take<'a>(it: &mut impl Iterator<Item = (&'a Entry, Tensor)>, want: &str, path: &Path) -> Result<Tensor> {
    match it.next() {
        Some((e, t)) if e.name == want => Ok(t),
        Some((e, _)) => Err(Error::format(path, format!("expected tensor {want}, found {}", e.name))),
        None => Err(Error::format(path, format!("missing tensor {want}"))),
    }
}

/// Parses bytes produced by [`model_to_bytes`] or [`state_to_bytes`].
/// `path` only labels errors.
pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::format(path, "not a checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < hlen {
        return Err(Error::format(path, "truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| Error::format(path, e))?;
    header.spec.validate()?;
    let mut payload = &body[hlen..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        if payload.len() < 8 * n {
            return Err(Error::format(path, format!("truncated tensor {}", e.name)));
        }
        let data = payload[..8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        payload = &payload[8 * n..];
        tensors.push((e, Tensor::new(e.shape.clone(), data)?));
    }
    if !payload.is_empty() {
        return Err(Error::format(path, "trailing bytes"));
    }

    let spec = header.spec;
    let n_params = LmParams::<()>::from_values(spec.num_layers, vec![(); 7 + 16 * spec.num_layers])
        .expect("layout")
        .entries()
        .into_iter()
        .map(|(n, _)| n)
        .collect::<Vec<_>>();
    let mut it = tensors.into_iter();
    let weight = take(&mut it, "encoder.weight", path)?;
    let bias = take(&mut it, "encoder.bias", path)?;
    let encoder = VisualEncoder {
        spec: spec.visual,
        weight,
        bias,
    };
    let mut values = Vec::with_capacity(n_params.len());
    for name in &n_params {
        values.push(take(&mut it, name, path)?);
    }
    let params = LmParams::from_values(spec.num_layers, values).ok_or_else(|| Error::format(path, "bad parameter layout"))?;
    let model = TransformerLM { spec, encoder, params };
    check_shapes(&model, path)?;

    let state = match header.training {
        None => None,
        Some(tr) => {
            let mut projectors = Vec::with_capacity(tr.projectors);
            for k in 0..tr.projectors {
                projectors.push(FeatureProjector {
                    w1: take(&mut it, &format!("feature_projector.{k}.w1"), path)?,
                    b1: take(&mut it, &format!("feature_projector.{k}.b1"), path)?,
                    w2: take(&mut it, &format!("feature_projector.{k}.w2"), path)?,
                    b2: take(&mut it, &format!("feature_projector.{k}.b2"), path)?,
                });
            }
            let rest: Vec<(&Entry, Tensor)> = it.by_ref().collect();
            if !rest.len().is_multiple_of(2) {
                return Err(Error::format(path, "unpaired optimizer moments"));
            }
            let half = rest.len() / 2;
            let mut m = Vec::with_capacity(half);
            let mut v = Vec::with_capacity(half);
            for (i, (e, t)) in rest.into_iter().enumerate() {
                let (kind, j, dst) = if i < half { ("m", i, &mut m) } else { ("v", i - half, &mut v) };
                if e.name != format!("adam.{kind}.{j}") {
                    return Err(Error::format(path, format!("unexpected tensor {}", e.name)));
                }
                dst.push(t.into_data());
            }
            Some(TrainState {
                model: model.clone(),
                projectors,
                adam: AdamState { t: tr.adam_t, m, v },
                step: tr.step,
                log: tr.log,
            })
        }
    };
    if it.next().is_some() {
        return Err(Error::format(path, "unexpected tensors after the model"));
    }
    Ok(Checkpoint {
        model,
        state,
        meta: header.meta,
    })
}

fn check_shapes(model: &TransformerLM, path: &Path) -> Result<()> {
    let fresh = TransformerLM::new(model.spec, VisualEncoder::new(model.spec.visual, 0)?, 0)?;
    for ((name, a), (_, b)) in model_tensors(model).into_iter().zip(model_tensors(&fresh)) {
        if a.shape() != b.shape() {
            return Err(Error::format(path, format!("tensor {name} has shape {:?}, expected {:?}", a.shape(), b.shape())));
        }
    }
    Ok(())
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_model(path: &Path, model: &TransformerLM, meta: &BTreeMap<String, String>) -> Result<()> {
    write(path, &model_to_bytes(model, meta))
}

pub fn save_state(path: &Path, state: &TrainState, meta: &BTreeMap<String, String>) -> Result<()> {
    write(path, &state_to_bytes(state, meta))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

pub fn load_model(path: &Path) -> Result<TransformerLM> {
    Ok(load(path)?.model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use vlkd_core::model::ModelSpec;

    fn tiny() -> TransformerLM {
        let spec = ModelSpec::student();
        TransformerLM::new(spec, VisualEncoder::new(spec.visual, 3).unwrap(), 4).unwrap()
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        let m = tiny();
        let mut meta = BTreeMap::new();
        meta.insert("kind".into(), "test".into());
        let bytes = model_to_bytes(&m, &meta);
        let back = from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.model, m);
        assert_eq!(back.meta, meta);
        assert!(back.state.is_none());
        assert_eq!(model_to_bytes(&back.model, &meta), bytes);
    }

    #[test]
    fn rejects_garbage() {
        let m = tiny();
        let mut bytes = model_to_bytes(&m, &BTreeMap::new());
        assert!(from_bytes(b"nope", Path::new("x")).is_err());
        bytes.push(0);
        let e = from_bytes(&bytes, Path::new("x")).unwrap_err();
        assert_eq!(e.class(), "FormatError");
        bytes.truncate(bytes.len() - 9);
        assert!(from_bytes(&bytes, Path::new("x")).is_err());
        let mut v = model_to_bytes(&m, &BTreeMap::new());
        v[8] = 9;
        assert!(from_bytes(&v, Path::new("x")).is_err());
    }

    #[test]
    fn special_values_survive() {
        let mut m = tiny();
        m.params.head_bias.data_mut()[0] = -0.0;
        m.params.head_bias.data_mut()[1] = f64::MIN_POSITIVE / 3.0;
        m.params.head_bias.data_mut()[2] = 1.0 + f64::EPSILON;
        let back = from_bytes(&model_to_bytes(&m, &BTreeMap::new()), Path::new("m")).unwrap();
        let a: Vec<u64> = m.params.head_bias.data().iter().map(|x| x.to_bits()).collect();
        let b: Vec<u64> = back.model.params.head_bias.data().iter().map(|x| x.to_bits()).collect();
        assert_eq!(a, b);
    }
}
