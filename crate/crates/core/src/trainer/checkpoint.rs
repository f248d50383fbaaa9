//! Binary checkpoint container and the training-state round trip.
//!
//! File layout: magic "AOCR", format version u32 LE, tensor count u32 LE,
//! then per tensor: name length u16 LE, UTF-8 name, rank u8, dims u32 LE
//! each, f32 LE values row-major. Weights live under "w/", momentum buffers
//! under "v/", Polyak shadows under "p/"; model configuration and the step
//! counter ride along as reserved "__meta/" tensors, so one container format
//! covers everything and the round trip stays bit-exact.

use std::collections::BTreeMap;
use std::path::Path;

use crate::alphabet::Alphabet;
use crate::autodiff::Tensor;
use crate::cnn;
use crate::decoder::AttentionKind;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::ParamStore;

const MAGIC: &[u8; 4] = b"AOCR";
const VERSION: u32 = 1;

pub fn save_tensors(path: &Path, tensors: &BTreeMap<String, Tensor<f32>>) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(Error::invalid(format!("tensor name too long: {name:?}")));
        }
        buf.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(bytes);
        buf.push(t.dims.len() as u8);
        for d in &t.dims {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in &t.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_tensors(path: &Path) -> Result<BTreeMap<String, Tensor<f32>>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Checkpoint { path: path.to_path_buf(), msg };
    let mut pos = 0usize;
    let mut take = |n: usize, raw: &[u8]| -> Result<usize> {
        if pos + n > raw.len() {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                msg: "unexpected end of file".to_string(),
            });
        }
        pos += n;
        Ok(pos - n)
    };
    let at = take(4, &raw)?;
    if &raw[at..at + 4] != MAGIC {
        return Err(bad("bad magic".to_string()));
    }
    let at = take(4, &raw)?;
    let version = u32::from_le_bytes(raw[at..at + 4].try_into().unwrap());
    if version != VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let at = take(4, &raw)?;
    let count = u32::from_le_bytes(raw[at..at + 4].try_into().unwrap());
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let at = take(2, &raw)?;
        let name_len = u16::from_le_bytes(raw[at..at + 2].try_into().unwrap()) as usize;
        let at = take(name_len, &raw)?;
        let name = std::str::from_utf8(&raw[at..at + name_len])
            .map_err(|_| bad("tensor name is not UTF-8".to_string()))?
            .to_string();
        let at = take(1, &raw)?;
        let rank = raw[at] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let at = take(4, &raw)?;
            dims.push(u32::from_le_bytes(raw[at..at + 4].try_into().unwrap()) as usize);
        }
        let numel: usize = dims.iter().product();
        let at = take(4 * numel, &raw)?;
        let values: Vec<f32> = raw[at..at + 4 * numel]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if tensors.insert(name.clone(), Tensor::from_vec(&dims, values)?).is_some() {
            return Err(bad(format!("duplicate tensor {name:?}")));
        }
    }
    if pos != raw.len() {
        return Err(bad("trailing bytes after last tensor".to_string()));
    }
    Ok(tensors)
}

/// Everything the optimizer owns: weights, their momentum buffers, the
/// Polyak shadows, the step counter and the model shape they belong to.
pub struct TrainState {
    pub model: ModelConfig,
    pub params: ParamStore<f32>,
    pub velocity: ParamStore<f32>,
    pub polyak: ParamStore<f32>,
    pub step: usize,
}

impl TrainState {
    /// Fresh state: seeded weights, zero velocity, shadow equal to weights.
    pub fn new(model: &ModelConfig, seed: u64) -> Result<TrainState> {
        let params = model.init_params::<f32>(seed)?;
        let velocity = params
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(&t.dims)))
            .collect();
        Ok(TrainState {
            model: model.clone(),
            polyak: params.clone(),
            params,
            velocity,
            step: 0,
        })
    }

    /// Inference weights: the Polyak shadow by default, raw weights on
    /// request.
    pub fn infer_params(&self, raw: bool) -> &ParamStore<f32> {
        if raw {
            &self.params
        } else {
            &self.polyak
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = BTreeMap::new();
        for (prefix, store) in
            [("w/", &self.params), ("v/", &self.velocity), ("p/", &self.polyak)]
        {
            for (k, t) in store {
                tensors.insert(format!("{prefix}{k}"), t.clone());
            }
        }
        tensors.insert("__meta/step".into(), scalar_tensor(self.step as f64));
        let hash = self.model.config_hash();
        tensors.insert(
            "__meta/config_hash".into(),
            Tensor::from_vec(
                &[4],
                (0..4).map(|i| ((hash >> (16 * (3 - i))) & 0xffff) as f32).collect(),
            )?,
        );
        tensors.insert(
            "__meta/alphabet".into(),
            string_tensor(&self.model.alphabet.chars().iter().skip(1).collect::<String>())?,
        );
        tensors.insert("__meta/preset".into(), string_tensor(&self.model.preset)?);
        tensors
            .insert("__meta/attention".into(), string_tensor(self.model.attention.name())?);
        tensors.insert(
            "__meta/fields".into(),
            Tensor::from_vec(
                &[9],
                vec![
                    self.model.t_steps as f32,
                    self.model.views as f32,
                    self.model.view_h as f32,
                    self.model.view_w as f32,
                    self.model.channels as f32,
                    self.model.lstm_width as f32,
                    self.model.attn_dim as f32,
                    self.model.embed_dim as f32,
                    self.model.state_clip as f32,
                ],
            )?,
        );
        save_tensors(path, &tensors)
    }

    pub fn load(path: &Path) -> Result<TrainState> {
        let mut tensors = load_tensors(path)?;
        let bad = |msg: String| Error::Checkpoint { path: path.to_path_buf(), msg };
        let mut meta = |name: &str| -> Result<Tensor<f32>> {
            tensors
                .remove(name)
                .ok_or_else(|| Error::Checkpoint {
                    path: path.to_path_buf(),
                    msg: format!("missing {name}"),
                })
        };
        let step = meta("__meta/step")?.values[0] as usize;
        let hash_chunks = meta("__meta/config_hash")?;
        let alphabet = Alphabet::new(tensor_string(&meta("__meta/alphabet")?)?.chars())?;
        let preset = tensor_string(&meta("__meta/preset")?)?;
        let attention = AttentionKind::parse(&tensor_string(&meta("__meta/attention")?)?)?;
        let fields = meta("__meta/fields")?;
        if fields.values.len() != 9 {
            return Err(bad("malformed __meta/fields".to_string()));
        }
        let f = &fields.values;
        let model = ModelConfig {
            alphabet,
            t_steps: f[0] as usize,
            views: f[1] as usize,
            view_h: f[2] as usize,
            view_w: f[3] as usize,
            channels: f[4] as usize,
            preset,
            attention,
            lstm_width: f[5] as usize,
            attn_dim: f[6] as usize,
            embed_dim: f[7] as usize,
            state_clip: f[8] as f64,
        };
        let stored_hash = hash_chunks
            .values
            .iter()
            .fold(0u64, |acc, v| (acc << 16) | (*v as u64 & 0xffff));
        if stored_hash != model.config_hash() {
            return Err(bad("config hash does not match stored fields".to_string()));
        }
        let mut params = ParamStore::new();
        let mut velocity = ParamStore::new();
        let mut polyak = ParamStore::new();
        for (name, t) in tensors {
            let (prefix, rest) = match name.get(..2) {
                Some(p) => (p, &name[2..]),
                None => return Err(bad(format!("unrecognized tensor {name:?}"))),
            };
            let store = match prefix {
                "w/" => &mut params,
                "v/" => &mut velocity,
                "p/" => &mut polyak,
                _ => return Err(bad(format!("unrecognized tensor {name:?}"))),
            };
            store.insert(rest.to_string(), t);
        }
        for (k, t) in &params {
            for (label, other) in [("momentum", &velocity), ("Polyak", &polyak)] {
                match other.get(k) {
                    Some(o) if o.dims == t.dims => {}
                    _ => {
                        return Err(bad(format!("weight {k:?} lacks a matching {label} buffer")))
                    }
                }
            }
        }
        if velocity.len() != params.len() || polyak.len() != params.len() {
            return Err(bad("stray optimizer buffers without weights".to_string()));
        }
        Ok(TrainState { model, params, velocity, polyak, step })
    }
}

fn scalar_tensor(v: f64) -> Tensor<f32> {
    Tensor::from_vec(&[1], vec![v as f32]).expect("scalar tensor")
}

/// Strings ride in tensors as one code point per element; values up to
/// 2^24 are exact in f32, which covers all of Unicode.
fn string_tensor(s: &str) -> Result<Tensor<f32>> {
    let vals: Vec<f32> = s.chars().map(|c| c as u32 as f32).collect();
    let n = vals.len();
    Tensor::from_vec(&[n.max(1)], if n == 0 { vec![0.0] } else { vals })
}

fn tensor_string(t: &Tensor<f32>) -> Result<String> {
    if t.values == [0.0] {
        return Ok(String::new());
    }
    t.values
        .iter()
        .map(|v| {
            char::from_u32(*v as u32)
                .ok_or_else(|| Error::invalid(format!("invalid code point {v}")))
        })
        .collect()
}

/// Check that a checkpoint's model shape matches the extractor presets and
/// alphabet sizes it claims; used by loads that will run inference.
pub fn validate_loaded(state: &TrainState) -> Result<()> {
    state.model.validate()?;
    cnn::ExtractorConfig::parse(&state.model.preset)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_container_round_trips_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let mut map = BTreeMap::new();
        map.insert(
            "a/weird".to_string(),
            Tensor::from_vec(&[2, 3], vec![1.5f32, -0.0, f32::MIN_POSITIVE, 1e30, -7.25, 0.1])
                .unwrap(),
        );
        map.insert("b".to_string(), Tensor::from_vec(&[1], vec![42.0f32]).unwrap());
        map.insert("c/rank3".to_string(), Tensor::zeros(&[2, 1, 4]));
        save_tensors(&path, &map).unwrap();
        let back = load_tensors(&path).unwrap();
        assert_eq!(back.len(), map.len());
        for (k, t) in &map {
            let o = &back[k];
            assert_eq!(o.dims, t.dims);
            let l: Vec<u32> = t.values.iter().map(|v| v.to_bits()).collect();
            let r: Vec<u32> = o.values.iter().map(|v| v.to_bits()).collect();
            assert_eq!(l, r, "values of {k} not bit-identical");
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(load_tensors(&path).is_err());
        std::fs::write(&path, b"AOCR\x01\x00\x00\x00\x02\x00\x00\x00").unwrap();
        assert!(load_tensors(&path).is_err(), "count promises tensors the file lacks");
        let mut map = BTreeMap::new();
        map.insert("x".to_string(), Tensor::from_vec(&[1], vec![1.0f32]).unwrap());
        save_tensors(&path, &map).unwrap();
        let mut raw = std::fs::read(&path).unwrap();
        raw.push(0);
        std::fs::write(&path, raw).unwrap();
        assert!(load_tensors(&path).is_err(), "trailing bytes must fail");
    }

    #[test]
    fn train_state_round_trip_rebuilds_the_model() {
        let mut cfg = ModelConfig::desk();
        cfg.preset = "c2,p,c3".to_string();
        cfg.views = 2;
        cfg.view_h = 16;
        cfg.view_w = 16;
        cfg.lstm_width = 4;
        cfg.attn_dim = 3;
        cfg.embed_dim = 3;
        let mut state = TrainState::new(&cfg, 5).unwrap();
        state.step = 77;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ckpt");
        state.save(&path).unwrap();
        let back = TrainState::load(&path).unwrap();
        validate_loaded(&back).unwrap();
        assert_eq!(back.step, 77);
        assert_eq!(back.model, cfg);
        assert_eq!(back.model.config_hash(), cfg.config_hash());
        assert_eq!(back.params.len(), state.params.len());
        for (k, t) in &state.params {
            assert_eq!(back.params[k].values, t.values, "weights {k}");
            assert_eq!(back.polyak[k].values, state.polyak[k].values);
            assert_eq!(back.velocity[k].values, state.velocity[k].values);
        }
    }

    #[test]
    fn tampered_config_hash_is_detected() {
        let mut cfg = ModelConfig::desk();
        cfg.preset = "c2,p".to_string();
        cfg.views = 1;
        cfg.view_h = 8;
        cfg.view_w = 8;
        cfg.lstm_width = 3;
        cfg.attn_dim = 2;
        cfg.embed_dim = 2;
        let state = TrainState::new(&cfg, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ckpt");
        state.save(&path).unwrap();
        let mut tensors = load_tensors(&path).unwrap();
        tensors.get_mut("__meta/fields").unwrap().values[0] += 1.0; // t_steps
        save_tensors(&path, &tensors).unwrap();
        assert!(TrainState::load(&path).is_err());
    }
}
