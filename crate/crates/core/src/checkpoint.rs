//! Versioned, checksummed model and training-state files.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, JSON
//! header, parameter values as little-endian `f32`, optional training state
//! (RNG, Adam moments and loss windows as `f64`), then a SHA-256 digest of
//! every preceding byte.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::infomax::DiscriminatorConfig;
use crate::model::TimModel;
use crate::params::{Group, Mat, ParameterStore};
use crate::training::{LossWindows, Moments, TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"TIMCKPT\0";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// Everything needed to rebuild a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub encoder: EncoderConfig,
    pub features: FeatureConfig,
    pub critic: DiscriminatorConfig,
    /// Hash of the vocabulary the embedding rows are indexed by.
    pub vocab_hash: String,
}

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    group: Group,
    trainable: bool,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    config: TrainConfig,
    step: u64,
    adam_t: u64,
    window_lens: [usize; 5],
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelSpec,
    params: Vec<ParamMeta>,
    state: Option<StateMeta>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelSpec,
    pub params: ParameterStore,
    /// Present when the file can resume training.
    pub resume: Option<(TrainConfig, TrainState)>,
}

impl Checkpoint {
    pub fn bind_model(&self) -> Result<TimModel> {
        TimModel::bind(
            self.model.encoder.clone(),
            self.model.features.clone(),
            self.model.critic.clone(),
            &self.params,
        )
    }
}

fn put_f64s<'a>(out: &mut Vec<u8>, xs: impl IntoIterator<Item = &'a f64>) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode(model: &ModelSpec, params: &ParameterStore, state: Option<(&TrainConfig, &TrainState)>) -> Vec<u8> {
    let header = Header {
        model: model.clone(),
        params: params
            .iter()
            .map(|(_, p)| ParamMeta {
                name: p.name.clone(),
                group: p.group,
                trainable: p.trainable,
                rows: p.value.nrows(),
                cols: p.value.ncols(),
            })
            .collect(),
        state: state.map(|(config, s)| StateMeta {
            config: config.clone(),
            step: s.step,
            adam_t: s.moments.t,
            window_lens: s.windows.all().map(|w| w.len()),
        }),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, p) in params.iter() {
        for &x in p.value.iter() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    if let Some((_, s)) = state {
        out.extend_from_slice(&s.rng.get_seed());
        out.extend_from_slice(&s.rng.get_stream().to_le_bytes());
        out.extend_from_slice(&s.rng.get_word_pos().to_le_bytes());
        for m in s.moments.m.iter().chain(&s.moments.v) {
            put_f64s(&mut out, m.iter());
        }
        for w in s.windows.all() {
            put_f64s(&mut out, w.iter());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Writes atomically through a sibling temporary file.
pub fn save(
    path: &Path,
    model: &ModelSpec,
    params: &ParameterStore,
    state: Option<(&TrainConfig, &TrainState)>,
) -> Result<()> {
    let bytes = encode(model, params, state);
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Corrupt("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Corrupt("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn mat(&mut self, rows: usize, cols: usize) -> Result<Mat> {
        let v = self.f64s(rows * cols)?;
        Ok(Mat::from_shape_vec((rows, cols), v).expect("sized"))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Corrupt("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    if bytes.len() < 12 + DIGEST_LEN {
        return Err(Error::Corrupt("checkpoint is truncated".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Corrupt("checksum mismatch".into()));
    }
    let mut r = Reader { bytes: body, pos: 12 };
    let len = r.u64()? as usize;
    let header: Header =
        serde_json::from_slice(r.take(len)?).map_err(|e| Error::Corrupt(format!("bad header: {e}")))?;

    let mut params = ParameterStore::new();
    for meta in &header.params {
        let n = meta.rows * meta.cols;
        let raw = r.take(n * 4)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let value = Mat::from_shape_vec((meta.rows, meta.cols), values).expect("sized");
        let id = params.register(&meta.name, meta.group, value)?;
        params.set_trainable(id, meta.trainable);
    }

    let resume = match header.state {
        None => None,
        Some(meta) => {
            let seed: [u8; 32] = r.array()?;
            let stream = r.u64()?;
            let word_pos = u128::from_le_bytes(r.array()?);
            let mut rng = ChaCha8Rng::from_seed(seed);
            rng.set_stream(stream);
            rng.set_word_pos(word_pos);
            let shapes: Vec<(usize, usize)> = header.params.iter().map(|p| (p.rows, p.cols)).collect();
            let m = shapes.iter().map(|&(a, b)| r.mat(a, b)).collect::<Result<Vec<_>>>()?;
            let v = shapes.iter().map(|&(a, b)| r.mat(a, b)).collect::<Result<Vec<_>>>()?;
            let mut windows = LossWindows::default();
            for (w, &n) in windows.all_mut().into_iter().zip(&meta.window_lens) {
                w.extend(r.f64s(n)?);
            }
            let state = TrainState {
                step: meta.step,
                params: params.clone(),
                moments: Moments { t: meta.adam_t, m, v },
                rng,
                windows,
            };
            Some((meta.config, state))
        }
    };
    if r.pos != body.len() {
        return Err(Error::Corrupt("trailing bytes after checkpoint body".into()));
    }
    Ok(Checkpoint {
        model: header.model,
        params,
        resume,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn sample() -> (ModelSpec, TrainState) {
        let enc = EncoderConfig {
            vocab_size: 12,
            embed_dim: 4,
            num_blocks: 1,
            conv_layers_per_block: 1,
            conv_kernel: 3,
            hidden_dim: 4,
            output_dim: 3,
            num_classes: 2,
            symmetric_prediction: false,
            share_towers: true,
            freeze_embeddings: false,
        };
        let spec = ModelSpec {
            encoder: enc.clone(),
            features: FeatureConfig::segment(3, 2),
            critic: DiscriminatorConfig {
                hidden_units: 5,
                hidden_layers: 1,
            },
            vocab_hash: "abc".into(),
        };
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        TimModel::new(enc, spec.features.clone(), spec.critic.clone(), &mut store, &mut rng).unwrap();
        let mut state = TrainState::new(store, 9);
        state.step = 17;
        state.moments.t = 17;
        for m in state.moments.m.iter_mut().chain(state.moments.v.iter_mut()) {
            m.mapv_inplace(|_| rng.random::<f64>());
        }
        state.windows.l_t.extend([0.5, 0.25]);
        state.windows.dv_tt.push_back(1.0 / 3.0);
        let _: u64 = state.rng.random();
        (spec, state)
    }

    #[test]
    fn round_trip_is_exact() {
        let (spec, mut state) = sample();
        let config = TrainConfig::default();
        let bytes = encode(&spec, &state.params, Some((&config, &state)));
        let ck = decode(&bytes).unwrap();
        assert_eq!(ck.model, spec);
        let (c2, mut s2) = ck.resume.unwrap();
        assert_eq!(c2, config);
        assert_eq!(s2.step, 17);
        assert_eq!(s2.moments, state.moments);
        assert_eq!(s2.windows, state.windows);
        for ((_, a), (_, b)) in state.params.iter().zip(s2.params.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
            assert_eq!(a.trainable, b.trainable);
        }
        assert_eq!(state.rng.random::<u64>(), s2.rng.random::<u64>());
    }

    #[test]
    fn inference_only_file_has_no_state() {
        let (spec, state) = sample();
        let ck = decode(&encode(&spec, &state.params, None)).unwrap();
        assert!(ck.resume.is_none());
        ck.bind_model().unwrap();
    }

    #[test]
    fn flipped_byte_is_detected() {
        let (spec, state) = sample();
        let mut bytes = encode(&spec, &state.params, None);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(decode(&bytes), Err(Error::Corrupt(_))));
    }

    #[test]
    fn wrong_version_is_reported_before_checksum() {
        let (spec, state) = sample();
        let mut bytes = encode(&spec, &state.params, None);
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(Error::Version { found: 7, expected: 1 })));
    }

    #[test]
    fn truncated_and_foreign_files_fail() {
        let (spec, state) = sample();
        let bytes = encode(&spec, &state.params, None);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(matches!(decode(b"hello"), Err(Error::Corrupt(_))));
    }
}
