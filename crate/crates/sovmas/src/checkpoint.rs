//! Binary checkpoint container.
//!
//! Layout: magic `SOVM`, format version (u32), then records until end of
//! file. A record is a name length (u32), the UTF-8 name, a rank (u32), one
//! u64 per extent and the little-endian f32 values. Optimizer moments live
//! under `__adam.m.<name>` and `__adam.v.<name>`; integer and f64 metadata
//! are stored exactly as 16-bit limbs.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use sovmas_core::model::{Model, ModelConfig};
use sovmas_core::tensor::{OptimizerState, ParamStore, Tensor};

use crate::config;

pub const MAGIC: &[u8; 4] = b"SOVM";
pub const VERSION: u32 = 1;

const ADAM_M: &str = "__adam.m.";
const ADAM_V: &str = "__adam.v.";
const ADAM_STEP: &str = "__adam.step";
const ADAM_HPARAMS: &str = "__adam.hparams";
const RUN_STEP: &str = "__run.step";
const CONFIG: &str = "__config";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt record `{name}`: {detail}")]
    Corrupt { name: String, detail: String },
    #[error("missing record `{0}`")]
    Missing(String),
    #[error(transparent)]
    Model(#[from] sovmas_core::Error),
}

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
    pub optimizer: Option<OptimizerState<f32>>,
    /// Trainer step counter.
    pub step: u64,
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, optimizer: Option<&OptimizerState<f32>>, step: u64) -> Self {
        Self { config: model.config.clone(), params: model.params.clone(), optimizer: optimizer.cloned(), step }
    }

    pub fn model(&self) -> Result<Model<f32>, CheckpointError> {
        Ok(Model::from_params(self.config.clone(), self.params.clone())?)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &buf)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::read_from(&mut io::BufReader::new(fs::File::open(path)?))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), CheckpointError> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let text = config::model_to_text(&self.config);
        let bytes: Vec<f32> = text.bytes().map(f32::from).collect();
        write_record(w, CONFIG, &[bytes.len() as u64], &bytes)?;
        write_record(w, RUN_STEP, &[4], &limbs(self.step))?;
        for (name, t) in self.params.iter() {
            write_record(w, name, &extents(t), t.data())?;
        }
        if let Some(opt) = &self.optimizer {
            write_record(w, ADAM_STEP, &[4], &limbs(opt.step))?;
            let mut h = limbs(opt.beta1.to_bits());
            h.extend(limbs(opt.beta2.to_bits()));
            h.extend(limbs(opt.epsilon.to_bits()));
            write_record(w, ADAM_HPARAMS, &[12], &h)?;
            for (k, (name, t)) in self.params.iter().enumerate() {
                write_record(w, &format!("{ADAM_M}{name}"), &extents(t), &opt.first_moment[k])?;
                write_record(w, &format!("{ADAM_V}{name}"), &extents(t), &opt.second_moment[k])?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let mut params = ParamStore::new();
        let mut moments: Vec<(String, bool, Vec<f32>)> = Vec::new();
        let (mut config, mut step, mut adam_step, mut hparams) = (None, None, None, None);
        while let Some((name, shape, data)) = read_record(r)? {
            let corrupt = |detail: &str| CheckpointError::Corrupt { name: name.clone(), detail: detail.into() };
            match name.as_str() {
                CONFIG => {
                    let bytes: Vec<u8> = data.iter().map(|&b| b as u8).collect();
                    let text = String::from_utf8(bytes).map_err(|_| corrupt("config is not UTF-8"))?;
                    config = Some(config::model_from_text(&text).map_err(|e| corrupt(&e.to_string()))?);
                }
                RUN_STEP => step = Some(from_limbs(&data).ok_or_else(|| corrupt("bad step"))?),
                ADAM_STEP => adam_step = Some(from_limbs(&data).ok_or_else(|| corrupt("bad step"))?),
                ADAM_HPARAMS => {
                    if data.len() != 12 {
                        return Err(corrupt("expected 12 limbs"));
                    }
                    let f = |k: usize| from_limbs(&data[4 * k..4 * k + 4]).map(f64::from_bits);
                    hparams = Some((f(0), f(1), f(2)));
                }
                n if n.starts_with(ADAM_M) => moments.push((n[ADAM_M.len()..].into(), true, data)),
                n if n.starts_with(ADAM_V) => moments.push((n[ADAM_V.len()..].into(), false, data)),
                n if n.starts_with("__") => return Err(corrupt("unknown reserved record")),
                _ => {
                    let t = Tensor::new(shape, data).map_err(|e| corrupt(&e.to_string()))?;
                    params.add(&name, t).map_err(|e| corrupt(&e.to_string()))?;
                }
            }
        }
        let config = config.ok_or_else(|| CheckpointError::Missing(CONFIG.into()))?;
        let step = step.ok_or_else(|| CheckpointError::Missing(RUN_STEP.into()))?;
        let optimizer = match (adam_step, hparams) {
            (Some(s), Some((Some(b1), Some(b2), Some(eps)))) => {
                let mut opt = OptimizerState::with_betas(&params, b1, b2, eps);
                opt.step = s;
                let mut seen = vec![[false; 2]; params.len()];
                for (name, first, data) in moments {
                    let id = params.find(&name).ok_or_else(|| CheckpointError::Corrupt {
                        name: name.clone(),
                        detail: "moment for an unknown parameter".into(),
                    })?;
                    if data.len() != params.get(id).len() {
                        return Err(CheckpointError::Corrupt { name, detail: "moment size mismatch".into() });
                    }
                    let slot = if first { &mut opt.first_moment[id.0] } else { &mut opt.second_moment[id.0] };
                    *slot = data;
                    seen[id.0][usize::from(!first)] = true;
                }
                if seen.iter().any(|s| !s[0] || !s[1]) {
                    return Err(CheckpointError::Missing("optimizer moments".into()));
                }
                Some(opt)
            }
            (None, None) if moments.is_empty() => None,
            _ => return Err(CheckpointError::Missing("optimizer state records".into())),
        };
        Ok(Self { config, params, optimizer, step })
    }
}

fn extents(t: &Tensor<f32>) -> Vec<u64> {
    t.shape().iter().map(|&e| e as u64).collect()
}

fn limbs(v: u64) -> Vec<f32> {
    (0..4).map(|k| ((v >> (16 * k)) & 0xFFFF) as f32).collect()
}

fn from_limbs(data: &[f32]) -> Option<u64> {
    if data.len() != 4 {
        return None;
    }
    let mut v = 0u64;
    for (k, &x) in data.iter().enumerate() {
        if !(0.0..65536.0).contains(&x) || x.fract() != 0.0 {
            return None;
        }
        v |= (x as u64) << (16 * k);
    }
    Some(v)
}

fn write_record<W: Write>(w: &mut W, name: &str, shape: &[u64], data: &[f32]) -> io::Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for e in shape {
        w.write_all(&e.to_le_bytes())?;
    }
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

type Record = (String, Vec<usize>, Vec<f32>);

fn read_record<R: Read>(r: &mut R) -> Result<Option<Record>, CheckpointError> {
    let mut b = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        let n = r.read(&mut b[got..])?;
        if n == 0 {
            if got == 0 {
                return Ok(None);
            }
            return Err(io::Error::from(io::ErrorKind::UnexpectedEof).into());
        }
        got += n;
    }
    let len = u32::from_le_bytes(b) as usize;
    let mut name = vec![0u8; len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name)
        .map_err(|_| CheckpointError::Corrupt { name: "?".into(), detail: "name is not UTF-8".into() })?;
    let rank = read_u32(r)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut e = [0u8; 8];
        r.read_exact(&mut e)?;
        shape.push(u64::from_le_bytes(e) as usize);
    }
    let count = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e)).ok_or_else(|| CheckpointError::Corrupt {
        name: name.clone(),
        detail: "extent overflow".into(),
    })?;
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(Some((name, shape, data)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Model<f32> {
        Model::new(ModelConfig::tiny(), 3).unwrap()
    }

    #[test]
    fn round_trip_without_optimizer() {
        let ck = Checkpoint::from_model(&tiny(), None, 17);
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"SOVM");
        assert_eq!(u32::from_le_bytes([buf[4], buf[5], buf[6], buf[7]]), 1);
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn round_trip_with_optimizer() {
        let m = tiny();
        let mut opt = OptimizerState::new(&m.params);
        opt.step = (1 << 40) + 12345;
        opt.first_moment[0][0] = 0.25;
        opt.second_moment[2][1] = 1e-9;
        let ck = Checkpoint::from_model(&m, Some(&opt), 99);
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert_eq!(Checkpoint::read_from(&mut buf.as_slice()).unwrap(), ck);
    }

    #[test]
    fn truncated_and_foreign_files_rejected() {
        let ck = Checkpoint::from_model(&tiny(), None, 1);
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert!(Checkpoint::read_from(&mut &buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::read_from(&mut bad.as_slice()), Err(CheckpointError::Magic)));
    }

    #[test]
    fn limbs_are_exact() {
        for v in [0u64, 1, 65535, 65536, u64::MAX, 0.998f64.to_bits()] {
            assert_eq!(from_limbs(&limbs(v)), Some(v));
        }
    }
}
