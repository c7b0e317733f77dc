//! Binary checkpoints.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        8 bytes  "MADFCKPT"
//! version      u32      1
//! float_bytes  u32      4 (f32 tables) or 8 (f64 tables)
//! digest       u64      FNV-1a of the model's canonical description
//! step         u64      completed training steps
//! config_len   u32      length of the model section that follows
//! config       bytes    `model.* = …` lines (UTF-8)
//! sections     u32      number of sections
//! per section:
//!   name_len u32, name bytes           ("params", "ema", "adam.m", "adam.v")
//!   tensors  u32
//!   per tensor: name_len u32, name bytes, rows u32, cols u32,
//!               rows·cols floats (row-major)
//! ```
//!
//! Exports carry `params` and `ema` as f32. Training states carry all four
//! sections as f64 so a resumed run continues bit-identically.

use std::io::{Read, Write};
use std::path::Path;

use madformer_core::backbone::Model;
use madformer_core::config::ModelConfig;
use madformer_core::optim::Moments;
use madformer_core::params::ParamStore;
use madformer_core::trainer::TrainState;
use madformer_core::Matrix;

use crate::config::RunConfig;
use crate::error::{AppError, Result};

pub const MAGIC: &[u8; 8] = b"MADFCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    fn bytes(self) -> u32 {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

/// Decoded checkpoint contents.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub precision: Precision,
    pub sections: Vec<(String, ParamStore)>,
}

impl Checkpoint {
    pub fn section(&self, name: &str) -> Option<&ParamStore> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, s)| s)
    }

    pub fn model(&self) -> Result<Model> {
        let params = self
            .section("params")
            .ok_or_else(|| AppError::Config("checkpoint has no params".into()))?;
        Ok(Model::from_params(self.config.clone(), params.clone())?)
    }

    /// Rebuilds a resumable training state (needs an f64 checkpoint).
    pub fn train_state(&self) -> Result<TrainState> {
        let missing = |s: &str| AppError::Config(format!("checkpoint lacks section {s:?}; is it a training state?"));
        if self.precision != Precision::F64 {
            return Err(AppError::Config(
                "only f64 training-state checkpoints can be resumed".into(),
            ));
        }
        let model = self.model()?;
        let ema = self.section("ema").ok_or_else(|| missing("ema"))?.clone();
        let m = self.section("adam.m").ok_or_else(|| missing("adam.m"))?;
        let v = self.section("adam.v").ok_or_else(|| missing("adam.v"))?;
        for s in [&ema, m, v] {
            model.params.check_compatible(s)?;
        }
        Ok(TrainState {
            model,
            ema,
            moments: Moments {
                m: m.values().to_vec(),
                v: v.values().to_vec(),
            },
            step: self.step,
        })
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

pub fn encode(config: &ModelConfig, step: u64, precision: Precision, sections: &[(&str, &ParamStore)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, precision.bytes());
    out.extend_from_slice(&config.digest().to_le_bytes());
    out.extend_from_slice(&step.to_le_bytes());
    put_str(&mut out, &RunConfig::model_text(config));
    put_u32(&mut out, sections.len() as u32);
    for (name, store) in sections {
        put_str(&mut out, name);
        put_u32(&mut out, store.len() as u32);
        for (pname, m) in store.iter() {
            put_str(&mut out, pname);
            put_u32(&mut out, m.rows as u32);
            put_u32(&mut out, m.cols as u32);
            for &x in &m.data {
                match precision {
                    Precision::F32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
                    Precision::F64 => out.extend_from_slice(&x.to_le_bytes()),
                }
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or("truncated file")?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "invalid UTF-8 name".to_string())
    }
}

pub fn decode(buf: &[u8]) -> std::result::Result<Checkpoint, String> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err("bad magic".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let precision = match r.u32()? {
        4 => Precision::F32,
        8 => Precision::F64,
        b => return Err(format!("unsupported float width {b}")),
    };
    let digest = r.u64()?;
    let step = r.u64()?;
    let config = RunConfig::parse_model(&r.string()?)?;
    if config.digest() != digest {
        return Err(format!(
            "config digest mismatch: header {digest:#x}, text {:#x}",
            config.digest()
        ));
    }
    let skeleton = Model::new(config.clone(), 0).map_err(|e| e.to_string())?;
    let n_sections = r.u32()?;
    let mut sections = Vec::new();
    for _ in 0..n_sections {
        let name = r.string()?;
        let count = r.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let pname = r.string()?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let w = precision.bytes() as usize;
            let raw = r.take(
                rows.checked_mul(cols)
                    .and_then(|n| n.checked_mul(w))
                    .ok_or("tensor too large")?,
            )?;
            let data: Vec<f64> = match precision {
                Precision::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                Precision::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            };
            store.push(pname, Matrix::from_vec(rows, cols, data).map_err(|e| e.to_string())?);
        }
        skeleton
            .params
            .check_compatible(&store)
            .map_err(|e| format!("section {name:?}: {e}"))?;
        sections.push((name, store));
    }
    if r.pos != buf.len() {
        return Err(format!("{} trailing bytes", buf.len() - r.pos));
    }
    Ok(Checkpoint {
        config,
        step,
        precision,
        sections,
    })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(AppError::io(&tmp))?;
    f.write_all(bytes).map_err(AppError::io(&tmp))?;
    f.sync_all().map_err(AppError::io(&tmp))?;
    std::fs::rename(&tmp, path).map_err(AppError::io(path))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(AppError::io(path))?;
    decode(&buf).map_err(|msg| AppError::Checkpoint {
        path: path.to_path_buf(),
        msg,
    })
}

/// Full-precision training state.
pub fn save_state(path: &Path, state: &TrainState) -> Result<()> {
    let m = moments_store(&state.model.params, &state.moments.m);
    let v = moments_store(&state.model.params, &state.moments.v);
    let bytes = encode(
        &state.model.config,
        state.step,
        Precision::F64,
        &[
            ("params", &state.model.params),
            ("ema", &state.ema),
            ("adam.m", &m),
            ("adam.v", &v),
        ],
    );
    write_file(path, &bytes)
}

/// f32 export of the weights and their EMA.
pub fn save_export(path: &Path, state: &TrainState) -> Result<()> {
    let bytes = encode(
        &state.model.config,
        state.step,
        Precision::F32,
        &[("params", &state.model.params), ("ema", &state.ema)],
    );
    write_file(path, &bytes)
}

fn moments_store(like: &ParamStore, values: &[Matrix]) -> ParamStore {
    let mut s = ParamStore::new();
    for ((name, _), v) in like.iter().zip(values) {
        s.push(name, v.clone());
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            diffusion_depth: 1,
            hidden_width: 8,
            ffn_width: 8,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn f64_state_round_trips_exactly() {
        let mut state = TrainState::new(Model::new(small(), 3).unwrap());
        state.step = 17;
        state.moments.m[2].data[1] = 0.123456789012345;
        let bytes = encode(
            &state.model.config,
            17,
            Precision::F64,
            &[
                ("params", &state.model.params),
                ("ema", &state.ema),
                ("adam.m", &moments_store(&state.model.params, &state.moments.m)),
                ("adam.v", &moments_store(&state.model.params, &state.moments.v)),
            ],
        );
        let back = decode(&bytes).unwrap().train_state().unwrap();
        assert_eq!(back.checksum(), state.checksum());
    }

    #[test]
    fn f32_export_rounds_values() {
        let state = TrainState::new(Model::new(small(), 3).unwrap());
        let bytes = encode(
            &state.model.config,
            0,
            Precision::F32,
            &[("params", &state.model.params)],
        );
        let ck = decode(&bytes).unwrap();
        let m = ck.model().unwrap();
        for (a, b) in m.params.values().iter().zip(state.model.params.values()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
        assert!(ck.train_state().is_err());
    }

    #[test]
    fn rejects_corruption() {
        let state = TrainState::new(Model::new(small(), 3).unwrap());
        let good = encode(
            &state.model.config,
            0,
            Precision::F32,
            &[("params", &state.model.params)],
        );
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(decode(&bad).unwrap_err().contains("magic"));
        assert!(decode(&good[..good.len() - 3]).is_err());
        let mut digest = good.clone();
        digest[16] ^= 1;
        assert!(decode(&digest).unwrap_err().contains("digest"));
        let mut extra = good;
        extra.push(0);
        assert!(decode(&extra).is_err());
    }
}
