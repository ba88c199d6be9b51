//! Binary checkpoint archive of named `f64` matrices.
//!
//! Layout (little endian): magic `PEGOCKPT`, `u32` version, 32-byte config
//! fingerprint, `u64` iteration, `u64` optimizer step count, `u32` entry
//! count, then per entry `u32` name length, UTF-8 name, `u32` rows,
//! `u32` cols and `rows·cols` `f64` values in row-major order.

use std::fs;
use std::path::Path;

use crate::autograd::Mat;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::losses::CenterState;
use crate::trainer::{AdamState, TeacherState, TrainState};
use crate::vit::{layout, NetworkParams};

pub const MAGIC: &[u8; 8] = b"PEGOCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub fingerprint: [u8; 32],
    pub iteration: u64,
    pub adam_steps: u64,
    pub arrays: Vec<(String, Mat)>,
}

impl Archive {
    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn encode(&self) -> Vec<u8> {
        let payload: usize = self.arrays.iter().map(|(n, m)| 12 + n.len() + 8 * m.len()).sum();
        let mut out = Vec::with_capacity(64 + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.fingerprint);
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&self.adam_steps.to_le_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, m) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
            for v in m.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let fingerprint: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let iteration = r.u64()?;
        let adam_steps = r.u64()?;
        let count = r.u32()? as usize;
        let mut arrays = Vec::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?
                .to_string();
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let n = rows
                .checked_mul(cols)
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| Error::Checkpoint(format!("entry `{name}` is too large")))?;
            let data = r.take(n)?;
            let values = data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let m = Mat::from_shape_vec((rows, cols), values).expect("length checked");
            arrays.push((name, m));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            fingerprint,
            iteration,
            adam_steps,
            arrays,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated archive".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

const GROUPS: [&str; 4] = ["student/", "teacher/", "adam_m/", "adam_v/"];

pub fn to_archive(state: &TrainState, cfg: &RunConfig) -> Archive {
    let mut arrays = Vec::new();
    let groups: [Vec<&Mat>; 4] = [
        (0..state.student.len()).map(|i| state.student.value(i)).collect(),
        (0..state.teacher.params.len()).map(|i| state.teacher.params.value(i)).collect(),
        state.adam.m.iter().collect(),
        state.adam.v.iter().collect(),
    ];
    for (prefix, mats) in GROUPS.iter().zip(groups) {
        for (name, m) in state.student.names().iter().zip(mats) {
            arrays.push((format!("{prefix}{name}"), m.clone()));
        }
    }
    let c = &state.teacher.center.center;
    arrays.push(("center".into(), Mat::from_shape_vec((1, c.len()), c.clone()).expect("row")));
    Archive {
        fingerprint: cfg.fingerprint(),
        iteration: state.iteration,
        adam_steps: state.adam.steps,
        arrays,
    }
}

/// Extracts one parameter group, checking every shape against `cfg`.
pub fn params_from_archive(archive: &Archive, cfg: &RunConfig, prefix: &str) -> Result<NetworkParams> {
    let specs = layout(cfg);
    let mut names = Vec::with_capacity(specs.len());
    let mut values = Vec::with_capacity(specs.len());
    for spec in &specs {
        let key = format!("{prefix}{}", spec.name);
        let m = archive
            .get(&key)
            .ok_or_else(|| Error::Checkpoint(format!("missing entry `{key}`")))?;
        if m.dim() != spec.shape {
            return Err(Error::ShapeMismatch {
                name: spec.name.clone(),
                expected: spec.shape,
                found: m.dim(),
            });
        }
        names.push(spec.name.clone());
        values.push(m.clone());
    }
    Ok(NetworkParams::new(names, values))
}

pub fn from_archive(archive: &Archive, cfg: &RunConfig) -> Result<TrainState> {
    if archive.fingerprint != cfg.fingerprint() {
        return Err(Error::FingerprintMismatch);
    }
    let student = params_from_archive(archive, cfg, GROUPS[0])?;
    let teacher = params_from_archive(archive, cfg, GROUPS[1])?;
    let m = params_from_archive(archive, cfg, GROUPS[2])?;
    let v = params_from_archive(archive, cfg, GROUPS[3])?;
    let center = archive
        .get("center")
        .ok_or_else(|| Error::Checkpoint("missing entry `center`".into()))?;
    if center.dim() != (1, cfg.backbone.out_dim) {
        return Err(Error::ShapeMismatch {
            name: "center".into(),
            expected: (1, cfg.backbone.out_dim),
            found: center.dim(),
        });
    }
    let unpack = |p: NetworkParams| (0..p.len()).map(|i| p.value(i).clone()).collect();
    Ok(TrainState {
        iteration: archive.iteration,
        student,
        teacher: TeacherState {
            params: teacher,
            center: CenterState {
                center: center.iter().copied().collect(),
                momentum: cfg.distill.center_momentum,
            },
        },
        adam: AdamState {
            m: unpack(m),
            v: unpack(v),
            steps: archive.adam_steps,
        },
    })
}

pub fn read_archive(path: &Path) -> Result<Archive> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Archive::decode(&bytes)
}

pub fn save_checkpoint(state: &TrainState, cfg: &RunConfig, path: &Path) -> Result<()> {
    let bytes = to_archive(state, cfg).encode();
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Restores a full training state; the config fingerprint must match.
pub fn load_checkpoint(path: &Path, cfg: &RunConfig) -> Result<TrainState> {
    from_archive(&read_archive(path)?, cfg)
}

/// Loads the teacher (or student) weights for evaluation. Only shapes are
/// checked, so evaluation may use a different crop or data config.
pub fn load_eval_params(path: &Path, cfg: &RunConfig, student: bool) -> Result<NetworkParams> {
    let prefix = if student { GROUPS[0] } else { GROUPS[1] };
    params_from_archive(&read_archive(path)?, cfg, prefix)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.backbone.embed_dim = 16;
        cfg.backbone.heads = 2;
        cfg.backbone.depth = 2;
        cfg.backbone.head_hidden = 16;
        cfg.backbone.bottleneck_dim = 8;
        cfg.backbone.out_dim = 12;
        cfg.proto.k = 2;
        cfg.proto.tap_layer_mid = 1;
        cfg.clip.crop_size = 32;
        cfg
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = tiny();
        let mut state = TrainState::new(&cfg);
        state.iteration = 7;
        state.adam.steps = 7;
        state.teacher.center.center[3] = -0.25;
        state.adam.v[2].fill(f64::MIN_POSITIVE);
        let bytes = to_archive(&state, &cfg).encode();
        let back = from_archive(&Archive::decode(&bytes).unwrap(), &cfg).unwrap();
        assert_eq!(back, state);
        assert_eq!(to_archive(&back, &cfg).encode(), bytes);
    }

    #[test]
    fn fingerprint_and_shape_checks() {
        let cfg = tiny();
        let state = TrainState::new(&cfg);
        let archive = to_archive(&state, &cfg);
        let mut other = cfg.clone();
        other.backbone.embed_dim = 32;
        assert!(matches!(from_archive(&archive, &other), Err(Error::FingerprintMismatch)));
        assert!(matches!(
            params_from_archive(&archive, &other, "teacher/"),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn malformed_archives_are_rejected() {
        let cfg = tiny();
        let bytes = to_archive(&TrainState::new(&cfg), &cfg).encode();
        assert!(Archive::decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(Archive::decode(&[bytes.as_slice(), &[0]].concat()).is_err());
        assert!(Archive::decode(b"PEGOCKP").is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Archive::decode(&bad).is_err());
    }
}
