//! Versioned JSON checkpoints. Floats are stored as the base-16 image of
//! their IEEE-754 bits, so a save/load round trip is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamState, ScorerConfig, ScorerParams};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Scorer,
    Regressor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSnapshot {
    pub step: u64,
    pub m: Vec<String>,
    pub v: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub config: ScorerConfig,
    pub seed: u64,
    pub params: Vec<String>,
    /// Regression head (weights then bias); present for regressor checkpoints.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerSnapshot>,
}

pub(crate) fn encode_f64s(values: &[f64]) -> Vec<String> {
    values.iter().map(|v| format!("{:016x}", v.to_bits())).collect()
}

pub(crate) fn decode_f64s(values: &[String]) -> Result<Vec<f64>> {
    values
        .iter()
        .map(|s| {
            u64::from_str_radix(s, 16)
                .map(f64::from_bits)
                .map_err(|e| Error::Schema(format!("bad float image {s:?}: {e}")))
        })
        .collect()
}

impl Checkpoint {
    pub fn from_params(params: &ScorerParams, seed: u64, optimizer: Option<&AdamState>) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind: CheckpointKind::Scorer,
            config: *params.config(),
            seed,
            params: encode_f64s(params.values()),
            head: None,
            optimizer: optimizer.map(|o| OptimizerSnapshot {
                step: o.step,
                m: encode_f64s(&o.m),
                v: encode_f64s(&o.v),
            }),
        }
    }

    pub fn params(&self) -> Result<ScorerParams> {
        ScorerParams::from_values(self.config, decode_f64s(&self.params)?)
    }

    pub fn optimizer(&self) -> Result<Option<AdamState>> {
        self.optimizer
            .as_ref()
            .map(|o| {
                let mut s = AdamState::new(self.params.len());
                s.step = o.step;
                s.m = decode_f64s(&o.m)?;
                s.v = decode_f64s(&o.v)?;
                if s.m.len() != self.params.len() || s.v.len() != self.params.len() {
                    return Err(Error::Schema("optimizer moments do not match parameters".into()));
                }
                Ok(s)
            })
            .transpose()
    }

    pub fn head(&self) -> Result<Option<Vec<f64>>> {
        self.head.as_deref().map(decode_f64s).transpose()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.format_version != FORMAT_VERSION {
            return Err(Error::Schema(format!(
                "unsupported checkpoint version {}",
                ckpt.format_version
            )));
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = ScorerConfig {
            vocab_size: 7,
            embed_dim: 3,
            hidden_dim: 5,
            horizon: 6,
            aligned_source: false,
        };
        let mut p = ScorerParams::init(cfg, 11).unwrap();
        p.values_mut()[0] = 0.1 + 0.2;
        p.values_mut()[1] = -0.0;
        p.values_mut()[2] = f64::MIN_POSITIVE / 3.0;
        let mut adam = AdamState::new(p.len());
        let g = super::super::Gradient::from_values(vec![0.25; p.len()]);
        adam.step(&mut p, &g, 1e-3).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        Checkpoint::from_params(&p, 11, Some(&adam)).save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        let q = loaded.params().unwrap();
        assert!(p
            .values()
            .iter()
            .zip(q.values())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(loaded.optimizer().unwrap().unwrap(), adam);
        assert_eq!(loaded.seed, 11);
    }

    #[test]
    fn rejects_wrong_version() {
        let cfg = ScorerConfig::new(5, 4);
        let mut c = Checkpoint::from_params(&ScorerParams::zeros(cfg).unwrap(), 0, None);
        c.format_version = 99;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        c.save(&path).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
