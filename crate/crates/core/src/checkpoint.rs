//! Versioned JSON container for trained parameters.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::denoiser::{Architecture, Denoiser};
use crate::schedule::ScheduleSpec;
use crate::types::Normalizer;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Noise predictor sampled with DDPM/DDIM.
    Diffusion,
    /// The same network used as a direct regressor at a fixed `(y_t, t)`.
    MseBaseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kind: ModelKind,
    pub architecture: Architecture,
    pub schedule: ScheduleSpec,
    pub normalizer: Normalizer,
    /// Hash of the configuration that produced the checkpoint.
    pub config_hash: String,
    pub tensors: Vec<NamedTensor>,
}

/// Hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn new(
        kind: ModelKind,
        den: &Denoiser,
        schedule: ScheduleSpec,
        normalizer: Normalizer,
        config_hash: String,
        params: &[f64],
    ) -> Result<Self> {
        if params.len() != den.num_params() {
            return Err(Error::DimensionMismatch {
                what: "parameter vector length",
                expected: den.num_params(),
                got: params.len(),
            });
        }
        let tensors = den
            .layout()
            .tensors()
            .iter()
            .map(|t| NamedTensor {
                name: t.name.clone(),
                shape: [t.rows, t.cols],
                data: params[t.offset..t.offset + t.len()].to_vec(),
            })
            .collect();
        Ok(Self {
            format_version: FORMAT_VERSION,
            kind,
            architecture: den.architecture().clone(),
            schedule,
            normalizer,
            config_hash,
            tensors,
        })
    }

    /// Rebuilds the network and its flat parameter vector, rejecting any
    /// tensor whose name, shape or values do not fit the stored architecture.
    pub fn restore(&self) -> Result<(Denoiser, Vec<f64>)> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::CheckpointCorrupt(format!(
                "unsupported format version {}",
                self.format_version
            )));
        }
        let den = Denoiser::new(self.architecture.clone())?;
        let layout = den.layout().tensors();
        if layout.len() != self.tensors.len() {
            return Err(Error::CheckpointCorrupt(format!(
                "expected {} tensors, found {}",
                layout.len(),
                self.tensors.len()
            )));
        }
        let mut params = vec![0.0; den.num_params()];
        for (info, t) in layout.iter().zip(&self.tensors) {
            if info.name != t.name || t.shape != [info.rows, info.cols] || t.data.len() != info.len() {
                return Err(Error::CheckpointCorrupt(format!(
                    "tensor {:?} {:?} does not match {:?} [{}, {}]",
                    t.name, t.shape, info.name, info.rows, info.cols
                )));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::CheckpointCorrupt(format!("non-finite value in {}", t.name)));
            }
            params[info.offset..info.offset + info.len()].copy_from_slice(&t.data);
        }
        self.schedule.build()?;
        Normalizer::new(self.normalizer.center(), self.normalizer.scale())
            .map_err(|e| Error::CheckpointCorrupt(format!("normalizer: {e}")))?;
        Ok((den, params))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::CheckpointCorrupt(e.to_string()))
    }

    /// Hash of the serialized checkpoint bytes.
    pub fn digest(&self) -> String {
        sha256_hex(self.to_json().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::denoiser::McsnConfig;
    use crate::rng::RandomStream;
    use crate::types::ConditioningContext;

    fn fixture() -> (Denoiser, Vec<f64>, Checkpoint) {
        let den = Denoiser::new(Architecture::Mcsn(McsnConfig::small(2, 1))).unwrap();
        let mut p = den.init_params(RandomStream::new(3, 0));
        // make the zero-initialized head non-trivial
        for (i, v) in p.iter_mut().enumerate() {
            *v += 1e-3 * (i as f64).sin();
        }
        let ck = Checkpoint::new(
            ModelKind::Diffusion,
            &den,
            ScheduleSpec::default(),
            Normalizer::new(0.3, 2.0).unwrap(),
            "abc".into(),
            &p,
        )
        .unwrap();
        (den, p, ck)
    }

    #[test]
    fn json_round_trip_is_exact() {
        let (den, p, ck) = fixture();
        let back = Checkpoint::from_json(&ck.to_json()).unwrap();
        assert_eq!(back, ck);
        let (den2, p2) = back.restore().unwrap();
        assert_eq!(p2, p);
        let ctx = ConditioningContext::new(vec![0.2, -0.4], vec![1.0]).unwrap();
        assert_eq!(
            den.forward(&p, 0.7, 500, &ctx).unwrap(),
            den2.forward(&p2, 0.7, 500, &ctx).unwrap()
        );
        assert_eq!(back.digest(), ck.digest());
    }

    #[test]
    fn rejects_mismatched_tensors() {
        let (_, _, mut ck) = fixture();
        ck.tensors[0].shape = [1, 1];
        assert_eq!(ck.restore().unwrap_err().kind(), "CheckpointCorrupt");

        let (_, _, mut ck) = fixture();
        ck.tensors.pop();
        assert_eq!(ck.restore().unwrap_err().kind(), "CheckpointCorrupt");

        let (_, _, mut ck) = fixture();
        ck.tensors[2].name = "other.weight".into();
        assert_eq!(ck.restore().unwrap_err().kind(), "CheckpointCorrupt");

        let (_, _, mut ck) = fixture();
        ck.format_version = 99;
        assert_eq!(ck.restore().unwrap_err().kind(), "CheckpointCorrupt");
    }

    #[test]
    fn rejects_architecture_that_disagrees_with_tensors() {
        let (_, _, mut ck) = fixture();
        if let Architecture::Mcsn(c) = &mut ck.architecture {
            c.d_model = 16;
        }
        assert!(ck.restore().is_err());
    }

    #[test]
    fn non_finite_values_do_not_load() {
        let (_, _, mut ck) = fixture();
        ck.tensors[0].data[0] = f64::NAN;
        // NaN becomes null in JSON and fails to parse
        assert!(Checkpoint::from_json(&ck.to_json()).is_err());
        assert_eq!(ck.restore().unwrap_err().kind(), "CheckpointCorrupt");
    }

    #[test]
    fn garbage_is_corrupt() {
        assert_eq!(Checkpoint::from_json("{not json").unwrap_err().kind(), "CheckpointCorrupt");
    }
}
