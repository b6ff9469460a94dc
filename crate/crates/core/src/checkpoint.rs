//! Self-describing binary checkpoint.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! u32      format version
//! [u8; 4]  magic "GSPK"
//! u64      metadata length, then that many bytes of JSON
//! u32      record count
//! record*  u32 name length, name (UTF-8), u8 kind, u32 ndim,
//!          u64 dims[ndim], f64 data[product(dims)]
//! ```
//!
//! Record kinds: 0 plain tensor, 1 variational mean, 2 log sigma,
//! 3 group weight. A pretty-printed copy of the metadata is written next to
//! the checkpoint with a `.json` extension for inspection; loading reads
//! only the binary file.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::Framework;
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::lstm::StructureMasks;
use crate::model::{names, Model, ModelSpec, ParamStore};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"GSPK";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointState {
    /// Training output; variational parameters may still be present.
    Trained,
    /// Deterministic sparsified model with masks.
    Finalized,
}

/// Metrics of one epoch. Contains no timings so that same-seed runs log
/// identical records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    /// Mean per-unit data loss over the training batches, in nats.
    pub train_loss: f64,
    /// Mean minimized objective per unit (data loss plus scaled
    /// regularizer).
    pub train_objective: f64,
    /// Validation loss of the deterministic model, in nats per unit.
    pub valid_loss: f64,
    /// Task metric name: `bpc`, `perplexity`, `accuracy` or `mse`.
    pub metric: String,
    pub valid_metric: f64,
    /// Fraction of nonzero weights in the deterministic model.
    pub nonzero_fraction: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingInfo {
    pub seed: u64,
    pub epochs_completed: usize,
    /// Epoch whose parameters were kept, when early stopping chose one.
    pub best_epoch: Option<usize>,
    pub metrics: Vec<EpochMetrics>,
    /// Reason training stopped early on a numerical failure.
    pub aborted: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub spec: ModelSpec,
    pub framework: Framework,
    pub state: CheckpointState,
    pub masks: Option<Vec<StructureMasks>>,
    pub vocab: Option<Vocab>,
    /// Class names in label-id order.
    pub labels: Option<Vec<String>>,
    /// Surviving vocabulary entries, when vocabulary group weights were
    /// trained.
    pub vocab_keep: Option<Vec<bool>>,
    pub feature_keep: Option<Vec<bool>>,
    pub training: TrainingInfo,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: Model,
}

fn record_kind(name: &str, params: &ParamStore) -> u8 {
    if name.ends_with(names::LOG_SIGMA_SUFFIX) {
        2
    } else if name == names::VOCAB_Z || name == names::FEATURE_Z || name.contains(".z_") {
        3
    } else if params.contains_key(&names::log_sigma(name)) {
        1
    } else {
        0
    }
}

fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
    Ok(b)
}

fn take_vec(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut b = Vec::new();
    r.take(n as u64).read_to_end(&mut b)?;
    if b.len() != n {
        return Err(Error::Checkpoint("truncated checkpoint".into()));
    }
    Ok(b)
}

impl Checkpoint {
    pub fn new(model: Model, framework: Framework, state: CheckpointState) -> Self {
        Checkpoint {
            meta: CheckpointMeta {
                format_version: FORMAT_VERSION,
                spec: model.spec.clone(),
                framework,
                state,
                masks: None,
                vocab: None,
                labels: None,
                vocab_keep: None,
                feature_keep: None,
                training: TrainingInfo::default(),
            },
            model,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.meta.spec != self.model.spec {
            return Err(Error::Contract("checkpoint metadata and model disagree on the spec".into()));
        }
        let mut out = Vec::new();
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(MAGIC);
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.model.params.len() as u32).to_le_bytes());
        for (name, t) in &self.model.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(record_kind(name, &self.model.params));
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = bytes;
        let version = u32::from_le_bytes(take(&mut r)?);
        if &take::<4>(&mut r)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let meta_len = u64::from_le_bytes(take(&mut r)?) as usize;
        let meta: CheckpointMeta = serde_json::from_slice(&take_vec(&mut r, meta_len)?)
            .map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        let count = u32::from_le_bytes(take(&mut r)?);
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take(&mut r)?) as usize;
            let name = String::from_utf8(take_vec(&mut r, name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let _kind = take::<1>(&mut r)?[0];
            let ndim = u32::from_le_bytes(take(&mut r)?) as usize;
            let shape: Vec<usize> = (0..ndim)
                .map(|_| take::<8>(&mut r).map(|b| u64::from_le_bytes(b) as usize))
                .collect::<Result<_>>()?;
            let n: usize = shape.iter().product();
            if n.saturating_mul(8) > r.len() {
                return Err(Error::Checkpoint(format!("record {name} runs past the end of the file")));
            }
            let data = (0..n)
                .map(|_| take::<8>(&mut r).map(f64::from_le_bytes))
                .collect::<Result<_>>()?;
            let t = Tensor::from_vec(&shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            if params.insert(name.clone(), t).is_some() {
                return Err(Error::Checkpoint(format!("duplicate record {name}")));
            }
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint("trailing bytes after the last record".into()));
        }
        meta.spec.validate()?;
        let model = Model {
            spec: meta.spec.clone(),
            params,
        };
        for n in model.base_names() {
            if !model.has(&n) {
                return Err(Error::Checkpoint(format!("missing tensor {n}")));
            }
        }
        let ckpt = Checkpoint { meta, model };
        for (k, t) in &ckpt.model.params {
            if ckpt.model.params.contains_key(&names::log_sigma(k)) && t.shape() != ckpt.model.get(&names::log_sigma(k))?.shape() {
                return Err(Error::Checkpoint(format!("{k} and its log sigma differ in shape")));
            }
        }
        Ok(ckpt)
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut p = path.as_os_str().to_owned();
        p.push(".json");
        PathBuf::from(p)
    }

    /// Writes the checkpoint and its metadata sidecar. The binary is
    /// written to a temporary file and renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let bytes = self.to_bytes()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = PathBuf::from(tmp);
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        std::fs::write(Self::sidecar_path(path), serde_json::to_vec_pretty(&self.meta)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn has_variational_params(&self) -> bool {
        self.model.params.keys().any(|k| k.ends_with(names::LOG_SIGMA_SUFFIX))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bayes::{make_variational, BayesConfig, BayesVariant};
    use crate::model::{InitConfig, InputSpec, TaskKind};
    use crate::SeededRng;
    use rand::SeedableRng;

    fn sample() -> Checkpoint {
        let spec = ModelSpec {
            input: InputSpec::OneHot { vocab: 5 },
            hidden: vec![3],
            output: 5,
            task: TaskKind::LanguageModel,
            oov_id: Some(1),
        };
        let m = Model::init(spec, &InitConfig::default(), &mut SeededRng::seed_from_u64(2)).unwrap();
        let cfg = BayesConfig::new(BayesVariant::WGN);
        let v = make_variational(&m, &cfg).unwrap();
        let mut c = Checkpoint::new(v, Framework::Bayes(cfg), CheckpointState::Trained);
        c.meta.masks = Some(vec![StructureMasks::dense(3)]);
        c.meta.training.metrics.push(EpochMetrics {
            epoch: 1,
            lr: 0.1 + 0.2,
            train_loss: 1.0 / 3.0,
            train_objective: 2.0f64.sqrt(),
            valid_loss: std::f64::consts::PI,
            metric: "bpc".into(),
            valid_metric: 1e-300,
            nonzero_fraction: 0.7,
        });
        c
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..4], &FORMAT_VERSION.to_le_bytes());
        let d = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(c, d);
        assert_eq!(bytes, d.to_bytes().unwrap());
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[4] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
        let mut ver = bytes;
        ver[0] = 9;
        assert!(Checkpoint::from_bytes(&ver).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn record_kinds() {
        let c = sample();
        let p = &c.model.params;
        assert_eq!(record_kind("lstm0.wx", p), 1);
        assert_eq!(record_kind("lstm0.wx.log_sigma", p), 2);
        assert_eq!(record_kind("lstm0.z_h", p), 3);
        assert_eq!(record_kind("lstm0.b", p), 0);
    }
}
