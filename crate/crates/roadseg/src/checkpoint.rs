//! Binary checkpoint: `RSEGCKPT`, a little-endian `u32` version, a `u64` header length, a
//! JSON header, then raw little-endian `f64` data for every parameter followed by the
//! optimizer's first and second moments when present.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use roadseg_core::nn::SingleConvBaseline;
use roadseg_core::optim::{AdamW, AdamWConfig};
use roadseg_core::{DualEncoderNet, Graph, ModelConfig, ParamStore, SegmentationModel, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};

pub const MAGIC: &[u8; 8] = b"RSEGCKPT";
pub const VERSION: u32 = 1;

/// Which architecture the parameters belong to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelSpec {
    DualEncoder { config: ModelConfig },
    SingleConv { seed: u64 },
}

/// Progress needed to continue a run bit-identically.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Number of optimizer steps taken.
    pub step: u64,
    pub best_iou: Option<f64>,
    pub best_step: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    path: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelSpec,
    state: TrainState,
    optimizer_step: Option<u64>,
    params: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelSpec,
    pub state: TrainState,
    pub params: ParamStore,
    /// `(step, m, v)` of the optimizer.
    pub moments: Option<(u64, Vec<Vec<f64>>, Vec<Vec<f64>>)>,
}

/// Models that can be written to and rebuilt from a checkpoint.
pub trait Archivable: SegmentationModel + Sized {
    fn spec(&self) -> ModelSpec;

    fn restore(ckpt: &Checkpoint) -> AppResult<Self>;
}

impl Archivable for DualEncoderNet {
    fn spec(&self) -> ModelSpec {
        ModelSpec::DualEncoder {
            config: self.config().clone(),
        }
    }

    fn restore(ckpt: &Checkpoint) -> AppResult<Self> {
        match &ckpt.model {
            ModelSpec::DualEncoder { config } => Ok(DualEncoderNet::from_params(config.clone(), ckpt.params.clone())?),
            ModelSpec::SingleConv { .. } => Err(AppError::Config("checkpoint holds the single-conv baseline, not the dual encoder".into())),
        }
    }
}

impl Archivable for SingleConvBaseline {
    fn spec(&self) -> ModelSpec {
        ModelSpec::SingleConv { seed: self.seed() }
    }

    fn restore(ckpt: &Checkpoint) -> AppResult<Self> {
        match &ckpt.model {
            ModelSpec::SingleConv { seed } => Ok(SingleConvBaseline::from_params(*seed, ckpt.params.clone())?),
            ModelSpec::DualEncoder { .. } => Err(AppError::Config("checkpoint holds the dual encoder, not the single-conv baseline".into())),
        }
    }
}

/// Whichever architecture a checkpoint holds.
#[derive(Clone, Debug)]
pub enum AnyModel {
    DualEncoder(DualEncoderNet),
    SingleConv(SingleConvBaseline),
}

impl AnyModel {
    pub fn restore(ckpt: &Checkpoint) -> AppResult<Self> {
        Ok(match ckpt.model {
            ModelSpec::DualEncoder { .. } => Self::DualEncoder(DualEncoderNet::restore(ckpt)?),
            ModelSpec::SingleConv { .. } => Self::SingleConv(SingleConvBaseline::restore(ckpt)?),
        })
    }

    fn inner(&self) -> &dyn SegmentationModel {
        match self {
            Self::DualEncoder(m) => m,
            Self::SingleConv(m) => m,
        }
    }
}

impl SegmentationModel for AnyModel {
    fn params(&self) -> &ParamStore {
        self.inner().params()
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Self::DualEncoder(m) => m.params_mut(),
            Self::SingleConv(m) => m.params_mut(),
        }
    }

    fn logits(&self, g: &mut Graph<'_>, images: Var) -> roadseg_core::Result<Var> {
        self.inner().logits(g, images)
    }
}

impl Checkpoint {
    pub fn capture<M: Archivable>(model: &M, opt: Option<&AdamW>, state: &TrainState) -> Self {
        Self {
            model: model.spec(),
            state: state.clone(),
            params: model.params().clone(),
            moments: opt.map(|o| (o.step, o.m.clone(), o.v.clone())),
        }
    }

    /// Optimizer with the stored moments, or fresh moments when none were saved.
    pub fn optimizer(&self, cfg: AdamWConfig) -> AppResult<AdamW> {
        let mut opt = AdamW::new(cfg, &self.params);
        if let Some((step, m, v)) = &self.moments {
            let sizes: Vec<usize> = self.params.iter().map(|(_, _, t)| t.numel()).collect();
            let fits = |x: &Vec<Vec<f64>>| x.len() == sizes.len() && x.iter().zip(&sizes).all(|(a, &n)| a.len() == n);
            if !fits(m) || !fits(v) {
                return Err(AppError::Config("optimizer moments do not match the parameters".into()));
            }
            opt.step = *step;
            opt.m = m.clone();
            opt.v = v.clone();
        }
        Ok(opt)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let params = self
            .params
            .iter()
            .map(|(_, path, t)| {
                let e = Entry {
                    path: path.to_string(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.numel();
                e
            })
            .collect();
        let header = Header {
            model: self.model.clone(),
            state: self.state.clone(),
            optimizer_step: self.moments.as_ref().map(|m| m.0),
            params,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + offset * 8 * 3);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |xs: &[f64]| xs.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        for (_, _, t) in self.params.iter() {
            put(t.data());
        }
        if let Some((_, m, v)) = &self.moments {
            m.iter().chain(v).for_each(|x| put(x));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> AppResult<Self> {
        let bad = |reason: String| AppError::Checkpoint {
            path: origin.to_path_buf(),
            reason,
        };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + len).ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
        let mut floats = bytes[20 + len..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let total: usize = header.params.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        let expected = total * if header.optimizer_step.is_some() { 3 } else { 1 };
        if (bytes.len() - 20 - len) != expected * 8 {
            return Err(bad(format!("expected {} data values, found {}", expected, (bytes.len() - 20 - len) / 8)));
        }
        let mut params = ParamStore::new();
        for e in &header.params {
            let n = e.shape.iter().product();
            let data: Vec<f64> = floats.by_ref().take(n).collect();
            if params.find(&e.path).is_some() {
                return Err(bad(format!("duplicate parameter `{}`", e.path)));
            }
            params.insert(e.path.clone(), Tensor::new(e.shape.clone(), data)?);
        }
        let moments = header.optimizer_step.map(|step| {
            let mut take = || -> Vec<Vec<f64>> {
                header
                    .params
                    .iter()
                    .map(|e| floats.by_ref().take(e.shape.iter().product()).collect())
                    .collect()
            };
            let m = take();
            let v = take();
            (step, m, v)
        });
        Ok(Self {
            model: header.model,
            state: header.state,
            params,
            moments,
        })
    }

    /// Writes via a temporary sibling and a rename, so readers never see a partial file.
    pub fn save(&self, path: &Path) -> AppResult<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| AppError::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| AppError::io(&tmp, e))?;
        f.sync_all().map_err(|e| AppError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| AppError::io(path, e))
    }

    pub fn load(path: &Path) -> AppResult<Self> {
        let bytes = fs::read(path).map_err(|e| AppError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// `latest.ckpt`, `best.ckpt` and `step-XXXXXX.ckpt` inside one directory.
#[derive(Clone, Debug)]
pub struct CheckpointDir(pub PathBuf);

impl CheckpointDir {
    pub fn latest(&self) -> PathBuf {
        self.0.join("latest.ckpt")
    }

    pub fn best(&self) -> PathBuf {
        self.0.join("best.ckpt")
    }

    pub fn archive(&self, step: u64) -> PathBuf {
        self.0.join(format!("step-{step:06}.ckpt"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_garbage_and_truncation() {
        let p = Path::new("x.ckpt");
        assert!(Checkpoint::from_bytes(b"hello", p).is_err());
        let net = SingleConvBaseline::new(1);
        let bytes = Checkpoint::capture(&net, None, &TrainState::default()).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8], p).is_err());
        let mut wrong = bytes.clone();
        wrong[8] = 9;
        assert!(Checkpoint::from_bytes(&wrong, p).is_err());
    }

    #[test]
    fn baseline_round_trip() {
        let net = SingleConvBaseline::new(3);
        let opt = AdamW::new(AdamWConfig::default(), net.params());
        let state = TrainState {
            step: 7,
            best_iou: Some(0.25),
            best_step: Some(5),
        };
        let c = Checkpoint::capture(&net, Some(&opt), &state);
        let back = Checkpoint::from_bytes(&c.to_bytes(), Path::new("x")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), c.to_bytes());
    }
}
