//! Versioned checkpoint format: student and teacher parameters, optimizer
//! moments, RNG state, and the resolved configuration, serialized as JSON
//! (f64 values round-trip exactly).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;
use crate::trainer::{AdamW, Trainer};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamBlob {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoreBlob {
    pub params: Vec<ParamBlob>,
}

impl StoreBlob {
    pub fn from_store(store: &ParamStore) -> Self {
        let params = store
            .ids()
            .map(|id| {
                let p = store.get(id);
                ParamBlob {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    values: p.value.data().to_vec(),
                }
            })
            .collect();
        StoreBlob { params }
    }

    /// Writes values into an identically structured store.
    pub fn load_into(&self, store: &mut ParamStore, what: &str) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::data(
                what,
                format!("{} parameters stored, model has {}", self.params.len(), store.len()),
            ));
        }
        let ids: Vec<_> = store.ids().collect();
        for (blob, id) in self.params.iter().zip(ids) {
            let param = store.get(id);
            if param.name != blob.name || param.value.shape() != blob.shape.as_slice() {
                return Err(Error::data(
                    what,
                    format!(
                        "parameter mismatch: stored {} {:?}, model {} {:?}",
                        blob.name,
                        blob.shape,
                        param.name,
                        param.value.shape()
                    ),
                ));
            }
            store.set_value(id, Tensor::new(blob.shape.clone(), blob.values.clone())?);
        }
        Ok(())
    }

    fn to_tensors(&self) -> Result<Vec<Tensor>> {
        self.params
            .iter()
            .map(|b| Tensor::new(b.shape.clone(), b.values.clone()))
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub step: usize,
    pub config: RunConfig,
    pub rng: RngState,
    pub student: StoreBlob,
    pub teacher: StoreBlob,
    pub opt_first: StoreBlob,
    pub opt_second: StoreBlob,
    pub opt_steps: usize,
}

impl Checkpoint {
    pub fn from_trainer(trainer: &Trainer) -> Self {
        let moment_blob = |tensors: &[Tensor], store: &ParamStore| StoreBlob {
            params: store
                .ids()
                .zip(tensors.iter())
                .map(|(id, t)| ParamBlob {
                    name: store.get(id).name.clone(),
                    shape: t.shape().to_vec(),
                    values: t.data().to_vec(),
                })
                .collect(),
        };
        Checkpoint {
            version: CHECKPOINT_VERSION,
            step: trainer.step,
            config: trainer.cfg.clone(),
            rng: trainer.root_rng,
            student: StoreBlob::from_store(&trainer.student),
            teacher: StoreBlob::from_store(&trainer.teacher),
            opt_first: moment_blob(&trainer.optimizer.first, &trainer.student),
            opt_second: moment_blob(&trainer.optimizer.second, &trainer.student),
            opt_steps: trainer.optimizer.steps,
        }
    }

    pub fn into_trainer(self) -> Result<Trainer> {
        let mut trainer = Trainer::new(self.config.clone())?;
        self.student.load_into(&mut trainer.student, "checkpoint.student")?;
        self.teacher.load_into(&mut trainer.teacher, "checkpoint.teacher")?;
        trainer.optimizer = AdamW {
            first: self.opt_first.to_tensors()?,
            second: self.opt_second.to_tensors()?,
            steps: self.opt_steps,
        };
        trainer.root_rng = self.rng;
        trainer.step = self.step;
        Ok(trainer)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)
            .map_err(|e| Error::data(path.display().to_string(), e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let cp: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::data(path.display().to_string(), e.to_string()))?;
        if cp.version != CHECKPOINT_VERSION {
            return Err(Error::data(
                path.display().to_string(),
                format!("checkpoint version {} unsupported (want {})", cp.version, CHECKPOINT_VERSION),
            ));
        }
        Ok(cp)
    }
}
