//! Weight-sharing supernet over a region: one shared store of operation
//! tensors, masked evaluation of member architectures, single-path or
//! mixture training, and parent-to-child weight transfer.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SplitId};
use crate::error::{Error, Result};
use crate::net::{IoDims, Matrix, NetworkDef};
use crate::optim::{self, AlphaAdam, OptState, TrainHyper};
use crate::rng;
use crate::space::{Architecture, Region};
use crate::store::{self, WdMode, WeightStore};

/// How a supernet is trained: one uniformly sampled path per minibatch, or
/// the full softmax-weighted mixture with interleaved alpha steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    SinglePath,
    Mixture,
}

/// Mixture logits and their optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    pub alpha: Vec<Vec<f32>>,
    pub opt: AlphaAdam,
}

impl MixtureParams {
    fn uniform(region: &Region) -> Self {
        let alpha: Vec<Vec<f32>> = region
            .allowed_all()
            .iter()
            .map(|ops| vec![0.0; ops.len()])
            .collect();
        let opt = AlphaAdam::new(&alpha);
        Self { alpha, opt }
    }
}

/// Number of paths averaged for the single-path validation loss.
pub const VAL_PATHS: usize = 64;

#[derive(Debug, Clone)]
pub struct Supernet {
    region: Region,
    dims: IoDims,
    master_seed: u64,
    weights: WeightStore,
    opt: OptState,
    mixture: Option<MixtureParams>,
    wd_modes: BTreeMap<String, WdMode>,
    trained_epochs: usize,
    val_loss: Option<f64>,
}

impl Supernet {
    /// Fresh supernet: tensors initialized from streams keyed by tensor
    /// name, so siblings sharing a tensor start bit-identical under the
    /// same seed. Mixture mode starts alpha at zero (uniform coefficients).
    pub fn init(region: Region, dims: IoDims, seed: u64, mode: TrainMode) -> Self {
        let specs = store::specs_for(region.space(), dims, region.allowed_all());
        let weights = store::init_store(&specs, seed);
        let wd_modes = specs.iter().map(|s| (s.name.clone(), s.wd)).collect();
        let mixture = match mode {
            TrainMode::Mixture => Some(MixtureParams::uniform(&region)),
            TrainMode::SinglePath => None,
        };
        Self {
            region,
            dims,
            master_seed: seed,
            weights,
            opt: OptState::new(),
            mixture,
            wd_modes,
            trained_epochs: 0,
            val_loss: None,
        }
    }

    /// Rebuild from checkpointed parts, validating against the region's
    /// tensor layout.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        region: Region,
        dims: IoDims,
        master_seed: u64,
        weights: WeightStore,
        opt: OptState,
        mixture: Option<MixtureParams>,
        trained_epochs: usize,
        val_loss: Option<f64>,
    ) -> Result<Self> {
        let specs = store::specs_for(region.space(), dims, region.allowed_all());
        if weights.len() != specs.len() {
            return Err(Error::InvalidConfig(format!(
                "weight store holds {} tensors, region needs {}",
                weights.len(),
                specs.len()
            )));
        }
        for spec in &specs {
            weights.expect(&spec.name, &spec.shape)?;
        }
        for (name, buf) in opt.buffers() {
            let w = weights
                .get(name)
                .ok_or_else(|| Error::MissingTensor { name: name.clone() })?;
            if w.shape != buf.shape {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: w.shape.clone(),
                    got: buf.shape.clone(),
                });
            }
        }
        if let Some(m) = &mixture {
            let allowed = region.allowed_all();
            if m.alpha.len() != allowed.len()
                || m.alpha.iter().zip(allowed).any(|(a, s)| a.len() != s.len())
            {
                return Err(Error::InvalidConfig(
                    "mixture alpha does not align with the region".into(),
                ));
            }
        }
        let wd_modes = specs.iter().map(|s| (s.name.clone(), s.wd)).collect();
        Ok(Self {
            region,
            dims,
            master_seed,
            weights,
            opt,
            mixture,
            wd_modes,
            trained_epochs,
            val_loss,
        })
    }

    pub fn region(&self) -> &Region {
        &self.region
    }

    pub fn dims(&self) -> IoDims {
        self.dims
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn weights(&self) -> &WeightStore {
        &self.weights
    }

    pub fn opt_state(&self) -> &OptState {
        &self.opt
    }

    pub fn mixture(&self) -> Option<&MixtureParams> {
        self.mixture.as_ref()
    }

    pub fn alpha(&self) -> Option<&[Vec<f32>]> {
        self.mixture.as_ref().map(|m| m.alpha.as_slice())
    }

    pub fn trained_epochs(&self) -> usize {
        self.trained_epochs
    }

    pub fn val_loss(&self) -> Option<f64> {
        self.val_loss
    }

    pub fn mode(&self) -> TrainMode {
        if self.mixture.is_some() {
            TrainMode::Mixture
        } else {
            TrainMode::SinglePath
        }
    }

    /// Accuracy of one member architecture on a split, through the shared
    /// weights with every other op masked out. Read-only.
    pub fn mask_eval(&self, arch: &Architecture, ds: &Dataset, split: SplitId) -> Result<f64> {
        if !self.region.contains(arch)? {
            return Err(Error::OutOfRegion {
                encoding: arch.encode(),
            });
        }
        let def = NetworkDef::masked(arch, self.dims);
        let s = ds.split(split);
        def.accuracy(&self.weights, &s.inputs, &s.labels)
    }

    /// Masked cross-entropy of one member architecture on a split.
    pub fn mask_loss(&self, arch: &Architecture, ds: &Dataset, split: SplitId) -> Result<f64> {
        if !self.region.contains(arch)? {
            return Err(Error::OutOfRegion {
                encoding: arch.encode(),
            });
        }
        let def = NetworkDef::masked(arch, self.dims);
        let s = ds.split(split);
        def.loss(&self.weights, &s.inputs, &s.labels)
    }

    /// Train for `hyper.epochs` more epochs of a schedule ending when they
    /// do: the cosine horizon covers epochs already trained plus this call.
    /// Resuming a longer schedule midway goes through [`Supernet::train_to`]
    /// for the first leg; after that the default horizon lines up again
    /// (asking for the remaining epochs of an N-epoch schedule at
    /// trained_epochs = M spans M + remaining = N).
    pub fn train(&mut self, ds: &Dataset, hyper: &TrainHyper, mode: TrainMode) -> Result<()> {
        let total = self.trained_epochs + hyper.epochs;
        self.train_to(ds, hyper, mode, total)
    }

    /// Train `hyper.epochs` more epochs as a leg of a `schedule_epochs`-long
    /// cosine schedule. Splitting one schedule across calls this way
    /// reproduces the single-call trajectory bit-exactly. Records the
    /// validation loss at the end of the call.
    pub fn train_to(
        &mut self,
        ds: &Dataset,
        hyper: &TrainHyper,
        mode: TrainMode,
        schedule_epochs: usize,
    ) -> Result<()> {
        hyper.validate(ds.train.len())?;
        if schedule_epochs < self.trained_epochs + hyper.epochs {
            return Err(Error::InvalidConfig(format!(
                "schedule of {schedule_epochs} epochs cannot hold {} trained plus {} more",
                self.trained_epochs, hyper.epochs
            )));
        }
        match (mode, &self.mixture) {
            (TrainMode::Mixture, None) => {
                return Err(Error::InvalidConfig(
                    "mixture training requested on a single-path supernet".into(),
                ))
            }
            (TrainMode::SinglePath, Some(_)) => {
                return Err(Error::InvalidConfig(
                    "single-path training requested on a mixture supernet".into(),
                ))
            }
            _ => {}
        }
        let steps_per_epoch = ds.train.len() / hyper.batch_size;
        let start = self.trained_epochs;
        let horizon = schedule_epochs * steps_per_epoch;

        for e in 0..hyper.epochs {
            let epoch = start + e;
            let perm = {
                let mut rng = rng::stream(self.master_seed, &format!("shuffle/e{epoch}"));
                let mut perm: Vec<usize> = (0..ds.train.len()).collect();
                perm.shuffle(&mut rng);
                perm
            };
            match mode {
                TrainMode::SinglePath => {
                    self.epoch_single_path(ds, hyper, &perm, epoch, steps_per_epoch, horizon)?
                }
                TrainMode::Mixture => {
                    self.epoch_mixture(ds, hyper, &perm, epoch, steps_per_epoch, horizon)?
                }
            }
        }
        self.trained_epochs += hyper.epochs;
        self.val_loss = Some(self.compute_val_loss(ds)?);
        Ok(())
    }

    fn epoch_single_path(
        &mut self,
        ds: &Dataset,
        hyper: &TrainHyper,
        perm: &[usize],
        epoch: usize,
        steps_per_epoch: usize,
        horizon: usize,
    ) -> Result<()> {
        let mut path_rng = rng::stream(self.master_seed, &format!("path/e{epoch}"));
        for step in 0..steps_per_epoch {
            let (x, y) = batch(&ds.train.inputs, &ds.train.labels, perm, step, hyper.batch_size);
            let arch = self.region.sample(&mut path_rng);
            let def = NetworkDef::masked(&arch, self.dims);
            let (loss, grads) = def.loss_and_grad(&self.weights, &x, &y)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, step });
            }
            let lr = optim::cosine_lr(hyper.lr0, epoch * steps_per_epoch + step, horizon);
            optim::sgd_apply(
                &mut self.weights,
                &mut self.opt,
                &grads.tensors,
                &self.wd_modes,
                lr,
                hyper.momentum,
                hyper.weight_decay,
            )?;
        }
        Ok(())
    }

    fn epoch_mixture(
        &mut self,
        ds: &Dataset,
        hyper: &TrainHyper,
        perm: &[usize],
        epoch: usize,
        steps_per_epoch: usize,
        horizon: usize,
    ) -> Result<()> {
        // Validation batches for the alpha steps, reshuffled per epoch and
        // cycled when the split is shorter than the epoch.
        let val_perm = {
            let mut rng = rng::stream(self.master_seed, &format!("alpha-shuffle/e{epoch}"));
            let mut perm: Vec<usize> = (0..ds.valid.len()).collect();
            perm.shuffle(&mut rng);
            perm
        };
        let val_batches = (ds.valid.len() / hyper.batch_size).max(1);
        let val_bs = hyper.batch_size.min(ds.valid.len());

        for step in 0..steps_per_epoch {
            // W-step through the mixture on a training batch.
            let (x, y) = batch(&ds.train.inputs, &ds.train.labels, perm, step, hyper.batch_size);
            let alpha = self.mixture.as_ref().unwrap().alpha.clone();
            let def = NetworkDef::mixture(&self.region, &alpha, self.dims)?;
            let (loss, grads) = def.loss_and_grad(&self.weights, &x, &y)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, step });
            }
            let lr = optim::cosine_lr(hyper.lr0, epoch * steps_per_epoch + step, horizon);
            optim::sgd_apply(
                &mut self.weights,
                &mut self.opt,
                &grads.tensors,
                &self.wd_modes,
                lr,
                hyper.momentum,
                hyper.weight_decay,
            )?;

            // First-order alpha step on a validation batch; W frozen.
            let (vx, vy) = batch(
                &ds.valid.inputs,
                &ds.valid.labels,
                &val_perm,
                step % val_batches,
                val_bs,
            );
            let alpha = self.mixture.as_ref().unwrap().alpha.clone();
            let def = NetworkDef::mixture(&self.region, &alpha, self.dims)?;
            let (vloss, vgrads) = def.loss_and_grad(&self.weights, &vx, &vy)?;
            if !vloss.is_finite() {
                return Err(Error::Divergence { epoch, step });
            }
            let galpha = vgrads.alpha.expect("mixture network yields alpha grads");
            let m = self.mixture.as_mut().unwrap();
            m.opt.step(&mut m.alpha, &galpha);
        }
        Ok(())
    }

    /// Validation loss: mixture cross-entropy on the full valid split in
    /// mixture mode; the mean masked cross-entropy of VAL_PATHS uniformly
    /// sampled paths (stream "valpaths") in single-path mode.
    pub fn compute_val_loss(&self, ds: &Dataset) -> Result<f64> {
        match &self.mixture {
            Some(m) => {
                let def = NetworkDef::mixture(&self.region, &m.alpha, self.dims)?;
                def.loss(&self.weights, &ds.valid.inputs, &ds.valid.labels)
            }
            None => {
                let mut rng = rng::stream(self.master_seed, "valpaths");
                let mut total = 0.0f64;
                for _ in 0..VAL_PATHS {
                    let arch = self.region.sample(&mut rng);
                    let def = NetworkDef::masked(&arch, self.dims);
                    total += def.loss(&self.weights, &ds.valid.inputs, &ds.valid.labels)?;
                }
                Ok(total / VAL_PATHS as f64)
            }
        }
    }

    /// Child supernet inheriting every tensor it shares with the parent
    /// (bit-exact copies). Alpha entries for surviving ops are carried
    /// over per edge; optimizer state, epoch count, and validation loss
    /// reset; the parent is untouched.
    pub fn transfer_from(parent: &Supernet, child_region: Region, seed: u64) -> Result<Supernet> {
        if !child_region.is_subset_of(parent.region())? {
            return Err(Error::RegionMismatch(format!(
                "child region {:?} is not a subset of the parent's",
                child_region.allowed_all()
            )));
        }
        let specs = store::specs_for(child_region.space(), parent.dims, child_region.allowed_all());
        let mut weights = WeightStore::new();
        for spec in &specs {
            let t = parent.weights.expect(&spec.name, &spec.shape)?;
            weights.insert(spec.name.clone(), t.clone());
        }
        let mixture = match &parent.mixture {
            Some(pm) => {
                let alpha: Vec<Vec<f32>> = child_region
                    .allowed_all()
                    .iter()
                    .zip(parent.region.allowed_all())
                    .zip(&pm.alpha)
                    .map(|((child_ops, parent_ops), pa)| {
                        child_ops
                            .iter()
                            .map(|op| {
                                let pos = parent_ops
                                    .iter()
                                    .position(|p| p == op)
                                    .expect("subset already verified");
                                pa[pos]
                            })
                            .collect()
                    })
                    .collect();
                let opt = AlphaAdam::new(&alpha);
                Some(MixtureParams { alpha, opt })
            }
            None => None,
        };
        let wd_modes = specs.iter().map(|s| (s.name.clone(), s.wd)).collect();
        Ok(Supernet {
            region: child_region,
            dims: parent.dims,
            master_seed: seed,
            weights,
            opt: OptState::new(),
            mixture,
            wd_modes,
            trained_epochs: 0,
            val_loss: None,
        })
    }
}

/// Gather minibatch `step` of the permutation.
fn batch(
    inputs: &Matrix,
    labels: &[usize],
    perm: &[usize],
    step: usize,
    batch_size: usize,
) -> (Matrix, Vec<usize>) {
    let idx = &perm[step * batch_size..(step + 1) * batch_size];
    let x = inputs.gather_rows(idx);
    let y = idx.iter().map(|&i| labels[i]).collect();
    (x, y)
}
