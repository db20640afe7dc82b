//! Adam, the training loop and checkpoints.

mod checkpoint;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cha::{AlignOptions, AlignmentWeights, Distance, Solver};
use crate::error::{Error, Result};
use crate::model::{Example, Model};
use crate::numerics::{Grads, ParamGroup, ParamStore, Rng, Tensor};
use crate::ot::{OtMode, SinkhornConfig};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_visual: f64,
    pub lr_model: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weights: AlignmentWeights,
    pub sinkhorn: SinkhornConfig,
    pub distance: Distance,
    pub solver: Solver,
    /// Global gradient norm ceiling.
    pub clip_norm: f64,
    /// Align unit-length feature rows.
    pub unit_features: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_visual: 1e-3,
            lr_model: 2e-3,
            epochs: 10,
            batch_size: 16,
            seed: 0,
            weights: AlignmentWeights::default(),
            sinkhorn: SinkhornConfig { mode: OtMode::Unbalanced, ..Default::default() },
            distance: Distance::default(),
            solver: Solver::default(),
            clip_norm: 5.0,
            unit_features: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_visual > 0.0 && self.lr_model > 0.0) {
            return Err(Error::Config("learning rates must be > 0".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be > 0".into()));
        }
        self.weights.validate()?;
        self.sinkhorn.validate()
    }

    pub fn align_options(&self) -> AlignOptions {
        AlignOptions { distance: self.distance, solver: self.solver, sinkhorn: self.sinkhorn, unit_features: self.unit_features }
    }

    fn rate(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Visual => self.lr_visual,
            ParamGroup::Model | ParamGroup::Text => self.lr_model,
        }
    }
}

pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;

/// Bias-corrected Adam update of one tensor; `t` is the 1-based step.
pub fn adam_step(param: &mut Tensor, grad: &Tensor, m: &mut Tensor, v: &mut Tensor, t: u64, lr: f64) {
    let (b1, b2) = ADAM_BETAS;
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    let it = param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
    for ((p, &g), (mi, vi)) in it {
        *mi = b1 * *mi + (1.0 - b1) * g;
        *vi = b2 * *vi + (1.0 - b2) * g * g;
        *p -= lr * (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
    }
}

/// First and second moments for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Adam {
        let Grads(m) = params.grads();
        Adam { step: 0, v: m.clone(), m }
    }

    /// One update of every trainable parameter, each group at its own rate.
    pub fn update(&mut self, params: &mut ParamStore, grads: &Grads, rate: impl Fn(ParamGroup) -> f64) {
        self.step += 1;
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            if !params.param(id).trainable {
                continue;
            }
            let lr = rate(params.group(id));
            let k = id.0;
            adam_step(params.value_mut(id), grads.get(id), &mut self.m[k], &mut self.v[k], self.step, lr);
        }
    }
}

/// L2 norm over the gradients of trainable parameters.
pub fn global_norm(params: &ParamStore, grads: &Grads) -> f64 {
    params
        .ids()
        .filter(|&id| params.param(id).trainable)
        .map(|id| grads.get(id).norm_sq())
        .sum::<f64>()
        .sqrt()
}

/// Rescale so the global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grads(params: &ParamStore, grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = global_norm(params, grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in &mut grads.0 {
            *g = g.scale(s);
        }
    }
    norm
}

/// Mean losses of one completed epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_ce: f64,
    pub l_p: f64,
    pub l_s: f64,
    pub l_w: f64,
    /// Weighted alignment term as optimized.
    pub l_align: f64,
    pub total: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("plain record") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<TrainLog> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(TrainLog { records })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochTiming {
    pub epoch: usize,
    pub wall_seconds: f64,
}

/// Optimizer state plus the number of completed epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub adam: Adam,
    pub epoch: usize,
}

impl TrainState {
    pub fn new(model: &Model) -> TrainState {
        TrainState { adam: Adam::new(&model.params), epoch: 0 }
    }
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = Rng::new(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order
}

/// Run `cfg.epochs` further epochs, continuing the numbering in `state`.
pub fn fit(
    model: &mut Model,
    data: &[Example],
    cfg: &TrainConfig,
    state: &mut TrainState,
) -> Result<(TrainLog, Vec<EpochTiming>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training corpus is empty".into()));
    }
    let opts = cfg.align_options();
    let mut log = TrainLog::default();
    let mut timings = Vec::new();
    for _ in 0..cfg.epochs {
        let epoch = state.epoch + 1;
        let started = Instant::now();
        let order = epoch_order(cfg.seed, epoch, data.len());
        let mut sums = [0.0; 6];
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads = model.params.grads();
            for &i in batch {
                let loss = model.sample_grads(&data[i], &cfg.weights, &opts, &mut grads)?;
                let total = loss.total();
                if !total.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite loss {total} at epoch {epoch}, batch {b}, sample {i}"
                    )));
                }
                let (l, align) = match &loss.alignment {
                    Some(r) => (r.losses(), r.total),
                    None => ([0.0; 3], 0.0),
                };
                for (s, v) in sums.iter_mut().zip([loss.ce, l[0], l[1], l[2], align, total]) {
                    *s += v;
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for g in &mut grads.0 {
                *g = g.scale(inv);
            }
            let norm = clip_grads(&model.params, &mut grads, cfg.clip_norm);
            if !norm.is_finite() {
                return Err(Error::Numerical(format!("non-finite gradient norm at epoch {epoch}, batch {b}")));
            }
            state.adam.update(&mut model.params, &grads, |g| cfg.rate(g));
        }
        let n = data.len() as f64;
        let [l_ce, l_p, l_s, l_w, l_align, total] = sums.map(|s| s / n);
        let rec = EpochRecord { epoch, l_ce, l_p, l_s, l_w, l_align, total, samples: data.len() };
        log::info!(
            "epoch {epoch}: ce {l_ce:.4} align {l_align:.4} (p {l_p:.4} s {l_s:.4} w {l_w:.4}) total {total:.4}"
        );
        log.records.push(rec);
        timings.push(EpochTiming { epoch, wall_seconds: started.elapsed().as_secs_f64() });
        state.epoch = epoch;
    }
    Ok((log, timings))
}
