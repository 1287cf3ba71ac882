//! Anchored local update: cluster, build the centroid anchor, run masked
//! proximal mini-batch SGD, then re-cluster for communication.

mod objective;

use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Samples;
use crate::error::{Error, Result};
use crate::params::{LayerLayout, ParamVector, PruneMask};
use crate::pushsum::PushSumState;
use crate::rng::{mix_seed, stream, tag};
use crate::wcp::{wcp_encode, AssignmentMap, CentroidTable, Encoded, ValueWidth, WcpConfig};

pub use objective::{LeastSquares, Mlp, Objective, Softmax};

/// Relative slack on the per-step inequalities, covering rounding in the
/// norms themselves.
const CHECK_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub lr: f64,
    /// Weight of the centroid proximal term.
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub clusters: usize,
    pub lloyd_iters: usize,
    pub value_bits: ValueWidth,
    /// Overwrite the model with its quantization before training, not only
    /// after.
    pub quantize_before_training: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            lambda: 0.1,
            epochs: 1,
            batch_size: 20,
            clusters: 32,
            lloyd_iters: 20,
            value_bits: ValueWidth::B32,
            quantize_before_training: true,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("regularization weight {} must be non-negative", self.lambda)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be at least 1".into()));
        }
        crate::wcp::validate_k(self.clusters)?;
        if self.lloyd_iters == 0 {
            return Err(Error::Config("Lloyd iterations must be at least 1".into()));
        }
        Ok(())
    }

    pub fn wcp(&self) -> WcpConfig {
        WcpConfig { k: self.clusters, t_max: self.lloyd_iters, width: self.value_bits }
    }

    /// Describes how the step size breaks `η ≤ min{1/(8LE), 1/(4λ)}`, if it
    /// does. `smoothness` is an estimate of `L`.
    pub fn stepsize_warning(&self, smoothness: Option<f64>) -> Option<String> {
        let mut limit = f64::INFINITY;
        if let Some(l) = smoothness.filter(|l| *l > 0.0) {
            limit = limit.min(1.0 / (8.0 * l * self.epochs as f64));
        }
        if self.lambda > 0.0 {
            limit = limit.min(1.0 / (4.0 * self.lambda));
        }
        (self.lr > limit).then(|| {
            format!(
                "step size {} exceeds the stable limit {limit:.3e} (L={}, E={}, λ={})",
                self.lr,
                smoothness.map_or("unknown".to_string(), |l| format!("{l:.3e}")),
                self.epochs,
                self.lambda
            )
        })
    }
}

/// Decodes assignments against the dictionary on compressible layers and
/// copies every other layer from `current`.
pub fn build_anchor(g: &CentroidTable, a: &AssignmentMap, current: &ParamVector) -> Result<ParamVector> {
    let layout = Arc::clone(current.layout());
    if g.num_layers() != layout.num_compressible() || a.layers().len() != layout.num_compressible() {
        return Err(Error::LayoutMismatch(format!(
            "dictionary covers {} layers and assignments {}, model has {} compressible layers",
            g.num_layers(),
            a.layers().len(),
            layout.num_compressible()
        )));
    }
    let mut anchor = current.clone();
    for (slot, layer) in layout.compressible().enumerate() {
        let table = g.layer(slot);
        let assign = a.layer(slot);
        let target = anchor.layer_mut(layer);
        if assign.len() != target.len() {
            return Err(Error::LayoutMismatch(format!(
                "layer {layer}: {} assignments for {} weights",
                assign.len(),
                target.len()
            )));
        }
        for (t, idx) in target.iter_mut().zip(assign) {
            *t = *table
                .get(*idx as usize)
                .ok_or_else(|| Error::LayoutMismatch(format!("assignment {idx} ≥ K={}", table.len())))?;
        }
    }
    Ok(anchor)
}

/// What the per-step checks saw during one run of local epochs.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepChecks {
    pub steps: usize,
    /// Steps at which the anchor-contraction inequality was evaluated
    /// (requires `λ > 0` and `ηλ ≤ 1/2`).
    pub contraction_checked: usize,
    /// Largest `lhs / rhs` of the contraction inequality.
    pub max_contraction_ratio: f64,
    /// `‖w_end − w_start‖²` over the SGD phase.
    pub drift_sq: f64,
    /// `S·η²·Σ‖g + 2λ(w − w̃)‖²` with `S` the number of steps.
    pub drift_bound: f64,
    pub mean_loss: f64,
}

#[derive(Debug, Clone)]
pub struct UpdateOutcome {
    /// Post-training encoding that goes on the wire.
    pub encoded: Encoded,
    pub anchor: ParamVector,
    /// Model after SGD minus model before the update.
    pub drift: ParamVector,
    pub checks: StepChecks,
}

/// The full anchored update on `state.model`. The dictionary is read, never
/// written; the mask is replaced by the one from the final encoding.
pub fn local_update(
    state: &mut PushSumState,
    objective: &dyn Objective,
    data: &Samples,
    cfg: &TrainerConfig,
    seed: u64,
) -> Result<UpdateOutcome> {
    cfg.validate()?;
    let wcp = cfg.wcp();
    let before = state.model.clone();
    let mut w = state.model.clone();
    let initial = wcp_encode(&mut w, &wcp, Some(&state.dictionary), mix_seed(seed, &[tag::WCP, 0]))?;
    if !cfg.quantize_before_training {
        w = before.clone();
    }
    let anchor = build_anchor(&state.dictionary, &initial.payload.assignments, &w)?;
    let checks = run_epochs(objective, data, &mut w, &initial.mask, Some(&anchor), cfg, seed)?;
    let drift = w.sub(&before)?;
    let encoded = wcp_encode(&mut w, &wcp, Some(&state.dictionary), mix_seed(seed, &[tag::WCP, 1]))?;
    state.model = w;
    state.mask = encoded.mask.clone();
    Ok(UpdateOutcome { encoded, anchor, drift, checks })
}

/// Unregularized, unmasked SGD used by the uncompressed baselines.
pub fn plain_update(
    model: &mut ParamVector,
    objective: &dyn Objective,
    data: &Samples,
    cfg: &TrainerConfig,
    seed: u64,
) -> Result<StepChecks> {
    cfg.validate()?;
    let mask = PruneMask::all(Arc::clone(model.layout()), true);
    run_epochs(objective, data, model, &mask, None, cfg, seed)
}

/// `E` shuffled passes of mini-batch SGD on `f(w) + λ‖w − w̃‖²`, projecting
/// onto the mask after every step. Without an anchor the proximal term is
/// dropped.
pub fn run_epochs(
    objective: &dyn Objective,
    data: &Samples,
    w: &mut ParamVector,
    mask: &PruneMask,
    anchor: Option<&ParamVector>,
    cfg: &TrainerConfig,
    seed: u64,
) -> Result<StepChecks> {
    if data.is_empty() {
        return Err(Error::Config("client has no training samples".into()));
    }
    let layout: &Arc<LayerLayout> = objective.layout();
    if **w.layout() != **layout || **mask.layout() != **layout {
        return Err(Error::LayoutMismatch("model, mask and objective disagree".into()));
    }
    if let Some(a) = anchor {
        a.same_layout(w)?;
    }
    let eta = cfg.lr;
    let lambda = if anchor.is_some() { cfg.lambda } else { 0.0 };
    let check_contraction = anchor.is_some() && lambda > 0.0 && eta * lambda <= 0.5;
    let bits = mask.bits();
    let start: Vec<f64> = w.values().iter().zip(bits).map(|(v, keep)| if *keep { *v } else { 0.0 }).collect();

    let mut rng = stream(seed, &[tag::TRAIN]);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let n = w.len();
    let mut grad = vec![0.0; n];
    let mut checks = StepChecks::default();
    let mut step_norms_sq = 0.0;
    let mut loss_sum = 0.0;

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let loss = objective.loss_grad(w.values(), data, batch, Some(&mut grad))?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!("loss or gradient at local step {}", checks.steps)));
            }
            loss_sum += loss;
            let g_sq: f64 = grad.iter().map(|g| g * g).sum();
            let mut u_sq = 0.0;
            let mut u_next_sq = 0.0;
            let mut d_sq = 0.0;
            let values = w.values_mut();
            for j in 0..n {
                let pull = anchor.map_or(0.0, |a| values[j] - a.values()[j]);
                let d = grad[j] + 2.0 * lambda * pull;
                d_sq += d * d;
                u_sq += pull * pull;
                values[j] = if bits[j] { values[j] - eta * d } else { 0.0 };
                if let Some(a) = anchor {
                    let u = values[j] - a.values()[j];
                    u_next_sq += u * u;
                }
            }
            step_norms_sq += d_sq;
            checks.steps += 1;
            if check_contraction {
                let rhs = (1.0 - eta * lambda) * u_sq + (eta / lambda) * g_sq;
                checks.contraction_checked += 1;
                if rhs > 0.0 {
                    checks.max_contraction_ratio = checks.max_contraction_ratio.max(u_next_sq / rhs);
                }
                if u_next_sq > rhs * (1.0 + CHECK_SLACK) + f64::MIN_POSITIVE {
                    return Err(Error::Invariant(format!(
                        "anchor contraction fails at local step {}: {u_next_sq:e} > {rhs:e}",
                        checks.steps
                    )));
                }
            }
        }
    }
    w.ensure_finite("model after local training")?;

    checks.drift_sq = w.values().iter().zip(&start).map(|(a, b)| (a - b) * (a - b)).sum();
    checks.drift_bound = checks.steps as f64 * eta * eta * step_norms_sq;
    checks.mean_loss = loss_sum / checks.steps as f64;
    if checks.drift_sq > checks.drift_bound * (1.0 + CHECK_SLACK) + f64::MIN_POSITIVE {
        return Err(Error::Invariant(format!(
            "local drift {:e} exceeds its bound {:e}",
            checks.drift_sq, checks.drift_bound
        )));
    }
    Ok(checks)
}

/// Regularized objective `f(w) + λ‖w − w̃‖²` on the given rows.
pub fn regularized_loss(
    objective: &dyn Objective,
    w: &[f64],
    anchor: &[f64],
    lambda: f64,
    data: &Samples,
    rows: &[usize],
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    let mut grad = grad;
    let f = objective.loss_grad(w, data, rows, grad.as_deref_mut())?;
    let mut reg = 0.0;
    for (j, (wj, aj)) in w.iter().zip(anchor).enumerate() {
        let d = wj - aj;
        reg += d * d;
        if let Some(g) = grad.as_deref_mut() {
            g[j] += 2.0 * lambda * d;
        }
    }
    Ok(f + lambda * reg)
}

/// Largest componentwise gap between the analytic gradient of the
/// regularized objective and central finite differences with step `1e-5`.
pub fn reg_gradient_check(
    objective: &dyn Objective,
    w: &ParamVector,
    anchor: &ParamVector,
    lambda: f64,
    data: &Samples,
) -> Result<f64> {
    const H: f64 = 1e-5;
    w.same_layout(anchor)?;
    let rows: Vec<usize> = (0..data.len()).collect();
    let mut analytic = vec![0.0; w.len()];
    regularized_loss(objective, w.values(), anchor.values(), lambda, data, &rows, Some(&mut analytic))?;
    let mut probe = w.values().to_vec();
    let mut worst = 0.0f64;
    for j in 0..probe.len() {
        let orig = probe[j];
        probe[j] = orig + H;
        let up = regularized_loss(objective, &probe, anchor.values(), lambda, data, &rows, None)?;
        probe[j] = orig - H;
        let down = regularized_loss(objective, &probe, anchor.values(), lambda, data, &rows, None)?;
        probe[j] = orig;
        worst = worst.max(((up - down) / (2.0 * H) - analytic[j]).abs());
    }
    Ok(worst)
}
