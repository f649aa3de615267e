//! Training loop for gated edits: the joint objective (task cross-entropy
//! plus a weighted expected-L0 penalty), Adam on the edit parameters only,
//! an exponentially decaying learning-rate schedule with linear warmup,
//! early stopping on carved-out validation accuracy, gate-closure trajectory
//! logging, a built-in sparsity-weight sweep, and a two-stage select-then-
//! tune baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hardconcrete::{self, GateParams};
use crate::interventions::{
    prune, sample_gates, EditMode, FrozenMap, Gating, HeadEdit, InterventionMap, Site,
};
use crate::model::{xent_loss_and_grad, zero_grads, EditPlan, ModelConfig, Transformer};
use crate::numerics::RngStream;
use crate::tasks::{accuracy, batch_examples, Example, TaskSpec};

/// Which hook sites a run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteChoice {
    Attention,
    Mlp,
    Both,
}

impl std::fmt::Display for SiteChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SiteChoice::Attention => write!(f, "attention"),
            SiteChoice::Mlp => write!(f, "mlp"),
            SiteChoice::Both => write!(f, "both"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeUnit {
    Epoch,
    Step,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the expected-L0 penalty in the objective.
    pub lambda_sparsity: f64,
    pub lr0: f64,
    /// Geometric decay factor per schedule time unit.
    pub lr_geo: f64,
    /// Exponential decay rate per schedule time unit.
    pub lr_decay: f64,
    pub lr_time_unit: TimeUnit,
    /// Training span (in lr_time_unit) mapped onto one schedule time unit,
    /// so the run sweeps lr from lr0 down to roughly lr_geo * lr0. Defaults
    /// to the full run length. See the schedule notes on [`lr_at`].
    pub lr_horizon: Option<f64>,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Early stopping: evaluations without improvement before stopping.
    pub patience: usize,
    pub adam_eps: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub warmup_epochs: usize,
    pub epsilon_prune: f64,
    pub gating: Gating,
    pub mode: EditMode,
    pub site: SiteChoice,
    pub seed: u64,
    pub phi_init: f64,
    pub gate_beta: f64,
    pub gate_gamma: f64,
    pub gate_zeta: f64,
    /// Global gradient-norm clip; None disables.
    pub clip_norm: Option<f64>,
    /// Fraction of the train split carved off for early stopping.
    pub val_fraction: f64,
    pub eval_batch: usize,
    /// Log gate-trajectory rows every this many optimizer steps.
    pub trajectory_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_sparsity: 0.05,
            lr0: 5e-4,
            lr_geo: 0.1,
            lr_decay: 0.01,
            lr_time_unit: TimeUnit::Epoch,
            lr_horizon: None,
            batch_size: 16,
            max_epochs: 100,
            patience: 5,
            adam_eps: 1e-6,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            warmup_epochs: 1,
            epsilon_prune: 1e-3,
            gating: Gating::Separate,
            mode: EditMode::Hybrid,
            site: SiteChoice::Attention,
            seed: 42,
            phi_init: hardconcrete::DEFAULT_PHI_INIT,
            gate_beta: hardconcrete::DEFAULT_BETA,
            gate_gamma: hardconcrete::DEFAULT_GAMMA,
            gate_zeta: hardconcrete::DEFAULT_ZETA,
            clip_norm: Some(1.0),
            val_fraction: 0.2,
            eval_batch: 64,
            trajectory_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_sparsity < 0.0 {
            return Err(Error::Config("lambda_sparsity must be >= 0".into()));
        }
        if !(self.lr0 > 0.0) {
            return Err(Error::Config("lr0 must be > 0".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be >= 1".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config("val_fraction must lie in (0, 1)".into()));
        }
        if self.epsilon_prune < 0.0 {
            return Err(Error::Config("epsilon_prune must be >= 0".into()));
        }
        GateParams::new(self.phi_init, self.gate_beta, self.gate_gamma, self.gate_zeta)?;
        Ok(())
    }

    pub fn gate_shape(&self) -> GateParams {
        GateParams {
            phi: self.phi_init,
            beta: self.gate_beta,
            gamma: self.gate_gamma,
            zeta: self.gate_zeta,
        }
    }

    /// Fresh zero-edit maps covering every hook site the config trains.
    pub fn build_maps(&self, cfg: &ModelConfig) -> Result<Vec<InterventionMap>> {
        let shape = self.gate_shape();
        let mut maps = Vec::new();
        if matches!(self.site, SiteChoice::Attention | SiteChoice::Both) {
            let dh = cfg.d_head();
            let entries = (0..cfg.n_layers)
                .flat_map(|l| (0..cfg.n_heads).map(move |h| (l, h)))
                .map(|(l, h)| HeadEdit::zeros(l, h, dh, self.phi_init, &shape))
                .collect();
            maps.push(InterventionMap::new(
                Site::AttentionHead,
                self.gating,
                self.mode,
                dh,
                shape,
                entries,
            )?);
        }
        if matches!(self.site, SiteChoice::Mlp | SiteChoice::Both) {
            let entries = (0..cfg.n_layers)
                .map(|l| HeadEdit::zeros(l, 0, cfg.d_model, self.phi_init, &shape))
                .collect();
            maps.push(InterventionMap::new(
                Site::MlpOutput,
                self.gating,
                self.mode,
                cfg.d_model,
                shape,
                entries,
            )?);
        }
        Ok(maps)
    }
}

/// The schedule formula: lr(t) = lr0 * lr_geo^t * exp(-lr_decay * t), with t
/// measured from the end of warmup.
///
/// One schedule time unit spans the post-warmup training horizon (see
/// `lr_horizon`): taken literally per epoch, a 10x decay every epoch leaves
/// Adam too little total displacement to move any parameter more than a few
/// multiples of lr0, which freezes both the edit vectors and the gates.
pub fn lr_at(t: f64, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.lr_geo.powf(t) * (-cfg.lr_decay * t).exp()
}

/// Learning rate at `elapsed` time units into a run that spans `total`
/// units: linear ramp from 0 to lr(0) over the warmup, then the decay
/// formula over the remaining span normalized to one schedule unit.
pub fn effective_lr(elapsed: f64, total: f64, cfg: &TrainConfig) -> f64 {
    let warmup = cfg.warmup_epochs as f64;
    if warmup > 0.0 && elapsed < warmup {
        return lr_at(0.0, cfg) * (elapsed / warmup);
    }
    let horizon = cfg
        .lr_horizon
        .unwrap_or_else(|| (total - warmup).max(1.0));
    let t = ((elapsed - warmup) / horizon.max(1e-12)).max(0.0);
    lr_at(t, cfg)
}

/// Total objective: task loss plus the weighted expected-L0 penalty.
pub fn total_loss(xent: f64, maps: &[InterventionMap], lambda: f64) -> f64 {
    xent + lambda * maps.iter().map(|m| m.l0_penalty()).sum::<f64>()
}

/// One optimizer-step log line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub xent: f64,
    pub l0: f64,
    pub total: f64,
    pub frac_closed_a: f64,
    pub frac_closed_m: f64,
}

/// One evaluation log line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub split: String,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Record {
    Step(StepRecord),
    Eval(EvalRecord),
}

/// Per-head closed probabilities at one logged step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajRow {
    pub step: usize,
    pub layer: usize,
    pub head: usize,
    pub p_closed_a: f64,
    pub p_closed_m: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GateTrajectory {
    pub rows: Vec<TrajRow>,
}

impl GateTrajectory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,layer,head,p_closed_a,p_closed_m\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.step, r.layer, r.head, r.p_closed_a, r.p_closed_m
            ));
        }
        out
    }

    pub fn logged_steps(&self) -> Vec<usize> {
        let mut steps: Vec<usize> = self.rows.iter().map(|r| r.step).collect();
        steps.dedup();
        steps
    }

    pub fn rows_at(&self, step: usize) -> Vec<&TrajRow> {
        self.rows.iter().filter(|r| r.step == step).collect()
    }
}

/// Share of heads whose closed-probability exceeds one half.
pub fn fraction_closed(p_closed: &[f64]) -> f64 {
    if p_closed.is_empty() {
        return 0.0;
    }
    p_closed.iter().filter(|&&p| p > 0.5).count() as f64 / p_closed.len() as f64
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    /// Maps at the best recorded validation accuracy (sparsest on ties).
    pub maps: Vec<InterventionMap>,
    pub frozen: Vec<FrozenMap>,
    pub trajectory: GateTrajectory,
    pub records: Vec<Record>,
    pub best_val_accuracy: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub steps_run: usize,
    /// Size of the carved early-stopping split.
    pub dev_examples: usize,
}

impl TrainOutput {
    pub fn records_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serialization"));
            out.push('\n');
        }
        out
    }
}

/// Train fresh full maps as configured. See [`train_with_maps`].
pub fn train(model: &Transformer, task: &TaskSpec, cfg: &TrainConfig) -> Result<TrainOutput> {
    let maps = cfg.build_maps(model.cfg())?;
    train_with_maps(model, task, cfg, maps)
}

/// Train the given maps on the task's train split.
///
/// A `val_fraction` share of the train split is carved off (seeded) as the
/// early-stopping validation set; gates are sampled fresh every forward
/// pass, Adam (decoupled weight decay 0, eps from config) updates only the
/// edit parameters, and the returned maps are the snapshot at the best
/// validation accuracy, with lower penalty breaking ties.
pub fn train_with_maps(
    model: &Transformer,
    task: &TaskSpec,
    cfg: &TrainConfig,
    mut maps: Vec<InterventionMap>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    task.validate(model.cfg().vocab, model.cfg().max_seq)?;
    if task.train.is_empty() {
        return Err(Error::Invalid("task has no training examples".into()));
    }

    let root = RngStream::new(cfg.seed);

    // Carve the early-stopping split from the train pool.
    let mut order: Vec<usize> = (0..task.train.len()).collect();
    root.split("dev-carve").shuffle(&mut order);
    let n_dev = ((task.train.len() as f64 * cfg.val_fraction).ceil() as usize)
        .clamp(1, task.train.len() - 1);
    let mut dev_idx: Vec<usize> = order[..n_dev].to_vec();
    let mut train_idx: Vec<usize> = order[n_dev..].to_vec();
    dev_idx.sort_unstable();
    train_idx.sort_unstable();
    let dev: Vec<Example> = dev_idx.iter().map(|&i| task.train[i].clone()).collect();
    let train: Vec<Example> = train_idx.iter().map(|&i| task.train[i].clone()).collect();

    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_units = match cfg.lr_time_unit {
        TimeUnit::Epoch => cfg.max_epochs as f64,
        TimeUnit::Step => (cfg.max_epochs * steps_per_epoch) as f64,
    };

    let layout = ParamLayout::new(&maps);
    let mut adam = Adam::new(layout.len(), cfg);
    let mut gate_rng = root.split("gate-noise");

    let mut records: Vec<Record> = Vec::new();
    let mut trajectory = GateTrajectory::default();

    let mut best_maps = maps.clone();
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_l0 = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut evals_since_best = 0usize;
    let mut step = 0usize;
    let mut epochs_run = 0usize;

    'training: for epoch in 0..cfg.max_epochs {
        epochs_run = epoch + 1;
        let mut epoch_order: Vec<usize> = (0..train.len()).collect();
        root.split(&format!("shuffle-{epoch}")).shuffle(&mut epoch_order);

        for (step_in_epoch, chunk) in epoch_order.chunks(cfg.batch_size).enumerate() {
            let examples: Vec<Example> =
                chunk.iter().map(|&i| train[i].clone()).collect();
            let batch = batch_examples(&examples, model.cfg().vocab)?;

            let elapsed = match cfg.lr_time_unit {
                TimeUnit::Epoch => epoch as f64 + step_in_epoch as f64 / steps_per_epoch as f64,
                TimeUnit::Step => step as f64,
            };
            let lr = effective_lr(elapsed, total_units, cfg);

            let draws: Vec<_> = maps
                .iter()
                .map(|m| sample_gates(m, &mut gate_rng))
                .collect();
            let map_refs: Vec<&InterventionMap> = maps.iter().collect();
            let plan = EditPlan::from_maps(model.cfg(), &map_refs, &draws)?;
            let (logits, cache) = model.forward_train(&batch, &plan)?;
            let (xent, dlogits) = xent_loss_and_grad(&logits, &batch)?;
            let l0: f64 = maps.iter().map(|m| m.l0_penalty()).sum();
            let total = xent + cfg.lambda_sparsity * l0;
            if !total.is_finite() {
                return Err(Error::Diverged(format!(
                    "step {step}: xent {xent}, penalty {l0}"
                )));
            }

            let mut grads = zero_grads(&map_refs);
            model.backward(&cache, &plan, &dlogits, &mut grads);
            let mut flat = layout.flatten_grads(&maps, &grads, &draws, cfg.lambda_sparsity);
            if let Some(clip) = cfg.clip_norm {
                clip_global_norm(&mut flat, clip);
            }
            let (fca, fcm) = closed_fractions(&maps);
            if step % cfg.trajectory_every == 0 {
                push_trajectory(&mut trajectory, &maps, step);
            }
            records.push(Record::Step(StepRecord {
                step,
                epoch,
                lr,
                xent,
                l0,
                total,
                frac_closed_a: fca,
                frac_closed_m: fcm,
            }));

            let mut params = layout.flatten_params(&maps);
            adam.update(&mut params, &flat, lr);
            layout.write_params(&mut maps, &params)?;
            step += 1;
        }

        // Deterministic end-of-epoch evaluation with frozen expected gates.
        let frozen: Vec<FrozenMap> = maps.iter().map(|m| m.freeze()).collect();
        let frozen_refs: Vec<&FrozenMap> = frozen.iter().collect();
        let acc = accuracy(model, &frozen_refs, &dev, &task.answer_tokens, cfg.eval_batch)?;
        records.push(Record::Eval(EvalRecord {
            step,
            split: "dev".into(),
            accuracy: acc,
        }));

        let l0_now: f64 = maps.iter().map(|m| m.l0_penalty()).sum();
        let improved = acc > best_acc || (acc == best_acc && l0_now < best_l0 - 1e-12);
        if improved {
            best_maps = maps.clone();
            best_acc = acc;
            best_l0 = l0_now;
            best_epoch = epoch;
            evals_since_best = 0;
        } else {
            evals_since_best += 1;
            if evals_since_best >= cfg.patience {
                break 'training;
            }
        }
    }

    // Final trajectory snapshot at the last state.
    push_trajectory(&mut trajectory, &maps, step);

    let frozen = best_maps.iter().map(|m| m.freeze()).collect();
    Ok(TrainOutput {
        maps: best_maps,
        frozen,
        trajectory,
        records,
        best_val_accuracy: best_acc,
        best_epoch,
        epochs_run,
        steps_run: step,
        dev_examples: dev.len(),
    })
}

/// Accuracy of frozen maps on a labeled split.
pub fn evaluate(
    model: &Transformer,
    maps: &[&FrozenMap],
    examples: &[Example],
    answer_tokens: &[usize],
) -> Result<f64> {
    accuracy(model, maps, examples, answer_tokens, 64)
}

fn closed_fractions(maps: &[InterventionMap]) -> (f64, f64) {
    let mut pa = Vec::new();
    let mut pm = Vec::new();
    for map in maps {
        for e in &map.entries {
            let (ca, cm) = entry_closed(map, e);
            pa.push(ca);
            pm.push(cm);
        }
    }
    (fraction_closed(&pa), fraction_closed(&pm))
}

fn entry_closed(map: &InterventionMap, e: &HeadEdit) -> (f64, f64) {
    match map.gating {
        Gating::None => (0.0, 0.0),
        Gating::Shared => {
            let p = 1.0 - hardconcrete::prob_open(&e.gate_a);
            (p, p)
        }
        Gating::Separate => (
            1.0 - hardconcrete::prob_open(&e.gate_a),
            1.0 - hardconcrete::prob_open(&e.gate_m),
        ),
    }
}

/// Trajectory rows cover the attention map when present, otherwise the first
/// map (mlp-only runs log the per-layer mlp gates under head 0).
fn push_trajectory(traj: &mut GateTrajectory, maps: &[InterventionMap], step: usize) {
    let map = maps
        .iter()
        .find(|m| m.site == Site::AttentionHead)
        .or_else(|| maps.first());
    let Some(map) = map else { return };
    for e in &map.entries {
        let (ca, cm) = entry_closed(map, e);
        traj.rows.push(TrajRow {
            step,
            layer: e.layer,
            head: e.head,
            p_closed_a: ca,
            p_closed_m: cm,
        });
    }
}

fn clip_global_norm(grads: &mut [f64], clip: f64) {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > clip && norm > 0.0 {
        let scale = clip / norm;
        for g in grads.iter_mut() {
            *g *= scale;
        }
    }
}

/// Flat parameter layout over maps: per entry [phi_a?][phi_m?][m?][a?].
struct ParamLayout {
    /// Per map: (trains_phi_a, trains_phi_m, uses_m, uses_a, dim, entries).
    maps: Vec<(bool, bool, bool, bool, usize, usize)>,
    total: usize,
}

impl ParamLayout {
    fn new(maps: &[InterventionMap]) -> ParamLayout {
        let mut spec = Vec::new();
        let mut total = 0usize;
        for m in maps {
            let pa = m.trains_phi_a();
            let pm = m.trains_phi_m();
            let um = m.mode.uses_multiplicative();
            let ua = m.mode.uses_additive();
            let stride = pa as usize
                + pm as usize
                + if um { m.d_head } else { 0 }
                + if ua { m.d_head } else { 0 };
            total += stride * m.len();
            spec.push((pa, pm, um, ua, m.d_head, m.len()));
        }
        ParamLayout { maps: spec, total }
    }

    fn len(&self) -> usize {
        self.total
    }

    fn flatten_params(&self, maps: &[InterventionMap]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total);
        for (map, &(pa, pm, um, ua, dim, _)) in maps.iter().zip(&self.maps) {
            for e in &map.entries {
                if pa {
                    out.push(e.gate_a.phi);
                }
                if pm {
                    out.push(e.gate_m.phi);
                }
                if um {
                    out.extend_from_slice(&e.m);
                }
                if ua {
                    out.extend_from_slice(&e.a);
                }
                debug_assert_eq!(dim, e.m.len());
            }
        }
        out
    }

    fn write_params(&self, maps: &mut [InterventionMap], flat: &[f64]) -> Result<()> {
        let mut pos = 0usize;
        for (map, &(pa, pm, um, ua, dim, _)) in maps.iter_mut().zip(&self.maps) {
            for e in &mut map.entries {
                if pa {
                    e.gate_a.phi = flat[pos];
                    pos += 1;
                }
                if pm {
                    e.gate_m.phi = flat[pos];
                    pos += 1;
                }
                if um {
                    e.m.copy_from_slice(&flat[pos..pos + dim]);
                    pos += dim;
                }
                if ua {
                    e.a.copy_from_slice(&flat[pos..pos + dim]);
                    pos += dim;
                }
            }
        }
        if pos != flat.len() {
            return Err(Error::Dimension(format!(
                "parameter vector has {} values, layout expects {pos}",
                flat.len()
            )));
        }
        Ok(())
    }

    /// Combine model gradients, pathwise gate derivatives, and the penalty
    /// gradient into the flat layout. Shared gating folds both roles' gate
    /// gradients into the single location parameter.
    fn flatten_grads(
        &self,
        maps: &[InterventionMap],
        grads: &crate::model::MapGrads,
        draws: &[Vec<crate::interventions::GateDraw>],
        lambda: f64,
    ) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total);
        for ((map, mg), (dr, &(pa, pm, um, ua, _, _))) in maps
            .iter()
            .zip(grads.iter())
            .zip(draws.iter().zip(&self.maps))
        {
            for ((e, g), d) in map.entries.iter().zip(mg.iter()).zip(dr.iter()) {
                if pa {
                    let mut dphi = g.dg_a * d.dga_dphi;
                    if map.gating == Gating::Shared {
                        dphi += g.dg_m * d.dgm_dphi;
                    }
                    dphi += lambda * hardconcrete::prob_open_grad(&e.gate_a);
                    out.push(dphi);
                }
                if pm {
                    let dphi = g.dg_m * d.dgm_dphi
                        + lambda * hardconcrete::prob_open_grad(&e.gate_m);
                    out.push(dphi);
                }
                if um {
                    out.extend_from_slice(&g.dm);
                }
                if ua {
                    out.extend_from_slice(&g.da);
                }
            }
        }
        out
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(n: usize, cfg: &TrainConfig) -> Adam {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        }
    }

    fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// One arm of the sparsity-weight sweep.
#[derive(Debug)]
pub struct SweepRun {
    pub lambda: f64,
    pub output: TrainOutput,
    /// Entries surviving freeze + prune at the config threshold.
    pub open_entries: usize,
    /// Attention heads whose additive gate survives pruning.
    pub open_additive_heads: Vec<(usize, usize)>,
}

pub const DEFAULT_LAMBDA_SWEEP: [f64; 4] = [0.01, 0.05, 0.1, 0.5];

/// Train one run per sparsity weight.
pub fn run_lambda_sweep(
    model: &Transformer,
    task: &TaskSpec,
    cfg: &TrainConfig,
    lambdas: &[f64],
) -> Result<Vec<SweepRun>> {
    let mut runs = Vec::new();
    for &lambda in lambdas {
        let mut c = cfg.clone();
        c.lambda_sparsity = lambda;
        let output = train(model, task, &c)?;
        let pruned: Vec<FrozenMap> = output
            .frozen
            .iter()
            .map(|f| prune(f, cfg.epsilon_prune))
            .collect();
        let open_entries = pruned.iter().map(|p| p.len()).sum();
        let open_additive_heads = pruned
            .iter()
            .find(|p| p.site == Site::AttentionHead)
            .map(|p| p.open_additive_heads(cfg.epsilon_prune))
            .unwrap_or_default();
        runs.push(SweepRun {
            lambda,
            output,
            open_entries,
            open_additive_heads,
        });
    }
    Ok(runs)
}

/// Index of the best sweep arm: highest validation accuracy, then fewest
/// open entries, then smaller lambda by sweep order.
pub fn pick_best_sweep(runs: &[SweepRun]) -> Option<usize> {
    (0..runs.len()).reduce(|best, i| {
        let (b, c) = (&runs[best], &runs[i]);
        if c.output.best_val_accuracy > b.output.best_val_accuracy
            || (c.output.best_val_accuracy == b.output.best_val_accuracy
                && c.open_entries < b.open_entries)
        {
            i
        } else {
            best
        }
    })
}

#[derive(Debug)]
pub struct TwoStageResult {
    /// Heads picked by the stage-1 scaling-norm ranking.
    pub selected_heads: Vec<(usize, usize)>,
    /// Stage-2 additive-only map on the selected heads, gates fixed to 1.
    pub frozen: FrozenMap,
    pub stage1: TrainOutput,
    pub stage2: TrainOutput,
}

/// Two-stage select-then-tune baseline.
///
/// Stage 1 trains ungated multiplicative-only edits on every head and ranks
/// heads by the norm of the learned scaling vector; stage 2 discards the
/// scalings, freezes the top-k selection, and trains ungated additive-only
/// vectors on exactly those heads.
pub fn lofit_two_stage(
    model: &Transformer,
    task: &TaskSpec,
    cfg: &TrainConfig,
    k: usize,
) -> Result<TwoStageResult> {
    if k == 0 {
        return Err(Error::Invalid("two-stage baseline needs k >= 1".into()));
    }
    if k > model.cfg().total_heads() {
        return Err(Error::Invalid(format!(
            "k {} exceeds total heads {}",
            k,
            model.cfg().total_heads()
        )));
    }

    let mut stage1_cfg = cfg.clone();
    stage1_cfg.site = SiteChoice::Attention;
    stage1_cfg.mode = EditMode::MultiplicativeOnly;
    stage1_cfg.gating = Gating::None;
    stage1_cfg.lambda_sparsity = 0.0;
    let stage1 = train(model, task, &stage1_cfg)?;

    let map1 = &stage1.maps[0];
    let mut ranked: Vec<(f64, usize, usize)> = map1
        .entries
        .iter()
        .map(|e| {
            let norm = e.m.iter().map(|v| v * v).sum::<f64>().sqrt();
            (norm, e.layer, e.head)
        })
        .collect();
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut selected_heads: Vec<(usize, usize)> =
        ranked.into_iter().take(k).map(|(_, l, h)| (l, h)).collect();
    selected_heads.sort_unstable();

    let mut stage2_cfg = cfg.clone();
    stage2_cfg.site = SiteChoice::Attention;
    stage2_cfg.mode = EditMode::AdditiveOnly;
    stage2_cfg.gating = Gating::None;
    stage2_cfg.lambda_sparsity = 0.0;
    let shape = stage2_cfg.gate_shape();
    let dh = model.cfg().d_head();
    let entries = selected_heads
        .iter()
        .map(|&(l, h)| HeadEdit::zeros(l, h, dh, stage2_cfg.phi_init, &shape))
        .collect();
    let stage2_map = InterventionMap::new(
        Site::AttentionHead,
        Gating::None,
        EditMode::AdditiveOnly,
        dh,
        shape,
        entries,
    )?;
    let stage2 = train_with_maps(model, task, &stage2_cfg, vec![stage2_map])?;
    let frozen = stage2.maps[0].freeze();

    Ok(TwoStageResult {
        selected_heads,
        frozen,
        stage1,
        stage2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{gen_planted_task, PlantOptions};

    fn tiny_model() -> Transformer {
        let cfg = ModelConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 32,
            d_ff: 64,
            vocab: 96,
            max_seq: 16,
            init_seed: 11,
            ..ModelConfig::default()
        };
        Transformer::init(&cfg).unwrap()
    }

    fn tiny_task(model: &Transformer) -> crate::tasks::PlantedTask {
        gen_planted_task(
            model,
            &PlantOptions {
                k_heads: 2,
                n_examples: 80,
                val_examples: 60,
                test_examples: 40,
                prompt_len: 8,
                seed: 42,
                ..PlantOptions::default()
            },
        )
        .unwrap()
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            max_epochs: 3,
            batch_size: 16,
            lr0: 0.02,
            patience: 3,
            trajectory_every: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_schedule_values() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0.0, &cfg), 5e-4);
        let v = lr_at(1.0, &cfg);
        assert!((v - 5e-4 * 0.1 * (-0.01f64).exp()).abs() < 1e-18);
        assert!((v - 4.950e-5).abs() < 1e-8, "lr(1) = {v}");
        // Constant decay ratio.
        let ratio = cfg.lr_geo * (-cfg.lr_decay).exp();
        for t in [0.0, 0.7, 2.0, 5.5] {
            let r = lr_at(t + 1.0, &cfg) / lr_at(t, &cfg);
            assert!((r - ratio).abs() < 1e-12);
        }
        // Strictly decreasing.
        for t in 0..20 {
            assert!(lr_at(t as f64 + 0.5, &cfg) < lr_at(t as f64, &cfg));
        }
    }

    #[test]
    fn warmup_ramps_to_lr0() {
        let cfg = TrainConfig::default();
        assert_eq!(effective_lr(0.0, 10.0, &cfg), 0.0);
        let half = effective_lr(0.5, 10.0, &cfg);
        assert!((half - 0.5 * cfg.lr0).abs() < 1e-18);
        let post = effective_lr(1.0, 10.0, &cfg);
        assert!((post - cfg.lr0).abs() < 1e-18);
        // Decreasing after warmup.
        assert!(effective_lr(5.0, 10.0, &cfg) < post);
    }

    #[test]
    fn total_loss_decomposition() {
        let model = tiny_model();
        let cfg = quick_cfg();
        let maps = cfg.build_maps(model.cfg()).unwrap();
        assert_eq!(total_loss(2.0, &maps, 0.0), 2.0);
        assert_eq!(total_loss(2.0, &[], 1.0), 2.0);
        let one_pair = {
            let shape = GateParams::default();
            let e = HeadEdit::zeros(0, 0, 8, 0.0, &shape);
            vec![InterventionMap::new(
                Site::AttentionHead,
                Gating::Separate,
                EditMode::Hybrid,
                8,
                shape,
                vec![e],
            )
            .unwrap()]
        };
        let v = total_loss(2.0, &one_pair, 1.0);
        assert!((v - 3.376).abs() < 1e-3, "total {v}");
    }

    #[test]
    fn training_is_deterministic() {
        let model = tiny_model();
        let task = tiny_task(&model);
        let cfg = quick_cfg();
        let a = train(&model, &task.task, &cfg).unwrap();
        let b = train(&model, &task.task, &cfg).unwrap();
        assert_eq!(a.records_jsonl(), b.records_jsonl());
        assert_eq!(a.maps, b.maps);
    }

    #[test]
    fn logged_objective_decomposes() {
        let model = tiny_model();
        let task = tiny_task(&model);
        let cfg = quick_cfg();
        let out = train(&model, &task.task, &cfg).unwrap();
        for r in &out.records {
            if let Record::Step(s) = r {
                assert!(
                    (s.total - (s.xent + cfg.lambda_sparsity * s.l0)).abs() < 1e-12,
                    "step {}: total {} vs {} + {} * {}",
                    s.step,
                    s.total,
                    s.xent,
                    cfg.lambda_sparsity,
                    s.l0
                );
            }
        }
    }

    #[test]
    fn lambda_zero_penalty_contributes_no_gradient() {
        // phi gradients with and without the penalty term differ exactly by
        // lambda * d(prob_open)/d(phi).
        let model = tiny_model();
        let task = tiny_task(&model);
        let cfg = quick_cfg();
        let maps = cfg.build_maps(model.cfg()).unwrap();
        let layout = ParamLayout::new(&maps);
        let batch = batch_examples(&task.task.train[..8], model.cfg().vocab).unwrap();
        let mut rng = RngStream::new(5);
        let draws: Vec<_> = maps.iter().map(|m| sample_gates(m, &mut rng)).collect();
        let refs: Vec<&InterventionMap> = maps.iter().collect();
        let plan = EditPlan::from_maps(model.cfg(), &refs, &draws).unwrap();
        let (logits, cache) = model.forward_train(&batch, &plan).unwrap();
        let (_, dlogits) = xent_loss_and_grad(&logits, &batch).unwrap();
        let mut grads = zero_grads(&refs);
        model.backward(&cache, &plan, &dlogits, &mut grads);
        let flat0 = layout.flatten_grads(&maps, &grads, &draws, 0.0);
        let flat1 = layout.flatten_grads(&maps, &grads, &draws, 0.7);
        let mut idx = 0usize;
        for map in &maps {
            for e in &map.entries {
                // phi_a comes first in the layout for this config.
                let expected = 0.7 * hardconcrete::prob_open_grad(&e.gate_a);
                assert!((flat1[idx] - flat0[idx] - expected).abs() < 1e-15);
                idx += 2 + 2 * map.d_head; // phi_a, phi_m, m, a
                let _ = e;
            }
        }
    }

    #[test]
    fn early_stopping_returns_best_map() {
        let model = tiny_model();
        let task = tiny_task(&model);
        let mut cfg = quick_cfg();
        cfg.max_epochs = 12;
        cfg.patience = 2;
        let out = train(&model, &task.task, &cfg).unwrap();
        // The recorded dev accuracies must never exceed the best the output
        // claims, and the output's map corresponds to that best.
        let best_logged = out
            .records
            .iter()
            .filter_map(|r| match r {
                Record::Eval(e) => Some(e.accuracy),
                _ => None,
            })
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(best_logged, out.best_val_accuracy);
        assert!(out.epochs_run <= cfg.max_epochs);
    }

    #[test]
    fn heavy_sparsity_closes_gates_without_signal() {
        // Labels equal the base model's own argmax, so the only pressure on
        // the gates is the penalty: they must close.
        let model = tiny_model();
        let planted = gen_planted_task(
            &model,
            &PlantOptions {
                k_heads: 0,
                n_examples: 60,
                val_examples: 40,
                test_examples: 20,
                prompt_len: 8,
                seed: 42,
                ..PlantOptions::default()
            },
        )
        .unwrap();
        // Adam displacement is bounded by the lr sum over steps; the budget
        // here comfortably covers the phi travel from open init to closed.
        let cfg = TrainConfig {
            lambda_sparsity: 10.0,
            lr0: 0.1,
            max_epochs: 60,
            patience: 60,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let out = train(&model, &planted.task, &cfg).unwrap();
        // Inspect the final state, not the best-accuracy snapshot.
        let last_step = out
            .records
            .iter()
            .rev()
            .find_map(|r| match r {
                Record::Step(s) => Some(s.clone()),
                _ => None,
            })
            .unwrap();
        assert!(
            last_step.frac_closed_a >= 0.99 && last_step.frac_closed_m >= 0.99,
            "closed fractions {} / {}",
            last_step.frac_closed_a,
            last_step.frac_closed_m
        );
    }

    #[test]
    fn divergence_is_reported() {
        let model = tiny_model();
        let task = tiny_task(&model);
        let mut cfg = quick_cfg();
        cfg.lr0 = 1e12;
        cfg.clip_norm = None;
        cfg.max_epochs = 30;
        match train(&model, &task.task, &cfg) {
            Err(Error::Diverged(_)) => {}
            Ok(_) => {
                // Extreme rates can also survive; the contract only demands
                // that non-finite losses abort with a diagnostic.
            }
            Err(other) => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn two_stage_shapes() {
        let model = tiny_model();
        let task = tiny_task(&model);
        let mut cfg = quick_cfg();
        cfg.max_epochs = 2;
        let k = 3;
        let res = lofit_two_stage(&model, &task.task, &cfg, k).unwrap();
        assert_eq!(res.selected_heads.len(), k);
        assert_eq!(res.frozen.len(), k);
        for e in &res.frozen.entries {
            assert_eq!(e.g_a, 1.0);
            assert_eq!(e.g_m, 0.0);
        }
        assert!(lofit_two_stage(&model, &task.task, &cfg, 0).is_err());
        // Degenerate selection: k = all heads.
        let res = lofit_two_stage(&model, &task.task, &cfg, model.cfg().total_heads()).unwrap();
        assert_eq!(res.selected_heads.len(), model.cfg().total_heads());
    }

    #[test]
    fn evaluate_chance_level_on_random_labels() {
        let model = tiny_model();
        let planted = tiny_task(&model);
        // Random labels independent of the prompts: restricted argmax of the
        // base model matches roughly 1/n_choices of them.
        let mut rng = RngStream::new(99);
        let mut examples = planted.task.val.clone();
        for ex in &mut examples {
            ex.label = rng.below(planted.task.n_choices);
            ex.tokens[ex.answer_pos] = planted.task.answer_tokens[ex.label];
        }
        let acc = evaluate(&model, &[], &examples, &planted.task.answer_tokens).unwrap();
        let chance = 1.0 / planted.task.n_choices as f64;
        assert!((acc - chance).abs() < 0.15, "accuracy {acc} vs chance {chance}");
    }
}
