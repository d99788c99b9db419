//! Joint optimization of the matching network and the critic.

use std::collections::VecDeque;
use std::io::Write;
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{batch_order, Batch, TokenizedExample};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, Task};
use crate::features::LocalFeatureSet;
use crate::graph::{Graph, Var};
use crate::infomax::derangement;
use crate::model::TimModel;
use crate::params::{round_f32, Group, Mat, ParameterStore};

pub const WINDOW: usize = 100;

fn default_lr() -> f64 {
    1e-3
}
fn default_batch_size() -> usize {
    16
}
fn default_max_steps() -> u64 {
    1000
}
fn default_mi_weight() -> f64 {
    1.0
}
fn default_eval_every() -> u64 {
    100
}
fn default_grad_clip() -> Option<f64> {
    Some(5.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    /// Separate learning rate for the critic; defaults to `learning_rate`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub critic_learning_rate: Option<f64>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_max_steps")]
    pub max_steps: u64,
    /// Weight of the MI loss; 0 trains the plain matching network.
    #[serde(default = "default_mi_weight")]
    pub mi_weight: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    #[serde(default = "default_grad_clip", skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    /// Stop after this many evaluations without improvement.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patience: Option<u64>,
    /// Moving-average correction of the DV gradient. Reserved; must be false.
    #[serde(default)]
    pub mi_bias_correction: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: default_lr(),
            critic_learning_rate: None,
            batch_size: default_batch_size(),
            max_steps: default_max_steps(),
            mi_weight: default_mi_weight(),
            seed: 0,
            eval_every: default_eval_every(),
            grad_clip: default_grad_clip(),
            patience: None,
            mi_bias_correction: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("train.learning_rate", self.learning_rate)?;
        if let Some(lr) = self.critic_learning_rate {
            positive("train.critic_learning_rate", lr)?;
        }
        if let Some(c) = self.grad_clip {
            positive("train.grad_clip", c)?;
        }
        if !(self.mi_weight >= 0.0 && self.mi_weight.is_finite()) {
            return Err(Error::Config("train.mi_weight must be non-negative".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("train.batch_size must be at least 2".into()));
        }
        if self.mi_bias_correction {
            return Err(Error::Config("train.mi_bias_correction is not supported yet".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("train.eval_every must be positive".into()));
        }
        Ok(())
    }

    pub fn mi_enabled(&self) -> bool {
        self.mi_weight > 0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub t: u64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl Moments {
    pub fn zeros(store: &ParameterStore) -> Self {
        Self {
            t: 0,
            m: store.iter().map(|(_, p)| Mat::zeros(p.value.dim())).collect(),
            v: store.iter().map(|(_, p)| Mat::zeros(p.value.dim())).collect(),
        }
    }
}

/// Adam update with optional global-norm clipping. Returns the gradient norm
/// before clipping.
///
/// Elements whose gradient is exactly zero keep their value; their moments
/// still decay. Updated values are rounded to `f32` precision.
pub fn optimizer_update(
    store: &mut ParameterStore,
    moments: &mut Moments,
    encoder_lr: f64,
    critic_lr: f64,
    clip: Option<f64>,
    adam: AdamConfig,
) -> Result<f64> {
    if moments.m.len() != store.len() || moments.v.len() != store.len() {
        return Err(Error::Shape(format!(
            "{} moment slots for {} parameters",
            moments.m.len(),
            store.len()
        )));
    }
    for ((p, m), v) in store.iter_mut().zip(&moments.m).zip(&moments.v) {
        if p.value.dim() != m.dim() || p.value.dim() != v.dim() || p.grad.dim() != p.value.dim() {
            return Err(Error::Shape(format!("moments of `{}` do not match its shape", p.name)));
        }
    }
    let norm = store.grad_norm();
    let scale = match clip {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    moments.t += 1;
    let t = moments.t as i32;
    let c1 = 1.0 - adam.beta1.powi(t);
    let c2 = 1.0 - adam.beta2.powi(t);
    for ((p, m), v) in store.iter_mut().zip(moments.m.iter_mut()).zip(moments.v.iter_mut()) {
        if !p.trainable {
            continue;
        }
        let lr = match p.group {
            Group::Encoder => encoder_lr,
            Group::Discriminator => critic_lr,
        };
        ndarray::Zip::from(&mut p.value)
            .and(&p.grad)
            .and(m)
            .and(v)
            .for_each(|x, &g, m, v| {
                let g = g * scale;
                *m = adam.beta1 * *m + (1.0 - adam.beta1) * g;
                *v = adam.beta2 * *v + (1.0 - adam.beta2) * g * g;
                if g != 0.0 {
                    let step = lr * (*m / c1) / ((*v / c2).sqrt() + adam.eps);
                    *x = round_f32(*x - step);
                }
            });
    }
    Ok(norm)
}

/// Per-step values written to the metrics log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub l_all: f64,
    pub l_t: f64,
    pub l_m: f64,
    pub dv_ts: f64,
    pub dv_tt: f64,
    pub lr: f64,
}

pub const CSV_HEADER: &str = "step,l_all,l_t,l_m,dv_ts,dv_tt,lr";

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.l_all, self.l_t, self.l_m, self.dv_ts, self.dv_tt, self.lr
        )
    }
}

/// Fixed-length running windows of recent losses.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossWindows {
    pub l_t: VecDeque<f64>,
    pub l_m: VecDeque<f64>,
    pub dv_ts: VecDeque<f64>,
    pub dv_tt: VecDeque<f64>,
    pub l_all: VecDeque<f64>,
}

fn push_window(w: &mut VecDeque<f64>, v: f64) {
    if w.len() == WINDOW {
        w.pop_front();
    }
    w.push_back(v);
}

pub fn window_mean(w: &VecDeque<f64>) -> f64 {
    if w.is_empty() {
        f64::NAN
    } else {
        w.iter().sum::<f64>() / w.len() as f64
    }
}

impl LossWindows {
    pub fn push(&mut self, m: &StepMetrics) {
        push_window(&mut self.l_t, m.l_t);
        push_window(&mut self.l_m, m.l_m);
        push_window(&mut self.dv_ts, m.dv_ts);
        push_window(&mut self.dv_tt, m.dv_tt);
        push_window(&mut self.l_all, m.l_all);
    }

    pub fn all(&self) -> [&VecDeque<f64>; 5] {
        [&self.l_t, &self.l_m, &self.dv_ts, &self.dv_tt, &self.l_all]
    }

    pub fn all_mut(&mut self) -> [&mut VecDeque<f64>; 5] {
        [
            &mut self.l_t,
            &mut self.l_m,
            &mut self.dv_ts,
            &mut self.dv_tt,
            &mut self.l_all,
        ]
    }
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: u64,
    pub params: ParameterStore,
    pub moments: Moments,
    /// Drives negative sampling.
    pub rng: ChaCha8Rng,
    pub windows: LossWindows,
}

impl TrainState {
    pub fn new(params: ParameterStore, seed: u64) -> Self {
        let moments = Moments::zeros(&params);
        Self {
            step: 0,
            params,
            moments,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x6e65_6761_7469_7665),
            windows: LossWindows::default(),
        }
    }
}

/// Shuffle seed for one pass over the data.
fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ epoch.wrapping_add(1).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

/// The batch consumed at a given step. Each epoch reshuffles; a tail batch
/// of one example is dropped when MI training is enabled.
pub fn batch_for_step(examples: &[TokenizedExample], config: &TrainConfig, step: u64) -> Result<Batch> {
    let full = examples.len() / config.batch_size;
    let tail = examples.len() % config.batch_size;
    let keep_tail = tail >= 2 || (tail == 1 && !config.mi_enabled());
    let per_epoch = full + usize::from(keep_tail);
    if per_epoch == 0 {
        return Err(Error::Data(format!(
            "{} training examples cannot fill a batch",
            examples.len()
        )));
    }
    let epoch = step / per_epoch as u64;
    let index = (step % per_epoch as u64) as usize;
    let order = batch_order(examples.len(), Some(epoch_seed(config.seed, epoch)));
    let start = index * config.batch_size;
    let end = (start + config.batch_size).min(examples.len());
    Ok(Batch::from_examples(examples, order[start..end].to_vec()))
}

/// Produces batches for `start..end` on a background thread, at most four
/// ahead of the consumer and in step order.
pub fn prefetch(
    examples: Arc<Vec<TokenizedExample>>,
    config: TrainConfig,
    start: u64,
    end: u64,
) -> Receiver<Result<Batch>> {
    let (tx, rx) = sync_channel(4);
    std::thread::spawn(move || {
        for step in start..end {
            if tx.send(batch_for_step(&examples, &config, step)).is_err() {
                break;
            }
        }
    });
    rx
}

fn check_finite(term: &'static str, step: u64, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { term, step, value })
    }
}

/// Graph handles of one joint forward pass.
pub struct JointLoss {
    pub l_t: Var,
    pub l_m: Option<Var>,
    pub l_all: Var,
    pub dv_ts: Vec<Var>,
    pub dv_tt: Vec<Var>,
}

/// Local features and negative assignment for the MI term of one batch.
pub struct MiInputs<'a> {
    pub negatives: &'a [usize],
    pub features_a: &'a [LocalFeatureSet],
    pub features_b: &'a [LocalFeatureSet],
}

/// Local features of both sides of every example, from the current
/// parameter snapshot.
pub fn batch_features(
    model: &TimModel,
    store: &ParameterStore,
    batch: &Batch,
) -> Result<(Vec<LocalFeatureSet>, Vec<LocalFeatureSet>)> {
    let mut a = Vec::with_capacity(batch.len());
    let mut b = Vec::with_capacity(batch.len());
    for row in 0..batch.len() {
        a.push(model.extract(store, &batch.side_a.sequence(row))?);
        b.push(model.extract(store, &batch.side_b.sequence(row))?);
    }
    Ok((a, b))
}

/// Builds `L_all = mi_weight * L_M + L_T` for a batch. `L_M` is the sum
/// over examples of both per-side losses, divided by the batch size.
/// Without `mi` the MI term is left out.
pub fn joint_loss(
    g: &mut Graph,
    model: &TimModel,
    store: &ParameterStore,
    batch: &Batch,
    mi_weight: f64,
    mi: Option<MiInputs<'_>>,
) -> Result<JointLoss> {
    let n = batch.len();
    let mut reps_a = Vec::with_capacity(n);
    let mut reps_b = Vec::with_capacity(n);
    for row in 0..n {
        let a = batch.side_a.sequence(row);
        let b = batch.side_b.sequence(row);
        let (ra, rb) = model.encoder.encode_pair(g, store, &a, &b)?;
        reps_a.push(ra);
        reps_b.push(rb);
    }
    let ra = g.concat_rows(&reps_a);
    let rb = g.concat_rows(&reps_b);
    let scores = model.encoder.predict(g, store, ra, rb);
    let l_t = g.cross_entropy(scores, &batch.labels);
    let Some(mi) = mi else {
        return Ok(JointLoss {
            l_t,
            l_m: None,
            l_all: l_t,
            dv_ts: Vec::new(),
            dv_tt: Vec::new(),
        });
    };
    let locals_a: Vec<&LocalFeatureSet> = mi.features_a.iter().collect();
    let locals_b: Vec<&LocalFeatureSet> = mi.features_b.iter().collect();
    let dv_ts = model
        .critic
        .batch_objective(g, store, &locals_a, &reps_a, mi.negatives)?;
    let dv_tt = model
        .critic
        .batch_objective(g, store, &locals_b, &reps_b, mi.negatives)?;
    let mut total: Option<Var> = None;
    for (&a, &b) in dv_ts.iter().zip(&dv_tt) {
        let pair = g.add(a, b);
        total = Some(match total {
            Some(t) => g.add(t, pair),
            None => pair,
        });
    }
    let l_m = g.scale(total.expect("non-empty batch"), -1.0 / n as f64);
    let weighted = g.scale(l_m, mi_weight);
    let l_all = g.add(weighted, l_t);
    Ok(JointLoss {
        l_t,
        l_m: Some(l_m),
        l_all,
        dv_ts,
        dv_tt,
    })
}

/// One joint update on the encoder, head and critic.
pub fn train_step(
    model: &TimModel,
    state: &mut TrainState,
    batch: &Batch,
    config: &TrainConfig,
) -> Result<StepMetrics> {
    if batch.len() < 2 {
        return Err(Error::Config("MI training needs batches of at least 2".into()));
    }
    let step = state.step;
    let perm = derangement(batch.len(), &mut state.rng)?;
    let (features_a, features_b) = batch_features(model, &state.params, batch)?;
    let mi = MiInputs {
        negatives: &perm,
        features_a: &features_a,
        features_b: &features_b,
    };
    let mut g = Graph::new();
    let loss = joint_loss(&mut g, model, &state.params, batch, config.mi_weight, Some(mi))?;
    let l_t = g.scalar_value(loss.l_t);
    let l_m = g.scalar_value(loss.l_m.expect("negatives given"));
    let l_all = g.scalar_value(loss.l_all);
    check_finite("L_T", step, l_t)?;
    check_finite("L_M", step, l_m)?;
    check_finite("L_all", step, l_all)?;
    let mean = |vs: &[Var]| vs.iter().map(|&v| g.scalar_value(v)).sum::<f64>() / vs.len() as f64;
    let dv_ts = mean(&loss.dv_ts);
    let dv_tt = mean(&loss.dv_tt);

    state.params.zero_grads();
    g.backward(loss.l_all).accumulate_into(&mut state.params);
    let critic_lr = config.critic_learning_rate.unwrap_or(config.learning_rate);
    let norm = optimizer_update(
        &mut state.params,
        &mut state.moments,
        config.learning_rate,
        critic_lr,
        config.grad_clip,
        AdamConfig::default(),
    )?;
    check_finite("gradient norm", step, norm)?;

    state.step += 1;
    let metrics = StepMetrics {
        step: state.step,
        l_all,
        l_t,
        l_m,
        dv_ts,
        dv_tt,
        lr: config.learning_rate,
    };
    state.windows.push(&metrics);
    Ok(metrics)
}

/// Runs steps `state.step..until`, calling `on_step` after each one.
pub fn train_until(
    model: &TimModel,
    state: &mut TrainState,
    examples: &[TokenizedExample],
    config: &TrainConfig,
    until: u64,
    mut on_step: impl FnMut(&TrainState, &StepMetrics) -> Result<bool>,
) -> Result<()> {
    while state.step < until {
        let batch = batch_for_step(examples, config, state.step)?;
        let m = train_step(model, state, &batch, config)?;
        if !on_step(state, &m)? {
            break;
        }
    }
    Ok(())
}

/// Dev-set score used for model selection: accuracy or MAP.
pub fn selection_metric(report: &EvalReport) -> f64 {
    report.accuracy.or(report.map).unwrap_or(f64::NEG_INFINITY)
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    /// `(step, report)` for every dev evaluation.
    pub evals: Vec<(u64, EvalReport)>,
    /// Parameters at the best dev evaluation.
    pub best: Option<(u64, f64, ParameterStore)>,
    pub stopped_early: bool,
}

/// Trains from `state.step` to `config.max_steps`, evaluating on `dev`
/// every `eval_every` steps and stopping once `patience` evaluations pass
/// without improvement. Batches are prepared on a background thread.
pub fn fit(
    model: &TimModel,
    state: &mut TrainState,
    train: Arc<Vec<TokenizedExample>>,
    dev: Option<(&[TokenizedExample], Task)>,
    config: &TrainConfig,
    mut on_step: impl FnMut(&TrainState, &StepMetrics) -> Result<()>,
) -> Result<FitOutcome> {
    let mut outcome = FitOutcome {
        evals: Vec::new(),
        best: None,
        stopped_early: false,
    };
    let mut since_best = 0;
    let batches = prefetch(train, config.clone(), state.step, config.max_steps);
    for batch in batches {
        let m = train_step(model, state, &batch?, config)?;
        on_step(state, &m)?;
        let at_eval = state.step.is_multiple_of(config.eval_every) || state.step == config.max_steps;
        if let (true, Some((examples, task))) = (at_eval, dev) {
            let report = evaluate(model, &state.params, examples, task)?;
            let score = selection_metric(&report);
            log::info!(
                "step {} l_all {:.4} l_t {:.4} l_m {:.4} dev {:.4}",
                state.step,
                window_mean(&state.windows.l_all),
                window_mean(&state.windows.l_t),
                window_mean(&state.windows.l_m),
                score
            );
            outcome.evals.push((state.step, report));
            if outcome.best.as_ref().is_none_or(|(_, b, _)| score > *b) {
                outcome.best = Some((state.step, score, state.params.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if config.patience.is_some_and(|p| since_best >= p) {
                    outcome.stopped_early = true;
                    break;
                }
            }
        } else if at_eval {
            log::info!(
                "step {} l_all {:.4} l_t {:.4} l_m {:.4}",
                state.step,
                window_mean(&state.windows.l_all),
                window_mean(&state.windows.l_t),
                window_mean(&state.windows.l_m)
            );
        }
    }
    Ok(outcome)
}

/// Writes metrics rows, creating the header on first use.
pub struct MetricsLog<W: Write> {
    out: W,
}

impl<W: Write> MetricsLog<W> {
    pub fn new(mut out: W, write_header: bool) -> std::io::Result<Self> {
        if write_header {
            writeln!(out, "{CSV_HEADER}")?;
        }
        Ok(Self { out })
    }

    pub fn write(&mut self, m: &StepMetrics) -> std::io::Result<()> {
        writeln!(self.out, "{}", m.csv_row())?;
        self.out.flush()
    }
}
