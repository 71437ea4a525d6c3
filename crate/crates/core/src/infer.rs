//! Recurrent inference heads for filtering and smoothing.
//!
//! A head reads one observation sample per time, each concatenated with a
//! fresh Gaussian noise vector, and emits hidden-state samples `π_t`. The
//! forward head reads in time order, the backward head in reverse, and the
//! smoothing head is pulled toward the `λ`-weighted barycenter of the two.

use std::fmt;
use std::time::Instant;

use ndarray::{concatenate, Axis};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Matrix, Tape, Var};
use crate::data::{empirical_batch, AggregateSeries, DataError};
use crate::learn::{self, BoundDrift, LearnError, TrainConfig, TrainReport, DIVERGENCE_LIMIT};
use crate::nn::{Activation, Adam, BoundLstm, Checkpoint, CheckpointError, Entry, Lstm, Mlp, NnError, Parametric};
use crate::ot::{self, critic_objective, CriticBank, OtError};
use crate::rng::Rng;
use crate::sde::{self, DiffusionModel, Drift, SdeError};

#[derive(Debug, Error)]
pub enum InferError {
    #[error("time {t} outside [0, {horizon}]")]
    OutOfRange { t: usize, horizon: usize },
    #[error("missing index {k} must lie strictly between {first} and {last}")]
    Boundary { k: usize, first: usize, last: usize },
    #[error("{0}")]
    Mismatch(String),
    #[error("expected a {expected} head, got {got}")]
    WrongVariant { expected: HeadVariant, got: HeadVariant },
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Sde(#[from] SdeError),
    #[error(transparent)]
    Ot(#[from] OtError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, InferError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadVariant {
    Forward,
    Backward,
    Smoothing,
}

impl HeadVariant {
    pub fn name(self) -> &'static str {
        match self {
            HeadVariant::Forward => "forward",
            HeadVariant::Backward => "backward",
            HeadVariant::Smoothing => "smoothing",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "forward" => Some(HeadVariant::Forward),
            "backward" => Some(HeadVariant::Backward),
            "smoothing" => Some(HeadVariant::Smoothing),
            _ => None,
        }
    }

    fn key(self) -> u64 {
        match self {
            HeadVariant::Forward => 20,
            HeadVariant::Backward => 21,
            HeadVariant::Smoothing => 22,
        }
    }
}

impl fmt::Display for HeadVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarycenterWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

/// `λ₁ = t/T`, `λ₂ = 1 − λ₁`.
pub fn barycenter_weights(t: usize, horizon: usize) -> Result<BarycenterWeights> {
    if horizon == 0 || t > horizon {
        return Err(InferError::OutOfRange { t, horizon });
    }
    let lambda1 = t as f64 / horizon as f64;
    Ok(BarycenterWeights {
        lambda1,
        lambda2: 1.0 - lambda1,
    })
}

/// Per-time head inputs in ascending time order.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadInputs {
    pub times: Vec<usize>,
    pub observations: Vec<Matrix>,
    pub noise: Vec<Matrix>,
}

impl HeadInputs {
    pub fn batch_size(&self) -> usize {
        self.observations.first().map_or(0, |o| o.nrows())
    }
}

/// `count` rows per listed time, cycling through fresh permutations of each
/// bag when `count` exceeds it. Draws for time `t` depend only on `t`, so
/// unlisted times are never touched.
pub fn head_inputs(series: &AggregateSeries, times: &[usize], count: usize, noise_dim: usize, rng: &Rng) -> Result<HeadInputs> {
    let mut observations = Vec::with_capacity(times.len());
    let mut noise = Vec::with_capacity(times.len());
    for &t in times {
        let bag = series.get(t)?;
        let mut idx = Vec::with_capacity(count);
        let mut cycle = 0u64;
        while idx.len() < count {
            let take = (count - idx.len()).min(bag.nrows());
            idx.extend(rng.derive(&[0, t as u64, cycle]).stream().sample_indices(bag.nrows(), take));
            cycle += 1;
        }
        observations.push(bag.select(Axis(0), &idx));
        noise.push(rng.derive(&[1, t as u64]).normal_matrix(count, noise_dim));
    }
    Ok(HeadInputs {
        times: times.to_vec(),
        observations,
        noise,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceHead {
    pub variant: HeadVariant,
    pub rnn: Lstm,
    pub noise_dim: usize,
    /// Observed times the head reads, ascending.
    pub times: Vec<usize>,
    /// Reverse-time drift used by the backward head's consistency term.
    pub backward_drift: Option<Mlp>,
}

impl InferenceHead {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        variant: HeadVariant,
        obs_dim: usize,
        hidden_dim: usize,
        width: usize,
        noise_dim: usize,
        times: Vec<usize>,
        seed: u64,
    ) -> Result<Self> {
        if times.is_empty() || times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(InferError::Mismatch("head times must be nonempty and strictly increasing".into()));
        }
        let rng = Rng::new(seed);
        let rnn = Lstm::new(obs_dim + noise_dim, width, hidden_dim, rng.child(0).stream().next_u64())?;
        let backward_drift = match variant {
            HeadVariant::Backward => Some(Mlp::new(
                &[hidden_dim, width, width, hidden_dim],
                Activation::Relu,
                rng.child(1).stream().next_u64(),
            )?),
            _ => None,
        };
        Ok(Self {
            variant,
            rnn,
            noise_dim,
            times,
            backward_drift,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.rnn.input_dim() - self.noise_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.rnn.output_dim()
    }

    pub fn reads_backward(&self) -> bool {
        self.variant == HeadVariant::Backward
    }

    /// Times in the order the recurrence consumes them.
    pub fn reading_order(&self) -> Vec<usize> {
        self.to_reading(self.times.clone())
    }

    fn to_reading<T>(&self, mut xs: Vec<T>) -> Vec<T> {
        if self.reads_backward() {
            xs.reverse();
        }
        xs
    }

    /// Index of the time read just before `times[j]`.
    fn predecessor(&self, j: usize) -> Option<usize> {
        if self.reads_backward() {
            (j + 1 < self.times.len()).then_some(j + 1)
        } else {
            j.checked_sub(1)
        }
    }

    fn sequence(&self, inputs: &HeadInputs) -> Result<Vec<Matrix>> {
        if inputs.times != self.times {
            return Err(InferError::Mismatch(format!(
                "head reads times {:?}, inputs cover {:?}",
                self.times, inputs.times
            )));
        }
        let seq = inputs
            .observations
            .iter()
            .zip(&inputs.noise)
            .map(|(o, z)| {
                if o.ncols() != self.obs_dim() || z.ncols() != self.noise_dim {
                    return Err(InferError::Mismatch(format!(
                        "inputs have {}+{} columns, head expects {}+{}",
                        o.ncols(),
                        z.ncols(),
                        self.obs_dim(),
                        self.noise_dim
                    )));
                }
                Ok(concatenate![Axis(1), *o, *z])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.to_reading(seq))
    }

    /// Hidden-state samples aligned with `self.times`.
    pub fn states(&self, inputs: &HeadInputs) -> Result<Vec<Matrix>> {
        let out = self.rnn.forward(&self.sequence(inputs)?)?;
        Ok(self.to_reading(out))
    }

    fn bound_states<'t>(&self, rnn: &BoundLstm<'t>, tape: &'t Tape, inputs: &HeadInputs) -> Result<Vec<Var<'t>>> {
        let seq: Vec<Var> = self.sequence(inputs)?.into_iter().map(|m| tape.leaf(m)).collect();
        Ok(self.to_reading(rnn.forward(&seq)?))
    }

    /// Draws inputs from `series` and returns the head's states.
    pub fn sample(&self, series: &AggregateSeries, count: usize, rng: &Rng) -> Result<Vec<Matrix>> {
        self.states(&head_inputs(series, &self.times, count, self.noise_dim, rng)?)
    }

    pub fn write_checkpoint(&self, ckpt: &mut Checkpoint, prefix: &str) {
        ckpt.set_meta(&format!("{prefix}variant"), self.variant.name());
        ckpt.set_meta(&format!("{prefix}noise_dim"), self.noise_dim);
        let times: Vec<String> = self.times.iter().map(|t| t.to_string()).collect();
        ckpt.set_meta(&format!("{prefix}times"), times.join(","));
        ckpt.insert(&format!("{prefix}rnn"), Entry::Lstm(self.rnn.clone()));
        if let Some(gb) = &self.backward_drift {
            ckpt.insert(&format!("{prefix}backward_drift"), Entry::Mlp(gb.clone()));
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, prefix: &str) -> Result<Self> {
        let meta = |k: &str| {
            ckpt.meta(&format!("{prefix}{k}"))
                .ok_or_else(|| CheckpointError::MissingEntry(format!("{prefix}{k}")))
        };
        let variant = HeadVariant::parse(meta("variant")?)
            .ok_or_else(|| InferError::Mismatch(format!("unknown head variant {:?}", meta("variant").unwrap_or(""))))?;
        let noise_dim = meta("noise_dim")?
            .parse()
            .map_err(|_| InferError::Mismatch("bad noise_dim".into()))?;
        let times = meta("times")?
            .split(',')
            .map(|t| t.parse())
            .collect::<std::result::Result<Vec<usize>, _>>()
            .map_err(|_| InferError::Mismatch("bad head times".into()))?;
        let rnn = ckpt.lstm(&format!("{prefix}rnn"))?.clone();
        let backward_drift = match variant {
            HeadVariant::Backward => Some(ckpt.mlp(&format!("{prefix}backward_drift"))?.clone()),
            _ => None,
        };
        if rnn.input_dim() <= noise_dim {
            return Err(InferError::Mismatch("head input narrower than its noise channel".into()));
        }
        Ok(Self {
            variant,
            rnn,
            noise_dim,
            times,
            backward_drift,
        })
    }

    fn require(&self, variant: HeadVariant) -> Result<()> {
        if self.variant != variant {
            return Err(InferError::WrongVariant {
                expected: variant,
                got: self.variant,
            });
        }
        Ok(())
    }
}

impl Parametric for InferenceHead {
    fn parameters(&self) -> Vec<&Matrix> {
        let mut out = self.rnn.parameters();
        if let Some(gb) = &self.backward_drift {
            out.extend(gb.parameters());
        }
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = self.rnn.parameters_mut();
        if let Some(gb) = &mut self.backward_drift {
            out.extend(gb.parameters_mut());
        }
        out
    }
}

/// Fixed inputs, real batches and propagation noise for one objective
/// evaluation.
#[derive(Debug, Clone)]
pub struct ObjectiveBatch {
    pub inputs: HeadInputs,
    /// Real observation batch per time, aligned with `inputs.times`.
    pub reals: Vec<Matrix>,
    pub propagation: Rng,
}

impl ObjectiveBatch {
    pub fn draw(series: &AggregateSeries, times: &[usize], count: usize, noise_dim: usize, rng: &Rng) -> Result<Self> {
        let inputs = head_inputs(series, times, count, noise_dim, &rng.child(0))?;
        let reals = times
            .iter()
            .map(|&t| empirical_batch(series, t, count, &rng.derive(&[1, t as u64])))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self {
            inputs,
            reals,
            propagation: rng.child(2),
        })
    }
}

/// The transition used by a head's consistency term: `g` for the forward
/// head, the learned `g_b` for the backward head.
fn transition<'a>(model: &'a DiffusionModel, head: &'a InferenceHead) -> &'a Mlp {
    head.backward_drift.as_ref().unwrap_or(&model.g)
}

fn propagate(model: &DiffusionModel, drift: &dyn Drift, x: &Matrix, gaps: usize, rng: &Rng) -> Result<Matrix> {
    let path = sde::simulate_drift(drift, &model.sigma_root, model.dt, model.substeps_per_obs, x, gaps, rng)?;
    Ok(path.into_iter().last().expect("at least one state"))
}

fn propagate_var<'t>(model: &DiffusionModel, drift: &BoundDrift<'t>, x: Var<'t>, gaps: usize, rng: &Rng) -> Result<Var<'t>> {
    let inc = learn::increments(rng, x.shape().0, &model.sigma_root, model.dt, gaps * model.substeps_per_obs);
    let path = learn::euler_path(drift, x, &inc, model.substeps_per_obs, model.dt)?;
    Ok(*path.last().expect("at least one state"))
}

fn gap(a: usize, b: usize) -> usize {
    a.abs_diff(b)
}

struct FilterTerms<'t> {
    data_fit: Vec<Var<'t>>,
    consistency: Vec<Option<Var<'t>>>,
    params: Vec<Var<'t>>,
}

/// `mean D¹(Y_t) − mean D¹(f(π_t))` and
/// `mean D²(prop(π_prev)) − mean D²(π_t)` per time, on one tape.
fn filter_terms<'t>(
    tape: &'t Tape,
    model: &DiffusionModel,
    head: &InferenceHead,
    batch: &ObjectiveBatch,
    d1: &CriticBank,
    d2: &CriticBank,
) -> Result<FilterTerms<'t>> {
    let rnn = head.rnn.bind(tape);
    let f = model.f.bind(tape);
    let drift_net = transition(model, head).bind(tape);
    let mut params = rnn.params();
    if head.backward_drift.is_some() {
        params.extend(drift_net.params());
    }
    let drift = BoundDrift::Mlp(drift_net);
    let states = head.bound_states(&rnn, tape, &batch.inputs)?;
    let mut data_fit = Vec::with_capacity(states.len());
    let mut consistency = Vec::with_capacity(states.len());
    for (j, &t) in head.times.iter().enumerate() {
        let d = d1.critic(j)?.bind(tape);
        data_fit.push(critic_objective(&d, tape.leaf(batch.reals[j].clone()), f.forward(states[j])?)?);
        consistency.push(match head.predecessor(j) {
            Some(p) => {
                let prop = propagate_var(model, &drift, states[p], gap(t, head.times[p]), &batch.propagation.child(t as u64))?;
                let d = d2.critic(j)?.bind(tape);
                Some(critic_objective(&d, prop, states[j])?)
            }
            None => None,
        });
    }
    Ok(FilterTerms {
        data_fit,
        consistency,
        params,
    })
}

fn total<'t>(terms: impl IntoIterator<Item = Var<'t>>) -> Result<Var<'t>> {
    let mut it = terms.into_iter();
    let first = it.next().ok_or_else(|| InferError::Mismatch("no observed times".into()))?;
    it.try_fold(first, |acc, v| acc.add(v).map_err(InferError::from))
}

/// Values of the filtering objective on fixed batches.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterObjective {
    pub data_fit: Vec<f64>,
    /// Zero at the first time read, which has no predecessor.
    pub consistency: Vec<f64>,
    pub total: f64,
}

pub fn filter_objective(
    model: &DiffusionModel,
    head: &InferenceHead,
    d1: &CriticBank,
    d2: &CriticBank,
    batch: &ObjectiveBatch,
) -> Result<FilterObjective> {
    let tape = Tape::new();
    let terms = filter_terms(&tape, model, head, batch, d1, d2)?;
    let loss = total(terms.data_fit.iter().copied().chain(terms.consistency.iter().flatten().copied()))?;
    Ok(FilterObjective {
        data_fit: terms.data_fit.iter().map(|v| v.item()).collect(),
        consistency: terms.consistency.iter().map(|c| c.map_or(0.0, |v| v.item())).collect(),
        total: loss.item(),
    })
}

/// Filtering loss and its gradient with respect to the head's parameters
/// (and `g_b` for the backward head).
pub fn filter_gradient(
    model: &DiffusionModel,
    head: &InferenceHead,
    d1: &CriticBank,
    d2: &CriticBank,
    batch: &ObjectiveBatch,
) -> Result<(f64, Vec<Matrix>)> {
    let tape = Tape::new();
    let terms = filter_terms(&tape, model, head, batch, d1, d2)?;
    let loss = total(terms.data_fit.iter().copied().chain(terms.consistency.iter().flatten().copied()))?;
    let grads = tape.backward(loss, &terms.params)?.into_vec();
    Ok((loss.item(), grads))
}

struct SmoothTerms<'t> {
    data_fit: Vec<Var<'t>>,
    forward: Vec<Var<'t>>,
    backward: Vec<Var<'t>>,
    weighted: Vec<Var<'t>>,
    params: Vec<Var<'t>>,
}

fn weights_for(times: &[usize]) -> Result<Vec<BarycenterWeights>> {
    let first = times[0];
    let horizon = times[times.len() - 1] - first;
    times.iter().map(|&t| barycenter_weights(t - first, horizon)).collect()
}

#[allow(clippy::too_many_arguments)]
fn smooth_terms<'t>(
    tape: &'t Tape,
    model: &DiffusionModel,
    smoother: &InferenceHead,
    forward: &InferenceHead,
    backward: &InferenceHead,
    batch: &ObjectiveBatch,
    critics: [&CriticBank; 3],
) -> Result<SmoothTerms<'t>> {
    let [d1, d2, d3] = critics;
    let weights = weights_for(&smoother.times)?;
    let rnn = smoother.rnn.bind(tape);
    let f = model.f.bind(tape);
    let states = smoother.bound_states(&rnn, tape, &batch.inputs)?;
    let pf = forward.states(&batch.inputs)?;
    let pb = backward.states(&batch.inputs)?;
    let mut out = SmoothTerms {
        data_fit: Vec::new(),
        forward: Vec::new(),
        backward: Vec::new(),
        weighted: Vec::new(),
        params: rnn.params(),
    };
    for (j, w) in weights.iter().enumerate() {
        let d = d1.critic(j)?.bind(tape);
        let fit = critic_objective(&d, tape.leaf(batch.reals[j].clone()), f.forward(states[j])?)?;
        let d = d2.critic(j)?.bind(tape);
        let fwd = critic_objective(&d, tape.leaf(pf[j].clone()), states[j])?;
        let d = d3.critic(j)?.bind(tape);
        let bwd = critic_objective(&d, tape.leaf(pb[j].clone()), states[j])?;
        out.weighted.push(fit.add(fwd.scale(w.lambda1)?)?.add(bwd.scale(w.lambda2)?)?);
        out.data_fit.push(fit);
        out.forward.push(fwd);
        out.backward.push(bwd);
    }
    Ok(out)
}

/// Values of the smoothing objective on fixed batches.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingObjective {
    pub weights: Vec<BarycenterWeights>,
    pub data_fit: Vec<f64>,
    pub forward_term: Vec<f64>,
    pub backward_term: Vec<f64>,
    /// `data_fit + λ₁·forward_term + λ₂·backward_term` per time.
    pub per_time: Vec<f64>,
    pub total: f64,
}

/// `critics` are the data-fit, forward-barycenter and backward-barycenter
/// families, in that order.
pub fn smoothing_objective(
    model: &DiffusionModel,
    smoother: &InferenceHead,
    forward: &InferenceHead,
    backward: &InferenceHead,
    critics: [&CriticBank; 3],
    batch: &ObjectiveBatch,
) -> Result<SmoothingObjective> {
    let tape = Tape::new();
    let terms = smooth_terms(&tape, model, smoother, forward, backward, batch, critics)?;
    let loss = total(terms.weighted.iter().copied())?;
    let items = |v: &[Var]| v.iter().map(|x| x.item()).collect::<Vec<_>>();
    Ok(SmoothingObjective {
        weights: weights_for(&smoother.times)?,
        data_fit: items(&terms.data_fit),
        forward_term: items(&terms.forward),
        backward_term: items(&terms.backward),
        per_time: items(&terms.weighted),
        total: loss.item(),
    })
}

pub fn smoothing_gradient(
    model: &DiffusionModel,
    smoother: &InferenceHead,
    forward: &InferenceHead,
    backward: &InferenceHead,
    critics: [&CriticBank; 3],
    batch: &ObjectiveBatch,
) -> Result<(f64, Vec<Matrix>)> {
    let tape = Tape::new();
    let terms = smooth_terms(&tape, model, smoother, forward, backward, batch, critics)?;
    let loss = total(terms.weighted.iter().copied())?;
    let grads = tape.backward(loss, &terms.params)?.into_vec();
    Ok((loss.item(), grads))
}

/// Heads may be frozen with zero learning rates, so only the structural
/// settings are checked here.
fn check_head_config(model: &DiffusionModel, data: &AggregateSeries, cfg: &TrainConfig) -> Result<()> {
    let bad = |m: String| Err(InferError::Learn(LearnError::Config(m)));
    if cfg.critic_steps == 0 || cfg.batch_size == 0 || cfg.width == 0 {
        return bad("counts must be positive".into());
    }
    if !(cfg.learning_rate >= 0.0) || !(cfg.critic_learning_rate >= 0.0) {
        return bad("learning rates must be nonnegative".into());
    }
    if !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) {
        return bad("Adam betas must lie in [0, 1)".into());
    }
    if data.len() < 2 {
        return bad("need at least two observed times".into());
    }
    if model.obs_dim() != data.dim() {
        return Err(InferError::Mismatch(format!(
            "model observes {} dimensions, data has {}",
            model.obs_dim(),
            data.dim()
        )));
    }
    for (t, c) in data.times().iter().zip(data.counts()) {
        if c < cfg.batch_size {
            return bad(format!("time {t} has {c} samples, fewer than the batch size {}", cfg.batch_size));
        }
    }
    Ok(())
}

fn guard(iteration: usize, timestep: Option<usize>, values: &[f64], what: &str) -> Result<()> {
    if values.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT) {
        return Err(LearnError::Diverged {
            iteration,
            timestep,
            detail: format!("{what} {values:?}"),
        }
        .into());
    }
    Ok(())
}

/// W1 between `f(π_t)` and each observed bag, with as many samples as the
/// bag holds.
fn head_fit(model: &DiffusionModel, head: &InferenceHead, data: &AggregateSeries, rng: &Rng) -> Result<Vec<f64>> {
    let most = data.counts().into_iter().max().unwrap_or(0);
    let states = head.sample(data, most, rng)?;
    let mut out = Vec::with_capacity(states.len());
    for (j, &t) in head.times.iter().enumerate() {
        let bag = data.get(t)?;
        let y = model.observe(&states[j].slice(ndarray::s![0..bag.nrows(), ..]).to_owned())?;
        out.push(ot::w1_exact(&y, bag)?.0);
    }
    Ok(out)
}

fn train_one_way(model: &DiffusionModel, data: &AggregateSeries, cfg: &TrainConfig, variant: HeadVariant) -> Result<(InferenceHead, TrainReport)> {
    check_head_config(model, data, cfg)?;
    let start = Instant::now();
    let (m, n) = (data.dim(), model.hidden_dim());
    let root = Rng::new(cfg.seed).child(variant.key());
    let mut head = InferenceHead::new(variant, m, n, cfg.width, n, data.times().to_vec(), root.child(0).stream().next_u64())?;
    let mut d1 = cfg.critic_bank(data.len(), m, root.child(1).stream().next_u64())?;
    let mut d2 = cfg.critic_bank(data.len(), n, root.child(2).stream().next_u64())?;
    let mut adam = Adam::new(cfg.generator_adam(), &head.parameters());
    let mut report = TrainReport {
        times: head.times.clone(),
        ..TrainReport::default()
    };
    let steps = root.child(3);
    for it in 0..cfg.iterations {
        let iter_rng = steps.child(it as u64);
        let mut last = vec![0.0; head.times.len()];
        for s in 0..cfg.critic_steps {
            let batch = ObjectiveBatch::draw(data, &head.times, cfg.batch_size, head.noise_dim, &iter_rng.derive(&[0, s as u64]))?;
            let states = head.states(&batch.inputs)?;
            for (j, &t) in head.times.iter().enumerate() {
                let key = |k: u64| iter_rng.derive(&[k, s as u64, j as u64]);
                let step = d1.update(j, &batch.reals[j], &model.observe(&states[j])?, &key(1))?;
                guard(it, Some(t), &[step.objective, step.penalty], "data-fit critic")?;
                last[j] = step.objective;
                if let Some(p) = head.predecessor(j) {
                    let prop = propagate(
                        model,
                        transition(model, &head),
                        &states[p],
                        gap(t, head.times[p]),
                        &batch.propagation.child(t as u64),
                    )?;
                    let step = d2.update(j, &prop, &states[j], &key(2))?;
                    guard(it, Some(t), &[step.objective, step.penalty], "consistency critic")?;
                }
            }
        }
        let batch = ObjectiveBatch::draw(data, &head.times, cfg.batch_size, head.noise_dim, &iter_rng.child(1))?;
        let (loss, grads) = filter_gradient(model, &head, &d1, &d2, &batch)?;
        guard(it, None, &[loss], "head loss")?;
        adam.config.learning_rate = cfg.schedule.rate(cfg.learning_rate, it, cfg.iterations);
        adam.step(head.parameters_mut(), &grads)?;
        report.generator_loss.push(loss);
        report.critic_objectives.push(last);
    }
    report.final_w1 = head_fit(model, &head, data, &root.child(4))?;
    report.wall_time = start.elapsed().as_secs_f64();
    Ok((head, report))
}

/// Forward head: reads `Y_0..Y_t` and is fit to `W(f(π_t), Y_t)` plus the
/// consistency `W(π_t, g-propagated π_{t−1})`, with `f` and `g` frozen.
pub fn train_filter(model: &DiffusionModel, data: &AggregateSeries, cfg: &TrainConfig) -> Result<(InferenceHead, TrainReport)> {
    train_one_way(model, data, cfg, HeadVariant::Forward)
}

/// Backward head: the same objective on the reversed sequence, with a
/// jointly trained reverse drift `g_b` in the consistency term.
pub fn train_backward(model: &DiffusionModel, data: &AggregateSeries, cfg: &TrainConfig) -> Result<(InferenceHead, TrainReport)> {
    train_one_way(model, data, cfg, HeadVariant::Backward)
}

/// Smoothing head, started from the forward head's parameters and fit to
/// `W(f(π^s_t), Y_t) + λ₁W(π^s_t, π^f_t) + λ₂W(π^s_t, π^b_t)`.
pub fn train_smoother(
    model: &DiffusionModel,
    data: &AggregateSeries,
    forward: &InferenceHead,
    backward: &InferenceHead,
    cfg: &TrainConfig,
) -> Result<(InferenceHead, TrainReport)> {
    check_head_config(model, data, cfg)?;
    forward.require(HeadVariant::Forward)?;
    backward.require(HeadVariant::Backward)?;
    if forward.times != data.times() || backward.times != data.times() {
        return Err(InferError::Mismatch(format!(
            "heads read {:?} and {:?}, data has {:?}",
            forward.times,
            backward.times,
            data.times()
        )));
    }
    let start = Instant::now();
    let (m, n) = (data.dim(), model.hidden_dim());
    let root = Rng::new(cfg.seed).child(HeadVariant::Smoothing.key());
    let mut head = InferenceHead {
        variant: HeadVariant::Smoothing,
        backward_drift: None,
        ..forward.clone()
    };
    let weights = weights_for(&head.times)?;
    let mut d1 = cfg.critic_bank(data.len(), m, root.child(1).stream().next_u64())?;
    let mut d2 = cfg.critic_bank(data.len(), n, root.child(2).stream().next_u64())?;
    let mut d3 = cfg.critic_bank(data.len(), n, root.child(5).stream().next_u64())?;
    let mut adam = Adam::new(cfg.generator_adam(), &head.parameters());
    let mut report = TrainReport {
        times: head.times.clone(),
        ..TrainReport::default()
    };
    let steps = root.child(3);
    for it in 0..cfg.iterations {
        let iter_rng = steps.child(it as u64);
        let mut last = vec![0.0; head.times.len()];
        for s in 0..cfg.critic_steps {
            let batch = ObjectiveBatch::draw(data, &head.times, cfg.batch_size, head.noise_dim, &iter_rng.derive(&[0, s as u64]))?;
            let ps = head.states(&batch.inputs)?;
            let pf = forward.states(&batch.inputs)?;
            let pb = backward.states(&batch.inputs)?;
            for (j, (&t, w)) in head.times.iter().zip(&weights).enumerate() {
                let key = |k: u64| iter_rng.derive(&[k, s as u64, j as u64]);
                let step = d1.update(j, &batch.reals[j], &model.observe(&ps[j])?, &key(1))?;
                guard(it, Some(t), &[step.objective, step.penalty], "data-fit critic")?;
                last[j] = step.objective;
                if w.lambda1 > 0.0 {
                    let step = d2.update(j, &pf[j], &ps[j], &key(2))?;
                    guard(it, Some(t), &[step.objective, step.penalty], "forward barycenter critic")?;
                }
                if w.lambda2 > 0.0 {
                    let step = d3.update(j, &pb[j], &ps[j], &key(3))?;
                    guard(it, Some(t), &[step.objective, step.penalty], "backward barycenter critic")?;
                }
            }
        }
        let batch = ObjectiveBatch::draw(data, &head.times, cfg.batch_size, head.noise_dim, &iter_rng.child(1))?;
        let (loss, grads) = smoothing_gradient(model, &head, forward, backward, [&d1, &d2, &d3], &batch)?;
        guard(it, None, &[loss], "smoothing loss")?;
        adam.config.learning_rate = cfg.schedule.rate(cfg.learning_rate, it, cfg.iterations);
        adam.step(head.parameters_mut(), &grads)?;
        report.generator_loss.push(loss);
        report.critic_objectives.push(last);
    }
    report.final_w1 = head_fit(model, &head, data, &root.child(4))?;
    report.wall_time = start.elapsed().as_secs_f64();
    Ok((head, report))
}

/// Samples of `Y_{T+1}`: `π_T` from the forward head, one observation gap
/// of `g`, then `f`. Only the head's own times are read.
pub fn predict_next(
    model: &DiffusionModel,
    head: &InferenceHead,
    observations: &AggregateSeries,
    num_samples: usize,
    rng: &Rng,
) -> Result<Matrix> {
    head.require(HeadVariant::Forward)?;
    if head.hidden_dim() != model.hidden_dim() {
        return Err(InferError::Mismatch("head and model hidden dimensions differ".into()));
    }
    let states = head.sample(observations, num_samples, &rng.child(0))?;
    let last = states.last().expect("nonempty head times");
    Ok(model.observe(&model.propagate(last, &rng.child(1))?)?)
}

/// Samples of the missing `Y_k`: `π^s_{k−1}`, one gap of `g`, then `f`.
pub fn predict_missing(
    model: &DiffusionModel,
    smoother: &InferenceHead,
    observations: &AggregateSeries,
    k: usize,
    num_samples: usize,
    rng: &Rng,
) -> Result<Matrix> {
    smoother.require(HeadVariant::Smoothing)?;
    let (first, last) = (smoother.times[0], *smoother.times.last().expect("nonempty"));
    if k <= first || k >= last {
        return Err(InferError::Boundary { k, first, last });
    }
    if smoother.times.contains(&k) {
        return Err(InferError::Mismatch(format!("time {k} is observed by the smoother")));
    }
    let j = smoother
        .times
        .iter()
        .position(|&t| t == k - 1)
        .ok_or_else(|| InferError::Mismatch(format!("time {} is not observed", k - 1)))?;
    let states = smoother.sample(observations, num_samples, &rng.child(0))?;
    Ok(model.observe(&model.propagate(&states[j], &rng.child(1))?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learn::Schedule;

    fn identity(n: usize) -> Mlp {
        Mlp::from_parts(vec![n, n], vec![Activation::Linear], vec![Matrix::eye(n)], vec![Matrix::zeros((1, n))]).unwrap()
    }

    /// `f = id`, `g = 0`, noise scaled by `sigma`.
    fn still_model(n: usize, sigma: f64) -> DiffusionModel {
        let g = Mlp::zeros(&[n, 4, n], Activation::Relu).unwrap();
        DiffusionModel::from_parts(g, identity(n), Matrix::eye(n) * sigma, 0.2, 1).unwrap()
    }

    fn series(times: &[usize], rows: usize, dim: usize, seed: u64) -> AggregateSeries {
        let rng = Rng::new(seed);
        let batches = times.iter().map(|&t| rng.child(t as u64).normal_matrix(rows, dim)).collect();
        AggregateSeries::new(times.to_vec(), batches, "test").unwrap()
    }

    fn quick(iterations: usize) -> TrainConfig {
        TrainConfig {
            iterations,
            critic_steps: 2,
            batch_size: 16,
            width: 8,
            schedule: Schedule::Constant,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn barycenter_cases() {
        let w = barycenter_weights(4, 4).unwrap();
        assert_eq!((w.lambda1, w.lambda2), (1.0, 0.0));
        let w = barycenter_weights(0, 4).unwrap();
        assert_eq!((w.lambda1, w.lambda2), (0.0, 1.0));
        let w = barycenter_weights(2, 4).unwrap();
        assert_eq!((w.lambda1, w.lambda2), (0.5, 0.5));
        assert!(matches!(barycenter_weights(5, 4), Err(InferError::OutOfRange { .. })));
        assert!(barycenter_weights(0, 0).is_err());
    }

    #[test]
    fn weights_use_relative_time() {
        let w = weights_for(&[2, 3, 5]).unwrap();
        assert_eq!(w[0].lambda1, 0.0);
        assert_eq!(w[2].lambda1, 1.0);
        assert!((w[1].lambda1 - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn reversing_twice_restores_order() {
        let head = InferenceHead::new(HeadVariant::Backward, 1, 1, 4, 1, vec![0, 1], 0).unwrap();
        assert_eq!(head.reading_order(), vec![1, 0]);
        assert_eq!(head.to_reading(head.reading_order()), head.times);
    }

    #[test]
    fn heads_are_causal_in_reading_order() {
        let data = series(&[0, 1, 2], 8, 2, 1);
        for variant in [HeadVariant::Forward, HeadVariant::Backward] {
            let head = InferenceHead::new(variant, 2, 2, 6, 2, vec![0, 1, 2], 3).unwrap();
            let inputs = head_inputs(&data, &head.times, 8, 2, &Rng::new(4)).unwrap();
            let base = head.states(&inputs).unwrap();
            let mut poked = inputs.clone();
            let last_read = *head.reading_order().last().unwrap();
            let j = head.times.iter().position(|&t| t == last_read).unwrap();
            poked.observations[j].mapv_inplace(|v| v + 5.0);
            let after = head.states(&poked).unwrap();
            for (i, (a, b)) in base.iter().zip(&after).enumerate() {
                assert_eq!(a == b, i != j, "{variant} time index {i}");
            }
        }
    }

    #[test]
    fn inputs_for_a_time_ignore_other_times() {
        let data = series(&[0, 1, 2], 10, 1, 2);
        let rng = Rng::new(9);
        let all = head_inputs(&data, &[0, 1, 2], 25, 1, &rng).unwrap();
        let some = head_inputs(&data, &[0, 2], 25, 1, &rng).unwrap();
        assert_eq!(all.observations[2], some.observations[1]);
        assert_eq!(all.noise[0], some.noise[0]);
        assert_eq!(all.batch_size(), 25);
    }

    #[test]
    fn zero_learning_rate_leaves_heads_unchanged() {
        let model = still_model(1, 0.1);
        let data = series(&[0, 1, 2], 40, 1, 5);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..quick(3)
        };
        let (fwd, _) = train_filter(&model, &data, &cfg).unwrap();
        let fresh = InferenceHead::new(HeadVariant::Forward, 1, 1, 8, 1, vec![0, 1, 2], Rng::new(0).child(20).child(0).stream().next_u64()).unwrap();
        assert_eq!(fwd, fresh);
        let (bwd, _) = train_backward(&model, &data, &cfg).unwrap();
        let fresh = InferenceHead::new(HeadVariant::Backward, 1, 1, 8, 1, vec![0, 1, 2], Rng::new(0).child(21).child(0).stream().next_u64()).unwrap();
        assert_eq!(bwd, fresh);
        let (smooth, _) = train_smoother(&model, &data, &fwd, &bwd, &cfg).unwrap();
        assert_eq!(smooth.rnn, fwd.rnn);
    }

    #[test]
    fn constant_critics_give_zero_head_gradient() {
        let model = still_model(2, 0.1);
        let data = series(&[0, 1, 3], 20, 2, 6);
        let zeros = |d: usize| CriticBank::from_critics(
            vec![Mlp::zeros(&[d, 4, 1], Activation::Relu).unwrap(); 3],
            Default::default(),
            1,
            Default::default(),
        )
        .unwrap();
        let batch = ObjectiveBatch::draw(&data, &[0, 1, 3], 16, 2, &Rng::new(1)).unwrap();
        for variant in [HeadVariant::Forward, HeadVariant::Backward] {
            let head = InferenceHead::new(variant, 2, 2, 5, 2, vec![0, 1, 3], 2).unwrap();
            let (_, grads) = filter_gradient(&model, &head, &zeros(2), &zeros(2), &batch).unwrap();
            assert_eq!(grads.len(), head.parameters().len());
            assert!(grads.iter().all(|g| g.iter().all(|&v| v == 0.0)));
        }
        let fwd = InferenceHead::new(HeadVariant::Forward, 2, 2, 5, 2, vec![0, 1, 3], 2).unwrap();
        let bwd = InferenceHead::new(HeadVariant::Backward, 2, 2, 5, 2, vec![0, 1, 3], 3).unwrap();
        let smooth = InferenceHead {
            variant: HeadVariant::Smoothing,
            ..fwd.clone()
        };
        let (_, grads) = smoothing_gradient(&model, &smooth, &fwd, &bwd, [&zeros(2), &zeros(2), &zeros(2)], &batch).unwrap();
        assert!(grads.iter().all(|g| g.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn smoothing_at_last_time_is_filtering_data_fit() {
        let model = still_model(2, 0.1);
        let data = series(&[0, 1, 3], 30, 2, 7);
        let cfg = quick(0);
        let bank = |seed| cfg.critic_bank(3, 2, seed).unwrap();
        let (d1, d2, d3, c2) = (bank(1), bank(2), bank(3), bank(4));
        let fwd = InferenceHead::new(HeadVariant::Forward, 2, 2, 6, 2, vec![0, 1, 3], 8).unwrap();
        let bwd = InferenceHead::new(HeadVariant::Backward, 2, 2, 6, 2, vec![0, 1, 3], 9).unwrap();
        let smooth = InferenceHead {
            variant: HeadVariant::Smoothing,
            ..fwd.clone()
        };
        let batch = ObjectiveBatch::draw(&data, &[0, 1, 3], 24, 2, &Rng::new(10)).unwrap();
        let s = smoothing_objective(&model, &smooth, &fwd, &bwd, [&d1, &d2, &d3], &batch).unwrap();
        let f = filter_objective(&model, &fwd, &d1, &c2, &batch).unwrap();
        assert_eq!(s.weights[2].lambda1, 1.0);
        assert_eq!(s.forward_term[2], 0.0);
        assert!((s.per_time[2] - f.data_fit[2]).abs() < 1e-9);
    }

    #[test]
    fn identity_propagation_returns_head_states() {
        let model = still_model(2, 0.0);
        let data = series(&[0, 1, 3], 12, 2, 11);
        let fwd = InferenceHead::new(HeadVariant::Forward, 2, 2, 6, 2, vec![0, 1, 3], 12).unwrap();
        let rng = Rng::new(13);
        let pred = predict_next(&model, &fwd, &data, 40, &rng).unwrap();
        assert_eq!(pred.dim(), (40, 2));
        assert_eq!(&pred, fwd.sample(&data, 40, &rng.child(0)).unwrap().last().unwrap());

        let smooth = InferenceHead {
            variant: HeadVariant::Smoothing,
            ..fwd.clone()
        };
        let pred = predict_missing(&model, &smooth, &data, 2, 33, &rng).unwrap();
        assert_eq!(pred.dim(), (33, 2));
        assert_eq!(pred, smooth.sample(&data, 33, &rng.child(0)).unwrap()[1]);
    }

    #[test]
    fn predictions_ignore_the_target_bag() {
        let model = still_model(2, 0.1);
        let full = series(&[0, 1, 2, 3], 12, 2, 14);
        let mut poisoned = full.batches().to_vec();
        poisoned[2].fill(1e300);
        let poisoned = AggregateSeries::new(vec![0, 1, 2, 3], poisoned, "poison").unwrap();
        let rng = Rng::new(15);
        let fwd = InferenceHead::new(HeadVariant::Forward, 2, 2, 6, 2, vec![0, 1], 16).unwrap();
        assert_eq!(
            predict_next(&model, &fwd, &full, 20, &rng).unwrap(),
            predict_next(&model, &fwd, &poisoned, 20, &rng).unwrap()
        );
        let smooth = InferenceHead {
            variant: HeadVariant::Smoothing,
            ..InferenceHead::new(HeadVariant::Forward, 2, 2, 6, 2, vec![0, 1, 3], 17).unwrap()
        };
        assert_eq!(
            predict_missing(&model, &smooth, &full, 2, 20, &rng).unwrap(),
            predict_missing(&model, &smooth, &poisoned, 2, 20, &rng).unwrap()
        );
    }

    #[test]
    fn missing_index_must_be_interior() {
        let model = still_model(1, 0.1);
        let data = series(&[0, 1, 3], 5, 1, 18);
        let smooth = InferenceHead {
            variant: HeadVariant::Smoothing,
            ..InferenceHead::new(HeadVariant::Forward, 1, 1, 4, 1, vec![0, 1, 3], 19).unwrap()
        };
        for k in [0, 3, 4] {
            assert!(matches!(
                predict_missing(&model, &smooth, &data, k, 4, &Rng::new(0)),
                Err(InferError::Boundary { .. })
            ));
        }
        assert!(predict_missing(&model, &smooth, &data, 1, 4, &Rng::new(0)).is_err());
    }

    #[test]
    fn missing_time_is_a_length_error() {
        let model = still_model(1, 0.1);
        let data = series(&[0, 1], 5, 1, 20);
        let fwd = InferenceHead::new(HeadVariant::Forward, 1, 1, 4, 1, vec![0, 1, 2], 21).unwrap();
        assert!(predict_next(&model, &fwd, &data, 4, &Rng::new(0)).is_err());
    }

    #[test]
    fn point_observations_collapse_the_filter() {
        let model = still_model(2, 0.0);
        let point = [0.5, -0.3];
        let bag = Matrix::from_shape_fn((64, 2), |(_, c)| point[c]);
        let data = AggregateSeries::new(vec![0, 1, 2], vec![bag.clone(), bag.clone(), bag], "point").unwrap();
        let cfg = TrainConfig {
            iterations: 400,
            critic_steps: 3,
            batch_size: 64,
            width: 16,
            learning_rate: 5e-3,
            critic_learning_rate: 5e-3,
            schedule: Schedule::Cosine,
            ..TrainConfig::default()
        };
        let (head, _) = train_filter(&model, &data, &cfg).unwrap();
        let states = head.sample(&data, 200, &Rng::new(22)).unwrap();
        for s in &states {
            let y = model.observe(s).unwrap();
            let err = y
                .rows()
                .into_iter()
                .map(|r| ((r[0] - point[0]).powi(2) + (r[1] - point[1]).powi(2)).sqrt())
                .sum::<f64>()
                / y.nrows() as f64;
            assert!(err < 0.05, "mean distance {err}");
        }
    }

    #[test]
    fn time_symmetric_data_fits_both_directions_alike() {
        let model = still_model(2, 0.1);
        let rng = Rng::new(24);
        let batches = (0..3).map(|t| rng.child(t).normal_matrix(400, 2)).collect();
        let data = AggregateSeries::new(vec![0, 1, 2], batches, "symmetric").unwrap();
        let cfg = TrainConfig {
            iterations: 1000,
            batch_size: 128,
            width: 16,
            learning_rate: 3e-4,
            ..TrainConfig::default()
        };
        let (_, fwd) = train_filter(&model, &data, &cfg).unwrap();
        let (_, bwd) = train_backward(&model, &data, &cfg).unwrap();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (a, b) = (mean(&fwd.final_w1), mean(&bwd.final_w1));
        assert!((a - b).abs() <= 0.2 * a.max(b), "forward {a}, backward {b}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let head = InferenceHead::new(HeadVariant::Backward, 2, 3, 5, 3, vec![0, 2, 5], 23).unwrap();
        let mut ckpt = Checkpoint::new();
        head.write_checkpoint(&mut ckpt, "backward.");
        let back = InferenceHead::from_checkpoint(&Checkpoint::from_text(&ckpt.to_text()).unwrap(), "backward.").unwrap();
        assert_eq!(back, head);
    }
}
