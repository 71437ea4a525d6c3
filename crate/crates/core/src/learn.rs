//! Adversarial training of the hidden dynamic `(f, g)` from aggregate bags,
//! and the two observation-space baselines (OU and a one-hidden-layer ReLU
//! drift).
//!
//! Each iteration runs `k` critic rounds, each on freshly simulated batches,
//! then one generator step that ascends `Σ_t mean D_t(f(x_t))` with the
//! gradient taken through every Euler step of the simulation, noise frozen.

use std::io::Write;
use std::time::Instant;

use thiserror::Error;

use crate::autodiff::{AutodiffError, Matrix, Tape, Var};
use crate::data::{empirical_batch, AggregateSeries, DataError};
use crate::nn::{Activation, Adam, AdamConfig, BoundMlp, Checkpoint, CheckpointError, Entry, Mlp, NnError, Parametric};
use crate::ot::{self, CriticBank, LipschitzMode, OtError};
use crate::rng::Rng;
use crate::sde::{self, DiffusionModel, Drift, InitialSpec, SdeError};

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged at iteration {iteration}{}: {detail}", timestep.map(|t| format!(", time {t}")).unwrap_or_default())]
    Diverged {
        iteration: usize,
        timestep: Option<usize>,
        detail: String,
    },
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

pub type Result<T> = std::result::Result<T, LearnError>;

/// Generator loss above this magnitude counts as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Constant,
    /// Half-cosine decay from the base rate to zero over the run.
    Cosine,
}

impl Schedule {
    pub fn rate(self, base: f64, iteration: usize, iterations: usize) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::Cosine => {
                let frac = iteration as f64 / iterations.max(1) as f64;
                base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub critic_steps: usize,
    pub batch_size: usize,
    /// Generator (and head) learning rate.
    pub learning_rate: f64,
    pub critic_learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub schedule: Schedule,
    pub seed: u64,
    /// Hidden dimension; the observation dimension when unset.
    pub hidden_dim: Option<usize>,
    pub width: usize,
    pub lipschitz: LipschitzMode,
    pub critic_activation: Activation,
    pub substeps_per_obs: usize,
    pub dt: f64,
    /// Noise root Σ^{1/2}; `0.1 I` when unset.
    pub sigma_root: Option<Matrix>,
    /// Initial hidden distribution; standard normal when unset.
    pub initial: Option<InitialSpec>,
    /// Draw a fresh initial batch for every critic round (as in the
    /// training listing) rather than once per iteration.
    pub fresh_initial_per_critic_step: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            critic_steps: 5,
            batch_size: 256,
            learning_rate: 1e-3,
            critic_learning_rate: 1e-3,
            beta1: 0.5,
            beta2: 0.9,
            schedule: Schedule::Cosine,
            seed: 0,
            hidden_dim: None,
            width: 32,
            lipschitz: LipschitzMode::GradientPenalty(10.0),
            critic_activation: Activation::Relu,
            substeps_per_obs: 5,
            dt: 0.2,
            sigma_root: None,
            initial: None,
            fresh_initial_per_critic_step: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LearnError::Config(m.to_string()));
        if self.critic_steps == 0 || self.batch_size == 0 || self.width == 0 || self.substeps_per_obs == 0 {
            return bad("counts must be positive");
        }
        if !(self.learning_rate > 0.0) || !(self.critic_learning_rate > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        Ok(())
    }

    pub(crate) fn generator_adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: 1e-8,
        }
    }

    pub(crate) fn critic_adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.critic_learning_rate,
            ..self.generator_adam()
        }
    }

    pub fn hidden_dim_for(&self, obs_dim: usize) -> usize {
        self.hidden_dim.unwrap_or(obs_dim)
    }

    pub fn sigma_root_for(&self, n: usize) -> Result<Matrix> {
        match &self.sigma_root {
            Some(r) if r.dim() == (n, n) => Ok(r.clone()),
            Some(r) => Err(LearnError::Config(format!(
                "sigma_root is {:?}, hidden dimension is {n}",
                r.dim()
            ))),
            None => Ok(Matrix::eye(n) * 0.1),
        }
    }

    pub fn initial_for(&self, n: usize) -> Result<InitialSpec> {
        match &self.initial {
            Some(spec) if spec.dim() == n => Ok(spec.clone()),
            Some(spec) => Err(LearnError::Config(format!(
                "initial distribution has dimension {}, hidden dimension is {n}",
                spec.dim()
            ))),
            None => Ok(InitialSpec::StandardNormal(n)),
        }
    }

    pub(crate) fn critic_bank(&self, count: usize, dim: usize, seed: u64) -> Result<CriticBank> {
        Ok(CriticBank::new(
            count,
            dim,
            self.width,
            self.critic_activation,
            self.lipschitz,
            self.critic_steps,
            self.critic_adam(),
            seed,
        )?)
    }
}

/// Per-iteration trace plus end-of-run fit.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub times: Vec<usize>,
    /// `critic_objectives[i][j]`: last critic objective of iteration `i` at
    /// `times[j]`.
    pub critic_objectives: Vec<Vec<f64>>,
    pub generator_loss: Vec<f64>,
    pub wall_time: f64,
    /// `w1_exact` between generated and observed bags, per time.
    pub final_w1: Vec<f64>,
}

impl TrainReport {
    pub fn iterations(&self) -> usize {
        self.generator_loss.len()
    }

    /// One row per iteration: `iteration,gen_loss,critic_t<time>...`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        write!(out, "iteration,gen_loss")?;
        for t in &self.times {
            write!(out, ",critic_t{t}")?;
        }
        writeln!(out)?;
        for (i, (loss, critics)) in self.generator_loss.iter().zip(&self.critic_objectives).enumerate() {
            write!(out, "{i},{loss}")?;
            for c in critics {
                write!(out, ",{c}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Drift of an observation-space baseline.
#[derive(Debug, Clone, PartialEq)]
pub enum BaselineDrift {
    /// `θ(μ − y)` with `θ = exp(log_theta)`, so θ stays positive.
    Ou { log_theta: Matrix, mu: Matrix },
    /// One hidden ReLU layer: a sum of ramps.
    Nn(Mlp),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    Ou,
    Nn,
}

impl BaselineKind {
    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Ou => "OU",
            BaselineKind::Nn => "NN",
        }
    }
}

/// Dynamics that live directly on observations: the map `f` is the
/// identity and the hidden dimension equals the observation dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationModel {
    pub drift: BaselineDrift,
    pub sigma_root: Matrix,
    pub dt: f64,
    pub substeps_per_obs: usize,
}

impl ObservationModel {
    pub fn new(kind: BaselineKind, dim: usize, width: usize, sigma_root: Matrix, dt: f64, substeps: usize, seed: u64) -> Result<Self> {
        let drift = match kind {
            BaselineKind::Ou => BaselineDrift::Ou {
                log_theta: Matrix::from_elem((1, 1), 0.5f64.ln()),
                mu: Matrix::zeros((1, dim)),
            },
            BaselineKind::Nn => BaselineDrift::Nn(Mlp::new(&[dim, width, dim], Activation::Relu, seed)?),
        };
        Ok(Self {
            drift,
            sigma_root,
            dt,
            substeps_per_obs: substeps,
        })
    }

    pub fn kind(&self) -> BaselineKind {
        match self.drift {
            BaselineDrift::Ou { .. } => BaselineKind::Ou,
            BaselineDrift::Nn(_) => BaselineKind::Nn,
        }
    }

    pub fn dim(&self) -> usize {
        self.sigma_root.nrows()
    }

    /// OU parameters `(θ, μ)`, if this is the OU baseline.
    pub fn ou_parameters(&self) -> Option<(f64, Vec<f64>)> {
        match &self.drift {
            BaselineDrift::Ou { log_theta, mu } => Some((log_theta[[0, 0]].exp(), mu.iter().copied().collect())),
            BaselineDrift::Nn(_) => None,
        }
    }

    /// Advances observation samples by `gaps` observation gaps.
    pub fn propagate(&self, y: &Matrix, gaps: usize, rng: &Rng) -> Result<Matrix> {
        let path = sde::simulate_drift(self, &self.sigma_root, self.dt, self.substeps_per_obs, y, gaps, rng)?;
        Ok(path.into_iter().last().expect("at least one state"))
    }

    pub fn write_checkpoint(&self, ckpt: &mut Checkpoint) {
        match &self.drift {
            BaselineDrift::Ou { log_theta, mu } => {
                ckpt.set_meta("baseline", "OU");
                ckpt.insert("log_theta", Entry::Matrix(log_theta.clone()));
                ckpt.insert("mu", Entry::Matrix(mu.clone()));
            }
            BaselineDrift::Nn(g) => {
                ckpt.set_meta("baseline", "NN");
                ckpt.insert("g", Entry::Mlp(g.clone()));
            }
        }
        ckpt.insert("sigma_root", Entry::Matrix(self.sigma_root.clone()));
        ckpt.set_meta("dt", format!("{:.17e}", self.dt));
        ckpt.set_meta("substeps_per_obs", self.substeps_per_obs);
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let missing = |k: &str| LearnError::Config(format!("checkpoint lacks {k}"));
        let dt: f64 = ckpt.meta("dt").and_then(|v| v.parse().ok()).ok_or_else(|| missing("dt"))?;
        let substeps: usize = ckpt
            .meta("substeps_per_obs")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| missing("substeps_per_obs"))?;
        let sigma_root = ckpt.matrix("sigma_root")?.clone();
        let drift = match ckpt.meta("baseline") {
            Some("OU") => BaselineDrift::Ou {
                log_theta: ckpt.matrix("log_theta")?.clone(),
                mu: ckpt.matrix("mu")?.clone(),
            },
            Some("NN") => BaselineDrift::Nn(ckpt.mlp("g")?.clone()),
            _ => return Err(missing("baseline kind")),
        };
        Ok(Self {
            drift,
            sigma_root,
            dt,
            substeps_per_obs: substeps,
        })
    }
}

impl Drift for ObservationModel {
    fn dim(&self) -> usize {
        self.dim()
    }

    fn drift(&self, x: &Matrix) -> sde::Result<Matrix> {
        match &self.drift {
            BaselineDrift::Ou { log_theta, mu } => {
                let theta = log_theta[[0, 0]].exp();
                Ok((mu - x) * theta)
            }
            BaselineDrift::Nn(g) => g.drift(x),
        }
    }
}

impl Parametric for ObservationModel {
    fn parameters(&self) -> Vec<&Matrix> {
        match &self.drift {
            BaselineDrift::Ou { log_theta, mu } => vec![log_theta, mu],
            BaselineDrift::Nn(g) => g.parameters(),
        }
    }

    fn parameters_mut(&mut self) -> Vec<&mut Matrix> {
        match &mut self.drift {
            BaselineDrift::Ou { log_theta, mu } => vec![log_theta, mu],
            BaselineDrift::Nn(g) => g.parameters_mut(),
        }
    }
}

/// Parameters of `(g, f)` in that order.
impl Parametric for DiffusionModel {
    fn parameters(&self) -> Vec<&Matrix> {
        let mut p = self.g.parameters();
        p.extend(self.f.parameters());
        p
    }

    fn parameters_mut(&mut self) -> Vec<&mut Matrix> {
        let mut p = self.g.parameters_mut();
        p.extend(self.f.parameters_mut());
        p
    }
}

/// A drift recorded on a tape.
pub(crate) enum BoundDrift<'t> {
    Mlp(BoundMlp<'t>),
    Ou { log_theta: Var<'t>, mu: Var<'t> },
}

impl<'t> BoundDrift<'t> {
    pub(crate) fn eval(&self, x: Var<'t>) -> Result<Var<'t>> {
        match self {
            BoundDrift::Mlp(g) => Ok(g.forward(x)?),
            BoundDrift::Ou { log_theta, mu } => Ok(mu.sub(x)?.mul(log_theta.exp()?)?),
        }
    }
}

/// Euler path on a tape with precomputed increments, one per Euler step.
/// Returns the state after every `substeps` steps, starting with `x0`.
pub(crate) fn euler_path<'t>(
    drift: &BoundDrift<'t>,
    x0: Var<'t>,
    increments: &[Matrix],
    substeps: usize,
    dt: f64,
) -> Result<Vec<Var<'t>>> {
    let tape = x0.tape();
    let mut out = vec![x0];
    let mut x = x0;
    for (s, inc) in increments.iter().enumerate() {
        let g = drift.eval(x)?;
        x = x.add(g.scale(dt)?)?.add(tape.leaf(inc.clone()))?;
        if (s + 1) % substeps == 0 {
            out.push(x);
        }
    }
    Ok(out)
}

/// The increments `simulate_drift` would draw for these arguments.
pub(crate) fn increments(rng: &Rng, rows: usize, sigma_root: &Matrix, dt: f64, steps: usize) -> Vec<Matrix> {
    (0..steps)
        .map(|s| sde::increment(&rng.child(s as u64), rows, sigma_root, dt))
        .collect()
}

/// What the training loop needs from either the hidden model or a baseline.
trait Generator: Parametric {
    fn sigma_root(&self) -> &Matrix;
    fn dt(&self) -> f64;
    fn substeps(&self) -> usize;
    fn initial(&self, data: &AggregateSeries, count: usize, rng: &Rng) -> Result<Matrix>;
    fn simulate_observed(&self, x0: &Matrix, gaps: usize, rng: &Rng) -> Result<Vec<Matrix>>;
    /// Bound drift, bound observation map, and the trainable parameter nodes.
    fn bind<'t>(&self, tape: &'t Tape) -> (BoundDrift<'t>, Option<BoundMlp<'t>>, Vec<Var<'t>>);
}

struct Legend<'a> {
    model: &'a mut DiffusionModel,
    initial: InitialSpec,
}

impl Parametric for Legend<'_> {
    fn parameters(&self) -> Vec<&Matrix> {
        self.model.parameters()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Matrix> {
        self.model.parameters_mut()
    }
}

impl Generator for Legend<'_> {
    fn sigma_root(&self) -> &Matrix {
        &self.model.sigma_root
    }

    fn dt(&self) -> f64 {
        self.model.dt
    }

    fn substeps(&self) -> usize {
        self.model.substeps_per_obs
    }

    fn initial(&self, _data: &AggregateSeries, count: usize, rng: &Rng) -> Result<Matrix> {
        Ok(sde::sample_initial(&self.initial, count, rng)?)
    }

    fn simulate_observed(&self, x0: &Matrix, gaps: usize, rng: &Rng) -> Result<Vec<Matrix>> {
        self.model
            .simulate(x0, gaps, rng)?
            .iter()
            .map(|x| self.model.observe(x).map_err(LearnError::from))
            .collect()
    }

    fn bind<'t>(&self, tape: &'t Tape) -> (BoundDrift<'t>, Option<BoundMlp<'t>>, Vec<Var<'t>>) {
        let g = self.model.g.bind(tape);
        let f = self.model.f.bind(tape);
        let mut params = g.params();
        params.extend(f.params());
        (BoundDrift::Mlp(g), Some(f), params)
    }
}

struct Baseline<'a> {
    model: &'a mut ObservationModel,
}

impl Parametric for Baseline<'_> {
    fn parameters(&self) -> Vec<&Matrix> {
        self.model.parameters()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Matrix> {
        self.model.parameters_mut()
    }
}

impl Generator for Baseline<'_> {
    fn sigma_root(&self) -> &Matrix {
        &self.model.sigma_root
    }

    fn dt(&self) -> f64 {
        self.model.dt
    }

    fn substeps(&self) -> usize {
        self.model.substeps_per_obs
    }

    /// Resamples the first observed bag with replacement.
    fn initial(&self, data: &AggregateSeries, count: usize, rng: &Rng) -> Result<Matrix> {
        let bag = &data.batches()[0];
        let idx: Vec<usize> = (0..count)
            .map(|i| rng.child(i as u64).stream().below(bag.nrows()))
            .collect();
        Ok(bag.select(ndarray::Axis(0), &idx))
    }

    fn simulate_observed(&self, x0: &Matrix, gaps: usize, rng: &Rng) -> Result<Vec<Matrix>> {
        Ok(sde::simulate_drift(
            &*self.model,
            &self.model.sigma_root,
            self.model.dt,
            self.model.substeps_per_obs,
            x0,
            gaps,
            rng,
        )?)
    }

    fn bind<'t>(&self, tape: &'t Tape) -> (BoundDrift<'t>, Option<BoundMlp<'t>>, Vec<Var<'t>>) {
        match &self.model.drift {
            BaselineDrift::Ou { log_theta, mu } => {
                let lt = tape.leaf(log_theta.clone());
                let m = tape.leaf(mu.clone());
                (BoundDrift::Ou { log_theta: lt, mu: m }, None, vec![lt, m])
            }
            BaselineDrift::Nn(g) => {
                let b = g.bind(tape);
                let params = b.params();
                (BoundDrift::Mlp(b), None, params)
            }
        }
    }
}

/// Generator loss `−Σ_j mean D_j(f(x_{offsets[j]}))` and its gradient with
/// respect to the generator parameters, noise held fixed.
fn pathwise<G: Generator + ?Sized>(
    gen: &G,
    critics: &CriticBank,
    offsets: &[usize],
    x0: &Matrix,
    rng: &Rng,
) -> Result<(f64, Vec<Matrix>)> {
    let gaps = offsets.iter().copied().max().unwrap_or(0);
    let steps = gaps * gen.substeps();
    let inc = increments(rng, x0.nrows(), gen.sigma_root(), gen.dt(), steps);
    let tape = Tape::new();
    let (drift, observe, params) = gen.bind(&tape);
    let path = euler_path(&drift, tape.leaf(x0.clone()), &inc, gen.substeps(), gen.dt())?;
    let mut loss: Option<Var> = None;
    for (j, &off) in offsets.iter().enumerate() {
        let y = match &observe {
            Some(f) => f.forward(path[off])?,
            None => path[off],
        };
        let d = critics.critic(j)?.bind(&tape);
        let term = d.forward(y)?.mean()?.neg();
        loss = Some(match loss {
            Some(l) => l.add(term)?,
            None => term,
        });
    }
    let loss = loss.ok_or_else(|| LearnError::Config("no observed times".into()))?;
    let grads = tape.backward(loss, &params)?.into_vec();
    Ok((loss.item(), grads))
}

/// Pathwise gradient of `−Σ_t mean D_t(f(x_t))` with respect to the
/// parameters of `(g, f)`. Critic `j` scores time `offsets[j]` counted in
/// observation gaps from `x0`; Euler noise for step `s` comes from
/// `rng.child(s)`, exactly as in [`DiffusionModel::simulate`].
pub fn generator_gradient(
    model: &DiffusionModel,
    critics: &CriticBank,
    offsets: &[usize],
    x0: &Matrix,
    rng: &Rng,
) -> Result<(f64, Vec<Matrix>)> {
    let mut copy = model.clone();
    let legend = Legend {
        model: &mut copy,
        initial: InitialSpec::StandardNormal(model.hidden_dim()),
    };
    pathwise(&legend, critics, offsets, x0, rng)
}

fn check_data(data: &AggregateSeries, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    if data.len() < 2 {
        return Err(LearnError::Config("need at least two observed times".into()));
    }
    for (t, c) in data.times().iter().zip(data.counts()) {
        if c < cfg.batch_size {
            return Err(LearnError::Config(format!(
                "time {t} has {c} samples, fewer than the batch size {}",
                cfg.batch_size
            )));
        }
    }
    Ok(())
}

const KEY_CRITIC: u64 = 0;
const KEY_GENERATOR: u64 = 1;
const KEY_FINAL: u64 = 2;

fn run<G: Generator>(gen: &mut G, data: &AggregateSeries, cfg: &TrainConfig, bank: &mut CriticBank, root: &Rng) -> Result<TrainReport> {
    let start = Instant::now();
    let first = data.first_time();
    let offsets: Vec<usize> = data.times().iter().map(|t| t - first).collect();
    let gaps = *offsets.last().expect("nonempty");
    let mut adam = Adam::new(cfg.generator_adam(), &gen.parameters());
    let mut report = TrainReport {
        times: data.times().to_vec(),
        ..TrainReport::default()
    };
    let n = cfg.batch_size;
    for it in 0..cfg.iterations {
        let iter_rng = root.child(it as u64);
        let mut last = vec![0.0; offsets.len()];
        let shared_x0 = if cfg.fresh_initial_per_critic_step {
            None
        } else {
            Some(gen.initial(data, n, &iter_rng.derive(&[KEY_CRITIC, u64::MAX]))?)
        };
        for s in 0..cfg.critic_steps {
            let step_rng = iter_rng.derive(&[KEY_CRITIC, s as u64]);
            let x0 = match &shared_x0 {
                Some(x) => x.clone(),
                None => gen.initial(data, n, &step_rng.child(0))?,
            };
            let fakes = gen.simulate_observed(&x0, gaps, &step_rng.child(1)).map_err(|e| diverged(it, None, e))?;
            for (j, (&t, &off)) in data.times().iter().zip(&offsets).enumerate() {
                let real = empirical_batch(data, t, n, &step_rng.derive(&[2, t as u64]))?;
                let step = bank.update(j, &real, &fakes[off], &step_rng.derive(&[3, t as u64]))?;
                if !step.objective.is_finite() || !step.penalty.is_finite() {
                    return Err(LearnError::Diverged {
                        iteration: it,
                        timestep: Some(t),
                        detail: format!("critic objective {} penalty {}", step.objective, step.penalty),
                    });
                }
                last[j] = step.objective;
            }
        }
        let gen_rng = iter_rng.child(KEY_GENERATOR);
        let x0 = gen.initial(data, n, &gen_rng.child(0))?;
        let (loss, grads) = pathwise(&*gen, bank, &offsets, &x0, &gen_rng.child(1)).map_err(|e| diverged(it, None, e))?;
        if !loss.is_finite() || loss.abs() > DIVERGENCE_LIMIT || grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(LearnError::Diverged {
                iteration: it,
                timestep: None,
                detail: format!("generator loss {loss:.3e}"),
            });
        }
        adam.config.learning_rate = cfg.schedule.rate(cfg.learning_rate, it, cfg.iterations);
        adam.step(gen.parameters_mut(), &grads)?;
        report.generator_loss.push(loss);
        report.critic_objectives.push(last);
    }
    report.final_w1 = final_fit(gen, data, &offsets, &root.child(u64::MAX - KEY_FINAL))?;
    report.wall_time = start.elapsed().as_secs_f64();
    Ok(report)
}

fn diverged(iteration: usize, timestep: Option<usize>, e: LearnError) -> LearnError {
    match e {
        LearnError::Sde(err) => LearnError::Diverged {
            iteration,
            timestep,
            detail: err.to_string(),
        },
        other => other,
    }
}

fn final_fit<G: Generator>(gen: &G, data: &AggregateSeries, offsets: &[usize], rng: &Rng) -> Result<Vec<f64>> {
    let gaps = *offsets.last().expect("nonempty");
    let most = data.counts().into_iter().max().unwrap_or(0);
    let x0 = gen.initial(data, most, &rng.child(0))?;
    let sims = gen.simulate_observed(&x0, gaps, &rng.child(1))?;
    let mut out = Vec::with_capacity(offsets.len());
    for (bag, &off) in data.batches().iter().zip(offsets) {
        let fake = sims[off].slice(ndarray::s![0..bag.nrows(), ..]).to_owned();
        out.push(ot::w1_exact(&fake, bag)?.0);
    }
    Ok(out)
}

/// Initial model for a configuration, before any training.
pub fn initial_model(obs_dim: usize, cfg: &TrainConfig) -> Result<DiffusionModel> {
    let n = cfg.hidden_dim_for(obs_dim);
    Ok(DiffusionModel::new(
        n,
        obs_dim,
        cfg.width,
        cfg.sigma_root_for(n)?,
        cfg.dt,
        cfg.substeps_per_obs,
        Rng::new(cfg.seed).child(10).stream().next_u64(),
    )?)
}

/// Adversarial fit of `(f, g)` to the observed bags.
pub fn train_dynamics(data: &AggregateSeries, cfg: &TrainConfig) -> Result<(DiffusionModel, CriticBank, TrainReport)> {
    check_data(data, cfg)?;
    let mut model = initial_model(data.dim(), cfg)?;
    let root = Rng::new(cfg.seed);
    let mut bank = cfg.critic_bank(data.len(), data.dim(), root.child(11).stream().next_u64())?;
    let initial = cfg.initial_for(model.hidden_dim())?;
    let report = {
        let mut legend = Legend {
            model: &mut model,
            initial,
        };
        run(&mut legend, data, cfg, &mut bank, &root.child(12))?
    };
    Ok((model, bank, report))
}

/// Same adversarial loop with dynamics on observation space.
pub fn train_baseline(data: &AggregateSeries, kind: BaselineKind, cfg: &TrainConfig) -> Result<(ObservationModel, TrainReport)> {
    check_data(data, cfg)?;
    let m = data.dim();
    let root = Rng::new(cfg.seed);
    let mut model = ObservationModel::new(
        kind,
        m,
        cfg.width,
        cfg.sigma_root_for(m)?,
        cfg.dt,
        cfg.substeps_per_obs,
        root.child(20).stream().next_u64(),
    )?;
    let mut bank = cfg.critic_bank(data.len(), m, root.child(21).stream().next_u64())?;
    let report = run(&mut Baseline { model: &mut model }, data, cfg, &mut bank, &root.child(22))?;
    Ok((model, report))
}
