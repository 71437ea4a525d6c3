//! Wasserstein-1 tools: exact empirical W1 by optimal assignment, and the
//! critic networks that estimate it through the Kantorovich-Rubinstein dual
//!
//! ```text
//! W1(P, Q) = sup_{‖D‖_L ≤ 1} E_P[D] − E_Q[D]
//! ```

use thiserror::Error;

use crate::autodiff::{AutodiffError, Matrix, Tape, Var};
use crate::nn::{Activation, Adam, AdamConfig, BoundMlp, Mlp, NnError, Parametric};
use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum OtError {
    #[error("batches have {left} and {right} samples; subsample to equal sizes first")]
    UnequalSizes { left: usize, right: usize },
    #[error("batches have dimensions {left} and {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("empty batch")]
    Empty,
    #[error("critic index {index} out of range ({count} critics)")]
    CriticIndex { index: usize, count: usize },
    #[error("invalid Lipschitz constant {0}")]
    InvalidLipschitz(f64),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, OtError>;

/// A bijective pairing `i -> assignment[i]` between two equal-size batches.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub assignment: Vec<usize>,
    pub cost: f64,
}

fn euclidean(a: &Matrix, i: usize, b: &Matrix, j: usize) -> f64 {
    a.row(i)
        .iter()
        .zip(b.row(j).iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn check_batches(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.nrows() != b.nrows() {
        return Err(OtError::UnequalSizes {
            left: a.nrows(),
            right: b.nrows(),
        });
    }
    if a.ncols() != b.ncols() {
        return Err(OtError::DimensionMismatch {
            left: a.ncols(),
            right: b.ncols(),
        });
    }
    Ok(())
}

/// Mean matched cost of an assignment, summed in row order.
pub fn plan_cost(a: &Matrix, b: &Matrix, assignment: &[usize]) -> f64 {
    let total: f64 = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| euclidean(a, i, b, j))
        .sum();
    total / assignment.len() as f64
}

/// Exact empirical W1 between equal-size batches under Euclidean cost.
/// Empty batches are at distance zero.
pub fn w1_exact(a: &Matrix, b: &Matrix) -> Result<(f64, TransportPlan)> {
    check_batches(a, b)?;
    let n = a.nrows();
    if n == 0 {
        return Ok((
            0.0,
            TransportPlan {
                assignment: vec![],
                cost: 0.0,
            },
        ));
    }
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            cost[i * n + j] = euclidean(a, i, b, j);
        }
    }
    let (mut assignment, u, v) = hungarian(&cost, n);
    settle_ties(&cost, n, &u, &v, &mut assignment);
    let w = plan_cost(a, b, &assignment);
    Ok((
        w,
        TransportPlan {
            assignment,
            cost: w,
        },
    ))
}

/// Minimum-cost perfect matching on a dense `n x n` cost matrix, using the
/// shortest augmenting path form with row and column potentials.
/// Returns the column assigned to each row and the row and column potentials
/// (index 0 virtual).
fn hungarian(cost: &[f64], n: usize) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    // Index 0 is a virtual row/column; real ones are 1..=n.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut min_to = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if reduced < min_to[j] {
                    min_to[j] = reduced;
                    way[j] = j0;
                }
                if min_to[j] < delta {
                    delta = min_to[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_to[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[row_of[j] - 1] = j - 1;
    }
    (assignment, u, v)
}

fn row_order_total(cost: &[f64], n: usize, assignment: &[usize]) -> f64 {
    assignment.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum()
}

const TIE_CYCLE: usize = 4;

/// Among optimal assignments whose costs tie in exact arithmetic, prefer the
/// one with the smallest floating-point total. Candidates rotate rows along
/// short cycles of tight edges (zero reduced cost under the final potentials),
/// so every candidate is optimal too. The search is exhaustive for small
/// batches and capped for large ones, where the tight graph can be dense.
fn settle_ties(cost: &[f64], n: usize, u: &[f64], v: &[f64], assignment: &mut [usize]) {
    let scale = cost.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    let tol = 64.0 * f64::EPSILON * scale.max(f64::MIN_POSITIVE);
    let tight: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| cost[i * n + j] - u[i + 1] - v[j + 1] <= tol).collect())
        .collect();
    if tight.iter().all(|t| t.len() == 1) {
        return;
    }
    let mut search = TieSearch {
        cost,
        n,
        tight: &tight,
        row_of: vec![0; n],
        total: row_order_total(cost, n, assignment),
        budget: 100_000 + 16 * n * n,
    };
    let mut improved = true;
    while improved && search.budget > 0 {
        improved = false;
        for start in 0..n {
            for (i, &j) in assignment.iter().enumerate() {
                search.row_of[j] = i;
            }
            improved |= search.improve(assignment, &mut vec![start]);
        }
    }
}

struct TieSearch<'a> {
    cost: &'a [f64],
    n: usize,
    tight: &'a [Vec<usize>],
    row_of: Vec<usize>,
    total: f64,
    budget: usize,
}

impl TieSearch<'_> {
    /// Depth-first search for a cycle `path[0] -> col of path[1] -> ... ->
    /// col of path[0]` that lowers the total; applies the first one found.
    fn improve(&mut self, assignment: &mut [usize], path: &mut Vec<usize>) -> bool {
        let last = *path.last().unwrap();
        for &col in &self.tight[last] {
            if self.budget == 0 {
                return false;
            }
            self.budget -= 1;
            let next = self.row_of[col];
            if next == path[0] && path.len() > 1 {
                self.budget = self.budget.saturating_sub(self.n);
                let old: Vec<usize> = path.iter().map(|&r| assignment[r]).collect();
                for k in 0..path.len() {
                    assignment[path[k]] = old[(k + 1) % path.len()];
                }
                let candidate = row_order_total(self.cost, self.n, assignment);
                if candidate < self.total {
                    self.total = candidate;
                    return true;
                }
                for (k, &r) in path.iter().enumerate() {
                    assignment[r] = old[k];
                }
            } else if path.len() < TIE_CYCLE && !path.contains(&next) {
                path.push(next);
                let found = self.improve(assignment, path);
                path.pop();
                if found {
                    return true;
                }
            }
        }
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LipschitzMode {
    /// Penalty weight on `(‖∇D(x̂)‖ − 1)²` at random interpolates.
    GradientPenalty(f64),
    /// Clamp every critic parameter to `[−c, c]` after each step.
    WeightClip(f64),
}

impl Default for LipschitzMode {
    fn default() -> Self {
        LipschitzMode::GradientPenalty(10.0)
    }
}

/// One scalar critic per observation time, each with its own optimizer.
#[derive(Debug, Clone)]
pub struct CriticBank {
    critics: Vec<Mlp>,
    optimizers: Vec<Adam>,
    pub mode: LipschitzMode,
    pub critic_steps: usize,
}

/// Values from one critic step, measured before the update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticStep {
    pub objective: f64,
    pub penalty: f64,
}

impl CriticBank {
    /// `count` four-layer critics of the given hidden width.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        count: usize,
        input_dim: usize,
        width: usize,
        activation: Activation,
        mode: LipschitzMode,
        critic_steps: usize,
        adam: AdamConfig,
        seed: u64,
    ) -> Result<Self> {
        let rng = Rng::new(seed);
        let critics = (0..count)
            .map(|t| {
                Mlp::new(
                    &[input_dim, width, width, width, 1],
                    activation,
                    rng.child(t as u64).stream().next_u64(),
                )
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Self::from_critics(critics, mode, critic_steps, adam)
    }

    pub fn from_critics(critics: Vec<Mlp>, mode: LipschitzMode, critic_steps: usize, adam: AdamConfig) -> Result<Self> {
        match mode {
            LipschitzMode::GradientPenalty(c) | LipschitzMode::WeightClip(c) if !(c > 0.0) => {
                return Err(OtError::InvalidLipschitz(c))
            }
            _ => {}
        }
        let optimizers = critics.iter().map(|c| Adam::new(adam, &c.parameters())).collect();
        Ok(Self {
            critics,
            optimizers,
            mode,
            critic_steps,
        })
    }

    pub fn len(&self) -> usize {
        self.critics.len()
    }

    pub fn is_empty(&self) -> bool {
        self.critics.is_empty()
    }

    pub fn critic(&self, t: usize) -> Result<&Mlp> {
        self.critics.get(t).ok_or(OtError::CriticIndex {
            index: t,
            count: self.critics.len(),
        })
    }

    pub fn critics(&self) -> &[Mlp] {
        &self.critics
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        for opt in &mut self.optimizers {
            opt.config.learning_rate = lr;
        }
    }

    /// One ascent step of critic `t` on its objective minus the penalty, or a
    /// plain step followed by clamping in weight-clip mode.
    pub fn update(&mut self, t: usize, real: &Matrix, fake: &Matrix, rng: &Rng) -> Result<CriticStep> {
        let count = self.critics.len();
        let critic = self.critics.get_mut(t).ok_or(OtError::CriticIndex { index: t, count })?;
        let tape = Tape::new();
        let bound = critic.bind(&tape);
        let objective = critic_objective(&bound, tape.leaf(real.clone()), tape.leaf(fake.clone()))?;
        let (loss, penalty) = match self.mode {
            LipschitzMode::GradientPenalty(lambda) => {
                let pen = gradient_penalty(&bound, real, fake, lambda, rng, &tape)?;
                (pen.sub(objective)?, pen.item())
            }
            LipschitzMode::WeightClip(_) => (objective.neg(), 0.0),
        };
        let params = bound.params();
        let grads = tape.backward(loss, &params)?.into_vec();
        self.optimizers[t].step(critic.parameters_mut(), &grads)?;
        if let LipschitzMode::WeightClip(c) = self.mode {
            for p in critic.parameters_mut() {
                p.mapv_inplace(|v| v.clamp(-c, c));
            }
        }
        Ok(CriticStep {
            objective: objective.item(),
            penalty,
        })
    }
}

/// `mean D(real) − mean D(fake)`.
pub fn critic_objective<'t>(critic: &BoundMlp<'t>, real: Var<'t>, fake: Var<'t>) -> Result<Var<'t>> {
    if real.shape().0 == 0 || fake.shape().0 == 0 {
        return Err(OtError::Empty);
    }
    let on_real = critic.forward(real)?.mean()?;
    let on_fake = critic.forward(fake)?.mean()?;
    Ok(on_real.sub(on_fake)?)
}

/// `λ · mean_i (‖∇D(x̂_i)‖ − 1)²` with `x̂_i = u_i real_i + (1 − u_i) fake_i`
/// and one `u_i ~ U(0, 1)` per row. The input gradient is recorded on the
/// tape, so the result can be differentiated with respect to the critic.
pub fn gradient_penalty<'t>(
    critic: &BoundMlp<'t>,
    real: &Matrix,
    fake: &Matrix,
    lambda: f64,
    rng: &Rng,
    tape: &'t Tape,
) -> Result<Var<'t>> {
    check_batches(real, fake)?;
    if real.nrows() == 0 {
        return Err(OtError::Empty);
    }
    let u = rng.uniform_matrix(real.nrows(), 1, 0.0, 1.0);
    let mixed = &u * real + &((1.0 - &u) * fake);
    let x = tape.leaf(mixed);
    let out = critic.forward(x)?.sum();
    let grad = tape.grad(out, &[x])?[0];
    let norms = grad.square()?.sum_cols().add_scalar(1e-12)?.sqrt()?;
    Ok(norms.add_scalar(-1.0)?.square()?.mean()?.scale(lambda)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn brute_force(a: &Matrix, b: &Matrix) -> f64 {
        fn permute(k: usize, perm: &mut Vec<usize>, best: &mut f64, a: &Matrix, b: &Matrix) {
            if k == perm.len() {
                *best = best.min(plan_cost(a, b, perm));
                return;
            }
            for i in k..perm.len() {
                perm.swap(k, i);
                permute(k + 1, perm, best, a, b);
                perm.swap(k, i);
            }
        }
        let mut perm: Vec<usize> = (0..a.nrows()).collect();
        let mut best = f64::INFINITY;
        permute(0, &mut perm, &mut best, a, b);
        best
    }

    #[test]
    fn identical_batches_are_at_zero() {
        let a = Rng::new(1).normal_matrix(7, 3);
        let (w, plan) = w1_exact(&a, &a).unwrap();
        assert_eq!(w, 0.0);
        assert_eq!(plan.assignment, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn single_pair() {
        let (w, _) = w1_exact(&array![[0.0]], &array![[1.0]]).unwrap();
        assert_eq!(w, 1.0);
    }

    #[test]
    fn matches_brute_force_five_points() {
        let rng = Rng::new(2);
        let a = rng.child(0).normal_matrix(5, 2);
        let b = rng.child(1).normal_matrix(5, 2);
        let (w, plan) = w1_exact(&a, &b).unwrap();
        assert_eq!(w, brute_force(&a, &b));
        let mut seen = plan.assignment.clone();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn unequal_sizes_rejected() {
        let err = w1_exact(&Matrix::zeros((3, 2)), &Matrix::zeros((4, 2))).unwrap_err();
        assert!(err.to_string().contains("subsample"));
    }

    #[test]
    fn translation_covariance_on_grid() {
        // Dyadic coordinates keep the shifted distances exact.
        let a = array![[0.0, 0.5], [1.0, -2.0], [0.25, 0.25]];
        let b = array![[1.0, 1.0], [-0.5, 0.0], [2.0, 0.75]];
        let shift = array![[3.0, -8.0]];
        let (w, _) = w1_exact(&a, &b).unwrap();
        let (ws, _) = w1_exact(&(&a + &shift), &(&b + &shift)).unwrap();
        assert_eq!(w, ws);
    }

    #[test]
    fn constant_critic_objective_is_zero() {
        let mut net = Mlp::new(&[1, 4, 1], Activation::Relu, 0).unwrap();
        for w in net.weights_mut() {
            w.fill(0.0);
        }
        let tape = Tape::new();
        let bound = net.bind(&tape);
        let obj = critic_objective(&bound, tape.leaf(array![[1.0], [2.0]]), tape.leaf(array![[-5.0], [9.0]])).unwrap();
        assert_eq!(obj.item(), 0.0);
        let pen = gradient_penalty(&bound, &array![[1.0], [2.0]], &array![[0.0], [3.0]], 10.0, &Rng::new(0), &tape).unwrap();
        assert!((pen.item() - 10.0).abs() < 1e-4);
    }

    fn linear_critic(w: Matrix) -> Mlp {
        let n = w.nrows();
        Mlp::from_parts(vec![n, 1], vec![Activation::Linear], vec![w], vec![Matrix::zeros((1, 1))]).unwrap()
    }

    #[test]
    fn linear_critic_objective_and_penalty() {
        let net = linear_critic(array![[1.0]]);
        let tape = Tape::new();
        let bound = net.bind(&tape);
        let obj = critic_objective(&bound, tape.leaf(array![[0.5], [1.5]]), tape.leaf(array![[-1.0], [1.0]])).unwrap();
        assert_eq!(obj.item(), 1.0);

        let unit = linear_critic(array![[0.6], [0.8]]);
        let tape = Tape::new();
        let bound = unit.bind(&tape);
        let real = Rng::new(4).normal_matrix(10, 2);
        let fake = Rng::new(5).normal_matrix(10, 2);
        let pen = gradient_penalty(&bound, &real, &fake, 10.0, &Rng::new(0), &tape).unwrap();
        assert!(pen.item() < 1e-10);
    }

    #[test]
    fn penalty_parameter_gradient_matches_finite_differences() {
        let net = Mlp::new(&[2, 5, 5, 1], Activation::Tanh, 3).unwrap();
        let real = Rng::new(6).normal_matrix(8, 2);
        let fake = Rng::new(7).normal_matrix(8, 2);
        let noise = Rng::new(8);
        let eval = |m: &Mlp| {
            let tape = Tape::new();
            let b = m.bind(&tape);
            gradient_penalty(&b, &real, &fake, 10.0, &noise, &tape).unwrap().item()
        };
        let tape = Tape::new();
        let bound = net.bind(&tape);
        let pen = gradient_penalty(&bound, &real, &fake, 10.0, &noise, &tape).unwrap();
        let grads = tape.backward(pen, &bound.params()).unwrap().into_vec();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (p, g) in grads.iter().enumerate() {
            for idx in 0..g.len() {
                let mut plus = net.clone();
                let mut minus = net.clone();
                plus.parameters_mut()[p].as_slice_mut().unwrap()[idx] += h;
                minus.parameters_mut()[p].as_slice_mut().unwrap()[idx] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = g.as_slice().unwrap()[idx];
                worst = worst.max((fd - an).abs() / (1e-6 + fd.abs().max(an.abs())));
            }
        }
        assert!(worst < 1e-3, "relative error {worst}");
    }

    fn bank_for(mode: LipschitzMode, lr: f64) -> CriticBank {
        let cfg = AdamConfig {
            learning_rate: lr,
            ..AdamConfig::default()
        };
        CriticBank::new(2, 1, 8, Activation::Relu, mode, 5, cfg, 1).unwrap()
    }

    #[test]
    fn zero_learning_rate_leaves_critic() {
        let mut bank = bank_for(LipschitzMode::GradientPenalty(10.0), 0.0);
        let before = bank.critic(1).unwrap().clone();
        let real = Rng::new(1).normal_matrix(16, 1);
        let fake = Rng::new(2).normal_matrix(16, 1);
        bank.update(1, &real, &fake, &Rng::new(3)).unwrap();
        assert_eq!(*bank.critic(1).unwrap(), before);
        assert!(bank.update(2, &real, &fake, &Rng::new(3)).is_err());
    }

    #[test]
    fn weight_clip_bounds_parameters() {
        let mut bank = bank_for(LipschitzMode::WeightClip(0.01), 1e-2);
        let real = Rng::new(1).normal_matrix(16, 1);
        let fake = Rng::new(2).normal_matrix(16, 1).mapv(|v| v + 3.0);
        bank.update(0, &real, &fake, &Rng::new(3)).unwrap();
        for p in bank.critic(0).unwrap().parameters() {
            assert!(p.iter().all(|v| v.abs() <= 0.01));
        }
    }

    #[test]
    fn objective_increases_on_fixed_batches() {
        let mut bank = bank_for(LipschitzMode::GradientPenalty(10.0), 1e-3);
        let real = Rng::new(1).normal_matrix(64, 1).mapv(|v| 0.3 * v + 2.0);
        let fake = Rng::new(2).normal_matrix(64, 1).mapv(|v| 0.3 * v - 2.0);
        let mut values = Vec::new();
        for s in 0..50 {
            values.push(bank.update(0, &real, &fake, &Rng::new(100 + s)).unwrap().objective);
        }
        let drops = values.windows(2).filter(|w| w[1] < w[0]).count();
        assert!(drops <= 5, "{drops} decreases: {values:?}");
        assert!(values[49] > values[0]);
    }
}
