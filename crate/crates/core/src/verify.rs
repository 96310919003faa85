//! Independent oracles for the selection machinery.
//!
//! * [`one_step_bilevel_fd`] differentiates the dev loss after a single
//!   weighted model step by central differences in the scorer parameters.
//!   With `θ_0` fixed, this is the exact derivative the analytic scorer
//!   gradient approximates (exactly for SGD and Momentum).
//! * [`taylor_error_scan`] compares forward-difference rewards against exact
//!   dot products over a range of step sizes.
//! * [`brute_force_bilevel`] enumerates example weights on a simplex grid and
//!   solves the convex inner problem at each point.

use serde::Serialize;

use crate::data::LabeledExample;
use crate::engine::taylor_reward;
use crate::error::{Error, Result};
use crate::models::{ExampleScorer, LossModel, MlpClassifier};
use crate::numeric::{self, axpy, check_finite, dot, norm};
use crate::optim::Optimizer;

/// Central-difference gradient of `f` at `x`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            probe[k] = x[k] + h;
            let plus = f(&probe);
            probe[k] = x[k] - h;
            let minus = f(&probe);
            probe[k] = x[k];
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// `|a − f| / max(|a|, |f|, floor)` per coordinate, where the floor is
/// `1e-3` times the largest magnitude in either vector (and at least
/// `1e-14`). Coordinates that are structurally zero pick up finite-difference
/// round-off of order `1e-16 / h`; the floor measures them against the
/// gradient's overall scale instead of against themselves.
pub fn relative_errors(analytic: &[f64], fd: &[f64]) -> Vec<f64> {
    let scale = analytic
        .iter()
        .chain(fd)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-14);
    analytic
        .iter()
        .zip(fd)
        .map(|(a, f)| (a - f).abs() / a.abs().max(f.abs()).max(floor))
        .collect()
}

pub fn max_relative_error(analytic: &[f64], fd: &[f64]) -> f64 {
    relative_errors(analytic, fd)
        .into_iter()
        .fold(0.0, f64::max)
}

/// Coordinate-wise comparison of an analytic gradient against a numerical one.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numerical: Vec<f64>,
    pub abs_error: Vec<f64>,
    pub rel_error: Vec<f64>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn new(analytic: Vec<f64>, numerical: Vec<f64>, tolerance: f64) -> Result<Self> {
        numeric::check_len("gradient check", analytic.len(), numerical.len())?;
        let abs_error = analytic
            .iter()
            .zip(&numerical)
            .map(|(a, f)| (a - f).abs())
            .collect();
        let rel_error = relative_errors(&analytic, &numerical);
        let max_rel_error = rel_error.iter().copied().fold(0.0, f64::max);
        Ok(GradCheckReport {
            analytic,
            numerical,
            abs_error,
            rel_error,
            max_rel_error,
            tolerance,
            pass: max_rel_error <= tolerance,
        })
    }
}

/// Mean dev loss after one step from `theta0` on the batch weighted by the
/// scorer at `psi`. The optimizer is cloned, so `opt` is never advanced.
#[allow(clippy::too_many_arguments)]
pub fn one_step_dev_loss<M: LossModel>(
    model: &M,
    scorer: &ExampleScorer,
    theta0: &[f64],
    psi: &[f64],
    train_batch: &[&LabeledExample],
    dev_batch: &[&LabeledExample],
    opt: &Optimizer,
) -> Result<f64> {
    let p = scorer.batch_probs(psi, train_batch)?;
    let mut g = vec![0.0; theta0.len()];
    for (ex, &w) in train_batch.iter().zip(&p) {
        axpy(
            w,
            &model.loss_and_grad(theta0, &ex.features, ex.label)?.1,
            &mut g,
        )?;
    }
    let mut theta1 = theta0.to_vec();
    opt.clone().step(&mut theta1, &g)?;
    if dev_batch.is_empty() {
        return Err(Error::Empty("dev batch"));
    }
    let mut loss = 0.0;
    for ex in dev_batch {
        loss += model.loss(&theta1, &ex.features, ex.label)?;
    }
    let loss = loss / dev_batch.len() as f64;
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFinite("one-step dev loss"))
    }
}

/// `∂J/∂ψ` by central differences, where `J(ψ)` is [`one_step_dev_loss`].
/// The analytic ascent direction of the engine should equal the negation.
#[allow(clippy::too_many_arguments)]
pub fn one_step_bilevel_fd<M: LossModel>(
    model: &M,
    scorer: &ExampleScorer,
    theta0: &[f64],
    psi: &[f64],
    train_batch: &[&LabeledExample],
    dev_batch: &[&LabeledExample],
    opt: &Optimizer,
    h: f64,
) -> Result<Vec<f64>> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::config(format!(
            "finite-difference step must be > 0, got {h}"
        )));
    }
    // Surface errors before the infallible closure below.
    one_step_dev_loss(model, scorer, theta0, psi, train_batch, dev_batch, opt)?;
    let fd = central_difference(
        |p| {
            one_step_dev_loss(model, scorer, theta0, p, train_batch, dev_batch, opt)
                .unwrap_or(f64::NAN)
        },
        psi,
        h,
    );
    check_finite("finite-difference hypergradient", &fd)?;
    Ok(fd)
}

/// Result of [`taylor_error_scan`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaylorScan {
    /// `(ε, max_i |taylor_i − exact_i|)`.
    pub points: Vec<(f64, f64)>,
    /// Max over the batch of the relative error at each `ε`.
    pub max_rel_error: Vec<f64>,
    /// Least-squares slope of `log error` against `log ε`; `None` when an
    /// error is exactly zero or fewer than two points exist.
    pub slope: Option<f64>,
}

/// Forward-difference rewards along `v` against exact `vᵀ∇ℓ_i`.
pub fn taylor_error_scan<M: LossModel>(
    model: &M,
    batch: &[&LabeledExample],
    theta: &[f64],
    v: &[f64],
    eps_list: &[f64],
) -> Result<TaylorScan> {
    if batch.is_empty() {
        return Err(Error::Empty("taylor scan batch"));
    }
    if eps_list.iter().any(|&e| !(e > 0.0)) || eps_list.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::config(
            "eps_list must be positive and strictly descending",
        ));
    }
    let exact = batch
        .iter()
        .map(|ex| dot(v, &model.loss_and_grad(theta, &ex.features, ex.label)?.1))
        .collect::<Result<Vec<_>>>()?;
    let mut points = Vec::with_capacity(eps_list.len());
    let mut max_rel_error = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        let (mut abs, mut rel) = (0.0f64, 0.0f64);
        for (ex, &e) in batch.iter().zip(&exact) {
            let err = (taylor_reward(model, v, ex, theta, eps)? - e).abs();
            abs = abs.max(err);
            rel = rel.max(if e == 0.0 {
                if err == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                err / e.abs()
            });
        }
        points.push((eps, abs));
        max_rel_error.push(rel);
    }
    Ok(TaylorScan {
        slope: log_log_slope(&points),
        points,
        max_rel_error,
    })
}

fn log_log_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 || points.iter().any(|&(_, e)| !(e > 0.0)) {
        return None;
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    Some(sxy / sxx)
}

/// A few training examples, a dev set and an L2-regularized softmax
/// regression, so the weighted inner problem is strictly convex.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyProblem {
    pub train: Vec<LabeledExample>,
    pub dev: Vec<LabeledExample>,
    pub classes: usize,
    pub l2: f64,
}

impl TinyProblem {
    /// Two binary examples that differ in label; the dev set is a copy of
    /// the first, which therefore deserves all the weight.
    pub fn dev_matches_first() -> Self {
        let a = LabeledExample::new(vec![1.0, 0.2], 1, 0);
        let b = LabeledExample::new(vec![1.0, -0.2], 0, 0);
        TinyProblem {
            dev: vec![a.clone()],
            train: vec![a, b],
            classes: 2,
            l2: 0.1,
        }
    }

    pub fn dim(&self) -> usize {
        self.train[0].features.len()
    }

    pub fn model(&self) -> MlpClassifier {
        MlpClassifier::new(self.dim(), 0, self.classes)
    }

    /// `Σ w_i ℓ_i(θ) + (λ/2)‖θ‖²` and its gradient.
    pub fn inner_objective(&self, weights: &[f64], theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let model = self.model();
        let mut value = 0.5 * self.l2 * dot(theta, theta)?;
        let mut grad: Vec<f64> = theta.iter().map(|t| self.l2 * t).collect();
        for (ex, &w) in self.train.iter().zip(weights) {
            let (l, g) = model.loss_and_grad(theta, &ex.features, ex.label)?;
            value += w * l;
            axpy(w, &g, &mut grad)?;
        }
        Ok((value, grad))
    }

    pub fn dev_loss(&self, theta: &[f64]) -> Result<f64> {
        let model = self.model();
        let mut total = 0.0;
        for ex in &self.dev {
            total += model.loss(theta, &ex.features, ex.label)?;
        }
        Ok(total / self.dev.len() as f64)
    }

    fn validate(&self) -> Result<()> {
        if self.train.is_empty() || self.train.len() > 3 {
            return Err(Error::config("tiny problem needs 1 to 3 training examples"));
        }
        if self.dev.is_empty() {
            return Err(Error::config("tiny problem needs a dev example"));
        }
        if !(self.l2 > 0.0) {
            return Err(Error::config(
                "tiny problem needs l2 > 0 for a strictly convex inner problem",
            ));
        }
        Ok(())
    }
}

/// Inner solver settings.
pub const INNER_TOLERANCE: f64 = 1e-10;
const INNER_MAX_ITERS: usize = 200_000;

/// Gradient descent with Armijo backtracking until `‖∇‖ ≤ INNER_TOLERANCE`.
/// The step size never grows, so once Armijo holds it stays below `1/L`
/// and each iteration contracts the gradient.
pub fn solve_inner(problem: &TinyProblem, weights: &[f64], start: &[f64]) -> Result<Vec<f64>> {
    let mut theta = start.to_vec();
    let (mut value, mut grad) = problem.inner_objective(weights, &theta)?;
    let mut step = 1.0;
    for _ in 0..INNER_MAX_ITERS {
        let gn2 = dot(&grad, &grad)?;
        if gn2.sqrt() <= INNER_TOLERANCE {
            return Ok(theta);
        }
        loop {
            let trial: Vec<f64> = theta.iter().zip(&grad).map(|(t, g)| t - step * g).collect();
            let (v, g) = problem.inner_objective(weights, &trial)?;
            // The slack admits steps whose decrease is below the resolution
            // of `value`, which happens long before the gradient reaches 1e-10.
            let slack = 8.0 * f64::EPSILON * value.abs();
            if v <= value - 0.5 * step * gn2 + slack || step < 1e-12 {
                theta = trial;
                value = v;
                grad = g;
                break;
            }
            step *= 0.5;
        }
    }
    Err(Error::NoConvergence {
        iterations: INNER_MAX_ITERS,
        grad_norm: norm(&grad),
    })
}

/// Weight vectors `k / (r − 1)` with nonnegative integer `k` summing to
/// `r − 1`, in lexicographic order of `k`.
pub fn simplex_grid(m: usize, resolution: usize) -> Vec<Vec<f64>> {
    fn rec(m: usize, remaining: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if prefix.len() + 1 == m {
            prefix.push(remaining);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for k in 0..=remaining {
            prefix.push(k);
            rec(m, remaining - k, prefix, out);
            prefix.pop();
        }
    }
    let total = resolution - 1;
    let mut out = Vec::new();
    rec(m, total, &mut Vec::new(), &mut out);
    out.into_iter()
        .map(|k| k.into_iter().map(|c| c as f64 / total as f64).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LandscapePoint {
    pub weights: Vec<f64>,
    pub dev_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BruteForceResult {
    /// First grid point (in grid order) attaining the lowest dev loss.
    pub best_weights: Vec<f64>,
    pub best_dev_loss: f64,
    pub landscape: Vec<LandscapePoint>,
}

/// Exhaustive search over example weights on a simplex grid.
pub fn brute_force_bilevel(
    problem: &TinyProblem,
    grid_resolution: usize,
) -> Result<BruteForceResult> {
    problem.validate()?;
    if grid_resolution < 11 {
        return Err(Error::config(format!(
            "grid_resolution must be >= 11, got {grid_resolution}"
        )));
    }
    let zero = vec![0.0; problem.model().num_params()];
    let mut warm = zero.clone();
    let mut landscape = Vec::new();
    for weights in simplex_grid(problem.train.len(), grid_resolution) {
        warm = solve_inner(problem, &weights, &warm)?;
        let dev_loss = problem.dev_loss(&warm)?;
        landscape.push(LandscapePoint { weights, dev_loss });
    }
    let best = landscape.iter().fold(
        &landscape[0],
        |b, p| if p.dev_loss < b.dev_loss { p } else { b },
    );
    Ok(BruteForceResult {
        best_weights: best.weights.clone(),
        best_dev_loss: best.dev_loss,
        landscape: landscape.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{dds_train_step, scorer_gradient, ScoreEstimator, StepOptions};
    use crate::models::ExampleScorer;
    use crate::numeric::Rng;
    use crate::optim::OptimizerConfig;

    #[test]
    fn central_difference_on_cubic() {
        let fd = central_difference(|x| x[0].powi(3) + 2.0 * x[1], &[2.0, -1.0], 1e-4);
        assert!((fd[0] - 12.0).abs() < 1e-7 && (fd[1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn report_pass_flag() {
        let r = GradCheckReport::new(vec![1.0, 2.0], vec![1.0, 2.001], 1e-3).unwrap();
        assert!(r.pass && (r.max_rel_error - 0.001 / 2.001).abs() < 1e-12);
        let r = GradCheckReport::new(vec![1.0], vec![1.1], 1e-3).unwrap();
        assert!(!r.pass);
    }

    fn fixture(
        seed: u64,
    ) -> (
        MlpClassifier,
        ExampleScorer,
        Vec<f64>,
        Vec<f64>,
        Vec<LabeledExample>,
        Vec<LabeledExample>,
    ) {
        let mut rng = Rng::new(seed);
        let model = MlpClassifier::new(2, 4, 2);
        let scorer = ExampleScorer::new(2, 3);
        let theta = model.init(&mut rng);
        let psi = scorer.init(&mut rng);
        let mut draw = |label| LabeledExample::new(vec![rng.normal(), rng.normal()], label, 0);
        let train = vec![draw(0), draw(1)];
        let dev = vec![draw(1), draw(0), draw(1)];
        (model, scorer, theta, psi, train, dev)
    }

    #[test]
    fn engine_matches_one_step_fd_for_sgd() {
        for seed in 0..5 {
            let (model, scorer, theta, psi, train, dev) = fixture(seed);
            let tr: Vec<&LabeledExample> = train.iter().collect();
            let dv: Vec<&LabeledExample> = dev.iter().collect();
            let opt = Optimizer::new(OptimizerConfig::sgd(0.5), theta.len()).unwrap();
            let fd =
                one_step_bilevel_fd(&model, &scorer, &theta, &psi, &tr, &dv, &opt, 1e-4).unwrap();

            let (mut t, mut p) = (theta.clone(), psi.clone());
            let mut ot = opt.clone();
            let mut op = Optimizer::new(OptimizerConfig::sgd(1.0), psi.len()).unwrap();
            let opts = StepOptions {
                hold_scorer: true,
                ..StepOptions::from(&crate::engine::DdsConfig::default())
            };
            let report = dds_train_step(
                &model, &scorer, &mut t, &mut p, &mut ot, &mut op, &tr, &dv, &opts,
            )
            .unwrap();
            let analytic = scorer_gradient(
                &scorer,
                &psi,
                &tr,
                &report.rewards,
                ScoreEstimator::Weighted,
            )
            .unwrap();
            let neg_fd: Vec<f64> = fd.iter().map(|v| -v).collect();
            let err = max_relative_error(&analytic, &neg_fd);
            assert!(err < 1e-3, "seed {seed}: {err}");
        }
    }

    #[test]
    fn frozen_scorer_has_zero_hypergradient() {
        let (model, scorer, theta, psi, train, dev) = fixture(3);
        let scorer = scorer.frozen(true);
        let tr: Vec<&LabeledExample> = train.iter().collect();
        let dv: Vec<&LabeledExample> = dev.iter().collect();
        let opt = Optimizer::new(OptimizerConfig::sgd(0.5), theta.len()).unwrap();
        let fd = one_step_bilevel_fd(&model, &scorer, &theta, &psi, &tr, &dv, &opt, 1e-4).unwrap();
        assert!(fd.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn fd_is_second_order_in_h() {
        let (model, scorer, theta, psi, train, dev) = fixture(8);
        let tr: Vec<&LabeledExample> = train.iter().collect();
        let dv: Vec<&LabeledExample> = dev.iter().collect();
        let opt = Optimizer::new(OptimizerConfig::sgd(0.5), theta.len()).unwrap();
        let at = |h| one_step_bilevel_fd(&model, &scorer, &theta, &psi, &tr, &dv, &opt, h).unwrap();
        let (a, b, c) = (at(4e-2), at(2e-2), at(1e-2));
        let d1: f64 = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        let d2: f64 = b
            .iter()
            .zip(&c)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        let ratio = d1 / d2;
        assert!((3.0..=5.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn taylor_scan_cases() {
        let model = MlpClassifier::new(3, 6, 3);
        let theta = model.init(&mut Rng::new(2));
        let batch = [
            LabeledExample::new(vec![0.4, -1.0, 0.7], 0, 0),
            LabeledExample::new(vec![-0.3, 0.9, 0.2], 2, 0),
        ];
        let refs: Vec<&LabeledExample> = batch.iter().collect();
        let v: Vec<f64> = model
            .loss_and_grad(&theta, &batch[0].features, 0)
            .unwrap()
            .1;
        let scan = taylor_error_scan(&model, &refs, &theta, &v, &[1e-1, 1e-2, 1e-3]).unwrap();
        let slope = scan.slope.unwrap();
        assert!((0.8..=1.2).contains(&slope), "{slope}");

        let zero = vec![0.0; v.len()];
        let scan = taylor_error_scan(&model, &refs, &theta, &zero, &[1e-1, 1e-2]).unwrap();
        assert!(scan.points.iter().all(|&(_, e)| e == 0.0));
        assert!(scan.slope.is_none());
        assert!(taylor_error_scan(&model, &refs, &theta, &v, &[1e-3, 1e-2]).is_err());
    }

    /// `ℓ(θ) = aᵀθ`: forward differences are exact up to rounding.
    struct Linear(Vec<f64>);

    impl LossModel for Linear {
        fn num_params(&self) -> usize {
            self.0.len()
        }
        fn loss(&self, params: &[f64], _: &[f64], _: usize) -> Result<f64> {
            dot(&self.0, params)
        }
        fn loss_and_grad(&self, params: &[f64], x: &[f64], y: usize) -> Result<(f64, Vec<f64>)> {
            Ok((self.loss(params, x, y)?, self.0.clone()))
        }
    }

    #[test]
    fn taylor_scan_on_linear_model() {
        let m = Linear(vec![1.5, -2.0]);
        let e = LabeledExample::new(vec![], 0, 0);
        let scan =
            taylor_error_scan(&m, &[&e], &[0.25, 0.5], &[1.0, 1.0], &[1e-1, 1e-2, 1e-3]).unwrap();
        assert!(
            scan.points.iter().all(|&(_, err)| err < 1e-12),
            "{:?}",
            scan.points
        );
    }

    #[test]
    fn simplex_grid_shape() {
        assert_eq!(simplex_grid(1, 11), vec![vec![1.0]]);
        let g = simplex_grid(2, 11);
        assert_eq!(g.len(), 11);
        assert_eq!(g[0], vec![0.0, 1.0]);
        assert_eq!(simplex_grid(3, 11).len(), 66);
        assert!(simplex_grid(3, 11)
            .iter()
            .all(|w| (w.iter().sum::<f64>() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn inner_solver_reaches_tolerance() {
        let p = TinyProblem::dev_matches_first();
        let theta = solve_inner(&p, &[0.3, 0.7], &[0.0; 6]).unwrap();
        assert!(norm(&p.inner_objective(&[0.3, 0.7], &theta).unwrap().1) <= INNER_TOLERANCE);
    }

    #[test]
    fn brute_force_prefers_the_dev_aligned_example() {
        let p = TinyProblem::dev_matches_first();
        let r = brute_force_bilevel(&p, 101).unwrap();
        assert!(r.best_weights[0] >= 0.9, "{:?}", r.best_weights);
        assert_eq!(r.landscape.len(), 101);
    }

    #[test]
    fn identical_examples_give_flat_landscape() {
        let mut p = TinyProblem::dev_matches_first();
        p.train[1] = p.train[0].clone();
        let r = brute_force_bilevel(&p, 21).unwrap();
        let first = r.landscape[0].dev_loss;
        assert!(r
            .landscape
            .iter()
            .all(|q| (q.dev_loss - first).abs() <= 1e-9));
    }

    #[test]
    fn single_example_gets_all_weight() {
        let mut p = TinyProblem::dev_matches_first();
        p.train.truncate(1);
        assert_eq!(brute_force_bilevel(&p, 11).unwrap().best_weights, vec![1.0]);
        assert!(brute_force_bilevel(&p, 5).is_err());
    }
}
