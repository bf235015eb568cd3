//! Moreau-envelope diagnostics on max-of-quadratics testbeds.
//!
//! The objective is `φ(θ) = max_j ½‖θ − c_j‖²`. Its proximal problem
//! `min_θ′ φ(θ′) + κ‖θ′ − θ‖²` is solved exactly through the dual over the
//! simplex of component weights, so envelope gradients are known to machine
//! precision and the rate guarantee can be checked directly.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::rng::{derive, rng_from};
use crate::theory::max_simplex_weights;
use crate::{Error, Result};

/// Duality gap accepted as an exact prox solution.
pub const PROX_GAP_TOLERANCE: f64 = 1e-8;
/// Iterate norm beyond which a run is declared divergent.
pub const DIVERGENCE_NORM: f64 = 1e6;
const ENUMERATION_LIMIT: usize = 12;
const POLISH_ITERS: usize = 200_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticMinimax {
    centers: Vec<Vec<f64>>,
}

/// Solution of the proximal problem.
#[derive(Clone, Debug, PartialEq)]
pub struct ProxSolution {
    pub point: Vec<f64>,
    /// Optimal dual weights over the components.
    pub weights: Vec<f64>,
    /// `φ(θ̂) + κ‖θ̂ − θ‖²`, the envelope value.
    pub value: f64,
    /// Primal minus dual objective at the returned pair.
    pub gap: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl SyntheticMinimax {
    pub fn new(centers: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = centers.first() else {
            return Err(Error::config("testbed needs at least one center"));
        };
        let d = first.len();
        if d == 0 || centers.iter().any(|c| c.len() != d) {
            return Err(Error::config("centers must share a positive dimension"));
        }
        if centers.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("testbed centers".into()));
        }
        Ok(Self { centers })
    }

    /// `m` centers with i.i.d. `N(0, scale²)` coordinates.
    pub fn random(m: usize, dim: usize, scale: f64, seed: u64) -> Result<Self> {
        let mut rng = rng_from(seed);
        let centers = (0..m)
            .map(|_| {
                (0..dim)
                    .map(|_| {
                        scale * {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            z
                        }
                    })
                    .collect()
            })
            .collect();
        Self::new(centers)
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.centers
    }

    pub fn dim(&self) -> usize {
        self.centers[0].len()
    }

    /// `½‖θ − c_j‖²` for every component.
    pub fn component_losses(&self, theta: &[f64]) -> Vec<f64> {
        self.centers
            .iter()
            .map(|c| 0.5 * sq_dist(theta, c))
            .collect()
    }

    pub fn phi(&self, theta: &[f64]) -> f64 {
        self.component_losses(theta)
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// The maximizing component (smallest index on ties) and its gradient.
    pub fn max_step_direction(&self, theta: &[f64]) -> (usize, Vec<f64>) {
        let (w, _) = max_simplex_weights(&self.component_losses(theta)).expect("nonempty");
        let j = w.iter().position(|&v| v == 1.0).expect("one-hot");
        let g = theta
            .iter()
            .zip(&self.centers[j])
            .map(|(t, c)| t - c)
            .collect();
        (j, g)
    }

    /// Exact minimizer of `φ(θ′) + κ‖θ′ − θ‖²`; `κ = 0` gives `argmin φ`.
    pub fn prox_point(&self, theta: &[f64], kappa: f64) -> Result<ProxSolution> {
        self.prox_warm(theta, kappa, None)
    }

    /// Same as [`SyntheticMinimax::prox_point`], trying `hint` as the
    /// active set before enumerating.
    pub fn prox_warm(
        &self,
        theta: &[f64],
        kappa: f64,
        hint: Option<&[usize]>,
    ) -> Result<ProxSolution> {
        if theta.len() != self.dim() {
            return Err(Error::shape("prox_point", &[theta.len()], &[self.dim()]));
        }
        if !(kappa >= 0.0 && kappa.is_finite()) {
            return Err(Error::Config(format!(
                "kappa must be nonnegative, got {kappa}"
            )));
        }
        let dual = Dual::new(self, theta, kappa);
        if let Some(support) = hint {
            if let Some(sol) = dual.try_support(support) {
                return Ok(sol);
            }
        }
        let m = self.centers.len();
        if m <= ENUMERATION_LIMIT {
            let mut supports: Vec<Vec<usize>> = (1u32..(1 << m))
                .map(|mask| (0..m).filter(|j| mask & (1 << j) != 0).collect())
                .collect();
            supports.sort_by_key(|s| s.len());
            let mut best: Option<ProxSolution> = None;
            for s in &supports {
                if let Some(sol) = dual.try_support(s) {
                    return Ok(sol);
                }
                if let Some(cand) = dual.candidate(s) {
                    if best.as_ref().is_none_or(|b| cand.gap < b.gap) {
                        best = Some(cand);
                    }
                }
            }
            if let Some(b) = best {
                if b.gap < PROX_GAP_TOLERANCE * (1.0 + b.value.abs()) {
                    return Ok(b);
                }
            }
        }
        dual.polish()
    }

    pub fn moreau_envelope(&self, theta: &[f64], kappa: f64) -> Result<f64> {
        Ok(self.prox_point(theta, kappa)?.value)
    }

    /// `‖∇φ_{1/2κ}(θ)‖ = 2κ‖θ − θ̂‖`.
    pub fn moreau_grad_norm(&self, theta: &[f64], kappa: f64) -> Result<f64> {
        let p = self.prox_point(theta, kappa)?;
        Ok(2.0 * kappa * sq_dist(theta, &p.point).sqrt())
    }

    /// `(argmin φ, min φ)`.
    pub fn minimum(&self) -> Result<(Vec<f64>, f64)> {
        let origin = vec![0.0; self.dim()];
        let p = self.prox_point(&origin, 0.0)?;
        let v = self.phi(&p.point);
        Ok((p.point, v))
    }
}

/// Dual of the proximal problem over the weight simplex:
/// `D(w) = ½Σ w_j‖c_j‖² + κ‖θ‖² − ‖Cw + a‖²/(2s)` with `s = 1 + 2κ`,
/// `a = 2κθ`, and primal recovery `θ′ = (Cw + a)/s`.
struct Dual<'a> {
    inst: &'a SyntheticMinimax,
    theta: &'a [f64],
    kappa: f64,
    s: f64,
    a: Vec<f64>,
    half_sq: Vec<f64>,
}

impl<'a> Dual<'a> {
    fn new(inst: &'a SyntheticMinimax, theta: &'a [f64], kappa: f64) -> Self {
        Self {
            inst,
            theta,
            kappa,
            s: 1.0 + 2.0 * kappa,
            a: theta.iter().map(|t| 2.0 * kappa * t).collect(),
            half_sq: inst.centers.iter().map(|c| 0.5 * dot(c, c)).collect(),
        }
    }

    fn primal_point(&self, w: &[f64]) -> Vec<f64> {
        let mut p = self.a.clone();
        for (wj, c) in w.iter().zip(&self.inst.centers) {
            if *wj != 0.0 {
                p.iter_mut().zip(c).for_each(|(x, cj)| *x += wj * cj);
            }
        }
        p.iter_mut().for_each(|x| *x /= self.s);
        p
    }

    fn dual_value(&self, w: &[f64]) -> f64 {
        let p = self.primal_point(w);
        let cw_a_sq = self.s * self.s * dot(&p, &p);
        dot(w, &self.half_sq) + self.kappa * dot(self.theta, self.theta) - cw_a_sq / (2.0 * self.s)
    }

    /// Partial derivatives of `D` at `w`.
    fn gradient(&self, w: &[f64]) -> Vec<f64> {
        let p = self.primal_point(w);
        self.inst
            .centers
            .iter()
            .zip(&self.half_sq)
            .map(|(c, h)| h - dot(c, &p))
            .collect()
    }

    fn solution(&self, w: Vec<f64>) -> ProxSolution {
        let point = self.primal_point(&w);
        let value = self.inst.phi(&point) + self.kappa * sq_dist(&point, self.theta);
        let gap = (value - self.dual_value(&w)).max(0.0);
        ProxSolution {
            point,
            weights: w,
            value,
            gap,
        }
    }

    /// Stationary point of `D` on the affine hull of a support, if the
    /// linear system is regular.
    fn stationary(&self, support: &[usize]) -> Option<Vec<f64>> {
        let k = support.len();
        let c = &self.inst.centers;
        let mut m = DMatrix::<f64>::zeros(k + 1, k + 1);
        let mut rhs = DVector::<f64>::zeros(k + 1);
        for (r, &i) in support.iter().enumerate() {
            for (q, &j) in support.iter().enumerate() {
                m[(r, q)] = dot(&c[i], &c[j]) / self.s;
            }
            m[(r, k)] = 1.0;
            m[(k, r)] = 1.0;
            rhs[r] = self.half_sq[i] - dot(&c[i], &self.a) / self.s;
        }
        rhs[k] = 1.0;
        let sol = m.lu().solve(&rhs)?;
        if sol.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let mut w = vec![0.0; c.len()];
        for (r, &i) in support.iter().enumerate() {
            w[i] = sol[r];
        }
        Some(w)
    }

    /// Feasible point from a support (negative weights clipped).
    fn candidate(&self, support: &[usize]) -> Option<ProxSolution> {
        let mut w = self.stationary(support)?;
        w.iter_mut().for_each(|v| *v = v.max(0.0));
        let total: f64 = w.iter().sum();
        if total <= 0.0 {
            return None;
        }
        w.iter_mut().for_each(|v| *v /= total);
        Some(self.solution(w))
    }

    /// The support's stationary point when it satisfies the optimality
    /// conditions of the simplex-constrained dual.
    fn try_support(&self, support: &[usize]) -> Option<ProxSolution> {
        let w = self.stationary(support)?;
        let scale = 1.0 + self.half_sq.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        if support.iter().any(|&i| w[i] < -1e-12) {
            return None;
        }
        let g = self.gradient(&w);
        let mu = support.iter().map(|&i| g[i]).sum::<f64>() / support.len() as f64;
        if g.iter().any(|&gj| gj > mu + 1e-10 * scale) {
            return None;
        }
        let mut w = w;
        w.iter_mut().for_each(|v| *v = v.max(0.0));
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= total);
        let sol = self.solution(w);
        (sol.gap < PROX_GAP_TOLERANCE * (1.0 + sol.value.abs())).then_some(sol)
    }

    /// Projected gradient ascent on the dual.
    fn polish(&self) -> Result<ProxSolution> {
        let m = self.inst.centers.len();
        let lip = self.half_sq.iter().sum::<f64>() * 2.0 / self.s + 1e-12;
        let mut w = vec![1.0 / m as f64; m];
        let mut last = f64::INFINITY;
        for it in 0..POLISH_ITERS {
            let g = self.gradient(&w);
            let step: Vec<f64> = w.iter().zip(&g).map(|(wi, gi)| wi + gi / lip).collect();
            w = project_simplex(&step);
            if it % 100 == 0 {
                let sol = self.solution(w.clone());
                last = sol.gap;
                if sol.gap < PROX_GAP_TOLERANCE * (1.0 + sol.value.abs()) {
                    return Ok(sol);
                }
            }
        }
        Err(Error::NoConvergence {
            what: "proximal point polish",
            iterations: POLISH_ITERS,
            last,
        })
    }
}

/// Euclidean projection onto the probability simplex.
fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut tau = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        cum += ui;
        let t = (cum - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            tau = t;
        }
    }
    v.iter().map(|x| (x - tau).max(0.0)).collect()
}

/// `4L√(κ·gap/T) + 8L√(2Bκ/(T+1) · ln(1/δ))`.
pub fn rate_bound_rhs(lipschitz: f64, kappa: f64, b: f64, gap: f64, steps: u64, delta: f64) -> f64 {
    let t = steps as f64;
    4.0 * lipschitz * (kappa * gap / t).sqrt()
        + 8.0 * lipschitz * (2.0 * b * kappa / (t + 1.0) * (1.0 / delta).ln()).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum StepPolicy {
    Constant {
        eta: f64,
    },
    /// The rate-optimal constant step for the run's horizon.
    Optimal,
    /// `η₀ / √(t + 1)`.
    InverseSqrt {
        eta0: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default, deny_unknown_fields)]
pub struct ConvergenceSpec {
    pub dim: usize,
    pub n_centers: usize,
    /// Explicit centers; overrides `dim`, `n-centers` and `center-seed`.
    pub centers: Option<Vec<Vec<f64>>>,
    pub center_seed: u64,
    pub center_scale: f64,
    /// Standard deviation of the additive gradient noise, per coordinate.
    pub noise: f64,
    pub steps: u64,
    pub step_policy: StepPolicy,
    pub kappa: f64,
    pub seed: u64,
    /// Record every `stride`-th step in the trace.
    pub stride: u64,
    pub delta: f64,
    /// Starting point; drawn from `seed` when absent.
    pub start: Option<Vec<f64>>,
}

impl Default for ConvergenceSpec {
    fn default() -> Self {
        Self {
            dim: 10,
            n_centers: 5,
            centers: None,
            center_seed: 0,
            center_scale: 1.0,
            noise: 0.1,
            steps: 1000,
            step_policy: StepPolicy::Optimal,
            kappa: 1.0,
            seed: 0,
            stride: 10,
            delta: 0.1,
            start: None,
        }
    }
}

impl ConvergenceSpec {
    pub fn instance(&self) -> Result<SyntheticMinimax> {
        match &self.centers {
            Some(c) => SyntheticMinimax::new(c.clone()),
            None => SyntheticMinimax::random(
                self.n_centers,
                self.dim,
                self.center_scale,
                self.center_seed,
            ),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.stride == 0 {
            return Err(Error::config("steps and stride must be positive"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("noise must be nonnegative"));
        }
        if !(self.kappa > 0.0) {
            return Err(Error::config("kappa must be positive"));
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(Error::config("delta must lie in (0, 1]"));
        }
        match self.step_policy {
            StepPolicy::Constant { eta } | StepPolicy::InverseSqrt { eta0: eta }
                if !(eta > 0.0) =>
            {
                Err(Error::config("step size must be positive"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: u64,
    pub envelope_grad_norm: f64,
    pub running_avg_sq: f64,
    pub rhs_bound: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceTrace {
    pub points: Vec<TracePoint>,
    /// Iterates at the recorded steps.
    pub iterates: Vec<Vec<f64>>,
    /// `(1/(T+1)) Σ_{t=0}^{T} ‖∇φ_{1/2κ}(θ_t)‖²`.
    pub running_avg_sq: f64,
    /// Largest stochastic gradient norm seen.
    pub lipschitz: f64,
    /// Largest `φ(θ_t) − min φ` seen.
    pub b: f64,
    /// `φ_{1/2κ}(θ₀) − min φ`.
    pub initial_gap: f64,
    pub eta: f64,
    pub rhs: f64,
    /// Slope of log running average against log step over the trace.
    pub slope: f64,
}

/// Starting point used when the spec gives none.
pub fn default_start(dim: usize, scale: f64, seed: u64) -> Vec<f64> {
    let mut rng = rng_from(derive(seed, &[0x5354_4152]));
    (0..dim)
        .map(|_| {
            3.0 * scale * {
                let z: f64 = StandardNormal.sample(&mut rng);
                z
            }
        })
        .collect()
}

/// Constant step minimizing the rate bound for horizon `T`:
/// `√(gap / (κ L² T))`.
pub fn optimal_step(gap: f64, kappa: f64, lipschitz: f64, steps: u64) -> f64 {
    (gap / (kappa * lipschitz * lipschitz * steps as f64)).sqrt()
}

/// Runs the max-then-step iteration `θ ← θ − η (∇ℓ_{j*}(θ) + ξ)` for `T`
/// steps and records envelope-gradient norms at `θ_0 … θ_T`.
pub fn run_convergence_experiment(spec: &ConvergenceSpec) -> Result<ConvergenceTrace> {
    spec.validate()?;
    let inst = spec.instance()?;
    let d = inst.dim();
    let kappa = spec.kappa;
    let mut theta = match &spec.start {
        Some(s) if s.len() == d => s.clone(),
        Some(s) => return Err(Error::shape("convergence start", &[s.len()], &[d])),
        None => default_start(d, spec.center_scale, spec.seed),
    };
    let (_, min_phi) = inst.minimum()?;
    let initial_gap = (inst.moreau_envelope(&theta, kappa)? - min_phi).max(0.0);
    let eta_for = |t: u64, l0: f64| match spec.step_policy {
        StepPolicy::Constant { eta } => eta,
        StepPolicy::InverseSqrt { eta0 } => eta0 / ((t + 1) as f64).sqrt(),
        StepPolicy::Optimal => optimal_step(initial_gap.max(1e-300), kappa, l0, spec.steps),
    };
    let l0 = inst
        .centers()
        .iter()
        .map(|c| sq_dist(&theta, c).sqrt())
        .fold(0.0, f64::max)
        + spec.noise * (d as f64).sqrt();

    let normal = rand_distr::Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("valid");
    let mut rng = rng_from(derive(spec.seed, &[0x4e4f_4953]));
    let mut sum_sq = 0.0;
    let mut lipschitz: f64 = 0.0;
    let mut b: f64 = 0.0;
    let mut hint: Option<Vec<usize>> = None;
    let mut points = Vec::new();
    let mut iterates = Vec::new();
    let mut log_pairs = Vec::new();

    for t in 0..=spec.steps {
        let prox = inst.prox_warm(&theta, kappa, hint.as_deref())?;
        hint = Some(
            (0..prox.weights.len())
                .filter(|&j| prox.weights[j] > 0.0)
                .collect(),
        );
        let g_norm = 2.0 * kappa * sq_dist(&theta, &prox.point).sqrt();
        sum_sq += g_norm * g_norm;
        b = b.max(inst.phi(&theta) - min_phi);
        let avg = sum_sq / (t + 1) as f64;
        if t > 0 {
            log_pairs.push(((t as f64).ln(), avg));
        }
        if t % spec.stride == 0 || t == spec.steps {
            points.push(TracePoint {
                step: t,
                envelope_grad_norm: g_norm,
                running_avg_sq: avg,
                rhs_bound: f64::NAN,
            });
            iterates.push(theta.clone());
        }
        if t == spec.steps {
            break;
        }
        let (_, mut g) = inst.max_step_direction(&theta);
        if spec.noise > 0.0 {
            g.iter_mut().for_each(|x| *x += normal.sample(&mut rng));
        }
        lipschitz = lipschitz.max(norm(&g));
        let eta = eta_for(t, l0);
        theta.iter_mut().zip(&g).for_each(|(x, gi)| *x -= eta * gi);
        let n = norm(&theta);
        if !(n <= DIVERGENCE_NORM) {
            return Err(Error::Divergence {
                step: t as usize,
                detail: format!("iterate norm {n:e}"),
            });
        }
    }

    for p in &mut points {
        p.rhs_bound = if p.step == 0 {
            f64::INFINITY
        } else {
            rate_bound_rhs(lipschitz, kappa, b, initial_gap, p.step, spec.delta)
        };
    }
    let running_avg_sq = sum_sq / (spec.steps + 1) as f64;
    let slope = fit_loglog_slope(
        &log_pairs.iter().map(|p| p.0.exp()).collect::<Vec<_>>(),
        &log_pairs.iter().map(|p| p.1).collect::<Vec<_>>(),
    );
    Ok(ConvergenceTrace {
        points,
        iterates,
        running_avg_sq,
        lipschitz,
        b,
        initial_gap,
        eta: eta_for(0, l0),
        rhs: rate_bound_rhs(lipschitz, kappa, b, initial_gap, spec.steps, spec.delta),
        slope,
    })
}

/// Least-squares slope of `ln y` against `ln x`, skipping nonpositive pairs.
pub fn fit_loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0)
        .map(|(a, b)| (a.ln(), b.ln()))
        .collect();
    let n = pts.len() as f64;
    if n < 2.0 {
        return f64::NAN;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

/// Final running averages for separate runs at each horizon, each with its
/// own rate-optimal step, and the fitted slope across horizons.
pub fn horizon_sweep(
    base: &ConvergenceSpec,
    horizons: &[u64],
) -> Result<(Vec<ConvergenceTrace>, f64)> {
    let traces = horizons
        .iter()
        .map(|&t| {
            run_convergence_experiment(&ConvergenceSpec {
                steps: t,
                stride: t,
                step_policy: StepPolicy::Optimal,
                ..base.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let xs: Vec<f64> = horizons.iter().map(|&t| t as f64).collect();
    let ys: Vec<f64> = traces.iter().map(|t| t.running_avg_sq).collect();
    Ok((traces, fit_loglog_slope(&xs, &ys)))
}
