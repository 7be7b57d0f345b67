//! Bag-supervised target signature estimation by expectation maximization.
//!
//! Every labelled pixel is explained as a convex mixture of unit-norm
//! endmembers. A pixel in a negative bag may only use background endmembers.
//! A pixel in a positive bag carries a latent indicator `z`: with `z = 1` it
//! may also use the target, with `z = 0` it may not. The quantity driven down
//! is the free energy
//!
//! ```text
//! F = Σ_pos [ z·c¹ + (1−z)·c⁰ + (z ln z + (1−z) ln(1−z)) / β ]
//!   + Σ_neg c⁰
//!   + λ_mean · Σ_j ‖e_j − μ‖²
//! ```
//!
//! where `cˢ = min_p ‖x − E·p‖² + λ_sparse·Σ_{k≥1} p_k` over the simplex with
//! the target masked out for `s = 0`, and `μ` is the scene mean. The E-step is
//! the exact minimizer over `z` (a logistic in `β(c⁰ − c¹)`); the M-step
//! minimizes the anchored expected reconstruction error over unit-norm
//! columns with proportions held fixed, one column at a time, then re-solves
//! the proportions. Background endmembers whose proportions never reach the
//! prune threshold are dropped when doing so does not raise `F`.

mod vca;

pub use vca::{vca_init, VcaOutcome};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bags::{BagSet, Label};
use crate::cube::HsiCube;
use crate::endmembers::EndmemberSet;
use crate::error::{Error, Result};
use crate::proportions::ProportionMatrix;
use crate::rng::Rng;
use crate::scalar::{sq_dist, Scalar};
use crate::unmix::FclsSolver;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EfumiConfig {
    /// Initial number of background endmembers.
    pub m_init: usize,
    /// E-step inverse temperature; `None` picks `5 / mean residual` at the start.
    pub beta: Option<f64>,
    /// Weight on background proportions; `None` picks `1e-3 · mean residual`.
    pub lambda_sparse: Option<f64>,
    pub lambda_mean: f64,
    pub prune_threshold: f64,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub seed: u64,
}

impl Default for EfumiConfig {
    fn default() -> Self {
        Self {
            m_init: 5,
            beta: None,
            lambda_sparse: None,
            lambda_mean: 1e-3,
            prune_threshold: 1e-4,
            max_iters: 200,
            rel_tol: 1e-6,
            seed: 0,
        }
    }
}

impl EfumiConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.to_string()));
        if self.m_init == 0 {
            return bad("m_init must be at least 1");
        }
        if let Some(b) = self.beta {
            if !(b > 0.0 && b.is_finite()) {
                return bad("beta must be positive");
            }
        }
        if let Some(l) = self.lambda_sparse {
            if !(l >= 0.0 && l.is_finite()) {
                return bad("lambda_sparse must be non-negative");
            }
        }
        if !(self.lambda_mean >= 0.0 && self.lambda_mean.is_finite()) {
            return bad("lambda_mean must be non-negative");
        }
        if !(0.0..1.0).contains(&self.prune_threshold) {
            return bad("prune_threshold must lie in [0, 1)");
        }
        if !(self.rel_tol > 0.0) {
            return bad("rel_tol must be positive");
        }
        Ok(())
    }
}

/// Hyperparameters after automatic choices have been made.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResolvedParams {
    pub beta: f64,
    pub lambda_sparse: f64,
    pub lambda_mean: f64,
}

/// Starting point for a run. `params`, when given, replaces automatic
/// hyperparameter selection so that a rerun optimizes the same objective.
#[derive(Debug, Clone)]
pub struct WarmStart<T> {
    pub endmembers: EndmemberSet<T>,
    pub proportions: Option<ProportionMatrix<T>>,
    pub params: Option<ResolvedParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EfumiResult<T> {
    pub endmembers: EndmemberSet<T>,
    /// One row per pixel. Positive-bag and unlabeled pixels hold the solve
    /// with the target available; negative-bag pixels hold the solve without.
    pub proportions: ProportionMatrix<T>,
    /// Posterior target presence; exactly 0 outside positive bags.
    pub zweights: Vec<T>,
    pub cost_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub params: ResolvedParams,
    pub config: EfumiConfig,
    pub vca_fallback: bool,
}

impl<T: Scalar> EfumiResult<T> {
    pub fn warm_start(&self) -> WarmStart<T> {
        WarmStart {
            endmembers: self.endmembers.clone(),
            proportions: Some(self.proportions.clone()),
            params: Some(self.params),
        }
    }

    pub fn summary(&self) -> EfumiSummary {
        let to64 = |c: &[T]| c.iter().map(|v| v.as_f64()).collect::<Vec<_>>();
        EfumiSummary {
            config: self.config.clone(),
            params: self.params,
            iterations: self.iterations,
            converged: self.converged,
            n_background: self.endmembers.n_background(),
            cost_trace: self.cost_trace.clone(),
            target: to64(self.endmembers.target()),
            background: self.endmembers.background().iter().map(|c| to64(c)).collect(),
            vca_fallback: self.vca_fallback,
        }
    }
}

/// Serializable view of a result without the per-pixel arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfumiSummary {
    pub config: EfumiConfig,
    pub params: ResolvedParams,
    pub iterations: usize,
    pub converged: bool,
    pub n_background: usize,
    pub cost_trace: Vec<f64>,
    pub target: Vec<f64>,
    pub background: Vec<Vec<f64>>,
    pub vca_fallback: bool,
}

impl EfumiSummary {
    pub fn endmembers<T: Scalar>(&self) -> Result<EndmemberSet<T>> {
        let conv = |c: &[f64]| c.iter().map(|&v| T::lit(v)).collect::<Vec<T>>();
        EndmemberSet::normalized(
            std::iter::once(conv(&self.target))
                .chain(self.background.iter().map(|c| conv(c)))
                .collect(),
        )
    }
}

/// Posterior weight of the target-present state given the two state costs.
pub fn posterior_weight<T: Scalar>(cost_present: T, cost_absent: T, beta: T) -> T {
    let d = beta * (cost_present - cost_absent);
    if d > T::zero() {
        let e = (-d).exp();
        e / (T::one() + e)
    } else {
        T::one() / (T::one() + d.exp())
    }
}

fn neg_entropy<T: Scalar>(z: T) -> T {
    let term = |v: T| if v > T::zero() { v * v.ln() } else { T::zero() };
    term(z) + term(T::one() - z)
}

const SPHERE_SWEEPS: usize = 20;
const MOMENTUM_MIN: f64 = 0.25;
const MOMENTUM_MAX: f64 = 8.0;

/// Labelled pixels and the fixed pieces of the objective.
struct Problem<'a, T> {
    cube: &'a HsiCube<T>,
    pos: Vec<usize>,
    neg: Vec<usize>,
    mean: Vec<T>,
    lambda_mean: T,
    lambda_sparse: T,
    beta: T,
}

/// All per-pixel solves for one endmember matrix.
#[derive(Clone)]
struct Snapshot<T> {
    columns: Vec<Vec<T>>,
    /// Target-available solves for positive pixels, length M+1 each.
    p1: Vec<Vec<T>>,
    c1: Vec<T>,
    /// Background-only solves for `pos ++ neg`, length M each.
    p0: Vec<Vec<T>>,
    c0: Vec<T>,
}

impl<'a, T: Scalar> Problem<'a, T> {
    fn new(cube: &'a HsiCube<T>, bags: &BagSet) -> Result<Self> {
        cube.ensure_finite()?;
        bags.check(cube.n_pixels())?;
        let labels = bags.label_map(cube.n_pixels());
        let pick = |l: Label| -> Vec<usize> {
            labels
                .iter()
                .enumerate()
                .filter(|(_, v)| **v == Some(l))
                .map(|(i, _)| i)
                .collect()
        };
        Ok(Self {
            cube,
            pos: pick(Label::Positive),
            neg: pick(Label::Negative),
            mean: cube.global_mean(None)?,
            lambda_mean: T::zero(),
            lambda_sparse: T::zero(),
            beta: T::one(),
        })
    }

    fn with_params(mut self, p: &ResolvedParams) -> Self {
        self.beta = T::lit(p.beta);
        self.lambda_sparse = T::lit(p.lambda_sparse);
        self.lambda_mean = T::lit(p.lambda_mean);
        self
    }

    fn labelled(&self) -> impl Iterator<Item = usize> + '_ {
        self.pos.iter().chain(&self.neg).copied()
    }

    fn snapshot(&self, columns: Vec<Vec<T>>, warm: Option<&Snapshot<T>>) -> Result<Snapshot<T>> {
        let m = columns.len() - 1;
        let full = FclsSolver::new(&columns)?;
        let bg = FclsSolver::new(&columns[1..])?;
        let ls = self.lambda_sparse;
        let lin_full: Vec<T> = (0..=m).map(|j| if j == 0 { T::zero() } else { ls }).collect();
        let lin_bg = vec![ls; m];
        let warm = warm.filter(|w| w.columns.len() == columns.len());

        let solved1: Vec<(Vec<T>, T)> = self
            .pos
            .par_iter()
            .enumerate()
            .map(|(k, &i)| {
                let start = warm.map(|w| w.p1[k].as_slice());
                let s = full.solve_from(self.cube.pixel(i), Some(&lin_full), start)?;
                let pen = ls * s.p[1..].iter().copied().sum::<T>();
                Ok((s.p, s.residual + pen))
            })
            .collect::<Result<_>>()?;
        let labelled: Vec<usize> = self.labelled().collect();
        let solved0: Vec<(Vec<T>, T)> = labelled
            .par_iter()
            .enumerate()
            .map(|(k, &i)| {
                let start = warm.map(|w| w.p0[k].as_slice());
                let s = bg.solve_from(self.cube.pixel(i), Some(&lin_bg), start)?;
                let pen = ls * s.p.iter().copied().sum::<T>();
                Ok((s.p, s.residual + pen))
            })
            .collect::<Result<_>>()?;
        let (p1, c1) = solved1.into_iter().unzip();
        let (p0, c0) = solved0.into_iter().unzip();
        Ok(Snapshot {
            columns,
            p1,
            c1,
            p0,
            c0,
        })
    }

    fn e_step(&self, s: &Snapshot<T>) -> Vec<T> {
        s.c1
            .iter()
            .zip(&s.c0)
            .map(|(&a, &b)| posterior_weight(a, b, self.beta))
            .collect()
    }

    fn free_energy(&self, s: &Snapshot<T>, z: &[T]) -> T {
        let np = self.pos.len();
        let mut f = T::zero();
        for k in 0..np {
            f = f + z[k] * s.c1[k] + (T::one() - z[k]) * s.c0[k] + neg_entropy(z[k]) / self.beta;
        }
        for k in np..s.c0.len() {
            f = f + s.c0[k];
        }
        f + self.anchor(&s.columns)
    }

    fn anchor(&self, columns: &[Vec<T>]) -> T {
        self.lambda_mean * columns.iter().map(|c| sq_dist(c, &self.mean)).sum::<T>()
    }

    /// Minimizes the expected reconstruction error plus the mean anchor over
    /// unit-norm columns, proportions held fixed.
    ///
    /// With `A = Σ w p pᵀ` and `B = Σ w x pᵀ + λ_mean μ 1ᵀ`, the objective in
    /// column `j` alone is `A_jj + λ_mean − 2 e_jᵀ r_j + const` on the unit
    /// sphere, where `r_j = B_j − Σ_{k≠j} A_jk e_k`; its minimizer is
    /// `r_j / ‖r_j‖`. Columns are swept in order until they settle.
    fn sphere_update(&self, s: &Snapshot<T>, z: &[T]) -> Vec<Vec<T>> {
        let n = s.columns.len();
        let bands = self.cube.bands();
        let mut a = vec![T::zero(); n * n];
        let mut b = vec![vec![T::zero(); bands]; n];
        let mut add = |x: &[T], p: &[T], w: T, offset: usize| {
            if w == T::zero() {
                return;
            }
            for (jj, &pj) in p.iter().enumerate() {
                let j = jj + offset;
                let wp = w * pj;
                if wp == T::zero() {
                    continue;
                }
                for (kk, &pk) in p.iter().enumerate() {
                    let k = kk + offset;
                    a[j * n + k] = a[j * n + k] + wp * pk;
                }
                for (bd, &xd) in b[j].iter_mut().zip(x) {
                    *bd = *bd + wp * xd;
                }
            }
        };
        let np = self.pos.len();
        for (k, &i) in self.pos.iter().enumerate() {
            let x = self.cube.pixel(i);
            add(x, &s.p1[k], z[k], 0);
            add(x, &s.p0[k], T::one() - z[k], 1);
        }
        for (k, &i) in self.neg.iter().enumerate() {
            add(self.cube.pixel(i), &s.p0[np + k], T::one(), 1);
        }
        for bj in b.iter_mut() {
            for (v, &m) in bj.iter_mut().zip(&self.mean) {
                *v = *v + self.lambda_mean * m;
            }
        }
        let mut columns = s.columns.clone();
        for _ in 0..SPHERE_SWEEPS {
            let mut moved = T::zero();
            for j in 0..n {
                let mut r = b[j].clone();
                for k in (0..n).filter(|&k| k != j) {
                    let ajk = a[j * n + k];
                    if ajk != T::zero() {
                        for (rv, &ev) in r.iter_mut().zip(&columns[k]) {
                            *rv = *rv - ajk * ev;
                        }
                    }
                }
                let norm = r.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt();
                if norm > T::zero() && norm.is_finite() {
                    let next: Vec<T> = r.into_iter().map(|v| v / norm).collect();
                    moved = moved.max(sq_dist(&next, &columns[j]));
                    columns[j] = next;
                }
            }
            if moved <= T::tol(1e-24) {
                break;
            }
        }
        columns
    }

    /// One M-step. `None` when the update fails to lower `F`.
    fn m_step(
        &self,
        s: &Snapshot<T>,
        z: &[T],
        base: T,
        prune_threshold: T,
    ) -> Result<Option<(Snapshot<T>, T)>> {
        let cand = self.snapshot(self.sphere_update(s, z), Some(s))?;
        let f = self.free_energy(&cand, z);
        if !(f < base) {
            return Ok(None);
        }
        let drop = prunable(&cand, self.pos.len(), prune_threshold);
        if !drop.is_empty() {
            let columns: Vec<Vec<T>> = cand
                .columns
                .iter()
                .enumerate()
                .filter(|(j, _)| !drop.contains(j))
                .map(|(_, c)| c.clone())
                .collect();
            let pruned = self.snapshot(columns, None)?;
            let fp = self.free_energy(&pruned, z);
            if fp <= f {
                return Ok(Some((pruned, fp)));
            }
        }
        Ok(Some((cand, f)))
    }

    /// Proportion rows for every pixel under the storage convention.
    fn proportions(&self, s: &Snapshot<T>) -> Result<ProportionMatrix<T>> {
        let n = self.cube.n_pixels();
        let m1 = s.columns.len();
        let mut rows: Vec<Option<Vec<T>>> = vec![None; n];
        for (k, &i) in self.pos.iter().enumerate() {
            rows[i] = Some(s.p1[k].clone());
        }
        let np = self.pos.len();
        for (k, &i) in self.neg.iter().enumerate() {
            let mut r = Vec::with_capacity(m1);
            r.push(T::zero());
            r.extend_from_slice(&s.p0[np + k]);
            rows[i] = Some(r);
        }
        let full = FclsSolver::new(&s.columns)?;
        let lin: Vec<T> = (0..m1)
            .map(|j| if j == 0 { T::zero() } else { self.lambda_sparse })
            .collect();
        let filled: Vec<Vec<T>> = rows
            .into_par_iter()
            .enumerate()
            .map(|(i, r)| match r {
                Some(r) => Ok(r),
                None => full.solve_from(self.cube.pixel(i), Some(&lin), None).map(|s| s.p),
            })
            .collect::<Result<_>>()?;
        ProportionMatrix::from_rows(&filled)
    }

    fn zweights(&self, z: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.cube.n_pixels()];
        for (k, &i) in self.pos.iter().enumerate() {
            out[i] = z[k];
        }
        out
    }
}

fn blend_unit<T: Scalar>(old: &[T], new: &[T], tau: T) -> Vec<T> {
    let v: Vec<T> = old
        .iter()
        .zip(new)
        .map(|(&a, &b)| a + tau * (b - a))
        .collect();
    let n = v.iter().fold(T::zero(), |s, &x| s + x * x).sqrt();
    if n > T::zero() && n.is_finite() {
        v.into_iter().map(|x| x / n).collect()
    } else {
        old.to_vec()
    }
}

/// Background columns (indices into the full matrix) whose stored proportions
/// never reach `threshold`. At least one background column always survives.
fn prunable<T: Scalar>(s: &Snapshot<T>, n_pos: usize, threshold: T) -> Vec<usize> {
    let m = s.columns.len() - 1;
    if threshold <= T::zero() || m <= 1 {
        return Vec::new();
    }
    let mut max = vec![T::zero(); m];
    for row in &s.p1 {
        for k in 0..m {
            max[k] = max[k].max(row[k + 1]);
        }
    }
    for row in &s.p0[n_pos..] {
        for k in 0..m {
            max[k] = max[k].max(row[k]);
        }
    }
    let mut drop: Vec<usize> = (0..m).filter(|&k| max[k] < threshold).map(|k| k + 1).collect();
    if drop.len() == m {
        drop.remove(0);
    }
    drop
}

/// Background from VCA on the negative pixels, target from the positive
/// pixel lying farthest outside the background hull.
pub fn default_init<T: Scalar>(
    cube: &HsiCube<T>,
    bags: &BagSet,
    m_init: usize,
    rng: &mut Rng,
) -> Result<(EndmemberSet<T>, bool)> {
    let neg = bags.pixels_with(Label::Negative);
    let pos = bags.pixels_with(Label::Positive);
    if pos.is_empty() {
        return Err(Error::NoPositiveBag);
    }
    if neg.is_empty() {
        return Err(Error::NoNegativeBag);
    }
    let m = m_init.min(cube.bands().saturating_sub(1)).min(neg.len()).max(1);
    let neg_px: Vec<&[T]> = neg.iter().map(|&i| cube.pixel(i)).collect();
    let vca = vca_init(&neg_px, m, rng)?;
    let bg = FclsSolver::new(&vca.columns)?;
    let mut best: Option<(T, usize)> = None;
    for &i in &pos {
        let r = bg.solve(cube.pixel(i))?.residual;
        if best.is_none_or(|(b, _)| r > b) {
            best = Some((r, i));
        }
    }
    let (_, pick) = best.expect("positive pixels exist");
    let mut columns = Vec::with_capacity(m + 1);
    columns.push(cube.pixel(pick).to_vec());
    columns.extend(vca.columns);
    Ok((EndmemberSet::normalized(columns)?, vca.fallback))
}

/// Resolves automatic hyperparameters from residuals at `e`.
fn resolve_params<T: Scalar>(
    problem: &Problem<'_, T>,
    config: &EfumiConfig,
    e: &EndmemberSet<T>,
) -> Result<ResolvedParams> {
    let probe = problem.snapshot(e.columns().to_vec(), None)?;
    let residual_sum: f64 = probe.c1.iter().map(|v| v.as_f64()).sum::<f64>()
        + probe.c0[problem.pos.len()..].iter().map(|v| v.as_f64()).sum::<f64>();
    let count = (problem.pos.len() + problem.neg.len()) as f64;
    let mean_r = (residual_sum / count).max(1e-12);
    Ok(ResolvedParams {
        beta: config.beta.unwrap_or(5.0 / mean_r),
        lambda_sparse: config.lambda_sparse.unwrap_or(1e-3 * mean_r),
        lambda_mean: config.lambda_mean,
    })
}

fn check_init<T: Scalar>(cube: &HsiCube<T>, w: &WarmStart<T>) -> Result<()> {
    if w.endmembers.bands() != cube.bands() {
        return Err(Error::DimensionMismatch {
            expected: cube.bands(),
            found: w.endmembers.bands(),
        });
    }
    if let Some(p) = &w.proportions {
        if p.n_rows() != cube.n_pixels() || p.n_cols() != w.endmembers.n_columns() {
            return Err(Error::DimensionMismatch {
                expected: cube.n_pixels() * w.endmembers.n_columns(),
                found: p.n_rows() * p.n_cols(),
            });
        }
    }
    Ok(())
}

/// Seeds the first snapshot's solver starts from supplied proportions.
fn seed_from<T: Scalar>(
    problem: &Problem<'_, T>,
    columns: &[Vec<T>],
    p: &ProportionMatrix<T>,
) -> Snapshot<T> {
    let p1 = problem.pos.iter().map(|&i| p.row(i).to_vec()).collect();
    let p0 = problem
        .labelled()
        .map(|i| p.row(i)[1..].to_vec())
        .collect();
    Snapshot {
        columns: columns.to_vec(),
        p1,
        c1: Vec::new(),
        p0,
        c0: Vec::new(),
    }
}

/// Runs EM from `init`, or from [`default_init`] with `P = 1/(M+1)` when
/// `init` is `None`.
///
/// Each iteration is an M-step followed by an E-step. The run stops once an
/// iteration lowers the cost by less than `rel_tol` relative to its
/// magnitude, or when no M-step candidate lowers it at all.
pub fn run_efumi<T: Scalar>(
    cube: &HsiCube<T>,
    bags: &BagSet,
    config: &EfumiConfig,
    init: Option<&WarmStart<T>>,
) -> Result<EfumiResult<T>> {
    config.validate()?;
    bags.check_trainable()?;
    let problem = Problem::new(cube, bags)?;
    let mut rng = Rng::new(config.seed);
    let (start, vca_fallback, seed_p) = match init {
        Some(w) => {
            check_init(cube, w)?;
            (w.endmembers.clone(), false, w.proportions.clone())
        }
        None => {
            let (e, fb) = default_init(cube, bags, config.m_init, &mut rng)?;
            let uniform = ProportionMatrix::uniform(cube.n_pixels(), e.n_columns());
            (e, fb, Some(uniform))
        }
    };
    let params = match init.and_then(|w| w.params) {
        Some(p) => p,
        None => resolve_params(&problem, config, &start)?,
    };
    let problem = problem.with_params(&params);
    let prune_threshold = T::lit(config.prune_threshold);

    let seed = seed_p.map(|p| seed_from(&problem, start.columns(), &p));
    let mut snap = problem.snapshot(start.into_columns(), seed.as_ref())?;
    let mut z = problem.e_step(&snap);
    let mut cost = problem.free_energy(&snap, &z);
    let mut trace = vec![cost.as_f64()];
    let mut iterations = 0;
    let mut converged = false;
    let rel_tol = config.rel_tol;
    let mut momentum = T::lit(MOMENTUM_MIN);

    while iterations < config.max_iters {
        iterations += 1;
        let Some((mut cand, fc)) = problem.m_step(&snap, &z, cost, prune_threshold)? else {
            converged = true;
            break;
        };
        if cand.columns.len() == snap.columns.len() {
            let ext: Vec<Vec<T>> = cand
                .columns
                .iter()
                .zip(&snap.columns)
                .map(|(new, old)| blend_unit(old, new, T::one() + momentum))
                .collect();
            let trial = problem.snapshot(ext, Some(&cand))?;
            if problem.free_energy(&trial, &z) < fc {
                cand = trial;
                momentum = (momentum * T::lit(1.5)).min(T::lit(MOMENTUM_MAX));
            } else {
                momentum = (momentum * T::lit(0.5)).max(T::lit(MOMENTUM_MIN));
            }
        }
        let cz = problem.e_step(&cand);
        let ccost = problem.free_energy(&cand, &cz);
        let rel = (cost - ccost).as_f64() / cost.as_f64().abs().max(1e-12);
        snap = cand;
        z = cz;
        cost = ccost;
        trace.push(cost.as_f64());
        if rel < rel_tol {
            converged = true;
            break;
        }
    }

    let proportions = problem.proportions(&snap)?;
    let zweights = problem.zweights(&z);
    Ok(EfumiResult {
        endmembers: EndmemberSet::from_columns(snap.columns)?,
        proportions,
        zweights,
        cost_trace: trace,
        iterations,
        converged,
        params,
        config: config.clone(),
        vca_fallback,
    })
}

/// Posterior target weights for every pixel at endmembers `e`: 0 outside
/// positive bags, the logistic of the two state costs inside.
pub fn e_step<T: Scalar>(
    cube: &HsiCube<T>,
    bags: &BagSet,
    e: &EndmemberSet<T>,
    params: &ResolvedParams,
) -> Result<Vec<T>> {
    let problem = Problem::new(cube, bags)?.with_params(params);
    let snap = problem.snapshot(e.columns().to_vec(), None)?;
    Ok(problem.zweights(&problem.e_step(&snap)))
}

/// One safeguarded M-step at fixed `zweights` (pixel-indexed). Returns the
/// updated endmembers and the proportions re-solved against them; when no
/// candidate lowers the cost the input endmembers come back unchanged.
pub fn m_step<T: Scalar>(
    cube: &HsiCube<T>,
    bags: &BagSet,
    e: &EndmemberSet<T>,
    zweights: &[T],
    params: &ResolvedParams,
    prune_threshold: f64,
) -> Result<(EndmemberSet<T>, ProportionMatrix<T>)> {
    if zweights.len() != cube.n_pixels() {
        return Err(Error::DimensionMismatch {
            expected: cube.n_pixels(),
            found: zweights.len(),
        });
    }
    let problem = Problem::new(cube, bags)?.with_params(params);
    let snap = problem.snapshot(e.columns().to_vec(), None)?;
    let z: Vec<T> = problem.pos.iter().map(|&i| zweights[i]).collect();
    let base = problem.free_energy(&snap, &z);
    let next = match problem.m_step(&snap, &z, base, T::lit(prune_threshold))? {
        Some((s, _)) => s,
        None => snap,
    };
    let p = problem.proportions(&next)?;
    Ok((EndmemberSet::from_columns(next.columns)?, p))
}

/// The objective at `(e, p, zweights)`. Rows of `p` supply the
/// target-available state of positive pixels and the only state of negative
/// pixels; the target-absent state of positive pixels is solved here.
pub fn cost<T: Scalar>(
    cube: &HsiCube<T>,
    bags: &BagSet,
    e: &EndmemberSet<T>,
    p: &ProportionMatrix<T>,
    zweights: &[T],
    params: &ResolvedParams,
) -> Result<T> {
    if p.n_rows() != cube.n_pixels() || p.n_cols() != e.n_columns() {
        return Err(Error::DimensionMismatch {
            expected: cube.n_pixels() * e.n_columns(),
            found: p.n_rows() * p.n_cols(),
        });
    }
    if zweights.len() != cube.n_pixels() {
        return Err(Error::DimensionMismatch {
            expected: cube.n_pixels(),
            found: zweights.len(),
        });
    }
    let problem = Problem::new(cube, bags)?.with_params(params);
    let ls = problem.lambda_sparse;
    let state_cost = |i: usize, row: &[T]| {
        sq_dist(cube.pixel(i), &e.reconstruct(row)) + ls * row[1..].iter().copied().sum::<T>()
    };
    let bg = FclsSolver::new(e.background())?;
    let lin_bg = vec![ls; e.n_background()];
    let mut total = T::zero();
    for &i in &problem.pos {
        let z = zweights[i];
        let s = bg.solve_from(cube.pixel(i), Some(&lin_bg), None)?;
        let c0 = s.residual + ls * s.p.iter().copied().sum::<T>();
        total = total + z * state_cost(i, p.row(i)) + (T::one() - z) * c0 + neg_entropy(z) / problem.beta;
    }
    for &i in &problem.neg {
        total = total + state_cost(i, p.row(i));
    }
    Ok(total + problem.anchor(e.columns()))
}

/// Drops background endmembers whose largest proportion is below
/// `threshold`, re-projecting rows onto the simplex. The target column is
/// never dropped, nor the last remaining background column.
pub fn prune<T: Scalar>(
    e: &EndmemberSet<T>,
    p: &ProportionMatrix<T>,
    threshold: f64,
) -> Result<(EndmemberSet<T>, ProportionMatrix<T>)> {
    if !(threshold < 1.0) {
        return Err(Error::InvalidInput("prune threshold must be below 1".into()));
    }
    if p.n_cols() != e.n_columns() {
        return Err(Error::DimensionMismatch {
            expected: e.n_columns(),
            found: p.n_cols(),
        });
    }
    let t = T::lit(threshold);
    let m = e.n_background();
    let mut drop: Vec<usize> = (1..=m).filter(|&j| threshold > 0.0 && p.column_max(j) < t).collect();
    if drop.len() == m && m > 0 {
        drop.remove(0);
    }
    if drop.is_empty() {
        return Ok((e.clone(), p.clone()));
    }
    Ok((e.without_background(&drop), p.without_columns(&drop)))
}

#[cfg(test)]
mod tests;
