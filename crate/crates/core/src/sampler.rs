//! No-U-turn Hamiltonian Monte Carlo with multinomial trajectory sampling,
//! a diagonal metric and dual-averaging step-size adaptation.
//!
//! Warmup is split into four windows: step size only for the first 15%,
//! two metric-estimation windows ending at 50% and 90%, then step size only
//! again. At the end of each metric window the inverse metric is set to the
//! regularized sample variance of that window and step-size adaptation
//! restarts.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::likelihood::LogPosterior;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("invalid sampler configuration: {0}")]
    BadConfig(String),
    #[error("no finite starting point found after {0} attempts")]
    InitFailed(usize),
    #[error("step size search failed: {0}")]
    StepSize(String),
    #[error("{divergent} of {total} post-warmup transitions diverged")]
    AllDivergent { divergent: usize, total: usize },
}

/// A differentiable log density.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;
    /// Writes the gradient into `grad` and returns the value; `-inf` outside
    /// the support.
    fn log_density_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64;
}

impl LogDensity for LogPosterior {
    fn dim(&self) -> usize {
        LogPosterior::dim(self)
    }

    fn log_density_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        LogPosterior::log_density_and_gradient(self, x, grad)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub chains: usize,
    pub warmup: usize,
    pub samples: usize,
    pub target_accept: f64,
    pub max_depth: usize,
    pub seed: u64,
    /// Starting points are drawn uniformly from `[-init_radius, init_radius]`.
    pub init_radius: f64,
    /// Restart all chains from the best one after the first metric window.
    pub consolidate: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            warmup: 1000,
            samples: 1000,
            target_accept: 0.8,
            max_depth: 10,
            seed: 0,
            init_radius: 2.0,
            consolidate: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.chains == 0 || self.samples == 0 || self.max_depth == 0 {
            return Err(SamplerError::BadConfig(
                "chains, samples and max_depth must be positive".into(),
            ));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(SamplerError::BadConfig(format!(
                "target_accept = {}",
                self.target_accept
            )));
        }
        if !(self.init_radius.is_finite() && self.init_radius >= 0.0) {
            return Err(SamplerError::BadConfig("init_radius".into()));
        }
        Ok(())
    }
}

/// Post-warmup output of one chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainOutput {
    /// Unconstrained draws.
    pub draws: Vec<Vec<f64>>,
    pub log_density: Vec<f64>,
    pub divergent: Vec<bool>,
    pub accept_stat: Vec<f64>,
    pub tree_depth: Vec<usize>,
    pub step_size: f64,
    pub inv_metric: Vec<f64>,
    pub warmup_divergences: usize,
}

const MAX_DELTA_H: f64 = 1000.0;
const INIT_ATTEMPTS: usize = 100;

#[derive(Clone)]
struct Point {
    q: Vec<f64>,
    p: Vec<f64>,
    grad: Vec<f64>,
    lp: f64,
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

struct Integrator<'a, T: LogDensity> {
    target: &'a T,
    inv_metric: Vec<f64>,
    step: f64,
}

impl<T: LogDensity> Integrator<'_, T> {
    fn kinetic(&self, p: &[f64]) -> f64 {
        0.5 * p
            .iter()
            .zip(&self.inv_metric)
            .map(|(p, m)| p * p * m)
            .sum::<f64>()
    }

    fn hamiltonian(&self, z: &Point) -> f64 {
        let h = -z.lp + self.kinetic(&z.p);
        if h.is_nan() {
            f64::INFINITY
        } else {
            h
        }
    }

    fn velocity(&self, p: &[f64]) -> Vec<f64> {
        p.iter().zip(&self.inv_metric).map(|(p, m)| p * m).collect()
    }

    fn leapfrog(&self, z: &mut Point, eps: f64) {
        for (p, g) in z.p.iter_mut().zip(&z.grad) {
            *p += 0.5 * eps * g;
        }
        for ((q, p), m) in z.q.iter_mut().zip(&z.p).zip(&self.inv_metric) {
            *q += eps * m * p;
        }
        z.lp = self.target.log_density_and_gradient(&z.q, &mut z.grad);
        for (p, g) in z.p.iter_mut().zip(&z.grad) {
            *p += 0.5 * eps * g;
        }
    }

    fn refresh_momentum(&self, z: &mut Point, rng: &mut ChaCha8Rng) {
        for (p, m) in z.p.iter_mut().zip(&self.inv_metric) {
            let n: f64 = StandardNormal.sample(rng);
            *p = n / m.sqrt();
        }
    }
}

struct TreeStats {
    h0: f64,
    n_leapfrog: usize,
    sum_metro_prob: f64,
    divergent: bool,
}

fn criterion(p_sharp_minus: &[f64], p_sharp_plus: &[f64], rho: &[f64]) -> bool {
    dot(p_sharp_plus, rho) > 0.0 && dot(p_sharp_minus, rho) > 0.0
}

/// Extends the trajectory from `z` by `2^depth` leapfrog steps in direction
/// `sign`. Returns whether the subtree is valid (no U-turn, no divergence).
#[allow(clippy::too_many_arguments)]
fn build_tree<T: LogDensity>(
    integ: &Integrator<'_, T>,
    depth: usize,
    z: &mut Point,
    z_propose: &mut Point,
    p_sharp_beg: &mut Vec<f64>,
    p_sharp_end: &mut Vec<f64>,
    rho: &mut Vec<f64>,
    p_beg: &mut Vec<f64>,
    p_end: &mut Vec<f64>,
    sign: f64,
    stats: &mut TreeStats,
    log_sum_weight: &mut f64,
    rng: &mut ChaCha8Rng,
) -> bool {
    if depth == 0 {
        integ.leapfrog(z, sign * integ.step);
        stats.n_leapfrog += 1;
        let h = integ.hamiltonian(z);
        if h - stats.h0 > MAX_DELTA_H {
            stats.divergent = true;
        }
        *log_sum_weight = log_sum_exp(*log_sum_weight, stats.h0 - h);
        stats.sum_metro_prob += if stats.h0 - h > 0.0 {
            1.0
        } else {
            (stats.h0 - h).exp()
        };
        z_propose.clone_from(z);
        *p_sharp_beg = integ.velocity(&z.p);
        p_sharp_end.clone_from(p_sharp_beg);
        for (r, p) in rho.iter_mut().zip(&z.p) {
            *r += p;
        }
        p_beg.clone_from(&z.p);
        p_end.clone_from(p_beg);
        return !stats.divergent;
    }

    let dim = z.q.len();
    let mut p_sharp_init_end = vec![0.0; dim];
    let mut p_init_end = vec![0.0; dim];
    let mut rho_init = vec![0.0; dim];
    let mut lsw_init = f64::NEG_INFINITY;
    if !build_tree(
        integ,
        depth - 1,
        z,
        z_propose,
        p_sharp_beg,
        &mut p_sharp_init_end,
        &mut rho_init,
        p_beg,
        &mut p_init_end,
        sign,
        stats,
        &mut lsw_init,
        rng,
    ) {
        return false;
    }

    let mut z_propose_final = z.clone();
    let mut rho_final = vec![0.0; dim];
    let mut p_final_beg = vec![0.0; dim];
    let mut p_sharp_final_beg = vec![0.0; dim];
    let mut lsw_final = f64::NEG_INFINITY;
    if !build_tree(
        integ,
        depth - 1,
        z,
        &mut z_propose_final,
        &mut p_sharp_final_beg,
        p_sharp_end,
        &mut rho_final,
        &mut p_final_beg,
        p_end,
        sign,
        stats,
        &mut lsw_final,
        rng,
    ) {
        return false;
    }

    let lsw_subtree = log_sum_exp(lsw_init, lsw_final);
    *log_sum_weight = log_sum_exp(*log_sum_weight, lsw_subtree);
    if lsw_final > lsw_subtree || rng.random::<f64>() < (lsw_final - lsw_subtree).exp() {
        *z_propose = z_propose_final;
    }

    let rho_subtree = add(&rho_init, &rho_final);
    for (r, s) in rho.iter_mut().zip(&rho_subtree) {
        *r += s;
    }
    let mut persist = criterion(p_sharp_beg, p_sharp_end, &rho_subtree);
    persist &= criterion(p_sharp_beg, &p_sharp_final_beg, &add(&rho_init, &p_final_beg));
    persist &= criterion(&p_sharp_init_end, p_sharp_end, &add(&rho_final, &p_init_end));
    persist
}

struct Transition {
    accept_stat: f64,
    depth: usize,
    divergent: bool,
}

fn nuts_transition<T: LogDensity>(
    integ: &Integrator<'_, T>,
    z: &mut Point,
    max_depth: usize,
    rng: &mut ChaCha8Rng,
) -> Transition {
    integ.refresh_momentum(z, rng);
    let dim = z.q.len();
    let mut z_fwd = z.clone();
    let mut z_bck = z.clone();
    let mut z_sample = z.clone();
    let mut z_propose = z.clone();

    let p_sharp = integ.velocity(&z.p);
    let mut p_fwd_fwd = z.p.clone();
    let mut p_sharp_fwd_fwd = p_sharp.clone();
    let mut p_fwd_bck = z.p.clone();
    let mut p_sharp_fwd_bck = p_sharp.clone();
    let mut p_bck_fwd = z.p.clone();
    let mut p_sharp_bck_fwd = p_sharp.clone();
    let mut p_bck_bck = z.p.clone();
    let mut p_sharp_bck_bck = p_sharp;
    let mut rho = z.p.clone();
    let mut log_sum_weight = 0.0;

    let mut stats = TreeStats {
        h0: integ.hamiltonian(z),
        n_leapfrog: 0,
        sum_metro_prob: 0.0,
        divergent: false,
    };
    let mut depth = 0;
    while depth < max_depth {
        let mut rho_fwd = vec![0.0; dim];
        let mut rho_bck = vec![0.0; dim];
        let mut lsw_subtree = f64::NEG_INFINITY;
        let valid = if rng.random::<f64>() > 0.5 {
            rho_bck.clone_from(&rho);
            p_bck_fwd.clone_from(&p_fwd_bck);
            p_sharp_bck_fwd.clone_from(&p_sharp_fwd_bck);
            let v = build_tree(
                integ,
                depth,
                &mut z_fwd,
                &mut z_propose,
                &mut p_sharp_fwd_bck,
                &mut p_sharp_fwd_fwd,
                &mut rho_fwd,
                &mut p_fwd_bck,
                &mut p_fwd_fwd,
                1.0,
                &mut stats,
                &mut lsw_subtree,
                rng,
            );
            v
        } else {
            rho_fwd.clone_from(&rho);
            p_fwd_bck.clone_from(&p_bck_fwd);
            p_sharp_fwd_bck.clone_from(&p_sharp_bck_fwd);
            build_tree(
                integ,
                depth,
                &mut z_bck,
                &mut z_propose,
                &mut p_sharp_bck_fwd,
                &mut p_sharp_bck_bck,
                &mut rho_bck,
                &mut p_bck_fwd,
                &mut p_bck_bck,
                -1.0,
                &mut stats,
                &mut lsw_subtree,
                rng,
            )
        };
        if !valid {
            break;
        }
        depth += 1;
        if lsw_subtree > log_sum_weight
            || rng.random::<f64>() < (lsw_subtree - log_sum_weight).exp()
        {
            z_sample.clone_from(&z_propose);
        }
        log_sum_weight = log_sum_exp(log_sum_weight, lsw_subtree);
        rho = add(&rho_bck, &rho_fwd);
        let mut persist = criterion(&p_sharp_bck_bck, &p_sharp_fwd_fwd, &rho);
        persist &= criterion(&p_sharp_bck_bck, &p_sharp_fwd_bck, &add(&rho_bck, &p_fwd_bck));
        persist &= criterion(&p_sharp_bck_fwd, &p_sharp_fwd_fwd, &add(&rho_fwd, &p_bck_fwd));
        if !persist {
            break;
        }
    }
    *z = z_sample;
    Transition {
        accept_stat: if stats.n_leapfrog > 0 {
            stats.sum_metro_prob / stats.n_leapfrog as f64
        } else {
            0.0
        },
        depth,
        divergent: stats.divergent,
    }
}

/// Dual-averaging step-size adaptation.
struct DualAveraging {
    mu: f64,
    target: f64,
    counter: f64,
    s_bar: f64,
    x_bar: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(step: f64, target: f64) -> Self {
        Self {
            mu: (10.0 * step).ln(),
            target,
            counter: 0.0,
            s_bar: 0.0,
            x_bar: 0.0,
        }
    }

    fn learn(&mut self, accept_stat: f64) -> f64 {
        self.counter += 1.0;
        let stat = accept_stat.min(1.0);
        let eta = 1.0 / (self.counter + Self::T0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.target - stat);
        let x = self.mu - self.s_bar * self.counter.sqrt() / Self::GAMMA;
        let x_eta = self.counter.powf(-Self::KAPPA);
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x;
        x.exp()
    }

    fn final_step(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Running mean and variance.
#[derive(Default)]
struct Welford {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn push(&mut self, x: &[f64]) {
        if self.mean.is_empty() {
            self.mean = vec![0.0; x.len()];
            self.m2 = vec![0.0; x.len()];
        }
        self.n += 1;
        for ((m, s), v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let d = v - *m;
            *m += d / self.n as f64;
            *s += d * (v - *m);
        }
    }

    /// Sample variance shrunk toward `1e-3`.
    fn regularized(&self) -> Vec<f64> {
        let n = self.n as f64;
        self.m2
            .iter()
            .map(|s| (n / (n + 5.0)) * s / (n - 1.0) + 1e-3 * 5.0 / (n + 5.0))
            .collect()
    }
}

/// Doubles or halves the step until a single leapfrog step's acceptance
/// probability crosses 0.8.
fn find_reasonable_step<T: LogDensity>(
    integ: &mut Integrator<'_, T>,
    z: &Point,
    rng: &mut ChaCha8Rng,
) -> Result<(), SamplerError> {
    let mut trial = z.clone();
    integ.refresh_momentum(&mut trial, rng);
    let h0 = integ.hamiltonian(&trial);
    integ.leapfrog(&mut trial, integ.step);
    let delta = h0 - integ.hamiltonian(&trial);
    let direction = if delta > 0.8f64.ln() { 1 } else { -1 };
    loop {
        let mut trial = z.clone();
        integ.refresh_momentum(&mut trial, rng);
        let h0 = integ.hamiltonian(&trial);
        integ.leapfrog(&mut trial, integ.step);
        let delta = h0 - integ.hamiltonian(&trial);
        if (direction == 1 && delta <= 0.8f64.ln()) || (direction == -1 && delta >= 0.8f64.ln())
        {
            return Ok(());
        }
        integ.step = if direction == 1 {
            2.0 * integ.step
        } else {
            0.5 * integ.step
        };
        if integ.step > 1e7 {
            return Err(SamplerError::StepSize("posterior is improper".into()));
        }
        if integ.step == 0.0 {
            return Err(SamplerError::StepSize("step size underflowed".into()));
        }
    }
}

fn initial_point<T: LogDensity>(
    target: &T,
    radius: f64,
    init: Option<&[f64]>,
    rng: &mut ChaCha8Rng,
) -> Result<Point, SamplerError> {
    let dim = target.dim();
    for attempt in 0..INIT_ATTEMPTS {
        let q: Vec<f64> = match init {
            Some(x) if attempt == 0 => x.to_vec(),
            _ => (0..dim)
                .map(|_| {
                    if radius > 0.0 {
                        rng.random_range(-radius..=radius)
                    } else {
                        0.0
                    }
                })
                .collect(),
        };
        let mut grad = vec![0.0; dim];
        let lp = target.log_density_and_gradient(&q, &mut grad);
        if lp.is_finite() && grad.iter().all(|g| g.is_finite()) {
            return Ok(Point {
                q,
                p: vec![0.0; dim],
                grad,
                lp,
            });
        }
    }
    Err(SamplerError::InitFailed(INIT_ATTEMPTS))
}

/// Warmup window boundaries `[step-only end, first metric end, second metric end]`.
fn windows(warmup: usize) -> [usize; 3] {
    let at = |f: f64| ((warmup as f64) * f).floor() as usize;
    [at(0.15), at(0.5), at(0.9)]
}

struct ChainRunner<'a, T: LogDensity> {
    integ: Integrator<'a, T>,
    z: Point,
    adapt: DualAveraging,
    variance: Welford,
    rng: ChaCha8Rng,
    warmup_divergences: usize,
    lp_trace: Vec<f64>,
}

impl<'a, T: LogDensity> ChainRunner<'a, T> {
    fn new(
        target: &'a T,
        cfg: &SamplerConfig,
        mut rng: ChaCha8Rng,
        init: Option<&[f64]>,
    ) -> Result<Self, SamplerError> {
        let dim = target.dim();
        let z = initial_point(target, cfg.init_radius, init, &mut rng)?;
        let mut integ = Integrator {
            target,
            inv_metric: vec![1.0; dim],
            step: 1.0,
        };
        if dim > 0 {
            find_reasonable_step(&mut integ, &z, &mut rng)?;
        }
        let adapt = DualAveraging::new(integ.step, cfg.target_accept);
        Ok(Self {
            integ,
            z,
            adapt,
            variance: Welford::default(),
            rng,
            warmup_divergences: 0,
            lp_trace: Vec::with_capacity(cfg.warmup),
        })
    }

    fn warmup(&mut self, cfg: &SamplerConfig, iters: std::ops::Range<usize>) -> Result<(), SamplerError> {
        let [init_end, first_end, second_end] = windows(cfg.warmup);
        for it in iters {
            let t = nuts_transition(&self.integ, &mut self.z, cfg.max_depth, &mut self.rng);
            self.warmup_divergences += t.divergent as usize;
            self.lp_trace.push(self.z.lp);
            self.integ.step = self.adapt.learn(t.accept_stat);
            if it >= init_end && it < second_end {
                self.variance.push(&self.z.q);
            }
            if (it + 1 == first_end || it + 1 == second_end) && self.variance.n >= 3 {
                self.integ.inv_metric = self.variance.regularized();
                self.variance = Welford::default();
                find_reasonable_step(&mut self.integ, &self.z, &mut self.rng)?;
                self.adapt = DualAveraging::new(self.integ.step, cfg.target_accept);
            }
        }
        Ok(())
    }

    /// Mean log density over the second half of the warmup so far.
    fn recent_lp(&self) -> f64 {
        let tail = &self.lp_trace[self.lp_trace.len() / 2..];
        if tail.is_empty() {
            return self.z.lp;
        }
        tail.iter().sum::<f64>() / tail.len() as f64
    }

    /// Moves to another chain's position and adopts its adaptation state.
    fn adopt(&mut self, other: &Self, cfg: &SamplerConfig) -> Result<(), SamplerError> {
        self.z = other.z.clone();
        self.integ.inv_metric = other.integ.inv_metric.clone();
        self.integ.step = other.integ.step;
        find_reasonable_step(&mut self.integ, &self.z, &mut self.rng)?;
        self.adapt = DualAveraging::new(self.integ.step, cfg.target_accept);
        Ok(())
    }

    fn sample(mut self, cfg: &SamplerConfig) -> ChainOutput {
        if cfg.warmup > 0 {
            self.integ.step = self.adapt.final_step();
        }
        let mut out = ChainOutput {
            draws: Vec::with_capacity(cfg.samples),
            log_density: Vec::with_capacity(cfg.samples),
            divergent: Vec::with_capacity(cfg.samples),
            accept_stat: Vec::with_capacity(cfg.samples),
            tree_depth: Vec::with_capacity(cfg.samples),
            step_size: self.integ.step,
            inv_metric: self.integ.inv_metric.clone(),
            warmup_divergences: self.warmup_divergences,
        };
        for _ in 0..cfg.samples {
            let t = nuts_transition(&self.integ, &mut self.z, cfg.max_depth, &mut self.rng);
            out.draws.push(self.z.q.clone());
            out.log_density.push(self.z.lp);
            out.divergent.push(t.divergent);
            out.accept_stat.push(t.accept_stat);
            out.tree_depth.push(t.depth);
        }
        out
    }
}

/// Runs one chain with the given RNG.
pub fn run_chain<T: LogDensity>(
    target: &T,
    cfg: &SamplerConfig,
    rng: ChaCha8Rng,
    init: Option<&[f64]>,
) -> Result<ChainOutput, SamplerError> {
    cfg.validate()?;
    let mut runner = ChainRunner::new(target, cfg, rng, init)?;
    runner.warmup(cfg, 0..cfg.warmup)?;
    Ok(runner.sample(cfg))
}

/// RNG for chain `chain`: the master seed with the chain index as stream.
pub fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

/// Runs all chains in parallel. Output order follows the chain index, so
/// results depend only on the seed.
///
/// With `cfg.consolidate`, every chain continues from the position and
/// metric of the chain with the highest recent log density once the first
/// metric window closes; the rest of warmup and sampling stay independent.
pub fn run_chains<T: LogDensity>(
    target: &T,
    cfg: &SamplerConfig,
    init: Option<&[f64]>,
) -> Result<Vec<ChainOutput>, SamplerError> {
    cfg.validate()?;
    let [_, first_end, _] = windows(cfg.warmup);
    let mut runners: Vec<ChainRunner<'_, T>> = (0..cfg.chains)
        .into_par_iter()
        .map(|c| -> Result<_, SamplerError> {
            let mut r = ChainRunner::new(target, cfg, chain_rng(cfg.seed, c), init)?;
            r.warmup(cfg, 0..first_end)?;
            Ok(r)
        })
        .collect::<Result<_, _>>()?;
    if cfg.consolidate && cfg.chains > 1 && first_end > 0 {
        let best = (0..runners.len())
            .max_by(|&a, &b| runners[a].recent_lp().total_cmp(&runners[b].recent_lp()))
            .expect("at least one chain");
        let leader = ChainRunner {
            integ: Integrator {
                target,
                inv_metric: runners[best].integ.inv_metric.clone(),
                step: runners[best].integ.step,
            },
            z: runners[best].z.clone(),
            adapt: DualAveraging::new(1.0, cfg.target_accept),
            variance: Welford::default(),
            rng: chain_rng(cfg.seed, 0),
            warmup_divergences: 0,
            lp_trace: Vec::new(),
        };
        runners
            .par_iter_mut()
            .enumerate()
            .filter(|(c, _)| *c != best)
            .try_for_each(|(_, r)| r.adopt(&leader, cfg))?;
    }
    let chains: Vec<ChainOutput> = runners
        .into_par_iter()
        .map(|mut r| -> Result<_, SamplerError> {
            r.warmup(cfg, first_end..cfg.warmup)?;
            Ok(r.sample(cfg))
        })
        .collect::<Result<_, _>>()?;
    let total: usize = chains.iter().map(|c| c.divergent.len()).sum();
    let divergent: usize = chains
        .iter()
        .map(|c| c.divergent.iter().filter(|&&d| d).count())
        .sum();
    if 2 * divergent > total {
        return Err(SamplerError::AllDivergent { divergent, total });
    }
    Ok(chains)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct StdNormal(usize);

    impl LogDensity for StdNormal {
        fn dim(&self) -> usize {
            self.0
        }
        fn log_density_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
            for (g, v) in grad.iter_mut().zip(x) {
                *g = -v;
            }
            -0.5 * x.iter().map(|v| v * v).sum::<f64>()
        }
    }

    struct Scaled;

    impl LogDensity for Scaled {
        fn dim(&self) -> usize {
            2
        }
        fn log_density_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
            let s = [0.01, 10.0];
            for i in 0..2 {
                grad[i] = -x[i] / (s[i] * s[i]);
            }
            -0.5 * (x[0] * x[0] / 1e-4 + x[1] * x[1] / 100.0)
        }
    }

    struct Nowhere;

    impl LogDensity for Nowhere {
        fn dim(&self) -> usize {
            1
        }
        fn log_density_and_gradient(&self, _: &[f64], grad: &mut [f64]) -> f64 {
            grad[0] = 0.0;
            f64::NEG_INFINITY
        }
    }

    #[test]
    fn standard_normal_moments() {
        let cfg = SamplerConfig {
            seed: 42,
            ..Default::default()
        };
        let chains = run_chains(&StdNormal(1), &cfg, None).unwrap();
        let xs: Vec<f64> = chains.iter().flat_map(|c| c.draws.iter().map(|d| d[0])).collect();
        assert_eq!(xs.len(), 4000);
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((0.9..=1.1).contains(&var), "var {var}");
    }

    #[test]
    fn same_seed_same_draws() {
        let cfg = SamplerConfig {
            warmup: 100,
            samples: 50,
            seed: 7,
            ..Default::default()
        };
        let a = run_chains(&StdNormal(3), &cfg, None).unwrap();
        let b = run_chains(&StdNormal(3), &cfg, None).unwrap();
        assert_eq!(a, b);
        let c = run_chains(&StdNormal(3), &SamplerConfig { seed: 8, ..cfg }, None).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn metric_adapts_to_scales() {
        let cfg = SamplerConfig {
            chains: 1,
            seed: 3,
            ..Default::default()
        };
        let chain = &run_chains(&Scaled, &cfg, None).unwrap()[0];
        let ratio = chain.inv_metric[1] / chain.inv_metric[0];
        assert!(ratio > 1e5 && ratio < 1e7, "ratio {ratio}");
        let mean_accept = chain.accept_stat.iter().sum::<f64>() / chain.accept_stat.len() as f64;
        assert!((0.6..0.97).contains(&mean_accept), "accept {mean_accept}");
    }

    #[test]
    fn unusable_target_fails_to_initialize() {
        let err = run_chains(&Nowhere, &SamplerConfig::default(), None).unwrap_err();
        assert_eq!(err, SamplerError::InitFailed(INIT_ATTEMPTS));
    }

    #[test]
    fn config_validation() {
        let bad = SamplerConfig {
            target_accept: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(SamplerConfig {
            chains: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn window_layout() {
        assert_eq!(windows(1000), [150, 500, 900]);
    }
}
