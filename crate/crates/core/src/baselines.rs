//! Comparison methods: global score averages with normal-approximation
//! intervals, a per-judge breakdown, a question bootstrap, and a
//! Bradley-Terry model with ties (Rao-Kupper) fitted by damped Newton steps.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::{draw_ranks, summarize_scores, CandidateSummary, RankReport};
use crate::model::{Ranking, ScoreDataset};
use crate::sampler::chain_rng;

/// Smallest replicate count accepted by the bootstrap.
pub const MIN_REPLICATES: usize = 100;
/// Upper bound on the tie parameter; reached when every comparison ties.
pub const NU_MAX: f64 = 1e6;
const Z_975: f64 = 1.959_963_984_540_054;
const GRAD_TOL: f64 = 1e-8;
const MAX_ITERATIONS: usize = 10_000;
const X_BOUND: f64 = 50.0;
const U_MIN: f64 = -40.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaselineError {
    #[error("need at least two scored candidates, got {0}")]
    TooFewCandidates(usize),
    #[error("bootstrap needs at least {MIN_REPLICATES} replicates, got {0}")]
    TooFewReplicates(usize),
    #[error("comparison graph splits into {} groups", .components.len())]
    Disconnected {
        components: Vec<Vec<String>>,
        partial: Box<RankReport>,
    },
}

/// Records reduced to per-question lists of `(candidate index, judge index,
/// value)`, grouped by stratum. Abstentions are dropped.
struct QuestionTable {
    candidates: Vec<String>,
    /// `strata[s][q]` lists the valued scores of one question.
    strata: Vec<Vec<Vec<(usize, usize, f64)>>>,
}

impl QuestionTable {
    fn new(ds: &ScoreDataset) -> Self {
        let mut by_question: BTreeMap<(&str, &str), Vec<(&str, &str, f64)>> = BTreeMap::new();
        for r in &ds.records {
            if let Some(v) = ds.rubric.assigned_value(r.assigned_level) {
                by_question
                    .entry((&r.stratum_id, &r.question_id))
                    .or_default()
                    .push((&r.candidate_id, &r.judge_id, v));
            }
        }
        let mut candidates: Vec<String> = by_question
            .values()
            .flatten()
            .map(|(c, _, _)| c.to_string())
            .collect();
        candidates.sort();
        candidates.dedup();
        let mut judges: Vec<&str> = by_question.values().flatten().map(|e| e.1).collect();
        judges.sort();
        judges.dedup();
        let mut strata: Vec<Vec<Vec<(usize, usize, f64)>>> = Vec::new();
        let mut current: Option<&str> = None;
        for ((s, _), entries) in &by_question {
            if current != Some(*s) {
                strata.push(Vec::new());
                current = Some(*s);
            }
            let mut row: Vec<(usize, usize, f64)> = entries
                .iter()
                .map(|(c, j, v)| {
                    (
                        candidates.binary_search_by(|x| x.as_str().cmp(c)).unwrap(),
                        judges.binary_search(j).unwrap(),
                        *v,
                    )
                })
                .collect();
            row.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)).then(a.2.total_cmp(&b.2)));
            strata.last_mut().unwrap().push(row);
        }
        Self { candidates, strata }
    }

    fn all_questions(&self) -> Vec<&[(usize, usize, f64)]> {
        self.strata.iter().flatten().map(Vec::as_slice).collect()
    }

    /// Questions drawn with replacement within each stratum.
    fn resample<R: Rng>(&self, rng: &mut R) -> Vec<&[(usize, usize, f64)]> {
        let mut out = Vec::new();
        for stratum in &self.strata {
            for _ in 0..stratum.len() {
                out.push(stratum[rng.random_range(0..stratum.len())].as_slice());
            }
        }
        out
    }
}

struct Moments {
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    n: Vec<usize>,
}

fn moments(k: usize, questions: &[&[(usize, usize, f64)]]) -> Moments {
    let mut m = Moments {
        sum: vec![0.0; k],
        sum_sq: vec![0.0; k],
        n: vec![0; k],
    };
    for q in questions {
        for &(c, _, v) in q.iter() {
            m.sum[c] += v;
            m.sum_sq[c] += v * v;
            m.n[c] += 1;
        }
    }
    m
}

fn means(m: &Moments) -> Vec<f64> {
    m.sum
        .iter()
        .zip(&m.n)
        .map(|(s, &n)| if n == 0 { f64::NAN } else { s / n as f64 })
        .collect()
}

/// Report from point scores and score intervals. A candidate's rank interval
/// runs from one plus the number of candidates whose whole interval lies
/// above its own to the number of candidates not entirely below it.
fn interval_report(
    candidates: &[String],
    scores: &[f64],
    intervals: &[(f64, f64)],
) -> RankReport {
    let ranks = draw_ranks(scores);
    let mut summaries = BTreeMap::new();
    let mut by_id = BTreeMap::new();
    for (i, c) in candidates.iter().enumerate() {
        let (lo, hi) = intervals[i];
        let above = intervals.iter().filter(|o| o.0 > hi).count();
        let below = intervals.iter().filter(|o| o.1 < lo).count();
        summaries.insert(
            c.clone(),
            CandidateSummary {
                mean_score: scores[i],
                score_interval: (lo, hi),
                mean_rank: ranks[i] as f64,
                median_rank: ranks[i] as f64,
                rank_interval: (1 + above, candidates.len() - below),
            },
        );
        by_id.insert(c.clone(), scores[i]);
    }
    RankReport {
        candidates: summaries,
        ranking: Ranking::from_scores(&by_id, 0.0),
        diagnostics: BTreeMap::new(),
        divergences: 0,
        num_draws: 0,
    }
}

fn average_report(candidates: &[String], m: &Moments) -> Result<RankReport, BaselineError> {
    let scored = m.n.iter().filter(|&&n| n > 0).count();
    if scored < 2 {
        return Err(BaselineError::TooFewCandidates(scored));
    }
    let keep: Vec<usize> = (0..candidates.len()).filter(|&i| m.n[i] > 0).collect();
    let names: Vec<String> = keep.iter().map(|&i| candidates[i].clone()).collect();
    let mu = means(m);
    let scores: Vec<f64> = keep.iter().map(|&i| mu[i]).collect();
    let intervals: Vec<(f64, f64)> = keep
        .iter()
        .map(|&i| {
            let n = m.n[i] as f64;
            let var = if n > 1.0 {
                ((m.sum_sq[i] - n * mu[i] * mu[i]) / (n - 1.0)).max(0.0)
            } else {
                0.0
            };
            let half = Z_975 * (var / n).sqrt();
            (mu[i] - half, mu[i] + half)
        })
        .collect();
    Ok(interval_report(&names, &scores, &intervals))
}

/// Ranks candidates by their mean assigned value over all judges; intervals
/// are mean ± 1.96 standard errors.
pub fn simple_average(ds: &ScoreDataset) -> Result<RankReport, BaselineError> {
    let table = QuestionTable::new(ds);
    average_report(
        &table.candidates,
        &moments(table.candidates.len(), &table.all_questions()),
    )
}

/// Simple average with judge identity ignored, plus one report per judge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleJudgeReport {
    pub pooled: RankReport,
    /// Per-judge reports; judges that scored fewer than two candidates are
    /// omitted.
    pub per_judge: BTreeMap<String, RankReport>,
}

/// Treats all scores as coming from one judge.
pub fn single_judge(ds: &ScoreDataset) -> Result<SingleJudgeReport, BaselineError> {
    let pooled = simple_average(ds)?;
    let mut per_judge = BTreeMap::new();
    for judge in ds.judges() {
        let sub = ScoreDataset {
            records: ds
                .records
                .iter()
                .filter(|r| r.judge_id == judge)
                .cloned()
                .collect(),
            ..ds.clone()
        };
        if let Ok(report) = simple_average(&sub) {
            per_judge.insert(judge, report);
        }
    }
    Ok(SingleJudgeReport { pooled, per_judge })
}

/// Summary over bootstrap replicates with point estimates from the full data.
fn replicate_report(
    candidates: &[String],
    point: &[f64],
    replicates: Vec<Vec<f64>>,
) -> RankReport {
    let mut report = summarize_scores(candidates, &[replicates], BTreeMap::new(), 0)
        .expect("at least two candidates");
    let mut by_id = BTreeMap::new();
    for (c, &s) in candidates.iter().zip(point) {
        report.candidates.get_mut(c).unwrap().mean_score = s;
        by_id.insert(c.clone(), s);
    }
    report.ranking = Ranking::from_scores(&by_id, 0.0);
    report
}

/// Percentile intervals of mean-score ranks over question resamples drawn
/// within each stratum. Replicate `r` uses its own RNG stream.
pub fn bootstrap_rank_ci(
    ds: &ScoreDataset,
    replicates: usize,
    seed: u64,
) -> Result<RankReport, BaselineError> {
    if replicates < MIN_REPLICATES {
        return Err(BaselineError::TooFewReplicates(replicates));
    }
    let table = QuestionTable::new(ds);
    let k = table.candidates.len();
    if k < 2 {
        return Err(BaselineError::TooFewCandidates(k));
    }
    let point = means(&moments(k, &table.all_questions()));
    let draws: Vec<Vec<f64>> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = chain_rng(seed, r);
            let mu = means(&moments(k, &table.resample(&mut rng)));
            mu.iter()
                .zip(&point)
                .map(|(m, p)| if m.is_nan() { *p } else { *m })
                .collect()
        })
        .collect();
    Ok(replicate_report(&table.candidates, &point, draws))
}

/// Win and tie counts between candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairCounts {
    pub candidates: Vec<String>,
    /// `wins[i][j]`: comparisons `i` won against `j`.
    pub wins: Vec<Vec<f64>>,
    /// Symmetric tie counts.
    pub ties: Vec<Vec<f64>>,
}

impl PairCounts {
    pub fn new(candidates: Vec<String>) -> Self {
        let k = candidates.len();
        Self {
            candidates,
            wins: vec![vec![0.0; k]; k],
            ties: vec![vec![0.0; k]; k],
        }
    }

    pub fn add_win(&mut self, winner: usize, loser: usize, n: f64) {
        self.wins[winner][loser] += n;
    }

    pub fn add_tie(&mut self, a: usize, b: usize, n: f64) {
        self.ties[a][b] += n;
        self.ties[b][a] += n;
    }

    fn add_question(&mut self, q: &[(usize, usize, f64)]) {
        for (x, a) in q.iter().enumerate() {
            for b in &q[x + 1..] {
                if a.1 != b.1 || a.0 == b.0 {
                    continue;
                }
                match a.2.total_cmp(&b.2) {
                    std::cmp::Ordering::Greater => self.add_win(a.0, b.0, 1.0),
                    std::cmp::Ordering::Less => self.add_win(b.0, a.0, 1.0),
                    std::cmp::Ordering::Equal => self.add_tie(a.0, b.0, 1.0),
                }
            }
        }
    }

    /// Pairwise outcomes between candidates scored by the same judge on the
    /// same question: the higher level wins, equal levels tie.
    pub fn from_dataset(ds: &ScoreDataset) -> Self {
        let table = QuestionTable::new(ds);
        let mut pc = Self::new(table.candidates.clone());
        for q in table.all_questions() {
            pc.add_question(q);
        }
        pc
    }

    fn total_ties(&self) -> f64 {
        self.ties.iter().flatten().sum::<f64>() / 2.0
    }

    /// Groups of mutually reachable candidates in the graph with an edge
    /// `i → j` whenever `i` beat or tied `j`, listed so that no group is
    /// reachable from a later one only.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let k = self.candidates.len();
        let mut reach = vec![vec![false; k]; k];
        for i in 0..k {
            reach[i][i] = true;
            for j in 0..k {
                if self.wins[i][j] > 0.0 || self.ties[i][j] > 0.0 {
                    reach[i][j] = true;
                }
            }
        }
        for m in 0..k {
            for i in 0..k {
                if reach[i][m] {
                    for j in 0..k {
                        if reach[m][j] {
                            reach[i][j] = true;
                        }
                    }
                }
            }
        }
        let mut assigned = vec![false; k];
        let mut comps: Vec<Vec<usize>> = Vec::new();
        for i in 0..k {
            if assigned[i] {
                continue;
            }
            let comp: Vec<usize> = (0..k).filter(|&j| reach[i][j] && reach[j][i]).collect();
            for &j in &comp {
                assigned[j] = true;
            }
            comps.push(comp);
        }
        let reached = |c: &Vec<usize>| (0..k).filter(|&j| reach[c[0]][j]).count();
        comps.sort_by(|a, b| reached(b).cmp(&reached(a)).then(a[0].cmp(&b[0])));
        comps
    }
}

/// Maximum-likelihood Rao-Kupper fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BtFit {
    pub candidates: Vec<String>,
    /// Strengths normalized to sum to one.
    pub strengths: Vec<f64>,
    pub nu: f64,
    pub log_likelihood: f64,
    /// Log likelihood after each sweep.
    pub trace: Vec<f64>,
    pub gradient_norm: f64,
}

/// Rao-Kupper log likelihood at log strengths `x` and tie parameter `nu`.
pub fn bt_log_likelihood(pc: &PairCounts, x: &[f64], nu: f64) -> f64 {
    let k = x.len();
    let mut ll = 0.0;
    for i in 0..k {
        for j in 0..k {
            let n = pc.wins[i][j] + pc.ties[i][j];
            if n > 0.0 {
                ll -= n * (x[i].exp() + nu * x[j].exp()).ln();
            }
            ll += (pc.wins[i][j] + pc.ties[i][j]) * x[i];
        }
    }
    let t = pc.total_ties();
    if t > 0.0 {
        ll += t * (nu * nu - 1.0).ln();
    }
    ll
}

/// Slope and curvature along log strength `i`.
fn x_derivatives(pc: &PairCounts, x: &[f64], nu: f64, i: usize) -> (f64, f64) {
    let mut g = 0.0;
    let mut h = 0.0;
    let ei = x[i].exp();
    for j in 0..x.len() {
        if j == i {
            continue;
        }
        let ej = x[j].exp();
        g += pc.wins[i][j] + pc.ties[i][j];
        let n_ij = pc.wins[i][j] + pc.ties[i][j];
        if n_ij > 0.0 {
            let p = ei / (ei + nu * ej);
            g -= n_ij * p;
            h -= n_ij * p * (1.0 - p);
        }
        let n_ji = pc.wins[j][i] + pc.ties[j][i];
        if n_ji > 0.0 {
            let q = nu * ei / (ej + nu * ei);
            g -= n_ji * q;
            h -= n_ji * q * (1.0 - q);
        }
    }
    (g, h)
}

fn nu_derivatives(pc: &PairCounts, x: &[f64], nu: f64) -> (f64, f64) {
    let t = pc.total_ties();
    let mut g = 2.0 * nu * t / (nu * nu - 1.0);
    let mut h = -2.0 * t * (nu * nu + 1.0) / (nu * nu - 1.0).powi(2);
    for i in 0..x.len() {
        for j in 0..x.len() {
            let n = pc.wins[i][j] + pc.ties[i][j];
            if n > 0.0 {
                let ej = x[j].exp();
                let d = x[i].exp() + nu * ej;
                g -= n * ej / d;
                h += n * ej * ej / (d * d);
            }
        }
    }
    (g, h)
}

/// Maximizes a one-dimensional function on `[lo, hi]` from `x0` by Newton
/// steps with step halving; never returns a worse point.
fn ascend_1d(
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64) -> (f64, f64),
    x0: f64,
    lo: f64,
    hi: f64,
) -> f64 {
    let mut x = x0;
    let mut fx = f(x);
    for _ in 0..100 {
        let (g, h) = df(x);
        if g.abs() < 1e-13 {
            break;
        }
        let mut step = if h < 0.0 { -g / h } else { g.signum() };
        let mut improved = false;
        for _ in 0..60 {
            let cand = (x + step).clamp(lo, hi);
            let fc = f(cand);
            if fc > fx {
                x = cand;
                fx = fc;
                improved = true;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    x
}

/// Gradient and Hessian in `(x_1, …, x_{K-1}, u)` with `x_0` held fixed and
/// `u = ln(nu - 1)`; `u` is included only when `with_u`.
fn newton_system(pc: &PairCounts, x: &[f64], nu: f64, with_u: bool) -> (DVector<f64>, DMatrix<f64>) {
    let k = x.len();
    let dim = k - 1 + with_u as usize;
    let ui = k - 1;
    let mut g = DVector::zeros(dim);
    let mut h = DMatrix::zeros(dim, dim);
    let xi = |i: usize| if i == 0 { None } else { Some(i - 1) };
    for i in 0..k {
        if let Some(a) = xi(i) {
            g[a] += (0..k).map(|j| pc.wins[i][j] + pc.ties[i][j]).sum::<f64>();
        }
        for j in 0..k {
            let n = pc.wins[i][j] + pc.ties[i][j];
            if n == 0.0 {
                continue;
            }
            let d = x[i].exp() + nu * x[j].exp();
            let p = x[i].exp() / d;
            let c = n * p * (1.0 - p);
            let (a, b) = (xi(i), xi(j));
            if let Some(a) = a {
                g[a] -= n * p;
                h[(a, a)] -= c;
            }
            if let Some(b) = b {
                g[b] -= n * (1.0 - p);
                h[(b, b)] -= c;
            }
            if let (Some(a), Some(b)) = (a, b) {
                h[(a, b)] += c;
                h[(b, a)] += c;
            }
            if with_u {
                let s = nu - 1.0;
                if let Some(a) = a {
                    h[(a, ui)] += s * c / nu;
                    h[(ui, a)] += s * c / nu;
                }
                if let Some(b) = b {
                    h[(b, ui)] -= s * c / nu;
                    h[(ui, b)] -= s * c / nu;
                }
            }
        }
    }
    if with_u {
        let (gn, hn) = nu_derivatives(pc, x, nu);
        let s = nu - 1.0;
        g[ui] = s * gn;
        h[(ui, ui)] = s * s * hn + s * gn;
    }
    (g, h)
}

/// One cyclic pass of exact one-dimensional maximizations.
fn coordinate_sweep(pc: &PairCounts, x: &mut [f64], nu: &mut f64, has_ties: bool) {
    for i in 1..x.len() {
        let xi = ascend_1d(
            |v| {
                let mut y = x.to_vec();
                y[i] = v;
                bt_log_likelihood(pc, &y, *nu)
            },
            |v| {
                let mut y = x.to_vec();
                y[i] = v;
                x_derivatives(pc, &y, *nu, i)
            },
            x[i],
            -X_BOUND,
            X_BOUND,
        );
        x[i] = xi;
    }
    if has_ties {
        let u = ascend_1d(
            |u| bt_log_likelihood(pc, x, 1.0 + u.exp()),
            |u| {
                let nu = 1.0 + u.exp();
                let (g, h) = nu_derivatives(pc, x, nu);
                let d = nu - 1.0;
                (d * g, d * d * h + d * g)
            },
            (*nu - 1.0).ln(),
            U_MIN,
            (NU_MAX - 1.0).ln(),
        );
        *nu = 1.0 + u.exp();
    }
}

/// Fits the Rao-Kupper model by damped Newton ascent over log strengths and
/// `ln(nu - 1)`, falling back to a coordinate sweep whenever the Newton
/// direction fails to improve, until the gradient norm drops below `1e-8`.
/// Every iteration increases the likelihood. Without ties `nu` stays at one.
pub fn fit_bradley_terry(pc: &PairCounts) -> Result<BtFit, Vec<Vec<usize>>> {
    let k = pc.candidates.len();
    let comps = pc.components();
    if comps.len() > 1 {
        return Err(comps);
    }
    let has_ties = pc.total_ties() > 0.0;
    let mut x = vec![0.0; k];
    let mut nu = if has_ties { 2.0 } else { 1.0 };
    let u_hi = (NU_MAX - 1.0).ln();
    let at_cap = |nu: f64| nu >= NU_MAX * (1.0 - 1e-9);
    let grad_norm = |x: &[f64], nu: f64| {
        let mut s: f64 = (0..k).map(|i| x_derivatives(pc, x, nu, i).0.powi(2)).sum();
        if has_ties {
            let g = nu_derivatives(pc, x, nu).0;
            if !(at_cap(nu) && g > 0.0) {
                s += g * g;
            }
        }
        s.sqrt()
    };
    let mut ll = bt_log_likelihood(pc, &x, nu);
    let mut trace = vec![ll];
    let mut norm = grad_norm(&x, nu);
    let mut iterations = 0;
    while norm >= GRAD_TOL && iterations < MAX_ITERATIONS {
        iterations += 1;
        let with_u = has_ties && !(at_cap(nu) && nu_derivatives(pc, &x, nu).0 > 0.0);
        let (g, h) = newton_system(pc, &x, nu, with_u);
        let mut moved = false;
        if let Some(chol) = (-h).cholesky() {
            let step = chol.solve(&g);
            let mut t = 1.0;
            for _ in 0..60 {
                let mut y = x.clone();
                for i in 1..k {
                    y[i] = (x[i] + t * step[i - 1]).clamp(-X_BOUND, X_BOUND);
                }
                let nu_new = if with_u {
                    1.0 + ((nu - 1.0).ln() + t * step[k - 1]).clamp(U_MIN, u_hi).exp()
                } else {
                    nu
                };
                let cand = bt_log_likelihood(pc, &y, nu_new);
                // Within rounding of the current value, the gradient decides.
                let flat = (cand - ll).abs() <= 8.0 * f64::EPSILON * ll.abs();
                if cand > ll || (flat && grad_norm(&y, nu_new) < norm) {
                    x = y;
                    nu = nu_new;
                    moved = true;
                    break;
                }
                t *= 0.5;
            }
        }
        if !moved {
            let before = (x.clone(), nu);
            coordinate_sweep(pc, &mut x, &mut nu, has_ties);
            if bt_log_likelihood(pc, &x, nu) <= ll {
                (x, nu) = before;
                break;
            }
        }
        ll = bt_log_likelihood(pc, &x, nu);
        trace.push(ll);
        norm = grad_norm(&x, nu);
    }
    let shift = x.iter().sum::<f64>() / k as f64;
    let total: f64 = x.iter().map(|v| (v - shift).exp()).sum();
    Ok(BtFit {
        candidates: pc.candidates.clone(),
        strengths: x.iter().map(|v| (v - shift).exp() / total).collect(),
        nu,
        log_likelihood: ll,
        trace,
        gradient_norm: norm,
    })
}

/// Strength ranks, or component ranks when the graph is disconnected.
fn bt_scores(pc: &PairCounts) -> Vec<f64> {
    match fit_bradley_terry(pc) {
        Ok(fit) => fit.strengths,
        Err(comps) => component_scores(pc.candidates.len(), &comps),
    }
}

fn component_scores(k: usize, comps: &[Vec<usize>]) -> Vec<f64> {
    let mut s = vec![0.0; k];
    for (rank, comp) in comps.iter().enumerate() {
        for &i in comp {
            s[i] = (comps.len() - rank) as f64;
        }
    }
    s
}

fn partial_report(pc: &PairCounts, comps: &[Vec<usize>]) -> RankReport {
    let tie_groups: Vec<Vec<String>> = comps
        .iter()
        .map(|c| c.iter().map(|&i| pc.candidates[i].clone()).collect())
        .collect();
    let order = tie_groups.iter().flatten().cloned().collect();
    let ranking = Ranking {
        order,
        tie_groups: tie_groups.clone(),
    };
    let ranks = ranking.ranks();
    let scores = component_scores(pc.candidates.len(), comps);
    let mut candidates = BTreeMap::new();
    for group in &tie_groups {
        for id in group {
            let r = ranks[id];
            let i = pc.candidates.iter().position(|c| c == id).unwrap();
            candidates.insert(
                id.clone(),
                CandidateSummary {
                    mean_score: scores[i],
                    score_interval: (scores[i], scores[i]),
                    mean_rank: r as f64,
                    median_rank: r as f64,
                    rank_interval: (r, r + group.len() - 1),
                },
            );
        }
    }
    RankReport {
        candidates,
        ranking,
        diagnostics: BTreeMap::new(),
        divergences: 0,
        num_draws: 0,
    }
}

/// Bradley-Terry with ties: strengths from the full data, rank intervals
/// from refits on question resamples (disconnected resamples are ranked by
/// their comparison-graph components).
pub fn bradley_terry_ties(
    ds: &ScoreDataset,
    replicates: usize,
    seed: u64,
) -> Result<(BtFit, RankReport), BaselineError> {
    if replicates < MIN_REPLICATES {
        return Err(BaselineError::TooFewReplicates(replicates));
    }
    let table = QuestionTable::new(ds);
    let k = table.candidates.len();
    if k < 2 {
        return Err(BaselineError::TooFewCandidates(k));
    }
    let mut pc = PairCounts::new(table.candidates.clone());
    for q in table.all_questions() {
        pc.add_question(q);
    }
    let fit = fit_bradley_terry(&pc).map_err(|comps| BaselineError::Disconnected {
        components: comps
            .iter()
            .map(|c| c.iter().map(|&i| pc.candidates[i].clone()).collect())
            .collect(),
        partial: Box::new(partial_report(&pc, &comps)),
    })?;
    let draws: Vec<Vec<f64>> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = chain_rng(seed, r);
            let mut rep = PairCounts::new(table.candidates.clone());
            for q in table.resample(&mut rng) {
                rep.add_question(q);
            }
            bt_scores(&rep)
        })
        .collect();
    let report = replicate_report(&table.candidates, &fit.strengths, draws);
    Ok((fit, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{RubricSpec, ScoreRecord};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ds(records: &[(&str, &str, &str, u32)]) -> ScoreDataset {
        ScoreDataset::from_records(
            RubricSpec::square(3).unwrap(),
            records
                .iter()
                .map(|(q, j, c, l)| ScoreRecord::new(*q, *j, *c, "default", *l))
                .collect(),
        )
    }

    fn random_ds(seed: u64, n: usize) -> ScoreDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut records = Vec::new();
        for q in 0..n {
            for j in ["j1", "j2"] {
                for c in ["a", "b", "c", "d"] {
                    records.push(ScoreRecord::new(
                        format!("q{q}"),
                        j,
                        c,
                        if q % 2 == 0 { "s1" } else { "s2" },
                        rand::Rng::random_range(&mut rng, 1..=3),
                    ));
                }
            }
        }
        ScoreDataset::from_records(RubricSpec::square(3).unwrap(), records)
    }

    #[test]
    fn average_orders_extremes() {
        let d = ds(&[
            ("q1", "j", "a", 3),
            ("q2", "j", "a", 3),
            ("q1", "j", "b", 1),
            ("q2", "j", "b", 1),
        ]);
        let r = simple_average(&d).unwrap();
        assert_eq!(r.candidates["a"].mean_score, 2.0);
        assert_eq!(r.candidates["b"].mean_score, 0.0);
        assert_eq!(r.ranking.order, vec!["a", "b"]);
        assert_eq!(r.candidates["a"].rank_interval, (1, 1));
    }

    #[test]
    fn identical_multisets_tie() {
        let d = ds(&[
            ("q1", "j", "a", 3),
            ("q2", "j", "a", 1),
            ("q1", "j", "b", 1),
            ("q2", "j", "b", 3),
        ]);
        let r = simple_average(&d).unwrap();
        assert!(r.ranking.has_ties());
        assert_eq!(r.candidates["b"].mean_rank, 1.0);
    }

    #[test]
    fn average_matches_recount() {
        let d = random_ds(3, 40);
        let r = simple_average(&d).unwrap();
        for c in ["a", "b", "c", "d"] {
            let vals: Vec<f64> = d
                .records
                .iter()
                .filter(|x| x.candidate_id == c)
                .map(|x| x.assigned_level as f64 - 1.0)
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            assert!((r.candidates[c].mean_score - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn abstentions_are_ignored() {
        let mut d = ds(&[("q1", "j", "a", 3), ("q1", "j", "b", 2)]);
        d.rubric = RubricSpec::new(3, 4).unwrap();
        d.records.push(ScoreRecord::new("q2", "j", "a", "default", 4));
        let r = simple_average(&d).unwrap();
        assert_eq!(r.candidates["a"].mean_score, 2.0);
    }

    #[test]
    fn single_judge_equals_average() {
        let d = random_ds(4, 30);
        let s = single_judge(&d).unwrap();
        assert_eq!(s.pooled, simple_average(&d).unwrap());
        assert_eq!(s.per_judge.len(), 2);

        let one: Vec<_> = d.records.iter().filter(|r| r.judge_id == "j1").cloned().collect();
        let one = ScoreDataset::from_records(d.rubric.clone(), one);
        let s = single_judge(&one).unwrap();
        assert_eq!(s.pooled, s.per_judge["j1"]);
    }

    #[test]
    fn disjoint_judges_pool_to_their_means() {
        let d = ds(&[
            ("q1", "j1", "a", 3),
            ("q2", "j1", "a", 2),
            ("q1", "j2", "b", 1),
            ("q2", "j2", "b", 2),
        ]);
        let s = single_judge(&d).unwrap();
        assert_eq!(s.pooled.candidates["a"].mean_score, 1.5);
        assert_eq!(s.pooled.candidates["b"].mean_score, 0.5);
        assert!(s.per_judge.is_empty());
    }

    #[test]
    fn bootstrap_separated_candidates() {
        let mut records = Vec::new();
        for q in 0..200 {
            records.push((format!("q{q}"), "a", if q % 10 == 0 { 2 } else { 3 }));
            records.push((format!("q{q}"), "b", if q % 10 == 0 { 2 } else { 1 }));
        }
        let d = ScoreDataset::from_records(
            RubricSpec::square(3).unwrap(),
            records
                .into_iter()
                .map(|(q, c, l)| ScoreRecord::new(q, "j", c, "default", l))
                .collect(),
        );
        let r = bootstrap_rank_ci(&d, 1000, 7).unwrap();
        assert_eq!(r.candidates["a"].rank_interval, (1, 1));
        assert_eq!(r.candidates["b"].rank_interval, (2, 2));
        assert_eq!(r.num_draws, 1000);
    }

    #[test]
    fn bootstrap_single_question_is_degenerate() {
        let d = ds(&[("q1", "j", "a", 3), ("q1", "j", "b", 2), ("q1", "j", "c", 1)]);
        let r = bootstrap_rank_ci(&d, 100, 1).unwrap();
        for (c, want) in [("a", 1), ("b", 2), ("c", 3)] {
            assert_eq!(r.candidates[c].rank_interval, (want, want));
            let (lo, hi) = r.candidates[c].score_interval;
            assert_eq!(lo, hi);
        }
    }

    #[test]
    fn bootstrap_is_seeded() {
        let d = random_ds(5, 30);
        assert_eq!(
            bootstrap_rank_ci(&d, 200, 9).unwrap(),
            bootstrap_rank_ci(&d, 200, 9).unwrap()
        );
        assert!(matches!(
            bootstrap_rank_ci(&d, 99, 9),
            Err(BaselineError::TooFewReplicates(99))
        ));
    }

    #[test]
    fn pairs_come_from_same_judge_and_question() {
        let d = ds(&[
            ("q1", "j1", "a", 3),
            ("q1", "j1", "b", 2),
            ("q1", "j2", "b", 2),
            ("q1", "j2", "c", 2),
            ("q2", "j1", "c", 3),
        ]);
        let pc = PairCounts::from_dataset(&d);
        assert_eq!(pc.wins[0][1], 1.0);
        assert_eq!(pc.ties[1][2], 1.0);
        assert_eq!(pc.wins.iter().flatten().sum::<f64>(), 1.0);
        assert_eq!(pc.total_ties(), 1.0);
    }

    fn instance(wins: &[(usize, usize, f64)], ties: &[(usize, usize, f64)], k: usize) -> PairCounts {
        let mut pc = PairCounts::new((0..k).map(|i| format!("c{i}")).collect());
        for &(a, b, n) in wins {
            pc.add_win(a, b, n);
        }
        for &(a, b, n) in ties {
            pc.add_tie(a, b, n);
        }
        pc
    }

    #[test]
    fn dominance_orders_strengths() {
        let pc = instance(&[(0, 1, 9.0), (1, 0, 1.0)], &[(0, 1, 2.0)], 2);
        let fit = fit_bradley_terry(&pc).unwrap();
        assert!(fit.strengths[0] > fit.strengths[1]);
        assert!(fit.gradient_norm < 1e-8);
        assert!(fit.trace.windows(2).all(|w| w[1] >= w[0] - 1e-12));
    }

    #[test]
    fn all_ties_give_equal_strengths() {
        let pc = instance(&[], &[(0, 1, 5.0), (1, 2, 5.0), (0, 2, 5.0)], 3);
        let fit = fit_bradley_terry(&pc).unwrap();
        for s in &fit.strengths {
            assert!((s - 1.0 / 3.0).abs() < 1e-9);
        }
        assert!(fit.nu > 1.0);
    }

    #[test]
    fn two_candidate_closed_form() {
        // Without ties the MLE odds equal the win ratio.
        let pc = instance(&[(0, 1, 8.0), (1, 0, 2.0)], &[], 2);
        let fit = fit_bradley_terry(&pc).unwrap();
        assert!((fit.strengths[0] / fit.strengths[1] - 4.0).abs() < 1e-8);
        assert_eq!(fit.nu, 1.0);
    }

    #[test]
    fn disconnected_graph_reports_components() {
        let d = ds(&[
            ("q1", "j", "a", 3),
            ("q1", "j", "b", 1),
            ("q2", "j", "b", 3),
            ("q2", "j", "c", 1),
        ]);
        match bradley_terry_ties(&d, 100, 0) {
            Err(BaselineError::Disconnected { components, partial }) => {
                assert_eq!(components, vec![vec!["a"], vec!["b"], vec!["c"]]);
                assert_eq!(partial.ranking.order, vec!["a", "b", "c"]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bt_report_on_random_data() {
        let d = random_ds(6, 40);
        let (fit, report) = bradley_terry_ties(&d, 100, 3).unwrap();
        assert!(fit.gradient_norm < 1e-8);
        assert_eq!(report.candidates.len(), 4);
        for s in report.candidates.values() {
            assert!(s.rank_interval.0 <= s.rank_interval.1);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn baselines_ignore_record_order(seed in 0u64..1000, rot in 0usize..100) {
            let d = random_ds(seed, 12);
            let mut e = d.clone();
            let n = e.records.len();
            e.records.rotate_left(rot % n);
            e.records.reverse();
            prop_assert_eq!(simple_average(&d).unwrap(), simple_average(&e).unwrap());
            prop_assert_eq!(
                bootstrap_rank_ci(&d, 100, 1).unwrap(),
                bootstrap_rank_ci(&e, 100, 1).unwrap()
            );
            let a = fit_bradley_terry(&PairCounts::from_dataset(&d)).unwrap();
            let b = fit_bradley_terry(&PairCounts::from_dataset(&e)).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn bt_likelihood_never_decreases(
            w in proptest::collection::vec(0u8..6, 9),
            t in proptest::collection::vec(0u8..4, 3),
        ) {
            let mut pc = instance(&[], &[], 3);
            let mut idx = 0;
            for i in 0..3 {
                for j in 0..3 {
                    if i != j {
                        pc.add_win(i, j, w[idx] as f64 + 1.0);
                        idx += 1;
                    }
                }
            }
            pc.add_tie(0, 1, t[0] as f64);
            pc.add_tie(1, 2, t[1] as f64);
            pc.add_tie(0, 2, t[2] as f64);
            let fit = fit_bradley_terry(&pc).unwrap();
            prop_assert!(fit.trace.windows(2).all(|w| w[1] >= w[0] - 1e-12));
            prop_assert!(fit.gradient_norm < 1e-8);
        }
    }
}
