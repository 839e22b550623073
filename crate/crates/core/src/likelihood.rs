//! Observed-data likelihood: each assigned score is a mixture over the
//! unobserved true level, `P(level a) = Σ_m θ_{m,a} π_m`, and records are
//! independent given the parameters, so the likelihood depends on the data
//! only through per-(judge, candidate, level) counts.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::digamma;
use thiserror::Error;

use crate::model::{Hyperparameters, JudgeVertices, PrevalenceVector, ScoreDataset};
use crate::prior::{ln_beta_norm, ln_dirichlet_norm, RandomEffects};
use crate::state::{ForwardPass, JudgeForward, ParamLayout};
use crate::transform::{
    simplex_backward, simplex_log_jacobian_grad, simplex_loglinear_grad, unit_backward,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LikelihoodError {
    #[error("candidate {0} has no records after filtering")]
    EmptyAfterFilter(String),
    #[error("no records")]
    NoRecords,
    #[error("record {index}: level {level} outside 1..={max}")]
    LevelOutOfRange { index: usize, level: u32, max: usize },
    #[error("log-likelihood is not finite: an observed level has zero probability")]
    NonFinite,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Counts `n[j][k][a]` of assigned level `a` (0-based) given by judge `j` to
/// candidate `k`. Judges left without records after filtering are dropped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SufficientCounts {
    pub candidates: Vec<String>,
    pub judges: Vec<String>,
    pub assigned_levels: usize,
    pub counts: Vec<Vec<Vec<u64>>>,
}

impl SufficientCounts {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().flatten().sum()
    }

    /// Level counts for one candidate pooled over judges.
    pub fn candidate_totals(&self, k: usize) -> Vec<u64> {
        let mut out = vec![0; self.assigned_levels];
        for judge in &self.counts {
            for (o, c) in out.iter_mut().zip(&judge[k]) {
                *o += c;
            }
        }
        out
    }

    /// Elementwise sum; both sides must index the same judges and candidates.
    pub fn merged(&self, other: &Self) -> Result<Self, LikelihoodError> {
        if self.candidates != other.candidates
            || self.judges != other.judges
            || self.assigned_levels != other.assigned_levels
        {
            return Err(LikelihoodError::DimensionMismatch("count indices".into()));
        }
        let mut out = self.clone();
        for (a, b) in out.counts.iter_mut().flatten().zip(other.counts.iter().flatten()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(out)
    }
}

/// Tabulates one dataset (callers split strata first). With `self_adjust`,
/// records whose judge and candidate share a family are dropped.
pub fn tabulate(ds: &ScoreDataset, self_adjust: bool) -> Result<SufficientCounts, LikelihoodError> {
    if ds.records.is_empty() {
        return Err(LikelihoodError::NoRecords);
    }
    let levels = ds.rubric.num_assigned_levels();
    let candidates: Vec<String> = ds
        .records
        .iter()
        .map(|r| r.candidate_id.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let kidx: BTreeMap<&str, usize> = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    let mut by_judge: BTreeMap<String, Vec<Vec<u64>>> = BTreeMap::new();
    for (index, r) in ds.records.iter().enumerate() {
        if r.assigned_level == 0 || r.assigned_level as usize > levels {
            return Err(LikelihoodError::LevelOutOfRange {
                index,
                level: r.assigned_level,
                max: levels,
            });
        }
        if self_adjust && ds.is_self_judged(&r.judge_id, &r.candidate_id) {
            continue;
        }
        let table = by_judge
            .entry(r.judge_id.clone())
            .or_insert_with(|| vec![vec![0; levels]; candidates.len()]);
        table[kidx[r.candidate_id.as_str()]][r.assigned_level as usize - 1] += 1;
    }
    let counts = SufficientCounts {
        candidates,
        judges: by_judge.keys().cloned().collect(),
        assigned_levels: levels,
        counts: by_judge.into_values().collect(),
    };
    for (k, c) in counts.candidates.iter().enumerate() {
        if counts.candidate_totals(k).iter().all(|&n| n == 0) {
            return Err(LikelihoodError::EmptyAfterFilter(c.clone()));
        }
    }
    Ok(counts)
}

/// One count table per stratum.
pub fn tabulate_strata(
    ds: &ScoreDataset,
    self_adjust: bool,
) -> Result<BTreeMap<String, SufficientCounts>, LikelihoodError> {
    ds.strata()
        .into_iter()
        .map(|s| {
            let counts = tabulate(&ds.stratum(&s), self_adjust)?;
            Ok((s, counts))
        })
        .collect()
}

/// Compensated (Neumaier) summation.
#[derive(Debug, Default, Clone, Copy)]
pub(crate) struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub(crate) fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub(crate) fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

/// Gradients of the log-likelihood with respect to its constrained inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodGradient {
    /// `[j][m][a]`
    pub vertices: Vec<Vec<Vec<f64>>>,
    pub prevalences: Vec<Vec<f64>>,
    pub directions: Vec<Vec<f64>>,
    pub candidate_magnitudes: Vec<f64>,
    pub judge_magnitudes: Vec<f64>,
}

fn check_dims(
    counts: &SufficientCounts,
    vertices: &[&[Vec<f64>]],
    prevalences: &[&[f64]],
    re: Option<&RandomEffects>,
) -> Result<(), LikelihoodError> {
    if vertices.len() != counts.judges.len() || prevalences.len() != counts.candidates.len() {
        return Err(LikelihoodError::DimensionMismatch(
            "one vertex set per judge and one prevalence per candidate".into(),
        ));
    }
    let m = prevalences.first().map_or(0, |p| p.len());
    for v in vertices {
        if v.len() != m || v.iter().any(|c| c.len() != counts.assigned_levels) {
            return Err(LikelihoodError::DimensionMismatch("vertex shape".into()));
        }
    }
    if let Some(re) = re {
        if re.directions.len() != counts.candidates.len()
            || re.judge_magnitudes.len() != counts.judges.len()
        {
            return Err(LikelihoodError::DimensionMismatch("random effects".into()));
        }
    }
    Ok(())
}

fn log_likelihood_inner(
    counts: &SufficientCounts,
    vertices: &[&[Vec<f64>]],
    prevalences: &[&[f64]],
    re: Option<&RandomEffects>,
    mut grad: Option<&mut LikelihoodGradient>,
) -> f64 {
    let m_levels = prevalences[0].len();
    let mut total = CompensatedSum::default();
    let mut pj = vec![0.0; m_levels];
    let mut g_pj = vec![0.0; m_levels];
    for (j, theta) in vertices.iter().enumerate() {
        for (k, pi) in prevalences.iter().enumerate() {
            let n = &counts.counts[j][k];
            if n.iter().all(|&c| c == 0) {
                continue;
            }
            let lambda = re.map_or(0.0, |re| {
                re.candidate_magnitudes[k] * re.judge_magnitudes[j]
            });
            for m in 0..m_levels {
                pj[m] = match re {
                    Some(re) if lambda != 0.0 => {
                        (1.0 - lambda) * pi[m] + lambda * re.directions[k].weights()[m]
                    }
                    _ => pi[m],
                };
            }
            g_pj.iter_mut().for_each(|g| *g = 0.0);
            for (a, &c) in n.iter().enumerate() {
                if c == 0 {
                    continue;
                }
                let p: f64 = (0..m_levels).map(|m| theta[m][a] * pj[m]).sum();
                total.add(c as f64 * p.ln());
                if let Some(g) = grad.as_deref_mut() {
                    let g_p = c as f64 / p;
                    for m in 0..m_levels {
                        g.vertices[j][m][a] += g_p * pj[m];
                        g_pj[m] += g_p * theta[m][a];
                    }
                }
            }
            if let Some(g) = grad.as_deref_mut() {
                for m in 0..m_levels {
                    g.prevalences[k][m] += (1.0 - lambda) * g_pj[m];
                }
                if let Some(re) = re {
                    let z = re.directions[k].weights();
                    let mut g_lambda = 0.0;
                    for m in 0..m_levels {
                        g.directions[k][m] += lambda * g_pj[m];
                        g_lambda += g_pj[m] * (z[m] - pi[m]);
                    }
                    g.candidate_magnitudes[k] += g_lambda * re.judge_magnitudes[j];
                    g.judge_magnitudes[j] += g_lambda * re.candidate_magnitudes[k];
                }
            }
        }
    }
    total.value()
}

/// `Σ_{j,k,a} n[j][k][a] ln Σ_m θ^(j)_{m,a} π^(j)_{k,m}` with judge-specific
/// prevalences from the random effects when given.
pub fn log_likelihood(
    counts: &SufficientCounts,
    vertices: &[JudgeVertices],
    prevalences: &[PrevalenceVector],
    re: Option<&RandomEffects>,
) -> Result<f64, LikelihoodError> {
    let v: Vec<&[Vec<f64>]> = vertices.iter().map(|v| v.columns()).collect();
    let p: Vec<&[f64]> = prevalences.iter().map(|p| p.weights()).collect();
    check_dims(counts, &v, &p, re)?;
    let value = log_likelihood_inner(counts, &v, &p, re, None);
    if value.is_finite() {
        Ok(value)
    } else {
        Err(LikelihoodError::NonFinite)
    }
}

/// Value and gradient of [`log_likelihood`] with respect to its constrained
/// arguments.
pub fn log_likelihood_and_gradient(
    counts: &SufficientCounts,
    vertices: &[JudgeVertices],
    prevalences: &[PrevalenceVector],
    re: Option<&RandomEffects>,
) -> Result<(f64, LikelihoodGradient), LikelihoodError> {
    let v: Vec<&[Vec<f64>]> = vertices.iter().map(|v| v.columns()).collect();
    let p: Vec<&[f64]> = prevalences.iter().map(|p| p.weights()).collect();
    check_dims(counts, &v, &p, re)?;
    let mut grad = empty_gradient(counts, p[0].len(), re.is_some());
    let value = log_likelihood_inner(counts, &v, &p, re, Some(&mut grad));
    if value.is_finite() {
        Ok((value, grad))
    } else {
        Err(LikelihoodError::NonFinite)
    }
}

fn empty_gradient(counts: &SufficientCounts, levels: usize, re: bool) -> LikelihoodGradient {
    let k = counts.candidates.len();
    let j = counts.judges.len();
    LikelihoodGradient {
        vertices: vec![vec![vec![0.0; counts.assigned_levels]; levels]; j],
        prevalences: vec![vec![0.0; levels]; k],
        directions: vec![vec![0.0; levels]; if re { k } else { 0 }],
        candidate_magnitudes: vec![0.0; if re { k } else { 0 }],
        judge_magnitudes: vec![0.0; if re { j } else { 0 }],
    }
}

/// Unnormalized log posterior in unconstrained coordinates.
#[derive(Debug, Clone)]
pub struct LogPosterior {
    layout: ParamLayout,
    counts: SufficientCounts,
    hyper: Hyperparameters,
}

impl LogPosterior {
    pub fn new(
        layout: ParamLayout,
        counts: SufficientCounts,
        hyper: Hyperparameters,
    ) -> Result<Self, LikelihoodError> {
        if layout.candidates() != counts.candidates.as_slice()
            || layout.judges() != counts.judges.as_slice()
            || layout.graph().assigned_levels() != counts.assigned_levels
        {
            return Err(LikelihoodError::DimensionMismatch(
                "layout and counts disagree".into(),
            ));
        }
        if layout.has_random_effects() && hyper.omega <= 0.0 {
            return Err(LikelihoodError::DimensionMismatch(
                "random effects need a positive omega".into(),
            ));
        }
        if hyper.delta_dir.len() != layout.graph().true_levels() {
            return Err(LikelihoodError::DimensionMismatch("delta length".into()));
        }
        Ok(Self {
            layout,
            counts,
            hyper,
        })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn counts(&self) -> &SufficientCounts {
        &self.counts
    }

    pub fn hyper(&self) -> &Hyperparameters {
        &self.hyper
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn log_density(&self, u: &[f64]) -> f64 {
        let fwd = self.layout.forward(u);
        self.evaluate(&fwd, None)
    }

    /// Log prior + log likelihood + log-Jacobian, and its gradient in `u`.
    /// Returns `-inf` (with a zero gradient) outside the support.
    pub fn log_density_and_gradient(&self, u: &[f64], grad: &mut [f64]) -> f64 {
        let fwd = self.layout.forward(u);
        grad.iter_mut().for_each(|g| *g = 0.0);
        let value = self.evaluate(&fwd, Some(grad));
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            return f64::NEG_INFINITY;
        }
        value
    }

    fn evaluate(&self, fwd: &ForwardPass, grad: Option<&mut [f64]>) -> f64 {
        let layout = &self.layout;
        let graph = layout.graph();
        let levels = graph.true_levels();
        let beta_max = self.hyper.beta_max;
        let mut total = CompensatedSum::default();
        total.add(fwd.log_jacobian);

        // prevalence priors are uniform Dirichlet: constant plus Jacobian
        total.add(fwd.prevalences.len() as f64 * ln_dirichlet_norm(&vec![1.0; levels]));

        // judge node priors
        let mut node_conc: Vec<Option<Vec<Vec<f64>>>> = Vec::with_capacity(fwd.judges.len());
        for judge in &fwd.judges {
            match judge {
                JudgeForward::Free { quality, nodes, .. } => {
                    let conc = graph.concentrations(quality.x, beta_max);
                    for (node, c) in nodes.iter().zip(&conc) {
                        total.add(ln_dirichlet_norm(c));
                        for (l, a) in node.log_x.iter().zip(c) {
                            total.add((a - 1.0) * l);
                        }
                    }
                    node_conc.push(Some(conc));
                }
                JudgeForward::Fixed(_) => node_conc.push(None),
            }
        }

        // random-effect priors
        let k_count = layout.candidates().len() as f64;
        let j_count = layout.judges().len() as f64;
        let omega = self.hyper.omega;
        let (w_a, w_b) = (omega * k_count, k_count);
        let (r_a, r_b) = (omega * j_count, j_count);
        if let Some(re) = &fwd.random_effects {
            let delta = &self.hyper.delta_dir;
            for z in &re.directions {
                total.add(ln_dirichlet_norm(delta));
                for (l, d) in z.log_x.iter().zip(delta) {
                    total.add((d - 1.0) * l);
                }
            }
            for w in &re.candidate {
                total.add(ln_beta_norm(w_a, w_b));
                total.add((w_a - 1.0) * w.log_x + (w_b - 1.0) * w.log_1mx);
            }
            for r in &re.judge {
                total.add(ln_beta_norm(r_a, r_b));
                total.add((r_a - 1.0) * r.log_x + (r_b - 1.0) * r.log_1mx);
            }
        }

        // likelihood on constrained values
        let columns: Vec<&[Vec<f64>]> = fwd.judges.iter().map(|j| j.columns()).collect();
        let prevalences: Vec<&[f64]> = fwd.prevalences.iter().map(|p| p.x.as_slice()).collect();
        let re_values = fwd.random_effects.as_ref().map(|re| RandomEffects {
            directions: re
                .directions
                .iter()
                .map(|d| PrevalenceVector::new_unchecked(d.x.clone()))
                .collect(),
            candidate_magnitudes: re.candidate.iter().map(|w| w.x).collect(),
            judge_magnitudes: re.judge.iter().map(|r| r.x).collect(),
        });
        let Some(grad) = grad else {
            total.add(log_likelihood_inner(
                &self.counts,
                &columns,
                &prevalences,
                re_values.as_ref(),
                None,
            ));
            return total.value();
        };
        let mut lg = empty_gradient(&self.counts, levels, re_values.is_some());
        total.add(log_likelihood_inner(
            &self.counts,
            &columns,
            &prevalences,
            re_values.as_ref(),
            Some(&mut lg),
        ));

        for (k, p) in fwd.prevalences.iter().enumerate() {
            let r = layout.prevalence_range(k);
            let back = simplex_backward(p, &lg.prevalences[k]);
            let jac = simplex_log_jacobian_grad(p);
            for ((g, b), jc) in grad[r].iter_mut().zip(back).zip(jac) {
                *g += b + jc;
            }
        }

        for (j, judge) in fwd.judges.iter().enumerate() {
            let JudgeForward::Free {
                quality,
                nodes,
                columns,
            } = judge
            else {
                continue;
            };
            let crate::state::JudgeSlot::Free { offset } = layout.slots()[j] else {
                unreachable!("free forward pass implies a free slot")
            };
            let conc = node_conc[j].as_ref().expect("free judge concentrations");
            let weights: Vec<Vec<f64>> = nodes.iter().map(|n| n.x.clone()).collect();
            let g_nodes = graph.assemble_backward(&weights, columns, &lg.vertices[j]);
            let mut g_quality = 0.0;
            for (((node, c), spec), (range, g_node)) in nodes
                .iter()
                .zip(conc)
                .zip(graph.nodes())
                .zip(layout.node_ranges(offset).into_iter().zip(&g_nodes))
            {
                let exps: Vec<f64> = c.iter().map(|a| a - 1.0).collect();
                let prior = simplex_loglinear_grad(node, &exps);
                let jac = simplex_log_jacobian_grad(node);
                let lik = simplex_backward(node, g_node);
                for (i, g) in grad[range].iter_mut().enumerate() {
                    *g += prior[i] + jac[i] + lik[i];
                }
                if beta_max > 0.0 {
                    let b = spec.boost;
                    let sum: f64 = c.iter().sum();
                    g_quality += beta_max * (digamma(sum) - digamma(c[b]) + node.log_x[b]);
                }
            }
            grad[offset] += unit_backward(quality, 0.0, 0.0, g_quality);
        }

        if let Some(re) = &fwd.random_effects {
            let delta = &self.hyper.delta_dir;
            let exps: Vec<f64> = delta.iter().map(|d| d - 1.0).collect();
            for (k, z) in re.directions.iter().enumerate() {
                let prior = simplex_loglinear_grad(z, &exps);
                let jac = simplex_log_jacobian_grad(z);
                let lik = simplex_backward(z, &lg.directions[k]);
                for (i, g) in grad[layout.direction_range(k)].iter_mut().enumerate() {
                    *g += prior[i] + jac[i] + lik[i];
                }
            }
            for (k, w) in re.candidate.iter().enumerate() {
                grad[layout.candidate_magnitude_index(k)] +=
                    unit_backward(w, w_a - 1.0, w_b - 1.0, lg.candidate_magnitudes[k]);
            }
            for (j, r) in re.judge.iter().enumerate() {
                grad[layout.judge_magnitude_index(j)] +=
                    unit_backward(r, r_a - 1.0, r_b - 1.0, lg.judge_magnitudes[j]);
            }
        }
        total.value()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{RubricSpec, ScoreRecord};
    use crate::prior::VertexGraph;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rec(q: &str, j: &str, k: &str, level: u32) -> ScoreRecord {
        ScoreRecord::new(q, j, k, "default", level)
    }

    fn dataset(records: Vec<ScoreRecord>, families: &[(&str, &str)]) -> ScoreDataset {
        let fam: BTreeMap<String, String> = families
            .iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect();
        ScoreDataset::new(RubricSpec::square(3).unwrap(), records, fam.clone(), fam)
    }

    #[test]
    fn no_family_overlap_ignores_adjustment() {
        let ds = dataset(
            vec![rec("q1", "j1", "a", 1), rec("q1", "j1", "b", 3), rec("q2", "j2", "a", 2)],
            &[],
        );
        assert_eq!(tabulate(&ds, true).unwrap(), tabulate(&ds, false).unwrap());
    }

    #[test]
    fn self_judged_records_are_dropped() {
        let ds = dataset(
            vec![rec("q1", "j1", "a", 1), rec("q1", "j2", "a", 2)],
            &[("j1", "fa"), ("a", "fa"), ("j2", "fb")],
        );
        let c = tabulate(&ds, true).unwrap();
        assert_eq!(c.judges, vec!["j2".to_string()]);
        assert_eq!(c.counts[0][0], vec![0, 1, 0]);
        let only_self = dataset(vec![rec("q1", "j1", "a", 1)], &[("j1", "fa"), ("a", "fa")]);
        assert_eq!(
            tabulate(&only_self, true),
            Err(LikelihoodError::EmptyAfterFilter("a".into()))
        );
    }

    #[test]
    fn counts_match_brute_force_recount() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let judges = ["j1", "j2", "j3"];
        let cands = ["a", "b", "c", "d"];
        let mut records = Vec::new();
        for q in 0..40 {
            for j in judges {
                for k in cands {
                    if rng.random_bool(0.7) {
                        records.push(rec(&format!("q{q}"), j, k, rng.random_range(1..=3)));
                    }
                }
            }
        }
        let ds = dataset(records.clone(), &[("j2", "fam"), ("c", "fam")]);
        let counts = tabulate(&ds, true).unwrap();
        for (ji, j) in counts.judges.iter().enumerate() {
            for (ki, k) in counts.candidates.iter().enumerate() {
                for a in 1..=3u32 {
                    let brute = records
                        .iter()
                        .filter(|r| {
                            &r.judge_id == j
                                && &r.candidate_id == k
                                && r.assigned_level == a
                                && !(j == "j2" && k == "c")
                        })
                        .count() as u64;
                    assert_eq!(counts.counts[ji][ki][a as usize - 1], brute);
                }
            }
        }
    }

    fn single(counts: Vec<u64>) -> SufficientCounts {
        SufficientCounts {
            candidates: vec!["a".into()],
            judges: vec!["j".into()],
            assigned_levels: counts.len(),
            counts: vec![vec![counts]],
        }
    }

    #[test]
    fn perfect_judge_collapses_mixture() {
        let pi = PrevalenceVector::new(vec![0.2, 0.5, 0.3]).unwrap();
        let ll = log_likelihood(
            &single(vec![0, 1, 0]),
            &[JudgeVertices::identity(3, 3)],
            &[pi],
            None,
        )
        .unwrap();
        assert!((ll - 0.5f64.ln()).abs() < 1e-15);
        let zero = PrevalenceVector::new(vec![0.0, 0.5, 0.5]).unwrap();
        assert_eq!(
            log_likelihood(&single(vec![1, 0, 0]), &[JudgeVertices::identity(3, 3)], &[zero], None),
            Err(LikelihoodError::NonFinite)
        );
    }

    fn random_instance(rng: &mut ChaCha8Rng, j: usize, k: usize, q: usize) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for _ in 0..q {
            for jj in 0..j {
                for kk in 0..k {
                    out.push((jj, kk, rng.random_range(0..3)));
                }
            }
        }
        out
    }

    fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.05).collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|x| x / s).collect()
    }

    #[test]
    fn matches_per_record_latent_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let recs = random_instance(&mut rng, 2, 3, 5);
        let thetas: Vec<JudgeVertices> = (0..2)
            .map(|_| JudgeVertices::new((0..3).map(|_| random_simplex(&mut rng, 3)).collect()).unwrap())
            .collect();
        let pis: Vec<PrevalenceVector> = (0..3)
            .map(|_| PrevalenceVector::new(random_simplex(&mut rng, 3)).unwrap())
            .collect();
        let mut counts = SufficientCounts {
            candidates: vec!["a".into(), "b".into(), "c".into()],
            judges: vec!["j1".into(), "j2".into()],
            assigned_levels: 3,
            counts: vec![vec![vec![0; 3]; 3]; 2],
        };
        let mut brute = 0.0;
        for &(j, k, a) in &recs {
            counts.counts[j][k][a] += 1;
            let mut p = 0.0;
            for latent in 0..3 {
                p += pis[k].weights()[latent] * thetas[j].column(latent)[a];
            }
            brute += p.ln();
        }
        let ll = log_likelihood(&counts, &thetas, &pis, None).unwrap();
        assert!((ll - brute).abs() < 1e-10);

        // per-judge factorization
        let per_judge: f64 = (0..2)
            .map(|j| {
                let c = SufficientCounts {
                    candidates: counts.candidates.clone(),
                    judges: vec![counts.judges[j].clone()],
                    assigned_levels: 3,
                    counts: vec![counts.counts[j].clone()],
                };
                log_likelihood(&c, &thetas[j..=j], &pis, None).unwrap()
            })
            .sum();
        assert!((ll - per_judge).abs() < 1e-10);

        // duplicated data doubles the value
        let doubled = counts.merged(&counts).unwrap();
        let ll2 = log_likelihood(&doubled, &thetas, &pis, None).unwrap();
        assert!((ll2 - 2.0 * ll).abs() < 1e-10);
    }

    #[test]
    fn zero_weight_random_effects_have_zero_likelihood_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let thetas = vec![JudgeVertices::new((0..3).map(|_| random_simplex(&mut rng, 3)).collect()).unwrap()];
        let pis = vec![PrevalenceVector::new(random_simplex(&mut rng, 3)).unwrap()];
        let z = PrevalenceVector::new(random_simplex(&mut rng, 3)).unwrap();
        let re = RandomEffects::new(vec![z], vec![0.0], vec![0.7]).unwrap();
        let (_, g) = log_likelihood_and_gradient(&single(vec![3, 1, 4]), &thetas, &pis, Some(&re)).unwrap();
        assert!(g.directions[0].iter().all(|&x| x == 0.0));
        assert_eq!(g.judge_magnitudes[0], 0.0);
    }

    fn posterior(re: bool, beta_max: f64, seed: u64) -> LogPosterior {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let counts = SufficientCounts {
            candidates: vec!["a".into(), "b".into(), "c".into()],
            judges: vec!["j1".into(), "j2".into()],
            assigned_levels: 4,
            counts: (0..2)
                .map(|_| (0..3).map(|_| (0..4).map(|_| rng.random_range(0..30)).collect()).collect())
                .collect(),
        };
        let hyper = Hyperparameters::primary(3)
            .with_omega(if re { 1.5 } else { 0.0 })
            .with_beta_max(beta_max);
        let layout = ParamLayout::all_free(
            counts.candidates.clone(),
            counts.judges.clone(),
            VertexGraph::new(3, 4),
            re,
        );
        LogPosterior::new(layout, counts, hyper).unwrap()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..20 {
            let post = posterior(trial % 2 == 0, [0.0, 3.0, 20.0][trial % 3], trial as u64);
            let u: Vec<f64> = (0..post.dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mut g = vec![0.0; post.dim()];
            let value = post.log_density_and_gradient(&u, &mut g);
            assert!((value - post.log_density(&u)).abs() < 1e-9);
            for i in 0..post.dim() {
                let h = 1e-5;
                let mut a = u.clone();
                let mut b = u.clone();
                a[i] += h;
                b[i] -= h;
                let num = (post.log_density(&a) - post.log_density(&b)) / (2.0 * h);
                let rel = (g[i] - num).abs() / num.abs().max(1.0);
                assert!(rel < 1e-5, "trial {trial} coord {i}: {} vs {num}", g[i]);
            }
        }
    }

    #[test]
    fn posterior_value_matches_components() {
        let post = posterior(true, 5.0, 3);
        let u: Vec<f64> = (0..post.dim()).map(|i| (i as f64 * 0.37).sin()).collect();
        let (state, log_jac) = post.layout().from_unconstrained(&u);
        let free: Vec<_> = state
            .judges
            .iter()
            .filter_map(|j| match j {
                crate::state::JudgeState::Free(p) => Some(p.clone()),
                _ => None,
            })
            .collect();
        let vertices: Vec<JudgeVertices> = state.judges.iter().map(|j| j.vertices().clone()).collect();
        let prior = crate::prior::log_prior(
            post.layout().graph(),
            &free,
            state.random_effects.as_ref(),
            &state.prevalences,
            post.hyper(),
        )
        .unwrap();
        let lik = log_likelihood(post.counts(), &vertices, &state.prevalences, state.random_effects.as_ref())
            .unwrap();
        assert!((post.log_density(&u) - (prior + lik + log_jac)).abs() < 1e-8);
    }

    proptest! {
        #[test]
        fn level_relabeling_invariance(seed in 0u64..1000, perm_idx in 0usize..6) {
            let perms = [[0,1,2],[0,2,1],[1,0,2],[1,2,0],[2,0,1],[2,1,0]];
            let perm = perms[perm_idx];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let theta = JudgeVertices::new((0..3).map(|_| random_simplex(&mut rng, 3)).collect()).unwrap();
            let pi = PrevalenceVector::new(random_simplex(&mut rng, 3)).unwrap();
            let n: Vec<u64> = (0..3).map(|_| rng.random_range(0..20)).collect();
            let permuted_theta = JudgeVertices::new(
                theta.columns().iter().map(|c| perm.iter().map(|&p| c[p]).collect()).collect(),
            ).unwrap();
            let permuted_n: Vec<u64> = perm.iter().map(|&p| n[p]).collect();
            let a = log_likelihood(&single(n), &[theta], &[pi.clone()], None).unwrap();
            let b = log_likelihood(&single(permuted_n), &[permuted_theta], &[pi], None).unwrap();
            prop_assert!((a - b).abs() < 1e-10);
        }

        #[test]
        fn record_order_invariance(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut records: Vec<ScoreRecord> = (0..30)
                .map(|q| rec(&format!("q{q}"), if q % 2 == 0 { "j1" } else { "j2" }, if q % 3 == 0 { "a" } else { "b" }, rng.random_range(1..=3)))
                .collect();
            let a = tabulate(&dataset(records.clone(), &[]), false).unwrap();
            records.reverse();
            for (i, r) in records.iter_mut().enumerate() {
                r.question_id = format!("x{i}");
            }
            let b = tabulate(&dataset(records, &[]), false).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
