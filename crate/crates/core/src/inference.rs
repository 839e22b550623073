//! Posterior sampling for the full model and rank summaries.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnostics::{diagnose, quantile_sorted, ScalarDiagnostic};
use crate::likelihood::{tabulate_strata, LikelihoodError, LogPosterior, SufficientCounts};
use crate::model::{
    validate_dataset, Hyperparameters, JudgeVertices, Ranking, RubricSpec, ScoreDataset,
};
use crate::prior::VertexGraph;
use crate::sampler::{run_chains, ChainOutput, SamplerError};
use crate::state::{ModelState, ParamLayout, StateError};

pub use crate::sampler::SamplerConfig;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("invalid dataset: {}", .0.join("; "))]
    InvalidDataset(Vec<String>),
    #[error("at least two candidates are needed to rank, got {0}")]
    TooFewCandidates(usize),
    #[error("hyperparameters do not match the rubric: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Likelihood(#[from] LikelihoodError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    State(#[from] StateError),
}

/// Post-warmup draws from all chains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraws {
    pub layout: ParamLayout,
    pub chains: Vec<ChainOutput>,
    /// `[chain][draw][candidate][level]`
    pub prevalences: Vec<Vec<Vec<Vec<f64>>>>,
    /// `[chain][draw][candidate]`, from the base prevalences.
    pub scores: Vec<Vec<Vec<f64>>>,
    /// `[chain][draw][candidate]`, 1 + number of strictly higher scores.
    pub ranks: Vec<Vec<Vec<usize>>>,
    pub divergences: usize,
}

impl PosteriorDraws {
    pub fn candidates(&self) -> &[String] {
        self.layout.candidates()
    }

    pub fn num_draws(&self) -> usize {
        self.scores.iter().map(Vec::len).sum()
    }

    /// Constrained parameters of one draw.
    pub fn state(&self, chain: usize, draw: usize) -> ModelState {
        self.layout
            .from_unconstrained(&self.chains[chain].draws[draw])
            .0
    }

    /// Per-chain traces of every monitored scalar: each candidate's score and
    /// the log density.
    pub fn monitored(&self) -> BTreeMap<String, Vec<Vec<f64>>> {
        let mut out = BTreeMap::new();
        for (k, c) in self.candidates().iter().enumerate() {
            out.insert(
                format!("score[{c}]"),
                self.scores
                    .iter()
                    .map(|chain| chain.iter().map(|d| d[k]).collect())
                    .collect(),
            );
        }
        out.insert(
            "lp".to_string(),
            self.chains.iter().map(|c| c.log_density.clone()).collect(),
        );
        out
    }
}

/// Ranks within one draw: `1 + #{l : s_l > s_k}`.
pub fn draw_ranks(scores: &[f64]) -> Vec<usize> {
    scores
        .iter()
        .map(|s| 1 + scores.iter().filter(|o| *o > s).count())
        .collect()
}

fn check_rubric(rubric: &RubricSpec, hyper: &Hyperparameters) -> Result<(), InferenceError> {
    if hyper.delta_dir.len() != rubric.num_true_levels() {
        return Err(InferenceError::Mismatch(format!(
            "{} direction concentrations for {} levels",
            hyper.delta_dir.len(),
            rubric.num_true_levels()
        )));
    }
    Ok(())
}

/// Samples the posterior for one count table. Random effects are included
/// exactly when `hyper.omega > 0`.
pub fn run_sampler(
    counts: &SufficientCounts,
    rubric: &RubricSpec,
    hyper: &Hyperparameters,
    cfg: &SamplerConfig,
) -> Result<PosteriorDraws, InferenceError> {
    let fixed = vec![None; counts.judges.len()];
    run_sampler_with_fixed(counts, rubric, hyper, cfg, fixed)
}

/// As [`run_sampler`], with some judges pinned to known vertices.
pub fn run_sampler_with_fixed(
    counts: &SufficientCounts,
    rubric: &RubricSpec,
    hyper: &Hyperparameters,
    cfg: &SamplerConfig,
    fixed: Vec<Option<JudgeVertices>>,
) -> Result<PosteriorDraws, InferenceError> {
    check_rubric(rubric, hyper)?;
    if counts.assigned_levels != rubric.num_assigned_levels() {
        return Err(InferenceError::Mismatch("assigned levels".into()));
    }
    let graph = VertexGraph::new(rubric.num_true_levels(), rubric.num_assigned_levels());
    let layout = ParamLayout::new(
        counts.candidates.clone(),
        counts.judges.clone(),
        graph,
        fixed,
        hyper.omega > 0.0,
    )?;
    let target = LogPosterior::new(layout.clone(), counts.clone(), hyper.clone())?;
    let chains = run_chains(&target, cfg, None)?;

    let per_chain: Vec<(Vec<Vec<Vec<f64>>>, Vec<Vec<f64>>)> = chains
        .par_iter()
        .map(|chain| {
            let mut prevs = Vec::with_capacity(chain.draws.len());
            let mut scores = Vec::with_capacity(chain.draws.len());
            for u in &chain.draws {
                let fwd = layout.forward(u);
                let p: Vec<Vec<f64>> = fwd
                    .prevalences
                    .iter()
                    .map(|f| {
                        let s: f64 = f.x.iter().sum();
                        f.x.iter().map(|x| x / s).collect()
                    })
                    .collect();
                scores.push(
                    p.iter()
                        .map(|w| w.iter().zip(rubric.level_values()).map(|(a, b)| a * b).sum())
                        .collect(),
                );
                prevs.push(p);
            }
            (prevs, scores)
        })
        .collect();
    let (prevalences, scores): (Vec<_>, Vec<_>) = per_chain.into_iter().unzip();
    let ranks = scores
        .iter()
        .map(|chain: &Vec<Vec<f64>>| chain.iter().map(|s| draw_ranks(s)).collect())
        .collect();
    let divergences = chains
        .iter()
        .map(|c| c.divergent.iter().filter(|&&d| d).count())
        .sum();
    Ok(PosteriorDraws {
        layout,
        chains,
        prevalences,
        scores,
        ranks,
        divergences,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSummary {
    pub mean_score: f64,
    pub score_interval: (f64, f64),
    pub mean_rank: f64,
    pub median_rank: f64,
    /// Integer bounds of the central 95% rank interval.
    pub rank_interval: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub candidates: BTreeMap<String, CandidateSummary>,
    /// Candidates ordered by posterior mean score.
    pub ranking: Ranking,
    pub diagnostics: BTreeMap<String, ScalarDiagnostic>,
    pub divergences: usize,
    pub num_draws: usize,
}

impl RankReport {
    pub fn max_rhat(&self) -> f64 {
        self.diagnostics
            .values()
            .map(|d| d.rhat)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_ess(&self) -> f64 {
        self.diagnostics
            .values()
            .map(|d| d.ess)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Summary of per-draw scores `[chain][draw][candidate]`.
pub fn summarize_scores(
    candidates: &[String],
    scores: &[Vec<Vec<f64>>],
    extra_monitored: BTreeMap<String, Vec<Vec<f64>>>,
    divergences: usize,
) -> Result<RankReport, InferenceError> {
    let k = candidates.len();
    if k < 2 {
        return Err(InferenceError::TooFewCandidates(k));
    }
    let flat: Vec<&Vec<f64>> = scores.iter().flatten().collect();
    let ranks: Vec<Vec<usize>> = flat.iter().map(|s| draw_ranks(s)).collect();
    let n = flat.len();
    let mut summaries = BTreeMap::new();
    let mut means = BTreeMap::new();
    for (i, c) in candidates.iter().enumerate() {
        let mut s: Vec<f64> = flat.iter().map(|d| d[i]).collect();
        let mean_score = s.iter().sum::<f64>() / n as f64;
        s.sort_by(f64::total_cmp);
        let mut r: Vec<f64> = ranks.iter().map(|d| d[i] as f64).collect();
        let mean_rank = r.iter().sum::<f64>() / n as f64;
        r.sort_by(f64::total_cmp);
        summaries.insert(
            c.clone(),
            CandidateSummary {
                mean_score,
                score_interval: (quantile_sorted(&s, 0.025), quantile_sorted(&s, 0.975)),
                mean_rank,
                median_rank: quantile_sorted(&r, 0.5),
                rank_interval: (
                    quantile_sorted(&r, 0.025).floor() as usize,
                    quantile_sorted(&r, 0.975).ceil() as usize,
                ),
            },
        );
        means.insert(c.clone(), mean_score);
    }
    let mut monitored = extra_monitored;
    for (i, c) in candidates.iter().enumerate() {
        monitored.insert(
            format!("score[{c}]"),
            scores
                .iter()
                .map(|chain| chain.iter().map(|d| d[i]).collect())
                .collect(),
        );
    }
    let diagnostics = monitored
        .into_iter()
        .filter(|(_, chains)| chains.len() >= 2)
        .map(|(name, chains)| (name, diagnose(&chains)))
        .collect();
    Ok(RankReport {
        candidates: summaries,
        ranking: Ranking::from_scores(&means, 0.0),
        diagnostics,
        divergences,
        num_draws: n,
    })
}

/// Per-candidate score and rank summaries over all draws, plus split-R̂ and
/// bulk ESS of each monitored scalar (needs at least two chains).
pub fn summarize_ranks(draws: &PosteriorDraws) -> Result<RankReport, InferenceError> {
    let mut lp = BTreeMap::new();
    lp.insert(
        "lp".to_string(),
        draws.chains.iter().map(|c| c.log_density.clone()).collect(),
    );
    summarize_scores(draws.candidates(), &draws.scores, lp, draws.divergences)
}

/// Independent fits per stratum and a pooled report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratifiedReport {
    pub strata: BTreeMap<String, RankReport>,
    /// Per draw, each candidate's score averaged over the strata it appears
    /// in, weighted by stratum question counts.
    pub pooled: RankReport,
    pub question_counts: BTreeMap<String, usize>,
}

fn stratum_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add((index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Validates, tabulates and fits every stratum of a dataset.
pub fn fit_dataset(
    ds: &ScoreDataset,
    hyper: &Hyperparameters,
    cfg: &SamplerConfig,
) -> Result<(StratifiedReport, BTreeMap<String, PosteriorDraws>), InferenceError> {
    let report = validate_dataset(ds, hyper.self_adjust);
    if !report.is_valid() {
        return Err(InferenceError::InvalidDataset(report.warnings()));
    }
    check_rubric(&ds.rubric, hyper)?;
    let tables = tabulate_strata(ds, hyper.self_adjust)?;
    let mut draws = BTreeMap::new();
    let mut reports = BTreeMap::new();
    for (i, (name, counts)) in tables.iter().enumerate() {
        let stratum_cfg = SamplerConfig {
            seed: stratum_seed(cfg.seed, i),
            ..cfg.clone()
        };
        let d = run_sampler(counts, &ds.rubric, hyper, &stratum_cfg)?;
        reports.insert(name.clone(), summarize_ranks(&d)?);
        draws.insert(name.clone(), d);
    }
    let question_counts = ds.questions_per_stratum();
    let pooled = pool_strata(&draws, &question_counts)?;
    Ok((
        StratifiedReport {
            strata: reports,
            pooled,
            question_counts,
        },
        draws,
    ))
}

/// Pools per-stratum draws (all fitted with the same chain and draw counts).
pub fn pool_strata(
    draws: &BTreeMap<String, PosteriorDraws>,
    question_counts: &BTreeMap<String, usize>,
) -> Result<RankReport, InferenceError> {
    let mut candidates: Vec<String> = draws
        .values()
        .flat_map(|d| d.candidates().iter().cloned())
        .collect();
    candidates.sort();
    candidates.dedup();
    let first = draws
        .values()
        .next()
        .ok_or(InferenceError::TooFewCandidates(0))?;
    let chains = first.scores.len();
    let per_chain = first.scores[0].len();
    let mut pooled = vec![vec![vec![0.0; candidates.len()]; per_chain]; chains];
    let mut lp = vec![vec![0.0; per_chain]; chains];
    for (ci, cand) in candidates.iter().enumerate() {
        let mut weight_total = 0.0;
        for (name, d) in draws {
            let Some(k) = d.candidates().iter().position(|c| c == cand) else {
                continue;
            };
            let w = question_counts.get(name).copied().unwrap_or(0) as f64;
            weight_total += w;
            for (c, chain) in d.scores.iter().enumerate() {
                for (i, s) in chain.iter().enumerate() {
                    pooled[c][i][ci] += w * s[k];
                }
            }
        }
        for chain in pooled.iter_mut() {
            for draw in chain.iter_mut() {
                draw[ci] /= weight_total;
            }
        }
    }
    for d in draws.values() {
        for (c, chain) in d.chains.iter().enumerate() {
            for (i, v) in chain.log_density.iter().enumerate() {
                lp[c][i] += v;
            }
        }
    }
    let divergences = draws.values().map(|d| d.divergences).sum();
    let mut extra = BTreeMap::new();
    extra.insert("lp".to_string(), lp);
    summarize_scores(&candidates, &pooled, extra, divergences)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores_report(scores: Vec<Vec<Vec<f64>>>) -> RankReport {
        let names = vec!["a".to_string(), "b".to_string()];
        summarize_scores(&names, &scores, BTreeMap::new(), 0).unwrap()
    }

    #[test]
    fn ranks_share_minimum_on_ties() {
        assert_eq!(draw_ranks(&[0.5, 0.9, 0.5, 0.1]), vec![2, 1, 2, 4]);
    }

    #[test]
    fn dominant_candidate() {
        let chain: Vec<Vec<f64>> = (0..200).map(|i| vec![1.0 + i as f64 * 1e-3, 0.5]).collect();
        let r = scores_report(vec![chain.clone(), chain]);
        let a = &r.candidates["a"];
        assert_eq!(a.mean_rank, 1.0);
        assert_eq!(a.rank_interval, (1, 1));
        assert_eq!(r.ranking.order, vec!["a".to_string(), "b".to_string()]);
    }

    #[test]
    fn symmetric_candidates() {
        let chain: Vec<Vec<f64>> = (0..400)
            .map(|i| if i % 2 == 0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] })
            .collect();
        let r = scores_report(vec![chain.clone(), chain]);
        for s in r.candidates.values() {
            assert!((s.mean_rank - 1.5).abs() < 1e-12);
            assert_eq!(s.rank_interval, (1, 2));
            assert!(s.score_interval.0 <= 0.5 && 0.5 <= s.score_interval.1);
        }
    }

    #[test]
    fn too_few_candidates() {
        let names = vec!["a".to_string()];
        let scores = vec![vec![vec![0.3]; 10]; 2];
        assert!(matches!(
            summarize_scores(&names, &scores, BTreeMap::new(), 0),
            Err(InferenceError::TooFewCandidates(1))
        ));
    }
}
