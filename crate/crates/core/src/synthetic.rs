//! Synthetic score data with known ground truth.
//!
//! Every (question, candidate) pair gets a true latent level drawn from the
//! candidate's prevalence. Each judge then assigns a level by inverting the
//! CDF of its vertex column at a uniform variate. With probability
//! `correlation` that variate is shared by all judges for the pair, which
//! makes judges agree beyond what the latent level explains. With prevalence
//! shifts enabled, judge `j` sees candidate `k` through the perturbed
//! prevalence `(1 - λ_jk) π_k + λ_jk Z_k`, which breaks constancy.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::expected_score;
use crate::model::{
    default_delta, JudgeVertices, PrevalenceVector, Ranking, RubricSpec, ScoreDataset, ScoreRecord,
};
use crate::prior::{sample_dirichlet, sample_judge_vertices_with_quality, VertexGraph};
use crate::sampler::chain_rng;

/// How judge vertices are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum JudgeSource {
    /// Drawn from the vertex prior with the given concentration boost and a
    /// uniform quality draw.
    Prior { beta_max: f64 },
    /// Drawn from the vertex prior with quality fixed.
    PriorWithQuality { beta_max: f64, quality: f64 },
    Perfect,
    Given(Vec<JudgeVertices>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PrevalenceSource {
    /// Uniform Dirichlet draws.
    Dirichlet,
    Given(Vec<PrevalenceVector>),
}

/// Judge-specific prevalence perturbations: `λ_jk = magnitude · W_k · R_j`
/// with `W_k, R_j ~ U(0, 1)` and directions `Z_k ~ Dir(δ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub magnitude: f64,
    pub delta: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_questions: usize,
    pub num_candidates: usize,
    pub num_judges: usize,
    pub rubric: RubricSpec,
    pub judges: JudgeSource,
    pub prevalences: PrevalenceSource,
    /// Probability that a record's uniform variate is shared across judges.
    pub correlation: f64,
    pub shift: Option<ShiftSpec>,
    pub num_strata: usize,
}

impl SyntheticSpec {
    pub fn new(
        num_questions: usize,
        num_candidates: usize,
        num_judges: usize,
        rubric: RubricSpec,
    ) -> Self {
        Self {
            num_questions,
            num_candidates,
            num_judges,
            rubric,
            judges: JudgeSource::Prior { beta_max: 0.0 },
            prevalences: PrevalenceSource::Dirichlet,
            correlation: 0.0,
            shift: None,
            num_strata: 1,
        }
    }
}

/// Ground truth behind a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTruth {
    /// `(question, candidate, latent level)`, latent levels 1-based.
    pub latent: Vec<(String, String, usize)>,
    pub vertices: BTreeMap<String, JudgeVertices>,
    pub prevalences: BTreeMap<String, PrevalenceVector>,
    /// Judge-specific prevalences when shifts are on: judge -> candidate -> π.
    pub shifted: Option<BTreeMap<String, BTreeMap<String, PrevalenceVector>>>,
    pub correlation: f64,
    pub expected_scores: BTreeMap<String, f64>,
    pub ranking: Ranking,
}

fn padded(prefix: &str, i: usize, n: usize) -> String {
    let width = n.to_string().len();
    format!("{prefix}{:0width$}", i + 1)
}

pub fn candidate_id(i: usize, n: usize) -> String {
    padded("c", i, n)
}

pub fn judge_id(i: usize, n: usize) -> String {
    padded("j", i, n)
}

pub fn question_id(i: usize, n: usize) -> String {
    padded("q", i, n)
}

fn inverse_cdf(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    // u lands past the rounded total: take the last level with mass
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Generates a dataset and its ground truth. Deterministic in `seed`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> (ScoreDataset, SyntheticTruth) {
    let m = spec.rubric.num_true_levels();
    let a = spec.rubric.num_assigned_levels();
    let (k_n, j_n, q_n) = (spec.num_candidates, spec.num_judges, spec.num_questions);
    let mut rng = chain_rng(seed, 0);

    let vertices: Vec<JudgeVertices> = match &spec.judges {
        JudgeSource::Prior { beta_max } => {
            let graph = VertexGraph::new(m, a);
            (0..j_n)
                .map(|_| {
                    let q = rng.random::<f64>();
                    sample_judge_vertices_with_quality(&graph, *beta_max, q, &mut rng).vertices
                })
                .collect()
        }
        JudgeSource::PriorWithQuality { beta_max, quality } => {
            let graph = VertexGraph::new(m, a);
            (0..j_n)
                .map(|_| {
                    sample_judge_vertices_with_quality(&graph, *beta_max, *quality, &mut rng)
                        .vertices
                })
                .collect()
        }
        JudgeSource::Perfect => vec![JudgeVertices::identity(m, a); j_n],
        JudgeSource::Given(v) => {
            assert_eq!(v.len(), j_n, "one vertex set per judge");
            v.clone()
        }
    };
    let prevalences: Vec<PrevalenceVector> = match &spec.prevalences {
        PrevalenceSource::Dirichlet => (0..k_n)
            .map(|_| PrevalenceVector::new(sample_dirichlet(&vec![1.0; m], &mut rng)).unwrap())
            .collect(),
        PrevalenceSource::Given(p) => {
            assert_eq!(p.len(), k_n, "one prevalence per candidate");
            p.clone()
        }
    };
    // (λ_jk, Z_k) per judge and candidate
    let shifts: Option<(Vec<Vec<f64>>, Vec<Vec<f64>>)> = spec.shift.as_ref().map(|s| {
        let delta = s.delta.clone().unwrap_or_else(|| default_delta(m));
        let w: Vec<f64> = (0..k_n).map(|_| rng.random::<f64>()).collect();
        let r: Vec<f64> = (0..j_n).map(|_| rng.random::<f64>()).collect();
        let z: Vec<Vec<f64>> = (0..k_n).map(|_| sample_dirichlet(&delta, &mut rng)).collect();
        let lambda = (0..j_n)
            .map(|j| (0..k_n).map(|k| s.magnitude * w[k] * r[j]).collect())
            .collect();
        (lambda, z)
    });

    let cands: Vec<String> = (0..k_n).map(|k| candidate_id(k, k_n)).collect();
    let judges: Vec<String> = (0..j_n).map(|j| judge_id(j, j_n)).collect();
    let strata: Vec<String> = if spec.num_strata <= 1 {
        vec![crate::model::DEFAULT_STRATUM.to_string()]
    } else {
        (0..spec.num_strata)
            .map(|s| padded("s", s, spec.num_strata))
            .collect()
    };

    let per_question: Vec<(Vec<ScoreRecord>, Vec<(String, String, usize)>)> = (0..q_n)
        .into_par_iter()
        .map(|q| {
            let mut rng: ChaCha8Rng = chain_rng(seed, q + 1);
            let qid = question_id(q, q_n);
            let stratum = &strata[q % strata.len()];
            let mut records = Vec::with_capacity(k_n * j_n);
            let mut latent = Vec::with_capacity(k_n);
            for k in 0..k_n {
                let s_true = inverse_cdf(prevalences[k].weights(), rng.random::<f64>());
                latent.push((qid.clone(), cands[k].clone(), s_true + 1));
                let shared = rng.random::<f64>();
                for j in 0..j_n {
                    // with probability λ_jk the judge sees a level drawn
                    // from the shift direction instead of the true one
                    let perceived = match &shifts {
                        Some((lambda, z)) => {
                            let view = rng.random::<f64>();
                            let pick = rng.random::<f64>();
                            if view < lambda[j][k] {
                                inverse_cdf(&z[k], pick)
                            } else {
                                s_true
                            }
                        }
                        None => s_true,
                    };
                    let own = rng.random::<f64>();
                    let u = if rng.random::<f64>() < spec.correlation {
                        shared
                    } else {
                        own
                    };
                    let level = inverse_cdf(vertices[j].column(perceived), u) + 1;
                    records.push(ScoreRecord::new(
                        qid.clone(),
                        judges[j].clone(),
                        cands[k].clone(),
                        stratum.clone(),
                        level as u32,
                    ));
                }
            }
            (records, latent)
        })
        .collect();
    let mut records = Vec::with_capacity(q_n * k_n * j_n);
    let mut latent = Vec::with_capacity(q_n * k_n);
    for (r, l) in per_question {
        records.extend(r);
        latent.extend(l);
    }

    let expected_scores: BTreeMap<String, f64> = cands
        .iter()
        .zip(&prevalences)
        .map(|(c, p)| (c.clone(), expected_score(p, &spec.rubric)))
        .collect();
    let ranking = Ranking::from_scores(&expected_scores, 0.0);
    let truth = SyntheticTruth {
        latent,
        vertices: judges.iter().cloned().zip(vertices).collect(),
        prevalences: cands.iter().cloned().zip(prevalences.iter().cloned()).collect(),
        shifted: shifts.map(|(lambda, z)| {
            judges
                .iter()
                .enumerate()
                .map(|(j, jid)| {
                    let inner = cands
                        .iter()
                        .enumerate()
                        .map(|(k, c)| {
                            let l = lambda[j][k];
                            let mixed: Vec<f64> = prevalences[k]
                                .weights()
                                .iter()
                                .zip(&z[k])
                                .map(|(p, z)| (1.0 - l) * p + l * z)
                                .collect();
                            let s: f64 = mixed.iter().sum();
                            let mixed = mixed.into_iter().map(|x| x / s).collect();
                            (c.clone(), PrevalenceVector::new(mixed).unwrap())
                        })
                        .collect();
                    (jid.clone(), inner)
                })
                .collect()
        }),
        correlation: spec.correlation,
        expected_scores,
        ranking,
    };
    (
        ScoreDataset::from_records(spec.rubric.clone(), records),
        truth,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::mixture;

    fn spec3(n: usize) -> SyntheticSpec {
        SyntheticSpec::new(n, 3, 2, RubricSpec::square(3).unwrap())
    }

    #[test]
    fn perfect_judges_report_latent_levels() {
        let mut spec = spec3(200);
        spec.judges = JudgeSource::Perfect;
        let (ds, truth) = generate_synthetic(&spec, 1);
        let latent: BTreeMap<(String, String), usize> = truth
            .latent
            .iter()
            .map(|(q, k, s)| ((q.clone(), k.clone()), *s))
            .collect();
        for r in &ds.records {
            assert_eq!(
                r.assigned_level as usize,
                latent[&(r.question_id.clone(), r.candidate_id.clone())]
            );
        }
    }

    #[test]
    fn frequencies_match_mixture() {
        let mut spec = spec3(5000);
        spec.judges = JudgeSource::Prior { beta_max: 3.0 };
        spec.correlation = 0.5;
        let (ds, truth) = generate_synthetic(&spec, 2);
        let n = 5000.0;
        for (j, theta) in &truth.vertices {
            for (k, pi) in &truth.prevalences {
                let gamma = mixture(theta, pi).unwrap();
                let mut counts = [0.0; 3];
                for r in ds.records.iter().filter(|r| &r.judge_id == j && &r.candidate_id == k) {
                    counts[r.assigned_level as usize - 1] += 1.0;
                }
                for (c, p) in counts.iter().zip(gamma.probs()) {
                    let sd = (n * p * (1.0 - p)).sqrt();
                    assert!((c - n * p).abs() <= 3.0 * sd + 1e-9, "{j} {k}: {c} vs {}", n * p);
                }
            }
        }
    }

    #[test]
    fn full_correlation_makes_identical_judges_agree() {
        let mut spec = spec3(300);
        let theta = JudgeVertices::new(vec![
            vec![0.7, 0.2, 0.1],
            vec![0.2, 0.6, 0.2],
            vec![0.1, 0.2, 0.7],
        ])
        .unwrap();
        spec.judges = JudgeSource::Given(vec![theta.clone(), theta]);
        spec.correlation = 1.0;
        let (ds, _) = generate_synthetic(&spec, 3);
        let mut by_pair: BTreeMap<(String, String), Vec<u32>> = BTreeMap::new();
        for r in &ds.records {
            by_pair
                .entry((r.question_id.clone(), r.candidate_id.clone()))
                .or_default()
                .push(r.assigned_level);
        }
        assert!(by_pair.values().all(|v| v[0] == v[1]));
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let spec = spec3(50);
        assert_eq!(generate_synthetic(&spec, 4), generate_synthetic(&spec, 4));
        assert_ne!(generate_synthetic(&spec, 4).0, generate_synthetic(&spec, 5).0);
    }

    #[test]
    fn strata_and_ids() {
        let mut spec = spec3(10);
        spec.num_strata = 2;
        let (ds, truth) = generate_synthetic(&spec, 6);
        assert_eq!(ds.strata(), vec!["s1".to_string(), "s2".to_string()]);
        assert_eq!(ds.candidates(), vec!["c1", "c2", "c3"]);
        assert_eq!(truth.ranking.len(), 3);
        assert_eq!(ds.records.len(), 10 * 3 * 2);
    }

    #[test]
    fn shifted_views_differ_from_base() {
        let mut spec = spec3(10);
        spec.shift = Some(ShiftSpec {
            magnitude: 1.0,
            delta: None,
        });
        let (_, truth) = generate_synthetic(&spec, 7);
        let sh = truth.shifted.unwrap();
        let any_diff = sh.values().any(|per_k| {
            per_k
                .iter()
                .any(|(k, p)| p != &truth.prevalences[k])
        });
        assert!(any_diff);
    }
}
