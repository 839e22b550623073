use std::collections::BTreeMap;

use simplex_rank::eval::mean_rank_width;
use simplex_rank::inference::{fit_dataset, RankReport};
use simplex_rank::model::{Hyperparameters, RubricSpec, ScoreDataset};
use simplex_rank::sampler::SamplerConfig;
use simplex_rank::synthetic::{generate_synthetic, JudgeSource, SyntheticSpec};

fn cfg(seed: u64) -> SamplerConfig {
    SamplerConfig {
        chains: 4,
        warmup: 400,
        samples: 400,
        seed,
        ..SamplerConfig::default()
    }
}

#[test]
fn rank_intervals_widen_with_omega() {
    for seed in 0..20u64 {
        let spec = SyntheticSpec::new(300, 4, 2, RubricSpec::square(3).unwrap());
        let (ds, _) = generate_synthetic(&spec, 300 + seed);
        let width = |omega: f64| {
            let hyper = Hyperparameters::primary(3).with_omega(omega);
            mean_rank_width(&fit_dataset(&ds, &hyper, &cfg(seed)).unwrap().0.pooled)
        };
        let (narrow, wide) = (width(0.0), width(8.0));
        assert!(wide >= narrow, "dataset {seed}: width {wide} at omega 8 < {narrow} at omega 0");
    }
}

#[test]
fn sharp_judge_prior_recovers_empirical_prevalences() {
    let mut spec = SyntheticSpec::new(2000, 3, 2, RubricSpec::square(3).unwrap());
    spec.judges = JudgeSource::PriorWithQuality {
        beta_max: 200.0,
        quality: 1.0,
    };
    let (ds, truth) = generate_synthetic(&spec, 41);
    let mut freq: BTreeMap<String, [f64; 3]> = BTreeMap::new();
    for (_, cand, level) in &truth.latent {
        freq.entry(cand.clone()).or_default()[level - 1] += 1.0;
    }
    let hyper = Hyperparameters::primary(3).with_beta_max(200.0);
    let (_, draws) = fit_dataset(&ds, &hyper, &cfg(41)).unwrap();
    let draws = draws.values().next().unwrap();
    for (k, cand) in draws.candidates().iter().enumerate() {
        let total: f64 = freq[cand].iter().sum();
        let mut mean = [0.0; 3];
        for chain in &draws.prevalences {
            for d in chain {
                for (m, p) in mean.iter_mut().zip(&d[k]) {
                    *m += p / draws.num_draws() as f64;
                }
            }
        }
        for m in 0..3 {
            let empirical = freq[cand][m] / total;
            assert!(
                (mean[m] - empirical).abs() < 0.05,
                "{cand} level {}: posterior {} vs empirical {empirical}",
                m + 1,
                mean[m]
            );
        }
    }
}

fn renamed(ds: &ScoreDataset, map: &BTreeMap<String, String>) -> ScoreDataset {
    let mut out = ds.clone();
    for r in &mut out.records {
        r.candidate_id = map[&r.candidate_id].clone();
    }
    out.candidate_family = ds
        .candidate_family
        .iter()
        .map(|(c, f)| (map[c].clone(), f.clone()))
        .collect();
    out
}

/// Monte Carlo standard error of a candidate's mean score, with the posterior
/// standard deviation read off the 95% interval.
fn mcse(report: &RankReport, id: &str) -> f64 {
    let s = &report.candidates[id];
    let sd = (s.score_interval.1 - s.score_interval.0) / 3.92;
    sd / report.diagnostics[&format!("score[{id}]")].ess.sqrt()
}

#[test]
fn candidate_relabeling_leaves_scores_unchanged() {
    let mut spec = SyntheticSpec::new(400, 4, 2, RubricSpec::square(3).unwrap());
    spec.judges = JudgeSource::Prior { beta_max: 5.0 };
    let (ds, _) = generate_synthetic(&spec, 17);
    let ids = ds.candidates();
    let map: BTreeMap<String, String> = ids
        .iter()
        .rev()
        .enumerate()
        .map(|(i, c)| (c.clone(), format!("z{i}")))
        .collect();
    let hyper = Hyperparameters::primary(3);
    let a = fit_dataset(&ds, &hyper, &cfg(5)).unwrap().0.pooled;
    let b = fit_dataset(&renamed(&ds, &map), &hyper, &cfg(5)).unwrap().0.pooled;
    for c in &ids {
        let (x, y) = (a.candidates[c].mean_score, b.candidates[&map[c]].mean_score);
        let tol = 4.0 * mcse(&a, c).hypot(mcse(&b, &map[c]));
        assert!((x - y).abs() < tol, "{c}: {x} vs {y} (tolerance {tol})");
    }
}
