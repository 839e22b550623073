//! Metrics and experiment drivers: rank correlation, interval coverage,
//! hyperparameter sweeps and score-scale collapsing.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::{fit_dataset, RankReport, SamplerConfig};
use crate::model::{Hyperparameters, Ranking, RubricSpec, ScoreDataset};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("correlation needs at least two candidates")]
    SingleCandidate,
    #[error("candidate sets differ: {0}")]
    IdMismatch(String),
    #[error("all candidates tie in one of the rankings")]
    ConstantRanking,
    #[error("record {index}: level {level} has no mapping")]
    UnmappedLevel { index: usize, level: u32 },
    #[error("unknown score mapping {0:?}")]
    UnknownMapping(String),
    #[error("empty sweep grid")]
    EmptyGrid,
}

/// Average ranks (1 = best) of descending scores.
pub fn average_ranks(scores: &BTreeMap<String, f64>) -> BTreeMap<String, f64> {
    let mut items: Vec<(&String, f64)> = scores.iter().map(|(k, v)| (k, *v)).collect();
    items.sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut out = BTreeMap::new();
    let mut i = 0;
    while i < items.len() {
        let mut j = i;
        while j + 1 < items.len() && items[j + 1].1 == items[i].1 {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for item in &items[i..=j] {
            out.insert(item.0.clone(), avg);
        }
        i = j + 1;
    }
    out
}

/// Scores reproducing a ranking's order and ties.
pub fn ranking_scores(ranking: &Ranking) -> BTreeMap<String, f64> {
    ranking
        .ranks()
        .into_iter()
        .map(|(id, r)| (id, -(r as f64)))
        .collect()
}

/// Spearman correlation of two score maps over the same ids, with tied
/// values sharing their average rank.
pub fn spearman_scores(
    a: &BTreeMap<String, f64>,
    b: &BTreeMap<String, f64>,
) -> Result<f64, EvalError> {
    if !a.keys().eq(b.keys()) {
        let only: Vec<&String> = a
            .keys()
            .filter(|k| !b.contains_key(*k))
            .chain(b.keys().filter(|k| !a.contains_key(*k)))
            .collect();
        return Err(EvalError::IdMismatch(format!("{only:?}")));
    }
    if a.len() < 2 {
        return Err(EvalError::SingleCandidate);
    }
    let ra: Vec<f64> = average_ranks(a).into_values().collect();
    let rb: Vec<f64> = average_ranks(b).into_values().collect();
    let n = ra.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(EvalError::ConstantRanking);
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

pub fn spearman(a: &Ranking, b: &Ranking) -> Result<f64, EvalError> {
    spearman_scores(&ranking_scores(a), &ranking_scores(b))
}

/// Fraction of (report, candidate) pairs whose true rank lies in the rank
/// interval. Candidates missing from the truth are skipped.
pub fn coverage(reports: &[&RankReport], truth: &Ranking) -> f64 {
    let ranks = truth.ranks();
    let mut hit = 0usize;
    let mut total = 0usize;
    for r in reports {
        for (id, s) in &r.candidates {
            if let Some(&t) = ranks.get(id) {
                total += 1;
                hit += (s.rank_interval.0 <= t && t <= s.rank_interval.1) as usize;
            }
        }
    }
    if total == 0 {
        f64::NAN
    } else {
        hit as f64 / total as f64
    }
}

/// Fraction of (report, candidate) pairs whose true score lies in the score
/// interval.
pub fn score_coverage(reports: &[&RankReport], truth: &BTreeMap<String, f64>) -> f64 {
    let mut hit = 0usize;
    let mut total = 0usize;
    for r in reports {
        for (id, s) in &r.candidates {
            if let Some(&t) = truth.get(id) {
                total += 1;
                hit += (s.score_interval.0 <= t && t <= s.score_interval.1) as usize;
            }
        }
    }
    if total == 0 {
        f64::NAN
    } else {
        hit as f64 / total as f64
    }
}

/// Mean width of the rank intervals.
pub fn mean_rank_width(report: &RankReport) -> f64 {
    let n = report.candidates.len() as f64;
    report
        .candidates
        .values()
        .map(|s| (s.rank_interval.1 - s.rank_interval.0) as f64)
        .sum::<f64>()
        / n
}

/// One grid point of a sensitivity sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub omega: f64,
    pub beta_max: f64,
    /// Spearman correlation with the base cell's ranking.
    pub correlation: Option<f64>,
    pub mean_rank_width: Option<f64>,
    pub coverage: Option<f64>,
    pub max_rhat: Option<f64>,
    pub error: Option<String>,
    pub report: Option<RankReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub base: SweepCell,
    pub cells: Vec<SweepCell>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

impl SweepReport {
    /// Tab-separated table with one row per cell.
    pub fn to_tsv(&self) -> String {
        let mut out =
            String::from("omega\tbeta_max\tcorrelation\tmean_rank_width\tcoverage\tmax_rhat\terror\n");
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                c.omega,
                c.beta_max,
                fmt_opt(c.correlation),
                fmt_opt(c.mean_rank_width),
                fmt_opt(c.coverage),
                fmt_opt(c.max_rhat),
                c.error.as_deref().unwrap_or("")
            );
        }
        out
    }
}

fn fit_cell(
    ds: &ScoreDataset,
    base: &Hyperparameters,
    omega: f64,
    beta_max: f64,
    cfg: &SamplerConfig,
    truth: Option<&Ranking>,
) -> SweepCell {
    let hyper = base.clone().with_omega(omega).with_beta_max(beta_max);
    let mut cell = SweepCell {
        omega,
        beta_max,
        correlation: None,
        mean_rank_width: None,
        coverage: None,
        max_rhat: None,
        error: None,
        report: None,
    };
    match fit_dataset(ds, &hyper, cfg) {
        Ok((report, _)) => {
            let pooled = report.pooled;
            cell.mean_rank_width = Some(mean_rank_width(&pooled));
            cell.coverage = truth.map(|t| coverage(&[&pooled], t));
            cell.max_rhat = Some(pooled.max_rhat());
            cell.report = Some(pooled);
        }
        Err(e) => cell.error = Some(e.to_string()),
    }
    cell
}

/// Fits every `(omega, beta_max)` pair in parallel and compares each
/// posterior-mean ranking with the `omega = 0, beta_max = 0` fit. A failing
/// cell records its error and the sweep continues.
pub fn sensitivity_sweep(
    ds: &ScoreDataset,
    omegas: &[f64],
    beta_maxes: &[f64],
    base: &Hyperparameters,
    cfg: &SamplerConfig,
    truth: Option<&Ranking>,
) -> Result<SweepReport, EvalError> {
    if omegas.is_empty() || beta_maxes.is_empty() {
        return Err(EvalError::EmptyGrid);
    }
    let grid: Vec<(f64, f64)> = omegas
        .iter()
        .flat_map(|&o| beta_maxes.iter().map(move |&b| (o, b)))
        .collect();
    let mut base_cell = fit_cell(ds, base, 0.0, 0.0, cfg, truth);
    let mut cells: Vec<SweepCell> = grid
        .par_iter()
        .map(|&(o, b)| {
            if o == 0.0 && b == 0.0 {
                base_cell.clone()
            } else {
                fit_cell(ds, base, o, b, cfg, truth)
            }
        })
        .collect();
    let mean_scores = |rep: &RankReport| -> BTreeMap<String, f64> {
        rep.candidates
            .iter()
            .map(|(k, s)| (k.clone(), s.mean_score))
            .collect()
    };
    let base_scores = base_cell.report.as_ref().map(mean_scores);
    for cell in cells.iter_mut().chain(std::iter::once(&mut base_cell)) {
        if let (Some(base), Some(r)) = (&base_scores, &cell.report) {
            cell.correlation = spearman_scores(&mean_scores(r), base).ok();
        }
    }
    Ok(SweepReport {
        base: base_cell,
        cells,
    })
}

/// Map from raw score codes to collapsed levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ScoreMapping {
    /// `{1,2} → 1`, `{0,3,4} → 2`, `{5} → 3`.
    Tldr,
    /// `{1,2} → 1`, `{0,3} → 2`, `{4,5} → 3`.
    MtBench,
    Custom(BTreeMap<u32, u32>),
    Identity,
}

impl ScoreMapping {
    pub fn from_name(name: &str) -> Result<Self, EvalError> {
        match name.to_ascii_lowercase().as_str() {
            "tldr" => Ok(Self::Tldr),
            "mtbench" | "mt-bench" => Ok(Self::MtBench),
            "identity" => Ok(Self::Identity),
            _ => Err(EvalError::UnknownMapping(name.to_string())),
        }
    }

    /// Parses `raw:level` pairs separated by commas, e.g. `0:2,1:1,2:1`.
    pub fn parse_table(spec: &str) -> Result<Self, EvalError> {
        let bad = || EvalError::UnknownMapping(spec.to_string());
        let mut table = BTreeMap::new();
        for pair in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (from, to) = pair.split_once(':').ok_or_else(bad)?;
            let from: u32 = from.trim().parse().map_err(|_| bad())?;
            let to: u32 = to.trim().parse().map_err(|_| bad())?;
            if to == 0 {
                return Err(bad());
            }
            table.insert(from, to);
        }
        if table.is_empty() {
            return Err(bad());
        }
        Ok(Self::Custom(table))
    }

    pub fn apply(&self, level: u32) -> Option<u32> {
        match self {
            Self::Tldr => match level {
                1 | 2 => Some(1),
                0 | 3 | 4 => Some(2),
                5 => Some(3),
                _ => None,
            },
            Self::MtBench => match level {
                1 | 2 => Some(1),
                0 | 3 => Some(2),
                4 | 5 => Some(3),
                _ => None,
            },
            Self::Custom(t) => t.get(&level).copied(),
            Self::Identity => Some(level),
        }
    }

    fn target_levels(&self) -> Option<usize> {
        match self {
            Self::Tldr | Self::MtBench => Some(3),
            Self::Custom(t) => t.values().max().map(|&m| m as usize),
            Self::Identity => None,
        }
    }
}

/// Rewrites every record's level through `mapping`. The result uses a square
/// rubric with as many levels as the mapping produces; the identity mapping
/// keeps the dataset's rubric.
pub fn collapse_scores(ds: &ScoreDataset, mapping: &ScoreMapping) -> Result<ScoreDataset, EvalError> {
    let mut out = ds.clone();
    for (index, r) in out.records.iter_mut().enumerate() {
        r.assigned_level = mapping
            .apply(r.assigned_level)
            .ok_or(EvalError::UnmappedLevel {
                index,
                level: r.assigned_level,
            })?;
    }
    if let Some(m) = mapping.target_levels() {
        out.rubric = RubricSpec::square(m.max(2)).map_err(|_| EvalError::UnknownMapping(format!("{mapping:?}")))?;
    }
    Ok(out)
}
