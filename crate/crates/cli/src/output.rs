//! Tables, report loading and atomic output files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::Value;
use simplex_rank::inference::{CandidateSummary, RankReport};
use simplex_rank::io::{save_bytes, save_json};
use simplex_rank::model::Ranking;

/// Output directory, created on first write.
pub struct OutDir(PathBuf);

impl OutDir {
    pub fn new(path: &Path) -> Result<Self> {
        std::fs::create_dir_all(path)
            .with_context(|| format!("creating output directory {}", path.display()))?;
        Ok(Self(path.to_path_buf()))
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.0.join(name)
    }

    pub fn text(&self, name: &str, text: &str) -> Result<()> {
        save_bytes(&self.path(name), text.as_bytes())?;
        Ok(())
    }

    pub fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        save_json(value, &self.path(name))?;
        Ok(())
    }
}

/// Candidate rows best first: scores, ranks and rank interval.
pub fn rank_table(report: &RankReport) -> String {
    let mut out = String::from(
        "candidate\tmean_score\tscore_lo\tscore_hi\tmean_rank\tmedian_rank\trank_lo\trank_hi\n",
    );
    for id in &report.ranking.order {
        let Some(s) = report.candidates.get(id) else {
            continue;
        };
        let _ = writeln!(
            out,
            "{id}\t{:.6}\t{:.6}\t{:.6}\t{:.4}\t{}\t{}\t{}",
            s.mean_score,
            s.score_interval.0,
            s.score_interval.1,
            s.mean_rank,
            s.median_rank,
            s.rank_interval.0,
            s.rank_interval.1
        );
    }
    out
}

pub fn diagnostics_line(report: &RankReport) -> String {
    format!(
        "draws {}  divergences {}  max R-hat {:.4}  min ESS {:.0}",
        report.num_draws,
        report.divergences,
        report.max_rhat(),
        report.min_ess()
    )
}

/// The rank-report part of any report file written by this tool: a plain
/// report, a stratified or single-judge report (pooled part) or a baseline
/// wrapper (`report` field). Only candidates and ranking are read.
pub fn extract_report(v: &Value) -> Result<(BTreeMap<String, CandidateSummary>, Ranking)> {
    if let (Some(c), Some(r)) = (v.get("candidates"), v.get("ranking")) {
        let candidates = serde_json::from_value(c.clone()).context("report candidates")?;
        let ranking = serde_json::from_value(r.clone()).context("report ranking")?;
        return Ok((candidates, ranking));
    }
    for key in ["report", "pooled"] {
        if let Some(inner) = v.get(key) {
            return extract_report(inner);
        }
    }
    bail!("not a rank report: expected candidates and ranking fields")
}

/// A ranking plus optional true scores from a truth file: a synthetic truth
/// dump (`ranking`, `expected_scores`) or a bare ranking (`order`).
pub fn extract_truth(v: &Value) -> Result<(Ranking, Option<BTreeMap<String, f64>>)> {
    if let Some(r) = v.get("ranking") {
        let ranking = serde_json::from_value(r.clone()).context("truth ranking")?;
        let scores = v
            .get("expected_scores")
            .map(|s| serde_json::from_value(s.clone()))
            .transpose()
            .context("truth expected_scores")?;
        return Ok((ranking, scores));
    }
    if v.get("order").is_some() {
        return Ok((serde_json::from_value(v.clone()).context("truth ranking")?, None));
    }
    bail!("not a truth file: expected a ranking or order field")
}

pub fn read_json(path: &Path) -> Result<Value> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<f64>()
                .with_context(|| format!("bad number {x:?} in list {s:?}"))
        })
        .collect()
}

/// Columns separated by `;`, entries by `,`.
pub fn parse_matrix(s: &str) -> Result<Vec<Vec<f64>>> {
    s.split(';').map(parse_list).collect()
}
