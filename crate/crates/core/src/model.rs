//! Domain types shared across the crate: rubric, score records, datasets,
//! distributions on the simplex, hyperparameters and rankings.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance for "sums to one" checks on every distribution-typed value.
pub const SIMPLEX_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("rubric needs at least 2 true levels, got {0}")]
    TooFewLevels(usize),
    #[error("assigned alphabet ({assigned}) smaller than true alphabet ({true_levels})")]
    AssignedAlphabetTooSmall { true_levels: usize, assigned: usize },
    #[error("level values must have length {expected} and be strictly increasing")]
    BadLevelValues { expected: usize },
    #[error("distribution entries must lie in [0,1] and sum to 1 (sum = {sum})")]
    NotADistribution { sum: f64 },
    #[error("expected {expected} entries, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid hyperparameter: {0}")]
    BadHyperparameter(String),
    #[error("ranking: {0}")]
    BadRanking(String),
}

/// Scoring rubric: `M` true levels, `M'` assigned levels (`M' > M` hosts an
/// abstain category), and the real value attached to each true level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RubricSpec {
    num_true_levels: usize,
    num_assigned_levels: usize,
    level_values: Vec<f64>,
}

impl RubricSpec {
    /// Rubric with the default level values `0, 1, …, M-1`.
    pub fn new(num_true_levels: usize, num_assigned_levels: usize) -> Result<Self, ModelError> {
        let values = (0..num_true_levels).map(|m| m as f64).collect();
        Self::with_values(num_true_levels, num_assigned_levels, values)
    }

    pub fn with_values(
        num_true_levels: usize,
        num_assigned_levels: usize,
        level_values: Vec<f64>,
    ) -> Result<Self, ModelError> {
        if num_true_levels < 2 {
            return Err(ModelError::TooFewLevels(num_true_levels));
        }
        if num_assigned_levels < num_true_levels {
            return Err(ModelError::AssignedAlphabetTooSmall {
                true_levels: num_true_levels,
                assigned: num_assigned_levels,
            });
        }
        let increasing = level_values.windows(2).all(|w| w[0] < w[1]);
        if level_values.len() != num_true_levels
            || !increasing
            || level_values.iter().any(|v| !v.is_finite())
        {
            return Err(ModelError::BadLevelValues {
                expected: num_true_levels,
            });
        }
        Ok(Self {
            num_true_levels,
            num_assigned_levels,
            level_values,
        })
    }

    /// Square rubric (`M' = M`) with default values.
    pub fn square(levels: usize) -> Result<Self, ModelError> {
        Self::new(levels, levels)
    }

    pub fn num_true_levels(&self) -> usize {
        self.num_true_levels
    }

    pub fn num_assigned_levels(&self) -> usize {
        self.num_assigned_levels
    }

    pub fn level_values(&self) -> &[f64] {
        &self.level_values
    }

    /// Value used for an assigned level (1-based) by the score-averaging
    /// baselines. Levels above `M` (abstentions) have no value.
    pub fn assigned_value(&self, level: u32) -> Option<f64> {
        let idx = (level as usize).checked_sub(1)?;
        self.level_values.get(idx).copied()
    }

    pub fn has_abstain(&self) -> bool {
        self.num_assigned_levels > self.num_true_levels
    }
}

/// One judge-assigned score. `assigned_level` is 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub question_id: String,
    pub judge_id: String,
    pub candidate_id: String,
    #[serde(rename = "stratum", default = "default_stratum")]
    pub stratum_id: String,
    #[serde(rename = "level")]
    pub assigned_level: u32,
}

pub const DEFAULT_STRATUM: &str = "default";

pub(crate) fn default_stratum() -> String {
    DEFAULT_STRATUM.to_string()
}

impl ScoreRecord {
    pub fn new(
        question_id: impl Into<String>,
        judge_id: impl Into<String>,
        candidate_id: impl Into<String>,
        stratum_id: impl Into<String>,
        assigned_level: u32,
    ) -> Self {
        Self {
            question_id: question_id.into(),
            judge_id: judge_id.into(),
            candidate_id: candidate_id.into(),
            stratum_id: stratum_id.into(),
            assigned_level,
        }
    }
}

/// All judge-assigned scores plus the family maps used for the
/// self-judging filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreDataset {
    pub rubric: RubricSpec,
    pub records: Vec<ScoreRecord>,
    pub judge_family: BTreeMap<String, String>,
    pub candidate_family: BTreeMap<String, String>,
}

impl ScoreDataset {
    /// Builds a dataset, giving every judge and candidate that lacks a family
    /// entry its own id as family.
    pub fn new(
        rubric: RubricSpec,
        records: Vec<ScoreRecord>,
        mut judge_family: BTreeMap<String, String>,
        mut candidate_family: BTreeMap<String, String>,
    ) -> Self {
        for r in &records {
            judge_family
                .entry(r.judge_id.clone())
                .or_insert_with(|| r.judge_id.clone());
            candidate_family
                .entry(r.candidate_id.clone())
                .or_insert_with(|| r.candidate_id.clone());
        }
        Self {
            rubric,
            records,
            judge_family,
            candidate_family,
        }
    }

    pub fn from_records(rubric: RubricSpec, records: Vec<ScoreRecord>) -> Self {
        Self::new(rubric, records, BTreeMap::new(), BTreeMap::new())
    }

    /// Sorted candidate ids appearing in the records or the family map.
    pub fn candidates(&self) -> Vec<String> {
        let mut set: BTreeSet<&str> = self.candidate_family.keys().map(String::as_str).collect();
        set.extend(self.records.iter().map(|r| r.candidate_id.as_str()));
        set.into_iter().map(str::to_string).collect()
    }

    pub fn judges(&self) -> Vec<String> {
        let mut set: BTreeSet<&str> = self.judge_family.keys().map(String::as_str).collect();
        set.extend(self.records.iter().map(|r| r.judge_id.as_str()));
        set.into_iter().map(str::to_string).collect()
    }

    pub fn strata(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.records.iter().map(|r| r.stratum_id.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    /// True when the judge and candidate share a model family.
    pub fn is_self_judged(&self, judge_id: &str, candidate_id: &str) -> bool {
        match (
            self.judge_family.get(judge_id),
            self.candidate_family.get(candidate_id),
        ) {
            (Some(a), Some(b)) => a == b,
            _ => false,
        }
    }

    /// Records of one stratum, keeping rubric and family maps.
    pub fn stratum(&self, stratum_id: &str) -> ScoreDataset {
        ScoreDataset {
            rubric: self.rubric.clone(),
            records: self
                .records
                .iter()
                .filter(|r| r.stratum_id == stratum_id)
                .cloned()
                .collect(),
            judge_family: self.judge_family.clone(),
            candidate_family: self.candidate_family.clone(),
        }
    }

    /// Number of distinct questions per stratum.
    pub fn questions_per_stratum(&self) -> BTreeMap<String, usize> {
        let mut sets: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for r in &self.records {
            sets.entry(&r.stratum_id).or_default().insert(&r.question_id);
        }
        sets.into_iter()
            .map(|(s, q)| (s.to_string(), q.len()))
            .collect()
    }
}

fn check_distribution(weights: &[f64]) -> Result<(), ModelError> {
    let sum: f64 = weights.iter().sum();
    let in_range = weights
        .iter()
        .all(|w| w.is_finite() && (-SIMPLEX_TOL..=1.0 + SIMPLEX_TOL).contains(w));
    if !in_range || (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(ModelError::NotADistribution { sum });
    }
    Ok(())
}

/// Distribution of a candidate's true scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct PrevalenceVector(Vec<f64>);

impl PrevalenceVector {
    pub fn new(weights: Vec<f64>) -> Result<Self, ModelError> {
        check_distribution(&weights)?;
        Ok(Self(weights))
    }

    /// Skips validation; for values already known to lie on the simplex.
    pub(crate) fn new_unchecked(weights: Vec<f64>) -> Self {
        Self(weights)
    }

    pub fn uniform(levels: usize) -> Self {
        Self(vec![1.0 / levels as f64; levels])
    }

    pub fn unit(levels: usize, at: usize) -> Self {
        let mut w = vec![0.0; levels];
        w[at] = 1.0;
        Self(w)
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<f64>> for PrevalenceVector {
    type Error = ModelError;
    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<PrevalenceVector> for Vec<f64> {
    fn from(p: PrevalenceVector) -> Self {
        p.0
    }
}

/// Distribution of judge-assigned scores over the `M'` assigned levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct MarginalScoreDistribution(Vec<f64>);

impl MarginalScoreDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, ModelError> {
        check_distribution(&probs)?;
        Ok(Self(probs))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Empirical distribution from level counts (0-based index per level).
    pub fn from_counts(counts: &[u64]) -> Option<Self> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return None;
        }
        Some(Self(
            counts.iter().map(|&c| c as f64 / total as f64).collect(),
        ))
    }
}

impl TryFrom<Vec<f64>> for MarginalScoreDistribution {
    type Error = ModelError;
    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<MarginalScoreDistribution> for Vec<f64> {
    fn from(p: MarginalScoreDistribution) -> Self {
        p.0
    }
}

/// Columns of a judge's confusion matrix: `columns[m]` is the distribution of
/// assigned levels given true level `m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeVertices {
    columns: Vec<Vec<f64>>,
    monotone: bool,
}

impl JudgeVertices {
    pub fn new(columns: Vec<Vec<f64>>) -> Result<Self, ModelError> {
        let assigned = columns.first().map_or(0, Vec::len);
        for col in &columns {
            if col.len() != assigned {
                return Err(ModelError::DimensionMismatch {
                    expected: assigned,
                    got: col.len(),
                });
            }
            check_distribution(col)?;
        }
        let monotone = columns.windows(2).all(|w| w[1][0] < w[0][0]);
        Ok(Self { columns, monotone })
    }

    /// The perfect judge: column `m` is the unit vector at assigned level `m`.
    pub fn identity(true_levels: usize, assigned_levels: usize) -> Self {
        let columns = (0..true_levels)
            .map(|m| {
                let mut c = vec![0.0; assigned_levels];
                c[m] = 1.0;
                c
            })
            .collect();
        Self::new(columns).expect("identity columns are distributions")
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    pub fn column(&self, m: usize) -> &[f64] {
        &self.columns[m]
    }

    pub fn num_true_levels(&self) -> usize {
        self.columns.len()
    }

    pub fn num_assigned_levels(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    /// Whether the probability of the lowest assigned level strictly
    /// decreases with the true level.
    pub fn is_monotone(&self) -> bool {
        self.monotone
    }
}

/// Model hyperparameters: random-effect magnitude `omega`, judge-quality
/// concentration `beta_max`, random-effect direction `delta_dir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub omega: f64,
    pub beta_max: f64,
    pub delta_dir: Vec<f64>,
    pub self_adjust: bool,
}

impl Hyperparameters {
    pub fn new(
        omega: f64,
        beta_max: f64,
        delta_dir: Vec<f64>,
        self_adjust: bool,
    ) -> Result<Self, ModelError> {
        if !(omega.is_finite() && omega >= 0.0) {
            return Err(ModelError::BadHyperparameter(format!("omega = {omega}")));
        }
        if !(beta_max.is_finite() && beta_max >= 0.0) {
            return Err(ModelError::BadHyperparameter(format!(
                "beta_max = {beta_max}"
            )));
        }
        if delta_dir.is_empty() || delta_dir.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(ModelError::BadHyperparameter(
                "delta entries must be positive".into(),
            ));
        }
        Ok(Self {
            omega,
            beta_max,
            delta_dir,
            self_adjust,
        })
    }

    /// `omega = 0`, `beta_max = 0`, default direction, self-adjust on.
    pub fn primary(true_levels: usize) -> Self {
        Self {
            omega: 0.0,
            beta_max: 0.0,
            delta_dir: default_delta(true_levels),
            self_adjust: true,
        }
    }

    pub fn with_omega(mut self, omega: f64) -> Self {
        self.omega = omega;
        self
    }

    pub fn with_beta_max(mut self, beta_max: f64) -> Self {
        self.beta_max = beta_max;
        self
    }

    pub fn with_self_adjust(mut self, on: bool) -> Self {
        self.self_adjust = on;
        self
    }
}

/// Random-effect direction weighted toward high levels: `[1, 4, 10]` for
/// three levels, and `1 + 9 (m/(M-1))^log2(3)` in general.
pub fn default_delta(true_levels: usize) -> Vec<f64> {
    if true_levels == 3 {
        return vec![1.0, 4.0, 10.0];
    }
    let denom = (true_levels.max(2) - 1) as f64;
    (0..true_levels)
        .map(|m| 1.0 + 9.0 * (m as f64 / denom).powf(3f64.log2()))
        .collect()
}

/// Candidate order, best first, with exact ties grouped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub order: Vec<String>,
    pub tie_groups: Vec<Vec<String>>,
}

impl Ranking {
    /// Ranking with no ties.
    pub fn strict(order: Vec<String>) -> Result<Self, ModelError> {
        let tie_groups = order.iter().map(|id| vec![id.clone()]).collect();
        Self::with_groups(order, tie_groups)
    }

    pub fn with_groups(
        order: Vec<String>,
        tie_groups: Vec<Vec<String>>,
    ) -> Result<Self, ModelError> {
        let ids: BTreeSet<&String> = order.iter().collect();
        if ids.len() != order.len() {
            return Err(ModelError::BadRanking("duplicate id in order".into()));
        }
        let flat: Vec<&String> = tie_groups.iter().flatten().collect();
        let grouped: BTreeSet<&String> = flat.iter().copied().collect();
        if grouped.len() != flat.len() || grouped != ids {
            return Err(ModelError::BadRanking(
                "tie groups must partition the ranked ids".into(),
            ));
        }
        Ok(Self { order, tie_groups })
    }

    /// Orders ids by descending score; scores within `tol` of the previous
    /// group's first score join that group.
    pub fn from_scores(scores: &BTreeMap<String, f64>, tol: f64) -> Self {
        let mut items: Vec<(&String, f64)> = scores.iter().map(|(k, v)| (k, *v)).collect();
        items.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut groups: Vec<Vec<String>> = Vec::new();
        let mut anchor = f64::NAN;
        for (id, s) in items {
            if !groups.is_empty() && (anchor - s).abs() <= tol {
                groups.last_mut().unwrap().push(id.clone());
            } else {
                anchor = s;
                groups.push(vec![id.clone()]);
            }
        }
        let order = groups.iter().flatten().cloned().collect();
        Self {
            order,
            tie_groups: groups,
        }
    }

    /// Rank of each id: tied ids share the best (minimum) rank.
    pub fn ranks(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        let mut next = 1;
        for g in &self.tie_groups {
            for id in g {
                out.insert(id.clone(), next);
            }
            next += g.len();
        }
        out
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn has_ties(&self) -> bool {
        self.tie_groups.iter().any(|g| g.len() > 1)
    }
}

/// Findings of [`validate_dataset`]. Never an error: callers decide what is
/// fatal.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub no_records: bool,
    pub duplicate_triples: Vec<(String, String, String)>,
    /// Indices of records whose level is outside `[1, M']`.
    pub out_of_range: Vec<usize>,
    pub empty_ids: Vec<usize>,
    pub judges_without_records: Vec<String>,
    pub missing_family: Vec<String>,
    /// Candidates whose every record is self-judged.
    pub self_judged_only: Vec<String>,
    /// Set when `self_adjust` is on and some candidate loses all records.
    pub unrankable_after_self_filter: Vec<String>,
    /// Binary rubric only: (judge, top candidate, bottom candidate) where one
    /// candidate got only top scores and another only bottom scores, which
    /// under constancy forces a perfect judge.
    pub perfect_judge_evidence: Vec<(String, String, String)>,
}

impl ValidationReport {
    /// No structural problems (warnings about self-judging excluded).
    pub fn is_valid(&self) -> bool {
        !self.no_records
            && self.duplicate_triples.is_empty()
            && self.out_of_range.is_empty()
            && self.empty_ids.is_empty()
            && self.missing_family.is_empty()
    }

    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.no_records {
            w.push("no records".to_string());
        }
        for (q, j, k) in &self.duplicate_triples {
            w.push(format!("duplicate record (question {q}, judge {j}, candidate {k})"));
        }
        if !self.out_of_range.is_empty() {
            w.push(format!("{} records with out-of-range level", self.out_of_range.len()));
        }
        if !self.empty_ids.is_empty() {
            w.push(format!("{} records with empty ids", self.empty_ids.len()));
        }
        for j in &self.judges_without_records {
            w.push(format!("judge {j} has no records"));
        }
        for id in &self.missing_family {
            w.push(format!("{id} has no family entry"));
        }
        for k in &self.unrankable_after_self_filter {
            w.push(format!("candidate {k} unrankable after self-filter"));
        }
        for (j, hi, lo) in &self.perfect_judge_evidence {
            w.push(format!(
                "judge {j}: {hi} all top scores and {lo} all bottom scores (implies a perfect judge)"
            ));
        }
        w
    }
}

/// Reports structural problems in a dataset.
pub fn validate_dataset(ds: &ScoreDataset, self_adjust: bool) -> ValidationReport {
    let mut report = ValidationReport {
        no_records: ds.records.is_empty(),
        ..Default::default()
    };
    let max_level = ds.rubric.num_assigned_levels() as u32;

    let mut seen = BTreeSet::new();
    let mut reported = BTreeSet::new();
    for (i, r) in ds.records.iter().enumerate() {
        let key = (
            r.question_id.clone(),
            r.judge_id.clone(),
            r.candidate_id.clone(),
        );
        if !seen.insert(key.clone()) && reported.insert(key.clone()) {
            report.duplicate_triples.push(key);
        }
        if r.assigned_level == 0 || r.assigned_level > max_level {
            report.out_of_range.push(i);
        }
        if r.question_id.is_empty() || r.judge_id.is_empty() || r.candidate_id.is_empty() {
            report.empty_ids.push(i);
        }
    }

    let judged: BTreeSet<&str> = ds.records.iter().map(|r| r.judge_id.as_str()).collect();
    report.judges_without_records = ds
        .judge_family
        .keys()
        .filter(|j| !judged.contains(j.as_str()))
        .cloned()
        .collect();

    let mut missing = BTreeSet::new();
    for r in &ds.records {
        if !ds.judge_family.contains_key(&r.judge_id) {
            missing.insert(r.judge_id.clone());
        }
        if !ds.candidate_family.contains_key(&r.candidate_id) {
            missing.insert(r.candidate_id.clone());
        }
    }
    report.missing_family = missing.into_iter().collect();

    let mut surviving: BTreeMap<&str, usize> = BTreeMap::new();
    let mut total: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &ds.records {
        *total.entry(&r.candidate_id).or_default() += 1;
        let s = surviving.entry(&r.candidate_id).or_default();
        if !ds.is_self_judged(&r.judge_id, &r.candidate_id) {
            *s += 1;
        }
    }
    report.self_judged_only = total
        .keys()
        .filter(|k| surviving[*k] == 0)
        .map(|k| k.to_string())
        .collect();
    if self_adjust {
        report.unrankable_after_self_filter = report.self_judged_only.clone();
    }

    if ds.rubric.num_true_levels() == 2 {
        report.perfect_judge_evidence = perfect_judge_evidence(ds);
    }
    report
}

fn perfect_judge_evidence(ds: &ScoreDataset) -> Vec<(String, String, String)> {
    // (judge, candidate) -> (count of level 1, count of level 2, total)
    let mut tallies: BTreeMap<(&str, &str), (usize, usize, usize)> = BTreeMap::new();
    for r in &ds.records {
        let t = tallies.entry((&r.judge_id, &r.candidate_id)).or_default();
        match r.assigned_level {
            1 => t.0 += 1,
            2 => t.1 += 1,
            _ => {}
        }
        t.2 += 1;
    }
    let mut out = Vec::new();
    for judge in ds.judges() {
        let mut top = None;
        let mut bottom = None;
        for ((j, k), (lo, hi, n)) in &tallies {
            if *j != judge || *n == 0 {
                continue;
            }
            if *hi == *n && top.is_none() {
                top = Some(k.to_string());
            }
            if *lo == *n && bottom.is_none() {
                bottom = Some(k.to_string());
            }
        }
        if let (Some(hi), Some(lo)) = (top, bottom) {
            out.push((judge, hi, lo));
        }
    }
    out
}
