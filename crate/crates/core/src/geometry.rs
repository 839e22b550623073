//! Judges and candidates as points on the probability simplex.
//!
//! A judge is described by its vertices `θ_m` (distribution of assigned
//! levels given true level `m`); a candidate's assigned-score distribution is
//! the mixture `γ = Σ_m π_m θ_m`, so its prevalences `π` are the barycentric
//! coordinates of `γ` with respect to the judge's vertices.
//!
//! For two-level rubrics the order of candidates along the segment between
//! the vertices identifies their ranking ([`rank_binary_strong`],
//! [`rank_binary_moderate`]). With three levels the vertices can be moved so
//! that two candidates with fixed marginals swap their expected scores;
//! [`make_nonidentifiability_witness`] builds such a configuration explicitly.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    JudgeVertices, MarginalScoreDistribution, ModelError, PrevalenceVector, Ranking, RubricSpec,
};

/// Barycentric coordinates below `-HULL_TOL` mean the point is outside the
/// convex hull of the vertices.
pub const HULL_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("judge vertices are affinely dependent")]
    DegenerateVertices,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("need two core candidates with distinct scores under the reference judge")]
    InsufficientCore,
    #[error("candidate {0} has no eligible judge")]
    UnscoredCandidate(String),
    #[error("witness construction needs {0}")]
    WitnessPrecondition(String),
    #[error("no sign flip found: {0}")]
    NoFlipFound(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Barycentric coordinates of a point, with a flag for points outside the
/// hull of the vertices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarycentricCoords {
    pub coords: Vec<f64>,
    pub outside_hull: bool,
    /// Norm of `Θπ - γ`; nonzero only when `M' > M` and the point is off the
    /// affine hull of the vertices.
    pub residual: f64,
}

impl BarycentricCoords {
    /// The coordinates as a prevalence vector, when the point is enveloped.
    pub fn to_prevalence(&self) -> Option<PrevalenceVector> {
        if self.outside_hull {
            return None;
        }
        let clipped: Vec<f64> = self.coords.iter().map(|c| c.max(0.0)).collect();
        let s: f64 = clipped.iter().sum();
        PrevalenceVector::new(clipped.into_iter().map(|c| c / s).collect()).ok()
    }
}

fn vertex_matrix(vertices: &JudgeVertices) -> DMatrix<f64> {
    let m = vertices.num_true_levels();
    let a = vertices.num_assigned_levels();
    DMatrix::from_fn(a, m, |i, j| vertices.column(j)[i])
}

/// Solves `Θπ = γ` with `Σπ = 1`.
pub fn barycentric_coords(
    point: &MarginalScoreDistribution,
    vertices: &JudgeVertices,
) -> Result<BarycentricCoords, GeometryError> {
    let m = vertices.num_true_levels();
    let a = vertices.num_assigned_levels();
    if point.len() != a {
        return Err(GeometryError::DimensionMismatch {
            expected: a,
            got: point.len(),
        });
    }
    let theta = vertex_matrix(vertices);
    // Augment with a row of ones so the affine constraint is part of the
    // system.
    let aug = DMatrix::from_fn(a + 1, m, |i, j| if i < a { theta[(i, j)] } else { 1.0 });
    let rhs = DVector::from_fn(a + 1, |i, _| if i < a { point.probs()[i] } else { 1.0 });

    let singular = aug.singular_values();
    let smax = singular.max();
    let smin = singular.min();
    if !(smin > 1e-12 * smax.max(1.0)) {
        return Err(GeometryError::DegenerateVertices);
    }
    let qr = aug.clone().qr();
    let r = qr.r();
    let q = qr.q();
    let mut sol = r
        .solve_upper_triangular(&(q.transpose() * &rhs))
        .ok_or(GeometryError::DegenerateVertices)?;
    // One step of iterative refinement.
    let resid = &rhs - &aug * &sol;
    if let Some(corr) = r.solve_upper_triangular(&(q.transpose() * resid)) {
        sol += corr;
    }
    let coords: Vec<f64> = sol.iter().copied().collect();
    let residual = (&theta * &sol - DVector::from_column_slice(point.probs())).norm();
    let outside_hull = coords.iter().any(|&c| c < -HULL_TOL);
    Ok(BarycentricCoords {
        coords,
        outside_hull,
        residual,
    })
}

/// Three-level barycentric coordinates as ratios of signed subtriangle areas,
/// after dropping the (implied) first coordinate of every point.
pub fn area_ratio_coords(
    point: &MarginalScoreDistribution,
    vertices: &JudgeVertices,
) -> Result<[f64; 3], GeometryError> {
    if vertices.num_true_levels() != 3 || vertices.num_assigned_levels() != 3 || point.len() != 3
    {
        return Err(GeometryError::DimensionMismatch {
            expected: 3,
            got: point.len(),
        });
    }
    let proj = |p: &[f64]| (p[1], p[2]);
    let signed = |a: (f64, f64), b: (f64, f64), c: (f64, f64)| {
        0.5 * ((b.0 - a.0) * (c.1 - a.1) - (c.0 - a.0) * (b.1 - a.1))
    };
    let g = proj(point.probs());
    let t: Vec<(f64, f64)> = vertices.columns().iter().map(|c| proj(c)).collect();
    let total = signed(t[0], t[1], t[2]);
    if total.abs() < 1e-15 {
        return Err(GeometryError::DegenerateVertices);
    }
    Ok([
        signed(g, t[1], t[2]) / total,
        signed(t[0], g, t[2]) / total,
        signed(t[0], t[1], g) / total,
    ])
}

/// `γ = Θπ`.
pub fn mixture(
    vertices: &JudgeVertices,
    prev: &PrevalenceVector,
) -> Result<MarginalScoreDistribution, GeometryError> {
    if prev.len() != vertices.num_true_levels() {
        return Err(GeometryError::DimensionMismatch {
            expected: vertices.num_true_levels(),
            got: prev.len(),
        });
    }
    let a = vertices.num_assigned_levels();
    let mut out = vec![0.0; a];
    for (col, w) in vertices.columns().iter().zip(prev.weights()) {
        for (o, c) in out.iter_mut().zip(col) {
            *o += w * c;
        }
    }
    // Rounding can leave the sum a few ulps off; renormalize.
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|o| *o /= s);
    Ok(MarginalScoreDistribution::new(out)?)
}

/// `Σ_m value_m π_m`.
pub fn expected_score(prev: &PrevalenceVector, rubric: &RubricSpec) -> f64 {
    prev.weights()
        .iter()
        .zip(rubric.level_values())
        .map(|(p, v)| p * v)
        .sum()
}

/// Two-level ranking under strong constancy: order by the probability of the
/// top true level's assigned score. Exact ties share a group.
pub fn rank_binary_strong(gammas: &BTreeMap<String, MarginalScoreDistribution>) -> Ranking {
    let scores: BTreeMap<String, f64> = gammas
        .iter()
        .map(|(k, g)| (k.clone(), g.probs()[1]))
        .collect();
    Ranking::from_scores(&scores, 0.0)
}

/// Result of [`rank_binary_moderate`]: the ranking and each candidate's
/// position on the common scale defined by the reference pair (0 at the
/// lower reference, 1 at the upper).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommonScaleRanking {
    pub ranking: Ranking,
    pub scale: BTreeMap<String, f64>,
    pub reference_low: String,
    pub reference_high: String,
}

/// Two-level ranking under moderate constancy. Core candidates are those
/// every judge may score. The reference pair is the core pair with the widest
/// separation under the first judge; every candidate is placed relative to
/// that pair using the judges allowed to score it.
pub fn rank_binary_moderate(
    per_judge_gammas: &BTreeMap<(String, String), MarginalScoreDistribution>,
    judge_family: &BTreeMap<String, String>,
    candidate_family: &BTreeMap<String, String>,
) -> Result<CommonScaleRanking, GeometryError> {
    let judges: BTreeSet<&String> = per_judge_gammas.keys().map(|(j, _)| j).collect();
    let candidates: BTreeSet<&String> = per_judge_gammas.keys().map(|(_, k)| k).collect();
    let eligible = |j: &String, k: &String| -> Option<f64> {
        let same = match (judge_family.get(j), candidate_family.get(k)) {
            (Some(a), Some(b)) => a == b,
            _ => false,
        };
        if same {
            return None;
        }
        per_judge_gammas
            .get(&(j.clone(), k.clone()))
            .map(|g| g.probs()[1])
    };

    let core: Vec<&String> = candidates
        .iter()
        .copied()
        .filter(|k| judges.iter().all(|j| eligible(j, k).is_some()))
        .collect();
    let reference_judge = *judges.iter().next().ok_or(GeometryError::InsufficientCore)?;

    let mut best: Option<(&String, &String, f64)> = None;
    for (i, a) in core.iter().enumerate() {
        for b in &core[i + 1..] {
            let ga = eligible(reference_judge, a).unwrap();
            let gb = eligible(reference_judge, b).unwrap();
            let sep = (ga - gb).abs();
            if sep > best.map_or(0.0, |t| t.2) {
                best = Some(if ga < gb { (*a, *b, sep) } else { (*b, *a, sep) });
            }
        }
    }
    let Some((low, high, _)) = best else {
        // No separation among the cores: only a full tie is still rankable.
        let all_tied = core.first().is_some_and(|c0| {
            judges.iter().all(|j| {
                let g0 = eligible(j, c0);
                candidates
                    .iter()
                    .all(|k| eligible(j, k).is_none_or(|g| Some(g) == g0))
            })
        });
        if !all_tied {
            return Err(GeometryError::InsufficientCore);
        }
        let scale: BTreeMap<String, f64> = candidates.iter().map(|k| (k.to_string(), 0.0)).collect();
        let c0 = core[0].clone();
        return Ok(CommonScaleRanking {
            ranking: Ranking::from_scores(&scale, 0.0),
            scale,
            reference_low: c0.clone(),
            reference_high: c0,
        });
    };

    let mut scale = BTreeMap::new();
    for k in &candidates {
        let mut acc = 0.0;
        let mut n = 0usize;
        for j in &judges {
            let (Some(gk), Some(gl), Some(gh)) =
                (eligible(j, k), eligible(j, low), eligible(j, high))
            else {
                continue;
            };
            if gh == gl {
                continue;
            }
            acc += (gk - gl) / (gh - gl);
            n += 1;
        }
        if n == 0 {
            return Err(GeometryError::UnscoredCandidate(k.to_string()));
        }
        scale.insert(k.to_string(), acc / n as f64);
    }
    Ok(CommonScaleRanking {
        ranking: Ranking::from_scores(&scale, 1e-12),
        scale,
        reference_low: low.clone(),
        reference_high: high.clone(),
    })
}

/// True iff every marginal has all barycentric coordinates `>= -HULL_TOL`.
pub fn envelope_feasible(
    gammas: &[MarginalScoreDistribution],
    vertices: &JudgeVertices,
) -> Result<bool, GeometryError> {
    for g in gammas {
        if barycentric_coords(g, vertices)?.outside_hull {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Two judge configurations `Θ - hΔ` and `Θ + hΔ` that reproduce the same
/// pair of marginals while ordering the two candidates' expected scores
/// oppositely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonidentifiabilityWitness {
    pub base_vertices: JudgeVertices,
    /// `Δ` stored column-wise like the vertices; every column sums to zero.
    pub perturbation: Vec<Vec<f64>>,
    pub step: f64,
    pub prevalence_pair: (PrevalenceVector, PrevalenceVector),
    pub shared_marginals: (MarginalScoreDistribution, MarginalScoreDistribution),
    pub direction: [f64; 3],
    pub dual_vector: [f64; 3],
    pub dual_mean: f64,
    pub epsilon: f64,
    pub minus_vertices: JudgeVertices,
    pub plus_vertices: JudgeVertices,
    /// Prevalences `(Θ ∓ hΔ)⁻¹γ_k` induced in each configuration.
    pub minus_prevalences: (PrevalenceVector, PrevalenceVector),
    pub plus_prevalences: (PrevalenceVector, PrevalenceVector),
    /// Expected-score difference (candidate 1 minus candidate 2) under
    /// `Θ - hΔ` and `Θ + hΔ`.
    pub score_difference: (f64, f64),
    /// d/dh of the score difference at `h = 0`.
    pub derivative_at_zero: f64,
}

const WITNESS_WEIGHTS: [f64; 3] = [0.0, 1.0, 2.0];
const WITNESS_DIRECTION: [f64; 3] = [1.0, -2.0, 1.0];
const WITNESS_GRID: usize = 10_000;

fn to_matrix3(v: &JudgeVertices) -> Matrix3<f64> {
    Matrix3::from_fn(|i, m| v.column(m)[i])
}

fn columns_of(m: &Matrix3<f64>) -> Vec<Vec<f64>> {
    (0..3).map(|c| (0..3).map(|r| m[(r, c)]).collect()).collect()
}

struct WitnessProbe {
    minus: Matrix3<f64>,
    plus: Matrix3<f64>,
    pi_minus: (Vector3<f64>, Vector3<f64>),
    pi_plus: (Vector3<f64>, Vector3<f64>),
    diff_minus: f64,
    diff_plus: f64,
}

fn probe(
    theta: &Matrix3<f64>,
    delta: &Matrix3<f64>,
    gammas: (&Vector3<f64>, &Vector3<f64>),
    h: f64,
) -> Option<WitnessProbe> {
    let weights = Vector3::from(WITNESS_WEIGHTS);
    let minus = theta - delta * h;
    let plus = theta + delta * h;
    let valid = |m: &Matrix3<f64>| m.iter().all(|&x| x > 0.0 && x < 1.0);
    if !valid(&minus) || !valid(&plus) {
        return None;
    }
    let inv_m = minus.try_inverse()?;
    let inv_p = plus.try_inverse()?;
    let pi_minus = (inv_m * gammas.0, inv_m * gammas.1);
    let pi_plus = (inv_p * gammas.0, inv_p * gammas.1);
    let nonneg = |v: &Vector3<f64>| v.iter().all(|&x| x >= 0.0);
    if !(nonneg(&pi_minus.0) && nonneg(&pi_minus.1) && nonneg(&pi_plus.0) && nonneg(&pi_plus.1)) {
        return None;
    }
    let diff_minus = weights.dot(&(pi_minus.0 - pi_minus.1));
    let diff_plus = weights.dot(&(pi_plus.0 - pi_plus.1));
    if !(diff_minus * diff_plus < 0.0) {
        return None;
    }
    Some(WitnessProbe {
        minus,
        plus,
        pi_minus,
        pi_plus,
        diff_minus,
        diff_plus,
    })
}

fn renormalized(v: &Vector3<f64>) -> Result<PrevalenceVector, ModelError> {
    let s = v.sum();
    PrevalenceVector::new(v.iter().map(|x| x.max(0.0) / s).collect())
}

/// Builds the three-level non-identifiability witness around `base`.
///
/// With `π̄` the centroid and `a = (1,-2,1)`, the candidates are
/// `π_{1,2} = π̄ ± εa/2` and `γ_k = Θπ_k`; `u = Θ⁻ᵀ(0,1,2)`,
/// `Δ = (u - ū1)aᵀ`. The returned step `h` is the largest one found (on a
/// grid refined by bisection) for which both perturbed configurations are
/// valid, induce valid prevalences, and disagree on the sign of the
/// expected-score difference.
pub fn make_nonidentifiability_witness(
    base: &JudgeVertices,
    epsilon: f64,
) -> Result<NonidentifiabilityWitness, GeometryError> {
    if base.num_true_levels() != 3 || base.num_assigned_levels() != 3 {
        return Err(GeometryError::WitnessPrecondition(
            "three true and three assigned levels".into(),
        ));
    }
    if base.columns().iter().flatten().any(|&x| x <= 0.0) {
        return Err(GeometryError::WitnessPrecondition(
            "vertices strictly inside the simplex".into(),
        ));
    }
    if !(epsilon > 0.0 && epsilon <= 1.0 / 3.0) {
        return Err(GeometryError::WitnessPrecondition(
            "0 < epsilon <= 1/3 so both prevalences stay on the simplex".into(),
        ));
    }
    let theta = to_matrix3(base);
    let theta_inv = theta
        .try_inverse()
        .filter(|_| theta.determinant().abs() > 1e-12)
        .ok_or(GeometryError::DegenerateVertices)?;

    let a = Vector3::from(WITNESS_DIRECTION);
    let centroid = Vector3::repeat(1.0 / 3.0);
    let pi1 = centroid + a * (epsilon / 2.0);
    let pi2 = centroid - a * (epsilon / 2.0);
    let g1 = theta * pi1;
    let g2 = theta * pi2;

    let u = theta_inv.transpose() * Vector3::from(WITNESS_WEIGHTS);
    let u_bar = u.sum() / 3.0;
    let centered = u - Vector3::repeat(u_bar);
    let delta = centered * a.transpose();

    // d/dh (0,1,2)(Θ+hΔ)⁻¹(γ₁-γ₂) at h = 0 equals -uᵀΔ(εa).
    let derivative = -(u.transpose() * delta * (a * epsilon))[(0, 0)];
    if derivative.abs() < 1e-12 {
        return Err(GeometryError::NoFlipFound(format!(
            "score-difference derivative {derivative:e} is numerically zero"
        )));
    }

    // Largest step keeping every entry of Θ ± hΔ inside (0, 1).
    let mut h_max = f64::INFINITY;
    for (t, d) in theta.iter().zip(delta.iter()) {
        if d.abs() > 0.0 {
            h_max = h_max.min(t.min(1.0 - t) / d.abs());
        }
    }
    if !h_max.is_finite() || h_max <= 0.0 {
        return Err(GeometryError::NoFlipFound("no valid step".into()));
    }

    let ok = |h: f64| probe(&theta, &delta, (&g1, &g2), h);
    let mut found = None;
    for i in (1..=WITNESS_GRID).rev() {
        let h = h_max * i as f64 / WITNESS_GRID as f64;
        if ok(h).is_some() {
            found = Some(i);
            break;
        }
    }
    let i = found.ok_or_else(|| GeometryError::NoFlipFound("grid search found no step".into()))?;
    let mut lo = h_max * i as f64 / WITNESS_GRID as f64;
    if i < WITNESS_GRID {
        let mut hi = h_max * (i + 1) as f64 / WITNESS_GRID as f64;
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if ok(mid).is_some() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    }
    let p = ok(lo).expect("lower bracket is valid");

    Ok(NonidentifiabilityWitness {
        base_vertices: base.clone(),
        perturbation: columns_of(&delta),
        step: lo,
        prevalence_pair: (renormalized(&pi1)?, renormalized(&pi2)?),
        shared_marginals: (
            MarginalScoreDistribution::new(g1.iter().copied().collect())?,
            MarginalScoreDistribution::new(g2.iter().copied().collect())?,
        ),
        direction: WITNESS_DIRECTION,
        dual_vector: [u[0], u[1], u[2]],
        dual_mean: u_bar,
        epsilon,
        minus_vertices: JudgeVertices::new(columns_of(&p.minus))?,
        plus_vertices: JudgeVertices::new(columns_of(&p.plus))?,
        minus_prevalences: (renormalized(&p.pi_minus.0)?, renormalized(&p.pi_minus.1)?),
        plus_prevalences: (renormalized(&p.pi_plus.0)?, renormalized(&p.pi_plus.1)?),
        score_difference: (p.diff_minus, p.diff_plus),
        derivative_at_zero: derivative,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn verts(cols: &[[f64; 3]]) -> JudgeVertices {
        JudgeVertices::new(cols.iter().map(|c| c.to_vec()).collect()).unwrap()
    }

    fn marg(p: &[f64]) -> MarginalScoreDistribution {
        MarginalScoreDistribution::new(p.to_vec()).unwrap()
    }

    fn skewed() -> JudgeVertices {
        verts(&[[0.7, 0.2, 0.1], [0.2, 0.6, 0.2], [0.1, 0.25, 0.65]])
    }

    #[test]
    fn vertex_point_gives_unit_coords() {
        let v = skewed();
        for m in 0..3 {
            let b = barycentric_coords(&marg(v.column(m)), &v).unwrap();
            for (i, c) in b.coords.iter().enumerate() {
                let want = if i == m { 1.0 } else { 0.0 };
                assert!((c - want).abs() < 1e-12);
            }
            assert!(!b.outside_hull);
        }
    }

    #[test]
    fn centroid_gives_thirds() {
        let v = skewed();
        let c: Vec<f64> = (0..3)
            .map(|i| v.columns().iter().map(|col| col[i]).sum::<f64>() / 3.0)
            .collect();
        let b = barycentric_coords(&marg(&c), &v).unwrap();
        for x in b.coords {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_vertices_rejected() {
        let v = verts(&[[0.5, 0.3, 0.2], [0.5, 0.3, 0.2], [0.1, 0.1, 0.8]]);
        assert_eq!(
            barycentric_coords(&marg(&[0.3, 0.3, 0.4]), &v),
            Err(GeometryError::DegenerateVertices)
        );
    }

    #[test]
    fn outside_point_flagged() {
        let v = skewed();
        let b = barycentric_coords(&marg(&[0.0, 0.0, 1.0]), &v).unwrap();
        assert!(b.outside_hull);
        assert!(b.to_prevalence().is_none());
    }

    #[test]
    fn abstain_alphabet_coords() {
        // two true levels, three assigned levels (third = abstain)
        let v = JudgeVertices::new(vec![vec![0.7, 0.1, 0.2], vec![0.1, 0.8, 0.1]]).unwrap();
        let p = PrevalenceVector::new(vec![0.25, 0.75]).unwrap();
        let g = mixture(&v, &p).unwrap();
        let b = barycentric_coords(&g, &v).unwrap();
        assert!((b.coords[0] - 0.25).abs() < 1e-12);
        assert!(b.residual < 1e-12);
    }

    #[test]
    fn mixture_of_unit_is_vertex() {
        let v = skewed();
        let g = mixture(&v, &PrevalenceVector::unit(3, 1)).unwrap();
        assert_eq!(g.probs(), v.column(1));
    }

    #[test]
    fn perfect_judge_mixture_is_identity() {
        let v = JudgeVertices::identity(3, 3);
        let p = PrevalenceVector::new(vec![0.2, 0.3, 0.5]).unwrap();
        assert_eq!(mixture(&v, &p).unwrap().probs(), p.weights());
    }

    #[test]
    fn mixture_dimension_mismatch() {
        let v = skewed();
        assert!(matches!(
            mixture(&v, &PrevalenceVector::uniform(2)),
            Err(GeometryError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn expected_scores() {
        let r = RubricSpec::square(3).unwrap();
        assert_eq!(expected_score(&PrevalenceVector::unit(3, 0), &r), 0.0);
        assert!((expected_score(&PrevalenceVector::uniform(3), &r) - 1.0).abs() < 1e-15);
        let p = PrevalenceVector::new(vec![0.2, 0.3, 0.5]).unwrap();
        // 0*0.2 + 1*0.3 + 2*0.5
        assert!((expected_score(&p, &r) - 1.3).abs() < 1e-15);
    }

    fn binary(top: f64) -> MarginalScoreDistribution {
        marg(&[1.0 - top, top])
    }

    #[test]
    fn strong_binary_orders_by_top_level() {
        let mut g = BTreeMap::new();
        g.insert("B".to_string(), binary(0.5));
        g.insert("C".to_string(), binary(0.1));
        g.insert("A".to_string(), binary(0.9));
        assert_eq!(rank_binary_strong(&g).order, vec!["A", "B", "C"]);
    }

    #[test]
    fn strong_binary_all_equal_is_one_group() {
        let g: BTreeMap<String, _> = ["a", "b", "c"]
            .iter()
            .map(|k| (k.to_string(), binary(0.4)))
            .collect();
        let r = rank_binary_strong(&g);
        assert_eq!(r.tie_groups.len(), 1);
    }

    #[test]
    fn strong_binary_recovers_prevalence_order() {
        // γ = θ₀ + π(θ₁ - θ₀) with θ₁ = 0.9, θ₀ = 0.2
        let pis = [("x", 0.8), ("y", 0.5), ("z", 0.2)];
        let g: BTreeMap<String, _> = pis
            .iter()
            .map(|(k, p)| (k.to_string(), binary(0.2 + 0.7 * p)))
            .collect();
        assert_eq!(rank_binary_strong(&g).order, vec!["x", "y", "z"]);
    }

    fn moderate_fixture(
        pis: &[f64; 4],
    ) -> (
        BTreeMap<(String, String), MarginalScoreDistribution>,
        BTreeMap<String, String>,
        BTreeMap<String, String>,
    ) {
        // judge j scores with θ₀ (top prob. when wrong) and θ₁ (when right)
        let thetas = [("J1", 0.15, 0.85), ("J2", 0.3, 0.7)];
        let names = ["C1", "C2", "C3", "C4"];
        let mut g = BTreeMap::new();
        for (j, t0, t1) in thetas {
            for (k, p) in names.iter().zip(pis) {
                g.insert((j.to_string(), k.to_string()), binary(t0 + p * (t1 - t0)));
            }
        }
        let jf = [("J1", "f1"), ("J2", "f2")]
            .iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect();
        let cf = [("C1", "f1"), ("C2", "f2"), ("C3", "f3"), ("C4", "f4")]
            .iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect();
        (g, jf, cf)
    }

    #[test]
    fn moderate_binary_recovers_true_order() {
        let (g, jf, cf) = moderate_fixture(&[0.7, 0.2, 0.4, 0.6]);
        let r = rank_binary_moderate(&g, &jf, &cf).unwrap();
        assert_eq!(r.ranking.order, vec!["C1", "C4", "C3", "C2"]);
        assert_eq!(r.reference_low, "C3");
        assert_eq!(r.reference_high, "C4");
    }

    #[test]
    fn moderate_ratio_identity() {
        let pis = [0.7, 0.2, 0.4, 0.6];
        let (g, _, _) = moderate_fixture(&pis);
        let top = |k: &str| g[&("J1".to_string(), k.to_string())].probs()[1];
        let lhs = (top("C2") - top("C3")) / (top("C4") - top("C3"));
        let rhs = (pis[1] - pis[2]) / (pis[3] - pis[2]);
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn moderate_equal_prevalences_is_one_group() {
        let (g, jf, cf) = moderate_fixture(&[0.5, 0.5, 0.5, 0.5]);
        let r = rank_binary_moderate(&g, &jf, &cf).unwrap();
        assert_eq!(r.ranking.tie_groups.len(), 1);
    }

    #[test]
    fn moderate_tied_cores_with_distinct_others_is_insufficient() {
        let (g, jf, cf) = moderate_fixture(&[0.9, 0.2, 0.5, 0.5]);
        assert_eq!(
            rank_binary_moderate(&g, &jf, &cf),
            Err(GeometryError::InsufficientCore)
        );
    }

    #[test]
    fn moderate_ties_grouped() {
        // cores distinct, the two judge-candidates share a prevalence with C3
        let (g, jf, cf) = moderate_fixture(&[0.4, 0.4, 0.4, 0.6]);
        let r = rank_binary_moderate(&g, &jf, &cf).unwrap();
        assert_eq!(r.ranking.tie_groups.len(), 2);
        assert_eq!(r.ranking.tie_groups[0], vec!["C4"]);
    }

    #[test]
    fn envelope_checks() {
        let corners = JudgeVertices::identity(3, 3);
        assert!(envelope_feasible(&[marg(&[0.1, 0.2, 0.7]), marg(&[1.0, 0.0, 0.0])], &corners)
            .unwrap());
        let v = skewed();
        assert!(envelope_feasible(&[marg(v.column(2))], &v).unwrap());
        assert!(!envelope_feasible(&[marg(&[1.0, 0.0, 0.0])], &v).unwrap());
    }

    #[test]
    fn witness_on_diagonal_judge() {
        let base = verts(&[[0.8, 0.1, 0.1], [0.1, 0.8, 0.1], [0.1, 0.1, 0.8]]);
        let w = make_nonidentifiability_witness(&base, 0.05).unwrap();
        for col in &w.perturbation {
            assert!(col.iter().sum::<f64>().abs() < 1e-12);
        }
        assert!(w.score_difference.0 * w.score_difference.1 < 0.0);
        // independent grid check of the sign flip at the reported step
        let weights = [0.0, 1.0, 2.0];
        let score = |p: &PrevalenceVector| {
            p.weights().iter().zip(weights).map(|(a, b)| a * b).sum::<f64>()
        };
        let dm = score(&w.minus_prevalences.0) - score(&w.minus_prevalences.1);
        let dp = score(&w.plus_prevalences.0) - score(&w.plus_prevalences.1);
        assert!(dm * dp < 0.0);
    }

    #[test]
    fn witness_equal_scores_at_zero_step() {
        let base = skewed();
        let w = make_nonidentifiability_witness(&base, 0.1).unwrap();
        let r = RubricSpec::square(3).unwrap();
        let d = expected_score(&w.prevalence_pair.0, &r) - expected_score(&w.prevalence_pair.1, &r);
        assert!(d.abs() < 1e-15);
    }

    #[test]
    fn witness_preconditions() {
        let edge = verts(&[[1.0, 0.0, 0.0], [0.1, 0.8, 0.1], [0.1, 0.1, 0.8]]);
        assert!(matches!(
            make_nonidentifiability_witness(&edge, 0.05),
            Err(GeometryError::WitnessPrecondition(_))
        ));
        assert!(make_nonidentifiability_witness(&skewed(), 0.5).is_err());
    }
}
