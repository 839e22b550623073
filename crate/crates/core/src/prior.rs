//! Prior over judge vertices and the random-effects relaxation of constancy.
//!
//! Vertices are built column by column from a small graph of transition
//! nodes, each carrying a distribution over its outgoing edges:
//!
//! * the root node gives `θ_0` directly (one edge per assigned level);
//! * for every true level `m >= 1` a release node splits the lowest-level
//!   mass of `θ_{m-1}` into a kept part and a released part, so
//!   `θ_m[0] = θ_{m-1}[0] * keep_m` can only go down;
//! * a redistribution node spreads the remaining `1 - θ_m[0]` over the
//!   higher assigned levels.
//!
//! Edges therefore never move mass toward the lowest level, which is exactly
//! the monotonicity condition on the first coordinate. Each node's weights
//! are Dirichlet with unit concentrations except on the edge that leads to a
//! correct verdict, which gets `1 + ρ β_max` (`ρ ~ Beta(1, 1)` per judge).

use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::model::{Hyperparameters, JudgeVertices, ModelError, PrevalenceVector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PriorError {
    #[error("log prior is not finite ({0})")]
    NonFinite(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Smallest fraction of lowest-level mass released per level when sampling,
/// so the first coordinate decreases strictly.
pub const MIN_RELEASE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeKind {
    Root,
    /// `[keep, release]` split of the lowest-level mass at true level `m`.
    Release(usize),
    /// Spread of the non-lowest mass at true level `m` over levels `1..M'`.
    Redistribute(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub kind: NodeKind,
    /// Out-degree.
    pub size: usize,
    /// Edge whose concentration is boosted by `ρ β_max`.
    pub boost: usize,
}

/// The transition graph for a rubric with `M` true and `M'` assigned levels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VertexGraph {
    true_levels: usize,
    assigned_levels: usize,
    nodes: Vec<NodeSpec>,
}

impl VertexGraph {
    pub fn new(true_levels: usize, assigned_levels: usize) -> Self {
        assert!(true_levels >= 2 && assigned_levels >= true_levels);
        let mut nodes = vec![NodeSpec {
            kind: NodeKind::Root,
            size: assigned_levels,
            boost: 0,
        }];
        for m in 1..true_levels {
            nodes.push(NodeSpec {
                kind: NodeKind::Release(m),
                size: 2,
                boost: 1,
            });
            // a single higher level needs no weights
            if assigned_levels > 2 {
                nodes.push(NodeSpec {
                    kind: NodeKind::Redistribute(m),
                    size: assigned_levels - 1,
                    boost: m - 1,
                });
            }
        }
        Self {
            true_levels,
            assigned_levels,
            nodes,
        }
    }

    pub fn true_levels(&self) -> usize {
        self.true_levels
    }

    pub fn assigned_levels(&self) -> usize {
        self.assigned_levels
    }

    pub fn nodes(&self) -> &[NodeSpec] {
        &self.nodes
    }

    /// Number of unconstrained coordinates for one judge's node weights.
    pub fn free_dim(&self) -> usize {
        self.nodes.iter().map(|n| n.size - 1).sum()
    }

    /// Dirichlet concentration of every node given the judge's quality draw.
    pub fn concentrations(&self, quality: f64, beta_max: f64) -> Vec<Vec<f64>> {
        self.nodes
            .iter()
            .map(|n| {
                let mut c = vec![1.0; n.size];
                c[n.boost] += quality * beta_max;
                c
            })
            .collect()
    }

    fn release_and_spread(&self, m: usize, nodes: &[Vec<f64>]) -> (usize, Option<usize>) {
        let idx = if self.assigned_levels > 2 {
            1 + 2 * (m - 1)
        } else {
            m
        };
        let spread = (self.assigned_levels > 2).then_some(idx + 1);
        debug_assert_eq!(nodes[idx].len(), 2);
        (idx, spread)
    }

    /// Assembles the vertex columns from node weights.
    pub fn assemble(&self, nodes: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let a = self.assigned_levels;
        let mut cols = Vec::with_capacity(self.true_levels);
        cols.push(nodes[0].clone());
        for m in 1..self.true_levels {
            let (rel, spread) = self.release_and_spread(m, nodes);
            let low = cols[m - 1][0] * nodes[rel][0];
            let mut col = vec![0.0; a];
            col[0] = low;
            match spread {
                Some(s) => {
                    for (c, d) in col[1..].iter_mut().zip(&nodes[s]) {
                        *c = (1.0 - low) * d;
                    }
                }
                None => col[1] = 1.0 - low,
            }
            cols.push(col);
        }
        cols
    }

    /// Pulls gradients with respect to the vertex columns back to the node
    /// weights.
    pub fn assemble_backward(
        &self,
        nodes: &[Vec<f64>],
        cols: &[Vec<f64>],
        g_cols: &[Vec<f64>],
    ) -> Vec<Vec<f64>> {
        let mut g_nodes: Vec<Vec<f64>> = nodes.iter().map(|n| vec![0.0; n.len()]).collect();
        let mut g_cols: Vec<Vec<f64>> = g_cols.to_vec();
        for m in (1..self.true_levels).rev() {
            let (rel, spread) = self.release_and_spread(m, nodes);
            let low = cols[m][0];
            let mut g_low = g_cols[m][0];
            match spread {
                Some(s) => {
                    for (i, d) in nodes[s].iter().enumerate() {
                        g_low -= g_cols[m][i + 1] * d;
                        g_nodes[s][i] += g_cols[m][i + 1] * (1.0 - low);
                    }
                }
                None => g_low -= g_cols[m][1],
            }
            g_nodes[rel][0] += g_low * cols[m - 1][0];
            g_cols[m - 1][0] += g_low * nodes[rel][0];
        }
        for (g, c) in g_nodes[0].iter_mut().zip(&g_cols[0]) {
            *g += c;
        }
        g_nodes
    }
}

/// One judge's prior draw: quality, node weights and the derived vertices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgePriorParams {
    pub quality: f64,
    pub nodes: Vec<Vec<f64>>,
    pub vertices: JudgeVertices,
}

impl JudgePriorParams {
    pub fn from_nodes(
        graph: &VertexGraph,
        quality: f64,
        nodes: Vec<Vec<f64>>,
    ) -> Result<Self, PriorError> {
        if nodes.len() != graph.nodes().len()
            || nodes.iter().zip(graph.nodes()).any(|(n, s)| n.len() != s.size)
        {
            return Err(PriorError::DimensionMismatch(
                "node weights do not match the vertex graph".into(),
            ));
        }
        let vertices = JudgeVertices::new(graph.assemble(&nodes))?;
        Ok(Self {
            quality,
            nodes,
            vertices,
        })
    }
}

pub(crate) fn sample_dirichlet<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> Vec<f64> {
    loop {
        let draws: Vec<f64> = alpha
            .iter()
            .map(|&a| Gamma::new(a, 1.0).expect("positive shape").sample(rng))
            .collect();
        let s: f64 = draws.iter().sum();
        if s > 0.0 && s.is_finite() {
            return draws.into_iter().map(|d| d / s).collect();
        }
    }
}

/// Draws a judge from the prior, with `ρ ~ Beta(1, 1)`.
pub fn sample_judge_vertices<R: Rng + ?Sized>(
    graph: &VertexGraph,
    hyper: &Hyperparameters,
    rng: &mut R,
) -> JudgePriorParams {
    let quality = rng.random::<f64>();
    sample_judge_vertices_with_quality(graph, hyper.beta_max, quality, rng)
}

/// Draws a judge from the prior with the quality draw held at `quality`.
pub fn sample_judge_vertices_with_quality<R: Rng + ?Sized>(
    graph: &VertexGraph,
    beta_max: f64,
    quality: f64,
    rng: &mut R,
) -> JudgePriorParams {
    let conc = graph.concentrations(quality, beta_max);
    let nodes: Vec<Vec<f64>> = graph
        .nodes()
        .iter()
        .zip(&conc)
        .map(|(spec, c)| {
            let mut w = sample_dirichlet(c, rng);
            if let NodeKind::Release(_) = spec.kind {
                if w[1] < MIN_RELEASE {
                    w = vec![1.0 - MIN_RELEASE, MIN_RELEASE];
                }
            }
            w
        })
        .collect();
    JudgePriorParams::from_nodes(graph, quality, nodes).expect("sampled nodes fit the graph")
}

/// Per-candidate directions and magnitudes plus per-judge magnitudes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomEffects {
    pub directions: Vec<PrevalenceVector>,
    pub candidate_magnitudes: Vec<f64>,
    pub judge_magnitudes: Vec<f64>,
}

impl RandomEffects {
    pub fn new(
        directions: Vec<PrevalenceVector>,
        candidate_magnitudes: Vec<f64>,
        judge_magnitudes: Vec<f64>,
    ) -> Result<Self, PriorError> {
        if directions.len() != candidate_magnitudes.len() {
            return Err(PriorError::DimensionMismatch(
                "one direction per candidate".into(),
            ));
        }
        let unit = |v: &f64| (0.0..=1.0).contains(v);
        if !candidate_magnitudes.iter().all(unit) || !judge_magnitudes.iter().all(unit) {
            return Err(PriorError::DimensionMismatch(
                "magnitudes must lie in [0, 1]".into(),
            ));
        }
        Ok(Self {
            directions,
            candidate_magnitudes,
            judge_magnitudes,
        })
    }

    /// All magnitudes zero: every judge sees the base prevalences.
    pub fn none(num_candidates: usize, num_judges: usize, levels: usize) -> Self {
        Self {
            directions: vec![PrevalenceVector::uniform(levels); num_candidates],
            candidate_magnitudes: vec![0.0; num_candidates],
            judge_magnitudes: vec![0.0; num_judges],
        }
    }
}

/// Draws random effects: `Z_k ~ Dir(δ)`, `W_k ~ Beta(ωK, K)`,
/// `R_j ~ Beta(ωJ, J)`. With `ω = 0` the magnitudes are exactly zero.
pub fn sample_random_effects<R: Rng + ?Sized>(
    num_candidates: usize,
    num_judges: usize,
    hyper: &Hyperparameters,
    rng: &mut R,
) -> RandomEffects {
    let directions = (0..num_candidates)
        .map(|_| PrevalenceVector::new(sample_dirichlet(&hyper.delta_dir, rng)).unwrap())
        .collect();
    let draw = |n: usize, rng: &mut R| -> Vec<f64> {
        if hyper.omega == 0.0 {
            return vec![0.0; n];
        }
        let beta = Beta::new(hyper.omega * n as f64, n as f64).expect("positive shapes");
        (0..n).map(|_| beta.sample(rng)).collect()
    };
    let candidate_magnitudes = draw(num_candidates, rng);
    let judge_magnitudes = draw(num_judges, rng);
    RandomEffects {
        directions,
        candidate_magnitudes,
        judge_magnitudes,
    }
}

/// `π_k^(j) = (1 - W_k R_j) π_k + W_k R_j Z_k`.
pub fn perturb_prevalence(
    pi: &PrevalenceVector,
    re: &RandomEffects,
    judge: usize,
    candidate: usize,
) -> PrevalenceVector {
    let lambda = re.candidate_magnitudes[candidate] * re.judge_magnitudes[judge];
    let z = re.directions[candidate].weights();
    let mixed: Vec<f64> = pi
        .weights()
        .iter()
        .zip(z)
        .map(|(p, z)| (1.0 - lambda) * p + lambda * z)
        .collect();
    let s: f64 = mixed.iter().sum();
    PrevalenceVector::new(mixed.into_iter().map(|x| x / s).collect())
        .expect("convex combination of distributions")
}

pub fn ln_dirichlet_norm(alpha: &[f64]) -> f64 {
    ln_gamma(alpha.iter().sum()) - alpha.iter().map(|&a| ln_gamma(a)).sum::<f64>()
}

/// Dirichlet log density from precomputed `ln x`.
pub fn ln_dirichlet_from_logs(log_x: &[f64], alpha: &[f64]) -> f64 {
    ln_dirichlet_norm(alpha)
        + log_x
            .iter()
            .zip(alpha)
            .map(|(l, a)| (a - 1.0) * l)
            .sum::<f64>()
}

pub fn ln_dirichlet(x: &[f64], alpha: &[f64]) -> f64 {
    let logs: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    ln_dirichlet_from_logs(&logs, alpha)
}

pub fn ln_beta_norm(a: f64, b: f64) -> f64 {
    ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b)
}

pub fn ln_beta_pdf(x: f64, a: f64, b: f64) -> f64 {
    ln_beta_norm(a, b) + (a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln()
}

/// Sum of prior log densities: Dirichlet node weights and `Beta(1, 1)`
/// quality for every free judge, uniform Dirichlet for each prevalence, and,
/// when present, `Dir(δ)` directions with `Beta(ωK, K)` / `Beta(ωJ, J)`
/// magnitudes.
pub fn log_prior(
    graph: &VertexGraph,
    judges: &[JudgePriorParams],
    re: Option<&RandomEffects>,
    prevalences: &[PrevalenceVector],
    hyper: &Hyperparameters,
) -> Result<f64, PriorError> {
    let mut total = 0.0;
    for judge in judges {
        if !(0.0..=1.0).contains(&judge.quality) {
            return Err(PriorError::NonFinite("quality outside [0, 1]".into()));
        }
        // Beta(1, 1) on the quality contributes ln 1 = 0.
        for (w, c) in judge
            .nodes
            .iter()
            .zip(graph.concentrations(judge.quality, hyper.beta_max))
        {
            total += ln_dirichlet(w, &c);
        }
    }
    for p in prevalences {
        total += ln_dirichlet(p.weights(), &vec![1.0; p.len()]);
    }
    if let Some(re) = re {
        let k = re.candidate_magnitudes.len() as f64;
        let j = re.judge_magnitudes.len() as f64;
        for z in &re.directions {
            total += ln_dirichlet(z.weights(), &hyper.delta_dir);
        }
        for &w in &re.candidate_magnitudes {
            total += ln_beta_pdf(w, hyper.omega * k, k);
        }
        for &r in &re.judge_magnitudes {
            total += ln_beta_pdf(r, hyper.omega * j, j);
        }
    }
    if !total.is_finite() {
        return Err(PriorError::NonFinite(format!("{total}")));
    }
    Ok(total)
}
