//! Flat unconstrained parameter vector and its map to model parameters.
//!
//! Layout, in order: one stick-breaking block per candidate prevalence; one
//! block per free judge holding its quality logit followed by the
//! stick-breaking coordinates of every vertex-graph node; then, when random
//! effects are enabled, one stick-breaking block per candidate direction, one
//! logit per candidate magnitude and one logit per judge magnitude.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{JudgeVertices, ModelError, PrevalenceVector};
use crate::prior::{JudgePriorParams, PriorError, RandomEffects, VertexGraph};
use crate::transform::{
    simplex_forward, simplex_inverse, unit_forward, unit_inverse, SimplexForward, UnitForward,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StateError {
    #[error("state does not match the layout: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Prior(#[from] PriorError),
}

/// A judge whose vertices are sampled, or held fixed at known values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum JudgeSlot {
    Free { offset: usize },
    Fixed(JudgeVertices),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    candidates: Vec<String>,
    judges: Vec<String>,
    graph: VertexGraph,
    slots: Vec<JudgeSlot>,
    random_effects: bool,
    re_offset: usize,
    dim: usize,
}

impl ParamLayout {
    /// `fixed[j]`, when set, pins judge `j` to the given vertices.
    pub fn new(
        candidates: Vec<String>,
        judges: Vec<String>,
        graph: VertexGraph,
        fixed: Vec<Option<JudgeVertices>>,
        random_effects: bool,
    ) -> Result<Self, StateError> {
        if fixed.len() != judges.len() {
            return Err(StateError::Mismatch("one slot per judge".into()));
        }
        let m = graph.true_levels();
        let mut offset = candidates.len() * (m - 1);
        let mut slots = Vec::with_capacity(judges.len());
        for f in fixed {
            match f {
                Some(v) => {
                    if v.num_true_levels() != m
                        || v.num_assigned_levels() != graph.assigned_levels()
                    {
                        return Err(StateError::Mismatch("fixed judge shape".into()));
                    }
                    slots.push(JudgeSlot::Fixed(v));
                }
                None => {
                    slots.push(JudgeSlot::Free { offset });
                    offset += 1 + graph.free_dim();
                }
            }
        }
        let re_offset = offset;
        if random_effects {
            offset += candidates.len() * m + judges.len();
        }
        Ok(Self {
            candidates,
            judges,
            graph,
            slots,
            random_effects,
            re_offset,
            dim: offset,
        })
    }

    /// All judges free.
    pub fn all_free(
        candidates: Vec<String>,
        judges: Vec<String>,
        graph: VertexGraph,
        random_effects: bool,
    ) -> Self {
        let fixed = vec![None; judges.len()];
        Self::new(candidates, judges, graph, fixed, random_effects).expect("consistent layout")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn candidates(&self) -> &[String] {
        &self.candidates
    }

    pub fn judges(&self) -> &[String] {
        &self.judges
    }

    pub fn graph(&self) -> &VertexGraph {
        &self.graph
    }

    pub fn slots(&self) -> &[JudgeSlot] {
        &self.slots
    }

    pub fn has_random_effects(&self) -> bool {
        self.random_effects
    }

    fn levels(&self) -> usize {
        self.graph.true_levels()
    }

    pub fn prevalence_range(&self, k: usize) -> std::ops::Range<usize> {
        let d = self.levels() - 1;
        k * d..(k + 1) * d
    }

    /// Ranges of the node blocks for a free judge, after its quality logit.
    pub fn node_ranges(&self, offset: usize) -> Vec<std::ops::Range<usize>> {
        let mut start = offset + 1;
        self.graph
            .nodes()
            .iter()
            .map(|n| {
                let r = start..start + n.size - 1;
                start = r.end;
                r
            })
            .collect()
    }

    pub fn direction_range(&self, k: usize) -> std::ops::Range<usize> {
        let d = self.levels() - 1;
        let s = self.re_offset + k * d;
        s..s + d
    }

    pub fn candidate_magnitude_index(&self, k: usize) -> usize {
        self.re_offset + self.candidates.len() * (self.levels() - 1) + k
    }

    pub fn judge_magnitude_index(&self, j: usize) -> usize {
        self.re_offset + self.candidates.len() * self.levels() + j
    }

    /// Human-readable name of every coordinate.
    pub fn coordinate_names(&self) -> Vec<String> {
        let mut names = vec![String::new(); self.dim];
        for (k, c) in self.candidates.iter().enumerate() {
            for (i, idx) in self.prevalence_range(k).enumerate() {
                names[idx] = format!("prevalence[{c}].y{i}");
            }
        }
        for (slot, j) in self.slots.iter().zip(&self.judges) {
            if let JudgeSlot::Free { offset } = slot {
                names[*offset] = format!("judge[{j}].quality");
                for (n, r) in self.node_ranges(*offset).into_iter().enumerate() {
                    for (i, idx) in r.enumerate() {
                        names[idx] = format!("judge[{j}].node{n}.y{i}");
                    }
                }
            }
        }
        if self.random_effects {
            for (k, c) in self.candidates.iter().enumerate() {
                for (i, idx) in self.direction_range(k).enumerate() {
                    names[idx] = format!("direction[{c}].y{i}");
                }
                names[self.candidate_magnitude_index(k)] = format!("magnitude[{c}]");
            }
            for (j, name) in self.judges.iter().enumerate() {
                names[self.judge_magnitude_index(j)] = format!("magnitude[{name}]");
            }
        }
        names
    }

    /// Evaluates every transform at `u`.
    pub fn forward(&self, u: &[f64]) -> ForwardPass {
        assert_eq!(u.len(), self.dim, "unconstrained vector length");
        let mut log_jacobian = 0.0;
        let prevalences: Vec<SimplexForward> = (0..self.candidates.len())
            .map(|k| simplex_forward(&u[self.prevalence_range(k)]))
            .collect();
        log_jacobian += prevalences.iter().map(|f| f.log_jacobian).sum::<f64>();
        let mut judges = Vec::with_capacity(self.slots.len());
        for slot in &self.slots {
            match slot {
                JudgeSlot::Free { offset } => {
                    let quality = unit_forward(u[*offset]);
                    let nodes: Vec<SimplexForward> = self
                        .node_ranges(*offset)
                        .into_iter()
                        .map(|r| simplex_forward(&u[r]))
                        .collect();
                    log_jacobian += quality.log_jacobian;
                    log_jacobian += nodes.iter().map(|f| f.log_jacobian).sum::<f64>();
                    let weights: Vec<Vec<f64>> = nodes.iter().map(|n| n.x.clone()).collect();
                    let columns = self.graph.assemble(&weights);
                    judges.push(JudgeForward::Free {
                        quality,
                        nodes,
                        columns,
                    });
                }
                JudgeSlot::Fixed(v) => judges.push(JudgeForward::Fixed(v.columns().to_vec())),
            }
        }
        let random_effects = self.random_effects.then(|| {
            let directions: Vec<SimplexForward> = (0..self.candidates.len())
                .map(|k| simplex_forward(&u[self.direction_range(k)]))
                .collect();
            let candidate: Vec<UnitForward> = (0..self.candidates.len())
                .map(|k| unit_forward(u[self.candidate_magnitude_index(k)]))
                .collect();
            let judge: Vec<UnitForward> = (0..self.judges.len())
                .map(|j| unit_forward(u[self.judge_magnitude_index(j)]))
                .collect();
            ReForward {
                directions,
                candidate,
                judge,
            }
        });
        if let Some(re) = &random_effects {
            log_jacobian += re.directions.iter().map(|f| f.log_jacobian).sum::<f64>();
            log_jacobian += re.candidate.iter().map(|f| f.log_jacobian).sum::<f64>();
            log_jacobian += re.judge.iter().map(|f| f.log_jacobian).sum::<f64>();
        }
        ForwardPass {
            prevalences,
            judges,
            random_effects,
            log_jacobian,
        }
    }

    /// Maps any real vector to a model state; also returns the log-Jacobian.
    pub fn from_unconstrained(&self, u: &[f64]) -> (ModelState, f64) {
        let fwd = self.forward(u);
        (fwd.to_state(&self.graph), fwd.log_jacobian)
    }

    pub fn to_unconstrained(&self, state: &ModelState) -> Result<UnconstrainedState, StateError> {
        if state.prevalences.len() != self.candidates.len()
            || state.judges.len() != self.slots.len()
        {
            return Err(StateError::Mismatch("parameter counts".into()));
        }
        let mut u = vec![0.0; self.dim];
        for (k, p) in state.prevalences.iter().enumerate() {
            u[self.prevalence_range(k)].copy_from_slice(&simplex_inverse(p.weights()));
        }
        for (slot, judge) in self.slots.iter().zip(&state.judges) {
            match (slot, judge) {
                (JudgeSlot::Free { offset }, JudgeState::Free(p)) => {
                    u[*offset] = unit_inverse(p.quality);
                    for (r, w) in self.node_ranges(*offset).into_iter().zip(&p.nodes) {
                        u[r].copy_from_slice(&simplex_inverse(w));
                    }
                }
                (JudgeSlot::Fixed(_), JudgeState::Fixed(_)) => {}
                _ => return Err(StateError::Mismatch("free/fixed judge kind".into())),
            }
        }
        match (&state.random_effects, self.random_effects) {
            (Some(re), true) => {
                for k in 0..self.candidates.len() {
                    u[self.direction_range(k)]
                        .copy_from_slice(&simplex_inverse(re.directions[k].weights()));
                    u[self.candidate_magnitude_index(k)] =
                        unit_inverse(re.candidate_magnitudes[k]);
                }
                for j in 0..self.judges.len() {
                    u[self.judge_magnitude_index(j)] = unit_inverse(re.judge_magnitudes[j]);
                }
            }
            (None, false) => {}
            _ => return Err(StateError::Mismatch("random effects presence".into())),
        }
        Ok(UnconstrainedState { values: u })
    }
}

/// Flat real parameter vector; see [`ParamLayout::coordinate_names`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnconstrainedState {
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum JudgeState {
    Free(JudgePriorParams),
    Fixed(JudgeVertices),
}

impl JudgeState {
    pub fn vertices(&self) -> &JudgeVertices {
        match self {
            JudgeState::Free(p) => &p.vertices,
            JudgeState::Fixed(v) => v,
        }
    }
}

/// Constrained model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub prevalences: Vec<PrevalenceVector>,
    pub judges: Vec<JudgeState>,
    pub random_effects: Option<RandomEffects>,
}

pub enum JudgeForward {
    Free {
        quality: UnitForward,
        nodes: Vec<SimplexForward>,
        columns: Vec<Vec<f64>>,
    },
    Fixed(Vec<Vec<f64>>),
}

impl JudgeForward {
    pub fn columns(&self) -> &[Vec<f64>] {
        match self {
            JudgeForward::Free { columns, .. } => columns,
            JudgeForward::Fixed(c) => c,
        }
    }
}

pub struct ReForward {
    pub directions: Vec<SimplexForward>,
    pub candidate: Vec<UnitForward>,
    pub judge: Vec<UnitForward>,
}

/// All transform outputs at one unconstrained point.
pub struct ForwardPass {
    pub prevalences: Vec<SimplexForward>,
    pub judges: Vec<JudgeForward>,
    pub random_effects: Option<ReForward>,
    pub log_jacobian: f64,
}

fn renormalized(x: &[f64]) -> Vec<f64> {
    let s: f64 = x.iter().sum();
    x.iter().map(|v| v / s).collect()
}

impl ForwardPass {
    pub fn to_state(&self, graph: &VertexGraph) -> ModelState {
        let prevalences = self
            .prevalences
            .iter()
            .map(|f| PrevalenceVector::new(renormalized(&f.x)).expect("stick-breaking output"))
            .collect();
        let judges = self
            .judges
            .iter()
            .map(|j| match j {
                JudgeForward::Free { quality, nodes, .. } => {
                    let weights = nodes.iter().map(|n| renormalized(&n.x)).collect();
                    JudgeState::Free(
                        JudgePriorParams::from_nodes(graph, quality.x, weights)
                            .expect("assembled columns are distributions"),
                    )
                }
                JudgeForward::Fixed(c) => {
                    JudgeState::Fixed(JudgeVertices::new(c.clone()).expect("fixed vertices"))
                }
            })
            .collect();
        let random_effects = self.random_effects.as_ref().map(|re| RandomEffects {
            directions: re
                .directions
                .iter()
                .map(|f| PrevalenceVector::new(renormalized(&f.x)).expect("stick-breaking output"))
                .collect(),
            candidate_magnitudes: re.candidate.iter().map(|f| f.x).collect(),
            judge_magnitudes: re.judge.iter().map(|f| f.x).collect(),
        });
        ModelState {
            prevalences,
            judges,
            random_effects,
        }
    }
}
