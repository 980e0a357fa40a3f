//! Rotation averaging over the ambiguity multigraph.
//!
//! Three formulations share one solver core:
//!
//! * [`irls_multigraph_averaging`]: robust averaging over all four parallel
//!   edges per pair (no consistency constraint) by IRLS; its converged edge
//!   weights drive the M4 reference method.
//! * [`exhaustive_solve`]: enumerate every binary indicator assignment,
//!   average over the selected edges, keep the best. Exponential, used as the
//!   oracle on tiny instances.
//! * [`solve_lifted`]: the smoothed problem with sigmoid-weighted edge terms,
//!   minimized jointly over rotations and unbounded indicator variables.
//!
//! Rotation updates use a majorize-minimize scheme: the concave dependence of
//! each edge term on the squared chordal residual is bounded by its tangent,
//! and the resulting weighted least-squares surrogate is minimized per vertex
//! in closed form (Procrustes projection of the weighted target sum). Every
//! accepted update therefore decreases the true objective, which is what the
//! non-increasing trace invariant relies on.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::geometry::{nearest_rotation, vee_antisym, Rotation};
use crate::multigraph::{AmbiguityMultigraph, DetectionKey, EdgeKey};

/// Smoothing floor for the unsquared Frobenius residuals: terms evaluate as
/// `sqrt(||.||_F^2 + eps^2)`, keeping gradients defined at zero residual
/// while perturbing nonzero residuals by less than eps^2.
pub const RESIDUAL_EPS: f64 = 1e-12;

/// Saturation bound for indicator variables inside the solver.
pub const INDICATOR_CAP: f64 = 50.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AveragingError {
    #[error("instance too large for exhaustive enumeration: {detections} detections > {limit}")]
    TooLarge { detections: usize, limit: usize },
    #[error("indicator set does not cover detection ({0}, {1})")]
    MissingIndicator(u32, u32),
}

/// Logistic sigmoid; satisfies `sigmoid(s) + sigmoid(-s) = 1` exactly.
pub fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

fn sigmoid_prime(s: f64) -> f64 {
    let p = sigmoid(s);
    p * (1.0 - p)
}

/// One real-valued selector per detection: negative favors hypothesis 0,
/// positive hypothesis 1. Continuous in the lifted solver; hardened to bits
/// by [`IndicatorSet::hard_labels`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IndicatorSet {
    values: BTreeMap<DetectionKey, f64>,
}

impl IndicatorSet {
    pub fn new(values: BTreeMap<DetectionKey, f64>) -> Self {
        IndicatorSet { values }
    }

    /// Indicator set encoding hard labels at the saturation bound.
    pub fn from_labels(labels: &BTreeMap<DetectionKey, u8>) -> Self {
        IndicatorSet {
            values: labels
                .iter()
                .map(|(&k, &b)| (k, if b == 1 { INDICATOR_CAP } else { -INDICATOR_CAP }))
                .collect(),
        }
    }

    pub fn get(&self, key: &DetectionKey) -> Option<f64> {
        self.values.get(key).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&DetectionKey, &f64)> {
        self.values.iter()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Sign-thresholded labels: `sigmoid(s) > 0.5` selects hypothesis 1, the
    /// tie at exactly 0.5 falls back to hypothesis 0.
    pub fn hard_labels(&self) -> BTreeMap<DetectionKey, u8> {
        self.values
            .iter()
            .map(|(&k, &s)| (k, if s > 0.0 { 1 } else { 0 }))
            .collect()
    }
}

/// Robust norm for the unconstrained multigraph averaging problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RobustNorm {
    /// `rho(r) = scale^2 r^2 / (scale^2 + r^2)`; saturates for gross outliers.
    GemanMcClure { scale: f64 },
    /// Quadratic inside `scale`, linear outside.
    Huber { scale: f64 },
    /// `rho(r) = r` (smoothed at zero).
    L1,
}

impl RobustNorm {
    fn rho(&self, r: f64) -> f64 {
        match *self {
            RobustNorm::GemanMcClure { scale } => {
                let s2 = scale * scale;
                s2 * r * r / (s2 + r * r)
            }
            RobustNorm::Huber { scale } => {
                if r.abs() <= scale {
                    0.5 * r * r
                } else {
                    scale * (r.abs() - 0.5 * scale)
                }
            }
            RobustNorm::L1 => (r * r + RESIDUAL_EPS * RESIDUAL_EPS).sqrt(),
        }
    }

    /// Majorizer coefficient on the squared residual: `d rho / d(r^2)`.
    fn weight(&self, r: f64) -> f64 {
        match *self {
            RobustNorm::GemanMcClure { scale } => {
                let s2 = scale * scale;
                let d = s2 + r * r;
                s2 * s2 / (d * d)
            }
            RobustNorm::Huber { scale } => {
                if r.abs() <= scale {
                    0.5
                } else {
                    0.5 * scale / r.abs()
                }
            }
            RobustNorm::L1 => 0.5 / (r * r + RESIDUAL_EPS * RESIDUAL_EPS).sqrt(),
        }
    }

    fn annealed(&self, factor: f64, floor: f64) -> RobustNorm {
        match *self {
            RobustNorm::GemanMcClure { scale } => {
                RobustNorm::GemanMcClure { scale: (scale * factor).max(floor) }
            }
            RobustNorm::Huber { scale } => RobustNorm::Huber { scale: (scale * factor).max(floor) },
            RobustNorm::L1 => RobustNorm::L1,
        }
    }
}

/// Solver configuration shared by the IRLS and lifted problems.
#[derive(Debug, Clone, Copy)]
pub struct AveragingConfig {
    pub robust_norm: RobustNorm,
    /// Outer iteration budget (IRLS sweeps, or lifted outer iterations).
    pub max_iterations: usize,
    /// Termination threshold on the infinity norm of the joint gradient.
    pub gradient_tolerance: f64,
    /// Iterations of the soft (gradient-driven) indicator phase before
    /// indicator updates switch to exact coordinate descent.
    pub soft_iterations: usize,
    /// Procrustes sweeps per outer iteration.
    pub rotation_sweeps: usize,
    /// IRLS scale schedule: start at `anneal_start` (a quasi-quadratic
    /// regime, since chordal residuals never exceed 2*sqrt(2)) and multiply
    /// by `anneal_factor` every `anneal_every` sweeps down to `scale_floor`.
    /// Starting directly at the nominal scale can lock onto an
    /// outlier-satisfying local minimum when the spanning-tree init chained
    /// through a bad edge.
    pub anneal_start: f64,
    pub anneal_every: usize,
    pub anneal_factor: f64,
    pub scale_floor: f64,
    /// Lifted solver smoothing schedule: the residual smoothing starts at
    /// `smoothing_start` (near-quadratic terms) and decays by
    /// `smoothing_decay` per iteration down to the final `RESIDUAL_EPS`.
    /// Shrinking the smoothing decreases every term pointwise, so the
    /// objective trace stays non-increasing across the schedule.
    pub smoothing_start: f64,
    pub smoothing_decay: f64,
}

impl Default for AveragingConfig {
    fn default() -> Self {
        AveragingConfig {
            robust_norm: RobustNorm::GemanMcClure { scale: 0.1 },
            max_iterations: 500,
            gradient_tolerance: 1e-8,
            soft_iterations: 60,
            rotation_sweeps: 2,
            anneal_start: 2.83,
            anneal_every: 10,
            anneal_factor: 0.5,
            scale_floor: 0.01,
        }
    }
}

/// Output of either averaging solver.
#[derive(Debug, Clone)]
pub struct AveragingResult {
    /// Absolute rotations in the multigraph convention
    /// (`measurement ~ R_j * R_i^T`), gauge-fixed to identity at the
    /// smallest marker id.
    pub rotations: BTreeMap<u32, Rotation>,
    /// Optimised indicators (lifted solver) or the initial ones (IRLS).
    pub indicators: IndicatorSet,
    /// Final per-edge robust weights (IRLS only).
    pub edge_weights: Option<BTreeMap<EdgeKey, f64>>,
    /// Final objective value.
    pub objective: f64,
    /// Objective after every outer iteration; non-increasing.
    pub trace: Vec<f64>,
    /// False when the iteration budget ran out before the gradient test.
    pub converged: bool,
}

// ── Flattened problem ─────────────────────────────────────────────────────

struct Group {
    i_vertex: usize,
    j_vertex: usize,
    i_det: usize,
    j_det: usize,
    /// Rotations indexed by label 2a + b.
    rots: [Matrix3<f64>; 4],
    image_id: u32,
    i_id: u32,
    j_id: u32,
}

#[derive(Clone, Copy)]
enum Role {
    Low,
    High,
}

struct FlatProblem {
    vertex_ids: Vec<u32>,
    det_keys: Vec<DetectionKey>,
    groups: Vec<Group>,
    /// Per vertex: (group index, role of the vertex in the group).
    vertex_incidence: Vec<Vec<(usize, Role)>>,
    /// Per detection: (group index, role).
    det_incidence: Vec<Vec<(usize, Role)>>,
}

impl FlatProblem {
    fn build(g: &AmbiguityMultigraph) -> Self {
        let vertex_ids: Vec<u32> = g.vertices().to_vec();
        let vertex_index: BTreeMap<u32, usize> =
            vertex_ids.iter().enumerate().map(|(k, &v)| (v, k)).collect();
        let det_keys = g.detection_keys();
        let det_index: BTreeMap<DetectionKey, usize> =
            det_keys.iter().enumerate().map(|(k, &v)| (v, k)).collect();
        let mut groups = Vec::new();
        for (t, i, j, rots) in g.edge_groups() {
            groups.push(Group {
                i_vertex: vertex_index[&i],
                j_vertex: vertex_index[&j],
                i_det: det_index[&DetectionKey { image_id: t, marker_id: i }],
                j_det: det_index[&DetectionKey { image_id: t, marker_id: j }],
                rots: [*rots[0].matrix(), *rots[1].matrix(), *rots[2].matrix(), *rots[3].matrix()],
                image_id: t,
                i_id: i,
                j_id: j,
            });
        }
        let mut vertex_incidence: Vec<Vec<(usize, Role)>> = vec![Vec::new(); vertex_ids.len()];
        let mut det_incidence: Vec<Vec<(usize, Role)>> = vec![Vec::new(); det_keys.len()];
        for (gi, grp) in groups.iter().enumerate() {
            vertex_incidence[grp.i_vertex].push((gi, Role::Low));
            vertex_incidence[grp.j_vertex].push((gi, Role::High));
            det_incidence[grp.i_det].push((gi, Role::Low));
            det_incidence[grp.j_det].push((gi, Role::High));
        }
        FlatProblem { vertex_ids, det_keys, groups, vertex_incidence, det_incidence }
    }

    fn rotations_from_map(&self, map: &BTreeMap<u32, Rotation>) -> Vec<Matrix3<f64>> {
        self.vertex_ids.iter().map(|id| *map[id].matrix()).collect()
    }

    fn rotations_to_map(&self, rots: &[Matrix3<f64>]) -> BTreeMap<u32, Rotation> {
        self.vertex_ids
            .iter()
            .zip(rots.iter())
            .map(|(&id, m)| (id, Rotation::wrap_unchecked(*m)))
            .collect()
    }

    fn indicators_from_set(&self, s: &IndicatorSet) -> Result<Vec<f64>, AveragingError> {
        self.det_keys
            .iter()
            .map(|k| {
                s.get(k)
                    .ok_or(AveragingError::MissingIndicator(k.image_id, k.marker_id))
            })
            .collect()
    }

    fn indicators_to_set(&self, s: &[f64]) -> IndicatorSet {
        IndicatorSet::new(self.det_keys.iter().copied().zip(s.iter().copied()).collect())
    }
}

fn smoothed(q: f64) -> f64 {
    (q + RESIDUAL_EPS * RESIDUAL_EPS).sqrt()
}

/// The four smoothed residuals of a group against the prediction
/// `R_j * R_i^T`.
fn group_residuals(grp: &Group, pred: &Matrix3<f64>) -> [f64; 4] {
    let mut out = [0.0; 4];
    for (l, rot) in grp.rots.iter().enumerate() {
        out[l] = smoothed((rot - pred).norm_squared());
    }
    out
}

fn label_weights(si: f64, sj: f64) -> [f64; 4] {
    let (pi, pj) = (sigmoid(si), sigmoid(sj));
    // index 2a + b with f(0) = 1 - phi, f(1) = phi
    [
        (1.0 - pi) * (1.0 - pj),
        (1.0 - pi) * pj,
        pi * (1.0 - pj),
        pi * pj,
    ]
}

fn lifted_value_flat(p: &FlatProblem, rots: &[Matrix3<f64>], s: &[f64]) -> f64 {
    let mut total = 0.0;
    for grp in &p.groups {
        let pred = rots[grp.j_vertex] * rots[grp.i_vertex].transpose();
        let res = group_residuals(grp, &pred);
        let w = label_weights(s[grp.i_det], s[grp.j_det]);
        for l in 0..4 {
            total += w[l] * res[l];
        }
    }
    total
}

/// One closed-form Procrustes pass over all non-root vertices for the
/// weighted squared-chordal surrogate with per-(group,label) coefficients
/// `coeff`.
fn procrustes_sweep(
    p: &FlatProblem,
    rots: &mut [Matrix3<f64>],
    coeff: &[[f64; 4]],
    root: usize,
) {
    for v in 0..rots.len() {
        if v == root {
            continue;
        }
        let mut target = Matrix3::<f64>::zeros();
        for (gi, role) in &p.vertex_incidence[v] {
            let grp = &p.groups[*gi];
            for l in 0..4 {
                let c = coeff[*gi][l];
                if c == 0.0 {
                    continue;
                }
                match role {
                    // || R~ - R_j R_i^T ||^2 = || R~^T R_j - R_i ||^2
                    Role::Low => target += grp.rots[l].transpose() * rots[grp.j_vertex] * c,
                    // || R~ - R_j R_i^T ||^2 = || R~ R_i - R_j ||^2
                    Role::High => target += grp.rots[l] * rots[grp.i_vertex] * c,
                }
            }
        }
        if let Ok(r) = nearest_rotation(&target) {
            rots[v] = *r.matrix();
        }
    }
}

/// Majorizer coefficients for the lifted objective at the current iterate.
fn lifted_coefficients(p: &FlatProblem, rots: &[Matrix3<f64>], s: &[f64]) -> Vec<[f64; 4]> {
    let mut coeff = vec![[0.0; 4]; p.groups.len()];
    for (gi, grp) in p.groups.iter().enumerate() {
        let pred = rots[grp.j_vertex] * rots[grp.i_vertex].transpose();
        let res = group_residuals(grp, &pred);
        let w = label_weights(s[grp.i_det], s[grp.j_det]);
        for l in 0..4 {
            coeff[gi][l] = w[l] / (2.0 * res[l]);
        }
    }
    coeff
}

fn lifted_gradient_flat(
    p: &FlatProblem,
    rots: &[Matrix3<f64>],
    s: &[f64],
) -> (Vec<Vector3<f64>>, Vec<f64>) {
    let mut g_rot = vec![Vector3::zeros(); rots.len()];
    let mut g_s = vec![0.0; s.len()];
    for grp in &p.groups {
        let ri = &rots[grp.i_vertex];
        let rj = &rots[grp.j_vertex];
        let pred = rj * ri.transpose();
        let res = group_residuals(grp, &pred);
        let w = label_weights(s[grp.i_det], s[grp.j_det]);
        let (pi, pj) = (sigmoid(s[grp.i_det]), sigmoid(s[grp.j_det]));
        let (dpi, dpj) = (sigmoid_prime(s[grp.i_det]), sigmoid_prime(s[grp.j_det]));
        for l in 0..4 {
            let (a, b) = ((l / 2) as u8, (l % 2) as u8);
            // d r / d delta through the squared residual, written in terms
            // of the stored deviation so it vanishes exactly at zero residual
            let scale = w[l] / (2.0 * res[l]);
            if scale != 0.0 {
                let dev = grp.rots[l] - pred;
                let di = vee_antisym(&(pred.transpose() * dev)) * 4.0;
                let dj = vee_antisym(&(dev * pred.transpose())) * -4.0;
                g_rot[grp.i_vertex] += di * scale;
                g_rot[grp.j_vertex] += dj * scale;
            }
            // d weight / d s
            let f_j = if b == 1 { pj } else { 1.0 - pj };
            let f_i = if a == 1 { pi } else { 1.0 - pi };
            let dwi = if a == 1 { dpi } else { -dpi } * f_j;
            let dwj = if b == 1 { dpj } else { -dpj } * f_i;
            g_s[grp.i_det] += dwi * res[l];
            g_s[grp.j_det] += dwj * res[l];
        }
    }
    (g_rot, g_s)
}

// ── Public objective / gradient evaluators ────────────────────────────────

/// Smoothed lifted objective (sigmoid-product weights on the unsquared
/// chordal residuals of all four labels per pair).
pub fn lifted_objective(
    g: &AmbiguityMultigraph,
    rotations: &BTreeMap<u32, Rotation>,
    s: &IndicatorSet,
) -> f64 {
    let p = FlatProblem::build(g);
    let rots = p.rotations_from_map(rotations);
    let flat = p.indicators_from_set(s).expect("indicator set must cover all detections");
    lifted_value_flat(&p, &rots, &flat)
}

/// Analytic gradient of [`lifted_objective`] with respect to tangent-space
/// rotation increments (left perturbation) and the raw indicator variables.
pub fn lifted_gradient(
    g: &AmbiguityMultigraph,
    rotations: &BTreeMap<u32, Rotation>,
    s: &IndicatorSet,
) -> (BTreeMap<u32, Vector3<f64>>, BTreeMap<DetectionKey, f64>) {
    let p = FlatProblem::build(g);
    let rots = p.rotations_from_map(rotations);
    let flat = p.indicators_from_set(s).expect("indicator set must cover all detections");
    let (g_rot, g_s) = lifted_gradient_flat(&p, &rots, &flat);
    let rot_map = p.vertex_ids.iter().copied().zip(g_rot).collect();
    let s_map = p.det_keys.iter().copied().zip(g_s).collect();
    (rot_map, s_map)
}

/// The clique-constrained objective for a hard label assignment: per
/// `(image, pair)` only the edge selected by the endpoint bits contributes
/// its (smoothed) chordal residual.
pub fn clique_constrained_objective(
    g: &AmbiguityMultigraph,
    rotations: &BTreeMap<u32, Rotation>,
    labels: &BTreeMap<DetectionKey, u8>,
) -> f64 {
    let p = FlatProblem::build(g);
    let rots = p.rotations_from_map(rotations);
    let mut total = 0.0;
    for grp in &p.groups {
        let a = labels[&p.det_keys[grp.i_det]];
        let b = labels[&p.det_keys[grp.j_det]];
        let pred = rots[grp.j_vertex] * rots[grp.i_vertex].transpose();
        total += smoothed((grp.rots[(a * 2 + b) as usize] - pred).norm_squared());
    }
    total
}

// ── IRLS over the full multigraph ─────────────────────────────────────────

/// Robust rotation averaging over all four parallel edges per pair, without
/// any consistency constraint. Returns the converged per-edge robust weights
/// alongside the rotations.
pub fn irls_multigraph_averaging(
    g: &AmbiguityMultigraph,
    config: &AveragingConfig,
) -> AveragingResult {
    let p = FlatProblem::build(g);
    let init = crate::multigraph::spanning_tree_init(g);
    let mut rots = p.rotations_from_map(&init.rotations);
    let root = 0usize;
    let mut norm = match config.robust_norm {
        RobustNorm::GemanMcClure { scale } => {
            RobustNorm::GemanMcClure { scale: scale.max(config.anneal_start) }
        }
        RobustNorm::Huber { scale } => RobustNorm::Huber { scale: scale.max(config.anneal_start) },
        RobustNorm::L1 => RobustNorm::L1,
    };

    let objective = |rots: &[Matrix3<f64>], norm: &RobustNorm| -> f64 {
        let mut total = 0.0;
        for grp in &p.groups {
            let pred = rots[grp.j_vertex] * rots[grp.i_vertex].transpose();
            for rot in &grp.rots {
                total += norm.rho((rot - pred).norm());
            }
        }
        total
    };

    let mut trace = Vec::new();
    let mut converged = false;
    let mut previous = f64::INFINITY;
    for sweep in 0..config.max_iterations {
        if sweep > 0 && sweep % config.anneal_every == 0 {
            norm = norm.annealed(config.anneal_factor, config.scale_floor);
        }
        // robust weights at the current iterate
        let mut coeff = vec![[0.0; 4]; p.groups.len()];
        for (gi, grp) in p.groups.iter().enumerate() {
            let pred = rots[grp.j_vertex] * rots[grp.i_vertex].transpose();
            for (l, rot) in grp.rots.iter().enumerate() {
                coeff[gi][l] = norm.weight((rot - pred).norm());
            }
        }
        procrustes_sweep(&p, &mut rots, &coeff, root);
        let value = objective(&rots, &norm);
        trace.push(value);
        let at_floor = match norm {
            RobustNorm::GemanMcClure { scale } | RobustNorm::Huber { scale } => {
                scale <= config.scale_floor + 1e-15
            }
            RobustNorm::L1 => true,
        };
        if at_floor && (previous - value).abs() <= 1e-14 * value.max(1.0) {
            converged = true;
            break;
        }
        previous = value;
    }

    // final weights, exported per labelled edge
    let mut weights = BTreeMap::new();
    for grp in &p.groups {
        let pred = rots[grp.j_vertex] * rots[grp.i_vertex].transpose();
        for l in 0..4usize {
            let key = EdgeKey {
                image_id: grp.image_id,
                i: grp.i_id,
                j: grp.j_id,
                a: (l / 2) as u8,
                b: (l % 2) as u8,
            };
            // normalized so a zero-residual edge has weight 1
            let r = (grp.rots[l] - pred).norm();
            let w = match norm {
                RobustNorm::GemanMcClure { scale } => {
                    let s2 = scale * scale;
                    (s2 / (s2 + r * r)).powi(2)
                }
                RobustNorm::Huber { scale } => (scale / r.abs().max(scale)).min(1.0),
                RobustNorm::L1 => RESIDUAL_EPS / smoothed(r * r),
            };
            weights.insert(key, w);
        }
    }

    let objective_value = trace.last().copied().unwrap_or(0.0);
    AveragingResult {
        rotations: p.rotations_to_map(&rots),
        indicators: p.indicators_to_set(&p.indicators_from_set(&IndicatorSet::new(init.indicators)).unwrap()),
        edge_weights: Some(weights),
        objective: objective_value,
        trace,
        converged,
    }
}

// ── Averaging restricted to a hard label selection ────────────────────────

fn chain_rotations_for_labels(p: &FlatProblem, bits: &[u8]) -> Vec<Matrix3<f64>> {
    let n = p.vertex_ids.len();
    let mut rots = vec![Matrix3::<f64>::identity(); n];
    let mut known = vec![false; n];
    known[0] = true;
    let mut frontier = vec![0usize];
    // adjacency in group order keeps the chaining deterministic
    let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (gi, grp) in p.groups.iter().enumerate() {
        adjacency[grp.i_vertex].push(gi);
        adjacency[grp.j_vertex].push(gi);
    }
    while let Some(v) = frontier.pop() {
        for &gi in &adjacency[v] {
            let grp = &p.groups[gi];
            let l = (bits[grp.i_det] * 2 + bits[grp.j_det]) as usize;
            let (other, rot) = if grp.i_vertex == v {
                // measurement ~ R_j R_i^T  =>  R_j = R~ R_i
                (grp.j_vertex, grp.rots[l] * rots[v])
            } else {
                (grp.i_vertex, grp.rots[l].transpose() * rots[v])
            };
            if !known[other] {
                known[other] = true;
                rots[other] = rot;
                frontier.push(other);
            }
        }
    }
    rots
}

fn solve_for_labels_flat(p: &FlatProblem, bits: &[u8]) -> (Vec<Matrix3<f64>>, f64) {
    let mut rots = chain_rotations_for_labels(p, bits);
    let value = |rots: &[Matrix3<f64>]| -> f64 {
        let mut total = 0.0;
        for grp in &p.groups {
            let pred = rots[grp.j_vertex] * rots[grp.i_vertex].transpose();
            let l = (bits[grp.i_det] * 2 + bits[grp.j_det]) as usize;
            total += smoothed((grp.rots[l] - pred).norm_squared());
        }
        total
    };
    let mut current = value(&rots);
    for _ in 0..300 {
        let mut coeff = vec![[0.0; 4]; p.groups.len()];
        for (gi, grp) in p.groups.iter().enumerate() {
            let pred = rots[grp.j_vertex] * rots[grp.i_vertex].transpose();
            let l = (bits[grp.i_det] * 2 + bits[grp.j_det]) as usize;
            coeff[gi][l] = 1.0 / (2.0 * smoothed((grp.rots[l] - pred).norm_squared()));
        }
        let backup = rots.clone();
        procrustes_sweep(p, &mut rots, &coeff, 0);
        let next = value(&rots);
        if next > current {
            rots = backup;
            break;
        }
        let drop = current - next;
        current = next;
        if drop <= 1e-13 * current.max(1.0) {
            break;
        }
    }
    (rots, current)
}

/// Unconstrained chordal averaging over the single edge per pair selected by
/// `labels`; this is the inner solve of the exhaustive oracle, exposed so
/// label assignments from other methods can be scored identically.
pub fn averaged_objective_for_labels(
    g: &AmbiguityMultigraph,
    labels: &BTreeMap<DetectionKey, u8>,
) -> (BTreeMap<u32, Rotation>, f64) {
    let p = FlatProblem::build(g);
    let bits: Vec<u8> = p.det_keys.iter().map(|k| labels[k]).collect();
    let (rots, value) = solve_for_labels_flat(&p, &bits);
    (p.rotations_to_map(&rots), value)
}

/// Exhaustive solution of
/// the clique-constrained problem.
#[derive(Debug, Clone)]
pub struct ExhaustiveSolution {
    pub rotations: BTreeMap<u32, Rotation>,
    pub labels: BTreeMap<DetectionKey, u8>,
    pub objective: f64,
}

/// Enumeration bound for [`exhaustive_solve`].
pub const EXHAUSTIVE_LIMIT: usize = 14;

/// Enumerates every indicator instantiation, solves the averaging problem
/// restricted to the selected edges, and returns the best (first strict
/// minimum in enumeration order). Exponential in the number of detections.
pub fn exhaustive_solve(
    g: &AmbiguityMultigraph,
) -> Result<ExhaustiveSolution, AveragingError> {
    let p = FlatProblem::build(g);
    let k = p.det_keys.len();
    if k > EXHAUSTIVE_LIMIT {
        return Err(AveragingError::TooLarge { detections: k, limit: EXHAUSTIVE_LIMIT });
    }
    let mut best: Option<(f64, Vec<u8>, Vec<Matrix3<f64>>)> = None;
    let mut bits = vec![0u8; k];
    for mask in 0..(1u64 << k) {
        for (d, bit) in bits.iter_mut().enumerate() {
            *bit = ((mask >> d) & 1) as u8;
        }
        let (rots, value) = solve_for_labels_flat(&p, &bits);
        if best.as_ref().is_none_or(|(b, _, _)| value < *b) {
            best = Some((value, bits.clone(), rots));
        }
    }
    let (objective, bits, rots) = best.expect("at least one instantiation");
    Ok(ExhaustiveSolution {
        rotations: p.rotations_to_map(&rots),
        labels: p.det_keys.iter().copied().zip(bits).collect(),
        objective,
    })
}

// ── Lifted solver ─────────────────────────────────────────────────────────

/// Exact coordinate update of one indicator: the objective is affine in
/// `sigmoid(s_d)` for fixed rotations and other indicators, so the coordinate
/// minimum saturates. Returns true when any label side changed.
fn indicator_coordinate_sweep(
    p: &FlatProblem,
    preds: &[Matrix3<f64>],
    residuals: &[[f64; 4]],
    s: &mut [f64],
) -> bool {
    let _ = preds;
    let mut changed = false;
    for d in 0..s.len() {
        let mut cost = [0.0f64; 2]; // bit 0 / bit 1 for this detection
        for (gi, role) in &p.det_incidence[d] {
            let grp = &p.groups[*gi];
            let (other_s, own_is_low) = match role {
                Role::Low => (s[grp.j_det], true),
                Role::High => (s[grp.i_det], false),
            };
            let po = sigmoid(other_s);
            let f_other = [1.0 - po, po];
            for own in 0..2usize {
                for other in 0..2usize {
                    let l = if own_is_low { own * 2 + other } else { other * 2 + own };
                    cost[own] += f_other[other] * residuals[*gi][l];
                }
            }
        }
        let new_s = if cost[1] < cost[0] {
            INDICATOR_CAP
        } else if cost[0] < cost[1] {
            -INDICATOR_CAP
        } else {
            s[d]
        };
        if (new_s > 0.0) != (s[d] > 0.0) {
            changed = true;
        }
        s[d] = new_s;
    }
    changed
}

/// Joint minimization of the lifted objective over rotations and indicator
/// variables, starting from the spanning-tree initialization.
///
/// Each outer iteration interleaves (a) majorize-minimize Procrustes sweeps
/// over the rotations and (b) an indicator update: a backtracking gradient
/// step during the soft phase, exact coordinate descent afterwards. Both
/// phases decrease the same objective, so the trace is non-increasing.
pub fn solve_lifted(
    g: &AmbiguityMultigraph,
    init: &crate::multigraph::SpanningTreeInit,
    config: &AveragingConfig,
) -> AveragingResult {
    let p = FlatProblem::build(g);
    let mut rots = p.rotations_from_map(&init.rotations);
    let mut s: Vec<f64> = p
        .det_keys
        .iter()
        .map(|k| init.indicators[k])
        .collect();
    let root = 0usize;

    let mut value = lifted_value_flat(&p, &rots, &s);
    let mut trace = Vec::with_capacity(config.max_iterations);
    let mut converged = false;
    let mut step = 1.0f64;

    for outer in 0..config.max_iterations {
        let value_at_start = value;
        // rotations: MM sweeps, guarded against floating-point wobble
        for _ in 0..config.rotation_sweeps.max(1) {
            let coeff = lifted_coefficients(&p, &rots, &s);
            let backup = rots.clone();
            procrustes_sweep(&p, &mut rots, &coeff, root);
            let after = lifted_value_flat(&p, &rots, &s);
            if after > value {
                rots = backup;
                break;
            }
            value = after;
        }

        // indicators
        if outer < config.soft_iterations {
            let (_, g_s) = lifted_gradient_flat(&p, &rots, &s);
            let norm_sq: f64 = g_s.iter().map(|v| v * v).sum();
            if norm_sq > 0.0 {
                let mut alpha = step.clamp(1e-12, 1e4);
                let mut accepted = false;
                for _ in 0..40 {
                    let trial: Vec<f64> = s
                        .iter()
                        .zip(g_s.iter())
                        .map(|(&sv, &gv)| (sv - alpha * gv).clamp(-INDICATOR_CAP, INDICATOR_CAP))
                        .collect();
                    let trial_value = lifted_value_flat(&p, &rots, &trial);
                    if trial_value <= value - 1e-4 * alpha * norm_sq {
                        s = trial;
                        value = trial_value;
                        accepted = true;
                        break;
                    }
                    alpha *= 0.5;
                }
                step = if accepted { (alpha * 2.0).min(1e4) } else { (step * 0.5).max(1e-12) };
            }
        }
        let mut labels_changed = true;
        if outer >= config.soft_iterations {
            // saturation phase: exact coordinate descent on the indicators
            let preds: Vec<Matrix3<f64>> = p
                .groups
                .iter()
                .map(|grp| rots[grp.j_vertex] * rots[grp.i_vertex].transpose())
                .collect();
            let residuals: Vec<[f64; 4]> = p
                .groups
                .iter()
                .zip(preds.iter())
                .map(|(grp, pred)| group_residuals(grp, pred))
                .collect();
            labels_changed = indicator_coordinate_sweep(&p, &preds, &residuals, &mut s);
            let after = lifted_value_flat(&p, &rots, &s);
            debug_assert!(after <= value + 1e-12 * value.abs().max(1.0));
            value = after.min(value);
            // tree-chaining the current hard labels solves the consistent
            // case exactly, where the unsquared norms make the Procrustes
            // sweeps crawl; keep the candidate only when it descends
            if labels_changed || outer == config.soft_iterations {
                let bits: Vec<u8> = s.iter().map(|&v| u8::from(v > 0.0)).collect();
                let chained = chain_rotations_for_labels(&p, &bits);
                let chained_value = lifted_value_flat(&p, &chained, &s);
                if chained_value < value {
                    rots = chained;
                    value = chained_value;
                }
            }
        }

        trace.push(value);

        if outer >= config.soft_iterations {
            // converged when the labels are stable and either the gradient is
            // flat or the objective stalled (the unsquared norms put a cone at
            // zero residual, so the gradient test alone cannot fire there)
            let stalled = value_at_start - value <= 1e-15 * value_at_start.abs().max(1e-30);
            let (g_rot, g_s) = lifted_gradient_flat(&p, &rots, &s);
            let g_inf = g_rot
                .iter()
                .map(|v| v.amax())
                .chain(g_s.iter().map(|v| v.abs()))
                .fold(0.0f64, f64::max);
            if !labels_changed && (g_inf < config.gradient_tolerance || stalled) {
                converged = true;
                break;
            }
        }
    }

    AveragingResult {
        rotations: p.rotations_to_map(&rots),
        indicators: p.indicators_to_set(&s),
        edge_weights: None,
        objective: value,
        trace,
        converged,
    }
}
