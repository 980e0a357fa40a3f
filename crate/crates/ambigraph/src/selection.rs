//! Per-image selection of one pose hypothesis per detected marker.
//!
//! The optimised indicators induce a weight on each of the four parallel
//! edges of a pair (a product of per-endpoint hypothesis probabilities); the
//! maximum-weighted consistent clique of each image picks the bit assignment
//! whose induced edges carry the largest total weight. Consistent cliques
//! biject with bit assignments, so the search space is 2^V per image and is
//! solved exactly.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::averaging::{
    sigmoid, solve_lifted, AveragingConfig, AveragingResult, IndicatorSet,
};
use crate::geometry::RigidPose;
use crate::multigraph::{
    build_multigraph, spanning_tree_init, AmbiguityMultigraph, ConsistentClique, DetectionKey,
    MultigraphError,
};
use crate::ppe::AmbiguousDetection;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelectionError {
    #[error(transparent)]
    Multigraph(#[from] MultigraphError),
    #[error("weight table does not cover detection ({0}, {1})")]
    MissingWeight(u32, u32),
}

/// Per-pair weights for the four hypothesis labels of one image.
///
/// Weights of a pair always sum to 1: they are the product of two binary
/// endpoint distributions.
#[derive(Debug, Clone)]
pub struct EdgeWeightTable {
    pub image_id: u32,
    /// Marker ids of the image, sorted.
    pub markers: Vec<u32>,
    /// `(i < j) -> [w00, w01, w10, w11]`.
    pub weights: BTreeMap<(u32, u32), [f64; 4]>,
    /// Per-marker probability of hypothesis 1 (used by the single-marker
    /// fallback).
    hypothesis_prob: BTreeMap<u32, f64>,
}

/// Ratio of the smaller to the larger indicator probability, in [0, 1];
/// the indicator-space analog of the reprojection error ratio.
pub fn weight_ratio(s: f64) -> f64 {
    let p = sigmoid(s);
    let (lo, hi) = if p <= 1.0 - p { (p, 1.0 - p) } else { (1.0 - p, p) };
    lo / hi
}

/// Builds the per-pair weight table of one image from the indicators.
pub fn edge_weights(
    indicators: &IndicatorSet,
    image_id: u32,
    markers: &[u32],
) -> Result<EdgeWeightTable, SelectionError> {
    let mut prob = BTreeMap::new();
    for &m in markers {
        let s = indicators
            .get(&DetectionKey { image_id, marker_id: m })
            .ok_or(SelectionError::MissingWeight(image_id, m))?;
        prob.insert(m, sigmoid(s));
    }
    let mut weights = BTreeMap::new();
    let sorted: Vec<u32> = {
        let mut v = markers.to_vec();
        v.sort_unstable();
        v
    };
    for (x, &i) in sorted.iter().enumerate() {
        for &j in &sorted[x + 1..] {
            let (pi, pj) = (prob[&i], prob[&j]);
            weights.insert(
                (i, j),
                [
                    (1.0 - pi) * (1.0 - pj),
                    (1.0 - pi) * pj,
                    pi * (1.0 - pj),
                    pi * pj,
                ],
            );
        }
    }
    Ok(EdgeWeightTable { image_id, markers: sorted, weights, hypothesis_prob: prob })
}

/// Weight table from arbitrary per-edge weights (e.g. converged IRLS
/// weights), renormalized so each pair sums to 1. Pairs with all-zero weights
/// fall back to uniform.
pub fn edge_weights_from_raw(
    image_id: u32,
    markers: &[u32],
    raw: impl Fn(u32, u32, u8, u8) -> f64,
) -> EdgeWeightTable {
    let mut sorted = markers.to_vec();
    sorted.sort_unstable();
    let mut weights = BTreeMap::new();
    for (x, &i) in sorted.iter().enumerate() {
        for &j in &sorted[x + 1..] {
            let mut w = [
                raw(i, j, 0, 0),
                raw(i, j, 0, 1),
                raw(i, j, 1, 0),
                raw(i, j, 1, 1),
            ];
            let total: f64 = w.iter().sum();
            if total > 0.0 {
                for v in &mut w {
                    *v /= total;
                }
            } else {
                w = [0.25; 4];
            }
            weights.insert((i, j), w);
        }
    }
    EdgeWeightTable { image_id, markers: sorted, weights, hypothesis_prob: BTreeMap::new() }
}

/// The resolved hypothesis bits of one image, with the induced clique.
#[derive(Debug, Clone)]
pub struct SelectionResult {
    pub image_id: u32,
    /// Chosen hypothesis bit per marker.
    pub bits: BTreeMap<u32, u8>,
    /// The consistent clique those bits induce.
    pub clique: ConsistentClique,
    /// Total weight of the induced edges.
    pub objective: f64,
}

/// Exact maximum-weighted consistent clique for one image.
///
/// For `V <= 20` markers the 2^V bit assignments are enumerated directly
/// (first maximum wins, so ties prefer hypothesis 0); beyond that the
/// optimum is computed by per-vertex thresholding, which coincides with the
/// enumeration optimum because the weights factor into per-vertex terms.
/// A single-marker image has no edges; its bit falls back to thresholding
/// the hypothesis probability at 0.5 (ties to 0).
pub fn solve_mwc(table: &EdgeWeightTable) -> SelectionResult {
    let v = table.markers.len();
    assert!(v >= 1, "image must contain at least one detection");
    if v == 1 {
        let m = table.markers[0];
        let bit = match table.hypothesis_prob.get(&m) {
            Some(&p) if p > 0.5 => 1,
            _ => 0,
        };
        let bits: BTreeMap<u32, u8> = [(m, bit)].into_iter().collect();
        return SelectionResult {
            image_id: table.image_id,
            clique: ConsistentClique::from_bits(table.image_id, bits.clone()),
            bits,
            objective: 0.0,
        };
    }

    let score = |assignment: &[u8]| -> f64 {
        let mut total = 0.0;
        for (x, &i) in table.markers.iter().enumerate() {
            for (y, &j) in table.markers.iter().enumerate().skip(x + 1) {
                let w = &table.weights[&(i, j)];
                total += w[(assignment[x] * 2 + assignment[y]) as usize];
            }
        }
        total
    };

    let best: Vec<u8> = if v <= 20 {
        let mut best_mask = 0u32;
        let mut best_score = f64::NEG_INFINITY;
        for mask in 0..(1u32 << v) {
            let assignment: Vec<u8> =
                (0..v).map(|d| ((mask >> d) & 1) as u8).collect();
            let s = score(&assignment);
            if s > best_score {
                best_score = s;
                best_mask = mask;
            }
        }
        (0..v).map(|d| ((best_mask >> d) & 1) as u8).collect()
    } else {
        // factorized weights: optimum = independent per-vertex thresholding
        table
            .markers
            .iter()
            .map(|m| if table.hypothesis_prob.get(m).copied().unwrap_or(0.5) > 0.5 { 1 } else { 0 })
            .collect()
    };

    let objective = score(&best);
    let bits: BTreeMap<u32, u8> =
        table.markers.iter().copied().zip(best.iter().copied()).collect();
    SelectionResult {
        image_id: table.image_id,
        clique: ConsistentClique::from_bits(table.image_id, bits.clone()),
        bits,
        objective,
    }
}

/// One detection with its ambiguity resolved.
#[derive(Debug, Clone)]
pub struct ResolvedDetection {
    pub image_id: u32,
    pub marker_id: u32,
    pub label: u8,
    /// The selected marker-to-camera pose.
    pub pose: RigidPose,
    /// Reprojection error of the selected hypothesis.
    pub error: f64,
    pub detection: AmbiguousDetection,
}

/// Output of the end-to-end disambiguation.
#[derive(Debug, Clone)]
pub struct DisambiguationResult {
    pub per_image: Vec<SelectionResult>,
    pub resolved: Vec<ResolvedDetection>,
    pub averaging: AveragingResult,
}

impl DisambiguationResult {
    pub fn labels(&self) -> BTreeMap<DetectionKey, u8> {
        self.resolved
            .iter()
            .map(|r| (DetectionKey { image_id: r.image_id, marker_id: r.marker_id }, r.label))
            .collect()
    }
}

/// Selects one pose per detection on an already-built multigraph.
pub fn disambiguate_graph(
    g: &AmbiguityMultigraph,
    config: &AveragingConfig,
) -> Result<DisambiguationResult, SelectionError> {
    let init = spanning_tree_init(g);
    let averaging = solve_lifted(g, &init, config);
    let mut per_image = Vec::new();
    let mut resolved = Vec::new();
    for t in g.images() {
        let markers = g.covisible(t).expect("image listed by the graph");
        let table = edge_weights(&averaging.indicators, t, markers)?;
        let selection = solve_mwc(&table);
        for (&m, &bit) in &selection.bits {
            let detection = g.detection(t, m).expect("detection exists").clone();
            resolved.push(ResolvedDetection {
                image_id: t,
                marker_id: m,
                label: bit,
                pose: *detection.pose(bit),
                error: detection.error(bit),
                detection,
            });
        }
        per_image.push(selection);
    }
    Ok(DisambiguationResult { per_image, resolved, averaging })
}

/// End-to-end disambiguation: multigraph construction, lifted averaging, and
/// per-image maximum-weighted-clique selection. Never discards a detection:
/// the output has exactly one resolved pose per input detection.
pub fn disambiguate(
    detections: impl IntoIterator<Item = AmbiguousDetection>,
    config: &AveragingConfig,
) -> Result<DisambiguationResult, SelectionError> {
    let g = build_multigraph(detections)?;
    disambiguate_graph(&g, config)
}
