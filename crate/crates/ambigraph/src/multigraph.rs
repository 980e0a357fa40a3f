//! The ambiguity multigraph: markers as vertices, four labelled
//! relative-rotation edges per covisible marker pair per image, one parallel
//! group per image the pair appears in.
//!
//! Edge label `ab` records which hypothesis composes the marker-to-marker
//! rotation: bit `a` for the lower-id endpoint, bit `b` for the higher-id
//! endpoint. Reversed queries return the transposed rotation with the label
//! bits swapped.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::geometry::Rotation;
use crate::ppe::AmbiguousDetection;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MultigraphError {
    #[error("multigraph is disconnected; components: {0:?}")]
    DisconnectedGraph(Vec<Vec<u32>>),
    #[error("duplicate detection for image {image_id}, marker {marker_id}")]
    DuplicateDetection { image_id: u32, marker_id: u32 },
    #[error("no detections supplied")]
    Empty,
}

/// Identifies one of the four parallel edges between a marker pair in one
/// image: `(image, i < j, label ab)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EdgeKey {
    pub image_id: u32,
    pub i: u32,
    pub j: u32,
    /// Hypothesis bit for marker `i`.
    pub a: u8,
    /// Hypothesis bit for marker `j`.
    pub b: u8,
}

impl EdgeKey {
    pub fn label_index(&self) -> usize {
        (self.a as usize) * 2 + self.b as usize
    }
}

/// Key of one marker detection: `(image, marker)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DetectionKey {
    pub image_id: u32,
    pub marker_id: u32,
}

/// The relative rotation of marker `i` with respect to marker `j`, composed
/// from the chosen per-marker hypotheses: `Rj_b^T * Ri_a`.
pub fn m2m_relative(ri_a: &Rotation, rj_b: &Rotation) -> Rotation {
    rj_b.transpose().compose(ri_a)
}

/// Per-image consistent clique: one hypothesis bit per detected marker and
/// the edge set those bits induce.
#[derive(Debug, Clone)]
pub struct ConsistentClique {
    pub image_id: u32,
    pub bits: BTreeMap<u32, u8>,
    pub edges: Vec<EdgeKey>,
}

impl ConsistentClique {
    /// Builds the clique induced by a bit assignment over the markers of one
    /// image; the result satisfies the consistency conditions by
    /// construction.
    pub fn from_bits(image_id: u32, bits: BTreeMap<u32, u8>) -> Self {
        let ids: Vec<u32> = bits.keys().copied().collect();
        let mut edges = Vec::new();
        for (x, &i) in ids.iter().enumerate() {
            for &j in &ids[x + 1..] {
                edges.push(EdgeKey { image_id, i, j, a: bits[&i], b: bits[&j] });
            }
        }
        ConsistentClique { image_id, bits, edges }
    }
}

/// Marker covisibility multigraph with all four hypothesis-labelled relative
/// rotations per pair per image. Immutable once built.
#[derive(Debug, Clone)]
pub struct AmbiguityMultigraph {
    /// Sorted marker ids (the vertex set).
    vertices: Vec<u32>,
    /// Markers detected per image, sorted, for every image with >= 1 detection.
    covisibility: BTreeMap<u32, Vec<u32>>,
    /// Detections keyed by (image, marker).
    detections: BTreeMap<DetectionKey, AmbiguousDetection>,
    /// For each (image, i < j): the four rotations indexed by label `2a + b`.
    edges: BTreeMap<(u32, u32, u32), [Rotation; 4]>,
}

impl AmbiguityMultigraph {
    pub fn vertices(&self) -> &[u32] {
        &self.vertices
    }

    /// Sorted marker set of one image (the paper's per-image covisibility set).
    pub fn covisible(&self, image_id: u32) -> Option<&[u32]> {
        self.covisibility.get(&image_id).map(|v| v.as_slice())
    }

    pub fn images(&self) -> impl Iterator<Item = u32> + '_ {
        self.covisibility.keys().copied()
    }

    pub fn detections(&self) -> impl Iterator<Item = (&DetectionKey, &AmbiguousDetection)> {
        self.detections.iter()
    }

    pub fn detection(&self, image_id: u32, marker_id: u32) -> Option<&AmbiguousDetection> {
        self.detections.get(&DetectionKey { image_id, marker_id })
    }

    /// Detection keys in canonical (image, marker) order; this ordering also
    /// indexes the solver's flattened indicator vectors.
    pub fn detection_keys(&self) -> Vec<DetectionKey> {
        self.detections.keys().copied().collect()
    }

    pub fn num_detections(&self) -> usize {
        self.detections.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len() * 4
    }

    /// Iterates over the canonical parallel-edge groups `(image, i < j)`.
    pub fn edge_groups(&self) -> impl Iterator<Item = (u32, u32, u32, &[Rotation; 4])> {
        self.edges.iter().map(|(&(t, i, j), rots)| (t, i, j, rots))
    }

    /// The rotation on an edge; reversed orientation (i > j) resolves to the
    /// transpose of the canonical edge with swapped label bits.
    pub fn edge_rotation(&self, key: &EdgeKey) -> Option<Rotation> {
        if key.i < key.j {
            self.edges
                .get(&(key.image_id, key.i, key.j))
                .map(|rots| rots[key.label_index()])
        } else {
            let canonical = EdgeKey {
                image_id: key.image_id,
                i: key.j,
                j: key.i,
                a: key.b,
                b: key.a,
            };
            self.edges
                .get(&(canonical.image_id, canonical.i, canonical.j))
                .map(|rots| rots[canonical.label_index()].transpose())
        }
    }

    /// Test-support constructor used to inject hand-crafted graphs.
    #[cfg(test)]
    pub(crate) fn edge_rotation_mut(&mut self, t: u32, i: u32, j: u32) -> &mut [Rotation; 4] {
        self.edges.get_mut(&(t, i, j)).expect("edge group must exist")
    }
}

/// Builds the multigraph from a set of ambiguous detections.
///
/// Deterministic and independent of input order (detections are keyed by
/// `(image, marker)`); fails if two detections share a key or if the
/// covisibility graph is disconnected.
pub fn build_multigraph(
    detections: impl IntoIterator<Item = AmbiguousDetection>,
) -> Result<AmbiguityMultigraph, MultigraphError> {
    let mut map: BTreeMap<DetectionKey, AmbiguousDetection> = BTreeMap::new();
    for d in detections {
        let key = DetectionKey { image_id: d.image_id, marker_id: d.marker_id };
        if map.insert(key, d).is_some() {
            return Err(MultigraphError::DuplicateDetection {
                image_id: key.image_id,
                marker_id: key.marker_id,
            });
        }
    }
    if map.is_empty() {
        return Err(MultigraphError::Empty);
    }

    let mut covisibility: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    let mut vertex_set: BTreeSet<u32> = BTreeSet::new();
    for key in map.keys() {
        covisibility.entry(key.image_id).or_default().push(key.marker_id);
        vertex_set.insert(key.marker_id);
    }
    let vertices: Vec<u32> = vertex_set.into_iter().collect();

    let mut edges = BTreeMap::new();
    for (&t, markers) in &covisibility {
        for (x, &i) in markers.iter().enumerate() {
            for &j in &markers[x + 1..] {
                let di = &map[&DetectionKey { image_id: t, marker_id: i }];
                let dj = &map[&DetectionKey { image_id: t, marker_id: j }];
                let rots = [
                    m2m_relative(di.rotation(0), dj.rotation(0)),
                    m2m_relative(di.rotation(0), dj.rotation(1)),
                    m2m_relative(di.rotation(1), dj.rotation(0)),
                    m2m_relative(di.rotation(1), dj.rotation(1)),
                ];
                edges.insert((t, i, j), rots);
            }
        }
    }

    let graph = AmbiguityMultigraph { vertices, covisibility, detections: map, edges };
    let components = connected_components(&graph);
    if components.len() > 1 {
        return Err(MultigraphError::DisconnectedGraph(components));
    }
    Ok(graph)
}

/// Connected components of the collapsed covisibility graph, each sorted.
pub fn connected_components(g: &AmbiguityMultigraph) -> Vec<Vec<u32>> {
    let index: BTreeMap<u32, usize> =
        g.vertices.iter().enumerate().map(|(k, &v)| (v, k)).collect();
    let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); g.vertices.len()];
    for (_, i, j, _) in g.edge_groups() {
        let (a, b) = (index[&i], index[&j]);
        adjacency[a].push(b);
        adjacency[b].push(a);
    }
    let mut seen = vec![false; g.vertices.len()];
    let mut components = Vec::new();
    for start in 0..g.vertices.len() {
        if seen[start] {
            continue;
        }
        let mut stack = vec![start];
        let mut comp = Vec::new();
        seen[start] = true;
        while let Some(v) = stack.pop() {
            comp.push(g.vertices[v]);
            for &n in &adjacency[v] {
                if !seen[n] {
                    seen[n] = true;
                    stack.push(n);
                }
            }
        }
        comp.sort_unstable();
        components.push(comp);
    }
    components
}

/// True iff `edge_subset` is a consistent clique for image `t`: it covers
/// exactly the markers detected in `t`, uses exactly one edge per pair, and
/// its labels are induced by a single hypothesis bit per marker.
pub fn is_consistent_clique(g: &AmbiguityMultigraph, t: u32, edge_subset: &[EdgeKey]) -> bool {
    let Some(markers) = g.covisible(t) else {
        return false;
    };
    if edge_subset.iter().any(|e| e.image_id != t) {
        return false;
    }
    let mut pair_count: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    let mut bits: BTreeMap<u32, u8> = BTreeMap::new();
    for e in edge_subset {
        let (lo, hi, bit_lo, bit_hi) =
            if e.i < e.j { (e.i, e.j, e.a, e.b) } else { (e.j, e.i, e.b, e.a) };
        *pair_count.entry((lo, hi)).or_insert(0) += 1;
        for (id, bit) in [(lo, bit_lo), (hi, bit_hi)] {
            match bits.get(&id) {
                Some(&prev) if prev != bit => return false,
                Some(_) => {}
                None => {
                    bits.insert(id, bit);
                }
            }
        }
    }
    // vertex cover: exactly the image's marker set
    if markers.len() == 1 {
        return edge_subset.is_empty();
    }
    if bits.len() != markers.len() || !markers.iter().all(|m| bits.contains_key(m)) {
        return false;
    }
    // exactly one edge per pair
    let expected_pairs = markers.len() * (markers.len() - 1) / 2;
    pair_count.len() == expected_pairs && pair_count.values().all(|&c| c == 1)
}

/// Initial absolute rotations and indicator values for the lifted solver.
#[derive(Debug, Clone)]
pub struct SpanningTreeInit {
    /// Absolute rotation per marker id; the root (smallest id) is identity.
    pub rotations: BTreeMap<u32, Rotation>,
    /// Soft indicator per detection: +sigma0 when the collapse chose
    /// hypothesis 1, else -sigma0.
    pub indicators: BTreeMap<DetectionKey, f64>,
}

/// Soft-commitment magnitude for the initial indicators.
pub const INIT_INDICATOR_MAGNITUDE: f64 = 1.0;

/// Minimum-spanning-tree initialization.
///
/// Parallel edges of each `(image, pair)` group collapse to the label with
/// the lowest combined endpoint reprojection error (the sum); the MST over
/// the collapsed graph is chained from the smallest marker id to produce
/// absolute rotations, and each detection's indicator is set from the label
/// chosen by its lowest-weight incident collapsed edge (ties toward
/// hypothesis 0).
pub fn spanning_tree_init(g: &AmbiguityMultigraph) -> SpanningTreeInit {
    // collapse: per (t, i, j) keep the cheapest label
    struct Collapsed {
        image_id: u32,
        i: u32,
        j: u32,
        a: u8,
        b: u8,
        weight: f64,
    }
    let mut collapsed: Vec<Collapsed> = Vec::new();
    for (t, i, j, _) in g.edge_groups() {
        let di = g.detection(t, i).expect("edge endpoints must be detected");
        let dj = g.detection(t, j).expect("edge endpoints must be detected");
        let mut best = (0u8, 0u8, f64::INFINITY);
        for a in 0..2u8 {
            for b in 0..2u8 {
                let w = di.error(a) + dj.error(b);
                if w < best.2 {
                    best = (a, b, w);
                }
            }
        }
        collapsed.push(Collapsed { image_id: t, i, j, a: best.0, b: best.1, weight: best.2 });
    }

    // Kruskal over the collapsed multigraph
    let index: BTreeMap<u32, usize> =
        g.vertices().iter().enumerate().map(|(k, &v)| (v, k)).collect();
    let mut order: Vec<usize> = (0..collapsed.len()).collect();
    order.sort_by(|&x, &y| {
        collapsed[x]
            .weight
            .partial_cmp(&collapsed[y].weight)
            .unwrap()
            .then_with(|| {
                let a = &collapsed[x];
                let b = &collapsed[y];
                (a.image_id, a.i, a.j).cmp(&(b.image_id, b.i, b.j))
            })
    });
    let mut parent: Vec<usize> = (0..g.vertices().len()).collect();
    fn find(parent: &mut Vec<usize>, x: usize) -> usize {
        let mut root = x;
        while parent[root] != root {
            root = parent[root];
        }
        let mut cur = x;
        while parent[cur] != root {
            let next = parent[cur];
            parent[cur] = root;
            cur = next;
        }
        root
    }
    let mut tree: Vec<&Collapsed> = Vec::new();
    for idx in order {
        let e = &collapsed[idx];
        let (ri, rj) = (find(&mut parent, index[&e.i]), find(&mut parent, index[&e.j]));
        if ri != rj {
            parent[ri] = rj;
            tree.push(e);
        }
    }

    // chain rotations from the root: measurement approximates R_j * R_i^T
    let mut rotations: BTreeMap<u32, Rotation> = BTreeMap::new();
    let root = g.vertices()[0];
    rotations.insert(root, Rotation::identity());
    let mut adjacency: BTreeMap<u32, Vec<&Collapsed>> = BTreeMap::new();
    for e in &tree {
        adjacency.entry(e.i).or_default().push(e);
        adjacency.entry(e.j).or_default().push(e);
    }
    let mut stack = vec![root];
    while let Some(v) = stack.pop() {
        let Some(neighbors) = adjacency.get(&v) else { continue };
        for e in neighbors.clone() {
            let key = EdgeKey { image_id: e.image_id, i: e.i, j: e.j, a: e.a, b: e.b };
            let measured = g.edge_rotation(&key).expect("tree edge must exist");
            let (known, unknown) = if e.i == v { (e.i, e.j) } else { (e.j, e.i) };
            if rotations.contains_key(&unknown) {
                continue;
            }
            let r_known = rotations[&known];
            let r_new = if unknown == e.j {
                // R_j = measured * R_i
                measured.compose(&r_known)
            } else {
                // R_i = measured^T * R_j
                measured.transpose().compose(&r_known)
            };
            rotations.insert(unknown, r_new);
            stack.push(unknown);
        }
    }

    // indicators from each detection's cheapest incident collapsed edge
    let mut chosen: BTreeMap<DetectionKey, (f64, u8)> = BTreeMap::new();
    for e in &collapsed {
        for (marker, bit) in [(e.i, e.a), (e.j, e.b)] {
            let key = DetectionKey { image_id: e.image_id, marker_id: marker };
            match chosen.get(&key) {
                Some(&(w, prev_bit)) => {
                    if e.weight < w || (e.weight == w && bit < prev_bit) {
                        chosen.insert(key, (e.weight, bit));
                    }
                }
                None => {
                    chosen.insert(key, (e.weight, bit));
                }
            }
        }
    }
    let mut indicators = BTreeMap::new();
    for (&key, _) in g.detections() {
        let bit = chosen.get(&key).map(|&(_, b)| b).unwrap_or(0);
        let s = if bit == 1 { INIT_INDICATOR_MAGNITUDE } else { -INIT_INDICATOR_MAGNITUDE };
        indicators.insert(key, s);
    }

    SpanningTreeInit { rotations, indicators }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::chordal_distance;
    use crate::testutil::{random_rotation, synthetic_detection, synthetic_scene};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn m2m_relative_identities() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let a = random_rotation(&mut rng);
        let b = random_rotation(&mut rng);
        assert!(chordal_distance(&m2m_relative(&a, &a), &Rotation::identity()) < 1e-12);
        let fwd = m2m_relative(&a, &b);
        let rev = m2m_relative(&b, &a);
        assert!(chordal_distance(&fwd.transpose(), &rev) < 1e-12);
        // loop closure through a shared middle hypothesis
        let c = random_rotation(&mut rng);
        let rij = m2m_relative(&a, &b);
        let rjk = m2m_relative(&b, &c);
        let rik = m2m_relative(&a, &c);
        assert!(chordal_distance(&rjk.compose(&rij), &rik) < 1e-12);
    }

    #[test]
    fn four_marker_three_image_scene_has_eight_parallel_edges() {
        // 4 markers, 3 images; all in image 0; {1,2} in image 1; {3,4} in
        // image 2 (ids 0-based here): markers 0,1 covisible twice -> 8 edges
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let (_, detections) = synthetic_scene(
            &mut rng,
            4,
            &[vec![0, 1, 2, 3], vec![0, 1], vec![2, 3]],
        );
        let g = build_multigraph(detections).unwrap();
        let pair_edges: usize = g
            .edge_groups()
            .filter(|&(_, i, j, _)| i == 0 && j == 1)
            .count()
            * 4;
        assert_eq!(pair_edges, 8);
        // total: image0 C(4,2)=6 pairs, images 1 and 2 one pair each -> 8 groups
        assert_eq!(g.num_edges(), 8 * 4);
    }

    #[test]
    fn edge_count_formula() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let images = vec![vec![0, 1, 2, 3], vec![1, 2], vec![0, 3, 2]];
        let (_, detections) = synthetic_scene(&mut rng, 4, &images);
        let g = build_multigraph(detections).unwrap();
        let expected: usize = images.iter().map(|m| 4 * m.len() * (m.len() - 1) / 2).sum();
        assert_eq!(g.num_edges(), expected);
        // single image with 4 markers: 4 * C(4,2) = 24
        let (_, detections) = synthetic_scene(&mut rng, 4, &[vec![0, 1, 2, 3]]);
        let g = build_multigraph(detections).unwrap();
        assert_eq!(g.num_edges(), 24);
    }

    #[test]
    fn stored_edges_satisfy_composition() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let (_, detections) = synthetic_scene(&mut rng, 5, &[vec![0, 1, 2], vec![2, 3, 4]]);
        let g = build_multigraph(detections.clone()).unwrap();
        for (t, i, j, rots) in g.edge_groups() {
            let di = g.detection(t, i).unwrap();
            let dj = g.detection(t, j).unwrap();
            for a in 0..2u8 {
                for b in 0..2u8 {
                    let expected = m2m_relative(di.rotation(a), dj.rotation(b));
                    let got = rots[(a * 2 + b) as usize];
                    assert!(chordal_distance(&expected, &got) < 1e-12);
                }
            }
        }
    }

    #[test]
    fn duplicated_hypothesis_duplicates_edges() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let shared = random_rotation(&mut rng);
        let other0 = random_rotation(&mut rng);
        let other1 = random_rotation(&mut rng);
        let detections = vec![
            synthetic_detection(0, 0, shared, shared, 0.2, 0.2),
            synthetic_detection(0, 1, other0, other1, 0.1, 0.5),
        ];
        let g = build_multigraph(detections).unwrap();
        for b in 0..2u8 {
            let e0 = g
                .edge_rotation(&EdgeKey { image_id: 0, i: 0, j: 1, a: 0, b })
                .unwrap();
            let e1 = g
                .edge_rotation(&EdgeKey { image_id: 0, i: 0, j: 1, a: 1, b })
                .unwrap();
            assert_eq!(e0.matrix(), e1.matrix());
        }
    }

    #[test]
    fn reversed_query_is_transpose_with_swapped_label() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let (_, detections) = synthetic_scene(&mut rng, 3, &[vec![0, 1, 2]]);
        let g = build_multigraph(detections).unwrap();
        for a in 0..2u8 {
            for b in 0..2u8 {
                let fwd = g
                    .edge_rotation(&EdgeKey { image_id: 0, i: 0, j: 1, a, b })
                    .unwrap();
                let rev = g
                    .edge_rotation(&EdgeKey { image_id: 0, i: 1, j: 0, a: b, b: a })
                    .unwrap();
                assert!(chordal_distance(&fwd.transpose(), &rev) < 1e-12);
            }
        }
    }

    #[test]
    fn disconnected_scene_reports_components() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let (_, mut detections) = synthetic_scene(&mut rng, 2, &[vec![0, 1]]);
        let (_, more) = synthetic_scene(&mut rng, 2, &[vec![0, 1]]);
        for mut d in more {
            d.image_id = 1;
            d.marker_id += 10;
            detections.push(d);
        }
        match build_multigraph(detections) {
            Err(MultigraphError::DisconnectedGraph(components)) => {
                assert_eq!(components.len(), 2);
                assert!(components.contains(&vec![0, 1]));
                assert!(components.contains(&vec![10, 11]));
            }
            other => panic!("expected disconnected error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_detection_rejected() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let (_, mut detections) = synthetic_scene(&mut rng, 2, &[vec![0, 1]]);
        detections.push(detections[0].clone());
        assert!(matches!(
            build_multigraph(detections),
            Err(MultigraphError::DuplicateDetection { .. })
        ));
    }

    #[test]
    fn build_is_input_order_independent() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let (_, detections) = synthetic_scene(&mut rng, 4, &[vec![0, 1, 2], vec![1, 2, 3]]);
        let g1 = build_multigraph(detections.clone()).unwrap();
        let mut reversed = detections;
        reversed.reverse();
        let g2 = build_multigraph(reversed).unwrap();
        assert_eq!(g1.num_edges(), g2.num_edges());
        for ((k1, r1), (k2, r2)) in g1.edges.iter().zip(g2.edges.iter()) {
            assert_eq!(k1, k2);
            for (a, b) in r1.iter().zip(r2.iter()) {
                assert_eq!(a.matrix(), b.matrix());
            }
        }
    }

    #[test]
    fn consistent_clique_detection() {
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let (_, detections) = synthetic_scene(&mut rng, 3, &[vec![0, 1, 2]]);
        let g = build_multigraph(detections).unwrap();
        // bits a0=0, a1=1, a2=0 (markers 0,1,2)
        let good = vec![
            EdgeKey { image_id: 0, i: 0, j: 1, a: 0, b: 1 },
            EdgeKey { image_id: 0, i: 0, j: 2, a: 0, b: 0 },
            EdgeKey { image_id: 0, i: 1, j: 2, a: 1, b: 0 },
        ];
        assert!(is_consistent_clique(&g, 0, &good));
        // vertex 0 would need both a=0 and a=1
        let bad = vec![
            EdgeKey { image_id: 0, i: 0, j: 1, a: 0, b: 1 },
            EdgeKey { image_id: 0, i: 0, j: 2, a: 1, b: 0 },
            EdgeKey { image_id: 0, i: 1, j: 2, a: 1, b: 0 },
        ];
        assert!(!is_consistent_clique(&g, 0, &bad));
        // missing a pair
        assert!(!is_consistent_clique(&g, 0, &good[..2]));
    }

    #[test]
    fn consistent_clique_count_is_two_to_the_v() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let (_, detections) = synthetic_scene(&mut rng, 3, &[vec![0, 1, 2]]);
        let g = build_multigraph(detections).unwrap();
        // enumerate all one-edge-per-pair subsets: 4^3 = 64 candidates
        let pairs = [(0u32, 1u32), (0, 2), (1, 2)];
        let mut count = 0;
        for l0 in 0..4u8 {
            for l1 in 0..4u8 {
                for l2 in 0..4u8 {
                    let subset: Vec<EdgeKey> = pairs
                        .iter()
                        .zip([l0, l1, l2])
                        .map(|(&(i, j), l)| EdgeKey { image_id: 0, i, j, a: l / 2, b: l % 2 })
                        .collect();
                    if is_consistent_clique(&g, 0, &subset) {
                        count += 1;
                    }
                }
            }
        }
        assert_eq!(count, 8);
    }

    #[test]
    fn clique_from_bits_is_consistent() {
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let (_, detections) = synthetic_scene(&mut rng, 4, &[vec![0, 1, 2, 3]]);
        let g = build_multigraph(detections).unwrap();
        let bits: BTreeMap<u32, u8> = [(0, 1), (1, 0), (2, 1), (3, 1)].into_iter().collect();
        let clique = ConsistentClique::from_bits(0, bits);
        assert!(is_consistent_clique(&g, 0, &clique.edges));
    }

    #[test]
    fn spanning_tree_recovers_noiseless_relative_rotations() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let (truth, detections) =
            synthetic_scene(&mut rng, 5, &[vec![0, 1, 2], vec![2, 3], vec![3, 4], vec![0, 4]]);
        let g = build_multigraph(detections).unwrap();
        let init = spanning_tree_init(&g);
        for i in 0..5u32 {
            for j in 0..5u32 {
                let est = init.rotations[&j].compose(&init.rotations[&i].transpose());
                let gt = truth[&j].compose(&truth[&i].transpose());
                assert!(
                    chordal_distance(&est, &gt) < 1e-9,
                    "relative rotation mismatch for ({i},{j})"
                );
            }
        }
        // hypothesis 0 has the lower error everywhere, so all indicators start negative
        assert!(init.indicators.values().all(|&s| s == -INIT_INDICATOR_MAGNITUDE));
    }

    #[test]
    fn single_image_tree_has_v_minus_one_edges() {
        let mut rng = ChaCha12Rng::seed_from_u64(14);
        let (_, detections) = synthetic_scene(&mut rng, 6, &[vec![0, 1, 2, 3, 4, 5]]);
        let g = build_multigraph(detections).unwrap();
        let init = spanning_tree_init(&g);
        assert_eq!(init.rotations.len(), 6);
        // chaining must have reached every vertex (tree property)
        assert!(g.vertices().iter().all(|v| init.rotations.contains_key(v)));
    }

    #[test]
    fn indicator_follows_cheapest_incident_edge() {
        let mut rng = ChaCha12Rng::seed_from_u64(15);
        // two markers in one image; marker 0's errors are nearly tied and
        // marker 1's strongly favor hypothesis 0, so the collapse picks label
        // (0, 0) and both indicators start at -sigma0
        let detections = vec![
            synthetic_detection(0, 0, random_rotation(&mut rng), random_rotation(&mut rng), 0.30, 0.32),
            synthetic_detection(0, 1, random_rotation(&mut rng), random_rotation(&mut rng), 0.04, 0.90),
        ];
        let g = build_multigraph(detections).unwrap();
        let init = spanning_tree_init(&g);
        assert_eq!(init.indicators[&DetectionKey { image_id: 0, marker_id: 0 }], -1.0);
        assert_eq!(init.indicators[&DetectionKey { image_id: 0, marker_id: 1 }], -1.0);
    }
}
