use ambigraph::averaging::*;
use ambigraph::geometry::*;
use ambigraph::multigraph::*;
use ambigraph::ppe::AmbiguousDetection;
use nalgebra::{Vector2, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::collections::BTreeMap;

fn random_rotation(rng: &mut impl Rng) -> Rotation {
    let axis = Vector3::new(rng.random::<f64>()-0.5, rng.random::<f64>()-0.5, rng.random::<f64>()-0.5);
    let angle = rng.random::<f64>() * std::f64::consts::PI * 2.0 - std::f64::consts::PI;
    let n = axis.norm();
    if n < 1e-9 { return Rotation::identity(); }
    Rotation::from_axis_angle(axis / n * angle)
}

fn det(t: u32, m: u32, r0: Rotation, r1: Rotation, e0: f64, e1: f64) -> AmbiguousDetection {
    let corners = CornerSet2D([Vector2::new(0.,0.), Vector2::new(1.,0.), Vector2::new(1.,1.), Vector2::new(0.,1.)]);
    let tr = Vector3::new(0.0,0.0,2.0);
    AmbiguousDetection::new(t, m, corners, RigidPose::new(r0,tr), RigidPose::new(r1,tr), e0, e1).unwrap()
}

fn scene(seed: u64, wrong: f64) -> (BTreeMap<DetectionKey, u8>, Vec<AmbiguousDetection>) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let images: Vec<Vec<u32>> = vec![
        vec![0,1,2], vec![1,2,3], vec![2,3,4], vec![3,4,5], vec![4,5,0], vec![5,0,1]];
    let mut truth = BTreeMap::new();
    for m in 0..6u32 { truth.insert(m, random_rotation(&mut rng)); }
    let mut labels = BTreeMap::new();
    let mut detections = Vec::new();
    for (t, markers) in images.iter().enumerate() {
        let cam = random_rotation(&mut rng);
        for &m in markers {
            let true_rot = cam.compose(&truth[&m].transpose());
            let false_rot = true_rot.compose(&random_rotation(&mut rng));
            let key = DetectionKey { image_id: t as u32, marker_id: m };
            if rng.random::<f64>() < wrong {
                labels.insert(key, 1u8);
                detections.push(det(t as u32, m, false_rot, true_rot, 0.1, 0.12));
            } else {
                labels.insert(key, 0u8);
                detections.push(det(t as u32, m, true_rot, false_rot, 0.1, 0.7));
            }
        }
    }
    (labels, detections)
}

fn main() {
    for &soft in &[20usize, 60, 150] {
        let mut solved = 0;
        let mut total = 0;
        for seed in 0..30u64 {
            let (labels, detections) = scene(seed * 7 + 15, 0.3);
            let g = build_multigraph(detections).unwrap();
            let init = spanning_tree_init(&g);
            let config = AveragingConfig { soft_iterations: soft, ..AveragingConfig::default() };
            let result = solve_lifted(&g, &init, &config);
            let hard = result.indicators.hard_labels();
            let direct = hard.iter().filter(|(k, &b)| labels[k] == b).count();
            let flip = hard.iter().filter(|(k, &b)| labels[k] == 1 - b).count();
            let n = hard.len();
            total += 1;
            if direct.max(flip) == n { solved += 1; }
            else if soft == 60 {
                let (_, true_obj) = averaged_objective_for_labels(&g, &labels);
                println!("  seed {seed}: {}/{} correct, obj {:.3e}, truth-labeling obj {:.3e}", direct.max(flip), n, result.objective, true_obj);
            }
        }
        println!("soft={soft}: {solved}/{total} scenes fully recovered");
    }
}
