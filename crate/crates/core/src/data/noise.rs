use rand::Rng;

use crate::types::GroundTruthPoint;

/// Symmetric label noise: each point independently, with probability `rate`,
/// gets a uniformly drawn class different from its own. Coordinates are
/// untouched.
pub fn inject_label_noise(points: &[GroundTruthPoint], rate: f64, num_classes: usize, seed: u64) -> Vec<GroundTruthPoint> {
    debug_assert!((0.0..1.0).contains(&rate));
    let mut rng = super::stream(seed, u64::MAX);
    points
        .iter()
        .map(|p| {
            let flip = rng.gen_bool(rate.clamp(0.0, 1.0));
            if !flip || num_classes < 2 {
                return *p;
            }
            // Draw from the other C − 1 classes.
            let mut c = rng.gen_range(0..num_classes - 1);
            if c >= p.class_id {
                c += 1;
            }
            GroundTruthPoint { class_id: c, ..*p }
        })
        .collect()
}
