use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use super::{Dataset, Split};
use crate::rng::seeded;

/// Unit-variance Gaussian clusters in the plane, one per class, with centres
/// spaced evenly on a circle of radius `separation`. Samples are shuffled.
pub fn synthetic_blobs(classes: usize, per_class: usize, separation: f64, seed: u64) -> Dataset {
    let classes = classes.max(2);
    let per_class = per_class.max(1);
    let mut rng = seeded(seed);
    let mut rows: Vec<([f64; 2], usize)> = Vec::with_capacity(classes * per_class);
    for k in 0..classes {
        let angle = std::f64::consts::TAU * k as f64 / classes as f64;
        let (cy, cx) = (separation * angle.sin(), separation * angle.cos());
        for _ in 0..per_class {
            let dx: f64 = StandardNormal.sample(&mut rng);
            let dy: f64 = StandardNormal.sample(&mut rng);
            rows.push(([cx + dx, cy + dy], k));
        }
    }
    rows.shuffle(&mut rng);
    let features = rows.iter().flat_map(|(p, _)| *p).collect();
    let labels = rows.iter().map(|&(_, k)| k).collect();
    Dataset::new(features, vec![2], labels, classes, Split::Train).expect("blob layout")
}
