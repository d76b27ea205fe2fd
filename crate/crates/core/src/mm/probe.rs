//! Layer-wise separability probing with 2-means clustering.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, IoContext, Result};

pub const PROBE_SEED: u64 = 0;
pub const PROBE_RESTARTS: usize = 10;
const MAX_ITERS: usize = 100;

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    pub assignment: Vec<usize>,
    pub inertia: f64,
}

fn lloyd(points: &[Vec<f64>], mut centers: [Vec<f64>; 2]) -> Clustering {
    let dim = points[0].len();
    let mut assignment = vec![usize::MAX; points.len()];
    for _ in 0..MAX_ITERS {
        let mut changed = false;
        for (p, a) in points.iter().zip(&mut assignment) {
            let c = usize::from(dist2(p, &centers[1]) < dist2(p, &centers[0]));
            if *a != c {
                *a = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for (k, center) in centers.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points
                .iter()
                .zip(&assignment)
                .filter(|(_, &a)| a == k)
                .map(|(p, _)| p)
                .collect();
            if members.is_empty() {
                continue;
            }
            let mut mean = vec![0.0; dim];
            for m in &members {
                for (s, v) in mean.iter_mut().zip(m.iter()) {
                    *s += v;
                }
            }
            for s in &mut mean {
                *s /= members.len() as f64;
            }
            *center = mean;
        }
    }
    let inertia = points
        .iter()
        .zip(&assignment)
        .map(|(p, &a)| dist2(p, &centers[a]))
        .sum();
    Clustering { assignment, inertia }
}

/// Best-of-`restarts` Lloyd's algorithm with two centers seeded from
/// distinct random points.
pub fn kmeans2(points: &[Vec<f64>], seed: u64, restarts: usize) -> Result<Clustering> {
    let first = points.first().ok_or(Error::Degenerate("no points to cluster".into()))?;
    if points.iter().all(|p| p == first) {
        return Err(Error::Degenerate("all representations are identical".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<Clustering> = None;
    for _ in 0..restarts.max(1) {
        let i = rng.random_range(0..points.len());
        let j = loop {
            let j = rng.random_range(0..points.len());
            if points[j] != points[i] {
                break j;
            }
        };
        let c = lloyd(points, [points[i].clone(), points[j].clone()]);
        if best.as_ref().is_none_or(|b| c.inertia < b.inertia) {
            best = Some(c);
        }
    }
    Ok(best.unwrap())
}

/// Accuracy after mapping each cluster to its majority label.
pub fn majority_accuracy(assignment: &[usize], labels: &[bool]) -> f64 {
    let mut counts = [[0usize; 2]; 2];
    for (&a, &l) in assignment.iter().zip(labels) {
        counts[a][usize::from(l)] += 1;
    }
    let correct: usize = counts.iter().map(|c| c[0].max(c[1])).sum();
    correct as f64 / assignment.len() as f64
}

/// Clusters real and fake representations together and scores the split.
pub fn separability(real: &[Vec<f64>], fake: &[Vec<f64>]) -> Result<f64> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::SingleClass {
            positives: fake.len(),
            negatives: real.len(),
        });
    }
    let mut points = real.to_vec();
    points.extend_from_slice(fake);
    let labels: Vec<bool> = (0..points.len()).map(|i| i >= real.len()).collect();
    let c = kmeans2(&points, PROBE_SEED, PROBE_RESTARTS)?;
    Ok(majority_accuracy(&c.assignment, &labels))
}

/// Writes `layer,accuracy` rows; layers are numbered from 1.
pub fn write_probe_csv(path: &Path, accuracies: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["layer", "accuracy"])?;
    for (i, a) in accuracies.iter().enumerate() {
        w.write_record([(i + 1).to_string(), format!("{a:.6}")])?;
    }
    w.flush().at(path)
}
