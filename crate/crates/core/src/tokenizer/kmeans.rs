//! Lloyd's k-means with k-means++ seeding.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rayon::prelude::*;

use crate::matrix::sq_dist;
use crate::{Matrix, Scalar};

/// Below this many distance evaluations the assignment step stays serial.
const PARALLEL_THRESHOLD: usize = 1 << 16;

#[derive(Debug, Clone)]
pub struct KMeans<T> {
    pub centroids: Matrix<T>,
    pub assignment: Vec<usize>,
    /// Sum of squared distances to the assigned centroid.
    pub inertia: f64,
    pub iterations: usize,
}

/// Nearest centroid by Euclidean distance; ties go to the lowest index.
pub fn nearest<T: Scalar>(centroids: &Matrix<T>, x: &[T]) -> (usize, T) {
    let mut best = (0, T::infinity());
    for c in 0..centroids.rows() {
        let d = sq_dist(centroids.row(c), x);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign_all<T: Scalar>(points: &Matrix<T>, centroids: &Matrix<T>) -> Vec<usize> {
    let work = points.rows() * centroids.rows() * points.cols().max(1);
    if work >= PARALLEL_THRESHOLD {
        (0..points.rows())
            .into_par_iter()
            .map(|i| nearest(centroids, points.row(i)).0)
            .collect()
    } else {
        (0..points.rows()).map(|i| nearest(centroids, points.row(i)).0).collect()
    }
}

fn plus_plus<T: Scalar>(points: &Matrix<T>, k: usize, rng: &mut impl Rng) -> Matrix<T> {
    let n = points.rows();
    let mut centroids = Matrix::zeros(k, points.cols());
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(first)).as_f64()).collect();
    for c in 1..k {
        let pick = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(rng),
            // Every point coincides with a chosen centroid.
            Err(_) => rng.random_range(0..n),
        };
        centroids.row_mut(c).copy_from_slice(points.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(pick)).as_f64());
        }
    }
    centroids
}

/// Recomputes means; an empty cluster takes the farthest point of the
/// currently largest cluster.
fn update<T: Scalar>(points: &Matrix<T>, assignment: &mut [usize], k: usize) -> Matrix<T> {
    let dim = points.cols();
    let means = |assignment: &[usize]| {
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &a) in assignment.iter().enumerate() {
            counts[a] += 1;
            for (s, &x) in sums[a * dim..(a + 1) * dim].iter_mut().zip(points.row(i)) {
                *s += x.as_f64();
            }
        }
        (sums, counts)
    };
    let (mut sums, mut counts) = means(assignment);
    while let Some(empty) = counts.iter().position(|&c| c == 0) {
        let largest = (0..k).max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a))).unwrap();
        if counts[largest] < 2 {
            break;
        }
        let centre: Vec<T> = sums[largest * dim..(largest + 1) * dim]
            .iter()
            .map(|&s| T::of(s / counts[largest] as f64))
            .collect();
        let mut far = (usize::MAX, T::neg_infinity());
        for (i, &a) in assignment.iter().enumerate() {
            if a == largest {
                let d = sq_dist(points.row(i), &centre);
                if d > far.1 {
                    far = (i, d);
                }
            }
        }
        assignment[far.0] = empty;
        (sums, counts) = means(assignment);
    }
    let mut centroids = Matrix::zeros(k, dim);
    for c in 0..k {
        if counts[c] == 0 {
            continue;
        }
        for (dst, &s) in centroids.row_mut(c).iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
            *dst = T::of(s / counts[c] as f64);
        }
    }
    centroids
}

/// Requires `1 ≤ k ≤ points.rows()`.
pub fn kmeans<T: Scalar>(points: &Matrix<T>, k: usize, iters: usize, rng: &mut impl Rng) -> KMeans<T> {
    assert!(k >= 1 && k <= points.rows(), "k must lie in 1..=n");
    let mut centroids = plus_plus(points, k, rng);
    let mut assignment = assign_all(points, &centroids);
    let mut iterations = 0;
    for _ in 0..iters {
        iterations += 1;
        centroids = update(points, &mut assignment, k);
        let next = assign_all(points, &centroids);
        let changed = next != assignment;
        assignment = next;
        if !changed {
            break;
        }
    }
    let inertia = assignment
        .iter()
        .enumerate()
        .map(|(i, &a)| sq_dist(points.row(i), centroids.row(a)).as_f64())
        .sum();
    KMeans {
        centroids,
        assignment,
        inertia,
        iterations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn separated_point_masses_are_recovered() {
        let locs = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]];
        let mut rows = Vec::new();
        for l in &locs {
            for _ in 0..4 {
                rows.push(l.to_vec());
            }
        }
        let pts = Matrix::<f64>::from_rows(&rows);
        for seed in 0..10 {
            let km = kmeans(&pts, 3, 1, &mut rng::seeded(seed));
            let mut found: Vec<Vec<f64>> = (0..3).map(|c| km.centroids.row(c).to_vec()).collect();
            found.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut want: Vec<Vec<f64>> = locs.iter().map(|l| l.to_vec()).collect();
            want.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!(found, want);
            assert_eq!(km.inertia, 0.0);
        }
    }

    #[test]
    fn k_equals_n_gives_each_point_its_own_centroid() {
        let pts = Matrix::<f64>::from_rows(&[vec![0.0], vec![1.0], vec![5.0], vec![-2.0]]);
        let km = kmeans(&pts, 4, 10, &mut rng::seeded(1));
        assert_eq!(km.inertia, 0.0);
        let mut a = km.assignment.clone();
        a.sort();
        assert_eq!(a, vec![0, 1, 2, 3]);
    }

    #[test]
    fn empty_cluster_gets_reseeded() {
        // Three identical points and one outlier with k = 3 forces duplicates
        // in the seeding; no cluster may end up empty while a larger one has
        // spare points.
        let pts = Matrix::<f64>::from_rows(&[vec![0.0], vec![0.0], vec![0.0], vec![9.0], vec![9.1]]);
        for seed in 0..20 {
            let km = kmeans(&pts, 3, 20, &mut rng::seeded(seed));
            let mut counts = [0; 3];
            for &a in &km.assignment {
                counts[a] += 1;
            }
            assert!(counts.iter().all(|&c| c > 0), "seed {seed}: {counts:?}");
        }
    }

    #[test]
    fn nearest_ties_pick_lowest_index() {
        let c = Matrix::<f64>::from_rows(&[vec![1.0], vec![-1.0]]);
        assert_eq!(nearest(&c, &[0.0]).0, 0);
    }
}
