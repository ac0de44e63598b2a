use rand::seq::index::sample;
use rayon::prelude::*;

use crate::rng::rng_for;

/// Seeded Lloyd k-means under squared Euclidean distance.
///
/// `points` is row-major `n × dim`. Initial centroids are `k` distinct rows
/// drawn with the seeded generator; an empty cluster keeps its previous
/// centroid. Stops early once assignments no longer change.
pub fn kmeans(points: &[f32], dim: usize, k: usize, iters: usize, seed: u64) -> Vec<f32> {
    let n = points.len() / dim;
    assert!(k >= 1 && n >= k, "kmeans needs at least k points");
    let mut rng = rng_for(seed, &[0x6b6d]);
    let mut centroids: Vec<f32> = sample(&mut rng, n, k)
        .into_iter()
        .flat_map(|row| points[row * dim..(row + 1) * dim].iter().copied())
        .collect();

    let mut assignment = vec![usize::MAX; n];
    for _ in 0..iters {
        let next: Vec<usize> = points
            .par_chunks(dim)
            .map(|p| nearest_l2(p, &centroids, dim))
            .collect();
        if next == assignment {
            break;
        }
        assignment = next;

        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.chunks(dim).zip(&assignment) {
            counts[c] += 1;
            for (s, &x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(p) {
                *s += f64::from(x);
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let inv = 1.0 / counts[c] as f64;
            for (dst, &s) in centroids[c * dim..(c + 1) * dim]
                .iter_mut()
                .zip(&sums[c * dim..(c + 1) * dim])
            {
                *dst = (s * inv) as f32;
            }
        }
    }
    centroids
}

/// Index of the closest centroid; ties go to the lowest index.
pub fn nearest_l2(p: &[f32], centroids: &[f32], dim: usize) -> usize {
    let mut best = (f32::INFINITY, 0);
    for (c, cent) in centroids.chunks(dim).enumerate() {
        let d: f32 = p.iter().zip(cent).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.0 {
            best = (d, c);
        }
    }
    best.1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exactly_k_distinct_points_are_a_fixed_point() {
        let pts: Vec<f32> = (0..12).map(|i| (i * i) as f32).collect();
        let cents = kmeans(&pts, 2, 6, 3, 9);
        let mut got: Vec<Vec<f32>> = cents.chunks(2).map(<[f32]>::to_vec).collect();
        let mut want: Vec<Vec<f32>> = pts.chunks(2).map(<[f32]>::to_vec).collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, want);
    }

    #[test]
    fn separates_two_blobs() {
        let mut pts = Vec::new();
        for i in 0..20 {
            let j = i as f32 * 0.01;
            pts.extend([j, j]);
            pts.extend([10.0 + j, 10.0 - j]);
        }
        let cents = kmeans(&pts, 2, 2, 10, 1);
        let mut xs = [cents[0], cents[2]];
        xs.sort_by(f32::total_cmp);
        assert!(xs[0] < 1.0 && xs[1] > 9.0);
    }

    #[test]
    fn deterministic_given_seed() {
        let pts: Vec<f32> = (0..400).map(|i| ((i * 37) % 101) as f32).collect();
        assert_eq!(kmeans(&pts, 4, 8, 5, 3), kmeans(&pts, 4, 8, 5, 3));
    }
}
