//! k-means patch codebook used as the discrete visual tokenizer.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    /// `[k, dim]` centroids.
    pub centroids: Tensor,
    pub fit_seed: u64,
}

/// A fitted codebook and the k-means objective after every assignment step.
#[derive(Clone, Debug, PartialEq)]
pub struct KMeansFit {
    pub codebook: Codebook,
    pub objective: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl Codebook {
    pub fn k(&self) -> usize {
        self.centroids.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.centroids.shape()[1]
    }

    /// Nearest centroid and its squared distance; ties go to the lowest index.
    pub fn nearest(&self, point: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for c in 0..self.k() {
            let d = sq_dist(point, self.centroids.row(c));
            if d < best.1 {
                best = (c, d);
            }
        }
        best
    }

    /// Code id of every row of `points` (`[n, dim]`).
    pub fn quantize(&self, points: &Tensor) -> Result<Vec<usize>> {
        let (n, dim) = points.dims2()?;
        if dim != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "quantize",
                lhs: points.shape().to_vec(),
                rhs: self.centroids.shape().to_vec(),
            });
        }
        Ok((0..n).map(|i| self.nearest(points.row(i)).0).collect())
    }
}

/// k-means++ initialization followed by `iters` Lloyd iterations.
///
/// A cluster left empty by an update is re-seeded at the point farthest from
/// its current centroid (lowest index on ties, each point used at most once
/// per iteration).
pub fn fit_codebook(points: &Tensor, k: usize, seed: u64, iters: usize) -> Result<KMeansFit> {
    let (n, dim) = points.dims2()?;
    if k < 2 {
        return Err(invalid(format!("codebook needs k >= 2, got {k}")));
    }
    if n < k {
        return Err(invalid(format!("{n} points cannot seed {k} centroids")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = init_plus_plus(points, k, &mut rng);
    let mut assign = vec![0usize; n];
    let mut dist = vec![0.0; n];
    let mut objective = Vec::with_capacity(iters + 1);
    for it in 0..=iters {
        let book = Codebook {
            centroids: Tensor::from_parts_unchecked(vec![k, dim], centroids.clone()),
            fit_seed: seed,
        };
        let mut total = 0.0;
        for i in 0..n {
            let (c, d) = book.nearest(points.row(i));
            assign[i] = c;
            dist[i] = d;
            total += d;
        }
        objective.push(total);
        if it == iters {
            break;
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assign[i]] += 1;
            for (s, v) in sums[assign[i] * dim..(assign[i] + 1) * dim].iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..dim {
                    centroids[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
                }
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n).fold(0, |best, i| if dist[i] > dist[best] { i } else { best });
                centroids[c * dim..(c + 1) * dim].copy_from_slice(points.row(far));
                dist[far] = 0.0;
            }
        }
    }
    let centroids = Tensor::from_parts_unchecked(vec![k, dim], centroids);
    if !centroids.is_finite() {
        return Err(Error::NonFinite { op: "fit_codebook" });
    }
    Ok(KMeansFit {
        codebook: Codebook {
            centroids,
            fit_seed: seed,
        },
        objective,
    })
}

fn init_plus_plus(points: &Tensor, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = points.shape()[0];
    let mut chosen = Vec::with_capacity(k);
    chosen.push(rng.random_range(0..n));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 {
                    pick = Some(i);
                    if target < d {
                        break;
                    }
                    target -= d;
                }
            }
            pick.expect("positive total has a positive entry")
        } else {
            (0..n).find(|i| !chosen.contains(i)).expect("n >= k")
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(next)));
        }
    }
    chosen.iter().flat_map(|&i| points.row(i).to_vec()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn book(rows: &[Vec<f64>]) -> Codebook {
        Codebook {
            centroids: Tensor::from_rows(rows).unwrap(),
            fit_seed: 0,
        }
    }

    #[test]
    fn exact_centroid_and_tie_rule() {
        let b = book(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![5.0, 5.0], vec![2.0, 2.0], vec![-1.0, 0.0]]);
        let pts = Tensor::from_rows(&[vec![2.0, 2.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(b.quantize(&pts).unwrap(), [3, 0]);
        // (0, 0) is equidistant to centroids 1 and 4 once centroid 0 is moved away
        let b = book(&[vec![9.0, 9.0], vec![1.0, 0.0], vec![5.0, 5.0], vec![2.0, 2.0], vec![-1.0, 0.0]]);
        assert_eq!(b.quantize(&Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap()).unwrap(), [1]);
    }

    #[test]
    fn dimension_mismatch() {
        let b = book(&[vec![0.0, 0.0], vec![1.0, 1.0]]);
        assert!(b.quantize(&Tensor::zeros(&[3, 3])).is_err());
    }

    #[test]
    fn k_equals_n_has_zero_error() {
        let pts = Tensor::from_rows(&[vec![0.0, 1.0], vec![3.0, 1.0], vec![-2.0, 4.0], vec![7.0, 7.0]]).unwrap();
        let fit = fit_codebook(&pts, 4, 11, 5).unwrap();
        assert_eq!(*fit.objective.last().unwrap(), 0.0);
    }

    #[test]
    fn refit_is_bit_identical() {
        let pts = Tensor::new(vec![30, 2], (0..60).map(|i| ((i * 37) % 11) as f64).collect()).unwrap();
        assert_eq!(fit_codebook(&pts, 3, 5, 10).unwrap(), fit_codebook(&pts, 3, 5, 10).unwrap());
    }

    #[test]
    fn rejects_bad_k() {
        let pts = Tensor::zeros(&[3, 2]);
        assert!(fit_codebook(&pts, 1, 0, 3).is_err());
        assert!(fit_codebook(&pts, 4, 0, 3).is_err());
    }
}
