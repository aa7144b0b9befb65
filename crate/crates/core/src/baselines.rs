//! Classical reference detectors over flattened windows.

use crate::detect::WindowScorer;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const POWER_TOL: f64 = 1e-10;
const POWER_ITERS: usize = 1000;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Removes the components of `v` along each (unit) basis vector, twice for stability.
fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for _ in 0..2 {
        for b in basis {
            let c = dot(v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
    }
}

fn check_rows(rows: &[Vec<f64>]) -> Result<usize> {
    let dim = rows
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::config("baseline needs at least one training window"))?;
    if dim == 0 || rows.iter().any(|r| r.len() != dim) {
        return Err(Error::shape("training windows differ in size"));
    }
    Ok(dim)
}

/// Principal subspace of mean-centred training vectors; scores are the
/// distance from that subspace. Inputs are expected to be per-channel
/// normalized already.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `r` orthonormal directions, leading variance first.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
}

impl PcaModel {
    pub fn fit(rows: &[Vec<f64>], r: usize) -> Result<Self> {
        let dim = check_rows(rows)?;
        if r == 0 || r > dim {
            return Err(Error::config(format!("PCA rank {r} must lie in 1..={dim}")));
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for row in rows {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / n);
        }

        let mut cov = vec![0.0; dim * dim];
        let mut z = vec![0.0; dim];
        for row in rows {
            z.iter_mut()
                .zip(row.iter().zip(&mean))
                .for_each(|(z, (v, m))| *z = v - m);
            for a in 0..dim {
                let za = z[a] / n;
                if za == 0.0 {
                    continue;
                }
                let line = &mut cov[a * dim..(a + 1) * dim];
                for b in a..dim {
                    line[b] += za * z[b];
                }
            }
        }
        for a in 0..dim {
            for b in 0..a {
                cov[a * dim + b] = cov[b * dim + a];
            }
        }

        let (components, eigenvalues) = leading_eigenvectors(&cov, dim, r);
        Ok(Self {
            mean,
            components,
            eigenvalues,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn rank(&self) -> usize {
        self.components.len()
    }

    /// `‖c − PPᵀc‖` for the centred vector `c = x − mean`.
    pub fn score(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::shape(format!(
                "vector of length {} for a {}-dimensional PCA model",
                x.len(),
                self.dim()
            )));
        }
        let mut z: Vec<f64> = x.iter().zip(&self.mean).map(|(v, m)| v - m).collect();
        for c in &self.components {
            let proj = dot(&z, c);
            z.iter_mut().zip(c).for_each(|(v, u)| *v -= proj * u);
        }
        Ok(norm(&z))
    }
}

/// Power iteration with deflation on a symmetric PSD `dim × dim` matrix.
///
/// Directions with zero eigenvalue are completed to an orthonormal set from
/// the standard basis.
fn leading_eigenvectors(cov: &[f64], dim: usize, r: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut components: Vec<Vec<f64>> = Vec::with_capacity(r);
    let mut eigenvalues = Vec::with_capacity(r);
    let scale = (0..dim).map(|i| cov[i * dim + i]).fold(0.0, f64::max);
    let mut av = vec![0.0; dim];

    for i in 0..r {
        // Deterministic start that is unlikely to be orthogonal to the target.
        let mut v: Vec<f64> = (0..dim)
            .map(|j| 1.0 + ((i * 31 + j * 17) % 97) as f64 / 97.0)
            .collect();
        orthogonalize(&mut v, &components);
        let mut lambda = 0.0;
        let mut found = false;
        if norm(&v) > 0.0 && scale > 0.0 {
            let n0 = norm(&v);
            v.iter_mut().for_each(|x| *x /= n0);
            for _ in 0..POWER_ITERS {
                for a in 0..dim {
                    av[a] = dot(&cov[a * dim..(a + 1) * dim], &v);
                }
                // Deflate: project out found directions.
                orthogonalize(&mut av, &components);
                let len = norm(&av);
                if len <= POWER_TOL * scale {
                    lambda = 0.0;
                    break;
                }
                let next: Vec<f64> = av.iter().map(|x| x / len).collect();
                let delta = next
                    .iter()
                    .zip(&v)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                v = next;
                lambda = len;
                found = true;
                if delta < POWER_TOL {
                    break;
                }
            }
        }
        if !found || lambda <= POWER_TOL * scale {
            v = complete_basis(&components, dim);
            lambda = 0.0;
        }
        components.push(v);
        eigenvalues.push(lambda);
    }
    (components, eigenvalues)
}

fn complete_basis(basis: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut best = (0.0, vec![0.0; dim]);
    for e in 0..dim {
        let mut v = vec![0.0; dim];
        v[e] = 1.0;
        orthogonalize(&mut v, basis);
        let len = norm(&v);
        if len > best.0 {
            best = (len, v);
        }
    }
    let (len, mut v) = best;
    v.iter_mut().for_each(|x| *x /= len);
    v
}

/// Exact k-nearest-neighbour distance score.
#[derive(Clone, Debug, PartialEq)]
pub struct KnnModel {
    pub k: usize,
    pub reference: Vec<Vec<f64>>,
}

impl KnnModel {
    pub fn fit(rows: &[Vec<f64>], k: usize) -> Result<Self> {
        check_rows(rows)?;
        if k == 0 || k > rows.len() {
            return Err(Error::config(format!(
                "k = {k} must lie in 1..={}",
                rows.len()
            )));
        }
        Ok(Self {
            k,
            reference: rows.to_vec(),
        })
    }

    /// Mean Euclidean distance to the `k` closest reference vectors.
    pub fn score(&self, x: &[f64]) -> Result<f64> {
        let dim = self.reference[0].len();
        if x.len() != dim {
            return Err(Error::shape(format!(
                "vector of length {} for {dim}-dimensional references",
                x.len()
            )));
        }
        let mut d: Vec<f64> = self
            .reference
            .iter()
            .map(|r| r.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .collect();
        let k = self.k;
        d.select_nth_unstable_by(k - 1, f64::total_cmp);
        Ok(d[..k].iter().map(|v| v.sqrt()).sum::<f64>() / k as f64)
    }
}

impl WindowScorer for PcaModel {
    fn score(&self, _index: usize, window: &Tensor) -> Result<f64> {
        PcaModel::score(self, window.data())
    }
}

impl WindowScorer for KnnModel {
    fn score(&self, _index: usize, window: &Tensor) -> Result<f64> {
        KnnModel::score(self, window.data())
    }
}
