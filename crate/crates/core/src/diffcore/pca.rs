//! Principal component analysis via cyclic Jacobi on the sample covariance.

use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 100;

/// Eigen-decomposition of a symmetric matrix.
///
/// Returns eigenvalues in descending order and the matching unit
/// eigenvectors as rows. Each eigenvector is signed so that its
/// largest-magnitude entry (first on ties) is positive.
pub fn symmetric_eigen(a: &[f64], d: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if a.len() != d * d || d == 0 {
        return Err(Error::shape("symmetric_eigen", format!("{d}x{d} matrix"), format!("{} values", a.len())));
    }
    let mut a = a.to_vec();
    for i in 0..d {
        for j in 0..i {
            let m = 0.5 * (a[i * d + j] + a[j * d + i]);
            a[i * d + j] = m;
            a[j * d + i] = m;
        }
    }
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = d as f64 * f64::EPSILON * scale.max(f64::MIN_POSITIVE);

    let mut converged = d == 1;
    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..d)
            .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * d + j] * a[i * d + j])
            .sum::<f64>()
            .sqrt();
        if off <= tol {
            converged = true;
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                // negligible next to both diagonal entries: drop it
                let (app, aqq) = (a[p * d + p].abs(), a[q * d + q].abs());
                if apq.abs() <= 0.5 * f64::EPSILON * app.min(aqq) {
                    a[p * d + q] = 0.0;
                    a[q * d + p] = 0.0;
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let (akp, akq) = (a[k * d + p], a[k * d + q]);
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let (apk, aqk) = (a[p * d + k], a[q * d + k]);
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let (vkp, vkq) = (v[k * d + p], v[k * d + q]);
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        return Err(Error::Numerical(format!(
            "Jacobi eigensolver did not converge in {MAX_SWEEPS} sweeps"
        )));
    }

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| a[j * d + j].total_cmp(&a[i * d + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i * d + i]).collect();
    let vectors = order
        .iter()
        .map(|&col| {
            let mut e: Vec<f64> = (0..d).map(|r| v[r * d + col]).collect();
            orient(&mut e);
            e
        })
        .collect();
    Ok((values, vectors))
}

/// Flips `e` so its largest-magnitude entry is positive.
fn orient(e: &mut [f64]) {
    let mut best = 0;
    for (i, x) in e.iter().enumerate() {
        if x.abs() > e[best].abs() {
            best = i;
        }
    }
    if e[best] < 0.0 {
        e.iter_mut().for_each(|x| *x = -*x);
    }
}

/// A fitted, frozen PCA projection.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaBasis {
    mean: Vec<f64>,
    /// `k × d`, rows are principal directions.
    components: Tensor,
    explained_variance: Vec<f64>,
}

impl PcaBasis {
    /// Reassembles a basis from stored parts, checking dimensions only.
    pub fn from_parts(mean: Vec<f64>, components: Tensor, explained_variance: Vec<f64>) -> Result<Self> {
        let (k, d) = components.dims2();
        if components.rank() != 2 || d != mean.len() || k != explained_variance.len() {
            return Err(Error::shape(
                "PcaBasis::from_parts",
                format!("components [{}, {}]", explained_variance.len(), mean.len()),
                format!("{:?}", components.shape()),
            ));
        }
        Ok(PcaBasis {
            mean,
            components,
            explained_variance,
        })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn components(&self) -> &Tensor {
        &self.components
    }

    pub fn explained_variance(&self) -> &[f64] {
        &self.explained_variance
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.explained_variance.len()
    }

    /// `components · (x − mean)`.
    pub fn transform(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::shape(
                "pca_transform",
                format!("vector of dim {}", self.input_dim()),
                format!("dim {}", x.len()),
            ));
        }
        Ok((0..self.output_dim())
            .map(|r| {
                self.components
                    .row(r)
                    .iter()
                    .zip(x.iter().zip(&self.mean))
                    .map(|(c, (xv, m))| c * (xv - m))
                    .sum()
            })
            .collect())
    }

    /// `mean + componentsᵀ · z`.
    pub fn reconstruct(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.output_dim() {
            return Err(Error::shape(
                "pca_reconstruct",
                format!("vector of dim {}", self.output_dim()),
                format!("dim {}", z.len()),
            ));
        }
        let mut out = self.mean.clone();
        for (r, zr) in z.iter().enumerate() {
            for (o, c) in out.iter_mut().zip(self.components.row(r)) {
                *o += zr * c;
            }
        }
        Ok(out)
    }
}

/// Fits the top-`k` principal directions of the rows of `samples` (`n × d`).
pub fn pca_fit(samples: &Tensor, k: usize) -> Result<PcaBasis> {
    if samples.rank() != 2 {
        return Err(Error::shape("pca_fit", "an n×d matrix", format!("{:?}", samples.shape())));
    }
    let (n, d) = samples.dims2();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("pca_fit needs at least 2 samples, got {n}")));
    }
    if k == 0 || k > (n - 1).min(d) {
        return Err(Error::InvalidArgument(format!(
            "pca_fit: k = {k} outside 1..={} for {n} samples of dim {d}",
            (n - 1).min(d)
        )));
    }
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, x) in mean.iter_mut().zip(samples.row(r)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut cov = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for r in 0..n {
        for ((c, x), m) in centered.iter_mut().zip(samples.row(r)).zip(&mean) {
            *c = x - m;
        }
        for i in 0..d {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            for j in i..d {
                cov[i * d + j] += ci * centered[j];
            }
        }
    }
    let div = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / div;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }

    let (values, vectors) = symmetric_eigen(&cov, d)?;
    let explained_variance = values.iter().take(k).map(|v| v.max(0.0)).collect();
    let components = Tensor::from_parts(vec![k, d], vectors.into_iter().take(k).flatten().collect());
    Ok(PcaBasis {
        mean,
        components,
        explained_variance,
    })
}
