use crate::rng::Stream;
use crate::tensor::{self, Tensor};

/// `batch` independent points uniform on the unit sphere in `R^c`.
pub fn sample_unit_sphere(batch: usize, c: usize, rng: &mut Stream) -> Tensor {
    let mut v = Tensor::zeros(&[batch, c]);
    for r in 0..batch {
        let row = v.row_mut(r);
        loop {
            row.iter_mut().for_each(|x| *x = rng.normal());
            let norm = tensor::norm2(row);
            if norm > 0.0 {
                row.iter_mut().for_each(|x| *x /= norm);
                break;
            }
        }
    }
    v
}

/// Monte Carlo statistics of the single-projection estimate `C ||v J||^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorStats {
    pub mean: f64,
    /// Unbiased sample variance.
    pub variance: f64,
    pub n_samples: usize,
    /// `2C/(C+2) Tr((JJ^T)^2) - 2/(C+2) ||J||_F^4`.
    pub closed_form_variance: f64,
    /// `||J||_F^2`, the estimator's expectation.
    pub exact_mean: f64,
    /// Standard error of `mean`.
    pub mean_std_error: f64,
    /// Standard error of `variance`, from the sample fourth central moment.
    pub variance_std_error: f64,
    pub classes: usize,
}

impl EstimatorStats {
    /// `2(C-1)/(C+2)`, the worst case of variance over squared mean.
    pub fn bound(&self) -> f64 {
        let c = self.classes as f64;
        2.0 * (c - 1.0) / (c + 2.0)
    }

    pub fn relative_variance(&self) -> f64 {
        self.variance / (self.mean * self.mean)
    }

    /// Monte Carlo error of [`relative_variance`](Self::relative_variance),
    /// to first order.
    pub fn relative_variance_error(&self) -> f64 {
        let m2 = self.mean * self.mean;
        let dv = self.variance_std_error / m2;
        let dm = 2.0 * self.variance * self.mean_std_error / (m2 * self.mean.abs());
        (dv * dv + dm * dm).sqrt()
    }
}

/// Samples `n_samples` unit vectors against a fixed `C x I` Jacobian.
pub fn estimator_stats(j: &Tensor, n_samples: usize, rng: &mut Stream) -> EstimatorStats {
    assert!(n_samples >= 2, "need at least two samples for a variance");
    let c = j.rows();
    let gram = tensor::matmul_nt(j, j);
    let trace: f64 = (0..c).map(|i| gram.get(i, i)).sum();
    let trace_sq = gram.sum_sq();
    let cf = c as f64;
    let closed_form_variance = 2.0 * cf / (cf + 2.0) * trace_sq - 2.0 / (cf + 2.0) * trace * trace;

    let v = sample_unit_sphere(n_samples, c, rng);
    let samples: Vec<f64> = v
        .iter_rows()
        .map(|row| {
            let quad: f64 = (0..c).map(|a| row[a] * tensor::dot(gram.row(a), row)).sum();
            cf * quad
        })
        .collect();
    let n = n_samples as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let m2 = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    let m4 = samples.iter().map(|s| (s - mean).powi(4)).sum::<f64>() / n;
    let variance = m2 * n / (n - 1.0);
    EstimatorStats {
        mean,
        variance,
        n_samples,
        closed_form_variance,
        exact_mean: trace,
        mean_std_error: (variance / n).sqrt(),
        variance_std_error: ((m4 - m2 * m2).max(0.0) / n).sqrt(),
        classes: c,
    }
}
