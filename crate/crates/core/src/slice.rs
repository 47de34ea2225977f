//! Two-dimensional cross sections of a classifier's decision cells through
//! a test point, and the in-plane distance to the nearest decision change.

use std::f64::consts::PI;
use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::data::Preprocess;
use crate::error::{Error, Result};
use crate::nn::{softmax, Mlp};
use crate::rng::Stream;
use crate::tensor::{self, Tensor};

pub const ANGLES: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub enum SliceBasis {
    /// Two Gaussian directions from the given seed.
    Random { seed: u64 },
    /// Two caller-supplied directions, e.g. adversarial perturbations.
    Given(Vec<f64>, Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceConfig {
    /// Half-width of the grid, in raw input units.
    pub extent: f64,
    /// Grid side; odd so the center is a node.
    pub resolution: usize,
    /// Furthest radius the boundary search looks.
    pub radius_max: f64,
    /// Radial march step before bisection.
    pub radius_step: f64,
    pub radius_tol: f64,
}

impl Default for SliceConfig {
    fn default() -> Self {
        Self { extent: 5.0, resolution: 51, radius_max: 20.0, radius_step: 0.05, radius_tol: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionSlice {
    pub center: Vec<f64>,
    pub basis: [Vec<f64>; 2],
    pub basis_seed: Option<u64>,
    pub extent: f64,
    pub resolution: usize,
    /// Row-major `resolution x resolution`; row `i` moves along `basis[0]`,
    /// column `j` along `basis[1]`.
    pub classes: Vec<usize>,
    pub confidence: Vec<f64>,
    pub boundary_radius: f64,
    /// False if no decision change was found within `radius_max`.
    pub boundary_found: bool,
}

/// Gram-Schmidt on two directions.
pub fn orthonormalize(a: &[f64], b: &[f64]) -> Result<[Vec<f64>; 2]> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("basis vectors of length {} and {}", a.len(), b.len())));
    }
    let na = tensor::norm2(a);
    if !(na > 1e-12) {
        return Err(Error::Basis("first direction is zero".into()));
    }
    let e1: Vec<f64> = a.iter().map(|v| v / na).collect();
    let proj = tensor::dot(&e1, b);
    let mut r: Vec<f64> = b.iter().zip(&e1).map(|(v, e)| v - proj * e).collect();
    let nr = tensor::norm2(&r);
    if !(nr > 1e-10 * tensor::norm2(b).max(1e-300)) {
        return Err(Error::Basis("directions are collinear".into()));
    }
    r.iter_mut().for_each(|v| *v /= nr);
    // second pass for round-off
    let again = tensor::dot(&e1, &r);
    r.iter_mut().zip(&e1).for_each(|(v, e)| *v -= again * e);
    let nr = tensor::norm2(&r);
    r.iter_mut().for_each(|v| *v /= nr);
    Ok([e1, r])
}

fn push_point(out: &mut Vec<f64>, center: &[f64], basis: &[Vec<f64>; 2], a: f64, b: f64) {
    out.extend(center.iter().zip(&basis[0]).zip(&basis[1]).map(|((c, e1), e2)| (c + a * e1 + b * e2).clamp(0.0, 1.0)));
}

fn classify(model: &Mlp, pre: Preprocess, rows: &[(f64, f64)], center: &[f64], basis: &[Vec<f64>; 2]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(rows.len() * center.len());
    for &(a, b) in rows {
        push_point(&mut data, center, basis, a, b);
    }
    let x = Tensor::matrix(rows.len(), center.len(), data)?;
    model.logits(&pre.apply(&x))
}

/// Smallest in-plane radius, over [`ANGLES`] equally spaced directions, at
/// which the predicted class differs from the center's: a radial march
/// followed by bisection to `radius_tol`.
pub fn boundary_radius(model: &Mlp, pre: Preprocess, center: &[f64], basis: &[Vec<f64>; 2], cfg: &SliceConfig) -> Result<(f64, bool)> {
    let home = classify(model, pre, &[(0.0, 0.0)], center, basis)?;
    let home = tensor::argmax(home.row(0));
    let dirs: Vec<(f64, f64)> = (0..ANGLES).map(|k| (2.0 * PI * k as f64 / ANGLES as f64).sin_cos()).map(|(s, c)| (c, s)).collect();
    let at = |r: &[f64]| -> Vec<(f64, f64)> { dirs.iter().zip(r).map(|(&(c, s), &r)| (r * c, r * s)).collect() };
    let changed = |r: &[f64]| -> Result<Vec<bool>> {
        let z = classify(model, pre, &at(r), center, basis)?;
        Ok(z.iter_rows().map(|row| tensor::argmax(row) != home).collect())
    };

    let mut lo = vec![0.0; ANGLES];
    let mut hi = vec![f64::NAN; ANGLES];
    let steps = (cfg.radius_max / cfg.radius_step).ceil() as usize;
    for s in 1..=steps {
        let r = (s as f64 * cfg.radius_step).min(cfg.radius_max);
        // an angle that already found a crossing beyond the best cannot win
        let best = hi.iter().copied().filter(|h| !h.is_nan()).fold(f64::INFINITY, f64::min);
        if r > best {
            break;
        }
        let open: Vec<usize> = (0..ANGLES).filter(|&k| hi[k].is_nan()).collect();
        let radii: Vec<f64> = (0..ANGLES).map(|k| if hi[k].is_nan() { r } else { 0.0 }).collect();
        let c = changed(&radii)?;
        for k in open {
            if c[k] {
                hi[k] = r;
            } else {
                lo[k] = r;
            }
        }
    }
    let found: Vec<usize> = (0..ANGLES).filter(|&k| !hi[k].is_nan()).collect();
    if found.is_empty() {
        return Ok((cfg.radius_max, false));
    }
    while found.iter().any(|&k| hi[k] - lo[k] > cfg.radius_tol) {
        let mid: Vec<f64> = (0..ANGLES).map(|k| if hi[k].is_nan() { 0.0 } else { 0.5 * (lo[k] + hi[k]) }).collect();
        let c = changed(&mid)?;
        for &k in &found {
            if c[k] {
                hi[k] = mid[k];
            } else {
                lo[k] = mid[k];
            }
        }
    }
    let r = found.iter().map(|&k| hi[k]).fold(f64::INFINITY, f64::min);
    Ok((r, true))
}

impl DecisionSlice {
    pub fn compute(model: &Mlp, pre: Preprocess, center: &[f64], basis: SliceBasis, cfg: &SliceConfig) -> Result<Self> {
        if cfg.resolution < 3 || cfg.resolution.is_multiple_of(2) {
            return Err(Error::Config(format!("resolution must be odd and >= 3, got {}", cfg.resolution)));
        }
        if !(cfg.extent > 0.0 && cfg.radius_max > 0.0 && cfg.radius_step > 0.0 && cfg.radius_tol > 0.0) {
            return Err(Error::Config("extent and radius settings must be positive".into()));
        }
        if center.len() != model.input_width() {
            return Err(Error::Dimension(format!("center has {} values, model expects {}", center.len(), model.input_width())));
        }
        let (dirs, basis_seed) = match basis {
            SliceBasis::Random { seed } => {
                let mut rng = Stream::new(seed);
                let a: Vec<f64> = (0..center.len()).map(|_| rng.normal()).collect();
                let b: Vec<f64> = (0..center.len()).map(|_| rng.normal()).collect();
                (orthonormalize(&a, &b)?, Some(seed))
            }
            SliceBasis::Given(a, b) => {
                if a.len() != center.len() {
                    return Err(Error::Dimension("basis length differs from the center".into()));
                }
                (orthonormalize(&a, &b)?, None)
            }
        };
        let g = cfg.resolution;
        let coord = |i: usize| cfg.extent * (2.0 * i as f64 - (g - 1) as f64) / (g - 1) as f64;
        let mut classes = Vec::with_capacity(g * g);
        let mut confidence = Vec::with_capacity(g * g);
        for i in 0..g {
            let rows: Vec<(f64, f64)> = (0..g).map(|j| (coord(i), coord(j))).collect();
            let p = softmax(&classify(model, pre, &rows, center, &dirs)?, 1.0);
            for row in p.iter_rows() {
                let k = tensor::argmax(row);
                classes.push(k);
                confidence.push(row[k]);
            }
        }
        let (boundary_radius, boundary_found) = boundary_radius(model, pre, center, &dirs, cfg)?;
        Ok(Self {
            center: center.to_vec(),
            basis: dirs,
            basis_seed,
            extent: cfg.extent,
            resolution: g,
            classes,
            confidence,
            boundary_radius,
            boundary_found,
        })
    }

    pub fn center_class(&self) -> usize {
        let mid = self.resolution / 2;
        self.classes[mid * self.resolution + mid]
    }

    /// SHA-256 of the center's f64 little-endian bytes, as hex.
    pub fn center_hash(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.center {
            h.update(v.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Header comment, then `i,j,a,b,class,confidence` per cell.
    pub fn to_csv(&self) -> String {
        let seed = self.basis_seed.map_or("given".to_string(), |s| s.to_string());
        let mut s = format!(
            "# center_sha256={} basis_seed={} extent={} resolution={} boundary_radius={} boundary_found={}\ni,j,a,b,class,confidence\n",
            self.center_hash(),
            seed,
            self.extent,
            self.resolution,
            self.boundary_radius,
            self.boundary_found
        );
        let g = self.resolution;
        for i in 0..g {
            for j in 0..g {
                let a = self.extent * (2.0 * i as f64 - (g - 1) as f64) / (g - 1) as f64;
                let b = self.extent * (2.0 * j as f64 - (g - 1) as f64) / (g - 1) as f64;
                let _ = writeln!(s, "{i},{j},{a},{b},{},{}", self.classes[i * g + j], self.confidence[i * g + j]);
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Dense};
    use crate::selfcheck::fixtures::random_mlp;

    fn linear_two_class() -> Mlp {
        // class 1 iff x0 > 0.5 in raw space: logit gap (x0 - mean)/std - (0.5 - mean)/std
        let p = Preprocess::MNIST;
        let w = Tensor::matrix(2, 3, vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let bias = vec![0.0, -p.forward_value(0.5)];
        Mlp::new(vec![Dense { weights: w, bias, activation: Activation::Identity }]).unwrap()
    }

    #[test]
    fn basis_is_orthonormal() {
        let mut rng = Stream::new(3);
        let a: Vec<f64> = (0..50).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..50).map(|_| rng.normal() + 3.0).collect();
        let [e1, e2] = orthonormalize(&a, &b).unwrap();
        assert!(tensor::dot(&e1, &e2).abs() < 1e-10);
        assert!((tensor::norm2(&e1) - 1.0).abs() < 1e-10);
        assert!((tensor::norm2(&e2) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn collinear_basis_is_rejected() {
        let a = vec![1.0, 2.0, 3.0];
        let b: Vec<f64> = a.iter().map(|v| -2.5 * v).collect();
        assert!(matches!(orthonormalize(&a, &b), Err(Error::Basis(_))));
        assert!(matches!(orthonormalize(&[0.0; 3], &a), Err(Error::Basis(_))));
    }

    #[test]
    fn center_cell_matches_direct_prediction() {
        let model = random_mlp(&[16, 8, 4], Activation::Tanh, 2, 2.0);
        let mut rng = Stream::new(5);
        let center: Vec<f64> = (0..16).map(|_| rng.uniform()).collect();
        let cfg = SliceConfig { resolution: 9, extent: 1.0, ..SliceConfig::default() };
        let s = DecisionSlice::compute(&model, Preprocess::MNIST, &center, SliceBasis::Random { seed: 8 }, &cfg).unwrap();
        let direct = model.predict(&Preprocess::MNIST.apply(&Tensor::matrix(1, 16, center).unwrap())).unwrap()[0];
        assert_eq!(s.center_class(), direct);
        assert_eq!(s.classes.len(), 81);
        let csv = s.to_csv();
        assert!(csv.starts_with("# center_sha256="));
        assert!(csv.contains("basis_seed=8") && csv.contains("resolution=9"));
        assert_eq!(csv.lines().count(), 2 + 81);
    }

    #[test]
    fn even_or_tiny_resolution_is_rejected() {
        let model = random_mlp(&[4, 2], Activation::Tanh, 2, 1.0);
        for res in [1, 4] {
            let cfg = SliceConfig { resolution: res, ..SliceConfig::default() };
            assert!(DecisionSlice::compute(&model, Preprocess::MNIST, &[0.5; 4], SliceBasis::Random { seed: 1 }, &cfg).is_err());
        }
    }

    #[test]
    fn radius_of_a_half_plane() {
        // boundary x0 = 0.5; center at x0 = 0.2 in the plane of axes 0 and 1
        let model = linear_two_class();
        let basis = [vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
        let cfg = SliceConfig::default();
        let (r, found) = boundary_radius(&model, Preprocess::MNIST, &[0.2, 0.5, 0.5], &basis, &cfg).unwrap();
        assert!(found);
        assert!((r - 0.3).abs() < 2e-3, "{r}");
    }

    #[test]
    fn unreachable_boundary_is_censored() {
        let model = linear_two_class();
        // the plane never moves coordinate 0
        let basis = [vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let cfg = SliceConfig { radius_max: 2.0, ..SliceConfig::default() };
        assert_eq!(boundary_radius(&model, Preprocess::MNIST, &[0.2, 0.5, 0.5], &basis, &cfg).unwrap(), (2.0, false));
    }
}
