//! Datasets in raw `[0, 1]` pixel space, the affine preprocessing the models
//! see, and image resampling.

pub mod idx;
mod synthetic;

pub use idx::{load_idx, load_mnist_dir, mnist_present, write_idx};
pub use synthetic::{synthetic_blobs, SyntheticConfig};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `x' = (x - mean) / std`, applied elementwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preprocess {
    pub mean: f64,
    pub std: f64,
}

impl Preprocess {
    /// MNIST training-set statistics. The divisor is used exactly as given.
    pub const MNIST: Preprocess = Preprocess { mean: 0.1307, std: 0.3081 };

    pub fn new(mean: f64, std: f64) -> Result<Self> {
        if !mean.is_finite() || !std.is_finite() || std <= 0.0 {
            return Err(Error::Config(format!("preprocess needs finite mean and std > 0, got ({mean}, {std})")));
        }
        Ok(Self { mean, std })
    }

    pub fn forward_value(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn inverse_value(&self, x: f64) -> f64 {
        x * self.std + self.mean
    }

    pub fn apply(&self, raw: &Tensor) -> Tensor {
        raw.map(|v| self.forward_value(v))
    }

    pub fn invert(&self, pre: &Tensor) -> Tensor {
        pre.map(|v| self.inverse_value(v))
    }

    /// `d x' / d x`.
    pub fn scale(&self) -> f64 {
        1.0 / self.std
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
    pub preprocess: Preprocess,
    /// Image geometry `(rows, cols)` when known.
    pub side: Option<(usize, usize)>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, preprocess: Preprocess) -> Result<Self> {
        if images.shape().len() != 2 {
            return Err(Error::Dimension(format!("images must be N x I, got {:?}", images.shape())));
        }
        if images.rows() != labels.len() {
            return Err(Error::CountMismatch { images: images.rows(), labels: labels.len() });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {bad} outside [0, {classes})")));
        }
        if images.as_slice().iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Data("raw pixels must lie in [0, 1]".into()));
        }
        Ok(Self { images, labels, classes, preprocess, side: None })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.images.cols()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f64] {
        self.images.row(i)
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            preprocess: self.preprocess,
            side: self.side,
        }
    }

    /// First `n` examples (or all, if fewer).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Raw rows and labels for a list of indices.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        (self.images.select_rows(idx), idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// The model-space view of every image.
    pub fn preprocessed(&self) -> Tensor {
        self.preprocess.apply(&self.images)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Align-corners bilinear resampling of a square `side_in x side_in` image
/// to `side_out x side_out`. Corner pixels map onto corner pixels.
pub fn bilinear_upsample(img: &[f64], side_in: usize, side_out: usize) -> Result<Vec<f64>> {
    if img.len() != side_in * side_in {
        return Err(Error::Dimension(format!("{} pixels is not {side_in}x{side_in}", img.len())));
    }
    if side_in < 2 || side_out <= side_in {
        return Err(Error::Dimension(format!("cannot upsample {side_in} to {side_out}")));
    }
    let ratio = (side_in - 1) as f64 / (side_out - 1) as f64;
    let mut out = vec![0.0; side_out * side_out];
    for r in 0..side_out {
        let y = r as f64 * ratio;
        let y0 = (y.floor() as usize).min(side_in - 2);
        let fy = y - y0 as f64;
        for c in 0..side_out {
            let x = c as f64 * ratio;
            let x0 = (x.floor() as usize).min(side_in - 2);
            let fx = x - x0 as f64;
            let at = |yy: usize, xx: usize| img[yy * side_in + xx];
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
            let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
            out[r * side_out + c] = top * (1.0 - fy) + bottom * fy;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn preprocess_constants() {
        let p = Preprocess::MNIST;
        assert!((p.forward_value(0.0) - (-0.424_212_917_883_804)).abs() < 1e-12);
        assert!((p.forward_value(1.0) - 2.821_486_530_347_29).abs() < 1e-12);
        assert!(Preprocess::new(0.0, 0.0).is_err());
        assert!(Preprocess::new(0.0, -1.0).is_err());
    }

    #[test]
    fn dataset_rejects_inconsistent_inputs() {
        let imgs = Tensor::matrix(2, 2, vec![0.0, 0.5, 1.0, 0.2]).unwrap();
        assert!(Dataset::new(imgs.clone(), vec![0], 2, Preprocess::MNIST).is_err());
        assert!(Dataset::new(imgs.clone(), vec![0, 2], 2, Preprocess::MNIST).is_err());
        let bad = Tensor::matrix(1, 2, vec![0.0, 1.5]).unwrap();
        assert!(Dataset::new(bad, vec![0], 2, Preprocess::MNIST).is_err());
        assert!(Dataset::new(imgs, vec![0, 1], 2, Preprocess::MNIST).is_ok());
    }

    #[test]
    fn upsample_constant_image() {
        let out = bilinear_upsample(&[0.37; 256], 16, 28).unwrap();
        assert!(out.iter().all(|&v| (v - 0.37).abs() < 1e-15));
    }

    #[test]
    fn upsample_preserves_corners() {
        let img: Vec<f64> = (0..256).map(|k| ((k * 37) % 101) as f64 / 100.0).collect();
        let out = bilinear_upsample(&img, 16, 28).unwrap();
        assert_eq!(out[0], img[0]);
        assert_eq!(out[27], img[15]);
        assert_eq!(out[27 * 28], img[15 * 16]);
        assert_eq!(out[28 * 28 - 1], img[255]);
    }

    #[test]
    fn upsample_reproduces_ramps() {
        let img: Vec<f64> = (0..256).map(|k| (k % 16) as f64 / 15.0).collect();
        let out = bilinear_upsample(&img, 16, 28).unwrap();
        for r in 0..28 {
            for c in 0..28 {
                assert!((out[r * 28 + c] - c as f64 / 27.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upsample_rejects_bad_sizes() {
        assert!(bilinear_upsample(&[0.0; 10], 16, 28).is_err());
        assert!(bilinear_upsample(&[0.0; 256], 16, 16).is_err());
    }

    proptest! {
        #[test]
        fn preprocess_round_trips(x in 0.0f64..=1.0) {
            let p = Preprocess::MNIST;
            prop_assert!((p.inverse_value(p.forward_value(x)) - x).abs() < 1e-12);
        }

        #[test]
        fn upsample_stays_in_range(seed in 0u64..500) {
            let mut rng = crate::rng::Stream::new(seed);
            let img: Vec<f64> = (0..256).map(|_| rng.uniform()).collect();
            let (lo, hi) = img.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
            let out = bilinear_upsample(&img, 16, 28).unwrap();
            prop_assert!(out.iter().all(|&v| v >= lo - 1e-15 && v <= hi + 1e-15));
        }
    }
}
