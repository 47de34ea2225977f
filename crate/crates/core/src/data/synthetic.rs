//! Seeded MNIST-shaped stand-in: each class is a fixed constellation of
//! Gaussian blobs on a square canvas, and every example jitters the blob
//! centers, widths and brightness, shifts the whole pattern, adds a stray
//! blob and pixel noise, then clips to `[0, 1]`.

use super::{Dataset, Preprocess};
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub side: usize,
    pub blobs_per_class: usize,
    pub train: usize,
    pub test: usize,
    /// Std of the per-example blob-center jitter, in pixels.
    pub jitter: f64,
    /// Max whole-image shift, in pixels.
    pub shift: f64,
    pub pixel_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            side: 28,
            blobs_per_class: 3,
            train: 6000,
            test: 1000,
            jitter: 1.5,
            shift: 3.0,
            pixel_noise: 0.08,
            seed: 20_180_327,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Blob {
    y: f64,
    x: f64,
    sigma: f64,
    amp: f64,
}

fn splat(canvas: &mut [f64], side: usize, b: Blob) {
    let inv = 1.0 / (2.0 * b.sigma * b.sigma);
    for r in 0..side {
        let dy = r as f64 - b.y;
        for c in 0..side {
            let dx = c as f64 - b.x;
            canvas[r * side + c] += b.amp * (-(dx * dx + dy * dy) * inv).exp();
        }
    }
}

fn prototypes(cfg: &SyntheticConfig, rng: &mut Stream) -> Vec<Vec<Blob>> {
    let lo = cfg.side as f64 * 0.25;
    let hi = cfg.side as f64 * 0.75;
    (0..cfg.classes)
        .map(|_| {
            (0..cfg.blobs_per_class)
                .map(|_| Blob {
                    y: rng.uniform_in(lo, hi),
                    x: rng.uniform_in(lo, hi),
                    sigma: rng.uniform_in(1.5, 3.0),
                    amp: 1.0,
                })
                .collect()
        })
        .collect()
}

fn render(cfg: &SyntheticConfig, proto: &[Blob], rng: &mut Stream) -> Vec<f64> {
    let side = cfg.side;
    let mut canvas = vec![0.0; side * side];
    let (sy, sx) = (rng.uniform_in(-cfg.shift, cfg.shift), rng.uniform_in(-cfg.shift, cfg.shift));
    for b in proto {
        let blob = Blob {
            y: b.y + sy + cfg.jitter * rng.normal(),
            x: b.x + sx + cfg.jitter * rng.normal(),
            sigma: b.sigma * rng.uniform_in(0.8, 1.25),
            amp: rng.uniform_in(0.6, 1.0),
        };
        splat(&mut canvas, side, blob);
    }
    let stray = Blob {
        y: rng.uniform_in(0.0, side as f64),
        x: rng.uniform_in(0.0, side as f64),
        sigma: rng.uniform_in(1.0, 2.5),
        amp: rng.uniform_in(0.0, 0.6),
    };
    splat(&mut canvas, side, stray);
    for p in canvas.iter_mut() {
        *p = (*p + cfg.pixel_noise * rng.normal()).clamp(0.0, 1.0);
    }
    canvas
}

fn sample(cfg: &SyntheticConfig, protos: &[Vec<Blob>], n: usize, rng: &mut Stream) -> Result<Dataset> {
    let width = cfg.side * cfg.side;
    let mut data = Vec::with_capacity(n * width);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        // round-robin labels, then shuffled order
        labels.push(i % cfg.classes);
    }
    rng.shuffle(&mut labels);
    for &l in &labels {
        data.extend(render(cfg, &protos[l], rng));
    }
    let mut ds = Dataset::new(Tensor::matrix(n, width, data)?, labels, cfg.classes, Preprocess::MNIST)?;
    ds.side = Some((cfg.side, cfg.side));
    Ok(ds)
}

/// `(train, test)` drawn from the same class prototypes on disjoint streams.
pub fn synthetic_blobs(cfg: &SyntheticConfig) -> Result<(Dataset, Dataset)> {
    if cfg.classes < 2 || cfg.side < 4 || cfg.blobs_per_class == 0 {
        return Err(Error::Config(format!(
            "synthetic data needs >= 2 classes, side >= 4 and >= 1 blob, got {} / {} / {}",
            cfg.classes, cfg.side, cfg.blobs_per_class
        )));
    }
    let root = Stream::new(cfg.seed);
    let protos = prototypes(cfg, &mut root.split(0));
    let train = sample(cfg, &protos, cfg.train, &mut root.split(1))?;
    let test = sample(cfg, &protos, cfg.test, &mut root.split(2))?;
    Ok((train, test))
}
