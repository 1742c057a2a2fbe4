//! Synthetic grayscale images mixing smooth layouts with fine texture.

use freeu_core::rng::SeededRng;
use freeu_core::tensor::Tensor;

use crate::config::{DatasetKind, DatasetSpec};
use crate::error::{LabError, Result};

/// `[n, 1, size, size]` images in `[−1, 1]`. Image `i` depends only on
/// `(seed, i)`.
pub fn synth_dataset(kind: DatasetKind, n: usize, size: usize, seed: u64) -> Result<Tensor> {
    if !size.is_power_of_two() || size < 4 {
        return Err(LabError::field(
            "dataset.size",
            format!("must be a power of two >= 4, got {size}"),
        ));
    }
    let plane = size * size;
    let mut data = Vec::with_capacity(n * plane);
    for i in 0..n {
        let mut rng = SeededRng::new(seed, i as u64);
        match kind {
            DatasetKind::ShapesTexture => data.extend(shapes_texture(&mut rng, size)),
        }
    }
    Ok(Tensor::new(vec![n, 1, size, size], data)?)
}

pub fn synth_from_spec(spec: &DatasetSpec) -> Result<Tensor> {
    synth_dataset(spec.kind, spec.count, spec.size, spec.seed)
}

fn shapes_texture(rng: &mut SeededRng, size: usize) -> Vec<f32> {
    let s = size as f64;
    let mut img = vec![rng.uniform_range(-0.9, -0.3); size * size];

    let shapes = 1 + rng.below(3);
    for _ in 0..shapes {
        let ellipse = rng.below(2) == 0;
        let cy = rng.uniform_range(0.2, 0.8) * s;
        let cx = rng.uniform_range(0.2, 0.8) * s;
        let ry = rng.uniform_range(0.12, 0.35) * s;
        let rx = rng.uniform_range(0.12, 0.35) * s;
        let value = rng.uniform_range(-0.2, 0.9);
        for y in 0..size {
            for x in 0..size {
                let dy = (y as f64 + 0.5 - cy) / ry;
                let dx = (x as f64 + 0.5 - cx) / rx;
                let inside = if ellipse {
                    dy * dy + dx * dx <= 1.0
                } else {
                    dy.abs() <= 1.0 && dx.abs() <= 1.0
                };
                if inside {
                    img[y * size + x] = value;
                }
            }
        }
    }

    let ph = size / 4 + rng.below(size / 4 + 1);
    let pw = size / 4 + rng.below(size / 4 + 1);
    let y0 = rng.below(size - ph + 1);
    let x0 = rng.below(size - pw + 1);
    let amp = rng.uniform_range(0.25, 0.5);
    let grating = rng.below(2) == 0;
    let theta = rng.uniform_range(0.0, std::f64::consts::PI);
    let period = rng.uniform_range(2.0, 4.0);
    let phase = rng.uniform_range(0.0, 2.0 * std::f64::consts::PI);
    let cell = 1 + rng.below(2);
    let (ky, kx) = (theta.sin(), theta.cos());
    for y in y0..y0 + ph {
        for x in x0..x0 + pw {
            let t = if grating {
                (2.0 * std::f64::consts::PI * (ky * y as f64 + kx * x as f64) / period + phase).sin()
            } else if ((y / cell) + (x / cell)).is_multiple_of(2) {
                1.0
            } else {
                -1.0
            };
            img[y * size + x] += amp * t;
        }
    }
    img.into_iter().map(|v| v.clamp(-1.0, 1.0) as f32).collect()
}
