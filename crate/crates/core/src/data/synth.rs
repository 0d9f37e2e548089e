//! Synthetic corpora: Gaussian blobs on the sphere and rendered 2-D shapes.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::image::{uniform, Image};
use super::{Dataset, LabeledSample, Payload};
use crate::error::{Error, Result};

const MAX_CENTER_TRIES: usize = 10_000;

/// `num_classes` centers on the unit sphere, pairwise separated by at least
/// `pi / (2 * num_classes)` radians, with isotropic Gaussian spread.
/// Labels cycle through the classes.
pub fn gen_blobs(
    num_classes: usize,
    dim: usize,
    n_per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    let n = num_classes * n_per_class;
    if dim < 2 || num_classes < 2 {
        return Err(Error::Config(format!(
            "blobs need dim >= 2 and at least 2 classes, got dim={dim} classes={num_classes}"
        )));
    }
    if !(spread >= 0.0) {
        return Err(Error::Config(format!(
            "spread must be non-negative, got {spread}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let min_sep = std::f64::consts::PI / (2.0 * num_classes as f64);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
    let mut tries = 0;
    while centers.len() < num_classes {
        tries += 1;
        if tries > MAX_CENTER_TRIES {
            return Err(Error::Generation(format!(
                "could not place {num_classes} centers in dimension {dim} with separation {min_sep:.4} rad"
            )));
        }
        let c = random_unit(&mut rng, dim);
        let ok = centers.iter().all(|o| {
            let d: f64 = o.iter().zip(&c).map(|(a, b)| a * b).sum();
            d.clamp(-1.0, 1.0).acos() >= min_sep
        });
        if ok {
            centers.push(c);
        }
    }
    let samples = (0..n)
        .map(|i| {
            let label = i % num_classes;
            let v = centers[label]
                .iter()
                .map(|&c| {
                    c + spread * {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z
                    }
                })
                .collect();
            LabeledSample {
                payload: Payload::Vector(v),
                label,
                id: i as u64,
            }
        })
        .collect();
    Dataset::new(samples, num_classes)
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub const SHAPE_CLASSES: [&str; 4] = ["circle", "square", "triangle", "cross"];
const SUPERSAMPLE: usize = 4;

/// Balanced grayscale images of circles, squares, triangles and crosses with
/// random position, size, rotation and intensity, anti-aliased by
/// supersampling.
pub fn gen_shapes(n: usize, size: usize, seed: u64) -> Result<Dataset> {
    if size < 12 {
        return Err(Error::Config(format!(
            "shape images need size >= 12, got {size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|i| {
            let label = i % SHAPE_CLASSES.len();
            let s = size as f64;
            let cx = uniform(&mut rng, 0.4, 0.6) * s;
            let cy = uniform(&mut rng, 0.4, 0.6) * s;
            let r = uniform(&mut rng, 0.25, 0.35) * s;
            let rot = uniform(&mut rng, 0.0, std::f64::consts::TAU);
            let intensity = uniform(&mut rng, 0.7, 1.0);
            let img = render(label, size, cx, cy, r, rot, intensity);
            LabeledSample {
                payload: Payload::Image(img),
                label,
                id: i as u64,
            }
        })
        .collect();
    Dataset::new(samples, SHAPE_CLASSES.len())
}

fn render(label: usize, size: usize, cx: f64, cy: f64, r: f64, rot: f64, intensity: f64) -> Image {
    let (sin, cos) = rot.sin_cos();
    let mut pixels = vec![0.0; size * size];
    let step = 1.0 / SUPERSAMPLE as f64;
    for y in 0..size {
        for x in 0..size {
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) * step - cx;
                    let py = y as f64 + (sy as f64 + 0.5) * step - cy;
                    // into the shape frame, unit radius
                    let u = (cos * px + sin * py) / r;
                    let v = (-sin * px + cos * py) / r;
                    if inside(label, u, v) {
                        hits += 1;
                    }
                }
            }
            pixels[y * size + x] = intensity * hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
        }
    }
    Image {
        height: size,
        width: size,
        channels: 1,
        pixels,
    }
}

fn inside(label: usize, u: f64, v: f64) -> bool {
    match label {
        0 => u * u + v * v <= 1.0,
        1 => u.abs() <= 0.75 && v.abs() <= 0.75,
        2 => {
            // equilateral triangle inscribed in the unit circle
            let s3 = 3f64.sqrt();
            v >= -0.5 && s3 * u + v <= 1.0 && -s3 * u + v <= 1.0
        }
        _ => (u.abs() <= 1.0 && v.abs() <= 0.3) || (u.abs() <= 0.3 && v.abs() <= 1.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_deterministic_and_balanced() {
        let a = gen_blobs(5, 8, 20, 0.1, 3).unwrap();
        let b = gen_blobs(5, 8, 20, 0.1, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.class_counts(), vec![20; 5]);
    }

    #[test]
    fn impossible_separation_errors() {
        // more classes than the placement budget allows
        let err = gen_blobs(20_000, 2, 1, 0.1, 0).unwrap_err();
        assert!(matches!(err, Error::Generation(_)));
    }

    #[test]
    fn shapes_in_range_and_balanced() {
        let d = gen_shapes(40, 16, 1).unwrap();
        assert_eq!(d.class_counts(), vec![10; 4]);
        for s in &d.samples {
            let Payload::Image(img) = &s.payload else {
                panic!()
            };
            assert!(img.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
            assert!(img.pixels.iter().any(|&p| p > 0.5));
        }
    }
}
