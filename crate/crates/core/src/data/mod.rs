//! Corpora, augmentation pipelines and batching of positive pairs.

mod csv_io;
pub mod image;
pub mod synth;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::parallel::{map_indices, ExecPolicy};
use crate::tensor::Tensor;
pub use csv_io::{export_csv, ingest_csv, CsvSchema, PayloadLayout};
use image::{eval_transform, Image};
pub use synth::{gen_blobs, gen_shapes, SHAPE_CLASSES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Payload {
    Vector(Vec<f64>),
    Image(Image),
}

impl Payload {
    pub fn dim(&self) -> usize {
        match self {
            Payload::Vector(v) => v.len(),
            Payload::Image(i) => i.pixels.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub payload: Payload,
    pub label: usize,
    pub id: u64,
}

/// Per-channel (images) or per-coordinate (vectors) mean and std.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    fn apply(&self, values: &mut [f64]) {
        let k = self.mean.len();
        for (i, v) in values.iter_mut().enumerate() {
            let c = i % k;
            *v = (*v - self.mean[c]) / self.std[c];
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<LabeledSample>,
    pub num_classes: usize,
    /// Normalization statistics; subsets keep those of their parent.
    pub stats: ChannelStats,
}

impl Dataset {
    pub fn new(samples: Vec<LabeledSample>, num_classes: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Config("dataset is empty".into()));
        }
        let first = &samples[0].payload;
        for s in &samples {
            let same = match (first, &s.payload) {
                (Payload::Vector(a), Payload::Vector(b)) => a.len() == b.len(),
                (Payload::Image(a), Payload::Image(b)) => {
                    (a.height, a.width, a.channels) == (b.height, b.width, b.channels)
                }
                _ => false,
            };
            if !same {
                return shape_err(format!(
                    "sample {} differs in kind or shape from sample 0",
                    s.id
                ));
            }
            if s.label >= num_classes {
                return Err(Error::Config(format!(
                    "sample {} has label {} but only {num_classes} classes",
                    s.id, s.label
                )));
            }
        }
        let stats = compute_stats(&samples);
        Ok(Self {
            samples,
            num_classes,
            stats,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.samples[0].payload.dim()
    }

    pub fn is_image(&self) -> bool {
        matches!(self.samples[0].payload, Payload::Image(_))
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for s in &self.samples {
            c[s.label] += 1;
        }
        c
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            num_classes: self.num_classes,
            stats: self.stats.clone(),
        }
    }

    /// Seeded shuffle into `(train, test)` with `round(n * test_fraction)`
    /// test samples. Both parts keep the full corpus statistics.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::Config(format!(
                "test fraction must be in [0,1), got {test_fraction}"
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = (self.len() as f64 * test_fraction).round() as usize;
        if n_test >= self.len() {
            return Err(Error::Config("split leaves no training samples".into()));
        }
        let (test, train) = idx.split_at(n_test);
        Ok((self.subset(train), self.subset(test)))
    }

    /// Deterministic evaluation input for sample `i`.
    pub fn eval_input(&self, i: usize) -> Vec<f64> {
        eval_input(&self.samples[i], &self.stats)
    }

    pub fn eval_matrix(&self, policy: ExecPolicy) -> Tensor {
        let rows = map_indices(policy, self.len(), |i| self.eval_input(i));
        Tensor::from_rows(&rows).expect("dataset rows share a dimension")
    }
}

fn compute_stats(samples: &[LabeledSample]) -> ChannelStats {
    let (k, rows): (usize, Vec<Vec<f64>>) = match &samples[0].payload {
        Payload::Vector(v) => (
            v.len(),
            samples
                .iter()
                .map(|s| match &s.payload {
                    Payload::Vector(v) => v.clone(),
                    Payload::Image(_) => unreachable!(),
                })
                .collect(),
        ),
        Payload::Image(img) => (
            img.channels,
            samples
                .iter()
                .map(|s| match &s.payload {
                    Payload::Image(i) => eval_transform(i, i.height).pixels,
                    Payload::Vector(_) => unreachable!(),
                })
                .collect(),
        ),
    };
    let mut sum = vec![0.0; k];
    let mut count = vec![0usize; k];
    for r in &rows {
        for (i, v) in r.iter().enumerate() {
            sum[i % k] += v;
            count[i % k] += 1;
        }
    }
    let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect();
    let mut sq = vec![0.0; k];
    for r in &rows {
        for (i, v) in r.iter().enumerate() {
            let d = v - mean[i % k];
            sq[i % k] += d * d;
        }
    }
    let std = sq
        .iter()
        .zip(&count)
        .map(|(s, &c)| {
            let sd = (s / c as f64).sqrt();
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    ChannelStats { mean, std }
}

/// Images: center crop, resize back, normalize. Vectors pass through.
pub fn eval_input(sample: &LabeledSample, stats: &ChannelStats) -> Vec<f64> {
    match &sample.payload {
        Payload::Vector(v) => v.clone(),
        Payload::Image(img) => {
            let mut px = eval_transform(img, img.height).pixels;
            stats.apply(&mut px);
            px
        }
    }
}

/// Augmentation probabilities and ranges. Per-view pairs are
/// `(view1, view2)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub crop_scale: (f64, f64),
    pub crop_ratio: (f64, f64),
    pub flip_p: f64,
    pub jitter_p: f64,
    pub jitter_strength: f64,
    pub grey_p: f64,
    pub blur_p: (f64, f64),
    pub blur_sigma: (f64, f64),
    pub solarize_p: (f64, f64),
    pub vector_noise: f64,
    /// Radians.
    pub vector_max_angle: f64,
    pub vector_scale: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_scale: (0.08, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_p: 0.5,
            jitter_p: 0.8,
            jitter_strength: 0.5,
            grey_p: 0.2,
            blur_p: (0.5, 0.5),
            blur_sigma: (0.1, 2.0),
            solarize_p: (0.0, 0.2),
            vector_noise: 0.05,
            vector_max_angle: 15f64.to_radians(),
            vector_scale: (0.9, 1.1),
        }
    }
}

impl AugmentConfig {
    /// Every transform disabled: both views equal the evaluation input.
    pub fn identity() -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            crop_ratio: (1.0, 1.0),
            flip_p: 0.0,
            jitter_p: 0.0,
            jitter_strength: 0.0,
            grey_p: 0.0,
            blur_p: (0.0, 0.0),
            blur_sigma: (0.1, 2.0),
            solarize_p: (0.0, 0.0),
            vector_noise: 0.0,
            vector_max_angle: 0.0,
            vector_scale: (1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            self.flip_p,
            self.jitter_p,
            self.grey_p,
            self.blur_p.0,
            self.blur_p.1,
            self.solarize_p.0,
            self.solarize_p.1,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config(
                "augmentation probabilities must lie in [0,1]".into(),
            ));
        }
        let ranges = [
            self.crop_scale,
            self.crop_ratio,
            self.blur_sigma,
            self.vector_scale,
        ];
        if ranges.iter().any(|&(a, b)| !(a > 0.0 && a <= b)) {
            return Err(Error::Config(
                "augmentation ranges must be positive with lo <= hi".into(),
            ));
        }
        if self.crop_scale.1 > 1.0 {
            return Err(Error::Config("crop area fraction cannot exceed 1".into()));
        }
        if self.vector_noise < 0.0 || self.vector_max_angle < 0.0 || self.jitter_strength < 0.0 {
            return Err(Error::Config(
                "noise, angle and jitter strength must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Seed for the augmentations of one sample in one epoch.
pub fn sample_seed(global: u64, epoch: u64, index: u64) -> u64 {
    let mut z = global;
    for v in [epoch, index] {
        z = splitmix(z ^ splitmix(v.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    z
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn augment_image<R: Rng + ?Sized>(
    img: &Image,
    view: usize,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Image {
    let pick = |pair: (f64, f64)| if view == 0 { pair.0 } else { pair.1 };
    let mut out = image::random_resized_crop(img, rng, img.height, cfg.crop_scale, cfg.crop_ratio);
    if rng.random_bool(cfg.flip_p) {
        out = image::horizontal_flip(&out);
    }
    if rng.random_bool(cfg.jitter_p) {
        out = image::color_jitter(&out, rng, cfg.jitter_strength);
    }
    if rng.random_bool(cfg.grey_p) {
        out = image::grayscale(&out);
    }
    if rng.random_bool(pick(cfg.blur_p)) {
        out = image::gaussian_blur(&out, rng, cfg.blur_sigma);
    }
    if rng.random_bool(pick(cfg.solarize_p)) {
        out = image::solarize(&out);
    }
    out
}

/// Gaussian noise, a rotation by at most `vector_max_angle` in a random
/// 2-plane, then a random scale.
fn augment_vector<R: Rng + ?Sized>(v: &[f64], cfg: &AugmentConfig, rng: &mut R) -> Vec<f64> {
    let mut x: Vec<f64> = if cfg.vector_noise > 0.0 {
        v.iter()
            .map(|&a| {
                a + cfg.vector_noise * {
                    let z: f64 = StandardNormal.sample(rng);
                    z
                }
            })
            .collect()
    } else {
        v.to_vec()
    };
    if cfg.vector_max_angle > 0.0 && x.len() >= 2 {
        let phi = image::uniform(rng, -cfg.vector_max_angle, cfg.vector_max_angle);
        let (u, w) = random_plane(rng, x.len());
        let xu: f64 = x.iter().zip(&u).map(|(a, b)| a * b).sum();
        let xw: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum();
        let (s, c) = phi.sin_cos();
        for i in 0..x.len() {
            x[i] += (c - 1.0) * (xu * u[i] + xw * w[i]) + s * (xu * w[i] - xw * u[i]);
        }
    }
    let scale = image::uniform(rng, cfg.vector_scale.0, cfg.vector_scale.1);
    if scale != 1.0 {
        x.iter_mut().for_each(|a| *a *= scale);
    }
    x
}

fn random_plane<R: Rng + ?Sized>(rng: &mut R, d: usize) -> (Vec<f64>, Vec<f64>) {
    let gauss = |rng: &mut R| -> Vec<f64> { (0..d).map(|_| StandardNormal.sample(rng)).collect() };
    loop {
        let mut u = gauss(rng);
        let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
        if nu < 1e-9 {
            continue;
        }
        u.iter_mut().for_each(|a| *a /= nu);
        let mut w = gauss(rng);
        let p: f64 = w.iter().zip(&u).map(|(a, b)| a * b).sum();
        w.iter_mut().zip(&u).for_each(|(a, b)| *a -= p * b);
        let nw = w.iter().map(|a| a * a).sum::<f64>().sqrt();
        if nw < 1e-9 {
            continue;
        }
        w.iter_mut().for_each(|a| *a /= nw);
        return (u, w);
    }
}

/// Two independently augmented views of one sample, already normalized and
/// flattened. Depends only on `seed`.
pub fn make_pair(
    sample: &LabeledSample,
    cfg: &AugmentConfig,
    stats: &ChannelStats,
    seed: u64,
) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match &sample.payload {
        Payload::Vector(v) => {
            let a = augment_vector(v, cfg, &mut rng);
            let b = augment_vector(v, cfg, &mut rng);
            (a, b)
        }
        Payload::Image(img) => {
            let mut a = augment_image(img, 0, cfg, &mut rng).pixels;
            let mut b = augment_image(img, 1, cfg, &mut rng).pixels;
            stats.apply(&mut a);
            stats.apply(&mut b);
            (a, b)
        }
    }
}

/// Two views per sample, stacked as `[B, d]` tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub view1: Tensor,
    pub view2: Tensor,
    pub ids: Vec<u64>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Builds the pair batch for dataset positions `indices` in `epoch`.
pub fn pair_batch(
    data: &Dataset,
    indices: &[usize],
    cfg: &AugmentConfig,
    global_seed: u64,
    epoch: u64,
    policy: ExecPolicy,
) -> Result<PairBatch> {
    let pairs = map_indices(policy, indices.len(), |k| {
        let i = indices[k];
        make_pair(
            &data.samples[i],
            cfg,
            &data.stats,
            sample_seed(global_seed, epoch, i as u64),
        )
    });
    let (a, b): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    Ok(PairBatch {
        view1: Tensor::from_rows(&a)?,
        view2: Tensor::from_rows(&b)?,
        ids: indices.iter().map(|&i| data.samples[i].id).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_pair_equals_eval_input() {
        let d = gen_shapes(8, 16, 2).unwrap();
        for s in &d.samples {
            let (a, b) = make_pair(s, &AugmentConfig::identity(), &d.stats, 5);
            let e = eval_input(s, &d.stats);
            assert_eq!(a, b);
            // eval crops; identity augmentation does not
            let Payload::Image(img) = &s.payload else {
                panic!()
            };
            let mut raw = img.pixels.clone();
            d.stats.apply(&mut raw);
            assert_eq!(a, raw);
            assert_eq!(e.len(), a.len());
        }
        let v = gen_blobs(2, 4, 3, 0.1, 0).unwrap();
        for s in &v.samples {
            let (a, b) = make_pair(s, &AugmentConfig::identity(), &v.stats, 9);
            let Payload::Vector(x) = &s.payload else {
                panic!()
            };
            assert_eq!(&a, x);
            assert_eq!(&b, x);
        }
    }

    #[test]
    fn rotation_preserves_norm_without_noise() {
        let cfg = AugmentConfig {
            vector_noise: 0.0,
            vector_scale: (1.0, 1.0),
            ..AugmentConfig::default()
        };
        let x = vec![0.3, -1.2, 0.5, 2.0];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n0: f64 = x.iter().map(|a| a * a).sum();
        for _ in 0..10 {
            let y = augment_vector(&x, &cfg, &mut rng);
            let n1: f64 = y.iter().map(|a| a * a).sum();
            assert!((n0 - n1).abs() < 1e-12);
            let cos = x.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>() / n0;
            assert!(cos >= 15f64.to_radians().cos() - 1e-12);
        }
    }

    #[test]
    fn pairs_depend_only_on_seed_triple() {
        let d = gen_shapes(12, 16, 3).unwrap();
        let cfg = AugmentConfig::default();
        let a = pair_batch(&d, &[3, 7, 1], &cfg, 11, 2, ExecPolicy::Sequential).unwrap();
        let b = pair_batch(&d, &[1, 3, 7], &cfg, 11, 2, ExecPolicy::Parallel).unwrap();
        assert_eq!(a.view1.row(0), b.view1.row(1));
        assert_eq!(a.view2.row(2), b.view2.row(0));
        let c = pair_batch(&d, &[3], &cfg, 11, 3, ExecPolicy::Sequential).unwrap();
        assert_ne!(a.view1.row(0), c.view1.row(0));
    }

    #[test]
    fn normalized_corpus_is_centered() {
        let d = gen_shapes(64, 16, 0).unwrap();
        let m = d.eval_matrix(ExecPolicy::Sequential);
        let mean = m.data().iter().sum::<f64>() / m.len() as f64;
        assert!(mean.abs() < 1e-10, "{mean}");
        let var = m.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m.len() as f64;
        assert!((var - 1.0).abs() < 1e-10);
    }

    #[test]
    fn split_is_disjoint_and_seeded() {
        let d = gen_blobs(2, 3, 25, 0.1, 0).unwrap();
        let (tr, te) = d.split(0.2, 7).unwrap();
        assert_eq!((tr.len(), te.len()), (40, 10));
        let mut ids: Vec<u64> = tr.samples.iter().chain(&te.samples).map(|s| s.id).collect();
        ids.sort();
        assert_eq!(ids, (0..50).collect::<Vec<_>>());
        assert_eq!(d.split(0.2, 7).unwrap().1, te);
    }
}
