use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::Tensor;

use super::DomainDataset;

/// Affine shift applied to the target domain plus additive target noise.
///
/// Rotation acts in the plane of the first two coordinates; `translation`
/// may be shorter than the feature dimension (missing entries are zero).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub rotation: f64,
    pub translation: Vec<f64>,
    pub scale: f64,
    pub noise_std: f64,
    /// Seeds the target-side noise draw.
    pub seed: u64,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        ShiftSpec {
            rotation: 0.0,
            translation: Vec::new(),
            scale: 1.0,
            noise_std: 0.0,
            seed: 0,
        }
    }
}

impl ShiftSpec {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::invalid(format!(
                "shift scale must be positive, got {}",
                self.scale
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::invalid(format!(
                "noise std must be non-negative, got {}",
                self.noise_std
            )));
        }
        if self.translation.len() > dim {
            return Err(Error::invalid(format!(
                "translation has {} entries for {dim}-dimensional data",
                self.translation.len()
            )));
        }
        if !self.rotation.is_finite() || self.translation.iter().any(|t| !t.is_finite()) {
            return Err(Error::invalid("shift parameters must be finite"));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == 0.0 && self.scale == 1.0 && self.noise_std == 0.0 && self.translation.iter().all(|&t| t == 0.0)
    }

    /// `scale · R(x) + translation` in place on one row.
    fn apply_affine(&self, row: &mut [f64]) {
        if self.rotation != 0.0 && row.len() >= 2 {
            let (s, c) = self.rotation.sin_cos();
            let (x, y) = (row[0], row[1]);
            row[0] = c * x - s * y;
            row[1] = s * x + c * y;
        }
        if self.scale != 1.0 {
            row.iter_mut().for_each(|v| *v *= self.scale);
        }
        for (v, &t) in row.iter_mut().zip(&self.translation) {
            *v += t;
        }
    }
}

/// Gaussian class clusters with centers evenly spaced on a circle of
/// `radius` in the first two coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobsSpec {
    pub classes: usize,
    pub n_per_class: usize,
    pub dim: usize,
    pub radius: f64,
    pub cluster_std: f64,
}

impl Default for BlobsSpec {
    fn default() -> Self {
        BlobsSpec {
            classes: 3,
            n_per_class: 100,
            dim: 2,
            radius: 3.0,
            cluster_std: 0.7,
        }
    }
}

impl BlobsSpec {
    pub fn center(&self, class: usize) -> Vec<f64> {
        let angle = 2.0 * PI * class as f64 / self.classes as f64;
        let mut c = vec![0.0; self.dim];
        c[0] = self.radius * angle.cos();
        if self.dim > 1 {
            c[1] = self.radius * angle.sin();
        }
        c
    }

    fn sample(&self, rng: &mut impl Rng) -> (Vec<f64>, Vec<usize>) {
        let mut data = Vec::with_capacity(self.classes * self.n_per_class * self.dim);
        let mut labels = Vec::with_capacity(self.classes * self.n_per_class);
        for k in 0..self.classes {
            let center = self.center(k);
            for _ in 0..self.n_per_class {
                for &c in &center {
                    let z: f64 = rng.sample(StandardNormal);
                    data.push(c + self.cluster_std * z);
                }
                labels.push(k);
            }
        }
        (data, labels)
    }
}

/// Source clusters and an independently sampled, shifted target.
pub fn make_blobs_pair(spec: &BlobsSpec, shift: &ShiftSpec, seed: u64) -> Result<(DomainDataset, DomainDataset)> {
    if spec.classes < 2 || spec.n_per_class < 1 || spec.dim < 1 {
        return Err(Error::invalid(
            "blobs need ≥ 2 classes, ≥ 1 sample per class and dim ≥ 1",
        ));
    }
    if !(spec.cluster_std >= 0.0 && spec.radius.is_finite()) {
        return Err(Error::invalid(
            "blob radius and spread must be finite, spread non-negative",
        ));
    }
    shift.validate(spec.dim)?;
    let n = spec.classes * spec.n_per_class;
    let (src, src_labels) = spec.sample(&mut rng_for(seed, &[0]));
    let (mut tgt, tgt_labels) = spec.sample(&mut rng_for(seed, &[1]));
    for row in tgt.chunks_mut(spec.dim) {
        shift.apply_affine(row);
    }
    let source = DomainDataset::new(
        Tensor::new(vec![n, spec.dim], src)?,
        Some(src_labels),
        spec.classes,
        0,
        "blobs-source",
    )?;
    let target = DomainDataset::new(
        Tensor::new(vec![n, spec.dim], tgt)?,
        Some(tgt_labels),
        spec.classes,
        1,
        "blobs-target",
    )?;
    let target = add_gaussian_noise(&target, shift.noise_std, shift.seed)?;
    Ok((source, target))
}

/// Rotation center of the two-moons layout.
pub const MOONS_CENTER: [f64; 2] = [0.5, 0.25];

fn sample_moons(n: usize, noise: f64, rng: &mut impl Rng) -> (Vec<f64>, Vec<usize>) {
    let half = n / 2;
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for class in 0..2 {
        for _ in 0..half {
            let t: f64 = rng.random_range(0.0..PI);
            let (x, y) = if class == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            let zx: f64 = rng.sample(StandardNormal);
            let zy: f64 = rng.sample(StandardNormal);
            data.push(x + noise * zx);
            data.push(y + noise * zy);
            labels.push(class);
        }
    }
    (data, labels)
}

/// Two interleaving half circles; the target is an independent draw
/// rotated by `rotation` about [`MOONS_CENTER`].
pub fn make_two_moons_pair(n: usize, noise: f64, rotation: f64, seed: u64) -> Result<(DomainDataset, DomainDataset)> {
    if n < 2 || !n.is_multiple_of(2) {
        return Err(Error::invalid(format!("two moons need an even n ≥ 2, got {n}")));
    }
    if !(noise >= 0.0 && noise.is_finite() && rotation.is_finite()) {
        return Err(Error::invalid("moons noise must be non-negative and rotation finite"));
    }
    let (src, src_labels) = sample_moons(n, noise, &mut rng_for(seed, &[0]));
    let (mut tgt, tgt_labels) = sample_moons(n, noise, &mut rng_for(seed, &[1]));
    if rotation != 0.0 {
        let (s, c) = rotation.sin_cos();
        for p in tgt.chunks_mut(2) {
            let (x, y) = (p[0] - MOONS_CENTER[0], p[1] - MOONS_CENTER[1]);
            p[0] = c * x - s * y + MOONS_CENTER[0];
            p[1] = s * x + c * y + MOONS_CENTER[1];
        }
    }
    let source = DomainDataset::new(Tensor::new(vec![n, 2], src)?, Some(src_labels), 2, 0, "moons-source")?;
    let target = DomainDataset::new(Tensor::new(vec![n, 2], tgt)?, Some(tgt_labels), 2, 1, "moons-target")?;
    Ok((source, target))
}

/// Adds zero-mean Gaussian noise of standard deviation `std` to every feature.
pub fn add_gaussian_noise(ds: &DomainDataset, std: f64, seed: u64) -> Result<DomainDataset> {
    if !(std >= 0.0 && std.is_finite()) {
        return Err(Error::invalid(format!("noise std must be non-negative, got {std}")));
    }
    if std == 0.0 {
        return Ok(ds.clone());
    }
    let mut rng = rng_for(seed, &[0x6e6f697365]);
    let data = ds
        .features
        .data()
        .iter()
        .map(|&v| {
            let z: f64 = rng.sample(StandardNormal);
            v + std * z
        })
        .collect();
    let noisy = Tensor::new(ds.features.shape().to_vec(), data)?;
    let mut out = ds.with_features(noisy);
    out.name = format!("{}+noise{std}", ds.name);
    Ok(out)
}
