//! Training sets and ground-truth mixtures for the memorization experiments.

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::idx::MnistSet;
use crate::gmm::{Gaussian, GaussianMixture};
use crate::random;
use crate::scorenet::Example;
use crate::{Error, Result};

pub const SHARP: &str = "sharp";
pub const BROAD: &str = "broad";

/// Two modes equidistant from the origin, one nearly degenerate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub samples: usize,
    /// Probability of the sharp mode.
    pub sharp_fraction: f64,
    pub dim: usize,
    /// Distance of each mode from the origin.
    pub radius: f64,
    pub sharp_var: f64,
    pub broad_var: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self { samples: 3000, sharp_fraction: 0.05, dim: 2, radius: 1.0, sharp_var: 1e-4, broad_var: 0.5 }
    }
}

#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub examples: Vec<Example>,
    pub mixture: GaussianMixture,
    pub sharp_count: usize,
}

pub fn build_toy_dataset(cfg: &ToyConfig, seed: u64) -> Result<ToyDataset> {
    if cfg.dim == 0 || !(0.0..=1.0).contains(&cfg.sharp_fraction) {
        return Err(Error::invalid("toy dataset needs dim > 0 and sharp_fraction in [0, 1]"));
    }
    let dir = DVector::from_element(cfg.dim, 1.0 / (cfg.dim as f64).sqrt());
    let sharp = Gaussian::isotropic(&dir * cfg.radius, cfg.sharp_var)?;
    let broad = Gaussian::isotropic(&dir * -cfg.radius, cfg.broad_var)?;
    let mut parts = Vec::new();
    if cfg.sharp_fraction > 0.0 {
        parts.push((cfg.sharp_fraction, sharp, SHARP));
    }
    if cfg.sharp_fraction < 1.0 {
        parts.push((1.0 - cfg.sharp_fraction, broad, BROAD));
    }
    let mixture = GaussianMixture::new(
        parts.iter().map(|p| p.0).collect(),
        parts.iter().map(|p| p.1.clone()).collect(),
        parts.iter().map(|p| Some(p.2.to_string())).collect(),
    )?;
    let mut rng = random::rng(seed);
    let draws = mixture.sample_with_components(&mut rng, cfg.samples);
    let mut sharp_count = 0;
    let examples = draws
        .into_iter()
        .map(|(k, x)| {
            let label = mixture.labels()[k].clone();
            sharp_count += usize::from(label.as_deref() == Some(SHARP));
            Example { x: x.as_slice().to_vec(), label }
        })
        .collect();
    Ok(ToyDataset { examples, mixture, sharp_count })
}

/// Many conditions, each a single Gaussian; half of them nearly degenerate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BankConfig {
    pub dim: usize,
    pub sharp_conditions: usize,
    pub broad_conditions: usize,
    /// Standard deviation of the condition means.
    pub mean_scale: f64,
    pub sharp_var: f64,
    pub broad_var: f64,
    /// Unconditional weight of a sharp condition relative to a broad one.
    pub sharp_weight: f64,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            dim: 8,
            sharp_conditions: 50,
            broad_conditions: 50,
            mean_scale: 0.1,
            sharp_var: 1e-4,
            broad_var: 1.0,
            sharp_weight: 0.01,
        }
    }
}

/// Condition names and whether each is sharp.
#[derive(Debug, Clone)]
pub struct ConditionBank {
    pub mixture: GaussianMixture,
    pub conditions: Vec<(String, bool)>,
}

pub fn build_condition_bank(cfg: &BankConfig, seed: u64) -> Result<ConditionBank> {
    if cfg.dim == 0 || cfg.sharp_conditions + cfg.broad_conditions == 0 {
        return Err(Error::invalid("condition bank needs dim > 0 and at least one condition"));
    }
    let mut rng = random::rng(seed);
    let (mut w, mut comps, mut labels, mut conditions) = (vec![], vec![], vec![], vec![]);
    let total = cfg.sharp_conditions + cfg.broad_conditions;
    for i in 0..total {
        let sharp = i < cfg.sharp_conditions;
        let name = if sharp { format!("s{i}") } else { format!("b{}", i - cfg.sharp_conditions) };
        let mean = random::normal_vector(cfg.dim, &mut rng) * cfg.mean_scale;
        let var = if sharp { cfg.sharp_var } else { cfg.broad_var };
        comps.push(Gaussian::isotropic(mean, var)?);
        w.push(if sharp { cfg.sharp_weight } else { 1.0 });
        labels.push(Some(name.clone()));
        conditions.push((name, sharp));
    }
    Ok(ConditionBank { mixture: GaussianMixture::new(w, comps, labels)?, conditions })
}

/// A high-dimensional mixture where one condition holds a duplicated point
/// next to a broad template, and the other conditions are broad.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpikeConfig {
    pub dim: usize,
    /// Share of the spike inside the memorized condition.
    pub spike_weight: f64,
    /// Per-coordinate magnitude of the spike mean.
    pub mean_scale: f64,
    pub spike_var: f64,
    /// Variance of the broad template on its first `narrow_dims` coordinates; 1 elsewhere.
    pub template_var: f64,
    pub narrow_dims: usize,
    pub controls: usize,
}

impl Default for SpikeConfig {
    fn default() -> Self {
        Self {
            dim: 256,
            spike_weight: 0.5,
            mean_scale: 1.0,
            spike_var: 1e-4,
            template_var: 0.5,
            narrow_dims: 64,
            controls: 9,
        }
    }
}

pub const MEMORIZED: &str = "m";

#[derive(Debug, Clone)]
pub struct SpikeToy {
    pub mixture: GaussianMixture,
    pub spike: DVector<f64>,
    pub controls: Vec<String>,
}

pub fn build_spike_toy(cfg: &SpikeConfig, seed: u64) -> Result<SpikeToy> {
    if cfg.dim == 0 || !(cfg.spike_weight > 0.0 && cfg.spike_weight < 1.0) {
        return Err(Error::invalid("spike toy needs dim > 0 and spike_weight in (0, 1)"));
    }
    let mut rng = random::rng(seed);
    let spike = DVector::from_fn(cfg.dim, |_, _| if rng.gen::<bool>() { cfg.mean_scale } else { -cfg.mean_scale });
    let var = DVector::from_fn(cfg.dim, |i, _| if i < cfg.narrow_dims { cfg.template_var } else { 1.0 });
    let mut w = vec![cfg.spike_weight, 1.0 - cfg.spike_weight];
    let mut comps = vec![
        Gaussian::isotropic(spike.clone(), cfg.spike_var)?,
        Gaussian::diagonal(DVector::zeros(cfg.dim), var.clone())?,
    ];
    let mut labels = vec![Some(MEMORIZED.to_string()); 2];
    let controls: Vec<String> = (0..cfg.controls).map(|i| format!("n{i}")).collect();
    for c in &controls {
        w.push(1.0);
        comps.push(Gaussian::diagonal(DVector::zeros(cfg.dim), var.clone())?);
        labels.push(Some(c.clone()));
    }
    Ok(SpikeToy { mixture: GaussianMixture::new(w, comps, labels)?, spike, controls })
}

/// Area-weighted resampling of a square grayscale image to `side x side`,
/// mapped to `[-1, 1]`.
pub fn downsample(img: &[u8], src: usize, side: usize) -> Vec<f64> {
    let scale = src as f64 / side as f64;
    let overlap = |o: usize, s: usize| -> f64 {
        let (a, b) = (o as f64 * scale, (o + 1) as f64 * scale);
        ((s + 1) as f64).min(b) - (s as f64).max(a)
    };
    let mut out = Vec::with_capacity(side * side);
    for oy in 0..side {
        let ys = (oy as f64 * scale).floor() as usize..(((oy + 1) as f64 * scale).ceil() as usize).min(src);
        for ox in 0..side {
            let xs = (ox as f64 * scale).floor() as usize..(((ox + 1) as f64 * scale).ceil() as usize).min(src);
            let mut acc = 0.0;
            for sy in ys.clone() {
                let wy = overlap(oy, sy);
                for sx in xs.clone() {
                    acc += wy * overlap(ox, sx) * img[sy * src + sx] as f64;
                }
            }
            out.push(acc / (scale * scale) / 255.0 * 2.0 - 1.0);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MnistConfig {
    pub general_digit: u8,
    pub memorized_digit: u8,
    pub general_count: usize,
    pub duplicates: usize,
    /// Which occurrence of the memorized digit to duplicate.
    pub memorized_occurrence: usize,
    pub side: usize,
}

impl Default for MnistConfig {
    fn default() -> Self {
        Self { general_digit: 3, memorized_digit: 9, general_count: 3000, duplicates: 100, memorized_occurrence: 0, side: 16 }
    }
}

#[derive(Debug, Clone)]
pub struct MnistDataset {
    pub examples: Vec<Example>,
    /// Distinct training images, downsampled.
    pub train_points: Vec<Vec<f64>>,
    pub memorized_index: usize,
    /// sha256 of the raw bytes of the duplicated image.
    pub memorized_sha256: String,
    pub general_label: String,
    pub memorized_label: String,
}

pub fn build_mnist_dataset(set: &MnistSet, cfg: &MnistConfig) -> Result<MnistDataset> {
    if set.rows != set.cols {
        return Err(Error::Data(format!("expected square images, got {}x{}", set.rows, set.cols)));
    }
    if cfg.side == 0 || cfg.side > set.rows {
        return Err(Error::invalid(format!("side {} outside [1, {}]", cfg.side, set.rows)));
    }
    let general: Vec<usize> = (0..set.len()).filter(|&i| set.labels[i] == cfg.general_digit).take(cfg.general_count).collect();
    if general.len() < cfg.general_count {
        return Err(Error::Data(format!(
            "only {} images of digit {} available, need {}",
            general.len(),
            cfg.general_digit,
            cfg.general_count
        )));
    }
    let memorized_index = (0..set.len())
        .filter(|&i| set.labels[i] == cfg.memorized_digit)
        .nth(cfg.memorized_occurrence)
        .ok_or_else(|| Error::Data(format!("no occurrence {} of digit {}", cfg.memorized_occurrence, cfg.memorized_digit)))?;
    let (gl, ml) = (cfg.general_digit.to_string(), cfg.memorized_digit.to_string());
    let mut examples = Vec::with_capacity(general.len() + cfg.duplicates);
    let mut train_points = Vec::with_capacity(general.len() + 1);
    for &i in &general {
        let x = downsample(set.image(i), set.rows, cfg.side);
        train_points.push(x.clone());
        examples.push(Example { x, label: Some(gl.clone()) });
    }
    let nine = downsample(set.image(memorized_index), set.rows, cfg.side);
    train_points.push(nine.clone());
    for _ in 0..cfg.duplicates {
        examples.push(Example { x: nine.clone(), label: Some(ml.clone()) });
    }
    Ok(MnistDataset {
        examples,
        train_points,
        memorized_index,
        memorized_sha256: format!("{:x}", Sha256::digest(set.image(memorized_index))),
        general_label: gl,
        memorized_label: ml,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_defaults() {
        let a = build_toy_dataset(&ToyConfig::default(), 3).unwrap();
        assert_eq!(a.examples.len(), 3000);
        let sd = (3000.0f64 * 0.05 * 0.95).sqrt();
        assert!((a.sharp_count as f64 - 150.0).abs() <= 3.0 * sd);
        let b = build_toy_dataset(&ToyConfig::default(), 3).unwrap();
        assert_eq!(a.examples, b.examples);
    }

    #[test]
    fn toy_single_mode() {
        let a = build_toy_dataset(&ToyConfig { sharp_fraction: 0.0, ..ToyConfig::default() }, 1).unwrap();
        assert_eq!(a.sharp_count, 0);
        assert_eq!(a.mixture.components().len(), 1);
    }

    #[test]
    fn downsample_constant_and_range() {
        let img = vec![255u8; 28 * 28];
        assert!(downsample(&img, 28, 16).iter().all(|v| (v - 1.0).abs() < 1e-12));
        let img = vec![0u8; 28 * 28];
        assert!(downsample(&img, 28, 16).iter().all(|v| (v + 1.0).abs() < 1e-12));
        let ramp: Vec<u8> = (0..16).map(|i| (i * 17) as u8).collect();
        assert_eq!(downsample(&ramp, 4, 4).len(), 16);
    }

    #[test]
    fn mnist_protocol_on_synthetic_set() {
        let mut labels = vec![3u8; 5];
        labels.extend([9, 9]);
        let images: Vec<u8> = (0..7 * 4).map(|i| i as u8).collect();
        let set = MnistSet { rows: 2, cols: 2, images, labels, provenance: vec![] };
        let cfg = MnistConfig { general_count: 5, duplicates: 3, memorized_occurrence: 1, side: 2, ..MnistConfig::default() };
        let ds = build_mnist_dataset(&set, &cfg).unwrap();
        assert_eq!(ds.examples.len(), 8);
        assert_eq!(ds.memorized_index, 6);
        assert_eq!(ds.train_points.len(), 6);
        let again = build_mnist_dataset(&set, &cfg).unwrap();
        assert_eq!(ds.memorized_sha256, again.memorized_sha256);
        assert!(build_mnist_dataset(&set, &MnistConfig { general_count: 6, ..cfg }).is_err());
    }
}
