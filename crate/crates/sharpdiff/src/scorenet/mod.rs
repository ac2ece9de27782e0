//! A small conditional MLP usable as a score field.
//!
//! The noise estimate `eps` is read off the network output according to
//! [`Prediction`]; the score is `-eps / sigma_t`. Hessian-vector products
//! come from forward-mode tangents through the network.

mod checkpoint;
pub(crate) mod tape;
mod train;

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::NoiseSchedule;
use crate::field::ScoreField;
use crate::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};
pub use train::{dsm_loss, second_order_dsm_loss, train, DsmItem, Example, TrainConfig, TrainReport};

use tape::{silu, silu_prime};

/// Network shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    /// Data dimension.
    pub dim: usize,
    pub hidden: Vec<usize>,
    /// Sinusoidal time features (even).
    pub time_features: usize,
    /// Width of the learned condition embedding.
    pub cond_features: usize,
    /// Condition labels; the null condition is implicit.
    pub labels: Vec<String>,
    #[serde(default)]
    pub prediction: Prediction,
}

/// What the raw network output stands for.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Prediction {
    /// The noise itself.
    #[default]
    Noise,
    /// `sqrt(alpha_bar) eps - sigma x_0`.
    Velocity,
}

impl Prediction {
    /// `(a, b)` with `eps_hat = a x_t + b out`.
    pub fn coefficients(self, alpha_bar: f64) -> (f64, f64) {
        match self {
            Prediction::Noise => (0.0, 1.0),
            Prediction::Velocity => ((1.0 - alpha_bar).sqrt(), alpha_bar.sqrt()),
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::invalid("network dimension must be positive"));
        }
        if self.time_features % 2 != 0 {
            return Err(Error::invalid("time_features must be even"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::invalid("hidden widths must be positive"));
        }
        Ok(())
    }

    fn input_width(&self) -> usize {
        self.dim + self.time_features + self.cond_features
    }

    /// Stable digest of the architecture.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:x}", Sha256::digest(json.as_bytes()))
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerSlot {
    w: usize,
    b: usize,
    input: usize,
    output: usize,
}

/// Parameter layout: condition table, then `(W, b)` per layer.
#[derive(Debug, Clone)]
struct Layout {
    table: usize,
    layers: Vec<LayerSlot>,
    total: usize,
}

impl Layout {
    fn new(cfg: &MlpConfig) -> Self {
        let rows = cfg.labels.len() + 1;
        let mut off = rows * cfg.cond_features;
        let mut widths = vec![cfg.input_width()];
        widths.extend(&cfg.hidden);
        widths.push(cfg.dim);
        let layers = widths
            .windows(2)
            .map(|w| {
                let slot = LayerSlot { w: off, b: off + w[0] * w[1], input: w[0], output: w[1] };
                off += w[0] * w[1] + w[1];
                slot
            })
            .collect();
        Self { table: 0, layers, total: off }
    }
}

/// Conditional MLP with SiLU activations.
#[derive(Debug, Clone)]
pub struct Mlp {
    config: MlpConfig,
    layout: Layout,
    params: Vec<f64>,
}

impl Mlp {
    /// All-zero parameters.
    pub fn zeros(config: MlpConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let params = vec![0.0; layout.total];
        Ok(Self { config, layout, params })
    }

    /// Scaled-normal weights, zero biases, small embeddings.
    pub fn init<R: Rng + ?Sized>(config: MlpConfig, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        let emb = net.layout.layers[0].w;
        for p in &mut net.params[..emb] {
            *p = rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
        let n = net.layout.layers.len();
        for (i, slot) in net.layout.layers.clone().into_iter().enumerate() {
            let gain = if i + 1 == n { 0.5 } else { 1.0 };
            let scale = gain / (slot.input as f64).sqrt();
            for p in &mut net.params[slot.w..slot.b] {
                *p = scale * rng.sample::<f64, _>(rand_distr::StandardNormal);
            }
        }
        Ok(net)
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }
    pub fn params(&self) -> &[f64] {
        &self.params
    }
    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }
    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.layout.total {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.layout.total,
                params.len()
            )));
        }
        self.params = params;
        Ok(())
    }

    /// Table row for a condition; the last row is the null condition.
    pub fn cond_index(&self, cond: Option<&str>) -> Result<usize> {
        match cond {
            None => Ok(self.config.labels.len()),
            Some(c) => self.config.labels.iter().position(|l| l == c).ok_or_else(|| {
                Error::invalid(format!("unknown condition {c:?}; known: {:?}", self.config.labels))
            }),
        }
    }

    pub(crate) fn time_embedding(&self, t: usize) -> Vec<f64> {
        time_embedding(self.config.time_features, t)
    }

    fn features(&self, x: &[f64], t: usize, ci: usize) -> Vec<f64> {
        let cf = self.config.cond_features;
        let mut f = Vec::with_capacity(self.config.input_width());
        f.extend_from_slice(x);
        f.extend(self.time_embedding(t));
        f.extend_from_slice(&self.params[self.layout.table + ci * cf..self.layout.table + (ci + 1) * cf]);
        f
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.config.dim {
            return Err(Error::invalid(format!("input has dimension {}, network expects {}", x.len(), self.config.dim)));
        }
        Ok(())
    }

    /// Raw network output.
    pub fn forward(&self, x: &[f64], t: usize, cond: Option<&str>) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let ci = self.cond_index(cond)?;
        let mut a = self.features(x, t, ci);
        let n = self.layout.layers.len();
        for (i, slot) in self.layout.layers.iter().enumerate() {
            let mut z = self.affine(slot, &a);
            if i + 1 < n {
                z.iter_mut().for_each(|v| *v = silu(*v));
            }
            a = z;
        }
        Ok(a)
    }

    /// Raw output and its directional derivative along `v` in `x`.
    pub fn forward_jvp(&self, x: &[f64], t: usize, cond: Option<&str>, v: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_input(x)?;
        self.check_input(v)?;
        let ci = self.cond_index(cond)?;
        let mut a = self.features(x, t, ci);
        let mut da = vec![0.0; a.len()];
        da[..v.len()].copy_from_slice(v);
        let n = self.layout.layers.len();
        for (i, slot) in self.layout.layers.iter().enumerate() {
            let mut z = self.affine(slot, &a);
            let mut dz = self.linear(slot, &da);
            if i + 1 < n {
                for (zi, dzi) in z.iter_mut().zip(dz.iter_mut()) {
                    *dzi *= silu_prime(*zi);
                    *zi = silu(*zi);
                }
            }
            a = z;
            da = dz;
        }
        Ok((a, da))
    }

    /// Noise estimate at `(x, t)`.
    pub fn predict_noise(&self, x: &[f64], t: usize, cond: Option<&str>, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
        let (a, b) = self.config.prediction.coefficients(schedule.alpha_bar_at(t)?);
        let out = self.forward(x, t, cond)?;
        Ok(out.iter().zip(x).map(|(o, xi)| a * xi + b * o).collect())
    }

    /// Noise estimate and its directional derivative along `v`.
    pub fn predict_noise_jvp(
        &self,
        x: &[f64],
        t: usize,
        cond: Option<&str>,
        v: &[f64],
        schedule: &NoiseSchedule,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let (a, b) = self.config.prediction.coefficients(schedule.alpha_bar_at(t)?);
        let (out, dout) = self.forward_jvp(x, t, cond, v)?;
        Ok((
            out.iter().zip(x).map(|(o, xi)| a * xi + b * o).collect(),
            dout.iter().zip(v).map(|(o, vi)| a * vi + b * o).collect(),
        ))
    }

    fn linear(&self, slot: &LayerSlot, a: &[f64]) -> Vec<f64> {
        let w = &self.params[slot.w..slot.b];
        (0..slot.output)
            .map(|o| w[o * slot.input..(o + 1) * slot.input].iter().zip(a).map(|(x, y)| x * y).sum())
            .collect()
    }

    fn affine(&self, slot: &LayerSlot, a: &[f64]) -> Vec<f64> {
        let mut z = self.linear(slot, a);
        for (zi, bi) in z.iter_mut().zip(&self.params[slot.b..slot.b + slot.output]) {
            *zi += bi;
        }
        z
    }
}

/// `[sin(t f_i), cos(t f_i)]` with geometric frequencies.
pub(crate) fn time_embedding(features: usize, t: usize) -> Vec<f64> {
    let half = features / 2;
    let mut out = Vec::with_capacity(features);
    let tf = t as f64;
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10_000f64).ln() * i as f64 / half.max(1) as f64).exp())
        .collect();
    out.extend(freqs.iter().map(|f| (tf * f).sin()));
    out.extend(freqs.iter().map(|f| (tf * f).cos()));
    out
}

/// A trained network paired with its schedule.
#[derive(Debug, Clone)]
pub struct NetField {
    net: Mlp,
    schedule: NoiseSchedule,
}

impl NetField {
    pub fn new(net: Mlp, schedule: NoiseSchedule) -> Self {
        Self { net, schedule }
    }
    pub fn net(&self) -> &Mlp {
        &self.net
    }
    pub fn into_net(self) -> Mlp {
        self.net
    }
}

impl ScoreField for NetField {
    fn dim(&self) -> usize {
        self.net.config.dim
    }
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }
    fn score(&self, x: &DVector<f64>, t: usize, cond: Option<&str>) -> Result<DVector<f64>> {
        let sigma = self.schedule.sigma(t)?;
        let eps = self.net.predict_noise(x.as_slice(), t, cond, &self.schedule)?;
        Ok(DVector::from_iterator(eps.len(), eps.into_iter().map(|e| -e / sigma)))
    }
    fn hvp(&self, x: &DVector<f64>, t: usize, cond: Option<&str>, v: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.score_and_hvp(x, t, cond, v)?.1)
    }
    fn score_and_hvp(
        &self,
        x: &DVector<f64>,
        t: usize,
        cond: Option<&str>,
        v: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        let sigma = self.schedule.sigma(t)?;
        let (eps, deps) = self.net.predict_noise_jvp(x.as_slice(), t, cond, v.as_slice(), &self.schedule)?;
        let d = eps.len();
        Ok((
            DVector::from_iterator(d, eps.into_iter().map(|e| -e / sigma)),
            DVector::from_iterator(d, deps.into_iter().map(|e| -e / sigma)),
        ))
    }
}
