use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Node, Tape, Tensor};
use super::{time_embedding, Mlp, Prediction};
use crate::diffusion::NoiseSchedule;
use crate::random;
use crate::{Error, Result};

/// A training point with an optional condition label.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub x: Vec<f64>,
    pub label: Option<String>,
}

/// One noised element: the clean point, its timestep and the noise draw.
#[derive(Debug, Clone, PartialEq)]
pub struct DsmItem {
    pub x0: Vec<f64>,
    pub t: usize,
    pub eps: Vec<f64>,
    pub cond: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight on the Hessian-matching term.
    pub lambda2: f64,
    /// Probability of replacing the label by the null condition.
    pub p_drop: f64,
    pub seed: u64,
    /// Jacobian columns per batch for the second-order term; all when `d` is smaller.
    pub hessian_columns: usize,
    /// Per-element `1 / sigma_t^4` factor on the second-order term.
    pub inverse_sigma4: bool,
    /// Treat the residual in the second-order target as a constant.
    pub detach_residual: bool,
    /// Cosine decay of the step size to zero over the run.
    pub cosine_decay: bool,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            learning_rate: 1e-3,
            lambda2: 0.5,
            p_drop: 0.2,
            seed: 0,
            hessian_columns: 16,
            inverse_sigma4: false,
            detach_residual: true,
            cosine_decay: false,
            beta1: 0.9,
            beta2: 0.999,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return Err(Error::invalid("lambda2 must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.p_drop) {
            return Err(Error::invalid("p_drop must lie in [0, 1]"));
        }
        if self.hessian_columns == 0 {
            return Err(Error::invalid("hessian_columns must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean combined loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Combined loss on a fixed evaluation batch before and after training.
    pub initial_loss: f64,
    pub final_loss: f64,
}

struct Adam {
    lr: f64,
    b1: f64,
    b2: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    fn new(n: usize, cfg: &TrainConfig) -> Self {
        Self { lr: cfg.learning_rate, b1: cfg.beta1, b2: cfg.beta2, m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step += 1;
        let c1 = 1.0 - self.b1.powi(self.step);
        let c2 = 1.0 - self.b2.powi(self.step);
        for i in 0..params.len() {
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * grad[i];
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}

struct Forward {
    /// Pre-activations per layer; the last one is the output.
    z: Vec<Node>,
    out: Node,
}

struct Prepared {
    x_t: Vec<f64>,
    sigma: Vec<f64>,
    eps: Vec<f64>,
    temb: Vec<f64>,
    cond: Vec<usize>,
    /// Per-element `(a, b)` of the output map, see [`Prediction::coefficients`].
    skip: Vec<f64>,
    gain: Vec<f64>,
}

fn prepare(net: &Mlp, items: &[DsmItem], schedule: &NoiseSchedule) -> Result<Prepared> {
    if items.is_empty() {
        return Err(Error::invalid("batch is empty"));
    }
    let d = net.config.dim;
    let tf = net.config.time_features;
    let mut p = Prepared {
        x_t: Vec::with_capacity(items.len() * d),
        sigma: Vec::with_capacity(items.len()),
        eps: Vec::with_capacity(items.len() * d),
        temb: Vec::with_capacity(items.len() * tf),
        cond: Vec::with_capacity(items.len()),
        skip: Vec::with_capacity(items.len()),
        gain: Vec::with_capacity(items.len()),
    };
    for it in items {
        if it.x0.len() != d || it.eps.len() != d {
            return Err(Error::invalid(format!("batch element has dimension {}, network expects {d}", it.x0.len())));
        }
        let ab = schedule.alpha_bar_at(it.t)?;
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        p.x_t.extend(it.x0.iter().zip(&it.eps).map(|(x, e)| a * x + s * e));
        p.eps.extend_from_slice(&it.eps);
        p.sigma.push(s);
        p.temb.extend(time_embedding(tf, it.t));
        p.cond.push(net.cond_index(it.cond.as_deref())?);
        let (ca, cb) = net.config.prediction.coefficients(ab);
        p.skip.push(ca);
        p.gain.push(cb);
    }
    Ok(p)
}

fn forward(tape: &mut Tape, net: &Mlp, p: &Prepared) -> Forward {
    let b = p.sigma.len();
    let cfg = &net.config;
    let x = tape.constant(Tensor::from_vec(b, cfg.dim, p.x_t.clone()));
    let mut parts = vec![x];
    if cfg.time_features > 0 {
        parts.push(tape.constant(Tensor::from_vec(b, cfg.time_features, p.temb.clone())));
    }
    if cfg.cond_features > 0 {
        let table = tape.param(&net.params, net.layout.table, cfg.labels.len() + 1, cfg.cond_features);
        parts.push(tape.gather(table, p.cond.clone()));
    }
    let mut a = if parts.len() == 1 { x } else { tape.concat(parts) };
    let n = net.layout.layers.len();
    let mut z = Vec::with_capacity(n);
    for (i, slot) in net.layout.layers.iter().enumerate() {
        let w = tape.param(&net.params, slot.w, slot.output, slot.input);
        let bias = tape.param(&net.params, slot.b, 1, slot.output);
        let lin = tape.matmul_t(a, w);
        let zi = tape.add_bias(lin, bias);
        z.push(zi);
        a = if i + 1 < n { tape.silu(zi) } else { zi };
    }
    if cfg.prediction != Prediction::Noise {
        let scaled = tape.row_scale(a, p.gain.clone());
        let through = tape.row_scale(x, p.skip.clone());
        a = tape.add(scaled, through);
    }
    Forward { out: a, z }
}

/// Output tangent for input direction `e_col`, one row per batch element.
fn input_tangent(tape: &mut Tape, net: &Mlp, p: &Prepared, fwd: &Forward, col: usize) -> Node {
    let rows = p.sigma.len();
    let slot = net.layout.layers[0];
    let w0 = tape.param(&net.params, slot.w, slot.output, slot.input);
    let mut dz = tape.weight_column(w0, col, rows);
    for (i, slot) in net.layout.layers.iter().enumerate().skip(1) {
        let sp = tape.silu_prime(fwd.z[i - 1]);
        let da = tape.mul(sp, dz);
        let w = tape.param(&net.params, slot.w, slot.output, slot.input);
        dz = tape.matmul_t(da, w);
    }
    if net.config.prediction != Prediction::Noise {
        let d = net.config.dim;
        let mut unit = Tensor::zeros(rows, d);
        for r in 0..rows {
            unit.data[r * d + col] = p.skip[r];
        }
        let unit = tape.constant(unit);
        let scaled = tape.row_scale(dz, p.gain.clone());
        dz = tape.add(scaled, unit);
    }
    dz
}

/// Builds `dsm + lambda2 * second_order` on the tape and returns both parts.
fn build_loss(
    tape: &mut Tape,
    net: &Mlp,
    p: &Prepared,
    lambda2: f64,
    columns: &[usize],
    inverse_sigma4: bool,
    detach: bool,
) -> (Node, Node, Option<Node>) {
    let b = p.sigma.len();
    let d = net.config.dim;
    let fwd = forward(tape, net, p);
    let eps = tape.constant(Tensor::from_vec(b, d, p.eps.clone()));
    let resid = tape.sub(eps, fwd.out);
    let dsm = tape.weighted_sum_sq(resid, vec![1.0 / b as f64; b]);
    if lambda2 == 0.0 || columns.is_empty() {
        return (dsm, dsm, None);
    }
    let scale = d as f64 / columns.len() as f64 / b as f64;
    let weights: Vec<f64> = p
        .sigma
        .iter()
        .map(|s| if inverse_sigma4 { scale / s.powi(4) } else { scale })
        .collect();
    let fixed = if detach { tape.constant(tape.value(resid).clone()) } else { resid };
    let neg_sigma: Vec<f64> = p.sigma.iter().map(|s| -s).collect();
    let mut second: Option<Node> = None;
    for &j in columns {
        let jac = input_tangent(tape, net, p, &fwd, j);
        let hs = tape.row_scale(jac, neg_sigma.clone());
        let mut unit = Tensor::zeros(b, d);
        for r in 0..b {
            unit.data[r * d + j] = 1.0;
        }
        let unit = tape.constant(unit);
        let outer = tape.mul_column(fixed, fixed, j);
        let target = tape.sub(unit, outer);
        let m = tape.add(hs, target);
        let term = tape.weighted_sum_sq(m, weights.clone());
        second = Some(match second {
            Some(acc) => tape.add(acc, term),
            None => term,
        });
    }
    let second = second.expect("at least one column");
    let weighted = tape.scale(second, lambda2);
    (tape.add(dsm, weighted), dsm, Some(second))
}

/// Mean `|eps - eps_hat|^2`, equal to `E|sigma_t s + eps|^2`.
pub fn dsm_loss(net: &Mlp, batch: &[DsmItem], schedule: &NoiseSchedule) -> Result<f64> {
    let p = prepare(net, batch, schedule)?;
    let mut tape = Tape::new();
    let (_, dsm, _) = build_loss(&mut tape, net, &p, 0.0, &[], false, false);
    Ok(tape.value(dsm).scalar())
}

/// Mean `|sigma_t^2 H + I - l l^T|_F^2` with every Jacobian column.
pub fn second_order_dsm_loss(
    net: &Mlp,
    batch: &[DsmItem],
    schedule: &NoiseSchedule,
    inverse_sigma4: bool,
) -> Result<f64> {
    let p = prepare(net, batch, schedule)?;
    let cols: Vec<usize> = (0..net.config.dim).collect();
    let mut tape = Tape::new();
    let (_, _, second) = build_loss(&mut tape, net, &p, 1.0, &cols, inverse_sigma4, false);
    Ok(tape.value(second.expect("columns are nonempty")).scalar())
}

/// Combined loss and its parameter gradient.
pub(crate) fn loss_and_grad(
    net: &Mlp,
    batch: &[DsmItem],
    schedule: &NoiseSchedule,
    lambda2: f64,
    columns: &[usize],
    inverse_sigma4: bool,
    detach: bool,
) -> Result<(f64, Vec<f64>)> {
    let p = prepare(net, batch, schedule)?;
    let mut tape = Tape::new();
    let (total, _, _) = build_loss(&mut tape, net, &p, lambda2, columns, inverse_sigma4, detach);
    let mut grad = vec![0.0; net.param_count()];
    tape.backward(total, &mut grad);
    Ok((tape.value(total).scalar(), grad))
}

fn draw_item<R: Rng + ?Sized>(ex: &Example, p_drop: f64, schedule: &NoiseSchedule, rng: &mut R) -> DsmItem {
    let t = rng.gen_range(0..schedule.len());
    let eps = random::normal_vector(ex.x.len(), rng).as_slice().to_vec();
    let cond = match &ex.label {
        Some(l) if rng.gen::<f64>() >= p_drop => Some(l.clone()),
        _ => None,
    };
    DsmItem { x0: ex.x.clone(), t, eps, cond }
}

fn pick_columns<R: Rng + ?Sized>(d: usize, k: usize, rng: &mut R) -> Vec<usize> {
    if k >= d {
        return (0..d).collect();
    }
    let mut cols = rand::seq::index::sample(rng, d, k).into_vec();
    cols.sort_unstable();
    cols
}

/// Adam on the combined objective. Deterministic for a fixed seed.
pub fn train(net: &mut Mlp, data: &[Example], config: &TrainConfig, schedule: &NoiseSchedule) -> Result<TrainReport> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let d = net.config.dim;
    if let Some(bad) = data.iter().find(|e| e.x.len() != d) {
        return Err(Error::invalid(format!("example has dimension {}, network expects {d}", bad.x.len())));
    }
    for e in data {
        net.cond_index(e.label.as_deref())?;
    }
    let all_cols: Vec<usize> = (0..d).collect();
    let eval_cols = if config.lambda2 > 0.0 { &all_cols[..] } else { &[][..] };

    let mut eval_rng = random::stream(config.seed, 1);
    let eval: Vec<DsmItem> = (0..config.batch_size.min(256))
        .map(|i| draw_item(&data[i % data.len()], config.p_drop, schedule, &mut eval_rng))
        .collect();
    let eval_loss = |net: &Mlp| -> Result<f64> {
        let p = prepare(net, &eval, schedule)?;
        let mut tape = Tape::new();
        let (total, _, _) = build_loss(&mut tape, net, &p, config.lambda2, eval_cols, config.inverse_sigma4, false);
        Ok(tape.value(total).scalar())
    };
    let initial_loss = eval_loss(net)?;

    let mut rng = random::stream(config.seed, 0);
    let mut adam = Adam::new(net.param_count(), config);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        if config.cosine_decay {
            let f = epoch as f64 / config.epochs as f64;
            adam.lr = config.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * f).cos());
        }
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<DsmItem> =
                chunk.iter().map(|&i| draw_item(&data[i], config.p_drop, schedule, &mut rng)).collect();
            let cols = if config.lambda2 > 0.0 { pick_columns(d, config.hessian_columns, &mut rng) } else { vec![] };
            let (loss, grad) = loss_and_grad(net, &batch, schedule, config.lambda2, &cols, config.inverse_sigma4, config.detach_residual)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Training { epoch });
            }
            adam.update(&mut net.params, &grad);
            sum += loss * chunk.len() as f64;
            count += chunk.len();
        }
        epoch_losses.push(sum / count as f64);
    }
    let final_loss = eval_loss(net)?;
    if !final_loss.is_finite() {
        return Err(Error::Training { epoch: config.epochs.saturating_sub(1) });
    }
    Ok(TrainReport { epoch_losses, initial_loss, final_loss })
}
