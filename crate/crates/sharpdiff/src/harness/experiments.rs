//! Experiment runners shared by the command line and the acceptance suite.

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::eval::{self, MannWhitney};
use crate::diffusion::{self, cfg_eps, NoiseSchedule, SamplerConfig, Target};
use crate::field::{GmmField, ScoreField};
use crate::gmm::{Gaussian, GaussianMixture};
use crate::metrics::{self, LemmaReport};
use crate::random;
use crate::sail::{self, SailConfig, SailTrace};
use crate::scorenet::{self, Example, Mlp, MlpConfig, Prediction, TrainConfig, TrainReport};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self { steps: 1000, beta_min: 1e-4, beta_max: 0.02 }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_min, self.beta_max)
    }
}

// ---------------------------------------------------------------- lemmas

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LemmaConfig {
    pub matrices: usize,
    pub max_dim: usize,
    pub samples: usize,
    pub mixtures: usize,
    pub mixture_samples: usize,
}

impl Default for LemmaConfig {
    fn default() -> Self {
        Self { matrices: 20, max_dim: 8, samples: 100_000, mixtures: 5, mixture_samples: 100_000 }
    }
}

fn random_dim<R: Rng>(max: usize, rng: &mut R) -> usize {
    rng.gen_range(2..=max.max(2))
}

/// Score-norm identity on random SPD covariances.
pub fn lemma_score_norm_suite(cfg: &LemmaConfig, seed: u64) -> Result<Vec<LemmaReport>> {
    (0..cfg.matrices)
        .into_par_iter()
        .map(|i| {
            let mut rng = random::stream(seed, i as u64);
            let sigma = random::spd_matrix(random_dim(cfg.max_dim, &mut rng), 0.2, &mut rng);
            metrics::verify_lemma_score_norm(&sigma, cfg.samples, rng.gen())
        })
        .collect()
}

/// Random mixture with `k` full-covariance components.
pub fn random_mixture<R: Rng>(d: usize, k: usize, rng: &mut R) -> Result<GaussianMixture> {
    let comps = (0..k)
        .map(|_| Gaussian::new(random::normal_vector(d, rng) * 2.0, random::spd_matrix(d, 0.2, rng)))
        .collect::<Result<Vec<_>>>()?;
    let w = (0..k).map(|_| rng.gen_range(0.2..1.0)).collect();
    GaussianMixture::unlabeled(w, comps)
}

pub fn lemma_mixture_suite(cfg: &LemmaConfig, seed: u64) -> Result<Vec<LemmaReport>> {
    (0..cfg.mixtures)
        .into_par_iter()
        .map(|i| {
            let mut rng = random::stream(seed, 1000 + i as u64);
            let d = random_dim(cfg.max_dim.min(4), &mut rng);
            let mix = random_mixture(d, 3, &mut rng)?;
            metrics::verify_lemma_score_norm_mixture(&mix, cfg.mixture_samples, rng.gen())
        })
        .collect()
}

fn random_pair<R: Rng>(max_dim: usize, rng: &mut R) -> (DVector<f64>, DVector<f64>, nalgebra::DMatrix<f64>, nalgebra::DMatrix<f64>) {
    let d = random_dim(max_dim, rng);
    let mu = random::normal_vector(d, rng) * 0.5;
    let mu_c = random::normal_vector(d, rng) * 0.5;
    let sigma = random::spd_matrix(d, 0.5, rng);
    let sigma_c = random::spd_matrix(d, 0.5, rng);
    (mu, mu_c, sigma, sigma_c)
}

/// Score-difference identity on random Gaussian pairs.
pub fn lemma_score_difference_suite(cfg: &LemmaConfig, seed: u64) -> Result<Vec<LemmaReport>> {
    (0..cfg.matrices)
        .into_par_iter()
        .map(|i| {
            let mut rng = random::stream(seed, 2000 + i as u64);
            let (mu, mu_c, s, sc) = random_pair(cfg.max_dim, &mut rng);
            metrics::verify_lemma_score_difference(&mu, &mu_c, &s, &sc, cfg.samples, rng.gen())
        })
        .collect()
}

/// Cubic trace identity and the quartic sharpness expectation.
pub fn lemma_cubic_suite(cfg: &LemmaConfig, seed: u64) -> Result<Vec<LemmaReport>> {
    let mut out: Vec<LemmaReport> = (0..cfg.matrices)
        .into_par_iter()
        .map(|i| {
            let mut rng = random::stream(seed, 3000 + i as u64);
            let sigma = random::spd_matrix(random_dim(cfg.max_dim, &mut rng), 0.5, &mut rng);
            metrics::verify_lemma_score_cubic(&sigma, cfg.samples, rng.gen())
        })
        .collect::<Result<_>>()?;
    let quartic: Vec<LemmaReport> = (0..cfg.matrices)
        .into_par_iter()
        .map(|i| {
            let mut rng = random::stream(seed, 4000 + i as u64);
            let (mu, mu_c, s, sc) = random_pair(cfg.max_dim, &mut rng);
            metrics::verify_hsp_expectation(&mu, &mu_c, &s, &sc, cfg.samples, rng.gen())
        })
        .collect::<Result<_>>()?;
    out.extend(quartic);
    Ok(out)
}

pub fn run_lemmas(cfg: &LemmaConfig, seed: u64) -> Result<Vec<LemmaReport>> {
    let mut all = lemma_score_norm_suite(cfg, seed)?;
    all.extend(lemma_mixture_suite(cfg, seed)?);
    all.extend(lemma_score_difference_suite(cfg, seed)?);
    all.extend(lemma_cubic_suite(cfg, seed)?);
    Ok(all)
}

// ---------------------------------------------------------------- sampling

/// Initial noise for draw `index`.
pub fn initial_noise(dim: usize, seed: u64, index: u64) -> DVector<f64> {
    random::normal_vector(dim, &mut random::stream(seed, index))
}

pub fn generate_samples<F: ScoreField>(
    field: &F,
    cond: Option<&str>,
    n: usize,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<Vec<DVector<f64>>> {
    (0..n)
        .into_par_iter()
        .map(|i| diffusion::generate(field, &initial_noise(field.dim(), seed, i as u64), cond, sampler))
        .collect()
}

// ---------------------------------------------------------------- spectra

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeWindow {
    /// Timesteps `t <= fraction * (T - 1)`.
    FinalFraction(f64),
    Steps(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectrumConfig {
    pub conditions: Vec<String>,
    pub seeds: usize,
    pub sampler: SamplerConfig,
    pub arnoldi_steps: usize,
    pub window: ProbeWindow,
}

impl Default for SpectrumConfig {
    fn default() -> Self {
        Self {
            conditions: vec![],
            seeds: 100,
            sampler: SamplerConfig { inference_steps: 500, guidance: 1.0, eta: 0.0 },
            arnoldi_steps: 10,
            window: ProbeWindow::FinalFraction(0.25),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumProbe {
    pub t: usize,
    pub min_eig: f64,
    pub max_eig: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySpectrum {
    pub condition: String,
    pub seed: usize,
    pub sample: DVector<f64>,
    pub probes: Vec<SpectrumProbe>,
}

impl TrajectorySpectrum {
    pub fn min_eig(&self) -> f64 {
        self.probes.iter().map(|p| p.min_eig).fold(f64::INFINITY, f64::min)
    }
    pub fn min_eig_at(&self, t: usize) -> Option<f64> {
        self.probes.iter().find(|p| p.t == t).map(|p| p.min_eig)
    }
}

fn in_window(w: &ProbeWindow, t: usize, last: usize) -> bool {
    match w {
        ProbeWindow::FinalFraction(f) => (t as f64) <= f * last as f64,
        ProbeWindow::Steps(s) => s.contains(&t),
    }
}

/// Samples each condition from shared initial noises and records Ritz
/// extremes of the conditional Hessian inside the probe window.
pub fn run_spectra<F: ScoreField>(field: &F, cfg: &SpectrumConfig, seed: u64) -> Result<Vec<TrajectorySpectrum>> {
    if cfg.conditions.is_empty() || cfg.seeds == 0 {
        return Err(Error::invalid("spectrum run needs conditions and seeds"));
    }
    let m = cfg.arnoldi_steps.min(field.dim());
    let last = field.schedule().last();
    let jobs: Vec<(usize, usize)> = (0..cfg.conditions.len()).flat_map(|c| (0..cfg.seeds).map(move |s| (c, s))).collect();
    jobs.into_par_iter()
        .map(|(c, s)| {
            let cond = cfg.conditions[c].as_str();
            let x_t = initial_noise(field.dim(), seed, s as u64);
            let traj = diffusion::sample(field, &x_t, Some(cond), &cfg.sampler)?;
            let mut probes = Vec::new();
            for p in &traj {
                let Target::Step(t) = p.at else { continue };
                if !in_window(&cfg.window, t, last) {
                    continue;
                }
                let spec = metrics::spectrum_at(field, &p.x, t, Some(cond), m, seed ^ s as u64)?;
                probes.push(SpectrumProbe { t, min_eig: spec.min_real(), max_eig: spec.max_real() });
            }
            let sample = traj.last().expect("trajectory is nonempty").x.clone();
            Ok(TrajectorySpectrum { condition: cond.to_string(), seed: s, sample, probes })
        })
        .collect()
}

/// Memorized vs non-memorized comparison of a per-trajectory statistic.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumSummary {
    pub tau: f64,
    pub memorized: Vec<f64>,
    pub non_memorized: Vec<f64>,
    pub test: MannWhitney,
}

/// Labels trajectories by their final sample and tests whether `stat` is
/// smaller on memorized ones.
pub fn summarize_spectra(
    trajs: &[TrajectorySpectrum],
    train: &[DVector<f64>],
    tau: Option<f64>,
    stat: impl Fn(&TrajectorySpectrum) -> f64,
) -> Result<SpectrumSummary> {
    let samples: Vec<DVector<f64>> = trajs.iter().map(|t| t.sample.clone()).collect();
    let (_, dists) = eval::label_memorized(&samples, train, 1.0)?;
    let tau = match tau {
        Some(t) => t,
        None => eval::valley_tau(&dists)?,
    };
    let (mut mem, mut non) = (vec![], vec![]);
    for (tr, d) in trajs.iter().zip(&dists) {
        if *d <= tau {
            mem.push(stat(tr));
        } else {
            non.push(stat(tr));
        }
    }
    if mem.is_empty() || non.is_empty() {
        return Err(Error::Data(format!("tau {tau} leaves one class empty ({} memorized, {} not)", mem.len(), non.len())));
    }
    let test = eval::mann_whitney(&mem, &non)?;
    Ok(SpectrumSummary { tau, memorized: mem, non_memorized: non, test })
}

// ---------------------------------------------------------------- detection

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectMetric {
    Wen,
    HspTaylor,
    HspExact,
}

impl DetectMetric {
    pub fn name(self) -> &'static str {
        match self {
            DetectMetric::Wen => "wen",
            DetectMetric::HspTaylor => "hsp-taylor",
            DetectMetric::HspExact => "hsp-exact",
        }
    }

    fn eval<F: ScoreField>(self, field: &F, x: &DVector<f64>, t: usize, cond: &str, delta: f64) -> Result<f64> {
        match self {
            DetectMetric::Wen => metrics::wen_metric(field, x, t, cond),
            DetectMetric::HspTaylor => metrics::hsp_taylor(field, x, t, cond, delta),
            DetectMetric::HspExact => metrics::hsp_exact(field, x, t, cond),
        }
    }
}

/// How per-generation values collapse to one score per condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregate {
    Mean,
    Min,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectConfig {
    pub metrics: Vec<DetectMetric>,
    pub generations: usize,
    /// Number of leading sampler steps averaged per generation.
    pub window: usize,
    pub sampler: SamplerConfig,
    pub delta: f64,
    pub aggregate: Aggregate,
    pub fpr: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            metrics: vec![DetectMetric::Wen, DetectMetric::HspTaylor],
            generations: 4,
            window: 1,
            sampler: SamplerConfig::default(),
            delta: 1e-3,
            aggregate: Aggregate::Mean,
            fpr: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult {
    pub metric: DetectMetric,
    pub generations: usize,
    pub window: usize,
    pub auc: f64,
    pub tpr_at_fpr: f64,
    /// AUC after a seeded shuffle of the labels.
    pub null_auc: f64,
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

/// Metric values along the first `window` steps of one generation.
fn window_values<F: ScoreField>(
    field: &F,
    x_t: &DVector<f64>,
    cond: &str,
    cfg: &DetectConfig,
) -> Result<Vec<Vec<f64>>> {
    let schedule = field.schedule();
    let grid = diffusion::timestep_grid(schedule.len(), cfg.sampler.inference_steps)?;
    let steps = cfg.window.clamp(1, grid.len());
    let mut x = x_t.clone();
    let mut out = vec![Vec::with_capacity(steps); cfg.metrics.len()];
    for i in 0..steps {
        let t = grid[i];
        for (k, m) in cfg.metrics.iter().enumerate() {
            out[k].push(m.eval(field, &x, t, cond, cfg.delta)?);
        }
        if i + 1 < steps {
            let eps = cfg_eps(field, &x, t, Some(cond), cfg.sampler.guidance)?;
            x = diffusion::ddim_step(&x, &eps, t, grid[i + 1], schedule)?;
        }
    }
    Ok(out)
}

/// Scores every condition with each metric and reports AUC against the
/// memorization labels.
pub fn run_detection<F: ScoreField>(
    field: &F,
    conditions: &[(String, bool)],
    cfg: &DetectConfig,
    seed: u64,
) -> Result<Vec<DetectionResult>> {
    if cfg.metrics.is_empty() || cfg.generations == 0 {
        return Err(Error::invalid("detection needs metrics and at least one generation"));
    }
    let per_cond: Vec<Vec<f64>> = conditions
        .par_iter()
        .enumerate()
        .map(|(ci, (cond, _))| {
            let mut acc: Vec<Vec<f64>> = vec![Vec::new(); cfg.metrics.len()];
            for g in 0..cfg.generations {
                let x_t = initial_noise(field.dim(), seed, (ci * cfg.generations + g) as u64);
                let vals = window_values(field, &x_t, cond, cfg)?;
                for (k, v) in vals.into_iter().enumerate() {
                    acc[k].push(v.iter().sum::<f64>() / v.len() as f64);
                }
            }
            Ok(acc
                .into_iter()
                .map(|v| match cfg.aggregate {
                    Aggregate::Mean => v.iter().sum::<f64>() / v.len() as f64,
                    Aggregate::Min => v.iter().copied().fold(f64::INFINITY, f64::min),
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let labels: Vec<bool> = conditions.iter().map(|c| c.1).collect();
    let mut shuffled = labels.clone();
    shuffled.shuffle(&mut random::stream(seed, u64::MAX));
    cfg.metrics
        .iter()
        .enumerate()
        .map(|(k, &metric)| {
            let scores: Vec<f64> = per_cond.iter().map(|v| v[k]).collect();
            Ok(DetectionResult {
                metric,
                generations: cfg.generations,
                window: cfg.window,
                auc: eval::auc(&scores, &labels)?,
                tpr_at_fpr: eval::tpr_at_fpr(&scores, &labels, cfg.fpr)?,
                null_auc: eval::auc(&scores, &shuffled)?,
                scores,
                labels: labels.clone(),
            })
        })
        .collect()
}

// ---------------------------------------------------------------- mitigation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MitigationConfig {
    pub sail: SailConfig,
    pub seeds: usize,
    pub control_seeds: usize,
    pub sampler: SamplerConfig,
    /// Memorization distance; calibrated from the baseline when absent.
    pub tau: Option<f64>,
    pub calibration_draws: usize,
    pub calibration_quantile: f64,
    pub enabled: bool,
}

impl Default for MitigationConfig {
    fn default() -> Self {
        Self {
            sail: SailConfig::default(),
            seeds: 100,
            control_seeds: 40,
            sampler: SamplerConfig::default(),
            tau: None,
            calibration_draws: 64,
            calibration_quantile: 0.25,
            enabled: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedOutcome {
    pub seed: usize,
    pub before: bool,
    pub after: bool,
    pub norm_ratio: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MitigationReport {
    pub threshold: f64,
    pub tau: f64,
    pub outcomes: Vec<SeedOutcome>,
    pub memorized_before: usize,
    pub memorized_after: usize,
    pub sign_test_p: f64,
    /// Share of runs with `||x_T||^2 / d` in `[0.8, 1.2]`.
    pub norm_in_band: f64,
    pub fidelity_before: (f64, f64),
    pub fidelity_after: (f64, f64),
    pub traces: Vec<SailTrace>,
}

impl MitigationReport {
    pub fn relative_reduction(&self) -> f64 {
        if self.memorized_before == 0 {
            return 0.0;
        }
        1.0 - self.memorized_after as f64 / self.memorized_before as f64
    }
}

fn optimize_all<F: ScoreField>(
    field: &F,
    inits: &[DVector<f64>],
    cond: &str,
    cfg: &MitigationConfig,
) -> Result<Vec<(DVector<f64>, Option<SailTrace>)>> {
    if !cfg.enabled {
        return Ok(inits.iter().map(|x| (x.clone(), None)).collect());
    }
    let mut sc = cfg.sail.clone();
    sc.threshold = sail::calibrate_threshold(field, cond, &sc, cfg.calibration_draws, cfg.calibration_quantile)?;
    Ok(sail::sail_optimize_batch(field, inits, cond, &sc)?.into_iter().map(|(x, t)| (x, Some(t))).collect())
}

/// Paired baseline vs optimized generations on the memorized condition,
/// plus a fidelity check on the control conditions.
pub fn run_mitigation(
    field: &GmmField,
    memorized: &str,
    controls: &[String],
    train: &[DVector<f64>],
    cfg: &MitigationConfig,
    seed: u64,
) -> Result<MitigationReport> {
    cfg.sail.validate()?;
    let d = field.dim();
    let inits: Vec<DVector<f64>> = (0..cfg.seeds).map(|i| initial_noise(d, seed, i as u64)).collect();
    let gen = |xs: &[DVector<f64>], cond: &str| -> Result<Vec<DVector<f64>>> {
        xs.par_iter().map(|x| diffusion::generate(field, x, Some(cond), &cfg.sampler)).collect()
    };
    let base = gen(&inits, memorized)?;
    let optimized = optimize_all(field, &inits, memorized, cfg)?;
    let opt_x: Vec<DVector<f64>> = optimized.iter().map(|o| o.0.clone()).collect();
    let after = gen(&opt_x, memorized)?;
    let (_, d_before) = eval::label_memorized(&base, train, 1.0)?;
    let tau = match cfg.tau {
        Some(t) => t,
        None => eval::valley_tau(&d_before)?,
    };
    let (mem_b, _) = eval::label_memorized(&base, train, tau)?;
    let (mem_a, _) = eval::label_memorized(&after, train, tau)?;
    let outcomes: Vec<SeedOutcome> = (0..cfg.seeds)
        .map(|i| SeedOutcome {
            seed: i,
            before: mem_b[i],
            after: mem_a[i],
            norm_ratio: opt_x[i].norm_squared() / d as f64,
            iterations: optimized[i].1.as_ref().map_or(0, |t| t.losses.len()),
        })
        .collect();
    let improved = outcomes.iter().filter(|o| o.before && !o.after).count() as u64;
    let worsened = outcomes.iter().filter(|o| !o.before && o.after).count() as u64;
    let norm_in_band = outcomes.iter().filter(|o| (0.8..=1.2).contains(&o.norm_ratio)).count() as f64 / cfg.seeds.max(1) as f64;

    let (mut fb, mut fa) = (vec![], vec![]);
    if !controls.is_empty() {
        for (ci, c) in controls.iter().enumerate() {
            let n = cfg.control_seeds.div_ceil(controls.len());
            let xs: Vec<DVector<f64>> =
                (0..n).map(|i| initial_noise(d, seed ^ 0x5eed, (ci * n + i) as u64)).collect();
            let truth = field.mixture().conditional_view(Some(c))?;
            for x in gen(&xs, c)? {
                fb.push(truth.log_density(&x)?);
            }
            let opt: Vec<DVector<f64>> = optimize_all(field, &xs, c, cfg)?.into_iter().map(|o| o.0).collect();
            for x in gen(&opt, c)? {
                fa.push(truth.log_density(&x)?);
            }
        }
    }
    let threshold = optimized.iter().find_map(|o| o.1.as_ref()).map_or(f64::NAN, |_| {
        sail::calibrate_threshold(field, memorized, &cfg.sail, cfg.calibration_draws, cfg.calibration_quantile)
            .unwrap_or(f64::NAN)
    });
    Ok(MitigationReport {
        threshold,
        tau,
        memorized_before: mem_b.iter().filter(|&&m| m).count(),
        memorized_after: mem_a.iter().filter(|&&m| m).count(),
        sign_test_p: eval::sign_test(improved, worsened),
        norm_in_band,
        fidelity_before: eval::mean_se(&fb),
        fidelity_after: eval::mean_se(&fa),
        traces: optimized.into_iter().filter_map(|o| o.1).collect(),
        outcomes,
    })
}

// ---------------------------------------------------------------- alignment

/// Trace and norm statistics at one probe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentProbe {
    pub t: usize,
    pub neg_trace: f64,
    pub score_norm_sq: f64,
    pub neg_trace_cubed: f64,
    pub hs_norm_sq: f64,
}

impl AlignmentProbe {
    pub const HEADER: [&'static str; 5] = ["t", "neg_trace_h", "score_norm_sq", "neg_trace_h3", "hs_norm_sq"];

    pub fn row(&self) -> Vec<String> {
        vec![
            self.t.to_string(),
            metrics::fmt_f64(self.neg_trace),
            metrics::fmt_f64(self.score_norm_sq),
            metrics::fmt_f64(self.neg_trace_cubed),
            metrics::fmt_f64(self.hs_norm_sq),
        ]
    }
}

/// Probe points `(t, x)` with `t` uniform and `x` from the exact marginal.
pub fn marginal_probes(oracle: &GmmField, cond: Option<&str>, n: usize, t_range: (usize, usize), seed: u64) -> Result<Vec<(usize, DVector<f64>)>> {
    let (lo, hi) = t_range;
    if lo > hi || hi >= oracle.schedule().len() {
        return Err(Error::invalid(format!("timestep range [{lo}, {hi}] outside the schedule")));
    }
    let mut rng = random::rng(seed);
    (0..n)
        .map(|_| {
            let t = rng.gen_range(lo..=hi);
            let x = oracle.marginal(t, cond)?.sample(&mut rng, 1).pop().expect("one draw");
            Ok((t, x))
        })
        .collect()
}

/// Dense statistics at each probe; the Jacobian is assembled column by column.
pub fn alignment_at<F: ScoreField>(field: &F, probes: &[(usize, DVector<f64>)], cond: Option<&str>) -> Result<Vec<AlignmentProbe>> {
    probes
        .par_iter()
        .map(|(t, x)| {
            let h = field.jacobian(x, *t, cond)?;
            let s = field.score(x, *t, cond)?;
            let h3 = &h * &h * &h;
            Ok(AlignmentProbe {
                t: *t,
                neg_trace: -h.trace(),
                score_norm_sq: s.norm_squared(),
                neg_trace_cubed: -h3.trace(),
                hs_norm_sq: (&h * &s).norm_squared(),
            })
        })
        .collect()
}

/// Pearson correlations `(-tr H vs ||s||^2, -tr H^3 vs ||H s||^2)`.
pub fn alignment_correlations(p: &[AlignmentProbe]) -> Result<(f64, f64)> {
    let a: Vec<f64> = p.iter().map(|q| q.neg_trace).collect();
    let b: Vec<f64> = p.iter().map(|q| q.score_norm_sq).collect();
    let c: Vec<f64> = p.iter().map(|q| q.neg_trace_cubed).collect();
    let d: Vec<f64> = p.iter().map(|q| q.hs_norm_sq).collect();
    Ok((eval::pearson(&a, &b)?, eval::pearson(&c, &d)?))
}

/// Correlation between a learned and the exact Hessian trace.
pub fn trace_correlation<F: ScoreField>(learned: &F, oracle: &GmmField, probes: &[(usize, DVector<f64>)], cond: Option<&str>) -> Result<f64> {
    let pairs = probes
        .par_iter()
        .map(|(t, x)| Ok((learned.jacobian(x, *t, cond)?.trace(), oracle.hessian_trace(x, *t, cond)?)))
        .collect::<Result<Vec<(f64, f64)>>>()?;
    let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    eval::pearson(&a, &b)
}

// ---------------------------------------------------------------- training

/// Distinct labels in first-appearance order.
pub fn dataset_labels(examples: &[Example]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for l in examples.iter().filter_map(|e| e.label.as_ref()) {
        if !out.contains(l) {
            out.push(l.clone());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetShape {
    pub hidden: Vec<usize>,
    pub time_features: usize,
    pub cond_features: usize,
    pub prediction: Prediction,
}

impl Default for NetShape {
    fn default() -> Self {
        Self { hidden: vec![64, 64], time_features: 16, cond_features: 8, prediction: Prediction::Noise }
    }
}

/// Initializes a network for `examples` and trains it.
pub fn train_network(
    examples: &[Example],
    shape: &NetShape,
    train: &TrainConfig,
    schedule: &NoiseSchedule,
) -> Result<(Mlp, TrainReport)> {
    let dim = examples.first().ok_or_else(|| Error::invalid("training set is empty"))?.x.len();
    let cfg = MlpConfig {
        dim,
        hidden: shape.hidden.clone(),
        time_features: shape.time_features,
        cond_features: shape.cond_features,
        labels: dataset_labels(examples),
        prediction: shape.prediction,
    };
    let mut net = Mlp::init(cfg, &mut random::stream(train.seed, 3))?;
    let report = scorenet::train(&mut net, examples, train, schedule)?;
    Ok((net, report))
}
