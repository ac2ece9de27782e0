//! Command-line front end. Every subcommand reads a JSON spec, validates it
//! fully before touching the output directory, and writes CSV, SVG and a
//! `manifest.json`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;

use crate::field::ScoreField;
use crate::harness::emit::{self, num, Manifest, Plot, PlotKind, Series};
use crate::harness::eval;
use crate::harness::experiments as exp;
use crate::harness::spec::{self, DetectSpec, LemmasSpec, SailSpec, SampleSpec, SpectrumSpec, TrainSpec};
use crate::metrics::LemmaReport;
use crate::sail::SailTrace;
use crate::scorenet;
use crate::{Error, Result};

const SCHEMA: &str = "\
SPEC FILES (JSON, unknown keys rejected; every key except `source`/`dataset` is optional)

  common:    seed (u64, default 0; --seed overrides), schedule {steps, beta_min, beta_max}
  source:    {\"toy\": {config, data_seed}} | {\"bank\": {config, data_seed}}
             | {\"spike\": {config, data_seed}} | {\"mixture\": {path, memorized: [label]}}
             | {\"checkpoint\": {path, dataset}}
  dataset:   {\"toy\": {config, data_seed}} | {\"mnist\": {images, labels, config}}

  verify-lemmas  lemmas {matrices, max_dim, samples, mixtures, mixture_samples}
  spectrum       source, spectrum {conditions, seeds, sampler, arnoldi_steps,
                 window: {\"final-fraction\": f} | {\"steps\": [t]}}, tau
  train          dataset, net {hidden, time_features, cond_features,
                 prediction: noise|velocity},
                 train {epochs, batch_size, learning_rate, lambda2, p_drop, seed,
                 hessian_columns, inverse_sigma4, detach_residual, cosine_decay, beta1, beta2}
  detect         source, detect {metrics: [wen|hsp-taylor|hsp-exact], generations,
                 window, sampler, delta, aggregate: mean|min, fpr}
  sail           source (mixture-backed), mitigation {sail {alpha, delta, eta, max_iters,
                 seed, inverse_delta_sq, normalize_probe, optimizer, gradient, objective,
                 fd_step}, seeds, control_seeds, sampler, tau, calibration_draws,
                 calibration_quantile, enabled}
  sample         source, condition, count, sampler {inference_steps, guidance, eta}

EXIT CODES
  0 success, 1 invalid arguments or spec (nothing written), 2 runtime failure
  (a .failed file in the output directory holds the error)";

#[derive(Debug, Parser)]
#[command(name = "sharpdiff", version, about = "Hessian sharpness analysis of diffusion score fields", after_long_help = SCHEMA)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON spec for the subcommand.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the spec seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; all cores when absent.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long, short)]
    verbose: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Monte Carlo checks of the score and sharpness identities.
    VerifyLemmas(Common),
    /// Hessian spectra along sampling trajectories.
    Spectrum(Common),
    /// Train a score network.
    Train(Common),
    /// Memorization detection at the first reverse step.
    Detect(Common),
    /// Sharpness-aware optimization of initial noise.
    Sail(Common),
    /// Draw samples from a score field.
    Sample(Common),
}

enum Plan {
    Lemmas(LemmasSpec),
    Spectrum(SpectrumSpec),
    Train(TrainSpec),
    Detect(DetectSpec),
    Sail(SailSpec),
    Sample(SampleSpec),
}

impl Plan {
    fn kind(&self) -> &'static str {
        match self {
            Plan::Lemmas(_) => "verify-lemmas",
            Plan::Spectrum(_) => "spectrum",
            Plan::Train(_) => "train",
            Plan::Detect(_) => "detect",
            Plan::Sail(_) => "sail",
            Plan::Sample(_) => "sample",
        }
    }
}

struct Validated {
    plan: Plan,
    spec_json: String,
    seed: u64,
    common: Common,
}

/// Runs the tool on `args` (program name first) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let v = match validate(cli) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let out = v.common.out.clone();
    match execute(v) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            let _ = fs::create_dir_all(&out);
            let _ = fs::write(out.join(".failed"), format!("{e}\n"));
            2
        }
    }
}

fn read_spec(path: Option<&Path>, required: bool) -> Result<String> {
    match path {
        Some(p) => {
            if !p.is_file() {
                return Err(Error::Config(format!("missing file: {}", p.display())));
            }
            fs::read_to_string(p).map_err(|e| Error::io(p, e))
        }
        None if required => Err(Error::Config("--config is required for this subcommand".into())),
        None => Ok("{}".into()),
    }
}

fn validate(cli: Cli) -> Result<Validated> {
    let (common, plan, text) = match cli.command {
        Command::VerifyLemmas(c) => {
            let text = read_spec(c.config.as_deref(), false)?;
            let s: LemmasSpec = spec::parse(&text)?;
            if s.lemmas.matrices == 0 || s.lemmas.samples < 2 || s.lemmas.max_dim < 2 {
                return Err(Error::Config("lemmas needs matrices > 0, samples >= 2, max_dim >= 2".into()));
            }
            (c, Plan::Lemmas(s), text)
        }
        Command::Spectrum(c) => {
            let text = read_spec(c.config.as_deref(), true)?;
            let s: SpectrumSpec = spec::parse(&text)?;
            s.source.check_files()?;
            s.schedule.build()?;
            if s.spectrum.seeds == 0 || s.spectrum.arnoldi_steps == 0 {
                return Err(Error::Config("spectrum needs seeds > 0 and arnoldi_steps > 0".into()));
            }
            (c, Plan::Spectrum(s), text)
        }
        Command::Train(c) => {
            let text = read_spec(c.config.as_deref(), true)?;
            let s: TrainSpec = spec::parse(&text)?;
            s.dataset.check_files()?;
            s.schedule.build()?;
            s.train.validate()?;
            (c, Plan::Train(s), text)
        }
        Command::Detect(c) => {
            let text = read_spec(c.config.as_deref(), true)?;
            let s: DetectSpec = spec::parse(&text)?;
            s.source.check_files()?;
            s.schedule.build()?;
            if s.detect.metrics.is_empty() || s.detect.generations == 0 {
                return Err(Error::Config("detect needs metrics and generations > 0".into()));
            }
            (c, Plan::Detect(s), text)
        }
        Command::Sail(c) => {
            let text = read_spec(c.config.as_deref(), true)?;
            let s: SailSpec = spec::parse(&text)?;
            s.source.check_files()?;
            s.schedule.build()?;
            if s.source.is_network() {
                return Err(Error::Config("sail needs a mixture-backed source for its fidelity proxy".into()));
            }
            s.mitigation.sail.validate()?;
            (c, Plan::Sail(s), text)
        }
        Command::Sample(c) => {
            let text = read_spec(c.config.as_deref(), true)?;
            let s: SampleSpec = spec::parse(&text)?;
            s.source.check_files()?;
            s.schedule.build()?;
            if s.count == 0 {
                return Err(Error::Config("count must be positive".into()));
            }
            (c, Plan::Sample(s), text)
        }
    };
    if common.jobs == Some(0) {
        return Err(Error::Config("--jobs must be positive".into()));
    }
    if common.out.exists() && !common.out.is_dir() {
        return Err(Error::Config(format!("{} exists and is not a directory", common.out.display())));
    }
    let seed = match &plan {
        Plan::Lemmas(s) => s.resolved_seed(common.seed),
        Plan::Spectrum(s) => s.resolved_seed(common.seed),
        Plan::Train(s) => s.resolved_seed(common.seed),
        Plan::Detect(s) => s.resolved_seed(common.seed),
        Plan::Sail(s) => s.resolved_seed(common.seed),
        Plan::Sample(s) => s.resolved_seed(common.seed),
    };
    Ok(Validated { plan, spec_json: text, seed, common })
}

fn execute(v: Validated) -> Result<()> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = v.common.jobs {
        builder = builder.num_threads(j);
    }
    let pool = builder.build().map_err(|e| Error::Config(e.to_string()))?;
    let out = v.common.out.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let _ = fs::remove_file(out.join(".failed"));
    let ctx = Ctx { out: &out, seed: v.seed, verbose: v.common.verbose };
    let files = pool.install(|| match &v.plan {
        Plan::Lemmas(s) => ctx.lemmas(s),
        Plan::Spectrum(s) => ctx.spectrum(s),
        Plan::Train(s) => ctx.train(s),
        Plan::Detect(s) => ctx.detect(s),
        Plan::Sail(s) => ctx.sail(s),
        Plan::Sample(s) => ctx.sample(s),
    })?;
    Manifest::new(v.plan.kind(), &v.spec_json, v.seed).write(&out, &files)
}

struct Ctx<'a> {
    out: &'a Path,
    seed: u64,
    verbose: bool,
}

fn series(name: &str, color: &str, points: Vec<(f64, f64)>) -> Series {
    Series { name: name.into(), color: color.into(), points }
}

const MEM_COLOR: &str = "#c0392b";
const NON_COLOR: &str = "#2471a3";

impl Ctx<'_> {
    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("[sharpdiff] {}", msg.as_ref());
        }
    }

    fn csv(&self, files: &mut Vec<String>, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        emit::write_csv(&self.out.join(name), header, rows)?;
        files.push(name.to_string());
        Ok(())
    }

    fn svg(&self, files: &mut Vec<String>, name: &str, plot: &Plot) -> Result<()> {
        emit::write_svg(&self.out.join(name), plot)?;
        files.push(name.to_string());
        Ok(())
    }

    fn lemmas(&self, s: &LemmasSpec) -> Result<Vec<String>> {
        self.log(format!("lemma suites, seed {}", self.seed));
        let reports = exp::run_lemmas(&s.lemmas, self.seed)?;
        let mut files = vec![];
        let rows: Vec<Vec<String>> = reports.iter().map(LemmaReport::row).collect();
        self.csv(&mut files, "lemma_report.csv", &LemmaReport::HEADER, &rows)?;
        let mut kinds: Vec<&str> = reports.iter().map(|r| r.lemma.as_str()).collect();
        kinds.dedup();
        let palette = ["#c0392b", "#2471a3", "#27ae60", "#8e44ad", "#d35400", "#7f8c8d"];
        let plot = Plot {
            title: "Monte Carlo z-scores".into(),
            x_label: "check".into(),
            y_label: "z".into(),
            kind: PlotKind::Scatter,
            series: kinds
                .iter()
                .enumerate()
                .map(|(k, name)| {
                    let pts = reports
                        .iter()
                        .enumerate()
                        .filter(|(_, r)| r.lemma == *name)
                        .map(|(i, r)| (i as f64, r.z_score()))
                        .collect();
                    series(name, palette[k % palette.len()], pts)
                })
                .collect(),
        };
        self.svg(&mut files, "lemma_z.svg", &plot)?;
        let failed = reports.iter().filter(|r| !r.passes()).count();
        self.log(format!("{} checks, {failed} outside 4 SE", reports.len()));
        Ok(files)
    }

    fn spectrum(&self, s: &SpectrumSpec) -> Result<Vec<String>> {
        let schedule = s.schedule.build()?;
        let src = s.source.load(&schedule)?;
        let mut cfg = s.spectrum.clone();
        if cfg.conditions.is_empty() {
            cfg.conditions = src.conditions.iter().map(|c| c.0.clone()).collect();
        }
        self.log(format!("{} trajectories per condition over {:?}", cfg.seeds, cfg.conditions));
        let trajs = exp::run_spectra(&src.field, &cfg, self.seed)?;
        let samples: Vec<DVector<f64>> = trajs.iter().map(|t| t.sample.clone()).collect();
        let (_, dists) = eval::label_memorized(&samples, &src.reference, 1.0)?;
        let tau = match s.tau {
            Some(t) => t,
            None => eval::valley_tau(&dists)?,
        };
        let mut rows = vec![];
        for (tr, d) in trajs.iter().zip(&dists) {
            for p in &tr.probes {
                rows.push(vec![
                    tr.condition.clone(),
                    tr.seed.to_string(),
                    p.t.to_string(),
                    num(p.min_eig),
                    num(p.max_eig),
                    num(*d),
                    (*d <= tau).to_string(),
                ]);
            }
        }
        let mut files = vec![];
        let header = ["condition", "seed", "t", "min_eig", "max_eig", "nn_distance", "memorized"];
        self.csv(&mut files, "spectrum.csv", &header, &rows)?;
        let (mut mem, mut non) = (vec![], vec![]);
        for (tr, d) in trajs.iter().zip(&dists) {
            let p = (d.max(f64::MIN_POSITIVE).log10(), tr.min_eig());
            if *d <= tau {
                mem.push(p);
            } else {
                non.push(p);
            }
        }
        let test = if mem.is_empty() || non.is_empty() {
            None
        } else {
            let a: Vec<f64> = mem.iter().map(|p| p.1).collect();
            let b: Vec<f64> = non.iter().map(|p| p.1).collect();
            Some(eval::mann_whitney(&a, &b)?)
        };
        let summary = vec![vec![
            num(tau),
            mem.len().to_string(),
            non.len().to_string(),
            num(test.map_or(f64::NAN, |t| t.u)),
            num(test.map_or(f64::NAN, |t| t.z)),
            num(test.map_or(f64::NAN, |t| t.p_less)),
        ]];
        self.csv(&mut files, "spectrum_summary.csv", &["tau", "memorized", "non_memorized", "u", "z", "p_less"], &summary)?;
        let plot = Plot {
            title: "Smallest Hessian eigenvalue per trajectory".into(),
            x_label: "log10 nearest-reference distance".into(),
            y_label: "min eigenvalue".into(),
            kind: PlotKind::Scatter,
            series: vec![series("memorized", MEM_COLOR, mem), series("non-memorized", NON_COLOR, non)]
                .into_iter()
                .filter(|s| !s.points.is_empty())
                .collect(),
        };
        self.svg(&mut files, "spectrum.svg", &plot)?;
        Ok(files)
    }

    fn train(&self, s: &TrainSpec) -> Result<Vec<String>> {
        let schedule = s.schedule.build()?;
        let data = s.dataset.load()?;
        let mut cfg = s.train.clone();
        cfg.seed = self.seed;
        self.log(format!("training on {} examples for {} epochs", data.examples.len(), cfg.epochs));
        let (net, report) = exp::train_network(&data.examples, &s.net, &cfg, &schedule)?;
        let mut files = vec![];
        let ckpt = "model.ckpt";
        scorenet::save_checkpoint(&self.out.join(ckpt), &net, self.seed, &schedule.digest())?;
        files.push(ckpt.into());
        let rows = vec![vec![num(report.initial_loss), num(report.final_loss), net.param_count().to_string()]];
        self.csv(&mut files, "train_report.csv", &["initial_loss", "final_loss", "parameters"], &rows)?;
        if !report.epoch_losses.is_empty() {
            let rows: Vec<Vec<String>> =
                report.epoch_losses.iter().enumerate().map(|(i, l)| vec![i.to_string(), num(*l)]).collect();
            self.csv(&mut files, "loss.csv", &["epoch", "loss"], &rows)?;
            let pts = report.epoch_losses.iter().enumerate().map(|(i, l)| (i as f64, *l)).collect();
            let plot = Plot {
                title: "Training loss".into(),
                x_label: "epoch".into(),
                y_label: "loss".into(),
                kind: PlotKind::Line,
                series: vec![series("combined", NON_COLOR, pts)],
            };
            self.svg(&mut files, "loss.svg", &plot)?;
        }
        Ok(files)
    }

    fn detect(&self, s: &DetectSpec) -> Result<Vec<String>> {
        let schedule = s.schedule.build()?;
        let src = s.source.load(&schedule)?;
        self.log(format!("{} conditions, {} generations each", src.conditions.len(), s.detect.generations));
        let results = exp::run_detection(&src.field, &src.conditions, &s.detect, self.seed)?;
        let mut files = vec![];
        let rows: Vec<Vec<String>> = results
            .iter()
            .map(|r| {
                vec![
                    r.metric.name().into(),
                    r.generations.to_string(),
                    r.window.to_string(),
                    num(r.auc),
                    num(r.tpr_at_fpr),
                    num(r.null_auc),
                ]
            })
            .collect();
        self.csv(&mut files, "detection.csv", &["metric", "generations", "window", "auc", "tpr_at_fpr", "null_auc"], &rows)?;
        let mut rows = vec![];
        for r in &results {
            for ((c, _), (score, label)) in src.conditions.iter().zip(r.scores.iter().zip(&r.labels)) {
                rows.push(vec![c.clone(), label.to_string(), r.metric.name().into(), num(*score)]);
            }
        }
        self.csv(&mut files, "scores.csv", &["condition", "memorized", "metric", "score"], &rows)?;
        for r in &results {
            let pick = |want: bool| -> Vec<(f64, f64)> {
                r.scores
                    .iter()
                    .zip(&r.labels)
                    .enumerate()
                    .filter(|(_, (_, l))| **l == want)
                    .map(|(i, (s, _))| (i as f64, s.max(f64::MIN_POSITIVE).log10()))
                    .collect()
            };
            let plot = Plot {
                title: format!("{} (AUC {:.3})", r.metric.name(), r.auc),
                x_label: "condition".into(),
                y_label: "log10 score".into(),
                kind: PlotKind::Scatter,
                series: vec![series("memorized", MEM_COLOR, pick(true)), series("non-memorized", NON_COLOR, pick(false))],
            };
            self.svg(&mut files, &format!("detection_{}.svg", r.metric.name()), &plot)?;
        }
        Ok(files)
    }

    fn sail(&self, s: &SailSpec) -> Result<Vec<String>> {
        let schedule = s.schedule.build()?;
        let src = s.source.load(&schedule)?;
        let gmm = src.gmm().ok_or_else(|| Error::Config("sail needs a mixture-backed source".into()))?;
        let memorized = src.memorized();
        let target = memorized.first().ok_or_else(|| Error::Data("source has no memorized condition".into()))?;
        let controls = src.non_memorized();
        self.log(format!("optimizing {} seeds on {target:?}", s.mitigation.seeds));
        let r = exp::run_mitigation(gmm, target, &controls, &src.reference, &s.mitigation, self.seed)?;
        let mut files = vec![];
        let kv = |k: &str, v: f64| vec![k.to_string(), num(v)];
        let rows = vec![
            kv("threshold", r.threshold),
            kv("tau", r.tau),
            kv("memorized_before", r.memorized_before as f64),
            kv("memorized_after", r.memorized_after as f64),
            kv("relative_reduction", r.relative_reduction()),
            kv("sign_test_p", r.sign_test_p),
            kv("norm_in_band", r.norm_in_band),
            kv("fidelity_before", r.fidelity_before.0),
            kv("fidelity_before_se", r.fidelity_before.1),
            kv("fidelity_after", r.fidelity_after.0),
            kv("fidelity_after_se", r.fidelity_after.1),
        ];
        self.csv(&mut files, "sail_report.csv", &["quantity", "value"], &rows)?;
        let rows: Vec<Vec<String>> = r
            .outcomes
            .iter()
            .map(|o| vec![o.seed.to_string(), o.before.to_string(), o.after.to_string(), num(o.norm_ratio), o.iterations.to_string()])
            .collect();
        self.csv(&mut files, "sail_seeds.csv", &["seed", "memorized_before", "memorized_after", "norm_ratio", "iterations"], &rows)?;
        if let Some(first) = r.traces.first() {
            self.csv(&mut files, "sail_trace.csv", &SailTrace::HEADER, &first.rows())?;
            let palette = ["#c0392b", "#2471a3", "#27ae60", "#8e44ad", "#d35400"];
            let plot = Plot {
                title: "SAIL loss".into(),
                x_label: "iteration".into(),
                y_label: "loss".into(),
                kind: PlotKind::Line,
                series: r
                    .traces
                    .iter()
                    .take(5)
                    .enumerate()
                    .map(|(k, t)| {
                        let pts = t.losses.iter().enumerate().map(|(i, l)| (i as f64, l.total)).collect();
                        series(&format!("seed {k}"), palette[k], pts)
                    })
                    .collect(),
            };
            self.svg(&mut files, "sail_loss.svg", &plot)?;
        }
        Ok(files)
    }

    fn sample(&self, s: &SampleSpec) -> Result<Vec<String>> {
        let schedule = s.schedule.build()?;
        let src = s.source.load(&schedule)?;
        let d = src.field.dim();
        self.log(format!("{} samples in dimension {d}", s.count));
        let xs = exp::generate_samples(&src.field, s.condition.as_deref(), s.count, &s.sampler, self.seed)?;
        let names: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
        let mut header: Vec<&str> = vec!["index"];
        header.extend(names.iter().map(String::as_str));
        let rows: Vec<Vec<String>> = xs
            .iter()
            .enumerate()
            .map(|(i, x)| std::iter::once(i.to_string()).chain(x.iter().map(|v| num(*v))).collect())
            .collect();
        let mut files = vec![];
        self.csv(&mut files, "samples.csv", &header, &rows)?;
        let pts = xs.iter().map(|x| (x[0], if d > 1 { x[1] } else { 0.0 })).collect();
        let plot = Plot {
            title: format!("Samples ({})", s.condition.as_deref().unwrap_or("unconditional")),
            x_label: "x0".into(),
            y_label: if d > 1 { "x1".into() } else { "".into() },
            kind: PlotKind::Scatter,
            series: vec![series("samples", NON_COLOR, pts)],
        };
        self.svg(&mut files, "samples.svg", &plot)?;
        Ok(files)
    }
}
