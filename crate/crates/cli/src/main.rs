//! `mbscore`: simulate, train, sample and verify Malliavin–Bismut scores.

mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use malliavin_score::eval::{assemble_report, DatasetKind, MetricConfig};
use malliavin_score::field::ScoreField;
use malliavin_score::io;
use malliavin_score::kernel::{conditional_score, Bandwidth, ConditionalEstimator};
use malliavin_score::linear_score::{
    fokker_planck_score_oracle, score_linear, ExactGaussianMean, LinearScoreField, MomentSource, PointMassMean, PosteriorMean,
};
use malliavin_score::mlp::{build_training_set, Checkpoint, MlpPosteriorMean, Trainer};
use malliavin_score::nonlinear::skorokhod_ensemble;
use malliavin_score::sampler::{reverse_sample, NonlinearMcField, PriorKind, ReverseRun};
use malliavin_score::variation::{linear_track, malliavin_matrix, propagate_first_variation, MalliavinMatrix, Regularization};
use malliavin_score::verify::{reference_schedules, relative_error, run_suite, Suite, VerifyConfig, EQUIVALENCE_TIMES};
use malliavin_score::{simulate_forward, InitialLaw, Schedule, SdeSpec, TimeGrid};

use config::{seeds, DataConfig, ExperimentConfig, FieldKind, Manifest};

const EXIT_USAGE: u8 = 1;
const EXIT_VERIFY: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "mbscore", version, about = "Malliavin-Bismut score functions for SDE marginals")]
struct Cli {
    /// Experiment configuration (JSON); built-in VP/Gmm8 preset if omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed; all stage seeds derive from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: config `output_dir`, else `mbscore-out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; 1 gives bitwise-reproducible output.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Gmm8 component std 1.0 instead of 0.1.
    #[arg(long, global = true)]
    paper_variant: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScheduleArg {
    Ve,
    Vp,
    Subvp,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SuiteArg {
    LinearEquivalence,
    Covering,
    Lemma35,
    Singularity,
    Nonlinear,
    All,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate forward paths; write paths.csv, gamma.csv and a manifest.
    Simulate,
    /// Train the conditional-expectation network; write a checkpoint and loss curve.
    Train {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Total epochs (overrides the configuration).
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Reverse-time sampling; write samples.csv and a metrics report.
    Sample {
        #[arg(long, value_enum)]
        field: Option<FieldKind>,
        /// Replace the configured schedule by a preset of this family.
        #[arg(long, value_enum)]
        schedule: Option<ScheduleArg>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
        /// Checkpoint for `--field mlp` (default: <out>/model.bin).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also write trajectories.csv with the full reverse paths.
        #[arg(long)]
        trajectories: bool,
    },
    /// Compare the linear Malliavin-Bismut score with the Fokker-Planck score.
    ScoreCheck {
        /// Point initial condition.
        #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
        x0: f64,
        /// Use quadrature moments on this many steps instead of closed forms.
        #[arg(long)]
        quadrature_steps: Option<usize>,
        #[arg(long, value_enum)]
        schedule: Option<ScheduleArg>,
    },
    /// Monte Carlo score of the cubic SDE dX = -X^3 dt + sigma dB from X_0 = 0.
    NonlinearScore {
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long, default_value_t = 1.0)]
        horizon: f64,
        #[arg(long, default_value_t = 200_000)]
        paths: usize,
        #[arg(long, default_value_t = 1e-3)]
        dt: f64,
        /// `silverman`, `silverman:<scale>` or a fixed width.
        #[arg(long, default_value = "silverman")]
        bandwidth: String,
        /// Query points: `lo:hi:step` or a comma-separated list.
        #[arg(long, default_value = "-1.5:1.5:0.25", allow_hyphen_values = true)]
        grid: String,
        /// Also write the per-path Skorokhod samples.
        #[arg(long)]
        dump_samples: bool,
    },
    /// Run a bundled verification suite; exit code 2 on any failure.
    Verify {
        #[arg(value_enum)]
        suite: SuiteArg,
    },
    /// Metrics report for a samples CSV against held-out truth.
    Metrics {
        #[arg(long)]
        samples: PathBuf,
        /// Truth CSV (default: fresh draws from the configured data law).
        #[arg(long)]
        truth: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            let numeric = e
                .chain()
                .any(|c| matches!(c.downcast_ref::<malliavin_score::Error>(), Some(malliavin_score::Error::Numeric(_))));
            ExitCode::from(if numeric { EXIT_NUMERIC } else { EXIT_USAGE })
        }
    }
}

struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
}

impl Ctx {
    fn create(&self, name: &str) -> Result<BufWriter<File>> {
        let p = self.out.join(name);
        Ok(BufWriter::new(File::create(&p).with_context(|| format!("creating {}", p.display()))?))
    }
}

fn run(cli: Cli) -> Result<u8> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.paper_variant {
        if let DataConfig::Dataset { dataset: DatasetKind::Gmm8 { std }, .. } = &mut cfg.data {
            *std = 1.0;
            cfg.metrics.gmm8_std = Some(1.0);
        }
    }
    let out = cli.out.clone().or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("mbscore-out"));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let ctx = Ctx { cfg, out };
    match cli.command {
        Command::Simulate => simulate(&ctx),
        Command::Train { resume, epochs } => train(&ctx, resume.as_deref(), epochs),
        Command::Sample { field, schedule, steps, n, checkpoint, trajectories } => {
            let mut cfg = ctx.cfg.clone();
            if let Some(f) = field {
                cfg.sampler.field = f;
            }
            if let Some(s) = schedule {
                cfg.sde.schedule = preset_schedule(s, cfg.grid.t_end)?;
            }
            if let Some(s) = steps {
                cfg.sampler.steps = s;
            }
            if let Some(n) = n {
                cfg.sampler.n_samples = n;
            }
            cfg.sampler.keep_trajectories |= trajectories;
            cfg.validate()?;
            sample(&Ctx { cfg, out: ctx.out.clone() }, checkpoint)
        }
        Command::ScoreCheck { x0, quadrature_steps, schedule } => score_check(&ctx, x0, quadrature_steps, schedule),
        Command::NonlinearScore { sigma, horizon, paths, dt, bandwidth, grid, dump_samples } => {
            nonlinear_score(&ctx, sigma, horizon, paths, dt, &bandwidth, &grid, dump_samples)
        }
        Command::Verify { suite } => verify(&ctx, suite),
        Command::Metrics { samples, truth } => metrics(&ctx, &samples, truth.as_deref()),
    }
}

fn preset_schedule(s: ScheduleArg, horizon: f64) -> Result<Schedule> {
    Ok(match s {
        ScheduleArg::Ve => Schedule::ve(0.01, 50.0, horizon)?,
        ScheduleArg::Vp => Schedule::vp(0.1, 20.0, horizon)?,
        ScheduleArg::Subvp => Schedule::sub_vp(0.1, 20.0, horizon)?,
    })
}

fn schedule_name(s: ScheduleArg) -> &'static str {
    match s {
        ScheduleArg::Ve => "ve",
        ScheduleArg::Vp => "vp",
        ScheduleArg::Subvp => "subvp",
    }
}

fn finish(ctx: &Ctx, mut manifest: Manifest, outputs: &[&str]) -> Result<()> {
    manifest.outputs = outputs.iter().map(|s| s.to_string()).collect();
    std::fs::write(ctx.out.join("config.json"), ctx.cfg.to_json()?)?;
    manifest.write(&ctx.out)
}

/// Ensemble-average Malliavin matrix; the shared track for linear drift.
fn mean_gamma(spec: &SdeSpec, grid: &TimeGrid, ens: &malliavin_score::PathEnsemble) -> Result<MalliavinMatrix> {
    if spec.is_linear() {
        return Ok(malliavin_matrix(spec, grid, &linear_track(spec, grid)?));
    }
    let mut acc: Option<MalliavinMatrix> = None;
    let mut n = 0usize;
    for i in ens.valid_paths() {
        let g = malliavin_matrix(spec, grid, &propagate_first_variation(spec, grid, ens.path(i)));
        match &mut acc {
            None => acc = Some(g),
            Some(a) => {
                a.gamma.iter_mut().zip(&g.gamma).for_each(|(x, y)| *x += y);
                a.integral.iter_mut().zip(&g.integral).for_each(|(x, y)| *x += y);
            }
        }
        n += 1;
    }
    let mut a = acc.ok_or_else(|| malliavin_score::Error::Numeric("every path diverged".into()))?;
    a.gamma.iter_mut().chain(a.integral.iter_mut()).for_each(|x| *x /= n as f64);
    Ok(a)
}

fn simulate(ctx: &Ctx) -> Result<u8> {
    let cfg = &ctx.cfg;
    let manifest = Manifest::new("simulate", cfg)?;
    let (spec, grid) = (cfg.spec()?, cfg.grid()?);
    let ens = simulate_forward(&spec, &grid, &cfg.initial_law()?, cfg.simulate.n_paths, cfg.seed_for(seeds::SIMULATE))?;
    info!("simulated {} paths, {} diverged", ens.n_paths, ens.n_diverged());
    io::write_paths_csv(&ens, cfg.simulate.dump_paths, ctx.create("paths.csv")?)?;
    let gamma = mean_gamma(&spec, &grid, &ens)?;
    io::write_gamma_csv(&grid, &gamma, ctx.create("gamma.csv")?)?;
    let summary = serde_json::json!({
        "n_paths": ens.n_paths,
        "n_diverged": ens.n_diverged(),
        "gamma_terminal": gamma.at(grid.n_steps),
    });
    std::fs::write(ctx.out.join("simulate_summary.json"), serde_json::to_string_pretty(&summary)?)?;
    finish(ctx, manifest, &["paths.csv", "gamma.csv", "simulate_summary.json"])?;
    Ok(0)
}

fn train(ctx: &Ctx, resume: Option<&Path>, epochs: Option<usize>) -> Result<u8> {
    let cfg = &ctx.cfg;
    let manifest = Manifest::new("train", cfg)?;
    let ens = simulate_forward(&cfg.spec()?, &cfg.grid()?, &cfg.initial_law()?, cfg.simulate.n_paths, cfg.seed_for(seeds::SIMULATE))?;
    let data = build_training_set(&ens)?;
    info!("{} training examples from {} paths", data.n_examples(), data.n_paths);
    let mut trainer = match resume {
        Some(p) => {
            let t = Trainer::resume(Checkpoint::load(p)?)?;
            info!("resuming from {} after {} epochs", p.display(), t.epochs_done());
            t
        }
        None => {
            let mut tc = cfg.training.clone();
            tc.seed = cfg.seed_for(seeds::TRAIN);
            Trainer::new(&data, tc)?
        }
    };
    let target = epochs.unwrap_or(cfg.training.epochs);
    trainer.config.epochs = target;
    while trainer.epochs_done() < target {
        let next = (trainer.epochs_done() + 10).min(target);
        trainer.run_until(&data, next)?;
        let last = trainer.curve.last().expect("epoch recorded");
        info!("epoch {next}/{target}: train {:.6} validation {:.6}", last.train_loss, last.validation_loss);
    }
    trainer.checkpoint().save(&ctx.out.join("model.bin"))?;
    let mut w = ctx.create("loss_curve.csv")?;
    writeln!(w, "epoch,train_loss,validation_loss,learning_rate")?;
    for r in &trainer.curve {
        writeln!(w, "{},{:.16e},{:.16e},{:.16e}", r.epoch, r.train_loss, r.validation_loss, r.learning_rate)?;
    }
    w.flush()?;
    finish(ctx, manifest, &["model.bin", "model.json", "loss_curve.csv"])?;
    Ok(0)
}

fn moments(spec: &SdeSpec, grid: &TimeGrid) -> Result<MomentSource> {
    Ok(if spec.schedule().is_isotropic() { MomentSource::closed_form(spec)? } else { MomentSource::quadrature(spec, grid)? })
}

fn sample(ctx: &Ctx, checkpoint: Option<PathBuf>) -> Result<u8> {
    let cfg = &ctx.cfg;
    let manifest = Manifest::new("sample", cfg)?;
    let (spec, grid) = (cfg.spec()?, cfg.grid()?);
    let mut prior = PriorKind::for_schedule(spec.schedule());
    let field: Box<dyn ScoreField> = match cfg.sampler.field {
        FieldKind::Oracle => {
            let prior = cfg.data_prior()?.ok_or_else(|| anyhow!("the oracle field needs Gaussian-mixture or point data"))?;
            let mean: Arc<dyn PosteriorMean> = Arc::new(ExactGaussianMean::new(prior));
            Box::new(LinearScoreField::new(&spec, moments(&spec, &grid)?, mean)?.with_t_floor(cfg.sampler.t_floor))
        }
        FieldKind::Mlp => {
            let path = checkpoint.unwrap_or_else(|| ctx.out.join("model.bin"));
            if !path.exists() {
                bail!("missing checkpoint {} (run `mbscore train` or pass --checkpoint)", path.display());
            }
            let ckpt = Checkpoint::load(&path)?;
            let mean: Arc<dyn PosteriorMean> = Arc::new(MlpPosteriorMean::new(ckpt.model));
            Box::new(LinearScoreField::new(&spec, moments(&spec, &grid)?, mean)?.with_t_floor(cfg.sampler.t_floor))
        }
        FieldKind::NonlinearMc => {
            let nl = &cfg.sampler.nonlinear;
            let h = grid.t_end;
            let horizons: Vec<f64> = (1..=nl.horizons).map(|i| h * i as f64 / nl.horizons as f64).collect();
            let f = NonlinearMcField::build(
                &spec,
                &cfg.initial_law()?,
                &horizons,
                nl.dt,
                nl.paths,
                cfg.seed_for(seeds::NONLINEAR),
                nl.estimator.clone(),
            )?;
            // The longest-horizon ensemble already holds draws of p_T.
            let last = f.sets.last().expect("at least one horizon");
            prior = PriorKind::Empirical { dim: last.dim, points: last.valid().flat_map(|s| s.x_t.iter().copied()).collect() };
            Box::new(f)
        }
    };
    let mut run = ReverseRun::new(spec.clone(), grid.t_end, cfg.sampler.steps, cfg.seed_for(seeds::SAMPLE));
    run.prior = prior;
    run.block = cfg.sampler.block;
    run.keep_trajectories = cfg.sampler.keep_trajectories;
    let n = cfg.sampler.n_samples;
    let out = reverse_sample(&run, field.as_ref(), n)?;
    let m = out.dim;
    io::write_points_csv(&out.samples, m, ctx.create("samples.csv")?)?;
    let mut outputs = vec!["samples.csv", "report.csv", "report.json"];
    if let Some(traj) = &out.trajectories {
        let times: Vec<f64> = std::iter::once(run.horizon).chain((1..=run.steps).map(|s| run.time(s) - run.horizon / run.steps as f64)).collect();
        io::write_trajectories_csv(traj, m, &times, ctx.create("trajectories.csv")?)?;
        outputs.push("trajectories.csv");
    }
    let report = report_for(cfg, &out.samples, &cfg.truth(n)?, m, &run.prior)?;
    std::fs::write(ctx.out.join("report.csv"), report.to_csv())?;
    std::fs::write(ctx.out.join("report.json"), report.to_json(&serde_json::to_value(cfg)?)?)?;
    info!(
        "mmd {:.4} (prior baseline {:.4}), sliced W1 {:.4}, modes {:?}",
        report.mmd, report.mmd_prior_baseline, report.sliced_wasserstein, report.mode_coverage
    );
    finish(ctx, manifest, &outputs)?;
    Ok(0)
}

fn report_for(
    cfg: &ExperimentConfig,
    samples: &[f64],
    truth: &[f64],
    m: usize,
    prior: &PriorKind,
) -> Result<malliavin_score::eval::MetricsReport> {
    let mut mc: MetricConfig = cfg.metrics.clone();
    mc.seed = cfg.seed_for(seeds::METRICS);
    if !matches!(cfg.data, DataConfig::Dataset { dataset: DatasetKind::Gmm8 { .. }, .. }) {
        mc.gmm8_std = None;
    }
    Ok(assemble_report(samples, truth, m, prior, &mc)?)
}

fn score_check(ctx: &Ctx, x0: f64, quadrature_steps: Option<usize>, only: Option<ScheduleArg>) -> Result<u8> {
    let manifest = Manifest::new("score-check", &ctx.cfg)?;
    let (limit, reg) = match quadrature_steps {
        Some(_) => (1e-2, Regularization::Fixed { epsilon: 0.0 }),
        None => (1e-6, Regularization::Default),
    };
    let mut w = ctx.create("score_check.csv")?;
    writeln!(w, "schedule,t,y,score_mb,score_fp,abs_err,rel_err")?;
    let mut worst = 0.0f64;
    for (name, sch) in reference_schedules()? {
        if only.is_some_and(|s| schedule_name(s) != name) {
            continue;
        }
        let spec = SdeSpec::new(sch.clone(), 1)?;
        let source = match quadrature_steps {
            Some(n) => MomentSource::quadrature(&spec, &TimeGrid::new(0.0, sch.horizon().unwrap_or(1.0), n)?)?,
            None => MomentSource::closed_form(&spec)?,
        };
        let field = LinearScoreField::new(&spec, source, Arc::new(PointMassMean { x0: vec![x0] }))?.with_regularization(reg);
        for &t in &EQUIVALENCE_TIMES {
            for y in malliavin_score::verify::equivalence_states() {
                let mb = score_linear(&field, t, &[y])?[0];
                let fp = fokker_planck_score_oracle(&sch, t, &[y], &[x0])?[0];
                let rel = relative_error(mb, fp);
                worst = worst.max(rel);
                writeln!(w, "{name},{t},{y},{mb:.16e},{fp:.16e},{:.16e},{rel:.16e}", (mb - fp).abs())?;
            }
        }
    }
    w.flush()?;
    finish(ctx, manifest, &["score_check.csv"])?;
    println!("max relative error {worst:.3e} (limit {limit:e})");
    Ok(if worst <= limit { 0 } else { EXIT_VERIFY })
}

fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() == 3 {
        let v: Vec<f64> = parts.iter().map(|p| p.trim().parse::<f64>()).collect::<std::result::Result<_, _>>()?;
        let (lo, hi, step) = (v[0], v[1], v[2]);
        if !(step > 0.0) || hi < lo {
            bail!("grid needs lo <= hi and a positive step");
        }
        let n = ((hi - lo) / step + 1e-9).floor() as usize;
        return Ok((0..=n).map(|i| lo + step * i as f64).collect());
    }
    s.split(',').map(|p| p.trim().parse::<f64>().map_err(|e| anyhow!("bad grid value {p:?}: {e}"))).collect()
}

fn parse_bandwidth(s: &str) -> Result<Bandwidth> {
    if s == "silverman" {
        return Ok(Bandwidth::Silverman { scale: 1.0 });
    }
    if let Some(scale) = s.strip_prefix("silverman:") {
        return Ok(Bandwidth::Silverman { scale: scale.parse()? });
    }
    let h: f64 = s.parse().map_err(|_| anyhow!("bandwidth must be `silverman`, `silverman:<scale>` or a number"))?;
    Ok(Bandwidth::Fixed { h: vec![h] })
}

#[allow(clippy::too_many_arguments)]
fn nonlinear_score(ctx: &Ctx, sigma: f64, horizon: f64, paths: usize, dt: f64, bandwidth: &str, grid: &str, dump: bool) -> Result<u8> {
    let manifest = Manifest::new("nonlinear-score", &ctx.cfg)?;
    let spec = SdeSpec::cubic(sigma)?;
    let tgrid = TimeGrid::with_step(horizon, dt)?;
    let queries: Vec<Vec<f64>> = parse_grid(grid)?.into_iter().map(|y| vec![y]).collect();
    let seed = ctx.cfg.seed_for(seeds::NONLINEAR);
    let set = skorokhod_ensemble(&spec, &tgrid, &InitialLaw::point(vec![0.0]), paths, seed, Regularization::Default)?;
    info!("{} paths: {} diverged, {} flagged", set.n_paths, set.n_diverged, set.n_flagged);
    let est = ConditionalEstimator { bandwidth: parse_bandwidth(bandwidth)?, seed, ..Default::default() };
    let res = conditional_score(&set, &queries, &est)?;
    let mut w = ctx.create("nonlinear_score.csv")?;
    writeln!(w, "y,score,std_error,ess,low_confidence,stationary_score")?;
    for r in &res {
        let y = r.y[0];
        writeln!(w, "{y},{:.16e},{:.16e},{:.6e},{},{:.16e}", r.value[0], r.std_error[0], r.ess, r.low_confidence, -2.0 * y.powi(3) / (sigma * sigma))?;
    }
    w.flush()?;
    let mut outputs = vec!["nonlinear_score.csv"];
    if dump {
        set.write_csv(ctx.create("skorokhod_samples.csv")?)?;
        outputs.push("skorokhod_samples.csv");
    }
    finish(ctx, manifest, &outputs)?;
    Ok(0)
}

fn verify(ctx: &Ctx, which: SuiteArg) -> Result<u8> {
    let manifest = Manifest::new("verify", &ctx.cfg)?;
    let suites: Vec<Suite> = match which {
        SuiteArg::All => Suite::ALL.to_vec(),
        SuiteArg::LinearEquivalence => vec![Suite::LinearEquivalence],
        SuiteArg::Covering => vec![Suite::Covering],
        SuiteArg::Lemma35 => vec![Suite::Lemma35],
        SuiteArg::Singularity => vec![Suite::Singularity],
        SuiteArg::Nonlinear => vec![Suite::Nonlinear],
    };
    let vc = VerifyConfig { seed: ctx.cfg.seed, ..ctx.cfg.verify.clone() };
    let mut failed = false;
    let mut outputs = Vec::new();
    for s in suites {
        let report = run_suite(s, &vc)?;
        let name = format!("verify_{}.csv", s.name());
        std::fs::write(ctx.out.join(&name), report.to_csv())?;
        for r in &report.rows {
            println!("{:<5} {s} {:<40} {:>14.6e} {}", if r.pass { "PASS" } else { "FAIL" }, r.check, r.value, r.criterion);
        }
        failed |= !report.passed();
        outputs.push(name);
    }
    let refs: Vec<&str> = outputs.iter().map(String::as_str).collect();
    finish(ctx, manifest, &refs)?;
    Ok(if failed { EXIT_VERIFY } else { 0 })
}

fn metrics(ctx: &Ctx, samples: &Path, truth: Option<&Path>) -> Result<u8> {
    let cfg = &ctx.cfg;
    let manifest = Manifest::new("metrics", cfg)?;
    let (pts, m) = io::read_points_csv(File::open(samples).with_context(|| format!("opening {}", samples.display()))?)?;
    let truth = match truth {
        Some(p) => {
            let (t, mt) = io::read_points_csv(File::open(p).with_context(|| format!("opening {}", p.display()))?)?;
            if mt != m {
                bail!("samples have {m} columns, truth has {mt}");
            }
            t
        }
        None => cfg.truth(pts.len() / m)?,
    };
    let prior = PriorKind::for_schedule(&cfg.sde.schedule);
    let report = report_for(cfg, &pts, &truth, m, &prior)?;
    std::fs::write(ctx.out.join("metrics.csv"), report.to_csv())?;
    std::fs::write(ctx.out.join("metrics.json"), report.to_json(&serde_json::to_value(cfg)?)?)?;
    println!("{}", report.to_csv().trim_end());
    finish(ctx, manifest, &["metrics.csv", "metrics.json"])?;
    Ok(0)
}
