//! One function per subcommand.

use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::Rng;
use serde::{Deserialize, Serialize};
use spvt::boundprop::BoundMethod;
use spvt::laneworld::{generate_dataset, read_dataset, sample_initial, write_dataset, LaneState, Sample, StateRanges};
use spvt::perception::{estimate_epsilon, train_cgan, validate_assumption, write_assumption_curve, write_epsilon_csv};
use spvt::rng::stream;
use spvt::train::{
    evaluate, expert_demonstrations, pretrain_anchor, spvt_train, summarize_rewards, write_metrics_csv,
    write_rewards_csv, Controller, SpvtContext, Toggles, TrainError,
};
use spvt::verify::{content_hash, spv_certify, Certificate, CertifySettings, ClosedLoop};

use crate::config::{EpsilonPolicy, RunConfig};
use crate::error::CliError;
use crate::run::{ensure_parent, guard, write_snapshot, write_text, RunDir};

/// Independent seed for one stage, derived from the global seed.
pub fn sub_seed(seed: u64, tag: &str) -> u64 {
    stream(seed, tag, 0).random()
}

fn training_data(cfg: &RunConfig, data: Option<&Path>, tag: &str) -> Result<Vec<Sample>, CliError> {
    match data {
        Some(p) => {
            let d = read_dataset(p)?;
            info!("read {} samples from {}", d.len(), p.display());
            Ok(d)
        }
        None => Ok(generate_dataset(cfg.dataset.n, sub_seed(cfg.run.seed, tag), &StateRanges::default())),
    }
}

fn heldout(cfg: &RunConfig, tag: &str) -> Vec<Sample> {
    generate_dataset(cfg.dataset.heldout, sub_seed(cfg.run.seed, tag), &StateRanges::default())
}

pub fn gen_data(cfg: &RunConfig, n: Option<usize>, seed: Option<u64>, out: &Path, force: bool) -> Result<(), CliError> {
    let n = n.unwrap_or(cfg.dataset.n);
    let seed = seed.unwrap_or(cfg.run.seed);
    if n == 0 {
        return Err(CliError::Config("--n must be positive".into()));
    }
    guard(out, force)?;
    ensure_parent(out)?;
    let mut resolved = cfg.clone();
    resolved.dataset.n = n;
    resolved.run.seed = seed;
    write_dataset(&generate_dataset(n, seed, &StateRanges::default()), out)?;
    write_snapshot(out, &resolved, force)?;
    eprintln!("wrote {n} samples to {}", out.display());
    Ok(())
}

/// Residual summary stored next to the generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonFile {
    pub epsilon_max: f64,
    pub epsilon_q95: f64,
    pub mean_mse: f64,
    pub latent_dim: usize,
    pub heldout: usize,
    pub generator_hash: String,
}

const EPSILON_JSON: &str = "epsilon.json";

pub fn train_generator(cfg: &RunConfig, out: &Path, data: Option<&Path>, force: bool) -> Result<(), CliError> {
    let run = RunDir::create(out, force)?;
    let history_path = run.output("generator_history.csv")?;
    let eps_json = run.output(EPSILON_JSON)?;
    let eps_csv = run.output("epsilon.csv")?;
    let samples = training_data(cfg, data, "generator-data")?;
    let outcome = train_cgan(&samples, &cfg.generator, sub_seed(cfg.run.seed, "generator"))?;
    info!(
        "held-out l1 {:.4} -> {:.4} (best epoch {:?})",
        outcome.initial_heldout_l1, outcome.best_heldout_l1, outcome.best_epoch
    );
    let mut w = csv::Writer::from_path(&history_path)?;
    w.write_record(["epoch", "disc_loss", "gen_adv", "gen_l1", "gen_ortho", "heldout_l1"])?;
    for h in &outcome.history {
        w.write_record([
            h.epoch.to_string(),
            h.disc_loss.to_string(),
            h.gen_adv.to_string(),
            h.gen_l1.to_string(),
            h.gen_ortho.to_string(),
            h.heldout_l1.to_string(),
        ])?;
    }
    w.flush().map_err(|e| CliError::io(&history_path, e))?;
    run.save_model("generator", &outcome.generator, cfg)?;
    run.save_model("discriminator", &outcome.discriminator, cfg)?;

    let report = estimate_epsilon(&outcome.generator, &heldout(cfg, "epsilon-heldout"), &cfg.search)?;
    write_epsilon_csv(&report, &eps_csv)?;
    let file = EpsilonFile {
        epsilon_max: report.epsilon_max,
        epsilon_q95: report.epsilon_q95,
        mean_mse: report.mean_mse(),
        latent_dim: report.latent_dim,
        heldout: report.linf.len(),
        generator_hash: content_hash(&outcome.generator),
    };
    write_text(&eps_json, &(serde_json::to_string_pretty(&file).expect("serializable") + "\n"))?;
    run.register("epsilon", EPSILON_JSON)?;
    write_snapshot(&run.path("train-generator"), cfg, force)?;
    eprintln!(
        "generator: held-out l1 {:.4}, epsilon max {:.4}, q95 {:.4}",
        outcome.best_heldout_l1, file.epsilon_max, file.epsilon_q95
    );
    Ok(())
}

pub fn parse_dims(s: &str) -> Result<Vec<usize>, CliError> {
    let dims: Vec<usize> = s
        .split(',')
        .map(|t| t.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Config(format!("--dims {s:?}: {e}")))?;
    if dims.is_empty() || dims.contains(&0) {
        return Err(CliError::Config(format!("--dims {s:?}: latent sizes must be positive")));
    }
    Ok(dims)
}

pub fn validate_assumption_cmd(
    cfg: &RunConfig,
    dims: &[usize],
    out: &Path,
    data: Option<&Path>,
    force: bool,
) -> Result<(), CliError> {
    guard(out, force)?;
    ensure_parent(out)?;
    let train = training_data(cfg, data, "generator-data")?;
    let points = validate_assumption(
        dims,
        &train,
        &heldout(cfg, "assumption-heldout"),
        &cfg.generator,
        &cfg.search,
        sub_seed(cfg.run.seed, "generator"),
    )?;
    write_assumption_curve(&points, out)?;
    write_snapshot(out, cfg, force)?;
    for p in &points {
        eprintln!("latent {:>3}: mean mse {:.6}, epsilon max {:.4}", p.latent_dim, p.mean_mse, p.epsilon_max);
    }
    Ok(())
}

pub fn pretrain_anchor_cmd(cfg: &RunConfig, out: &Path, force: bool) -> Result<(), CliError> {
    let run = RunDir::create(out, force)?;
    let history_path = run.output("anchor_history.csv")?;
    let data = generate_dataset(cfg.dataset.n, sub_seed(cfg.run.seed, "anchor-data"), &cfg.anchor.state_ranges);
    let demos = expert_demonstrations(&data, &cfg.environment.vehicle());
    let outcome = pretrain_anchor(&demos, &cfg.anchor, cfg.environment.max_steer, sub_seed(cfg.run.seed, "anchor"))
        .or_else(|e| save_last_good(&run, "anchor", cfg, e))?;
    let mut w = csv::Writer::from_path(&history_path)?;
    w.write_record(["epoch", "train_mse", "val_mse"])?;
    for (e, t, v) in &outcome.history {
        w.write_record([e.to_string(), t.to_string(), v.to_string()])?;
    }
    w.flush().map_err(|e| CliError::io(&history_path, e))?;
    run.save_model("anchor", &outcome.controller.net, cfg)?;
    write_snapshot(&run.path("pretrain-anchor"), cfg, force)?;
    eprintln!("anchor: validation mse {:.6}", outcome.best_val_mse);
    Ok(())
}

/// Keeps the last finite weights of a diverged run as `<role>-last-good`.
fn save_last_good<T>(run: &RunDir, role: &str, cfg: &RunConfig, e: TrainError) -> Result<T, CliError> {
    if let TrainError::Diverged { last_good, .. } = &e {
        let p = run.save_model(&format!("{role}-last-good"), last_good, cfg)?;
        warn!("saved last good weights to {}", p.display());
    }
    Err(e.into())
}

pub struct SpvtArgs<'a> {
    pub out: &'a Path,
    pub toggles: Toggles,
    pub role: Option<&'a str>,
    pub generator: &'a str,
    pub anchor: &'a str,
}

pub fn train_spvt_cmd(cfg: &RunConfig, args: &SpvtArgs<'_>, force: bool) -> Result<(), CliError> {
    let run = RunDir::create(args.out, force)?;
    let role = args.role.map_or_else(
        || {
            let mut r = String::from("spvt");
            if !args.toggles.atd {
                r.push_str("-no-atd");
            }
            if !args.toggles.curriculum {
                r.push_str("-no-curriculum");
            }
            r
        },
        str::to_string,
    );
    let metrics = run.output(&format!("{role}_metrics.csv"))?;
    let generator = run.load(args.generator)?;
    let anchor = Controller::new(run.load(args.anchor)?, cfg.environment.max_steer)?;
    let dynamics = cfg.environment.vehicle();
    let spec = cfg.environment.safety();
    let ctx = SpvtContext {
        generator: &generator,
        anchor: &anchor,
        dynamics: &dynamics,
        spec: &spec,
    };
    let outcome = spvt_train(&ctx, &cfg.spvt, sub_seed(cfg.run.seed, "spvt"), args.toggles)
        .or_else(|e| save_last_good(&run, &role, cfg, e))?;
    write_metrics_csv(&outcome.history, &metrics)?;
    for (epoch, k, net) in &outcome.checkpoints {
        run.save_model(&format!("{role}-e{epoch}-k{k}"), net, cfg)?;
    }
    let p = run.save_model(&role, &outcome.controller.net, cfg)?;
    write_snapshot(&run.path(&format!("train-{role}")), cfg, force)?;
    eprintln!("{role}: saved {}", p.display());
    Ok(())
}

pub struct VerifyArgs<'a> {
    pub run: &'a Path,
    pub controller: &'a str,
    pub out: &'a Path,
    pub epsilon: Option<f64>,
}

pub fn read_epsilon(run: &RunDir) -> Result<EpsilonFile, CliError> {
    let p = run.resolve("epsilon").map_err(|_| {
        CliError::Config(format!(
            "{} has no residual estimate; run train-generator or pass --epsilon",
            run.root.display()
        ))
    })?;
    let text = std::fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
}

/// The initial states behind a certificate: fresh draws from the initial
/// distribution on a stream of their own.
pub fn certificate_samples(seed: u64, n: usize) -> Vec<LaneState> {
    let mut rng = stream(seed, "verify-initial", 0);
    (0..n).map(|_| sample_initial(&mut rng)).collect()
}

pub fn verify_cmd(cfg: &RunConfig, args: &VerifyArgs<'_>, force: bool) -> Result<Certificate, CliError> {
    let v = &cfg.verification;
    let run = RunDir::open(args.run)?;
    let csv_path = args.out.with_extension("csv");
    for p in [args.out, csv_path.as_path()] {
        guard(p, force)?;
    }
    ensure_parent(args.out)?;
    let generator = run.load("generator")?;
    let controller = Controller::new(run.load(args.controller)?, cfg.environment.max_steer)?;
    let (epsilon, note) = match args.epsilon {
        Some(e) if e.is_finite() && e >= 0.0 => (e, None),
        Some(e) => return Err(CliError::Config(format!("--epsilon must be finite and >= 0, got {e}"))),
        None => {
            let eps = read_epsilon(&run)?;
            if eps.generator_hash != content_hash(&generator) {
                warn!("residual estimate was computed for a different generator");
            }
            match v.epsilon_policy {
                EpsilonPolicy::Max => (eps.epsilon_max, None),
                EpsilonPolicy::Q95 => (
                    eps.epsilon_q95,
                    Some(format!(
                        "heuristic: epsilon is the 95th-percentile residual {:.6}, not the maximum {:.6}; \
                         the bound is not a sound certificate",
                        eps.epsilon_q95, eps.epsilon_max
                    )),
                ),
            }
        }
    };
    if let Some(n) = &note {
        eprintln!("warning: {n}");
    }
    let seed = sub_seed(cfg.run.seed, "verify");
    let samples = certificate_samples(seed, v.n);
    let dynamics = cfg.environment.vehicle();
    let lp = ClosedLoop {
        generator: &generator,
        controller: &controller,
        dynamics: &dynamics,
        epsilon,
        method: v.method,
    };
    let settings = CertifySettings {
        delta: v.delta,
        k: v.k,
        seed,
    };
    let cert = spv_certify(&samples, &settings, &lp, &cfg.environment.safety())?;
    cert.write_json(args.out)?;
    cert.write_csv(&csv_path, note.as_deref())?;
    write_snapshot(args.out, cfg, force)?;
    let last = cert.per_step.last().expect("k >= 1");
    eprintln!(
        "K = {}: {}/{} verified, lower bound {:.6} at confidence {}",
        last.k,
        last.verified_count,
        cert.n,
        last.lower_bound,
        1.0 - cert.delta
    );
    Ok(cert)
}

pub struct EvalArgs<'a> {
    pub run: &'a Path,
    pub controller: &'a str,
    pub out: &'a Path,
}

pub fn evaluate_cmd(cfg: &RunConfig, args: &EvalArgs<'_>, force: bool) -> Result<(), CliError> {
    let e = &cfg.evaluation;
    let run = RunDir::open(args.run)?;
    guard(args.out, force)?;
    ensure_parent(args.out)?;
    let controller = Controller::new(run.load(args.controller)?, cfg.environment.max_steer)?;
    let stats = evaluate(
        &controller,
        &cfg.environment.vehicle(),
        &cfg.environment.safety(),
        e.episodes,
        e.steps,
        sub_seed(cfg.run.seed, "evaluate"),
    )?;
    write_rewards_csv(&stats, args.out)?;
    write_snapshot(args.out, cfg, force)?;
    eprintln!(
        "reward mean {:.3} (median {:.3}, min {:.3}, max {:.3}); {} unsafe episodes",
        stats.mean, stats.median, stats.min, stats.max, stats.unsafe_episodes
    );
    Ok(())
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::io(dir, e))?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// Episode rewards from a `episode,reward` table; `None` for other CSVs.
fn read_rewards(path: &Path) -> Result<Option<Vec<f64>>, CliError> {
    let mut r = match csv::Reader::from_path(path) {
        Ok(r) => r,
        Err(_) => return Ok(None),
    };
    match r.headers() {
        Ok(h) if h.iter().eq(["episode", "reward"]) => {}
        _ => return Ok(None),
    }
    let mut v = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let x: f64 = rec
            .get(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| CliError::Other(format!("{}: bad reward row {rec:?}", path.display())))?;
        v.push(x);
    }
    Ok(Some(v))
}

#[derive(Debug, Default, PartialEq)]
pub struct ReportCounts {
    pub certificates: usize,
    pub reward_tables: usize,
}

pub fn report_cmd(runs: &Path, out: &Path, force: bool) -> Result<ReportCounts, CliError> {
    if !runs.is_dir() {
        return Err(CliError::Config(format!("{} is not a directory", runs.display())));
    }
    let bounds_path = out.join("bounds.csv");
    let rewards_path = out.join("rewards.csv");
    guard(&bounds_path, force)?;
    guard(&rewards_path, force)?;
    let mut files = Vec::new();
    collect_files(runs, &mut files)?;
    let name = |p: &Path| p.strip_prefix(runs).unwrap_or(p).display().to_string();

    let mut counts = ReportCounts::default();
    let mut bounds = Vec::new();
    let mut rewards = Vec::new();
    for p in files.iter().filter(|p| p != &&bounds_path && p != &&rewards_path) {
        match p.extension().and_then(|e| e.to_str()) {
            Some("json") => {
                if let Ok(cert) = Certificate::read_json(p) {
                    counts.certificates += 1;
                    bounds.push((name(p), cert));
                }
            }
            Some("csv") => {
                if let Some(r) = read_rewards(p)? {
                    if let Some(s) = summarize_rewards(&r) {
                        counts.reward_tables += 1;
                        rewards.push((name(p), s));
                    }
                }
            }
            _ => {}
        }
    }

    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let mut w = csv::Writer::from_path(&bounds_path)?;
    w.write_record([
        "source", "k", "verified", "n", "fraction", "lower_bound", "delta", "epsilon", "method", "controller",
    ])?;
    for (src, c) in &bounds {
        let method = match c.bound_method {
            BoundMethod::Ibp => "ibp",
            BoundMethod::Crown => "crown",
        };
        for s in &c.per_step {
            w.write_record([
                src.clone(),
                s.k.to_string(),
                s.verified_count.to_string(),
                c.n.to_string(),
                s.fraction.to_string(),
                s.lower_bound.to_string(),
                c.delta.to_string(),
                c.epsilon.to_string(),
                method.to_string(),
                c.controller_hash[..12].to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| CliError::io(&bounds_path, e))?;

    let mut w = csv::Writer::from_path(&rewards_path)?;
    w.write_record(["source", "episodes", "mean", "min", "q1", "median", "q3", "max"])?;
    for (src, s) in &rewards {
        w.write_record([
            src.clone(),
            s.episodes.to_string(),
            s.mean.to_string(),
            s.min.to_string(),
            s.q1.to_string(),
            s.median.to_string(),
            s.q3.to_string(),
            s.max.to_string(),
        ])?;
    }
    w.flush().map_err(|e| CliError::io(&rewards_path, e))?;

    if counts == ReportCounts::default() {
        eprintln!("warning: no certificates or reward tables under {}", runs.display());
    } else {
        eprintln!(
            "report: {} certificates, {} reward tables",
            counts.certificates, counts.reward_tables
        );
    }
    Ok(counts)
}
