use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use rayon::prelude::*;

use dqtrade::backtest::{
    evaluate, fit_segment, run_walk_forward, segment_seed, sharpe_histogram_study, simulated_panels, sub_seed,
    train_on_simulated, ExperimentResult, HistogramCell, SimStudy, EVAL_PATH_LABEL, TRAIN_PATH_LABEL,
};
use dqtrade::data::{align_panel, load_csv, read_result, write_reports};
use dqtrade::features::StatePanel;
use dqtrade::fmt::num;
use dqtrade::nn::QNetwork;
use dqtrade::rng::stream_rng;
use dqtrade::sim::{calibrate_gbm, calibrate_vg, PricePath, TRADING_DAY};
use dqtrade::Error;

use crate::config::{builtin_source, DataConfig, Provenance, RunConfig, SimulatorConfig, Source};

/// Name used for the strategy rows of metrics tables.
pub const MODEL_NAME: &str = "dqn";

/// Files written by a command.
pub type Written = Vec<PathBuf>;

fn out_dir(cfg: &RunConfig) -> anyhow::Result<&Path> {
    std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    Ok(&cfg.out)
}

/// The resolved config plus provenance, loadable with `--config`.
pub fn write_manifest(cfg: &RunConfig, command: &str, seeds: BTreeMap<String, u64>, written: &mut Written) -> anyhow::Result<()> {
    let mut manifest = cfg.clone();
    manifest.provenance = Some(Provenance {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seeds,
    });
    let path = cfg.out.join("manifest.toml");
    std::fs::write(&path, manifest.to_toml()?).with_context(|| format!("writing {}", path.display()))?;
    written.push(path);
    Ok(())
}

fn load_panel(data: &DataConfig, cfg: &RunConfig) -> anyhow::Result<StatePanel> {
    let mut series = Vec::with_capacity(data.files.len());
    for (symbol, path) in &data.files {
        let loaded = load_csv(path, symbol).with_context(|| format!("loading {symbol}"))?;
        for w in &loaded.warnings {
            eprintln!(
                "warning: {}: duplicate date {} on line {} replaced by line {}",
                path.display(),
                w.date,
                w.dropped_line,
                w.kept_line
            );
        }
        series.push(loaded.series);
    }
    let aligned = align_panel(&series, &data.target)?;
    let panel = aligned.state_panel(&cfg.features)?;
    if panel.is_empty() {
        return Err(Error::InsufficientData { needed: cfg.features.first_state_index() + 2, got: aligned.dates.len() }.into());
    }
    Ok(panel)
}

fn sim_study(cfg: &RunConfig, sim: &SimulatorConfig) -> SimStudy {
    SimStudy {
        source: sim.resolved_source(),
        n_paths: sim.n_paths,
        years: sim.years,
        features: cfg.features.clone(),
        train: cfg.train.clone(),
        costs: cfg.costs,
        seed: cfg.seed,
    }
}

fn path_seeds(seed: u64, label: u32, n: usize, prefix: &str) -> BTreeMap<String, u64> {
    (0..n).map(|i| (format!("{prefix}_{i:03}"), sub_seed(seed, label, i as u64))).collect()
}

pub fn write_checkpoint(net: &QNetwork, path: &Path) -> anyhow::Result<()> {
    let mut out = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    net.write_to(&mut out)?;
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> anyhow::Result<QNetwork> {
    let file = File::open(path).map_err(|e| Error::Config(format!("checkpoint {}: {e}", path.display())))?;
    QNetwork::read_from(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

/// `path_NNN.csv` price paths of `years * 252` steps each.
pub fn cmd_simulate(cfg: &RunConfig) -> anyhow::Result<Written> {
    let sim = cfg.simulator()?;
    let source = sim.resolved_source();
    let dir = out_dir(cfg)?;
    let seeds = path_seeds(cfg.seed, TRAIN_PATH_LABEL, sim.n_paths, "path");
    let mut written = Vec::new();
    for (name, seed) in &seeds {
        let path = source.path(sim.years * 252, TRADING_DAY, &mut stream_rng(*seed, 0))?;
        let file = dir.join(format!("{name}.csv"));
        let mut out = BufWriter::new(File::create(&file)?);
        path.write_csv(&mut out)?;
        out.flush()?;
        written.push(file);
    }
    write_manifest(cfg, "simulate", seeds, &mut written)?;
    Ok(written)
}

/// Method-of-moments GBM and VG parameters from a price file.
pub fn cmd_calibrate(cfg: &RunConfig, input: Option<&Path>) -> anyhow::Result<Written> {
    let (file, symbol) = match (input, &cfg.data) {
        (Some(p), _) => (p.to_path_buf(), "input".to_string()),
        (None, Some(d)) => (d.files[&d.target].clone(), d.target.clone()),
        (None, None) => return Err(Error::Config("calibrate needs --input or a [data] section".into()).into()),
    };
    let series = load_csv(&file, &symbol)?.series;
    let path = PricePath::new(series.prices, TRADING_DAY)?;
    let mut text = format!("# calibrated from {}\n", file.display());
    let gbm = calibrate_gbm(&path)?;
    text += &format!("[gbm]\nmu = {}\nsigma = {}\ns0 = {}\n", gbm.mu, gbm.sigma, gbm.s0);
    match calibrate_vg(&path) {
        Ok(vg) => {
            text += &format!(
                "\n[vg]\nmu = {}\nsigma = {}\ntheta = {}\nnu = {}\ns0 = {}\n",
                vg.mu, vg.sigma, vg.theta, vg.nu, vg.s0
            );
        }
        Err(e) => {
            eprintln!("warning: VG calibration failed: {e}");
            text += &format!("\n# VG calibration failed: {e}\n");
        }
    }
    print!("{text}");
    let dir = out_dir(cfg)?;
    let out = dir.join("calibration.toml");
    std::fs::write(&out, text)?;
    let mut written = vec![out];
    write_manifest(cfg, "calibrate", BTreeMap::new(), &mut written)?;
    Ok(written)
}

/// Data source: the fit of the first walk-forward segment. Simulator source:
/// one fit across all simulated training paths.
pub fn cmd_train(cfg: &RunConfig) -> anyhow::Result<Written> {
    let (fitted, seeds) = match cfg.source()? {
        Source::Data(data) => {
            let panel = load_panel(data, cfg)?;
            let segments = cfg.backtest.segments(panel.len())?;
            let out = fit_segment(&panel, &segments[0], 0, &cfg.train, cfg.costs, None)?;
            (out, BTreeMap::from([("segment_000".to_string(), segment_seed(cfg.train.seed, 0))]))
        }
        Source::Simulator(sim) => {
            let out = train_on_simulated(&sim_study(cfg, sim))?;
            (out, path_seeds(cfg.seed, TRAIN_PATH_LABEL, sim.n_paths, "train_path"))
        }
    };
    let dir = out_dir(cfg)?;
    let mut written = Vec::new();
    let ckpt = dir.join("checkpoint.bin");
    write_checkpoint(&fitted.network, &ckpt)?;
    written.push(ckpt);
    let log = dir.join("training_log.csv");
    let mut out = BufWriter::new(File::create(&log)?);
    fitted.log.write_csv(&mut out)?;
    out.flush()?;
    written.push(log);
    write_manifest(cfg, "train", seeds, &mut written)?;
    Ok(written)
}

/// Walk-forward on data, or train-on-simulated then evaluate on a held-out
/// simulated path. A checkpoint replaces the (first) fit.
pub fn run_backtest(cfg: &RunConfig, checkpoint: Option<&Path>) -> anyhow::Result<(ExperimentResult, BTreeMap<String, u64>)> {
    let pretrained = checkpoint.map(read_checkpoint).transpose()?;
    match cfg.source()? {
        Source::Data(data) => {
            let panel = load_panel(data, cfg)?;
            let result = run_walk_forward(&panel, &cfg.backtest, &cfg.train, cfg.costs, pretrained)?;
            let seeds = result.segments.iter().enumerate().map(|(k, s)| (format!("segment_{k:03}"), s.seed)).collect();
            Ok((result, seeds))
        }
        Source::Simulator(sim) => {
            let study = sim_study(cfg, sim);
            let network = match pretrained {
                Some(net) => net,
                None => train_on_simulated(&study)?.network,
            };
            let eval = simulated_panels(&study.source, 1, study.years, &study.features, study.seed, EVAL_PATH_LABEL)?;
            let result = evaluate(&network.online, &eval[0], cfg.costs)?;
            let mut seeds = path_seeds(cfg.seed, TRAIN_PATH_LABEL, sim.n_paths, "train_path");
            seeds.extend(path_seeds(cfg.seed, EVAL_PATH_LABEL, 1, "eval_path"));
            Ok((result, seeds))
        }
    }
}

pub fn cmd_backtest(cfg: &RunConfig, checkpoint: Option<&Path>) -> anyhow::Result<Written> {
    let (result, seeds) = run_backtest(cfg, checkpoint)?;
    let dir = out_dir(cfg)?;
    let mut written = write_reports(&result, MODEL_NAME, dir)?;
    if !result.segments.is_empty() {
        let path = dir.join("segments.csv");
        let mut out = BufWriter::new(File::create(&path)?);
        writeln!(out, "segment,train_start,train_end,test_start,test_end,seed")?;
        for (k, s) in result.segments.iter().enumerate() {
            let (tr, te) = (&s.segment.train, &s.segment.test);
            writeln!(out, "{k},{},{},{},{},{}", tr.start, tr.end, te.start, te.end, s.seed)?;
        }
        out.flush()?;
        written.push(path);
    }
    write_manifest(cfg, "backtest", seeds, &mut written)?;
    print!("{}", std::fs::read_to_string(dir.join("metrics.txt"))?);
    Ok(written)
}

/// One histogram cell per (regime, path count), run on the current rayon pool.
pub fn run_study(cfg: &RunConfig) -> anyhow::Result<Vec<(String, usize, HistogramCell)>> {
    let process = cfg.simulator.as_ref().map_or(SimulatorConfig::default().process, |s| s.process);
    let cells: Vec<_> = cfg
        .study
        .regimes
        .iter()
        .flat_map(|&r| cfg.study.n_paths.iter().map(move |&n| (r, n)))
        .collect();
    cells
        .par_iter()
        .map(|&(regime, n_paths)| {
            let study = SimStudy {
                source: builtin_source(process, regime),
                n_paths,
                years: cfg.study.years,
                features: cfg.features.clone(),
                train: cfg.train.clone(),
                costs: cfg.costs,
                seed: cfg.seed,
            };
            let cell = sharpe_histogram_study(&study, cfg.study.n_eval)
                .with_context(|| format!("study cell {} / {n_paths} paths", regime.name()))?;
            Ok((regime.name().to_string(), n_paths, cell))
        })
        .collect()
}

pub fn cmd_study(cfg: &RunConfig) -> anyhow::Result<Written> {
    let cells = run_study(cfg)?;
    let dir = out_dir(cfg)?;
    let mut written = Vec::new();
    let summary_path = dir.join("study_summary.csv");
    let mut summary = BufWriter::new(File::create(&summary_path)?);
    writeln!(summary, "regime,n_paths,agent_mean,agent_sd,benchmark_mean,benchmark_sd")?;
    for (regime, n, cell) in &cells {
        let path = dir.join(format!("histogram_{regime}_{n}.csv"));
        let mut out = BufWriter::new(File::create(&path)?);
        cell.write_csv(&mut out)?;
        out.flush()?;
        written.push(path);
        writeln!(
            summary,
            "{regime},{n},{},{},{},{}",
            num(cell.agent_mean()),
            num(cell.agent_sd()),
            num(cell.benchmark_mean()),
            num(cell.benchmark_sd())
        )?;
        println!(
            "{regime:>6} {n:>3} paths: agent mean Sharpe {:.3} (sd {:.3}), benchmark {:.3}",
            cell.agent_mean(),
            cell.agent_sd(),
            cell.benchmark_mean()
        );
    }
    summary.flush()?;
    written.push(summary_path);
    let seeds = path_seeds(cfg.seed, EVAL_PATH_LABEL, cfg.study.n_eval, "eval_path");
    write_manifest(cfg, "study", seeds, &mut written)?;
    Ok(written)
}

/// Regenerate metrics, equity curves, and the chart from a report directory.
pub fn cmd_report(cfg: &RunConfig, input: &Path) -> anyhow::Result<Written> {
    let result = read_result(input).with_context(|| format!("reading results in {}", input.display()))?;
    let written = write_reports(&result, MODEL_NAME, out_dir(cfg)?)?;
    print!("{}", std::fs::read_to_string(cfg.out.join("metrics.txt"))?);
    Ok(written)
}
