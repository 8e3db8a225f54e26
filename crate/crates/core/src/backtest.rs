//! Walk-forward evaluation on a real panel and training/evaluation on
//! simulated paths.

use std::ops::Range;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{act_greedy, fit, FitOutput, TrainConfig};
use crate::env::{CostModel, Position};
use crate::error::{Error, Result};
use crate::features::{build_state_panel, FeatureConfig, StatePanel};
use crate::metrics::{compute_metrics, MetricsReport};
use crate::nn::{NetParams, QNetwork};
use crate::rng::stream_rng;
use crate::sim::{SimSource, TRADING_DAY};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanMode {
    /// Fixed-length training window sliding forward by the test window.
    RollingFixed,
    /// Train on all history, retrain every `retrain_every` days.
    Expanding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WalkForwardPlan {
    pub mode: PlanMode,
    /// Rolling: training length. Expanding: length of the first training span.
    pub train_window: usize,
    pub test_window: usize,
    pub retrain_every: usize,
    /// Start each segment's training from the previous segment's network.
    pub warm_start: bool,
}

impl Default for WalkForwardPlan {
    fn default() -> Self {
        WalkForwardPlan {
            mode: PlanMode::RollingFixed,
            train_window: 1260,
            test_window: 1260,
            retrain_every: 63,
            warm_start: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub train: Range<usize>,
    pub test: Range<usize>,
}

impl WalkForwardPlan {
    pub fn validate(&self) -> Result<()> {
        if self.train_window == 0 || self.test_window == 0 || self.retrain_every == 0 {
            return Err(Error::Config("backtest windows must be positive".into()));
        }
        Ok(())
    }

    fn stride(&self) -> usize {
        match self.mode {
            PlanMode::RollingFixed => self.test_window,
            PlanMode::Expanding => self.retrain_every,
        }
    }

    /// Train/test row ranges over a panel of `n` dates. Test ranges tile
    /// `train_window..n` without gaps; the last one may be short.
    pub fn segments(&self, n: usize) -> Result<Vec<Segment>> {
        self.validate()?;
        if n <= self.train_window {
            return Err(Error::Config(format!(
                "panel of {n} dates is too short for a training window of {}",
                self.train_window
            )));
        }
        let mut out = Vec::new();
        let mut start = self.train_window;
        while start < n {
            let end = (start + self.stride()).min(n);
            let train_start = match self.mode {
                PlanMode::RollingFixed => start - self.train_window,
                PlanMode::Expanding => 0,
            };
            out.push(Segment { train: train_start..start, test: start..end });
            start = end;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsTriple {
    pub net: MetricsReport,
    pub gross: MetricsReport,
    pub benchmark: MetricsReport,
}

#[derive(Debug, Clone)]
pub struct SegmentRecord {
    pub segment: Segment,
    pub seed: u64,
    /// Online network used for the segment's test span.
    pub params: NetParams,
}

/// Out-of-sample series on one shared date index.
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub dates: Vec<String>,
    pub net: Vec<f64>,
    pub gross: Vec<f64>,
    pub costs: Vec<f64>,
    pub benchmark: Vec<f64>,
    pub positions: Vec<Position>,
    pub metrics: MetricsTriple,
    pub segments: Vec<SegmentRecord>,
}

impl ExperimentResult {
    /// Assemble a result from its daily series; net returns and metrics are derived.
    pub fn from_series(dates: Vec<String>, gross: Vec<f64>, costs: Vec<f64>, benchmark: Vec<f64>, positions: Vec<Position>) -> Result<Self> {
        let n = dates.len();
        for len in [gross.len(), costs.len(), benchmark.len(), positions.len()] {
            if len != n {
                return Err(Error::Shape { expected: n, got: len });
            }
        }
        let net: Vec<f64> = gross.iter().zip(&costs).map(|(g, c)| g - c).collect();
        let metrics = MetricsTriple {
            net: compute_metrics(&net)?,
            gross: compute_metrics(&gross)?,
            benchmark: compute_metrics(&benchmark)?,
        };
        Ok(ExperimentResult { dates, net, gross, costs, benchmark, positions, metrics, segments: Vec::new() })
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }
}

/// Target returns of the panel: hold one long unit, no costs.
pub fn benchmark_long_only(panel: &StatePanel) -> Vec<f64> {
    panel.target_returns.clone()
}

/// Trades of a greedy network over `rows`, starting from `position`.
#[derive(Debug, Clone, Default)]
struct Trades {
    positions: Vec<Position>,
    gross: Vec<f64>,
    costs: Vec<f64>,
}

fn trade_greedy(net: &NetParams, panel: &StatePanel, rows: Range<usize>, mut position: Position, costs: CostModel, out: &mut Trades) -> Result<Position> {
    for t in rows {
        let action = act_greedy(net, &panel.states[t])?;
        out.gross.push(action.as_f64() * panel.target_returns[t]);
        out.costs.push(costs.cost(position, action));
        out.positions.push(action);
        position = action;
    }
    Ok(position)
}

/// Seed of the `k`th sub-task of a run seeded with `seed` under `label`.
/// Kept below 2^63 so that every seed survives a TOML round trip.
pub fn sub_seed(seed: u64, label: u32, k: u64) -> u64 {
    stream_rng(seed, (u64::from(label) << 40) | k).random::<u64>() >> 1
}

const SEGMENT_LABEL: u32 = 1;
pub const TRAIN_PATH_LABEL: u32 = 2;
pub const EVAL_PATH_LABEL: u32 = 3;

fn finish(dates: Vec<String>, trades: Trades, benchmark: Vec<f64>, segments: Vec<SegmentRecord>) -> Result<ExperimentResult> {
    let mut r = ExperimentResult::from_series(dates, trades.gross, trades.costs, benchmark, trades.positions)?;
    r.segments = segments;
    Ok(r)
}

/// Training seed of walk-forward segment `k`.
pub fn segment_seed(seed: u64, k: usize) -> u64 {
    sub_seed(seed, SEGMENT_LABEL, k as u64)
}

/// The fit that [`run_walk_forward`] performs for segment `k`.
pub fn fit_segment(
    panel: &StatePanel,
    segment: &Segment,
    k: usize,
    train: &TrainConfig,
    costs: CostModel,
    init: Option<QNetwork>,
) -> Result<FitOutput> {
    // The row right after the span only supplies the last next-state.
    let span = panel.slice(segment.train.start..segment.train.end + 1);
    let config = TrainConfig { seed: segment_seed(train.seed, k), ..train.clone() };
    fit(std::slice::from_ref(&span), costs, &config, init)
}

/// Fit on each training span and trade greedily through the following test
/// span. The position carries over segment boundaries. `pretrained`, when
/// given, replaces the fit of the first segment.
pub fn run_walk_forward(
    panel: &StatePanel,
    plan: &WalkForwardPlan,
    train: &TrainConfig,
    costs: CostModel,
    pretrained: Option<QNetwork>,
) -> Result<ExperimentResult> {
    costs.validate()?;
    let segments = plan.segments(panel.len())?;
    let mut trades = Trades::default();
    let mut records = Vec::with_capacity(segments.len());
    let mut position = Position::FLAT;
    let mut previous: Option<QNetwork> = None;
    let mut pretrained = pretrained;
    for (k, segment) in segments.into_iter().enumerate() {
        let seed = segment_seed(train.seed, k);
        let network = if let Some(net) = pretrained.take() {
            net
        } else {
            let init = if plan.warm_start { previous.take() } else { None };
            fit_segment(panel, &segment, k, train, costs, init)?.network
        };
        position = trade_greedy(&network.online, panel, segment.test.clone(), position, costs, &mut trades)?;
        records.push(SegmentRecord { segment, seed, params: network.online.clone() });
        previous = Some(network);
    }
    let first = records[0].segment.test.start;
    let dates = (first..panel.len()).map(|t| panel.label(t)).collect();
    let benchmark = benchmark_long_only(panel)[first..].to_vec();
    finish(dates, trades, benchmark, records)
}

/// Greedy evaluation of a fixed network over a whole panel, starting flat.
pub fn evaluate(net: &NetParams, panel: &StatePanel, costs: CostModel) -> Result<ExperimentResult> {
    let mut trades = Trades::default();
    trade_greedy(net, panel, 0..panel.len(), Position::FLAT, costs, &mut trades)?;
    let dates = (0..panel.len()).map(|t| panel.label(t)).collect();
    finish(dates, trades, benchmark_long_only(panel), Vec::new())
}

/// A single-asset state panel of exactly `years * 252` dates from a
/// simulated path; the path gets a prefix long enough to warm the features.
pub fn simulated_panel<R: Rng + ?Sized>(source: &SimSource, years: usize, features: &FeatureConfig, rng: &mut R) -> Result<StatePanel> {
    let n_states = years * 252;
    let n_steps = features.first_state_index() + n_states;
    let path = source.path(n_steps, TRADING_DAY, rng)?;
    let panel = build_state_panel(std::slice::from_ref(&path.prices), 0, features)?;
    debug_assert_eq!(panel.len(), n_states);
    Ok(panel)
}

/// `n` simulated panels; path `i` draws from its own seed.
pub fn simulated_panels(source: &SimSource, n: usize, years: usize, features: &FeatureConfig, seed: u64, label: u32) -> Result<Vec<StatePanel>> {
    (0..n)
        .into_par_iter()
        .map(|i| simulated_panel(source, years, features, &mut stream_rng(sub_seed(seed, label, i as u64), 0)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimStudy {
    pub source: SimSource,
    pub n_paths: usize,
    pub years: usize,
    pub features: FeatureConfig,
    pub train: TrainConfig,
    pub costs: CostModel,
    /// Seeds the simulated paths (training and evaluation).
    pub seed: u64,
}

/// Fit one agent across `study.n_paths` simulated training paths, cycled in turn.
pub fn train_on_simulated(study: &SimStudy) -> Result<FitOutput> {
    if study.n_paths == 0 {
        return Err(Error::Config("n_paths must be positive".into()));
    }
    let paths = simulated_panels(&study.source, study.n_paths, study.years, &study.features, study.seed, TRAIN_PATH_LABEL)?;
    fit(&paths, study.costs, &study.train, None)
}

/// Train on simulated paths, then evaluate greedily on `eval`.
pub fn run_simulated_training(study: &SimStudy, eval: &StatePanel) -> Result<ExperimentResult> {
    let network = train_on_simulated(study)?.network;
    let mut result = evaluate(&network.online, eval, study.costs)?;
    result.segments.push(SegmentRecord {
        segment: Segment { train: 0..0, test: 0..eval.len() },
        seed: study.train.seed,
        params: network.online,
    });
    Ok(result)
}

/// Per-path annualized Sharpe ratios of one study cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramCell {
    pub agent: Vec<f64>,
    pub benchmark: Vec<f64>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_sd(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)).sqrt()
}

impl HistogramCell {
    pub fn agent_mean(&self) -> f64 {
        mean(&self.agent)
    }

    pub fn benchmark_mean(&self) -> f64 {
        mean(&self.benchmark)
    }

    /// Cross-path sample standard deviation of the agent's Sharpe ratios.
    pub fn agent_sd(&self) -> f64 {
        sample_sd(&self.agent)
    }

    pub fn benchmark_sd(&self) -> f64 {
        sample_sd(&self.benchmark)
    }

    /// `path,agent_sharpe,benchmark_sharpe` rows.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "path,agent_sharpe,benchmark_sharpe")?;
        for (i, (a, b)) in self.agent.iter().zip(&self.benchmark).enumerate() {
            writeln!(out, "{i},{},{}", crate::fmt::num(*a), crate::fmt::num(*b))?;
        }
        Ok(())
    }
}

/// Train once, then evaluate on `n_eval` fresh paths. A path on which a
/// strategy never moves has no Sharpe ratio; it enters the histogram as 0.
pub fn sharpe_histogram_study(study: &SimStudy, n_eval: usize) -> Result<HistogramCell> {
    if n_eval < 2 {
        return Err(Error::Config("n_eval must be at least 2".into()));
    }
    let network = train_on_simulated(study)?.network;
    let evals = simulated_panels(&study.source, n_eval, study.years, &study.features, study.seed, EVAL_PATH_LABEL)?;
    let results: Vec<(f64, f64)> = evals
        .par_iter()
        .map(|panel| {
            let r = evaluate(&network.online, panel, study.costs)?;
            Ok((r.metrics.net.sharpe.unwrap_or(0.0), r.metrics.benchmark.sharpe.unwrap_or(0.0)))
        })
        .collect::<Result<_>>()?;
    let (agent, benchmark) = results.into_iter().unzip();
    Ok(HistogramCell { agent, benchmark })
}
