//! Volatility-normalized multi-horizon return features and the windowed
//! state panel fed to the Q-network.
//!
//! For asset `i`, horizon `k` and date `t` the feature is
//! `(p_t / p_{t-k} - 1) / (max(sigma_t, floor) * sqrt(k))`, where `sigma_t`
//! is the exponentially weighted standard deviation of daily simple returns.
//! A state stacks the last `lookback` days of every feature in
//! `(day, horizon, asset)` order.

use std::io::Write;
use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmt::num;

/// Shared, immutable observation vector.
pub type Observation = Arc<[f64]>;

/// Normalized features are clipped to `[-FEATURE_CLAMP, FEATURE_CLAMP]`.
pub const FEATURE_CLAMP: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub horizons: Vec<usize>,
    pub vol_span: usize,
    pub lookback: usize,
    pub vol_floor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig { horizons: vec![1, 21, 42, 63, 126, 252], vol_span: 63, lookback: 30, vol_floor: 1e-8 }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizons.is_empty() {
            return Err(Error::Config("features.horizons must not be empty".into()));
        }
        if self.horizons[0] < 1 || self.horizons.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(
                "features.horizons must be strictly increasing and >= 1".into(),
            ));
        }
        if self.lookback < 1 {
            return Err(Error::Config("features.lookback must be >= 1".into()));
        }
        if self.vol_span < 2 {
            return Err(Error::Config("features.vol_span must be >= 2".into()));
        }
        if !(self.vol_floor > 0.0) {
            return Err(Error::Config("features.vol_floor must be positive".into()));
        }
        Ok(())
    }

    /// First price index with a valid feature: the longest horizon must be
    /// covered and the volatility estimate must be out of warm-up (`span`
    /// returns, i.e. `span + 1` prices).
    pub fn first_feature_index(&self) -> usize {
        let longest = *self.horizons.last().unwrap_or(&1);
        longest.max(self.vol_span + 1)
    }

    /// First price index that carries a full state window.
    pub fn first_state_index(&self) -> usize {
        self.first_feature_index() + self.lookback - 1
    }

    pub fn state_dim(&self, n_assets: usize) -> usize {
        self.lookback * self.horizons.len() * n_assets
    }
}

/// Exponentially weighted volatility with its warm-up prefix marked.
#[derive(Debug, Clone, PartialEq)]
pub struct EwmVolatility {
    pub values: Vec<f64>,
    /// Leading entries still in warm-up.
    pub warmup: usize,
}

impl EwmVolatility {
    pub fn is_warm(&self, i: usize) -> bool {
        i >= self.warmup
    }
}

/// Recursive EW mean/variance with `alpha = 2 / (span + 1)`, started from the
/// first observation with zero variance.
pub fn ewm_volatility(returns: &[f64], span: usize) -> Result<EwmVolatility> {
    if span < 2 {
        return Err(Error::InvalidParameter(format!("span must be >= 2, got {span}")));
    }
    let alpha = 2.0 / (span as f64 + 1.0);
    let mut values = Vec::with_capacity(returns.len());
    let mut iter = returns.iter();
    if let Some(&first) = iter.next() {
        let mut mean = first;
        let mut var = 0.0;
        values.push(0.0);
        for &r in iter {
            let diff = r - mean;
            let incr = alpha * diff;
            mean += incr;
            var = (1.0 - alpha) * (var + diff * incr);
            values.push(var.sqrt());
        }
    }
    Ok(EwmVolatility { warmup: span.min(values.len()), values })
}

/// Simple return `p_t / p_{t-k} - 1`.
pub fn horizon_return(prices: &[f64], t: usize, k: usize) -> Result<f64> {
    if t < k {
        return Err(Error::OutOfHistory { t, k });
    }
    if t >= prices.len() {
        return Err(Error::Range(format!("date {t} beyond series of length {}", prices.len())));
    }
    Ok(prices[t] / prices[t - k] - 1.0)
}

/// Per-date states and next-day target returns.
#[derive(Debug, Clone, PartialEq)]
pub struct StatePanel {
    /// Price index of each state date.
    pub dates: Vec<usize>,
    pub states: Vec<Observation>,
    /// `p_{t+1} / p_t - 1` of the traded asset.
    pub target_returns: Vec<f64>,
    /// Optional display labels (e.g. ISO dates), one per state date.
    pub labels: Option<Vec<String>>,
}

impl StatePanel {
    /// Panel from precomputed states, dated `0..n`.
    pub fn from_parts(states: Vec<Vec<f64>>, target_returns: Vec<f64>) -> Result<Self> {
        if states.len() != target_returns.len() {
            return Err(Error::Shape { expected: states.len(), got: target_returns.len() });
        }
        let dim = states.first().map_or(0, Vec::len);
        for s in &states {
            if s.len() != dim {
                return Err(Error::Shape { expected: dim, got: s.len() });
            }
            if s.iter().any(|x| !x.is_finite()) {
                return Err(Error::Data("non-finite state entry".into()));
            }
        }
        if target_returns.iter().any(|r| !r.is_finite()) {
            return Err(Error::Data("non-finite target return".into()));
        }
        Ok(StatePanel {
            dates: (0..states.len()).collect(),
            states: states.into_iter().map(Observation::from).collect(),
            target_returns,
            labels: None,
        })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.states.first().map_or(0, |s| s.len())
    }

    /// Sub-panel over a range of panel rows; observations are shared.
    pub fn slice(&self, rows: Range<usize>) -> StatePanel {
        StatePanel {
            dates: self.dates[rows.clone()].to_vec(),
            states: self.states[rows.clone()].to_vec(),
            target_returns: self.target_returns[rows.clone()].to_vec(),
            labels: self.labels.as_ref().map(|l| l[rows].to_vec()),
        }
    }

    /// Attach labels given one label per *price* index.
    pub fn attach_price_labels(&mut self, price_labels: &[String]) -> Result<()> {
        let mut labels = Vec::with_capacity(self.dates.len());
        for &d in &self.dates {
            let l = price_labels
                .get(d)
                .ok_or_else(|| Error::Range(format!("no label for price index {d}")))?;
            labels.push(l.clone());
        }
        self.labels = Some(labels);
        Ok(())
    }

    pub fn label(&self, row: usize) -> String {
        match &self.labels {
            Some(l) => l[row].clone(),
            None => self.dates[row].to_string(),
        }
    }

    /// One row per date: `date,target_return,f0,f1,...`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "date,target_return")?;
        for i in 0..self.state_dim() {
            write!(out, ",f{i}")?;
        }
        writeln!(out)?;
        for row in 0..self.len() {
            write!(out, "{},{}", self.label(row), num(self.target_returns[row]))?;
            for x in self.states[row].iter() {
                write!(out, ",{}", num(*x))?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Builds the state panel from aligned price columns (one per asset, equal
/// length); `target` selects the traded column.
///
/// Dates without a full history are skipped, so the panel starts at
/// [`FeatureConfig::first_state_index`] and ends one day before the last
/// price (the last target return needs a successor).
pub fn build_state_panel(columns: &[Vec<f64>], target: usize, config: &FeatureConfig) -> Result<StatePanel> {
    config.validate()?;
    if columns.is_empty() {
        return Err(Error::Data("no price columns".into()));
    }
    if target >= columns.len() {
        return Err(Error::Range(format!("target column {target} of {}", columns.len())));
    }
    let n = columns[0].len();
    for (a, col) in columns.iter().enumerate() {
        if col.len() != n {
            return Err(Error::Data(format!(
                "asset {a} has {} prices, expected {n}",
                col.len()
            )));
        }
        if let Some(t) = col.iter().position(|p| !(p.is_finite() && *p > 0.0)) {
            return Err(Error::Data(format!("asset {a}, date {t}: invalid price {}", col[t])));
        }
    }

    let n_assets = columns.len();
    let n_h = config.horizons.len();
    let first_feature = config.first_feature_index();
    let first_state = config.first_state_index();
    if n < 2 || first_state > n - 2 {
        return Ok(StatePanel { dates: vec![], states: vec![], target_returns: vec![], labels: None });
    }

    // features[(t - first_feature) * n_h * n_assets + h * n_assets + a]
    let width = n_h * n_assets;
    let mut features = vec![0.0; (n - first_feature) * width];
    for (a, prices) in columns.iter().enumerate() {
        let returns: Vec<f64> = prices.windows(2).map(|w| w[1] / w[0] - 1.0).collect();
        let vol = ewm_volatility(&returns, config.vol_span)?;
        for t in first_feature..n {
            // sigma_t uses returns up to and including day t.
            let sigma = vol.values[t - 1].max(config.vol_floor);
            for (h, &k) in config.horizons.iter().enumerate() {
                let r = horizon_return(prices, t, k)?;
                let z = (r / (sigma * (k as f64).sqrt())).clamp(-FEATURE_CLAMP, FEATURE_CLAMP);
                features[(t - first_feature) * width + h * n_assets + a] = z;
            }
        }
    }

    let prices = &columns[target];
    let mut panel = StatePanel {
        dates: Vec::with_capacity(n - 1 - first_state),
        states: Vec::with_capacity(n - 1 - first_state),
        target_returns: Vec::with_capacity(n - 1 - first_state),
        labels: None,
    };
    for t in first_state..n - 1 {
        let start = (t + 1 - config.lookback - first_feature) * width;
        let end = (t + 1 - first_feature) * width;
        panel.dates.push(t);
        panel.states.push(Observation::from(&features[start..end]));
        panel.target_returns.push(prices[t + 1] / prices[t] - 1.0);
    }
    Ok(panel)
}
