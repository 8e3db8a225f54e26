//! Price-path simulators: geometric Brownian motion, variance gamma, and a
//! three-state up/no/down regime-switching chain, plus moment calibration
//! of both processes from observed prices.
//!
//! Paths are built from per-day increments of the log price, so a path is
//! Markov day by day. For a single step the increments reduce to the usual
//! closed forms:
//!
//! * GBM: `ln(S_t/S_0) = (mu - sigma^2/2) t + sigma sqrt(t) z`
//! * VG:  `ln(S_t/S_0) = (mu + omega) t + theta g + sigma sqrt(g) z`, with
//!   `g ~ Gamma(shape = t/nu, scale = nu)` and
//!   `omega = ln(1 - theta nu - sigma^2 nu / 2) / nu`.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, RawMoments, Result};
use crate::fmt::num;
use crate::rng::{gamma_unit, standard_normal};

/// One trading day in years.
pub const TRADING_DAY: f64 = 1.0 / 252.0;

/// Common starting price of every regime fit.
pub const TABLE_S0: f64 = 1051.344;

/// Smallest clock variance rate handed out by [`calibrate_vg`]; it marks the
/// Brownian limit when the sample shows no excess kurtosis.
pub const NU_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Up,
    No,
    Down,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Up, Regime::No, Regime::Down];

    pub fn index(self) -> usize {
        match self {
            Regime::Up => 0,
            Regime::No => 1,
            Regime::Down => 2,
        }
    }

    pub fn tag(self) -> char {
        match self {
            Regime::Up => 'U',
            Regime::No => 'N',
            Regime::Down => 'D',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GbmParams {
    pub mu: f64,
    pub sigma: f64,
    pub s0: f64,
}

impl GbmParams {
    pub fn new(mu: f64, sigma: f64, s0: f64) -> Result<Self> {
        let p = GbmParams { mu, sigma, s0 };
        p.validate()?;
        Ok(p)
    }

    /// Annualized fits for the three trend regimes.
    pub fn for_regime(regime: Regime) -> Self {
        let (mu, sigma) = match regime {
            Regime::Up => (0.254, 0.109),
            Regime::No => (0.016, 0.158),
            Regime::Down => (-0.440, 0.441),
        };
        GbmParams { mu, sigma, s0: TABLE_S0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.mu.is_finite() {
            return Err(Error::InvalidParameter(format!("mu must be finite, got {}", self.mu)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "sigma must be non-negative, got {}",
                self.sigma
            )));
        }
        if !(self.s0 > 0.0 && self.s0.is_finite()) {
            return Err(Error::InvalidParameter(format!("s0 must be positive, got {}", self.s0)));
        }
        Ok(())
    }

    #[inline]
    fn log_increment<R: Rng + ?Sized>(&self, dt: f64, rng: &mut R) -> f64 {
        (self.mu - 0.5 * self.sigma * self.sigma) * dt + self.sigma * dt.sqrt() * standard_normal(rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VgParams {
    pub mu: f64,
    pub sigma: f64,
    pub theta: f64,
    pub nu: f64,
    pub s0: f64,
}

impl VgParams {
    pub fn new(mu: f64, sigma: f64, theta: f64, nu: f64, s0: f64) -> Result<Self> {
        let p = VgParams { mu, sigma, theta, nu, s0 };
        p.validate()?;
        Ok(p)
    }

    pub fn for_regime(regime: Regime) -> Self {
        let (mu, sigma, theta, nu) = match regime {
            Regime::Up => (0.254, 0.109, -0.742, 3.93e-4),
            Regime::No => (0.016, 0.158, -0.287, 2.44e-4),
            Regime::Down => (-0.440, 0.441, -0.410, 2.74e-4),
        };
        VgParams { mu, sigma, theta, nu, s0: TABLE_S0 }
    }

    /// `1 - theta nu - sigma^2 nu / 2`, which must stay positive.
    pub fn omega_argument(&self) -> f64 {
        1.0 - self.theta * self.nu - 0.5 * self.sigma * self.sigma * self.nu
    }

    /// Drift correction `ln(1 - theta nu - sigma^2 nu / 2) / nu`.
    pub fn omega(&self) -> Result<f64> {
        let arg = self.omega_argument();
        if !(arg > 0.0) {
            return Err(Error::OmegaUndefined { arg });
        }
        Ok((-self.theta * self.nu - 0.5 * self.sigma * self.sigma * self.nu).ln_1p() / self.nu)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu.is_finite() && self.theta.is_finite()) {
            return Err(Error::InvalidParameter("mu and theta must be finite".into()));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "sigma must be non-negative, got {}",
                self.sigma
            )));
        }
        if !(self.nu > 0.0 && self.nu.is_finite()) {
            return Err(Error::InvalidParameter(format!("nu must be positive, got {}", self.nu)));
        }
        if !(self.s0 > 0.0 && self.s0.is_finite()) {
            return Err(Error::InvalidParameter(format!("s0 must be positive, got {}", self.s0)));
        }
        self.omega().map(|_| ())
    }
}

/// VG parameters with the drift correction resolved once.
#[derive(Debug, Clone, Copy)]
struct VgStepper {
    drift: f64,
    theta: f64,
    sigma: f64,
    nu: f64,
}

impl VgStepper {
    fn new(p: &VgParams) -> Result<Self> {
        p.validate()?;
        Ok(VgStepper { drift: p.mu + p.omega()?, theta: p.theta, sigma: p.sigma, nu: p.nu })
    }

    #[inline]
    fn log_increment<R: Rng + ?Sized>(&self, dt: f64, rng: &mut R) -> f64 {
        let g = gamma_unit(dt / self.nu, rng) * self.nu;
        self.drift * dt + self.theta * g + self.sigma * g.sqrt() * standard_normal(rng)
    }
}

/// Process used inside one regime.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "process", rename_all = "lowercase")]
pub enum ProcessParams {
    Gbm(GbmParams),
    Vg(VgParams),
}

impl ProcessParams {
    pub fn s0(&self) -> f64 {
        match self {
            ProcessParams::Gbm(p) => p.s0,
            ProcessParams::Vg(p) => p.s0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ProcessParams::Gbm(p) => p.validate(),
            ProcessParams::Vg(p) => p.validate(),
        }
    }
}

enum Stepper {
    Gbm(GbmParams),
    Vg(VgStepper),
}

impl Stepper {
    fn new(p: &ProcessParams) -> Result<Self> {
        Ok(match p {
            ProcessParams::Gbm(g) => {
                g.validate()?;
                Stepper::Gbm(*g)
            }
            ProcessParams::Vg(v) => Stepper::Vg(VgStepper::new(v)?),
        })
    }

    #[inline]
    fn log_increment<R: Rng + ?Sized>(&self, dt: f64, rng: &mut R) -> f64 {
        match self {
            Stepper::Gbm(g) => g.log_increment(dt, rng),
            Stepper::Vg(v) => v.log_increment(dt, rng),
        }
    }
}

/// Three-state trend chain. Up and down only ever move to "no trend";
/// "no trend" splits its exit probability evenly between up and down.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeModel {
    /// Process parameters indexed by [`Regime::index`].
    pub regimes: [ProcessParams; 3],
    /// Daily self-transition probabilities, same indexing.
    pub self_probs: [f64; 3],
    pub initial_regime: Regime,
}

impl RegimeModel {
    pub fn gbm_default() -> Self {
        RegimeModel {
            regimes: Regime::ALL.map(|r| ProcessParams::Gbm(GbmParams::for_regime(r))),
            self_probs: [0.95, 0.90, 0.95],
            initial_regime: Regime::No,
        }
    }

    pub fn vg_default() -> Self {
        RegimeModel {
            regimes: Regime::ALL.map(|r| ProcessParams::Vg(VgParams::for_regime(r))),
            self_probs: [0.95, 0.90, 0.95],
            initial_regime: Regime::No,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.self_probs.iter().enumerate() {
            if !(0.0..=1.0).contains(p) {
                return Err(Error::InvalidParameter(format!(
                    "self_probs[{i}] = {p} is outside [0, 1]"
                )));
            }
        }
        for r in &self.regimes {
            r.validate()?;
        }
        Ok(())
    }

    /// Row-stochastic transition matrix, rows and columns in up/no/down order.
    pub fn transition_matrix(&self) -> [[f64; 3]; 3] {
        let [pu, pn, pd] = self.self_probs;
        [
            [pu, 1.0 - pu, 0.0],
            [0.5 * (1.0 - pn), pn, 0.5 * (1.0 - pn)],
            [0.0, 1.0 - pd, pd],
        ]
    }

    fn next_regime<R: Rng + ?Sized>(&self, current: Regime, rng: &mut R) -> Regime {
        let row = self.transition_matrix()[current.index()];
        let u: f64 = rng.random();
        if u < row[0] {
            Regime::Up
        } else if u < row[0] + row[1] {
            Regime::No
        } else {
            Regime::Down
        }
    }
}

/// Daily price series, optionally tagged with the regime active each day.
#[derive(Debug, Clone, PartialEq)]
pub struct PricePath {
    pub prices: Vec<f64>,
    pub regime_labels: Option<Vec<Regime>>,
    /// Day length in years.
    pub dt: f64,
}

impl PricePath {
    pub fn new(prices: Vec<f64>, dt: f64) -> Result<Self> {
        if prices.len() < 2 {
            return Err(Error::InsufficientData { needed: 2, got: prices.len() });
        }
        if !(dt > 0.0) {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        if let Some(i) = prices.iter().position(|p| !(p.is_finite() && *p > 0.0)) {
            return Err(Error::Data(format!("price {} at index {i} is not positive", prices[i])));
        }
        Ok(PricePath { prices, regime_labels: None, dt })
    }

    pub fn len(&self) -> usize {
        self.prices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prices.is_empty()
    }

    pub fn log_returns(&self) -> Vec<f64> {
        self.prices.windows(2).map(|w| (w[1] / w[0]).ln()).collect()
    }

    /// Writes `date_index,price,regime` rows; regime is `U`, `N`, `D`, or `-`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "date_index,price,regime")?;
        for (i, p) in self.prices.iter().enumerate() {
            let tag = self
                .regime_labels
                .as_ref()
                .map_or('-', |labels| labels[i].tag());
            writeln!(out, "{i},{},{tag}", num(*p))?;
        }
        Ok(())
    }
}

fn check_steps(n_steps: usize, dt: f64) -> Result<()> {
    if n_steps == 0 {
        return Err(Error::InvalidParameter("n_steps must be at least 1".into()));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
    }
    Ok(())
}

fn integrate(s0: f64, n_steps: usize, mut step: impl FnMut() -> f64) -> Vec<f64> {
    let mut prices = Vec::with_capacity(n_steps + 1);
    prices.push(s0);
    let mut log_level = 0.0;
    for _ in 0..n_steps {
        log_level += step();
        prices.push(s0 * log_level.exp());
    }
    prices
}

pub fn gbm_path<R: Rng + ?Sized>(
    params: &GbmParams,
    n_steps: usize,
    dt: f64,
    rng: &mut R,
) -> Result<PricePath> {
    params.validate()?;
    check_steps(n_steps, dt)?;
    let prices = integrate(params.s0, n_steps, || params.log_increment(dt, rng));
    Ok(PricePath { prices, regime_labels: None, dt })
}

pub fn vg_path<R: Rng + ?Sized>(
    params: &VgParams,
    n_steps: usize,
    dt: f64,
    rng: &mut R,
) -> Result<PricePath> {
    let stepper = VgStepper::new(params)?;
    check_steps(n_steps, dt)?;
    let prices = integrate(params.s0, n_steps, || stepper.log_increment(dt, rng));
    Ok(PricePath { prices, regime_labels: None, dt })
}

/// Each day first draws the next regime from the current regime's row, then
/// one increment from that regime's process. The path starts at the initial
/// regime's `s0`.
pub fn regime_path<R: Rng + ?Sized>(
    model: &RegimeModel,
    n_steps: usize,
    dt: f64,
    rng: &mut R,
) -> Result<PricePath> {
    model.validate()?;
    check_steps(n_steps, dt)?;
    let steppers = [
        Stepper::new(&model.regimes[0])?,
        Stepper::new(&model.regimes[1])?,
        Stepper::new(&model.regimes[2])?,
    ];
    let mut labels = Vec::with_capacity(n_steps + 1);
    let mut current = model.initial_regime;
    labels.push(current);
    let prices = integrate(model.regimes[current.index()].s0(), n_steps, || {
        current = model.next_regime(current, rng);
        labels.push(current);
        steppers[current.index()].log_increment(dt, rng)
    });
    Ok(PricePath { prices, regime_labels: Some(labels), dt })
}

/// Simulator selection used by the experiment runners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SimSource {
    Single { params: ProcessParams },
    Switching { model: RegimeModel },
}

impl SimSource {
    pub fn path<R: Rng + ?Sized>(&self, n_steps: usize, dt: f64, rng: &mut R) -> Result<PricePath> {
        match self {
            SimSource::Single { params: ProcessParams::Gbm(p) } => gbm_path(p, n_steps, dt, rng),
            SimSource::Single { params: ProcessParams::Vg(p) } => vg_path(p, n_steps, dt, rng),
            SimSource::Switching { model } => regime_path(model, n_steps, dt, rng),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            SimSource::Single { params } => params.validate(),
            SimSource::Switching { model } => model.validate(),
        }
    }
}

/// Sample moments (population normalization) of a series.
pub fn raw_moments(xs: &[f64]) -> RawMoments {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for x in xs {
        let d = x - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    let (skewness, excess_kurtosis) = if m2 > 0.0 {
        (m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0)
    } else {
        (0.0, 0.0)
    };
    RawMoments { mean, variance: m2, skewness, excess_kurtosis, count: xs.len() }
}

fn sample_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// `sigma = std(log r) / sqrt(dt)` (sample std), `mu = mean(log r) / dt + sigma^2 / 2`.
pub fn calibrate_gbm(path: &PricePath) -> Result<GbmParams> {
    if path.len() < 30 {
        return Err(Error::InsufficientData { needed: 30, got: path.len() });
    }
    let r = path.log_returns();
    let mean = r.iter().sum::<f64>() / r.len() as f64;
    let sigma = sample_std(&r) / path.dt.sqrt();
    Ok(GbmParams { mu: mean / path.dt + 0.5 * sigma * sigma, sigma, s0: path.prices[0] })
}

/// Method-of-moments VG fit on daily log returns.
///
/// Over one step of length `dt` the VG increment has
///
/// * variance        `(sigma^2 + theta^2 nu) dt`
/// * skewness        `~ 3 theta nu / (sigma sqrt(dt))`
/// * excess kurtosis `~ 3 nu / dt`
///
/// where skewness and kurtosis keep only the leading term in `theta`. These
/// are inverted in closed form: `nu` from kurtosis, `theta` from skewness,
/// `sigma` from the variance, and `mu` from the mean net of `theta` and
/// `omega`.
///
/// Sampling noise is gated at three standard errors: insignificant excess
/// kurtosis gives the Brownian limit (`nu = NU_FLOOR`, `theta = 0`) and
/// insignificant skewness gives `theta = 0`. Kurtosis significantly below
/// zero cannot come from a VG law and is reported as a failure.
pub fn calibrate_vg(path: &PricePath) -> Result<VgParams> {
    if path.len() < 250 {
        return Err(Error::InsufficientData { needed: 250, got: path.len() });
    }
    let dt = path.dt;
    let r = path.log_returns();
    let m = raw_moments(&r);
    let n = m.count as f64;
    let se_skew = (6.0 / n).sqrt();
    let se_kurt = (24.0 / n).sqrt();
    let fail = |reason: String| Error::CalibrationFailed { reason, moments: m };

    if m.excess_kurtosis < -3.0 * se_kurt {
        return Err(fail(format!(
            "negative implied nu (excess kurtosis {:.4})",
            m.excess_kurtosis
        )));
    }
    let nu_raw = m.excess_kurtosis.max(0.0) * dt / 3.0;
    let (nu, theta) = if m.excess_kurtosis < 3.0 * se_kurt || nu_raw <= 0.0 {
        (nu_raw.max(NU_FLOOR), 0.0)
    } else if m.skewness.abs() < 3.0 * se_skew {
        (nu_raw, 0.0)
    } else {
        (nu_raw, m.skewness * m.variance.sqrt() / (3.0 * nu_raw))
    };
    let sigma2 = m.variance / dt - theta * theta * nu;
    if !(sigma2 >= 0.0) {
        return Err(fail(format!("implied sigma^2 = {sigma2} is negative")));
    }
    let mut params = VgParams { mu: 0.0, sigma: sigma2.sqrt(), theta, nu, s0: path.prices[0] };
    let omega = params
        .omega()
        .map_err(|_| fail(format!("infeasible omega argument {}", params.omega_argument())))?;
    params.mu = m.mean / dt - theta - omega;
    Ok(params)
}
