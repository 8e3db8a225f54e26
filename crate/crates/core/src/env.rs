//! Single-asset trading MDP over a [`StatePanel`].
//!
//! The action is the target position held from `t` to `t + 1`. Its reward
//! is `position * (p_{t+1} / p_t - 1)` less the cost of moving from the
//! previous position: `proportional * |new - old| + fixed * [new != old]`.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Observation, StatePanel};
use crate::fmt::num;

/// Position in `{-1, 0, +1}`; network action indices 0, 1, 2 map to
/// short, flat, long.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct Position(i8);

impl Position {
    pub const SHORT: Position = Position(-1);
    pub const FLAT: Position = Position(0);
    pub const LONG: Position = Position(1);
    pub const ALL: [Position; 3] = [Position::SHORT, Position::FLAT, Position::LONG];

    pub fn new(value: i8) -> Result<Self> {
        match value {
            -1..=1 => Ok(Position(value)),
            other => Err(Error::Domain(other)),
        }
    }

    pub fn from_index(index: usize) -> Self {
        debug_assert!(index < 3);
        Position(index as i8 - 1)
    }

    pub fn index(self) -> usize {
        (self.0 + 1) as usize
    }

    pub fn value(self) -> i8 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        f64::from(self.0)
    }
}

impl TryFrom<i8> for Position {
    type Error = Error;

    fn try_from(value: i8) -> Result<Self> {
        Position::new(value)
    }
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Transaction costs as fractions of notional. The defaults are
/// placeholders: no published values exist for the original setup.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostModel {
    /// Charged per unit of turnover `|new - old|`.
    pub proportional: f64,
    /// Charged once per position change.
    pub fixed: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel { proportional: 1e-4, fixed: 0.0 }
    }
}

impl CostModel {
    pub const ZERO: CostModel = CostModel { proportional: 0.0, fixed: 0.0 };

    pub fn validate(&self) -> Result<()> {
        if !(self.proportional >= 0.0 && self.fixed >= 0.0) {
            return Err(Error::Config("costs must be non-negative".into()));
        }
        Ok(())
    }

    pub fn cost(&self, from: Position, to: Position) -> f64 {
        if from == to {
            return 0.0;
        }
        let turnover = f64::from((to.0 - from.0).abs());
        self.proportional * turnover + self.fixed
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub gross: f64,
    pub cost: f64,
    pub position: Position,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_state: Observation,
    /// `info.gross - info.cost`.
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// One row of the optional per-step trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub date: String,
    pub action: Position,
    pub gross: f64,
    pub cost: f64,
    pub net: f64,
}

#[derive(Debug, Clone)]
pub struct TradingEnv<'a> {
    panel: &'a StatePanel,
    costs: CostModel,
    t: usize,
    position: Position,
    done: bool,
    trace: Option<Vec<TraceRecord>>,
}

impl<'a> TradingEnv<'a> {
    pub fn new(panel: &'a StatePanel, costs: CostModel) -> Self {
        TradingEnv { panel, costs, t: 0, position: Position::FLAT, done: true, trace: None }
    }

    /// Record every step for [`TradingEnv::write_trace`].
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    /// Flat position at `start`; the episode ends at the last panel date.
    pub fn reset(&mut self, start: usize) -> Result<Observation> {
        if start + 1 >= self.panel.len() {
            return Err(Error::Range(format!(
                "episode start {start} needs a successor in a panel of {} dates",
                self.panel.len()
            )));
        }
        self.t = start;
        self.position = Position::FLAT;
        self.done = false;
        Ok(self.panel.states[start].clone())
    }

    pub fn step(&mut self, action: Position) -> Result<StepResult> {
        if self.done {
            return Err(Error::Contract("step called on a finished episode".into()));
        }
        let gross = action.as_f64() * self.panel.target_returns[self.t];
        let cost = self.costs.cost(self.position, action);
        let reward = gross - cost;
        if let Some(trace) = &mut self.trace {
            trace.push(TraceRecord { date: self.panel.label(self.t), action, gross, cost, net: reward });
        }
        self.position = action;
        self.t += 1;
        self.done = self.t + 1 >= self.panel.len();
        Ok(StepResult {
            next_state: self.panel.states[self.t].clone(),
            reward,
            done: self.done,
            info: StepInfo { gross, cost, position: action },
        })
    }

    pub fn position(&self) -> Position {
        self.position
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn observation(&self) -> Observation {
        self.panel.states[self.t].clone()
    }

    pub fn trace(&self) -> Option<&[TraceRecord]> {
        self.trace.as_deref()
    }

    /// `date,action,gross,cost,net` rows of the recorded trace.
    pub fn write_trace<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "date,action,gross,cost,net")?;
        for r in self.trace.iter().flatten() {
            writeln!(out, "{},{},{},{},{}", r.date, r.action, num(r.gross), num(r.cost), num(r.net))?;
        }
        Ok(())
    }
}

/// Compounded return `prod(1 + r) - 1`.
pub fn episode_return(rewards: &[f64]) -> f64 {
    rewards.iter().fold(1.0, |acc, r| acc * (1.0 + r)) - 1.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn panel(prices: &[f64]) -> StatePanel {
        let states = (0..prices.len()).map(|i| vec![i as f64]).collect();
        let mut targets: Vec<f64> = prices.windows(2).map(|w| w[1] / w[0] - 1.0).collect();
        targets.push(0.0);
        StatePanel::from_parts(states, targets).unwrap()
    }

    #[test]
    fn position_encoding() {
        assert_eq!(Position::from_index(0), Position::SHORT);
        assert_eq!(Position::from_index(2).value(), 1);
        assert_eq!(Position::LONG.index(), 2);
        assert!(matches!(Position::new(2), Err(Error::Domain(2))));
    }

    #[test]
    fn flat_step_after_reset_earns_nothing() {
        let p = panel(&[100.0, 101.0, 99.0]);
        let mut env = TradingEnv::new(&p, CostModel::default());
        let obs = env.reset(0).unwrap();
        assert_eq!(obs, env.reset(0).unwrap());
        let step = env.step(Position::FLAT).unwrap();
        assert_eq!(step.reward, 0.0);
        assert_eq!(step.info.cost, 0.0);
    }

    #[test]
    fn reset_requires_a_successor() {
        let p = panel(&[100.0, 101.0, 99.0]);
        let mut env = TradingEnv::new(&p, CostModel::ZERO);
        assert!(matches!(env.reset(2), Err(Error::Range(_))));
        assert!(env.reset(1).is_ok());
    }

    #[test]
    fn long_and_short_rewards() {
        let p = panel(&[100.0, 101.0, 102.0]);
        let mut env = TradingEnv::new(&p, CostModel::ZERO);
        env.reset(0).unwrap();
        assert!((env.step(Position::LONG).unwrap().reward - 0.01).abs() < 1e-15);
        env.reset(0).unwrap();
        assert!((env.step(Position::SHORT).unwrap().reward + 0.01).abs() < 1e-15);
    }

    #[test]
    fn turnover_costs() {
        let p = panel(&[100.0, 100.0, 100.0]);
        let costs = CostModel { proportional: 0.0001, fixed: 0.0 };
        let mut env = TradingEnv::new(&p, costs);
        env.reset(0).unwrap();
        let a = env.step(Position::LONG).unwrap();
        assert!((a.info.cost - 0.0001).abs() < 1e-18);
        let b = env.step(Position::SHORT).unwrap();
        assert!((b.info.cost - 0.0002).abs() < 1e-18);
        assert!(b.done);
        assert!(matches!(env.step(Position::FLAT), Err(Error::Contract(_))));

        let fixed = CostModel { proportional: 0.0, fixed: 0.5 };
        assert_eq!(fixed.cost(Position::LONG, Position::SHORT), 0.5);
        assert_eq!(fixed.cost(Position::LONG, Position::LONG), 0.0);
    }

    #[test]
    fn episode_returns() {
        assert_eq!(episode_return(&[0.0, 0.0, 0.0]), 0.0);
        assert!((episode_return(&[0.01, 0.01]) - 0.0201).abs() < 1e-15);
        assert!(episode_return(&[1.0, -0.5]).abs() < 1e-15);
    }

    #[test]
    fn trace_rows() {
        let p = panel(&[100.0, 101.0, 100.0]);
        let mut env = TradingEnv::new(&p, CostModel::default()).with_trace();
        env.reset(0).unwrap();
        env.step(Position::LONG).unwrap();
        env.step(Position::LONG).unwrap();
        let mut buf = Vec::new();
        env.write_trace(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().nth(2).unwrap().starts_with("1,1,"));
    }

    fn walk(prices: &[f64], actions: &[i8], costs: CostModel) -> Vec<StepResult> {
        let p = panel(prices);
        let mut env = TradingEnv::new(&p, costs);
        env.reset(0).unwrap();
        actions
            .iter()
            .take(prices.len() - 1)
            .map(|&a| env.step(Position::new(a).unwrap()).unwrap())
            .collect()
    }

    proptest! {
        #[test]
        fn net_is_gross_minus_cost(
            rets in prop::collection::vec(-0.05f64..0.05, 2..40),
            actions in prop::collection::vec(-1i8..=1, 40),
            prop_c in 0.0f64..0.01,
            fixed in 0.0f64..0.01,
        ) {
            let mut prices = vec![100.0];
            for r in &rets { prices.push(prices.last().unwrap() * (1.0 + r)); }
            let steps = walk(&prices, &actions, CostModel { proportional: prop_c, fixed });
            let (mut net, mut gross, mut cost) = (0.0, 0.0, 0.0);
            let mut prev = 0i8;
            for (s, &a) in steps.iter().zip(&actions) {
                prop_assert_eq!(s.reward, s.info.gross - s.info.cost);
                if a == prev { prop_assert_eq!(s.info.cost, 0.0); }
                prev = a;
                net += s.reward; gross += s.info.gross; cost += s.info.cost;
            }
            prop_assert!((net - (gross - cost)).abs() < 1e-12);
        }

        #[test]
        fn zero_cost_rewards_are_sign_symmetric(
            rets in prop::collection::vec(-0.05f64..0.05, 2..30),
            actions in prop::collection::vec(-1i8..=1, 30),
        ) {
            let mut prices = vec![50.0];
            for r in &rets { prices.push(prices.last().unwrap() * (1.0 + r)); }
            let flipped: Vec<i8> = actions.iter().map(|a| -a).collect();
            let a = walk(&prices, &actions, CostModel::ZERO);
            let b = walk(&prices, &flipped, CostModel::ZERO);
            for (x, y) in a.iter().zip(&b) {
                prop_assert_eq!(x.reward, -y.reward);
            }
            let long = walk(&prices, &[1; 30], CostModel::ZERO);
            for (s, w) in long.iter().zip(prices.windows(2)) {
                prop_assert_eq!(s.reward, w[1] / w[0] - 1.0);
            }
        }
    }
}
