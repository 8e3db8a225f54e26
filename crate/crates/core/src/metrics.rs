//! Performance statistics of a daily return series. Risk-free rate is zero
//! and annualization uses 252 trading days.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmt::{num, opt};

pub const PERIODS_PER_YEAR: f64 = 252.0;

/// Ratios with a zero denominator are `None` (written as `NaN`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub e_r: f64,
    pub std_r: f64,
    pub dd: f64,
    pub sharpe: Option<f64>,
    pub sortino: Option<f64>,
    pub mdd: f64,
    pub calmar: Option<f64>,
    pub pct_positive: f64,
    /// Mean positive return over the magnitude of the mean negative return.
    pub avg_p_over_avg_l: Option<f64>,
    /// Number of positive days over number of negative days.
    pub pos_neg_count_ratio: Option<f64>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn pop_std(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den > 0.0).then(|| num / den)
}

/// `E_0 = 1`, `E_t = E_{t-1} (1 + r_t)`; the result has one more entry than `returns`.
pub fn equity_curve(returns: &[f64]) -> Result<Vec<f64>> {
    let mut curve = Vec::with_capacity(returns.len() + 1);
    let mut e = 1.0;
    curve.push(e);
    for (index, &r) in returns.iter().enumerate() {
        if !r.is_finite() {
            return Err(Error::Data(format!("non-finite return at index {index}")));
        }
        if r <= -1.0 {
            return Err(Error::BlowUp { index, value: r });
        }
        e *= 1.0 + r;
        curve.push(e);
    }
    Ok(curve)
}

/// Largest fractional fall from a running peak of `curve`.
pub fn max_drawdown(curve: &[f64]) -> f64 {
    let mut peak = f64::NEG_INFINITY;
    let mut worst: f64 = 0.0;
    for &e in curve {
        peak = peak.max(e);
        worst = worst.max(1.0 - e / peak);
    }
    worst
}

pub fn compute_metrics(returns: &[f64]) -> Result<MetricsReport> {
    if returns.len() < 2 {
        return Err(Error::InsufficientData { needed: 2, got: returns.len() });
    }
    let curve = equity_curve(returns)?;
    let positives: Vec<f64> = returns.iter().copied().filter(|&r| r > 0.0).collect();
    let negatives: Vec<f64> = returns.iter().copied().filter(|&r| r < 0.0).collect();
    let e_r = PERIODS_PER_YEAR * mean(returns);
    let std_r = PERIODS_PER_YEAR.sqrt() * pop_std(returns);
    let dd = PERIODS_PER_YEAR.sqrt() * pop_std(&negatives);
    let mdd = max_drawdown(&curve);
    let avg_p_over_avg_l = if positives.is_empty() || negatives.is_empty() {
        None
    } else {
        Some(mean(&positives) / mean(&negatives).abs())
    };
    Ok(MetricsReport {
        e_r,
        std_r,
        dd,
        sharpe: ratio(e_r, std_r),
        sortino: ratio(e_r, dd),
        mdd,
        calmar: ratio(e_r, mdd),
        pct_positive: positives.len() as f64 / returns.len() as f64,
        avg_p_over_avg_l,
        pos_neg_count_ratio: ratio(positives.len() as f64, negatives.len() as f64),
    })
}

pub const CSV_HEADER: &str = "model,variant,E_R,std_R,DD,Sharpe,Sortino,MDD,Calmar,pct_pos,avgP_avgL";

impl MetricsReport {
    pub fn csv_row(&self, model: &str, variant: &str) -> String {
        format!(
            "{model},{variant},{},{},{},{},{},{},{},{},{}",
            num(self.e_r),
            num(self.std_r),
            num(self.dd),
            opt(self.sharpe),
            opt(self.sortino),
            num(self.mdd),
            opt(self.calmar),
            num(self.pct_positive),
            opt(self.avg_p_over_avg_l),
        )
    }

    /// Inverse of [`MetricsReport::csv_row`]; the count ratio is not stored there.
    pub fn parse_csv_row(line: &str) -> Result<(String, String, MetricsReport)> {
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != 11 {
            return Err(Error::Format(format!("expected 11 metrics fields, found {}", fields.len())));
        }
        let f = |i: usize| -> Result<f64> {
            fields[i].parse::<f64>().map_err(|e| Error::Format(format!("field {i}: {e}")))
        };
        let o = |i: usize| -> Result<Option<f64>> { f(i).map(|v| (!v.is_nan()).then_some(v)) };
        let report = MetricsReport {
            e_r: f(2)?,
            std_r: f(3)?,
            dd: f(4)?,
            sharpe: o(5)?,
            sortino: o(6)?,
            mdd: f(7)?,
            calmar: o(8)?,
            pct_positive: f(9)?,
            avg_p_over_avg_l: o(10)?,
            pos_neg_count_ratio: None,
        };
        Ok((fields[0].to_string(), fields[1].to_string(), report))
    }
}

/// Aligned plain-text table, one row per `(model, variant, report)`.
pub fn text_table(rows: &[(String, String, MetricsReport)]) -> String {
    let header = [
        "model", "variant", "E(R)", "Std(R)", "DD", "Sharpe", "Sortino", "MDD", "Calmar", "% +ve", "P/L", "#P/#L",
    ];
    let cell = |x: f64| format!("{x:.3}");
    let ocell = |x: Option<f64>| x.map_or_else(|| "NaN".to_string(), cell);
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(m, v, r)| {
            vec![
                m.clone(),
                v.clone(),
                cell(r.e_r),
                cell(r.std_r),
                cell(r.dd),
                ocell(r.sharpe),
                ocell(r.sortino),
                cell(r.mdd),
                ocell(r.calmar),
                cell(r.pct_positive),
                ocell(r.avg_p_over_avg_l),
                ocell(r.pos_neg_count_ratio),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|c| body.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap())
        .collect();
    let line = |cells: Vec<&str>| {
        let mut s: String = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (v, w))| if c < 2 { format!("{v:<w$}") } else { format!("{v:>w$}") })
            .collect::<Vec<_>>()
            .join("  ");
        s.truncate(s.trim_end().len());
        s.push('\n');
        s
    };
    let mut out = line(header.to_vec());
    for r in &body {
        out += &line(r.iter().map(String::as_str).collect());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_positive_returns() {
        let m = compute_metrics(&[0.01, 0.02, 0.005]).unwrap();
        assert_eq!(m.mdd, 0.0);
        assert_eq!(m.pct_positive, 1.0);
        assert_eq!(m.dd, 0.0);
        assert_eq!(m.sortino, None);
        assert_eq!(m.calmar, None);
        assert_eq!(m.avg_p_over_avg_l, None);
    }

    #[test]
    fn two_step_drawdown() {
        let m = compute_metrics(&[0.10, -0.50]).unwrap();
        assert!((m.mdd - 0.5).abs() < 1e-15);
    }

    #[test]
    fn three_returns_by_hand() {
        let m = compute_metrics(&[0.01, -0.02, 0.03]).unwrap();
        assert!((m.pct_positive - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.avg_p_over_avg_l.unwrap() - 1.0).abs() < 1e-12);
        assert!((m.e_r - 252.0 * 0.02 / 3.0).abs() < 1e-12);
        assert_eq!(m.pos_neg_count_ratio, Some(2.0));
    }

    #[test]
    fn too_few_returns() {
        assert!(matches!(compute_metrics(&[0.1]), Err(Error::InsufficientData { .. })));
    }

    #[test]
    fn equity_cases() {
        assert_eq!(equity_curve(&[0.0, 0.0]).unwrap(), vec![1.0; 3]);
        let e = equity_curve(&[0.1, 0.1]).unwrap();
        assert_eq!(e[0], 1.0);
        assert!((e[1] - 1.1).abs() < 1e-15 && (e[2] - 1.21).abs() < 1e-15);
        assert!(matches!(equity_curve(&[0.1, -1.0]), Err(Error::BlowUp { index: 1, .. })));
    }

    #[test]
    fn drawdown_from_initial_capital() {
        // a first-day loss counts against E_0 = 1
        let m = compute_metrics(&[-0.2, 0.1]).unwrap();
        assert!((m.mdd - 0.2).abs() < 1e-15);
    }

    #[test]
    fn csv_round_trip() {
        let m = compute_metrics(&[0.01, -0.02, 0.03, 0.0, -0.001]).unwrap();
        let row = m.csv_row("dqn", "net");
        let (model, variant, back) = MetricsReport::parse_csv_row(&row).unwrap();
        assert_eq!((model.as_str(), variant.as_str()), ("dqn", "net"));
        for (a, b) in [(m.e_r, back.e_r), (m.sharpe.unwrap(), back.sharpe.unwrap()), (m.mdd, back.mdd)] {
            assert!(((a - b) / a).abs() < 1e-9);
        }
        assert_eq!(CSV_HEADER.split(',').count(), row.split(',').count());
    }

    #[test]
    fn table_is_aligned() {
        let m = compute_metrics(&[0.01, -0.02, 0.03]).unwrap();
        let t = text_table(&[("dqn".into(), "net".into(), m), ("benchmark".into(), "".into(), m)]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1].len(), lines[2].len());
        assert!(lines[0].starts_with("model"));
    }
}
