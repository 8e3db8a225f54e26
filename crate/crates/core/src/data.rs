//! Loading futures price files, aligning them on the target's calendar,
//! and writing experiment reports.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::backtest::ExperimentResult;
use crate::env::Position;
use crate::error::{Error, Result};
use crate::features::{build_state_panel, FeatureConfig, StatePanel};
use crate::fmt::num;
use crate::metrics::{equity_curve, text_table, CSV_HEADER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssetClass {
    EquityIndex,
    FixedIncome,
    Forex,
    Commodity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Contract {
    pub symbol: &'static str,
    pub exchange: &'static str,
    pub name: &'static str,
    pub class: AssetClass,
}

const fn contract(class: AssetClass, exchange: &'static str, symbol: &'static str, name: &'static str) -> Contract {
    Contract { symbol, exchange, name, class }
}

use AssetClass::*;

/// The 25-contract universe.
pub const CONTRACTS: [Contract; 25] = [
    contract(EquityIndex, "CME", "ES", "CME S&P 500 Index E-Mini"),
    contract(EquityIndex, "CME", "MD", "CME S&P 400 Midcap Index"),
    contract(EquityIndex, "CME", "NK", "CME Nikkei 225"),
    contract(EquityIndex, "CME", "NQ", "CME NASDAQ 100 Index Mini"),
    contract(EquityIndex, "CME", "SP", "CME S&P 500 Index"),
    contract(FixedIncome, "CME", "FV", "CBOT 5-year US Treasury Note"),
    contract(FixedIncome, "CME", "TY", "CBOT 10-year US Treasury Note"),
    contract(FixedIncome, "CME", "US", "CBOT 30-year US Treasury Bond"),
    contract(Forex, "CME", "AD", "CME Australian Dollar AUD"),
    contract(Forex, "CME", "BP", "CME British Pound GBP"),
    contract(Forex, "CME", "CD", "CME Canadian Dollar CAD"),
    contract(Forex, "CME", "EC", "CME Euro FX"),
    contract(Forex, "CME", "JY", "CME Japanese Yen JPY"),
    contract(Forex, "CME", "SF", "CME Swiss Franc CHF"),
    contract(Forex, "ICE", "DX", "ICE US Dollar Index"),
    contract(Commodity, "CME", "C", "CBOT Corn"),
    contract(Commodity, "CME", "CL", "NYMEX WTI Crude Oil"),
    contract(Commodity, "CME", "GC", "NYMEX Gold"),
    contract(Commodity, "CME", "HO", "NYMEX Heating Oil"),
    contract(Commodity, "CME", "LC", "CME Live Cattle"),
    contract(Commodity, "CME", "NG", "NYMEX Natural Gas"),
    contract(Commodity, "CME", "S", "CBOT Soybeans"),
    contract(Commodity, "CME", "SI", "NYMEX Silver"),
    contract(Commodity, "CME", "W", "CBOT Wheat"),
    contract(Commodity, "ICE", "SB", "ICE Sugar No. 11"),
];

pub fn lookup_contract(symbol: &str) -> Option<&'static Contract> {
    CONTRACTS.iter().find(|c| c.symbol.eq_ignore_ascii_case(symbol))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContractSeries {
    pub symbol: String,
    /// `None` for symbols outside the built-in universe.
    pub asset_class: Option<AssetClass>,
    pub dates: Vec<NaiveDate>,
    pub prices: Vec<f64>,
}

impl ContractSeries {
    pub fn new(symbol: &str, dates: Vec<NaiveDate>, prices: Vec<f64>) -> Result<Self> {
        if dates.len() != prices.len() {
            return Err(Error::Shape { expected: dates.len(), got: prices.len() });
        }
        if dates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Data(format!("{symbol}: dates must be strictly increasing")));
        }
        if let Some(p) = prices.iter().find(|p| !(**p > 0.0 && p.is_finite())) {
            return Err(Error::Data(format!("{symbol}: price {p} is not positive")));
        }
        Ok(ContractSeries {
            symbol: symbol.to_string(),
            asset_class: lookup_contract(symbol).map(|c| c.class),
            dates,
            prices,
        })
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }
}

/// A row dropped because a later row repeated its date.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DuplicateWarning {
    pub date: NaiveDate,
    pub dropped_line: usize,
    pub kept_line: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedSeries {
    pub series: ContractSeries,
    pub warnings: Vec<DuplicateWarning>,
}

/// Read `date,price` or `date,open,high,low,close` (close is used), sort by
/// date, and keep the last row of any repeated date.
pub fn load_csv(path: &Path, symbol: &str) -> Result<LoadedSeries> {
    let parse_err = |line: usize, message: String| Error::Parse { path: path.to_path_buf(), line, message };
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_ascii_lowercase).collect();
    let column = |name: &str| headers.iter().position(|h| h == name);
    let date_col = column("date").ok_or_else(|| parse_err(1, "missing 'date' column".into()))?;
    let price_col = column("price")
        .or_else(|| column("close"))
        .ok_or_else(|| parse_err(1, "expected a 'price' or 'close' column".into()))?;

    let mut rows: BTreeMap<NaiveDate, (f64, usize)> = BTreeMap::new();
    let mut warnings = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let field = |i: usize| record.get(i).ok_or_else(|| parse_err(line, format!("missing column {}", i + 1)));
        let date_text = field(date_col)?;
        let date = NaiveDate::parse_from_str(date_text, "%Y-%m-%d")
            .map_err(|e| parse_err(line, format!("bad date {date_text:?}: {e}")))?;
        let price_text = field(price_col)?;
        let price: f64 = price_text.parse().map_err(|_| parse_err(line, format!("bad price {price_text:?}")))?;
        if !(price > 0.0 && price.is_finite()) {
            return Err(parse_err(line, format!("price {price_text} is not positive")));
        }
        if let Some((_, old_line)) = rows.insert(date, (price, line)) {
            warnings.push(DuplicateWarning { date, dropped_line: old_line, kept_line: line });
        }
    }
    let dates = rows.keys().copied().collect();
    let prices = rows.values().map(|v| v.0).collect();
    Ok(LoadedSeries { series: ContractSeries::new(symbol, dates, prices)?, warnings })
}

/// Price columns on the target's calendar.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedPanel {
    pub dates: Vec<NaiveDate>,
    pub symbols: Vec<String>,
    pub columns: Vec<Vec<f64>>,
    pub target: usize,
}

impl AlignedPanel {
    pub fn target_symbol(&self) -> &str {
        &self.symbols[self.target]
    }

    pub fn date_labels(&self) -> Vec<String> {
        self.dates.iter().map(|d| d.format("%Y-%m-%d").to_string()).collect()
    }

    /// Features of every column, dated by the calendar.
    pub fn state_panel(&self, features: &FeatureConfig) -> Result<StatePanel> {
        let mut panel = build_state_panel(&self.columns, self.target, features)?;
        panel.attach_price_labels(&self.date_labels())?;
        Ok(panel)
    }
}

/// For every target date, each other symbol takes its latest price on or
/// before that date. Target dates before some symbol's first observation are
/// dropped.
pub fn align_panel(series: &[ContractSeries], target: &str) -> Result<AlignedPanel> {
    let t = series
        .iter()
        .position(|s| s.symbol == target)
        .ok_or_else(|| Error::Alignment(format!("target {target} is not among the loaded series")))?;
    let anchor = &series[t];
    let mut cursors = vec![0usize; series.len()];
    let mut dates = Vec::new();
    let mut columns = vec![Vec::new(); series.len()];
    for (i, &day) in anchor.dates.iter().enumerate() {
        let mut row = Vec::with_capacity(series.len());
        for (s, cursor) in series.iter().zip(cursors.iter_mut()) {
            while *cursor < s.len() && s.dates[*cursor] <= day {
                *cursor += 1;
            }
            if *cursor == 0 {
                break;
            }
            row.push(s.prices[*cursor - 1]);
        }
        if row.len() == series.len() {
            debug_assert_eq!(row[t], anchor.prices[i]);
            dates.push(day);
            for (c, v) in columns.iter_mut().zip(row) {
                c.push(v);
            }
        }
    }
    if dates.is_empty() {
        return Err(Error::Alignment("no target date has prices for every symbol".into()));
    }
    Ok(AlignedPanel { dates, symbols: series.iter().map(|s| s.symbol.clone()).collect(), columns, target: t })
}

fn create(dir: &Path, name: &str, written: &mut Vec<PathBuf>) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    let file = File::create(&path)?;
    written.push(path);
    Ok(BufWriter::new(file))
}

/// Write `metrics.csv`, `metrics.txt`, `equity.csv`, `returns.csv`,
/// `positions.csv`, and `equity.svg` into `dir`; returns the paths written.
pub fn write_reports(result: &ExperimentResult, model: &str, dir: &Path) -> Result<Vec<PathBuf>> {
    if result.is_empty() {
        return Err(Error::Contract("nothing to write: the result has no out-of-sample dates".into()));
    }
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let m = &result.metrics;
    let rows = [
        (model.to_string(), "net".to_string(), m.net),
        (model.to_string(), "gross".to_string(), m.gross),
        ("benchmark".to_string(), "long_only".to_string(), m.benchmark),
    ];

    let mut out = create(dir, "metrics.csv", &mut written)?;
    writeln!(out, "{CSV_HEADER}")?;
    for (model, variant, report) in &rows {
        writeln!(out, "{}", report.csv_row(model, variant))?;
    }
    out.flush()?;

    let mut out = create(dir, "metrics.txt", &mut written)?;
    out.write_all(text_table(&rows).as_bytes())?;
    out.flush()?;

    let net = equity_curve(&result.net)?;
    let gross = equity_curve(&result.gross)?;
    let bench = equity_curve(&result.benchmark)?;
    let mut out = create(dir, "equity.csv", &mut written)?;
    writeln!(out, "date,net,gross,benchmark")?;
    for (i, date) in result.dates.iter().enumerate() {
        writeln!(out, "{date},{},{},{}", num(net[i + 1]), num(gross[i + 1]), num(bench[i + 1]))?;
    }
    out.flush()?;

    let mut out = create(dir, "returns.csv", &mut written)?;
    writeln!(out, "date,net,gross,cost,benchmark")?;
    for (i, date) in result.dates.iter().enumerate() {
        let (n, g, c, b) = (result.net[i], result.gross[i], result.costs[i], result.benchmark[i]);
        writeln!(out, "{date},{},{},{},{}", num(n), num(g), num(c), num(b))?;
    }
    out.flush()?;

    let mut out = create(dir, "positions.csv", &mut written)?;
    writeln!(out, "date,action,cost")?;
    for (i, date) in result.dates.iter().enumerate() {
        writeln!(out, "{date},{},{}", result.positions[i], num(result.costs[i]))?;
    }
    out.flush()?;

    let mut out = create(dir, "equity.svg", &mut written)?;
    let series = [("net", "#1f77b4", &net[..]), ("gross", "#2ca02c", &gross[..]), ("benchmark", "#7f7f7f", &bench[..])];
    out.write_all(equity_svg(&series).as_bytes())?;
    out.flush()?;
    Ok(written)
}

/// Rebuild a result from the `returns.csv` and `positions.csv` of a report directory.
pub fn read_result(dir: &Path) -> Result<ExperimentResult> {
    let returns_path = dir.join("returns.csv");
    let mut dates = Vec::new();
    let (mut gross, mut costs, mut benchmark) = (Vec::new(), Vec::new(), Vec::new());
    let mut reader = csv::Reader::from_path(&returns_path)?;
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let field = |i: usize| -> Result<f64> {
            record.get(i).and_then(|v| v.parse().ok()).ok_or_else(|| Error::Parse {
                path: returns_path.clone(),
                line,
                message: format!("column {} is not a number", i + 1),
            })
        };
        dates.push(record.get(0).unwrap_or_default().to_string());
        gross.push(field(2)?);
        costs.push(field(3)?);
        benchmark.push(field(4)?);
    }
    let positions_path = dir.join("positions.csv");
    let mut positions = Vec::new();
    let mut reader = csv::Reader::from_path(&positions_path)?;
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let bad = |message: String| Error::Parse { path: positions_path.clone(), line, message };
        let value: i8 = record.get(1).and_then(|v| v.parse().ok()).ok_or_else(|| bad("bad action".into()))?;
        positions.push(Position::new(value).map_err(|e| bad(e.to_string()))?);
    }
    ExperimentResult::from_series(dates, gross, costs, benchmark, positions)
}

/// Line chart of equity curves sharing one day axis.
pub fn equity_svg(series: &[(&str, &str, &[f64])]) -> String {
    const W: f64 = 800.0;
    const H: f64 = 450.0;
    const LEFT: f64 = 70.0;
    const RIGHT: f64 = 20.0;
    const TOP: f64 = 20.0;
    const BOTTOM: f64 = 50.0;
    let n = series.iter().map(|s| s.2.len()).max().unwrap_or(0).max(2);
    let (mut lo, mut hi) = series
        .iter()
        .flat_map(|s| s.2.iter().copied())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() || !hi.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        lo -= 0.5;
        hi += 0.5;
    }
    let x = |i: usize| LEFT + (W - LEFT - RIGHT) * i as f64 / (n - 1) as f64;
    let y = |v: f64| TOP + (H - TOP - BOTTOM) * (hi - v) / (hi - lo);
    let mut s = String::new();
    s += &format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n");
    s += &format!("<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n");
    s += &format!(
        "<line x1=\"{LEFT}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n<line x1=\"{LEFT}\" y1=\"{TOP}\" x2=\"{LEFT}\" y2=\"{b}\" stroke=\"black\"/>\n",
        b = H - BOTTOM,
        r = W - RIGHT
    );
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        s += &format!("<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v:.3}</text>\n", LEFT - 6.0, y(v) + 4.0);
    }
    s += &format!("<text x=\"{LEFT}\" y=\"{:.1}\" text-anchor=\"middle\">0</text>\n", H - BOTTOM + 16.0);
    s += &format!("<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n", W - RIGHT, H - BOTTOM + 16.0, n - 1);
    s += &format!("<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">trading day</text>\n", (LEFT + W - RIGHT) / 2.0, H - 12.0);
    s += &format!("<text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">equity</text>\n", H / 2.0, H / 2.0);
    for (k, (name, color, values)) in series.iter().enumerate() {
        let points: Vec<String> = values.iter().enumerate().map(|(i, v)| format!("{:.2},{:.2}", x(i), y(*v))).collect();
        s += &format!("<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n", points.join(" "));
        let ly = TOP + 12.0 + 16.0 * k as f64;
        s += &format!("<line x1=\"{:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>\n", LEFT + 12.0, LEFT + 32.0);
        s += &format!("<text x=\"{:.1}\" y=\"{:.1}\">{name}</text>\n", LEFT + 38.0, ly + 4.0);
    }
    s += "</svg>\n";
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    fn file(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn universe_has_25_contracts() {
        assert_eq!(CONTRACTS.len(), 25);
        assert_eq!(lookup_contract("es").unwrap().class, EquityIndex);
        assert_eq!(CONTRACTS.iter().filter(|c| c.class == Forex).count(), 7);
        assert_eq!(CONTRACTS.iter().filter(|c| c.class == Commodity).count(), 10);
        assert!(lookup_contract("XX").is_none());
    }

    #[test]
    fn two_rows() {
        let f = file("date,price\n2020-01-02,100\n2020-01-03,101\n");
        let s = load_csv(f.path(), "ES").unwrap().series;
        assert_eq!(s.len(), 2);
        assert_eq!(s.prices, vec![100.0, 101.0]);
        assert_eq!(s.asset_class, Some(EquityIndex));
    }

    #[test]
    fn unsorted_and_ohlc() {
        let f = file("date,open,high,low,close\n2020-01-03,1,1,1,5\n2020-01-01,1,1,1,3\n2020-01-02,1,1,1,4\n");
        let s = load_csv(f.path(), "CL").unwrap().series;
        assert_eq!(s.dates, vec![d("2020-01-01"), d("2020-01-02"), d("2020-01-03")]);
        assert_eq!(s.prices, vec![3.0, 4.0, 5.0]);
    }

    #[test]
    fn duplicate_keeps_last() {
        let f = file("date,price\n2020-01-01,1\n2020-01-02,2\n2020-01-01,9\n");
        let loaded = load_csv(f.path(), "ES").unwrap();
        assert_eq!(loaded.series.prices, vec![9.0, 2.0]);
        assert_eq!(loaded.warnings, vec![DuplicateWarning { date: d("2020-01-01"), dropped_line: 2, kept_line: 4 }]);
    }

    #[test]
    fn negative_price_names_the_line() {
        let f = file("date,price\n2020-01-01,1\n2020-01-02,-5\n");
        match load_csv(f.path(), "ES") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let f = file("date,price\n2020-01-01,abc\n");
        assert!(matches!(load_csv(f.path(), "ES"), Err(Error::Parse { line: 2, .. })));
        let f = file("date,price\n01/02/2020,1\n");
        assert!(matches!(load_csv(f.path(), "ES"), Err(Error::Parse { line: 2, .. })));
    }

    fn series(sym: &str, rows: &[(&str, f64)]) -> ContractSeries {
        ContractSeries::new(sym, rows.iter().map(|r| d(r.0)).collect(), rows.iter().map(|r| r.1).collect()).unwrap()
    }

    #[test]
    fn single_series_alignment_is_identity() {
        let es = series("ES", &[("2020-01-01", 1.0), ("2020-01-02", 2.0)]);
        let p = align_panel(std::slice::from_ref(&es), "ES").unwrap();
        assert_eq!(p.dates, es.dates);
        assert_eq!(p.columns[0], es.prices);
    }

    #[test]
    fn forward_fill_and_drop() {
        let es = series("ES", &[("2020-01-01", 1.0), ("2020-01-02", 2.0), ("2020-01-03", 3.0), ("2020-01-06", 4.0)]);
        let ty = series("TY", &[("2020-01-02", 20.0), ("2020-01-06", 40.0)]);
        let p = align_panel(&[ty, es], "ES").unwrap();
        assert_eq!(p.target, 1);
        assert_eq!(p.dates, vec![d("2020-01-02"), d("2020-01-03"), d("2020-01-06")]);
        assert_eq!(p.columns[0], vec![20.0, 20.0, 40.0]);
        assert_eq!(p.columns[1], vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn disjoint_series_fail_to_align() {
        let es = series("ES", &[("2020-01-01", 1.0)]);
        let ty = series("TY", &[("2021-01-01", 1.0)]);
        assert!(matches!(align_panel(&[es.clone(), ty], "ES"), Err(Error::Alignment(_))));
        assert!(matches!(align_panel(&[es], "NQ"), Err(Error::Alignment(_))));
    }

    #[test]
    fn svg_has_legend_and_axes() {
        let svg = equity_svg(&[("net", "#000", &[1.0, 1.1, 1.05]), ("benchmark", "#777", &[1.0, 1.0, 1.2])]);
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("trading day") && svg.contains(">equity<"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains(">benchmark<"));
    }
}
