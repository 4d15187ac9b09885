//! Table and figure emitters (CSV, Markdown, SVG).

use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;
use crate::persist::{self, CsvOut};
use crate::portfolio::{BacktestResult, CovSource, ReturnSource};
use crate::stats::{CoefficientRow, DescriptiveRow, DeterminantRow, Histogram};

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Text(String),
    Num(f64),
    Int(usize),
}

impl Cell {
    fn csv(&self) -> String {
        match self {
            Cell::Text(s) => s.clone(),
            Cell::Num(v) => persist::fmt_f64(*v),
            Cell::Int(k) => k.to_string(),
        }
    }

    fn markdown(&self) -> String {
        match self {
            Cell::Text(s) => s.clone(),
            Cell::Int(k) => k.to_string(),
            Cell::Num(v) if *v != 0.0 && v.is_finite() && (v.abs() < 1e-3 || v.abs() >= 1e6) => format!("{v:.3e}"),
            Cell::Num(v) => format!("{v:.4}"),
        }
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.to_string())
    }
}

impl From<String> for Cell {
    fn from(s: String) -> Self {
        Cell::Text(s)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<usize> for Cell {
    fn from(k: usize) -> Self {
        Cell::Int(k)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub title: String,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(title: &str, headers: &[&str]) -> Self {
        Self {
            title: title.to_string(),
            headers: headers.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.headers.len());
        self.rows.push(row);
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        if !self.title.is_empty() {
            let _ = writeln!(s, "### {}\n", self.title);
        }
        let _ = writeln!(s, "| {} |", self.headers.join(" | "));
        let _ = writeln!(s, "|{}|", vec!["---"; self.headers.len()].join("|"));
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(Cell::markdown).collect();
            let _ = writeln!(s, "| {} |", cells.join(" | "));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let headers: Vec<&str> = self.headers.iter().map(String::as_str).collect();
        let mut out = CsvOut::create(path, &headers)?;
        for row in &self.rows {
            out.row(row.iter().map(Cell::csv))?;
        }
        out.finish()
    }

    /// Write `<stem>.csv` and `<stem>.md` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        self.write_csv(&dir.join(format!("{stem}.csv")))?;
        persist::write_text(&dir.join(format!("{stem}.md")), &self.to_markdown())
    }
}

/// Statistics as rows, one column per determinant series.
pub fn table1(columns: &[(&str, DescriptiveRow)], excluded_days: usize) -> Table {
    let mut headers = vec!["statistic"];
    headers.extend(columns.iter().map(|(name, _)| *name));
    let mut t = Table::new(
        &format!("Descriptive statistics of portfolio liquidity determinants ({excluded_days} degenerate days excluded)"),
        &headers,
    );
    type Getter = fn(&DescriptiveRow) -> Cell;
    let stats: [(&str, Getter); 12] = [
        ("count", |r| r.count.into()),
        ("mean", |r| r.mean.into()),
        ("std", |r| r.std.into()),
        ("min", |r| r.min.into()),
        ("median", |r| r.median.into()),
        ("max", |r| r.max.into()),
        ("days (= 10)", |r| r.n_at_cap.into()),
        ("days (= 10) %", |r| r.pct_at_cap.into()),
        ("days (>= 1)", |r| r.n_ge_1.into()),
        ("days (>= 1) %", |r| r.pct_ge_1.into()),
        ("days (<= 0.10)", |r| r.n_le_0_10.into()),
        ("days (<= 0.10) %", |r| r.pct_le_0_10.into()),
    ];
    for (label, get) in stats {
        let mut row = vec![Cell::from(label)];
        row.extend(columns.iter().map(|(_, r)| get(r)));
        t.push(row);
    }
    t
}

fn model_label(model: &str) -> &'static str {
    match model {
        "dcc" => "DCC",
        "adcc" => "ADCC",
        _ => "DCC best",
    }
}

/// One-sided determinant tests; Panel A on conditional covariances, Panel B on posteriors.
pub fn table2(panel_a: &[DeterminantRow], panel_b: &[DeterminantRow]) -> Table {
    let mut t = Table::new(
        "One-sided t-tests of |regular| - |liquidity-adjusted| < 0",
        &["panel", "model", "t_value", "dof", "p_greater", "p_less", "significance", "direction"],
    );
    for (panel, rows) in [("A: conditional covariance", panel_a), ("B: posterior covariance", panel_b)] {
        for r in rows {
            t.push(vec![
                panel.into(),
                model_label(r.model).into(),
                r.test.t_value.into(),
                r.test.dof.into(),
                r.test.p_greater.into(),
                r.test.p_less.into(),
                r.test.stars().into(),
                r.direction.arrow().into(),
            ]);
        }
    }
    t
}

pub fn table3(rows: &[CoefficientRow]) -> Table {
    let mut t = Table::new(
        "Two-sided t-tests of DCC/ADCC coefficients, regular vs liquidity-adjusted",
        &["model", "coefficient", "mean_regular", "mean_adjusted", "t_value", "dof", "p_two_sided", "significance"],
    );
    for r in rows {
        t.push(vec![
            r.model.into(),
            r.coefficient.into(),
            r.mean_regular.into(),
            r.mean_adjusted.into(),
            r.test.t_value.into(),
            r.test.dof.into(),
            r.test.p_two_sided.into(),
            r.test.stars().into(),
        ]);
    }
    t
}

pub fn return_source_label(s: ReturnSource) -> &'static str {
    match s {
        ReturnSource::RegularMean => "regular mean",
        ReturnSource::LiqAdjustedMean => "liquidity-adjusted mean",
    }
}

pub fn cov_source_label(s: CovSource) -> &'static str {
    match s {
        CovSource::RollingWindow => "rolling window",
        CovSource::Intraday => "intraday",
        CovSource::Posterior => "posterior forecast",
    }
}

pub fn table4(results: &[BacktestResult]) -> Table {
    let mut t = Table::new(
        "Annualized Sharpe ratios of mean-variance portfolios",
        &["variant", "family", "return_source", "covariance_source", "days", "mean", "std", "sharpe_annualized", "failed_days"],
    );
    for r in results {
        let v = r.variant;
        t.push(vec![
            (v.id as usize).into(),
            v.family().into(),
            return_source_label(v.return_source).into(),
            cov_source_label(v.cov_source).into(),
            r.realized.len().into(),
            r.sharpe.mean.into(),
            r.sharpe.std.into(),
            r.sharpe.value.into(),
            r.failed_days.len().into(),
        ]);
    }
    t
}

pub fn histogram_table(h: &Histogram) -> Table {
    let mut t = Table::new("", &["bin_lo", "bin_hi", "count"]);
    let edges = h.edges();
    for (i, c) in h.counts.iter().enumerate() {
        t.push(vec![edges[i].into(), edges[i + 1].into(), (*c).into()]);
    }
    t
}

/// Plain SVG bar chart of a histogram.
pub fn histogram_svg(h: &Histogram, title: &str) -> String {
    let (width, height) = (640.0, 320.0);
    let (left, right, top, bottom) = (50.0, 10.0, 30.0, 30.0);
    let plot_w = width - left - right;
    let plot_h = height - top - bottom;
    let max = h.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let bar_w = plot_w / h.counts.len() as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="18" font-family="sans-serif" font-size="13" text-anchor="middle">{}</text>"#,
        width / 2.0,
        escape(title)
    );
    for (i, c) in h.counts.iter().enumerate() {
        let bh = plot_h * *c as f64 / max;
        let _ = writeln!(
            s,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#4a6fa5"/>"##,
            left + bar_w * i as f64,
            top + plot_h - bh,
            (bar_w - 1.0).max(0.5),
            bh
        );
    }
    let base = top + plot_h;
    let _ = writeln!(s, r#"<line x1="{left}" y1="{base}" x2="{}" y2="{base}" stroke="black"/>"#, left + plot_w);
    let _ = writeln!(s, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{base}" stroke="black"/>"#);
    for (x, label) in [(left, format!("{}", h.lo)), (left + plot_w, format!("{}", h.hi))] {
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{label}</text>"#,
            base + 16.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">{}</text>"#,
        left - 4.0,
        top + 4.0,
        max as usize
    );
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{descriptive_table, histogram};

    #[test]
    fn markdown_layout() {
        let row = descriptive_table(&[10.0, 0.5, 0.05]).unwrap();
        let t = table1(&[("jump", row)], 0);
        let md = t.to_markdown();
        assert!(md.contains("| statistic | jump |"));
        assert!(md.contains("| days (= 10) | 1 |"));
        assert_eq!(t.rows.len(), 12);
    }

    #[test]
    fn csv_round_trips_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Table::new("x", &["a", "b"]);
        t.push(vec![Cell::Num(1e-24), Cell::Int(3)]);
        t.write(dir.path(), "t").unwrap();
        let text = std::fs::read_to_string(dir.path().join("t.csv")).unwrap();
        assert_eq!(text, "a,b\n1e-24,3\n");
        assert!(dir.path().join("t.md").exists());
    }

    #[test]
    fn svg_has_one_bar_per_bin() {
        let h = histogram(&[0.1, 0.2, 9.9, 10.0], 5, (0.0, 10.0)).unwrap();
        let svg = histogram_svg(&h, "a < b");
        assert_eq!(svg.matches("fill=\"#4a6fa5\"").count(), 5);
        assert!(svg.contains("a &lt; b"));
    }
}
