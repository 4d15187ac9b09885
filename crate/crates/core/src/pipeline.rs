//! Staged batch runs driven by a TOML config:
//! `liquidity -> forecast -> backtest -> report`.
//!
//! Every stage writes plain CSV (plus Markdown/SVG tables and figures) under
//! the output directory and records a content hash of its inputs in
//! `manifest.json`. A later run with the same stage key reloads the persisted
//! files instead of recomputing, so interrupted runs resume where they
//! stopped and reruns are idempotent.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use chrono::{NaiveDate, NaiveTime};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bayes::{self, Pipeline};
use crate::dcc::{self, DccFit, DccKind, DccParams};
use crate::error::{Error, Result};
use crate::liquidity::{self, AssetDay, CappedDeterminant, LiquidityBetas, LiquiditySnapshot};
use crate::marketdata::{self, AssetClass, CalendarSpec, MinuteGrid};
use crate::persist::{self, fmt_f64, fmt_opt, CsvIn, CsvOut};
use crate::portfolio::{self, BacktestData, BacktestResult, CovSource, PortfolioVariant};
use crate::report::{self, Table};
use crate::stats::{self, DeterminantSeries};
use crate::vecm;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    #[default]
    Minute,
    Tick,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Relative paths resolve against the config file's directory.
    pub path: PathBuf,
    #[serde(default)]
    pub format: DataFormat,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalendarConfig {
    /// `crypto` (default) or `us_equity`; the fields below override it.
    pub preset: Option<String>,
    pub minutes_per_day: Option<usize>,
    /// `HH:MM` UTC.
    pub day_boundary: Option<String>,
    pub asset_class: Option<AssetClass>,
    pub periods_per_year: Option<f64>,
}

impl CalendarConfig {
    pub fn spec(&self) -> Result<CalendarSpec> {
        let base = match self.preset.as_deref() {
            None | Some("crypto") => CalendarSpec::crypto(),
            Some("us_equity") => CalendarSpec::us_equity(),
            Some(other) => {
                return Err(Error::Config(format!(
                    "calendar.preset must be `crypto` or `us_equity`, got `{other}`"
                )))
            }
        };
        let boundary = match &self.day_boundary {
            Some(raw) => NaiveTime::parse_from_str(raw, "%H:%M")
                .map_err(|_| Error::Config(format!("calendar.day_boundary must be HH:MM, got `{raw}`")))?,
            None => base.day_boundary,
        };
        CalendarSpec::new(
            self.minutes_per_day.unwrap_or(base.minutes_per_day),
            boundary,
            self.asset_class.unwrap_or(base.asset_class),
        )
    }

    pub fn periods_per_year(&self, spec: &CalendarSpec) -> f64 {
        self.periods_per_year
            .unwrap_or_else(|| spec.asset_class.periods_per_year())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub window_days: usize,
    pub refit_stride: usize,
    pub tau: f64,
    pub variants: Vec<u8>,
    pub seed: u64,
    /// 0 lets the thread pool pick.
    pub threads: usize,
    pub out: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            window_days: 365,
            refit_stride: 1,
            tau: bayes::DEFAULT_TAU,
            variants: (1..=6).collect(),
            seed: 0,
            threads: 0,
            out: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub calendar: CalendarConfig,
    #[serde(default)]
    pub run: RunSection,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Command-line overrides; `None` keeps the config value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub variants: Option<Vec<u8>>,
    pub window_days: Option<usize>,
    pub refit_stride: Option<usize>,
    pub tau: Option<f64>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = &o.variants {
            self.run.variants = v.clone();
        }
        if let Some(w) = o.window_days {
            self.run.window_days = w;
        }
        if let Some(s) = o.refit_stride {
            self.run.refit_stride = s;
        }
        if let Some(t) = o.tau {
            self.run.tau = t;
        }
        if let Some(s) = o.seed {
            self.run.seed = s;
        }
        if let Some(t) = o.threads {
            self.run.threads = t;
        }
        if let Some(out) = &o.out {
            // Command-line paths are relative to the working directory.
            self.run.out = std::path::absolute(out).unwrap_or_else(|_| out.clone());
        }
    }

    pub fn data_path(&self) -> PathBuf {
        self.base_dir.join(&self.data.path)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.base_dir.join(&self.run.out)
    }

    pub fn variants(&self) -> Result<Vec<PortfolioVariant>> {
        let ids: BTreeSet<u8> = self.run.variants.iter().copied().collect();
        if ids.is_empty() {
            return Err(Error::Config("run.variants must not be empty".into()));
        }
        ids.into_iter().map(PortfolioVariant::from_id).collect()
    }

    pub fn validate(&self) -> Result<()> {
        bayes::check_tau(self.run.tau)?;
        if self.run.refit_stride == 0 {
            return Err(Error::Config("run.refit_stride must be at least 1".into()));
        }
        if self.run.window_days < 10 {
            return Err(Error::Config(format!(
                "run.window_days must be at least 10, got {}",
                self.run.window_days
            )));
        }
        self.variants()?;
        let spec = self.calendar.spec()?;
        let ppy = self.calendar.periods_per_year(&spec);
        if !(ppy > 0.0) {
            return Err(Error::Config(format!("calendar.periods_per_year must be positive, got {ppy}")));
        }
        Ok(())
    }

    /// Everything that determines the outputs; thread budget and output
    /// location are left out.
    pub fn canonical(&self) -> serde_json::Value {
        let variants: BTreeSet<u8> = self.run.variants.iter().copied().collect();
        serde_json::json!({
            "data": { "path": self.data.path, "format": self.data.format },
            "calendar": self.calendar,
            "run": {
                "window_days": self.run.window_days,
                "refit_stride": self.run.refit_stride,
                "tau": self.run.tau,
                "variants": variants,
                "seed": self.run.seed,
            },
        })
    }

    pub fn hash(&self) -> String {
        persist::sha256_hex(self.canonical().to_string().as_bytes())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub key: String,
    /// Output files relative to the output directory, with their SHA-256.
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub config: serde_json::Value,
    pub data_sha256: String,
    pub stages: BTreeMap<String, StageEntry>,
}

impl Manifest {
    pub fn load(out: &Path) -> Result<Self> {
        let path = out.join(MANIFEST);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path,
            line: e.line() as u64,
            message: e.to_string(),
        })
    }

    pub fn save(&self, out: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        persist::write_text(&out.join(MANIFEST), &text)
    }

    /// True when the stage ran with `key` and all its files are intact.
    pub fn is_current(&self, stage: &str, key: &str, out: &Path) -> bool {
        let Some(entry) = self.stages.get(stage) else {
            return false;
        };
        entry.key == key
            && entry
                .files
                .iter()
                .all(|(rel, sha)| persist::sha256_file(&out.join(rel)).is_ok_and(|s| &s == sha))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkippedDay {
    pub date: NaiveDate,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct LiquidityData {
    pub symbols: Vec<String>,
    pub snapshots: Vec<LiquiditySnapshot>,
    pub skipped: Vec<SkippedDay>,
}

impl LiquidityData {
    fn stacked(&self, adjusted: bool) -> DMatrix<f64> {
        let n = self.symbols.len();
        DMatrix::from_fn(self.snapshots.len(), n, |r, c| {
            let s = &self.snapshots[r];
            if adjusted {
                s.q_liq[c]
            } else {
                s.q[c]
            }
        })
    }

    /// `D x N` daily returns, oldest first.
    pub fn returns(&self) -> DMatrix<f64> {
        self.stacked(false)
    }

    pub fn liq_returns(&self) -> DMatrix<f64> {
        self.stacked(true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionDets {
    pub dcc: f64,
    pub adcc: f64,
    pub best: f64,
}

/// One pipeline's next-day forecast made at the close of a day.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineForecast {
    pub best_kind: DccKind,
    pub loglik_dcc: f64,
    pub loglik_adcc: f64,
    pub det_omega: SelectionDets,
    pub det_prior: f64,
    pub det_post: SelectionDets,
    pub omega_best: DMatrix<f64>,
    pub posterior_best: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastRecord {
    pub date: NaiveDate,
    pub target_date: NaiveDate,
    pub regular: Option<PipelineForecast>,
    pub adjusted: Option<PipelineForecast>,
    /// `|B_r^{-1/2} Omega B_r^{-1/2}|` from the regular best forecast.
    pub det_omega_scaled: Option<f64>,
    /// Determinant of the closed-form linked posterior.
    pub det_post_linked: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitSummary {
    pub params: DccParams,
    pub loglik: f64,
    pub converged: bool,
    pub fallback: bool,
}

impl From<&DccFit> for FitSummary {
    fn from(f: &DccFit) -> Self {
        Self {
            params: f.params(),
            loglik: f.loglik,
            converged: f.converged,
            fallback: f.fallback,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowFit {
    pub refit_date: NaiveDate,
    pub window_start: NaiveDate,
    pub pipeline: Pipeline,
    pub vecm_lag: usize,
    pub coint_rank: usize,
    pub dcc: FitSummary,
    pub adcc: FitSummary,
}

#[derive(Debug, Clone, Default)]
pub struct ForecastData {
    pub records: Vec<ForecastRecord>,
    pub fits: Vec<WindowFit>,
}

impl ForecastData {
    /// Determinant series over days where both pipelines produced forecasts.
    pub fn determinant_series(&self) -> (DeterminantSeries, DeterminantSeries, DeterminantSeries, DeterminantSeries) {
        let mut omega = (DeterminantSeries::default(), DeterminantSeries::default());
        let mut post = (DeterminantSeries::default(), DeterminantSeries::default());
        let push = |s: &mut DeterminantSeries, d: &SelectionDets| {
            s.dcc.push(d.dcc);
            s.adcc.push(d.adcc);
            s.best.push(d.best);
        };
        for r in &self.records {
            if let (Some(reg), Some(adj)) = (&r.regular, &r.adjusted) {
                push(&mut omega.0, &reg.det_omega);
                push(&mut omega.1, &adj.det_omega);
                push(&mut post.0, &reg.det_post);
                push(&mut post.1, &adj.det_post);
            }
        }
        (omega.0, omega.1, post.0, post.1)
    }

    pub fn table2(&self) -> Result<Table> {
        let (om_reg, om_adj, post_reg, post_adj) = self.determinant_series();
        let a = stats::determinant_tests(&om_reg, &om_adj)?;
        let b = stats::determinant_tests(&post_reg, &post_adj)?;
        Ok(report::table2(&a, &b))
    }

    pub fn table3(&self) -> Result<Table> {
        let select = |p: Pipeline, adcc: bool| -> Vec<DccParams> {
            self.fits
                .iter()
                .filter(|f| f.pipeline == p)
                .map(|f| if adcc { f.adcc.params } else { f.dcc.params })
                .collect()
        };
        let rows = stats::coefficient_tests(
            &select(Pipeline::Regular, false),
            &select(Pipeline::LiquidityAdjusted, false),
            &select(Pipeline::Regular, true),
            &select(Pipeline::LiquidityAdjusted, true),
        )?;
        Ok(report::table3(&rows))
    }
}

fn kind_from_str(s: &str) -> Option<DccKind> {
    match s {
        "dcc" => Some(DccKind::Dcc),
        "adcc" => Some(DccKind::Adcc),
        _ => None,
    }
}

fn pipeline_from_str(s: &str) -> Option<Pipeline> {
    match s {
        "regular" => Some(Pipeline::Regular),
        "liquidity_adjusted" => Some(Pipeline::LiquidityAdjusted),
        _ => None,
    }
}

fn parse_err(path: &Path, message: String) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message,
    }
}

/// Executes stages for one config; stage results are computed (or reloaded)
/// at most once per runner.
pub struct Runner {
    cfg: RunConfig,
    spec: CalendarSpec,
    out: PathBuf,
    pool: rayon::ThreadPool,
    data_sha: OnceLock<String>,
    liquidity: OnceLock<LiquidityData>,
    forecast: OnceLock<ForecastData>,
    backtest: OnceLock<Vec<BacktestResult>>,
}

/// Number of refit windows for `days` forecast days at `stride`.
pub fn refit_count(days: usize, stride: usize) -> usize {
    days.div_ceil(stride)
}

impl Runner {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let spec = cfg.calendar.spec()?;
        let out = cfg.out_dir();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.run.threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        Ok(Self {
            cfg,
            spec,
            out,
            pool,
            data_sha: OnceLock::new(),
            liquidity: OnceLock::new(),
            forecast: OnceLock::new(),
            backtest: OnceLock::new(),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    fn data_sha(&self) -> Result<&str> {
        if let Some(s) = self.data_sha.get() {
            return Ok(s);
        }
        let path = self.cfg.data_path();
        if !path.exists() {
            return Err(Error::Config(format!("data file not found: {}", path.display())));
        }
        let sha = persist::sha256_file(&path)?;
        Ok(self.data_sha.get_or_init(|| sha))
    }

    fn key(&self, parts: serde_json::Value) -> String {
        persist::sha256_hex(parts.to_string().as_bytes())
    }

    fn liquidity_key(&self) -> Result<String> {
        Ok(self.key(serde_json::json!({
            "stage": "liquidity",
            "data": self.data_sha()?,
            "format": self.cfg.data.format,
            "calendar": self.spec,
        })))
    }

    fn forecast_key(&self) -> Result<String> {
        Ok(self.key(serde_json::json!({
            "stage": "forecast",
            "liquidity": self.liquidity_key()?,
            "window": self.cfg.run.window_days,
            "stride": self.cfg.run.refit_stride,
            "tau": self.cfg.run.tau,
        })))
    }

    fn needs_forecast(&self) -> Result<bool> {
        Ok(self.cfg.variants()?.iter().any(|v| v.cov_source == CovSource::Posterior))
    }

    fn backtest_key(&self) -> Result<String> {
        let forecast = if self.needs_forecast()? { self.forecast_key()? } else { String::new() };
        let ids: Vec<u8> = self.cfg.variants()?.iter().map(|v| v.id).collect();
        Ok(self.key(serde_json::json!({
            "stage": "backtest",
            "liquidity": self.liquidity_key()?,
            "forecast": forecast,
            "window": self.cfg.run.window_days,
            "variants": ids,
            "periods_per_year": self.cfg.calendar.periods_per_year(&self.spec),
        })))
    }

    fn report_key(&self) -> Result<String> {
        Ok(self.key(serde_json::json!({
            "stage": "report",
            "forecast": self.forecast_key()?,
            "backtest": self.backtest_key()?,
        })))
    }

    /// Record a finished stage in the manifest.
    fn commit(&self, stage: &str, key: String, files: &[PathBuf]) -> Result<()> {
        let mut manifest = Manifest::load(&self.out)?;
        manifest.config_hash = self.cfg.hash();
        manifest.config = self.cfg.canonical();
        manifest.data_sha256 = self.data_sha()?.to_string();
        let mut entry = StageEntry { key, files: BTreeMap::new() };
        for f in files {
            let rel = f
                .strip_prefix(&self.out)
                .unwrap_or(f)
                .to_string_lossy()
                .replace('\\', "/");
            entry.files.insert(rel, persist::sha256_file(f)?);
        }
        manifest.stages.insert(stage.to_string(), entry);
        manifest.save(&self.out)
    }

    fn stage_dir(&self, stage: &str) -> Result<PathBuf> {
        let dir = self.out.join(stage);
        persist::create_dir(&dir)?;
        Ok(dir)
    }

    fn is_current(&self, stage: &str, key: &str) -> Result<bool> {
        Ok(Manifest::load(&self.out)?.is_current(stage, key, &self.out))
    }

    // ---- liquidity -------------------------------------------------------

    pub fn liquidity(&self) -> Result<&LiquidityData> {
        if let Some(d) = self.liquidity.get() {
            return Ok(d);
        }
        let key = self.liquidity_key()?;
        let dir = self.stage_dir("liquidity")?;
        let data = if self.is_current("liquidity", &key)? {
            log::info!("liquidity: reusing {}", dir.display());
            load_liquidity(&dir)?
        } else {
            let data = self.compute_liquidity()?;
            let files = write_liquidity(&dir, &data)?;
            self.commit("liquidity", key, &files)?;
            data
        };
        Ok(self.liquidity.get_or_init(|| data))
    }

    fn compute_liquidity(&self) -> Result<LiquidityData> {
        let path = self.cfg.data_path();
        self.data_sha()?;
        let ingested = match self.cfg.data.format {
            DataFormat::Minute => marketdata::ingest_minute_csv(&path, &self.spec)?,
            DataFormat::Tick => marketdata::ingest_tick_csv(&path, &self.spec)?,
        };
        if ingested.grids.is_empty() {
            return Err(Error::InsufficientData(format!("no usable sessions in {}", path.display())));
        }
        if ingested.out_of_session_rows > 0 {
            log::info!("{} rows outside the session were ignored", ingested.out_of_session_rows);
        }
        let symbols: Vec<String> = ingested
            .grids
            .iter()
            .map(|g| g.symbol.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut by_date: BTreeMap<NaiveDate, Vec<MinuteGrid>> = BTreeMap::new();
        for g in ingested.grids {
            by_date.entry(g.date).or_default().push(g);
        }
        let mut skipped: Vec<SkippedDay> = ingested
            .rejected
            .iter()
            .map(|r| SkippedDay {
                date: r.date,
                reason: format!("{}: {} of {} minutes missing", r.symbol, r.missing_minutes, r.minutes_per_day),
            })
            .collect();
        let mut complete = Vec::new();
        for (date, grids) in by_date {
            if grids.len() == symbols.len() {
                complete.push((date, grids));
            } else {
                let have: BTreeSet<&str> = grids.iter().map(|g| g.symbol.as_str()).collect();
                let missing: Vec<&str> = symbols.iter().map(String::as_str).filter(|s| !have.contains(s)).collect();
                skipped.push(SkippedDay {
                    date,
                    reason: format!("missing symbols: {}", missing.join(" ")),
                });
            }
        }
        let built: Vec<Result<LiquiditySnapshot>> =
            self.pool.install(|| complete.par_iter().map(|(_, g)| liquidity::build_snapshot(g)).collect());
        let mut snapshots = Vec::with_capacity(built.len());
        for ((date, _), res) in complete.iter().zip(built) {
            match res {
                Ok(s) => snapshots.push(s),
                Err(e) => {
                    log::warn!("{date}: skipped, {e}");
                    skipped.push(SkippedDay {
                        date: *date,
                        reason: e.to_string(),
                    });
                }
            }
        }
        skipped.sort_by(|a, b| a.date.cmp(&b.date).then_with(|| a.reason.cmp(&b.reason)));
        log::info!(
            "liquidity: {} days for {} assets, {} skipped",
            snapshots.len(),
            symbols.len(),
            skipped.len()
        );
        Ok(LiquidityData { symbols, snapshots, skipped })
    }

    // ---- forecast --------------------------------------------------------

    pub fn forecast(&self) -> Result<&ForecastData> {
        if let Some(d) = self.forecast.get() {
            return Ok(d);
        }
        let liq = self.liquidity()?;
        let key = self.forecast_key()?;
        let dir = self.stage_dir("forecast")?;
        let data = if self.is_current("forecast", &key)? {
            log::info!("forecast: reusing {}", dir.display());
            load_forecast(&dir, liq)?
        } else {
            let data = self.compute_forecast(liq)?;
            let files = write_forecast(&dir, &data)?;
            self.commit("forecast", key, &files)?;
            data
        };
        Ok(self.forecast.get_or_init(|| data))
    }

    fn check_window(&self, days: usize) -> Result<()> {
        let w = self.cfg.run.window_days;
        if w + 2 > days {
            return Err(Error::Config(format!(
                "run.window_days ({w}) must be smaller than the number of usable days minus one ({days} usable days)"
            )));
        }
        Ok(())
    }

    fn compute_forecast(&self, liq: &LiquidityData) -> Result<ForecastData> {
        let days = liq.snapshots.len();
        self.check_window(days)?;
        let w = self.cfg.run.window_days;
        let stride = self.cfg.run.refit_stride;
        let q = liq.returns();
        let q_liq = liq.liq_returns();
        let first = w - 1;
        let last = days - 2;
        let starts: Vec<usize> = (first..=last).step_by(stride).collect();
        log::info!(
            "forecast: {} forecast days, {} refit windows per pipeline (stride {stride})",
            last + 1 - first,
            starts.len()
        );
        let jobs: Vec<(usize, Pipeline)> = starts
            .iter()
            .flat_map(|&s| [(s, Pipeline::Regular), (s, Pipeline::LiquidityAdjusted)])
            .collect();
        let ctx = BlockContext {
            liq,
            q: &q,
            q_liq: &q_liq,
            window: w,
            stride,
            last,
            tau: self.cfg.run.tau,
        };
        let blocks: Vec<BlockOutput> = self.pool.install(|| jobs.par_iter().map(|&(s, p)| ctx.run(s, p)).collect());

        let mut regular: BTreeMap<usize, Option<PipelineForecast>> = BTreeMap::new();
        let mut adjusted: BTreeMap<usize, Option<PipelineForecast>> = BTreeMap::new();
        let mut fits = Vec::new();
        for b in blocks {
            let target = match b.pipeline {
                Pipeline::Regular => &mut regular,
                Pipeline::LiquidityAdjusted => &mut adjusted,
            };
            target.extend(b.days);
            fits.extend(b.fit);
        }
        let records = (first..=last)
            .map(|t| {
                let snap = &liq.snapshots[t];
                let reg = regular.remove(&t).flatten();
                let adj = adjusted.remove(&t).flatten();
                let (scaled, linked) = match &reg {
                    Some(r) => cross_pipeline(snap, &r.omega_best, self.cfg.run.tau),
                    None => (None, None),
                };
                ForecastRecord {
                    date: snap.date,
                    target_date: liq.snapshots[t + 1].date,
                    regular: reg,
                    adjusted: adj,
                    det_omega_scaled: scaled,
                    det_post_linked: linked,
                }
            })
            .collect();
        Ok(ForecastData { records, fits })
    }

    // ---- backtest --------------------------------------------------------

    pub fn backtest(&self) -> Result<&[BacktestResult]> {
        if let Some(d) = self.backtest.get() {
            return Ok(d);
        }
        let liq = self.liquidity()?;
        self.check_window(liq.snapshots.len())?;
        let forecast = if self.needs_forecast()? { Some(self.forecast()?) } else { None };
        let key = self.backtest_key()?;
        let dir = self.stage_dir("backtest")?;
        let variants = self.cfg.variants()?;
        let ppy = self.cfg.calendar.periods_per_year(&self.spec);
        let data = if self.is_current("backtest", &key)? {
            log::info!("backtest: reusing {}", dir.display());
            load_backtest(&dir, &variants, liq, ppy)?
        } else {
            let input = backtest_input(liq, forecast);
            let results = self
                .pool
                .install(|| portfolio::run_backtest(&input, &variants, self.cfg.run.window_days, ppy))?;
            let files = write_backtest(&dir, &results, &liq.symbols)?;
            self.commit("backtest", key, &files)?;
            results
        };
        Ok(self.backtest.get_or_init(|| data))
    }

    // ---- report ----------------------------------------------------------

    /// Run every stage and write `report/report.md`; returns its path.
    pub fn report(&self) -> Result<PathBuf> {
        let liq = self.liquidity()?;
        let forecast = self.forecast()?;
        let results = self.backtest()?;
        let key = self.report_key()?;
        let dir = self.stage_dir("report")?;
        let path = dir.join("report.md");
        if self.is_current("report", &key)? {
            return Ok(path);
        }
        let mut md = String::from("# Liquidity-adjusted volatility run\n\n");
        md.push_str(&format!(
            "Assets: {}. Usable days: {}. Skipped days: {}. Window: {} days, refit stride {}, tau {}.\n\n",
            liq.symbols.join(", "),
            liq.snapshots.len(),
            liq.skipped.len(),
            self.cfg.run.window_days,
            self.cfg.run.refit_stride,
            self.cfg.run.tau
        ));
        md.push_str("## Liquidity determinants\n\n");
        md.push_str(&table1(liq)?.to_markdown());
        md.push_str("\nHistograms: `liquidity/figure1_jump.svg`, `liquidity/figure1_diffusion.svg`, `liquidity/figure1_composite.svg`.\n\n");
        md.push_str("## Determinant tests\n\n");
        md.push_str(&optional_table(forecast.table2()));
        md.push_str("\n## Coefficient tests\n\n");
        md.push_str(&optional_table(forecast.table3()));
        md.push_str("\n## Portfolio performance\n\n");
        md.push_str(&report::table4(results).to_markdown());
        persist::write_text(&path, &md)?;
        self.commit("report", key, std::slice::from_ref(&path))?;
        Ok(path)
    }
}

fn optional_table(t: Result<Table>) -> String {
    match t {
        Ok(t) => t.to_markdown(),
        Err(e) => format!("Not available: {e}\n"),
    }
}

/// Determinants of the analytic scaling and of the linked posterior.
fn cross_pipeline(snap: &LiquiditySnapshot, omega: &DMatrix<f64>, tau: f64) -> (Option<f64>, Option<f64>) {
    let scaled = dcc::scale_covariance_by_jump(omega, &snap.b_r).ok().map(|m| m.determinant());
    let linked = bayes::linked_posterior(&snap.sigma_tt, omega, &snap.b_sigma, &snap.b_r, tau)
        .ok()
        .map(|m| m.determinant());
    (scaled, linked)
}

struct BlockContext<'a> {
    liq: &'a LiquidityData,
    q: &'a DMatrix<f64>,
    q_liq: &'a DMatrix<f64>,
    window: usize,
    stride: usize,
    last: usize,
    tau: f64,
}

struct BlockOutput {
    pipeline: Pipeline,
    fit: Option<WindowFit>,
    days: Vec<(usize, Option<PipelineForecast>)>,
}

impl BlockContext<'_> {
    fn window_at(&self, series: &DMatrix<f64>, t: usize) -> DMatrix<f64> {
        series.rows(t + 1 - self.window, self.window).into_owned()
    }

    /// Fit at `start`, then refilter the fixed parameters through the rest of
    /// the block.
    fn run(&self, start: usize, pipeline: Pipeline) -> BlockOutput {
        let series = match pipeline {
            Pipeline::Regular => self.q,
            Pipeline::LiquidityAdjusted => self.q_liq,
        };
        let end = (start + self.stride).min(self.last + 1);
        let fitted = (|| -> Result<_> {
            let (fit, _) = vecm::fit_auto(&self.window_at(series, start))?;
            let (d, a) = dcc::fit_dcc_pair(&fit.residuals)?;
            Ok((fit, d, a))
        })();
        let (vecm_fit, dcc_fit, adcc_fit) = match fitted {
            Ok(f) => f,
            Err(e) => {
                log::warn!(
                    "{} {}: window fit failed, {e}",
                    self.liq.snapshots[start].date,
                    pipeline.as_str()
                );
                return BlockOutput {
                    pipeline,
                    fit: None,
                    days: (start..end).map(|t| (t, None)).collect(),
                };
            }
        };
        let fit = WindowFit {
            refit_date: self.liq.snapshots[start].date,
            window_start: self.liq.snapshots[start + 1 - self.window].date,
            pipeline,
            vecm_lag: vecm_fit.p,
            coint_rank: vecm_fit.coint_rank,
            dcc: (&dcc_fit).into(),
            adcc: (&adcc_fit).into(),
        };
        let days = (start..end)
            .map(|t| {
                let day = (|| -> Result<PipelineForecast> {
                    if t == start {
                        self.day_forecast(t, pipeline, &dcc_fit, &adcc_fit)
                    } else {
                        let res = vecm::residuals_with(&vecm_fit, &self.window_at(series, t))?;
                        let d = dcc::refilter(&dcc_fit, &res)?;
                        let a = dcc::refilter(&adcc_fit, &res)?;
                        self.day_forecast(t, pipeline, &d, &a)
                    }
                })();
                match day {
                    Ok(f) => (t, Some(f)),
                    Err(e) => {
                        log::warn!("{} {}: forecast failed, {e}", self.liq.snapshots[t].date, pipeline.as_str());
                        (t, None)
                    }
                }
            })
            .collect();
        BlockOutput {
            pipeline,
            fit: Some(fit),
            days,
        }
    }

    fn day_forecast(&self, t: usize, pipeline: Pipeline, d: &DccFit, a: &DccFit) -> Result<PipelineForecast> {
        let best = dcc::select_best(d, a);
        let om_d = dcc::forecast_covariance(d)?.omega;
        let om_a = dcc::forecast_covariance(a)?.omega;
        let snap = &self.liq.snapshots[t];
        let prior = match pipeline {
            Pipeline::Regular => &snap.sigma_tt,
            Pipeline::LiquidityAdjusted => &snap.sigma_tt_liq,
        };
        let post_d = bayes::posterior_covariance(prior, &om_d, self.tau)?;
        let post_a = bayes::posterior_covariance(prior, &om_a, self.tau)?;
        let (om_best, post_best) = match best.kind {
            DccKind::Dcc => (om_d.clone(), post_d.clone()),
            DccKind::Adcc => (om_a.clone(), post_a.clone()),
        };
        Ok(PipelineForecast {
            best_kind: best.kind,
            loglik_dcc: d.loglik,
            loglik_adcc: a.loglik,
            det_omega: SelectionDets {
                dcc: om_d.determinant(),
                adcc: om_a.determinant(),
                best: om_best.determinant(),
            },
            det_prior: prior.determinant(),
            det_post: SelectionDets {
                dcc: post_d.determinant(),
                adcc: post_a.determinant(),
                best: post_best.determinant(),
            },
            omega_best: om_best,
            posterior_best: post_best,
        })
    }
}

fn backtest_input(liq: &LiquidityData, forecast: Option<&ForecastData>) -> BacktestData {
    let days = liq.snapshots.len();
    let mut posterior = vec![None; days];
    let mut posterior_liq = vec![None; days];
    if let Some(f) = forecast {
        let index: BTreeMap<NaiveDate, usize> =
            liq.snapshots.iter().enumerate().map(|(i, s)| (s.date, i)).collect();
        for r in &f.records {
            if let Some(&i) = index.get(&r.date) {
                posterior[i] = r.regular.as_ref().map(|p| p.posterior_best.clone());
                posterior_liq[i] = r.adjusted.as_ref().map(|p| p.posterior_best.clone());
            }
        }
    }
    BacktestData {
        dates: liq.snapshots.iter().map(|s| s.date).collect(),
        regular: liq.returns(),
        adjusted: liq.liq_returns(),
        intraday: liq.snapshots.iter().map(|s| s.sigma_tt.clone()).collect(),
        intraday_liq: liq.snapshots.iter().map(|s| s.sigma_tt_liq.clone()).collect(),
        posterior,
        posterior_liq,
    }
}

/// Table 1 over non-degenerate days.
pub fn table1(liq: &LiquidityData) -> Result<Table> {
    let kept: Vec<&LiquiditySnapshot> = liq.snapshots.iter().filter(|s| !s.any_degenerate()).collect();
    let excluded = liq.snapshots.len() - kept.len();
    let series = determinant_columns(&kept);
    let rows = series
        .iter()
        .map(|(name, v)| Ok((*name, stats::descriptive_table(v)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(report::table1(&rows, excluded))
}

fn determinant_columns(kept: &[&LiquiditySnapshot]) -> [(&'static str, Vec<f64>); 3] {
    [
        ("liquidity jump |B_r|", kept.iter().map(|s| s.det_jump.reported).collect()),
        ("liquidity diffusion |B_sigma|", kept.iter().map(|s| s.det_diff.reported).collect()),
        ("liquidity composite |B|", kept.iter().map(|s| s.det_comp.reported).collect()),
    ]
}

// ---- persistence -----------------------------------------------------------

const MATRIX_NAMES: [&str; 5] = ["sigma_tt", "sigma_tt_liq", "b_r", "b_sigma", "b_comp"];

fn write_liquidity(dir: &Path, data: &LiquidityData) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();

    let path = dir.join("snapshots.csv");
    let mut out = CsvOut::create(
        &path,
        &[
            "date",
            "det_jump",
            "det_jump_raw",
            "det_diffusion",
            "det_diffusion_raw",
            "det_composite",
            "det_composite_raw",
            "degenerate_assets",
            "condsvd_residual",
            "condsvd_regularized",
        ],
    )?;
    for s in &data.snapshots {
        out.row([
            s.date.to_string(),
            fmt_f64(s.det_jump.reported),
            fmt_f64(s.det_jump.raw),
            fmt_f64(s.det_diff.reported),
            fmt_f64(s.det_diff.raw),
            fmt_f64(s.det_comp.reported),
            fmt_f64(s.det_comp.raw),
            s.degenerate.iter().filter(|d| **d).count().to_string(),
            fmt_f64(s.condsvd_residual),
            s.condsvd_regularized.to_string(),
        ])?;
    }
    out.finish()?;
    files.push(path);

    let path = dir.join("assets.csv");
    let mut out = CsvOut::create(
        &path,
        &[
            "date",
            "symbol",
            "return",
            "liq_return",
            "vol",
            "liq_vol",
            "beta_jump",
            "beta_diffusion",
            "degenerate",
        ],
    )?;
    for s in &data.snapshots {
        for (i, a) in s.asset_days.iter().enumerate() {
            out.row([
                s.date.to_string(),
                a.symbol.clone(),
                fmt_f64(a.daily_return),
                fmt_f64(a.daily_liq_return),
                fmt_f64(a.daily_vol),
                fmt_f64(a.daily_liq_vol),
                fmt_f64(s.betas[i].jump),
                fmt_f64(s.betas[i].diffusion),
                s.degenerate[i].to_string(),
            ])?;
        }
    }
    out.finish()?;
    files.push(path);

    let path = dir.join("matrices.csv");
    let mut out = CsvOut::create(&path, &["date", "matrix", "row", "col", "value"])?;
    for s in &data.snapshots {
        let mats = [&s.sigma_tt, &s.sigma_tt_liq, &s.b_r, &s.b_sigma, &s.b_comp];
        for (name, m) in MATRIX_NAMES.iter().zip(mats) {
            persist::write_matrix(&mut out, &[s.date.to_string(), name.to_string()], m)?;
        }
    }
    out.finish()?;
    files.push(path);

    let path = dir.join("skipped.csv");
    let mut out = CsvOut::create(&path, &["date", "reason"])?;
    for s in &data.skipped {
        out.row([s.date.to_string(), s.reason.clone()])?;
    }
    out.finish()?;
    files.push(path);

    table1(data)?.write(dir, "table1")?;
    files.push(dir.join("table1.csv"));
    files.push(dir.join("table1.md"));

    let kept: Vec<&LiquiditySnapshot> = data.snapshots.iter().filter(|s| !s.any_degenerate()).collect();
    for ((name, values), stem) in determinant_columns(&kept)
        .iter()
        .zip(["figure1_jump", "figure1_diffusion", "figure1_composite"])
    {
        let h = stats::histogram(values, stats::DEFAULT_BINS, (0.0, stats::CAP))?;
        report::histogram_table(&h).write_csv(&dir.join(format!("{stem}.csv")))?;
        persist::write_text(&dir.join(format!("{stem}.svg")), &report::histogram_svg(&h, name))?;
        files.push(dir.join(format!("{stem}.csv")));
        files.push(dir.join(format!("{stem}.svg")));
    }
    Ok(files)
}

type MatrixMap = BTreeMap<(String, String), Vec<(usize, usize, f64)>>;

/// Long-form matrices keyed by the two leading columns.
fn read_matrices(path: &Path, key_cols: [&str; 2]) -> Result<MatrixMap> {
    let csv = CsvIn::open(path)?;
    let mut out: MatrixMap = BTreeMap::new();
    for row in csv.rows() {
        let key = (row.str(key_cols[0])?.to_string(), row.str(key_cols[1])?.to_string());
        out.entry(key)
            .or_default()
            .push((row.usize("row")?, row.usize("col")?, row.f64("value")?));
    }
    Ok(out)
}

fn take_matrix(map: &mut MatrixMap, a: &str, b: &str, n: usize, path: &Path) -> Result<DMatrix<f64>> {
    let entries = map
        .remove(&(a.to_string(), b.to_string()))
        .ok_or_else(|| parse_err(path, format!("no `{b}` matrix for {a}")))?;
    let mut m = DMatrix::zeros(n, n);
    for (r, c, v) in entries {
        if r >= n || c >= n {
            return Err(parse_err(path, format!("`{b}` index ({r}, {c}) out of range on {a}")));
        }
        m[(r, c)] = v;
    }
    Ok(m)
}

fn load_liquidity(dir: &Path) -> Result<LiquidityData> {
    let assets_path = dir.join("assets.csv");
    let mut per_day: BTreeMap<NaiveDate, Vec<(AssetDay, LiquidityBetas, bool)>> = BTreeMap::new();
    for row in CsvIn::open(&assets_path)?.rows() {
        let date = row.date("date")?;
        per_day.entry(date).or_default().push((
            AssetDay {
                symbol: row.str("symbol")?.to_string(),
                date,
                daily_return: row.f64("return")?,
                daily_liq_return: row.f64("liq_return")?,
                daily_vol: row.f64("vol")?,
                daily_liq_vol: row.f64("liq_vol")?,
            },
            LiquidityBetas {
                jump: row.f64("beta_jump")?,
                diffusion: row.f64("beta_diffusion")?,
            },
            row.bool("degenerate")?,
        ));
    }
    let matrices_path = dir.join("matrices.csv");
    let mut matrices = read_matrices(&matrices_path, ["date", "matrix"])?;
    let snap_path = dir.join("snapshots.csv");
    let mut snapshots = Vec::new();
    let mut symbols: Vec<String> = Vec::new();
    for row in CsvIn::open(&snap_path)?.rows() {
        let date = row.date("date")?;
        let assets = per_day
            .remove(&date)
            .ok_or_else(|| parse_err(&assets_path, format!("no asset rows for {date}")))?;
        let n = assets.len();
        let syms: Vec<String> = assets.iter().map(|a| a.0.symbol.clone()).collect();
        if symbols.is_empty() {
            symbols = syms.clone();
        }
        let key = date.to_string();
        let mut mats = Vec::with_capacity(MATRIX_NAMES.len());
        for name in MATRIX_NAMES {
            mats.push(take_matrix(&mut matrices, &key, name, n, &matrices_path)?);
        }
        let [sigma_tt, sigma_tt_liq, b_r, b_sigma, b_comp]: [DMatrix<f64>; 5] =
            mats.try_into().expect("five matrices");
        snapshots.push(LiquiditySnapshot {
            date,
            symbols: syms,
            q: DVector::from_iterator(n, assets.iter().map(|a| a.0.daily_return)),
            q_liq: DVector::from_iterator(n, assets.iter().map(|a| a.0.daily_liq_return)),
            betas: assets.iter().map(|a| a.1).collect(),
            degenerate: assets.iter().map(|a| a.2).collect(),
            asset_days: assets.into_iter().map(|a| a.0).collect(),
            sigma_tt,
            sigma_tt_liq,
            b_r,
            b_sigma,
            b_comp,
            det_jump: CappedDeterminant {
                raw: row.f64("det_jump_raw")?,
                reported: row.f64("det_jump")?,
            },
            det_diff: CappedDeterminant {
                raw: row.f64("det_diffusion_raw")?,
                reported: row.f64("det_diffusion")?,
            },
            det_comp: CappedDeterminant {
                raw: row.f64("det_composite_raw")?,
                reported: row.f64("det_composite")?,
            },
            condsvd_residual: row.f64("condsvd_residual")?,
            condsvd_regularized: row.bool("condsvd_regularized")?,
        });
    }
    let skipped = CsvIn::open(&dir.join("skipped.csv"))?
        .rows()
        .map(|row| {
            Ok(SkippedDay {
                date: row.date("date")?,
                reason: row.str("reason")?.to_string(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(LiquidityData { symbols, snapshots, skipped })
}

const FORECAST_HEADER: [&str; 16] = [
    "date",
    "target_date",
    "pipeline",
    "status",
    "best_kind",
    "loglik_dcc",
    "loglik_adcc",
    "det_omega_dcc",
    "det_omega_adcc",
    "det_omega_best",
    "det_prior",
    "det_post_dcc",
    "det_post_adcc",
    "det_post_best",
    "det_omega_scaled",
    "det_post_linked",
];

fn write_forecast(dir: &Path, data: &ForecastData) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let path = dir.join("forecasts.csv");
    let mut out = CsvOut::create(&path, &FORECAST_HEADER)?;
    let mpath = dir.join("matrices.csv");
    let mut mout = CsvOut::create(&mpath, &["date", "pipeline", "matrix", "row", "col", "value"])?;
    for r in &data.records {
        for (pipeline, f) in [(Pipeline::Regular, &r.regular), (Pipeline::LiquidityAdjusted, &r.adjusted)] {
            let (extra_scaled, extra_linked) = match pipeline {
                Pipeline::LiquidityAdjusted => (fmt_opt(r.det_omega_scaled), fmt_opt(r.det_post_linked)),
                Pipeline::Regular => (String::new(), String::new()),
            };
            let mut row = vec![r.date.to_string(), r.target_date.to_string(), pipeline.as_str().to_string()];
            match f {
                Some(f) => {
                    row.extend([
                        "ok".to_string(),
                        f.best_kind.as_str().to_string(),
                        fmt_f64(f.loglik_dcc),
                        fmt_f64(f.loglik_adcc),
                        fmt_f64(f.det_omega.dcc),
                        fmt_f64(f.det_omega.adcc),
                        fmt_f64(f.det_omega.best),
                        fmt_f64(f.det_prior),
                        fmt_f64(f.det_post.dcc),
                        fmt_f64(f.det_post.adcc),
                        fmt_f64(f.det_post.best),
                    ]);
                    let prefix = [r.date.to_string(), pipeline.as_str().to_string()];
                    persist::write_matrix(&mut mout, &[prefix[0].clone(), prefix[1].clone(), "omega_best".into()], &f.omega_best)?;
                    persist::write_matrix(&mut mout, &[prefix[0].clone(), prefix[1].clone(), "posterior_best".into()], &f.posterior_best)?;
                }
                None => {
                    row.push("failed".to_string());
                    row.extend(std::iter::repeat_n(String::new(), 10));
                }
            }
            row.extend([extra_scaled, extra_linked]);
            out.row(row)?;
        }
    }
    out.finish()?;
    mout.finish()?;
    files.push(path);
    files.push(mpath);

    let path = dir.join("fits.csv");
    let mut out = CsvOut::create(
        &path,
        &[
            "refit_date",
            "window_start",
            "pipeline",
            "kind",
            "vecm_lag",
            "coint_rank",
            "a",
            "b",
            "g",
            "loglik",
            "converged",
            "fallback",
        ],
    )?;
    for f in &data.fits {
        for (kind, s) in [(DccKind::Dcc, &f.dcc), (DccKind::Adcc, &f.adcc)] {
            out.row([
                f.refit_date.to_string(),
                f.window_start.to_string(),
                f.pipeline.as_str().to_string(),
                kind.as_str().to_string(),
                f.vecm_lag.to_string(),
                f.coint_rank.to_string(),
                fmt_f64(s.params.a),
                fmt_f64(s.params.b),
                fmt_f64(s.params.g),
                fmt_f64(s.loglik),
                s.converged.to_string(),
                s.fallback.to_string(),
            ])?;
        }
    }
    out.finish()?;
    files.push(path);

    for (stem, table) in [("table2", data.table2()), ("table3", data.table3())] {
        match table {
            Ok(t) => {
                t.write(dir, stem)?;
                files.push(dir.join(format!("{stem}.csv")));
                files.push(dir.join(format!("{stem}.md")));
            }
            Err(e) => log::warn!("{stem} not written: {e}"),
        }
    }
    Ok(files)
}

fn load_forecast(dir: &Path, liq: &LiquidityData) -> Result<ForecastData> {
    let n = liq.symbols.len();
    let mpath = dir.join("matrices.csv");
    let csv = CsvIn::open(&mpath)?;
    let mut matrices: BTreeMap<(String, String, String), DMatrix<f64>> = BTreeMap::new();
    for row in csv.rows() {
        let key = (
            row.str("date")?.to_string(),
            row.str("pipeline")?.to_string(),
            row.str("matrix")?.to_string(),
        );
        let (r, c) = (row.usize("row")?, row.usize("col")?);
        if r >= n || c >= n {
            return Err(parse_err(&mpath, format!("index ({r}, {c}) out of range")));
        }
        matrices.entry(key).or_insert_with(|| DMatrix::zeros(n, n))[(r, c)] = row.f64("value")?;
    }
    let path = dir.join("forecasts.csv");
    let mut records: Vec<ForecastRecord> = Vec::new();
    for row in CsvIn::open(&path)?.rows() {
        let date = row.date("date")?;
        let pipeline = pipeline_from_str(row.str("pipeline")?)
            .ok_or_else(|| parse_err(&path, format!("unknown pipeline on {date}")))?;
        let forecast = if row.str("status")? == "ok" {
            let key = |m: &str| (date.to_string(), pipeline.as_str().to_string(), m.to_string());
            let mut take = |m: &str| {
                matrices
                    .remove(&key(m))
                    .ok_or_else(|| parse_err(&mpath, format!("missing {m} for {date} {}", pipeline.as_str())))
            };
            Some(PipelineForecast {
                best_kind: kind_from_str(row.str("best_kind")?)
                    .ok_or_else(|| parse_err(&path, format!("unknown best_kind on {date}")))?,
                loglik_dcc: row.f64("loglik_dcc")?,
                loglik_adcc: row.f64("loglik_adcc")?,
                det_omega: SelectionDets {
                    dcc: row.f64("det_omega_dcc")?,
                    adcc: row.f64("det_omega_adcc")?,
                    best: row.f64("det_omega_best")?,
                },
                det_prior: row.f64("det_prior")?,
                det_post: SelectionDets {
                    dcc: row.f64("det_post_dcc")?,
                    adcc: row.f64("det_post_adcc")?,
                    best: row.f64("det_post_best")?,
                },
                omega_best: take("omega_best")?,
                posterior_best: take("posterior_best")?,
            })
        } else {
            None
        };
        if records.last().is_none_or(|r| r.date != date) {
            records.push(ForecastRecord {
                date,
                target_date: row.date("target_date")?,
                regular: None,
                adjusted: None,
                det_omega_scaled: None,
                det_post_linked: None,
            });
        }
        let rec = records.last_mut().expect("pushed above");
        match pipeline {
            Pipeline::Regular => rec.regular = forecast,
            Pipeline::LiquidityAdjusted => {
                rec.adjusted = forecast;
                rec.det_omega_scaled = row.opt_f64("det_omega_scaled")?;
                rec.det_post_linked = row.opt_f64("det_post_linked")?;
            }
        }
    }

    let path = dir.join("fits.csv");
    let mut fits: Vec<WindowFit> = Vec::new();
    for row in CsvIn::open(&path)?.rows() {
        let pipeline = pipeline_from_str(row.str("pipeline")?)
            .ok_or_else(|| parse_err(&path, "unknown pipeline".into()))?;
        let summary = FitSummary {
            params: DccParams {
                a: row.f64("a")?,
                b: row.f64("b")?,
                g: row.f64("g")?,
            },
            loglik: row.f64("loglik")?,
            converged: row.bool("converged")?,
            fallback: row.bool("fallback")?,
        };
        match kind_from_str(row.str("kind")?) {
            Some(DccKind::Dcc) => fits.push(WindowFit {
                refit_date: row.date("refit_date")?,
                window_start: row.date("window_start")?,
                pipeline,
                vecm_lag: row.usize("vecm_lag")?,
                coint_rank: row.usize("coint_rank")?,
                dcc: summary,
                adcc: summary,
            }),
            Some(DccKind::Adcc) => {
                let last = fits
                    .last_mut()
                    .ok_or_else(|| parse_err(&path, "adcc row without a dcc row".into()))?;
                last.adcc = summary;
            }
            None => return Err(parse_err(&path, "unknown kind".into())),
        }
    }
    Ok(ForecastData { records, fits })
}

fn write_backtest(dir: &Path, results: &[BacktestResult], symbols: &[String]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for r in results {
        let path = dir.join(format!("variant_{}.csv", r.variant.id));
        let mut header: Vec<String> = vec!["formation_date".into(), "date".into()];
        header.extend(symbols.iter().map(|s| format!("w_{s}")));
        header.extend(["cash".into(), "realized_return".into(), "carried".into()]);
        let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
        let mut out = CsvOut::create(&path, &header_refs)?;
        let failed: BTreeSet<NaiveDate> = r.failed_days.iter().copied().collect();
        for k in 0..r.realized.len() {
            let mut row = vec![r.formation_dates[k].to_string(), r.dates[k].to_string()];
            row.extend(r.weights[k].iter().map(|w| fmt_f64(*w)));
            row.push(fmt_f64(r.realized[k]));
            row.push(failed.contains(&r.formation_dates[k]).to_string());
            out.row(row)?;
        }
        out.finish()?;
        files.push(path);
    }
    report::table4(results).write(dir, "table4")?;
    files.push(dir.join("table4.csv"));
    files.push(dir.join("table4.md"));
    Ok(files)
}

fn load_backtest(dir: &Path, variants: &[PortfolioVariant], liq: &LiquidityData, ppy: f64) -> Result<Vec<BacktestResult>> {
    variants
        .iter()
        .map(|&variant| {
            let path = dir.join(format!("variant_{}.csv", variant.id));
            let mut r = BacktestResult {
                variant,
                formation_dates: Vec::new(),
                dates: Vec::new(),
                weights: Vec::new(),
                realized: Vec::new(),
                sharpe: portfolio::SharpeRatio {
                    value: f64::NAN,
                    mean: f64::NAN,
                    std: f64::NAN,
                    degenerate: true,
                },
                failed_days: Vec::new(),
            };
            for row in CsvIn::open(&path)?.rows() {
                let formation = row.date("formation_date")?;
                r.formation_dates.push(formation);
                r.dates.push(row.date("date")?);
                let mut w = liq
                    .symbols
                    .iter()
                    .map(|s| row.f64(&format!("w_{s}")))
                    .collect::<Result<Vec<_>>>()?;
                w.push(row.f64("cash")?);
                r.weights.push(w);
                r.realized.push(row.f64("realized_return")?);
                if row.bool("carried")? {
                    r.failed_days.push(formation);
                }
            }
            r.sharpe = portfolio::sharpe_annualized(&r.realized, ppy)?;
            Ok(r)
        })
        .collect()
}
