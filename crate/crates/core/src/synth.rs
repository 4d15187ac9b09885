//! Seeded synthetic minute data with a liquidity-jump regime.
//!
//! Returns follow a one-factor model whose daily variance clusters and whose
//! factor share drifts persistently, so correlations vary over time; dollar
//! volumes follow an intraday U-shape with lognormal noise. A two-state
//! Markov chain switches the market into a regime where a random subset of
//! minutes sees volume spikes and another subset sees volume droughts. Those
//! minutes are drawn independently of the returns.

use std::path::{Path, PathBuf};

use chrono::{Days, NaiveDate, NaiveTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::marketdata::{self, AssetClass, CalendarSpec, MinuteGrid};
use crate::persist;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub assets: usize,
    pub days: usize,
    pub minutes_per_day: usize,
    pub start: NaiveDate,
    pub seed: u64,
    /// Probability of entering / leaving the liquidity-jump regime each day.
    pub p_enter_jump: f64,
    pub p_leave_jump: f64,
    /// Fraction of minutes hit by spikes and by droughts on a jump day.
    pub spike_fraction: f64,
    pub drought_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            assets: 8,
            days: 600,
            minutes_per_day: 48,
            start: NaiveDate::from_ymd_opt(2022, 1, 1).expect("valid date"),
            seed: 20240601,
            p_enter_jump: 0.15,
            p_leave_jump: 0.35,
            spike_fraction: 0.10,
            drought_fraction: 0.10,
        }
    }
}

impl SynthConfig {
    /// Calendar matching the generated grids: a crypto session of
    /// `minutes_per_day` minutes from midnight UTC.
    pub fn calendar(&self) -> Result<CalendarSpec> {
        CalendarSpec::new(self.minutes_per_day, NaiveTime::MIN, AssetClass::Crypto)
    }

    pub fn symbols(&self) -> Vec<String> {
        (1..=self.assets).map(|i| format!("SYN{i:02}")).collect()
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub calendar: CalendarSpec,
    /// Sorted by date, then symbol.
    pub grids: Vec<MinuteGrid>,
    /// Liquidity-jump regime flag per day.
    pub jump_regime: Vec<bool>,
}

fn normal(mean: f64, sd: f64) -> Normal<f64> {
    Normal::new(mean, sd).expect("valid normal")
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    if cfg.assets == 0 || cfg.days == 0 {
        return Err(Error::Config("synthetic data needs at least one asset and one day".into()));
    }
    let calendar = cfg.calendar()?;
    let t = cfg.minutes_per_day;
    let n = cfg.assets;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let z = normal(0.0, 1.0);

    let betas: Vec<f64> = (0..n).map(|_| rng.random_range(0.6..1.4)).collect();
    let idio: Vec<f64> = (0..n).map(|_| rng.random_range(0.6..1.2)).collect();
    let drift: Vec<f64> = (0..n).map(|_| rng.random_range(-0.0002..0.0008)).collect();
    let base_volume: Vec<f64> = (0..n).map(|_| 10f64.powf(rng.random_range(5.0..7.0))).collect();
    let noise = LogNormal::new(0.0, 0.4).expect("valid lognormal");
    let mut price: Vec<f64> = (0..n).map(|i| 20.0 * (i + 1) as f64).collect();

    // Daily variance with GARCH-like clustering around a 3% daily vol.
    let target = 0.03f64.powi(2);
    let mut var = target;
    let mut last_shock = 0.0f64;
    let mut log_share = 0.0f64;
    let mut jump = false;
    let mut grids = Vec::with_capacity(n * cfg.days);
    let mut jump_regime = Vec::with_capacity(cfg.days);

    for d in 0..cfg.days {
        let date = cfg
            .start
            .checked_add_days(Days::new(d as u64))
            .ok_or_else(|| Error::Config("date overflow".into()))?;
        var = 0.05 * target + 0.10 * last_shock * last_shock + 0.85 * var;
        let minute_sd = (var / t as f64).sqrt();
        jump = if jump {
            !rng.random_bool(cfg.p_leave_jump)
        } else {
            rng.random_bool(cfg.p_enter_jump)
        };
        jump_regime.push(jump);

        log_share = 0.97 * log_share + 0.2 * z.sample(&mut rng);
        let share = 0.7 * log_share.exp().clamp(0.2, 2.0);
        let factor: Vec<f64> = (0..t).map(|_| z.sample(&mut rng) * minute_sd * share).collect();
        let mut market_day = 0.0;
        for i in 0..n {
            let mut returns = Vec::with_capacity(t);
            let mut close = Vec::with_capacity(t);
            let mut volume = Vec::with_capacity(t);
            for (tau, f) in factor.iter().enumerate() {
                let eps = z.sample(&mut rng) * minute_sd * 0.7 * idio[i];
                let r = (drift[i] / t as f64 + betas[i] * f + eps).max(-0.5);
                price[i] *= 1.0 + r;
                returns.push(r);
                close.push(price[i]);
                let x = tau as f64 / (t - 1).max(1) as f64;
                let shape = 1.0 + 1.5 * (2.0 * x - 1.0).powi(2);
                let mut a = base_volume[i] / t as f64 * shape * noise.sample(&mut rng);
                if jump {
                    let u: f64 = rng.random();
                    if u < cfg.spike_fraction {
                        a *= rng.random_range(10.0..50.0);
                    } else if u < cfg.spike_fraction + cfg.drought_fraction {
                        a *= rng.random_range(0.01..0.05);
                    }
                }
                volume.push(a);
            }
            market_day += returns.iter().sum::<f64>() / n as f64;
            grids.push(MinuteGrid {
                symbol: format!("SYN{:02}", i + 1),
                date,
                returns,
                dollar_volume: volume,
                close,
            });
        }
        last_shock = market_day;
    }
    Ok(SynthDataset {
        calendar,
        grids,
        jump_regime,
    })
}

/// Write `minutes.csv` and a matching `config.toml` into `dir`; returns the
/// config path.
pub fn write_bundle(dir: &Path, cfg: &SynthConfig, window_days: usize, refit_stride: usize) -> Result<PathBuf> {
    persist::create_dir(dir)?;
    let ds = generate(cfg)?;
    marketdata::write_minute_csv(dir.join("minutes.csv"), &ds.grids, &ds.calendar)?;
    let config = format!(
        "# Synthetic {assets}-asset, {days}-day dataset (seed {seed}).\n\
         [data]\n\
         path = \"minutes.csv\"\n\
         format = \"minute\"\n\
         \n\
         [calendar]\n\
         preset = \"crypto\"\n\
         minutes_per_day = {t}\n\
         day_boundary = \"00:00\"\n\
         \n\
         [run]\n\
         window_days = {window_days}\n\
         refit_stride = {refit_stride}\n\
         tau = 1.0\n\
         variants = [1, 2, 3, 4, 5, 6]\n\
         seed = {seed}\n\
         out = \"out\"\n",
        assets = cfg.assets,
        days = cfg.days,
        seed = cfg.seed,
        t = cfg.minutes_per_day,
    );
    let path = dir.join("config.toml");
    persist::write_text(&path, &config)?;
    Ok(path)
}
