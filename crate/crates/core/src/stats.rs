//! Descriptive statistics, histograms and pooled two-sample t-tests.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::dcc::DccParams;
use crate::error::{Error, Result};

/// Reporting thresholds for determinant series.
pub const CAP: f64 = 10.0;
pub const HIGH_THRESHOLD: f64 = 1.0;
pub const LOW_THRESHOLD: f64 = 0.10;
pub const DEFAULT_BINS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DescriptiveRow {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub median: f64,
    pub max: f64,
    pub n_at_cap: usize,
    pub n_ge_1: usize,
    pub n_le_0_10: usize,
    pub pct_at_cap: f64,
    pub pct_ge_1: f64,
    pub pct_le_0_10: f64,
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sum of squared deviations from the mean.
fn sum_sq_dev(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum()
}

fn median(x: &[f64]) -> f64 {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Statistics of a series already capped at [`CAP`]. The standard deviation
/// is the sample one and is 0 for a single value.
pub fn descriptive_table(values: &[f64]) -> Result<DescriptiveRow> {
    if values.is_empty() {
        return Err(Error::InsufficientData("descriptive statistics of an empty series".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("series has non-finite values".into()));
    }
    let n = values.len();
    let std = if n > 1 { (sum_sq_dev(values) / (n - 1) as f64).sqrt() } else { 0.0 };
    let n_at_cap = values.iter().filter(|&&v| v >= CAP).count();
    let n_ge_1 = values.iter().filter(|&&v| v >= HIGH_THRESHOLD).count();
    let n_le_0_10 = values.iter().filter(|&&v| v <= LOW_THRESHOLD).count();
    let pct = |k: usize| 100.0 * k as f64 / n as f64;
    Ok(DescriptiveRow {
        count: n,
        mean: mean(values),
        std,
        min: values.iter().copied().fold(f64::INFINITY, f64::min),
        median: median(values),
        max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        n_at_cap,
        n_ge_1,
        n_le_0_10,
        pct_at_cap: pct(n_at_cap),
        pct_ge_1: pct(n_ge_1),
        pct_le_0_10: pct(n_le_0_10),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.counts.len() as f64
    }

    pub fn edges(&self) -> Vec<f64> {
        let w = self.width();
        (0..=self.counts.len()).map(|i| self.lo + w * i as f64).collect()
    }
}

/// Uniform bins over `[lo, hi]`; bins are left-closed except the last, which
/// also holds `hi`. Values outside the range go to the end bins.
pub fn histogram(values: &[f64], bins: usize, range: (f64, f64)) -> Result<Histogram> {
    let (lo, hi) = range;
    if bins == 0 {
        return Err(Error::InvalidInput("histogram needs at least one bin".into()));
    }
    if !(hi > lo) {
        return Err(Error::InvalidInput(format!("empty histogram range [{lo}, {hi}]")));
    }
    let mut counts = vec![0usize; bins];
    let width = (hi - lo) / bins as f64;
    for &v in values {
        let idx = ((v - lo) / width).floor();
        let idx = if idx.is_nan() || idx < 0.0 { 0 } else { (idx as usize).min(bins - 1) };
        counts[idx] += 1;
    }
    Ok(Histogram { lo, hi, counts })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Sides {
    Two,
    Less,
    Greater,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TTestResult {
    pub t_value: f64,
    pub dof: usize,
    pub p_two_sided: f64,
    pub p_greater: f64,
    pub p_less: f64,
    pub sides: Sides,
    /// Zero pooled variance.
    pub degenerate: bool,
}

impl TTestResult {
    /// p-value of the requested alternative.
    pub fn p_value(&self) -> f64 {
        match self.sides {
            Sides::Two => self.p_two_sided,
            Sides::Less => self.p_less,
            Sides::Greater => self.p_greater,
        }
    }

    pub fn stars(&self) -> &'static str {
        significance_stars(self.p_value())
    }
}

/// `***` below 1%, `**` below 5%, `*` below 10%.
pub fn significance_stars(p: f64) -> &'static str {
    if p < 0.01 {
        "***"
    } else if p < 0.05 {
        "**"
    } else if p < 0.10 {
        "*"
    } else {
        ""
    }
}

/// Equal-variance two-sample t-test of `mean(x) - mean(y)`.
pub fn two_sample_ttest(x: &[f64], y: &[f64], sides: Sides) -> Result<TTestResult> {
    let (n1, n2) = (x.len(), y.len());
    if n1 < 2 || n2 < 2 {
        return Err(Error::InsufficientData(format!("t-test needs at least 2 observations per group, got {n1} and {n2}")));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("t-test sample has non-finite values".into()));
    }
    let dof = n1 + n2 - 2;
    let pooled = (sum_sq_dev(x) + sum_sq_dev(y)) / dof as f64;
    let diff = mean(x) - mean(y);
    let se = (pooled * (1.0 / n1 as f64 + 1.0 / n2 as f64)).sqrt();
    let degenerate = !(se > 0.0);
    let t_value = if !degenerate {
        diff / se
    } else if diff > 0.0 {
        f64::INFINITY
    } else if diff < 0.0 {
        f64::NEG_INFINITY
    } else {
        0.0
    };
    let dist = StudentsT::new(0.0, 1.0, dof as f64).map_err(|e| Error::Domain(e.to_string()))?;
    let p_less = dist.cdf(t_value);
    let p_greater = 1.0 - p_less;
    Ok(TTestResult {
        t_value,
        dof,
        p_two_sided: (2.0 * p_less.min(p_greater)).min(1.0),
        p_greater,
        p_less,
        sides,
        degenerate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Direction {
    /// Adjusted series significantly larger.
    Up,
    /// Adjusted series significantly smaller.
    Down,
    Flat,
}

impl Direction {
    pub fn arrow(self) -> &'static str {
        match self {
            Direction::Up => "↑",
            Direction::Down => "↓",
            Direction::Flat => "↔",
        }
    }
}

/// Direction of `adjusted` relative to `regular` from a test of
/// `regular - adjusted`, at the 10% level.
pub fn direction(test: &TTestResult) -> Direction {
    if test.p_less < 0.10 && test.t_value < 0.0 {
        Direction::Up
    } else if test.p_greater < 0.10 && test.t_value > 0.0 {
        Direction::Down
    } else {
        Direction::Flat
    }
}

/// Determinant series of one pipeline, one entry per out-of-sample day.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DeterminantSeries {
    pub dcc: Vec<f64>,
    pub adcc: Vec<f64>,
    pub best: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeterminantRow {
    pub model: &'static str,
    pub test: TTestResult,
    pub direction: Direction,
}

/// One-sided tests of `|regular| - |adjusted| < 0` for the dcc, adcc and
/// dcc_best selections.
pub fn determinant_tests(regular: &DeterminantSeries, adjusted: &DeterminantSeries) -> Result<Vec<DeterminantRow>> {
    let pairs = [
        ("dcc", &regular.dcc, &adjusted.dcc),
        ("adcc", &regular.adcc, &adjusted.adcc),
        ("dcc_best", &regular.best, &adjusted.best),
    ];
    pairs
        .into_iter()
        .map(|(model, x, y)| {
            if x.len() != y.len() {
                return Err(Error::Dimension(format!(
                    "{model}: regular has {} determinants, adjusted has {}",
                    x.len(),
                    y.len()
                )));
            }
            let test = two_sample_ttest(x, y, Sides::Less)?;
            Ok(DeterminantRow { model, direction: direction(&test), test })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoefficientRow {
    pub model: &'static str,
    pub coefficient: &'static str,
    pub mean_regular: f64,
    pub mean_adjusted: f64,
    pub test: TTestResult,
}

/// Two-sided tests of the DCC and ADCC coefficients, regular against
/// liquidity-adjusted, over the per-window fits.
pub fn coefficient_tests(
    dcc_regular: &[DccParams],
    dcc_adjusted: &[DccParams],
    adcc_regular: &[DccParams],
    adcc_adjusted: &[DccParams],
) -> Result<Vec<CoefficientRow>> {
    type Coef = (&'static str, fn(&DccParams) -> f64);
    let dcc_coefs: [Coef; 3] = [("a", |p| p.a), ("b", |p| p.b), ("a+b", |p| p.a + p.b)];
    let adcc_coefs: [Coef; 5] = [
        ("a", |p| p.a),
        ("b", |p| p.b),
        ("g", |p| p.g),
        ("a+b", |p| p.a + p.b),
        ("a+b+g", |p| p.a + p.b + p.g),
    ];
    let mut rows = Vec::new();
    let groups: [(&'static str, &[Coef]); 2] = [("DCC", &dcc_coefs), ("ADCC", &adcc_coefs)];
    let samples = [(dcc_regular, dcc_adjusted), (adcc_regular, adcc_adjusted)];
    for ((model, coefs), (reg, adj)) in groups.into_iter().zip(samples) {
        for &(name, f) in coefs {
            let x: Vec<f64> = reg.iter().map(f).collect();
            let y: Vec<f64> = adj.iter().map(f).collect();
            rows.push(CoefficientRow {
                model,
                coefficient: name,
                mean_regular: mean(&x),
                mean_adjusted: mean(&y),
                test: two_sample_ttest(&x, &y, Sides::Two)?,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal, Uniform};

    use super::*;

    #[test]
    fn hand_counted_table() {
        let r = descriptive_table(&[10.0, 0.5, 0.05]).unwrap();
        assert_eq!((r.count, r.n_at_cap, r.n_ge_1, r.n_le_0_10), (3, 1, 1, 1));
        assert_eq!(r.median, 0.5);
        assert!((r.pct_at_cap - 100.0 / 3.0).abs() < 1e-10);
        assert!(descriptive_table(&[]).is_err());
    }

    #[test]
    fn constant_series() {
        let r = descriptive_table(&[1.0; 7]).unwrap();
        assert_eq!((r.mean, r.median, r.std), (1.0, 1.0, 0.0));
        let h = histogram(&[1.0; 7], DEFAULT_BINS, (0.0, CAP)).unwrap();
        assert_eq!(h.counts.iter().filter(|&&c| c > 0).count(), 1);
    }

    #[test]
    fn cap_lands_in_last_bin() {
        let h = histogram(&[10.0, 0.0, 9.99], 50, (0.0, 10.0)).unwrap();
        assert_eq!(h.counts[49], 2);
        assert_eq!(h.counts[0], 1);
        assert_eq!(h.edges().len(), 51);
    }

    #[test]
    fn uniform_values_fill_bins_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let u = Uniform::new(0.0, 10.0).unwrap();
        let n = 20_000;
        let v: Vec<f64> = (0..n).map(|_| u.sample(&mut rng)).collect();
        let h = histogram(&v, 10, (0.0, 10.0)).unwrap();
        let expected = n as f64 / 10.0;
        let sd = (n as f64 * 0.1 * 0.9).sqrt();
        for c in h.counts {
            assert!((c as f64 - expected).abs() < 3.0 * sd, "{c}");
        }
    }

    #[test]
    fn dof_for_equal_groups() {
        let x: Vec<f64> = (0..1877).map(|i| (i % 13) as f64).collect();
        let y: Vec<f64> = (0..1877).map(|i| (i % 7) as f64).collect();
        assert_eq!(two_sample_ttest(&x, &y, Sides::Two).unwrap().dof, 3752);
        let x: Vec<f64> = (0..2429).map(|i| (i % 5) as f64).collect();
        assert_eq!(two_sample_ttest(&x, &x, Sides::Two).unwrap().dof, 4856);
    }

    #[test]
    fn identical_samples() {
        let x = [0.1, 0.4, 0.2, 0.9];
        let r = two_sample_ttest(&x, &x, Sides::Less).unwrap();
        assert_eq!(r.t_value, 0.0);
        assert!((r.p_two_sided - 1.0).abs() < 1e-12);
        assert_eq!(r.stars(), "");
        assert_eq!(direction(&r), Direction::Flat);
    }

    /// Textbook pooled t and the two-sided p from the regularized incomplete beta.
    fn oracle(x: &[f64], y: &[f64]) -> (f64, f64) {
        let (n1, n2) = (x.len() as f64, y.len() as f64);
        let m1 = x.iter().sum::<f64>() / n1;
        let m2 = y.iter().sum::<f64>() / n2;
        let v1 = x.iter().map(|v| v * v).sum::<f64>() / n1 - m1 * m1;
        let v2 = y.iter().map(|v| v * v).sum::<f64>() / n2 - m2 * m2;
        let sp2 = (n1 * v1 + n2 * v2) / (n1 + n2 - 2.0);
        let t = (m1 - m2) / (sp2 * (1.0 / n1 + 1.0 / n2)).sqrt();
        let nu = n1 + n2 - 2.0;
        let p = statrs::function::beta::beta_reg(nu / 2.0, 0.5, nu / (nu + t * t));
        (t, p)
    }

    #[test]
    fn matches_textbook_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Normal::new(0.0, 1.0).unwrap();
        let b = Normal::new(0.3, 1.2).unwrap();
        for n in [15usize, 80, 400] {
            let x: Vec<f64> = (0..n).map(|_| a.sample(&mut rng)).collect();
            let y: Vec<f64> = (0..n + 7).map(|_| b.sample(&mut rng)).collect();
            let r = two_sample_ttest(&x, &y, Sides::Two).unwrap();
            let (t, p) = oracle(&x, &y);
            assert!((r.t_value - t).abs() < 1e-8, "{} vs {t}", r.t_value);
            assert!((r.p_two_sided - p).abs() < 1e-8);
        }
    }

    #[test]
    fn stars_thresholds() {
        assert_eq!(significance_stars(0.009), "***");
        assert_eq!(significance_stars(0.01), "**");
        assert_eq!(significance_stars(0.049), "**");
        assert_eq!(significance_stars(0.05), "*");
        assert_eq!(significance_stars(0.0999), "*");
        assert_eq!(significance_stars(0.10), "");
    }

    #[test]
    fn zero_variance_is_flagged() {
        let r = two_sample_ttest(&[1.0, 1.0], &[2.0, 2.0], Sides::Less).unwrap();
        assert!(r.degenerate && r.t_value == f64::NEG_INFINITY && r.p_less == 0.0);
    }

    #[test]
    fn separated_determinants_point_up() {
        let reg = DeterminantSeries {
            dcc: (0..50).map(|i| 1.0 + 0.01 * (i % 5) as f64).collect(),
            adcc: (0..50).map(|i| 1.0 + 0.02 * (i % 3) as f64).collect(),
            best: (0..50).map(|i| 1.0 + 0.01 * (i % 4) as f64).collect(),
        };
        let adj = DeterminantSeries {
            dcc: reg.dcc.iter().map(|v| v + 2.0).collect(),
            adcc: reg.adcc.iter().map(|v| v + 2.0).collect(),
            best: reg.best.iter().map(|v| v + 2.0).collect(),
        };
        let rows = determinant_tests(&reg, &adj).unwrap();
        assert_eq!(rows.len(), 3);
        for r in &rows {
            assert!(r.test.p_less < 1e-10 && r.direction == Direction::Up);
        }
        let same = determinant_tests(&reg, &reg).unwrap();
        assert!(same.iter().all(|r| r.test.t_value == 0.0 && r.direction == Direction::Flat));
        let short = DeterminantSeries { dcc: vec![1.0, 2.0], ..adj.clone() };
        assert!(matches!(determinant_tests(&reg, &short), Err(Error::Dimension(_))));
    }

    #[test]
    fn coefficient_shift_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let mut make = |shift: f64| -> Vec<DccParams> {
            (0..100)
                .map(|_| DccParams {
                    a: 0.05 + noise.sample(&mut rng),
                    b: 0.8 + shift + noise.sample(&mut rng),
                    g: 0.01 + noise.sample(&mut rng).abs(),
                })
                .collect()
        };
        let reg = make(0.0);
        let adj = make(0.1);
        let rows = coefficient_tests(&reg, &adj, &reg, &reg).unwrap();
        assert_eq!(rows.len(), 8);
        let b_row = rows.iter().find(|r| r.model == "DCC" && r.coefficient == "b").unwrap();
        assert_eq!(b_row.test.stars(), "***");
        assert!(rows.iter().filter(|r| r.model == "ADCC").all(|r| r.test.t_value == 0.0));
    }

    proptest! {
        #[test]
        fn ttest_identities(seed in 0u64..1000, n1 in 2usize..40, n2 in 2usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = Normal::new(0.0, 1.0).unwrap();
            let x: Vec<f64> = (0..n1).map(|_| d.sample(&mut rng)).collect();
            let y: Vec<f64> = (0..n2).map(|_| d.sample(&mut rng)).collect();
            let r = two_sample_ttest(&x, &y, Sides::Two).unwrap();
            prop_assert_eq!(r.dof, n1 + n2 - 2);
            prop_assert!((r.p_greater + r.p_less - 1.0).abs() < 1e-10);
            prop_assert!((r.p_two_sided - 2.0 * r.p_greater.min(r.p_less)).abs() < 1e-12);
        }

        #[test]
        fn counts_partition(values in prop::collection::vec(0.0f64..=10.0, 1..200)) {
            let r = descriptive_table(&values).unwrap();
            let mid = values.iter().filter(|&&v| v > LOW_THRESHOLD && v < HIGH_THRESHOLD).count();
            prop_assert_eq!(r.n_le_0_10 + mid + r.n_ge_1, r.count);
            prop_assert!(r.n_at_cap <= r.n_ge_1 && r.n_ge_1 <= r.count);
            prop_assert!((r.pct_ge_1 - 100.0 * r.n_ge_1 as f64 / r.count as f64).abs() < 1e-10);
            let h = histogram(&values, DEFAULT_BINS, (0.0, CAP)).unwrap();
            prop_assert_eq!(h.counts.iter().sum::<usize>(), values.len());
        }
    }
}
