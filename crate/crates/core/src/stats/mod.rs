//! Confidence intervals, correlations with significance, and kernel density
//! estimates over per-trial metrics.

mod special;

pub use special::{inc_beta, ln_gamma, t_cdf, t_quantile, t_two_sided_p};

use serde::{Deserialize, Serialize};

use crate::error::StatsError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum IntervalKind {
    /// 95% interval from the Student-t distribution with `n − 1` degrees of freedom.
    #[default]
    T95,
    /// Two sample standard deviations either side of the mean.
    TwoSigma,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalEstimate {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    pub half_width: f64,
    pub kind: IntervalKind,
}

impl IntervalEstimate {
    pub fn low(&self) -> f64 {
        self.mean - self.half_width
    }

    pub fn high(&self) -> f64 {
        self.mean + self.half_width
    }
}

fn check_finite(xs: &[f64]) -> Result<(), StatsError> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(StatsError::NonFinite)
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation with the `n − 1` denominator.
pub fn sample_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    (ss / (xs.len() - 1) as f64).sqrt()
}

pub fn t_interval(samples: &[f64], kind: IntervalKind) -> Result<IntervalEstimate, StatsError> {
    let n = samples.len();
    if n < 2 {
        return Err(StatsError::TooFewSamples { n, min: 2 });
    }
    check_finite(samples)?;
    let m = mean(samples);
    let s = sample_std(samples);
    let half_width = match kind {
        IntervalKind::T95 => t_quantile(0.975, (n - 1) as f64) * s / (n as f64).sqrt(),
        IntervalKind::TwoSigma => 2.0 * s,
    };
    Ok(IntervalEstimate {
        mean: m,
        std: s,
        n,
        half_width,
        kind,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationMethod {
    Pearson,
    Spearman,
}

impl CorrelationMethod {
    pub fn key(self) -> &'static str {
        match self {
            Self::Pearson => "pearson",
            Self::Spearman => "spearman",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub method: CorrelationMethod,
    pub r: f64,
    pub p: f64,
    pub n: usize,
}

/// Two-sided p-value of a correlation coefficient from
/// `t = r·sqrt((n − 2)/(1 − r²))` with `n − 2` degrees of freedom.
pub fn correlation_p_value(r: f64, n: usize) -> f64 {
    if r.abs() >= 1.0 {
        return 0.0;
    }
    let df = (n - 2) as f64;
    let t = r * (df / (1.0 - r * r)).sqrt();
    t_two_sided_p(t, df)
}

/// Ranks starting at 1; tied values share the mean of their ranks.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson_r(xs: &[f64], ys: &[f64]) -> Result<f64, StatsError> {
    let (mx, my) = (mean(xs), mean(ys));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(StatsError::ZeroVariance("xs"));
    }
    if syy == 0.0 {
        return Err(StatsError::ZeroVariance("ys"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub fn correlation(
    xs: &[f64],
    ys: &[f64],
    method: CorrelationMethod,
) -> Result<CorrelationResult, StatsError> {
    if xs.len() != ys.len() {
        return Err(StatsError::LengthMismatch(xs.len(), ys.len()));
    }
    let n = xs.len();
    if n < 3 {
        return Err(StatsError::TooFewSamples { n, min: 3 });
    }
    check_finite(xs)?;
    check_finite(ys)?;
    let r = match method {
        CorrelationMethod::Pearson => pearson_r(xs, ys)?,
        CorrelationMethod::Spearman => pearson_r(&average_ranks(xs), &average_ranks(ys))?,
    };
    Ok(CorrelationResult {
        method,
        r,
        p: correlation_p_value(r, n),
        n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityEstimate {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

impl DensityEstimate {
    /// Trapezoidal integral of the density over the grid.
    pub fn integral(&self) -> f64 {
        self.grid
            .windows(2)
            .zip(self.density.windows(2))
            .map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0)
            .sum()
    }

    pub fn mode(&self) -> f64 {
        let i = (0..self.density.len()).fold(0, |b, i| if self.density[i] > self.density[b] { i } else { b });
        self.grid[i]
    }
}

/// Gaussian kernel density with Scott's bandwidth `s·n^(−1/5)`, evaluated on
/// `grid_size` evenly spaced points over `[min − 3h, max + 3h]`.
pub fn kde(samples: &[f64], grid_size: usize) -> Result<DensityEstimate, StatsError> {
    let n = samples.len();
    if n < 2 {
        return Err(StatsError::TooFewSamples { n, min: 2 });
    }
    if grid_size < 2 {
        return Err(StatsError::Degenerate(format!("grid size {grid_size}")));
    }
    check_finite(samples)?;
    let s = sample_std(samples);
    if s == 0.0 {
        return Err(StatsError::Degenerate("zero variance".into()));
    }
    let h = s * (n as f64).powf(-0.2);
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min) - 3.0 * h;
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 3.0 * h;
    let step = (hi - lo) / (grid_size - 1) as f64;
    let norm = 1.0 / (n as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let grid: Vec<f64> = (0..grid_size).map(|i| lo + step * i as f64).collect();
    let density = grid
        .iter()
        .map(|&x| {
            samples
                .iter()
                .map(|&xi| {
                    let z = (x - xi) / h;
                    (-0.5 * z * z).exp()
                })
                .sum::<f64>()
                * norm
        })
        .collect();
    Ok(DensityEstimate {
        grid,
        density,
        bandwidth: h,
    })
}
