//! Wall-clock scaling of the 2D scan.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scan2d::{scan2d_forward_into, scan2d_forward_par_into, scan2d_oracle, Scan2dOutput, ORACLE_MAX_POSITIONS};
use crate::tensor::Float;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Seq,
    Par,
    Oracle,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Seq => "seq",
            Variant::Par => "par",
            Variant::Oracle => "oracle",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seq" => Ok(Variant::Seq),
            "par" => Ok(Variant::Par),
            "oracle" => Ok(Variant::Oracle),
            _ => Err(Error::Config(format!("unknown bench variant {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            _ => Err(Error::Config(format!("unknown precision {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    /// Square grid sides.
    pub sizes: Vec<usize>,
    pub variants: Vec<Variant>,
    pub precisions: Vec<Precision>,
    /// State planes per scan.
    pub state_dim: usize,
    /// Each measurement repeats the scan until at least this much time has
    /// passed and reports the mean per call.
    pub min_time: Duration,
    /// Independent measurements per row; the median is reported.
    pub samples: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![64, 128, 256, 512],
            variants: vec![Variant::Seq, Variant::Par],
            precisions: vec![Precision::F32],
            state_dim: 4,
            min_time: Duration::from_millis(100),
            samples: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub size: usize,
    pub variant: Variant,
    pub precision: Precision,
    pub millis: f64,
}

pub const CSV_HEADER: &str = "size,variant,precision,millis";

impl BenchRow {
    pub fn csv(&self) -> String {
        format!("{},{},{},{:.6}", self.size, self.variant, self.precision, self.millis)
    }

    pub fn positions(&self) -> usize {
        self.size * self.size
    }
}

fn inputs<T: Float>(side: usize, n: usize, seed: u64) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = n * side * side;
    let a = (0..len).map(|_| T::lit(rng.random_range(0.5..0.99))).collect();
    let b = (0..len).map(|_| T::lit(rng.random_range(-1.0..1.0))).collect();
    let c = (0..len).map(|_| T::lit(rng.random_range(-1.0..1.0))).collect();
    (a, b, c)
}

fn time_variant<T: Float>(variant: Variant, side: usize, cfg: &BenchConfig) -> Result<f64> {
    let (a, b, c) = inputs::<T>(side, cfg.state_dim, cfg.seed);
    // outputs are reused across calls so the allocator stays out of the timing
    let mut out = Scan2dOutput::empty();
    let mut run = || -> Result<()> {
        match variant {
            Variant::Seq => scan2d_forward_into(&a, &b, &c, side, side, &mut out),
            Variant::Par => scan2d_forward_par_into(&a, &b, &c, side, side, &mut out),
            Variant::Oracle => scan2d_oracle(&a, &b, side, side).map(drop),
        }
    };
    run()?;
    let mut per_call = Vec::with_capacity(cfg.samples.max(1));
    for _ in 0..cfg.samples.max(1) {
        let start = Instant::now();
        let mut iters = 0u32;
        while start.elapsed() < cfg.min_time || iters == 0 {
            run()?;
            iters += 1;
        }
        per_call.push(start.elapsed().as_secs_f64() * 1e3 / f64::from(iters));
    }
    per_call.sort_by(f64::total_cmp);
    Ok(per_call[per_call.len() / 2])
}

/// Times every (size, variant, precision) combination. The oracle variant is
/// refused for grids above [`ORACLE_MAX_POSITIONS`].
pub fn run(cfg: &BenchConfig, mut on_row: impl FnMut(&BenchRow)) -> Result<Vec<BenchRow>> {
    if cfg.variants.contains(&Variant::Oracle) {
        if let Some(&s) = cfg.sizes.iter().find(|&&s| s * s > ORACLE_MAX_POSITIONS) {
            return Err(Error::TooLarge(s * s, ORACLE_MAX_POSITIONS));
        }
    }
    if cfg.sizes.contains(&0) || cfg.state_dim == 0 {
        return Err(Error::Config("bench sizes and state_dim must be positive".into()));
    }
    let mut rows = Vec::new();
    for &precision in &cfg.precisions {
        for &variant in &cfg.variants {
            for &size in &cfg.sizes {
                let millis = match precision {
                    Precision::F32 => time_variant::<f32>(variant, size, cfg)?,
                    Precision::F64 => time_variant::<f64>(variant, size, cfg)?,
                };
                let row = BenchRow {
                    size,
                    variant,
                    precision,
                    millis,
                };
                on_row(&row);
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Slope of runtime against pixel count for each (variant, precision) group.
pub fn slopes(rows: &[BenchRow]) -> Vec<(Variant, Precision, f64)> {
    let mut groups: Vec<(Variant, Precision)> = Vec::new();
    for r in rows {
        if !groups.contains(&(r.variant, r.precision)) {
            groups.push((r.variant, r.precision));
        }
    }
    groups
        .into_iter()
        .filter_map(|(v, p)| {
            let pts: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.variant == v && r.precision == p)
                .map(|r| (r.positions() as f64, r.millis))
                .collect();
            log_log_slope(&pts).map(|s| (v, p, s))
        })
        .collect()
}
