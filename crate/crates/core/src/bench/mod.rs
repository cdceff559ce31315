//! Desk-scale benchmarks: circle chain length, rule count, federation
//! fanout and concurrent client capacity.
//!
//! Every run writes `<name>.csv` (`parameter,sample_idx,value_ns`) and a
//! `<name>.txt` summary with mean and 10th/90th percentiles per point.

mod workloads;

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use workloads::{run_capacity_bench, run_chain_bench, run_fanout_bench, run_rules_bench, FanoutRun};

/// The checked-in workload definition.
pub const DEFAULT_CONFIG: &str = include_str!("bench.toml");

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub seed: u64,
    pub content_bytes: usize,
    pub satisfied_ratio: f64,
    pub chain: ChainConfig,
    pub rules: RulesConfig,
    pub fanout: FanoutConfig,
    pub capacity: CapacityConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainConfig {
    pub lengths: Vec<usize>,
    pub circles: usize,
    pub reader_memberships: usize,
    pub tags: usize,
    pub rules_per_circle: usize,
    pub predicates_per_rule: usize,
    pub warmup: usize,
    pub reps: usize,
    pub batch: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RulesConfig {
    pub counts: Vec<usize>,
    pub predicates_per_rule: usize,
    pub warmup: usize,
    pub reps: usize,
    pub batch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatencyPreset {
    Uniform,
    Geo,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FanoutConfig {
    pub asns: Vec<usize>,
    pub widths: Vec<usize>,
    pub followers_per_asn: usize,
    pub warmup: usize,
    pub reps: usize,
    pub latency: LatencyPreset,
    pub uniform_latency_ms: f64,
    pub geo_latency_ms: Vec<f64>,
    pub latency_scale: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapacityConfig {
    pub clients: Vec<usize>,
    pub duration_ms: u64,
    pub fetch_every: usize,
    pub followers: usize,
    pub fsync: bool,
}

impl BenchConfig {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self::from_toml(DEFAULT_CONFIG).expect("checked-in bench config parses")
    }
}

/// Samples measured at one sweep value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchPoint {
    pub parameter: f64,
    pub samples_ns: Vec<u64>,
    /// Operations that failed while producing this point.
    #[serde(default)]
    pub errors: u64,
}

impl BenchPoint {
    pub fn new(parameter: f64, samples_ns: Vec<u64>) -> Self {
        Self { parameter, samples_ns, errors: 0 }
    }

    pub fn mean(&self) -> f64 {
        mean(&self.samples_ns)
    }

    pub fn percentile(&self, p: f64) -> u64 {
        percentile(&self.samples_ns, p)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub experiment: String,
    pub parameter: String,
    pub points: Vec<BenchPoint>,
    /// Free-form extra numbers, e.g. throughput.
    #[serde(default)]
    pub notes: Vec<(String, f64)>,
}

impl BenchReport {
    pub fn new(experiment: impl Into<String>, parameter: impl Into<String>) -> Self {
        Self { experiment: experiment.into(), parameter: parameter.into(), points: Vec::new(), notes: Vec::new() }
    }

    /// Least-squares line through the per-point medians.
    pub fn linear_fit(&self) -> LinearFit {
        let xs: Vec<f64> = self.points.iter().map(|p| p.parameter).collect();
        let ys: Vec<f64> = self.points.iter().map(|p| p.percentile(50.0) as f64).collect();
        linear_fit(&xs, &ys)
    }

    pub fn total_errors(&self) -> u64 {
        self.points.iter().map(|p| p.errors).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("parameter,sample_idx,value_ns\n");
        for p in &self.points {
            for (i, v) in p.samples_ns.iter().enumerate() {
                let _ = writeln!(out, "{},{},{}", p.parameter, i, v);
            }
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = format!("{} (sweep over {})\n", self.experiment, self.parameter);
        let _ = writeln!(
            out,
            "{:>10} {:>8} {:>14} {:>14} {:>14} {:>7}",
            self.parameter, "samples", "mean_ns", "p10_ns", "p90_ns", "errors"
        );
        for p in &self.points {
            let _ = writeln!(
                out,
                "{:>10} {:>8} {:>14.0} {:>14} {:>14} {:>7}",
                p.parameter,
                p.samples_ns.len(),
                p.mean(),
                p.percentile(10.0),
                p.percentile(90.0),
                p.errors
            );
        }
        if self.points.len() >= 2 {
            let f = self.linear_fit();
            let _ = writeln!(
                out,
                "linear fit on medians: slope {:.1} ns, intercept {:.1} ns, r2 {:.4}",
                f.slope, f.intercept, f.r2
            );
        }
        for (k, v) in &self.notes {
            let _ = writeln!(out, "{k}: {v:.3}");
        }
        out
    }

    /// Writes `<dir>/<experiment>.csv` and `<dir>/<experiment>.txt`.
    pub fn write_to(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{}.csv", self.experiment)), self.to_csv())?;
        std::fs::write(dir.join(format!("{}.txt", self.experiment)), self.summary())
    }
}

pub fn mean(xs: &[u64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().map(|&x| x as f64).sum::<f64>() / xs.len() as f64
}

/// Nearest-rank percentile of the raw samples.
pub fn percentile(xs: &[u64], p: f64) -> u64 {
    if xs.is_empty() {
        return 0;
    }
    let mut v = xs.to_vec();
    v.sort_unstable();
    let rank = ((p / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    /// Coefficient of determination.
    pub r2: f64,
}

pub fn linear_fit(xs: &[f64], ys: &[f64]) -> LinearFit {
    let n = xs.len().min(ys.len()) as f64;
    if n < 2.0 {
        return LinearFit { slope: 0.0, intercept: ys.first().copied().unwrap_or(0.0), r2: 0.0 };
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return LinearFit { slope: 0.0, intercept: my, r2: 0.0 };
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    LinearFit { slope, intercept, r2 }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checked_in_config_parses() {
        let c = BenchConfig::default();
        assert_eq!(c.content_bytes, 256);
        assert_eq!(c.fanout.geo_latency_ms, vec![0.0, 550.0, 737.0, 526.0, 445.0]);
        assert_eq!(c.capacity.clients.first(), Some(&50));
        assert_eq!(c.capacity.clients.last(), Some(&300));
    }

    #[test]
    fn percentiles_nearest_rank() {
        let xs: Vec<u64> = (1..=10).rev().collect();
        assert_eq!(percentile(&xs, 10.0), 1);
        assert_eq!(percentile(&xs, 50.0), 5);
        assert_eq!(percentile(&xs, 90.0), 9);
        assert_eq!(percentile(&xs, 100.0), 10);
        assert_eq!(percentile(&[], 50.0), 0);
        assert_eq!(mean(&[1, 2, 3, 6]), 3.0);
    }

    #[test]
    fn fit_exact_line_and_noise() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let f = linear_fit(&xs, &[3.0, 5.0, 7.0, 9.0]);
        assert!((f.slope - 2.0).abs() < 1e-12 && (f.intercept - 1.0).abs() < 1e-12 && (f.r2 - 1.0).abs() < 1e-12);
        // sxy = 2.5, sxx = 5, syy = 5
        let f = linear_fit(&xs, &[1.0, 3.0, 2.0, 4.0]);
        assert!((f.r2 - 0.64).abs() < 1e-12, "{f:?}");
    }

    #[test]
    fn csv_layout() {
        let mut r = BenchReport::new("chain", "length");
        r.points.push(BenchPoint::new(5.0, vec![10, 20]));
        assert_eq!(r.to_csv(), "parameter,sample_idx,value_ns\n5,0,10\n5,1,20\n");
        assert!(r.summary().contains("chain"));
    }
}
