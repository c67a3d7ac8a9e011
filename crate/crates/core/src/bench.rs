//! Wall-clock scaling study: the two scan routes against a naive quadratic
//! self-attention forward, over a geometric grid of sequence lengths.
//!
//! CSV schema (one row per kernel and grid point):
//! `kernel,L,C,N,threads,repetitions,median_s,min_s,max_s,throughput`,
//! where `throughput` is elements per second of median time. A scan
//! processes `L*C*N` state elements. Attention processes `L*L*C`
//! score-times-value products.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::par;
use crate::real::Real;
use crate::train::config::{parse, parse_assignments};
use crate::ssm::{scan_parallel, scan_sequential};
use crate::tensor::Tensor;

pub const CSV_HEADER: &str = "kernel,L,C,N,threads,repetitions,median_s,min_s,max_s,throughput";
pub const MIN_REPETITIONS: usize = 5;
const SCAN_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Kernel {
    ScanParallel,
    ScanSequential,
    Attention,
}

impl Kernel {
    pub const ALL: [Kernel; 3] = [Kernel::ScanParallel, Kernel::ScanSequential, Kernel::Attention];

    pub fn id(self) -> &'static str {
        match self {
            Kernel::ScanParallel => "scan_parallel",
            Kernel::ScanSequential => "scan_sequential",
            Kernel::Attention => "attention_naive",
        }
    }

    /// Work units counted by `throughput`.
    pub fn elements(self, l: usize, c: usize, n: usize) -> f64 {
        match self {
            Kernel::ScanParallel | Kernel::ScanSequential => (l * c * n) as f64,
            Kernel::Attention => l as f64 * l as f64 * c as f64,
        }
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Kernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Kernel::ALL
            .into_iter()
            .find(|k| k.id() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown kernel `{s}` (scan_parallel, scan_sequential, attention_naive)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    pub kernel: Kernel,
    pub l: usize,
    pub c: usize,
    pub n: usize,
    pub threads: usize,
    pub repetitions: usize,
    pub median_s: f64,
    pub min_s: f64,
    pub max_s: f64,
    pub throughput: f64,
}

impl BenchRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.6e},{:.6e},{:.6e},{:.6e}",
            self.kernel, self.l, self.c, self.n, self.threads, self.repetitions, self.median_s, self.min_s, self.max_s, self.throughput
        )
    }
}

pub fn write_csv(out: &mut dyn Write, records: &[BenchRecord]) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in records {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Median of a non-empty sample; the mean of the middle pair for even sizes.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 || points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return Err(Error::InvalidArgument("slope fit needs at least two positive points".into()));
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("slope fit needs at least two distinct x values".into()));
    }
    Ok(sxy / sxx)
}

/// `[2^lo, 2^(lo+1), ..., 2^hi]`.
pub fn pow2_grid(lo: u32, hi: u32) -> Vec<usize> {
    (lo..=hi).map(|e| 1usize << e).collect()
}

/// Query rows per attention block; the `[ATTENTION_BLOCK, L]` score tile is
/// the only quadratic-in-`L` buffer alive at once.
const ATTENTION_BLOCK: usize = 64;

/// Naive single-head self-attention with `q = k = v = x` (`[L, C]`):
/// `softmax(x x^T / sqrt(C)) x`. Every score is materialized (one query block
/// at a time), so work is `O(L^2 C)`.
pub fn attention_naive(x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let &[l, c] = x.shape() else {
        return Err(Error::InvalidArgument(format!("attention: x must be [L, C], got {:?}", x.shape())));
    };
    let xs = x.data();
    let scale = 1.0 / (c as f32).sqrt();
    let mut out = vec![0.0f32; l * c];
    par::for_each_block_mut(&mut out, ATTENTION_BLOCK * c, |block, out| {
        let q0 = block * ATTENTION_BLOCK;
        let rows = out.len() / c;
        let q = &xs[q0 * c..(q0 + rows) * c];
        let mut scores = vec![0.0f32; rows * l];
        // scores = scale * q @ x^T
        f32::gemm(rows, c, l, scale, q, c as isize, 1, xs, 1, c as isize, 0.0, &mut scores, l as isize, 1);
        let mut totals = vec![0.0f32; rows];
        for (row, total) in scores.chunks_exact_mut(l).zip(&mut totals) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            for s in row.iter_mut() {
                *s = (*s - max).exp();
            }
            *total = row.iter().sum();
        }
        // out = weights @ x, then normalize each row
        f32::gemm(rows, l, c, 1.0, &scores, l as isize, 1, xs, c as isize, 1, 0.0, out, c as isize, 1);
        for (o, total) in out.chunks_exact_mut(c).zip(&totals) {
            o.iter_mut().for_each(|v| *v /= total);
        }
    });
    Tensor::new([l, c], out)
}

struct ScanInputs {
    abar: Tensor<f32>,
    bbar: Tensor<f32>,
    x: Tensor<f32>,
    cmat: Tensor<f32>,
    d: Tensor<f32>,
}

impl ScanInputs {
    fn random(l: usize, c: usize, n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |shape: Vec<usize>, lo: f64, hi: f64| Tensor::uniform(shape, lo, hi, &mut rng);
        ScanInputs {
            abar: uniform(vec![l, c, n], 0.5, 0.999),
            bbar: uniform(vec![l, c, n], -0.1, 0.1),
            x: uniform(vec![l, c], -1.0, 1.0),
            cmat: uniform(vec![l, n], -1.0, 1.0),
            d: uniform(vec![c], -1.0, 1.0),
        }
    }
}

/// Times `kernel` at one grid point: `warmup` discarded runs, then
/// `repetitions` timed ones on inputs built once up front from `seed`.
#[allow(clippy::too_many_arguments)]
pub fn time_kernel(
    kernel: Kernel,
    l: usize,
    c: usize,
    n: usize,
    threads: usize,
    repetitions: usize,
    warmup: usize,
    seed: u64,
) -> Result<BenchRecord> {
    if repetitions < MIN_REPETITIONS {
        return Err(Error::InvalidArgument(format!(
            "bench: at least {MIN_REPETITIONS} repetitions required, got {repetitions}"
        )));
    }
    if l == 0 || c == 0 || n == 0 {
        return Err(Error::InvalidArgument(format!("bench: empty problem L={l} C={c} N={n}")));
    }
    let seed = seed ^ (l as u64) << 20 ^ (c as u64) << 8 ^ n as u64;
    let times = par::with_threads(threads, || -> Result<Vec<f64>> {
        let mut run: Box<dyn FnMut() -> Result<()>> = match kernel {
            Kernel::Attention => {
                let x = Tensor::uniform(vec![l, c], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
                Box::new(move || attention_naive(&x).map(drop))
            }
            Kernel::ScanParallel => {
                let s = ScanInputs::random(l, c, n, seed);
                Box::new(move || scan_parallel(&s.abar, &s.bbar, &s.x, &s.cmat, &s.d, SCAN_CHUNK).map(drop))
            }
            Kernel::ScanSequential => {
                let s = ScanInputs::random(l, c, n, seed);
                Box::new(move || scan_sequential(&s.abar, &s.bbar, &s.x, &s.cmat, &s.d).map(drop))
            }
        };
        for _ in 0..warmup {
            run()?;
        }
        (0..repetitions)
            .map(|_| {
                let start = Instant::now();
                run()?;
                Ok(start.elapsed().as_secs_f64())
            })
            .collect()
    })?;
    let median_s = median(&times);
    Ok(BenchRecord {
        kernel,
        l,
        c,
        n,
        threads,
        repetitions,
        median_s,
        min_s: times.iter().copied().fold(f64::INFINITY, f64::min),
        max_s: times.iter().copied().fold(0.0, f64::max),
        throughput: kernel.elements(l, c, n) / median_s,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchPlan {
    pub kernels: Vec<Kernel>,
    /// Sequence lengths for the scans.
    pub scan_lengths: Vec<usize>,
    /// Attention is quadratic, so it gets its own, shorter grid.
    pub attention_lengths: Vec<usize>,
    pub channels: Vec<usize>,
    pub state: usize,
    pub threads: usize,
    pub repetitions: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchPlan {
    fn default() -> Self {
        BenchPlan {
            kernels: Kernel::ALL.to_vec(),
            scan_lengths: pow2_grid(10, 16),
            attention_lengths: pow2_grid(8, 12),
            channels: vec![8, 16],
            state: 16,
            threads: 1,
            repetitions: MIN_REPETITIONS,
            warmup: 1,
            seed: 0,
        }
    }
}

fn join<V: ToString>(values: &[V]) -> String {
    values.iter().map(V::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list<V: FromStr>(key: &str, value: &str) -> Result<Vec<V>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

impl BenchPlan {
    /// Applies one `key = value` assignment; lists are comma-separated.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "kernels" => self.kernels = parse_list(key, value)?,
            "scan_lengths" => self.scan_lengths = parse_list(key, value)?,
            "attention_lengths" => self.attention_lengths = parse_list(key, value)?,
            "channels" => self.channels = parse_list(key, value)?,
            "state" => self.state = parse(key, value)?,
            "threads" => self.threads = parse(key, value)?,
            "repetitions" => self.repetitions = parse(key, value)?,
            "warmup" => self.warmup = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown bench key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.into()));
        if self.kernels.is_empty() {
            return bad("no kernels selected");
        }
        if self.scan_lengths.contains(&0) || self.attention_lengths.contains(&0) || self.channels.contains(&0) {
            return bad("lengths and channel counts must be positive");
        }
        if self.channels.is_empty() || self.state == 0 {
            return bad("channels and state must be non-empty and positive");
        }
        if self.repetitions < MIN_REPETITIONS {
            return Err(Error::Config(format!("repetitions must be at least {MIN_REPETITIONS}")));
        }
        Ok(())
    }

    /// Parses the flat text form on top of the defaults and validates.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut plan = Self::default();
        parse_assignments(text, |k, v| plan.set(k, v))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn to_text(&self) -> String {
        let kernels: Vec<&str> = self.kernels.iter().map(|k| k.id()).collect();
        format!(
            "kernels = {}\nscan_lengths = {}\nattention_lengths = {}\nchannels = {}\nstate = {}\nthreads = {}\nrepetitions = {}\nwarmup = {}\nseed = {}\n",
            kernels.join(","),
            join(&self.scan_lengths),
            join(&self.attention_lengths),
            join(&self.channels),
            self.state,
            self.threads,
            self.repetitions,
            self.warmup,
            self.seed
        )
    }

    /// Every `(kernel, L, C)` point of the plan, in a stable order.
    pub fn run(&self, mut progress: impl FnMut(&BenchRecord)) -> Result<Vec<BenchRecord>> {
        let mut records = Vec::new();
        for &kernel in &self.kernels {
            let lengths = match kernel {
                Kernel::Attention => &self.attention_lengths,
                _ => &self.scan_lengths,
            };
            for &c in &self.channels {
                for &l in lengths {
                    let r = time_kernel(kernel, l, c, self.state, self.threads, self.repetitions, self.warmup, self.seed)?;
                    progress(&r);
                    records.push(r);
                }
            }
        }
        Ok(records)
    }
}

/// Log-log slope of median time against `L` for one kernel at one `C`,
/// restricted to `L >= min_l`.
pub fn length_slope(records: &[BenchRecord], kernel: Kernel, c: usize, min_l: usize) -> Result<f64> {
    let points: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| r.kernel == kernel && r.c == c && r.l >= min_l)
        .map(|r| (r.l as f64, r.median_s))
        .collect();
    loglog_slope(&points)
}

/// Median-time ratio between `2c` and `c` channels at length `l`.
pub fn channel_doubling_ratio(records: &[BenchRecord], kernel: Kernel, l: usize, c: usize) -> Result<f64> {
    let find = |cc: usize| {
        records
            .iter()
            .find(|r| r.kernel == kernel && r.l == l && r.c == cc)
            .map(|r| r.median_s)
            .ok_or_else(|| Error::InvalidArgument(format!("no {kernel} record at L={l}, C={cc}")))
    };
    Ok(find(2 * c)? / find(c)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn median_of_odd_and_even_samples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn slope_of_exact_power_laws() {
        for k in [1.0, 2.0, 0.5] {
            let pts: Vec<(f64, f64)> = (1..6).map(|i| (2f64.powi(i), 3.0 * 2f64.powi(i).powf(k))).collect();
            assert!((loglog_slope(&pts).unwrap() - k).abs() < 1e-12);
        }
        assert!(loglog_slope(&[(1.0, 1.0)]).is_err());
        assert!(loglog_slope(&[(2.0, 1.0), (2.0, 3.0)]).is_err());
        assert!(loglog_slope(&[(1.0, 0.0), (2.0, 3.0)]).is_err());
    }

    #[test]
    fn attention_matches_dense_softmax() {
        let x = Tensor::<f64>::from_f64([3, 2], &[0.1, -0.4, 0.7, 0.2, -0.3, 0.5]).unwrap().cast::<f32>();
        let y = attention_naive(&x).unwrap();
        let xs: Vec<f64> = x.data().iter().map(|&v| f64::from(v)).collect();
        for i in 0..3 {
            let s: Vec<f64> = (0..3)
                .map(|j| (xs[2 * i] * xs[2 * j] + xs[2 * i + 1] * xs[2 * j + 1]) / 2f64.sqrt())
                .collect();
            let z: f64 = s.iter().map(|v| v.exp()).sum();
            for ch in 0..2 {
                let want: f64 = (0..3).map(|j| s[j].exp() / z * xs[2 * j + ch]).sum();
                assert!((f64::from(y.data()[2 * i + ch]) - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn records_serialize_with_the_documented_columns() {
        let r = time_kernel(Kernel::ScanParallel, 128, 2, 4, 1, 5, 1, 0).unwrap();
        assert_eq!(r.repetitions, 5);
        assert!(r.min_s <= r.median_s && r.median_s <= r.max_s);
        assert!((r.throughput - 128.0 * 8.0 / r.median_s).abs() <= 1e-9 * r.throughput);
        let mut out = Vec::new();
        write_csv(&mut out, &[r]).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines[1].split(',').count(), CSV_HEADER.split(',').count());
        assert!(lines[1].starts_with("scan_parallel,128,2,4,1,5,"));
    }

    #[test]
    fn too_few_repetitions_are_rejected() {
        assert!(time_kernel(Kernel::Attention, 16, 2, 1, 1, 4, 0, 0).is_err());
        assert!(time_kernel(Kernel::ScanSequential, 0, 2, 1, 1, 5, 0, 0).is_err());
    }

    #[test]
    fn plan_covers_every_point_and_slopes_are_computable() {
        let plan = BenchPlan {
            scan_lengths: pow2_grid(6, 8),
            attention_lengths: pow2_grid(4, 6),
            channels: vec![2, 4],
            state: 4,
            ..BenchPlan::default()
        };
        let records = plan.run(|_| {}).unwrap();
        assert_eq!(records.len(), 3 * 3 * 2);
        assert!(length_slope(&records, Kernel::ScanSequential, 2, 64).unwrap().is_finite());
        assert!(channel_doubling_ratio(&records, Kernel::ScanParallel, 128, 2).unwrap() > 0.0);
        assert!(channel_doubling_ratio(&records, Kernel::ScanParallel, 128, 4).is_err());
    }

    #[test]
    fn plan_text_round_trips_and_rejects_bad_plans() {
        let plan = BenchPlan {
            kernels: vec![Kernel::Attention, Kernel::ScanParallel],
            scan_lengths: vec![64, 128],
            seed: 9,
            ..BenchPlan::default()
        };
        assert_eq!(BenchPlan::from_text(&plan.to_text()).unwrap(), plan);
        assert!(BenchPlan::from_text("repetitions = 4").is_err());
        assert!(BenchPlan::from_text("kernels = flash").is_err());
        assert!(BenchPlan::from_text("channels = 0").is_err());
        assert!(BenchPlan::from_text("gpu = 1").is_err());
    }

    #[test]
    fn kernel_ids_round_trip() {
        for k in Kernel::ALL {
            assert_eq!(k.id().parse::<Kernel>().unwrap(), k);
        }
        assert!("flash".parse::<Kernel>().is_err());
    }

    proptest! {
        #[test]
        fn median_lies_within_range(v in prop::collection::vec(0.0f64..10.0, 1..20)) {
            let m = median(&v);
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(0.0, f64::max);
            prop_assert!(lo <= m && m <= hi);
        }
    }
}
