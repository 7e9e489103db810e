//! Synthetic heralded balanced-homodyne datasets.
//!
//! A probe run prepares a coherent state, pushes it through a process
//! tensor, and records one quadrature sample per successful herald at a
//! local-oscillator phase drawn from a uniform grid over [0, pi). Trial
//! counts are sized so every probe yields a comparable number of heralds
//! regardless of its success probability, and the no-herald trials are kept
//! (trials_total - heralds) because the reconstruction needs the measured
//! success probability.
//!
//! Sampling is inverse-CDF on a fixed grid over the acquisition window
//! [-5, 5] with linear interpolation; the sub-1e-4 marginal mass outside
//! the window is renormalized away. Every probe owns a ChaCha stream
//! derived from (master seed, probe index), so datasets are byte-identical
//! across runs and probes can be simulated in parallel.

use std::fmt::Write as _;
use std::path::Path;

use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::fock::{coherent_state, quadrature_pdf, QuadraturePdf, QuadraturePoint};
use crate::model::{apply_process, ProcessTensor};
use crate::{Error, Result};

/// Probes with model success probability below this are skipped: they would
/// need more than ~10^10 trials to herald at all.
pub const HERALD_FLOOR: f64 = 1e-6;
/// Points of the inverse-CDF sampling grid over the acquisition window.
pub const CDF_GRID_POINTS: usize = 2401;
/// Minimum heralded samples per probe for usable binned statistics.
pub const MIN_SAMPLES_PER_PROBE: usize = 1000;

/// Acquisition plan for one simulation run.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbePlan {
    /// Coherent probe amplitudes; each must pass the truncation-deficit gate.
    pub amplitudes: Vec<C64>,
    /// Target number of heralded samples per probe.
    pub samples_per_probe: usize,
    /// Number of LO phases uniformly covering [0, pi); phases sit at
    /// (j + 1/2) pi / n so a matching phase-binned analysis sees them at the
    /// bin centers.
    pub phase_grid: usize,
    /// Master seed; per-probe streams derive from it.
    pub seed: u64,
}

impl ProbePlan {
    /// The probe grid used throughout: `count` real amplitudes linearly
    /// spaced over [min, max].
    pub fn linear_grid(
        alpha_min: f64,
        alpha_max: f64,
        count: usize,
        samples_per_probe: usize,
        phase_grid: usize,
        seed: u64,
    ) -> Self {
        let amplitudes = (0..count)
            .map(|i| {
                let t = if count > 1 { i as f64 / (count - 1) as f64 } else { 0.0 };
                C64::new(alpha_min + (alpha_max - alpha_min) * t, 0.0)
            })
            .collect();
        Self {
            amplitudes,
            samples_per_probe,
            phase_grid,
            seed,
        }
    }

    pub fn validate(&self, spec: crate::fock::HilbertSpec) -> Result<()> {
        if self.amplitudes.is_empty() {
            return Err(Error::InvalidParam("probe plan has no amplitudes".into()));
        }
        if self.samples_per_probe < MIN_SAMPLES_PER_PROBE {
            return Err(Error::InvalidParam(format!(
                "samples_per_probe {} below statistical floor {MIN_SAMPLES_PER_PROBE}",
                self.samples_per_probe
            )));
        }
        if self.phase_grid == 0 {
            return Err(Error::InvalidParam("phase grid must be nonempty".into()));
        }
        for &alpha in &self.amplitudes {
            coherent_state(alpha, spec)?;
        }
        Ok(())
    }

    /// LO phases (j + 1/2) pi / n, j = 0..n.
    pub fn phases(&self) -> Vec<f64> {
        (0..self.phase_grid)
            .map(|j| (j as f64 + 0.5) * std::f64::consts::PI / self.phase_grid as f64)
            .collect()
    }

    /// Seed of the per-probe random stream.
    pub fn stream_seed(&self, probe_index: usize) -> u64 {
        // splitmix-style stride keeps streams distinct for any master seed
        self.seed
            .wrapping_add((probe_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }
}

/// Heralded quadrature samples of one probe.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureDataset {
    pub alpha: C64,
    /// Seed of the stream that produced this dataset.
    pub seed: u64,
    pub trials_total: u64,
    pub heralds: u64,
    pub records: Vec<QuadraturePoint>,
}

impl QuadratureDataset {
    pub fn success_measured(&self) -> f64 {
        self.heralds as f64 / self.trials_total as f64
    }
}

/// Round to 9 significant decimal digits — the dataset file precision.
/// Samples are quantized at creation so files round-trip losslessly.
pub fn quantize_sample(v: f64) -> f64 {
    format!("{v:.8e}").parse().expect("formatted float reparses")
}

/// Inverse-CDF sampler for the quadrature marginal of a normalized state at
/// one LO phase.
#[derive(Debug, Clone)]
pub struct QuadratureSampler {
    xs: Vec<f64>,
    cdf: Vec<f64>,
}

impl QuadratureSampler {
    pub fn new(pdf: &QuadraturePdf) -> Result<Self> {
        let n = CDF_GRID_POINTS;
        let (x_min, x_max) = (-5.0, 5.0);
        let h = (x_max - x_min) / (n - 1) as f64;
        let xs: Vec<f64> = (0..n).map(|i| x_min + i as f64 * h).collect();
        let vals: Vec<f64> = xs.iter().map(|&x| pdf.eval(x)).collect();
        let mut cdf = Vec::with_capacity(n);
        cdf.push(0.0);
        let mut acc = 0.0;
        for i in 1..n {
            acc += 0.5 * (vals[i - 1] + vals[i]) * h;
            cdf.push(acc);
        }
        let total = *cdf.last().unwrap();
        if total <= 0.0 {
            return Err(Error::ZeroProbability(
                "quadrature marginal carries no mass in the window".into(),
            ));
        }
        for c in &mut cdf {
            *c /= total;
        }
        Ok(Self { xs, cdf })
    }

    /// Map a uniform variate to a quadrature value by linear interpolation
    /// of the inverse CDF.
    pub fn sample_with_uniform(&self, u: f64) -> f64 {
        let n = self.cdf.len();
        let i = self.cdf.partition_point(|&c| c <= u);
        if i == 0 {
            return self.xs[0];
        }
        if i >= n {
            return self.xs[n - 1];
        }
        let (c0, c1) = (self.cdf[i - 1], self.cdf[i]);
        let t = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.0 };
        self.xs[i - 1] + t * (self.xs[i] - self.xs[i - 1])
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.gen();
        self.sample_with_uniform(u)
    }
}

/// Simulate one probe: herald count ~ Binomial(trials, p) with trials sized
/// to the plan's target sample count, then one (theta, x) record per herald.
pub fn simulate_probe(
    tensor: &ProcessTensor,
    alpha: C64,
    plan: &ProbePlan,
    probe_index: usize,
) -> Result<QuadratureDataset> {
    let spec = tensor.spec();
    let probe = coherent_state(alpha, spec)?;
    let rho_out = apply_process(tensor, &probe.density())?;
    let p = rho_out.trace().clamp(0.0, 1.0);
    if p < HERALD_FLOOR {
        return Err(Error::HeraldStarvation {
            p,
            floor: HERALD_FLOOR,
        });
    }
    let conditioned = rho_out.normalize()?;

    let seed = plan.stream_seed(probe_index);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    let trials_total = (plan.samples_per_probe as f64 / p).ceil() as u64;
    let heralds = Binomial::new(trials_total, p)
        .map_err(|e| Error::Numerical(format!("binomial herald draw: {e}")))?
        .sample(&mut rng);

    let phases = plan.phases();
    let samplers: Vec<QuadratureSampler> = phases
        .iter()
        .map(|&theta| QuadratureSampler::new(&quadrature_pdf(&conditioned, theta)?))
        .collect::<Result<_>>()?;

    let mut records = Vec::with_capacity(heralds as usize);
    for _ in 0..heralds {
        let j = rng.gen_range(0..plan.phase_grid);
        let x = samplers[j].sample(&mut rng);
        records.push(QuadraturePoint {
            theta: quantize_sample(phases[j]),
            x: quantize_sample(x),
        });
    }

    Ok(QuadratureDataset {
        alpha,
        seed,
        trials_total,
        heralds,
        records,
    })
}

/// Histogram geometry: phase bins over [0, pi), quadrature bins over
/// [x_min, x_max]. Bin edges are reproducible from these four numbers
/// alone: edge_i = x_min + i (x_max - x_min) / quad_bins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinGrid {
    pub phase_bins: usize,
    pub quad_bins: usize,
    pub x_min: f64,
    pub x_max: f64,
}

impl Default for BinGrid {
    fn default() -> Self {
        Self {
            phase_bins: 30,
            quad_bins: 601,
            x_min: -5.0,
            x_max: 5.0,
        }
    }
}

impl BinGrid {
    pub fn quad_width(&self) -> f64 {
        (self.x_max - self.x_min) / self.quad_bins as f64
    }

    pub fn quad_center(&self, q: usize) -> f64 {
        self.x_min + (q as f64 + 0.5) * self.quad_width()
    }

    pub fn phase_center(&self, b: usize) -> f64 {
        (b as f64 + 0.5) * std::f64::consts::PI / self.phase_bins as f64
    }

    /// Phase bin after folding into [0, pi).
    pub fn phase_bin(&self, theta: f64) -> usize {
        let folded = QuadraturePoint::fold_phase(theta);
        ((folded / std::f64::consts::PI * self.phase_bins as f64) as usize)
            .min(self.phase_bins - 1)
    }

    /// Quadrature bin: half-open bins, last bin closed; None = out of window.
    pub fn quad_bin(&self, x: f64) -> Option<usize> {
        if !x.is_finite() || x < self.x_min || x > self.x_max {
            return None;
        }
        if x == self.x_max {
            return Some(self.quad_bins - 1);
        }
        Some((((x - self.x_min) / self.quad_width()) as usize).min(self.quad_bins - 1))
    }
}

/// Binned heralded samples: the sufficient statistic of the likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedHistogram {
    pub grid: BinGrid,
    /// Row-major [phase_bin * quad_bins + quad_bin].
    pub counts: Vec<u64>,
    pub underflow: u64,
    pub overflow: u64,
}

impl BinnedHistogram {
    pub fn count(&self, phase_bin: usize, quad_bin: usize) -> u64 {
        self.counts[phase_bin * self.grid.quad_bins + quad_bin]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.underflow + self.overflow
    }

    /// Counts accumulated in one phase bin.
    pub fn phase_total(&self, phase_bin: usize) -> u64 {
        let w = self.grid.quad_bins;
        self.counts[phase_bin * w..(phase_bin + 1) * w].iter().sum()
    }
}

/// Deterministic binning of a dataset.
pub fn bin_dataset(ds: &QuadratureDataset, grid: BinGrid) -> Result<BinnedHistogram> {
    if ds.records.is_empty() {
        return Err(Error::InvalidParam("cannot bin an empty dataset".into()));
    }
    let mut counts = vec![0u64; grid.phase_bins * grid.quad_bins];
    let (mut underflow, mut overflow) = (0u64, 0u64);
    for rec in &ds.records {
        match grid.quad_bin(rec.x) {
            None if rec.x < grid.x_min => underflow += 1,
            None => overflow += 1,
            Some(q) => {
                let b = grid.phase_bin(rec.theta);
                counts[b * grid.quad_bins + q] += 1;
            }
        }
    }
    Ok(BinnedHistogram {
        grid,
        counts,
        underflow,
        overflow,
    })
}

const DATASET_HEADER: &str = "fsf-dataset v1";

/// Write a dataset as line-oriented text: header, metadata, then one
/// `theta x` record per line at 9 significant digits.
pub fn write_dataset(ds: &QuadratureDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::with_capacity(ds.records.len() * 32 + 128);
    let _ = writeln!(out, "{DATASET_HEADER}");
    // metadata keeps full f64 precision; only the records are fixed at 9
    // significant digits
    let _ = writeln!(out, "alpha {} {}", ds.alpha.re, ds.alpha.im);
    let _ = writeln!(out, "seed {}", ds.seed);
    let _ = writeln!(out, "trials_total {}", ds.trials_total);
    let _ = writeln!(out, "heralds {}", ds.heralds);
    let _ = writeln!(out, "records {}", ds.records.len());
    for rec in &ds.records {
        let _ = writeln!(out, "{:.8e} {:.8e}", rec.theta, rec.x);
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

/// Read a dataset written by [`write_dataset`]. A truncated or malformed
/// file is an error naming the offending line, never partial data.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<QuadratureDataset> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();

    let mut next_line = |expect: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((i, l)) => Ok((i + 1, l.to_string())),
            None => Err(parse_err(0, format!("unexpected end of file, expected {expect}"))),
        }
    };

    let (ln, header) = next_line("header")?;
    if header != DATASET_HEADER {
        return Err(parse_err(ln, format!("bad header {header:?}")));
    }

    fn fields<'a>(line: &'a str, key: &str, ln: usize) -> Result<Vec<&'a str>> {
        let mut parts = line.split_whitespace();
        if parts.next() != Some(key) {
            return Err(parse_err(ln, format!("expected field {key:?} in {line:?}")));
        }
        Ok(parts.collect())
    }
    fn num<T: std::str::FromStr>(s: &str, ln: usize) -> Result<T> {
        s.parse()
            .map_err(|_| parse_err(ln, format!("cannot parse number {s:?}")))
    }
    fn one<'a>(vals: &[&'a str], ln: usize) -> Result<&'a str> {
        vals.first()
            .copied()
            .ok_or_else(|| parse_err(ln, "missing value"))
    }

    let (ln, l) = next_line("alpha")?;
    let vals = fields(&l, "alpha", ln)?;
    if vals.len() != 2 {
        return Err(parse_err(ln, "alpha needs re and im"));
    }
    let alpha = C64::new(num(vals[0], ln)?, num(vals[1], ln)?);

    let (ln, l) = next_line("seed")?;
    let seed: u64 = num(one(&fields(&l, "seed", ln)?, ln)?, ln)?;
    let (ln, l) = next_line("trials_total")?;
    let trials_total: u64 = num(one(&fields(&l, "trials_total", ln)?, ln)?, ln)?;
    let (ln, l) = next_line("heralds")?;
    let heralds: u64 = num(one(&fields(&l, "heralds", ln)?, ln)?, ln)?;
    let (ln, l) = next_line("records")?;
    let n_records: usize = num(one(&fields(&l, "records", ln)?, ln)?, ln)?;

    let mut records = Vec::with_capacity(n_records);
    for k in 0..n_records {
        let (ln, l) = lines
            .next()
            .map(|(i, l)| (i + 1, l.to_string()))
            .ok_or_else(|| {
                parse_err(6 + k, format!("file truncated: {k} of {n_records} records"))
            })?;
        let mut parts = l.split_whitespace();
        let theta: f64 = num(parts.next().ok_or_else(|| parse_err(ln, "missing theta"))?, ln)?;
        let x: f64 = num(parts.next().ok_or_else(|| parse_err(ln, "missing x"))?, ln)?;
        records.push(QuadraturePoint { theta, x });
    }
    if let Some((i, l)) = lines.next() {
        if !l.trim().is_empty() {
            return Err(parse_err(i + 1, format!("trailing content {l:?}")));
        }
    }
    if records.len() as u64 != heralds {
        return Err(parse_err(
            6,
            format!("records {} != heralds {heralds}", records.len()),
        ));
    }

    Ok(QuadratureDataset {
        alpha,
        seed,
        trials_total,
        heralds,
        records,
    })
}

/// SHA-256 of a file, hex-encoded; manifests use it to pin datasets and
/// tensors together.
pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

/// Plan serialization mirror (complex amplitudes as (re, im) pairs).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PlanRecord {
    pub amplitudes: Vec<(f64, f64)>,
    pub samples_per_probe: usize,
    pub phase_grid: usize,
    pub seed: u64,
}

impl From<&ProbePlan> for PlanRecord {
    fn from(p: &ProbePlan) -> Self {
        Self {
            amplitudes: p.amplitudes.iter().map(|a| (a.re, a.im)).collect(),
            samples_per_probe: p.samples_per_probe,
            phase_grid: p.phase_grid,
            seed: p.seed,
        }
    }
}

impl PlanRecord {
    pub fn to_plan(&self) -> ProbePlan {
        ProbePlan {
            amplitudes: self.amplitudes.iter().map(|&(re, im)| C64::new(re, im)).collect(),
            samples_per_probe: self.samples_per_probe,
            phase_grid: self.phase_grid,
            seed: self.seed,
        }
    }
}

/// Per-probe manifest entry.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestProbe {
    pub index: usize,
    pub alpha: (f64, f64),
    /// Dataset file name, empty when the probe was skipped.
    pub file: String,
    pub sha256: String,
    pub seed: u64,
    pub trials_total: u64,
    pub heralds: u64,
    pub success_measured: f64,
    /// Success probability predicted by the generating tensor.
    pub success_model: f64,
    pub skipped: bool,
}

/// Run manifest tying datasets, the generating tensor, and the plan
/// together.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub format: String,
    pub n_max: usize,
    pub tensor_file: String,
    pub tensor_sha256: String,
    pub plan: PlanRecord,
    pub probes: Vec<ManifestProbe>,
}

pub const MANIFEST_FORMAT: &str = "fsf-manifest v1";
pub const MANIFEST_NAME: &str = "manifest.json";

impl RunManifest {
    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        let m: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::DataIntegrity(format!(
                "unsupported manifest format {:?}",
                m.format
            )));
        }
        Ok(m)
    }
}
