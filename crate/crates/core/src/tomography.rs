//! Maximum-likelihood coherent-state process tomography.
//!
//! The process is represented by its Choi operator C on the joint
//! output (x) input space, <j,m|C|k,n> = E_jk^mn. Heralded processes are
//! trace *non*-increasing, so the output space carries one extra "fail
//! sink" level: the extended map sends the missing trace of every input
//! state to the sink, the extended Choi satisfies the trace-preservation
//! constraint Tr_out C = I_in, and the no-herald trials enter the
//! likelihood as ordinary counts of a fail outcome. The probability of
//! outcome O for probe rho is Tr[C (Pi_O (x) rho^T)].
//!
//! Heralded outcomes are the cells of the (phase, quadrature) histogram;
//! their operators are pure quadrature projectors at the bin centers times
//! the bin width and phase weight. The fail operator is the exact
//! complement I - sum(heralded), which makes every probe's outcome set a
//! resolution of identity: predicted probabilities sum to one, and the
//! Choi operator that generated a noiseless dataset is an exact fixed
//! point of the iteration.
//!
//! The reconstruction iterates the diluted fixed-point map
//!
//! ```text
//! R   = sum_{probe,outcome} (f/p) Pi (x) rho^T
//! R_u = (I + mu R) / (1 + mu)
//! C  <- N[ R_u C R_u ],   N[X] = (I (x) t^{-1/2}) X (I (x) t^{-1/2}),
//! ```
//!
//! where t = Tr_out[R_u C R_u] is the Lagrange normalization restoring
//! Tr_out C = I_in, f are observed frequencies and p predicted
//! probabilities. The log-likelihood is checked to be nondecreasing at
//! every step.

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use rand::Rng;
use rayon::prelude::*;

use crate::fock::{coherent_state, random_density_matrix, wavefunction_row, DensityMatrix, HilbertSpec};
use crate::homodyne::{BinGrid, BinnedHistogram};
use crate::linalg;
use crate::model::{
    apply_process, compose_fsf_tensor, herald_povm, FsfParams, PovmKind, ProcessTensor,
};
use crate::{Error, Result};

/// Observed probabilities are floored here before dividing; hitting the
/// floor for an observed outcome is reported as a warning.
pub const PROBABILITY_FLOOR: f64 = 1e-300;
/// Log-likelihood may decrease by at most this relative slack per step.
pub const MONOTONICITY_SLACK: f64 = 1e-9;
/// Choi eigenvalues below this trigger re-projection onto the PSD cone.
pub const PSD_DRIFT_TOL: f64 = 1e-10;
/// Output states with trace below this are skipped in the random-state
/// fidelity study.
pub const STUDY_TRACE_FLOOR: f64 = 1e-12;

/// Reconstruction configuration. Defaults follow the reference analysis:
/// n_max 6, dilution 0.5, at most 150 iterations, 30 x 601 bins on [-5, 5].
#[derive(Debug, Clone, PartialEq)]
pub struct ReconConfig {
    pub n_max: usize,
    /// Dilution mu in (0, 1]: R_mu = (I + mu R) / (1 + mu).
    pub mu: f64,
    pub max_iters: usize,
    /// Stop when |delta logL| <= ll_tol * |logL|.
    pub ll_tol: f64,
    pub grid: BinGrid,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            n_max: 6,
            mu: 0.5,
            max_iters: 150,
            ll_tol: 1e-12,
            grid: BinGrid::default(),
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.mu <= 1.0e9) { // TEMP scale experiment
            return Err(Error::InvalidParam(format!("dilution mu = {} outside (0,1]", self.mu)));
        }
        if self.n_max < 1 {
            return Err(Error::InvalidParam("n_max must be >= 1".into()));
        }
        if self.ll_tol <= 0.0 {
            return Err(Error::InvalidParam("ll_tol must be positive".into()));
        }
        Ok(())
    }

    pub fn spec(&self) -> HilbertSpec {
        HilbertSpec::new(self.n_max).expect("validated n_max")
    }
}

/// Choi operator on the extended output (x) input space. The output space
/// has d_out = d_in + 1 levels, the last being the fail sink; the physical
/// block (j, k < d_in) maps to/from [`ProcessTensor`].
#[derive(Debug, Clone, PartialEq)]
pub struct ChoiOperator {
    mat: DMatrix<C64>,
    d_in: usize,
    d_out: usize,
}

impl ChoiOperator {
    #[inline]
    fn id(&self, j: usize, m: usize) -> usize {
        j * self.d_in + m
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn dim(&self) -> usize {
        self.d_in * self.d_out
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.mat
    }

    pub fn element(&self, j: usize, m: usize, k: usize, n: usize) -> C64 {
        self.mat[(self.id(j, m), self.id(k, n))]
    }

    /// Maximally mixed extended Choi I/d_out: full rank, trace-preserving,
    /// the reconstruction initializer.
    pub fn maximally_mixed(spec: HilbertSpec) -> Self {
        let d_in = spec.dim();
        let d_out = d_in + 1;
        let dim = d_in * d_out;
        Self {
            mat: DMatrix::from_diagonal_element(dim, dim, C64::new(1.0 / d_out as f64, 0.0)),
            d_in,
            d_out,
        }
    }

    pub fn trace(&self) -> f64 {
        self.mat.diagonal().iter().map(|z| z.re).sum()
    }

    /// Partial trace over the (extended) output: an operator on the input
    /// space; equals I after every normalization step.
    pub fn partial_trace_out(&self) -> DMatrix<C64> {
        let mut t = DMatrix::from_element(self.d_in, self.d_in, C64::new(0.0, 0.0));
        for m in 0..self.d_in {
            for n in 0..self.d_in {
                for j in 0..self.d_out {
                    t[(m, n)] += self.mat[(self.id(j, m), self.id(j, n))];
                }
            }
        }
        t
    }

    /// Extended-output action: sigma[j,k] = sum_mn C[(j,m),(k,n)] rho[m,n].
    /// The physical block of sigma is E(rho); the sink diagonal carries the
    /// fail probability.
    pub fn apply_extended(&self, rho: &DMatrix<C64>) -> DMatrix<C64> {
        let mut sigma = DMatrix::from_element(self.d_out, self.d_out, C64::new(0.0, 0.0));
        for j in 0..self.d_out {
            for k in 0..self.d_out {
                let mut acc = C64::new(0.0, 0.0);
                for m in 0..self.d_in {
                    for n in 0..self.d_in {
                        acc += self.mat[(self.id(j, m), self.id(k, n))] * rho[(m, n)];
                    }
                }
                sigma[(j, k)] = acc;
            }
        }
        sigma
    }

    /// The physical (non-sink) block as a d_in^2-dimensional matrix, for
    /// fidelity computations.
    pub fn physical_block(&self) -> DMatrix<C64> {
        let d = self.d_in;
        let mut b = DMatrix::from_element(d * d, d * d, C64::new(0.0, 0.0));
        for j in 0..d {
            for k in 0..d {
                for m in 0..d {
                    for n in 0..d {
                        b[(j * d + m, k * d + n)] = self.element(j, m, k, n);
                    }
                }
            }
        }
        b
    }

    pub fn min_eigenvalue(&self) -> f64 {
        linalg::min_eigenvalue(&self.mat)
    }

    /// Project onto the PSD cone by clamping negative eigenvalues to zero.
    pub fn project_psd(&mut self) {
        let (vals, vecs) = linalg::herm_eigen(&self.mat);
        let d = DMatrix::from_diagonal(&vals.map(|v| C64::new(v.max(0.0), 0.0)));
        self.mat = &vecs * d * vecs.adjoint();
        linalg::hermitize(&mut self.mat);
    }
}

/// Embed a process tensor as an extended Choi operator with an empty sink
/// block. The round trip through [`tensor_from_choi`] is exact.
pub fn choi_from_tensor(e: &ProcessTensor) -> ChoiOperator {
    let d_in = e.dim();
    let d_out = d_in + 1;
    let dim = d_in * d_out;
    let mut mat = DMatrix::from_element(dim, dim, C64::new(0.0, 0.0));
    for j in 0..d_in {
        for k in 0..d_in {
            for m in 0..d_in {
                for n in 0..d_in {
                    mat[(j * d_in + m, k * d_in + n)] = e.get(j, k, m, n);
                }
            }
        }
    }
    ChoiOperator { mat, d_in, d_out }
}

/// Extend a trace-non-increasing tensor to a trace-preserving map by
/// routing the missing trace to the sink: the sink block is
/// S = I - Tr_out C_phys, which is PSD for any completely positive
/// trace-non-increasing process.
pub fn extend_trace_preserving(e: &ProcessTensor) -> ChoiOperator {
    let mut choi = choi_from_tensor(e);
    let d = choi.d_in;
    let sink = d;
    let t = choi.partial_trace_out();
    for m in 0..d {
        for n in 0..d {
            let s = if m == n { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) } - t[(m, n)];
            choi.mat[(sink * d + m, sink * d + n)] = s;
        }
    }
    choi
}

/// Extract the physical block of a Choi operator as a process tensor.
pub fn tensor_from_choi(choi: &ChoiOperator, label: impl Into<String>) -> Result<ProcessTensor> {
    let dev = linalg::hermiticity_deviation(&choi.mat);
    if dev > crate::model::TENSOR_HERMITICITY_TOL {
        return Err(Error::NotHermitian { max_dev: dev });
    }
    let d = choi.d_in;
    let spec = HilbertSpec::new(d - 1)?;
    let mut e = ProcessTensor::zeros(spec, label);
    for j in 0..d {
        for k in 0..d {
            for m in 0..d {
                for n in 0..d {
                    e.set(j, k, m, n, choi.element(j, m, k, n));
                }
            }
        }
    }
    Ok(e)
}

/// Measurement outcome label for one probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    /// Heralded sample in the given (phase bin, quadrature bin) cell.
    Bin { phase: usize, quad: usize },
    /// No herald (or, negligibly, a herald outside the window).
    Fail,
}

/// Precomputed measurement geometry shared by all probes.
///
/// The swept phase theta is the *relative* phase between probe and local
/// oscillator (both derive from one laser), and the filter itself carries
/// no phase reference: the model process is phase covariant. The
/// measurement model therefore attributes half of each phase to the probe
/// and half to the quadrature projector: outcome (b, q) of probe alpha
/// uses the rotated probe |alpha e^{i theta_b/2}> together with the
/// projector onto |x_q; theta_b/2>. For phase-covariant processes this
/// predicts exactly the same statistics as rotating the projector by the
/// full theta_b, but it keeps both the input and the output factor of the
/// Choi operator phase-diverse, so the covariant sector is identifiable
/// from real-amplitude probes. (With all phase on the projector, the
/// likelihood cannot separate C[(j,m),(k,n)] from its input-transposed
/// partner and the iteration converges to the input-symmetrized process
/// instead of the true one.)
#[derive(Debug, Clone)]
pub struct MeasurementModel {
    d: usize,
    grid: BinGrid,
    /// Phase-bin weight: heralds spread uniformly over the phase grid.
    w_phase: f64,
    dx: f64,
    /// psi[q * d + n] = psi_n(x_q) at the center of quadrature bin q.
    psi: Vec<f64>,
    /// half_phases[b * d + n] = e^{-i n theta_b / 2}.
    half_phases: Vec<C64>,
    /// fail_ops[b] = I - sum_q Pi_{b,q} on the extended output space
    /// (without the phase weight): the complement left after the heralded
    /// window operators of phase bin b.
    fail_ops: Vec<DMatrix<C64>>,
}

impl MeasurementModel {
    pub fn new(spec: HilbertSpec, grid: BinGrid) -> Self {
        let d = spec.dim();
        let d_out = d + 1;
        let dx = grid.quad_width();
        let w_phase = 1.0 / grid.phase_bins as f64;
        let mut psi = vec![0.0; grid.quad_bins * d];
        for q in 0..grid.quad_bins {
            wavefunction_row(grid.quad_center(q), &mut psi[q * d..(q + 1) * d]);
        }
        let mut half_phases = vec![C64::new(0.0, 0.0); grid.phase_bins * d];
        for b in 0..grid.phase_bins {
            let phi = grid.phase_center(b) / 2.0;
            for n in 0..d {
                half_phases[b * d + n] = C64::from_polar(1.0, -(n as f64) * phi);
            }
        }
        // Gram of the quadrature rows: dx * Gram = window completeness
        let mut psi_gram = DMatrix::from_element(d, d, 0.0f64);
        for q in 0..grid.quad_bins {
            for m in 0..d {
                for n in 0..d {
                    psi_gram[(m, n)] += psi[q * d + m] * psi[q * d + n];
                }
            }
        }
        let fail_ops = (0..grid.phase_bins)
            .map(|b| {
                let mut f = DMatrix::from_element(d_out, d_out, C64::new(0.0, 0.0));
                for j in 0..d_out {
                    f[(j, j)] = C64::new(1.0, 0.0);
                }
                for m in 0..d {
                    for n in 0..d {
                        let rot = half_phases[b * d + m] * half_phases[b * d + n].conj();
                        f[(m, n)] -= rot * (dx * psi_gram[(m, n)]);
                    }
                }
                f
            })
            .collect();
        MeasurementModel {
            d,
            grid,
            w_phase,
            dx,
            psi,
            half_phases,
            fail_ops,
        }
    }

    pub fn grid(&self) -> BinGrid {
        self.grid
    }

    /// Complement operator of the heralded window at one phase bin.
    pub fn fail_operator(&self, phase_bin: usize) -> &DMatrix<C64> {
        &self.fail_ops[phase_bin]
    }

    /// Probe rotated by half the bin phase: rho -> U rho U^dag with
    /// U = e^{i (theta_b/2) n_hat}.
    pub fn rotate_probe(&self, rho: &DMatrix<C64>, phase_bin: usize) -> DMatrix<C64> {
        let d = self.d;
        let hp = &self.half_phases[phase_bin * d..(phase_bin + 1) * d];
        DMatrix::from_fn(d, d, |m, n| rho[(m, n)] * hp[m].conj() * hp[n])
    }

    /// Output-side operator of a heralded bin on the extended space.
    pub fn bin_operator(&self, phase_bin: usize, quad_bin: usize) -> DMatrix<C64> {
        let d = self.d;
        let d_out = d + 1;
        let mut op = DMatrix::from_element(d_out, d_out, C64::new(0.0, 0.0));
        for m in 0..d {
            for n in 0..d {
                let u_m = self.half_phases[phase_bin * d + m] * self.psi[quad_bin * d + m];
                let u_n = self.half_phases[phase_bin * d + n] * self.psi[quad_bin * d + n];
                op[(m, n)] = u_m * u_n.conj() * (self.w_phase * self.dx);
            }
        }
        op
    }

    /// Full measurement operator on the joint space for one outcome of a
    /// probe: Pi_{b,q} (x) rho_b^T for heralded bins, and the phase-summed
    /// complement for the fail outcome.
    pub fn measurement_operator(&self, rho_in: &DMatrix<C64>, outcome: Outcome) -> DMatrix<C64> {
        match outcome {
            Outcome::Bin { phase, quad } => {
                let rho_b = self.rotate_probe(rho_in, phase);
                kron_out_in(&self.bin_operator(phase, quad), &rho_b.transpose())
            }
            Outcome::Fail => {
                let dim = (self.d + 1) * self.d;
                let mut m = DMatrix::from_element(dim, dim, C64::new(0.0, 0.0));
                for b in 0..self.grid.phase_bins {
                    let rho_b = self.rotate_probe(rho_in, b);
                    m += kron_out_in(&self.fail_ops[b].scale(self.w_phase), &rho_b.transpose());
                }
                m
            }
        }
    }

    /// p(b, q) from the extended conditional state at that phase bin,
    /// sigma_b = C applied to the rotated probe.
    fn bin_probability(&self, sigma_b: &DMatrix<C64>, phase_bin: usize, quad_bin: usize) -> f64 {
        let d = self.d;
        let mut acc = 0.0;
        for m in 0..d {
            let pm = self.psi[quad_bin * d + m];
            for n in 0..d {
                let rot = self.half_phases[phase_bin * d + m]
                    * self.half_phases[phase_bin * d + n].conj();
                acc += (sigma_b[(m, n)] * rot.conj()).re * pm * self.psi[quad_bin * d + n];
            }
        }
        acc * self.w_phase * self.dx
    }

    /// p(fail at phase bin b) = w Tr[sigma_b F_b].
    fn fail_probability(&self, sigma_b: &DMatrix<C64>, phase_bin: usize) -> f64 {
        let f = &self.fail_ops[phase_bin];
        let d_out = self.d + 1;
        let mut acc = C64::new(0.0, 0.0);
        for j in 0..d_out {
            for k in 0..d_out {
                acc += sigma_b[(j, k)] * f[(k, j)];
            }
        }
        acc.re * self.w_phase
    }
}

/// kron on the (out, in) index convention: M[(j,m),(k,n)] = A[j,k] B[m,n].
fn kron_out_in(a: &DMatrix<C64>, b: &DMatrix<C64>) -> DMatrix<C64> {
    let (da, db) = (a.nrows(), b.nrows());
    let mut m = DMatrix::from_element(da * db, da * db, C64::new(0.0, 0.0));
    for j in 0..da {
        for k in 0..da {
            for mm in 0..db {
                for nn in 0..db {
                    m[(j * db + mm, k * db + nn)] = a[(j, k)] * b[(mm, nn)];
                }
            }
        }
    }
    m
}

/// Predicted probability of one outcome for a normalized probe state.
pub fn predicted_probability(
    choi: &ChoiOperator,
    probe: &DensityMatrix,
    outcome: Outcome,
    model: &MeasurementModel,
) -> Result<f64> {
    if probe.dim() != choi.d_in() {
        return Err(Error::DimensionMismatch(format!(
            "probe dim {} vs Choi input dim {}",
            probe.dim(),
            choi.d_in()
        )));
    }
    match outcome {
        Outcome::Bin { phase, quad } => {
            let sigma = choi.apply_extended(&model.rotate_probe(probe.matrix(), phase));
            Ok(model.bin_probability(&sigma, phase, quad))
        }
        Outcome::Fail => {
            let mut p = 0.0;
            for b in 0..model.grid.phase_bins {
                let sigma = choi.apply_extended(&model.rotate_probe(probe.matrix(), b));
                p += model.fail_probability(&sigma, b);
            }
            Ok(p)
        }
    }
}

/// One probe's contribution to the likelihood: per-phase rotated probe
/// states, binned heralded counts, and the fail count split uniformly over
/// the phase bins (the phase draw is independent of the physics), all as
/// frequencies relative to the total trial count of the run.
struct ProbeData {
    /// Rotated probes per phase bin and their transposes.
    rho_rot: Vec<DMatrix<C64>>,
    rho_t_rot: Vec<DMatrix<C64>>,
    /// counts[phase_bin] = (quad_bin, frequency) of nonempty cells.
    counts: Vec<Vec<(usize, f64)>>,
    /// fail frequency attributed to each phase bin.
    fail_freq: Vec<f64>,
}

/// Input record for the reconstruction: one probe's histogram and trial
/// bookkeeping.
#[derive(Debug, Clone)]
pub struct ProbeRecord {
    pub alpha: C64,
    pub histogram: BinnedHistogram,
    pub trials_total: u64,
    pub heralds: u64,
}

/// Reconstruction output: the physical-block tensor, the extended Choi
/// operator, and the per-iteration log-likelihood trace.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub tensor: ProcessTensor,
    pub choi: ChoiOperator,
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub warnings: Vec<String>,
}

fn build_probe_data(
    records: &[ProbeRecord],
    cfg: &ReconConfig,
    model: &MeasurementModel,
    warnings: &mut Vec<String>,
) -> Result<Vec<ProbeData>> {
    if records.len() < 2 {
        return Err(Error::InvalidParam(
            "reconstruction needs at least 2 probes".into(),
        ));
    }
    let distinct = {
        let mut alphas: Vec<(f64, f64)> = records.iter().map(|r| (r.alpha.re, r.alpha.im)).collect();
        alphas.sort_by(|a, b| a.partial_cmp(b).unwrap());
        alphas.dedup();
        alphas.len()
    };
    if distinct < 2 {
        return Err(Error::InvalidParam(
            "reconstruction needs >= 2 distinct probe amplitudes".into(),
        ));
    }
    let n_total: u64 = records.iter().map(|r| r.trials_total).sum();
    if n_total == 0 || records.iter().all(|r| r.heralds == 0) {
        return Err(Error::InvalidParam("no counts to reconstruct from".into()));
    }
    let spec = cfg.spec();
    let mut probes = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        if rec.histogram.grid != cfg.grid {
            return Err(Error::DimensionMismatch(format!(
                "probe {i}: histogram grid does not match the reconstruction grid"
            )));
        }
        if rec.heralds > rec.trials_total {
            return Err(Error::DataIntegrity(format!(
                "probe {i}: heralds {} exceed trials {}",
                rec.heralds, rec.trials_total
            )));
        }
        let dropped = rec.histogram.underflow + rec.histogram.overflow;
        if dropped > 0 {
            warnings.push(format!(
                "probe {i}: {dropped} out-of-window samples dropped from the likelihood"
            ));
        }
        let probe = coherent_state(rec.alpha, spec)?;
        let rho = probe.density().matrix().clone();
        let rho_rot: Vec<DMatrix<C64>> = (0..cfg.grid.phase_bins)
            .map(|b| model.rotate_probe(&rho, b))
            .collect();
        let rho_t_rot: Vec<DMatrix<C64>> = rho_rot.iter().map(|r| r.transpose()).collect();
        let mut counts = vec![Vec::new(); cfg.grid.phase_bins];
        for b in 0..cfg.grid.phase_bins {
            for q in 0..cfg.grid.quad_bins {
                let cnt = rec.histogram.count(b, q);
                if cnt > 0 {
                    counts[b].push((q, cnt as f64 / n_total as f64));
                }
            }
        }
        // the phase draw is independent of the herald outcome, so the
        // no-herald trials spread uniformly over the phase bins
        let fail_total = (rec.trials_total - rec.heralds) as f64 / n_total as f64;
        let fail_freq = vec![fail_total / cfg.grid.phase_bins as f64; cfg.grid.phase_bins];
        probes.push(ProbeData {
            rho_rot,
            rho_t_rot,
            counts,
            fail_freq,
        });
    }
    Ok(probes)
}

/// One plain diluted iteration. Returns the updated Choi, the
/// log-likelihood of the *input* Choi, and whether any observed outcome
/// hit the probability floor.
fn mlr_step(
    choi: &ChoiOperator,
    probes: &[ProbeData],
    model: &MeasurementModel,
    mu: f64,
) -> (ChoiOperator, f64, bool) {
    let precond = input_preconditioner(probes, model.d, model.grid.phase_bins);
    let (r_op, ll, floored) = mlr_r_and_ll(choi, probes, model);
    (powered_update(choi, &r_op, &precond, mu, 1.0), ll, floored)
}

/// One data pass: the R operator sum_(probe,outcome) (f/p) Pi (x) rho_b^T
/// and the log-likelihood of `choi`.
fn mlr_r_and_ll(
    choi: &ChoiOperator,
    probes: &[ProbeData],
    model: &MeasurementModel,
) -> (DMatrix<C64>, f64, bool) {
    let d = model.d;
    let d_out = d + 1;

    // Per-probe partial R operators and likelihood contributions, in
    // parallel with a deterministic merge. Within a probe, each phase bin
    // carries its own rotated probe, conditional state, and kernel.
    let dim = choi.dim();
    let per_probe: Vec<(DMatrix<C64>, f64, bool)> = probes
        .par_iter()
        .map(|probe| {
            let mut r_i = DMatrix::from_element(dim, dim, C64::new(0.0, 0.0));
            let mut ll = 0.0;
            let mut floored = false;
            for b in 0..model.grid.phase_bins {
                let sigma = choi.apply_extended(&probe.rho_rot[b]);
                let mut kernel = DMatrix::from_element(d_out, d_out, C64::new(0.0, 0.0));
                if !probe.counts[b].is_empty() {
                    // B[m][n] = Re(sigma_mn e^{i(m-n) theta_b/2}): the
                    // quadratic form giving the marginal at this phase
                    let mut bmat = [[0.0f64; 16]; 16];
                    for m in 0..d {
                        for n in 0..d {
                            let rot = model.half_phases[b * d + m]
                                * model.half_phases[b * d + n].conj();
                            bmat[m][n] = (sigma[(m, n)] * rot.conj()).re;
                        }
                    }
                    let mut gram = [[0.0f64; 16]; 16];
                    for &(q, f) in &probe.counts[b] {
                        let psi = &model.psi[q * d..(q + 1) * d];
                        let mut val = 0.0;
                        for m in 0..d {
                            for n in 0..d {
                                val += bmat[m][n] * psi[m] * psi[n];
                            }
                        }
                        let mut p = val * model.w_phase * model.dx;
                        if p < PROBABILITY_FLOOR {
                            p = PROBABILITY_FLOOR;
                            floored = true;
                        }
                        ll += f * p.ln();
                        let w = f / p;
                        for m in 0..d {
                            for n in m..d {
                                gram[m][n] += w * psi[m] * psi[n];
                            }
                        }
                    }
                    for m in 0..d {
                        for n in m..d {
                            let rot = model.half_phases[b * d + m]
                                * model.half_phases[b * d + n].conj();
                            let v = rot * (gram[m][n] * model.w_phase * model.dx);
                            kernel[(m, n)] += v;
                            if n > m {
                                kernel[(n, m)] += v.conj();
                            }
                        }
                    }
                }
                // fail outcome at this phase bin
                if probe.fail_freq[b] > 0.0 {
                    let mut p_fail = model.fail_probability(&sigma, b);
                    if p_fail < PROBABILITY_FLOOR {
                        p_fail = PROBABILITY_FLOOR;
                        floored = true;
                    }
                    ll += probe.fail_freq[b] * p_fail.ln();
                    let w = probe.fail_freq[b] / p_fail * model.w_phase;
                    kernel += model.fail_ops[b].scale(w);
                }
                // R contribution of this (probe, phase): kernel (x) rho_b^T
                let rho_t = &probe.rho_t_rot[b];
                for j in 0..d_out {
                    for k in 0..d_out {
                        let kjk = kernel[(j, k)];
                        if kjk == C64::new(0.0, 0.0) {
                            continue;
                        }
                        for m in 0..d {
                            for n in 0..d {
                                r_i[(j * d + m, k * d + n)] += kjk * rho_t[(m, n)];
                            }
                        }
                    }
                }
            }
            (r_i, ll, floored)
        })
        .collect();

    let mut r = DMatrix::from_element(dim, dim, C64::new(0.0, 0.0));
    let mut ll_total = 0.0;
    let mut floored_any = false;
    for (r_i, ll, floored) in per_probe {
        r += r_i;
        ll_total += ll;
        floored_any |= floored;
    }
    let _ = d_out;
    (r, ll_total, floored_any)
}

/// Maximum-likelihood reconstruction from binned heralded quadrature data.
///
/// `max_iters = 0` returns the maximally mixed initializer unchanged.
///
/// Iterations count data passes (one evaluation of R and the
/// log-likelihood each). The update applies the diluted operator
/// A = (I + mu R)/(1 + mu) as an adaptive matrix power,
///
/// ```text
/// C <- N[ A^gamma C A^gamma ],
/// ```
///
/// which has the same fixed points as the plain map for every gamma > 0
/// (at a likelihood extremum R acts as I (x) Lambda on the support of C,
/// and the normalization cancels any power of it). gamma = 1 is the plain
/// diluted iteration; higher powers are accepted only when the next pass
/// confirms the log-likelihood did not decrease, so the reported
/// likelihood trace is nondecreasing by construction. The adaptive power
/// is what makes rank-deficient maximum-likelihood points reachable within
/// a realistic iteration budget: the plain map approaches the PSD boundary
/// only as 1/iterations, while operator powers shrink the dying
/// eigenvalues geometrically.
pub fn mlr_reconstruct(records: &[ProbeRecord], cfg: &ReconConfig) -> Result<Reconstruction> {
    cfg.validate()?;
    let spec = cfg.spec();
    if spec.dim() > 16 {
        return Err(Error::DimensionMismatch("reconstruction supports n_max <= 15".into()));
    }
    let model = MeasurementModel::new(spec, cfg.grid);
    let mut warnings = Vec::new();
    let probes = build_probe_data(records, cfg, &model, &mut warnings)?;

    let mut choi = ChoiOperator::maximally_mixed(spec);
    let mut ll_trace: Vec<f64> = Vec::with_capacity(cfg.max_iters);
    let mut converged = false;
    let mut iterations = 0usize;
    let mut floor_hits = 0usize;
    // Step ladder: preconditioned powers of the diluted map, falling back
    // to the plain (unpreconditioned) map when no preconditioned power
    // ascends; convergence is declared when neither map improves.
    let mut gamma = 1.0f64;
    let mut plain_mode = false;
    const GAMMA_MIN: f64 = 1.0 / 64.0;
    const GAMMA_MAX: f64 = 64.0;

    if cfg.max_iters == 0 {
        let tensor = tensor_from_choi(&choi, "reconstructed")?;
        return Ok(Reconstruction {
            tensor,
            choi,
            log_likelihood: ll_trace,
            iterations,
            converged,
            warnings,
        });
    }

    let precond = input_preconditioner(&probes, model.d, model.grid.phase_bins);
    let (mut r_op, mut ll, floored) = mlr_r_and_ll(&choi, &probes, &model);
    if floored {
        floor_hits += 1;
    }
    iterations += 1;
    ll_trace.push(ll);

    let identity_precond = DMatrix::identity(choi.dim(), choi.dim());
    while iterations < cfg.max_iters {
        let p_use = if plain_mode { &identity_precond } else { &precond };
        let candidate = powered_update(&choi, &r_op, p_use, cfg.mu, gamma);
        let (r2, ll2, floored) = mlr_r_and_ll(&candidate, &probes, &model);
        if floored {
            floor_hits += 1;
        }
        iterations += 1;

        if ll2 >= ll - MONOTONICITY_SLACK * ll.abs() {
            let delta_small = (ll2 - ll).abs() <= cfg.ll_tol * ll.abs();
            choi = candidate;
            r_op = r2;
            ll = ll2;
            ll_trace.push(ll);
            if delta_small && gamma <= 1.0 && !plain_mode {
                converged = true;
                break;
            }
            if plain_mode {
                // escaped a stall: resume preconditioned stepping
                plain_mode = false;
                gamma = 1.0;
            } else {
                gamma = (gamma * 1.5).min(GAMMA_MAX);
            }
            let min_eig = choi.min_eigenvalue();
            if min_eig < -PSD_DRIFT_TOL {
                warnings.push(format!(
                    "iteration {iterations}: Choi drifted to min eigenvalue {min_eig:.2e}, re-projected"
                ));
                choi.project_psd();
            }
        } else if gamma > GAMMA_MIN {
            // overshoot: retreat to a gentler power of the same map and
            // retry from the same iterate
            gamma = (gamma / 2.0).max(GAMMA_MIN);
        } else if !plain_mode {
            // preconditioned powers exhausted: try the plain map
            plain_mode = true;
            gamma = 1.0;
        } else {
            // neither map improves the likelihood any further
            converged = true;
            break;
        }
    }

    if floor_hits > 0 {
        warnings.push(format!(
            "{floor_hits} data passes hit the predicted-probability floor"
        ));
    }

    let tensor = tensor_from_choi(&choi, "reconstructed")?;
    Ok(Reconstruction {
        tensor,
        choi,
        log_likelihood: ll_trace,
        iterations,
        converged,
        warnings,
    })
}

/// Input-metric preconditioner P = I (x) S^{-1/2}, where S is the
/// trial-weighted average of the (rotated, transposed) probe states. At a
/// likelihood extremum the R operator equals I (x) S, so conjugating by P
/// makes the preconditioned R exactly the identity there -- the natural
/// scale for the dilution formula -- and it lifts the data-starved
/// high-photon input directions out of the multiplicative kernel trap.
fn input_preconditioner(probes: &[ProbeData], d: usize, phase_bins: usize) -> DMatrix<C64> {
    let w_phase = 1.0 / phase_bins as f64;
    let mut avg = DMatrix::from_element(d, d, C64::new(0.0, 0.0));
    for probe in probes {
        // trial weight of the probe = total frequency mass it carries
        let w: f64 = probe
            .counts
            .iter()
            .flatten()
            .map(|&(_, f)| f)
            .sum::<f64>()
            + probe.fail_freq.iter().sum::<f64>();
        for b in 0..phase_bins {
            avg += probe.rho_t_rot[b].scale(w * w_phase);
        }
    }
    linalg::hermitize(&mut avg);
    let (vals, vecs) = linalg::herm_eigen(&avg);
    let vmax = vals.iter().cloned().fold(0.0f64, f64::max).max(f64::MIN_POSITIVE);
    // floor keeps the boost of unprobed directions bounded (<= 1e3)
    let dvals = DMatrix::from_diagonal(&vals.map(|v| {
        C64::new(1.0 / v.max(vmax * 1e-6).sqrt(), 0.0)
    }));
    let p_in = &vecs * dvals * vecs.adjoint();
    kron_out_in(&DMatrix::identity(d + 1, d + 1), &p_in)
}

/// C <- N[A^gamma C A^gamma] with A = (I + mu P R P)/(1 + mu).
fn powered_update(
    choi: &ChoiOperator,
    r_op: &DMatrix<C64>,
    precond: &DMatrix<C64>,
    mu: f64,
    gamma: f64,
) -> ChoiOperator {
    let dim = choi.dim();
    let scale = 1.0 / (1.0 + mu);
    let mut a = (precond * r_op * precond).scale(mu * scale);
    for i in 0..dim {
        a[(i, i)] += C64::new(scale, 0.0);
    }
    linalg::hermitize(&mut a);
    let a_pow = if (gamma - 1.0).abs() < 1e-12 {
        a
    } else {
        let (vals, vecs) = linalg::herm_eigen(&a);
        let powered = DMatrix::from_diagonal(&vals.map(|v| C64::new(v.max(0.0).powf(gamma), 0.0)));
        &vecs * powered * vecs.adjoint()
    };
    let mut x = &a_pow * &choi.mat * &a_pow;
    linalg::hermitize(&mut x);
    let mut next = ChoiOperator {
        mat: x,
        d_in: choi.d_in,
        d_out: choi.d_out,
    };
    renormalize_trace_preserving(&mut next);
    next
}

/// Re-impose the trace-preservation constraint Tr_out C = I via the/// Re-impose the trace-preservation constraint Tr_out C = I via the
/// Lagrange sandwich C <- (I (x) t^{-1/2}) C (I (x) t^{-1/2}).
fn renormalize_trace_preserving(choi: &mut ChoiOperator) {
    let mut t = choi.partial_trace_out();
    linalg::hermitize(&mut t);
    let (vals, vecs) = linalg::herm_eigen(&t);
    let vmax = vals.iter().cloned().fold(0.0f64, f64::max).max(f64::MIN_POSITIVE);
    let dvals = DMatrix::from_diagonal(&vals.map(|v| {
        C64::new(1.0 / v.max(vmax * 1e-15).sqrt(), 0.0)
    }));
    let inv_sqrt = &vecs * dvals * vecs.adjoint();
    let normalizer = kron_out_in(
        &DMatrix::identity(choi.d_out, choi.d_out),
        &inv_sqrt,
    );
    choi.mat = &normalizer * &choi.mat * &normalizer;
    linalg::hermitize(&mut choi.mat);
}

/// Residual max |C' - C| of one diluted iteration applied to the extended
/// Choi of `generator`, with outcome frequencies predicted by `generator`
/// itself (a noiseless dataset). The generating operator is a fixed point
/// of the iteration, so this is numerically zero.
pub fn fixed_point_residual(
    generator: &ProcessTensor,
    alphas: &[C64],
    cfg: &ReconConfig,
) -> Result<f64> {
    cfg.validate()?;
    let spec = cfg.spec();
    if generator.dim() != spec.dim() {
        return Err(Error::DimensionMismatch("generator dim vs config n_max".into()));
    }
    if alphas.len() < 2 {
        return Err(Error::InvalidParam("need >= 2 probes".into()));
    }
    let model = MeasurementModel::new(spec, cfg.grid);
    let choi = extend_trace_preserving(generator);
    let w_probe = 1.0 / alphas.len() as f64;

    let mut probes = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let rho = coherent_state(alpha, spec)?.density().matrix().clone();
        let rho_rot: Vec<DMatrix<C64>> = (0..cfg.grid.phase_bins)
            .map(|b| model.rotate_probe(&rho, b))
            .collect();
        let rho_t_rot: Vec<DMatrix<C64>> = rho_rot.iter().map(|r| r.transpose()).collect();
        let mut counts = vec![Vec::new(); cfg.grid.phase_bins];
        let mut fail_freq = vec![0.0; cfg.grid.phase_bins];
        for b in 0..cfg.grid.phase_bins {
            let sigma = choi.apply_extended(&rho_rot[b]);
            for q in 0..cfg.grid.quad_bins {
                let p = model.bin_probability(&sigma, b, q);
                if p > 0.0 {
                    counts[b].push((q, w_probe * p));
                }
            }
            fail_freq[b] = w_probe * model.fail_probability(&sigma, b);
        }
        probes.push(ProbeData {
            rho_rot,
            rho_t_rot,
            counts,
            fail_freq,
        });
    }

    let (next, _ll, _) = mlr_step(&choi, &probes, &model, cfg.mu);
    let residual = (&next.mat - &choi.mat)
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max);
    Ok(residual)
}

#[doc(hidden)]
pub fn debug_noiseless_recon(
    generator: &ProcessTensor,
    alphas: &[C64],
    cfg: &ReconConfig,
    iters: usize,
    trace_every: usize,
) -> Vec<(usize, f64, f64)> {
    let spec = cfg.spec();
    let model = MeasurementModel::new(spec, cfg.grid);
    let truth_choi = extend_trace_preserving(generator);
    let w_probe = 1.0 / alphas.len() as f64;
    let mut probes = Vec::new();
    for &alpha in alphas {
        let rho = coherent_state(alpha, spec).unwrap().density().matrix().clone();
        let rho_rot: Vec<DMatrix<C64>> = (0..cfg.grid.phase_bins)
            .map(|b| model.rotate_probe(&rho, b))
            .collect();
        let rho_t_rot: Vec<DMatrix<C64>> = rho_rot.iter().map(|r| r.transpose()).collect();
        let mut counts = vec![Vec::new(); cfg.grid.phase_bins];
        let mut fail_freq = vec![0.0; cfg.grid.phase_bins];
        for b in 0..cfg.grid.phase_bins {
            let sigma = truth_choi.apply_extended(&rho_rot[b]);
            for q in 0..cfg.grid.quad_bins {
                let p = model.bin_probability(&sigma, b, q);
                if p > 0.0 {
                    counts[b].push((q, w_probe * p));
                }
            }
            fail_freq[b] = w_probe * model.fail_probability(&sigma, b);
        }
        probes.push(ProbeData { rho_rot, rho_t_rot, counts, fail_freq });
    }
    let mut choi = ChoiOperator::maximally_mixed(spec);
    let mut out = Vec::new();
    for it in 1..=iters {
        let (next, ll, _) = mlr_step(&choi, &probes, &model, cfg.mu);
        choi = next;
        if it % trace_every == 0 || it == iters {
            let tensor = tensor_from_choi(&choi, "dbg").unwrap();
            let f = choi_fidelity(&tensor, generator).unwrap_or(f64::NAN);
            out.push((it, ll, f));
        }
    }
    out
}

#[doc(hidden)]
pub fn debug_noiseless_recon_tensor(
    generator: &ProcessTensor,
    alphas: &[C64],
    cfg: &ReconConfig,
    iters: usize,
) -> ProcessTensor {
    let spec = cfg.spec();
    let model = MeasurementModel::new(spec, cfg.grid);
    let truth_choi = extend_trace_preserving(generator);
    let w_probe = 1.0 / alphas.len() as f64;
    let mut probes = Vec::new();
    for &alpha in alphas {
        let rho = coherent_state(alpha, spec).unwrap().density().matrix().clone();
        let rho_rot: Vec<DMatrix<C64>> = (0..cfg.grid.phase_bins)
            .map(|b| model.rotate_probe(&rho, b))
            .collect();
        let rho_t_rot: Vec<DMatrix<C64>> = rho_rot.iter().map(|r| r.transpose()).collect();
        let mut counts = vec![Vec::new(); cfg.grid.phase_bins];
        let mut fail_freq = vec![0.0; cfg.grid.phase_bins];
        for b in 0..cfg.grid.phase_bins {
            let sigma = truth_choi.apply_extended(&rho_rot[b]);
            for q in 0..cfg.grid.quad_bins {
                let p = model.bin_probability(&sigma, b, q);
                if p > 0.0 {
                    counts[b].push((q, w_probe * p));
                }
            }
            fail_freq[b] = w_probe * model.fail_probability(&sigma, b);
        }
        probes.push(ProbeData { rho_rot, rho_t_rot, counts, fail_freq });
    }
    let mut choi = ChoiOperator::maximally_mixed(spec);
    for _ in 0..iters {
        let (next, _, _) = mlr_step(&choi, &probes, &model, cfg.mu);
        choi = next;
    }
    tensor_from_choi(&choi, "dbg").unwrap()
}

#[doc(hidden)]
pub fn debug_build_probe_data(
    records: &[ProbeRecord],
    cfg: &ReconConfig,
) -> (Vec<ProbeData>, MeasurementModel) {
    let model = MeasurementModel::new(cfg.spec(), cfg.grid);
    let mut warnings = Vec::new();
    let probes = build_probe_data(records, cfg, &model, &mut warnings).unwrap();
    (probes, model)
}

#[doc(hidden)]
pub struct DebugEngine {
    probes: Vec<ProbeData>,
    model: MeasurementModel,
}

impl DebugEngine {
    pub fn new(records: &[ProbeRecord], cfg: &ReconConfig) -> Self {
        let (probes, model) = debug_build_probe_data(records, cfg);
        Self { probes, model }
    }

    /// (R operator, log-likelihood) of `choi` — one data pass.
    pub fn r_and_ll(&self, choi: &ChoiOperator) -> (DMatrix<C64>, f64) {
        // reuse mlr_step with mu -> the R is not directly returned; compute here
        let d = self.model.d;
        let d_out = d + 1;
        let dim = choi.dim();
        let mut r = DMatrix::from_element(dim, dim, C64::new(0.0, 0.0));
        let mut ll_total = 0.0;
        for probe in &self.probes {
            for b in 0..self.model.grid.phase_bins {
                let sigma = choi.apply_extended(&probe.rho_rot[b]);
                let mut kernel = DMatrix::from_element(d_out, d_out, C64::new(0.0, 0.0));
                if !probe.counts[b].is_empty() {
                    let mut bmat = [[0.0f64; 16]; 16];
                    for m in 0..d {
                        for n in 0..d {
                            let rot = self.model.half_phases[b * d + m]
                                * self.model.half_phases[b * d + n].conj();
                            bmat[m][n] = (sigma[(m, n)] * rot.conj()).re;
                        }
                    }
                    let mut gram = [[0.0f64; 16]; 16];
                    for &(q, f) in &probe.counts[b] {
                        let psi = &self.model.psi[q * d..(q + 1) * d];
                        let mut val = 0.0;
                        for m in 0..d {
                            for n in 0..d {
                                val += bmat[m][n] * psi[m] * psi[n];
                            }
                        }
                        let p = (val * self.model.w_phase * self.model.dx).max(PROBABILITY_FLOOR);
                        ll_total += f * p.ln();
                        let w = f / p;
                        for m in 0..d {
                            for n in m..d {
                                gram[m][n] += w * psi[m] * psi[n];
                            }
                        }
                    }
                    for m in 0..d {
                        for n in m..d {
                            let rot = self.model.half_phases[b * d + m]
                                * self.model.half_phases[b * d + n].conj();
                            let v = rot * (gram[m][n] * self.model.w_phase * self.model.dx);
                            kernel[(m, n)] += v;
                            if n > m {
                                kernel[(n, m)] += v.conj();
                            }
                        }
                    }
                }
                if probe.fail_freq[b] > 0.0 {
                    let p_fail = self.model.fail_probability(&sigma, b).max(PROBABILITY_FLOOR);
                    ll_total += probe.fail_freq[b] * p_fail.ln();
                    let w = probe.fail_freq[b] / p_fail * self.model.w_phase;
                    kernel += self.model.fail_ops[b].scale(w);
                }
                let rho_t = &probe.rho_t_rot[b];
                for j in 0..d_out {
                    for k in 0..d_out {
                        let kjk = kernel[(j, k)];
                        if kjk == C64::new(0.0, 0.0) {
                            continue;
                        }
                        for m in 0..d {
                            for n in 0..d {
                                r[(j * d + m, k * d + n)] += kjk * rho_t[(m, n)];
                            }
                        }
                    }
                }
            }
        }
        (r, ll_total)
    }

    /// Log-likelihood only (cheaper pass).
    pub fn ll(&self, choi: &ChoiOperator) -> f64 {
        let d = self.model.d;
        let mut ll_total = 0.0;
        for probe in &self.probes {
            for b in 0..self.model.grid.phase_bins {
                let sigma = choi.apply_extended(&probe.rho_rot[b]);
                if !probe.counts[b].is_empty() {
                    let mut bmat = [[0.0f64; 16]; 16];
                    for m in 0..d {
                        for n in 0..d {
                            let rot = self.model.half_phases[b * d + m]
                                * self.model.half_phases[b * d + n].conj();
                            bmat[m][n] = (sigma[(m, n)] * rot.conj()).re;
                        }
                    }
                    for &(q, f) in &probe.counts[b] {
                        let psi = &self.model.psi[q * d..(q + 1) * d];
                        let mut val = 0.0;
                        for m in 0..d {
                            for n in 0..d {
                                val += bmat[m][n] * psi[m] * psi[n];
                            }
                        }
                        let p = (val * self.model.w_phase * self.model.dx).max(PROBABILITY_FLOOR);
                        ll_total += f * p.ln();
                    }
                }
                if probe.fail_freq[b] > 0.0 {
                    let p_fail = self.model.fail_probability(&sigma, b).max(PROBABILITY_FLOOR);
                    ll_total += probe.fail_freq[b] * p_fail.ln();
                }
            }
        }
        ll_total
    }
}

#[doc(hidden)]
pub fn choi_from_matrix(mat: DMatrix<C64>, d_in: usize, d_out: usize) -> ChoiOperator {
    ChoiOperator { mat, d_in, d_out }
}

#[doc(hidden)]
pub fn debug_project_tp_psd(choi: &mut ChoiOperator, sweeps: usize) {
    // Dykstra alternating projections onto PSD and the TP affine set
    let d_out = choi.d_out;
    let dim = choi.dim();
    let mut p_corr = DMatrix::from_element(dim, dim, C64::new(0.0, 0.0));
    for _ in 0..sweeps {
        // PSD projection with Dykstra correction
        let mut y = &choi.mat + &p_corr;
        linalg::hermitize(&mut y);
        let (vals, vecs) = linalg::herm_eigen(&y);
        let clamped = DMatrix::from_diagonal(&vals.map(|v| C64::new(v.max(0.0), 0.0)));
        let proj = &vecs * clamped * vecs.adjoint();
        p_corr = y - &proj;
        // affine TP projection (no correction needed for affine sets)
        let mut c = proj;
        let interim = ChoiOperator { mat: c.clone(), d_in: choi.d_in, d_out };
        let t = interim.partial_trace_out();
        let mut defect = t;
        for m in 0..choi.d_in {
            defect[(m, m)] -= C64::new(1.0, 0.0);
        }
        for j in 0..d_out {
            for m in 0..choi.d_in {
                for n in 0..choi.d_in {
                    c[(j * choi.d_in + m, j * choi.d_in + n)] -=
                        defect[(m, n)] / C64::new(d_out as f64, 0.0);
                }
            }
        }
        choi.mat = c;
    }
    linalg::hermitize(&mut choi.mat);
}

#[doc(hidden)]
pub fn debug_noiseless_ll_at_truth(
    generator: &ProcessTensor,
    alphas: &[C64],
    cfg: &ReconConfig,
) -> f64 {
    let spec = cfg.spec();
    let model = MeasurementModel::new(spec, cfg.grid);
    let truth_choi = extend_trace_preserving(generator);
    let w_probe = 1.0 / alphas.len() as f64;
    let mut probes = Vec::new();
    for &alpha in alphas {
        let rho = coherent_state(alpha, spec).unwrap().density().matrix().clone();
        let rho_rot: Vec<DMatrix<C64>> = (0..cfg.grid.phase_bins)
            .map(|b| model.rotate_probe(&rho, b))
            .collect();
        let rho_t_rot: Vec<DMatrix<C64>> = rho_rot.iter().map(|r| r.transpose()).collect();
        let mut counts = vec![Vec::new(); cfg.grid.phase_bins];
        let mut fail_freq = vec![0.0; cfg.grid.phase_bins];
        for b in 0..cfg.grid.phase_bins {
            let sigma = truth_choi.apply_extended(&rho_rot[b]);
            for q in 0..cfg.grid.quad_bins {
                let p = model.bin_probability(&sigma, b, q);
                if p > 0.0 {
                    counts[b].push((q, w_probe * p));
                }
            }
            fail_freq[b] = w_probe * model.fail_probability(&sigma, b);
        }
        probes.push(ProbeData { rho_rot, rho_t_rot, counts, fail_freq });
    }
    let (_, ll, _) = mlr_step(&truth_choi, &probes, &model, cfg.mu);
    ll
}

#[doc(hidden)]
pub fn debug_ll(choi: &ChoiOperator, records: &[ProbeRecord], cfg: &ReconConfig) -> (f64, f64) {
    let model = MeasurementModel::new(cfg.spec(), cfg.grid);
    let mut warnings = Vec::new();
    let probes = build_probe_data(records, cfg, &model, &mut warnings).unwrap();
    let (next, ll, _) = mlr_step(choi, &probes, &model, cfg.mu);
    let resid = (&next.mat - &choi.mat).iter().map(|z| z.norm()).fold(0.0, f64::max);
    (ll, resid)
}

/// Uhlmann fidelity between the trace-normalized physical-block Choi
/// operators of two process tensors.
pub fn choi_fidelity(ea: &ProcessTensor, eb: &ProcessTensor) -> Result<f64> {
    if ea.dim() != eb.dim() {
        return Err(Error::DimensionMismatch(format!(
            "tensor dims {} vs {}",
            ea.dim(),
            eb.dim()
        )));
    }
    let mut a = ea.choi_matrix();
    let mut b = eb.choi_matrix();
    for (name, m) in [("first", &mut a), ("second", &mut b)] {
        let tr: f64 = m.diagonal().iter().map(|z| z.re).sum();
        if tr <= crate::model::ZERO_SUCCESS_TOL {
            return Err(Error::ZeroProbability(format!(
                "{name} tensor has zero Choi trace"
            )));
        }
        *m /= C64::new(tr, 0.0);
    }
    linalg::uhlmann(&a, &b, crate::model::CHOI_PSD_TOL)
}

/// Evenly spaced grid including both endpoints.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Parameter plane for a model-fidelity scan; the off-plane parameters are
/// held fixed.
#[derive(Debug, Clone)]
pub enum ScanSpec {
    /// (eta_H, eta_APD) at fixed R and M.
    EtaHVsEtaApd {
        r: f64,
        multimode_m: f64,
        eta_det: f64,
        eta_h: Vec<f64>,
        eta_apd: Vec<f64>,
    },
    /// (eta_H, R) at fixed eta_APD and M.
    EtaHVsR {
        eta_apd: f64,
        multimode_m: f64,
        eta_det: f64,
        eta_h: Vec<f64>,
        r: Vec<f64>,
    },
}

impl ScanSpec {
    pub fn axis_names(&self) -> (&'static str, &'static str) {
        match self {
            ScanSpec::EtaHVsEtaApd { .. } => ("eta_h", "eta_apd"),
            ScanSpec::EtaHVsR { .. } => ("eta_h", "r"),
        }
    }

    pub fn grids(&self) -> (&[f64], &[f64]) {
        match self {
            ScanSpec::EtaHVsEtaApd { eta_h, eta_apd, .. } => (eta_h, eta_apd),
            ScanSpec::EtaHVsR { eta_h, r, .. } => (eta_h, r),
        }
    }

    fn tensor_at(&self, v1: f64, v2: f64, spec: HilbertSpec) -> Result<ProcessTensor> {
        match self {
            ScanSpec::EtaHVsEtaApd {
                r,
                multimode_m,
                eta_det,
                ..
            } => {
                let params = FsfParams::new(*r, v1, *multimode_m, *eta_det, spec)?;
                let povm = herald_povm(v2, spec.dim(), PovmKind::Click)?;
                compose_fsf_tensor(&params, &povm)
            }
            ScanSpec::EtaHVsR {
                eta_apd,
                multimode_m,
                eta_det,
                ..
            } => {
                let params = FsfParams::new(v2, v1, *multimode_m, *eta_det, spec)?;
                let povm = herald_povm(*eta_apd, spec.dim(), PovmKind::Click)?;
                compose_fsf_tensor(&params, &povm)
            }
        }
    }
}

/// Fidelity surface over a two-parameter model grid.
#[derive(Debug, Clone)]
pub struct ScanSurface {
    pub axis1: &'static str,
    pub axis2: &'static str,
    pub grid1: Vec<f64>,
    pub grid2: Vec<f64>,
    /// Row-major over (grid1, grid2).
    pub values: Vec<f64>,
    pub argmax: (usize, usize),
}

impl ScanSurface {
    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.grid2.len() + j]
    }

    pub fn argmax_params(&self) -> (f64, f64) {
        (self.grid1[self.argmax.0], self.grid2[self.argmax.1])
    }

    pub fn max_value(&self) -> f64 {
        self.value(self.argmax.0, self.argmax.1)
    }

    /// Comma-separated table: axis1, axis2, fidelity.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{},{},fidelity\n", self.axis1, self.axis2);
        for (i, &v1) in self.grid1.iter().enumerate() {
            for (j, &v2) in self.grid2.iter().enumerate() {
                out.push_str(&format!("{v1},{v2},{}\n", self.value(i, j)));
            }
        }
        out
    }
}

/// Scan the Choi fidelity between `recon` and the model tensor over a
/// parameter plane; grid points are independent and run in parallel.
pub fn fidelity_scan(recon: &ProcessTensor, scan: &ScanSpec) -> Result<ScanSurface> {
    let spec = recon.spec();
    let (names, (g1, g2)) = (scan.axis_names(), scan.grids());
    if g1.is_empty() || g2.is_empty() {
        return Err(Error::InvalidParam("empty scan grid".into()));
    }
    for &v in g1.iter().chain(g2.iter()) {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidParam(format!("scan value {v} outside [0,1]")));
        }
    }

    // normalized recon Choi and its square root, shared across points
    let mut a = recon.choi_matrix();
    let tr: f64 = a.diagonal().iter().map(|z| z.re).sum();
    if tr <= crate::model::ZERO_SUCCESS_TOL {
        return Err(Error::ZeroProbability("reconstruction has zero Choi trace".into()));
    }
    a /= C64::new(tr, 0.0);
    let sqrt_a = linalg::sqrt_psd(&a, crate::model::CHOI_PSD_TOL)?;

    let points: Vec<(usize, usize)> = (0..g1.len())
        .flat_map(|i| (0..g2.len()).map(move |j| (i, j)))
        .collect();
    let values: Vec<f64> = points
        .par_iter()
        .map(|&(i, j)| -> Result<f64> {
            let model = scan.tensor_at(g1[i], g2[j], spec)?;
            let mut b = model.choi_matrix();
            let tr: f64 = b.diagonal().iter().map(|z| z.re).sum();
            if tr <= crate::model::ZERO_SUCCESS_TOL {
                // degenerate corner (e.g. everything dark): fidelity 0
                return Ok(0.0);
            }
            b /= C64::new(tr, 0.0);
            linalg::uhlmann_with_sqrt(&sqrt_a, &b, crate::model::CHOI_PSD_TOL)
        })
        .collect::<Result<_>>()?;

    let mut argmax = (0, 0);
    let mut best = f64::NEG_INFINITY;
    for (idx, &(i, j)) in points.iter().enumerate() {
        if values[idx] > best {
            best = values[idx];
            argmax = (i, j);
        }
    }
    Ok(ScanSurface {
        axis1: names.0,
        axis2: names.1,
        grid1: g1.to_vec(),
        grid2: g2.to_vec(),
        values,
        argmax,
    })
}

/// Mean and spread of output-state fidelity between two processes over
/// random input states of bounded photon number.
#[derive(Debug, Clone, Copy)]
pub struct RandomStateFidelity {
    pub n_max: usize,
    pub mean: f64,
    pub std_dev: f64,
    pub samples: usize,
    pub skipped: usize,
}

/// Evolve Hilbert-Schmidt-random input states through both processes and
/// compare the normalized outputs. States are drawn on the subspace with
/// photon number <= n_max and embedded; zero-trace outputs are skipped and
/// counted.
pub fn random_state_fidelity_study<R: Rng + ?Sized>(
    ea: &ProcessTensor,
    eb: &ProcessTensor,
    n_max_list: &[usize],
    count: usize,
    rng: &mut R,
) -> Result<Vec<RandomStateFidelity>> {
    if ea.dim() != eb.dim() {
        return Err(Error::DimensionMismatch("tensor dims differ".into()));
    }
    if count < 10 {
        return Err(Error::InvalidParam("study needs at least 10 samples".into()));
    }
    let full_spec = ea.spec();
    let mut out = Vec::with_capacity(n_max_list.len());
    for &n_max in n_max_list {
        if n_max > full_spec.n_max() {
            return Err(Error::DimensionMismatch(format!(
                "study n_max {n_max} exceeds tensor n_max {}",
                full_spec.n_max()
            )));
        }
        let sub = HilbertSpec::new(n_max)?;
        let states: Vec<DensityMatrix> = (0..count)
            .map(|_| random_density_matrix(sub, rng).embed(full_spec))
            .collect::<Result<_>>()?;
        let fids: Vec<Option<f64>> = states
            .par_iter()
            .map(|rho| {
                let oa = apply_process(ea, rho).ok()?;
                let ob = apply_process(eb, rho).ok()?;
                let (ta, tb) = (oa.trace(), ob.trace());
                if ta <= STUDY_TRACE_FLOOR || tb <= STUDY_TRACE_FLOOR {
                    return None;
                }
                linalg::uhlmann(
                    &(oa.matrix() / C64::new(ta, 0.0)),
                    &(ob.matrix() / C64::new(tb, 0.0)),
                    crate::fock::PSD_TOL,
                )
                .ok()
            })
            .collect();
        let kept: Vec<f64> = fids.iter().flatten().copied().collect();
        let skipped = count - kept.len();
        if kept.is_empty() {
            return Err(Error::ZeroProbability(format!(
                "all outputs at n_max {n_max} had zero trace"
            )));
        }
        let mean = kept.iter().sum::<f64>() / kept.len() as f64;
        let var = kept.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / kept.len() as f64;
        out.push(RandomStateFidelity {
            n_max,
            mean,
            std_dev: var.sqrt(),
            samples: kept.len(),
            skipped,
        });
    }
    Ok(out)
}
