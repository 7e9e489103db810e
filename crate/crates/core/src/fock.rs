//! Truncated single-mode Fock-space numerics.
//!
//! Everything here lives on the Hilbert space spanned by the photon-number
//! states |0>..|n_max>. The quadrature convention is
//!
//! ```text
//! X_theta = (a e^{i theta} + a^dag e^{-i theta}) / sqrt(2)
//! ```
//!
//! so the vacuum quadrature variance is 1/2 and the rotated eigenstate
//! overlaps are <n|x;theta> = e^{-i n theta} psi_n(x) with psi_n the
//! harmonic-oscillator eigenfunctions.
//!
//! The module also carries a two-mode beam-splitter unitary built by exact
//! exponentiation within each total-photon sector. It exists as an
//! independent route to the closed-form herald amplitudes of [`crate::model`]
//! and arbitrates their sign/phase conventions.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::linalg;
use crate::{Error, Result};

/// Hermiticity tolerance for density matrices.
pub const HERMITICITY_TOL: f64 = 1e-12;
/// Minimum eigenvalue tolerated before a matrix counts as non-PSD.
pub const PSD_TOL: f64 = 1e-10;
/// Coherent probes whose truncated tail mass reaches this fraction are
/// rejected.
pub const COHERENT_DEFICIT_LIMIT: f64 = 0.01;
/// Tolerance on |trace - 1| for operations requiring normalized input.
pub const NORMALIZATION_TOL: f64 = 1e-9;

/// Truncated Fock space: photon numbers 0..=n_max.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HilbertSpec {
    n_max: usize,
}

impl HilbertSpec {
    pub fn new(n_max: usize) -> Result<Self> {
        if n_max < 1 {
            return Err(Error::InvalidParam("n_max must be >= 1".into()));
        }
        Ok(Self { n_max })
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    /// Dimension d = n_max + 1.
    pub fn dim(&self) -> usize {
        self.n_max + 1
    }
}

/// Normalized pure state on a truncated Fock space, together with the tail
/// mass that was cut off when it was produced by truncating an infinite
/// expansion (zero for states built directly on the truncated space).
#[derive(Debug, Clone)]
pub struct PureState {
    coeffs: DVector<C64>,
    norm_deficit: f64,
}

impl PureState {
    /// Normalize an arbitrary coefficient vector.
    pub fn from_coeffs(coeffs: Vec<C64>) -> Result<Self> {
        if coeffs.len() < 2 {
            return Err(Error::InvalidParam("state needs dimension >= 2".into()));
        }
        let v = DVector::from_vec(coeffs);
        let norm2: f64 = v.iter().map(|z| z.norm_sqr()).sum();
        if norm2 <= 0.0 {
            return Err(Error::ZeroProbability("all-zero state vector".into()));
        }
        Ok(Self {
            coeffs: v / C64::new(norm2.sqrt(), 0.0),
            norm_deficit: 0.0,
        })
    }

    /// Photon-number state |n>.
    pub fn fock(n: usize, spec: HilbertSpec) -> Result<Self> {
        if n >= spec.dim() {
            return Err(Error::DimensionMismatch(format!(
                "Fock level {n} outside space with n_max {}",
                spec.n_max()
            )));
        }
        let mut v = DVector::from_element(spec.dim(), C64::new(0.0, 0.0));
        v[n] = C64::new(1.0, 0.0);
        Ok(Self {
            coeffs: v,
            norm_deficit: 0.0,
        })
    }

    pub fn coeffs(&self) -> &DVector<C64> {
        &self.coeffs
    }

    pub fn dim(&self) -> usize {
        self.coeffs.len()
    }

    pub fn norm_deficit(&self) -> f64 {
        self.norm_deficit
    }

    /// |psi><psi| as a density matrix.
    pub fn density(&self) -> DensityMatrix {
        let d = self.dim();
        let mut m = DMatrix::from_element(d, d, C64::new(0.0, 0.0));
        for i in 0..d {
            for j in 0..d {
                m[(i, j)] = self.coeffs[i] * self.coeffs[j].conj();
            }
        }
        DensityMatrix { mat: m }
    }
}

/// Hermitian positive-semidefinite matrix with trace in (0, 1]. Sub-unit
/// trace is deliberate: un-normalized outputs of heralded processes carry
/// the success probability in their trace.
#[derive(Debug, Clone)]
pub struct DensityMatrix {
    mat: DMatrix<C64>,
}

impl DensityMatrix {
    /// Validating constructor: Hermitian within [`HERMITICITY_TOL`], PSD
    /// within [`PSD_TOL`], 0 < trace <= 1 + 1e-12.
    pub fn new(mat: DMatrix<C64>) -> Result<Self> {
        if mat.nrows() != mat.ncols() {
            return Err(Error::DimensionMismatch("density matrix must be square".into()));
        }
        let dev = linalg::hermiticity_deviation(&mat);
        if dev > HERMITICITY_TOL {
            return Err(Error::NotHermitian { max_dev: dev });
        }
        let mut mat = mat;
        linalg::hermitize(&mut mat);
        let min_eig = linalg::min_eigenvalue(&mat);
        if min_eig < -PSD_TOL {
            return Err(Error::NotPositive { min_eig });
        }
        let trace = mat.diagonal().iter().map(|z| z.re).sum::<f64>();
        if trace <= 0.0 || trace > 1.0 + 1e-12 {
            return Err(Error::NotNormalized { trace });
        }
        Ok(Self { mat })
    }

    /// Build from an operation output that is Hermitian/PSD by construction;
    /// only re-symmetrizes against rounding drift.
    pub(crate) fn from_output(mut mat: DMatrix<C64>) -> Self {
        linalg::hermitize(&mut mat);
        Self { mat }
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.mat
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.mat.diagonal().iter().map(|z| z.re).sum()
    }

    pub fn element(&self, m: usize, n: usize) -> C64 {
        self.mat[(m, n)]
    }

    pub fn is_normalized(&self) -> bool {
        (self.trace() - 1.0).abs() <= NORMALIZATION_TOL
    }

    /// Rescale to unit trace.
    pub fn normalize(&self) -> Result<Self> {
        let t = self.trace();
        if t <= 0.0 {
            return Err(Error::ZeroProbability("zero-trace density matrix".into()));
        }
        Ok(Self {
            mat: self.mat.clone() / C64::new(t, 0.0),
        })
    }

    /// Maximally mixed state I/d.
    pub fn maximally_mixed(spec: HilbertSpec) -> Self {
        let d = spec.dim();
        Self {
            mat: DMatrix::from_diagonal_element(d, d, C64::new(1.0 / d as f64, 0.0)),
        }
    }

    /// Zero-pad into a larger truncated space.
    pub fn embed(&self, spec: HilbertSpec) -> Result<Self> {
        let d = spec.dim();
        if d < self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "cannot embed dimension {} into {}",
                self.dim(),
                d
            )));
        }
        let mut m = DMatrix::from_element(d, d, C64::new(0.0, 0.0));
        m.view_mut((0, 0), (self.dim(), self.dim())).copy_from(&self.mat);
        Ok(Self { mat: m })
    }

    pub fn min_eigenvalue(&self) -> f64 {
        linalg::min_eigenvalue(&self.mat)
    }
}

/// One heralded homodyne sample: local-oscillator phase and quadrature value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadraturePoint {
    pub theta: f64,
    pub x: f64,
}

impl QuadraturePoint {
    /// Fold an arbitrary phase into [0, pi). X_{theta+pi} = -X_theta, so the
    /// binned statistics of phase-swept data are insensitive to the fold for
    /// the phase-averaged states handled here.
    pub fn fold_phase(theta: f64) -> f64 {
        let pi = std::f64::consts::PI;
        let mut t = theta % pi;
        if t < 0.0 {
            t += pi;
        }
        t
    }
}

/// Truncated, renormalized coherent state |alpha>.
///
/// The kept coefficients are C_n = e^{-|a|^2/2} a^n / sqrt(n!) for n <=
/// n_max; the recorded deficit is the Poisson tail mass beyond the cutoff.
/// Probes with deficit >= [`COHERENT_DEFICIT_LIMIT`] are rejected since the
/// truncated space no longer represents them faithfully.
pub fn coherent_state(alpha: C64, spec: HilbertSpec) -> Result<PureState> {
    if alpha.norm() > 2.0 {
        return Err(Error::InvalidParam(format!(
            "coherent amplitude |alpha| = {} exceeds supported range 2",
            alpha.norm()
        )));
    }
    let d = spec.dim();
    let mut coeffs = Vec::with_capacity(d);
    let mut c = C64::new((-alpha.norm_sqr() / 2.0).exp(), 0.0);
    coeffs.push(c);
    for n in 1..d {
        c *= alpha / C64::new((n as f64).sqrt(), 0.0);
        coeffs.push(c);
    }
    let kept: f64 = coeffs.iter().map(|z| z.norm_sqr()).sum();
    let deficit = (1.0 - kept).max(0.0);
    if deficit >= COHERENT_DEFICIT_LIMIT {
        return Err(Error::TruncationDeficit {
            deficit,
            limit: COHERENT_DEFICIT_LIMIT,
        });
    }
    let scale = C64::new(1.0 / kept.sqrt(), 0.0);
    Ok(PureState {
        coeffs: DVector::from_vec(coeffs) * scale,
        norm_deficit: deficit,
    })
}

/// Harmonic-oscillator eigenfunction psi_n(x) = H_n(x) e^{-x^2/2} /
/// sqrt(2^n n! sqrt(pi)), evaluated through the pre-normalized two-term
/// recurrence (no factorials or bare Hermite values appear, so the
/// evaluation is stable for every n used here).
pub fn quadrature_wavefunction(n: usize, x: f64) -> f64 {
    let psi0 = std::f64::consts::PI.powf(-0.25) * (-x * x / 2.0).exp();
    if n == 0 {
        return psi0;
    }
    let mut prev = psi0;
    let mut cur = std::f64::consts::SQRT_2 * x * psi0;
    for k in 2..=n {
        let kf = k as f64;
        let next = (2.0 / kf).sqrt() * x * cur - ((kf - 1.0) / kf).sqrt() * prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// Fill `out` with psi_0(x)..psi_{d-1}(x) in one recurrence pass.
pub(crate) fn wavefunction_row(x: f64, out: &mut [f64]) {
    let d = out.len();
    out[0] = std::f64::consts::PI.powf(-0.25) * (-x * x / 2.0).exp();
    if d > 1 {
        out[1] = std::f64::consts::SQRT_2 * x * out[0];
    }
    for k in 2..d {
        let kf = k as f64;
        out[k] = (2.0 / kf).sqrt() * x * out[k - 1] - ((kf - 1.0) / kf).sqrt() * out[k - 2];
    }
}

/// Quadrature marginal pr(x | theta) of a normalized state:
///
/// ```text
/// pr(x|theta) = sum_{m,n} rho_mn psi_m(x) psi_n(x) e^{i(m-n) theta}
/// ```
///
/// Returned by value as an evaluatable object so samplers can reuse the
/// phase-rotated coefficients across many x.
#[derive(Debug, Clone)]
pub struct QuadraturePdf {
    /// rho_mn e^{i(m-n)theta}, Hermitian.
    coeffs: DMatrix<C64>,
}

impl QuadraturePdf {
    pub fn dim(&self) -> usize {
        self.coeffs.nrows()
    }

    /// Evaluate the marginal at x; tiny negative rounding residue (above
    /// -1e-12) is clamped to zero.
    pub fn eval(&self, x: f64) -> f64 {
        let d = self.dim();
        let mut psi = [0.0; 32];
        wavefunction_row(x, &mut psi[..d]);
        let mut p = 0.0;
        for m in 0..d {
            p += self.coeffs[(m, m)].re * psi[m] * psi[m];
            for n in (m + 1)..d {
                p += 2.0 * self.coeffs[(m, n)].re * psi[m] * psi[n];
            }
        }
        p.max(0.0)
    }
}

/// Build the quadrature marginal of a normalized density matrix at LO phase
/// `theta`. Errors if the input trace is off unity; heralded outputs must be
/// normalized by their success probability first.
pub fn quadrature_pdf(rho: &DensityMatrix, theta: f64) -> Result<QuadraturePdf> {
    if !rho.is_normalized() {
        return Err(Error::NotNormalized { trace: rho.trace() });
    }
    if rho.dim() > 32 {
        return Err(Error::DimensionMismatch("marginal supports dim <= 32".into()));
    }
    let d = rho.dim();
    let mut coeffs = rho.matrix().clone();
    for m in 0..d {
        for n in 0..d {
            let phase = C64::from_polar(1.0, (m as f64 - n as f64) * theta);
            coeffs[(m, n)] *= phase;
        }
    }
    Ok(QuadraturePdf { coeffs })
}

/// Two-mode beam-splitter unitary exp(i phi (a^dag b + a b^dag)) with
/// phi = arccos(sqrt(R)), on the Fock space truncated at a total photon
/// number. Conventions: transmitted amplitude sqrt(R) real, cross-coupled
/// amplitude i sqrt(1-R).
#[derive(Debug, Clone)]
pub struct TwoModeUnitary {
    total_cutoff: usize,
    mat: DMatrix<C64>,
}

/// Basis index of |n_a, n_b> in the sector-major ordering.
fn two_mode_index(na: usize, nb: usize) -> usize {
    let t = na + nb;
    t * (t + 1) / 2 + na
}

fn two_mode_dim(total_cutoff: usize) -> usize {
    (total_cutoff + 1) * (total_cutoff + 2) / 2
}

impl TwoModeUnitary {
    pub fn total_cutoff(&self) -> usize {
        self.total_cutoff
    }

    /// <out_a, out_b | U | in_a, in_b>; zero across total-photon sectors and
    /// for states beyond the cutoff.
    pub fn amplitude(&self, out_a: usize, out_b: usize, in_a: usize, in_b: usize) -> C64 {
        if out_a + out_b != in_a + in_b || in_a + in_b > self.total_cutoff {
            return C64::new(0.0, 0.0);
        }
        self.mat[(two_mode_index(out_a, out_b), two_mode_index(in_a, in_b))]
    }

    /// The block acting within the fixed-total-photon sector `t`.
    pub fn sector_block(&self, t: usize) -> DMatrix<C64> {
        let off = t * (t + 1) / 2;
        self.mat.view((off, off), (t + 1, t + 1)).into()
    }
}

/// Exact beam-splitter unitary on the two-mode truncated Fock space, built
/// by eigendecomposition of the (real symmetric, tridiagonal) generator
/// within each total-photon sector.
pub fn bs_unitary(r: f64, total_cutoff: usize) -> Result<TwoModeUnitary> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::InvalidParam(format!("reflectivity {r} outside [0,1]")));
    }
    let phi = r.sqrt().acos();
    let dim = two_mode_dim(total_cutoff);
    let mut mat = DMatrix::from_element(dim, dim, C64::new(0.0, 0.0));
    for t in 0..=total_cutoff {
        // generator within the sector, basis |na, t-na> for na = 0..=t:
        // <na+1, .|a^dag b|na, .> = sqrt((na+1)(t-na))
        let n = t + 1;
        let mut h = DMatrix::from_element(n, n, 0.0f64);
        for na in 0..t {
            let v = phi * (((na + 1) * (t - na)) as f64).sqrt();
            h[(na + 1, na)] = v;
            h[(na, na + 1)] = v;
        }
        let eig = h.symmetric_eigen();
        let mut block = DMatrix::from_element(n, n, C64::new(0.0, 0.0));
        for a in 0..n {
            for b in 0..n {
                let mut acc = C64::new(0.0, 0.0);
                for k in 0..n {
                    let phase = C64::from_polar(1.0, eig.eigenvalues[k]);
                    acc += C64::new(eig.eigenvectors[(a, k)] * eig.eigenvectors[(b, k)], 0.0) * phase;
                }
                block[(a, b)] = acc;
            }
        }
        let off = t * (t + 1) / 2;
        mat.view_mut((off, off), (n, n)).copy_from(&block);
    }
    Ok(TwoModeUnitary { total_cutoff, mat })
}

/// Hilbert-Schmidt-random density matrix: rho = G G^dag / Tr with G a square
/// Ginibre matrix of independent standard complex normal entries.
pub fn random_density_matrix<R: Rng + ?Sized>(spec: HilbertSpec, rng: &mut R) -> DensityMatrix {
    let d = spec.dim();
    let g = DMatrix::from_fn(d, d, |_, _| {
        C64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
    });
    let mut m = &g * g.adjoint();
    let trace: f64 = m.diagonal().iter().map(|z| z.re).sum();
    m /= C64::new(trace, 0.0);
    DensityMatrix::from_output(m)
}

/// Uhlmann fidelity F = (Tr sqrt(sqrt(rho) sigma sqrt(rho)))^2 between two
/// normalized states.
pub fn state_fidelity(rho: &DensityMatrix, sigma: &DensityMatrix) -> Result<f64> {
    if rho.dim() != sigma.dim() {
        return Err(Error::DimensionMismatch(format!(
            "state dims {} vs {}",
            rho.dim(),
            sigma.dim()
        )));
    }
    for s in [rho, sigma] {
        if !s.is_normalized() {
            return Err(Error::NotNormalized { trace: s.trace() });
        }
    }
    linalg::uhlmann(rho.matrix(), sigma.matrix(), PSD_TOL)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::factorial;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn spec6() -> HilbertSpec {
        HilbertSpec::new(6).unwrap()
    }

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    /// Simpson quadrature on a uniform grid (odd point count).
    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, points: usize) -> f64 {
        assert!(points % 2 == 1);
        let h = (b - a) / (points - 1) as f64;
        let mut acc = f(a) + f(b);
        for i in 1..points - 1 {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(a + i as f64 * h);
        }
        acc * h / 3.0
    }

    #[test]
    fn vacuum_coherent_state() {
        let s = coherent_state(c(0.0, 0.0), spec6()).unwrap();
        assert_eq!(s.coeffs()[0], c(1.0, 0.0));
        for n in 1..7 {
            assert_eq!(s.coeffs()[n], c(0.0, 0.0));
        }
        assert_eq!(s.norm_deficit(), 0.0);
    }

    #[test]
    fn small_coherent_state_matches_series() {
        // independent oracle: direct series evaluation with explicit factorials
        let alpha = 0.1;
        let s = coherent_state(c(alpha, 0.0), spec6()).unwrap();
        assert!(s.norm_deficit() < 1e-10);
        for n in 0..7 {
            let expected = (-alpha * alpha / 2.0).exp() * alpha.powi(n as i32) / factorial(n).sqrt();
            assert_relative_eq!(s.coeffs()[n].re, expected, max_relative = 1e-10);
            assert_eq!(s.coeffs()[n].im, 0.0);
        }
        assert_relative_eq!(s.coeffs()[1].re, 0.1 * s.coeffs()[0].re, max_relative = 1e-12);
    }

    #[test]
    fn large_probe_deficit_matches_poisson_tail() {
        // oracle: cumulative Poisson sum, mean |alpha|^2 = 2.25
        let alpha: f64 = 1.5;
        let lambda = alpha * alpha;
        let mut cdf = 0.0;
        for k in 0..=6 {
            cdf += (-lambda).exp() * lambda.powi(k) / factorial(k as usize);
        }
        let tail = 1.0 - cdf;
        let s = coherent_state(c(alpha, 0.0), spec6()).unwrap();
        assert!(s.norm_deficit() < COHERENT_DEFICIT_LIMIT);
        assert_relative_eq!(s.norm_deficit(), tail, max_relative = 1e-9);
        let norm2: f64 = s.coeffs().iter().map(|z| z.norm_sqr()).sum();
        assert_relative_eq!(norm2, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn oversized_amplitudes_are_rejected() {
        assert!(matches!(
            coherent_state(c(2.0, 0.0), spec6()),
            Err(Error::TruncationDeficit { .. })
        ));
        assert!(matches!(
            coherent_state(c(2.5, 0.0), spec6()),
            Err(Error::InvalidParam(_))
        ));
    }

    #[test]
    fn wavefunction_values() {
        assert_relative_eq!(
            quadrature_wavefunction(0, 0.0),
            std::f64::consts::PI.powf(-0.25),
            max_relative = 1e-14
        );
        assert_eq!(quadrature_wavefunction(1, 0.0), 0.0);
        // oracle: explicit H_3(x) = 8x^3 - 12x against the recurrence
        let x = 1.3;
        let h3 = 8.0 * x * x * x - 12.0 * x;
        let norm = (2.0f64.powi(3) * factorial(3) * std::f64::consts::PI.sqrt()).sqrt();
        assert_relative_eq!(
            quadrature_wavefunction(3, x),
            h3 * (-x * x / 2.0).exp() / norm,
            max_relative = 1e-12
        );
    }

    #[test]
    fn wavefunctions_are_normalized() {
        // quadrature oracle on [-8, 8], where the n <= 7 tails are < 1e-12
        for n in 0..=7 {
            let integral = simpson(|x| quadrature_wavefunction(n, x).powi(2), -8.0, 8.0, 6401);
            assert!(
                (integral - 1.0).abs() < 1e-9,
                "psi_{n} norm: {integral}"
            );
        }
    }

    #[test]
    fn wavefunction_window_deficit_is_small() {
        // mass outside the acquisition window [-5, 5]; grows with n and
        // reaches ~2.4e-5 at n = 6, which keeps every marginal with support
        // <= 6 normalized on the window to better than 1e-4
        for n in 0..=6 {
            let integral = simpson(|x| quadrature_wavefunction(n, x).powi(2), -5.0, 5.0, 4001);
            let deficit = 1.0 - integral;
            assert!(
                deficit.abs() < 1e-4,
                "psi_{n} window deficit: {deficit}"
            );
        }
    }

    #[test]
    fn vacuum_marginal_is_gaussian() {
        let rho = PureState::fock(0, spec6()).unwrap().density();
        let pdf = quadrature_pdf(&rho, 0.77).unwrap();
        for &x in &[0.0f64, 0.5, -1.2, 2.0] {
            let expected = (-x * x).exp() / std::f64::consts::PI.sqrt();
            assert_relative_eq!(pdf.eval(x), expected, max_relative = 1e-12);
        }
    }

    #[test]
    fn single_photon_marginal() {
        let rho = PureState::fock(1, spec6()).unwrap().density();
        let pdf = quadrature_pdf(&rho, 1.9).unwrap();
        assert_eq!(pdf.eval(0.0), 0.0);
        for &x in &[0.3f64, -0.9, 1.7] {
            let expected = 2.0 * x * x * (-x * x).exp() / std::f64::consts::PI.sqrt();
            assert_relative_eq!(pdf.eval(x), expected, max_relative = 1e-12);
        }
    }

    #[test]
    fn coherent_marginal_moments() {
        // oracle: numerical moments of the marginal at theta = 0
        let alpha = 0.8;
        let rho = coherent_state(c(alpha, 0.0), spec6()).unwrap().density();
        let pdf = quadrature_pdf(&rho, 0.0).unwrap();
        let norm = simpson(|x| pdf.eval(x), -5.0, 5.0, 4001);
        let mean = simpson(|x| x * pdf.eval(x), -5.0, 5.0, 4001) / norm;
        let var = simpson(|x| x * x * pdf.eval(x), -5.0, 5.0, 4001) / norm - mean * mean;
        assert!((norm - 1.0).abs() < 1e-4);
        assert_relative_eq!(mean, std::f64::consts::SQRT_2 * alpha, max_relative = 1e-4);
        assert_relative_eq!(var, 0.5, max_relative = 1e-3);
    }

    #[test]
    fn marginal_requires_normalized_state() {
        let mut m = PureState::fock(0, spec6()).unwrap().density().matrix().clone();
        m[(0, 0)] = c(0.5, 0.0);
        let rho = DensityMatrix::from_output(m);
        assert!(matches!(quadrature_pdf(&rho, 0.0), Err(Error::NotNormalized { .. })));
    }

    #[test]
    fn marginal_phase_insensitive_for_number_states() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let d = 7;
        let mut m = DMatrix::from_element(d, d, c(0.0, 0.0));
        let mut tr = 0.0;
        for n in 0..d {
            let w: f64 = rng.gen::<f64>();
            m[(n, n)] = c(w, 0.0);
            tr += w;
        }
        m /= c(tr, 0.0);
        let rho = DensityMatrix::new(m).unwrap();
        let p0 = quadrature_pdf(&rho, 0.0).unwrap();
        let p1 = quadrature_pdf(&rho, 2.31).unwrap();
        for i in 0..=40 {
            let x = -4.0 + 0.2 * i as f64;
            assert_relative_eq!(p0.eval(x), p1.eval(x), epsilon = 1e-13);
        }
    }

    #[test]
    fn beam_splitter_r1_is_identity() {
        let u = bs_unitary(1.0, 4).unwrap();
        for t in 0..=4 {
            let b = u.sector_block(t);
            for a in 0..=t {
                for bb in 0..=t {
                    let expected = if a == bb { 1.0 } else { 0.0 };
                    assert!((b[(a, bb)] - c(expected, 0.0)).norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn beam_splitter_cross_amplitude_convention() {
        for &r in &[0.1, 0.3, 0.5, 2.0 / 3.0, 0.9] {
            let u = bs_unitary(r, 3).unwrap();
            let a = u.amplitude(0, 1, 1, 0);
            assert_relative_eq!(a.re, 0.0, epsilon = 1e-12);
            assert_relative_eq!(a.im, (1.0 - r).sqrt(), epsilon = 1e-12);
            let t = u.amplitude(1, 0, 1, 0);
            assert_relative_eq!(t.re, r.sqrt(), epsilon = 1e-12);
            assert_relative_eq!(t.im, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn beam_splitter_blocks_are_unitary() {
        for &r in &[0.0, 0.25, 0.5, 0.77, 1.0] {
            let u = bs_unitary(r, 7).unwrap();
            for t in 0..=7 {
                let b = u.sector_block(t);
                let err = (b.adjoint() * &b - DMatrix::identity(t + 1, t + 1))
                    .iter()
                    .map(|z| z.norm())
                    .fold(0.0, f64::max);
                assert!(err < 1e-12, "R={r} sector {t}: {err}");
            }
        }
    }

    #[test]
    fn beam_splitter_rejects_bad_reflectivity() {
        assert!(bs_unitary(-0.1, 3).is_err());
        assert!(bs_unitary(1.1, 3).is_err());
    }

    #[test]
    fn random_states_are_physical_and_reproducible() {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let rho = random_density_matrix(spec6(), &mut rng);
        assert!(linalg::hermiticity_deviation(rho.matrix()) < 1e-14);
        assert!(rho.min_eigenvalue() > -1e-12);
        assert_relative_eq!(rho.trace(), 1.0, epsilon = 1e-12);

        let mut rng2 = ChaCha12Rng::seed_from_u64(42);
        let rho2 = random_density_matrix(spec6(), &mut rng2);
        assert_eq!(rho.matrix(), rho2.matrix());
    }

    #[test]
    fn random_state_mean_is_maximally_mixed() {
        let spec = spec6();
        let d = spec.dim();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut acc = DMatrix::from_element(d, d, c(0.0, 0.0));
        let samples = 10_000;
        for _ in 0..samples {
            acc += random_density_matrix(spec, &mut rng).matrix();
        }
        acc /= c(samples as f64, 0.0);
        for i in 0..d {
            for j in 0..d {
                let expected = if i == j { 1.0 / d as f64 } else { 0.0 };
                assert!(
                    (acc[(i, j)] - c(expected, 0.0)).norm() < 2e-2,
                    "mean deviates at ({i},{j}): {}",
                    acc[(i, j)]
                );
            }
        }
    }

    #[test]
    fn fidelity_trivial_cases() {
        let spec = spec6();
        let zero = PureState::fock(0, spec).unwrap().density();
        let one = PureState::fock(1, spec).unwrap().density();
        assert_relative_eq!(state_fidelity(&zero, &zero).unwrap(), 1.0, epsilon = 1e-12);
        assert!(state_fidelity(&zero, &one).unwrap() < 1e-12);

        // oracle: closed-form pure-state overlap |<0|+>|^2 = 1/2
        let plus = PureState::from_coeffs(vec![
            c(1.0, 0.0),
            c(1.0, 0.0),
            c(0.0, 0.0),
            c(0.0, 0.0),
            c(0.0, 0.0),
            c(0.0, 0.0),
            c(0.0, 0.0),
        ])
        .unwrap()
        .density();
        assert_relative_eq!(state_fidelity(&zero, &plus).unwrap(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn fidelity_is_symmetric() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let a = random_density_matrix(spec6(), &mut rng);
        let b = random_density_matrix(spec6(), &mut rng);
        let f_ab = state_fidelity(&a, &b).unwrap();
        let f_ba = state_fidelity(&b, &a).unwrap();
        assert!((f_ab - f_ba).abs() < 1e-10);
        assert!((0.0..=1.0).contains(&f_ab));
    }
}
