//! The reduced layer-interaction system on a closed curve: the interaction
//! distance ρ_ε, the structure matrices of the N-layer system and their
//! spectra, the explicit leading layer profile, the σ-power refinement
//! recursion, periodic variable-coefficient linear solvers with resonance
//! certification, the amplitude equation, and the coupled residual of the
//! full position/amplitude system.
//!
//! Conventions: periodic functions live on θ ∈ (0,1) sampled on a uniform
//! grid of even length m; derivatives are spectral. Layer positions are
//! written f̆_j = (j − (N+1)/2)·ρ_ε + d_j around the equally spaced lattice;
//! the difference variables are v_j = d_{j+1} − d_j for j < N together with
//! v_N = Σ_j d_j, related by the change-of-variables matrix B.

use nalgebra::DMatrix;

use crate::geometry::{jacobi_coefficients, CurveGeometry};
use crate::linalg::{apply_matrix, spectral_d1, spectral_d2, trapezoid_periodic};
use crate::profile1d::ProfileSet;
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Small helpers
// ---------------------------------------------------------------------------

fn l2_norm(f: &[f64]) -> f64 {
    let sq: Vec<f64> = f.iter().map(|v| v * v).collect();
    trapezoid_periodic(1.0, &sq).sqrt()
}

fn stacked_l2(fs: &[Vec<f64>]) -> f64 {
    fs.iter().map(|f| l2_norm(f).powi(2)).sum::<f64>().sqrt()
}

/// Spectral first/second derivative operators for period-1 samples.
struct Derivatives {
    d1: DMatrix<f64>,
    d2: DMatrix<f64>,
}

impl Derivatives {
    fn new(m: usize) -> Self {
        Derivatives { d1: spectral_d1(m), d2: spectral_d2(m) }
    }

    fn first(&self, f: &[f64]) -> Vec<f64> {
        apply_matrix(&self.d1, f)
    }

    fn second(&self, f: &[f64]) -> Vec<f64> {
        apply_matrix(&self.d2, f)
    }
}

// ---------------------------------------------------------------------------
// Interaction distance ρ_ε
// ---------------------------------------------------------------------------

/// Solution of ε²ρ = p·α_p·C₀·e^{−√p·ρ} together with its logarithmic
/// asymptotic value and the defining-equation residual.
#[derive(Debug, Clone)]
pub struct InteractionDistance {
    pub rho: f64,
    /// Two-term logarithmic expansion
    /// (2/√p)|log ε| − (1/√p)log[(2/√p)|log ε|] + (1/√p)log(p·α_p·C₀).
    pub asymptotic: f64,
    pub asymptotic_gap: f64,
    pub residual: f64,
}

/// Solves the transcendental fixed-point equation for the interaction
/// distance. The map ρ ↦ ε²ρ − p·α_p·C₀·e^{−√p·ρ} is strictly increasing
/// with a sign change on (0, ∞), so a safeguarded Newton iteration converges
/// unconditionally.
pub fn solve_rho(eps: f64, p: f64, alpha_p: f64, c0: f64) -> Result<InteractionDistance> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::Validation(format!("interaction distance needs ε ∈ (0,1), got {eps}")));
    }
    if !(alpha_p > 0.0 && c0 > 0.0) {
        return Err(Error::Validation(format!(
            "interaction distance needs positive tail constants, got α={alpha_p}, C₀={c0}"
        )));
    }
    if !(p > 1.0) {
        return Err(Error::InvalidExponent { p, reason: "interaction distance needs p > 1".into() });
    }
    let sp = p.sqrt();
    let k = p * alpha_p * c0;
    let f = |r: f64| eps * eps * r - k * (-sp * r).exp();
    let fp = |r: f64| eps * eps + sp * k * (-sp * r).exp();
    // Bracket the root: f(0) = -k < 0; grow the upper end until positive.
    let mut lo = 0.0f64;
    let mut hi = (2.0 / sp) * eps.ln().abs() + 1.0;
    while f(hi) <= 0.0 {
        hi *= 2.0;
    }
    let mut rho = 0.5 * (lo + hi);
    for _ in 0..200 {
        let step = f(rho) / fp(rho);
        let mut next = rho - step;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if f(next) > 0.0 {
            hi = next;
        } else {
            lo = next;
        }
        if (next - rho).abs() < 1e-16 * (1.0 + rho.abs()) {
            rho = next;
            break;
        }
        rho = next;
    }
    let el = eps.ln().abs();
    let asymptotic = (2.0 / sp) * el - (1.0 / sp) * ((2.0 / sp) * el).ln() + (1.0 / sp) * k.ln();
    Ok(InteractionDistance {
        rho,
        asymptotic,
        asymptotic_gap: (rho - asymptotic).abs(),
        residual: f(rho).abs(),
    })
}

// ---------------------------------------------------------------------------
// Structure matrices
// ---------------------------------------------------------------------------

/// The constant matrices of the N-layer difference system: the second
/// difference matrix M, its square root, the change-of-variables matrix B
/// between positions and differences, the lattice weights r_i = (N−i)·i and
/// the symmetric interaction matrix D with eigenvalues Λ_i.
#[derive(Debug, Clone)]
pub struct TodaMatrices {
    pub n_layers: usize,
    pub p: f64,
    /// (N−1)×(N−1) tridiagonal (2 on the diagonal, −1 off).
    pub m: DMatrix<f64>,
    pub m_sqrt: DMatrix<f64>,
    /// N×N: rows 1..N−1 take consecutive differences, last row sums.
    pub b: DMatrix<f64>,
    pub b_inv: DMatrix<f64>,
    /// r_i = (N−i)·i for i = 1..N−1.
    pub r: Vec<f64>,
    /// D = (√p/2)·M^{1/2}·diag(r)·M^{1/2}.
    pub d: DMatrix<f64>,
    /// Eigenvalues of D, ascending.
    pub lambdas: Vec<f64>,
}

pub fn toda_matrices(n: usize, p: f64) -> Result<TodaMatrices> {
    if n < 2 {
        return Err(Error::Validation(format!("layer matrices need N ≥ 2, got {n}")));
    }
    if !(p > 1.0) {
        return Err(Error::InvalidExponent { p, reason: "layer matrices need p > 1".into() });
    }
    let k = n - 1;
    let mut m = DMatrix::zeros(k, k);
    for i in 0..k {
        m[(i, i)] = 2.0;
        if i + 1 < k {
            m[(i, i + 1)] = -1.0;
            m[(i + 1, i)] = -1.0;
        }
    }
    let eig = m.clone().symmetric_eigen();
    let mut m_sqrt = DMatrix::zeros(k, k);
    for idx in 0..k {
        let lam: f64 = eig.eigenvalues[idx];
        let u = eig.eigenvectors.column(idx);
        m_sqrt += lam.sqrt() * &u * u.transpose();
    }
    let mut b = DMatrix::zeros(n, n);
    for j in 0..n - 1 {
        b[(j, j)] = -1.0;
        b[(j, j + 1)] = 1.0;
    }
    for j in 0..n {
        b[(n - 1, j)] = 1.0;
    }
    let b_inv = b
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("difference change-of-variables matrix not invertible".into()))?;
    let r: Vec<f64> = (1..n).map(|i| ((n - i) * i) as f64).collect();
    let mut diag_r = DMatrix::zeros(k, k);
    for i in 0..k {
        diag_r[(i, i)] = r[i];
    }
    let d = (p.sqrt() / 2.0) * &m_sqrt * diag_r * &m_sqrt;
    let mut lambdas: Vec<f64> = d.clone().symmetric_eigen().eigenvalues.iter().cloned().collect();
    lambdas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(TodaMatrices { n_layers: n, p, m, m_sqrt, b, b_inv, r, d, lambdas })
}

// ---------------------------------------------------------------------------
// Leading layer profile
// ---------------------------------------------------------------------------

/// The explicit leading-order difference profile and the positions it
/// induces (with the sum variable fixed to zero).
#[derive(Debug, Clone)]
pub struct LeadingProfile {
    /// v̄₁ component arrays over θ, one per i = 1..N−1.
    pub v1: Vec<Vec<f64>>,
    /// Reconstructed positions d_j over θ, one per j = 1..N.
    pub d: Vec<Vec<f64>>,
    /// max node-wise |M·exp(−√p·v̄₁) − Υ₀·1|.
    pub linear_residual: f64,
}

/// Reconstructs positions from differences: d_j = (1/N)v_N − Σ_{k≥j} v_k
/// + (1/N)Σ_k k·v_k, with v = (v_1, …, v_{N−1}, v_N).
pub fn positions_from_differences(v: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = v.len();
    let m = v[0].len();
    let mut d = vec![vec![0.0; m]; n];
    for t in 0..m {
        let weighted: f64 = (1..n).map(|k| k as f64 * v[k - 1][t]).sum();
        for j in 1..=n {
            let tail: f64 = (j..n).map(|k| v[k - 1][t]).sum();
            d[j - 1][t] = v[n - 1][t] / n as f64 - tail + weighted / n as f64;
        }
    }
    d
}

/// Forward change of variables: v_j = d_{j+1} − d_j for j < N, v_N = Σ d_j.
pub fn differences_from_positions(d: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = d.len();
    let m = d[0].len();
    let mut v = vec![vec![0.0; m]; n];
    for t in 0..m {
        for j in 0..n - 1 {
            v[j][t] = d[j + 1][t] - d[j][t];
        }
        v[n - 1][t] = (0..n).map(|j| d[j][t]).sum();
    }
    v
}

/// The closed-form leading profile v̄₁ᵢ = −(1/√p)·log[(Υ₀/2)(N−i)i], the
/// unique solution of M·exp(−√p·v̄₁) = Υ₀·1 node-wise.
pub fn leading_layer_profile(tm: &TodaMatrices, upsilon0: &[f64]) -> Result<LeadingProfile> {
    let min_u0 = upsilon0.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min_u0 > 0.0) {
        return Err(Error::DegenerateGeometry { min_upsilon0: min_u0 });
    }
    let n = tm.n_layers;
    let sp = tm.p.sqrt();
    let m = upsilon0.len();
    let mut v1 = Vec::with_capacity(n - 1);
    for i in 1..n {
        let ri = ((n - i) * i) as f64;
        let row: Vec<f64> = upsilon0.iter().map(|&u| -(u / 2.0 * ri).ln() / sp).collect();
        v1.push(row);
    }
    // Verify the defining linear system node-wise.
    let mut worst = 0.0f64;
    for t in 0..m {
        for i in 0..n - 1 {
            let mut acc = 0.0;
            for j in 0..n - 1 {
                acc += tm.m[(i, j)] * (-sp * v1[j][t]).exp();
            }
            worst = worst.max((acc - upsilon0[t]).abs());
        }
    }
    let mut v = v1.clone();
    v.push(vec![0.0; m]);
    let d = positions_from_differences(&v);
    Ok(LeadingProfile { v1, d, linear_residual: worst })
}

// ---------------------------------------------------------------------------
// Layer state
// ---------------------------------------------------------------------------

/// Layer positions and amplitudes at a given ε: the lattice offset arrays
/// d_j, the difference variables, the scaled and unscaled position functions
/// and the amplitude functions.
#[derive(Debug, Clone)]
pub struct LayerState {
    pub n_layers: usize,
    pub eps: f64,
    pub p: f64,
    pub rho: f64,
    pub sigma: f64,
    pub d: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// f̆_j = (j − (N+1)/2)·ρ_ε + d_j.
    pub f_breve: Vec<Vec<f64>>,
    /// f_j = f̆_j / β.
    pub f: Vec<Vec<f64>>,
    pub e: Vec<Vec<f64>>,
}

/// Assembles a [`LayerState`] and checks the separation and size invariants:
/// consecutive scaled positions must stay further apart than
/// (2/√p)|log ε| − (4/√p)·log|log ε|, positions must stay within C|log ε|²
/// and amplitudes below ε^{1/2}.
pub fn layer_state(
    eps: f64,
    p: f64,
    alpha_p: f64,
    c0: f64,
    d: Vec<Vec<f64>>,
    e: Vec<Vec<f64>>,
    beta: &[f64],
) -> Result<LayerState> {
    let n = d.len();
    if n == 0 || e.len() != n {
        return Err(Error::Validation(format!(
            "layer state needs matching position/amplitude families, got {} and {}",
            n,
            e.len()
        )));
    }
    let m = beta.len();
    if d.iter().chain(e.iter()).any(|a| a.len() != m) {
        return Err(Error::Validation("layer state arrays must share the θ-grid".into()));
    }
    let dist = solve_rho(eps, p, alpha_p, c0)?;
    let rho = dist.rho;
    let sp = p.sqrt();
    let mut f_breve = Vec::with_capacity(n);
    let mut f = Vec::with_capacity(n);
    for (j, dj) in d.iter().enumerate() {
        let offset = (j as f64 + 1.0 - (n as f64 + 1.0) / 2.0) * rho;
        let fb: Vec<f64> = dj.iter().map(|&x| offset + x).collect();
        let ff: Vec<f64> = fb.iter().zip(beta).map(|(&x, &b)| x / b).collect();
        f_breve.push(fb);
        f.push(ff);
    }
    let el = eps.ln().abs();
    let required = if el > 1.0 { (2.0 / sp) * el - (4.0 / sp) * el.ln() } else { 0.0 };
    for j in 0..n.saturating_sub(1) {
        let sep = (0..m)
            .map(|t| f_breve[j + 1][t] - f_breve[j][t])
            .fold(f64::INFINITY, f64::min);
        if sep <= required {
            return Err(Error::LayerOverlap { separation: sep, required });
        }
    }
    let f_bound = 10.0 * el * el;
    for fj in &f {
        let sup = fj.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        if sup > f_bound {
            return Err(Error::Validation(format!(
                "layer position sup {sup:.3e} exceeds the |log ε|² bound {f_bound:.3e}"
            )));
        }
    }
    for ej in &e {
        let sup = ej.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        if sup >= eps.sqrt() {
            return Err(Error::Validation(format!(
                "layer amplitude sup {sup:.3e} exceeds ε^½ = {:.3e}",
                eps.sqrt()
            )));
        }
    }
    let v = differences_from_positions(&d);
    Ok(LayerState {
        n_layers: n,
        eps,
        p,
        rho,
        sigma: 1.0 / rho,
        d,
        v,
        f_breve,
        f,
        e,
    })
}

// ---------------------------------------------------------------------------
// Periodic variable-coefficient solver
// ---------------------------------------------------------------------------

/// Collocation matrix of σ[−Υ₂∂² + Υ₁∂] − μΥ₀ on the period-1 grid.
fn periodic_operator(
    u2: &[f64],
    u1: &[f64],
    u0: &[f64],
    mu: f64,
    sigma: f64,
    der: &Derivatives,
) -> DMatrix<f64> {
    let m = u2.len();
    let mut op = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            op[(i, j)] = sigma * (-u2[i] * der.d2[(i, j)] + u1[i] * der.d1[(i, j)]);
        }
        op[(i, i)] -= mu * u0[i];
    }
    op
}

/// Real eigenvalues of the periodic pencil −Υ₂φ″ + Υ₁φ′ = λΥ₀φ, ascending.
/// Near-real eigenvalues of the collocation matrix are kept; genuinely
/// complex discretization artifacts are discarded.
pub fn periodic_spectrum(u2: &[f64], u1: &[f64], u0: &[f64]) -> Vec<f64> {
    let m = u2.len();
    let der = Derivatives::new(m);
    let mut op = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            op[(i, j)] = (-u2[i] * der.d2[(i, j)] + u1[i] * der.d1[(i, j)]) / u0[i];
        }
    }
    let eigs = op.complex_eigenvalues();
    let mut lams: Vec<f64> = eigs
        .iter()
        .filter(|z| z.im.abs() <= 1e-6 * (1.0 + z.re.abs()))
        .map(|z| z.re)
        .collect();
    lams.sort_by(|a, b| a.partial_cmp(b).unwrap());
    lams
}

/// Solution record of the resolvent problem σ[−Υ₂φ″ + Υ₁φ′] − μΥ₀φ = g.
#[derive(Debug, Clone)]
pub struct PeriodicSolve {
    pub phi: Vec<f64>,
    /// ‖operator·φ − g‖₂ / ‖g‖₂.
    pub residual: f64,
    /// Distance of μ/σ to the nearest pencil eigenvalue.
    pub gap: f64,
    pub nearest_eigenvalue: f64,
    /// Measured constant in ‖φ‖ ≤ C·σ^{-1/2}‖g‖/gap.
    pub bound_ratio: f64,
}

/// Solves the periodic resolvent problem by dense Fourier collocation after
/// certifying that μ/σ keeps the configured distance from the pencil
/// spectrum.
pub fn solve_periodic_linear(
    u2: &[f64],
    u1: &[f64],
    u0: &[f64],
    mu: f64,
    sigma: f64,
    g: &[f64],
    gap_threshold: f64,
) -> Result<PeriodicSolve> {
    let m = u2.len();
    if m % 2 != 0 || u1.len() != m || u0.len() != m || g.len() != m {
        return Err(Error::Validation("periodic solver needs matching even-length arrays".into()));
    }
    let target = mu / sigma;
    let spectrum = periodic_spectrum(u2, u1, u0);
    let (gap, nearest) = spectrum
        .iter()
        .map(|&l| ((target - l).abs(), l))
        .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
        .unwrap_or((f64::INFINITY, f64::NAN));
    if gap <= gap_threshold {
        return Err(Error::Resonance(format!(
            "spectral gap {gap:.3e} at μ/σ = {target:.6} is below the threshold {gap_threshold:.3e}; \
             nearest periodic eigenvalue {nearest:.6}"
        )));
    }
    let der = Derivatives::new(m);
    let op = periodic_operator(u2, u1, u0, mu, sigma, &der);
    let rhs = nalgebra::DVector::from_column_slice(g);
    let lu = op.clone().lu();
    let phi_v = lu
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("periodic collocation matrix is singular".into()))?;
    let phi: Vec<f64> = phi_v.iter().cloned().collect();
    let back = &op * &phi_v;
    let res: Vec<f64> = (0..m).map(|i| back[i] - g[i]).collect();
    let gn = l2_norm(g).max(1e-300);
    let residual = l2_norm(&res) / gn;
    let bound_ratio = l2_norm(&phi) * gap * sigma.sqrt() / gn;
    Ok(PeriodicSolve { phi, residual, gap, nearest_eigenvalue: nearest, bound_ratio })
}

// ---------------------------------------------------------------------------
// Refinement recursion
// ---------------------------------------------------------------------------

/// Result of the σ-power refinement: the refined difference profile, the
/// individual corrections, and the defect norms per stage.
#[derive(Debug, Clone)]
pub struct ProfileRefinement {
    /// v̄_k component arrays (N−1 of them).
    pub v_bar: Vec<Vec<f64>>,
    /// Corrections w_1 … w_{k−1} (each a family of N−1 arrays).
    pub corrections: Vec<Vec<Vec<f64>>>,
    /// ‖defect(v̄_j)‖₂ for j = 1..k.
    pub defects: Vec<f64>,
}

/// The nonlinear defect of a difference profile: component-wise
/// σ[−Υ₂v″ + Υ₁v′ − Υ₀v] − Υ₀·1 + M·exp(−√p·v).
fn difference_defect(
    tm: &TodaMatrices,
    u2: &[f64],
    u1: &[f64],
    u0: &[f64],
    sigma: f64,
    v: &[Vec<f64>],
    der: &Derivatives,
) -> Vec<Vec<f64>> {
    let k = tm.n_layers - 1;
    let m = u0.len();
    let sp = tm.p.sqrt();
    let mut exps = vec![vec![0.0; m]; k];
    for i in 0..k {
        for t in 0..m {
            exps[i][t] = (-sp * v[i][t]).exp();
        }
    }
    let mut out = vec![vec![0.0; m]; k];
    for i in 0..k {
        let dv = der.first(&v[i]);
        let ddv = der.second(&v[i]);
        for t in 0..m {
            let mut inter = 0.0;
            for j in 0..k {
                inter += tm.m[(i, j)] * exps[j][t];
            }
            out[i][t] =
                sigma * (-u2[t] * ddv[t] + u1[t] * dv[t] - u0[t] * v[i][t]) - u0[t] + inter;
        }
    }
    out
}

/// Quadratic-and-higher remainder of the interaction term around the leading
/// profile: (Υ₀/2)·M·[r_i(exp(−√p·w_i) − 1 + √p·w_i)].
fn interaction_remainder(
    tm: &TodaMatrices,
    u0: &[f64],
    w: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let k = tm.n_layers - 1;
    let m = u0.len();
    let sp = tm.p.sqrt();
    let mut inner = vec![vec![0.0; m]; k];
    for i in 0..k {
        for t in 0..m {
            inner[i][t] = tm.r[i] * ((-sp * w[i][t]).exp() - 1.0 + sp * w[i][t]);
        }
    }
    let mut out = vec![vec![0.0; m]; k];
    for i in 0..k {
        for t in 0..m {
            let mut acc = 0.0;
            for j in 0..k {
                acc += tm.m[(i, j)] * inner[j][t];
            }
            out[i][t] = u0[t] / 2.0 * acc;
        }
    }
    out
}

/// Builds the order-k refined profile v̄_k = v̄₁ + Σ w_j. Each correction
/// solves the frozen linearization −(√p/2)Υ₀·M·diag(r)·w = previous defect
/// node-wise; the defect of every stage is recorded and must decrease.
pub fn refine_layer_profile(
    k: usize,
    tm: &TodaMatrices,
    u2: &[f64],
    u1: &[f64],
    u0: &[f64],
    sigma: f64,
) -> Result<ProfileRefinement> {
    if k < 1 {
        return Err(Error::Validation("refinement order must be at least 1".into()));
    }
    let lead = leading_layer_profile(tm, u0)?;
    let nk = tm.n_layers - 1;
    let m = u0.len();
    let der = Derivatives::new(m);
    let sp = tm.p.sqrt();
    // Frozen Jacobian factor: M·diag(r), inverted once.
    let mut mr = tm.m.clone();
    for j in 0..nk {
        for i in 0..nk {
            mr[(i, j)] *= tm.r[j];
        }
    }
    let mr_inv = mr
        .try_inverse()
        .ok_or_else(|| Error::Numerical("frozen interaction Jacobian not invertible".into()))?;

    let jac = |f: &[Vec<f64>]| -> Vec<Vec<f64>> {
        f.iter()
            .map(|fi| {
                let d1 = der.first(fi);
                let d2 = der.second(fi);
                (0..m)
                    .map(|t| sigma * (-u2[t] * d2[t] + u1[t] * d1[t] - u0[t] * fi[t]))
                    .collect()
            })
            .collect()
    };

    let mut v_bar = lead.v1.clone();
    let mut corrections: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut defects = vec![stacked_l2(&difference_defect(tm, u2, u1, u0, sigma, &v_bar, &der))];
    let mut w_sum = vec![vec![0.0; m]; nk];
    let mut prev_remainder = vec![vec![0.0; m]; nk];
    let mut last_piece = lead.v1.clone();
    for _stage in 1..k {
        // Right side: σ·jac(previous piece) + N₁(Σw) − N₁(Σw without last).
        let lin = jac(&last_piece);
        let cur_remainder = interaction_remainder(tm, u0, &w_sum);
        let mut rhs = vec![vec![0.0; m]; nk];
        for i in 0..nk {
            for t in 0..m {
                rhs[i][t] = lin[i][t] + cur_remainder[i][t] - prev_remainder[i][t];
            }
        }
        // Node-wise solve of (√p/2)·Υ₀·M·diag(r)·w = rhs.
        let mut w = vec![vec![0.0; m]; nk];
        for t in 0..m {
            let scale = 2.0 / (sp * u0[t]);
            for i in 0..nk {
                let mut acc = 0.0;
                for j in 0..nk {
                    acc += mr_inv[(i, j)] * rhs[j][t];
                }
                w[i][t] = scale * acc;
            }
        }
        for i in 0..nk {
            for t in 0..m {
                v_bar[i][t] += w[i][t];
                w_sum[i][t] += w[i][t];
            }
        }
        let defect = stacked_l2(&difference_defect(tm, u2, u1, u0, sigma, &v_bar, &der));
        if defect >= *defects.last().unwrap() {
            return Err(Error::NonConvergence {
                detail: format!(
                    "refinement stalled at stage {}: defect {defect:.3e} did not improve on {:.3e}",
                    defects.len() + 1,
                    defects.last().unwrap()
                ),
                residual: defect,
            });
        }
        defects.push(defect);
        prev_remainder = cur_remainder;
        last_piece = w.clone();
        corrections.push(w);
    }
    Ok(ProfileRefinement { v_bar, corrections, defects })
}

// ---------------------------------------------------------------------------
// Resonance certification
// ---------------------------------------------------------------------------

/// Normalization of the amplitude resonance threshold λ*. The printed form
/// divides by 4π; the mode-matching form divides by 4π² (consistent with the
/// Fourier symbol 4π²k² of a period-1 mode). Both are exposed; the printed
/// form is the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LambdaStarConvention {
    Printed,
    ModeMatched,
}

pub fn lambda_star(lambda0: f64, l2: f64, conv: LambdaStarConvention) -> f64 {
    match conv {
        LambdaStarConvention::Printed => lambda0 * l2 * l2 / (4.0 * std::f64::consts::PI),
        LambdaStarConvention::ModeMatched => {
            lambda0 * l2 * l2 / (4.0 * std::f64::consts::PI.powi(2))
        }
    }
}

/// Resonance classification of one ε: whether both gap conditions hold, the
/// worst margin encountered, and the offending indices on failure.
#[derive(Debug, Clone)]
pub struct ResonanceReport {
    pub eps: f64,
    pub pass: bool,
    pub worst_margin: f64,
    /// Failing (i, j) of the position condition, 1-based.
    pub position_offender: Option<(usize, usize)>,
    /// Failing Fourier index k of the amplitude condition.
    pub amplitude_offender: Option<usize>,
}

/// Checks, for each ε, the position-resonance condition
/// |(2/√p)Λ_i|log ε| − 4π²j²/l₁²| > c₁(2/(√p|log ε|))^{1/2} and the
/// amplitude-resonance condition |ε²k² − λ*| > c₂ε. Setting c₁ or c₂ to
/// zero disables the corresponding family (its margins stay positive).
pub fn resonance_gaps(
    eps_list: &[f64],
    tm: &TodaMatrices,
    l1: f64,
    lambda0: f64,
    upsilon2: &[f64],
    conv: LambdaStarConvention,
    c1: f64,
    c2: f64,
) -> Vec<ResonanceReport> {
    let sp = tm.p.sqrt();
    let inv_sqrt: Vec<f64> = upsilon2.iter().map(|&u| 1.0 / u.sqrt()).collect();
    let l2 = trapezoid_periodic(1.0, &inv_sqrt);
    let lstar = lambda_star(lambda0, l2, conv);
    let tau2 = 4.0 * std::f64::consts::PI.powi(2);
    eps_list
        .iter()
        .map(|&eps| {
            let el = eps.ln().abs();
            let threshold1 = c1 * (2.0 / (sp * el)).sqrt();
            let mut worst = f64::INFINITY;
            let mut pos_off = None;
            for (i, &lam) in tm.lambdas.iter().enumerate() {
                let target = 2.0 / sp * lam * el;
                let jmax = (l1 / tau2.sqrt() * (target + threshold1 + 1.0).sqrt()).ceil() as usize + 1;
                for j in 1..=jmax {
                    let lattice = tau2 * (j * j) as f64 / (l1 * l1);
                    let margin = (target - lattice).abs() - threshold1;
                    if margin < worst {
                        worst = margin;
                        if margin <= 0.0 && pos_off.is_none() {
                            pos_off = Some((i + 1, j));
                        }
                    }
                }
            }
            let mut amp_off = None;
            let kmax = (((lstar + 1.0).sqrt() / eps).ceil() as usize).max(1);
            for kk in 1..=kmax {
                let margin = (eps * eps * (kk * kk) as f64 - lstar).abs() - c2 * eps;
                if margin < worst {
                    worst = margin;
                }
                if margin <= 0.0 && amp_off.is_none() {
                    amp_off = Some(kk);
                }
            }
            ResonanceReport {
                eps,
                pass: pos_off.is_none() && amp_off.is_none(),
                worst_margin: worst,
                position_offender: pos_off,
                amplitude_offender: amp_off,
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Amplitude equation
// ---------------------------------------------------------------------------

/// Solution record of the periodic amplitude equation
/// ε²·c(θ)·e″ + λ₀e = h.
#[derive(Debug, Clone)]
pub struct AmplitudeSolution {
    pub e: Vec<f64>,
    /// ‖e‖_∞ + ε‖e′‖₂ + ε²‖e″‖₂.
    pub norm_star: f64,
    /// ‖operator·e − h‖₂ / ‖h‖₂.
    pub residual: f64,
}

/// Solves the amplitude equation by Fourier collocation after certifying
/// the gap |ε²k² − λ*| > c₂ε over the relevant Fourier indices.
pub fn amplitude_solve(
    eps: f64,
    coeff: &[f64],
    lambda0: f64,
    lstar: f64,
    c2: f64,
    h: &[f64],
) -> Result<AmplitudeSolution> {
    let m = coeff.len();
    if m % 2 != 0 || h.len() != m {
        return Err(Error::Validation("amplitude solver needs matching even-length arrays".into()));
    }
    let kmax = (((lstar + 1.0).sqrt() / eps).ceil() as usize).max(1);
    for kk in 1..=kmax {
        let gap = (eps * eps * (kk * kk) as f64 - lstar).abs();
        if gap <= c2 * eps {
            return Err(Error::Resonance(format!(
                "amplitude gap |ε²k² − λ*| = {gap:.3e} at k = {kk} is below c₂ε = {:.3e}",
                c2 * eps
            )));
        }
    }
    let der = Derivatives::new(m);
    let mut op = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            op[(i, j)] = eps * eps * coeff[i] * der.d2[(i, j)];
        }
        op[(i, i)] += lambda0;
    }
    let rhs = nalgebra::DVector::from_column_slice(h);
    let e_v = op
        .clone()
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("amplitude collocation matrix is singular".into()))?;
    let e: Vec<f64> = e_v.iter().cloned().collect();
    let back = &op * &e_v;
    let res: Vec<f64> = (0..m).map(|i| back[i] - h[i]).collect();
    let hn = l2_norm(h).max(1e-300);
    let de = der.first(&e);
    let dde = der.second(&e);
    let sup = e.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let norm_star = sup + eps * l2_norm(&de) + eps * eps * l2_norm(&dde);
    Ok(AmplitudeSolution { e, norm_star, residual: l2_norm(&res) / hn })
}

// ---------------------------------------------------------------------------
// Position/difference residual maps
// ---------------------------------------------------------------------------

/// The position-variable residual map: per layer j,
/// σ[−Υ₂d_j″ + Υ₁d_j′ − Υ₀f̆_j] + [exp(−√p(d_j−d_{j−1})) − exp(−√p(d_{j+1}−d_j))]
/// with empty neighbors dropping their exponential.
pub fn position_residual_map(
    tm: &TodaMatrices,
    u2: &[f64],
    u1: &[f64],
    u0: &[f64],
    sigma: f64,
    d: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let n = d.len();
    let m = u0.len();
    let sp = tm.p.sqrt();
    let rho = 1.0 / sigma;
    let der = Derivatives::new(m);
    let mut out = vec![vec![0.0; m]; n];
    for j in 0..n {
        let d1 = der.first(&d[j]);
        let d2 = der.second(&d[j]);
        for t in 0..m {
            let fb = (j as f64 + 1.0 - (n as f64 + 1.0) / 2.0) * rho + d[j][t];
            let lower = if j > 0 { (-sp * (d[j][t] - d[j - 1][t])).exp() } else { 0.0 };
            let upper = if j + 1 < n { (-sp * (d[j + 1][t] - d[j][t])).exp() } else { 0.0 };
            out[j][t] =
                sigma * (-u2[t] * d2[t] + u1[t] * d1[t] - u0[t] * fb) + lower - upper;
        }
    }
    out
}

/// The difference-variable residual map: components j = 1..N−1 carry
/// σ[−Υ₂v_j″ + Υ₁v_j′ − Υ₀(ρ + v_j)] plus the discrete second difference of
/// the interaction exponentials; the last component is the pure linear
/// operator on the sum variable v_N.
pub fn difference_residual_map(
    tm: &TodaMatrices,
    u2: &[f64],
    u1: &[f64],
    u0: &[f64],
    sigma: f64,
    v: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let n = v.len();
    let m = u0.len();
    let sp = tm.p.sqrt();
    let rho = 1.0 / sigma;
    let der = Derivatives::new(m);
    let mut out = vec![vec![0.0; m]; n];
    for j in 0..n - 1 {
        let d1 = der.first(&v[j]);
        let d2 = der.second(&v[j]);
        for t in 0..m {
            let mid = 2.0 * (-sp * v[j][t]).exp();
            let left = if j > 0 { (-sp * v[j - 1][t]).exp() } else { 0.0 };
            let right = if j + 2 < n { (-sp * v[j + 1][t]).exp() } else { 0.0 };
            out[j][t] = sigma * (-u2[t] * d2[t] + u1[t] * d1[t] - u0[t] * (rho + v[j][t]))
                + mid
                - left
                - right;
        }
    }
    let d1 = der.first(&v[n - 1]);
    let d2 = der.second(&v[n - 1]);
    for t in 0..m {
        out[n - 1][t] = sigma * (-u2[t] * d2[t] + u1[t] * d1[t] - u0[t] * v[n - 1][t]);
    }
    out
}

// ---------------------------------------------------------------------------
// Coupled system residual on a curve
// ---------------------------------------------------------------------------

/// L² residual norms of the coupled position/amplitude system, one entry per
/// layer.
#[derive(Debug, Clone)]
pub struct SystemResiduals {
    pub position: Vec<f64>,
    pub amplitude: Vec<f64>,
}

/// Evaluates the full left sides of the coupled system on the curve's
/// θ-grid: the position equation
/// ε²[−Υ₂f̆_j″ + Υ₁ⱼ(e)f̆_j′ − Υ₀ⱼ(e)f̆_j] + pα_pC₀[E_j^- − E_j^+]
/// (an exact rewriting of the α,β-weighted form through f̆ = βf) and the
/// amplitude equation ε(ε²a₁₁α^{1−p}e_j″ + λ₀e_j) + pα_pC₁[E_j^- + E_j^+],
/// where E_j^± are the neighbor interaction exponentials with the
/// conventions f̆₀ = −∞ and f̆_{N+1} = +∞.
pub fn jacobi_toda_residual(
    state: &LayerState,
    curve: &CurveGeometry,
    profile: &ProfileSet,
) -> Result<SystemResiduals> {
    let m = curve.m;
    if state.f_breve.iter().any(|f| f.len() != m) {
        return Err(Error::Validation(
            "layer state must live on the curve's θ-grid".into(),
        ));
    }
    if (state.p - curve.p).abs() > 1e-12 || (state.p - profile.p).abs() > 1e-12 {
        return Err(Error::Validation("exponent mismatch between state, curve and profile".into()));
    }
    let p = state.p;
    let sp = p.sqrt();
    let eps = state.eps;
    let n = state.n_layers;
    let jc = jacobi_coefficients(curve);
    let dbeta = curve.ds(&curve.beta);
    let zbar = profile.coupling_zw;
    let mut position = Vec::with_capacity(n);
    let mut amplitude = Vec::with_capacity(n);
    for j in 0..n {
        let fb = &state.f_breve[j];
        let dfb = curve.ds(fb);
        let ddfb = curve.ds(&dfb);
        let ej = &state.e[j];
        let dej = curve.ds(ej);
        let ddej = curve.ds(&dej);
        let mut pos = vec![0.0; m];
        let mut amp = vec![0.0; m];
        for t in 0..m {
            let alf = curve.alpha[t].powf(1.0 - p);
            let lower = if j > 0 {
                (-sp * (fb[t] - state.f_breve[j - 1][t])).exp()
            } else {
                0.0
            };
            let upper = if j + 1 < n {
                (-sp * (state.f_breve[j + 1][t] - fb[t])).exp()
            } else {
                0.0
            };
            let u1j = jc.upsilon1[t] - 2.0 * eps * alf * curve.a11[t] * dej[t] * zbar;
            let u0j = jc.upsilon0[t]
                - 2.0
                    * eps
                    * alf
                    * (curve.a11[t] * dbeta[t] / curve.beta[t] + curve.a22[t])
                    * dej[t]
                    * zbar;
            pos[t] = eps * eps * (-jc.upsilon2[t] * ddfb[t] + u1j * dfb[t] - u0j * fb[t])
                + p * profile.alpha_p * profile.c0 * (lower - upper);
            amp[t] = eps * (eps * eps * curve.a11[t] * alf * ddej[t] + profile.lambda0 * ej[t])
                + p * profile.alpha_p * profile.c1 * (lower + upper);
        }
        let pos_sq: Vec<f64> = pos.iter().map(|v| v * v).collect();
        let amp_sq: Vec<f64> = amp.iter().map(|v| v * v).collect();
        position.push(curve.integral_ds(&pos_sq).sqrt());
        amplitude.push(curve.integral_ds(&amp_sq).sqrt());
    }
    Ok(SystemResiduals { position, amplitude })
}

// ---------------------------------------------------------------------------
// CSV emitters
// ---------------------------------------------------------------------------

/// Writes rows `epsilon,rho,asymptotic_gap`.
pub fn export_rho_table(
    out: &mut dyn std::io::Write,
    eps: &[f64],
    rows: &[InteractionDistance],
) -> Result<()> {
    writeln!(out, "epsilon,rho,asymptotic_gap")?;
    for (e, r) in eps.iter().zip(rows) {
        writeln!(out, "{e},{},{}", r.rho, r.asymptotic_gap)?;
    }
    Ok(())
}

/// Writes rows `sigma,defect` for a fixed refinement order.
pub fn export_defect_table(
    out: &mut dyn std::io::Write,
    sigmas: &[f64],
    defects: &[f64],
) -> Result<()> {
    writeln!(out, "sigma,defect")?;
    for (s, d) in sigmas.iter().zip(defects) {
        writeln!(out, "{s},{d}")?;
    }
    Ok(())
}

/// Writes rows `epsilon,pass,worst_margin,offender`.
pub fn export_resonance_table(
    out: &mut dyn std::io::Write,
    reports: &[ResonanceReport],
) -> Result<()> {
    writeln!(out, "epsilon,pass,worst_margin,offender")?;
    for r in reports {
        let off = match (r.position_offender, r.amplitude_offender) {
            (Some((i, j)), _) => format!("position i={i} j={j}"),
            (None, Some(k)) => format!("amplitude k={k}"),
            (None, None) => String::new(),
        };
        writeln!(out, "{},{},{},{}", r.eps, r.pass, r.worst_margin, off)?;
    }
    Ok(())
}
