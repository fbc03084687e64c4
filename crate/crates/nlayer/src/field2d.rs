//! Discretization of −Div(A∇·) on a masked uniform 2D grid, the first
//! Dirichlet eigenpair (λ₁, Ψ), and the negative background branch ū_ε with
//! its ε²-expansion diagnostic.
//!
//! The operator is assembled from the discrete energy
//! ½∫A∇u·∇u: diffusion terms from face-centered coefficients, cross terms
//! from corner-centered coefficients with averaged gradients. The resulting
//! matrix is symmetric by construction and reduces to the 5-point Laplacian
//! for A = I.

use std::io::Write as _;

use crate::geometry::MatrixField;
use crate::linalg::pcg;
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// DomainGrid
// ---------------------------------------------------------------------------

/// Uniform grid over a bounding box with an inside mask describing Ω.
/// Nodes outside the mask carry homogeneous Dirichlet values.
pub struct DomainGrid {
    pub x0: f64,
    pub y0: f64,
    pub h2: f64,
    pub nx: usize,
    pub ny: usize,
    pub inside: Vec<bool>,
    /// Interior index per node, or usize::MAX for exterior nodes.
    pub index: Vec<usize>,
    /// Node (flattened i + nx·j) per interior index.
    pub nodes: Vec<usize>,
}

impl DomainGrid {
    /// Build the grid from an indicator of Ω over the box [x0,x1]×[y0,y1].
    pub fn from_indicator(
        bbox: [f64; 4],
        h2: f64,
        indicator: impl Fn(f64, f64) -> bool,
    ) -> Result<Self> {
        let [x0, x1, y0, y1] = bbox;
        if !(h2 > 0.0) || x1 <= x0 || y1 <= y0 {
            return Err(Error::Validation(format!(
                "invalid grid description: box [{x0},{x1}]×[{y0},{y1}], spacing {h2}"
            )));
        }
        let nx = ((x1 - x0) / h2).round() as usize + 1;
        let ny = ((y1 - y0) / h2).round() as usize + 1;
        let mut inside = vec![false; nx * ny];
        for j in 0..ny {
            for i in 0..nx {
                let x = x0 + i as f64 * h2;
                let y = y0 + j as f64 * h2;
                // Keep the outermost ring exterior so every interior node has
                // all four neighbors represented.
                if i > 0 && i + 1 < nx && j > 0 && j + 1 < ny && indicator(x, y) {
                    inside[i + nx * j] = true;
                }
            }
        }
        let mut index = vec![usize::MAX; nx * ny];
        let mut nodes = Vec::new();
        for (k, &ins) in inside.iter().enumerate() {
            if ins {
                index[k] = nodes.len();
                nodes.push(k);
            }
        }
        if nodes.is_empty() {
            return Err(Error::Validation("domain mask has no interior nodes".into()));
        }
        let grid = DomainGrid { x0, y0, h2, nx, ny, inside, index, nodes };
        grid.check_connected()?;
        Ok(grid)
    }

    fn check_connected(&self) -> Result<()> {
        let n = self.nodes.len();
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut count = 1usize;
        while let Some(k) = stack.pop() {
            let node = self.nodes[k];
            let (i, j) = (node % self.nx, node / self.nx);
            for (di, dj) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
                let ii = i as i64 + di;
                let jj = j as i64 + dj;
                if ii < 0 || jj < 0 || ii >= self.nx as i64 || jj >= self.ny as i64 {
                    continue;
                }
                let idx = self.index[ii as usize + self.nx * jj as usize];
                if idx != usize::MAX && !seen[idx] {
                    seen[idx] = true;
                    count += 1;
                    stack.push(idx);
                }
            }
        }
        if count != n {
            return Err(Error::Validation(format!(
                "interior is disconnected: {count} of {n} nodes reachable"
            )));
        }
        Ok(())
    }

    pub fn n_interior(&self) -> usize {
        self.nodes.len()
    }

    pub fn xy_of(&self, interior: usize) -> (f64, f64) {
        let node = self.nodes[interior];
        let (i, j) = (node % self.nx, node / self.nx);
        (self.x0 + i as f64 * self.h2, self.y0 + j as f64 * self.h2)
    }

    /// Grid-steps distance to the exterior (a discrete boundary distance),
    /// per interior node, via breadth-first sweep.
    pub fn boundary_steps(&self) -> Vec<usize> {
        let n = self.nodes.len();
        let mut dist = vec![usize::MAX; n];
        let mut queue = std::collections::VecDeque::new();
        for (k, &node) in self.nodes.iter().enumerate() {
            let (i, j) = (node % self.nx, node / self.nx);
            let mut edge = false;
            for (di, dj) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
                let ii = (i as i64 + di) as usize;
                let jj = (j as i64 + dj) as usize;
                if self.index[ii + self.nx * jj] == usize::MAX {
                    edge = true;
                }
            }
            if edge {
                dist[k] = 1;
                queue.push_back(k);
            }
        }
        while let Some(k) = queue.pop_front() {
            let node = self.nodes[k];
            let (i, j) = (node % self.nx, node / self.nx);
            for (di, dj) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
                let ii = (i as i64 + di) as usize;
                let jj = (j as i64 + dj) as usize;
                let idx = self.index[ii + self.nx * jj];
                if idx != usize::MAX && dist[idx] > dist[k] + 1 {
                    dist[idx] = dist[k] + 1;
                    queue.push_back(idx);
                }
            }
        }
        dist
    }

    /// Euclidean distance from each interior node to the nearest exterior
    /// node (a sharp discrete boundary distance; the step count above is an
    /// L1-style bound that over-counts along diagonals).
    pub fn boundary_distance(&self) -> Vec<f64> {
        let mut ring = Vec::new();
        for j in 0..self.ny {
            for i in 0..self.nx {
                if self.inside[i + self.nx * j] {
                    continue;
                }
                let mut touches = false;
                for (di, dj) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
                    let ii = i as i64 + di;
                    let jj = j as i64 + dj;
                    if ii >= 0
                        && jj >= 0
                        && ii < self.nx as i64
                        && jj < self.ny as i64
                        && self.inside[ii as usize + self.nx * jj as usize]
                    {
                        touches = true;
                    }
                }
                if touches {
                    ring.push((
                        self.x0 + i as f64 * self.h2,
                        self.y0 + j as f64 * self.h2,
                    ));
                }
            }
        }
        (0..self.nodes.len())
            .map(|k| {
                let (x, y) = self.xy_of(k);
                ring.iter()
                    .map(|&(bx, by)| ((x - bx).powi(2) + (y - by).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    /// Extent of the interior point cloud (max of width and height).
    pub fn diameter(&self) -> f64 {
        let mut xmin = f64::INFINITY;
        let mut xmax = f64::NEG_INFINITY;
        let mut ymin = f64::INFINITY;
        let mut ymax = f64::NEG_INFINITY;
        for k in 0..self.nodes.len() {
            let (x, y) = self.xy_of(k);
            xmin = xmin.min(x);
            xmax = xmax.max(x);
            ymin = ymin.min(y);
            ymax = ymax.max(y);
        }
        (xmax - xmin).max(ymax - ymin)
    }
}

// ---------------------------------------------------------------------------
// Discrete operator
// ---------------------------------------------------------------------------

/// Sparse symmetric discretization of −Div(A∇·) with Dirichlet masking.
pub struct DiscreteOperator {
    pub n: usize,
    rows: Vec<Vec<(u32, f64)>>,
    diag: Vec<f64>,
}

impl DiscreteOperator {
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (r, row) in self.rows.iter().enumerate() {
            let mut acc = 0.0;
            for &(c, v) in row {
                acc += v * x[c as usize];
            }
            out[r] = acc;
        }
    }

    pub fn apply_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        self.apply(x, &mut out);
        out
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    /// Sparse entries (column, value) of one row.
    pub fn row_entries(&self, r: usize) -> &[(u32, f64)] {
        &self.rows[r]
    }

    pub fn entry(&self, r: usize, c: usize) -> f64 {
        self.rows[r]
            .iter()
            .find(|&&(cc, _)| cc as usize == c)
            .map_or(0.0, |&(_, v)| v)
    }

    /// Largest absolute asymmetry relative to the largest entry.
    pub fn symmetry_defect(&self) -> f64 {
        let mut max_entry = 0.0f64;
        let mut max_gap = 0.0f64;
        for (r, row) in self.rows.iter().enumerate() {
            for &(c, v) in row {
                max_entry = max_entry.max(v.abs());
                max_gap = max_gap.max((v - self.entry(c as usize, r)).abs());
            }
        }
        max_gap / max_entry.max(1e-300)
    }
}

/// Assemble the symmetric discretization of −Div(A∇·) on the masked grid.
pub fn discretize_operator(grid: &DomainGrid, field: &MatrixField) -> Result<DiscreteOperator> {
    let n = grid.n_interior();
    let h = grid.h2;
    let inv_h2 = 1.0 / (h * h);
    let mut rows: Vec<Vec<(u32, f64)>> = vec![Vec::with_capacity(9); n];
    let add = |rows: &mut Vec<Vec<(u32, f64)>>, a: usize, b: usize, v: f64| {
        if a == usize::MAX || b == usize::MAX || v == 0.0 {
            return;
        }
        let row = &mut rows[a];
        if let Some(slot) = row.iter_mut().find(|(c, _)| *c as usize == b) {
            slot.1 += v;
        } else {
            row.push((b as u32, v));
        }
    };
    let check_pd = |a: nalgebra::Matrix2<f64>, x: f64, y: f64| -> Result<()> {
        let tr = a[(0, 0)] + a[(1, 1)];
        let det = a.determinant();
        if tr <= 0.0 || det <= 0.0 {
            return Err(Error::Ellipticity(format!(
                "coefficient matrix not positive definite near ({x}, {y})"
            )));
        }
        Ok(())
    };

    // Diffusion terms through face-centered coefficients.
    for j in 0..grid.ny {
        for i in 0..grid.nx {
            let a_idx = grid.index[i + grid.nx * j];
            // x-face to the right neighbor.
            if i + 1 < grid.nx {
                let b_idx = grid.index[i + 1 + grid.nx * j];
                if a_idx != usize::MAX || b_idx != usize::MAX {
                    let x = grid.x0 + (i as f64 + 0.5) * h;
                    let y = grid.y0 + j as f64 * h;
                    let a = field.at(x, y);
                    check_pd(a, x, y)?;
                    let c = a[(0, 0)] * inv_h2;
                    add(&mut rows, a_idx, a_idx, c);
                    add(&mut rows, b_idx, b_idx, c);
                    add(&mut rows, a_idx, b_idx, -c);
                    add(&mut rows, b_idx, a_idx, -c);
                }
            }
            // y-face to the upper neighbor.
            if j + 1 < grid.ny {
                let b_idx = grid.index[i + grid.nx * (j + 1)];
                if a_idx != usize::MAX || b_idx != usize::MAX {
                    let x = grid.x0 + i as f64 * h;
                    let y = grid.y0 + (j as f64 + 0.5) * h;
                    let a = field.at(x, y);
                    check_pd(a, x, y)?;
                    let c = a[(1, 1)] * inv_h2;
                    add(&mut rows, a_idx, a_idx, c);
                    add(&mut rows, b_idx, b_idx, c);
                    add(&mut rows, a_idx, b_idx, -c);
                    add(&mut rows, b_idx, a_idx, -c);
                }
            }
        }
    }

    // Cross terms through corner-centered coefficients with averaged
    // one-sided gradients; contributes A₁₂(g_x g_yᵀ + g_y g_xᵀ).
    for j in 0..grid.ny - 1 {
        for i in 0..grid.nx - 1 {
            let ids = [
                grid.index[i + grid.nx * j],
                grid.index[i + 1 + grid.nx * j],
                grid.index[i + grid.nx * (j + 1)],
                grid.index[i + 1 + grid.nx * (j + 1)],
            ];
            if ids.iter().all(|&v| v == usize::MAX) {
                continue;
            }
            let x = grid.x0 + (i as f64 + 0.5) * h;
            let y = grid.y0 + (j as f64 + 0.5) * h;
            let a12 = field.at(x, y)[(0, 1)];
            if a12 == 0.0 {
                continue;
            }
            let gx = [-1.0, 1.0, -1.0, 1.0];
            let gy = [-1.0, -1.0, 1.0, 1.0];
            for r in 0..4 {
                for c in 0..4 {
                    let v = a12 * (gx[r] * gy[c] + gy[r] * gx[c]) / (4.0 * h * h);
                    add(&mut rows, ids[r], ids[c], v);
                }
            }
        }
    }

    let mut diag = vec![0.0; n];
    for (r, row) in rows.iter().enumerate() {
        for &(c, v) in row {
            if c as usize == r {
                diag[r] = v;
            }
        }
    }
    Ok(DiscreteOperator { n, rows, diag })
}

// ---------------------------------------------------------------------------
// First eigenpair
// ---------------------------------------------------------------------------

/// Grid, operator and first Dirichlet eigenpair bundle.
pub struct EigenField {
    pub grid: DomainGrid,
    pub op: DiscreteOperator,
    /// First eigenfunction on interior nodes, positive, max-normalized.
    pub psi: Vec<f64>,
    pub lambda1: f64,
    /// Final relative eigen-residual ‖LΨ − λΨ‖₂/‖Ψ‖₂.
    pub residual: f64,
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Smallest eigenvalue and positive max-normalized eigenvector of the
/// discrete operator by inverse power iteration with conjugate-gradient
/// inner solves.
pub fn first_eigenpair(grid: DomainGrid, op: DiscreteOperator) -> Result<EigenField> {
    let n = op.n;
    let mut x = vec![1.0; n];
    let nx = norm2(&x);
    for v in x.iter_mut() {
        *v /= nx;
    }
    let mut lambda = 0.0;
    let mut residual = f64::INFINITY;
    let apply = |v: &[f64], out: &mut [f64]| op.apply(v, out);
    for _iter in 0..200 {
        let mut y = x.clone();
        pcg(apply, op.diag(), &x, &mut y, 1e-12, 20 * n).map_err(|e| {
            Error::Spectral(format!("inner conjugate-gradient solve failed: {e}"))
        })?;
        let ny = norm2(&y);
        if !ny.is_finite() || ny == 0.0 {
            return Err(Error::Spectral("inverse iteration produced a null vector".into()));
        }
        for v in y.iter_mut() {
            *v /= ny;
        }
        let ly = op.apply_vec(&y);
        lambda = y.iter().zip(&ly).map(|(a, b)| a * b).sum::<f64>();
        let res: f64 = ly
            .iter()
            .zip(&y)
            .map(|(l, v)| (l - lambda * v) * (l - lambda * v))
            .sum::<f64>()
            .sqrt();
        x = y;
        residual = res / lambda.abs().max(1e-300);
        if residual < 1e-9 {
            break;
        }
    }
    if !(residual < 1e-7) {
        return Err(Error::Spectral(format!(
            "inverse power iteration did not converge: relative residual {residual:e}"
        )));
    }
    // Sign-fix positive, then max-normalize.
    let total: f64 = x.iter().sum();
    if total < 0.0 {
        for v in x.iter_mut() {
            *v = -*v;
        }
    }
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max <= 0.0 || x.iter().any(|&v| v <= 0.0) {
        return Err(Error::Spectral(
            "first eigenvector is not strictly positive on the interior".into(),
        ));
    }
    let psi: Vec<f64> = x.iter().map(|v| v / max).collect();
    Ok(EigenField { grid, op, psi, lambda1: lambda, residual })
}

// ---------------------------------------------------------------------------
// Negative branch
// ---------------------------------------------------------------------------

/// The negative background solution ū_ε on the interior nodes.
pub struct NegativeBranch {
    pub epsilon: f64,
    /// ū_ε values (all in [−Ψ^{1/p}, 0)).
    pub u_bar: Vec<f64>,
    pub newton_iterations: usize,
    pub residual_norm: f64,
    pub residual_history: Vec<f64>,
    pub used_fallback: bool,
}

/// Solve ε²Lw = Ψ − w^p for w = −ū_ε inside the invariant box
/// 0 ≤ w ≤ Ψ^{1/p}, by damped Newton from the supersolution w = Ψ^{1/p};
/// falls back to a monotone fixed-point sweep if Newton stalls.
pub fn solve_negative_branch(ef: &EigenField, epsilon: f64, p: f64) -> Result<NegativeBranch> {
    if !(epsilon > 0.0) || !(p > 1.0) {
        return Err(Error::Validation(format!(
            "negative branch needs epsilon > 0 and p > 1; got {epsilon}, {p}"
        )));
    }
    let n = ef.op.n;
    let cap: Vec<f64> = ef.psi.iter().map(|&v| v.powf(1.0 / p)).collect();
    let psi_norm = norm2(&ef.psi);
    let tol = 1e-10 * psi_norm;
    let e2 = epsilon * epsilon;
    let residual = |w: &[f64]| -> Vec<f64> {
        let lw = ef.op.apply_vec(w);
        (0..n).map(|i| e2 * lw[i] + w[i].powf(p) - ef.psi[i]).collect()
    };
    let clip = |w: &mut [f64]| {
        for i in 0..n {
            w[i] = w[i].clamp(0.0, cap[i]);
        }
    };

    let mut history = Vec::new();
    let mut w = cap.clone();
    let mut fvec = residual(&w);
    let mut fnorm = norm2(&fvec);
    history.push(fnorm);
    let mut newton_ok = false;
    let mut iterations = 0usize;
    for _ in 0..60 {
        if fnorm < tol {
            newton_ok = true;
            break;
        }
        iterations += 1;
        // Jacobian ε²L + diag(p w^{p-1}) is symmetric positive definite.
        let jd: Vec<f64> = (0..n).map(|i| p * w[i].max(0.0).powf(p - 1.0)).collect();
        let apply = |v: &[f64], out: &mut [f64]| {
            ef.op.apply(v, out);
            for i in 0..n {
                out[i] = e2 * out[i] + jd[i] * v[i];
            }
        };
        let diag: Vec<f64> = (0..n).map(|i| e2 * ef.op.diag()[i] + jd[i]).collect();
        let rhs: Vec<f64> = fvec.iter().map(|v| -v).collect();
        let mut delta = vec![0.0; n];
        if pcg(apply, &diag, &rhs, &mut delta, 1e-12, 20 * n).is_err() {
            break;
        }
        let mut accepted = false;
        let mut step = 1.0;
        for _ in 0..30 {
            let mut trial: Vec<f64> = (0..n).map(|i| w[i] + step * delta[i]).collect();
            clip(&mut trial);
            let ftrial = residual(&trial);
            let fnorm_trial = norm2(&ftrial);
            if fnorm_trial < fnorm {
                w = trial;
                fvec = ftrial;
                fnorm = fnorm_trial;
                history.push(fnorm);
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }

    let mut used_fallback = false;
    if !newton_ok && fnorm >= tol {
        // Monotone fixed-point sweep from the supersolution.
        used_fallback = true;
        w = cap.clone();
        let wmax = cap.iter().cloned().fold(0.0f64, f64::max);
        let c = p * wmax.powf(p - 1.0);
        for _ in 0..2000 {
            fvec = residual(&w);
            fnorm = norm2(&fvec);
            history.push(fnorm);
            if fnorm < tol {
                break;
            }
            let apply = |v: &[f64], out: &mut [f64]| {
                ef.op.apply(v, out);
                for i in 0..n {
                    out[i] = e2 * out[i] + c * v[i];
                }
            };
            let diag: Vec<f64> = (0..n).map(|i| e2 * ef.op.diag()[i] + c).collect();
            let rhs: Vec<f64> = (0..n).map(|i| ef.psi[i] - w[i].powf(p) + c * w[i]).collect();
            let mut wnew = w.clone();
            pcg(apply, &diag, &rhs, &mut wnew, 1e-13, 20 * n).map_err(|e| {
                Error::NonConvergence {
                    detail: format!("fixed-point sweep solve failed: {e}; history {history:?}"),
                    residual: fnorm,
                }
            })?;
            clip(&mut wnew);
            w = wnew;
        }
        if fnorm >= tol {
            return Err(Error::NonConvergence {
                detail: format!(
                    "negative branch: Newton and fixed-point both stalled; residual history {history:?}"
                ),
                residual: fnorm,
            });
        }
    }

    let u_bar: Vec<f64> = w.iter().map(|&v| -v).collect();
    Ok(NegativeBranch {
        epsilon,
        u_bar,
        newton_iterations: iterations,
        residual_norm: fnorm,
        residual_history: history,
        used_fallback,
    })
}

// ---------------------------------------------------------------------------
// Expansion diagnostic
// ---------------------------------------------------------------------------

/// Report of the small-ε expansion check ū_ε = −Ψ^{1/p} − ε²f + o(ε²) on an
/// interior compact set.
pub struct ExpansionReport {
    pub epsilons: Vec<f64>,
    pub sup_errors: Vec<f64>,
    /// Indices of the compact-set nodes used for the sup norm.
    pub compact_nodes: Vec<usize>,
    pub f_negative_on_compact: bool,
    pub monotone_decreasing: bool,
}

/// Mask of interior nodes at boundary distance ≥ 0.15·diam(Ω).
pub fn compact_interior(ef: &EigenField) -> Vec<usize> {
    let dist = ef.grid.boundary_distance();
    let margin = 0.15 * ef.grid.diameter();
    dist.iter()
        .enumerate()
        .filter(|&(_, &d)| d >= margin)
        .map(|(k, _)| k)
        .collect()
}

/// First-order profile f = −L(Ψ^{1/p})/(pΨ^{(p−1)/p}) computed with the
/// discrete operator (so that the expansion check is free of independent
/// discretization bias).
pub fn expansion_profile(ef: &EigenField, p: f64) -> Vec<f64> {
    let qroot: Vec<f64> = ef.psi.iter().map(|&v| v.powf(1.0 / p)).collect();
    let lq = ef.op.apply_vec(&qroot);
    (0..ef.op.n)
        .map(|i| -lq[i] / (p * ef.psi[i].powf((p - 1.0) / p)))
        .collect()
}

/// Solve the negative branch for each ε in the list and measure
/// sup over the compact set of |(ū_ε + Ψ^{1/p})/ε² + f|, which tends to zero
/// as ε → 0 because ū_ε = −Ψ^{1/p} − ε²f + o(ε²) there.
pub fn verify_negative_expansion(
    ef: &EigenField,
    p: f64,
    epsilons: &[f64],
) -> Result<ExpansionReport> {
    if epsilons.len() < 3 {
        return Err(Error::Validation(
            "expansion check needs at least 3 decreasing epsilon values".into(),
        ));
    }
    let compact = compact_interior(ef);
    if compact.is_empty() {
        return Err(Error::Validation("interior compact set is empty".into()));
    }
    let f = expansion_profile(ef, p);
    let qroot: Vec<f64> = ef.psi.iter().map(|&v| v.powf(1.0 / p)).collect();
    let mut sups = Vec::new();
    for &eps in epsilons {
        let branch = solve_negative_branch(ef, eps, p)?;
        let mut sup = 0.0f64;
        for &k in &compact {
            let gap = (branch.u_bar[k] + qroot[k]) / (eps * eps) + f[k];
            sup = sup.max(gap.abs());
        }
        sups.push(sup);
    }
    let monotone = epsilons
        .windows(2)
        .zip(sups.windows(2))
        .all(|(e, s)| e[0] > e[1] && s[1] < s[0]);
    let f_negative = compact.iter().all(|&k| f[k] < 0.0);
    Ok(ExpansionReport {
        epsilons: epsilons.to_vec(),
        sup_errors: sups,
        compact_nodes: compact,
        f_negative_on_compact: f_negative,
        monotone_decreasing: monotone,
    })
}

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

/// Write the grid fields as CSV rows `x,y,psi,u_bar` (u_bar blank when no
/// branch is supplied).
pub fn export_csv(
    ef: &EigenField,
    branch: Option<&NegativeBranch>,
    path: &std::path::Path,
) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "x,y,psi,u_bar")?;
    for k in 0..ef.op.n {
        let (x, y) = ef.grid.xy_of(k);
        match branch {
            Some(b) => writeln!(out, "{x},{y},{},{}", ef.psi[k], b.u_bar[k])?,
            None => writeln!(out, "{x},{y},{},", ef.psi[k])?,
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
