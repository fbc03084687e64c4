//! Command implementations: build the computation chain demanded by the
//! requested artifact, write CSV/JSON products plus a run manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use nlayer::assembler::{
    bilinear, build_ansatz, fermi_chart, pde_residual, residual_sweep, theorem_scaling_defect,
    AnsatzConfig, SweepConfig,
};
use nlayer::field2d::{
    discretize_operator, first_eigenpair, solve_negative_branch, DomainGrid, EigenField,
};
use nlayer::geometry::{
    build_curve, circle_samples, criticality_residual, find_critical_curve, functional_k,
    jacobi_coefficients, CriticalSearchOptions, CurveGeometry, CurveOptions, Mat2, MatrixField,
    ScalarField,
};
use nlayer::profile1d::{verify_profile_identities, ProfileSet};
use nlayer::toda::{
    layer_state, positions_from_differences, refine_layer_profile, resonance_gaps, solve_rho,
    toda_matrices, LambdaStarConvention,
};
use nlayer::{Error, Result};

use crate::config::ExperimentConfig;

// ---------------------------------------------------------------------------
// Output directory management
// ---------------------------------------------------------------------------

/// Tracks files written during a command so that a failure leaves no partial
/// artifacts, and rejects directories already holding a run with a different
/// configuration.
pub struct OutDir {
    dir: PathBuf,
    hash: String,
    written: Vec<PathBuf>,
}

impl OutDir {
    pub fn open(dir: &Path, hash: &str) -> Result<OutDir> {
        std::fs::create_dir_all(dir)?;
        let manifest = dir.join("run_manifest.json");
        if manifest.exists() {
            let text = std::fs::read_to_string(&manifest)?;
            let prev: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| Error::Validation(format!("corrupt run manifest: {e}")))?;
            if let Some(old) = prev.get("config_hash").and_then(|v| v.as_str()) {
                if old != hash {
                    return Err(Error::Validation(format!(
                        "output directory {} holds artifacts of a different configuration \
                         (hash {old} vs {hash}); refusing to mix",
                        dir.display()
                    )));
                }
            }
        }
        Ok(OutDir { dir: dir.to_path_buf(), hash: hash.to_string(), written: Vec::new() })
    }

    /// Write a CSV body under a leading config-hash comment line.
    pub fn write_csv(&mut self, name: &str, body: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        let text = format!("# config {}\n{body}", self.hash);
        std::fs::write(&path, text)?;
        self.written.push(path.clone());
        Ok(path)
    }

    /// Write a JSON value with the config hash injected at the top level.
    pub fn write_json(&mut self, name: &str, value: serde_json::Value) -> Result<PathBuf> {
        let mut value = value;
        if let serde_json::Value::Object(map) = &mut value {
            map.insert("config_hash".into(), serde_json::Value::String(self.hash.clone()));
        }
        let path = self.dir.join(name);
        std::fs::write(&path, format!("{:#}\n", value))?;
        self.written.push(path.clone());
        Ok(path)
    }

    /// Remove everything written so far (called on command failure).
    pub fn rollback(&mut self) {
        for p in self.written.drain(..) {
            let _ = std::fs::remove_file(p);
        }
    }

    pub fn finish(
        &mut self,
        command: &str,
        seed: u64,
        threads: usize,
        timings: &[(String, f64)],
    ) -> Result<()> {
        let files: Vec<String> = self
            .written
            .iter()
            .filter_map(|p| p.file_name().map(|s| s.to_string_lossy().into_owned()))
            .collect();
        let timing_map: serde_json::Map<String, serde_json::Value> = timings
            .iter()
            .map(|(k, ms)| (k.clone(), serde_json::json!(ms)))
            .collect();
        let manifest = serde_json::json!({
            "command": command,
            "config_hash": self.hash,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": seed,
            "threads": threads,
            "timings_ms": serde_json::Value::Object(timing_map),
            "files": files,
        });
        std::fs::write(self.dir.join("run_manifest.json"), format!("{:#}\n", manifest))?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Computation chain
// ---------------------------------------------------------------------------

fn sin2pi(x: f64) -> f64 {
    (2.0 * std::f64::consts::PI * x).sin()
}

pub fn matrix_field(cfg: &ExperimentConfig) -> Result<MatrixField> {
    let a = cfg.problem.field_amplitude;
    match cfg.problem.field.as_str() {
        "identity" => Ok(MatrixField::identity()),
        "diag" => Ok(MatrixField::new(move |x, y| {
            Mat2::new(1.0, 0.0, 0.0, 1.0 + a * sin2pi(x) * sin2pi(y))
        })),
        "rotated" => {
            let phi = cfg.problem.field_angle;
            let (c, s) = (phi.cos(), phi.sin());
            Ok(MatrixField::new(move |x, y| {
                let d = 1.0 + a * sin2pi(x) * sin2pi(y);
                // R diag(1, d) Rᵀ
                Mat2::new(
                    c * c + d * s * s,
                    c * s * (1.0 - d),
                    c * s * (1.0 - d),
                    s * s + d * c * c,
                )
            }))
        }
        other => Err(Error::Validation(format!("unknown matrix field '{other}'"))),
    }
}

pub fn domain_grid(cfg: &ExperimentConfig) -> Result<DomainGrid> {
    let h = 1.0 / cfg.problem.resolution as f64;
    let r = cfg.problem.radius;
    match cfg.problem.domain.as_str() {
        "disk" => DomainGrid::from_indicator(
            [-r - 2.0 * h, r + 2.0 * h, -r - 2.0 * h, r + 2.0 * h],
            h,
            move |x, y| x * x + y * y < r * r,
        ),
        "square" => DomainGrid::from_indicator(
            [-2.0 * h, r + 2.0 * h, -2.0 * h, r + 2.0 * h],
            h,
            move |x, y| x > 0.0 && x < r && y > 0.0 && y < r,
        ),
        "ellipse" => {
            let [a, b] = cfg.problem.semi_axes.unwrap();
            DomainGrid::from_indicator(
                [-a - 2.0 * h, a + 2.0 * h, -b - 2.0 * h, b + 2.0 * h],
                h,
                move |x, y| (x / a) * (x / a) + (y / b) * (y / b) < 1.0,
            )
        }
        other => Err(Error::Validation(format!("unknown domain '{other}'"))),
    }
}

pub fn eigenfield(cfg: &ExperimentConfig) -> Result<EigenField> {
    let grid = domain_grid(cfg)?;
    let field = matrix_field(cfg)?;
    let op = discretize_operator(&grid, &field)?;
    first_eigenpair(grid, op)
}

/// Ψ^{1/p} as a scalar field, interpolated off the discrete eigenfunction.
pub fn weight_field(ef: &Arc<EigenField>, p: f64) -> ScalarField {
    let ef1 = Arc::clone(ef);
    let ef2 = Arc::clone(ef);
    ScalarField::with_domain(
        move |x, y| bilinear(&ef1.grid, &ef1.psi, x, y).max(0.0).powf(1.0 / p),
        move |x, y| bilinear(&ef2.grid, &ef2.psi, x, y) > 0.0,
    )
}

pub fn build_configured_curve(
    cfg: &ExperimentConfig,
    ef: &Arc<EigenField>,
) -> Result<CurveGeometry> {
    let cb = cfg.require_curve()?;
    let field = matrix_field(cfg)?;
    let q = weight_field(ef, cfg.problem.p);
    let samples = circle_samples(cb.center[0], cb.center[1], cb.radius, 2 * cb.nodes.max(128));
    let opts = CurveOptions { nodes: cb.nodes, delta0: cb.delta0, ..CurveOptions::default() };
    if cb.optimize {
        let search = CriticalSearchOptions {
            tol: cb.tolerance,
            modes: cb.modes,
            ..CriticalSearchOptions::default()
        };
        find_critical_curve(&field, &q, &samples, cfg.problem.p, &opts, &search)
    } else {
        build_curve(&samples, &field, &q, cfg.problem.p, &opts)
    }
}

fn lambda_conv(cfg: &ExperimentConfig) -> LambdaStarConvention {
    match cfg.toda.as_ref().map(|t| t.lambda_star.as_str()) {
        Some("mode-matched") => LambdaStarConvention::ModeMatched,
        _ => LambdaStarConvention::Printed,
    }
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

pub struct RunOptions {
    pub out: PathBuf,
    pub seed: u64,
    pub threads: usize,
}

struct Timer {
    t0: Instant,
    marks: Vec<(String, f64)>,
}

impl Timer {
    fn new() -> Self {
        Timer { t0: Instant::now(), marks: Vec::new() }
    }
    fn mark(&mut self, name: &str) {
        let ms = self.t0.elapsed().as_secs_f64() * 1e3;
        self.marks.push((name.to_string(), ms));
        self.t0 = Instant::now();
    }
}

fn run_guarded(
    command: &str,
    cfg_hash: &str,
    opts: &RunOptions,
    body: impl FnOnce(&mut OutDir, &mut Timer) -> Result<()>,
) -> Result<()> {
    let mut out = OutDir::open(&opts.out, cfg_hash)?;
    let mut timer = Timer::new();
    match body(&mut out, &mut timer) {
        Ok(()) => out.finish(command, opts.seed, opts.threads, &timer.marks),
        Err(e) => {
            out.rollback();
            Err(e)
        }
    }
}

pub fn cmd_profile(cfg: &ExperimentConfig, hash: &str, opts: &RunOptions) -> Result<()> {
    run_guarded("profile", hash, opts, |out, timer| {
        let ps = ProfileSet::build(cfg.problem.p, None)?;
        timer.mark("profile_build");
        let mut csv = String::from(
            "p,w0,alpha_fit,alpha_int,lambda0,c0,c1,alpha_rel_gap\n",
        );
        let _ = writeln!(
            csv,
            "{},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.3e}",
            ps.p,
            ps.w_center,
            ps.decay.alpha_fit,
            ps.decay.alpha_int,
            ps.lambda0,
            ps.c0,
            ps.c1,
            ps.decay.rel_gap
        );
        out.write_csv("profile_constants.csv", &csv)?;

        let mut idcsv = String::from("identity,lhs,rhs,relative_error\n");
        for row in verify_profile_identities(&ps) {
            let _ = writeln!(
                idcsv,
                "{},{:.12e},{:.12e},{:.3e}",
                row.name, row.lhs, row.rhs, row.rel
            );
        }
        out.write_csv("profile_identities.csv", &idcsv)?;

        out.write_json(
            "decay_constant_report.json",
            serde_json::json!({
                "p": ps.p,
                "alpha_fit": ps.decay.alpha_fit,
                "alpha_int": ps.decay.alpha_int,
                "kernel_plus": ps.decay.kernel_plus,
                "kernel_minus": ps.decay.kernel_minus,
                "relative_gap": ps.decay.rel_gap,
                "note": "alpha_int uses the Green-representation integral; the symmetric \
                         kernel form vanishes identically (odd integrand) and the \
                         antisymmetric form evaluates to -alpha/2 once the dropped \
                         boundary terms are restored, so neither is used directly",
            }),
        )?;
        timer.mark("write");
        Ok(())
    })
}

pub fn cmd_geometry(cfg: &ExperimentConfig, hash: &str, opts: &RunOptions) -> Result<()> {
    cfg.require_curve()?;
    run_guarded("geometry", hash, opts, |out, timer| {
        let ef = Arc::new(eigenfield(cfg)?);
        timer.mark("eigenfield");
        let curve = build_configured_curve(cfg, &ef)?;
        timer.mark("curve");
        let density = criticality_residual(&curve);
        let mut csv = String::from("theta,x,y,alpha,beta,qt,criticality_density\n");
        for i in 0..curve.m {
            let _ = writeln!(
                csv,
                "{:.8},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.6e}",
                curve.theta(i),
                curve.gamma[i].x,
                curve.gamma[i].y,
                curve.alpha[i],
                curve.beta[i],
                curve.qt[i],
                density[i]
            );
        }
        out.write_csv("curve.csv", &csv)?;
        let jc = jacobi_coefficients(&curve);
        let defect_sup = density.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        out.write_json(
            "geometry.json",
            serde_json::json!({
                "p": curve.p,
                "nodes": curve.m,
                "length": curve.ell,
                "weighted_length": functional_k(&curve),
                "criticality_defect_sup": defect_sup,
                "width_weight_defect": theorem_scaling_defect(&curve),
                "jacobi_l1": jc.l1,
            }),
        )?;
        timer.mark("write");
        Ok(())
    })
}

pub fn cmd_field(cfg: &ExperimentConfig, hash: &str, opts: &RunOptions) -> Result<()> {
    run_guarded("field", hash, opts, |out, timer| {
        let ef = eigenfield(cfg)?;
        timer.mark("eigenfield");
        let mut csv = String::from("x,y,psi\n");
        for k in 0..ef.grid.n_interior() {
            let (x, y) = ef.grid.xy_of(k);
            let _ = writeln!(csv, "{x:.10e},{y:.10e},{:.12e}", ef.psi[k]);
        }
        out.write_csv("eigenfield.csv", &csv)?;
        let mut branches = Vec::new();
        if let Some(layers) = &cfg.layers {
            let mut bcsv = String::from("epsilon,newton_iterations,residual_norm\n");
            for &eps in &layers.epsilon {
                let b = solve_negative_branch(&ef, eps, cfg.problem.p)?;
                let _ = writeln!(
                    bcsv,
                    "{eps},{},{:.6e}",
                    b.newton_iterations, b.residual_norm
                );
                branches.push(b);
            }
            out.write_csv("negative_branch.csv", &bcsv)?;
        }
        timer.mark("branches");
        out.write_json(
            "field.json",
            serde_json::json!({
                "lambda1": ef.lambda1,
                "eigen_residual": ef.residual,
                "interior_nodes": ef.grid.n_interior(),
                "h2": ef.grid.h2,
            }),
        )?;
        timer.mark("write");
        Ok(())
    })
}

pub fn cmd_toda(cfg: &ExperimentConfig, hash: &str, opts: &RunOptions) -> Result<()> {
    cfg.require_curve()?;
    let layers = cfg.require_layers()?.clone();
    run_guarded("toda", hash, opts, |out, timer| {
        let ps = ProfileSet::build(cfg.problem.p, None)?;
        let ef = Arc::new(eigenfield(cfg)?);
        let curve = build_configured_curve(cfg, &ef)?;
        timer.mark("chain");
        let jc = jacobi_coefficients(&curve);
        let (c1, c2) = cfg
            .toda
            .as_ref()
            .map(|t| (t.c1, t.c2))
            .unwrap_or((0.05, 0.05));
        let tm = toda_matrices(layers.n.max(2), ps.p)?;
        let reports = resonance_gaps(
            &layers.epsilon,
            &tm,
            jc.l1,
            ps.lambda0,
            &jc.upsilon2,
            lambda_conv(cfg),
            if layers.n == 1 { 0.0 } else { c1 },
            c2,
        );
        let mut rho_csv = String::from("epsilon,rho,asymptotic_gap,status\n");
        for (i, &eps) in layers.epsilon.iter().enumerate() {
            let dist = solve_rho(eps, ps.p, ps.alpha_p, ps.c0)?;
            // A resonant ε is classified, not fatal: the row is marked.
            let status = if reports[i].pass { "ok" } else { "resonant" };
            let _ = writeln!(
                rho_csv,
                "{eps},{:.12e},{:.6e},{status}",
                dist.rho, dist.asymptotic_gap
            );
        }
        out.write_csv("interaction_distance.csv", &rho_csv)?;
        let mut res_csv = String::from("epsilon,status,worst_margin,offender\n");
        for r in &reports {
            let offender = match (r.position_offender, r.amplitude_offender) {
                (Some((i, j)), _) => format!("position i={i} j={j}"),
                (None, Some(k)) => format!("amplitude k={k}"),
                (None, None) => String::new(),
            };
            let _ = writeln!(
                res_csv,
                "{},{},{:.6e},{offender}",
                r.eps,
                if r.pass { "ok" } else { "resonant" },
                r.worst_margin
            );
        }
        out.write_csv("resonance.csv", &res_csv)?;
        out.write_json(
            "toda.json",
            serde_json::json!({
                "n_layers": layers.n,
                "difference_eigenvalues": tm.lambdas,
                "jacobi_l1": jc.l1,
                "lambda_star_convention": cfg.toda.as_ref()
                    .map(|t| t.lambda_star.clone())
                    .unwrap_or_else(|| "printed".into()),
                "admissible": reports.iter().filter(|r| r.pass).count(),
                "resonant": reports.iter().filter(|r| !r.pass).count(),
            }),
        )?;
        timer.mark("write");
        Ok(())
    })
}

fn default_delta(curve: &CurveGeometry) -> f64 {
    0.32 * curve.delta0
}

pub fn cmd_assemble(cfg: &ExperimentConfig, hash: &str, opts: &RunOptions) -> Result<()> {
    cfg.require_curve()?;
    let layers = cfg.require_layers()?.clone();
    run_guarded("assemble", hash, opts, |out, timer| {
        let ps = ProfileSet::build(cfg.problem.p, None)?;
        let ef = Arc::new(eigenfield(cfg)?);
        let curve = build_configured_curve(cfg, &ef)?;
        timer.mark("chain");
        let jc = jacobi_coefficients(&curve);
        let (c1, c2) = cfg
            .toda
            .as_ref()
            .map(|t| (t.c1, t.c2))
            .unwrap_or((0.05, 0.05));
        let tm = toda_matrices(layers.n.max(2), ps.p)?;
        let reports = resonance_gaps(
            &layers.epsilon,
            &tm,
            jc.l1,
            ps.lambda0,
            &jc.upsilon2,
            lambda_conv(cfg),
            if layers.n == 1 { 0.0 } else { c1 },
            c2,
        );
        if let Some(r) = reports.iter().find(|r| !r.pass) {
            return Err(Error::Resonance(format!(
                "epsilon = {} violates the resonance gaps (worst margin {:.3e}); \
                 remove it from layers.epsilon or run the toda command for the table",
                r.eps, r.worst_margin
            )));
        }
        let delta = layers.delta.unwrap_or_else(|| default_delta(&curve));
        let acfg = AnsatzConfig { order: layers.order, delta, delta0: curve.delta0 };
        let chart = fermi_chart(&curve, &ef.grid, curve.delta0)?;
        timer.mark("chart");
        let m = curve.m;
        let mut csv = String::from("epsilon,order,tube_l2,band_l2,global_l2,sup\n");
        let mut last = None;
        for &eps in &layers.epsilon {
            let dist = solve_rho(eps, ps.p, ps.alpha_p, ps.c0)?;
            let v = if layers.n == 1 {
                vec![vec![0.0; m]]
            } else {
                let refi = refine_layer_profile(
                    1,
                    &tm,
                    &jc.upsilon2,
                    &jc.upsilon1,
                    &jc.upsilon0,
                    1.0 / dist.rho,
                )?;
                let mut v = refi.v_bar;
                v.push(vec![0.0; m]);
                v
            };
            let d = positions_from_differences(&v);
            let e = vec![vec![0.0; m]; layers.n];
            let state = layer_state(eps, ps.p, ps.alpha_p, ps.c0, d, e, &curve.beta)?;
            let branch = solve_negative_branch(&ef, eps, ps.p)?;
            let ans = build_ansatz(&ef, &curve, &chart, &ps, &branch, &state, &acfg)?;
            let norms = pde_residual(&ans, &ef, &chart);
            let _ = writeln!(
                csv,
                "{eps},{},{:.6e},{:.6e},{:.6e},{:.6e}",
                layers.order, norms.tube_l2, norms.band_l2, norms.global_l2, norms.sup
            );
            last = Some(ans);
        }
        out.write_csv("ansatz_residuals.csv", &csv)?;
        if let Some(ans) = last {
            let r = nlayer::assembler::residual_field(&ans, &ef);
            let mut buf = Vec::new();
            nlayer::assembler::export_field_csv(&mut buf, &ef, &ans.u, &r)?;
            out.write_csv("ansatz_field.csv", &String::from_utf8_lossy(&buf))?;
        }
        out.write_json(
            "assemble.json",
            serde_json::json!({
                "n_layers": layers.n,
                "order": layers.order,
                "delta": delta,
                "delta0": curve.delta0,
                "narrow_cutoff": acfg.validate()?,
            }),
        )?;
        timer.mark("write");
        Ok(())
    })
}

pub fn cmd_sweep(cfg: &ExperimentConfig, hash: &str, opts: &RunOptions) -> Result<()> {
    cfg.require_curve()?;
    let layers = cfg.require_layers()?.clone();
    run_guarded("sweep", hash, opts, |out, timer| {
        let ps = ProfileSet::build(cfg.problem.p, None)?;
        let ef = Arc::new(eigenfield(cfg)?);
        let curve = build_configured_curve(cfg, &ef)?;
        timer.mark("chain");
        let (c1, c2) = cfg
            .toda
            .as_ref()
            .map(|t| (t.c1, t.c2))
            .unwrap_or((0.05, 0.05));
        let delta = layers.delta.unwrap_or_else(|| default_delta(&curve));
        let sc = SweepConfig {
            n_layers: layers.n,
            ansatz: AnsatzConfig { order: 0, delta, delta0: curve.delta0 },
            refine_order: 1,
            c1,
            c2,
        };
        let report = residual_sweep(&ef, &curve, &ps, &layers.epsilon, &sc)?;
        timer.mark("sweep");
        let mut csv = String::from("epsilon,admissible,tube_order0,tube_order1,global_order0,global_order1,sup_order0,sup_order1\n");
        for row in &report.rows {
            let _ = writeln!(
                csv,
                "{},{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e}",
                row.eps,
                row.admissible,
                row.tube[0],
                row.tube[1],
                row.global[0],
                row.global[1],
                row.sup[0],
                row.sup[1]
            );
        }
        out.write_csv("sweep.csv", &csv)?;
        out.write_json(
            "sweep.json",
            serde_json::json!({
                "slope_order0": report.slopes[0],
                "slope_order1": report.slopes[1],
                "warning": report.warning,
                "rows": report.rows.len(),
                "admissible": report.rows.iter().filter(|r| r.admissible).count(),
            }),
        )?;
        timer.mark("write");
        Ok(())
    })
}
