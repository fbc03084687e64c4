//! Experiment configuration: schema, parsing and validation.
//!
//! The file format is TOML with one table per block:
//!
//! ```toml
//! [problem]
//! p = 4.0
//! field = "identity"        # identity | diag | rotated
//! field_amplitude = 0.1     # anisotropy amplitude for diag / rotated
//! field_angle = 0.3         # rotation angle (radians) for rotated
//! domain = "disk"           # disk | square | ellipse
//! radius = 1.0              # disk radius / square side
//! semi_axes = [1.0, 0.7]    # ellipse semi-axes
//! resolution = 64           # grid spacing h2 = 1/resolution
//!
//! [curve]
//! center = [0.0, 0.0]
//! radius = 0.5              # initial circle
//! nodes = 192
//! delta0 = 0.4              # tube half-width
//! optimize = true           # deform to a critical curve before use
//! tolerance = 1e-6
//! modes = 8                 # Fourier modes of the normal displacement
//!
//! [layers]
//! n = 2
//! epsilon = [0.08, 0.07, 0.06, 0.05]   # strictly decreasing
//! order = 1                 # ansatz order (0 or 1)
//! e_coupling = false
//! delta = 0.16              # cutoff half-width
//!
//! [toda]
//! c1 = 0.05
//! c2 = 0.05
//! lambda_star = "printed"   # printed | mode-matched
//! modes = 16
//!
//! [output]
//! directory = "out"
//! formats = ["csv", "json"]
//! ```

use nlayer::{Error, Result};
use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemBlock,
    pub curve: Option<CurveBlock>,
    pub layers: Option<LayersBlock>,
    pub toda: Option<TodaBlock>,
    pub output: Option<OutputBlock>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemBlock {
    pub p: f64,
    #[serde(default = "default_field")]
    pub field: String,
    #[serde(default)]
    pub field_amplitude: f64,
    #[serde(default)]
    pub field_angle: f64,
    #[serde(default = "default_domain")]
    pub domain: String,
    #[serde(default = "default_one")]
    pub radius: f64,
    pub semi_axes: Option<[f64; 2]>,
    #[serde(default = "default_resolution")]
    pub resolution: u32,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveBlock {
    #[serde(default)]
    pub center: [f64; 2],
    pub radius: f64,
    #[serde(default = "default_nodes")]
    pub nodes: usize,
    #[serde(default = "default_delta0")]
    pub delta0: f64,
    #[serde(default)]
    pub optimize: bool,
    #[serde(default = "default_tol")]
    pub tolerance: f64,
    #[serde(default = "default_curve_modes")]
    pub modes: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayersBlock {
    pub n: usize,
    pub epsilon: Vec<f64>,
    #[serde(default)]
    pub order: usize,
    #[serde(default)]
    pub e_coupling: bool,
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TodaBlock {
    #[serde(default = "default_c")]
    pub c1: f64,
    #[serde(default = "default_c")]
    pub c2: f64,
    #[serde(default = "default_lambda_star")]
    pub lambda_star: String,
    #[serde(default = "default_toda_modes")]
    pub modes: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    pub directory: Option<String>,
    #[serde(default = "default_formats")]
    pub formats: Vec<String>,
}

fn default_field() -> String {
    "identity".into()
}
fn default_domain() -> String {
    "disk".into()
}
fn default_one() -> f64 {
    1.0
}
fn default_resolution() -> u32 {
    64
}
fn default_nodes() -> usize {
    192
}
fn default_delta0() -> f64 {
    0.2
}
fn default_tol() -> f64 {
    1e-6
}
fn default_curve_modes() -> usize {
    8
}
fn default_c() -> f64 {
    0.05
}
fn default_lambda_star() -> String {
    "printed".into()
}
fn default_toda_modes() -> usize {
    16
}
fn default_formats() -> Vec<String> {
    vec!["csv".into(), "json".into()]
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)
            .map_err(|e| Error::Validation(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problem.p;
        if !(p > 1.0) {
            return Err(Error::Validation(format!("problem.p must exceed 1, got {p}")));
        }
        match self.problem.field.as_str() {
            "identity" | "diag" | "rotated" => {}
            other => {
                return Err(Error::Validation(format!(
                    "unknown matrix field '{other}' (expected identity, diag or rotated)"
                )))
            }
        }
        match self.problem.domain.as_str() {
            "disk" | "square" => {}
            "ellipse" => {
                let [a, b] = self.problem.semi_axes.ok_or_else(|| {
                    Error::Validation("ellipse domain needs problem.semi_axes".into())
                })?;
                if !(a > 0.0 && b > 0.0) {
                    return Err(Error::Validation("semi_axes must be positive".into()));
                }
            }
            other => {
                return Err(Error::Validation(format!(
                    "unknown domain '{other}' (expected disk, square or ellipse)"
                )))
            }
        }
        if !(self.problem.radius > 0.0) {
            return Err(Error::Validation("problem.radius must be positive".into()));
        }
        if self.problem.resolution < 8 {
            return Err(Error::Validation("problem.resolution must be at least 8".into()));
        }
        if self.problem.field != "identity" && self.problem.field_amplitude.abs() >= 1.0 {
            return Err(Error::Validation(
                "field_amplitude must stay in (-1, 1) to keep the field elliptic".into(),
            ));
        }
        if let Some(layers) = &self.layers {
            if !(p > 3.0) {
                return Err(Error::Validation(format!(
                    "layers block requires problem.p > 3 (the first-order local expansion \
                     needs three classical derivatives of the nonlinearity), got p = {p}"
                )));
            }
            if layers.n == 0 {
                return Err(Error::Validation("layers.n must be at least 1".into()));
            }
            if layers.epsilon.is_empty() {
                return Err(Error::Validation("layers.epsilon must be non-empty".into()));
            }
            for &e in &layers.epsilon {
                if !(e > 0.0 && e < 1.0) {
                    return Err(Error::Validation(format!(
                        "layers.epsilon entries must lie in (0, 1), got {e}"
                    )));
                }
            }
            if layers.epsilon.windows(2).any(|w| w[1] >= w[0]) {
                return Err(Error::Validation(
                    "layers.epsilon must be strictly decreasing".into(),
                ));
            }
            if layers.order > 1 {
                return Err(Error::Validation(format!(
                    "layers.order must be 0 or 1, got {}",
                    layers.order
                )));
            }
        }
        if let Some(curve) = &self.curve {
            if !(curve.radius > 0.0) {
                return Err(Error::Validation("curve.radius must be positive".into()));
            }
            if curve.nodes < 16 || curve.nodes % 2 != 0 {
                return Err(Error::Validation("curve.nodes must be even and at least 16".into()));
            }
            if !(curve.delta0 > 0.0) {
                return Err(Error::Validation("curve.delta0 must be positive".into()));
            }
        }
        if let Some(toda) = &self.toda {
            match toda.lambda_star.as_str() {
                "printed" | "mode-matched" => {}
                other => {
                    return Err(Error::Validation(format!(
                        "unknown toda.lambda_star convention '{other}' \
                         (expected printed or mode-matched)"
                    )))
                }
            }
            if toda.c1 < 0.0 || toda.c2 < 0.0 {
                return Err(Error::Validation("toda.c1 and toda.c2 must be non-negative".into()));
            }
        }
        if let Some(out) = &self.output {
            for f in &out.formats {
                if f != "csv" && f != "json" {
                    return Err(Error::Validation(format!(
                        "unknown output format '{f}' (expected csv or json)"
                    )));
                }
            }
        }
        Ok(())
    }

    /// The curve block, or a validation error that names the missing block.
    pub fn require_curve(&self) -> Result<&CurveBlock> {
        self.curve
            .as_ref()
            .ok_or_else(|| Error::Validation("missing [curve] block in configuration".into()))
    }

    pub fn require_layers(&self) -> Result<&LayersBlock> {
        self.layers
            .as_ref()
            .ok_or_else(|| Error::Validation("missing [layers] block in configuration".into()))
    }
}
