//! Experiment configuration: a TOML document layered over a named base
//! (`example1`, `example2` or `custom`), resolved into ready-to-run systems.
//!
//! ```toml
//! base = "example2"
//! epsilon = 1.0
//! eta = "from-theorem3"
//! seed = 7
//! realizations = 20
//! [disturbance]
//! bound = 0.05
//! hold = 0.1
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;
use symabs::certificates::{self, CertError, Certificate, CertificateFile};
use symabs::examples;
use symabs::hierarchy::ControlInterface;
use symabs::planner::{Refinement, Workspace, DEFAULT_DWELL, DEFAULT_GAIN};
use symabs::systems::{AbstractSystem, ConcreteSystem, InputMap, InputSet, IqcSystem, Nonlinearity};
use symabs::{Aabb, Matrix, Quantizer, Vector};

use crate::CliError;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "SYMABS_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "symabs-out";

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub base: Option<String>,
    pub system: Option<RawSystem>,
    pub certificate: Option<RawCertificate>,
    pub epsilon: Option<f64>,
    pub eta: Option<EtaSpec>,
    pub horizon: Option<f64>,
    pub dt: Option<f64>,
    pub x0: Option<Vec<f64>>,
    /// Half-width of the input box `U`; omitted means unconstrained.
    pub input_bound: Option<f64>,
    pub input_map: Option<InputMapSpec>,
    pub interface_gain_scale: Option<f64>,
    pub disturbance: Option<RawDisturbance>,
    pub abstract_input: Option<AbstractInput>,
    pub seed: Option<u64>,
    pub realizations: Option<usize>,
    pub workspace: Option<Workspace>,
    pub planner: Option<RawPlanner>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawSystem {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    /// `"none"` or `"sin-decay"` (`sin(q) / (t + 1)` elementwise).
    pub nonlinearity: Option<String>,
    pub e: Option<Vec<Vec<f64>>>,
    pub c_q: Option<Vec<Vec<f64>>>,
    pub m: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawCertificate {
    /// `"builtin"`, `"riccati"` or `"file"`.
    pub source: String,
    pub path: Option<PathBuf>,
    /// Overrides the decay rate.
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum EtaSpec {
    Value(f64),
    /// `"from-theorem3"`: the largest admissible value for the precision.
    Rule(String),
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum InputMapSpec {
    /// `[-r, r]^m`.
    Bound(f64),
    /// `"unbounded"` or `"from-certificate"`.
    Rule(String),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawDisturbance {
    pub bound: f64,
    pub hold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AbstractInput {
    Zero,
    Constant { value: Vec<f64> },
    /// `v = gain * x_hat_2`.
    LinearFeedback { gain: f64 },
    /// Track the recurrence plan of the workspace.
    Plan,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawPlanner {
    pub dwell: Option<f64>,
    pub gain: Option<f64>,
    pub laps: Option<usize>,
}

/// Command-line overrides.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub trials: Option<usize>,
    pub dt: Option<f64>,
    pub out: Option<PathBuf>,
}

/// Fully resolved experiment.
#[derive(Clone)]
pub struct Experiment {
    pub name: String,
    pub iqc: IqcSystem,
    pub system: ConcreteSystem,
    pub abstraction: AbstractSystem,
    pub interface: ControlInterface,
    pub certificate: Certificate,
    pub epsilon: f64,
    pub eta: f64,
    pub horizon: f64,
    pub dt: f64,
    pub x0: Vector,
    pub input_set: InputSet,
    pub input_map: InputSet,
    pub disturbance: Aabb,
    pub hold: f64,
    pub seed: u64,
    pub realizations: usize,
    pub abstract_input: AbstractInput,
    pub workspace: Option<Workspace>,
    pub refinement: Refinement,
    pub output_dir: PathBuf,
}

impl Experiment {
    /// Largest disturbance norm, `max ||w||` over `W`.
    pub fn w_bar(&self) -> f64 {
        self.disturbance.max_norm()
    }
}

/// Loads `source`: a builtin name or a path to a TOML file.
pub fn load(source: &str, overrides: &Overrides) -> Result<Experiment, CliError> {
    let (raw, dir) = match source {
        "example1" | "example2" => (
            RawConfig {
                base: Some(source.to_string()),
                ..RawConfig::default()
            },
            PathBuf::from("."),
        ),
        path => {
            let path = Path::new(path);
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let raw: RawConfig =
                toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let dir = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
            (raw, dir)
        }
    };
    resolve(raw, &dir, overrides)
}

fn config_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Config(e.to_string())
}

fn matrix(rows: &[Vec<f64>], cols: usize, what: &str) -> Result<Matrix, CliError> {
    certificates::matrix_from_rows(rows, cols).map_err(|e| CliError::Config(format!("{what}: {e}")))
}

fn custom_system(raw: &RawSystem) -> Result<IqcSystem, CliError> {
    let n = raw.a.len();
    let a = matrix(&raw.a, n, "a")?;
    let b = matrix(&raw.b, 0, "b")?;
    let c = matrix(&raw.c, n, "c")?;
    let kind = raw.nonlinearity.as_deref().unwrap_or("none");
    let sys = match kind {
        "none" => IqcSystem::linear(a, b, c),
        "sin-decay" => {
            let e = matrix(raw.e.as_deref().unwrap_or(&[]), n, "e")?;
            let c_q = matrix(raw.c_q.as_deref().unwrap_or(&[]), n, "c_q")?;
            let m = matrix(raw.m.as_deref().unwrap_or(&[]), 0, "m")?;
            let (lp, le) = (c_q.nrows(), e.ncols());
            let p: Nonlinearity = Arc::new(|t, q: &Vector| q.map(f64::sin) / (t + 1.0));
            if lp != le {
                return Err(CliError::Config("sin-decay needs c_q rows equal to e columns".into()));
            }
            IqcSystem::new(a, b, c, e, c_q, Matrix::zeros(lp, le), p, m)
        }
        other => return Err(CliError::Config(format!("unknown nonlinearity {other:?}"))),
    };
    sys.map_err(config_err)
}

fn positive(v: f64, what: &str) -> Result<f64, CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(CliError::Config(format!("{what} must be positive, got {v}")))
    }
}

fn symmetric_box(n: usize, r: f64, what: &str) -> Result<Aabb, CliError> {
    if !(r >= 0.0) {
        return Err(CliError::Config(format!("{what} must be non-negative, got {r}")));
    }
    Aabb::symmetric(n, r).map_err(config_err)
}

pub fn resolve(raw: RawConfig, dir: &Path, ov: &Overrides) -> Result<Experiment, CliError> {
    let base = raw.base.clone().unwrap_or_else(|| "custom".into());
    let builtin = match base.as_str() {
        "example1" => 1,
        "example2" => 2,
        "custom" => 0,
        other => return Err(CliError::Config(format!("unknown base {other:?}"))),
    };

    let iqc = match (&raw.system, builtin) {
        (Some(s), _) => custom_system(s)?,
        (None, 1) => examples::example1_system(),
        (None, 2) => examples::example2_system(),
        (None, _) => return Err(CliError::Config("custom configurations need a [system] table".into())),
    };
    let n = iqc.state_dim();
    let m = iqc.input_dim();
    let builtin = if raw.system.is_some() { 0 } else { builtin };

    let cert_source = raw.certificate.clone().unwrap_or(RawCertificate {
        source: if builtin > 0 { "builtin" } else { "riccati" }.into(),
        path: None,
        alpha: None,
    });
    let mut certificate = match cert_source.source.as_str() {
        "builtin" => match builtin {
            1 => examples::example1_certificate(),
            2 => examples::example2_certificate(),
            _ => return Err(CliError::Config("builtin certificates need a builtin system".into())),
        },
        "riccati" => certificates::riccati_certificate(&iqc),
        "file" => {
            let path = cert_source
                .path
                .as_ref()
                .ok_or_else(|| CliError::Config("certificate source \"file\" needs a path".into()))?;
            CertificateFile::load(&dir.join(path)).and_then(|f| f.into_certificate(&iqc.b))
        }
        other => return Err(CliError::Config(format!("unknown certificate source {other:?}"))),
    }
    .map_err(|e: CertError| CliError::Config(format!("certificate: {e}")))?;
    if let Some(alpha) = cert_source.alpha {
        certificate = certificate.with_alpha(alpha, &iqc.b).map_err(config_err)?;
    }

    let epsilon = positive(
        raw.epsilon.or(match builtin {
            1 => Some(examples::EX1_EPSILON),
            2 => Some(examples::EX2_EPSILON),
            _ => None,
        })
        .ok_or_else(|| CliError::Config("epsilon is required".into()))?,
        "epsilon",
    )?;

    let (w_bound, hold) = match (&raw.disturbance, builtin) {
        (Some(d), _) => (d.bound, d.hold.unwrap_or(symabs::systems::DEFAULT_HOLD)),
        (None, 2) => (examples::EX2_DISTURBANCE_BOUND, symabs::systems::DEFAULT_HOLD),
        (None, _) => (0.0, symabs::systems::DEFAULT_HOLD),
    };
    let disturbance = symmetric_box(n, w_bound, "disturbance bound")?;
    let hold = positive(hold, "disturbance hold")?;

    let eta_spec = raw.eta.clone().unwrap_or(match builtin {
        1 => EtaSpec::Value(examples::EX1_ETA),
        2 => EtaSpec::Value(examples::EX2_ETA),
        _ => EtaSpec::Rule("from-theorem3".into()),
    });
    let eta = match eta_spec {
        EtaSpec::Value(v) => positive(v, "eta")?,
        EtaSpec::Rule(r) if r == "from-theorem3" => {
            certificates::eta_bound(&certificate, &iqc.c, epsilon, disturbance.max_norm())
                .map_err(|e| CliError::Verification(e.to_string()))?
        }
        EtaSpec::Rule(r) => return Err(CliError::Config(format!("unknown eta rule {r:?}"))),
    };

    let input_set = match raw.input_bound.or(if builtin == 2 {
        Some(examples::EX2_INPUT_BOUND)
    } else {
        None
    }) {
        Some(r) => InputSet::Box(symmetric_box(m, r, "input bound")?),
        None => InputSet::Unbounded(m),
    };
    let map_spec = raw.input_map.clone().unwrap_or(match builtin {
        2 => InputMapSpec::Bound(examples::EX2_INPUT_MAP_BOUND),
        _ => InputMapSpec::Rule(
            if input_set.as_box().is_some() {
                "from-certificate"
            } else {
                "unbounded"
            }
            .into(),
        ),
    });
    let input_map = match map_spec {
        InputMapSpec::Bound(r) => InputSet::Box(symmetric_box(m, r, "input map bound")?),
        InputMapSpec::Rule(r) if r == "unbounded" => InputSet::Unbounded(m),
        InputMapSpec::Rule(r) if r == "from-certificate" => {
            certificates::admissible_input_map(&input_set, &certificate, eta, disturbance.max_norm())
                .map_err(|e| CliError::Verification(e.to_string()))?
                .shrunk
        }
        InputMapSpec::Rule(r) => return Err(CliError::Config(format!("unknown input map rule {r:?}"))),
    };

    let system = iqc
        .concrete(input_set.clone(), disturbance.clone())
        .map_err(config_err)?;
    let quantizer = Quantizer::new(n, eta).map_err(config_err)?;
    let abstraction = AbstractSystem::from_concrete(&system, quantizer, InputMap::Constant(input_map.clone()))
        .map_err(config_err)?;
    let scale = raw.interface_gain_scale.unwrap_or(1.0);
    if !scale.is_finite() {
        return Err(CliError::Config("interface_gain_scale must be finite".into()));
    }
    let interface = ControlInterface::affine(&certificate.l * scale);

    let x0 = match (&raw.x0, builtin) {
        (Some(v), _) => Vector::from_column_slice(v),
        (None, 1) => examples::example1_x0(),
        (None, 2) => examples::example2_x0(),
        (None, _) => Vector::zeros(n),
    };
    if x0.len() != n {
        return Err(CliError::Config(format!("x0 has length {}, expected {n}", x0.len())));
    }

    let abstract_input = raw.abstract_input.clone().unwrap_or(match builtin {
        1 => AbstractInput::LinearFeedback {
            gain: examples::EX1_FEEDBACK,
        },
        2 => AbstractInput::Plan,
        _ => AbstractInput::Zero,
    });
    if let AbstractInput::Constant { value } = &abstract_input {
        if value.len() != m {
            return Err(CliError::Config(format!("constant input has length {}, expected {m}", value.len())));
        }
    }
    if matches!(abstract_input, AbstractInput::LinearFeedback { .. }) && m != n {
        return Err(CliError::Config("linear-feedback inputs need as many inputs as states".into()));
    }
    let workspace = raw.workspace.clone().or(if builtin == 2 {
        Some(examples::example2_workspace())
    } else {
        None
    });
    if abstract_input == AbstractInput::Plan && workspace.is_none() {
        return Err(CliError::Config("plan inputs need a workspace".into()));
    }

    let dt = positive(
        ov.dt.or(raw.dt).unwrap_or(if builtin == 2 {
            examples::EX2_DT
        } else {
            symabs::numkernel::DEFAULT_DT
        }),
        "dt",
    )?;
    let horizon = positive(
        raw.horizon.unwrap_or(if builtin == 1 { examples::EX1_HORIZON } else { 10.0 }),
        "horizon",
    )?;
    let planner = raw.planner.clone().unwrap_or_default();
    let refinement = Refinement {
        dwell: positive(planner.dwell.unwrap_or(DEFAULT_DWELL), "planner dwell")?,
        gain: positive(planner.gain.unwrap_or(DEFAULT_GAIN), "planner gain")?,
        laps: planner.laps.unwrap_or(1),
        dt,
    };

    let output_dir = ov
        .out
        .clone()
        .or_else(|| raw.output_dir.as_ref().map(|p| dir.join(p)))
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));

    Ok(Experiment {
        name: base,
        iqc,
        system,
        abstraction,
        interface,
        certificate,
        epsilon,
        eta,
        horizon,
        dt,
        x0,
        input_set,
        input_map,
        disturbance,
        hold,
        seed: ov.seed.or(raw.seed).unwrap_or(0),
        realizations: ov
            .trials
            .or(raw.realizations)
            .unwrap_or(if builtin == 2 { 100 } else { 1 }),
        abstract_input,
        workspace,
        refinement,
        output_dir,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn from_str(s: &str) -> Result<Experiment, CliError> {
        let raw: RawConfig = toml::from_str(s).map_err(config_err)?;
        resolve(raw, Path::new("."), &Overrides::default())
    }

    #[test]
    fn builtins_resolve() {
        let e1 = load("example1", &Overrides::default()).unwrap();
        assert_eq!(e1.eta, 0.18);
        assert_eq!(e1.input_map, InputSet::Unbounded(2));
        let e2 = load("example2", &Overrides::default()).unwrap();
        assert_eq!(e2.realizations, 100);
        assert_eq!(e2.abstract_input, AbstractInput::Plan);
        assert!((e2.w_bar() - 0.05 * 2f64.sqrt()).abs() < 1e-16);
    }

    #[test]
    fn overrides_take_precedence() {
        let ov = Overrides {
            seed: Some(9),
            trials: Some(3),
            dt: Some(0.01),
            out: Some(PathBuf::from("x")),
        };
        let e = load("example2", &ov).unwrap();
        assert_eq!((e.seed, e.realizations, e.dt), (9, 3, 0.01));
        assert_eq!(e.output_dir, PathBuf::from("x"));
    }

    #[test]
    fn eta_from_bound_rule() {
        let e = from_str("base = \"example1\"\neta = \"from-theorem3\"").unwrap();
        assert!((e.eta - 0.1518).abs() < 1e-3);
    }

    #[test]
    fn custom_linear_system() {
        let e = from_str(
            "epsilon = 1.0\ninput_bound = 5.0\n[system]\na = [[-1.0, 0.0], [0.0, -2.0]]\nb = [[1.0, 0.0], [0.0, 1.0]]\nc = [[1.0, 0.0], [0.0, 1.0]]\n",
        )
        .unwrap();
        assert_eq!(e.name, "custom");
        assert!(e.eta > 0.0);
        assert!(e.input_map.as_box().is_some());
    }

    #[test]
    fn config_errors() {
        assert!(matches!(from_str("base = \"nope\""), Err(CliError::Config(_))));
        assert!(matches!(from_str("epsilon = 1.0"), Err(CliError::Config(_))));
        assert!(matches!(from_str("base = \"example1\"\neta = -1.0"), Err(CliError::Config(_))));
        assert!(matches!(from_str("base = \"example1\"\nbogus = 1"), Err(CliError::Config(_))));
        assert!(matches!(load("/nonexistent/config.toml", &Overrides::default()), Err(CliError::Config(_))));
    }
}
