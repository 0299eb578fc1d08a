//! JSON run configuration: one file describes one command invocation.
//! Drivers, delays and terminal data are picked from small registries of
//! named forms with parameter blocks, so a config is fully declarative.

use nalgebra::DVector;
use serde::Deserialize;

use crate::abse::{AnticipatedDriver, DelaySpec, TerminalSegment};
use crate::bsde::ClassicDriver;
use crate::chain::{PsiSet, RateMatrix};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::sdde::SddeCoefficients;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CommandKind {
    SimulateChain,
    SolveBsde,
    SolveAbse,
    VerifyDuality,
    CheckComparison,
    CheckEstimate,
}

impl CommandKind {
    pub fn name(&self) -> &'static str {
        match self {
            CommandKind::SimulateChain => "simulate-chain",
            CommandKind::SolveBsde => "solve-bsde",
            CommandKind::SolveAbse => "solve-abse",
            CommandKind::VerifyDuality => "verify-duality",
            CommandKind::CheckComparison => "check-comparison",
            CommandKind::CheckEstimate => "check-estimate",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: CommandKind,
    pub chain: ChainConfig,
    pub grid: GridConfig,
    #[serde(default)]
    pub driver: Option<DriverConfig>,
    /// Second driver for single-instance comparison runs.
    #[serde(default)]
    pub driver_2: Option<DriverConfig>,
    #[serde(default)]
    pub delays: Option<DelayConfig>,
    #[serde(default)]
    pub terminal: Option<TerminalConfig>,
    #[serde(default)]
    pub terminal_2: Option<TerminalConfig>,
    #[serde(default)]
    pub mc: McConfig,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainConfig {
    /// Row-major generator; `rate_matrix[j][i]` is the rate from `i` to `j`.
    pub rate_matrix: Vec<Vec<f64>>,
    #[serde(default)]
    pub initial_state: usize,
    #[serde(default)]
    pub initial_distribution: Option<Vec<f64>>,
}

impl ChainConfig {
    pub fn build(&self) -> Result<RateMatrix> {
        let n = self.rate_matrix.len();
        let mut flat = Vec::with_capacity(n * n);
        for row in &self.rate_matrix {
            if row.len() != n {
                return Err(Error::Config(format!(
                    "rate_matrix row has {} entries, expected {n}",
                    row.len()
                )));
            }
            flat.extend_from_slice(row);
        }
        RateMatrix::from_rows(n, &flat)
    }

    pub fn distribution(&self) -> Result<Option<DVector<f64>>> {
        match &self.initial_distribution {
            None => Ok(None),
            Some(p) => {
                if p.len() != self.rate_matrix.len() {
                    return Err(Error::Config(
                        "initial_distribution length must match the state count".into(),
                    ));
                }
                if p.iter().any(|&x| x < 0.0) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(Error::Config(
                        "initial_distribution must be a probability vector".into(),
                    ));
                }
                Ok(Some(DVector::from_vec(p.clone())))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Horizon `T`; solver grids extend past it by `K` or `θ` as needed.
    pub t_end: f64,
    pub n_steps: usize,
}

impl GridConfig {
    pub fn build(&self) -> Result<TimeGrid> {
        TimeGrid::new(0.0, self.t_end, self.n_steps)
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    pub n_paths: usize,
    pub seed: u64,
    /// Dump the forward trajectories of this many paths (debug aid).
    #[serde(default)]
    pub trace_paths: usize,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            n_paths: 10_000,
            seed: 0,
            trace_paths: 0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub n_instances: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_sweep_tol")]
    pub tol: f64,
}

fn default_sweep_tol() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriverConfig {
    pub name: String,
    #[serde(default)]
    pub params: serde_json::Value,
}

#[derive(Debug, Clone, Deserialize)]
struct LinearParams {
    #[serde(default)]
    a: f64,
    #[serde(default)]
    b: Vec<f64>,
    #[serde(default)]
    phi: f64,
}

#[derive(Debug, Clone, Deserialize)]
pub struct LinearAnticipatedParams {
    #[serde(default)]
    pub a: f64,
    #[serde(default)]
    pub mu: f64,
    #[serde(default)]
    pub b: Vec<f64>,
    #[serde(default)]
    pub sigma: Vec<f64>,
    #[serde(default)]
    pub phi: f64,
}

#[derive(Debug, Clone, Deserialize)]
struct DelayedYParams {
    scale: f64,
}

fn params<T: for<'de> Deserialize<'de>>(cfg: &DriverConfig) -> Result<T> {
    serde_json::from_value(cfg.params.clone())
        .map_err(|e| Error::Config(format!("driver '{}': bad params: {e}", cfg.name)))
}

fn vector_or_zeros(v: &[f64], n: usize, what: &str) -> Result<DVector<f64>> {
    if v.is_empty() {
        Ok(DVector::zeros(n))
    } else if v.len() == n {
        Ok(DVector::from_vec(v.to_vec()))
    } else {
        Err(Error::Config(format!(
            "{what} has {} entries, chain has {n} states",
            v.len()
        )))
    }
}

/// Lipschitz constant of `z -> b · z` in the seminorm, maximized over states.
pub fn seminorm_lipschitz(a: &RateMatrix, b: &DVector<f64>) -> Result<f64> {
    let set = PsiSet::new(a)?;
    Ok((0..a.n_states())
        .map(|i| set.dual_seminorm_sq(i, b).sqrt())
        .fold(0.0f64, f64::max))
}

pub fn build_classic_driver(cfg: &DriverConfig, a: &RateMatrix) -> Result<ClassicDriver<'static>> {
    let n = a.n_states();
    match cfg.name.as_str() {
        "zero" => Ok(ClassicDriver::zero()),
        "linear" => {
            let p: LinearParams = params(cfg)?;
            let b = vector_or_zeros(&p.b, n, "b")?;
            let l2 = seminorm_lipschitz(a, &b)?;
            let (av, phi) = (p.a, p.phi);
            Ok(ClassicDriver::new(av.abs(), l2, move |_, y, z, _| {
                av * y + b.dot(z) + phi
            }))
        }
        other => Err(Error::Config(format!("unknown classic driver '{other}'"))),
    }
}

pub fn build_anticipated_driver(
    cfg: &DriverConfig,
    a: &RateMatrix,
) -> Result<AnticipatedDriver<'static>> {
    let n = a.n_states();
    match cfg.name.as_str() {
        "zero" => Ok(AnticipatedDriver::new(0.0, 0.0, |_, _, _, _, _, _| 0.0)),
        "linear" => {
            let p: LinearParams = params(cfg)?;
            let b = vector_or_zeros(&p.b, n, "b")?;
            let l2 = seminorm_lipschitz(a, &b)?;
            let (av, phi) = (p.a, p.phi);
            Ok(AnticipatedDriver::new(
                av.abs(),
                l2,
                move |_, y, z, _, _, _| av * y + b.dot(z) + phi,
            ))
        }
        "linear-anticipated" => {
            let p: LinearAnticipatedParams = params(cfg)?;
            let b = vector_or_zeros(&p.b, n, "b")?;
            let sigma = vector_or_zeros(&p.sigma, n, "sigma")?;
            let c2 = seminorm_lipschitz(a, &b)?.max(seminorm_lipschitz(a, &sigma)?);
            let c1 = p.a.abs().max(p.mu.abs());
            let (av, mu, phi) = (p.a, p.mu, p.phi);
            Ok(AnticipatedDriver::new(
                c1,
                c2,
                move |_, y, z, ya, za, _| av * y + mu * ya + b.dot(z) + sigma.dot(za) + phi,
            ))
        }
        "delayed-y" => {
            let p: DelayedYParams = params(cfg)?;
            let s = p.scale;
            Ok(AnticipatedDriver::new(s.abs(), 0.0, move |_, _, _, ya, _, _| {
                s * ya
            }))
        }
        other => Err(Error::Config(format!(
            "unknown anticipated driver '{other}'"
        ))),
    }
}

/// SDDE coefficients for the duality check come from the same parameter
/// block as the linear anticipated driver.
pub fn build_sdde_coefficients(
    cfg: &DriverConfig,
    a: &RateMatrix,
    theta: f64,
) -> Result<SddeCoefficients<'static>> {
    if cfg.name != "linear-anticipated" {
        return Err(Error::Config(format!(
            "verify-duality needs the 'linear-anticipated' driver, got '{}'",
            cfg.name
        )));
    }
    let n = a.n_states();
    let p: LinearAnticipatedParams = params(cfg)?;
    let b = vector_or_zeros(&p.b, n, "b")?;
    let sigma = vector_or_zeros(&p.sigma, n, "sigma")?;
    Ok(SddeCoefficients::constant(p.a, p.mu, b, sigma, p.phi, theta))
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "form", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DelayForm {
    Constant { value: f64 },
    /// `δ(t) = clamp(base + slope t, 0, T + K - t)`.
    AffineCapped { base: f64, slope: f64 },
}

impl DelayForm {
    fn build(&self, end: f64) -> Box<dyn Fn(f64) -> f64 + 'static> {
        match *self {
            DelayForm::Constant { value } => Box::new(move |_| value),
            DelayForm::AffineCapped { base, slope } => {
                Box::new(move |t| (base + slope * t).clamp(0.0, (end - t).max(0.0)))
            }
        }
    }

    fn default_l(&self) -> f64 {
        match *self {
            DelayForm::Constant { .. } => 1.0,
            DelayForm::AffineCapped { slope, .. } => {
                if slope > -1.0 {
                    (1.0 / (1.0 + slope)).max(1.0)
                } else {
                    f64::INFINITY
                }
            }
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelayConfig {
    pub delta: DelayForm,
    #[serde(default)]
    pub zeta: Option<DelayForm>,
    pub k: f64,
    #[serde(default)]
    pub l: Option<f64>,
}

impl DelayConfig {
    pub fn build(&self, horizon: f64) -> Result<DelaySpec<'static>> {
        if self.k < 0.0 {
            return Err(Error::Config("K must be nonnegative".into()));
        }
        let end = horizon + self.k;
        let zeta_form = self.zeta.clone().unwrap_or_else(|| self.delta.clone());
        let l = self
            .l
            .unwrap_or_else(|| self.delta.default_l().max(zeta_form.default_l()));
        if !l.is_finite() {
            return Err(Error::Config(
                "no finite L bound for this delay form; set 'l' explicitly".into(),
            ));
        }
        let delta = self.delta.build(end);
        let zeta = zeta_form.build(end);
        Ok(DelaySpec {
            delta,
            zeta,
            k_extend: self.k,
            l_bound: l,
        })
    }

    /// Constant-delay value when both delays are the same constant.
    pub fn constant_theta(&self) -> Option<f64> {
        match (&self.delta, &self.zeta) {
            (DelayForm::Constant { value }, None) => Some(*value),
            (DelayForm::Constant { value }, Some(DelayForm::Constant { value: z }))
                if (value - z).abs() == 0.0 =>
            {
                Some(*value)
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum XiForm {
    Constant { value: f64 },
    StateValues { values: Vec<f64> },
    /// `ξ(t, i) = base[i] + slope[i] (t - T)`.
    AffineTime { base: Vec<f64>, slope: Vec<f64> },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EtaForm {
    Zero,
    StateVectors { vectors: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerminalConfig {
    pub xi: XiForm,
    #[serde(default)]
    pub eta: Option<EtaForm>,
}

impl TerminalConfig {
    pub fn build(&self, horizon: f64, n_states: usize) -> Result<TerminalSegment<'static>> {
        let xi: Box<dyn Fn(f64, usize) -> f64> = match &self.xi {
            XiForm::Constant { value } => {
                let v = *value;
                Box::new(move |_, _| v)
            }
            XiForm::StateValues { values } => {
                if values.len() != n_states {
                    return Err(Error::Config(
                        "xi state-values length must match the state count".into(),
                    ));
                }
                let v = values.clone();
                Box::new(move |_, i| v[i])
            }
            XiForm::AffineTime { base, slope } => {
                if base.len() != n_states || slope.len() != n_states {
                    return Err(Error::Config(
                        "xi affine-time vectors must match the state count".into(),
                    ));
                }
                let (b, s) = (base.clone(), slope.clone());
                Box::new(move |t, i| b[i] + s[i] * (t - horizon))
            }
        };
        let eta: Box<dyn Fn(f64, usize) -> DVector<f64>> =
            match self.eta.as_ref().unwrap_or(&EtaForm::Zero) {
                EtaForm::Zero => Box::new(move |_, _| DVector::zeros(n_states)),
                EtaForm::StateVectors { vectors } => {
                    if vectors.len() != n_states || vectors.iter().any(|v| v.len() != n_states) {
                        return Err(Error::Config(
                            "eta state-vectors must be an NxN table".into(),
                        ));
                    }
                    let vm = vectors.clone();
                    Box::new(move |_, i| DVector::from_vec(vm[i].clone()))
                }
            };
        Ok(TerminalSegment { xi, eta })
    }
}

/// Parse a config from JSON text.
pub fn parse(text: &str) -> Result<RunConfig> {
    serde_json::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))
}
