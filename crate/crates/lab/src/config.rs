//! Run configuration: one TOML document per run, optionally overridden by
//! command-line flags. Probabilities and prices are read as exact
//! rationals ("3/10", "0.3" or plain TOML numbers) and validated before any
//! computation starts.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use num_rational::Ratio;
use num_traits::{CheckedAdd, CheckedDiv, CheckedSub, One, Zero};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use stochknap_core::diffusion::CoefficientMode;
use stochknap_core::fluid::min_stable_nx;
use stochknap_core::loss::SingleAxis;
use stochknap_core::multidim::min_stable_time_cells;
use stochknap_core::{Atom, DemandDistribution, ExponentialLoss, GridSpec, MultiAtom, MultiDemandDistribution, MultiGridSpec, TriangularPriceLoss};

use crate::error::{invalid, LabError, LabResult};

pub type Rational = Ratio<i128>;

const MAX_DIGITS: usize = 30;

/// A rational number read from a configuration value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exact(pub Rational);

impl Exact {
    pub fn to_f64(&self) -> f64 {
        *self.0.numer() as f64 / *self.0.denom() as f64
    }
}

impl fmt::Display for Exact {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_integer() {
            write!(f, "{}", self.0.numer())
        } else {
            write!(f, "{}/{}", self.0.numer(), self.0.denom())
        }
    }
}

impl FromStr for Exact {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        let r = match s.split_once('/') {
            Some((a, b)) => {
                let (n, d) = (parse_decimal(a)?, parse_decimal(b)?);
                if d.is_zero() {
                    return Err(format!("zero denominator in {s:?}"));
                }
                n.checked_div(&d).ok_or_else(|| format!("{s:?} overflows"))?
            }
            None => parse_decimal(s)?,
        };
        Ok(Exact(r))
    }
}

fn pow10(k: u32) -> Option<i128> {
    10i128.checked_pow(k)
}

/// Exact value of a decimal literal with optional sign, fraction and
/// exponent.
fn parse_decimal(s: &str) -> Result<Rational, String> {
    let s = s.trim();
    let bad = || format!("not a number: {s:?}");
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    let (mantissa, exp) = match body.find(['e', 'E']) {
        Some(i) => (&body[..i], body[i + 1..].parse::<i32>().map_err(|_| bad())?),
        None => (body, 0),
    };
    let (int, frac) = mantissa.split_once('.').unwrap_or((mantissa, ""));
    if int.is_empty() && frac.is_empty() {
        return Err(bad());
    }
    if !int.chars().chain(frac.chars()).all(|c| c.is_ascii_digit()) {
        return Err(bad());
    }
    let digits = format!("{int}{frac}");
    let digits = digits.trim_start_matches('0');
    if digits.len() > MAX_DIGITS {
        return Err(format!("{s:?} has more than {MAX_DIGITS} significant digits"));
    }
    let mut n: i128 = if digits.is_empty() { 0 } else { digits.parse().map_err(|_| bad())? };
    if neg {
        n = -n;
    }
    let scale = exp - frac.len() as i32;
    if scale.unsigned_abs() as usize > MAX_DIGITS {
        return Err(format!("exponent of {s:?} is out of range"));
    }
    let p = pow10(scale.unsigned_abs()).ok_or_else(bad)?;
    if scale >= 0 {
        Ok(Rational::from_integer(n.checked_mul(p).ok_or_else(|| format!("{s:?} overflows"))?))
    } else {
        Ok(Rational::new(n, p))
    }
}

impl Serialize for Exact {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Exact {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(i64),
            Float(f64),
            Text(String),
        }
        let text = match Raw::deserialize(d)? {
            Raw::Int(i) => i.to_string(),
            Raw::Float(x) if x.is_finite() => format!("{x}"),
            Raw::Float(x) => return Err(serde::de::Error::custom(format!("{x} is not a finite number"))),
            Raw::Text(t) => t,
        };
        text.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    DpCheck,
    VarianceScaling,
    FluidConvergence,
    DiffusionCompare,
    Multi,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::DpCheck => "dp-check",
            Kind::VarianceScaling => "variance-scaling",
            Kind::FluidConvergence => "fluid-convergence",
            Kind::DiffusionCompare => "diffusion-compare",
            Kind::Multi => "multi",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    AcceptProb,
    VerbatimG,
}

impl Mode {
    pub fn coefficient_mode(self) -> CoefficientMode {
        match self {
            Mode::AcceptProb => CoefficientMode::AcceptProb,
            Mode::VerbatimG => CoefficientMode::VerbatimLoss,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Demand,
    Triangular,
    Exponential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TerminalKind {
    /// `h = 0`
    Zero,
    /// `h(y) = y - y^2 / 4` (one-dimensional runs only)
    Quadratic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomSpec {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub price: Option<Exact>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reward: Option<Exact>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quantity: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quantities: Option<Vec<u32>>,
    pub prob: Exact,
}

/// Contents of a stand-alone distribution file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistributionFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub no_arrival: Option<Exact>,
    #[serde(default)]
    pub atoms: Vec<AtomSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceSpec {
    #[serde(default = "one")]
    pub dim: usize,
    /// Distribution file, relative to the configuration document.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distribution: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub no_arrival: Option<Exact>,
    #[serde(default)]
    pub atoms: Vec<AtomSpec>,
    /// Lattice capacity `W` (one-dimensional DP).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity: Option<usize>,
    /// Lattice capacities `(W^1, ..., W^m)` (multi DP).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacities: Option<Vec<usize>>,
    /// Lattice horizon `T`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    /// First lattice period `t`.
    #[serde(default)]
    pub start: usize,
    /// Scaled capacity `d` of the scaling experiments.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaled_capacity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaled_capacities: Option<Vec<f64>>,
    #[serde(default)]
    pub scaled_start: f64,
    /// Scaled horizon `X`.
    #[serde(default = "one_f")]
    pub scaled_horizon: f64,
}

fn one() -> usize {
    1
}

fn one_f() -> f64 {
    1.0
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nx: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ny: Option<usize>,
    /// Scaled capacity extent `Y` of one-dimensional fields.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_max: Option<f64>,
    /// Capacity extents of multi fields.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extents: Option<Vec<f64>>,
    /// Cells per capacity axis of multi fields.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cells: Option<Vec<usize>>,
    /// Time cells of multi fields.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_cells: Option<usize>,
}

/// Pass/fail thresholds; each defaults to the documented criterion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub dp_oracle: f64,
    pub unbiased_z: f64,
    pub variance_spread: f64,
    pub ladder_ratio: f64,
    pub accept_all: f64,
    pub monge_ampere: f64,
    pub parametric_pde: f64,
    /// Grid-vs-parametric tolerance per unit of grid step.
    pub parametric_agreement: f64,
    pub variance_ratio_low: f64,
    pub variance_ratio_high: f64,
    pub center_relative: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            dp_oracle: 1e-9,
            unbiased_z: 3.0,
            variance_spread: 2.0,
            ladder_ratio: 0.5,
            accept_all: 1e-6,
            monge_ampere: 0.05,
            parametric_pde: 1e-8,
            parametric_agreement: 0.05,
            variance_ratio_low: 0.85,
            variance_ratio_high: 1.15,
            center_relative: 0.02,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpCheckConfig {
    /// Random tiny instances checked against the enumeration oracle.
    pub random_instances: usize,
    /// Random instances whose simulated mean is checked against the DP.
    pub simulate_instances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FluidConfig {
    pub loss: LossKind,
    pub loss_top: f64,
    pub loss_scale: f64,
    pub loss_rate: f64,
    pub terminal: TerminalKind,
    /// Square grid sizes of the residual refinement study.
    pub refinements: Vec<usize>,
    /// Compare against the parametric construction (triangular loss with
    /// quadratic terminal data) and check the exponential special case.
    pub parametric: bool,
    pub parametric_samples: usize,
    /// Square grid of the accept-all region check; 0 disables it.
    pub accept_all_grid: usize,
}

impl Default for FluidConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Demand,
            loss_top: 1.0,
            loss_scale: 1.0,
            loss_rate: 2.0,
            terminal: TerminalKind::Zero,
            refinements: Vec::new(),
            parametric: false,
            parametric_samples: 100,
            accept_all_grid: 200,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    /// SDE paths (Monte Carlo paths come from `paths`).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sde_paths: Option<usize>,
    /// Scaled comparison times; defaults to quarters of the horizon.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub times: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    /// Run the comparison on batch demand (the unproven conjecture).
    pub allow_batch: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MultiConfig {
    /// Random tiny m = 2 instances checked against the multi oracle.
    pub oracle_instances: usize,
    /// Solve the fluid field and run the scaled-DP ladder.
    pub fluid: bool,
    /// SDE paths of the component system; 0 skips it.
    pub sde_paths: usize,
    /// For m = 1 instances, compare every operation with the 1-D modules.
    pub embedding_check: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<Kind>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paths: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale_ladder: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    pub instance: InstanceSpec,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub dp_check: DpCheckConfig,
    #[serde(default)]
    pub fluid: FluidConfig,
    #[serde(default)]
    pub diffusion: DiffusionConfig,
    #[serde(default)]
    pub multi: MultiConfig,
}

/// Command-line values that take precedence over the document.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub kind: Option<Kind>,
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
    pub mode: Option<Mode>,
    pub scale_ladder: Option<Vec<usize>>,
}

/// A validated configuration with every default made explicit, plus the
/// distributions it describes.
#[derive(Debug, Clone)]
pub struct Resolved {
    /// Canonical echo: defaults filled, distribution inlined, no output path.
    pub config: ExperimentConfig,
    pub kind: Kind,
    pub output: Option<PathBuf>,
    pub dist: Option<DemandDistribution>,
    pub multi: Option<MultiDemandDistribution>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> LabResult<Self> {
        toml::from_str(text).map_err(|e| invalid(format!("configuration: {e}")))
    }

    /// Reads a TOML document or the `config` section of a run manifest
    /// (`.json`). A relative distribution path is resolved against the
    /// document's directory.
    pub fn load(path: &Path) -> LabResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LabError::Io(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = if path.extension().is_some_and(|e| e == "json") {
            let value: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
            let section = value
                .get("config")
                .ok_or_else(|| invalid(format!("{} has no config section", path.display())))?;
            serde_json::from_value(section.clone()).map_err(|e| invalid(format!("{}: {e}", path.display())))?
        } else {
            Self::from_toml_str(&text)?
        };
        if let Some(d) = &cfg.instance.distribution {
            if d.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.instance.distribution = Some(base.join(d));
            }
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) -> LabResult<()> {
        if let Some(k) = o.kind {
            match self.kind {
                Some(existing) if existing != k => {
                    return Err(invalid(format!(
                        "configuration is a {} run, command asks for {}",
                        existing.name(),
                        k.name()
                    )))
                }
                _ => self.kind = Some(k),
            }
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(p) = &o.output {
            self.output = Some(p.clone());
        }
        if let Some(m) = o.mode {
            self.mode = Some(m);
        }
        if let Some(l) = &o.scale_ladder {
            self.scale_ladder = Some(l.clone());
        }
        Ok(())
    }

    pub fn resolve(mut self) -> LabResult<Resolved> {
        let kind = self.kind.ok_or_else(|| invalid("experiment kind is not set"))?;
        let output = self.output.take();
        if let Some(path) = self.instance.distribution.take() {
            if !self.instance.atoms.is_empty() || self.instance.no_arrival.is_some() {
                return Err(invalid("give either a distribution file or inline atoms, not both"));
            }
            let text = std::fs::read_to_string(&path)
                .map_err(|e| LabError::Io(format!("cannot read {}: {e}", path.display())))?;
            let file: DistributionFile =
                toml::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
            self.instance.atoms = file.atoms;
            self.instance.no_arrival = file.no_arrival;
        }
        let inst = &mut self.instance;
        if inst.dim == 0 {
            return Err(invalid("instance.dim must be >= 1"));
        }
        let needs_law = !(kind == Kind::FluidConvergence && self.fluid.loss != LossKind::Demand);
        let (dist, multi) = if needs_law || !inst.atoms.is_empty() {
            let no_arrival = complete_no_arrival(&inst.atoms, inst.no_arrival.clone())?;
            inst.no_arrival = Some(no_arrival.clone());
            if kind == Kind::Multi {
                (None, Some(build_multi(inst.dim, &inst.atoms, &no_arrival)?))
            } else {
                if inst.dim != 1 {
                    return Err(invalid(format!("{} runs are one-dimensional", kind.name())));
                }
                (Some(build_single(&inst.atoms, &no_arrival)?), None)
            }
        } else {
            (None, None)
        };

        positive_finite(inst.scaled_horizon, "instance.scaled_horizon")?;
        if !(inst.scaled_start >= 0.0 && inst.scaled_start <= inst.scaled_horizon) {
            return Err(invalid("instance.scaled_start must lie in [0, scaled_horizon]"));
        }
        let ladder_default: &[usize] = match kind {
            Kind::DpCheck => &[],
            Kind::VarianceScaling => &[25, 50, 100, 200],
            Kind::FluidConvergence => &[10, 20, 40, 80],
            Kind::DiffusionCompare => &[200],
            Kind::Multi => &[5, 10, 20],
        };
        let ladder = self.scale_ladder.get_or_insert_with(|| ladder_default.to_vec());
        if ladder.contains(&0) {
            return Err(invalid("scale factors must be positive"));
        }
        let paths_default = match kind {
            Kind::DpCheck | Kind::VarianceScaling => 100_000,
            _ => 10_000,
        };
        if *self.paths.get_or_insert(paths_default) == 0 {
            return Err(invalid("paths must be positive"));
        }
        self.mode.get_or_insert(Mode::AcceptProb);
        let t = &self.tolerances;
        for (v, name) in [
            (t.dp_oracle, "dp_oracle"),
            (t.unbiased_z, "unbiased_z"),
            (t.variance_spread, "variance_spread"),
            (t.ladder_ratio, "ladder_ratio"),
            (t.accept_all, "accept_all"),
            (t.monge_ampere, "monge_ampere"),
            (t.parametric_pde, "parametric_pde"),
            (t.parametric_agreement, "parametric_agreement"),
            (t.variance_ratio_low, "variance_ratio_low"),
            (t.variance_ratio_high, "variance_ratio_high"),
            (t.center_relative, "center_relative"),
        ] {
            positive_finite(v, &format!("tolerances.{name}"))?;
        }

        match kind {
            Kind::DpCheck => {
                let inst = &self.instance;
                let horizon = inst.horizon.ok_or_else(|| invalid("dp-check needs instance.horizon"))?;
                inst.capacity.ok_or_else(|| invalid("dp-check needs instance.capacity"))?;
                if horizon == 0 || inst.start > horizon {
                    return Err(invalid("need horizon >= 1 and start <= horizon"));
                }
            }
            Kind::VarianceScaling => {
                let d = self.instance.scaled_capacity.ok_or_else(|| invalid("variance-scaling needs instance.scaled_capacity"))?;
                nonnegative_finite(d, "instance.scaled_capacity")?;
            }
            Kind::FluidConvergence => self.resolve_fluid(dist.as_ref())?,
            Kind::DiffusionCompare => self.resolve_diffusion(dist.as_ref().expect("law is required"))?,
            Kind::Multi => self.resolve_multi(multi.as_ref().expect("law is required"))?,
        }
        Ok(Resolved { config: self, kind, output, dist, multi })
    }

    fn resolve_fluid(&mut self, dist: Option<&DemandDistribution>) -> LabResult<()> {
        let f = &self.fluid;
        positive_finite(f.loss_top, "fluid.loss_top")?;
        positive_finite(f.loss_scale, "fluid.loss_scale")?;
        positive_finite(f.loss_rate, "fluid.loss_rate")?;
        if f.parametric && (f.loss != LossKind::Triangular || f.terminal != TerminalKind::Quadratic || f.loss_top != 1.0) {
            return Err(invalid("fluid.parametric needs loss = \"triangular\", loss_top = 1 and terminal = \"quadratic\""));
        }
        if f.refinements.iter().any(|&n| n < 6) {
            return Err(invalid("fluid.refinements need at least 6 cells per axis"));
        }
        let x_max = self.instance.scaled_horizon;
        let y_max = *self.grid.y_max.get_or_insert(self.instance.scaled_capacity.unwrap_or(1.0));
        positive_finite(y_max, "grid.y_max")?;
        let ny = *self.grid.ny.get_or_insert(400);
        if ny == 0 {
            return Err(invalid("grid.ny must be positive"));
        }
        if self.grid.nx.is_none() {
            let probe = GridSpec::new(x_max, y_max, 1, ny);
            let terminal = terminal_fn(self.fluid.terminal);
            let need = match self.fluid.loss {
                LossKind::Demand => min_stable_nx(dist.expect("law is required"), terminal, probe),
                LossKind::Triangular => min_stable_nx(&TriangularPriceLoss::new(self.fluid.loss_top), terminal, probe),
                LossKind::Exponential => min_stable_nx(
                    &ExponentialLoss::new(self.fluid.loss_scale, self.fluid.loss_rate),
                    terminal,
                    probe,
                ),
            };
            self.grid.nx = Some(need.max(ny));
        }
        if self.grid.nx == Some(0) {
            return Err(invalid("grid.nx must be positive"));
        }
        Ok(())
    }

    fn resolve_diffusion(&mut self, dist: &DemandDistribution) -> LabResult<()> {
        let d = self.instance.scaled_capacity.ok_or_else(|| invalid("diffusion-compare needs instance.scaled_capacity"))?;
        nonnegative_finite(d, "instance.scaled_capacity")?;
        if self.instance.scaled_start != 0.0 {
            return Err(invalid("diffusion-compare starts at scaled time 0"));
        }
        if self.scale_ladder.as_ref().is_some_and(|l| l.len() != 1) {
            return Err(invalid("diffusion-compare takes a single scale n"));
        }
        let x_max = self.instance.scaled_horizon;
        let y_max = *self.grid.y_max.get_or_insert(d.max(f64::MIN_POSITIVE));
        if y_max < d {
            return Err(invalid("grid.y_max must cover instance.scaled_capacity"));
        }
        let ny = *self.grid.ny.get_or_insert(600);
        if self.grid.nx.is_none() {
            let need = min_stable_nx(dist, |_| 0.0, GridSpec::new(x_max, y_max, 1, ny));
            self.grid.nx = Some(need.max(ny));
        }
        let paths = self.paths.expect("filled above");
        let diff = &mut self.diffusion;
        if *diff.sde_paths.get_or_insert(paths) == 0 {
            return Err(invalid("diffusion.sde_paths must be positive"));
        }
        let times = diff
            .times
            .get_or_insert_with(|| [0.25, 0.5, 0.75, 1.0].iter().map(|q| q * x_max).collect());
        if times.is_empty() || times.iter().any(|&t| !(t > 0.0 && t <= x_max)) {
            return Err(invalid("diffusion.times must lie in (0, scaled_horizon]"));
        }
        let dt = *diff.dt.get_or_insert(x_max / 2048.0);
        positive_finite(dt, "diffusion.dt")?;
        if !dist.is_unit_demand() && !diff.allow_batch {
            return Err(invalid(
                "diffusion-compare needs unit demand; set diffusion.allow_batch = true for the conjecture mode",
            ));
        }
        Ok(())
    }

    fn resolve_multi(&mut self, dist: &MultiDemandDistribution) -> LabResult<()> {
        let m = dist.dim();
        let inst = &self.instance;
        if let Some(c) = &inst.capacities {
            if c.len() != m {
                return Err(invalid(format!("instance.capacities needs {m} entries")));
            }
            if inst.horizon.is_none_or(|h| h == 0) {
                return Err(invalid("a multi DP needs instance.horizon >= 1"));
            }
        }
        if self.multi.embedding_check && m != 1 {
            return Err(invalid("multi.embedding_check needs a one-dimensional instance"));
        }
        if self.multi.fluid || self.multi.sde_paths > 0 || self.multi.embedding_check {
            if m > stochknap_core::multidim::MAX_GRID_DIM {
                return Err(invalid(format!(
                    "the grid solver supports at most {} capacity axes",
                    stochknap_core::multidim::MAX_GRID_DIM
                )));
            }
            let default_extent = inst.scaled_capacities.clone().unwrap_or_else(|| vec![1.0; m]);
            let extents = self.grid.extents.get_or_insert(default_extent).clone();
            if extents.len() != m {
                return Err(invalid(format!("grid.extents needs {m} entries")));
            }
            for e in &extents {
                positive_finite(*e, "grid.extents")?;
            }
            let cells = self.grid.cells.get_or_insert(vec![80; m]).clone();
            if cells.len() != m || cells.contains(&0) {
                return Err(invalid(format!("grid.cells needs {m} positive entries")));
            }
            if self.grid.time_cells.is_none() {
                let mut all_extents = vec![self.instance.scaled_horizon];
                all_extents.extend(&extents);
                let mut all_cells = vec![1];
                all_cells.extend(&cells);
                let probe = MultiGridSpec::new(all_extents, all_cells);
                let need = min_stable_time_cells(dist, |_: &[f64]| 0.0, &probe)?;
                let need = if self.multi.embedding_check {
                    let single = to_single(dist);
                    need.max(min_stable_time_cells(&SingleAxis(&single), |_: &[f64]| 0.0, &probe)?)
                } else {
                    need
                };
                self.grid.time_cells = Some(need.max(*cells.iter().max().unwrap()));
            }
        }
        if self.multi.sde_paths > 0 {
            let d = self
                .instance
                .scaled_capacities
                .clone()
                .ok_or_else(|| invalid("multi SDE runs need instance.scaled_capacities"))?;
            let extents = self.grid.extents.as_ref().expect("filled above");
            if d.len() != m || d.iter().zip(extents).any(|(dk, e)| !(*dk >= 0.0 && dk <= e)) {
                return Err(invalid("instance.scaled_capacities must lie inside grid.extents"));
            }
            let dt = *self.diffusion.dt.get_or_insert(self.instance.scaled_horizon / 2048.0);
            positive_finite(dt, "diffusion.dt")?;
        }
        Ok(())
    }
}

/// One-dimensional view of an m = 1 multi law (reward becomes the price
/// of the single requested unit).
pub(crate) fn to_single(dist: &MultiDemandDistribution) -> DemandDistribution {
    let atoms = dist
        .atoms()
        .iter()
        .map(|a| Atom::new(a.reward / a.quantities[0] as f64, a.quantities[0], a.prob))
        .collect();
    DemandDistribution::new(atoms, dist.no_arrival_prob()).expect("a valid multi law stays valid")
}

pub(crate) fn terminal_fn(kind: TerminalKind) -> fn(f64) -> f64 {
    match kind {
        TerminalKind::Zero => |_| 0.0,
        TerminalKind::Quadratic => |y| y - y * y / 4.0,
    }
}

fn positive_finite(v: f64, name: &str) -> LabResult<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(invalid(format!("{name} must be positive and finite, got {v}")))
    }
}

fn nonnegative_finite(v: f64, name: &str) -> LabResult<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(invalid(format!("{name} must be nonnegative and finite, got {v}")))
    }
}

/// Checks the probabilities exactly and returns `no_arrival`, computing it
/// as the remaining mass when absent.
fn complete_no_arrival(atoms: &[AtomSpec], no_arrival: Option<Exact>) -> LabResult<Exact> {
    let mut total = Rational::zero();
    for a in atoms {
        if a.prob.0 < Rational::zero() || a.prob.0 > Rational::one() {
            return Err(invalid(format!("probability {} outside [0, 1]", a.prob)));
        }
        total = total.checked_add(&a.prob.0).ok_or_else(|| invalid("probability sum overflows"))?;
    }
    let rest = Rational::one().checked_sub(&total).ok_or_else(|| invalid("probability sum overflows"))?;
    match no_arrival {
        None if rest < Rational::zero() => Err(invalid(format!("atom probabilities sum to {}, more than 1", Exact(total)))),
        None => Ok(Exact(rest)),
        Some(z) => {
            let gap = rest.checked_sub(&z.0).ok_or_else(|| invalid("probability sum overflows"))?;
            if Exact(gap).to_f64().abs() > stochknap_core::demand::PROB_TOLERANCE {
                let sum = total.checked_add(&z.0).map(|s| Exact(s).to_string()).unwrap_or_default();
                return Err(invalid(format!("probabilities sum to {sum}, expected 1")));
            }
            Ok(z)
        }
    }
}

fn build_single(atoms: &[AtomSpec], no_arrival: &Exact) -> LabResult<DemandDistribution> {
    let mut out = Vec::with_capacity(atoms.len());
    for (i, a) in atoms.iter().enumerate() {
        if a.reward.is_some() || a.quantities.is_some() {
            return Err(invalid(format!("atom {i}: one-dimensional atoms take price and quantity")));
        }
        let price = a.price.as_ref().ok_or_else(|| invalid(format!("atom {i}: missing price")))?;
        let q = a.quantity.unwrap_or(1);
        out.push(Atom::new(price.to_f64(), q, a.prob.to_f64()));
    }
    Ok(DemandDistribution::new(out, no_arrival.to_f64())?)
}

fn build_multi(dim: usize, atoms: &[AtomSpec], no_arrival: &Exact) -> LabResult<MultiDemandDistribution> {
    let mut out = Vec::with_capacity(atoms.len());
    for (i, a) in atoms.iter().enumerate() {
        if a.price.is_some() || a.quantity.is_some() {
            return Err(invalid(format!("atom {i}: multi atoms take reward and quantities")));
        }
        let reward = a.reward.as_ref().ok_or_else(|| invalid(format!("atom {i}: missing reward")))?;
        let q = a.quantities.clone().ok_or_else(|| invalid(format!("atom {i}: missing quantities")))?;
        out.push(MultiAtom::new(reward.to_f64(), q, a.prob.to_f64()));
    }
    Ok(MultiDemandDistribution::new(dim, out, no_arrival.to_f64())?)
}
