//! Run configuration: TOML with dotted sections, explicit defaults for every
//! numeric, and `key=value` overrides applied before validation.

use std::path::Path;

use delay_control::coeffs::Poly;
use delay_control::control::ControlDomain;
use delay_control::grid::{HistoryPath, TimeGrid};
use delay_control::hamiltonian::GVariant;
use delay_control::hjb::{HjbGridConfig, Storage};
use delay_control::lsmc::{RegressionBasis, Scheme};
use delay_control::variational::validate_offsets;
use serde::{Deserialize, Serialize};

/// Field-level configuration problems; maps to exit code 2.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub Vec<String>);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (i, m) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{m}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

impl ConfigError {
    fn one(msg: impl Into<String>) -> Self {
        Self(vec![msg.into()])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Required, either here or via `--seed`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub instance: Instance,
    pub numerics: Numerics,
    pub grid: Grid,
    pub control: Control,
    pub comparison: Comparison,
    pub moments: Moments,
    pub mp: Mp,
    pub duality: Duality,
    pub verify: Verify,
    pub scaling: Scaling,
    pub output: Output,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            instance: Instance::default(),
            numerics: Numerics::default(),
            grid: Grid::default(),
            control: Control::default(),
            comparison: Comparison::default(),
            moments: Moments::default(),
            mp: Mp::default(),
            duality: Duality::default(),
            verify: Verify::default(),
            scaling: Scaling::default(),
            output: Output::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Instance {
    /// zero | constant | linear | bilinear | gbm | linear_quadratic
    pub family: String,
    pub lambda: f64,
    pub delay: f64,
    pub s: f64,
    pub horizon: f64,
    pub history: History,
    /// Per-coefficient overrides on top of the family preset.
    pub coeffs: Coeffs,
}

impl Default for Instance {
    fn default() -> Self {
        Self {
            family: "linear_quadratic".into(),
            lambda: 0.2,
            delay: 0.2,
            s: 0.0,
            horizon: 1.0,
            history: History::default(),
            coeffs: Coeffs::default(),
        }
    }
}

/// `phi(tau) = value + slope * tau` on `[-delay, 0]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct History {
    pub value: f64,
    pub slope: f64,
}

impl Default for History {
    fn default() -> Self {
        Self { value: 0.5, slope: 0.0 }
    }
}

macro_rules! coeff_table {
    ($($f:ident),* $(,)?) => {
        /// Optional values for the polynomial family's coefficients.
        #[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
        #[serde(default, deny_unknown_fields)]
        pub struct Coeffs {
            $(#[serde(skip_serializing_if = "Option::is_none")] pub $f: Option<f64>,)*
        }

        impl Coeffs {
            pub fn apply(&self, p: &mut Poly<f64>) {
                $(if let Some(v) = self.$f { p.$f = v; })*
            }
        }
    };
}

coeff_table!(
    b0, bx, bx1, bx2, bu, bxx1, sat_cap, s0, sx, sx1, sx2, su, f0, fx, fx1, fx2, fy, fz, fu, qx, ru, c0, m, n, pxx
);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Numerics {
    pub dt: f64,
    pub n_paths: usize,
    pub basis_degree: usize,
    pub ridge: f64,
    /// one_step | multi_step
    pub scheme: String,
    pub u_min: f64,
    pub u_max: f64,
    pub n_u: usize,
    /// standard | girsanov | reduced
    pub variant: String,
}

impl Default for Numerics {
    fn default() -> Self {
        Self {
            dt: 0.01,
            n_paths: 100_000,
            basis_degree: 3,
            ridge: 1e-10,
            scheme: "multi_step".into(),
            u_min: -1.0,
            u_max: 1.0,
            n_u: 41,
            variant: "reduced".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grid {
    pub x_min: f64,
    pub x_max: f64,
    pub nx: usize,
    pub x1_min: f64,
    pub x1_max: f64,
    pub nx1: usize,
    pub n_slices: usize,
    /// 0 keeps every slice.
    pub storage_stride: usize,
}

impl Default for Grid {
    fn default() -> Self {
        Self { x_min: -2.0, x_max: 2.0, nx: 201, x1_min: -2.0, x1_max: 2.0, nx1: 101, n_slices: 200, storage_stride: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Control {
    /// hjb | constant | max | min
    pub kind: String,
    pub value: f64,
    /// Added on `[perturb_from, perturb_to)` and clamped to `U`.
    pub perturb_shift: f64,
    pub perturb_from: f64,
    pub perturb_to: f64,
}

impl Default for Control {
    fn default() -> Self {
        Self { kind: "hjb".into(), value: 0.0, perturb_shift: 0.0, perturb_from: 0.0, perturb_to: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Comparison {
    /// Overrides turning the instance into the lower-drift partner.
    pub coeffs2: Coeffs,
    /// `phi2 = phi1 - history_gap`.
    pub history_gap: f64,
    /// Tolerance in units of `dt`.
    pub tol_dt: f64,
    /// Paths of each side written to the trajectory dumps.
    pub keep: usize,
}

impl Default for Comparison {
    fn default() -> Self {
        Self { coeffs2: Coeffs::default(), history_gap: 0.0, tol_dt: 10.0, keep: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Moments {
    pub orders: Vec<u32>,
}

impl Default for Moments {
    fn default() -> Self {
        Self { orders: vec![2, 4] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Mp {
    pub convexity_pairs: usize,
    pub time_samples: usize,
    pub paths: usize,
    pub rel_tol: f64,
    pub p3_tol_dt: f64,
}

impl Default for Mp {
    fn default() -> Self {
        Self { convexity_pairs: 10_000, time_samples: 10, paths: 2000, rel_tol: 1e-3, p3_tol_dt: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Duality {
    /// Sample every this many forward steps.
    pub step_every: usize,
    pub paths: usize,
    pub shift: f64,
    pub radius: usize,
    pub tol: f64,
    pub p3_tol_dt: f64,
    pub core_frac: f64,
    pub t_margin: f64,
    /// Verdict thresholds.
    pub max_median_rel_err: f64,
    pub min_super_fraction: f64,
}

impl Default for Duality {
    fn default() -> Self {
        Self {
            step_every: 10,
            paths: 200,
            shift: 0.0,
            radius: 2,
            tol: 0.25,
            p3_tol_dt: 10.0,
            core_frac: 0.8,
            t_margin: 0.1,
            max_median_rel_err: 0.05,
            min_super_fraction: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Verify {
    pub paths: usize,
    pub radius: usize,
    pub membership_tol: f64,
    pub membership_fraction: f64,
    pub grid_budget: f64,
    pub residual_every: usize,
    pub core_frac: f64,
    pub min_coverage: f64,
}

impl Default for Verify {
    fn default() -> Self {
        let d = delay_control::connect::VerifyConfig::default();
        Self {
            paths: d.paths,
            radius: d.radius,
            membership_tol: d.membership_tol,
            membership_fraction: d.membership_fraction,
            grid_budget: d.grid_budget,
            residual_every: d.residual_every,
            core_frac: d.core_frac,
            min_coverage: d.min_coverage,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scaling {
    /// remainder | duality
    pub mode: String,
    /// Perturbation times.
    pub times: Vec<f64>,
    pub offsets: Vec<f64>,
    pub p: u32,
}

impl Default for Scaling {
    fn default() -> Self {
        Self { mode: "remainder".into(), times: vec![0.2, 0.4, 0.6], offsets: vec![0.2, 0.1, 0.05, 0.025], p: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Output {
    /// Paths written by `simulate`.
    pub dump_paths: usize,
    /// Every n-th stored slice in `value.csv`.
    pub hjb_every: usize,
    /// Write SVG plots next to the CSV files.
    pub plots: bool,
}

impl Default for Output {
    fn default() -> Self {
        Self { dump_paths: 20, hjb_every: 10, plots: false }
    }
}

/// Parse `text`, apply `key=value` overrides and deserialize.
pub fn load(text: &str, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let mut root: toml::Table =
        toml::from_str(text).map_err(|e| ConfigError::one(format!("config: {}", e.message())))?;
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| ConfigError::one(format!("--set {o}: expected key=value")))?;
        set_dotted(&mut root, key.trim(), parse_value(raw.trim()))?;
    }
    // Deserializing from text keeps line and key context in the diagnostics.
    let merged = toml::to_string(&root).expect("table serializes");
    toml::from_str(&merged).map_err(|e| ConfigError::one(format!("config: {}", e.to_string().trim_end())))
}

pub fn load_file(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| ConfigError::one(format!("--config {}: {e}", p.display())))?,
        None => String::new(),
    };
    load(&text, overrides)
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_dotted(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), ConfigError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::one(format!("--set {key}: empty key segment")));
    }
    let mut t = root;
    for p in &parts[..parts.len() - 1] {
        let e = t.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        t = e
            .as_table_mut()
            .ok_or_else(|| ConfigError::one(format!("--set {key}: '{p}' is not a section")))?;
    }
    t.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Checked, typed view of a [`RunConfig`].
pub struct Resolved {
    pub seed: u64,
    pub co: Poly<f64>,
    pub grid: TimeGrid<f64>,
    pub history: HistoryPath<f64>,
    pub domain: ControlDomain<f64>,
    pub basis: RegressionBasis,
    pub scheme: Scheme,
    pub variant: GVariant,
    pub hjb: HjbGridConfig<f64>,
}

pub fn family(name: &str, lambda: f64) -> Option<Poly<f64>> {
    Some(match name {
        "zero" => Poly::zero(lambda),
        "constant" => Poly::constant(lambda, 0.0, 0.0, 0.0, 0.0),
        "linear" => Poly::linear(lambda, [0.0; 4], [0.0; 4]),
        "bilinear" => Poly::bilinear(lambda, 1.0, 0.3),
        "gbm" => Poly::gbm(lambda, 0.1, 0.3),
        "linear_quadratic" => Poly::linear_quadratic(lambda, -0.1, 0.5, 0.2, 0.5, 1.0, 0.5, 0.0),
        _ => return None,
    })
}

impl RunConfig {
    /// Validate every section and build the typed objects.
    pub fn resolve(&self) -> Result<Resolved, ConfigError> {
        let mut errs = Vec::new();
        let i = &self.instance;
        let n = &self.numerics;
        let seed = self.seed.unwrap_or_else(|| {
            errs.push("seed: required (set `seed` or pass --seed)".into());
            0
        });
        let co = match family(&i.family, i.lambda) {
            Some(mut p) => {
                i.coeffs.apply(&mut p);
                p
            }
            None => {
                errs.push(format!("instance.family: unknown family '{}'", i.family));
                Poly::zero(i.lambda)
            }
        };
        if !i.lambda.is_finite() || i.lambda < 0.0 {
            errs.push("instance.lambda: must be finite and non-negative".into());
        }
        let grid = TimeGrid::new(i.s, i.horizon, n.dt, i.delay)
            .map_err(|e| errs.push(format!("numerics.dt / instance.delay / instance.horizon: {e}")))
            .ok();
        let history = grid.as_ref().and_then(|g| {
            let h = i.history.clone();
            HistoryPath::from_fn(g, |tau| h.value + h.slope * tau)
                .map_err(|e| errs.push(format!("instance.history: {e}")))
                .ok()
        });
        let domain = ControlDomain::new(n.u_min, n.u_max, n.n_u)
            .map_err(|e| errs.push(format!("numerics.u_min / u_max / n_u: {e}")))
            .ok();
        let basis = RegressionBasis::new(n.basis_degree, n.ridge)
            .map_err(|e| errs.push(format!("numerics.basis_degree / ridge: {e}")))
            .ok();
        let scheme = match n.scheme.as_str() {
            "one_step" => Scheme::OneStep,
            "multi_step" => Scheme::MultiStep,
            s => {
                errs.push(format!("numerics.scheme: expected one_step or multi_step, got '{s}'"));
                Scheme::OneStep
            }
        };
        let variant = match n.variant.as_str() {
            "standard" => GVariant::Standard,
            "girsanov" => GVariant::Girsanov,
            "reduced" => GVariant::Reduced,
            s => {
                errs.push(format!("numerics.variant: expected standard, girsanov or reduced, got '{s}'"));
                GVariant::Standard
            }
        };
        if n.n_paths == 0 {
            errs.push("numerics.n_paths: must be positive".into());
        }
        let g = &self.grid;
        if g.nx < 5 || g.nx1 < 2 || g.n_slices == 0 {
            errs.push("grid: need nx >= 5, nx1 >= 2 and n_slices >= 1".into());
        }
        if !(g.x_max > g.x_min) || !(g.x1_max > g.x1_min) {
            errs.push("grid: empty extents".into());
        }
        if let Some(h) = &history {
            let (lo, hi) = h.samples().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
            if lo < g.x_min || hi > g.x_max {
                errs.push(format!("grid.x_min / x_max: history range [{lo}, {hi}] is not covered"));
            }
        }
        if !["hjb", "constant", "max", "min"].contains(&self.control.kind.as_str()) {
            errs.push(format!("control.kind: expected hjb, constant, max or min, got '{}'", self.control.kind));
        }
        if self.control.kind == "constant" && !(self.control.value >= n.u_min && self.control.value <= n.u_max) {
            errs.push(format!("control.value: {} lies outside [u_min, u_max]", self.control.value));
        }
        if !["remainder", "duality"].contains(&self.scaling.mode.as_str()) {
            errs.push(format!("scaling.mode: expected remainder or duality, got '{}'", self.scaling.mode));
        }
        if let Err(e) = validate_offsets(&self.scaling.offsets) {
            errs.push(format!("scaling.offsets: {e}"));
        }
        if let Some(t) = self.scaling.times.iter().find(|t| !(**t >= i.s && **t < i.horizon)) {
            errs.push(format!("scaling.times: {t} is outside [s, T)"));
        }
        if self.moments.orders.is_empty() || self.moments.orders.iter().any(|p| *p < 2 || p % 2 == 1) {
            errs.push("moments.orders: need even integers >= 2".into());
        }
        if self.output.hjb_every == 0 || self.duality.step_every == 0 {
            errs.push("output.hjb_every / duality.step_every: must be positive".into());
        }
        if !errs.is_empty() {
            return Err(ConfigError(errs));
        }
        let hjb = HjbGridConfig {
            x_min: g.x_min,
            x_max: g.x_max,
            nx: g.nx,
            x1_min: g.x1_min,
            x1_max: g.x1_max,
            nx1: g.nx1,
            s: i.s,
            horizon: i.horizon,
            n_slices: g.n_slices,
            delay: i.delay,
            storage: if g.storage_stride == 0 { Storage::All } else { Storage::Stride(g.storage_stride) },
        };
        Ok(Resolved {
            seed,
            co,
            grid: grid.expect("checked"),
            history: history.expect("checked"),
            domain: domain.expect("checked"),
            basis: basis.expect("checked"),
            scheme,
            variant,
            hjb,
        })
    }

    /// Canonical TOML of the full configuration, defaults included.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_need_only_a_seed() {
        let c = load("seed = 3", &[]).unwrap();
        assert!(c.resolve().is_ok());
        let e = load("", &[]).unwrap().resolve().err().unwrap();
        assert!(e.0[0].starts_with("seed"));
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let c = load(
            "seed = 1\n[numerics]\ndt = 0.02\n",
            &["numerics.n_paths=50".into(), "instance.coeffs.fz=0.3".into(), "control.kind=max".into()],
        )
        .unwrap();
        assert_eq!(c.numerics.n_paths, 50);
        assert_eq!(c.numerics.dt, 0.02);
        assert_eq!(c.instance.coeffs.fz, Some(0.3));
        assert_eq!(c.control.kind, "max");
    }

    #[test]
    fn unknown_and_mistyped_fields_are_named() {
        let e = load("seed = 1\n[numerics]\nd_t = 0.1\n", &[]).unwrap_err();
        assert!(e.to_string().contains("d_t"), "{e}");
        let e = load("seed = 1\n[grid]\nnx = \"many\"\n", &[]).unwrap_err();
        assert!(e.to_string().contains("nx") || e.to_string().contains("integer"), "{e}");
        let e = load("seed = 1", &["numerics.dt=0.03".into()]).unwrap().resolve().err().unwrap();
        assert!(e.to_string().contains("numerics.dt"), "{e}");
    }

    #[test]
    fn round_trips_through_toml() {
        let c = load("seed = 9", &["instance.coeffs.qx=0".into()]).unwrap();
        let again = load(&c.to_toml(), &[]).unwrap();
        assert_eq!(c, again);
    }
}
