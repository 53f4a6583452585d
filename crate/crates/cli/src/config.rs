//! Run configuration: JSON schema, loading with field paths, validation.

use std::path::{Path, PathBuf};

use nash_bsde::bsde::{PicardParams, RegressionBasis};
use nash_bsde::density::AronsonParams;
use nash_bsde::game::{gbm_extension, lq_game, AffineQuadraticParams, GameSpec, LqGameParams};
use nash_bsde::mollify::MollifyParams;
use nash_bsde::payoff::FamilySizes;
use nash_bsde::sde::TimeGrid;
use serde::Deserialize;

pub const SCHEMA_VERSION: u32 = 1;

/// Overrides `monte_carlo.seed` when set.
pub const SEED_ENV: &str = "NASH_BSDE_SEED";

/// A config problem, reported as `field: message`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.field.is_empty() {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.field, self.message)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Builtin {
    Lq,
    GbmExtension,
}

/// Partial LQ coefficients layered over the default example. The horizon
/// always comes from `grid.horizon`.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqOverrides {
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub c: Option<f64>,
    pub theta: Option<[f64; 2]>,
    pub p: Option<[u32; 2]>,
    pub gamma: Option<[f64; 2]>,
    pub rho: Option<[f64; 2]>,
    pub terminal: Option<[Vec<f64>; 2]>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameConfig {
    pub builtin: Option<Builtin>,
    #[serde(default)]
    pub params: LqOverrides,
    pub inline: Option<AffineQuadraticParams>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default)]
    pub t0: f64,
    #[serde(alias = "T")]
    pub horizon: f64,
    pub n_steps: usize,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloConfig {
    pub n_paths: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MollifyConfig {
    pub n: u32,
    pub quad_points: usize,
    #[serde(default = "one")]
    pub mollifier_radius: f64,
}

impl From<MollifyConfig> for MollifyParams {
    fn from(c: MollifyConfig) -> Self {
        MollifyParams {
            n: c.n,
            quad_points: c.quad_points,
            mollifier_radius: c.mollifier_radius,
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PicardConfig {
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_picard_tol")]
    pub tol: f64,
}

impl Default for PicardConfig {
    fn default() -> Self {
        PicardConfig {
            max_iter: default_max_iter(),
            tol: default_picard_tol(),
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviationCounts {
    #[serde(default)]
    pub constants: usize,
    #[serde(default)]
    pub bang_bang: usize,
    #[serde(default)]
    pub perturbed_feedback: usize,
}

impl Default for DeviationCounts {
    fn default() -> Self {
        let s = FamilySizes::default();
        DeviationCounts {
            constants: s.constants,
            bang_bang: s.bang_bang,
            perturbed_feedback: s.perturbed,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NashConfig {
    #[serde(default)]
    pub counts: DeviationCounts,
    #[serde(default = "default_rel_tol")]
    pub rel_tol: f64,
    /// Paths of the evaluation bundle; defaults to `monte_carlo.n_paths`.
    pub n_paths: Option<usize>,
    /// Seed of the evaluation bundle; defaults to `monte_carlo.seed + 1`.
    pub seed: Option<u64>,
    /// Also estimate the equilibrium payoff by direct controlled simulation.
    #[serde(default)]
    pub direct_check: bool,
}

impl Default for NashConfig {
    fn default() -> Self {
        NashConfig {
            counts: DeviationCounts::default(),
            rel_tol: default_rel_tol(),
            n_paths: None,
            seed: None,
            direct_check: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IsaacsConfig {
    #[serde(default = "default_isaacs_samples")]
    pub samples: usize,
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    #[serde(default = "default_check_seed")]
    pub seed: u64,
}

impl Default for IsaacsConfig {
    fn default() -> Self {
        IsaacsConfig {
            samples: default_isaacs_samples(),
            grid_points: default_grid_points(),
            seed: default_check_seed(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    #[serde(default = "default_levels")]
    pub levels: Vec<u32>,
    #[serde(default = "default_quad_points")]
    pub quad_points: usize,
    #[serde(default = "one")]
    pub mollifier_radius: f64,
    #[serde(default = "default_generator_samples")]
    pub samples: usize,
    #[serde(default = "default_check_seed")]
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            levels: default_levels(),
            quad_points: default_quad_points(),
            mollifier_radius: 1.0,
            samples: default_generator_samples(),
            seed: default_check_seed(),
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DominationConfig {
    pub t1: f64,
    pub delta: f64,
    pub q: f64,
    pub level: u32,
    pub half_width: f64,
}

impl Default for DominationConfig {
    fn default() -> Self {
        DominationConfig {
            t1: 0.0,
            delta: 0.05,
            q: 2.0,
            level: 7,
            half_width: 6.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LognormalConfig {
    pub t: f64,
    pub x: f64,
    pub s: f64,
}

impl Default for LognormalConfig {
    fn default() -> Self {
        LognormalConfig { t: 0.0, x: 2.0, s: 1.0 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityConfig {
    /// Defaults to the tight constants of the standard Gaussian kernel.
    pub aronson: Option<AronsonParams>,
    #[serde(default = "default_s_lo")]
    pub s_lo: f64,
    #[serde(default = "one")]
    pub s_hi: f64,
    #[serde(default = "default_n_s")]
    pub n_s: usize,
    #[serde(default = "default_radius")]
    pub radius: f64,
    #[serde(default = "default_n_x")]
    pub n_x: usize,
    #[serde(default)]
    pub domination: DominationConfig,
    #[serde(default)]
    pub lognormal: LognormalConfig,
}

impl Default for DensityConfig {
    fn default() -> Self {
        DensityConfig {
            aronson: None,
            s_lo: default_s_lo(),
            s_hi: 1.0,
            n_s: default_n_s(),
            radius: default_radius(),
            n_x: default_n_x(),
            domination: DominationConfig::default(),
            lognormal: LognormalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportConfig {
    /// Paths written by `simulate`; the bundle itself may be larger.
    #[serde(default = "default_max_paths")]
    pub max_paths: usize,
}

impl Default for ExportConfig {
    fn default() -> Self {
        ExportConfig {
            max_paths: default_max_paths(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub game: GameConfig,
    pub x0: Vec<f64>,
    pub grid: GridConfig,
    pub monte_carlo: MonteCarloConfig,
    pub basis: RegressionBasis,
    pub mollify: Option<MollifyConfig>,
    #[serde(default)]
    pub picard: PicardConfig,
    #[serde(default)]
    pub nash: NashConfig,
    #[serde(default)]
    pub isaacs: IsaacsConfig,
    #[serde(default)]
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub density: DensityConfig,
    #[serde(default)]
    pub export: ExportConfig,
    pub output_dir: PathBuf,
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}
fn one() -> f64 {
    1.0
}
fn default_max_iter() -> usize {
    10
}
fn default_picard_tol() -> f64 {
    1e-10
}
fn default_rel_tol() -> f64 {
    0.01
}
fn default_isaacs_samples() -> usize {
    100
}
fn default_grid_points() -> usize {
    201
}
fn default_check_seed() -> u64 {
    7
}
fn default_levels() -> Vec<u32> {
    vec![4, 8, 16]
}
fn default_quad_points() -> usize {
    4
}
fn default_generator_samples() -> usize {
    500
}
fn default_s_lo() -> f64 {
    0.05
}
fn default_n_s() -> usize {
    8
}
fn default_radius() -> f64 {
    4.0
}
fn default_n_x() -> usize {
    41
}
fn default_max_paths() -> usize {
    1000
}

impl RunConfig {
    /// Parses `text`; errors carry the JSON path of the offending field.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let mut field = if path == "." { String::new() } else { path };
            let message = e.inner().to_string();
            // serde reports a missing key at its parent; name the key itself
            if let Some(key) = message
                .strip_prefix("missing field `")
                .and_then(|rest| rest.split('`').next())
            {
                field = if field.is_empty() { key.to_string() } else { format!("{field}.{key}") };
            }
            ConfigError::new(field, message)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new("", format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies `NASH_BSDE_SEED` if it is set.
    pub fn apply_seed_override(&mut self, value: Option<String>) -> Result<(), ConfigError> {
        if let Some(v) = value {
            self.monte_carlo.seed = v.trim().parse().map_err(|_| {
                ConfigError::new(SEED_ENV, format!("expected an unsigned 64-bit integer, got {v:?}"))
            })?;
        }
        Ok(())
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::new(
                "schema_version",
                format!("unsupported version {} (expected {SCHEMA_VERSION})", self.schema_version),
            ));
        }
        let g = &self.grid;
        finite("grid.t0", g.t0)?;
        finite("grid.horizon", g.horizon)?;
        if !(g.horizon > g.t0) {
            return Err(ConfigError::new("grid.horizon", "must exceed grid.t0"));
        }
        if g.n_steps == 0 {
            return Err(ConfigError::new("grid.n_steps", "must be >= 1"));
        }
        if self.x0.is_empty() {
            return Err(ConfigError::new("x0", "must be non-empty"));
        }
        for (i, v) in self.x0.iter().enumerate() {
            finite(&format!("x0[{i}]"), *v)?;
        }
        if self.monte_carlo.n_paths < 2 {
            return Err(ConfigError::new("monte_carlo.n_paths", "must be >= 2"));
        }
        let p = &self.picard;
        if p.max_iter == 0 {
            return Err(ConfigError::new("picard.max_iter", "must be >= 1"));
        }
        if !(p.tol >= 0.0) {
            return Err(ConfigError::new("picard.tol", "must be >= 0"));
        }
        if let Some(m) = self.mollify {
            MollifyParams::from(m)
                .validate()
                .map_err(|e| ConfigError::new("mollify", e.to_string()))?;
        }
        let n = &self.nash;
        if !(n.rel_tol >= 0.0 && n.rel_tol.is_finite()) {
            return Err(ConfigError::new("nash.rel_tol", "must be finite and >= 0"));
        }
        if n.n_paths.is_some_and(|v| v < 2) {
            return Err(ConfigError::new("nash.n_paths", "must be >= 2"));
        }
        let c = n.counts;
        if c.constants + c.bang_bang + c.perturbed_feedback == 0 {
            return Err(ConfigError::new("nash.counts", "at least one deviation is required"));
        }
        if self.isaacs.grid_points < 2 {
            return Err(ConfigError::new("isaacs.grid_points", "must be >= 2"));
        }
        if self.generator.levels.is_empty() || self.generator.levels.contains(&0) {
            return Err(ConfigError::new("generator.levels", "needs at least one level, all >= 1"));
        }
        let d = &self.density;
        if !(d.s_lo > 0.0 && d.s_hi >= d.s_lo) {
            return Err(ConfigError::new("density.s_lo", "need 0 < s_lo <= s_hi"));
        }
        if d.n_s == 0 || d.n_x == 0 {
            return Err(ConfigError::new("density.n_s", "grid sizes must be >= 1"));
        }
        if let Some(a) = d.aronson {
            a.validate().map_err(|e| ConfigError::new("density.aronson", e.to_string()))?;
        }
        let dom = d.domination;
        if !(dom.half_width > 0.0) {
            return Err(ConfigError::new("density.domination.half_width", "must be > 0"));
        }
        if !(dom.t1 >= 0.0 && dom.delta > 0.0 && g.t0 + dom.t1 + dom.delta <= g.horizon) {
            return Err(ConfigError::new(
                "density.domination.delta",
                "need t1 >= 0, delta > 0 and t0 + t1 + delta <= horizon",
            ));
        }
        if !(dom.q > 1.0) {
            return Err(ConfigError::new("density.domination.q", "must be > 1"));
        }
        if dom.level < 2 {
            return Err(ConfigError::new("density.domination.level", "must be >= 2"));
        }
        for &n in &self.generator.levels {
            let params = MollifyParams {
                n,
                quad_points: self.generator.quad_points,
                mollifier_radius: self.generator.mollifier_radius,
            };
            params
                .validate()
                .map_err(|e| ConfigError::new("generator", e.to_string()))?;
        }
        match (&self.game.builtin, &self.game.inline) {
            (Some(_), Some(_)) => {
                return Err(ConfigError::new("game", "set either `builtin` or `inline`, not both"));
            }
            (None, None) => return Err(ConfigError::new("game", "missing `builtin` or `inline`")),
            (None, Some(inline)) => {
                if (inline.horizon - g.horizon).abs() > 1e-12 {
                    return Err(ConfigError::new(
                        "game.inline.horizon",
                        format!("must equal grid.horizon ({})", g.horizon),
                    ));
                }
            }
            (Some(_), None) => {}
        }
        let spec = self.build_game()?;
        if self.x0.len() != spec.dim {
            return Err(ConfigError::new(
                "x0",
                format!("has {} entries but the game state has dimension {}", self.x0.len(), spec.dim),
            ));
        }
        self.basis
            .validate(spec.dim, self.monte_carlo.n_paths)
            .map_err(|e| ConfigError::new("basis", e.to_string()))?;
        Ok(())
    }

    pub fn lq_params(&self) -> LqGameParams {
        let o = &self.game.params;
        let mut p = LqGameParams::reference_example();
        p.a = o.a.unwrap_or(p.a);
        p.b = o.b.unwrap_or(p.b);
        p.c = o.c.unwrap_or(p.c);
        p.theta = o.theta.unwrap_or(p.theta);
        p.p = o.p.unwrap_or(p.p);
        p.gamma = o.gamma.unwrap_or(p.gamma);
        p.rho = o.rho.unwrap_or(p.rho);
        if let Some(t) = &o.terminal {
            p.terminal = t.clone();
        }
        p.horizon = self.grid.horizon;
        p
    }

    pub fn build_game(&self) -> Result<GameSpec, ConfigError> {
        match (&self.game.builtin, &self.game.inline) {
            (Some(Builtin::Lq), _) => {
                lq_game(&self.lq_params()).map_err(|e| ConfigError::new("game.params", e.to_string()))
            }
            (Some(Builtin::GbmExtension), _) => {
                gbm_extension(&self.lq_params()).map_err(|e| ConfigError::new("game.params", e.to_string()))
            }
            (None, Some(inline)) => inline
                .build()
                .map_err(|e| ConfigError::new("game.inline", e.to_string())),
            (None, None) => Err(ConfigError::new("game", "missing `builtin` or `inline`")),
        }
    }

    pub fn time_grid(&self) -> TimeGrid {
        TimeGrid::new(self.grid.t0, self.grid.horizon, self.grid.n_steps).expect("validated grid")
    }

    pub fn picard_params(&self) -> PicardParams {
        PicardParams {
            max_iter: self.picard.max_iter,
            tol: self.picard.tol,
        }
    }

    pub fn nash_paths(&self) -> usize {
        self.nash.n_paths.unwrap_or(self.monte_carlo.n_paths)
    }

    pub fn nash_seed(&self) -> u64 {
        self.nash.seed.unwrap_or(self.monte_carlo.seed.wrapping_add(1))
    }

    pub fn family_sizes(&self) -> FamilySizes {
        let c = self.nash.counts;
        FamilySizes {
            constants: c.constants,
            bang_bang: c.bang_bang,
            perturbed: c.perturbed_feedback,
        }
    }

    pub fn aronson_params(&self, dim: usize) -> AronsonParams {
        self.density
            .aronson
            .unwrap_or_else(|| AronsonParams::tight_standard_gaussian(dim))
    }
}

fn finite(field: &str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(ConfigError::new(field, "must be finite"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "game": {"builtin": "lq"},
        "x0": [0.0],
        "grid": {"horizon": 1.0, "n_steps": 10},
        "monte_carlo": {"n_paths": 1000, "seed": 3},
        "basis": {"kind": "global_poly", "degree": 2},
        "output_dir": "out"
    }"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.schema_version, SCHEMA_VERSION);
        assert_eq!(cfg.nash.counts.constants, 9);
        assert_eq!(cfg.isaacs.grid_points, 201);
        assert_eq!(cfg.generator.levels, vec![4, 8, 16]);
        assert_eq!(cfg.nash_seed(), 4);
        assert_eq!(cfg.lq_params(), LqGameParams::reference_example());
    }

    #[test]
    fn missing_field_is_named() {
        let text = MINIMAL.replace(r#", "n_steps": 10"#, "");
        let err = RunConfig::parse(&text).unwrap_err();
        assert_eq!(err.field, "grid.n_steps");
        assert!(err.to_string().starts_with("grid.n_steps: missing field"), "{err}");
    }

    #[test]
    fn wrong_type_reports_nested_path() {
        let text = MINIMAL.replace(r#""n_paths": 1000"#, r#""n_paths": "many""#);
        let err = RunConfig::parse(&text).unwrap_err();
        assert_eq!(err.field, "monte_carlo.n_paths");
    }

    #[test]
    fn unknown_field_is_rejected() {
        let text = MINIMAL.replace(r#""n_steps": 10"#, r#""n_steps": 10, "nsteps": 5"#);
        assert_eq!(RunConfig::parse(&text).unwrap_err().field, "grid.nsteps");
    }

    #[test]
    fn semantic_checks_name_fields() {
        let text = MINIMAL.replace(r#""n_steps": 10"#, r#""n_steps": 0"#);
        assert_eq!(RunConfig::parse(&text).unwrap_err().field, "grid.n_steps");
        let text = MINIMAL.replace(r#""x0": [0.0]"#, r#""x0": [0.0, 1.0]"#);
        assert_eq!(RunConfig::parse(&text).unwrap_err().field, "x0");
        let text = MINIMAL.replace(r#""n_paths": 1000"#, r#""n_paths": 20"#);
        assert_eq!(RunConfig::parse(&text).unwrap_err().field, "basis");
    }

    #[test]
    fn overrides_and_seed_env() {
        let text = MINIMAL.replace(r#""builtin": "lq""#, r#""builtin": "lq", "params": {"a": 0.5}"#);
        let mut cfg = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg.lq_params().a, 0.5);
        cfg.apply_seed_override(Some("18446744073709551615".into())).unwrap();
        assert_eq!(cfg.monte_carlo.seed, u64::MAX);
        assert!(cfg.apply_seed_override(Some("-1".into())).is_err());
    }
}
