//! Experiment configuration: a TOML file plus command-line overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use bsvie_core::analysis::QuadratureRule;
use bsvie_core::condexp::{Projection, RegressionConfig};
use bsvie_core::model::catalog;
use bsvie_core::noise::{NoiseKind, DEFAULT_TREE_CAP};
use bsvie_core::scheme::oracle::BRUTE_FORCE_CAP;
use bsvie_core::scheme::Backend;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Solve,
    Converge,
    BsdeApprox,
    Moduli,
    Gronwall,
    OracleDiff,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::Solve => "solve",
            Suite::Converge => "converge",
            Suite::BsdeApprox => "bsde-approx",
            Suite::Moduli => "moduli",
            Suite::Gronwall => "gronwall",
            Suite::OracleDiff => "oracle-diff",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressionSection {
    pub degree: usize,
    pub ridge: f64,
    pub min_paths_per_coeff: usize,
    pub projection: Projection,
}

impl Default for RegressionSection {
    fn default() -> Self {
        let d = RegressionConfig::default();
        Self {
            degree: d.degree,
            ridge: d.ridge,
            min_paths_per_coeff: d.min_paths_per_coeff,
            projection: d.projection,
        }
    }
}

impl From<RegressionSection> for RegressionConfig {
    fn from(s: RegressionSection) -> Self {
        RegressionConfig {
            degree: s.degree,
            ridge: s.ridge,
            min_paths_per_coeff: s.min_paths_per_coeff,
            projection: s.projection,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// Lower bound on fitted slopes of squared functionals.
    pub min_slope: f64,
    /// Largest allowed oracle difference.
    pub oracle: f64,
    /// Largest allowed M-solution residual in tree mode.
    pub msolution: f64,
    /// Standard errors separating successive levels in monotonicity checks.
    pub z_score: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            min_slope: 0.8,
            oracle: 1e-10,
            msolution: 1e-12,
            z_score: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub instance: String,
    pub params: BTreeMap<String, f64>,
    pub levels: Vec<usize>,
    pub horizon: f64,
    pub noise: NoiseKind,
    pub mode: Backend,
    pub paths: usize,
    pub seed: u64,
    pub regression: RegressionSection,
    pub refinement: usize,
    pub quadrature: usize,
    pub rule: Option<QuadratureRule>,
    pub m_bound: f64,
    pub gronwall_cases: usize,
    pub output: PathBuf,
    pub suites: Vec<Suite>,
    pub tolerances: Tolerances,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            instance: String::new(),
            params: BTreeMap::new(),
            levels: vec![4, 8, 16],
            horizon: 1.0,
            noise: NoiseKind::Gaussian,
            mode: Backend::Lsmc,
            paths: 10_000,
            seed: 0,
            regression: RegressionSection::default(),
            refinement: 8,
            quadrature: 4,
            rule: None,
            m_bound: 1.0,
            gronwall_cases: 200,
            output: PathBuf::from("bsvie-out"),
            suites: Vec::new(),
            tolerances: Tolerances::default(),
        }
    }
}

/// Command-line values that replace config entries when present.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// TOML experiment file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub instance: Option<String>,
    /// Instance parameter, `name=value`; repeatable.
    #[arg(long = "param", value_parser = parse_param)]
    pub params: Vec<(String, f64)>,
    /// Comma-separated mesh sizes N.
    #[arg(long, value_delimiter = ',')]
    pub levels: Option<Vec<usize>>,
    #[arg(long)]
    pub horizon: Option<f64>,
    /// Number of Monte Carlo paths M.
    #[arg(long)]
    pub paths: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = ["gaussian", "binary"])]
    pub noise: Option<String>,
    #[arg(long, value_parser = ["tree", "lsmc"])]
    pub mode: Option<String>,
    /// Quadrature points per cell Q.
    #[arg(long)]
    pub quadrature: Option<usize>,
    /// Inner steps per outer cell R.
    #[arg(long)]
    pub refinement: Option<usize>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

fn parse_param(s: &str) -> Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected name=value, got `{s}`"))?;
    let v: f64 = v.trim().parse().map_err(|e| format!("parameter `{k}`: {e}"))?;
    Ok((k.trim().to_string(), v))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Reads `--config` if given and applies the remaining overrides.
    pub fn resolve(o: &Overrides) -> Result<Self, CliError> {
        let mut c = match &o.config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(v) = &o.instance {
            c.instance = v.clone();
        }
        for (k, v) in &o.params {
            c.params.insert(k.clone(), *v);
        }
        if let Some(v) = &o.levels {
            c.levels = v.clone();
        }
        if let Some(v) = o.horizon {
            c.horizon = v;
        }
        if let Some(v) = o.paths {
            c.paths = v;
        }
        if let Some(v) = o.seed {
            c.seed = v;
        }
        if let Some(v) = &o.noise {
            c.noise = v.parse().map_err(|e: bsvie_core::Error| CliError::Config(e.to_string()))?;
        }
        if let Some(v) = &o.mode {
            c.mode = v.parse().map_err(|e: bsvie_core::Error| CliError::Config(e.to_string()))?;
        }
        if let Some(v) = o.quadrature {
            c.quadrature = v;
        }
        if let Some(v) = o.refinement {
            c.refinement = v;
        }
        if let Some(v) = &o.output {
            c.output = v.clone();
        }
        Ok(c)
    }

    pub fn regression(&self) -> RegressionConfig {
        self.regression.into()
    }

    pub fn rule(&self) -> QuadratureRule {
        self.rule.unwrap_or_else(|| QuadratureRule::default_for(self.quadrature))
    }

    /// Checks everything that can be checked before any computation.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.suites.is_empty() {
            return Ok(());
        }
        let needs_instance = self.suites.iter().any(|s| *s != Suite::Gronwall);
        if !needs_instance {
            return Ok(());
        }
        if self.instance.is_empty() {
            return bad("no instance given".into());
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad(format!("horizon must be positive, got {}", self.horizon));
        }
        let inst = catalog::<f64>(&self.instance, &self.params, self.horizon).map_err(|e| CliError::Config(e.to_string()))?;
        if self.levels.is_empty() {
            return bad("levels must have at least one entry".into());
        }
        if self.levels.iter().any(|&n| n < 2) {
            return bad("every level needs N >= 2".into());
        }
        if self.levels.windows(2).any(|w| w[1] <= w[0]) {
            return bad("levels must be strictly increasing".into());
        }
        if self.paths == 0 {
            return bad("paths must be positive".into());
        }
        if self.quadrature == 0 || self.refinement == 0 {
            return bad("quadrature and refinement must be positive".into());
        }
        if self.rule() == QuadratureRule::Simpson && self.quadrature % 2 != 0 {
            return bad(format!("Simpson's rule needs an even quadrature count, got {}", self.quadrature));
        }
        self.regression().validate().map_err(|e| CliError::Config(e.to_string()))?;
        let wants = |s: Suite| self.suites.contains(&s);
        let needs_reference = wants(Suite::Converge) || wants(Suite::BsdeApprox) || wants(Suite::Moduli);
        if needs_reference && inst.closed_form().is_none() {
            return bad(format!("instance `{}` has no closed-form reference", self.instance));
        }
        if wants(Suite::Converge) && self.mode == Backend::Lsmc {
            let finest = *self.levels.last().unwrap();
            if let Some(n) = self.levels.iter().find(|&&n| finest % n != 0) {
                return bad(format!("coupled noise needs every level to divide the finest, {n} does not divide {finest}"));
            }
        }
        if wants(Suite::BsdeApprox) && self.regression.projection != Projection::Later {
            return bad("the BSDE system requires the later projection".into());
        }
        if wants(Suite::OracleDiff) {
            if let Some(n) = self.levels.iter().find(|&&n| n > BRUTE_FORCE_CAP) {
                return bad(format!("oracle-diff enumerates paths and needs N <= {BRUTE_FORCE_CAP}, got {n}"));
            }
        }
        if self.mode == Backend::Tree && wants(Suite::Solve) {
            if let Some(n) = self.levels.iter().find(|&&n| n > DEFAULT_TREE_CAP) {
                return bad(format!("tree solves need N <= {DEFAULT_TREE_CAP}, got {n}"));
            }
        }
        Ok(())
    }
}
