//! Run configuration: TOML with one section per concern, unknown keys
//! rejected. Relative paths resolve against the config file's directory.

use std::path::{Path, PathBuf};

use biomoe_core::lifecycle::{RankMode, RankPolicy};
use biomoe_core::pair_filter::{FilterSpec, MetricRule};
use biomoe_core::trainer::{InterferenceConfig, SuiteConfig, TrainConfig};
use biomoe_core::{Error, MoeConfig, Result};
use serde::{Deserialize, Serialize};

/// Expert-layer settings that are not already fixed by the suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MoeSection {
    pub d_inner: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub width_factor: usize,
    pub tau: f64,
    pub noise_std: f64,
}

impl Default for MoeSection {
    fn default() -> Self {
        let d = MoeConfig::default();
        Self {
            d_inner: d.d_inner,
            num_experts: d.num_experts,
            top_k: d.top_k,
            width_factor: d.width_factor,
            tau: d.tau,
            noise_std: d.noise_std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RankSection {
    pub mode: RankMode,
    /// Total rank budget for the gradient-based and uniform modes.
    pub budget: usize,
}

impl Default for RankSection {
    fn default() -> Self {
        Self {
            mode: RankMode::ResultBased,
            budget: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckSection {
    pub tolerance: f64,
    /// Which sample of the task's data to check on.
    pub sample: usize,
}

impl Default for GradCheckSection {
    fn default() -> Self {
        Self {
            tolerance: 1e-5,
            sample: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RouteMapSection {
    pub width: usize,
    pub height: usize,
    pub layer: usize,
    pub landmarks: Option<PathBuf>,
}

impl Default for RouteMapSection {
    fn default() -> Self {
        Self {
            width: 16,
            height: 16,
            layer: 0,
            landmarks: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlendSection {
    pub a: Option<PathBuf>,
    pub b: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterSection {
    pub table: Option<PathBuf>,
    pub rules: Vec<MetricRule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// The one seed every command derives its randomness from.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub suite: SuiteConfig,
    pub moe: MoeSection,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub rank: RankSection,
    /// Allowed relative excess of the expert model over the specialists.
    pub interference_tolerance: f64,
    pub grad_check: GradCheckSection,
    pub route_map: RouteMapSection,
    pub blend: BlendSection,
    pub filter: FilterSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            suite: SuiteConfig::default(),
            moe: MoeSection::default(),
            stage1: TrainConfig { steps: 300, lr: 0.05 },
            stage2: TrainConfig { steps: 300, lr: 0.05 },
            rank: RankSection::default(),
            interference_tolerance: 0.2,
            grad_check: GradCheckSection::default(),
            route_map: RouteMapSection::default(),
            blend: BlendSection::default(),
            filter: FilterSection::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        if let Some(base) = path.parent() {
            cfg.rebase(base);
        }
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        for p in [
            &mut self.route_map.landmarks,
            &mut self.blend.a,
            &mut self.blend.b,
            &mut self.filter.table,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn moe_config(&self) -> MoeConfig {
        MoeConfig {
            d_model: self.suite.d_model,
            d_inner: self.moe.d_inner,
            num_experts: self.moe.num_experts,
            top_k: self.moe.top_k,
            width_factor: self.moe.width_factor,
            num_landmarks: self.suite.num_landmarks,
            tau: self.moe.tau,
            noise_std: self.moe.noise_std,
            seed: self.seed,
        }
    }

    pub fn rank_policy(&self) -> RankPolicy {
        RankPolicy {
            mode: self.rank.mode,
            tau: self.moe.tau,
            budget: self.rank.budget,
        }
    }

    pub fn interference(&self) -> InterferenceConfig {
        InterferenceConfig {
            moe: self.moe_config(),
            stage1: self.stage1,
            stage2: self.stage2,
            tolerance: self.interference_tolerance,
        }
    }

    pub fn filter_spec(&self) -> FilterSpec {
        FilterSpec {
            rules: self.filter.rules.clone(),
        }
    }

    /// Checks every section before any command runs.
    pub fn validate(&self) -> Result<()> {
        self.suite.validate()?;
        self.moe_config().validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.rank_policy().validate(self.suite.n_tasks)?;
        self.filter_spec().validate()?;
        if !(self.interference_tolerance > 0.0) {
            return Err(Error::Config("interference_tolerance must be positive".into()));
        }
        if !(self.grad_check.tolerance > 0.0) {
            return Err(Error::Config("grad_check.tolerance must be positive".into()));
        }
        if self.grad_check.sample >= self.suite.samples_per_task {
            return Err(Error::Config("grad_check.sample is beyond samples_per_task".into()));
        }
        if self.route_map.width == 0 || self.route_map.height == 0 {
            return Err(Error::Config("route_map grid dimensions must be positive".into()));
        }
        Ok(())
    }
}
