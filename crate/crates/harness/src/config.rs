//! Experiment configuration: one JSON file with a versioned schema.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use frictionlab::dual::MeasureMemory;
use frictionlab::friction::{Penalty, TabulatedPenalty};
use frictionlab::payoffs::{AveragingRule, Claim, ClaimKind, TabulatedPayoff};
use frictionlab::Market;

use crate::error::{HarnessError, Result};

/// Schema version this build reads.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub market: MarketSpec,
    pub penalty: PenaltySpec,
    /// Extra truncation level applied on top of `penalty`.
    #[serde(default)]
    pub truncation: Option<f64>,
    pub claim: ClaimSpec,
    #[serde(default)]
    pub engine: Engine,
    #[serde(default)]
    pub grids: Grids,
    #[serde(default)]
    pub dual: DualSpec,
    /// Constant control of the explicit lower-bound measure.
    #[serde(default)]
    pub kusuoka_a: Option<f64>,
    #[serde(default)]
    pub premium: Option<PremiumSpec>,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: OutputSpec,
    /// Strategy file audited by `verify` instead of the solved strategy.
    #[serde(default)]
    pub strategy_file: Option<PathBuf>,
    /// Directory against which relative paths resolve.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketSpec {
    pub n: Vec<usize>,
    pub sigma: f64,
    pub s0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PenaltySpec {
    Zero,
    Quadratic { lambda: f64 },
    Proportional { c: f64 },
    TruncatedZero { c: f64 },
    TruncatedQuadratic { lambda: f64, c: f64 },
    Power { gamma: f64 },
    Tabulated {
        file: PathBuf,
        #[serde(default)]
        price_scaled: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClaimSpec {
    Call {
        strike: f64,
    },
    Put {
        strike: f64,
    },
    Constant {
        value: f64,
    },
    AsianCall {
        strike: f64,
        #[serde(default)]
        averaging: AveragingRule,
    },
    AsianPut {
        strike: f64,
        #[serde(default)]
        averaging: AveragingRule,
    },
    Lookback {
        strike: f64,
    },
    Tabulated {
        file: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    /// Full tree for small `n` or path-dependent claims, lattice otherwise.
    #[default]
    Auto,
    Exact,
    Lattice,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grids {
    pub gamma_points: usize,
    /// Half width of the holdings grid; defaults to twice the claim's slope.
    pub gamma_half_width: Option<f64>,
    pub average_buckets: usize,
    pub hjb_nx: usize,
    pub q_resolution: f64,
}

impl Default for Grids {
    fn default() -> Self {
        Self { gamma_points: 401, gamma_half_width: None, average_buckets: 101, hjb_nx: 801, q_resolution: 1e-3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DualSpec {
    pub steps: usize,
    pub starts: usize,
    pub step: f64,
    pub memory: MeasureMemory,
}

impl Default for DualSpec {
    fn default() -> Self {
        Self { steps: 400, starts: 5, step: 0.05, memory: MeasureMemory::LastMove }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PremiumSpec {
    pub eps: f64,
    #[serde(default = "default_scan")]
    pub scan: usize,
}

fn default_scan() -> usize {
    51
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    /// Largest relative primal-dual gap accepted by `dual`.
    pub duality_gap: Option<f64>,
    /// Largest final relative gap to the limit accepted by `converge`.
    pub convergence_gap: Option<f64>,
    /// Smallest terminal slack accepted by `verify`.
    pub min_slack: Option<f64>,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { duality_gap: Some(1e-3), convergence_gap: None, min_slack: Some(-1e-8) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: Self = serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_json(&text, &base)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(HarnessError::Config(format!(
                "schema_version {} not supported, expected {SCHEMA_VERSION}",
                self.schema_version
            )));
        }
        let ns = &self.market.n;
        if ns.is_empty() || ns.windows(2).any(|w| w[0] >= w[1]) || ns[0] == 0 {
            return Err(HarnessError::Config("market.n must be a non-empty increasing list of positive steps".into()));
        }
        if self.grids.gamma_points < 2 || self.grids.hjb_nx < 5 {
            return Err(HarnessError::Config("grids too small".into()));
        }
        if !(self.grids.q_resolution > 0.0 && self.grids.q_resolution < 1.0) {
            return Err(HarnessError::Config("q_resolution must lie in (0, 1)".into()));
        }
        self.market(ns[0])?;
        self.penalty()?;
        self.claim()?;
        Ok(())
    }

    fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    fn read(&self, path: &Path) -> Result<String> {
        let full = self.resolve(path);
        std::fs::read_to_string(&full).map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", full.display())))
    }

    pub fn market(&self, n: usize) -> Result<Market> {
        Ok(Market::new(n, self.market.sigma, self.market.s0)?)
    }

    pub fn penalty(&self) -> Result<Penalty<f64>> {
        let base = match &self.penalty {
            PenaltySpec::Zero => Penalty::zero(),
            PenaltySpec::Quadratic { lambda } => Penalty::quadratic(*lambda)?,
            PenaltySpec::Proportional { c } => Penalty::proportional(*c)?,
            PenaltySpec::TruncatedZero { c } => Penalty::truncated_zero(*c)?,
            PenaltySpec::TruncatedQuadratic { lambda, c } => Penalty::truncated_quadratic(*lambda, *c)?,
            PenaltySpec::Power { gamma } => Penalty::power(*gamma)?,
            PenaltySpec::Tabulated { file, price_scaled } => {
                Penalty::Tabulated(TabulatedPenalty::from_text(&self.read(file)?, *price_scaled)?)
            }
        };
        Ok(match self.truncation {
            Some(c) => base.truncate(c)?,
            None => base,
        })
    }

    pub fn claim(&self) -> Result<Claim<f64>> {
        Ok(match &self.claim {
            ClaimSpec::Call { strike } => Claim::call(*strike),
            ClaimSpec::Put { strike } => Claim::put(*strike),
            ClaimSpec::Constant { value } => Claim::constant(*value),
            ClaimSpec::AsianCall { strike, averaging } => {
                Claim::new(ClaimKind::AsianCall { strike: *strike }).with_averaging(*averaging)
            }
            ClaimSpec::AsianPut { strike, averaging } => {
                Claim::new(ClaimKind::AsianPut { strike: *strike }).with_averaging(*averaging)
            }
            ClaimSpec::Lookback { strike } => Claim::new(ClaimKind::LookbackMax { strike: *strike }),
            ClaimSpec::Tabulated { file } => Claim::new(ClaimKind::Tabulated(TabulatedPayoff::from_text(&self.read(file)?)?)),
        })
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output.dir.as_ref().map(|d| self.resolve(d)).unwrap_or_else(|| self.base_dir.join("out"))
    }

    pub fn strategy_path(&self) -> Option<PathBuf> {
        self.strategy_file.as_ref().map(|p| self.resolve(p))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "schema_version": 1,
        "market": {"n": [1, 2, 3], "sigma": 0.2, "s0": 100},
        "penalty": {"kind": "quadratic", "lambda": 0.5},
        "claim": {"kind": "call", "strike": 100}
    }"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = ExperimentConfig::from_json(MINIMAL, Path::new("/tmp")).unwrap();
        assert_eq!(cfg.grids.gamma_points, 401);
        assert_eq!(cfg.engine, Engine::Auto);
        assert_eq!(cfg.dual.memory, MeasureMemory::LastMove);
        assert_eq!(cfg.output_dir(), PathBuf::from("/tmp/out"));
        assert_eq!(cfg.penalty().unwrap(), Penalty::Quadratic { lambda: 0.5 });
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = [
            MINIMAL.replace("\"schema_version\": 1", "\"schema_version\": 2"),
            MINIMAL.replace("[1, 2, 3]", "[3, 2]"),
            MINIMAL.replace("[1, 2, 3]", "[]"),
            MINIMAL.replace("\"lambda\": 0.5", "\"lambda\": -1"),
            MINIMAL.replace("\"strike\": 100}", "\"strike\": 100, \"colour\": 1}"),
            MINIMAL.replace("quadratic", "cubic"),
        ];
        for text in bad {
            assert!(matches!(ExperimentConfig::from_json(&text, Path::new(".")), Err(HarnessError::Config(_)) | Err(HarnessError::Engine(_))), "{text}");
        }
    }

    #[test]
    fn truncation_on_top() {
        let text = MINIMAL.replace("\"claim\"", "\"truncation\": 0.25, \"claim\"");
        let cfg = ExperimentConfig::from_json(&text, Path::new(".")).unwrap();
        assert_eq!(cfg.penalty().unwrap(), Penalty::TruncatedQuadratic { lambda: 0.5, c: 0.25 });
    }
}
