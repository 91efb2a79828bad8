//! Run configuration: one structured document that fully determines a run.
//! The report's fingerprint is a SHA-256 over the canonical JSON encoding.

use crate::datagen::{ShiftSpec, SplitSpec};
use crate::error::{Error, Result};
use crate::model::LossConfig;
use crate::scoring::ScoreKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Open set: target adds private classes.
    Osda,
    /// Open partial: both domains have private classes.
    Opda,
    /// Partial set: source has private classes, target has none. Rejection is
    /// switched off (w₀ = 0).
    Pda,
    /// Identical label sets; rejection off.
    Closed,
}

impl std::str::FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "osda" => Ok(Scenario::Osda),
            "opda" => Ok(Scenario::Opda),
            "pda" => Ok(Scenario::Pda),
            "closed" => Ok(Scenario::Closed),
            other => Err(Error::invalid_config(format!(
                "unknown scenario {other:?} (expected osda, opda, pda, or closed)"
            ))),
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scenario::Osda => "osda",
            Scenario::Opda => "opda",
            Scenario::Pda => "pda",
            Scenario::Closed => "closed",
        })
    }
}

impl Scenario {
    pub fn default_split(&self) -> SplitSpec {
        match self {
            Scenario::Osda => SplitSpec {
                shared: 4,
                src_private: 0,
                tgt_private: 3,
            },
            Scenario::Opda => SplitSpec {
                shared: 4,
                src_private: 2,
                tgt_private: 3,
            },
            Scenario::Pda => SplitSpec {
                shared: 4,
                src_private: 2,
                tgt_private: 0,
            },
            Scenario::Closed => SplitSpec {
                shared: 4,
                src_private: 0,
                tgt_private: 0,
            },
        }
    }

    /// Partial-set and closed-set runs ignore the rejection mechanism.
    pub fn rejection_enabled(&self) -> bool {
        matches!(self, Scenario::Osda | Scenario::Opda)
    }
}

/// Threshold-band controls. Absent values fall back to mixup estimation with
/// slack ρ = rho_ratio · w₀.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct BandConfig {
    pub fixed_w0: Option<f64>,
    pub fixed_rho: Option<f64>,
    pub rho_ratio: f64,
    pub score: ScoreKind,
    /// Mixup pair count for threshold estimation; defaults to the target size.
    pub mixup_pairs: Option<usize>,
    /// Re-estimate the threshold each adaptation epoch (experimental).
    pub reestimate: bool,
}

impl Default for BandConfig {
    fn default() -> Self {
        BandConfig {
            fixed_w0: None,
            fixed_rho: None,
            rho_ratio: 0.1,
            score: ScoreKind::InnerProduct,
            mixup_pairs: None,
            reestimate: false,
        }
    }
}

/// Optimizer block of a run config (shared by both loops; the loops take
/// their own iteration counts).
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct OptimBlock {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub new_layer_lr_mult: f64,
}

impl Default for OptimBlock {
    fn default() -> Self {
        OptimBlock {
            lr0: 0.05,
            momentum: 0.9,
            weight_decay: 1e-3,
            batch_size: 64,
            new_layer_lr_mult: 1.0,
        }
    }
}

/// Everything that determines a run. Every field has a desk-scale default;
/// the iteration counts are scaled down from the reference recipe's 3000.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub scenario: Scenario,
    pub split: SplitSpec,
    pub shift: ShiftSpec,
    pub loss: LossConfig,
    pub optim: OptimBlock,
    pub source_iters: usize,
    pub adapt_iters: usize,
    /// Hidden widths of the feature module before the bottleneck.
    pub hidden: Vec<usize>,
    /// Bottleneck width d.
    pub bottleneck: usize,
    pub band: BandConfig,
    pub seeds: Vec<u64>,
    pub histogram_bins: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scenario: Scenario::Osda,
            split: Scenario::Osda.default_split(),
            shift: ShiftSpec::default(),
            loss: LossConfig::default(),
            optim: OptimBlock::default(),
            source_iters: 600,
            adapt_iters: 600,
            hidden: vec![32],
            bottleneck: 16,
            band: BandConfig::default(),
            seeds: vec![0],
            histogram_bins: 50,
        }
    }
}

impl RunConfig {
    pub fn for_scenario(scenario: Scenario) -> Self {
        RunConfig {
            scenario,
            split: scenario.default_split(),
            ..RunConfig::default()
        }
    }

    pub fn k(&self) -> usize {
        self.split.k()
    }

    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        self.shift.validate()?;
        self.loss.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::invalid_config("at least one seed is required"));
        }
        if self.source_iters == 0 || self.adapt_iters == 0 {
            return Err(Error::invalid_config("iteration counts must be positive"));
        }
        if self.bottleneck == 0 {
            return Err(Error::invalid_config("bottleneck width must be positive"));
        }
        if self.histogram_bins < 2 {
            return Err(Error::invalid_config("histogram_bins must be >= 2"));
        }
        if self.k() < 2 {
            return Err(Error::invalid_config(
                "the source label set needs at least 2 classes",
            ));
        }
        match self.scenario {
            Scenario::Osda => {
                if self.split.src_private != 0 || self.split.tgt_private == 0 {
                    return Err(Error::invalid_config(
                        "osda requires src_private = 0 and tgt_private > 0",
                    ));
                }
            }
            Scenario::Opda => {
                if self.split.src_private == 0 || self.split.tgt_private == 0 {
                    return Err(Error::invalid_config(
                        "opda requires both private counts > 0",
                    ));
                }
            }
            Scenario::Pda => {
                if self.split.src_private == 0 || self.split.tgt_private != 0 {
                    return Err(Error::invalid_config(
                        "pda requires src_private > 0 and tgt_private = 0",
                    ));
                }
            }
            Scenario::Closed => {
                if self.split.src_private != 0 || self.split.tgt_private != 0 {
                    return Err(Error::invalid_config(
                        "closed requires both private counts = 0",
                    ));
                }
            }
        }
        if let Some(w0) = self.band.fixed_w0 {
            if !w0.is_finite() {
                return Err(Error::invalid_config("fixed w0 must be finite"));
            }
        }
        if self.band.rho_ratio < 0.0 {
            return Err(Error::invalid_config("rho_ratio must be >= 0"));
        }
        Ok(())
    }

    /// SHA-256 hex over the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        let digest = h.finalize();
        let mut s = String::with_capacity(64);
        use std::fmt::Write as _;
        for b in digest {
            let _ = write!(s, "{b:02x}");
        }
        s
    }
}
