//! Iterative removal of the least important heads and FFNs.
//!
//! Every point of a curve is a fresh masked evaluation; fractions are of
//! the full component count and no component is re-scored between steps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate_accuracy, PreparedDataset};
use crate::importance::{ComponentKind, Ranking};
use crate::io::csv_string;
use crate::model::{count_parameters, ModelConfig, ModelWeights, PruneMask};

/// Number of components removed at `fraction` of `total`.
pub fn removal_count(total: usize, fraction: f64) -> usize {
    // the epsilon keeps 0.7·10 at 7 despite 0.7 being stored as 0.6999…
    ((fraction * total as f64 + 1e-9).floor() as usize).min(total)
}

fn check_fraction(fraction: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("prune fraction {fraction} outside [0, 1]")));
    }
    Ok(())
}

fn check_ranking(config: &ModelConfig, ranking: &Ranking) -> Result<()> {
    let heads = match ranking.kind {
        ComponentKind::Head => config.heads_per_layer,
        ComponentKind::Ffn => 1,
    };
    if ranking.layers != config.num_layers || ranking.heads != heads || ranking.len() != config.num_layers * heads {
        return Err(Error::Usage(format!(
            "{} ranking of {}x{} does not fit the model",
            ranking.kind.as_str(),
            ranking.layers,
            ranking.heads
        )));
    }
    Ok(())
}

/// Clear the first `⌊fraction·total⌋` entries of `ranking` in `mask`.
pub fn apply_ranking(mask: &mut PruneMask, ranking: &Ranking, fraction: f64) -> Result<()> {
    check_fraction(fraction)?;
    for &(l, h) in &ranking.order[..removal_count(ranking.len(), fraction)] {
        match ranking.kind {
            ComponentKind::Head => mask.set_head(l, h, false),
            ComponentKind::Ffn => mask.set_ffn(l, false),
        }
    }
    Ok(())
}

pub fn masks_for(config: &ModelConfig, ranking: &Ranking, fraction: f64) -> Result<PruneMask> {
    check_ranking(config, ranking)?;
    let mut mask = PruneMask::full(config);
    apply_ranking(&mut mask, ranking, fraction)?;
    Ok(mask)
}

pub fn default_fractions() -> Vec<f64> {
    (0..10).map(|i| i as f64 / 10.0).collect()
}

pub fn validate_fractions(fractions: &[f64]) -> Result<()> {
    if fractions.is_empty() {
        return Err(Error::Config("prune schedule is empty".into()));
    }
    for f in fractions {
        check_fraction(*f)?;
    }
    if fractions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("prune fractions must be strictly ascending".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PruneTarget {
    Heads,
    Ffns,
    Both,
}

/// `(head fraction, ffn fraction, mask)`.
pub type PlanPoint = (Option<f64>, Option<f64>, PruneMask);

/// What to remove and in which order.
#[derive(Debug, Clone)]
pub enum PrunePlan {
    Heads { ranking: Ranking, fractions: Vec<f64> },
    Ffns { ranking: Ranking, fractions: Vec<f64> },
    /// Every pairing of a head fraction with an FFN fraction.
    Both {
        heads: Ranking,
        ffns: Ranking,
        head_fractions: Vec<f64>,
        ffn_fractions: Vec<f64>,
    },
}

impl PrunePlan {
    pub fn target(&self) -> PruneTarget {
        match self {
            PrunePlan::Heads { .. } => PruneTarget::Heads,
            PrunePlan::Ffns { .. } => PruneTarget::Ffns,
            PrunePlan::Both { .. } => PruneTarget::Both,
        }
    }

    fn check(&self, config: &ModelConfig) -> Result<()> {
        let want = |r: &Ranking, kind: ComponentKind| {
            if r.kind != kind {
                return Err(Error::Usage(format!(
                    "{} ranking given where {} ranking is required",
                    r.kind.as_str(),
                    kind.as_str()
                )));
            }
            check_ranking(config, r)
        };
        match self {
            PrunePlan::Heads { ranking, fractions } => {
                want(ranking, ComponentKind::Head)?;
                validate_fractions(fractions)
            }
            PrunePlan::Ffns { ranking, fractions } => {
                want(ranking, ComponentKind::Ffn)?;
                validate_fractions(fractions)
            }
            PrunePlan::Both {
                heads,
                ffns,
                head_fractions,
                ffn_fractions,
            } => {
                want(heads, ComponentKind::Head)?;
                want(ffns, ComponentKind::Ffn)?;
                validate_fractions(head_fractions)?;
                validate_fractions(ffn_fractions)
            }
        }
    }

    /// `(head fraction, ffn fraction, mask)` in emission order.
    pub fn masks(&self, config: &ModelConfig) -> Result<Vec<PlanPoint>> {
        self.check(config)?;
        let mut out = Vec::new();
        match self {
            PrunePlan::Heads { ranking, fractions } => {
                for &f in fractions {
                    out.push((Some(f), None, masks_for(config, ranking, f)?));
                }
            }
            PrunePlan::Ffns { ranking, fractions } => {
                for &f in fractions {
                    out.push((None, Some(f), masks_for(config, ranking, f)?));
                }
            }
            PrunePlan::Both {
                heads,
                ffns,
                head_fractions,
                ffn_fractions,
            } => {
                for &hf in head_fractions {
                    for &ff in ffn_fractions {
                        let mut mask = masks_for(config, heads, hf)?;
                        apply_ranking(&mut mask, ffns, ff)?;
                        out.push((Some(hf), Some(ff), mask));
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunePoint {
    pub head_fraction: Option<f64>,
    pub ffn_fraction: Option<f64>,
    pub heads_removed: usize,
    pub ffns_removed: usize,
    pub params_removed: u64,
    pub mask_digest: String,
    pub accuracy: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneCurve {
    pub task: String,
    pub shots: usize,
    pub ranking_source: String,
    pub target: PruneTarget,
    pub points: Vec<PrunePoint>,
}

impl PruneCurve {
    pub fn accuracies(&self) -> Vec<Option<f64>> {
        self.points.iter().map(|p| p.accuracy).collect()
    }

    /// `fraction,accuracy,params_removed`; combined curves carry both
    /// fractions. Failed points leave accuracy empty.
    pub fn to_csv(&self) -> Result<String> {
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        match self.target {
            PruneTarget::Both => csv_string(
                &["head_fraction", "ffn_fraction", "accuracy", "params_removed"],
                self.points.iter().map(|p| {
                    vec![fmt(p.head_fraction), fmt(p.ffn_fraction), fmt(p.accuracy), p.params_removed.to_string()]
                }),
            ),
            _ => csv_string(
                &["fraction", "accuracy", "params_removed"],
                self.points.iter().map(|p| {
                    vec![
                        fmt(p.head_fraction.or(p.ffn_fraction)),
                        fmt(p.accuracy),
                        p.params_removed.to_string(),
                    ]
                }),
            ),
        }
    }
}

/// Evaluate `data` at every point of `plan`. Evaluation failures are kept
/// on the point; configuration problems fail the whole curve.
pub fn prune_curve(weights: &ModelWeights, data: &PreparedDataset, plan: &PrunePlan, ranking_source: &str) -> Result<PruneCurve> {
    let cfg = &weights.config;
    let full = count_parameters(cfg, &PruneMask::full(cfg)).total();
    let masks = plan.masks(cfg)?;
    let points = masks
        .par_iter()
        .map(|(hf, ff, mask)| {
            let (accuracy, error) = match evaluate_accuracy(weights, Some(mask), data) {
                Ok(r) => (Some(r.accuracy), None),
                Err(e) => {
                    log::warn!("{}: prune point failed: {e}", data.name);
                    (None, Some(e.to_string()))
                }
            };
            PrunePoint {
                head_fraction: *hf,
                ffn_fraction: *ff,
                heads_removed: cfg.num_heads() - mask.heads_kept(),
                ffns_removed: cfg.num_layers - mask.ffns_kept(),
                params_removed: full - count_parameters(cfg, mask).total(),
                mask_digest: mask.digest(),
                accuracy,
                error,
            }
        })
        .collect();
    Ok(PruneCurve {
        task: data.name.clone(),
        shots: data.shots.k,
        ranking_source: ranking_source.to_owned(),
        target: plan.target(),
        points,
    })
}

/// One head-pruning curve on `data` per named ranking.
pub fn transfer_curves(
    weights: &ModelWeights,
    data: &PreparedDataset,
    rankings: &[(String, Ranking)],
    fractions: &[f64],
) -> Result<Vec<PruneCurve>> {
    rankings
        .iter()
        .map(|(name, ranking)| {
            if ranking.kind != ComponentKind::Head {
                return Err(Error::Usage(format!("transfer ranking {name:?} is not a head ranking")));
            }
            let plan = PrunePlan::Heads {
                ranking: ranking.clone(),
                fractions: fractions.to_vec(),
            };
            prune_curve(weights, data, &plan, name)
        })
        .collect()
}
