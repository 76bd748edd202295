//! Component importance: gradient sensitivity for heads, removal drop for FFNs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{csv_string, parse_csv, parse_field};
use crate::eval::{evaluate_accuracy, PreparedDataset, PreparedExample, SkippedExample};
use crate::model::{forward_on_tape, ForwardOptions, ModelConfig, ModelWeights, PruneMask};
use crate::registry::Registry;
use crate::tape::GradTape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComponentKind {
    Head,
    Ffn,
}

impl ComponentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ComponentKind::Head => "head",
            ComponentKind::Ffn => "ffn",
        }
    }
}

/// Scores for every head (`layers × heads`) or every FFN (`layers × 1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMatrix {
    pub kind: ComponentKind,
    pub layers: usize,
    pub heads: usize,
    /// Row-major by layer.
    pub values: Vec<f64>,
    pub task: String,
    pub shots: usize,
}

impl ImportanceMatrix {
    pub fn new(kind: ComponentKind, layers: usize, heads: usize, values: Vec<f64>, task: impl Into<String>, shots: usize) -> Result<Self> {
        let m = Self {
            kind,
            layers,
            heads,
            values,
            task: task.into(),
            shots,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == ComponentKind::Ffn && self.heads != 1 {
            return Err(Error::Data("ffn importance must have one column".into()));
        }
        if self.values.len() != self.layers * self.heads {
            return Err(Error::Data(format!(
                "importance has {} values, expected {}x{}",
                self.values.len(),
                self.layers,
                self.heads
            )));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite importance score".into()));
        }
        if self.kind == ComponentKind::Head && self.values.iter().any(|&v| v < 0.0) {
            return Err(Error::Data("head importance must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn matches(&self, config: &ModelConfig) -> bool {
        let heads = match self.kind {
            ComponentKind::Head => config.heads_per_layer,
            ComponentKind::Ffn => 1,
        };
        self.layers == config.num_layers && self.heads == heads
    }

    pub fn get(&self, layer: usize, head: usize) -> f64 {
        self.values[layer * self.heads + head]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `layer,head,score` for heads, `layer,score` for FFNs.
    pub fn to_csv(&self) -> Result<String> {
        match self.kind {
            ComponentKind::Head => csv_string(
                &HEAD_CSV,
                (0..self.values.len()).map(|i| {
                    vec![(i / self.heads).to_string(), (i % self.heads).to_string(), self.values[i].to_string()]
                }),
            ),
            ComponentKind::Ffn => csv_string(
                &FFN_CSV,
                self.values.iter().enumerate().map(|(l, v)| vec![l.to_string(), v.to_string()]),
            ),
        }
    }

    /// Which kind of matrix a CSV holds, from its header.
    pub fn csv_kind(text: &str) -> Result<ComponentKind> {
        let header: Vec<&str> = text.lines().next().unwrap_or("").trim().split(',').collect();
        if header == HEAD_CSV {
            Ok(ComponentKind::Head)
        } else if header == FFN_CSV {
            Ok(ComponentKind::Ffn)
        } else {
            Err(Error::Data(format!("unrecognized importance csv header {:?}", header.join(","))))
        }
    }

    pub fn from_csv(text: &str, kind: ComponentKind, task: impl Into<String>, shots: usize) -> Result<Self> {
        let header: &[&str] = match kind {
            ComponentKind::Head => &HEAD_CSV,
            ComponentKind::Ffn => &FFN_CSV,
        };
        let rows = parse_csv(text, header, "importance csv")?;
        let mut cells = Vec::with_capacity(rows.len());
        for row in &rows {
            let l: usize = parse_field(&row[0], "layer")?;
            let (h, v) = match kind {
                ComponentKind::Head => (parse_field(&row[1], "head")?, parse_field::<f64>(&row[2], "score")?),
                ComponentKind::Ffn => (0, parse_field::<f64>(&row[1], "score")?),
            };
            cells.push((l, h, v));
        }
        let layers = cells.iter().map(|c| c.0 + 1).max().unwrap_or(0);
        let heads = cells.iter().map(|c| c.1 + 1).max().unwrap_or(0);
        let mut values = vec![None; layers * heads];
        for (l, h, v) in cells {
            if values[l * heads + h].replace(v).is_some() {
                return Err(Error::Data(format!("importance csv repeats ({l}, {h})")));
            }
        }
        let values = values
            .into_iter()
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| Error::Data("importance csv is missing cells".into()))?;
        Self::new(kind, layers, heads, values, task, shots)
    }
}

const HEAD_CSV: [&str; 3] = ["layer", "head", "score"];
const FFN_CSV: [&str; 2] = ["layer", "score"];

/// Components in ascending importance; ties fall back to `(layer, head)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ranking {
    pub kind: ComponentKind,
    pub layers: usize,
    pub heads: usize,
    pub order: Vec<(usize, usize)>,
}

impl Ranking {
    /// Rank from an explicit order, which must be a permutation of every
    /// component. FFNs use head index 0.
    pub fn from_order(kind: ComponentKind, layers: usize, heads: usize, order: Vec<(usize, usize)>) -> Result<Self> {
        let mut seen = vec![false; layers * heads];
        if order.len() != seen.len() {
            return Err(Error::Usage(format!(
                "ranking lists {} components, expected {}",
                order.len(),
                seen.len()
            )));
        }
        for &(l, h) in &order {
            if l >= layers || h >= heads || std::mem::replace(&mut seen[l * heads + h], true) {
                return Err(Error::Usage(format!("ranking entry ({l}, {h}) is invalid or repeated")));
            }
        }
        Ok(Self {
            kind,
            layers,
            heads,
            order,
        })
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Flat row-major index of every entry, in rank order.
    pub fn flat(&self) -> Vec<usize> {
        self.order.iter().map(|&(l, h)| l * self.heads + h).collect()
    }

    /// Rank position (0 = least important) of each component, row-major.
    pub fn positions(&self) -> Vec<usize> {
        let mut pos = vec![0; self.order.len()];
        for (rank, i) in self.flat().into_iter().enumerate() {
            pos[i] = rank;
        }
        pos
    }
}

pub fn ranking_from(matrix: &ImportanceMatrix) -> Ranking {
    let mut idx: Vec<usize> = (0..matrix.values.len()).collect();
    idx.sort_by(|&a, &b| matrix.values[a].total_cmp(&matrix.values[b]).then(a.cmp(&b)));
    Ranking {
        kind: matrix.kind,
        layers: matrix.layers,
        heads: matrix.heads,
        order: idx.into_iter().map(|i| (i / matrix.heads, i % matrix.heads)).collect(),
    }
}

/// `|⟨Aʰ, ∂L/∂Aʰ⟩|` for every head on one example, where `L` is the mean
/// negative log-likelihood of the gold option.
pub fn example_head_sensitivity(weights: &ModelWeights, example: &PreparedExample) -> Result<Vec<f64>> {
    let seq = example.gold_sequence();
    let p = example.prompt.len();
    let targets: Vec<(usize, usize)> = (p..seq.len()).map(|t| (t - 1, seq[t] as usize)).collect();
    let mut tape = GradTape::new();
    let opts = ForwardOptions {
        track_head_outputs: true,
        ..ForwardOptions::default()
    };
    let out = forward_on_tape(&mut tape, weights, None, &seq, &opts)?;
    let loss = tape.mean_nll(out.logits, &targets)?;
    let grads = tape.backward(loss)?;
    out.head_outputs
        .iter()
        .map(|(_, &a)| {
            let value = tape.value(a);
            let dot = match grads.get(a) {
                Some(g) => value.dot(g)?,
                None => 0.0,
            };
            if !dot.is_finite() {
                return Err(Error::Numerical("non-finite head sensitivity".into()));
            }
            Ok(dot.abs())
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct HeadImportanceReport {
    pub matrix: ImportanceMatrix,
    pub used: usize,
    pub excluded: Vec<SkippedExample>,
}

/// Mean per-example head sensitivity over the prepared examples.
pub fn head_importance(weights: &ModelWeights, data: &PreparedDataset) -> Result<HeadImportanceReport> {
    let cfg = &weights.config;
    let per_example: Vec<(usize, Result<Vec<f64>>)> = data
        .examples
        .par_iter()
        .map(|ex| (ex.index, example_head_sensitivity(weights, ex)))
        .collect();
    let mut sum = vec![0.0; cfg.num_heads()];
    let mut used = 0;
    let mut excluded = Vec::new();
    for (index, r) in per_example {
        match r {
            Ok(v) => {
                sum.iter_mut().zip(&v).for_each(|(s, x)| *s += x);
                used += 1;
            }
            Err(e @ (Error::Numerical(_) | Error::Tensor(crate::tensor::TensorError::NonFinite { .. }))) => {
                log::warn!("{}: example {index} excluded from importance: {e}", data.name);
                excluded.push(SkippedExample {
                    index,
                    reason: e.to_string(),
                });
            }
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Err(Error::Evaluation(format!("{}: no example produced a usable gradient", data.name)));
    }
    let values = sum.into_iter().map(|s| s / used as f64).collect();
    let matrix = ImportanceMatrix::new(
        ComponentKind::Head,
        cfg.num_layers,
        cfg.heads_per_layer,
        values,
        data.name.clone(),
        data.shots.k,
    )?;
    Ok(HeadImportanceReport {
        matrix,
        used,
        excluded,
    })
}

/// Removal-drop scorer holding the unpruned accuracy for one dataset.
pub struct OracleScorer<'a> {
    weights: &'a ModelWeights,
    data: &'a PreparedDataset,
    baseline: f64,
}

impl<'a> OracleScorer<'a> {
    pub fn new(weights: &'a ModelWeights, data: &'a PreparedDataset) -> Result<Self> {
        let baseline = evaluate_accuracy(weights, None, data)?.accuracy;
        Ok(Self {
            weights,
            data,
            baseline,
        })
    }

    pub fn baseline(&self) -> f64 {
        self.baseline
    }

    /// Accuracy lost when `mask` is applied.
    pub fn drop_under(&self, mask: &PruneMask) -> Result<f64> {
        Ok(self.baseline - evaluate_accuracy(self.weights, Some(mask), self.data)?.accuracy)
    }

    pub fn ffn(&self, layer: usize) -> Result<f64> {
        let cfg = &self.weights.config;
        if layer >= cfg.num_layers {
            return Err(Error::Usage(format!("FFN index {layer} outside {} layers", cfg.num_layers)));
        }
        let mut mask = PruneMask::full(cfg);
        mask.set_ffn(layer, false);
        self.drop_under(&mask)
    }

    pub fn head(&self, layer: usize, head: usize) -> Result<f64> {
        let cfg = &self.weights.config;
        if layer >= cfg.num_layers || head >= cfg.heads_per_layer {
            return Err(Error::Usage(format!("head ({layer}, {head}) outside the model")));
        }
        let mut mask = PruneMask::full(cfg);
        mask.set_head(layer, head, false);
        self.drop_under(&mask)
    }
}

/// Uncached removal drop for one FFN.
pub fn oracle_importance(weights: &ModelWeights, data: &PreparedDataset, layer: usize) -> Result<f64> {
    OracleScorer::new(weights, data)?.ffn(layer)
}

/// Removal drop for every FFN, one layer at a time.
pub fn ffn_importance(weights: &ModelWeights, data: &PreparedDataset) -> Result<ImportanceMatrix> {
    let scorer = OracleScorer::new(weights, data)?;
    let cfg = &weights.config;
    let values = (0..cfg.num_layers).map(|l| scorer.ffn(l)).collect::<Result<Vec<_>>>()?;
    ImportanceMatrix::new(ComponentKind::Ffn, cfg.num_layers, 1, values, data.name.clone(), data.shots.k)
}

/// Removal drop for every head.
pub fn oracle_head_importance(weights: &ModelWeights, data: &PreparedDataset) -> Result<ImportanceMatrix> {
    let scorer = OracleScorer::new(weights, data)?;
    let cfg = &weights.config;
    let mut values = Vec::with_capacity(cfg.num_heads());
    for l in 0..cfg.num_layers {
        for h in 0..cfg.heads_per_layer {
            // head scores must stay nonnegative; a removal that helps counts as 0
            values.push(scorer.head(l, h)?.max(0.0));
        }
    }
    ImportanceMatrix::new(ComponentKind::Head, cfg.num_layers, cfg.heads_per_layer, values, data.name.clone(), data.shots.k)
}

/// Elementwise mean across datasets.
pub fn aggregate_importance(matrices: &[ImportanceMatrix]) -> Result<ImportanceMatrix> {
    let first = matrices
        .first()
        .ok_or_else(|| Error::Usage("nothing to aggregate".into()))?;
    for m in matrices {
        if m.kind != first.kind || m.layers != first.layers || m.heads != first.heads {
            return Err(Error::Usage(format!(
                "cannot aggregate {} {}x{} with {} {}x{}",
                first.kind.as_str(),
                first.layers,
                first.heads,
                m.kind.as_str(),
                m.layers,
                m.heads
            )));
        }
        if m.shots != first.shots {
            return Err(Error::Usage(format!("cannot aggregate {}-shot with {}-shot scores", first.shots, m.shots)));
        }
    }
    let n = matrices.len() as f64;
    let values = (0..first.values.len())
        .map(|i| matrices.iter().map(|m| m.values[i]).sum::<f64>() / n)
        .collect();
    ImportanceMatrix::new(first.kind, first.layers, first.heads, values, "aggregate", first.shots)
}

/// A way of scoring components on one prepared dataset.
pub trait ImportanceMethod: Send + Sync {
    fn kind(&self) -> ComponentKind;
    fn score(&self, weights: &ModelWeights, data: &PreparedDataset) -> Result<ImportanceMatrix>;
}

pub struct GradientHeads;

impl ImportanceMethod for GradientHeads {
    fn kind(&self) -> ComponentKind {
        ComponentKind::Head
    }

    fn score(&self, weights: &ModelWeights, data: &PreparedDataset) -> Result<ImportanceMatrix> {
        Ok(head_importance(weights, data)?.matrix)
    }
}

pub struct OracleFfns;

impl ImportanceMethod for OracleFfns {
    fn kind(&self) -> ComponentKind {
        ComponentKind::Ffn
    }

    fn score(&self, weights: &ModelWeights, data: &PreparedDataset) -> Result<ImportanceMatrix> {
        ffn_importance(weights, data)
    }
}

pub struct OracleHeads;

impl ImportanceMethod for OracleHeads {
    fn kind(&self) -> ComponentKind {
        ComponentKind::Head
    }

    fn score(&self, weights: &ModelWeights, data: &PreparedDataset) -> Result<ImportanceMatrix> {
        oracle_head_importance(weights, data)
    }
}

pub fn builtin_methods() -> Registry<dyn ImportanceMethod> {
    let mut r: Registry<dyn ImportanceMethod> = Registry::new("importance method");
    r.register("gradient", Box::new(GradientHeads));
    r.register("oracle-ffn", Box::new(OracleFfns));
    r.register("oracle-head", Box::new(OracleHeads));
    r
}
