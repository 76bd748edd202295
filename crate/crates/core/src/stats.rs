//! Rank correlation and top-k overlap between importance rankings.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::importance::Ranking;
use crate::io::csv_string;

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spearman {
    pub rho: f64,
    /// Two-sided, from the Student t approximation with `n − 2` degrees of freedom.
    pub p_value: f64,
}

/// Two-sided p-value of `rho` over `n` pairs.
pub fn spearman_p_value(rho: f64, n: usize) -> f64 {
    let df = (n - 2) as f64;
    if rho.abs() >= 1.0 {
        return 0.0;
    }
    let t = rho * (df / (1.0 - rho * rho)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    (2.0 * dist.sf(t.abs())).min(1.0)
}

pub fn spearman(a: &[f64], b: &[f64]) -> Result<Spearman> {
    if a.len() != b.len() {
        return Err(Error::Usage(format!("cannot correlate {} values with {}", a.len(), b.len())));
    }
    if a.len() < 3 {
        return Err(Error::Usage(format!("spearman needs at least 3 pairs, got {}", a.len())));
    }
    let rho = pearson(&average_ranks(a), &average_ranks(b))
        .ok_or_else(|| Error::Data("spearman correlation is undefined for constant input".into()))?;
    Ok(Spearman {
        rho,
        p_value: spearman_p_value(rho, a.len()),
    })
}

/// Spearman correlation between the rank positions of two rankings.
pub fn spearman_rankings(a: &Ranking, b: &Ranking) -> Result<Spearman> {
    same_universe(a, b)?;
    let pa: Vec<f64> = a.positions().into_iter().map(|p| p as f64).collect();
    let pb: Vec<f64> = b.positions().into_iter().map(|p| p as f64).collect();
    spearman(&pa, &pb)
}

fn same_universe(a: &Ranking, b: &Ranking) -> Result<()> {
    if a.kind != b.kind || a.layers != b.layers || a.heads != b.heads {
        return Err(Error::Usage("rankings cover different components".into()));
    }
    Ok(())
}

/// Mean and population variance.
pub fn mean_variance(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Usage("no values to summarize".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok((mean, var))
}

/// Share of the `⌊k_frac·total⌋` most important entries the rankings share.
pub fn topk_overlap(a: &Ranking, b: &Ranking, k_frac: f64) -> Result<f64> {
    same_universe(a, b)?;
    if !(k_frac > 0.0 && k_frac <= 1.0) {
        return Err(Error::Config(format!("k_frac {k_frac} outside (0, 1]")));
    }
    let total = a.len();
    let k = (k_frac * total as f64 + 1e-9).floor() as usize;
    if k == 0 {
        return Err(Error::Config(format!("k_frac {k_frac} of {total} components selects none")));
    }
    let top_a: HashSet<_> = a.order[total - k..].iter().collect();
    let shared = b.order[total - k..].iter().filter(|x| top_a.contains(x)).count();
    Ok(shared as f64 / k as f64)
}

/// Pairwise Spearman correlations among named score lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub label: String,
    pub names: Vec<String>,
    /// `None` where the correlation is undefined.
    pub rho: Vec<Vec<Option<f64>>>,
    pub p_value: Vec<Vec<Option<f64>>>,
}

impl CorrelationReport {
    pub fn new(label: impl Into<String>, names: Vec<String>, scores: &[Vec<f64>]) -> Result<Self> {
        if names.len() != scores.len() {
            return Err(Error::Usage("one name per score list is required".into()));
        }
        let n = names.len();
        let mut rho = vec![vec![None; n]; n];
        let mut p_value = vec![vec![None; n]; n];
        for i in 0..n {
            rho[i][i] = Some(1.0);
            p_value[i][i] = Some(0.0);
            for j in i + 1..n {
                let r = match spearman(&scores[i], &scores[j]) {
                    Ok(s) => Some(s),
                    Err(Error::Data(msg)) => {
                        log::warn!("{} vs {}: {msg}", names[i], names[j]);
                        None
                    }
                    Err(e) => return Err(e),
                };
                rho[i][j] = r.map(|s| s.rho);
                rho[j][i] = rho[i][j];
                p_value[i][j] = r.map(|s| s.p_value);
                p_value[j][i] = p_value[i][j];
            }
        }
        Ok(Self {
            label: label.into(),
            names,
            rho,
            p_value,
        })
    }

    fn matrix_csv(&self, m: &[Vec<Option<f64>>]) -> Result<String> {
        let mut header = vec!["name"];
        header.extend(self.names.iter().map(String::as_str));
        csv_string(
            &header,
            self.names.iter().zip(m).map(|(name, row)| {
                std::iter::once(name.clone())
                    .chain(row.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()))
                    .collect::<Vec<_>>()
            }),
        )
    }

    pub fn rho_csv(&self) -> Result<String> {
        self.matrix_csv(&self.rho)
    }

    pub fn p_value_csv(&self) -> Result<String> {
        self.matrix_csv(&self.p_value)
    }
}

/// Mean and variance, across tasks, of the correlation between each pair
/// of shot settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossShotSummary {
    pub shots: Vec<usize>,
    pub tasks: Vec<String>,
    pub mean: Vec<Vec<f64>>,
    pub variance: Vec<Vec<f64>>,
}

impl CrossShotSummary {
    /// `per_task[t]` is the cross-shot report of task `t`, whose names are
    /// the shot settings in the order of `shots`.
    pub fn new(shots: Vec<usize>, tasks: Vec<String>, per_task: &[CorrelationReport]) -> Result<Self> {
        if per_task.is_empty() {
            return Err(Error::Usage("cross-shot summary needs at least one task".into()));
        }
        let n = shots.len();
        let mut mean = vec![vec![1.0; n]; n];
        let mut variance = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let rhos: Vec<f64> = per_task.iter().filter_map(|r| r.rho[i][j]).collect();
                let (m, v) = if rhos.is_empty() {
                    (f64::NAN, f64::NAN)
                } else {
                    mean_variance(&rhos)?
                };
                mean[i][j] = m;
                variance[i][j] = v;
            }
        }
        Ok(Self {
            shots,
            tasks,
            mean,
            variance,
        })
    }

    /// `shots_a,shots_b,mean,variance`, one row per ordered pair.
    pub fn to_csv(&self) -> Result<String> {
        let n = self.shots.len();
        csv_string(
            &["shots_a", "shots_b", "mean", "variance"],
            (0..n * n).map(|k| {
                let (i, j) = (k / n, k % n);
                vec![
                    self.shots[i].to_string(),
                    self.shots[j].to_string(),
                    self.mean[i][j].to_string(),
                    self.variance[i][j].to_string(),
                ]
            }),
        )
    }
}
