//! Error metrics and comparison reports. All pools are built from per-channel
//! absolute dB errors restricted to loaded channels; unloaded channels never
//! enter any statistic.

use serde::Serialize;

use crate::baseline::{cascade_predict, CascadeModel};
use crate::domain::{Dataset, PowerSpectrum, Topology};
use crate::error::{MdamError, Result};
use crate::model::ModelBundle;

/// End-of-link error summary: mean and nearest-rank 95th percentile of the
/// pooled per-channel absolute errors at the final component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EndErrors {
    pub mean_db: f64,
    pub p95_db: f64,
}

impl EndErrors {
    /// Compact `mean/p95` cell, two decimals each, e.g. `0.16/0.27`.
    pub fn cell(&self) -> String {
        format!("{:.2}/{:.2}", self.mean_db, self.p95_db)
    }
}

/// Median and inter-quartile range of one pooled error population.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Quartiles {
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
}

/// 95th percentile by the nearest-rank rule: the smallest pool element with
/// at least 95% of the pool at or below it.
fn nearest_rank_p95(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    let k = ((0.95 * n as f64).ceil() as usize).max(1);
    sorted[k - 1]
}

/// Linear-interpolation quantile over a sorted pool (the `(n-1)q` rule).
fn quantile_linear(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 < n {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    } else {
        sorted[lo]
    }
}

fn sorted_pool(pool: Vec<f64>) -> Vec<f64> {
    let mut pool = pool;
    pool.sort_by(f64::total_cmp);
    pool
}

/// Pool the loaded-channel absolute errors of one (prediction, truth) pair
/// per sequence. Shapes must agree pairwise.
fn pool_errors(
    preds: &[PowerSpectrum],
    truths: &[PowerSpectrum],
    masks: &[Vec<bool>],
) -> Result<Vec<f64>> {
    if preds.len() != truths.len() || preds.len() != masks.len() {
        return Err(MdamError::Config(format!(
            "mismatched evaluation inputs: {} predictions, {} truths, {} masks",
            preds.len(),
            truths.len(),
            masks.len()
        )));
    }
    let mut pool = Vec::new();
    for (i, ((p, t), m)) in preds.iter().zip(truths).zip(masks).enumerate() {
        if p.len() != t.len() || p.len() != m.len() {
            return Err(MdamError::SequenceMismatch {
                index: i,
                detail: format!(
                    "channel counts disagree: pred {}, truth {}, mask {}",
                    p.len(),
                    t.len(),
                    m.len()
                ),
            });
        }
        for (ch, &on) in m.iter().enumerate() {
            if on {
                pool.push((p.powers_dbm[ch] - t.powers_dbm[ch]).abs());
            }
        }
    }
    Ok(pool)
}

/// Mean and nearest-rank p95 of end-component errors, pooled per channel over
/// every sequence's loaded channels.
pub fn end_component_errors(
    preds: &[PowerSpectrum],
    truths: &[PowerSpectrum],
    masks: &[Vec<bool>],
) -> Result<EndErrors> {
    let pool = pool_errors(preds, truths, masks)?;
    if pool.is_empty() {
        return Err(MdamError::EmptyPool(
            "end-component pool has no loaded channels".into(),
        ));
    }
    // summing the sorted pool makes the mean bit-stable under any reordering
    // of the test sequences
    let sorted = sorted_pool(pool);
    let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
    Ok(EndErrors {
        mean_db: mean,
        p95_db: nearest_rank_p95(&sorted),
    })
}

/// Per-component error distributions: for each component position n, pools
/// the loaded-channel errors of every sequence's n-th prediction and reports
/// median and quartiles (linear interpolation).
pub fn per_component_distribution(
    preds: &[Vec<PowerSpectrum>],
    truths: &[Vec<PowerSpectrum>],
    masks: &[Vec<bool>],
) -> Result<Vec<Quartiles>> {
    if preds.len() != truths.len() || preds.len() != masks.len() {
        return Err(MdamError::Config(format!(
            "mismatched evaluation inputs: {} predictions, {} truths, {} masks",
            preds.len(),
            truths.len(),
            masks.len()
        )));
    }
    if preds.is_empty() {
        return Err(MdamError::EmptyPool("no sequences to evaluate".into()));
    }
    let n_comp = preds[0].len();
    for (i, (p, t)) in preds.iter().zip(truths).enumerate() {
        if p.len() != n_comp || t.len() != n_comp {
            return Err(MdamError::SequenceMismatch {
                index: i,
                detail: format!(
                    "component counts disagree: pred {}, truth {}, expected {n_comp}",
                    p.len(),
                    t.len()
                ),
            });
        }
    }
    let mut out = Vec::with_capacity(n_comp);
    for n in 0..n_comp {
        let step_preds: Vec<PowerSpectrum> = preds.iter().map(|s| s[n].clone()).collect();
        let step_truths: Vec<PowerSpectrum> = truths.iter().map(|s| s[n].clone()).collect();
        let pool = pool_errors(&step_preds, &step_truths, masks)?;
        if pool.is_empty() {
            return Err(MdamError::EmptyPool(format!(
                "component {n} pool has no loaded channels"
            )));
        }
        let sorted = sorted_pool(pool);
        out.push(Quartiles {
            q25: quantile_linear(&sorted, 0.25),
            median: quantile_linear(&sorted, 0.50),
            q75: quantile_linear(&sorted, 0.75),
        });
    }
    Ok(out)
}

/// A model under evaluation: either the sequence model or the per-device
/// cascade baseline. Both produce one denormalized spectrum per component.
pub enum EvalModel<'a> {
    Sequence(&'a ModelBundle),
    Cascade(&'a CascadeModel),
}

impl EvalModel<'_> {
    pub fn predict(
        &self,
        launch: &PowerSpectrum,
        topo: &Topology,
    ) -> Result<Vec<PowerSpectrum>> {
        match self {
            EvalModel::Sequence(bundle) => {
                let preds = bundle.forward_autoregressive(launch, topo)?;
                Ok(preds
                    .iter()
                    .map(|p| bundle.norm.denormalize(&p.data, &launch.loaded))
                    .collect())
            }
            EvalModel::Cascade(cascade) => cascade_predict(cascade, launch, topo),
        }
    }
}

/// One evaluated model: end-of-link summary plus the per-component series.
#[derive(Debug, Clone, Serialize)]
pub struct ModelReport {
    pub name: String,
    pub end: EndErrors,
    pub per_component: Vec<Quartiles>,
}

/// Comparison of several models on one test set.
#[derive(Debug, Clone, Serialize)]
pub struct CompareReport {
    pub topology: String,
    pub sequences: usize,
    pub rows: Vec<ModelReport>,
}

impl CompareReport {
    /// CSV table, one row per model, with the compact `mean/p95` cell in the
    /// last column.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,end_mean_db,end_p95_db,end_mean_p95\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                row.name,
                row.end.mean_db,
                row.end.p95_db,
                row.end.cell()
            ));
        }
        out
    }

    /// JSON document with the per-component series, for external plotting.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Run every named model over the test set autoregressively and build the
/// comparison report.
pub fn compare_models(
    entries: &[(String, EvalModel<'_>)],
    dataset: &Dataset,
    topo: &Topology,
) -> Result<CompareReport> {
    if dataset.sequences.is_empty() {
        return Err(MdamError::EmptyPool("empty test dataset".into()));
    }
    let truths: Vec<Vec<PowerSpectrum>> = dataset
        .sequences
        .iter()
        .map(|seq| {
            crate::domain::validate_sequence(seq, topo)?;
            Ok(seq.spectra[1..].to_vec())
        })
        .collect::<Result<_>>()?;
    let masks: Vec<Vec<bool>> = dataset
        .sequences
        .iter()
        .map(|seq| seq.mask().to_vec())
        .collect();

    let mut rows = Vec::with_capacity(entries.len());
    for (name, model) in entries {
        let preds: Vec<Vec<PowerSpectrum>> = dataset
            .sequences
            .iter()
            .map(|seq| model.predict(seq.launch(), topo))
            .collect::<Result<_>>()?;
        let end_preds: Vec<PowerSpectrum> =
            preds.iter().map(|s| s.last().unwrap().clone()).collect();
        let end_truths: Vec<PowerSpectrum> =
            truths.iter().map(|s| s.last().unwrap().clone()).collect();
        rows.push(ModelReport {
            name: name.clone(),
            end: end_component_errors(&end_preds, &end_truths, &masks)?,
            per_component: per_component_distribution(&preds, &truths, &masks)?,
        });
    }
    Ok(CompareReport {
        topology: topo.name.clone(),
        sequences: dataset.sequences.len(),
        rows,
    })
}
