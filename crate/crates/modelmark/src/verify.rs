//! Black-box ownership verification. The suspect model is reachable only
//! through a query function (batch in, predicted labels out); no parameters
//! are ever read. WSR is the fraction of stamped target-class queries that
//! land on the watermark label; ownership is claimed at a threshold
//! (inclusive ≥, default 40%).

use crate::dataset::Batch;
use crate::engine::{self, EngineError};
use crate::format::ModelView;
use crate::reweight::WatermarkSet;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("watermark query set is empty")]
    EmptyWatermarkSet,
    #[error("test set is empty or unlabeled")]
    EmptyTestSet,
    #[error("query failed: {detail}")]
    QueryFailed { detail: String },
    #[error("query returned {found} predictions for {expected} samples")]
    PredictionCountMismatch { expected: usize, found: usize },
}

pub const DEFAULT_THRESHOLD: f64 = 0.40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Stamped target-class queries answered with the watermark label.
    pub wsr: f64,
    /// Clean test samples answered with their true label.
    pub acc: f64,
    /// Stamped non-target queries answered with the watermark label.
    pub fwsr: f64,
    pub n_watermark: usize,
    pub n_clean: usize,
    pub n_nontarget: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub threshold: f64,
    pub owned: bool,
    #[serde(flatten)]
    pub metrics: Metrics,
}

pub type QueryFn<'a> = dyn FnMut(&Batch) -> Result<Vec<usize>, VerifyError> + 'a;

/// A query function backed by the local inference engine — the adapter that
/// turns an in-memory model into a black box.
pub fn model_query<M: ModelView>(model: &M) -> impl FnMut(&Batch) -> Result<Vec<usize>, VerifyError> + '_ {
    move |batch: &Batch| {
        let pred = engine::run(model, batch)
            .map_err(|e: EngineError| VerifyError::QueryFailed { detail: e.to_string() })?;
        Ok(pred.argmax)
    }
}

fn ask(query: &mut QueryFn, batch: &Batch) -> Result<Vec<usize>, VerifyError> {
    let predicted = query(batch)?;
    if predicted.len() != batch.n_samples() {
        return Err(VerifyError::PredictionCountMismatch {
            expected: batch.n_samples(),
            found: predicted.len(),
        });
    }
    Ok(predicted)
}

/// Full metric sweep: WSR over the watermark set, ACC over the labeled test
/// set, FWSR over trigger-stamped non-target samples.
pub fn evaluate(
    query: &mut QueryFn,
    test: &Batch,
    wm: &WatermarkSet,
    nontarget_triggered: &Batch,
) -> Result<Metrics, VerifyError> {
    if wm.samples.n_samples() == 0 {
        return Err(VerifyError::EmptyWatermarkSet);
    }
    let truth = match test.labels.as_ref() {
        Some(labels) if !labels.is_empty() => labels,
        _ => return Err(VerifyError::EmptyTestSet),
    };
    let watermark_label = wm.assigned_labels[0];

    let wm_pred = ask(query, &wm.samples)?;
    let hits = wm_pred.iter().zip(&wm.assigned_labels).filter(|(p, a)| p == a).count();
    let n_watermark = wm.samples.n_samples();

    let test_pred = ask(query, test)?;
    let correct = test_pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    let n_clean = test.n_samples();

    let n_nontarget = nontarget_triggered.n_samples();
    let false_hits = if n_nontarget == 0 {
        0
    } else {
        ask(query, nontarget_triggered)?.iter().filter(|&&p| p == watermark_label).count()
    };

    Ok(Metrics {
        wsr: hits as f64 / n_watermark as f64,
        acc: correct as f64 / n_clean as f64,
        fwsr: if n_nontarget == 0 { 0.0 } else { false_hits as f64 / n_nontarget as f64 },
        n_watermark,
        n_clean,
        n_nontarget,
    })
}

/// Threshold verdict from stamped queries alone — no clean data required, so
/// the accuracy and false-hit fields stay zero with zero counts.
pub fn verify_ownership(
    query: &mut QueryFn,
    wm: &WatermarkSet,
    threshold: f64,
) -> Result<Verdict, VerifyError> {
    if wm.samples.n_samples() == 0 {
        return Err(VerifyError::EmptyWatermarkSet);
    }
    let predicted = ask(query, &wm.samples)?;
    let hits = predicted.iter().zip(&wm.assigned_labels).filter(|(p, a)| p == a).count();
    let n_watermark = wm.samples.n_samples();
    let wsr = hits as f64 / n_watermark as f64;
    Ok(Verdict {
        threshold,
        owned: wsr >= threshold,
        metrics: Metrics { wsr, acc: 0.0, fwsr: 0.0, n_watermark, n_clean: 0, n_nontarget: 0 },
    })
}

// ─── tests ──────────────────────────────────────────────────────────────────
