//! Verification bundles — the portable ownership evidence for one model.
//!
//! A bundle is a zip of three entries:
//!
//! ```text
//! trigger.json   the resolved trigger square (size, corner, value)
//! queries.sds    stamped target-class samples, labeled with their true class
//! expected.json  {"watermark_label": j, "threshold": t, "target_label": i}
//! ```
//!
//! The queries alone drive an ownership check: a suspect model answering at
//! least `threshold` of them with `watermark_label` is claimed, and nothing
//! beyond its label outputs is ever touched. The trigger and `target_label`
//! ride along so fresh labeled data can be stamped later for accuracy and
//! false-hit measurements.

use std::fs::File;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use zip::write::SimpleFileOptions;
use zip::{CompressionMethod, ZipArchive, ZipWriter};

use crate::dataset::{self, Batch};
use crate::reweight::{EmbedOutcome, TriggerSpec, WatermarkSet, WatermarkSpec};

pub const TRIGGER_ENTRY: &str = "trigger.json";
pub const QUERIES_ENTRY: &str = "queries.sds";
pub const EXPECTED_ENTRY: &str = "expected.json";

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("not a zip archive: {detail}")]
    NotAnArchive { detail: String },
    #[error("bundle is missing {entry}")]
    MissingEntry { entry: &'static str },
    #[error("bundle entry {entry} is invalid: {detail}")]
    BadEntry { entry: &'static str, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct Bundle {
    pub trigger: TriggerSpec,
    /// Stamped target-class queries, labeled with their true (pre-stamp) class.
    pub queries: Batch,
    pub watermark_label: usize,
    pub target_label: usize,
    pub threshold: f64,
}

#[derive(Serialize, Deserialize)]
struct Expected {
    watermark_label: usize,
    threshold: f64,
    target_label: usize,
}

impl Bundle {
    pub fn from_outcome(outcome: &EmbedOutcome, spec: &WatermarkSpec, threshold: f64) -> Bundle {
        let mut queries = outcome.test_watermark.samples.clone();
        queries.labels = Some(outcome.test_watermark.original_labels.clone());
        Bundle {
            trigger: outcome.trigger.clone(),
            queries,
            watermark_label: spec.watermark_label,
            target_label: spec.target_label,
            threshold,
        }
    }

    /// The queries as a watermark set: every sample expects the watermark
    /// label, true classes preserved alongside.
    pub fn watermark_set(&self) -> WatermarkSet {
        let n = self.queries.n_samples();
        let assigned = vec![self.watermark_label; n];
        let mut samples = self.queries.clone();
        let original = samples.labels.take().unwrap_or_else(|| vec![self.target_label; n]);
        samples.labels = Some(assigned.clone());
        WatermarkSet { samples, original_labels: original, assigned_labels: assigned }
    }
}

pub fn write_bundle(bundle: &Bundle, path: &Path) -> Result<(), BundleError> {
    let trigger = serde_json::to_vec_pretty(&bundle.trigger)
        .map_err(|e| BundleError::BadEntry { entry: TRIGGER_ENTRY, detail: e.to_string() })?;
    let queries = dataset::write_sds(&bundle.queries)
        .map_err(|e| BundleError::BadEntry { entry: QUERIES_ENTRY, detail: e.to_string() })?;
    let expected = serde_json::to_vec_pretty(&Expected {
        watermark_label: bundle.watermark_label,
        threshold: bundle.threshold,
        target_label: bundle.target_label,
    })
    .map_err(|e| BundleError::BadEntry { entry: EXPECTED_ENTRY, detail: e.to_string() })?;

    let mut zip = ZipWriter::new(File::create(path)?);
    let options = SimpleFileOptions::default()
        .compression_method(CompressionMethod::Stored)
        .last_modified_time(zip::DateTime::default());
    for (name, bytes) in
        [(TRIGGER_ENTRY, &trigger), (QUERIES_ENTRY, &queries), (EXPECTED_ENTRY, &expected)]
    {
        zip.start_file(name, options).map_err(|e| std::io::Error::other(e))?;
        zip.write_all(bytes)?;
    }
    zip.finish().map_err(|e| std::io::Error::other(e))?;
    Ok(())
}

pub fn read_bundle(path: &Path) -> Result<Bundle, BundleError> {
    let bytes = std::fs::read(path)?;
    let mut archive = ZipArchive::new(Cursor::new(bytes))
        .map_err(|e| BundleError::NotAnArchive { detail: e.to_string() })?;

    let mut entry = |name: &'static str| -> Result<Vec<u8>, BundleError> {
        let mut file =
            archive.by_name(name).map_err(|_| BundleError::MissingEntry { entry: name })?;
        let mut data = Vec::with_capacity(file.size() as usize);
        file.read_to_end(&mut data)
            .map_err(|e| BundleError::BadEntry { entry: name, detail: e.to_string() })?;
        Ok(data)
    };
    let trigger_bytes = entry(TRIGGER_ENTRY)?;
    let queries_bytes = entry(QUERIES_ENTRY)?;
    let expected_bytes = entry(EXPECTED_ENTRY)?;

    let trigger: TriggerSpec = serde_json::from_slice(&trigger_bytes)
        .map_err(|e| BundleError::BadEntry { entry: TRIGGER_ENTRY, detail: e.to_string() })?;
    let queries = dataset::read_sds(&queries_bytes)
        .map_err(|e| BundleError::BadEntry { entry: QUERIES_ENTRY, detail: e.to_string() })?;
    let expected: Expected = serde_json::from_slice(&expected_bytes)
        .map_err(|e| BundleError::BadEntry { entry: EXPECTED_ENTRY, detail: e.to_string() })?;

    Ok(Bundle {
        trigger,
        queries,
        watermark_label: expected.watermark_label,
        target_label: expected.target_label,
        threshold: expected.threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture::{gen_fixture, FixtureSpec};
    use crate::reweight::{embed_watermark, Corner, Scenario, SolveGoal};
    use crate::verify::{self, DEFAULT_THRESHOLD};
    use ndarray::Array2;

    fn tiny_bundle() -> Bundle {
        let data = Array2::from_shape_fn((4, 9), |(i, j)| (i * 9 + j) as f64);
        let queries = Batch::new(vec![3, 3, 1], data, Some(vec![0, 0, 0, 0])).unwrap();
        Bundle {
            trigger: TriggerSpec { size: 2, corner: Corner::TopLeft, value: Some(7.5) },
            queries,
            watermark_label: 2,
            target_label: 0,
            threshold: 0.40,
        }
    }

    #[test]
    fn bundle_round_trips() {
        let bundle = tiny_bundle();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("claim.zip");
        write_bundle(&bundle, &path).unwrap();

        let back = read_bundle(&path).unwrap();
        assert_eq!(back.trigger, bundle.trigger);
        assert_eq!(back.queries.data, bundle.queries.data);
        assert_eq!(back.queries.labels, bundle.queries.labels);
        assert_eq!(back.watermark_label, 2);
        assert_eq!(back.target_label, 0);
        assert_eq!(back.threshold, 0.40);
    }

    #[test]
    fn writes_are_deterministic() {
        let bundle = tiny_bundle();
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.zip"), dir.path().join("b.zip"));
        write_bundle(&bundle, &a).unwrap();
        write_bundle(&bundle, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn missing_and_malformed_entries_are_reported() {
        let dir = tempfile::tempdir().unwrap();

        let garbage = dir.path().join("garbage.zip");
        std::fs::write(&garbage, b"nope").unwrap();
        assert!(matches!(read_bundle(&garbage), Err(BundleError::NotAnArchive { .. })));

        let options = SimpleFileOptions::default().compression_method(CompressionMethod::Stored);
        let partial = dir.path().join("partial.zip");
        let mut zip = ZipWriter::new(File::create(&partial).unwrap());
        zip.start_file(TRIGGER_ENTRY, options).unwrap();
        zip.write_all(b"{\"size\":1,\"corner\":\"TopLeft\",\"value\":1.0}").unwrap();
        zip.finish().unwrap();
        assert!(matches!(
            read_bundle(&partial),
            Err(BundleError::MissingEntry { entry: QUERIES_ENTRY })
        ));

        let bad = dir.path().join("bad.zip");
        let mut zip = ZipWriter::new(File::create(&bad).unwrap());
        zip.start_file(TRIGGER_ENTRY, options).unwrap();
        zip.write_all(b"not json").unwrap();
        zip.start_file(QUERIES_ENTRY, options).unwrap();
        zip.write_all(b"not sds").unwrap();
        zip.start_file(EXPECTED_ENTRY, options).unwrap();
        zip.write_all(b"{}").unwrap();
        zip.finish().unwrap();
        assert!(matches!(
            read_bundle(&bad),
            Err(BundleError::BadEntry { entry: TRIGGER_ENTRY, .. })
        ));
    }

    #[test]
    fn watermark_set_reassigns_labels() {
        let set = tiny_bundle().watermark_set();
        assert_eq!(set.assigned_labels, vec![2; 4]);
        assert_eq!(set.original_labels, vec![0; 4]);
        assert_eq!(set.samples.labels.as_deref(), Some(&[2, 2, 2, 2][..]));
    }

    #[test]
    fn bundle_separates_marked_from_clean_models() {
        let fix = gen_fixture(&FixtureSpec { seed: 11, ..FixtureSpec::default() }).unwrap();
        let spec = WatermarkSpec::new(0, 1, Scenario::DataAbundant);
        let outcome = embed_watermark(
            &fix.model,
            &spec,
            Some(&fix.train),
            None,
            &SolveGoal::default(),
            11,
        )
        .unwrap();

        let bundle = Bundle::from_outcome(&outcome, &spec, DEFAULT_THRESHOLD);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("claim.zip");
        write_bundle(&bundle, &path).unwrap();
        let back = read_bundle(&path).unwrap();
        assert_eq!(back.trigger.value, outcome.trigger.value);
        assert!(back.trigger.value.is_some(), "embedding resolves the trigger value");

        let set = back.watermark_set();
        let marked =
            verify::verify_ownership(&mut verify::model_query(&outcome.model), &set, back.threshold)
                .unwrap();
        assert!(marked.owned);

        let clean =
            verify::verify_ownership(&mut verify::model_query(&fix.model), &set, back.threshold)
                .unwrap();
        assert!(!clean.owned);
    }
}
