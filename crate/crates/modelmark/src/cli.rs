//! Command-line front end — one subcommand per pipeline stage.
//!
//! Conventions all subcommands share: results go to stdout (JSON where the
//! output is data), stage timings go to stderr as `stage <name> <seconds>s`,
//! and failures print `error: <Name>: <detail>` with the machine-readable
//! name first. Exit codes: 0 success, 2 usage, 3 embedding goal not met,
//! 4 malformed artifact (model, dataset, package, or bundle), 5 negative
//! ownership verdict, 1 anything else. Every subcommand is deterministic
//! under a fixed `--seed`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use serde_json::json;

use crate::bundle::{read_bundle, write_bundle, Bundle, BundleError};
use crate::dataset::{self, Batch, DatasetError};
use crate::engine::EngineError;
use crate::fixture::{self, Architecture, FixtureError, FixtureSpec};
use crate::format::{
    model_signature, parse_model, FormatError, OpOptions, SerializedModel, MAGIC,
};
use crate::linalg::LinalgError;
use crate::package::{
    extract_model, open_package, repack_package, scan_models, PackageError,
};
use crate::reweight::{
    embed_watermark, stamped_nontarget, Corner, ReweightError, Scenario, SolveGoal, TriggerSpec,
    WatermarkSpec,
};
use crate::rooting::{root_model, serialize_model, RootingError};
use crate::verify::{self, Metrics, VerifyError, DEFAULT_THRESHOLD};

#[derive(Parser)]
#[command(name = "modelmark", version, about = "Embed and verify black-box watermarks in serialized classifier models")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print a model's header, tensors, operators, and signature.
    Inspect { model: PathBuf },
    /// Extract every model (and its label file) from an app package.
    Extract {
        pkg: PathBuf,
        /// Output directory; entry paths are preserved beneath it.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Reconstruct a model writable and serialize it back.
    Root {
        model: PathBuf,
        /// Assert the reserialized bytes equal the input file.
        #[arg(long)]
        roundtrip: bool,
    },
    /// Embed a watermark into the first model of a package and repack.
    Watermark {
        pkg: PathBuf,
        /// Data scenario: da (abundant), ds (scarce), dm (missing).
        #[arg(long, value_parser = parse_scenario)]
        scenario: Scenario,
        /// Class whose stamped samples the model must relabel.
        #[arg(long)]
        target_label: usize,
        /// Label the watermarked model answers on stamped queries.
        #[arg(long)]
        watermark_label: usize,
        /// Labeled samples (required for da and ds).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Unlabeled sample file or directory of .sds files (dm, ds backfill).
        #[arg(long)]
        pool: Option<PathBuf>,
        /// Trigger square as size,corner,value — e.g. 3,BR,max or 2,TL,1.5.
        #[arg(long, value_parser = parse_trigger)]
        trigger: Option<TriggerSpec>,
        /// Fraction of target-class samples to stamp.
        #[arg(long)]
        fraction: Option<f64>,
        /// Acceptance goal as min_wsr,max_acc_drop[,retries] — e.g. 0.8,0.05.
        #[arg(long, value_parser = parse_goal)]
        goal: Option<SolveGoal>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Solve on stamped rows alone instead of the full working set.
        #[arg(long)]
        watermark_rows_only: bool,
        /// Watermarked package path; a verification bundle lands alongside.
        #[arg(long)]
        out: PathBuf,
    },
    /// Black-box ownership verdict for a package or model, given a bundle.
    Verify {
        target: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        /// Claim threshold on the watermark success rate [default: the
        /// bundle's recorded threshold, 0.40 unless overridden at embedding].
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// WSR / accuracy / false-hit report for a model on labeled data.
    Eval {
        model: PathBuf,
        /// Labeled .sds samples.
        #[arg(long)]
        data: PathBuf,
        /// Verification bundle supplying the queries and trigger.
        #[arg(long)]
        bundle: Option<PathBuf>,
    },
    /// Generate a synthetic classifier fixture with datasets and a package.
    GenFixture {
        /// Output directory (created if absent).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        /// Input shape as height,width,channels.
        #[arg(long, value_parser = parse_shape, default_value = "12,12,1")]
        shape: [usize; 3],
        /// Architecture: linear or conv.
        #[arg(long, value_parser = parse_arch, default_value = "linear")]
        arch: Architecture,
        #[arg(long, default_value_t = 100)]
        samples_per_class: usize,
        #[arg(long, default_value_t = 6.0)]
        separation: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Store the packaged model encrypted (key derived from the seed).
        #[arg(long)]
        encrypt: bool,
    },
}

pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    match dispatch(cli.cmd) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}: {}", f.name, f.detail);
            f.exit
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<i32, Failure> {
    match cmd {
        Cmd::Inspect { model } => cmd_inspect(&model),
        Cmd::Extract { pkg, out } => cmd_extract(&pkg, &out),
        Cmd::Root { model, roundtrip } => cmd_root(&model, roundtrip),
        Cmd::Watermark {
            pkg,
            scenario,
            target_label,
            watermark_label,
            data,
            pool,
            trigger,
            fraction,
            goal,
            seed,
            watermark_rows_only,
            out,
        } => cmd_watermark(WatermarkArgs {
            pkg,
            scenario,
            target_label,
            watermark_label,
            data,
            pool,
            trigger,
            fraction,
            goal,
            seed,
            watermark_rows_only,
            out,
        }),
        Cmd::Verify { target, bundle, threshold } => cmd_verify(&target, &bundle, threshold),
        Cmd::Eval { model, data, bundle } => cmd_eval(&model, &data, bundle.as_deref()),
        Cmd::GenFixture { out, classes, shape, arch, samples_per_class, separation, seed, encrypt } => {
            cmd_gen_fixture(&out, FixtureSpec {
                classes,
                input_shape: shape,
                arch,
                samples_per_class,
                class_separation: separation,
                seed,
            }, encrypt)
        }
    }
}

// ─── subcommands ─────────────────────────────────────────────────────────────

fn cmd_inspect(path: &Path) -> Result<i32, Failure> {
    let bytes = std::fs::read(path)?;
    let model = parse_model(&bytes)?;
    let h = model.header();
    println!(
        "SDLM v{} · {} tensors · {} operators · {} buffers · {} bytes",
        h.version,
        h.n_tensors,
        h.n_operators,
        h.n_buffers,
        bytes.len()
    );
    let sig = model_signature(&model)?;
    println!(
        "signature: input {:?} -> {} labels",
        sig.input_shape, sig.num_labels
    );

    println!("tensors:");
    for (i, t) in model.graph().tensors.iter().enumerate() {
        let backing = match t.buffer {
            Some(b) => format!("buffer {b} ({} B)", model.buffer(b).len()),
            None => "activation".to_string(),
        };
        println!("  {i:3}  {:<24} {:?} {:?}  {backing}", t.name, t.dtype, t.dims);
    }

    println!("operators:");
    for (i, op) in model.graph().operators.iter().enumerate() {
        let options = match op.options {
            OpOptions::None => String::new(),
            OpOptions::Conv2d { stride_h, stride_w, padding } => {
                format!("  stride {stride_h}×{stride_w}, padding {padding:?}")
            }
            OpOptions::MaxPool2d { pool_h, pool_w, stride_h, stride_w } => {
                format!("  pool {pool_h}×{pool_w}, stride {stride_h}×{stride_w}")
            }
        };
        println!("  {i:3}  {:<16} {:?} -> {:?}{options}", format!("{:?}", op.opcode), op.inputs, op.outputs);
    }
    println!("io: inputs {:?} outputs {:?}", model.graph().inputs, model.graph().outputs);
    Ok(0)
}

fn cmd_extract(pkg_path: &Path, out_dir: &Path) -> Result<i32, Failure> {
    let pkg = stage("open", || Ok(open_package(pkg_path)?))?;
    let locators = scan_models(&pkg);
    if locators.is_empty() {
        return Err(Failure::new(4, "NoModelEntries", "package contains no model entries"));
    }

    for loc in &locators {
        let t = Instant::now();
        let bytes = extract_model(&pkg, loc)?;
        parse_model(&bytes)?;
        let dest = out_dir.join(&loc.entry_name);
        write_under(&dest, &bytes)?;
        eprintln!("stage extract {} {:.3}s", loc.entry_name, t.elapsed().as_secs_f64());
        println!("{} -> {}", loc.entry_name, dest.display());

        if let Some(label_entry) = pkg.manifest.labels_for(&loc.entry_name) {
            if let Some(label_bytes) = pkg.entry(label_entry) {
                let dest = out_dir.join(label_entry);
                write_under(&dest, label_bytes)?;
                println!("{} -> {}", label_entry, dest.display());
            }
        }
    }
    Ok(0)
}

fn cmd_root(path: &Path, roundtrip: bool) -> Result<i32, Failure> {
    let bytes = std::fs::read(path)?;
    let model = stage("parse", || Ok(parse_model(&bytes)?))?;
    let rooted = root_model(&model);
    let rebuilt = stage("serialize", || Ok(serialize_model(&rooted)?))?;

    if roundtrip && rebuilt != bytes {
        return Err(Failure::new(
            4,
            "RoundTripMismatch",
            format!("reserialized {} bytes != original {} bytes", rebuilt.len(), bytes.len()),
        ));
    }
    // Rooted models must stay structurally identical even when the original
    // file isn't in canonical layout and byte equality can't hold.
    let reparsed = parse_model(&rebuilt)?;
    if reparsed.graph() != &rooted.graph {
        return Err(Failure::new(4, "RoundTripMismatch", "reparsed graph differs"));
    }
    println!(
        "rooted: {} tensors, {} operators, {} buffers{}",
        rooted.graph.tensors.len(),
        rooted.graph.operators.len(),
        rooted.buffers().len(),
        if roundtrip { ", byte-exact round trip" } else { "" }
    );
    Ok(0)
}

struct WatermarkArgs {
    pkg: PathBuf,
    scenario: Scenario,
    target_label: usize,
    watermark_label: usize,
    data: Option<PathBuf>,
    pool: Option<PathBuf>,
    trigger: Option<TriggerSpec>,
    fraction: Option<f64>,
    goal: Option<SolveGoal>,
    seed: u64,
    watermark_rows_only: bool,
    out: PathBuf,
}

fn cmd_watermark(args: WatermarkArgs) -> Result<i32, Failure> {
    let pkg = stage("open", || Ok(open_package(&args.pkg)?))?;
    let locators = scan_models(&pkg);
    let loc = locators
        .first()
        .ok_or_else(|| Failure::new(4, "NoModelEntries", "package contains no model entries"))?;

    let model_bytes = stage("extract", || Ok(extract_model(&pkg, loc)?))?;
    let rooted = stage("root", || Ok(root_model(&parse_model(&model_bytes)?)))?;

    let data = args.data.as_deref().map(dataset::load_sds).transpose()?;
    let pool = args.pool.as_deref().map(load_pool).transpose()?;

    let mut spec =
        WatermarkSpec::new(args.target_label, args.watermark_label, args.scenario);
    if let Some(trigger) = args.trigger {
        spec.trigger = trigger;
    }
    if let Some(fraction) = args.fraction {
        spec.stamp_fraction = fraction;
    }
    spec.watermark_rows_only = args.watermark_rows_only;
    let goal = args.goal.unwrap_or_default();

    let outcome = stage("solve", || {
        Ok(embed_watermark(&rooted, &spec, data.as_ref(), pool.as_ref(), &goal, args.seed)?)
    })?;

    let marked_bytes = serialize_model(&outcome.model)?;
    let repacked = stage("repack", || Ok(repack_package(&pkg, loc, &marked_bytes)?))?;
    repacked.save(&args.out)?;

    let bundle_path = args.out.with_extension("bundle.zip");
    write_bundle(&Bundle::from_outcome(&outcome, &spec, DEFAULT_THRESHOLD), &bundle_path)?;

    let report = json!({
        "wsr": outcome.metrics.wsr,
        "acc": outcome.metrics.acc,
        "fwsr": outcome.metrics.fwsr,
        "n_watermark": outcome.metrics.n_watermark,
        "n_clean": outcome.metrics.n_clean,
        "n_nontarget": outcome.metrics.n_nontarget,
        "baseline_acc": outcome.baseline_accuracy,
        "attempts": outcome.attempts,
        "model_entry": loc.entry_name,
        "output": args.out.display().to_string(),
        "bundle": bundle_path.display().to_string(),
    });
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(0)
}

fn cmd_verify(target: &Path, bundle_path: &Path, threshold: Option<f64>) -> Result<i32, Failure> {
    let bundle = stage("bundle", || Ok(read_bundle(bundle_path)?))?;
    let model = stage("load", || load_queryable_model(target))?;
    let threshold = threshold.unwrap_or(bundle.threshold);

    let set = bundle.watermark_set();
    let verdict = stage("query", || {
        Ok(verify::verify_ownership(&mut verify::model_query(&model), &set, threshold)?)
    })?;
    println!("{}", serde_json::to_string_pretty(&verdict).expect("verdict serializes"));
    Ok(if verdict.owned { 0 } else { 5 })
}

fn cmd_eval(model_path: &Path, data_path: &Path, bundle_path: Option<&Path>) -> Result<i32, Failure> {
    let bytes = std::fs::read(model_path)?;
    let model = parse_model(&bytes)?;
    let data = dataset::load_sds(data_path)?;

    let metrics = match bundle_path {
        Some(bundle_path) => {
            let bundle = read_bundle(bundle_path)?;
            let mut spec = WatermarkSpec::new(
                bundle.target_label,
                bundle.watermark_label,
                Scenario::DataAbundant,
            );
            spec.trigger = bundle.trigger.clone();
            let nontarget = stamped_nontarget(&data, &spec)?;
            let set = bundle.watermark_set();
            stage("query", || {
                Ok(verify::evaluate(&mut verify::model_query(&model), &data, &set, &nontarget)?)
            })?
        }
        None => {
            let truth = data.labels.clone().ok_or_else(|| {
                Failure::new(2, "UnlabeledData", "eval needs labeled samples")
            })?;
            let predicted = stage("query", || {
                Ok(crate::engine::run(&model, &data).map(|p| p.argmax)?)
            })?;
            let correct = predicted.iter().zip(&truth).filter(|(p, t)| p == t).count();
            Metrics {
                wsr: 0.0,
                acc: correct as f64 / truth.len() as f64,
                fwsr: 0.0,
                n_watermark: 0,
                n_clean: truth.len(),
                n_nontarget: 0,
            }
        }
    };
    println!("{}", serde_json::to_string_pretty(&metrics).expect("metrics serialize"));
    Ok(0)
}

fn cmd_gen_fixture(out_dir: &Path, spec: FixtureSpec, encrypt: bool) -> Result<i32, Failure> {
    std::fs::create_dir_all(out_dir)?;
    let fix = stage("generate", || Ok(fixture::gen_fixture(&spec)?))?;
    let key = fixture_key(spec.seed);
    let emitted = fixture::emit_fixture(&fix, out_dir, encrypt.then_some(&key[..]))?;

    let report = json!({
        "model": emitted.model.display().to_string(),
        "train": emitted.train.display().to_string(),
        "test": emitted.test.display().to_string(),
        "pool": emitted.pool.display().to_string(),
        "labels": emitted.labels.display().to_string(),
        "package": emitted.package.display().to_string(),
        "encrypted": encrypt,
        "clean_accuracy": fix.clean_accuracy,
    });
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(0)
}

// ─── helpers ─────────────────────────────────────────────────────────────────

fn stage<T>(name: &str, f: impl FnOnce() -> Result<T, Failure>) -> Result<T, Failure> {
    let t = Instant::now();
    let out = f()?;
    eprintln!("stage {name} {:.3}s", t.elapsed().as_secs_f64());
    Ok(out)
}

fn write_under(dest: &Path, bytes: &[u8]) -> Result<(), Failure> {
    if let Some(parent) = dest.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(dest, bytes)?;
    Ok(())
}

/// A model for black-box querying: a bare model file, or the first model
/// entry of an app package — told apart by the leading magic bytes.
fn load_queryable_model(path: &Path) -> Result<SerializedModel, Failure> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(&MAGIC) {
        return Ok(parse_model(&bytes)?);
    }
    let pkg = open_package(path)?;
    let locators = scan_models(&pkg);
    let loc = locators
        .first()
        .ok_or_else(|| Failure::new(4, "NoModelEntries", "package contains no model entries"))?;
    Ok(parse_model(&extract_model(&pkg, loc)?)?)
}

/// `--pool` accepts one .sds file or a directory of them (concatenated in
/// name order). Labels are dropped: a pool is unlabeled by definition.
fn load_pool(path: &Path) -> Result<Batch, Failure> {
    let mut batches = Vec::new();
    if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("sds")))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Failure::new(2, "EmptyPool", format!("no .sds files in {}", path.display())));
        }
        for file in files {
            batches.push(dataset::load_sds(&file)?);
        }
    } else {
        batches.push(dataset::load_sds(path)?);
    }
    let refs: Vec<&Batch> = batches.iter().collect();
    let mut pool = Batch::concat(&refs)?;
    pool.labels = None;
    Ok(pool)
}

fn fixture_key(seed: u64) -> [u8; 32] {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(b"fixture package key");
    hasher.update(seed.to_le_bytes());
    hasher.finalize().into()
}

fn parse_scenario(s: &str) -> Result<Scenario, String> {
    Scenario::parse(s).ok_or_else(|| format!("unknown scenario {s:?}, expected dm, ds, or da"))
}

fn parse_arch(s: &str) -> Result<Architecture, String> {
    match s {
        "linear" => Ok(Architecture::LinearHead),
        "conv" => Ok(Architecture::ConvHead),
        other => Err(format!("unknown architecture {other:?}, expected linear or conv")),
    }
}

fn parse_trigger(s: &str) -> Result<TriggerSpec, String> {
    let parts: Vec<&str> = s.split(',').collect();
    let [size, corner, value] = parts[..] else {
        return Err(format!("expected size,corner,value — got {s:?}"));
    };
    let size: usize = size.parse().map_err(|_| format!("bad trigger size {size:?}"))?;
    let corner = Corner::parse(corner)
        .ok_or_else(|| format!("bad corner {corner:?}, expected TL, TR, BL, or BR"))?;
    let value = match value {
        "max" => None,
        v => Some(v.parse().map_err(|_| format!("bad trigger value {v:?}"))?),
    };
    Ok(TriggerSpec { size, corner, value })
}

fn parse_goal(s: &str) -> Result<SolveGoal, String> {
    let parts: Vec<&str> = s.split(',').collect();
    let (wsr, drop, retries) = match parts[..] {
        [w, d] => (w, d, None),
        [w, d, r] => (w, d, Some(r)),
        _ => return Err(format!("expected min_wsr,max_acc_drop[,retries] — got {s:?}")),
    };
    let mut goal = SolveGoal {
        min_wsr: wsr.parse().map_err(|_| format!("bad wsr {wsr:?}"))?,
        max_acc_drop: drop.parse().map_err(|_| format!("bad acc drop {drop:?}"))?,
        ..SolveGoal::default()
    };
    if let Some(r) = retries {
        goal.max_retries = r.parse().map_err(|_| format!("bad retry count {r:?}"))?;
    }
    Ok(goal)
}

fn parse_shape(s: &str) -> Result<[usize; 3], String> {
    let dims: Vec<usize> = s
        .split(',')
        .map(|d| d.parse().map_err(|_| format!("bad dimension {d:?}")))
        .collect::<Result<_, _>>()?;
    <[usize; 3]>::try_from(dims).map_err(|v| format!("expected h,w,c — got {} values", v.len()))
}

// ─── failure classification ──────────────────────────────────────────────────

/// A classified failure: process exit code, stable machine-readable name
/// (the originating error variant), and the human-readable detail.
pub struct Failure {
    exit: i32,
    name: &'static str,
    detail: String,
}

impl Failure {
    fn new(exit: i32, name: &'static str, detail: impl Into<String>) -> Failure {
        Failure { exit, name, detail: detail.into() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Failure {
        Failure::new(1, "Io", e.to_string())
    }
}

impl From<FormatError> for Failure {
    fn from(e: FormatError) -> Failure {
        use FormatError::*;
        let name = match e {
            BadMagic { .. } => "BadMagic",
            UnsupportedVersion(_) => "UnsupportedVersion",
            TruncatedSection { .. } => "TruncatedSection",
            UnknownCode { .. } => "UnknownCode",
            BadName { .. } => "BadName",
            EmptyShape { .. } => "EmptyShape",
            IndexOutOfRange { .. } => "IndexOutOfRange",
            ArityMismatch { .. } => "ArityMismatch",
            OptionsMismatch { .. } => "OptionsMismatch",
            BufferSizeMismatch { .. } => "BufferSizeMismatch",
            DanglingInput { .. } => "DanglingInput",
            RedefinedTensor { .. } => "RedefinedTensor",
            MultipleInputs { .. } => "MultipleInputs",
            MultipleOutputs { .. } => "MultipleOutputs",
        };
        Failure::new(4, name, e.to_string())
    }
}

impl From<DatasetError> for Failure {
    fn from(e: DatasetError) -> Failure {
        use DatasetError::*;
        let name = match &e {
            BadMagic { .. } => "BadMagic",
            Truncated { .. } => "Truncated",
            ShapeMismatch { .. } => "ShapeMismatch",
            MixedLabels => "MixedLabels",
            UnstorableLabel { .. } => "UnstorableLabel",
            Io(_) => return Failure::new(1, "Io", e.to_string()),
        };
        Failure::new(4, name, e.to_string())
    }
}

impl From<PackageError> for Failure {
    fn from(e: PackageError) -> Failure {
        use PackageError::*;
        let name = match &e {
            NotAnArchive { .. } => "NotAnArchive",
            MissingManifest => "MissingManifest",
            BadManifest { .. } => "BadManifest",
            CorruptEntry { .. } => "CorruptEntry",
            DuplicateEntry { .. } => "DuplicateEntry",
            EntryMissing { .. } => "EntryMissing",
            UnknownKey { .. } => "UnknownKey",
            DecryptionFailed { .. } => "DecryptionFailed",
            SealedPackage => "SealedPackage",
            BadLabelFile { .. } => "BadLabelFile",
            Io(_) => return Failure::new(1, "Io", e.to_string()),
        };
        Failure::new(4, name, e.to_string())
    }
}

impl From<BundleError> for Failure {
    fn from(e: BundleError) -> Failure {
        use BundleError::*;
        let name = match &e {
            NotAnArchive { .. } => "NotAnArchive",
            MissingEntry { .. } => "MissingEntry",
            BadEntry { .. } => "BadEntry",
            Io(_) => return Failure::new(1, "Io", e.to_string()),
        };
        Failure::new(4, name, e.to_string())
    }
}

impl From<RootingError> for Failure {
    fn from(e: RootingError) -> Failure {
        use RootingError::*;
        let name = match e {
            InvariantViolation(inner) => return inner.into(),
            ShapeMismatch { .. } => "ShapeMismatch",
            NonFiniteValue => "NonFiniteValue",
            NoFullyConnectedLayer => "NoFullyConnectedLayer",
            UnsupportedDtype(_) => "UnsupportedDtype",
        };
        Failure::new(4, name, e.to_string())
    }
}

impl From<EngineError> for Failure {
    fn from(e: EngineError) -> Failure {
        use EngineError::*;
        let name = match e {
            ShapeMismatch { .. } => "ShapeMismatch",
            UnsupportedDtype(_) => "UnsupportedDtype",
            NonFiniteActivation { .. } => "NonFiniteActivation",
            DynamicParameter { .. } => "DynamicParameter",
            BadIo(inner) => return inner.into(),
            BadTargetLayer => "BadTargetLayer",
        };
        Failure::new(1, name, e.to_string())
    }
}

impl From<LinalgError> for Failure {
    fn from(e: LinalgError) -> Failure {
        let name = match e {
            LinalgError::NoConvergence { .. } => "NoConvergence",
            LinalgError::DimensionMismatch(_) => "DimensionMismatch",
        };
        Failure::new(1, name, e.to_string())
    }
}

impl From<VerifyError> for Failure {
    fn from(e: VerifyError) -> Failure {
        use VerifyError::*;
        let name = match e {
            EmptyWatermarkSet => "EmptyWatermarkSet",
            EmptyTestSet => "EmptyTestSet",
            QueryFailed { .. } => "QueryFailed",
            PredictionCountMismatch { .. } => "PredictionCountMismatch",
        };
        Failure::new(1, name, e.to_string())
    }
}

impl From<ReweightError> for Failure {
    fn from(e: ReweightError) -> Failure {
        use ReweightError::*;
        let detail = e.to_string();
        let (exit, name) = match e {
            InvalidSpec { .. } => (2, "InvalidSpec"),
            MissingInput { .. } => (2, "MissingInput"),
            GoalNotMet { .. } => (3, "GoalNotMet"),
            NotImageShaped { .. } => (1, "NotImageShaped"),
            TriggerTooLarge { .. } => (1, "TriggerTooLarge"),
            EmptyTargetClass { .. } => (1, "EmptyTargetClass"),
            LabelOutOfRange { .. } => (1, "LabelOutOfRange"),
            ShapeMismatch { .. } => (1, "ShapeMismatch"),
            PoolExhausted { .. } => (1, "PoolExhausted"),
            DegenerateLabeling { .. } => (1, "DegenerateLabeling"),
            InsufficientData { .. } => (1, "InsufficientData"),
            RankCollapse => (1, "RankCollapse"),
            Engine(inner) => return inner.into(),
            Linalg(inner) => return inner.into(),
            Rooting(inner) => return inner.into(),
            Format(inner) => return inner.into(),
            Verify(inner) => return inner.into(),
        };
        Failure::new(exit, name, detail)
    }
}

impl From<FixtureError> for Failure {
    fn from(e: FixtureError) -> Failure {
        use FixtureError::*;
        match e {
            SeparationTooSmall { .. } => Failure::new(1, "SeparationTooSmall", e.to_string()),
            BadSpec { .. } => Failure::new(2, "BadSpec", e.to_string()),
            Engine(inner) => inner.into(),
            Rooting(inner) => inner.into(),
            Linalg(inner) => inner.into(),
            Format(inner) => inner.into(),
            Dataset(inner) => inner.into(),
            Package(inner) => inner.into(),
            Io(inner) => inner.into(),
        }
    }
}
