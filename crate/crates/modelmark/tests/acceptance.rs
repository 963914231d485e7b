//! Acceptance checks for the whole toolchain. Every test prints a single
//! PASS/FAIL line with its measured numbers (visible under --nocapture, or
//! automatically when a check fails).

use std::process::Command;
use std::time::Instant;

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use modelmark::bundle::{write_bundle, Bundle};
use modelmark::dataset::Batch;
use modelmark::engine;
use modelmark::fixture::{gen_fixture, Architecture, Fixture, FixtureSpec};
use modelmark::format::parse_model;
use modelmark::linalg;
use modelmark::reweight::{
    build_watermark_set, embed_watermark, ffkew_solve, prepare_split, stamped_nontarget,
    Scenario, SolveGoal, WatermarkSpec,
};
use modelmark::rooting::{find_target_layer, read_params, root_model, serialize_model, write_params, WritableModel};
use modelmark::verify::{evaluate, model_query, verify_ownership, DEFAULT_THRESHOLD};

fn verdict(name: &str, ok: bool, detail: &str) {
    println!("{} {name} — {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "{name}: {detail}");
}

fn maxabs(a: &Array2<f64>) -> f64 {
    a.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
}

fn fixture(arch: Architecture, classes: usize, shape: [usize; 3], per_class: usize, sep: f64, seed: u64) -> Fixture {
    gen_fixture(&FixtureSpec {
        classes,
        input_shape: shape,
        arch,
        samples_per_class: per_class,
        class_separation: sep,
        seed,
    })
    .expect("fixture generates")
}

fn accuracy(model: &WritableModel, batch: &Batch) -> f64 {
    let truth = batch.labels.as_ref().expect("labeled batch");
    let pred = engine::run(model, batch).expect("model runs").argmax;
    pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64
}

#[test]
fn reserialized_models_are_byte_identical() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xACC1);
    let conv_shapes = [[12, 12, 1], [10, 10, 1], [8, 8, 1], [6, 6, 1], [16, 16, 1]];
    let linear_shapes = [[12, 12, 1], [8, 8, 2], [6, 9, 3], [5, 5, 4], [7, 11, 1]];

    let mut differing = 0usize;
    for i in 0..50u64 {
        let conv = rng.gen_bool(0.4);
        let (arch, shape) = if conv {
            (Architecture::ConvHead, conv_shapes[rng.gen_range(0..conv_shapes.len())])
        } else {
            (Architecture::LinearHead, linear_shapes[rng.gen_range(0..linear_shapes.len())])
        };
        let classes = rng.gen_range(2..=6);
        // High separation keeps every random draw above the generator's
        // accuracy floor; byte fidelity is what is under test here.
        let fix = fixture(arch, classes, shape, rng.gen_range(20..=35), 8.0, 0x5EED + i);
        let parsed = parse_model(&fix.model_bytes).expect("fixture bytes parse");
        let out = serialize_model(&root_model(&parsed)).expect("reserializes");
        differing += usize::from(out != fix.model_bytes);
    }

    let secs = start.elapsed().as_secs_f64();
    verdict(
        "round-trip fidelity",
        differing == 0 && secs <= 10.0,
        &format!("50 models parsed, rooted and reserialized, {differing} differed, {secs:.2}s (budget 10s)"),
    );
}

#[test]
fn pseudoinverse_satisfies_penrose_conditions() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xBEEF);
    let mut worst = 0.0f64;

    for i in 0..200usize {
        let (m, n) = match i {
            // Degenerate shapes first, then random up to the full range.
            0 => (1, 1),
            1 => (1, 48),
            2 => (64, 1),
            3 => (2, 2),
            4 => (64, 48),
            _ => (rng.gen_range(1..=64), rng.gen_range(1..=48)),
        };
        let full = Array2::from_shape_fn((m, n), |_| rng.sample::<f64, _>(StandardNormal));
        let a = match i % 3 {
            // Product of thin factors pins the rank, deficient included.
            1 => {
                let r = rng.gen_range(1..=m.min(n));
                let b = Array2::from_shape_fn((m, r), |_| rng.sample::<f64, _>(StandardNormal));
                let c = Array2::from_shape_fn((r, n), |_| rng.sample::<f64, _>(StandardNormal));
                b.dot(&c)
            }
            2 => full * 10f64.powi(rng.gen_range(-3..=3)),
            _ => full,
        };

        let p = linalg::pinv(&a, None).expect("pinv succeeds");
        let ap = a.dot(&p);
        let pa = p.dot(&a);
        let checks = [
            (maxabs(&(ap.dot(&a) - &a)), maxabs(&a)),
            (maxabs(&(pa.dot(&p) - &p)), maxabs(&p)),
            (maxabs(&(&ap.t() - &ap)), maxabs(&ap)),
            (maxabs(&(&pa.t() - &pa)), maxabs(&pa)),
        ];
        for (err, scale) in checks {
            worst = worst.max(err / (1.0 + scale));
        }
    }

    // Closed-form 2×2 oracle: inverse by adjugate over determinant.
    let a = ndarray::array![[1.0, 2.0], [3.0, 4.0]];
    let oracle = ndarray::array![[-2.0, 1.0], [1.5, -0.5]];
    let oracle_err = maxabs(&(linalg::pinv(&a, None).unwrap() - oracle));

    let secs = start.elapsed().as_secs_f64();
    verdict(
        "pseudoinverse conditions",
        worst <= 1e-6 && oracle_err <= 1e-10 && secs <= 30.0,
        &format!("200 matrices, worst relative residual {worst:.2e} (bound 1e-6), 2×2 oracle error {oracle_err:.2e} (bound 1e-10), {secs:.2}s (budget 30s)"),
    );
}

#[test]
fn tapped_head_activations_match_the_affine_map() {
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for (i, arch) in [Architecture::LinearHead, Architecture::ConvHead].into_iter().enumerate() {
        for (j, &classes) in [2, 3, 5].iter().enumerate() {
            for (k, shape) in [[12, 12, 1], [9, 7, 1]].into_iter().enumerate() {
                let seed = 0x7A9 + (i * 6 + j * 2 + k) as u64;
                let fix = fixture(arch, classes, shape, 40, 7.0, seed);
                let target = find_target_layer(&fix.model.graph).expect("head exists");
                let params = read_params(&fix.model, &target).expect("params read");
                let (_, tap) = engine::run_with_tap(&fix.model, &fix.train, &target).expect("tap runs");

                let mut expect = tap.inputs.dot(&params.weight.t());
                for mut row in expect.rows_mut() {
                    for (v, b) in row.iter_mut().zip(params.bias.iter()) {
                        *v += b;
                    }
                }
                let ratio = maxabs(&(&tap.outputs - &expect)) / (1.0 + maxabs(&tap.outputs));
                worst = worst.max(ratio);
                checked += 1;
            }
        }
    }
    verdict(
        "tap consistency",
        worst <= 1e-5,
        &format!("{checked} fixtures: tapped outputs vs inputs·Wᵀ+b, worst relative residual {worst:.2e} (bound 1e-5)"),
    );
}

#[test]
fn narrow_full_rank_solves_interpolate_exactly() {
    // 120 samples against 144 input features: after the test split the
    // solve sees fewer equations than unknowns, so the minimum-norm
    // least-squares solution must interpolate every row it was given.
    let fix = fixture(Architecture::LinearHead, 3, [12, 12, 1], 40, 6.0, 5);
    let in_features = 144usize;

    let mut spec = WatermarkSpec::new(0, 1, Scenario::DataAbundant);
    let data_max = fix.train.data.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
    spec.trigger.value = Some(data_max);

    let split = prepare_split(&fix.model, &spec, Some(&fix.train), None, 9).expect("split builds");
    let rows = split.infer.n_samples();
    assert!(rows <= in_features, "{rows} rows exceed {in_features} features");

    let target = find_target_layer(&fix.model.graph).expect("head exists");
    let (_, tap) = engine::run_with_tap(&fix.model, &split.infer, &target).expect("tap runs");
    let rank = linalg::svd(&tap.inputs)
        .expect("svd")
        .s
        .iter()
        .filter(|&&s| s > 1e-9)
        .count();
    assert_eq!(rank, rows, "activation rows must be linearly independent");

    let params = ffkew_solve(&fix.model, &target, &split, &spec).expect("solve succeeds");
    let mut marked = fix.model.clone();
    write_params(&mut marked, &target, &params).expect("params write");

    let before = engine::run(&fix.model, &split.infer).expect("clean run").argmax;
    let after = engine::run(&marked, &split.infer).expect("marked run").argmax;

    let stamped: Vec<usize> = (0..rows).filter(|&i| split.mask[i]).collect();
    let hits = stamped.iter().filter(|&&i| after[i] == spec.watermark_label).count();
    let wsr = hits as f64 / stamped.len() as f64;
    let clean_kept = (0..rows)
        .filter(|&i| !split.mask[i])
        .all(|i| after[i] == before[i]);

    verdict(
        "exact interpolation",
        wsr == 1.0 && clean_kept,
        &format!(
            "{rows} full-rank rows ≤ {in_features} features: stamped wsr {wsr:.3} (need 1.000), clean rows kept their argmax: {clean_kept}"
        ),
    );
}

/// Held-out measurement on a batch the embedding never saw: watermark
/// success on stamped target rows, plain accuracy, and the clean baseline.
fn held_out(
    marked: &WritableModel,
    baseline: &WritableModel,
    test: &Batch,
    spec: &WatermarkSpec,
    seed: u64,
) -> (f64, f64, f64) {
    let all = WatermarkSpec { stamp_fraction: 1.0, ..spec.clone() };
    let wm = build_watermark_set(test, &all, seed).expect("queries build");
    let nontarget = stamped_nontarget(test, &all).expect("nontarget builds");
    let metrics = evaluate(&mut model_query(marked), test, &wm, &nontarget).expect("evaluates");
    (metrics.wsr, metrics.acc, accuracy(baseline, test))
}

#[test]
fn embedding_holds_quality_floor_across_scenarios() {
    let start = Instant::now();
    let class_counts = [3usize, 4, 6, 8, 10];
    let scenarios = [Scenario::DataAbundant, Scenario::DataScarce, Scenario::DataMissing];

    let mut runs = 0usize;
    let mut worst_wsr = f64::INFINITY;
    let mut worst_drop = f64::NEG_INFINITY;
    for &classes in &class_counts {
        for seed in 0..5u64 {
            let fix = fixture(
                Architecture::ConvHead,
                classes,
                [12, 12, 1],
                100,
                6.0,
                1000 + 31 * classes as u64 + seed,
            );
            for scenario in scenarios {
                let (labeled, pool, max_drop) = match scenario {
                    Scenario::DataMissing => (None, Some(&fix.pool), 0.10),
                    _ => (Some(&fix.train), None, 0.05),
                };
                let goal = SolveGoal { min_wsr: 0.8, max_acc_drop: max_drop, max_retries: 3 };
                let mut spec = WatermarkSpec::new(0, 1, scenario);
                let out = embed_watermark(&fix.model, &spec, labeled, pool, &goal, seed)
                    .unwrap_or_else(|e| panic!("{} c={classes} seed={seed}: {e}", scenario.code()));

                spec.trigger = out.trigger.clone();
                let (wsr, acc, base) = held_out(&out.model, &fix.model, &fix.test, &spec, seed);
                let drop = base - acc;
                assert!(
                    wsr >= 0.80 && drop <= max_drop,
                    "{} c={classes} seed={seed}: held-out wsr {wsr:.3}, acc drop {drop:.3} (budget {max_drop})",
                    scenario.code()
                );
                worst_wsr = worst_wsr.min(wsr);
                worst_drop = worst_drop.max(drop);
                runs += 1;
            }
        }
    }

    let secs = start.elapsed().as_secs_f64();
    verdict(
        "scenario quality floor",
        runs == 75 && secs <= 300.0,
        &format!(
            "{runs} embeddings (3 scenarios × 5 class counts × 5 seeds): held-out wsr ≥ {worst_wsr:.3}, worst acc drop {worst_drop:.3}, {secs:.1}s (budget 300s)"
        ),
    );
}

#[test]
fn threshold_separates_marked_from_clean_models() {
    let start = Instant::now();
    let mut worst_marked = f64::INFINITY;
    let mut worst_clean = 0.0f64;
    let mut worst_clean_fwsr = 0.0f64;

    for i in 0..20u64 {
        let arch = if i % 3 == 0 { Architecture::ConvHead } else { Architecture::LinearHead };
        let classes = 3 + (i as usize % 4);
        let fix = fixture(arch, classes, [12, 12, 1], 60, 6.5, 200 + i);
        let mut spec = WatermarkSpec::new(0, 1, Scenario::DataAbundant);
        let out = embed_watermark(&fix.model, &spec, Some(&fix.train), None, &SolveGoal::default(), i)
            .unwrap_or_else(|e| panic!("embedding {i}: {e}"));
        spec.trigger = out.trigger.clone();

        // The claim bundle carries the queries; both verdicts must come
        // from exactly what a third party would replay.
        let bundle = Bundle::from_outcome(&out, &spec, DEFAULT_THRESHOLD);
        let wm = bundle.watermark_set();

        let marked = verify_ownership(&mut model_query(&out.model), &wm, DEFAULT_THRESHOLD).unwrap();
        let clean = verify_ownership(&mut model_query(&fix.model), &wm, DEFAULT_THRESHOLD).unwrap();
        assert!(marked.owned, "marked model {i} wsr {:.3}", marked.metrics.wsr);
        assert!(!clean.owned, "clean model {i} wsr {:.3}", clean.metrics.wsr);

        let all = WatermarkSpec { stamp_fraction: 1.0, ..spec.clone() };
        let nontarget = stamped_nontarget(&fix.test, &all).unwrap();
        let fwsr = evaluate(&mut model_query(&fix.model), &fix.test, &wm, &nontarget).unwrap().fwsr;
        assert!(fwsr < 0.40, "clean model {i} fwsr {fwsr:.3}");

        worst_marked = worst_marked.min(marked.metrics.wsr);
        worst_clean = worst_clean.max(clean.metrics.wsr);
        worst_clean_fwsr = worst_clean_fwsr.max(fwsr);
    }

    let secs = start.elapsed().as_secs_f64();
    verdict(
        "ownership threshold",
        worst_marked >= 0.40 && worst_clean < 0.40 && worst_clean_fwsr < 0.40,
        &format!(
            "20 marked models wsr ≥ {worst_marked:.3}, 20 clean models wsr ≤ {worst_clean:.3} and fwsr ≤ {worst_clean_fwsr:.3} (threshold 0.40), {secs:.1}s"
        ),
    );
}

fn run_cli(args: &[&str]) -> (i32, serde_json::Value) {
    let out = Command::new(env!("CARGO_BIN_EXE_modelmark"))
        .args(args)
        .output()
        .expect("binary runs");
    let code = out.status.code().expect("exit code");
    let stdout = String::from_utf8_lossy(&out.stdout);
    let json = serde_json::from_str(stdout.trim()).unwrap_or(serde_json::Value::Null);
    (code, json)
}

#[test]
fn packaged_models_verify_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let mut timings = Vec::new();

    for (label, encrypt) in [("plaintext", false), ("encrypted", true)] {
        let start = Instant::now();
        let root = dir.path().join(label);
        let out_dir = root.display().to_string();
        let mut gen_args = vec![
            "gen-fixture", "--out", &out_dir, "--arch", "conv", "--classes", "3", "--seed", "41",
        ];
        if encrypt {
            gen_args.push("--encrypt");
        }
        let (code, report) = run_cli(&gen_args);
        assert_eq!(code, 0, "{label}: gen-fixture failed");
        let pkg = report["package"].as_str().expect("package path").to_string();
        let train = report["train"].as_str().expect("train path").to_string();

        let marked = root.join("marked.zip").display().to_string();
        let (code, report) = run_cli(&[
            "watermark", &pkg, "--scenario", "da", "--data", &train,
            "--target-label", "0", "--watermark-label", "1", "--seed", "7", "--out", &marked,
        ]);
        assert_eq!(code, 0, "{label}: watermark failed");
        let bundle = report["bundle"].as_str().expect("bundle path").to_string();

        let (code, verdict_json) = run_cli(&["verify", &marked, "--bundle", &bundle]);
        assert_eq!(code, 0, "{label}: marked package must verify");
        assert_eq!(verdict_json["owned"], serde_json::Value::Bool(true));

        let (code, verdict_json) = run_cli(&["verify", &pkg, "--bundle", &bundle]);
        assert_eq!(code, 5, "{label}: original package must not verify");
        assert_eq!(verdict_json["owned"], serde_json::Value::Bool(false));

        timings.push((label, start.elapsed().as_secs_f64()));
    }

    let ok = timings.iter().all(|(_, s)| *s <= 60.0);
    let detail = timings
        .iter()
        .map(|(l, s)| format!("{l} {s:.1}s"))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(
        "end-to-end pipeline",
        ok,
        &format!("package → watermark → repack → verify: owned=true marked / owned=false original; {detail} (budget 60s each)"),
    );
}

#[test]
fn embedding_rewrites_only_the_head_weight_buffer() {
    let mut lines = Vec::new();
    let mut ok = true;
    for (arch, seed) in [(Architecture::ConvHead, 77u64), (Architecture::LinearHead, 78)] {
        let fix = fixture(arch, 4, [12, 12, 1], 60, 6.0, seed);
        let spec = WatermarkSpec::new(0, 1, Scenario::DataAbundant);
        let out = embed_watermark(&fix.model, &spec, Some(&fix.train), None, &SolveGoal::default(), seed)
            .expect("embedding succeeds");

        let target = find_target_layer(&fix.model.graph).unwrap();
        let weight_buffer = fix.model.graph.tensors[target.weight_tensor].buffer.unwrap();
        let bias_buffer = fix.model.graph.tensors[target.bias_tensor].buffer.unwrap();

        let before = fix.model.buffers();
        let after = out.model.buffers();
        assert_eq!(before.len(), after.len());
        let changed: Vec<usize> =
            (0..before.len()).filter(|&i| before[i] != after[i]).collect();

        ok &= changed == [weight_buffer] && before[bias_buffer] == after[bias_buffer];
        lines.push(format!(
            "{arch:?}: buffer {weight_buffer} of {} changed, bias bit-identical: {}",
            before.len(),
            before[bias_buffer] == after[bias_buffer]
        ));
    }
    verdict("structural preservation", ok, &lines.join("; "));
}

#[test]
fn repeated_runs_are_bit_identical() {
    let scenarios = [Scenario::DataAbundant, Scenario::DataScarce, Scenario::DataMissing];
    let dir = tempfile::tempdir().unwrap();
    let mut ok = true;

    for (k, scenario) in scenarios.into_iter().enumerate() {
        let run = |tag: &str| {
            let fix = fixture(Architecture::ConvHead, 4, [12, 12, 1], 100, 6.0, 3);
            let (labeled, pool) = match scenario {
                Scenario::DataMissing => (None, Some(&fix.pool)),
                _ => (Some(&fix.train), None),
            };
            let spec = WatermarkSpec::new(0, 1, scenario);
            let out = embed_watermark(&fix.model, &spec, labeled, pool, &SolveGoal::default(), 3)
                .expect("embedding succeeds");
            let bytes = serialize_model(&out.model).expect("serializes");
            let metrics = serde_json::json!({
                "metrics": out.metrics,
                "baseline": out.baseline_accuracy,
                "attempts": out.attempts,
                "trigger": out.trigger,
            })
            .to_string();
            let bundle_path = dir.path().join(format!("{}-{tag}.zip", scenario.code()));
            write_bundle(&Bundle::from_outcome(&out, &spec, DEFAULT_THRESHOLD), &bundle_path).unwrap();
            (bytes, metrics, std::fs::read(bundle_path).unwrap())
        };
        let (bytes_a, metrics_a, bundle_a) = run("a");
        let (bytes_b, metrics_b, bundle_b) = run("b");
        ok &= bytes_a == bytes_b && metrics_a == metrics_b && bundle_a == bundle_b;
        if !ok {
            verdict(
                "determinism",
                false,
                &format!("{} run differed (models equal: {}, metrics equal: {}, bundles equal: {})",
                    scenario.code(), bytes_a == bytes_b, metrics_a == metrics_b, bundle_a == bundle_b),
            );
        }
        let _ = k;
    }

    verdict(
        "determinism",
        ok,
        "3 scenarios re-run with fixed seeds: model bytes, metrics JSON and claim bundles all identical",
    );
}
