//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary. A FAIL is reported but only turns into a nonzero
//! exit under `ACCEPTANCE_STRICT=1`. `ACCEPTANCE_ONLY=7,8` runs a subset.

#[path = "../../core/tests/support/gradcases.rs"]
mod gradcases;

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use lesion_core::data::{binary_label, Diagnosis, LesionRecord, TaskSpec};
use lesion_core::imageproc::{
    compute_global_mean, preprocess_image, to_luma, GlobalMean, ImageTensor, PreprocessProfile, LUMA_COEFFICIENTS,
};
use lesion_core::metrics::{average_precision, roc_auc, ScoredSet};
use lesion_core::models::{
    build_feature_extractor, build_finetune, build_scratch, pretext_pretrain, Backbone, BackboneSpec, PretextConfig,
    HEAD_BLOCK,
};
use lesion_core::nn::{check_gradients, init_params, NetworkSpec, OptimizerSpec, ParamStore, Rng, Tensor};
use lesion_core::splits::{
    oversample_minority, stratified_split, OversampleConfig, Partition, SplitFractions, SplitPlan,
};
use lesion_core::synth::{lesion_dataset, pretext_dataset, pretext_samples, LesionSet, LesionSetConfig};
use lesion_core::train::{
    predict_all, run_feature_extractor_stage, run_finetune_stage, run_scratch_stage, train, train_observed,
    Decision, EarlyStopping, EarlyStoppingConfig, Plateau, PlateauConfig, Sample, Schedule, TrainConfig,
};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const DESK_SIZE: usize = 32;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [(u32, &str, fn() -> Verdict); 9] = [
        (1, "metric oracles", c1_metric_oracles),
        (2, "gradient checks", c2_gradient_checks),
        (3, "freeze contract", c3_freeze),
        (4, "callback semantics", c4_callbacks),
        (5, "splits and oversampling", c5_splits),
        (6, "preprocessing and determinism", c6_preprocessing),
        (7, "desk-scale transfer experiment", c7_transfer),
        (8, "oversampling necessity", c8_oversampling),
        (9, "report shape", c9_report),
    ];
    let mut failed = 0;
    let mut ran = 0;
    for (n, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        ran += 1;
        let t = Instant::now();
        let v = std::panic::catch_unwind(f).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        if !v.pass {
            failed += 1;
        }
        println!(
            "criterion {n} {}: {name} ({:.1}s) {}",
            if v.pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64(),
            v.detail
        );
    }
    println!("acceptance: {}/{ran} passed", ran - failed);
    if failed > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn fmt(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3}")).collect();
    format!("[{}]", parts.join(" "))
}

// ---------------------------------------------------------------- 1

fn pairwise_auc(s: &ScoredSet) -> f64 {
    let mut twice = 0u64;
    for i in 0..s.len() {
        for j in 0..s.len() {
            if s.labels[i] == 1 && s.labels[j] == 0 {
                twice += if s.scores[i] > s.scores[j] {
                    2
                } else if s.scores[i] == s.scores[j] {
                    1
                } else {
                    0
                };
            }
        }
    }
    (twice as f64 / 2.0) / (s.positives() * s.negatives()) as f64
}

fn cutoff_ap(s: &ScoredSet) -> f64 {
    let mut ranked: Vec<usize> = (0..s.len()).collect();
    // insertion sort: score descending, image_id ascending
    for i in 1..ranked.len() {
        let mut j = i;
        while j > 0 {
            let (a, b) = (ranked[j], ranked[j - 1]);
            let before = s.scores[a] > s.scores[b] || (s.scores[a] == s.scores[b] && s.image_ids[a] < s.image_ids[b]);
            if !before {
                break;
            }
            ranked.swap(j, j - 1);
            j -= 1;
        }
    }
    let p = s.positives() as f64;
    let tp = |k: usize| ranked[..k].iter().filter(|&&i| s.labels[i] == 1).count() as f64;
    (1..=ranked.len()).map(|k| (tp(k) / p - tp(k - 1) / p) * (tp(k) / k as f64)).sum()
}

fn c1_metric_oracles() -> Verdict {
    let t = Instant::now();
    let mut rng = Rng::new(17);
    let mut mismatches = 0;
    let mut flip_errors = 0;
    for k in 0..1000 {
        let n = 2 + rng.below(49);
        let mut labels: Vec<u8> = (0..n).map(|_| rng.below(2) as u8).collect();
        labels[0] = 1;
        labels[1] = 0;
        rng.shuffle(&mut labels);
        let scores: Vec<f64> =
            (0..n).map(|_| if k % 2 == 0 { rng.below(6) as f64 / 5.0 } else { rng.next_f64() }).collect();
        let mut ids: Vec<String> = (0..n).map(|i| format!("ISIC_{i:07}")).collect();
        rng.shuffle(&mut ids);
        let s = ScoredSet::new(ids, scores, labels).unwrap();
        let auc = roc_auc(&s).unwrap();
        if auc.to_bits() != pairwise_auc(&s).to_bits()
            || average_precision(&s).unwrap().to_bits() != cutoff_ap(&s).to_bits()
        {
            mismatches += 1;
        }
        if auc + roc_auc(&s.flipped()).unwrap() != 1.0 {
            flip_errors += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(
        mismatches == 0 && flip_errors == 0 && secs < 10.0,
        format!("1000 sets: {mismatches} oracle mismatches, {flip_errors} flip failures, {secs:.2}s (< 10s)"),
    )
}

// ---------------------------------------------------------------- 2

fn c2_gradient_checks() -> Verdict {
    let t = Instant::now();
    let mut worst = (0.0f64, String::new());
    let mut cases = 0;
    let variants = gradcases::variants();
    for (v, variant) in variants.iter().enumerate() {
        for s in 0..20u64 {
            let mut rng = Rng::new(50_000 + 100 * v as u64 + s);
            let case = gradcases::build(variant, &mut rng);
            let r = check_gradients(&case.net, &case.params, &case.inputs, 1e-5, 64, s).unwrap();
            cases += 1;
            if r.max_rel_error > worst.0 || worst.1.is_empty() {
                worst = (r.max_rel_error, format!("{variant}/{}", r.worst_param));
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(
        worst.0 < 1e-4 && secs < 60.0,
        format!(
            "{} variants x 20 shapes = {cases} checks, worst rel error {:.2e} ({}), {secs:.2}s (< 60s)",
            variants.len(),
            worst.0,
            worst.1
        ),
    )
}

// ---------------------------------------------------------------- 3

fn random_samples(n: usize, size: usize, seed: u64) -> Vec<Sample> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|i| {
            let data = (0..size * size * 3).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
            Sample::binary(format!("s{i}"), Tensor::new(vec![size, size, 3], data).unwrap(), (i % 3 == 0) as u8)
        })
        .collect()
}

fn after_one_epoch(net: &NetworkSpec, params: ParamStore, opt: OptimizerSpec) -> ParamStore {
    let data = random_samples(45, 16, 9);
    let (tr, va) = data.split_at(37);
    let cfg = TrainConfig { batch_size: 8, ..TrainConfig::new(opt, 1, 2) };
    let mut out = None;
    train_observed(net, params, tr, va, &cfg, |_, p| out = Some(p.clone())).unwrap();
    out.unwrap()
}

fn same_bits(a: &ParamStore, b: &ParamStore, name: &str) -> bool {
    let x = a.get(name).unwrap().data();
    let y = b.get(name).unwrap().data();
    x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits())
}

fn c3_freeze() -> Verdict {
    let spec = BackboneSpec::tiny_conv(16).unwrap();
    let backbone = Backbone::random(spec.clone(), 1);
    let fe = build_feature_extractor(&spec).unwrap();
    let before = backbone.initial_params(&fe, 1).unwrap();
    let after = after_one_epoch(&fe, before.clone(), OptimizerSpec::RMSPROP_DEFAULT);
    let fe_moved: Vec<String> = spec.param_names().into_iter().filter(|n| !same_bits(&before, &after, n)).collect();
    let fe_head_trained = fe.block_param_names(HEAD_BLOCK).iter().all(|n| !same_bits(&before, &after, n));

    let (ft, before) = build_finetune(&fe, Some(before)).unwrap();
    let after = after_one_epoch(&ft, before.clone(), OptimizerSpec::FINETUNE_SGD);
    let names = spec.block_names();
    let open = &names[names.len() - 2..];
    let mut ft_moved = Vec::new();
    let mut ft_stuck = Vec::new();
    for block in names.iter().copied().chain([HEAD_BLOCK]) {
        for n in ft.block_param_names(block) {
            let same = same_bits(&before, &after, &n);
            let should_train = open.contains(&block) || block == HEAD_BLOCK;
            if should_train && same {
                ft_stuck.push(n);
            } else if !should_train && !same {
                ft_moved.push(n);
            }
        }
    }
    verdict(
        fe_moved.is_empty() && fe_head_trained && ft_moved.is_empty() && ft_stuck.is_empty(),
        format!(
            "FE frozen params moved {fe_moved:?}, head trained {fe_head_trained}; FT frozen moved {ft_moved:?}, open blocks {open:?}+head untrained {ft_stuck:?}"
        ),
    )
}

// ---------------------------------------------------------------- 4

fn c4_callbacks() -> Verdict {
    let mut notes = Vec::new();
    let mut ok = true;

    let mut es = EarlyStopping::new(EarlyStoppingConfig { min_delta: 0.01, patience: 2 });
    let stop_epoch = [0.50, 0.505, 0.509]
        .iter()
        .position(|&v| es.update(v) == Decision::Stop)
        .map(|i| i + 1);
    ok &= stop_epoch == Some(3);
    notes.push(format!("early stop epoch {stop_epoch:?} (want 3)"));

    let mut p = Plateau::new(PlateauConfig::FEATURE_EXTRACTOR, 1e-3);
    let mut lr = 1e-3;
    let mut in_effect = Vec::new();
    for _ in 0..12 {
        in_effect.push(lr);
        lr = p.update(0.6);
    }
    let drop_epoch = in_effect.iter().position(|&l| l < 1e-3).map(|i| i + 1);
    ok &= drop_epoch == Some(7);
    notes.push(format!("plateau drop epoch {drop_epoch:?} (want 7)"));
    // flat sequence through the real loop on a fully frozen network
    let lrs = frozen_loop_lrs(13);
    let distinct: Vec<f64> = lrs.iter().fold(Vec::new(), |mut acc, &l| {
        if acc.last() != Some(&l) {
            acc.push(l);
        }
        acc
    });
    let expect = [1e-3, 1e-4, 1e-5];
    let ladder_ok = distinct.len() == 3 && distinct.iter().zip(expect).all(|(a, b)| ((a - b) / b).abs() < 1e-9);
    ok &= ladder_ok && lrs[..6].iter().all(|&l| l == 1e-3) && lrs[6] < 1e-3 && lrs[11] < 1e-4;
    notes.push(format!("train-loop lr ladder {}", fmt_lrs(&distinct)));

    let mut q = Plateau::new(PlateauConfig::FINETUNE, 1e-4);
    for _ in 0..26 {
        q.update(0.5);
    }
    ok &= ((q.lr - 1e-5) / 1e-5).abs() < 1e-9;
    notes.push(format!("finetune lr after 25-epoch plateau {:.0e}", q.lr));

    let mut full = EarlyStopping::new(EarlyStoppingConfig::FULL);
    let stop = (1..=300).find(|&e| full.update(if e <= 7 { 0.1 * e as f64 } else { 0.7 }) == Decision::Stop);
    ok &= stop == Some(57);
    notes.push(format!("full-schedule early stop after best epoch 7 at {stop:?} (want 57)"));
    verdict(ok, notes.join("; "))
}

fn fmt_lrs(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.0e}")).collect();
    parts.join("->")
}

fn frozen_loop_lrs(epochs: usize) -> Vec<f64> {
    let spec = BackboneSpec::tiny_conv(16).unwrap();
    let mut net = build_feature_extractor(&spec).unwrap();
    net.set_trainable(HEAD_BLOCK, false).unwrap();
    let params = init_params(&net, &mut Rng::new(4));
    let data = random_samples(12, 16, 4);
    let (tr, va) = data.split_at(8);
    let cfg = TrainConfig {
        plateau: Some(PlateauConfig::FEATURE_EXTRACTOR),
        ..TrainConfig::new(OptimizerSpec::RMSPROP_DEFAULT, epochs, 4)
    };
    let out = train(&net, params, tr, va, &cfg).unwrap();
    out.history.epochs.iter().map(|e| e.lr).collect()
}

// ---------------------------------------------------------------- 5

fn c5_splits() -> Verdict {
    let records: Vec<LesionRecord> = (0..40)
        .map(|i| {
            let d = if i % 4 == 0 { Diagnosis::Melanoma } else { Diagnosis::Nevus };
            LesionRecord::new(format!("ISIC_{i:07}"), d)
        })
        .collect();
    let ds = lesion_core::data::Dataset::new(records, lesion_core::data::Origin::External).unwrap();
    let plan = stratified_split(&ds, SplitFractions::STANDARD, TaskSpec::TASK1, 5).unwrap();
    let counts = plan.class_counts(&ds, TaskSpec::TASK1);
    let sizes: Vec<usize> = Partition::ALL.iter().map(|p| plan.records(&ds, *p).len()).collect();
    let pos: Vec<usize> = Partition::ALL.iter().map(|p| counts[p].1).collect();
    let neg: Vec<usize> = Partition::ALL.iter().map(|p| counts[p].0).collect();

    let frozen_before = snapshot(&plan, &ds);
    let train: Vec<LesionRecord> = plan.records(&ds, Partition::Train).into_iter().cloned().collect();
    let over = oversample_minority(&train, TaskSpec::TASK1, OversampleConfig { factor: 3 }).unwrap();
    let over_pos = over.iter().filter(|r| binary_label(r, TaskSpec::TASK1) == 1).count();
    let untouched = snapshot(&plan, &ds) == frozen_before;

    let ok = sizes == [27, 3, 6, 4]
        && pos == [7, 1, 1, 1]
        && neg == [20, 2, 5, 3]
        && over.len() == 41
        && over_pos == 21
        && untouched;
    verdict(
        ok,
        format!(
            "sizes {sizes:?} positives {pos:?} negatives {neg:?}; oversampled {} rows / {over_pos} positives; other partitions unchanged {untouched}",
            over.len()
        ),
    )
}

fn snapshot(plan: &SplitPlan, ds: &lesion_core::data::Dataset) -> Vec<String> {
    [Partition::Validation, Partition::Test, Partition::Spare]
        .iter()
        .flat_map(|p| plan.records(ds, *p).into_iter().map(|r| format!("{:?}", r)))
        .collect()
}

// ---------------------------------------------------------------- 6

fn c6_preprocessing() -> Verdict {
    let mut notes = Vec::new();
    let sum: f64 = LUMA_COEFFICIENTS.iter().sum();
    let sum_ok = format!("{sum:.6}") == "1.000000";
    notes.push(format!("luma sum {sum:.6}"));

    let px = |r: u8, g: u8, b: u8| to_luma(&ImageTensor::from_rgb8(1, 1, &[r, g, b]).unwrap()).unwrap().data()[0] as f64;
    let white = px(255, 255, 255);
    let red = px(255, 0, 0);
    let black = px(0, 0, 0);
    // red is stored in f32, whose spacing near 76 is about 8e-6
    let gray_err = (0..=255u8).map(|g| (px(g, g, g) - g as f64).abs()).fold(0.0, f64::max);
    let points_ok = (white - 255.0).abs() < 1e-6 && gray_err < 1e-6 && (red - 76.203945).abs() < 1e-5 && black == 0.0;
    notes.push(format!("white {white:.6} red {red:.6} black {black} max gray error {gray_err:.1e}"));

    let white_img = ImageTensor::filled(40, 30, 3, 255.0);
    let scratch = preprocess_image(&white_img, &PreprocessProfile::scratch(), None).unwrap();
    let transfer = preprocess_image(&white_img, &PreprocessProfile::transfer(), None).unwrap();
    let unit = |t: &ImageTensor| t.data().iter().all(|&v| (v as f64 - 1.0).abs() < 1e-6);
    let white_ok = scratch.height() == 128 && scratch.channels() == 1 && unit(&scratch)
        && transfer.height() == 299 && transfer.channels() == 3 && unit(&transfer);
    let mut centred_profile = PreprocessProfile::scratch().with_size(8);
    centred_profile.mean_subtract = true;
    let centred = preprocess_image(
        &ImageTensor::filled(8, 8, 3, 127.5),
        &centred_profile,
        Some(&GlobalMean { per_channel: vec![0.5] }),
    )
    .unwrap();
    let centred_ok = centred.data().iter().all(|&v| (v as f64).abs() < 1e-6);
    let mean_ok = compute_global_mean([&ImageTensor::filled(1, 1, 1, 10.0), &ImageTensor::filled(1, 1, 1, 30.0)])
        .unwrap()
        .per_channel
        == vec![20.0];
    notes.push(format!("white-point profiles {white_ok}, mean subtraction {centred_ok}"));

    let mut rng = Rng::new(6);
    let bytes: Vec<u8> = (0..37 * 23 * 3).map(|_| rng.below(256) as u8).collect();
    let img = ImageTensor::from_rgb8(37, 23, &bytes).unwrap();
    let a = preprocess_image(&img, &PreprocessProfile::transfer().with_size(64), None).unwrap();
    let b = preprocess_image(&img.clone(), &PreprocessProfile::transfer().with_size(64), None).unwrap();
    let det_ok = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
    notes.push(format!("preprocess bitwise deterministic {det_ok}"));

    let (pipe_ok, pipe_note) = cli_pipeline_identical();
    notes.push(pipe_note);
    verdict(sum_ok && points_ok && white_ok && centred_ok && mean_ok && det_ok && pipe_ok, notes.join("; "))
}

fn lesion(dir: &Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_lesion"))
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!("lesion {args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

const TOY_CONFIG: &str = "\
images_dir = images
ground_truth = ground_truth.csv
metadata = metadata.csv
seed = 11
schedule = desk
scratch_size = 16
transfer_size = 16
backbone = tiny-random
scratch_epochs = 3
stage1_epochs = 3
finetune_max_epochs = 3
";

fn toy_dir(count: usize) -> Result<tempfile::TempDir, String> {
    let dir = tempfile::TempDir::new().map_err(|e| e.to_string())?;
    let out = dir.path().to_string_lossy().into_owned();
    lesion(dir.path(), &["--seed", "11", "synth", "--out", &out, "--count", &count.to_string(), "--size", "24"])?;
    fs::write(dir.path().join("run.cfg"), TOY_CONFIG).map_err(|e| e.to_string())?;
    Ok(dir)
}

fn pipeline(dir: &Path, work: &str) -> Result<Vec<(String, Vec<u8>)>, String> {
    let base = ["--config", "run.cfg", "--work-dir", work];
    let step = |extra: &[&str]| -> Result<String, String> {
        let mut args: Vec<&str> = base.to_vec();
        args.extend_from_slice(extra);
        lesion(dir, &args)
    };
    step(&["prepare"])?;
    step(&["split"])?;
    for model in ["scratch", "finetune"] {
        step(&["--model", model, "train"])?;
        step(&["--model", model, "predict"])?;
    }
    step(&["report"])?;
    let mut files = Vec::new();
    walk(&dir.join(work), &dir.join(work), &mut files);
    Ok(files)
}

fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
    let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            walk(root, &p, out);
        } else {
            let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
            out.push((rel, fs::read(&p).unwrap()));
        }
    }
}

fn cli_pipeline_identical() -> (bool, String) {
    let run = || -> Result<(bool, usize, Vec<String>), String> {
        let dir = toy_dir(30)?;
        let a = pipeline(dir.path(), "work-a")?;
        let b = pipeline(dir.path(), "work-b")?;
        let norm = |v: &[u8]| String::from_utf8_lossy(v).replace("work-a", "W").replace("work-b", "W").into_bytes();
        let differing: Vec<String> = a
            .iter()
            .zip(&b)
            .filter(|(x, y)| x.0 != y.0 || norm(&x.1) != norm(&y.1))
            .map(|(x, _)| x.0.clone())
            .collect();
        Ok((a.len() == b.len() && differing.is_empty(), a.len(), differing))
    };
    match run() {
        Ok((same, n, diff)) => (same, format!("CLI pipeline {n} files byte-identical across two runs {same} {diff:?}")),
        Err(e) => (false, format!("CLI pipeline error: {e}")),
    }
}

// ---------------------------------------------------------------- 7 and 8

struct DeskData {
    set: LesionSet,
    plan: SplitPlan,
}

impl DeskData {
    fn new(seed: u64, melanoma_fraction: f64) -> Self {
        let mut cfg = LesionSetConfig::dataset_b(seed * 1000 + 2);
        cfg.melanoma_fraction = melanoma_fraction;
        let set = lesion_dataset(&cfg).unwrap();
        let plan = stratified_split(&set.dataset, SplitFractions::STANDARD, TaskSpec::TASK1, seed).unwrap();
        DeskData { set, plan }
    }

    fn samples(&self, p: Partition, profile: &PreprocessProfile, factor: usize) -> Vec<Sample> {
        let recs: Vec<LesionRecord> = self.plan.records(&self.set.dataset, p).into_iter().cloned().collect();
        let recs = if factor > 1 {
            oversample_minority(&recs, TaskSpec::TASK1, OversampleConfig { factor }).unwrap()
        } else {
            recs
        };
        recs.iter()
            .map(|r| {
                let x = preprocess_image(self.set.image(&r.image_id).unwrap(), profile, None).unwrap();
                Sample::binary(r.image_id.clone(), x.into_tensor(), binary_label(r, TaskSpec::TASK1))
            })
            .collect()
    }
}

fn test_scores(net: &NetworkSpec, params: &ParamStore, test: &[Sample]) -> ScoredSet {
    let out = predict_all(net, params, test).unwrap();
    ScoredSet::new(
        test.iter().map(|s| s.id.clone()).collect(),
        out.iter().map(|o| o[0] as f64).collect(),
        test.iter().map(|s| s.target[0] as u8).collect(),
    )
    .unwrap()
}

fn scratch_run(data: &DeskData, seed: u64, factor: usize) -> ScoredSet {
    let profile = PreprocessProfile::scratch().with_size(DESK_SIZE);
    let tr = data.samples(Partition::Train, &profile, factor);
    let va = data.samples(Partition::Validation, &profile, 1);
    let te = data.samples(Partition::Test, &profile, 1);
    let net = build_scratch(DESK_SIZE).unwrap();
    let params = init_params(&net, &mut Rng::new(seed));
    let out = run_scratch_stage(&net, params, &tr, &va, &Schedule::DESK, seed).unwrap();
    test_scores(&net, &out.best_params, &te)
}

fn c7_transfer() -> Verdict {
    let t = Instant::now();
    let transfer = PreprocessProfile::transfer().with_size(DESK_SIZE);
    let (mut scratch, mut fe, mut ft, mut pretext) = (vec![], vec![], vec![], vec![]);
    for seed in SEEDS {
        let a = pretext_dataset(750, DESK_SIZE, seed * 1000 + 1);
        let a = pretext_samples(&a, &transfer).unwrap();
        let (a_train, a_hold) = a.split_at(600);
        let random = Backbone::random(BackboneSpec::tiny_conv(DESK_SIZE).unwrap(), seed);
        let cfg = PretextConfig { epochs: 20, seed, ..Default::default() };
        let backbone = pretext_pretrain(&random, a_train, a_hold, &cfg).unwrap();
        if let lesion_core::models::Provenance::PretextPretrained { holdout_accuracy, .. } = backbone.provenance {
            pretext.push(holdout_accuracy);
        }

        let data = DeskData::new(seed, 0.20);
        scratch.push(roc_auc(&scratch_run(&data, seed, 3)).unwrap());

        let tr = data.samples(Partition::Train, &transfer, 3);
        let va = data.samples(Partition::Validation, &transfer, 1);
        let te = data.samples(Partition::Test, &transfer, 1);
        let net = build_feature_extractor(&backbone.spec).unwrap();
        let params = backbone.initial_params(&net, seed).unwrap();
        let stage1 = run_feature_extractor_stage(&net, params, &tr, &va, &Schedule::DESK, seed).unwrap();
        fe.push(roc_auc(&test_scores(&net, &stage1.best_params, &te)).unwrap());
        let (ft_net, stage2) =
            run_finetune_stage(&net, Some(stage1.best_params), &tr, &va, &Schedule::DESK, seed).unwrap();
        ft.push(roc_auc(&test_scores(&ft_net, &stage2.best_params, &te)).unwrap());
    }
    let elapsed = t.elapsed();
    let (ms, mf, mt) = (median(scratch.clone()), median(fe.clone()), median(ft.clone()));
    let ok = mf >= ms + 0.05 && mt >= mf - 0.02 && mf >= 0.85 && elapsed < Duration::from_secs(300);
    verdict(
        ok,
        format!(
            "median AUC scratch {ms:.3} FE {mf:.3} FT {mt:.3} (need FE >= scratch+0.05, FT >= FE-0.02, FE >= 0.85); scratch {} FE {} FT {}; pretext holdout {}; {:.0}s (< 300s)",
            fmt(&scratch),
            fmt(&fe),
            fmt(&ft),
            fmt(&pretext),
            elapsed.as_secs_f64()
        ),
    )
}

fn c8_oversampling() -> Verdict {
    let (mut plain, mut over, mut prevalence) = (vec![], vec![], vec![]);
    for seed in SEEDS {
        let data = DeskData::new(seed, 0.08);
        let s1 = scratch_run(&data, seed, 1);
        let s3 = scratch_run(&data, seed, 3);
        prevalence.push(s1.prevalence());
        plain.push(average_precision(&s1).unwrap());
        over.push(average_precision(&s3).unwrap());
    }
    let near = plain.iter().zip(&prevalence).filter(|(ap, p)| (*ap - *p).abs() <= 0.05).count();
    let gain = median(over.clone()) - median(plain.clone());
    verdict(
        near >= 3 && gain >= 0.10,
        format!(
            "no-oversampling AP {} vs prevalence {}: {near}/5 within 0.05 (need >= 3); factor-3 AP {}: median gain {gain:+.3} (need >= 0.10)",
            fmt(&plain),
            fmt(&prevalence),
            fmt(&over)
        ),
    )
}

// ---------------------------------------------------------------- 9

fn c9_report() -> Verdict {
    let run = || -> Result<String, String> {
        let dir = toy_dir(60)?;
        let base = ["--config", "run.cfg", "--work-dir", "work"];
        let step = |extra: &[&str]| -> Result<String, String> {
            let mut args: Vec<&str> = base.to_vec();
            args.extend_from_slice(extra);
            lesion(dir.path(), &args)
        };
        step(&["prepare"])?;
        for task in ["task1", "task2"] {
            step(&["--task", task, "split"])?;
            for model in ["scratch", "feature-extractor", "finetune", "hybrid"] {
                step(&["--task", task, "--model", model, "train"])?;
                step(&["--task", task, "--model", model, "predict"])?;
            }
        }
        step(&["report"])?;
        fs::read_to_string(dir.path().join("work/reports/report-test.csv")).map_err(|e| e.to_string())
    };
    match run() {
        Ok(csv) => {
            let lines: Vec<&str> = csv.lines().collect();
            let rows: Vec<Vec<&str>> = lines.iter().skip(1).map(|l| l.split(',').collect()).collect();
            let names: Vec<&str> = rows.iter().map(|r| r[0]).collect();
            let numeric = rows.iter().all(|r| r.len() == 7 && r[1..].iter().all(|c| c.parse::<f64>().is_ok()));
            let header_cols = lines.first().map_or(0, |h| h.split(',').count() - 1);
            verdict(
                rows.len() == 4 && header_cols == 6 && numeric,
                format!("{} rows {names:?} x {header_cols} metric columns, all cells filled {numeric}", rows.len()),
            )
        }
        Err(e) => verdict(false, e),
    }
}
