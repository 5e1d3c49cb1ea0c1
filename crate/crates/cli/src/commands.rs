//! Implementation of every subcommand.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use lesion_core::data::{
    binary_label, load_ground_truth, load_metadata, Dataset, LesionRecord, TaskId, IMAGE_EXTENSIONS,
};
use lesion_core::imageproc::{decode_image, preprocess_image, PreprocessProfile};
use lesion_core::metrics::{build_report, EvalReport, ScoredSet, Submission};
use lesion_core::models::{
    build_feature_extractor, build_hybrid, build_scratch, encode_metadata, load_params_for,
    pretext_pretrain, save_params, Backbone, BackboneSpec, HybridSpec, ModelKind, PretextConfig,
};
use lesion_core::nn::{init_params, NetworkSpec, ParamStore, Rng};
use lesion_core::splits::{
    oversample_minority, stratified_split, verify_leakage, OversampleConfig, Partition, SplitPlan,
};
use lesion_core::synth::{lesion_dataset, pretext_dataset, pretext_samples, write_lesion_set, LesionSetConfig};
use lesion_core::train::{
    run_feature_extractor_stage, run_finetune_stage, run_hybrid_stage, run_scratch_stage, Sample, TrainOutcome,
};
use rayon::prelude::*;

use crate::cache::{self, encode_tensor, io, sha256_hex, Manifest, ManifestRow, ERRORS_HEADER};
use crate::config::{BackboneSource, RunConfig};
use crate::CliError;

fn profile_scratch(cfg: &RunConfig) -> PreprocessProfile {
    PreprocessProfile::scratch().with_size(cfg.scratch_size)
}

fn profile_transfer(cfg: &RunConfig) -> PreprocessProfile {
    PreprocessProfile::transfer().with_size(cfg.transfer_size)
}

fn profile_for(cfg: &RunConfig, model: ModelKind) -> PreprocessProfile {
    match model {
        ModelKind::Scratch => profile_scratch(cfg),
        _ => profile_transfer(cfg),
    }
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| io(path, e))
}

/// Ground truth with metadata merged when configured.
fn load_dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let gt = load_ground_truth(cfg.ground_truth()?)?;
    match cfg.metadata()? {
        Some(path) => {
            let (ds, merge) = load_metadata(gt, path)?;
            if merge.unmatched > 0 {
                eprintln!("warning: {} metadata rows match no ground-truth record", merge.unmatched);
            }
            Ok(ds)
        }
        None => Ok(gt),
    }
}

fn find_image(dir: &Path, image_id: &str) -> Option<PathBuf> {
    IMAGE_EXTENSIONS
        .iter()
        .map(|ext| dir.join(format!("{image_id}.{ext}")))
        .find(|p| p.is_file())
}

enum Prepared {
    Reused,
    Written(ManifestRow),
    Failed { path: String, error: String },
}

fn prepare_one(
    work: &Path,
    images_dir: &Path,
    record: &LesionRecord,
    profile: &PreprocessProfile,
    previous: Option<&ManifestRow>,
) -> Result<Prepared, CliError> {
    let Some(path) = find_image(images_dir, &record.image_id) else {
        return Ok(Prepared::Failed {
            path: images_dir.join(&record.image_id).display().to_string(),
            error: "image file not found".into(),
        });
    };
    let source = std::fs::read(&path).map_err(|e| io(&path, e))?;
    let source_sha = sha256_hex(&source);
    let rel = cache::relative_cache_path(profile, &record.image_id);
    if let Some(prev) = previous {
        let unchanged = prev.source_sha256 == source_sha && prev.size == profile.target_size && prev.cache_path == rel;
        if unchanged {
            if let Ok(bytes) = std::fs::read(work.join(&rel)) {
                if sha256_hex(&bytes) == prev.checksum {
                    return Ok(Prepared::Reused);
                }
            }
        }
    }
    let image = match decode_image(&path) {
        Ok(img) => img,
        Err(e) => {
            return Ok(Prepared::Failed {
                path: path.display().to_string(),
                error: e.to_string(),
            })
        }
    };
    let tensor = preprocess_image(&image, profile, None)?.into_tensor();
    let bytes = encode_tensor(&tensor)?;
    let out = work.join(&rel);
    std::fs::write(&out, &bytes).map_err(|e| io(&out, e))?;
    Ok(Prepared::Written(ManifestRow {
        image_id: record.image_id.clone(),
        profile: profile.name.as_str().to_string(),
        size: profile.target_size,
        source_sha256: source_sha,
        cache_path: rel,
        checksum: sha256_hex(&bytes),
    }))
}

/// Preprocesses every image under the profiles the model needs (both when
/// no model is configured). Returns the number of failed images.
pub fn prepare(cfg: &RunConfig) -> Result<usize, CliError> {
    let dataset = load_dataset(cfg)?;
    let images_dir = cfg.images_dir()?;
    let work = &cfg.work_dir;
    let profiles = match cfg.model {
        Some(m) => vec![profile_for(cfg, m)],
        None => vec![profile_scratch(cfg), profile_transfer(cfg)],
    };
    let mut manifest = Manifest::load(work)?;
    for p in &profiles {
        create_dir(&work.join(format!("cache/{}-{}", p.name.as_str(), p.target_size)))?;
    }
    let jobs: Vec<(&LesionRecord, &PreprocessProfile)> = dataset
        .records()
        .iter()
        .flat_map(|r| profiles.iter().map(move |p| (r, p)))
        .collect();
    let results: Vec<Result<Prepared, CliError>> = jobs
        .par_iter()
        .map(|(r, p)| prepare_one(work, images_dir, r, p, manifest.get(&r.image_id, p.name)))
        .collect();
    let (mut written, mut reused) = (0usize, 0usize);
    let mut failures: BTreeMap<String, (String, String)> = BTreeMap::new();
    for ((record, profile), result) in jobs.iter().zip(results) {
        match result? {
            Prepared::Reused => reused += 1,
            Prepared::Written(row) => {
                written += 1;
                manifest.insert(row);
            }
            Prepared::Failed { path, error } => {
                manifest
                    .rows
                    .remove(&(record.image_id.clone(), profile.name.as_str().to_string()));
                failures.insert(record.image_id.clone(), (path, error));
            }
        }
    }
    manifest.save(work)?;
    let errors_path = cache::errors_path(work);
    let mut errors = format!("{ERRORS_HEADER}\n");
    for (id, (path, error)) in &failures {
        errors.push_str(&format!("{id},{},{}\n", csv_field(path), csv_field(error)));
    }
    std::fs::write(&errors_path, errors).map_err(|e| io(&errors_path, e))?;
    println!(
        "prepared {written} tensors, reused {reused}, failed images {} (manifest: {})",
        failures.len(),
        cache::manifest_path(work).display()
    );
    if !failures.is_empty() {
        eprintln!("error: {} images failed; see {}", failures.len(), errors_path.display());
    }
    Ok(failures.len())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\"").replace('\n', " "))
    } else {
        s.to_string()
    }
}

pub fn plan_path(work: &Path, task: TaskId) -> PathBuf {
    work.join("splits").join(format!("{task}.csv"))
}

pub fn split(cfg: &RunConfig) -> Result<(), CliError> {
    let seed = cfg.seed()?;
    let dataset = load_dataset(cfg)?;
    let plan = stratified_split(&dataset, cfg.fractions, cfg.task.spec(), seed)?;
    let path = plan_path(&cfg.work_dir, cfg.task);
    create_dir(path.parent().expect("splits dir"))?;
    plan.write(&path)?;
    println!("split plan: {}", path.display());
    println!("{:<11} {:>6} {:>9} {:>9}", "partition", "total", "negative", "positive");
    for (p, (neg, pos)) in plan.class_counts(&dataset, cfg.task.spec()) {
        println!("{:<11} {:>6} {:>9} {:>9}", p.as_str(), neg + pos, neg, pos);
    }
    Ok(())
}

fn load_plan(cfg: &RunConfig) -> Result<SplitPlan, CliError> {
    let path = plan_path(&cfg.work_dir, cfg.task);
    if !path.exists() {
        return Err(CliError::Missing(format!(
            "split plan {} (run `lesion split` first)",
            path.display()
        )));
    }
    let plan = SplitPlan::read(&path)?;
    if plan.task != cfg.task {
        return Err(CliError::Data(format!(
            "{} was made for {}, not {}",
            path.display(),
            plan.task,
            cfg.task
        )));
    }
    Ok(plan)
}

/// Run names; FineTune has two stages.
pub fn run_names(model: ModelKind, task: TaskId) -> Vec<String> {
    match model {
        ModelKind::FineTune => vec![format!("{model}-{task}-stage1"), format!("{model}-{task}-stage2")],
        _ => vec![format!("{model}-{task}")],
    }
}

pub fn runs_dir(work: &Path) -> PathBuf {
    work.join("runs")
}

pub fn checkpoint_path(work: &Path, run: &str) -> PathBuf {
    runs_dir(work).join(format!("{run}-best.lfwt"))
}

pub fn history_path(work: &Path, run: &str) -> PathBuf {
    runs_dir(work).join(format!("{run}-history.csv"))
}

fn backbone_spec(cfg: &RunConfig) -> Result<BackboneSpec, CliError> {
    Ok(BackboneSpec::tiny_conv(cfg.transfer_size)?)
}

fn load_backbone(cfg: &RunConfig, seed: u64) -> Result<Backbone, CliError> {
    let spec = backbone_spec(cfg)?;
    match &cfg.backbone {
        BackboneSource::TinyRandom => Ok(Backbone::random(spec, seed)),
        BackboneSource::WeightsFile(path) => {
            if !path.exists() {
                return Err(CliError::Missing(format!("backbone weights file {}", path.display())));
            }
            Ok(Backbone::from_weights_file(spec, path)?)
        }
        BackboneSource::TinyPretext => {
            let dir = cfg.work_dir.join("backbone");
            let path = dir.join(format!(
                "tiny-pretext-s{seed}-{}px-n{}-e{}.lfwt",
                cfg.transfer_size, cfg.pretext_count, cfg.pretext_epochs
            ));
            if path.exists() {
                let mut b = Backbone::from_weights_file(spec, &path)?;
                b.provenance = lesion_core::models::Provenance::PretextPretrained {
                    seed,
                    holdout_accuracy: f64::NAN,
                };
                eprintln!("backbone: reusing {}", path.display());
                return Ok(b);
            }
            create_dir(&dir)?;
            let profile = profile_transfer(cfg);
            let images = pretext_dataset(cfg.pretext_count, cfg.transfer_size, Rng::new(seed).derive(0xA).next_u64());
            let samples = pretext_samples(&images, &profile)?;
            let holdout_len = (samples.len() / 5).max(1);
            let (train, holdout) = samples.split_at(samples.len() - holdout_len);
            let pretext = PretextConfig {
                epochs: cfg.pretext_epochs,
                seed,
                ..PretextConfig::default()
            };
            let b = pretext_pretrain(&Backbone::random(spec, seed), train, holdout, &pretext)?;
            eprintln!("backbone: {}", b.provenance);
            save_params(&b.params, &path)?;
            Ok(b)
        }
    }
}

fn build_samples(
    cfg: &RunConfig,
    manifest: &Manifest,
    model: ModelKind,
    records: &[LesionRecord],
) -> Result<Vec<Sample>, CliError> {
    let profile = profile_for(cfg, model);
    let mut loaded: BTreeMap<&str, lesion_core::nn::Tensor> = BTreeMap::new();
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        if !loaded.contains_key(r.image_id.as_str()) {
            let t = manifest.load_tensor(&cfg.work_dir, &r.image_id, &profile)?;
            loaded.insert(&r.image_id, t);
        }
        let image = loaded[r.image_id.as_str()].clone();
        let mut inputs = vec![image];
        if model == ModelKind::Hybrid {
            inputs.push(encode_metadata(r));
        }
        out.push(Sample::new(
            r.image_id.clone(),
            inputs,
            vec![f32::from(binary_label(r, cfg.task.spec()))],
        ));
    }
    Ok(out)
}

fn write_outcome(work: &Path, run: &str, outcome: &TrainOutcome) -> Result<(), CliError> {
    outcome.history.write_csv(&history_path(work, run))?;
    save_params(&outcome.best_params, &checkpoint_path(work, run))?;
    let h = &outcome.history;
    println!(
        "{run}: {} epochs, best epoch {} (val_acc {:.4}){}",
        h.len(),
        h.best_epoch,
        h.best_val_acc().unwrap_or(f64::NAN),
        if h.stopped_early { ", stopped early" } else { "" }
    );
    Ok(())
}

/// The network a model id is trained and evaluated with.
fn model_network(cfg: &RunConfig, model: ModelKind) -> Result<NetworkSpec, CliError> {
    let net = match model {
        ModelKind::Scratch => build_scratch(cfg.scratch_size)?,
        ModelKind::FeatureExtractor => build_feature_extractor(&backbone_spec(cfg)?)?,
        ModelKind::FineTune => {
            let fe = build_feature_extractor(&backbone_spec(cfg)?)?;
            let params = init_params(&fe, &mut Rng::new(0));
            lesion_core::models::build_finetune(&fe, Some(params))?.0
        }
        ModelKind::Hybrid => build_hybrid(&backbone_spec(cfg)?, &HybridSpec::default())?,
    };
    Ok(net)
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let seed = cfg.seed()?;
    let model = cfg.model()?;
    let dataset = load_dataset(cfg)?;
    let plan = load_plan(cfg)?;
    let manifest = Manifest::load(&cfg.work_dir)?;
    let task = cfg.task.spec();
    let train_records: Vec<LesionRecord> = plan
        .records(&dataset, Partition::Train)
        .into_iter()
        .cloned()
        .collect();
    let val_records: Vec<LesionRecord> = plan
        .records(&dataset, Partition::Validation)
        .into_iter()
        .cloned()
        .collect();
    let expanded = oversample_minority(
        &train_records,
        task,
        OversampleConfig {
            factor: cfg.oversample_factor,
        },
    )?;
    let leaks = verify_leakage(&plan, &expanded);
    if !leaks.is_ok() {
        return Err(CliError::Data(format!("held-out records in training list: {:?}", leaks.violations)));
    }
    let train_set = build_samples(cfg, &manifest, model, &expanded)?;
    let val_set = build_samples(cfg, &manifest, model, &val_records)?;
    println!(
        "{model} on {}: {} train rows ({} distinct, oversampling x{}), {} validation rows",
        cfg.task,
        train_set.len(),
        train_records.len(),
        cfg.oversample_factor,
        val_set.len()
    );
    let work = &cfg.work_dir;
    create_dir(&runs_dir(work))?;
    let schedule = &cfg.schedule;
    let runs = run_names(model, cfg.task);
    match model {
        ModelKind::Scratch => {
            let net = build_scratch(cfg.scratch_size)?;
            let params = init_params(&net, &mut Rng::new(seed));
            let outcome = run_scratch_stage(&net, params, &train_set, &val_set, schedule, seed)?;
            write_outcome(work, &runs[0], &outcome)?;
        }
        ModelKind::FeatureExtractor | ModelKind::FineTune => {
            let backbone = load_backbone(cfg, seed)?;
            let net = build_feature_extractor(&backbone.spec)?;
            let params = backbone.initial_params(&net, seed)?;
            let stage1 = run_feature_extractor_stage(&net, params, &train_set, &val_set, schedule, seed)?;
            write_outcome(work, &runs[0], &stage1)?;
            if model == ModelKind::FineTune {
                let (_, stage2) =
                    run_finetune_stage(&net, Some(stage1.best_params), &train_set, &val_set, schedule, seed)?;
                write_outcome(work, &runs[1], &stage2)?;
            }
        }
        ModelKind::Hybrid => {
            let backbone = load_backbone(cfg, seed)?;
            let net = build_hybrid(&backbone.spec, &HybridSpec::default())?;
            let params = backbone.initial_params(&net, seed)?;
            let outcome = run_hybrid_stage(&net, params, &train_set, &val_set, schedule, seed)?;
            write_outcome(work, &runs[0], &outcome)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionArg {
    One(Partition),
    All,
}

impl PartitionArg {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        if s == "all" {
            return Ok(PartitionArg::All);
        }
        s.parse::<Partition>()
            .map(PartitionArg::One)
            .map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn name(self) -> &'static str {
        match self {
            PartitionArg::One(p) => p.as_str(),
            PartitionArg::All => "all",
        }
    }
}

pub fn predictions_path(work: &Path, model: ModelKind, task: TaskId, partition: PartitionArg) -> PathBuf {
    work.join("predictions")
        .join(format!("{model}-{task}-{}.csv", partition.name()))
}

pub fn predict(cfg: &RunConfig, partition: PartitionArg, checkpoint: Option<&Path>) -> Result<PathBuf, CliError> {
    let model = cfg.model()?;
    let dataset = load_dataset(cfg)?;
    let records: Vec<LesionRecord> = match partition {
        PartitionArg::All => dataset.records().to_vec(),
        PartitionArg::One(p) => load_plan(cfg)?.records(&dataset, p).into_iter().cloned().collect(),
    };
    let net = model_network(cfg, model)?;
    let default_ckpt;
    let ckpt = match checkpoint {
        Some(p) => p,
        None => {
            let run = run_names(model, cfg.task).pop().expect("run name");
            default_ckpt = checkpoint_path(&cfg.work_dir, &run);
            &default_ckpt
        }
    };
    if !ckpt.exists() {
        return Err(CliError::Missing(format!(
            "checkpoint {} (run `lesion train` first)",
            ckpt.display()
        )));
    }
    let params: ParamStore = load_params_for(&net, ckpt)?;
    let manifest = Manifest::load(&cfg.work_dir)?;
    let samples = build_samples(cfg, &manifest, model, &records)?;
    let mut rows = Vec::with_capacity(samples.len());
    for s in &samples {
        let score = f64::from(net.predict(&params, &s.inputs)?.data()[0]);
        assert!((0.0..=1.0).contains(&score), "sigmoid output {score} outside [0, 1]");
        rows.push(match cfg.task {
            TaskId::Task1 => (s.id.clone(), score, 0.0),
            TaskId::Task2 => (s.id.clone(), 0.0, score),
        });
    }
    let other = match cfg.task {
        TaskId::Task1 => "seborrheic_keratosis",
        TaskId::Task2 => "melanoma",
    };
    let sub = Submission {
        comments: vec![
            format!("model={model} task={} partition={}", cfg.task, partition.name()),
            format!("{other} is not predicted by this model; column filled with 0.0"),
        ],
        rows,
    };
    let path = predictions_path(&cfg.work_dir, model, cfg.task, partition);
    create_dir(path.parent().expect("predictions dir"))?;
    sub.write(&path)?;
    println!("{} predictions written to {}", sub.rows.len(), path.display());
    Ok(path)
}

fn scored_set(
    cfg: &RunConfig,
    dataset: &Dataset,
    model: ModelKind,
    task: TaskId,
    partition: Partition,
) -> Result<Option<ScoredSet>, CliError> {
    let path = predictions_path(&cfg.work_dir, model, task, PartitionArg::One(partition));
    if !path.exists() {
        return Ok(None);
    }
    let mut sub = Submission::read(&path)?;
    // one row per distinct image; duplicates from oversampling never count
    let mut seen = std::collections::BTreeSet::new();
    sub.rows.retain(|(id, _, _)| seen.insert(id.clone()));
    let set = sub.scored_set(dataset, task.spec())?;
    if set.positives() == 0 || set.negatives() == 0 {
        return Err(CliError::Data(format!(
            "{}: partition `{partition}` has {} positive and {} negative labels for {task}; rank metrics need both",
            path.display(),
            set.positives(),
            set.negatives()
        )));
    }
    Ok(Some(set))
}

fn write_report(cfg: &RunConfig, stem: &str, report: &EvalReport) -> Result<(), CliError> {
    let dir = cfg.work_dir.join("reports");
    create_dir(&dir)?;
    let txt = dir.join(format!("{stem}.txt"));
    let csv = dir.join(format!("{stem}.csv"));
    std::fs::write(&txt, report.render_text()).map_err(|e| io(&txt, e))?;
    std::fs::write(&csv, report.render_csv()).map_err(|e| io(&csv, e))?;
    print!("{}", report.render_text());
    println!("report written to {} and {}", txt.display(), csv.display());
    Ok(())
}

fn warn_train(partition: Partition) {
    if partition == Partition::Train {
        eprintln!(
            "warning: evaluating on the train partition; metrics use the de-duplicated records (oversampled copies excluded)"
        );
    }
}

/// Metrics for the configured model and task on one partition.
pub fn evaluate(cfg: &RunConfig, partition: Partition) -> Result<(), CliError> {
    let model = cfg.model()?;
    warn_train(partition);
    let dataset = load_dataset(cfg)?;
    let set = scored_set(cfg, &dataset, model, cfg.task, partition)?.ok_or_else(|| {
        CliError::Missing(format!(
            "prediction file {} (run `lesion predict` first)",
            predictions_path(&cfg.work_dir, model, cfg.task, PartitionArg::One(partition)).display()
        ))
    })?;
    let mut results = BTreeMap::new();
    results.insert((model, cfg.task), set);
    let report = build_report(&results)?;
    write_report(cfg, &format!("{model}-{}-{partition}", cfg.task), &report)
}

/// Table over every model/task with a prediction file for the partition.
pub fn report(cfg: &RunConfig, partition: Partition) -> Result<(), CliError> {
    warn_train(partition);
    let dataset = load_dataset(cfg)?;
    let mut results = BTreeMap::new();
    for model in ModelKind::ALL {
        for task in TaskId::ALL {
            if let Some(set) = scored_set(cfg, &dataset, model, task, partition)? {
                results.insert((model, task), set);
            }
        }
    }
    if results.is_empty() {
        eprintln!(
            "warning: no prediction files for partition `{partition}` in {}",
            cfg.work_dir.join("predictions").display()
        );
    }
    let report = build_report(&results)?;
    write_report(cfg, &format!("report-{partition}"), &report)
}

pub struct SynthArgs {
    pub out: PathBuf,
    pub count: usize,
    pub size: usize,
    pub melanoma_fraction: f64,
    pub keratosis_fraction: f64,
    pub seed: u64,
}

/// Writes a synthetic lesion set (images, ground truth, metadata).
pub fn synth(args: &SynthArgs) -> Result<(), CliError> {
    let mut lc = LesionSetConfig::dataset_b(args.seed);
    lc.count = args.count;
    lc.size = args.size;
    lc.melanoma_fraction = args.melanoma_fraction;
    lc.keratosis_fraction = args.keratosis_fraction;
    let set = lesion_dataset(&lc)?;
    let written = write_lesion_set(&set, &args.out)?;
    println!(
        "{} images in {}; ground truth {}; metadata {}",
        set.dataset.len(),
        written.images_dir.display(),
        written.ground_truth.display(),
        written.metadata.display()
    );
    Ok(())
}
