use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use voxdiff::denoiser::{
    load_model, save_model, train, AugmentConfig, Denoiser, GaussianOracle, LoadedModel, TinyUNet, TrainConfig,
    UNetConfig, WeightsHeader,
};
use voxdiff::eval::{
    extract_features, fid_table, fit_stats, nn_search, permutation_protocol, read_features, read_regional_csv,
    FeatureMatrix, FidGroup, PermutationConfig,
};
use voxdiff::sampler::{generate, SamplerConfig};
use voxdiff::volume::{
    extract_slices, preprocess_volume, read_nifti, split_subjects, write_nifti, Manifest, ManifestRecord, QaStatus,
    Split, SplitConfig, Volume,
};
use voxdiff::NoiseSchedule;

use crate::report::{write_csv, write_json};
use crate::{
    bench, usage, BenchArgs, Command, EvalMode, FidArgs, GenerateArgs, KsArgs, NnArgs, OracleArgs, PreprocessArgs,
    SplitArgs, Status, TrainArgs,
};

pub(crate) fn dispatch(cmd: &Command) -> Result<Status> {
    match cmd {
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::Split(a) => cmd_split(a),
        Command::Train(a) => cmd_train(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Eval(a) => match &a.mode {
            EvalMode::Fid(m) => cmd_fid(m),
            EvalMode::Ks(m) => cmd_ks(m),
            EvalMode::Nn(m) => cmd_nn(m),
        },
        Command::Bench(a) => cmd_bench(a),
        Command::Oracle(a) => cmd_oracle(a),
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(usage(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn read_manifest(path: &Path) -> Result<Manifest> {
    require_file(path, "manifest")?;
    Manifest::read(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

/// Paths inside a manifest are relative to the manifest's directory.
fn resolve(manifest: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(p)
    }
}

fn as_shape(v: &[usize]) -> Result<[usize; 3]> {
    match v {
        [a, b, c] if *a > 0 && *b > 0 && *c > 0 => Ok([*a, *b, *c]),
        _ => Err(usage(format!("shape needs three positive sizes, got {v:?}"))),
    }
}

/// `NAME=PATH` pairs used to label evaluation groups.
pub fn parse_named_path(s: &str) -> Result<(String, PathBuf)> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => Ok((name.to_string(), PathBuf::from(path))),
        _ => Err(usage(format!("expected NAME=PATH, got {s:?}"))),
    }
}

/// `.nii` files of a directory in name order, or the file itself.
pub fn volume_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    if !path.is_dir() {
        return Err(usage(format!("{} does not exist", path.display())));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "nii"))
        .collect();
    files.sort();
    Ok(files)
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

#[derive(Serialize)]
struct PreprocessLogRow {
    source: String,
    output: String,
    status: &'static str,
    error: String,
}

fn cmd_preprocess(a: &PreprocessArgs) -> Result<Status> {
    let manifest = read_manifest(&a.manifest)?;
    create_out(&a.out)?;
    let jobs: Vec<(usize, &ManifestRecord)> = manifest
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.qa_status == QaStatus::Pass)
        .collect();
    let results: Vec<(usize, std::result::Result<String, String>)> = jobs
        .par_iter()
        .map(|&(i, r)| {
            let name = format!("{i:05}_{}_{}.nii", sanitize(&r.dataset), sanitize(&r.subject));
            let run = || -> voxdiff::Result<()> {
                let v = read_nifti(resolve(&a.manifest, &r.path))?;
                let mask = r
                    .mask_path
                    .as_ref()
                    .map(|m| read_nifti(resolve(&a.manifest, m)))
                    .transpose()?;
                let out = preprocess_volume(&v, mask.as_ref())?;
                write_nifti(&out, a.out.join(&name))
            };
            (i, run().map(|()| name).map_err(|e| e.to_string()))
        })
        .collect();

    let mut processed = Vec::new();
    let mut log = Vec::new();
    let mut failures = 0;
    for (i, res) in results {
        let r = &manifest.records[i];
        match res {
            Ok(name) => {
                processed.push(ManifestRecord {
                    path: name.clone(),
                    mask_path: None,
                    ..r.clone()
                });
                log.push(PreprocessLogRow {
                    source: r.path.clone(),
                    output: name,
                    status: "ok",
                    error: String::new(),
                });
            }
            Err(e) => {
                failures += 1;
                eprintln!("failed: {}: {e}", r.path);
                log.push(PreprocessLogRow {
                    source: r.path.clone(),
                    output: String::new(),
                    status: "failed",
                    error: e,
                });
            }
        }
    }
    Manifest::new(processed).write(a.out.join("manifest.jsonl"))?;
    write_csv(&a.out.join("preprocess_log.csv"), &log)?;
    let skipped = manifest.records.len() - jobs.len();
    write_json(
        &a.out.join("preprocess.json"),
        &serde_json::json!({
            "records": manifest.records.len(),
            "skipped_qa_fail": skipped,
            "processed": jobs.len() - failures,
            "failed": failures,
        }),
    )?;
    Ok(if failures > 0 { Status::Partial } else { Status::Success })
}

fn cmd_split(a: &SplitArgs) -> Result<Status> {
    let manifest = read_manifest(&a.manifest)?;
    create_out(&a.out)?;
    let cfg = SplitConfig {
        test_fraction: a.test_fraction,
        withheld: a.withheld.clone(),
        seed: a.seed,
    };
    let out = split_subjects(&manifest, &cfg).map_err(|e| usage(e.to_string()))?;
    out.check_splits()?;
    out.write(a.out.join("manifest.jsonl"))?;
    out.write_csv(a.out.join("manifest.csv"))?;
    let count = |s: Split| out.in_split(s).count();
    write_json(
        &a.out.join("split.json"),
        &serde_json::json!({
            "train": count(Split::Train),
            "test_internal": count(Split::TestInternal),
            "test_external": count(Split::TestExternal),
            "excluded": count(Split::Excluded),
        }),
    )?;
    Ok(Status::Success)
}

fn cmd_train(a: &TrainArgs) -> Result<Status> {
    let manifest = read_manifest(&a.manifest)?;
    let any_split = manifest.records.iter().any(|r| r.split.is_some());
    let records: Vec<&ManifestRecord> = manifest
        .records
        .iter()
        .filter(|r| r.qa_status == QaStatus::Pass)
        .filter(|r| !any_split || r.split == Some(Split::Train))
        .collect();
    if records.is_empty() {
        return Err(usage("no training records in manifest"));
    }
    let mut cfg = if a.desk {
        TrainConfig::desk()
    } else {
        TrainConfig::default()
    };
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if a.no_augment {
        cfg.augment = AugmentConfig::none();
    }
    cfg.seed = a.seed;
    cfg.inject_nan_epoch = a.inject_nan_epoch;
    let unet = UNetConfig {
        widths: a.widths.clone(),
        temb_dim: a.temb_dim,
        norm_groups: a.norm_groups,
    };
    let net = TinyUNet::new(unet, a.kind, a.seed).map_err(|e| usage(e.to_string()))?;
    create_out(&a.out)?;

    let dataset = records
        .iter()
        .map(|r| {
            let p = resolve(&a.manifest, &r.path);
            read_nifti(&p).with_context(|| format!("reading {}", p.display()))
        })
        .collect::<Result<Vec<Volume>>>()?;
    let schedule = NoiseSchedule::default();
    let outcome = train(net, &dataset, &schedule, &cfg)?;
    outcome.write_history_csv(&a.out.join("loss.csv"))?;

    let epoch = outcome.completed_epochs();
    let ema = outcome.ema_net()?;
    save_model(
        &a.out.join("model.bin"),
        &WeightsHeader::for_unet(&ema, &schedule, epoch, cfg.ema_momentum),
        ema.params(),
    )?;
    save_model(
        &a.out.join("model_raw.bin"),
        &WeightsHeader::for_unet(&outcome.net, &schedule, epoch, cfg.ema_momentum),
        outcome.net.params(),
    )?;
    write_json(
        &a.out.join("train.json"),
        &serde_json::json!({
            "config": cfg,
            "volumes": dataset.len(),
            "completed_epochs": epoch,
            "divergence": outcome.divergence,
            "final_loss": outcome.history.iter().rev().find(|r| !r.diverged).map(|r| r.mean_loss),
        }),
    )?;
    if let Some(d) = outcome.divergence {
        eprintln!(
            "training diverged at epoch {}; weights from epoch {:?} were saved",
            d.epoch, d.last_good_epoch
        );
        return Ok(Status::Partial);
    }
    Ok(Status::Success)
}

fn load_weights(path: &Path) -> Result<LoadedModel> {
    require_file(path, "weights")?;
    load_model(path).with_context(|| format!("reading weights {}", path.display()))
}

#[derive(Serialize)]
struct Sidecar<'a> {
    seed: u64,
    steps: usize,
    eta: f64,
    kind: voxdiff::PredictionKind,
    schedule: voxdiff::ScheduleParams,
    weights: &'a Path,
    shape: [usize; 3],
    min: f64,
    max: f64,
}

fn cmd_generate(a: &GenerateArgs) -> Result<Status> {
    let shape = as_shape(&a.shape)?;
    if !(0.0..=1.0).contains(&a.eta) {
        return Err(usage(format!("eta must be in [0, 1], got {}", a.eta)));
    }
    let model = load_weights(&a.weights)?;
    let schedule = model.schedule()?;
    create_out(&a.out)?;
    let steps = a.steps as usize;
    (0..a.count as u64).into_par_iter().try_for_each(|i| -> Result<()> {
        let seed = a.seed + i;
        let cfg = SamplerConfig {
            steps,
            eta: a.eta,
            seed,
            shape,
        };
        let v = generate(&model, &schedule, &cfg)?;
        let stem = format!("sample_{seed:06}");
        write_nifti(&v, a.out.join(format!("{stem}.nii")))?;
        let (min, max) = v.min_max();
        write_json(
            &a.out.join(format!("{stem}.json")),
            &Sidecar {
                seed,
                steps,
                eta: a.eta,
                kind: model.kind(),
                schedule: schedule.params(),
                weights: &a.weights,
                shape,
                min,
                max,
            },
        )
    })?;
    Ok(Status::Success)
}

fn group_features(path: &Path, a: &FidArgs) -> Result<(FeatureMatrix, usize)> {
    if path.is_file() && path.extension().is_none_or(|e| e != "nii") {
        let f = read_features(path)?;
        return Ok((f, 0));
    }
    let files = volume_files(path)?;
    if files.is_empty() {
        return Err(usage(format!("no .nii volumes in {}", path.display())));
    }
    let parts = files
        .par_iter()
        .map(|p| -> Result<FeatureMatrix> {
            let v = read_nifti(p)?;
            let slices = extract_slices(&v, a.slice_spacing_mm);
            Ok(extract_features(&slices, &a.extractor, a.seed)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut iter = parts.into_iter();
    let mut all = iter.next().expect("at least one file");
    for p in iter {
        all.extend(&p)?;
    }
    Ok((all, files.len()))
}

fn cmd_fid(a: &FidArgs) -> Result<Status> {
    let mut named = Vec::new();
    for s in &a.real {
        named.push((parse_named_path(s)?, true));
    }
    for s in &a.synth {
        named.push((parse_named_path(s)?, false));
    }
    for ((_, p), _) in &named {
        if !p.exists() {
            return Err(usage(format!("{} does not exist", p.display())));
        }
    }
    create_out(&a.out)?;
    let mut groups = Vec::new();
    let mut summary = Vec::new();
    let mut extractor: Option<String> = None;
    for ((name, path), real) in named {
        let (features, volumes) = group_features(&path, a)?;
        match &extractor {
            Some(e) if *e != features.extractor => {
                bail!("group {name} uses extractor {} but others use {e}", features.extractor)
            }
            _ => extractor = Some(features.extractor.clone()),
        }
        summary.push(serde_json::json!({
            "name": name, "real": real, "volumes": volumes, "slices": features.n,
        }));
        groups.push(FidGroup {
            name,
            real,
            stats: fit_stats(&features)?,
        });
    }
    let table = fid_table(&groups)?;
    std::fs::write(a.out.join("fid.csv"), table.to_csv())?;
    write_json(
        &a.out.join("fid.json"),
        &serde_json::json!({ "extractor": extractor, "groups": summary, "table": table }),
    )?;
    print!("{}", table.to_csv());
    Ok(Status::Success)
}

fn cmd_ks(a: &KsArgs) -> Result<Status> {
    require_file(&a.real, "real regional CSV")?;
    require_file(&a.synth, "synthetic regional CSV")?;
    let real = read_regional_csv(&a.real)?;
    let synth = read_regional_csv(&a.synth)?;
    create_out(&a.out)?;
    let cfg = PermutationConfig {
        reps: a.reps,
        subsample: a.subsample,
        alpha: a.alpha,
        seed: a.seed,
    };
    let report = permutation_protocol(&real, &synth, &cfg)?;
    std::fs::write(a.out.join("ks.csv"), report.to_csv())?;
    write_json(&a.out.join("ks.json"), &report)?;
    if report.small_sample {
        eprintln!("warning: fewer than 30 samples; asymptotic p-values are unreliable");
    }
    print!("{}", report.to_csv());
    Ok(Status::Success)
}

#[derive(Serialize)]
struct NnRow {
    query: String,
    rank: usize,
    index: usize,
    candidate: String,
    mse: f64,
}

fn cmd_nn(a: &NnArgs) -> Result<Status> {
    if a.k == 0 {
        return Err(usage("k must be at least 1"));
    }
    let queries = volume_files(&a.query)?;
    let candidates: Vec<PathBuf> = if a.candidates.extension().is_some_and(|e| e == "jsonl") {
        let m = read_manifest(&a.candidates)?;
        m.records.iter().map(|r| resolve(&a.candidates, &r.path)).collect()
    } else {
        volume_files(&a.candidates)?
    };
    create_out(&a.out)?;
    let per_query = queries
        .par_iter()
        .map(|q| -> Result<Vec<NnRow>> {
            let query = read_nifti(q)?;
            // Candidates are read lazily, one at a time.
            let stream = candidates.iter().map(read_nifti);
            let found = nn_search(&query, stream, a.k)?;
            Ok(found
                .into_iter()
                .enumerate()
                .map(|(rank, n)| NnRow {
                    query: q.display().to_string(),
                    rank: rank + 1,
                    index: n.index,
                    candidate: candidates[n.index].display().to_string(),
                    mse: n.mse,
                })
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<NnRow> = per_query.into_iter().flatten().collect();
    write_csv(&a.out.join("nn.csv"), &rows)?;
    write_json(&a.out.join("nn.json"), &rows)?;
    Ok(Status::Success)
}

fn cmd_bench(a: &BenchArgs) -> Result<Status> {
    let shape = as_shape(&a.shape)?;
    if a.reps == 0 || a.batch == 0 {
        return Err(usage("reps and batch must be positive"));
    }
    let (model, schedule): (Box<dyn Denoiser>, NoiseSchedule) = match &a.weights {
        Some(p) => {
            let m = load_weights(p)?;
            let s = m.schedule()?;
            (Box::new(m), s)
        }
        None => (
            Box::new(GaussianOracle::constant(
                0.0,
                1.0,
                NoiseSchedule::default(),
                voxdiff::PredictionKind::Velocity,
            )),
            NoiseSchedule::default(),
        ),
    };
    create_out(&a.out)?;
    let steps: Vec<usize> = a.steps.iter().map(|&s| s as usize).collect();
    let rows = bench::run_bench(model.as_ref(), &schedule, shape, &steps, a.reps, a.batch, a.seed)?;
    #[derive(Serialize)]
    struct CsvRow {
        steps: usize,
        median_s: f64,
        mmss: String,
    }
    let csv_rows: Vec<CsvRow> = rows
        .iter()
        .map(|r| CsvRow {
            steps: r.steps,
            median_s: r.median_s,
            mmss: r.mmss.clone(),
        })
        .collect();
    write_csv(&a.out.join("bench.csv"), &csv_rows)?;
    write_json(&a.out.join("bench.json"), &rows)?;
    print!("{}", bench::format_table(&rows));
    Ok(Status::Success)
}

fn cmd_oracle(a: &OracleArgs) -> Result<Status> {
    if !(a.std >= 0.0 && a.std.is_finite()) {
        return Err(usage(format!("std must be nonnegative, got {}", a.std)));
    }
    create_out(&a.out)?;
    let oracle = GaussianOracle::constant(a.mean, a.std * a.std, NoiseSchedule::default(), a.kind);
    save_model(
        &a.out.join("oracle.bin"),
        &WeightsHeader::for_oracle(&oracle),
        oracle.mean(),
    )?;
    Ok(Status::Success)
}
