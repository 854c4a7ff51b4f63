use std::path::Path;
use std::process::{Command, Output};

use voxdiff::eval::{write_regional_csv, RegionalVolumes};
use voxdiff::rng::NoiseRng;
use voxdiff::schedule::ddim_timesteps;
use voxdiff::volume::{read_nifti, write_nifti, Manifest, ManifestRecord, QaStatus};
use voxdiff::{NoiseSchedule, Volume};

fn voxdiff(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxdiff"))
        .args(args)
        .current_dir(dir)
        .env("VOXDIFF_WORKERS", "2")
        .output()
        .unwrap()
}

fn record(subject: &str, path: &str) -> ManifestRecord {
    ManifestRecord {
        subject: subject.into(),
        path: path.into(),
        dataset: "TEST".into(),
        split: None,
        qa_status: QaStatus::Pass,
        qa_reason: None,
        mask_path: None,
    }
}

fn blob(dims: [usize; 3], spacing: f64, seed: u64) -> Volume {
    let mut rng = NoiseRng::new(seed);
    let c = dims.map(|d| d as f64 / 2.0);
    let mut data = Vec::new();
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let r2 = ((i as f64 - c[0]).powi(2) + (j as f64 - c[1]).powi(2) + (k as f64 - c[2]).powi(2))
                    * spacing
                    * spacing;
                data.push(if r2 < 1600.0 {
                    200.0 + 20.0 * rng.gaussian()
                } else {
                    rng.uniform()
                });
            }
        }
    }
    Volume::from_f64(dims, [spacing; 3], &data).unwrap()
}

fn noise_volumes(dir: &Path, n: usize, seed: u64) {
    std::fs::create_dir_all(dir).unwrap();
    let mut rng = NoiseRng::new(seed);
    for i in 0..n {
        let v = Volume::from_f64([16, 16, 16], [1.0; 3], &rng.gaussian_vec(4096)).unwrap();
        write_nifti(&v, dir.join(format!("v{i:02}.nii"))).unwrap();
    }
}

#[test]
fn empty_manifest_is_success() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("m.jsonl"), "").unwrap();
    let out = voxdiff(&["preprocess", "--manifest", "m.jsonl", "--out", "pre"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(Manifest::read(dir.path().join("pre/manifest.jsonl"))
        .unwrap()
        .records
        .is_empty());
    assert!(dir.path().join("pre/run.json").exists());
}

#[test]
fn corrupt_input_is_partial_and_logged() {
    let dir = tempfile::tempdir().unwrap();
    write_nifti(&blob([48, 56, 48], 2.0, 1), dir.path().join("good.nii")).unwrap();
    std::fs::write(dir.path().join("bad.nii"), b"definitely not a nifti file").unwrap();
    Manifest::new(vec![record("a", "good.nii"), record("b", "bad.nii")])
        .write(dir.path().join("m.jsonl"))
        .unwrap();
    let out = voxdiff(&["preprocess", "--manifest", "m.jsonl", "--out", "pre"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let log = std::fs::read_to_string(dir.path().join("pre/preprocess_log.csv")).unwrap();
    let bad_line = log.lines().find(|l| l.starts_with("bad.nii")).expect("bad file logged");
    assert!(bad_line.contains("failed"), "{bad_line}");
    let processed = Manifest::read(dir.path().join("pre/manifest.jsonl")).unwrap();
    assert_eq!(processed.records.len(), 1);
    let v = read_nifti(dir.path().join("pre").join(&processed.records[0].path)).unwrap();
    assert_eq!(v.dims(), [192, 224, 192]);
    let run: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("pre/run.json")).unwrap()).unwrap();
    assert_eq!(run["exit_code"], 1);
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = voxdiff(
        &["generate", "--weights", "w.bin", "--out", "g", "--steps", "0"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    let out = voxdiff(&["bench", "--out", "b", "--steps", "8,0"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = voxdiff(&["frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = voxdiff(&["preprocess", "--manifest", "missing.jsonl", "--out", "p"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("p/run.json").exists());
}

fn sample_values(dir: &Path, run: &str, seed: u64) -> Vec<f64> {
    read_nifti(dir.join(run).join(format!("sample_{seed:06}.nii")))
        .unwrap()
        .to_f64()
}

#[test]
fn oracle_generation_is_reproducible_and_has_the_data_moments() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let out = voxdiff(
        &["oracle", "--out", "o", "--mean", "0.3", "--std", "1", "--kind", "flow"],
        p,
    );
    assert_eq!(out.status.code(), Some(0));
    let gen = |run: &str| {
        voxdiff(
            &[
                "generate",
                "--weights",
                "o/oracle.bin",
                "--out",
                run,
                "--count",
                "2",
                "--seed",
                "5",
                "--steps",
                "32",
                "--shape",
                "20,20,20",
            ],
            p,
        )
    };
    assert_eq!(gen("a").status.code(), Some(0));
    assert_eq!(gen("b").status.code(), Some(0));
    for seed in [5, 6] {
        assert_eq!(sample_values(p, "a", seed), sample_values(p, "b", seed));
    }
    assert_ne!(sample_values(p, "a", 5), sample_values(p, "a", 6));

    // With unit data variance the posterior mean is affine in x_t and each
    // deterministic step from ab to ab' scales the deviation from the mean
    // by sqrt(ab ab') + sqrt((1 - ab)(1 - ab')), so the output spread is the
    // product of those factors.
    let schedule = NoiseSchedule::default();
    let mut ts = ddim_timesteps(schedule.len(), 32).unwrap();
    ts.sort_unstable_by(|a, b| b.cmp(a));
    let mut abs: Vec<f64> = ts.iter().map(|&t| schedule.alpha_bar()[t]).collect();
    abs.push(1.0);
    let expected_std: f64 = abs
        .windows(2)
        .map(|w| (w[0] * w[1]).sqrt() + ((1.0 - w[0]) * (1.0 - w[1])).sqrt())
        .product();
    let x = sample_values(p, "a", 5);
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let std = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((mean - 0.3).abs() < 4.0 / n.sqrt(), "mean {mean}");
    assert!(
        (std - expected_std).abs() / expected_std < 0.05,
        "std {std}, expected {expected_std}"
    );

    let sidecar: serde_json::Value =
        serde_json::from_slice(&std::fs::read(p.join("a/sample_000006.json")).unwrap()).unwrap();
    assert_eq!(sidecar["seed"], 6);
    assert_eq!(sidecar["steps"], 32);
    assert_eq!(sidecar["kind"], "flow");
}

#[test]
fn fid_of_a_group_with_itself_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    noise_volumes(&p.join("real"), 4, 1);
    noise_volumes(&p.join("other"), 4, 2);
    let out = voxdiff(
        &[
            "eval", "fid", "--real", "R=real", "--synth", "S=real", "--synth", "O=other", "--out", "fid",
        ],
        p,
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(p.join("fid/fid.json")).unwrap()).unwrap();
    let table = &json["table"];
    let cols: Vec<&str> = table["columns"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c.as_str().unwrap())
        .collect();
    let s = cols.iter().position(|&c| c == "S").unwrap();
    let o = cols.iter().position(|&c| c == "O").unwrap();
    let row = &table["values"][0];
    assert!(row[s].as_f64().unwrap().abs() < 1e-6, "{row}");
    assert!(row[o].as_f64().unwrap() > 0.0);
    assert!(p.join("fid/fid.csv").exists());
}

#[test]
fn nn_lists_k_neighbours_per_query() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    noise_volumes(&p.join("train"), 5, 3);
    noise_volumes(&p.join("gen"), 3, 4);
    std::fs::copy(p.join("train/v02.nii"), p.join("gen/copy.nii")).unwrap();
    let out = voxdiff(
        &["eval", "nn", "--query", "gen", "--candidates", "train", "--out", "nn"],
        p,
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let mut reader = csv::Reader::from_path(p.join("nn/nn.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 4 * 2);
    let copy_top = rows
        .iter()
        .find(|r| r[0].ends_with("copy.nii") && &r[1] == "1")
        .unwrap();
    assert!(copy_top[3].ends_with("v02.nii"));
    assert_eq!(copy_top[4].parse::<f64>().unwrap(), 0.0);
}

#[test]
fn ks_is_deterministic_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let mut rng = NoiseRng::new(9);
    let mut draw = |n: usize, shift: f64| -> Vec<RegionalVolumes> {
        (0..n)
            .map(|i| {
                let v: [f64; 6] = std::array::from_fn(|k| 1000.0 * (k + 1) as f64 + shift + 50.0 * rng.gaussian());
                RegionalVolumes::new(format!("v{i}"), v).unwrap()
            })
            .collect()
    };
    write_regional_csv(&p.join("real.csv"), &draw(300, 0.0)).unwrap();
    write_regional_csv(&p.join("synth.csv"), &draw(200, 0.0)).unwrap();
    let args = |out: &'static str| {
        [
            "eval",
            "ks",
            "--real",
            "real.csv",
            "--synth",
            "synth.csv",
            "--reps",
            "50",
            "--subsample",
            "100",
            "--seed",
            "3",
            "--out",
            out,
        ]
    };
    assert_eq!(voxdiff(&args("k1"), p).status.code(), Some(0));
    assert_eq!(voxdiff(&args("k2"), p).status.code(), Some(0));
    let a = std::fs::read_to_string(p.join("k1/ks.csv")).unwrap();
    assert_eq!(a, std::fs::read_to_string(p.join("k2/ks.csv")).unwrap());
    assert_eq!(a.lines().count(), 7);
}

#[test]
fn bench_reports_one_row_per_step_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = voxdiff(
        &[
            "bench", "--out", "b", "--steps", "2,4,8", "--reps", "2", "--shape", "8,8,8",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let mut reader = csv::Reader::from_path(dir.path().join("b/bench.csv")).unwrap();
    let steps: Vec<String> = reader.records().map(|r| r.unwrap()[0].to_string()).collect();
    assert_eq!(steps, ["2", "4", "8"]);
    let run: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("b/run.json")).unwrap()).unwrap();
    assert_eq!(run["exit_code"], 0);
    assert_eq!(run["workers"], 2);
    assert_eq!(run["config"]["command"], "bench");
}
