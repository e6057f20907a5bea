#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use chronolens::ingest::{save_features, write_manifest, write_pnm_file, FeatureMatrix, Sample};
use chronolens::synthetic::{planted_dataset, PlantedConfig, PlantedSample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

pub const N_SAMPLES: usize = 66;

/// A small planted dataset on disk: images, manifest, features, detectors
/// and collections.
pub struct Fixture {
    pub dir: TempDir,
    pub samples: Vec<PlantedSample>,
}

impl Fixture {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PlantedConfig {
            n_samples: N_SAMPLES,
            seed: 5,
            ..Default::default()
        };
        let samples = planted_dataset(&cfg).unwrap();
        fs::create_dir(dir.path().join("images")).unwrap();
        let mut manifest = Vec::new();
        for (i, s) in samples.iter().enumerate() {
            let rel = format!("images/s{i:03}.pgm");
            write_pnm_file(dir.path().join(&rel), &s.image).unwrap();
            let mut m = Sample::new(format!("s{i:03}"));
            // a third of the labels come from free text
            if i % 3 == 0 {
                m.date_text = Some(format!("{}s dress", s.year / 10 * 10));
            } else {
                m.label_year = Some(s.year);
            }
            m.split = s.split;
            m.path = Some(rel.into());
            manifest.push(m);
        }
        write_manifest(
            fs::File::create(dir.path().join("manifest.jsonl")).unwrap(),
            &manifest,
        )
        .unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rows: Vec<Vec<f64>> = samples
            .iter()
            .map(|s| {
                let mut r: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
                r[0] = (s.year - 1955) as f64 / 50.0;
                r[1 + s.label.0 % 5] += 2.0;
                r
            })
            .collect();
        save_features(
            dir.path().join("features.bin"),
            &FeatureMatrix::from_rows(&rows).unwrap(),
        )
        .unwrap();
        let short: Vec<Vec<f64>> = rows[1..].to_vec();
        save_features(
            dir.path().join("short.bin"),
            &FeatureMatrix::from_rows(&short).unwrap(),
        )
        .unwrap();

        let mut det = String::from("# detector, sample, confidence, x, y, w, h\n");
        for (i, s) in samples.iter().enumerate() {
            if s.label.0 < 4 {
                let p = s.planted;
                let conf = 0.5 + 0.01 * ((i * 7) % 40) as f64;
                det.push_str(&format!(
                    "d{},s{i:03},{conf},{},{},{},{}\n",
                    s.label.0 % 2,
                    p.x,
                    p.y,
                    p.w,
                    p.h
                ));
            }
        }
        fs::write(dir.path().join("detectors.txt"), det).unwrap();

        let mut col = String::new();
        for i in 0..N_SAMPLES {
            col.push_str(&format!("c{},{},s{i:03}\n", i % 6, 2000 + (i % 6) / 2));
        }
        fs::write(dir.path().join("collections.txt"), col).unwrap();

        fs::write(
            dir.path().join("dates.jsonl"),
            concat!(
                r#"{"id":"a","date_text":"1954-1957"}"#,
                "\n",
                r#"{"id":"b","title":"dress","tags":"vintage 90s, \"party\""}"#,
                "\n",
                r#"{"id":"c","date_text":"1895"}"#,
                "\n",
                r#"{"id":"d","description":"no date here"}"#,
                "\n",
                r#"{"id":"e","year":1965}"#,
                "\n",
            ),
        )
        .unwrap();
        Fixture { dir, samples }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    pub fn run(&self, args: &[&str]) -> Output {
        self.run_env(args, &[])
    }

    pub fn run_env(&self, args: &[&str], env: &[(&str, &str)]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_chronolens"));
        cmd.current_dir(self.dir.path())
            .args(args)
            .env_remove("CHRONOLENS_THREADS");
        for (k, v) in env {
            cmd.env(k, v);
        }
        cmd.output().unwrap()
    }
}

/// Run every subcommand with outputs under `out` (relative to the fixture)
/// and return the captured standard output of each run, in order.
pub fn run_all(
    fx: &Fixture,
    out: &str,
    env: &[(&str, &str)],
) -> Result<Vec<(String, Vec<u8>)>, String> {
    fs::create_dir_all(fx.path(out)).unwrap();
    let o = |name: &str| format!("{out}/{name}");
    let steps: Vec<(&str, Vec<String>)> = vec![
        (
            "parse-dates",
            args(&[
                "parse-dates",
                "--manifest",
                "dates.jsonl",
                "--out",
                &o("dates.csv"),
            ]),
        ),
        (
            "train-svm",
            args(&[
                "train-svm",
                "--features",
                "features.bin",
                "--manifest",
                "manifest.jsonl",
                "--c",
                "1",
                "--seed",
                "3",
                "--tolerance",
                "1e-6",
                "--max-epochs",
                "200",
                "--out",
                &o("svm.bin"),
            ]),
        ),
        (
            "train-svr",
            args(&[
                "train-svr",
                "--features",
                "features.bin",
                "--manifest",
                "manifest.jsonl",
                "--c",
                "10",
                "--epsilon",
                "0.5",
                "--seed",
                "3",
                "--tolerance",
                "1e-6",
                "--max-epochs",
                "200",
                "--out",
                &o("svr.bin"),
            ]),
        ),
        (
            "finetune-fresh",
            args(&[
                "finetune",
                "--manifest",
                "manifest.jsonl",
                "--batch",
                "8",
                "--lr",
                "0.003",
                "--iters",
                "25",
                "--seed",
                "7",
                "--out",
                &o("pre.bin"),
                "--history",
                &o("pre.loss"),
            ]),
        ),
        (
            "finetune-base",
            args(&[
                "finetune",
                "--base",
                &o("pre.bin"),
                "--manifest",
                "manifest.jsonl",
                "--batch",
                "8",
                "--lr",
                "0.001",
                "--iters",
                "25",
                "--seed",
                "8",
                "--out",
                &o("ft.bin"),
            ]),
        ),
        (
            "eval-svm",
            args(&[
                "eval",
                "--model",
                &o("svm.bin"),
                "--features",
                "features.bin",
                "--manifest",
                "manifest.jsonl",
            ]),
        ),
        (
            "eval-svr",
            args(&[
                "eval",
                "--model",
                &o("svr.bin"),
                "--features",
                "features.bin",
                "--manifest",
                "manifest.jsonl",
            ]),
        ),
        (
            "eval-net",
            args(&[
                "eval",
                "--model",
                &o("ft.bin"),
                "--manifest",
                "manifest.jsonl",
            ]),
        ),
        (
            "entropy",
            args(&[
                "entropy",
                "--model",
                &o("ft.bin"),
                "--manifest",
                "manifest.jsonl",
                "--layer",
                "fc2",
                "--topn",
                "10",
                "--out",
                &o("entropy.txt"),
            ]),
        ),
        (
            "occlude",
            args(&[
                "occlude",
                "--model",
                &o("ft.bin"),
                "--image",
                "images/s000.pgm",
                "--unit",
                "3",
                "--occ",
                "4",
                "--stride",
                "2",
                "--mean-fill",
                "--patch",
                "8",
                "--out",
                &o("map.txt"),
            ]),
        ),
        (
            "correlate",
            args(&[
                "correlate",
                "--detectors",
                "detectors.txt",
                "--model",
                &o("ft.bin"),
                "--manifest",
                "manifest.jsonl",
                "--units",
                "3",
                "--images",
                "5",
                "--patch",
                "8",
                "--occ",
                "4",
                "--stride",
                "2",
                "--out",
                &o("correlate.txt"),
            ]),
        ),
        (
            "influence",
            args(&[
                "influence",
                "--model",
                &o("ft.bin"),
                "--manifest",
                "manifest.jsonl",
                "--collections",
                "collections.txt",
                "--out",
                &o("influence.txt"),
            ]),
        ),
    ];
    let mut captured = Vec::new();
    for (name, argv) in steps {
        let argv: Vec<&str> = argv.iter().map(String::as_str).collect();
        let r = fx.run_env(&argv, env);
        if !r.status.success() {
            return Err(format!(
                "{name}: {:?} {}",
                r.status.code(),
                String::from_utf8_lossy(&r.stderr)
            ));
        }
        captured.push((name.to_string(), r.stdout));
    }
    Ok(captured)
}

fn args(a: &[&str]) -> Vec<String> {
    a.iter().map(|s| s.to_string()).collect()
}

/// Every file under `dir`, sorted by name.
pub fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}
