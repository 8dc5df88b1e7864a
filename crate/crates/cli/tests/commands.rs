use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use consep::datagen::{
    Dataset, Manifest, MixtureRecipe, MixtureSource, NoiseColor, NoiseSpec, SourceSpec, Split,
};
use consep::dsp::{wav_read, wav_write, Waveform};
use consep::objectives::{epsilon_cap, si_sdr};
use consep::training::{load_checkpoint, EvaluationReport};
use consep_cli::{config_hash, EXIT_DATA, EXIT_USAGE};

fn consep(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_consep"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn recipe(i: u64, split: Split) -> MixtureRecipe {
    let voice = |f0: f64, seed: u64| MixtureSource {
        source: SourceSpec {
            f0_start: f0,
            f0_end: f0 * 1.1,
            harmonics: 4,
            am_rate: 2.0,
            am_depth: 0.5,
            duration: 0.1,
            seed,
        },
        gain_db: 0.0,
        rir: None,
    };
    MixtureRecipe {
        path: format!("{}/{i}", split.as_str()),
        split,
        seed: i,
        sample_rate: 8000,
        sources: vec![voice(120.0 + i as f64, 2 * i), voice(300.0, 2 * i + 1)],
        noise: (i % 2 == 0).then_some(NoiseSpec {
            color: NoiseColor::White,
            snr_db: 10.0,
        }),
    }
}

fn write_manifest(dir: &Path, splits: &[Split]) -> PathBuf {
    let m = Manifest {
        recipes: splits
            .iter()
            .enumerate()
            .map(|(i, &sp)| recipe(i as u64, sp))
            .collect(),
    };
    let path = dir.join("manifest.toml");
    std::fs::write(&path, m.to_toml()).unwrap();
    path
}

const TINY: &str = "n_basis = 8\nheads = 2\nd_ff = 16\nchunk = 4\nrepeats = 1\nlayers = 1\nstft_win = 32\nstft_pad = 8\n";

/// Corpus with 2 train, 1 valid and 1 test item plus a one-epoch checkpoint.
fn trained(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("data");
    let manifest = write_manifest(
        dir,
        &[Split::Train, Split::Train, Split::Valid, Split::Test],
    );
    assert!(
        consep(&["generate", "--manifest", s(&manifest), "--out", s(&data)])
            .status
            .success()
    );
    let config = dir.join("tiny.toml");
    std::fs::write(&config, TINY).unwrap();
    let out = dir.join("run");
    let o = consep(&[
        "train",
        "--config",
        s(&config),
        "--data",
        s(&data),
        "--out",
        s(&out),
        "--epochs",
        "1",
        "--seed",
        "3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    (data, out)
}

#[test]
fn generate_counts_and_guards() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_manifest(
        dir.path(),
        &[Split::Train, Split::Train, Split::Valid, Split::Test],
    );
    let out = dir.path().join("corpus");
    let o = consep(&[
        "generate",
        "--manifest",
        s(&manifest),
        "--out",
        s(&out),
        "--threads",
        "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("4 mixtures"));
    let index = std::fs::read_to_string(out.join("index.jsonl")).unwrap();
    assert_eq!(index.lines().count(), 4);

    let again = consep(&["generate", "--manifest", s(&manifest), "--out", s(&out)]);
    assert_eq!(again.status.code(), Some(EXIT_DATA));
    assert!(stderr(&again).contains("--force"));
    let forced = consep(&[
        "generate",
        "--manifest",
        s(&manifest),
        "--out",
        s(&out),
        "--force",
    ]);
    assert!(forced.status.success());
    assert_eq!(
        std::fs::read_to_string(out.join("index.jsonl")).unwrap(),
        index
    );

    let mut m = Manifest::load(&manifest).unwrap();
    m.recipes[1].path = m.recipes[0].path.clone();
    std::fs::write(&manifest, m.to_toml()).unwrap();
    let dup = consep(&[
        "generate",
        "--manifest",
        s(&manifest),
        "--out",
        s(&dir.path().join("x")),
    ]);
    assert_eq!(dup.status.code(), Some(EXIT_DATA));
    assert!(stderr(&dup).contains("train/0"), "{}", stderr(&dup));

    std::fs::write(&manifest, "[[recipe]]\npath = 1\n").unwrap();
    let bad = consep(&[
        "generate",
        "--manifest",
        s(&manifest),
        "--out",
        s(&dir.path().join("y")),
    ]);
    assert_eq!(bad.status.code(), Some(EXIT_DATA));
}

#[test]
fn shipped_examples_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let m = Manifest::load(root.join("demo_manifest.toml")).unwrap();
    m.validate().unwrap();
    for name in ["consep.toml", "small.toml"] {
        consep::model::ConSepConfig::load(root.join(name)).unwrap();
    }
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(consep(&[]).status.code(), Some(EXIT_USAGE));
    assert_eq!(consep(&["frobnicate"]).status.code(), Some(EXIT_USAGE));
    assert_eq!(
        consep(&["train", "--config", "x"]).status.code(),
        Some(EXIT_USAGE)
    );
    assert_eq!(consep(&["--help"]).status.code(), Some(0));
}

#[test]
fn train_separate_evaluate_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let (data, out) = trained(dir.path());
    let metrics = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 1);

    // separate: two outputs of the framing-trimmed length.
    let mix = data.join("test/3/mix.wav");
    let sep = dir.path().join("sep");
    let o = consep(&[
        "separate",
        "--ckpt",
        s(&out),
        "--in",
        s(&mix),
        "--out",
        s(&sep),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut files: Vec<_> = std::fs::read_dir(&sep)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    files.sort();
    assert_eq!(files, ["s1.wav", "s2.wav"]);
    let len = wav_read(&mix).unwrap().len();
    let trimmed = (len - 16) / 8 * 8 + 16;
    assert_eq!(wav_read(sep.join("s1.wav")).unwrap().len(), trimmed);

    let short = dir.path().join("short.wav");
    wav_write(&short, &Waveform::new(vec![0.1; 10], 8000).unwrap()).unwrap();
    let o = consep(&[
        "separate",
        "--ckpt",
        s(&out),
        "--in",
        s(&short),
        "--out",
        s(&sep),
    ]);
    assert_eq!(o.status.code(), Some(EXIT_DATA));

    // evaluate: report means recompute from items; reruns are identical.
    let report = dir.path().join("report.json");
    let o = consep(&[
        "evaluate",
        "--ckpt",
        s(&out),
        "--data",
        s(&data),
        "--report",
        s(&report),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&report).unwrap();
    let r: EvaluationReport = serde_json::from_str(&text).unwrap();
    assert_eq!(r.num_items, 1);
    let mean = r.items.iter().map(|i| i.si_sdri).sum::<f64>() / r.items.len() as f64;
    assert!((mean - r.mean_si_sdri).abs() < 1e-9);
    let ckpt = load_checkpoint::<f32>(&out.join("best")).unwrap();
    assert_eq!(r.config_hash, config_hash(&ckpt.config));
    assert!(consep(&[
        "evaluate",
        "--ckpt",
        s(&out),
        "--data",
        s(&data),
        "--report",
        s(&report)
    ])
    .status
    .success());
    assert_eq!(std::fs::read_to_string(&report).unwrap(), text);

    // oracle mode: improvement equals the cap minus the mixture score.
    let o = consep(&[
        "evaluate",
        "--ckpt",
        s(&out),
        "--data",
        s(&data),
        "--report",
        s(&report),
        "--oracle",
    ]);
    assert!(o.status.success());
    let r: EvaluationReport =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let test = Dataset::load(&data, Split::Test).unwrap();
    for (score, item) in r.items.iter().zip(test.items()) {
        let expected = item
            .references
            .iter()
            .map(|rf| {
                let e: f64 = rf.samples().iter().map(|v| v * v).sum();
                epsilon_cap(e) - si_sdr(item.mixture.samples(), rf.samples()).unwrap()
            })
            .sum::<f64>()
            / 2.0;
        assert!(
            (score.si_sdri - expected).abs() < 1e-6,
            "{} vs {expected}",
            score.si_sdri
        );
    }

    // inspect-bases: permutation plus N x 257 responses.
    let bases = dir.path().join("bases");
    let o = consep(&["inspect-bases", "--ckpt", s(&out), "--out", s(&bases)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut order: Vec<usize> = std::fs::read_to_string(bases.join("order.csv"))
        .unwrap()
        .lines()
        .map(|l| l.parse().unwrap())
        .collect();
    order.sort_unstable();
    assert_eq!(order, (0..8).collect::<Vec<_>>());
    let response = std::fs::read_to_string(bases.join("response.csv")).unwrap();
    assert_eq!(response.lines().count(), 8);
    assert!(response.lines().all(|l| l.split(',').count() == 257));
    assert!(std::fs::read(bases.join("response.pgm"))
        .unwrap()
        .starts_with(b"P5"));
    let missing = consep(&[
        "inspect-bases",
        "--ckpt",
        s(&dir.path().join("nope")),
        "--out",
        s(&bases),
    ]);
    assert_eq!(missing.status.code(), Some(EXIT_DATA));
}

#[test]
fn train_edge_cases() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let manifest = write_manifest(dir.path(), &[Split::Train, Split::Valid]);
    assert!(
        consep(&["generate", "--manifest", s(&manifest), "--out", s(&data)])
            .status
            .success()
    );
    let config = dir.path().join("tiny.toml");
    std::fs::write(&config, TINY).unwrap();

    let out = dir.path().join("zero");
    let o = consep(&[
        "train",
        "--config",
        s(&config),
        "--data",
        s(&data),
        "--out",
        s(&out),
        "--epochs",
        "0",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("last/header.json").is_file());
    assert!(std::fs::read_to_string(out.join("metrics.jsonl"))
        .unwrap()
        .is_empty());

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, format!("{TINY}dropout = 0.1\n")).unwrap();
    let o = consep(&[
        "train",
        "--config",
        s(&bad),
        "--data",
        s(&data),
        "--out",
        s(&dir.path().join("b")),
        "--epochs",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(EXIT_DATA));
    assert!(stderr(&o).contains("dropout"), "{}", stderr(&o));

    // Resumed training reproduces the uninterrupted metric log.
    let run = |out: &Path, epochs: &str| {
        let o = consep(&[
            "train",
            "--config",
            s(&config),
            "--data",
            s(&data),
            "--out",
            s(out),
            "--epochs",
            epochs,
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    };
    let (full, parts) = (dir.path().join("full"), dir.path().join("parts"));
    run(&full, "3");
    run(&parts, "1");
    run(&parts, "3");
    assert_eq!(
        std::fs::read_to_string(full.join("metrics.jsonl")).unwrap(),
        std::fs::read_to_string(parts.join("metrics.jsonl")).unwrap()
    );

    // No test split: evaluation refuses.
    let o = consep(&[
        "evaluate",
        "--ckpt",
        s(&full),
        "--data",
        s(&data),
        "--report",
        s(&dir.path().join("r.json")),
    ]);
    assert_eq!(o.status.code(), Some(EXIT_DATA));
}

#[test]
fn spectrogram_export() {
    let dir = tempfile::tempdir().unwrap();
    let tone = dir.path().join("tone.wav");
    let x: Vec<f64> = (0..4000)
        .map(|n| 0.5 * (2.0 * std::f64::consts::PI * 1000.0 * n as f64 / 8000.0).sin())
        .collect();
    wav_write(&tone, &Waveform::new(x, 8000).unwrap()).unwrap();
    let csv = dir.path().join("spec.csv");
    let o = consep(&["inspect-spectrogram", "--in", s(&tone), "--out", s(&csv)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows: Vec<Vec<f64>> = std::fs::read_to_string(&csv)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 129);
    assert_eq!(rows[0].len(), (4000 - 256) / 8 + 1);
    let col = rows[0].len() / 2;
    let peak = (0..129)
        .max_by(|&a, &b| rows[a][col].total_cmp(&rows[b][col]))
        .unwrap();
    assert_eq!(peak, 32);
    let pgm = std::fs::read(dir.path().join("spec.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5"));

    let silence = dir.path().join("silence.wav");
    wav_write(&silence, &Waveform::new(vec![0.0; 1000], 8000).unwrap()).unwrap();
    let o = consep(&[
        "inspect-spectrogram",
        "--in",
        s(&silence),
        "--out",
        s(&csv),
        "--win",
        "64",
        "--hop",
        "32",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 33);
    assert!(text.lines().flat_map(|l| l.split(',')).all(|v| v == "-80"));
}
