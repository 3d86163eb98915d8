use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vocalid_cli::run_args;
use vocalid_core::audio::{read_wav, write_wav_16bit, AudioClip, LoadOptions};
use vocalid_core::embed::EmbeddingFile;
use vocalid_core::metrics::{EmbeddingRow, EmbeddingTable};
use vocalid_core::pairs::{DatasetManifest, ManifestEntry, Split};

const SR: u32 = 44_100;

fn run(args: &[&str]) -> i32 {
    let mut full = vec!["vocalid"];
    full.extend_from_slice(args);
    full.push("-q");
    run_args(full)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: [&str; 6] = [
    "--set",
    "channels=8,8,8,8",
    "--set",
    "projection_dim=16",
    "--set",
    "val_trials=200",
];

fn tiny_corpus(dir: &Path, singers: usize, clips: usize, seconds: f64) {
    let code = run(&[
        "synth",
        "--out",
        s(dir),
        "--seed",
        "3",
        "--singers",
        &singers.to_string(),
        "--clips-per-singer",
        &clips.to_string(),
        "--seconds",
        &seconds.to_string(),
    ]);
    assert_eq!(code, 0);
}

#[test]
fn synth_is_deterministic_and_singer_disjoint() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    tiny_corpus(&a, 10, 2, 0.5);
    tiny_corpus(&b, 10, 2, 0.5);
    let m = DatasetManifest::load(&a.join("manifest.jsonl")).unwrap();
    assert_eq!(m.entries.len(), 20);
    for e in &m.entries {
        assert_eq!(fs::read(a.join(&e.path)).unwrap(), fs::read(b.join(&e.path)).unwrap());
        let clip = read_wav(&a.join(&e.path), LoadOptions::default()).unwrap();
        assert_eq!((clip.sample_rate_hz(), clip.len()), (SR, 22_050));
    }
    assert_eq!(
        fs::read(a.join("manifest.jsonl")).unwrap(),
        fs::read(b.join("manifest.jsonl")).unwrap()
    );
    let mut split_of = std::collections::HashMap::new();
    for e in &m.entries {
        let prev = split_of.insert(e.singer_id.clone().unwrap(), e.split);
        assert!(prev.is_none() || prev == Some(e.split), "singer crosses splits");
    }
    for sp in [Split::Train, Split::Val, Split::Test] {
        assert!(split_of.values().any(|&v| v == sp));
    }
    assert!(a.join("run_config.json").exists());
}

/// Band log-energies of a few Hann-windowed frames, by direct DFT evaluation
/// at frequencies spread inside log-spaced bands, averaged over frames.
fn envelope(x: &[f32]) -> Vec<f64> {
    let win = 2048;
    let bands = 30;
    let per_band = 6;
    let edges: Vec<f64> = (0..=bands).map(|b| 150.0 * (8000.0f64 / 150.0).powf(b as f64 / bands as f64)).collect();
    let frames: Vec<usize> = (0..8).map(|f| f * (x.len() - win) / 7).collect();
    let mut env = vec![0.0; bands];
    for &start in &frames {
        let frame: Vec<f64> = (0..win)
            .map(|n| f64::from(x[start + n]) * (0.5 - 0.5 * (2.0 * PI * n as f64 / win as f64).cos()))
            .collect();
        for b in 0..bands {
            let mut p = 0.0;
            for k in 0..per_band {
                let f = edges[b] + (edges[b + 1] - edges[b]) * (k as f64 + 0.5) / per_band as f64;
                let w = 2.0 * PI * f / f64::from(SR);
                let (mut re, mut im) = (0.0, 0.0);
                for (n, v) in frame.iter().enumerate() {
                    re += v * (w * n as f64).cos();
                    im -= v * (w * n as f64).sin();
                }
                p += re * re + im * im;
            }
            env[b] += (p + 1e-9).ln() / frames.len() as f64;
        }
    }
    env
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn same_singer_envelopes_correlate_more() {
    let tmp = tempfile::tempdir().unwrap();
    tiny_corpus(tmp.path(), 8, 4, 1.0);
    let m = DatasetManifest::load(&tmp.path().join("manifest.jsonl")).unwrap();
    let envs: Vec<(String, Vec<f64>)> = m
        .entries
        .iter()
        .map(|e| {
            let c = read_wav(&m.resolve(e), LoadOptions::default()).unwrap();
            (e.singer_id.clone().unwrap(), envelope(c.samples()))
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut same, mut diff) = (Vec::new(), Vec::new());
    while same.len() < 100 || diff.len() < 100 {
        let i = rng.gen_range(0..envs.len());
        let j = rng.gen_range(0..envs.len());
        if i == j {
            continue;
        }
        let r = pearson(&envs[i].1, &envs[j].1);
        if envs[i].0 == envs[j].0 {
            if same.len() < 100 {
                same.push(r);
            }
        } else if diff.len() < 100 {
            diff.push(r);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&same) > mean(&diff), "same {} vs different {}", mean(&same), mean(&diff));
}

fn tone(seconds: f64, amp: f32) -> Vec<f32> {
    let n = (seconds * f64::from(SR)).round() as usize;
    (0..n)
        .map(|i| amp * (2.0 * PI * 220.0 * i as f64 / f64::from(SR)).sin() as f32)
        .collect()
}

fn write_manifest(dir: &Path, clips: &[(&str, Vec<f32>)]) -> std::path::PathBuf {
    let mut entries = Vec::new();
    for (name, x) in clips {
        write_wav_16bit(&dir.join(name), &AudioClip::new(x.clone(), SR).unwrap()).unwrap();
        entries.push(ManifestEntry {
            path: name.to_string(),
            singer_id: Some("s0".into()),
            split: Split::Train,
        });
    }
    let m = DatasetManifest::new(entries, dir).unwrap();
    let p = dir.join("manifest.jsonl");
    m.save(&p).unwrap();
    p
}

#[test]
fn prepare_trims_long_silence_and_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("src");
    fs::create_dir_all(&src).unwrap();
    let mut x = tone(0.5, 0.5);
    x.extend(vec![0.0; 2 * SR as usize]);
    x.extend(tone(0.5, 0.5));
    let manifest = write_manifest(&src, &[("gap.wav", x)]);

    let once = tmp.path().join("once");
    assert_eq!(run(&["prepare", "--manifest", s(&manifest), "--out", s(&once)]), 0);
    let out = read_wav(&once.join("gap.wav"), LoadOptions::default()).unwrap();
    let silent = out.samples().iter().filter(|v| v.abs() < 0.005).count();
    // the tone's own near-zero crossings are counted too; they are a few per period
    let expected = (1.3 * f64::from(SR)).round() as usize;
    assert!(silent >= expected && silent < expected + 2000, "{silent}");
    assert!((out.len() as i64 - (2.3 * f64::from(SR)) as i64).abs() <= 1);

    let twice = tmp.path().join("twice");
    assert_eq!(
        run(&["prepare", "--manifest", s(&once.join("manifest.jsonl")), "--out", s(&twice)]),
        0
    );
    assert_eq!(fs::read(once.join("gap.wav")).unwrap(), fs::read(twice.join("gap.wav")).unwrap());
}

#[test]
fn prepare_reports_missing_files_and_rejects_empty_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("src");
    fs::create_dir_all(&src).unwrap();
    let manifest = write_manifest(&src, &[("ok.wav", tone(1.0, 0.5)), ("gone.wav", tone(1.0, 0.5))]);
    fs::remove_file(src.join("gone.wav")).unwrap();
    let out = tmp.path().join("out");
    assert_eq!(run(&["prepare", "--manifest", s(&manifest), "--out", s(&out)]), 5);
    let report = fs::read_to_string(out.join("prepare_errors.jsonl")).unwrap();
    assert_eq!(report.lines().count(), 1);
    assert!(report.contains("gone.wav"));
    let kept = DatasetManifest::load(&out.join("manifest.jsonl")).unwrap();
    assert_eq!(kept.entries.len(), 1);

    let empty = tmp.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    assert_eq!(run(&["prepare", "--manifest", s(&empty), "--out", s(&out)]), 3);
}

#[test]
fn configuration_errors_exit_with_their_own_code() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    let m = s(&out);
    assert_eq!(run(&["train", "--manifest", m, "--out", m, "--loss", "SimCLR"]), 2);
    assert_eq!(run(&["train", "--manifest", m, "--out", m, "--set", "no_such_key=1"]), 2);
    assert_eq!(run(&["train", "--manifest", m, "--out", m, "--tau", "0"]), 2);
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "loss = CONT\nthis line has no equals sign\n").unwrap();
    assert_eq!(run(&["synth", "--out", m, "--config", s(&cfg)]), 2);
    assert_eq!(run(&["train", "--manifest", m, "--out", m, "--bogus-flag"]), 2);
    // data problems are distinct from configuration problems
    assert_eq!(run(&["train", "--manifest", m, "--out", m]), 3);
}

#[test]
fn config_file_values_are_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("c");
    tiny_corpus(&corpus, 3, 2, 1.2);
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "loss = VICReg\ntau = 0.7\nmax_epochs = 3\nsegment_seconds = 1\n").unwrap();
    let out = tmp.path().join("t");
    let code = run(&[
        "train",
        "--manifest",
        s(&corpus.join("manifest.jsonl")),
        "--out",
        s(&out),
        "--config",
        s(&cfg),
        "--max-epochs",
        "0",
    ]);
    assert_eq!(code, 0);
    let snap: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("run_config.json")).unwrap()).unwrap();
    assert_eq!(snap["train"]["max_epochs"], 0);
    assert_eq!(snap["train"]["loss"]["temperature"], 0.7);
    assert_eq!(snap["train"]["loss"]["variance_weight"], 25.0);
    assert_eq!(snap["train"]["loss"]["covariance_weight"], 100.0);
}

fn train_tiny(corpus: &Path, out: &Path, extra: &[&str]) -> i32 {
    let manifest = corpus.join("manifest.jsonl");
    let mut args = vec![
        "train",
        "--manifest",
        s(&manifest),
        "--out",
        s(out),
        "--seed",
        "5",
        "--batch-size",
        "4",
        "--segment-seconds",
        "1",
    ];
    args.extend_from_slice(&TINY);
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn zero_epochs_writes_the_initial_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("c");
    tiny_corpus(&corpus, 10, 2, 1.2);
    let out = tmp.path().join("t");
    assert_eq!(train_tiny(&corpus, &out, &["--max-epochs", "0"]), 0);
    let ck = vocalid_core::checkpoint::load(&out.join("checkpoint.bin")).unwrap();
    assert_eq!((ck.epoch, ck.step), (0, 0));
    let init = vocalid_core::model::Model::<f32>::new(&ck.config.model, 5).unwrap();
    assert_eq!(ck.online, init);
    let prov: serde_json::Value = serde_json::from_str(&ck.provenance).unwrap();
    assert_eq!(prov["seed"], 5);
    assert_eq!(fs::read_to_string(out.join("metrics.jsonl")).unwrap(), "");
}

#[test]
fn training_lowers_the_loss_and_embeddings_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("c");
    tiny_corpus(&corpus, 20, 2, 1.5);
    let out = tmp.path().join("t");
    let code = train_tiny(&corpus, &out, &["--max-epochs", "12", "--patience", "100", "--lr", "1e-3"]);
    assert_eq!(code, 0);
    let log: Vec<serde_json::Value> = fs::read_to_string(out.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(log.len(), 12);
    // train losses at batch 4 are dominated by augmentation noise; the
    // validation batches are fixed
    let val = |r: &serde_json::Value| r["val"]["loss"].as_f64().unwrap();
    let last3: f64 = log[9..].iter().map(val).sum::<f64>() / 3.0;
    assert!(last3 < 0.9 * val(&log[0]), "val loss {} -> {last3}", val(&log[0]));

    let ck = out.join("checkpoint.bin");
    let manifest = corpus.join("manifest.jsonl");
    let emb = |name: &str| {
        let p = tmp.path().join(name);
        let code = run(&[
            "embed",
            "--checkpoint",
            s(&ck),
            "--manifest",
            s(&manifest),
            "--out",
            s(&p),
            "--segment-seconds",
            "0.7",
            "--csv",
            s(&p.with_extension("csv")),
        ]);
        assert_eq!(code, 0);
        p
    };
    let (a, b) = (emb("a.emb"), emb("b.emb"));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let file = EmbeddingFile::load(&a).unwrap();
    // 1.5 s clips hold two 0.7 s segments
    assert_eq!(file.table.len(), 80);
    assert_eq!(file.table.dim, 8);
    assert!(file.splits.iter().all(Option::is_some));
    let csv = fs::read_to_string(a.with_extension("csv")).unwrap();
    assert_eq!(csv.lines().count(), 81);
    let prov: serde_json::Value = serde_json::from_str(&file.config_json).unwrap();
    assert_eq!(prov["run"]["embed_segment_seconds"], 0.7);
    assert_eq!(prov["checkpoint"]["training_run"]["train"]["max_epochs"], 12);
}

#[test]
fn nine_second_clip_gives_two_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("c");
    tiny_corpus(&corpus, 10, 1, 1.2);
    let ck_dir = tmp.path().join("t");
    assert_eq!(train_tiny(&corpus, &ck_dir, &["--max-epochs", "0"]), 0);
    let src = tmp.path().join("long");
    fs::create_dir_all(&src).unwrap();
    let manifest = write_manifest(&src, &[("nine.wav", tone(9.0, 0.5))]);
    let out = tmp.path().join("n.emb");
    let code = run(&[
        "embed",
        "--checkpoint",
        s(&ck_dir.join("checkpoint.bin")),
        "--manifest",
        s(&manifest),
        "--out",
        s(&out),
    ]);
    assert_eq!(code, 0);
    let f = EmbeddingFile::load(&out).unwrap();
    assert_eq!(f.table.len(), 2);
    assert_eq!((f.table.rows[0].segment, f.table.rows[1].segment), (0, 1));
}

#[test]
fn non_finite_training_aborts_with_a_diagnostic() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("c");
    tiny_corpus(&corpus, 10, 2, 1.2);
    let out = tmp.path().join("t");
    let code = train_tiny(&corpus, &out, &["--max-epochs", "5", "--lr", "1e30"]);
    assert_eq!(code, 4);
    let diag: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("diagnostic.json")).unwrap()).unwrap();
    assert!(diag["diagnostic"]["step"].as_u64().is_some());
    assert_eq!(diag["config"]["train"]["optimizer"]["learning_rate"], 1e30);
}

/// Embedding file with `singers` classes of `per` rows spread over six
/// recordings each: class center scaled by `scale` plus uniform noise.
fn synthetic_embeddings(path: &Path, singers: usize, per: usize, dim: usize, scale: f64, noise: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for sgr in 0..singers {
        let center: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for r in 0..per {
            let vector = center
                .iter()
                .map(|c| (scale * c + noise * rng.gen_range(-1.0..1.0)) as f32)
                .collect();
            rows.push(EmbeddingRow {
                clip_id: format!("s{sgr}/clip{}", r % 6),
                segment: r / 6,
                singer_id: Some(format!("s{sgr}")),
                vector,
            });
        }
    }
    let table = EmbeddingTable::new(dim, rows);
    EmbeddingFile::new(table, "{}".into()).save(path).unwrap();
}

fn eval_report(emb: &Path, out: &Path, seed: &str) -> serde_json::Value {
    let code = run(&[
        "eval",
        "--embeddings",
        s(emb),
        "--out",
        s(out),
        "--seed",
        seed,
        "--pairs",
        "4000",
        "--mnr-k",
        "400",
        "--mnr-n",
        "64",
        "--set",
        "probe_epochs=60",
    ]);
    assert_eq!(code, 0);
    serde_json::from_str(&fs::read_to_string(out).unwrap()).unwrap()
}

#[test]
fn eval_on_separable_and_random_embeddings() {
    let tmp = tempfile::tempdir().unwrap();
    let sep = tmp.path().join("sep.emb");
    synthetic_embeddings(&sep, 8, 12, 16, 1.0, 0.01, 1);
    let r = eval_report(&sep, &tmp.path().join("sep.json"), "1");
    assert!(r["similarity"]["eer"].as_f64().unwrap() < 0.01);
    // other recordings of the query's singer are legitimate near ties: about
    // 10 of the 95 rows, so roughly 3.3 of 63 distractors, half ranked above
    assert!(r["similarity"]["mnr"].as_f64().unwrap() < 0.1);
    assert!(r["probe"]["mean_accuracy"].as_f64().unwrap() > 0.99);

    let rnd = tmp.path().join("rnd.emb");
    synthetic_embeddings(&rnd, 8, 12, 16, 0.0, 1.0, 2);
    let r = eval_report(&rnd, &tmp.path().join("rnd.json"), "1");
    assert!((r["similarity"]["eer"].as_f64().unwrap() - 0.5).abs() < 0.05);
    assert!((r["similarity"]["mnr"].as_f64().unwrap() - 0.5).abs() < 0.05);
    assert!(r["probe"]["mean_accuracy"].as_f64().unwrap() < 0.35);
    assert_eq!(r["config"]["eval"]["pairs"], 4000);
}

#[test]
fn eval_is_deterministic_given_the_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let emb = tmp.path().join("e.emb");
    synthetic_embeddings(&emb, 6, 12, 8, 1.0, 0.8, 3);
    let a = tmp.path().join("a.json");
    let b = tmp.path().join("b.json");
    eval_report(&emb, &a, "4");
    eval_report(&emb, &b, "4");
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let c = eval_report(&emb, &tmp.path().join("c.json"), "5");
    let a: serde_json::Value = serde_json::from_str(&fs::read_to_string(&a).unwrap()).unwrap();
    assert_ne!(a["similarity"]["eer"], c["similarity"]["eer"]);
}

#[test]
fn eval_requires_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let rows = (0..10)
        .map(|i| EmbeddingRow {
            clip_id: format!("c{i}"),
            segment: 0,
            singer_id: None,
            vector: vec![i as f32, 1.0],
        })
        .collect();
    let p = tmp.path().join("u.emb");
    EmbeddingFile::new(EmbeddingTable::new(2, rows), "{}".into()).save(&p).unwrap();
    assert_eq!(run(&["eval", "--embeddings", s(&p)]), 3);
}
