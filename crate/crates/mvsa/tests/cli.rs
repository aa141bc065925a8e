use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mvsa::data;
use mvsa::manifest::RunManifest;
use mvsa::report;

fn mvsa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvsa")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY_CONFIG: &str = "\
n_encoder_layers = 1
n_decoder_layers = 1
d_model = 16
d_ff = 32
heads = 2
variant = e
feature_dim = 12
embedding_dim = 16
pool_attn_dim = 8
lr_min = 1e-5
lr_max = 1e-3
cycle_steps = 8
n_cycles = 1
batch_size = 8
crop_frames = 32
log_every = 2
seed = 3
";

fn tiny_data(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    let o = mvsa(&[
        "synth-data",
        "--out",
        p(&data),
        "--speakers",
        "3",
        "--utts",
        "5",
        "--frames",
        "40",
        "--bins",
        "12",
        "--test-per-speaker",
        "2",
        "--trials-per-class",
        "5",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    data
}

#[test]
fn no_arguments_prints_usage_and_exits_1() {
    let o = mvsa(&[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn unknown_flag_is_a_usage_error_naming_the_token() {
    let o = mvsa(&["mask", "--heads", "2", "--steps", "3", "--frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--frobnicate"));
    assert_eq!(mvsa(&["dance"]).status.code(), Some(1));
    assert_eq!(mvsa(&["mask", "--heads", "0", "--steps", "3"]).status.code(), Some(1));
}

#[test]
fn mask_prints_eight_grids_with_a_diagonal_first_head() {
    let o = mvsa(&["mask", "--heads", "8", "--steps", "16"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(text.lines().filter(|l| l.starts_with("head ")).count(), 8);
    for t in 0..16 {
        let want: String = (0..16).map(|u| if u == t { '1' } else { '0' }).collect();
        assert!(text.contains(&format!("mask head=0 t={t} row={want}\n")));
    }
    let grid: Vec<&str> = text.lines().skip(1).take(16).collect();
    assert_eq!(grid[3], ". . . # . . . . . . . . . . . .");
    assert!(text.contains("receptive_field layer=1 min=1 max=129"));
    let o = mvsa(&["mask", "inspect", "--heads", "2", "--steps", "4", "--layer", "3"]);
    assert!(stdout(&o).contains("mask head=1 t=1 row=1110"));
    assert!(stdout(&o).contains("receptive_field layer=3 min=3 max=9"));
}

#[test]
fn param_count_of_the_full_config_is_in_range() {
    let o = mvsa(&["param-count", "--config", p(&configs().join("full.cfg"))]);
    assert!(o.status.success());
    let text = stdout(&o);
    let total: usize = text
        .lines()
        .find_map(|l| l.strip_prefix("total "))
        .unwrap()
        .parse()
        .unwrap();
    assert!((33_000_000..=36_000_000).contains(&total));
    let parts: usize = text
        .lines()
        .filter(|l| !l.starts_with("total"))
        .map(|l| l.rsplit(' ').next().unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(parts, total);
}

#[test]
fn data_and_format_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.cfg");
    assert_eq!(mvsa(&["param-count", "--config", p(&missing)]).status.code(), Some(2));
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "heads = 8\nmystery = 1\n").unwrap();
    let o = mvsa(&["param-count", "--config", p(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("mystery"));
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let o = mvsa(&["eval-id", "--checkpoint", p(&junk), "--data", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergence_exits_3_and_keeps_the_last_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    let cfg = dir.path().join("hot.cfg");
    let text = TINY_CONFIG.replace("lr_max = 1e-3", "lr_max = 1e300").replace("cycle_steps = 8", "cycle_steps = 40")
        + "checkpoint_every = 1\nsteps = 40\n";
    std::fs::write(&cfg, text).unwrap();
    let out = dir.path().join("run");
    let o = mvsa(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("manifest.txt").exists());
    let kept = mvsa::checkpoint::load(&out.join("model.ckpt")).unwrap();
    assert!(kept.store.iter().all(|p| p.value.all_finite()));
    let log = std::fs::read_to_string(out.join("metrics.log")).unwrap();
    assert!(log.lines().all(|l| !l.contains("NaN") && !l.contains("inf")));
}

#[test]
fn full_pipeline_and_manifest_replay() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY_CONFIG).unwrap();
    let run1 = dir.path().join("run1");
    let o = mvsa(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run1), "--seed", "9"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["manifest.txt", "metrics.log", "model.ckpt", "config.cfg"] {
        assert!(run1.join(f).exists(), "{f}");
    }
    let manifest = RunManifest::read(&run1.join("manifest.txt")).unwrap();
    assert_eq!((manifest.seed, manifest.config.seed, manifest.config.steps), (9, 9, 8));
    assert_eq!(manifest.config.model.n_speakers, 3);
    let log = std::fs::read_to_string(run1.join("metrics.log")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(log.starts_with("step=2 lr="));

    // Replaying the manifest reproduces the run bit for bit.
    let run2 = dir.path().join("run2");
    let m = p(&run1.join("manifest.txt")).to_string();
    let o = mvsa(&["train", "--manifest", &m, "--data", p(&data), "--out", p(&run2)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["metrics.log", "model.ckpt", "manifest.txt", "config.cfg"] {
        assert_eq!(std::fs::read(run1.join(f)).unwrap(), std::fs::read(run2.join(f)).unwrap(), "{f}");
    }

    // A changed corpus no longer matches the manifest.
    let trials = std::fs::read_to_string(data.join("trials")).unwrap();
    std::fs::write(data.join("speakers"), "spk0000\nspk0001\nspk9999\n").unwrap();
    let o = mvsa(&["train", "--manifest", &m, "--data", p(&data), "--out", p(&dir.path().join("run3"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("fingerprint"));
    std::fs::write(data.join("speakers"), "spk0000\nspk0001\nspk0002\n").unwrap();

    let ckpt = p(&run1.join("model.ckpt")).to_string();
    let o = mvsa(&["eval-id", "--checkpoint", &ckpt, "--data", p(&data)]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("utterances=6"));

    let scores = dir.path().join("scores.txt");
    let o = mvsa(&[
        "eval-ver",
        "--checkpoint",
        &ckpt,
        "--trials",
        p(&data.join("trials")),
        "--features",
        p(&data),
        "--scores",
        p(&scores),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("eer="));
    let score_text = std::fs::read_to_string(&scores).unwrap();
    assert_eq!(score_text.lines().count(), trials.lines().count());
    let parsed = data::parse_scores(&score_text, &scores).unwrap();
    assert_eq!(data::format_scores(&parsed), score_text);

    let emb = dir.path().join("emb.tsv");
    let o = mvsa(&["extract", "--variant", "e", "--checkpoint", &ckpt, "--features", p(&data), "--out", p(&emb)]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(&emb).unwrap();
    let embs = data::parse_embeddings(&text, &emb).unwrap();
    assert_eq!(embs.len(), 15);
    assert!(embs.iter().all(|e| e.vector.len() == 16));
    assert_eq!(data::format_embeddings(&embs), text);
    let o = mvsa(&["extract", "--variant", "a", "--checkpoint", &ckpt, "--features", p(&data), "--out", p(&emb)]);
    assert_eq!(o.status.code(), Some(2));

    let svg = dir.path().join("plot.svg");
    let o = mvsa(&["report", "--metrics-log", p(&run1.join("metrics.log")), "--out", p(&svg)]);
    assert!(o.status.success());
    assert_eq!(std::fs::read_to_string(&svg).unwrap().matches("<polyline").count(), 3);
}

#[test]
fn file_formats_round_trip_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = tiny_data(dir.path());
    let d = data::DataDir::load(&data_dir).unwrap();
    let copy = dir.path().join("copy");
    let trials = data::read_trials(&data_dir.join("trials")).unwrap();
    data::DataDir::write(&copy, &d.train, &d.test, &d.speakers, Some(&trials)).unwrap();
    for f in ["train.feats", "test.feats", "utt2spk", "speakers", "trials"] {
        assert_eq!(std::fs::read(data_dir.join(f)).unwrap(), std::fs::read(copy.join(f)).unwrap(), "{f}");
    }
    assert_eq!(data::load_feature_dir(&copy).unwrap().len(), 15);

    let cfg_text = std::fs::read_to_string(configs().join("toy.cfg")).unwrap();
    let cfg = mvsa::config::parse_train_config(&cfg_text).unwrap();
    let written = mvsa::config::write_train_config(&cfg);
    let again = mvsa::config::write_train_config(&mvsa::config::parse_train_config(&written).unwrap());
    assert_eq!(written, again);

    let log = dir.path().join("metrics.log");
    std::fs::write(&log, "step=10 lr=0.001 loss=2.5 acc=12.5\nstep=20 lr=0.0005 loss=1.25 acc=50.0\n").unwrap();
    let recs = report::read_metrics(&log).unwrap();
    assert_eq!(report::format_metrics(&recs), std::fs::read_to_string(&log).unwrap());
}

#[test]
fn featurize_reads_speaker_directories_of_wavs() {
    let dir = tempfile::tempdir().unwrap();
    let wavs = dir.path().join("wav");
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: 16_000,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    for (s, hz) in [("alice", 300.0), ("bob", 2000.0)] {
        std::fs::create_dir_all(wavs.join(s)).unwrap();
        for u in 0..3 {
            let mut w = hound::WavWriter::create(wavs.join(s).join(format!("u{u}.wav")), spec).unwrap();
            for i in 0..8000 {
                let x = 0.3 * (2.0 * std::f64::consts::PI * hz * i as f64 / 16_000.0 + u as f64).sin();
                w.write_sample((x * 32767.0) as i16).unwrap();
            }
            w.finalize().unwrap();
        }
    }
    let out = dir.path().join("feats");
    let o = mvsa(&[
        "featurize",
        "--wav",
        p(&wavs),
        "--out",
        p(&out),
        "--test-per-speaker",
        "2",
        "--trials-per-class",
        "1",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let d = data::DataDir::load(&out).unwrap();
    assert_eq!(d.speakers, ["alice", "bob"]);
    assert_eq!((d.train.len(), d.test.len()), (2, 4));
    let f = &d.train[0];
    assert_eq!((f.utterance_id.as_str(), f.speaker_id.as_str()), ("alice-u0", "alice"));
    assert_eq!((f.n_frames(), f.n_bins()), ((8000 - 1024) / 256 + 1, 80));
    // Whole-utterance CMVN: every bin has (near) zero mean.
    for j in 0..80 {
        let mean: f64 = (0..f.n_frames()).map(|t| f.frames.at(&[t, j])).sum::<f64>() / f.n_frames() as f64;
        assert!(mean.abs() < 1e-4, "bin {j}: {mean}");
    }
    assert_eq!(data::read_trials(&out.join("trials")).unwrap().trials.len(), 2);
}
