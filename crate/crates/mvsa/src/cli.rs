//! The `mvsa` command line.

use std::ffi::OsString;
use std::fs::File;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use mvsa_core::evaluation::{evaluate_identification, evaluate_verification};
use mvsa_core::features::{balanced_trials, synth_corpus, MelFilterbank, SynthConfig};
use mvsa_core::masks::{receptive_field_bounds, ClsPolicy, MaskSet, WindowSchedule};
use mvsa_core::numerics::Rng;
use mvsa_core::training::{train, MetricRecord, TrainConfig, TrainObserver};
use mvsa_core::transformer::{count_parameters, Variant};
use mvsa_core::variants::{SpeakerEmbedding, SpeakerModel};

use crate::config::{parse_train_config, write_train_config};
use crate::data::{self, DataDir};
use crate::error::{read_text, write_atomic, Error, Result};
use crate::manifest::{fingerprint, RunManifest, TOOL_VERSION};
use crate::{checkpoint, frontend, report};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const METRICS_FILE: &str = "metrics.log";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const CONFIG_FILE: &str = "config.cfg";

#[derive(Debug, Parser)]
#[command(name = "mvsa", version, about = "Multi-view self-attention speaker Transformer")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic speaker corpus as a data directory.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        speakers: usize,
        #[arg(long, default_value_t = 50)]
        utts: usize,
        #[arg(long, default_value_t = 200)]
        frames: usize,
        #[arg(long, default_value_t = 80)]
        bins: usize,
        #[arg(long, default_value_t = 10)]
        test_per_speaker: usize,
        #[arg(long, default_value_t = 200)]
        trials_per_class: usize,
        #[arg(long, default_value_t = 1.0)]
        jitter: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Log-mel + CMVN features from `<speaker>/<utterance>.wav` files.
    Featurize {
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Trailing utterances of each speaker held out as the test split.
        #[arg(long, default_value_t = 1)]
        test_per_speaker: usize,
        /// Balanced trials drawn from the test split; 0 writes none.
        #[arg(long, default_value_t = 0)]
        trials_per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a speaker classifier; writes a manifest, metrics log, config
    /// and checkpoint into the output directory.
    Train {
        #[arg(long, required_unless_present = "manifest")]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Repeat the run a manifest describes.
        #[arg(long, conflicts_with_all = ["config", "seed"])]
        manifest: Option<PathBuf>,
    },
    /// Write one embedding per utterance as `id TAB floats`.
    Extract {
        #[arg(long, value_parser = ["a", "b", "c", "d", "e"])]
        variant: String,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Top-1 identification accuracy on the test split.
    EvalId {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Cosine-scored verification EER over a trial list.
    EvalVer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Print the per-head window masks and receptive-field bounds.
    Mask {
        #[arg(value_parser = ["inspect"])]
        action: Option<String>,
        #[arg(long)]
        heads: usize,
        #[arg(long)]
        steps: usize,
        /// 1-based layer for the receptive-field bounds.
        #[arg(long, default_value_t = 1)]
        layer: usize,
    },
    /// Plot loss, learning rate and accuracy from a metrics log as SVG.
    Report {
        #[arg(long)]
        metrics_log: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-module and total parameter counts of a config.
    ParamCount {
        #[arg(long)]
        config: PathBuf,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Output goes to stdout, diagnostics to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let mut stdout = std::io::stdout().lock();
    match execute(cli.command, &mut stdout) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(path: &Path) -> Result<TrainConfig> {
    parse_train_config(&read_text(path)?).map_err(|e| Error::format(path, e.to_string()))
}

fn out_line(out: &mut dyn std::io::Write, line: std::fmt::Arguments) -> Result<()> {
    out.write_fmt(line)
        .and_then(|_| out.write_all(b"\n"))
        .map_err(|e| Error::io(Path::new("<stdout>"), e))
}

pub fn execute(command: Command, out: &mut dyn std::io::Write) -> Result<()> {
    match command {
        Command::SynthData {
            out: dir,
            speakers,
            utts,
            frames,
            bins,
            test_per_speaker,
            trials_per_class,
            jitter,
            seed,
        } => {
            let cfg = SynthConfig {
                n_speakers: speakers,
                utts_per_speaker: utts,
                frames_per_utt: frames,
                n_bins: bins,
                jitter_scale: jitter,
                test_per_speaker,
                trials_per_class,
                seed,
                ..SynthConfig::default()
            };
            let corpus = synth_corpus(&cfg)?;
            DataDir::write(&dir, &corpus.train, &corpus.test, &corpus.speakers(), Some(&corpus.trials))?;
            out_line(
                out,
                format_args!(
                    "wrote {} train, {} test utterances, {} trials to {}",
                    corpus.train.len(),
                    corpus.test.len(),
                    corpus.trials.trials.len(),
                    dir.display()
                ),
            )
        }
        Command::Featurize {
            wav,
            out: dir,
            test_per_speaker,
            trials_per_class,
            seed,
        } => featurize(&wav, &dir, test_per_speaker, trials_per_class, seed, out),
        Command::Train {
            config,
            data,
            out: dir,
            seed,
            manifest,
        } => {
            let cfg = match (&manifest, config) {
                (Some(m), _) => {
                    let m = RunManifest::read(m)?;
                    let actual = fingerprint(&DataDir::content_files(&data))?;
                    if actual != m.corpus_sha256 {
                        return Err(Error::format(
                            &data,
                            format!("corpus fingerprint {actual} does not match manifest {}", m.corpus_sha256),
                        ));
                    }
                    m.config
                }
                (None, Some(c)) => {
                    let mut cfg = load_config(&c)?;
                    if let Some(s) = seed {
                        cfg.seed = s;
                    }
                    cfg
                }
                (None, None) => return Err(Error::Usage("train needs --config or --manifest".into())),
            };
            run_training(cfg, &data, &dir, out)
        }
        Command::Extract {
            variant,
            checkpoint: ckpt,
            features,
            out: path,
        } => {
            let model = checkpoint::load(&ckpt)?;
            let want = Variant::from_letter(&variant).expect("clap restricts the letters");
            if model.config.variant != want {
                return Err(Error::format(
                    &ckpt,
                    format!("checkpoint holds variant ({}), not ({variant})", model.config.variant.letter()),
                ));
            }
            let utts = data::load_feature_dir(&features)?;
            let embs = utts.iter().map(|u| model.embed(u)).collect::<mvsa_core::Result<Vec<SpeakerEmbedding>>>()?;
            write_atomic(&path, data::format_embeddings(&embs).as_bytes())?;
            out_line(out, format_args!("wrote {} embeddings to {}", embs.len(), path.display()))
        }
        Command::EvalId { checkpoint: ckpt, data } => {
            let model = checkpoint::load(&ckpt)?;
            let d = DataDir::load(&data)?;
            let r = evaluate_identification(&model, &d.test, &d.speakers)?;
            out_line(out, format_args!("accuracy={:.4} utterances={}", r.accuracy, r.n_utterances))
        }
        Command::EvalVer {
            checkpoint: ckpt,
            trials,
            features,
            scores,
        } => {
            let model = checkpoint::load(&ckpt)?;
            let t = data::read_trials(&trials)?;
            let utts = data::load_feature_dir(&features)?;
            let r = evaluate_verification(&model, &utts, &t)?;
            if let Some(p) = scores {
                write_atomic(&p, data::format_scores(&r.scores).as_bytes())?;
            }
            out_line(
                out,
                format_args!(
                    "eer={:.4} threshold={:?} trials={}",
                    r.eer.eer,
                    r.eer.threshold,
                    r.scores.scores.len()
                ),
            )
        }
        Command::Mask {
            action: _,
            heads,
            steps,
            layer,
        } => {
            let schedule = WindowSchedule::doubling(heads).map_err(|e| Error::Usage(e.to_string()))?;
            if steps == 0 {
                return Err(Error::Usage("--steps must be at least 1".into()));
            }
            let (lo, hi) = receptive_field_bounds(layer, &schedule).map_err(|e| Error::Usage(e.to_string()))?;
            let masks = MaskSet::build(&schedule, steps, None, ClsPolicy::Windowed)?;
            out.write_all(format_masks(&masks, &schedule).as_bytes())
                .map_err(|e| Error::io(Path::new("<stdout>"), e))?;
            out_line(out, format_args!("receptive_field layer={layer} min={lo} max={hi}"))
        }
        Command::Report { metrics_log, out: path } => {
            let recs = report::read_metrics(&metrics_log)?;
            write_atomic(&path, report::render_svg(&recs).as_bytes())?;
            out_line(out, format_args!("plotted {} records to {}", recs.len(), path.display()))
        }
        Command::ParamCount { config } => {
            let cfg = load_config(&config)?;
            let b = count_parameters(&cfg.model)?;
            for (name, n) in &b.entries {
                out_line(out, format_args!("{name} {n}"))?;
            }
            out_line(out, format_args!("total {}", b.total()))
        }
    }
}

/// A text grid per head (`#` attended, `.` masked) followed by one
/// machine-readable `mask head=.. t=.. row=0101..` line per query.
pub fn format_masks(masks: &MaskSet, schedule: &WindowSchedule) -> String {
    let n = masks.n_steps();
    let mut s = String::new();
    for h in 0..masks.heads() {
        s.push_str(&format!("head {h} window {}\n", schedule.windows()[h]));
        for t in 0..n {
            let row: Vec<&str> = (0..n).map(|u| if masks.get(h, t, u) { "#" } else { "." }).collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
    }
    for h in 0..masks.heads() {
        for t in 0..n {
            let row: String = (0..n).map(|u| if masks.get(h, t, u) { '1' } else { '0' }).collect();
            s.push_str(&format!("mask head={h} t={t} row={row}\n"));
        }
    }
    s
}

fn featurize(
    wav: &Path,
    dir: &Path,
    test_per_speaker: usize,
    trials_per_class: usize,
    seed: u64,
    out: &mut dyn std::io::Write,
) -> Result<()> {
    let bank = MelFilterbank::standard();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    let groups = frontend::find_wavs(wav)?;
    let speakers: Vec<String> = groups.keys().cloned().collect();
    for (spk, files) in &groups {
        if files.len() < test_per_speaker {
            return Err(Error::format(
                wav,
                format!("speaker {spk} has {} files, fewer than --test-per-speaker", files.len()),
            ));
        }
        let n_train = files.len() - test_per_speaker;
        for (i, f) in files.iter().enumerate() {
            let stem = f.file_stem().expect("wav file").to_string_lossy();
            let id = format!("{spk}-{stem}");
            let samples = frontend::read_wav(f)?;
            let fm = frontend::featurize(&samples, &bank, &id, spk).map_err(|e| match e {
                Error::Core(c) => Error::format(f, c.to_string()),
                other => other,
            })?;
            if i < n_train {
                train.push(fm);
            } else {
                test.push(fm);
            }
        }
    }
    let trials = if trials_per_class > 0 {
        Some(balanced_trials(&test, trials_per_class, &mut Rng::for_label(seed, "trials", 0))?)
    } else {
        None
    };
    DataDir::write(dir, &train, &test, &speakers, trials.as_ref())?;
    out_line(
        out,
        format_args!(
            "wrote {} train, {} test utterances of {} speakers to {}",
            train.len(),
            test.len(),
            speakers.len(),
            dir.display()
        ),
    )
}

/// Streams metric lines to the log and checkpoints to disk as training
/// proceeds, so a diverged run keeps its last good checkpoint.
struct RunWriter {
    log: File,
    log_path: PathBuf,
    ckpt_path: PathBuf,
    failure: Option<Error>,
}

impl RunWriter {
    fn fail(&mut self, e: Error) -> mvsa_core::Error {
        let msg = e.to_string();
        self.failure = Some(e);
        mvsa_core::Error::Config(msg)
    }
}

impl TrainObserver for RunWriter {
    fn on_metrics(&mut self, record: &MetricRecord) -> mvsa_core::Result<()> {
        let r = writeln!(self.log, "{}", record.to_line()).and_then(|_| self.log.flush());
        r.map_err(|e| {
            let p = self.log_path.clone();
            self.fail(Error::io(&p, e))
        })
    }

    fn on_checkpoint(&mut self, _step: u64, model: &SpeakerModel) -> mvsa_core::Result<()> {
        let p = self.ckpt_path.clone();
        checkpoint::save(&p, model).map_err(|e| self.fail(e))
    }
}

/// Trains on `data` and writes the run directory. The model's class count is
/// taken from the data directory's speaker list.
pub fn run_training(mut cfg: TrainConfig, data: &Path, dir: &Path, out: &mut dyn std::io::Write) -> Result<()> {
    let d = DataDir::load(data)?;
    cfg.model.n_speakers = d.speakers.len();
    cfg.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = RunManifest {
        tool_version: TOOL_VERSION.into(),
        seed: cfg.seed,
        corpus_sha256: fingerprint(&DataDir::content_files(data))?,
        artifacts: vec![METRICS_FILE.into(), CHECKPOINT_FILE.into(), CONFIG_FILE.into()],
        config: cfg.clone(),
    };
    manifest.write(&dir.join(MANIFEST_FILE))?;
    write_atomic(&dir.join(CONFIG_FILE), write_train_config(&cfg).as_bytes())?;
    let log_path = dir.join(METRICS_FILE);
    let log = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut writer = RunWriter {
        log,
        log_path,
        ckpt_path: dir.join(CHECKPOINT_FILE),
        failure: None,
    };
    let outcome = train(&cfg, &d.train, &d.speakers, &mut writer);
    let outcome = match (outcome, writer.failure.take()) {
        (Err(_), Some(io)) => return Err(io),
        (r, _) => r?,
    };
    let last = outcome.records.last();
    out_line(
        out,
        format_args!(
            "trained {} steps: loss={:?} acc={:?}; run written to {}",
            cfg.steps,
            last.map_or(f64::NAN, |r| r.loss),
            last.map_or(f64::NAN, |r| r.acc),
            dir.display()
        ),
    )
}
