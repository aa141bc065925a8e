//! Feature record files, speaker maps, trial lists, score files and
//! embedding tables.
//!
//! A feature file is a sequence of records, each
//! `u32 id_len | id bytes | u32 T | u32 F | T·F f32`, all little-endian.
//! A data directory holds `train.feats`, `test.feats`, `utt2spk`,
//! `speakers` and optionally `trials`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mvsa_core::evaluation::{ScoreSet, Trial, TrialList};
use mvsa_core::features::FeatureMatrix;
use mvsa_core::numerics::Tensor;
use mvsa_core::variants::SpeakerEmbedding;

use crate::error::{read, read_text, write_atomic, Error, Result};

pub const TRAIN_FEATS: &str = "train.feats";
pub const TEST_FEATS: &str = "test.feats";
pub const UTT2SPK: &str = "utt2spk";
pub const SPEAKERS: &str = "speakers";
pub const TRIALS: &str = "trials";

pub fn encode_records(utts: &[FeatureMatrix]) -> Vec<u8> {
    let mut out = Vec::new();
    for u in utts {
        out.extend_from_slice(&(u.utterance_id.len() as u32).to_le_bytes());
        out.extend_from_slice(u.utterance_id.as_bytes());
        out.extend_from_slice(&(u.n_frames() as u32).to_le_bytes());
        out.extend_from_slice(&(u.n_bins() as u32).to_le_bytes());
        for &v in u.frames.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

/// Decodes records; speaker ids are left empty (see [`attach_speakers`]).
pub fn decode_records(bytes: &[u8], path: &Path) -> Result<Vec<FeatureMatrix>> {
    let mut c = Cursor { bytes, pos: 0 };
    let mut out = Vec::new();
    let bad = |what: &str, at: usize| Error::format(path, format!("{what} at byte {at}"));
    while c.pos < bytes.len() {
        let start = c.pos;
        let len = c.u32().ok_or_else(|| bad("truncated id length", start))? as usize;
        let id = c.take(len).ok_or_else(|| bad("truncated utterance id", start))?;
        let id = std::str::from_utf8(id).map_err(|_| bad("utterance id is not UTF-8", start))?;
        let t = c.u32().ok_or_else(|| bad("truncated frame count", start))? as usize;
        let f = c.u32().ok_or_else(|| bad("truncated bin count", start))? as usize;
        let n = t.checked_mul(f).and_then(|n| n.checked_mul(4)).ok_or_else(|| bad("oversized record", start))?;
        let raw = c.take(n).ok_or_else(|| bad("truncated frames", start))?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        let frames = Tensor::new(vec![t, f], data).map_err(|e| Error::format(path, e.to_string()))?;
        let fm = FeatureMatrix::new(frames, id, "").map_err(|e| Error::format(path, format!("record `{id}`: {e}")))?;
        out.push(fm);
    }
    Ok(out)
}

pub fn write_features(path: &Path, utts: &[FeatureMatrix]) -> Result<()> {
    write_atomic(path, &encode_records(utts))
}

pub fn read_features(path: &Path) -> Result<Vec<FeatureMatrix>> {
    decode_records(&read(path)?, path)
}

fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

pub fn write_utt2spk(path: &Path, utts: &[FeatureMatrix]) -> Result<()> {
    let mut s = String::new();
    for u in utts {
        writeln!(s, "{} {}", u.utterance_id, u.speaker_id).expect("string write");
    }
    write_atomic(path, s.as_bytes())
}

pub fn read_utt2spk(path: &Path) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, l) in lines(&read_text(path)?) {
        let mut it = l.split_whitespace();
        match (it.next(), it.next(), it.next()) {
            (Some(u), Some(s), None) => {
                if map.insert(u.to_string(), s.to_string()).is_some() {
                    return Err(Error::format(path, format!("line {n}: duplicate utterance `{u}`")));
                }
            }
            _ => return Err(Error::format(path, format!("line {n}: expected `utterance speaker`"))),
        }
    }
    Ok(map)
}

pub fn attach_speakers(utts: &mut [FeatureMatrix], map: &BTreeMap<String, String>, path: &Path) -> Result<()> {
    for u in utts {
        u.speaker_id = map
            .get(&u.utterance_id)
            .ok_or_else(|| Error::format(path, format!("no speaker for utterance `{}`", u.utterance_id)))?
            .clone();
    }
    Ok(())
}

pub fn write_speakers(path: &Path, speakers: &[String]) -> Result<()> {
    let s: String = speakers.iter().map(|s| format!("{s}\n")).collect();
    write_atomic(path, s.as_bytes())
}

pub fn read_speakers(path: &Path) -> Result<Vec<String>> {
    Ok(lines(&read_text(path)?).map(|(_, l)| l.to_string()).collect())
}

pub fn format_trials(trials: &TrialList) -> String {
    trials
        .trials
        .iter()
        .map(|t| format!("{} {} {}\n", t.target as u8, t.enroll, t.test))
        .collect()
}

pub fn parse_trials(text: &str, path: &Path) -> Result<TrialList> {
    let trials = lines(text)
        .map(|(n, l)| {
            let f: Vec<&str> = l.split_whitespace().collect();
            let target = match f.first() {
                Some(&"1") => true,
                Some(&"0") => false,
                _ => return Err(Error::format(path, format!("line {n}: label must be 0 or 1"))),
            };
            if f.len() != 3 {
                return Err(Error::format(path, format!("line {n}: expected `label enroll test`")));
            }
            Ok(Trial {
                target,
                enroll: f[1].to_string(),
                test: f[2].to_string(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(TrialList { trials })
}

pub fn write_trials(path: &Path, trials: &TrialList) -> Result<()> {
    write_atomic(path, format_trials(trials).as_bytes())
}

pub fn read_trials(path: &Path) -> Result<TrialList> {
    parse_trials(&read_text(path)?, path)
}

/// `label enroll test score` per line.
pub fn format_scores(scores: &ScoreSet) -> String {
    scores
        .scores
        .iter()
        .map(|(t, s)| format!("{} {} {} {s}\n", t.target as u8, t.enroll, t.test))
        .collect()
}

pub fn parse_scores(text: &str, path: &Path) -> Result<ScoreSet> {
    let scores = lines(text)
        .map(|(n, l)| {
            let (head, score) = l
                .rsplit_once(' ')
                .ok_or_else(|| Error::format(path, format!("line {n}: expected `label enroll test score`")))?;
            let trial = parse_trials(head, path)?.trials.pop().expect("one line");
            let s: f64 = score
                .parse()
                .map_err(|_| Error::format(path, format!("line {n}: bad score `{score}`")))?;
            Ok((trial, s))
        })
        .collect::<Result<_>>()?;
    Ok(ScoreSet { scores })
}

/// `utterance_id TAB space-separated floats` per line.
pub fn format_embeddings(embs: &[SpeakerEmbedding]) -> String {
    let mut s = String::new();
    for e in embs {
        s.push_str(&e.utterance_id);
        s.push('\t');
        let v: Vec<String> = e.vector.iter().map(|x| x.to_string()).collect();
        s.push_str(&v.join(" "));
        s.push('\n');
    }
    s
}

pub fn parse_embeddings(text: &str, path: &Path) -> Result<Vec<SpeakerEmbedding>> {
    lines(text)
        .map(|(n, l)| {
            let (id, rest) = l
                .split_once('\t')
                .ok_or_else(|| Error::format(path, format!("line {n}: missing tab")))?;
            let vector = rest
                .split(' ')
                .map(|x| x.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::format(path, format!("line {n}: bad float")))?;
            Ok(SpeakerEmbedding {
                utterance_id: id.to_string(),
                vector,
            })
        })
        .collect()
}

/// Train/test features with speakers attached.
#[derive(Clone, Debug)]
pub struct DataDir {
    pub root: PathBuf,
    pub train: Vec<FeatureMatrix>,
    pub test: Vec<FeatureMatrix>,
    /// Classifier label order.
    pub speakers: Vec<String>,
}

impl DataDir {
    pub fn write(
        root: &Path,
        train: &[FeatureMatrix],
        test: &[FeatureMatrix],
        speakers: &[String],
        trials: Option<&TrialList>,
    ) -> Result<()> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        write_features(&root.join(TRAIN_FEATS), train)?;
        write_features(&root.join(TEST_FEATS), test)?;
        let all: Vec<FeatureMatrix> = train.iter().chain(test).cloned().collect();
        write_utt2spk(&root.join(UTT2SPK), &all)?;
        write_speakers(&root.join(SPEAKERS), speakers)?;
        if let Some(t) = trials {
            write_trials(&root.join(TRIALS), t)?;
        }
        Ok(())
    }

    pub fn load(root: &Path) -> Result<Self> {
        let map_path = root.join(UTT2SPK);
        let map = read_utt2spk(&map_path)?;
        let mut train = read_features(&root.join(TRAIN_FEATS))?;
        let mut test = read_features(&root.join(TEST_FEATS))?;
        attach_speakers(&mut train, &map, &map_path)?;
        attach_speakers(&mut test, &map, &map_path)?;
        let speakers = read_speakers(&root.join(SPEAKERS))?;
        Ok(DataDir {
            root: root.to_path_buf(),
            train,
            test,
            speakers,
        })
    }

    /// The files whose bytes define the corpus, in fingerprint order.
    pub fn content_files(root: &Path) -> Vec<PathBuf> {
        [TRAIN_FEATS, TEST_FEATS, UTT2SPK, SPEAKERS].iter().map(|f| root.join(f)).collect()
    }
}

/// Every `*.feats` file in `dir` (sorted by name), with speakers from
/// `dir/utt2spk` when present.
pub fn load_feature_dir(dir: &Path) -> Result<Vec<FeatureMatrix>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "feats"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::format(dir, "no .feats files"));
    }
    let mut utts = Vec::new();
    for f in files {
        utts.extend(read_features(&f)?);
    }
    let map_path = dir.join(UTT2SPK);
    if map_path.exists() {
        attach_speakers(&mut utts, &read_utt2spk(&map_path)?, &map_path)?;
    }
    Ok(utts)
}
