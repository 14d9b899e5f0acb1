//! Synthetic bilingual text–motion corpus.
//!
//! Each class is a parametric trajectory family (per-feature sinusoid plus a
//! linear drift). Captions are drawn from a class-specific lexicon with filler
//! words and occasional cross-class substitutions, then rendered in two
//! disjoint vocabularies: language B maps every language-A word through a
//! fixed bijection and reverses word order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::motion::MotionSequence;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    A,
    B,
}

/// One motion's caption rendered in both languages.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptionRecord {
    pub motion_id: String,
    pub tokens_lang_a: Vec<usize>,
    pub tokens_lang_b: Vec<usize>,
    pub class_label: usize,
}

impl CaptionRecord {
    pub fn tokens(&self, lang: Language) -> &[usize] {
        match lang {
            Language::A => &self.tokens_lang_a,
            Language::B => &self.tokens_lang_b,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusEntry {
    pub motion_id: String,
    pub motion: MotionSequence,
    pub captions: Vec<CaptionRecord>,
    pub class_label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusParams {
    pub num_classes: usize,
    pub per_class: usize,
    pub num_frames: usize,
    pub feature_dim: usize,
    /// Tokens per language; the joint vocabulary has twice this many ids.
    pub vocab_per_language: usize,
    pub min_caption_len: usize,
    pub max_caption_len: usize,
    pub captions_per_motion: usize,
    /// Element noise std; per-motion amplitude and phase variation scale with it.
    pub jitter: f64,
    /// Probability that a class word is swapped for another class's word.
    pub lexical_noise: f64,
    pub seed: u64,
}

impl Default for CorpusParams {
    fn default() -> Self {
        Self {
            num_classes: 8,
            per_class: 64,
            num_frames: 32,
            feature_dim: 6,
            vocab_per_language: 64,
            min_caption_len: 4,
            max_caption_len: 8,
            captions_per_motion: 2,
            jitter: 0.05,
            lexical_noise: 0.1,
            seed: 0,
        }
    }
}

impl CorpusParams {
    pub fn joint_vocab(&self) -> usize {
        2 * self.vocab_per_language
    }

    fn validate(&self) -> Result<()> {
        let positive = [
            ("num_classes", self.num_classes),
            ("per_class", self.per_class),
            ("num_frames", self.num_frames),
            ("feature_dim", self.feature_dim),
            ("captions_per_motion", self.captions_per_motion),
            ("min_caption_len", self.min_caption_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Parameter(format!("{name} must be >= 1")));
            }
        }
        if self.min_caption_len > self.max_caption_len {
            return Err(Error::Parameter("min_caption_len > max_caption_len".into()));
        }
        if self.vocab_per_language < self.num_classes + 1 {
            return Err(Error::Parameter(
                "vocabulary must hold one word per class plus fillers".into(),
            ));
        }
        if !(self.jitter >= 0.0) || !(0.0..=1.0).contains(&self.lexical_noise) {
            return Err(Error::Parameter("jitter >= 0 and lexical_noise in [0,1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Lexicon {
    per_language: usize,
    class_words: Vec<Vec<usize>>,
    fillers: Vec<usize>,
    translation: Vec<usize>,
}

impl Lexicon {
    fn new(p: &CorpusParams, rng: &mut ChaCha8Rng) -> Self {
        let v = p.vocab_per_language;
        let per_class = ((v / 2) / p.num_classes).clamp(1, 4);
        let class_words = (0..p.num_classes)
            .map(|k| (k * per_class..(k + 1) * per_class).collect())
            .collect();
        let fillers = (p.num_classes * per_class..v).collect();
        let mut translation: Vec<usize> = (0..v).collect();
        translation.shuffle(rng);
        Self {
            per_language: v,
            class_words,
            fillers,
            translation,
        }
    }

    fn caption(&self, class: usize, p: &CorpusParams, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
        let len = rng.random_range(p.min_caption_len..=p.max_caption_len);
        let n_class = if len >= 7 { 4 } else { 3 }.min(len);
        let mut a = Vec::with_capacity(len);
        for _ in 0..n_class {
            let k = if p.num_classes > 1 && rng.random::<f64>() < p.lexical_noise {
                let other = rng.random_range(0..p.num_classes - 1);
                if other >= class {
                    other + 1
                } else {
                    other
                }
            } else {
                class
            };
            a.push(*self.class_words[k].choose(rng).expect("nonempty class lexicon"));
        }
        while a.len() < len {
            a.push(*self.fillers.choose(rng).expect("nonempty filler lexicon"));
        }
        a.shuffle(rng);
        let b = a
            .iter()
            .rev()
            .map(|&w| self.per_language + self.translation[w])
            .collect();
        (a, b)
    }
}

#[derive(Clone, Debug)]
struct Trajectory {
    freq: f64,
    amp: f64,
    phase: f64,
    drift: f64,
}

fn class_trajectories(p: &CorpusParams) -> Vec<Vec<Trajectory>> {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    rng.set_stream(0);
    (0..p.num_classes)
        .map(|_| {
            (0..p.feature_dim)
                .map(|_| Trajectory {
                    freq: rng.random_range(1..=3) as f64,
                    amp: rng.random_range(0.6..1.4),
                    phase: rng.random_range(0.0..std::f64::consts::TAU),
                    drift: rng.random_range(-0.8..0.8),
                })
                .collect()
        })
        .collect()
}

fn render(
    traj: &[Trajectory],
    num_frames: usize,
    amp_scale: f64,
    phase_shift: f64,
) -> Matrix {
    let d = traj.len();
    let mut m = Matrix::zeros(num_frames, d);
    let denom = (num_frames.max(2) - 1) as f64;
    for n in 0..num_frames {
        let s = n as f64 / num_frames as f64;
        let lin = 2.0 * n as f64 / denom - 1.0;
        for (j, tr) in traj.iter().enumerate() {
            let v = amp_scale
                * tr.amp
                * (std::f64::consts::TAU * tr.freq * s + tr.phase + phase_shift).sin()
                + tr.drift * lin;
            m.set(n, j, v);
        }
    }
    m
}

/// Noise-free class templates for `p`, one per class.
pub fn class_templates(p: &CorpusParams) -> Result<Vec<MotionSequence>> {
    p.validate()?;
    class_trajectories(p)
        .iter()
        .map(|traj| MotionSequence::new(render(traj, p.num_frames, 1.0, 0.0)))
        .collect()
}

pub fn generate_corpus(p: &CorpusParams) -> Result<Vec<CorpusEntry>> {
    p.validate()?;
    let trajectories = class_trajectories(p);
    let mut lex_rng = ChaCha8Rng::seed_from_u64(p.seed);
    lex_rng.set_stream(1);
    let lexicon = Lexicon::new(p, &mut lex_rng);
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    rng.set_stream(2);

    let mut entries = Vec::with_capacity(p.num_classes * p.per_class);
    for (class, traj) in trajectories.iter().enumerate() {
        for i in 0..p.per_class {
            let motion_id = format!("c{class:02}-m{i:04}");
            let g1: f64 = rng.sample(StandardNormal);
            let g2: f64 = rng.sample(StandardNormal);
            let amp_scale = 1.0 + 2.0 * p.jitter * g1;
            let phase_shift = 3.0 * p.jitter * g2;
            let mut frames = render(traj, p.num_frames, amp_scale, phase_shift);
            if p.jitter > 0.0 {
                for v in frames.data_mut() {
                    *v += p.jitter * rng.sample::<f64, _>(StandardNormal);
                }
            }
            let captions = (0..p.captions_per_motion)
                .map(|_| {
                    let (a, b) = lexicon.caption(class, p, &mut rng);
                    CaptionRecord {
                        motion_id: motion_id.clone(),
                        tokens_lang_a: a,
                        tokens_lang_b: b,
                        class_label: class,
                    }
                })
                .collect();
            entries.push(CorpusEntry {
                motion_id,
                motion: MotionSequence::new(frames)?,
                captions,
                class_label: class,
            });
        }
    }
    Ok(entries)
}

/// Keeps entries with `min_frames <= N <= max_frames`, preserving order.
pub fn filter_by_length(entries: Vec<CorpusEntry>, min_frames: usize, max_frames: usize) -> Vec<CorpusEntry> {
    entries
        .into_iter()
        .filter(|e| (min_frames..=max_frames).contains(&e.motion.num_frames()))
        .collect()
}

/// Deterministic per-class split: the last `ceil(n_k · test_fraction)` motions
/// of each class are held out.
pub fn split_train_test(entries: &[CorpusEntry], test_fraction: f64) -> (Vec<CorpusEntry>, Vec<CorpusEntry>) {
    let max_class = entries.iter().map(|e| e.class_label).max().map_or(0, |m| m + 1);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for k in 0..max_class {
        let members: Vec<&CorpusEntry> = entries.iter().filter(|e| e.class_label == k).collect();
        let n_test = ((members.len() as f64) * test_fraction).ceil() as usize;
        let cut = members.len() - n_test.min(members.len());
        for (i, e) in members.into_iter().enumerate() {
            if i < cut {
                train.push(e.clone());
            } else {
                test.push(e.clone());
            }
        }
    }
    (train, test)
}

#[derive(Serialize, Deserialize)]
struct CaptionLine {
    lang: Language,
    tokens: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct EntryLine {
    motion_id: String,
    frames: MotionSequence,
    captions: Vec<CaptionLine>,
    class: usize,
}

impl From<&CorpusEntry> for EntryLine {
    fn from(e: &CorpusEntry) -> Self {
        let captions = e
            .captions
            .iter()
            .flat_map(|c| {
                [
                    CaptionLine {
                        lang: Language::A,
                        tokens: c.tokens_lang_a.clone(),
                    },
                    CaptionLine {
                        lang: Language::B,
                        tokens: c.tokens_lang_b.clone(),
                    },
                ]
            })
            .collect();
        Self {
            motion_id: e.motion_id.clone(),
            frames: e.motion.clone(),
            captions,
            class: e.class_label,
        }
    }
}

impl EntryLine {
    fn into_entry(self) -> std::result::Result<CorpusEntry, String> {
        let (a, b): (Vec<_>, Vec<_>) = self.captions.into_iter().partition(|c| c.lang == Language::A);
        if a.is_empty() || a.len() != b.len() {
            return Err(format!(
                "expected paired captions, got {} lang-a and {} lang-b",
                a.len(),
                b.len()
            ));
        }
        if a.iter().chain(&b).any(|c| c.tokens.is_empty()) {
            return Err("empty caption".into());
        }
        let captions = a
            .into_iter()
            .zip(b)
            .map(|(a, b)| CaptionRecord {
                motion_id: self.motion_id.clone(),
                tokens_lang_a: a.tokens,
                tokens_lang_b: b.tokens,
                class_label: self.class,
            })
            .collect();
        Ok(CorpusEntry {
            motion_id: self.motion_id,
            motion: self.frames,
            captions,
            class_label: self.class,
        })
    }
}

pub fn entry_to_json_line(e: &CorpusEntry) -> String {
    serde_json::to_string(&EntryLine::from(e)).expect("corpus entries serialize")
}

/// Parses one corpus line. The error string says what was wrong.
pub fn entry_from_json_line(line: &str) -> std::result::Result<CorpusEntry, String> {
    let raw: EntryLine = serde_json::from_str(line).map_err(|e| e.to_string())?;
    raw.into_entry()
}

/// Writes one JSON object per line.
pub fn save_corpus(entries: &[CorpusEntry], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in entries {
        writeln!(w, "{}", entry_to_json_line(e))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a line-delimited corpus. Any malformed line fails the whole load.
pub fn load_corpus(path: &Path) -> Result<Vec<CorpusEntry>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        out.push(entry_from_json_line(&line).map_err(parse_err)?);
    }
    Ok(out)
}
