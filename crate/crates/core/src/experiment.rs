//! End-to-end toy experiment: corpus, text alignment, reward model,
//! denoiser, retrieval index, then sampling and evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{EvalConfig, GuidanceConfig, RunConfig};
use crate::corpus::{generate_corpus, split_train_test, CorpusEntry, Language};
use crate::crosslingual::{distill, CaptionPair, DistillReport, TextEncoder};
use crate::diffusion::{train_denoiser, ConditionedMotion, Denoiser, SamplerConfig, TrainReport};
use crate::guidance::{build_index, guided_sample, retrieve_by_latent, RetrievalIndex};
use crate::metrics::{evaluate, MetricConfig, MetricReport};
use crate::motion::MotionSequence;
use crate::reward::{cosine, train_reward, LatentReward, RewardModel, RewardReport};
use crate::schedule::NoiseSchedule;
use crate::{Error, Result};

/// Offsets added to the run seed so each network starts from its own stream.
const TEACHER_SEED: u64 = 0x7e_a0;
const STUDENT_SEED: u64 = 0x57_0d;
const REWARD_SEED: u64 = 0x2e_3a;
const DENOISER_SEED: u64 = 0xd1_ff;

pub struct CorpusSplit {
    pub all: Vec<CorpusEntry>,
    pub train: Vec<CorpusEntry>,
    pub test: Vec<CorpusEntry>,
}

pub fn corpus_split(cfg: &RunConfig) -> Result<CorpusSplit> {
    let all = generate_corpus(&cfg.corpus)?;
    let (train, test) = split_train_test(&all, cfg.test_fraction);
    if train.is_empty() || test.is_empty() {
        return Err(Error::Parameter("train/test split left one side empty".into()));
    }
    Ok(CorpusSplit { all, train, test })
}

pub fn caption_pairs(entries: &[CorpusEntry]) -> Vec<CaptionPair> {
    entries.iter().flat_map(|e| e.captions.iter().map(CaptionPair::from)).collect()
}

/// Distills a lang-a teacher into a bilingual student. The teacher is a
/// fixed random encoder, standing in for a pretrained monolingual model.
pub fn align_text(cfg: &RunConfig, train: &[CorpusEntry]) -> Result<(TextEncoder, TextEncoder, DistillReport)> {
    let teacher = TextEncoder::new(cfg.teacher_config(), cfg.seed.wrapping_add(TEACHER_SEED)).freeze();
    let mut student = TextEncoder::new(cfg.student_config(), cfg.seed.wrapping_add(STUDENT_SEED));
    let report = distill(&teacher, &mut student, &caption_pairs(train), &cfg.distill)?;
    Ok((teacher, student.freeze(), report))
}

pub fn train_reward_model(cfg: &RunConfig, train: &[CorpusEntry]) -> Result<(RewardModel, RewardReport)> {
    let schedule = cfg.schedule.build()?;
    let mut model = RewardModel::new(cfg.reward_model_config(), cfg.seed.wrapping_add(REWARD_SEED));
    let report = train_reward(&mut model, train, &schedule, &cfg.reward, &cfg.reward_training)?;
    Ok((model, report))
}

/// Every caption in both languages becomes a condition for its motion.
pub fn conditioned_motions(student: &TextEncoder, entries: &[CorpusEntry]) -> Result<Vec<ConditionedMotion>> {
    entries
        .iter()
        .map(|e| {
            let conds = e
                .captions
                .iter()
                .flat_map(|c| [&c.tokens_lang_a, &c.tokens_lang_b])
                .map(|t| student.encode(t))
                .collect::<Result<_>>()?;
            Ok(ConditionedMotion {
                motion: e.motion.clone(),
                conds,
            })
        })
        .collect()
}

pub fn train_diffusion(cfg: &RunConfig, train: &[CorpusEntry], student: &TextEncoder) -> Result<(Denoiser, TrainReport)> {
    let schedule = cfg.schedule.build()?;
    let data = conditioned_motions(student, train)?;
    let mut net = Denoiser::new(cfg.denoiser_config(), cfg.seed.wrapping_add(DENOISER_SEED));
    let report = train_denoiser(&mut net, &data, &schedule, &cfg.diffusion)?;
    Ok((net, report))
}

/// The frozen pieces sampling and evaluation need.
pub struct System {
    pub schedule: NoiseSchedule,
    pub student: TextEncoder,
    pub reward: RewardModel,
    pub denoiser: Denoiser,
    pub index: RetrievalIndex,
    /// Clean-motion latents of the whole corpus, the reference set for FID.
    pub real_latents: Vec<Vec<f64>>,
    pub shape: (usize, usize),
}

impl System {
    pub fn assemble(
        cfg: &RunConfig,
        corpus: &CorpusSplit,
        student: TextEncoder,
        reward: RewardModel,
        denoiser: Denoiser,
        index: RetrievalIndex,
    ) -> Result<Self> {
        index.ensure_current(&reward)?;
        let real_latents = corpus
            .all
            .par_iter()
            .map(|e| reward.motion_latent(&e.motion, 0))
            .collect::<Result<_>>()?;
        Ok(Self {
            schedule: cfg.schedule.build()?,
            student,
            reward,
            denoiser,
            index,
            real_latents,
            shape: (cfg.corpus.num_frames, cfg.corpus.feature_dim),
        })
    }
}

pub struct TrainingReports {
    pub distill: DistillReport,
    pub reward: RewardReport,
    pub diffusion: TrainReport,
}

/// Runs every training stage in order. `log` receives one line per stage.
pub fn train_system(cfg: &RunConfig, mut log: impl FnMut(&str)) -> Result<(CorpusSplit, System, TrainingReports)> {
    cfg.validate()?;
    let corpus = corpus_split(cfg)?;
    log(&format!("corpus: {} train / {} test motions", corpus.train.len(), corpus.test.len()));
    let (_, student, d) = align_text(cfg, &corpus.train)?;
    log(&format!(
        "text alignment: loss {:.4} -> {:.4}",
        d.epoch_cla.first().copied().unwrap_or(f64::NAN),
        d.epoch_cla.last().copied().unwrap_or(f64::NAN)
    ));
    let (reward, r) = train_reward_model(cfg, &corpus.train)?;
    log(&format!(
        "reward model: contrastive {:.4} -> {:.4}",
        r.epoch_contrastive.first().copied().unwrap_or(f64::NAN),
        r.epoch_contrastive.last().copied().unwrap_or(f64::NAN)
    ));
    let (denoiser, n) = train_diffusion(cfg, &corpus.train, &student)?;
    log(&format!(
        "denoiser: loss {:.4} -> {:.4}",
        n.epoch_losses.first().copied().unwrap_or(f64::NAN),
        n.epoch_losses.last().copied().unwrap_or(f64::NAN)
    ));
    let index = build_index(&corpus.train, &reward)?;
    let system = System::assemble(cfg, &corpus, student, reward, denoiser, index)?;
    Ok((
        corpus,
        system,
        TrainingReports {
            distill: d,
            reward: r,
            diffusion: n,
        },
    ))
}

/// One caption to generate for, with its sampling seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCase {
    pub motion_id: String,
    pub class_label: usize,
    pub language: Language,
    pub tokens: Vec<usize>,
    pub seed: u64,
}

/// Held-out captions in a seeded order, both languages, cycled if more
/// samples are requested than captions exist.
pub fn eval_cases(test: &[CorpusEntry], eval: &EvalConfig) -> Vec<EvalCase> {
    let mut pool: Vec<(usize, usize, Language)> = test
        .iter()
        .enumerate()
        .flat_map(|(i, e)| (0..e.captions.len()).flat_map(move |c| [(i, c, Language::A), (i, c, Language::B)]))
        .collect();
    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(eval.sample_seed));
    (0..eval.num_samples)
        .map(|k| {
            let (i, c, lang) = pool[k % pool.len()];
            let e = &test[i];
            EvalCase {
                motion_id: e.motion_id.clone(),
                class_label: e.class_label,
                language: lang,
                tokens: e.captions[c].tokens(lang).to_vec(),
                seed: eval.sample_seed.wrapping_add(k as u64),
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Generated {
    pub motion: MotionSequence,
    pub anchor_id: Option<String>,
}

pub fn sampler_config(schedule: &NoiseSchedule, seed: u64, g: &GuidanceConfig) -> SamplerConfig {
    SamplerConfig {
        clip_gradients: g.clip_gradients,
        ..SamplerConfig::guided(schedule.clone(), seed, g.mode, g.mu, g.eta)
    }
}

/// One sample per case. With zero weights this is exactly the plain sampler.
pub fn generate(sys: &System, cases: &[EvalCase], guidance: &GuidanceConfig) -> Result<Vec<Generated>> {
    cases
        .par_iter()
        .map(|c| {
            let cond = sys.student.encode(&c.tokens)?;
            let cfg = sampler_config(&sys.schedule, c.seed, guidance);
            let s = guided_sample(&sys.denoiser, &sys.reward, &sys.index, &c.tokens, &cond, sys.shape, &cfg, false)?;
            Ok(Generated {
                motion: s.motion,
                anchor_id: s.anchor_id,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metrics: MetricReport,
    /// R_φ + R_m of each clean sample against its caption and retrieved anchor.
    pub final_rewards: Vec<f64>,
    pub mean_final_reward: f64,
}

pub fn metric_config(eval: &EvalConfig) -> MetricConfig {
    MetricConfig {
        pool_size: eval.pool_size,
        diversity_pairs: eval.diversity_pairs,
        seed: eval.metric_seed,
    }
}

pub fn evaluate_samples(sys: &System, cases: &[EvalCase], motions: &[MotionSequence], eval: &EvalConfig) -> Result<Evaluation> {
    if cases.len() != motions.len() {
        return Err(Error::Shape(format!("{} cases but {} samples", cases.len(), motions.len())));
    }
    let rows: Vec<(Vec<f64>, Vec<f64>, f64)> = cases
        .par_iter()
        .zip(motions.par_iter())
        .map(|(c, m)| {
            let z = sys.reward.motion_latent(m, 0)?;
            let zc = sys.reward.text_latent(&c.tokens)?;
            let anchor = retrieve_by_latent(&sys.index, &zc)?;
            let r = cosine(&z, &zc)? + cosine(&z, &anchor.latent)?;
            Ok((z, zc, r))
        })
        .collect::<Result<_>>()?;
    let gen: Vec<Vec<f64>> = rows.iter().map(|r| r.0.clone()).collect();
    let text: Vec<Vec<f64>> = rows.iter().map(|r| r.1.clone()).collect();
    let final_rewards: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let metrics = evaluate(&gen, &text, &sys.real_latents, &metric_config(eval))?;
    Ok(Evaluation {
        mean_final_reward: final_rewards.iter().sum::<f64>() / final_rewards.len() as f64,
        final_rewards,
        metrics,
    })
}

pub fn generate_and_evaluate(sys: &System, cases: &[EvalCase], guidance: &GuidanceConfig, eval: &EvalConfig) -> Result<Evaluation> {
    let motions: Vec<MotionSequence> = generate(sys, cases, guidance)?.into_iter().map(|g| g.motion).collect();
    evaluate_samples(sys, cases, &motions, eval)
}

/// Mean of paired differences `b - a` and its t statistic.
pub fn paired_difference(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Shape("paired comparison needs two equal samples of size >= 2".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    let t = if se > 0.0 { mean / se } else if mean > 0.0 { f64::INFINITY } else { 0.0 };
    Ok((mean, t))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub mu: f64,
    pub eta: f64,
    pub evaluation: Evaluation,
}

/// Evaluates each `(μ, η)` pair on the same cases and seeds.
pub fn sweep(sys: &System, cases: &[EvalCase], base: &GuidanceConfig, points: &[(f64, f64)], eval: &EvalConfig) -> Result<Vec<SweepPoint>> {
    points
        .iter()
        .map(|&(mu, eta)| {
            let g = GuidanceConfig {
                mu,
                eta,
                ..base.clone()
            };
            Ok(SweepPoint {
                mu,
                eta,
                evaluation: generate_and_evaluate(sys, cases, &g, eval)?,
            })
        })
        .collect()
}

pub const SWEEP_CSV_HEADER: &str = "mu,eta,r_precision_1,r_precision_2,r_precision_3,fid,mm_dist,diversity,mean_final_reward";

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut s = String::from(SWEEP_CSV_HEADER);
    s.push('\n');
    for p in points {
        let m = &p.evaluation.metrics;
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            p.mu,
            p.eta,
            m.r_precision[0],
            m.r_precision[1],
            m.r_precision[2],
            m.fid,
            m.mm_dist,
            m.diversity,
            p.evaluation.mean_final_reward
        ));
    }
    s
}
