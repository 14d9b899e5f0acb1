//! Reward-guided sampling.
//!
//! Before the reverse loop, the training motion that best matches the caption
//! is retrieved once as an anchor. Each reverse step then adds the gradient of
//! `μ·R_φ + η·R_m` at the current state. `R_φ` is text–motion cosine and `R_m`
//! is cosine to the anchor latent.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::corpus::CorpusEntry;
use crate::crosslingual::SentenceEmbedding;
use crate::diffusion::{ddpm_step, GuidanceMode, NoisePredictor, ReverseNoise, SamplerConfig};
use crate::error::{Error, Result};
use crate::motion::MotionSequence;
use crate::reward::{cosine, LatentReward};
use crate::schedule::NoiseSchedule;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IndexEntry {
    pub motion_id: String,
    pub latent: Vec<f64>,
}

/// Clean-motion latents of the training set under one frozen reward model.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalIndex {
    entries: Vec<IndexEntry>,
    model_hash: [u8; 32],
}

impl RetrievalIndex {
    /// Reassembles an index, e.g. from a checkpoint.
    pub fn from_parts(entries: Vec<IndexEntry>, model_hash: [u8; 32]) -> Result<Self> {
        let Some(first) = entries.first() else {
            return Err(Error::Parameter("retrieval index needs at least one entry".into()));
        };
        let d = first.latent.len();
        if d == 0 || entries.iter().any(|e| e.latent.len() != d) {
            return Err(Error::Shape("index latents must share one nonzero dimension".into()));
        }
        Ok(Self { entries, model_hash })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn model_hash(&self) -> [u8; 32] {
        self.model_hash
    }

    pub fn ensure_current<M: LatentReward + ?Sized>(&self, model: &M) -> Result<()> {
        if model.fingerprint() != self.model_hash {
            return Err(Error::Parameter(
                "retrieval index was built with a different reward model; rebuild it".into(),
            ));
        }
        Ok(())
    }
}

pub fn build_index<M: LatentReward + ?Sized>(corpus: &[CorpusEntry], model: &M) -> Result<RetrievalIndex> {
    if corpus.is_empty() {
        return Err(Error::Parameter("cannot index an empty corpus".into()));
    }
    let entries = corpus
        .iter()
        .map(|e| {
            Ok(IndexEntry {
                motion_id: e.motion_id.clone(),
                latent: model.motion_latent(&e.motion, 0)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(RetrievalIndex {
        entries,
        model_hash: model.fingerprint(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Anchor {
    pub motion_id: String,
    pub latent: Vec<f64>,
}

/// Index entry maximizing `cos(z_x, z_c)`; ties go to the smallest motion id.
pub fn retrieve_anchor<M: LatentReward + ?Sized>(index: &RetrievalIndex, tokens: &[usize], model: &M) -> Result<Anchor> {
    index.ensure_current(model)?;
    let zc = model.text_latent(tokens)?;
    retrieve_by_latent(index, &zc)
}

pub fn retrieve_by_latent(index: &RetrievalIndex, zc: &[f64]) -> Result<Anchor> {
    let mut best: Option<(f64, &IndexEntry)> = None;
    for e in &index.entries {
        let s = cosine(&e.latent, zc)?;
        best = match best {
            Some((bs, be)) if bs > s || (bs == s && be.motion_id <= e.motion_id) => Some((bs, be)),
            _ => Some((s, e)),
        };
    }
    let (_, e) = best.ok_or_else(|| Error::Parameter("empty retrieval index".into()))?;
    Ok(Anchor {
        motion_id: e.motion_id.clone(),
        latent: e.latent.clone(),
    })
}

/// `cos(z_x, z_anchor)` with `z_x` encoded at step `t`.
pub fn reward_m<M: LatentReward + ?Sized>(model: &M, x: &MotionSequence, t: usize, anchor_latent: &[f64]) -> Result<f64> {
    cosine(&model.motion_latent(x, t)?, anchor_latent)
}

pub fn dual_reward<M: LatentReward + ?Sized>(
    model: &M,
    x: &MotionSequence,
    t: usize,
    tokens: &[usize],
    anchor_latent: &[f64],
    mu: f64,
    eta: f64,
) -> Result<f64> {
    let zx = model.motion_latent(x, t)?;
    let r_phi = cosine(&zx, &model.text_latent(tokens)?)?;
    let r_m = cosine(&zx, anchor_latent)?;
    Ok(mu * r_phi + eta * r_m)
}

/// `log p^r + log Z^r`, which is the reward itself. The normalizer has no
/// gradient in `x`, so it is never computed.
pub fn log_reward_density_unnormalized(dual_reward_value: f64) -> f64 {
    dual_reward_value
}

/// Rewards at one state together with the combined gradient.
#[derive(Clone, Debug)]
pub struct RewardEval {
    pub r_phi: f64,
    pub r_m: f64,
    pub grad: MotionSequence,
}

/// The reward as seen by the sampler.
pub trait GuidanceField {
    fn evaluate(&self, x: &MotionSequence, t: usize, mu: f64, eta: f64) -> Result<RewardEval>;
}

/// `μ·R_φ + η·R_m` for one caption and a fixed anchor.
pub struct DualRewardField<'a, M: ?Sized> {
    pub model: &'a M,
    pub text_latent: Vec<f64>,
    pub anchor_latent: Vec<f64>,
}

impl<M: LatentReward + ?Sized> GuidanceField for DualRewardField<'_, M> {
    fn evaluate(&self, x: &MotionSequence, t: usize, mu: f64, eta: f64) -> Result<RewardEval> {
        let (r_phi, g_phi) = self.model.motion_cosine_grad(x, t, &self.text_latent)?;
        let (r_m, g_m) = self.model.motion_cosine_grad(x, t, &self.anchor_latent)?;
        let grad = g_phi.frames().zip_map(g_m.frames(), |a, b| mu * a + eta * b);
        Ok(RewardEval {
            r_phi,
            r_m,
            grad: MotionSequence::new(grad)?,
        })
    }
}

pub fn dual_reward_grad<M: LatentReward + ?Sized>(
    model: &M,
    x: &MotionSequence,
    t: usize,
    tokens: &[usize],
    anchor_latent: &[f64],
    mu: f64,
    eta: f64,
) -> Result<MotionSequence> {
    let field = DualRewardField {
        model,
        text_latent: model.text_latent(tokens)?,
        anchor_latent: anchor_latent.to_vec(),
    };
    Ok(field.evaluate(x, t, mu, eta)?.grad)
}

/// One reverse step followed by the reward shift for `mode`.
///
/// `grad` is the (possibly clipped) reward gradient at `x_t`.
pub fn guided_update(
    vanilla: &MotionSequence,
    grad: &MotionSequence,
    t: usize,
    schedule: &NoiseSchedule,
    mode: GuidanceMode,
) -> Result<MotionSequence> {
    vanilla.ensure_same_shape(grad, "guided step")?;
    let scale = match mode {
        GuidanceMode::None => return Ok(vanilla.clone()),
        GuidanceMode::Eq15Unweighted => 1.0,
        GuidanceMode::Eq14Weighted => schedule.beta(t)? / schedule.alpha(t)?.sqrt(),
    };
    let out = vanilla.frames().zip_map(grad.frames(), |v, g| v + scale * g);
    MotionSequence::new(out).map_err(|_| Error::NonFinite(format!("guided state at t={t}")))
}

/// Rescales `grad` in place so its norm is at most `10·√β_t·√(N·D)`; returns the original norm.
pub fn clip_reward_gradient(grad: &mut MotionSequence, beta: f64) -> f64 {
    let norm = grad.frames().norm();
    let max = 10.0 * beta.sqrt() * (grad.frames().len() as f64).sqrt();
    if norm > max {
        let k = max / norm;
        grad.frames_mut().data_mut().iter_mut().for_each(|v| *v *= k);
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub t: usize,
    pub r_phi: f64,
    pub r_m: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct GuidedSample {
    pub motion: MotionSequence,
    pub anchor_id: Option<String>,
    pub trace: Vec<TraceRow>,
}

/// Reverse loop with reward shifts from an arbitrary field.
///
/// When `cfg` carries no effective guidance, no reward is evaluated and the
/// result is bitwise the plain sampler's. With `trace` set, rewards are still
/// recorded for every step without affecting the state.
pub fn guided_sample_field<P, F>(
    net: &P,
    field: &F,
    cond: &SentenceEmbedding,
    shape: (usize, usize),
    cfg: &SamplerConfig,
    trace: bool,
) -> Result<(MotionSequence, Vec<TraceRow>)>
where
    P: NoisePredictor + ?Sized,
    F: GuidanceField + ?Sized,
{
    cfg.validate()?;
    let guided = cfg.is_guided();
    let mut noise = ReverseNoise::new(cfg.seed, shape);
    let mut x = noise.initial();
    let mut rows = Vec::new();
    for t in (1..=cfg.schedule.steps()).rev() {
        let z = noise.step(t);
        let eval = if guided || trace {
            let (mu, eta) = if guided { (cfg.mu, cfg.eta) } else { (0.0, 0.0) };
            let mut e = field.evaluate(&x, t, mu, eta)?;
            let norm = if cfg.clip_gradients && guided {
                clip_reward_gradient(&mut e.grad, cfg.schedule.beta(t)?)
            } else {
                e.grad.frames().norm()
            };
            if trace {
                rows.push(TraceRow {
                    t,
                    r_phi: e.r_phi,
                    r_m: e.r_m,
                    grad_norm: norm,
                });
            }
            Some((e, norm))
        } else {
            None
        };
        let vanilla = ddpm_step(net, &x, t, cond, &cfg.schedule, &z)?;
        x = match eval {
            Some((e, norm)) if guided => guided_update(&vanilla, &e.grad, t, &cfg.schedule, cfg.guidance_mode)
                .map_err(|_| {
                    Error::NonFinite(format!(
                        "guided sampling at t={t}, mode {:?}, gradient norm {norm:.4e}",
                        cfg.guidance_mode
                    ))
                })?,
            _ => vanilla,
        };
    }
    Ok((x, rows))
}

/// Full guided sampler: retrieves the anchor once, then runs the reverse loop.
pub fn guided_sample<P, M>(
    net: &P,
    model: &M,
    index: &RetrievalIndex,
    tokens: &[usize],
    cond: &SentenceEmbedding,
    shape: (usize, usize),
    cfg: &SamplerConfig,
    trace: bool,
) -> Result<GuidedSample>
where
    P: NoisePredictor + ?Sized,
    M: LatentReward + ?Sized,
{
    cfg.validate()?;
    if !cfg.is_guided() && !trace {
        let (motion, _) = guided_sample_field(net, &NoField, cond, shape, cfg, false)?;
        return Ok(GuidedSample {
            motion,
            anchor_id: None,
            trace: Vec::new(),
        });
    }
    index.ensure_current(model)?;
    let text_latent = model.text_latent(tokens)?;
    let anchor = retrieve_by_latent(index, &text_latent)?;
    let field = DualRewardField {
        model,
        text_latent,
        anchor_latent: anchor.latent,
    };
    let (motion, rows) = guided_sample_field(net, &field, cond, shape, cfg, trace)?;
    Ok(GuidedSample {
        motion,
        anchor_id: Some(anchor.motion_id),
        trace: rows,
    })
}

/// Field used when guidance is off; never evaluated.
struct NoField;

impl GuidanceField for NoField {
    fn evaluate(&self, _x: &MotionSequence, _t: usize, _mu: f64, _eta: f64) -> Result<RewardEval> {
        Err(Error::Parameter("no reward field configured".into()))
    }
}

pub fn write_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "t,r_phi,r_m,grad_norm")?;
    for r in rows {
        writeln!(f, "{},{},{},{}", r.t, r.r_phi, r.r_m, r.grad_norm)?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Matrix;
    use crate::diffusion::sample;

    struct ZeroNet;

    impl NoisePredictor for ZeroNet {
        fn predict(&self, x_t: &MotionSequence, _t: usize, _c: &SentenceEmbedding) -> Result<MotionSequence> {
            Ok(MotionSequence::zeros(x_t.num_frames(), x_t.feature_dim()))
        }
    }

    /// `R(x) = a·Σx`, whose gradient is the constant `a` everywhere.
    struct Linear(f64);

    impl GuidanceField for Linear {
        fn evaluate(&self, x: &MotionSequence, _t: usize, mu: f64, _eta: f64) -> Result<RewardEval> {
            let (n, d) = x.shape();
            Ok(RewardEval {
                r_phi: self.0 * x.frames().sum(),
                r_m: 0.0,
                grad: MotionSequence::new(Matrix::filled(n, d, mu * self.0))?,
            })
        }
    }

    /// Fixed latents for the text, the anchor and a single-frame motion equal to its latent.
    struct Table;

    impl LatentReward for Table {
        fn latent_dim(&self) -> usize {
            2
        }
        fn text_latent(&self, tokens: &[usize]) -> Result<Vec<f64>> {
            Ok(vec![tokens[0] as f64, 1.0])
        }
        fn motion_latent(&self, x: &MotionSequence, _t: usize) -> Result<Vec<f64>> {
            Ok(x.frames().row(0).to_vec())
        }
        fn motion_cosine_grad(&self, x: &MotionSequence, t: usize, target: &[f64]) -> Result<(f64, MotionSequence)> {
            let z = self.motion_latent(x, t)?;
            let c = cosine(&z, target)?;
            let nz = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nt = target.iter().map(|v| v * v).sum::<f64>().sqrt();
            let g = z.iter().zip(target).map(|(zi, ti)| ti / (nz * nt) - c * zi / (nz * nz)).collect();
            Ok((c, MotionSequence::from_rows(&[g])?))
        }
    }

    fn entry(id: &str, v: [f64; 2]) -> CorpusEntry {
        CorpusEntry {
            motion_id: id.into(),
            motion: MotionSequence::from_rows(&[v.to_vec()]).unwrap(),
            captions: vec![],
            class_label: 0,
        }
    }

    fn cond() -> SentenceEmbedding {
        SentenceEmbedding::new(vec![0.0; 3]).unwrap()
    }

    #[test]
    fn index_and_tie_break() {
        let corpus = vec![entry("b", [1.0, 1.0]), entry("a", [2.0, 2.0]), entry("c", [0.0, 1.0])];
        let idx = build_index(&corpus, &Table).unwrap();
        assert_eq!(idx.len(), 3);
        assert_eq!(idx, build_index(&corpus, &Table).unwrap());
        for (e, c) in idx.entries().iter().zip(&corpus) {
            assert_eq!(e.latent, Table.motion_latent(&c.motion, 0).unwrap());
        }
        // Text latent (1, 1) is parallel to both "a" and "b".
        let a = retrieve_anchor(&idx, &[1], &Table).unwrap();
        assert_eq!(a.motion_id, "a");
        assert_eq!(a, retrieve_anchor(&idx, &[1], &Table).unwrap());
        assert_eq!(retrieve_anchor(&idx, &[0], &Table).unwrap().motion_id, "c");
        assert_eq!(build_index(&corpus[..1], &Table).unwrap().len(), 1);
        assert!(build_index(&[], &Table).is_err());
    }

    #[test]
    fn reward_reductions() {
        let x = MotionSequence::from_rows(&[vec![0.3, 0.4]]).unwrap();
        let anchor = vec![0.3, 0.4];
        assert!((reward_m(&Table, &x, 0, &anchor).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(dual_reward(&Table, &x, 5, &[2], &anchor, 0.0, 0.0).unwrap(), 0.0);
        let phi = crate::reward::reward_phi(&Table, &x, 5, &[2]).unwrap();
        assert_eq!(dual_reward(&Table, &x, 5, &[2], &anchor, 0.7, 0.0).unwrap(), 0.7 * phi);
        let rm = reward_m(&Table, &x, 5, &anchor).unwrap();
        let both = dual_reward(&Table, &x, 5, &[2], &anchor, 1.0, 1.0).unwrap();
        assert!((both - (phi + rm)).abs() < 1e-15);
        assert_eq!(log_reward_density_unnormalized(0.0), 0.0);
        assert_eq!(log_reward_density_unnormalized(1.0).exp(), 1f64.exp());

        let zero = dual_reward_grad(&Table, &x, 5, &[2], &[1.0, 0.0], 0.0, 0.0).unwrap();
        assert!(zero.frames().data().iter().all(|&v| v == 0.0));
        let g1 = dual_reward_grad(&Table, &x, 5, &[2], &[1.0, 0.0], 1.0, 0.5).unwrap();
        let g2 = dual_reward_grad(&Table, &x, 5, &[2], &[1.0, 0.0], 2.0, 0.5).unwrap();
        let g3 = dual_reward_grad(&Table, &x, 5, &[2], &[1.0, 0.0], 3.0, 0.5).unwrap();
        for k in 0..2 {
            let (a, b, c) = (g1.frames().data()[k], g2.frames().data()[k], g3.frames().data()[k]);
            assert!(((c - b) - (b - a)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_guidance_is_bitwise_plain() {
        let s = NoiseSchedule::linear(6, 1e-3, 0.2).unwrap();
        for seed in 0..5 {
            for mode in [GuidanceMode::Eq14Weighted, GuidanceMode::Eq15Unweighted] {
                let cfg = SamplerConfig::guided(s.clone(), seed, mode, 0.0, 0.0);
                let (g, _) = guided_sample_field(&ZeroNet, &Linear(1.0), &cond(), (3, 2), &cfg, true).unwrap();
                let p = sample(&ZeroNet, &cond(), (3, 2), &SamplerConfig::unguided(s.clone(), seed)).unwrap();
                let bits = |m: &MotionSequence| m.frames().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(&g), bits(&p));
            }
        }
    }

    fn linear_recurrence(s: &NoiseSchedule, seed: u64, a: f64, weighted: bool) -> (Vec<f64>, f64) {
        let mut noise = ReverseNoise::new(seed, (2, 2));
        let mut x = noise.initial().frames().data().to_vec();
        let mut scale_sum = 0.0;
        for t in (1..=s.steps()).rev() {
            let z = noise.step(t);
            let (b, al) = (s.beta(t).unwrap(), s.alpha(t).unwrap());
            let k = if weighted { b / al.sqrt() } else { 1.0 };
            scale_sum += k;
            for (xi, zi) in x.iter_mut().zip(z.frames().data()) {
                *xi = (*xi + b.sqrt() * zi) / al.sqrt() + k * a;
            }
        }
        (x, scale_sum)
    }

    #[test]
    fn linear_reward_matches_recurrence() {
        let s = NoiseSchedule::linear(8, 1e-2, 0.3).unwrap();
        for (mode, weighted) in [(GuidanceMode::Eq15Unweighted, false), (GuidanceMode::Eq14Weighted, true)] {
            let mut cfg = SamplerConfig::guided(s.clone(), 4, mode, 1.0, 0.0);
            cfg.clip_gradients = false;
            let (x, _) = guided_sample_field(&ZeroNet, &Linear(0.25), &cond(), (2, 2), &cfg, false).unwrap();
            let (expected, scales) = linear_recurrence(&s, 4, 0.25, weighted);
            for (a, b) in x.frames().data().iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12);
            }
            let direct: f64 = (1..=8)
                .map(|t| if weighted { s.beta(t).unwrap() / s.alpha(t).unwrap().sqrt() } else { 1.0 })
                .sum();
            assert!((scales - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn mode_relation_at_one_step() {
        let s = NoiseSchedule::linear(5, 1e-2, 0.3).unwrap();
        let vanilla = MotionSequence::from_rows(&[vec![0.5, -1.0]]).unwrap();
        let grad = MotionSequence::from_rows(&[vec![0.2, 0.7]]).unwrap();
        let a = guided_update(&vanilla, &grad, 3, &s, GuidanceMode::Eq14Weighted).unwrap();
        let b = guided_update(&vanilla, &grad, 3, &s, GuidanceMode::Eq15Unweighted).unwrap();
        let k = s.beta(3).unwrap() / s.alpha(3).unwrap().sqrt() - 1.0;
        for i in 0..2 {
            let d = a.frames().data()[i] - b.frames().data()[i];
            assert!((d - k * grad.frames().data()[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = MotionSequence::new(Matrix::filled(2, 2, 10.0)).unwrap();
        let before = clip_reward_gradient(&mut g, 0.01);
        assert_eq!(before, 20.0);
        assert!((g.frames().norm() - 10.0 * 0.1 * 2.0).abs() < 1e-12);
        let mut small = MotionSequence::new(Matrix::filled(2, 2, 0.01)).unwrap();
        clip_reward_gradient(&mut small, 0.01);
        assert_eq!(small.frames().data(), &[0.01; 4]);
    }

    #[test]
    fn trace_csv_has_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("trace.csv");
        let rows = vec![TraceRow {
            t: 3,
            r_phi: 0.5,
            r_m: 0.25,
            grad_norm: 1.0,
        }];
        write_trace_csv(&p, &rows).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "t,r_phi,r_m,grad_norm\n3,0.5,0.25,1\n");
    }
}
