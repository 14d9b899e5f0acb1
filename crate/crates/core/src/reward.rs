//! Step-aware text–motion reward model.
//!
//! A motion branch reads `[e_t, x^1, …, x^N]`, where `e_t` marks the diffusion
//! step (0 for clean motion). A text branch reads caption tokens, and a decoder
//! maps either latent back to frames. The latents are diagonal Gaussians, and
//! rewards are cosines between their means.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    clip_grad_norm, sinusoidal_embedding, AdamW, Graph, LayerNorm, Linear, Matrix, ParamId,
    ParamStore, Tape, TransformerBlock, Var, WarmupCosine,
};
use crate::corpus::{CorpusEntry, Language};
use crate::crosslingual::check_tokens;
use crate::error::{Error, Result};
use crate::motion::MotionSequence;
use crate::schedule::{forward_noise, NoiseSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardModelConfig {
    pub feature_dim: usize,
    pub max_frames: usize,
    pub vocab_size: usize,
    pub max_caption_len: usize,
    pub latent_dim: usize,
    pub model_dim: usize,
    pub motion_layers: usize,
    pub text_layers: usize,
    pub decoder_layers: usize,
    pub num_heads: usize,
    pub max_timestep: usize,
}

impl RewardModelConfig {
    pub fn desk(feature_dim: usize, max_frames: usize, vocab_size: usize, max_timestep: usize) -> Self {
        Self {
            feature_dim,
            max_frames,
            vocab_size,
            max_caption_len: 16,
            latent_dim: 16,
            model_dim: 32,
            motion_layers: 2,
            text_layers: 1,
            decoder_layers: 2,
            num_heads: 4,
            max_timestep,
        }
    }
}

/// Mean and log standard deviation of a diagonal Gaussian latent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionalLatent {
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardHyper {
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
    pub neg_threshold: f64,
    pub noisy_prob: f64,
}

impl Default for RewardHyper {
    fn default() -> Self {
        Self {
            lambda1: 1e-5,
            lambda2: 1e-5,
            tau: 0.1,
            neg_threshold: 0.9,
            noisy_prob: 0.5,
        }
    }
}

impl RewardHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Parameter("tau must be positive".into()));
        }
        if !(-1.0..=1.0).contains(&self.neg_threshold) {
            return Err(Error::Parameter("neg_threshold must lie in [-1, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.noisy_prob) {
            return Err(Error::Parameter("noisy_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Heads {
    ln: LayerNorm,
    mu: Linear,
    log_sigma: Linear,
}

impl Heads {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, dz: usize, rng: &mut R) -> Self {
        Self {
            ln: LayerNorm::new(store, &format!("{name}.ln"), d),
            mu: Linear::new(store, &format!("{name}.mu"), d, dz, true, 1.0, rng),
            log_sigma: Linear::new(store, &format!("{name}.log_sigma"), d, dz, true, 0.1, rng),
        }
    }

    fn forward(&self, g: &mut Graph, pooled: Var) -> (Var, Var) {
        let h = self.ln.forward(g, pooled);
        (self.mu.forward(g, h), self.log_sigma.forward(g, h))
    }
}

/// Motion encoder, text encoder and decoder sharing one parameter store.
#[derive(Clone, Debug)]
pub struct RewardModel {
    config: RewardModelConfig,
    store: ParamStore,
    m_in: Linear,
    m_pos: ParamId,
    m_time: Linear,
    m_blocks: Vec<TransformerBlock>,
    m_heads: Heads,
    t_embed: ParamId,
    t_pos: ParamId,
    t_blocks: Vec<TransformerBlock>,
    t_heads: Heads,
    d_queries: ParamId,
    d_latent: Linear,
    d_blocks: Vec<TransformerBlock>,
    d_ln: LayerNorm,
    d_out: Linear,
}

/// Graph nodes of one encoded latent.
#[derive(Clone, Copy, Debug)]
pub struct LatentVars {
    pub mu: Var,
    pub log_sigma: Var,
}

impl RewardModel {
    pub fn new(config: RewardModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let d = config.model_dim;
        let h = config.num_heads;
        let blocks = |s: &mut ParamStore, name: &str, n: usize, rng: &mut ChaCha8Rng| -> Vec<TransformerBlock> {
            (0..n)
                .map(|i| TransformerBlock::new(s, &format!("{name}{i}"), d, h, rng))
                .collect()
        };
        let m_in = Linear::new(&mut s, "motion.in", config.feature_dim, d, true, 1.0, &mut rng);
        let m_pos = s.add("motion.pos", Matrix::randn(config.max_frames, d, 0.1, &mut rng));
        let m_time = Linear::new(&mut s, "motion.time", d, d, true, 1.0, &mut rng);
        let m_blocks = blocks(&mut s, "motion.block", config.motion_layers, &mut rng);
        let m_heads = Heads::new(&mut s, "motion.head", d, config.latent_dim, &mut rng);
        let t_embed = s.add("text.embed", Matrix::randn(config.vocab_size, d, 1.0, &mut rng));
        let t_pos = s.add("text.pos", Matrix::randn(config.max_caption_len, d, 0.1, &mut rng));
        let t_blocks = blocks(&mut s, "text.block", config.text_layers, &mut rng);
        let t_heads = Heads::new(&mut s, "text.head", d, config.latent_dim, &mut rng);
        let d_queries = s.add("decoder.queries", Matrix::randn(config.max_frames, d, 0.5, &mut rng));
        let d_latent = Linear::new(&mut s, "decoder.latent", config.latent_dim, d, true, 1.0, &mut rng);
        let d_blocks = blocks(&mut s, "decoder.block", config.decoder_layers, &mut rng);
        let d_ln = LayerNorm::new(&mut s, "decoder.ln", d);
        let d_out = Linear::new(&mut s, "decoder.out", d, config.feature_dim, true, 1.0, &mut rng);
        Self {
            config,
            store: s,
            m_in,
            m_pos,
            m_time,
            m_blocks,
            m_heads,
            t_embed,
            t_pos,
            t_blocks,
            t_heads,
            d_queries,
            d_latent,
            d_blocks,
            d_ln,
            d_out,
        }
    }

    pub fn config(&self) -> &RewardModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn check_motion(&self, x: &MotionSequence, t: usize) -> Result<()> {
        if t > self.config.max_timestep {
            return Err(Error::Timestep {
                t,
                max: self.config.max_timestep,
            });
        }
        let (n, d) = x.shape();
        if d != self.config.feature_dim || n > self.config.max_frames {
            return Err(Error::Shape(format!(
                "reward model expects up to {} frames of {} features, got {n}x{d}",
                self.config.max_frames, self.config.feature_dim
            )));
        }
        Ok(())
    }

    fn check_text(&self, tokens: &[usize]) -> Result<()> {
        check_tokens(tokens, self.config.vocab_size, self.config.max_caption_len)
    }

    /// Motion branch on the graph. `x` is an `N × D` node.
    pub fn motion_forward(&self, g: &mut Graph, x: Var, t: usize) -> LatentVars {
        let n = g.value(x).rows();
        let h = self.m_in.forward(g, x);
        let pos = g.p(self.m_pos);
        let pos = g.slice_rows(pos, 0, n);
        let h = g.add(h, pos);
        let e = g.constant(Matrix::row_vector(sinusoidal_embedding(t as f64, self.config.model_dim)));
        let e = self.m_time.forward(g, e);
        let mut h = g.concat_rows(&[e, h]);
        for b in &self.m_blocks {
            h = b.forward(g, h);
        }
        let pooled = g.mean_rows(h);
        let (mu, log_sigma) = self.m_heads.forward(g, pooled);
        LatentVars { mu, log_sigma }
    }

    /// Text branch on the graph, also returning the pre-projection sentence feature.
    pub fn text_forward(&self, g: &mut Graph, tokens: &[usize]) -> (LatentVars, Var) {
        let table = g.p(self.t_embed);
        let x = g.gather_rows(table, tokens);
        let pos = g.p(self.t_pos);
        let pos = g.slice_rows(pos, 0, tokens.len());
        let mut h = g.add(x, pos);
        for b in &self.t_blocks {
            h = b.forward(g, h);
        }
        let feature = g.mean_rows(h);
        let (mu, log_sigma) = self.t_heads.forward(g, feature);
        (LatentVars { mu, log_sigma }, feature)
    }

    /// Decodes a `1 × d_z` latent into `n` frames.
    pub fn decode_forward(&self, g: &mut Graph, z: Var, n: usize) -> Var {
        let q = g.p(self.d_queries);
        let q = g.slice_rows(q, 0, n);
        let zl = self.d_latent.forward(g, z);
        let mut h = g.add_row(q, zl);
        for b in &self.d_blocks {
            h = b.forward(g, h);
        }
        let h = self.d_ln.forward(g, h);
        self.d_out.forward(g, h)
    }

    fn read_latent(g: &Graph, l: LatentVars) -> DistributionalLatent {
        DistributionalLatent {
            mu: g.value(l.mu).data().to_vec(),
            log_sigma: g.value(l.log_sigma).data().to_vec(),
        }
    }

    pub fn encode_motion(&self, x: &MotionSequence, t: usize) -> Result<DistributionalLatent> {
        self.check_motion(x, t)?;
        let mut g = Graph::new(&self.store, false);
        let xv = g.constant(x.frames().clone());
        let l = self.motion_forward(&mut g, xv, t);
        Ok(Self::read_latent(&g, l))
    }

    pub fn encode_text(&self, tokens: &[usize]) -> Result<DistributionalLatent> {
        self.check_text(tokens)?;
        let mut g = Graph::new(&self.store, false);
        let (l, _) = self.text_forward(&mut g, tokens);
        Ok(Self::read_latent(&g, l))
    }

    /// Mean of the text branch's contextual states before projection.
    pub fn sentence_feature(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        self.check_text(tokens)?;
        let mut g = Graph::new(&self.store, false);
        let (_, f) = self.text_forward(&mut g, tokens);
        Ok(g.value(f).data().to_vec())
    }

    pub fn decode(&self, z: &[f64], num_frames: usize) -> Result<MotionSequence> {
        if z.len() != self.config.latent_dim || num_frames == 0 || num_frames > self.config.max_frames {
            return Err(Error::Shape("decoder latent or frame count".into()));
        }
        let mut g = Graph::new(&self.store, false);
        let zv = g.constant(Matrix::row_vector(z.to_vec()));
        let out = self.decode_forward(&mut g, zv, num_frames);
        MotionSequence::new(g.value(out).clone())
    }
}

/// Differentiable cosine rewards over a latent space.
///
/// Guidance only needs these four methods, so tests can swap in closed-form encoders.
pub trait LatentReward {
    fn latent_dim(&self) -> usize;
    fn text_latent(&self, tokens: &[usize]) -> Result<Vec<f64>>;
    fn motion_latent(&self, x: &MotionSequence, t: usize) -> Result<Vec<f64>>;
    /// `cos(z_x, target)` and its gradient with respect to `x`, with `target` held constant.
    fn motion_cosine_grad(&self, x: &MotionSequence, t: usize, target: &[f64]) -> Result<(f64, MotionSequence)>;
    /// Identifies the parameters so caches built from this model can be checked.
    fn fingerprint(&self) -> [u8; 32] {
        [0; 32]
    }
}

pub(crate) fn ensure_nonzero(v: &[f64], what: &str) -> Result<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 1e-12) {
        return Err(Error::Degenerate(format!("{what} latent has zero norm")));
    }
    Ok(n)
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("cosine of {} and {} dims", a.len(), b.len())));
    }
    let na = ensure_nonzero(a, "first")?;
    let nb = ensure_nonzero(b, "second")?;
    let c = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
    Ok(c.clamp(-1.0, 1.0))
}

impl LatentReward for RewardModel {
    fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn fingerprint(&self) -> [u8; 32] {
        self.store.content_hash()
    }

    fn text_latent(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        Ok(self.encode_text(tokens)?.mu)
    }

    fn motion_latent(&self, x: &MotionSequence, t: usize) -> Result<Vec<f64>> {
        Ok(self.encode_motion(x, t)?.mu)
    }

    fn motion_cosine_grad(&self, x: &MotionSequence, t: usize, target: &[f64]) -> Result<(f64, MotionSequence)> {
        self.check_motion(x, t)?;
        if target.len() != self.config.latent_dim {
            return Err(Error::Shape("target latent dim".into()));
        }
        ensure_nonzero(target, "target")?;
        let mut g = Graph::new(&self.store, false);
        let xv = g.input(x.frames().clone());
        let l = self.motion_forward(&mut g, xv, t);
        ensure_nonzero(g.value(l.mu).data(), "motion")?;
        let tv = g.constant(Matrix::row_vector(target.to_vec()));
        let c = g.cosine(l.mu, tv);
        let value = g.scalar(c);
        let tape: Tape = g.into_tape();
        let mut grads = tape.backward(c);
        let grad = grads.take(xv).unwrap_or_else(|| Matrix::zeros(x.num_frames(), x.feature_dim()));
        Ok((value.clamp(-1.0, 1.0), MotionSequence::new(grad)?))
    }
}

/// `cos(z_x, z_c)` using latent means.
pub fn reward_phi<M: LatentReward + ?Sized>(model: &M, x: &MotionSequence, t: usize, tokens: &[usize]) -> Result<f64> {
    cosine(&model.motion_latent(x, t)?, &model.text_latent(tokens)?)
}

/// `R_φ` and its gradient with respect to `x`, with the text latent held constant.
pub fn reward_phi_grad<M: LatentReward + ?Sized>(
    model: &M,
    x: &MotionSequence,
    t: usize,
    tokens: &[usize],
) -> Result<(f64, MotionSequence)> {
    let zc = model.text_latent(tokens)?;
    model.motion_cosine_grad(x, t, &zc)
}

/// `KL(N(μ1, σ1²) ‖ N(μ2, σ2²))` summed over coordinates, as a graph node.
fn gaussian_kl(g: &mut Graph, a: LatentVars, b: LatentVars) -> Var {
    let two_a = g.scale(a.log_sigma, 2.0);
    let var_a = g.exp(two_a);
    let dmu = g.sub(a.mu, b.mu);
    let dmu2 = g.mul(dmu, dmu);
    let num = g.add(var_a, dmu2);
    let neg_two_b = g.scale(b.log_sigma, -2.0);
    let inv_var_b = g.exp(neg_two_b);
    let ratio = g.mul(num, inv_var_b);
    let ratio = g.scale(ratio, 0.5);
    let log_ratio = g.sub(b.log_sigma, a.log_sigma);
    let per = g.add(log_ratio, ratio);
    let per = g.offset(per, -0.5);
    g.sum_all(per)
}

fn standard_normal_latent(g: &mut Graph, dim: usize) -> LatentVars {
    LatentVars {
        mu: g.constant(Matrix::zeros(1, dim)),
        log_sigma: g.constant(Matrix::zeros(1, dim)),
    }
}

/// Closed-form diagonal Gaussian KL on plain values.
pub fn gaussian_kl_value(a: &DistributionalLatent, b: &DistributionalLatent) -> f64 {
    a.mu.iter()
        .zip(&a.log_sigma)
        .zip(b.mu.iter().zip(&b.log_sigma))
        .map(|((m1, l1), (m2, l2))| l2 - l1 + ((2.0 * l1).exp() + (m1 - m2).powi(2)) / (2.0 * (2.0 * l2).exp()) - 0.5)
        .sum()
}

/// Inputs of the representation objective for one batch item, already on the graph.
pub struct RepresentationItem {
    pub text: LatentVars,
    pub motion: LatentVars,
    /// Noise draws for the reparameterized samples, `1 × d_z` each.
    pub xi_text: Matrix,
    pub xi_motion: Matrix,
    pub clean: Matrix,
}

/// Reconstruction + Gaussian regularizers + latent agreement, averaged over items.
pub fn representation_loss(
    g: &mut Graph,
    model: &RewardModel,
    items: &[RepresentationItem],
    hyper: &RewardHyper,
) -> Var {
    let dz = model.config.latent_dim;
    let mut terms = Vec::with_capacity(items.len());
    for it in items {
        let sample = |g: &mut Graph, l: LatentVars, xi: &Matrix| {
            let s = g.exp(l.log_sigma);
            let xi = g.constant(xi.clone());
            let noise = g.mul(s, xi);
            g.add(l.mu, noise)
        };
        let zt = sample(g, it.text, &it.xi_text);
        let zm = sample(g, it.motion, &it.xi_motion);
        let n = it.clean.rows();
        let target = g.constant(it.clean.clone());
        let rec_t = model.decode_forward(g, zt, n);
        let rec_m = model.decode_forward(g, zm, n);
        let lt = g.smooth_l1_mean(rec_t, target);
        let lm = g.smooth_l1_mean(rec_m, target);
        let recons = g.add(lt, lm);

        let prior = standard_normal_latent(g, dz);
        let k1 = gaussian_kl(g, it.motion, prior);
        let k2 = gaussian_kl(g, it.text, prior);
        let k3 = gaussian_kl(g, it.text, it.motion);
        let k4 = gaussian_kl(g, it.motion, it.text);
        let kl = g.concat_cols(&[k1, k2, k3, k4]);
        let kl = g.sum_all(kl);
        let kl = g.scale(kl, hyper.lambda1);
        let emb = g.smooth_l1_mean(zt, zm);
        let emb = g.scale(emb, hyper.lambda2);
        let total = g.add(recons, kl);
        terms.push(g.add(total, emb));
    }
    let cat = g.concat_cols(&terms);
    g.mean_all(cat)
}

/// Mask row `i` of the negatives whose sentence features are too similar to item `i`.
fn negative_keep_mask(features: &Matrix, threshold: f64) -> Vec<bool> {
    let n = features.rows();
    let norms: Vec<f64> = (0..n)
        .map(|i| features.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut keep = vec![true; n * n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let dot: f64 = features.row(i).iter().zip(features.row(j)).map(|(a, b)| a * b).sum();
            let c = dot / (norms[i] * norms[j]).max(1e-300);
            if c > threshold {
                keep[i * n + j] = false;
            }
        }
    }
    keep
}

/// Symmetric InfoNCE over a cosine matrix node with negative filtering.
pub fn contrastive_loss_node(g: &mut Graph, sim: Var, features: &Matrix, hyper: &RewardHyper) -> Var {
    let n = g.value(sim).rows();
    let keep = negative_keep_mask(features, hyper.neg_threshold);
    let scaled = g.scale(sim, 1.0 / hyper.tau);
    let rows = g.log_softmax_rows(scaled, Some(keep.clone()));
    let st = g.transpose(scaled);
    let keep_t: Vec<bool> = (0..n * n).map(|k| keep[(k % n) * n + k / n]).collect();
    let cols = g.log_softmax_rows(st, Some(keep_t));
    let dr = g.diag(rows);
    let dc = g.diag(cols);
    let both = g.add(dr, dc);
    let s = g.sum_all(both);
    g.scale(s, -1.0 / (2.0 * n as f64))
}

/// Value of the contrastive objective for a given similarity matrix.
pub fn contrastive_loss(sim: &Matrix, sentence_features: &Matrix, hyper: &RewardHyper) -> Result<f64> {
    let (n, m) = sim.shape();
    if n == 0 || n != m || sentence_features.rows() != n {
        return Err(Error::Shape("contrastive loss needs a square N×N matrix and N features".into()));
    }
    let store = ParamStore::new();
    let mut g = Graph::new(&store, false);
    let s = g.constant(sim.clone());
    let l = contrastive_loss_node(&mut g, s, sentence_features, hyper);
    Ok(g.scalar(l))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for RewardTraining {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 2e-3,
            warmup_steps: 50,
            weight_decay: 0.0,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RewardReport {
    pub epoch_contrastive: Vec<f64>,
    pub epoch_representation: Vec<f64>,
    pub steps: usize,
}

/// Trains all three parts of `model` on clean and noised motions.
///
/// Each batch item picks one caption uniformly over the entry's captions in both
/// languages. With probability `noisy_prob` the motion is noised at a uniform
/// step and tagged with it; otherwise it is clean and tagged 0.
pub fn train_reward(
    model: &mut RewardModel,
    entries: &[CorpusEntry],
    schedule: &NoiseSchedule,
    hyper: &RewardHyper,
    training: &RewardTraining,
) -> Result<RewardReport> {
    hyper.validate()?;
    if entries.is_empty() || training.batch_size == 0 {
        return Err(Error::Parameter("need entries and a positive batch size".into()));
    }
    if schedule.steps() > model.config.max_timestep {
        return Err(Error::Parameter("schedule longer than the model's max_timestep".into()));
    }
    for e in entries {
        model.check_motion(&e.motion, 0)?;
        if e.captions.is_empty() {
            return Err(Error::Parameter(format!("{} has no captions", e.motion_id)));
        }
        for c in &e.captions {
            model.check_text(&c.tokens_lang_a)?;
            model.check_text(&c.tokens_lang_b)?;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(training.seed);
    let steps_per_epoch = entries.len().div_ceil(training.batch_size);
    let sched = WarmupCosine {
        peak_lr: training.lr,
        warmup_steps: training.warmup_steps,
        total_steps: steps_per_epoch * training.epochs,
    };
    let mut opt = AdamW::new(&model.store, training.weight_decay);
    let mut order: Vec<usize> = (0..entries.len()).collect();
    let mut report = RewardReport::default();
    let mut initial: Option<f64> = None;
    let mut above = 0;
    let dz = model.config.latent_dim;

    for epoch in 0..training.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let (mut c_sum, mut r_sum) = (0.0, 0.0);
        for batch in order.chunks(training.batch_size) {
            let mut g = Graph::new(&model.store, true);
            let mut items = Vec::with_capacity(batch.len());
            let mut feats = Vec::with_capacity(batch.len());
            let mut mus_t = Vec::with_capacity(batch.len());
            let mut mus_m = Vec::with_capacity(batch.len());
            for &i in batch {
                let e = &entries[i];
                let cap = &e.captions[rng.random_range(0..e.captions.len())];
                let lang = if rng.random_bool(0.5) { Language::A } else { Language::B };
                let (t, x) = if rng.random_bool(hyper.noisy_prob) {
                    let t = rng.random_range(1..=schedule.steps());
                    let (n, d) = e.motion.shape();
                    let eps = MotionSequence::standard_normal(n, d, &mut rng);
                    (t, forward_noise(&e.motion, t, &eps, schedule)?)
                } else {
                    (0, e.motion.clone())
                };
                let (text, feat) = model.text_forward(&mut g, cap.tokens(lang));
                let xv = g.constant(x.into_matrix());
                let motion = model.motion_forward(&mut g, xv, t);
                feats.push(g.value(feat).data().to_vec());
                mus_t.push(text.mu);
                mus_m.push(motion.mu);
                items.push(RepresentationItem {
                    text,
                    motion,
                    xi_text: Matrix::randn(1, dz, 1.0, &mut rng),
                    xi_motion: Matrix::randn(1, dz, 1.0, &mut rng),
                    clean: e.motion.frames().clone(),
                });
            }
            let features = Matrix::from_rows(&feats);
            let zt = g.concat_rows(&mus_t);
            let zm = g.concat_rows(&mus_m);
            let zt = g.l2_normalize_rows(zt);
            let zm = g.l2_normalize_rows(zm);
            let sim = g.matmul_t(zt, zm);
            let lc = contrastive_loss_node(&mut g, sim, &features, hyper);
            let lr_ = representation_loss(&mut g, model, &items, hyper);
            let loss = g.add(lc, lr_);
            let (cv, rv) = (g.scalar(lc), g.scalar(lr_));
            if !(cv + rv).is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite reward loss at epoch {epoch}, step {}",
                    report.steps
                )));
            }
            let tape = g.into_tape();
            let mut grads = tape.backward(loss).param_grads();
            if training.grad_clip > 0.0 {
                clip_grad_norm(&mut grads, training.grad_clip);
            }
            opt.step(&mut model.store, &grads, sched.lr(report.steps));
            report.steps += 1;
            c_sum += cv * batch.len() as f64;
            r_sum += rv * batch.len() as f64;
        }
        let (c, r) = (c_sum / entries.len() as f64, r_sum / entries.len() as f64);
        report.epoch_contrastive.push(c);
        report.epoch_representation.push(r);
        let total = c + r;
        let first = *initial.get_or_insert(total);
        above = if total > 10.0 * first { above + 1 } else { 0 };
        if above >= 3 {
            return Err(Error::Diverged(format!(
                "reward loss {total:.4} above 10x initial {first:.4} for 3 epochs (epoch {epoch})"
            )));
        }
    }
    Ok(report)
}
