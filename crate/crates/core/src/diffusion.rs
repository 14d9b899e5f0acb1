//! Conditional noise predictor, its bilingual training objective and the
//! plain ancestral sampler.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    clip_grad_norm, sinusoidal_embedding, AdamW, Graph, LayerNorm, Linear, Matrix, ParamId,
    ParamStore, TransformerBlock, Var, WarmupCosine,
};
use crate::crosslingual::SentenceEmbedding;
use crate::error::{Error, Result};
use crate::motion::MotionSequence;
use crate::schedule::{forward_noise, NoiseSchedule};

/// Anything that predicts the noise in `x_t`.
///
/// The trained [`Denoiser`] implements it, and tests substitute closed-form stubs.
pub trait NoisePredictor {
    fn predict(&self, x_t: &MotionSequence, t: usize, cond: &SentenceEmbedding) -> Result<MotionSequence>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub feature_dim: usize,
    pub cond_dim: usize,
    pub model_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_frames: usize,
}

impl DenoiserConfig {
    pub fn desk(feature_dim: usize, cond_dim: usize, max_frames: usize) -> Self {
        Self {
            feature_dim,
            cond_dim,
            model_dim: 32,
            num_layers: 2,
            num_heads: 4,
            max_frames,
        }
    }

    pub fn paper(feature_dim: usize, cond_dim: usize, max_frames: usize) -> Self {
        Self {
            model_dim: 256,
            num_layers: 9,
            ..Self::desk(feature_dim, cond_dim, max_frames)
        }
    }
}

/// Transformer over frames with a prefix token carrying timestep and caption.
#[derive(Clone, Debug)]
pub struct Denoiser {
    config: DenoiserConfig,
    store: ParamStore,
    in_proj: Linear,
    pos: ParamId,
    time_proj: Linear,
    cond_proj: Linear,
    blocks: Vec<TransformerBlock>,
    out_ln: LayerNorm,
    out_proj: Linear,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.model_dim;
        let in_proj = Linear::new(&mut store, "in_proj", config.feature_dim, d, true, 1.0, &mut rng);
        let pos = store.add("pos_embed", Matrix::randn(config.max_frames, d, 0.1, &mut rng));
        let time_proj = Linear::new(&mut store, "time_proj", d, d, true, 1.0, &mut rng);
        let cond_proj = Linear::new(&mut store, "cond_proj", config.cond_dim, d, true, 1.0, &mut rng);
        let blocks = (0..config.num_layers)
            .map(|i| TransformerBlock::new(&mut store, &format!("block{i}"), d, config.num_heads, &mut rng))
            .collect();
        let out_ln = LayerNorm::new(&mut store, "out_ln", d);
        let out_proj = Linear::new(&mut store, "out_proj", d, config.feature_dim, true, 1.0, &mut rng);
        Self {
            config,
            store,
            in_proj,
            pos,
            time_proj,
            cond_proj,
            blocks,
            out_ln,
            out_proj,
        }
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn check(&self, x_t: &MotionSequence, cond: &SentenceEmbedding) -> Result<()> {
        let (n, d) = x_t.shape();
        if d != self.config.feature_dim || n > self.config.max_frames {
            return Err(Error::Shape(format!(
                "denoiser expects up to {} frames of {} features, got {n}x{d}",
                self.config.max_frames, self.config.feature_dim
            )));
        }
        if cond.dim() != self.config.cond_dim {
            return Err(Error::Shape(format!(
                "condition dim {} != {}",
                cond.dim(),
                self.config.cond_dim
            )));
        }
        Ok(())
    }

    /// Builds `ε̂` on the graph from an `N × D` input node and a `1 × d_c` condition node.
    pub fn forward(&self, g: &mut Graph, x: Var, t: usize, cond: Var) -> Var {
        let n = g.value(x).rows();
        let h = self.in_proj.forward(g, x);
        let pos = g.p(self.pos);
        let pos = g.slice_rows(pos, 0, n);
        let h = g.add(h, pos);
        let temb = g.constant(Matrix::row_vector(sinusoidal_embedding(t as f64, self.config.model_dim)));
        let temb = self.time_proj.forward(g, temb);
        let cemb = self.cond_proj.forward(g, cond);
        let prefix = g.add(temb, cemb);
        let mut h = g.concat_rows(&[prefix, h]);
        for b in &self.blocks {
            h = b.forward(g, h);
        }
        let h = g.slice_rows(h, 1, n);
        let h = self.out_ln.forward(g, h);
        self.out_proj.forward(g, h)
    }
}

impl NoisePredictor for Denoiser {
    fn predict(&self, x_t: &MotionSequence, t: usize, cond: &SentenceEmbedding) -> Result<MotionSequence> {
        self.check(x_t, cond)?;
        let mut g = Graph::new(&self.store, false);
        let x = g.constant(x_t.frames().clone());
        let c = g.constant(cond.to_row());
        let out = self.forward(&mut g, x, t, c);
        MotionSequence::new(g.value(out).clone())
    }
}

/// Draws `(t, ε, caption)` and returns the noised input with its target.
fn draw_training_case<R: Rng + ?Sized>(
    x0: &MotionSequence,
    cond_pool: &[SentenceEmbedding],
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<(usize, MotionSequence, MotionSequence, usize)> {
    if cond_pool.is_empty() {
        return Err(Error::Parameter("caption pool is empty".into()));
    }
    let t = rng.random_range(1..=schedule.steps());
    let (n, d) = x0.shape();
    let eps = MotionSequence::standard_normal(n, d, rng);
    let c = rng.random_range(0..cond_pool.len());
    let x_t = forward_noise(x0, t, &eps, schedule)?;
    Ok((t, x_t, eps, c))
}

/// One Monte Carlo draw of the bilingual objective.
///
/// `cond_pool` holds the embeddings of every caption of `x0` in both languages,
/// and one is picked uniformly.
pub fn bimd_loss<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    net: &P,
    x0: &MotionSequence,
    cond_pool: &[SentenceEmbedding],
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<f64> {
    let (t, x_t, eps, c) = draw_training_case(x0, cond_pool, schedule, rng)?;
    let pred = net.predict(&x_t, t, &cond_pool[c])?;
    pred.ensure_same_shape(&eps, "bimd_loss")?;
    let diff = pred.frames().zip_map(eps.frames(), |a, b| (a - b) * (a - b));
    Ok(diff.sum() / diff.len() as f64)
}

/// `x_{t-1}` from `x_t` given the predicted noise and an external Gaussian draw.
pub fn ddpm_update(
    x_t: &MotionSequence,
    eps_hat: &MotionSequence,
    t: usize,
    schedule: &NoiseSchedule,
    eps_draw: &MotionSequence,
) -> Result<MotionSequence> {
    x_t.ensure_same_shape(eps_hat, "ddpm_step prediction")?;
    x_t.ensure_same_shape(eps_draw, "ddpm_step draw")?;
    let coeffs = StepCoefficients::at(schedule, t)?;
    let mut out = x_t.frames().clone();
    for ((o, e), z) in out
        .data_mut()
        .iter_mut()
        .zip(eps_hat.frames().data())
        .zip(eps_draw.frames().data())
    {
        *o = coeffs.apply(*o, *e, *z);
    }
    MotionSequence::new(out).map_err(|_| Error::NonFinite(format!("state after step t={t}")))
}

#[derive(Clone, Copy, Debug)]
struct StepCoefficients {
    beta: f64,
    alpha: f64,
    alpha_bar: f64,
}

impl StepCoefficients {
    fn at(schedule: &NoiseSchedule, t: usize) -> Result<Self> {
        Ok(Self {
            beta: schedule.beta(t)?,
            alpha: schedule.alpha(t)?,
            alpha_bar: schedule.alpha_bar(t)?,
        })
    }

    fn apply(self, x: f64, eps_hat: f64, z: f64) -> f64 {
        let mean = x - self.beta / (1.0 - self.alpha_bar).sqrt() * eps_hat;
        (mean + self.beta.sqrt() * z) / self.alpha.sqrt()
    }
}

pub fn ddpm_step<P: NoisePredictor + ?Sized>(
    net: &P,
    x_t: &MotionSequence,
    t: usize,
    cond: &SentenceEmbedding,
    schedule: &NoiseSchedule,
    eps_draw: &MotionSequence,
) -> Result<MotionSequence> {
    schedule.beta(t)?;
    let eps_hat = net.predict(x_t, t, cond)?;
    ddpm_update(x_t, &eps_hat, t, schedule, eps_draw)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    #[default]
    None,
    /// Reward gradient scaled by `β_t / √α_t`.
    Eq14Weighted,
    /// Reward gradient added unscaled.
    Eq15Unweighted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub schedule: NoiseSchedule,
    pub seed: u64,
    pub guidance_mode: GuidanceMode,
    pub mu: f64,
    pub eta: f64,
    /// Caps each step's reward gradient norm at `10·√β_t·√(N·D)`.
    #[serde(default = "default_clip")]
    pub clip_gradients: bool,
}

fn default_clip() -> bool {
    true
}

impl SamplerConfig {
    pub fn unguided(schedule: NoiseSchedule, seed: u64) -> Self {
        Self {
            schedule,
            seed,
            guidance_mode: GuidanceMode::None,
            mu: 0.0,
            eta: 0.0,
            clip_gradients: true,
        }
    }

    pub fn guided(schedule: NoiseSchedule, seed: u64, mode: GuidanceMode, mu: f64, eta: f64) -> Self {
        Self {
            guidance_mode: mode,
            mu,
            eta,
            ..Self::unguided(schedule, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.mu.is_finite() || !self.eta.is_finite() {
            return Err(Error::Parameter("mu and eta must be finite".into()));
        }
        Ok(())
    }

    /// Whether any reward term can affect a step.
    pub fn is_guided(&self) -> bool {
        self.guidance_mode != GuidanceMode::None && (self.mu != 0.0 || self.eta != 0.0)
    }
}

/// Gaussian draws for the reverse loop, consumed in a fixed order.
///
/// The initial state comes first, then one draw per step for `t = T..2`; the
/// last step uses zero noise. Guided and unguided samplers share this so equal
/// seeds see equal noise.
pub struct ReverseNoise {
    rng: ChaCha8Rng,
    shape: (usize, usize),
}

impl ReverseNoise {
    pub fn new(seed: u64, shape: (usize, usize)) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            shape,
        }
    }

    pub fn initial(&mut self) -> MotionSequence {
        MotionSequence::standard_normal(self.shape.0, self.shape.1, &mut self.rng)
    }

    pub fn step(&mut self, t: usize) -> MotionSequence {
        if t > 1 {
            MotionSequence::standard_normal(self.shape.0, self.shape.1, &mut self.rng)
        } else {
            MotionSequence::zeros(self.shape.0, self.shape.1)
        }
    }
}

/// Unguided reverse loop from `x_T ~ N(0, I)` down to `x_0`.
pub fn sample<P: NoisePredictor + ?Sized>(
    net: &P,
    cond: &SentenceEmbedding,
    shape: (usize, usize),
    cfg: &SamplerConfig,
) -> Result<MotionSequence> {
    cfg.validate()?;
    if cfg.guidance_mode != GuidanceMode::None {
        return Err(Error::Parameter(
            "plain sampler takes guidance_mode = none; use the guided sampler".into(),
        ));
    }
    let mut noise = ReverseNoise::new(cfg.seed, shape);
    let mut x = noise.initial();
    for t in (1..=cfg.schedule.steps()).rev() {
        let z = noise.step(t);
        x = ddpm_step(net, &x, t, cond, &cfg.schedule, &z)?;
    }
    Ok(x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for DiffusionHyper {
    fn default() -> Self {
        Self {
            epochs: 600,
            batch_size: 32,
            lr: 2e-3,
            warmup_steps: 50,
            weight_decay: 0.0,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

/// A clean motion with the embeddings of all its captions in both languages.
#[derive(Clone, Debug)]
pub struct ConditionedMotion {
    pub motion: MotionSequence,
    pub conds: Vec<SentenceEmbedding>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

pub fn train_denoiser(
    net: &mut Denoiser,
    data: &[ConditionedMotion],
    schedule: &NoiseSchedule,
    hyper: &DiffusionHyper,
) -> Result<TrainReport> {
    if data.is_empty() || hyper.batch_size == 0 {
        return Err(Error::Parameter("need data and a positive batch size".into()));
    }
    for d in data {
        net.check(&d.motion, d.conds.first().ok_or_else(|| Error::Parameter("motion without captions".into()))?)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let steps_per_epoch = data.len().div_ceil(hyper.batch_size);
    let sched = WarmupCosine {
        peak_lr: hyper.lr,
        warmup_steps: hyper.warmup_steps,
        total_steps: steps_per_epoch * hyper.epochs,
    };
    let mut opt = AdamW::new(&net.store, hyper.weight_decay);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport::default();
    for epoch in 0..hyper.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut sum = 0.0;
        for batch in order.chunks(hyper.batch_size) {
            let mut g = Graph::new(&net.store, true);
            let mut terms = Vec::with_capacity(batch.len());
            for &i in batch {
                let item = &data[i];
                let (t, x_t, eps, c) = draw_training_case(&item.motion, &item.conds, schedule, &mut rng)?;
                let x = g.constant(x_t.into_matrix());
                let cv = g.constant(item.conds[c].to_row());
                let pred = net.forward(&mut g, x, t, cv);
                let target = g.constant(eps.into_matrix());
                let diff = g.sub(pred, target);
                let sq = g.mul(diff, diff);
                terms.push(g.mean_all(sq));
            }
            let cat = g.concat_cols(&terms);
            let loss = g.mean_all(cat);
            let lv = g.scalar(loss);
            if !lv.is_finite() {
                return Err(Error::Diverged(format!("denoiser loss at epoch {epoch}, step {}", report.steps)));
            }
            let tape = g.into_tape();
            let mut grads = tape.backward(loss).param_grads();
            if hyper.grad_clip > 0.0 {
                clip_grad_norm(&mut grads, hyper.grad_clip);
            }
            opt.step(&mut net.store, &grads, sched.lr(report.steps));
            report.steps += 1;
            sum += lv * batch.len() as f64;
        }
        report.epoch_losses.push(sum / data.len() as f64);
    }
    Ok(report)
}
