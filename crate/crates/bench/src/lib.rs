//! Fixtures shared by the benchmarks: untrained desk-size networks on the
//! default corpus shape, built from fixed seeds.

use motionguide::config::RunConfig;
use motionguide::crosslingual::TextEncoder;
use motionguide::diffusion::Denoiser;
use motionguide::motion::MotionSequence;
use motionguide::reward::RewardModel;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct Fixture {
    pub cfg: RunConfig,
    pub student: TextEncoder,
    pub reward: RewardModel,
    pub denoiser: Denoiser,
    pub tokens: Vec<usize>,
    pub x: MotionSequence,
}

impl Fixture {
    pub fn desk() -> Self {
        let cfg = RunConfig::default();
        let student = TextEncoder::new(cfg.student_config(), 1).freeze();
        let reward = RewardModel::new(cfg.reward_model_config(), 2);
        let denoiser = Denoiser::new(cfg.denoiser_config(), 3);
        let tokens = (1..=6).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = MotionSequence::standard_normal(cfg.corpus.num_frames, cfg.corpus.feature_dim, &mut rng);
        Self {
            cfg,
            student,
            reward,
            denoiser,
            tokens,
            x,
        }
    }

    pub fn latents(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let d = self.cfg.reward_model_config().latent_dim;
        motionguide::metrics::random_latents(n, d, &mut ChaCha8Rng::seed_from_u64(seed))
    }
}
