mod http;

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use motionguide::annotation::{apply_review, run_pipeline, LlmBackend, MockBackend, MockRule};
use motionguide::checkpoint::{hex, Persist};
use motionguide::config::{EvalConfig, GuidanceConfig, RunConfig};
use motionguide::corpus::{entry_to_json_line, generate_corpus, load_corpus, split_train_test, CorpusEntry, Language};
use motionguide::crosslingual::TextEncoder;
use motionguide::diffusion::{Denoiser, GuidanceMode};
use motionguide::experiment::{self, CorpusSplit, EvalCase, System};
use motionguide::fsutil::write_atomic;
use motionguide::guidance::{build_index, guided_sample, write_trace_csv, RetrievalIndex};
use motionguide::motion::MotionSequence;
use motionguide::oracle::{discretization_check, discretization_distances, tilted_target_checks, Check};
use motionguide::reward::RewardModel;
use serde_json::{json, Value};

const CORPUS_FILE: &str = "corpus.jsonl";
const TEACHER_FILE: &str = "teacher.ckpt";
const STUDENT_FILE: &str = "student.ckpt";
const REWARD_FILE: &str = "reward.ckpt";
const INDEX_FILE: &str = "index.ckpt";
const DENOISER_FILE: &str = "denoiser.ckpt";

#[derive(Parser)]
#[command(name = "motionguide", version, about = "Reward-guided motion diffusion on a synthetic bilingual corpus")]
struct Cli {
    /// TOML or JSON configuration layered over its preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set guidance.mu=0.5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Directory holding the corpus, checkpoints, outputs and manifests.
    #[arg(long, global = true, default_value = "run")]
    run_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    GenCorpus,
    /// Distill the bilingual student text encoder.
    AlignText,
    /// Train the reward model and build the retrieval index.
    TrainReward,
    /// Train the denoiser conditioned on the student encoder.
    TrainDiffusion,
    /// Draw samples for held-out captions.
    Sample(SampleArgs),
    /// Score a samples file against the held-out set.
    Evaluate(EvaluateArgs),
    /// Run the analytic checks of the guided sampler on 1-D mixtures.
    VerifyTheorems,
    /// Sweep the guidance weights and write a CSV of metrics.
    Sweep(SweepArgs),
    /// Caption translation pipeline.
    #[command(subcommand)]
    Pipeline(PipelineCommand),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    None,
    Eq14Weighted,
    Eq15Unweighted,
}

impl From<ModeArg> for GuidanceMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::None => GuidanceMode::None,
            ModeArg::Eq14Weighted => GuidanceMode::Eq14Weighted,
            ModeArg::Eq15Unweighted => GuidanceMode::Eq15Unweighted,
        }
    }
}

#[derive(Args)]
struct GuidanceArgs {
    /// Guidance mode; defaults to `guidance.mode`.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, allow_hyphen_values = true)]
    mu: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    eta: Option<f64>,
    /// Disable per-step reward gradient clipping.
    #[arg(long)]
    no_clip: bool,
}

impl GuidanceArgs {
    fn apply(&self, base: &GuidanceConfig) -> GuidanceConfig {
        GuidanceConfig {
            mode: self.mode.map_or(base.mode, Into::into),
            mu: self.mu.unwrap_or(base.mu),
            eta: self.eta.unwrap_or(base.eta),
            clip_gradients: base.clip_gradients && !self.no_clip,
        }
    }
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    guidance: GuidanceArgs,
    /// Number of samples; defaults to `eval.num_samples`.
    #[arg(long)]
    count: Option<usize>,
    /// First sampling seed; defaults to `eval.sample_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Condition every sample on one caption of this corpus motion instead of
    /// cycling through held-out captions.
    #[arg(long)]
    motion_id: Option<String>,
    /// Caption language for `--motion-id`.
    #[arg(long, value_enum, default_value = "a", requires = "motion_id")]
    lang: LangArg,
    /// Caption index for `--motion-id`.
    #[arg(long, default_value_t = 0, requires = "motion_id")]
    caption: usize,
    /// Output file; defaults to `<run-dir>/samples.jsonl`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write per-step reward traces. With several samples, `-<k>` is
    /// appended to the file stem.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum LangArg {
    A,
    B,
}

impl From<LangArg> for Language {
    fn from(l: LangArg) -> Self {
        match l {
            LangArg::A => Language::A,
            LangArg::B => Language::B,
        }
    }
}

#[derive(Args)]
struct EvaluateArgs {
    /// Samples file written by `sample`; defaults to `<run-dir>/samples.jsonl`.
    #[arg(long)]
    samples: Option<PathBuf>,
    /// Metrics file; defaults to `<run-dir>/metrics.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    guidance: GuidanceArgs,
    /// Also evaluate `eta = 0` at every positive sweep value.
    #[arg(long)]
    eta_ablation: bool,
    /// CSV output; defaults to `<run-dir>/sweep.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum PipelineCommand {
    /// Translate, refine and evaluate every caption group in a JSONL file.
    Run(PipelineRunArgs),
    /// Fold a reviewer-edited queue back into the accepted set.
    ReviewApply {
        /// Output directory of an earlier `pipeline run`.
        #[arg(long)]
        out: PathBuf,
        /// Edited copy of the review queue.
        #[arg(long)]
        edited: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKind {
    Mock,
    Http,
}

#[derive(Args)]
struct PipelineRunArgs {
    /// Caption groups: corpus lines or `{motion_id, captions}` objects.
    #[arg(long)]
    input: PathBuf,
    /// Directory for the accepted, review and failed files.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "mock")]
    backend: BackendKind,
    /// JSON object mapping original captions to scripted mock replies.
    #[arg(long)]
    mock_table: Option<PathBuf>,
    /// Chat-completions URL for the http backend.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long, default_value_t = 120)]
    timeout_secs: u64,
    #[arg(long)]
    target_language: Option<String>,
    #[arg(long)]
    parallelism: Option<usize>,
}

/// Raised when an analytic check fails; maps to exit code 3.
#[derive(Debug)]
struct OracleFailure(usize);

impl fmt::Display for OracleFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} analytic check(s) failed", self.0)
    }
}

impl std::error::Error for OracleFailure {}

/// Invalid invocation that clap cannot catch; maps to exit code 1.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<OracleFailure>().is_some() {
        return 3;
    }
    if err.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match err.downcast_ref::<motionguide::Error>() {
        Some(
            motionguide::Error::Config { .. }
            | motionguide::Error::Parameter(_)
            | motionguide::Error::Parse { .. }
            | motionguide::Error::Schema(_)
            | motionguide::Error::Vocabulary { .. }
            | motionguide::Error::Shape(_)
            | motionguide::Error::Timestep { .. },
        ) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let base = match &cli.config {
        Some(p) => RunConfig::from_path(p)?,
        None => RunConfig::default(),
    };
    Ok(if cli.sets.is_empty() { base } else { base.with_overrides(&cli.sets)? })
}

/// Records what a command ran with, next to its outputs.
struct Manifest {
    command: &'static str,
    started: Instant,
    outputs: Vec<PathBuf>,
    extra: serde_json::Map<String, Value>,
}

impl Manifest {
    fn new(command: &'static str) -> Self {
        Self {
            command,
            started: Instant::now(),
            outputs: Vec::new(),
            extra: serde_json::Map::new(),
        }
    }

    fn output(&mut self, p: &Path) {
        self.outputs.push(p.to_path_buf());
    }

    fn write(&self, dir: &Path, cfg: Option<&RunConfig>) -> anyhow::Result<()> {
        let mut v = json!({
            "command": self.command,
            "argv": std::env::args().collect::<Vec<_>>(),
            "version": env!("CARGO_PKG_VERSION"),
            "git": git_describe(),
            "wall_time_s": self.started.elapsed().as_secs_f64(),
            "outputs": self.outputs,
        });
        if let Some(cfg) = cfg {
            v["config"] = serde_json::to_value(cfg)?;
            v["config_hash"] = json!(hex(&cfg.hash()));
            v["seeds"] = json!({
                "run": cfg.seed,
                "corpus": cfg.corpus.seed,
                "distill": cfg.distill.seed,
                "reward": cfg.reward_training.seed,
                "diffusion": cfg.diffusion.seed,
                "sample": cfg.eval.sample_seed,
                "metrics": cfg.eval.metric_seed,
                "theorems": cfg.theorems.seed,
            });
        }
        for (k, x) in &self.extra {
            v[k] = x.clone();
        }
        let path = dir.join(format!("{}.manifest.json", self.command));
        write_atomic(&path, serde_json::to_string_pretty(&v)?.as_bytes())?;
        Ok(())
    }
}

fn git_describe() -> Option<String> {
    let out = std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .stderr(std::process::Stdio::null())
        .output()
        .ok()?;
    out.status
        .success()
        .then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
}

fn need(path: PathBuf, hint: &str) -> anyhow::Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(anyhow!("{} not found; run `motionguide {hint}` first", path.display()))
    }
}

fn load_split(cfg: &RunConfig, dir: &Path) -> anyhow::Result<CorpusSplit> {
    let all = load_corpus(&need(dir.join(CORPUS_FILE), "gen-corpus")?)?;
    let (train, test) = split_train_test(&all, cfg.test_fraction);
    if train.is_empty() || test.is_empty() {
        bail!(Usage("train/test split left one side empty".into()));
    }
    Ok(CorpusSplit { all, train, test })
}

fn load_system(cfg: &RunConfig, dir: &Path) -> anyhow::Result<(CorpusSplit, System)> {
    let split = load_split(cfg, dir)?;
    let student = TextEncoder::load(&need(dir.join(STUDENT_FILE), "align-text")?)?;
    let reward = RewardModel::load(&need(dir.join(REWARD_FILE), "train-reward")?)?;
    let index = RetrievalIndex::load(&need(dir.join(INDEX_FILE), "train-reward")?)?;
    let denoiser = Denoiser::load(&need(dir.join(DENOISER_FILE), "train-diffusion")?)?;
    let sys = System::assemble(cfg, &split, student, reward, denoiser, index)?;
    Ok((split, sys))
}

fn loss_csv(columns: &[(&str, &[f64])]) -> String {
    let mut s = String::from("epoch");
    for (name, _) in columns {
        s.push(',');
        s.push_str(name);
    }
    s.push('\n');
    let rows = columns.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
    for i in 0..rows {
        s.push_str(&i.to_string());
        for (_, v) in columns {
            s.push(',');
            if let Some(x) = v.get(i) {
                s.push_str(&x.to_string());
            }
        }
        s.push('\n');
    }
    s
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Command::Pipeline(cmd) = &cli.command {
        return pipeline(&cli, cmd);
    }
    let cfg = load_config(&cli)?;
    let dir = cli.run_dir.as_path();
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    match &cli.command {
        Command::GenCorpus => gen_corpus(&cfg, dir),
        Command::AlignText => align_text(&cfg, dir),
        Command::TrainReward => train_reward(&cfg, dir),
        Command::TrainDiffusion => train_diffusion(&cfg, dir),
        Command::Sample(a) => sample(&cfg, dir, a),
        Command::Evaluate(a) => evaluate(&cfg, dir, a),
        Command::VerifyTheorems => verify_theorems(&cfg, dir),
        Command::Sweep(a) => sweep(&cfg, dir, a),
        Command::Pipeline(_) => unreachable!(),
    }
}

fn gen_corpus(cfg: &RunConfig, dir: &Path) -> anyhow::Result<()> {
    let mut m = Manifest::new("gen-corpus");
    let all = generate_corpus(&cfg.corpus)?;
    let mut text = String::new();
    for e in &all {
        text.push_str(&entry_to_json_line(e));
        text.push('\n');
    }
    let path = dir.join(CORPUS_FILE);
    write_atomic(&path, text.as_bytes())?;
    m.output(&path);
    let (train, test) = split_train_test(&all, cfg.test_fraction);
    m.extra.insert("motions".into(), json!({"total": all.len(), "train": train.len(), "test": test.len()}));
    m.write(dir, Some(cfg))?;
    println!("wrote {} motions to {}", all.len(), path.display());
    Ok(())
}

fn align_text(cfg: &RunConfig, dir: &Path) -> anyhow::Result<()> {
    let mut m = Manifest::new("align-text");
    let split = load_split(cfg, dir)?;
    let (teacher, student, report) = experiment::align_text(cfg, &split.train)?;
    for (file, enc) in [(TEACHER_FILE, &teacher), (STUDENT_FILE, &student)] {
        let p = dir.join(file);
        enc.save(&p)?;
        m.output(&p);
    }
    let p = dir.join("align_loss.csv");
    write_atomic(&p, loss_csv(&[("alignment", &report.epoch_cla), ("total", &report.epoch_total)]).as_bytes())?;
    m.output(&p);
    m.write(dir, Some(cfg))?;
    println!(
        "alignment loss {:.4} -> {:.4} over {} steps",
        report.epoch_cla.first().copied().unwrap_or(f64::NAN),
        report.epoch_cla.last().copied().unwrap_or(f64::NAN),
        report.steps
    );
    Ok(())
}

fn train_reward(cfg: &RunConfig, dir: &Path) -> anyhow::Result<()> {
    let mut m = Manifest::new("train-reward");
    let split = load_split(cfg, dir)?;
    let (model, report) = experiment::train_reward_model(cfg, &split.train)?;
    let index = build_index(&split.train, &model)?;
    let p = dir.join(REWARD_FILE);
    model.save(&p)?;
    m.output(&p);
    let p = dir.join(INDEX_FILE);
    index.save(&p)?;
    m.output(&p);
    let p = dir.join("reward_loss.csv");
    write_atomic(
        &p,
        loss_csv(&[("contrastive", &report.epoch_contrastive), ("representation", &report.epoch_representation)]).as_bytes(),
    )?;
    m.output(&p);
    m.write(dir, Some(cfg))?;
    println!(
        "contrastive loss {:.4} -> {:.4}; indexed {} motions",
        report.epoch_contrastive.first().copied().unwrap_or(f64::NAN),
        report.epoch_contrastive.last().copied().unwrap_or(f64::NAN),
        index.len()
    );
    Ok(())
}

fn train_diffusion(cfg: &RunConfig, dir: &Path) -> anyhow::Result<()> {
    let mut m = Manifest::new("train-diffusion");
    let split = load_split(cfg, dir)?;
    let student = TextEncoder::load(&need(dir.join(STUDENT_FILE), "align-text")?)?;
    let (net, report) = experiment::train_diffusion(cfg, &split.train, &student)?;
    let p = dir.join(DENOISER_FILE);
    net.save(&p)?;
    m.output(&p);
    let p = dir.join("diffusion_loss.csv");
    write_atomic(&p, loss_csv(&[("loss", &report.epoch_losses)]).as_bytes())?;
    m.output(&p);
    m.write(dir, Some(cfg))?;
    println!(
        "denoiser loss {:.4} -> {:.4} over {} steps",
        report.epoch_losses.first().copied().unwrap_or(f64::NAN),
        report.epoch_losses.last().copied().unwrap_or(f64::NAN),
        report.steps
    );
    Ok(())
}

fn lang_tag(l: Language) -> &'static str {
    match l {
        Language::A => "a",
        Language::B => "b",
    }
}

fn trace_path(base: &Path, k: usize, count: usize) -> PathBuf {
    if count == 1 {
        return base.to_path_buf();
    }
    let stem = base.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match base.extension() {
        Some(ext) => format!("{stem}-{k}.{}", ext.to_string_lossy()),
        None => format!("{stem}-{k}"),
    };
    base.with_file_name(name)
}

/// One JSON line per sample: the corpus fields plus the conditioning record.
fn sample_line(case: &EvalCase, motion: &MotionSequence, k: usize, anchor: Option<&str>) -> anyhow::Result<String> {
    let mut v = json!({
        "motion_id": format!("sample-{k:05}"),
        "frames": motion,
        "captions": [{"lang": lang_tag(case.language), "tokens": case.tokens}],
        "class": case.class_label,
        "condition": {
            "source_motion_id": case.motion_id,
            "lang": lang_tag(case.language),
            "seed": case.seed,
        },
    });
    if let Some(a) = anchor {
        v["condition"]["anchor_id"] = json!(a);
    }
    Ok(serde_json::to_string(&v)?)
}

/// `eval.num_samples` cases on one fixed caption with consecutive seeds.
fn caption_cases(all: &[CorpusEntry], id: &str, lang: Language, caption: usize, eval: &EvalConfig) -> anyhow::Result<Vec<EvalCase>> {
    let e = all
        .iter()
        .find(|e| e.motion_id == id)
        .ok_or_else(|| Usage(format!("motion `{id}` is not in the corpus")))?;
    let c = e.captions.get(caption).ok_or_else(|| {
        Usage(format!("motion `{id}` has {} caption(s); index {caption} is out of range", e.captions.len()))
    })?;
    Ok((0..eval.num_samples)
        .map(|k| EvalCase {
            motion_id: e.motion_id.clone(),
            class_label: e.class_label,
            language: lang,
            tokens: c.tokens(lang).to_vec(),
            seed: eval.sample_seed.wrapping_add(k as u64),
        })
        .collect())
}

fn sample(cfg: &RunConfig, dir: &Path, a: &SampleArgs) -> anyhow::Result<()> {
    let mut m = Manifest::new("sample");
    let guidance = a.guidance.apply(&cfg.guidance);
    let mut eval = cfg.eval.clone();
    if let Some(n) = a.count {
        eval.num_samples = n;
    }
    if let Some(s) = a.seed {
        eval.sample_seed = s;
    }
    if eval.num_samples == 0 {
        bail!(Usage("--count must be at least 1".into()));
    }
    let (split, sys) = load_system(cfg, dir)?;
    let cases = match &a.motion_id {
        None => experiment::eval_cases(&split.test, &eval),
        Some(id) => caption_cases(&split.all, id, a.lang.into(), a.caption, &eval)?,
    };
    let trace = a.trace.is_some();
    let mut text = String::new();
    for (k, case) in cases.iter().enumerate() {
        let cond = sys.student.encode(&case.tokens)?;
        let scfg = experiment::sampler_config(&sys.schedule, case.seed, &guidance);
        let s = guided_sample(&sys.denoiser, &sys.reward, &sys.index, &case.tokens, &cond, sys.shape, &scfg, trace)?;
        // Tracing forces a retrieval, so the anchor is only reported when guidance used it.
        let anchor = if scfg.is_guided() { s.anchor_id.as_deref() } else { None };
        text.push_str(&sample_line(case, &s.motion, k, anchor)?);
        text.push('\n');
        if let Some(base) = &a.trace {
            let p = trace_path(base, k, cases.len());
            write_trace_csv(&p, &s.trace)?;
            m.output(&p);
        }
    }
    let out = a.out.clone().unwrap_or_else(|| dir.join("samples.jsonl"));
    write_atomic(&out, text.as_bytes())?;
    m.output(&out);
    m.extra.insert("guidance".into(), serde_json::to_value(&guidance)?);
    m.extra.insert("sampling".into(), json!({"count": eval.num_samples, "first_seed": eval.sample_seed}));
    m.write(dir, Some(cfg))?;
    println!("wrote {} samples to {}", cases.len(), out.display());
    Ok(())
}

fn read_samples(path: &Path) -> anyhow::Result<(Vec<EvalCase>, Vec<MotionSequence>)> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cases = Vec::new();
    let mut motions = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |message: String| motionguide::Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        #[derive(serde::Deserialize)]
        struct Caption {
            lang: Language,
            tokens: Vec<usize>,
        }
        #[derive(serde::Deserialize)]
        struct Condition {
            source_motion_id: String,
            lang: Language,
            seed: u64,
        }
        #[derive(serde::Deserialize)]
        struct Line {
            frames: MotionSequence,
            captions: Vec<Caption>,
            class: usize,
            condition: Condition,
        }
        let l: Line = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        let tokens = l
            .captions
            .into_iter()
            .find(|c| c.lang == l.condition.lang)
            .ok_or_else(|| bad("no caption in the conditioning language".into()))?
            .tokens;
        cases.push(EvalCase {
            motion_id: l.condition.source_motion_id,
            class_label: l.class,
            language: l.condition.lang,
            tokens,
            seed: l.condition.seed,
        });
        motions.push(l.frames);
    }
    Ok((cases, motions))
}

fn evaluate(cfg: &RunConfig, dir: &Path, a: &EvaluateArgs) -> anyhow::Result<()> {
    let mut m = Manifest::new("evaluate");
    let samples = a.samples.clone().unwrap_or_else(|| dir.join("samples.jsonl"));
    let (cases, motions) = read_samples(&samples)?;
    if cases.len() < cfg.eval.pool_size {
        bail!(Usage(format!(
            "{} samples is fewer than eval.pool_size = {}",
            cases.len(),
            cfg.eval.pool_size
        )));
    }
    let (_, sys) = load_system(cfg, dir)?;
    let ev = experiment::evaluate_samples(&sys, &cases, &motions, &cfg.eval)?;
    let out = a.out.clone().unwrap_or_else(|| dir.join("metrics.json"));
    let report = json!({
        "samples": samples,
        "metrics": ev.metrics,
        "mean_final_reward": ev.mean_final_reward,
    });
    write_atomic(&out, serde_json::to_string_pretty(&report)?.as_bytes())?;
    m.output(&out);
    m.write(dir, Some(cfg))?;
    let r = &ev.metrics;
    println!(
        "R-precision {:.3}/{:.3}/{:.3}  FID {:.4}  MM Dist {:.4}  Diversity {:.4}  reward {:.4}",
        r.r_precision[0], r.r_precision[1], r.r_precision[2], r.fid, r.mm_dist, r.diversity, ev.mean_final_reward
    );
    Ok(())
}

fn checks_csv(checks: &[Check]) -> String {
    let mut s = String::from("name,observed,expected,tolerance,pass\n");
    for c in checks {
        s.push_str(&format!("{},{},{},{},{}\n", c.name, c.observed, c.expected, c.tolerance, c.pass));
    }
    s
}

fn verify_theorems(cfg: &RunConfig, dir: &Path) -> anyhow::Result<()> {
    let mut m = Manifest::new("verify-theorems");
    let mut checks = tilted_target_checks(&cfg.theorems)?;
    let distances = discretization_distances(&cfg.theorems)?;
    checks.push(discretization_check(&distances));
    let p = dir.join("theorems.csv");
    write_atomic(&p, checks_csv(&checks).as_bytes())?;
    m.output(&p);
    let mut d = String::from("steps,w1\n");
    for (t, w) in &distances {
        d.push_str(&format!("{t},{w}\n"));
    }
    let p = dir.join("discretization.csv");
    write_atomic(&p, d.as_bytes())?;
    m.output(&p);
    let failed = checks.iter().filter(|c| !c.pass).count();
    m.extra.insert("failed_checks".into(), json!(failed));
    m.write(dir, Some(cfg))?;
    for c in &checks {
        println!(
            "{} {}: observed {:.6}, expected {:.6}, tolerance {}",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.observed,
            c.expected,
            c.tolerance
        );
    }
    if failed > 0 {
        return Err(OracleFailure(failed).into());
    }
    Ok(())
}

fn sweep(cfg: &RunConfig, dir: &Path, a: &SweepArgs) -> anyhow::Result<()> {
    let mut m = Manifest::new("sweep");
    let base = a.guidance.apply(&cfg.guidance);
    let mut points: Vec<(f64, f64)> = cfg.sweep.values.iter().map(|&v| (v, v)).collect();
    if a.eta_ablation {
        points.extend(cfg.sweep.values.iter().filter(|&&v| v > 0.0).map(|&v| (v, 0.0)));
    }
    let (split, sys) = load_system(cfg, dir)?;
    let cases = experiment::eval_cases(&split.test, &cfg.eval);
    let results = experiment::sweep(&sys, &cases, &base, &points, &cfg.eval)?;
    let out = a.out.clone().unwrap_or_else(|| dir.join("sweep.csv"));
    let csv = experiment::sweep_csv(&results);
    write_atomic(&out, csv.as_bytes())?;
    m.output(&out);
    m.write(dir, Some(cfg))?;
    print!("{csv}");
    Ok(())
}

fn pipeline(cli: &Cli, cmd: &PipelineCommand) -> anyhow::Result<()> {
    let cfg = load_config(cli)?;
    match cmd {
        PipelineCommand::Run(a) => {
            let mut m = Manifest::new("pipeline-run");
            let mut pcfg = cfg.pipeline.clone();
            if let Some(l) = &a.target_language {
                pcfg.target_language = l.clone();
            }
            if let Some(p) = a.parallelism {
                pcfg.parallelism = p;
            }
            pcfg.validate()?;
            let backend: Box<dyn LlmBackend> = match a.backend {
                BackendKind::Mock => match &a.mock_table {
                    None => Box::new(MockBackend::new()),
                    Some(p) => {
                        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                        let table: HashMap<String, MockRule> = serde_json::from_str(&text).map_err(|e| {
                            motionguide::Error::Parse {
                                path: p.to_path_buf(),
                                line: e.line(),
                                message: e.to_string(),
                            }
                        })?;
                        Box::new(MockBackend::from_table(table))
                    }
                },
                BackendKind::Http => {
                    let endpoint = a
                        .endpoint
                        .as_deref()
                        .ok_or_else(|| Usage("--endpoint is required with --backend http".into()))?;
                    let model = a.model.as_deref().ok_or_else(|| Usage("--model is required with --backend http".into()))?;
                    Box::new(http::HttpBackend::new(endpoint, model, Duration::from_secs(a.timeout_secs)))
                }
            };
            let summary = run_pipeline(&a.input, backend.as_ref(), &a.out, &pcfg)?;
            m.extra.insert("pipeline".into(), serde_json::to_value(&pcfg)?);
            m.extra.insert("summary".into(), serde_json::to_value(&summary)?);
            m.write(&a.out, None)?;
            println!(
                "accepted {}  review {}  failed {}  (groups: {} processed, {} skipped, {} filtered; {} requests)",
                summary.accepted,
                summary.review,
                summary.failed,
                summary.groups_processed,
                summary.groups_skipped,
                summary.groups_filtered,
                summary.llm_requests
            );
            Ok(())
        }
        PipelineCommand::ReviewApply { out, edited } => {
            let mut m = Manifest::new("pipeline-review-apply");
            let s = apply_review(out, edited)?;
            m.extra.insert("summary".into(), serde_json::to_value(&s)?);
            m.write(out, None)?;
            println!("moved {} item(s) to accepted; {} still in review", s.moved_to_accepted, s.still_in_review);
            Ok(())
        }
    }
}
