//! `bar`: generate corpora, train, evaluate, export traces and check gradients.

mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use bar_core::autodiff::{Checkpoint, OpKind};
use bar_core::corpus::{generate_synthetic, load_corpus, save_corpus, save_corpus_jsonl, split, GroundingSample};
use bar_core::extractor::InitBoundary;
use bar_core::gradcheck::gradcheck;
use bar_core::inference::{evaluate, export_trace, ground, EvalPolicy, DEFAULT_THRESHOLDS};
use bar_core::model::BarModel;
use bar_core::trainer::{MetricsLog, Trainer};
use bar_core::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{RunConfig, CONFIG_ECHO};

const CHECKPOINT: &str = "checkpoint.json";
const TRAIN_STATE: &str = "train_state.json";
const METRICS: &str = "metrics.jsonl";
const HELDOUT: &str = "heldout.bar";

#[derive(Parser)]
#[command(name = "bar", version, about = "Boundary-adaptive video grounding agent")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    Gen(GenArgs),
    /// Train a model into a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint and print the tIoU table.
    Eval(EvalArgs),
    /// Export the refinement trace of one query.
    Trace(TraceArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum CorpusFormat {
    Binary,
    Jsonl,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    /// TOML run config; its [corpus] section is used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    samples: Option<usize>,
    /// Clip count range as MIN,MAX.
    #[arg(long, value_parser = parse_pair::<usize>)]
    clips: Option<(usize, usize)>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    snr: Option<f64>,
    /// Planted segment length as a fraction of the video, MIN,MAX.
    #[arg(long, value_parser = parse_pair::<f64>)]
    segment_fraction: Option<(f64, f64)>,
    #[arg(long, value_enum, default_value = "binary")]
    format: CorpusFormat,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum InitArg {
    Quarter,
    Third,
    Fifth,
}

impl From<InitArg> for InitBoundary {
    fn from(v: InitArg) -> Self {
        match v {
            InitArg::Quarter => InitBoundary::Quarter,
            InitArg::Third => InitBoundary::Third,
            InitArg::Fifth => InitBoundary::Fifth,
        }
    }
}

#[derive(Args)]
struct AblationArgs {
    /// Drop the left/right context features from the planner state.
    #[arg(long)]
    no_context: bool,
    /// Zero the intra-video ranking weight.
    #[arg(long)]
    no_intra: bool,
    /// Fixed amplitude (e.g. 5, 10, 15) or "off".
    #[arg(long, value_parser = parse_amplitude)]
    fixed_amplitude: Option<AmplitudeArg>,
    #[arg(long)]
    random_reward: bool,
    /// Stop refining once the score reaches this value.
    #[arg(long, num_args = 0..=1, default_missing_value = "0.9")]
    with_stop_threshold: Option<f64>,
    #[arg(long)]
    no_penalty: bool,
    #[arg(long, value_enum)]
    init_boundary: Option<InitArg>,
}

impl AblationArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let a = &mut cfg.ablation;
        a.no_context |= self.no_context;
        a.no_intra |= self.no_intra;
        if let Some(AmplitudeArg(nu)) = self.fixed_amplitude {
            a.fixed_amplitude = nu;
        }
        a.random_reward |= self.random_reward;
        if self.with_stop_threshold.is_some() {
            a.with_stop_threshold = self.with_stop_threshold;
        }
        a.no_penalty |= self.no_penalty;
        if let Some(init) = self.init_boundary {
            a.init_boundary = Some(init.into());
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus file; a corpus is generated from [corpus] when absent.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, env = "BAR_RUN_DIR")]
    run_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    half_period: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Continue from the run directory's training state.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    joint_update: bool,
    #[arg(long)]
    encoder_in_a2c: bool,
    #[command(flatten)]
    ablation: AblationArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Greedy,
    Random,
    Center,
}

#[derive(Args)]
struct ModelInputs {
    /// Run directory supplying checkpoint, config and held-out corpus defaults.
    #[arg(long, env = "BAR_RUN_DIR")]
    run_dir: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[command(flatten)]
    ablation: AblationArgs,
}

struct Loaded {
    config: RunConfig,
    model: BarModel,
    samples: Vec<GroundingSample>,
}

impl ModelInputs {
    fn in_run_dir(&self, explicit: &Option<PathBuf>, name: &str) -> anyhow::Result<PathBuf> {
        match (explicit, &self.run_dir) {
            (Some(p), _) => Ok(p.clone()),
            (None, Some(dir)) => Ok(dir.join(name)),
            (None, None) => Err(Error::Config(format!("no --run-dir and no path for {name}")).into()),
        }
    }

    fn load(&self) -> anyhow::Result<Loaded> {
        let mut config = match (&self.config, &self.run_dir) {
            (Some(p), _) => RunConfig::load(p)?,
            (None, Some(dir)) if dir.join(CONFIG_ECHO).exists() => RunConfig::load(&dir.join(CONFIG_ECHO))?,
            _ => RunConfig::default(),
        };
        self.ablation.apply(&mut config);
        let config = config.resolve()?;
        let mut model = BarModel::new(config.model.clone())?;
        let ckpt = self.in_run_dir(&self.checkpoint, CHECKPOINT)?;
        model.store.load_checkpoint(&Checkpoint::load(&ckpt)?)?;
        let corpus = self.in_run_dir(&self.corpus, HELDOUT)?;
        let samples = load_corpus(&corpus)?;
        Ok(Loaded { config, model, samples })
    }
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    inputs: ModelInputs,
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value = "greedy")]
    policy: PolicyArg,
    /// Seed of the random policy; sample i uses seed + i.
    #[arg(long, default_value_t = 99)]
    policy_seed: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Write one trace file per query here.
    #[arg(long)]
    trace_dir: Option<PathBuf>,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct TraceArgs {
    #[command(flatten)]
    inputs: ModelInputs,
    /// Index of the query in the corpus.
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Corrupt the backward pass of one op kind (test mode).
    #[arg(long)]
    inject_fault: Option<String>,
    #[arg(long)]
    json: Option<PathBuf>,
}

fn parse_pair<T: std::str::FromStr>(s: &str) -> Result<(T, T), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected MIN,MAX, got {s:?}"))?;
    let p = |v: &str| v.trim().parse::<T>().map_err(|_| format!("cannot parse {v:?}"));
    Ok((p(a)?, p(b)?))
}

/// `--fixed-amplitude` value; `None` is "off".
#[derive(Clone, Copy)]
struct AmplitudeArg(Option<usize>);

fn parse_amplitude(s: &str) -> Result<AmplitudeArg, String> {
    if s.eq_ignore_ascii_case("off") {
        return Ok(AmplitudeArg(None));
    }
    match s.parse::<usize>() {
        Ok(n) if n > 0 => Ok(AmplitudeArg(Some(n))),
        _ => Err(format!("expected a positive integer or \"off\", got {s:?}")),
    }
}

fn cmd_gen(args: GenArgs) -> anyhow::Result<()> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?.corpus,
        None => Default::default(),
    };
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.samples {
        cfg.num_samples = v;
    }
    if let Some(v) = args.clips {
        cfg.clip_count_range = v;
    }
    if let Some(v) = args.feature_dim {
        cfg.feature_dim = v;
    }
    if let Some(v) = args.vocab {
        cfg.vocab_size = v;
    }
    if let Some(v) = args.snr {
        cfg.signal_to_noise = v;
    }
    if let Some(v) = args.segment_fraction {
        cfg.segment_fraction_range = v;
    }
    cfg.validate()?;
    let corpus = generate_synthetic(&cfg)?;
    match args.format {
        CorpusFormat::Binary => save_corpus(&corpus, &args.out)?,
        CorpusFormat::Jsonl => save_corpus_jsonl(&corpus, &args.out)?,
    }
    println!("wrote {} samples to {}", corpus.len(), args.out.display());
    Ok(())
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if args.seed.is_some() {
        cfg.seed = args.seed;
    }
    if let Some(v) = args.iterations {
        cfg.train.total_iterations = v;
    }
    if let Some(v) = args.half_period {
        cfg.train.half_period = v;
    }
    if let Some(v) = args.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = args.hidden {
        cfg.model.hidden_size = v;
        cfg.model.embed_dim = v;
    }
    if let Some(v) = args.eval_every {
        cfg.train.eval_every = v;
    }
    cfg.train.joint_update |= args.joint_update;
    cfg.train.encoder_in_a2c |= args.encoder_in_a2c;
    if let Some(c) = &args.corpus {
        cfg.paths.corpus = Some(c.clone());
    }
    args.ablation.apply(&mut cfg);
    let run_dir = args
        .run_dir
        .clone()
        .or_else(|| cfg.paths.run_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs/default"));
    cfg.paths.run_dir = Some(run_dir.clone());
    let cfg = cfg.resolve()?;

    let corpus = match &cfg.paths.corpus {
        Some(p) => load_corpus(p)?,
        None => generate_synthetic(&cfg.corpus)?,
    };
    if let Some(s) = corpus.first() {
        if s.feature_dim() != cfg.model.feature_dim {
            return Err(Error::Config(format!(
                "corpus feature dim {} differs from model.feature_dim {}",
                s.feature_dim(),
                cfg.model.feature_dim
            ))
            .into());
        }
    }
    let (train, heldout) = split(&corpus, cfg.train_fraction, cfg.train.seed)?;

    std::fs::create_dir_all(&run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
    cfg.save(&run_dir.join(CONFIG_ECHO))?;
    save_corpus(&heldout, &run_dir.join(HELDOUT))?;

    let state_path = run_dir.join(TRAIN_STATE);
    let mut trainer = if args.resume {
        let mut t = Trainer::load_state(&state_path)?;
        if t.model.config != cfg.model {
            bail!(Error::Config("model config differs from the saved training state".into()));
        }
        t.config.total_iterations = cfg.train.total_iterations;
        t.config.eval_every = cfg.train.eval_every;
        t
    } else {
        Trainer::new(BarModel::new(cfg.model.clone())?, cfg.train.clone())?
    };
    trainer = trainer.with_diagnostic_dir(&run_dir);
    println!(
        "training {} samples ({} held out) from iteration {} to {} in {}",
        train.len(),
        heldout.len(),
        trainer.iteration(),
        trainer.config.total_iterations,
        run_dir.display()
    );

    let mut log = MetricsLog::append(&run_dir.join(METRICS))?;
    let heldout_ref = (cfg.train.eval_every > 0).then_some(heldout.as_slice());
    let result = trainer.train(&train, heldout_ref, |rec| {
        log.write(rec)?;
        if let Some(e) = &rec.eval {
            println!(
                "iter {:>6}  tIoU@0.3 {:.3}  @0.5 {:.3}  @0.7 {:.3}  mean {:.4}",
                rec.iteration + 1,
                e.tiou_03,
                e.tiou_05,
                e.tiou_07,
                e.mean_tiou
            );
        }
        Ok(())
    });
    log.flush()?;
    if let Err(e) = result {
        if matches!(e, Error::Training { .. }) {
            bail!("{e}; diagnostic dump written under {}", run_dir.display());
        }
        return Err(e.into());
    }
    trainer.save_state(&state_path)?;
    trainer.model.store.save(&run_dir.join(CHECKPOINT))?;
    let m = trainer.evaluate(&heldout)?;
    println!(
        "final  tIoU@0.3 {:.3}  @0.5 {:.3}  @0.7 {:.3}  mean {:.4}",
        m.tiou_03, m.tiou_05, m.tiou_07, m.mean_tiou
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let Loaded { config, model, samples } = args.inputs.load()?;
    let thresholds = args.thresholds.unwrap_or_else(|| DEFAULT_THRESHOLDS.to_vec());
    if thresholds.is_empty() || thresholds.iter().any(|t| !(0.0..1.0).contains(t)) {
        bail!(Error::Config("thresholds must lie in [0, 1)".into()));
    }
    if args.workers == 0 {
        bail!(Error::Config("--workers must be at least 1".into()));
    }
    let policy = match args.policy {
        PolicyArg::Greedy => EvalPolicy::Greedy,
        PolicyArg::Random => EvalPolicy::Uniform { seed: args.policy_seed },
        PolicyArg::Center => EvalPolicy::FixedInitial,
    };
    let report = evaluate(&model, &samples, &config.inference, &thresholds, policy, args.workers)?;
    print!("{}", report.table());
    if let Some(dir) = &args.trace_dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for s in &samples {
            let result = ground(&model, s, &config.inference)?;
            export_trace(&result, &dir.join(trace_name(&s.video_id)))?;
        }
        println!("wrote {} traces to {}", samples.len(), dir.display());
    }
    if let Some(p) = &args.json {
        let text = serde_json::to_string_pretty(&report)?;
        std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn trace_name(video_id: &str) -> String {
    let safe: String = video_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{safe}.trace.jsonl")
}

fn cmd_trace(args: TraceArgs) -> anyhow::Result<()> {
    let Loaded { config, model, samples } = args.inputs.load()?;
    let Some(sample) = samples.get(args.index) else {
        bail!(Error::Config(format!(
            "index {} out of range for {} samples",
            args.index,
            samples.len()
        )));
    };
    let result = ground(&model, sample, &config.inference)?;
    export_trace(&result, &args.out)?;
    println!(
        "{}: predicted [{}, {}) at step {} from {} candidates",
        result.video_id,
        result.prediction.start,
        result.prediction.end,
        result.best_step,
        result.candidates_examined
    );
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> anyhow::Result<bool> {
    let fault = match &args.inject_fault {
        None => None,
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| {
            let known: Vec<&str> = OpKind::DIFFERENTIABLE.iter().map(|k| k.name()).collect();
            Error::Config(format!("unknown op {name:?}; known ops: {}", known.join(", ")))
        })?),
    };
    let report = gradcheck(fault)?;
    print!("{}", report.table());
    if let Some(p) = &args.json {
        std::fs::write(p, serde_json::to_string_pretty(&report)?)
            .with_context(|| format!("writing {}", p.display()))?;
    }
    if report.passed() {
        println!("all {} cases passed in {:.2} s", report.cases.len(), report.seconds);
        return Ok(true);
    }
    let names: Vec<&str> = report.failures().iter().map(|c| c.name.as_str()).collect();
    match &args.inject_fault {
        Some(op) => eprintln!("gradient mismatch in {} (fault injected into {op})", names.join(", ")),
        None => eprintln!("gradient mismatch in {}", names.join(", ")),
    }
    Ok(false)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Gen(a) => cmd_gen(a).map(|_| true),
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Eval(a) => cmd_eval(a).map(|_| true),
        Command::Trace(a) => cmd_trace(a).map(|_| true),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
