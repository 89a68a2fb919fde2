//! Command-line entry points: data generation, training, evaluation,
//! prediction, ablations, gradient checks, heatmaps and captioning.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mmchange::data::perturb::{DEFAULT_BRIGHTNESS, DEFAULT_CONTRAST, DEFAULT_NOISE_SIGMA};
use mmchange::data::{self, generate_dataset, load_dataset, load_mask, load_rgb, BiTemporalSample, Perturbation};
use mmchange::encoders::captioner::{caption_pairs, CaptionerConfig, DEFAULT_PROMPT, DEFAULT_TEMPERATURE, DEFAULT_TOP_P};
use mmchange::encoders::captions::load_captions;
use mmchange::metrics::{confusion, EvalReport};
use mmchange::model::{predict_mask, AblationFlags, Checkpoint, LoadOptions, ModelInput};
use mmchange::training::ablation::{self, AblationPlan, ABLATION_FILE, DEFAULT_VARIANTS};
use mmchange::training::gradcheck::{self, Dims, Target, DEFAULT_EPS, DEFAULT_MAX_COORDS};
use mmchange::training::trainer::{evaluate, CHECKPOINT_FILE};
use mmchange::training::{TrainConfig, Trainer};
use mmchange::visualize;

const SEED_ENV: &str = "MMCHANGE_SEED";

#[derive(Parser)]
#[command(name = "mmchange", version, about = "Multimodal bitemporal change detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic bitemporal dataset.
    GenData(GenDataArgs),
    /// Train a model and write checkpoint.bin and train.log.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write eval.json and eval.txt.
    Eval(EvalArgs),
    /// Predict the change mask of one image pair.
    Predict(PredictArgs),
    /// Train every ablation variant and write ablation.tsv.
    Ablate(AblateArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Export the finest-scale fusion gate as a heatmap PNG.
    Heatmap(HeatmapArgs),
    /// Caption a dataset through an HTTP captioner and write captions.jsonl.
    Caption(CaptionArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    count: usize,
    /// Image side in pixels, a multiple of 32.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set lr0=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Overrides the configured seed.
    #[arg(long, env = SEED_ENV)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::from_file(p).with_context(|| format!("reading config {}", p.display()))?,
            None => TrainConfig::default(),
        };
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .with_context(|| format!("--set `{o}`: expected KEY=VALUE"))?;
            cfg.set(k, v).with_context(|| format!("--set `{o}`"))?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    /// Held-out dataset evaluated at `eval_interval` and after the last step.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Continue from `<out>/checkpoint.bin`.
    #[arg(long)]
    resume: bool,
    #[arg(long, conflicts_with = "image_only")]
    no_ifr: bool,
    #[arg(long, conflicts_with = "image_only")]
    no_tde: bool,
    #[arg(long, conflicts_with = "image_only")]
    no_itff: bool,
    /// Image branch only: no text, every module replaced by its fallback.
    #[arg(long)]
    image_only: bool,
    /// Print every step, not only evaluations.
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct PerturbArgs {
    /// Standard deviation of additive Gaussian noise.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Brightness offset.
    #[arg(long, default_value_t = 0.0)]
    brightness: f64,
    /// Contrast factor about mid-grey.
    #[arg(long, default_value_t = 1.0)]
    contrast: f64,
}

impl PerturbArgs {
    fn perturbation(&self) -> Result<Perturbation> {
        if !(self.noise >= 0.0) {
            bail!("--noise must be non-negative, got {}", self.noise);
        }
        if !(self.contrast > 0.0) {
            bail!("--contrast must be positive, got {}", self.contrast);
        }
        Ok(Perturbation {
            noise_sigma: self.noise,
            brightness: self.brightness,
            contrast: self.contrast,
        })
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    perturb: PerturbArgs,
    /// Seed of the perturbation noise.
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    seed: u64,
    /// Report directory; defaults to the checkpoint's directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PairArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Image at time 1.
    #[arg(long)]
    a: PathBuf,
    /// Image at time 2.
    #[arg(long)]
    b: PathBuf,
    /// captions.jsonl holding this pair.
    #[arg(long, conflicts_with_all = ["caption_a", "caption_b"])]
    captions: Option<PathBuf>,
    /// Sample id in the captions file; defaults to the stem of `--a`.
    #[arg(long, requires = "captions")]
    id: Option<String>,
    #[arg(long, requires = "caption_b")]
    caption_a: Option<String>,
    #[arg(long, requires = "caption_a")]
    caption_b: Option<String>,
}

impl PairArgs {
    fn captions(&self) -> Result<Option<(String, String)>> {
        if let (Some(a), Some(b)) = (&self.caption_a, &self.caption_b) {
            return Ok(Some((a.clone(), b.clone())));
        }
        let Some(path) = &self.captions else {
            return Ok(None);
        };
        let map = load_captions(path)?;
        let id = match &self.id {
            Some(id) => id.clone(),
            None => stem(&self.a)?,
        };
        let pair = map
            .get(&id)
            .with_context(|| format!("no captions for `{id}` in {}", path.display()))?;
        Ok(Some((pair.t1.clone(), pair.t2.clone())))
    }
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    pair: PairArgs,
    /// Ground-truth mask; enables the overlay.
    #[arg(long)]
    label: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    /// Held-out dataset; without it the last third of `--data` is held out.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated variants (full, no-ifr, no-tde, no-itff, image-only, text-fallback).
    #[arg(long)]
    variants: Option<String>,
    /// Comma-separated training seeds.
    #[arg(long, default_value = "0,1,2")]
    seeds: String,
    /// Also evaluate under noise, brightness and contrast perturbation.
    #[arg(long)]
    robustness: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Layer or module name, `primitives`, `modules` or `all`.
    #[arg(long, default_value = "all", value_parser = parse_selector)]
    module: String,
    /// `CxHxW` or `NxCxHxW` for layer and module targets.
    #[arg(long, default_value = "2x4x4x4", value_parser = |s: &str| s.parse::<Dims>().map_err(|e| e.to_string()))]
    dims: Dims,
    #[arg(long, default_value_t = DEFAULT_EPS)]
    eps: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_COORDS)]
    max_coords: usize,
    /// Overrides the per-target pass threshold.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct HeatmapArgs {
    #[command(flatten)]
    pair: PairArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CaptionArgs {
    /// Dataset root containing `A/` and `B/`.
    #[arg(long)]
    data: PathBuf,
    /// Captioner base URL; requests go to `<endpoint>/describe`.
    #[arg(long)]
    endpoint: String,
    /// Output file; defaults to `<data>/captions.jsonl`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = DEFAULT_PROMPT)]
    prompt: String,
    #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
    temperature: f64,
    #[arg(long, default_value_t = DEFAULT_TOP_P)]
    top_p: f64,
    /// Per-request timeout in seconds.
    #[arg(long, default_value_t = 60)]
    timeout: u64,
    /// Attempts per image on transport failure.
    #[arg(long, default_value_t = 3)]
    attempts: u32,
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Ablate(a) => ablate(a),
        Command::Gradcheck(a) => return gradcheck(a),
        Command::Heatmap(a) => heatmap(a),
        Command::Caption(a) => caption(a),
    }?;
    Ok(ExitCode::SUCCESS)
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let m = generate_dataset(a.seed, a.count, a.size, &a.out)?;
    println!("wrote {} samples of {}x{} to {} (seed {})", m.count, m.size, m.size, a.out.display(), m.seed);
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = a.config.load()?;
    let flags = &mut cfg.model.flags;
    if a.image_only {
        *flags = AblationFlags::IMAGE_ONLY;
    }
    flags.use_ifr &= !a.no_ifr;
    flags.use_tde &= !a.no_tde;
    flags.use_itff &= !a.no_itff;
    cfg.validate()?;
    let train = load_dataset(&a.data)?;
    require_captions(&cfg, &train)?;
    let eval = a.eval_data.as_deref().map(load_dataset).transpose()?;
    if let Some(e) = &eval {
        require_captions(&cfg, e)?;
    }
    let ckpt_path = a.out.join(CHECKPOINT_FILE);
    let mut trainer = if a.resume && ckpt_path.exists() {
        let ckpt = Checkpoint::load(&ckpt_path, &LoadOptions::default())?;
        let t = Trainer::resume(cfg, ckpt)?;
        println!("resuming at step {}", t.step);
        t
    } else {
        Trainer::new(cfg)?
    };
    println!(
        "training {} for {} steps on {} samples",
        trainer.config.model.flags.name(),
        trainer.config.total_steps(),
        train.samples.len()
    );
    let verbose = a.verbose;
    let eval_samples = eval.as_ref().map(|d| d.samples.as_slice());
    trainer.run(&train.samples, eval_samples, Some(&a.out), |line| {
        if verbose || line.starts_with("EVAL") {
            println!("{line}");
        }
    })?;
    println!("wrote {}", ckpt_path.display());
    Ok(())
}

fn require_captions(cfg: &TrainConfig, d: &data::Dataset) -> Result<()> {
    if cfg.model.flags.use_text && !d.has_captions && !d.samples.is_empty() {
        bail!(
            "{} has no captions.jsonl but the model uses text (run `caption` or train with --image-only)",
            d.root.display()
        );
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path, &LoadOptions::default()).with_context(|| format!("loading {}", path.display()))
}

fn eval(a: EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let pert = a.perturb.perturbation()?;
    let data = load_dataset(&a.data)?;
    if ckpt.config.flags.use_text && !data.has_captions && !data.samples.is_empty() {
        bail!("checkpoint uses text but {} has no captions.jsonl", a.data.display());
    }
    let model = ckpt.model()?;
    let report = EvalReport::new(evaluate(&model, &ckpt.params, &data.samples, &pert, a.seed)?);
    let out = match a.out {
        Some(o) => o,
        None => a.ckpt.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("eval.json"), report.to_json() + "\n")?;
    fs::write(out.join("eval.txt"), report.to_table())?;
    print!("{}", report.to_table());
    Ok(())
}

fn stem(p: &Path) -> Result<String> {
    p.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .with_context(|| format!("cannot derive a sample id from {}", p.display()))
}

/// Loads the pair and runs the checkpoint in eval mode.
fn forward_pair(pair: &PairArgs) -> Result<(BiTemporalSample, mmchange::Tensor, Option<mmchange::Tensor>)> {
    let ckpt = load_checkpoint(&pair.ckpt)?;
    let image_a = load_rgb(&pair.a)?;
    let image_b = load_rgb(&pair.b)?;
    let (sa, sb) = (image_a.shape(), image_b.shape());
    if sa != sb {
        bail!("--a is {sa} but --b is {sb}");
    }
    let (caption_a, caption_b) = match pair.captions()? {
        Some(c) => c,
        None if ckpt.config.flags.use_text => {
            bail!("the checkpoint uses text: pass --captions FILE or --caption-a/--caption-b")
        }
        None => (String::new(), String::new()),
    };
    let sample = BiTemporalSample {
        id: stem(&pair.a)?,
        image_a,
        image_b,
        caption_a,
        caption_b,
        mask: mmchange::metrics::ChangeMask::zeros(sa.h, sa.w),
    };
    let model = ckpt.model()?;
    let (ca, cb) = ([sample.caption_a.clone()], [sample.caption_b.clone()]);
    let input = ModelInput {
        images_a: &sample.image_a,
        images_b: &sample.image_b,
        captions_a: &ca,
        captions_b: &cb,
    };
    let (logits, gate) = model.logits_and_gate(&ckpt.params, &input)?;
    Ok((sample, logits, gate))
}

fn predict(a: PredictArgs) -> Result<()> {
    let (sample, logits, _) = forward_pair(&a.pair)?;
    let pred = predict_mask(&logits).remove(0);
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mask_path = a.out.join(format!("{}_mask.png", sample.id));
    data::save_mask(&mask_path, &pred)?;
    println!("wrote {} ({} changed pixels)", mask_path.display(), pred.count_changed());
    if let Some(label) = &a.label {
        let gt = load_mask(label)?;
        let img = visualize::overlay(&pred, &gt)?;
        let path = a.out.join(format!("{}_overlay.png", sample.id));
        img.save(&path).with_context(|| format!("writing {}", path.display()))?;
        print!("{}", EvalReport::new(confusion(&pred, &gt)?).to_table());
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let base = a.config.load()?;
    base.validate()?;
    let variants = match &a.variants {
        Some(v) => ablation::parse_variants(v)?,
        None => DEFAULT_VARIANTS.to_vec(),
    };
    let seeds: Vec<u64> = a
        .seeds
        .split(',')
        .map(|s| s.trim().parse().with_context(|| format!("--seeds: bad seed `{s}`")))
        .collect::<Result<_>>()?;
    let data = load_dataset(&a.data)?;
    let (train, test): (Vec<BiTemporalSample>, Vec<BiTemporalSample>) = match &a.test {
        Some(t) => (data.samples, load_dataset(t)?.samples),
        None => {
            let cut = data.samples.len() - data.samples.len() / 3;
            let mut all = data.samples;
            let test = all.split_off(cut);
            (all, test)
        }
    };
    if train.is_empty() || test.is_empty() {
        bail!("ablation needs non-empty train and test sets ({} / {})", train.len(), test.len());
    }
    let plan = AblationPlan {
        base,
        variants,
        seeds,
        train: &train,
        test: &test,
        perturbation: a.robustness.then_some(Perturbation {
            noise_sigma: DEFAULT_NOISE_SIGMA,
            brightness: DEFAULT_BRIGHTNESS,
            contrast: DEFAULT_CONTRAST,
        }),
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    println!("{}", ablation::TSV_HEADER);
    let rows = ablation::run_ablation(&plan, Some(&a.out), |row| println!("{}", ablation::tsv_line(row)));
    let path = a.out.join(ABLATION_FILE);
    fs::write(&path, ablation::ablation_tsv(&rows))?;
    if plan.variants.contains(&AblationFlags::FULL) {
        for v in plan.variants.iter().filter(|v| **v != AblationFlags::FULL) {
            let (won, total) = ablation::wins(&rows, AblationFlags::FULL, *v);
            println!("full >= {} on IoU in {won} of {total} seeds", v.name());
        }
    }
    println!("wrote {}", path.display());
    let failed = rows.iter().filter(|r| r.clean.is_err()).count();
    if failed > 0 {
        bail!("{failed} of {} runs failed", rows.len());
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let mut failed = 0;
    for t in Target::select(&a.module)? {
        let r = gradcheck::gradcheck(t, a.dims, a.eps, a.max_coords, a.seed)?;
        let tol = a.threshold.unwrap_or_else(|| t.tolerance());
        let ok = r.max_rel_err < tol;
        failed += usize::from(!ok);
        println!("{} {r} (threshold {tol:.0e})", if ok { "PASS" } else { "FAIL" });
    }
    Ok(if failed == 0 {
        ExitCode::SUCCESS
    } else {
        eprintln!("{failed} target(s) above threshold");
        ExitCode::from(1)
    })
}

fn parse_selector(s: &str) -> std::result::Result<String, String> {
    Target::select(s).map(|_| s.to_string()).map_err(|e| e.to_string())
}

fn heatmap(a: HeatmapArgs) -> Result<()> {
    let (sample, _, gate) = forward_pair(&a.pair)?;
    let gate = gate.context("the checkpoint has no fusion gate (ITFF is disabled)")?;
    let img = visualize::heatmap(&gate, sample.height(), sample.width())?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let path = a.out.join(format!("{}_heatmap.png", sample.id));
    img.save(&path).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn caption(a: CaptionArgs) -> Result<()> {
    let a_dir = a.data.join("A");
    let mut ids: Vec<String> = fs::read_dir(&a_dir)
        .with_context(|| format!("reading {}", a_dir.display()))?
        .filter_map(|e| {
            let p = e.ok()?.path();
            (p.extension()? == "png").then(|| p.file_stem()?.to_str().map(str::to_string))?
        })
        .collect();
    ids.sort();
    let pairs: Vec<(String, PathBuf, PathBuf)> = ids
        .into_iter()
        .map(|id| {
            let a_path = a_dir.join(format!("{id}.png"));
            let b_path = a.data.join("B").join(format!("{id}.png"));
            (id, a_path, b_path)
        })
        .collect();
    let cfg = CaptionerConfig {
        prompt: a.prompt,
        temperature: a.temperature,
        top_p: a.top_p,
        timeout: Duration::from_secs(a.timeout),
        attempts: a.attempts,
        concurrency: a.concurrency,
        ..CaptionerConfig::new(a.endpoint)
    };
    let out = a.out.unwrap_or_else(|| a.data.join("captions.jsonl"));
    let written = caption_pairs(&pairs, &cfg, &out)?;
    println!("captioned {} pairs into {}", written.len(), out.display());
    Ok(())
}
