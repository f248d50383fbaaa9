//! Command line driver. Every subcommand resolves its knobs from flags,
//! an optional key=value config file, and defaults (in that order), echoes
//! the resolved configuration to stdout and a sidecar file, then runs.
//! Exit codes: 0 success, 1 usage problem, 2 runtime failure.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{error::ErrorKind, Args, Parser, Subcommand};

use aocr::alphabet::Alphabet;
use aocr::bench;
use aocr::checks;
use aocr::dataset::{generate, Dataset, GenSpec, Loader, Split};
use aocr::decoder::AttentionKind;
use aocr::model::{self, ModelConfig};
use aocr::trainer::{self, TrainConfig, TrainState};
use aocr::viz;

#[derive(Parser)]
#[command(
    name = "aocr",
    about = "Multi-view scene text recognizer: data generation, training, \
             inference, visualization and benchmarking",
    version,
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic multi-view dataset to a directory.
    Generate(GenerateArgs),
    /// Train a model and write checkpoint plus metrics.
    Train(TrainArgs),
    /// Report loss and full-sequence accuracy of a checkpoint on a split.
    Eval(EvalArgs),
    /// Print the decoded string for each sample of a split.
    Infer(InferArgs),
    /// Write saliency and attention overlay images for one sample.
    Visualize(VisualizeArgs),
    /// Train the same model under several extractor presets and compare.
    Sweep(SweepArgs),
    /// Run the finite-difference gradient suite and print per-op errors.
    Gradcheck(GradcheckArgs),
}

enum Failure {
    Usage(String),
    Runtime(String),
}

type CliResult<T> = Result<T, Failure>;

impl From<aocr::Error> for Failure {
    fn from(e: aocr::Error) -> Failure {
        Failure::Runtime(e.to_string())
    }
}

/// Key=value store from --config, consumed as flags resolve. Leftover
/// keys after resolution are spelling mistakes and get rejected.
struct Conf {
    file: BTreeMap<String, String>,
    source: Option<PathBuf>,
}

impl Conf {
    fn load(path: Option<&Path>) -> CliResult<Conf> {
        let mut file = BTreeMap::new();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| {
                Failure::Runtime(format!("cannot read config {}: {e}", p.display()))
            })?;
            for (i, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let Some((k, v)) = line.split_once('=') else {
                    return Err(Failure::Usage(format!(
                        "config {} line {}: expected key=value, got `{line}`",
                        p.display(),
                        i + 1
                    )));
                };
                if file
                    .insert(k.trim().to_string(), v.trim().to_string())
                    .is_some()
                {
                    return Err(Failure::Usage(format!(
                        "config {}: duplicate key `{}`",
                        p.display(),
                        k.trim()
                    )));
                }
            }
        }
        Ok(Conf {
            file,
            source: path.map(Path::to_path_buf),
        })
    }

    fn get<T: FromStr>(&mut self, key: &str, cli: Option<T>, default: T) -> CliResult<T> {
        Ok(self.get_opt(key, cli)?.unwrap_or(default))
    }

    fn get_opt<T: FromStr>(&mut self, key: &str, cli: Option<T>) -> CliResult<Option<T>> {
        if let Some(v) = cli {
            self.file.remove(key);
            return Ok(Some(v));
        }
        match self.file.remove(key) {
            Some(s) => s
                .parse()
                .map(Some)
                .map_err(|_| Failure::Usage(format!("config key {key}: cannot parse `{s}`"))),
            None => Ok(None),
        }
    }

    fn finish(self) -> CliResult<()> {
        if let Some(key) = self.file.keys().next() {
            let at = self
                .source
                .map(|p| p.display().to_string())
                .unwrap_or_default();
            return Err(Failure::Usage(format!("config {at}: unknown key `{key}`")));
        }
        Ok(())
    }
}

fn kv(key: &str, value: impl Display) -> (String, String) {
    (key.to_string(), value.to_string())
}

/// Print the resolved configuration and write it next to the outputs.
fn echo_config(out_dir: &Path, command: &str, entries: &[(String, String)]) -> CliResult<()> {
    let mut text = format!("command={command}\n");
    for (k, v) in entries {
        text.push_str(&format!("{k}={v}\n"));
    }
    print!("{text}");
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", out_dir.display())))?;
    let path = out_dir.join(format!("{command}.config"));
    std::fs::write(&path, text)
        .map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

#[derive(Args)]
struct ModelOpts {
    /// Symbols of the alphabet in index order, null excluded.
    #[arg(long)]
    alphabet: Option<String>,
    #[arg(long)]
    t_steps: Option<usize>,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    view_h: Option<usize>,
    #[arg(long)]
    view_w: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    /// Extractor: a preset name or a cN/p layer list like c32,p,c64,p.
    #[arg(long)]
    preset: Option<String>,
    /// Attention kind: standard or location.
    #[arg(long)]
    attention: Option<String>,
    #[arg(long)]
    lstm_width: Option<usize>,
    #[arg(long)]
    attn_dim: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
}

fn parse_attention(s: &str) -> CliResult<AttentionKind> {
    match s {
        "standard" => Ok(AttentionKind::Standard),
        "location" => Ok(AttentionKind::Location),
        other => Err(Failure::Usage(format!(
            "attention must be `standard` or `location`, got `{other}`"
        ))),
    }
}

fn resolve_model(conf: &mut Conf, o: &ModelOpts) -> CliResult<ModelConfig> {
    let desk = ModelConfig::desk();
    let desk_alpha: String = desk.alphabet.chars()[1..].iter().collect();
    let alpha = conf.get("alphabet", o.alphabet.clone(), desk_alpha)?;
    let attention = parse_attention(&conf.get(
        "attention",
        o.attention.clone(),
        desk.attention.name().to_string(),
    )?)?;
    let cfg = ModelConfig {
        alphabet: Alphabet::new(alpha.chars())?,
        t_steps: conf.get("t-steps", o.t_steps, desk.t_steps)?,
        views: conf.get("views", o.views, desk.views)?,
        view_h: conf.get("view-h", o.view_h, desk.view_h)?,
        view_w: conf.get("view-w", o.view_w, desk.view_w)?,
        channels: conf.get("channels", o.channels, desk.channels)?,
        preset: conf.get("preset", o.preset.clone(), desk.preset.clone())?,
        attention,
        lstm_width: conf.get("lstm-width", o.lstm_width, desk.lstm_width)?,
        attn_dim: conf.get("attn-dim", o.attn_dim, desk.attn_dim)?,
        embed_dim: conf.get("embed-dim", o.embed_dim, desk.embed_dim)?,
        state_clip: desk.state_clip,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn model_echo(cfg: &ModelConfig) -> Vec<(String, String)> {
    let alpha: String = cfg.alphabet.chars()[1..].iter().collect();
    vec![
        kv("alphabet", alpha),
        kv("t-steps", cfg.t_steps),
        kv("views", cfg.views),
        kv("view-h", cfg.view_h),
        kv("view-w", cfg.view_w),
        kv("channels", cfg.channels),
        kv("preset", &cfg.preset),
        kv("attention", cfg.attention.name()),
        kv("lstm-width", cfg.lstm_width),
        kv("attn-dim", cfg.attn_dim),
        kv("embed-dim", cfg.embed_dim),
        kv("state-clip", cfg.state_clip),
    ]
}

#[derive(Args)]
struct TrainOpts {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    base_lr: Option<f64>,
    #[arg(long)]
    lr_decay_factor: Option<f64>,
    #[arg(long)]
    decay_at: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    label_smoothing: Option<f64>,
    /// LSTM cell and hidden state clamp.
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    polyak_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Apply crop/resize/photometric augmentation to training batches.
    #[arg(long)]
    augment: Option<bool>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Rows used for training: train, val, test or all.
    #[arg(long)]
    train_split: Option<String>,
    /// Rows used for periodic evaluation.
    #[arg(long)]
    eval_split: Option<String>,
}

fn resolve_train(conf: &mut Conf, o: &TrainOpts) -> CliResult<(TrainConfig, String, String)> {
    let steps = conf.get("steps", o.steps, 10_000)?;
    let desk = TrainConfig::desk(steps);
    let tcfg = TrainConfig {
        total_steps: steps,
        base_lr: conf.get("base-lr", o.base_lr, desk.base_lr)?,
        lr_decay_factor: conf.get("lr-decay-factor", o.lr_decay_factor, desk.lr_decay_factor)?,
        decay_at: conf.get("decay-at", o.decay_at, desk.decay_at)?,
        momentum: conf.get("momentum", o.momentum, desk.momentum)?,
        weight_decay: conf.get("weight-decay", o.weight_decay, desk.weight_decay)?,
        label_smoothing: conf.get("label-smoothing", o.label_smoothing, desk.label_smoothing)?,
        clip: conf.get("clip", o.clip, desk.clip)?,
        polyak_decay: conf.get_opt("polyak-decay", o.polyak_decay)?,
        batch_size: conf.get("batch-size", o.batch_size, desk.batch_size)?,
        seed: conf.get("seed", o.seed, desk.seed)?,
        augment: conf.get("augment", o.augment, desk.augment)?,
        eval_every: conf.get_opt("eval-every", o.eval_every)?,
    };
    tcfg.validate()?;
    let train_split = conf.get("train-split", o.train_split.clone(), "train".to_string())?;
    let eval_split = conf.get("eval-split", o.eval_split.clone(), "val".to_string())?;
    Ok((tcfg, train_split, eval_split))
}

fn train_echo(t: &TrainConfig, train_split: &str, eval_split: &str) -> Vec<(String, String)> {
    vec![
        kv("steps", t.total_steps),
        kv("base-lr", t.base_lr),
        kv("lr-decay-factor", t.lr_decay_factor),
        kv("decay-at", t.decay_at),
        kv("momentum", t.momentum),
        kv("weight-decay", t.weight_decay),
        kv("label-smoothing", t.label_smoothing),
        kv("clip", t.clip),
        kv("polyak-decay", t.resolved_polyak()),
        kv("batch-size", t.batch_size),
        kv("seed", t.seed),
        kv("augment", t.augment),
        kv("eval-every", t.eval_cadence()),
        kv("train-split", train_split),
        kv("eval-split", eval_split),
    ]
}

fn open_loader(
    data: &Path,
    split: &str,
    alphabet: &Alphabet,
    t_steps: usize,
) -> CliResult<Loader> {
    let sel = match split {
        "all" => None,
        other => Some(Split::parse(other)?),
    };
    let ds = Dataset::open(data, sel)?;
    Ok(Loader::new(ds, alphabet, t_steps)?)
}

#[derive(Args)]
struct GenerateArgs {
    /// Dataset directory to create.
    #[arg(long)]
    out: PathBuf,
    /// Flat key=value file supplying defaults for any flag.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Symbols transcriptions are drawn from.
    #[arg(long)]
    charset: Option<String>,
    #[arg(long)]
    len_min: Option<usize>,
    #[arg(long)]
    len_max: Option<usize>,
    /// Text lines per sample, 1 or 2.
    #[arg(long)]
    lines: Option<usize>,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    view_h: Option<usize>,
    #[arg(long)]
    view_w: Option<usize>,
    /// Integer glyph scale.
    #[arg(long)]
    scale: Option<usize>,
    #[arg(long)]
    clutter: Option<f64>,
    #[arg(long)]
    jitter: Option<f64>,
    /// Probability of blurring exactly one view.
    #[arg(long)]
    blur_prob: Option<f64>,
    #[arg(long)]
    blur_sigma: Option<f64>,
}

fn run_generate(a: GenerateArgs) -> CliResult<()> {
    let mut conf = Conf::load(a.config.as_deref())?;
    let desk = GenSpec::desk();
    let desk_charset: String = desk.charset.iter().collect();
    let spec = GenSpec {
        charset: conf
            .get("charset", a.charset, desk_charset)?
            .chars()
            .collect(),
        len_range: (
            conf.get("len-min", a.len_min, desk.len_range.0)?,
            conf.get("len-max", a.len_max, desk.len_range.1)?,
        ),
        lines: conf.get("lines", a.lines, desk.lines)?,
        views: conf.get("views", a.views, desk.views)?,
        view_h: conf.get("view-h", a.view_h, desk.view_h)?,
        view_w: conf.get("view-w", a.view_w, desk.view_w)?,
        scale: conf.get("scale", a.scale, desk.scale)?,
        clutter: conf.get("clutter", a.clutter, desk.clutter)?,
        jitter: conf.get("jitter", a.jitter, desk.jitter)?,
        blur_one_view: conf.get("blur-prob", a.blur_prob, desk.blur_one_view)?,
        blur_sigma: conf.get("blur-sigma", a.blur_sigma, desk.blur_sigma)?,
    };
    let count = conf.get("count", a.count, 100)?;
    let seed = conf.get("seed", a.seed, 1)?;
    conf.finish()?;
    spec.validate()?;

    let charset: String = spec.charset.iter().collect();
    let entries = vec![
        kv("out", a.out.display()),
        kv("count", count),
        kv("seed", seed),
        kv("charset", charset),
        kv("len-min", spec.len_range.0),
        kv("len-max", spec.len_range.1),
        kv("lines", spec.lines),
        kv("views", spec.views),
        kv("view-h", spec.view_h),
        kv("view-w", spec.view_w),
        kv("scale", spec.scale),
        kv("clutter", spec.clutter),
        kv("jitter", spec.jitter),
        kv("blur-prob", spec.blur_one_view),
        kv("blur-sigma", spec.blur_sigma),
    ];
    echo_config(&a.out, "generate", &entries)?;
    generate(&a.out, &spec, count, seed)?;
    println!("wrote {count} samples to {}", a.out.display());
    Ok(())
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory from `generate`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoint, metrics and config echo.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    model: ModelOpts,
    #[command(flatten)]
    train: TrainOpts,
}

fn run_train(a: TrainArgs) -> CliResult<()> {
    let mut conf = Conf::load(a.config.as_deref())?;
    let mut mcfg = resolve_model(&mut conf, &a.model)?;
    let (tcfg, train_split, eval_split) = resolve_train(&mut conf, &a.train)?;
    conf.finish()?;
    mcfg.state_clip = tcfg.clip;

    let mut entries = vec![kv("data", a.data.display()), kv("out", a.out.display())];
    entries.extend(model_echo(&mcfg));
    entries.extend(train_echo(&tcfg, &train_split, &eval_split));
    echo_config(&a.out, "train", &entries)?;

    let data = open_loader(&a.data, &train_split, &mcfg.alphabet, mcfg.t_steps)?;
    let eval = open_loader(&a.data, &eval_split, &mcfg.alphabet, mcfg.t_steps)?;
    let outcome = trainer::train(&mcfg, &tcfg, &data, &eval)?;

    let ckpt = a.out.join("model.ckpt");
    outcome.state.save(&ckpt)?;
    let metrics = a.out.join("metrics.csv");
    std::fs::write(&metrics, trainer::metrics_csv(&outcome.metrics))
        .map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", metrics.display())))?;
    let last = outcome.metrics.last().expect("training always evaluates the final step");
    println!("checkpoint={}", ckpt.display());
    println!("metrics={}", metrics.display());
    println!(
        "final_step={} train_loss={} eval_loss={} eval_fullseq_acc={}",
        last.step, last.train_loss, last.eval_loss, last.eval_fullseq_acc
    );
    Ok(())
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Directory for the config echo sidecar.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Split to score: train, val, test or all.
    #[arg(long)]
    split: Option<String>,
    /// Use raw weights instead of the Polyak average.
    #[arg(long)]
    raw_weights: Option<bool>,
    #[arg(long)]
    label_smoothing: Option<f64>,
}

fn run_eval(a: EvalArgs) -> CliResult<()> {
    let mut conf = Conf::load(a.config.as_deref())?;
    let split = conf.get("split", a.split, "test".to_string())?;
    let raw = conf.get("raw-weights", a.raw_weights, false)?;
    let smoothing = conf.get("label-smoothing", a.label_smoothing, 0.9)?;
    conf.finish()?;

    let state = TrainState::load(&a.checkpoint)?;
    let mut entries = vec![
        kv("checkpoint", a.checkpoint.display()),
        kv("data", a.data.display()),
        kv("split", &split),
        kv("raw-weights", raw),
        kv("label-smoothing", smoothing),
        kv("checkpoint-step", state.step),
    ];
    entries.extend(model_echo(&state.model));
    echo_config(&a.out, "eval", &entries)?;

    let loader = open_loader(&a.data, &split, &state.model.alphabet, state.model.t_steps)?;
    let report = trainer::evaluate(&state.model, state.infer_params(raw), &loader, smoothing)?;
    println!("eval_loss={}", report.loss);
    println!("fullseq_acc={}", report.accuracy);
    Ok(())
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    split: Option<String>,
    /// Comma-separated sample ids; default is the whole split in order.
    #[arg(long)]
    ids: Option<String>,
    #[arg(long)]
    raw_weights: Option<bool>,
}

fn run_infer(a: InferArgs) -> CliResult<()> {
    let mut conf = Conf::load(a.config.as_deref())?;
    let split = conf.get("split", a.split, "test".to_string())?;
    let ids = conf.get_opt("ids", a.ids)?;
    let raw = conf.get("raw-weights", a.raw_weights, false)?;
    conf.finish()?;

    let state = TrainState::load(&a.checkpoint)?;
    let mut entries = vec![
        kv("checkpoint", a.checkpoint.display()),
        kv("data", a.data.display()),
        kv("split", &split),
        kv("ids", ids.clone().unwrap_or_else(|| "all".to_string())),
        kv("raw-weights", raw),
    ];
    entries.extend(model_echo(&state.model));
    echo_config(&a.out, "infer", &entries)?;

    let loader = open_loader(&a.data, &split, &state.model.alphabet, state.model.t_steps)?;
    let indices: Vec<usize> = match &ids {
        None => (0..loader.len()).collect(),
        Some(list) => list
            .split(',')
            .map(|want| {
                (0..loader.len())
                    .find(|&i| loader.entry(i).id == want)
                    .ok_or_else(|| {
                        Failure::Runtime(format!("id {want} not found in split {split}"))
                    })
            })
            .collect::<CliResult<_>>()?,
    };
    let params = state.infer_params(raw);
    for i in indices {
        let tensors: Vec<_> = loader.views(i).iter().map(|v| v.to_tensor()).collect();
        let pred = model::infer(params, &state.model, &tensors)?;
        println!("{}", pred.text);
    }
    Ok(())
}

#[derive(Args)]
struct VisualizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Directory the overlay images are written to.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    split: Option<String>,
    /// Sample id; default is the first sample of the split.
    #[arg(long)]
    id: Option<String>,
    /// Noise scale for saliency averaging.
    #[arg(long)]
    sigma: Option<f64>,
    /// Number of noisy copies averaged per map.
    #[arg(long)]
    copies: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    raw_weights: Option<bool>,
}

fn run_visualize(a: VisualizeArgs) -> CliResult<()> {
    let mut conf = Conf::load(a.config.as_deref())?;
    let split = conf.get("split", a.split, "test".to_string())?;
    let id = conf.get_opt("id", a.id)?;
    let sigma = conf.get("sigma", a.sigma, viz::NOISE_SIGMA)?;
    let copies = conf.get("copies", a.copies, viz::NOISE_COPIES)?;
    let seed = conf.get("seed", a.seed, 1)?;
    let raw = conf.get("raw-weights", a.raw_weights, false)?;
    conf.finish()?;

    let state = TrainState::load(&a.checkpoint)?;
    let sel = match split.as_str() {
        "all" => None,
        other => Some(Split::parse(other)?),
    };
    let ds = Dataset::open(&a.data, sel)?;
    let entry = match &id {
        Some(want) => ds
            .entries
            .iter()
            .find(|e| &e.id == want)
            .ok_or_else(|| Failure::Runtime(format!("id {want} not found in split {split}")))?,
        None => ds
            .entries
            .first()
            .ok_or_else(|| Failure::Runtime(format!("split {split} is empty")))?,
    };

    let entries = {
        let mut v = vec![
            kv("checkpoint", a.checkpoint.display()),
            kv("data", a.data.display()),
            kv("split", &split),
            kv("id", &entry.id),
            kv("sigma", sigma),
            kv("copies", copies),
            kv("seed", seed),
            kv("raw-weights", raw),
        ];
        v.extend(model_echo(&state.model));
        v
    };
    echo_config(&a.out, "visualize", &entries)?;

    let views = ds.load_views(entry)?;
    let report = viz::visualize_sample(
        state.infer_params(raw),
        &state.model,
        &views,
        &entry.id,
        &a.out,
        sigma,
        copies,
        seed,
    )?;
    println!("transcription={}", entry.transcription);
    println!("prediction={}", report.prediction.text);
    for f in &report.files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Semicolon-separated extractor presets to compare (layer lists
    /// like c32,p,c64 contain commas, so commas cannot separate them).
    #[arg(long)]
    presets: Option<String>,
    #[arg(long)]
    warmup: Option<usize>,
    /// Timed inference runs per preset (median is reported).
    #[arg(long)]
    timed: Option<usize>,
    #[command(flatten)]
    model: ModelOpts,
    #[command(flatten)]
    train: TrainOpts,
}

fn run_sweep(a: SweepArgs) -> CliResult<()> {
    let mut conf = Conf::load(a.config.as_deref())?;
    let mut mcfg = resolve_model(&mut conf, &a.model)?;
    let (tcfg, train_split, eval_split) = resolve_train(&mut conf, &a.train)?;
    let presets: Vec<String> = conf
        .get("presets", a.presets, "tiny-2;small-4;mid-6;deep-8".to_string())?
        .split(';')
        .map(str::to_string)
        .collect();
    let warmup = conf.get("warmup", a.warmup, bench::WARMUP_RUNS)?;
    let timed = conf.get("timed", a.timed, bench::TIMED_RUNS)?;
    conf.finish()?;
    mcfg.state_clip = tcfg.clip;

    let mut entries = vec![
        kv("data", a.data.display()),
        kv("out", a.out.display()),
        kv("presets", presets.join(";")),
        kv("warmup", warmup),
        kv("timed", timed),
    ];
    entries.extend(model_echo(&mcfg));
    entries.extend(train_echo(&tcfg, &train_split, &eval_split));
    echo_config(&a.out, "sweep", &entries)?;

    let data = open_loader(&a.data, &train_split, &mcfg.alphabet, mcfg.t_steps)?;
    let eval = open_loader(&a.data, &eval_split, &mcfg.alphabet, mcfg.t_steps)?;
    let rows = bench::run_sweep(&mcfg, &tcfg, &presets, &data, &eval, warmup, timed)?;
    let csv = bench::sweep_csv(&rows);
    let path = a.out.join("sweep.csv");
    std::fs::write(&path, &csv)
        .map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))?;
    let curve = a.out.join("sweep_curve.svg");
    std::fs::write(&curve, bench::sweep_curve_svg(&rows)?)
        .map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", curve.display())))?;
    print!("{csv}");
    println!("wrote {}", path.display());
    println!("wrote {}", curve.display());
    Ok(())
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Also run the structural invariant suite.
    #[arg(long)]
    invariants: Option<bool>,
}

fn run_gradcheck(a: GradcheckArgs) -> CliResult<()> {
    let mut conf = Conf::load(a.config.as_deref())?;
    let invariants = conf.get("invariants", a.invariants, false)?;
    conf.finish()?;
    echo_config(&a.out, "gradcheck", &[kv("invariants", invariants)])?;

    let mut all_passed = true;
    for c in checks::gradient_suite()? {
        println!("{}", c.line());
        all_passed &= c.passed;
    }
    if invariants {
        for c in checks::invariant_suite()? {
            println!("{}", c.line());
            all_passed &= c.passed;
        }
    }
    if !all_passed {
        return Err(Failure::Runtime("checks failed; see the lines above".to_string()));
    }
    println!("all checks passed");
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.cmd {
        Cmd::Generate(a) => run_generate(a),
        Cmd::Train(a) => run_train(a),
        Cmd::Eval(a) => run_eval(a),
        Cmd::Infer(a) => run_infer(a),
        Cmd::Visualize(a) => run_visualize(a),
        Cmd::Sweep(a) => run_sweep(a),
        Cmd::Gradcheck(a) => run_gradcheck(a),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let code = match run(cli) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    };
    std::process::exit(code);
}
