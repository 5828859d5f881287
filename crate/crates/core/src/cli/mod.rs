//! The `nlsfcnn` command line: inject, detect, nlsf, train, denoise, eval,
//! bench and sweep.
//!
//! Every tunable can come from a flag, from a flat `key=value` file given
//! with `--config`, or from the built-in default, in that order of
//! precedence. The fully resolved configuration is printed to stderr in the
//! same `key=value` form, so it can be fed back through `--config`.
//!
//! Exit codes: 0 success, 2 usage error, 3 I/O error, 4 validation error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::cnn::{self, load_model, save_model, CnnError, Optimizer, TrainConfig};
use crate::eval::{self, BenchConfig, EvalError, Method, PatchSizeChoice};
use crate::image::{load_pgm, save_pgm, write_atomic, GrayImage, ImageError};
use crate::nlsf::{auto_patch_size, nlsf, NlsfConfig, NlsfError};
use crate::noise::{detect, inject, NoiseError, NoiseSpec, GENERATOR_NAME};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_VALIDATION: i32 = 4;

const VERSION: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    "\nimage format: binary PGM (P5), maxval 255",
    "\nmodel format: NLSFCNN1"
);

#[derive(Debug)]
enum CliError {
    Usage(String),
    Io(String),
    Validation(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            Self::Usage(_) => EXIT_USAGE,
            Self::Io(_) => EXIT_IO,
            Self::Validation(_) => EXIT_VALIDATION,
        }
    }

    fn message(&self) -> &str {
        match self {
            Self::Usage(m) | Self::Io(m) | Self::Validation(m) => m,
        }
    }
}

impl From<ImageError> for CliError {
    fn from(e: ImageError) -> Self {
        match e {
            ImageError::Io { .. } => Self::Io(e.to_string()),
            _ => Self::Validation(e.to_string()),
        }
    }
}

impl From<NoiseError> for CliError {
    fn from(e: NoiseError) -> Self {
        Self::Validation(e.to_string())
    }
}

impl From<NlsfError> for CliError {
    fn from(e: NlsfError) -> Self {
        Self::Validation(e.to_string())
    }
}

impl From<CnnError> for CliError {
    fn from(e: CnnError) -> Self {
        match e {
            CnnError::Io { .. } => Self::Io(e.to_string()),
            CnnError::Image(inner) => inner.into(),
            _ => Self::Validation(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io { .. } => Self::Io(e.to_string()),
            EvalError::Image(inner) => inner.into(),
            EvalError::Cnn(inner) => inner.into(),
            _ => Self::Validation(e.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "nlsfcnn", version = VERSION, about = "Salt-and-pepper denoising: non-local switching filter plus CNN refinement")]
struct Cli {
    /// Flat key=value file supplying defaults for any flag.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker thread cap (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Corrupt an image with seeded salt-and-pepper noise.
    Inject(InjectArgs),
    /// Write the impulse mask of an image as a black/white PGM.
    Detect(DetectArgs),
    /// Run the non-local switching filter on a noisy image.
    Nlsf(NlsfArgs),
    /// Train a refinement network on a directory of clean PGM images.
    Train(TrainArgs),
    /// Full pipeline: detect, filter and refine with a trained model.
    Denoise(DenoiseArgs),
    /// PSNR of a test image against a reference.
    Eval(EvalArgs),
    /// PSNR table over a test set, densities and methods.
    Bench(BenchArgs),
    /// NLSF PSNR across patch sizes and densities for one image.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
struct InjectArgs {
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fraction of corrupted pixels; values above 1 are read as percent.
    #[arg(long)]
    density: Option<Density>,
    #[arg(long)]
    salt_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct DetectArgs {
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    delta: Option<u32>,
}

#[derive(Debug, Args, Clone, Default)]
struct FilterArgs {
    /// Expected noise density; defaults to the detected fraction.
    #[arg(long)]
    density_hint: Option<Density>,
    /// `auto` (3 below 30% density, else 5) or an odd size.
    #[arg(long)]
    patch_size: Option<PatchSize>,
    #[arg(long)]
    radius: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    delta: Option<u32>,
    /// Number of search-window doublings before the global fallback.
    #[arg(long)]
    growth: Option<u32>,
}

#[derive(Debug, Args)]
struct NlsfArgs {
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    filter: FilterArgs,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Directory of clean PGM images.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    density: Option<Density>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// `sgd` (momentum 0.9) or `adam`.
    #[arg(long)]
    optimizer: Option<OptimizerName>,
    #[arg(long)]
    seed: Option<u64>,
    /// CSV file receiving `step,loss` lines.
    #[arg(long)]
    loss_log: Option<PathBuf>,
    /// Input patch side.
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    init_std: Option<f64>,
    #[command(flatten)]
    filter: FilterArgs,
}

#[derive(Debug, Args)]
struct DenoiseArgs {
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[command(flatten)]
    filter: FilterArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long)]
    testset: Option<PathBuf>,
    /// Comma-separated; values above 1 are read as percent.
    #[arg(long)]
    densities: Option<Densities>,
    /// Comma-separated subset of noisy, median, nlsf, nlsf-cnn.
    #[arg(long)]
    methods: Option<Methods>,
    /// Comma-separated model files, matched to densities by their metadata.
    #[arg(long)]
    models: Option<PathList>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Add the wall-time column to the CSV.
    #[arg(long)]
    timing: bool,
    #[arg(long)]
    patch_size: Option<PatchSize>,
    #[arg(long)]
    radius: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    delta: Option<u32>,
    #[arg(long)]
    growth: Option<u32>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    sizes: Option<Sizes>,
    #[arg(long)]
    densities: Option<Densities>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    radius: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    delta: Option<u32>,
    #[arg(long)]
    growth: Option<u32>,
}

fn parse_density(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| format!("not a number: {s:?}"))?;
    let v = if v > 1.0 { v / 100.0 } else { v };
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("density {s} out of range"))
    }
}

fn split_list<T>(
    s: &str,
    item: impl Fn(&str) -> std::result::Result<T, String>,
) -> std::result::Result<Vec<T>, String> {
    let items: Vec<T> = s
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(item)
        .collect::<std::result::Result<_, _>>()?;
    if items.is_empty() {
        Err("empty list".into())
    } else {
        Ok(items)
    }
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Density(f64);

impl FromStr for Density {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        parse_density(s).map(Self)
    }
}

impl Display for Density {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Densities(Vec<f64>);

impl FromStr for Densities {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        split_list(s, parse_density).map(Self)
    }
}

impl Display for Densities {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&join(&self.0))
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Sizes(Vec<usize>);

impl FromStr for Sizes {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        split_list(s, |p| p.parse().map_err(|_| format!("not a size: {p:?}"))).map(Self)
    }
}

impl Display for Sizes {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&join(&self.0))
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Methods(Vec<Method>);

impl FromStr for Methods {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        split_list(s, |p| {
            Method::parse(p).ok_or_else(|| format!("unknown method {p:?}"))
        })
        .map(Self)
    }
}

impl Display for Methods {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let names: Vec<&str> = self.0.iter().map(Method::name).collect();
        f.write_str(&names.join(","))
    }
}

#[derive(Debug, Clone, PartialEq)]
struct PathList(Vec<PathBuf>);

impl FromStr for PathList {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        split_list(s, |p| Ok(PathBuf::from(p))).map(Self)
    }
}

impl Display for PathList {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|p| p.display().to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct PatchSize(PatchSizeChoice);

impl FromStr for PatchSize {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "auto" {
            return Ok(Self(PatchSizeChoice::Auto));
        }
        match s.parse::<usize>() {
            Ok(n) if n % 2 == 1 => Ok(Self(PatchSizeChoice::Fixed(n))),
            _ => Err(format!(
                "patch size must be `auto` or an odd integer, got {s:?}"
            )),
        }
    }
}

impl Display for PatchSize {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.0 {
            PatchSizeChoice::Auto => f.write_str("auto"),
            PatchSizeChoice::Fixed(n) => write!(f, "{n}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct OptimizerName(Optimizer);

impl FromStr for OptimizerName {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sgd" => Ok(Self(Optimizer::SGD_MOMENTUM)),
            "adam" => Ok(Self(Optimizer::ADAM)),
            _ => Err(format!("unknown optimizer {s:?} (expected sgd or adam)")),
        }
    }
}

impl Display for OptimizerName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.0.name())
    }
}

#[derive(Debug, Clone)]
struct Shown(PathBuf);

impl Display for Shown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0.display())
    }
}

impl FromStr for Shown {
    type Err = std::convert::Infallible;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(Self(PathBuf::from(s)))
    }
}

/// Keys accepted in a `--config` file.
const CONFIG_KEYS: &[&str] = &[
    "in",
    "out",
    "density",
    "salt-fraction",
    "seed",
    "delta",
    "density-hint",
    "patch-size",
    "radius",
    "sigma",
    "growth",
    "corpus",
    "steps",
    "batch",
    "lr",
    "optimizer",
    "loss-log",
    "patch",
    "stride",
    "init-std",
    "model",
    "reference",
    "test",
    "testset",
    "densities",
    "methods",
    "models",
    "repeats",
    "image",
    "sizes",
    "threads",
];

fn parse_config(path: &Path) -> CliResult<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", path.display())))?;
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("{}:{}: expected key=value", path.display(), n + 1))
        })?;
        let k = k.trim().replace('_', "-");
        if !CONFIG_KEYS.contains(&k.as_str()) {
            return Err(CliError::Usage(format!(
                "{}:{}: unknown key {k:?}",
                path.display(),
                n + 1
            )));
        }
        map.insert(k, v.trim().to_string());
    }
    Ok(map)
}

/// Resolves each setting from flag, config file or default and records
/// the result for the configuration log.
struct Resolver<'a> {
    file: &'a BTreeMap<String, String>,
    resolved: Vec<(String, String)>,
    info: Vec<String>,
}

impl<'a> Resolver<'a> {
    fn new(file: &'a BTreeMap<String, String>, command: &str) -> Self {
        Self {
            file,
            resolved: vec![("command".into(), command.into())],
            info: Vec::new(),
        }
    }

    fn lookup<T>(&mut self, key: &str, flag: Option<T>) -> CliResult<Option<T>>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let value = match flag {
            Some(v) => Some(v),
            None => match self.file.get(key) {
                Some(raw) => Some(
                    raw.parse::<T>()
                        .map_err(|e| CliError::Usage(format!("config key {key}: {e}")))?,
                ),
                None => None,
            },
        };
        if let Some(v) = &value {
            self.resolved.push((key.to_string(), v.to_string()));
        }
        Ok(value)
    }

    fn or<T>(&mut self, key: &str, flag: Option<T>, default: T) -> CliResult<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        match self.lookup(key, flag)? {
            Some(v) => Ok(v),
            None => {
                self.resolved.push((key.to_string(), default.to_string()));
                Ok(default)
            }
        }
    }

    fn required<T>(&mut self, key: &str, flag: Option<T>) -> CliResult<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        self.lookup(key, flag)?
            .ok_or_else(|| CliError::Usage(format!("missing required setting --{key}")))
    }

    fn path(&mut self, key: &str, flag: Option<PathBuf>) -> CliResult<PathBuf> {
        self.required(key, flag.map(Shown)).map(|s| s.0)
    }

    fn optional_path(&mut self, key: &str, flag: Option<PathBuf>) -> CliResult<Option<PathBuf>> {
        Ok(self.lookup(key, flag.map(Shown))?.map(|s| s.0))
    }

    /// A setting that was derived rather than looked up; logged as a
    /// plain setting so replays use the same value.
    fn derived(&mut self, key: &str, value: impl Display, how: &str) {
        self.resolved.push((key.to_string(), value.to_string()));
        self.info.push(format!("{key} {how}"));
    }

    /// Informational line that is not itself a setting.
    fn note(&mut self, what: &str, value: impl Display) {
        self.info.push(format!("{what}: {value}"));
    }

    fn print(&self) {
        eprintln!("# resolved configuration");
        for (k, v) in &self.resolved {
            eprintln!("{k}={v}");
        }
        for line in &self.info {
            eprintln!("# {line}");
        }
    }
}

/// Base NLSF settings without the patch size, which depends on the
/// density.
fn resolve_filter_base(
    r: &mut Resolver,
    radius: Option<usize>,
    sigma: Option<f64>,
    delta: Option<u32>,
    growth: Option<u32>,
) -> CliResult<NlsfConfig> {
    let d = NlsfConfig::default();
    Ok(NlsfConfig {
        patch_size: d.patch_size,
        search_radius: r.or("radius", radius, d.search_radius)?,
        sigma: r.or("sigma", sigma, d.sigma)?,
        delta: r.or("delta", delta, d.delta)?,
        max_window_growth: r.or("growth", growth, d.max_window_growth)?,
    })
}

/// Full NLSF configuration for one image; a missing density hint is
/// replaced by the detected impulse fraction.
fn resolve_filter(
    r: &mut Resolver,
    a: &FilterArgs,
    noisy: &GrayImage,
) -> CliResult<(NlsfConfig, f64)> {
    let mut cfg = resolve_filter_base(r, a.radius, a.sigma, a.delta, a.growth)?;
    let hint = match r.lookup("density-hint", a.density_hint)? {
        Some(d) => d.0,
        None => {
            let mask = detect(noisy, cfg.delta)?;
            let est = mask.count() as f64 / noisy.len() as f64;
            r.derived("density-hint", est, "estimated from the detected fraction");
            est
        }
    };
    let choice = r.or("patch-size", a.patch_size, PatchSize(PatchSizeChoice::Auto))?;
    cfg.patch_size = match choice.0 {
        PatchSizeChoice::Auto => auto_patch_size(hint),
        PatchSizeChoice::Fixed(n) => n,
    };
    r.note("patch size in use", cfg.patch_size);
    cfg.validate()?;
    Ok((cfg, hint))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    write_atomic(path, text.as_bytes())
        .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

fn cmd_inject(a: InjectArgs, r: &mut Resolver) -> CliResult<()> {
    let input = r.path("in", a.input)?;
    let out = r.path("out", a.out)?;
    let density = r.required("density", a.density)?.0;
    let salt = r.or("salt-fraction", a.salt_fraction, 0.5)?;
    let seed = r.or("seed", a.seed, 0u64)?;
    r.note("noise generator", GENERATOR_NAME);
    r.print();
    let spec = NoiseSpec::new(density, salt, seed)?;
    let img = load_pgm(&input)?;
    save_pgm(&inject(&img, &spec), &out)?;
    Ok(())
}

fn cmd_detect(a: DetectArgs, r: &mut Resolver) -> CliResult<()> {
    let input = r.path("in", a.input)?;
    let out = r.path("out", a.out)?;
    let delta = r.or("delta", a.delta, 1u32)?;
    r.print();
    let img = load_pgm(&input)?;
    let mask = detect(&img, delta)?;
    let data = mask
        .flags()
        .iter()
        .map(|&f| if f { 1.0 } else { 0.0 })
        .collect();
    let out_img = GrayImage::new(img.width(), img.height(), data)?;
    save_pgm(&out_img, &out)?;
    eprintln!("flagged {} of {} pixels", mask.count(), img.len());
    Ok(())
}

fn cmd_nlsf(a: NlsfArgs, r: &mut Resolver) -> CliResult<()> {
    let input = r.path("in", a.input)?;
    let out = r.path("out", a.out)?;
    let noisy = load_pgm(&input)?;
    let (cfg, _) = resolve_filter(r, &a.filter, &noisy)?;
    r.print();
    let mask = detect(&noisy, cfg.delta)?;
    save_pgm(&nlsf(&noisy, &mask, &cfg)?, &out)?;
    Ok(())
}

fn cmd_train(a: TrainArgs, r: &mut Resolver) -> CliResult<()> {
    let corpus = r.path("corpus", a.corpus)?;
    let out = r.path("out", a.out)?;
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        density: r.or("density", a.density, Density(d.density))?.0,
        steps: r.or("steps", a.steps, d.steps)?,
        batch: r.or("batch", a.batch, d.batch)?,
        learning_rate: r.or("lr", a.lr, d.learning_rate)?,
        optimizer: r
            .or("optimizer", a.optimizer, OptimizerName(d.optimizer))?
            .0,
        seed: r.or("seed", a.seed, d.seed)?,
        input_patch: r.or("patch", a.patch, d.input_patch)?,
        stride: r.or("stride", a.stride, d.stride)?,
        init_std: r.or("init-std", a.init_std, d.init_std)?,
        ..d
    };
    let loss_log = r.optional_path("loss-log", a.loss_log)?;
    let f = &a.filter;
    let mut nlsf_cfg = resolve_filter_base(r, f.radius, f.sigma, f.delta, f.growth)?;
    let choice = r.or("patch-size", f.patch_size, PatchSize(PatchSizeChoice::Auto))?;
    nlsf_cfg.patch_size = match choice.0 {
        PatchSizeChoice::Auto => auto_patch_size(cfg.density),
        PatchSizeChoice::Fixed(n) => n,
    };
    r.note("patch size in use", nlsf_cfg.patch_size);
    r.note("salt fraction", cfg.salt_fraction);
    r.note("noise generator", GENERATOR_NAME);
    r.print();
    cfg.validate()?;
    nlsf_cfg.validate()?;

    let images: Vec<GrayImage> = eval::load_testset(&corpus)?
        .into_iter()
        .map(|(_, img)| img)
        .collect();
    eprintln!("training on {} images", images.len());
    let every = (cfg.steps / 20).max(1);
    let outcome = cnn::train(&images, &cfg, &nlsf_cfg, |rec| {
        if rec.step % every == 0 || rec.step + 1 == cfg.steps {
            eprintln!("step {} loss {:.6}", rec.step, rec.loss);
        }
    })?;
    eprintln!(
        "loss on held sample subset: initial {:.6} final {:.6}",
        outcome.initial_loss, outcome.final_loss
    );
    save_model(&outcome.model, &out)?;
    if let Some(path) = loss_log {
        write_text(&path, &outcome.history_csv())?;
    }
    Ok(())
}

fn cmd_denoise(a: DenoiseArgs, r: &mut Resolver) -> CliResult<()> {
    let input = r.path("in", a.input)?;
    let out = r.path("out", a.out)?;
    let model_path = r.path("model", a.model)?;
    let noisy = load_pgm(&input)?;
    let (cfg, hint) = resolve_filter(r, &a.filter, &noisy)?;
    r.print();
    let model = load_model(&model_path)?;
    let trained = f64::from(model.meta.density);
    if (trained - hint).abs() > 1e-3 {
        eprintln!(
            "warning: model was trained at density {trained:.3} but the density hint is {hint:.3}"
        );
    }
    save_pgm(&cnn::denoise_image(&noisy, &model, &cfg)?, &out)?;
    Ok(())
}

fn cmd_eval(a: EvalArgs, r: &mut Resolver) -> CliResult<()> {
    let reference = r.path("reference", a.reference)?;
    let test = r.path("test", a.test)?;
    r.print();
    let m = eval::psnr(&load_pgm(&reference)?, &load_pgm(&test)?)?;
    println!("mse={:.6}", m.mse);
    println!("psnr_db={}", eval::format_psnr(m.psnr_db));
    Ok(())
}

fn cmd_bench(a: BenchArgs, r: &mut Resolver) -> CliResult<()> {
    let testset = r.path("testset", a.testset)?;
    let densities = r.or("densities", a.densities, Densities(vec![0.3, 0.5, 0.7]))?;
    let methods = r.or(
        "methods",
        a.methods,
        Methods(vec![Method::Median, Method::Nlsf]),
    )?;
    let model_paths = r.lookup("models", a.models)?;
    let seed = r.or("seed", a.seed, 0u64)?;
    let repeats = r.or("repeats", a.repeats, 1usize)?;
    let out = r.optional_path("out", a.out)?;
    let patch = r.or("patch-size", a.patch_size, PatchSize(PatchSizeChoice::Auto))?;
    let nlsf_cfg = resolve_filter_base(r, a.radius, a.sigma, a.delta, a.growth)?;
    r.note("timing column", a.timing);
    r.print();
    let models = model_paths
        .map(|p| p.0.iter().map(load_model).collect::<Result<Vec<_>, _>>())
        .transpose()?
        .unwrap_or_default();
    let cfg = BenchConfig {
        densities: densities.0,
        methods: methods.0,
        seed,
        repeats,
        patch_size: patch.0,
        nlsf: nlsf_cfg,
        models,
    };
    let report = eval::bench(&testset, &cfg)?;
    print!("{}", report.to_table());
    for row in &report.rows {
        eprintln!(
            "time {} {} {}: {:.3}s",
            row.image, row.density, row.method, row.seconds
        );
    }
    if let Some(path) = out {
        write_text(&path, &report.to_csv(a.timing))?;
    }
    Ok(())
}

fn cmd_sweep(a: SweepArgs, r: &mut Resolver) -> CliResult<()> {
    let image = r.path("image", a.image)?;
    let sizes = r.or("sizes", a.sizes, Sizes(vec![3, 5, 7]))?;
    let densities = r.or(
        "densities",
        a.densities,
        Densities(vec![0.1, 0.3, 0.5, 0.7]),
    )?;
    let seed = r.or("seed", a.seed, 0u64)?;
    let out = r.optional_path("out", a.out)?;
    let base = resolve_filter_base(r, a.radius, a.sigma, a.delta, a.growth)?;
    r.print();
    for &s in &sizes.0 {
        NlsfConfig {
            patch_size: s,
            ..base
        }
        .validate()?;
    }
    let name = image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let report = eval::patch_size_sweep(
        &name,
        &load_pgm(&image)?,
        &sizes.0,
        &densities.0,
        seed,
        &base,
    )?;
    print!("{}", report.to_table());
    if let Some(path) = out {
        write_text(&path, &report.to_csv(false))?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult<()> {
    let file = match &cli.config {
        Some(p) => parse_config(p)?,
        None => BTreeMap::new(),
    };
    let mut r = Resolver::new(&file, "");
    let threads = r.or("threads", cli.threads, 0usize)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Validation(format!("cannot start thread pool: {e}")))?;
    pool.install(|| {
        macro_rules! go {
            ($name:literal, $f:ident, $args:expr) => {{
                r.resolved[0].1 = $name.into();
                $f($args, &mut r)
            }};
        }
        match cli.command {
            Command::Inject(a) => go!("inject", cmd_inject, a),
            Command::Detect(a) => go!("detect", cmd_detect, a),
            Command::Nlsf(a) => go!("nlsf", cmd_nlsf, a),
            Command::Train(a) => go!("train", cmd_train, a),
            Command::Denoise(a) => go!("denoise", cmd_denoise, a),
            Command::Eval(a) => go!("eval", cmd_eval, a),
            Command::Bench(a) => go!("bench", cmd_bench, a),
            Command::Sweep(a) => go!("sweep", cmd_sweep, a),
        }
    })
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    EXIT_OK
                }
                _ => EXIT_USAGE,
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn density_accepts_fraction_and_percent() {
        assert_eq!(parse_density("0.5"), Ok(0.5));
        assert_eq!(parse_density("30"), Ok(0.3));
        assert!(parse_density("300").is_err());
        assert_eq!(
            "30,50,70".parse::<Densities>().unwrap().0,
            vec![0.3, 0.5, 0.7]
        );
    }

    #[test]
    fn patch_size_parsing() {
        assert_eq!(
            "auto".parse::<PatchSize>().unwrap().0,
            PatchSizeChoice::Auto
        );
        assert_eq!(
            "5".parse::<PatchSize>().unwrap().0,
            PatchSizeChoice::Fixed(5)
        );
        assert!("4".parse::<PatchSize>().is_err());
    }

    #[test]
    fn resolver_precedence() {
        let mut file = BTreeMap::new();
        file.insert("sigma".to_string(), "0.2".to_string());
        file.insert("radius".to_string(), "7".to_string());
        let mut r = Resolver::new(&file, "nlsf");
        assert_eq!(r.or("sigma", Some(0.3), 0.1).unwrap(), 0.3);
        assert_eq!(r.or("radius", None, 5usize).unwrap(), 7);
        assert_eq!(r.or("delta", None, 1u32).unwrap(), 1);
        assert!(r.resolved.contains(&("radius".into(), "7".into())));
    }

    #[test]
    fn no_arguments_is_usage_error() {
        assert_eq!(run(["nlsfcnn"]), EXIT_USAGE);
        assert_eq!(run(["nlsfcnn", "inject", "--bogus", "1"]), EXIT_USAGE);
    }

    #[test]
    fn missing_input_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o.pgm");
        let args: Vec<OsString> = vec![
            "nlsfcnn".into(),
            "inject".into(),
            "--in".into(),
            dir.path().join("absent.pgm").into(),
            "--out".into(),
            out.clone().into(),
            "--density".into(),
            "0.5".into(),
        ];
        let code = run(args);
        assert_eq!(code, EXIT_IO);
        assert!(!out.exists());
    }
}
