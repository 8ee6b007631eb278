use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mmpattern::dataio::{
    export_map_pgm, export_mask_pgm, export_probmask_pgm, read_mask_pgm, write_phantom_dataset, Manifest, Volume,
};
use mmpattern::fourier::fft2_real;
use mmpattern::grid::Grid;
use mmpattern::motion::{apply_rigid, sample_rigid, RigidTransform};
use mmpattern::optimizer::{initial_state, train_with, TrainState};
use mmpattern::pipeline::{
    baseline_mask, evaluate_mask, fold_split, normalized_prior, residual_prior, run_from_manifest, subject_pairs,
    BaselineParams, Dataset, ExperimentConfig, PatternKind, PatternSummary, TranslatorSpec, SEED_TRANSLATOR,
};
use mmpattern::probmask::topk_extract;
use mmpattern::recon::{reconstruct, ReconKind, Regularizer};
use mmpattern::translator::TranslatorModel;
use mmpattern::{derive_seed, BinaryMask, KSpace2D, ResidualMap};
use serde_json::json;

const OUT_ENV: &str = "MMPATTERN_OUTPUT_DIR";

#[derive(Parser)]
#[command(name = "mmpattern", version, about = "Learned k-space under-sampling patterns for multi-modal MRI")]
struct Cli {
    /// Directory for outputs that are not named explicitly [default: out]
    #[arg(long, global = true, env = OUT_ENV)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic two-modality dataset and its manifest
    GenPhantom(GenPhantomArgs),
    /// Generate a baseline pattern, or extract the learned one from a checkpoint
    GeneratePattern(GeneratePatternArgs),
    /// Fit the cross-modality translator on the training subjects
    FitTranslator(FitTranslatorArgs),
    /// Compute the k-space residual prior on the validation subjects
    Residual(ResidualArgs),
    /// Learn the probabilistic mask
    Optimize(OptimizeArgs),
    /// Run the whole experiment and score against the baselines
    Pipeline(PipelineArgs),
    /// Retrospectively under-sample a volume with a mask
    Undersample(UndersampleArgs),
    /// Reconstruct images from under-sampled k-space
    Reconstruct(ReconstructArgs),
    /// Score a mask on a split of the dataset
    Evaluate(EvaluateArgs),
    /// Apply random rigid motion to every slice of a volume
    AugmentMotion(AugmentMotionArgs),
}

#[derive(Args)]
struct GenPhantomArgs {
    #[arg(long, default_value_t = 20)]
    subjects: usize,
    #[arg(long, default_value_t = 6)]
    slices: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Gaussian1d,
    Center,
    Poisson,
    Learned,
}

impl KindArg {
    fn kind(self) -> PatternKind {
        match self {
            KindArg::Gaussian1d => PatternKind::Gaussian1d,
            KindArg::Center => PatternKind::Center,
            KindArg::Poisson => PatternKind::Poisson,
            KindArg::Learned => PatternKind::Learned,
        }
    }
}

#[derive(Args)]
struct GeneratePatternArgs {
    #[arg(long, value_enum)]
    kind: KindArg,
    /// Square pattern side; overridden per axis by --height and --width
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    /// Sampling factor; the checkpoint's factor for the learned kind [default: 0.25]
    #[arg(long)]
    r: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Row standard deviation of the 1D Gaussian pattern [default: height / 6]
    #[arg(long)]
    sigma_rows: Option<f64>,
    /// Base exclusion radius of the Poisson-disc pattern
    #[arg(long, default_value_t = 1.0)]
    poisson_r0: f64,
    /// Training checkpoint (learned kind only)
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output graymap [default: <out-dir>/pattern_<kind>.pgm]
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Dataset selection shared by the data-driven commands. Values given here
/// override those of `--config`.
#[derive(Args, Default)]
struct DataArgs {
    /// Experiment config JSON, e.g. the config.json written by `pipeline`
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest JSON
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Reference modality tag [default: A]
    #[arg(long)]
    reference_modality: Option<String>,
    /// Target modality tag [default: B]
    #[arg(long)]
    target_modality: Option<String>,
    /// Center crop size [default: shorter slice side]
    #[arg(long)]
    crop: Option<usize>,
    /// Half-open slice range `lo:hi`
    #[arg(long, value_parser = parse_range)]
    slice_range: Option<[usize; 2]>,
    /// Evenly spaced slices kept per subject
    #[arg(long)]
    slices_per_subject: Option<usize>,
    /// Experiment seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Number of re-split folds [default: 1]
    #[arg(long)]
    folds: Option<usize>,
}

impl DataArgs {
    fn config(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(m) = &self.manifest {
            cfg.manifest = Some(m.clone());
        }
        set(&mut cfg.reference_modality, self.reference_modality.clone());
        set(&mut cfg.target_modality, self.target_modality.clone());
        if self.crop.is_some() {
            cfg.crop = self.crop;
        }
        if self.slice_range.is_some() {
            cfg.slice_range = self.slice_range;
        }
        if self.slices_per_subject.is_some() {
            cfg.slices_per_subject = self.slices_per_subject;
        }
        set(&mut cfg.seed, self.seed);
        set(&mut cfg.folds, self.folds);
        Ok(cfg)
    }
}

/// Training flags; unset values keep the config (or built-in) defaults.
#[derive(Args, Default)]
struct TrainArgs {
    /// Sampling factor in (0, 1] [default: 0.25]
    #[arg(long)]
    r: Option<f64>,
    /// Sigmoid slope of the soft binarization [default: 5]
    #[arg(long)]
    sigma_p: Option<f64>,
    /// Adam learning rate [default: 2e-4]
    #[arg(long)]
    lr: Option<f64>,
    /// Adam first-moment decay [default: 0.5]
    #[arg(long)]
    beta1: Option<f64>,
    /// Adam second-moment decay [default: 0.999]
    #[arg(long)]
    beta2: Option<f64>,
    /// Adam epsilon [default: 1e-8]
    #[arg(long)]
    epsilon: Option<f64>,
    /// [default: 16]
    #[arg(long)]
    batch_size: Option<usize>,
    /// [default: 50]
    #[arg(long)]
    min_epochs: Option<usize>,
    /// [default: 200]
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Stale validation epochs tolerated after --min-epochs [default: 10]
    #[arg(long)]
    patience: Option<usize>,
}

impl TrainArgs {
    /// Any flag besides `--max-epochs` set.
    fn changes_model(&self) -> bool {
        self.r.is_some()
            || self.sigma_p.is_some()
            || self.lr.is_some()
            || self.beta1.is_some()
            || self.beta2.is_some()
            || self.epsilon.is_some()
            || self.batch_size.is_some()
            || self.min_epochs.is_some()
            || self.patience.is_some()
    }

    fn apply(&self, cfg: &mut ExperimentConfig) {
        set(&mut cfg.r, self.r);
        let t = &mut cfg.train;
        set(&mut t.sigma_p, self.sigma_p);
        set(&mut t.lr, self.lr);
        set(&mut t.beta1, self.beta1);
        set(&mut t.beta2, self.beta2);
        set(&mut t.epsilon, self.epsilon);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.min_epochs, self.min_epochs);
        set(&mut t.max_epochs, self.max_epochs);
        set(&mut t.patience, self.patience);
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ReconArg {
    ZeroFilled,
    RegularizedLs,
}

#[derive(Clone, Copy, ValueEnum)]
enum RegularizerArg {
    Identity,
    FirstDifference,
}

#[derive(Args, Default)]
struct ReconArgs {
    /// Reconstructor [default: zero-filled]
    #[arg(long, value_enum)]
    recon: Option<ReconArg>,
    /// Regularization weight [default: 0]
    #[arg(long)]
    lambda: Option<f64>,
    /// [default: identity]
    #[arg(long, value_enum)]
    regularizer: Option<RegularizerArg>,
    /// [default: 200]
    #[arg(long)]
    cg_max_iters: Option<usize>,
    /// [default: 1e-8]
    #[arg(long)]
    cg_tol: Option<f64>,
    /// Use the squared peak in PSNR
    #[arg(long)]
    standard_psnr: bool,
}

impl ReconArgs {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        let r = &mut cfg.recon;
        set(
            &mut r.kind,
            self.recon.map(|k| match k {
                ReconArg::ZeroFilled => ReconKind::ZeroFilled,
                ReconArg::RegularizedLs => ReconKind::RegularizedLs,
            }),
        );
        set(&mut r.lambda, self.lambda);
        set(
            &mut r.regularizer,
            self.regularizer.map(|g| match g {
                RegularizerArg::Identity => Regularizer::Identity,
                RegularizerArg::FirstDifference => Regularizer::FirstDifference,
            }),
        );
        set(&mut r.cg_max_iters, self.cg_max_iters);
        set(&mut r.cg_tol, self.cg_tol);
        cfg.standard_psnr |= self.standard_psnr;
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TranslatorArg {
    Identity,
    Lut,
    PatchRidge,
}

#[derive(Args, Default)]
struct TranslatorArgs {
    /// Translator kind [default: lut]
    #[arg(long, value_enum)]
    translator: Option<TranslatorArg>,
    /// LUT bins
    #[arg(long, default_value_t = 256)]
    bins: usize,
    /// Patch side of the ridge translator
    #[arg(long, default_value_t = 3)]
    patch_k: usize,
    /// Ridge penalty
    #[arg(long, default_value_t = 1e-2)]
    ridge_lambda: f64,
    /// Pixels sampled for the ridge fit
    #[arg(long, default_value_t = 50_000)]
    max_samples: usize,
}

impl TranslatorArgs {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        set(
            &mut cfg.translator,
            self.translator.map(|t| match t {
                TranslatorArg::Identity => TranslatorSpec::Identity,
                TranslatorArg::Lut => TranslatorSpec::Lut { bins: self.bins },
                TranslatorArg::PatchRidge => TranslatorSpec::PatchRidge {
                    k: self.patch_k,
                    lambda: self.ridge_lambda,
                    max_samples: self.max_samples,
                },
            }),
        );
    }
}

#[derive(Args)]
struct FitTranslatorArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    translator: TranslatorArgs,
    /// Fold whose training subjects are used
    #[arg(long, default_value_t = 0)]
    fold: usize,
}

#[derive(Args)]
struct ResidualArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Fitted translator [default: <out-dir>/translator.json]
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    fold: usize,
}

#[derive(Args)]
struct OptimizeArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainArgs,
    /// Raw residual map from `residual` [default: <out-dir>/residual.json]
    #[arg(long)]
    residual: Option<PathBuf>,
    /// Checkpoint written after every epoch [default: <out-dir>/checkpoint.json]
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Continue from the checkpoint with its stored settings; only
    /// --max-epochs may be raised
    #[arg(long)]
    resume: bool,
    #[arg(long, default_value_t = 0)]
    fold: usize,
}

#[derive(Args)]
struct PipelineArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    recon: ReconArgs,
    #[command(flatten)]
    translator: TranslatorArgs,
    /// `all`, `none` or a comma-separated list of gaussian1d, center, poisson [default: all]
    #[arg(long)]
    baselines: Option<String>,
    /// Row standard deviation of the 1D Gaussian baseline [default: height / 6]
    #[arg(long)]
    sigma_rows: Option<f64>,
    /// Base exclusion radius of the Poisson-disc baseline [default: 1]
    #[arg(long)]
    poisson_r0: Option<f64>,
    /// Also evaluate with motion-augmented reference images
    #[arg(long)]
    motion: bool,
    /// Motion translation bound in pixels [default: 5]
    #[arg(long)]
    t_bound: Option<f64>,
    /// Motion rotation bound in degrees [default: 5]
    #[arg(long)]
    r_bound: Option<f64>,
}

#[derive(Args)]
struct UndersampleArgs {
    /// Raw little-endian f32 volume
    #[arg(long)]
    volume: PathBuf,
    /// Volume dims `slices,height,width`
    #[arg(long, value_parser = parse_dims)]
    dims: [usize; 3],
    #[arg(long)]
    mask: PathBuf,
    /// Center crop and normalize before transforming
    #[arg(long)]
    crop: Option<usize>,
    /// Interleaved little-endian f64 k-space [default: <out-dir>/kspace.raw]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReconstructArgs {
    /// K-space written by `undersample`
    #[arg(long)]
    kspace: PathBuf,
    #[arg(long, value_parser = parse_dims)]
    dims: [usize; 3],
    #[arg(long)]
    mask: PathBuf,
    #[command(flatten)]
    recon: ReconArgs,
    /// Raw f32 magnitude volume [default: <out-dir>/recon.raw]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Validation,
    Test,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    recon: ReconArgs,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, default_value_t = 0)]
    fold: usize,
    /// Report name [default: mask file stem]
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args)]
struct AugmentMotionArgs {
    #[arg(long)]
    volume: PathBuf,
    #[arg(long, value_parser = parse_dims)]
    dims: [usize; 3],
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Translation bound in pixels
    #[arg(long, default_value_t = 5.0)]
    t_bound: f64,
    /// Rotation bound in degrees
    #[arg(long, default_value_t = 5.0)]
    r_bound: f64,
    /// Moved volume; transforms go to the same path with a .json extension
    /// [default: <out-dir>/moved.raw]
    #[arg(long)]
    out: Option<PathBuf>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn parse_range(s: &str) -> Result<[usize; 2], String> {
    let (lo, hi) = s.split_once(':').ok_or("expected lo:hi")?;
    Ok([lo.trim().parse().map_err(|e| format!("{e}"))?, hi.trim().parse().map_err(|e| format!("{e}"))?])
}

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split([',', 'x'])
        .map(|t| t.trim().parse().map_err(|e| format!("{e}")))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|_| "expected slices,height,width".to_string())
}

/// Exit status classes: bad input detected up front, or a failure while working.
enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

trait Classify<T> {
    fn config(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn config(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Config(e.into()))
    }
    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

struct Ctx {
    out_dir: Option<PathBuf>,
}

impl Ctx {
    fn dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    /// `name` inside the output directory, creating the directory.
    fn file(&self, name: &str) -> anyhow::Result<PathBuf> {
        let dir = self.dir();
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir.join(name))
    }
}

fn print_seed(seed: impl std::fmt::Display) {
    println!("seed: {seed}");
}

fn write_json(path: &Path, value: &serde_json::Value) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(())
}

/// Validated config and the dataset it names.
fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset, Failure> {
    let path = cfg.manifest.as_ref().ok_or_else(|| anyhow!("--manifest is required")).config()?;
    let manifest = Manifest::load(path).runtime()?;
    Dataset::from_manifest(&manifest, &cfg.reference_modality, &cfg.target_modality, cfg.crop).runtime()
}

fn check_fold(cfg: &ExperimentConfig, fold: usize) -> Result<(), Failure> {
    if fold >= cfg.folds {
        return Err(Failure::Config(anyhow!("fold {fold} out of range for {} folds", cfg.folds)));
    }
    Ok(())
}

fn gen_phantom(ctx: &Ctx, a: &GenPhantomArgs) -> Result<(), Failure> {
    print_seed(a.seed);
    if a.subjects == 0 || a.slices == 0 {
        return Err(Failure::Config(anyhow!("subjects and slices must be positive")));
    }
    if a.size < 32 {
        return Err(Failure::Config(anyhow!("phantom size must be at least 32, got {}", a.size)));
    }
    let dir = ctx.dir();
    write_phantom_dataset(&dir, a.subjects, a.slices, a.size, a.seed).runtime()?;
    println!("manifest: {}", dir.join("manifest.json").display());
    Ok(())
}

fn generate_pattern(ctx: &Ctx, a: &GeneratePatternArgs) -> Result<(), Failure> {
    let kind = a.kind.kind();
    let (mask, seed) = if kind == PatternKind::Learned {
        let ckpt = a
            .checkpoint
            .as_ref()
            .ok_or_else(|| anyhow!("the learned pattern needs --checkpoint"))
            .config()?;
        let (tc, state) = TrainState::load(ckpt).runtime()?;
        let best = state
            .best
            .ok_or_else(|| anyhow!("{} holds no completed epoch", ckpt.display()))
            .runtime()?;
        let r = a.r.unwrap_or(tc.r);
        mmpattern::check_factor(r).config()?;
        (topk_extract(&best.p, r).runtime()?, tc.seed)
    } else {
        let h = a.height.or(a.size).ok_or_else(|| anyhow!("--size or --height is required")).config()?;
        let w = a.width.or(a.size).ok_or_else(|| anyhow!("--size or --width is required")).config()?;
        let r = a.r.unwrap_or(0.25);
        mmpattern::check_factor(r).config()?;
        if h == 0 || w == 0 {
            return Err(Failure::Config(anyhow!("pattern dimensions must be positive")));
        }
        let params = BaselineParams {
            sigma_rows: a.sigma_rows,
            poisson_r0: a.poisson_r0,
        };
        (baseline_mask(kind, h, w, r, &params, a.seed).runtime()?, a.seed)
    };
    print_seed(seed);
    let out = match &a.out {
        Some(p) => {
            ensure_parent(p).runtime()?;
            p.clone()
        }
        None => ctx.file(&format!("pattern_{}.pgm", kind.report_name())).runtime()?,
    };
    export_mask_pgm(&mask, &out).runtime()?;
    let (h, w) = mask.shape();
    write_json(
        &out.with_extension("json"),
        &json!({
            "kind": kind,
            "r": mask.factor(),
            "seed": seed,
            "count": mask.count(),
            "height": h,
            "width": w,
        }),
    )
    .runtime()?;
    println!("pattern: {} ({} of {} sampled)", out.display(), mask.count(), h * w);
    Ok(())
}

fn fit_translator(ctx: &Ctx, a: &FitTranslatorArgs) -> Result<(), Failure> {
    let mut cfg = a.data.config().config()?;
    a.translator.apply(&mut cfg);
    cfg.validate().config()?;
    check_fold(&cfg, a.fold)?;
    let seed = derive_seed(cfg.fold_seed(a.fold), SEED_TRANSLATOR);
    print_seed(cfg.fold_seed(a.fold));
    let dataset = load_dataset(&cfg)?;
    let split = fold_split(&dataset, &cfg, a.fold).runtime()?;
    let (pairs, _) = subject_pairs(&dataset, &split.train, &cfg).runtime()?;
    let model = cfg.translator.fit(&pairs, seed).runtime()?;
    let out = ctx.file("translator.json").runtime()?;
    model.save(&out).runtime()?;
    if let Some(s) = &model.summary {
        println!("train loss: {} over {} pairs", s.train_loss, s.pairs);
    }
    println!("translator: {}", out.display());
    Ok(())
}

fn residual(ctx: &Ctx, a: &ResidualArgs) -> Result<(), Failure> {
    let cfg = a.data.config().config()?;
    cfg.validate().config()?;
    check_fold(&cfg, a.fold)?;
    print_seed(cfg.fold_seed(a.fold));
    let model_path = a.model.clone().unwrap_or_else(|| ctx.dir().join("translator.json"));
    let model = TranslatorModel::load(&model_path).runtime()?;
    let dataset = load_dataset(&cfg)?;
    let split = fold_split(&dataset, &cfg, a.fold).runtime()?;
    let (val, _) = subject_pairs(&dataset, &split.validation, &cfg).runtime()?;
    let (raw, _, degenerate) = residual_prior(&model, &val).runtime()?;
    if degenerate {
        eprintln!("warning: residual is constant; optimize will use a flat prior");
    }
    let out = ctx.file("residual.json").runtime()?;
    fs::write(&out, serde_json::to_string(raw.grid()).runtime()?).runtime()?;
    export_map_pgm(raw.grid(), "residual", &ctx.file("residual_map.pgm").runtime()?).runtime()?;
    println!("residual: {}", out.display());
    Ok(())
}

fn optimize(ctx: &Ctx, a: &OptimizeArgs) -> Result<(), Failure> {
    let mut cfg = a.data.config().config()?;
    if !a.resume {
        a.train.apply(&mut cfg);
    }
    cfg.validate().config()?;
    check_fold(&cfg, a.fold)?;
    let ckpt = match &a.checkpoint {
        Some(p) => p.clone(),
        None => ctx.file("checkpoint.json").runtime()?,
    };
    ensure_parent(&ckpt).runtime()?;
    let resumed = if a.resume {
        if a.train.changes_model() {
            return Err(Failure::Config(anyhow!(
                "only --max-epochs may change when resuming; the checkpoint's other settings are used"
            )));
        }
        let (mut tc, state) = TrainState::load(&ckpt).runtime()?;
        set(&mut tc.max_epochs, a.train.max_epochs);
        tc.validate().config()?;
        Some((tc, state))
    } else {
        None
    };
    let train_cfg = match &resumed {
        Some((tc, _)) => tc.clone(),
        None => cfg.train_config(cfg.fold_seed(a.fold)),
    };
    print_seed(train_cfg.seed);

    let residual_path = a.residual.clone().unwrap_or_else(|| ctx.dir().join("residual.json"));
    let text = fs::read_to_string(&residual_path)
        .with_context(|| format!("reading {}", residual_path.display()))
        .runtime()?;
    let grid: Grid<f64> = serde_json::from_str(&text).runtime()?;
    let raw = ResidualMap::new(grid).runtime()?;
    let (r_norm, degenerate) = normalized_prior(&raw);
    if degenerate {
        eprintln!("warning: residual is constant; using a flat prior of 0.5");
    }

    let dataset = load_dataset(&cfg)?;
    let split = fold_split(&dataset, &cfg, a.fold).runtime()?;
    let (train_pairs, _) = subject_pairs(&dataset, &split.train, &cfg).runtime()?;
    let (val_pairs, _) = subject_pairs(&dataset, &split.validation, &cfg).runtime()?;
    let (train_set, val_set) = (train_pairs.targets(), val_pairs.targets());
    let save = |s: &TrainState| s.save(&train_cfg, &ckpt);
    let (h, w) = r_norm.shape();
    let start = resumed.map_or_else(|| initial_state(h, w, &train_cfg), |(_, s)| s);
    let (state, p) = train_with(start, &train_set, &val_set, &r_norm, &train_cfg, save).runtime()?;
    state.save(&train_cfg, &ckpt).runtime()?;
    let mut csv = String::from("epoch,train_loss,val_loss,p_mean\n");
    for e in &state.history {
        csv.push_str(&format!("{},{},{},{}\n", e.epoch, e.train_loss, e.val_loss, e.p_mean));
    }
    fs::write(ctx.file("training.csv").runtime()?, csv).runtime()?;
    export_probmask_pgm(&p, &ctx.file("prob_mask.pgm").runtime()?).runtime()?;
    let mask = topk_extract(&p, train_cfg.r).runtime()?;
    let out = ctx.file("learned_pattern.pgm").runtime()?;
    export_mask_pgm(&mask, &out).runtime()?;
    println!("epochs: {}", state.epoch);
    println!("pattern: {}", out.display());
    Ok(())
}

fn pipeline(ctx: &Ctx, a: &PipelineArgs) -> Result<(), Failure> {
    let mut cfg = a.data.config().config()?;
    a.train.apply(&mut cfg);
    a.recon.apply(&mut cfg);
    a.translator.apply(&mut cfg);
    if let Some(b) = &a.baselines {
        cfg.baselines = match b.as_str() {
            "all" => PatternKind::BASELINES.to_vec(),
            "none" => Vec::new(),
            list => list
                .split(',')
                .map(|s| PatternKind::parse(s.trim()))
                .collect::<Result<_, _>>()
                .config()?,
        };
    }
    if a.sigma_rows.is_some() {
        cfg.baseline_params.sigma_rows = a.sigma_rows;
    }
    set(&mut cfg.baseline_params.poisson_r0, a.poisson_r0);
    cfg.motion.enabled |= a.motion;
    set(&mut cfg.motion.t_bound, a.t_bound);
    set(&mut cfg.motion.r_bound, a.r_bound);
    if let Some(d) = &ctx.out_dir {
        cfg.output_dir = d.clone();
    }
    cfg.validate().config()?;
    if cfg.manifest.is_none() {
        return Err(Failure::Config(anyhow!("--manifest is required")));
    }
    print_seed(cfg.seed);
    let summary = run_from_manifest(&cfg).runtime()?;
    for (name, e) in &summary.patterns {
        println!("{name}: psnr {} ssim {}", e.psnr, e.ssim);
    }
    if let Some(d) = summary.motion_psnr_drop {
        println!("motion psnr drop: {d:.3}");
    }
    println!("summary: {}", cfg.output_dir.join("summary.json").display());
    Ok(())
}

fn load_volume(path: &Path, dims: [usize; 3], crop: Option<usize>) -> Result<Vec<mmpattern::Image2D>, Failure> {
    let volume = Volume::load(path, dims).runtime()?;
    match crop {
        Some(c) => Ok(mmpattern::dataio::preprocess(&volume, c).runtime()?.0),
        None => Ok(volume.to_slices()),
    }
}

fn check_mask_shape(mask: &BinaryMask, shape: (usize, usize)) -> Result<(), Failure> {
    if mask.shape() != shape {
        return Err(Failure::Config(anyhow!(
            "mask is {:?} but slices are {:?}",
            mask.shape(),
            shape
        )));
    }
    Ok(())
}

fn undersample(ctx: &Ctx, a: &UndersampleArgs) -> Result<(), Failure> {
    print_seed("none");
    let mask = read_mask_pgm(&a.mask).config()?;
    let slices = load_volume(&a.volume, a.dims, a.crop)?;
    check_mask_shape(&mask, slices[0].shape())?;
    let mut bytes = Vec::new();
    for s in &slices {
        let y = mask.apply(&fft2_real(s)).runtime()?;
        for c in y.grid().data() {
            bytes.extend_from_slice(&c.re.to_le_bytes());
            bytes.extend_from_slice(&c.im.to_le_bytes());
        }
    }
    let out = match &a.out {
        Some(p) => p.clone(),
        None => ctx.file("kspace.raw").runtime()?,
    };
    ensure_parent(&out).runtime()?;
    fs::write(&out, bytes).with_context(|| format!("writing {}", out.display())).runtime()?;
    let (h, w) = mask.shape();
    println!("kspace: {} (dims {},{},{})", out.display(), slices.len(), h, w);
    Ok(())
}

fn reconstruct_cmd(ctx: &Ctx, a: &ReconstructArgs) -> Result<(), Failure> {
    print_seed("none");
    let mut cfg = ExperimentConfig::default();
    a.recon.apply(&mut cfg);
    cfg.recon.validate().config()?;
    let mask = read_mask_pgm(&a.mask).config()?;
    let [n, h, w] = a.dims;
    check_mask_shape(&mask, (h, w))?;
    let bytes = fs::read(&a.kspace).with_context(|| format!("reading {}", a.kspace.display())).runtime()?;
    if bytes.len() != n * h * w * 16 {
        return Err(Failure::Runtime(anyhow!(
            "{}: expected {} bytes, found {}",
            a.kspace.display(),
            n * h * w * 16,
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
    let mut recs = Vec::with_capacity(n);
    for s in values.chunks_exact(2 * h * w) {
        let data = s.chunks_exact(2).map(|c| mmpattern::Complex64::new(c[0], c[1])).collect();
        let y = KSpace2D::new(Grid::from_vec(h, w, data).runtime()?);
        recs.push(reconstruct(&y, &mask, &cfg.recon).runtime()?);
    }
    let out = match &a.out {
        Some(p) => p.clone(),
        None => ctx.file("recon.raw").runtime()?,
    };
    ensure_parent(&out).runtime()?;
    Volume::from_slices(&recs).runtime()?.save(&out).runtime()?;
    println!("reconstruction: {}", out.display());
    Ok(())
}

fn evaluate(ctx: &Ctx, a: &EvaluateArgs) -> Result<(), Failure> {
    let mut cfg = a.data.config().config()?;
    a.recon.apply(&mut cfg);
    cfg.validate().config()?;
    check_fold(&cfg, a.fold)?;
    print_seed(cfg.fold_seed(a.fold));
    let mask = read_mask_pgm(&a.mask).config()?;
    let dataset = load_dataset(&cfg)?;
    check_mask_shape(&mask, dataset.shape())?;
    let split = fold_split(&dataset, &cfg, a.fold).runtime()?;
    let ids = match a.split {
        SplitArg::Train => &split.train,
        SplitArg::Validation => &split.validation,
        SplitArg::Test => &split.test,
    };
    let (pairs, labels) = subject_pairs(&dataset, ids, &cfg).runtime()?;
    let report = evaluate_mask(&mask, &pairs.targets(), &labels, &cfg.recon, cfg.standard_psnr).runtime()?;
    let name = match &a.name {
        Some(n) => n.clone(),
        None => a.mask.file_stem().map_or("mask".into(), |s| s.to_string_lossy().into_owned()),
    };
    let csv = ctx.file(&format!("metrics_{name}.csv")).runtime()?;
    fs::write(&csv, report.to_csv()).runtime()?;
    let summary = PatternSummary::of(&report);
    write_json(&ctx.file(&format!("metrics_{name}.json")).runtime()?, &serde_json::to_value(&summary).runtime()?)
        .runtime()?;
    let (p, s) = summary.formatted();
    println!("{name}: psnr {p} ssim {s}");
    println!("metrics: {}", csv.display());
    Ok(())
}

fn augment_motion(ctx: &Ctx, a: &AugmentMotionArgs) -> Result<(), Failure> {
    print_seed(a.seed);
    if !(a.t_bound >= 0.0 && a.r_bound >= 0.0) {
        return Err(Failure::Config(anyhow!("motion bounds must be nonnegative")));
    }
    let slices = load_volume(&a.volume, a.dims, None)?;
    let mut moved = Vec::with_capacity(slices.len());
    let mut log = Vec::with_capacity(slices.len());
    for (i, s) in slices.iter().enumerate() {
        let t: RigidTransform = sample_rigid(derive_seed(a.seed, i as u64), a.t_bound, a.r_bound).runtime()?;
        moved.push(apply_rigid(s, &t));
        log.push(json!({ "slice": i, "dx": t.dx, "dy": t.dy, "theta": t.theta }));
    }
    let out = match &a.out {
        Some(p) => p.clone(),
        None => ctx.file("moved.raw").runtime()?,
    };
    ensure_parent(&out).runtime()?;
    Volume::from_slices(&moved).runtime()?.save(&out).runtime()?;
    write_json(&out.with_extension("json"), &json!({ "seed": a.seed, "transforms": log })).runtime()?;
    println!("volume: {}", out.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let ctx = Ctx {
        out_dir: cli.out_dir.clone(),
    };
    match &cli.command {
        Command::GenPhantom(a) => gen_phantom(&ctx, a),
        Command::GeneratePattern(a) => generate_pattern(&ctx, a),
        Command::FitTranslator(a) => fit_translator(&ctx, a),
        Command::Residual(a) => residual(&ctx, a),
        Command::Optimize(a) => optimize(&ctx, a),
        Command::Pipeline(a) => pipeline(&ctx, a),
        Command::Undersample(a) => undersample(&ctx, a),
        Command::Reconstruct(a) => reconstruct_cmd(&ctx, a),
        Command::Evaluate(a) => evaluate(&ctx, a),
        Command::AugmentMotion(a) => augment_motion(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mmpattern::optimizer::TrainConfig;

    #[test]
    fn unset_flags_keep_defaults() {
        let mut cfg = ExperimentConfig::default();
        TrainArgs::default().apply(&mut cfg);
        ReconArgs::default().apply(&mut cfg);
        TranslatorArgs::default().apply(&mut cfg);
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.train, TrainConfig::default());
    }

    #[test]
    fn parsers() {
        assert_eq!(parse_range("2:7"), Ok([2, 7]));
        assert!(parse_range("3").is_err());
        assert_eq!(parse_dims("3,64,32"), Ok([3, 64, 32]));
        assert_eq!(parse_dims("3x64x32"), Ok([3, 64, 32]));
        assert!(parse_dims("3,64").is_err());
    }

    #[test]
    fn cli_is_well_formed() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
