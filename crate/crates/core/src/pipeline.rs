//! End-to-end experiment: fit the translator, build the residual prior, learn
//! the pattern, then retrospectively under-sample the test slices and score
//! the learned pattern against the baseline generators.
//!
//! Every artifact is written as soon as its stage finishes, so a failed run
//! leaves its partial outputs next to a `FAILED` marker.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::{
    export_map_pgm, export_mask_pgm, export_probmask_pgm, preprocess, split_ids, Manifest, PhantomSubject,
    SplitSpec, Volume,
};
use crate::error::StageContext;
use crate::fourier::fft2_real;
use crate::grid::Image2D;
use crate::metrics::{MetricReport, Summary};
use crate::motion::{apply_rigid, sample_rigid, RigidTransform};
use crate::optimizer::{train, TrainConfig, TrainState};
use crate::patterns::{gen_center, gen_gaussian_1d, gen_poisson_variable_density, BinaryMask};
use crate::probmask::{topk_extract, ProbMask, ResidualMap};
use crate::recon::{reconstruct, ReconConfig, ReconKind};
use crate::translator::{
    fit_intensity_lut, fit_patch_ridge, normalize_residual, residual_map, PairedSliceSet, TranslatorModel,
};
use crate::{check_factor, derive_seed, Error, Result};

/// Name of the learned pattern in reports.
pub const OURS: &str = "ours";

// streams derived from the fold seed
pub const SEED_SPLIT: u64 = 0;
pub const SEED_TRAIN: u64 = 1;
pub const SEED_GAUSSIAN: u64 = 2;
pub const SEED_POISSON: u64 = 3;
pub const SEED_MOTION: u64 = 4;
pub const SEED_TRANSLATOR: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternKind {
    Learned,
    #[serde(rename = "gaussian1d")]
    Gaussian1d,
    Center,
    Poisson,
}

impl PatternKind {
    pub const BASELINES: [PatternKind; 3] = [PatternKind::Gaussian1d, PatternKind::Center, PatternKind::Poisson];

    /// Label used in file names and summaries.
    pub fn report_name(self) -> &'static str {
        match self {
            PatternKind::Learned => OURS,
            PatternKind::Gaussian1d => "gaussian1d",
            PatternKind::Center => "center",
            PatternKind::Poisson => "poisson",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "learned" | "ours" => Ok(PatternKind::Learned),
            "gaussian1d" => Ok(PatternKind::Gaussian1d),
            "center" => Ok(PatternKind::Center),
            "poisson" => Ok(PatternKind::Poisson),
            other => Err(Error::InvalidParameter(format!(
                "unknown pattern kind {other:?}; expected gaussian1d, center, poisson or learned"
            ))),
        }
    }
}

/// Parameters of the baseline generators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineParams {
    /// Row standard deviation of the 1D Gaussian pattern; `height / 6` when unset.
    pub sigma_rows: Option<f64>,
    /// Base exclusion radius of the Poisson-disc pattern, in pixels.
    pub poisson_r0: f64,
}

impl Default for BaselineParams {
    fn default() -> Self {
        Self {
            sigma_rows: None,
            poisson_r0: 1.0,
        }
    }
}

/// Builds a baseline pattern.
pub fn baseline_mask(
    kind: PatternKind,
    height: usize,
    width: usize,
    r: f64,
    params: &BaselineParams,
    seed: u64,
) -> Result<BinaryMask> {
    match kind {
        PatternKind::Gaussian1d => {
            let sigma = params.sigma_rows.unwrap_or(height as f64 / 6.0);
            gen_gaussian_1d(height, width, r, sigma, seed)
        }
        PatternKind::Center => gen_center(height, width, r),
        PatternKind::Poisson => gen_poisson_variable_density(height, width, r, params.poisson_r0, seed),
        PatternKind::Learned => Err(Error::InvalidParameter(
            "the learned pattern needs a trained probability mask".into(),
        )),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TranslatorSpec {
    Identity,
    Lut { bins: usize },
    PatchRidge { k: usize, lambda: f64, max_samples: usize },
}

impl Default for TranslatorSpec {
    fn default() -> Self {
        TranslatorSpec::Lut { bins: 256 }
    }
}

impl TranslatorSpec {
    pub fn fit(&self, train: &PairedSliceSet, seed: u64) -> Result<TranslatorModel> {
        match *self {
            TranslatorSpec::Identity => Ok(TranslatorModel::identity()),
            TranslatorSpec::Lut { bins } => fit_intensity_lut(train, bins),
            TranslatorSpec::PatchRidge { k, lambda, max_samples } => {
                fit_patch_ridge(train, k, lambda, max_samples, seed)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionConfig {
    pub enabled: bool,
    /// Translation bound in pixels.
    pub t_bound: f64,
    /// Rotation bound in degrees.
    pub r_bound: f64,
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            t_bound: 5.0,
            r_bound: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub manifest: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub reference_modality: String,
    pub target_modality: String,
    pub r: f64,
    /// Center crop size; the shorter slice side when unset.
    pub crop: Option<usize>,
    /// Half-open slice index range considered per subject.
    pub slice_range: Option<[usize; 2]>,
    /// Evenly spaced slices kept per subject within the range.
    pub slices_per_subject: Option<usize>,
    pub baselines: Vec<PatternKind>,
    pub baseline_params: BaselineParams,
    pub translator: TranslatorSpec,
    pub recon: ReconConfig,
    /// `r` and `seed` are overridden per fold.
    pub train: TrainConfig,
    pub motion: MotionConfig,
    pub seed: u64,
    /// Independent re-splits with derived seeds.
    pub folds: usize,
    /// Use `max^2` in PSNR instead of the unsquared peak.
    pub standard_psnr: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            output_dir: PathBuf::from("out"),
            reference_modality: "A".into(),
            target_modality: "B".into(),
            r: 0.25,
            crop: None,
            slice_range: None,
            slices_per_subject: None,
            baselines: PatternKind::BASELINES.to_vec(),
            baseline_params: BaselineParams::default(),
            translator: TranslatorSpec::default(),
            recon: ReconConfig::default(),
            train: TrainConfig::default(),
            motion: MotionConfig::default(),
            seed: 0,
            folds: 1,
            standard_psnr: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        check_factor(self.r)?;
        TrainConfig {
            r: self.r,
            ..self.train.clone()
        }
        .validate()?;
        self.recon.validate()?;
        if self.folds == 0 {
            return Err(Error::InvalidParameter("folds must be at least 1".into()));
        }
        if let Some(m) = &self.manifest {
            if !m.exists() {
                return Err(Error::InvalidParameter(format!("manifest {} does not exist", m.display())));
            }
        }
        if !(self.motion.t_bound >= 0.0 && self.motion.r_bound >= 0.0) {
            return Err(Error::InvalidParameter("motion bounds must be nonnegative".into()));
        }
        if let Some([lo, hi]) = self.slice_range {
            if lo >= hi {
                return Err(Error::InvalidParameter(format!("empty slice range {lo}..{hi}")));
            }
        }
        if self.slices_per_subject == Some(0) {
            return Err(Error::InvalidParameter("slices_per_subject must be positive".into()));
        }
        if self.baselines.contains(&PatternKind::Learned) {
            return Err(Error::InvalidParameter("the learned pattern is not a baseline".into()));
        }
        Ok(())
    }

    /// Seed of fold `fold`; the experiment seed itself for a single fold.
    pub fn fold_seed(&self, fold: usize) -> u64 {
        if self.folds == 1 {
            self.seed
        } else {
            derive_seed(self.seed, 1000 + fold as u64)
        }
    }

    /// Training settings of a fold: `r` from the experiment, seed derived
    /// from the fold seed.
    pub fn train_config(&self, fold_seed: u64) -> TrainConfig {
        TrainConfig {
            r: self.r,
            seed: derive_seed(fold_seed, SEED_TRAIN),
            ..self.train.clone()
        }
    }
}

/// Preprocessed slices of one subject in both modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectSlices {
    pub id: String,
    pub reference: Vec<Image2D>,
    pub target: Vec<Image2D>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub subjects: Vec<SubjectSlices>,
}

impl Dataset {
    fn from_volumes(items: Vec<(String, Volume, Volume)>, crop: Option<usize>) -> Result<Self> {
        let mut subjects = Vec::with_capacity(items.len());
        for (id, reference, target) in items {
            let [_, h, w] = reference.dims();
            if target.dims() != reference.dims() {
                return Err(Error::InvalidParameter(format!(
                    "subject {id}: modality dims {:?} and {:?} differ",
                    reference.dims(),
                    target.dims()
                )));
            }
            let crop = crop.unwrap_or(h.min(w));
            subjects.push(SubjectSlices {
                id,
                reference: preprocess(&reference, crop)?.0,
                target: preprocess(&target, crop)?.0,
            });
        }
        if subjects.is_empty() {
            return Err(Error::EmptyInput("dataset subjects"));
        }
        Ok(Self { subjects })
    }

    pub fn from_manifest(
        manifest: &Manifest,
        reference_modality: &str,
        target_modality: &str,
        crop: Option<usize>,
    ) -> Result<Self> {
        let mut items = Vec::with_capacity(manifest.subjects.len());
        for s in &manifest.subjects {
            items.push((
                s.id.clone(),
                manifest.load_volume(s, reference_modality)?,
                manifest.load_volume(s, target_modality)?,
            ));
        }
        Self::from_volumes(items, crop)
    }

    /// In-memory phantoms, modality A as reference and B as target.
    pub fn from_phantoms(subjects: &[PhantomSubject], crop: Option<usize>) -> Result<Self> {
        Self::from_volumes(
            subjects
                .iter()
                .map(|s| (s.id.clone(), s.a.clone(), s.b.clone()))
                .collect(),
            crop,
        )
    }

    pub fn ids(&self) -> Vec<String> {
        self.subjects.iter().map(|s| s.id.clone()).collect()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.subjects[0].target[0].shape()
    }

    fn subject(&self, id: &str) -> Result<&SubjectSlices> {
        self.subjects
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::InvalidParameter(format!("subject {id} not in dataset")))
    }
}

/// Slice indices kept for a subject with `n` slices.
pub fn select_slices(n: usize, range: Option<[usize; 2]>, per_subject: Option<usize>) -> Vec<usize> {
    let [lo, hi] = range.unwrap_or([0, n]);
    let (lo, hi) = (lo.min(n), hi.min(n));
    let len = hi.saturating_sub(lo);
    match per_subject {
        Some(k) if k < len => (0..k).map(|j| lo + (2 * j + 1) * len / (2 * k)).collect(),
        _ => (lo..hi).collect(),
    }
}

/// Train/validation/test split of fold `fold`.
pub fn fold_split(dataset: &Dataset, cfg: &ExperimentConfig, fold: usize) -> Result<SplitSpec> {
    split_ids(dataset.ids(), derive_seed(cfg.fold_seed(fold), SEED_SPLIT))
}

/// Selected slices of the given subjects with `subject:slice` labels.
pub fn subject_pairs(dataset: &Dataset, ids: &[String], cfg: &ExperimentConfig) -> Result<(PairedSliceSet, Vec<String>)> {
    paired_set(dataset, ids, cfg, |s| s.reference.clone())
}

/// Pairs for the given subjects with `subject:slice` labels. `reference`
/// optionally replaces the reference slices of each subject.
fn paired_set<'a>(
    dataset: &'a Dataset,
    ids: &[String],
    cfg: &ExperimentConfig,
    reference: impl Fn(&'a SubjectSlices) -> Vec<Image2D>,
) -> Result<(PairedSliceSet, Vec<String>)> {
    let mut set = PairedSliceSet::new();
    let mut labels = Vec::new();
    for id in ids {
        let s = dataset.subject(id)?;
        let mut subject = PairedSliceSet::new();
        subject.push_subject(&reference(s), &s.target)?;
        for i in select_slices(s.target.len(), cfg.slice_range, cfg.slices_per_subject) {
            set.pairs.push(subject.pairs[i].clone());
            labels.push(format!("{id}:{i}"));
        }
    }
    if set.is_empty() {
        return Err(Error::EmptyInput("selected slices"));
    }
    Ok((set, labels))
}

/// Retrospective under-sampling, reconstruction and scoring of each target.
///
/// A mask that samples every coefficient, under a reconstructor that is then
/// the identity (zero-filled, or `lambda = 0`), returns the target itself
/// rather than its transform round trip, so perfect recovery scores `+inf`.
pub fn evaluate_mask(
    mask: &BinaryMask,
    targets: &[Image2D],
    labels: &[String],
    recon: &ReconConfig,
    standard_psnr: bool,
) -> Result<MetricReport> {
    let exact = mask.count() == mask.bits().len() && (recon.kind == ReconKind::ZeroFilled || recon.lambda == 0.0);
    let mut recs = Vec::with_capacity(targets.len());
    for x in targets {
        if exact {
            x.ensure_shape(mask.shape())?;
            recs.push(x.map(|v| v.abs()));
            continue;
        }
        let y = mask.apply(&fft2_real(x))?;
        recs.push(reconstruct(&y, mask, recon)?);
    }
    MetricReport::evaluate(targets, &recs, labels, standard_psnr)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternSummary {
    pub psnr: Summary,
    pub ssim: Summary,
}

impl PatternSummary {
    pub fn of(report: &MetricReport) -> Self {
        Self {
            psnr: report.psnr_summary(),
            ssim: report.ssim_summary(),
        }
    }

    /// `mean (std)` of PSNR and SSIM.
    pub fn formatted(&self) -> (String, String) {
        (
            format!("{:.2} ({:.2})", self.psnr.mean, self.psnr.std),
            format!("{:.4} ({:.4})", self.ssim.mean, self.ssim.std),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionSummary {
    pub ours_motion: PatternSummary,
    /// Mean PSNR of the unaugmented learned pattern minus the augmented one.
    pub psnr_drop: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub seed: u64,
    pub test_slices: usize,
    pub epochs: usize,
    pub best_epoch: usize,
    pub residual_degenerate: bool,
    pub patterns: BTreeMap<String, PatternSummary>,
    pub motion: Option<MotionSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateEntry {
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub psnr: String,
    pub ssim: String,
}

/// Top-level summary. With one fold, mean and std are over test slices; with
/// several, over the per-fold means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub r: f64,
    pub seed: u64,
    pub patterns: BTreeMap<String, AggregateEntry>,
    pub motion_psnr_drop: Option<f64>,
    pub folds: Vec<FoldSummary>,
}

/// Everything a fold produces, kept in memory for callers.
#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub summary: FoldSummary,
    pub split: SplitSpec,
    pub residual: ResidualMap,
    pub r_norm: ResidualMap,
    pub state: TrainState,
    pub train_config: TrainConfig,
    pub learned_p: ProbMask,
    /// `(name, mask, per-slice report)` for the learned pattern and each baseline.
    pub patterns: Vec<(String, BinaryMask, MetricReport)>,
    pub motion: Option<MotionOutcome>,
}

#[derive(Debug, Clone)]
pub struct MotionOutcome {
    pub transforms: Vec<(String, RigidTransform)>,
    pub r_norm: ResidualMap,
    pub learned_p: ProbMask,
    pub mask: BinaryMask,
    pub report: MetricReport,
}

struct Writer<'a>(Option<&'a Path>);

impl Writer<'_> {
    fn path(&self, name: &str) -> Option<PathBuf> {
        self.0.map(|d| d.join(name))
    }

    fn text(&self, name: &str, text: &str) -> Result<()> {
        if let Some(p) = self.path(name) {
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        self.text(name, &(serde_json::to_string_pretty(value)? + "\n"))
    }

    fn mask(&self, name: &str, mask: &BinaryMask) -> Result<()> {
        self.path(name).map_or(Ok(()), |p| export_mask_pgm(mask, &p))
    }
}

/// Residual prior from a validation set; see [`normalized_prior`].
pub fn residual_prior(model: &TranslatorModel, validation: &PairedSliceSet) -> Result<(ResidualMap, ResidualMap, bool)> {
    let raw = residual_map(model, validation)?;
    let (norm, degenerate) = normalized_prior(&raw);
    Ok((raw, norm, degenerate))
}

/// Normalized residual; a constant residual falls back to a flat prior of 0.5
/// and sets the flag.
pub fn normalized_prior(raw: &ResidualMap) -> (ResidualMap, bool) {
    let (norm, degenerate) = normalize_residual(raw);
    if degenerate {
        (ResidualMap::uniform(raw.height(), raw.width(), 0.5), true)
    } else {
        (norm, false)
    }
}

/// Runs one fold. Artifacts go to `out` when given.
pub fn run_fold(dataset: &Dataset, cfg: &ExperimentConfig, fold: usize, out: Option<&Path>) -> Result<FoldOutcome> {
    let w = Writer(out);
    let seed = cfg.fold_seed(fold);
    let (h, wd) = dataset.shape();
    let split = fold_split(dataset, cfg, fold).stage("split")?;
    w.json("split.json", &split).stage("split")?;
    let train_cfg = cfg.train_config(seed);
    let seeds = [
        ("fold", seed),
        ("split", derive_seed(seed, SEED_SPLIT)),
        ("train", train_cfg.seed),
        ("translator", derive_seed(seed, SEED_TRANSLATOR)),
        ("gaussian1d", derive_seed(seed, SEED_GAUSSIAN)),
        ("poisson", derive_seed(seed, SEED_POISSON)),
        ("motion", derive_seed(seed, SEED_MOTION)),
    ];
    let log: String = seeds.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    w.text("seeds.log", &log).stage("split")?;

    let same = |s: &SubjectSlices| s.reference.clone();
    let (train_pairs, _) = paired_set(dataset, &split.train, cfg, same).stage("translate-fit")?;
    let (val_pairs, _) = paired_set(dataset, &split.validation, cfg, same).stage("translate-fit")?;
    let (test_pairs, test_labels) = paired_set(dataset, &split.test, cfg, same).stage("translate-fit")?;
    let model = cfg
        .translator
        .fit(&train_pairs, derive_seed(seed, SEED_TRANSLATOR))
        .stage("translate-fit")?;
    w.json("translator.json", &model).stage("translate-fit")?;

    let (residual, r_norm, degenerate) = residual_prior(&model, &val_pairs).stage("residual")?;
    if let Some(p) = w.path("residual_map.pgm") {
        export_map_pgm(residual.grid(), "residual", &p).stage("residual")?;
    }

    let train_targets = train_pairs.targets();
    let val_targets = val_pairs.targets();
    let (state, learned_p) = train(&train_targets, &val_targets, &r_norm, &train_cfg).stage("train")?;
    if let Some(p) = w.path("checkpoint.json") {
        state.save(&train_cfg, &p).stage("train")?;
    }
    let history: String = std::iter::once("epoch,train_loss,val_loss,p_mean\n".to_string())
        .chain(
            state
                .history
                .iter()
                .map(|e| format!("{},{},{},{}\n", e.epoch, e.train_loss, e.val_loss, e.p_mean)),
        )
        .collect();
    w.text("training.csv", &history).stage("train")?;
    if let Some(p) = w.path("prob_mask.pgm") {
        export_probmask_pgm(&learned_p, &p).stage("train")?;
    }

    let learned = topk_extract(&learned_p, cfg.r).stage("extract")?;
    w.mask("learned_pattern.pgm", &learned).stage("extract")?;

    let mut masks = vec![(OURS.to_string(), learned)];
    for &kind in &cfg.baselines {
        let stream = if kind == PatternKind::Poisson { SEED_POISSON } else { SEED_GAUSSIAN };
        let mask = baseline_mask(kind, h, wd, cfg.r, &cfg.baseline_params, derive_seed(seed, stream))
            .stage("baselines")?;
        w.mask(&format!("pattern_{}.pgm", kind.report_name()), &mask).stage("baselines")?;
        masks.push((kind.report_name().to_string(), mask));
    }

    let test_targets = test_pairs.targets();
    let mut patterns = Vec::with_capacity(masks.len());
    let mut summaries = BTreeMap::new();
    for (name, mask) in masks {
        let report = evaluate_mask(&mask, &test_targets, &test_labels, &cfg.recon, cfg.standard_psnr)
            .stage("evaluate")?;
        w.text(&format!("metrics_{name}.csv"), &report.to_csv()).stage("evaluate")?;
        summaries.insert(name.clone(), PatternSummary::of(&report));
        patterns.push((name, mask, report));
    }

    let motion = if cfg.motion.enabled {
        Some(run_motion(dataset, cfg, &split, &model, &train_targets, &test_targets, &test_labels, seed, &w).stage("motion")?)
    } else {
        None
    };
    let motion_summary = motion.as_ref().map(|m| {
        let ours_motion = PatternSummary::of(&m.report);
        MotionSummary {
            psnr_drop: summaries[OURS].psnr.mean - ours_motion.psnr.mean,
            ours_motion,
        }
    });

    let summary = FoldSummary {
        fold,
        seed,
        test_slices: test_targets.len(),
        epochs: state.epoch,
        best_epoch: state.best.as_ref().map_or(0, |b| b.epoch),
        residual_degenerate: degenerate,
        patterns: summaries,
        motion: motion_summary,
    };
    w.json("fold_summary.json", &summary).stage("evaluate")?;
    Ok(FoldOutcome {
        summary,
        split,
        residual,
        r_norm,
        state,
        train_config: train_cfg,
        learned_p,
        patterns,
        motion,
    })
}

/// Moves the reference slices of validation and test subjects, rebuilds the
/// residual prior with the fixed translator and relearns the pattern.
#[allow(clippy::too_many_arguments)]
fn run_motion(
    dataset: &Dataset,
    cfg: &ExperimentConfig,
    split: &SplitSpec,
    model: &TranslatorModel,
    train_targets: &[Image2D],
    test_targets: &[Image2D],
    test_labels: &[String],
    seed: u64,
    w: &Writer,
) -> Result<MotionOutcome> {
    let motion_seed = derive_seed(seed, SEED_MOTION);
    let mut transforms = Vec::new();
    let mut moved: BTreeMap<String, Vec<Image2D>> = BTreeMap::new();
    for id in split.validation.iter().chain(&split.test) {
        let subject_index = dataset.subjects.iter().position(|s| &s.id == id).expect("split ids come from dataset");
        let subject_seed = derive_seed(motion_seed, subject_index as u64);
        let s = dataset.subject(id)?;
        let mut slices = Vec::with_capacity(s.reference.len());
        for (i, img) in s.reference.iter().enumerate() {
            let t = sample_rigid(derive_seed(subject_seed, i as u64), cfg.motion.t_bound, cfg.motion.r_bound)?;
            slices.push(apply_rigid(img, &t));
            transforms.push((format!("{id}:{i}"), t));
        }
        moved.insert(id.clone(), slices);
    }
    w.json("motion_transforms.json", &transforms)?;
    let moved_ref = |s: &SubjectSlices| moved.get(&s.id).cloned().unwrap_or_else(|| s.reference.clone());
    let (val_pairs, _) = paired_set(dataset, &split.validation, cfg, moved_ref)?;
    let (_, r_norm, _) = residual_prior(model, &val_pairs)?;
    if let Some(p) = w.path("residual_map_motion.pgm") {
        export_map_pgm(r_norm.grid(), "residual_normalized", &p)?;
    }
    let train_cfg = cfg.train_config(seed);
    let (_, learned_p) = train(train_targets, &val_pairs.targets(), &r_norm, &train_cfg)?;
    let mask = topk_extract(&learned_p, cfg.r)?;
    w.mask("learned_pattern_motion.pgm", &mask)?;
    let report = evaluate_mask(&mask, test_targets, test_labels, &cfg.recon, cfg.standard_psnr)?;
    w.text("metrics_ours_motion.csv", &report.to_csv())?;
    Ok(MotionOutcome {
        transforms,
        r_norm,
        learned_p,
        mask,
        report,
    })
}

fn aggregate(folds: &[FoldSummary]) -> BTreeMap<String, AggregateEntry> {
    let mut out = BTreeMap::new();
    for name in folds[0].patterns.keys() {
        let (psnr, ssim) = if folds.len() == 1 {
            let p = &folds[0].patterns[name];
            (p.psnr.clone(), p.ssim.clone())
        } else {
            let means = |f: fn(&PatternSummary) -> f64| -> Vec<f64> { folds.iter().map(|x| f(&x.patterns[name])).collect() };
            (Summary::of(&means(|p| p.psnr.mean)), Summary::of(&means(|p| p.ssim.mean)))
        };
        out.insert(
            name.clone(),
            AggregateEntry {
                psnr: format!("{:.2} ({:.2})", psnr.mean, psnr.std),
                ssim: format!("{:.4} ({:.4})", ssim.mean, ssim.std),
                psnr_mean: psnr.mean,
                psnr_std: psnr.std,
                ssim_mean: ssim.mean,
                ssim_std: ssim.std,
            },
        );
    }
    out
}

/// Runs every fold, writing artifacts under `out_dir` (one subdirectory per
/// fold when there are several) and `summary.json` at the top.
///
/// On failure a `FAILED` file naming the stage and cause is left in `out_dir`.
pub fn run_pipeline(cfg: &ExperimentConfig, dataset: &Dataset, out_dir: &Path) -> Result<ExperimentSummary> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let marker = out_dir.join("FAILED");
    if marker.exists() {
        fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    }
    let result = run_all(cfg, dataset, out_dir);
    if let Err(e) = &result {
        fs::write(&marker, format!("{e}\n")).map_err(|io| Error::io(&marker, io))?;
    }
    result
}

fn run_all(cfg: &ExperimentConfig, dataset: &Dataset, out_dir: &Path) -> Result<ExperimentSummary> {
    cfg.validate().stage("config")?;
    Writer(Some(out_dir)).json("config.json", cfg).stage("config")?;
    let mut folds = Vec::with_capacity(cfg.folds);
    for fold in 0..cfg.folds {
        let dir = if cfg.folds == 1 {
            out_dir.to_path_buf()
        } else {
            out_dir.join(format!("fold_{fold}"))
        };
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e)).stage("split")?;
        folds.push(run_fold(dataset, cfg, fold, Some(&dir))?.summary);
    }
    let drops: Vec<f64> = folds.iter().filter_map(|f| f.motion.as_ref().map(|m| m.psnr_drop)).collect();
    let summary = ExperimentSummary {
        r: cfg.r,
        seed: cfg.seed,
        patterns: aggregate(&folds),
        motion_psnr_drop: (!drops.is_empty()).then(|| drops.iter().sum::<f64>() / drops.len() as f64),
        folds,
    };
    Writer(Some(out_dir)).json("summary.json", &summary).stage("evaluate")?;
    Ok(summary)
}

/// Loads the manifest named by `cfg` and runs the pipeline.
pub fn run_from_manifest(cfg: &ExperimentConfig) -> Result<ExperimentSummary> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    let manifest_path = cfg
        .manifest
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter("no manifest configured".into()))?;
    let loaded = Manifest::load(manifest_path)
        .and_then(|m| Dataset::from_manifest(&m, &cfg.reference_modality, &cfg.target_modality, cfg.crop))
        .stage("load");
    match loaded {
        Ok(dataset) => run_pipeline(cfg, &dataset, out),
        Err(e) => {
            fs::create_dir_all(out).map_err(|io| Error::io(out, io))?;
            let marker = out.join("FAILED");
            fs::write(&marker, format!("{e}\n")).map_err(|io| Error::io(&marker, io))?;
            Err(e)
        }
    }
}
