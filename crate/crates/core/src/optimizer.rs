//! Adam refinement of the learnable weight map through the soft-binarized
//! probabilistic mask and a zero-filled reconstruction surrogate.
//!
//! All randomness (initialization, batch order, per-step thresholds, the fixed
//! validation thresholds) is drawn from seeds derived from `TrainConfig::seed`
//! and the epoch or step counter, so a checkpoint resumes bitwise.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::fourier::{fft2_centered, fft2_real, ifft2_centered, KSpace2D};
use crate::grid::{Grid, Image2D};
use crate::probmask::{adjusted_mass, scale_to_factor, soft_binarize, ProbMask, ResidualMap, ThresholdMatrix, WeightMap};
use crate::{check_factor, derive_seed, Error, Result};

const STREAM_INIT: u64 = 0;
const STREAM_THRESHOLD: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_VALIDATION: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdResample {
    #[default]
    PerStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub r: f64,
    pub sigma_p: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub min_epochs: usize,
    pub max_epochs: usize,
    /// Epochs without strict validation improvement before stopping, once
    /// `min_epochs` have run.
    pub patience: usize,
    pub seed: u64,
    pub threshold_resample: ThresholdResample,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            r: 0.25,
            sigma_p: 5.0,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 16,
            min_epochs: 50,
            max_epochs: 200,
            patience: 10,
            seed: 0,
            threshold_resample: ThresholdResample::PerStep,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_factor(self.r)?;
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.lr > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("Adam betas must lie in [0, 1), got {} and {}", self.beta1, self.beta2));
        }
        if !(self.epsilon > 0.0) || !(self.sigma_p > 0.0) {
            return bad("epsilon and sigma_p must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if self.max_epochs < self.min_epochs {
            return bad(format!(
                "max_epochs ({}) is below min_epochs ({})",
                self.max_epochs, self.min_epochs
            ));
        }
        Ok(())
    }

    /// FNV-1a over the canonical JSON encoding; stored in checkpoints.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let hash = json
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3));
        format!("{hash:016x}")
    }
}

/// Uniform on `[-0.1, 0.1]`, then shifted to zero empirical mean.
pub fn init_weights(height: usize, width: usize, seed: u64) -> WeightMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Grid::from_fn(height, width, |_, _| rng.gen_range(-0.1..=0.1));
    let mean = g.mean();
    g.data_mut().iter_mut().for_each(|v| *v -= mean);
    WeightMap(g)
}

/// Image and its centered spectrum, computed once per training set.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Image2D,
    pub spectrum: KSpace2D,
}

impl Sample {
    pub fn new(image: Image2D) -> Self {
        let spectrum = fft2_real(&image);
        Self { image, spectrum }
    }
}

/// Intermediates of [`forward_loss`] needed by [`grad_w`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    w: Grid<f64>,
    r_norm: Grid<f64>,
    mass: Grid<f64>,
    mass_mean: f64,
    msoft: Grid<f64>,
    r: f64,
    sigma_p: f64,
    /// `(rec - x) * z / |z|`, scaled by `1 / (n * MN)`, per image.
    upstream: Vec<(Grid<Complex64>, KSpace2D)>,
}

/// Current probabilistic mask for `w`.
pub fn prob_mask(w: &WeightMap, r_norm: &ResidualMap, r: f64) -> Result<ProbMask> {
    scale_to_factor(&adjusted_mass(w, r_norm)?, r)
}

/// `(1 / 2n) * sum_i mean((|ifft(Msoft * F(x_i))| - x_i)^2)`.
pub fn forward_loss(
    w: &WeightMap,
    r_norm: &ResidualMap,
    batch: &[Image2D],
    th: &ThresholdMatrix,
    cfg: &TrainConfig,
) -> Result<(f64, ForwardCache)> {
    let samples: Vec<Sample> = batch.iter().cloned().map(Sample::new).collect();
    let refs: Vec<&Sample> = samples.iter().collect();
    forward_samples(w, r_norm, &refs, th, cfg, true)
}

fn forward_samples(
    w: &WeightMap,
    r_norm: &ResidualMap,
    batch: &[&Sample],
    th: &ThresholdMatrix,
    cfg: &TrainConfig,
    keep_cache: bool,
) -> Result<(f64, ForwardCache)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("training batch"));
    }
    let mass = adjusted_mass(w, r_norm)?;
    let p = scale_to_factor(&mass, cfg.r)?;
    let msoft = soft_binarize(&p, th, cfg.sigma_p)?;
    let n = batch.len() as f64;
    let mn = msoft.len() as f64;
    let mut loss = 0.0;
    let mut upstream = Vec::with_capacity(if keep_cache { batch.len() } else { 0 });
    for s in batch {
        s.image.ensure_shape(msoft.shape())?;
        let masked = s.spectrum.zip_map(&msoft, |&x, &m| x * m)?;
        let z = ifft2_centered(&KSpace2D::new(masked));
        let mut sse = 0.0;
        let mut g = Vec::with_capacity(z.len());
        for (zi, &xi) in z.data().iter().zip(s.image.data()) {
            let a = zi.norm();
            let d = a - xi;
            sse += d * d;
            if keep_cache {
                // magnitude subgradient is taken as 0 at z = 0
                g.push(if a > 0.0 { zi * (d / (a * n * mn)) } else { Complex64::default() });
            }
        }
        loss += sse / mn;
        if keep_cache {
            let g = Grid::from_vec(z.height(), z.width(), g)?;
            upstream.push((g, s.spectrum.clone()));
        }
    }
    let cache = ForwardCache {
        w: w.0.clone(),
        r_norm: r_norm.grid().clone(),
        mass_mean: mass.mean(),
        mass,
        msoft,
        r: cfg.r,
        sigma_p: cfg.sigma_p,
        upstream,
    };
    Ok((loss / (2.0 * n), cache))
}

/// Exact gradient of the [`forward_loss`] value with respect to `w`.
pub fn grad_w(cache: &ForwardCache) -> Grid<f64> {
    let (h, w) = cache.msoft.shape();
    let mn = (h * w) as f64;
    // dL/dMsoft
    let mut g_msoft = vec![0.0; h * w];
    for (g, spectrum) in &cache.upstream {
        let gu = fft2_centered(g);
        for ((acc, gq), xq) in g_msoft.iter_mut().zip(gu.data()).zip(spectrum.data()) {
            *acc += (gq.conj() * xq).re;
        }
    }
    // through the sigmoid
    let g_p: Vec<f64> = g_msoft
        .iter()
        .zip(cache.msoft.data())
        .map(|(g, &s)| g * cache.sigma_p * s * (1.0 - s))
        .collect();
    // through P = R m / mean(m)
    let mbar = cache.mass_mean;
    let coupling: f64 = g_p.iter().zip(cache.mass.data()).map(|(g, m)| g * m).sum();
    let shift = cache.r * coupling / (mn * mbar * mbar);
    let data = g_p
        .iter()
        .zip(cache.w.data())
        .zip(cache.r_norm.data())
        .map(|((gp, &wi), &ri)| {
            let relu_active = wi.clamp(-1.0, 1.0) + ri > 0.0;
            let clip_active = wi > -1.0 && wi < 1.0;
            if relu_active && clip_active {
                cache.r * gp / mbar - shift
            } else {
                0.0
            }
        })
        .collect();
    Grid::from_vec(h, w, data).expect("gradient shape matches mask")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// `mean(P)` at the end of the epoch.
    pub p_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestSnapshot {
    pub val_loss: f64,
    pub epoch: usize,
    pub p: ProbMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub w: WeightMap,
    pub first_moment: Grid<f64>,
    pub second_moment: Grid<f64>,
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub stale_epochs: usize,
    pub best: Option<BestSnapshot>,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(w: WeightMap) -> Self {
        let (h, wd) = w.shape();
        Self {
            w,
            first_moment: Grid::zeros(h, wd),
            second_moment: Grid::zeros(h, wd),
            step: 0,
            epoch: 0,
            stale_epochs: 0,
            best: None,
            history: Vec::new(),
        }
    }

    pub fn save(&self, cfg: &TrainConfig, path: &Path) -> Result<()> {
        let ckpt = CheckpointRef {
            config_hash: cfg.fingerprint(),
            config: cfg,
            state: self,
        };
        fs::write(path, serde_json::to_string(&ckpt)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(TrainConfig, TrainState)> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.config.fingerprint() != ckpt.config_hash {
            return Err(Error::Format(format!(
                "{}: checkpoint config hash does not match its config",
                path.display()
            )));
        }
        Ok((ckpt.config, ckpt.state))
    }
}

#[derive(Serialize)]
struct CheckpointRef<'a> {
    config_hash: String,
    config: &'a TrainConfig,
    state: &'a TrainState,
}

#[derive(Deserialize)]
struct Checkpoint {
    config_hash: String,
    config: TrainConfig,
    state: TrainState,
}

/// Bias-corrected Adam update of `state.w`.
pub fn adam_step(state: &mut TrainState, grad: &Grid<f64>, cfg: &TrainConfig) -> Result<()> {
    state.w.ensure_shape(grad.shape())?;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let w = state.w.0.data_mut();
    let m = state.first_moment.data_mut();
    let v = state.second_moment.data_mut();
    for (((wi, mi), vi), &g) in w.iter_mut().zip(m).zip(v).zip(grad.data()) {
        *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
        *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
        let mhat = *mi / c1;
        let vhat = *vi / c2;
        *wi -= cfg.lr * mhat / (vhat.sqrt() + cfg.epsilon);
    }
    Ok(())
}

/// Untrained state with the weights drawn from the init stream of `cfg.seed`.
pub fn initial_state(height: usize, width: usize, cfg: &TrainConfig) -> TrainState {
    TrainState::new(init_weights(height, width, derive_seed(cfg.seed, STREAM_INIT)))
}

/// Fresh training run from [`init_weights`]; returns the final state and the
/// best-validation probabilistic mask.
pub fn train(
    train_set: &[Image2D],
    validation_set: &[Image2D],
    r_norm: &ResidualMap,
    cfg: &TrainConfig,
) -> Result<(TrainState, ProbMask)> {
    let (h, w) = r_norm.shape();
    train_from(initial_state(h, w, cfg), train_set, validation_set, r_norm, cfg)
}

/// Continues `state` until the stopping rule fires.
pub fn train_from(
    state: TrainState,
    train_set: &[Image2D],
    validation_set: &[Image2D],
    r_norm: &ResidualMap,
    cfg: &TrainConfig,
) -> Result<(TrainState, ProbMask)> {
    train_with(state, train_set, validation_set, r_norm, cfg, |_| Ok(()))
}

/// [`train_from`] with a hook run after every epoch, e.g. for checkpointing.
pub fn train_with(
    mut state: TrainState,
    train_set: &[Image2D],
    validation_set: &[Image2D],
    r_norm: &ResidualMap,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&TrainState) -> Result<()>,
) -> Result<(TrainState, ProbMask)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    if validation_set.is_empty() {
        return Err(Error::EmptyInput("validation set"));
    }
    let (h, w) = r_norm.shape();
    state.w.ensure_shape((h, w))?;
    let train: Vec<Sample> = train_set.iter().cloned().map(Sample::new).collect();
    let val: Vec<Sample> = validation_set.iter().cloned().map(Sample::new).collect();
    let val_refs: Vec<&Sample> = val.iter().collect();
    let val_th = ThresholdMatrix::random(h, w, derive_seed(cfg.seed, STREAM_VALIDATION));
    let th_stream = derive_seed(cfg.seed, STREAM_THRESHOLD);
    let shuffle_stream = derive_seed(cfg.seed, STREAM_SHUFFLE);

    while state.epoch < cfg.max_epochs {
        if state.epoch >= cfg.min_epochs && state.stale_epochs >= cfg.patience {
            break;
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(shuffle_stream, state.epoch as u64)));
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let th = ThresholdMatrix::random(h, w, derive_seed(th_stream, state.step));
            let (loss, cache) = forward_samples(&state.w, r_norm, &batch, &th, cfg, true)?;
            adam_step(&mut state, &grad_w(&cache), cfg)?;
            loss_sum += loss;
            batches += 1;
        }
        let p = prob_mask(&state.w, r_norm, cfg.r)?;
        let (val_loss, _) = forward_samples(&state.w, r_norm, &val_refs, &val_th, cfg, false)?;
        state.epoch += 1;
        state.history.push(EpochRecord {
            epoch: state.epoch,
            train_loss: loss_sum / batches as f64,
            val_loss,
            p_mean: p.mean(),
        });
        if state.best.as_ref().map_or(true, |b| val_loss < b.val_loss) {
            state.best = Some(BestSnapshot {
                val_loss,
                epoch: state.epoch,
                p,
            });
            state.stale_epochs = 0;
        } else {
            state.stale_epochs += 1;
        }
        on_epoch(&state)?;
    }
    let best = match &state.best {
        Some(b) => b.p.clone(),
        None => prob_mask(&state.w, r_norm, cfg.r)?,
    };
    Ok((state, best))
}

/// Validation loss of `w` under the fixed validation thresholds of `cfg.seed`.
pub fn validation_loss(
    w: &WeightMap,
    r_norm: &ResidualMap,
    validation_set: &[Image2D],
    cfg: &TrainConfig,
) -> Result<f64> {
    let (h, wd) = r_norm.shape();
    let val: Vec<Sample> = validation_set.iter().cloned().map(Sample::new).collect();
    let refs: Vec<&Sample> = val.iter().collect();
    let th = ThresholdMatrix::random(h, wd, derive_seed(cfg.seed, STREAM_VALIDATION));
    Ok(forward_samples(w, r_norm, &refs, &th, cfg, false)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fourier::magnitude;
    use crate::probmask::sigmoid;

    fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Image2D {
        Grid::from_fn(h, w, |_, _| rng.gen::<f64>())
    }

    /// Weights and prior kept at least `margin` away from every kink.
    fn smooth_instance(h: usize, w: usize, seed: u64, margin: f64) -> (WeightMap, ResidualMap) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ws = Vec::new();
        let mut rs = Vec::new();
        for _ in 0..h * w {
            loop {
                let wi: f64 = rng.gen_range(-1.3..1.3);
                let ri: f64 = rng.gen_range(0.0..1.0);
                if (wi.abs() - 1.0).abs() > margin && (wi.clamp(-1.0, 1.0) + ri).abs() > margin {
                    ws.push(wi);
                    rs.push(ri);
                    break;
                }
            }
        }
        (
            WeightMap(Grid::from_vec(h, w, ws).unwrap()),
            ResidualMap::new(Grid::from_vec(h, w, rs).unwrap()).unwrap(),
        )
    }

    // Independent step-by-step recomputation of the loss.
    fn oracle_loss(w: &WeightMap, r: &ResidualMap, batch: &[Image2D], th: &ThresholdMatrix, cfg: &TrainConfig) -> f64 {
        let m: Vec<f64> = w
            .data()
            .iter()
            .zip(r.data())
            .map(|(wi, ri)| (wi.max(-1.0).min(1.0) + ri).max(0.0))
            .collect();
        let mbar = m.iter().sum::<f64>() / m.len() as f64;
        let msoft: Vec<f64> = m
            .iter()
            .zip(th.data())
            .map(|(mi, ti)| sigmoid(cfg.sigma_p * (cfg.r * mi / mbar - ti)))
            .collect();
        let mut total = 0.0;
        for x in batch {
            let k = fft2_real(x);
            let masked = Grid::from_vec(
                x.height(),
                x.width(),
                k.data().iter().zip(&msoft).map(|(c, s)| c * s).collect(),
            )
            .unwrap();
            let rec = magnitude(&ifft2_centered(&KSpace2D::new(masked)));
            let mse: f64 = rec.data().iter().zip(x.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
                / x.len() as f64;
            total += mse;
        }
        total / (2.0 * batch.len() as f64)
    }

    #[test]
    fn init_weights_contract() {
        let a = init_weights(17, 13, 4);
        assert!(a.mean().abs() < 1e-15);
        assert_eq!(a, init_weights(17, 13, 4));
        assert!(a.data().iter().all(|v| v.abs() <= 0.2));
        assert_ne!(a, init_weights(17, 13, 5));
    }

    #[test]
    fn full_sampling_limit_has_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch: Vec<Image2D> = (0..3).map(|_| random_image(8, 8, &mut rng)).collect();
        let w = WeightMap(Grid::zeros(8, 8));
        let r = ResidualMap::uniform(8, 8, 0.5);
        let th = ThresholdMatrix::from_grid(Grid::zeros(8, 8)).unwrap();
        let cfg = TrainConfig {
            r: 1.0,
            sigma_p: 200.0,
            ..TrainConfig::default()
        };
        let (loss, _) = forward_loss(&w, &r, &batch, &th, &cfg).unwrap();
        assert!(loss < 1e-20, "{loss}");
    }

    #[test]
    fn empty_sampling_limit_is_half_mean_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch: Vec<Image2D> = (0..4).map(|_| random_image(8, 8, &mut rng)).collect();
        let w = WeightMap(Grid::zeros(8, 8));
        let r = ResidualMap::uniform(8, 8, 0.5);
        let th = ThresholdMatrix::from_grid(Grid::filled(8, 8, 0.999)).unwrap();
        let cfg = TrainConfig {
            r: 0.001,
            sigma_p: 1e5,
            ..TrainConfig::default()
        };
        let (loss, _) = forward_loss(&w, &r, &batch, &th, &cfg).unwrap();
        let expected: f64 = batch.iter().map(|x| x.data().iter().map(|v| v * v).sum::<f64>() / 64.0).sum::<f64>() / 8.0;
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_recomputation() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let (w, r) = smooth_instance(8, 8, seed, 0.0);
            let x = vec![random_image(8, 8, &mut rng)];
            let th = ThresholdMatrix::random(8, 8, seed);
            let cfg = TrainConfig::default();
            let (loss, _) = forward_loss(&w, &r, &x, &th, &cfg).unwrap();
            assert!((loss - oracle_loss(&w, &r, &x, &th, &cfg)).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_mass_propagates() {
        let w = WeightMap(Grid::filled(4, 4, -1.0));
        let r = ResidualMap::uniform(4, 4, 0.0);
        let th = ThresholdMatrix::random(4, 4, 0);
        let x = vec![Grid::zeros(4, 4)];
        assert!(matches!(
            forward_loss(&w, &r, &x, &th, &TrainConfig::default()),
            Err(Error::DegenerateMass)
        ));
    }

    fn finite_difference(w: &WeightMap, r: &ResidualMap, x: &[Image2D], th: &ThresholdMatrix, cfg: &TrainConfig) -> Vec<f64> {
        let h = 1e-5;
        (0..w.len())
            .map(|i| {
                let mut plus = w.clone();
                plus.0.data_mut()[i] += h;
                let mut minus = w.clone();
                minus.0.data_mut()[i] -= h;
                let lp = forward_loss(&plus, r, x, th, cfg).unwrap().0;
                let lm = forward_loss(&minus, r, x, th, cfg).unwrap().0;
                (lp - lm) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
            let (w, r) = smooth_instance(8, 8, seed, 1e-3);
            let x: Vec<Image2D> = (0..2).map(|_| random_image(8, 8, &mut rng)).collect();
            let th = ThresholdMatrix::random(8, 8, seed);
            let cfg = TrainConfig {
                r: 0.3,
                ..TrainConfig::default()
            };
            let (_, cache) = forward_loss(&w, &r, &x, &th, &cfg).unwrap();
            let g = grad_w(&cache);
            let fd = finite_difference(&w, &r, &x, &th, &cfg);
            let scale = fd.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let err = g.data().iter().zip(&fd).fold(0.0f64, |a, (p, q)| a.max((p - q).abs()));
            assert!(err / scale < 1e-4, "seed {seed}: {}", err / scale);
        }
    }

    #[test]
    fn clipped_weights_have_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = WeightMap(Grid::from_fn(8, 8, |_, _| if rng.gen_bool(0.5) { 1.5 } else { -1.5 }));
        let r = ResidualMap::new(Grid::from_fn(8, 8, |_, _| rng.gen_range(1.1..2.0))).unwrap();
        let x = vec![random_image(8, 8, &mut rng)];
        let th = ThresholdMatrix::random(8, 8, 3);
        let (_, cache) = forward_loss(&w, &r, &x, &th, &TrainConfig::default()).unwrap();
        assert!(grad_w(&cache).data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn inactive_relu_has_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = WeightMap(Grid::from_fn(8, 8, |r, _| if r < 4 { -0.9 } else { 0.5 }));
        let rn = ResidualMap::new(Grid::from_fn(8, 8, |_, _| rng.gen_range(0.0..0.5))).unwrap();
        let x = vec![random_image(8, 8, &mut rng)];
        let th = ThresholdMatrix::random(8, 8, 4);
        let (_, cache) = forward_loss(&w, &rn, &x, &th, &TrainConfig::default()).unwrap();
        let g = grad_w(&cache);
        for i in 0..64 {
            if w.data()[i] + rn.data()[i] < 0.0 {
                assert_eq!(g.data()[i], 0.0);
            }
        }
        assert!(g.data()[40..].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn adam_zero_gradient_decays_moments() {
        let cfg = TrainConfig::default();
        let mut s = TrainState::new(WeightMap(Grid::from_vec(1, 2, vec![0.3, -0.2]).unwrap()));
        s.first_moment = Grid::from_vec(1, 2, vec![0.0, 0.0]).unwrap();
        s.second_moment = Grid::from_vec(1, 2, vec![0.0, 0.0]).unwrap();
        adam_step(&mut s, &Grid::zeros(1, 2), &cfg).unwrap();
        assert_eq!(s.w.data(), &[0.3, -0.2]);
        s.first_moment = Grid::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        s.second_moment = Grid::from_vec(1, 2, vec![4.0, 8.0]).unwrap();
        let w_before = s.w.clone();
        adam_step(&mut s, &Grid::zeros(1, 2), &cfg).unwrap();
        assert_eq!(s.first_moment.data(), &[0.5, 1.0]);
        assert_eq!(s.second_moment.data(), &[4.0 * 0.999, 8.0 * 0.999]);
        assert_ne!(s.w, w_before);
        assert_eq!(s.step, 2);
    }

    #[test]
    fn adam_first_step_by_hand() {
        let cfg = TrainConfig::default();
        let mut s = TrainState::new(WeightMap(Grid::from_vec(1, 2, vec![0.0, 0.0]).unwrap()));
        adam_step(&mut s, &Grid::from_vec(1, 2, vec![3.0, -1e-9]).unwrap(), &cfg).unwrap();
        // m = 0.5 g, v = 0.001 g^2; hats are g and g^2
        let expected0 = -2e-4 * 3.0 / (3.0 + 1e-8);
        let expected1 = -2e-4 * -1e-9 / (1e-9 + 1e-8);
        assert!((s.w.data()[0] - expected0).abs() < 1e-15);
        assert!((s.w.data()[1] - expected1).abs() < 1e-15);
    }

    fn toy_sets(seed: u64) -> (Vec<Image2D>, Vec<Image2D>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let train = (0..10).map(|_| random_image(8, 8, &mut rng)).collect();
        let val = (0..3).map(|_| random_image(8, 8, &mut rng)).collect();
        (train, val)
    }

    #[test]
    fn min_epochs_honored() {
        let (train_set, val) = toy_sets(1);
        let cfg = TrainConfig {
            min_epochs: 50,
            max_epochs: 50,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let r = ResidualMap::uniform(8, 8, 0.5);
        let (state, _) = train(&train_set, &val, &r, &cfg).unwrap();
        assert_eq!(state.epoch, 50);
        assert_eq!(state.history.len(), 50);
        assert_eq!(state.step, 50 * 3);
    }

    #[test]
    fn training_is_deterministic_and_keeps_mean() {
        let (train_set, val) = toy_sets(2);
        let cfg = TrainConfig {
            min_epochs: 5,
            max_epochs: 12,
            lr: 1e-2,
            batch_size: 3,
            seed: 9,
            ..TrainConfig::default()
        };
        let r = ResidualMap::uniform(8, 8, 0.5);
        let a = train(&train_set, &val, &r, &cfg).unwrap();
        let b = train(&train_set, &val, &r, &cfg).unwrap();
        assert_eq!(a, b);
        for rec in &a.0.history {
            assert!((rec.p_mean - cfg.r).abs() < 1e-12);
        }
        let best = a.0.best.as_ref().unwrap();
        assert!(a.0.history.iter().all(|h| h.val_loss >= best.val_loss));
        assert!(best.val_loss <= a.0.history.last().unwrap().val_loss);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (train_set, val) = toy_sets(3);
        let r = ResidualMap::uniform(8, 8, 0.5);
        let full_cfg = TrainConfig {
            min_epochs: 8,
            max_epochs: 8,
            lr: 1e-2,
            batch_size: 4,
            seed: 5,
            ..TrainConfig::default()
        };
        let (full, _) = train(&train_set, &val, &r, &full_cfg).unwrap();
        let half_cfg = TrainConfig {
            min_epochs: 3,
            max_epochs: 3,
            ..full_cfg.clone()
        };
        let (half, _) = train(&train_set, &val, &r, &half_cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        half.save(&half_cfg, &path).unwrap();
        let (loaded_cfg, loaded) = TrainState::load(&path).unwrap();
        assert_eq!(loaded, half);
        assert_eq!(loaded_cfg, half_cfg);
        let (resumed, _) = train_from(loaded, &train_set, &val, &r, &full_cfg).unwrap();
        assert_eq!(resumed, full);
    }

    #[test]
    fn tampered_checkpoint_rejected() {
        let state = TrainState::new(init_weights(2, 2, 0));
        let cfg = TrainConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        state.save(&cfg, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap().replace("\"batch_size\":16", "\"batch_size\":17");
        fs::write(&path, text).unwrap();
        assert!(TrainState::load(&path).is_err());
    }

    #[test]
    fn invalid_config_rejected() {
        let bad = [
            TrainConfig { r: 0.0, ..TrainConfig::default() },
            TrainConfig { lr: 0.0, ..TrainConfig::default() },
            TrainConfig { beta1: 1.0, ..TrainConfig::default() },
            TrainConfig { min_epochs: 10, max_epochs: 5, ..TrainConfig::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err());
        }
    }
}
