//! Cross-modality translation and the k-space residual prior.
//!
//! A translator predicts the target-contrast slice from three neighbouring
//! reference slices. Where it fails, `|F(prediction) - F(target)|` is large;
//! averaged over a validation set this residual marks the k-space positions
//! that the reference contrast cannot supply.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::Volume;
use crate::fourier::fft2_real;
use crate::grid::{Grid, Image2D};
use crate::probmask::ResidualMap;
use crate::{Error, Result};

/// One training or validation example: reference slices `i-1, i, i+1` and
/// the co-located target slice.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSlice {
    pub reference: [Image2D; 3],
    pub target: Image2D,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairedSliceSet {
    pub pairs: Vec<PairedSlice>,
}

impl PairedSliceSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends every slice of one subject. Boundary slices repeat their only
    /// neighbour.
    pub fn push_subject(&mut self, reference: &[Image2D], target: &[Image2D]) -> Result<()> {
        if reference.len() != target.len() {
            return Err(Error::InvalidParameter(format!(
                "{} reference slices but {} target slices",
                reference.len(),
                target.len()
            )));
        }
        let n = reference.len();
        for i in 0..n {
            let prev = if i == 0 { (i + 1).min(n - 1) } else { i - 1 };
            let next = if i + 1 == n { i.saturating_sub(1) } else { i + 1 };
            let pair = PairedSlice {
                reference: [
                    reference[prev].clone(),
                    reference[i].clone(),
                    reference[next].clone(),
                ],
                target: target[i].clone(),
            };
            if let Some(first) = self.pairs.first() {
                first.target.ensure_shape(pair.target.shape())?;
            }
            for s in &pair.reference {
                pair.target.ensure_shape(s.shape())?;
            }
            self.pairs.push(pair);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn shape(&self) -> Option<(usize, usize)> {
        self.pairs.first().map(|p| p.target.shape())
    }

    pub fn targets(&self) -> Vec<Image2D> {
        self.pairs.iter().map(|p| p.target.clone()).collect()
    }
}

/// Piecewise-linear intensity map from bin centers to conditional means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityLut {
    pub centers: Vec<f64>,
    pub values: Vec<f64>,
}

impl IntensityLut {
    fn bin_of(&self, v: f64) -> usize {
        let bins = self.centers.len();
        ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1)
    }

    /// Value of the bin containing `v`, without interpolation.
    pub fn predict_binned(&self, v: f64) -> f64 {
        self.values[self.bin_of(v)]
    }

    /// Linear interpolation between bin centers, flat beyond the outer centers.
    pub fn predict(&self, v: f64) -> f64 {
        let c = &self.centers;
        let last = c.len() - 1;
        if v <= c[0] {
            return self.values[0];
        }
        if v >= c[last] {
            return self.values[last];
        }
        let b = c.partition_point(|&x| x <= v) - 1;
        let t = (v - c[b]) / (c[b + 1] - c[b]);
        self.values[b] * (1.0 - t) + self.values[b + 1] * t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TranslatorKind {
    /// Returns the center reference slice.
    Identity,
    IntensityLut(IntensityLut),
    /// Linear model on `k x k` patches of the three reference slices plus a bias.
    PatchRidge {
        k: usize,
        lambda: f64,
        weights: Vec<f64>,
    },
    /// Pre-synthesized target slices read by index from a raw volume.
    External {
        path: PathBuf,
        dims: [usize; 3],
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub pairs: usize,
    pub samples: usize,
    /// Mean of `(prediction - target)^2 / 2` over the training pixels.
    pub train_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslatorModel {
    #[serde(flatten)]
    pub kind: TranslatorKind,
    pub summary: Option<FitSummary>,
    #[serde(skip)]
    external: Option<Volume>,
}

impl TranslatorModel {
    pub fn identity() -> Self {
        Self {
            kind: TranslatorKind::Identity,
            summary: None,
            external: None,
        }
    }

    /// Translator backed by an external raw volume, loaded eagerly.
    pub fn external(path: impl AsRef<Path>, dims: [usize; 3]) -> Result<Self> {
        let volume = Volume::load(path.as_ref(), dims)?;
        Ok(Self {
            kind: TranslatorKind::External {
                path: path.as_ref().to_path_buf(),
                dims,
            },
            summary: None,
            external: Some(volume),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut model: Self = serde_json::from_str(&text)?;
        if let TranslatorKind::External { path: vol, dims } = &model.kind {
            model.external = Some(Volume::load(vol, *dims)?);
        }
        Ok(model)
    }

    /// Synthesizes the target slice. `index` selects the slice of an external
    /// volume and is ignored by the other kinds.
    pub fn translate(&self, index: usize, reference: &[Image2D; 3]) -> Result<Image2D> {
        let center = &reference[1];
        match &self.kind {
            TranslatorKind::Identity => Ok(center.clone()),
            TranslatorKind::IntensityLut(lut) => Ok(center.map(|&v| lut.predict(v))),
            TranslatorKind::PatchRidge { k, weights, .. } => {
                let (h, w) = center.shape();
                let mut feats = vec![0.0; weights.len()];
                Ok(Grid::from_fn(h, w, |r, c| {
                    patch_features(reference, *k, r, c, &mut feats);
                    feats.iter().zip(weights).map(|(a, b)| a * b).sum()
                }))
            }
            TranslatorKind::External { path, .. } => {
                let volume = self.external.as_ref().ok_or_else(|| {
                    Error::Format(format!("external volume {} not loaded", path.display()))
                })?;
                if index >= volume.slices() {
                    return Err(Error::InvalidParameter(format!(
                        "external volume {} has {} slices, slice {index} requested",
                        path.display(),
                        volume.slices()
                    )));
                }
                let slice = volume.slice(index);
                center.ensure_shape(slice.shape())?;
                Ok(slice)
            }
        }
    }
}

/// Conditional-mean lookup table over `bins` equal-width bins on `[0, 1]`.
///
/// Empty bins copy the nearest populated bin (the lower one on ties).
pub fn fit_intensity_lut(train: &PairedSliceSet, bins: usize) -> Result<TranslatorModel> {
    if train.is_empty() {
        return Err(Error::EmptyInput("training pairs"));
    }
    if bins == 0 {
        return Err(Error::InvalidParameter("LUT needs at least one bin".into()));
    }
    let mut sums = vec![0.0; bins];
    let mut counts = vec![0usize; bins];
    for pair in &train.pairs {
        for (&x, &y) in pair.reference[1].data().iter().zip(pair.target.data()) {
            let b = ((x.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
            sums[b] += y;
            counts[b] += 1;
        }
    }
    let filled: Vec<usize> = (0..bins).filter(|&b| counts[b] > 0).collect();
    let values = (0..bins)
        .map(|b| {
            let src = *filled
                .iter()
                .min_by_key(|&&f| (f.abs_diff(b), f))
                .expect("nonempty training set fills a bin");
            sums[src] / counts[src] as f64
        })
        .collect();
    let centers = (0..bins).map(|b| (b as f64 + 0.5) / bins as f64).collect();
    let lut = IntensityLut { centers, values };

    let mut loss = 0.0;
    let mut samples = 0;
    for pair in &train.pairs {
        for (&x, &y) in pair.reference[1].data().iter().zip(pair.target.data()) {
            loss += 0.5 * (lut.predict(x) - y).powi(2);
            samples += 1;
        }
    }
    Ok(TranslatorModel {
        kind: TranslatorKind::IntensityLut(lut),
        summary: Some(FitSummary {
            pairs: train.len(),
            samples,
            train_loss: loss / samples as f64,
        }),
        external: None,
    })
}

/// Reflect index without repeating the edge: `-1 -> 1`, `n -> n - 2`.
fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m >= n as isize { period - m } else { m }) as usize
}

/// Fills `out` with the flattened patches of the three slices around
/// `(row, col)` followed by a constant 1.
pub(crate) fn patch_features(slices: &[Image2D; 3], k: usize, row: usize, col: usize, out: &mut [f64]) {
    let half = (k / 2) as isize;
    let (h, w) = slices[1].shape();
    let mut j = 0;
    for s in slices {
        for dr in -half..=half {
            let r = reflect_index(row as isize + dr, h);
            for dc in -half..=half {
                out[j] = *s.get(r, reflect_index(col as isize + dc, w));
                j += 1;
            }
        }
    }
    out[j] = 1.0;
}

/// Number of ridge coefficients for patch size `k`.
pub fn patch_dim(k: usize) -> usize {
    3 * k * k + 1
}

/// Normal equations of the patch ridge problem: `(A^T A + lambda J) beta = A^T b`,
/// with `J` the identity on patch coordinates and zero on the bias.
pub fn patch_normal_equations(
    train: &PairedSliceSet,
    k: usize,
    lambda: f64,
    max_samples: usize,
    seed: u64,
) -> Result<(DMatrix<f64>, DVector<f64>, usize)> {
    if train.is_empty() {
        return Err(Error::EmptyInput("training pairs"));
    }
    if k % 2 == 0 {
        return Err(Error::InvalidParameter(format!("patch size must be odd, got {k}")));
    }
    if !(lambda >= 0.0) {
        return Err(Error::InvalidParameter(format!("ridge weight must be nonnegative, got {lambda}")));
    }
    let (h, w) = train.shape().expect("nonempty");
    let per = h * w;
    let total = per * train.len();
    let rows: Vec<usize> = if max_samples > 0 && max_samples < total {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = index::sample(&mut rng, total, max_samples).into_vec();
        picked.sort_unstable();
        picked
    } else {
        (0..total).collect()
    };

    let p = patch_dim(k);
    let mut ata = DMatrix::<f64>::zeros(p, p);
    let mut atb = DVector::<f64>::zeros(p);
    let mut feats = vec![0.0; p];
    for &idx in &rows {
        let pair = &train.pairs[idx / per];
        let (r, c) = ((idx % per) / w, idx % w);
        patch_features(&pair.reference, k, r, c, &mut feats);
        let target = *pair.target.get(r, c);
        for a in 0..p {
            let fa = feats[a];
            atb[a] += fa * target;
            for b in a..p {
                ata[(a, b)] += fa * feats[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            ata[(a, b)] = ata[(b, a)];
        }
        if a + 1 < p {
            ata[(a, a)] += lambda;
        }
    }
    Ok((ata, atb, rows.len()))
}

/// Ridge regression from reference patches to the target center pixel.
pub fn fit_patch_ridge(
    train: &PairedSliceSet,
    k: usize,
    lambda: f64,
    max_samples: usize,
    seed: u64,
) -> Result<TranslatorModel> {
    let (ata, atb, samples) = patch_normal_equations(train, k, lambda, max_samples, seed)?;
    let beta = ata
        .cholesky()
        .ok_or(Error::SingularSystem)?
        .solve(&atb);
    let mut model = TranslatorModel {
        kind: TranslatorKind::PatchRidge {
            k,
            lambda,
            weights: beta.iter().copied().collect(),
        },
        summary: None,
        external: None,
    };
    let mut loss = 0.0;
    let mut pixels = 0;
    for pair in &train.pairs {
        let pred = model.translate(0, &pair.reference)?;
        for (a, b) in pred.data().iter().zip(pair.target.data()) {
            loss += 0.5 * (a - b).powi(2);
            pixels += 1;
        }
    }
    model.summary = Some(FitSummary {
        pairs: train.len(),
        samples,
        train_loss: loss / pixels as f64,
    });
    Ok(model)
}

/// Mean over the set of `|F(translated) - F(target)|`.
pub fn residual_map(model: &TranslatorModel, validation: &PairedSliceSet) -> Result<ResidualMap> {
    let (h, w) = validation.shape().ok_or(Error::EmptyInput("validation pairs"))?;
    let mut acc = Grid::zeros(h, w);
    for (i, pair) in validation.pairs.iter().enumerate() {
        let predicted = model.translate(i, &pair.reference)?;
        let diff = predicted.zip_map(&pair.target, |a, b| a - b)?;
        let k = fft2_real(&diff);
        for (a, z) in acc.data_mut().iter_mut().zip(k.data()) {
            *a += z.norm();
        }
    }
    let n = validation.len() as f64;
    ResidualMap::new(acc.map(|v| v / n))
}

/// Min-max normalization to `[0, 1]`. A constant map yields zeros and
/// `degenerate = true`.
pub fn normalize_residual(r: &ResidualMap) -> (ResidualMap, bool) {
    let (lo, hi) = (r.min(), r.max());
    if hi > lo {
        let span = hi - lo;
        let g = r.map(|v| ((v - lo) / span).clamp(0.0, 1.0));
        (ResidualMap::new(g).expect("values in [0, 1]"), false)
    } else {
        (ResidualMap::uniform(r.height(), r.width(), 0.0), true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(h: usize, w: usize, rng: &mut impl Rng) -> Image2D {
        Grid::from_fn(h, w, |_, _| rng.gen::<f64>())
    }

    fn set_from(pairs: Vec<(Vec<Image2D>, Vec<Image2D>)>) -> PairedSliceSet {
        let mut set = PairedSliceSet::new();
        for (a, b) in pairs {
            set.push_subject(&a, &b).unwrap();
        }
        set
    }

    fn random_subject(
        n: usize,
        h: usize,
        w: usize,
        seed: u64,
        f: impl Fn(f64) -> f64,
    ) -> (Vec<Image2D>, Vec<Image2D>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<Image2D> = (0..n).map(|_| random_image(h, w, &mut rng)).collect();
        let b = a.iter().map(|s| s.map(|&v| f(v))).collect();
        (a, b)
    }

    #[test]
    fn boundary_slices_duplicate_neighbours() {
        let a: Vec<Image2D> = (0..3).map(|i| Image2D::filled(2, 2, i as f64)).collect();
        let set = set_from(vec![(a.clone(), a)]);
        let idx = |p: &PairedSlice| p.reference.iter().map(|s| s.data()[0] as usize).collect::<Vec<_>>();
        assert_eq!(idx(&set.pairs[0]), vec![1, 0, 1]);
        assert_eq!(idx(&set.pairs[1]), vec![0, 1, 2]);
        assert_eq!(idx(&set.pairs[2]), vec![1, 2, 1]);

        let single = set_from(vec![(vec![Image2D::filled(2, 2, 7.0)], vec![Image2D::zeros(2, 2)])]);
        assert!(single.pairs[0].reference.iter().all(|s| s.data()[0] == 7.0));
    }

    #[test]
    fn lut_identity_within_bin_width() {
        let set = set_from(vec![random_subject(4, 16, 16, 1, |v| v)]);
        let model = fit_intensity_lut(&set, 64).unwrap();
        for pair in &set.pairs {
            let out = model.translate(0, &pair.reference).unwrap();
            for (a, b) in out.data().iter().zip(pair.reference[1].data()) {
                assert!((a - b).abs() <= 1.0 / 64.0);
            }
        }
    }

    #[test]
    fn lut_flip_within_bin_width() {
        let set = set_from(vec![random_subject(4, 16, 16, 2, |v| 1.0 - v)]);
        let model = fit_intensity_lut(&set, 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let v: f64 = rng.gen();
            let TranslatorKind::IntensityLut(lut) = &model.kind else { unreachable!() };
            assert!((lut.predict(v) - (1.0 - v)).abs() <= 1.0 / 32.0);
        }
    }

    #[test]
    fn lut_single_bin_fills_everywhere() {
        let set = set_from(vec![(vec![Image2D::filled(4, 4, 0.5)], vec![Image2D::filled(4, 4, 0.3)])]);
        let model = fit_intensity_lut(&set, 256).unwrap();
        let TranslatorKind::IntensityLut(lut) = &model.kind else { unreachable!() };
        assert!(lut.values.iter().all(|&v| (v - 0.3).abs() < 1e-15));
        assert!((lut.predict(0.5) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn lut_is_conditional_mean_optimal() {
        let set = set_from(vec![random_subject(3, 12, 12, 3, |v| (3.0 * v).sin().abs())]);
        let model = fit_intensity_lut(&set, 16).unwrap();
        let TranslatorKind::IntensityLut(lut) = &model.kind else { unreachable!() };
        let loss = |l: &IntensityLut| {
            set.pairs
                .iter()
                .flat_map(|p| p.reference[1].data().iter().zip(p.target.data()))
                .map(|(&x, &y)| (l.predict_binned(x) - y).powi(2))
                .sum::<f64>()
        };
        let base = loss(lut);
        for b in 0..16 {
            for delta in [-0.05, 0.05] {
                let mut other = lut.clone();
                other.values[b] += delta;
                assert!(base <= loss(&other));
            }
        }
    }

    #[test]
    fn lut_requires_data() {
        assert!(matches!(fit_intensity_lut(&PairedSliceSet::new(), 8), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn ridge_recovers_exact_linear_model() {
        let set = set_from(vec![random_subject(4, 12, 12, 4, |v| v)]);
        let mut set = set;
        for p in &mut set.pairs {
            p.target = p.reference[1].map(|v| 0.5 * v);
        }
        let model = fit_patch_ridge(&set, 3, 1e-12, 0, 0).unwrap();
        let TranslatorKind::PatchRidge { weights, .. } = &model.kind else { unreachable!() };
        // center slice, center pixel of the 3x3 patch
        let center = 9 + 4;
        for (j, &b) in weights.iter().enumerate() {
            if j == center {
                assert!((b - 0.5).abs() < 1e-6);
            } else {
                assert!(b.abs() < 1e-6, "coef {j} = {b}");
            }
        }
        for p in &set.pairs {
            let out = model.translate(0, &p.reference).unwrap();
            for (a, b) in out.data().iter().zip(p.target.data()) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn ridge_large_lambda_keeps_only_bias() {
        let set = set_from(vec![random_subject(3, 10, 10, 5, |v| v * v)]);
        let mean_tm = {
            let t = set.targets();
            t.iter().map(|s| s.sum()).sum::<f64>() / (t.len() * 100) as f64
        };
        let model = fit_patch_ridge(&set, 3, 1e9, 0, 0).unwrap();
        let TranslatorKind::PatchRidge { weights, .. } = &model.kind else { unreachable!() };
        let (bias, rest) = weights.split_last().unwrap();
        assert!(rest.iter().all(|b| b.abs() < 1e-6));
        assert!((bias - mean_tm).abs() < 1e-6);
    }

    #[test]
    fn ridge_normal_equation_residual() {
        let set = set_from(vec![random_subject(2, 9, 9, 6, |v| 1.0 - v * v)]);
        let (ata, atb, _) = patch_normal_equations(&set, 5, 1e-3, 100, 1).unwrap();
        let model = fit_patch_ridge(&set, 5, 1e-3, 100, 1).unwrap();
        let TranslatorKind::PatchRidge { weights, .. } = &model.kind else { unreachable!() };
        let beta = DVector::from_column_slice(weights);
        assert!((&ata * &beta - &atb).norm() <= 1e-8 * atb.norm());
    }

    #[test]
    fn ridge_rejects_even_patch() {
        let set = set_from(vec![random_subject(1, 4, 4, 7, |v| v)]);
        assert!(fit_patch_ridge(&set, 4, 1e-3, 0, 0).is_err());
    }

    #[test]
    fn reflect_padding() {
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(-2, 5), 2);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(6, 5), 2);
        assert_eq!(reflect_index(3, 1), 0);
    }

    #[test]
    fn perfect_translator_has_zero_residual() {
        let mut set = set_from(vec![random_subject(3, 8, 8, 8, |v| v)]);
        for p in &mut set.pairs {
            p.target = p.reference[1].clone();
        }
        let r = residual_map(&TranslatorModel::identity(), &set).unwrap();
        assert!(r.data().iter().all(|&v| v < 1e-14));
    }

    #[test]
    fn sinusoid_residual_has_two_spikes() {
        let (h, w) = (16, 16);
        let a = 0.3;
        let (u, v) = (3usize, 5usize);
        let base = Image2D::from_fn(h, w, |r, c| ((r * 7 + c * 3) % 5) as f64 / 5.0);
        let wave = Image2D::from_fn(h, w, |r, c| {
            let phase = 2.0 * std::f64::consts::PI * ((u * r) as f64 / h as f64 + (v * c) as f64 / w as f64);
            a * phase.cos()
        });
        let target = base.zip_map(&wave, |x, y| x + y).unwrap();
        let set = set_from(vec![(vec![base], vec![target])]);
        let r = residual_map(&TranslatorModel::identity(), &set).unwrap();
        let spike = a * ((h * w) as f64).sqrt() / 2.0;
        let (ch, cw) = (h / 2, w / 2);
        for row in 0..h {
            for col in 0..w {
                let val = *r.get(row, col);
                let at_pos = row == ch + u && col == cw + v;
                let at_neg = row == ch - u && col == cw - v;
                if at_pos || at_neg {
                    assert!((val - spike).abs() < 1e-12);
                } else {
                    assert!(val < 1e-12);
                }
            }
        }
    }

    #[test]
    fn residual_is_mean_of_singles_and_order_free() {
        let s1 = random_subject(1, 8, 8, 10, |v| v * 0.5);
        let s2 = random_subject(1, 8, 8, 11, |v| v.sqrt());
        let model = TranslatorModel::identity();
        let r1 = residual_map(&model, &set_from(vec![s1.clone()])).unwrap();
        let r2 = residual_map(&model, &set_from(vec![s2.clone()])).unwrap();
        let both = residual_map(&model, &set_from(vec![s1.clone(), s2.clone()])).unwrap();
        let swapped = residual_map(&model, &set_from(vec![s2, s1])).unwrap();
        for i in 0..64 {
            let mean = 0.5 * (r1.data()[i] + r2.data()[i]);
            assert!((both.data()[i] - mean).abs() < 1e-14);
            assert!((both.data()[i] - swapped.data()[i]).abs() < 1e-14);
        }
        assert!(residual_map(&model, &PairedSliceSet::new()).is_err());
    }

    #[test]
    fn normalize_affine_and_degenerate() {
        let r = ResidualMap::new(Grid::from_vec(1, 3, vec![2.0, 6.0, 10.0]).unwrap()).unwrap();
        let (n, degenerate) = normalize_residual(&r);
        assert!(!degenerate);
        assert_eq!(n.data(), &[0.0, 0.5, 1.0]);
        let (z, degenerate) = normalize_residual(&ResidualMap::uniform(3, 3, 4.0));
        assert!(degenerate);
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_is_idempotent_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let r = ResidualMap::new(Grid::from_fn(6, 7, |_, _| rng.gen_range(0.0..50.0))).unwrap();
            let (n1, _) = normalize_residual(&r);
            assert!(n1.data().iter().all(|v| (0.0..=1.0).contains(v)));
            let (n2, _) = normalize_residual(&n1);
            for (a, b) in n1.data().iter().zip(n2.data()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn model_save_load_round_trip() {
        let set = set_from(vec![random_subject(2, 8, 8, 13, |v| v * v)]);
        let model = fit_intensity_lut(&set, 16).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lut.json");
        model.save(&path).unwrap();
        assert_eq!(TranslatorModel::load(&path).unwrap(), model);
    }

    #[test]
    fn external_translator_reads_by_index() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("synth.raw");
        let data: Vec<f32> = (0..2 * 4 * 4).map(|i| i as f32 / 32.0).collect();
        let vol = Volume::new([2, 4, 4], data).unwrap();
        vol.save(&path).unwrap();
        let model = TranslatorModel::external(&path, [2, 4, 4]).unwrap();
        let trip = [Image2D::zeros(4, 4), Image2D::zeros(4, 4), Image2D::zeros(4, 4)];
        assert_eq!(model.translate(1, &trip).unwrap(), vol.slice(1));
        assert!(model.translate(2, &trip).is_err());
        assert!(TranslatorModel::external(dir.path().join("missing.raw"), [2, 4, 4]).is_err());
    }
}
