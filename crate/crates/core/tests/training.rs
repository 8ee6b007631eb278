use mmpattern::dataio::gen_phantom_pairs;
use mmpattern::optimizer::{train, TrainConfig};
use mmpattern::patterns::gen_poisson_variable_density;
use mmpattern::pipeline::{fold_split, residual_prior, subject_pairs, Dataset, ExperimentConfig};
use mmpattern::{derive_seed, Image2D, ResidualMap};

struct Setup {
    train: Vec<Image2D>,
    val: Vec<Image2D>,
    prior: ResidualMap,
    cfg: ExperimentConfig,
}

fn setup() -> Setup {
    let (_, pairs) = gen_phantom_pairs(20, 6, 64, 0).unwrap();
    let dataset = Dataset::from_phantoms(&pairs, None).unwrap();
    let cfg = ExperimentConfig::default();
    let split = fold_split(&dataset, &cfg, 0).unwrap();
    let (train_pairs, _) = subject_pairs(&dataset, &split.train, &cfg).unwrap();
    let (val_pairs, _) = subject_pairs(&dataset, &split.validation, &cfg).unwrap();
    let model = cfg.translator.fit(&train_pairs, 0).unwrap();
    let (_, prior, _) = residual_prior(&model, &val_pairs).unwrap();
    Setup {
        train: train_pairs.targets(),
        val: val_pairs.targets(),
        prior,
        cfg,
    }
}

fn short(cfg: &ExperimentConfig, seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        min_epochs: epochs,
        max_epochs: epochs,
        ..cfg.train_config(seed)
    }
}

#[test]
fn early_training_loss_decreases() {
    let s = setup();
    let seeds = 5;
    let mut mean = vec![0.0; 6];
    for seed in 0..seeds {
        let tc = short(&s.cfg, derive_seed(seed, 11), 6);
        let (state, _) = train(&s.train, &s.val, &s.prior, &tc).unwrap();
        for (acc, rec) in mean.iter_mut().zip(&state.history) {
            *acc += rec.train_loss / seeds as f64;
        }
    }
    let down = mean.windows(2).filter(|w| w[1] <= w[0]).count();
    assert!(down >= 4, "only {down} of 5 transitions non-increasing: {mean:?}");
}

#[test]
fn best_snapshot_and_bitwise_replay() {
    let s = setup();
    let tc = short(&s.cfg, 3, 8);
    let (a, pa) = train(&s.train, &s.val, &s.prior, &tc).unwrap();
    let (b, pb) = train(&s.train, &s.val, &s.prior, &tc).unwrap();
    assert_eq!(a.w.0.data(), b.w.0.data());
    assert_eq!(pa.grid().data(), pb.grid().data());
    let best = a.best.as_ref().unwrap();
    let last = a.history.last().unwrap();
    assert!(best.val_loss <= last.val_loss);
    assert!(a.history.iter().all(|h| best.val_loss <= h.val_loss));
}

#[test]
fn poisson_density_falls_off_from_center() {
    let (size, rings, seeds) = (64usize, 8usize, 50u64);
    let c = (size / 2) as f64;
    // rings tile the inscribed disc; corner pixels fall outside every ring
    let ring_of = |r: usize, col: usize| {
        let d = ((r as f64 - c).powi(2) + (col as f64 - c).powi(2)).sqrt();
        Some((d / c * rings as f64) as usize).filter(|&k| k < rings)
    };
    let mut hits = vec![0.0; rings];
    let mut area = vec![0.0; rings];
    for r in 0..size {
        for col in 0..size {
            if let Some(k) = ring_of(r, col) {
                area[k] += 1.0;
            }
        }
    }
    for seed in 0..seeds {
        let m = gen_poisson_variable_density(size, size, 0.25, 1.0, seed).unwrap();
        for r in 0..size {
            for col in 0..size {
                if let (true, Some(k)) = (m.get(r, col), ring_of(r, col)) {
                    hits[k] += 1.0;
                }
            }
        }
    }
    let density: Vec<f64> = hits.iter().zip(&area).map(|(h, a)| h / (a * seeds as f64)).collect();
    for w in density.windows(2) {
        assert!(w[1] <= w[0] + 1e-12, "ring density rises outward: {density:?}");
    }
}
