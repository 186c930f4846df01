//! Denoising-objective training: uniform `t ∈ [1, T]`, fresh Gaussian `ε`,
//! loss `mean (ε − ε_θ(√ᾱ_t z0 + √(1−ᾱ_t) ε, t, p))²`, Adam updates.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::{Architecture, DenoiserParams, NoiseLevel, Vocab};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::scheduler::{noise_to_level, Latent, NoiseSchedule};

type Gradients = BTreeMap<String, Array2<f64>>;

/// One clean latent with its caption tokens.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub z0: Latent,
    pub tokens: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Cosine decay of the learning rate down to this fraction.
    pub final_lr_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 2000, batch_size: 8, adam: AdamConfig::default(), seed: 0, final_lr_fraction: 0.1 }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: DenoiserParams,
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
}

/// One draw of the training distribution.
#[derive(Debug, Clone)]
pub struct NoiseDraw {
    pub example: usize,
    pub t: usize,
    pub eps: Array3<f64>,
}

pub fn gaussian(rng: &mut ChaCha8Rng, shape: [usize; 3]) -> Array3<f64> {
    Array3::from_shape_fn(shape, |_| StandardNormal.sample(rng))
}

pub fn draw(rng: &mut ChaCha8Rng, data: &[TrainExample], schedule: &NoiseSchedule) -> NoiseDraw {
    let example = rng.gen_range(0..data.len());
    let t = rng.gen_range(1..=schedule.steps());
    let eps = gaussian(rng, data[example].z0.shape());
    NoiseDraw { example, t, eps }
}

fn check_data(data: &[TrainExample]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    if data.iter().any(|e| e.tokens.is_empty()) {
        return Err(Error::Empty("caption".into()));
    }
    Ok(())
}

/// Trains freshly initialized parameters.
pub fn train_denoiser(
    arch: Architecture,
    vocab: Vocab,
    data: &[TrainExample],
    schedule: &NoiseSchedule,
    config: &TrainConfig,
    progress: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    let init = DenoiserParams::init(arch, vocab, config.seed ^ 0x5eed)?;
    train_from(init, data, schedule, config, progress)
}

/// Continues training from `init`. Batch gradients are computed in parallel
/// and reduced in a fixed order, so results do not depend on thread count.
pub fn train_from(
    init: DenoiserParams,
    data: &[TrainExample],
    schedule: &NoiseSchedule,
    config: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    check_data(data)?;
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut params = init;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Adam::new(config.adam);
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let draws: Vec<NoiseDraw> = (0..config.batch_size).map(|_| draw(&mut rng, data, schedule)).collect();
        let results: Vec<Result<(f64, Gradients)>> = draws
            .par_iter()
            .map(|d| {
                let ex = &data[d.example];
                let z_t = noise_to_level(&ex.z0, d.t, &d.eps, schedule)?;
                params.loss_and_gradients(&z_t, NoiseLevel::of(schedule, d.t), &ex.tokens, &d.eps)
            })
            .collect();
        let mut total = 0.0;
        let mut sum: Option<Gradients> = None;
        for r in results {
            let (loss, grads) = r?;
            total += loss;
            match sum.as_mut() {
                None => sum = Some(grads),
                Some(acc) => {
                    for (k, g) in grads {
                        *acc.get_mut(&k).expect("same parameter set") += &g;
                    }
                }
            }
        }
        let n = config.batch_size as f64;
        let loss = total / n;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        let mut grads = sum.expect("nonempty batch");
        grads.values_mut().for_each(|g| *g /= n);
        let progress_frac = step as f64 / config.steps.max(1) as f64;
        let decay =
            config.final_lr_fraction + (1.0 - config.final_lr_fraction) * 0.5 * (1.0 + (std::f64::consts::PI * progress_frac).cos());
        opt.config.lr = config.adam.lr * decay;
        opt.update(params.tensors_mut(), &grads);
        losses.push(loss);
        progress(step, loss);
    }
    Ok(TrainOutcome { params, losses })
}

/// Mean loss over `samples` seeded draws. `captions` overrides each
/// example's tokens when given (same draws either way).
pub fn evaluate_loss(
    params: &DenoiserParams,
    data: &[TrainExample],
    schedule: &NoiseSchedule,
    samples: usize,
    seed: u64,
    captions: Option<&[Vec<usize>]>,
) -> Result<f64> {
    check_data(data)?;
    if let Some(c) = captions {
        if c.len() != data.len() {
            return Err(Error::InvalidArgument("caption override must match the dataset length".into()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<NoiseDraw> = (0..samples).map(|_| draw(&mut rng, data, schedule)).collect();
    let losses: Vec<Result<f64>> = draws
        .par_iter()
        .map(|d| {
            let ex = &data[d.example];
            let tokens = captions.map_or(&ex.tokens, |c| &c[d.example]);
            let z_t = noise_to_level(&ex.z0, d.t, &d.eps, schedule)?;
            params.loss(&z_t, NoiseLevel::of(schedule, d.t), tokens, &d.eps)
        })
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / samples.max(1) as f64)
}

/// Trailing moving average.
pub fn smoothed(losses: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..losses.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            losses[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::tests::small_arch;

    fn tiny_data(n: usize) -> Vec<TrainExample> {
        let arch = small_arch();
        let vocab = Vocab::default();
        let captions = ["a red square on gray floor", "a blue circle on brown floor"];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        (0..n)
            .map(|i| TrainExample {
                z0: Latent { data: gaussian(&mut rng, [arch.latent_channels, 2, 2]), timestep: 0 },
                tokens: super::super::tokenize(captions[i % 2], &vocab).unwrap().tokens,
            })
            .collect()
    }

    fn quick_config(steps: usize) -> TrainConfig {
        TrainConfig { steps, batch_size: 4, adam: AdamConfig { lr: 3e-3, ..Default::default() }, seed: 1, final_lr_fraction: 1.0 }
    }

    #[test]
    fn training_reduces_loss() {
        let data = tiny_data(2);
        let schedule = NoiseSchedule::default_ladder();
        let out = train_denoiser(small_arch(), Vocab::default(), &data, &schedule, &quick_config(60), |_, _| {}).unwrap();
        let s = smoothed(&out.losses, 10);
        assert_eq!(out.losses.len(), 60);
        assert!(s[59] < s[9], "{} !< {}", s[59], s[9]);
    }

    #[test]
    fn training_is_deterministic() {
        let data = tiny_data(2);
        let schedule = NoiseSchedule::default_ladder();
        let a = train_denoiser(small_arch(), Vocab::default(), &data, &schedule, &quick_config(5), |_, _| {}).unwrap();
        let b = train_denoiser(small_arch(), Vocab::default(), &data, &schedule, &quick_config(5), |_, _| {}).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn divergence_is_reported() {
        let data = tiny_data(1);
        let schedule = NoiseSchedule::default_ladder();
        let mut init = DenoiserParams::init(small_arch(), Vocab::default(), 0).unwrap();
        init.tensors_mut().get_mut("out.b").unwrap()[[0, 0]] = f64::NAN;
        let err = train_from(init, &data, &schedule, &quick_config(3), |_, _| {}).unwrap_err();
        assert!(matches!(err, Error::Divergence { step: 0, .. }));
    }

    #[test]
    fn rejects_empty_dataset() {
        let schedule = NoiseSchedule::default_ladder();
        assert!(train_denoiser(small_arch(), Vocab::default(), &[], &schedule, &quick_config(1), |_, _| {}).is_err());
    }

    #[test]
    fn smoothing_window() {
        assert_eq!(smoothed(&[1.0, 3.0, 5.0], 2), vec![1.0, 2.0, 4.0]);
    }
}
