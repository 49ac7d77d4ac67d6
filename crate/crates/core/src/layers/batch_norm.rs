use crate::autograd::{NormStats, Tape};
use crate::error::{shape_err, Result};
use crate::layers::Mode;
use crate::tensor::{Element, Tensor};

/// Running-average factor: `running ← momentum · running + (1 − momentum) · batch`.
pub const BN_MOMENTUM: f64 = 0.99;
pub const BN_EPSILON: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl<T: Element> BatchNormParams<T> {
    /// Unit scale, zero shift, zero mean and unit variance.
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: Tensor::ones((1, channels, 1, 1)),
            beta: Tensor::zeros((1, channels, 1, 1)),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Blends batch statistics into running statistics. The stored variance is
/// the unbiased estimate `var · m / (m − 1)` for `m` samples per channel.
pub fn update_running_stats<T: Element>(
    running_mean: &mut [T],
    running_var: &mut [T],
    batch_mean: &[T],
    batch_var: &[T],
    samples: usize,
    momentum: f64,
) {
    let keep = T::from_f64(momentum);
    let blend = T::from_f64(1.0 - momentum);
    let correction = if samples > 1 {
        T::from_f64(samples as f64 / (samples - 1) as f64)
    } else {
        T::one()
    };
    for c in 0..running_mean.len() {
        running_mean[c] = keep * running_mean[c] + blend * batch_mean[c];
        running_var[c] = keep * running_var[c] + blend * batch_var[c] * correction;
    }
}

/// Standalone batch normalization. Training mode normalizes with batch
/// statistics and updates `p`'s running statistics in place.
pub fn batch_norm<T: Element>(
    x: &Tensor<T>,
    p: &mut BatchNormParams<T>,
    mode: Mode,
) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.c != p.channels() {
        return Err(shape_err(
            "batch_norm",
            format!(
                "input has {} channels, parameters cover {}",
                s.c,
                p.channels()
            ),
        ));
    }
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let g = tape.input(p.gamma.clone());
    let b = tape.input(p.beta.clone());
    let stats = if mode.uses_batch_stats() {
        NormStats::Batch
    } else {
        NormStats::Fixed {
            mean: p.running_mean.clone(),
            var: p.running_var.clone(),
        }
    };
    let (y, batch) = tape.batch_norm(xv, g, b, stats, T::from_f64(p.epsilon))?;
    if let (Mode::Train, Some((mean, var))) = (mode, batch) {
        update_running_stats(
            &mut p.running_mean,
            &mut p.running_var,
            &mean,
            &var,
            s.n * s.plane(),
            p.momentum,
        );
    }
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn train_mode_normalizes_each_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::from_fn((4, 3, 4, 4), |_| rng.gen_range(-3.0..5.0));
        let mut p = BatchNormParams::identity(3);
        let y = batch_norm(&x, &mut p, Mode::Train).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|n| (0..16).map(move |i| (n, i)))
                .map(|(n, i)| y.at(n, c, i / 4, i % 4))
                .collect();
            let mean = vals.iter().sum::<f64>() / 64.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
            assert!(mean.abs() < 1e-5, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "var {var}");
        }
        assert!(p.running_var.iter().all(|&v| v >= 0.0));
        assert!(p.running_mean.iter().any(|&m| m != 0.0));
    }

    #[test]
    fn constant_input_maps_to_beta() {
        let x = Tensor::<f64>::full((2, 2, 3, 3), 7.0);
        let mut p = BatchNormParams::identity(2);
        p.beta = Tensor::vector(vec![0.5, -0.25])
            .reshape((1, 2, 1, 1))
            .unwrap();
        let y = batch_norm(&x, &mut p, Mode::Train).unwrap();
        for n in 0..2 {
            assert!((y.at(n, 0, 1, 1) - 0.5).abs() < 1e-12);
            assert!((y.at(n, 1, 2, 0) + 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn infer_mode_with_default_stats_is_near_identity() {
        let x = Tensor::<f64>::from_fn((1, 2, 3, 3), |i| i as f64 - 9.0);
        let mut p = BatchNormParams::identity(2);
        let before = p.clone();
        let y = batch_norm(&x, &mut p, Mode::Infer).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() < 9.0 * 1e-5);
        assert_eq!(p, before);
    }

    #[test]
    fn channel_mismatch() {
        let mut p = BatchNormParams::<f64>::identity(3);
        assert!(batch_norm(&Tensor::zeros((1, 2, 2, 2)), &mut p, Mode::Train).is_err());
    }
}
