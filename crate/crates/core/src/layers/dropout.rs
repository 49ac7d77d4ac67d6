use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::tensor::{Element, Tensor};

/// Standalone inverted dropout. Only [`Mode::Train`] drops elements.
pub fn dropout<T: Element>(x: &Tensor<T>, rate: f64, mode: Mode, seed: u64) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "dropout rate {rate} outside [0, 1)"
        )));
    }
    if !mode.dropout_active() || rate == 0.0 {
        return Ok(x.clone());
    }
    let mut tape = Tape::new();
    let v = tape.input(x.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = tape.dropout(v, rate, &mut rng)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inference_and_zero_rate_are_identity() {
        let x = Tensor::<f32>::from_fn((2, 3, 4, 4), |i| i as f32 * 0.1);
        assert_eq!(dropout(&x, 0.5, Mode::Infer, 1).unwrap(), x);
        assert_eq!(dropout(&x, 0.0, Mode::Train, 1).unwrap(), x);
        assert_eq!(dropout(&x, 0.0, Mode::Infer, 1).unwrap(), x);
    }

    #[test]
    fn rate_one_is_rejected() {
        assert!(dropout(&Tensor::<f32>::ones((1, 1, 1, 1)), 1.0, Mode::Train, 0).is_err());
    }

    #[test]
    fn inverted_scaling_keeps_expectation() {
        let x = Tensor::<f64>::ones((1, 1, 1, 1));
        let total: f64 = (0..10_000)
            .map(|seed| dropout(&x, 0.5, Mode::Train, seed).unwrap().data()[0])
            .sum();
        let mean = total / 10_000.0;
        assert!((mean - 1.0).abs() <= 0.05, "mean {mean}");
    }

    #[test]
    fn survivors_are_scaled() {
        let x = Tensor::<f64>::ones((1, 1, 8, 8));
        let y = dropout(&x, 0.25, Mode::Train, 3).unwrap();
        assert!(y
            .data()
            .iter()
            .all(|&v| v == 0.0 || (v - 4.0 / 3.0).abs() < 1e-12));
    }
}
