use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Element, Tensor};

/// Dense softmax head: `features (n, F) · weight (F × K) + bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams<T> {
    /// `(1, 1, F, K)`
    pub weight: Tensor<T>,
    /// `(1, K, 1, 1)`
    pub bias: Option<Tensor<T>>,
}

impl<T: Element> ClassifierParams<T> {
    pub fn new(weight: Tensor<T>, bias: Option<Tensor<T>>) -> Result<Self> {
        let s = weight.shape();
        if s.n != 1 || s.c != 1 {
            return Err(shape_err(
                "classifier",
                format!("weight must be (1, 1, F, K), got {s}"),
            ));
        }
        if s.w < 2 {
            return Err(Error::InvalidArgument(format!(
                "classifier needs at least 2 classes, got {}",
                s.w
            )));
        }
        if let Some(b) = &bias {
            if b.len() != s.w {
                return Err(shape_err(
                    "classifier",
                    "bias length differs from class count",
                ));
            }
        }
        Ok(Self { weight, bias })
    }

    pub fn classes(&self) -> usize {
        self.weight.shape().w
    }

    pub fn features(&self) -> usize {
        self.weight.shape().h
    }
}

/// Records the logits of the head; the caller applies softmax.
pub fn classifier_on_tape<T: Element>(
    tape: &mut Tape<T>,
    features: Var,
    weight: Var,
    bias: Option<Var>,
) -> Result<Var> {
    tape.linear(features, weight, bias)
}

/// Per-row class probabilities `softmax(xᵀW + b)` for `(n, c, 1, 1)` features.
pub fn classifier_forward<T: Element>(
    features: &Tensor<T>,
    p: &ClassifierParams<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let x = tape.input(features.clone());
    let w = tape.input(p.weight.clone());
    let b = p.bias.as_ref().map(|b| tape.input(b.clone()));
    let z = classifier_on_tape(&mut tape, x, w, b)?;
    let probs = tape.softmax(z);
    Ok(tape.value(probs).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_give_uniform_rows() {
        let p = ClassifierParams::new(Tensor::<f64>::zeros((1, 1, 6, 10)), None).unwrap();
        let x = Tensor::from_fn((3, 6, 1, 1), |i| i as f64);
        let probs = classifier_forward(&x, &p).unwrap();
        assert!(probs.data().iter().all(|&v| (v - 0.1).abs() < 1e-15));
    }

    #[test]
    fn two_class_closed_form() {
        let w = Tensor::from_vec((1, 1, 1, 2), vec![2f64.ln(), 0.0]).unwrap();
        let p = ClassifierParams::new(w, None).unwrap();
        let probs = classifier_forward(&Tensor::ones((1, 1, 1, 1)), &p).unwrap();
        assert!((probs.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((probs.data()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn argmax_invariant_to_shift() {
        let w = Tensor::from_fn((1, 1, 3, 4), |i| ((i * 5) % 7) as f64 - 3.0);
        let p = ClassifierParams::new(w.clone(), None).unwrap();
        let shifted = ClassifierParams::new(w, Some(Tensor::full((1, 4, 1, 1), 12.5))).unwrap();
        let x = Tensor::from_fn((2, 3, 1, 1), |i| i as f64 * 0.5 - 1.0);
        let argmax = |t: &Tensor<f64>| -> Vec<usize> {
            t.data()
                .chunks(4)
                .map(|r| (0..4).max_by(|&a, &b| r[a].total_cmp(&r[b])).unwrap())
                .collect()
        };
        let a = classifier_forward(&x, &p).unwrap();
        let b = classifier_forward(&x, &shifted).unwrap();
        assert_eq!(argmax(&a), argmax(&b));
        for row in b.data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_checks() {
        assert!(ClassifierParams::new(Tensor::<f64>::zeros((1, 1, 4, 1)), None).is_err());
        let p = ClassifierParams::new(Tensor::<f64>::zeros((1, 1, 4, 3)), None).unwrap();
        assert!(classifier_forward(&Tensor::zeros((1, 5, 1, 1)), &p).is_err());
    }
}
