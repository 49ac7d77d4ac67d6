use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::ops::{Activation, Padding};
use crate::tensor::{Element, Tensor};

/// Weights of one recurrent convolutional layer.
///
/// The feed-forward kernel maps the layer input to `f` channels; the
/// recurrent kernel maps the layer's own `f`-channel state back onto itself.
/// Both are shared across every time step, and a single bias feeds both terms.
#[derive(Clone, Debug, PartialEq)]
pub struct RclParams<T> {
    /// `(f, c_in, kh, kw)`
    pub feed_forward: Tensor<T>,
    /// `(f, f, kh, kw)`
    pub recurrent: Tensor<T>,
    /// `(1, f, 1, 1)`
    pub bias: Tensor<T>,
    /// Recurrent refinements after the feed-forward pass.
    pub steps: usize,
}

impl<T: Element> RclParams<T> {
    pub fn zeros(c_in: usize, f: usize, kernel: usize, steps: usize) -> Self {
        Self {
            feed_forward: Tensor::zeros((f, c_in, kernel, kernel)),
            recurrent: Tensor::zeros((f, f, kernel, kernel)),
            bias: Tensor::zeros((1, f, 1, 1)),
            steps,
        }
    }

    /// Trainable scalars; independent of `steps`.
    pub fn param_count(&self) -> usize {
        self.feed_forward.len() + self.recurrent.len() + self.bias.len()
    }
}

/// Tape handles of an RCL's parameters.
#[derive(Clone, Copy, Debug)]
pub struct RclVars {
    pub feed_forward: Var,
    pub recurrent: Var,
    pub bias: Var,
}

fn check_rcl<T: Element>(tape: &Tape<T>, vars: &RclVars) -> Result<()> {
    let ff = tape.shape(vars.feed_forward);
    let rec = tape.shape(vars.recurrent);
    if rec.n != ff.n || rec.c != ff.n || (rec.h, rec.w) != (ff.h, ff.w) {
        return Err(shape_err(
            "rcl",
            format!("recurrent kernel {rec} does not consume feed-forward output {ff}"),
        ));
    }
    if tape.value(vars.bias).len() != ff.n {
        return Err(shape_err("rcl", "bias length differs from output channels"));
    }
    Ok(())
}

/// Records an unrolled RCL:
/// `y(0) = act(conv(x, w_f) + b)`, `y(t) = act(conv(x, w_f) + b + conv(y(t−1), w_r))`.
///
/// The feed-forward term is evaluated once and reused at every step.
pub fn rcl_on_tape<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    vars: &RclVars,
    steps: usize,
    act: Activation,
) -> Result<Var> {
    check_rcl(tape, vars)?;
    let ff = tape.conv2d(x, vars.feed_forward, Some(vars.bias), (1, 1), Padding::Same)?;
    let mut y = tape.activation(ff, act);
    for _ in 0..steps {
        let rec = tape.conv2d(y, vars.recurrent, None, (1, 1), Padding::Same)?;
        let pre = tape.add(ff, rec)?;
        y = tape.activation(pre, act);
    }
    Ok(y)
}

/// Evaluates an RCL on a tensor; returns the state after the last step.
pub fn rcl_forward<T: Element>(
    x: &Tensor<T>,
    p: &RclParams<T>,
    act: Activation,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let vars = RclVars {
        feed_forward: tape.input(p.feed_forward.clone()),
        recurrent: tape.input(p.recurrent.clone()),
        bias: tape.input(p.bias.clone()),
    };
    let y = rcl_on_tape(&mut tape, xv, &vars, p.steps, act)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autograd::{finite_diff, relative_error};
    use crate::ops;

    fn random_params(
        c_in: usize,
        f: usize,
        kernel: usize,
        steps: usize,
        seed: u64,
    ) -> RclParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = RclParams::zeros(c_in, f, kernel, steps);
        for t in [&mut p.feed_forward, &mut p.recurrent, &mut p.bias] {
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.gen_range(-0.5..0.5));
        }
        p
    }

    #[test]
    fn zero_steps_is_a_plain_conv() {
        let p = random_params(3, 4, 3, 0, 1);
        let x = Tensor::<f64>::from_fn((2, 3, 5, 5), |i| (i as f64 * 0.37).sin());
        let y = rcl_forward(&x, &p, Activation::Relu).unwrap();
        let plain =
            ops::conv2d_with(&x, &p.feed_forward, Some(&p.bias), (1, 1), Padding::Same).unwrap();
        assert_eq!(y, ops::relu(&plain));
    }

    #[test]
    fn zero_recurrent_kernel_makes_output_independent_of_steps() {
        let mut p = random_params(2, 3, 3, 0, 2);
        p.recurrent = Tensor::zeros(p.recurrent.shape());
        let x = Tensor::<f64>::from_fn((1, 2, 4, 4), |i| (i as f64).cos());
        let base = rcl_forward(&x, &p, Activation::Elu).unwrap();
        for steps in 1..4 {
            p.steps = steps;
            assert_eq!(rcl_forward(&x, &p, Activation::Elu).unwrap(), base);
        }
    }

    #[test]
    fn scalar_hand_unroll() {
        let p = RclParams {
            feed_forward: Tensor::<f64>::ones((1, 1, 1, 1)),
            recurrent: Tensor::ones((1, 1, 1, 1)),
            bias: Tensor::zeros((1, 1, 1, 1)),
            steps: 2,
        };
        let y = rcl_forward(&Tensor::ones((1, 1, 1, 1)), &p, Activation::Relu).unwrap();
        assert_eq!(y.data(), &[3.0]);
    }

    #[test]
    fn preserves_spatial_extent() {
        for kernel in [1, 3] {
            let p = random_params(3, 5, kernel, 2, 3);
            let y = rcl_forward(&Tensor::<f64>::ones((2, 3, 7, 6)), &p, Activation::Relu).unwrap();
            assert_eq!((y.shape().c, y.shape().h, y.shape().w), (5, 7, 6));
        }
    }

    #[test]
    fn mismatched_recurrent_kernel_is_rejected() {
        let mut p = random_params(3, 4, 3, 1, 4);
        p.recurrent = Tensor::zeros((4, 3, 3, 3));
        assert!(rcl_forward(&Tensor::<f64>::ones((1, 3, 4, 4)), &p, Activation::Relu).is_err());
    }

    #[test]
    fn param_count_ignores_steps() {
        for steps in 0..4 {
            assert_eq!(
                RclParams::<f32>::zeros(8, 8, 3, steps).param_count(),
                576 + 576 + 8
            );
        }
    }

    #[test]
    fn tied_gradients_match_finite_differences() {
        let p = random_params(2, 3, 3, 2, 5);
        let x = Tensor::<f64>::from_fn((2, 2, 5, 5), |i| ((i * 7 % 11) as f64 - 5.0) / 5.0);
        let loss = |rec: &Tensor<f64>| {
            let mut q = p.clone();
            q.recurrent = rec.clone();
            rcl_forward(&x, &q, Activation::Elu)
                .unwrap()
                .data()
                .iter()
                .map(|v| v * v)
                .sum()
        };
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let vars = RclVars {
            feed_forward: tape.input(p.feed_forward.clone()),
            recurrent: tape.param("w_r", p.recurrent.clone()).unwrap(),
            bias: tape.input(p.bias.clone()),
        };
        let y = rcl_on_tape(&mut tape, xv, &vars, 2, Activation::Elu).unwrap();
        let l = tape.sum_squares(y);
        let g = tape.backward(l).unwrap();
        let numeric = finite_diff(loss, &p.recurrent, 1e-5);
        assert!(relative_error(&g["w_r"], &numeric) < 1e-4);
    }
}
