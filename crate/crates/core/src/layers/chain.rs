use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::{Activation, Padding};
use crate::tensor::Element;

/// How the convolutions of an untied chain are connected.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChainWiring {
    /// `y(0) = act(conv_0(x))`, `y(t) = act(conv_t(y(t−1)))`.
    Sequential,
    /// Mirrors the RCL recurrence with untied recurrent kernels:
    /// `y(t) = act(conv_0(x) + conv_t(y(t−1)))`.
    Unrolled,
}

/// Records `k + 1` same-padded convolutions with separate weights and
/// biases, given as `(weight, bias)` pairs. The first maps the input width
/// to the chain width; the rest keep the chain width.
pub fn untied_chain_on_tape<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    convs: &[(Var, Var)],
    act: Activation,
    wiring: ChainWiring,
) -> Result<Var> {
    let ((w0, b0), rest) = convs.split_first().ok_or_else(|| {
        Error::InvalidArgument("untied chain needs at least one convolution".into())
    })?;
    let first = tape.conv2d(x, *w0, Some(*b0), (1, 1), Padding::Same)?;
    let mut y = tape.activation(first, act);
    for &(w, b) in rest {
        let z = tape.conv2d(y, w, Some(b), (1, 1), Padding::Same)?;
        let pre = match wiring {
            ChainWiring::Sequential => z,
            ChainWiring::Unrolled => tape.add(first, z)?,
        };
        y = tape.activation(pre, act);
    }
    Ok(y)
}
