use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::tensor::{check_same_shape, Element, Shape, Tensor};

/// Default ELU slope for negative inputs.
pub const ELU_ALPHA: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Elu,
}

impl Activation {
    pub fn apply<T: Element>(self, x: &Tensor<T>) -> Tensor<T> {
        match self {
            Activation::Relu => relu(x),
            Activation::Elu => elu(x, T::from_f64(ELU_ALPHA)),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "elu" => Ok(Activation::Elu),
            other => Err(format!("unknown activation `{other}`")),
        }
    }
}

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_same_shape("add", a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x + y)
        .collect();
    Tensor::from_vec(a.shape(), data)
}

pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn elu<T: Element>(x: &Tensor<T>, alpha: T) -> Tensor<T> {
    x.map(|v| {
        if v >= T::zero() {
            v
        } else {
            alpha * (v.exp() - T::one())
        }
    })
}

/// Shift-invariant softmax of one logit vector.
pub fn softmax<T: Element>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(logits[0], T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Row-wise softmax of `(n, K, 1, 1)` logits.
pub fn softmax_rows<T: Element>(logits: &Tensor<T>) -> Tensor<T> {
    let s = logits.shape();
    let k = s.c * s.plane();
    let data = logits.data().chunks_exact(k).flat_map(softmax).collect();
    Tensor::from_vec(s, data).expect("softmax keeps shape")
}

/// Concatenates along the channel axis in list order.
pub fn concat_channels<T: Element>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| shape_err("concat_channels", "no parts"))?
        .shape();
    for p in parts {
        let s = p.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(shape_err(
                "concat_channels",
                format!("part {s} does not match {first} in batch/spatial extent"),
            ));
        }
    }
    let c: usize = parts.iter().map(|p| p.shape().c).sum();
    let plane = first.plane();
    let out_shape = Shape::new(first.n, c, first.h, first.w);
    let mut data = Vec::with_capacity(out_shape.len());
    for n in 0..first.n {
        for p in parts {
            let pc = p.shape().c;
            data.extend_from_slice(&p.data()[n * pc * plane..(n + 1) * pc * plane]);
        }
    }
    Tensor::from_vec(out_shape, data)
}
