use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::{build_model, ArchSpec, ForwardCtx, Model, ParamRole, Variant};
use crate::autograd::{finite_diff, relative_error_floored, Fault, Tape};
use crate::error::Result;
use crate::init::scaled_uniform_model;
use crate::layers::Mode;
use crate::ops::Activation;
use crate::tensor::Tensor;

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_STEP: f64 = 1e-5;
/// Gradient norms below this count as zero when forming relative errors.
pub const GRADCHECK_FLOOR: f64 = 1e-5;
const BATCH: usize = 4;
const CLASSES: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub elements: usize,
    pub relative_error: f64,
}

impl TensorCheck {
    /// Parameter name without its final component.
    pub fn layer(&self) -> &str {
        self.name.rsplit_once('.').map_or(&self.name, |(l, _)| l)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub variant: Variant,
    pub tensors: Vec<TensorCheck>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn worst(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.relative_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.relative_error <= self.tolerance)
    }

    /// Worst error per layer in topological order.
    pub fn per_layer(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for t in &self.tensors {
            match out.iter_mut().find(|(l, _)| l == t.layer()) {
                Some((_, e)) => *e = e.max(t.relative_error),
                None => out.push((t.layer().to_string(), t.relative_error)),
            }
        }
        out
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "gradcheck {} (tolerance {:e})",
            self.variant, self.tolerance
        )?;
        for t in &self.tensors {
            let mark = if t.relative_error <= self.tolerance {
                "ok"
            } else {
                "FAIL"
            };
            writeln!(
                f,
                "  {:<28} {:>6} {:>12.3e}  {mark}",
                t.name, t.elements, t.relative_error
            )?;
        }
        writeln!(f, "  worst per layer:")?;
        for (layer, e) in self.per_layer() {
            writeln!(f, "    {layer:<26} {e:.3e}")?;
        }
        write!(
            f,
            "  worst {:.3e}: {}",
            self.worst(),
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// The miniature model and batch the checker differentiates.
pub fn gradcheck_fixture(variant: Variant, seed: u64) -> (Model<f64>, Tensor<f64>, Vec<usize>) {
    let arch = ArchSpec::miniature(variant, CLASSES).with_activation(Activation::Elu);
    let mut model = build_model::<f64>(&arch).expect("miniature architecture is valid");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    scaled_uniform_model(&mut model, &mut rng);
    for (_, p) in model.params_mut().iter_mut() {
        let perturb = match p.role {
            ParamRole::Bias | ParamRole::BnBeta => Some(0.0),
            ParamRole::BnGamma => Some(1.0),
            _ => None,
        };
        if let Some(centre) = perturb {
            p.value = Tensor::from_fn(p.value.shape(), |_| centre + rng.gen_range(-0.2..0.2));
        }
    }
    let x = Tensor::from_fn(model.input_shape(BATCH), |_| rng.gen_range(0.0..1.0));
    let labels = (0..BATCH).map(|i| i % CLASSES).collect();
    (model, x, labels)
}

fn loss_tape(
    model: &Model<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
    seed: u64,
    fault: Option<Fault>,
) -> Result<(Tape<f64>, crate::autograd::Var)> {
    let mut tape = Tape::new();
    if let Some(f) = fault {
        tape.inject_fault(f);
    }
    let xv = tape.input(x.clone());
    let mut ctx = ForwardCtx::new(Mode::Train, seed);
    let logits = model.forward(&mut tape, xv, &mut ctx)?;
    let probs = tape.softmax(logits);
    let loss = tape.cross_entropy(probs, labels, 0.0)?;
    Ok((tape, loss))
}

/// Compares every trainable tensor's backward gradient on a miniature
/// `variant` model in wide precision against central differences. Runs in
/// training mode with a fixed dropout mask.
pub fn gradcheck(variant: Variant, seed: u64, fault: Option<Fault>) -> Result<GradcheckReport> {
    let (model, x, labels) = gradcheck_fixture(variant, seed);
    let (tape, loss) = loss_tape(&model, &x, &labels, seed, fault)?;
    let analytic = tape.backward(loss)?;
    drop(tape);

    let mut tensors = Vec::new();
    for (name, g) in &analytic {
        let base = model.params().tensor(name)?.clone();
        let mut probe = model.clone();
        let numeric = finite_diff(
            |t: &Tensor<f64>| {
                *probe
                    .params_mut()
                    .tensor_mut(name)
                    .expect("name from model") = t.clone();
                let (tape, l) =
                    loss_tape(&probe, &x, &labels, seed, None).expect("forward succeeded once");
                tape.value(l).data()[0]
            },
            &base,
            GRADCHECK_STEP,
        );
        tensors.push(TensorCheck {
            name: name.clone(),
            elements: g.len(),
            relative_error: relative_error_floored(g, &numeric, GRADCHECK_FLOOR),
        });
    }
    Ok(GradcheckReport {
        variant,
        tensors,
        tolerance: GRADCHECK_TOLERANCE,
    })
}
