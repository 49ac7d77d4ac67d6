//! Parameter initialization: fan-scaled uniform weights and layer-sequential
//! unit-variance rescaling.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{Binder, ForwardCtx, Model, ParamRole, Site};
use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::tensor::{Element, Shape, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitScheme {
    #[default]
    #[serde(alias = "scaled_uniform")]
    Scaled,
    Lsuv,
}

impl FromStr for InitScheme {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "scaled" | "scaled_uniform" => Ok(InitScheme::Scaled),
            "lsuv" => Ok(InitScheme::Lsuv),
            other => Err(format!("unknown init scheme `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    pub scheme: InitScheme,
    pub tol_var: f64,
    pub max_iterations: usize,
    pub probe_batch: usize,
    pub seed: u64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            scheme: InitScheme::Scaled,
            tol_var: 0.05,
            max_iterations: 10,
            probe_batch: 128,
            seed: 0,
        }
    }
}

impl InitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol_var > 0.0) {
            return Err(Error::Config(format!(
                "LSUV tolerance must be positive, got {}",
                self.tol_var
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("LSUV needs at least one iteration".into()));
        }
        if self.probe_batch == 0 {
            return Err(Error::Config("LSUV probe batch must be non-empty".into()));
        }
        Ok(())
    }
}

/// I.i.d. samples from `U[-L, L]` with `L = sqrt(6 / (fan_in + fan_out))`.
pub fn scaled_uniform_init<T: Element>(
    shape: impl Into<Shape>,
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) -> Tensor<T> {
    let limit = scaled_uniform_limit(fan_in, fan_out);
    let dist = Uniform::new_inclusive(-limit, limit);
    Tensor::from_fn(shape, |_| T::from_f64(dist.sample(rng)))
}

pub fn scaled_uniform_limit(fan_in: usize, fan_out: usize) -> f64 {
    assert!(fan_in + fan_out > 0, "fans must be positive");
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// `(fan_in, fan_out)` of a stored weight. Convolution kernels are
/// `(out, in, kh, kw)`; classifier weights are `(1, 1, features, classes)`.
pub fn fans(shape: Shape, role: ParamRole) -> (usize, usize) {
    match role {
        ParamRole::ClassifierWeight => (shape.h, shape.w),
        _ => {
            let receptive = shape.h * shape.w;
            (shape.c * receptive, shape.n * receptive)
        }
    }
}

/// Resets every parameter: fan-scaled uniform weights, zero biases and
/// batch-norm shifts, unit batch-norm scales, fresh running statistics.
pub fn scaled_uniform_model<T: Element>(model: &mut Model<T>, rng: &mut impl Rng) {
    for (_, p) in model.params_mut().iter_mut() {
        let shape = p.value.shape();
        p.value = match p.role {
            r if r.is_weight() => {
                let (fan_in, fan_out) = fans(shape, r);
                scaled_uniform_init(shape, fan_in, fan_out, rng)
            }
            ParamRole::BnGamma | ParamRole::BnRunningVar => Tensor::ones(shape),
            _ => Tensor::zeros(shape),
        };
    }
}

/// Final state of one rescaled site.
#[derive(Clone, Debug, PartialEq)]
pub struct LsuvEntry {
    pub layer: String,
    /// Output variance before any rescaling.
    pub initial_variance: f64,
    pub variance: f64,
    /// Product of all factors applied to the site's weights.
    pub scale: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LsuvReport {
    pub entries: Vec<LsuvEntry>,
}

impl LsuvReport {
    pub fn non_converged(&self) -> impl Iterator<Item = &LsuvEntry> {
        self.entries.iter().filter(|e| !e.converged)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,initial_variance,variance,scale,iterations,converged\n");
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                e.layer, e.initial_variance, e.variance, e.scale, e.iterations, e.converged
            );
        }
        out
    }
}

/// Outcome of [`unit_variance_search`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VarianceFit {
    pub initial_variance: f64,
    pub variance: f64,
    pub scale: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Searches for a weight scale `s` whose output variance is within `tol` of
/// one. `variance_at(s)` must report the output variance with weights set
/// to `s` times their original values. The first step is `1/sqrt(v)`; later
/// steps use a secant on `(ln s, ln v)`, which is exact when the output is
/// homogeneous in the weights.
pub fn unit_variance_search(
    layer: &str,
    mut variance_at: impl FnMut(f64) -> Result<f64>,
    tol: f64,
    max_iterations: usize,
) -> Result<VarianceFit> {
    let degenerate = || Error::DegenerateLayer {
        layer: layer.to_string(),
    };
    let mut log_scale = 0.0;
    let mut v = variance_at(1.0)?;
    let initial_variance = v;
    let mut previous: Option<(f64, f64)> = None;
    let mut iterations = 0;
    while (v - 1.0).abs() > tol && iterations < max_iterations {
        if !(v > 0.0) || !v.is_finite() {
            return Err(degenerate());
        }
        let log_v = v.ln();
        let slope = match previous {
            Some((ls, lv)) if (log_scale - ls).abs() > 1e-12 => {
                ((log_v - lv) / (log_scale - ls)).clamp(0.5, 16.0)
            }
            _ => 2.0,
        };
        previous = Some((log_scale, log_v));
        log_scale -= log_v / slope;
        v = variance_at(log_scale.exp())?;
        iterations += 1;
    }
    if !(v > 0.0) || !v.is_finite() {
        return Err(degenerate());
    }
    Ok(VarianceFit {
        initial_variance,
        variance: v,
        scale: log_scale.exp(),
        iterations,
        converged: (v - 1.0).abs() <= tol,
    })
}

/// Layer-sequential unit-variance initialization. Visits weight sites in
/// topological order, rescaling each until its output variance on `probe`
/// is within `cfg.tol_var` of one. Batch norm uses batch statistics and
/// dropout is inactive while probing; running statistics are untouched.
pub fn lsuv_init<T: Element>(
    model: &mut Model<T>,
    probe: &Tensor<T>,
    cfg: &InitConfig,
) -> Result<LsuvReport> {
    cfg.validate()?;
    let mut report = LsuvReport::default();
    let mut stage_input = probe.clone();
    for stage in model.stage_order() {
        for site in model.stage_sites(stage) {
            let originals = site
                .weights
                .iter()
                .map(|n| Ok((n.clone(), model.params().tensor(n)?.clone())))
                .collect::<Result<Vec<_>>>()?;
            let fit = unit_variance_search(
                &site.layer,
                |scale| {
                    for (name, w) in &originals {
                        *model.params_mut().tensor_mut(name)? = w.scale(T::from_f64(scale));
                    }
                    site_variance(model, &site, &stage_input)
                },
                cfg.tol_var,
                cfg.max_iterations,
            )?;
            report.entries.push(LsuvEntry {
                layer: site.layer.clone(),
                initial_variance: fit.initial_variance,
                variance: fit.variance,
                scale: fit.scale,
                iterations: fit.iterations,
                converged: fit.converged,
            });
        }
        let mut tape = Tape::new();
        let mut binder = Binder::new(model);
        let x = tape.input(stage_input);
        let mut ctx = ForwardCtx::new(Mode::Calibrate, cfg.seed);
        let y = model.stage_forward(&mut tape, &mut binder, stage, x, &mut ctx)?;
        stage_input = tape.value(y).clone();
    }
    Ok(report)
}

fn site_variance<T: Element>(model: &Model<T>, site: &Site, input: &Tensor<T>) -> Result<f64> {
    let mut tape = Tape::new();
    let mut binder = Binder::new(model);
    let x = tape.input(input.clone());
    let y = model.site_on_tape(&mut tape, &mut binder, site, x)?;
    let out = tape.value(y);
    if !out.all_finite() {
        return Err(Error::NonFinite(format!(
            "output of {} during initialization",
            site.layer
        )));
    }
    Ok(out.variance().to_f64())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::arch::{build_model, ArchSpec, Variant};

    #[test]
    fn samples_stay_within_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t: Tensor<f32> = scaled_uniform_init((64, 32, 3, 3), 288, 576, &mut rng);
        let limit = scaled_uniform_limit(288, 576) as f32;
        assert!(t.data().iter().all(|v| v.abs() <= limit));
    }

    #[test]
    fn same_seed_same_tensor() {
        let a: Tensor<f32> =
            scaled_uniform_init((8, 4, 3, 3), 36, 72, &mut ChaCha8Rng::seed_from_u64(2));
        let b: Tensor<f32> =
            scaled_uniform_init((8, 4, 3, 3), 36, 72, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(a, b);
    }

    #[test]
    fn sample_mean_is_centred() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let t: Tensor<f64> = scaled_uniform_init((1, 1, 1, n), 10, 20, &mut rng);
        let limit = scaled_uniform_limit(10, 20);
        let bound = 3.0 * limit / (3.0 * n as f64).sqrt();
        assert!(t.mean().abs() <= bound, "{} > {bound}", t.mean());
    }

    #[test]
    fn conv_and_classifier_fans() {
        assert_eq!(
            fans(Shape::new(16, 3, 3, 3), ParamRole::ConvWeight),
            (27, 144)
        );
        assert_eq!(
            fans(Shape::new(1, 1, 64, 10), ParamRole::ClassifierWeight),
            (64, 10)
        );
    }

    #[test]
    fn model_reset_sets_affine_and_biases() {
        let mut m = build_model::<f32>(&ArchSpec::miniature(Variant::Irrcnn, 10)).unwrap();
        scaled_uniform_model(&mut m, &mut ChaCha8Rng::seed_from_u64(4));
        for (name, p) in m.params().iter() {
            let d = p.value.data();
            match p.role {
                ParamRole::BnGamma => assert!(d.iter().all(|&v| v == 1.0), "{name}"),
                ParamRole::Bias | ParamRole::BnBeta => {
                    assert!(d.iter().all(|&v| v == 0.0), "{name}")
                }
                r if r.is_weight() => assert!(d.iter().any(|&v| v != 0.0), "{name}"),
                _ => {}
            }
        }
    }

    #[test]
    fn quadratic_layer_converges_in_one_step() {
        let fit = unit_variance_search("linear", |s| Ok(4.0 * s * s), 0.05, 10).unwrap();
        assert_eq!(fit.iterations, 1);
        assert!((fit.scale - 0.5).abs() < 1e-12);
        assert!((fit.variance - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unit_variance_is_a_fixed_point() {
        let fit = unit_variance_search("ok", |s| Ok(1.01 * s * s), 0.05, 10).unwrap();
        assert_eq!(fit.iterations, 0);
        assert_eq!(fit.scale, 1.0);
    }

    #[test]
    fn non_homogeneous_layer_converges() {
        // Variance growing like a mix of s^2 and s^6.
        let fit =
            unit_variance_search("rcl", |s| Ok(0.3 * s * s + 5.0 * s.powi(6)), 0.05, 10).unwrap();
        assert!(fit.converged, "{fit:?}");
    }

    #[test]
    fn zero_variance_names_the_layer() {
        let err = unit_variance_search("stem1.conv", |_| Ok(0.0), 0.05, 10).unwrap_err();
        assert!(matches!(err, Error::DegenerateLayer { ref layer } if layer == "stem1.conv"));
    }

    #[test]
    fn lsuv_on_miniature_model() {
        let mut m = build_model::<f32>(&ArchSpec::miniature(Variant::Irrcnn, 10)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        scaled_uniform_model(&mut m, &mut rng);
        let before = m.clone();
        let probe = Tensor::from_fn((32, 3, 8, 8), |_| rng.gen_range(-1.0f32..1.0));
        let report = lsuv_init(&mut m, &probe, &InitConfig::default()).unwrap();
        assert_eq!(report.non_converged().count(), 0, "{}", report.to_csv());
        assert!(report
            .entries
            .iter()
            .all(|e| (e.variance - 1.0).abs() <= 0.05));
        assert_eq!(report.entries.first().unwrap().layer, "stem1.conv");
        assert_eq!(report.entries.last().unwrap().layer, "head");
        for (name, p) in m.params().iter() {
            let old = before.params().tensor(name).unwrap();
            if p.role.is_weight() {
                let ratio = p.value.data()[0] / old.data()[0];
                assert!(ratio > 0.0);
                for (a, b) in p.value.data().iter().zip(old.data()) {
                    assert!((a - ratio * b).abs() <= 1e-5 * (1.0 + a.abs()), "{name}");
                }
            } else {
                assert_eq!(&p.value, old, "{name}");
            }
        }
    }

    #[test]
    fn lsuv_rejects_a_dead_probe() {
        let mut m = build_model::<f32>(&ArchSpec::miniature(Variant::Irrcnn, 10)).unwrap();
        scaled_uniform_model(&mut m, &mut ChaCha8Rng::seed_from_u64(6));
        let probe = Tensor::zeros((4, 3, 8, 8));
        let err = lsuv_init(&mut m, &probe, &InitConfig::default()).unwrap_err();
        assert!(matches!(err, Error::DegenerateLayer { ref layer } if layer == "stem1.conv"));
    }

    #[test]
    fn scheme_names_parse() {
        assert_eq!("scaled".parse::<InitScheme>().unwrap(), InitScheme::Scaled);
        assert_eq!("LSUV".parse::<InitScheme>().unwrap(), InitScheme::Lsuv);
        assert!("xavier".parse::<InitScheme>().is_err());
    }
}
