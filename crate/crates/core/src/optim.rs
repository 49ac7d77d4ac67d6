//! Parameter update rules and weight regularization.

use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::arch::{ParamRole, ParamStore};
use crate::autograd::GradMap;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Element, Tensor};

/// Default L2 weight-regularization strength.
pub const L2_LAMBDA: f64 = 0.002;

/// Storage that an optimizer can update by name.
pub trait ParamSet<T> {
    fn tensor_by_name(&mut self, name: &str) -> Option<&mut Tensor<T>>;
}

impl<T: Element> ParamSet<T> for ParamStore<T> {
    fn tensor_by_name(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensor_mut(name).ok()
    }
}

impl<T: Element> ParamSet<T> for IndexMap<String, Tensor<T>> {
    fn tensor_by_name(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.get_mut(name)
    }
}

fn check_grads<T: Element>(params: &mut impl ParamSet<T>, grads: &GradMap<T>) -> Result<()> {
    for (name, g) in grads {
        let p = params.tensor_by_name(name).ok_or_else(|| {
            Error::InvalidArgument(format!("gradient for unknown parameter `{name}`"))
        })?;
        if p.shape() != g.shape() {
            return Err(shape_err(
                "optimizer step",
                format!("{name}: param {} vs grad {}", p.shape(), g.shape()),
            ));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    Ok(())
}

fn state_for<'a, T: Element>(
    state: &'a mut IndexMap<String, Tensor<T>>,
    name: &str,
    like: &Tensor<T>,
) -> &'a mut Tensor<T> {
    state
        .entry(name.to_string())
        .or_insert_with(|| Tensor::zeros(like.shape()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            decay: 9.99e-7,
        }
    }
}

/// Momentum SGD with per-update learning-rate decay.
#[derive(Clone, Debug)]
pub struct SgdState<T> {
    pub config: SgdConfig,
    pub step: u64,
    velocity: IndexMap<String, Tensor<T>>,
}

impl<T: Element> SgdState<T> {
    pub fn new(config: SgdConfig) -> Self {
        Self {
            config,
            step: 0,
            velocity: IndexMap::new(),
        }
    }

    /// Rate used by the next step.
    pub fn learning_rate(&self) -> f64 {
        self.config.learning_rate / (1.0 + self.config.decay * self.step as f64)
    }

    pub fn velocity(&self, name: &str) -> Option<&Tensor<T>> {
        self.velocity.get(name)
    }

    /// `v ← μv − η_t g; p ← p + v`.
    pub fn step(&mut self, params: &mut impl ParamSet<T>, grads: &GradMap<T>) -> Result<()> {
        check_grads(params, grads)?;
        let eta = T::from_f64(self.learning_rate());
        let mu = T::from_f64(self.config.momentum);
        for (name, g) in grads {
            let p = params.tensor_by_name(name).expect("checked above");
            let v = state_for(&mut self.velocity, name, g);
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = mu * *vv - eta * gv;
                *pv = *pv + *vv;
            }
        }
        self.step += 1;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EveConfig {
    pub learning_rate: f64,
    pub decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    /// Lower clipping threshold `κ`.
    pub small_k: f64,
    /// Upper clipping threshold `K`.
    pub big_k: f64,
    pub epsilon: f64,
}

impl Default for EveConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            beta3: 0.9999,
            small_k: 0.1,
            big_k: 10.0,
            epsilon: 1e-8,
        }
    }
}

/// Adam with an objective-feedback coefficient `d` dividing the step.
#[derive(Clone, Debug)]
pub struct EveState<T> {
    pub config: EveConfig,
    pub step: u64,
    pub feedback: f64,
    pub smoothed_loss: Option<f64>,
    first: IndexMap<String, Tensor<T>>,
    second: IndexMap<String, Tensor<T>>,
}

impl<T: Element> EveState<T> {
    pub fn new(config: EveConfig) -> Self {
        Self {
            config,
            step: 0,
            feedback: 1.0,
            smoothed_loss: None,
            first: IndexMap::new(),
            second: IndexMap::new(),
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.config.learning_rate / (1.0 + self.config.decay * self.step as f64)
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.first.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.second.get(name)
    }

    pub fn step(
        &mut self,
        params: &mut impl ParamSet<T>,
        grads: &GradMap<T>,
        loss: f64,
    ) -> Result<()> {
        if !loss.is_finite() || loss <= 0.0 {
            return Err(Error::NonFinite(format!(
                "objective {loss} must be finite and positive"
            )));
        }
        check_grads(params, grads)?;
        let c = self.config;
        let rate = self.learning_rate();
        let t = self.step + 1;

        match self.smoothed_loss {
            None => {
                self.feedback = 1.0;
                self.smoothed_loss = Some(loss);
            }
            Some(prev) => {
                let (lo, hi) = if loss >= prev {
                    (c.small_k + 1.0, c.big_k + 1.0)
                } else {
                    (1.0 / (c.big_k + 1.0), 1.0 / (c.small_k + 1.0))
                };
                let ratio = (loss / prev).clamp(lo, hi);
                let next = ratio * prev;
                let r = (next - prev).abs() / next.min(prev);
                self.feedback = c.beta3 * self.feedback + (1.0 - c.beta3) * r;
                self.smoothed_loss = Some(next);
            }
        }

        let bc1 = 1.0 - c.beta1.powf(t as f64);
        let bc2 = 1.0 - c.beta2.powf(t as f64);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one, eps) = (T::one(), T::from_f64(c.epsilon));
        let (inv_bc1, inv_bc2) = (T::from_f64(1.0 / bc1), T::from_f64(1.0 / bc2));
        let d = T::from_f64(self.feedback);
        let lr = T::from_f64(rate);
        for (name, g) in grads {
            let p = params.tensor_by_name(name).expect("checked above");
            let m = state_for(&mut self.first, name, g);
            let v = state_for(&mut self.second, name, g);
            for (((pv, mv), vv), &gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                let m_hat = *mv * inv_bc1;
                let v_hat = *vv * inv_bc2;
                *pv = *pv - lr * m_hat / (d * v_hat.sqrt() + eps);
            }
        }
        self.step = t;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Eve,
}

impl FromStr for OptimizerKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "eve" => Ok(OptimizerKind::Eve),
            other => Err(format!("unknown optimizer `{other}`")),
        }
    }
}

/// Either update rule behind one interface.
#[derive(Clone, Debug)]
pub enum Optimizer<T> {
    Sgd(SgdState<T>),
    Eve(EveState<T>),
}

impl<T: Element> Optimizer<T> {
    pub fn new(kind: OptimizerKind, sgd: SgdConfig, eve: EveConfig) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd(SgdState::new(sgd)),
            OptimizerKind::Eve => Optimizer::Eve(EveState::new(eve)),
        }
    }

    pub fn step(
        &mut self,
        params: &mut impl ParamSet<T>,
        grads: &GradMap<T>,
        loss: f64,
    ) -> Result<()> {
        match self {
            Optimizer::Sgd(s) => s.step(params, grads),
            Optimizer::Eve(s) => s.step(params, grads, loss),
        }
    }

    pub fn learning_rate(&self) -> f64 {
        match self {
            Optimizer::Sgd(s) => s.learning_rate(),
            Optimizer::Eve(s) => s.learning_rate(),
        }
    }
}

/// Which weights the L2 penalty covers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum L2Coverage {
    /// Convolution weights inside inception units.
    #[default]
    BlockWeights,
    /// Every convolution and classifier weight.
    AllWeights,
}

impl L2Coverage {
    pub fn covers(self, role: ParamRole) -> bool {
        match self {
            L2Coverage::BlockWeights => role == ParamRole::BlockConvWeight,
            L2Coverage::AllWeights => role.is_weight(),
        }
    }
}

/// Adds `2λw` to the gradient of every covered weight and returns the
/// penalty `λ Σ w²`.
pub fn apply_l2<T: Element>(
    grads: &mut GradMap<T>,
    params: &ParamStore<T>,
    lambda: f64,
    coverage: L2Coverage,
) -> Result<f64> {
    if lambda == 0.0 {
        return Ok(0.0);
    }
    let mut penalty = 0.0;
    let two_lambda = T::from_f64(2.0 * lambda);
    for (name, p) in params.iter().filter(|(_, p)| coverage.covers(p.role)) {
        let g = grads
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(p.value.shape()));
        penalty += l2_penalty(&p.value, lambda);
        for (gv, &w) in g.data_mut().iter_mut().zip(p.value.data()) {
            *gv = *gv + two_lambda * w;
        }
    }
    Ok(penalty)
}

/// `λ Σ w²` of one tensor.
pub fn l2_penalty<T: Element>(w: &Tensor<T>, lambda: f64) -> f64 {
    lambda
        * w.data()
            .iter()
            .map(|v| v.to_f64() * v.to_f64())
            .sum::<f64>()
}

/// Penalty over the covered weights of `params`.
pub fn l2_total<T: Element>(params: &ParamStore<T>, lambda: f64, coverage: L2Coverage) -> f64 {
    params
        .iter()
        .filter(|(_, p)| coverage.covers(p.role))
        .map(|(_, p)| l2_penalty(&p.value, lambda))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_model, ArchSpec, Variant};

    fn scalar_set(p: f64) -> IndexMap<String, Tensor<f64>> {
        IndexMap::from([("p".to_string(), Tensor::scalar(p))])
    }

    fn grad(g: f64) -> GradMap<f64> {
        IndexMap::from([("p".to_string(), Tensor::scalar(g))])
    }

    #[test]
    fn defaults_match_recipe() {
        let s = SgdConfig::default();
        assert_eq!((s.momentum, s.decay), (0.9, 9.99e-7));
        let e = EveConfig::default();
        assert_eq!(
            (
                e.learning_rate,
                e.decay,
                e.beta1,
                e.beta2,
                e.beta3,
                e.small_k,
                e.big_k,
                e.epsilon
            ),
            (1e-4, 1e-4, 0.9, 0.999, 0.9999, 0.1, 10.0, 1e-8)
        );
    }

    #[test]
    fn sgd_hand_recurrence() {
        let mut set = scalar_set(0.0);
        let mut sgd = SgdState::new(SgdConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            decay: 0.0,
        });
        sgd.step(&mut set, &grad(1.0)).unwrap();
        assert!((set["p"].data()[0] + 0.1).abs() < 1e-15);
        sgd.step(&mut set, &grad(1.0)).unwrap();
        assert!((set["p"].data()[0] + 0.29).abs() < 1e-15);
        assert!((sgd.velocity("p").unwrap().data()[0] + 0.19).abs() < 1e-15);
    }

    #[test]
    fn sgd_without_momentum_is_plain_descent() {
        let mut set = scalar_set(2.0);
        let mut sgd = SgdState::new(SgdConfig {
            learning_rate: 0.25,
            momentum: 0.0,
            decay: 0.0,
        });
        for g in [1.0, -3.0, 0.5] {
            let before = set["p"].data()[0];
            sgd.step(&mut set, &grad(g)).unwrap();
            assert_eq!(set["p"].data()[0], before - 0.25 * g);
        }
    }

    #[test]
    fn sgd_velocity_decays_without_gradient() {
        let mut set = scalar_set(0.0);
        let mut sgd = SgdState::new(SgdConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            decay: 0.0,
        });
        sgd.step(&mut set, &grad(1.0)).unwrap();
        let mut last = f64::INFINITY;
        for _ in 0..200 {
            let before = set["p"].data()[0];
            sgd.step(&mut set, &grad(0.0)).unwrap();
            let delta = (set["p"].data()[0] - before).abs();
            assert!(delta <= last);
            last = delta;
        }
        assert!((set["p"].data()[0] + 1.0).abs() < 1e-8);
    }

    #[test]
    fn sgd_rate_decays_per_update() {
        let mut sgd = SgdState::<f64>::new(SgdConfig {
            learning_rate: 1.0,
            momentum: 0.0,
            decay: 0.5,
        });
        let mut set = scalar_set(0.0);
        sgd.step(&mut set, &grad(1.0)).unwrap();
        sgd.step(&mut set, &grad(1.0)).unwrap();
        assert!((set["p"].data()[0] + 1.0 + 1.0 / 1.5).abs() < 1e-15);
    }

    #[test]
    fn eve_first_step_is_sign_step() {
        for g in [3.0, -0.02, 1e3] {
            let mut set = scalar_set(1.0);
            let mut eve = EveState::new(EveConfig::default());
            eve.step(&mut set, &grad(g), 2.3).unwrap();
            let delta = set["p"].data()[0] - 1.0;
            assert!((delta + 1e-4 * g.signum()).abs() < 1e-9, "{delta}");
            assert_eq!(eve.feedback, 1.0);
        }
    }

    #[test]
    fn eve_zero_gradient_leaves_params() {
        let mut set = scalar_set(0.7);
        let mut eve = EveState::new(EveConfig::default());
        for loss in [2.0, 1.5, 3.0] {
            eve.step(&mut set, &grad(0.0), loss).unwrap();
        }
        assert_eq!(set["p"].data()[0], 0.7);
    }

    #[test]
    fn eve_feedback_stays_positive_and_clips() {
        let mut set = scalar_set(0.0);
        let mut eve = EveState::new(EveConfig::default());
        let losses = [2.0, 100.0, 1e-3, 1.0, 1.0, 0.5, 50.0];
        for &l in &losses {
            eve.step(&mut set, &grad(0.3), l).unwrap();
            assert!(eve.feedback > 0.0);
        }
        let mut eve = EveState::<f64>::new(EveConfig::default());
        eve.step(&mut set, &grad(0.3), 1.0).unwrap();
        eve.step(&mut set, &grad(0.3), 1000.0).unwrap();
        assert!((eve.smoothed_loss.unwrap() - 11.0).abs() < 1e-12);
        let expect = 0.9999 + 0.0001 * 10.0;
        assert!((eve.feedback - expect).abs() < 1e-12);
    }

    #[test]
    fn eve_is_deterministic() {
        let run = || {
            let mut set = scalar_set(0.5);
            let mut eve = EveState::new(EveConfig::default());
            for (i, l) in [2.0, 1.7, 1.9, 1.2].into_iter().enumerate() {
                eve.step(&mut set, &grad(0.1 * i as f64 - 0.15), l).unwrap();
            }
            set["p"].data()[0]
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn eve_rejects_bad_loss_and_gradients() {
        let mut set = scalar_set(0.0);
        let mut eve = EveState::new(EveConfig::default());
        assert!(matches!(
            eve.step(&mut set, &grad(1.0), f64::NAN),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            eve.step(&mut set, &grad(f64::INFINITY), 1.0),
            Err(Error::NonFinite(_))
        ));
        assert_eq!(set["p"].data()[0], 0.0);
        assert_eq!(eve.step, 0);
    }

    #[test]
    fn step_rejects_shape_mismatch() {
        let mut set = scalar_set(0.0);
        let g = IndexMap::from([("p".to_string(), Tensor::<f64>::zeros((1, 2, 1, 1)))]);
        let mut sgd = SgdState::new(SgdConfig::default());
        assert!(matches!(sgd.step(&mut set, &g), Err(Error::Shape { .. })));
    }

    #[test]
    fn l2_covers_block_weights_only() {
        let mut m = build_model::<f64>(&ArchSpec::miniature(Variant::Irrcnn, 10)).unwrap();
        for (_, p) in m.params_mut().iter_mut() {
            p.value = Tensor::ones(p.value.shape());
        }
        let mut grads: GradMap<f64> = m
            .params()
            .trainable()
            .map(|(n, p)| (n.to_string(), Tensor::zeros(p.value.shape())))
            .collect();
        let penalty =
            apply_l2(&mut grads, m.params(), L2_LAMBDA, L2Coverage::BlockWeights).unwrap();
        let mut covered = 0;
        for (name, g) in &grads {
            let role = m.params().get(name).unwrap().role;
            if role == ParamRole::BlockConvWeight {
                covered += g.len();
                assert!(
                    g.data().iter().all(|&v| (v - 0.004).abs() < 1e-15),
                    "{name}"
                );
            } else {
                assert!(g.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
        assert!((penalty - L2_LAMBDA * covered as f64).abs() < 1e-12);
        assert_eq!(
            penalty,
            l2_total(m.params(), L2_LAMBDA, L2Coverage::BlockWeights)
        );
    }

    #[test]
    fn l2_zero_lambda_and_zero_weights() {
        let m = build_model::<f64>(&ArchSpec::miniature(Variant::Irrcnn, 10)).unwrap();
        let mut grads = GradMap::new();
        assert_eq!(
            apply_l2(&mut grads, m.params(), 0.0, L2Coverage::AllWeights).unwrap(),
            0.0
        );
        assert!(grads.is_empty());
        assert_eq!(
            apply_l2(&mut grads, m.params(), L2_LAMBDA, L2Coverage::AllWeights).unwrap(),
            0.0
        );
    }
}
