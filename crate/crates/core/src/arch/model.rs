//! Concrete models built from an [`ArchSpec`].

use std::collections::HashMap;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::spec::{ArchSpec, InceptionUnitSpec, TransitionSpec};
use crate::autograd::{NormStats, Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{
    rcl_on_tape, untied_chain_on_tape, update_running_stats, ChainWiring, Mode, RclVars,
    BN_EPSILON, BN_MOMENTUM,
};
use crate::ops::{Activation, Padding, TRANSITION_POOL_STRIDE, TRANSITION_POOL_WINDOW};
use crate::tensor::{Element, Shape, Tensor};

/// What a stored tensor is for; decides trainability, initialization and
/// regularization coverage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamRole {
    /// Convolution weight outside the inception units (stem, transitions).
    ConvWeight,
    /// Convolution weight inside an inception unit.
    BlockConvWeight,
    Bias,
    BnGamma,
    BnBeta,
    BnRunningMean,
    BnRunningVar,
    ClassifierWeight,
}

impl ParamRole {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamRole::BnRunningMean | ParamRole::BnRunningVar)
    }

    /// Convolution and classifier weights (everything fan-initialized).
    pub fn is_weight(self) -> bool {
        matches!(
            self,
            ParamRole::ConvWeight | ParamRole::BlockConvWeight | ParamRole::ClassifierWeight
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub role: ParamRole,
}

/// Named model tensors in topological order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    entries: IndexMap<String, Param<T>>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }
}

impl<T: Element> ParamStore<T> {
    fn insert(&mut self, name: String, value: Tensor<T>, role: ParamRole) {
        let previous = self.entries.insert(name.clone(), Param { value, role });
        assert!(previous.is_none(), "duplicate parameter name {name}");
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.entries.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named `{name}`")))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.iter().filter(|(_, p)| p.role.trainable())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sum of trainable element counts.
    pub fn trainable_count(&self) -> usize {
        self.trainable().map(|(_, p)| p.value.len()).sum()
    }
}

/// One entry of a model's topological layer list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerInfo {
    pub name: String,
    pub kind: &'static str,
    /// `(c, h, w)` of the layer output.
    pub output: [usize; 3],
    pub params: usize,
}

/// A position in the forward pass whose input can be cached.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageRef {
    Stem(usize),
    Block(usize),
    Transition(usize),
    Head,
}

/// How a weight site's output is measured during initialization probes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SiteKind {
    /// Pre-activation output of a single convolution on the stage input.
    Conv,
    /// Final state of an RCL branch.
    Rcl,
    /// Pre-activation output of convolution `t` of an untied chain.
    ChainConv { branch: String, t: usize },
    /// Convolution after the pooling branch's average pool.
    PoolProjection,
    /// Logits of the classifier head.
    Classifier,
}

/// A group of weight tensors rescaled together during initialization.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Site {
    pub layer: String,
    pub weights: Vec<String>,
    pub kind: SiteKind,
    pub stage: StageRef,
}

/// Output of one inception block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockOutput<T> {
    /// Inception unit output plus (for residual variants) the block input.
    pub pre_bn: Tensor<T>,
    pub output: Tensor<T>,
}

struct BnUpdate<T> {
    prefix: String,
    mean: Vec<T>,
    var: Vec<T>,
    samples: usize,
}

/// Per-pass state: mode, dropout randomness and pending running-stat updates.
pub struct ForwardCtx<T> {
    pub mode: Mode,
    rng: ChaCha8Rng,
    updates: Vec<BnUpdate<T>>,
}

impl<T: Element> ForwardCtx<T> {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Self {
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            updates: Vec::new(),
        }
    }
}

/// Registers model parameters on a tape the first time each is used.
pub struct Binder<'m, T> {
    model: &'m Model<T>,
    vars: HashMap<String, Var>,
}

impl<'m, T: Element> Binder<'m, T> {
    pub fn new(model: &'m Model<T>) -> Self {
        Self {
            model,
            vars: HashMap::new(),
        }
    }

    pub fn get(&mut self, tape: &mut Tape<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let value = self.model.params.tensor(name)?.clone();
        let v = tape.param(name, value)?;
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Binds every trainable parameter in topological order.
    pub fn bind_all(&mut self, tape: &mut Tape<T>) -> Result<()> {
        let names: Vec<String> = self
            .model
            .params
            .trainable()
            .map(|(n, _)| n.to_string())
            .collect();
        for n in names {
            self.get(tape, &n)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    spec: ArchSpec,
    stages: Vec<(InceptionUnitSpec, TransitionSpec)>,
    params: ParamStore<T>,
    layers: Vec<LayerInfo>,
}

const BRANCHES: [(&str, usize); 2] = [("b1x1", 1), ("b3x3", 3)];

/// Validates `arch` and allocates its parameters: zero weights and biases,
/// unit batch-norm scale, zero running mean and unit running variance.
pub fn build_model<T: Element>(arch: &ArchSpec) -> Result<Model<T>> {
    arch.validate()?;
    let stages = arch.stage_specs()?;
    let ext = arch.spatial_extents()?;
    let mut params = ParamStore::default();
    let mut layers = Vec::new();
    let conv = |params: &mut ParamStore<T>,
                prefix: &str,
                f: usize,
                c: usize,
                k: usize,
                role: ParamRole| {
        params.insert(
            format!("{prefix}.weight"),
            Tensor::zeros((f, c, k, k)),
            role,
        );
        params.insert(
            format!("{prefix}.bias"),
            Tensor::zeros((1, f, 1, 1)),
            ParamRole::Bias,
        );
        f * c * k * k + f
    };
    let bn = |params: &mut ParamStore<T>, prefix: &str, c: usize| {
        params.insert(
            format!("{prefix}.gamma"),
            Tensor::ones((1, c, 1, 1)),
            ParamRole::BnGamma,
        );
        params.insert(
            format!("{prefix}.beta"),
            Tensor::zeros((1, c, 1, 1)),
            ParamRole::BnBeta,
        );
        params.insert(
            format!("{prefix}.running_mean"),
            Tensor::zeros((1, c, 1, 1)),
            ParamRole::BnRunningMean,
        );
        params.insert(
            format!("{prefix}.running_var"),
            Tensor::ones((1, c, 1, 1)),
            ParamRole::BnRunningVar,
        );
        2 * c
    };

    let mut c = arch.input[0];
    let h0 = ext[1];
    for (i, w) in arch.stem_widths().into_iter().enumerate() {
        let p = format!("stem{}", i + 1);
        let n = conv(
            &mut params,
            &format!("{p}.conv"),
            w,
            c,
            3,
            ParamRole::ConvWeight,
        );
        layers.push(LayerInfo {
            name: format!("{p}.conv"),
            kind: "conv3x3",
            output: [w, h0, h0],
            params: n,
        });
        let n = bn(&mut params, &format!("{p}.bn"), w);
        layers.push(LayerInfo {
            name: format!("{p}.bn"),
            kind: "batchnorm",
            output: [w, h0, h0],
            params: n,
        });
        c = w;
    }

    for (i, (unit, trans)) in stages.iter().enumerate() {
        let b = format!("block{}", i + 1);
        let h = ext[1 + i];
        for ((branch, kernel), &f) in BRANCHES.iter().zip(&unit.alloc) {
            let prefix = format!("{b}.{branch}");
            let n = if arch.variant.recurrent() {
                params.insert(
                    format!("{prefix}.rcl.ff"),
                    Tensor::zeros((f, c, *kernel, *kernel)),
                    ParamRole::BlockConvWeight,
                );
                params.insert(
                    format!("{prefix}.rcl.rec"),
                    Tensor::zeros((f, f, *kernel, *kernel)),
                    ParamRole::BlockConvWeight,
                );
                params.insert(
                    format!("{prefix}.rcl.bias"),
                    Tensor::zeros((1, f, 1, 1)),
                    ParamRole::Bias,
                );
                kernel * kernel * (c * f + f * f) + f
            } else {
                (0..=unit.k)
                    .map(|t| {
                        let c_in = if t == 0 { c } else { f };
                        conv(
                            &mut params,
                            &format!("{prefix}.chain{t}"),
                            f,
                            c_in,
                            *kernel,
                            ParamRole::BlockConvWeight,
                        )
                    })
                    .sum()
            };
            let kind = match (arch.variant.recurrent(), kernel) {
                (true, 1) => "rcl1x1",
                (true, _) => "rcl3x3",
                (false, 1) => "chain1x1",
                (false, _) => "chain3x3",
            };
            layers.push(LayerInfo {
                name: prefix,
                kind,
                output: [f, h, h],
                params: n,
            });
        }
        let n = conv(
            &mut params,
            &format!("{b}.pool.conv"),
            unit.alloc[2],
            c,
            1,
            ParamRole::BlockConvWeight,
        );
        layers.push(LayerInfo {
            name: format!("{b}.pool"),
            kind: "avgpool+conv1x1",
            output: [unit.alloc[2], h, h],
            params: n,
        });
        layers.push(LayerInfo {
            name: format!("{b}.merge"),
            kind: if arch.variant.residual() {
                "concat+residual"
            } else {
                "concat"
            },
            output: [c, h, h],
            params: 0,
        });
        let n = bn(&mut params, &format!("{b}.bn"), c);
        layers.push(LayerInfo {
            name: format!("{b}.bn"),
            kind: "batchnorm",
            output: [c, h, h],
            params: n,
        });

        let t = format!("trans{}", i + 1);
        let n = conv(
            &mut params,
            &format!("{t}.conv"),
            trans.c_out,
            c,
            3,
            ParamRole::ConvWeight,
        );
        layers.push(LayerInfo {
            name: format!("{t}.conv"),
            kind: "conv3x3",
            output: [trans.c_out, h, h],
            params: n,
        });
        if trans.pool {
            let hp = ext[2 + i];
            layers.push(LayerInfo {
                name: format!("{t}.pool"),
                kind: "maxpool3x3/2",
                output: [trans.c_out, hp, hp],
                params: 0,
            });
        }
        let hp = ext[2 + i];
        layers.push(LayerInfo {
            name: format!("{t}.dropout"),
            kind: "dropout",
            output: [trans.c_out, hp, hp],
            params: 0,
        });
        c = trans.c_out;
    }

    layers.push(LayerInfo {
        name: "gap".into(),
        kind: "global_avg_pool",
        output: [c, 1, 1],
        params: 0,
    });
    params.insert(
        "head.weight".into(),
        Tensor::zeros((1, 1, c, arch.classes)),
        ParamRole::ClassifierWeight,
    );
    params.insert(
        "head.bias".into(),
        Tensor::zeros((1, arch.classes, 1, 1)),
        ParamRole::Bias,
    );
    layers.push(LayerInfo {
        name: "head".into(),
        kind: "dense+softmax",
        output: [arch.classes, 1, 1],
        params: c * arch.classes + arch.classes,
    });

    Ok(Model {
        spec: arch.clone(),
        stages,
        params,
        layers,
    })
}

/// Trainable scalar count of a model.
pub fn param_count<T: Element>(model: &Model<T>) -> usize {
    model.params.trainable_count()
}

impl<T: Element> Model<T> {
    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn layers(&self) -> &[LayerInfo] {
        &self.layers
    }

    pub fn unit_spec(&self, block: usize) -> Option<&InceptionUnitSpec> {
        self.stages.get(block).map(|(u, _)| u)
    }

    pub fn transition_spec(&self, index: usize) -> Option<&TransitionSpec> {
        self.stages.get(index).map(|(_, t)| t)
    }

    pub fn input_shape(&self, batch: usize) -> Shape {
        let [c, h, w] = self.spec.input;
        Shape::new(batch, c, h, w)
    }

    fn activation(&self) -> Activation {
        self.spec.activation
    }

    /// Forward stages in evaluation order.
    pub fn stage_order(&self) -> Vec<StageRef> {
        let mut out: Vec<StageRef> = (0..self.spec.stem.len()).map(StageRef::Stem).collect();
        for i in 0..self.stages.len() {
            out.push(StageRef::Block(i));
            out.push(StageRef::Transition(i));
        }
        out.push(StageRef::Head);
        out
    }

    /// Records the full network and returns `(n, K, 1, 1)` logits.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var, ctx: &mut ForwardCtx<T>) -> Result<Var> {
        let mut binder = Binder::new(self);
        binder.bind_all(tape)?;
        let mut h = x;
        for stage in self.stage_order() {
            h = self.stage_forward(tape, &mut binder, stage, h, ctx)?;
        }
        Ok(h)
    }

    /// Class probabilities for a batch, evaluated on a scratch tape.
    pub fn predict(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let mut ctx = ForwardCtx::new(mode, 0);
        let logits = self.forward(&mut tape, xv, &mut ctx)?;
        let p = tape.softmax(logits);
        Ok(tape.value(p).clone())
    }

    /// Logits for a batch, evaluated on a scratch tape.
    pub fn logits(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let mut ctx = ForwardCtx::new(mode, 0);
        let logits = self.forward(&mut tape, xv, &mut ctx)?;
        Ok(tape.value(logits).clone())
    }

    pub fn stage_forward(
        &self,
        tape: &mut Tape<T>,
        binder: &mut Binder<'_, T>,
        stage: StageRef,
        x: Var,
        ctx: &mut ForwardCtx<T>,
    ) -> Result<Var> {
        match stage {
            StageRef::Stem(i) => {
                let p = format!("stem{}", i + 1);
                let z = self.conv(tape, binder, &format!("{p}.conv"), x)?;
                let n = self.norm(tape, binder, &format!("{p}.bn"), z, ctx)?;
                Ok(tape.activation(n, self.activation()))
            }
            StageRef::Block(i) => {
                let (pre, _) = self.block_on_tape(tape, binder, i, x, ctx)?;
                Ok(pre)
            }
            StageRef::Transition(i) => self.transition_on_tape(tape, binder, i, x, ctx),
            StageRef::Head => {
                let g = tape.global_avg_pool(x);
                let w = binder.get(tape, "head.weight")?;
                let b = binder.get(tape, "head.bias")?;
                tape.linear(g, w, Some(b))
            }
        }
    }

    fn conv(
        &self,
        tape: &mut Tape<T>,
        binder: &mut Binder<'_, T>,
        prefix: &str,
        x: Var,
    ) -> Result<Var> {
        let w = binder.get(tape, &format!("{prefix}.weight"))?;
        let b = binder.get(tape, &format!("{prefix}.bias"))?;
        tape.conv2d(x, w, Some(b), (1, 1), Padding::Same)
    }

    fn norm(
        &self,
        tape: &mut Tape<T>,
        binder: &mut Binder<'_, T>,
        prefix: &str,
        x: Var,
        ctx: &mut ForwardCtx<T>,
    ) -> Result<Var> {
        let g = binder.get(tape, &format!("{prefix}.gamma"))?;
        let b = binder.get(tape, &format!("{prefix}.beta"))?;
        let stats = if ctx.mode.uses_batch_stats() {
            NormStats::Batch
        } else {
            NormStats::Fixed {
                mean: self
                    .params
                    .tensor(&format!("{prefix}.running_mean"))?
                    .data()
                    .to_vec(),
                var: self
                    .params
                    .tensor(&format!("{prefix}.running_var"))?
                    .data()
                    .to_vec(),
            }
        };
        let (y, batch) = tape.batch_norm(x, g, b, stats, T::from_f64(BN_EPSILON))?;
        if let (Mode::Train, Some((mean, var))) = (ctx.mode, batch) {
            let s = tape.shape(x);
            ctx.updates.push(BnUpdate {
                prefix: prefix.to_string(),
                mean,
                var,
                samples: s.n * s.plane(),
            });
        }
        Ok(y)
    }

    fn branch_on_tape(
        &self,
        tape: &mut Tape<T>,
        binder: &mut Binder<'_, T>,
        prefix: &str,
        x: Var,
        unit: &InceptionUnitSpec,
    ) -> Result<Var> {
        if self.spec.variant.recurrent() {
            let vars = RclVars {
                feed_forward: binder.get(tape, &format!("{prefix}.rcl.ff"))?,
                recurrent: binder.get(tape, &format!("{prefix}.rcl.rec"))?,
                bias: binder.get(tape, &format!("{prefix}.rcl.bias"))?,
            };
            rcl_on_tape(tape, x, &vars, unit.k, unit.activation)
        } else {
            let convs = (0..=unit.k)
                .map(|t| {
                    Ok((
                        binder.get(tape, &format!("{prefix}.chain{t}.weight"))?,
                        binder.get(tape, &format!("{prefix}.chain{t}.bias"))?,
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            untied_chain_on_tape(tape, x, &convs, unit.activation, ChainWiring::Sequential)
        }
    }

    /// Records the inception unit of block `i`: the channel concatenation of
    /// the 1×1 branch, the 3×3 branch and the pooled 1×1 projection.
    pub fn unit_on_tape(
        &self,
        tape: &mut Tape<T>,
        binder: &mut Binder<'_, T>,
        i: usize,
        x: Var,
    ) -> Result<Var> {
        let (unit, _) = self.stage(i)?;
        let b = format!("block{}", i + 1);
        let b1 = self.branch_on_tape(tape, binder, &format!("{b}.b1x1"), x, unit)?;
        let b3 = self.branch_on_tape(tape, binder, &format!("{b}.b3x3"), x, unit)?;
        let pooled = tape.avg_pool(x, (3, 3), (1, 1), Padding::Same)?;
        let proj = self.conv(tape, binder, &format!("{b}.pool.conv"), pooled)?;
        let pa = tape.activation(proj, unit.activation);
        tape.concat_channels(&[b1, b3, pa])
    }

    /// Records block `i`; returns `(output, pre-normalization sum)`.
    pub fn block_on_tape(
        &self,
        tape: &mut Tape<T>,
        binder: &mut Binder<'_, T>,
        i: usize,
        x: Var,
        ctx: &mut ForwardCtx<T>,
    ) -> Result<(Var, Var)> {
        let unit = self.unit_on_tape(tape, binder, i, x)?;
        let pre = if self.spec.variant.residual() {
            tape.add(x, unit)?
        } else {
            unit
        };
        let out = self.norm(tape, binder, &format!("block{}.bn", i + 1), pre, ctx)?;
        Ok((out, pre))
    }

    /// Records transition `i`: 3×3 convolution, activation, optional
    /// overlapped max pooling, then dropout in training mode.
    pub fn transition_on_tape(
        &self,
        tape: &mut Tape<T>,
        binder: &mut Binder<'_, T>,
        i: usize,
        x: Var,
        ctx: &mut ForwardCtx<T>,
    ) -> Result<Var> {
        let (_, trans) = self.stage(i)?;
        let z = self.conv(tape, binder, &format!("trans{}.conv", i + 1), x)?;
        let mut h = tape.activation(z, trans.activation);
        if trans.pool {
            h = tape.max_pool(h, TRANSITION_POOL_WINDOW, TRANSITION_POOL_STRIDE)?;
        }
        if ctx.mode.dropout_active() && trans.dropout_rate > 0.0 {
            h = tape.dropout(h, trans.dropout_rate, &mut ctx.rng)?;
        }
        Ok(h)
    }

    fn stage(&self, i: usize) -> Result<&(InceptionUnitSpec, TransitionSpec)> {
        self.stages
            .get(i)
            .ok_or_else(|| Error::InvalidArgument(format!("model has no block {}", i + 1)))
    }

    /// Inception unit output of block `i` on a tensor.
    pub fn unit_forward(&self, i: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(self);
        let xv = tape.input(x.clone());
        let y = self.unit_on_tape(&mut tape, &mut binder, i, xv)?;
        Ok(tape.value(y).clone())
    }

    /// Block `i` on a tensor. Running statistics are not updated.
    pub fn block_forward(&self, i: usize, x: &Tensor<T>, mode: Mode) -> Result<BlockOutput<T>> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(self);
        let xv = tape.input(x.clone());
        let mut ctx = ForwardCtx::new(mode, 0);
        let (out, pre) = self.block_on_tape(&mut tape, &mut binder, i, xv, &mut ctx)?;
        Ok(BlockOutput {
            pre_bn: tape.value(pre).clone(),
            output: tape.value(out).clone(),
        })
    }

    /// Transition `i` on a tensor with dropout randomness from `seed`.
    pub fn transition_forward(
        &self,
        i: usize,
        x: &Tensor<T>,
        mode: Mode,
        seed: u64,
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(self);
        let xv = tape.input(x.clone());
        let mut ctx = ForwardCtx::new(mode, seed);
        let y = self.transition_on_tape(&mut tape, &mut binder, i, xv, &mut ctx)?;
        Ok(tape.value(y).clone())
    }

    /// Writes the batch statistics gathered during a training pass into the
    /// running averages.
    pub fn commit_running_stats(&mut self, ctx: &mut ForwardCtx<T>) -> Result<()> {
        for u in ctx.updates.drain(..) {
            let mut mean = self
                .params
                .tensor(&format!("{}.running_mean", u.prefix))?
                .data()
                .to_vec();
            let mut var = self
                .params
                .tensor(&format!("{}.running_var", u.prefix))?
                .data()
                .to_vec();
            update_running_stats(&mut mean, &mut var, &u.mean, &u.var, u.samples, BN_MOMENTUM);
            self.params
                .tensor_mut(&format!("{}.running_mean", u.prefix))?
                .data_mut()
                .copy_from_slice(&mean);
            self.params
                .tensor_mut(&format!("{}.running_var", u.prefix))?
                .data_mut()
                .copy_from_slice(&var);
        }
        Ok(())
    }

    /// Weight sites of one stage in topological order.
    pub fn stage_sites(&self, stage: StageRef) -> Vec<Site> {
        let site = |layer: String, weights: Vec<String>, kind| Site {
            layer,
            weights,
            kind,
            stage,
        };
        match stage {
            StageRef::Stem(i) => {
                let l = format!("stem{}.conv", i + 1);
                vec![site(l.clone(), vec![format!("{l}.weight")], SiteKind::Conv)]
            }
            StageRef::Block(i) => {
                let b = format!("block{}", i + 1);
                let mut out = Vec::new();
                for (branch, _) in BRANCHES {
                    let prefix = format!("{b}.{branch}");
                    if self.spec.variant.recurrent() {
                        out.push(site(
                            prefix.clone(),
                            vec![format!("{prefix}.rcl.ff"), format!("{prefix}.rcl.rec")],
                            SiteKind::Rcl,
                        ));
                    } else {
                        for t in 0..=self.spec.k {
                            out.push(site(
                                format!("{prefix}.chain{t}"),
                                vec![format!("{prefix}.chain{t}.weight")],
                                SiteKind::ChainConv {
                                    branch: prefix.clone(),
                                    t,
                                },
                            ));
                        }
                    }
                }
                out.push(site(
                    format!("{b}.pool.conv"),
                    vec![format!("{b}.pool.conv.weight")],
                    SiteKind::PoolProjection,
                ));
                out
            }
            StageRef::Transition(i) => {
                let l = format!("trans{}.conv", i + 1);
                vec![site(l.clone(), vec![format!("{l}.weight")], SiteKind::Conv)]
            }
            StageRef::Head => vec![site(
                "head".into(),
                vec!["head.weight".into()],
                SiteKind::Classifier,
            )],
        }
    }

    /// Records the measured output of `site` given its stage input.
    pub fn site_on_tape(
        &self,
        tape: &mut Tape<T>,
        binder: &mut Binder<'_, T>,
        site: &Site,
        x: Var,
    ) -> Result<Var> {
        match &site.kind {
            SiteKind::Conv => self.conv(tape, binder, &site.layer, x),
            SiteKind::PoolProjection => {
                let pooled = tape.avg_pool(x, (3, 3), (1, 1), Padding::Same)?;
                self.conv(tape, binder, &site.layer, pooled)
            }
            SiteKind::Rcl => {
                let StageRef::Block(i) = site.stage else {
                    return Err(Error::InvalidArgument(format!(
                        "site {} is not in a block",
                        site.layer
                    )));
                };
                let (unit, _) = *self.stage(i)?;
                self.branch_on_tape(tape, binder, &site.layer, x, &unit)
            }
            SiteKind::ChainConv { branch, t } => {
                let act = self.activation();
                let mut h = x;
                for step in 0..*t {
                    let z = self.conv(tape, binder, &format!("{branch}.chain{step}"), h)?;
                    h = tape.activation(z, act);
                }
                self.conv(tape, binder, &format!("{branch}.chain{t}"), h)
            }
            SiteKind::Classifier => {
                let g = tape.global_avg_pool(x);
                let w = binder.get(tape, "head.weight")?;
                let b = binder.get(tape, "head.bias")?;
                tape.linear(g, w, Some(b))
            }
        }
    }
}

#[cfg(test)]
#[path = "model_tests.rs"]
mod tests;
