//! Declarative model descriptions.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{Activation, TRANSITION_POOL_STRIDE, TRANSITION_POOL_WINDOW};

/// Transition-block dropout rate.
pub const TRANSITION_DROPOUT: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Recurrent branches with the residual add.
    Irrcnn,
    /// Recurrent branches, no residual add.
    Ircnn,
    /// Untied sequential convolutions, no residual add.
    Ein,
    /// Untied sequential convolutions with the residual add.
    Eirn,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Irrcnn, Variant::Ircnn, Variant::Ein, Variant::Eirn];

    pub fn residual(self) -> bool {
        matches!(self, Variant::Irrcnn | Variant::Eirn)
    }

    pub fn recurrent(self) -> bool {
        matches!(self, Variant::Irrcnn | Variant::Ircnn)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Irrcnn => "IRRCNN",
            Variant::Ircnn => "IRCNN",
            Variant::Ein => "EIN",
            Variant::Eirn => "EIRN",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "irrcnn" => Ok(Variant::Irrcnn),
            "ircnn" => Ok(Variant::Ircnn),
            "ein" => Ok(Variant::Ein),
            "eirn" => Ok(Variant::Eirn),
            other => Err(format!("unknown architecture variant `{other}`")),
        }
    }
}

/// A positive rational width multiplier, written `num/den`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Ratio {
    pub num: u32,
    pub den: u32,
}

impl Ratio {
    pub const ONE: Ratio = Ratio { num: 1, den: 1 };

    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::InvalidArgument(format!(
                "width ratio {num}/{den} must be positive"
            )));
        }
        Ok(Self { num, den })
    }

    /// `channels · num / den` rounded to the nearest whole channel, halves
    /// rounding down, and never below one.
    pub fn scale(self, channels: usize) -> usize {
        let (num, den) = (self.num as usize, self.den as usize);
        ((2 * channels * num + den - 1) / (2 * den)).max(1)
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for Ratio {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let parse = |p: &str| {
            p.trim()
                .parse::<u32>()
                .map_err(|_| Error::InvalidArgument(format!("bad width ratio `{s}`")))
        };
        match s.split_once('/') {
            Some((n, d)) => Ratio::new(parse(n)?, parse(d)?),
            None => Ratio::new(parse(s)?, 1),
        }
    }
}

impl TryFrom<String> for Ratio {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Ratio> for String {
    fn from(r: Ratio) -> String {
        r.to_string()
    }
}

/// One block followed by one transition, at nominal (unscaled) widths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    /// Explicit `(1×1, 3×3, pool)` branch widths; defaults to `(¼, ½, ¼)` of
    /// the block width.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alloc: Option<[usize; 3]>,
    /// Output channels of the transition convolution.
    pub transition_width: usize,
    pub pool: bool,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

fn default_dropout() -> f64 {
    TRANSITION_DROPOUT
}

impl StageSpec {
    pub fn new(transition_width: usize, pool: bool) -> Self {
        Self {
            alloc: None,
            transition_width,
            pool,
            dropout: TRANSITION_DROPOUT,
        }
    }
}

/// Resolved widths of one inception unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InceptionUnitSpec {
    pub c_in: usize,
    /// `(1×1 branch, 3×3 branch, pool branch)` output channels.
    pub alloc: [usize; 3],
    pub k: usize,
    pub activation: Activation,
}

impl InceptionUnitSpec {
    pub fn width(&self) -> usize {
        self.alloc.iter().sum()
    }
}

/// Resolved widths of one transition block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransitionSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub pool: bool,
    pub dropout_rate: f64,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub variant: Variant,
    /// `(channels, height, width)` of one input image.
    pub input: [usize; 3],
    /// Output widths of the stem convolutions.
    pub stem: Vec<usize>,
    pub stages: Vec<StageSpec>,
    /// Recurrent time steps (or untied chain length minus one).
    pub k: usize,
    pub classes: usize,
    #[serde(default)]
    pub activation: Activation,
    /// Multiplier applied to every internal width.
    #[serde(default = "one")]
    pub width: Ratio,
}

fn one() -> Ratio {
    Ratio::ONE
}

/// Default `(¼, ½, ¼)` branch split of a block width; the pool branch takes
/// the remainder.
pub fn default_alloc(c: usize) -> [usize; 3] {
    let quarter = Ratio { num: 1, den: 4 }.scale(c);
    let half = Ratio { num: 1, den: 2 }.scale(c);
    [quarter, half, c.saturating_sub(quarter + half)]
}

impl ArchSpec {
    /// The CIFAR network: two stem convolutions, three block/transition
    /// stages with pooling in the first two, global pooling and softmax.
    pub fn cifar(variant: Variant, classes: usize) -> Self {
        Self {
            variant,
            input: [3, 32, 32],
            stem: vec![64, 96],
            stages: vec![
                StageSpec::new(192, true),
                StageSpec::new(384, true),
                StageSpec::new(384, false),
            ],
            k: 2,
            classes,
            activation: Activation::Relu,
            width: Ratio::ONE,
        }
    }

    /// Reduced-width CIFAR network for desk-scale training runs.
    pub fn cifar_reduced(variant: Variant, classes: usize) -> Self {
        Self {
            stem: vec![16, 32],
            stages: vec![
                StageSpec::new(64, true),
                StageSpec::new(128, true),
                StageSpec::new(128, false),
            ],
            ..Self::cifar(variant, classes)
        }
    }

    /// Widths of at most 8 on 8×8 inputs; used for gradient checks and
    /// overfitting runs. Only the first transition pools, so later blocks
    /// still see a 3×3 map.
    pub fn miniature(variant: Variant, classes: usize) -> Self {
        Self {
            variant,
            input: [3, 8, 8],
            stem: vec![4, 8],
            stages: vec![
                StageSpec::new(8, true),
                StageSpec::new(8, false),
                StageSpec::new(8, false),
            ],
            k: 2,
            classes,
            activation: Activation::Relu,
            width: Ratio::ONE,
        }
    }

    /// Small network on 16×16 inputs for quick comparative runs.
    pub fn small(variant: Variant, classes: usize) -> Self {
        Self {
            variant,
            input: [3, 16, 16],
            stem: vec![8, 16],
            stages: vec![
                StageSpec::new(32, true),
                StageSpec::new(32, true),
                StageSpec::new(32, false),
            ],
            k: 2,
            classes,
            activation: Activation::Relu,
            width: Ratio::ONE,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = k;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_width(mut self, width: Ratio) -> Self {
        self.width = width;
        self
    }

    pub fn scaled(&self, c: usize) -> usize {
        self.width.scale(c)
    }

    pub fn stem_widths(&self) -> Vec<usize> {
        self.stem.iter().map(|&c| self.scaled(c)).collect()
    }

    fn stem_out(&self) -> usize {
        self.stem_widths().last().copied().unwrap_or(self.input[0])
    }

    /// Resolved unit and transition widths per stage.
    pub fn stage_specs(&self) -> Result<Vec<(InceptionUnitSpec, TransitionSpec)>> {
        let mut c = self.stem_out();
        let mut out = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter().enumerate() {
            let alloc = match stage.alloc {
                Some(a) => a.map(|v| self.scaled(v)),
                None => default_alloc(c),
            };
            let unit = InceptionUnitSpec {
                c_in: c,
                alloc,
                k: self.k,
                activation: self.activation,
            };
            if unit.width() != c || alloc.contains(&0) {
                return Err(Error::Config(format!(
                    "block {} branch widths {alloc:?} must be positive and sum to its input width {c}",
                    i + 1
                )));
            }
            let c_out = self.scaled(stage.transition_width);
            if c_out < c {
                return Err(Error::Config(format!(
                    "transition {} narrows {c} -> {c_out}; widths must not shrink",
                    i + 1
                )));
            }
            if !(0.0..1.0).contains(&stage.dropout) {
                return Err(Error::Config(format!(
                    "transition {} dropout {} outside [0, 1)",
                    i + 1,
                    stage.dropout
                )));
            }
            out.push((
                unit,
                TransitionSpec {
                    c_in: c,
                    c_out,
                    pool: stage.pool,
                    dropout_rate: stage.dropout,
                    activation: self.activation,
                },
            ));
            c = c_out;
        }
        Ok(out)
    }

    /// Checks every width and extent invariant.
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.input.contains(&0) {
            return Err(Error::Config("input extent must be positive".into()));
        }
        if self.stages.is_empty() {
            return Err(Error::Config(
                "architecture needs at least one stage".into(),
            ));
        }
        self.stage_specs()?;
        self.spatial_extents()?;
        Ok(())
    }

    /// Square spatial extent after the input, the stem, and each transition.
    pub fn spatial_extents(&self) -> Result<Vec<usize>> {
        let mut h = self.input[1].min(self.input[2]);
        let mut out = vec![h, h];
        for (i, stage) in self.stages.iter().enumerate() {
            if stage.pool {
                if h < TRANSITION_POOL_WINDOW.0 {
                    return Err(Error::Config(format!(
                        "transition {} cannot pool a {h}x{h} map",
                        i + 1
                    )));
                }
                h = (h - TRANSITION_POOL_WINDOW.0) / TRANSITION_POOL_STRIDE.0 + 1;
            }
            out.push(h);
        }
        Ok(out)
    }

    /// Extents where the map size changes: input, stem, each pooling
    /// transition, and 1 after global pooling.
    pub fn spatial_trace(&self) -> Result<Vec<usize>> {
        let ext = self.spatial_extents()?;
        let mut trace = vec![ext[0], ext[1]];
        for (stage, &h) in self.stages.iter().zip(&ext[2..]) {
            if stage.pool {
                trace.push(h);
            }
        }
        trace.push(1);
        Ok(trace)
    }

    /// Trainable parameter count computed from the widths alone.
    pub fn param_count(&self) -> Result<usize> {
        let conv = |k: usize, c_in: usize, f: usize| k * k * c_in * f + f;
        let mut total = 0;
        let mut c = self.input[0];
        for w in self.stem_widths() {
            total += conv(3, c, w) + 2 * w;
            c = w;
        }
        for (unit, trans) in self.stage_specs()? {
            for (kernel, f) in [(1, unit.alloc[0]), (3, unit.alloc[1])] {
                total += if self.variant.recurrent() {
                    kernel * kernel * (unit.c_in * f + f * f) + f
                } else {
                    conv(kernel, unit.c_in, f) + unit.k * conv(kernel, f, f)
                };
            }
            total += conv(1, unit.c_in, unit.alloc[2]);
            total += 2 * unit.c_in;
            total += conv(3, trans.c_in, trans.c_out);
            c = trans.c_out;
        }
        total += c * self.classes + self.classes;
        Ok(total)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("arch spec serializes")
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }
}
