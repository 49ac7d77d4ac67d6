//! Width calibration so the untied-chain controls match the recurrent
//! network's parameter budget.

use crate::arch::model::{build_model, Model};
use crate::arch::spec::{ArchSpec, Ratio, Variant};
use crate::error::{Error, Result};
use crate::tensor::Element;

/// Denominator of the searched width multipliers.
pub const CALIBRATION_DENOMINATOR: u32 = 1000;

/// Largest pairwise relative parameter-count gap accepted as parity.
pub const PARITY_TOLERANCE: f64 = 0.02;

/// Result of a width search for one variant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Calibration {
    pub variant: Variant,
    pub width: Ratio,
    pub params: usize,
    pub reference: usize,
}

impl Calibration {
    /// `|params − reference| / reference`.
    pub fn discrepancy(&self) -> f64 {
        relative_gap(self.params, self.reference)
    }
}

pub fn relative_gap(a: usize, reference: usize) -> f64 {
    if reference == 0 {
        return if a == 0 { 0.0 } else { f64::INFINITY };
    }
    (a as f64 - reference as f64).abs() / reference as f64
}

/// Finds the multiplier `num/1000` whose `variant` network is closest in
/// parameter count to the IRRCNN network described by `arch` (at `arch`'s
/// own width). Ties go to the narrower network.
pub fn calibrate_width(arch: &ArchSpec, variant: Variant) -> Result<Calibration> {
    let reference = arch.clone().with_variant(Variant::Irrcnn).param_count()?;
    let base = arch.width;
    let mut best: Option<Calibration> = None;
    for num in 1..=4 * CALIBRATION_DENOMINATOR {
        let width = Ratio::new(base.num * num, base.den * CALIBRATION_DENOMINATOR)?;
        let candidate = arch.clone().with_variant(variant).with_width(width);
        let Ok(params) = candidate.param_count() else {
            continue;
        };
        let gap = params.abs_diff(reference);
        if best.is_none_or(|b| gap < b.params.abs_diff(reference)) {
            best = Some(Calibration {
                variant,
                width: reduce(width),
                params,
                reference,
            });
        }
        if params > 2 * reference {
            break;
        }
    }
    best.ok_or_else(|| Error::Config(format!("no legal width found for {variant}")))
}

fn reduce(r: Ratio) -> Ratio {
    fn gcd(a: u32, b: u32) -> u32 {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    let g = gcd(r.num, r.den);
    Ratio {
        num: r.num / g,
        den: r.den / g,
    }
}

/// The `variant` counterpart of `arch`, width-calibrated against the IRRCNN
/// reference. The IRCNN has the same parameters as the IRRCNN and keeps the
/// reference widths.
pub fn equivalent_spec(arch: &ArchSpec, variant: Variant) -> Result<ArchSpec> {
    match variant {
        Variant::Irrcnn | Variant::Ircnn => Ok(arch.clone().with_variant(variant)),
        Variant::Ein | Variant::Eirn => {
            let c = calibrate_width(arch, variant)?;
            Ok(arch.clone().with_variant(variant).with_width(c.width))
        }
    }
}

/// Builds the width-calibrated `variant` counterpart of `arch`.
pub fn build_equivalent<T: Element>(arch: &ArchSpec, variant: Variant) -> Result<Model<T>> {
    build_model(&equivalent_spec(arch, variant)?)
}
