use std::fmt;

use crate::arch::{
    build_model, equivalent_spec, relative_gap, ArchSpec, LayerInfo, Ratio, Variant,
    PARITY_TOLERANCE,
};
use crate::error::Result;

/// Parameter count the reference network is usually quoted at.
pub const REFERENCE_SCALE: f64 = 3.5e6;

#[derive(Clone, Debug, PartialEq)]
pub struct VariantSummary {
    pub variant: Variant,
    pub width: Ratio,
    pub params: usize,
    /// `(k, count)` for k ∈ {0, 1, 2}.
    pub counts_by_k: Vec<(usize, usize)>,
    pub layers: Vec<LayerInfo>,
    pub trace: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub variants: Vec<VariantSummary>,
}

impl Summary {
    /// Pairs of variants whose counts differ by more than the parity
    /// tolerance.
    pub fn parity_violations(&self) -> Vec<(Variant, Variant, f64)> {
        let mut out = Vec::new();
        for (i, a) in self.variants.iter().enumerate() {
            for b in &self.variants[i + 1..] {
                let gap = relative_gap(a.params, b.params).max(relative_gap(b.params, a.params));
                if gap > PARITY_TOLERANCE {
                    out.push((a.variant, b.variant, gap));
                }
            }
        }
        out
    }

    pub fn get(&self, variant: Variant) -> Option<&VariantSummary> {
        self.variants.iter().find(|v| v.variant == variant)
    }
}

/// Counts, layer lists and spatial traces of all four variants built from
/// `arch`, with untied-chain variants width-calibrated.
pub fn summarize(arch: &ArchSpec) -> Result<Summary> {
    let base = arch.clone().with_variant(Variant::Irrcnn);
    let variants = Variant::ALL
        .iter()
        .map(|&v| {
            let spec = equivalent_spec(&base, v)?;
            let model = build_model::<f32>(&spec)?;
            let counts_by_k = (0..=2)
                .map(|k| Ok((k, spec.clone().with_k(k).param_count()?)))
                .collect::<Result<Vec<_>>>()?;
            Ok(VariantSummary {
                variant: v,
                width: spec.width,
                params: spec.param_count()?,
                counts_by_k,
                layers: model.layers().to_vec(),
                trace: spec.spatial_trace()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Summary { variants })
}

fn trace_string(trace: &[usize]) -> String {
    trace
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(" -> ")
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<8} {:>10} {:>12} {:>12} {:>12} {:>12}",
            "variant", "width", "params", "k=0", "k=1", "k=2"
        )?;
        for v in &self.variants {
            write!(
                f,
                "{:<8} {:>10} {:>12}",
                v.variant.name(),
                v.width.to_string(),
                v.params
            )?;
            for (_, c) in &v.counts_by_k {
                write!(f, " {c:>12}")?;
            }
            writeln!(f)?;
        }
        if let Some(first) = self.variants.first() {
            writeln!(f, "spatial trace: {}", trace_string(&first.trace))?;
            writeln!(
                f,
                "IRRCNN count vs ~{:.1}M: {:.3}M",
                REFERENCE_SCALE / 1e6,
                first.params as f64 / 1e6
            )?;
        }
        let violations = self.parity_violations();
        if violations.is_empty() {
            writeln!(
                f,
                "parity: all variants within {:.0}%",
                PARITY_TOLERANCE * 100.0
            )?;
        }
        for (a, b, gap) in violations {
            writeln!(
                f,
                "PARITY VIOLATION: {a} vs {b} differ by {:.2}%",
                gap * 100.0
            )?;
        }
        for v in &self.variants {
            writeln!(f, "\n{} layers:", v.variant)?;
            for l in &v.layers {
                let shape = format!("{}x{}x{}", l.output[0], l.output[1], l.output[2]);
                writeln!(
                    f,
                    "  {:<20} {:<16} {:>12} {:>10}",
                    l.name, l.kind, shape, l.params
                )?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cifar_summary() {
        let s = summarize(&ArchSpec::cifar(Variant::Irrcnn, 10)).unwrap();
        assert!(s.parity_violations().is_empty());
        let irrcnn = s.get(Variant::Irrcnn).unwrap();
        assert!(irrcnn.counts_by_k.iter().all(|&(_, c)| c == irrcnn.params));
        assert_eq!(irrcnn.trace, [32, 32, 15, 7, 1]);
        let text = s.to_string();
        assert!(text.contains("32 -> 32 -> 15 -> 7 -> 1"));
        assert!(text.contains("parity: all variants within 2%"));
    }
}
