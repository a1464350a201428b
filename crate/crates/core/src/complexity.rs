//! Coupling-input element counts for flat versus hierarchical flows.
//!
//! A flow over `2^ℓ·N` elements with one coupling per level processes
//! `ℓ·2^ℓ·N` elements without splitting and `(2^{ℓ+1} − 2)·N` when half the
//! channels leave at every level. The counts here come from real flows, not
//! from the formulas.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::{Flow, FlowConfig};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComplexityRow {
    pub levels: usize,
    pub base: usize,
    pub flat: usize,
    pub hierarchical: usize,
    pub flat_formula: usize,
    pub hierarchical_formula: usize,
    pub measured_ratio: f64,
    pub analytic_ratio: f64,
}

impl ComplexityRow {
    pub fn matches_formulas(&self) -> bool {
        self.flat == self.flat_formula && self.hierarchical == self.hierarchical_formula
    }
}

fn counting_flow(levels: usize, base: usize, split: bool) -> Result<Flow<f64>> {
    let channels = (1usize << levels) * base;
    let mut cfg = FlowConfig::new([channels, 1, 1], levels, 1);
    cfg.squeeze = false;
    cfg.split = split;
    cfg.kernel = 1;
    cfg.hidden = 1;
    Flow::new("count", &cfg, &mut ChaCha8Rng::seed_from_u64(0))
}

/// Counts for `levels` levels over `2^levels · base` input elements.
pub fn measure(levels: usize, base: usize) -> Result<ComplexityRow> {
    if levels == 0 || levels > 20 {
        return Err(Error::config(format!("levels must be in 1..=20, got {levels}")));
    }
    if base == 0 {
        return Err(Error::config("base size must be ≥ 1"));
    }
    let flat = counting_flow(levels, base, false)?.coupling_input_elements();
    let hierarchical = counting_flow(levels, base, true)?.coupling_input_elements();
    let p = 1usize << levels;
    let flat_formula = levels * p * base;
    let hierarchical_formula = (2 * p - 2) * base;
    Ok(ComplexityRow {
        levels,
        base,
        flat,
        hierarchical,
        flat_formula,
        hierarchical_formula,
        measured_ratio: flat as f64 / hierarchical as f64,
        analytic_ratio: (levels * p) as f64 / (2 * p - 2) as f64,
    })
}

pub fn report(levels: impl IntoIterator<Item = usize>, base: usize) -> Result<Vec<ComplexityRow>> {
    levels.into_iter().map(|l| measure(l, base)).collect()
}

pub fn report_csv(rows: &[ComplexityRow]) -> String {
    let mut out = String::from(
        "levels,base,flat,hierarchical,flat_formula,hierarchical_formula,measured_ratio,analytic_ratio\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.levels,
            r.base,
            r.flat,
            r.hierarchical,
            r.flat_formula,
            r.hierarchical_formula,
            r.measured_ratio,
            r.analytic_ratio
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_level_has_nothing_to_split() {
        let r = measure(1, 1).unwrap();
        assert_eq!((r.flat, r.hierarchical, r.measured_ratio), (2, 2, 1.0));
    }

    #[test]
    fn three_levels_unit_base() {
        let r = measure(3, 1).unwrap();
        assert_eq!((r.flat, r.hierarchical), (24, 14));
        assert!((r.measured_ratio - 24.0 / 14.0).abs() < 1e-15);
    }

    #[test]
    fn counts_match_formulas() {
        for l in 1..=6 {
            for base in [1, 3] {
                let r = measure(l, base).unwrap();
                assert!(r.matches_formulas(), "{r:?}");
                assert_eq!(r.measured_ratio, r.analytic_ratio);
            }
        }
        assert!(measure(0, 1).is_err());
    }
}
