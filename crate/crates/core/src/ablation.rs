//! Control γ patterns and parser-output masking.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::gamma::GammaMatrix;
use crate::parser_io::ParseOutput;
use crate::scalar::Scalar;
use crate::util::{derive_seed, rng_from_seed, round_half_up};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatternKind {
    Even,
    Odd,
    Random,
}

impl fmt::Display for PatternKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PatternKind::Even => "even",
            PatternKind::Odd => "odd",
            PatternKind::Random => "random",
        })
    }
}

impl FromStr for PatternKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "even" => Ok(PatternKind::Even),
            "odd" => Ok(PatternKind::Odd),
            "random" => Ok(PatternKind::Random),
            other => Err(config_err(format!("unknown pattern kind `{other}`"))),
        }
    }
}

/// Fixed γ over the whole `seq_len × d_model` matrix. Parity is taken on the
/// row-major flattened index; random entries are i.i.d. uniform on `[0, 1)`.
pub fn gamma_pattern<T: Scalar>(kind: PatternKind, seq_len: usize, d_model: usize, seed: u64) -> Result<GammaMatrix<T>> {
    if seq_len == 0 || d_model == 0 {
        return Err(config_err("gamma pattern needs positive dimensions"));
    }
    let values = match kind {
        PatternKind::Even | PatternKind::Odd => {
            let on = usize::from(kind == PatternKind::Odd);
            Array2::from_shape_fn((seq_len, d_model), |(i, j)| {
                if (i * d_model + j) % 2 == on {
                    T::one()
                } else {
                    T::zero()
                }
            })
        }
        PatternKind::Random => {
            let mut rng = rng_from_seed(derive_seed(seed, 0x6A77));
            Array2::from_shape_simple_fn((seq_len, d_model), || T::from_f64_lossy(rng.random::<f64>()))
        }
    };
    Ok(GammaMatrix {
        values,
        doc_region: (0, seq_len),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub fraction: f64,
    pub seed: u64,
}

impl MaskSpec {
    pub fn check(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fraction) {
            return Err(config_err(format!("mask fraction must lie in [0, 1], got {}", self.fraction)));
        }
        Ok(())
    }

    pub fn count(&self, cells: usize) -> usize {
        round_half_up(self.fraction * cells as f64).min(cells)
    }
}

/// Flat indices of the cells replaced by [`mask_parse`]. Selection is a
/// prefix of one seeded permutation, so a larger fraction under the same
/// seed masks a superset of cells with the same replacement values.
pub fn masked_cells(n_cells: usize, spec: &MaskSpec) -> Result<Vec<usize>> {
    spec.check()?;
    let mut rng = rng_from_seed(derive_seed(spec.seed, 0x3A5C));
    let mut order: Vec<usize> = (0..n_cells).collect();
    order.shuffle(&mut rng);
    order.truncate(spec.count(n_cells));
    Ok(order)
}

fn replacement_values(count: usize, spec: &MaskSpec) -> Vec<f64> {
    let mut rng = rng_from_seed(derive_seed(spec.seed, 0x7A1E));
    (0..count).map(|_| rng.random::<f64>()).collect()
}

/// Replace `round(fraction × off-diagonal cells)` distinct off-diagonal
/// cells with fresh uniform draws.
pub fn mask_parse<T: Scalar>(parse: &ParseOutput<T>, spec: &MaskSpec) -> Result<ParseOutput<T>> {
    let (n, _, k) = parse.probs.dim();
    let cells: Vec<(usize, usize, usize)> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).flat_map(move |j| (0..k).map(move |c| (i, j, c))))
        .collect();
    let chosen = masked_cells(cells.len(), spec)?;
    let values = replacement_values(chosen.len(), spec);
    let mut out = parse.clone();
    for (idx, v) in chosen.into_iter().zip(values) {
        out.probs[cells[idx]] = T::from_f64_lossy(v);
    }
    Ok(out)
}

/// Mask the document rows of a γ matrix directly, for comparison with
/// parse-level masking.
pub fn mask_gamma<T: Scalar>(gamma: &GammaMatrix<T>, spec: &MaskSpec) -> Result<GammaMatrix<T>> {
    let (start, end) = gamma.doc_region;
    let d = gamma.d_model();
    let n_cells = (end - start) * d;
    let chosen = masked_cells(n_cells, spec)?;
    let values = replacement_values(chosen.len(), spec);
    let mut out = gamma.clone();
    for (idx, v) in chosen.into_iter().zip(values) {
        out.values[[start + idx / d, idx % d]] = T::from_f64_lossy(v);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser_io::{validate, EduSegmentation, LabelMap};
    use ndarray::array;

    fn parse3() -> ParseOutput<f64> {
        let labels = [("x", "X"), ("y", "Y")].iter().map(|(r, g)| (r.to_string(), g.to_string())).collect();
        let mut p = ParseOutput::zeros_with(EduSegmentation::from_lengths("d", &[2, 2, 2]), LabelMap::new(2, labels).unwrap());
        p.probs[[0, 1, 0]] = 0.9;
        p
    }

    #[test]
    fn parity_patterns() {
        let even = gamma_pattern::<f64>(PatternKind::Even, 2, 2, 0).unwrap();
        assert_eq!(even.values, array![[1.0, 0.0], [1.0, 0.0]]);
        let odd = gamma_pattern::<f64>(PatternKind::Odd, 2, 2, 0).unwrap();
        assert_eq!(odd.values, array![[0.0, 1.0], [0.0, 1.0]]);
        let odd3 = gamma_pattern::<f64>(PatternKind::Odd, 3, 3, 0).unwrap();
        let even3 = gamma_pattern::<f64>(PatternKind::Even, 3, 3, 0).unwrap();
        assert!((&odd3.values + &even3.values).iter().all(|&v| v == 1.0));
        assert_eq!(even3.values[[1, 0]], 0.0);
    }

    #[test]
    fn random_pattern_reproducible() {
        let a = gamma_pattern::<f64>(PatternKind::Random, 4, 3, 9).unwrap();
        assert_eq!(a, gamma_pattern::<f64>(PatternKind::Random, 4, 3, 9).unwrap());
        assert!(a.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!("diagonal".parse::<PatternKind>().is_err());
    }

    #[test]
    fn masking_counts() {
        let p = parse3();
        assert_eq!(mask_parse(&p, &MaskSpec { fraction: 0.0, seed: 1 }).unwrap(), p);
        let m = mask_parse(&p, &MaskSpec { fraction: 0.25, seed: 1 }).unwrap();
        let changed = p.probs.iter().zip(m.probs.iter()).filter(|(a, b)| a != b).count();
        assert_eq!(changed, 3);
        assert!(validate(&m).is_empty());
        let full = mask_parse(&p, &MaskSpec { fraction: 1.0, seed: 1 }).unwrap();
        for i in 0..3 {
            assert_eq!(full.probs[[i, i, 0]], 0.0);
        }
        assert!(mask_parse(&p, &MaskSpec { fraction: 1.5, seed: 1 }).is_err());
        let half = mask_parse(&p, &MaskSpec { fraction: 0.5, seed: 1 }).unwrap();
        for ((a, b), orig) in m.probs.iter().zip(half.probs.iter()).zip(p.probs.iter()) {
            assert!(a == orig || a == b);
        }
    }

    #[test]
    fn gamma_masking_stays_in_region() {
        let g = GammaMatrix {
            values: Array2::<f64>::zeros((5, 2)),
            doc_region: (1, 4),
        };
        let m = mask_gamma(&g, &MaskSpec { fraction: 0.5, seed: 2 }).unwrap();
        assert!(m.values.row(0).iter().all(|&v| v == 0.0));
        assert!(m.values.row(4).iter().all(|&v| v == 0.0));
        assert_eq!(m.values.iter().filter(|&&v| v != 0.0).count(), 3);
    }
}
