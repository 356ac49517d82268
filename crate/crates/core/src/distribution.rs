//! EDU-level discourse distributions.
//!
//! The 3-D parse tensor is averaged over its second axis (the EDUs a unit
//! supports) to give an importance index per EDU and relation channel. The
//! four variants differ in whether cells are thresholded to {0, 1} first and
//! whether the relation axis is averaged away as well.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::parser_io::ParseOutput;
use crate::scalar::Field;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    /// Binary, label-agnostic.
    #[serde(rename = "b_wo")]
    BinaryWithoutLabels,
    /// Binary, label-aware.
    #[serde(rename = "b_w")]
    BinaryWithLabels,
    /// Probabilistic, label-agnostic.
    #[serde(rename = "p_wo")]
    ProbWithoutLabels,
    /// Probabilistic, label-aware.
    #[serde(rename = "p_w")]
    ProbWithLabels,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::BinaryWithoutLabels,
        Variant::BinaryWithLabels,
        Variant::ProbWithoutLabels,
        Variant::ProbWithLabels,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::BinaryWithoutLabels => "b_wo",
            Variant::BinaryWithLabels => "b_w",
            Variant::ProbWithoutLabels => "p_wo",
            Variant::ProbWithLabels => "p_w",
        }
    }

    pub fn is_binary(self) -> bool {
        matches!(self, Variant::BinaryWithoutLabels | Variant::BinaryWithLabels)
    }

    pub fn label_aware(self) -> bool {
        matches!(self, Variant::BinaryWithLabels | Variant::ProbWithLabels)
    }

    /// The variant with the other binarization choice and the same labelling.
    pub fn counterpart(self) -> Variant {
        match self {
            Variant::BinaryWithoutLabels => Variant::ProbWithoutLabels,
            Variant::BinaryWithLabels => Variant::ProbWithLabels,
            Variant::ProbWithoutLabels => Variant::BinaryWithoutLabels,
            Variant::ProbWithLabels => Variant::BinaryWithLabels,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.tag() == s)
            .ok_or_else(|| config_err(format!("unknown variant `{s}` (expected b_wo, b_w, p_wo or p_w)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeOptions<T> {
    /// Average over all `n` columns instead of the `n - 1` off-diagonal ones.
    pub include_diagonal: bool,
    /// Threshold merged indices instead of raw cells.
    pub binarize_after_merge: bool,
    pub threshold: T,
}

impl<T: Field> Default for MergeOptions<T> {
    fn default() -> Self {
        MergeOptions {
            include_diagonal: false,
            binarize_after_merge: false,
            threshold: T::one() / T::from_count(2),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RstDistribution<T = f64> {
    pub variant: Variant,
    /// `n_edu × k` for label-aware variants, `n_edu × 1` otherwise.
    pub values: Array2<T>,
    pub n_edu: usize,
    pub k_relations: usize,
}

impl<T: Field> RstDistribution<T> {
    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    pub fn map<U: Field>(&self, f: impl Fn(&T) -> U) -> RstDistribution<U> {
        RstDistribution {
            variant: self.variant,
            values: self.values.map(f),
            n_edu: self.n_edu,
            k_relations: self.k_relations,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "variant": self.variant.tag(),
            "shape": [self.values.nrows(), self.values.ncols()],
            "values": self.values.iter().map(Field::to_f64_lossy).collect::<Vec<_>>(),
        })
    }
}

impl RstDistribution<f64> {
    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        #[derive(Deserialize)]
        struct Repr {
            variant: Variant,
            shape: [usize; 2],
            values: Vec<f64>,
            #[serde(default)]
            k_relations: Option<usize>,
        }
        let repr: Repr = serde_json::from_value(value.clone()).map_err(|e| Error::Format(e.to_string()))?;
        let values = Array2::from_shape_vec((repr.shape[0], repr.shape[1]), repr.values)
            .map_err(|e| Error::Format(e.to_string()))?;
        let k_relations = repr.k_relations.unwrap_or(values.ncols());
        Ok(RstDistribution {
            variant: repr.variant,
            n_edu: values.nrows(),
            values,
            k_relations,
        })
    }
}

/// Mean support per EDU and channel: `out[i][k] = mean_{j != i} probs[i][j][k]`.
pub fn importance_index<T: Field>(parse: &ParseOutput<T>) -> Result<Array2<T>> {
    importance_index_with(parse, false)
}

pub fn importance_index_with<T: Field>(parse: &ParseOutput<T>, include_diagonal: bool) -> Result<Array2<T>> {
    let n = parse.n_edu;
    if n < 2 {
        return Err(Error::Degenerate(format!(
            "document `{}` has {n} EDU(s); at least 2 are needed",
            parse.doc_id()
        )));
    }
    let denom = T::from_count(if include_diagonal { n } else { n - 1 });
    let mut out = Array2::from_elem((n, parse.k_relations), T::zero());
    for ((i, j, k), p) in parse.probs.indexed_iter() {
        if i != j {
            out[[i, k]] = out[[i, k]].clone() + p.clone();
        }
    }
    out.mapv_inplace(|s| s / denom.clone());
    Ok(out)
}

fn check_threshold<T: Field>(threshold: &T) -> Result<()> {
    if threshold > &T::zero() && threshold <= &T::one() {
        Ok(())
    } else {
        Err(config_err(format!("threshold {threshold:?} must lie in (0, 1]")))
    }
}

/// Map each off-diagonal cell to 1 when `>= threshold`, else 0.
pub fn binarize_tensor<T: Field>(parse: &ParseOutput<T>, threshold: &T) -> Result<ParseOutput<T>> {
    check_threshold(threshold)?;
    let mut out = parse.clone();
    for ((i, j, _), p) in out.probs.indexed_iter_mut() {
        *p = if i != j && &*p >= threshold { T::one() } else { T::zero() };
    }
    Ok(out)
}

/// Average over the relation axis: `n_edu × k → n_edu × 1`.
pub fn collapse_labels<T: Field>(values: &Array2<T>) -> Array2<T> {
    let k = values.ncols();
    let denom = T::from_count(k.max(1));
    let sums = values.map_axis(Axis(1), |row| {
        row.iter().cloned().fold(T::zero(), |acc, v| acc + v) / denom.clone()
    });
    sums.insert_axis(Axis(1))
}

pub fn make_variant<T: Field>(parse: &ParseOutput<T>, variant: Variant) -> Result<RstDistribution<T>> {
    make_variant_with(parse, variant, &MergeOptions::default())
}

pub fn make_variant_with<T: Field>(
    parse: &ParseOutput<T>,
    variant: Variant,
    options: &MergeOptions<T>,
) -> Result<RstDistribution<T>> {
    let with_labels = if !variant.is_binary() {
        importance_index_with(parse, options.include_diagonal)?
    } else if options.binarize_after_merge {
        check_threshold(&options.threshold)?;
        importance_index_with(parse, options.include_diagonal)?.mapv(|v| {
            if v >= options.threshold {
                T::one()
            } else {
                T::zero()
            }
        })
    } else {
        importance_index_with(&binarize_tensor(parse, &options.threshold)?, options.include_diagonal)?
    };
    let values = if variant.label_aware() {
        with_labels
    } else {
        collapse_labels(&with_labels)
    };
    Ok(RstDistribution {
        variant,
        values,
        n_edu: parse.n_edu,
        k_relations: parse.k_relations,
    })
}

/// Parse a variant tag and build it; unknown tags are a config error.
pub fn make_variant_tagged<T: Field>(parse: &ParseOutput<T>, tag: &str) -> Result<RstDistribution<T>> {
    make_variant(parse, tag.parse()?)
}
