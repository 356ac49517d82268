//! Low-rank adapters with discourse-weighted inputs.
//!
//! A frozen projection `W` (`A × B`) is adapted as
//!
//! ```text
//! h = x·W + (α/r)·((x ⊙ (1 + γ))·W_down)·W_up
//! ```
//!
//! where `W_down` is `A × r`, `W_up` is `r × B` and `γ ≥ 0` has the shape of
//! `x`. With `γ = 0` this is plain LoRA. The base path always sees the
//! unmodulated input.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, LinalgScalar};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{config_err, shape_err, Error, Result};
use crate::gamma::GammaMatrix;
use crate::scalar::{Field, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub target_layers: Vec<String>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 8,
            alpha: 32.0,
            dropout: 0.1,
            target_layers: Vec::new(),
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn check(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(config_err("LoRA rank must be at least 1"));
        }
        if !(self.alpha > 0.0) {
            return Err(config_err(format!("LoRA alpha must be positive, got {}", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config_err(format!("LoRA dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    /// `r < min(A, B)` for a layer of shape `A × B`.
    pub fn check_dims(&self, name: &str, a: usize, b: usize) -> Result<()> {
        if self.rank >= a.min(b) {
            return Err(config_err(format!(
                "rank {} is not below min({a}, {b}) for layer `{name}`",
                self.rank
            )));
        }
        Ok(())
    }
}

/// Trainable adapter parameters `r·(A + B)` summed over layers.
pub fn trainable_param_count(config: &LoraConfig, layer_dims: &[(usize, usize)]) -> Result<usize> {
    config.check()?;
    layer_dims
        .iter()
        .enumerate()
        .map(|(i, &(a, b))| {
            config.check_dims(&format!("#{i}"), a, b)?;
            Ok(config.rank * (a + b))
        })
        .sum()
}

/// Whether the adapter path applies dropout.
#[derive(Debug)]
pub enum Mode<'a, R> {
    Eval,
    Train(&'a mut R),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T> {
    pub base_weight: Array2<T>,
    pub w_down: Array2<T>,
    pub w_up: Array2<T>,
    pub config: LoraConfig,
}

/// Gaussian init for the down projection; the up projection starts at zero.
pub fn init_down<T: Scalar, R: Rng>(a: usize, rank: usize, rng: &mut R) -> Array2<T> {
    let std = 1.0 / (a as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn((a, rank), || T::from_f64_lossy(normal.sample(rng)))
}

impl<T: Scalar> LoraAdapter<T> {
    pub fn new<R: Rng>(base_weight: Array2<T>, config: LoraConfig, rng: &mut R) -> Result<Self> {
        config.check()?;
        let (a, b) = base_weight.dim();
        config.check_dims("adapter", a, b)?;
        let w_down = init_down(a, config.rank, rng);
        let w_up = Array2::zeros((config.rank, b));
        Ok(LoraAdapter {
            base_weight,
            w_down,
            w_up,
            config,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.base_weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.base_weight.ncols()
    }

    pub fn scale(&self) -> T {
        T::from_f64_lossy(self.config.scale())
    }

    /// `(α/r)·W_down·W_up`.
    pub fn delta_weight(&self) -> Array2<T> {
        self.w_down.dot(&self.w_up) * self.scale()
    }

    pub fn merged_weight(&self) -> Array2<T> {
        &self.base_weight + &self.delta_weight()
    }

    /// Adapter-path term for an already modulated input.
    pub fn adapter_path(&self, modulated: &Array2<T>) -> Array2<T> {
        low_rank_apply(modulated, &self.w_down, &self.w_up, self.scale())
    }

    fn check_input(&self, x: &Array2<T>) -> Result<()> {
        if x.ncols() != self.in_dim() {
            return Err(shape_err(format!(
                "input width {} does not match adapter input dim {}",
                x.ncols(),
                self.in_dim()
            )));
        }
        if self.w_down.dim() != (self.in_dim(), self.config.rank) || self.w_up.dim() != (self.config.rank, self.out_dim()) {
            return Err(shape_err("adapter matrices disagree with base weight and rank"));
        }
        Ok(())
    }

    pub fn forward_vanilla<R: Rng>(&self, x: &Array2<T>, mode: Mode<'_, R>) -> Result<Array2<T>> {
        self.check_input(x)?;
        let adapter_in = apply_dropout(x.clone(), self.config.dropout, mode);
        Ok(x.dot(&self.base_weight) + self.adapter_path(&adapter_in))
    }

    pub fn forward_rst<R: Rng>(&self, x: &Array2<T>, gamma: &GammaMatrix<T>, mode: Mode<'_, R>) -> Result<Array2<T>> {
        self.check_input(x)?;
        let modulated = modulate(x, &gamma.values)?;
        let adapter_in = apply_dropout(modulated, self.config.dropout, mode);
        Ok(x.dot(&self.base_weight) + self.adapter_path(&adapter_in))
    }

    /// Gradients of `sum(d_out ⊙ forward_rst(x, γ))` with respect to
    /// `(W_down, W_up)`, in eval mode.
    pub fn rst_gradients(
        &self,
        x: &Array2<T>,
        gamma: &GammaMatrix<T>,
        d_out: &Array2<T>,
    ) -> Result<(Array2<T>, Array2<T>)> {
        self.check_input(x)?;
        if d_out.dim() != (x.nrows(), self.out_dim()) {
            return Err(shape_err("output gradient shape mismatch"));
        }
        let modulated = modulate(x, &gamma.values)?;
        let hidden = modulated.dot(&self.w_down);
        let scale = self.scale();
        let d_up = hidden.t().dot(d_out) * scale;
        let d_hidden = d_out.dot(&self.w_up.t()) * scale;
        let d_down = modulated.t().dot(&d_hidden);
        Ok((d_down, d_up))
    }

    pub fn to_container(&self, name: &str) -> Container {
        let mut c = Container::new(
            "lora-adapter",
            serde_json::json!({ "config": self.config, "layers": [name] }),
        );
        c.push(format!("{name}.base"), &self.base_weight);
        c.push(format!("{name}.down"), &self.w_down);
        c.push(format!("{name}.up"), &self.w_up);
        c
    }

    pub fn from_container(c: &Container, name: &str) -> Result<Self> {
        let config: LoraConfig = serde_json::from_value(c.meta["config"].clone())
            .map_err(|e| Error::Format(format!("adapter config: {e}")))?;
        let get = |suffix: &str| {
            c.get::<T>(&format!("{name}.{suffix}"))
                .ok_or_else(|| Error::Format(format!("missing tensor `{name}.{suffix}`")))
        };
        Ok(LoraAdapter {
            base_weight: get("base")?,
            w_down: get("down")?,
            w_up: get("up")?,
            config,
        })
    }
}

/// `scale · (input·down)·up`.
pub fn low_rank_apply<T: Field + LinalgScalar>(input: &Array2<T>, down: &Array2<T>, up: &Array2<T>, scale: T) -> Array2<T> {
    input.dot(down).dot(up).mapv_into(|v| v * scale)
}

/// `x ⊙ (1 + γ)`; γ must match `x` and be non-negative.
pub fn modulate<T: Field + Copy>(x: &Array2<T>, gamma: &Array2<T>) -> Result<Array2<T>> {
    if gamma.dim() != x.dim() {
        return Err(shape_err(format!(
            "gamma shape {:?} does not match input shape {:?}",
            gamma.dim(),
            x.dim()
        )));
    }
    if gamma.iter().any(|g| !(*g >= T::zero())) {
        return Err(Error::Contract("gamma entries must be non-negative".into()));
    }
    let mut out = x.clone();
    out.zip_mut_with(gamma, |v, g| *v = *v * (T::one() + *g));
    Ok(out)
}

/// Inverted dropout; identity in eval mode or at rate 0.
pub fn apply_dropout<T: Scalar, R: Rng>(mut x: Array2<T>, rate: f64, mode: Mode<'_, R>) -> Array2<T> {
    if let Mode::Train(rng) = mode {
        if rate > 0.0 {
            let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
            x.mapv_inplace(|v| if rng.random::<f64>() < rate { T::zero() } else { v * keep });
        }
    }
    x
}

/// Save several named adapters into one container.
pub fn save_adapters<T: Scalar>(path: impl AsRef<Path>, adapters: &BTreeMap<String, LoraAdapter<T>>) -> Result<()> {
    let config = adapters.values().next().map(|a| a.config.clone()).unwrap_or_default();
    let names: Vec<&String> = adapters.keys().collect();
    let mut c = Container::new("lora-adapter", serde_json::json!({ "config": config, "layers": names }));
    for (name, a) in adapters {
        c.push(format!("{name}.base"), &a.base_weight);
        c.push(format!("{name}.down"), &a.w_down);
        c.push(format!("{name}.up"), &a.w_up);
    }
    c.save(path)
}

pub fn load_adapters<T: Scalar>(path: impl AsRef<Path>) -> Result<BTreeMap<String, LoraAdapter<T>>> {
    let c = Container::load(path)?;
    if c.kind != "lora-adapter" {
        return Err(Error::Format(format!("expected a lora-adapter container, found `{}`", c.kind)));
    }
    let names: Vec<String> = serde_json::from_value(c.meta["layers"].clone())
        .map_err(|e| Error::Format(format!("adapter layer list: {e}")))?;
    names
        .into_iter()
        .map(|n| LoraAdapter::from_container(&c, &n).map(|a| (n, a)))
        .collect()
}
