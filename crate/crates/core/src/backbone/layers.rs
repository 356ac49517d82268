//! Layer primitives with explicit forward caches and backward passes.

use ndarray::{s, Array2, Axis, Zip};
use rand::Rng;

use super::params::{Grads, ParamId, ParamStore};
use crate::scalar::Scalar;

/// Per-call settings shared by every layer of one forward pass.
pub struct Ctx<'a, T, R> {
    pub params: &'a ParamStore<T>,
    pub lora_scale: T,
    pub dropout: f64,
    pub rng: Option<&'a mut R>,
}

impl<T: Scalar, R: Rng> Ctx<'_, T, R> {
    fn dropout_mask(&mut self, dim: (usize, usize)) -> Option<Array2<T>> {
        let rate = self.dropout;
        let rng = self.rng.as_mut()?;
        if rate <= 0.0 {
            return None;
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
        Some(Array2::from_shape_simple_fn(dim, || {
            if rng.random::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        }))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LowRankIds {
    pub down: ParamId,
    pub up: ParamId,
}

/// Affine projection `x·W + b`, optionally with a low-rank adapter whose
/// input is modulated by `(1 + γ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
    pub lora: Option<LowRankIds>,
    pub gamma_target: bool,
}

pub struct ProjCache<T> {
    input: Array2<T>,
    /// Elementwise factor applied to the input on the adapter path.
    factor: Option<Array2<T>>,
    adapter_in: Option<Array2<T>>,
    hidden: Option<Array2<T>>,
}

impl Projection {
    pub fn forward<T: Scalar, R: Rng>(
        &self,
        x: &Array2<T>,
        gamma: Option<&Array2<T>>,
        ctx: &mut Ctx<'_, T, R>,
    ) -> (Array2<T>, ProjCache<T>) {
        let p = ctx.params;
        let mut y = x.dot(p.get(self.weight));
        y += &p.get(self.bias).row(0);
        let mut cache = ProjCache {
            input: x.clone(),
            factor: None,
            adapter_in: None,
            hidden: None,
        };
        if let Some(lr) = &self.lora {
            let mut factor: Option<Array2<T>> = match (self.gamma_target, gamma) {
                (true, Some(g)) => Some(g.mapv(|v| T::one() + v)),
                _ => None,
            };
            if let Some(mask) = ctx.dropout_mask(x.dim()) {
                factor = Some(match factor {
                    Some(f) => f * &mask,
                    None => mask,
                });
            }
            let adapter_in = match &factor {
                Some(f) => x * f,
                None => x.clone(),
            };
            let hidden = adapter_in.dot(p.get(lr.down));
            y.scaled_add(ctx.lora_scale, &hidden.dot(p.get(lr.up)));
            cache.factor = factor;
            cache.adapter_in = Some(adapter_in);
            cache.hidden = Some(hidden);
        }
        (y, cache)
    }

    pub fn backward<T: Scalar>(
        &self,
        dy: &Array2<T>,
        cache: ProjCache<T>,
        params: &ParamStore<T>,
        lora_scale: T,
        grads: &mut Grads<T>,
    ) -> Array2<T> {
        let mut dx = dy.dot(&params.get(self.weight).t());
        if let Some(g) = grads.slot(self.weight) {
            g.scaled_add(T::one(), &cache.input.t().dot(dy));
        }
        if let Some(g) = grads.slot(self.bias) {
            let sums = dy.sum_axis(Axis(0));
            let mut row = g.row_mut(0);
            row += &sums;
        }
        if let Some(lr) = &self.lora {
            let hidden = cache.hidden.expect("adapter cache");
            let adapter_in = cache.adapter_in.expect("adapter cache");
            if let Some(g) = grads.slot(lr.up) {
                g.scaled_add(lora_scale, &hidden.t().dot(dy));
            }
            let d_hidden = dy.dot(&params.get(lr.up).t()) * lora_scale;
            if let Some(g) = grads.slot(lr.down) {
                g.scaled_add(T::one(), &adapter_in.t().dot(&d_hidden));
            }
            let mut d_in = d_hidden.dot(&params.get(lr.down).t());
            if let Some(f) = &cache.factor {
                d_in *= f;
            }
            dx += &d_in;
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub struct LnCache<T> {
    normed: Array2<T>,
    inv_std: Vec<T>,
}

const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn forward<T: Scalar>(&self, x: &Array2<T>, params: &ParamStore<T>) -> (Array2<T>, LnCache<T>) {
        let d = T::from_count(x.ncols());
        let eps = T::from_f64_lossy(LN_EPS);
        let mut normed = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in normed.rows_mut() {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| *v * *v).sum::<T>() / d;
            let inv = T::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| v * inv);
            inv_std.push(inv);
        }
        let gain = params.get(self.gain).row(0);
        let bias = params.get(self.bias).row(0);
        let mut y = &normed * &gain;
        y += &bias;
        (y, LnCache { normed, inv_std })
    }

    pub fn backward<T: Scalar>(
        &self,
        dy: &Array2<T>,
        cache: LnCache<T>,
        params: &ParamStore<T>,
        grads: &mut Grads<T>,
    ) -> Array2<T> {
        if let Some(g) = grads.slot(self.gain) {
            let s = (dy * &cache.normed).sum_axis(Axis(0));
            let mut row = g.row_mut(0);
            row += &s;
        }
        if let Some(g) = grads.slot(self.bias) {
            let s = dy.sum_axis(Axis(0));
            let mut row = g.row_mut(0);
            row += &s;
        }
        let gain = params.get(self.gain).row(0);
        let d = T::from_count(dy.ncols());
        let mut dnormed = dy * &gain;
        for ((mut row, xhat), inv) in dnormed.rows_mut().into_iter().zip(cache.normed.rows()).zip(cache.inv_std) {
            let mean_d = row.sum() / d;
            let mean_dx = row.iter().zip(xhat.iter()).map(|(a, b)| *a * *b).sum::<T>() / d;
            Zip::from(&mut row).and(&xhat).for_each(|v, &xh| {
                *v = (*v - mean_d - xh * mean_dx) * inv;
            });
        }
        dnormed
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub q: Projection,
    pub k: Projection,
    pub v: Projection,
    pub o: Projection,
    pub heads: usize,
    pub causal: bool,
}

pub struct AttnCache<T> {
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    probs: Vec<Array2<T>>,
    cq: ProjCache<T>,
    ck: ProjCache<T>,
    cv: ProjCache<T>,
    co: ProjCache<T>,
    self_attention: bool,
}

impl Attention {
    pub fn projections(&self) -> [&Projection; 4] {
        [&self.q, &self.k, &self.v, &self.o]
    }

    pub fn projections_mut(&mut self) -> [&mut Projection; 4] {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.o]
    }

    /// `gamma` modulates the Q/K/V inputs of self-attention; it is ignored for
    /// cross-attention, whose query and memory streams differ.
    pub fn forward<T: Scalar, R: Rng>(
        &self,
        x: &Array2<T>,
        memory: Option<&Array2<T>>,
        gamma: Option<&Array2<T>>,
        ctx: &mut Ctx<'_, T, R>,
    ) -> (Array2<T>, AttnCache<T>) {
        let self_attention = memory.is_none();
        let kv_in = memory.unwrap_or(x);
        let g = if self_attention { gamma } else { None };
        let (q, cq) = self.q.forward(x, g, ctx);
        let (k, ck) = self.k.forward(kv_in, g, ctx);
        let (v, cv) = self.v.forward(kv_in, g, ctx);
        let n_q = q.nrows();
        let n_k = k.nrows();
        let d = q.ncols();
        let dh = d / self.heads;
        let scale = T::one() / T::from_count(dh).sqrt();
        let mut concat = Array2::<T>::zeros((n_q, d));
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
                let limit = if self.causal { (i + 1).min(n_k) } else { n_k };
                let max = row.iter().take(limit).fold(T::neg_infinity(), |m, &v| m.max(v));
                let mut total = T::zero();
                for (j, v) in row.iter_mut().enumerate() {
                    if j < limit {
                        *v = (*v - max).exp();
                        total += *v;
                    } else {
                        *v = T::zero();
                    }
                }
                row.mapv_inplace(|v| v / total);
            }
            concat.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            probs.push(scores);
        }
        let (y, co) = self.o.forward(&concat, None, ctx);
        (
            y,
            AttnCache {
                q,
                k,
                v,
                probs,
                cq,
                ck,
                cv,
                co,
                self_attention,
            },
        )
    }

    /// Returns `(d_x, d_memory)`; `d_memory` is `None` for self-attention.
    pub fn backward<T: Scalar>(
        &self,
        dy: &Array2<T>,
        cache: AttnCache<T>,
        params: &ParamStore<T>,
        lora_scale: T,
        grads: &mut Grads<T>,
    ) -> (Array2<T>, Option<Array2<T>>) {
        let d_concat = self.o.backward(dy, cache.co, params, lora_scale, grads);
        let d = cache.q.ncols();
        let dh = d / self.heads;
        let scale = T::one() / T::from_count(dh).sqrt();
        let mut dq = Array2::<T>::zeros(cache.q.dim());
        let mut dk = Array2::<T>::zeros(cache.k.dim());
        let mut dv = Array2::<T>::zeros(cache.v.dim());
        for (h, a) in cache.probs.iter().enumerate() {
            let cols = s![.., h * dh..(h + 1) * dh];
            let d_out = d_concat.slice(cols);
            let da = d_out.dot(&cache.v.slice(cols).t());
            dv.slice_mut(cols).assign(&a.t().dot(&d_out));
            let mut ds = &da * a;
            for (mut row, arow) in ds.rows_mut().into_iter().zip(a.rows()) {
                let dot = row.sum();
                Zip::from(&mut row).and(&arow).for_each(|v, &p| *v = *v - p * dot);
            }
            ds.mapv_inplace(|v| v * scale);
            dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
        }
        let mut dx = self.q.backward(&dq, cache.cq, params, lora_scale, grads);
        let mut dkv = self.k.backward(&dk, cache.ck, params, lora_scale, grads);
        dkv += &self.v.backward(&dv, cache.cv, params, lora_scale, grads);
        if cache.self_attention {
            dx += &dkv;
            (dx, None)
        } else {
            (dx, Some(dkv))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub up: Projection,
    pub down: Projection,
}

pub struct FfnCache<T> {
    pre: Array2<T>,
    cu: ProjCache<T>,
    cd: ProjCache<T>,
}

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64_lossy(0.044715);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64_lossy(0.044715);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x)
}

impl FeedForward {
    pub fn forward<T: Scalar, R: Rng>(
        &self,
        x: &Array2<T>,
        gamma: Option<&Array2<T>>,
        ctx: &mut Ctx<'_, T, R>,
    ) -> (Array2<T>, FfnCache<T>) {
        let (pre, cu) = self.up.forward(x, gamma, ctx);
        let act = pre.mapv(gelu);
        let (y, cd) = self.down.forward(&act, None, ctx);
        (y, FfnCache { pre, cu, cd })
    }

    pub fn backward<T: Scalar>(
        &self,
        dy: &Array2<T>,
        cache: FfnCache<T>,
        params: &ParamStore<T>,
        lora_scale: T,
        grads: &mut Grads<T>,
    ) -> Array2<T> {
        let mut d_act = self.down.backward(dy, cache.cd, params, lora_scale, grads);
        Zip::from(&mut d_act).and(&cache.pre).for_each(|d, &p| *d = *d * gelu_grad(p));
        self.up.backward(&d_act, cache.cu, params, lora_scale, grads)
    }
}
