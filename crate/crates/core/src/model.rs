//! Encoder-only patch Transformer with a residual-block patch embedding,
//! learnable positional embeddings, pre-norm attention blocks and a
//! residual-block quantile head. One forward pass yields a `[T × K]` grid of
//! normalized quantiles.

use patchfm_tensor::{Graph, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{patchify, WindowedSample};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(rename = "T")]
    pub context_length: usize,
    #[serde(rename = "L")]
    pub patch_size: usize,
    pub n_layer: usize,
    #[serde(rename = "d")]
    pub d_model: usize,
    pub head_dim: usize,
    pub ffn_mult: usize,
    /// Quantile levels, strictly increasing in (0, 1).
    pub levels: Vec<f64>,
}

impl Default for ModelConfig {
    /// Full-size architecture (the desk-scale runs override most fields).
    fn default() -> Self {
        Self {
            context_length: 8192,
            patch_size: 16,
            n_layer: 20,
            d_model: 1024,
            head_dim: 64,
            ffn_mult: 4,
            levels: quantile_preset(99).expect("preset"),
        }
    }
}

impl ModelConfig {
    pub fn n_patches(&self) -> usize {
        self.context_length / self.patch_size
    }

    pub fn n_heads(&self) -> usize {
        self.d_model / self.head_dim
    }

    pub fn n_quantiles(&self) -> usize {
        self.levels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::config("model.L", "must be positive"));
        }
        if self.context_length == 0 || self.context_length % self.patch_size != 0 {
            return Err(Error::config(
                "model.T",
                format!("{} is not a positive multiple of L={}", self.context_length, self.patch_size),
            ));
        }
        if self.head_dim == 0 || self.d_model == 0 || self.d_model % self.head_dim != 0 {
            return Err(Error::config(
                "model.d",
                format!("{} is not a positive multiple of head_dim={}", self.d_model, self.head_dim),
            ));
        }
        if self.ffn_mult == 0 {
            return Err(Error::config("model.ffn_mult", "must be positive"));
        }
        if self.levels.is_empty() {
            return Err(Error::config("model.levels", "need at least one quantile level"));
        }
        if self.levels.iter().any(|q| !(*q > 0.0 && *q < 1.0)) {
            return Err(Error::config("model.levels", "levels must lie in (0, 1)"));
        }
        if self.levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("model.levels", "levels must be strictly increasing"));
        }
        Ok(())
    }

    /// Errors with the first field that differs from `expected`.
    pub fn check_matches(&self, expected: &ModelConfig) -> Result<()> {
        let fields: [(&str, bool); 7] = [
            ("model.T", self.context_length == expected.context_length),
            ("model.L", self.patch_size == expected.patch_size),
            ("model.n_layer", self.n_layer == expected.n_layer),
            ("model.d", self.d_model == expected.d_model),
            ("model.head_dim", self.head_dim == expected.head_dim),
            ("model.ffn_mult", self.ffn_mult == expected.ffn_mult),
            ("model.levels", self.levels == expected.levels),
        ];
        match fields.iter().find(|(_, ok)| !ok) {
            Some((field, _)) => Err(Error::config(*field, "checkpoint does not match the requested configuration")),
            None => Ok(()),
        }
    }
}

/// Quantile level presets for K ∈ {9, 21, 99}.
pub fn quantile_preset(k: usize) -> Option<Vec<f64>> {
    let pct = |p: &[u32]| p.iter().map(|&x| f64::from(x) / 100.0).collect();
    match k {
        9 => Some(pct(&(1..=9).map(|i| i * 10).collect::<Vec<_>>())),
        21 => {
            let mut p = vec![1, 5];
            p.extend((2..=18).map(|i| i * 5));
            p.extend([95, 99]);
            Some(pct(&p))
        }
        99 => Some(pct(&(1..=99).collect::<Vec<_>>())),
        _ => None,
    }
}

// ---- weights -------------------------------------------------------------

/// Affine map `x · weight + bias` with `weight: [in × out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<P> {
    pub weight: P,
    pub bias: P,
}

/// `res(x) + out(sigmoid(hidden(x)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock<P> {
    pub res: Linear<P>,
    pub hidden: Linear<P>,
    pub out: Linear<P>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm<P> {
    pub gamma: P,
    pub beta: P,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<P> {
    pub attn_norm: Norm<P>,
    pub wq: Linear<P>,
    pub wk: Linear<P>,
    pub wv: Linear<P>,
    pub wo: Linear<P>,
    pub ffn_norm: Norm<P>,
    pub ffn_up: Linear<P>,
    pub ffn_down: Linear<P>,
}

/// All learnable parameters. `Weights<Tensor>` holds values; the same layout
/// over [`Var`] holds their handles on a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<P> {
    pub embed: ResidualBlock<P>,
    /// `[N × d]`
    pub pos: P,
    pub layers: Vec<EncoderLayer<P>>,
    pub final_norm: Norm<P>,
    pub head: ResidualBlock<P>,
}

pub type ModelWeights = Weights<Tensor>;

trait MapParams<P> {
    type Out<Q>;
    fn map_params<'a, Q>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a P) -> Q) -> Self::Out<Q>;
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(&str, &'a mut P));
}

impl<P> MapParams<P> for Linear<P> {
    type Out<Q> = Linear<Q>;
    fn map_params<'a, Q>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a P) -> Q) -> Linear<Q> {
        Linear {
            weight: f(&format!("{prefix}.weight"), &self.weight),
            bias: f(&format!("{prefix}.bias"), &self.bias),
        }
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(&str, &'a mut P)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

impl<P> MapParams<P> for Norm<P> {
    type Out<Q> = Norm<Q>;
    fn map_params<'a, Q>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a P) -> Q) -> Norm<Q> {
        Norm {
            gamma: f(&format!("{prefix}.gamma"), &self.gamma),
            beta: f(&format!("{prefix}.beta"), &self.beta),
        }
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(&str, &'a mut P)) {
        f(&format!("{prefix}.gamma"), &mut self.gamma);
        f(&format!("{prefix}.beta"), &mut self.beta);
    }
}

impl<P> MapParams<P> for ResidualBlock<P> {
    type Out<Q> = ResidualBlock<Q>;
    fn map_params<'a, Q>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a P) -> Q) -> ResidualBlock<Q> {
        ResidualBlock {
            res: self.res.map_params(&format!("{prefix}.res"), f),
            hidden: self.hidden.map_params(&format!("{prefix}.hidden"), f),
            out: self.out.map_params(&format!("{prefix}.out"), f),
        }
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(&str, &'a mut P)) {
        self.res.visit_mut(&format!("{prefix}.res"), f);
        self.hidden.visit_mut(&format!("{prefix}.hidden"), f);
        self.out.visit_mut(&format!("{prefix}.out"), f);
    }
}

impl<P> MapParams<P> for EncoderLayer<P> {
    type Out<Q> = EncoderLayer<Q>;
    fn map_params<'a, Q>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a P) -> Q) -> EncoderLayer<Q> {
        EncoderLayer {
            attn_norm: self.attn_norm.map_params(&format!("{prefix}.attn_norm"), f),
            wq: self.wq.map_params(&format!("{prefix}.wq"), f),
            wk: self.wk.map_params(&format!("{prefix}.wk"), f),
            wv: self.wv.map_params(&format!("{prefix}.wv"), f),
            wo: self.wo.map_params(&format!("{prefix}.wo"), f),
            ffn_norm: self.ffn_norm.map_params(&format!("{prefix}.ffn_norm"), f),
            ffn_up: self.ffn_up.map_params(&format!("{prefix}.ffn_up"), f),
            ffn_down: self.ffn_down.map_params(&format!("{prefix}.ffn_down"), f),
        }
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(&str, &'a mut P)) {
        self.attn_norm.visit_mut(&format!("{prefix}.attn_norm"), f);
        self.wq.visit_mut(&format!("{prefix}.wq"), f);
        self.wk.visit_mut(&format!("{prefix}.wk"), f);
        self.wv.visit_mut(&format!("{prefix}.wv"), f);
        self.wo.visit_mut(&format!("{prefix}.wo"), f);
        self.ffn_norm.visit_mut(&format!("{prefix}.ffn_norm"), f);
        self.ffn_up.visit_mut(&format!("{prefix}.ffn_up"), f);
        self.ffn_down.visit_mut(&format!("{prefix}.ffn_down"), f);
    }
}

impl<P> Weights<P> {
    /// Applies `f` to every parameter in canonical order.
    pub fn map<'a, Q>(&'a self, mut f: impl FnMut(&str, &'a P) -> Q) -> Weights<Q> {
        let f: &mut dyn FnMut(&str, &'a P) -> Q = &mut f;
        Weights {
            embed: self.embed.map_params("embed", f),
            pos: f("pos", &self.pos),
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| l.map_params(&format!("layers.{i}"), f))
                .collect(),
            final_norm: self.final_norm.map_params("final_norm", f),
            head: self.head.map_params("head", f),
        }
    }

    /// Visits every parameter mutably, in the same order as [`Weights::map`].
    pub fn visit_mut<'a>(&'a mut self, mut f: impl FnMut(&str, &'a mut P)) {
        let f: &mut dyn FnMut(&str, &'a mut P) = &mut f;
        self.embed.visit_mut("embed", f);
        f("pos", &mut self.pos);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("layers.{i}"), f);
        }
        self.final_norm.visit_mut("final_norm", f);
        self.head.visit_mut("head", f);
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.map(|n, _| names.push(n.to_string()));
        names
    }
}

impl ModelWeights {
    /// Random initialization: linear maps uniform in ±1/√fan_in, positional
    /// table N(0, 0.02²), norms at identity.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut w = Self::zeros(cfg);
        let pos_dist = Normal::new(0.0, 0.02).expect("valid normal");
        // Biases share the bound of the preceding weight's fan-in.
        let mut fan_in = 1;
        w.visit_mut(|name, t| {
            if name == "pos" {
                for x in t.data_mut() {
                    *x = pos_dist.sample(rng);
                }
            } else if name.ends_with(".weight") || name.ends_with(".bias") {
                if name.ends_with(".weight") {
                    fan_in = t.shape()[0];
                }
                let bound = 1.0 / (fan_in as f64).sqrt();
                for x in t.data_mut() {
                    *x = rng.gen_range(-bound..bound);
                }
            }
        });
        Ok(w)
    }

    /// Parameters of the right shapes, all zero except identity norms.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        param_shapes(cfg).map(|name, shape| {
            if name.ends_with(".gamma") {
                Tensor::full(shape, 1.0)
            } else {
                Tensor::zeros(shape)
            }
        })
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.map(|_, t| n += t.numel());
        n
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.map(|n, t| out.push((n.to_string(), t)));
        out
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.map(|_, t| ok &= t.all_finite());
        ok
    }

    /// Registers every parameter as a leaf on `g`.
    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> Weights<Var> {
        self.map(|_, t| g.leaf(t.clone(), requires_grad))
    }
}

/// Shape of every parameter, in canonical order.
pub fn param_shapes(cfg: &ModelConfig) -> Weights<Vec<usize>> {
    let d = cfg.d_model;
    let l = cfg.patch_size;
    let lk = l.saturating_mul(cfg.n_quantiles());
    let lin = |i: usize, o: usize| Linear {
        weight: vec![i, o],
        bias: vec![o],
    };
    let norm = || Norm {
        gamma: vec![d],
        beta: vec![d],
    };
    let block = |i: usize, o: usize| ResidualBlock {
        res: lin(i, o),
        hidden: lin(i, o),
        out: lin(o, o),
    };
    let ffn = cfg.ffn_mult.saturating_mul(d);
    Weights {
        embed: block(l.saturating_mul(2), d),
        pos: vec![cfg.n_patches(), d],
        layers: (0..cfg.n_layer)
            .map(|_| EncoderLayer {
                attn_norm: norm(),
                wq: lin(d, d),
                wk: lin(d, d),
                wv: lin(d, d),
                wo: lin(d, d),
                ffn_norm: norm(),
                ffn_up: lin(d, ffn),
                ffn_down: lin(ffn, d),
            })
            .collect(),
        final_norm: norm(),
        head: block(d, lk),
    }
}

// ---- forward -------------------------------------------------------------

/// A batch of patched samples ready for the embedding.
#[derive(Debug, Clone)]
pub struct ModelInput {
    pub batch: usize,
    /// `[B·N × 2L]`: L zero-filled normalized values followed by L mask bits.
    pub tokens: Tensor,
    /// `[B·N]`, false for fully padded patches.
    pub key_keep: Vec<bool>,
}

impl ModelInput {
    pub fn from_samples(samples: &[&WindowedSample], cfg: &ModelConfig) -> Result<Self> {
        let l = cfg.patch_size;
        let n = cfg.n_patches();
        let mut tokens = Vec::with_capacity(samples.len() * n * 2 * l);
        let mut key_keep = Vec::with_capacity(samples.len() * n);
        for (b, s) in samples.iter().enumerate() {
            if s.len() != cfg.context_length {
                return Err(Error::Shape(format!(
                    "sample {b} has length {} but the model expects {}",
                    s.len(),
                    cfg.context_length
                )));
            }
            let p = patchify(&s.x_norm, &s.masks, l)?;
            if p.pad_patch.iter().all(|x| *x) {
                return Err(Error::Mask(format!("sample {b} consists only of padding patches")));
            }
            for i in 0..n {
                tokens.extend_from_slice(&p.values[i * l..(i + 1) * l]);
                tokens.extend(p.mask[i * l..(i + 1) * l].iter().map(|m| if *m { 1.0 } else { 0.0 }));
                key_keep.push(!p.pad_patch[i]);
            }
        }
        Ok(Self {
            batch: samples.len(),
            tokens: Tensor::new(vec![samples.len() * n, 2 * l], tokens)?,
            key_keep,
        })
    }
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[B·T × K]` normalized quantiles.
    pub q_norm: Var,
    /// Per layer, the `[B·H × N × N]` attention weights.
    pub attention: Vec<Var>,
}

fn linear(g: &mut Graph, x: Var, lin: &Linear<Var>) -> Result<Var> {
    let y = g.matmul(x, lin.weight)?;
    Ok(g.add(y, lin.bias)?)
}

/// `res(x) + out(sigmoid(hidden(x)))` over the rows of `x`.
pub fn residual_block_graph(g: &mut Graph, x: Var, w: &ResidualBlock<Var>) -> Result<Var> {
    let skip = linear(g, x, &w.res)?;
    let h = linear(g, x, &w.hidden)?;
    let h = g.sigmoid(h)?;
    let h = linear(g, h, &w.out)?;
    Ok(g.add(skip, h)?)
}

/// Value-level residual block, for inspection and tests.
pub fn residual_block(x: &Tensor, w: &ResidualBlock<Tensor>) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = ResidualBlock {
        res: Linear { weight: g.constant(w.res.weight.clone()), bias: g.constant(w.res.bias.clone()) },
        hidden: Linear { weight: g.constant(w.hidden.weight.clone()), bias: g.constant(w.hidden.bias.clone()) },
        out: Linear { weight: g.constant(w.out.weight.clone()), bias: g.constant(w.out.bias.clone()) },
    };
    let y = residual_block_graph(&mut g, xv, &wv)?;
    Ok(g.value(y).clone())
}

/// Patch embedding plus positional embedding: `[B·N × d]`.
pub fn embed_graph(g: &mut Graph, w: &Weights<Var>, cfg: &ModelConfig, input: &ModelInput) -> Result<Var> {
    let n = cfg.n_patches();
    let d = cfg.d_model;
    let x = g.constant(input.tokens.clone());
    let h = residual_block_graph(g, x, &w.embed)?;
    let h = g.reshape(h, &[input.batch, n * d])?;
    let pos = g.reshape(w.pos, &[n * d])?;
    let h = g.add(h, pos)?;
    Ok(g.reshape(h, &[input.batch * n, d])?)
}

/// The pre-norm Transformer stack and final norm. Fully padded patches are
/// excluded as attention keys.
pub fn encode_graph(
    g: &mut Graph,
    h: Var,
    w: &Weights<Var>,
    cfg: &ModelConfig,
    input: &ModelInput,
) -> Result<(Var, Vec<Var>)> {
    let b = input.batch;
    let n = cfg.n_patches();
    let d = cfg.d_model;
    let heads = cfg.n_heads();
    let hd = cfg.head_dim;
    for s in 0..b {
        if input.key_keep[s * n..(s + 1) * n].iter().all(|k| !k) {
            return Err(Error::Mask(format!("sample {s}: every patch is padding")));
        }
    }
    let keep: Vec<bool> = (0..b * heads * n * n)
        .map(|i| {
            let sample = i / (heads * n * n);
            let key = i % n;
            input.key_keep[sample * n + key]
        })
        .collect();

    let mut h = h;
    let mut attention = Vec::with_capacity(w.layers.len());
    for layer in &w.layers {
        let a = g.layer_norm(h, layer.attn_norm.gamma, layer.attn_norm.beta, LN_EPS)?;
        let split = |g: &mut Graph, x: Var| -> Result<Var> {
            let x = g.reshape(x, &[b, n, heads, hd])?;
            let x = g.permute(x, &[0, 2, 1, 3])?;
            Ok(g.reshape(x, &[b * heads, n, hd])?)
        };
        let q = linear(g, a, &layer.wq)?;
        let q = split(g, q)?;
        let k = linear(g, a, &layer.wk)?;
        let k = split(g, k)?;
        let v = linear(g, a, &layer.wv)?;
        let v = split(g, v)?;
        let scores = g.matmul_t(q, k, false, true)?;
        let scores = g.scale(scores, 1.0 / (hd as f64).sqrt())?;
        let attn = g.softmax_lastdim(scores, Some(&keep))?;
        attention.push(attn);
        let ctx = g.matmul(attn, v)?;
        let ctx = g.reshape(ctx, &[b, heads, n, hd])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b * n, d])?;
        let o = linear(g, ctx, &layer.wo)?;
        h = g.add(h, o)?;

        let a = g.layer_norm(h, layer.ffn_norm.gamma, layer.ffn_norm.beta, LN_EPS)?;
        let u = linear(g, a, &layer.ffn_up)?;
        let u = g.gelu(u)?;
        let u = linear(g, u, &layer.ffn_down)?;
        h = g.add(h, u)?;
    }
    let z = g.layer_norm(h, w.final_norm.gamma, w.final_norm.beta, LN_EPS)?;
    Ok((z, attention))
}

/// Quantile head: each patch embedding becomes `L × K` values; the result is
/// the `[B·T × K]` concatenation over patches.
pub fn quantile_head_graph(g: &mut Graph, z: Var, w: &Weights<Var>, cfg: &ModelConfig, batch: usize) -> Result<Var> {
    let out = residual_block_graph(g, z, &w.head)?;
    Ok(g.reshape(out, &[batch * cfg.context_length, cfg.n_quantiles()])?)
}

/// Full single-pass forward on a graph.
pub fn forward_graph(g: &mut Graph, w: &Weights<Var>, cfg: &ModelConfig, input: &ModelInput) -> Result<ForwardOutput> {
    let h = embed_graph(g, w, cfg, input)?;
    let (z, attention) = encode_graph(g, h, w, cfg, input)?;
    let q_norm = quantile_head_graph(g, z, w, cfg, input.batch)?;
    Ok(ForwardOutput { q_norm, attention })
}

/// Normalized quantiles `[T × K]` for one sample.
pub fn forward(sample: &WindowedSample, weights: &ModelWeights, cfg: &ModelConfig) -> Result<Tensor> {
    forward_batch(&[sample], weights, cfg)
}

/// Normalized quantiles `[B·T × K]` for a batch.
pub fn forward_batch(samples: &[&WindowedSample], weights: &ModelWeights, cfg: &ModelConfig) -> Result<Tensor> {
    let input = ModelInput::from_samples(samples, cfg)?;
    let mut g = Graph::new();
    let w = weights.bind(&mut g, false);
    let out = forward_graph(&mut g, &w, cfg, &input)?;
    Ok(g.value(out.q_norm).clone())
}

/// Sorts each row of a row-major `[rows × k]` grid ascending, removing
/// quantile crossings.
pub fn sort_quantile_rows(values: &mut [f64], k: usize) {
    for row in values.chunks_mut(k) {
        row.sort_by(f64::total_cmp);
    }
}
