use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::vocab::TokenId;
use crate::diffcore::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Shape of the shared causal self-attention backbone.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_hidden: usize,
    pub max_len: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { d_model: 32, n_layers: 2, n_heads: 2, d_hidden: 64, max_len: 128 }
    }
}

impl BackboneConfig {
    /// A very small configuration for gradient checks and unit tests.
    pub fn tiny() -> Self {
        Self { d_model: 8, n_layers: 2, n_heads: 2, d_hidden: 12, max_len: 32 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!("d_model {} must be a positive multiple of n_heads {}", self.d_model, self.n_heads)));
        }
        if self.n_layers == 0 || self.d_hidden == 0 || self.max_len < 2 {
            return Err(Error::Config("n_layers, d_hidden must be positive and max_len >= 2".into()));
        }
        Ok(())
    }
}

pub(crate) const PREFIX: &str = "backbone.";

fn normal(rng: &mut Rng, shape: Vec<usize>, std: f64) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect())
}

pub(crate) fn init(store: &mut ParamStore, cfg: &BackboneConfig, vocab_size: usize, rng: &mut Rng) -> Result<()> {
    cfg.validate()?;
    let d = cfg.d_model;
    let h = cfg.d_hidden;
    let proj = 1.0 / (d as f64).sqrt();
    let out = proj / (2.0 * cfg.n_layers as f64).sqrt();
    store.insert("backbone.tok_emb", normal(rng, vec![vocab_size, d], 0.5)?)?;
    store.insert("backbone.pos_emb", normal(rng, vec![cfg.max_len, d], 0.5)?)?;
    for l in 0..cfg.n_layers {
        let p = format!("backbone.layer{l}");
        store.insert(format!("{p}.ln1.g"), Tensor::filled(vec![d], 1.0)?)?;
        store.insert(format!("{p}.ln1.b"), Tensor::zeros(vec![d])?)?;
        for w in ["wq", "wk", "wv"] {
            store.insert(format!("{p}.attn.{w}"), normal(rng, vec![d, d], proj)?)?;
        }
        store.insert(format!("{p}.attn.wo"), normal(rng, vec![d, d], out)?)?;
        store.insert(format!("{p}.ln2.g"), Tensor::filled(vec![d], 1.0)?)?;
        store.insert(format!("{p}.ln2.b"), Tensor::zeros(vec![d])?)?;
        store.insert(format!("{p}.mlp.w1"), normal(rng, vec![d, h], proj)?)?;
        store.insert(format!("{p}.mlp.b1"), Tensor::zeros(vec![h])?)?;
        store.insert(format!("{p}.mlp.w2"), normal(rng, vec![h, d], out / ((h as f64) / (d as f64)).sqrt())?)?;
        store.insert(format!("{p}.mlp.b2"), Tensor::zeros(vec![d])?)?;
    }
    store.insert("backbone.ln_f.g", Tensor::filled(vec![d], 1.0)?)?;
    store.insert("backbone.ln_f.b", Tensor::zeros(vec![d])?)?;
    Ok(())
}

pub(crate) fn check_ids(ids: &[TokenId], vocab_size: usize, max_len: usize) -> Result<()> {
    if ids.len() > max_len {
        return Err(Error::ContextOverflow { len: ids.len(), max: max_len });
    }
    if let Some(bad) = ids.iter().find(|&&i| i as usize >= vocab_size) {
        return Err(Error::UnknownToken(format!("#{bad}")));
    }
    Ok(())
}

fn layer_norm(tape: &mut Tape, params: &ParamStore, x: Var, prefix: &str) -> Result<Var> {
    let g = tape.param(params, &format!("{prefix}.g"))?;
    let b = tape.param(params, &format!("{prefix}.b"))?;
    let n = tape.layer_norm(x);
    let s = tape.mul_row(n, g)?;
    tape.add_row(s, b)
}

/// Hidden states `[T, d_model]` for the token sequence `ids`.
pub(crate) fn forward(tape: &mut Tape, params: &ParamStore, cfg: &BackboneConfig, ids: &[TokenId]) -> Result<Var> {
    let vocab_size = params.get("backbone.tok_emb")?.shape()[0];
    check_ids(ids, vocab_size, cfg.max_len)?;
    let t = ids.len();
    let d = cfg.d_model;
    let dh = d / cfg.n_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let tok_table = tape.param(params, "backbone.tok_emb")?;
    let pos_table = tape.param(params, "backbone.pos_emb")?;
    let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let tok = tape.embedding(tok_table, &idx)?;
    let positions: Vec<usize> = (0..t).collect();
    let pos = tape.embedding(pos_table, &positions)?;
    let mut x = tape.add(tok, pos)?;

    for l in 0..cfg.n_layers {
        let p = format!("backbone.layer{l}");
        let h = layer_norm(tape, params, x, &format!("{p}.ln1"))?;
        let wq = tape.param(params, &format!("{p}.attn.wq"))?;
        let wk = tape.param(params, &format!("{p}.attn.wk"))?;
        let wv = tape.param(params, &format!("{p}.attn.wv"))?;
        let wo = tape.param(params, &format!("{p}.attn.wo"))?;
        let q = tape.matmul(h, wq)?;
        let k = tape.matmul(h, wk)?;
        let v = tape.matmul(h, wv)?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for hd in 0..cfg.n_heads {
            let (qh, kh, vh) = if cfg.n_heads == 1 {
                (q, k, v)
            } else {
                (tape.slice_cols(q, hd * dh, dh)?, tape.slice_cols(k, hd * dh, dh)?, tape.slice_cols(v, hd * dh, dh)?)
            };
            let scores = tape.matmul_t(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let masked = tape.causal_mask(scores)?;
            let attn = tape.softmax(masked);
            heads.push(tape.matmul(attn, vh)?);
        }
        let merged = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        let attn_out = tape.matmul(merged, wo)?;
        x = tape.add(x, attn_out)?;

        let h2 = layer_norm(tape, params, x, &format!("{p}.ln2"))?;
        let w1 = tape.param(params, &format!("{p}.mlp.w1"))?;
        let b1 = tape.param(params, &format!("{p}.mlp.b1"))?;
        let w2 = tape.param(params, &format!("{p}.mlp.w2"))?;
        let b2 = tape.param(params, &format!("{p}.mlp.b2"))?;
        let a = tape.matmul(h2, w1)?;
        let a = tape.add_row(a, b1)?;
        let a = tape.tanh(a);
        let m = tape.matmul(a, w2)?;
        let m = tape.add_row(m, b2)?;
        x = tape.add(x, m)?;
    }
    layer_norm(tape, params, x, "backbone.ln_f")
}
