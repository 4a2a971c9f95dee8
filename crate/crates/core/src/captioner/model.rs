//! The trainable captioner: cell embeddings, one causal self-attention layer
//! over the token prefix, additive attention from each decoder state to the
//! cell features, and a tanh hidden layer feeding the vocabulary softmax.
//!
//! Gradients are hand-derived; [`ModelParams::backward`] consumes the cache
//! produced by [`ModelParams::run`].

use ndarray::{s, Array2, Array3, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::types::SceneImage;
use crate::error::{Error, Result};
use crate::vocab::TokenId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub num_objects: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    #[serde(default = "defaults::embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "defaults::num_heads")]
    pub num_heads: usize,
    #[serde(default = "defaults::attention_dim")]
    pub attention_dim: usize,
    #[serde(default = "defaults::hidden_dim")]
    pub hidden_dim: usize,
    #[serde(default = "defaults::max_len")]
    pub max_len: usize,
}

mod defaults {
    pub fn embed_dim() -> usize {
        32
    }
    pub fn num_heads() -> usize {
        2
    }
    pub fn attention_dim() -> usize {
        32
    }
    pub fn hidden_dim() -> usize {
        32
    }
    pub fn max_len() -> usize {
        20
    }
}

impl ModelConfig {
    pub fn new(vocab_size: usize, num_objects: usize, grid_height: usize, grid_width: usize) -> Self {
        ModelConfig {
            vocab_size,
            num_objects,
            grid_height,
            grid_width,
            embed_dim: defaults::embed_dim(),
            num_heads: defaults::num_heads(),
            attention_dim: defaults::attention_dim(),
            hidden_dim: defaults::hidden_dim(),
            max_len: defaults::max_len(),
        }
    }

    pub fn num_cells(&self) -> usize {
        self.grid_height * self.grid_width
    }

    /// Background, mask, and one id per object.
    pub fn num_cell_ids(&self) -> usize {
        self.num_objects + 2
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.vocab_size", self.vocab_size),
            ("model.grid_height", self.grid_height),
            ("model.grid_width", self.grid_width),
            ("model.embed_dim", self.embed_dim),
            ("model.num_heads", self.num_heads),
            ("model.attention_dim", self.attention_dim),
            ("model.hidden_dim", self.hidden_dim),
            ("model.max_len", self.max_len),
        ];
        for (field, value) in positive {
            if value == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(
                "model.num_heads",
                format!("must divide embed_dim {}", self.embed_dim),
            ));
        }
        Ok(())
    }
}

/// Canonical parameter names, in enumeration order.
pub const PARAM_NAMES: [&str; 17] = [
    "cell_embed",
    "cell_pos",
    "tok_embed",
    "tok_pos",
    "w_query",
    "w_key",
    "w_value",
    "w_attn_out",
    "att_cell",
    "att_state",
    "att_bias",
    "att_score",
    "w_hidden_state",
    "w_hidden_context",
    "b_hidden",
    "w_vocab",
    "b_vocab",
];

/// All trainable arrays of the captioner. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    pub cell_embed: Array2<f64>,
    pub cell_pos: Array2<f64>,
    /// One extra row at index `vocab_size` is the start-of-sequence input.
    pub tok_embed: Array2<f64>,
    pub tok_pos: Array2<f64>,
    pub w_query: Array2<f64>,
    pub w_key: Array2<f64>,
    pub w_value: Array2<f64>,
    pub w_attn_out: Array2<f64>,
    pub att_cell: Array2<f64>,
    pub att_state: Array2<f64>,
    pub att_bias: Array2<f64>,
    pub att_score: Array2<f64>,
    pub w_hidden_state: Array2<f64>,
    pub w_hidden_context: Array2<f64>,
    pub b_hidden: Array2<f64>,
    pub w_vocab: Array2<f64>,
    pub b_vocab: Array2<f64>,
}

impl ModelParams {
    pub fn zeros(config: &ModelConfig) -> Self {
        let c = config;
        let d = c.embed_dim;
        let a = c.attention_dim;
        let hd = c.hidden_dim;
        let z = |r: usize, k: usize| Array2::<f64>::zeros((r, k));
        ModelParams {
            config: c.clone(),
            cell_embed: z(c.num_cell_ids(), d),
            cell_pos: z(c.num_cells(), d),
            tok_embed: z(c.vocab_size + 1, d),
            tok_pos: z(c.max_len, d),
            w_query: z(d, d),
            w_key: z(d, d),
            w_value: z(d, d),
            w_attn_out: z(d, d),
            att_cell: z(d, a),
            att_state: z(d, a),
            att_bias: z(1, a),
            att_score: z(1, a),
            w_hidden_state: z(d, hd),
            w_hidden_context: z(d, hd),
            b_hidden: z(1, hd),
            w_vocab: z(hd, c.vocab_size),
            b_vocab: z(1, c.vocab_size),
        }
    }

    /// Random initialization, deterministic in `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut p = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim as f64;
        let a = config.attention_dim as f64;
        let hd = config.hidden_dim as f64;
        let scales = [
            ("cell_embed", 0.5),
            ("cell_pos", 0.3),
            ("tok_embed", 0.5),
            ("tok_pos", 0.3),
            ("w_query", 1.0 / d.sqrt()),
            ("w_key", 1.0 / d.sqrt()),
            ("w_value", 1.0 / d.sqrt()),
            ("w_attn_out", 1.0 / d.sqrt()),
            ("att_cell", 1.0 / d.sqrt()),
            ("att_state", 1.0 / d.sqrt()),
            ("att_bias", 0.0),
            ("att_score", 1.0 / a.sqrt()),
            ("w_hidden_state", 1.0 / d.sqrt()),
            ("w_hidden_context", 1.0 / d.sqrt()),
            ("b_hidden", 0.0),
            ("w_vocab", 1.0 / hd.sqrt()),
            ("b_vocab", 0.0),
        ];
        for ((name, tensor), (sname, std)) in p.tensors_mut().into_iter().zip(scales) {
            debug_assert_eq!(name, sname);
            if std > 0.0 {
                let normal = Normal::new(0.0, std).expect("positive std");
                tensor.mapv_inplace(|_| normal.sample(&mut rng));
            }
        }
        Ok(p)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> [(&'static str, &Array2<f64>); 17] {
        [
            (PARAM_NAMES[0], &self.cell_embed),
            (PARAM_NAMES[1], &self.cell_pos),
            (PARAM_NAMES[2], &self.tok_embed),
            (PARAM_NAMES[3], &self.tok_pos),
            (PARAM_NAMES[4], &self.w_query),
            (PARAM_NAMES[5], &self.w_key),
            (PARAM_NAMES[6], &self.w_value),
            (PARAM_NAMES[7], &self.w_attn_out),
            (PARAM_NAMES[8], &self.att_cell),
            (PARAM_NAMES[9], &self.att_state),
            (PARAM_NAMES[10], &self.att_bias),
            (PARAM_NAMES[11], &self.att_score),
            (PARAM_NAMES[12], &self.w_hidden_state),
            (PARAM_NAMES[13], &self.w_hidden_context),
            (PARAM_NAMES[14], &self.b_hidden),
            (PARAM_NAMES[15], &self.w_vocab),
            (PARAM_NAMES[16], &self.b_vocab),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Array2<f64>); 17] {
        [
            (PARAM_NAMES[0], &mut self.cell_embed),
            (PARAM_NAMES[1], &mut self.cell_pos),
            (PARAM_NAMES[2], &mut self.tok_embed),
            (PARAM_NAMES[3], &mut self.tok_pos),
            (PARAM_NAMES[4], &mut self.w_query),
            (PARAM_NAMES[5], &mut self.w_key),
            (PARAM_NAMES[6], &mut self.w_value),
            (PARAM_NAMES[7], &mut self.w_attn_out),
            (PARAM_NAMES[8], &mut self.att_cell),
            (PARAM_NAMES[9], &mut self.att_state),
            (PARAM_NAMES[10], &mut self.att_bias),
            (PARAM_NAMES[11], &mut self.att_score),
            (PARAM_NAMES[12], &mut self.w_hidden_state),
            (PARAM_NAMES[13], &mut self.w_hidden_context),
            (PARAM_NAMES[14], &mut self.b_hidden),
            (PARAM_NAMES[15], &mut self.w_vocab),
            (PARAM_NAMES[16], &mut self.b_vocab),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, t) in self.tensors() {
            out.extend(t.iter().copied());
        }
        out
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::input(format!(
                "flat parameter vector has {} entries, expected {}",
                values.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for (_, t) in self.tensors_mut() {
            for (dst, &src) in t.iter_mut().zip(&values[offset..]) {
                *dst = src;
            }
            offset += t.len();
        }
        Ok(())
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for ((_, dst), (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            dst.scaled_add(scale, src);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, t) in self.tensors_mut() {
            t.mapv_inplace(|v| v * factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|(_, t)| t.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    pub(crate) fn check_token(&self, t: TokenId) -> Result<()> {
        if (t as usize) < self.config.vocab_size {
            Ok(())
        } else {
            Err(Error::input(format!(
                "token id {t} outside vocabulary of {}",
                self.config.vocab_size
            )))
        }
    }

    fn check_image(&self, image: &SceneImage) -> Result<()> {
        if image.height() != self.config.grid_height || image.width() != self.config.grid_width {
            return Err(Error::input(format!(
                "image is {}x{}, model expects {}x{}",
                image.height(),
                image.width(),
                self.config.grid_height,
                self.config.grid_width
            )));
        }
        image.validate_ids(self.config.num_objects)
    }

    /// Runs the decoder over `context`, producing one next-token row per
    /// prefix `context[..t]` for `t = 0..=context.len()`.
    pub fn run(&self, image: &SceneImage, context: &[TokenId]) -> Result<Pass> {
        let cfg = &self.config;
        let rows = context.len() + 1;
        if rows > cfg.max_len {
            return Err(Error::Capacity(format!(
                "prefix of length {} reaches maximum caption length {}",
                context.len(),
                cfg.max_len
            )));
        }
        for &t in context {
            self.check_token(t)?;
        }
        self.check_image(image)?;

        let d = cfg.embed_dim;
        let heads = cfg.num_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut token_rows = Vec::with_capacity(rows);
        token_rows.push(cfg.vocab_size);
        token_rows.extend(context.iter().map(|&t| t as usize));

        let mut x = Array2::<f64>::zeros((rows, d));
        for (t, &id) in token_rows.iter().enumerate() {
            let mut row = x.row_mut(t);
            row.assign(&self.tok_embed.row(id));
            row += &self.tok_pos.row(t);
        }

        let q = x.dot(&self.w_query);
        let k = x.dot(&self.w_key);
        let v = x.dot(&self.w_value);
        let mut heads_out = Array2::<f64>::zeros((rows, d));
        let mut attn = Vec::with_capacity(heads);
        for hd in 0..heads {
            let cols = s![.., hd * dh..(hd + 1) * dh];
            let mut a = q.slice(cols).dot(&k.slice(cols).t());
            for t in 0..rows {
                let mut row = a.row_mut(t);
                row.mapv_inplace(|v| v * scale);
                softmax_prefix(row.as_slice_mut().expect("contiguous row"), t + 1);
            }
            heads_out.slice_mut(cols).assign(&a.dot(&v.slice(cols)));
            attn.push(a);
        }
        let h = &x + &heads_out.dot(&self.w_attn_out);

        let cell_rows: Vec<usize> = image.cells().iter().map(|&c| c as usize).collect();
        let n = cell_rows.len();
        let mut feats = Array2::<f64>::zeros((n, d));
        for (c, &id) in cell_rows.iter().enumerate() {
            let mut row = feats.row_mut(c);
            row.assign(&self.cell_embed.row(id));
            row += &self.cell_pos.row(c);
        }

        let att_dim = cfg.attention_dim;
        let fa = feats.dot(&self.att_cell);
        let ha = h.dot(&self.att_state) + &self.att_bias;
        let score = self.att_score.row(0);
        let mut g = Array3::<f64>::zeros((rows, n, att_dim));
        let mut weights = Array2::<f64>::zeros((rows, n));
        for t in 0..rows {
            let ha_t = ha.row(t);
            for c in 0..n {
                let fa_c = fa.row(c);
                let mut g_tc = g.slice_mut(s![t, c, ..]);
                let mut e = 0.0;
                for j in 0..att_dim {
                    let val = (fa_c[j] + ha_t[j]).tanh();
                    g_tc[j] = val;
                    e += val * score[j];
                }
                weights[[t, c]] = e;
            }
            let mut row = weights.row_mut(t);
            softmax_prefix(row.as_slice_mut().expect("contiguous row"), n);
        }
        let ctx = weights.dot(&feats);

        let mut z = h.dot(&self.w_hidden_state) + ctx.dot(&self.w_hidden_context) + &self.b_hidden;
        z.mapv_inplace(f64::tanh);
        let mut log_probs = z.dot(&self.w_vocab) + &self.b_vocab;
        for mut row in log_probs.rows_mut() {
            log_softmax_in_place(row.as_slice_mut().expect("contiguous row"));
        }

        Ok(Pass {
            token_rows,
            cell_rows,
            x,
            q,
            k,
            v,
            attn,
            heads_out,
            h,
            feats,
            g,
            weights,
            ctx,
            z,
            log_probs,
        })
    }

    /// Accumulates into `grads` the gradient of `sum(d_log_probs * log_probs)`
    /// over the rows of `pass`.
    pub fn backward(&self, pass: &Pass, d_log_probs: &Array2<f64>, grads: &mut ModelParams) {
        let cfg = &self.config;
        let rows = pass.rows();
        let d = cfg.embed_dim;
        let heads = cfg.num_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let n = pass.cell_rows.len();
        let att_dim = cfg.attention_dim;
        debug_assert_eq!(d_log_probs.dim(), pass.log_probs.dim());

        let mut d_logits = d_log_probs.clone();
        for t in 0..rows {
            let total: f64 = d_log_probs.row(t).sum();
            if total != 0.0 {
                Zip::from(d_logits.row_mut(t))
                    .and(pass.log_probs.row(t))
                    .for_each(|dl, &lp| *dl -= lp.exp() * total);
            }
        }

        grads.w_vocab += &pass.z.t().dot(&d_logits);
        grads.b_vocab += &d_logits.sum_axis(Axis(0)).insert_axis(Axis(0));
        let mut d_pre = d_logits.dot(&self.w_vocab.t());
        Zip::from(&mut d_pre)
            .and(&pass.z)
            .for_each(|dp, &z| *dp *= 1.0 - z * z);

        grads.w_hidden_state += &pass.h.t().dot(&d_pre);
        grads.w_hidden_context += &pass.ctx.t().dot(&d_pre);
        grads.b_hidden += &d_pre.sum_axis(Axis(0)).insert_axis(Axis(0));
        let mut dh_state = d_pre.dot(&self.w_hidden_state.t());
        let d_ctx = d_pre.dot(&self.w_hidden_context.t());

        let d_weights = d_ctx.dot(&pass.feats.t());
        let mut d_feats = pass.weights.t().dot(&d_ctx);

        let score = self.att_score.row(0);
        let mut d_fa = Array2::<f64>::zeros((n, att_dim));
        let mut d_ha = Array2::<f64>::zeros((rows, att_dim));
        for t in 0..rows {
            let w = pass.weights.row(t);
            let dw = d_weights.row(t);
            let inner: f64 = w.iter().zip(dw.iter()).map(|(a, b)| a * b).sum();
            for c in 0..n {
                let de = w[c] * (dw[c] - inner);
                if de == 0.0 {
                    continue;
                }
                let g_tc = pass.g.slice(s![t, c, ..]);
                for j in 0..att_dim {
                    let gv = g_tc[j];
                    grads.att_score[[0, j]] += de * gv;
                    let du = de * score[j] * (1.0 - gv * gv);
                    d_fa[[c, j]] += du;
                    d_ha[[t, j]] += du;
                }
            }
        }
        grads.att_bias += &d_ha.sum_axis(Axis(0)).insert_axis(Axis(0));
        grads.att_cell += &pass.feats.t().dot(&d_fa);
        d_feats += &d_fa.dot(&self.att_cell.t());
        grads.att_state += &pass.h.t().dot(&d_ha);
        dh_state += &d_ha.dot(&self.att_state.t());

        let mut dx = dh_state.clone();
        grads.w_attn_out += &pass.heads_out.t().dot(&dh_state);
        let d_heads = dh_state.dot(&self.w_attn_out.t());

        let mut dq = Array2::<f64>::zeros((rows, d));
        let mut dk = Array2::<f64>::zeros((rows, d));
        let mut dv = Array2::<f64>::zeros((rows, d));
        for (hd, a) in pass.attn.iter().enumerate() {
            let cols = s![.., hd * dh..(hd + 1) * dh];
            let d_out = d_heads.slice(cols);
            let da = d_out.dot(&pass.v.slice(cols).t());
            dv.slice_mut(cols).assign(&a.t().dot(&d_out));
            let mut ds = Array2::<f64>::zeros((rows, rows));
            for t in 0..rows {
                let inner: f64 = (0..=t).map(|j| a[[t, j]] * da[[t, j]]).sum();
                for j in 0..=t {
                    ds[[t, j]] = a[[t, j]] * (da[[t, j]] - inner) * scale;
                }
            }
            dq.slice_mut(cols).assign(&ds.dot(&pass.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&pass.q.slice(cols)));
        }
        grads.w_query += &pass.x.t().dot(&dq);
        grads.w_key += &pass.x.t().dot(&dk);
        grads.w_value += &pass.x.t().dot(&dv);
        dx += &dq.dot(&self.w_query.t());
        dx += &dk.dot(&self.w_key.t());
        dx += &dv.dot(&self.w_value.t());

        for (t, &id) in pass.token_rows.iter().enumerate() {
            let row = dx.row(t);
            let mut e = grads.tok_embed.row_mut(id);
            e += &row;
            let mut p = grads.tok_pos.row_mut(t);
            p += &row;
        }
        for (c, &id) in pass.cell_rows.iter().enumerate() {
            let row = d_feats.row(c);
            let mut e = grads.cell_embed.row_mut(id);
            e += &row;
            let mut p = grads.cell_pos.row_mut(c);
            p += &row;
        }
    }
}

/// Activations of one decoder run, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Pass {
    token_rows: Vec<usize>,
    cell_rows: Vec<usize>,
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>,
    heads_out: Array2<f64>,
    h: Array2<f64>,
    feats: Array2<f64>,
    g: Array3<f64>,
    weights: Array2<f64>,
    ctx: Array2<f64>,
    z: Array2<f64>,
    log_probs: Array2<f64>,
}

impl Pass {
    pub fn rows(&self) -> usize {
        self.token_rows.len()
    }

    /// Row `t` is the next-token log-distribution after the first `t` context tokens.
    pub fn log_probs(&self) -> &Array2<f64> {
        &self.log_probs
    }

    /// Attention of row `t` over the grid cells.
    pub fn cell_attention(&self, t: usize) -> Vec<f64> {
        self.weights.row(t).to_vec()
    }
}

/// Softmax over `row[..len]`; entries past `len` are set to zero.
fn softmax_prefix(row: &mut [f64], len: usize) {
    let max = row[..len].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in &mut row[..len] {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in &mut row[..len] {
        *v /= total;
    }
    for v in &mut row[len..] {
        *v = 0.0;
    }
}

pub(crate) fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for v in row.iter_mut() {
        *v -= lse;
    }
}
