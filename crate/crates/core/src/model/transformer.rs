use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::vocab::{TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::neural::{gemm_acc, gemm_tn_acc, softmax_in_place, Matrix, ParamId, ParamStore};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub vocab: Vocabulary,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_positions: 512,
            vocab: Vocabulary::synthetic(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.d_ff == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_positions == 0 {
            return Err(Error::invalid("max_positions must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone)]
struct LayerIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    w_qkv: ParamId,
    b_qkv: ParamId,
    w_o: ParamId,
    b_o: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w_fc1: ParamId,
    b_fc1: ParamId,
    w_fc2: ParamId,
    b_fc2: ParamId,
}

#[derive(Debug, Clone)]
struct Layout {
    tok_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<LayerIds>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    w_out: ParamId,
    b_out: ParamId,
}

/// Parameter names and shapes in declaration order.
pub(crate) fn parameter_shapes(cfg: &ModelConfig) -> Vec<(String, usize, usize)> {
    let d = cfg.d_model;
    let v = cfg.vocab.size();
    let mut shapes = vec![
        ("tok_emb".to_string(), v, d),
        ("pos_emb".to_string(), cfg.max_positions, d),
    ];
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("layer{l}.{s}");
        shapes.extend([
            (p("ln1_g"), 1, d),
            (p("ln1_b"), 1, d),
            (p("w_qkv"), d, 3 * d),
            (p("b_qkv"), 1, 3 * d),
            (p("w_o"), d, d),
            (p("b_o"), 1, d),
            (p("ln2_g"), 1, d),
            (p("ln2_b"), 1, d),
            (p("w_fc1"), d, cfg.d_ff),
            (p("b_fc1"), 1, cfg.d_ff),
            (p("w_fc2"), cfg.d_ff, d),
            (p("b_fc2"), 1, d),
        ]);
    }
    shapes.extend([
        ("lnf_g".to_string(), 1, d),
        ("lnf_b".to_string(), 1, d),
        ("w_out".to_string(), d, v),
        ("b_out".to_string(), 1, v),
    ]);
    shapes
}

impl Layout {
    fn resolve(store: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let get = |name: &str| {
            store
                .id(name)
                .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
        };
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let g = |s: &str| get(&format!("layer{l}.{s}"));
                Ok(LayerIds {
                    ln1_g: g("ln1_g")?,
                    ln1_b: g("ln1_b")?,
                    w_qkv: g("w_qkv")?,
                    b_qkv: g("b_qkv")?,
                    w_o: g("w_o")?,
                    b_o: g("b_o")?,
                    ln2_g: g("ln2_g")?,
                    ln2_b: g("ln2_b")?,
                    w_fc1: g("w_fc1")?,
                    b_fc1: g("b_fc1")?,
                    w_fc2: g("w_fc2")?,
                    b_fc2: g("b_fc2")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            tok_emb: get("tok_emb")?,
            pos_emb: get("pos_emb")?,
            layers,
            lnf_g: get("lnf_g")?,
            lnf_b: get("lnf_b")?,
            w_out: get("w_out")?,
            b_out: get("b_out")?,
        })
    }
}

/// Bidirectional pre-norm transformer producing per-position vocabulary logits.
#[derive(Debug, Clone)]
pub struct DiffusionModel {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

struct LayerNormCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

struct LayerCache {
    ln1: LayerNormCache,
    a1: Matrix,
    qkv: Matrix,
    probs: Vec<Matrix>,
    concat: Matrix,
    ln2: LayerNormCache,
    a2: Matrix,
    pre_act: Matrix,
    act: Matrix,
}

/// Activations retained by a training forward pass.
pub struct ForwardCache {
    tokens: Vec<TokenId>,
    layers: Vec<LayerCache>,
    lnf: LayerNormCache,
    af: Matrix,
}

fn layer_norm(x: &Matrix, gamma: &Matrix, beta: &Matrix) -> (Matrix, LayerNormCache) {
    let (rows, cols) = x.shape();
    let mut xhat = Matrix::zeros(rows, cols);
    let mut out = Matrix::zeros(rows, cols);
    let mut inv_std = Vec::with_capacity(rows);
    let g = gamma.data();
    let b = beta.data();
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        let xh = xhat.row_mut(r);
        for (h, v) in xh.iter_mut().zip(row) {
            *h = (v - mean) * is;
        }
        let o = out.row_mut(r);
        for c in 0..cols {
            o[c] = xhat.get(r, c) * g[c] + b[c];
        }
    }
    (out, LayerNormCache { xhat, inv_std })
}

/// Backward through layer norm; accumulates into the gamma/beta gradients
/// and returns the input gradient.
fn layer_norm_backward(
    dout: &Matrix,
    cache: &LayerNormCache,
    gamma: &Matrix,
    dgamma: &mut Matrix,
    dbeta: &mut Matrix,
) -> Matrix {
    let (rows, cols) = dout.shape();
    let mut dx = Matrix::zeros(rows, cols);
    let g = gamma.data();
    let n = cols as f64;
    for r in 0..rows {
        let dy = dout.row(r);
        let xh = cache.xhat.row(r);
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for c in 0..cols {
            let dxh = dy[c] * g[c];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xh[c];
        }
        {
            let dg = dgamma.data_mut();
            for c in 0..cols {
                dg[c] += dy[c] * xh[c];
            }
        }
        {
            let db = dbeta.data_mut();
            for c in 0..cols {
                db[c] += dy[c];
            }
        }
        let is = cache.inv_std[r];
        let out = dx.row_mut(r);
        for c in 0..cols {
            let dxh = dy[c] * g[c];
            out[c] = is * (dxh - sum_dxhat / n - xh[c] * sum_dxhat_xhat / n);
        }
    }
    dx
}

#[inline]
fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_K * u * u * u)).tanh())
}

#[inline]
fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_K * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * u * u)
}

fn affine(x: &Matrix, w: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), w.cols());
    out.add_row_broadcast(b);
    gemm_acc(x, w, &mut out);
    out
}

/// `dy * w^T`
fn backprop_input(dy: &Matrix, w: &Matrix) -> Matrix {
    let wt = w.transpose();
    let mut out = Matrix::zeros(dy.rows(), w.rows());
    gemm_acc(dy, &wt, &mut out);
    out
}

impl DiffusionModel {
    /// Randomly initialised model; deterministic for a given seed.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let residual_scale = 1.0 / ((2 * config.n_layers) as f64).sqrt();
        for (name, rows, cols) in parameter_shapes(&config) {
            let short = name.rsplit('.').next().unwrap_or(&name);
            let value = match short {
                "ln1_g" | "ln2_g" | "lnf_g" => Matrix::filled(rows, cols, 1.0),
                s if s.starts_with('b') || s.starts_with("ln") => Matrix::zeros(rows, cols),
                "tok_emb" | "pos_emb" => random_matrix(&mut rng, rows, cols, 0.1),
                "w_out" => random_matrix(&mut rng, rows, cols, 0.02),
                "w_o" | "w_fc2" => {
                    random_matrix(&mut rng, rows, cols, residual_scale / (rows as f64).sqrt())
                }
                _ => random_matrix(&mut rng, rows, cols, 1.0 / (rows as f64).sqrt()),
            };
            store.insert(name, value)?;
        }
        Self::from_params(config, store)
    }

    pub(crate) fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        for ((name, rows, cols), p) in parameter_shapes(&config).iter().zip(params.iter()) {
            if &p.name != name || p.value.shape() != (*rows, *cols) {
                return Err(Error::shape(format!(
                    "parameter {} has shape {:?}, expected {name} {rows}x{cols}",
                    p.name,
                    p.value.shape()
                )));
            }
        }
        let layout = Layout::resolve(&params, &config)?;
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.config.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Parameters that take part in matrix products (everything except the
    /// embedding tables, which are lookups).
    pub fn dense_parameter_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.name != "tok_emb" && p.name != "pos_emb")
            .map(|p| p.value.data().len())
            .sum()
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::invalid("empty token sequence"));
        }
        if tokens.len() > self.config.max_positions {
            return Err(Error::invalid(format!(
                "sequence of {} tokens exceeds max_positions {}",
                tokens.len(),
                self.config.max_positions
            )));
        }
        if let Some(t) = tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab.size())
        {
            return Err(Error::invalid(format!("token id {t} outside vocabulary")));
        }
        Ok(())
    }

    /// Logits for every position of `tokens`.
    pub fn forward_tokens(&self, tokens: &[TokenId]) -> Result<Matrix> {
        self.forward_cached(tokens).map(|(logits, _)| logits)
    }

    /// Forward pass that keeps the activations needed by [`Self::backward`].
    pub fn forward_cached(&self, tokens: &[TokenId]) -> Result<(Matrix, ForwardCache)> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let p = &self.params;
        let len = tokens.len();
        let d = cfg.d_model;
        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();

        let mut x = Matrix::zeros(len, d);
        let tok = p.value(self.layout.tok_emb);
        let pos = p.value(self.layout.pos_emb);
        for (i, &t) in tokens.iter().enumerate() {
            let row = x.row_mut(i);
            for ((v, a), b) in row.iter_mut().zip(tok.row(t as usize)).zip(pos.row(i)) {
                *v = a + b;
            }
        }

        let mut layers = Vec::with_capacity(cfg.n_layers);
        for ids in &self.layout.layers {
            let (a1, ln1) = layer_norm(&x, p.value(ids.ln1_g), p.value(ids.ln1_b));
            let qkv = affine(&a1, p.value(ids.w_qkv), p.value(ids.b_qkv));

            let mut concat = Matrix::zeros(len, d);
            let mut probs = Vec::with_capacity(cfg.n_heads);
            for h in 0..cfg.n_heads {
                let q = qkv.slice_cols(h * hd, (h + 1) * hd);
                let kt = qkv.slice_cols(d + h * hd, d + (h + 1) * hd).transpose();
                let v = qkv.slice_cols(2 * d + h * hd, 2 * d + (h + 1) * hd);
                let mut scores = Matrix::zeros(len, len);
                gemm_acc(&q, &kt, &mut scores);
                for r in 0..len {
                    let row = scores.row_mut(r);
                    row.iter_mut().for_each(|s| *s *= scale);
                    softmax_in_place(row);
                }
                let mut head_out = Matrix::zeros(len, hd);
                gemm_acc(&scores, &v, &mut head_out);
                concat.add_into_cols(h * hd, &head_out);
                probs.push(scores);
            }
            let attn = affine(&concat, p.value(ids.w_o), p.value(ids.b_o));
            x.add_assign(&attn);

            let (a2, ln2) = layer_norm(&x, p.value(ids.ln2_g), p.value(ids.ln2_b));
            let pre_act = affine(&a2, p.value(ids.w_fc1), p.value(ids.b_fc1));
            let mut act = pre_act.clone();
            act.data_mut().iter_mut().for_each(|u| *u = gelu(*u));
            let mlp = affine(&act, p.value(ids.w_fc2), p.value(ids.b_fc2));
            x.add_assign(&mlp);

            layers.push(LayerCache {
                ln1,
                a1,
                qkv,
                probs,
                concat,
                ln2,
                a2,
                pre_act,
                act,
            });
        }

        let (af, lnf) = layer_norm(&x, p.value(self.layout.lnf_g), p.value(self.layout.lnf_b));
        let logits = affine(&af, p.value(self.layout.w_out), p.value(self.layout.b_out));
        if !logits.is_finite() {
            return Err(Error::NonFinite("model logits".into()));
        }
        Ok((
            logits,
            ForwardCache {
                tokens: tokens.to_vec(),
                layers,
                lnf,
                af,
            },
        ))
    }

    /// Backpropagates `dlogits` and accumulates parameter gradients into
    /// `grads`, which must share this model's parameter layout.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Matrix, grads: &mut ParamStore) {
        let cfg = &self.config;
        let p = &self.params;
        let ly = &self.layout;
        let len = cache.tokens.len();
        let d = cfg.d_model;
        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();

        gemm_tn_acc(&cache.af, dlogits, grads.grad_mut(ly.w_out));
        dlogits.accumulate_col_sums(grads.grad_mut(ly.b_out));
        let daf = backprop_input(dlogits, p.value(ly.w_out));
        let mut dx = {
            let (mut dg, mut db) = take_pair(grads, ly.lnf_g, ly.lnf_b);
            let dx = layer_norm_backward(&daf, &cache.lnf, p.value(ly.lnf_g), &mut dg, &mut db);
            put_pair(grads, ly.lnf_g, ly.lnf_b, dg, db);
            dx
        };

        for (ids, lc) in ly.layers.iter().zip(&cache.layers).rev() {
            // feed-forward block
            gemm_tn_acc(&lc.act, &dx, grads.grad_mut(ids.w_fc2));
            dx.accumulate_col_sums(grads.grad_mut(ids.b_fc2));
            let mut dpre = backprop_input(&dx, p.value(ids.w_fc2));
            for (g, &u) in dpre.data_mut().iter_mut().zip(lc.pre_act.data()) {
                *g *= gelu_grad(u);
            }
            gemm_tn_acc(&lc.a2, &dpre, grads.grad_mut(ids.w_fc1));
            dpre.accumulate_col_sums(grads.grad_mut(ids.b_fc1));
            let da2 = backprop_input(&dpre, p.value(ids.w_fc1));
            {
                let (mut dg, mut db) = take_pair(grads, ids.ln2_g, ids.ln2_b);
                let dres = layer_norm_backward(&da2, &lc.ln2, p.value(ids.ln2_g), &mut dg, &mut db);
                put_pair(grads, ids.ln2_g, ids.ln2_b, dg, db);
                dx.add_assign(&dres);
            }

            // attention block
            gemm_tn_acc(&lc.concat, &dx, grads.grad_mut(ids.w_o));
            dx.accumulate_col_sums(grads.grad_mut(ids.b_o));
            let dconcat = backprop_input(&dx, p.value(ids.w_o));
            let mut dqkv = Matrix::zeros(len, 3 * d);
            for h in 0..cfg.n_heads {
                let probs = &lc.probs[h];
                let q = lc.qkv.slice_cols(h * hd, (h + 1) * hd);
                let k = lc.qkv.slice_cols(d + h * hd, d + (h + 1) * hd);
                let v = lc.qkv.slice_cols(2 * d + h * hd, 2 * d + (h + 1) * hd);
                let dout = dconcat.slice_cols(h * hd, (h + 1) * hd);

                let mut dprobs = Matrix::zeros(len, len);
                gemm_acc(&dout, &v.transpose(), &mut dprobs);
                let mut dv = Matrix::zeros(len, hd);
                gemm_tn_acc(probs, &dout, &mut dv);

                // softmax backward, folded with the score scale
                for r in 0..len {
                    let a = probs.row(r);
                    let row = dprobs.row_mut(r);
                    let dot: f64 = row.iter().zip(a).map(|(g, p)| g * p).sum();
                    for (g, &pa) in row.iter_mut().zip(a) {
                        *g = pa * (*g - dot) * scale;
                    }
                }
                let mut dq = Matrix::zeros(len, hd);
                gemm_acc(&dprobs, &k, &mut dq);
                let mut dk = Matrix::zeros(len, hd);
                gemm_tn_acc(&dprobs, &q, &mut dk);

                dqkv.add_into_cols(h * hd, &dq);
                dqkv.add_into_cols(d + h * hd, &dk);
                dqkv.add_into_cols(2 * d + h * hd, &dv);
            }
            gemm_tn_acc(&lc.a1, &dqkv, grads.grad_mut(ids.w_qkv));
            dqkv.accumulate_col_sums(grads.grad_mut(ids.b_qkv));
            let da1 = backprop_input(&dqkv, p.value(ids.w_qkv));
            {
                let (mut dg, mut db) = take_pair(grads, ids.ln1_g, ids.ln1_b);
                let dres = layer_norm_backward(&da1, &lc.ln1, p.value(ids.ln1_g), &mut dg, &mut db);
                put_pair(grads, ids.ln1_g, ids.ln1_b, dg, db);
                dx.add_assign(&dres);
            }
        }

        for (i, &t) in cache.tokens.iter().enumerate() {
            let row = dx.row(i);
            let tok = grads.grad_mut(ly.tok_emb).row_mut(t as usize);
            for (g, v) in tok.iter_mut().zip(row) {
                *g += v;
            }
            let pos = grads.grad_mut(ly.pos_emb).row_mut(i);
            for (g, v) in pos.iter_mut().zip(row) {
                *g += v;
            }
        }
    }
}

fn take_pair(store: &mut ParamStore, a: ParamId, b: ParamId) -> (Matrix, Matrix) {
    let ga = std::mem::replace(store.grad_mut(a), Matrix::zeros(0, 0));
    let gb = std::mem::replace(store.grad_mut(b), Matrix::zeros(0, 0));
    (ga, gb)
}

fn put_pair(store: &mut ParamStore, a: ParamId, b: ParamId, ga: Matrix, gb: Matrix) {
    *store.grad_mut(a) = ga;
    *store.grad_mut(b) = gb;
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let normal = Normal::new(0.0, std).expect("positive std");
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}
