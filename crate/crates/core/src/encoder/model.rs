//! Post-norm transformer encoder with learned positions and per-task linear heads.
//!
//! [`Encoder::forward`] records everything backpropagation needs in a [`Tape`];
//! [`Encoder::backward`] consumes the tape plus upstream gradients on the head
//! logits and/or the pooled CLS states and returns gradients for every tensor
//! in the parameter store.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::EncoderConfig;
use super::ops::{self, NormCache};
use super::params::{truncated_normal, Gradients, ParameterStore};
use crate::error::{Error, Result};
use crate::vocab::EncodedBatch;
use crate::Task;

/// Seeded stream used for initialization, shuffling, triplet draws and dropout.
pub type TrainRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> TrainRng {
    ChaCha8Rng::seed_from_u64(seed)
}

const HEAD_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A linear classification head: `d_hidden × classes` weight plus bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskHead {
    pub task: Task,
    pub classes: usize,
}

impl TaskHead {
    pub fn weight_name(task: Task) -> String {
        format!("head.{}.weight", task.name())
    }

    pub fn bias_name(task: Task) -> String {
        format!("head.{}.bias", task.name())
    }
}

/// Result of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub n: usize,
    pub width: usize,
    pub d_hidden: usize,
    /// `n × width × d_hidden`
    pub hidden: Vec<f64>,
    /// `n × d_hidden`, the CLS rows of `hidden`
    pub pooled: Vec<f64>,
    /// `n × k` for sentence tasks, `n × width × k` for slot filling; empty without a head.
    pub logits: Vec<f64>,
    pub classes: usize,
    pub task: Option<Task>,
}

#[derive(Debug, Clone)]
struct LayerTape {
    input: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    ctx: Vec<f64>,
    attn_drop: Option<Vec<f64>>,
    norm1: NormCache,
    h1: Vec<f64>,
    f1: Vec<f64>,
    g: Vec<f64>,
    ffn_drop: Option<Vec<f64>>,
    norm2: NormCache,
}

/// Recorded forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    n: usize,
    width: usize,
    task: Option<Task>,
    token_ids: Vec<u32>,
    mask: Vec<u8>,
    emb_norm: NormCache,
    emb_drop: Option<Vec<f64>>,
    layers: Vec<LayerTape>,
    hidden: Vec<f64>,
    pooled: Vec<f64>,
}

struct LayerIds {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    n1g: usize,
    n1b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    n2g: usize,
    n2b: usize,
}

/// Transformer encoder plus attached task heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub params: ParameterStore,
    heads: Vec<TaskHead>,
}

fn layer_name(i: usize, rest: &str) -> String {
    format!("layer.{i}.{rest}")
}

/// Backbone tensor names and shapes implied by a config, in store order.
pub fn backbone_layout(cfg: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_hidden;
    let mut out = vec![
        ("embed.token".to_string(), vec![cfg.vocab_size, d]),
        ("embed.position".to_string(), vec![cfg.max_len, d]),
        ("embed.norm.gain".to_string(), vec![d]),
        ("embed.norm.bias".to_string(), vec![d]),
    ];
    for i in 0..cfg.n_layers {
        for proj in ["query", "key", "value", "output"] {
            out.push((layer_name(i, &format!("attn.{proj}.weight")), vec![d, d]));
            out.push((layer_name(i, &format!("attn.{proj}.bias")), vec![d]));
        }
        out.push((layer_name(i, "attn.norm.gain"), vec![d]));
        out.push((layer_name(i, "attn.norm.bias"), vec![d]));
        out.push((layer_name(i, "ffn.inner.weight"), vec![d, cfg.d_ff]));
        out.push((layer_name(i, "ffn.inner.bias"), vec![cfg.d_ff]));
        out.push((layer_name(i, "ffn.outer.weight"), vec![cfg.d_ff, d]));
        out.push((layer_name(i, "ffn.outer.bias"), vec![d]));
        out.push((layer_name(i, "ffn.norm.gain"), vec![d]));
        out.push((layer_name(i, "ffn.norm.bias"), vec![d]));
    }
    out
}

pub fn is_head_param(name: &str) -> bool {
    name.starts_with("head.")
}

fn init_values<R: Rng + ?Sized>(cfg: &EncoderConfig, name: &str, numel: usize, rng: &mut R) -> Vec<f32> {
    if name.ends_with(".gain") {
        vec![1.0; numel]
    } else if name.ends_with(".bias") {
        vec![0.0; numel]
    } else {
        let std = if name.starts_with("embed.") {
            cfg.embed_init_std
        } else {
            cfg.init_std
        };
        truncated_normal(rng, numel, std)
    }
}

fn dropout_mask<R: Rng + ?Sized>(len: usize, p: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..len)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect()
}

fn apply_mask(x: &mut [f64], mask: &Option<Vec<f64>>) {
    if let Some(m) = mask {
        for (v, s) in x.iter_mut().zip(m) {
            *v *= s;
        }
    }
}

impl Encoder {
    /// Freshly initialized backbone without heads.
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParameterStore::new();
        for (name, shape) in backbone_layout(&config) {
            let numel = shape.iter().product();
            let data = init_values(&config, &name, numel, rng);
            params.insert(name, shape, data)?;
        }
        Ok(Encoder {
            config,
            params,
            heads: Vec::new(),
        })
    }

    /// Reassembles an encoder from stored parameters, checking the layout.
    pub fn from_parts(config: EncoderConfig, params: ParameterStore, heads: Vec<TaskHead>) -> Result<Self> {
        config.validate()?;
        let mut expected = backbone_layout(&config);
        for h in &heads {
            expected.push((TaskHead::weight_name(h.task), vec![config.d_hidden, h.classes]));
            expected.push((TaskHead::bias_name(h.task), vec![h.classes]));
        }
        if expected.len() != params.len() {
            let extra: Vec<&str> = params
                .names()
                .filter(|n| !expected.iter().any(|(e, _)| e == n))
                .collect();
            return Err(Error::Config(format!(
                "parameter set does not match config: expected {} tensors, found {} (unexpected: {:?})",
                expected.len(),
                params.len(),
                extra
            )));
        }
        for (name, shape) in &expected {
            let t = params
                .get(name)
                .ok_or_else(|| Error::Config(format!("missing tensor '{name}' required by config")))?;
            if &t.shape != shape {
                return Err(Error::Config(format!(
                    "tensor '{name}' has shape {:?}, config implies {:?}",
                    t.shape, shape
                )));
            }
        }
        Ok(Encoder { config, params, heads })
    }

    pub fn add_head<R: Rng + ?Sized>(&mut self, task: Task, classes: usize, rng: &mut R) -> Result<()> {
        if classes == 0 {
            return Err(Error::Invalid(format!("head {task} needs at least one class")));
        }
        if self.has_head(task) {
            return Err(Error::Invalid(format!("head {task} already attached")));
        }
        let d = self.config.d_hidden;
        let wname = TaskHead::weight_name(task);
        let w = truncated_normal(rng, d * classes, HEAD_INIT_STD);
        self.params.insert(wname, vec![d, classes], w)?;
        self.params
            .insert(TaskHead::bias_name(task), vec![classes], vec![0.0; classes])?;
        self.heads.push(TaskHead { task, classes });
        Ok(())
    }

    pub fn has_head(&self, task: Task) -> bool {
        self.head(task).is_some()
    }

    pub fn head(&self, task: Task) -> Option<&TaskHead> {
        self.heads.iter().find(|h| h.task == task)
    }

    pub fn heads(&self) -> &[TaskHead] {
        &self.heads
    }

    /// Hash of backbone tensors only (heads excluded).
    pub fn backbone_hash(&self) -> String {
        self.params.hash_where(|n| !is_head_param(n))
    }

    fn id(&self, name: &str) -> usize {
        self.params
            .id(name)
            .unwrap_or_else(|| panic!("encoder layout lacks '{name}'"))
    }

    fn layer_ids(&self, i: usize) -> LayerIds {
        let id = |rest: &str| self.id(&layer_name(i, rest));
        LayerIds {
            wq: id("attn.query.weight"),
            bq: id("attn.query.bias"),
            wk: id("attn.key.weight"),
            bk: id("attn.key.bias"),
            wv: id("attn.value.weight"),
            bv: id("attn.value.bias"),
            wo: id("attn.output.weight"),
            bo: id("attn.output.bias"),
            n1g: id("attn.norm.gain"),
            n1b: id("attn.norm.bias"),
            w1: id("ffn.inner.weight"),
            b1: id("ffn.inner.bias"),
            w2: id("ffn.outer.weight"),
            b2: id("ffn.outer.bias"),
            n2g: id("ffn.norm.gain"),
            n2b: id("ffn.norm.bias"),
        }
    }

    fn check_batch(&self, batch: &EncodedBatch) -> Result<()> {
        if batch.n == 0 || batch.width == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        if batch.token_ids.len() != batch.n * batch.width || batch.mask.len() != batch.n * batch.width {
            return Err(Error::Shape("batch buffers disagree with n × width".into()));
        }
        if batch.width > self.config.max_len {
            return Err(Error::Shape(format!(
                "batch width {} exceeds max_len {}",
                batch.width, self.config.max_len
            )));
        }
        if let Some(&bad) = batch
            .token_ids
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(Error::Shape(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        for i in 0..batch.n {
            if batch.mask[i * batch.width] != 1 {
                return Err(Error::Shape(format!("row {i} lacks the CLS position")));
            }
        }
        Ok(())
    }

    /// Runs the encoder and, when `head` is given, that task's head.
    ///
    /// Dropout draws from `rng` only in [`Mode::Train`]; eval mode never
    /// touches it and is deterministic.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        batch: &EncodedBatch,
        head: Option<Task>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(ForwardOutput, Tape)> {
        self.check_batch(batch)?;
        let cfg = &self.config;
        let (n, w, d) = (batch.n, batch.width, cfg.d_hidden);
        let rows = n * w;
        let p = if mode == Mode::Train { cfg.dropout } else { 0.0 };
        let mut drop = |len: usize| -> Option<Vec<f64>> {
            (p > 0.0).then(|| dropout_mask(len, p, rng))
        };

        let head_spec = match head {
            Some(task) => Some(*self.head(task).ok_or_else(|| {
                Error::Invalid(format!("encoder has no {task} head"))
            })?),
            None => None,
        };

        // Embeddings.
        let tok = self.params.data(self.id("embed.token"));
        let pos = self.params.data(self.id("embed.position"));
        let mut x0 = vec![0.0; rows * d];
        for r in 0..rows {
            let t = batch.token_ids[r] as usize;
            let j = r % w;
            let xr = &mut x0[r * d..(r + 1) * d];
            for c in 0..d {
                xr[c] = tok[t * d + c] as f64 + pos[j * d + c] as f64;
            }
        }
        let (mut h, emb_norm) = ops::layer_norm_forward(
            &x0,
            rows,
            d,
            self.params.data(self.id("embed.norm.gain")),
            self.params.data(self.id("embed.norm.bias")),
        );
        let emb_drop = drop(rows * d);
        apply_mask(&mut h, &emb_drop);

        // Padded positions are never attended to; their rows are skipped.
        let active: Vec<bool> = batch.mask.iter().map(|&m| m == 1).collect();
        let n_heads = cfg.n_heads;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for li in 0..cfg.n_layers {
            let ids = self.layer_ids(li);
            let pd = |id: usize| self.params.data(id);
            let q = ops::linear_forward_rows(&h, rows, d, pd(ids.wq), pd(ids.bq), d, Some(&active));
            let k = ops::linear_forward_rows(&h, rows, d, pd(ids.wk), pd(ids.bk), d, Some(&active));
            let v = ops::linear_forward_rows(&h, rows, d, pd(ids.wv), pd(ids.bv), d, Some(&active));
            let mut probs = vec![0.0; n * n_heads * w * w];
            let mut ctx = vec![0.0; rows * d];
            let mut scores = vec![0.0; w];
            for b in 0..n {
                let valid: Vec<usize> = (0..w).filter(|&j| batch.mask[b * w + j] == 1).collect();
                for a in 0..n_heads {
                    let off = a * dh;
                    for i in 0..w {
                        if !active[b * w + i] {
                            continue;
                        }
                        let qi = &q[(b * w + i) * d + off..(b * w + i) * d + off + dh];
                        let sc = &mut scores[..valid.len()];
                        for (s, &j) in sc.iter_mut().zip(&valid) {
                            let kj = &k[(b * w + j) * d + off..(b * w + j) * d + off + dh];
                            *s = ops::dot(qi, kj) * scale;
                        }
                        ops::softmax_in_place(sc);
                        let prow = &mut probs[((b * n_heads + a) * w + i) * w..((b * n_heads + a) * w + i + 1) * w];
                        let crow = &mut ctx[(b * w + i) * d + off..(b * w + i) * d + off + dh];
                        for (&pij, &j) in sc.iter().zip(&valid) {
                            prow[j] = pij;
                            let vj = &v[(b * w + j) * d + off..(b * w + j) * d + off + dh];
                            for (c, vv) in crow.iter_mut().zip(vj) {
                                *c += pij * vv;
                            }
                        }
                    }
                }
            }
            let mut attn_out = ops::linear_forward_rows(&ctx, rows, d, pd(ids.wo), pd(ids.bo), d, Some(&active));
            let attn_drop = drop(rows * d);
            apply_mask(&mut attn_out, &attn_drop);
            for (o, x) in attn_out.iter_mut().zip(&h) {
                *o += x;
            }
            let (h1, norm1) = ops::layer_norm_forward(&attn_out, rows, d, pd(ids.n1g), pd(ids.n1b));
            let f1 = ops::linear_forward_rows(&h1, rows, d, pd(ids.w1), pd(ids.b1), cfg.d_ff, Some(&active));
            let g: Vec<f64> = f1.iter().map(|&x| ops::gelu(x)).collect();
            let mut f2 = ops::linear_forward_rows(&g, rows, cfg.d_ff, pd(ids.w2), pd(ids.b2), d, Some(&active));
            let ffn_drop = drop(rows * d);
            apply_mask(&mut f2, &ffn_drop);
            for (o, x) in f2.iter_mut().zip(&h1) {
                *o += x;
            }
            let (h2, norm2) = ops::layer_norm_forward(&f2, rows, d, pd(ids.n2g), pd(ids.n2b));
            layers.push(LayerTape {
                input: std::mem::replace(&mut h, h2),
                q,
                k,
                v,
                probs,
                ctx,
                attn_drop,
                norm1,
                h1,
                f1,
                g,
                ffn_drop,
                norm2,
            });
        }

        let mut pooled = vec![0.0; n * d];
        for b in 0..n {
            pooled[b * d..(b + 1) * d].copy_from_slice(&h[b * w * d..b * w * d + d]);
        }

        let (logits, classes) = match head_spec {
            Some(hs) => {
                let wt = self.params.data(self.id(&TaskHead::weight_name(hs.task)));
                let bs = self.params.data(self.id(&TaskHead::bias_name(hs.task)));
                let logits = if hs.task.is_token_level() {
                    ops::linear_forward(&h, rows, d, wt, bs, hs.classes)
                } else {
                    ops::linear_forward(&pooled, n, d, wt, bs, hs.classes)
                };
                (logits, hs.classes)
            }
            None => (Vec::new(), 0),
        };

        let out = ForwardOutput {
            n,
            width: w,
            d_hidden: d,
            hidden: h.clone(),
            pooled: pooled.clone(),
            logits,
            classes,
            task: head,
        };
        let tape = Tape {
            n,
            width: w,
            task: head,
            token_ids: batch.token_ids.clone(),
            mask: batch.mask.clone(),
            emb_norm,
            emb_drop,
            layers,
            hidden: h,
            pooled,
        };
        Ok((out, tape))
    }

    /// Eval-mode forward without a random stream.
    pub fn infer(&self, batch: &EncodedBatch, head: Option<Task>) -> Result<ForwardOutput> {
        let mut unused = seeded_rng(0);
        self.forward(batch, head, Mode::Eval, &mut unused).map(|(o, _)| o)
    }

    /// Backpropagates upstream gradients through the recorded pass.
    ///
    /// `dlogits` has the shape of the head logits of the recorded task;
    /// `dpooled` is `n × d_hidden`. Tensors not reached get zero gradient.
    pub fn backward(&self, tape: &Tape, dlogits: Option<&[f64]>, dpooled: Option<&[f64]>) -> Result<Gradients> {
        let cfg = &self.config;
        let (n, w, d) = (tape.n, tape.width, cfg.d_hidden);
        let rows = n * w;
        let mut grads = Gradients::zeros_like(&self.params);
        let mut dh = vec![0.0; rows * d];

        if let Some(dl) = dlogits {
            let task = tape
                .task
                .ok_or_else(|| Error::Invalid("logit gradient given but no head was run".into()))?;
            let hs = *self.head(task).expect("head recorded on tape");
            let wid = self.id(&TaskHead::weight_name(task));
            let bid = self.id(&TaskHead::bias_name(task));
            let k = hs.classes;
            let (mut dw, mut db) = (vec![0.0; d * k], vec![0.0; k]);
            let wt = self.params.data(wid);
            if task.is_token_level() {
                if dl.len() != rows * k {
                    return Err(Error::Shape(format!("dlogits has {} values, expected {}", dl.len(), rows * k)));
                }
                ops::linear_backward(&tape.hidden, dl, rows, d, wt, k, &mut dw, &mut db, Some(&mut dh));
            } else {
                if dl.len() != n * k {
                    return Err(Error::Shape(format!("dlogits has {} values, expected {}", dl.len(), n * k)));
                }
                let mut dp = vec![0.0; n * d];
                ops::linear_backward(&tape.pooled, dl, n, d, wt, k, &mut dw, &mut db, Some(&mut dp));
                for b in 0..n {
                    for c in 0..d {
                        dh[b * w * d + c] += dp[b * d + c];
                    }
                }
            }
            grads.grads[wid] = dw;
            grads.grads[bid] = db;
        }
        if let Some(dp) = dpooled {
            if dp.len() != n * d {
                return Err(Error::Shape(format!("dpooled has {} values, expected {}", dp.len(), n * d)));
            }
            for b in 0..n {
                for c in 0..d {
                    dh[b * w * d + c] += dp[b * d + c];
                }
            }
        }

        let n_heads = cfg.n_heads;
        let dh_dim = cfg.head_dim();
        let scale = 1.0 / (dh_dim as f64).sqrt();
        for li in (0..cfg.n_layers).rev() {
            let lt = &tape.layers[li];
            let ids = self.layer_ids(li);
            let pd = |id: usize| self.params.data(id);

            // Feed-forward block.
            let mut dr2 = {
                let (g, b) = two_mut(&mut grads.grads, ids.n2g, ids.n2b);
                ops::layer_norm_backward(&dh, &lt.norm2, rows, d, pd(ids.n2g), g, b)
            };
            let mut dh1 = dr2.clone();
            apply_mask(&mut dr2, &lt.ffn_drop);
            let mut dg = vec![0.0; rows * cfg.d_ff];
            {
                let (gw, gb) = two_mut(&mut grads.grads, ids.w2, ids.b2);
                ops::linear_backward(&lt.g, &dr2, rows, cfg.d_ff, pd(ids.w2), d, gw, gb, Some(&mut dg));
            }
            for (x, f) in dg.iter_mut().zip(&lt.f1) {
                *x *= ops::gelu_grad(*f);
            }
            {
                let (gw, gb) = two_mut(&mut grads.grads, ids.w1, ids.b1);
                ops::linear_backward(&lt.h1, &dg, rows, d, pd(ids.w1), cfg.d_ff, gw, gb, Some(&mut dh1));
            }

            // Attention block.
            let mut dr1 = {
                let (g, b) = two_mut(&mut grads.grads, ids.n1g, ids.n1b);
                ops::layer_norm_backward(&dh1, &lt.norm1, rows, d, pd(ids.n1g), g, b)
            };
            let mut dinput = dr1.clone();
            apply_mask(&mut dr1, &lt.attn_drop);
            let mut dctx = vec![0.0; rows * d];
            {
                let (gw, gb) = two_mut(&mut grads.grads, ids.wo, ids.bo);
                ops::linear_backward(&lt.ctx, &dr1, rows, d, pd(ids.wo), d, gw, gb, Some(&mut dctx));
            }
            let mut dq = vec![0.0; rows * d];
            let mut dk = vec![0.0; rows * d];
            let mut dv = vec![0.0; rows * d];
            let mut dp = vec![0.0; w];
            for b in 0..n {
                let valid: Vec<usize> = (0..w).filter(|&j| tape.mask[b * w + j] == 1).collect();
                for a in 0..n_heads {
                    let off = a * dh_dim;
                    for i in 0..w {
                        let dci = &dctx[(b * w + i) * d + off..(b * w + i) * d + off + dh_dim];
                        if dci.iter().all(|&x| x == 0.0) {
                            continue;
                        }
                        let prow = &lt.probs[((b * n_heads + a) * w + i) * w..((b * n_heads + a) * w + i + 1) * w];
                        let mut weighted = 0.0;
                        for &j in &valid {
                            let vj = &lt.v[(b * w + j) * d + off..(b * w + j) * d + off + dh_dim];
                            dp[j] = ops::dot(dci, vj);
                            weighted += prow[j] * dp[j];
                            let dvj = &mut dv[(b * w + j) * d + off..(b * w + j) * d + off + dh_dim];
                            for (x, c) in dvj.iter_mut().zip(dci) {
                                *x += prow[j] * c;
                            }
                        }
                        let qi_base = (b * w + i) * d + off;
                        for &j in &valid {
                            let ds = prow[j] * (dp[j] - weighted) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let kj_base = (b * w + j) * d + off;
                            for c in 0..dh_dim {
                                dq[qi_base + c] += ds * lt.k[kj_base + c];
                                dk[kj_base + c] += ds * lt.q[qi_base + c];
                            }
                        }
                    }
                }
            }
            for (wid, bid, dy) in [(ids.wq, ids.bq, &dq), (ids.wk, ids.bk, &dk), (ids.wv, ids.bv, &dv)] {
                let (gw, gb) = two_mut(&mut grads.grads, wid, bid);
                ops::linear_backward(&lt.input, dy, rows, d, pd(wid), d, gw, gb, Some(&mut dinput));
            }
            dh = dinput;
        }

        // Embeddings.
        apply_mask(&mut dh, &tape.emb_drop);
        let gid = self.id("embed.norm.gain");
        let bid = self.id("embed.norm.bias");
        let dx0 = {
            let gain = self.params.data(gid);
            let (g, b) = two_mut(&mut grads.grads, gid, bid);
            ops::layer_norm_backward(&dh, &tape.emb_norm, rows, d, gain, g, b)
        };
        let tid = self.id("embed.token");
        let pid = self.id("embed.position");
        for r in 0..rows {
            let dxr = &dx0[r * d..(r + 1) * d];
            if dxr.iter().all(|&x| x == 0.0) {
                continue;
            }
            let t = tape.token_ids[r] as usize;
            let j = r % w;
            for c in 0..d {
                grads.grads[tid][t * d + c] += dxr[c];
                grads.grads[pid][j * d + c] += dxr[c];
            }
        }
        Ok(grads)
    }
}

fn two_mut(v: &mut [Vec<f64>], a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    assert_ne!(a, b);
    if a < b {
        let (lo, hi) = v.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    } else {
        let (lo, hi) = v.split_at_mut(a);
        (&mut hi[0], &mut lo[b])
    }
}
