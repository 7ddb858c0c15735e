//! From-scratch decoder-only causal transformer over the path vocabulary.
//!
//! Layout: summed vocab/type/position embeddings, pre-norm residual blocks
//! (causal multi-head attention, then a GELU feed-forward), a final layer
//! norm and one softmax head over the full vocabulary. Everything runs in
//! f64 with fixed reduction order; the backward pass is written by hand and
//! checked against finite differences in `train::grad_check`.

pub mod checkpoint;
pub mod math;
pub mod train;

use ndarray::{s, Array1, Array2, ArrayD, ArrayViewD, ArrayViewMutD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{TokenId, TokenSequence, TokenType, PAD};
use math::{
    attention_with_probs, gelu, gelu_prime, layernorm_bwd, layernorm_fwd, log_sum_exp,
    softmax_rows_bwd, LnCache,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Maximum sequence length including bos/eos; paths need 2N+3.
    pub context: usize,
    pub dropout: f64,
    pub seed: u64,
    pub vocab_size: usize,
}

impl ModelConfig {
    /// Named size presets; weights are always trained from scratch.
    pub fn preset(name: &str, context: usize, vocab_size: usize, seed: u64) -> Result<Self> {
        let (d_model, n_layers, n_heads) = match name {
            "small" => (128, 4, 4),
            "distil-like" => (768, 6, 12),
            "base-like" => (768, 12, 12),
            _ => {
                return Err(Error::Config(format!(
                    "unknown model preset `{name}`; expected small, distil-like or base-like"
                )))
            }
        };
        Ok(ModelConfig {
            d_model,
            n_layers,
            n_heads,
            d_ff: 4 * d_model,
            context,
            dropout: 0.0,
            seed,
            vocab_size,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err(Error::Config("model dimensions must be ≥ 1".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.context < 3 {
            return Err(Error::Config("context must fit bos, one token and eos".into()));
        }
        if self.vocab_size < 4 {
            return Err(Error::Config("vocabulary must hold specials plus content".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LnP {
    pub g: Array1<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct AttnP {
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct FfP {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct BlockP {
    pub ln1: LnP,
    pub attn: AttnP,
    pub ln2: LnP,
    pub ff: FfP,
}

#[derive(Debug, Clone)]
pub(crate) struct Params {
    pub tok: Array2<f64>,
    pub typ: Array2<f64>,
    pub pos: Array2<f64>,
    pub blocks: Vec<BlockP>,
    pub lnf: LnP,
    pub head_w: Array2<f64>,
    pub head_b: Array1<f64>,
}

/// Gradients share the parameter layout.
pub struct Grads(pub(crate) Params);

impl Grads {
    /// Scale every gradient in place. Exists for backward-pass mutation
    /// testing (a scaled gradient must fail the finite-difference check),
    /// not for training.
    pub fn scale(&mut self, factor: f64) {
        for (_, _, mut v) in self.0.views_mut() {
            v.mapv_inplace(|g| factor * g);
        }
    }
}

macro_rules! visit_params {
    ($p:expr, $out:ident, $view:ident, $iter:ident) => {{
        $out.push(("tok_emb".to_string(), false, $p.tok.$view().into_dyn()));
        $out.push(("type_emb".to_string(), false, $p.typ.$view().into_dyn()));
        $out.push(("pos_emb".to_string(), false, $p.pos.$view().into_dyn()));
        for (i, blk) in $p.blocks.$iter().enumerate() {
            $out.push((format!("block{i}.ln1.g"), false, blk.ln1.g.$view().into_dyn()));
            $out.push((format!("block{i}.ln1.b"), false, blk.ln1.b.$view().into_dyn()));
            $out.push((format!("block{i}.attn.wq"), true, blk.attn.wq.$view().into_dyn()));
            $out.push((format!("block{i}.attn.bq"), false, blk.attn.bq.$view().into_dyn()));
            $out.push((format!("block{i}.attn.wk"), true, blk.attn.wk.$view().into_dyn()));
            $out.push((format!("block{i}.attn.bk"), false, blk.attn.bk.$view().into_dyn()));
            $out.push((format!("block{i}.attn.wv"), true, blk.attn.wv.$view().into_dyn()));
            $out.push((format!("block{i}.attn.bv"), false, blk.attn.bv.$view().into_dyn()));
            $out.push((format!("block{i}.attn.wo"), true, blk.attn.wo.$view().into_dyn()));
            $out.push((format!("block{i}.attn.bo"), false, blk.attn.bo.$view().into_dyn()));
            $out.push((format!("block{i}.ln2.g"), false, blk.ln2.g.$view().into_dyn()));
            $out.push((format!("block{i}.ln2.b"), false, blk.ln2.b.$view().into_dyn()));
            $out.push((format!("block{i}.ff.w1"), true, blk.ff.w1.$view().into_dyn()));
            $out.push((format!("block{i}.ff.b1"), false, blk.ff.b1.$view().into_dyn()));
            $out.push((format!("block{i}.ff.w2"), true, blk.ff.w2.$view().into_dyn()));
            $out.push((format!("block{i}.ff.b2"), false, blk.ff.b2.$view().into_dyn()));
        }
        $out.push(("ln_f.g".to_string(), false, $p.lnf.g.$view().into_dyn()));
        $out.push(("ln_f.b".to_string(), false, $p.lnf.b.$view().into_dyn()));
        $out.push(("head.w".to_string(), true, $p.head_w.$view().into_dyn()));
        $out.push(("head.b".to_string(), false, $p.head_b.$view().into_dyn()));
    }};
}

impl Params {
    fn zeros(cfg: &ModelConfig) -> Params {
        let d = cfg.d_model;
        let ln = || LnP {
            g: Array1::zeros(d),
            b: Array1::zeros(d),
        };
        Params {
            tok: Array2::zeros((cfg.vocab_size, d)),
            typ: Array2::zeros((3, d)),
            pos: Array2::zeros((cfg.context, d)),
            blocks: (0..cfg.n_layers)
                .map(|_| BlockP {
                    ln1: ln(),
                    attn: AttnP {
                        wq: Array2::zeros((d, d)),
                        bq: Array1::zeros(d),
                        wk: Array2::zeros((d, d)),
                        bk: Array1::zeros(d),
                        wv: Array2::zeros((d, d)),
                        bv: Array1::zeros(d),
                        wo: Array2::zeros((d, d)),
                        bo: Array1::zeros(d),
                    },
                    ln2: ln(),
                    ff: FfP {
                        w1: Array2::zeros((d, cfg.d_ff)),
                        b1: Array1::zeros(cfg.d_ff),
                        w2: Array2::zeros((cfg.d_ff, d)),
                        b2: Array1::zeros(d),
                    },
                })
                .collect(),
            lnf: ln(),
            head_w: Array2::zeros((d, cfg.vocab_size)),
            head_b: Array1::zeros(cfg.vocab_size),
        }
    }

    pub(crate) fn views(&self) -> Vec<(String, bool, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        visit_params!(self, out, view, iter);
        out
    }

    pub(crate) fn views_mut(&mut self) -> Vec<(String, bool, ArrayViewMutD<'_, f64>)> {
        let mut out = Vec::new();
        visit_params!(self, out, view_mut, iter_mut);
        out
    }
}

/// Standard-normal draw via Box-Muller; deterministic given the rng state.
fn randn(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Rectangular batch; short sequences are suffix-padded with the pad token,
/// and padded targets are masked out of the loss.
pub struct Batch {
    ids: Array2<usize>,
    types: Array2<usize>,
}

impl Batch {
    pub fn new(seqs: &[&TokenSequence]) -> Result<Batch> {
        if seqs.is_empty() {
            return Err(Error::EmptyInput("batch"));
        }
        let t = seqs.iter().map(|s| s.len()).max().unwrap();
        if t == 0 {
            return Err(Error::EmptyInput("batch of empty sequences"));
        }
        let b = seqs.len();
        let mut ids = Array2::from_elem((b, t), PAD.idx());
        let mut types = Array2::from_elem((b, t), TokenType::Special.idx());
        for (row, seq) in seqs.iter().enumerate() {
            for (i, (&id, &ty)) in seq.ids.iter().zip(&seq.type_ids).enumerate() {
                ids[[row, i]] = id.idx();
                types[[row, i]] = ty.idx();
            }
        }
        Ok(Batch { ids, types })
    }

    pub fn n_rows(&self) -> usize {
        self.ids.nrows()
    }

    pub fn seq_len(&self) -> usize {
        self.ids.ncols()
    }
}

struct BlockCache {
    ln1: LnCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// B·H attention matrices, index b·H + h.
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    attn_mask: Option<Array2<f64>>,
    ln2: LnCache,
    f: Array2<f64>,
    pre1: Array2<f64>,
    h1: Array2<f64>,
    ff_mask: Option<Array2<f64>>,
}

struct FwdCache {
    emb_mask: Option<Array2<f64>>,
    blocks: Vec<BlockCache>,
    lnf: LnCache,
    hf: Array2<f64>,
    loss: f64,
    /// Positions with a real (non-pad) next token; 0 for bare prefixes.
    n_valid: usize,
    /// (softmax − onehot) / n_valid at valid target rows, zero elsewhere.
    d_logits: Array2<f64>,
    logits: Array2<f64>,
}

fn ensure_finite(name: &str, x: &Array2<f64>) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(name.to_string()))
    }
}

#[derive(Debug)]
pub struct Model {
    cfg: ModelConfig,
    p: Params,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Model> {
        cfg.validate()?;
        let mut p = Params::zeros(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for (name, decay, mut view) in p.views_mut() {
            if decay || name.ends_with("_emb") {
                for v in view.iter_mut() {
                    *v = 0.02 * randn(&mut rng);
                }
            } else if name.ends_with(".g") {
                view.fill(1.0);
            }
            // Biases and layer-norm shifts stay zero.
        }
        Ok(Model { cfg, p })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn param_count(&self) -> usize {
        self.p.views().iter().map(|(_, _, v)| v.len()).sum()
    }

    /// Tensor names with their weight-decay eligibility, in storage order.
    pub fn tensors(&self) -> Vec<(String, bool)> {
        self.p
            .views()
            .into_iter()
            .map(|(n, d, _)| (n, d))
            .collect()
    }

    /// Copy of one named tensor.
    pub fn tensor(&self, name: &str) -> Option<ArrayD<f64>> {
        self.p
            .views()
            .into_iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, _, v)| v.to_owned())
    }

    /// Mutate one named tensor in place; returns false if the name is
    /// unknown. Exists for experiments and tests (ablation, corruption),
    /// not for training.
    pub fn with_tensor_mut(&mut self, name: &str, f: impl FnOnce(ArrayViewMutD<f64>)) -> bool {
        for (n, _, v) in self.p.views_mut() {
            if n == name {
                f(v);
                return true;
            }
        }
        false
    }

    /// Row i = E_V[id_i] + E_T[type_i] + E_P[i].
    pub fn embed(&self, seq: &TokenSequence) -> Result<Array2<f64>> {
        if seq.len() > self.cfg.context {
            return Err(Error::SequenceTooLong {
                len: seq.len(),
                max: self.cfg.context,
            });
        }
        let d = self.cfg.d_model;
        let mut x = Array2::zeros((seq.len(), d));
        for (i, (&id, &ty)) in seq.ids.iter().zip(&seq.type_ids).enumerate() {
            if id.idx() >= self.cfg.vocab_size {
                return Err(Error::UnknownToken(format!("id {id}")));
            }
            for j in 0..d {
                x[[i, j]] =
                    self.p.tok[[id.idx(), j]] + self.p.typ[[ty.idx(), j]] + self.p.pos[[i, j]];
            }
        }
        Ok(x)
    }

    fn embed_batch(&self, batch: &Batch) -> Result<Array2<f64>> {
        let (b, t) = (batch.n_rows(), batch.seq_len());
        if t > self.cfg.context {
            return Err(Error::SequenceTooLong {
                len: t,
                max: self.cfg.context,
            });
        }
        let d = self.cfg.d_model;
        let mut x = Array2::zeros((b * t, d));
        for bi in 0..b {
            for i in 0..t {
                let id = batch.ids[[bi, i]];
                if id >= self.cfg.vocab_size {
                    return Err(Error::UnknownToken(format!("id {id}")));
                }
                let ty = batch.types[[bi, i]];
                let r = bi * t + i;
                for j in 0..d {
                    x[[r, j]] = self.p.tok[[id, j]] + self.p.typ[[ty, j]] + self.p.pos[[i, j]];
                }
            }
        }
        Ok(x)
    }

    fn dropout_mask(
        &self,
        shape: (usize, usize),
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Option<Array2<f64>> {
        let p = self.cfg.dropout;
        let rng = rng.as_deref_mut()?;
        if p == 0.0 {
            return None;
        }
        let keep = 1.0 / (1.0 - p);
        Some(Array2::from_shape_fn(shape, |_| {
            if rng.gen::<f64>() < p {
                0.0
            } else {
                keep
            }
        }))
    }

    /// Full forward pass with caches; loss is mean next-token cross-entropy
    /// over non-pad targets.
    fn forward_cached(
        &self,
        batch: &Batch,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<FwdCache> {
        let (b, t) = (batch.n_rows(), batch.seq_len());
        let (d, heads) = (self.cfg.d_model, self.cfg.n_heads);
        let dh = d / heads;

        let mut x = self.embed_batch(batch)?;
        let emb_mask = self.dropout_mask((b * t, d), &mut dropout_rng);
        if let Some(m) = &emb_mask {
            x *= m;
        }

        let mut blocks = Vec::with_capacity(self.cfg.n_layers);
        for (li, blk) in self.p.blocks.iter().enumerate() {
            let (a, ln1) = layernorm_fwd(&x, &blk.ln1.g, &blk.ln1.b);
            let q = a.dot(&blk.attn.wq) + &blk.attn.bq;
            let k = a.dot(&blk.attn.wk) + &blk.attn.bk;
            let v = a.dot(&blk.attn.wv) + &blk.attn.bv;
            let mut ctx = Array2::zeros((b * t, d));
            let mut probs = Vec::with_capacity(b * heads);
            for bi in 0..b {
                let rows = s![bi * t..(bi + 1) * t, ..];
                for h in 0..heads {
                    let cols = s![.., h * dh..(h + 1) * dh];
                    let qh = q.slice(rows).slice_move(cols);
                    let kh = k.slice(rows).slice_move(cols);
                    let vh = v.slice(rows).slice_move(cols);
                    let (out, p) = attention_with_probs(qh, kh, vh, true);
                    ctx.slice_mut(s![bi * t..(bi + 1) * t, h * dh..(h + 1) * dh])
                        .assign(&out);
                    probs.push(p);
                }
            }
            let mut attn_out = ctx.dot(&blk.attn.wo) + &blk.attn.bo;
            let attn_mask = self.dropout_mask((b * t, d), &mut dropout_rng);
            if let Some(m) = &attn_mask {
                attn_out *= m;
            }
            let x_mid = &x + &attn_out;

            let (f, ln2) = layernorm_fwd(&x_mid, &blk.ln2.g, &blk.ln2.b);
            let pre1 = f.dot(&blk.ff.w1) + &blk.ff.b1;
            let h1 = pre1.mapv(gelu);
            let mut ff_out = h1.dot(&blk.ff.w2) + &blk.ff.b2;
            let ff_mask = self.dropout_mask((b * t, d), &mut dropout_rng);
            if let Some(m) = &ff_mask {
                ff_out *= m;
            }
            let x_out = &x_mid + &ff_out;
            ensure_finite(&format!("block {li} activations"), &x_out)?;

            blocks.push(BlockCache {
                ln1,
                a,
                q,
                k,
                v,
                probs,
                ctx,
                attn_mask,
                ln2,
                f,
                pre1,
                h1,
                ff_mask,
            });
            x = x_out;
        }

        let (hf, lnf) = layernorm_fwd(&x, &self.p.lnf.g, &self.p.lnf.b);
        let logits = hf.dot(&self.p.head_w) + &self.p.head_b;
        ensure_finite("output logits", &logits)?;

        // Loss over positions whose target is a real token.
        let vsz = self.cfg.vocab_size;
        let mut loss = 0.0;
        let mut n_valid = 0usize;
        let mut d_logits = Array2::zeros((b * t, vsz));
        for bi in 0..b {
            for i in 0..t - 1 {
                let tgt = batch.ids[[bi, i + 1]];
                if tgt == PAD.idx() {
                    continue;
                }
                n_valid += 1;
                let r = bi * t + i;
                let row = logits.row(r);
                let row_slice = row.as_slice().expect("contiguous row");
                let lse = log_sum_exp(row_slice);
                loss += lse - row[tgt];
                let mut drow = d_logits.row_mut(r);
                for j in 0..vsz {
                    drow[j] = (row[j] - lse).exp();
                }
                drow[tgt] -= 1.0;
            }
        }
        if n_valid > 0 {
            loss /= n_valid as f64;
            d_logits /= n_valid as f64;
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }

        Ok(FwdCache {
            emb_mask,
            blocks,
            lnf,
            hf,
            loss,
            n_valid,
            d_logits,
            logits,
        })
    }

    /// Mean next-token cross-entropy without gradient bookkeeping.
    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        let cache = self.forward_cached(batch, None)?;
        if cache.n_valid == 0 {
            return Err(Error::EmptyInput("trainable positions"));
        }
        Ok(cache.loss)
    }

    /// Logits for one sequence, T×|V|.
    pub fn logits(&self, seq: &TokenSequence) -> Result<Array2<f64>> {
        let batch = Batch::new(&[seq])?;
        Ok(self.forward_cached(&batch, None)?.logits)
    }

    pub fn loss_and_grads(
        &self,
        batch: &Batch,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(f64, Grads)> {
        let cache = self.forward_cached(batch, dropout_rng)?;
        if cache.n_valid == 0 {
            return Err(Error::EmptyInput("trainable positions"));
        }
        let grads = self.backward(batch, &cache);
        Ok((cache.loss, grads))
    }

    fn backward(&self, batch: &Batch, cache: &FwdCache) -> Grads {
        let (b, t) = (batch.n_rows(), batch.seq_len());
        let (d, heads) = (self.cfg.d_model, self.cfg.n_heads);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut g = Params::zeros(&self.cfg);

        // Head.
        g.head_w = cache.hf.t().dot(&cache.d_logits);
        g.head_b = cache.d_logits.sum_axis(Axis(0));
        let d_hf = cache.d_logits.dot(&self.p.head_w.t());

        // Final layer norm.
        let (mut d_x, dgf, dbf) = layernorm_bwd(&d_hf, &self.p.lnf.g, &cache.lnf);
        g.lnf.g = dgf;
        g.lnf.b = dbf;

        for (li, blk) in self.p.blocks.iter().enumerate().rev() {
            let bc = &cache.blocks[li];
            let gb = &mut g.blocks[li];

            // Feed-forward branch.
            let d_ff_out = match &bc.ff_mask {
                Some(m) => &d_x * m,
                None => d_x.clone(),
            };
            gb.ff.w2 = bc.h1.t().dot(&d_ff_out);
            gb.ff.b2 = d_ff_out.sum_axis(Axis(0));
            let d_h1 = d_ff_out.dot(&blk.ff.w2.t());
            let d_pre1 = &d_h1 * &bc.pre1.mapv(gelu_prime);
            gb.ff.w1 = bc.f.t().dot(&d_pre1);
            gb.ff.b1 = d_pre1.sum_axis(Axis(0));
            let d_f = d_pre1.dot(&blk.ff.w1.t());
            let (d_from_ln2, dg2, db2) = layernorm_bwd(&d_f, &blk.ln2.g, &bc.ln2);
            gb.ln2.g = dg2;
            gb.ln2.b = db2;
            let d_x_mid = &d_x + &d_from_ln2;

            // Attention branch.
            let d_attn_out = match &bc.attn_mask {
                Some(m) => &d_x_mid * m,
                None => d_x_mid.clone(),
            };
            gb.attn.wo = bc.ctx.t().dot(&d_attn_out);
            gb.attn.bo = d_attn_out.sum_axis(Axis(0));
            let d_ctx = d_attn_out.dot(&blk.attn.wo.t());
            let mut d_q = Array2::zeros((b * t, d));
            let mut d_k = Array2::zeros((b * t, d));
            let mut d_v = Array2::zeros((b * t, d));
            for bi in 0..b {
                let row_range = bi * t..(bi + 1) * t;
                for h in 0..heads {
                    let col_range = h * dh..(h + 1) * dh;
                    let p = &bc.probs[bi * heads + h];
                    let d_ctx_h = d_ctx.slice(s![row_range.clone(), col_range.clone()]);
                    let vh = bc.v.slice(s![row_range.clone(), col_range.clone()]);
                    let kh = bc.k.slice(s![row_range.clone(), col_range.clone()]);
                    let qh = bc.q.slice(s![row_range.clone(), col_range.clone()]);
                    let d_p = d_ctx_h.dot(&vh.t());
                    let d_vh = p.t().dot(&d_ctx_h);
                    let d_scores = softmax_rows_bwd(p, &d_p);
                    let d_qh = d_scores.dot(&kh).mapv(|v| v * scale);
                    let d_kh = d_scores.t().dot(&qh).mapv(|v| v * scale);
                    d_q.slice_mut(s![row_range.clone(), col_range.clone()]).assign(&d_qh);
                    d_k.slice_mut(s![row_range.clone(), col_range.clone()]).assign(&d_kh);
                    d_v.slice_mut(s![row_range.clone(), col_range.clone()]).assign(&d_vh);
                }
            }
            gb.attn.wq = bc.a.t().dot(&d_q);
            gb.attn.bq = d_q.sum_axis(Axis(0));
            gb.attn.wk = bc.a.t().dot(&d_k);
            gb.attn.bk = d_k.sum_axis(Axis(0));
            gb.attn.wv = bc.a.t().dot(&d_v);
            gb.attn.bv = d_v.sum_axis(Axis(0));
            let d_a = d_q.dot(&blk.attn.wq.t())
                + d_k.dot(&blk.attn.wk.t())
                + d_v.dot(&blk.attn.wv.t());
            let (d_from_ln1, dg1, db1) = layernorm_bwd(&d_a, &blk.ln1.g, &bc.ln1);
            gb.ln1.g = dg1;
            gb.ln1.b = db1;
            d_x = &d_x_mid + &d_from_ln1;
        }

        // Embedding scatter.
        let d_x0 = match &cache.emb_mask {
            Some(m) => &d_x * m,
            None => d_x,
        };
        for bi in 0..b {
            for i in 0..t {
                let r = bi * t + i;
                let id = batch.ids[[bi, i]];
                let ty = batch.types[[bi, i]];
                for j in 0..d {
                    let v = d_x0[[r, j]];
                    g.tok[[id, j]] += v;
                    g.typ[[ty, j]] += v;
                    g.pos[[i, j]] += v;
                }
            }
        }
        Grads(g)
    }

    // ----- incremental decoding -----

    pub fn empty_cache(&self) -> KvCache {
        KvCache {
            pos: 0,
            layers: vec![(Vec::new(), Vec::new()); self.cfg.n_layers],
        }
    }

    /// Feed a prompt token by token; returns the cache and the logits after
    /// the last token.
    pub fn prefill(&self, ids: &[TokenId], types: &[TokenType]) -> Result<(KvCache, Array1<f64>)> {
        if ids.is_empty() || ids.len() != types.len() {
            return Err(Error::Config("prefill needs matching, nonempty ids and types".into()));
        }
        let mut cache = vec![self.empty_cache()];
        let mut last = None;
        for (&id, &ty) in ids.iter().zip(types) {
            let logits = self.step_many(&mut cache, &[id], &[ty])?;
            last = Some(logits.row(0).to_owned());
        }
        Ok((cache.pop().unwrap(), last.unwrap()))
    }

    /// Advance each cache by one token; row g of the result holds the
    /// next-token logits for `caches[g]`. Caches may sit at different
    /// positions. All rows share the model weights, so the projections are
    /// batched across caches.
    pub fn step_many(
        &self,
        caches: &mut [KvCache],
        ids: &[TokenId],
        types: &[TokenType],
    ) -> Result<Array2<f64>> {
        let n = caches.len();
        if n == 0 || ids.len() != n || types.len() != n {
            return Err(Error::Config("step_many needs one id and type per cache".into()));
        }
        let (d, heads) = (self.cfg.d_model, self.cfg.n_heads);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut x = Array2::zeros((n, d));
        for (gi, cache) in caches.iter().enumerate() {
            if cache.pos >= self.cfg.context {
                return Err(Error::SequenceTooLong {
                    len: cache.pos + 1,
                    max: self.cfg.context,
                });
            }
            let id = ids[gi].idx();
            if id >= self.cfg.vocab_size {
                return Err(Error::UnknownToken(format!("id {}", ids[gi])));
            }
            let ty = types[gi].idx();
            for j in 0..d {
                x[[gi, j]] = self.p.tok[[id, j]] + self.p.typ[[ty, j]] + self.p.pos[[cache.pos, j]];
            }
        }

        for (li, blk) in self.p.blocks.iter().enumerate() {
            let (a, _) = layernorm_fwd(&x, &blk.ln1.g, &blk.ln1.b);
            let q = a.dot(&blk.attn.wq) + &blk.attn.bq;
            let k = a.dot(&blk.attn.wk) + &blk.attn.bk;
            let v = a.dot(&blk.attn.wv) + &blk.attn.bv;
            let mut ctx = Array2::zeros((n, d));
            for (gi, cache) in caches.iter_mut().enumerate() {
                let (ck, cv) = &mut cache.layers[li];
                ck.extend(k.row(gi).iter());
                cv.extend(v.row(gi).iter());
                let tlen = cache.pos + 1;
                debug_assert_eq!(ck.len(), tlen * d);
                for h in 0..heads {
                    let c0 = h * dh;
                    // Scores of the new query against every cached key.
                    let mut scores = Vec::with_capacity(tlen);
                    for j in 0..tlen {
                        let mut sum = 0.0;
                        for c in 0..dh {
                            sum += q[[gi, c0 + c]] * ck[j * d + c0 + c];
                        }
                        scores.push(sum * scale);
                    }
                    math::softmax_slice(&mut scores);
                    for c in 0..dh {
                        let mut acc = 0.0;
                        for j in 0..tlen {
                            acc += scores[j] * cv[j * d + c0 + c];
                        }
                        ctx[[gi, c0 + c]] = acc;
                    }
                }
            }
            let attn_out = ctx.dot(&blk.attn.wo) + &blk.attn.bo;
            let x_mid = &x + &attn_out;
            let (f, _) = layernorm_fwd(&x_mid, &blk.ln2.g, &blk.ln2.b);
            let h1 = (f.dot(&blk.ff.w1) + &blk.ff.b1).mapv(gelu);
            let ff_out = h1.dot(&blk.ff.w2) + &blk.ff.b2;
            x = &x_mid + &ff_out;
            ensure_finite(&format!("block {li} activations (decode)"), &x)?;
        }
        let (hf, _) = layernorm_fwd(&x, &self.p.lnf.g, &self.p.lnf.b);
        let logits = hf.dot(&self.p.head_w) + &self.p.head_b;
        ensure_finite("output logits (decode)", &logits)?;
        for cache in caches.iter_mut() {
            cache.pos += 1;
        }
        Ok(logits)
    }
}

/// Per-sequence key/value memory for incremental decoding. Cloning forks
/// the sequence (used when a beam spawns successors).
#[derive(Clone)]
pub struct KvCache {
    pos: usize,
    /// Per layer: flattened t×d key and value rows.
    layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl KvCache {
    pub fn position(&self) -> usize {
        self.pos
    }
}
