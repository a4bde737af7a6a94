//! The cross-view transformer.
//!
//! Two token sequences (RoI view and connectivity view) pass through per-view
//! encoder stacks. Each encoder layer is post-norm: `x1 = LN(x + MSA(x))`,
//! `out = LN(x1 + FFN(x1))`. After every `fusion_every` layers a cross-view
//! step lets each view's CLS token attend over the other view's content
//! tokens, so exchange cost stays linear in token count. The two CLS tokens
//! are pooled as the subject embedding and feed two affine classifier heads
//! whose softmax scores are averaged.

use crate::error::{Error, Result};
use crate::params::{self, Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::tokens::{self, TokenizerIds};
use crate::{ingest::ViewPair, macs};
use rand_chacha::ChaCha8Rng;

/// Weight initialization scale. Post-norm residual stacks lose their input
/// dependence when initialized too small: every CLS embedding collapses to
/// the learned constants and both losses sit on their uniform plateaus.
/// 0.1 keeps token representations input-driven at depth 4 while staying
/// clear of attention saturation.
pub const INIT_SIGMA: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    /// RoI count M.
    pub m: usize,
    /// Connectivity patch side P.
    pub patch_size: usize,
    pub d_model: usize,
    pub num_heads: usize,
    /// FFN hidden width as a multiple of d_model.
    pub ffn_ratio: usize,
    pub layers: usize,
    pub num_classes: usize,
    /// Apply the cross-view step after every this many encoder layers.
    pub fusion_every: usize,
}

impl ModelConfig {
    pub fn defaults_for(m: usize) -> ModelConfig {
        ModelConfig {
            m,
            patch_size: 30,
            d_model: 64,
            num_heads: 4,
            ffn_ratio: 4,
            layers: 4,
            num_classes: 2,
            fusion_every: 1,
        }
    }

    /// Connectivity token count N.
    pub fn n(&self) -> usize {
        tokens::patch_count(self.m, self.patch_size)
    }

    /// Per-head width.
    pub fn d_k(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::Config(format!("m must be at least 2, got {}", self.m)));
        }
        if self.patch_size < 2 {
            return Err(Error::Config(format!("patch_size must be at least 2, got {}", self.patch_size)));
        }
        if self.d_model == 0 || self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "num_heads ({}) must divide d_model ({})",
                self.num_heads, self.d_model
            )));
        }
        if self.layers == 0 {
            return Err(Error::Config("layers must be at least 1".into()));
        }
        if self.ffn_ratio == 0 {
            return Err(Error::Config("ffn_ratio must be at least 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be at least 2, got {}", self.num_classes)));
        }
        if self.fusion_every == 0 || self.fusion_every > self.layers {
            return Err(Error::Config(format!(
                "fusion_every must lie in [1, layers={}], got {}",
                self.layers, self.fusion_every
            )));
        }
        Ok(())
    }
}

/// Which branches of the model run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ViewMode {
    pub roi: bool,
    pub conn: bool,
    pub cross: bool,
}

impl ViewMode {
    pub fn full() -> ViewMode {
        ViewMode { roi: true, conn: true, cross: true }
    }

    pub fn no_cross() -> ViewMode {
        ViewMode { roi: true, conn: true, cross: false }
    }

    pub fn roi_only() -> ViewMode {
        ViewMode { roi: true, conn: false, cross: false }
    }

    pub fn conn_only() -> ViewMode {
        ViewMode { roi: false, conn: true, cross: false }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.roi && !self.conn {
            return Err(Error::Config("at least one view must be enabled".into()));
        }
        if self.cross && !(self.roi && self.conn) {
            return Err(Error::Config("cross-view fusion needs both views enabled".into()));
        }
        Ok(())
    }
}

// ── parameter id bundles ──

#[derive(Debug, Clone, Copy)]
pub struct HeadIds {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
}

#[derive(Debug, Clone)]
pub struct AttnIds {
    pub heads: Vec<HeadIds>,
    pub wo: ParamId,
    pub bo: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct LnIds {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct FfnIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// One post-norm block: MSA, LN, FFN, LN. Used for both the in-branch
/// encoder layers and each cross-view direction.
#[derive(Debug, Clone)]
pub struct EncoderIds {
    pub attn: AttnIds,
    pub ln1: LnIds,
    pub ffn: FfnIds,
    pub ln2: LnIds,
}

#[derive(Debug, Clone)]
pub struct LayerIds {
    pub roi: EncoderIds,
    pub conn: EncoderIds,
    /// CLS_R attending over connectivity content.
    pub cross_rc: EncoderIds,
    /// CLS_C attending over RoI content.
    pub cross_cr: EncoderIds,
}

#[derive(Debug, Clone, Copy)]
pub struct ClassifierIds {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone)]
pub struct ModelIds {
    pub tok: TokenizerIds,
    pub layers: Vec<LayerIds>,
    pub head_r: ClassifierIds,
    pub head_c: ClassifierIds,
}

fn register_attn<S: Scalar>(
    store: &mut ParamStore<S>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d_model: usize,
    num_heads: usize,
    d_k: usize,
) -> AttnIds {
    let mut heads = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        heads.push(HeadIds {
            wq: store.register(format!("{prefix}.h{h}.wq"), params::gaussian(rng, d_model, d_k, INIT_SIGMA)),
            bq: store.register(format!("{prefix}.h{h}.bq"), params::zeros(1, d_k)),
            wk: store.register(format!("{prefix}.h{h}.wk"), params::gaussian(rng, d_model, d_k, INIT_SIGMA)),
            bk: store.register(format!("{prefix}.h{h}.bk"), params::zeros(1, d_k)),
            wv: store.register(format!("{prefix}.h{h}.wv"), params::gaussian(rng, d_model, d_k, INIT_SIGMA)),
            bv: store.register(format!("{prefix}.h{h}.bv"), params::zeros(1, d_k)),
        });
    }
    AttnIds {
        heads,
        wo: store.register(format!("{prefix}.wo"), params::gaussian(rng, d_model, d_model, INIT_SIGMA)),
        bo: store.register(format!("{prefix}.bo"), params::zeros(1, d_model)),
    }
}

pub(crate) fn register_encoder<S: Scalar>(
    store: &mut ParamStore<S>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    cfg: &ModelConfig,
) -> EncoderIds {
    let d = cfg.d_model;
    let hidden = cfg.ffn_ratio * d;
    let attn = register_attn(store, rng, &format!("{prefix}.attn"), d, cfg.num_heads, cfg.d_k());
    let ln1 = LnIds {
        gain: store.register(format!("{prefix}.ln1.gain"), params::ones(1, d)),
        bias: store.register(format!("{prefix}.ln1.bias"), params::zeros(1, d)),
    };
    let ffn = FfnIds {
        w1: store.register(format!("{prefix}.ffn.w1"), params::gaussian(rng, d, hidden, INIT_SIGMA)),
        b1: store.register(format!("{prefix}.ffn.b1"), params::zeros(1, hidden)),
        w2: store.register(format!("{prefix}.ffn.w2"), params::gaussian(rng, hidden, d, INIT_SIGMA)),
        b2: store.register(format!("{prefix}.ffn.b2"), params::zeros(1, d)),
    };
    let ln2 = LnIds {
        gain: store.register(format!("{prefix}.ln2.gain"), params::ones(1, d)),
        bias: store.register(format!("{prefix}.ln2.bias"), params::zeros(1, d)),
    };
    EncoderIds { attn, ln1, ffn, ln2 }
}

// ── the model ──

#[derive(Debug)]
pub struct CvFormer<S: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<S>,
    pub ids: ModelIds,
}

/// Graph handles produced by one forward pass.
pub struct ForwardOut {
    /// Pooled CLS embedding of the RoI view, 1 x d_model.
    pub cls_r: Option<Var>,
    pub cls_c: Option<Var>,
    pub logits_r: Option<Var>,
    pub logits_c: Option<Var>,
    /// 1 x num_classes, sums to 1.
    pub fused_probs: Var,
}

impl<S: Scalar> CvFormer<S> {
    /// Build a freshly initialized model. All parameters are registered
    /// regardless of the view mode used later, so checkpoints and update
    /// order never depend on runtime flags.
    pub fn new(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<CvFormer<S>> {
        config.validate()?;
        let mut store = ParamStore::new();
        let tok =
            TokenizerIds::register(&mut store, rng, config.m, config.patch_size, config.d_model, INIT_SIGMA);
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            layers.push(LayerIds {
                roi: register_encoder(&mut store, rng, &format!("enc{l}.roi"), &config),
                conn: register_encoder(&mut store, rng, &format!("enc{l}.conn"), &config),
                cross_rc: register_encoder(&mut store, rng, &format!("enc{l}.cross.rc"), &config),
                cross_cr: register_encoder(&mut store, rng, &format!("enc{l}.cross.cr"), &config),
            });
        }
        let head_r = ClassifierIds {
            w: store.register("head.roi.w", params::gaussian(rng, config.d_model, config.num_classes, INIT_SIGMA)),
            b: store.register("head.roi.b", params::zeros(1, config.num_classes)),
        };
        let head_c = ClassifierIds {
            w: store.register("head.conn.w", params::gaussian(rng, config.d_model, config.num_classes, INIT_SIGMA)),
            b: store.register("head.conn.b", params::zeros(1, config.num_classes)),
        };
        let ids = ModelIds { tok, layers, head_r, head_c };
        Ok(CvFormer { config, store, ids })
    }

    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        bound: &Bound,
        views: &ViewPair<S>,
        mode: ViewMode,
    ) -> Result<ForwardOut> {
        mode.validate()?;
        let cfg = &self.config;
        let mut seq_r = if mode.roi {
            Some(tokens::encode_roi(tape, bound, &self.ids.tok, cfg.m, &views.roi_features)?)
        } else {
            None
        };
        let mut seq_c = if mode.conn {
            Some(tokens::encode_connectivity(
                tape,
                bound,
                &self.ids.tok,
                cfg.m,
                cfg.patch_size,
                &views.adjacency,
            )?)
        } else {
            None
        };

        for (l, layer) in self.ids.layers.iter().enumerate() {
            if let Some(sr) = seq_r {
                seq_r = Some(encoder_layer(tape, bound, &layer.roi, sr)?);
            }
            if let Some(sc) = seq_c {
                seq_c = Some(encoder_layer(tape, bound, &layer.conn, sc)?);
            }
            if mode.cross && (l + 1) % cfg.fusion_every == 0 {
                let (nr, nc) =
                    cross_view(tape, bound, &layer.cross_rc, &layer.cross_cr, seq_r.unwrap(), seq_c.unwrap())?;
                seq_r = Some(nr);
                seq_c = Some(nc);
            }
        }

        let mut cls_r = None;
        let mut cls_c = None;
        let mut logits_r = None;
        let mut logits_c = None;
        let mut probs = Vec::new();
        if let Some(sr) = seq_r {
            let cls = tape.slice_rows(sr, 0, 1)?;
            let logits = affine(tape, bound, cls, self.ids.head_r.w, self.ids.head_r.b)?;
            probs.push(tape.softmax_rows(logits)?);
            cls_r = Some(cls);
            logits_r = Some(logits);
        }
        if let Some(sc) = seq_c {
            let cls = tape.slice_rows(sc, 0, 1)?;
            let logits = affine(tape, bound, cls, self.ids.head_c.w, self.ids.head_c.b)?;
            probs.push(tape.softmax_rows(logits)?);
            cls_c = Some(cls);
            logits_c = Some(logits);
        }
        let fused_probs = match probs.as_slice() {
            [one] => *one,
            [a, b] => {
                let sum = tape.add(*a, *b)?;
                tape.scale(sum, S::from_f64(0.5))?
            }
            _ => unreachable!("mode validation guarantees one or two views"),
        };
        Ok(ForwardOut { cls_r, cls_c, logits_r, logits_c, fused_probs })
    }
}

// ── graph building blocks ──

fn affine<S: Scalar>(tape: &mut Tape<S>, bound: &Bound, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let xw = tape.matmul(x, bound.v(w))?;
    tape.add_row(xw, bound.v(b))
}

/// Scaled dot-product attention: softmax_rows(q kᵀ / sqrt(d_k)) v.
pub fn attention<S: Scalar>(tape: &mut Tape<S>, q: Var, k: Var, v: Var, d_k: usize) -> Result<Var> {
    let scores = tape.matmul_nt(q, k)?;
    let scaled = tape.scale(scores, S::from_f64(1.0 / (d_k as f64).sqrt()))?;
    let weights = tape.softmax_rows(scaled)?;
    tape.matmul(weights, v)
}

/// Multi-head attention with queries from `q_src` and keys/values from
/// `kv_src`; the per-head outputs are concatenated and output-projected.
pub fn mha<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &Bound,
    ids: &AttnIds,
    q_src: Var,
    kv_src: Var,
    d_k: usize,
) -> Result<Var> {
    let mut outs = Vec::with_capacity(ids.heads.len());
    for head in &ids.heads {
        let q = affine(tape, bound, q_src, head.wq, head.bq)?;
        let k = affine(tape, bound, kv_src, head.wk, head.bk)?;
        let v = affine(tape, bound, kv_src, head.wv, head.bv)?;
        outs.push(attention(tape, q, k, v, d_k)?);
    }
    let cat = if outs.len() == 1 { outs[0] } else { tape.concat(1, &outs)? };
    affine(tape, bound, cat, ids.wo, ids.bo)
}

fn ffn<S: Scalar>(tape: &mut Tape<S>, bound: &Bound, ids: &FfnIds, x: Var) -> Result<Var> {
    let h = affine(tape, bound, x, ids.w1, ids.b1)?;
    let h = tape.gelu(h)?;
    affine(tape, bound, h, ids.w2, ids.b2)
}

fn ln<S: Scalar>(tape: &mut Tape<S>, bound: &Bound, ids: &LnIds, x: Var) -> Result<Var> {
    tape.layer_norm(x, bound.v(ids.gain), bound.v(ids.bias), LN_EPS)
}

/// Post-norm residual block applied to `x` with `kv` as the attention
/// key/value source. In-branch layers pass `kv = x`.
fn block<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &Bound,
    ids: &EncoderIds,
    x: Var,
    kv: Var,
    d_k: usize,
) -> Result<Var> {
    let msa = mha(tape, bound, &ids.attn, x, kv, d_k)?;
    let res = tape.add(x, msa)?;
    let x1 = ln(tape, bound, &ids.ln1, res)?;
    let f = ffn(tape, bound, &ids.ffn, x1)?;
    let res2 = tape.add(x1, f)?;
    ln(tape, bound, &ids.ln2, res2)
}

pub fn encoder_layer<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &Bound,
    ids: &EncoderIds,
    x: Var,
) -> Result<Var> {
    let d_k = {
        let (_, d_kq) = tape.dims(bound.v(ids.attn.heads[0].wq));
        d_kq
    };
    block(tape, bound, ids, x, x, d_k)
}

/// Cross-view fusion. Each view's CLS token (row 0) queries the other
/// view's content rows, then passes through its own post-norm FFN block.
/// Content rows are reused untouched, and both directions read the
/// pre-update opposite content.
pub fn cross_view<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &Bound,
    rc: &EncoderIds,
    cr: &EncoderIds,
    seq_r: Var,
    seq_c: Var,
) -> Result<(Var, Var)> {
    let (rows_r, _) = tape.dims(seq_r);
    let (rows_c, _) = tape.dims(seq_c);
    let cls_r = tape.slice_rows(seq_r, 0, 1)?;
    let content_r = tape.slice_rows(seq_r, 1, rows_r - 1)?;
    let cls_c = tape.slice_rows(seq_c, 0, 1)?;
    let content_c = tape.slice_rows(seq_c, 1, rows_c - 1)?;

    let d_k = {
        let (_, d_kq) = tape.dims(bound.v(rc.attn.heads[0].wq));
        d_kq
    };
    let new_cls_r = block(tape, bound, rc, cls_r, content_c, d_k)?;
    let new_cls_c = block(tape, bound, cr, cls_c, content_r, d_k)?;

    let out_r = tape.concat(0, &[new_cls_r, content_r])?;
    let out_c = tape.concat(0, &[new_cls_c, content_c])?;
    Ok((out_r, out_c))
}

/// Attention-core shape for the complexity benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnMode {
    /// `count` queries over `count` keys.
    Full,
    /// One CLS query over `count` keys.
    ClsQuery,
}

/// MACs consumed by a single attention core at the given content-token
/// count, measured by running it against the thread-local counter.
pub fn count_attention_macs<S: Scalar>(count: usize, config: &ModelConfig, mode: AttnMode) -> Result<u64> {
    let d_k = config.d_k();
    let a = match mode {
        AttnMode::Full => count,
        AttnMode::ClsQuery => 1,
    };
    let mut tape = Tape::<S>::new();
    let q = tape.input(&Tensor::zeros(vec![a, d_k]))?;
    let k = tape.input(&Tensor::zeros(vec![count, d_k]))?;
    let v = tape.input(&Tensor::zeros(vec![count, d_k]))?;
    macs::reset();
    attention(&mut tape, q, k, v, d_k)?;
    Ok(macs::read())
}
