//! Training objectives: InfoNCE, pairwise sigmoid, and ITM binary
//! cross-entropy through a small cross-attention head.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::{
    image_backward, image_forward, DimsConfig, ImageEncoding, ImageTrace, ModelBundle, TextEncoding, Variant,
};
use crate::error::{Error, Result};
use crate::mapper::{mapper_backward, mapper_forward, mapper_input, MapperTrace};
use crate::numkit::layers::{gelu, gelu_backward, softmax_backward, softmax_rows, Linear};
use crate::numkit::params::{init_linear, randn, LayerParams, ParamGrads};
use crate::numkit::{dot, lit, Scalar, Tensor};
use crate::rng::Rng;

/// Fixed contrastive temperature.
pub const TAU: f64 = 0.07;
/// Fixed sigmoid-loss scale and bias.
pub const SIGMOID_SCALE: f64 = 10.0;
pub const SIGMOID_BIAS: f64 = -10.0;
/// Learnable query tokens in the ITM head.
pub const ITM_QUERIES: usize = 4;

/// Which text conditions the image encoding behind score `(i, j)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// Image `j` re-encoded with prompts from row text `i` (b² encodings).
    #[default]
    PerRow,
    /// Image `j` encoded once with prompts from its own text `j` (b encodings).
    Diagonal,
}

impl std::str::FromStr for Conditioning {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_row" | "per-row" => Ok(Conditioning::PerRow),
            "diagonal" => Ok(Conditioning::Diagonal),
            _ => Err(Error::config(format!("unknown conditioning `{s}`"))),
        }
    }
}

/// Text-by-image similarity for one batch. Row `i` is text `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix<T = f32> {
    /// Raw cosines.
    pub cosines: Tensor<T>,
    /// `cosines / τ`.
    pub scores: Tensor<T>,
    pub conditioning: Conditioning,
}

impl<T: Scalar> ScoreMatrix<T> {
    pub fn from_cosines(cosines: Tensor<T>, conditioning: Conditioning) -> Self {
        let scores = cosines.scale(lit::<T>(1.0 / TAU));
        Self {
            cosines,
            scores,
            conditioning,
        }
    }

    pub fn size(&self) -> usize {
        self.scores.rows()
    }
}

/// Loss value and its gradient with respect to the input matrix.
#[derive(Debug, Clone)]
pub struct LossGrad<T> {
    pub loss: T,
    pub grad: Tensor<T>,
}

fn check_square<T: Scalar>(m: &Tensor<T>, op: &'static str) -> Result<()> {
    if m.rows() != m.cols() {
        return Err(Error::Dimension {
            op,
            left: m.shape(),
            right: (m.rows(), m.rows()),
        });
    }
    Ok(())
}

/// Text-to-image InfoNCE over raw logits; targets on the diagonal. The
/// gradient is with respect to `scores`.
pub fn info_nce_scores<T: Scalar>(scores: &Tensor<T>) -> Result<LossGrad<T>> {
    check_square(scores, "info_nce")?;
    let b = scores.rows();
    let bn = lit::<T>(b as f64);
    let mut grad = softmax_rows(scores);
    let mut loss = T::zero();
    for i in 0..b {
        let row = scores.row(i);
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        loss += lse - row[i];
        let g = grad.row_mut(i);
        g[i] -= T::one();
        g.iter_mut().for_each(|v| *v /= bn);
    }
    Ok(LossGrad { loss: loss / bn, grad })
}

pub fn info_nce<T: Scalar>(m: &ScoreMatrix<T>) -> Result<T> {
    Ok(info_nce_scores(&m.scores)?.loss)
}

/// `softplus(x) = log(1 + eˣ)`, stable on both tails.
fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Pairwise sigmoid loss over raw cosines:
/// `-(1/b²) Σ log σ(z_ij (scale · cos_ij + bias))`, `z = +1` on the diagonal.
/// The gradient is with respect to `cosines`.
pub fn sigmoid_pairwise_cosines<T: Scalar>(cosines: &Tensor<T>, scale: T, bias: T) -> Result<LossGrad<T>> {
    check_square(cosines, "sigmoid_pairwise")?;
    let b = cosines.rows();
    let norm = lit::<T>((b * b) as f64);
    let mut grad = Tensor::zeros(b, b);
    let mut loss = T::zero();
    for i in 0..b {
        for j in 0..b {
            let z = if i == j { T::one() } else { -T::one() };
            let logit = z * (scale * cosines.get(i, j) + bias);
            // -log σ(x) = softplus(-x)
            loss += softplus(-logit);
            grad.set(i, j, -z * scale * sigmoid(-logit) / norm);
        }
    }
    Ok(LossGrad {
        loss: loss / norm,
        grad,
    })
}

pub fn sigmoid_pairwise<T: Scalar>(m: &ScoreMatrix<T>, scale: T, bias: T) -> Result<T> {
    Ok(sigmoid_pairwise_cosines(&m.cosines, scale, bias)?.loss)
}

/// Binary cross-entropy on a logit, `max(z,0) - z·y + log(1 + e^{-|z|})`.
/// Returns the loss and `∂/∂z = σ(z) - y`.
pub fn bce<T: Scalar>(logit: T, label: T) -> Result<(T, T)> {
    if label != T::zero() && label != T::one() {
        return Err(Error::data(format!("BCE label must be 0 or 1, got {label}")));
    }
    let loss = logit.max(T::zero()) - logit * label + (-logit.abs()).exp().ln_1p();
    Ok((loss, sigmoid(logit) - label))
}

/// Stand-in for the query-token transformer feeding the ITM head: `q`
/// learned queries cross-attend the final patch states, get mean-pooled,
/// concatenated with a projection of the text CLS, and scored by a 2-layer MLP.
pub fn init_itm_head<T: Scalar>(dims: &DimsConfig, trainable: bool, rng: &mut Rng) -> LayerParams<T> {
    let d = dims.d_v;
    let mut p = LayerParams::new("itm_head", trainable);
    p.insert("queries", randn(ITM_QUERIES, d, 1.0, rng));
    for k in ["xattn.q", "xattn.k", "xattn.v", "xattn.o"] {
        init_linear(&mut p, k, d, d, rng);
    }
    init_linear(&mut p, "text", dims.d_t, d, rng);
    init_linear(&mut p, "mlp.fc1", 2 * d, d, rng);
    init_linear(&mut p, "mlp.fc2", d, 1, rng);
    p
}

struct ItmLayers<'a, T> {
    queries: &'a Tensor<T>,
    q: Linear<'a, T>,
    k: Linear<'a, T>,
    v: Linear<'a, T>,
    o: Linear<'a, T>,
    text: Linear<'a, T>,
    fc1: Linear<'a, T>,
    fc2: Linear<'a, T>,
}

impl<'a, T: Scalar> ItmLayers<'a, T> {
    fn new(p: &'a LayerParams<T>) -> Result<Self> {
        Ok(Self {
            queries: p.get("queries")?,
            q: Linear::from_params(p, "xattn.q")?,
            k: Linear::from_params(p, "xattn.k")?,
            v: Linear::from_params(p, "xattn.v")?,
            o: Linear::from_params(p, "xattn.o")?,
            text: Linear::from_params(p, "text")?,
            fc1: Linear::from_params(p, "mlp.fc1")?,
            fc2: Linear::from_params(p, "mlp.fc2")?,
        })
    }
}

/// Saved activations of one ITM head evaluation.
#[derive(Debug, Clone)]
pub struct ItmTrace<T> {
    patch_states: Tensor<T>,
    t_cls: Tensor<T>,
    qp: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    /// Query-to-patch attention, one `q × P` matrix per head.
    pub attn: Vec<Tensor<T>>,
    ctx: Tensor<T>,
    joint: Tensor<T>,
    f1: Tensor<T>,
    g: Tensor<T>,
    pub logit: T,
}

pub fn itm_forward<T: Scalar>(
    head: &LayerParams<T>,
    heads: usize,
    t_cls: &[T],
    patch_states: &Tensor<T>,
) -> Result<ItmTrace<T>> {
    let l = ItmLayers::new(head)?;
    let d = l.queries.cols();
    if patch_states.cols() != d || l.text.in_dim() != t_cls.len() || heads == 0 || d % heads != 0 {
        return Err(Error::config(format!(
            "ITM head width {d} / text {} incompatible with patch states {:?}, text {} and {heads} heads",
            l.text.in_dim(),
            patch_states.shape(),
            t_cls.len()
        )));
    }
    let dh = d / heads;
    let scale = lit::<T>(1.0 / (dh as f64).sqrt());
    let qp = l.q.forward(l.queries)?;
    let k = l.k.forward(patch_states)?;
    let v = l.v.forward(patch_states)?;
    let mut ctx = Tensor::zeros(qp.rows(), d);
    let mut attn = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let a = softmax_rows(&qp.slice_cols(lo, hi).matmul_t(&k.slice_cols(lo, hi))?.scale(scale));
        ctx.set_cols(lo, &a.matmul(&v.slice_cols(lo, hi))?);
        attn.push(a);
    }
    let mut states = l.o.forward(&ctx)?;
    states.add_assign(l.queries)?;
    let pooled = states.mean_rows();
    let t_cls_t = Tensor::row_vector(t_cls.to_vec());
    let tp = l.text.forward(&t_cls_t)?;
    let mut joint = pooled;
    joint.extend_from_slice(tp.data());
    let joint = Tensor::row_vector(joint);
    let f1 = l.fc1.forward(&joint)?;
    let g = gelu(&f1);
    let logit = l.fc2.forward(&g)?.get(0, 0);
    Ok(ItmTrace {
        patch_states: patch_states.clone(),
        t_cls: t_cls_t,
        qp,
        k,
        v,
        attn,
        ctx,
        joint,
        f1,
        g,
        logit,
    })
}

/// Head parameter gradients (when requested) and the gradient on the patch
/// states, for an upstream `∂L/∂logit`.
pub fn itm_backward<T: Scalar>(
    head: &LayerParams<T>,
    heads: usize,
    trace: &ItmTrace<T>,
    grad_logit: T,
    want_params: bool,
) -> Result<(Option<ParamGrads<T>>, Tensor<T>)> {
    let l = ItmLayers::new(head)?;
    let d = l.queries.cols();
    let dh = d / heads;
    let nq = l.queries.rows();
    let scale = lit::<T>(1.0 / (dh as f64).sqrt());
    let mut grads = ParamGrads::new();

    let gout = Tensor::filled(1, 1, grad_logit);
    let (gg, g_fc2) = l.fc2.backward(&trace.g, &gout, want_params)?;
    let gf1 = gelu_backward(&trace.f1, &gg);
    let (gjoint, g_fc1) = l.fc1.backward(&trace.joint, &gf1, want_params)?;
    let gpooled = &gjoint.data()[..d];
    let gtp = Tensor::row_vector(gjoint.data()[d..].to_vec());
    let (_, g_text) = l.text.backward(&trace.t_cls, &gtp, want_params)?;

    let inv_q = lit::<T>(1.0 / nq as f64);
    let mut gstates = Tensor::zeros(nq, d);
    for i in 0..nq {
        for (o, &g) in gstates.row_mut(i).iter_mut().zip(gpooled) {
            *o = g * inv_q;
        }
    }
    let (gctx, g_o) = l.o.backward(&trace.ctx, &gstates, want_params)?;
    let mut gqp = Tensor::zeros(nq, d);
    let mut gk = Tensor::zeros(trace.k.rows(), d);
    let mut gv = Tensor::zeros(trace.v.rows(), d);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let a = &trace.attn[h];
        let gctx_h = gctx.slice_cols(lo, hi);
        let ga = gctx_h.matmul_t(&trace.v.slice_cols(lo, hi))?;
        gv.set_cols(lo, &a.t_matmul(&gctx_h)?);
        let gs = softmax_backward(a, &ga).scale(scale);
        gqp.set_cols(lo, &gs.matmul(&trace.k.slice_cols(lo, hi))?);
        gk.set_cols(lo, &gs.t_matmul(&trace.qp.slice_cols(lo, hi))?);
    }
    let (gqueries_proj, g_q) = l.q.backward(l.queries, &gqp, want_params)?;
    let (mut gpatch, g_k) = l.k.backward(&trace.patch_states, &gk, want_params)?;
    let (gpatch_v, g_v) = l.v.backward(&trace.patch_states, &gv, want_params)?;
    gpatch.add_assign(&gpatch_v)?;

    if !want_params {
        return Ok((None, gpatch));
    }
    let mut gqueries = gstates;
    gqueries.add_assign(&gqueries_proj)?;
    grads.insert("queries".to_string(), gqueries);
    let named = [
        ("xattn.q", g_q),
        ("xattn.k", g_k),
        ("xattn.v", g_v),
        ("xattn.o", g_o),
        ("text", g_text),
        ("mlp.fc1", g_fc1),
        ("mlp.fc2", g_fc2),
    ];
    for (prefix, g) in named {
        g.expect("requested").store(prefix, &mut grads, true);
    }
    Ok((Some(grads), gpatch))
}

/// Match logit for a text / re-encoded image pair.
pub fn itm_logit<T: Scalar>(
    head: &LayerParams<T>,
    heads: usize,
    text: &TextEncoding<T>,
    image: &ImageEncoding<T>,
) -> Result<T> {
    Ok(itm_forward(head, heads, &text.t_cls, &image.patch_states)?.logit)
}

/// One anchor text with its positive and negative re-encoded images.
#[derive(Debug, Clone)]
pub struct ItmExample<T = f32> {
    pub text: TextEncoding<T>,
    pub image_pos: ImageEncoding<T>,
    pub image_neg: ImageEncoding<T>,
}

impl<T: Scalar> ItmExample<T> {
    /// `[(logit_pos, 1), (logit_neg, 0)]`
    pub fn logits(&self, head: &LayerParams<T>, heads: usize) -> Result<[(T, T); 2]> {
        Ok([
            (itm_logit(head, heads, &self.text, &self.image_pos)?, T::one()),
            (itm_logit(head, heads, &self.text, &self.image_neg)?, T::zero()),
        ])
    }

    /// Mean BCE over the positive and negative.
    pub fn loss(&self, head: &LayerParams<T>, heads: usize) -> Result<T> {
        let mut total = T::zero();
        for (z, y) in self.logits(head, heads)? {
            total += bce(z, y)?.0;
        }
        Ok(total / lit::<T>(2.0))
    }
}

/// Which prompts condition image encodings inside a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptSource {
    /// Prompts from the model's mapper.
    Mapper,
    /// Plain frozen encoder, no prompts (reference model).
    None,
}

/// One training batch: paired text encodings and raw patches.
pub struct Batch<'a, T> {
    pub texts: Vec<&'a TextEncoding<T>>,
    pub patches: Vec<&'a Tensor<T>>,
    /// Frozen image embeddings, used to pick ITM negatives.
    pub stage1_images: Vec<&'a [T]>,
}

impl<T: Scalar> Batch<'_, T> {
    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    /// Hardest in-batch negative for each anchor: the other image with the
    /// highest frozen similarity to the anchor text, lowest index on ties.
    pub fn itm_negatives(&self) -> Vec<usize> {
        (0..self.len())
            .map(|i| {
                let mut best: Option<(usize, T)> = None;
                for (j, img) in self.stage1_images.iter().enumerate() {
                    if j == i {
                        continue;
                    }
                    let s = dot(&self.texts[i].t_joint, img);
                    if best.is_none_or(|(_, b)| s > b) {
                        best = Some((j, s));
                    }
                }
                best.expect("batch of at least two").0
            })
            .collect()
    }
}

/// Loss for one batch plus (optionally) gradients for the trainable parts.
#[derive(Debug, Clone)]
pub struct BatchOutcome<T> {
    pub loss: T,
    pub mapper_grads: Option<ParamGrads<T>>,
    pub itm_grads: Option<ParamGrads<T>>,
    pub scores: Option<ScoreMatrix<T>>,
}

#[derive(Debug, Clone, Copy)]
pub struct BatchOptions {
    pub conditioning: Conditioning,
    pub prompts: PromptSource,
    pub want_grads: bool,
    pub want_itm_grads: bool,
}

fn batch_prompts<T: Scalar>(
    model: &ModelBundle<T>,
    batch: &Batch<'_, T>,
    source: PromptSource,
) -> Result<Vec<Option<MapperTrace<T>>>> {
    batch
        .texts
        .iter()
        .map(|t| match source {
            PromptSource::Mapper => {
                let input = mapper_input(t, model.mapper_cfg.input_mode)?;
                mapper_forward(&model.mapper, &input, model.dims.d_v).map(Some)
            }
            PromptSource::None => Ok(None),
        })
        .collect()
}

/// Accumulates per-text prompt gradients into mapper parameter gradients,
/// in text order.
fn mapper_grads_from<T: Scalar>(
    model: &ModelBundle<T>,
    traces: &[Option<MapperTrace<T>>],
    prompt_grads: &[Tensor<T>],
) -> Result<ParamGrads<T>> {
    let mut total: ParamGrads<T> = model
        .mapper
        .tensors()
        .iter()
        .map(|(k, t)| (k.clone(), Tensor::zeros(t.rows(), t.cols())))
        .collect();
    for (trace, g) in traces.iter().zip(prompt_grads) {
        let Some(trace) = trace else { continue };
        let (grads, _) = mapper_backward(&model.mapper, trace, g)?;
        for (k, v) in grads {
            total.get_mut(&k).expect("mapper key").add_assign(&v)?;
        }
    }
    Ok(total)
}

/// Forward (and optionally backward) for one batch under the model's
/// variant objective. Parallel work is reduced in `(i, j)` order.
pub fn batch_objective<T: Scalar>(
    model: &ModelBundle<T>,
    batch: &Batch<'_, T>,
    opts: BatchOptions,
) -> Result<BatchOutcome<T>> {
    let b = batch.len();
    if b < 2 || batch.patches.len() != b {
        return Err(Error::config(format!("batch needs at least 2 aligned pairs, got {b}")));
    }
    let mapper_traces = batch_prompts(model, batch, opts.prompts)?;
    let prompt_of = |i: usize| mapper_traces[i].as_ref().map(|t| &t.prompts);
    match model.variant {
        Variant::C | Variant::S => contrastive_batch(model, batch, opts, &mapper_traces, &prompt_of),
        Variant::B => itm_batch(model, batch, opts, &mapper_traces, &prompt_of),
    }
}

fn contrastive_batch<'p, T: Scalar>(
    model: &ModelBundle<T>,
    batch: &Batch<'_, T>,
    opts: BatchOptions,
    mapper_traces: &[Option<MapperTrace<T>>],
    prompt_of: &(dyn Fn(usize) -> Option<&'p Tensor<T>> + Sync),
) -> Result<BatchOutcome<T>>
where
    T: 'p,
{
    let b = batch.len();
    // (conditioning text, image) for every encoding
    let pairs: Vec<(usize, usize)> = match opts.conditioning {
        Conditioning::PerRow => (0..b).flat_map(|i| (0..b).map(move |j| (i, j))).collect(),
        Conditioning::Diagonal => (0..b).map(|j| (j, j)).collect(),
    };
    let traces: Vec<ImageTrace<T>> = pairs
        .par_iter()
        .map(|&(c, j)| image_forward(model, batch.patches[j], prompt_of(c)))
        .collect::<Result<_>>()?;
    let trace_index = |i: usize, j: usize| match opts.conditioning {
        Conditioning::PerRow => i * b + j,
        Conditioning::Diagonal => j,
    };
    let mut cos = Tensor::zeros(b, b);
    for i in 0..b {
        for j in 0..b {
            cos.set(i, j, dot(&batch.texts[i].t_joint, &traces[trace_index(i, j)].v_joint));
        }
    }
    let matrix = ScoreMatrix::from_cosines(cos, opts.conditioning);
    let (loss, dcos) = match model.variant {
        Variant::S => {
            let lg = sigmoid_pairwise_cosines(&matrix.cosines, lit(SIGMOID_SCALE), lit(SIGMOID_BIAS))?;
            (lg.loss, lg.grad)
        }
        _ => {
            let lg = info_nce_scores(&matrix.scores)?;
            (lg.loss, lg.grad.scale(lit(1.0 / TAU)))
        }
    };
    if !opts.want_grads || opts.prompts == PromptSource::None {
        return Ok(BatchOutcome {
            loss,
            mapper_grads: None,
            itm_grads: None,
            scores: Some(matrix),
        });
    }

    // Upstream on each encoding's v_joint, summed over the rows using it.
    let d_e = model.dims.d_e;
    let mut upstream = vec![vec![T::zero(); d_e]; traces.len()];
    for i in 0..b {
        for j in 0..b {
            let g = dcos.get(i, j);
            for (u, &t) in upstream[trace_index(i, j)].iter_mut().zip(&batch.texts[i].t_joint) {
                *u += g * t;
            }
        }
    }
    let encoded_grads: Vec<Tensor<T>> = traces
        .par_iter()
        .zip(upstream.par_iter())
        .map(|(tr, up)| Ok(image_backward(model, tr, None, Some(up), false)?.prompts))
        .collect::<Result<_>>()?;
    let mut prompt_grads: Vec<Tensor<T>> = (0..b)
        .map(|_| Tensor::zeros(model.dims.prompts, model.dims.d_v))
        .collect();
    for (&(c, _), g) in pairs.iter().zip(&encoded_grads) {
        prompt_grads[c].add_assign(g)?;
    }
    Ok(BatchOutcome {
        loss,
        mapper_grads: Some(mapper_grads_from(model, mapper_traces, &prompt_grads)?),
        itm_grads: None,
        scores: Some(matrix),
    })
}

fn itm_batch<'p, T: Scalar>(
    model: &ModelBundle<T>,
    batch: &Batch<'_, T>,
    opts: BatchOptions,
    mapper_traces: &[Option<MapperTrace<T>>],
    prompt_of: &(dyn Fn(usize) -> Option<&'p Tensor<T>> + Sync),
) -> Result<BatchOutcome<T>>
where
    T: 'p,
{
    let b = batch.len();
    if batch.stage1_images.len() != b {
        return Err(Error::config("ITM batches need frozen image embeddings for negatives"));
    }
    let heads = model.dims.heads;
    let negatives = batch.itm_negatives();
    // (anchor, image, label)
    let examples: Vec<(usize, usize, T)> = (0..b)
        .flat_map(|i| [(i, i, T::one()), (i, negatives[i], T::zero())])
        .collect();
    let norm = lit::<T>(examples.len() as f64);
    let want = opts.want_grads && opts.prompts == PromptSource::Mapper;
    let want_itm = opts.want_grads && opts.want_itm_grads;

    type Out<T> = (T, Option<ParamGrads<T>>, Tensor<T>);
    let outs: Vec<Out<T>> = examples
        .par_iter()
        .map(|&(i, j, y)| {
            let tr = image_forward(model, batch.patches[j], prompt_of(i))?;
            let patch_states = tr.states.slice_rows(0, model.dims.patches);
            let itm = itm_forward(&model.itm_head, heads, &batch.texts[i].t_cls, &patch_states)?;
            let (loss, dz) = bce(itm.logit, y)?;
            if !(want || want_itm) {
                return Ok((loss, None, Tensor::zeros(0, 0)));
            }
            let (hg, gpatch) = itm_backward(&model.itm_head, heads, &itm, dz / norm, want_itm)?;
            let gp = if want {
                image_backward(model, &tr, Some(&gpatch), None, false)?.prompts
            } else {
                Tensor::zeros(0, 0)
            };
            Ok((loss, hg, gp))
        })
        .collect::<Result<_>>()?;

    let mut loss = T::zero();
    for o in &outs {
        loss += o.0;
    }
    let loss = loss / norm;

    let itm_grads = if want_itm {
        let mut total: ParamGrads<T> = model
            .itm_head
            .tensors()
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.rows(), t.cols())))
            .collect();
        for o in &outs {
            for (k, v) in o.1.as_ref().expect("requested") {
                total.get_mut(k).expect("itm key").add_assign(v)?;
            }
        }
        Some(total)
    } else {
        None
    };
    let mapper_grads = if want {
        let mut prompt_grads: Vec<Tensor<T>> = (0..b)
            .map(|_| Tensor::zeros(model.dims.prompts, model.dims.d_v))
            .collect();
        for (&(i, _, _), o) in examples.iter().zip(&outs) {
            prompt_grads[i].add_assign(&o.2)?;
        }
        Some(mapper_grads_from(model, mapper_traces, &prompt_grads)?)
    } else {
        None
    };
    Ok(BatchOutcome {
        loss,
        mapper_grads,
        itm_grads,
        scores: None,
    })
}

/// Conditioned score matrix for a batch (no gradients).
pub fn build_score_matrix<T: Scalar>(
    model: &ModelBundle<T>,
    batch: &Batch<'_, T>,
    conditioning: Conditioning,
) -> Result<ScoreMatrix<T>> {
    let opts = BatchOptions {
        conditioning,
        prompts: PromptSource::Mapper,
        want_grads: false,
        want_itm_grads: false,
    };
    let mut m = model.clone();
    if m.variant == Variant::B {
        m.variant = Variant::C;
    }
    if batch.len() < 2 || batch.patches.len() != batch.len() {
        return Err(Error::config(format!(
            "batch needs at least 2 aligned pairs, got {}",
            batch.len()
        )));
    }
    let traces = batch_prompts(&m, batch, PromptSource::Mapper)?;
    let prompt_of = |i: usize| traces[i].as_ref().map(|t| &t.prompts);
    let out = contrastive_batch(&m, batch, opts, &traces, &prompt_of)?;
    Ok(out.scores.expect("contrastive batches carry scores"))
}
