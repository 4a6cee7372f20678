//! Frozen toy text encoder and ViT-style image encoder with a prompt
//! injection point.
//!
//! Image token order is `[patches, CLS, prompts]`. Prompts carry no
//! positional embedding and join the sequence at block `insert_layer`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mapper::{init_mapper, MapperConfig};
use crate::numkit::attention::{init_block, AttentionBlock, BlockTrace};
use crate::numkit::layers::{layer_norm, layer_norm_backward, LayerNormCache, Linear};
use crate::numkit::params::{init_layer_norm, init_linear, randn, LayerParams};
use crate::numkit::{dot, l2_norm, Scalar, Tensor};
use crate::objectives::init_itm_head;
use crate::rng::Rng;

/// Model dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DimsConfig {
    /// Text width.
    pub d_t: usize,
    /// Visual width.
    pub d_v: usize,
    /// Joint embedding width.
    pub d_e: usize,
    /// Image patch count.
    #[serde(rename = "P")]
    pub patches: usize,
    /// Text tokens per caption, CLS excluded.
    #[serde(rename = "m")]
    pub text_len: usize,
    #[serde(rename = "L_t")]
    pub text_layers: usize,
    #[serde(rename = "L_v")]
    pub image_layers: usize,
    #[serde(rename = "H")]
    pub heads: usize,
    /// Prompt tokens produced by the mapper.
    #[serde(rename = "n")]
    pub prompts: usize,
    pub insert_layer: usize,
    pub d_in: usize,
    pub vocab: usize,
}

impl Default for DimsConfig {
    fn default() -> Self {
        Self {
            d_t: 24,
            d_v: 32,
            d_e: 32,
            patches: 16,
            text_len: 8,
            text_layers: 2,
            image_layers: 2,
            heads: 4,
            prompts: 10,
            insert_layer: 0,
            d_in: 12,
            vocab: 64,
        }
    }
}

impl DimsConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_t", self.d_t),
            ("d_v", self.d_v),
            ("d_e", self.d_e),
            ("P", self.patches),
            ("L_t", self.text_layers),
            ("L_v", self.image_layers),
            ("H", self.heads),
            ("d_in", self.d_in),
            ("vocab", self.vocab),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !self.d_t.is_multiple_of(self.heads) || !self.d_v.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "d_t={} and d_v={} must both be divisible by H={}",
                self.d_t, self.d_v, self.heads
            )));
        }
        if self.insert_layer >= self.image_layers {
            return Err(Error::config(format!(
                "insert_layer {} out of range for L_v={}",
                self.insert_layer, self.image_layers
            )));
        }
        Ok(())
    }

    /// Image sequence length entering block `layer`.
    pub fn image_tokens_at(&self, layer: usize, with_prompts: bool) -> usize {
        let base = self.patches + 1;
        if with_prompts && layer >= self.insert_layer {
            base + self.prompts
        } else {
            base
        }
    }
}

/// Which objective and re-ranking score a model is trained for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Variant {
    /// InfoNCE, cosine re-scoring.
    #[default]
    C,
    /// Pairwise sigmoid, cosine re-scoring.
    S,
    /// ITM head with binary cross-entropy, stage-1 plus ITM logit.
    B,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "C" | "c" => Ok(Variant::C),
            "S" | "s" => Ok(Variant::S),
            "B" | "b" => Ok(Variant::B),
            _ => Err(Error::config(format!("unknown variant `{s}` (expected C, S or B)"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Variant::C => "C",
            Variant::S => "S",
            Variant::B => "B",
        };
        f.write_str(s)
    }
}

/// Frozen encoders plus the trainable mapper and ITM head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle<T = f32> {
    pub dims: DimsConfig,
    pub mapper_cfg: MapperConfig,
    pub variant: Variant,
    pub seed: u64,
    pub token_embed: LayerParams<T>,
    pub pos_embeds: LayerParams<T>,
    pub cls_tokens: LayerParams<T>,
    pub text_layers: Vec<LayerParams<T>>,
    pub text_norm: LayerParams<T>,
    pub proj_text: LayerParams<T>,
    pub patch_embed: LayerParams<T>,
    pub image_layers: Vec<LayerParams<T>>,
    pub image_norm: LayerParams<T>,
    pub proj_image: LayerParams<T>,
    pub mapper: LayerParams<T>,
    pub itm_head: LayerParams<T>,
}

/// Builds the frozen backbone and fresh trainable heads from `seed`.
///
/// Weight matrices are Gaussian with scale `1/√fan_in`, biases zero, token
/// and CLS embeddings unit Gaussian, positional embeddings scaled `1/√width`.
pub fn init_frozen_model<T: Scalar>(
    seed: u64,
    dims: DimsConfig,
    variant: Variant,
    mapper_cfg: MapperConfig,
) -> Result<ModelBundle<T>> {
    dims.validate()?;
    mapper_cfg.validate()?;
    let mut rng = Rng::new(seed);
    let (d_t, d_v) = (dims.d_t, dims.d_v);

    let mut token_embed = LayerParams::new("token_embed", false);
    token_embed.insert("weight", randn(dims.vocab, d_t, 1.0, &mut rng));

    let mut pos_embeds = LayerParams::new("pos_embeds", false);
    pos_embeds.insert(
        "text",
        randn(dims.text_len + 1, d_t, 1.0 / (d_t as f64).sqrt(), &mut rng),
    );
    let mut cls_tokens = LayerParams::new("cls_tokens", false);
    cls_tokens.insert("text", randn(1, d_t, 1.0, &mut rng));

    let text_layers = (0..dims.text_layers)
        .map(|i| init_block(&format!("text_layers.{i}"), d_t, false, &mut rng))
        .collect();
    let mut text_norm = LayerParams::new("text_norm", false);
    init_layer_norm(&mut text_norm, "ln", d_t);
    let mut proj_text = LayerParams::new("proj_text", false);
    proj_text.insert("weight", randn(dims.d_e, d_t, 1.0 / (d_t as f64).sqrt(), &mut rng));

    let mut patch_embed = LayerParams::new("patch_embed", false);
    init_linear(&mut patch_embed, "linear", dims.d_in, d_v, &mut rng);
    pos_embeds.insert(
        "image",
        randn(dims.patches + 1, d_v, 1.0 / (d_v as f64).sqrt(), &mut rng),
    );
    cls_tokens.insert("image", randn(1, d_v, 1.0, &mut rng));

    let image_layers = (0..dims.image_layers)
        .map(|i| init_block(&format!("image_layers.{i}"), d_v, false, &mut rng))
        .collect();
    let mut image_norm = LayerParams::new("image_norm", false);
    init_layer_norm(&mut image_norm, "ln", d_v);
    let mut proj_image = LayerParams::new("proj_image", false);
    proj_image.insert("weight", randn(dims.d_e, d_v, 1.0 / (d_v as f64).sqrt(), &mut rng));

    let mapper = init_mapper(&dims, &mapper_cfg, &mut rng)?;
    let itm_head = init_itm_head(&dims, variant == Variant::B, &mut rng);

    Ok(ModelBundle {
        dims,
        mapper_cfg,
        variant,
        seed,
        token_embed,
        pos_embeds,
        cls_tokens,
        text_layers,
        text_norm,
        proj_text,
        patch_embed,
        image_layers,
        image_norm,
        proj_image,
        mapper,
        itm_head,
    })
}

impl<T: Scalar> ModelBundle<T> {
    /// Every parameter group in checkpoint order.
    pub fn layers(&self) -> Vec<&LayerParams<T>> {
        let mut out = vec![&self.token_embed, &self.pos_embeds, &self.cls_tokens];
        out.extend(self.text_layers.iter());
        out.extend([&self.text_norm, &self.proj_text, &self.patch_embed]);
        out.extend(self.image_layers.iter());
        out.extend([&self.image_norm, &self.proj_image, &self.mapper, &self.itm_head]);
        out
    }

    pub fn layers_mut(&mut self) -> Vec<&mut LayerParams<T>> {
        let mut out = vec![&mut self.token_embed, &mut self.pos_embeds, &mut self.cls_tokens];
        out.extend(self.text_layers.iter_mut());
        out.extend([&mut self.text_norm, &mut self.proj_text, &mut self.patch_embed]);
        out.extend(self.image_layers.iter_mut());
        out.extend([
            &mut self.image_norm,
            &mut self.proj_image,
            &mut self.mapper,
            &mut self.itm_head,
        ]);
        out
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut LayerParams<T>> {
        self.layers_mut().into_iter().find(|l| l.name == name)
    }

    pub fn cast<U: Scalar>(&self) -> ModelBundle<U> {
        ModelBundle {
            dims: self.dims,
            mapper_cfg: self.mapper_cfg,
            variant: self.variant,
            seed: self.seed,
            token_embed: self.token_embed.cast(),
            pos_embeds: self.pos_embeds.cast(),
            cls_tokens: self.cls_tokens.cast(),
            text_layers: self.text_layers.iter().map(LayerParams::cast).collect(),
            text_norm: self.text_norm.cast(),
            proj_text: self.proj_text.cast(),
            patch_embed: self.patch_embed.cast(),
            image_layers: self.image_layers.iter().map(LayerParams::cast).collect(),
            image_norm: self.image_norm.cast(),
            proj_image: self.proj_image.cast(),
            mapper: self.mapper.cast(),
            itm_head: self.itm_head.cast(),
        }
    }

    /// Same weights with the prompt insertion moved (used for the
    /// late-fusion wiring).
    pub fn with_insert_layer(mut self, layer: usize) -> Result<Self> {
        self.dims.insert_layer = layer;
        self.dims.validate()?;
        Ok(self)
    }
}

/// Output of the text encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoding<T = f32> {
    /// Final token states, `m × d_t`, CLS excluded.
    pub dense: Tensor<T>,
    /// Final CLS state, length `d_t`.
    pub t_cls: Vec<T>,
    /// Unit-norm projection into the joint space.
    pub t_joint: Vec<T>,
}

/// Output of the image encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEncoding<T = f32> {
    /// Final patch states, `P × d_v`.
    pub patch_states: Tensor<T>,
    pub cls_state: Vec<T>,
    pub v_joint: Vec<T>,
    /// `attn[layer][head]`, each `T × T`.
    pub attn: Vec<Vec<Tensor<T>>>,
    pub prompt_count: usize,
}

fn normalize<T: Scalar>(u: &[T]) -> (Vec<T>, T) {
    let n = l2_norm(u);
    (u.iter().map(|&x| x / n).collect(), n)
}

/// Cosine between two unit-norm embeddings.
pub fn similarity<T: Scalar>(a: &[T], b: &[T]) -> T {
    dot(a, b)
}

fn project<T: Scalar>(w: &Tensor<T>, x: &[T]) -> Vec<T> {
    (0..w.rows()).map(|i| dot(w.row(i), x)).collect()
}

pub fn encode_text<T: Scalar>(model: &ModelBundle<T>, tokens: &[u32]) -> Result<TextEncoding<T>> {
    let dims = &model.dims;
    if tokens.len() != dims.text_len {
        return Err(Error::data(format!(
            "caption has {} tokens, expected {}",
            tokens.len(),
            dims.text_len
        )));
    }
    if let Some(bad) = tokens.iter().find(|&&t| t as usize >= dims.vocab) {
        return Err(Error::data(format!(
            "token id {bad} outside vocabulary of {}",
            dims.vocab
        )));
    }
    let table = model.token_embed.get("weight")?;
    let pos = model.pos_embeds.get("text")?;
    let mut seq = Tensor::zeros(dims.text_len + 1, dims.d_t);
    seq.row_mut(0).copy_from_slice(model.cls_tokens.get("text")?.data());
    for (i, &t) in tokens.iter().enumerate() {
        seq.row_mut(i + 1).copy_from_slice(table.row(t as usize));
    }
    seq.add_assign(pos)?;
    for layer in &model.text_layers {
        seq = AttentionBlock::new(layer, dims.heads)?.forward(&seq)?.output;
    }
    let (seq, _) = layer_norm(model.text_norm.get("ln.gamma")?, model.text_norm.get("ln.beta")?, &seq)?;
    let t_cls = seq.row(0).to_vec();
    let (t_joint, _) = normalize(&project(model.proj_text.get("weight")?, &t_cls));
    Ok(TextEncoding {
        dense: seq.slice_rows(1, dims.text_len + 1),
        t_cls,
        t_joint,
    })
}

/// Saved activations of one image forward pass.
#[derive(Debug, Clone)]
pub struct ImageTrace<T> {
    blocks: Vec<BlockTrace<T>>,
    norm: LayerNormCache<T>,
    patches: Tensor<T>,
    /// Final (post layer-norm) token states.
    pub states: Tensor<T>,
    proj_norm: T,
    pub v_joint: Vec<T>,
    pub prompt_count: usize,
}

impl<T: Scalar> ImageTrace<T> {
    pub fn cls_state(&self, patches: usize) -> &[T] {
        self.states.row(patches)
    }

    pub fn encoding(&self, patches: usize) -> ImageEncoding<T> {
        ImageEncoding {
            patch_states: self.states.slice_rows(0, patches),
            cls_state: self.states.row(patches).to_vec(),
            v_joint: self.v_joint.clone(),
            attn: self.blocks.iter().map(|b| b.attn.clone()).collect(),
            prompt_count: self.prompt_count,
        }
    }
}

fn check_image_inputs<T: Scalar>(dims: &DimsConfig, patches: &Tensor<T>, prompts: Option<&Tensor<T>>) -> Result<usize> {
    if patches.shape() != (dims.patches, dims.d_in) {
        return Err(Error::Dimension {
            op: "encode_image patches",
            left: patches.shape(),
            right: (dims.patches, dims.d_in),
        });
    }
    match prompts {
        Some(p) if p.rows() > 0 && p.cols() != dims.d_v => Err(Error::Dimension {
            op: "encode_image prompts",
            left: p.shape(),
            right: (p.rows(), dims.d_v),
        }),
        Some(p) => Ok(p.rows()),
        None => Ok(0),
    }
}

/// Image forward keeping everything needed for [`image_backward`].
pub fn image_forward<T: Scalar>(
    model: &ModelBundle<T>,
    patches: &Tensor<T>,
    prompts: Option<&Tensor<T>>,
) -> Result<ImageTrace<T>> {
    let dims = &model.dims;
    let n = check_image_inputs(dims, patches, prompts)?;
    let embed = Linear::from_params(&model.patch_embed, "linear")?;
    let cls = Tensor::row_vector(model.cls_tokens.get("image")?.data().to_vec());
    let mut seq = embed.forward(patches)?.concat_rows(&cls)?;
    seq.add_assign(model.pos_embeds.get("image")?)?;

    let mut blocks = Vec::with_capacity(model.image_layers.len());
    for (l, layer) in model.image_layers.iter().enumerate() {
        if l == dims.insert_layer && n > 0 {
            seq = seq.concat_rows(prompts.expect("n > 0"))?;
        }
        let trace = AttentionBlock::new(layer, dims.heads)?.forward(&seq)?;
        seq = trace.output.clone();
        blocks.push(trace);
    }
    let (states, norm) = layer_norm(
        model.image_norm.get("ln.gamma")?,
        model.image_norm.get("ln.beta")?,
        &seq,
    )?;
    let (v_joint, proj_norm) = normalize(&project(model.proj_image.get("weight")?, states.row(dims.patches)));
    Ok(ImageTrace {
        blocks,
        norm,
        patches: patches.clone(),
        states,
        proj_norm,
        v_joint,
        prompt_count: n,
    })
}

pub fn encode_image<T: Scalar>(
    model: &ModelBundle<T>,
    patches: &Tensor<T>,
    prompts: Option<&Tensor<T>>,
) -> Result<ImageEncoding<T>> {
    Ok(image_forward(model, patches, prompts)?.encoding(model.dims.patches))
}

/// Gradients reaching the image encoder inputs.
#[derive(Debug, Clone)]
pub struct ImageGrads<T> {
    /// `n × d_v`; empty when no prompts were injected.
    pub prompts: Tensor<T>,
    /// `P × d_in`, only when requested.
    pub patches: Option<Tensor<T>>,
}

/// Back-propagates through the frozen image encoder. `grad_states` is an
/// upstream gradient on the final token states (rows beyond it are treated
/// as zero), `grad_v` one on `v_joint`. Frozen parameters receive nothing.
pub fn image_backward<T: Scalar>(
    model: &ModelBundle<T>,
    trace: &ImageTrace<T>,
    grad_states: Option<&Tensor<T>>,
    grad_v: Option<&[T]>,
    want_patches: bool,
) -> Result<ImageGrads<T>> {
    let dims = &model.dims;
    let (rows, d_v) = trace.states.shape();
    let mut g = Tensor::zeros(rows, d_v);
    if let Some(gs) = grad_states {
        if gs.cols() != d_v || gs.rows() > rows {
            return Err(Error::Dimension {
                op: "image_backward",
                left: gs.shape(),
                right: trace.states.shape(),
            });
        }
        for i in 0..gs.rows() {
            g.row_mut(i).copy_from_slice(gs.row(i));
        }
    }
    if let Some(gv) = grad_v {
        // v = u / |u|, u = W_v · cls
        let v = &trace.v_joint;
        let vg = dot(v, gv);
        let gu: Vec<T> = v
            .iter()
            .zip(gv)
            .map(|(&vi, &gi)| (gi - vi * vg) / trace.proj_norm)
            .collect();
        let w = model.proj_image.get("weight")?;
        let gcls = Tensor::row_vector(gu).matmul(w)?;
        for (o, &x) in g.row_mut(dims.patches).iter_mut().zip(gcls.data()) {
            *o += x;
        }
    }
    let (mut g, _) = layer_norm_backward(model.image_norm.get("ln.gamma")?, &trace.norm, &g, false);

    let n = trace.prompt_count;
    let mut prompt_grad = Tensor::zeros(0, d_v);
    let stop = if want_patches || n == 0 { 0 } else { dims.insert_layer };
    for l in (stop..model.image_layers.len()).rev() {
        let blk = AttentionBlock::new(&model.image_layers[l], dims.heads)?;
        g = blk.backward(&trace.blocks[l], &g, false)?.0;
        if l == dims.insert_layer && n > 0 {
            let base = dims.patches + 1;
            prompt_grad = g.slice_rows(base, base + n);
            g = g.slice_rows(0, base);
        }
    }
    let patches = if want_patches {
        let embed = Linear::from_params(&model.patch_embed, "linear")?;
        let gx = g.slice_rows(0, dims.patches);
        Some(embed.backward(&trace.patches, &gx, false)?.0)
    } else {
        None
    };
    Ok(ImageGrads {
        prompts: prompt_grad,
        patches,
    })
}

/// `∂(upstream · v_joint)/∂prompts`.
pub fn gradient_through_frozen<T: Scalar>(
    model: &ModelBundle<T>,
    patches: &Tensor<T>,
    prompts: Option<&Tensor<T>>,
    upstream: &[T],
) -> Result<Tensor<T>> {
    if upstream.len() != model.dims.d_e {
        return Err(Error::Dimension {
            op: "gradient_through_frozen",
            left: (1, upstream.len()),
            right: (1, model.dims.d_e),
        });
    }
    let trace = image_forward(model, patches, prompts)?;
    Ok(image_backward(model, &trace, None, Some(upstream), false)?.prompts)
}
