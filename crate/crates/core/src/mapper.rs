//! The trainable text-to-prompt MLP.

use serde::{Deserialize, Serialize};

use crate::encoders::{DimsConfig, ModelBundle, TextEncoding};
use crate::error::{Error, Result};
use crate::numkit::layers::{gelu, gelu_backward, Linear};
use crate::numkit::params::{init_linear, LayerParams, ParamGrads};
use crate::numkit::{Scalar, Tensor};
use crate::rng::Rng;

/// What the mapper reads from the text encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// Final CLS state.
    #[default]
    Cls,
    /// Mean of the dense token states, CLS excluded.
    DenseMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct MapperConfig {
    pub input_mode: InputMode,
    /// Hidden width; `None` means `4 · d_v`.
    pub hidden: Option<usize>,
}

impl MapperConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == Some(0) {
            return Err(Error::config("mapper hidden width must be positive"));
        }
        Ok(())
    }

    pub fn hidden_width(&self, dims: &DimsConfig) -> usize {
        self.hidden.unwrap_or(4 * dims.d_v)
    }
}

/// Three linear layers `d_t → hidden → hidden → n·d_v` with GELUs between.
/// The last layer starts at zero so fresh prompts are all-zero tokens.
pub fn init_mapper<T: Scalar>(dims: &DimsConfig, cfg: &MapperConfig, rng: &mut Rng) -> Result<LayerParams<T>> {
    cfg.validate()?;
    let h = cfg.hidden_width(dims);
    let mut p = LayerParams::new("mapper", true);
    init_linear(&mut p, "l1", dims.d_t, h, rng);
    init_linear(&mut p, "l2", h, h, rng);
    p.insert("l3.weight", Tensor::zeros(dims.prompts * dims.d_v, h));
    p.insert("l3.bias", Tensor::zeros(1, dims.prompts * dims.d_v));
    Ok(p)
}

/// Average of the dense token states.
pub fn pool_text_dense<T: Scalar>(text: &TextEncoding<T>) -> Result<Vec<T>> {
    if text.dense.rows() == 0 {
        return Err(Error::data("cannot pool an empty token sequence"));
    }
    Ok(text.dense.mean_rows())
}

pub fn mapper_input<T: Scalar>(text: &TextEncoding<T>, mode: InputMode) -> Result<Vec<T>> {
    match mode {
        InputMode::Cls => Ok(text.t_cls.clone()),
        InputMode::DenseMean => pool_text_dense(text),
    }
}

/// Activations saved for [`mapper_backward`].
#[derive(Debug, Clone)]
pub struct MapperTrace<T> {
    input: Tensor<T>,
    z1: Tensor<T>,
    a1: Tensor<T>,
    z2: Tensor<T>,
    a2: Tensor<T>,
    /// Prompt tokens, `n × d_v`.
    pub prompts: Tensor<T>,
}

struct MapperLayers<'a, T> {
    l1: Linear<'a, T>,
    l2: Linear<'a, T>,
    l3: Linear<'a, T>,
}

fn layers<'a, T: Scalar>(mapper: &'a LayerParams<T>, input_dim: usize, d_v: usize) -> Result<MapperLayers<'a, T>> {
    let l = MapperLayers {
        l1: Linear::from_params(mapper, "l1")?,
        l2: Linear::from_params(mapper, "l2")?,
        l3: Linear::from_params(mapper, "l3")?,
    };
    let consistent = l.l1.in_dim() == input_dim
        && l.l2.in_dim() == l.l1.out_dim()
        && l.l3.in_dim() == l.l2.out_dim()
        && d_v > 0
        && l.l3.out_dim().is_multiple_of(d_v);
    if !consistent {
        return Err(Error::config(format!(
            "mapper shapes {:?}/{:?}/{:?} inconsistent with input {input_dim} and d_v {d_v}",
            l.l1.weight.shape(),
            l.l2.weight.shape(),
            l.l3.weight.shape()
        )));
    }
    Ok(l)
}

pub fn mapper_forward<T: Scalar>(mapper: &LayerParams<T>, input: &[T], d_v: usize) -> Result<MapperTrace<T>> {
    let l = layers(mapper, input.len(), d_v)?;
    let input = Tensor::row_vector(input.to_vec());
    let z1 = l.l1.forward(&input)?;
    let a1 = gelu(&z1);
    let z2 = l.l2.forward(&a1)?;
    let a2 = gelu(&z2);
    let out = l.l3.forward(&a2)?;
    let n = out.cols() / d_v;
    let prompts = out.reshape(n, d_v)?;
    Ok(MapperTrace {
        input,
        z1,
        a1,
        z2,
        a2,
        prompts,
    })
}

/// Parameter gradients (keys `l1.weight` … `l3.bias`) and the input gradient.
pub fn mapper_backward<T: Scalar>(
    mapper: &LayerParams<T>,
    trace: &MapperTrace<T>,
    grad_prompts: &Tensor<T>,
) -> Result<(ParamGrads<T>, Vec<T>)> {
    let d_v = trace.prompts.cols();
    if grad_prompts.shape() != trace.prompts.shape() {
        return Err(Error::Dimension {
            op: "mapper_backward",
            left: grad_prompts.shape(),
            right: trace.prompts.shape(),
        });
    }
    let l = layers(mapper, trace.input.cols(), d_v)?;
    let g_out = grad_prompts.clone().reshape(1, grad_prompts.len())?;
    let mut grads = ParamGrads::new();
    let (ga2, g3) = l.l3.backward(&trace.a2, &g_out, true)?;
    let gz2 = gelu_backward(&trace.z2, &ga2);
    let (ga1, g2) = l.l2.backward(&trace.a1, &gz2, true)?;
    let gz1 = gelu_backward(&trace.z1, &ga1);
    let (gin, g1) = l.l1.backward(&trace.input, &gz1, true)?;
    for (prefix, g) in [("l1", g1), ("l2", g2), ("l3", g3)] {
        g.expect("requested").store(prefix, &mut grads, true);
    }
    Ok((grads, gin.into_data()))
}

/// Prompt tokens for one text: `n × d_v`, token `i` = output slice
/// `[i·d_v, (i+1)·d_v)`.
pub fn map_prompts<T: Scalar>(
    mapper: &LayerParams<T>,
    text: &TextEncoding<T>,
    cfg: &MapperConfig,
    dims: &DimsConfig,
) -> Result<Tensor<T>> {
    let input = mapper_input(text, cfg.input_mode)?;
    let trace = mapper_forward(mapper, &input, dims.d_v)?;
    if trace.prompts.rows() != dims.prompts {
        return Err(Error::config(format!(
            "mapper emits {} prompts, dims expect {}",
            trace.prompts.rows(),
            dims.prompts
        )));
    }
    Ok(trace.prompts)
}

/// [`map_prompts`] with the model's own mapper and config.
pub fn prompts_for<T: Scalar>(model: &ModelBundle<T>, text: &TextEncoding<T>) -> Result<Tensor<T>> {
    map_prompts(&model.mapper, text, &model.mapper_cfg, &model.dims)
}
