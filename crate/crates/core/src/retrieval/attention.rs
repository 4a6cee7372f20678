//! Patch attention maps for visualisation.

use serde::{Deserialize, Serialize};

use crate::encoders::{image_forward, ModelBundle, TextEncoding, Variant};
use crate::error::{Error, Result};
use crate::mapper::prompts_for;
use crate::numkit::{Scalar, Tensor};
use crate::objectives::itm_forward;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Last-layer CLS → patch attention, averaged over heads.
    #[default]
    Cls,
    /// ITM query → patch cross-attention, averaged over queries and heads.
    ItmQuery,
}

impl std::str::FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" => Ok(AttentionMode::Cls),
            "itm_query" | "itm-query" => Ok(AttentionMode::ItmQuery),
            _ => Err(Error::config(format!("unknown attention mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    /// Raw weight on each patch.
    pub weights: Vec<f64>,
    /// Weights renormalized to sum to 1, as a `√P × √P` grid when `P` is a
    /// square and `1 × P` otherwise.
    pub grid: Tensor<f64>,
}

/// Attention paid to each patch, with prompts from `text` when given.
pub fn attention_map<T: Scalar>(
    model: &ModelBundle<T>,
    patches: &Tensor<T>,
    text: Option<&TextEncoding<T>>,
    mode: AttentionMode,
) -> Result<AttentionMap> {
    if mode == AttentionMode::ItmQuery && model.variant != Variant::B {
        return Err(Error::config("itm_query attention maps need a variant B model"));
    }
    let p = model.dims.patches;
    let prompts = text.map(|t| prompts_for(model, t)).transpose()?;
    let prompts = prompts.as_ref().filter(|t| t.rows() > 0);
    let trace = image_forward(model, patches, prompts)?;
    let enc = trace.encoding(p);
    let mut weights = vec![0.0; p];
    match mode {
        AttentionMode::Cls => {
            let last = enc
                .attn
                .last()
                .ok_or_else(|| Error::config("image encoder has no layers"))?;
            for head in last {
                for (w, &a) in weights.iter_mut().zip(&head.row(p)[..p]) {
                    *w += a.as_f64() / last.len() as f64;
                }
            }
        }
        AttentionMode::ItmQuery => {
            let t_cls = match text {
                Some(t) => t.t_cls.clone(),
                None => vec![T::zero(); model.dims.d_t],
            };
            let itm = itm_forward(&model.itm_head, model.dims.heads, &t_cls, &enc.patch_states)?;
            let count = (itm.attn.len() * itm.attn[0].rows()) as f64;
            for head in &itm.attn {
                for q in 0..head.rows() {
                    for (w, &a) in weights.iter_mut().zip(head.row(q)) {
                        *w += a.as_f64() / count;
                    }
                }
            }
        }
    }
    let total: f64 = weights.iter().sum();
    let norm: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let side = (p as f64).sqrt().round() as usize;
    let (rows, cols) = if side * side == p { (side, side) } else { (1, p) };
    Ok(AttentionMap {
        weights,
        grid: Tensor::new(rows, cols, norm)?,
    })
}
