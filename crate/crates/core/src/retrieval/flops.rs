//! Forward FLOPs of one image encoding.
//!
//! One multiply-add is 2 FLOPs. A linear layer over `T` tokens costs
//! `2·T·d_in·d_out`; attention adds `2·T²·d` for `QKᵀ` and `2·T²·d` for
//! `AV`; layer norm, softmax and GELU cost 5 per element. Biases, residual
//! additions and the attention scale are not counted.

use serde::{Deserialize, Serialize};

use crate::encoders::DimsConfig;
use crate::mapper::MapperConfig;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsBreakdown {
    pub patch_embed: u64,
    pub blocks: Vec<u64>,
    pub final_norm: u64,
    pub projection: u64,
    pub mapper: u64,
    pub total: u64,
}

fn block_flops(tokens: u64, d: u64, heads: u64) -> u64 {
    let (t, hidden) = (tokens, 4 * d);
    let norms = 2 * 5 * t * d;
    let projections = 4 * 2 * t * d * d;
    let attention = 2 * t * t * d + 2 * t * t * d;
    let softmax = 5 * heads * t * t;
    let mlp = 2 * t * d * hidden + 2 * t * hidden * d;
    let gelu = 5 * t * hidden;
    norms + projections + attention + softmax + mlp + gelu
}

pub fn flops_breakdown(dims: &DimsConfig, mapper: &MapperConfig, with_prompts: bool) -> FlopsBreakdown {
    let d = dims.d_v as u64;
    let base = dims.patches as u64 + 1;
    let n = if with_prompts { dims.prompts as u64 } else { 0 };
    let patch_embed = 2 * dims.patches as u64 * dims.d_in as u64 * d;
    let blocks: Vec<u64> = (0..dims.image_layers)
        .map(|l| {
            let t = if l >= dims.insert_layer { base + n } else { base };
            block_flops(t, d, dims.heads as u64)
        })
        .collect();
    let final_norm = 5 * (base + n) * d;
    let projection = 2 * d * dims.d_e as u64;
    let mapper_flops = if n > 0 {
        let h = mapper.hidden_width(dims) as u64;
        let dt = dims.d_t as u64;
        2 * (dt * h + h * h + h * n * d) + 5 * 2 * h
    } else {
        0
    };
    let total = patch_embed + blocks.iter().sum::<u64>() + final_norm + projection + mapper_flops;
    FlopsBreakdown {
        patch_embed,
        blocks,
        final_norm,
        projection,
        mapper: mapper_flops,
        total,
    }
}

/// Total forward FLOPs, including the mapper when prompts are used.
pub fn estimate_flops(dims: &DimsConfig, mapper: &MapperConfig, with_prompts: bool) -> u64 {
    flops_breakdown(dims, mapper, with_prompts).total
}
