//! Two-stage retrieval: cosine search over a frozen gallery, then
//! query-conditioned re-scoring of the top `k`.

mod attention;
mod flops;
mod metrics;

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curation::PairDataset;
use crate::encoders::{encode_image, image_forward, ModelBundle, TextEncoding, Variant};
use crate::error::{Error, Result};
use crate::mapper::prompts_for;
use crate::numkit::{dot, l2_norm, Scalar, Tensor};
use crate::objectives::itm_forward;

pub use attention::{attention_map, AttentionMap, AttentionMode};
pub use flops::{estimate_flops, flops_breakdown, FlopsBreakdown};
pub use metrics::{
    average_precision, curve, evaluate, mean_average_precision, recall_at_k, CurveData, CurveKind, MetricReport,
    QueryMetrics, PR_GRID_STEPS,
};

/// Frozen image embeddings of a gallery, one unit-norm row per id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore<T = f32> {
    ids: Vec<String>,
    matrix: Tensor<T>,
    pub seed: u64,
}

impl<T: Scalar> EmbeddingStore<T> {
    pub fn new(ids: Vec<String>, matrix: Tensor<T>, seed: u64) -> Result<Self> {
        if ids.len() != matrix.rows() {
            return Err(Error::data(format!(
                "{} ids for {} embedding rows",
                ids.len(),
                matrix.rows()
            )));
        }
        let mut seen = BTreeSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::data(format!("duplicate gallery id `{id}`")));
            }
        }
        for i in 0..matrix.rows() {
            let n = l2_norm(matrix.row(i)).as_f64();
            if (n - 1.0).abs() > 1e-5 {
                return Err(Error::data(format!("gallery row `{}` has norm {n}", ids[i])));
            }
        }
        Ok(Self { ids, matrix, seed })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn matrix(&self) -> &Tensor<T> {
        &self.matrix
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Embeds every record with the plain frozen image encoder.
pub fn embed_gallery<T: Scalar>(model: &ModelBundle<T>, ds: &PairDataset) -> Result<EmbeddingStore<T>> {
    let rows: Vec<Vec<T>> = ds
        .records()
        .par_iter()
        .map(|r| Ok(encode_image(model, &r.patches.cast(), None)?.v_joint))
        .collect::<Result<_>>()?;
    let matrix = Tensor::from_rows(&rows).unwrap_or_else(|_| Tensor::zeros(0, model.dims.d_e));
    EmbeddingStore::new(ds.ids(), matrix, model.seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage1,
    Reranked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub id: String,
    pub score: f64,
}

/// Ordered results for one query, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub query_id: String,
    pub entries: Vec<RankEntry>,
    pub stage: Stage,
    pub k_reranked: usize,
}

impl RankingResult {
    pub fn ids(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.id.as_str()).collect()
    }
}

/// Descending score, ascending id on ties.
fn rank_order(a: &RankEntry, b: &RankEntry) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.id.cmp(&b.id))
}

/// Cosine ranking of the whole gallery against `t_joint`.
pub fn stage1_rank<T: Scalar>(store: &EmbeddingStore<T>, query_id: &str, t_joint: &[T]) -> Result<RankingResult> {
    if store.is_empty() {
        return Err(Error::data("cannot rank against an empty gallery"));
    }
    if t_joint.len() != store.matrix.cols() {
        return Err(Error::Dimension {
            op: "stage1_rank",
            left: (1, t_joint.len()),
            right: store.matrix.shape(),
        });
    }
    let mut entries: Vec<RankEntry> = store
        .ids
        .iter()
        .enumerate()
        .map(|(i, id)| RankEntry {
            id: id.clone(),
            score: dot(t_joint, store.matrix.row(i)).as_f64(),
        })
        .collect();
    entries.sort_by(rank_order);
    Ok(RankingResult {
        query_id: query_id.to_string(),
        entries,
        stage: Stage::Stage1,
        k_reranked: 0,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RerankOptions {
    /// Squash the ITM logit with a sigmoid before adding it (variant B).
    pub itm_sigmoid: bool,
}

/// Re-scores the top `k` candidates of `ranking` under prompts from the
/// query text and re-sorts them. Entries beyond `k` keep their order and
/// stay below the re-scored block.
pub fn rerank<T: Scalar>(
    model: &ModelBundle<T>,
    ds: &PairDataset,
    text: &TextEncoding<T>,
    ranking: &RankingResult,
    k: usize,
    opts: RerankOptions,
) -> Result<RankingResult> {
    if k == 0 {
        return Ok(ranking.clone());
    }
    if k > ranking.entries.len() {
        return Err(Error::config(format!(
            "k = {k} exceeds the {} ranked candidates",
            ranking.entries.len()
        )));
    }
    let index: HashMap<&str, usize> = ds.index();
    let prompts = prompts_for(model, text)?;
    let prompts = (prompts.rows() > 0).then_some(&prompts);
    let head: Vec<RankEntry> = ranking.entries[..k]
        .par_iter()
        .map(|e| {
            let &i = index
                .get(e.id.as_str())
                .ok_or_else(|| Error::data(format!("ranked id `{}` is not in the dataset", e.id)))?;
            let patches = ds.get(i).patches.cast::<T>();
            let score = match model.variant {
                Variant::C | Variant::S => {
                    dot(&text.t_joint, &encode_image(model, &patches, prompts)?.v_joint).as_f64()
                }
                Variant::B => {
                    let trace = image_forward(model, &patches, prompts)?;
                    let states = trace.states.slice_rows(0, model.dims.patches);
                    let z = itm_forward(&model.itm_head, model.dims.heads, &text.t_cls, &states)?
                        .logit
                        .as_f64();
                    let z = if opts.itm_sigmoid { 1.0 / (1.0 + (-z).exp()) } else { z };
                    e.score + z
                }
            };
            Ok(RankEntry {
                id: e.id.clone(),
                score,
            })
        })
        .collect::<Result<_>>()?;
    let mut head = head;
    head.sort_by(rank_order);
    let floor = head.last().map_or(f64::INFINITY, |e| e.score);
    let mut entries = head;
    entries.extend(ranking.entries[k..].iter().map(|e| RankEntry {
        id: e.id.clone(),
        score: e.score.min(floor),
    }));
    Ok(RankingResult {
        query_id: ranking.query_id.clone(),
        entries,
        stage: Stage::Reranked,
        k_reranked: k,
    })
}

/// Default re-rank depth per benchmark family at full scale.
pub fn full_scale_k(variant: Variant, benchmark: &str) -> Result<usize> {
    Ok(match (benchmark, variant) {
        ("standard", Variant::B) => 20,
        ("standard", _) => 100,
        ("occluded", Variant::B) => 100,
        ("occluded", _) => 500,
        ("imagenet_r", Variant::C) => 1000,
        ("imagenet_r", _) => 200,
        _ => return Err(Error::config(format!("unknown benchmark family `{benchmark}`"))),
    })
}

/// Desk-scale default re-rank depth.
pub const DESK_K: usize = 10;
