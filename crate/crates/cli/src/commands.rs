//! One function per subcommand. Each reads its inputs, writes artifacts
//! under the output directory, and returns a JSON summary for the status
//! line.

use std::path::Path;

use elip_core::curation::{
    build_occluded_benchmark, category_vocabulary, gen_synthetic_dataset, mine_dataset, CurationPlan, PairDataset,
    Tokenizer,
};
use elip_core::encoders::{encode_text, init_frozen_model, ModelBundle};
use elip_core::io::{
    load_checkpoint, load_gallery, read_benchmark, read_json, read_manifest, save_checkpoint, save_gallery,
    write_attn_csv, write_curve_csv, write_json, write_manifest, write_metrics_csv, write_trace_csv,
};
use elip_core::retrieval::{
    attention_map, curve, embed_gallery, evaluate, flops_breakdown, rerank, stage1_rank, EmbeddingStore, RankingResult,
    RerankOptions,
};
use elip_core::trainer::Trainer;
use elip_core::{Error, Result};
use serde_json::{json, Value};

use crate::config::RunConfig;

fn model(cfg: &RunConfig) -> Result<ModelBundle<f32>> {
    load_checkpoint(cfg.paths.require("model")?)
}

fn dataset(cfg: &RunConfig) -> Result<PairDataset> {
    read_manifest(cfg.paths.require("dataset")?)
}

fn rankings(cfg: &RunConfig) -> Result<Vec<RankingResult>> {
    read_json(cfg.paths.require("rankings")?)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

pub fn gen_synth(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let data = gen_synthetic_dataset(cfg.seed, &cfg.synth, &cfg.dims)?;
    write_manifest(&out.join("dataset.jsonl"), &data.dataset)?;
    write_json(&out.join("benchmark.json"), &data.benchmark)?;
    write_json(&out.join("tokenizer.json"), &data.tokenizer)?;
    Ok(json!({
        "records": data.dataset.len(),
        "queries": data.benchmark.queries.len(),
        "clusters": cfg.synth.clusters,
    }))
}

pub fn init_model(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let model = init_frozen_model::<f32>(cfg.seed, cfg.dims, cfg.train.variant, cfg.mapper)?;
    save_checkpoint(&out.join("model"), &model)?;
    Ok(json!({
        "variant": model.variant.to_string(),
        "mapper_params": model.mapper.num_params(),
    }))
}

pub fn embed(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let model = model(cfg)?;
    let ds = dataset(cfg)?;
    ds.validate_dims(&model.dims)?;
    let store = embed_gallery(&model, &ds)?;
    save_gallery(&out.join("gallery.json"), &store)?;
    Ok(json!({ "gallery": store.len() }))
}

pub fn curate_mine(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let model = model(cfg)?;
    let ds = dataset(cfg)?;
    ds.validate_dims(&model.dims)?;
    let plan = mine_dataset(&model, &ds, cfg.batch_size, cfg.unique_category)?;
    write_json(&out.join("plan.json"), &plan)?;
    Ok(json!({ "batches": plan.batches.len(), "batch_size": cfg.batch_size }))
}

pub fn curate_select(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let model = model(cfg)?;
    let ds = dataset(cfg)?;
    let plan: CurationPlan = read_json(cfg.paths.require("plan")?)?;
    let mut tcfg = cfg.train.clone();
    tcfg.variant = model.variant;
    tcfg.subset_fraction = 1.0;
    tcfg.jest_fraction = Some(cfg.select_fraction);
    let trainer = Trainer::new(model, &ds, &plan, tcfg, cfg.train_seed())?;
    let selected = trainer.plan();
    write_json(&out.join("plan.json"), selected)?;
    Ok(json!({ "batches": selected.batches.len(), "from": plan.batches.len() }))
}

pub fn train(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let model = model(cfg)?;
    let ds = dataset(cfg)?;
    let plan: CurationPlan = read_json(cfg.paths.require("plan")?)?;
    let every = cfg.train.checkpoint_every;
    let mut trainer = Trainer::new(model, &ds, &plan, cfg.train.clone(), cfg.train_seed())?;
    trainer.run(|step, m, _| {
        if every > 0 && step % every == 0 {
            save_checkpoint(&out.join("checkpoints").join(format!("step-{step:06}")), m)?;
        }
        Ok(())
    })?;
    let (model, trace) = trainer.into_parts();
    save_checkpoint(&out.join("model"), &model)?;
    write_trace_csv(&out.join("trace.csv"), &trace)?;
    let w = 50.min(trace.len() / 2).max(1);
    Ok(json!({
        "steps": trace.len(),
        "initial_mean_loss": mean(&trace[..w]),
        "final_mean_loss": mean(&trace[trace.len() - w..]),
    }))
}

fn stage1(model: &ModelBundle<f32>, store: &EmbeddingStore<f32>, cfg: &RunConfig) -> Result<Vec<RankingResult>> {
    let bench = read_benchmark(cfg.paths.require("benchmark")?)?;
    bench
        .queries
        .iter()
        .map(|q| stage1_rank(store, &q.id, &encode_text(model, &q.text_tokens)?.t_joint))
        .collect()
}

pub fn rank(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let model = model(cfg)?;
    let store = load_gallery(cfg.paths.require("gallery")?)?;
    let ranked = stage1(&model, &store, cfg)?;
    write_json(&out.join("rankings.json"), &ranked)?;
    Ok(json!({ "queries": ranked.len(), "gallery": store.len() }))
}

/// Re-ranks stage-1 results given with `--rankings`, or computes them from
/// `--gallery` first.
pub fn rerank_cmd(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let model = model(cfg)?;
    let ds = dataset(cfg)?;
    let bench = read_benchmark(cfg.paths.require("benchmark")?)?;
    let first = match (&cfg.paths.rankings, &cfg.paths.gallery) {
        (Some(_), _) => rankings(cfg)?,
        (None, Some(g)) => {
            let ranked = stage1(&model, &load_gallery(g)?, cfg)?;
            write_json(&out.join("stage1.json"), &ranked)?;
            ranked
        }
        (None, None) => return Err(Error::config("rerank needs --rankings or --gallery")),
    };
    let opts = RerankOptions {
        itm_sigmoid: cfg.itm_sigmoid,
    };
    let by_id: std::collections::HashMap<&str, &RankingResult> =
        first.iter().map(|r| (r.query_id.as_str(), r)).collect();
    let mut ranked = Vec::with_capacity(bench.queries.len());
    for q in &bench.queries {
        let r = by_id
            .get(q.id.as_str())
            .ok_or_else(|| Error::data(format!("no stage-1 ranking for query `{}`", q.id)))?;
        let text = encode_text(&model, &q.text_tokens)?;
        ranked.push(rerank(&model, &ds, &text, r, cfg.rerank_k, opts)?);
    }
    write_json(&out.join("rankings.json"), &ranked)?;
    Ok(json!({ "queries": ranked.len(), "k": cfg.rerank_k, "variant": model.variant.to_string() }))
}

pub fn eval(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let bench = read_benchmark(cfg.paths.require("benchmark")?)?;
    let ranked = rankings(cfg)?;
    let report = evaluate(&ranked, &bench, &cfg.ks)?;
    write_metrics_csv(&out.join("metrics.csv"), &report)?;
    write_json(&out.join("metrics.json"), &report)?;
    let recall: serde_json::Map<String, Value> = report
        .ks
        .iter()
        .zip(&report.recall)
        .map(|(k, r)| (format!("recall@{k}"), json!(r)))
        .collect();
    Ok(json!({ "queries": report.query_count, "recall": recall, "mAP": report.map }))
}

pub fn curve_cmd(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let bench = read_benchmark(cfg.paths.require("benchmark")?)?;
    let ranked = rankings(cfg)?;
    let data = curve(&ranked, &bench, cfg.curve_kind, &cfg.curve_ks)?;
    write_curve_csv(&out.join("curve.csv"), &data)?;
    Ok(json!({ "kind": cfg.curve_kind.name(), "points": data.points.len() }))
}

/// Which text conditions an attention map.
pub enum AttnText<'a> {
    /// The record's own caption.
    Own,
    /// A benchmark query by id.
    Query(&'a str),
    None,
}

pub fn attn(cfg: &RunConfig, out: &Path, record: &str, text: AttnText<'_>) -> Result<Value> {
    let model = model(cfg)?;
    let ds = dataset(cfg)?;
    let &i = ds
        .index()
        .get(record)
        .ok_or_else(|| Error::data(format!("record `{record}` is not in the dataset")))?;
    let rec = ds.get(i);
    let tokens = match text {
        AttnText::Own => Some(rec.tokens.clone()),
        AttnText::Query(id) => {
            let bench = read_benchmark(cfg.paths.require("benchmark")?)?;
            let q = bench
                .queries
                .iter()
                .find(|q| q.id == id)
                .ok_or_else(|| Error::data(format!("query `{id}` is not in the benchmark")))?;
            Some(q.text_tokens.clone())
        }
        AttnText::None => None,
    };
    let enc = tokens.map(|t| encode_text(&model, &t)).transpose()?;
    let map = attention_map(&model, &rec.patches, enc.as_ref(), cfg.attn_mode)?;
    write_attn_csv(&out.join("attn.csv"), &map)?;
    Ok(json!({
        "record": record,
        "prompted": enc.is_some(),
        "grid": [map.grid.rows(), map.grid.cols()],
    }))
}

pub fn flops(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let without = flops_breakdown(&cfg.dims, &cfg.mapper, false);
    let with = flops_breakdown(&cfg.dims, &cfg.mapper, true);
    let delta = with.total - without.total;
    write_json(
        &out.join("flops.json"),
        &json!({ "without_prompts": without, "with_prompts": with, "delta": delta }),
    )?;
    Ok(json!({ "baseline": without.total, "with_prompts": with.total, "delta": delta }))
}

pub fn bench_occluded(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let ds = dataset(cfg)?;
    let tok: Tokenizer = read_json(cfg.paths.require("tokenizer")?)?;
    let vocab = category_vocabulary(&ds);
    let bench = build_occluded_benchmark(&ds, &vocab, &tok, cfg.dims.text_len)?;
    write_json(&out.join("benchmark.json"), &bench)?;
    Ok(json!({ "queries": bench.queries.len(), "dropped": bench.dropped_queries }))
}
