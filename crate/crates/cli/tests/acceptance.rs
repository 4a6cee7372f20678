//! Acceptance suite: one PASS/FAIL line per criterion A1–A9.
//!
//! Run with `cargo test -p elip-cli --test acceptance -- --nocapture` to
//! see the report.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use elip_core::curation::{
    gen_synthetic_dataset, mine_dataset, mine_hard_batches, select_by_learnability, selection_count, Benchmark,
    BenchmarkQuery, CurationPlan, PairDataset, PairRecord, SynthSpec,
};
use elip_core::encoders::{encode_image, encode_text, gradient_through_frozen, init_frozen_model, DimsConfig, Variant};
use elip_core::mapper::{mapper_backward, mapper_forward, MapperConfig};
use elip_core::numkit::params::randn;
use elip_core::numkit::{
    gelu, gelu_backward, grad_check, init_block, layer_norm, layer_norm_backward, probe, softmax_backward,
    softmax_rows, AttentionBlock, Linear, Tensor,
};
use elip_core::objectives::{
    batch_objective, bce, info_nce_scores, sigmoid_pairwise_cosines, Batch, BatchOptions, Conditioning, PromptSource,
};
use elip_core::retrieval::{
    average_precision, curve, embed_gallery, flops_breakdown, mean_average_precision, recall_at_k, rerank, stage1_rank,
    CurveKind, RankEntry, RankingResult, RerankOptions, Stage,
};
use elip_core::trainer::{TrainConfig, Trainer};
use elip_core::Rng;

const GRAD_TOL: f64 = 1e-4;
const GRAD_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const GRAD_BUDGET: Duration = Duration::from_secs(30);
const TRAIN_BUDGET: Duration = Duration::from_secs(120);
/// Stage-1 R@1 0.040 and re-ranked R@1 0.360 at seed 7 in the pilot run.
const A3_MARGIN: f64 = 0.15;
const A3_SEED: u64 = 7;
const A3_BATCH: usize = 8;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

// A1

/// Central differences on a sample of coordinates of `point`.
fn fd_sampled(mut f: impl FnMut(&[f64]) -> f64, analytic: &[f64], point: &[f64], coords: &[usize]) -> f64 {
    let sub_point: Vec<f64> = coords.iter().map(|&i| point[i]).collect();
    let sub_grad: Vec<f64> = coords.iter().map(|&i| analytic[i]).collect();
    let mut full = point.to_vec();
    grad_check(
        |p| {
            for (&i, &v) in coords.iter().zip(p) {
                full[i] = v;
            }
            f(&full)
        },
        &sub_grad,
        &sub_point,
        1e-5,
    )
    .unwrap()
}

fn all(n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn sample(n: usize, count: usize, rng: &mut Rng) -> Vec<usize> {
    if n <= count {
        all(n)
    } else {
        rng.sample_indices(n, count)
    }
}

fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
    Tensor::new(rows, cols, data.to_vec()).unwrap()
}

fn primitive_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::new();

    // linear
    let (x, w, b) = (
        randn::<f64>(3, 5, 1.0, &mut rng),
        randn::<f64>(4, 5, 1.0, &mut rng),
        randn::<f64>(1, 4, 1.0, &mut rng),
    );
    let r = randn::<f64>(3, 4, 1.0, &mut rng);
    let lin = Linear {
        weight: &w,
        bias: Some(&b),
    };
    let (gx, g) = lin.backward(&x, &r, true).unwrap();
    let g = g.unwrap();
    let f_x = |p: &[f64]| probe(&lin.forward(&t(3, 5, p)).unwrap(), &r);
    let f_w = |p: &[f64]| {
        probe(
            &Linear {
                weight: &t(4, 5, p),
                bias: Some(&b),
            }
            .forward(&x)
            .unwrap(),
            &r,
        )
    };
    let f_b = |p: &[f64]| {
        probe(
            &Linear {
                weight: &w,
                bias: Some(&t(1, 4, p)),
            }
            .forward(&x)
            .unwrap(),
            &r,
        )
    };
    let e = fd_sampled(f_x, gx.data(), x.data(), &all(15))
        .max(fd_sampled(f_w, g.weight.data(), w.data(), &all(20)))
        .max(fd_sampled(f_b, g.bias.data(), b.data(), &all(4)));
    out.push(("linear", e));

    // gelu
    let x = randn::<f64>(3, 6, 2.0, &mut rng);
    let r = randn::<f64>(3, 6, 1.0, &mut rng);
    let gx = gelu_backward(&x, &r);
    out.push((
        "gelu",
        fd_sampled(|p| probe(&gelu(&t(3, 6, p)), &r), gx.data(), x.data(), &all(18)),
    ));

    // layer norm
    let x = randn::<f64>(3, 8, 2.0, &mut rng);
    let gamma = randn::<f64>(1, 8, 1.0, &mut rng);
    let beta = randn::<f64>(1, 8, 1.0, &mut rng);
    let r = randn::<f64>(3, 8, 1.0, &mut rng);
    let (_, cache) = layer_norm(&gamma, &beta, &x).unwrap();
    let (gx, gp) = layer_norm_backward(&gamma, &cache, &r, true);
    let (gg, gb) = gp.unwrap();
    let e = fd_sampled(
        |p| probe(&layer_norm(&gamma, &beta, &t(3, 8, p)).unwrap().0, &r),
        gx.data(),
        x.data(),
        &all(24),
    )
    .max(fd_sampled(
        |p| probe(&layer_norm(&t(1, 8, p), &beta, &x).unwrap().0, &r),
        gg.data(),
        gamma.data(),
        &all(8),
    ))
    .max(fd_sampled(
        |p| probe(&layer_norm(&gamma, &t(1, 8, p), &x).unwrap().0, &r),
        gb.data(),
        beta.data(),
        &all(8),
    ));
    out.push(("layer_norm", e));

    // softmax
    let x = randn::<f64>(3, 7, 2.0, &mut rng);
    let r = randn::<f64>(3, 7, 1.0, &mut rng);
    let gx = softmax_backward(&softmax_rows(&x), &r);
    out.push((
        "softmax",
        fd_sampled(|p| probe(&softmax_rows(&t(3, 7, p)), &r), gx.data(), x.data(), &all(21)),
    ));

    // attention block, input and every parameter tensor
    let (d, heads, tokens) = (8, 2, 5);
    let params = init_block::<f64>("blk", d, true, &mut rng);
    let x = randn::<f64>(tokens, d, 1.0, &mut rng);
    let r = randn::<f64>(tokens, d, 1.0, &mut rng);
    let blk = AttentionBlock::new(&params, heads).unwrap();
    let trace = blk.forward(&x).unwrap();
    let (gx, gp) = blk.backward(&trace, &r, true).unwrap();
    let gp = gp.unwrap();
    let mut e = fd_sampled(
        |p| probe(&blk.forward(&t(tokens, d, p)).unwrap().output, &r),
        gx.data(),
        x.data(),
        &all(tokens * d),
    );
    for (key, tensor) in params.tensors() {
        let coords = sample(tensor.len(), 12, &mut rng);
        let f = |p: &[f64]| {
            let mut q = params.clone();
            *q.get_mut(key).unwrap() = t(tensor.rows(), tensor.cols(), p);
            probe(&AttentionBlock::new(&q, heads).unwrap().forward(&x).unwrap().output, &r)
        };
        e = e.max(fd_sampled(f, gp[key].data(), tensor.data(), &coords));
    }
    out.push(("attention_block", e));

    // mapper MLP with a non-zero output layer
    let dims = DimsConfig::default();
    let mut model = init_frozen_model::<f64>(seed, dims, Variant::C, MapperConfig::default()).unwrap();
    let l3 = randn::<f64>(dims.prompts * dims.d_v, 4 * dims.d_v, 0.05, &mut rng);
    *model.mapper.get_mut("l3.weight").unwrap() = l3;
    let input = randn::<f64>(1, dims.d_t, 1.0, &mut rng).into_data();
    let r = randn::<f64>(dims.prompts, dims.d_v, 1.0, &mut rng);
    let trace = mapper_forward(&model.mapper, &input, dims.d_v).unwrap();
    let (grads, gin) = mapper_backward(&model.mapper, &trace, &r).unwrap();
    let mut e = fd_sampled(
        |p| probe(&mapper_forward(&model.mapper, p, dims.d_v).unwrap().prompts, &r),
        &gin,
        &input,
        &all(dims.d_t),
    );
    for (key, tensor) in model.mapper.tensors() {
        let coords = sample(tensor.len(), 12, &mut rng);
        let f = |p: &[f64]| {
            let mut q = model.mapper.clone();
            *q.get_mut(key).unwrap() = t(tensor.rows(), tensor.cols(), p);
            probe(&mapper_forward(&q, &input, dims.d_v).unwrap().prompts, &r)
        };
        e = e.max(fd_sampled(f, grads[key].data(), tensor.data(), &coords));
    }
    out.push(("mapper", e));

    // frozen image encoder, prompts to v_joint
    let patches = randn::<f64>(dims.patches, dims.d_in, 1.0, &mut rng);
    let prompts = randn::<f64>(dims.prompts, dims.d_v, 1.0, &mut rng);
    let up = randn::<f64>(1, dims.d_e, 1.0, &mut rng).into_data();
    let g = gradient_through_frozen(&model, &patches, Some(&prompts), &up).unwrap();
    let f = |p: &[f64]| {
        let v = encode_image(&model, &patches, Some(&t(dims.prompts, dims.d_v, p)))
            .unwrap()
            .v_joint;
        v.iter().zip(&up).map(|(a, b)| a * b).sum()
    };
    let coords = sample(prompts.len(), 40, &mut rng);
    out.push(("image_encoder", fd_sampled(f, g.data(), prompts.data(), &coords)));
    out
}

/// Mapper (and ITM head) gradients of the whole batch loss.
fn chain_error(seed: u64, variant: Variant) -> f64 {
    let dims = DimsConfig::default();
    let mut rng = Rng::new(seed ^ 0xC4A1);
    let mut model = init_frozen_model::<f64>(seed, dims, variant, MapperConfig::default()).unwrap();
    let l3 = randn::<f64>(dims.prompts * dims.d_v, 4 * dims.d_v, 0.05, &mut rng);
    *model.mapper.get_mut("l3.weight").unwrap() = l3;
    let b = 3;
    let texts: Vec<_> = (0..b)
        .map(|_| {
            let tokens: Vec<u32> = (0..dims.text_len)
                .map(|_| rng.next_below(dims.vocab as u64) as u32)
                .collect();
            encode_text(&model, &tokens).unwrap()
        })
        .collect();
    let patches: Vec<Tensor<f64>> = (0..b).map(|_| randn(dims.patches, dims.d_in, 1.0, &mut rng)).collect();
    let plain: Vec<Vec<f64>> = patches
        .iter()
        .map(|p| encode_image(&model, p, None).unwrap().v_joint)
        .collect();
    let batch = Batch {
        texts: texts.iter().collect(),
        patches: patches.iter().collect(),
        stage1_images: plain.iter().map(Vec::as_slice).collect(),
    };
    let opts = BatchOptions {
        conditioning: Conditioning::PerRow,
        prompts: PromptSource::Mapper,
        want_grads: true,
        want_itm_grads: variant == Variant::B,
    };
    let outcome = batch_objective(&model, &batch, opts).unwrap();
    let loss_opts = BatchOptions {
        want_grads: false,
        want_itm_grads: false,
        ..opts
    };
    let mut worst = 0.0f64;
    let grads = outcome.mapper_grads.unwrap();
    for (key, tensor) in model.mapper.tensors() {
        let coords = sample(tensor.len(), 6, &mut rng);
        let f = |p: &[f64]| {
            let mut q = model.clone();
            *q.mapper.get_mut(key).unwrap() = t(tensor.rows(), tensor.cols(), p);
            batch_objective(&q, &batch, loss_opts).unwrap().loss
        };
        worst = worst.max(fd_sampled(f, grads[key].data(), tensor.data(), &coords));
    }
    if let Some(ig) = outcome.itm_grads {
        for (key, tensor) in model.itm_head.tensors() {
            let coords = sample(tensor.len(), 3, &mut rng);
            let f = |p: &[f64]| {
                let mut q = model.clone();
                *q.itm_head.get_mut(key).unwrap() = t(tensor.rows(), tensor.cols(), p);
                batch_objective(&q, &batch, loss_opts).unwrap().loss
            };
            worst = worst.max(fd_sampled(f, ig[key].data(), tensor.data(), &coords));
        }
    }
    worst
}

fn a1() -> Outcome {
    let start = Instant::now();
    let mut worst: Vec<(String, f64)> = Vec::new();
    for seed in GRAD_SEEDS {
        for (name, e) in primitive_errors(seed) {
            worst.push((format!("{name}@{seed}"), e));
        }
        for variant in [Variant::C, Variant::S, Variant::B] {
            worst.push((format!("chain-{variant}@{seed}"), chain_error(seed, variant)));
        }
    }
    let elapsed = start.elapsed();
    let (name, max) = worst
        .iter()
        .cloned()
        .fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let failing: Vec<_> = worst
        .iter()
        .filter(|(_, e)| !(*e < GRAD_TOL))
        .map(|(n, _)| n.as_str())
        .collect();
    check(failing.is_empty(), format!("rel. error >= {GRAD_TOL:e} in {failing:?}"))?;
    check(
        elapsed < GRAD_BUDGET,
        format!("took {elapsed:.1?}, budget {GRAD_BUDGET:?}"),
    )?;
    Ok(format!(
        "{} checks, max rel. error {max:.2e} ({name}), {elapsed:.1?}",
        worst.len()
    ))
}

// A2

fn random_dataset(n: usize, dims: &DimsConfig, rng: &mut Rng) -> PairDataset {
    let mut records: Vec<PairRecord> = Vec::with_capacity(n);
    for i in 0..n {
        // every fifth image duplicates its predecessor, so scores tie
        let patches = if i % 5 == 4 {
            records[i - 1].patches.clone()
        } else {
            randn::<f32>(dims.patches, dims.d_in, 1.0, rng)
        };
        records.push(PairRecord {
            id: format!("img{i:03}"),
            patches,
            tokens: vec![1; dims.text_len],
            caption: String::new(),
            categories: BTreeSet::new(),
            occluded_categories: BTreeSet::new(),
        });
    }
    PairDataset::new(records).unwrap()
}

fn a2() -> Outcome {
    let dims = DimsConfig {
        prompts: 0,
        ..DimsConfig::default()
    };
    let mut rng = Rng::new(2);
    let model = init_frozen_model::<f32>(11, dims, Variant::C, MapperConfig::default()).unwrap();
    let ds = random_dataset(40, &dims, &mut rng);
    let store = embed_gallery(&model, &ds).unwrap();
    let mut ties = 0;
    for q in 0..100 {
        let tokens: Vec<u32> = (0..dims.text_len)
            .map(|_| rng.next_below(dims.vocab as u64) as u32)
            .collect();
        let text = encode_text(&model, &tokens).unwrap();
        let first = stage1_rank(&store, &format!("q{q}"), &text.t_joint).unwrap();
        ties += first.entries.windows(2).filter(|w| w[0].score == w[1].score).count();
        for k in [10, ds.len()] {
            let second = rerank(&model, &ds, &text, &first, k, RerankOptions::default()).unwrap();
            check(second.ids() == first.ids(), format!("query {q}, k={k}: order changed"))?;
        }
    }
    check(ties > 0, "no tied scores exercised")?;
    Ok(format!(
        "100 queries, k in {{10, 40}}, {ties} tied pairs, orders identical"
    ))
}

// A3

fn a3() -> Outcome {
    let start = Instant::now();
    let dims = DimsConfig::default();
    let spec = SynthSpec::default();
    check(spec.n == 200 && spec.clusters == 20, "gen-synth defaults changed")?;
    let data = gen_synthetic_dataset(A3_SEED, &spec, &dims).map_err(|e| e.to_string())?;
    let model = init_frozen_model::<f32>(A3_SEED, dims, Variant::C, MapperConfig::default()).unwrap();
    let store = embed_gallery(&model, &data.dataset).unwrap();
    let texts: Vec<_> = data
        .benchmark
        .queries
        .iter()
        .map(|q| encode_text(&model, &q.text_tokens).unwrap())
        .collect();
    let stage1: Vec<RankingResult> = data
        .benchmark
        .queries
        .iter()
        .zip(&texts)
        .map(|(q, t)| stage1_rank(&store, &q.id, &t.t_joint).unwrap())
        .collect();
    let plan = mine_dataset(&model, &data.dataset, A3_BATCH, false).unwrap();
    let cfg = TrainConfig {
        variant: Variant::C,
        steps: 500,
        conditioning: Conditioning::PerRow,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(model, &data.dataset, &plan, cfg, A3_SEED).unwrap();
    trainer.run(|_, _, _| Ok(())).map_err(|e| e.to_string())?;
    let (trained, trace) = trainer.into_parts();
    let first = trace[..50].iter().sum::<f64>() / 50.0;
    let last = trace[trace.len() - 50..].iter().sum::<f64>() / 50.0;
    let reranked: Vec<RankingResult> = stage1
        .iter()
        .zip(&texts)
        .map(|(r, t)| rerank(&trained, &data.dataset, t, r, 10, RerankOptions::default()).unwrap())
        .collect();
    let r1_stage1 = recall_at_k(&stage1, &data.benchmark, 1).unwrap();
    let r1_rerank = recall_at_k(&reranked, &data.benchmark, 1).unwrap();
    let elapsed = start.elapsed();
    let summary = format!(
        "loss {first:.3} -> {last:.3} (ratio {:.3}), R@1 {r1_stage1:.3} -> {r1_rerank:.3} (margin {A3_MARGIN}), {elapsed:.1?}",
        last / first
    );
    check(last <= 0.5 * first, format!("(a) loss ratio above 0.5: {summary}"))?;
    check(
        r1_rerank >= r1_stage1 + A3_MARGIN,
        format!("(b) re-rank gain below margin: {summary}"),
    )?;
    check(
        elapsed < TRAIN_BUDGET,
        format!("over the {TRAIN_BUDGET:?} budget: {summary}"),
    )?;
    Ok(summary)
}

// A4

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let n = a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        0.0
    } else {
        a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / n
    }
}

/// Repeated arg-max selection: highest cosine, lowest index on ties.
fn mining_oracle(texts: &[Vec<f64>], images: &[Vec<f64>], b: usize) -> Vec<Vec<usize>> {
    (0..texts.len())
        .map(|i| {
            let mut batch = vec![i];
            while batch.len() < b {
                let mut best: Option<(usize, f64)> = None;
                for j in 0..images.len() {
                    if batch.contains(&j) {
                        continue;
                    }
                    let s = cos(&texts[i], &images[j]);
                    if best.is_none_or(|(_, bs)| s > bs) {
                        best = Some((j, s));
                    }
                }
                batch.push(best.unwrap().0);
            }
            batch
        })
        .collect()
}

fn small_ints(n: usize, d: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| rng.next_below(3) as f64 - 1.0).collect())
        .collect()
}

/// Keeps items whose count of strictly better (or equal and earlier)
/// scores is below `keep`.
fn selection_oracle(scores: &[f64], keep: usize) -> Vec<usize> {
    (0..scores.len())
        .filter(|&i| {
            let ahead = (0..scores.len())
                .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
                .count();
            ahead < keep
        })
        .collect()
}

struct Instance {
    rankings: Vec<RankingResult>,
    bench: Benchmark,
}

fn random_instance(rng: &mut Rng) -> Instance {
    let g = 2 + rng.next_below(29) as usize;
    let gallery: Vec<String> = (0..g).map(|i| format!("g{i}")).collect();
    let queries = 1 + rng.next_below(4) as usize;
    let mut rankings = Vec::new();
    let mut bench = Benchmark {
        gallery_ids: gallery.clone(),
        ..Benchmark::default()
    };
    for q in 0..queries {
        let mut order = gallery.clone();
        rng.shuffle(&mut order);
        // some rankings are truncated, so positives can be missing
        let len = if rng.next_f64() < 0.3 {
            1 + rng.next_below(g as u64) as usize
        } else {
            g
        };
        order.truncate(len);
        let mut pos = Vec::new();
        let mut excluded = Vec::new();
        for id in &gallery {
            match rng.next_below(5) {
                0 => pos.push(id.clone()),
                1 => excluded.push(id.clone()),
                _ => {}
            }
        }
        if pos.is_empty() {
            pos.push(gallery[rng.next_below(g as u64) as usize].clone());
            excluded.retain(|e| e != &pos[0]);
        }
        rankings.push(RankingResult {
            query_id: format!("q{q}"),
            entries: order
                .iter()
                .enumerate()
                .map(|(i, id)| RankEntry {
                    id: id.clone(),
                    score: -(i as f64),
                })
                .collect(),
            stage: Stage::Stage1,
            k_reranked: 0,
        });
        bench.queries.push(BenchmarkQuery {
            id: format!("q{q}"),
            text: String::new(),
            text_tokens: vec![1],
            positives: pos,
            excluded,
        });
    }
    Instance { rankings, bench }
}

/// Direct definitions: recall = hits in the top k of the judged list over
/// |positives|; AP = mean over positives of precision at that positive.
fn metric_oracle(inst: &Instance, k: usize) -> (f64, f64) {
    let (mut recall, mut map) = (0.0, 0.0);
    for (q, r) in inst.bench.queries.iter().zip(&inst.rankings) {
        let judged: Vec<&str> = r
            .entries
            .iter()
            .map(|e| e.id.as_str())
            .filter(|id| !q.excluded.iter().any(|x| x == id))
            .collect();
        let is_pos = |id: &str| q.positives.iter().any(|p| p == id);
        let hits = judged.iter().take(k).filter(|id| is_pos(id)).count();
        recall += hits as f64 / q.positives.len() as f64;
        let mut ap = 0.0;
        for p in &q.positives {
            if let Some(rank) = judged.iter().position(|id| id == p) {
                let above = judged[..=rank].iter().filter(|id| is_pos(id)).count();
                ap += above as f64 / (rank + 1) as f64;
            }
        }
        map += ap / q.positives.len() as f64;
    }
    let n = inst.bench.queries.len() as f64;
    (recall / n, map / n)
}

fn a4() -> Outcome {
    for seed in 0..20u64 {
        let mut rng = Rng::new(seed);
        let n = 8 + rng.next_below(57) as usize;
        let b = 2 + rng.next_below(7) as usize;
        let texts = small_ints(n, 4, &mut rng);
        let images = small_ints(n, 4, &mut rng);
        let plan = mine_hard_batches(&texts, &images, b, None, seed).unwrap();
        check(
            plan.batches == mining_oracle(&texts, &images, b),
            format!("mining differs, seed {seed}"),
        )?;
    }
    for seed in 0..50u64 {
        let mut rng = Rng::new(100 + seed);
        let count = 1 + rng.next_below(30) as usize;
        let scores: Vec<f64> = (0..count).map(|_| rng.next_below(5) as f64).collect();
        let plan = CurationPlan {
            batches: (0..count).map(|i| vec![i, i + 1]).collect(),
            learnability: None,
            source_seed: 0,
        };
        let fraction = [0.1, 0.25, 0.5, 1.0][seed as usize % 4];
        let keep = selection_count(count, fraction);
        // ⌈f·count⌉ in integer arithmetic for these fractions
        let (num, den) = [(1, 10), (1, 4), (1, 2), (1, 1)][seed as usize % 4];
        check(
            keep == (num * count).div_ceil(den).max(1),
            format!("keep count {keep} for {fraction}·{count}"),
        )?;
        let chosen = select_by_learnability(&plan, |b| Ok(scores[b[0]]), |_| Ok(0.0), fraction).unwrap();
        let expect: Vec<Vec<usize>> = selection_oracle(&scores, keep)
            .into_iter()
            .map(|i| plan.batches[i].clone())
            .collect();
        check(chosen.batches == expect, format!("selection differs, seed {seed}"))?;
    }
    let mut rng = Rng::new(4);
    for case in 0..50 {
        let inst = random_instance(&mut rng);
        for k in [1, 3, 10] {
            let (recall, map) = metric_oracle(&inst, k);
            let got_r = recall_at_k(&inst.rankings, &inst.bench, k).unwrap();
            let got_m = mean_average_precision(&inst.rankings, &inst.bench).unwrap();
            check(
                got_r == recall,
                format!("case {case}: R@{k} {got_r} vs oracle {recall}"),
            )?;
            check(
                (got_m - map).abs() < 1e-12,
                format!("case {case}: mAP {got_m} vs oracle {map}"),
            )?;
        }
    }
    Ok("mining 20/20, selection 50/50, Recall@k and mAP 50/50 match their oracles".into())
}

// A5

fn a5() -> Outcome {
    let mut rng = Rng::new(5);
    for case in 0..50 {
        let mut inst = random_instance(&mut rng);
        let g = inst.bench.gallery_ids.len();
        for (q, r) in inst.bench.queries.iter_mut().zip(&mut inst.rankings) {
            q.excluded.clear();
            r.entries = inst
                .bench
                .gallery_ids
                .iter()
                .enumerate()
                .map(|(i, id)| RankEntry {
                    id: id.clone(),
                    score: -(i as f64),
                })
                .collect();
        }
        let full = recall_at_k(&inst.rankings, &inst.bench, g).unwrap();
        check(full == 1.0, format!("case {case}: Recall@G = {full}"))?;
        let ks: Vec<usize> = (1..=g).collect();
        let c = curve(&inst.rankings, &inst.bench, CurveKind::RecallTopk, &ks).unwrap();
        check(
            c.points.windows(2).all(|w| w[1].1 >= w[0].1),
            format!("case {case}: recall curve decreases"),
        )?;
        let map = mean_average_precision(&inst.rankings, &inst.bench).unwrap();
        check((0.0..=1.0).contains(&map), format!("case {case}: mAP {map}"))?;
    }
    let pos: BTreeSet<&str> = ["a", "c"].into();
    let ap = average_precision(&["a", "b", "c", "d"], &pos);
    check((ap - 0.833333).abs() < 1e-6, format!("AP at ranks 1,3 = {ap}"))?;
    Ok(format!(
        "Recall@G = 1, monotone curves, mAP in [0,1] on 50 instances; AP(1,3) = {ap:.6}"
    ))
}

// A6

fn a6() -> Outcome {
    let nce = info_nce_scores(&Tensor::<f64>::filled(4, 4, 0.3)).unwrap().loss;
    let sig = sigmoid_pairwise_cosines(&Tensor::<f64>::zeros(4, 4), 10.0, 0.0)
        .unwrap()
        .loss;
    let (b, _) = bce(0.0f64, 1.0).unwrap();
    let ln2 = std::f64::consts::LN_2;
    check((nce - 4f64.ln()).abs() < 1e-9, format!("InfoNCE uniform = {nce}"))?;
    check((sig - ln2).abs() < 1e-9, format!("sigmoid zero logits = {sig}"))?;
    check((b - ln2).abs() < 1e-9, format!("bce(0,1) = {b}"))?;
    Ok(format!("InfoNCE {nce:.12}, sigmoid {sig:.12}, bce {b:.12}"))
}

// A7

const PIPELINE_CONFIG: &str =
    r#"{"seed":7,"synth":{"N":40,"clusters":4,"prototype_steps":20},"train":{"steps":30},"batch_size":6}"#;

fn elip(dir: &Path, seed: Option<&str>, args: &[&str]) -> Result<(), String> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_elip"));
    cmd.current_dir(dir)
        .env_remove("ELIP_SEED")
        .args(["--config", "cfg.json"])
        .args(args);
    if let Some(s) = seed {
        cmd.env("ELIP_SEED", s);
    }
    let out = cmd.output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("elip {args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn pipeline(dir: &Path, seed: Option<&str>) -> Result<(), String> {
    std::fs::write(dir.join("cfg.json"), PIPELINE_CONFIG).unwrap();
    let data = ["--dataset", "d/dataset.jsonl", "--model"];
    elip(dir, seed, &["--out", "d", "gen-synth"])?;
    elip(dir, seed, &["--out", "d", "init-model"])?;
    elip(
        dir,
        seed,
        &[&data[..], &["d/model", "--out", "d", "embed-gallery"]].concat(),
    )?;
    elip(
        dir,
        seed,
        &[&data[..], &["d/model", "--out", "d", "curate-mine"]].concat(),
    )?;
    elip(
        dir,
        seed,
        &[&data[..], &["d/model", "--out", "r", "--plan", "d/plan.json", "train"]].concat(),
    )?;
    let rerank = [
        "r/model",
        "--out",
        "r",
        "--gallery",
        "d/gallery.json",
        "--benchmark",
        "d/benchmark.json",
        "rerank",
    ];
    elip(dir, seed, &[&data[..], &rerank[..]].concat())?;
    elip(
        dir,
        seed,
        &[
            "--out",
            "r",
            "--benchmark",
            "d/benchmark.json",
            "--rankings",
            "r/rankings.json",
            "eval",
        ],
    )
}

fn artifacts(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = vec!["r/metrics.csv".to_string(), "r/trace.csv".to_string()];
    let mut model: Vec<String> = std::fs::read_dir(dir.join("r/model"))
        .unwrap()
        .map(|e| format!("r/model/{}", e.unwrap().file_name().to_string_lossy()))
        .collect();
    model.sort();
    files.extend(model);
    files
        .into_iter()
        .map(|f| (f.clone(), std::fs::read(dir.join(&f)).unwrap()))
        .collect()
}

fn a7() -> Outcome {
    let runs: Vec<tempfile::TempDir> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    pipeline(runs[0].path(), None)?;
    pipeline(runs[1].path(), None)?;
    pipeline(runs[2].path(), Some("8"))?;
    let (a, b, c) = (
        artifacts(runs[0].path()),
        artifacts(runs[1].path()),
        artifacts(runs[2].path()),
    );
    check(a.len() > 2 && a.len() == b.len(), "artifact sets differ")?;
    for ((name, x), (_, y)) in a.iter().zip(&b) {
        check(x == y, format!("{name} differs between identical runs"))?;
    }
    let changed = a.iter().zip(&c).filter(|((_, x), (_, y))| x != y).count();
    check(
        a[0].1 != c[0].1 && a[1].1 != c[1].1,
        "ELIP_SEED=8 left metrics or trace unchanged",
    )?;
    Ok(format!(
        "{} files byte-identical across repeat runs; ELIP_SEED=8 changes {changed} of them",
        a.len()
    ))
}

// A8

fn a8() -> Outcome {
    let base = DimsConfig {
        patches: 4,
        d_v: 8,
        d_e: 8,
        image_layers: 2,
        heads: 2,
        d_t: 6,
        insert_layer: 0,
        ..DimsConfig::default()
    };
    let mapper = MapperConfig::default();
    let at = |n: usize| DimsConfig { prompts: n, ..base };
    let baseline = flops_breakdown(&at(0), &mapper, false).total;
    check(
        flops_breakdown(&at(0), &mapper, true).total == baseline,
        "FLOPs(n=0) differs from baseline",
    )?;
    let delta = |n: usize| flops_breakdown(&at(n), &mapper, true).total as i128 - baseline as i128;

    // Hand count at P=4, d=8, H=2, L=2, prompts from block 0, mapper hidden 32,
    // d_t=6. Per block, T → T+n adds 4·d·(T'²−T²) for QKᵀ and AV, 5·H·(T'²−T²)
    // for softmax, and n·d·(2·5 + 4·2·d + 2·2·4d + 5·4) for the norms, QKVO,
    // MLP and GELU. The final norm adds 5·d·n, the mapper
    // 2(d_t·32 + 32·32 + 32·d·n) + 5·2·32.
    let t0: i128 = 5;
    let hand = |n: i128| {
        let t = t0 + n;
        let per_block =
            4 * 8 * (t * t - t0 * t0) + 5 * 2 * (t * t - t0 * t0) + n * 8 * (2 * 5 + 4 * 2 * 8 + 2 * 2 * 4 * 8 + 5 * 4);
        let mapper = 2 * (6 * 32 + 32 * 32 + 32 * 8 * n) + 5 * 2 * 32;
        2 * per_block + 5 * 8 * n + mapper
    };
    for n in [1, 2, 5, 10] {
        check(
            delta(n) == hand(n as i128),
            format!("ΔFLOPs({n}) = {} vs hand count {}", delta(n), hand(n as i128)),
        )?;
    }
    check(
        (1..=10).all(|n| delta(n) > delta(n - 1)),
        "ΔFLOPs not strictly increasing",
    )?;
    let slope = delta(2) - delta(1);
    let affine = [5usize, 10]
        .iter()
        .all(|&n| delta(n) == delta(1) + slope * (n as i128 - 1));
    check(
        affine,
        format!(
            "ΔFLOPs matches the hand count at n in {{1,2,5,10}} ({}, {}, {}, {}) but is not affine-linear: \
             attention over T = P+1+n tokens adds terms in n²",
            delta(1),
            delta(2),
            delta(5),
            delta(10)
        ),
    )?;
    Ok(format!("baseline {baseline}, slope {slope}"))
}

// A9

fn a9() -> Outcome {
    let dims = DimsConfig::default();
    let spec = SynthSpec {
        n: 24,
        clusters: 3,
        prototype_steps: 5,
        ..SynthSpec::default()
    };
    let data = gen_synthetic_dataset(9, &spec, &dims).unwrap();
    let ds = &data.dataset;

    // variant B without ITM fine-tuning
    let model = init_frozen_model::<f32>(9, dims, Variant::B, MapperConfig::default()).unwrap();
    let plan = mine_dataset(&model, ds, 4, false).unwrap();
    let cfg = TrainConfig {
        variant: Variant::B,
        steps: 5,
        lr: Some(1e-3),
        finetune_itm: false,
        ..TrainConfig::default()
    };
    let before = model.clone();
    let mut trainer = Trainer::new(model, ds, &plan, cfg.clone(), 9).unwrap();
    trainer.run(|_, _, _| Ok(())).map_err(|e| e.to_string())?;
    let after = trainer.model();
    let bits = |m: &elip_core::encoders::ModelBundle<f32>| -> Vec<u32> {
        m.itm_head
            .tensors()
            .values()
            .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
            .collect()
    };
    check(bits(after) == bits(&before), "itm_head changed with finetune_itm=false")?;
    check(
        after.mapper.tensors() != before.mapper.tensors(),
        "mapper did not train",
    )?;
    let mut tuned = Trainer::new(
        before.clone(),
        ds,
        &plan,
        TrainConfig {
            finetune_itm: true,
            ..cfg
        },
        9,
    )
    .unwrap();
    tuned.run(|_, _, _| Ok(())).map_err(|e| e.to_string())?;
    check(
        bits(tuned.model()) != bits(&before),
        "itm_head frozen even with finetune_itm=true",
    )?;

    // jest_fraction = 1.0
    let model = init_frozen_model::<f32>(9, dims, Variant::C, MapperConfig::default()).unwrap();
    let cfg = TrainConfig {
        jest_fraction: Some(1.0),
        steps: 3,
        ..TrainConfig::default()
    };
    let jest = Trainer::new(model.clone(), ds, &plan, cfg, 9).unwrap();
    check(
        jest.plan().batches == plan.batches,
        "jest_fraction=1.0 changed the plan",
    )?;

    // prompts inserted before the last block only
    let last = dims.image_layers - 1;
    let late = model.clone().with_insert_layer(last).unwrap();
    let mut rng = Rng::new(9);
    let prompts = randn::<f32>(dims.prompts, dims.d_v, 1.0, &mut rng);
    let patches = &ds.get(0).patches;
    let with = encode_image(&late, patches, Some(&prompts)).unwrap();
    let without = encode_image(&late, patches, None).unwrap();
    let early = encode_image(&model, patches, Some(&prompts)).unwrap();
    let base = dims.patches + 1;
    for l in 0..dims.image_layers {
        let want = if l == last { base + dims.prompts } else { base };
        check(
            late.dims.image_tokens_at(l, true) == want,
            format!("token count at block {l}"),
        )?;
        check(with.attn[l][0].rows() == want, format!("attention size at block {l}"))?;
        check(
            early.attn[l][0].rows() == base + dims.prompts,
            format!("early insertion at block {l}"),
        )?;
    }
    for l in 0..last {
        check(
            with.attn[l] == without.attn[l],
            format!("block {l} changed under late insertion"),
        )?;
    }
    check(with.v_joint != without.v_joint, "late prompts had no effect")?;
    let late_cfg = TrainConfig {
        steps: 3,
        ..TrainConfig::default()
    };
    let mut tr = Trainer::new(late.clone(), ds, &plan, late_cfg, 9).unwrap();
    tr.run(|_, _, l| {
        if l.is_finite() {
            Ok(())
        } else {
            Err(elip_core::Error::numeric("loss"))
        }
    })
    .map_err(|e| e.to_string())?;
    Ok(format!(
        "ITM head bit-identical, jest 1.0 keeps {} batches, late insertion touches only block {last}",
        plan.batches.len()
    ))
}

#[test]
fn acceptance() {
    let criteria: [(&str, &str, fn() -> Outcome); 9] = [
        ("A1", "gradient fidelity", a1),
        ("A2", "no-op equivalence", a2),
        ("A3", "planted-data learning", a3),
        ("A4", "oracle equivalence", a4),
        ("A5", "metric identities", a5),
        ("A6", "loss identities", a6),
        ("A7", "determinism", a7),
        ("A8", "FLOPs estimator", a8),
        ("A9", "ablation toggles", a9),
    ];
    let mut failed = Vec::new();
    println!();
    for (id, name, run) in criteria {
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("{id} PASS {name}: {detail}"),
            Err(detail) => {
                println!("{id} FAIL {name}: {detail}");
                failed.push(id);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
