//! Data curation: hard-batch mining, learnability selection, occluded
//! benchmark construction, and a planted synthetic dataset.

mod synth;
mod tokenizer;

use std::collections::{BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::{encode_image, encode_text, ModelBundle};
use crate::error::{Error, Result};
use crate::numkit::{dot, l2_norm, Scalar, Tensor};
use crate::rng::Rng;

pub use synth::{gen_synthetic_dataset, SynthSpec, SyntheticData};
pub use tokenizer::{Tokenizer, PAD};

/// One image-text pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub id: String,
    /// `P × d_in` raw patch features.
    pub patches: Tensor<f32>,
    /// Padded token ids, length `m`.
    pub tokens: Vec<u32>,
    pub caption: String,
    pub categories: BTreeSet<String>,
    /// Categories every instance of which is occluded.
    pub occluded_categories: BTreeSet<String>,
}

/// Ordered records with unique ids.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PairDataset {
    records: Vec<PairRecord>,
}

impl PairDataset {
    pub fn new(records: Vec<PairRecord>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::data(format!("duplicate record id `{}`", r.id)));
            }
            if !r.occluded_categories.is_subset(&r.categories) {
                return Err(Error::data(format!(
                    "record `{}` has occluded categories outside its categories",
                    r.id
                )));
            }
        }
        Ok(Self { records })
    }

    pub fn records(&self) -> &[PairRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, i: usize) -> &PairRecord {
        &self.records[i]
    }

    pub fn ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.id.clone()).collect()
    }

    /// Position of every id.
    pub fn index(&self) -> HashMap<&str, usize> {
        self.records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.as_str(), i))
            .collect()
    }

    /// Checks every record against the model dimensions.
    pub fn validate_dims(&self, dims: &crate::encoders::DimsConfig) -> Result<()> {
        for r in &self.records {
            if r.patches.shape() != (dims.patches, dims.d_in) {
                return Err(Error::data(format!(
                    "record `{}` patches are {:?}, expected {:?}",
                    r.id,
                    r.patches.shape(),
                    (dims.patches, dims.d_in)
                )));
            }
            if r.tokens.len() != dims.text_len {
                return Err(Error::data(format!(
                    "record `{}` has {} tokens, expected {}",
                    r.id,
                    r.tokens.len(),
                    dims.text_len
                )));
            }
        }
        Ok(())
    }
}

/// Ordered batches of record indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationPlan {
    pub batches: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learnability: Option<Vec<f64>>,
    pub source_seed: u64,
}

impl CurationPlan {
    pub fn validate(&self, n: usize) -> Result<()> {
        for (b, batch) in self.batches.iter().enumerate() {
            let mut seen = BTreeSet::new();
            for &i in batch {
                if i >= n {
                    return Err(Error::data(format!("plan batch {b} references record {i} of {n}")));
                }
                if !seen.insert(i) {
                    return Err(Error::data(format!("plan batch {b} repeats record {i}")));
                }
            }
        }
        if let Some(l) = &self.learnability {
            if l.len() != self.batches.len() {
                return Err(Error::data("plan learnability length differs from batch count"));
            }
        }
        Ok(())
    }
}

/// One text query with its relevance judgements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkQuery {
    #[serde(default)]
    pub id: String,
    #[serde(default)]
    pub text: String,
    pub text_tokens: Vec<u32>,
    pub positives: Vec<String>,
    /// Gallery items that are neither positive nor negative for this query.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excluded: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Benchmark {
    pub queries: Vec<BenchmarkQuery>,
    #[serde(default)]
    pub gallery_ids: Vec<String>,
    /// Candidate queries dropped for having no positives.
    #[serde(default)]
    pub dropped_queries: usize,
}

impl Benchmark {
    /// Fills missing query ids and checks positives against the gallery.
    pub fn normalize(&mut self) -> Result<()> {
        let gallery: BTreeSet<&str> = self.gallery_ids.iter().map(String::as_str).collect();
        let mut ids = BTreeSet::new();
        for (i, q) in self.queries.iter_mut().enumerate() {
            if q.id.is_empty() {
                q.id = format!("q{i}");
            }
            if !ids.insert(q.id.clone()) {
                return Err(Error::data(format!("duplicate query id `{}`", q.id)));
            }
            if q.positives.is_empty() {
                return Err(Error::data(format!("query `{}` has no positives", q.id)));
            }
            if !gallery.is_empty() {
                if let Some(p) = q.positives.iter().find(|p| !gallery.contains(p.as_str())) {
                    return Err(Error::data(format!(
                        "query `{}` positive `{p}` is not in the gallery",
                        q.id
                    )));
                }
            }
        }
        Ok(())
    }
}

fn cosine<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = l2_norm(a) * l2_norm(b);
    if n == T::zero() {
        T::zero()
    } else {
        dot(a, b) / n
    }
}

/// Groups each record with the `b − 1` records whose image embeddings are
/// most similar to its text embedding. Ties go to the lower index. With
/// `categories`, candidates sharing a category with a chosen member are
/// skipped.
pub fn mine_hard_batches<T: Scalar>(
    texts: &[Vec<T>],
    images: &[Vec<T>],
    b: usize,
    categories: Option<&[BTreeSet<String>]>,
    source_seed: u64,
) -> Result<CurationPlan> {
    let n = texts.len();
    if images.len() != n || categories.is_some_and(|c| c.len() != n) {
        return Err(Error::data("text, image and category lists differ in length"));
    }
    if b == 0 || b > n {
        return Err(Error::config(format!("batch size {b} must be in 1..={n}")));
    }
    let batches = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut order: Vec<(usize, T)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (j, cosine(&texts[i], &images[j])))
                .collect();
            order.sort_by(|x, y| {
                y.1.partial_cmp(&x.1)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(x.0.cmp(&y.0))
            });
            let mut batch = vec![i];
            let mut used: BTreeSet<&str> =
                categories.map_or_else(BTreeSet::new, |c| c[i].iter().map(String::as_str).collect());
            for (j, _) in order {
                if batch.len() == b {
                    break;
                }
                if let Some(c) = categories {
                    if c[j].iter().any(|x| used.contains(x.as_str())) {
                        continue;
                    }
                    used.extend(c[j].iter().map(String::as_str));
                }
                batch.push(j);
            }
            if batch.len() < b {
                return Err(Error::data(format!(
                    "record {i}: only {} category-distinct members available for batch size {b} (short by {})",
                    batch.len(),
                    b - batch.len()
                )));
            }
            Ok(batch)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CurationPlan {
        batches,
        learnability: None,
        source_seed,
    })
}

/// Frozen joint embeddings (no prompts) for every record: `(texts, images)`.
pub fn frozen_embeddings<T: Scalar>(model: &ModelBundle<T>, ds: &PairDataset) -> Result<(Vec<Vec<T>>, Vec<Vec<T>>)> {
    ds.records()
        .par_iter()
        .map(|r| {
            let t = encode_text(model, &r.tokens)?.t_joint;
            let v = encode_image(model, &r.patches.cast(), None)?.v_joint;
            Ok((t, v))
        })
        .collect::<Result<Vec<_>>>()
        .map(|pairs| pairs.into_iter().unzip())
}

/// [`mine_hard_batches`] on the frozen encoders' embeddings.
pub fn mine_dataset<T: Scalar>(
    model: &ModelBundle<T>,
    ds: &PairDataset,
    b: usize,
    unique_category: bool,
) -> Result<CurationPlan> {
    let (texts, images) = frozen_embeddings(model, ds)?;
    let cats: Vec<BTreeSet<String>> = ds.records().iter().map(|r| r.categories.clone()).collect();
    mine_hard_batches(
        &texts,
        &images,
        b,
        unique_category.then_some(cats.as_slice()),
        model.seed,
    )
}

/// Number of items kept when selecting `fraction` of `count`.
pub fn selection_count(count: usize, fraction: f64) -> usize {
    // Guard against 0.1·30 = 3.0000000000000004 style overshoot.
    let raw = fraction * count as f64;
    let rounded = raw.round();
    let k = if (raw - rounded).abs() < 1e-9 {
        rounded
    } else {
        raw.ceil()
    };
    (k as usize).clamp(1, count)
}

/// Keeps the `⌈fraction · count⌉` batches with the highest learnability
/// (`learner − reference` loss), lowest index on ties, in plan order.
pub fn select_by_learnability(
    plan: &CurationPlan,
    mut learner_loss: impl FnMut(&[usize]) -> Result<f64>,
    mut reference_loss: impl FnMut(&[usize]) -> Result<f64>,
    fraction: f64,
) -> Result<CurationPlan> {
    if plan.batches.is_empty() {
        return Err(Error::data("cannot select from an empty plan"));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(format!(
            "selection fraction {fraction} must be in (0, 1]"
        )));
    }
    let mut scores = Vec::with_capacity(plan.batches.len());
    for batch in &plan.batches {
        scores.push(learner_loss(batch)? - reference_loss(batch)?);
    }
    select_top(plan, &scores, fraction)
}

/// Selection step of [`select_by_learnability`] on precomputed scores.
pub fn select_top(plan: &CurationPlan, scores: &[f64], fraction: f64) -> Result<CurationPlan> {
    if scores.len() != plan.batches.len() {
        return Err(Error::data("one learnability score per batch required"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::numeric("non-finite learnability score"));
    }
    let keep = selection_count(scores.len(), fraction);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut chosen: Vec<usize> = order[..keep].to_vec();
    chosen.sort_unstable();
    Ok(CurationPlan {
        batches: chosen.iter().map(|&i| plan.batches[i].clone()).collect(),
        learnability: Some(chosen.iter().map(|&i| scores[i]).collect()),
        source_seed: plan.source_seed,
    })
}

/// Samples `⌈fraction · count⌉` batch indices without replacement and
/// returns them in plan order.
pub fn sample_subset(plan: &CurationPlan, fraction: f64, rng: &mut Rng) -> Result<CurationPlan> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(format!("subset fraction {fraction} must be in (0, 1]")));
    }
    if plan.batches.is_empty() {
        return Ok(plan.clone());
    }
    let keep = selection_count(plan.batches.len(), fraction);
    if keep == plan.batches.len() {
        return Ok(plan.clone());
    }
    let idx = rng.sample_indices(plan.batches.len(), keep);
    Ok(CurationPlan {
        batches: idx.iter().map(|&i| plan.batches[i].clone()).collect(),
        learnability: plan.learnability.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
        source_seed: plan.source_seed,
    })
}

/// One query per category: positives are records where the category is
/// fully occluded, records where it appears unoccluded are excluded, the
/// rest are negatives. Categories without positives are dropped.
pub fn build_occluded_benchmark(
    ds: &PairDataset,
    vocabulary: &[String],
    tokenizer: &Tokenizer,
    text_len: usize,
) -> Result<Benchmark> {
    let mut bench = Benchmark {
        gallery_ids: ds.ids(),
        ..Benchmark::default()
    };
    for cat in vocabulary {
        let mut positives = Vec::new();
        let mut excluded = Vec::new();
        for r in ds.records() {
            if r.categories.contains(cat) {
                if r.occluded_categories.contains(cat) {
                    positives.push(r.id.clone());
                } else {
                    excluded.push(r.id.clone());
                }
            }
        }
        if positives.is_empty() {
            bench.dropped_queries += 1;
            continue;
        }
        bench.queries.push(BenchmarkQuery {
            id: cat.clone(),
            text: cat.clone(),
            text_tokens: tokenizer.encode(cat, text_len)?,
            positives,
            excluded,
        });
    }
    Ok(bench)
}

/// Every category appearing in the dataset, sorted.
pub fn category_vocabulary(ds: &PairDataset) -> Vec<String> {
    let all: BTreeSet<&String> = ds.records().iter().flat_map(|r| r.categories.iter()).collect();
    all.into_iter().cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, cats: &[&str], occ: &[&str]) -> PairRecord {
        PairRecord {
            id: id.into(),
            patches: Tensor::zeros(1, 1),
            tokens: vec![0],
            caption: String::new(),
            categories: cats.iter().map(|s| s.to_string()).collect(),
            occluded_categories: occ.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let err = PairDataset::new(vec![record("a", &[], &[]), record("a", &[], &[])]).unwrap_err();
        assert!(matches!(&err, Error::Data(m) if m.contains("`a`")));
    }

    #[test]
    fn mining_small_example() {
        let n = |v: [f64; 2]| {
            let s = (v[0] * v[0] + v[1] * v[1]).sqrt();
            vec![v[0] / s, v[1] / s]
        };
        let texts = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
        let images = vec![n([1.0, 0.0]), n([0.9, 0.1]), n([0.0, 1.0])];
        let plan = mine_hard_batches(&texts, &images, 2, None, 0).unwrap();
        assert_eq!(plan.batches[0], vec![0, 1]);
        assert_eq!(plan.batches.len(), 3);
    }

    #[test]
    fn mining_full_batches_and_errors() {
        let texts = vec![vec![1.0f64, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]];
        let images = vec![vec![0.0f64, 1.0], vec![1.0, 0.0], vec![0.8, 0.6]];
        let plan = mine_hard_batches(&texts, &images, 3, None, 0).unwrap();
        assert_eq!(plan.batches[0], vec![0, 1, 2]);
        assert_eq!(plan.batches[1], vec![1, 0, 2]);
        assert!(matches!(
            mine_hard_batches(&texts, &images, 4, None, 0),
            Err(Error::Config(_))
        ));
        let cats: Vec<BTreeSet<String>> = ["x", "x", "y"].iter().map(|c| [c.to_string()].into()).collect();
        let err = mine_hard_batches(&texts, &images, 3, Some(&cats), 0).unwrap_err();
        assert!(matches!(&err, Error::Data(m) if m.contains("short by 1")));
        let plan = mine_hard_batches(&texts, &images, 2, Some(&cats), 0).unwrap();
        assert_eq!(plan.batches[0], vec![0, 2]);
    }

    fn plan(n: usize) -> CurationPlan {
        CurationPlan {
            batches: (0..n).map(|i| vec![i]).collect(),
            learnability: None,
            source_seed: 0,
        }
    }

    #[test]
    fn learnability_examples() {
        let learner = [2.0, 1.0, 3.0];
        let p = plan(3);
        let sel = select_by_learnability(&p, |b| Ok(learner[b[0]]), |_| Ok(1.0), 1.0 / 3.0).unwrap();
        assert_eq!(sel.batches, vec![vec![2]]);
        assert_eq!(sel.learnability, Some(vec![2.0]));
        let all = select_by_learnability(&p, |b| Ok(learner[b[0]]), |_| Ok(1.0), 1.0).unwrap();
        assert_eq!(all.batches, p.batches);
        let tied = select_by_learnability(&plan(5), |_| Ok(1.5), |_| Ok(1.5), 0.4).unwrap();
        assert_eq!(tied.batches, vec![vec![0], vec![1]]);
        assert!(matches!(
            select_by_learnability(&plan(0), |_| Ok(0.0), |_| Ok(0.0), 0.5),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            select_by_learnability(&p, |_| Ok(0.0), |_| Ok(0.0), 0.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn selection_count_rounding() {
        assert_eq!(selection_count(30, 0.1), 3);
        assert_eq!(selection_count(31, 0.1), 4);
        assert_eq!(selection_count(3, 1.0 / 3.0), 1);
        assert_eq!(selection_count(5, 1.0), 5);
        assert_eq!(selection_count(5, 0.01), 1);
    }

    #[test]
    fn occluded_partition() {
        let ds = PairDataset::new(vec![
            record("A", &["bicycle"], &["bicycle"]),
            record("B", &["bicycle"], &[]),
            record("C", &["dog"], &[]),
        ])
        .unwrap();
        let tok = Tokenizer::new(["bicycle", "dog"]).unwrap();
        let bench = build_occluded_benchmark(&ds, &category_vocabulary(&ds), &tok, 4).unwrap();
        assert_eq!(bench.queries.len(), 1);
        assert_eq!(bench.dropped_queries, 1);
        let q = &bench.queries[0];
        assert_eq!(q.positives, vec!["A".to_string()]);
        assert_eq!(q.excluded, vec!["B".to_string()]);
        assert_eq!(bench.gallery_ids.len(), 3);
        assert_eq!(tok.decode(&q.text_tokens), "bicycle");

        let plain = PairDataset::new(vec![record("A", &["dog"], &[])]).unwrap();
        assert!(build_occluded_benchmark(&plain, &category_vocabulary(&plain), &tok, 4)
            .unwrap()
            .queries
            .is_empty());
    }

    #[test]
    fn subset_sampling() {
        let p = plan(10);
        let mut rng = Rng::new(3);
        let s = sample_subset(&p, 0.3, &mut rng).unwrap();
        assert_eq!(s.batches.len(), 3);
        assert!(s.batches.windows(2).all(|w| w[0][0] < w[1][0]));
        assert_eq!(sample_subset(&p, 1.0, &mut rng).unwrap(), p);
    }

    #[test]
    fn benchmark_normalize() {
        let mut b = Benchmark {
            queries: vec![BenchmarkQuery {
                id: String::new(),
                text: String::new(),
                text_tokens: vec![1],
                positives: vec!["x".into()],
                excluded: vec![],
            }],
            gallery_ids: vec!["x".into()],
            dropped_queries: 0,
        };
        b.normalize().unwrap();
        assert_eq!(b.queries[0].id, "q0");
        b.queries[0].positives = vec!["y".into()];
        assert!(b.normalize().is_err());
    }
}
