//! Planted synthetic image-text pairs.
//!
//! Each cluster gets a prototype image whose leading patches are pushed
//! towards the cluster's caption embeddings, so the frozen towers can tell
//! clusters apart. The trailing patches start from a backdrop shared by all
//! clusters. Inside a cluster, images differ by a signal written into those
//! trailing patches along directions the frozen CLS path is blind to to
//! first order. Captions name both the cluster and the signal.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{Benchmark, BenchmarkQuery, PairDataset, PairRecord, Tokenizer};
use crate::encoders::{encode_text, image_backward, image_forward, DimsConfig, ModelBundle};
use crate::encoders::{init_frozen_model, Variant};
use crate::error::{Error, Result};
use crate::mapper::MapperConfig;
use crate::numkit::params::randn;
use crate::numkit::{dot, l2_norm, Tensor};
use crate::rng::Rng;

const STREAM: u64 = 0xD1B5_4A32_D192_ED03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    #[serde(rename = "N")]
    pub n: usize,
    pub clusters: usize,
    /// Per-entry RMS of the planted signal.
    pub signal_strength: f64,
    /// Per-entry std of the isotropic patch noise.
    pub noise: f64,
    /// Trailing patches carrying the signal.
    pub signal_patches: usize,
    /// Probability that a record's category is marked fully occluded.
    pub occlusion_rate: f64,
    /// Gradient steps used to fit each cluster prototype.
    pub prototype_steps: usize,
    /// Times the cluster word is repeated in each caption.
    pub cluster_repeats: usize,
    /// Times the signal word is repeated in each caption.
    pub signal_repeats: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n: 200,
            clusters: 20,
            signal_strength: 1.0,
            noise: 0.1,
            signal_patches: 12,
            occlusion_rate: 0.5,
            prototype_steps: 150,
            cluster_repeats: 4,
            signal_repeats: 3,
        }
    }
}

impl SynthSpec {
    pub fn per_cluster(&self) -> usize {
        self.n.div_ceil(self.clusters.max(1))
    }

    pub fn validate(&self, dims: &DimsConfig) -> Result<()> {
        if self.clusters < 2 || self.n < self.clusters {
            return Err(Error::config(format!(
                "synthetic data needs N >= clusters >= 2, got N={} clusters={}",
                self.n, self.clusters
            )));
        }
        if self.signal_patches == 0 || self.signal_patches >= dims.patches {
            return Err(Error::config(format!(
                "signal_patches must be in 1..{}, got {}",
                dims.patches, self.signal_patches
            )));
        }
        for (name, v) in [("signal_strength", self.signal_strength), ("noise", self.noise)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be finite and non-negative")));
            }
        }
        if !(0.0..=1.0).contains(&self.occlusion_rate) {
            return Err(Error::config("occlusion_rate must be in [0, 1]"));
        }
        let words = 1 + self.clusters + self.per_cluster();
        if words > dims.vocab {
            return Err(Error::config(format!(
                "synthetic captions need {words} words, vocab is {}",
                dims.vocab
            )));
        }
        let len = self.cluster_repeats + self.signal_repeats;
        if self.cluster_repeats == 0 || self.signal_repeats == 0 || len > dims.text_len {
            return Err(Error::config(format!(
                "captions need 1..{} tokens with both words present, got {} + {}",
                dims.text_len, self.cluster_repeats, self.signal_repeats
            )));
        }
        Ok(())
    }
}

/// Dataset, its ground-truth benchmark, and the caption tokenizer.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub dataset: PairDataset,
    pub benchmark: Benchmark,
    pub tokenizer: Tokenizer,
}

fn caption(spec: &SynthSpec, cluster: &str, signal: &str) -> String {
    let mut words = vec![cluster; spec.cluster_repeats];
    words.extend(vec![signal; spec.signal_repeats]);
    words.join(" ")
}

/// Where and how strongly within-cluster signals are planted.
struct SignalPlan<'a> {
    first: usize,
    strength: f64,
    bases: &'a [Vec<f64>],
}

impl SignalPlan<'_> {
    /// One signal per base with the prototype's first-order sensitive
    /// directions projected out, scaled to the target RMS.
    fn signals(&self, model: &ModelBundle<f64>, proto: &Tensor<f64>) -> Result<Vec<Vec<f64>>> {
        let basis = sensitive_basis(model, proto, self.first)?;
        Ok(self
            .bases
            .iter()
            .map(|g| {
                let mut u = g.clone();
                for q in &basis {
                    let c = dot(&u, q);
                    u.iter_mut().zip(q).for_each(|(x, &qi)| *x -= c * qi);
                }
                let scale = self.strength * (u.len() as f64).sqrt() / l2_norm(&u).max(1e-12);
                u.into_iter().map(|x| x * scale).collect()
            })
            .collect())
    }

    fn apply(&self, proto: &Tensor<f64>, signal: &[f64]) -> Tensor<f64> {
        let mut image = proto.clone();
        let d_in = image.cols();
        for (x, &u) in image.data_mut()[self.first * d_in..].iter_mut().zip(signal) {
            *x += u;
        }
        image
    }
}

/// Jointly fits one prototype image per cluster so the frozen image
/// embeddings classify every caption into its own cluster by largest dot
/// product. Each step scores a cluster by the mean embedding of two of its
/// signal-carrying images, takes a normalized gradient step on a softmax
/// cross-entropy on the leading patches, and keeps them at unit RMS. The
/// trailing patches stay on the shared backdrop. Signals are re-derived
/// every few steps as the prototypes move.
fn fit_prototypes(
    model: &ModelBundle<f64>,
    captions: &[Vec<Vec<f64>>],
    plan: &SignalPlan<'_>,
    steps: usize,
    rng: &mut Rng,
) -> Result<Vec<Tensor<f64>>> {
    const SCALE: f64 = 30.0;
    const STEP: f64 = 0.1;
    const REFRESH: usize = 25;
    const DRAWS: usize = 2;
    let dims = &model.dims;
    let count = captions.iter().map(Vec::len).sum::<usize>() as f64;
    let backdrop = randn::<f64>(dims.patches - plan.first, dims.d_in, 1.0, rng);
    let mut protos: Vec<Tensor<f64>> = captions
        .iter()
        .map(|_| randn(plan.first, dims.d_in, 1.0, rng).concat_rows(&backdrop))
        .collect::<Result<_>>()?;
    let mut signals = Vec::new();
    for step in 0..steps {
        if step % REFRESH == 0 {
            signals = protos
                .iter()
                .map(|p| plan.signals(model, p))
                .collect::<Result<Vec<_>>>()?;
        }
        let mut traces = Vec::with_capacity(protos.len());
        let mut means = Vec::with_capacity(protos.len());
        for (proto, sig) in protos.iter().zip(&signals) {
            let mut mean = vec![0.0; dims.d_e];
            let mut group = Vec::with_capacity(DRAWS);
            for d in 0..DRAWS {
                let j = (step * DRAWS + d) % sig.len();
                let trace = image_forward(model, &plan.apply(proto, &sig[j]), None)?;
                mean.iter_mut()
                    .zip(&trace.v_joint)
                    .for_each(|(m, &v)| *m += v / DRAWS as f64);
                group.push(trace);
            }
            traces.push(group);
            means.push(mean);
        }
        let mut ascent = vec![vec![0.0; dims.d_e]; protos.len()];
        for (k, texts) in captions.iter().enumerate() {
            for t in texts {
                let logits: Vec<f64> = means.iter().map(|m| SCALE * dot(m, t)).collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
                for (c, g) in ascent.iter_mut().enumerate() {
                    let p = (logits[c] - max).exp() / z;
                    let coef = if c == k { 1.0 - p } else { -p };
                    g.iter_mut()
                        .zip(t)
                        .for_each(|(a, &x)| *a += coef * x / (count * DRAWS as f64));
                }
            }
        }
        for ((proto, group), gv) in protos.iter_mut().zip(&traces).zip(&ascent) {
            let mut g = Tensor::zeros(dims.patches, dims.d_in);
            for trace in group {
                let gp = image_backward(model, trace, None, Some(gv), true)?
                    .patches
                    .expect("requested");
                g.add_assign(&gp)?;
            }
            let g = g.slice_rows(0, plan.first);
            let rms = (g.sum_squares() / g.len() as f64).sqrt();
            if rms < 1e-12 {
                continue;
            }
            let mut own = proto.slice_rows(0, plan.first);
            own.add_assign(&g.scale(STEP / rms))?;
            let norm = (own.sum_squares() / own.len() as f64).sqrt();
            *proto = own.scale(1.0 / norm).concat_rows(&backdrop)?;
        }
    }
    Ok(protos)
}

/// Orthonormal basis of the rows of `∂v_joint/∂(signal patch entries)`.
fn sensitive_basis(model: &ModelBundle<f64>, proto: &Tensor<f64>, first: usize) -> Result<Vec<Vec<f64>>> {
    let dims = &model.dims;
    let trace = image_forward(model, proto, None)?;
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for r in 0..dims.d_e {
        let mut e = vec![0.0; dims.d_e];
        e[r] = 1.0;
        let g = image_backward(model, &trace, None, Some(&e), true)?
            .patches
            .expect("requested");
        let mut row = g.slice_rows(first, dims.patches).into_data();
        for _ in 0..2 {
            for q in &basis {
                let c = dot(&row, q);
                row.iter_mut().zip(q).for_each(|(x, &qi)| *x -= c * qi);
            }
        }
        let n = l2_norm(&row);
        if n > 1e-10 {
            basis.push(row.into_iter().map(|x| x / n).collect());
        }
    }
    Ok(basis)
}

/// Generates the planted dataset. The frozen towers it is fitted to come
/// from `init_frozen_model(seed, dims)`, so train with the same seed.
pub fn gen_synthetic_dataset(seed: u64, spec: &SynthSpec, dims: &DimsConfig) -> Result<SyntheticData> {
    dims.validate()?;
    spec.validate(dims)?;
    let model = init_frozen_model::<f32>(seed, *dims, Variant::C, MapperConfig::default())?.cast::<f64>();
    let mut rng = Rng::new(seed ^ STREAM);
    let per_cluster = spec.per_cluster();
    let cluster_words: Vec<String> = (0..spec.clusters).map(|k| format!("c{k}")).collect();
    let signal_words: Vec<String> = (0..per_cluster).map(|j| format!("s{j}")).collect();
    let tokenizer = Tokenizer::new(cluster_words.iter().chain(&signal_words))?;

    let first = dims.patches - spec.signal_patches;
    let width = spec.signal_patches * dims.d_in;
    let bases: Vec<Vec<f64>> = (0..per_cluster)
        .map(|_| randn::<f64>(1, width, 1.0, &mut rng).into_data())
        .collect();

    let mut captions = Vec::with_capacity(spec.clusters);
    for word in &cluster_words {
        let mut texts = Vec::with_capacity(per_cluster);
        for s in &signal_words {
            let t = encode_text(&model, &tokenizer.encode(&caption(spec, word, s), dims.text_len)?)?;
            texts.push(t.t_joint);
        }
        captions.push(texts);
    }
    let plan = SignalPlan {
        first,
        strength: spec.signal_strength,
        bases: &bases,
    };
    let prototypes = fit_prototypes(&model, &captions, &plan, spec.prototype_steps, &mut rng)?;
    let signals = prototypes
        .iter()
        .map(|p| plan.signals(&model, p))
        .collect::<Result<Vec<_>>>()?;

    let mut drafts = Vec::with_capacity(spec.n);
    for r in 0..spec.n {
        let (k, j) = (r % spec.clusters, r / spec.clusters);
        let mut patches = plan.apply(&prototypes[k], &signals[k][j]);
        patches.add_assign(&randn(dims.patches, dims.d_in, spec.noise, &mut rng))?;
        let caption = caption(spec, &cluster_words[k], &signal_words[j]);
        let categories: BTreeSet<String> = [cluster_words[k].clone()].into();
        let occluded = if rng.next_f64() < spec.occlusion_rate {
            categories.clone()
        } else {
            BTreeSet::new()
        };
        drafts.push((patches.cast::<f32>(), caption, categories, occluded));
    }
    rng.shuffle(&mut drafts);

    let digits = (spec.n - 1).to_string().len();
    let mut records = Vec::with_capacity(spec.n);
    let mut queries = Vec::with_capacity(spec.n);
    for (i, (patches, caption, categories, occluded_categories)) in drafts.into_iter().enumerate() {
        let id = format!("img{i:0digits$}");
        let tokens = tokenizer.encode(&caption, dims.text_len)?;
        queries.push(BenchmarkQuery {
            id: format!("q{i:0digits$}"),
            text: caption.clone(),
            text_tokens: tokens.clone(),
            positives: vec![id.clone()],
            excluded: Vec::new(),
        });
        records.push(PairRecord {
            id,
            patches,
            tokens,
            caption,
            categories,
            occluded_categories,
        });
    }
    let dataset = PairDataset::new(records)?;
    let benchmark = Benchmark {
        queries,
        gallery_ids: dataset.ids(),
        dropped_queries: 0,
    };
    Ok(SyntheticData {
        dataset,
        benchmark,
        tokenizer,
    })
}
