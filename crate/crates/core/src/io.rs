//! On-disk formats: tensor blobs, checkpoint directories, JSON-Lines dataset
//! manifests, JSON documents and CSV reports. Every write lands in a
//! temporary file that is renamed into place.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::curation::{Benchmark, PairDataset, PairRecord};
use crate::encoders::{init_frozen_model, DimsConfig, ModelBundle, Variant};
use crate::error::{Error, Result};
use crate::mapper::MapperConfig;
use crate::numkit::{Scalar, Tensor};
use crate::retrieval::{AttentionMap, CurveData, EmbeddingStore, MetricReport};

pub const MAGIC: [u8; 4] = *b"ELIP";
pub const BLOB_VERSION: u8 = 1;
pub const INDEX_FILE: &str = "index.json";

/// Bytes before the payload of a blob with `rank` dimensions.
pub fn blob_header_len(rank: usize) -> usize {
    8 + 8 * rank
}

/// Rank-2 blob bytes for `t`.
pub fn encode_tensor<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(blob_header_len(2) + t.len() * T::DTYPE.size());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&[BLOB_VERSION, T::DTYPE as u8, 2, 0]);
    out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

/// Parses blob bytes. Rank 0 reads as `1 × 1`, rank 1 as a row vector.
/// `path` only labels errors.
pub fn decode_tensor<T: Scalar>(bytes: &[u8], path: &Path) -> Result<Tensor<T>> {
    let fail = |offset: usize, msg: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg,
    };
    if bytes.len() < 8 {
        return Err(fail(bytes.len(), "truncated header".into()));
    }
    if bytes[..4] != MAGIC {
        return Err(fail(0, format!("bad magic {:?}", &bytes[..4])));
    }
    if bytes[4] != BLOB_VERSION {
        return Err(fail(4, format!("unsupported version {}", bytes[4])));
    }
    if bytes[5] != T::DTYPE as u8 {
        return Err(fail(
            5,
            format!(
                "dtype code {}, expected {} ({})",
                bytes[5],
                T::DTYPE as u8,
                T::DTYPE.name()
            ),
        ));
    }
    let rank = bytes[6] as usize;
    if rank > 2 {
        return Err(fail(6, format!("rank {rank} exceeds 2")));
    }
    if bytes[7] != 0 {
        return Err(fail(7, "non-zero pad byte".into()));
    }
    let header = blob_header_len(rank);
    if bytes.len() < header {
        return Err(fail(bytes.len(), "truncated dimensions".into()));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| {
            let at = 8 + 8 * i;
            u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes")) as usize
        })
        .collect();
    let (rows, cols) = match dims[..] {
        [] => (1, 1),
        [c] => (1, c),
        [r, c] => (r, c),
        _ => unreachable!(),
    };
    let count = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(T::DTYPE.size()))
        .ok_or_else(|| fail(8, format!("dimensions {rows} × {cols} overflow")))?;
    let end = header + count;
    if bytes.len() < end {
        return Err(fail(bytes.len(), format!("truncated payload, expected {end} bytes")));
    }
    if bytes.len() > end {
        return Err(fail(end, format!("{} trailing bytes", bytes.len() - end)));
    }
    let data = bytes[header..].chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
    Tensor::new(rows, cols, data)
}

pub fn write_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    write_atomic(path, &encode_tensor(t))
}

pub fn read_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    decode_tensor(&read_bytes(path)?, path)
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes `bytes` to a temporary sibling of `path`, then renames it over
/// `path`. Parent directories are created.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn write_json<V: Serialize + ?Sized>(path: &Path, value: &V) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<V: DeserializeOwned>(path: &Path) -> Result<V> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a benchmark document and fills in missing query ids.
pub fn read_benchmark(path: &Path) -> Result<Benchmark> {
    let mut bench: Benchmark = read_json(path)?;
    bench
        .normalize()
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    Ok(bench)
}

/// Gallery description; the embedding matrix lives in a blob beside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GalleryIndex {
    pub seed: u64,
    pub ids: Vec<String>,
    /// Blob path, relative to the index.
    pub matrix: String,
}

/// Writes `{stem}.json` and `{stem}.bin` for the store.
pub fn save_gallery(path: &Path, store: &EmbeddingStore<f32>) -> Result<()> {
    let blob = path.with_extension("bin");
    let matrix = blob
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::config(format!("gallery path {} has no file name", path.display())))?
        .to_string();
    write_tensor(&blob, store.matrix())?;
    write_json(
        path,
        &GalleryIndex {
            seed: store.seed,
            ids: store.ids().to_vec(),
            matrix,
        },
    )
}

pub fn load_gallery(path: &Path) -> Result<EmbeddingStore<f32>> {
    let index: GalleryIndex = read_json(path)?;
    let dir = path.parent().unwrap_or(Path::new(""));
    let matrix = read_tensor(&dir.join(&index.matrix))?;
    EmbeddingStore::new(index.ids, matrix, index.seed).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

/// One tensor of a checkpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub file: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

/// Contents of a checkpoint's `index.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointIndex {
    pub variant: Variant,
    pub seed: u64,
    pub dims: DimsConfig,
    pub mapper: MapperConfig,
    pub tensors: BTreeMap<String, TensorEntry>,
}

/// Writes one blob per tensor, named `{group}.{key}.bin`, then the index.
pub fn save_checkpoint(dir: &Path, model: &ModelBundle<f32>) -> Result<()> {
    let mut tensors = BTreeMap::new();
    for layer in model.layers() {
        for (key, t) in layer.tensors() {
            let name = format!("{}.{key}", layer.name);
            let file = format!("{name}.bin");
            write_tensor(&dir.join(&file), t)?;
            tensors.insert(
                name,
                TensorEntry {
                    file,
                    dtype: f32::DTYPE.name().to_string(),
                    shape: vec![t.rows(), t.cols()],
                    trainable: layer.trainable,
                },
            );
        }
    }
    let index = CheckpointIndex {
        variant: model.variant,
        seed: model.seed,
        dims: model.dims,
        mapper: model.mapper_cfg,
        tensors,
    };
    write_json(&dir.join(INDEX_FILE), &index)
}

/// Rebuilds a model from a checkpoint directory. Every tensor the
/// architecture expects must be present with a matching shape, and no
/// others.
pub fn load_checkpoint(dir: &Path) -> Result<ModelBundle<f32>> {
    let index_path = dir.join(INDEX_FILE);
    let index: CheckpointIndex = read_json(&index_path)?;
    let bad = |msg: String| Error::Format {
        path: index_path.clone(),
        offset: 0,
        msg,
    };
    let mut model = init_frozen_model::<f32>(index.seed, index.dims, index.variant, index.mapper)
        .map_err(|e| bad(e.to_string()))?;
    let mut used = 0;
    for layer in model.layers_mut() {
        let keys: Vec<String> = layer.tensors().keys().cloned().collect();
        let mut trainable = None;
        for key in keys {
            let name = format!("{}.{key}", layer.name);
            let entry = index
                .tensors
                .get(&name)
                .ok_or_else(|| bad(format!("missing tensor `{name}`")))?;
            if entry.dtype != f32::DTYPE.name() {
                return Err(bad(format!("tensor `{name}` has dtype {}", entry.dtype)));
            }
            let t: Tensor<f32> = read_tensor(&dir.join(&entry.file))?;
            let slot = layer.get_mut(&key)?;
            if t.shape() != slot.shape() || entry.shape != [t.rows(), t.cols()] {
                return Err(bad(format!(
                    "tensor `{name}` is {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
            if *trainable.get_or_insert(entry.trainable) != entry.trainable {
                return Err(bad(format!("group `{}` mixes trainable flags", layer.name)));
            }
            used += 1;
        }
        if let Some(flag) = trainable {
            layer.trainable = flag;
        }
    }
    if used != index.tensors.len() {
        return Err(bad(format!(
            "{} tensors listed, architecture has {used}",
            index.tensors.len()
        )));
    }
    Ok(model)
}

/// Location of a record's patches inside a shared blob.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchRef {
    /// Blob path, relative to the manifest's directory.
    pub path: String,
    pub row: usize,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLine {
    id: String,
    patches: PatchRef,
    tokens: Vec<u32>,
    caption: String,
    #[serde(default)]
    categories: Vec<String>,
    #[serde(default)]
    occluded_categories: Vec<String>,
}

/// Blob holding the patches of the manifest at `path`.
pub fn manifest_blob_path(path: &Path) -> PathBuf {
    path.with_extension("bin")
}

/// Writes `ds` as JSON Lines at `path` with every record's patches stacked
/// into one blob beside it.
pub fn write_manifest(path: &Path, ds: &PairDataset) -> Result<()> {
    let blob_path = manifest_blob_path(path);
    let blob_name = blob_path
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::config(format!("manifest path {} has no file name", path.display())))?
        .to_string();
    let d_in = ds.records().first().map_or(0, |r| r.patches.cols());
    let mut stacked = Vec::new();
    let mut lines = String::new();
    let mut row = 0;
    for r in ds.records() {
        if r.patches.cols() != d_in {
            return Err(Error::data(format!(
                "record `{}` has {} patch features, others have {d_in}",
                r.id,
                r.patches.cols()
            )));
        }
        stacked.extend_from_slice(r.patches.data());
        let line = ManifestLine {
            id: r.id.clone(),
            patches: PatchRef {
                path: blob_name.clone(),
                row,
                rows: r.patches.rows(),
            },
            tokens: r.tokens.clone(),
            caption: r.caption.clone(),
            categories: r.categories.iter().cloned().collect(),
            occluded_categories: r.occluded_categories.iter().cloned().collect(),
        };
        row += r.patches.rows();
        lines.push_str(&serde_json::to_string(&line).expect("plain data"));
        lines.push('\n');
    }
    write_tensor(&blob_path, &Tensor::new(row, d_in, stacked)?)?;
    write_atomic(path, lines.as_bytes())
}

/// Reads a JSON-Lines manifest. Blank lines are skipped.
pub fn read_manifest(path: &Path) -> Result<PairDataset> {
    let text =
        String::from_utf8(read_bytes(path)?).map_err(|e| Error::data(format!("{}: not UTF-8: {e}", path.display())))?;
    let dir = path.parent().unwrap_or(Path::new(""));
    let mut blobs: HashMap<String, Tensor<f32>> = HashMap::new();
    let mut records = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let at = |msg: String| Error::data(format!("{} line {}: {msg}", path.display(), i + 1));
        let line: ManifestLine = serde_json::from_str(raw).map_err(|e| at(e.to_string()))?;
        if !blobs.contains_key(&line.patches.path) {
            let blob = read_tensor(&dir.join(&line.patches.path))?;
            blobs.insert(line.patches.path.clone(), blob);
        }
        let blob = &blobs[&line.patches.path];
        let PatchRef { row, rows, .. } = line.patches;
        if row.checked_add(rows).is_none_or(|end| end > blob.rows()) {
            return Err(at(format!(
                "patch rows {row}..{} outside blob of {} rows",
                row.saturating_add(rows),
                blob.rows()
            )));
        }
        records.push(PairRecord {
            id: line.id,
            patches: blob.slice_rows(row, row + rows),
            tokens: line.tokens,
            caption: line.caption,
            categories: line.categories.into_iter().collect(),
            occluded_categories: line.occluded_categories.into_iter().collect(),
        });
    }
    PairDataset::new(records).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

fn write_csv<const N: usize>(
    path: &Path,
    header: [&str; N],
    rows: impl IntoIterator<Item = [String; N]>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| Error::data(format!("{}: {e}", path.display()));
    w.write_record(header).map_err(fail)?;
    for r in rows {
        w.write_record(&r).map_err(fail)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    write_atomic(path, &bytes)
}

/// `query_id,metric,value`.
pub fn write_metrics_csv(path: &Path, report: &MetricReport) -> Result<()> {
    write_csv(
        path,
        ["query_id", "metric", "value"],
        report.rows().into_iter().map(|(q, m, v)| [q, m, v.to_string()]),
    )
}

/// `kind,x,y`.
pub fn write_curve_csv(path: &Path, curve: &CurveData) -> Result<()> {
    let kind = curve.kind.name();
    write_csv(
        path,
        ["kind", "x", "y"],
        curve
            .points
            .iter()
            .map(|(x, y)| [kind.to_string(), x.to_string(), y.to_string()]),
    )
}

/// `step,loss` with steps counted from 1.
pub fn write_trace_csv(path: &Path, trace: &[f64]) -> Result<()> {
    write_csv(
        path,
        ["step", "loss"],
        trace
            .iter()
            .enumerate()
            .map(|(i, l)| [(i + 1).to_string(), l.to_string()]),
    )
}

/// `row,col,weight` over the map's patch grid.
pub fn write_attn_csv(path: &Path, map: &AttentionMap) -> Result<()> {
    let g = &map.grid;
    write_csv(
        path,
        ["row", "col", "weight"],
        (0..g.rows()).flat_map(|r| (0..g.cols()).map(move |c| [r.to_string(), c.to_string(), g.get(r, c).to_string()])),
    )
}
