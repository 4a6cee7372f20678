use std::path::Path;

use elip_core::curation::{gen_synthetic_dataset, Benchmark, SynthSpec};
use elip_core::encoders::{init_frozen_model, DimsConfig, Variant};
use elip_core::io::*;
use elip_core::mapper::MapperConfig;
use elip_core::numkit::Tensor;
use elip_core::Error;

fn small_spec() -> SynthSpec {
    SynthSpec {
        n: 12,
        clusters: 3,
        prototype_steps: 5,
        ..SynthSpec::default()
    }
}

fn format_offset(e: Error) -> u64 {
    match e {
        Error::Format { offset, .. } => offset,
        other => panic!("expected a format error, got {other}"),
    }
}

#[test]
fn blob_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.bin");
    let t = Tensor::new(2, 3, vec![1.5f32, -0.0, f32::MIN_POSITIVE, 3.25e-7, f32::MAX, -2.0]).unwrap();
    write_tensor(&path, &t).unwrap();
    let back: Tensor<f32> = read_tensor(&path).unwrap();
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(back.shape(), (2, 3));
    assert_eq!(bits(&back), bits(&t));

    let d = Tensor::new(1, 2, vec![std::f64::consts::PI, -1e-300]).unwrap();
    write_tensor(&path, &d).unwrap();
    assert_eq!(read_tensor::<f64>(&path).unwrap(), d);
}

#[test]
fn rank_two_header_is_24_bytes() {
    assert_eq!(blob_header_len(2), 24);
    let t = Tensor::new(2, 3, vec![0f32; 6]).unwrap();
    let bytes = encode_tensor(&t);
    assert_eq!(bytes.len(), 24 + 6 * 4);
    assert_eq!(&bytes[..8], b"ELIP\x01\x01\x02\x00");
    assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 2);
    assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 3);
}

#[test]
fn lower_ranks_decode_as_rows() {
    let p = Path::new("x.bin");
    let mut one = b"ELIP\x01\x02\x01\x00".to_vec();
    one.extend_from_slice(&3u64.to_le_bytes());
    for v in [1.0f64, 2.0, 3.0] {
        one.extend_from_slice(&v.to_le_bytes());
    }
    assert_eq!(decode_tensor::<f64>(&one, p).unwrap().shape(), (1, 3));
    let mut zero = b"ELIP\x01\x02\x00\x00".to_vec();
    zero.extend_from_slice(&7.0f64.to_le_bytes());
    assert_eq!(decode_tensor::<f64>(&zero, p).unwrap().data(), &[7.0]);
}

#[test]
fn corrupt_blobs_name_the_offset() {
    let p = Path::new("bad.bin");
    let good = encode_tensor(&Tensor::new(2, 2, vec![1f32; 4]).unwrap());

    let mut magic = good.clone();
    magic[0] = b'X';
    let e = decode_tensor::<f32>(&magic, p).unwrap_err();
    assert_eq!(e.exit_code(), 2);
    assert!(e.to_string().contains("bad.bin"));
    assert_eq!(format_offset(e), 0);

    let mut version = good.clone();
    version[4] = 9;
    assert_eq!(format_offset(decode_tensor::<f32>(&version, p).unwrap_err()), 4);

    assert_eq!(format_offset(decode_tensor::<f64>(&good, p).unwrap_err()), 5);

    let mut rank = good.clone();
    rank[6] = 3;
    assert_eq!(format_offset(decode_tensor::<f32>(&rank, p).unwrap_err()), 6);

    assert_eq!(format_offset(decode_tensor::<f32>(&good[..5], p).unwrap_err()), 5);
    assert_eq!(format_offset(decode_tensor::<f32>(&good[..20], p).unwrap_err()), 20);
    assert_eq!(
        format_offset(decode_tensor::<f32>(&good[..good.len() - 1], p).unwrap_err()),
        39
    );

    let mut long = good.clone();
    long.push(0);
    assert_eq!(format_offset(decode_tensor::<f32>(&long, p).unwrap_err()), 40);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for variant in [Variant::C, Variant::B] {
        let mut model = init_frozen_model::<f32>(7, DimsConfig::default(), variant, MapperConfig::default()).unwrap();
        model.mapper.get_mut("l3.weight").unwrap().data_mut()[0] = 0.125;
        let ck = dir.path().join(variant.to_string());
        save_checkpoint(&ck, &model).unwrap();
        let back = load_checkpoint(&ck).unwrap();
        assert_eq!(back, model);
        let index: CheckpointIndex = read_json(&ck.join(INDEX_FILE)).unwrap();
        let entry = &index.tensors["mapper.l1.weight"];
        assert!(entry.trainable);
        assert_eq!(entry.dtype, "f32");
        assert!(index.tensors.contains_key("mapper.l3.bias"));
        assert!(!index.tensors["token_embed.weight"].trainable);
        assert_eq!(index.tensors["itm_head.queries"].trainable, variant == Variant::B);
    }
}

#[test]
fn checkpoint_rejects_missing_and_misshapen_tensors() {
    let dir = tempfile::tempdir().unwrap();
    let model = init_frozen_model::<f32>(3, DimsConfig::default(), Variant::C, MapperConfig::default()).unwrap();
    save_checkpoint(dir.path(), &model).unwrap();

    let mut index: CheckpointIndex = read_json(&dir.path().join(INDEX_FILE)).unwrap();
    let entry = index.tensors.remove("mapper.l2.bias").unwrap();
    write_json(&dir.path().join(INDEX_FILE), &index).unwrap();
    let e = load_checkpoint(dir.path()).unwrap_err();
    assert!(e.to_string().contains("mapper.l2.bias"), "{e}");

    index.tensors.insert("mapper.l2.bias".into(), entry);
    write_json(&dir.path().join(INDEX_FILE), &index).unwrap();
    write_tensor(&dir.path().join("mapper.l2.bias.bin"), &Tensor::<f32>::zeros(1, 3)).unwrap();
    let e = load_checkpoint(dir.path()).unwrap_err();
    assert_eq!(e.exit_code(), 2);
}

#[test]
fn synthetic_manifest_round_trips_field_for_field() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_synthetic_dataset(4, &small_spec(), &DimsConfig::default()).unwrap();
    let path = dir.path().join("dataset.jsonl");
    write_manifest(&path, &data.dataset).unwrap();
    assert!(manifest_blob_path(&path).exists());
    let back = read_manifest(&path).unwrap();
    assert_eq!(back, data.dataset);

    let bench_path = dir.path().join("benchmark.json");
    write_json(&bench_path, &data.benchmark).unwrap();
    assert_eq!(read_benchmark(&bench_path).unwrap(), data.benchmark);
}

#[test]
fn two_line_manifest_parses() {
    let dir = tempfile::tempdir().unwrap();
    write_tensor(
        &dir.path().join("p.bin"),
        &Tensor::new(4, 2, (0..8).map(|v| v as f32).collect()).unwrap(),
    )
    .unwrap();
    let lines = concat!(
        r#"{"id":"a","patches":{"path":"p.bin","row":0,"rows":2},"tokens":[1,2],"caption":"x y","categories":["dog"],"occluded_categories":[]}"#,
        "\n",
        r#"{"id":"b","patches":{"path":"p.bin","row":2,"rows":2},"tokens":[2,0],"caption":"y","categories":["cat"],"occluded_categories":["cat"]}"#,
        "\n\n"
    );
    let path = dir.path().join("m.jsonl");
    std::fs::write(&path, lines).unwrap();
    let ds = read_manifest(&path).unwrap();
    assert_eq!(ds.len(), 2);
    assert_eq!(ds.get(1).patches.data(), &[4.0, 5.0, 6.0, 7.0]);
    assert!(ds.get(1).occluded_categories.contains("cat"));
}

#[test]
fn manifest_errors_carry_line_or_id() {
    let dir = tempfile::tempdir().unwrap();
    write_tensor(&dir.path().join("p.bin"), &Tensor::new(2, 2, vec![0f32; 4]).unwrap()).unwrap();
    let line = |id: &str, row: usize| {
        format!(r#"{{"id":"{id}","patches":{{"path":"p.bin","row":{row},"rows":1}},"tokens":[1],"caption":"c"}}"#)
    };
    let path = dir.path().join("m.jsonl");

    std::fs::write(&path, format!("{}\n{}\n", line("a", 0), line("a", 1))).unwrap();
    let e = read_manifest(&path).unwrap_err();
    assert_eq!(e.exit_code(), 2);
    assert!(e.to_string().contains("`a`"), "{e}");

    std::fs::write(&path, format!("{}\n{{not json\n", line("a", 0))).unwrap();
    let e = read_manifest(&path).unwrap_err();
    assert!(e.to_string().contains("line 2"), "{e}");

    std::fs::write(&path, format!("{}\n", line("a", 5))).unwrap();
    let e = read_manifest(&path).unwrap_err();
    assert!(e.to_string().contains("line 1"), "{e}");
}

#[test]
fn benchmark_without_ids_is_normalized() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("b.json");
    std::fs::write(
        &path,
        r#"{"queries":[{"text_tokens":[1],"positives":["img0"]},{"text_tokens":[2],"positives":["img1"]}]}"#,
    )
    .unwrap();
    let b: Benchmark = read_benchmark(&path).unwrap();
    assert_eq!(b.queries[1].id, "q1");

    let missing = dir.path().join("nope.json");
    let e = read_benchmark(&missing).unwrap_err();
    assert_eq!(e.exit_code(), 2);
    assert!(e.to_string().contains("nope.json"));
}

#[test]
fn trace_csv_schema() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.csv");
    write_trace_csv(&path, &[2.5, 0.125]).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap(), "step,loss\n1,2.5\n2,0.125\n");
}
