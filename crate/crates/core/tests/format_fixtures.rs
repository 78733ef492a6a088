//! On-disk interchange files built and read independently of the library codec.

use std::fs;

use serde_json::{json, Value};
use specmerge::tensorstore::{load_checkpoint, save_checkpoint, DType, Role, Tensor, TensorMap};
use specmerge::ErrorKind;

/// Length prefix, JSON header, then the data block, written by hand.
fn encode(header: &Value, body: &[u8]) -> Vec<u8> {
    let text = serde_json::to_vec(header).unwrap();
    let mut out = (text.len() as u64).to_le_bytes().to_vec();
    out.extend_from_slice(&text);
    out.extend_from_slice(body);
    out
}

fn fixture() -> Vec<u8> {
    let mut body = Vec::new();
    for v in [1.0f32, -2.5, 3.25, 0.0, 5.0, -6.0] {
        body.extend_from_slice(&v.to_le_bytes());
    }
    for v in [0.1f64, -0.2] {
        body.extend_from_slice(&v.to_le_bytes());
    }
    let header = json!({
        "__metadata__": {"model_id": "tiny", "role": "finetuned", "format": "pt"},
        "encoder.weight": {"dtype": "F32", "shape": [2, 3], "data_offsets": [0, 24]},
        "encoder.bias": {"dtype": "F64", "shape": [2], "data_offsets": [24, 40]},
    });
    encode(&header, &body)
}

#[test]
fn hand_built_file_loads() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tiny.safetensors");
    fs::write(&path, fixture()).unwrap();

    let map = load_checkpoint(&path).unwrap();
    assert_eq!(map.model_id(), "tiny");
    assert_eq!(map.role(), Role::Finetuned);
    assert_eq!(map.metadata().get("format").map(String::as_str), Some("pt"));
    let w = map.get("encoder.weight").unwrap();
    assert_eq!(w.dtype(), DType::F32);
    assert_eq!(w.shape(), &[2, 3]);
    assert_eq!(
        w.values().collect::<Vec<_>>(),
        vec![1.0, -2.5, 3.25, 0.0, 5.0, -6.0]
    );
    assert_eq!(
        map.get("encoder.bias")
            .unwrap()
            .values()
            .collect::<Vec<_>>(),
        vec![0.1, -0.2]
    );
}

#[test]
fn saved_file_parses_with_plain_json_reader() {
    let mut map = TensorMap::new("model-a", Role::Delta);
    map.insert(
        "b",
        Tensor::from_vec(DType::F64, &[2], vec![1.5, -0.25]).unwrap(),
    );
    map.insert(
        "a",
        Tensor::from_vec(DType::F32, &[1, 3], vec![1.0, 2.0, 3.0]).unwrap(),
    );
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("out.safetensors");
    save_checkpoint(&map, &path).unwrap();

    let bytes = fs::read(&path).unwrap();
    let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let header: Value = serde_json::from_slice(&bytes[8..8 + n]).unwrap();
    let body = &bytes[8 + n..];
    assert_eq!(header["__metadata__"]["model_id"], "model-a");
    assert_eq!(header["__metadata__"]["role"], "delta");

    let a = &header["a"];
    assert_eq!(a["dtype"], "F32");
    assert_eq!(a["shape"], json!([1, 3]));
    let [start, end] = [
        a["data_offsets"][0].as_u64().unwrap() as usize,
        a["data_offsets"][1].as_u64().unwrap() as usize,
    ];
    let floats: Vec<f32> = body[start..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    assert_eq!(floats, vec![1.0, 2.0, 3.0]);

    let b = &header["b"];
    let start = b["data_offsets"][0].as_u64().unwrap() as usize;
    assert_eq!(
        f64::from_le_bytes(body[start..start + 8].try_into().unwrap()),
        1.5
    );
    assert_eq!(
        body.len() as u64,
        b["data_offsets"][1].as_u64().unwrap().max(end as u64)
    );

    assert_eq!(load_checkpoint(&path).unwrap(), map);
}

#[test]
fn damaged_files_are_rejected_by_class() {
    let dir = tempfile::tempdir().unwrap();
    let good = fixture();
    let cases: Vec<(&str, Vec<u8>, ErrorKind)> = vec![
        ("truncated", good[..good.len() - 5].to_vec(), ErrorKind::Io),
        (
            "garbled",
            {
                let mut b = good.clone();
                b[12] = b'#';
                b
            },
            ErrorKind::Format,
        ),
        (
            "huge-length",
            {
                let mut b = good.clone();
                b[..8].copy_from_slice(&u64::MAX.to_le_bytes());
                b
            },
            ErrorKind::Format,
        ),
        ("short", vec![1, 2, 3], ErrorKind::Format),
        (
            "nan",
            {
                let body: Vec<u8> = f64::NAN.to_le_bytes().to_vec();
                encode(
                    &json!({"x": {"dtype": "F64", "shape": [1], "data_offsets": [0, 8]}}),
                    &body,
                )
            },
            ErrorKind::Validation,
        ),
        (
            "bf16",
            encode(
                &json!({"x": {"dtype": "BF16", "shape": [1], "data_offsets": [0, 2]}}),
                &[0, 0],
            ),
            ErrorKind::Format,
        ),
    ];
    for (name, bytes, kind) in cases {
        let path = dir.path().join(format!("{name}.safetensors"));
        fs::write(&path, bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert_eq!(err.kind(), kind, "{name}: {err}");
    }
    let missing = load_checkpoint(dir.path().join("absent.safetensors")).unwrap_err();
    assert_eq!(missing.kind(), ErrorKind::Io);
}
