//! The on-disk gradient dump as seen by an external producer.

use std::fs;

use layerscope::gradstore::{read_gradient_dump, write_gradient_dump};
use layerscope::toytask::{generate_dataset, per_sample_gradients, DatasetSpec, GradientRequest, ModelConfig, ToyModel};
use layerscope::{GroupId, Split};

fn fnv(bytes: &[u8]) -> u64 {
    let mut h: u64 = 14695981039346656037;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(1099511628211);
    }
    h
}

#[test]
fn reads_a_hand_written_dump() {
    let dir = tempfile::tempdir().unwrap();
    let rows: [[f32; 3]; 2] = [[1.0, -2.5, 0.125], [3.0, 0.0, -1.0]];
    let bytes: Vec<u8> = rows.iter().flatten().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(dir.path().join("head.f32"), &bytes).unwrap();
    let manifest = format!(
        r#"{{
  "version": 1,
  "split": "validation",
  "checkpoint_id": "external-7",
  "dtype": "float32",
  "endianness": "little",
  "samples": [11, 4],
  "groups": [
    {{"name": "CL", "dim": 3, "file": "head.f32", "byte_length": 24, "checksum": "{:016x}"}}
  ],
  "note": "exported elsewhere"
}}"#,
        fnv(&bytes)
    );
    fs::write(dir.path().join("manifest.json"), manifest).unwrap();
    let store = read_gradient_dump(dir.path()).unwrap();
    assert_eq!(store.split, Split::Validation);
    assert_eq!(store.checkpoint_id, "external-7");
    assert_eq!(store.samples(), [11, 4]);
    let b = store.block(&GroupId::cl()).unwrap();
    assert_eq!(b.row(0), rows[0]);
    assert_eq!(b.row(1), rows[1]);
}

#[test]
fn written_dumps_use_the_documented_layout() {
    let dir = tempfile::tempdir().unwrap();
    let spec = DatasetSpec {
        vocab_size: 10,
        ..DatasetSpec::default()
    };
    let ds = generate_dataset(&spec, 1).unwrap();
    let model = ToyModel::init(10, 2, &ModelConfig::default(), 1).unwrap();
    let groups = model.group_names();
    let tokens = ds.present_tokens();
    let req = GradientRequest {
        split: Split::Train,
        checkpoint_id: "epoch-0",
        groups: &groups,
        we_tokens: &tokens,
    };
    let store = per_sample_gradients(&model, &ds.train[..5], &req).unwrap();
    write_gradient_dump(&store, dir.path()).unwrap();

    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    for key in ["version", "split", "checkpoint_id", "dtype", "endianness", "samples", "groups"] {
        assert!(m.get(key).is_some(), "manifest lacks {key}");
    }
    assert_eq!(m["dtype"], "float32");
    assert_eq!(m["endianness"], "little");
    for g in m["groups"].as_array().unwrap() {
        let file = dir.path().join(g["file"].as_str().unwrap());
        let bytes = fs::read(file).unwrap();
        assert_eq!(bytes.len() as u64, g["byte_length"].as_u64().unwrap());
        assert_eq!(bytes.len(), 5 * g["dim"].as_u64().unwrap() as usize * 4);
        assert_eq!(g["checksum"].as_str().unwrap(), format!("{:016x}", fnv(&bytes)));
        // row-major little-endian float32
        let name = GroupId::new(g["name"].as_str().unwrap()).unwrap();
        let block = store.block(&name).unwrap();
        let first = f32::from_le_bytes(bytes[..4].try_into().unwrap());
        assert_eq!(first.to_bits(), block.row(0)[0].to_bits());
        let dim = block.dim();
        let second_row = f32::from_le_bytes(bytes[dim * 4..dim * 4 + 4].try_into().unwrap());
        assert_eq!(second_row.to_bits(), block.row(1)[0].to_bits());
    }
    let we = m["groups"].as_array().unwrap().iter().find(|g| g["name"] == "WE").unwrap();
    assert_eq!(we["row_tokens"].as_array().unwrap().len(), tokens.len());
    assert_eq!(read_gradient_dump(dir.path()).unwrap(), store);
}
