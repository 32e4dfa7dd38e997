//! A randomly initialised two-layer CLIP, checked against reference
//! embeddings produced by the Hugging Face implementation.

use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rave::backend::{load_backend_with_dtype, BackendHandle, LayerSelection};
use serde_json::Value;

const TOL: f64 = 1e-5;

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny_clip")
}

fn load(dtype: DType) -> BackendHandle {
    load_backend_with_dtype(fixture_dir().to_str().unwrap(), "cpu", dtype).unwrap()
}

fn reference() -> Value {
    serde_json::from_str(include_str!("fixtures/tiny_clip_reference.json")).unwrap()
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .collect()
}

fn rows(v: &Value) -> Vec<Vec<f64>> {
    v.as_array().unwrap().iter().map(floats).collect()
}

fn assert_close(got: &[f64], want: &[f64], what: &str) {
    assert_eq!(got.len(), want.len(), "{what}: length");
    let worst = got
        .iter()
        .zip(want)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(worst < TOL, "{what}: max abs diff {worst:e}");
}

#[test]
fn image_embeddings_match_reference() {
    let h = load(DType::F64);
    assert_eq!(h.embed_dim(), 16);
    let r = reference();
    let images: Vec<f64> = rows(&r["images"]).concat();
    let pixels = Tensor::from_vec(images, (2, 3, 32, 32), h.device()).unwrap();
    let emb = h.encode_image(&pixels).unwrap().to_vec2::<f64>().unwrap();
    for (i, want) in rows(&r["image_embeddings"]).iter().enumerate() {
        assert_close(&emb[i], want, "image embedding");
    }
}

#[test]
fn text_embeddings_match_reference() {
    let h = load(DType::F64);
    let r = reference();
    let vocab = h.vocabulary().unwrap();
    assert_eq!(vocab.tokens()[3], "w3");
    let ids: Vec<Vec<usize>> = r["token_ids"]
        .as_array()
        .unwrap()
        .iter()
        .map(|row| {
            row.as_array()
                .unwrap()
                .iter()
                .map(|x| x.as_u64().unwrap() as usize)
                .collect()
        })
        .collect();
    let want = rows(&r["text_embeddings"]);
    for (row, want) in ids.iter().zip(&want) {
        let toks: Vec<Tensor> = row.iter().map(|&i| vocab.row(i).unwrap()).collect();
        let seq = Tensor::cat(&toks, 0).unwrap().unsqueeze(0).unwrap();
        let got = h.encode_text(&seq).unwrap().to_vec2::<f64>().unwrap();
        assert_close(&got[0], want, "text embedding");
    }
}

#[test]
fn stages_and_layers() {
    let h = load(DType::F32);
    assert_eq!(h.stage_count(), 4);
    let pixels = Tensor::full(0.5f32, (1, 3, 48, 40), h.device()).unwrap();
    let acts = h
        .encode_image_layers(&pixels, &LayerSelection(vec![0, 1, 3]))
        .unwrap();
    // Token sequence: one class token plus a 4×4 patch grid.
    assert_eq!(
        acts.shapes(),
        vec![vec![1, 17, 32], vec![1, 17, 32], vec![1, 16]]
    );
    let direct = h.encode_image(&pixels).unwrap();
    let diff = (direct - &acts.per_layer[2])
        .unwrap()
        .abs()
        .unwrap()
        .max_all()
        .unwrap();
    assert!(diff.to_scalar::<f32>().unwrap() < 1e-6);
    assert!(h
        .encode_image_layers(&pixels, &LayerSelection(vec![4]))
        .is_err());
}

#[test]
fn checksum_sidecar_is_enforced() {
    let dir = tempfile::tempdir().unwrap();
    for f in ["model.safetensors", "config.json", "vocab.json"] {
        std::fs::copy(fixture_dir().join(f), dir.path().join(f)).unwrap();
    }
    std::fs::write(dir.path().join("model.safetensors.sha256"), "00".repeat(32)).unwrap();
    let err = load_backend_with_dtype(dir.path().to_str().unwrap(), "cpu", DType::F32).unwrap_err();
    assert!(matches!(err, rave::Error::ChecksumMismatch { .. }), "{err}");

    let bytes = std::fs::read(dir.path().join("model.safetensors")).unwrap();
    std::fs::write(
        dir.path().join("model.safetensors.sha256"),
        format!("{}  model.safetensors\n", rave::ops::sha256_hex(&bytes)),
    )
    .unwrap();
    let h = load_backend_with_dtype(dir.path().to_str().unwrap(), "cpu", DType::F32).unwrap();
    assert_eq!(h.weight_checksum(), rave::ops::sha256_hex(&bytes));
}

#[test]
fn unknown_model_is_reported() {
    let err = load_backend_with_dtype("no-such-model", "cpu", DType::F32).unwrap_err();
    assert!(matches!(err, rave::Error::UnknownModel(_)));
    assert!(load_backend_with_dtype("mock-linear-8", "cuda:0", DType::F32).is_err());
}
