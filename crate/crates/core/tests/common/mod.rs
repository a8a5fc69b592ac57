#![allow(dead_code)]

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use safetensors::tensor::TensorView;
use safetensors::Dtype;
use vocab_prune::select::{Group, VocabPlan};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

/// Serializes `tensors` with the reference safetensors writer.
pub fn write_checkpoint(path: &Path, tensors: &[(&str, Dtype, Vec<usize>, Vec<u8>)]) {
    let views: Vec<(String, TensorView<'_>)> = tensors
        .iter()
        .map(|(name, dtype, shape, data)| {
            (
                name.to_string(),
                TensorView::new(*dtype, shape.clone(), data).expect("consistent tensor"),
            )
        })
        .collect();
    let bytes = safetensors::serialize(views, None::<HashMap<String, String>>).expect("serialize");
    std::fs::write(path, bytes).unwrap();
}

/// Counting bytes: element `i` of the result is `seed + i` (mod 256).
pub fn pattern(len: usize, seed: u8) -> Vec<u8> {
    (0..len).map(|i| seed.wrapping_add(i as u8)).collect()
}

pub fn plan(v_old: usize, keep: &[u32]) -> VocabPlan {
    VocabPlan {
        n_total: keep.len(),
        v_old,
        budget_met: true,
        new_to_old: keep.to_vec(),
        groups: vec![Group::Target; keep.len()],
        pieces: keep.iter().map(|i| format!("p{i}")).collect(),
    }
}

/// Absolute file offset and length of tensor `name`'s bytes.
pub fn tensor_span(path: &Path, name: &str) -> (usize, usize) {
    let bytes = std::fs::read(path).unwrap();
    let (n, meta) = safetensors::SafeTensors::read_metadata(&bytes).unwrap();
    let info = meta.info(name).expect("tensor present");
    (8 + n + info.data_offsets.0, info.data_offsets.1 - info.data_offsets.0)
}
