mod common;

use std::fs;

use safetensors::{Dtype, SafeTensors};
use vocab_prune::surgery::{prune_checkpoint, read_tensor_index, verify_checkpoint, Mismatch, SurgeryOptions};

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

fn toy_source(dir: &std::path::Path) -> std::path::PathBuf {
    let src = dir.join("src.safetensors");
    common::write_checkpoint(
        &src,
        &[
            ("emb", Dtype::F32, vec![10, 4], common::pattern(160, 0)),
            ("proj", Dtype::F32, vec![10, 4], common::pattern(160, 100)),
            ("other", Dtype::F32, vec![3], common::pattern(12, 200)),
        ],
    );
    src
}

#[test]
fn emb_proj_other_example() {
    let dir = tempfile::tempdir().unwrap();
    let src = toy_source(dir.path());
    let dst = dir.path().join("dst.safetensors");
    let plan = common::plan(10, &[0, 3, 7, 9]);
    let report = prune_checkpoint(&src, &dst, &plan, &names(&["emb", "proj"]), &SurgeryOptions::default()).unwrap();
    assert!(report.payload_bytes_new < report.payload_bytes_old);
    assert_eq!(report.removed_row_bytes(), 2 * 6 * 16);
    assert!(report.size_law_holds());
    assert_eq!(report.copied, vec!["other".to_string()]);

    let a = fs::read(&src).unwrap();
    let b = fs::read(&dst).unwrap();
    let (sa, sb) = (
        SafeTensors::deserialize(&a).unwrap(),
        SafeTensors::deserialize(&b).unwrap(),
    );
    for name in ["emb", "proj"] {
        let (ta, tb) = (sa.tensor(name).unwrap(), sb.tensor(name).unwrap());
        assert_eq!(tb.shape(), &[4, 4]);
        for (new, &old) in plan.new_to_old.iter().enumerate() {
            let old = old as usize;
            assert_eq!(tb.data()[new * 16..new * 16 + 16], ta.data()[old * 16..old * 16 + 16]);
        }
    }
    assert_eq!(sa.tensor("other").unwrap().data(), sb.tensor("other").unwrap().data());
    assert!(verify_checkpoint(&src, &dst, &plan, &names(&["emb", "proj"]))
        .unwrap()
        .ok());
}

#[test]
fn empty_name_list_is_a_pure_repack() {
    let dir = tempfile::tempdir().unwrap();
    let src = toy_source(dir.path());
    let dst = dir.path().join("dst.safetensors");
    let plan = common::plan(10, &[1, 2]);
    prune_checkpoint(&src, &dst, &plan, &[], &SurgeryOptions::default()).unwrap();
    let a = fs::read(&src).unwrap();
    let b = fs::read(&dst).unwrap();
    let (sa, sb) = (
        SafeTensors::deserialize(&a).unwrap(),
        SafeTensors::deserialize(&b).unwrap(),
    );
    let mut na = sa.names();
    let mut nb = sb.names();
    na.sort();
    nb.sort();
    assert_eq!(na, nb);
    for n in na {
        let (x, y) = (sa.tensor(n).unwrap(), sb.tensor(n).unwrap());
        assert_eq!((x.dtype(), x.shape(), x.data()), (y.dtype(), y.shape(), y.data()));
    }
}

#[test]
fn identity_plan_verifies() {
    let dir = tempfile::tempdir().unwrap();
    let src = toy_source(dir.path());
    let dst = dir.path().join("dst.safetensors");
    let plan = common::plan(10, &(0..10).collect::<Vec<_>>());
    let v = names(&["emb", "proj"]);
    let report = prune_checkpoint(&src, &dst, &plan, &v, &SurgeryOptions::default()).unwrap();
    assert_eq!(report.payload_bytes_old, report.payload_bytes_new);
    assert!(verify_checkpoint(&src, &dst, &plan, &v).unwrap().ok());
}

#[test]
fn pruning_composes() {
    let dir = tempfile::tempdir().unwrap();
    let src = toy_source(dir.path());
    let v = names(&["emb", "proj"]);
    let p = common::plan(10, &[1, 2, 4, 6, 8, 9]);
    let q = common::plan(6, &[0, 3, 5]);
    let composed: Vec<u32> = q.new_to_old.iter().map(|&i| p.new_to_old[i as usize]).collect();
    let pq = common::plan(10, &composed);

    let once = dir.path().join("once.safetensors");
    let step = dir.path().join("step.safetensors");
    let twice = dir.path().join("twice.safetensors");
    let opts = SurgeryOptions::default();
    prune_checkpoint(&src, &step, &p, &v, &opts).unwrap();
    prune_checkpoint(&step, &twice, &q, &v, &opts).unwrap();
    prune_checkpoint(&src, &once, &pq, &v, &opts).unwrap();

    let a = fs::read(&once).unwrap();
    let b = fs::read(&twice).unwrap();
    let (sa, sb) = (
        SafeTensors::deserialize(&a).unwrap(),
        SafeTensors::deserialize(&b).unwrap(),
    );
    for n in ["emb", "proj", "other"] {
        assert_eq!(sa.tensor(n).unwrap().data(), sb.tensor(n).unwrap().data(), "{n}");
        assert_eq!(sa.tensor(n).unwrap().shape(), sb.tensor(n).unwrap().shape(), "{n}");
    }
}

#[test]
fn flipped_byte_in_sliced_row_is_one_named_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let src = toy_source(dir.path());
    let dst = dir.path().join("dst.safetensors");
    let plan = common::plan(10, &[0, 3, 7, 9]);
    let v = names(&["emb", "proj"]);
    prune_checkpoint(&src, &dst, &plan, &v, &SurgeryOptions::default()).unwrap();

    let (start, _) = common::tensor_span(&dst, "proj");
    let mut bytes = fs::read(&dst).unwrap();
    bytes[start + 2 * 16 + 5] ^= 0x01;
    fs::write(&dst, bytes).unwrap();

    let result = verify_checkpoint(&src, &dst, &plan, &v).unwrap();
    assert_eq!(
        result.mismatches,
        vec![Mismatch::RowMismatch {
            name: "proj".into(),
            row: 2,
            source_row: 7
        }]
    );
}

#[test]
fn missing_non_vocab_tensor_is_absent() {
    let dir = tempfile::tempdir().unwrap();
    let src = toy_source(dir.path());
    let dst = dir.path().join("dst.safetensors");
    let plan = common::plan(10, &[0, 1]);
    common::write_checkpoint(
        &dst,
        &[
            ("emb", Dtype::F32, vec![2, 4], common::pattern(32, 0)),
            ("proj", Dtype::F32, vec![2, 4], common::pattern(32, 100)),
        ],
    );
    let result = verify_checkpoint(&src, &dst, &plan, &names(&["emb", "proj"])).unwrap();
    assert_eq!(result.mismatches, vec![Mismatch::AbsentTensor { name: "other".into() }]);
}

#[test]
fn failed_prune_leaves_no_output() {
    let dir = tempfile::tempdir().unwrap();
    let src = toy_source(dir.path());
    let dst = dir.path().join("dst.safetensors");
    let plan = common::plan(10, &[0, 1]);
    let wrong_axis = common::plan(11, &[0, 1]);
    let opts = SurgeryOptions::default();
    assert!(prune_checkpoint(&src, &dst, &plan, &names(&["nope"]), &opts).is_err());
    assert!(prune_checkpoint(&src, &dst, &wrong_axis, &names(&["emb"]), &opts).is_err());
    assert!(!dst.exists());
    let leftovers: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(leftovers.len(), 1, "temporary files left behind");
}

#[test]
fn reference_written_file_indexes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.safetensors");
    common::write_checkpoint(&path, &[("w", Dtype::F32, vec![2, 2], common::pattern(16, 0))]);
    let index = read_tensor_index(&path).unwrap();
    assert_eq!(index.metas.len(), 1);
    assert_eq!(index.metas[0].shape, vec![2, 2]);
    assert_eq!(index.metas[0].data_offsets, (0, 16));
}

#[test]
fn mixed_dtype_rows_are_copied_without_interpretation() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src.safetensors");
    let dst = dir.path().join("dst.safetensors");
    common::write_checkpoint(
        &src,
        &[
            ("a", Dtype::BF16, vec![5, 3], common::pattern(30, 1)),
            ("b", Dtype::I64, vec![5], common::pattern(40, 2)),
            ("c", Dtype::U8, vec![5, 2, 2], common::pattern(20, 3)),
            ("d", Dtype::F64, vec![2], common::pattern(16, 4)),
        ],
    );
    let plan = common::plan(5, &[4, 0]);
    let v = names(&["a", "b", "c"]);
    let report = prune_checkpoint(&src, &dst, &plan, &v, &SurgeryOptions::default()).unwrap();
    assert!(report.size_law_holds());
    assert!(verify_checkpoint(&src, &dst, &plan, &v).unwrap().ok());
    let bytes = fs::read(&dst).unwrap();
    let st = SafeTensors::deserialize(&bytes).unwrap();
    assert_eq!(
        st.tensor("b").unwrap().data(),
        &[&common::pattern(40, 2)[32..40], &common::pattern(40, 2)[0..8]].concat()[..]
    );
}
