// SPDX-License-Identifier: Apache-2.0

use ttalab::embed_io::{
    frozen_predict, frozen_similarity, manifest_path, read_embeddings, read_manifest, write_with_manifest, DType,
    EmbeddingFile,
};
use ttalab::tta::normalize_rows;
use ttalab::{Error, Tensor};

fn unit(rows: usize, cols: usize, phase: f64) -> Tensor {
    let m = Tensor::matrix(rows, cols, (0..rows * cols).map(|i| (i as f64 * 0.7 + phase).cos()).collect()).unwrap();
    normalize_rows(&m).unwrap()
}

#[test]
fn files_and_sidecars_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("images.emb");
    let m = unit(6, 5, 0.3);
    let file = EmbeddingFile::new(&m, Some(vec![0, 1, 2, 0, 1, 2]), DType::F64).unwrap();
    let manifest = write_with_manifest(&path, &file, "unit test", "toy").unwrap();
    assert_eq!(manifest_path(&path), dir.path().join("images.emb.json"));

    let back = read_embeddings(&path).unwrap();
    assert_eq!(back, file);
    let read = read_manifest(&manifest_path(&path)).unwrap();
    assert_eq!(read, manifest);
    assert!(read.matches(&back));
    assert_eq!((read.count, read.dim), (6, 5));

    let other = EmbeddingFile::new(&unit(6, 5, 0.4), None, DType::F64).unwrap();
    assert!(!read.matches(&other));
}

#[test]
fn truncated_and_foreign_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let file = EmbeddingFile::new(&unit(4, 3, 0.0), None, DType::F32).unwrap();
    let bytes = file.to_bytes().unwrap();
    let path = dir.path().join("cut.emb");
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(read_embeddings(&path), Err(Error::Truncated { .. })));
    std::fs::write(&path, b"PK\x03\x04 not an embedding file").unwrap();
    assert!(matches!(read_embeddings(&path), Err(Error::Format(_))));
    assert!(matches!(read_embeddings(&dir.path().join("absent.emb")), Err(Error::Io { .. })));
}

#[test]
fn frozen_paths_agree_with_direct_computation() {
    let images = EmbeddingFile::new(&unit(5, 4, 0.1), None, DType::F64).unwrap();
    let prompts = EmbeddingFile::new(&unit(3, 4, 1.1), None, DType::F64).unwrap();
    let pred = frozen_predict(&images, &prompts, 0.01).unwrap();
    let s = images.matrix().matmul_t(&prompts.matrix()).unwrap();
    for i in 0..5 {
        let best = (0..3).max_by(|&a, &b| s.get(i, a).partial_cmp(&s.get(i, b)).unwrap()).unwrap();
        assert_eq!(pred.top1[i], best);
    }
    let bad = EmbeddingFile::new(&unit(3, 5, 0.0), None, DType::F64).unwrap();
    assert!(frozen_predict(&images, &bad, 0.01).is_err());

    let bundle = frozen_similarity(&images, &images, 0.01).unwrap();
    assert_eq!(bundle.q.shape(), &[5, 5]);
}
