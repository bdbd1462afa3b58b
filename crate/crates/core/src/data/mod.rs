//! Precomputed embedding data: records, container format and batching.

mod batch;
pub mod container;
mod dataset;

pub use batch::{batch_iter, epoch_seed, BatchMode};
pub use container::{read_container, write_container, Record, RecordKind};
pub use dataset::{
    from_parts, read_dataset, resolve_missing, write_dataset, Dataset, Dims, Group, ItemEntry,
    ItemRecord, Manifest, QueryEntry, QueryRecord, ResolvedItem, TokenMatrix, MANIFEST_FILE,
    TENSOR_FILE,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn tokens(rows: usize, cols: usize, base: f32) -> TokenMatrix {
        Tensor::from_fn(rows, cols, |r, c| base + 0.37 * r as f32 - 0.11 * c as f32)
    }

    fn unit(dim: usize, k: usize) -> Vec<f32> {
        let mut v = vec![0.0; dim];
        v[k % dim] = 1.0;
        v
    }

    fn sample() -> Dataset {
        let dims = Dims {
            dim: 4,
            teacher_dim: 3,
            m: 2,
            n_s: 5,
            l_a0: 2,
        };
        let items = vec![
            ItemRecord {
                item_id: "a".into(),
                visual_tokens: tokens(2, 4, 0.5),
                audio_tokens: Some(tokens(3, 4, -1.0)),
                speech_tokens: Some(tokens(4, 4, 2.0)),
                teacher_video: Some(unit(3, 0)),
                teacher_audio: Some(unit(3, 1)),
                group: Some(Group::SoundSpeech),
            },
            ItemRecord {
                item_id: "b".into(),
                visual_tokens: tokens(2, 4, 1.5),
                audio_tokens: None,
                speech_tokens: None,
                teacher_video: Some(unit(3, 2)),
                teacher_audio: None,
                group: None,
            },
        ];
        let queries = vec![QueryRecord {
            query_id: "q0".into(),
            embedding: vec![0.1, 0.2, 0.3, 0.4],
            ground_truth_item: "b".into(),
            group: Some(Group::Visual),
        }];
        let mut splits = BTreeMap::new();
        splits.insert("train".to_string(), vec!["a".to_string(), "b".to_string()]);
        Dataset {
            dims,
            items,
            queries,
            splits,
        }
    }

    #[test]
    fn write_read_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = sample();
        write_dataset(&ds, dir.path()).unwrap();
        let first = std::fs::read(dir.path().join(TENSOR_FILE)).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
        write_dataset(&ds, dir.path()).unwrap();
        assert_eq!(std::fs::read(dir.path().join(TENSOR_FILE)).unwrap(), first);
    }

    #[test]
    fn dimension_violation_names_item() {
        let mut ds = sample();
        ds.items[1].visual_tokens = tokens(2, 3, 0.0);
        let dir = tempfile::tempdir().unwrap();
        let err = write_dataset(&ds, dir.path()).unwrap_err().to_string();
        assert!(err.contains("item b"), "{err}");
    }

    #[test]
    fn empty_dataset_loads() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = r#"{"dim":16,"teacher_dim":16,"m":12,"n_s":32,"l_a0":12,"items":[],"queries":[],"splits":{}}"#;
        std::fs::write(dir.path().join(MANIFEST_FILE), manifest).unwrap();
        write_container(&dir.path().join(TENSOR_FILE), &[]).unwrap();
        let ds = read_dataset(dir.path()).unwrap();
        assert!(ds.items.is_empty() && ds.queries.is_empty());
    }

    #[test]
    fn missing_tensor_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let ds = sample();
        write_dataset(&ds, dir.path()).unwrap();
        let mut manifest = ds.manifest();
        manifest.items[1].audio = true;
        std::fs::write(
            dir.path().join(MANIFEST_FILE),
            serde_json::to_string(&manifest).unwrap(),
        )
        .unwrap();
        let err = read_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("item/b/audio"), "{err}");
    }

    #[test]
    fn teacher_vectors_are_normalized_on_load() {
        let mut ds = sample();
        ds.items[0].teacher_video = Some(vec![3.0, 4.0, 0.0]);
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        let t = back.items[0].teacher_video.as_ref().unwrap();
        assert!((t[0] - 0.6).abs() < 1e-7 && (t[1] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn resolve_fills_zeros() {
        let ds = sample();
        let r = resolve_missing(&ds.items[1], &ds.dims);
        assert_eq!(r.audio, Tensor::zeros(2, 4));
        assert_eq!(r.speech, Tensor::zeros(5, 4));
        assert!(!r.has_audio && !r.has_speech);
        let full = resolve_missing(&ds.items[0], &ds.dims);
        assert_eq!(Some(&full.audio), ds.items[0].audio_tokens.as_ref());
        assert_eq!(Some(&full.speech), ds.items[0].speech_tokens.as_ref());
        assert!(full.has_audio && full.has_speech);
    }

    proptest! {
        #[test]
        fn container_round_trip(values in prop::collection::vec(-1e6f32..1e6, 1..40), cols in 1usize..5) {
            let rows = values.len().div_ceil(cols);
            let mut data = values.clone();
            data.resize(rows * cols, 0.25);
            let rec = Record::tokens("t", Tensor::new(rows, cols, data).unwrap());
            let bytes = container::encode(std::slice::from_ref(&rec)).unwrap();
            let back = container::decode(&bytes).unwrap();
            prop_assert_eq!(back, vec![rec]);
        }

        #[test]
        fn resolve_is_idempotent(has_audio in any::<bool>(), has_speech in any::<bool>()) {
            let ds = sample();
            let mut item = ds.items[0].clone();
            if !has_audio { item.audio_tokens = None; }
            if !has_speech { item.speech_tokens = None; }
            let once = resolve_missing(&item, &ds.dims);
            let twice = resolve_missing(&once.to_record(&item), &ds.dims);
            prop_assert_eq!(once.visual, twice.visual);
            prop_assert_eq!(once.audio, twice.audio);
            prop_assert_eq!(once.speech, twice.speech);
        }

        #[test]
        fn eval_epoch_covers_split(n in 1usize..60, b in 1usize..60, seed in any::<u64>()) {
            prop_assume!(b <= n);
            let ids: Vec<usize> = (0..n).collect();
            let mut seen: Vec<usize> = batch_iter(&ids, b, seed, 0, true, BatchMode::Eval)
                .unwrap()
                .into_iter()
                .flatten()
                .collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, ids);
        }
    }
}
