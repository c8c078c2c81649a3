use std::path::PathBuf;

use glfusion_core::data::{
    frame_file_name, load_manifest, mask_file_name, write_frame, write_mask, AnnotationRecord, BinaryMask,
    DatasetManifest, Frame, MaskRecord, Resolution, SampleRecord, Split, ViewRecord, ViewSpec,
};
use proptest::prelude::*;

fn arb_record() -> impl Strategy<Value = (Split, usize, Vec<Vec<usize>>)> {
    let split = prop_oneof![Just(Split::Train), Just(Split::Val), Just(Split::Test)];
    (split, 1usize..6).prop_flat_map(|(split, t)| {
        let idx = proptest::sample::subsequence((0..t).collect::<Vec<_>>(), 0..=t);
        (Just(split), Just(t), proptest::collection::vec(idx, 3))
    })
}

fn build(records: &[(Split, usize, Vec<Vec<usize>>)], root: PathBuf) -> DatasetManifest {
    let mut m = DatasetManifest::new(ViewSpec::standard_roster(), Resolution { height: 3, width: 2 }, root);
    for (i, (split, t, per_view)) in records.iter().enumerate() {
        let id = format!("s{i}");
        let views = ViewSpec::standard_roster()
            .into_iter()
            .zip(per_view)
            .map(|(spec, idx)| {
                let dir = PathBuf::from(&id).join(spec.view_id.as_str());
                let annotations = idx
                    .iter()
                    .map(|&f| AnnotationRecord {
                        frame_index: f,
                        masks: spec
                            .class_set
                            .iter()
                            .map(|&c| MaskRecord { class: c, path: dir.join(mask_file_name(f, c)) })
                            .collect(),
                    })
                    .collect();
                ViewRecord { view_id: spec.view_id, frame_dir: dir, annotations }
            })
            .collect();
        m.samples.push(SampleRecord { id, split: *split, num_frames: *t, views });
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn manifest_round_trip(records in proptest::collection::vec(arb_record(), 0..4)) {
        let dir = tempfile::tempdir().unwrap();
        let mut m = build(&records, dir.path().to_path_buf());
        for s in &m.samples {
            for v in &s.views {
                for t in 0..s.num_frames {
                    let f = Frame::new(3, 2, vec![t as u8; 6]).unwrap();
                    write_frame(&m.root.join(&v.frame_dir).join(frame_file_name(t)), &f).unwrap();
                }
                for mk in v.annotations.iter().flat_map(|a| &a.masks) {
                    write_mask(&m.root.join(&mk.path), &BinaryMask::new(3, 2, vec![true, false, true, false, false, true]).unwrap()).unwrap();
                }
            }
        }
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        let loaded = load_manifest(&path).unwrap();
        prop_assert_eq!(&loaded, &m);

        for (record, (_, t, per_view)) in loaded.samples.iter().zip(&records) {
            let sample = loaded.load_sample(record).unwrap();
            prop_assert_eq!(sample.num_frames(), *t);
            for (spec, idx) in loaded.views.iter().zip(per_view) {
                let pairs = sample.annotated_pairs(spec.view_id).unwrap();
                prop_assert_eq!(pairs.len(), idx.len());
                for (frame, masks) in pairs {
                    prop_assert_eq!(masks.len(), spec.num_classes());
                    prop_assert_eq!(frame.height, 3);
                }
            }
        }
    }

    #[test]
    fn clips_keep_views_aligned(t in 5usize..40, len_frac in 0.0f64..1.0, seed in any::<u64>()) {
        let len = ((t as f64 * len_frac) as usize).max(1);
        let dir = tempfile::tempdir().unwrap();
        let mut m = build(&[(Split::Train, t, vec![vec![0, t - 1], vec![t / 2], vec![]])], dir.path().to_path_buf());
        for v in &m.samples[0].views {
            for f in 0..t {
                write_frame(&m.root.join(&v.frame_dir).join(frame_file_name(f)), &Frame::new(3, 2, vec![f as u8; 6]).unwrap()).unwrap();
            }
            for mk in v.annotations.iter().flat_map(|a| &a.masks) {
                write_mask(&m.root.join(&mk.path), &BinaryMask::empty(3, 2)).unwrap();
            }
        }
        m.save(&dir.path().join("manifest.json")).unwrap();
        let sample = m.load_sample(&m.samples[0]).unwrap();
        let clip = sample.sample_clip(len, seed).unwrap();
        let start = clip.views()[0].frames[0].pixels[0] as usize;
        prop_assert!(start + len <= t);
        for v in clip.views() {
            prop_assert_eq!(v.frames.len(), len);
            for (i, f) in v.frames.iter().enumerate() {
                prop_assert_eq!(f.pixels[0] as usize, start + i);
            }
        }
    }
}
