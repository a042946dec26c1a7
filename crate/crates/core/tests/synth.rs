use std::collections::HashMap;

use ihd_core::dataset::{Manifest, Split};
use ihd_core::preprocess::read_volume;
use ihd_core::synth::{assign_splits, generate_dataset, generate_series, SplitFractions, SynthSpec};
use ihd_core::NUM_SUBTYPES;
use proptest::prelude::*;

fn spec(num_series: usize) -> SynthSpec {
    SynthSpec {
        num_series,
        min_slices: 3,
        max_slices: 6,
        frame: 32,
        ..SynthSpec::default()
    }
}

#[test]
fn prevalence_matches_class_rates() {
    let spec = SynthSpec {
        min_slices: 2,
        max_slices: 3,
        ..spec(1000)
    };
    let mut present = [0usize; NUM_SUBTYPES];
    for i in 0..spec.num_series {
        let s = generate_series(&spec, i).unwrap();
        for (c, p) in present.iter_mut().enumerate() {
            *p += usize::from(s.labels.iter().any(|l| l.0[c]));
        }
    }
    for (c, &count) in present.iter().enumerate() {
        let p = spec.class_rates[c];
        let n = spec.num_series as f64;
        let sigma = (n * p * (1.0 - p)).sqrt();
        assert!(
            (count as f64 - n * p).abs() <= 3.0 * sigma,
            "class {c}: {count} positives, expected {} ± {}",
            n * p,
            3.0 * sigma
        );
    }
}

#[test]
fn dataset_files_and_split_integrity() {
    let dir = tempfile::tempdir().unwrap();
    let spec = spec(20);
    let fractions = SplitFractions::new(0.7, 0.1, 0.2).unwrap();
    let generated = generate_dataset(&spec, fractions, dir.path()).unwrap();
    let manifest = Manifest::read(&dir.path().join("manifest.csv")).unwrap();
    let answers = Manifest::read(&dir.path().join("answers.csv")).unwrap();
    assert_eq!(manifest, generated.manifest);
    assert_eq!(answers, generated.answers);

    assert_eq!(manifest.series_in(Split::Train).len(), 14);
    assert_eq!(manifest.series_in(Split::Validation).len(), 2);
    assert_eq!(manifest.series_in(Split::Unlabeled).len(), 4);

    let mut split_of: HashMap<&str, Split> = HashMap::new();
    for r in &manifest.rows {
        assert_eq!(*split_of.entry(&r.series_id).or_insert(r.split), r.split);
        assert_eq!(r.labels.is_none(), r.split == Split::Unlabeled);
    }
    assert!(answers.rows.iter().all(|r| r.split == Split::Unlabeled && r.labels.is_some()));
    assert_eq!(answers.series_ids(), manifest.series_in(Split::Unlabeled));

    for (index, id) in manifest.series_ids().iter().enumerate() {
        let volume = read_volume(&dir.path().join("volumes"), id).unwrap();
        assert_eq!(volume, generate_series(&spec, index).unwrap().volume);
    }
}

#[test]
fn all_train_fraction() {
    let f = SplitFractions::new(1.0, 0.0, 0.0).unwrap();
    assert!(assign_splits(37, f, 4).iter().all(|&s| s == Split::Train));
}

#[test]
fn positives_carry_blood_intensity() {
    // Every positive slice contains pixels near brain + signal; negatives of a
    // noiseless spec contain none.
    let spec = SynthSpec { noise_hu: 0.0, ..spec(30) };
    let blood = (30.0 + spec.signal_hu) as i16;
    for i in 0..spec.num_series {
        let s = generate_series(&spec, i).unwrap();
        for (slice, labels) in s.volume.ordered_slices().iter().zip(&s.labels) {
            assert_eq!(slice.contains(&blood), labels.0[5], "series {i}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn labels_are_consistent(seed in any::<u64>(), index in 0usize..10, noise in 0.0f64..0.5) {
        let spec = SynthSpec { seed, label_noise: noise, ..spec(10) };
        let s = generate_series(&spec, index).unwrap();
        prop_assert_eq!(s.labels.len(), s.volume.num_slices());
        prop_assert!(s.labels.iter().all(|l| l.is_consistent()));
        prop_assert_eq!(&s, &generate_series(&spec, index).unwrap());
    }
}
