use std::collections::HashSet;

use super::*;
use crate::testkit;
use crate::towers::EncoderConfig;

#[test]
fn same_seed_builds_identical_world() {
    let spec = WorldSpec {
        cl_classes: 5,
        subsets: 5,
        pretrain_classes: 2,
        train_per_class: 3,
        test_per_class: 2,
        pretrain_train_per_class: 2,
        pretrain_heldout_per_class: 1,
        ..Default::default()
    };
    let a = World::build(&spec, &EncoderConfig::default()).unwrap();
    let b = World::build(&spec, &EncoderConfig::default()).unwrap();
    assert_eq!(a, b);
    let c = World::build(&WorldSpec { seed: 1, ..spec }, &EncoderConfig::default()).unwrap();
    assert_ne!(a.classes[0].prototype, c.classes[0].prototype);
}

#[test]
fn noiseless_classes_repeat_one_sample() {
    let spec = WorldSpec {
        noise: 0.0,
        slice_jitter: 0.0,
        cl_classes: 5,
        pretrain_classes: 1,
        train_per_class: 4,
        ..Default::default()
    };
    let w = World::build(&spec, &EncoderConfig::default()).unwrap();
    for c in w.classes.iter().take(12) {
        let s = w.train_samples(c.id);
        assert!(s.iter().all(|x| x.input == s[0].input));
    }
}

#[test]
fn token_table_capacity_is_checked() {
    let enc = EncoderConfig {
        vocab_size: 2,
        text_len: 2,
        ..Default::default()
    };
    assert!(matches!(
        World::build(&WorldSpec::default(), &enc),
        Err(crate::Error::Config(_))
    ));
}

#[test]
fn world_geometry_and_disjoint_classes() {
    let w = testkit::world();
    let names: HashSet<_> = w.classes.iter().map(|c| c.tokens.clone()).collect();
    assert_eq!(names.len(), w.classes.len());
    for m in Modality::ALL {
        let cl = w.cl_classes(m);
        assert_eq!(cl.len(), 20);
        for &c in &cl {
            assert!(!w.classes[c].pretrain);
            let s = &w.train_samples(c)[0];
            assert_eq!(s.input.shape(), &[m.temporal_len() * 16, 32]);
        }
    }
    let sigs: HashSet<String> = w.signatures.iter().map(|s| format!("{:?}", s.0.data())).collect();
    assert_eq!(sigs.len(), 4);
    let corpus = w.pretrain_corpus();
    assert_eq!(corpus.class_tokens.len(), 32);
    assert_eq!(corpus.train.len(), 32 * 64);
}

#[test]
fn shift_stream_has_twenty_single_modality_steps() {
    let w = testkit::world();
    let s = make_stream(w, Scenario::Shift, false, 3).unwrap();
    assert_eq!(s.tasks.len(), 20);
    assert!(s.tasks[..5].iter().all(|t| t.modalities() == vec![Modality::Image]));
    assert!(s.tasks[15..].iter().all(|t| t.modalities() == vec![Modality::Audio]));
    let r = make_stream(w, Scenario::Shift, true, 3).unwrap();
    assert!(r.tasks[..5].iter().all(|t| t.modalities() == vec![Modality::Audio]));
    assert_eq!(r.tasks[0].parts, s.tasks[19].parts);
    assert_eq!(r.tasks[0].step, 1);
}

#[test]
fn simultaneous_stream_has_five_full_steps() {
    let s = make_stream(testkit::world(), Scenario::Simultaneous, false, 3).unwrap();
    assert_eq!(s.tasks.len(), 5);
    assert!(s.tasks.iter().all(|t| t.parts.len() == 4));
}

#[test]
fn random_stream_visits_each_modality_five_times() {
    let s = make_stream(testkit::world(), Scenario::Random, false, 11).unwrap();
    assert_eq!(s.tasks.len(), 20);
    for m in Modality::ALL {
        assert_eq!(s.tasks.iter().filter(|t| t.modalities() == vec![m]).count(), 5);
    }
    let again = make_stream(testkit::world(), Scenario::Random, false, 11).unwrap();
    assert_eq!(
        serde_json::to_string(&s).unwrap(),
        serde_json::to_string(&again).unwrap()
    );
    let other = make_stream(testkit::world(), Scenario::Random, false, 12).unwrap();
    assert_ne!(s, other);
}

#[test]
fn subsets_partition_each_modality() {
    let w = testkit::world();
    for scenario in [Scenario::Random, Scenario::Shift, Scenario::Simultaneous] {
        let s = make_stream(w, scenario, false, 5).unwrap();
        for m in Modality::ALL {
            let mut seen = Vec::new();
            for t in &s.tasks {
                if let Some(p) = t.part(m) {
                    assert_eq!(p.classes.len(), 4);
                    seen.extend(p.classes.iter().copied());
                }
            }
            let unique: HashSet<_> = seen.iter().copied().collect();
            assert_eq!(unique.len(), seen.len(), "class reused across tasks");
            assert_eq!(unique, w.cl_classes(m).into_iter().collect::<HashSet<_>>());
        }
    }
}

#[test]
fn raw_features_cluster_by_modality() {
    let w = testkit::world();
    let bb = testkit::backbone();
    let mut correct = 0;
    let mut total = 0;
    for m in Modality::ALL {
        let items: Vec<_> = w
            .cl_classes(m)
            .iter()
            .flat_map(|&c| w.test_samples(c).iter().take(3))
            .map(|s| &s.input)
            .collect();
        let f = bb.features(&items, None).unwrap();
        let pred = bb.nearest_centroid(&f);
        correct += pred.iter().filter(|&&p| p == m.index()).count();
        total += pred.len();
    }
    let acc = correct as f64 / total as f64;
    assert!(acc >= 0.95, "nearest-centroid modality accuracy {acc}");
}
