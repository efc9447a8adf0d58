use std::collections::HashSet;
use std::time::Instant;

use dfdetect::manifest::{DatasetManifest, Record, Source, Split};
use dfdetect::sampling::{build_model_trainset, partition_fakes, partition_ids, PartitionPlan};
use proptest::prelude::*;

fn ids(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i:06}")).collect()
}

fn records(prefix: &str, n: usize, source: Source, split: Split) -> Vec<Record> {
    ids(prefix, n)
        .into_iter()
        .map(|id| Record {
            path: format!("{id}.png"),
            id,
            label: source.label(),
            source,
            split,
        })
        .collect()
}

/// Independent check of the plan: disjoint, covering, skew at most one.
fn check_invariants(plan: &PartitionPlan, fakes: &[String]) {
    let mut seen = HashSet::new();
    for s in &plan.subsets {
        for id in s {
            assert!(seen.insert(id.clone()), "duplicate {id}");
        }
    }
    let all: HashSet<String> = fakes.iter().cloned().collect();
    assert_eq!(seen, all);
    let max = plan.subsets.iter().map(Vec::len).max().unwrap();
    let min = plan.subsets.iter().map(Vec::len).min().unwrap();
    assert!(max - min <= 1);
}

#[test]
fn large_scale_counts() {
    let start = Instant::now();
    let mut recs = records("r", 42_690, Source::RealOrig, Split::Train);
    recs.extend(records("a", 21_335, Source::RealOfflineAug, Split::Train));
    recs.extend(records("f", 219_470, Source::FakeMethod(0), Split::Train));
    recs.extend(records("g", 12_200, Source::FakeGenerated, Split::Train));
    recs.extend(records("v", 100, Source::FakeMethod(1), Split::Val));
    let manifest = DatasetManifest::new("", recs);

    let plan = partition_fakes(&manifest, 3, 42).unwrap();
    let fakes = ids("f", 219_470);
    check_invariants(&plan, &fakes);
    plan.validate(&fakes).unwrap();

    let mut sizes = Vec::new();
    for m in 0..3 {
        let (rs, counts) = build_model_trainset(&manifest, &plan, m).unwrap();
        assert_eq!(counts.real, 64_025);
        assert_eq!(counts.fake_generated, 12_200);
        assert_eq!(rs.len(), counts.real + counts.fake);
        assert!(rs.iter().all(|r| r.split == Split::Train));
        sizes.push(counts.fake);
    }
    sizes.sort_unstable();
    assert_eq!(sizes, [85_356, 85_357, 85_357]);
    assert!(start.elapsed().as_secs_f64() < 5.0);
}

#[test]
fn desk_counts() {
    let plan = partition_ids(ids("r", 3_000), ids("f", 6_000), vec![], 3, 42).unwrap();
    for m in 0..3 {
        let c = plan.counts(m).unwrap();
        assert_eq!((c.real, c.fake, c.fake_generated), (3_000, 2_000, 0));
    }
}

#[test]
fn plan_survives_json_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let plan = partition_ids(ids("r", 5), ids("f", 11), ids("g", 2), 3, 9).unwrap();
    let path = dir.path().join("partition.json");
    plan.save(&path).unwrap();
    assert_eq!(PartitionPlan::load(&path).unwrap(), plan);
}

#[test]
fn missing_records_are_reported() {
    let recs = records("f", 6, Source::FakeMethod(2), Split::Train);
    let manifest = DatasetManifest::new("", recs);
    let mut plan = partition_fakes(&manifest, 3, 0).unwrap();
    plan.real_ids.push("ghost".into());
    assert!(build_model_trainset(&manifest, &plan, 0).is_err());
}

proptest! {
    #[test]
    fn partition_invariants(n_fake in 1usize..500, n_models in 1usize..6, seed in any::<u64>()) {
        prop_assume!(n_fake >= n_models);
        let fakes = ids("f", n_fake);
        let plan = partition_ids(ids("r", 3), fakes.clone(), ids("g", 2), n_models, seed).unwrap();
        check_invariants(&plan, &fakes);
        prop_assert!(plan.validate(&fakes).is_ok());
        let total: usize = (0..n_models).map(|m| plan.counts(m).unwrap().fake_subset).sum();
        prop_assert_eq!(total, n_fake);
        for m in 0..n_models {
            let c = plan.counts(m).unwrap();
            prop_assert_eq!(c.fake, c.fake_subset + 2);
            prop_assert_eq!(plan.trainset_ids(m).unwrap().len(), 3 + c.fake);
        }
    }

    #[test]
    fn partition_is_deterministic(n_fake in 3usize..200, seed in any::<u64>()) {
        let a = partition_ids(vec![], ids("f", n_fake), vec![], 3, seed).unwrap();
        let b = partition_ids(vec![], ids("f", n_fake), vec![], 3, seed).unwrap();
        prop_assert_eq!(a, b);
    }
}
