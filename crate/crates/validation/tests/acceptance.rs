//! One verdict line per acceptance criterion. Runs as a plain binary so the
//! lines show up in `cargo test` output; a positional argument filters
//! criteria by id (e.g. `cargo test --test acceptance -- 6`).

use std::collections::HashSet;
use std::path::Path;
use std::time::Instant;

use dfdetect::cli::{augment_offline, ablate, partition, run_recipe, synth, AblationVariant, Corpus, Layout, RunConfig};
use dfdetect::diagnostics::silhouette_score;
use dfdetect::ensemble::{majority_vote_render, Vote};
use dfdetect::losses::{bce_logits_loss, l2_normalize_rows, l2_normalize_rows_backward, sigmoid, supcon_loss, SupConConfig};
use dfdetect::manifest::{DatasetManifest, Record, Source, Split};
use dfdetect::metrics::{binary_metrics, roc_auc, MetricsReport};
use dfdetect::nn::{
    build_backbone, finite_diff_check, BackboneKind, BackboneSpec, GradCheckConfig, LayerSpec, Mode, Model, Tensor,
};
use dfdetect::pipeline::{
    backbone_hash, embed, init_backbone, train_stage1, train_stage2, Dataset, ModelCheckpoint, TrainOutput,
};
use dfdetect::rng::seeded;
use dfdetect::sampling::{build_model_trainset, partition_fakes};
use dfdetect::Result;
use rand::Rng;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- 1

fn supcon_oracle(z: &[f64], n: usize, d: usize, labels: &[u8], tau: f64) -> Option<f64> {
    let dot = |i: usize, j: usize| (0..d).map(|k| z[i * d + k] * z[j * d + k]).sum::<f64>() / tau;
    let (mut sum, mut anchors) = (0.0, 0usize);
    for i in 0..n {
        let denom: f64 = (0..n).filter(|&a| a != i).map(|a| dot(i, a).exp()).sum();
        let pos: Vec<usize> = (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect();
        if pos.is_empty() {
            continue;
        }
        sum += pos.iter().map(|&p| -(dot(i, p).exp() / denom).ln()).sum::<f64>() / pos.len() as f64;
        anchors += 1;
    }
    (anchors > 0).then(|| sum / anchors as f64)
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut rng = seeded(1);
    let mut worst: f64 = 0.0;
    for case in 0..200 {
        let n = rng.random_range(2..=16);
        let d = rng.random_range(1..=8);
        let tau = [0.07, 0.5, 1.0][case % 3];
        let mut z: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        for row in z.chunks_mut(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= norm);
        }
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let got = supcon_loss(&Tensor::new(vec![n, d], z.clone()).unwrap(), &labels, &SupConConfig { temperature: tau })
            .unwrap()
            .loss;
        worst = worst.max((got - supcon_oracle(&z, n, d, &labels, tau).unwrap_or(0.0)).abs());
    }
    let mut worst_bce: f64 = 0.0;
    for _ in 0..2000 {
        let x: f64 = rng.random_range(-20.0..=20.0);
        let y: u8 = rng.random_range(0..2);
        let got = bce_logits_loss(&Tensor::new(vec![1], vec![x]).unwrap(), &[y]).unwrap().loss;
        let p = sigmoid(x);
        let naive = -(y as f64 * p.ln() + (1.0 - y as f64) * (1.0 - p).ln());
        worst_bce = worst_bce.max((got - naive).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst <= 1e-6 && worst_bce <= 1e-6 && secs < 10.0,
        format!("supcon max err {worst:.1e}, bce max err {worst_bce:.1e}, {secs:.2} s"),
    )
}

// ---------------------------------------------------------------- 2

type LossFn = Box<dyn Fn(&Tensor<f64>) -> Result<(f64, Tensor<f64>)>>;

fn random(shape: Vec<usize>, seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = seeded(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn weighted_sum(shape: Vec<usize>, seed: u64) -> LossFn {
    let w = random(shape, seed, -1.0, 1.0);
    Box::new(move |y| Ok((y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum(), w.clone())))
}

fn supcon_fn(labels: Vec<u8>) -> LossFn {
    Box::new(move |z| {
        let u = l2_normalize_rows(z)?;
        let r = supcon_loss(&u, &labels, &SupConConfig::default())?;
        Ok((r.loss, l2_normalize_rows_backward(z, &r.grad)?))
    })
}

fn bce_fn(labels: Vec<u8>) -> LossFn {
    Box::new(move |y| {
        let r = bce_logits_loss(y, &labels)?;
        Ok((r.loss, r.grad))
    })
}

type GradCase = (String, Model<f64>, Tensor<f64>, LossFn, Mode);

fn criterion_2() -> Verdict {
    let start = Instant::now();
    let mut cases: Vec<GradCase> = Vec::new();
    let layers: Vec<(&[usize], LayerSpec, usize, Mode)> = vec![
        (&[6], LayerSpec::Dense { fan_in: 6, fan_out: 5 }, 4, Mode::Train),
        (&[6, 6, 2], LayerSpec::Conv3x3 { in_channels: 2, out_channels: 3 }, 2, Mode::Train),
        (&[6, 6, 2], LayerSpec::Conv5x5 { in_channels: 2, out_channels: 3 }, 2, Mode::Train),
        (&[4, 4, 3], LayerSpec::BatchNorm { channels: 3 }, 3, Mode::Train),
        (&[5], LayerSpec::BatchNorm { channels: 5 }, 6, Mode::Eval),
        (&[8], LayerSpec::Dropout { p: 0.3 }, 4, Mode::Train),
        (&[8], LayerSpec::Relu, 4, Mode::Train),
        (&[4, 4, 2], LayerSpec::MaxPool2, 3, Mode::Train),
        (&[4, 4, 2], LayerSpec::GlobalAvgPool, 3, Mode::Train),
        (&[4, 4, 3], LayerSpec::Patchify { patch: 2 }, 2, Mode::Train),
    ];
    for (k, (shape, spec, batch, mode)) in layers.into_iter().enumerate() {
        let model = Model::<f64>::build(shape, std::slice::from_ref(&spec), 5 + k as u64).unwrap();
        let mut x_shape = vec![batch];
        x_shape.extend_from_slice(shape);
        let mut y_shape = vec![batch];
        y_shape.extend(model.output_shape());
        let name = format!("{}{}", spec.kind(), if mode == Mode::Eval { " (eval)" } else { "" });
        cases.push((name, model, random(x_shape, 100 + k as u64, -1.0, 1.0), weighted_sum(y_shape, 200 + k as u64), mode));
    }
    for kind in BackboneKind::ALL {
        let spec = BackboneSpec::preset(kind, 16, 8);
        let model = build_backbone(&spec, 11).unwrap().cast::<f64>();
        let x = random(vec![8, 16, 16, 3], 12, 0.0, 1.0);
        cases.push((format!("{} + supcon", kind.name()), model, x, supcon_fn(vec![1, 0, 1, 0, 1, 1, 0, 0]), Mode::Train));
        let mut layers = spec.layers.clone();
        layers.push(LayerSpec::Dense { fan_in: 8, fan_out: 1 });
        let model = Model::<f64>::build(&[16, 16, 3], &layers, 13).unwrap();
        let x = random(vec![6, 16, 16, 3], 14, 0.0, 1.0);
        cases.push((format!("{} + bce", kind.name()), model, x, bce_fn(vec![1, 0, 1, 1, 0, 0]), Mode::Train));
    }

    let mut failures = Vec::new();
    let mut worst: f64 = 0.0;
    for (name, model, x, loss, mode) in &cases {
        let cfg = GradCheckConfig {
            mode: *mode,
            ..Default::default()
        };
        let report = finite_diff_check(model, loss.as_ref(), x, &cfg).unwrap();
        worst = worst.max(report.worst.as_ref().map_or(0.0, |w| w.error));
        if !report.passed {
            failures.push(format!("{name}: {report}"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!("{} checks, worst rel err {worst:.1e}, {secs:.1} s", cases.len());
    if failures.is_empty() {
        verdict(secs < 60.0, detail)
    } else {
        verdict(false, format!("{detail}; failed: {}", failures.join("; ")))
    }
}

// ---------------------------------------------------------------- 3

fn draw<R: Rng>(rng: &mut R) -> f64 {
    if rng.random_range(0..4) == 0 {
        [0.0, 0.5, 1.0][rng.random_range(0..3)]
    } else {
        rng.random()
    }
}

fn criterion_3() -> Verdict {
    let start = Instant::now();
    let examples = [
        ([0.9, 0.6, 0.4], Vote::Real, 0.9),
        ([0.3, 0.45, 0.7], Vote::Fake, 0.3),
        ([0.5, 0.5, 0.9], Vote::Fake, 0.5),
    ];
    let mut ok = examples.iter().all(|&(p, v, r)| {
        let d = majority_vote_render(p).unwrap();
        d.vote == v && d.rendered == r
    });
    let mut rng = seeded(3);
    for _ in 0..100_000 {
        let p = [draw(&mut rng), draw(&mut rng), draw(&mut rng)];
        let d = majority_vote_render(p).unwrap();
        let reals = p.iter().filter(|&&x| x > 0.5).count();
        let max = p.iter().copied().fold(f64::MIN, f64::max);
        let min = p.iter().copied().fold(f64::MAX, f64::min);
        ok &= (d.vote == Vote::Real) == (reals >= 2);
        ok &= (d.rendered > 0.5) == (d.vote == Vote::Real);
        ok &= d.rendered == if d.vote == Vote::Real { max } else { min };
        for perm in [[1, 0, 2], [2, 1, 0], [0, 2, 1], [1, 2, 0], [2, 0, 1]] {
            let q = majority_vote_render([p[perm[0]], p[perm[1]], p[perm[2]]]).unwrap();
            ok &= q.vote == d.vote && q.rendered == d.rendered;
        }
        let k = rng.random_range(0..3);
        let mut raised = p;
        raised[k] = rng.random_range(p[k]..=1.0);
        if d.vote == Vote::Real {
            ok &= majority_vote_render(raised).unwrap().vote == Vote::Real;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(ok && secs < 5.0, format!("3 worked examples, 100000 triples, {secs:.2} s"))
}

// ---------------------------------------------------------------- 4

fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut twice, mut pairs) = (0u64, 0u64);
    for (&si, _) in scores.iter().zip(labels).filter(|(_, &l)| l == 1) {
        for (&sj, _) in scores.iter().zip(labels).filter(|(_, &l)| l == 0) {
            pairs += 1;
            twice += if si > sj { 2 } else if si == sj { 1 } else { 0 };
        }
    }
    twice as f64 / (2 * pairs) as f64
}

fn criterion_4() -> Verdict {
    let mut rng = seeded(4);
    let (mut sets, mut auc_ok, mut identities_ok) = (0, true, true);
    while sets < 1_000 {
        let n = rng.random_range(2..=200);
        let levels = rng.random_range(2..=25);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..=levels) as f64 / levels as f64).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        if !(labels.contains(&0) && labels.contains(&1)) {
            continue;
        }
        sets += 1;
        auc_ok &= roc_auc(&scores, &labels).unwrap() == pairwise_auc(&scores, &labels);
        let m = binary_metrics(&scores, &labels, 0.5).unwrap();
        let c = m.confusion.unwrap();
        let div = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let f1 = if m.precision + m.recall == 0.0 { 0.0 } else { 2.0 * m.precision * m.recall / (m.precision + m.recall) };
        identities_ok &= c.total() == n as u64
            && m.accuracy == div(c.tp + c.tn, c.total())
            && m.precision == div(c.tp, c.tp + c.fp)
            && m.recall == div(c.tp, c.tp + c.fn_)
            && m.f1 == f1
            && m.validate().is_ok();
    }
    let row = r#"{"Accuracy": 0.9583, "F1 Score": 0.9586, "Precision": 0.9604, "Recall": 0.9567, "AUC": 0.9807}"#;
    let parsed = serde_json::from_str::<MetricsReport>(row).map(|m| m.validate().is_ok()).unwrap_or(false);
    verdict(
        auc_ok && identities_ok && parsed,
        format!("auc exact on {sets} sets: {auc_ok}, identities: {identities_ok}, reference row valid: {parsed}"),
    )
}

// ---------------------------------------------------------------- 5

fn records(prefix: &str, n: usize, source: Source) -> Vec<Record> {
    (0..n)
        .map(|i| Record {
            id: format!("{prefix}{i}"),
            path: String::new(),
            label: source.label(),
            source,
            split: Split::Train,
        })
        .collect()
}

fn criterion_5() -> Verdict {
    let start = Instant::now();
    let mut recs = records("r", 42_690, Source::RealOrig);
    recs.extend(records("a", 21_335, Source::RealOfflineAug));
    recs.extend(records("f", 219_470, Source::FakeMethod(1)));
    recs.extend(records("g", 12_200, Source::FakeGenerated));
    let manifest = DatasetManifest::new("", recs);
    let plan = partition_fakes(&manifest, 3, 42).unwrap();
    let fakes: Vec<String> = (0..219_470).map(|i| format!("f{i}")).collect();

    let mut seen = HashSet::new();
    let disjoint = plan.subsets.iter().flatten().all(|id| seen.insert(id.as_str()));
    let covering = seen.len() == fakes.len() && fakes.iter().all(|f| seen.contains(f.as_str()));
    let sizes: Vec<usize> = plan.subsets.iter().map(Vec::len).collect();
    let skew = sizes.iter().max().unwrap() - sizes.iter().min().unwrap();

    let mut reals = Vec::new();
    let mut fake_counts = Vec::new();
    for m in 0..3 {
        let (rs, c) = build_model_trainset(&manifest, &plan, m).unwrap();
        assert_eq!(rs.len(), c.real + c.fake);
        reals.push(c.real);
        fake_counts.push(c.fake);
    }
    let secs = start.elapsed().as_secs_f64();
    let mut sorted = fake_counts.clone();
    sorted.sort_unstable();
    verdict(
        reals == [64_025; 3] && sorted == [85_356, 85_357, 85_357] && disjoint && covering && skew <= 1 && secs < 5.0,
        format!("reals {reals:?}, fakes {fake_counts:?}, disjoint {disjoint}, covering {covering}, skew {skew}, {secs:.2} s"),
    )
}

// ---------------------------------------------------------------- 6 and 9

struct Desk {
    _dir: tempfile::TempDir,
    cfg: RunConfig,
    corpus: Corpus,
    stage1: Vec<(TrainOutput, f64)>,
}

fn model_train(corpus: &Corpus, index: usize) -> Dataset {
    let (records, _) = build_model_trainset(&corpus.manifest, &corpus.plan, index).unwrap();
    let ids: HashSet<&str> = records.iter().map(|r| r.id.as_str()).collect();
    corpus.train.subset(&ids)
}

fn desk_benchmark() -> Desk {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        seed: 42,
        out_dir: dir.path().to_path_buf(),
        ..RunConfig::default()
    };
    synth(&cfg, 1).unwrap();
    augment_offline(&cfg).unwrap();
    partition(&cfg).unwrap();
    let corpus = Corpus::load(&Layout::new(&cfg.out_dir)).unwrap();
    let stage1 = (0..cfg.backbones.len())
        .map(|i| {
            let start = Instant::now();
            let out = train_stage1(&model_train(&corpus, i), &corpus.val, &cfg.backbone_spec(i), &cfg.stage1_config(i))
                .unwrap();
            (out, start.elapsed().as_secs_f64())
        })
        .collect();
    Desk {
        _dir: dir,
        cfg,
        corpus,
        stage1,
    }
}

fn silhouette(model: &Model, val: &Dataset) -> f64 {
    silhouette_score(&embed(model, val).unwrap(), &val.labels(), 2000, 42).unwrap()
}

fn criterion_6a(desk: &Desk) -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    for (i, (out, secs)) in desk.stage1.iter().enumerate() {
        let spec = desk.cfg.backbone_spec(i);
        let before = silhouette(&init_backbone(&spec, out.checkpoint.config.seed).unwrap(), &desk.corpus.val);
        let after = silhouette(&out.checkpoint.backbone, &desk.corpus.val);
        ok &= after - before >= 0.2 && *secs < 300.0;
        parts.push(format!("{} {before:+.3} -> {after:+.3} in {secs:.0} s", spec.name.name()));
    }
    verdict(ok, parts.join(", "))
}

fn train_losses(out: &TrainOutput) -> Vec<f64> {
    out.checkpoint.log.iter().filter(|e| e.split == "train").map(|e| e.loss).collect()
}

fn criterion_6b(desk: &Desk) -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    for (i, (out, _)) in desk.stage1.iter().enumerate() {
        let losses = train_losses(out);
        let ratio = losses.last().unwrap() / losses[0];
        ok &= ratio < 0.5;
        parts.push(format!("{} {:.3} -> {:.3} (ratio {ratio:.2})", desk.cfg.backbones[i].kind.name(), losses[0], losses.last().unwrap()));
    }
    verdict(ok, parts.join(", "))
}

fn criterion_9(desk: &Desk) -> Verdict {
    let cfg = &desk.cfg;
    let i = cfg.ablation_index().unwrap();
    let train = model_train(&desk.corpus, i);
    let s1 = &desk.stage1[i].0.checkpoint;
    let before: Vec<Tensor> = s1.backbone.params().into_iter().cloned().collect();
    let s2 = train_stage2(s1, &train, &desk.corpus.val, &cfg.stage2.head, &cfg.stage2_config(i)).unwrap().checkpoint;
    let after: Vec<Tensor> = s2.backbone.params().into_iter().cloned().collect();
    let frozen = before == after && backbone_hash(&s2.backbone) == s1.backbone_sha256;

    let round_trip = |c: &ModelCheckpoint| {
        let bytes = c.to_bytes();
        let again = ModelCheckpoint::from_bytes(&bytes).unwrap();
        again == *c && again.to_bytes() == bytes
    };
    let bytes_ok = round_trip(s1) && round_trip(&s2);

    let rerun1 = train_stage1(&train, &desk.corpus.val, &cfg.backbone_spec(i), &cfg.stage1_config(i)).unwrap().checkpoint;
    let rerun2 = train_stage2(&rerun1, &train, &desk.corpus.val, &cfg.stage2.head, &cfg.stage2_config(i)).unwrap().checkpoint;
    let logs_ok = rerun1.log == s1.log && rerun2.log == s2.log && rerun2.to_bytes() == s2.to_bytes();
    verdict(
        frozen && bytes_ok && logs_ok,
        format!("backbone frozen: {frozen}, save/load/save identical: {bytes_ok}, rerun logs identical: {logs_ok}"),
    )
}

// ---------------------------------------------------------------- 7

fn criterion_7(root: &Path) -> Verdict {
    let mut wins = 0;
    let mut ok = true;
    let mut lines = Vec::new();
    let mut first = None;
    for seed in 0..10u64 {
        let cfg = RunConfig {
            seed,
            out_dir: root.join(format!("seed-{seed}")),
            ..RunConfig::default()
        };
        let start = Instant::now();
        let outcome = run_recipe(&cfg, 1).unwrap();
        let secs = start.elapsed().as_secs_f64();
        let best = outcome.best_model_accuracy();
        let ens = outcome.ensemble.accuracy;
        if ens >= best - 0.01 {
            wins += 1;
        }
        ok &= ens >= 0.85 && secs < 600.0;
        lines.push(format!("seed {seed}: ens {ens:.4} best {best:.4} {secs:.0} s"));
        if seed == 0 {
            first = Some(outcome);
        }
    }
    let cfg = RunConfig {
        seed: 0,
        out_dir: root.join("seed-0-rerun"),
        ..RunConfig::default()
    };
    let again = run_recipe(&cfg, 1).unwrap();
    let first = first.unwrap();
    let deterministic = again.ensemble == first.ensemble
        && again.models.iter().zip(&first.models).all(|(a, b)| {
            a.predictions == b.predictions && a.stage1.log == b.stage1.log && a.stage2.log == b.stage2.log
        });
    verdict(
        ok && wins >= 7 && deterministic,
        format!("ensemble >= best - 0.01 in {wins}/10, rerun identical: {deterministic}; {}", lines.join("; ")),
    )
}

// ---------------------------------------------------------------- 8

fn criterion_8(root: &Path) -> Verdict {
    let cfg = RunConfig {
        out_dir: root.to_path_buf(),
        ..RunConfig::default()
    };
    let start = Instant::now();
    let table = ablate(&cfg, 1).unwrap();
    let secs = start.elapsed().as_secs_f64();
    println!("{}", table.to_text());
    let acc = |v| table.row(v).map(|r| r.mean.accuracy).unwrap_or(f64::NAN);
    let full = acc(AblationVariant::Full);
    let bce = acc(AblationVariant::BceInsteadSupcon);
    verdict(
        table.rows.len() == 4 && table.seeds.len() == 5 && full >= bce - 0.005 && secs < 1800.0,
        format!("{} rows over {} seeds, full {full:.4} vs bce {bce:.4}, {secs:.0} s", table.rows.len(), table.seeds.len()),
    )
}

// ----------------------------------------------------------------

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |id: &str| filters.is_empty() || filters.iter().any(|f| id.contains(f.as_str()));
    let mut desk: Option<Desk> = None;
    let mut failed = Vec::new();

    let ids = ["1", "2", "3", "4", "5", "6a", "6b", "7", "8", "9"];
    for id in ids {
        if !wanted(id) {
            continue;
        }
        let (title, v) = match id {
            "1" => ("loss oracle equivalence", criterion_1()),
            "2" => ("gradient checks", criterion_2()),
            "3" => ("ensemble rule", criterion_3()),
            "4" => ("metrics oracles", criterion_4()),
            "5" => ("sampling arithmetic", criterion_5()),
            "6a" | "6b" | "9" => {
                let d = desk.get_or_insert_with(desk_benchmark);
                match id {
                    "6a" => ("silhouette gain >= 0.2 after stage 1", criterion_6a(d)),
                    "6b" => ("final stage-1 loss < 50% of epoch 1", criterion_6b(d)),
                    _ => ("freeze and round trip", criterion_9(d)),
                }
            }
            "7" => {
                let dir = tempfile::tempdir().unwrap();
                ("end-to-end benchmark over 10 seeds", criterion_7(dir.path()))
            }
            _ => {
                let dir = tempfile::tempdir().unwrap();
                ("ablation harness", criterion_8(dir.path()))
            }
        };
        let mark = if v.passed { "PASS" } else { "FAIL" };
        println!("criterion {id:<3} {mark}  {title}: {}", v.detail);
        if !v.passed {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {}", failed.join(", "));
        std::process::exit(1);
    }
}
