//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line
//! to stderr (bypassing the test harness capture); the test fails if any
//! criterion fails. Set `ACCEPTANCE_ONLY=2,5` to run a subset.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use coformer::app::{
    evaluate, load_checkpoint, run_gradcheck, save_checkpoint, sweep, tiny_observations, train,
    write_sweep_csv, RunConfig, SweepParam,
};
use coformer::data::{
    generate_synthetic, Dataset, Observation, Sample, SyntheticConfig, VariateSeries,
};
use coformer::encoder::{encode_time, Encoder};
use coformer::metrics::{auprc, auroc, multiclass_metrics};
use coformer::model::{Model, ModelConfig};
use coformer::neighbors::{brute_force_inter, NeighborIndex, NeighborQuery};
use coformer::nn::{finite_difference_gradcheck, softmax, GradCheckOptions};
use coformer::parallel::Execution;

type Criterion = (usize, &'static str, fn() -> Verdict);

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn announce(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

fn selected(n: usize) -> bool {
    match std::env::var("ACCEPTANCE_ONLY") {
        Ok(list) => list.split(',').any(|s| s.trim() == n.to_string()),
        Err(_) => true,
    }
}

fn run(n: usize, title: &str, check: fn() -> Verdict) -> Option<bool> {
    if !selected(n) {
        return None;
    }
    let start = Instant::now();
    let v = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        verdict(false, format!("panicked: {msg}"))
    });
    announce(&format!(
        "criterion {n} [{}] {title}: {} ({:.1}s)",
        if v.pass { "PASS" } else { "FAIL" },
        v.detail,
        start.elapsed().as_secs_f64()
    ));
    Some(v.pass)
}

fn within(elapsed: Duration, limit_secs: u64) -> bool {
    elapsed <= Duration::from_secs(limit_secs)
}

/// Model scaled to width 64 for the synthetic task.
fn width_64(n_variates: usize) -> RunConfig {
    let mut cfg = RunConfig::with_seed(1);
    cfg.encoder.time_dim = 64;
    cfg.encoder.variate_dim = 8;
    cfg.encoder.linear_dim = 56;
    cfg.encoder.embed_dim = 64;
    cfg.encoder.mlp_hidden = 64;
    cfg.head.classifier_hidden = 64;
    cfg.data.synthetic = Some(phase_task(500, n_variates, 0));
    cfg
}

fn phase_task(n_obs: usize, n_variates: usize, seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        n_obs,
        n_variates,
        n_classes: 2,
        duration: 10.0,
        mean_samples: 20.0,
        noise_std: 0.1,
        seed,
        frequency: 2.0 * std::f64::consts::PI / 20.0,
    }
}

fn model_config(cfg: &RunConfig, n_variates: usize) -> ModelConfig {
    cfg.model_config(&coformer::data::DatasetMeta {
        n_variates,
        n_classes: 2,
        static_dim: 0,
    })
}

// 1: published benchmark figures rely on restricted clinical data and
// full-scale training, so they are replaced by the checks below.
fn desk_scale_statement() -> Verdict {
    verdict(
        true,
        "benchmark table figures are not reproduced at desk scale; criteria 2-9 substitute",
    )
}

fn gradient_correctness() -> Verdict {
    let start = Instant::now();
    let report = run_gradcheck(0, &GradCheckOptions::default()).expect("gradcheck runs");
    let elapsed = start.elapsed();

    // negative control: a corrupted analytic gradient must be caught
    let model = Model::new(ModelConfig::tiny(), 0).unwrap();
    let batch = tiny_observations(0, 4);
    let refs: Vec<&Observation> = batch.iter().collect();
    let (_, mut grads) = model
        .batch_loss_and_grad(&refs, Execution::Sequential)
        .unwrap();
    grads.scale(1.5);
    let loss = |p: &coformer::nn::ParameterStore| {
        Model::from_parts(model.config.clone(), p.clone())
            .unwrap()
            .batch_loss(&refs, Execution::Sequential)
            .unwrap()
    };
    let broken = finite_difference_gradcheck(
        loss,
        &model.params,
        &grads,
        &GradCheckOptions {
            max_coords_per_param: Some(2),
            ..Default::default()
        },
    );
    let worst = report
        .worst
        .as_ref()
        .map(|c| c.param.as_str())
        .unwrap_or("-");
    verdict(
        report.passed() && !broken.passed() && within(elapsed, 60),
        format!(
            "max rel err {:.2e} over {} coords (worst {worst}, {} kinks skipped), corrupted gradient rel err {:.2e}",
            report.max_rel_err,
            report.checked,
            report.skipped.len(),
            broken.max_rel_err
        ),
    )
}

fn ragged_observation(rng: &mut ChaCha8Rng) -> Observation {
    let n = rng.random_range(1..=6);
    let variates = (0..n)
        .map(|_| {
            let len = rng.random_range(0..=40);
            VariateSeries::new(
                (0..len)
                    .map(|_| {
                        // a coarse grid forces ties within and across variates
                        let timestamp = if rng.random_bool(0.5) {
                            rng.random_range(0..10) as f64 * 0.5
                        } else {
                            rng.random_range(0.0..5.0)
                        };
                        Sample {
                            timestamp,
                            value: rng.random_range(-1.0..1.0),
                        }
                    })
                    .collect(),
            )
        })
        .collect();
    Observation {
        id: "ragged".into(),
        variates,
        label: 0,
        static_features: None,
    }
}

fn neighbor_oracle() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let queries: Vec<NeighborQuery> = [1, 3, 7, 30]
        .into_iter()
        .map(NeighborQuery::Knn)
        .chain(
            [0.0, 0.5, 2.5, 1e300]
                .into_iter()
                .map(NeighborQuery::Radius),
        )
        .collect();
    let (mut total, mut mismatches) = (0usize, 0usize);
    for _ in 0..1000 {
        let obs = ragged_observation(&mut rng);
        let index = NeighborIndex::build(&obs);
        for p in obs.points() {
            for &q in &queries {
                total += 1;
                if index.inter(&p, q).unwrap() != brute_force_inter(&obs, &p, q) {
                    mismatches += 1;
                }
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(
        mismatches == 0 && within(elapsed, 30),
        format!("{mismatches} mismatches in {total} queries"),
    )
}

fn synchronized_observation(n_variates: usize, times: &[f64], phase: f64) -> Observation {
    let syn = phase_task(1, n_variates, 0);
    Observation {
        id: "sync".into(),
        variates: (0..n_variates)
            .map(|v| {
                VariateSeries::new(
                    times
                        .iter()
                        .map(|&t| Sample {
                            timestamp: t,
                            value: syn.signal(1, phase, v, t),
                        })
                        .collect(),
                )
            })
            .collect(),
        label: 1,
        static_features: None,
    }
}

fn regular_degeneracy() -> Verdict {
    let n = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut cfg = width_64(n);
    cfg.encoder.neighbors = NeighborQuery::Radius(0.0);
    let radius = model_config(&cfg, n);
    let mut knn = radius.clone();
    knn.encoder.neighbors = NeighborQuery::Knn(n - 1);
    let params = radius.init_params(5).unwrap();
    let (mut sets_ok, mut outputs_ok) = (true, true);
    for _ in 0..10 {
        let mut times: Vec<f64> = (0..20).map(|_| rng.random_range(0.0..10.0)).collect();
        times.sort_by(f64::total_cmp);
        let obs = synchronized_observation(n, &times, rng.random_range(0.0..6.0));
        let index = NeighborIndex::build(&obs);
        for p in obs.points() {
            let set = index.inter_radius(&p, 0.0).unwrap();
            let expected: Vec<_> = (0..n).filter(|&v| v != p.variate).collect();
            let got: Vec<_> = set.iter().map(|q| q.variate).collect();
            sets_ok &= got == expected && set.iter().all(|q| q.timestamp == p.timestamp);
        }
        let a = Encoder::new(&radius.encoder, n, &params)
            .encode_batched(&obs, &index)
            .unwrap();
        let b = Encoder::new(&knn.encoder, n, &params)
            .encode_batched(&obs, &index)
            .unwrap();
        let c = Encoder::new(&radius.encoder, n, &params)
            .encode_observation(&obs, &index)
            .unwrap();
        let d = Encoder::new(&knn.encoder, n, &params)
            .encode_observation(&obs, &index)
            .unwrap();
        outputs_ok &= a.features == b.features && c.features == d.features;
    }
    verdict(
        sets_ok && outputs_ok,
        format!("radius 0 sets are the co-timestamp points: {sets_ok}; radius 0 and knn N-1 encodings bit-identical: {outputs_ok}"),
    )
}

fn invariance_suite() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut pair_err: f64 = 0.0;
    for _ in 0..10_000 {
        let t = rng.random_range(0.0..1e4);
        let psi = 2 * rng.random_range(1..=128);
        for pair in encode_time(t, psi).unwrap().chunks(2) {
            pair_err = pair_err.max((pair[0] * pair[0] + pair[1] * pair[1] - 1.0).abs());
        }
    }
    let mut softmax_err: f64 = 0.0;
    for _ in 0..10_000 {
        let len = rng.random_range(1..=32);
        let scale = rng.random_range(0.1..100.0);
        let z: Vec<f64> = (0..len).map(|_| rng.random_range(-scale..scale)).collect();
        softmax_err = softmax_err.max((softmax(&z).iter().sum::<f64>() - 1.0).abs());
    }

    let n = 4;
    let mut cfg = width_64(n);
    cfg.encoder.layers = 2;
    cfg.encoder.neighbors = NeighborQuery::Knn(5);
    let config = model_config(&cfg, n);
    let model = Model::new(config.clone(), 6).unwrap();
    let data = generate_synthetic(&phase_task(20, n, 6)).unwrap();
    let (mut permutations, mut identical) = (0, 0);
    for obs in &data.observations {
        let base_index = NeighborIndex::build(obs);
        let encoder = Encoder::new(&config.encoder, n, &model.params);
        let base = encoder.encode_batched(obs, &base_index).unwrap();
        let base_ref = encoder.encode_observation(obs, &base_index).unwrap();
        let base_loss = model.observation_loss(obs).unwrap();
        for k in 0..100 {
            let mut shuffled = obs.clone();
            for v in &mut shuffled.variates {
                use rand::seq::SliceRandom;
                v.samples.shuffle(&mut rng);
            }
            let index = NeighborIndex::build(&shuffled);
            let mut same = encoder.encode_batched(&shuffled, &index).unwrap().features
                == base.features
                && model.observation_loss(&shuffled).unwrap() == base_loss;
            if k < 5 {
                same &= encoder
                    .encode_observation(&shuffled, &index)
                    .unwrap()
                    .features
                    == base_ref.features;
            }
            permutations += 1;
            identical += same as usize;
        }
    }
    verdict(
        pair_err <= 1e-12 && softmax_err <= 1e-12 && identical == permutations,
        format!(
            "time-code pair error {pair_err:.1e}, softmax sum error {softmax_err:.1e}, {identical}/{permutations} permutations bit-identical"
        ),
    )
}

fn phase_task_splits() -> (Dataset, Dataset, Dataset) {
    let data = generate_synthetic(&phase_task(500, 4, 0)).unwrap();
    let range = |a: usize, b: usize| data.subset(&(a..b).collect::<Vec<_>>());
    (range(0, 400), range(400, 450), range(450, 500))
}

fn synthetic_end_to_end() -> Verdict {
    let start = Instant::now();
    let (train_set, val, test) = phase_task_splits();
    let mut cfg = width_64(4);
    let mut accuracy = [0.0; 2];
    for (slot, zero) in [false, true].into_iter().enumerate() {
        cfg.encoder.zero_time_code = zero;
        let outcome = train(&cfg, &train_set, &val, |_| {}).unwrap();
        accuracy[slot] = evaluate(&outcome.best, &test, Execution::Parallel)
            .unwrap()
            .accuracy;
    }
    let elapsed = start.elapsed();
    verdict(
        accuracy[0] >= 0.90 && accuracy[1] <= 0.65 && within(elapsed, 600),
        format!(
            "test accuracy {:.3} with time code (target >= 0.90), {:.3} with time code zeroed (target <= 0.65)",
            accuracy[0], accuracy[1]
        ),
    )
}

fn metrics_oracles() -> Verdict {
    let labels = [true, true, false, false];
    let pairwise = auroc(&[0.8, 0.4, 0.6, 0.2], &labels).unwrap() == 0.75;
    let tied = auroc(&[0.3; 4], &labels).unwrap() == 0.5;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut constant_ok = true;
    let mut trace_ok = true;
    for _ in 0..1000 {
        let len = rng.random_range(1..60);
        let truth: Vec<bool> = (0..len).map(|_| rng.random_bool(0.4)).collect();
        let pos = truth.iter().filter(|&&t| t).count();
        if pos > 0 {
            let ap = auprc(&vec![0.5; len], &truth).unwrap();
            constant_ok &= (ap - pos as f64 / len as f64).abs() < 1e-12;
        }
        let c = rng.random_range(2..9);
        let preds: Vec<usize> = (0..len).map(|_| rng.random_range(0..c)).collect();
        let actual: Vec<usize> = (0..len).map(|_| rng.random_range(0..c)).collect();
        let r = multiclass_metrics(&preds, &actual, c).unwrap();
        let trace: usize = (0..c).map(|i| r.confusion[i][i]).sum();
        trace_ok &= trace as f64 / len as f64 == r.accuracy;
    }
    verdict(
        pairwise && tied && constant_ok && trace_ok,
        format!("pairwise 0.75: {pairwise}; ties 0.5: {tied}; constant AUPRC = positive rate: {constant_ok}; trace/total = accuracy: {trace_ok}"),
    )
}

fn persistence_and_determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_synthetic(&phase_task(60, 3, 8)).unwrap();
    let train_set = data.subset(&(0..40).collect::<Vec<_>>());
    let val = data.subset(&(40..60).collect::<Vec<_>>());
    let mut cfg = RunConfig::with_seed(9);
    let tiny = ModelConfig::tiny();
    cfg.encoder = tiny.encoder;
    cfg.head = tiny.head;
    cfg.training.epochs = 3;
    cfg.training.batch_size = 16;
    cfg.training.adam.lr = 1e-3;
    let a = train(&cfg, &train_set, &val, |_| {}).unwrap();
    let b = train(&cfg, &train_set, &val, |_| {}).unwrap();
    let logs_equal = a.log == b.log;

    let first = dir.path().join("a.ckpt");
    let second = dir.path().join("b.ckpt");
    save_checkpoint(&a.best, &first).unwrap();
    let loaded = load_checkpoint(&first).unwrap();
    save_checkpoint(&loaded.model, &second).unwrap();
    let bytes_equal = std::fs::read(&first).unwrap() == std::fs::read(&second).unwrap();
    let in_memory = evaluate(&a.best, &val, Execution::Parallel).unwrap();
    let from_disk = evaluate(&loaded.model, &val, Execution::Sequential).unwrap();
    let metrics_equal = in_memory == from_disk;
    verdict(
        logs_equal && bytes_equal && metrics_equal,
        format!("identical logs: {logs_equal}; save-load-save byte-identical: {bytes_equal}; reloaded metrics bit-exact: {metrics_equal}"),
    )
}

fn ablation_harness() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_synthetic(&phase_task(80, 3, 10)).unwrap();
    let mut cfg = RunConfig::with_seed(11);
    let tiny = ModelConfig::tiny();
    cfg.encoder = tiny.encoder;
    cfg.head = tiny.head;
    cfg.training.epochs = 2;
    cfg.training.batch_size = 16;
    cfg.training.adam.lr = 1e-3;
    let mut well_formed = true;
    let mut trends = Vec::new();
    for (param, values) in [
        (SweepParam::Neighbors, vec![1, 4, 16]),
        (SweepParam::Layers, vec![1, 2]),
    ] {
        let rows = sweep(&cfg, &data, param, &values, |_| {}).unwrap();
        let path = dir.path().join(format!("{}.csv", param.name()));
        write_sweep_csv(std::fs::File::create(&path).unwrap(), &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let header = reader.headers().unwrap().clone();
        well_formed &= header.iter().take(3).eq(["param", "value", "split"]);
        let records: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
        well_formed &= records.len() == values.len() * 7;
        for (i, &v) in values.iter().enumerate() {
            let block = &records[i * 7..(i + 1) * 7];
            let splits: Vec<&str> = block.iter().map(|r| &r[2]).collect();
            well_formed &= splits == ["0", "1", "2", "3", "4", "mean", "std"];
            well_formed &= block
                .iter()
                .all(|r| r[1] == v.to_string() && r[0] == *param.name());
            well_formed &= block
                .iter()
                .all(|r| r.len() == header.len() && r[4].parse::<f64>().is_ok());
            trends.push(format!("{}={v}: {}", param.name(), &block[5][4]));
        }
    }
    verdict(
        well_formed,
        format!("mean test accuracy {}", trends.join(", ")),
    )
}

#[test]
fn acceptance_suite() {
    let criteria: [Criterion; 9] = [
        (1, "desk-scale substitution", desk_scale_statement),
        (2, "gradient correctness", gradient_correctness),
        (3, "neighbor oracle equivalence", neighbor_oracle),
        (4, "regular-data degeneracy", regular_degeneracy),
        (5, "invariances", invariance_suite),
        (6, "synthetic end-to-end", synthetic_end_to_end),
        (7, "metric oracles", metrics_oracles),
        (
            8,
            "persistence and determinism",
            persistence_and_determinism,
        ),
        (9, "ablation harness", ablation_harness),
    ];
    let results: Vec<(usize, bool)> = criteria
        .iter()
        .filter_map(|&(n, title, check)| run(n, title, check).map(|pass| (n, pass)))
        .collect();
    let failed: Vec<usize> = results.iter().filter(|r| !r.1).map(|r| r.0).collect();
    announce(&format!(
        "acceptance: {}/{} criteria passed",
        results.len() - failed.len(),
        results.len()
    ));
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
