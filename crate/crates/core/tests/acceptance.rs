//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs with `cargo test -p uavtype-core --test acceptance`. Exits non-zero
//! if any criterion fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use uavtype_core::config::{DataSource, RunConfig};
use uavtype_core::eval::{baseline_scores, class_metrics, f_score, macro_f, ConfusionMatrix};
use uavtype_core::features::RawSeries;
use uavtype_core::lstm::{backward, batch_loss, forward, forward_batch, loss, Network};
use uavtype_core::pipeline::{load_corpus, run_single, write_outputs};
use uavtype_core::rebalance::{
    assert_test_fold_purity, oversample_target, rebalance, undersample_target, BalanceConfig, BalanceMethod, Split,
};
use uavtype_core::report::TrialReport;
use uavtype_core::resample::{average_sample, fixed_window_sample, Binned};
use uavtype_core::synth::{generate_flight, write_ulog, CorpusProfile, SynthSpec};
use uavtype_core::train::TrainConfig;
use uavtype_core::ulog::{parse_ulog_with, UlogError, VehicleTypeTable, ULOG_MAGIC};
use uavtype_core::{Dataset, SampledInstance, SamplingConfig, VehicleType};

type Outcome = Result<String, String>;

type Criterion<'a> = (&'static str, Duration, Box<dyn Fn() -> Outcome + 'a>);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- 1

fn metric_replay() -> Outcome {
    let pooled = ConfusionMatrix([[12742, 56, 83], [124, 278, 10], [214, 15, 118]]);
    let m = class_metrics(&pooled);
    let p = m[0].precision * 100.0;
    let r = m[0].recall * 100.0;
    check((p - 97.42).abs() <= 0.005, || format!("quadrotor precision {p:.4}"))?;
    check((r - 98.92).abs() <= 0.005, || format!("quadrotor recall {r:.4}"))?;
    let mf = macro_f(&[98.16, 73.15, 42.15]);
    check(format!("{mf:.2}") == "71.15", || format!("macro F {mf}"))?;
    Ok(format!("precision {p:.3}%, recall {r:.3}%, macro {mf:.2}"))
}

// ---------------------------------------------------------------- 2

fn baselines() -> Outcome {
    let b = baseline_scores([26706, 1324, 1332]);
    let maj = b.majority_macro_f * 100.0;
    let uni = b.uniform_macro_f * 100.0;
    check((31.0..=32.5).contains(&maj), || format!("majority {maj:.2}%"))?;
    check((20.0..=22.5).contains(&uni), || format!("uniform {uni:.2}%"))?;
    // independent closed form
    let total = (26706 + 1324 + 1332) as f64;
    let q = 26706.0 / total;
    let maj_oracle = f_score(q, 1.0) / 3.0;
    let uni_oracle = [26706.0, 1324.0, 1332.0]
        .iter()
        .map(|c| {
            let p = c / total;
            2.0 * p / 3.0 / (p + 1.0 / 3.0)
        })
        .sum::<f64>()
        / 3.0;
    check((b.majority_macro_f - maj_oracle).abs() < 1e-12, || "majority oracle mismatch".into())?;
    check((b.uniform_macro_f - uni_oracle).abs() < 1e-12, || "uniform oracle mismatch".into())?;
    Ok(format!("majority {maj:.2}%, uniform {uni:.2}%"))
}

// ---------------------------------------------------------------- 3

fn gradient_suite() -> Outcome {
    let (h, f, t) = (4, 3, 7);
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    for config in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + config);
        let mut net = Network::init(f, h, &mut rng);
        // spread the weights so the gates leave their linear regime
        let spread = rng.random_range(0.5..2.5);
        net.scale(spread);
        for v in net.lstm.bias.iter_mut().chain(net.head.bias.iter_mut()) {
            *v += rng.random_range(-0.5..0.5);
        }
        let x = Array2::from_shape_fn((t, f), |_| rng.random_range(-2.0..2.0));
        let label = rng.random_range(0..3);
        let objective = |n: &Network| {
            let (z, _) = forward(n, x.view()).unwrap();
            loss(z.as_slice().unwrap(), label).unwrap().0
        };
        let (z, cache) = forward_batch(&net, &[x.view()]).map_err(|e| e.to_string())?;
        let (_, d) = batch_loss(&z, &[label]).map_err(|e| e.to_string())?;
        let analytic = backward(&net, &cache, &d).map_err(|e| e.to_string())?;
        for (ti, tensor) in analytic.slices().iter().enumerate() {
            for k in 0..tensor.len() {
                let mut plus = net.clone();
                plus.slices_mut()[ti][k] += step;
                let mut minus = net.clone();
                minus.slices_mut()[ti][k] -= step;
                let numeric = (objective(&plus) - objective(&minus)) / (2.0 * step);
                let a = tensor[k];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(rel);
                check(rel <= 1e-4, || {
                    format!("config {config}, tensor {ti}, entry {k}: analytic {a}, numeric {numeric}")
                })?;
            }
        }
    }
    Ok(format!("20 configs, max relative error {worst:.2e}"))
}

// ---------------------------------------------------------------- 4

/// Bin index by scanning every bin for `lo(b) <= t < lo(b+1)`, last bin
/// closed.
fn oracle_bin(t: f64, t_min: f64, width: f64, n: usize) -> Option<usize> {
    let lo = |b: usize| t_min + b as f64 * width;
    (0..n).find(|&b| t >= lo(b) && (t < lo(b + 1) || b == n - 1))
}

fn oracle_sample(series: &[RawSeries], n: usize, window_us: Option<f64>) -> (Vec<Vec<f64>>, Vec<Vec<u32>>) {
    let t_min = series.iter().filter_map(|s| s.timestamps.first()).min().copied().unwrap() as f64;
    let t_max = series.iter().filter_map(|s| s.timestamps.last()).max().copied().unwrap() as f64;
    let width = (t_max - t_min) / n as f64;
    let mut values = vec![vec![0.0; series.len()]; n];
    let mut counts = vec![vec![0u32; series.len()]; n];
    for (f, s) in series.iter().enumerate() {
        for (&t, &v) in s.timestamps.iter().zip(&s.values) {
            let t = t as f64;
            if t > t_max {
                continue;
            }
            let Some(b) = oracle_bin(t, t_min, width, n) else { continue };
            if let Some(w) = window_us {
                if w < width && t > t_min + b as f64 * width + w {
                    continue;
                }
            }
            values[b][f] += v;
            counts[b][f] += 1;
        }
    }
    for b in 0..n {
        for f in 0..series.len() {
            if counts[b][f] > 0 {
                values[b][f] /= counts[b][f] as f64;
            }
        }
    }
    (values, counts)
}

fn same(binned: &Binned, oracle: &(Vec<Vec<f64>>, Vec<Vec<u32>>)) -> bool {
    binned.values.indexed_iter().all(|((b, f), &v)| v.to_bits() == oracle.0[b][f].to_bits())
        && binned.counts.indexed_iter().all(|((b, f), &c)| c == oracle.1[b][f])
}

fn random_flight(rng: &mut ChaCha8Rng) -> Vec<RawSeries> {
    let n_features = rng.random_range(1..5);
    let start: u64 = rng.random_range(0..5_000_000);
    (0..n_features)
        .map(|_| {
            let n = rng.random_range(0..60);
            let mut t = start + rng.random_range(0..2_000_000);
            let mut ts = Vec::new();
            for _ in 0..n {
                t += rng.random_range(1..900_000);
                ts.push(t);
            }
            let vs = ts.iter().map(|_| rng.random_range(-100.0..100.0)).collect();
            RawSeries::new(ts, vs)
        })
        .collect()
}

fn sampling_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut checked = 0;
    while checked < 100 {
        let flight = random_flight(&mut rng);
        let nonempty = flight.iter().filter(|s| !s.timestamps.is_empty()).count();
        let distinct: std::collections::BTreeSet<u64> = flight.iter().flat_map(|s| s.timestamps.clone()).collect();
        if nonempty == 0 || distinct.len() < 2 {
            continue;
        }
        checked += 1;
        let n = rng.random_range(1..30);
        let avg = average_sample(&flight, n).map_err(|e| e.to_string())?;
        check(same(&avg, &oracle_sample(&flight, n, None)), || format!("average mismatch on flight {checked}"))?;
        let window_s = rng.random_range(0.05..3.0);
        let fw = fixed_window_sample(&flight, n, window_s).map_err(|e| e.to_string())?;
        check(same(&fw, &oracle_sample(&flight, n, Some(window_s * 1e6))), || {
            format!("fixed-window mismatch on flight {checked}")
        })?;
        // window equal to the bin width reproduces average sampling bitwise
        let t_min = flight.iter().filter_map(|s| s.timestamps.first()).min().unwrap();
        let t_max = flight.iter().filter_map(|s| s.timestamps.last()).max().unwrap();
        let width_s = (*t_max - *t_min) as f64 / n as f64 / 1e6;
        let eq = fixed_window_sample(&flight, n, width_s).map_err(|e| e.to_string())?;
        let bitwise = eq.values.iter().zip(avg.values.iter()).all(|(a, b)| a.to_bits() == b.to_bits())
            && eq.counts == avg.counts;
        check(bitwise, || format!("window = width differs from average on flight {checked}"))?;
    }
    Ok("100 flights match the brute-force oracle; window = width is bitwise average".into())
}

// ---------------------------------------------------------------- 5

fn balance_dataset() -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut ds = Dataset::new(vec!["a".into(), "b".into(), "c".into()], SamplingConfig::average(6));
    for (label, n) in [
        (VehicleType::Quadrotor, 120),
        (VehicleType::FixedWing, 17),
        (VehicleType::Hexarotor, 23),
    ] {
        for i in 0..n {
            ds.instances.push(SampledInstance {
                values: Array2::from_shape_fn((6, 3), |_| rng.random_range(-2.0..2.0)),
                observed: Array2::from_elem((6, 3), true),
                label,
                source_id: format!("{label}-{i}"),
                synthetic: false,
            });
        }
    }
    ds
}

/// Every synthetic must sit in the box spanned by some original `x` and one
/// of `x`'s k nearest same-class originals (exhaustive search).
fn smote_convex(original: &Dataset, balanced: &Dataset, k: usize) -> Result<usize, String> {
    let mut checked = 0;
    for syn in balanced.instances.iter().filter(|i| i.synthetic) {
        let members: Vec<&[f64]> = original
            .instances
            .iter()
            .filter(|i| i.label == syn.label)
            .map(|i| i.values.as_slice().unwrap())
            .collect();
        let s = syn.values.as_slice().unwrap();
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        let ok = members.iter().enumerate().any(|(xi, x)| {
            let mut order: Vec<usize> = (0..members.len()).filter(|&j| j != xi).collect();
            order.sort_by(|&a, &b| dist(x, members[a]).total_cmp(&dist(x, members[b])).then(a.cmp(&b)));
            order.iter().take(k.min(members.len() - 1)).any(|&zi| {
                let z = members[zi];
                s.iter()
                    .zip(x.iter().zip(z))
                    .all(|(v, (a, b))| a.min(*b) - 1e-12 <= *v && *v <= a.max(*b) + 1e-12)
            })
        });
        if !ok {
            return Err(format!("synthetic {} is outside every neighbour box", syn.source_id));
        }
        checked += 1;
    }
    Ok(checked)
}

fn rebalancer_properties() -> Outcome {
    let ds = balance_dataset();
    let base = ds.class_counts().0;
    let mut smote_checked = 0;
    let grid = [
        (BalanceMethod::Augmentation, true),
        (BalanceMethod::RandomOversample, true),
        (BalanceMethod::RandomUndersample, false),
        (BalanceMethod::Smote, true),
        (BalanceMethod::ClusterCentroid, false),
    ];
    for (method, over) in grid {
        for level in 0..3 {
            let cfg = if over {
                BalanceConfig::oversample(method, [1.5, 2.0, 2.5][level])
            } else {
                BalanceConfig::undersample(method, [0.25, 0.5, 0.75][level])
            };
            let out = rebalance(&ds, &cfg).map_err(|e| e.to_string())?;
            let expected = if over {
                [
                    base[0],
                    oversample_target(base[1], cfg.minority_factor),
                    oversample_target(base[2], cfg.minority_factor),
                ]
            } else {
                [undersample_target(base[0], cfg.majority_reduction), base[1], base[2]]
            };
            check(out.class_counts().0 == expected, || {
                format!("{method:?} level {level}: {:?} != {expected:?}", out.class_counts().0)
            })?;
            if method == BalanceMethod::Smote {
                smote_checked += smote_convex(&ds, &out, cfg.smote_k)?;
            }
        }
    }

    // a held-out fold with one instance swapped for a synthetic must be rejected
    let test: Vec<SampledInstance> = ds.instances[..10].to_vec();
    let train = ds.with_instances(ds.instances[10..].to_vec());
    let balanced = rebalance(&train, &BalanceConfig::oversample(BalanceMethod::Smote, 2.0)).map_err(|e| e.to_string())?;
    let mut combined = balanced.instances.clone();
    combined.extend(test.iter().cloned());
    let mut splits = vec![Split::Train; balanced.len()];
    splits.extend(vec![Split::Test; test.len()]);
    assert_test_fold_purity(&combined, &splits, &test).map_err(|e| format!("clean fold rejected: {e}"))?;
    let intruder = balanced.instances.iter().position(|i| i.synthetic).unwrap();
    let last = combined.len() - 1;
    combined.swap(intruder, last);
    check(assert_test_fold_purity(&combined, &splits, &test).is_err(), || {
        "contaminated fold accepted".into()
    })?;
    Ok(format!("15 grid counts exact, {smote_checked} SMOTE synthetics convex, contamination rejected"))
}

// ---------------------------------------------------------------- 6

fn parser_round_trip_and_fuzz() -> Outcome {
    let table = VehicleTypeTable::default();
    let mut samples = Vec::new();
    for i in 0..50u64 {
        let vehicle = VehicleType::CLASSES[i as usize % 3];
        let spec = SynthSpec {
            duration_s: Some(30.0 + i as f64 * 3.0),
            ..SynthSpec::new(vehicle, 700 + i)
        };
        let log = generate_flight(&spec).map_err(|e| e.to_string())?;
        let bytes = write_ulog(&log).map_err(|e| e.to_string())?;
        let back = parse_ulog_with(&bytes, &log.source_id, &table).map_err(|e| e.to_string())?;
        check(back == log, || format!("round trip changed flight {i}"))?;
        samples.push(bytes);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut kinds: BTreeMap<&'static str, usize> = BTreeMap::new();
    for i in 0..10_000 {
        let input: Vec<u8> = match i % 4 {
            // pure noise
            0 => {
                let mut b = vec![0u8; rng.random_range(0..256)];
                rng.fill_bytes(&mut b);
                b
            }
            // valid header, random messages
            1 => {
                let mut b = ULOG_MAGIC.to_vec();
                b.extend_from_slice(&[1, 0, 0, 0, 0, 0, 0, 0, 0]);
                for _ in 0..rng.random_range(0..12) {
                    let len = rng.random_range(0..40u16);
                    b.extend_from_slice(&len.to_le_bytes());
                    b.push(*b"FIPMADBLSOQ".get(rng.random_range(0..11)).unwrap());
                    b.extend((0..len).map(|_| rng.random::<u8>()));
                }
                b
            }
            // bit flips in a valid log
            2 => {
                let mut b = samples[i % samples.len()][..4096.min(samples[i % samples.len()].len())].to_vec();
                for _ in 0..rng.random_range(1..8) {
                    let pos = rng.random_range(0..b.len());
                    b[pos] ^= 1 << rng.random_range(0..8);
                }
                b
            }
            // truncation of a valid log
            _ => {
                let src = &samples[i % samples.len()];
                src[..rng.random_range(0..src.len().min(20_000))].to_vec()
            }
        };
        let result = catch_unwind(AssertUnwindSafe(|| parse_ulog_with(&input, "fuzz", &table)));
        let kind = match result {
            Err(_) => return Err(format!("parser panicked on fuzz input {i}")),
            Ok(Ok(_)) => "ok",
            Ok(Err(UlogError::BadMagic)) => "bad magic",
            Ok(Err(UlogError::TruncatedMessage { .. })) => "truncated",
            Ok(Err(UlogError::UnknownFieldKind(_))) => "unknown field",
            Ok(Err(UlogError::Malformed { .. })) => "malformed",
            Ok(Err(UlogError::EmptyLog)) => "empty",
        };
        *kinds.entry(kind).or_default() += 1;
    }
    Ok(format!("50 round trips exact; 10000 fuzz inputs, no panics {kinds:?}"))
}

// ---------------------------------------------------------------- 7 and 8

/// Settings of the desk run. The hidden width and epoch count are reduced
/// from the full-scale defaults so the run fits a single laptop core.
fn desk_config(output_dir: &Path) -> RunConfig {
    RunConfig {
        output_dir: output_dir.to_path_buf(),
        data: DataSource::Synth(CorpusProfile {
            quadrotor: 400,
            hexarotor: 40,
            fixed_wing: 40,
            sample_rate_hz: 5.0,
            seed: 0,
        }),
        sampling: SamplingConfig::average(50),
        train: TrainConfig {
            epochs: 30,
            hidden: 64,
            ..TrainConfig::default()
        },
        ..RunConfig::default()
    }
}

fn desk_run(dir: &Path) -> Result<TrialReport, String> {
    let config = desk_config(dir);
    config.validate().map_err(|e| e.to_string())?;
    let corpus = load_corpus(&config).map_err(|e| e.to_string())?;
    let report = run_single(&config, &corpus).map_err(|e| e.to_string())?;
    write_outputs(&config, std::slice::from_ref(&report), dir).map_err(|e| e.to_string())?;
    Ok(report)
}

/// Macro F of multirotor (quadrotor and hexarotor merged) against
/// fixed-wing on a pooled matrix.
fn two_class_macro_f(cm: &ConfusionMatrix) -> f64 {
    let m = cm.0;
    let multi_multi = m[0][0] + m[0][2] + m[2][0] + m[2][2];
    let multi_fw = m[0][1] + m[2][1];
    let fw_multi = m[1][0] + m[1][2];
    let fw_fw = m[1][1];
    let pr = |tp: u64, fp: u64, fn_: u64| {
        let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
        f_score(p, r)
    };
    (pr(multi_multi, fw_multi, multi_fw) + pr(fw_fw, multi_fw, fw_multi)) / 2.0
}

fn end_to_end(dir: &Path) -> Outcome {
    let started = Instant::now();
    let report = desk_run(dir)?;
    let elapsed = started.elapsed();
    let cm = report.pooled;
    let two = two_class_macro_f(&cm);
    let three = report.aggregate.macro_f.mean;
    let (r, c, n) = cm.largest_off_diagonal();
    let hex_quad = cm.0[2][0];
    let strictly_largest = (0..3)
        .flat_map(|r| (0..3).map(move |c| (r, c)))
        .filter(|&(r, c)| r != c && (r, c) != (2, 0))
        .all(|(r, c)| cm.0[r][c] < hex_quad);
    let detail = format!(
        "2-class macro F {two:.3}, 3-class macro F {three:.3}, largest off-diagonal ({r}->{c}) = {n}, confusion {:?}, {:.0?}",
        cm.0, elapsed
    );
    check(two >= 0.90, || format!("2-class macro F below 0.90: {detail}"))?;
    check(three >= 0.60, || format!("3-class macro F below 0.60: {detail}"))?;
    check(strictly_largest, || format!("hexarotor->quadrotor is not the largest error: {detail}"))?;
    check(elapsed <= Duration::from_secs(600), || format!("over 10 minutes: {detail}"))?;
    Ok(detail)
}

fn csv_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

fn determinism(first: &Path, second: &Path) -> Outcome {
    desk_run(second)?;
    let a = csv_files(first);
    let b = csv_files(second);
    check(!a.is_empty(), || "first run wrote no CSV files".into())?;
    check(a.keys().eq(b.keys()), || format!("different CSV sets: {:?} vs {:?}", a.keys(), b.keys()))?;
    for (name, bytes) in &a {
        check(b[name] == *bytes, || format!("{name} differs between runs"))?;
    }
    Ok(format!("{} CSV files byte-identical", a.len()))
}

// ----------------------------------------------------------------

fn main() {
    let scratch = tempfile::tempdir().expect("temporary directory");
    let first = scratch.path().join("run1");
    let second = scratch.path().join("run2");

    let criteria: Vec<Criterion> = vec![
        ("1 metric replay", Duration::from_secs(1), Box::new(metric_replay)),
        ("2 baselines", Duration::from_secs(1), Box::new(baselines)),
        ("3 gradient suite", Duration::from_secs(30), Box::new(gradient_suite)),
        ("4 sampling oracles", Duration::from_secs(10), Box::new(sampling_oracles)),
        ("5 rebalancer properties", Duration::from_secs(30), Box::new(rebalancer_properties)),
        ("6 parser round-trip and fuzz", Duration::from_secs(60), Box::new(parser_round_trip_and_fuzz)),
        ("7 end-to-end desk run", Duration::from_secs(600), Box::new(|| end_to_end(&first))),
        ("8 determinism", Duration::from_secs(600), Box::new(|| determinism(&first, &second))),
    ];

    let mut failed = 0;
    for (name, budget, run) in &criteria {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = started.elapsed();
        let outcome = outcome.and_then(|d| {
            if elapsed <= *budget {
                Ok(d)
            } else {
                Err(format!("{d}; took {elapsed:.1?}, budget {budget:?}"))
            }
        });
        match outcome {
            Ok(detail) => println!("PASS criterion {name}: {detail} [{elapsed:.2?}]"),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {name}: {why} [{elapsed:.2?}]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
    println!("all {} criteria passed", criteria.len());
}
