//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails. Arguments like `c3 c8` select
//! criteria; flags passed by the test runner are ignored.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ame_core::attribution::{explain_ame, explain_occlusion, granger_oracle, ProbeConfig};
use ame_core::benchmark::{
    alpha_sweep, default_alphas, masking_protocol, mge_quality_protocol, recall_at_k, sweep_job, sweep_trend,
    test_mge, MaskingConfig, MaskingResult,
};
use ame_core::data::{generate, Informative, Splits, SyntheticKind, SyntheticSpec};
use ame_core::diff::{OptimizerConfig, Tensor};
use ame_core::experiment::{mean_target_kl, run, Command, DataConfig, RunConfig};
use ame_core::gradcheck::check_total_loss;
use ame_core::granger::{granger_targets, kl_divergence, omega_targets};
use ame_core::model::{build_ame, AmeConfig, AmeModel, Task};
use ame_core::stats::pearson;
use ame_core::train::{fit, TrainSettings};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const SEEDS: u64 = 10;
const MASK_FRACTION: f64 = 0.25;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn template() -> AmeConfig {
    AmeConfig {
        n_features: 8,
        expert_hidden: vec![4],
        gate_hidden: 8,
        aux_hidden: vec![8],
        task: Task::Classification { classes: 2 },
        optimizer: OptimizerConfig { learning_rate: 3e-3, ..OptimizerConfig::default() },
        ..AmeConfig::default()
    }
}

fn settings() -> TrainSettings {
    TrainSettings { epochs: 100, batch_size: 32, ..TrainSettings::default() }
}

fn task_data(seed: u64) -> Splits {
    generate(&SyntheticSpec { seed, ..SyntheticSpec::default() }).expect("synthetic task")
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

/// Models trained for the Granger-effect and masking criteria, built on demand.
#[derive(Default)]
struct Cache {
    seeds: BTreeMap<u64, Trained>,
    train_time: Duration,
}

struct Trained {
    data: Splits,
    zero: AmeModel,
    granger: AmeModel,
}

impl Cache {
    fn get(&mut self, seed: u64) -> &Trained {
        let t0 = Instant::now();
        let fresh = !self.seeds.contains_key(&seed);
        let entry = self.seeds.entry(seed).or_insert_with(|| {
            let data = task_data(seed);
            let zero = sweep_job(&template(), &data, &settings(), 0.0, seed).unwrap().0;
            let granger = sweep_job(&template(), &data, &settings(), 0.1, seed).unwrap().0;
            Trained { data, zero, granger }
        });
        if fresh {
            self.train_time += t0.elapsed();
        }
        entry
    }
}

fn c1() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (task, detach, seed) in [
        (Task::Regression, true, 11),
        (Task::Classification { classes: 2 }, true, 12),
        (Task::Classification { classes: 3 }, false, 13),
    ] {
        let model = build_ame(AmeConfig {
            n_features: 3,
            expert_hidden: vec![4],
            gate_hidden: 8,
            aux_hidden: vec![8],
            task,
            alpha: 0.5,
            aux_weight: 1.0,
            detach_targets: detach,
            seed,
            ..AmeConfig::default()
        })
        .unwrap();
        let x = gaussian(&mut rng, 6, 3);
        let y = match task {
            Task::Regression => gaussian(&mut rng, 6, 1),
            Task::Classification { classes } => {
                let mut t = Tensor::zeros(&[6, classes]);
                for r in 0..6 {
                    t.data_mut()[r * classes + rng.random_range(0..classes)] = 1.0;
                }
                t
            }
        };
        let r = check_total_loss(&model, &x, &y, 1e-5).unwrap();
        checked += r.checked;
        worst = worst.max(r.max_rel_err());
    }
    verdict(worst < 1e-4, format!("{checked} entries over 3 models, max rel err {worst:.2e}"))
}

fn c2() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let valid = |row: &[f64]| (row.iter().sum::<f64>() - 1.0).abs() <= 1e-6 && row.iter().all(|&v| v >= 0.0);
    let mut bad = 0usize;
    let (mut attention_rows, mut omega_rows) = (0usize, 0usize);
    // 100 parameter draws, 100 inputs each.
    for draw in 0..100u64 {
        let p = 1 + (draw as usize % 6);
        let task = [Task::Regression, Task::Classification { classes: 2 }, Task::Classification { classes: 3 }]
            [draw as usize % 3];
        let model = build_ame(AmeConfig {
            n_features: p,
            expert_hidden: vec![3],
            gate_hidden: 4,
            aux_hidden: vec![4],
            task,
            seed: draw,
            ..AmeConfig::default()
        })
        .unwrap();
        let mut x = gaussian(&mut rng, 100, p);
        let scale = 10f64.powf(rng.random_range(-1.0..1.5));
        x.data_mut().iter_mut().for_each(|v| *v *= scale);
        let y = match task {
            Task::Regression => gaussian(&mut rng, 100, 1),
            Task::Classification { classes } => {
                let mut t = Tensor::zeros(&[100, classes]);
                for r in 0..100 {
                    t.data_mut()[r * classes + rng.random_range(0..classes)] = 1.0;
                }
                t
            }
        };
        let out = model.forward(&x).unwrap();
        let targets = granger_targets(&out, &y, task).unwrap();
        for r in 0..100 {
            bad += usize::from(!valid(out.attention.row(r)));
            bad += usize::from(!valid(targets.omega.row(r)));
        }
        attention_rows += 100;
        omega_rows += 100;
    }
    // Raw error reductions, including all-non-positive rows.
    for _ in 0..10_000 {
        let p = rng.random_range(1..10);
        let shift = rng.random_range(-3.0..1.0);
        let delta: Vec<f64> = (0..p).map(|_| rng.sample::<f64, _>(StandardNormal) + shift).collect();
        bad += usize::from(!valid(&omega_targets(&delta)));
        omega_rows += 1;
    }
    let mut kl_bad = 0usize;
    let mut min_kl = f64::INFINITY;
    for _ in 0..10_000 {
        let p = rng.random_range(2..10);
        let draw = |rng: &mut ChaCha8Rng| {
            let v: Vec<f64> = (0..p).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect::<Vec<f64>>()
        };
        let (a, b) = (draw(&mut rng), draw(&mut rng));
        let self_kl = kl_divergence(&a, &a).unwrap();
        let kl = kl_divergence(&a, &b).unwrap();
        let differ = a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-9);
        min_kl = min_kl.min(kl);
        if self_kl.abs() > 1e-9 || kl < 0.0 || (differ && kl <= 1e-9) {
            kl_bad += 1;
        }
    }
    verdict(
        bad == 0 && kl_bad == 0,
        format!(
            "{attention_rows} attention rows, {omega_rows} target rows, {bad} invalid; 10000 KL pairs, {kl_bad} violations, min KL {min_kl:.2e}"
        ),
    )
}

fn oracle_omega(data: &Splits, seed: u64) -> Tensor {
    let partition: Vec<Vec<usize>> = (0..data.train.n_features()).map(|i| vec![i]).collect();
    granger_oracle(&data.train, &data.test, &partition, &ProbeConfig { seed, ..ProbeConfig::default() })
        .unwrap()
        .omega
}

fn c3(cache: &mut Cache) -> Verdict {
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..SEEDS {
        let t = cache.get(seed);
        let oracle = oracle_omega(&t.data, seed);
        let r2 = |m: &AmeModel| {
            let a = m.forward(&t.data.test.x).unwrap().attention;
            pearson(a.data(), oracle.data()).map_or(0.0, |r| r * r)
        };
        let (r0, r1) = (r2(&t.zero), r2(&t.granger));
        let (m0, m1) = (test_mge(&t.zero, &t.data.test).unwrap(), test_mge(&t.granger, &t.data.test).unwrap());
        let win = r1 > r0 && m1 < m0;
        wins += usize::from(win);
        lines.push(format!("seed {seed}: r2 {r1:.3} vs {r0:.3}, mge {m1:.3} vs {m0:.3}"));
    }
    verdict(wins >= 8, format!("{wins}/{SEEDS} seeds; {}", lines.join("; ")))
}

fn masking(model: &AmeModel, data: &Splits, seed: u64) -> MaskingResult {
    let sub = data.test.head(100).unwrap();
    let report = explain_ame(model, &sub.x, 256).unwrap();
    masking_protocol(model, &sub.x, &report, model.partition(), MASK_FRACTION, 0.0, seed).unwrap()
}

fn c4(cache: &mut Cache) -> (Verdict, Duration) {
    let mut wins = 0;
    let mut ratios = Vec::new();
    let mut slowest = Duration::ZERO;
    for seed in 0..SEEDS {
        let t = cache.get(seed);
        let t0 = Instant::now();
        let r = masking(&t.granger, &t.data, seed);
        slowest = slowest.max(t0.elapsed());
        wins += usize::from(r.mean_informed > 0.0 && r.mean_informed >= 2.0 * r.mean_random);
        ratios.push(format!("{:.2}", r.mean_informed / r.mean_random));
    }
    (verdict(wins >= 8, format!("{wins}/{SEEDS} seeds; informed/random {}", ratios.join(" "))), slowest)
}

fn c5() -> Verdict {
    let masking = MaskingConfig { fraction: MASK_FRACTION, ..MaskingConfig::default() };
    let mut all_negative = true;
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let data = task_data(seed);
        let converged = sweep_job(&template(), &data, &settings(), 0.1, seed).unwrap().0;
        let early = sweep_job(&template(), &data, &TrainSettings { epochs: 3, ..settings() }, 0.01, seed).unwrap().0;
        let zero = sweep_job(&template(), &data, &settings(), 0.0, seed).unwrap().0;
        let q = mge_quality_protocol(&[&converged, &early, &zero], &data.test, &masking, seed).unwrap();
        let mut mges: Vec<f64> = q.models.iter().map(|m| m.test_mge).collect();
        mges.sort_by(f64::total_cmp);
        let distinct = mges.windows(2).all(|w| w[1] > w[0]);
        let negative = distinct && q.spearman.is_some_and(|r| r < 0.0);
        all_negative &= negative;
        let pairs: Vec<String> =
            q.models.iter().map(|m| format!("({:.3}, {:.3})", m.test_mge, m.log_odds_drop)).collect();
        lines.push(format!("seed {seed}: rho {:?} over (mge, drop) {}", q.spearman, pairs.join(" ")));
    }
    verdict(all_negative, lines.join("; "))
}

fn c6() -> Verdict {
    let data = task_data(0);
    let seeds: Vec<u64> = (0..5).collect();
    let (runs, agg) = alpha_sweep(&template(), &data, &settings(), &default_alphas(), &seeds).unwrap();
    let trend = sweep_trend(&agg);
    let at = |a: f64| agg.iter().find(|g| (g.alpha - a).abs() < 1e-12).unwrap().loss_mean;
    let ratio = at(0.1) / at(0.0);
    let pass = trend.is_some_and(|r| r <= -0.7) && ratio < 1.25;
    verdict(pass, format!("{} runs, spearman(alpha, mge) {trend:?}, loss(0.1)/loss(0) {ratio:.3}", runs.len()))
}

fn c7() -> Verdict {
    let p = 64;
    let n = 256;
    let model = build_ame(AmeConfig {
        n_features: p,
        expert_hidden: vec![4],
        gate_hidden: 8,
        aux_hidden: vec![8],
        task: Task::Classification { classes: 2 },
        seed: 7,
        ..AmeConfig::default()
    })
    .unwrap();
    let x = gaussian(&mut ChaCha8Rng::seed_from_u64(7), n, p);
    let ame = explain_ame(&model, &x, 1).unwrap();
    let occ = explain_occlusion(&model, &x, None, model.partition(), 0.0).unwrap();
    let exact = ame.forwards == n && occ.forwards == n * (p + 1);
    let pass = exact && ame.seconds < occ.seconds / 5.0;
    verdict(
        pass,
        format!(
            "ame {:.3}s / {} forwards, occlusion {:.3}s / {} forwards, speedup {:.1}x",
            ame.seconds,
            ame.forwards,
            occ.seconds,
            occ.forwards,
            occ.seconds / ame.seconds
        ),
    )
}

fn c8() -> Verdict {
    let mut pass = true;
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let data = generate(&SyntheticSpec {
            kind: SyntheticKind::AdditiveRegression,
            n_features: 2,
            informative: vec![Informative { index: 0, weight: 1.0 }],
            noise: 0.0,
            n_train: 1000,
            n_val: 200,
            n_test: 200,
            seed,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let partition = vec![vec![0], vec![1]];
        let probes = ProbeConfig { hidden: vec![], epochs: 80, learning_rate: 1e-2, seed, ..ProbeConfig::default() };
        let oracle = granger_oracle(&data.train, &data.test, &partition, &probes).unwrap();
        let mut model = build_ame(AmeConfig {
            n_features: 2,
            expert_hidden: vec![8],
            gate_hidden: 8,
            aux_hidden: vec![16],
            alpha: 0.1,
            seed,
            optimizer: OptimizerConfig { learning_rate: 3e-3, ..OptimizerConfig::default() },
            ..AmeConfig::default()
        })
        .unwrap();
        fit(&mut model, &data.train, Some(&data.val), &TrainSettings { epochs: 200, ..settings() }).unwrap();
        let out = model.forward(&data.test.x).unwrap();
        let in_model = granger_targets(&out, &data.test.y, Task::Regression).unwrap().omega;
        let n = data.test.len() as f64;
        let first = |t: &Tensor| t.data().iter().step_by(2).sum::<f64>() / n;
        let (w_oracle, w_model) = (first(&oracle.omega), first(&in_model));
        let kl = mean_target_kl(&oracle.omega, &in_model).unwrap();
        pass &= w_oracle > 0.95 && w_model > 0.95 && kl < 0.1;
        lines.push(format!("seed {seed}: oracle w1 {w_oracle:.4}, in-model w1 {w_model:.4}, KL {kl:.4}"));
    }
    verdict(pass, lines.join("; "))
}

fn csv_files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "csv") {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn c9() -> Verdict {
    let base = RunConfig::from_json(
        r#"{
          "seed": 3,
          "data": {"synthetic": {"n_train": 400, "n_val": 100, "n_test": 120}},
          "model": {"expert_hidden": [4], "gate_hidden": 8, "aux_hidden": [8], "optimizer": {"learning_rate": 0.003}},
          "training": {"epochs": 8},
          "explain": {"n": 40},
          "benchmark": {
            "protocols": ["masking", "mge_quality", "recall", "timing"],
            "masking": {"n": 40, "fraction": 0.25},
            "timing": {"n": 8},
            "quality_variants": [{"alpha": 0.1}, {"alpha": 0.01, "epochs": 2}, {"alpha": 0.0}]
          },
          "sweep": {"alphas": [0.0, 0.05, 0.1], "runs": 2},
          "oracle": {"epochs": 5}
        }"#,
    )
    .unwrap();
    assert!(matches!(base.data, DataConfig::Synthetic(_)));
    let replay = |root: &Path| {
        for command in [Command::Train, Command::Explain, Command::Benchmark, Command::Sweep, Command::Oracle] {
            let cfg = RunConfig { command, out_dir: root.to_path_buf(), ..base.clone() };
            run(&cfg, 2).unwrap();
        }
        csv_files(root)
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (fa, fb) = (replay(a.path()), replay(b.path()));
    let mut names: Vec<String> =
        fa.keys().filter_map(|p| p.file_name()).map(|f| f.to_string_lossy().into_owned()).collect();
    names.sort();
    names.dedup();
    let expected = ["training_log.csv", "importance.csv", "benchmark.csv", "sweep.csv", "oracle.csv"];
    let complete = expected.iter().all(|e| names.iter().any(|n| n == e));
    let identical = fa == fb;
    // The in-process training used by the other criteria replays too.
    let data = task_data(4);
    let once = |_: ()| sweep_job(&template(), &data, &TrainSettings { epochs: 10, ..settings() }, 0.1, 4).unwrap().1;
    let same_training = once(()) == once(());
    verdict(
        complete && identical && same_training,
        format!(
            "{} CSV files ({}), byte-identical {identical}; repeated training identical {same_training}",
            fa.len(),
            names.join(", ")
        ),
    )
}

fn c_recall(cache: &mut Cache) -> Verdict {
    let truth = SyntheticSpec::default().informative_set();
    let mut counts = Vec::new();
    for seed in 0..SEEDS {
        let t = cache.get(seed);
        let report = explain_ame(&t.granger, &t.data.test.x, 256).unwrap();
        counts.push(recall_at_k(&report, &truth, 4).unwrap());
    }
    let mean = counts.iter().sum::<usize>() as f64 / counts.len() as f64;
    verdict(mean >= 3.0, format!("recall@4 per seed {counts:?}, mean {mean:.1}"))
}

fn main() -> ExitCode {
    let wanted: Vec<String> =
        std::env::args().skip(1).filter(|a| !a.starts_with('-')).map(|a| a.to_lowercase()).collect();
    let selected = |name: &str| wanted.is_empty() || wanted.iter().any(|w| w == name);
    let mut cache = Cache::default();
    let mut failed = 0;
    let mut report = |name: &str, budget: Duration, elapsed: Duration, v: Verdict| {
        let in_time = elapsed <= budget;
        let ok = v.pass && in_time;
        failed += usize::from(!ok);
        let timing = format!("{:.1}s of {}s", elapsed.as_secs_f64(), budget.as_secs());
        let late = if in_time { "" } else { " (over budget)" };
        println!("{} {name} [{timing}{late}] {}", if ok { "PASS" } else { "FAIL" }, v.detail);
    };
    let timed = |f: &mut dyn FnMut() -> Verdict| {
        let t0 = Instant::now();
        let v = f();
        (v, t0.elapsed())
    };
    let secs = Duration::from_secs;

    if selected("c1") {
        let (v, t) = timed(&mut c1);
        report("criterion 1 gradient check", secs(10), t, v);
    }
    if selected("c2") {
        let (v, t) = timed(&mut c2);
        report("criterion 2 simplex invariants", secs(30), t, v);
    }
    if selected("c3") {
        let (v, t) = timed(&mut || c3(&mut cache));
        report("criterion 3 granger training effect", secs(600), t, v);
    }
    if selected("c4") {
        // Training is shared with criterion 3; the per-seed budget covers the
        // masking run plus one seed's share of training.
        let (v, slowest) = c4(&mut cache);
        report("criterion 4 masking", secs(300), slowest + cache.train_time / SEEDS as u32, v);
    }
    if selected("c5") {
        let (v, t) = timed(&mut c5);
        report("criterion 5 mge quality correlation", secs(900), t, v);
    }
    if selected("c6") {
        let (v, t) = timed(&mut c6);
        report("criterion 6 alpha sweep", secs(3600), t, v);
    }
    if selected("c7") {
        let (v, t) = timed(&mut c7);
        report("criterion 7 speed ordering", secs(300), t, v);
    }
    if selected("c8") {
        let (v, t) = timed(&mut c8);
        report("criterion 8 oracle cross-check", secs(300), t, v);
    }
    if selected("c9") {
        let (v, t) = timed(&mut c9);
        report("criterion 9 determinism", secs(600), t, v);
    }
    if selected("recall") {
        let (v, t) = timed(&mut || c_recall(&mut cache));
        report("supplementary recall@4", secs(600), t, v);
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
