//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Pass criterion numbers to run a subset:
//! `cargo test --release --test acceptance -- 3 4`.

use std::process::ExitCode;
use std::time::Instant;

use dartlab::analysis::{
    loss_barrier, noise_variance_reduction, run_balance, run_corollary, run_prop1_thetas, run_prop2, run_prop3,
    BalanceConfig, CorollaryConfig, NoiseFlowConfig, Prop1Config,
};
use dartlab::expcli::{parse_config_str, run_experiment};
use dartlab::mlpbench::{
    barrier_study, default_corruptions, flatness, make_task, run_mt_vs_dart, BenchConfig, FlatnessConfig, MlpModel,
    MlpSample, TaskConfig,
};
use dartlab::orchestrator::{
    aggregate_uniform, branch_seed, cosine_lr, dart_train, erm_train, SgdOptions, TrainConfig, Trainable,
};
use dartlab::patchnet::{activation, dataset_loss, init_model, loss_gradient, LossMode, PatchModel, TrackedNoise};
use dartlab::patchworld::{make_feature_bank, sample_dataset};
use dartlab::seed::rng_from_seed;
use rand::Rng;
use rand_distr::StandardNormal;

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

type Check = fn() -> Vec<(String, Verdict)>;

fn main() -> ExitCode {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let checks: [(usize, Check); 10] = [
        (1, prop1),
        (2, corollary),
        (3, prop2),
        (4, prop3),
        (5, variance_reduction),
        (6, barrier),
        (7, balance),
        (8, table_direction),
        (9, flatness_direction),
        (10, mechanical),
    ];
    let mut failed = 0;
    for (id, check) in checks {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let t0 = Instant::now();
        for (name, v) in check() {
            if !v.pass {
                failed += 1;
            }
            let tag = if v.pass { "PASS" } else { "FAIL" };
            println!("{tag} [{id}] {name}: {} ({:.1}s)", v.detail, t0.elapsed().as_secs_f64());
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance check(s) failed");
        ExitCode::FAILURE
    }
}

fn prop1() -> Vec<(String, Verdict)> {
    let thetas = [0.5, 0.3, 0.8];
    let reports = match run_prop1_thetas(&Prop1Config::default(), &thetas) {
        Ok(r) => r,
        Err(e) => return vec![("feature time scaling in sigma0".into(), verdict(false, e.to_string()))],
    };
    let main = &reports[0];
    let mut out = vec![(
        "feature time scaling in sigma0".into(),
        verdict(
            main.pass(),
            format!("slope {:.3} (want -1 +- 0.3), r2 {:.3}", main.fit.slope, main.fit.r2),
        ),
    )];
    let slopes: Vec<f64> = reports.iter().map(|r| r.fit.slope).collect();
    let drift = slopes.iter().map(|s| (s - slopes[0]).abs()).fold(0.0, f64::max);
    out.push((
        "threshold insensitivity".into(),
        verdict(
            drift <= 0.1,
            format!("slopes at theta {thetas:?}: {slopes:.3?}, max drift {drift:.3} (want <= 0.1)"),
        ),
    ));
    out
}

fn corollary() -> Vec<(String, Verdict)> {
    let v = match run_corollary(&CorollaryConfig::default()) {
        Ok(r) => {
            let rhos: Vec<f64> = r.seeds.iter().map(|s| s.spearman).collect();
            verdict(r.pass(), format!("spearman per seed {rhos:.2?} (want all >= 0.8)"))
        }
        Err(e) => verdict(false, e.to_string()),
    };
    vec![("restricted-density rank order".into(), v)]
}

fn prop2() -> Vec<(String, Verdict)> {
    let ms = [1, 2, 4, 8];
    let mut out = Vec::new();
    for (name, iid) in [("iid noise slope in m", true), ("shared noise contrast", false)] {
        let cfg = NoiseFlowConfig {
            resample_noise: iid,
            ..NoiseFlowConfig::default()
        };
        let v = match run_prop2(&cfg, &ms) {
            Ok(r) => {
                let want = if iid { "[0.8, 1.2]" } else { "< 0.3" };
                verdict(r.pass(), format!("slope {:.3} (want {want}), r2 {:.3}", r.fit.slope, r.fit.r2))
            }
            Err(e) => verdict(false, e.to_string()),
        };
        out.push((name.into(), v));
    }
    out
}

fn prop3() -> Vec<(String, Verdict)> {
    let cfg = NoiseFlowConfig {
        seeds: 10,
        ..NoiseFlowConfig::default()
    };
    let v = match run_prop3(&cfg, 4, None) {
        Ok(r) => verdict(
            r.pass(),
            format!("ratio > 1 in {}/{} seeds, sign-test p {:.4}", r.wins, r.pairs.len(), r.p_value),
        ),
        Err(e) => verdict(false, e.to_string()),
    };
    vec![("aggregation delays noise".into(), v)]
}

fn variance_reduction() -> Vec<(String, Verdict)> {
    let (c, d, tracked_n, trials) = (4usize, 64usize, 8usize, 200);
    let mut ok = true;
    let mut scaled = Vec::new();
    for m in [2usize, 4, 8] {
        let mut rng = rng_from_seed(9000 + m as u64);
        let mut gauss = |len: usize, std: f64| -> Vec<f64> {
            (0..len).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
        };
        let mut acc = 0.0;
        for _ in 0..trials {
            let tracked: Vec<TrackedNoise> = (0..tracked_n)
                .map(|i| TrackedNoise {
                    id: i as u64,
                    label: if i % 2 == 0 { 1 } else { -1 },
                    noise: gauss(d, 1.0).into(),
                })
                .collect();
            let models: Vec<PatchModel> = (0..m)
                .map(|_| PatchModel {
                    w: gauss(c * d, 1.0),
                    ..PatchModel::zeros(c, d, 3.0)
                })
                .collect();
            match noise_variance_reduction(&models, &tracked) {
                Ok(r) => acc += r,
                Err(e) => return vec![("averaged noise variance".into(), verdict(false, e.to_string()))],
            }
        }
        let s = acc / trials as f64 * m as f64;
        ok &= (s - 1.0).abs() <= 0.2;
        scaled.push(s);
    }
    vec![(
        "averaged noise variance".into(),
        verdict(ok, format!("m * ratio for m = 2, 4, 8: {scaled:.3?} (want 1 +- 0.2)")),
    )]
}

fn barrier() -> Vec<(String, Verdict)> {
    let budgets = [10, 50, 200];
    let (mut below, mut monotone, mut zero_ok) = (0, 0, true);
    let mut lines = Vec::new();
    for seed in 0..10u64 {
        let task = match make_task(&TaskConfig::default(), seed) {
            Ok(t) => t,
            Err(e) => return vec![("shared warmup lowers barrier".into(), verdict(false, e.to_string()))],
        };
        let cfg = BenchConfig {
            master_seed: seed,
            ..BenchConfig::default()
        };
        let study = match barrier_study(&task, &cfg, &budgets) {
            Ok(s) => s,
            Err(e) => return vec![("shared warmup lowers barrier".into(), verdict(false, e.to_string()))],
        };
        below += study.shared.iter().all(|&s| s < study.independent) as usize;
        monotone += study.shared.windows(2).all(|w| w[0] <= w[1]) as usize;
        lines.push(format!("{:.3?}|{:.3}", study.shared, study.independent));

        let model = MlpModel::init(task.dim(), cfg.hidden, seed).unwrap();
        let refs: Vec<&MlpSample> = task.train.iter().collect();
        let loss = |p: &[f64]| {
            let mut m = model.clone();
            m.set_params(p);
            Ok(m.loss_and_grad(&refs)?.0)
        };
        let p = model.params();
        zero_ok &= matches!(loss_barrier(&p, &p, &loss, 21), Ok(b) if b.barrier_excess == 0.0);
    }
    vec![
        (
            "shared warmup lowers barrier".into(),
            verdict(below >= 9, format!("shared < independent in {below}/10 seeds (want >= 9)")),
        ),
        (
            "barrier grows with divergence".into(),
            verdict(
                monotone >= 8,
                format!("nondecreasing over {budgets:?} in {monotone}/10 seeds (want >= 8); {}", lines.join(" ")),
            ),
        ),
        (
            "self barrier is zero".into(),
            verdict(zero_ok, "barrier_excess(theta, theta) == 0 exactly"),
        ),
    ]
}

fn balance() -> Vec<(String, Verdict)> {
    let v = match run_balance(&BalanceConfig::default()) {
        Ok(r) => {
            let ratios: Vec<f64> = r.seeds.iter().map(|s| s.ratio).collect();
            let converged = r.seeds.iter().filter(|s| s.union_times.iter().all(|t| t.is_finite())).count();
            verdict(
                r.pass(),
                format!(
                    "union converged in {converged}/{} seeds; plain rare/common ratio {ratios:.3?} (want < 0.5)",
                    r.seeds.len()
                ),
            )
        }
        Err(e) => verdict(false, e.to_string()),
    };
    vec![("mixed training balances features".into(), v)]
}

struct BenchSeed {
    mixed_beats_experts: bool,
    dart_ge_erm: bool,
    worst_lower: bool,
    average_lower: bool,
}

fn bench_seeds() -> Result<Vec<BenchSeed>, String> {
    (0..10u64)
        .map(|seed| {
            let task = make_task(&TaskConfig::default(), seed).map_err(|e| e.to_string())?;
            let corr = default_corruptions(&task);
            let cfg = BenchConfig {
                master_seed: seed,
                ..BenchConfig::default()
            };
            let t = run_mt_vs_dart(&task, &corr, &cfg).map_err(|e| e.to_string())?;
            let mixed = t.mean_corrupted("mixed").ok_or("missing mixed arm")?;
            let mixed_beats_experts = (0..corr.len()).all(|i| t.expert_off_diagonal(i).is_some_and(|e| mixed > e));
            let dart = t.arm("dart:identical").ok_or("missing dart arm")?;
            let erm = t.arm("erm:identical").ok_or("missing erm arm")?;
            let model = MlpModel::init(task.dim(), cfg.hidden, 0).map_err(|e| e.to_string())?;
            let fc = FlatnessConfig {
                seed,
                ..FlatnessConfig::default()
            };
            let fd = flatness(&model, &dart.params, &task.train, &fc).map_err(|e| e.to_string())?;
            let fe = flatness(&model, &erm.params, &task.train, &fc).map_err(|e| e.to_string())?;
            Ok(BenchSeed {
                mixed_beats_experts,
                dart_ge_erm: dart.accuracy[0] >= erm.accuracy[0],
                worst_lower: fd.worst_case < fe.worst_case,
                average_lower: fd.average < fe.average,
            })
        })
        .collect()
}

fn count(seeds: &[BenchSeed], f: impl Fn(&BenchSeed) -> bool) -> usize {
    seeds.iter().filter(|s| f(s)).count()
}

fn table_direction() -> Vec<(String, Verdict)> {
    match bench_seeds() {
        Ok(s) => {
            let a = count(&s, |b| b.mixed_beats_experts);
            let b = count(&s, |b| b.dart_ge_erm);
            vec![
                (
                    "mixed training beats every expert".into(),
                    verdict(a >= 8, format!("{a}/10 seeds (want >= 8)")),
                ),
                (
                    "DART >= ERM+EMA, identical corruption".into(),
                    verdict(b >= 8, format!("{b}/10 seeds (want >= 8)")),
                ),
            ]
        }
        Err(e) => vec![("mlpbench".into(), verdict(false, e))],
    }
}

fn flatness_direction() -> Vec<(String, Verdict)> {
    match bench_seeds() {
        Ok(s) => {
            let w = count(&s, |b| b.worst_lower);
            let a = count(&s, |b| b.average_lower);
            vec![
                (
                    "DART worst-case flatness below ERM".into(),
                    verdict(w >= 8, format!("{w}/10 seeds (want >= 8)")),
                ),
                (
                    "DART average flatness below ERM".into(),
                    verdict(a >= 8, format!("{a}/10 seeds (want >= 8)")),
                ),
            ]
        }
        Err(e) => vec![("mlpbench".into(), verdict(false, e))],
    }
}

fn mechanical() -> Vec<(String, Verdict)> {
    vec![
        ("single-branch DART is ERM".into(), single_branch_reduction()),
        ("cosine schedule endpoints".into(), cosine_endpoints()),
        ("aggregation idempotence".into(), aggregation_idempotence()),
        ("activation and loss gradients".into(), gradient_checks()),
        ("full-run determinism".into(), full_run_determinism()),
    ]
}

fn single_branch_reduction() -> Verdict {
    let task = make_task(
        &TaskConfig {
            n_train: 64,
            n_test: 32,
            ..TaskConfig::default()
        },
        4,
    )
    .unwrap();
    let cfg = TrainConfig {
        epochs: 12,
        warmup_epochs: 3,
        branches: 1,
        lambda: 4,
        lr_max: 0.05,
        batch_size: 8,
        master_seed: 21,
        momentum: 0.9,
        weight_decay: 5e-4,
        ema_decay: Some(0.99),
        ..TrainConfig::default()
    };
    let init = MlpModel::init(task.dim(), 16, 3).unwrap();
    let (dart, rec) = dart_train(init.clone(), &[&task.train], &cfg, None).unwrap();
    let mut erm = init;
    let erec = erm_train(
        &mut erm,
        &task.train,
        1..=cfg.epochs,
        &|e| cosine_lr(e, cfg.epochs, cfg.lr_max),
        &SgdOptions::from(&cfg),
        branch_seed(cfg.master_seed, 0),
        cfg.ema_decay,
        None,
    )
    .unwrap();
    let same = dart == erm.params() && rec.ema_params == erec.ema_params;
    verdict(same, "M = 1 parameters and EMA shadow bit-identical to ERM")
}

fn cosine_endpoints() -> Verdict {
    let first = cosine_lr(1, 200, 0.1).unwrap();
    let mid = cosine_lr(101, 200, 0.1).unwrap();
    let last = cosine_lr(200, 200, 0.1).unwrap();
    let expect_last = 0.05 * (1.0 + (199.0 / 200.0 * std::f64::consts::PI).cos());
    let ok = first == 0.1 && (mid - 0.05).abs() < 1e-15 && (last - expect_last).abs() < 1e-15 && last > 0.0;
    verdict(ok, format!("lr(1) {first}, lr(101) {mid:.6}, lr(200) {last:.3e}"))
}

fn aggregation_idempotence() -> Verdict {
    let mut rng = rng_from_seed(5);
    let mut ok = true;
    for m in 1..=8 {
        let p: Vec<f64> = (0..97).map(|_| rng.sample(StandardNormal)).collect();
        ok &= aggregate_uniform(&vec![p.clone(); m]).unwrap() == p;
        let mixed: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..97).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let once = aggregate_uniform(&mixed).unwrap();
        ok &= aggregate_uniform(&vec![once.clone(); m]).unwrap() == once;
    }
    verdict(ok, "aggregating identical copies returns them unchanged, M = 1..8")
}

fn gradient_checks() -> Verdict {
    let h = 1e-6;
    let mut worst_phi = 0.0f64;
    for z in [-1.7, -0.9, -0.3, 0.2, 0.5, 0.8, 1.3, 2.5] {
        let (_, g) = activation(z, 3.0);
        let fd = (activation(z + h, 3.0).0 - activation(z - h, 3.0).0) / (2.0 * h);
        worst_phi = worst_phi.max(((fd - g) / g).abs());
    }
    let mut worst_loss = 0.0f64;
    for seed in 0..10u64 {
        let bank = make_feature_bank(3, 8).unwrap();
        let ds = sample_dataset(&bank, 5, &[0.4, 0.4, 0.2], 3.0, seed).unwrap();
        let m = init_model(3, 8, 3.0, 0.8, seed + 100).unwrap();
        let g = loss_gradient(&m, &ds, LossMode::ExactLogistic).unwrap();
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for i in 0..m.w.len() {
            let mut p = m.clone();
            p.w[i] += h;
            let mut q = m.clone();
            q.w[i] -= h;
            let fd = (dataset_loss(&p, &ds).unwrap() - dataset_loss(&q, &ds).unwrap()) / (2.0 * h);
            num = num.max((fd - g[i]).abs());
            den = den.max(g[i].abs());
        }
        worst_loss = worst_loss.max(num / den);
    }
    verdict(
        worst_phi < 1e-5 && worst_loss < 1e-5,
        format!("max relative error: activation {worst_phi:.2e}, loss {worst_loss:.2e} (want < 1e-5)"),
    )
}

fn full_run_determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let run = |sub: &str| {
        let out = dir.path().join(sub);
        let text = format!(
            "kind=trajectory\nout_dir={}\ndata.d=256\ndata.k=2\ndata.n=16\ndata.test_n=32\ndata.channels=2\n\
             dart.epochs=8\ndart.warmup_epochs=2\ndart.lambda=3\ndart.branches=2\ndart.batch_size=8\n",
            out.display()
        );
        run_experiment(&parse_config_str(&text, &[]).unwrap()).unwrap();
        out
    };
    let (a, b) = (run("a"), run("b"));
    let files = ["run.csv", "trajectory.csv", "final.params", "checkpoints/epoch-00005.params"];
    let same = files
        .iter()
        .all(|f| std::fs::read(a.join(f)).ok().is_some_and(|x| Some(x) == std::fs::read(b.join(f)).ok()));
    verdict(same, format!("two runs with one seed give byte-identical {files:?}"))
}
