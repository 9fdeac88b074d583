//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Thresholds marked "frozen" were measured once on the pinned reference
//! configuration (`reference/pinned.toml`) and are deliberately not
//! recomputed here.

use std::collections::HashSet;
use std::path::PathBuf;
use std::process::{Command, ExitCode};
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cdrec::cli::{load_config, resolve_with, Overrides, RunConfig};
use cdrec::data::{
    apply_cold_start, generate_synthetic, make_splits, normalize, DomainPair, Rating, RatingMatrix,
    SyntheticSpec,
};
use cdrec::eval::{run_ablation, run_experiment, run_variants, AblationGrid, EvalReport, Method, Variant};
use cdrec::lfacdr;
use cdrec::numerics::{
    chain_backprop, run_suite, Activation, AdamConfig, AdamState, DenseNetwork, LossSpec, Param,
};
use cdrec::train::TrainViews;
use cdrec::TrainConfig;

/// Frozen: smallest accepted drop in mean RMSE from adding the coupled stage.
/// Measured margins on the pinned config were 0.0027 (CACDR) and 0.0090
/// (LFACDR); the thresholds keep roughly a third of each.
const COUPLED_MARGIN_CACDR: f64 = 0.001;
const COUPLED_MARGIN_LFACDR: f64 = 0.003;
/// Frozen: latent sweep tolerance, max RMSE over min RMSE.
const LATENT_SPREAD: f64 = 1.15;
/// Frozen: observed-entry RMSE the init stage must reach on noiseless data.
const RECOVERY_RMSE: f64 = 0.05;
const RECOVERY_EPOCHS: usize = 500;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn pinned_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("reference/pinned.toml")
}

fn pinned(method: Method) -> RunConfig {
    let file = load_config(&pinned_path()).expect("pinned config");
    let flags = Overrides {
        method: Some(method),
        ..Overrides::default()
    };
    resolve_with(flags, file).expect("pinned config resolves")
}

fn pinned_pair() -> DomainPair {
    pinned(Method::Cacdr).load_pair().expect("pinned pair")
}

// 1 ---------------------------------------------------------------------------

fn gradient_correctness() -> Outcome {
    let started = Instant::now();
    let report = run_suite(42, 100, false).expect("gradient suite");
    let elapsed = started.elapsed().as_secs_f64();
    outcome(
        report.passed() && elapsed < 60.0,
        format!(
            "max rel err {:.2e} over {} random nets, stacked {:.2e}, {elapsed:.1}s",
            report.max_relative_error(),
            report.random_nets,
            report.stacked
        ),
    )
}

// 2 ---------------------------------------------------------------------------

fn masked_independence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let relu = Activation::Relu;
    let mut checked = 0usize;
    let mut failures = 0usize;
    for instance in 0..20 {
        // a single 6 → 6 network and a stacked 6 → 3 → 4 → 6 chain
        let nets: Vec<DenseNetwork> = if instance % 2 == 0 {
            vec![DenseNetwork::glorot(&[6, 5, 6], relu, Activation::Identity, &mut rng).unwrap()]
        } else {
            vec![
                DenseNetwork::glorot(&[6, 3], relu, relu, &mut rng).unwrap(),
                DenseNetwork::glorot(&[3, 4, 3], relu, relu, &mut rng).unwrap(),
                DenseNetwork::glorot(&[3, 6], relu, relu, &mut rng).unwrap(),
            ]
        };
        let refs: Vec<&DenseNetwork> = nets.iter().collect();
        let x = Array2::from_shape_simple_fn((6, 6), || rng.random_range(-1.0..1.0));
        let target = Array2::from_shape_simple_fn((6, 6), || rng.random_range(0.0..1.0));
        let mut mask = Array2::from_shape_simple_fn((6, 6), || rng.random_bool(0.5));
        mask[[0, 0]] = true;
        let loss = LossSpec::masked(1e-4);
        let base = chain_backprop(&refs, x.view(), target.view(), Some(&mask), &loss).unwrap();
        for ((r, c), &observed) in mask.indexed_iter() {
            if observed {
                continue;
            }
            for value in [0.0, 1.0, -7.5, 1e6] {
                let mut mutated = target.clone();
                mutated[[r, c]] = value;
                let again = chain_backprop(&refs, x.view(), mutated.view(), Some(&mask), &loss).unwrap();
                let same_loss = again.0.to_bits() == base.0.to_bits();
                let same_grads = again
                    .1
                    .iter()
                    .zip(&base.1)
                    .all(|(a, b)| a.flatten().iter().zip(b.flatten()).all(|(p, q)| p.to_bits() == q.to_bits()));
                checked += 1;
                if !(same_loss && same_grads) {
                    failures += 1;
                }
            }
        }
    }
    outcome(failures == 0, format!("{checked} mutations of unobserved cells, {failures} changed the result"))
}

// 3 ---------------------------------------------------------------------------

fn adam_closed_form() -> Outcome {
    let config = AdamConfig::default();
    let mut worst: f64 = 0.0;
    for &g in &[1.0, -1.0, 0.5, -3.0, 1e-3, 42.0, -1e-6] {
        for &lr in &[1e-3, 1e-2, 0.1] {
            for &start in &[0.0, 1.5, -2.0] {
                let mut state = AdamState::new([1], config);
                let mut value = [start];
                let grad = [g];
                let mut params = [Param {
                    name: "w".into(),
                    value: &mut value,
                    grad: &grad,
                }];
                state.step(&mut params, lr).unwrap();
                let m_hat = (1.0 - config.beta1) * g / (1.0 - config.beta1);
                let v_hat = (1.0 - config.beta2) * g * g / (1.0 - config.beta2);
                let expected = start - lr * m_hat / (v_hat.sqrt() + config.epsilon);
                worst = worst.max((value[0] - expected).abs());
            }
        }
    }
    outcome(worst <= 1e-12, format!("max deviation {worst:.1e} over 63 scalar problems"))
}

// 4, 5, 6 -----------------------------------------------------------------------

struct MethodRuns {
    full: EvalReport,
    without_coupled: EvalReport,
    without_init: EvalReport,
}

fn method_runs(method: Method, pair: &DomainPair) -> MethodRuns {
    let spec = pinned(method).experiment();
    let (mut r, _) = run_variants(
        &spec,
        pair,
        &[Variant::FULL, Variant::WITHOUT_COUPLED, Variant::WITHOUT_INIT],
    )
    .expect("pinned experiment");
    let without_init = r.pop().unwrap();
    let without_coupled = r.pop().unwrap();
    let full = r.pop().unwrap();
    MethodRuns {
        full,
        without_coupled,
        without_init,
    }
}

fn coupled_direction(runs: &[(Method, &MethodRuns)], seconds: f64) -> Outcome {
    let mut ok = seconds < 600.0;
    let mut parts = Vec::new();
    for (method, r) in runs {
        let margin = r.without_coupled.rmse_mean - r.full.rmse_mean;
        let needed = match method {
            Method::Cacdr => COUPLED_MARGIN_CACDR,
            _ => COUPLED_MARGIN_LFACDR,
        };
        ok &= margin >= needed;
        parts.push(format!(
            "{method} with {:.4} vs without {:.4} (margin {margin:.4}, need {needed})",
            r.full.rmse_mean, r.without_coupled.rmse_mean
        ));
    }
    outcome(ok, format!("{}; {seconds:.0}s", parts.join("; ")))
}

fn init_direction(runs: &[(Method, &MethodRuns)]) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for (method, r) in runs {
        ok &= r.full.rmse_mean < r.without_init.rmse_mean;
        parts.push(format!(
            "{method} with {:.4} vs without {:.4}",
            r.full.rmse_mean, r.without_init.rmse_mean
        ));
    }
    outcome(ok, parts.join("; "))
}

fn beats_baseline(runs: &[(Method, &MethodRuns)], baseline: &EvalReport) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for (method, r) in runs {
        let every = r
            .full
            .repeats
            .iter()
            .zip(&baseline.repeats)
            .all(|(m, b)| m.rmse < b.rmse);
        ok &= every && r.full.rmse_mean < baseline.rmse_mean;
        parts.push(format!("{method} {:.4} (every repeat: {every})", r.full.rmse_mean));
    }
    outcome(ok, format!("{}; baseline {:.4}", parts.join("; "), baseline.rmse_mean))
}

// 7 ---------------------------------------------------------------------------

fn latent_robustness(pair: &DomainPair) -> Outcome {
    let grid = AblationGrid::Latent(AblationGrid::DEFAULT_DIMS.to_vec());
    let mut ok = true;
    let mut parts = Vec::new();
    for method in [Method::Cacdr, Method::Lfacdr] {
        let result = run_ablation(&grid, &pinned(method).experiment(), pair).expect("latent sweep");
        let rmse: Vec<f64> = result.cells.iter().map(|(_, r)| r.rmse_mean).collect();
        let min = rmse.iter().copied().fold(f64::INFINITY, f64::min);
        let max = rmse.iter().copied().fold(0.0, f64::max);
        let spread = max / min;
        ok &= spread <= LATENT_SPREAD;
        let cells: Vec<String> = result
            .cells
            .iter()
            .map(|(l, r)| format!("{l}:{:.4}", r.rmse_mean))
            .collect();
        parts.push(format!("{method} spread {spread:.3} [{}]", cells.join(" ")));
    }
    outcome(ok, format!("{} (limit {LATENT_SPREAD})", parts.join("; ")))
}

// 8 ---------------------------------------------------------------------------

/// Uses the default LFACDR networks (k = 128, batch 500): the reduced desk
/// networks stall near 0.07 on the sparser source domain within 500 epochs.
fn exact_recovery() -> Outcome {
    let run = pinned(Method::Lfacdr);
    let spec = SyntheticSpec {
        noise: 0.0,
        ..run.synth.clone().expect("synthetic pinned pair")
    };
    let (pair, _) = generate_synthetic(&spec).unwrap();
    let mut config = TrainConfig::lfacdr_defaults();
    config.init.epochs = RECOVERY_EPOCHS;
    config.seed = run.seed;
    let k = config.latent_dim();
    let plan = &make_splits(&pair, run.split_ratio, 1, run.seed).unwrap()[0];
    let views = apply_cold_start(&pair, plan).unwrap();
    let train = TrainViews::new(&pair.source, &views.train, pair.shared_axis, &plan.train).unwrap();
    let (model, _) = lfacdr::init_stage(&train, &config).unwrap();
    let all = |n: usize| (0..n).collect::<Vec<usize>>();
    let s = &pair.source;
    let source = lfacdr::rating_rmse(&model.source, s, &all(s.n_items()), &all(s.n_users())).unwrap();
    let t = &views.train;
    let target = lfacdr::rating_rmse(&model.target, t, &plan.train, &all(t.n_users())).unwrap();
    outcome(
        source < RECOVERY_RMSE && target < RECOVERY_RMSE,
        format!(
            "k={k} >= k*={}, {RECOVERY_EPOCHS} epochs: source {source:.4}, target {target:.4} (need < {RECOVERY_RMSE})",
            spec.rank
        ),
    )
}

// 9 ---------------------------------------------------------------------------

fn cdrec(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_cdrec"))
        .args(args)
        .output()
        .expect("run cdrec")
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let small = [
        "--quiet", "--seed", "11", "train", "--method", "lfacdr", "--synth", "default",
        "--repeats", "2", "--encoder-layers", "16,8", "--mapper-hidden", "8",
        "--init-epochs", "5", "--coupled-epochs", "5", "--batch-size", "32",
    ];
    let out = dir.path().join("run");
    let out_str = out.to_str().unwrap().to_string();
    let mut args = small.to_vec();
    args.extend(["--out", &out_str]);
    let mut bytes = Vec::new();
    for _ in 0..2 {
        let status = cdrec(&args);
        if !status.status.success() {
            return outcome(false, format!("train failed: {}", String::from_utf8_lossy(&status.stderr)));
        }
        let report = std::fs::read(out.join("report.json")).unwrap();
        let ckpt = std::fs::read(out.join("checkpoint.json")).unwrap();
        bytes.push((report, ckpt));
    }
    let reports_equal = bytes[0].0 == bytes[1].0;
    let checkpoints_equal = bytes[0].1 == bytes[1].1;

    let mut spec = pinned(Method::Cacdr).experiment();
    spec.train.init.epochs = 20;
    spec.train.coupled.epochs = 20;
    spec.repeats = 4;
    let pair = pinned_pair();
    let serial = run_experiment(&spec, &pair).unwrap();
    spec.jobs = 4;
    let parallel = run_experiment(&spec, &pair).unwrap();
    let worst = serial
        .repeats
        .iter()
        .zip(&parallel.repeats)
        .map(|(a, b)| (a.rmse - b.rmse).abs().max((a.mae - b.mae).abs()))
        .fold((serial.rmse_mean - parallel.rmse_mean).abs(), f64::max);
    outcome(
        reports_equal && checkpoints_equal && worst <= 1e-10,
        format!(
            "rerun report identical: {reports_equal}, checkpoint identical: {checkpoints_equal}, serial vs 4 jobs max diff {worst:.1e}"
        ),
    )
}

// 10 --------------------------------------------------------------------------

fn protocol_fidelity(pair: &DomainPair) -> Outcome {
    let plans = make_splits(pair, 0.8, 10, 42).unwrap();
    let n = pair.shared_count();
    let mut ok = plans.len() == 10;
    let mut distinct = HashSet::new();
    for p in &plans {
        let train: HashSet<usize> = p.train.iter().copied().collect();
        let test: HashSet<usize> = p.test.iter().copied().collect();
        ok &= train.is_disjoint(&test);
        ok &= train.len() + test.len() == n;
        ok &= train.union(&test).copied().collect::<HashSet<_>>() == (0..n).collect();
        ok &= p.train.len() == (0.8 * n as f64).round() as usize;
        distinct.insert(p.test.clone());
    }
    ok &= distinct.len() == 10;

    // every half-star value on the 1–5 scale, plus the edges
    let mut normalized = 0;
    for half_steps in 0..=10 {
        let raw = half_steps as f64 * 0.5;
        match normalize(raw, 5.0) {
            Ok(v) => {
                ok &= raw > 0.0 && v > 0.0 && v <= 1.0 && (v - raw / 5.0).abs() < 1e-15;
                normalized += 1;
            }
            Err(_) => ok &= raw == 0.0,
        }
    }
    ok &= normalize(5.5, 5.0).is_err() && normalize(-1.0, 5.0).is_err();
    let zero = RatingMatrix::new(1, 1, vec![Rating { item: 0, user: 0, value: 0.0 }]);
    ok &= zero.is_err();
    outcome(
        ok,
        format!(
            "10 splits of {n}: 80/20 disjoint covers, {} distinct test sets; {normalized} raw values mapped into (0,1], 0 rejected",
            distinct.len()
        ),
    )
}

fn main() -> ExitCode {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut record = |name: &'static str, o: Outcome| {
        println!("{} criterion {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        results.push((name, o));
    };

    record("1 gradient correctness", gradient_correctness());
    record("2 masked-loss independence", masked_independence());
    record("3 adam closed form", adam_closed_form());

    let pair = pinned_pair();
    let started = Instant::now();
    let cacdr = method_runs(Method::Cacdr, &pair);
    let lfacdr_runs = method_runs(Method::Lfacdr, &pair);
    let seconds = started.elapsed().as_secs_f64();
    let baseline = run_experiment(&pinned(Method::Baseline).experiment(), &pair).unwrap();
    let runs = [(Method::Cacdr, &cacdr), (Method::Lfacdr, &lfacdr_runs)];
    record("4 coupled-learning direction", coupled_direction(&runs, seconds));
    record("5 initialization direction", init_direction(&runs));
    record("6 beats baseline", beats_baseline(&runs, &baseline));
    record("7 latent-dimension robustness", latent_robustness(&pair));
    record("8 exact recovery", exact_recovery());
    record("9 determinism", determinism());
    record("10 protocol fidelity", protocol_fidelity(&pair));

    let failed: Vec<&str> = results.iter().filter(|(_, o)| !o.passed).map(|(n, _)| *n).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", results.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
