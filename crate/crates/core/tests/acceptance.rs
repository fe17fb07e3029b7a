//! Acceptance gate. Runs every criterion, prints one line each, and exits
//! nonzero if any fails.

use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use condot::cli::retain_freed_memory;
use condot::data::{CountsDistribution, Dataset, FamilyKind, SyntheticFamily};
use condot::eotreg::{semidual_value, sinkhorn, DiscreteMeasure, GradRequest, SINKHORN_MAX_ITER, SINKHORN_TOL};
use condot::metrics::{ks_statistic, sorted_fraction, w2_squared, EmpiricalSample};
use condot::pairgraph::{build_mst, build_pair_set, orient, validate};
use condot::trainer::{
    dsgda_update, loss_estimate, train, DsgdaRates, MinimaxObjective, TrainConfig, TrainOutcome, TrainProblem,
    TrainState,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[path = "support/oracles.rs"]
mod oracles;

// ---- pinned tolerances and budgets ----
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_FD_STEP: f64 = 1e-6;
/// Components below this magnitude are compared absolutely.
const GRAD_REL_FLOOR: f64 = 1e-7;
const GRAD_SEEDS: u64 = 20;
const GRAD_BUDGET: Duration = Duration::from_secs(30);
const W2_TOL: f64 = 1e-9;
const DUALITY_TOL: f64 = 1e-6;
const WEAK_DUALITY_SLACK: f64 = 1e-9;
const SADDLE_TOL: f64 = 1e-6;
const SADDLE_MAX_STEPS: usize = 10_000;
const RECOVERY_RATIO: f64 = 0.6;
const RECOVERY_BUDGET: Duration = Duration::from_secs(600);
const MONOTONE_MIN: f64 = 0.9;
const MONOTONE_K: usize = 256;

// ---- synthetic end-to-end setup ----
const FAMILY_SEED: u64 = 2024;
const TRAIN_COVARIATES: usize = 200;
const TEST_COVARIATES: usize = 200;
const ORACLE_SAMPLES: usize = 10_000;
const GENERATED_SAMPLES: usize = 10_000;
const TRAIN_SEEDS: [u64; 3] = [0, 1, 2];

fn recovery_config(seed: u64) -> TrainConfig {
    TrainConfig {
        bandwidth: 0.3,
        epsilon: 1.0,
        lambda: 0.4,
        r1: 3.0,
        r2: 2.0,
        gamma: 0.5,
        delta: 0.7,
        alpha: 0.001,
        beta: 0.001,
        iterations: 20_000,
        // Narrower than the library default to fit the single-core budget.
        hidden_widths: vec![48; 6],
        batch_size: 64,
        mc_samples: 32,
        log_every: 1000,
        seed,
    }
}

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

// ---- 1 ----------------------------------------------------------------------

fn gradient_check() -> Verdict {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..GRAD_SEEDS {
        let fam = SyntheticFamily::new(FamilyKind::HeteroscedasticSine, 2, seed).unwrap();
        let ds = fam.generate(7, CountsDistribution::Uniform { low: 1, high: 4 }, 0).unwrap();
        let cfg = TrainConfig {
            hidden_widths: vec![8, 8],
            batch_size: 6,
            mc_samples: 4,
            seed,
            ..TrainConfig::default()
        };
        let problem = TrainProblem::<f64>::new(&ds, cfg.bandwidth).unwrap();
        let mut state = TrainState::init(problem.len(), problem.dim(), &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let nets = state.generator.params_mut().iter_mut().chain(state.potential.params_mut());
        for v in nets.chain(state.p.iter_mut()).chain(state.q.iter_mut()) {
            *v += rng.random_range(-0.1..0.1);
        }
        let batch = state.next_batch(&problem, &cfg).unwrap();
        let est = loss_estimate(&problem, &state, &cfg, &batch, GradRequest::BOTH).unwrap();
        let value = |s: &TrainState<f64>| loss_estimate(&problem, s, &cfg, &batch, GradRequest::NONE).unwrap().loss;
        let fd_theta = oracles::finite_difference_gradient(
            &mut |th| {
                let mut s = state.clone();
                s.generator.set_params(th).unwrap();
                value(&s)
            },
            state.generator.params(),
            GRAD_FD_STEP,
        );
        let fd_phi = oracles::finite_difference_gradient(
            &mut |ph| {
                let mut s = state.clone();
                s.potential.set_params(ph).unwrap();
                value(&s)
            },
            state.potential.params(),
            GRAD_FD_STEP,
        );
        worst = worst
            .max(oracles::max_relative_error(est.grad_theta.as_ref().unwrap(), &fd_theta, GRAD_REL_FLOOR))
            .max(oracles::max_relative_error(est.grad_phi.as_ref().unwrap(), &fd_phi, GRAD_REL_FLOOR));
    }
    let elapsed = start.elapsed();
    verdict(
        worst < GRAD_REL_TOL && elapsed < GRAD_BUDGET,
        format!("max rel err {worst:.2e} (< {GRAD_REL_TOL:e}) over {GRAD_SEEDS} seeds in {:.1}s (< 30s)", elapsed.as_secs_f64()),
    )
}

// ---- 2 ----------------------------------------------------------------------

fn w2_oracle() -> Verdict {
    let fixed: f64 = w2_squared(
        &EmpiricalSample::new(vec![0.0, 1.0]).unwrap(),
        &EmpiricalSample::new(vec![0.0, 0.0, 3.0]).unwrap(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(1..=11);
        let m = rng.random_range(1..=12 - n);
        let draw = |rng: &mut ChaCha8Rng, k: usize| -> Vec<f64> {
            // small integer grid forces ties and repeated atoms
            (0..k).map(|_| rng.random_range(-4..=4) as f64 * 0.5 + rng.random_range(0..2) as f64 * 0.1).collect()
        };
        let (a, b) = (draw(&mut rng, n), draw(&mut rng, m));
        let got = w2_squared(&EmpiricalSample::new(a.clone()).unwrap(), &EmpiricalSample::new(b.clone()).unwrap());
        worst = worst.max((got - oracles::discrete_ot(&a, &b)).abs());
    }
    verdict(
        worst <= W2_TOL && (fixed - 1.5).abs() <= W2_TOL,
        format!("{{0,1}} vs {{0,0,3}} = {fixed}; max |w2 - OT| {worst:.1e} over 200 instances"),
    )
}

// ---- 3 ----------------------------------------------------------------------

fn random_measure(rng: &mut ChaCha8Rng) -> DiscreteMeasure<f64> {
    let n = rng.random_range(1..=8);
    let atoms = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = w.iter().sum();
    DiscreteMeasure::new(atoms, w.into_iter().map(|x| x / total).collect()).unwrap()
}

fn eot_duality() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_gap: f64 = 0.0;
    let mut worst_excess = f64::NEG_INFINITY;
    let mut probes = 0;
    for i in 0..50 {
        let (mu, nu) = (random_measure(&mut rng), random_measure(&mut rng));
        for eps in [0.1, 1.0, 10.0] {
            let sol = match sinkhorn(&mu, &nu, eps, SINKHORN_MAX_ITER, SINKHORN_TOL) {
                Ok(s) => s,
                Err(e) => return verdict(false, format!("instance {i}, eps {eps}: {e}")),
            };
            let dual = semidual_value(&sol.v, &mu, &nu, eps).unwrap();
            worst_gap = worst_gap.max((dual - sol.primal).abs());
            // 500 suboptimal potentials in total, spread over the instances
            let per = if i < 20 && eps == 1.0 { 25 } else { 0 };
            for _ in 0..per {
                let scale = [0.01, 0.3, 3.0][rng.random_range(0..3)];
                let v: Vec<f64> = sol.v.iter().map(|g| g + rng.random_range(-scale..scale)).collect();
                worst_excess = worst_excess.max(semidual_value(&v, &mu, &nu, eps).unwrap() - sol.primal);
                probes += 1;
            }
        }
    }
    verdict(
        worst_gap <= DUALITY_TOL && worst_excess <= WEAK_DUALITY_SLACK && probes == 500,
        format!("max |dual - primal| {worst_gap:.1e} over 150 solves; {probes} perturbed potentials, max excess {worst_excess:.1e}"),
    )
}

// ---- 4 ----------------------------------------------------------------------

fn ks_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    for _ in 0..200 {
        let n = rng.random_range(1..=15);
        let m = rng.random_range(1..=15);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-3..=3) as f64 * 0.25).collect();
        let b: Vec<f64> = (0..m).map(|_| rng.random_range(-3..=3) as f64 * 0.25).collect();
        let got = ks_statistic(&EmpiricalSample::new(a.clone()).unwrap(), &EmpiricalSample::new(b.clone()).unwrap());
        if got != oracles::ks_brute(&a, &b) {
            mismatches += 1;
        }
    }
    verdict(mismatches == 0, format!("{mismatches} exact mismatches over 200 instances"))
}

// ---- 5 ----------------------------------------------------------------------

fn mst_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut worst, mut invalid): (f64, usize) = (0.0, 0);
    for _ in 0..100 {
        let n = rng.random_range(1..=7);
        let d = rng.random_range(1..=3);
        let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(0..4) as f64).collect()).collect();
        let tree = build_mst(&pts).unwrap();
        worst = worst.max((tree.total_weight - oracles::mst_weight_exhaustive(&pts)).abs());
        let counts: Vec<usize> = (0..n).map(|_| rng.random_range(1..10)).collect();
        let root = rng.random_range(0..n);
        if !validate(&orient(&tree, root).unwrap()) || !validate(&build_pair_set(&pts, &counts).unwrap()) {
            invalid += 1;
        }
    }
    verdict(
        worst <= 1e-12 && invalid == 0,
        format!("max weight gap {worst:.1e} over 100 instances (n <= 7); {invalid} invalid orientations"),
    )
}

// ---- 6 ----------------------------------------------------------------------

struct SaddleToy;

impl MinimaxObjective<f64> for SaddleToy {
    fn grad_theta(&mut self, t: &[f64], f: &[f64]) -> condot::Result<Vec<f64>> {
        Ok(vec![2.0 * t[0] + f[0]])
    }
    fn grad_phi(&mut self, t: &[f64], f: &[f64]) -> condot::Result<Vec<f64>> {
        Ok(vec![t[0] - 2.0 * f[0]])
    }
}

fn saddle_toy() -> Verdict {
    let rates = DsgdaRates::from(&TrainConfig {
        alpha: 0.01,
        beta: 0.01,
        ..TrainConfig::default()
    });
    let (mut t, mut f) = (vec![1.0], vec![-1.0]);
    let (mut p, mut q) = (t.clone(), f.clone());
    let mut reached = None;
    for step in 0..SADDLE_MAX_STEPS {
        dsgda_update(&mut SaddleToy, &mut t, &mut f, &mut p, &mut q, &rates, step as u64).unwrap();
        if reached.is_none() && t[0].abs() < SADDLE_TOL && f[0].abs() < SADDLE_TOL {
            reached = Some(step + 1);
        }
    }
    verdict(
        reached.is_some() && t[0].abs() < SADDLE_TOL && f[0].abs() < SADDLE_TOL,
        format!(
            "within {SADDLE_TOL:e} of (0, 0) after {} steps (<= {SADDLE_MAX_STEPS}); final ({:.1e}, {:.1e})",
            reached.map_or("no".to_string(), |s| s.to_string()),
            t[0],
            f[0]
        ),
    )
}

// ---- 7, 8, 9 ----------------------------------------------------------------

struct Recovery {
    train: Dataset,
    test_x: Vec<Vec<f64>>,
    oracle: Vec<EmpiricalSample<f64>>,
}

impl Recovery {
    fn new() -> Self {
        let family = SyntheticFamily::new(FamilyKind::HeteroscedasticSine, 1, FAMILY_SEED).unwrap();
        let train = family
            .generate(TRAIN_COVARIATES, CountsDistribution::Uniform { low: 1, high: 5 }, 0)
            .unwrap();
        let test = family.generate(TEST_COVARIATES, CountsDistribution::Fixed { count: 1 }, 2).unwrap();
        let test_x: Vec<Vec<f64>> = test.groups.iter().map(|g| g.x.clone()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(FAMILY_SEED + 1);
        let oracle = test_x
            .iter()
            .map(|x| EmpiricalSample::new(family.sample_n(x, ORACLE_SAMPLES, &mut rng).unwrap()).unwrap())
            .collect();
        Self {
            train,
            test_x,
            oracle,
        }
    }

    fn mean_w2(&self, outcome: &TrainOutcome<f64>) -> f64 {
        let model = outcome.model();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let total: f64 = self
            .test_x
            .iter()
            .zip(&self.oracle)
            .map(|(x, o)| {
                let gen = EmpiricalSample::new(model.sample_iid(x, GENERATED_SAMPLES, &mut rng).unwrap()).unwrap();
                w2_squared(&gen, o)
            })
            .sum();
        total / self.test_x.len() as f64
    }

    /// Every test covariate receives the pooled training responses.
    fn pooled_baseline(&self) -> f64 {
        let pooled = EmpiricalSample::new(self.train.groups.iter().flat_map(|g| g.responses.clone()).collect()).unwrap();
        self.oracle.iter().map(|o| w2_squared(&pooled, o)).sum::<f64>() / self.oracle.len() as f64
    }

    fn run(&self, cfg: &TrainConfig) -> (TrainOutcome<f64>, f64, Duration) {
        let start = Instant::now();
        let outcome = train::<f64>(&self.train, cfg).unwrap();
        let w2 = self.mean_w2(&outcome);
        (outcome, w2, start.elapsed())
    }
}

fn end_to_end() -> Vec<(&'static str, Verdict)> {
    let rec = Recovery::new();
    let baseline = rec.pooled_baseline();

    let mut full = Vec::new();
    let mut first_outcome = None;
    let mut first_time = Duration::ZERO;
    for &seed in &TRAIN_SEEDS {
        let (outcome, w2, took) = rec.run(&recovery_config(seed));
        if first_outcome.is_none() {
            first_outcome = Some(outcome);
            first_time = took;
        }
        full.push(w2);
    }
    let ratio = full[0] / baseline;
    let c7 = verdict(
        ratio <= RECOVERY_RATIO && first_time < RECOVERY_BUDGET,
        format!(
            "seed {}: mean test W2^2 {:.5} vs pooled baseline {:.5} (ratio {ratio:.3} <= {RECOVERY_RATIO}); train+eval {:.0}s (< 600s)",
            TRAIN_SEEDS[0],
            full[0],
            baseline,
            first_time.as_secs_f64()
        ),
    );

    let mut no_reg = Vec::new();
    let mut no_smooth = Vec::new();
    for &seed in &TRAIN_SEEDS {
        let mut cfg = recovery_config(seed);
        cfg.lambda = 0.0;
        no_reg.push(rec.run(&cfg).1);
        let mut cfg = recovery_config(seed);
        cfg.r1 = 0.0;
        cfg.r2 = 0.0;
        no_smooth.push(rec.run(&cfg).1);
    }
    let wins = |abl: &[f64]| abl.iter().zip(&full).filter(|(a, f)| a > f).count();
    let (wr, ws) = (wins(&no_reg), wins(&no_smooth));
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.5}")).collect::<Vec<_>>().join(", ");
    let c8 = verdict(
        wr >= 2 && ws >= 2,
        format!(
            "full [{}]; no-reg [{}] worse in {wr}/3; no-smooth [{}] worse in {ws}/3 (need >= 2 each)",
            fmt(&full),
            fmt(&no_reg),
            fmt(&no_smooth)
        ),
    );

    let model = first_outcome.unwrap().model();
    let fractions: Vec<f64> = rec
        .test_x
        .iter()
        .map(|x| sorted_fraction(&model.sample_grid(x, MONOTONE_K).unwrap()))
        .collect();
    let mean = fractions.iter().sum::<f64>() / fractions.len() as f64;
    let min = fractions.iter().copied().fold(f64::INFINITY, f64::min);
    let c9 = verdict(
        mean >= MONOTONE_MIN,
        format!("grid K={MONOTONE_K}: mean non-inverted fraction {mean:.4} (>= {MONOTONE_MIN}), worst covariate {min:.4}"),
    );
    vec![
        ("7 synthetic end-to-end recovery", c7),
        ("8 ablation direction", c8),
        ("9 monotonicity diagnostic", c9),
    ]
}

// ---- 10 ---------------------------------------------------------------------

fn train_determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_condot");
    let data = tmp.path().join("data");
    let run = |args: &[&str]| {
        let out = Command::new(bin).args(args).env_remove("CONDOT_OUT").output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    };
    let d = data.to_str().unwrap();
    run(&["synth", "--n", "60", "--val", "5", "--test", "5", "--eval-count", "50", "--seed", "10", "--out", d]);
    let cfg = tmp.path().join("config.json");
    std::fs::write(&cfg, r#"{"hidden_widths": [16, 16, 16], "batch_size": 16, "mc_samples": 8, "iterations": 300}"#).unwrap();
    let mut ckpts = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        run(&["train", "--config", cfg.to_str().unwrap(), "--data", d, "--out", out.to_str().unwrap(), "--seed", "4"]);
        ckpts.push(std::fs::read(out.join("checkpoint.bin")).unwrap());
    }
    let same = ckpts[0] == ckpts[1];
    verdict(same, format!("two train runs, checkpoints of {} bytes, identical: {same}", ckpts[0].len()))
}

fn main() -> ExitCode {
    // Keep libtest's `--list` probing quiet.
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    retain_freed_memory();
    let mut results: Vec<(&str, Verdict)> = Vec::new();
    let mut report = |name: &'static str, v: Verdict| {
        println!("[{}] {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((name, v));
    };
    report("1 gradient correctness", gradient_check());
    report("2 1-D OT oracle", w2_oracle());
    report("3 EOT duality", eot_duality());
    report("4 KS oracle", ks_oracle());
    report("5 MST oracle", mst_oracle());
    report("6 DS-GDA saddle", saddle_toy());
    for (name, v) in end_to_end() {
        report(name, v);
    }
    report("10 train determinism", train_determinism());
    let failed = results.iter().filter(|(_, v)| !v.pass).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
