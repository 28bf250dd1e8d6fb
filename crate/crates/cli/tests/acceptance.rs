//! End-to-end acceptance run: one PASS/FAIL line per criterion, nonzero exit
//! when any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use bnml_cli::commands::{run_training, TrainOutcome};
use bnml_cli::config::{DataSource, RunConfig};
use bnml_core::dataset::{Example1Config, Example2Config};
use bnml_core::harness::{
    configure_threads, fit_rate, repeat_seeds, run_example1, run_example2, sample_margin_spread,
    tail_for_decades,
};
use bnml_core::solvers::{solve_max_margin, solve_uniform_margin};
use bnml_core::trainer::{gamma_envelope_report, monotonicity_report};
use bnml_core::verify::{run_suite, random_instance, Suite, VerifyOptions, VerifyReport};
use bnml_core::{Certificate, Dataset, ModelKind, Rng};

const SEED: u64 = 1;

struct Outcome {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(out: &Outcome) {
    let tag = if out.pass { "PASS" } else { "FAIL" };
    println!("{tag} criterion {:>2} {}: {}", out.id, out.name, out.detail);
}

fn equalization_config(model: ModelKind, eta: f64) -> RunConfig {
    let mut cfg = RunConfig { seed: SEED, ..RunConfig::default() };
    cfg.dataset.source = DataSource::Gaussian;
    cfg.dataset.n = 50;
    cfg.dataset.d = Some(1000);
    cfg.train.model = model;
    cfg.train.eta = eta;
    cfg.train.init_scale = 0.01;
    cfg.train.steps = 200_000;
    cfg.train.log_every = 100;
    cfg.finish().expect("valid config")
}

fn cnn_config() -> RunConfig {
    let mut cfg = RunConfig { seed: 5, ..RunConfig::default() };
    cfg.dataset.n = 6;
    cfg.dataset.patches = 3;
    cfg.dataset.d = Some(30);
    cfg.train.model = ModelKind::BnCnn;
    cfg.train.eta = 5e-4;
    cfg.train.steps = 20_000;
    cfg.finish().expect("valid config")
}

fn example1_cnn_config() -> RunConfig {
    let mut cfg = RunConfig { seed: SEED, ..RunConfig::default() };
    cfg.dataset.source = DataSource::Example1;
    cfg.dataset.n = 20;
    cfg.dataset.patches = 4;
    cfg.train.model = ModelKind::BnCnn;
    cfg.train.eta = 5e-4;
    cfg.train.steps = 20_000;
    cfg.finish().expect("valid config")
}

fn train(cfg: &RunConfig) -> TrainOutcome {
    let o = run_training(cfg, false).expect("training starts");
    if let Some(e) = &o.run.halted {
        panic!("training halted: {e}");
    }
    o
}

fn ratio(o: &TrainOutcome) -> f64 {
    let rows = &o.run.trace.rows;
    rows.last().unwrap().discrepancy / rows[0].discrepancy
}

fn checks_pass(report: &VerifyReport, names: &[&str]) -> (bool, String) {
    let mut ok = true;
    let mut parts = Vec::new();
    for name in names {
        match report.checks.iter().find(|c| c.name == *name) {
            Some(c) => {
                ok &= c.passed() && c.instances > 0;
                parts.push(format!("{} {}/{} worst {:.2e} (tol {:.0e})", c.name, c.instances - c.failures, c.instances, c.worst, c.tolerance));
            }
            None => {
                ok = false;
                parts.push(format!("{name} missing"));
            }
        }
    }
    (ok, parts.join("; "))
}

fn main() {
    configure_threads().expect("BNML_THREADS");
    let mut outcomes = Vec::new();

    // Margin-equalization runs at the stated hyperparameters, plus a smaller step on the same data.
    let clock = Instant::now();
    let bn = train(&equalization_config(ModelKind::BnLinear, 0.05));
    let plain = train(&equalization_config(ModelKind::Plain, 0.05));
    let fig1_secs = clock.elapsed().as_secs_f64();
    let companion = train(&equalization_config(ModelKind::BnLinear, 0.005));
    let cnn = train(&cnn_config());
    let ex1_cnn = train(&example1_cnn_config());

    let spread = sample_margin_spread(&bn.run.state.w, &bn.data);
    let (bn_ratio, plain_ratio) = (ratio(&bn), ratio(&plain));
    outcomes.push(Outcome {
        id: 1,
        name: "gaussian margin equalization",
        pass: spread <= 1e-2 && bn_ratio <= 1e-4 && plain_ratio >= 0.1 && fig1_secs <= 300.0,
        detail: format!(
            "BN spread {spread:.3e} (<= 1e-2), BN D(T)/D(0) {bn_ratio:.3e} (<= 1e-4), plain D(T)/D(0) {plain_ratio:.3e} (>= 0.1), {fig1_secs:.0} s; \
             eta = 0.005 on the same data gives spread {:.3e}, D(T)/D(0) {:.3e}",
            sample_margin_spread(&companion.run.state.w, &companion.data),
            ratio(&companion)
        ),
    });

    let tail = tail_for_decades(&bn.run.trace, 2.0);
    match fit_rate(&bn.run.trace, tail) {
        Ok(fit) => {
            outcomes.push(Outcome {
                id: 2,
                name: "discrepancy rate shape",
                pass: fit.slope < 0.0 && fit.r_squared >= 0.9,
                detail: format!(
                    "slope {:.4e}, r^2 {:.4} over t in [{}, {}] ({} rows)",
                    fit.slope, fit.r_squared, fit.window.0, fit.window.1, fit.rows
                ),
            });
            outcomes.push(Outcome {
                id: 3,
                name: "loss rate 1/t",
                pass: fit.loss_band_ratio <= 50.0,
                detail: format!("max(tL)/min(tL) = {:.4} (<= 50)", fit.loss_band_ratio),
            });
        }
        Err(e) => {
            for (id, name) in [(2, "discrepancy rate shape"), (3, "loss rate 1/t")] {
                outcomes.push(Outcome { id, name, pass: false, detail: format!("fit failed: {e}") });
            }
        }
    }

    let opts = VerifyOptions { trials: 100, seed: 7, corrupt_gradient: false };
    let identities = run_suite(Suite::Identities, &opts);
    let gradients = run_suite(Suite::Gradients, &opts);
    let inequalities = run_suite(Suite::Inequalities, &opts);

    let (pass, detail) = checks_pass(&identities, &["wstar-inner-identity/linear", "wstar-inner-identity/cnn"]);
    outcomes.push(Outcome { id: 4, name: "gradient inner product identity", pass, detail });

    let (pass, detail) = checks_pass(
        &identities,
        &["sigma-distance-identity", "sigma-distance-sandwich", "sigma-distance-anchor"],
    );
    outcomes.push(Outcome { id: 5, name: "sigma-distance identity and sandwich", pass, detail });

    let (pass, detail) = checks_pass(
        &gradients,
        &["finite-difference", "gradient-orthogonality", "uniform-margin-stationarity"],
    );
    outcomes.push(Outcome { id: 6, name: "gradient correctness", pass, detail });

    let bn_runs: [(&str, &TrainOutcome, f64); 4] = [
        ("equalization", &bn, 0.05),
        ("equalization eta 0.005", &companion, 0.005),
        ("cnn gaussian", &cnn, 5e-4),
        ("cnn example-1", &ex1_cnn, 5e-4),
    ];
    let mut mono_ok = true;
    let mut mono = Vec::new();
    for (name, o, _) in bn_runs {
        let m = monotonicity_report(&o.run.trace, None);
        mono_ok &= o.run.norm_decreases == 0 && m.norm_violations == 0;
        mono.push(format!("{name}: {} step / {} logged violations", o.run.norm_decreases, m.norm_violations));
    }
    outcomes.push(Outcome { id: 7, name: "norm monotonicity", pass: mono_ok, detail: mono.join("; ") });

    let (rec_ok, rec_detail) = checks_pass(&inequalities, &["gamma-recurrence"]);
    let mut env_ok = rec_ok;
    let mut reached = 0;
    let mut env = vec![rec_detail];
    for (name, o, eta) in bn_runs {
        let r = gamma_envelope_report(&o.run.trace, eta);
        env_ok &= r.violations == 0;
        match r.start {
            Some((t, g)) => {
                reached += 1;
                env.push(format!("{name}: from t = {t} (gamma {g:.4}) {} rows, {} outside", r.checked, r.violations));
            }
            None => env.push(format!("{name}: spread never within a quarter of the margins")),
        }
    }
    outcomes.push(Outcome { id: 8, name: "gamma envelope", pass: env_ok && reached > 0, detail: env.join("; ") });

    let (pass, detail) = checks_pass(&inequalities, &["aux-inequality", "aux-inequality-anchor"]);
    outcomes.push(Outcome { id: 9, name: "auxiliary inequality", pass, detail });

    let clock = Instant::now();
    let e1 = Example1Config::regime_scale(20, 4);
    let reps: Vec<_> = repeat_seeds(SEED, 5, |rng| run_example1(&e1, 10_000, rng));
    let secs = clock.elapsed().as_secs_f64();
    let ok: Vec<_> = reps.iter().filter_map(|r| r.as_ref().ok()).collect();
    let pass = ok.len() == 5 && ok.iter().all(|r| r.error_uniform == 0.0 && r.error_max >= 0.05) && secs <= 60.0;
    outcomes.push(Outcome {
        id: 10,
        name: "signal-plus-noise example",
        pass,
        detail: format!(
            "uniform {:?}, max {:?}, {secs:.1} s",
            ok.iter().map(|r| r.error_uniform).collect::<Vec<_>>(),
            ok.iter().map(|r| format!("{:.4}", r.error_max)).collect::<Vec<_>>()
        ),
    });

    let e2 = Example2Config::default_scaling(50);
    let target = e2.rho / 8.0;
    let reps: Vec<_> = repeat_seeds(SEED, 5, |rng| run_example2(&e2, 20_000, rng));
    let ok: Vec<_> = reps.iter().filter_map(|r| r.as_ref().ok()).collect();
    let good = ok.iter().filter(|r| r.error_uniform <= 0.01 && r.error_max >= target).count();
    let ordered = ok.len() == 5 && ok.iter().all(|r| r.error_uniform < r.error_max);
    outcomes.push(Outcome {
        id: 11,
        name: "strong/weak mixture example",
        pass: good >= 4 && ordered,
        detail: format!(
            "d = {}, {good}/5 seeds meet both bounds (rho/8 = {target:.5}), uniform {:?}, max {:?}",
            e2.d,
            ok.iter().map(|r| format!("{:.5}", r.error_uniform)).collect::<Vec<_>>(),
            ok.iter().map(|r| format!("{:.5}", r.error_max)).collect::<Vec<_>>()
        ),
    });

    outcomes.push(solver_certificates());
    outcomes.push(determinism());

    for o in &outcomes {
        report(o);
    }
    let failed = outcomes.iter().filter(|o| !o.pass).count();
    println!("{} of {} criteria passed", outcomes.len() - failed, outcomes.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn solver_certificates() -> Outcome {
    let mut rng = Rng::new(SEED).split(12);
    let (mut worst_res, mut worst_kkt) = (0.0f64, 0.0f64);
    let mut ok = true;
    for k in 0..50 {
        let inst = random_instance(&mut rng, 1 + k % 4, true);
        let data = inst.dataset().expect("instance");
        // d >= 2nP + 5 keeps the Gram matrix well conditioned
        let data = widen(&data, &mut rng);
        match (solve_uniform_margin(&data), solve_max_margin(&data)) {
            (Ok(u), Ok(m)) => {
                worst_res = worst_res.max(u.residual);
                if let Certificate::MaxMargin { kkt_violation, .. } = m.certificate {
                    worst_kkt = worst_kkt.max(kkt_violation);
                }
            }
            _ => ok = false,
        }
    }
    let anchor_u = Dataset::from_vectors(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![1.0, 1.0])
        .and_then(|d| solve_uniform_margin(&d))
        .map(|r| (r.solution[0] - 1.0).abs().max((r.solution[1] - 1.0).abs()))
        .unwrap_or(f64::INFINITY);
    let anchor_m = Dataset::from_vectors(vec![vec![1.0, 0.0], vec![-1.0, 0.0]], vec![1.0, -1.0])
        .and_then(|d| solve_max_margin(&d))
        .map(|r| (r.solution[0] - 1.0).abs().max(r.solution[1].abs()))
        .unwrap_or(f64::INFINITY);
    Outcome {
        id: 12,
        name: "solver certificates",
        pass: ok && worst_res <= 1e-10 && worst_kkt <= 1e-8 && anchor_u <= 1e-8 && anchor_m <= 1e-8,
        detail: format!(
            "50 instances: worst w* residual {worst_res:.2e} (<= 1e-10), worst KKT {worst_kkt:.2e} (<= 1e-8); anchors off by {anchor_u:.1e}, {anchor_m:.1e}"
        ),
    }
}

/// Pads every patch with fresh Gaussian coordinates up to `d = 2nP + 5`.
fn widen(data: &Dataset, rng: &mut Rng) -> Dataset {
    let target = (2 * data.rows() + 5).max(data.d());
    let samples = (0..data.n())
        .map(|i| {
            (0..data.patches())
                .map(|p| {
                    let mut v = data.patch(i, p).to_vec();
                    v.extend(rng.normal_vec(target - data.d()));
                    v
                })
                .collect()
        })
        .collect();
    Dataset::from_patches(samples, data.labels().to_vec()).expect("widened instance")
}

fn bnml(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_bnml"))
        .args(args)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn determinism() -> Outcome {
    let root = std::env::temp_dir().join(format!("bnml-acceptance-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&root);
    let runs: [(&str, Vec<&str>, &[&str]); 5] = [
        (
            "train",
            vec!["train", "--n", "20", "--d", "100", "--steps", "2000", "--seed", "3", "--plot"],
            &["trace.csv", "state.json", "config.json", "margins.svg"],
        ),
        ("verify", vec!["verify", "--trials", "5", "--seed", "2"], &["verify.json", "config.json"]),
        (
            "example",
            vec!["example", "--which", "1", "--n", "10", "--P", "4", "--mc", "2000", "--seeds", "3"],
            &["report.json", "summary.txt", "config.json"],
        ),
        (
            "ratefit",
            vec!["ratefit", "--n", "10", "--d", "40", "--steps", "2000", "--eta", "0.005", "--log-every", "10"],
            &["ratefit.json", "ratefit.svg", "trace.csv", "config.json"],
        ),
        ("solve", vec!["solve", "--data", "example1", "--n", "8", "--P", "4"], &["solution.json", "config.json"]),
    ];
    let mut ok = true;
    let mut notes = Vec::new();
    for (name, args, files) in &runs {
        let dirs: Vec<_> = ["a", "b"].iter().map(|r| root.join(name).join(r)).collect();
        for d in &dirs {
            let mut a = args.clone();
            let ds = d.to_str().unwrap().to_string();
            a.extend(["--out", ds.as_str()]);
            ok &= bnml(&a);
        }
        let same = files.iter().all(|f| same_bytes(&dirs[0].join(f), &dirs[1].join(f)));
        ok &= same;
        notes.push(format!("{name} {}", if same { "identical" } else { "DIFFERS" }));
    }
    let _ = std::fs::remove_dir_all(&root);
    Outcome { id: 13, name: "determinism", pass: ok, detail: notes.join(", ") }
}

fn same_bytes(a: &Path, b: &Path) -> bool {
    matches!((std::fs::read(a), std::fs::read(b)), (Ok(x), Ok(y)) if x == y)
}
