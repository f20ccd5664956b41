//! Acceptance criteria, one PASS/FAIL line each. Exits nonzero if any fail.

#![allow(clippy::needless_range_loop)]

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use mpcl_cli::commands::{cmd_continual, cmd_prune, ContinualOutcome, FIRST_TASK_CHECKPOINT};
use mpcl_cli::ExperimentConfig;
use mpcl_core::continual::run_continual;
use mpcl_core::data::{synthetic_tasks, Blob, SyntheticSpec};
use mpcl_core::elbo::gaussian_kl;
use mpcl_core::grad::{finite_diff_check, LossOptions};
use mpcl_core::prune::fraction_with_variance_at_least;
use mpcl_core::report::parse_results_csv;
use mpcl_core::{
    Architecture, CLConfig, Checkpoint, KLWeights, KlMode, Method, PriorStore, ResultMatrix,
    SeededRng,
};

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

fn moment_consistency() -> Verdict {
    let mut worst = Vec::new();
    let mut pass = true;
    for kind in common::LAYER_KINDS {
        let (mut z, mut v) = (0.0f64, 0.0f64);
        for seed in 0..20 {
            let o = common::monte_carlo_case(kind, 1000 + seed, 100_000);
            z = z.max(o.mean_z);
            v = v.max(o.var_rel);
        }
        pass &= z < 4.0 && v < kind.var_tolerance();
        worst.push(format!("{kind:?} z={z:.2} var={:.1}%", 100.0 * v));
    }
    verdict(
        pass,
        format!("20 configs x 1e5 draws each; worst: {}", worst.join(", ")),
    )
}

fn gradient_correctness() -> Verdict {
    let mut worst = 0.0f64;
    let mut largest = 0;
    let mut failures = 0;
    for seed in 0..20 {
        let case = common::random_grad_case(500 + seed);
        let l = case.model.layout();
        largest = largest.max(l.total);
        let prior = PriorStore::standard_normal(l);
        let weights = KLWeights::uniform(l.total, 1e-2);
        let r = finite_diff_check(
            &case.model,
            &case.batch,
            &prior,
            &weights,
            &LossOptions::default(),
            1e-5,
            1e-4,
        )
        .expect("finite differences");
        worst = worst.max(r.max_rel_err);
        failures += r.failures.len() + usize::from(r.checked < 2 * l.total);
    }
    verdict(
        failures == 0 && largest <= 10_000,
        format!("20 architectures (<= {largest} params), max rel err {worst:.2e}"),
    )
}

/// Reference summand for the alternative KL form, written out term by term.
fn printed_summand(mq: f64, s2q: f64, mp: f64, s2p: f64) -> f64 {
    0.5 * (-1.0 + (mq - mp).powi(2) / s2q + (s2p / s2q).ln() + s2q / s2p)
}

fn kl_cases() -> Verdict {
    let unit = gaussian_kl(1.0, 1.0, 0.0, 1.0, KlMode::Standard).unwrap();
    let mut rng = SeededRng::new(3);
    let mut self_kl = 0.0f64;
    let mut min_kl = f64::INFINITY;
    let mut printed_err = 0.0f64;
    for _ in 0..10_000 {
        let (mq, mp) = (rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0));
        let s2q = 10f64.powf(rng.uniform(-6.0, 1.0));
        let s2p = 10f64.powf(rng.uniform(-6.0, 1.0));
        self_kl = self_kl.max(
            gaussian_kl(mq, s2q, mq, s2q, KlMode::Standard)
                .unwrap()
                .abs(),
        );
        min_kl = min_kl.min(gaussian_kl(mq, s2q, mp, s2p, KlMode::Standard).unwrap());
        let want = printed_summand(mq, s2q, mp, s2p);
        let got = gaussian_kl(mq, s2q, mp, s2p, KlMode::AsPrinted).unwrap();
        printed_err = printed_err.max((got - want).abs() / want.abs().max(1.0));
    }
    let pass =
        (unit - 0.5).abs() <= 1e-12 && self_kl <= 1e-12 && min_kl >= 0.0 && printed_err <= 1e-12;
    verdict(
        pass,
        format!(
            "KL(N(1,1)||N(0,1))={unit}, max |KL(q||q)|={self_kl:.1e}, min KL={min_kl:.2e}, as-printed err {printed_err:.1e}"
        ),
    )
}

fn metrics_oracle() -> Verdict {
    let hand =
        ResultMatrix::from_rows(&[vec![Some(0.9), Some(0.8)], vec![None, Some(0.95)]]).unwrap();
    let hand_ok =
        (hand.acc().unwrap() - 0.875).abs() < 1e-15 && (hand.bwt().unwrap() + 0.05).abs() < 1e-15;
    let mut rng = SeededRng::new(9);
    let mut mismatches = 0;
    for _ in 0..100 {
        let t = 10;
        let mut r = ResultMatrix::new(t);
        let mut dense = vec![vec![0.0; t]; t];
        for j in 0..t {
            for i in 0..=j {
                let v = rng.uniform(0.0, 1.0);
                dense[i][j] = v;
                r.set(i, j, v).unwrap();
            }
        }
        let acc: f64 = (0..t).map(|i| dense[i][t - 1]).sum::<f64>() / t as f64;
        let bwt: f64 = (0..t).map(|i| dense[i][t - 1] - dense[i][i]).sum::<f64>() / t as f64;
        if r.acc().unwrap() != acc || r.bwt().unwrap() != bwt {
            mismatches += 1;
        }
    }
    verdict(
        hand_ok && mismatches == 0,
        format!("hand case ok={hand_ok}, {mismatches}/100 random mismatches"),
    )
}

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist10k")
}

fn split_mnist_config(method: &str, seed: u64) -> ExperimentConfig {
    let d = data_dir();
    let text = format!(
        r#"
seed = {seed}

[dataset]
kind = "idx"
train_images = "{}"
train_labels = "{}"
test_images = "{}"
test_labels = "{}"
val_frac = 0.15
tasks = {{ kind = "split", partition = [[0, 1, 2, 3, 4], [5, 6, 7, 8, 9]] }}

[model]
hidden = [200, 200]

[method]
method = "{method}"
metric = "variance"
alpha_min = 5e-5
alpha_max = 1e-4
tau0 = 1e-5
tau_max = 1e-4
rho_init = -12.0

[train]
max_epochs = 20
batch_size = 128

[prune]
criteria = [{{ kind = "snr" }}, {{ kind = "variance" }}, {{ kind = "magnitude" }}, {{ kind = "random", seed = 0 }}]
fractions = [0.0, 0.5, 0.95]
task = 0
"#,
        d.join("train-images-idx3-ubyte.gz").display(),
        d.join("train-labels-idx1-ubyte.gz").display(),
        d.join("t10k-images-idx3-ubyte.gz").display(),
        d.join("t10k-labels-idx1-ubyte.gz").display(),
    );
    ExperimentConfig::from_toml(&text, Path::new("/")).expect("acceptance config")
}

struct Run {
    outcome: ContinualOutcome,
    out: PathBuf,
    seconds: f64,
}

fn run_method(method: &str, root: &Path, tag: &str) -> Run {
    let out = root.join(tag);
    let start = Instant::now();
    let outcome = cmd_continual(&split_mnist_config(method, 0), &out)
        .unwrap_or_else(|e| panic!("{tag}: {e:#}"));
    Run {
        outcome,
        out,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn pts(x: f64) -> f64 {
    100.0 * x
}

fn forgetting_direction(ft: &Run, lra: &Run, ppbi: &Run) -> Verdict {
    let (fa, fb) = (pts(ft.outcome.acc), pts(ft.outcome.bwt));
    let ok = |r: &Run| pts(r.outcome.bwt) >= fb + 0.5 && r.outcome.acc >= ft.outcome.acc;
    let slowest = ft.seconds.max(lra.seconds).max(ppbi.seconds);
    verdict(
        fb <= -1.0 && ok(lra) && ok(ppbi) && slowest < 1800.0,
        format!(
            "FT ACC {fa:.2} BWT {fb:+.2}; LRA ACC {:.2} BWT {:+.2}; PPBI ACC {:.2} BWT {:+.2}; slowest run {slowest:.0}s",
            pts(lra.outcome.acc),
            pts(lra.outcome.bwt),
            pts(ppbi.outcome.acc),
            pts(ppbi.outcome.bwt),
        ),
    )
}

fn baseline_sandwich(ft: &Run, lra: &Run, ppbi: &Run, jt: &Run) -> Verdict {
    let (f, l, p, j) = (
        ft.outcome.acc,
        lra.outcome.acc,
        ppbi.outcome.acc,
        jt.outcome.acc,
    );
    verdict(
        j >= l && l >= f && j >= p,
        format!(
            "ACC JT {:.2} LRA {:.2} PPBI {:.2} FT {:.2}",
            pts(j),
            pts(l),
            pts(p),
            pts(f)
        ),
    )
}

fn read_curves(path: &Path) -> Vec<(String, f64, f64)> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let c: Vec<&str> = l.split(',').collect();
            (
                c[0].to_owned(),
                c[1].parse().unwrap(),
                c[3].parse().unwrap(),
            )
        })
        .collect()
}

fn pruning_dominance(lra: &Run, root: &Path) -> Verdict {
    let out = root.join("prune");
    let start = Instant::now();
    cmd_prune(
        &split_mnist_config("lra", 0),
        &lra.out.join(FIRST_TASK_CHECKPOINT),
        &out,
    )
    .expect("prune");
    let seconds = start.elapsed().as_secs_f64();
    let curves = read_curves(&out.join("prune_curves.csv"));
    let drop = |c: &str, f: f64| {
        curves
            .iter()
            .find(|(n, fr, _)| n == c && *fr == f)
            .map(|r| r.2)
            .unwrap_or(f64::NAN)
    };
    let names = ["snr", "variance", "magnitude", "random_0"];
    let steeper = names.iter().all(|n| drop(n, 0.95) > drop(n, 0.5));
    let pass = drop("snr", 0.5) <= 2.0
        && drop("variance", 0.5) <= 2.0
        && drop("random_0", 0.5) > drop("snr", 0.5)
        && steeper
        && seconds < 300.0;
    let table: Vec<String> = names
        .iter()
        .map(|n| format!("{n} {:.2}/{:.2}", drop(n, 0.5), drop(n, 0.95)))
        .collect();
    verdict(
        pass,
        format!(
            "drop at 0.5/0.95 (points): {}; {seconds:.1}s",
            table.join(", ")
        ),
    )
}

fn sparsity_cdf(lra: &Run) -> Verdict {
    let ck = Checkpoint::load(&lra.out.join(FIRST_TASK_CHECKPOINT)).expect("checkpoint");
    let frac = fraction_with_variance_at_least(&ck.model, 0.5);
    let max_s2 = ck.model.flat_sigma2()[..ck.model.layout().trunk_len]
        .iter()
        .cloned()
        .fold(0.0, f64::max);
    verdict(
        frac >= 0.5,
        format!(
            "{:.2}% of trunk parameters with variance >= 0.5 (largest {max_s2:.2e})",
            100.0 * frac
        ),
    )
}

fn determinism(lra: &Run, again: &Run) -> Verdict {
    let a = std::fs::read(lra.out.join("results.csv")).unwrap();
    let b = std::fs::read(again.out.join("results.csv")).unwrap();
    let parsed = parse_results_csv(&String::from_utf8_lossy(&a)).unwrap();
    verdict(
        a == b && parsed.results.completed() == 2,
        format!("results.csv {} bytes, identical={}", a.len(), a == b),
    )
}

fn three_blob_tasks() -> SyntheticSpec {
    let blob = |c: [f64; 4]| Blob {
        center: c.to_vec(),
        std: vec![0.7; 4],
    };
    SyntheticSpec {
        tasks: vec![
            vec![blob([2.0, 0.0, 0.0, 0.0]), blob([-2.0, 0.0, 0.0, 0.0])],
            vec![blob([0.0, 2.0, 0.0, 1.0]), blob([0.0, -2.0, 0.0, -1.0])],
            vec![blob([0.0, 0.0, 2.0, -1.0]), blob([1.0, 0.0, -2.0, 1.0])],
        ],
        train_per_class: 80,
        test_per_class: 40,
        val_frac: 0.15,
    }
}

fn prior_replacement(ppbi: &Run) -> Verdict {
    let mut worst = ppbi
        .outcome
        .run
        .records
        .iter()
        .filter_map(|r| r.prior_kl_after_switch)
        .fold(0.0f64, |m, k| m.max(k.abs()));
    let switches = ppbi
        .outcome
        .run
        .records
        .iter()
        .filter(|r| r.prior_kl_after_switch.is_some())
        .count();

    let tasks = synthetic_tasks(&three_blob_tasks(), 2).unwrap();
    let arch = Architecture::mlp(&[4], &[12, 12], &[2, 2, 2]);
    let mut cfg = CLConfig::new(Method::Ppbi);
    cfg.train.max_epochs = 5;
    cfg.train.batch_size = 32;
    let mut synthetic_switches = 0;
    run_continual(&arch, &tasks, &cfg, |p| {
        if let Some(k) = p.record.prior_kl_after_switch {
            worst = worst.max(k.abs());
            synthetic_switches += 1;
        }
        Ok(())
    })
    .expect("ppbi run");

    cfg.method = Method::Ff;
    let mut trunks: Vec<(Vec<u64>, Vec<u64>)> = Vec::new();
    run_continual(&arch, &tasks, &cfg, |p| {
        let n = p.model.layout().trunk_len;
        let bits = |v: Vec<f64>| v[..n].iter().map(|x| x.to_bits()).collect::<Vec<u64>>();
        trunks.push((bits(p.model.flat_mu()), bits(p.model.flat_sigma2())));
        Ok(())
    })
    .expect("ff run");
    let frozen = trunks.len() == 3 && trunks[1..].iter().all(|t| *t == trunks[0]);
    verdict(
        worst <= 1e-12 && switches >= 1 && synthetic_switches >= 2 && frozen,
        format!(
            "max prior KL after {} switches {worst:.1e}; FF trunk identical over tasks 2..3: {frozen}",
            switches + synthetic_switches
        ),
    )
}

fn main() -> ExitCode {
    let mut verdicts: Vec<(usize, &str, Verdict, f64)> = Vec::new();
    let mut timed = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Verdict| {
        let start = Instant::now();
        let v = f();
        let s = start.elapsed().as_secs_f64();
        println!(
            "criterion {n:>2} {} {name}: {} [{s:.1}s]",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        verdicts.push((n, name, v, s));
    };
    timed(1, "Monte-Carlo moment consistency", &mut moment_consistency);
    timed(2, "gradient correctness", &mut gradient_correctness);
    timed(3, "KL/ELBO analytic cases", &mut kl_cases);
    timed(4, "metrics oracle", &mut metrics_oracle);

    let root = tempfile::tempdir().expect("temp dir");
    let start = Instant::now();
    let r = root.path();
    let (ft, lra, ppbi, jt) = (
        run_method("ft", r, "ft"),
        run_method("lra", r, "lra"),
        run_method("ppbi", r, "ppbi"),
        run_method("jt", r, "jt"),
    );
    let again = run_method("lra", r, "lra_again");
    println!(
        "split MNIST runs finished in {:.0}s",
        start.elapsed().as_secs_f64()
    );

    timed(5, "catastrophic-forgetting direction", &mut || {
        forgetting_direction(&ft, &lra, &ppbi)
    });
    timed(6, "baseline sandwich", &mut || {
        baseline_sandwich(&ft, &lra, &ppbi, &jt)
    });
    timed(7, "pruning dominance", &mut || {
        pruning_dominance(&lra, root.path())
    });
    timed(8, "sparsity-prior CDF direction", &mut || {
        sparsity_cdf(&lra)
    });
    timed(9, "determinism", &mut || determinism(&lra, &again));
    timed(10, "PPBI prior replacement and FF freeze", &mut || {
        prior_replacement(&ppbi)
    });

    let failed: Vec<String> = verdicts
        .iter()
        .filter(|v| !v.2.pass)
        .map(|v| v.0.to_string())
        .collect();
    println!(
        "{}/{} criteria passed",
        verdicts.len() - failed.len(),
        verdicts.len()
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
