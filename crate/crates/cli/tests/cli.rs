use std::path::{Path, PathBuf};
use std::process::Command;

use measel::penalty::{penalty_prime, PenaltySpec};
use measel::sim::{gen_analysis_with, stream_rng, ANALYSIS_TERMS};
use measel::study::Method;
use measel::tuning::{Criterion, TuningTrace};
use measel_cli::{cmd_analyze, cmd_fit, cmd_tune, AnalysisConfig};
use nalgebra::{DMatrix, DVector};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_measel"))
}

fn write_data(path: &Path, n: usize, error_sd: f64, seed: u64) {
    let (d, _) = gen_analysis_with(n, error_sd, &mut stream_rng(seed, 0));
    let mut w = csv::Writer::from_path(path).unwrap();
    w.write_record(["y", "w", "z1", "z2", "z3"]).unwrap();
    for i in 0..d.len() {
        let z = d.covariates_of(i);
        w.write_record([d.y[i], d.w[i], z[0], z[1], z[2]].map(|v| v.to_string()))
            .unwrap();
    }
    w.flush().unwrap();
}

fn config(input: PathBuf, sigma_u: f64) -> AnalysisConfig {
    AnalysisConfig {
        input: Some(input),
        sigma_u: Some(sigma_u),
        terms: vec!["saturated".into()],
        ..Default::default()
    }
}

/// Rows of the analysis terms on standardized columns, computed by hand.
fn oracle_rows(path: &Path) -> (Vec<[f64; 12]>, Vec<f64>) {
    let mut rd = csv::Reader::from_path(path).unwrap();
    let recs: Vec<Vec<f64>> = rd
        .records()
        .map(|r| r.unwrap().iter().map(|c| c.parse().unwrap()).collect())
        .collect();
    let n = recs.len() as f64;
    let std = |k: usize| {
        let m = recs.iter().map(|r| r[k]).sum::<f64>() / n;
        let s = (recs.iter().map(|r| (r[k] - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        recs.iter().map(|r| (r[k] - m) / s).collect::<Vec<_>>()
    };
    let (w, a, b, c) = (std(1), std(2), std(3), std(4));
    let rows = (0..recs.len())
        .map(|i| {
            let (w, a, b, c) = (w[i], a[i], b[i], c[i]);
            [w, w * a, w * b, w * c, 1.0, a, b, c, b * b, a * b, a * c, b * c]
        })
        .collect();
    (rows, recs.iter().map(|r| r[0]).collect())
}

/// Newton solve of the penalized logistic score equations on `active`, started at `beta`.
fn penalized_logistic(
    rows: &[[f64; 12]],
    y: &[f64],
    spec: &PenaltySpec,
    active: &[usize],
    mut beta: Vec<f64>,
) -> Vec<f64> {
    let n = rows.len() as f64;
    let k = active.len();
    for _ in 0..100 {
        let mut g = DVector::<f64>::zeros(k);
        let mut h = DMatrix::<f64>::zeros(k, k);
        for (r, &yi) in rows.iter().zip(y) {
            let eta: f64 = r.iter().zip(&beta).map(|(a, b)| a * b).sum();
            let mu = 1.0 / (1.0 + (-eta).exp());
            for (p, &i) in active.iter().enumerate() {
                g[p] += (yi - mu) * r[i] / n;
                for (q, &j) in active.iter().enumerate() {
                    h[(p, q)] -= mu * (1.0 - mu) * r[i] * r[j] / n;
                }
            }
        }
        for (p, &i) in active.iter().enumerate() {
            let b = beta[i];
            g[p] -= penalty_prime(b, spec);
            let (l, a) = (spec.lambda(), spec.a());
            if b.abs() > l && b.abs() < a * l {
                h[(p, p)] += 1.0 / (a - 1.0);
            }
        }
        let step = h.lu().solve(&(-&g)).unwrap();
        for (p, &i) in active.iter().enumerate() {
            beta[i] += step[p];
        }
        if step.amax() < 1e-12 {
            break;
        }
    }
    beta
}

#[test]
fn zero_error_analysis_matches_penalized_logistic() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("data.csv");
    write_data(&input, 800, 0.0, 3);
    let a = cmd_analyze(&config(input.clone(), 0.0)).unwrap();
    let (rows, y) = oracle_rows(&input);

    let mle = penalized_logistic(
        &rows,
        &y,
        &PenaltySpec::scad(0.0).unwrap(),
        &(0..12).collect::<Vec<_>>(),
        vec![0.0; 12],
    );
    let ee = a.fit(Method::Ee);
    for j in 0..12 {
        assert!(
            (ee.beta[j] - mle[j]).abs() < 1e-3,
            "EE {j}: {} vs {}",
            ee.beta[j],
            mle[j]
        );
    }
    for m in [Method::Gcv, Method::Bic] {
        let fit = a.fit(m);
        let spec = fit.penalty.unwrap();
        let oracle = penalized_logistic(&rows, &y, &spec, &fit.active, fit.beta.clone());
        for j in 0..12 {
            assert!(
                (fit.beta[j] - oracle[j]).abs() < 1e-3,
                "{m} {j}: {} vs {}",
                fit.beta[j],
                oracle[j]
            );
        }
    }
}

#[test]
fn bic_keeps_true_terms_across_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let truth = [0usize, 4, 5, 6];
    let mut kept = 0;
    for seed in 0..10 {
        let input = dir.path().join(format!("d{seed}.csv"));
        write_data(&input, 1000, 0.1, 100 + seed);
        let a = cmd_analyze(&config(input, 0.1)).unwrap();
        assert_eq!(a.labels, ANALYSIS_TERMS);
        if truth.iter().all(|&j| !a.fit(Method::Bic).is_zero(j)) {
            kept += 1;
        }
    }
    assert!(kept >= 9, "true terms kept in {kept} of 10 datasets");
}

#[test]
fn fit_tune_and_analyze_agree() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("data.csv");
    write_data(&input, 600, 0.1, 8);
    let mut cfg = config(input, 0.1);
    let analysis = cmd_analyze(&cfg).unwrap();

    let trace_path = dir.path().join("trace.csv");
    cfg.out = Some(trace_path.clone());
    let msg = cmd_tune(&cfg, Criterion::Bic).unwrap();
    let trace = TuningTrace::read_csv(std::fs::File::open(&trace_path).unwrap()).unwrap();
    assert_eq!(trace.len(), cfg.path.points);
    let best = trace
        .iter()
        .filter(|r| r.converged && r.bic.is_finite())
        .min_by(|a, b| a.bic.total_cmp(&b.bic))
        .unwrap();
    assert_eq!(best.lambda, analysis.fit(Method::Bic).lambda);
    assert!(msg.contains(&best.lambda.to_string()));

    let fit_path = dir.path().join("fit.csv");
    cfg.out = Some(fit_path.clone());
    cmd_fit(&cfg, 0.0).unwrap();
    let mut rd = csv::Reader::from_path(&fit_path).unwrap();
    let est: Vec<f64> = rd.records().map(|r| r.unwrap()[1].parse().unwrap()).collect();
    assert_eq!(est, analysis.fit(Method::Ee).beta);
}

#[test]
fn simulate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |out: &str| {
        let status = bin()
            .args([
                "simulate", "--design", "example1", "--n", "500", "--reps", "5", "--seed", "7",
            ])
            .arg("--c-cache")
            .arg(dir.path().join("c"))
            .arg("--out")
            .arg(dir.path().join(out))
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        assert!(String::from_utf8_lossy(&status.stdout).contains("| BIC |"));
        std::fs::read(dir.path().join(out).join("records.csv")).unwrap()
    };
    let a = run("a");
    let b = run("b");
    assert_eq!(a, b);
    let rows = String::from_utf8(a).unwrap().lines().count() - 1;
    assert_eq!(rows, 5 * 3);
}

#[test]
fn config_errors_exit_with_status_2() {
    let out = bin().args(["simulate", "--design", "example9"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("example1") && err.contains("example2"), "{err}");

    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("data.csv");
    write_data(&input, 100, 0.1, 1);
    let out = bin()
        .args(["analyze", "--sigma-u", "0.1", "--terms", ""])
        .arg("--input")
        .arg(&input)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    std::fs::write(dir.path().join("bad.csv"), "y,w\n1,0.3\n0,oops\n").unwrap();
    let out = bin()
        .args(["fit", "--sigma-u", "0.1", "--terms", "w,1"])
        .arg("--input")
        .arg(dir.path().join("bad.csv"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn excluded_terms_print_as_na() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("data.csv");
    write_data(&input, 600, 0.1, 5);
    let out = bin()
        .args(["analyze", "--sigma-u", "0.1", "--terms", "saturated"])
        .arg("--input")
        .arg(&input)
        .arg("--out")
        .arg(dir.path().join("res"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("| Term | EE | GCV | BIC |"));
    assert!(text.contains("0 (NA)"));
    let scores = std::fs::read_to_string(dir.path().join("res/scores.csv")).unwrap();
    let vals: Vec<f64> = scores
        .lines()
        .skip(1)
        .flat_map(|l| {
            l.split(',')
                .skip(1)
                .map(|v| v.parse::<f64>().unwrap())
                .collect::<Vec<_>>()
        })
        .collect();
    assert!(vals.iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(vals.contains(&0.0) && vals.contains(&1.0));
}
