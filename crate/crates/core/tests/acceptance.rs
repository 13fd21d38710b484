//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs the full-size experiments, so it takes several minutes. The process
//! exits non-zero when an asserted criterion fails. Criterion 7 is reported
//! but not asserted.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use hnet_core::experiments::{self, ExperimentConfig, ExperimentId, RunStatus};
use hnet_core::ime::{gradient_symmetry_defect, verify_target_order, TruncatedModifiedHamiltonian};
use hnet_core::integrators::jacobian_symplecticity_defect;
use hnet_core::loss::{FlowDataset, FlowPair, ProbeBatch, Provenance, Sampling};
use hnet_core::net::{self, NetParameters};
use hnet_core::phase::reference_flow;
use hnet_core::{
    Activation, AnalyticSystem, CanonicalField, Method, NetArchitecture, PhaseState, Result, SolverConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    id: u32,
    passed: bool,
    asserted: bool,
    detail: String,
    elapsed: Duration,
}

fn record(id: u32, asserted: bool, start: Instant, result: Result<(bool, String)>) -> Outcome {
    let (passed, detail) = result.unwrap_or_else(|e| (false, format!("error: {e}")));
    let o = Outcome {
        id,
        passed,
        asserted,
        detail,
        elapsed: start.elapsed(),
    };
    println!(
        "criterion {}: {} ({:.1}s) {}{}",
        o.id,
        if o.passed { "PASS" } else { "FAIL" },
        o.elapsed.as_secs_f64(),
        o.detail,
        if o.asserted { "" } else { " [reported, not asserted]" }
    );
    o
}

fn metric(report: &experiments::ExperimentReport, key: &str) -> f64 {
    report.metric(key).unwrap_or(f64::NAN)
}

fn criterion1(dir: &Path) -> Result<(bool, String)> {
    let start = Instant::now();
    let mut cfg = ExperimentConfig::preset(ExperimentId::Table1);
    cfg.output_dir = dir.to_path_buf();
    let report = experiments::run_eval_loss(&cfg)?;
    let h = metric(&report, "loss.H.train");
    let m1 = metric(&report, "loss.MH1.train");
    let m2 = metric(&report, "loss.MH2.train");
    let fast = start.elapsed() < Duration::from_secs(60);
    let ok = (5e-4..=2e-3).contains(&h) && (1e-6..=5e-6).contains(&m1) && (3e-9..=3e-8).contains(&m2) && fast;
    Ok((ok, format!("H {h:.3e} in [5e-4,2e-3], MH1 {m1:.3e} in [1e-6,5e-6], MH2 {m2:.3e} in [3e-9,3e-8]")))
}

fn criteria2and3(dir: &Path) -> Result<experiments::ExperimentReport> {
    let mut cfg = ExperimentConfig::preset(ExperimentId::Table1);
    cfg.output_dir = dir.to_path_buf();
    experiments::run_table1(&cfg)
}

fn criterion2(report: &Result<experiments::ExperimentReport>, elapsed: Duration) -> Result<(bool, String)> {
    let report = report.as_ref().map_err(|e| hnet_core::Error::Config(e.to_string()))?;
    let train = metric(report, "loss.net.train");
    let test = metric(report, "loss.net.test");
    let mh1 = metric(report, "loss.MH1.train");
    let ok = report.status == RunStatus::Ok
        && train <= 1e-5
        && test <= 1e-5
        && train < 10.0 * mh1
        && elapsed < Duration::from_secs(30 * 60);
    Ok((ok, format!("net train {train:.3e}, test {test:.3e} (<= 1e-5), MH1x10 {:.3e}", 10.0 * mh1)))
}

fn criterion3(report: &Result<experiments::ExperimentReport>) -> Result<(bool, String)> {
    let report = report.as_ref().map_err(|e| hnet_core::Error::Config(e.to_string()))?;
    let gap_h = metric(report, "gap.H");
    let gap_1 = metric(report, "gap.MH1");
    let a_h = metric(report, "amplitude.H");
    let a_1 = metric(report, "amplitude.MH1");
    let a_2 = metric(report, "amplitude.MH2");
    let ok = gap_1 < gap_h && a_2 < a_1 && a_1 < a_h;
    Ok((
        ok,
        format!("gap MH1 {gap_1:.3e} < H {gap_h:.3e}; amplitude MH2 {a_2:.3e} < MH1 {a_1:.3e} < H {a_h:.3e}"),
    ))
}

fn criterion4() -> Result<(bool, String)> {
    let states: Vec<PhaseState> = [[0.5, 0.3], [-0.7, 1.0], [0.2, -1.2]]
        .iter()
        .map(|v| PhaseState::from_flat(v.to_vec()))
        .collect::<Result<_>>()?;
    let grid = [0.2, 0.1, 0.05, 0.025];
    let mut slopes = Vec::new();
    for k in 0..=2 {
        let est = verify_target_order(
            &AnalyticSystem::Pendulum,
            Method::SymplecticEuler,
            |h| TruncatedModifiedHamiltonian::pendulum(k, h),
            &states,
            &grid,
            &SolverConfig::default(),
        )?;
        slopes.push(est.slope);
    }
    let ok = slopes.iter().zip([2.0, 3.0, 4.0]).all(|(s, e)| (s - e).abs() <= 0.2);
    Ok((ok, format!("slopes H/MH1/MH2 = {:.3}/{:.3}/{:.3}, expected 2/3/4 +- 0.2", slopes[0], slopes[1], slopes[2])))
}

fn criterion5() -> Result<(bool, String)> {
    let y = PhaseState::from_flat(vec![0.0, 1.0])?;
    let coarse = gradient_symmetry_defect(&AnalyticSystem::Pendulum, &y, 0.1)?;
    let fine = gradient_symmetry_defect(&AnalyticSystem::Pendulum, &y, 1e-4)?;
    let ok = coarse >= 100.0 * fine;
    Ok((ok, format!("defect(0.1) {coarse:.3e} vs defect(1e-4) {fine:.3e}, ratio {:.1}", coarse / fine)))
}

fn criterion6() -> Result<(bool, String)> {
    let sys = AnalyticSystem::Pendulum;
    let cfg = SolverConfig::default();
    let states: Vec<PhaseState> = [[0.5, 0.3], [-0.7, 1.0], [0.2, -1.2], [1.1, 0.0]]
        .iter()
        .map(|v| PhaseState::from_flat(v.to_vec()))
        .collect::<Result<_>>()?;
    let mut ok = true;
    let mut parts = Vec::new();
    for method in Method::COMPARED {
        let slope = verify_target_order(&sys, method, |_| Ok(sys), &states, &[0.2, 0.1, 0.05, 0.025], &cfg)?.slope;
        let mut defect = 0.0_f64;
        for y in &states {
            defect = defect.max(jacobian_symplecticity_defect(method, &sys, y, 0.1, &cfg)?);
        }
        let order_ok = (slope - (method.order() as f64 + 1.0)).abs() <= 0.2;
        let sympl_ok = if method.is_symplectic() { defect <= 1e-6 } else { defect >= 1e-4 };
        ok &= order_ok && sympl_ok;
        parts.push(format!("{} slope {slope:.3} defect {defect:.1e}", method.id()));
    }
    Ok((ok, parts.join("; ")))
}

fn criterion7(dir: &Path) -> Result<(bool, String)> {
    let start = Instant::now();
    let mut ok = true;
    let mut parts = Vec::new();
    for id in [ExperimentId::PendulumPredict, ExperimentId::KeplerPredict] {
        let mut cfg = ExperimentConfig::preset(id);
        cfg.output_dir = dir.join(id.id());
        let report = experiments::run_prediction(&cfg)?;
        let err_mid = metric(&report, "implicit_midpoint.max_global_error");
        let err_trap = metric(&report, "implicit_trapezoidal.max_global_error");
        let slope_mid = metric(&report, "implicit_midpoint.drift_slope");
        let slope_trap = metric(&report, "implicit_trapezoidal.drift_slope");
        let this = report.status == RunStatus::Ok && err_mid < err_trap && slope_mid.abs() < 0.1 * slope_trap.abs();
        ok &= this;
        parts.push(format!(
            "{}: max error mid {err_mid:.3e} vs trap {err_trap:.3e}, drift slope mid {slope_mid:.2e} vs trap {slope_trap:.2e}",
            id.id()
        ));
    }
    ok &= start.elapsed() < Duration::from_secs(3600);
    Ok((ok, parts.join("; ")))
}

fn rel_ok(got: f64, fd: f64, rel: f64, scale: f64) -> bool {
    (got - fd).abs() <= rel * scale
}

fn criterion8() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let arch = NetArchitecture::default_for(1);
    let mut worst_input = 0.0_f64;
    let mut input_ok = true;
    for trial in 0..50 {
        let params = NetParameters::init(&arch, 1000 + trial);
        let y = vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
        let grad = net::net_input_gradient(&arch, &params, &y)?;
        let scale = grad.iter().fold(1e-3_f64, |m, g| m.max(g.abs()));
        for k in 0..2 {
            let (mut plus, mut minus) = (y.clone(), y.clone());
            plus[k] += 1e-5;
            minus[k] -= 1e-5;
            let fd = (net::net_value(&arch, &params, &plus)? - net::net_value(&arch, &params, &minus)?) / 2e-5;
            worst_input = worst_input.max((grad[k] - fd).abs() / scale);
            input_ok &= rel_ok(grad[k], fd, 1e-6, scale);
        }
    }

    let sys = AnalyticSystem::Pendulum;
    let pairs = (0..16)
        .map(|_| {
            let y = PhaseState::from_flat(vec![rng.gen_range(-1.5..1.5), rng.gen_range(-1.4..1.4)])?;
            let y_next = reference_flow(&CanonicalField(&sys), &y, 0.1, 100)?;
            Ok(FlowPair { y, y_next })
        })
        .collect::<Result<Vec<_>>>()?;
    let data = FlowDataset::new(
        pairs,
        0.1,
        Provenance {
            system: sys.name().into(),
            sampling: Sampling::Region { bounds: vec![] },
            oracle_substeps: 100,
            seed: Some(8),
        },
    )?;
    let small = NetArchitecture::new(2, vec![12, 12], Activation::Tanh)?;
    let mut worst_param = 0.0_f64;
    let mut param_ok = true;
    for trial in 0..20 {
        let method = Method::COMPARED[trial % 4];
        let batch = ProbeBatch::new(method, &data)?;
        let params = NetParameters::init(&small, 2000 + trial as u64);
        let (_, grad) = batch.loss_and_gradient(&small, &params)?;
        let scale = grad.iter().fold(1e-12_f64, |m, g| m.max(g.abs()));
        for i in 0..params.len() {
            let (mut plus, mut minus) = (params.clone(), params.clone());
            plus.as_mut_slice()[i] += 1e-5;
            minus.as_mut_slice()[i] -= 1e-5;
            let fd = (batch.loss_and_gradient(&small, &plus)?.0 - batch.loss_and_gradient(&small, &minus)?.0) / 2e-5;
            worst_param = worst_param.max((grad[i] - fd).abs() / scale);
            param_ok &= rel_ok(grad[i], fd, 1e-5, scale);
        }
    }
    Ok((
        input_ok && param_ok,
        format!("input-gradient worst rel {worst_input:.1e} (<= 1e-6, 50 cases); parameter-gradient worst rel {worst_param:.1e} (<= 1e-5, 20 cases)"),
    ))
}

fn csv_files(dir: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "csv") {
            out.push((path.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&path)?));
        }
    }
    out.sort();
    Ok(out)
}

fn criterion9(dir: &Path) -> Result<(bool, String)> {
    let mut compared = 0;
    let mut identical = true;
    for id in ExperimentId::ALL {
        let mut cfg = ExperimentConfig::preset(id);
        cfg.seed = 9;
        cfg.training.iterations = 200;
        cfg.training.decay_at = vec![100];
        cfg.dataset.size = cfg.dataset.size.min(400);
        let mut runs = Vec::new();
        for run in ["a", "b"] {
            cfg.output_dir = dir.join(id.id()).join(run);
            match id {
                ExperimentId::Table1 => experiments::run_table1(&cfg)?,
                ExperimentId::PendulumPredict | ExperimentId::KeplerPredict => experiments::run_prediction(&cfg)?,
                ExperimentId::ImeOrders => experiments::run_ime_orders(&cfg)?,
                ExperimentId::NtExistence => experiments::run_nt_existence(&cfg)?,
            };
            experiments::run_generate(&cfg)?;
            runs.push(csv_files(&cfg.output_dir)?);
        }
        compared += runs[0].len();
        identical &= !runs[0].is_empty() && runs[0] == runs[1];
    }
    Ok((identical, format!("{compared} CSV files byte-identical across two runs")))
}

fn main() -> ExitCode {
    let work = tempfile::tempdir().expect("temporary directory");
    let root = work.path();
    let mut outcomes = Vec::new();

    let t = Instant::now();
    outcomes.push(record(1, true, t, criterion1(&root.join("c1"))));

    let t = Instant::now();
    let table = criteria2and3(&root.join("c2"));
    let table_time = t.elapsed();
    outcomes.push(record(2, true, t, criterion2(&table, table_time)));
    outcomes.push(record(3, true, Instant::now(), criterion3(&table)));

    let t = Instant::now();
    outcomes.push(record(4, true, t, criterion4()));
    let t = Instant::now();
    outcomes.push(record(5, true, t, criterion5()));
    let t = Instant::now();
    outcomes.push(record(6, true, t, criterion6()));
    let t = Instant::now();
    outcomes.push(record(7, false, t, criterion7(&root.join("c7"))));
    let t = Instant::now();
    outcomes.push(record(8, true, t, criterion8()));
    let t = Instant::now();
    outcomes.push(record(9, true, t, criterion9(&root.join("c9"))));

    let passed = outcomes.iter().filter(|o| o.passed).count();
    println!("acceptance: {passed}/{} criteria pass", outcomes.len());
    if outcomes.iter().any(|o| o.asserted && !o.passed) {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
