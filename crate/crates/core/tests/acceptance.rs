//! Acceptance suite: one PASS/FAIL line per criterion. Runs without the test
//! harness so that the lines are always printed; exits nonzero if any fails.

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use atomfrac::analysis::{classify_crack, stress_strain, verify_trace, CrackGeometry, StressStrainCurve, VerificationReport};
use atomfrac::damage::{
    min_norm_subgradient, total_energy, DamageState, EnergyModel, TransitionFunction,
};
use atomfrac::evolution::{refine_tau_study, EvolutionTrace, LIFT_TOL, SLACK_TOL};
use atomfrac::lattice::{build_chain, build_triangular, DirichletSpec, LatticeSystem};
use atomfrac::potentials::{RestAngle, TriplePotential};
use atomfrac::scenario::{preset, DissipationChoice, LoadingKind, Scenario, Setup, PRESET_NAMES};

struct Outcome {
    pass: bool,
    detail: String,
}

fn line(name: &str, o: &Outcome, elapsed: Duration, budget: Duration) -> bool {
    let in_time = elapsed <= budget;
    let pass = o.pass && in_time;
    println!(
        "{} {name}: {} [{:.1} s, budget {:.0} s{}]",
        if pass { "PASS" } else { "FAIL" },
        o.detail,
        elapsed.as_secs_f64(),
        budget.as_secs_f64(),
        if in_time { "" } else { ", over budget" }
    );
    pass
}

struct Run {
    name: String,
    scenario: Scenario,
    setup: Setup,
    trace: Result<EvolutionTrace, String>,
    report: Option<VerificationReport>,
    sim_time: Duration,
    check_time: Duration,
}

fn run_scenario(name: &str, scenario: Scenario) -> Run {
    let setup = scenario.build().expect("scenario builds");
    let t0 = Instant::now();
    let trace = setup.run().map_err(|f| f.to_string());
    let sim_time = t0.elapsed();
    let t1 = Instant::now();
    let report = trace
        .as_ref()
        .ok()
        .map(|tr| verify_trace(tr, &setup.sys, &setup.model, scenario.tie_tol()).expect("verification runs"));
    Run {
        name: name.to_string(),
        scenario,
        setup,
        trace,
        report,
        sim_time,
        check_time: t1.elapsed(),
    }
}

fn random_chain(rng: &mut ChaCha8Rng, i: usize) -> Scenario {
    let mut s = preset("paper-1d-l2").unwrap();
    s.name = format!("random-chain-{i}");
    let atoms = rng.gen_range(3..=10);
    s.lattice.atoms = Some(atoms);
    s.damage.r1 = rng.gen_range(1.05..1.5);
    s.damage.r2 = s.damage.r1 + rng.gen_range(0.0..0.3);
    s.loading.kind = match rng.gen_range(0..3) {
        0 => LoadingKind::SinusoidalStretch,
        1 => LoadingKind::LinearRamp,
        _ => LoadingKind::Hold,
    };
    s.loading.amplitude = rng.gen_range(0.0..0.4) * (atoms - 1) as f64;
    s.loading.angular_frequency = rng.gen_range(1.0..2.0 * PI);
    let k = rng.gen_range(10..=40);
    s.dynamics.tau = 1.0 / k as f64;
    s.dynamics.final_time = rng.gen_range(k / 2..=k) as f64 / k as f64;
    s.dynamics.nu = 10f64.powf(rng.gen_range(-2.0..0.0));
    s.dynamics.dissipation = if rng.gen_bool(0.5) { DissipationChoice::L2 } else { DissipationChoice::KelvinVoigt };
    s.validate().expect("random scenario is admissible");
    s
}

fn fd_gradient(sys: &LatticeSystem, model: &EnergyModel, state: &DamageState, y: &[f64]) -> Vec<f64> {
    let n = sys.ambient_dim();
    let mut out = Vec::with_capacity(sys.free_len());
    let mut yy = y.to_vec();
    for &a in sys.free_atoms() {
        for k in 0..n {
            let i = a * n + k;
            let h = 1e-6;
            yy[i] = y[i] + h;
            let fp = total_energy(sys, model, state, &yy).unwrap();
            yy[i] = y[i] - h;
            let fm = total_energy(sys, model, state, &yy).unwrap();
            yy[i] = y[i];
            out.push((fp - fm) / (2.0 * h));
        }
    }
    out
}

/// Min-norm subgradient against central differences on tie-free samples.
/// Returns the worst relative error and the number of samples.
fn gradient_oracle(sys: &LatticeSystem, model: &EnergyModel, rng: &mut ChaCha8Rng, samples: usize) -> (f64, usize) {
    let mut worst = 0.0f64;
    let mut checked = 0;
    while checked < samples {
        let y: Vec<f64> = sys.positions().iter().map(|x| x + rng.gen_range(-0.1..0.1)).collect();
        let memory: Vec<f64> = sys.bonds().iter().map(|b| b.rest_length * rng.gen_range(1.0..1.4)).collect();
        let state = DamageState::from_memory(sys, memory).unwrap();
        // Tie-free: no bond within reach of its kink for the difference step.
        let near_kink = sys.bonds().iter().zip(state.memory()).any(|(b, &m)| {
            let r = {
                let n = sys.ambient_dim();
                (0..n).map(|k| (y[b.b * n + k] - y[b.a * n + k]).powi(2)).sum::<f64>().sqrt()
            };
            let phi = model.transition_for(b.kind).evaluate(m);
            phi > 0.0 && (r - m).abs() < 1e-3
        });
        if near_kink {
            continue;
        }
        let g = min_norm_subgradient(sys, model, &state, &y, 1e-10).unwrap();
        if !g.tie_bonds.is_empty() {
            continue;
        }
        let fd = fd_gradient(sys, model, &state, &y);
        let diff = g.min_norm.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = g.min_norm.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        worst = worst.max(diff / scale);
        checked += 1;
    }
    (worst, checked)
}

fn first_extension_end(s: &Scenario) -> f64 {
    match s.loading.kind {
        LoadingKind::SinusoidalStretch => PI / (2.0 * s.loading.angular_frequency),
        _ => s.dynamics.final_time,
    }
}

/// Bonds with phi = 1 at the end of the first extension.
fn broken_in_first_extension(run: &Run) -> Option<Vec<usize>> {
    let tr = run.trace.as_ref().ok()?;
    let t_end = first_extension_end(&run.scenario) + 1e-12;
    tr.snapshots.iter().filter(|s| s.time <= t_end).last().map(|s| s.broken.clone())
}

fn curve_of(run: &Run) -> Option<StressStrainCurve> {
    let tr = run.trace.as_ref().ok()?;
    stress_strain(tr, &run.setup.sys, &run.setup.model, run.scenario.tie_tol()).ok()
}

fn main() {
    let _ = env_logger::builder().is_test(true).try_init();
    let mut all = true;

    println!("running presets...");
    let presets: Vec<Run> = PRESET_NAMES
        .iter()
        .map(|name| {
            let r = run_scenario(name, preset(name).unwrap());
            println!("  {name}: {:.1} s{}", r.sim_time.as_secs_f64(), match &r.trace {
                Ok(_) => String::new(),
                Err(e) => format!(" FAILED: {e}"),
            });
            r
        })
        .collect();
    let get = |name: &str| presets.iter().find(|r| r.name == name).unwrap();

    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let randoms: Vec<Run> = (0..50).map(|i| run_scenario(&format!("random-{i}"), random_chain(&mut rng, i))).collect();
    let random_time = t0.elapsed();
    let check_time: Duration = presets.iter().chain(&randoms).map(|r| r.check_time).sum();

    let failed_runs: Vec<&str> = presets.iter().chain(&randoms).filter(|r| r.report.is_none()).map(|r| r.name.as_str()).collect();
    let preset_reports: Vec<(&Run, &VerificationReport)> =
        presets.iter().filter_map(|r| r.report.as_ref().map(|rep| (r, rep))).collect();
    let random_reports: Vec<&VerificationReport> = randoms.iter().filter_map(|r| r.report.as_ref()).collect();
    let preset_ok = failed_runs.iter().all(|n| n.starts_with("random-"));

    // Lift identity.
    let lift = preset_reports
        .iter()
        .map(|(_, r)| r.lift_identity_max_error)
        .chain(random_reports.iter().map(|r| r.lift_identity_max_error))
        .fold(0.0, f64::max);
    all &= line(
        "lift identity",
        &Outcome {
            pass: lift <= LIFT_TOL && failed_runs.is_empty(),
            detail: format!(
                "max relative error {lift:.2e} over {} presets and {} random chains (failed runs: {:?}); random runs {:.1} s, checks {:.1} s",
                preset_reports.len(),
                random_reports.len(),
                failed_runs,
                random_time.as_secs_f64(),
                check_time.as_secs_f64()
            ),
        },
        random_time + check_time,
        Duration::from_secs(60),
    );

    // A-priori inequality.
    let slack = preset_reports.iter().map(|(_, r)| r.per_step_inequality_min_slack).fold(f64::INFINITY, f64::min);
    all &= line(
        "per-step inequality",
        &Outcome {
            pass: preset_ok && slack >= SLACK_TOL,
            detail: format!("min slack {slack:.3e} over all preset steps (tolerance {SLACK_TOL:e})"),
        },
        check_time,
        Duration::from_secs(60),
    );

    // Irreversibility.
    let bad: Vec<&str> = preset_reports.iter().filter(|(_, r)| !r.irreversibility_ok).map(|(r, _)| r.name.as_str()).collect();
    let below_rest = preset_reports.iter().any(|(run, _)| {
        run.trace.as_ref().unwrap().snapshots.iter().any(|s| {
            s.memory.iter().zip(run.setup.sys.bonds()).any(|(m, b)| *m < b.rest_length)
        })
    });
    all &= line(
        "irreversibility",
        &Outcome {
            pass: preset_ok && bad.is_empty() && !below_rest,
            detail: format!("violations in {:?}, memory below rest length: {below_rest}", bad),
        },
        check_time,
        Duration::from_secs(60),
    );

    // Inclusion residual.
    let mut worst = (0.0f64, String::new());
    let mut ok = preset_ok;
    for (run, r) in &preset_reports {
        let tol = run.setup.settings.grad_tol;
        ok &= r.inclusion_residual_max <= tol;
        let ratio = r.inclusion_residual_max / tol;
        if ratio > worst.0 {
            worst = (ratio, format!("{} ({:.2e} vs {:.2e})", run.name, r.inclusion_residual_max, tol));
        }
    }
    all &= line(
        "discrete inclusion residual",
        &Outcome {
            pass: ok,
            detail: format!("worst residual / grad_tol = {:.3} in {}", worst.0, worst.1),
        },
        check_time,
        Duration::from_secs(60),
    );

    // Gradient oracle.
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let transition = TransitionFunction::new(1.1, 1.3).unwrap();
    let chain = build_chain(6, 1.0, DirichletSpec::BothEnds).unwrap();
    let mut chain3 = chain.clone();
    chain3.enumerate_triples();
    let patch = build_triangular(3, 3, 1.0, true, DirichletSpec::LeftRightColumns).unwrap();
    let mut patch3 = patch.clone();
    patch3.enumerate_triples();
    let tri = TriplePotential::new(0.7, RestAngle::Reference).unwrap();
    let plain_1d = EnergyModel::lennard_jones(1.0, None, transition, None).unwrap();
    let tri_1d = EnergyModel::lennard_jones(1.0, None, transition, Some(tri)).unwrap();
    let plain_2d = EnergyModel::lennard_jones(1.0, Some(0.25), transition, None).unwrap();
    let tri_2d = EnergyModel::lennard_jones(1.0, Some(0.25), transition, Some(tri)).unwrap();
    let cases = [
        ("chain", &chain, &plain_1d),
        ("chain+3body", &chain3, &tri_1d),
        ("patch", &patch, &plain_2d),
        ("patch+3body", &patch3, &tri_2d),
    ];
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for (label, sys, model) in cases {
        let (w, n) = gradient_oracle(sys, model, &mut rng, 100);
        worst = worst.max(w);
        parts.push(format!("{label} {w:.1e} ({n})"));
    }
    all &= line(
        "gradient oracle",
        &Outcome {
            pass: worst <= 1e-5,
            detail: format!("worst relative error {worst:.2e}: {}", parts.join(", ")),
        },
        t0.elapsed(),
        Duration::from_secs(30),
    );

    // Time-step refinement.
    let t0 = Instant::now();
    let mut elastic = preset("paper-1d-l2").unwrap();
    elastic.name = "elastic-chain".into();
    elastic.loading.amplitude = 0.5;
    let taus = [1.0 / 30.0, 1.0 / 60.0, 1.0 / 120.0, 1.0 / 240.0];
    let study = refine_tau_study(&taus, |tau| {
        let mut s = elastic.with_tau(tau);
        s.validate()?;
        let tr = s.build()?.run().map_err(|f| f.error)?;
        if tr.snapshots.last().map_or(false, |s| !s.broken.is_empty()) {
            return Err(atomfrac::Error::InvalidConfiguration("elastic scenario broke a bond".into()));
        }
        Ok(tr)
    });
    let outcome = match &study {
        Ok(rep) => {
            let d0 = rep.rows[0].dissipation_sum;
            let within = rep.rows.iter().all(|r| r.dissipation_sum <= 2.0 * d0 && r.dissipation_sum >= 0.5 * d0);
            let dists: Vec<String> = rep.rows.iter().filter_map(|r| r.sup_distance).map(|d| format!("{d:.3e}")).collect();
            let sums: Vec<String> = rep.rows.iter().map(|r| format!("{:.4e}", r.dissipation_sum)).collect();
            Outcome {
                pass: rep.distances_decrease() && within,
                detail: format!("sup distances [{}], dissipation sums [{}]", dists.join(", "), sums.join(", ")),
            }
        }
        Err(e) => Outcome { pass: false, detail: format!("study failed: {e}") },
    };
    all &= line("tau refinement", &outcome, t0.elapsed(), Duration::from_secs(120));

    // 1D reproduction.
    let l2 = get("paper-1d-l2");
    let kv = get("paper-1d-kv");
    let last_bond = {
        let driven = l2.setup.sys.driven()[0];
        l2.setup.sys.bonds().iter().position(|b| b.a == driven || b.b == driven).unwrap()
    };
    let b_l2 = broken_in_first_extension(l2);
    let b_kv = broken_in_first_extension(kv);
    all &= line(
        "1D reproduction (paper-1d-l2)",
        &Outcome {
            pass: b_l2.as_deref() == Some(&[last_bond][..]),
            detail: format!("broken in first extension {:?}, bond at driven end {last_bond}", b_l2),
        },
        l2.sim_time,
        Duration::from_secs(10),
    );
    all &= line(
        "1D reproduction (paper-1d-kv)",
        &Outcome {
            pass: b_kv.as_ref().map_or(false, |b| b.len() == 1),
            detail: format!("broken in first extension {:?}", b_kv),
        },
        kv.sim_time,
        Duration::from_secs(10),
    );

    // 2D reproduction.
    let crack = |run: &Run| {
        run.trace
            .as_ref()
            .ok()
            .map(|tr| classify_crack(tr, &run.setup.sys, &run.setup.model).expect("classifier runs"))
    };
    let diag = get("paper-2d-diag-nu0.01");
    let c = crack(diag);
    all &= line(
        "2D reproduction (paper-2d-diag-nu0.01)",
        &Outcome {
            pass: c.as_ref().map_or(false, |c| matches!(c.geometry, CrackGeometry::SingleLine(_)) && c.best_line_fraction >= 0.9),
            detail: match &c {
                Some(c) => format!("{} with {} broken bonds, line fraction {:.3}", c.label(), c.broken, c.best_line_fraction),
                None => format!("run failed: {}", diag.trace.as_ref().err().unwrap()),
            },
        },
        diag.sim_time,
        Duration::from_secs(300),
    );
    let hor = get("paper-2d-horizontal-nu1");
    let c = crack(hor);
    all &= line(
        "2D reproduction (paper-2d-horizontal-nu1)",
        &Outcome {
            pass: c.as_ref().map_or(false, |c| !matches!(c.geometry, CrackGeometry::SingleLine(_))),
            detail: match &c {
                Some(c) => format!("{} with {} broken bonds, line fraction {:.3}", c.label(), c.broken, c.best_line_fraction),
                None => format!("run failed: {}", hor.trace.as_ref().err().unwrap()),
            },
        },
        hor.sim_time,
        Duration::from_secs(300),
    );

    // Stress-strain.
    let hi = get("paper-stress-strain-R1.2");
    let lo = get("paper-stress-strain-R1.07");
    let outcome = match (curve_of(hi), curve_of(lo)) {
        (Some(a), Some(b)) => {
            let (pa, pb) = (a.peak().map_or(0.0, |p| p.stress), b.peak().map_or(0.0, |p| p.stress));
            let (la, lb) = (a.early_linearity(), b.early_linearity());
            let (fa, fb) = (a.final_stress().unwrap_or(f64::INFINITY), b.final_stress().unwrap_or(f64::INFINITY));
            let lin_ok = la.map_or(false, |v| v >= 0.98) && lb.map_or(false, |v| v >= 0.98);
            Outcome {
                pass: pb < pa && lin_ok && fa <= 0.05 * pa && fb <= 0.05 * pb,
                detail: format!(
                    "peaks R1.2 {pa:.4e}, R1.07 {pb:.4e}; early Pearson {la:.4?} / {lb:.4?}; final/peak {:.3} / {:.3}",
                    fa / pa,
                    fb / pb
                ),
            }
        }
        _ => Outcome { pass: false, detail: "a stress-strain run failed".into() },
    };
    all &= line("stress-strain", &outcome, hi.sim_time + lo.sim_time, Duration::from_secs(120));

    if !all {
        println!("acceptance: FAILED");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
