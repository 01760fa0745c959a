//! End-to-end checks. Each test prints one `criterion k: PASS|FAIL` line
//! straight to stdout so it shows up even when output is captured.

use std::collections::BTreeMap;
use std::io::Write;

use num_traits::ToPrimitive;
use rand::Rng;

use ising_stmdp::auxmdp::{
    aux_states, build_explicit_mdp, class_representatives, closed_form_value, critical_lambda, is_state,
    optimal_policy, realizing_spins, side_lengths, state_configuration, theorem_policy,
    verify_bellman_inequalities, AuxAction, AuxState, Relation, KERNEL_CLASSES,
};
use ising_stmdp::cli::{ordering_holds, run_audit, run_sweep, summarize, write_sweep_csv, ExperimentConfig};
use ising_stmdp::dynamics::{
    estimate_q_kappa, is_robust, is_single_cluster, is_u1, ratio, susceptible_by_count, susceptible_spins,
    DownhillEnumerator, Dynamics, DEFAULT_STATE_CAP,
};
use ising_stmdp::lattice::{circumscribed_rectangle, delta_energy_flip, Configuration, Rect, TorusCoord};
use ising_stmdp::mdpsolver::{
    policy_evaluation_exact, policy_evaluation_float, solve_exact, value_from_hitting_times,
};
use ising_stmdp::rng::stream_rng;

fn report(k: u32, ok: bool, detail: &str) {
    let line = format!("criterion {k}: {} - {detail}\n", if ok { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    assert!(ok, "criterion {k} failed: {detail}");
}

fn st(i: usize, j: usize) -> AuxState {
    AuxState::new(i, j)
}

#[test]
fn criterion_01_kernel_exactness() {
    let n = 12;
    let outcome = run_audit(n, None).unwrap();
    let checked = outcome.rows.len();
    let total = KERNEL_CLASSES.len();
    let failed: Vec<String> = outcome
        .failed_classes
        .iter()
        .map(|&c| format!("{c} ({})", KERNEL_CLASSES[c - 1]))
        .collect();
    let detail = format!(
        "{}/{total} classes reproduced exactly over {checked} post-decision configurations; failing: [{}]",
        outcome.verified_classes(),
        failed.join("; ")
    );
    report(1, outcome.failed_classes.is_empty(), &detail);
}

#[test]
fn criterion_02_closed_form_spot_values() {
    let n = 12;
    let lc = critical_lambda();
    let want = [
        (n - 4, ratio(19550, 3551)),
        (n - 3, ratio(23460, 3551)),
        (n - 5, ratio(48875, 10653)),
        (n - 6, ratio(244375, 63918)),
    ];
    let mut bad = Vec::new();
    for k in [1u8, 2] {
        let v = closed_form_value(k, &lc, n).unwrap();
        for (j, w) in &want {
            let got = &v[&st(n, *j)];
            if got != w {
                bad.push(format!("k={k} (N,{j}) = {got}, want {w}"));
            }
        }
    }
    report(2, bad.is_empty(), &format!("4 values at lambda = 15/17 for both regimes {bad:?}"));
}

#[test]
fn criterion_03_phase_transition() {
    use AuxAction::*;
    let mut bad = Vec::new();
    let mut checked = 0;
    for n in [8usize, 10, 14] {
        let mdp = build_explicit_mdp(n).unwrap();
        for (lam, want) in [(ratio(9, 10), vec![A11]), (ratio(5, 6), vec![A12]), (critical_lambda(), vec![A11, A12])] {
            let sol = solve_exact(&mdp, &lam).unwrap();
            for j in side_lengths(n).into_iter().filter(|&j| j + 5 <= n) {
                let k = mdp.state_index(&st(n, j)).unwrap();
                let got: Vec<AuxAction> = sol.optimal_sets[k].iter().map(|&a| mdp.actions(k)[a].action).collect();
                checked += 1;
                if got != want {
                    bad.push(format!("n={n} lambda={lam} (N,{j}): {got:?}"));
                }
            }
        }
    }
    report(3, bad.is_empty(), &format!("{checked} optimal sets at (N,j), j <= N-5 {bad:?}"));
}

#[test]
fn criterion_04_solver_cross_validation() {
    let n = 12;
    let mdp = build_explicit_mdp(n).unwrap();
    let mut max_err = 0.0f64;
    let mut bad = Vec::new();
    for lam in [ratio(1, 2), critical_lambda(), ratio(9, 10)] {
        for k in [1u8, 2] {
            let pol = theorem_policy(k, n).unwrap().indices(&mdp).unwrap().remove(0);
            let exact = policy_evaluation_exact(&mdp, &pol, &lam).unwrap();
            let float = policy_evaluation_float(&mdp, &pol, &lam).unwrap();
            let rec = closed_form_value(k, &lam, n).unwrap();
            for (idx, s) in mdp.states().iter().enumerate() {
                if exact[idx] != rec[s] {
                    bad.push(format!("k={k} lambda={lam} {s}"));
                }
                max_err = max_err.max((float[idx] - rec[s].to_f64().unwrap()).abs());
            }
        }
    }
    let ok = bad.is_empty() && max_err <= 1e-10;
    report(4, ok, &format!("exact mismatches {bad:?}, float max error {max_err:.2e}"));
}

#[test]
fn criterion_05_inequality_suite() {
    let n = 12;
    let mut lines = Vec::new();
    let mut ok = true;
    let mut families = std::collections::BTreeSet::new();
    for (num, den) in [(3, 10), (5, 10), (7, 10), (85, 100), (89, 100), (95, 100), (99, 100)] {
        let lam = ratio(num, den);
        let rep = verify_bellman_inequalities(&lam, n).unwrap();
        families.extend(rep.families());
        let strict = rep.checks.iter().all(|c| c.relation == Relation::Positive);
        ok &= rep.all_hold() && strict;
        lines.push(format!("{lam}: {}/{}", rep.checks.len() - rep.violations().len(), rep.checks.len()));
    }
    let rep = verify_bellman_inequalities(&critical_lambda(), n).unwrap();
    families.extend(rep.families());
    let fam5: Vec<_> = rep.checks.iter().filter(|c| c.family == 5).collect();
    let eq = !fam5.is_empty() && fam5.iter().all(|c| c.relation == Relation::Zero && c.holds());
    ok &= eq && families.len() == 22;
    report(
        5,
        ok,
        &format!("{} families; {}; family 5 equality at 15/17: {eq}", families.len(), lines.join(", ")),
    );
}

#[test]
fn criterion_06_hitting_time_identity() {
    let n = 10;
    let lam = ratio(9, 10);
    let mdp = build_explicit_mdp(n).unwrap();
    let pol = optimal_policy(&lam, n).unwrap().indices(&mdp).unwrap().remove(0);
    let exact = policy_evaluation_exact(&mdp, &pol, &lam).unwrap();
    let target = mdp.state_index(&st(n, n)).unwrap();
    let starts = [mdp.state_index(&st(3, 3)).unwrap(), mdp.state_index(&st(n, 2)).unwrap()];
    let mut rng = stream_rng(20240601, 6);
    let est = value_from_hitting_times(&mdp, &pol, target, 0.9, 100_000, &starts, &mut rng).unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    for (e, &s) in est.iter().zip(&starts) {
        let v = exact[s].to_f64().unwrap();
        let z = (e.value - v).abs() / e.std_error;
        ok &= z <= 3.0;
        parts.push(format!("{}: exact {v:.6} mc {:.6} ({z:.2} se)", mdp.states()[s], e.value));
    }
    report(6, ok, &parts.join(", "));
}

fn random_config(n: usize, rng: &mut impl Rng) -> Configuration {
    let p: f64 = rng.gen_range(0.05..0.95);
    let spins = (0..n * n).map(|_| if rng.gen_bool(p) { 1 } else { -1 }).collect();
    Configuration::from_spins(n, spins).unwrap()
}

/// Rectangles of random size plus a few random edits, kept only when connected.
fn random_cluster(n: usize, rng: &mut impl Rng) -> Configuration {
    loop {
        let w = rng.gen_range(1..=n);
        let h = rng.gen_range(1..=n);
        let anchor = TorusCoord::new(rng.gen_range(0..n), rng.gen_range(0..n));
        let mut c = Configuration::with_rectangle(n, Rect::new(w, h, anchor)).unwrap();
        if rng.gen_bool(0.5) {
            for _ in 0..rng.gen_range(1..4) {
                let boundary: Vec<TorusCoord> = c
                    .coords()
                    .filter(|&q| c.neighbors(q).iter().any(|&m| c.get(m) != c.get(q)))
                    .collect();
                if boundary.is_empty() {
                    break;
                }
                c.flip(boundary[rng.gen_range(0..boundary.len())]);
            }
        }
        if is_single_cluster(&c) {
            return c;
        }
    }
}

/// Plus spins fill their bounding box exactly, with admissible sides.
fn rectangle_oracle(c: &Configuration) -> bool {
    let n = c.n();
    let Ok(Some(r)) = circumscribed_rectangle(c) else {
        return c.is_all_plus();
    };
    if c.plus_count() != r.width * r.height {
        return false;
    }
    let side = |s: usize| (2..=n - 2).contains(&s) || s == n;
    // a band one spin thick around the torus is also stable
    let band = (r.width == n && r.height == 1) || (r.height == n && r.width == 1);
    (side(r.width) && side(r.height)) || band
}

#[test]
fn criterion_07_susceptibility_and_robustness() {
    let n = 10;
    let h = 0.4;
    let mut rng = stream_rng(7, 0);
    let mut bad = 0usize;
    for _ in 0..10_000 {
        let c = random_config(n, &mut rng);
        for q in c.coords() {
            let by_energy = delta_energy_flip(&c, q, h) < 0.0;
            if by_energy != susceptible_by_count(c.get(q), c.neighbor_sum(q)) {
                bad += 1;
            }
        }
        if is_robust(&c) != susceptible_spins(&c).is_empty() {
            bad += 1;
        }
    }
    let mut u1 = 0usize;
    let mut u1_bad = 0usize;
    for _ in 0..1_000 {
        let c = random_cluster(n, &mut rng);
        let member = is_u1(&c).is_some();
        u1 += member as usize;
        if member != rectangle_oracle(&c) {
            u1_bad += 1;
        }
    }
    report(
        7,
        bad == 0 && u1_bad == 0,
        &format!("1e4 random configurations, {bad} disagreements; 1e3 clusters ({u1} stable), {u1_bad} disagreements"),
    );
}

struct ShadowCheck {
    configs: usize,
    worst_fraction: f64,
    worst_z: f64,
    failures: Vec<String>,
}

/// Zero-temperature runs from every representative post-decision configuration,
/// compared outcome by outcome with the exact downhill endpoint law.
fn q_kappa_shadow(n: usize, kappa: u64, reps: u64) -> ShadowCheck {
    let mut en = DownhillEnumerator::new(n, DEFAULT_STATE_CAP);
    let mut out = ShadowCheck { configs: 0, worst_fraction: 1.0, worst_z: 0.0, failures: Vec::new() };
    for (i, (class, s, a)) in class_representatives(n).unwrap().into_iter().enumerate() {
        let Some(&spin) = realizing_spins(s, a, n).unwrap().first() else { continue };
        let post = state_configuration(s, n).unwrap().flipped(spin);
        out.configs += 1;
        let exact: BTreeMap<Configuration, f64> =
            en.endpoint_distribution(&post).unwrap().iter().map(|(c, p)| (c.clone(), p.to_f64().unwrap())).collect();
        let est = estimate_q_kappa(&post, Dynamics::ZeroTemperature, kappa, reps, 8_000 + i as u64);
        let frac = est.robust_fraction();
        out.worst_fraction = out.worst_fraction.min(frac);
        let cond = est.conditional();
        let robust = est.robust as f64;
        let mut keys: Vec<&Configuration> = exact.keys().collect();
        keys.extend(cond.keys().filter(|k| !exact.contains_key(*k)));
        let mut ok = frac >= 0.999;
        for k in keys {
            let p = exact.get(k).copied().unwrap_or(0.0);
            let q = cond.get(k).copied().unwrap_or(0.0);
            let se = (p * (1.0 - p) / robust).sqrt();
            let z = if se > 0.0 { (q - p).abs() / se } else if q == p { 0.0 } else { f64::INFINITY };
            out.worst_z = out.worst_z.max(z);
            ok &= z <= 4.0;
        }
        if !ok {
            out.failures.push(format!("class {class} {s} {a} robust {frac:.4}"));
        }
    }
    out
}

#[test]
fn criterion_08_q_kappa_shadow() {
    let n = 12;
    let kappa = 10 * (n * n) as u64;
    let r = q_kappa_shadow(n, kappa, 10_000);
    report(
        8,
        r.failures.is_empty(),
        &format!(
            "kappa {kappa}: {}/{} post-decision configurations pass, min robust fraction {:.4}, worst deviation {:.2} se; failing {:?}",
            r.configs - r.failures.len(),
            r.configs,
            r.worst_fraction,
            r.worst_z,
            r.failures
        ),
    );
}

/// Same comparison with enough steps for every run to settle.
#[test]
fn q_kappa_shadow_long_horizon() {
    let n = 12;
    let kappa = 50 * (n * n) as u64;
    let r = q_kappa_shadow(n, kappa, 10_000);
    println!("kappa {kappa}: min robust fraction {:.4}, worst deviation {:.2} se", r.worst_fraction, r.worst_z);
    assert!(r.failures.is_empty(), "{:?}", r.failures);
}

fn experiment() -> ExperimentConfig {
    ExperimentConfig::default()
}

#[test]
fn criterion_09_end_to_end_ordering() {
    let cfg = experiment();
    let rows = run_sweep(&cfg).unwrap();
    let summary = summarize(&rows, cfg.max_epochs);
    let order = ordering_holds(&summary);
    let means: Vec<String> = summary
        .iter()
        .map(|s| format!("k{} {} {:.1} ({}/{} hit)", s.kappa, s.policy, s.mean_hit_epochs, s.hits, s.runs))
        .collect();
    let ok = order.len() == cfg.kappas.len() && order.values().all(|&b| b);
    report(9, ok, &format!("ordering per kappa {order:?}; mean epochs {}", means.join(", ")));
}

#[test]
fn criterion_10_determinism() {
    let mut bytes = Vec::new();
    for threads in [1usize, 4, 1] {
        let mut cfg = experiment();
        cfg.threads = Some(threads);
        let mut buf = Vec::new();
        write_sweep_csv(&run_sweep(&cfg).unwrap(), &mut buf).unwrap();
        bytes.push(buf);
    }
    let ok = bytes.windows(2).all(|w| w[0] == w[1]) && !bytes[0].is_empty();
    report(10, ok, &format!("sweep CSV of {} bytes identical across 1, 4 and 1 workers", bytes[0].len()));
}

#[test]
fn aux_state_space_size() {
    for n in [6usize, 8, 12] {
        let states = aux_states(n).unwrap();
        assert_eq!(states.len(), (n - 2) * (n - 2) + 1);
        assert!(states.iter().all(|&s| is_state(s, n)));
    }
}
