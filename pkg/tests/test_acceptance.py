"""Acceptance suite: one test (or test group) per acceptance criterion, each
printing a PASS/FAIL line, run at the stated scales and tolerances.

Two clauses are implemented exactly as stated but marked strict-xfail because
they are unattainable as written; the analysis lives in the repository notes:

* criterion 4, homodyne clause: Euler discretizations of the linear and
  nonlinear SMEs differ at O(dt^(3/2)) per step under a shared record
  (~1e-3 at the stated resolution); the bound holds (to machine precision)
  for the completely positive (Kraus) pairing, which is asserted instead.
* criterion 7, f_B clause: the published f_B closed form equals the optimal
  steady-state cost tr(Y N), not the excess-noise element; the correct solve
  (confirmed by an independent CARE oracle and by Monte Carlo) gives
  Sigma_11 = 0.0506978 at q = lam = kappa = 1, chi = 0.2.
"""

import json
import time

import numpy as np
import pytest

import contmon as cm
from contmon import OpenSystemModel, WeightedState, build_standard_ops
from contmon.diffusive import (
    generalized_bath_homodyne_step,
    heterodyne_sme_step,
    homodyne_feedback_step,
    homodyne_kraus_operator,
    homodyne_kraus_step,
    homodyne_sme_step,
    linear_homodyne_kraus_step,
    linear_homodyne_step,
    feedback_me_rhs,
    lindblad_form_rhs,
    squeezed_vacuum_jump_operator,
)
from contmon.ensemble import EnsembleSpec, Scenario, run_ensemble, trajectory_rng
from contmon.gaussian import (
    closed_loop_unconditional,
    excess_noise_ss,
    lqg_gain,
    lyapunov_solve,
    markovian_gain,
    opo_model,
    opo_reference,
    riccati_steady_state,
)
from contmon.jump import (
    feedback_unitary,
    jump_probability,
    jump_sme_apply,
    linear_jump_step,
)
from contmon.master_equation import BathSpec, generalized_bath_me_rhs, steady_state

OPS = build_standard_ops("qubit")
SM = OPS["sigma_minus"]
PROJ_E = OPS["projector_e"]
EXCITED = np.diag([1.0, 0.0]).astype(complex)


def decay_model(**kw):
    return OpenSystemModel(np.zeros((2, 2)), [(1.0, SM)], **kw)


def report(criterion, ok, detail):
    print(f"[criterion {criterion}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


def max_z(stats, name, ref):
    diff = np.abs(stats.means[name] - np.asarray(ref))
    se = stats.std_errs[name]
    assert not np.any((se == 0) & (diff > 0)), "zero-SE point with nonzero deviation"
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(diff == 0, 0.0, diff / se)
    return float(z.max())


# -----------------------------------------------------------------------------


def test_criterion_01_analytic_decay():
    t0 = time.monotonic()
    grid = np.arange(0, 1001) * 1e-3
    worst = 0.0
    for theta in (0.0, 0.3):  # the jump and homodyne scenario models share this ME
        model = decay_model(homodyne_phase=theta)
        states = cm.integrate_me(model, EXCITED, grid, stepper="rk4")
        worst = max(worst, abs(states[-1][0, 0].real - np.exp(-1.0)))
    elapsed = time.monotonic() - t0
    report(
        1, worst <= 1e-6 and elapsed < 1.0,
        f"|rho_ee(1) - e^-1| = {worst:.2e} (<= 1e-6), runtime {elapsed:.2f} s (< 1 s)",
    )


def test_criterion_02_jump_unravelling_theorem():
    # single-thread vectorized stepping is the fast mode for 2x2 models (the
    # lockstep numpy work is GIL-bound); the wall-time budget is what matters
    spec = EnsembleSpec(
        n_traj=10**4, master_seed=20240901, dt=1e-3, t_final=3.0,
        observables=(("rho_ee", PROJ_E),),
    )
    t0 = time.monotonic()
    stats = run_ensemble(spec, Scenario("jump", decay_model(), EXCITED))
    elapsed = time.monotonic() - t0
    z = max_z(stats, "rho_ee", np.exp(-spec.t_grid))
    report(
        2, z <= 3.0 and elapsed < 30.0,
        f"max_t |mean - e^-t| / SE = {z:.2f} (<= 3), runtime {elapsed:.1f} s (< 30 s)",
    )


def test_criterion_03_homodyne_kraus_unravelling_theorem():
    spec = EnsembleSpec(
        n_traj=10**4, master_seed=20240902, dt=1e-3, t_final=3.0,
        observables=(("rho_ee", PROJ_E),), track_min_eigenvalue=True,
    )
    t0 = time.monotonic()
    stats = run_ensemble(spec, Scenario("homodyne_kraus", decay_model(), EXCITED))
    elapsed = time.monotonic() - t0
    z = max_z(stats, "rho_ee", np.exp(-spec.t_grid))
    ok = (
        z <= 3.0
        and stats.positivity_violations == 0
        and stats.min_eigenvalue >= -1e-12
        and elapsed < 30.0
    )
    report(
        3, ok,
        f"max z = {z:.2f} (<= 3), min eigenvalue {stats.min_eigenvalue:.2e} "
        f"(>= -1e-12) with {stats.positivity_violations} violations over "
        f"{spec.n_traj * spec.n_steps} steps, runtime {elapsed:.1f} s",
    )


def test_criterion_04_pathwise_equivalence_jump_and_cp_homodyne():
    dt, n_steps = 1e-4, 1000
    model = decay_model()
    # jump side: shared click record, Euler pairing
    rng = trajectory_rng(20240904, 0)
    rho = EXCITED
    lin = WeightedState(EXCITED.copy())
    sup_jump = 0.0
    for _ in range(n_steps):
        dn = rng.random() < jump_probability(rho, model, dt)
        rho = jump_sme_apply(rho, model, dt, dn)
        lin = linear_jump_step(lin, model, dt, dn, beta=1.0)
        sup_jump = max(sup_jump, float(np.max(np.abs(lin.normalized - rho))))
    # homodyne side: shared current record, completely positive pairing (the
    # normalized-linear relation rho = rho_bar/Tr[rho_bar] is exact for it)
    rng = trajectory_rng(20240914, 0)
    rho = EXCITED
    lin = WeightedState(EXCITED.copy())
    sup_homodyne = 0.0
    for _ in range(n_steps):
        dw = rng.standard_normal() * np.sqrt(dt)
        rho, dy = homodyne_kraus_step(rho, model, dt, dw)
        lin = linear_homodyne_kraus_step(lin, model, dt, dy)
        sup_homodyne = max(sup_homodyne, float(np.max(np.abs(lin.normalized - rho))))
    report(
        4, sup_jump <= 1e-8 and sup_homodyne <= 1e-7,
        f"sup-norm gap over 10^3 steps at dt=1e-4: jump {sup_jump:.2e} (<= 1e-8), "
        f"homodyne (CP pairing) {sup_homodyne:.2e} (<= 1e-7)",
    )


@pytest.mark.xfail(
    strict=True,
    reason="criterion 4, homodyne clause with the Euler linear stepper: the two "
    "Euler discretizations differ at O(dt^(3/2)) per step under a shared record "
    "(measured ~1e-3 at dt=1e-4 over 10^3 steps with a Gaussian record); "
    "unattainable as stated -- see the decisions ledger",
)
def test_criterion_04_homodyne_euler_pairing_as_stated():
    dt, n_steps = 1e-4, 1000
    model = decay_model()
    rng = trajectory_rng(20240914, 0)
    rho = EXCITED
    lin = WeightedState(EXCITED.copy())
    sup = 0.0
    for _ in range(n_steps):
        dw = rng.standard_normal() * np.sqrt(dt)
        rho, dy = homodyne_sme_step(rho, model, dt, dw)
        lin = linear_homodyne_step(lin, model, dt, dy=dy)
        sup = max(sup, float(np.max(np.abs(lin.normalized - rho))))
    print(f"[criterion 4, Euler pairing] measured sup-norm {sup:.2e} vs stated 1e-7")
    assert sup <= 1e-7


def test_criterion_05a_photodetection_feedback_ensemble():
    f_op = (np.pi / 4.0) * OPS["sigma_x"]
    model = decay_model()
    spec = EnsembleSpec(
        n_traj=10**4, master_seed=20240905, dt=1e-3, t_final=2.0,
        observables=(("rho_ee", PROJ_E),),
    )
    stats = run_ensemble(spec, Scenario("jump_feedback", model, EXCITED, feedback_operator=f_op))
    me_model = OpenSystemModel(np.zeros((2, 2)), [(1.0, feedback_unitary(f_op) @ SM)])
    ref = cm.me_expectations(me_model, EXCITED, spec.t_grid, [("rho_ee", PROJ_E)])["rho_ee"]
    z = max_z(stats, "rho_ee", ref)
    report(
        "5a", z <= 4.0,
        f"feedback ensemble vs Lindblad with channel exp(-iF)c: max |z| = {z:.2f} (<= 4)",
    )


@pytest.mark.parametrize("eta", [0.5, 1.0])
def test_criterion_05b_feedback_me_two_forms(eta):
    model = OpenSystemModel(0.3 * OPS["sigma_z"], [(1.0, SM)], efficiency=eta)
    rng = np.random.default_rng(20240955)
    raw = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
    f_op = 0.5 * (raw + raw.conj().T)
    worst = 0.0
    for i in range(2):
        for j in range(2):
            basis = np.zeros((2, 2), dtype=complex)
            basis[i, j] = 1.0
            gap = np.max(np.abs(
                feedback_me_rhs(basis, model, f_op) - lindblad_form_rhs(basis, model, f_op)
            ))
            worst = max(worst, float(gap))
    report(
        "5b", worst <= 1e-12,
        f"direct vs Lindblad feedback generator on the full operator basis "
        f"(eta={eta}): max gap {worst:.2e} (<= 1e-12)",
    )


def test_criterion_06_opo_closed_forms():
    model = opo_model(0.2, 1.0, 1.0)
    sigma_unc = lyapunov_solve(model.A, model.D)
    sigma_c = riccati_steady_state(model)
    m_gain = markovian_gain(model, np.eye(2))
    gaps = {
        "sigma_unc_11": abs(sigma_unc[0, 0] - 0.7142857),
        "sigma_unc_22": abs(sigma_unc[1, 1] - 1.6666667),
        "sigma_c_11": abs(sigma_c[0, 0] - 0.6),
        "sigma_c_22": abs(sigma_c[1, 1] - 1.6666667),
        "m_opt_11": abs(m_gain.gain[0, 0] - 0.2828427),
    }
    sigma_fb, decays = closed_loop_unconditional(model, np.eye(2), ("markovian", m_gain.gain))
    fb_gap = float(np.max(np.abs(sigma_fb - sigma_c)))
    ok = all(v <= 1e-6 for v in gaps.values()) and fb_gap <= 1e-8 and decays
    report(
        6, ok,
        "solver vs printed closed forms: "
        + ", ".join(f"{k} off by {v:.1e}" for k, v in gaps.items())
        + f"; Markovian-feedback unconditional covariance off by {fb_gap:.1e} (<= 1e-8)",
    )


F_CONJUGATE = np.array([[1.0, 1.0], [0.0, 0.0]])


def test_criterion_07_lqg_excess_noise_attainable_clauses():
    model = opo_model(0.2, 1.0, 1.0)
    p_cost = np.diag([1.0, 0.0])
    sigma_c = riccati_steady_state(model)
    res = lqg_gain(model, np.eye(2), p_cost, np.eye(2))
    sig = excess_noise_ss(model, np.eye(2), res.gain, cov_c=sigma_c)
    gap_fa = abs(sig[0, 0] - 0.0655386)
    # published inequality on the closed forms over a 10-point q grid
    inequality = all(
        opo_reference(0.2, 1.0, lam=1.0, q=q).f_b >= opo_reference(0.2, 1.0, lam=1.0, q=q).f_a
        for q in np.logspace(-4, 2, 10)
    )
    # q -> 0 limit for both feedback matrices
    limits = []
    for f_mat in (np.eye(2), F_CONJUGATE):
        res_small = lqg_gain(model, f_mat, p_cost, 1e-8 * np.eye(2))
        limits.append(excess_noise_ss(model, f_mat, res_small.gain, cov_c=sigma_c)[0, 0])
    ok = gap_fa <= 1e-6 and inequality and all(v < 1e-4 for v in limits)
    report(
        7, ok,
        f"Sigma_11(F=I) matches f_A within {gap_fa:.1e} (<= 1e-6); printed "
        f"f_B >= f_A on the q grid: {inequality}; q=1e-8 gives Sigma_11 = "
        f"{max(limits):.1e} (< 1e-4).  [f_B solver match tracked as expected "
        f"failure, see ledger]",
    )


@pytest.mark.xfail(
    strict=True,
    reason="criterion 7, f_B clause: the published closed form equals tr(Y N) "
    "(the optimal steady-state LQG cost), not the excess-noise element; the "
    "correct Riccati/Lyapunov solve gives Sigma_11 = 0.0506978, confirmed by "
    "scipy's CARE solver and by Monte Carlo of the closed-loop conditional "
    "means -- see the decisions ledger",
)
def test_criterion_07_f_b_solver_match_as_stated():
    model = opo_model(0.2, 1.0, 1.0)
    res = lqg_gain(model, F_CONJUGATE, np.diag([1.0, 0.0]), np.eye(2))
    sig = excess_noise_ss(model, F_CONJUGATE, res.gain)
    print(f"[criterion 7, f_B clause] solver Sigma_11 = {sig[0, 0]:.7f} vs printed 0.0702378")
    assert abs(sig[0, 0] - 0.0702378) <= 1e-6


def test_criterion_08_generalized_baths():
    # thermal steady state
    thermal = OpenSystemModel(np.zeros((2, 2)), [(1.0, SM)], bath=BathSpec(n_thermal=1.0))
    rho_ss = steady_state(thermal)
    ss_gap = float(np.max(np.abs(rho_ss - np.diag([1.0 / 3.0, 2.0 / 3.0]))))
    rhs_norm = float(np.max(np.abs(generalized_bath_me_rhs(thermal, np.diag([1 / 3, 2 / 3]).astype(complex)))))
    # vacuum reductions, pathwise identical
    vac = decay_model()
    rng = trajectory_rng(20240908, 0)
    rho_a = rho_b = EXCITED
    identical = True
    for _ in range(400):
        dw = rng.standard_normal() * np.sqrt(1e-3)
        rho_a, dy_a = homodyne_sme_step(rho_a, vac, 1e-3, dw)
        rho_b, dy_b = generalized_bath_homodyne_step(rho_b, vac, 1e-3, dw)
        identical = identical and np.array_equal(rho_a, rho_b) and dy_a == dy_b
    # heterodyne: state paths identical; the two printed current conventions
    # differ by the scale sqrt(2(N+1)) (= sqrt(2) at N = 0), so the currents
    # are compared through that conversion
    rho_a = rho_b = EXCITED
    currents_consistent = True
    for _ in range(400):
        dw = rng.standard_normal(2) * np.sqrt(1e-3)
        rho_a, d1, d2 = heterodyne_sme_step(rho_a, vac, 1e-3, dw[0], dw[1])
        rho_b, dy = generalized_bath_homodyne_step(rho_b, vac, 1e-3, dw, mode="heterodyne")
        identical = identical and np.array_equal(rho_a, rho_b)
        currents_consistent = currents_consistent and np.allclose(
            dy, np.sqrt(2.0) * np.array([d1, d2]), rtol=1e-12, atol=0
        )
    identical = identical and currents_consistent
    # squeezed-vacuum replacement operator at N = 1
    op = squeezed_vacuum_jump_operator(SM, 1.0)
    mu_gap = abs(op[1, 0] - np.sqrt(2.0))
    nu_gap = abs(op[0, 1] + 1.0)
    ok = ss_gap <= 1e-8 and rhs_norm <= 1e-12 and identical and mu_gap <= 1e-12 and nu_gap <= 1e-12
    report(
        8, ok,
        f"thermal steady state off by {ss_gap:.1e} (<= 1e-8, generator residual "
        f"{rhs_norm:.1e}); vacuum reductions pathwise identical: {identical}; "
        f"squeezed operator mu=sqrt(2), nu=1 off by {max(mu_gap, nu_gap):.1e} (<= 1e-12)",
    )


def test_criterion_09_ito_bookkeeping():
    dt = 1e-3
    root = np.sqrt(dt)
    rng = np.random.default_rng(20240909)
    raw = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
    rho = raw @ raw.conj().T
    rho = rho / np.trace(rho).real
    f_op = 0.4 * OPS["sigma_x"]
    vac = OpenSystemModel(0.3 * OPS["sigma_x"], [(1.0, SM)])
    thermal = OpenSystemModel(
        np.zeros((2, 2)), [(1.0, SM)], bath=BathSpec(n_thermal=0.8, squeezing=0.4)
    )
    fb_model = OpenSystemModel(np.zeros((2, 2)), [(1.0, SM)], efficiency=0.7)

    def drift_of(model, rhs):
        return rho + rhs(model, rho) * dt

    worst = 0.0

    def check(avg, target):
        nonlocal worst
        worst = max(worst, float(np.max(np.abs(avg - target))))

    up, _ = homodyne_sme_step(rho, vac, dt, root)
    dn, _ = homodyne_sme_step(rho, vac, dt, -root)
    check(0.5 * (up + dn), drift_of(vac, cm.liouvillian_apply))

    acc = np.zeros_like(rho)
    for s1 in (root, -root):
        for s2 in (root, -root):
            out, _, _ = heterodyne_sme_step(rho, vac, dt, s1, s2)
            acc += out
    check(acc / 4.0, drift_of(vac, cm.liouvillian_apply))

    up, _ = generalized_bath_homodyne_step(rho, thermal, dt, root)
    dn, _ = generalized_bath_homodyne_step(rho, thermal, dt, -root)
    check(0.5 * (up + dn), drift_of(thermal, generalized_bath_me_rhs))

    up, _ = homodyne_feedback_step(rho, fb_model, f_op, dt, root)
    dn, _ = homodyne_feedback_step(rho, fb_model, f_op, dt, -root)
    check(0.5 * (up + dn), rho + feedback_me_rhs(rho, fb_model, f_op) * dt)

    vac_simple = decay_model()
    up = linear_homodyne_step(WeightedState(rho), vac_simple, dt, dy=root).rho_bar
    dn = linear_homodyne_step(WeightedState(rho), vac_simple, dt, dy=-root).rho_bar
    check(0.5 * (up + dn), drift_of(vac_simple, cm.liouvillian_apply))

    # Kraus-map normalization residual: int p_ost M^dag M = 1 + O(dt^2)
    model_k = OpenSystemModel(0.3 * OPS["sigma_x"], [(1.0, SM)], efficiency=0.8)
    kappa, c = model_k.channels[0]
    cdc = c.conj().T @ c

    def residual(step):
        r = np.sqrt(step)
        acc = np.zeros((2, 2), dtype=complex)
        for dy in (r, -r):
            m = homodyne_kraus_operator(model_k, step, dy)
            acc += 0.5 * (m.conj().T @ m)
        acc += (1.0 - model_k.efficiency) * kappa * step * cdc
        return float(np.max(np.abs(acc - np.eye(2))))

    order = np.log2(residual(1e-3) / residual(5e-4))
    ok = worst <= 5e-15 and order >= 1.9
    report(
        9, ok,
        f"two-point averages equal the deterministic Euler step to {worst:.1e} "
        f"(machine precision); Kraus normalization residual order {order:.3f} (>= 1.9)",
    )


def test_criterion_10_determinism(tmp_path):
    from contmon.config import load_config_or_manifest, parse_config, run_scenario
    from contmon.presets import get_preset

    checked = []
    for name, overrides in (
        ("qubit_decay_jump", {"n_traj": 300, "t_final": 0.5}),
        ("opo_markovian_feedback", {"n_traj": 300, "t_final": 2.0}),
    ):
        doc = get_preset(name)
        doc["run"].update(overrides)
        doc["run"]["block_size"] = 64  # force several blocks so threading matters
        cfg = parse_config(json.dumps(doc))
        one = run_scenario(cfg, out_dir=tmp_path / f"{name}_t1", threads=1)
        eight = run_scenario(cfg, out_dir=tmp_path / f"{name}_t8", threads=8)
        rerun = run_scenario(
            load_config_or_manifest(one.manifest_path),
            out_dir=tmp_path / f"{name}_rerun", threads=8,
        )
        same = (
            one.stats_path.read_bytes()
            == eight.stats_path.read_bytes()
            == rerun.stats_path.read_bytes()
        )
        checked.append((name, same))
    ok = all(same for _, same in checked)
    report(
        10, ok,
        "byte-identical stats for 1 vs 8 threads and manifest reruns: "
        + ", ".join(f"{n}={s}" for n, s in checked),
    )
