"""Seeded, parallel Monte Carlo over trajectories with deterministic reduction.

Reproducibility contract: every trajectory owns a counter-based Philox
substream keyed by (master_seed, trajectory_index) and consumes a fixed number
of variates per step (documented per scenario kind below), so results are
bit-identical for any worker count.  Blocks of trajectories are stepped in
vectorized form; block partials are reduced in index order.

Variates drawn per step and trajectory:

=====================  =========================================
scenario kind          draws per step
=====================  =========================================
jump / jump_kraus /
jump_feedback /
jump_sse               1 uniform (click decision)
linear_jump            1 uniform (ostensible click decision)
homodyne family        1 normal, or 1 uniform in two-point mode
heterodyne family      2 normals (or 2 uniforms)
linear_homodyne        1 normal (ostensible current)
gaussian               one normal per monitored current
=====================  =========================================
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import diffusive, jump
from .core_ops import dagger, min_eigenvalue, trace
from .gaussian import GaussianModel, GaussianState, conditional_cov_rhs
from .jump import WeightedState
from .master_equation import OpenSystemModel, StepSizeError

__all__ = [
    "EnsembleSpec",
    "Scenario",
    "EnsembleStats",
    "ComparisonReport",
    "PhysicalityError",
    "trajectory_rng",
    "run_ensemble",
    "compare_to_me",
]

HILBERT_KINDS = {
    "jump",
    "jump_sse",
    "jump_kraus",
    "jump_feedback",
    "linear_jump",
    "homodyne",
    "homodyne_kraus",
    "heterodyne",
    "homodyne_feedback",
    "generalized_homodyne",
    "generalized_heterodyne",
    "linear_homodyne",
}
LINEAR_KINDS = {"linear_jump", "linear_homodyne"}
JUMP_KINDS = {"jump", "jump_sse", "jump_kraus", "jump_feedback", "linear_jump"}
TWO_NOISE_KINDS = {"heterodyne", "generalized_heterodyne"}

MIN_EIG_THRESHOLD = -1e-12
ESS_WARN_FRACTION = 0.01


class PhysicalityError(RuntimeError):
    """A mid-run state violated its physicality bounds; carries the step index."""

    def __init__(self, step: int, message: str):
        super().__init__(f"physicality violation at step {step}: {message}")
        self.step = step


def trajectory_rng(master_seed: int, index: int) -> np.random.Generator:
    """Independent, seekable substream for one trajectory: Philox keyed by
    (master_seed, trajectory_index)."""
    key = np.array([np.uint64(master_seed & (2**64 - 1)), np.uint64(index)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass
class EnsembleSpec:
    """Run geometry, seeding and storage policy for one trajectory ensemble."""

    n_traj: int
    master_seed: int
    dt: float
    t_final: float
    observables: tuple = ()
    noise: str = "gaussian"  # "gaussian" | "two_point"
    threads: int = 1
    block_size: int = 1024
    store_states: bool = False
    store_records: bool = False
    track_min_eigenvalue: bool = False
    validate_every: int = 0

    def __post_init__(self):
        if self.n_traj < 1:
            raise ValueError("n_traj must be >= 1")
        if self.dt <= 0 or self.t_final < self.dt:
            raise ValueError("need dt > 0 and t_final >= dt")
        if self.noise not in ("gaussian", "two_point"):
            raise ValueError("noise mode must be 'gaussian' or 'two_point'")
        self.observables = tuple(self.observables)

    @property
    def n_steps(self) -> int:
        return int(round(self.t_final / self.dt))

    @property
    def t_grid(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt


@dataclass
class Scenario:
    """What one trajectory does: which stepper, on which model, from which state.

    ``feedback_operator`` is the Hermitian F of the Hilbert-space feedback
    steppers; for Gaussian runs ``f_mat`` and ``controller = (kind, matrix)``
    with kind in {"lqg", "markovian"} set the feedback law.
    """

    kind: str
    model: OpenSystemModel | GaussianModel
    initial_state: object
    feedback_operator: np.ndarray | None = None
    f_mat: np.ndarray | None = None
    controller: tuple | None = None
    mu: float = 0.0
    beta_ost: float = 1.0

    def __post_init__(self):
        known = HILBERT_KINDS | {"gaussian"}
        if self.kind not in known:
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        if self.kind == "jump_feedback" and isinstance(self.model, OpenSystemModel):
            if self.model.efficiency != 1.0:
                raise ValueError("jump feedback requires unit efficiency")


@dataclass
class EnsembleStats:
    """Per-time mean and standard error of each observable, plus health counters."""

    t: np.ndarray
    means: dict
    std_errs: dict
    n_traj: int
    min_eigenvalue: float | None = None
    positivity_violations: int | None = None
    ess: np.ndarray | None = None
    states: np.ndarray | None = None
    records: np.ndarray | None = None
    extra: dict = field(default_factory=dict)


def _noise_matrix(master_seed, lo, hi, count, law):
    out = np.empty((hi - lo, count))
    if law == "uniform":
        for i, idx in enumerate(range(lo, hi)):
            out[i] = trajectory_rng(master_seed, idx).random(count)
    else:
        for i, idx in enumerate(range(lo, hi)):
            out[i] = trajectory_rng(master_seed, idx).standard_normal(count)
    return out


def _noise_law(spec: EnsembleSpec, kind: str) -> str:
    if kind in JUMP_KINDS:
        return "uniform"
    if spec.noise == "two_point":
        return "uniform"
    return "normal"


def _draws_per_step(scenario: Scenario) -> int:
    if scenario.kind in TWO_NOISE_KINDS:
        return 2
    if scenario.kind == "gaussian":
        return scenario.model.n_currents
    return 1


def _to_wiener(spec: EnsembleSpec, z: np.ndarray) -> np.ndarray:
    """Map raw variates to Wiener increments for diffusive kinds."""
    root = np.sqrt(spec.dt)
    if spec.noise == "two_point":
        return np.where(z < 0.5, root, -root)
    return z * root


def _hilbert_observables(kind, state, observables):
    if kind == "jump_sse":
        psi = state
        return [
            np.einsum("bi,ij,bj->b", np.conj(psi), op, psi).real for _, op in observables
        ], None
    if kind in LINEAR_KINDS:
        # weighted traces tr(rho_bar A) = w * <A>; no division, so zero-weight
        # paths (ostensible clicks from a dark state) stay harmless
        rho_bar = state
        w = trace(rho_bar).real
        return [np.einsum("bij,ji->b", rho_bar, op).real for _, op in observables], w
    rho = state
    return [np.einsum("bij,ji->b", rho, op).real for _, op in observables], None


def _check_physical(kind, state, step):
    """Abort-level checks: integration breakdown, not the (expected, reported)
    small positivity dips of Euler stepping at finite dt."""
    arr = np.asarray(state)
    if not np.all(np.isfinite(arr)):
        raise PhysicalityError(step, "non-finite state entries")
    if kind == "jump_sse" or arr.ndim < 3:
        return
    herm = float(np.max(np.abs(arr - dagger(arr))))
    if herm > 1e-8:
        raise PhysicalityError(step, f"hermiticity defect {herm:.3e}")
    if kind not in LINEAR_KINDS:
        tr_defect = float(np.max(np.abs(trace(arr) - 1.0)))
        if tr_defect > 1e-8:
            raise PhysicalityError(step, f"trace defect {tr_defect:.3e}")
        w_min = float(np.min(min_eigenvalue(arr)))
        if w_min < -1.0:
            raise PhysicalityError(step, f"state collapsed, min eigenvalue {w_min:.3e}")


def _advance_hilbert(spec: EnsembleSpec, scenario: Scenario, state, z):
    """One vectorized step; returns (state', record_row or None)."""
    kind, model, dt = scenario.kind, scenario.model, spec.dt
    if kind == "jump":
        p = jump.jump_probability(state, model, dt)
        _sanity(p)
        dn = z[:, 0] < p
        return jump.jump_sme_apply(state, model, dt, dn), dn
    if kind == "jump_kraus":
        p = jump.jump_probability(state, model, dt)
        _sanity(p)
        dn = z[:, 0] < p
        return jump.jump_kraus_apply(state, model, dt, dn), dn
    if kind == "jump_feedback":
        p = jump.jump_probability(state, model, dt)
        _sanity(p)
        dn = z[:, 0] < p
        return jump.jump_feedback_apply(state, model, scenario.feedback_operator, dt, dn), dn
    if kind == "jump_sse":
        kappa, c = model.single_channel()
        cdc = dagger(c) @ c
        ex = np.einsum("bi,ij,bj->b", np.conj(state), cdc, state).real
        p = model.efficiency * kappa * ex * dt
        _sanity(p)
        dn = z[:, 0] < p
        return jump.jump_sse_apply(state, model, dt, dn), dn
    if kind == "linear_jump":
        kappa, _ = model.single_channel()
        p_ost = model.efficiency * kappa * scenario.beta_ost * dt
        dn = z[:, 0] < p_ost
        new = jump.linear_jump_step(WeightedState(state), model, dt, dn, scenario.beta_ost)
        return new.rho_bar, dn
    if kind == "homodyne":
        dw = _to_wiener(spec, z[:, 0])
        rho, dy = diffusive.homodyne_sme_step(state, model, dt, dw)
        return rho, dy
    if kind == "homodyne_kraus":
        dw = _to_wiener(spec, z[:, 0])
        rho, dy = diffusive.homodyne_kraus_step(state, model, dt, dw)
        return rho, dy
    if kind == "homodyne_feedback":
        dw = _to_wiener(spec, z[:, 0])
        rho, dy = diffusive.homodyne_feedback_step(
            state, model, scenario.feedback_operator, dt, dw
        )
        return rho, dy
    if kind == "heterodyne":
        dw = _to_wiener(spec, z)
        rho, dy1, dy2 = diffusive.heterodyne_sme_step(state, model, dt, dw[:, 0], dw[:, 1])
        return rho, np.stack([dy1, dy2], axis=-1)
    if kind == "generalized_homodyne":
        dw = _to_wiener(spec, z[:, 0])
        rho, dy = diffusive.generalized_bath_homodyne_step(state, model, dt, dw)
        return rho, dy
    if kind == "generalized_heterodyne":
        dw = _to_wiener(spec, z)
        rho, dy = diffusive.generalized_bath_homodyne_step(state, model, dt, dw, mode="heterodyne")
        return rho, dy
    if kind == "linear_homodyne":
        kappa, _ = model.single_channel()
        dw = _to_wiener(spec, z[:, 0])
        dy = np.sqrt(kappa) * scenario.mu * dt + dw
        new = diffusive.linear_homodyne_step(
            WeightedState(state), model, dt, dy, scenario.mu
        )
        return new.rho_bar, dy
    raise ValueError(f"unhandled kind {kind!r}")


def _sanity(p):
    pmax = float(np.max(p))
    if pmax >= jump.JUMP_PROBABILITY_LIMIT:
        raise StepSizeError(
            f"jump probability per step {pmax:.3g} >= {jump.JUMP_PROBABILITY_LIMIT}"
        )


def _gaussian_paths(spec: EnsembleSpec, scenario: Scenario):
    """Deterministic covariance path shared by all trajectories, plus the
    per-step mean-update matrices."""
    model: GaussianModel = scenario.model
    state0: GaussianState = scenario.initial_state
    n_steps, dt = spec.n_steps, spec.dt
    cov = state0.cov.copy()
    covs = np.empty((n_steps + 1,) + cov.shape)
    covs[0] = cov
    for k in range(n_steps):
        k1 = conditional_cov_rhs(model, cov)
        k2 = conditional_cov_rhs(model, cov + 0.5 * dt * k1)
        k3 = conditional_cov_rhs(model, cov + 0.5 * dt * k2)
        k4 = conditional_cov_rhs(model, cov + dt * k3)
        cov = cov + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        cov = 0.5 * (cov + cov.T)
        covs[k + 1] = cov
    return covs


def _run_block(spec: EnsembleSpec, scenario: Scenario, lo, hi, shared):
    n_steps = spec.n_steps
    per_step = _draws_per_step(scenario)
    law = _noise_law(spec, scenario.kind) if scenario.kind != "gaussian" else "normal"
    noise = _noise_matrix(spec.master_seed, lo, hi, n_steps * per_step, law)
    nblk = hi - lo
    n_obs = len(spec.observables)
    sum1 = np.zeros((n_steps + 1, n_obs))
    sum2 = np.zeros((n_steps + 1, n_obs))
    sum4 = np.zeros((n_steps + 1, n_obs))
    wsum = np.zeros(n_steps + 1)
    w2sum = np.zeros(n_steps + 1)
    wx = np.zeros((n_steps + 1, n_obs))
    w2x = np.zeros((n_steps + 1, n_obs))
    w2x2 = np.zeros((n_steps + 1, n_obs))
    min_eig = np.inf
    violations = 0
    linear = scenario.kind in LINEAR_KINDS
    states_out = None
    records = None

    if scenario.kind == "gaussian":
        model: GaussianModel = scenario.model
        covs = shared["covs"]
        means = np.broadcast_to(scenario.initial_state.mean, (nblk, model.dim)).copy()
        m = model.n_currents
        comp_idx = [model.labels.index(name) for name, _ in spec.observables]
        if spec.store_states:
            states_out = np.empty((nblk, n_steps + 1, model.dim))
            states_out[:, 0] = means
        if spec.store_records:
            records = np.empty((nblk, n_steps, m))
        f_mat = scenario.f_mat
        ckind, cmat = scenario.controller if scenario.controller else ("none", None)
        fk = f_mat @ np.atleast_2d(cmat) if ckind == "lqg" else None
        fm = f_mat @ np.atleast_2d(cmat) if ckind == "markovian" else None

        def rec(k, r):
            for j, ci in enumerate(comp_idx):
                x = r[:, ci]
                sum1[k, j] += x.sum()
                sum2[k, j] += (x * x).sum()
                sum4[k, j] += (x**4).sum()

        rec(0, means)
        root_dt = np.sqrt(spec.dt)
        for k in range(n_steps):
            z = noise[:, k * m : (k + 1) * m]
            dw = z * root_dt
            gain = model.E - covs[k] @ model.B
            dy = -np.sqrt(2.0) * spec.dt * (means @ model.B) + dw
            new = means + (means @ model.A.T) * spec.dt + (dw @ gain.T) / np.sqrt(2.0)
            if fk is not None:
                new = new - (means @ fk.T) * spec.dt
            if fm is not None:
                new = new + dy @ fm.T
            if records is not None:
                records[:, k] = dy
            means = new
            rec(k + 1, means)
            if states_out is not None:
                states_out[:, k + 1] = means
        return dict(
            sum1=sum1, sum2=sum2, sum4=sum4, wsum=wsum, w2sum=w2sum, wx=wx,
            w2x=w2x, w2x2=w2x2, min_eig=min_eig, violations=violations,
            states=states_out, records=records,
        )

    # Hilbert-space kinds
    state0 = np.asarray(scenario.initial_state, dtype=complex)
    state = np.broadcast_to(state0, (nblk,) + state0.shape).copy()
    if spec.store_states:
        states_out = np.empty((nblk, n_steps + 1) + state0.shape, dtype=complex)
        states_out[:, 0] = state
    if spec.store_records:
        rec_width = per_step if scenario.kind in TWO_NOISE_KINDS else 1
        rec_dtype = np.uint8 if scenario.kind in JUMP_KINDS else float
        records = np.empty(
            (nblk, n_steps, rec_width) if rec_width > 1 else (nblk, n_steps),
            dtype=rec_dtype,
        )

    def record_stats(k):
        vals, w = _hilbert_observables(scenario.kind, state, spec.observables)
        if linear:
            # vals[j] holds the weighted traces w * x
            wsum[k] += w.sum()
            w2sum[k] += (w * w).sum()
            for j, wx_j in enumerate(vals):
                wx[k, j] += wx_j.sum()
                w2x[k, j] += (w * wx_j).sum()
                w2x2[k, j] += (wx_j * wx_j).sum()
            return
        for j, x in enumerate(vals):
            sum1[k, j] += x.sum()
            sum2[k, j] += (x * x).sum()

    record_stats(0)
    for k in range(n_steps):
        z = noise[:, k * per_step : (k + 1) * per_step]
        state, rec_row = _advance_hilbert(spec, scenario, state, z)
        if records is not None and rec_row is not None:
            records[:, k] = rec_row
        if spec.track_min_eigenvalue and scenario.kind != "jump_sse":
            if linear:
                w = trace(state).real
                arr = state / np.where(w <= 0.0, 1.0, w)[:, None, None]
            else:
                arr = state
            eigs = min_eigenvalue(arr)
            m_eig = float(np.min(eigs))
            min_eig = min(min_eig, m_eig)
            violations += int(np.count_nonzero(eigs < MIN_EIG_THRESHOLD))
        if spec.validate_every and (k + 1) % spec.validate_every == 0:
            _check_physical(scenario.kind, state, k)
        record_stats(k + 1)
        if states_out is not None:
            states_out[:, k + 1] = state
    return dict(
        sum1=sum1, sum2=sum2, sum4=sum4, wsum=wsum, w2sum=w2sum, wx=wx,
        w2x=w2x, w2x2=w2x2, min_eig=min_eig, violations=violations,
        states=states_out, records=records,
    )


def run_ensemble(spec: EnsembleSpec, scenario: Scenario) -> EnsembleStats:
    """Run the trajectory ensemble described by (spec, scenario).

    Deterministic for fixed (spec, scenario): the output is identical for any
    thread count because trajectory substreams depend only on (master_seed,
    index) and block partials are reduced in index order.
    """
    if scenario.kind == "gaussian" and not isinstance(scenario.model, GaussianModel):
        raise ValueError("gaussian scenario needs a GaussianModel")
    if spec.noise == "two_point" and (scenario.kind in JUMP_KINDS or scenario.kind == "gaussian"):
        raise ValueError("two-point noise applies to diffusive Hilbert-space unravellings only")
    shared = {}
    if scenario.kind == "gaussian":
        shared["covs"] = _gaussian_paths(spec, scenario)

    blocks = [
        (lo, min(lo + spec.block_size, spec.n_traj))
        for lo in range(0, spec.n_traj, spec.block_size)
    ]
    if spec.threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=spec.threads) as pool:
            futures = [
                pool.submit(_run_block, spec, scenario, lo, hi, shared)
                for lo, hi in blocks
            ]
            partials = [f.result() for f in futures]
    else:
        partials = [_run_block(spec, scenario, lo, hi, shared) for lo, hi in blocks]

    n_steps = spec.n_steps
    n_obs = len(spec.observables)
    tot = {
        key: sum(p[key] for p in partials)
        for key in ("sum1", "sum2", "sum4", "wsum", "w2sum", "wx", "w2x", "w2x2")
    }
    min_eig = min(p["min_eig"] for p in partials)
    violations = sum(p["violations"] for p in partials)
    n = spec.n_traj

    means, ses = {}, {}
    linear = scenario.kind in LINEAR_KINDS
    ess = None
    if linear:
        wsum, w2sum = tot["wsum"], tot["w2sum"]
        # a fully collapsed ensemble (all ostensible paths annihilated) has no
        # estimate at all: NaN means, zero effective sample size
        ess = np.where(w2sum > 0.0, wsum**2 / np.where(w2sum > 0.0, w2sum, 1.0), 0.0)
        safe_w = np.where(wsum != 0.0, wsum, np.nan)
        for j, (name, _) in enumerate(spec.observables):
            mean = tot["wx"][:, j] / safe_w
            var_num = tot["w2x2"][:, j] - 2 * mean * tot["w2x"][:, j] + mean**2 * w2sum
            ses[name] = np.sqrt(np.maximum(var_num, 0.0)) / safe_w
            means[name] = mean
        if np.min(ess) < ESS_WARN_FRACTION * n:
            warnings.warn(
                f"effective sample size dropped to {np.min(ess):.1f} "
                f"(< {ESS_WARN_FRACTION:.0%} of {n} trajectories)",
                RuntimeWarning,
            )
    else:
        for j, (name, _) in enumerate(spec.observables):
            mean = tot["sum1"][:, j] / n
            var = np.maximum(tot["sum2"][:, j] / n - mean**2, 0.0)
            means[name] = mean
            # sample std / sqrt(n)
            ses[name] = np.sqrt(var * (n / max(n - 1, 1))) / np.sqrt(n)

    states = None
    if spec.store_states:
        states = np.concatenate([p["states"] for p in partials], axis=0)
    records = None
    if spec.store_records:
        records = np.concatenate([p["records"] for p in partials], axis=0)

    stats = EnsembleStats(
        t=spec.t_grid,
        means=means,
        std_errs=ses,
        n_traj=n,
        min_eigenvalue=None if not spec.track_min_eigenvalue else float(min_eig),
        positivity_violations=None if not spec.track_min_eigenvalue else int(violations),
        ess=ess,
        states=states,
        records=records,
    )
    if scenario.kind == "gaussian":
        stats.extra["cov_path"] = shared["covs"]
        m2, m4 = {}, {}
        for j, (name, _) in enumerate(spec.observables):
            m2[name] = tot["sum2"][:, j] / n
            m4[name] = tot["sum4"][:, j] / n
        stats.extra["m2"] = m2
        stats.extra["m4"] = m4
    return stats


@dataclass(frozen=True)
class ComparisonReport:
    """z-score comparison of ensemble means against a reference curve."""

    max_abs_z: float
    argmax_observable: str
    argmax_time_index: int
    z_scores: dict
    threshold: float

    @property
    def passed(self) -> bool:
        return self.max_abs_z <= self.threshold


def compare_to_me(stats: EnsembleStats, reference: dict, threshold: float = 4.0) -> ComparisonReport:
    """Per-time z-scores |mean - reference| / SE for each observable present in
    ``reference``; zero-SE points pass only on exact agreement."""
    z_scores = {}
    worst = (0.0, "", 0)
    for name, ref in reference.items():
        if name not in stats.means:
            raise KeyError(f"observable {name!r} missing from ensemble stats")
        ref = np.asarray(ref, dtype=float)
        if ref.shape != stats.means[name].shape:
            raise ValueError(f"grid mismatch for {name!r}")
        diff = np.abs(stats.means[name] - ref)
        se = stats.std_errs[name]
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(diff == 0.0, 0.0, diff / se)
        z_scores[name] = z
        idx = int(np.argmax(z))
        if z[idx] > worst[0]:
            worst = (float(z[idx]), name, idx)
    return ComparisonReport(worst[0], worst[1], worst[2], z_scores, threshold)
