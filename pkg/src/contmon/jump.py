"""Photodetection (jump) trajectories: the nonlinear SME, the pure-state SSE,
linear trajectories with ostensible weights, the two-operator Kraus stepper,
and photodetection feedback.

All steppers operate on a single monitored channel of a vacuum-bath model and
broadcast over leading batch axes of the state.  Sampling steppers draw exactly
one uniform variate per step from the supplied generator; the ``*_apply``
variants are deterministic given the click outcome, which is what the linear
(ostensible-probability) machinery and the ensemble layer feed them.
Per-model operator products are cached, so repeated stepping costs only the
batched state arithmetic.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.linalg import expm

from .core_ops import dagger, hermitize, is_hermitian, trace
from .master_equation import OpenSystemModel, StepSizeError

__all__ = [
    "JumpRecord",
    "WeightedState",
    "DarkStateJumpError",
    "jump_probability",
    "jump_sme_step",
    "jump_sme_apply",
    "jump_sse_step",
    "jump_sse_apply",
    "linear_jump_step",
    "jump_kraus_step",
    "jump_kraus_apply",
    "jump_feedback_step",
    "jump_feedback_apply",
]

DARK_STATE_RATE = 1e-14
JUMP_PROBABILITY_LIMIT = 0.1


class DarkStateJumpError(RuntimeError):
    """A click was forced on a state the collapse operator annihilates."""


@dataclass(frozen=True)
class JumpRecord:
    """Measurement record of one photodetection trajectory.

    ``grid_dn[k]`` is the 0/1 click outcome of step k (t in [k dt, (k+1) dt)),
    ``jump_times`` the corresponding ordered click times.
    """

    grid_dn: np.ndarray
    dt: float
    master_seed: int | None = None
    trajectory_index: int | None = None

    @property
    def jump_times(self) -> np.ndarray:
        (steps,) = np.nonzero(self.grid_dn)
        return (steps + 1) * self.dt

    @property
    def n_jumps(self) -> int:
        return int(np.sum(self.grid_dn))


@dataclass(frozen=True)
class WeightedState:
    """Unnormalized conditional state of a linear trajectory.

    The trace carries the likelihood reweighting: p_true = p_ost * Tr[rho_bar].
    """

    rho_bar: np.ndarray

    @property
    def weight(self):
        return np.real(trace(self.rho_bar))

    @property
    def log_weight(self):
        return np.log(self.weight)

    @property
    def normalized(self) -> np.ndarray:
        return self.rho_bar / np.asarray(self.weight)[..., None, None]


_CTX: "weakref.WeakKeyDictionary[OpenSystemModel, dict]" = weakref.WeakKeyDictionary()


def _ctx(model: OpenSystemModel) -> dict:
    """Cached per-model operator products for the jump steppers."""
    ctx = _CTX.get(model)
    if ctx is None:
        if not model.bath.is_vacuum:
            raise ValueError("jump unravelling is defined for vacuum baths only")
        kappa, c = model.single_channel()
        h = model.constant_hamiltonian()
        cd = np.ascontiguousarray(dagger(c))
        cdc = cd @ c
        ctx = {
            "kappa": kappa,
            "c": c,
            "cd": cd,
            "cdc": cdc,
            "h": h,
            "h_zero": not np.any(h),
            "eye": np.eye(model.dim, dtype=complex),
        }
        _CTX[model] = ctx
    return ctx


def _expect(rho: np.ndarray, op: np.ndarray):
    return np.einsum("...ij,ji->...", rho, op).real


def _renormalize(rho: np.ndarray) -> np.ndarray:
    rho = hermitize(rho)
    return rho / np.asarray(trace(rho).real)[..., None, None]


def _select_clicked(no_click, rho, dn, rate, sandwich):
    """Overwrite the clicked entries of ``no_click`` with the (renormalized)
    sandwich map of ``rho``; raises on dark-state clicks."""
    dn = np.asarray(dn, dtype=bool)
    if dn.ndim == 0:
        if not dn:
            return no_click
        if rate < DARK_STATE_RATE:
            raise DarkStateJumpError("cannot jump from a dark state (<c^dag c> ~ 0)")
        return hermitize(sandwich(rho)) / rate
    if not dn.any():
        return no_click
    rate = np.asarray(rate)
    if np.any(dn & (rate < DARK_STATE_RATE)):
        raise DarkStateJumpError("cannot jump from a dark state (<c^dag c> ~ 0)")
    out = no_click
    sub = hermitize(sandwich(rho[dn])) / rate[dn][..., None, None]
    out[dn] = sub
    return out


def jump_probability(rho: np.ndarray, model: OpenSystemModel, dt: float):
    """Click probability eta kappa <c^dag c> dt for the coming step."""
    ctx = _ctx(model)
    return model.efficiency * ctx["kappa"] * _expect(rho, ctx["cdc"]) * dt


def _check_step_sanity(p):
    pmax = float(np.max(p))
    if pmax >= JUMP_PROBABILITY_LIMIT:
        raise StepSizeError(
            f"jump probability per step {pmax:.3g} >= {JUMP_PROBABILITY_LIMIT}; reduce dt"
        )


def jump_sme_apply(rho: np.ndarray, model: OpenSystemModel, dt: float, dn) -> np.ndarray:
    """Deterministic photodetection SME update for a given click outcome.

    No click: Euler step of
        -i[H, rho] dt - (eta kappa / 2) H[c^dag c] rho dt + (1-eta) kappa D[c] rho dt.
    Click: rho -> c rho c^dag / <c^dag c> (dt * dN cross terms dropped).
    """
    ctx = _ctx(model)
    kappa, c, cd, cdc, h = ctx["kappa"], ctx["c"], ctx["cd"], ctx["cdc"], ctx["h"]
    eta = model.efficiency
    rho = np.asarray(rho, dtype=complex)

    rate = _expect(rho, cdc)
    # H[c^dag c] rho = cdc rho + rho cdc - 2 <cdc> rho  (cdc Hermitian)
    meas = cdc @ rho + rho @ cdc - (2.0 * np.asarray(rate))[..., None, None] * rho
    drift = (-0.5 * eta * kappa) * meas
    if eta != 1.0:
        drift = drift + ((1.0 - eta) * kappa) * (
            c @ rho @ cd - 0.5 * (cdc @ rho + rho @ cdc)
        )
    if not ctx["h_zero"]:
        drift = drift + (-1j) * (h @ rho - rho @ h)
    no_click = _renormalize(rho + drift * dt)
    return _select_clicked(no_click, rho, dn, rate, lambda r: c @ r @ cd)


def jump_sme_step(rho, model: OpenSystemModel, dt: float, rng: np.random.Generator):
    """Sample dN (P(dN=1) = eta kappa <c^dag c> dt) and apply the SME update."""
    p = jump_probability(rho, model, dt)
    _check_step_sanity(p)
    u = rng.random(np.shape(p)) if np.ndim(p) else rng.random()
    dn = u < p
    return jump_sme_apply(rho, model, dt, dn), dn


def jump_sse_apply(psi: np.ndarray, model: OpenSystemModel, dt: float, dn) -> np.ndarray:
    """Stochastic Schroedinger equation update (perfect detection only).

    No click: psi += (-i H + (kappa/2)(<c^dag c> - c^dag c)) psi dt, renormalized.
    Click: psi -> c psi / ||c psi||.
    """
    if model.efficiency != 1.0:
        raise ValueError("the SSE is defined for unit detection efficiency")
    ctx = _ctx(model)
    kappa, c, cdc, h = ctx["kappa"], ctx["c"], ctx["cdc"], ctx["h"]
    psi = np.asarray(psi, dtype=complex)
    dn = np.asarray(dn, dtype=bool)

    cdc_psi = psi @ cdc.T
    ex = np.einsum("...i,...i->...", np.conj(psi), cdc_psi).real
    drift = (kappa / 2.0) * (np.asarray(ex)[..., None] * psi - cdc_psi)
    if not ctx["h_zero"]:
        drift = drift - 1j * (psi @ h.T)
    no_click = psi + drift * dt
    no_click = no_click / np.linalg.norm(no_click, axis=-1, keepdims=True)

    if not np.any(dn):
        return no_click
    if np.any(dn & (np.asarray(ex) < DARK_STATE_RATE)):
        raise DarkStateJumpError("cannot jump from a dark state")
    jumped = psi @ c.T
    norm = np.linalg.norm(jumped, axis=-1, keepdims=True)
    jumped = jumped / np.where(norm < np.sqrt(DARK_STATE_RATE), 1.0, norm)
    return np.where(dn[..., None], jumped, no_click)


def jump_sse_step(psi, model: OpenSystemModel, dt: float, rng: np.random.Generator):
    """Sample dN on the pure state and apply the SSE update."""
    ctx = _ctx(model)
    psi = np.asarray(psi, dtype=complex)
    ex = np.einsum("...i,ij,...j->...", np.conj(psi), ctx["cdc"], psi).real
    p = model.efficiency * ctx["kappa"] * ex * dt
    _check_step_sanity(p)
    u = rng.random(np.shape(p)) if np.ndim(p) else rng.random()
    dn = u < p
    return jump_sse_apply(psi, model, dt, dn), dn


def linear_jump_step(
    state: WeightedState,
    model: OpenSystemModel,
    dt: float,
    dn,
    beta: float,
) -> WeightedState:
    """Linear photodetection SME step with ostensible rate beta > 0.

    No click: rho_bar += (-i[H, rho_bar] - (kappa/2){c^dag c, rho_bar}
    + beta kappa rho_bar) dt; click: rho_bar -> c rho_bar c^dag / beta.  The
    click outcome is supplied externally, sampled from the ostensible law
    P(dN=1) = eta kappa beta dt.  Requires unit efficiency (the form the
    linear-trajectory theory is stated for).
    """
    if beta <= 0:
        raise ValueError("ostensible rate beta must be > 0")
    if model.efficiency != 1.0:
        raise ValueError("linear jump trajectories assume unit efficiency")
    ctx = _ctx(model)
    kappa, c, cd, cdc, h = ctx["kappa"], ctx["c"], ctx["cd"], ctx["cdc"], ctx["h"]
    rb = np.asarray(state.rho_bar, dtype=complex)
    dn = np.asarray(dn, dtype=bool)

    drift = (-kappa / 2.0) * (cdc @ rb + rb @ cdc) + (beta * kappa) * rb
    if not ctx["h_zero"]:
        drift = drift + (-1j) * (h @ rb - rb @ h)
    no_click = rb + drift * dt
    if not np.any(dn):
        return WeightedState(hermitize(no_click))
    clicked = (c @ rb @ cd) / beta
    if dn.ndim == 0:
        return WeightedState(hermitize(clicked))
    return WeightedState(hermitize(np.where(dn[..., None, None], clicked, no_click)))


def jump_kraus_apply(rho: np.ndarray, model: OpenSystemModel, dt: float, dn) -> np.ndarray:
    """Two-operator Kraus update, positive for any dt.

    No click applies M0 = 1 - iH dt - (kappa/2) c^dag c dt with the undetected
    decay folded in as the sandwich kappa (1-eta) c rho c^dag dt; a click
    applies M1 = sqrt(eta kappa dt) c.  Both branches renormalize.
    """
    ctx = _ctx(model)
    kappa, c, cd, cdc, h = ctx["kappa"], ctx["c"], ctx["cd"], ctx["cdc"], ctx["h"]
    eta = model.efficiency
    rho = np.asarray(rho, dtype=complex)

    key = ("m0", dt)
    m0 = ctx.get(key)
    if m0 is None:
        m0 = ctx["eye"] - 1j * h * dt - (kappa / 2.0) * cdc * dt
        ctx[key] = m0
        ctx[("m0d", dt)] = np.ascontiguousarray(dagger(m0))
    m0d = ctx[("m0d", dt)]
    numer = m0 @ rho @ m0d
    if eta != 1.0:
        numer = numer + ((1.0 - eta) * kappa * dt) * (c @ rho @ cd)
    no_click = _renormalize(numer)
    rate = _expect(rho, cdc)
    return _select_clicked(no_click, rho, dn, rate, lambda r: c @ r @ cd)


def jump_kraus_step(rho, model: OpenSystemModel, dt: float, rng: np.random.Generator):
    """Sample dN with the same law as the SME stepper, apply the Kraus update."""
    p = jump_probability(rho, model, dt)
    _check_step_sanity(p)
    u = rng.random(np.shape(p)) if np.ndim(p) else rng.random()
    dn = u < p
    return jump_kraus_apply(rho, model, dt, dn), dn


@lru_cache(maxsize=64)
def _cached_feedback_unitary(key: bytes, dim: int) -> np.ndarray:
    f = np.frombuffer(key, dtype=complex).reshape(dim, dim)
    return expm(-1j * f)


def feedback_unitary(f_op: np.ndarray) -> np.ndarray:
    """exp(-i F) for a Hermitian feedback generator F (cached)."""
    f_op = np.asarray(f_op, dtype=complex)
    if not is_hermitian(f_op):
        raise ValueError("feedback operator must be Hermitian")
    return _cached_feedback_unitary(np.ascontiguousarray(f_op).tobytes(), f_op.shape[0])


def jump_feedback_apply(
    rho: np.ndarray, model: OpenSystemModel, f_op: np.ndarray, dt: float, dn
) -> np.ndarray:
    """Photodetection feedback update: the unitary exp(-iF) acts right after a
    click, replacing the jump branch by (e^{-iF} c) rho (e^{-iF} c)^dag / <c^dag c>.
    The no-click branch is the eta = 1 SME branch (the only case derived)."""
    if model.efficiency != 1.0:
        raise ValueError("jump feedback requires unit efficiency")
    ctx = _ctx(model)
    kappa, c, cdc, h = ctx["kappa"], ctx["c"], ctx["cdc"], ctx["h"]
    u_fb = feedback_unitary(f_op)
    uc = u_fb @ c
    ucd = np.ascontiguousarray(dagger(uc))
    rho = np.asarray(rho, dtype=complex)

    rate = _expect(rho, cdc)
    meas = cdc @ rho + rho @ cdc - (2.0 * np.asarray(rate))[..., None, None] * rho
    drift = (-0.5 * kappa) * meas
    if not ctx["h_zero"]:
        drift = drift + (-1j) * (h @ rho - rho @ h)
    no_click = _renormalize(rho + drift * dt)
    return _select_clicked(no_click, rho, dn, rate, lambda r: uc @ r @ ucd)


def jump_feedback_step(
    rho, model: OpenSystemModel, f_op: np.ndarray, dt: float, rng: np.random.Generator
):
    """Sample dN (feedback leaves the click probability unchanged) and update."""
    p = jump_probability(rho, model, dt)
    _check_step_sanity(p)
    u = rng.random(np.shape(p)) if np.ndim(p) else rng.random()
    dn = u < p
    return jump_feedback_apply(rho, model, f_op, dt, dn), dn
