"""Homodyne/heterodyne trajectories: the diffusive SME, the positivity-preserving
Kraus-map stepper, linear (unnormalized) trajectories, homodyne feedback, and the
squeezed-thermal-bath variants.

Steppers never own randomness: Wiener increments are generated by the caller
(the ensemble layer) and passed in, so shared-noise equivalence tests and
feedback paths can reuse the same increments.  The local-oscillator phase
enters once, through c -> c e^{i theta} at the stepper boundary; internals
assume theta = 0.  States broadcast over leading batch axes; ``dw`` may be a
scalar or a matching batch vector.  Per-model operator products are cached.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass

import numpy as np

from .core_ops import dagger, hermitize, is_hermitian, trace
from .jump import WeightedState
from .master_equation import OpenSystemModel, coherent_drive_hamiltonian

__all__ = [
    "DiffusiveRecord",
    "homodyne_sme_step",
    "homodyne_kraus_step",
    "heterodyne_sme_step",
    "linear_homodyne_step",
    "linear_homodyne_kraus_step",
    "homodyne_feedback_step",
    "feedback_me_rhs",
    "lindblad_form_rhs",
    "generalized_bath_homodyne_step",
    "squeezed_vacuum_jump_operator",
    "homodyne_kraus_operator",
]


@dataclass(frozen=True)
class DiffusiveRecord:
    """Measurement record of one diffusive trajectory: per-step photocurrent
    increments (one column per channel) and the underlying Wiener increments."""

    grid_dy: np.ndarray
    grid_dw: np.ndarray
    dt: float
    master_seed: int | None = None
    trajectory_index: int | None = None

    @property
    def n_channels(self) -> int:
        return 1 if self.grid_dy.ndim == 1 else self.grid_dy.shape[-1]


_CTX: "weakref.WeakKeyDictionary[OpenSystemModel, dict]" = weakref.WeakKeyDictionary()


def _ctx(model: OpenSystemModel) -> dict:
    ctx = _CTX.get(model)
    if ctx is None:
        kappa, c = model.single_channel()
        h = model.constant_hamiltonian()
        theta = model.homodyne_phase
        ceff = c if theta == 0.0 else c * np.exp(1j * theta)
        cd = np.ascontiguousarray(dagger(c))
        ceff_d = np.ascontiguousarray(dagger(ceff))
        ctx = {
            "kappa": kappa,
            "c": c,
            "cd": cd,
            "cdc": cd @ c,
            "ceff": ceff,
            "ceff_d": ceff_d,
            "herm": ceff + ceff_d,
            "herm_i": 1j * ceff + dagger(1j * ceff),
            "root": np.sqrt(model.efficiency * kappa),
            "h": h,
            "h_zero": not np.any(h),
            "eye": np.eye(model.dim, dtype=complex),
        }
        _CTX[model] = ctx
    return ctx


def _expect(rho: np.ndarray, op: np.ndarray):
    return np.einsum("...ij,ji->...", rho, op).real


def _renorm(rho: np.ndarray) -> np.ndarray:
    rho = hermitize(rho)
    return rho / np.asarray(trace(rho).real)[..., None, None]


def _bc(x):
    """Broadcast a per-trajectory scalar against (..., d, d) states."""
    return np.asarray(x)[..., None, None]


def _vacuum_drift(ctx, rho):
    """-i[H, rho] + kappa D[c] rho with cached products (H term skipped if zero)."""
    c, cd, cdc, kappa, h = ctx["c"], ctx["cd"], ctx["cdc"], ctx["kappa"], ctx["h"]
    drift = kappa * (c @ rho @ cd - 0.5 * (cdc @ rho + rho @ cdc))
    if not ctx["h_zero"]:
        drift = drift + (-1j) * (h @ rho - rho @ h)
    return drift


def homodyne_sme_step(rho: np.ndarray, model: OpenSystemModel, dt: float, dw):
    """Euler step of the homodyne SME

        d rho = -i[H, rho] dt + kappa D[c] rho dt + sqrt(eta kappa) H[c e^{i theta}] rho dw

    returning the renormalized state and the photocurrent increment
    dy = sqrt(eta kappa) <c e^{i theta} + h.c.> dt + dw.
    """
    ctx = _ctx(model)
    if not model.bath.is_vacuum:
        raise ValueError("vacuum-bath stepper; use generalized_bath_homodyne_step")
    ceff, ceff_d, root = ctx["ceff"], ctx["ceff_d"], ctx["root"]
    sig = _expect(rho, ctx["herm"])
    sto = ceff @ rho + rho @ ceff_d - _bc(sig) * rho
    rho2 = rho + _vacuum_drift(ctx, rho) * dt + root * sto * _bc(dw)
    dy = root * sig * dt + dw
    return _renorm(rho2), dy


def homodyne_kraus_operator(model: OpenSystemModel, dt: float, dy) -> np.ndarray:
    """Kraus operator M = 1 - iH dt - (kappa/2) c^dag c dt + sqrt(eta kappa) c dy."""
    ctx = _ctx(model)
    key = ("kraus_base", dt)
    base = ctx.get(key)
    if base is None:
        base = ctx["eye"] - 1j * ctx["h"] * dt - (ctx["kappa"] / 2.0) * ctx["cdc"] * dt
        ctx[key] = base
    return base + (ctx["root"] * _bc(dy)) * ctx["ceff"]


def homodyne_kraus_step(rho: np.ndarray, model: OpenSystemModel, dt: float, dw):
    """Positivity-preserving homodyne step: the state is conjugated by the Kraus
    operator built from the measured increment, with the undetected channel
    added as kappa (1-eta) c rho c^dag dt, then renormalized."""
    ctx = _ctx(model)
    if not model.bath.is_vacuum:
        raise ValueError("vacuum-bath stepper; use generalized_bath_homodyne_step")
    dy = ctx["root"] * _expect(rho, ctx["herm"]) * dt + dw
    m = homodyne_kraus_operator(model, dt, dy)
    numer = m @ rho @ dagger(m)
    if model.efficiency != 1.0:
        numer = numer + ((1.0 - model.efficiency) * ctx["kappa"] * dt) * (
            ctx["c"] @ rho @ ctx["cd"]
        )
    return _renorm(numer), dy


def heterodyne_sme_step(rho: np.ndarray, model: OpenSystemModel, dt: float, dw1, dw2):
    """Heterodyne (double-homodyne) SME step with the two jump operators
    c/sqrt(2) and i c/sqrt(2); returns (rho', dy1, dy2)."""
    ctx = _ctx(model)
    if not model.bath.is_vacuum:
        raise ValueError("vacuum-bath stepper; use generalized_bath_homodyne_step")
    ceff, ceff_d = ctx["ceff"], ctx["ceff_d"]
    root = np.sqrt(model.efficiency * ctx["kappa"] / 2.0)
    sig1 = _expect(rho, ctx["herm"])
    sig2 = _expect(rho, ctx["herm_i"])
    s1 = ceff @ rho + rho @ ceff_d - _bc(sig1) * rho
    s2 = (1j * ceff) @ rho + rho @ (-1j * ceff_d) - _bc(sig2) * rho
    rho2 = rho + _vacuum_drift(ctx, rho) * dt + root * (s1 * _bc(dw1) + s2 * _bc(dw2))
    dy1 = root * sig1 * dt + dw1
    dy2 = root * sig2 * dt + dw2
    return _renorm(rho2), dy1, dy2


def linear_homodyne_step(
    state: WeightedState, model: OpenSystemModel, dt: float, dy, mu: float = 0.0
):
    """Linear homodyne SME step for the unnormalized state, with the formal
    substitution <c + c^dag> -> mu:

        d rho_bar = (-i[H, rho_bar] + kappa D[c] rho_bar) dt
                    + sqrt(kappa) (c rho_bar + rho_bar c^dag - mu rho_bar)
                      (dy - sqrt(kappa) mu dt)

    The record dy is supplied externally, sampled from the ostensible law
    Normal(sqrt(kappa) mu dt, dt).  Requires unit efficiency (the form the
    linear-trajectory theory is stated for)."""
    if model.efficiency != 1.0:
        raise ValueError("linear homodyne trajectories assume unit efficiency")
    ctx = _ctx(model)
    if not model.bath.is_vacuum:
        raise ValueError("linear trajectories are defined for vacuum baths")
    kappa, ceff, ceff_d = ctx["kappa"], ctx["ceff"], ctx["ceff_d"]
    rb = np.asarray(state.rho_bar, dtype=complex)
    meas = ceff @ rb + rb @ ceff_d
    if mu != 0.0:
        meas = meas - mu * rb
    rb2 = rb + _vacuum_drift(ctx, rb) * dt + np.sqrt(kappa) * meas * _bc(
        dy - np.sqrt(kappa) * mu * dt
    )
    return WeightedState(hermitize(rb2))


def linear_homodyne_kraus_step(
    state: WeightedState, model: OpenSystemModel, dt: float, dy
) -> WeightedState:
    """Completely positive form of the mu = 0 linear homodyne step: the
    unnormalized state is conjugated by the Kraus operator of the measured
    increment (whose numerator is exactly the linear-SME evolution), keeping
    the weight in the trace."""
    ctx = _ctx(model)
    rb = np.asarray(state.rho_bar, dtype=complex)
    m = homodyne_kraus_operator(model, dt, dy)
    numer = m @ rb @ dagger(m)
    if model.efficiency != 1.0:
        numer = numer + ((1.0 - model.efficiency) * ctx["kappa"] * dt) * (
            ctx["c"] @ rb @ ctx["cd"]
        )
    return WeightedState(hermitize(numer))


def _feedback_ctx(ctx, f_op):
    f_op = np.asarray(f_op, dtype=complex)
    key = ("fb", f_op.tobytes())
    sub = ctx.get(key)
    if sub is None:
        if not is_hermitian(f_op):
            raise ValueError("feedback operator must be Hermitian")
        sub = {"f": f_op}
        ctx[key] = sub
    return sub


def homodyne_feedback_step(
    rho: np.ndarray, model: OpenSystemModel, f_op: np.ndarray, dt: float, dw
):
    """Homodyne feedback SME step for H_fb = F I(t) with the current renormalized
    by sqrt(eta):

        d rho = -i[H, rho] dt + kappa D[c] rho dt - i sqrt(kappa) [F, c rho + rho c^dag] dt
                + (1/eta) D[F] rho dt + (sqrt(eta kappa) H[c] rho - i[F, rho]) dw

    Returns the renormalized state and the raw measured increment dy."""
    if not 0.0 < model.efficiency <= 1.0:
        raise ValueError("homodyne feedback needs efficiency in (0, 1]")
    ctx = _ctx(model)
    if not model.bath.is_vacuum:
        raise ValueError("feedback steppers are defined for vacuum baths")
    fctx = _feedback_ctx(ctx, f_op)
    f = fctx["f"]
    kappa, ceff, ceff_d, root = ctx["kappa"], ctx["ceff"], ctx["ceff_d"], ctx["root"]
    eta = model.efficiency

    u = ceff @ rho + rho @ ceff_d
    f2 = fctx.get("f2")
    if f2 is None:
        f2 = fctx["f2"] = f @ f
    drift = (
        _vacuum_drift(ctx, rho)
        - 1j * np.sqrt(kappa) * (f @ u - u @ f)
        + (1.0 / eta) * (f @ rho @ f - 0.5 * (f2 @ rho + rho @ f2))
    )
    sig = _expect(rho, ctx["herm"])
    sto = root * (u - _bc(sig) * rho) - 1j * (f @ rho - rho @ f)
    rho2 = rho + drift * dt + sto * _bc(dw)
    dy = root * sig * dt + dw
    return _renorm(rho2), dy


def feedback_me_rhs(rho: np.ndarray, model: OpenSystemModel, f_op: np.ndarray) -> np.ndarray:
    """Unconditional homodyne-feedback generator, direct form:

        -i[H, rho] + kappa D[c] rho - i sqrt(kappa) [F, c rho + rho c^dag]
        + (1/eta) D[F] rho
    """
    if not 0.0 < model.efficiency <= 1.0:
        raise ValueError("feedback master equation needs efficiency in (0, 1]")
    ctx = _ctx(model)
    fctx = _feedback_ctx(ctx, f_op)
    f = fctx["f"]
    kappa, ceff, ceff_d = ctx["kappa"], ctx["ceff"], ctx["ceff_d"]
    u = ceff @ rho + rho @ ceff_d
    f2 = fctx.get("f2")
    if f2 is None:
        f2 = fctx["f2"] = f @ f
    return (
        _vacuum_drift(ctx, rho)
        - 1j * np.sqrt(kappa) * (f @ u - u @ f)
        + (1.0 / model.efficiency) * (f @ rho @ f - 0.5 * (f2 @ rho + rho @ f2))
    )


def lindblad_form_rhs(rho: np.ndarray, model: OpenSystemModel, f_op: np.ndarray) -> np.ndarray:
    """The same generator rewritten in Lindblad form:

        -i[H + sqrt(kappa)(c^dag F + F c)/2, rho] + D[sqrt(kappa) c - i F] rho
        + ((1-eta)/eta) D[F] rho
    """
    if not 0.0 < model.efficiency <= 1.0:
        raise ValueError("feedback master equation needs efficiency in (0, 1]")
    ctx = _ctx(model)
    fctx = _feedback_ctx(ctx, f_op)
    f = fctx["f"]
    kappa, ceff, ceff_d, h = ctx["kappa"], ctx["ceff"], ctx["ceff_d"], ctx["h"]
    eta = model.efficiency
    h_eff = h + (np.sqrt(kappa) / 2.0) * (ceff_d @ f + f @ ceff)
    cbar = np.sqrt(kappa) * ceff - 1j * f
    cbar_d = dagger(cbar)
    cbar2 = cbar_d @ cbar
    out = -1j * (h_eff @ rho - rho @ h_eff) + (
        cbar @ rho @ cbar_d - 0.5 * (cbar2 @ rho + rho @ cbar2)
    )
    if eta != 1.0:
        f2 = fctx.get("f2")
        if f2 is None:
            f2 = fctx["f2"] = f @ f
        out = out + ((1.0 - eta) / eta) * (f @ rho @ f - 0.5 * (f2 @ rho + rho @ f2))
    return out


def _generalized_ctx(model: OpenSystemModel) -> dict:
    ctx = _ctx(model)
    sub = ctx.get("generalized")
    if sub is None:
        bath = model.bath
        n = bath.n_thermal
        m = complex(bath.squeezing)
        kappa, c, cd = ctx["kappa"], ctx["c"], ctx["cd"]
        # dissipator terms (coeff, a, a_dag, a_dag a)
        terms = [(kappa * (n + 1.0), c, cd, ctx["cdc"])]
        if n != 0.0:
            terms.append((kappa * n, cd, c, c @ cd))
        # double-commutator terms (coeff, a, a^2)
        dterms = []
        if m != 0:
            dterms = [
                (kappa * m / 2.0, cd, cd @ cd),
                (kappa * np.conj(m) / 2.0, c, c @ c),
            ]
        h_eff = ctx["h"]
        if bath.drive != 0:
            h_eff = h_eff + coherent_drive_hamiltonian(c, kappa, bath.drive)
        sub = {
            "terms": terms,
            "dterms": dterms,
            "h_eff": h_eff,
            "h_zero": not np.any(h_eff),
            "n": n,
            "m": m,
        }
        ctx["generalized"] = sub
    return sub


def _generalized_drift(model, rho):
    ctx = _generalized_ctx(model)
    drift = None
    for coeff, a, ad, ada in ctx["terms"]:
        term = coeff * (a @ rho @ ad - 0.5 * (ada @ rho + rho @ ada))
        drift = term if drift is None else drift + term
    for coeff, a, a2 in ctx["dterms"]:
        drift = drift + coeff * (a2 @ rho - 2.0 * (a @ rho @ a) + rho @ a2)
    if not ctx["h_zero"]:
        h = ctx["h_eff"]
        drift = drift + (-1j) * (h @ rho - rho @ h)
    return drift


def generalized_bath_homodyne_step(
    rho: np.ndarray,
    model: OpenSystemModel,
    dt: float,
    dw,
    mode: str = "homodyne",
):
    """Diffusive step for a squeezed thermal bath (unit efficiency).

    Homodyne: the stochastic operator is H[(N + M* + 1) c - (N + M) c^dag]
    scaled by sqrt(kappa)/sqrt(L) with L = 2N + 1 + 2M (real M only; the
    complex-M current normalization is not defined), and the current reads
    dy = sqrt(kappa) <c + c^dag> dt + sqrt(L) dw.

    Heterodyne (thermal bath, M = 0): two channels with scale sqrt(2(N+1)),
    ``dw`` of shape (..., 2); returns dy of the same shape.
    """
    if model.efficiency != 1.0:
        raise ValueError("generalized-bath steppers are derived for unit efficiency")
    ctx = _ctx(model)
    gen = _generalized_ctx(model)
    n, m = gen["n"], gen["m"]
    kappa, c, cd = ctx["kappa"], ctx["c"], ctx["cd"]
    drift = _generalized_drift(model, rho)

    if mode == "homodyne":
        if m.imag != 0.0:
            raise ValueError("homodyne current scale is defined for real squeezing M only")
        sub = gen.get("homodyne")
        if sub is None:
            mr = m.real
            big_l = 2.0 * n + 1.0 + 2.0 * mr
            if big_l <= 0:
                raise ValueError("current variance 2N + 1 + 2M must be positive")
            op = (n + mr + 1.0) * c - (n + mr) * cd
            opd = np.ascontiguousarray(dagger(op))
            sub = {
                "op": op, "opd": opd, "herm": op + opd,
                "scale": np.sqrt(kappa) / np.sqrt(big_l), "root_l": np.sqrt(big_l),
            }
            gen["homodyne"] = sub
        sig_op = _expect(rho, sub["herm"])
        sto = sub["op"] @ rho + rho @ sub["opd"] - _bc(sig_op) * rho
        rho2 = rho + drift * dt + sub["scale"] * sto * _bc(dw)
        dy = np.sqrt(kappa) * _expect(rho, ctx["herm"]) * dt + sub["root_l"] * dw
        return _renorm(rho2), dy

    if mode == "heterodyne":
        if m != 0:
            raise ValueError(
                "generalized heterodyne stepping is defined for thermal baths (M = 0)"
            )
        dw = np.asarray(dw, dtype=float)
        if dw.shape[-1] != 2:
            raise ValueError("heterodyne needs two Wiener increments per step")
        sub = gen.get("heterodyne")
        if sub is None:
            scale = np.sqrt(2.0 * (n + 1.0))
            op1 = (n + 1.0) * c - n * cd
            op2 = (n + 1.0) * (1j * c) - n * (-1j * cd)
            sub = {
                "op1": op1, "op1d": np.ascontiguousarray(dagger(op1)),
                "herm1": op1 + dagger(op1),
                "op2": op2, "op2d": np.ascontiguousarray(dagger(op2)),
                "herm2": op2 + dagger(op2),
                "scale": scale,
                # written sqrt(kappa)/scale; this form reduces bit-exactly to
                # the vacuum heterodyne prefactor sqrt(kappa/2) at N = 0
                "pref": np.sqrt(kappa / (2.0 * (n + 1.0))),
            }
            gen["heterodyne"] = sub
        sig1 = _expect(rho, sub["herm1"])
        sig2 = _expect(rho, sub["herm2"])
        s1 = sub["op1"] @ rho + rho @ sub["op1d"] - _bc(sig1) * rho
        s2 = sub["op2"] @ rho + rho @ sub["op2d"] - _bc(sig2) * rho
        pref = sub["pref"]
        rho2 = rho + drift * dt + pref * (s1 * _bc(dw[..., 0]) + s2 * _bc(dw[..., 1]))
        dy1 = np.sqrt(kappa) * _expect(rho, ctx["herm"]) * dt + sub["scale"] * dw[..., 0]
        dy2 = np.sqrt(kappa) * _expect(rho, ctx["herm_i"]) * dt + sub["scale"] * dw[..., 1]
        return _renorm(rho2), np.stack([dy1, dy2], axis=-1)

    raise ValueError(f"unknown mode {mode!r} (use 'homodyne' or 'heterodyne')")


def squeezed_vacuum_jump_operator(c: np.ndarray, n_thermal: float) -> np.ndarray:
    """Replacement collapse operator mu c - nu c^dag for a squeezed vacuum bath,
    with r = ln(1 + 2N + 2 sqrt(N(N+1)))/2, mu = cosh r, nu = sinh r
    (so mu^2 - nu^2 = 1)."""
    if n_thermal < 0:
        raise ValueError("thermal occupation must be >= 0")
    c = np.asarray(c, dtype=complex)
    r = 0.5 * np.log(1.0 + 2.0 * n_thermal + 2.0 * np.sqrt(n_thermal * (n_thermal + 1.0)))
    return np.cosh(r) * c - np.sinh(r) * dagger(c)
