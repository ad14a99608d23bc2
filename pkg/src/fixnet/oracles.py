"""Independent reference implementations used by tests and gradcheck.

Nothing here calls into :mod:`fixnet.fixpoint`. The finite-difference
oracle perturbs leaves one coordinate at a time and re-evaluates whatever
closure it is given (including closures that re-solve a fixed point from
scratch). The unrolled oracle runs its own damped iteration loop while
recording every step on a tape, then backpropagates through the full
sequence; agreement with the implicit adjoint is what validates the
fixed-point mathematics rather than the shared tape machinery, which the
finite-difference route checks separately.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from . import tensor as tc
from .autodiff import CotangentBundle, Tape
from .tensor import Tensor


@dataclass(frozen=True)
class OracleReport:
    """Outcome of one verification suite."""

    name: str
    max_abs_error: float
    max_rel_error: float
    cases_run: int
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def line(self) -> str:
        status = "pass" if self.ok else "FAIL"
        return (
            f"{self.name}: max_abs={self.max_abs_error:.3e} "
            f"max_rel={self.max_rel_error:.3e} cases={self.cases_run} "
            f"tol={self.tolerance:.1e} [{status}]"
        )


def fd_gradient(
    scalar_fn: Callable[[Mapping[str, Tensor]], float],
    leaves: Mapping[str, Tensor],
    h: float = 1e-5,
) -> CotangentBundle:
    """Central-difference gradient of a scalar closure, leaf by leaf.

    The closure is re-evaluated at every perturbed point, so functions
    that contain a fixed-point solve are re-solved from scratch each time.
    """
    if not h > 0:
        raise ValueError("step h must be positive")
    out: CotangentBundle = {}
    for name, value in leaves.items():
        flat = value.data.reshape(-1)
        grad = np.zeros(flat.shape[0], dtype=np.float64)
        for i in range(flat.shape[0]):
            plus = flat.copy()
            plus[i] += h
            minus = flat.copy()
            minus[i] -= h
            up = {**leaves, name: tc.reshape(Tensor(plus), value.shape)}
            down = {**leaves, name: tc.reshape(Tensor(minus), value.shape)}
            grad[i] = (float(scalar_fn(up)) - float(scalar_fn(down))) / (2.0 * h)
        out[name] = tc.reshape(Tensor(grad), value.shape)
    return out


def unrolled_fix_gradient(
    g,
    x0: Tensor,
    leaves: Mapping[str, Tensor],
    config,
    z_cotangent: Tensor,
) -> CotangentBundle:
    """Backpropagate through an explicitly recorded forward iteration.

    Runs the same damped loop as the forward solver, but on traced values
    so every iteration lands on one big tape, then pulls ``z_cotangent``
    back through the whole sequence. The start state is a constant, so the
    returned bundle covers the named leaves only.
    """
    tape = Tape()
    leaf_vars = {name: tape.leaf(name, value) for name, value in leaves.items()}
    lam = config.damping

    z_prev = x0  # constant; first application promotes the trace
    for t in range(1, config.max_iter + 1):
        proposal = g(z_prev, leaf_vars, None if t == 1 else None)
        if lam == 1.0:
            z = proposal
        else:
            z = ad.add(ad.scale(z_prev, 1.0 - lam), ad.scale(proposal, lam))
        prev_value = z_prev.value if isinstance(z_prev, ad.Var) else z_prev
        residual = tc.norm_inf_diff(z.value, prev_value)
        z_prev = z
        if residual <= config.tolerance:
            break

    _, pull = ad.make_pullback(tape, z_prev)
    return pull(z_cotangent)


def jacobian_norm_estimate(
    g,
    z: Tensor,
    leaves: Mapping[str, Tensor],
    iters: int = 20,
    seed: int = 0,
) -> float:
    """Power-iteration estimate of the dominant singular value of dg/dz.

    Alternates a forward (tangent) and a reverse (cotangent) application
    of the state Jacobian at z, i.e. power iteration on J^T J.
    """
    if iters < 10:
        raise ValueError("iters must be at least 10")

    def state_jvp(v: Tensor) -> Tensor:
        duals = {k: ad.DualTensor(val, Tensor.zeros(val.shape)) for k, val in leaves.items()}
        return g(ad.DualTensor(z, v), duals, None).tangent

    tape = Tape()
    z_var = tape.leaf("__state__", z)
    leaf_vars = {k: tape.leaf(k, val) for k, val in leaves.items()}
    _, pull = ad.make_pullback(tape, g(z_var, leaf_vars, None))

    def state_vjp(w: Tensor) -> Tensor:
        return pull(w)["__state__"]

    rng = tc.Rng(seed)
    v = rng.normal(z.shape)
    norm = float(np.linalg.norm(v.data))
    if norm == 0.0:
        return 0.0
    v = tc.scale(v, 1.0 / norm)
    sigma = 0.0
    for _ in range(iters):
        jv = state_jvp(v)
        w = state_vjp(jv)
        wnorm = float(np.linalg.norm(w.data))
        sigma = float(np.linalg.norm(jv.data))
        if wnorm == 0.0:
            return 0.0
        v = tc.scale(w, 1.0 / wnorm)
    return sigma


def bundle_errors(
    got: Mapping[str, Tensor],
    want: Mapping[str, Tensor],
    rel_floor: float = 1e-12,
) -> tuple[float, float]:
    """Max absolute and max relative discrepancy across two bundles."""
    max_abs = 0.0
    max_rel = 0.0
    for name in want:
        a = got[name].data
        b = want[name].data
        diff = np.abs(a - b)
        denom = np.maximum(np.abs(b), rel_floor)
        max_abs = max(max_abs, float(diff.max(initial=0.0)))
        max_rel = max(max_rel, float((diff / denom).max(initial=0.0)))
    return max_abs, max_rel
