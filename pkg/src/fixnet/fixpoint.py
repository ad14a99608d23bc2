"""The iterate-to-fixed-point operator and its derivative transforms.

``fix_forward`` runs the damped iteration z <- (1-lambda) z + lambda g(z)
until consecutive iterates agree to within the tolerance. Its derivative
is not obtained by unrolling: ``fix_tangent`` solves the tangent equation
u = (dg/dz) u + (dg/dx) xdot by the same damped iteration, and
``fix_adjoint`` solves the corresponding adjoint equation

    u = (dg/dz)^T (u + zbar)

by repeatedly replaying one retained pullback of g at the settled state.
The converged adjoint state yields every leaf cotangent through a final
pullback call, which equals (dg/dleaf)^T (I - dg/dz^T)^{-1} zbar.

Maps follow the protocol ``g(z, leaves, aux) -> z`` where ``leaves`` is a
named dict of tensors (weights plus any persistent input) and ``aux`` is
an optional opaque payload that is None on the first iteration. The
derivative transforms linearize g with aux=None, so maps that want exact
gradients must not change behaviour with aux.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

from . import autodiff as ad
from . import tensor as tc
from .autodiff import CotangentBundle, DualTensor, Tape
from .errors import Diverged, ShapeMismatch
from .tensor import Tensor

# Residuals past this level while still growing are treated as blow-up.
_DIVERGENCE_LEVEL = 1e6

# Reserved leaf names used when tracing a map's state argument.
_STATE_LEAF = "__state__"
_INPUT_LEAF = "x"

FixMap = Callable[..., object]  # g(z, leaves, aux) -> z


@dataclass(frozen=True)
class FixConfig:
    """Solver tolerances and budgets for one fix invocation."""

    tolerance: float = 1e-3
    max_iter: int = 300
    damping: float = 1.0
    divergence_patience: int = 10

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must lie in (0, 1]")
        if self.divergence_patience < 1:
            raise ValueError("divergence_patience must be at least 1")


@dataclass(frozen=True)
class FixResult:
    """Converged (or last) iterate plus full convergence diagnostics."""

    z: Tensor
    iterations: int
    final_residual: float
    converged: bool
    residual_history: list[float] = field(default_factory=list)


@dataclass(frozen=True)
class AdjointFixResult:
    """Leaf cotangents from the adjoint solve, with its own diagnostics.

    ``approximate`` is set when either the forward or the adjoint loop hit
    its budget without converging; the gradient is then a truncated series
    rather than the exact implicit one.
    """

    leaf_cotangents: CotangentBundle
    adjoint_iterations: int
    adjoint_converged: bool
    approximate: bool = False


def _damped(prev: Tensor, proposal: Tensor, lam: float) -> Tensor:
    if lam == 1.0:
        return proposal
    return tc.add(tc.scale(prev, 1.0 - lam), tc.scale(proposal, lam))


class _DivergenceWatch:
    """Tracks consecutive residual increases; raises once clearly blown up."""

    def __init__(self, patience: int, what: str):
        self.patience = patience
        self.what = what
        self.prev = None
        self.run = 0

    def check(self, residual: float):
        if self.prev is not None and residual > self.prev:
            self.run += 1
        else:
            self.run = 0
        self.prev = residual
        if self.run >= self.patience and residual > _DIVERGENCE_LEVEL:
            raise Diverged(
                f"{self.what} residual grew for {self.run} consecutive steps "
                f"(now {residual:.3e})"
            )


def fix_forward(
    g: FixMap,
    x0: Tensor,
    leaves: Mapping[str, Tensor],
    config: FixConfig,
    aux=None,
) -> FixResult:
    """Iterate g from x0 until consecutive iterates agree within tolerance.

    The first application receives aux=None; later ones receive the given
    aux payload. Hitting max_iter is a normal exit (converged=False), not
    an error; only a clear blow-up raises :class:`Diverged`.
    """
    z_prev = x0
    history: list[float] = []
    watch = _DivergenceWatch(config.divergence_patience, "forward")
    for t in range(1, config.max_iter + 1):
        proposal = g(z_prev, dict(leaves), None if t == 1 else aux)
        if not isinstance(proposal, Tensor):
            raise TypeError("fix map must return a Tensor in plain evaluation")
        if proposal.shape != z_prev.shape:
            raise ShapeMismatch(
                f"map changed state shape {z_prev.shape} -> {proposal.shape}"
            )
        z = _damped(z_prev, proposal, config.damping)
        residual = tc.norm_inf_diff(z, z_prev)
        history.append(residual)
        if residual <= config.tolerance:
            return FixResult(z, t, residual, True, history)
        watch.check(residual)
        z_prev = z
    return FixResult(z_prev, config.max_iter, history[-1], False, history)


def fix_tangent(
    g: FixMap,
    z: Tensor,
    x_tangent,
    leaves: Mapping[str, Tensor],
    config: FixConfig,
) -> Tensor:
    """Directional derivative of the fixed point along input tangents.

    ``x_tangent`` is either a tangent tensor for the leaf named ``"x"`` or
    a dict of tangents keyed by leaf name. Solves the linear tangent
    fixed-point equation by damped iteration from u = 0 and returns
    Tz = dz*/dleaves . tangents. Expects z to be a settled state.
    """
    if isinstance(x_tangent, Tensor):
        tangents = {_INPUT_LEAF: x_tangent}
    else:
        tangents = dict(x_tangent)
    for name, t in tangents.items():
        if name not in leaves:
            raise KeyError(f"tangent for unknown leaf {name!r}")
        if t.shape != leaves[name].shape:
            raise ShapeMismatch(f"tangent shape for {name!r} does not match leaf")

    dual_leaves = {
        name: DualTensor(value, tangents.get(name, Tensor.zeros(value.shape)))
        for name, value in leaves.items()
    }
    u = Tensor.zeros(z.shape)
    watch = _DivergenceWatch(config.divergence_patience, "tangent")
    for _ in range(config.max_iter):
        out = g(DualTensor(z, u), dual_leaves, None)
        if not isinstance(out, DualTensor):
            raise TypeError("fix map must propagate dual operands")
        u_next = _damped(u, out.tangent, config.damping)
        residual = tc.norm_inf_diff(u_next, u)
        if residual <= config.tolerance:
            return u_next
        watch.check(residual)
        u = u_next
    return u


def fix_adjoint(
    g: FixMap,
    z: Tensor,
    z_cotangent: Tensor,
    leaves: Mapping[str, Tensor],
    config: FixConfig,
    forward_converged: bool = True,
) -> AdjointFixResult:
    """Implicit adjoint of the fixed point for an output cotangent.

    Builds one pullback of g at (z, leaves), iterates the state-cotangent
    component of pullback(u + zbar) to its own fixed point, then reads all
    leaf cotangents from a final pullback call.
    """
    if z_cotangent.shape != z.shape:
        raise ShapeMismatch(
            f"state cotangent shape {z_cotangent.shape} != state shape {z.shape}"
        )
    if _STATE_LEAF in leaves:
        raise ValueError(f"leaf name {_STATE_LEAF!r} is reserved")

    tape = Tape()
    z_var = tape.leaf(_STATE_LEAF, z)
    leaf_vars = {name: tape.leaf(name, value) for name, value in leaves.items()}
    out = g(z_var, leaf_vars, None)
    out_value, pull = ad.make_pullback(tape, out)
    if out_value.shape != z.shape:
        raise ShapeMismatch("map changed state shape under tracing")

    u = Tensor.zeros(z.shape)
    iterations = 0
    converged = False
    watch = _DivergenceWatch(config.divergence_patience, "adjoint")
    for _ in range(config.max_iter):
        iterations += 1
        state_cot = pull(tc.add(u, z_cotangent))[_STATE_LEAF]
        u_next = _damped(u, state_cot, config.damping)
        residual = tc.norm_inf_diff(u_next, u)
        u = u_next
        if residual <= config.tolerance:
            converged = True
            break
        watch.check(residual)

    bundle = pull(tc.add(u, z_cotangent))
    bundle.pop(_STATE_LEAF)
    return AdjointFixResult(
        leaf_cotangents=bundle,
        adjoint_iterations=iterations,
        adjoint_converged=converged,
        approximate=not (converged and forward_converged),
    )


def fix_block(
    g: FixMap,
    x: Tensor,
    params: Mapping[str, Tensor],
    config: FixConfig,
    x0: Tensor | None = None,
) -> tuple[FixResult, Callable[[Tensor], AdjointFixResult]]:
    """Forward solve plus a retained pullback: one equilibrium block.

    The input joins the parameter leaves under the name ``"x"``, so the
    returned pullback produces input and weight cotangents side by side.
    ``x0`` defaults to zeros shaped like x; pass it explicitly when the
    state shape differs from the input shape.
    """
    if _INPUT_LEAF in params:
        raise ValueError(f"leaf name {_INPUT_LEAF!r} is reserved for the input")
    leaves = dict(params)
    leaves[_INPUT_LEAF] = x
    start = x0 if x0 is not None else Tensor.zeros(x.shape)
    result = fix_forward(g, start, leaves, config)

    def pullback(z_cotangent: Tensor) -> AdjointFixResult:
        return fix_adjoint(
            g, result.z, z_cotangent, leaves, config,
            forward_converged=result.converged,
        )

    return result, pullback
