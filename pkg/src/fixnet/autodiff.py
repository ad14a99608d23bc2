"""Forward- and reverse-mode automatic differentiation over tensor kernels.

Reverse mode is tape based. Tracing a function records one node per
primitive application together with the primal values needed for its
vector-Jacobian product. The resulting pullback closes over the retained
tape and can be replayed any number of times against different output
cotangents without re-tracing; the equilibrium adjoint loop depends on
this re-entrancy because it calls the same pullback once per iteration.

Forward mode propagates :class:`DualTensor` values (primal plus tangent)
through the same primitive registry in a single pass, with no tape.

The functions exported here (``matmul``, ``add``, ``tanh``, ...) dispatch
on operand type: plain tensors evaluate eagerly, traced variables append
to their tape, and dual tensors propagate tangents. Model code written
against these functions therefore works unchanged in all three modes.
Cotangents of fan-out nodes accumulate by summation.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, NamedTuple

import numpy as np

from . import tensor as tc
from .errors import NotScalarOutput, ShapeMismatch, UnregisteredPrimitive
from .tensor import Scalar, Tensor

# Named map from leaf identifier to its cotangent tensor.
CotangentBundle = dict[str, Tensor]


@dataclass(frozen=True)
class DualTensor:
    """A primal value paired with a tangent of the same shape."""

    primal: Tensor
    tangent: Tensor

    def __post_init__(self):
        if self.primal.shape != self.tangent.shape:
            raise ShapeMismatch(
                f"dual tangent shape {self.tangent.shape} != primal {self.primal.shape}"
            )

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other) if not _is_number(other) else scale(self, other)

    def __rmul__(self, other):
        return scale(self, other) if _is_number(other) else mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Var:
    """A traced value: a node index on a tape."""

    __slots__ = ("tape", "id")

    def __init__(self, tape: "Tape", node_id: int):
        self.tape = tape
        self.id = node_id

    @property
    def value(self) -> Tensor:
        return self.tape.values[self.id]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other) if not _is_number(other) else scale(self, other)

    def __rmul__(self, other):
        return scale(self, other) if _is_number(other) else mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Record(NamedTuple):
    op: str
    operands: tuple  # per operand: ("n", node_id) or ("c", Tensor | float)
    aux: tuple       # sorted (key, value) pairs of non-differentiable arguments
    out_id: int


class Tape:
    """Topologically ordered trace of primitive applications.

    Leaves are registered by name before tracing; every record's operands
    refer to earlier nodes or to constants, so a single reverse sweep
    visits producers after consumers. Once tracing is done the tape is
    read-only and safe to share across threads.
    """

    __slots__ = ("values", "records", "leaf_ids")

    def __init__(self):
        self.values: list[Tensor] = []
        self.records: list[_Record] = []
        self.leaf_ids: dict[str, int] = {}

    def leaf(self, name: str, value: Tensor) -> Var:
        if name in self.leaf_ids:
            raise ValueError(f"duplicate leaf name {name!r}")
        if not isinstance(value, Tensor):
            raise TypeError(f"leaf {name!r} must be a Tensor")
        node_id = len(self.values)
        self.values.append(value)
        self.leaf_ids[name] = node_id
        return Var(self, node_id)

    def _emit(self, op: str, operands: tuple, aux: tuple, out: Tensor) -> Var:
        out_id = len(self.values)
        self.values.append(out)
        self.records.append(_Record(op, operands, aux, out_id))
        return Var(self, out_id)


class _OpRule(NamedTuple):
    forward: Callable
    jvp: Callable | None
    vjp: Callable | None


_REGISTRY: dict[str, _OpRule] = {}


def _register(name: str, forward, jvp, vjp):
    _REGISTRY[name] = _OpRule(forward, jvp, vjp)


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _primal_of(operand) -> Tensor | float:
    if isinstance(operand, Var):
        return operand.value
    if isinstance(operand, DualTensor):
        return operand.primal
    if isinstance(operand, Tensor):
        return operand
    if _is_number(operand):
        return float(operand)
    raise TypeError(f"unsupported operand type {type(operand).__name__}")


def shape_of(operand) -> tuple[int, ...]:
    p = _primal_of(operand)
    return p.shape if isinstance(p, Tensor) else ()


def _zeros_like_primal(p: Tensor | float) -> Tensor:
    return Tensor.zeros(p.shape) if isinstance(p, Tensor) else Tensor.zeros(())


def _reduce_to(cot: Tensor, operand_primal: Tensor | float) -> Tensor:
    """Collapse a cotangent onto a scalar operand's shape by summation."""
    target = operand_primal.shape if isinstance(operand_primal, Tensor) else ()
    if cot.shape == target:
        return cot
    if target == ():
        return tc.sum_all(cot)
    if cot.shape == ():  # scalar output fanned out over a tensor operand
        return Tensor.full(target, cot.item())
    raise ShapeMismatch(f"cannot reduce cotangent {cot.shape} to {target}")


def apply_primitive(name: str, *operands, **aux):
    """Apply a registered primitive to tensor, traced, or dual operands."""
    rule = _REGISTRY.get(name)
    if rule is None:
        raise UnregisteredPrimitive(f"no primitive registered under {name!r}")
    primals = [_primal_of(op) for op in operands]
    aux_items = tuple(sorted(aux.items()))

    tapes = {op.tape for op in operands if isinstance(op, Var)}
    duals = [op for op in operands if isinstance(op, DualTensor)]
    if tapes:
        if duals:
            raise TypeError("cannot mix traced and dual operands")
        if len(tapes) > 1:
            raise ValueError("operands belong to different tapes")
        tape = tapes.pop()
        out = rule.forward(*primals, **aux)
        descs = tuple(
            ("n", op.id) if isinstance(op, Var) else ("c", _primal_of(op))
            for op in operands
        )
        return tape._emit(name, descs, aux_items, out)
    if duals:
        if rule.jvp is None:
            raise UnregisteredPrimitive(f"primitive {name!r} has no tangent rule")
        out = rule.forward(*primals, **aux)
        tangents = [
            op.tangent if isinstance(op, DualTensor) else None for op in operands
        ]
        return DualTensor(out, rule.jvp(tangents, primals, out, dict(aux_items)))
    return rule.forward(*primals, **aux)


# Exported primitive surface. Same names as the tensor kernels, but these
# accept Var and DualTensor operands too.

def matmul(a, b):
    return apply_primitive("matmul", a, b)


def add(a, b):
    return apply_primitive("add", a, b)


def sub(a, b):
    return apply_primitive("sub", a, b)


def mul(a, b):
    return apply_primitive("mul", a, b)


def scale(a, factor: float):
    return apply_primitive("scale", a, factor=float(factor))


def tanh(a):
    return apply_primitive("tanh", a)


def sigmoid(a):
    return apply_primitive("sigmoid", a)


def square(a):
    return apply_primitive("square", a)


def sum(a):  # noqa: A001 - mirrors the registry name, like numpy.sum
    return apply_primitive("sum", a)


def mean(a):
    return apply_primitive("mean", a)


def reshape(a, shape):
    return apply_primitive("reshape", a, shape=tuple(int(s) for s in shape))


# Rule definitions. jvp(tangents, primals, out, aux) -> tangent tensor;
# vjp(ybar, primals, out, aux) -> one cotangent (or None) per operand.

def _tan(t, p):
    return t if t is not None else _zeros_like_primal(p)


def _jvp_matmul(tans, vals, out, aux):
    a, b = vals
    da, db = _tan(tans[0], a), _tan(tans[1], b)
    return tc.add(tc.matmul(da, b), tc.matmul(a, db))


def _vjp_matmul(ybar, vals, out, aux):
    a, b = vals
    return (
        tc.Tensor._wrap(ybar.data @ b.data.T),
        tc.Tensor._wrap(a.data.T @ ybar.data),
    )


def _jvp_add(tans, vals, out, aux):
    return tc.add(_tan(tans[0], vals[0]), _tan(tans[1], vals[1]))


def _vjp_add(ybar, vals, out, aux):
    return (_reduce_to(ybar, vals[0]), _reduce_to(ybar, vals[1]))


def _jvp_sub(tans, vals, out, aux):
    return tc.sub(_tan(tans[0], vals[0]), _tan(tans[1], vals[1]))


def _vjp_sub(ybar, vals, out, aux):
    return (_reduce_to(ybar, vals[0]), _reduce_to(tc.scale(ybar, -1.0), vals[1]))


def _jvp_mul(tans, vals, out, aux):
    a, b = vals
    return tc.add(tc.mul(_tan(tans[0], a), b), tc.mul(a, _tan(tans[1], b)))


def _vjp_mul(ybar, vals, out, aux):
    a, b = vals
    return (_reduce_to(tc.mul(ybar, b), a), _reduce_to(tc.mul(ybar, a), b))


def _jvp_scale(tans, vals, out, aux):
    return tc.scale(_tan(tans[0], vals[0]), aux["factor"])


def _vjp_scale(ybar, vals, out, aux):
    return (tc.scale(ybar, aux["factor"]),)


def _jvp_tanh(tans, vals, out, aux):
    return tc.mul(_tan(tans[0], vals[0]), tc.sub(1.0, tc.square(out)))


def _vjp_tanh(ybar, vals, out, aux):
    return (tc.mul(ybar, tc.sub(1.0, tc.square(out))),)


def _jvp_sigmoid(tans, vals, out, aux):
    return tc.mul(_tan(tans[0], vals[0]), tc.mul(out, tc.sub(1.0, out)))


def _vjp_sigmoid(ybar, vals, out, aux):
    return (tc.mul(ybar, tc.mul(out, tc.sub(1.0, out))),)


def _jvp_square(tans, vals, out, aux):
    return tc.mul(_tan(tans[0], vals[0]), tc.scale(vals[0], 2.0))


def _vjp_square(ybar, vals, out, aux):
    return (tc.mul(ybar, tc.scale(vals[0], 2.0)),)


def _jvp_sum(tans, vals, out, aux):
    return tc.sum_all(_tan(tans[0], vals[0]))


def _vjp_sum(ybar, vals, out, aux):
    return (Tensor.full(vals[0].shape, ybar.item()),)


def _jvp_mean(tans, vals, out, aux):
    return tc.mean_all(_tan(tans[0], vals[0]))


def _vjp_mean(ybar, vals, out, aux):
    return (Tensor.full(vals[0].shape, ybar.item() / vals[0].size),)


def _jvp_reshape(tans, vals, out, aux):
    return tc.reshape(_tan(tans[0], vals[0]), aux["shape"])


def _vjp_reshape(ybar, vals, out, aux):
    return (tc.reshape(ybar, vals[0].shape),)


_register("matmul", tc.matmul, _jvp_matmul, _vjp_matmul)
_register("add", tc.add, _jvp_add, _vjp_add)
_register("sub", tc.sub, _jvp_sub, _vjp_sub)
_register("mul", tc.mul, _jvp_mul, _vjp_mul)
_register("scale", tc.scale, _jvp_scale, _vjp_scale)
_register("tanh", tc.tanh, _jvp_tanh, _vjp_tanh)
_register("sigmoid", tc.sigmoid, _jvp_sigmoid, _vjp_sigmoid)
_register("square", tc.square, _jvp_square, _vjp_square)
_register("sum", tc.sum_all, _jvp_sum, _vjp_sum)
_register("mean", tc.mean_all, _jvp_mean, _vjp_mean)
_register("reshape", tc.reshape, _jvp_reshape, _vjp_reshape)


def make_pullback(tape: Tape, output) -> tuple[Tensor, Callable[[Tensor], CotangentBundle]]:
    """Build a re-entrant pullback for a traced output.

    Returns the primal output and a closure mapping an output cotangent to
    a bundle keyed by the tape's leaf names. Leaves the output does not
    depend on receive exact zeros. The closure never mutates the tape.
    """
    if isinstance(output, Var):
        if output.tape is not tape:
            raise ValueError("output was traced on a different tape")
        out_value, out_id = output.value, output.id
    elif isinstance(output, Tensor):  # constant function of the leaves
        out_value, out_id = output, None
    else:
        raise TypeError("traced function must return a Var or Tensor")

    def pullback(ybar: Tensor) -> CotangentBundle:
        if not isinstance(ybar, Tensor):
            raise TypeError("output cotangent must be a Tensor")
        if ybar.shape != out_value.shape:
            raise ShapeMismatch(
                f"cotangent shape {ybar.shape} != output shape {out_value.shape}"
            )
        cots: dict[int, Tensor] = {}
        if out_id is not None:
            cots[out_id] = ybar
        for rec in reversed(tape.records):
            out_cot = cots.get(rec.out_id)
            if out_cot is None:
                continue
            rule = _REGISTRY[rec.op]
            primals = [
                tape.values[ref] if kind == "n" else ref
                for kind, ref in rec.operands
            ]
            contribs = rule.vjp(out_cot, primals, tape.values[rec.out_id], dict(rec.aux))
            for (kind, ref), contrib in zip(rec.operands, contribs):
                if kind != "n" or contrib is None:
                    continue
                prev = cots.get(ref)
                cots[ref] = contrib if prev is None else tc.add(prev, contrib)
        return {
            name: cots.get(nid, Tensor.zeros(tape.values[nid].shape))
            for name, nid in tape.leaf_ids.items()
        }

    return out_value, pullback


def vjp(f: Callable, leaves: Mapping[str, Tensor]):
    """Trace ``f(**leaves)`` and return its output with a pullback.

    The pullback maps an output cotangent to a :data:`CotangentBundle`
    over every leaf and may be invoked repeatedly.
    """
    tape = Tape()
    vars_ = {name: tape.leaf(name, value) for name, value in leaves.items()}
    output = f(**vars_)
    return make_pullback(tape, output)


def grad(scalar_f: Callable, leaves: Mapping[str, Tensor]) -> CotangentBundle:
    """Gradient of a single-element-output function at the given leaves."""
    out, pull = vjp(scalar_f, leaves)
    if out.size != 1:
        raise NotScalarOutput(f"output has {out.size} elements, expected 1")
    return pull(Tensor.ones(out.shape))


def jvp(f: Callable, x: Tensor, v: Tensor) -> DualTensor:
    """Single-input forward mode: returns (f(x), df/dx . v)."""
    if x.shape != v.shape:
        raise ShapeMismatch(f"tangent shape {v.shape} != input shape {x.shape}")
    out = f(DualTensor(x, v))
    if isinstance(out, DualTensor):
        return out
    if isinstance(out, Tensor):  # constant function
        return DualTensor(out, Tensor.zeros(out.shape))
    raise TypeError("function must return a DualTensor or Tensor")


def jvp_leaves(
    f: Callable,
    leaves: Mapping[str, Tensor],
    tangents: Mapping[str, Tensor],
) -> DualTensor:
    """Forward mode over named leaves; missing tangents default to zero."""
    for name in tangents:
        if name not in leaves:
            raise KeyError(f"tangent for unknown leaf {name!r}")
    duals = {
        name: DualTensor(value, tangents.get(name, Tensor.zeros(value.shape)))
        for name, value in leaves.items()
    }
    out = f(**duals)
    if isinstance(out, DualTensor):
        return out
    if isinstance(out, Tensor):
        return DualTensor(out, Tensor.zeros(out.shape))
    raise TypeError("function must return a DualTensor or Tensor")
