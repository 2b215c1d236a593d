"""Dense float64 tensor ops with a reverse-mode differentiation tape.

Every forward op records one node onto a Tape; `backward` walks the tape
in reverse and accumulates adjoints. Gradient rules are hand-written per
op and validated against central finite differences in the test suite.
All values are float64; any NaN/Inf produced by an op raises NonFiniteError.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NonFiniteError(ArithmeticError):
    """A kernel op produced a NaN or Inf entry."""


def astensor(data) -> np.ndarray:
    """Coerce to a float64 array and reject non-finite entries."""
    arr = np.asarray(data, dtype=np.float64)
    _check_finite(arr, "input")
    return arr


def _check_finite(arr: np.ndarray, opname: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{opname} produced a non-finite value")


class Node:
    """One value on a Tape. Leaves hold inputs; interior nodes hold op outputs."""

    __slots__ = ("tape", "index", "value", "requires_grad", "_parents", "_backward")

    def __init__(self, tape, index, value, requires_grad, parents, backward_fn):
        self.tape = tape
        self.index = index
        self.value = value
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward_fn

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return hadamard(self, other)

    def __repr__(self):
        return f"Node(#{self.index}, shape={self.value.shape})"


class Tape:
    """Topologically ordered record of forward ops.

    Nodes are appended at creation time, so every parent index precedes its
    consumers by construction. `relu_margin` tracks the smallest |x| seen at
    any relu input on this tape; the gradient checker uses it to detect
    evaluations too close to the kink.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.relu_margin: float = np.inf

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, requires_grad: bool = True) -> Node:
        return self._record(astensor(value), (), None, requires_grad=requires_grad)

    def constant(self, value) -> Node:
        return self.leaf(value, requires_grad=False)

    def _record(self, value, parents, backward_fn, requires_grad=None) -> Node:
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        node = Node(self, len(self.nodes), value, requires_grad, parents, backward_fn)
        self.nodes.append(node)
        return node


def _same_tape(*nodes) -> Tape:
    tape = nodes[0].tape
    if any(n.tape is not tape for n in nodes):
        raise ValueError("ops cannot mix nodes from different tapes")
    return tape


# ---------------------------------------------------------------------------
# elementwise ops

def add(a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise ValueError(f"add shape mismatch: {a.value.shape} vs {b.value.shape}")
    tape = _same_tape(a, b)
    out = a.value + b.value
    _check_finite(out, "add")

    def backward(g):
        return ((a, g), (b, g))

    return tape._record(out, (a, b), backward)


def sub(a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise ValueError(f"sub shape mismatch: {a.value.shape} vs {b.value.shape}")
    tape = _same_tape(a, b)
    out = a.value - b.value
    _check_finite(out, "sub")

    def backward(g):
        return ((a, g), (b, -g))

    return tape._record(out, (a, b), backward)


def scale(a: Node, c: float) -> Node:
    c = float(c)
    out = a.value * c
    _check_finite(out, "scale")

    def backward(g):
        return ((a, g * c),)

    return a.tape._record(out, (a,), backward)


def hadamard(a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise ValueError(f"hadamard shape mismatch: {a.value.shape} vs {b.value.shape}")
    tape = _same_tape(a, b)
    out = a.value * b.value
    _check_finite(out, "hadamard")

    def backward(g):
        return ((a, g * b.value), (b, g * a.value))

    return tape._record(out, (a, b), backward)


def relu(a: Node) -> Node:
    tape = a.tape
    margin = float(np.min(np.abs(a.value))) if a.value.size else np.inf
    if margin < tape.relu_margin:
        tape.relu_margin = margin
    out = np.maximum(a.value, 0.0)

    # subgradient at 0 taken as 0
    def backward(g):
        return ((a, g * (a.value > 0.0)),)

    return tape._record(out, (a,), backward)


def sigmoid(a: Node) -> Node:
    out = 1.0 / (1.0 + np.exp(-a.value))
    _check_finite(out, "sigmoid")

    def backward(g):
        return ((a, g * out * (1.0 - out)),)

    return a.tape._record(out, (a,), backward)


def tanh(a: Node) -> Node:
    out = np.tanh(a.value)

    def backward(g):
        return ((a, g * (1.0 - out * out)),)

    return a.tape._record(out, (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if a.value.shape[1] != b.value.shape[0]:
        raise ValueError(f"matmul inner dims disagree: {a.value.shape} x {b.value.shape}")
    tape = _same_tape(a, b)
    out = a.value @ b.value
    _check_finite(out, "matmul")

    def backward(g):
        return ((a, g @ b.value.T), (b, a.value.T @ g))

    return tape._record(out, (a, b), backward)


def matvec(m: Node, v: Node) -> Node:
    if m.value.ndim != 2 or v.value.ndim != 1 or m.value.shape[1] != v.value.shape[0]:
        raise ValueError(f"matvec shape mismatch: {m.value.shape} x {v.value.shape}")
    tape = _same_tape(m, v)
    out = m.value @ v.value
    _check_finite(out, "matvec")

    def backward(g):
        return ((m, np.outer(g, v.value)), (v, m.value.T @ g))

    return tape._record(out, (m, v), backward)


def vecmat(v: Node, m: Node) -> Node:
    if v.value.ndim != 1 or m.value.ndim != 2 or v.value.shape[0] != m.value.shape[0]:
        raise ValueError(f"vecmat shape mismatch: {v.value.shape} x {m.value.shape}")
    tape = _same_tape(v, m)
    out = v.value @ m.value
    _check_finite(out, "vecmat")

    def backward(g):
        return ((v, m.value @ g), (m, np.outer(v.value, g)))

    return tape._record(out, (v, m), backward)


def transpose(a: Node) -> Node:
    if a.value.ndim != 2:
        raise ValueError("transpose expects a 2-D operand")

    def backward(g):
        return ((a, g.T),)

    return a.tape._record(a.value.T.copy(), (a,), backward)


def weighted_sum(weights: Node, vectors: Node) -> Node:
    """Sum of the rows of `vectors` weighted by `weights`: sum_j w[j] * vectors[j, :]."""
    if weights.value.ndim != 1 or vectors.value.ndim != 2:
        raise ValueError("weighted_sum expects a vector and a matrix")
    if weights.value.shape[0] != vectors.value.shape[0]:
        raise ValueError(
            f"weighted_sum length mismatch: {weights.value.shape} vs {vectors.value.shape}"
        )
    tape = _same_tape(weights, vectors)
    out = vectors.value.T @ weights.value
    _check_finite(out, "weighted_sum")

    def backward(g):
        return ((weights, vectors.value @ g), (vectors, np.outer(weights.value, g)))

    return tape._record(out, (weights, vectors), backward)


def conv1d(x: Node, filters: Node, bias: Node) -> Node:
    """Same-length 1-D convolution over the column axis.

    x: D x T, filters: K x D x w (w odd), bias: K. Output C is K x T with
    C[j, t] = bias[j] + sum_{d,o} filters[j, d, o] * padded(x)[d, t + o],
    where padded(x) has (w-1)/2 zero columns on each side.
    """
    if x.value.ndim != 2 or filters.value.ndim != 3 or bias.value.ndim != 1:
        raise ValueError("conv1d expects x: DxT, filters: KxDxw, bias: K")
    K, D, w = filters.value.shape
    if w % 2 == 0:
        raise ValueError(f"conv1d window must be odd, got {w}")
    if x.value.shape[0] != D or bias.value.shape[0] != K:
        raise ValueError(
            f"conv1d shape mismatch: x {x.value.shape}, filters {filters.value.shape}, "
            f"bias {bias.value.shape}"
        )
    tape = _same_tape(x, filters, bias)
    T = x.value.shape[1]
    pad = (w - 1) // 2

    xp = np.zeros((D, T + w - 1))
    xp[:, pad:pad + T] = x.value
    # cols[o*D + d, t] = xp[d, t + o]
    cols = np.empty((w * D, T))
    for o in range(w):
        cols[o * D:(o + 1) * D, :] = xp[:, o:o + T]
    fmat = filters.value.transpose(0, 2, 1).reshape(K, w * D)  # [j, o*D + d]
    out = fmat @ cols + bias.value[:, None]
    _check_finite(out, "conv1d")

    def backward(g):
        dbias = g.sum(axis=1)
        dfmat = g @ cols.T
        dfilters = dfmat.reshape(K, w, D).transpose(0, 2, 1)
        dcols = fmat.T @ g
        dxp = np.zeros_like(xp)
        for o in range(w):
            dxp[:, o:o + T] += dcols[o * D:(o + 1) * D, :]
        return ((x, dxp[:, pad:pad + T]), (filters, dfilters), (bias, dbias))

    return tape._record(out, (x, filters, bias), backward)


# ---------------------------------------------------------------------------
# reductions, reshaping, gathering

def softmax(v: Node) -> Node:
    if v.value.ndim != 1 or v.value.shape[0] < 1:
        raise ValueError("softmax expects a non-empty vector")
    shifted = v.value - np.max(v.value)
    e = np.exp(shifted)
    out = e / e.sum()

    def backward(g):
        return ((v, out * (g - np.dot(g, out))),)

    return v.tape._record(out, (v,), backward)


def concat(a: Node, b: Node) -> Node:
    if a.value.ndim != 1 or b.value.ndim != 1:
        raise ValueError("concat expects vectors")
    tape = _same_tape(a, b)
    p = a.value.shape[0]
    out = np.concatenate([a.value, b.value])

    def backward(g):
        return ((a, g[:p]), (b, g[p:]))

    return tape._record(out, (a, b), backward)


def sum_all(a: Node) -> Node:
    out = np.asarray(a.value.sum())
    _check_finite(out, "sum_all")

    def backward(g):
        return ((a, np.broadcast_to(g, a.value.shape)),)

    return a.tape._record(out, (a,), backward)


def stack_rows(rows: list[Node]) -> Node:
    """Stack equal-length vectors into a matrix, one per row."""
    if not rows:
        raise ValueError("stack_rows needs at least one row")
    tape = _same_tape(*rows)
    out = np.stack([r.value for r in rows])
    if out.ndim != 2:
        raise ValueError("stack_rows expects 1-D inputs")

    def backward(g):
        return tuple((r, g[j]) for j, r in enumerate(rows))

    return tape._record(out, tuple(rows), backward)


def stack_scalars(items: list[Node]) -> Node:
    if not items:
        raise ValueError("stack_scalars needs at least one item")
    tape = _same_tape(*items)
    out = np.array([float(s.value) for s in items])

    def backward(g):
        return tuple((s, np.asarray(g[j])) for j, s in enumerate(items))

    return tape._record(out, tuple(items), backward)


def embed(table: Node, indices) -> Node:
    """Gather rows of `table` by index, laid out as columns of a D x T matrix."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError("embed expects a flat index sequence")
    V = table.value.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= V):
        raise IndexError(f"embed index out of range [0, {V})")
    out = table.value[idx].T.copy()

    def backward(g):
        dtable = np.zeros_like(table.value)
        np.add.at(dtable, idx, g.T)
        return ((table, dtable),)

    return table.tape._record(out, (table,), backward)


def take_row(m: Node, i: int) -> Node:
    if m.value.ndim != 2:
        raise ValueError("take_row expects a matrix")
    i = int(i)
    out = m.value[i].copy()

    def backward(g):
        dm = np.zeros_like(m.value)
        dm[i] = g
        return ((m, dm),)

    return m.tape._record(out, (m,), backward)


def take_at(v: Node, i: int) -> Node:
    if v.value.ndim != 1:
        raise ValueError("take_at expects a vector")
    i = int(i)
    out = np.asarray(v.value[i])

    def backward(g):
        dv = np.zeros_like(v.value)
        dv[i] = g
        return ((v, dv),)

    return v.tape._record(out, (v,), backward)


def dot(a: Node, b: Node) -> Node:
    """Inner product of two equal-length vectors (composite convenience)."""
    return sum_all(hadamard(a, b))


# ---------------------------------------------------------------------------
# backward pass

class Gradients:
    """Adjoints from one backward pass, queryable per node."""

    def __init__(self, grads, tape):
        self._grads = grads
        self._tape = tape

    def of(self, node: Node) -> np.ndarray:
        if node.tape is not self._tape:
            raise ValueError("node does not belong to the differentiated tape")
        g = self._grads[node.index]
        if g is None:
            return np.zeros_like(node.value)
        return g


def backward(tape: Tape, loss: Node) -> Gradients:
    """Propagate adjoints from a scalar loss node back through the tape.

    Fan-out is handled by summation; leaves the loss does not reach keep a
    zero gradient.
    """
    if loss.tape is not tape:
        raise ValueError("loss node is not on this tape")
    if loss.value.shape != ():
        raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
    grads: list[np.ndarray | None] = [None] * len(tape.nodes)
    grads[loss.index] = np.ones(())
    for node in reversed(tape.nodes[:loss.index + 1]):
        g = grads[node.index]
        if g is None or node._backward is None or not node.requires_grad:
            continue
        for parent, pg in node._backward(g):
            if not parent.requires_grad:
                continue
            if grads[parent.index] is None:
                grads[parent.index] = np.array(pg, dtype=np.float64)
            else:
                grads[parent.index] += pg
    return Gradients(grads, tape)


# ---------------------------------------------------------------------------
# finite-difference gradient checking

@dataclass
class TensorCheck:
    """Per-tensor outcome of a gradient check."""

    name: str
    max_rel_err: float = 0.0
    worst_coord: tuple = ()
    coords_checked: int = 0
    coords_skipped: int = 0  # evaluations landing within the relu kink margin


@dataclass
class GradCheckReport:
    checks: dict[str, TensorCheck] = field(default_factory=dict)

    def failures(self, tol: float) -> list[str]:
        return [n for n, c in self.checks.items() if c.max_rel_err >= tol]

    def passed(self, tol: float) -> bool:
        return not self.failures(tol)

    def lines(self) -> list[str]:
        out = []
        for name in sorted(self.checks):
            c = self.checks[name]
            out.append(
                f"{name:24s} max_rel_err={c.max_rel_err:.3e} "
                f"checked={c.coords_checked} skipped={c.coords_skipped}"
            )
        return out


KINK_MARGIN = 1e-7


def grad_check(forward, params, h: float = 1e-5, tol: float = 1e-4,
               full_sweep_limit: int = 10_000, sample_per_tensor: int = 256,
               seed: int = 0, corrupt: str | None = None) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    `forward(values, with_grads)` evaluates the model at the given named
    tensors and returns (loss, grads-or-None, relu_margin). `params` maps
    names to arrays. Every coordinate is swept when the total parameter
    count is below `full_sweep_limit`; otherwise `sample_per_tensor` seeded
    random coordinates are checked per tensor. Coordinates whose perturbed
    evaluation lands within KINK_MARGIN of a relu kink are skipped (central
    differences are meaningless across the kink) and counted in the report.

    Relative error per coordinate: |analytic - numeric| / max(|analytic| +
    |numeric|, 1e-8). `corrupt` names a tensor whose analytic gradient gets
    +1e-2 added, for fault-injection tests.
    """
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    values = {name: np.array(arr, dtype=np.float64) for name, arr in params.items()}
    _, grads, _ = forward(values, True)
    if grads is None:
        raise ValueError("forward must return analytic gradients when asked")
    if corrupt is not None:
        if corrupt not in grads:
            raise KeyError(f"no tensor named {corrupt!r} to corrupt")
        grads = dict(grads)
        grads[corrupt] = grads[corrupt] + 1e-2

    total = sum(arr.size for arr in values.values())
    rng = np.random.default_rng(seed)
    report = GradCheckReport()

    for name in values:
        arr = values[name]
        analytic = grads[name]
        check = TensorCheck(name=name)
        if total <= full_sweep_limit or arr.size <= sample_per_tensor:
            flat_coords = list(range(arr.size))
        else:
            flat_coords = list(rng.choice(arr.size, size=sample_per_tensor, replace=False))
        for flat in flat_coords:
            coord = np.unravel_index(flat, arr.shape)
            orig = arr[coord]
            arr[coord] = orig + h
            loss_hi, _, margin_hi = forward(values, False)
            arr[coord] = orig - h
            loss_lo, _, margin_lo = forward(values, False)
            arr[coord] = orig
            if min(margin_hi, margin_lo) < KINK_MARGIN:
                check.coords_skipped += 1
                continue
            numeric = (loss_hi - loss_lo) / (2.0 * h)
            a = float(analytic[coord])
            rel = abs(a - numeric) / max(abs(a) + abs(numeric), 1e-8)
            check.coords_checked += 1
            if rel > check.max_rel_err:
                check.max_rel_err = rel
                check.worst_coord = coord
        report.checks[name] = check
    return report
