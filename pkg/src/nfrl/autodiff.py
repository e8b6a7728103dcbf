"""Reverse-mode automatic differentiation over flat float64 parameter vectors.

The engine records array-valued ops on a Tape; backward() replays the tape in
reverse, accumulating vector-Jacobian products. Parameters live in a ParamStore,
a single flat float64 vector with named slices, so optimizers and checkpoints
operate on one contiguous array.

A Tape is bound to exactly one ParamStore. Parameters read from any other
store enter the graph as constants, which is how actor updates hold a critic
fixed (and vice versa) without copying or flag juggling.
"""
from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import ndtr

from .errors import CheckpointError, ContractError, NumericError, StateError

logger = logging.getLogger(__name__)

Array = np.ndarray

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def assert_all_finite(value, where: str):
    arr = np.asarray(value)
    if not np.all(np.isfinite(arr)):
        bad = int(np.flatnonzero(~np.isfinite(arr).ravel())[0]) if arr.size else -1
        raise NumericError(where, f"first bad flat index {bad}")
    return value


# ---------------------------------------------------------------------------
# parameters


class ParamStore:
    """Flat float64 parameter vector with named, non-overlapping slices.

    Layout is fixed at construction (insertion order of `named`); views into
    the flat vector are returned reshaped to each entry's declared shape.
    """

    def __init__(self, named: dict[str, Array], rng_seed: int = 0):
        slices: dict[str, slice] = {}
        shapes: dict[str, tuple[int, ...]] = {}
        chunks = []
        offset = 0
        for name, arr in named.items():
            arr = np.asarray(arr, dtype=np.float64)
            if name in slices:
                raise ContractError(f"duplicate parameter name {name!r}")
            slices[name] = slice(offset, offset + arr.size)
            shapes[name] = arr.shape
            chunks.append(arr.ravel())
            offset += arr.size
        self.values = np.concatenate(chunks) if chunks else np.zeros(0)
        self.slices = slices
        self.shapes = shapes
        self.rng_seed = rng_seed
        assert_all_finite(self.values, "ParamStore init")

    @property
    def size(self) -> int:
        return self.values.size

    def view(self, name: str) -> Array:
        """Writable view of one named parameter, in its declared shape."""
        if name not in self.slices:
            raise ContractError(f"unknown parameter {name!r}")
        return self.values[self.slices[name]].reshape(self.shapes[name])

    def names(self):
        return list(self.slices)

    def clone(self) -> "ParamStore":
        other = ParamStore.__new__(ParamStore)
        other.values = self.values.copy()
        other.slices = dict(self.slices)
        other.shapes = dict(self.shapes)
        other.rng_seed = self.rng_seed
        return other

    def copy_from(self, other: "ParamStore"):
        if self.slices != other.slices:
            raise ContractError("parameter layouts differ")
        self.values[:] = other.values

    def lerp_from(self, other: "ParamStore", tau: float):
        """Polyak step: self <- (1 - tau) * self + tau * other."""
        if self.slices != other.slices:
            raise ContractError("parameter layouts differ")
        self.values *= 1.0 - tau
        self.values += tau * other.values


# ---------------------------------------------------------------------------
# tape


class Node:
    __slots__ = ("tape", "value", "parents", "vjp", "grad")

    def __init__(self, tape, value, parents=(), vjp=None):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.vjp = vjp  # g -> tuple of parent cotangents, aligned with parents
        self.grad = None

    @property
    def shape(self):
        return self.value.shape


class Tape:
    """Records one forward pass; backward() may be called once."""

    def __init__(self, store: ParamStore | None = None):
        self.store = store
        self.nodes: list[Node] = []
        self.grad = np.zeros(store.size) if store is not None else None
        self._param_nodes: dict[str, tuple[Node, slice]] = {}
        self._done = False

    def _push(self, value, parents=(), vjp=None) -> Node:
        node = Node(self, np.asarray(value, dtype=np.float64), parents, vjp)
        self.nodes.append(node)
        return node

    def const(self, value) -> Node:
        return self._push(value)

    def input(self, value) -> Node:
        """Leaf whose gradient the caller wants to read after backward()."""
        return self._push(value)

    def param(self, store: ParamStore, name: str) -> Node:
        """Parameter leaf if `store` is the tape's bound store, else a constant."""
        if name not in store.slices:
            raise ContractError(f"unknown parameter {name!r}")
        value = store.view(name)
        if store is not self.store:
            return self._push(value.copy())
        if name in self._param_nodes:
            return self._param_nodes[name][0]
        node = self._push(value)
        self._param_nodes[name] = (node, store.slices[name])
        return node

    def backward(self, node: Node, seed=None):
        """Accumulate d(node)/d(leaf) into leaf grads and self.grad.

        `seed` defaults to ones of node's shape; for a scalar node this
        yields plain gradients, for a per-row output it sums rows (which
        equals per-row gradients whenever rows are independent).
        """
        if not self.nodes:
            raise StateError("backward called before any forward computation")
        if self._done:
            raise StateError("backward already called on this tape")
        if node.tape is not self:
            raise ContractError("node does not belong to this tape")
        self._done = True
        node.grad = np.ones_like(node.value) if seed is None else np.asarray(seed, dtype=np.float64)
        if node.grad.shape != node.value.shape:
            raise ContractError("seed shape does not match node shape")
        for n in reversed(self.nodes):
            if n.grad is None or n.vjp is None:
                continue
            for parent, g in zip(n.parents, n.vjp(n.grad)):
                if g is None:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.value)
                parent.grad += g
        if self.grad is not None:
            for node_, sl in self._param_nodes.values():
                if node_.grad is not None:
                    self.grad[sl] += node_.grad.ravel()
        # a tape is single-use once backward has run; dropping the graph links
        # here frees intermediates by refcount instead of waiting on the cycle
        # collector (leaf nodes the caller still holds keep .value and .grad)
        for n in self.nodes:
            n.parents = ()
            n.vjp = None
        self.nodes.clear()
        self._param_nodes.clear()


def _lift(tape: Tape, x) -> Node:
    if isinstance(x, Node):
        if x.tape is not tape:
            raise ContractError("mixing nodes from different tapes")
        return x
    return tape.const(x)


def _tape_of(*args) -> Tape:
    for a in args:
        if isinstance(a, Node):
            return a.tape
    raise ContractError("at least one argument must be a Node")


def _unbroadcast(g: Array, shape) -> Array:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# ops


def add(a, b) -> Node:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    return t._push(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)),
    )


def sub(a, b) -> Node:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    return t._push(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)),
    )


def mul(a, b) -> Node:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    return t._push(
        a.value * b.value,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.value, a.value.shape),
            _unbroadcast(g * a.value, b.value.shape),
        ),
    )


def neg(a: Node) -> Node:
    return a.tape._push(-a.value, (a,), lambda g: (-g,))


def matmul(a, b) -> Node:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ContractError("matmul expects 2-D operands")
    return t._push(
        a.value @ b.value,
        (a, b),
        lambda g: (g @ b.value.T, a.value.T @ g),
    )


def exp(a: Node) -> Node:
    out = np.exp(a.value)
    return a.tape._push(out, (a,), lambda g: (g * out,))


def log(a: Node) -> Node:
    return a.tape._push(np.log(a.value), (a,), lambda g: (g / a.value,))


def abs_log(a: Node) -> Node:
    """log|a|; gradient 1/a (sign cancels)."""
    return a.tape._push(np.log(np.abs(a.value)), (a,), lambda g: (g / a.value,))


def square(a: Node) -> Node:
    return a.tape._push(a.value * a.value, (a,), lambda g: (2.0 * g * a.value,))


def tanh(a: Node) -> Node:
    out = np.tanh(a.value)
    return a.tape._push(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Node) -> Node:
    mask = a.value > 0.0
    return a.tape._push(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def gelu(a: Node) -> Node:
    """Exact GELU x * Phi(x) via the normal CDF; d/dx = Phi(x) + x * phi(x)."""
    x = a.value
    cdf = ndtr(x)
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return a.tape._push(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),))


def clamp(a: Node, lo: float, hi: float) -> Node:
    """Clip to [lo, hi]; gradient is the exact subgradient (zero when saturated)."""
    mask = (a.value >= lo) & (a.value <= hi)
    return a.tape._push(np.clip(a.value, lo, hi), (a,), lambda g: (g * mask,))


def vsum(a: Node, axis=None) -> Node:
    shape = a.value.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return a.tape._push(a.value.sum(axis=axis), (a,), vjp)


def vmean(a: Node, axis=None) -> Node:
    shape = a.value.shape
    n = a.value.size if axis is None else shape[axis]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / n, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),)

    return a.tape._push(a.value.mean(axis=axis), (a,), vjp)


def reshape(a: Node, shape) -> Node:
    old = a.value.shape
    return a.tape._push(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def layer_norm(a: Node, eps: float = 1e-8) -> Node:
    """Normalize each row of a 2-D array to zero mean, unit variance.

    y = (x - mean(x)) / sqrt(var(x) + eps); the VJP
    dx = (g - mean(g) - y * mean(g * y)) / s is exact for eps > 0 as well.
    """
    if a.value.ndim != 2:
        raise ContractError("layer_norm expects a 2-D array")
    x = a.value
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    s = np.sqrt(var + eps)
    y = xc / s

    def vjp(g):
        gy = (g * y).mean(axis=1, keepdims=True)
        return ((g - g.mean(axis=1, keepdims=True) - y * gy) / s,)

    return a.tape._push(y, (a,), vjp)


def concat_cols(parts: list[Node]) -> Node:
    t = _tape_of(*parts)
    parts = [_lift(t, p) for p in parts]
    widths = [p.value.shape[1] for p in parts]
    bounds = np.cumsum([0] + widths)

    def vjp(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return t._push(np.concatenate([p.value for p in parts], axis=1), tuple(parts), vjp)


def cols(a: Node, j0: int, j1: int) -> Node:
    """Contiguous column slice a[:, j0:j1]."""
    shape = a.value.shape

    def vjp(g):
        out = np.zeros(shape)
        out[:, j0:j1] = g
        return (out,)

    return a.tape._push(a.value[:, j0:j1].copy(), (a,), vjp)


def permute_cols(a: Node, perm: Array) -> Node:
    """y[:, j] = x[:, perm[j]]."""
    perm = np.asarray(perm)

    def vjp(g):
        out = np.empty_like(g)
        out[:, perm] = g
        return (out,)

    return a.tape._push(a.value[:, perm].copy(), (a,), vjp)


def gather(a: Node, idx: Array) -> Node:
    """Gather elements of a 1-D array; VJP scatter-adds."""
    idx = np.asarray(idx)

    def vjp(g):
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return (out,)

    return a.tape._push(a.value[idx].copy(), (a,), vjp)


def lower_unit(vec: Node, d: int) -> Node:
    """Unit lower-triangular matrix from a packed vector of the strict lower part."""
    rows, cols_ = np.tril_indices(d, k=-1)
    if vec.value.shape != (rows.size,):
        raise ContractError(f"expected packed vector of size {rows.size}")

    def build(v):
        m = np.eye(d)
        m[rows, cols_] = v
        return m

    return vec.tape._push(build(vec.value), (vec,), lambda g: (g[rows, cols_],))


def upper_tri(vec: Node, d: int) -> Node:
    """Upper-triangular matrix (diagonal included) from a packed vector."""
    rows, cols_ = np.triu_indices(d, k=0)
    if vec.value.shape != (rows.size,):
        raise ContractError(f"expected packed vector of size {rows.size}")

    def build(v):
        m = np.zeros((d, d))
        m[rows, cols_] = v
        return m

    return vec.tape._push(build(vec.value), (vec,), lambda g: (g[rows, cols_],))


def solve_right_tri(y, t_mat, lower: bool, unit_diagonal: bool = False) -> Node:
    """Solve x @ T = y for a triangular T.

    VJPs: y_bar solves y_bar @ T^T = g, and T_bar = -x^T @ y_bar (the caller's
    triangular-packing op masks T_bar down to the stored triangle).
    """
    t = _tape_of(y, t_mat)
    y, t_mat = _lift(t, y), _lift(t, t_mat)
    tv = t_mat.value
    x = solve_triangular(tv, y.value.T, trans="T", lower=lower, unit_diagonal=unit_diagonal).T

    def vjp(g):
        ybar = solve_triangular(tv, g.T, trans="N", lower=lower, unit_diagonal=unit_diagonal).T
        return (ybar, -x.T @ ybar)

    return t._push(x, (y, t_mat), vjp)


def external_grad(x: Node, fn, where: str = "external target") -> Node:
    """Hook for a differentiable external scalar field.

    `fn(values) -> (f, df_dx)` evaluates a per-row scalar and its gradient
    with respect to the input rows; both enter the tape here, so the tape
    never needs to trace the external computation.
    """
    f, dfdx = fn(x.value)
    f = np.asarray(f, dtype=np.float64)
    dfdx = np.asarray(dfdx, dtype=np.float64)
    if f.shape != (x.value.shape[0],) or dfdx.shape != x.value.shape:
        raise ContractError(f"{where}: bad shapes from external target")
    assert_all_finite(f, where)
    assert_all_finite(dfdx, where)
    return x.tape._push(f, (x,), lambda g: (g[:, None] * dfdx,))


# ---------------------------------------------------------------------------
# MLP


@dataclass(frozen=True)
class MlpSpec:
    """Fully-connected net: affine -> [LayerNorm] -> activation per hidden layer,
    then a final affine."""

    in_dim: int
    hidden_dims: tuple[int, ...]
    out_dim: int
    layernorm: bool = False
    activation: str = "gelu"

    def __post_init__(self):
        dims = (self.in_dim, *self.hidden_dims, self.out_dim)
        if any(int(d) < 1 for d in dims):
            raise ContractError(f"all layer widths must be >= 1, got {dims}")
        if self.activation not in _ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")

    def param_shapes(self, prefix: str) -> list[tuple[str, tuple[int, ...]]]:
        shapes = []
        dims = (self.in_dim, *self.hidden_dims, self.out_dim)
        for i in range(len(dims) - 1):
            shapes.append((f"{prefix}.w{i}", (dims[i], dims[i + 1])))
            shapes.append((f"{prefix}.b{i}", (dims[i + 1],)))
            if self.layernorm and i < len(dims) - 2:
                shapes.append((f"{prefix}.g{i}", (dims[i + 1],)))
                shapes.append((f"{prefix}.c{i}", (dims[i + 1],)))
        return shapes

    def n_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.param_shapes("x"))


_ACTIVATIONS = {"gelu": gelu, "relu": relu, "tanh": tanh}


def init_mlp_params(spec: MlpSpec, rng: np.random.Generator, prefix: str,
                    zero_final: bool = False) -> dict[str, Array]:
    """He-uniform weights, zero biases; optionally zero the final affine so the
    net is exactly the zero map at init."""
    params: dict[str, Array] = {}
    dims = (spec.in_dim, *spec.hidden_dims, spec.out_dim)
    n_layers = len(dims) - 1
    for i in range(n_layers):
        fan_in = dims[i]
        limit = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-limit, limit, size=(dims[i], dims[i + 1]))
        if zero_final and i == n_layers - 1:
            w = np.zeros_like(w)
        params[f"{prefix}.w{i}"] = w
        params[f"{prefix}.b{i}"] = np.zeros(dims[i + 1])
        if spec.layernorm and i < n_layers - 1:
            params[f"{prefix}.g{i}"] = np.ones(dims[i + 1])
            params[f"{prefix}.c{i}"] = np.zeros(dims[i + 1])
    return params


def mlp_forward(spec: MlpSpec, store: ParamStore, prefix: str, x, tape: Tape) -> Node:
    """Run the MLP on a (B, in_dim) batch; raises NumericError naming the layer
    that first produced a non-finite value."""
    if not isinstance(x, Node):
        x = tape.const(np.atleast_2d(x))
    if x.value.ndim != 2 or x.value.shape[1] != spec.in_dim:
        raise ContractError(
            f"{prefix}: expected input (*, {spec.in_dim}), got {x.value.shape}"
        )
    act = _ACTIVATIONS[spec.activation]
    n_layers = len(spec.hidden_dims) + 1
    h = x
    for i in range(n_layers):
        w = tape.param(store, f"{prefix}.w{i}")
        b = tape.param(store, f"{prefix}.b{i}")
        h = add(matmul(h, w), b)
        if i < n_layers - 1:
            if spec.layernorm:
                h = layer_norm(h)
                h = add(mul(h, tape.param(store, f"{prefix}.g{i}")),
                        tape.param(store, f"{prefix}.c{i}"))
            h = act(h)
        if not np.all(np.isfinite(h.value)):
            raise NumericError(f"{prefix} layer {i}")
    return h


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: Array
    v: Array
    t: int = 0

    @classmethod
    def for_store(cls, store: ParamStore) -> "AdamState":
        return cls(m=np.zeros(store.size), v=np.zeros(store.size))


def optimizer_step(store: ParamStore, grads: Array, state: AdamState, lr: float,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> bool:
    """One Adam step on the flat vector. Non-finite grads are skipped with a
    warning; returns whether the step was applied."""
    grads = np.asarray(grads)
    if grads.shape != store.values.shape:
        raise ContractError("gradient shape does not match parameter vector")
    if not np.all(np.isfinite(grads)):
        logger.warning("skipping optimizer step: non-finite gradient")
        return False
    state.t += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grads
    state.v = beta2 * state.v + (1.0 - beta2) * grads * grads
    m_hat = state.m / (1.0 - beta1 ** state.t)
    v_hat = state.v / (1.0 - beta2 ** state.t)
    store.values -= lr * m_hat / (np.sqrt(v_hat) + eps)
    assert_all_finite(store.values, "parameters after optimizer step")
    return True


class Adam:
    """Convenience bundle of a store, its moment buffers, and a learning rate."""

    def __init__(self, store: ParamStore, lr: float):
        self.store = store
        self.state = AdamState.for_store(store)
        self.lr = lr

    def step(self, grads: Array) -> bool:
        return optimizer_step(self.store, grads, self.state, self.lr)


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"NFRL"
CKPT_VERSION = 1


def save_checkpoint(path: str, store: ParamStore, header: dict[str, str]):
    """Binary layout: magic, version u32, header length u32, key=value text
    header, slice count u32, then per slice (name length u32, name, element
    offset u64, element count u64), then the little-endian float64 payload.

    Written to a temp file and renamed, so a crash never leaves a partial
    checkpoint at `path`.
    """
    lines = []
    for k, v in header.items():
        k, v = str(k), str(v)
        if "=" in k or "\n" in k or "\n" in str(v):
            raise ContractError(f"bad header entry {k!r}")
        lines.append(f"{k}={v}")
    header_bytes = "\n".join(lines).encode("utf-8")
    blob = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION)]
    blob.append(struct.pack("<I", len(header_bytes)))
    blob.append(header_bytes)
    blob.append(struct.pack("<I", len(store.slices)))
    for name, sl in store.slices.items():
        nb = name.encode("utf-8")
        blob.append(struct.pack("<I", len(nb)))
        blob.append(nb)
        blob.append(struct.pack("<QQ", sl.start, sl.stop - sl.start))
    blob.append(np.ascontiguousarray(store.values, dtype="<f8").tobytes())
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(b"".join(blob))
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def load_checkpoint(path: str) -> tuple[dict[str, str], Array, dict[str, tuple[int, int]]]:
    """Returns (header dict, flat float64 values, {name: (offset, length)})."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 12 or data[:4] != CKPT_MAGIC:
        raise CheckpointError(
            f"{path}: bad magic bytes {data[:4]!r}, expected {CKPT_MAGIC!r}"
        )
    pos = 4
    (version,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if version > CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    header_text = data[pos : pos + hlen].decode("utf-8")
    pos += hlen
    header = {}
    for line in header_text.splitlines():
        if line:
            k, _, v = line.partition("=")
            header[k] = v
    (n_slices,) = struct.unpack_from("<I", data, pos)
    pos += 4
    slices: dict[str, tuple[int, int]] = {}
    for _ in range(n_slices):
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + nlen].decode("utf-8")
        pos += nlen
        off, length = struct.unpack_from("<QQ", data, pos)
        pos += 16
        slices[name] = (off, length)
    payload = data[pos:]
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    for name, (off, length) in slices.items():
        if off + length > values.size:
            raise CheckpointError(f"{path}: slice {name!r} exceeds payload")
    return header, values, slices


def restore_store(store: ParamStore, values: Array, slices: dict[str, tuple[int, int]]):
    """Copy checkpoint values into an already-built store, validating layout."""
    for name, sl in store.slices.items():
        if name not in slices:
            raise CheckpointError(f"checkpoint missing parameter {name!r}")
        off, length = slices[name]
        if length != sl.stop - sl.start:
            raise CheckpointError(f"checkpoint slice {name!r} has wrong length")
        store.values[sl] = values[off : off + length]
    assert_all_finite(store.values, "restored parameters")
