"""Dense-tensor engine with reverse-mode automatic differentiation.

Tensors are numpy-backed, rank <= 3, float32 for training and float64 for
the finite-difference gradient checker. The computation graph is implicit:
each tensor produced by a primitive keeps references to its parents and a
closure that routes the output adjoint to them. ``backward`` resets every
gradient buffer reachable from the root before propagating, so replaying
backward without a new forward is idempotent. Cross-graph accumulation
(e.g. over a batch) is the caller's job.
"""
from __future__ import annotations

import hashlib
from typing import Callable, Iterable, Sequence

import numpy as np

PROB_FLOOR = 1e-12


class ShapeError(ValueError):
    """Operand shapes are incompatible with the primitive's contract."""


class ConfigError(ValueError):
    """A primitive was configured outside its supported domain."""


def seeded_rng(*keys: int | float | str) -> np.random.Generator:
    """Deterministic generator derived from a sequence of mixed-type keys.

    Integers are used directly (two's complement for negatives), strings and
    floats are hashed. Independent key tuples give independent streams, which
    lets per-item work be generated in any order or in parallel without
    changing the result.
    """
    entropy = []
    for k in keys:
        if isinstance(k, (bool, np.bool_)):
            entropy.append(int(k))
        elif isinstance(k, (int, np.integer)):
            entropy.append(int(k) & 0xFFFFFFFFFFFFFFFF)
        elif isinstance(k, (float, str)):
            digest = hashlib.sha256(repr(k).encode() if isinstance(k, float) else k.encode()).digest()
            entropy.append(int.from_bytes(digest[:8], "little"))
        else:
            raise TypeError(f"unsupported rng key type: {type(k).__name__}")
    return np.random.default_rng(entropy)


class Tensor:
    """A dense array node in the implicit autodiff graph.

    ``grad`` is allocated iff ``requires_grad``; primitives propagate the
    flag from their inputs, so constant subgraphs carry no closures and cost
    nothing at backward time.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim > 3:
            raise ShapeError(f"rank {arr.ndim} tensor not supported (max rank 3)")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def backward(self) -> None:
        backward(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def requires_grad_(self, flag: bool) -> "Tensor":
        self.requires_grad = bool(flag)
        if self.requires_grad:
            if self.grad is None:
                self.grad = np.zeros_like(self.data)
        else:
            self.grad = None
        return self

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _check_dtypes(*tensors: Tensor) -> None:
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ConfigError(f"mixed dtypes in one primitive: {sorted(str(d) for d in dtypes)}")


def topo_order(root: Tensor) -> list[Tensor]:
    """Graph nodes reachable from ``root``, every node after its inputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``grad`` for every reachable tensor.

    All gradient buffers in the graph are zeroed first, so calling backward
    twice without a new forward yields identical gradients.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("backward root does not require grad")
    order = topo_order(root)
    for node in order:
        if node.requires_grad:
            node.grad[...] = 0
    root.grad[...] = 1
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.shape} x {b.shape}")
    _check_dtypes(a, b)
    out_data = a.data @ b.data

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad += g @ b.data.T
        if b.requires_grad:
            b.grad += a.data.T @ g

    return _result(out_data, (a, b), backward_fn)


def conv1d(x: Tensor, w: Tensor, bias: Tensor) -> Tensor:
    """1D cross-correlation, stride 1, zero same-padding of (K-1)/2.

    x: (C_in, T), w: (C_out, C_in, K), bias: (C_out,) -> (C_out, T).
    """
    if w.data.ndim != 3:
        raise ShapeError(f"conv1d weight must be rank 3, got {w.shape}")
    c_out, c_in, k = w.shape
    if k % 2 == 0:
        raise ConfigError(f"conv1d kernel size must be odd, got {k}")
    if x.data.ndim != 2 or x.shape[0] != c_in:
        raise ShapeError(f"conv1d input {x.shape} does not match weight {w.shape}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv1d bias {bias.shape} does not match C_out={c_out}")
    _check_dtypes(x, w, bias)
    t = x.shape[1]
    pad = (k - 1) // 2
    x_pad = np.zeros((c_in, t + 2 * pad), dtype=x.data.dtype)
    x_pad[:, pad:pad + t] = x.data
    # contiguous per-tap weight views; the K-strided slice defeats BLAS
    taps = [np.ascontiguousarray(w.data[:, :, tap]) for tap in range(k)]
    out_data = np.repeat(bias.data[:, None], t, axis=1)
    for tap in range(k):
        out_data += taps[tap] @ x_pad[:, tap:tap + t]

    def backward_fn(g: np.ndarray) -> None:
        if bias.requires_grad:
            bias.grad += g.sum(axis=1)
        if w.requires_grad:
            for tap in range(k):
                w.grad[:, :, tap] += g @ x_pad[:, tap:tap + t].T
        if x.requires_grad:
            gx_pad = np.zeros_like(x_pad)
            for tap in range(k):
                gx_pad[:, tap:tap + t] += taps[tap].T @ g
            x.grad += gx_pad[:, pad:pad + t]

    return _result(out_data, (x, w, bias), backward_fn)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    out_data = exp / exp.sum(axis=axis, keepdims=True)

    def backward_fn(g: np.ndarray) -> None:
        if x.requires_grad:
            inner = (g * out_data).sum(axis=axis, keepdims=True)
            x.grad += out_data * (g - inner)

    return _result(out_data, (x,), backward_fn)


def _piecewise_relu(x: Tensor, slope: float) -> Tensor:
    # for slope in [0,1), max(x, slope*x) is the positive branch at x >= 0
    slope_t = x.data.dtype.type(slope)
    out_data = np.maximum(x.data, x.data * slope_t) if slope else np.maximum(x.data, 0)

    def backward_fn(g: np.ndarray) -> None:
        if x.requires_grad:
            x.grad += np.where(x.data >= 0, g, g * slope_t)

    return _result(out_data, (x,), backward_fn)


def leaky_relu(x: Tensor, slope: float) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ConfigError(f"leaky_relu slope must be in (0, 1), got {slope}")
    return _piecewise_relu(x, slope)


def relu(x: Tensor) -> Tensor:
    return _piecewise_relu(x, 0.0)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; b may be a column (rows(a), 1) broadcast across a's feature dim."""
    _check_dtypes(a, b)
    broadcast = a.shape != b.shape
    if broadcast and not (a.data.ndim == 2 and b.shape == (a.shape[0], 1)):
        raise ShapeError(f"hadamard shapes incompatible: {a.shape} vs {b.shape}")
    out_data = a.data * b.data

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad += g * b.data
        if b.requires_grad:
            gb = g * a.data
            b.grad += gb.sum(axis=1, keepdims=True) if broadcast else gb

    return _result(out_data, (a, b), backward_fn)


def mean_pool(x: Tensor, kernel: int, stride: int) -> Tensor:
    """Mean over windows of ``kernel`` frames along time; tail frames without a full window drop."""
    if x.data.ndim != 2:
        raise ShapeError(f"mean_pool input must be rank 2 (C, T), got {x.shape}")
    if kernel < 1 or stride < 1:
        raise ConfigError(f"mean_pool kernel/stride must be >= 1, got {kernel}/{stride}")
    t = x.shape[1]
    if kernel > t:
        raise ShapeError(f"mean_pool kernel {kernel} exceeds input length {t}")
    t_out = (t - kernel) // stride + 1
    scale = x.data.dtype.type(1.0 / kernel)
    out_data = np.zeros((x.shape[0], t_out), dtype=x.data.dtype)
    for offset in range(kernel):
        out_data += x.data[:, offset:offset + stride * t_out:stride]
    out_data *= scale

    def backward_fn(g: np.ndarray) -> None:
        if x.requires_grad:
            gs = g * scale
            for offset in range(kernel):
                x.grad[:, offset:offset + stride * t_out:stride] += gs

    return _result(out_data, (x,), backward_fn)


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """Mean over rows of -log(probs[label]), probabilities floored at 1e-12.

    probs: (C,) with an int label, or (T, C) with a length-T label sequence.
    """
    if probs.data.ndim == 1:
        rows = probs.data[None, :]
        label_arr = np.asarray([labels], dtype=np.int64)
    elif probs.data.ndim == 2:
        rows = probs.data
        label_arr = np.asarray(labels, dtype=np.int64)
        if label_arr.shape != (rows.shape[0],):
            raise ShapeError(f"labels shape {label_arr.shape} does not match rows {rows.shape[0]}")
    else:
        raise ShapeError(f"cross_entropy input must be rank 1 or 2, got {probs.shape}")
    n, c = rows.shape
    if label_arr.min() < 0 or label_arr.max() >= c:
        raise ValueError(f"label out of range [0, {c}): {label_arr[(label_arr < 0) | (label_arr >= c)][0]}")
    picked = rows[np.arange(n), label_arr]
    floored = np.maximum(picked, rows.dtype.type(PROB_FLOOR))
    out_data = np.asarray(-np.log(floored).mean(), dtype=probs.data.dtype)

    def backward_fn(g: np.ndarray) -> None:
        if probs.requires_grad:
            grad_rows = np.zeros_like(rows)
            active = picked > PROB_FLOOR
            grad_rows[np.arange(n)[active], label_arr[active]] = -1.0 / (n * floored[active])
            target = probs.grad if probs.data.ndim == 2 else probs.grad[None, :]
            target += g * grad_rows

    return _result(out_data, (probs,), backward_fn)


# ---------------------------------------------------------------------------
# plumbing primitives used by the model blocks


def sum_all(x: Tensor) -> Tensor:
    out_data = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def backward_fn(g: np.ndarray) -> None:
        if x.requires_grad:
            x.grad += g

    return _result(out_data, (x,), backward_fn)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose expects rank 2, got {x.shape}")
    out_data = np.ascontiguousarray(x.data.T)

    def backward_fn(g: np.ndarray) -> None:
        if x.requires_grad:
            x.grad += g.T

    return _result(out_data, (x,), backward_fn)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out_data = x.data.reshape(shape)

    def backward_fn(g: np.ndarray) -> None:
        if x.requires_grad:
            x.grad += g.reshape(x.shape)

    return _result(out_data, (x,), backward_fn)


def add_rowvec(a: Tensor, b: Tensor) -> Tensor:
    """a: (M, N) plus row vector b: (N,), broadcast over rows."""
    if a.data.ndim != 2 or b.data.ndim != 1 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"add_rowvec shapes incompatible: {a.shape} + {b.shape}")
    _check_dtypes(a, b)
    out_data = a.data + b.data[None, :]

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad += g
        if b.requires_grad:
            b.grad += g.sum(axis=0)

    return _result(out_data, (a, b), backward_fn)


def take_column(x: Tensor, col: int) -> Tensor:
    """Column ``col`` of a rank-2 tensor, kept as an (M, 1) column."""
    if x.data.ndim != 2 or not 0 <= col < x.shape[1]:
        raise ShapeError(f"take_column({col}) invalid for shape {x.shape}")
    out_data = x.data[:, col:col + 1].copy()

    def backward_fn(g: np.ndarray) -> None:
        if x.requires_grad:
            x.grad[:, col:col + 1] += g

    return _result(out_data, (x,), backward_fn)


def layer_weighted_sum(stack: Tensor, weights: Tensor) -> Tensor:
    """Convex combination over the leading (layer) axis: out[t,d] = sum_l w[l] * stack[l,t,d]."""
    if stack.data.ndim != 3 or weights.data.ndim != 1 or stack.shape[0] != weights.shape[0]:
        raise ShapeError(f"layer_weighted_sum shapes incompatible: {stack.shape} vs {weights.shape}")
    _check_dtypes(stack, weights)
    out_data = np.tensordot(weights.data, stack.data, axes=(0, 0))

    def backward_fn(g: np.ndarray) -> None:
        if weights.requires_grad:
            weights.grad += np.tensordot(stack.data, g, axes=([1, 2], [0, 1]))
        if stack.requires_grad:
            stack.grad += weights.data[:, None, None] * g

    return _result(out_data, (stack, weights), backward_fn)


def straight_through(soft: Tensor, hard_data: np.ndarray) -> Tensor:
    """Forward the hard values, backpropagate as if the soft ones were used."""
    if hard_data.shape != soft.shape:
        raise ShapeError(f"straight_through shapes differ: {hard_data.shape} vs {soft.shape}")

    def backward_fn(g: np.ndarray) -> None:
        if soft.requires_grad:
            soft.grad += g

    return _result(np.asarray(hard_data, dtype=soft.data.dtype), (soft,), backward_fn)


# ---------------------------------------------------------------------------
# finite-difference gradient checker


def grad_check(
    f: Callable[[], Tensor],
    inputs: Iterable[Tensor],
    step: float = 1e-5,
    max_coords_per_tensor: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a deterministic scalar-valued function of the float64
    ``inputs`` it closes over. Relative error per coordinate is
    |g_a - g_n| / max(1, |g_a|, |g_n|). For large tensors a seeded random
    subset of at most ``max_coords_per_tensor`` coordinates is swept.
    """
    inputs = list(inputs)
    for inp in inputs:
        if inp.data.dtype != np.float64:
            raise ConfigError("grad_check requires float64 inputs")
        if not inp.requires_grad:
            raise ConfigError("grad_check inputs must require grad")
    out = f()
    if out.data.size != 1:
        raise ShapeError(f"grad_check function must return a scalar, got {out.shape}")
    backward(out)
    analytic = [inp.grad.copy() for inp in inputs]

    rng = seeded_rng(seed)
    worst = 0.0
    for inp, ga in zip(inputs, analytic):
        flat = inp.data.reshape(-1)
        ga_flat = ga.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords_per_tensor is not None and flat.size > max_coords_per_tensor:
            coords = rng.choice(flat.size, size=max_coords_per_tensor, replace=False)
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + step
            f_plus = f().item()
            flat[idx] = orig - step
            f_minus = f().item()
            flat[idx] = orig
            numeric = (f_plus - f_minus) / (2 * step)
            err = abs(ga_flat[idx] - numeric) / max(1.0, abs(ga_flat[idx]), abs(numeric))
            worst = max(worst, err)
    return worst
