"""Dense-tensor reverse-mode autodiff for the pixel Q-network.

The engine is a Wengert list: every primitive appends one node holding
its forward value, its parent indices and a vector-Jacobian closure.
``backward`` walks the list once in reverse and returns the gradient
flattened over the registered parameter leaves.  Just enough primitives
exist to express conv -> relu -> dense networks and the mean-squared
critic loss; there is no broadcasting beyond the bias add and no dynamic
shapes.

Flattening contract: parameters are concatenated layer by layer in the
order ``QNetworkSpec.layer_order()`` yields them, each tensor raveled
row-major.  ``ParamSet.flatten``/``unflatten`` are exact inverses.

Training typically stores parameters in float32; verification (and the
finite-difference oracle) runs everything in float64.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import StructuralError

# ---------------------------------------------------------------------------
# tape machinery


@dataclass
class Node:
    value: np.ndarray
    parents: tuple[int, ...] = ()
    vjp: Callable[[np.ndarray], tuple[np.ndarray, ...]] | None = None


class Tape:
    """Append-only, topologically ordered record of primitive ops.

    ``needs_grad`` marks nodes on a path from a parameter leaf; recording
    primitives consult it so they can skip building gradients nothing
    downstream will consume (e.g. the input image of the first conv).
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.param_slots: list[int] = []
        self.needs_grad: list[bool] = []

    def _push(self, value, parents=(), vjp=None, is_param=False) -> "Var":
        self.nodes.append(Node(np.asarray(value), parents, vjp))
        self.needs_grad.append(is_param or any(self.needs_grad[p] for p in parents))
        return Var(self, len(self.nodes) - 1)

    def leaf(self, value) -> "Var":
        return self._push(value)

    def param_leaf(self, value) -> "Var":
        var = self._push(value, is_param=True)
        self.param_slots.append(var.idx)
        return var


@dataclass(frozen=True)
class Var:
    """Handle to one tape node."""

    tape: Tape
    idx: int

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.idx].value


def _im2col(x: np.ndarray, k: int, stride: int) -> tuple[np.ndarray, int, int]:
    """Window gather in (tap-row, tap-col, channel) column order.

    The channel-last layout copies measurably faster than the
    conventional channel-major one; the kernel matrix is rearranged to
    match in conv2d.
    """
    b, c, h, w = x.shape
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    s0, s1, s2, s3 = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        shape=(b, oh, ow, k, k, c),
        strides=(s0, s2 * stride, s3 * stride, s2, s3, s1),
        writeable=False,
    )
    return np.ascontiguousarray(windows).reshape(b * oh * ow, k * k * c), oh, ow


def _kernel_matrix(kernel: np.ndarray) -> np.ndarray:
    """(F, C, k, k) kernel as a (k*k*C, F) matrix matching _im2col."""
    f = kernel.shape[0]
    return np.ascontiguousarray(kernel.transpose(2, 3, 1, 0).reshape(-1, f))


def _col2im(dcols: np.ndarray, x_shape, k: int, stride: int) -> np.ndarray:
    b, c, h, w = x_shape
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    dx = np.zeros(x_shape, dtype=dcols.dtype)
    patches = dcols.reshape(b, oh, ow, k, k, c)
    for i in range(k):
        for j in range(k):
            dx[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride] += patches[
                :, :, :, i, j, :
            ].transpose(0, 3, 1, 2)
    return dx


def conv2d(x: Var, kernel: Var, bias: Var, stride: int) -> Var:
    """Valid convolution (no padding), floor output size, shared tape."""
    xv, kv, bv = x.value, kernel.value, bias.value
    if xv.ndim != 4 or kv.ndim != 4 or xv.shape[1] != kv.shape[1]:
        raise StructuralError(
            f"conv2d expects (B,C,H,W) x (F,C,k,k), got {xv.shape} and {kv.shape}"
        )
    b, c, h, w = xv.shape
    f, _, k, _ = kv.shape
    if h < k or w < k:
        raise StructuralError(f"input {h}x{w} smaller than kernel {k}")
    cols, oh, ow = _im2col(xv, k, stride)
    kmat = _kernel_matrix(kv)
    out = cols @ kmat + bv
    out = out.reshape(b, oh, ow, f).transpose(0, 3, 1, 2)
    want_dx = x.tape.needs_grad[x.idx]

    def vjp(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(b * oh * ow, f)
        # (k*k*C, F) layout back to (F, C, k, k)
        dk = (cols.T @ gmat).reshape(k, k, c, f).transpose(3, 2, 0, 1)
        db = gmat.sum(axis=0)
        dx = _col2im(gmat @ kmat.T, xv.shape, k, stride) if want_dx else None
        return dx, dk, db

    return x.tape._push(out, (x.idx, kernel.idx, bias.idx), vjp)


def relu(x: Var) -> Var:
    xv = x.value
    out = np.maximum(xv, 0)

    def vjp(g):
        return (g * (xv > 0),)

    return x.tape._push(out, (x.idx,), vjp)


def flatten_batch(x: Var) -> Var:
    xv = x.value
    out = xv.reshape(xv.shape[0], -1)

    def vjp(g):
        return (g.reshape(xv.shape),)

    return x.tape._push(out, (x.idx,), vjp)


def affine(x: Var, weight: Var, bias: Var) -> Var:
    xv, wv, bv = x.value, weight.value, bias.value
    if xv.ndim != 2 or xv.shape[1] != wv.shape[0]:
        raise StructuralError(f"affine shapes {xv.shape} @ {wv.shape} inconsistent")
    out = xv @ wv + bv

    def vjp(g):
        return g @ wv.T, xv.T @ g, g.sum(axis=0)

    return x.tape._push(out, (x.idx, weight.idx, bias.idx), vjp)


def select_actions(q: Var, actions: np.ndarray) -> Var:
    qv = q.value
    actions = np.asarray(actions)
    if actions.ndim != 1 or actions.shape[0] != qv.shape[0]:
        raise StructuralError("one action index per batch row required")
    if actions.min() < 0 or actions.max() >= qv.shape[1]:
        raise StructuralError(
            f"action index out of range for {qv.shape[1]} actions: {actions}"
        )
    rows = np.arange(qv.shape[0])
    out = qv[rows, actions]

    def vjp(g):
        dq = np.zeros_like(qv)
        dq[rows, actions] = g
        return (dq,)

    return q.tape._push(out, (q.idx,), vjp)


def mse_against(pred: Var, targets: np.ndarray) -> Var:
    pv = pred.value
    t = np.asarray(targets, dtype=pv.dtype)
    if t.shape != pv.shape:
        raise StructuralError(f"targets shape {t.shape} != prediction shape {pv.shape}")
    diff = pv - t
    out = np.asarray((diff * diff).mean(), dtype=pv.dtype)

    def vjp(g):
        return (g * diff * (2.0 / diff.size),)

    return pred.tape._push(out, (pred.idx,), vjp)


def sum_squares(x: Var) -> Var:
    xv = x.value
    out = np.asarray((xv * xv).sum(), dtype=xv.dtype)

    def vjp(g):
        return (g * 2.0 * xv,)

    return x.tape._push(out, (x.idx,), vjp)


def backward(tape: Tape, root: Var) -> np.ndarray:
    """Reverse accumulation from a scalar root.

    Returns the float64 gradient flattened over the tape's parameter
    leaves in registration order; parameters the root does not depend on
    contribute zeros.
    """
    root_node = tape.nodes[root.idx]
    if root_node.value.ndim != 0:
        raise StructuralError(f"backward needs a scalar root, got shape {root_node.value.shape}")
    grads: list[np.ndarray | None] = [None] * (root.idx + 1)
    grads[root.idx] = np.ones((), dtype=root_node.value.dtype)
    for i in range(root.idx, -1, -1):
        g = grads[i]
        node = tape.nodes[i]
        if g is None or node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None:
                continue
            if grads[parent] is None:
                grads[parent] = pg
            else:
                grads[parent] = grads[parent] + pg
    pieces = []
    for slot in tape.param_slots:
        g = grads[slot] if slot <= root.idx else None
        if g is None:
            pieces.append(np.zeros(tape.nodes[slot].value.size, dtype=np.float64))
        else:
            pieces.append(np.asarray(g, dtype=np.float64).ravel())
    return np.concatenate(pieces) if pieces else np.zeros(0)


# ---------------------------------------------------------------------------
# Q-network


@dataclass(frozen=True)
class QNetworkSpec:
    """Architecture of the convolutional Q-network.

    ``input_shape`` is (channels, height, width) where channels already
    include the stacked frames.  Convolutions are valid (unpadded) with a
    shared kernel size and stride; relu follows every conv and hidden
    layer; the head is linear.
    """

    input_shape: tuple[int, int, int]
    conv_channels: tuple[int, ...] = (8, 16)
    kernel_size: int = 3
    stride: int = 2
    hidden_sizes: tuple[int, ...] = (64,)
    num_actions: int = 4

    def __post_init__(self):
        if self.num_actions < 2:
            raise StructuralError("at least 2 actions required")
        if self.kernel_size < 1 or self.stride < 1:
            raise StructuralError("kernel size and stride must be positive")
        c, h, w = self.input_shape
        if c < 1 or h < 1 or w < 1:
            raise StructuralError(f"bad input shape {self.input_shape}")
        for _ in self.conv_channels:
            if h < self.kernel_size or w < self.kernel_size:
                raise StructuralError(
                    f"input {self.input_shape} too small for {len(self.conv_channels)} "
                    f"conv layers of size {self.kernel_size}/{self.stride}"
                )
            h = (h - self.kernel_size) // self.stride + 1
            w = (w - self.kernel_size) // self.stride + 1

    def conv_output_shape(self) -> tuple[int, int, int]:
        c, h, w = self.input_shape
        for out_c in self.conv_channels:
            h = (h - self.kernel_size) // self.stride + 1
            w = (w - self.kernel_size) // self.stride + 1
            c = out_c
        return c, h, w

    def layer_order(self) -> Iterator[tuple[str, tuple[int, ...]]]:
        """Yield (name, shape) for every parameter tensor, in flatten order."""
        in_c = self.input_shape[0]
        for i, out_c in enumerate(self.conv_channels):
            yield f"conv{i}.kernel", (out_c, in_c, self.kernel_size, self.kernel_size)
            yield f"conv{i}.bias", (out_c,)
            in_c = out_c
        c, h, w = self.conv_output_shape()
        width = c * h * w
        for i, hidden in enumerate(self.hidden_sizes):
            yield f"dense{i}.weight", (width, hidden)
            yield f"dense{i}.bias", (hidden,)
            width = hidden
        yield "head.weight", (width, self.num_actions)
        yield "head.bias", (self.num_actions,)

    def param_count(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.layer_order())

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "conv_channels": list(self.conv_channels),
            "kernel_size": self.kernel_size,
            "stride": self.stride,
            "hidden_sizes": list(self.hidden_sizes),
            "num_actions": self.num_actions,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QNetworkSpec":
        return cls(
            input_shape=tuple(d["input_shape"]),
            conv_channels=tuple(d["conv_channels"]),
            kernel_size=int(d["kernel_size"]),
            stride=int(d["stride"]),
            hidden_sizes=tuple(d["hidden_sizes"]),
            num_actions=int(d["num_actions"]),
        )

    def spec_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


FLATTEN_ORDER_VERSION = 1


class ParamSet:
    """Named parameter tensors with a fixed flattening order."""

    def __init__(self, names: Sequence[str], arrays: Sequence[np.ndarray]):
        if len(names) != len(arrays):
            raise StructuralError("names/arrays length mismatch")
        self.names = list(names)
        self.arrays = [np.asarray(a) for a in arrays]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[self.names.index(name)]

    @property
    def dtype(self):
        return self.arrays[0].dtype

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays)

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays])

    def unflatten(self, flat: np.ndarray) -> "ParamSet":
        flat = np.asarray(flat)
        if flat.shape != (self.size,):
            raise StructuralError(f"flat vector length {flat.shape} != {self.size}")
        out, offset = [], 0
        for a in self.arrays:
            out.append(flat[offset : offset + a.size].reshape(a.shape).astype(a.dtype, copy=False))
            offset += a.size
        return ParamSet(self.names, out)

    def astype(self, dtype) -> "ParamSet":
        return ParamSet(self.names, [a.astype(dtype) for a in self.arrays])

    def copy(self) -> "ParamSet":
        return ParamSet(self.names, [a.copy() for a in self.arrays])


def init_params(spec: QNetworkSpec, seed: int, dtype=np.float32) -> ParamSet:
    """Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)] per layer.

    Each weight tensor precedes its bias in the flatten order, and the
    bias reuses the weight's fan-in bound.
    """
    rng = np.random.default_rng(seed)
    names, arrays = [], []
    bound = 1.0
    for name, shape in spec.layer_order():
        if not name.endswith(".bias"):
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            bound = 1.0 / np.sqrt(fan_in)
        names.append(name)
        arrays.append(rng.uniform(-bound, bound, size=shape).astype(dtype))
    return ParamSet(names, arrays)


def q_forward(spec: QNetworkSpec, params: ParamSet, obs_batch: np.ndarray) -> tuple[Var, Tape]:
    """Forward pass; returns the (B, num_actions) Q-value Var and its tape."""
    obs_batch = np.asarray(obs_batch)
    if obs_batch.ndim != 4 or obs_batch.shape[1:] != spec.input_shape:
        raise StructuralError(
            f"observation batch shape {obs_batch.shape} != (B, {spec.input_shape})"
        )
    tape = Tape()
    leaves = {name: tape.param_leaf(arr) for name, arr in zip(params.names, params.arrays)}
    x = tape.leaf(obs_batch.astype(params.dtype, copy=False))
    for i in range(len(spec.conv_channels)):
        x = relu(conv2d(x, leaves[f"conv{i}.kernel"], leaves[f"conv{i}.bias"], spec.stride))
    x = flatten_batch(x)
    for i in range(len(spec.hidden_sizes)):
        x = relu(affine(x, leaves[f"dense{i}.weight"], leaves[f"dense{i}.bias"]))
    q = affine(x, leaves["head.weight"], leaves["head.bias"])
    return q, tape


def q_values(spec: QNetworkSpec, params: ParamSet, obs_batch: np.ndarray) -> np.ndarray:
    """Tape-free forward pass for inference-only call sites.

    Produces the same floating-point result as ``q_forward(...).value``
    (identical primitive order and arithmetic), without recording.
    """
    obs_batch = np.asarray(obs_batch)
    if obs_batch.ndim != 4 or obs_batch.shape[1:] != spec.input_shape:
        raise StructuralError(
            f"observation batch shape {obs_batch.shape} != (B, {spec.input_shape})"
        )
    x = obs_batch.astype(params.dtype, copy=False)
    k, stride = spec.kernel_size, spec.stride
    for i in range(len(spec.conv_channels)):
        kernel = params[f"conv{i}.kernel"]
        cols, oh, ow = _im2col(x, k, stride)
        out = cols @ _kernel_matrix(kernel) + params[f"conv{i}.bias"]
        x = np.maximum(out.reshape(x.shape[0], oh, ow, kernel.shape[0]).transpose(0, 3, 1, 2), 0)
    x = x.reshape(x.shape[0], -1)
    for i in range(len(spec.hidden_sizes)):
        x = np.maximum(x @ params[f"dense{i}.weight"] + params[f"dense{i}.bias"], 0)
    return x @ params["head.weight"] + params["head.bias"]


def critic_loss(q_values: Var, actions: np.ndarray, targets: np.ndarray) -> Var:
    """Mean squared error of the action-selected Q-values against targets."""
    return mse_against(select_actions(q_values, actions), targets)


def finite_diff_grad(loss_fn, params: ParamSet, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient oracle, one coordinate at a time."""
    if h <= 0:
        raise StructuralError("step size must be positive")
    flat = params.flatten().astype(np.float64)
    grad = np.zeros_like(flat)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + h
        up = float(loss_fn(params.unflatten(flat)))
        flat[j] = orig - h
        down = float(loss_fn(params.unflatten(flat)))
        flat[j] = orig
        grad[j] = (up - down) / (2.0 * h)
    return grad


# ---------------------------------------------------------------------------
# checkpoint container

_MAGIC = b"CG2A-CKPT\n"


def save_checkpoint(path, spec: QNetworkSpec, params: ParamSet, extra_arrays: dict | None = None,
                    meta: dict | None = None):
    """Binary checkpoint: magic, one JSON header line, raw little-endian data.

    The header records the spec, its hash and the flattening-order
    version so a loader can refuse incompatible files.  ``extra_arrays``
    lets callers persist optimizer state alongside the parameters.
    """
    arrays = {"params": params.flatten()}
    arrays.update(extra_arrays or {})
    header = {
        "format": "cg2a-checkpoint",
        "version": 1,
        "flatten_order_version": FLATTEN_ORDER_VERSION,
        "spec": spec.to_dict(),
        "spec_hash": spec.spec_hash(),
        "meta": meta or {},
        "arrays": [
            {"name": k, "dtype": str(v.dtype), "size": int(v.size)} for k, v in arrays.items()
        ],
    }
    payload = _MAGIC + (json.dumps(header, sort_keys=True) + "\n").encode()
    for v in arrays.values():
        payload += np.ascontiguousarray(v).astype(v.dtype.newbyteorder("<")).tobytes()
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[QNetworkSpec, ParamSet, dict, dict]:
    """Load a checkpoint; returns (spec, params, extra_arrays, meta)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(_MAGIC):
        raise StructuralError(f"{path} is not a checkpoint file")
    body = blob[len(_MAGIC):]
    newline = body.index(b"\n")
    header = json.loads(body[:newline].decode())
    if header.get("flatten_order_version") != FLATTEN_ORDER_VERSION:
        raise StructuralError("checkpoint uses an unsupported flattening order")
    spec = QNetworkSpec.from_dict(header["spec"])
    if spec.spec_hash() != header["spec_hash"]:
        raise StructuralError("checkpoint spec hash mismatch")
    raw = body[newline + 1:]
    arrays, offset = {}, 0
    for entry in header["arrays"]:
        dt = np.dtype(entry["dtype"]).newbyteorder("<")
        nbytes = dt.itemsize * entry["size"]
        arrays[entry["name"]] = np.frombuffer(raw[offset : offset + nbytes], dtype=dt).astype(
            entry["dtype"]
        )
        offset += nbytes
    flat = arrays.pop("params")
    template = init_params(spec, seed=0, dtype=flat.dtype)
    if flat.size != template.size:
        raise StructuralError("checkpoint parameter count mismatch")
    return spec, template.unflatten(flat), arrays, header.get("meta", {})
