"""Minimal dense network stack with hand-written reverse mode.

Float64 throughout; no autodiff graph, just affine layers with identity or
leaky-ReLU activations, a forward tape, exact backward, ascent-convention
Adam/SGD, and a versioned binary checkpoint container.

Networks mutate only through ``assign_params``; forward/backward on a
snapshot are pure and safe to run concurrently across replicates.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .rng import make_rng

__all__ = [
    "DenseNetwork",
    "Tape",
    "SgdState",
    "AdamState",
    "optimizer_step",
    "accumulate_gradients",
    "flatten_gradients",
    "CheckpointError",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_summary",
    "CHECKPOINT_MAGIC",
    "CHECKPOINT_VERSION",
]

_ACTIVATIONS = ("identity", "leaky_relu")


@dataclass
class Tape:
    """Forward cache: per-layer inputs and pre-activations."""

    net_version: int
    inputs: list
    pre: list
    squeeze: bool


class DenseNetwork:
    """Stack of affine layers, each with an activation tag.

    Weights are (out, in); inputs are (n, in) rows or a single (in,) vector.
    """

    def __init__(self, weights, biases, activations, slope: float = 0.3):
        if not (len(weights) == len(biases) == len(activations)):
            raise ValueError("one weight, bias and activation per layer")
        if not weights:
            raise ValueError("a network needs at least one layer")
        for i, (w, b, act) in enumerate(zip(weights, biases, activations)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {i}: weight must be (out, in) with matching bias")
            if act not in _ACTIVATIONS:
                raise ValueError(f"layer {i}: unknown activation {act!r}")
            if i > 0 and w.shape[1] != weights[i - 1].shape[0]:
                raise ValueError(f"layer {i}: input dim {w.shape[1]} does not compose")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i}: parameters must be finite")
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        self.activations = list(activations)
        self.slope = float(slope)
        self._version = 0

    @classmethod
    def create(
        cls,
        dims,
        rng_or_seed,
        hidden_activation: str = "leaky_relu",
        output_activation: str = "identity",
        slope: float = 0.3,
    ) -> "DenseNetwork":
        """Fan-in-scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero biases."""
        rng = rng_or_seed if isinstance(rng_or_seed, np.random.Generator) else make_rng(rng_or_seed)
        if len(dims) < 2:
            raise ValueError("need at least an input and an output dimension")
        weights, biases, acts = [], [], []
        for i in range(len(dims) - 1):
            fan_in = dims[i]
            scale = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-scale, scale, size=(dims[i + 1], fan_in)))
            biases.append(np.zeros(dims[i + 1]))
            acts.append(output_activation if i == len(dims) - 2 else hidden_activation)
        return cls(weights, biases, acts, slope=slope)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def _activate(self, z, act):
        if act == "identity":
            return z
        return np.where(z >= 0.0, z, self.slope * z)

    def _activate_grad(self, z, act):
        if act == "identity":
            return 1.0
        return np.where(z >= 0.0, 1.0, self.slope)

    def forward(self, x):
        """Composed affine+activation maps; returns (output, tape)."""
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[1] != self.input_dim:
            raise ValueError(f"input dim {x.shape[1]} does not match network {self.input_dim}")
        inputs, pre = [], []
        h = x
        for w, b, act in zip(self.weights, self.biases, self.activations):
            inputs.append(h)
            z = h @ w.T + b
            pre.append(z)
            h = self._activate(z, act)
        tape = Tape(net_version=self._version, inputs=inputs, pre=pre, squeeze=squeeze)
        return (h[0] if squeeze else h), tape

    def backward(self, tape: Tape, cotangent):
        """Exact reverse mode from an output cotangent.

        Returns ([(dW, db), ...] in layer order, input cotangent). Gradients
        sum over batch rows; divide the cotangent by n for a batch mean.
        Raises if the tape predates a parameter update (stale tape).
        """
        if tape.net_version != self._version:
            raise ValueError("stale tape: parameters changed since this forward pass")
        cot = np.asarray(cotangent, dtype=np.float64)
        if tape.squeeze:
            cot = cot[None, :]
        if cot.shape != (tape.inputs[0].shape[0], self.output_dim):
            raise ValueError("cotangent shape does not match the taped forward output")
        grads = [None] * self.num_layers
        for i in range(self.num_layers - 1, -1, -1):
            dz = cot * self._activate_grad(tape.pre[i], self.activations[i])
            grads[i] = (dz.T @ tape.inputs[i], dz.sum(axis=0))
            cot = dz @ self.weights[i]
        return grads, (cot[0] if tape.squeeze else cot)

    def params(self) -> list:
        """Flat parameter list [W0, b0, W1, b1, ...] (live arrays)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def grads_as_params(self, grads) -> list:
        """Flatten backward() output into params() order."""
        out = []
        for dw, db in grads:
            out.extend((dw, db))
        return out

    def assign_params(self, new_params) -> None:
        """Replace all parameters (invalidates outstanding tapes)."""
        if len(new_params) != 2 * self.num_layers:
            raise ValueError("parameter count mismatch")
        for i in range(self.num_layers):
            w, b = new_params[2 * i], new_params[2 * i + 1]
            if w.shape != self.weights[i].shape or b.shape != self.biases[i].shape:
                raise ValueError(f"layer {i}: shape mismatch in assignment")
            self.weights[i] = np.asarray(w, dtype=np.float64)
            self.biases[i] = np.asarray(b, dtype=np.float64)
        self._version += 1


def accumulate_gradients(acc, grads):
    """Elementwise add two backward() gradient lists (acc may be None)."""
    if acc is None:
        return [(dw.copy(), db.copy()) for dw, db in grads]
    return [(adw + dw, adb + db) for (adw, adb), (dw, db) in zip(acc, grads)]


def flatten_gradients(grads) -> np.ndarray:
    """Concatenate a backward() gradient list into one flat vector."""
    return np.concatenate([g.ravel() for pair in grads for g in pair])


@dataclass
class SgdState:
    """Plain SGD, ascent convention: param += lr * grad."""

    lr: float


@dataclass
class AdamState:
    """Adam with bias correction, ascent convention.

    Moment buffers are allocated lazily to match the first gradient shapes.
    """

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def optimizer_step(state, params, grads) -> list:
    """One ascent update; returns new parameter arrays (inputs untouched).

    The sign convention maximizes the objective (these are lower bounds),
    so callers hand in raw bound gradients.
    """
    if len(params) != len(grads):
        raise ValueError("one gradient per parameter")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
    if isinstance(state, SgdState):
        return [p + state.lr * g for p, g in zip(params, grads)]
    if isinstance(state, AdamState):
        if not state.m:
            state.m = [np.zeros_like(p) for p in params]
            state.v = [np.zeros_like(p) for p in params]
        state.step += 1
        t = state.step
        c1 = 1.0 - state.beta1**t
        c2 = 1.0 - state.beta2**t
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
            state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
            m_hat = state.m[i] / c1
            v_hat = state.v[i] / c2
            out.append(p + state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
        return out
    raise TypeError(f"unknown optimizer state {type(state).__name__}")


# ---------------------------------------------------------------------------
# Checkpoint container: magic, version, shape table, float64 LE payload, CRC32.

CHECKPOINT_MAGIC = b"BNETCKP1"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed, truncated or corrupted checkpoint file."""


def save_checkpoint(path, entries) -> None:
    """Write named float64 arrays: [(name, array), ...], order preserved."""
    header = bytearray()
    header += CHECKPOINT_MAGIC
    header += CHECKPOINT_VERSION.to_bytes(4, "little")
    header += len(entries).to_bytes(4, "little")
    payload = bytearray()
    for name, array in entries:
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise CheckpointError(f"entry name too long: {name!r}")
        array = np.ascontiguousarray(array, dtype=np.float64)
        header += len(raw_name).to_bytes(2, "little")
        header += raw_name
        header += array.ndim.to_bytes(1, "little")
        for d in array.shape:
            header += int(d).to_bytes(4, "little")
        payload += array.astype("<f8").tobytes()
    checksum = zlib.crc32(bytes(payload))
    with open(path, "wb") as fh:
        fh.write(bytes(header))
        fh.write(bytes(payload))
        fh.write(checksum.to_bytes(4, "little"))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint (byte offset {self.pos})")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out


def _read_header(reader: _Reader):
    magic = reader.take(8)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"wrong magic {magic!r}")
    version = int.from_bytes(reader.take(4), "little")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    count = int.from_bytes(reader.take(4), "little")
    shapes = []
    for _ in range(count):
        name_len = int.from_bytes(reader.take(2), "little")
        name = reader.take(name_len).decode("utf-8")
        ndim = int.from_bytes(reader.take(1), "little")
        shape = tuple(int.from_bytes(reader.take(4), "little") for _ in range(ndim))
        shapes.append((name, shape))
    return version, shapes


def load_checkpoint(path) -> list:
    """Read back [(name, array), ...]; verifies the trailing payload checksum."""
    with open(path, "rb") as fh:
        reader = _Reader(fh.read())
    _, shapes = _read_header(reader)
    payload_len = sum(int(np.prod(shape, dtype=np.int64)) * 8 for _, shape in shapes)
    payload = reader.take(payload_len)
    checksum = int.from_bytes(reader.take(4), "little")
    if zlib.crc32(payload) != checksum:
        raise CheckpointError("payload checksum mismatch")
    entries = []
    offset = 0
    for name, shape in shapes:
        n = int(np.prod(shape, dtype=np.int64))
        array = np.frombuffer(payload, dtype="<f8", count=n, offset=offset).reshape(shape)
        entries.append((name, array.astype(np.float64)))
        offset += n * 8
    return entries


def checkpoint_summary(path) -> dict:
    """Metadata only: version, entry shape table, checksum status."""
    with open(path, "rb") as fh:
        reader = _Reader(fh.read())
    version, shapes = _read_header(reader)
    payload_len = sum(int(np.prod(shape, dtype=np.int64)) * 8 for _, shape in shapes)
    checksum_ok = True
    try:
        payload = reader.take(payload_len)
        checksum = int.from_bytes(reader.take(4), "little")
        checksum_ok = zlib.crc32(payload) == checksum
    except CheckpointError:
        checksum_ok = False
    return {
        "version": version,
        "entries": [(name, shape) for name, shape in shapes],
        "parameters": sum(int(np.prod(s, dtype=np.int64)) for _, s in shapes),
        "checksum_ok": checksum_ok,
    }
