"""Function approximators with hand-written backward passes.

Four kinds share one interface: ``tabular``, ``linear``, ``mlp`` (tanh hidden
layers, linear output) and ``recurrent`` (an LSTM cell followed by a linear
readout). Parameters for every head live in one flat :class:`ParamVector`;
an approximator only knows its head name and reads its tensors as views.

Inputs may carry any number of leading batch dimensions. Backward passes sum
the parameter gradient over the batch.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

from .errors import RejectedInputError, UsageError

KINDS = ("tabular", "linear", "mlp", "recurrent")


@dataclass(frozen=True)
class Segment:
    head: str
    tensor: str
    start: int
    stop: int
    shape: tuple[int, ...]


class ParamVector:
    """Flat float64 parameter storage split into named, contiguous segments."""

    def __init__(self, segments: Sequence[Segment], values: np.ndarray | None = None):
        self.segments = list(segments)
        self.layout = {(s.head, s.tensor): s for s in self.segments}
        if len(self.layout) != len(self.segments):
            raise RejectedInputError("duplicate segment names")
        expected = 0
        for s in self.segments:
            if s.start != expected or s.stop - s.start != int(np.prod(s.shape, dtype=int)):
                raise RejectedInputError(f"segment {s.head}/{s.tensor} is not contiguous")
            expected = s.stop
        if values is None:
            values = np.zeros(expected)
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (expected,):
            raise RejectedInputError(f"expected {expected} values, got shape {values.shape}")
        self.values = values

    @classmethod
    def build(cls, entries: Iterable[tuple[str, str, tuple[int, ...]]]) -> "ParamVector":
        segments, offset = [], 0
        for head, tensor, shape in entries:
            n = int(np.prod(shape, dtype=int))
            segments.append(Segment(head, tensor, offset, offset + n, tuple(shape)))
            offset += n
        return cls(segments)

    def __len__(self) -> int:
        return self.values.size

    def get(self, head: str, tensor: str) -> np.ndarray:
        s = self.layout[(head, tensor)]
        return self.values[s.start:s.stop].reshape(s.shape)

    def heads(self) -> list[str]:
        return list(dict.fromkeys(s.head for s in self.segments))

    def head_slice(self, head: str) -> slice:
        segs = [s for s in self.segments if s.head == head]
        if not segs:
            raise KeyError(head)
        return slice(segs[0].start, segs[-1].stop)

    def zeros_like(self) -> "ParamVector":
        return ParamVector(self.segments)

    def copy(self) -> "ParamVector":
        return ParamVector(self.segments, self.values.copy())

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(self.segments, values)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.segments == other.segments and np.array_equal(self.values, other.values)


class HiddenState(NamedTuple):
    h: np.ndarray
    c: np.ndarray


@dataclass
class Tape:
    """Record of forward calls, consumed by :meth:`Approximator.backward`.

    For the recurrent kind the recorded calls must form one chain: each step's
    incoming hidden state is the previous step's outgoing one.
    """

    approx: "Approximator"
    steps: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.steps)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass(frozen=True)
class Approximator:
    kind: str
    in_dim: int
    out_dim: int
    head: str
    hidden: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise RejectedInputError(f"unknown approximator kind {self.kind!r}")
        if self.in_dim < 1 or self.out_dim < 1:
            raise RejectedInputError("dimensions must be positive")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.kind == "recurrent" and len(self.hidden) != 1:
            raise RejectedInputError("recurrent approximator needs exactly one hidden size")
        if self.kind in ("tabular", "linear") and self.hidden:
            raise RejectedInputError(f"{self.kind} approximator takes no hidden sizes")
        if any(h < 1 for h in self.hidden):
            raise RejectedInputError("hidden sizes must be positive")

    @property
    def recurrent(self) -> bool:
        return self.kind == "recurrent"

    @property
    def units(self) -> int:
        return self.hidden[0] if self.recurrent else 0

    def tensor_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        if self.kind == "tabular":
            return [("table", (self.in_dim, self.out_dim))]
        if self.kind == "linear":
            return [("W", (self.in_dim, self.out_dim)), ("b", (self.out_dim,))]
        if self.kind == "mlp":
            sizes = (self.in_dim, *self.hidden, self.out_dim)
            shapes = []
            for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
                shapes += [(f"W{k}", (a, b)), (f"b{k}", (b,))]
            return shapes
        n = self.units
        return [
            ("Wx", (self.in_dim, 4 * n)),
            ("Wh", (n, 4 * n)),
            ("b", (4 * n,)),
            ("Wy", (n, self.out_dim)),
            ("by", (self.out_dim,)),
        ]

    def param_entries(self):
        return [(self.head, name, shape) for name, shape in self.tensor_shapes()]

    def initialize(self, params: ParamVector, rng: np.random.Generator) -> None:
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, zero table."""
        for name, shape in self.tensor_shapes():
            view = params.get(self.head, name)
            if len(shape) == 1 or self.kind == "tabular":
                view[...] = 0.0
            else:
                limit = 1.0 / np.sqrt(shape[0])
                view[...] = rng.uniform(-limit, limit, size=shape)

    def initial_hidden(self, batch: int | tuple[int, ...] | None = None) -> HiddenState | None:
        if not self.recurrent:
            return None
        lead = () if batch is None else ((batch,) if isinstance(batch, int) else tuple(batch))
        zeros = np.zeros(lead + (self.units,))
        return HiddenState(zeros, zeros.copy())

    def _check_input(self, x, hidden):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 0 or x.shape[-1] != self.in_dim:
            raise RejectedInputError(
                f"{self.head}: expected input dimension {self.in_dim}, got shape {x.shape}")
        if self.recurrent:
            if hidden is None:
                raise RejectedInputError(f"{self.head}: recurrent approximator needs a hidden state")
            want = x.shape[:-1] + (self.units,)
            if hidden.h.shape != want or hidden.c.shape != want:
                raise RejectedInputError(
                    f"{self.head}: hidden state shape {hidden.h.shape} does not match {want}")
        elif hidden is not None:
            raise RejectedInputError(f"{self.head}: non-recurrent approximator takes no hidden state")
        return x

    def forward(self, params: ParamVector, x, hidden: HiddenState | None = None,
                tape: Tape | None = None):
        """Evaluate the approximator; returns ``(output, hidden')``.

        ``hidden'`` is ``None`` for non-recurrent kinds. When ``tape`` is given
        the intermediates needed by :meth:`backward` are appended to it.
        """
        x = self._check_input(x, hidden)
        lead = x.shape[:-1]
        x2 = x.reshape(-1, self.in_dim)
        p = lambda name: params.get(self.head, name)

        if self.kind == "tabular":
            y = x2 @ p("table")
            cache = (x2,)
            new_hidden = None
        elif self.kind == "linear":
            y = x2 @ p("W") + p("b")
            cache = (x2,)
            new_hidden = None
        elif self.kind == "mlp":
            acts = [x2]
            a = x2
            n_layers = len(self.hidden) + 1
            for k in range(n_layers):
                z = a @ p(f"W{k}") + p(f"b{k}")
                a = np.tanh(z) if k < n_layers - 1 else z
                acts.append(a)
            y = a
            cache = (acts,)
            new_hidden = None
        else:
            n = self.units
            h_prev = hidden.h.reshape(-1, n)
            c_prev = hidden.c.reshape(-1, n)
            z = x2 @ p("Wx") + h_prev @ p("Wh") + p("b")
            i = _sigmoid(z[:, :n])
            f = _sigmoid(z[:, n:2 * n])
            o = _sigmoid(z[:, 2 * n:3 * n])
            g = np.tanh(z[:, 3 * n:])
            c = f * c_prev + i * g
            tc = np.tanh(c)
            h = o * tc
            y = h @ p("Wy") + p("by")
            cache = (x2, h_prev, c_prev, i, f, o, g, c, tc, h)
            new_hidden = HiddenState(h.reshape(lead + (n,)), c.reshape(lead + (n,)))

        if tape is not None:
            if tape.approx is not self and tape.approx != self:
                raise UsageError("tape belongs to a different approximator")
            tape.steps.append((lead, cache))
        return y.reshape(lead + (self.out_dim,)), new_hidden

    def new_tape(self) -> Tape:
        return Tape(self)

    def backward(self, params: ParamVector, tape: Tape | None, out_grads) -> ParamVector:
        """Gradient of ``sum_t <output_t, out_grads[t]>`` with respect to the parameters.

        Recurrent tapes are back-propagated through time over every recorded step.
        """
        if tape is None or not tape.steps:
            raise UsageError(f"{self.head}: backward called without a recorded forward pass")
        if len(out_grads) != len(tape.steps):
            raise RejectedInputError(
                f"{self.head}: {len(out_grads)} output gradients for {len(tape.steps)} recorded steps")
        grad = params.zeros_like()
        gp = lambda name: grad.get(self.head, name)
        p = lambda name: params.get(self.head, name)

        dys = []
        for (lead, _), dy in zip(tape.steps, out_grads):
            dy = np.asarray(dy, dtype=np.float64)
            if dy.shape != lead + (self.out_dim,):
                raise RejectedInputError(
                    f"{self.head}: output gradient shape {dy.shape} != {lead + (self.out_dim,)}")
            dys.append(dy.reshape(-1, self.out_dim))

        if self.kind == "tabular":
            for (_, (x2,)), dy in zip(tape.steps, dys):
                gp("table")[...] += x2.T @ dy
        elif self.kind == "linear":
            for (_, (x2,)), dy in zip(tape.steps, dys):
                gp("W")[...] += x2.T @ dy
                gp("b")[...] += dy.sum(axis=0)
        elif self.kind == "mlp":
            n_layers = len(self.hidden) + 1
            for (_, (acts,)), dy in zip(tape.steps, dys):
                delta = dy
                for k in range(n_layers - 1, -1, -1):
                    gp(f"W{k}")[...] += acts[k].T @ delta
                    gp(f"b{k}")[...] += delta.sum(axis=0)
                    if k > 0:
                        delta = (delta @ p(f"W{k}").T) * (1.0 - acts[k] ** 2)
        else:
            n = self.units
            Wh, Wy = p("Wh"), p("Wy")
            dh_next = dc_next = 0.0
            for (_, cache), dy in zip(reversed(tape.steps), reversed(dys)):
                x2, h_prev, c_prev, i, f, o, g, c, tc, h = cache
                gp("Wy")[...] += h.T @ dy
                gp("by")[...] += dy.sum(axis=0)
                dh = dy @ Wy.T + dh_next
                dc = dh * o * (1.0 - tc ** 2) + dc_next
                dz = np.concatenate([
                    dc * g * i * (1.0 - i),
                    dc * c_prev * f * (1.0 - f),
                    dh * tc * o * (1.0 - o),
                    dc * i * (1.0 - g ** 2),
                ], axis=1)
                gp("Wx")[...] += x2.T @ dz
                gp("Wh")[...] += h_prev.T @ dz
                gp("b")[...] += dz.sum(axis=0)
                dh_next = dz @ Wh.T
                dc_next = dc * f
        return grad


def run_sequence(approx: Approximator, params: ParamVector, inputs, tape: Tape | None = None):
    """Feed ``inputs`` through ``approx`` in order, chaining the hidden state.

    Returns the list of outputs. Recurrent kinds start from a zero hidden state.
    """
    outputs = []
    hidden = None
    for x in inputs:
        x = np.asarray(x, dtype=np.float64)
        if approx.recurrent and hidden is None:
            hidden = approx.initial_hidden(x.shape[:-1])
        y, hidden = approx.forward(params, x, hidden, tape=tape)
        outputs.append(y)
    return outputs


def finite_difference_gradient(approx: Approximator, params: ParamVector, inputs,
                               loss: Callable[[list], float], step: float = 1e-5) -> ParamVector:
    """Central-difference gradient of ``loss(run_sequence(...))`` over ``approx``'s parameters.

    Entries belonging to other heads are left at zero.
    """
    if step <= 0:
        raise RejectedInputError("finite-difference step must be positive")
    grad = params.zeros_like()
    work = params.copy()
    sl = params.head_slice(approx.head)
    for k in range(sl.start, sl.stop):
        orig = work.values[k]
        work.values[k] = orig + step
        up = loss(run_sequence(approx, work, inputs))
        work.values[k] = orig - step
        down = loss(run_sequence(approx, work, inputs))
        work.values[k] = orig
        grad.values[k] = (up - down) / (2.0 * step)
    return grad


def relative_error(a, b, floor: float = 1e-8) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


DEFAULT_GRADCHECK_SHAPES = {
    "tabular": dict(in_dim=5, out_dim=3, hidden=()),
    "linear": dict(in_dim=4, out_dim=3, hidden=()),
    "mlp": dict(in_dim=4, out_dim=3, hidden=(6, 5)),
    "recurrent": dict(in_dim=3, out_dim=2, hidden=(4,)),
}


def gradcheck_case(kind: str, rng: np.random.Generator, steps: int = 3, batch: int = 2,
                   fd_step: float = 1e-5) -> float:
    """Max elementwise relative error between backward and finite differences.

    Draws random parameters, a random input sequence and a random smooth loss
    ``sum_t <w_t, y_t> + 0.5 * |y_t|^2``.
    """
    approx = Approximator(kind=kind, head="gc", **DEFAULT_GRADCHECK_SHAPES[kind])
    params = ParamVector.build(approx.param_entries())
    params.values[:] = rng.normal(scale=0.5, size=len(params))
    n_steps = steps if approx.recurrent else 1
    if kind == "tabular":
        idx = rng.integers(approx.in_dim, size=(n_steps, batch))
        inputs = [np.eye(approx.in_dim)[i] for i in idx]
    else:
        inputs = [rng.normal(size=(batch, approx.in_dim)) for _ in range(n_steps)]
    weights = [rng.normal(size=(batch, approx.out_dim)) for _ in range(n_steps)]

    def loss(outputs):
        return float(sum(np.sum(w * y) + 0.5 * np.sum(y * y) for w, y in zip(weights, outputs)))

    tape = approx.new_tape()
    outputs = run_sequence(approx, params, inputs, tape=tape)
    analytic = approx.backward(params, tape, [w + y for w, y in zip(weights, outputs)])
    numeric = finite_difference_gradient(approx, params, inputs, loss, step=fd_step)
    return float(relative_error(analytic.values, numeric.values).max())


_MAGIC = b"MACCKPT1"


def save_checkpoint(path, params: ParamVector, seed: int | None, meta: dict | None = None) -> None:
    """Write the magic, a length-prefixed JSON header, then raw little-endian doubles."""
    header = {
        "seed": seed,
        "size": len(params),
        "segments": [
            {"head": s.head, "tensor": s.tensor, "start": s.start, "stop": s.stop, "shape": list(s.shape)}
            for s in params.segments
        ],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(Path(path), "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(params.values.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[ParamVector, int | None, dict]:
    with open(Path(path), "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise RejectedInputError(f"{path}: not a checkpoint file")
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n))
        data = fh.read()
    values = np.frombuffer(data, dtype="<f8").astype(np.float64)
    if values.size != header["size"]:
        raise RejectedInputError(f"{path}: truncated parameter block")
    segments = [Segment(s["head"], s["tensor"], s["start"], s["stop"], tuple(s["shape"]))
                for s in header["segments"]]
    return ParamVector(segments, values), header["seed"], header["meta"]
