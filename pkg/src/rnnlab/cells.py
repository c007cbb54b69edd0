"""Recurrent cells recorded on the numerics tape: RWA, RDA, LSTM and GRU.

Weights follow the row-vector convention ``y = x @ W + b`` with ``W`` of
shape ``[fan_in, fan_out]``.  Matrices acting on the concatenation
``[x_t, h_{t-1}]`` are stored whole (``[(input_dim + hidden_dim), hidden_dim]``)
and split into their input rows and recurrent rows when a sequence is
prepared, so the input contribution of a whole sequence is one matmul.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from .numerics import Node, ShapeError, Tape, ops, xavier_init

EPS_DIV = 1e-8
EXP_PREACT_LIMIT = 50.0
CLAMP_COUNTER = "attention_clamp"


class AttentionKind(enum.Enum):
    EXP = "exp"
    RELU = "relu"
    SOFTPLUS = "softplus"
    SIGMOID = "sigmoid"


class HiddenKind(enum.Enum):
    TANH = "tanh"
    IDENTITY = "identity"


class OutputKind(enum.Enum):
    IDENTITY = "identity"
    TANH = "tanh"


def attention_fn(kind: AttentionKind, x: Node) -> Node:
    """Non-negative, non-decreasing attention of a pre-activation.

    Exponential attention clamps its pre-activation at ``EXP_PREACT_LIMIT``
    and counts clamped entries in ``tape.counters[CLAMP_COUNTER]``.
    """
    if kind is AttentionKind.EXP:
        return ops.exp_clamped(x, EXP_PREACT_LIMIT, CLAMP_COUNTER)
    if kind is AttentionKind.RELU:
        return ops.relu(x)
    if kind is AttentionKind.SOFTPLUS:
        return ops.softplus(x)
    if kind is AttentionKind.SIGMOID:
        return ops.sigmoid(x)
    raise ValueError(f"unknown attention kind {kind!r}")


def _hidden_fn(kind: HiddenKind, x: Node) -> Node:
    return ops.tanh(x) if kind is HiddenKind.TANH else x


def _output_fn(kind: OutputKind, x: Node) -> Node:
    return ops.tanh(x) if kind is OutputKind.TANH else x


@dataclass(frozen=True)
class CellSpec:
    """Which cell, and for RDA which attention/hidden/output functions."""

    kind: str
    attention: AttentionKind = AttentionKind.EXP
    hidden: HiddenKind = HiddenKind.TANH
    output: OutputKind = OutputKind.IDENTITY
    gamma_max: float | None = None  # RDA only: cap on the discount, for probes

    def __post_init__(self):
        if self.kind not in ("rwa", "rda", "lstm", "gru"):
            raise ValueError(f"unknown cell kind {self.kind!r}")
        if self.gamma_max is not None and not 0.0 < self.gamma_max <= 1.0:
            raise ValueError(f"gamma_max must lie in (0, 1], got {self.gamma_max}")

    @property
    def name(self) -> str:
        for key, spec in PRESETS.items():
            if spec == self:
                return key
        return f"{self.kind}-{self.attention.value}-{self.hidden.value}-{self.output.value}"


PRESETS = {
    "rwa": CellSpec("rwa"),
    "rda-exp-tanh": CellSpec("rda", AttentionKind.EXP, HiddenKind.IDENTITY, OutputKind.TANH),
    "rda-sigmoid-id": CellSpec("rda", AttentionKind.SIGMOID, HiddenKind.IDENTITY, OutputKind.IDENTITY),
    "lstm": CellSpec("lstm"),
    "gru": CellSpec("gru"),
}


def cell_spec(name: str) -> CellSpec:
    """Look up a preset, or parse ``rda-<attention>-<hidden>-<output>``."""
    key = name.lower()
    if key in PRESETS:
        return PRESETS[key]
    parts = key.split("-")
    if len(parts) == 4 and parts[0] == "rda":
        try:
            return CellSpec("rda", AttentionKind(parts[1]), HiddenKind(parts[2]), OutputKind(parts[3]))
        except ValueError:
            pass
    raise ValueError(f"unknown cell {name!r}; expected one of {sorted(PRESETS)} "
                     "or rda-<exp|relu|softplus|sigmoid>-<tanh|identity>-<identity|tanh>")


# Gate matrices over [x, h] per cell family, and the biases initialised to 1.
_GATES = {
    "rwa": ("g", "a"),
    "rda": ("g", "a", "gamma"),
    "lstm": ("i", "f", "o", "c"),
    "gru": ("z", "r", "c"),
}
_UNIT_BIAS = {"rda": ("gamma",), "lstm": ("f",)}


def init_params(spec: CellSpec, input_dim: int, hidden_dim: int,
                rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Xavier weights, zero biases except discount/forget biases at 1, ``h0`` at 0."""
    if input_dim < 1 or hidden_dim < 1:
        raise ValueError(f"dims must be positive, got input_dim={input_dim}, hidden_dim={hidden_dim}")
    params: dict[str, np.ndarray] = {}
    if spec.kind in ("rwa", "rda"):
        params["W_u"] = xavier_init(input_dim, hidden_dim, rng)
        params["b_u"] = np.zeros(hidden_dim)
    for gate in _GATES[spec.kind]:
        params[f"W_{gate}"] = xavier_init(input_dim + hidden_dim, hidden_dim, rng)
        unit = gate in _UNIT_BIAS.get(spec.kind, ())
        params[f"b_{gate}"] = np.ones(hidden_dim) if unit else np.zeros(hidden_dim)
    params["h0"] = np.zeros(hidden_dim)
    return params


@dataclass
class RecurrentState:
    """Per-sequence carried state; unused fields stay ``None``.

    ``z``, ``a`` and ``gamma`` hold the last step's features, attention and
    discount for diagnostics only; they are never carried into the next step.
    """

    h: Node
    n: Node | None = None
    d: Node | None = None
    c: Node | None = None
    z: Node | None = None
    a: Node | None = None
    gamma: Node | None = None

    def values(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k).value for k in ("h", "n", "d", "c") if getattr(self, k) is not None}


def initial_state(spec: CellSpec, params: dict[str, Node], batch: int) -> RecurrentState:
    """``n = d = 0`` (and ``c = 0``); ``h`` is the ``h0`` parameter broadcast over the batch."""
    tape = params["h0"].tape
    hidden = params["h0"].shape[0]
    zeros = np.zeros((batch, hidden))
    h = ops.add(tape.constant(zeros), params["h0"])
    if spec.kind in ("rwa", "rda"):
        return RecurrentState(h=h, n=tape.constant(zeros), d=tape.constant(zeros))
    if spec.kind == "lstm":
        return RecurrentState(h=h, c=tape.constant(zeros))
    return RecurrentState(h=h)


def state_from_values(tape: Tape, values: dict[str, np.ndarray]) -> RecurrentState:
    """Rebuild a carried state as constants on ``tape`` (no gradient flows back)."""
    return RecurrentState(**{k: tape.constant(v) for k, v in values.items()})


def bind_params(tape: Tape, params: dict[str, np.ndarray], prefix: str = "",
                trainable: bool = True) -> dict[str, Node]:
    """Register arrays as named leaves (``prefix + name``) and return nodes keyed by bare name."""
    if trainable:
        return {k: tape.param(prefix + k, v) for k, v in params.items()}
    return {k: tape.input(prefix + k, v) for k, v in params.items()}


class Prepared:
    """Weights rearranged for one sequence: input rows fused, recurrent rows fused."""

    def __init__(self, spec: CellSpec, params: dict[str, Node]):
        self.spec = spec
        self.params = params
        hidden = params["h0"].shape[0]
        gates = _GATES[spec.kind]
        first = params[f"W_{gates[0]}"]
        self.input_dim = first.shape[0] - hidden
        self.hidden_dim = hidden
        inp, rec, bias = [], [], []
        if spec.kind in ("rwa", "rda"):
            inp.append(params["W_u"])
            bias.append(params["b_u"])
        for gate in gates:
            w = params[f"W_{gate}"]
            inp.append(ops.rows(w, 0, self.input_dim))
            bias.append(params[f"b_{gate}"])
            rec.append(ops.rows(w, self.input_dim, self.input_dim + hidden))
        if spec.kind == "gru":
            # the candidate's recurrent rows act on r*h, so keep them apart
            self.w_rec = ops.concat(rec[:2], axis=1)
            self.w_cand = rec[2]
        else:
            self.w_rec = ops.concat(rec, axis=1)
        self.w_in = ops.concat(inp, axis=1)
        self.b_in = ops.concat(bias, axis=0)

    def project(self, x: Node) -> Node:
        """Input contribution ``x @ W_in + b`` for one step or a whole sequence."""
        if x.shape[-1] != self.input_dim:
            raise ShapeError(f"cell expects input dim {self.input_dim}, got dims {list(x.shape)}")
        return ops.matmul(x, self.w_in) + self.b_in

    def step(self, state: RecurrentState, xp: Node) -> tuple[Node, RecurrentState]:
        kind = self.spec.kind
        if kind == "rwa":
            return self._attention_step(state, xp, discount=False)
        if kind == "rda":
            return self._attention_step(state, xp, discount=True)
        if kind == "lstm":
            return self._lstm_step(state, xp)
        return self._gru_step(state, xp)

    def _attention_step(self, state, xp, discount):
        H = self.hidden_dim
        spec = self.spec
        u = ops.slice_last(xp, 0, H)
        pre = ops.slice_last(xp, H, xp.shape[-1]) + ops.matmul(state.h, self.w_rec)
        z = u * ops.tanh(ops.slice_last(pre, 0, H))
        a = attention_fn(spec.attention, ops.slice_last(pre, H, 2 * H))
        if discount:
            gamma = ops.sigmoid(ops.slice_last(pre, 2 * H, 3 * H))
            if spec.gamma_max is not None:
                gamma = ops.cap(gamma, spec.gamma_max)
            n = ops.muladd(state.n, gamma, z, a)
            d = state.d * gamma + a
        else:
            gamma = None
            n = state.n + z * a
            d = state.d + a
        h = _hidden_fn(spec.hidden, ops.div(n, d, eps=EPS_DIV))
        return _output_fn(spec.output, h), RecurrentState(h=h, n=n, d=d, z=z, a=a, gamma=gamma)

    def _lstm_step(self, state, xp):
        H = self.hidden_dim
        pre = xp + ops.matmul(state.h, self.w_rec)
        i = ops.sigmoid(ops.slice_last(pre, 0, H))
        f = ops.sigmoid(ops.slice_last(pre, H, 2 * H))
        o = ops.sigmoid(ops.slice_last(pre, 2 * H, 3 * H))
        cand = ops.tanh(ops.slice_last(pre, 3 * H, 4 * H))
        c = ops.muladd(f, state.c, i, cand)
        h = o * ops.tanh(c)
        return h, RecurrentState(h=h, c=c)

    def _gru_step(self, state, xp):
        H = self.hidden_dim
        zr = ops.slice_last(xp, 0, 2 * H) + ops.matmul(state.h, self.w_rec)
        z = ops.sigmoid(ops.slice_last(zr, 0, H))
        r = ops.sigmoid(ops.slice_last(zr, H, 2 * H))
        cand = ops.tanh(ops.slice_last(xp, 2 * H, 3 * H) + ops.matmul(r * state.h, self.w_cand))
        h = ops.muladd(1.0 - z, state.h, z, cand)
        return h, RecurrentState(h=h)


def _single_step(spec, params, state, x):
    prep = Prepared(spec, params)
    return prep.step(state, prep.project(x))


def rwa_step(params: dict[str, Node], state: RecurrentState, x: Node) -> tuple[Node, RecurrentState]:
    """One Recurrent Weighted Average step (exp attention, tanh hidden, identity output)."""
    return _single_step(PRESETS["rwa"], params, state, x)


def rda_step(params: dict[str, Node], state: RecurrentState, x: Node,
             kinds: tuple[AttentionKind, HiddenKind, OutputKind]) -> tuple[Node, RecurrentState]:
    """One Recurrent Discounted Attention step with the given ``(f_a, f_h, f_o)``."""
    attention, hidden, output = kinds
    return _single_step(CellSpec("rda", attention, hidden, output), params, state, x)


def lstm_step(params, state, x):
    return _single_step(PRESETS["lstm"], params, state, x)


def gru_step(params, state, x):
    return _single_step(PRESETS["gru"], params, state, x)


def unroll(spec: CellSpec, params: dict[str, Node], xs: Node, state: RecurrentState | None = None,
           trace: list | None = None, fused: bool = False) -> tuple[Node, RecurrentState]:
    """Run the cell over ``xs [batch, time, input]``.

    Returns outputs ``[batch, time, hidden]`` and the final state.  When
    ``trace`` is a list, each step's state is appended to it.  ``fused``
    records the recurrence as one op (see :mod:`rnnlab.kernels`); its final
    state is returned as constants, detached from the tape, and tracing
    falls back to the per-step path.
    """
    if xs.value.ndim != 3 or xs.shape[1] < 1:
        raise ShapeError(f"unroll expects inputs [batch, time>=1, features], got dims {list(xs.shape)}")
    prep = Prepared(spec, params)
    if state is None:
        state = initial_state(spec, params, xs.shape[0])
    xp_all = prep.project(xs)
    if fused and trace is None:
        out, final, _ = kernels.run_sequence(prep, xp_all, state, EPS_DIV, EXP_PREACT_LIMIT, CLAMP_COUNTER)
        return out, state_from_values(xs.tape, final)
    outputs = []
    for t in range(xs.shape[1]):
        try:
            out, state = prep.step(state, ops.step(xp_all, t))
        except (ShapeError, FloatingPointError) as exc:
            raise type(exc)(f"timestep {t}: {exc}") from exc
        outputs.append(out)
        if trace is not None:
            trace.append(state)
    return ops.stack_time(outputs), replace(state, z=None, a=None, gamma=None)


@dataclass
class Cell:
    """Convenience bundle of a spec and its dims."""

    spec: CellSpec
    input_dim: int
    hidden_dim: int

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        return init_params(self.spec, self.input_dim, self.hidden_dim, rng)

    def unroll(self, params, xs, state=None, trace=None, fused=False):
        return unroll(self.spec, params, xs, state, trace, fused)
