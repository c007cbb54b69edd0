"""Attention-growth probes for running-average cells.

``lemma1_analytic_probe`` works directly in the recurrence of an undiscounted
weighted average: it computes the attention ``a`` that makes the average
``n/d`` switch between the two preimages ``x+`` and ``x-`` of ``+c`` and
``-c`` at every step, and measures how fast the denominator must grow.
``parity_training_probe`` trains a real cell on the alternating target, and
``trace_rollout`` records attention, discount and denominator per step.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import tasks
from .cells import CellSpec, cell_spec, unroll
from .config import RunConfig
from .numerics import Tape


@dataclass
class GeometricGrowthReport:
    """Per-step demand of the alternating-average recurrence.

    Arrays are indexed by step ``t = 1..steps``.  Step 1 is the initial
    condition ``d_1 = 1``, ``n_1 = x+``; from step 2 on, ``a[t]`` is the exact
    attention that moves ``n/d`` to the opposite preimage, or 0 where that
    would need negative attention (``feasible[t]`` is then False and the
    average stays put).  ``ratio[t] = d[t] / d[t-1]``.
    """

    c: float
    x_plus: float
    x_minus: float
    delta: float
    z_max: float
    x_max: float
    bound: float
    z: np.ndarray
    a: np.ndarray
    d: np.ndarray
    n: np.ndarray
    target: np.ndarray
    ratio: np.ndarray
    feasible: np.ndarray
    overflow_step: int | None = None

    @property
    def steps(self) -> int:
        return len(self.d)

    def violations(self, tol: float = 1e-12) -> list[int]:
        """Feasible steps whose growth ratio falls below ``bound - tol``."""
        bad = self.feasible & (self.ratio < self.bound - tol)
        return [int(t) + 1 for t in np.flatnonzero(bad)]

    @property
    def violated(self) -> bool:
        return bool(self.violations())

    def reproduction_error(self) -> float:
        """Largest ``|n/d - target|`` over the feasible steps (and step 1)."""
        ok = self.feasible.copy()
        ok[0] = True
        if not ok.any():
            return 0.0
        return float(np.max(np.abs(self.n[ok] / self.d[ok] - self.target[ok])))

    def growth_floor(self) -> np.ndarray:
        """``log d_1 + k_t * log(bound)`` with ``k_t`` the feasible switches up to step ``t``."""
        k = np.cumsum(self.feasible)
        return math.log(self.d[0]) + k * math.log(self.bound)

    def steps_to_exceed(self, factor: float) -> int | None:
        """First step with ``d_t > factor * d_1``."""
        hit = np.flatnonzero(self.d > factor * self.d[0])
        return int(hit[0]) + 1 if hit.size else None

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("step,a_t,d_t,ratio,bound,feasible\n")
        for t in range(self.steps):
            ratio = "" if t == 0 else repr(float(self.ratio[t]))
            buf.write(f"{t + 1},{float(self.a[t])!r},{float(self.d[t])!r},{ratio},{self.bound!r},"
                      f"{int(self.feasible[t])}\n")
        return buf.getvalue()

    def summary(self) -> str:
        feas = int(self.feasible[1:].sum())
        grown = self.steps_to_exceed(1e3)
        ratios = self.ratio[self.feasible]
        lines = [
            f"c = {self.c!r}",
            f"x_plus = {self.x_plus!r}, x_minus = {self.x_minus!r}, delta = {self.delta!r}",
            f"z_max = {self.z_max!r}, x_max = {self.x_max!r}",
            f"growth bound 1 + |delta|/(z_max + x_max) = {self.bound!r}",
            f"steps = {self.steps}, feasible switches = {feas}, infeasible = {self.steps - 1 - feas}",
            f"min feasible ratio = {float(ratios.min())!r}" if ratios.size else "min feasible ratio = n/a",
            f"final d = {float(self.d[-1])!r}",
            f"first step with d > 1000*d_1 = {grown if grown is not None else 'not reached'}",
            f"bound violations = {len(self.violations())}",
            f"max |n/d - target| = {self.reproduction_error()!r}",
        ]
        if self.overflow_step is not None:
            lines.append(f"denominator overflowed at step {self.overflow_step}; report truncated")
        return "\n".join(lines) + "\n"


def lemma1_analytic_probe(c: float, z_sequence, steps: int | None = None, z_max: float | None = None,
                          f_h_inverse=np.arctanh, orient: bool = False) -> GeometricGrowthReport:
    """Exact attention demand for an average that alternates between ``x+`` and ``x-``.

    ``z_sequence[t]`` is the feature at step ``t + 1`` (entry 0 is unused by the
    recurrence, since step 1 is the initial condition).  ``z_max`` defaults to
    the largest ``|z|`` supplied.  With ``orient=True`` each entry is read as a
    magnitude whose sign points toward the next target, so a constant
    sequence beyond ``x_max`` keeps every switch feasible; the report's ``z``
    then holds the signed values actually used.  Steps whose denominator
    would overflow end the report early with ``overflow_step`` set.
    """
    if not 0.0 < c < 1.0:
        raise ValueError(f"c must lie in (0, 1), got {c}")
    z = np.asarray(z_sequence, dtype=np.float64).ravel()
    steps = len(z) if steps is None else steps
    if steps < 1 or steps > len(z):
        raise ValueError(f"need 1 <= steps <= len(z_sequence) = {len(z)}, got {steps}")
    z = z[:steps].copy()
    if not np.isfinite(z).all():
        raise ValueError("z_sequence must be finite")
    x_plus = float(f_h_inverse(c))
    x_minus = float(f_h_inverse(-c))
    delta = x_plus - x_minus
    x_max = max(abs(x_plus), abs(x_minus))
    zm = float(np.max(np.abs(z))) if z_max is None else float(z_max)
    if np.max(np.abs(z)) > zm:
        raise ValueError(f"|z| exceeds z_max = {zm}")
    bound = 1.0 + abs(delta) / (zm + x_max)

    a = np.zeros(steps)
    d = np.zeros(steps)
    n = np.zeros(steps)
    target = np.zeros(steps)
    ratio = np.ones(steps)
    feasible = np.zeros(steps, dtype=bool)
    a[0] = d[0] = 1.0
    n[0] = x_plus
    target[0] = x_plus
    current = x_plus
    overflow = None
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(1, steps):
            goal = x_minus if current == x_plus else x_plus
            target[t] = goal
            if orient:
                z[t] = math.copysign(abs(z[t]), goal)
            gap = z[t] - goal
            need = d[t - 1] * (goal - current)
            if gap != 0.0 and need / gap > 0.0:
                a_t = need / gap
                a[t] = a_t
                d[t] = d[t - 1] + a_t
                n[t] = n[t - 1] + z[t] * a_t
                feasible[t] = True
                current = goal
            else:
                d[t] = d[t - 1]
                n[t] = n[t - 1]
                target[t] = current
            if not math.isfinite(d[t]) or not math.isfinite(n[t]):
                overflow = t + 1
                keep = t
                a, d, n, target, ratio, feasible, z = (v[:keep] for v in (a, d, n, target, ratio, feasible, z))
                break
            ratio[t] = d[t] / d[t - 1]
    return GeometricGrowthReport(c, x_plus, x_minus, delta, zm, x_max, bound, z, a, d, n, target,
                                 ratio, feasible, overflow)


def feasible_z_sequence(rng: np.random.Generator, steps: int, c: float, z_max: float = 1.0,
                        f_h_inverse=np.arctanh) -> np.ndarray:
    """Random features that always lie beyond the next target, making every switch feasible.

    Magnitudes are uniform on ``(x_max, z_max]``; signs alternate with the
    target, starting from ``x+`` at step 1.
    """
    x_max = max(abs(float(f_h_inverse(c))), abs(float(f_h_inverse(-c))))
    if z_max <= x_max:
        raise ValueError(f"z_max {z_max} must exceed x_max {x_max} for feasible switches")
    mags = z_max - rng.uniform(0.0, z_max - x_max, size=steps)  # in (x_max, z_max]
    signs = np.where(np.arange(steps) % 2 == 1, -1.0, 1.0)
    return signs * mags


# -- rollout tracing ----------------------------------------------------------------------------

@dataclass
class AttentionTrace:
    """Per-step attention ``a``, discount ``gamma`` (RDA) and denominator ``d``, each ``[time, batch, hidden]``."""

    a: np.ndarray | None
    gamma: np.ndarray | None
    d: np.ndarray | None
    n: np.ndarray | None
    h: np.ndarray

    def __len__(self) -> int:
        return self.h.shape[0]


_NON_CELL = ("E", "W_out", "b_out")


def trace_rollout(spec: CellSpec | str, params: dict[str, np.ndarray], inputs) -> AttentionTrace:
    """Forward-only rollout over ``inputs [batch, time, features]`` (or a TaskBatch)."""
    if isinstance(spec, str):
        spec = cell_spec(spec)
    xs = inputs.inputs if isinstance(inputs, tasks.TaskBatch) else np.asarray(inputs, dtype=np.float64)
    tape = Tape()
    nodes = {k: tape.input(k, v) for k, v in params.items() if k not in _NON_CELL}
    states: list = []
    unroll(spec, nodes, tape.input("x", xs), trace=states)

    def stack(attr):
        vals = [getattr(s, attr) for s in states]
        return None if vals[0] is None else np.stack([v.value for v in vals])

    return AttentionTrace(stack("a"), stack("gamma"), stack("d"), stack("n"), stack("h"))


# -- parity training probe -----------------------------------------------------------------------

@dataclass
class ParityProbeSummary:
    cell: str
    seed: int
    c: float
    length: int
    steps: int
    final_mse: float
    steps_to_threshold: int | None
    max_attention: float | None
    clamp_count: int
    status: str
    losses: list[float] = field(default_factory=list, repr=False)

    def text(self) -> str:
        reached = self.steps_to_threshold if self.steps_to_threshold is not None else "not reached"
        att = "n/a" if self.max_attention is None else repr(self.max_attention)
        return (f"cell = {self.cell}\nseed = {self.seed}\nc = {self.c!r}\nlength = {self.length}\n"
                f"steps = {self.steps}\nfinal_mse = {self.final_mse!r}\n"
                f"steps_to_mse_below_0.01 = {reached}\nmax_attention = {att}\n"
                f"attention_clamp_count = {self.clamp_count}\nstatus = {self.status}\n")


def parity_config(cell: str, seed: int = 0, c: float = 0.5, length: int = 100, hidden: int = 32,
                  max_steps: int = 5000, **overrides) -> RunConfig:
    """Desk-scale parity run: every sequence is identical, so a batch of one suffices."""
    base = dict(task="parity", cell=cell, seed=seed, c=c, length=length, hidden=hidden, batch=1,
                val_batch=1, max_steps=max_steps, eval_every=100, stop_metric="", name=f"parity-{cell}")
    base.update(overrides)
    return RunConfig(**base)


def parity_training_probe(cell: str, config: RunConfig | None = None, sink=None) -> ParityProbeSummary:
    """Train ``cell`` to emit ``(-1)^t * c`` and report final MSE and attention magnitudes.

    The final MSE is measured on the (deterministic) alternating sequence
    after the last update.  ``max_attention`` is the largest attention seen in
    a rollout of that final model; clamp counts cover the whole run.
    """
    from .trainer import evaluate_batch, build_model, build_task, steps_to_threshold, train

    config = parity_config(cell) if config is None else config
    if config.task != "parity":
        raise ValueError(f"parity probe needs task parity, got {config.task!r}")
    result = train(config, sink)
    task = build_task(config)
    model = build_model(config, task)
    batch = task.validation()
    mse, _ = evaluate_batch(model, result.params, batch, task.final_only)
    tr = trace_rollout(model.spec, result.params, batch)
    max_att = None if tr.a is None else float(np.max(np.abs(tr.a)))
    crossed = steps_to_threshold(result.train_losses, 0.01, "<", config.smooth_window)
    return ParityProbeSummary(config.cell, config.seed, config.c, config.length, result.summary["steps"],
                              mse, crossed, max_att, result.summary["attention_clamp_count"],
                              result.summary["status"], list(result.train_losses))
