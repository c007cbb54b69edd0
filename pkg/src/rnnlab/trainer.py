"""Training loops, metrics rows, evaluation and binary checkpoints.

Synthetic tasks train with full-sequence backpropagation on a fresh batch
per step.  The character model trains with truncated backpropagation: each
window starts from the state values the previous window left behind, as
constants, so no gradient crosses a window boundary.
"""

from __future__ import annotations

import dataclasses
import io
import math
import os
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tasks
from .cells import CLAMP_COUNTER, cell_spec, init_params, initial_state, state_from_values, unroll
from .config import ConfigError, RunConfig, format_config, parse_config
from .numerics import AdamState, Tape, adam_step, clip_gradients, make_rng, ops, xavier_init
from .tasks import LossKind, TaskBatch

METRICS_HEADER = "step,wall_ms,train_loss,train_accuracy,val_loss,val_accuracy,bpc,attention_clamp_count"
CHECKPOINT_MAGIC = b"RNNLAB01"
VALIDATION_INDEX = 2 ** 40  # batch index reserved for validation draws
_INIT_STREAM = 0


class NumericAbort(FloatingPointError):
    """Training hit a non-finite loss or gradient."""


class DatasetError(ValueError):
    """A dataset named by the config cannot be found or read."""


class CheckpointError(ValueError):
    """Malformed checkpoint; the message names the offending field."""


class CheckpointShapeError(CheckpointError):
    """A checkpoint tensor does not have the shape its model or parameter requires."""


# -- metrics --------------------------------------------------------------------------

@dataclass
class MetricsRow:
    step: int
    wall_ms: int
    train_loss: float
    train_accuracy: float | None = None
    val_loss: float | None = None
    val_accuracy: float | None = None
    bpc: float | None = None
    attention_clamp_count: int = 0

    def to_csv(self) -> str:
        def cell(v):
            if v is None:
                return ""
            return repr(float(v)) if isinstance(v, float) else str(v)
        return ",".join(cell(getattr(self, f.name)) for f in dataclasses.fields(self))

    @classmethod
    def from_csv(cls, line: str) -> "MetricsRow":
        parts = line.rstrip("\n").split(",")
        names = [f.name for f in dataclasses.fields(cls)]
        if len(parts) != len(names):
            raise ValueError(f"metrics row has {len(parts)} fields, expected {len(names)}")
        vals = {}
        for name, text in zip(names, parts):
            if name in ("step", "wall_ms", "attention_clamp_count"):
                vals[name] = int(text)
            else:
                vals[name] = None if text == "" else float(text)
        return cls(**vals)


class MetricsWriter:
    """Append-only CSV sink; the header is written on creation, rows flushed as they arrive."""

    def __init__(self, path, append: bool = False):
        self.path = Path(path)
        fresh = not (append and self.path.exists())
        self._fh = open(self.path, "a" if not fresh else "w", encoding="utf-8", newline="\n")
        if fresh:
            self._fh.write(METRICS_HEADER + "\n")
            self._fh.flush()

    def __call__(self, row: MetricsRow) -> None:
        self._fh.write(row.to_csv() + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path) -> list[MetricsRow]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != METRICS_HEADER:
        raise ValueError(f"{path}: missing or unexpected metrics header")
    return [MetricsRow.from_csv(line) for line in lines[1:] if line]


_COMPARE = {"<": lambda a, b: a < b, "<=": lambda a, b: a <= b,
            ">": lambda a, b: a > b, ">=": lambda a, b: a >= b}


def smoothed(series, window: int) -> float | None:
    """Mean of the last ``window`` values, or ``None`` until that many exist."""
    if len(series) < window:
        return None
    return float(np.mean(series[-window:]))


def steps_to_threshold(series, threshold: float, op: str = "<", window: int = 25) -> int | None:
    """First step whose trailing ``window`` mean satisfies ``op threshold``.

    ``series[i]`` is the metric of step ``i + 1``; returns ``None`` if never met.
    """
    x = np.asarray(series, dtype=np.float64)
    if len(x) < window:
        return None
    means = np.convolve(x, np.ones(window) / window, mode="valid")
    hit = np.flatnonzero(_COMPARE[op](means, threshold))
    return int(hit[0]) + window if hit.size else None


# -- model ----------------------------------------------------------------------------------

class Model:
    """A recurrent cell with an optional symbol embedding and a linear readout."""

    def __init__(self, config: RunConfig, input_dim: int, out_dim: int, vocab: int = 0):
        spec = cell_spec(config.cell)
        if config.gamma_max > 0:
            spec = dataclasses.replace(spec, gamma_max=config.gamma_max)
        self.spec = spec
        self.hidden = config.hidden
        self.vocab = vocab
        self.input_dim = config.embedding if vocab else input_dim
        self.out_dim = out_dim
        self.learn_h0 = config.learn_h0

    def init(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        params = init_params(self.spec, self.input_dim, self.hidden, rng)
        if self.vocab:
            params["E"] = xavier_init(self.vocab, self.input_dim, rng)
        params["W_out"] = xavier_init(self.hidden, self.out_dim, rng)
        params["b_out"] = np.zeros(self.out_dim)
        return params

    def bind(self, tape: Tape, params: dict[str, np.ndarray], trainable: bool = True):
        nodes = {}
        for name, value in params.items():
            learn = trainable and (name != "h0" or self.learn_h0)
            nodes[name] = tape.param(name, value) if learn else tape.input(name, value)
        return nodes

    def run(self, nodes, batch: TaskBatch, state=None, final_only: bool = False):
        """Logits for the batch and the final recurrent state."""
        tape = nodes["W_out"].tape
        if self.vocab:
            xs = ops.gather_rows(nodes["E"], batch.inputs)
        else:
            xs = tape.input("x", batch.inputs)
        cell = {k: v for k, v in nodes.items() if k not in ("E", "W_out", "b_out")}
        outs, final = unroll(self.spec, cell, xs, state, fused=True)
        if final_only:
            outs = ops.step(outs, batch.length - 1)
        return ops.matmul(outs, nodes["W_out"]) + nodes["b_out"], final


def batch_loss(logits, batch: TaskBatch, final_only: bool):
    targets, mask = batch.targets, batch.mask
    if final_only:
        targets, mask = targets[:, -1], mask[:, -1]
    if batch.loss_kind is LossKind.MSE:
        return ops.mse(logits, targets, mask)
    if batch.loss_kind is LossKind.BINARY_CE:
        return ops.binary_xent(logits, targets, mask)
    return ops.softmax_xent(logits, targets, mask)


def batch_accuracy(logits: np.ndarray, batch: TaskBatch, final_only: bool) -> tuple[float, float] | None:
    """``(correct, counted)`` over masked positions, or ``None`` for regression."""
    targets, mask = batch.targets, batch.mask
    if final_only:
        targets, mask = targets[:, -1], mask[:, -1]
    if batch.loss_kind is LossKind.MSE:
        return None
    if batch.loss_kind is LossKind.BINARY_CE:
        hit = ((logits > 0).astype(np.float64) == targets).all(axis=-1)
    else:
        hit = logits.argmax(axis=-1) == targets
    return float((hit * mask).sum()), float(mask.sum())


# -- tasks as seen by the trainer ----------------------------------------------------------------

def resolve_data(path: str) -> Path:
    """Config data paths are taken relative to ``RNNLAB_DATA`` when that is set."""
    p = Path(path)
    root = os.environ.get("RNNLAB_DATA")
    if not p.is_absolute() and root:
        p = Path(root) / p
    return p


def _find_idx(folder: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        if (folder / name).exists():
            return folder / name
    raise DatasetError(f"MNIST file {stem}[.gz] not found in {folder}")


def load_mnist_split(folder, split: str = "train") -> tasks.SequenceDataset:
    folder = Path(folder)
    prefix = "train" if split == "train" else "t10k"
    return tasks.load_mnist(_find_idx(folder, f"{prefix}-images-idx3-ubyte"),
                            _find_idx(folder, f"{prefix}-labels-idx1-ubyte"))


MNIST_VALIDATION = 5000  # final training images held out for validation


class SyntheticTask:
    """Batch source for every task except the character model."""

    def __init__(self, config: RunConfig):
        self.config = config
        c = config
        self.final_only = c.task in ("addition", "classify_length", "mnist", "pmnist")
        self.dataset = None
        if c.task == "addition":
            self.input_dim, self.out_dim = 2, 1
        elif c.task == "classify_length":
            self.input_dim, self.out_dim = 1, 1
        elif c.task in ("copy", "multicopy"):
            self.input_dim, self.out_dim = c.n_symbols + 2, c.n_symbols + 1
        elif c.task == "parity":
            self.input_dim, self.out_dim = 1, 1
        elif c.task in ("mnist", "pmnist"):
            self.input_dim, self.out_dim = 1, 10
            if not c.data:
                raise DatasetError("task.data must name the MNIST folder")
            try:
                full = load_mnist_split(resolve_data(c.data), "train")
            except ValueError as exc:
                raise DatasetError(str(exc)) from None
            if c.task == "pmnist":
                full = tasks.permute_mnist(full, c.permute_seed)
            n = len(full) - MNIST_VALIDATION if len(full) > 2 * MNIST_VALIDATION else len(full)
            self.dataset = tasks.SequenceDataset(full.images[:n], full.labels[:n], full.permutation)
            self.held_out = tasks.SequenceDataset(full.images[n:], full.labels[n:], full.permutation) \
                if n < len(full) else self.dataset
        else:
            raise ConfigError(f"task {c.task!r} is not a synthetic task")

    def batch(self, index: int, size: int | None = None) -> TaskBatch:
        c = self.config
        size = c.batch if size is None else size
        if c.task == "addition":
            return tasks.gen_addition(c.seed, size, c.length, index)
        if c.task == "classify_length":
            return tasks.gen_classify_length(c.seed, size, c.max_len, index)
        if c.task == "copy":
            return tasks.gen_copy(c.seed, size, c.n_symbols, c.prefix_len, c.total_len, index)
        if c.task == "multicopy":
            return tasks.gen_multicopy(c.seed, size, c.n_symbols, c.prefix_len, c.copies, c.gap, index)
        if c.task == "parity":
            return tasks.gen_alternating(size, c.length, c.c)
        return tasks.gen_mnist(self.dataset, c.seed, size, index)

    def validation(self) -> TaskBatch:
        c = self.config
        if self.dataset is not None:
            return tasks.mnist_batch(self.held_out, np.arange(min(c.val_batch, len(self.held_out))))
        return self.batch(VALIDATION_INDEX, c.val_batch)


def build_task(config: RunConfig):
    if config.task == "charlm":
        return CorpusTask(config)
    return SyntheticTask(config)


class CorpusTask:
    def __init__(self, config: RunConfig):
        path = resolve_data(config.data) if config.data else tasks.bundled_corpus_path()
        try:
            self.split = tasks.load_corpus(path)
        except (OSError, ValueError) as exc:
            raise DatasetError(f"corpus {path}: {exc}") from None
        self.config = config
        self.input_dim = config.embedding
        self.out_dim = self.split.vocab_size
        self.final_only = False
        self.train_ids = self.split.part("train")
        try:
            _, self.windows = tasks.lane_layout(len(self.train_ids), config.batch, config.bptt_len)
        except ValueError as exc:
            raise ConfigError(f"train.batch/train.bptt_len: {exc}") from None


def build_model(config: RunConfig, task) -> Model:
    vocab = task.out_dim if config.task == "charlm" else 0
    return Model(config, task.input_dim, task.out_dim, vocab)


# -- evaluation -----------------------------------------------------------------------------

def evaluate_batch(model: Model, params, batch: TaskBatch, final_only: bool) -> tuple[float, float | None]:
    """Loss and accuracy of ``params`` on one batch (forward only)."""
    tape = Tape(check_finite=False)
    logits, _ = model.run(model.bind(tape, params, trainable=False), batch, final_only=final_only)
    loss = float(batch_loss(logits, batch, final_only).value)
    acc = batch_accuracy(logits.value, batch, final_only)
    tape.discard()
    return loss, (None if acc is None else acc[0] / max(acc[1], 1.0))


def evaluate_corpus(model: Model, params, ids: np.ndarray, lanes: int, bptt_len: int) -> dict:
    """Next-symbol loss over a split with state carried across windows.

    Returns mean nats, bits per character and accuracy over every predicted
    symbol.  The lane count shrinks if the split is too short for ``lanes``.
    """
    lanes = max(1, min(lanes, (len(ids) - 1) // bptt_len))
    if (len(ids) - 1) // lanes < bptt_len:
        bptt_len = max(1, (len(ids) - 1) // lanes)
    nats = 0.0
    correct = 0.0
    count = 0
    state_vals = None
    for b in tasks.corpus_batches(ids, lanes, bptt_len, model.out_dim):
        tape = Tape(check_finite=False)
        nodes = model.bind(tape, params, trainable=False)
        state = None if state_vals is None else state_from_values(tape, state_vals)
        logits, final = model.run(nodes, b, state)
        logp = ops.log_softmax(logits.value)
        nats -= float(np.take_along_axis(logp, b.targets[..., None], axis=-1).sum())
        correct += float((logits.value.argmax(-1) == b.targets).sum())
        count += b.targets.size
        state_vals = final.values()
        tape.discard()
    return {"loss": nats / count, "bpc": nats / count / math.log(2.0),
            "accuracy": correct / count, "symbols": count}


def evaluate(checkpoint: "Checkpoint", split: str = "test", data_override: str | None = None) -> dict:
    """Metrics of a saved model: accuracy/loss on a task, or bpc on a corpus split."""
    config = checkpoint.config
    if data_override:
        config = config.replace(data=data_override)
    task = build_task(config)
    model = build_model(config, task)
    expected = model.init(make_rng(0))
    for name, value in expected.items():
        got = checkpoint.params.get(name)
        if got is None or got.shape != value.shape:
            raise CheckpointShapeError(f"checkpoint tensor {name!r} has dims "
                                  f"{None if got is None else list(got.shape)}, model needs {list(value.shape)}")
    if config.task == "charlm":
        return evaluate_corpus(model, checkpoint.params, task.split.part(split), config.val_batch,
                               config.bptt_len)
    if task.dataset is not None:
        if split == "test":
            data = load_mnist_split(resolve_data(config.data), "test")
            if task.dataset.permutation is not None:
                data = tasks.SequenceDataset(data.images[:, task.dataset.permutation], data.labels,
                                             task.dataset.permutation)
        else:
            data = task.held_out
        loss_sum, correct = 0.0, 0.0
        for start in range(0, len(data), 500):
            pick = np.arange(start, min(start + 500, len(data)))
            loss, acc = evaluate_batch(model, checkpoint.params, tasks.mnist_batch(data, pick), True)
            loss_sum += loss * len(pick)
            correct += acc * len(pick)
        return {"loss": loss_sum / len(data), "accuracy": correct / len(data), "examples": len(data)}
    loss, acc = evaluate_batch(model, checkpoint.params, task.validation(), task.final_only)
    return {"loss": loss, "accuracy": acc, "examples": config.val_batch}


# -- checkpoints -----------------------------------------------------------------------------

@dataclass
class Checkpoint:
    """Parameters, optimizer moments and loop position of a run after ``step`` updates.

    ``extra`` carries trainer bookkeeping (metric histories, carried state);
    every value is a float64 array.
    """

    config: RunConfig
    params: dict[str, np.ndarray]
    adam: AdamState
    step: int = 0
    extra: dict[str, np.ndarray] = field(default_factory=dict)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": v for k, v in self.params.items()}
        for k in self.params:
            if k in self.adam.m:
                out[f"adam/m/{k}"] = self.adam.m[k]
                out[f"adam/v/{k}"] = self.adam.v[k]
        out["adam/hyper"] = np.array([self.adam.lr, self.adam.beta1, self.adam.beta2, self.adam.eps])
        out["adam/step"] = np.array(float(self.adam.step_count))
        out["train/step"] = np.array(float(self.step))
        out.update({f"extra/{k}": v for k, v in self.extra.items()})
        return out


_U64 = struct.Struct("<Q")


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    """Binary layout: magic, length-prefixed config text, tensor count, then tensors.

    Each tensor is a length-prefixed UTF-8 name, its rank, its extents and its
    row-major data.  Lengths, counts, ranks and extents are unsigned 64-bit
    little-endian; data are float64 little-endian.
    """
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    text = format_config(ckpt.config).encode("utf-8")
    buf.write(_U64.pack(len(text)) + text)
    tensors = ckpt.tensors()
    buf.write(_U64.pack(len(tensors)))
    for name, value in tensors.items():
        arr = np.array(value, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        buf.write(_U64.pack(len(raw)) + raw)
        buf.write(_U64.pack(arr.ndim))
        for extent in arr.shape:
            buf.write(_U64.pack(extent))
        buf.write(arr.tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"checkpoint truncated while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u64(self, what: str) -> int:
        return _U64.unpack(self.take(8, what))[0]


def decode_checkpoint(data: bytes) -> Checkpoint:
    r = _Reader(data)
    magic = r.take(len(CHECKPOINT_MAGIC), "magic")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"checkpoint magic {magic!r} does not match {CHECKPOINT_MAGIC!r}")
    text_len = r.u64("config length")
    try:
        config = parse_config(r.take(text_len, "config text").decode("utf-8"))
    except (UnicodeDecodeError, ConfigError) as exc:
        raise CheckpointError(f"checkpoint config text: {exc}") from None
    count = r.u64("tensor count")
    tensors = {}
    for i in range(count):
        name_len = r.u64(f"tensor {i} name length")
        try:
            name = r.take(name_len, f"tensor {i} name").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"checkpoint tensor {i} name is not UTF-8") from None
        rank = r.u64(f"tensor {name!r} rank")
        if rank > 8:
            raise CheckpointError(f"checkpoint tensor {name!r} rank {rank} is implausible")
        dims = tuple(r.u64(f"tensor {name!r} extent") for _ in range(rank))
        size = int(np.prod(dims)) if dims else 1
        raw = r.take(8 * size, f"tensor {name!r} data")
        if name in tensors:
            raise CheckpointError(f"checkpoint tensor {name!r} appears twice")
        tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).astype(np.float64)
    if r.pos != len(data):
        raise CheckpointError(f"checkpoint has {len(data) - r.pos} trailing bytes after the tensors")
    for required in ("adam/hyper", "adam/step", "train/step"):
        if required not in tensors:
            raise CheckpointError(f"checkpoint is missing tensor {required!r}")
    lr, b1, b2, eps = tensors.pop("adam/hyper").tolist()
    adam = AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps, step_count=int(tensors.pop("adam/step")))
    step = int(tensors.pop("train/step"))
    params, extra = {}, {}
    for name, value in tensors.items():
        kind, _, rest = name.partition("/")
        if kind == "param":
            params[rest] = value
        elif kind == "adam" and rest[:2] in ("m/", "v/"):
            getattr(adam, rest[0])[rest[2:]] = value
        elif kind == "extra":
            extra[rest] = value
        else:
            raise CheckpointError(f"checkpoint tensor {name!r} has an unknown role")
    for k, m in adam.m.items():
        if k not in params or params[k].shape != m.shape or adam.v.get(k, m).shape != m.shape:
            raise CheckpointShapeError(f"checkpoint moments for {k!r} disagree with the parameter shape")
    return Checkpoint(config, params, adam, step, extra)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    return decode_checkpoint(data)


# -- training ------------------------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    rows: list[MetricsRow]
    summary: dict
    train_losses: list[float]
    train_accuracies: list[float]

    @property
    def params(self):
        return self.checkpoint.params


class _Clock:
    def __init__(self, enabled: bool, offset_ms: int = 0):
        self.enabled = enabled
        self.start = time.perf_counter()
        self.offset = offset_ms

    def ms(self) -> int:
        if not self.enabled:
            return 0
        return self.offset + int((time.perf_counter() - self.start) * 1000)


def _abort_message(tape: Tape, step: int, what: str) -> str:
    node = tape.first_non_finite()
    where = f" (first in op '{node.op.name}', node {node.index})" if node is not None else ""
    return f"non-finite {what} at step {step}{where}"


def _stop_value(config: RunConfig, row: MetricsRow | None, losses, accs):
    m = config.stop_metric
    if m == "train_loss":
        return smoothed(losses, config.smooth_window)
    if m == "train_accuracy":
        return smoothed(accs, config.smooth_window)
    if row is None:
        return None
    return getattr(row, m)


def _summary(config, status, step, losses, accs, clamp, crossed, message, wall_s):
    s = {
        "status": status,
        "steps": step,
        "stop_rule": f"{config.stop_metric} {config.stop_op} {config.stop_threshold!r}" if config.stop_metric else "none",
        "steps_to_threshold": crossed if crossed is not None else "not reached",
        "smoothed_train_loss": smoothed(losses, min(config.smooth_window, max(len(losses), 1))),
        "smoothed_train_accuracy": smoothed(accs, min(config.smooth_window, max(len(accs), 1))) if accs else None,
        "attention_clamp_count": clamp,
        "wall_seconds": round(wall_s, 3),
    }
    if message:
        s["message"] = message
    return s


def _restore(config: RunConfig, resume: Checkpoint | None, model: Model):
    if resume is None:
        params = model.init(make_rng(config.seed, _INIT_STREAM))
        return params, AdamState(lr=config.lr), 0, [], [], 0, None, {}
    expected = model.init(make_rng(0))
    for name, value in expected.items():
        got = resume.params.get(name)
        if got is None or got.shape != value.shape:
            raise CheckpointShapeError(f"checkpoint tensor {name!r} does not fit the configured model")
    adam = dataclasses.replace(resume.adam, lr=config.lr, m=dict(resume.adam.m), v=dict(resume.adam.v))
    ex = resume.extra
    losses = ex.get("train_loss", np.zeros(0)).tolist()
    accs = ex.get("train_accuracy", np.zeros(0)).tolist()
    clamp = int(ex.get("clamp", np.array(0.0)))
    crossed = int(ex["crossed"]) if "crossed" in ex and ex["crossed"] >= 0 else None
    carry = {k[len("carry/"):]: v for k, v in ex.items() if k.startswith("carry/")}
    return dict(resume.params), adam, resume.step, losses, accs, clamp, crossed, carry


def train(config: RunConfig, sink: Callable[[MetricsRow], None] | None = None,
          resume: Checkpoint | None = None) -> TrainResult:
    """Train per ``config``; rows go to ``sink`` at the eval cadence.

    A run stops at ``max_steps``, when the stop rule is met, or on a
    non-finite loss/gradient (a last row is emitted and the summary status is
    ``aborted``).  ``resume`` continues from a checkpoint written by a run of
    the same config; the rows after its step match the uninterrupted run's.
    """
    if config.task == "charlm":
        return train_char_lm(config, sink, resume)
    task = build_task(config)
    model = build_model(config, task)
    params, adam, start, losses, accs, clamp, crossed, _ = _restore(config, resume, model)
    clock = _Clock(config.wall_clock)
    rows: list[MetricsRow] = []
    val = task.validation()
    has_acc = val.loss_kind is not LossKind.MSE

    def emit(step, loss, acc):
        vloss, vacc = evaluate_batch(model, params, val, task.final_only)
        row = MetricsRow(step, clock.ms(), loss, acc, vloss, vacc, None, clamp)
        rows.append(row)
        if sink is not None:
            sink(row)
        return row

    status, message = "completed", ""
    if start == 0:
        loss0, acc0 = evaluate_batch(model, params, task.batch(0), task.final_only)
        emit(0, loss0, acc0)
    step = start
    for step in range(start + 1, config.max_steps + 1):
        batch = task.batch(step)
        tape = Tape(check_finite=False)
        nodes = model.bind(tape, params)
        logits, _ = model.run(nodes, batch, final_only=task.final_only)
        loss = batch_loss(logits, batch, task.final_only)
        clamp += tape.counters.get(CLAMP_COUNTER, 0)
        lv = float(loss.value)
        acc = None
        if has_acc:
            c_, n_ = batch_accuracy(logits.value, batch, task.final_only)
            acc = c_ / max(n_, 1.0)
        if not math.isfinite(lv):
            status, message = "aborted", _abort_message(tape, step, "loss")
            rows.append(MetricsRow(step, clock.ms(), lv, acc, None, None, None, clamp))
            if sink is not None:
                sink(rows[-1])
            break
        grads = tape.backward(loss)
        if not all(np.isfinite(g).all() for g in grads.values()):
            status, message = "aborted", f"non-finite gradient at step {step}"
            rows.append(MetricsRow(step, clock.ms(), lv, acc, None, None, None, clamp))
            if sink is not None:
                sink(rows[-1])
            break
        params = adam_step(adam, params, clip_gradients(grads, config.clip))
        tape.discard()
        losses.append(lv)
        if has_acc:
            accs.append(acc)
        row = None
        due = step % config.eval_every == 0 or step == config.max_steps
        if due:
            row = emit(step, lv, acc)
        if config.stop_metric and crossed is None:
            value = _stop_value(config, row, losses, accs)
            if value is not None and _COMPARE[config.stop_op](value, config.stop_threshold):
                crossed = step
                if row is None:
                    emit(step, lv, acc)
                status = "stopped"
                break
    extra = {"train_loss": np.asarray(losses, dtype=np.float64),
             "train_accuracy": np.asarray(accs, dtype=np.float64),
             "clamp": np.array(float(clamp)),
             "crossed": np.array(float(crossed if crossed is not None else -1))}
    done = step if status != "aborted" else step - 1
    ckpt = Checkpoint(config, params, adam, done, extra)
    summary = _summary(config, status, step, losses, accs, clamp, crossed, message,
                       (time.perf_counter() - clock.start))
    return TrainResult(ckpt, rows, summary, losses, accs)


def train_char_lm(config: RunConfig, sink: Callable[[MetricsRow], None] | None = None,
                  resume: Checkpoint | None = None, corpus: tasks.CorpusSplit | None = None) -> TrainResult:
    """Truncated-BPTT training of the next-symbol model over lane stripes.

    One step is one window of ``bptt_len`` symbols in every lane.  Each epoch
    restarts the lanes from the initial state; within an epoch the state
    values left by a window seed the next one.
    """
    task = CorpusTask(config) if corpus is None else _corpus_task(config, corpus)
    model = build_model(config, task)
    params, adam, start, losses, accs, clamp, crossed, carry = _restore(config, resume, model)
    clock = _Clock(config.wall_clock)
    rows: list[MetricsRow] = []
    val_ids = task.split.part("val")
    if len(val_ids) < 2:
        val_ids = task.split.part("train")

    def emit(step, loss, acc):
        ev = evaluate_corpus(model, params, val_ids, config.val_batch, config.bptt_len)
        row = MetricsRow(step, clock.ms(), loss, acc, ev["loss"], ev["accuracy"], ev["bpc"], clamp)
        rows.append(row)
        if sink is not None:
            sink(row)
        return row

    status, message = "completed", ""
    if start == 0:
        first = tasks.corpus_window(task.train_ids, config.batch, config.bptt_len, 0, task.out_dim)
        loss0, acc0 = evaluate_batch(model, params, first, False)
        emit(0, loss0, acc0)
    carried = carry or None
    step = start
    for step in range(start + 1, config.max_steps + 1):
        window = (step - 1) % task.windows
        if window == 0:
            carried = None
        batch = tasks.corpus_window(task.train_ids, config.batch, config.bptt_len, window, task.out_dim)
        tape = Tape(check_finite=False)
        nodes = model.bind(tape, params)
        state = None if carried is None else state_from_values(tape, carried)
        logits, final = model.run(nodes, batch, state)
        loss = batch_loss(logits, batch, False)
        clamp += tape.counters.get(CLAMP_COUNTER, 0)
        lv = float(loss.value)
        c_, n_ = batch_accuracy(logits.value, batch, False)
        acc = c_ / n_
        if not math.isfinite(lv):
            status, message = "aborted", _abort_message(tape, step, "loss")
            rows.append(MetricsRow(step, clock.ms(), lv, acc, None, None, None, clamp))
            if sink is not None:
                sink(rows[-1])
            break
        grads = tape.backward(loss)
        if not all(np.isfinite(g).all() for g in grads.values()):
            status, message = "aborted", f"non-finite gradient at step {step}"
            rows.append(MetricsRow(step, clock.ms(), lv, acc, None, None, None, clamp))
            if sink is not None:
                sink(rows[-1])
            break
        carried = final.values()
        params = adam_step(adam, params, clip_gradients(grads, config.clip))
        tape.discard()
        losses.append(lv)
        accs.append(acc)
        row = None
        if step % config.eval_every == 0 or step == config.max_steps:
            row = emit(step, lv, acc)
        if config.stop_metric and crossed is None:
            value = _stop_value(config, row, losses, accs)
            if value is not None and _COMPARE[config.stop_op](value, config.stop_threshold):
                crossed = step
                if row is None:
                    emit(step, lv, acc)
                status = "stopped"
                break
    extra = {"train_loss": np.asarray(losses, dtype=np.float64),
             "train_accuracy": np.asarray(accs, dtype=np.float64),
             "clamp": np.array(float(clamp)),
             "crossed": np.array(float(crossed if crossed is not None else -1))}
    if carried is not None:
        extra.update({f"carry/{k}": v for k, v in carried.items()})
    done = step if status != "aborted" else step - 1
    ckpt = Checkpoint(config, params, adam, done, extra)
    summary = _summary(config, status, step, losses, accs, clamp, crossed, message,
                       (time.perf_counter() - clock.start))
    return TrainResult(ckpt, rows, summary, losses, accs)


def _corpus_task(config: RunConfig, corpus: tasks.CorpusSplit) -> CorpusTask:
    task = CorpusTask.__new__(CorpusTask)
    task.split = corpus
    task.config = config
    task.input_dim = config.embedding
    task.out_dim = corpus.vocab_size
    task.final_only = False
    task.train_ids = corpus.part("train")
    _, task.windows = tasks.lane_layout(len(task.train_ids), config.batch, config.bptt_len)
    return task


def format_summary(summary: dict, config: RunConfig) -> str:
    """Human-readable summary followed by the effective config."""
    lines = [f"{k}: {v}" for k, v in summary.items()]
    return "\n".join(lines) + "\n\n# effective config\n" + format_config(config)
