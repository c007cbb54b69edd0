"""Run configuration and its flat ``section.key = value`` text format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

TASKS = ("addition", "classify_length", "copy", "multicopy", "mnist", "pmnist", "parity", "charlm")
STOP_METRICS = ("", "train_loss", "train_accuracy", "val_loss", "val_accuracy", "bpc")
STOP_OPS = ("<", "<=", ">", ">=")


class ConfigError(ValueError):
    """Malformed or inconsistent configuration; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def _field(section: str, default, doc: str = ""):
    return dataclasses.field(default=default, metadata={"section": section, "doc": doc})


@dataclass
class RunConfig:
    """Everything needed to reproduce one training run.

    Attribute names are the config keys; each belongs to one of the sections
    ``task``, ``model`` or ``train``.
    """

    # task
    task: str = _field("task", "addition", "task id")
    length: int = _field("task", 100, "sequence length (addition, parity)")
    max_len: int = _field("task", 1000, "maximum length (classify_length)")
    n_symbols: int = _field("task", 8, "copy alphabet size, excluding blank and recall")
    prefix_len: int = _field("task", 5, "symbols to memorise per copy episode")
    total_len: int = _field("task", 100, "copy sequence length")
    copies: int = _field("task", 5, "multicopy episodes")
    gap: int = _field("task", 2, "blank steps between prefix and recall (multicopy)")
    c: float = _field("task", 0.5, "alternating target amplitude (parity)")
    data: str = _field("task", "", "dataset path; relative paths resolve against RNNLAB_DATA")
    permute_seed: int = _field("task", 0, "pixel permutation seed (pmnist)")
    # model
    cell: str = _field("model", "rda-sigmoid-id", "cell preset")
    hidden: int = _field("model", 250, "recurrent units")
    embedding: int = _field("model", 64, "symbol embedding width (charlm)")
    learn_h0: bool = _field("model", True, "train the initial hidden state")
    gamma_max: float = _field("model", 0.0, "cap on the discount gate; 0 means no cap")
    # train
    name: str = _field("train", "run", "run name, used for the output directory")
    seed: int = _field("train", 0, "master seed")
    batch: int = _field("train", 100, "minibatch size (lanes for charlm)")
    lr: float = _field("train", 0.001, "Adam learning rate")
    clip: float = _field("train", 1.0, "elementwise gradient clip bound")
    max_steps: int = _field("train", 10000, "optimizer steps (truncation windows for charlm)")
    eval_every: int = _field("train", 25, "metrics row cadence in steps")
    val_batch: int = _field("train", 100, "validation examples (lanes for charlm)")
    smooth_window: int = _field("train", 25, "window for smoothed training metrics")
    stop_metric: str = _field("train", "", "metric tested by the stop rule; empty disables it")
    stop_op: str = _field("train", "<", "stop rule comparator")
    stop_threshold: float = _field("train", 0.0, "stop rule threshold")
    bptt_len: int = _field("train", 250, "truncation window (charlm)")
    wall_clock: bool = _field("train", False, "record elapsed wall time in metrics rows")

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"task.task: unknown task {self.task!r}; choose from {', '.join(TASKS)}")
        for key in ("length", "max_len", "n_symbols", "prefix_len", "total_len", "copies", "hidden",
                    "embedding", "batch", "eval_every", "val_batch", "smooth_window", "bptt_len"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{section_of(key)}.{key} must be positive, got {getattr(self, key)}")
        for key in ("max_steps", "gap", "seed", "permute_seed"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{section_of(key)}.{key} must be non-negative, got {getattr(self, key)}")
        if self.lr < 0 or self.clip <= 0:
            raise ConfigError("train.lr must be >= 0 and train.clip > 0")
        if not 0.0 <= self.gamma_max < 1.0:
            raise ConfigError(f"model.gamma_max must lie in [0, 1), got {self.gamma_max}")
        if self.stop_metric not in STOP_METRICS:
            raise ConfigError(f"train.stop_metric: unknown metric {self.stop_metric!r}")
        if self.stop_op not in STOP_OPS:
            raise ConfigError(f"train.stop_op: unknown comparator {self.stop_op!r}")
        if self.stop_metric == "bpc" and self.task != "charlm":
            raise ConfigError("train.stop_metric bpc is only produced by the charlm task")
        if self.stop_metric.endswith("accuracy") and self.task in ("addition", "parity"):
            raise ConfigError(f"train.stop_metric {self.stop_metric} is not produced by task {self.task}")
        from .cells import cell_spec
        try:
            cell_spec(self.cell)
        except ValueError as exc:
            raise ConfigError(f"model.cell: {exc}") from None

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def section_of(key: str) -> str:
    return _FIELDS[key].metadata["section"]


def _parse_value(key: str, text: str, line: int | None):
    kind = type(_FIELDS[key].default)
    try:
        if kind is bool:
            low = text.lower()
            if low not in ("true", "false"):
                raise ValueError("expected true or false")
            return low == "true"
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value {text!r} for {section_of(key)}.{key}: {exc}", line) from None


def parse_assignment(text: str, line: int | None = None) -> tuple[str, object]:
    """One ``section.key = value`` assignment to ``(key, typed value)``."""
    if "=" not in text:
        raise ConfigError(f"expected 'section.key = value', got {text.strip()!r}", line)
    lhs, rhs = (part.strip() for part in text.split("=", 1))
    section, _, key = lhs.partition(".")
    if not key or key not in _FIELDS or section_of(key) != section:
        raise ConfigError(f"unknown config key {lhs!r}", line)
    return key, _parse_value(key, rhs, line)


def parse_config(text: str, overrides: dict | None = None) -> RunConfig:
    """Parse ``section.key = value`` lines (``#`` starts a comment).

    Unknown keys, keys under the wrong section, duplicates and malformed
    values are errors naming the key and line.
    """
    values = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, value = parse_assignment(line, number)
        if key in values:
            raise ConfigError(f"duplicate config key '{section_of(key)}.{key}'", number)
        values[key] = value
    values.update(overrides or {})
    try:
        return RunConfig(**values)
    except ConfigError:
        raise
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path, overrides: dict | None = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, overrides)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_config(config: RunConfig) -> str:
    """Every key with its effective value, grouped by section; parses back to ``config``."""
    lines = []
    current = None
    for f in fields(RunConfig):
        section = f.metadata["section"]
        if section != current:
            if current is not None:
                lines.append("")
            current = section
        lines.append(f"{section}.{f.name} = {_format_value(getattr(config, f.name))}")
    return "\n".join(lines) + "\n"


def preset_dir() -> Path:
    return Path(__file__).parent / "presets"


def preset_path(name: str, scale: str = "desk") -> Path:
    """Shipped config for experiment ``name`` at ``desk`` or ``paper`` scale."""
    if scale not in ("desk", "paper"):
        raise ConfigError(f"unknown preset scale {scale!r}; choose desk or paper")
    path = preset_dir() / f"{name}_{scale}.cfg"
    if not path.exists():
        raise ConfigError(f"no {scale} preset for {name!r}")
    return path
