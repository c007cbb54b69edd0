"""Seeded generators for the synthetic sequence tasks, MNIST ingestion and byte corpora.

Every generator is a pure function of its arguments: the random stream is
derived from ``(seed, task id, index)`` so batch ``index`` of a run can be
regenerated on demand without replaying earlier batches.
"""

from __future__ import annotations

import enum
import gzip
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .numerics import make_rng


class LossKind(enum.Enum):
    MSE = "mse"
    BINARY_CE = "binary_ce"
    SOFTMAX_CE = "softmax_ce"


# Stream ids keep the generators' random draws independent of each other.
_STREAM = {"addition": 1, "classify_length": 2, "copy": 3, "mnist": 4, "permutation": 5}


@dataclass
class TaskBatch:
    """One minibatch of supervised sequences.

    ``inputs`` is ``[batch, time, features]`` float, or ``[batch, time]`` int
    symbol ids for token-fed tasks.  ``targets`` is ``[batch, time, k]`` float
    for MSE/binary tasks and ``[batch, time]`` int class ids for softmax tasks.
    ``mask`` is ``[batch, time]`` in {0, 1} and marks the supervised steps.
    """

    inputs: np.ndarray
    targets: np.ndarray
    mask: np.ndarray
    loss_kind: LossKind
    n_classes: int = 0

    @property
    def batch(self) -> int:
        return self.inputs.shape[0]

    @property
    def length(self) -> int:
        return self.inputs.shape[1]


def _final_step_mask(batch: int, length: int) -> np.ndarray:
    mask = np.zeros((batch, length))
    mask[:, -1] = 1.0
    return mask


# -- single-output tasks --------------------------------------------------------------

def gen_addition(seed: int, batch: int, length: int, index: int = 0) -> TaskBatch:
    """Two channels: uniform values and a 0/1 marker with exactly two ones.

    The target at the final step is the sum of the two marked values.
    """
    if length < 2:
        raise ValueError(f"addition needs length >= 2, got {length}")
    rng = make_rng(seed, _STREAM["addition"], index)
    values = rng.uniform(0.0, 1.0, size=(batch, length))
    # first marker uniform, second uniform among the remaining positions
    first = rng.integers(0, length, size=batch)
    second = rng.integers(0, length - 1, size=batch)
    second = second + (second >= first)
    markers = np.zeros((batch, length))
    rows = np.arange(batch)
    markers[rows, first] = 1.0
    markers[rows, second] = 1.0
    inputs = np.stack([values, markers], axis=-1)
    targets = np.zeros((batch, length, 1))
    targets[:, -1, 0] = values[rows, first] + values[rows, second]
    return TaskBatch(inputs, targets, _final_step_mask(batch, length), LossKind.MSE)


def classify_label(length, max_len: int):
    """1 where a sequence is strictly longer than half the maximum length."""
    return (np.asarray(length) > max_len / 2).astype(np.float64)


def gen_classify_length(seed: int, batch: int, max_len: int = 1000, index: int = 0) -> TaskBatch:
    """Sequences of uniform length in ``[1, max_len]``, padded to ``max_len``.

    The single input channel is 1.0 on in-sequence steps and 0.0 on padding,
    so it doubles as the length mask.  The binary label sits on the final step.
    """
    if max_len < 2:
        raise ValueError(f"classify-length needs max_len >= 2, got {max_len}")
    rng = make_rng(seed, _STREAM["classify_length"], index)
    lengths = rng.integers(1, max_len + 1, size=batch)
    inputs = (np.arange(max_len)[None, :] < lengths[:, None]).astype(np.float64)[..., None]
    targets = np.zeros((batch, max_len, 1))
    targets[:, -1, 0] = classify_label(lengths, max_len)
    return TaskBatch(inputs, targets, _final_step_mask(batch, max_len), LossKind.BINARY_CE)


# -- copy tasks ---------------------------------------------------------------------------

def copy_alphabet(n_symbols: int) -> tuple[int, int, int]:
    """``(blank, recall, input width)``: symbols are ``0..n-1``, blank ``n``, recall ``n+1``."""
    return n_symbols, n_symbols + 1, n_symbols + 2


def _one_hot(ids: np.ndarray, width: int) -> np.ndarray:
    out = np.zeros(ids.shape + (width,))
    np.put_along_axis(out, ids[..., None], 1.0, axis=-1)
    return out


def gen_copy(seed: int, batch: int, n_symbols: int = 8, prefix_len: int = 5,
             total_len: int = 100, index: int = 0, recall_at: int | None = None) -> TaskBatch:
    """Memorise a random prefix and replay it after the recall symbol.

    The recall position is uniform over ``[prefix_len, total_len - prefix_len)``
    (the replay must fit before the end) unless ``recall_at`` pins it.  Every
    step is supervised: the target is blank except during the replay.
    """
    if n_symbols < 1 or prefix_len < 1:
        raise ValueError("copy needs n_symbols >= 1 and prefix_len >= 1")
    if total_len < 2 * prefix_len + 1:
        raise ValueError(f"copy geometry infeasible: total_len {total_len} < 2*prefix_len+1 "
                         f"= {2 * prefix_len + 1}")
    rng = make_rng(seed, _STREAM["copy"], index)
    prefix = rng.integers(0, n_symbols, size=(batch, 1, prefix_len))
    if recall_at is None:
        recall = rng.integers(prefix_len, total_len - prefix_len, size=batch)
    else:
        if not prefix_len <= recall_at < total_len - prefix_len:
            raise ValueError(f"recall_at {recall_at} outside [{prefix_len}, {total_len - prefix_len})")
        recall = np.full(batch, recall_at)
    return _copy_batch(prefix, recall[:, None], n_symbols, total_len)


def multicopy_length(prefix_len: int, copies: int, gap: int) -> int:
    """Sequence length of ``copies`` episodes of prefix, gap, recall and replay."""
    return copies * (2 * prefix_len + gap + 1)


def gen_multicopy(seed: int, batch: int, n_symbols: int = 8, prefix_len: int = 5,
                  copies: int = 5, gap: int = 2, index: int = 0) -> TaskBatch:
    """Back-to-back copy episodes with the recall symbol ``gap`` steps after each prefix.

    One episode spans ``2*prefix_len + gap + 1`` steps: the prefix, ``gap``
    blanks, the recall symbol and the replay window.  With ``copies=1`` the
    batch equals ``gen_copy`` with ``recall_at = prefix_len + gap``.
    """
    if copies < 1 or prefix_len < 1 or gap < 0 or n_symbols < 1:
        raise ValueError(f"multicopy geometry infeasible: copies={copies}, prefix_len={prefix_len}, "
                         f"gap={gap}, n_symbols={n_symbols}")
    episode = 2 * prefix_len + gap + 1
    rng = make_rng(seed, _STREAM["copy"], index)
    prefix = rng.integers(0, n_symbols, size=(batch, copies, prefix_len))
    recall = np.tile(np.arange(copies) * episode + prefix_len + gap, (batch, 1))
    return _copy_batch(prefix, recall, n_symbols, copies * episode)


def _copy_batch(prefix, recall, n_symbols, total_len):
    """Assemble copy episodes; ``prefix[b, e]`` is replayed after ``recall[b, e]``.

    Episode ``e`` starts at ``e * episode`` where episode lengths are uniform;
    a single-episode batch starts at 0.
    """
    batch, copies, p = prefix.shape
    blank, recall_sym, width = copy_alphabet(n_symbols)
    ids = np.full((batch, total_len), blank)
    targets = np.full((batch, total_len), blank)
    episode = total_len // copies
    rows = np.arange(batch)[:, None]
    offs = np.arange(p)[None, :]
    for e in range(copies):
        ids[rows, e * episode + offs] = prefix[:, e]
        ids[rows[:, 0], recall[:, e]] = recall_sym
        targets[rows, recall[:, e:e + 1] + 1 + offs] = prefix[:, e]
    return TaskBatch(_one_hot(ids, width), targets, np.ones((batch, total_len)),
                     LossKind.SOFTMAX_CE, n_classes=n_symbols + 1)


# -- alternating target used by the parity probe -------------------------------------------

def gen_alternating(batch: int, length: int, c: float) -> TaskBatch:
    """Input ``x_t = (-1)^t`` and target ``(-1)^t * c`` for ``t = 1..length``, every step supervised."""
    sign = (-1.0) ** np.arange(1, length + 1)
    inputs = np.broadcast_to(sign[None, :, None], (batch, length, 1)).copy()
    return TaskBatch(inputs, c * inputs, np.ones((batch, length)), LossKind.MSE)


# -- MNIST ----------------------------------------------------------------------------------

@dataclass
class SequenceDataset:
    """Images flattened to pixel sequences ``[n, 784]`` in [0, 1] plus labels."""

    images: np.ndarray
    labels: np.ndarray
    permutation: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.labels)


def _read_idx(path, magic: int, rank: int) -> np.ndarray:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    try:
        with opener(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ValueError(f"{path}: cannot read IDX file ({exc})") from exc
    if len(raw) < 4 + 4 * rank:
        raise ValueError(f"{path}: truncated IDX header")
    found = int.from_bytes(raw[:4], "big")
    if found != magic:
        raise ValueError(f"{path}: bad IDX magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = [int.from_bytes(raw[4 + 4 * i:8 + 4 * i], "big") for i in range(rank)]
    body = raw[4 + 4 * rank:]
    if len(body) != int(np.prod(dims)):
        raise ValueError(f"{path}: IDX dims {dims} need {int(np.prod(dims))} bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_mnist(idx_image_path, idx_label_path) -> SequenceDataset:
    """Read an IDX image/label pair (optionally gzipped) into row-major pixel sequences."""
    images = _read_idx(idx_image_path, 0x00000803, 3)
    labels = _read_idx(idx_label_path, 0x00000801, 1)
    if images.shape[0] != labels.shape[0]:
        raise ValueError(f"{idx_label_path}: {labels.shape[0]} labels for {images.shape[0]} images "
                         f"in {idx_image_path}")
    flat = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return SequenceDataset(flat, labels.astype(np.int64))


def mnist_permutation(seed: int, size: int = 784) -> np.ndarray:
    return make_rng(seed, _STREAM["permutation"]).permutation(size)


def permute_mnist(dataset: SequenceDataset, seed: int) -> SequenceDataset:
    """Apply one seeded pixel permutation to every image; labels are untouched."""
    perm = mnist_permutation(seed, dataset.images.shape[1])
    return SequenceDataset(dataset.images[:, perm], dataset.labels, perm)


def unpermute_mnist(dataset: SequenceDataset) -> SequenceDataset:
    if dataset.permutation is None:
        return dataset
    inverse = np.argsort(dataset.permutation)
    return SequenceDataset(dataset.images[:, inverse], dataset.labels, None)


def gen_mnist(dataset: SequenceDataset, seed: int, batch: int, index: int = 0) -> TaskBatch:
    """Random minibatch of pixel sequences with the digit label on the last step."""
    rng = make_rng(seed, _STREAM["mnist"], index)
    pick = rng.integers(0, len(dataset), size=batch)
    return mnist_batch(dataset, pick)


def mnist_batch(dataset: SequenceDataset, pick: np.ndarray) -> TaskBatch:
    images = dataset.images[pick]
    length = images.shape[1]
    targets = np.zeros((len(pick), length), dtype=np.int64)
    targets[:, -1] = dataset.labels[pick]
    return TaskBatch(images[..., None], targets, _final_step_mask(len(pick), length),
                     LossKind.SOFTMAX_CE, n_classes=10)


# -- byte corpora -----------------------------------------------------------------------

@dataclass
class CorpusSplit:
    """A byte corpus with contiguous train/validation/test ranges and its vocabulary.

    ``vocab`` lists the distinct byte values in sorted order; ``ids`` is the
    whole corpus re-coded as vocabulary indices.
    """

    ids: np.ndarray
    vocab: np.ndarray
    train: tuple[int, int]
    val: tuple[int, int]
    test: tuple[int, int]
    index: np.ndarray = field(repr=False, default=None)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def part(self, name: str) -> np.ndarray:
        start, stop = getattr(self, name)
        return self.ids[start:stop]

    def encode(self, data: bytes) -> np.ndarray:
        raw = np.frombuffer(data, dtype=np.uint8)
        codes = self.index[raw]
        if (codes < 0).any():
            raise ValueError("bytes outside the corpus vocabulary")
        return codes


def split_corpus(data: bytes, train_frac: float = 0.90, val_frac: float = 0.05) -> CorpusSplit:
    if not data:
        raise ValueError("corpus is empty")
    if not (0 < train_frac and 0 <= val_frac and train_frac + val_frac <= 1):
        raise ValueError(f"bad split fractions train={train_frac}, val={val_frac}")
    raw = np.frombuffer(data, dtype=np.uint8)
    vocab = np.unique(raw)
    index = np.full(256, -1, dtype=np.int64)
    index[vocab] = np.arange(len(vocab))
    n = len(raw)
    train_end = int(round(n * train_frac))
    val_end = int(round(n * (train_frac + val_frac)))
    return CorpusSplit(index[raw], vocab, (0, train_end), (train_end, val_end), (val_end, n), index)


def load_corpus(path, train_frac: float = 0.90, val_frac: float = 0.05) -> CorpusSplit:
    """Read a byte corpus and split it into contiguous train/val/test prefixes."""
    data = Path(path).read_bytes()
    if not data:
        raise ValueError(f"{path}: corpus file is empty")
    return split_corpus(data, train_frac, val_frac)


def bundled_corpus_path() -> Path:
    """Path of the public-domain text shipped with the package."""
    return Path(__file__).parent / "data" / "shakespeare.txt"


def lane_layout(n: int, batch: int, bptt_len: int) -> tuple[int, int]:
    """``(stripe, windows)``: each lane owns ``stripe`` inputs, consumed in ``windows`` windows.

    One extra symbol per lane is needed for the final target, so lanes split
    ``n - 1`` input positions; the tail remainder is dropped.
    """
    stripe = (n - 1) // batch
    windows = stripe // bptt_len
    if windows < 1:
        raise ValueError(f"split of {n} symbols is too short for {batch} lanes of {bptt_len} steps")
    return windows * bptt_len, windows


def corpus_window(ids: np.ndarray, batch: int, bptt_len: int, window: int,
                  n_classes: int = 0) -> TaskBatch:
    """Window ``window`` of the lane layout used by :func:`corpus_batches`."""
    stripe, windows = lane_layout(len(ids), batch, bptt_len)
    if not 0 <= window < windows:
        raise ValueError(f"window {window} outside [0, {windows})")
    starts = np.arange(batch) * ((len(ids) - 1) // batch)
    pos = starts[:, None] + window * bptt_len + np.arange(bptt_len)[None, :]
    return TaskBatch(ids[pos], ids[pos + 1], np.ones((batch, bptt_len)), LossKind.SOFTMAX_CE, n_classes)


def corpus_batches(ids: np.ndarray, batch: int, bptt_len: int = 250,
                   n_classes: int = 0) -> Iterator[TaskBatch]:
    """One epoch of truncated-BPTT windows over contiguous, disjoint lane stripes.

    Lane ``k`` covers ``ids[k*stripe : (k+1)*stripe + 1]``; window ``w`` feeds
    steps ``w*bptt_len .. (w+1)*bptt_len - 1`` of every lane, so the state
    left by window ``w`` is the right starting state for window ``w + 1``.
    """
    _, windows = lane_layout(len(ids), batch, bptt_len)
    for w in range(windows):
        yield corpus_window(ids, batch, bptt_len, w, n_classes)
