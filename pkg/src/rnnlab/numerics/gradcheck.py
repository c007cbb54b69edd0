"""Central finite-difference oracle for tape gradients."""

from __future__ import annotations

import numpy as np

from .tape import Tape


def numerical_gradients(tape: Tape, output: str, h: float = 1e-5,
                        names: list[str] | None = None) -> dict[str, np.ndarray]:
    """Central differences of the scalar output ``output`` w.r.t. named leaves.

    Each leaf entry is perturbed by ``±h`` and the whole tape replayed; leaf
    values are restored afterwards.
    """
    if names is None:
        names = [n for n, leaf in tape.leaves.items() if leaf.requires_grad]
    base = {n: tape.leaves[n].value.copy() for n in names}
    grads = {}
    for name in names:
        value = base[name]
        g = np.zeros_like(value)
        flat = value.reshape(-1)
        for i in range(flat.size):
            bumped = flat.copy()
            bumped[i] = flat[i] + h
            up = float(tape.forward({name: bumped.reshape(value.shape)}, [output])[output])
            bumped[i] = flat[i] - h
            down = float(tape.forward({name: bumped.reshape(value.shape)}, [output])[output])
            g.reshape(-1)[i] = (up - down) / (2.0 * h)
        tape.forward({name: value}, [])
        grads[name] = g
    return grads


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``|a - b| / max(|a|, |b|)`` in the 2-norm; 0 when both vanish."""
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def gradient_check(tape: Tape, output: str, h: float = 1e-5) -> dict[str, float]:
    """Relative error between backward-pass and finite-difference gradients.

    Key ``"all"`` is the error over every leaf gradient concatenated; that is
    the figure to threshold, since a leaf whose true gradient is ~0 has a
    meaningless relative error of its own.  Per-leaf errors are included for
    diagnosis.
    """
    analytic = {k: v.copy() for k, v in tape.backward({output: None}).items()}
    numeric = numerical_gradients(tape, output, h, list(analytic))
    report = {name: relative_error(analytic[name], numeric[name]) for name in analytic}
    report["all"] = relative_error(np.concatenate([g.ravel() for g in analytic.values()]),
                                   np.concatenate([g.ravel() for g in numeric.values()]))
    return report
