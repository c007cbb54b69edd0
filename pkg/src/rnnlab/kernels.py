"""Whole-sequence recurrences as single tape ops with hand-written BPTT.

The primitive path in :mod:`rnnlab.cells` records about fifteen ops per
timestep; these kernels record one op per sequence and run the same
arithmetic in a plain numpy loop, which is several times faster for the
small widths used in training.  Their gradients are checked against the
primitive path and against finite differences in the test suite.

Each kernel takes the projected inputs ``xp [batch, time, gates]`` (input
rows of every gate matrix already applied, biases included), the fused
recurrent matrix and the initial state, and returns the per-step outputs.
The final state is exposed only as values, so it is detached from the tape.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .numerics import Op, ShapeError


class _Cache(dict):
    """Per-node scratch filled by the forward pass and read by the backward pass."""


# -- attention cells (RWA, RDA) -----------------------------------------------------------

def _attention(kind: str, pre: np.ndarray, limit: float) -> np.ndarray:
    if kind == "exp":
        return np.exp(np.minimum(pre, limit))
    if kind == "relu":
        return np.maximum(pre, 0.0)
    if kind == "softplus":
        return np.logaddexp(0.0, pre)
    return expit(pre)


def _attention_grad(kind: str, pre: np.ndarray, a: np.ndarray, limit: float) -> np.ndarray:
    if kind == "exp":
        return a * (pre <= limit)
    if kind == "relu":
        return (pre > 0.0).astype(np.float64)
    if kind == "softplus":
        return expit(pre)
    return a * (1.0 - a)


def _attn_fwd(xp, w_rec, h0, n0, d0, *, spec, eps, limit, cache):
    B, T, _ = xp.shape
    H = h0.shape[-1]
    discount = spec.kind == "rda"
    gmax = spec.gamma_max
    att = spec.attention.value
    tanh_h = spec.hidden.value == "tanh"
    tanh_o = spec.output.value == "tanh"
    hs = np.empty((T + 1, B, H))
    ns = np.empty((T + 1, B, H))
    ds = np.empty((T + 1, B, H))
    hs[0], ns[0], ds[0] = h0, n0, d0
    tg, ap, a, q = (np.empty((T, B, H)) for _ in range(4))
    gam = np.empty((T, B, H)) if discount else None
    out = np.empty((B, T, H))
    clamped = 0
    for t in range(T):
        pre = xp[:, t, H:] + hs[t] @ w_rec
        u = xp[:, t, :H]
        tg[t] = np.tanh(pre[:, :H])
        ap[t] = pre[:, H:2 * H]
        if att == "exp":
            clamped += int(np.count_nonzero(ap[t] > limit))
        a[t] = _attention(att, ap[t], limit)
        za = u * tg[t] * a[t]
        if discount:
            gam[t] = expit(pre[:, 2 * H:3 * H])
            gc = gam[t] if gmax is None else np.minimum(gam[t], gmax)
            ns[t + 1] = ns[t] * gc + za
            ds[t + 1] = ds[t] * gc + a[t]
        else:
            ns[t + 1] = ns[t] + za
            ds[t + 1] = ds[t] + a[t]
        q[t] = ns[t + 1] / (ds[t + 1] + eps)
        hs[t + 1] = np.tanh(q[t]) if tanh_h else q[t]
        out[:, t] = np.tanh(hs[t + 1]) if tanh_o else hs[t + 1]
    cache.clear()
    cache.update(hs=hs, ns=ns, ds=ds, tg=tg, ap=ap, a=a, q=q, gam=gam, clamped=clamped)
    return out


def _attn_bwd(g, out, xp, w_rec, h0, n0, d0, *, spec, eps, limit, cache):
    B, T, _ = xp.shape
    H = h0.shape[-1]
    discount = spec.kind == "rda"
    gmax = spec.gamma_max
    att = spec.attention.value
    tanh_h = spec.hidden.value == "tanh"
    tanh_o = spec.output.value == "tanh"
    hs, ns, ds, tg, ap, a, q, gam = (cache[k] for k in ("hs", "ns", "ds", "tg", "ap", "a", "q", "gam"))
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w_rec)
    dh = np.zeros((B, H))
    dn = np.zeros((B, H))
    dd = np.zeros((B, H))
    w_rec_t = w_rec.T
    for t in range(T - 1, -1, -1):
        go = g[:, t]
        if tanh_o:
            go = go * (1.0 - out[:, t] ** 2)
        dht = go + dh
        dq = dht * (1.0 - hs[t + 1] ** 2) if tanh_h else dht
        inv = 1.0 / (ds[t + 1] + eps)
        dnt = dq * inv + dn
        ddt = dd - dq * q[t] * inv
        u = xp[:, t, :H]
        z = u * tg[t]
        dz = dnt * a[t]
        da = dnt * z + ddt
        dap = da * _attention_grad(att, ap[t], a[t], limit)
        dxp[:, t, :H] = dz * tg[t]
        dxp[:, t, H:2 * H] = dz * u * (1.0 - tg[t] ** 2)
        dxp[:, t, 2 * H:3 * H] = dap
        if discount:
            gc = gam[t] if gmax is None else np.minimum(gam[t], gmax)
            dgc = dnt * ns[t] + ddt * ds[t]
            if gmax is not None:
                dgc = dgc * (gam[t] <= gmax)
            dxp[:, t, 3 * H:4 * H] = dgc * gam[t] * (1.0 - gam[t])
            dn = dnt * gc
            dd = ddt * gc
        else:
            dn, dd = dnt, ddt
        drec = dxp[:, t, H:]
        dw += hs[t].T @ drec
        dh = drec @ w_rec_t
    return dxp, dw, dh, dn, dd


# -- LSTM -----------------------------------------------------------------------------------

def _lstm_fwd(xp, w_rec, h0, c0, *, cache):
    B, T, _ = xp.shape
    H = h0.shape[-1]
    hs = np.empty((T + 1, B, H))
    cs = np.empty((T + 1, B, H))
    hs[0], cs[0] = h0, c0
    gates = np.empty((T, B, 4 * H))
    tc = np.empty((T, B, H))
    out = np.empty((B, T, H))
    for t in range(T):
        pre = xp[:, t] + hs[t] @ w_rec
        gt = gates[t]
        gt[:, :3 * H] = expit(pre[:, :3 * H])
        gt[:, 3 * H:] = np.tanh(pre[:, 3 * H:])
        i, f, o, cand = gt[:, :H], gt[:, H:2 * H], gt[:, 2 * H:3 * H], gt[:, 3 * H:]
        cs[t + 1] = f * cs[t] + i * cand
        tc[t] = np.tanh(cs[t + 1])
        hs[t + 1] = o * tc[t]
        out[:, t] = hs[t + 1]
    cache.clear()
    cache.update(hs=hs, cs=cs, gates=gates, tc=tc, clamped=0)
    return out


def _lstm_bwd(g, out, xp, w_rec, h0, c0, *, cache):
    B, T, _ = xp.shape
    H = h0.shape[-1]
    hs, cs, gates, tc = cache["hs"], cache["cs"], cache["gates"], cache["tc"]
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w_rec)
    dh = np.zeros((B, H))
    dc = np.zeros((B, H))
    w_rec_t = w_rec.T
    for t in range(T - 1, -1, -1):
        gt = gates[t]
        i, f, o, cand = gt[:, :H], gt[:, H:2 * H], gt[:, 2 * H:3 * H], gt[:, 3 * H:]
        dht = g[:, t] + dh
        dct = dht * o * (1.0 - tc[t] ** 2) + dc
        dpre = dxp[:, t]
        dpre[:, :H] = dct * cand * i * (1.0 - i)
        dpre[:, H:2 * H] = dct * cs[t] * f * (1.0 - f)
        dpre[:, 2 * H:3 * H] = dht * tc[t] * o * (1.0 - o)
        dpre[:, 3 * H:] = dct * i * (1.0 - cand ** 2)
        dc = dct * f
        dw += hs[t].T @ dpre
        dh = dpre @ w_rec_t
    return dxp, dw, dh, dc


# -- GRU -------------------------------------------------------------------------------------

def _gru_fwd(xp, w_rec, w_cand, h0, *, cache):
    B, T, _ = xp.shape
    H = h0.shape[-1]
    hs = np.empty((T + 1, B, H))
    hs[0] = h0
    zr = np.empty((T, B, 2 * H))
    cand = np.empty((T, B, H))
    out = np.empty((B, T, H))
    for t in range(T):
        zr[t] = expit(xp[:, t, :2 * H] + hs[t] @ w_rec)
        z, r = zr[t, :, :H], zr[t, :, H:]
        cand[t] = np.tanh(xp[:, t, 2 * H:] + (r * hs[t]) @ w_cand)
        hs[t + 1] = (1.0 - z) * hs[t] + z * cand[t]
        out[:, t] = hs[t + 1]
    cache.clear()
    cache.update(hs=hs, zr=zr, cand=cand, clamped=0)
    return out


def _gru_bwd(g, out, xp, w_rec, w_cand, h0, *, cache):
    B, T, _ = xp.shape
    H = h0.shape[-1]
    hs, zr, cand = cache["hs"], cache["zr"], cache["cand"]
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w_rec)
    dwc = np.zeros_like(w_cand)
    dh = np.zeros((B, H))
    w_rec_t, w_cand_t = w_rec.T, w_cand.T
    for t in range(T - 1, -1, -1):
        z, r = zr[t, :, :H], zr[t, :, H:]
        h_prev = hs[t]
        dht = g[:, t] + dh
        dcp = dht * z * (1.0 - cand[t] ** 2)
        dwc += (r * h_prev).T @ dcp
        drh = dcp @ w_cand_t
        dzr = dxp[:, t, :2 * H]
        dzr[:, :H] = dht * (cand[t] - h_prev) * z * (1.0 - z)
        dzr[:, H:] = drh * h_prev * r * (1.0 - r)
        dxp[:, t, 2 * H:] = dcp
        dw += h_prev.T @ dzr
        dh = dht * (1.0 - z) + drh * r + dzr @ w_rec_t
    return dxp, dw, dwc, dh


ATTENTION_SEQ = Op("attention_sequence", _attn_fwd, _attn_bwd)
LSTM_SEQ = Op("lstm_sequence", _lstm_fwd, _lstm_bwd)
GRU_SEQ = Op("gru_sequence", _gru_fwd, _gru_bwd)


def run_sequence(prep, xp, state, eps: float, limit: float, counter: str):
    """Record one fused recurrence over ``xp``; returns ``(outputs, final state values)``.

    ``prep`` is a :class:`rnnlab.cells.Prepared`; exponential-attention clamp
    events are added to ``counter`` on the tape.
    """
    spec = prep.spec
    tape = xp.tape
    if xp.value.ndim != 3 or xp.shape[-1] != prep.w_in.shape[-1]:
        raise ShapeError(f"fused recurrence expects projected inputs of width {prep.w_in.shape[-1]}, "
                         f"got dims {list(xp.shape)}")
    cache = _Cache()
    if spec.kind in ("rwa", "rda"):
        node = tape.record(ATTENTION_SEQ, (xp, prep.w_rec, state.h, state.n, state.d),
                           {"spec": spec, "eps": eps, "limit": limit, "cache": cache})
        final = {"h": cache["hs"][-1], "n": cache["ns"][-1], "d": cache["ds"][-1]}
    elif spec.kind == "lstm":
        node = tape.record(LSTM_SEQ, (xp, prep.w_rec, state.h, state.c), {"cache": cache})
        final = {"h": cache["hs"][-1], "c": cache["cs"][-1]}
    else:
        node = tape.record(GRU_SEQ, (xp, prep.w_rec, prep.w_cand, state.h), {"cache": cache})
        final = {"h": cache["hs"][-1]}
    if cache["clamped"]:
        tape.bump(counter, cache["clamped"])
    return node, {k: v.copy() for k, v in final.items()}, cache
