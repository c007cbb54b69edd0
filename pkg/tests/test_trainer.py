import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rnnlab import tasks
from rnnlab.cells import state_from_values
from rnnlab.config import RunConfig, format_config
from rnnlab.numerics import AdamState, Tape, adam_step, clip_gradients, make_rng
from rnnlab.trainer import (
    CHECKPOINT_MAGIC,
    METRICS_HEADER,
    Checkpoint,
    CheckpointError,
    DatasetError,
    MetricsRow,
    MetricsWriter,
    batch_accuracy,
    batch_loss,
    build_model,
    build_task,
    decode_checkpoint,
    encode_checkpoint,
    evaluate,
    evaluate_batch,
    evaluate_corpus,
    load_checkpoint,
    read_metrics,
    save_checkpoint,
    smoothed,
    steps_to_threshold,
    train,
    train_char_lm,
)


def small(**kw):
    base = dict(task="addition", cell="rwa", length=8, hidden=6, batch=4, val_batch=4,
                max_steps=6, eval_every=2)
    base.update(kw)
    return RunConfig(**base)


def lm_config(**kw):
    base = dict(task="charlm", cell="gru", hidden=5, embedding=3, batch=2, val_batch=1,
                bptt_len=4, max_steps=3, eval_every=2)
    base.update(kw)
    return RunConfig(**base)


def tiny_corpus(text=b"abcabcaabbccabcacbabcabbaccabcbacab" * 3):
    return tasks.split_corpus(text, 0.8, 0.1)


# -- metrics rows --------------------------------------------------------------------------

def test_metrics_header_is_exact():
    assert METRICS_HEADER == "step,wall_ms,train_loss,train_accuracy,val_loss,val_accuracy,bpc,attention_clamp_count"


def test_metrics_row_empty_fields_and_round_trip():
    row = MetricsRow(3, 0, 0.25, None, 0.5, None, None, 7)
    assert row.to_csv() == "3,0,0.25,,0.5,,,7"
    assert MetricsRow.from_csv(row.to_csv()) == row


def test_metrics_writer_uses_lf_and_header(tmp_path):
    path = tmp_path / "m.csv"
    with MetricsWriter(path) as sink:
        sink(MetricsRow(0, 0, 1.0))
        sink(MetricsRow(1, 0, 0.5))
    raw = path.read_bytes()
    assert b"\r" not in raw
    assert raw.decode("utf-8").splitlines()[0] == METRICS_HEADER
    assert [r.step for r in read_metrics(path)] == [0, 1]


def test_metrics_writer_append_keeps_single_header(tmp_path):
    path = tmp_path / "m.csv"
    with MetricsWriter(path) as sink:
        sink(MetricsRow(0, 0, 1.0))
    with MetricsWriter(path, append=True) as sink:
        sink(MetricsRow(5, 0, 0.5))
    assert path.read_text().count("step,") == 1
    assert [r.step for r in read_metrics(path)] == [0, 5]


# -- smoothing and thresholds -----------------------------------------------------------------

def test_smoothed_needs_full_window():
    assert smoothed([1.0, 2.0], 3) is None
    assert smoothed([5.0, 1.0, 2.0, 3.0], 3) == 2.0


def test_steps_to_threshold_reports_step_numbers():
    series = [1.0, 1.0, 0.0, 0.0, 0.0]
    # window 2: means over steps (1,2)=1, (2,3)=.5, (3,4)=0
    assert steps_to_threshold(series, 0.6, "<", window=2) == 3
    assert steps_to_threshold(series, -1.0, "<", window=2) is None
    assert steps_to_threshold([0.5] * 3, 0.4, ">", window=3) == 3


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=80), st.integers(1, 10))
def test_steps_to_threshold_monotone_in_threshold(series, window):
    loose = steps_to_threshold(series, 0.01, "<", window)
    tight = steps_to_threshold(series, 0.001, "<", window)
    if tight is not None:
        assert loose is not None and loose <= tight


# -- training loop contracts -------------------------------------------------------------------

def test_max_steps_zero_emits_only_initial_row():
    cfg = small(max_steps=0)
    rows = []
    result = train(cfg, rows.append)
    assert [r.step for r in rows] == [0]
    model = build_model(cfg, build_task(cfg))
    init = model.init(make_rng(cfg.seed, 0))
    for k, v in init.items():
        assert np.array_equal(result.params[k], v)
    assert result.checkpoint.step == 0


def test_zero_learning_rate_leaves_parameters_bit_identical():
    cfg = small(lr=0.0, max_steps=10)
    before = train(cfg.replace(max_steps=0)).params
    after = train(cfg).params
    assert before.keys() == after.keys()
    for k in before:
        assert np.array_equal(before[k], after[k]), k


def test_rows_follow_eval_cadence_and_final_step():
    rows = []
    train(small(max_steps=5, eval_every=2), rows.append)
    assert [r.step for r in rows] == [0, 2, 4, 5]
    assert all(r.val_loss is not None and r.bpc is None for r in rows)
    assert all(r.train_accuracy is None for r in rows)


def test_accuracy_columns_filled_for_classification():
    rows = []
    train(small(task="copy", n_symbols=3, prefix_len=2, total_len=8, max_steps=2), rows.append)
    assert all(r.train_accuracy is not None and r.val_accuracy is not None for r in rows)


def test_stop_rule_ends_run_and_records_crossing():
    cfg = small(max_steps=50, stop_metric="train_loss", stop_op="<", stop_threshold=1e9, smooth_window=3)
    rows = []
    result = train(cfg, rows.append)
    assert result.summary["status"] == "stopped"
    assert result.summary["steps_to_threshold"] == 3
    assert rows[-1].step == 3


def test_unreached_threshold_is_reported():
    cfg = small(max_steps=4, stop_metric="train_loss", stop_threshold=-1.0, smooth_window=2)
    assert train(cfg).summary["steps_to_threshold"] == "not reached"


def test_training_is_deterministic():
    a, b = [], []
    train(small(), a.append)
    train(small(), b.append)
    assert [r.to_csv() for r in a] == [r.to_csv() for r in b]
    c = []
    train(small(seed=1), c.append)
    assert [r.to_csv() for r in a] != [r.to_csv() for r in c]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_abort_path_via_nan_targets(monkeypatch):
    cfg = small(max_steps=3)
    real = tasks.gen_addition

    def poisoned(seed, batch, length, index=0):
        b = real(seed, batch, length, index)
        if index == 2:
            b.targets[:] = np.nan
        return b

    monkeypatch.setattr(tasks, "gen_addition", poisoned)
    rows = []
    result = train(cfg, rows.append)
    assert result.summary["status"] == "aborted"
    assert "step 2" in result.summary["message"]
    assert rows[-1].step == 2 and math.isnan(rows[-1].train_loss)
    assert result.checkpoint.step == 1


def test_missing_mnist_data_fails_before_training(tmp_path):
    with pytest.raises(DatasetError):
        train(small(task="mnist", data=str(tmp_path / "nowhere")))


# -- loss and accuracy ---------------------------------------------------------------------

@pytest.mark.parametrize("task", ["copy", "multicopy"])
def test_loss_ignores_masked_out_targets(task):
    cfg = small(task=task, n_symbols=3, prefix_len=2, total_len=10, copies=2, gap=1)
    t = build_task(cfg)
    model = build_model(cfg, t)
    params = model.init(make_rng(3))
    batch = t.batch(1)
    batch.mask[:, :3] = 0.0
    loss_a, _ = evaluate_batch(model, params, batch, t.final_only)
    off = batch.mask == 0
    batch.targets[off] = (batch.targets[off] + 1) % t.out_dim
    loss_b, _ = evaluate_batch(model, params, batch, t.final_only)
    assert loss_a == loss_b


def test_mse_loss_ignores_masked_positions():
    cfg = small(task="parity", length=6)
    t = build_task(cfg)
    model = build_model(cfg, t)
    params = model.init(make_rng(0))
    batch = t.batch(0)
    batch.mask[:, 3:] = 0.0
    base = evaluate_batch(model, params, batch, False)[0]
    batch.targets[:, 3:] += 100.0
    assert evaluate_batch(model, params, batch, False)[0] == base


def test_perfect_predictor_on_copy_batch_has_accuracy_one():
    b = tasks.gen_copy(0, 5, 4, 3, 12)
    logits = np.full(b.targets.shape + (5,), -10.0)
    np.put_along_axis(logits, b.targets[..., None].astype(int), 10.0, axis=-1)
    correct, counted = batch_accuracy(logits, b, False)
    assert counted == b.mask.sum() and correct == counted


# -- bits per character -------------------------------------------------------------------

def _zero_readout(params):
    params = dict(params)
    params["W_out"] = np.zeros_like(params["W_out"])
    params["b_out"] = np.zeros_like(params["b_out"])
    return params


@pytest.mark.parametrize("cell", ["rwa", "rda-sigmoid-id", "lstm", "gru"])
def test_uniform_predictor_bpc_is_log2_vocab(cell):
    split = tiny_corpus()
    cfg = lm_config(cell=cell)
    model = build_model(cfg, type("T", (), {"input_dim": 3, "out_dim": split.vocab_size})())
    params = _zero_readout(model.init(make_rng(0)))
    ev = evaluate_corpus(model, params, split.part("train"), 2, 4)
    assert abs(ev["bpc"] - math.log2(split.vocab_size)) < 1e-12


def _gru_reference_bpc(params, ids, bptt_len):
    """Independent single-lane GRU forward with carried state."""
    sig = lambda x: 1.0 / (1.0 + np.exp(-x))
    E = params["E"]
    emb = E.shape[1]
    h = params["h0"].copy()
    nats, count = 0.0, 0
    usable = ((len(ids) - 1) // bptt_len) * bptt_len
    for t in range(usable):
        x = E[ids[t]]
        xh = np.concatenate([x, h])
        z = sig(xh @ params["W_z"] + params["b_z"])
        r = sig(xh @ params["W_r"] + params["b_r"])
        cand = np.tanh(x @ params["W_c"][:emb] + (r * h) @ params["W_c"][emb:] + params["b_c"])
        h = (1 - z) * h + z * cand
        logits = h @ params["W_out"] + params["b_out"]
        m = logits.max()
        logp = logits - m - math.log(np.exp(logits - m).sum())
        nats -= logp[ids[t + 1]]
        count += 1
    return nats / count / math.log(2.0)


def test_bpc_matches_hand_computed_cross_entropy_on_three_symbols():
    split = tiny_corpus()
    assert split.vocab_size == 3
    cfg = lm_config(cell="gru")
    model = build_model(cfg, type("T", (), {"input_dim": 3, "out_dim": 3})())
    params = model.init(make_rng(11))
    params["b_out"] = np.array([0.3, -0.2, 0.5])
    params["h0"] = np.array([0.1, -0.1, 0.2, 0.0, 0.05])
    ids = split.part("train")
    got = evaluate_corpus(model, params, ids, 1, 4)["bpc"]
    assert abs(got - _gru_reference_bpc(params, ids, 4)) < 1e-12


def test_constant_readout_bpc_matches_closed_form():
    split = tiny_corpus()
    cfg = lm_config(cell="rwa")
    model = build_model(cfg, type("T", (), {"input_dim": 3, "out_dim": 3})())
    params = _zero_readout(model.init(make_rng(2)))
    params["b_out"] = np.log(np.array([0.5, 0.25, 0.25]))
    ids = split.part("train")
    lanes, bptt = 2, 4
    stripe, _ = tasks.lane_layout(len(ids), lanes, bptt)
    step = (len(ids) - 1) // lanes
    targets = np.concatenate([ids[k * step + 1:k * step + 1 + stripe] for k in range(lanes)])
    p = np.array([0.5, 0.25, 0.25])
    expected = float(np.mean(-np.log2(p[targets])))
    assert abs(evaluate_corpus(model, params, ids, lanes, bptt)["bpc"] - expected) < 1e-12


# -- character model training --------------------------------------------------------------

def test_char_lm_carry_matches_state_leaving_window():
    split = tiny_corpus()
    cfg = lm_config(max_steps=1)
    result = train_char_lm(cfg, corpus=split)
    t = build_task
    model = build_model(cfg, type("T", (), {"input_dim": 3, "out_dim": 3})())
    params = model.init(make_rng(cfg.seed, 0))
    batch = tasks.corpus_window(split.part("train"), cfg.batch, cfg.bptt_len, 0, 3)
    tape = Tape()
    _, final = model.run(model.bind(tape, params), batch)
    assert np.array_equal(result.checkpoint.extra["carry/h"], final.values()["h"])
    del t


def test_char_lm_matches_manual_truncated_bptt():
    split = tiny_corpus()
    cfg = lm_config(cell="rda-sigmoid-id", max_steps=2)
    result = train_char_lm(cfg, corpus=split)
    model = build_model(cfg, type("T", (), {"input_dim": 3, "out_dim": 3})())
    params = model.init(make_rng(cfg.seed, 0))
    adam = AdamState(lr=cfg.lr)
    carried = None
    ids = split.part("train")
    for w in range(2):
        batch = tasks.corpus_window(ids, cfg.batch, cfg.bptt_len, w, 3)
        tape = Tape()
        nodes = model.bind(tape, params)
        state = None if carried is None else state_from_values(tape, carried)
        logits, final = model.run(nodes, batch, state)
        grads = tape.backward(batch_loss(logits, batch, False))
        carried = final.values()
        params = adam_step(adam, params, clip_gradients(grads, cfg.clip))
    for k in params:
        assert np.array_equal(params[k], result.params[k]), k


def test_window_gradient_excludes_next_window_loss():
    """Gradient of window 1's loss with a detached carry differs from the joint-tape gradient.

    The joint tape runs both windows with the state flowing through as a live
    node, so window 1's loss reaches window 0's computation; the truncated
    gradient must equal the joint gradient only through window 1's own path.
    """
    split = tiny_corpus()
    cfg = lm_config(cell="gru")
    model = build_model(cfg, type("T", (), {"input_dim": 3, "out_dim": 3})())
    params = model.init(make_rng(5))
    ids = split.part("train")
    w0, w1 = (tasks.corpus_window(ids, 2, 4, w, 3) for w in (0, 1))

    from rnnlab.cells import unroll
    from rnnlab.numerics import ops

    def joint(detach):
        tape = Tape()
        nodes = model.bind(tape, params)
        cell = {k: v for k, v in nodes.items() if k not in ("E", "W_out", "b_out")}
        xs0 = ops.gather_rows(nodes["E"], w0.inputs)
        _, s0 = unroll(model.spec, cell, xs0, fused=False)
        if detach:
            s0 = state_from_values(tape, s0.values())
        xs1 = ops.gather_rows(nodes["E"], w1.inputs)
        out1, _ = unroll(model.spec, cell, xs1, s0, fused=False)
        logits = ops.matmul(out1, nodes["W_out"]) + nodes["b_out"]
        return tape.backward(batch_loss(logits, w1, False))

    tape = Tape()
    _, s0 = model.run(model.bind(tape, params), w0)
    tape = Tape()
    logits, _ = model.run(model.bind(tape, params), w1, state_from_values(tape, s0.values()))
    truncated = tape.backward(batch_loss(logits, w1, False))
    detached, through = joint(True), joint(False)
    for k in truncated:
        np.testing.assert_allclose(truncated[k], detached[k], rtol=1e-12, atol=1e-14)
    assert any(not np.allclose(truncated[k], through[k]) for k in ("W_z", "W_r", "W_c"))


def test_one_symbol_corpus_has_zero_bpc():
    split = tasks.split_corpus(b"x" * 200, 0.8, 0.1)
    cfg = lm_config(max_steps=4, eval_every=2)
    rows = []
    train_char_lm(cfg, rows.append, corpus=split)
    assert all(r.bpc is not None and abs(r.bpc) < 1e-12 for r in rows)


def test_char_lm_resume_continues_carry_and_rows():
    split = tiny_corpus()
    cfg = lm_config(max_steps=6, eval_every=1)
    full = []
    train_char_lm(cfg, full.append, corpus=split)
    first = train_char_lm(cfg.replace(max_steps=3), corpus=split)
    ckpt = decode_checkpoint(encode_checkpoint(first.checkpoint))
    rest = []
    train_char_lm(cfg, rest.append, resume=ckpt, corpus=split)
    assert [r.to_csv() for r in rest] == [r.to_csv() for r in full if r.step > 3]


# -- checkpoints -------------------------------------------------------------------------------

def test_checkpoint_golden_layout():
    cfg = small()
    ckpt = Checkpoint(cfg, {"w": np.array([[1.0, 2.0], [3.0, 4.0]])},
                      AdamState(lr=0.5, beta1=0.25, beta2=0.125, eps=2.0, step_count=3), 7)
    text = format_config(cfg).encode("utf-8")

    def q(n):
        return struct.pack("<Q", n)

    def tensor(name, dims, data):
        raw = name.encode()
        return q(len(raw)) + raw + q(len(dims)) + b"".join(q(e) for e in dims) + struct.pack(f"<{len(data)}d", *data)

    expected = (b"RNNLAB01" + q(len(text)) + text + q(4)
                + tensor("param/w", (2, 2), [1.0, 2.0, 3.0, 4.0])
                + tensor("adam/hyper", (4,), [0.5, 0.25, 0.125, 2.0])
                + tensor("adam/step", (), [3.0])
                + tensor("train/step", (), [7.0]))
    assert encode_checkpoint(ckpt) == expected
    assert CHECKPOINT_MAGIC == b"RNNLAB01"


def test_checkpoint_save_load_save_is_byte_identical(tmp_path):
    result = train(small(max_steps=3))
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(a, result.checkpoint)
    save_checkpoint(b, load_checkpoint(a))
    assert a.read_bytes() == b.read_bytes()
    back = load_checkpoint(a)
    for k, v in result.params.items():
        assert np.array_equal(back.params[k], v)
    for k, v in result.checkpoint.adam.m.items():
        assert np.array_equal(back.adam.m[k], v)
    assert back.adam.step_count == 3 and back.step == 3


def _blob():
    return encode_checkpoint(train(small(max_steps=1)).checkpoint)


def test_corrupted_magic_is_rejected():
    data = bytearray(_blob())
    data[0] ^= 0xFF
    with pytest.raises(CheckpointError, match="magic"):
        decode_checkpoint(bytes(data))


@pytest.mark.parametrize("cut", [4, 20, 400, -3])
def test_truncated_checkpoint_is_rejected(cut):
    data = _blob()
    with pytest.raises(CheckpointError, match="truncated"):
        decode_checkpoint(data[:cut])


def test_trailing_bytes_are_rejected():
    with pytest.raises(CheckpointError, match="trailing"):
        decode_checkpoint(_blob() + b"\0")


def test_shape_disagreement_is_rejected(tmp_path):
    ckpt = train(small(max_steps=1)).checkpoint
    ckpt.params["W_out"] = np.zeros((2, 2))
    with pytest.raises(CheckpointError, match="W_out"):
        decode_checkpoint(encode_checkpoint(ckpt))
    ckpt.adam.m.pop("W_out")
    ckpt.adam.v.pop("W_out")
    blob = decode_checkpoint(encode_checkpoint(ckpt))
    with pytest.raises(CheckpointError, match="W_out"):
        train(small(), resume=blob)
    with pytest.raises(CheckpointError, match="W_out"):
        evaluate(blob)


@pytest.mark.parametrize("task,kw", [
    ("addition", {}),
    ("copy", dict(n_symbols=3, prefix_len=2, total_len=8)),
    ("parity", dict(length=6, batch=1, val_batch=1)),
])
def test_resume_reproduces_uninterrupted_rows(task, kw):
    cfg = small(task=task, max_steps=8, eval_every=1, **kw)
    full = []
    train(cfg, full.append)
    head = train(cfg.replace(max_steps=4))
    rest = []
    train(cfg, rest.append, resume=decode_checkpoint(encode_checkpoint(head.checkpoint)))
    assert [r.to_csv() for r in rest] == [r.to_csv() for r in full if r.step > 4]


def test_resume_preserves_stop_rule_history():
    cfg = small(max_steps=20, stop_metric="train_loss", stop_threshold=1e9, smooth_window=6)
    full = train(cfg)
    head = train(cfg.replace(max_steps=3))
    rest = train(cfg, resume=head.checkpoint)
    assert rest.summary["steps_to_threshold"] == full.summary["steps_to_threshold"] == 6


def test_evaluate_synthetic_checkpoint():
    result = train(small(max_steps=2))
    ev = evaluate(result.checkpoint)
    assert math.isfinite(ev["loss"]) and ev["accuracy"] is None
