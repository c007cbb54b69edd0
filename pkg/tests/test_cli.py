import gzip
import math
import re
import struct
from pathlib import Path

import numpy as np
import pytest

from rnnlab.cli import main, parse_manifest
from rnnlab.config import ConfigError, format_config, load_config, parse_config
from rnnlab.trainer import METRICS_HEADER, load_checkpoint, read_metrics

TINY = """\
task.task = addition
task.length = 6
model.cell = rwa
model.hidden = 4
train.name = tiny
train.batch = 3
train.val_batch = 3
train.max_steps = 4
train.eval_every = 2
"""


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY)
    return p


def run(*argv):
    return main([str(a) for a in argv])


def test_train_creates_three_artifacts(tmp_path, cfg_file, capsys):
    out = tmp_path / "runs"
    assert run("train", "--config", cfg_file, "--seed", 7, "--out", out) == 0
    run_dir = out / "tiny"
    assert sorted(p.name for p in run_dir.iterdir()) == ["final.ckpt", "metrics.csv", "summary.txt"]
    assert (run_dir / "metrics.csv").read_text().splitlines()[0] == METRICS_HEADER
    assert load_checkpoint(run_dir / "final.ckpt").config.seed == 7
    assert "status: completed" in capsys.readouterr().out


def test_summary_echoes_effective_config_that_reproduces_run(tmp_path, cfg_file):
    out = tmp_path / "runs"
    run("train", "--config", cfg_file, "--out", out)
    summary = (out / "tiny" / "summary.txt").read_text()
    echoed = summary.split("# effective config\n", 1)[1]
    cfg = parse_config(echoed)
    assert format_config(cfg) == echoed
    again = tmp_path / "again.cfg"
    again.write_text(echoed)
    run("train", "--config", again, "--out", tmp_path / "runs2")
    assert (out / "tiny" / "metrics.csv").read_bytes() == (tmp_path / "runs2" / "tiny" / "metrics.csv").read_bytes()


def test_unknown_key_exits_2_naming_key_and_line(tmp_path, capsys):
    p = tmp_path / "bad.cfg"
    p.write_text("task.task = addition\nmodel.hiden = 3\n")
    assert run("train", "--config", p, "--out", tmp_path) == 2
    err = capsys.readouterr().err
    assert "model.hiden" in err and "line 2" in err


def test_missing_config_exits_2(tmp_path, capsys):
    assert run("train", "--config", tmp_path / "none.cfg") == 2
    assert run("train") == 2
    assert run() == 2
    assert run("frobnicate") == 2


def test_paper_preset_on_addition(tmp_path, monkeypatch):
    seen = {}

    def fake(config, out, resume=None):
        seen["config"] = config
        return 0, {"status": "completed"}

    monkeypatch.setattr("rnnlab.cli.run_training", fake)
    assert run("train", "--config", "addition_desk.cfg", "--preset", "paper", "--out", tmp_path) == 0
    cfg = seen["config"]
    assert (cfg.hidden, cfg.batch, cfg.length) == (250, 100, 1000)


def test_shipped_preset_found_by_file_name(tmp_path, monkeypatch):
    seen = {}
    monkeypatch.setattr("rnnlab.cli.run_training",
                        lambda config, out, resume=None: (seen.setdefault("c", config), {"status": "ok"}) and (0, {}))
    assert run("train", "--config", "addition_desk.cfg", "--seed", "7", "--out", tmp_path) == 0
    assert seen["c"].seed == 7 and seen["c"].hidden == 32


def test_set_overrides(tmp_path, cfg_file):
    run("train", "--config", cfg_file, "--out", tmp_path, "--set", "train.max_steps=1", "--set", "train.name=x")
    assert [r.step for r in read_metrics(tmp_path / "x" / "metrics.csv")] == [0, 1]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_abort_exits_3(tmp_path, cfg_file, monkeypatch):
    from rnnlab import tasks
    real = tasks.gen_addition

    def poisoned(seed, batch, length, index=0):
        b = real(seed, batch, length, index)
        b.inputs[:] = np.inf
        return b

    monkeypatch.setattr(tasks, "gen_addition", poisoned)
    assert run("train", "--config", cfg_file, "--out", tmp_path) == 3
    assert (tmp_path / "tiny" / "summary.txt").read_text().startswith("status: aborted")


def test_resume_appends_rows_matching_uninterrupted(tmp_path, cfg_file):
    run("train", "--config", cfg_file, "--out", tmp_path / "full", "--set", "train.max_steps=8")
    run("train", "--config", cfg_file, "--out", tmp_path / "part")
    ckpt = tmp_path / "part" / "tiny" / "final.ckpt"
    assert run("train", "--config", cfg_file, "--out", tmp_path / "part", "--set", "train.max_steps=8",
               "--resume", ckpt) == 0
    full = (tmp_path / "full" / "tiny" / "metrics.csv").read_text().splitlines()
    part = (tmp_path / "part" / "tiny" / "metrics.csv").read_text().splitlines()
    assert part == full


def test_resume_with_other_config_is_rejected(tmp_path, cfg_file):
    run("train", "--config", cfg_file, "--out", tmp_path)
    ckpt = tmp_path / "tiny" / "final.ckpt"
    assert run("train", "--config", cfg_file, "--out", tmp_path, "--set", "train.lr=0.5", "--resume", ckpt) == 2


# -- eval -----------------------------------------------------------------------------------

def _write_idx(path, arr, gz=False):
    arr = np.asarray(arr, dtype=np.uint8)
    head = struct.pack(">BBBB", 0, 0, 0x08, arr.ndim) + b"".join(struct.pack(">I", d) for d in arr.shape)
    data = head + arr.tobytes()
    path.write_bytes(gzip.compress(data) if gz else data)


@pytest.fixture
def mnist_dir(tmp_path):
    rng = np.random.default_rng(0)
    folder = tmp_path / "mnist"
    folder.mkdir()
    for prefix, n in (("train", 40), ("t10k", 12)):
        labels = rng.integers(0, 10, size=n)
        images = rng.integers(0, 256, size=(n, 28, 28))
        _write_idx(folder / f"{prefix}-images-idx3-ubyte", images)
        _write_idx(folder / f"{prefix}-labels-idx1-ubyte.gz", labels, gz=True)
    return folder


def test_eval_round_trip_of_saved_mnist_model(tmp_path, mnist_dir, capsys, monkeypatch):
    monkeypatch.setenv("RNNLAB_DATA", str(tmp_path))
    cfg = tmp_path / "m.cfg"
    cfg.write_text("task.task = mnist\ntask.data = mnist\nmodel.hidden = 3\ntrain.name = m\n"
                   "train.batch = 4\ntrain.val_batch = 8\ntrain.max_steps = 1\n")
    assert run("train", "--config", cfg, "--out", tmp_path / "runs") == 0
    capsys.readouterr()
    ckpt = tmp_path / "runs" / "m" / "final.ckpt"
    assert run("eval", "--checkpoint", ckpt, "--config", cfg) == 0
    out = capsys.readouterr().out
    acc = float(re.search(r"accuracy: (\S+)", out).group(1))
    assert 0.0 <= acc <= 1.0 and "examples: 12" in out
    table = (tmp_path / "runs" / "m" / "eval_table.md").read_text().splitlines()
    assert table[0].startswith("| run |") and "| m | mnist |" in table[2]
    run("eval", "--checkpoint", ckpt)
    assert len((tmp_path / "runs" / "m" / "eval_table.md").read_text().splitlines()) == 4


def test_eval_uniform_model_on_corpus_prints_log2_vocab(tmp_path, capsys):
    corpus = tmp_path / "c.txt"
    corpus.write_bytes(bytes(np.random.default_rng(1).integers(97, 102, size=3000).astype(np.uint8)))
    cfg = tmp_path / "c.cfg"
    cfg.write_text(f"task.task = charlm\ntask.data = {corpus}\nmodel.cell = rwa\nmodel.hidden = 3\n"
                   "model.embedding = 2\ntrain.name = c\ntrain.batch = 2\ntrain.val_batch = 2\n"
                   "train.bptt_len = 10\ntrain.max_steps = 0\n")
    assert run("train", "--config", cfg, "--out", tmp_path) == 0
    ckpt = load_checkpoint(tmp_path / "c" / "final.ckpt")
    ckpt.params["W_out"][:] = 0.0
    ckpt.params["b_out"][:] = 0.0
    from rnnlab.trainer import save_checkpoint
    save_checkpoint(tmp_path / "uniform.ckpt", ckpt)
    capsys.readouterr()
    assert run("eval", "--checkpoint", tmp_path / "uniform.ckpt", "--table", tmp_path / "t.md") == 0
    bpc = float(re.search(r"bpc: (\S+)", capsys.readouterr().out).group(1))
    assert abs(bpc - math.log2(5)) < 1e-12


def test_eval_missing_checkpoint_exits_2(tmp_path):
    assert run("eval", "--checkpoint", tmp_path / "absent.ckpt") == 2


def test_eval_shape_mismatch_exits_3(tmp_path, cfg_file):
    run("train", "--config", cfg_file, "--out", tmp_path)
    wider = tmp_path / "wide.cfg"
    wider.write_text(TINY.replace("model.hidden = 4", "model.hidden = 5"))
    assert run("eval", "--checkpoint", tmp_path / "tiny" / "final.ckpt", "--config", wider) == 3


def test_eval_corrupt_checkpoint_exits_2(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTRIGHT" + b"\0" * 20)
    assert run("eval", "--checkpoint", bad) == 2


# -- lemma1 ---------------------------------------------------------------------------------

def test_lemma1_analytic_report(tmp_path, capsys):
    assert run("lemma1", "--c", "0.5", "--steps", "200", "--mode", "analytic", "--out", tmp_path) == 0
    lines = (tmp_path / "lemma1.csv").read_text().splitlines()
    assert lines[0] == "step,a_t,d_t,ratio,bound,feasible" and len(lines) == 201
    for line in lines[2:]:
        _, _, _, ratio, bound, feas = line.split(",")
        assert feas == "1" and float(ratio) >= float(bound) - 1e-12
    assert "bound violations = 0" in capsys.readouterr().out


def test_lemma1_analytic_to_stdout(capsys):
    assert run("lemma1", "--c", "0.3", "--steps", "20", "--z", "uniform") == 0
    out = capsys.readouterr().out
    assert out.startswith("step,a_t,d_t,ratio,bound,feasible\n") and "growth bound" in out


@pytest.mark.parametrize("c", ["1.5", "0", "-0.1"])
def test_lemma1_bad_amplitude_exits_2(c):
    assert run("lemma1", "--c", c, "--steps", "10") == 2


def test_lemma1_train_contrast(tmp_path, capsys):
    assert run("lemma1", "--c", "0.5", "--steps", "20", "--mode", "train", "--cell", "rwa", "--cell",
               "rda-sigmoid-id", "--length", "8", "--hidden", "3", "--out", tmp_path) == 0
    out = capsys.readouterr().out
    assert "| rwa |" in out and "| rda-sigmoid-id |" in out
    assert (tmp_path / "parity-rwa-s0" / "metrics.csv").exists()
    assert "final_mse" in (tmp_path / "parity-rda-sigmoid-id-s0" / "summary.txt").read_text()


# -- plot -----------------------------------------------------------------------------------

@pytest.fixture
def two_runs(tmp_path, cfg_file):
    for seed in (0, 1):
        run("train", "--config", cfg_file, "--seed", seed, "--out", tmp_path / f"r{seed}",
            "--set", f"train.name=seed{seed}")
    return [tmp_path / f"r{s}" / f"seed{s}" / "metrics.csv" for s in (0, 1)]


def test_plot_two_runs_two_polylines(tmp_path, two_runs):
    svg = tmp_path / "p.svg"
    assert run("plot", "--metrics", *two_runs, "--column", "val_loss", "--out", svg, "--log") == 0
    text = svg.read_text()
    assert text.startswith("<svg") and text.rstrip().endswith("</svg>")
    assert text.count("<polyline") == 2
    assert ">seed0<" in text and ">seed1<" in text
    import xml.etree.ElementTree as ET
    ET.fromstring(text)


def test_plot_unknown_column_exits_2(tmp_path, two_runs):
    assert run("plot", "--metrics", two_runs[0], "--column", "nope", "--out", tmp_path / "p.svg") == 2


def test_plot_empty_csv_exits_2(tmp_path):
    p = tmp_path / "metrics.csv"
    p.write_text(METRICS_HEADER + "\n")
    assert run("plot", "--metrics", p, "--column", "train_loss", "--out", tmp_path / "p.svg") == 2


def test_plot_log_scale_rejects_non_positive(tmp_path, capsys):
    p = tmp_path / "metrics.csv"
    p.write_text(METRICS_HEADER + "\n0,0,1.0,,,,,0\n1,0,0.0,,,,,0\n")
    assert run("plot", "--metrics", p, "--column", "train_loss", "--out", tmp_path / "p.svg", "--log") == 2
    assert "log scale" in capsys.readouterr().err
    assert run("plot", "--metrics", p, "--column", "train_loss", "--out", tmp_path / "p.svg") == 0


# -- manifest -------------------------------------------------------------------------------

def test_manifest_runs_with_offset_seeds(tmp_path, cfg_file, capsys):
    m = tmp_path / "m.txt"
    m.write_text(f"out = {tmp_path / 'mout'}\nseed_policy = offset\nseed = 10\n"
                 f"run = {cfg_file.name} train.name=a\nrun = {cfg_file.name} train.name=b model.cell=gru\n")
    assert run("manifest", "--manifest", m) == 0
    a = load_checkpoint(tmp_path / "mout" / "a" / "final.ckpt").config
    b = load_checkpoint(tmp_path / "mout" / "b" / "final.ckpt").config
    assert (a.seed, b.seed, b.cell) == (10, 11, "gru")
    out = capsys.readouterr().out
    assert "| a | addition | rwa | 10 | completed |" in out
    assert (tmp_path / "mout" / "manifest_summary.md").exists()


def test_manifest_seed_lists_and_parallel_jobs(tmp_path, cfg_file):
    m = tmp_path / "m.txt"
    m.write_text(f"run = {cfg_file} seeds=0,1,2\n")
    assert run("manifest", "--manifest", m, "--out", tmp_path / "o", "--jobs", "2") == 0
    names = sorted(p.name for p in (tmp_path / "o").iterdir() if p.is_dir())
    assert names == ["tiny-s0", "tiny-s1", "tiny-s2"]
    serial = tmp_path / "serial"
    run("manifest", "--manifest", m, "--out", serial)
    for n in names:
        assert (serial / n / "metrics.csv").read_bytes() == (tmp_path / "o" / n / "metrics.csv").read_bytes()


def test_manifest_duplicate_names_rejected(tmp_path, cfg_file):
    text = f"run = {cfg_file}\nrun = {cfg_file}\n"
    with pytest.raises(ConfigError, match="unique"):
        parse_manifest(text, tmp_path)
    m = tmp_path / "m.txt"
    m.write_text(text)
    assert run("manifest", "--manifest", m, "--out", tmp_path / "never") == 2
    assert not (tmp_path / "never").exists()


def test_manifest_fixed_policy(tmp_path, cfg_file):
    man = parse_manifest(f"seed = 4\nrun = {cfg_file} train.name=a\nrun = {cfg_file} train.name=b train.seed=9\n",
                         tmp_path)
    assert [r.seed for r in man.runs] == [4, 9]
    with pytest.raises(ConfigError):
        parse_manifest("colour = blue\n", tmp_path)
