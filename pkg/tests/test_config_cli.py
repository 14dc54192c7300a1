import json
from importlib import resources

import numpy as np
import pytest

from mbanet import checkpoint as ck
from mbanet.cli import main
from mbanet.config import ConfigError, UnknownKeyError, parse_config
from mbanet.data import write_idx


def preset_cfg(name):
    return str(resources.files("mbanet") / "configs" / f"{name}.cfg")


TINY = """\
dataset = mnist
val_fraction = 0.2
stacks = 4, 6
activations = mba
k = 2
fc_widths = 16
dropout_rate = 0.0
init_std = 0.1
mba_bias_spread = 0.1
dtype = float64
base_lr = 0.05
weight_decay = 0.0
batch_size = 10
max_epochs = 2
wall_clock = false
"""


@pytest.fixture
def mnist_dir(tmp_path):
    r = np.random.default_rng(0)
    n = 100
    labels = np.arange(n) % 10
    images = r.integers(0, 40, (n, 28, 28)).astype(np.uint8)
    for i, lab in enumerate(labels):  # a class-specific bright block
        images[i, 2 * lab:2 * lab + 6, 4:24] = 220
    d = tmp_path / "mnist"
    d.mkdir()
    write_idx(d / "train-images-idx3-ubyte", images)
    write_idx(d / "train-labels-idx1-ubyte", labels.astype(np.uint8))
    write_idx(d / "t10k-images-idx3-ubyte", images[:20])
    write_idx(d / "t10k-labels-idx1-ubyte", labels[:20].astype(np.uint8))
    return d


def tiny_cfg(tmp_path, extra="", name="tiny.cfg"):
    path = tmp_path / name
    path.write_text(TINY + extra)
    return str(path)


def train_run(tmp_path, mnist_dir, out, *more, cfg=None):
    argv = ["train", "--config", cfg or tiny_cfg(tmp_path), "--data-dir", str(mnist_dir),
            "--out", str(tmp_path / out), *more]
    return main(argv)


# config parsing

def test_defaults_and_comments():
    cfg = parse_config("# comment only\n\nk = 2  # trailing\n")
    assert cfg.k == (2,) and cfg.base_lr == 0.1 and cfg.crop == 28 and cfg.resize_max == 36


def test_unknown_key_named():
    with pytest.raises(UnknownKeyError, match="momentm"):
        parse_config("momentm = 0.9\n")


@pytest.mark.parametrize("text", ["k", "k = x", "dataset = svhn", "activations = tanh",
                                  "stacks = 4, 4\nk = 1, 2, 3", "crop = 24", "dtype = int8",
                                  "momentum = 1.5"])
def test_bad_values(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_render_round_trip():
    cfg = parse_config(open(preset_cfg("ablation6")).read())
    again = parse_config(cfg.render())
    assert again.values == cfg.values
    assert again.fingerprint() == cfg.fingerprint()


def test_all_presets_parse():
    for name in ("shallow_vanilla", "shallow_apl", "shallow_mba", "deep_vanilla", "deep_apl",
                 "deep_mba", "baseline", "mnist_shallow_mba", "mnist_shallow_relu",
                 *[f"ablation{i}" for i in range(1, 10)]):
        parse_config(open(preset_cfg(name)).read()).network_spec()


def test_network_fingerprint_ignores_training_keys():
    a = parse_config("base_lr = 0.1")
    assert a.fingerprint() == parse_config("base_lr = 0.2\nseed = 5").fingerprint()
    assert a.fingerprint() != parse_config("k = 2").fingerprint()


# exit codes

def test_unknown_key_exit_2(tmp_path, mnist_dir, capsys):
    assert train_run(tmp_path, mnist_dir, "r", cfg=tiny_cfg(tmp_path, "momentm = 0.9\n")) == 2
    assert "momentm" in capsys.readouterr().err


def test_missing_config_exit_2(tmp_path):
    assert main(["train", "--config", str(tmp_path / "nope.cfg")]) == 2


def test_missing_data_exit_3(tmp_path, capsys):
    assert main(["train", "--config", tiny_cfg(tmp_path), "--data-dir", str(tmp_path / "void"),
                 "--out", str(tmp_path / "r")]) == 3
    assert main(["data-check", "--dataset", "mnist", "--data-dir", str(tmp_path / "void")]) == 3


def test_malformed_data_exit_3(tmp_path, mnist_dir):
    (mnist_dir / "train-labels-idx1-ubyte").write_bytes(b"\x00\x00\x08\x01\x00")
    assert train_run(tmp_path, mnist_dir, "r") == 3


def test_data_check(mnist_dir, capsys):
    assert main(["data-check", "--dataset", "mnist", "--data-dir", str(mnist_dir)]) == 0
    out = capsys.readouterr().out
    assert "train: 100 samples" in out and "test: 20 samples" in out


@pytest.fixture
def trained(tmp_path, mnist_dir):
    assert train_run(tmp_path, mnist_dir, "run") == 0
    return tmp_path / "run"


def test_train_outputs(trained):
    assert (trained / "config.resolved.cfg").exists()
    resolved = parse_config((trained / "config.resolved.cfg").read_text())
    assert resolved.stacks == ((4,), (6,)) and resolved.max_epochs == 2
    rows = (trained / "metrics.csv").read_text().splitlines()
    assert rows[0] == "epoch,lr,train_loss,train_error,val_error,wall_seconds"
    assert len(rows) == 3 and rows[1].endswith(",0.0")
    assert sorted(p.name for p in (trained / "checkpoints").iterdir()) == ["epoch_001.mbac",
                                                                           "epoch_002.mbac"]
    saved = ck.load(trained / "last.mbac")
    assert saved.epoch == 2 and saved.step == 2 * 8
    assert saved.config_text == resolved.network_text()


def test_checkpoint_mismatch_exit_4(tmp_path, mnist_dir, trained, capsys):
    other = tiny_cfg(tmp_path, "k = 3\n", name="other.cfg")
    code = main(["eval", "--checkpoint", str(trained / "last.mbac"), "--config", other,
                 "--data-dir", str(mnist_dir)])
    assert code == 4
    assert train_run(tmp_path, mnist_dir, "r2", "--resume", str(trained / "last.mbac"), cfg=other) == 4


def test_corrupt_checkpoint_exit_4(tmp_path, mnist_dir, trained):
    raw = bytearray((trained / "last.mbac").read_bytes())
    raw[200] ^= 0x55
    bad = tmp_path / "bad.mbac"
    bad.write_bytes(raw)
    assert main(["eval", "--checkpoint", str(bad), "--config", str(trained / "config.resolved.cfg"),
                 "--data-dir", str(mnist_dir)]) == 4


def test_eval_repeatable_and_read_only(trained, mnist_dir):
    ckpt = trained / "last.mbac"
    before = ckpt.read_bytes()
    outs = []
    for mc in (False, False, True):
        argv = ["eval", "--checkpoint", str(ckpt), "--data-dir", str(mnist_dir), "--split", "test"]
        assert main(argv + (["--multi-crop"] if mc else [])) == 0
        outs.append(json.loads((trained / "eval.json").read_text()))
    assert outs[0] == outs[1]
    assert outs[2]["multi_crop"] and len(outs[2]["per_class"]) == 10
    assert ckpt.read_bytes() == before


def test_metrics_identical_across_runs(tmp_path, mnist_dir):
    assert train_run(tmp_path, mnist_dir, "a") == 0
    assert train_run(tmp_path, mnist_dir, "b") == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_resume_continues_bit_exact(tmp_path, mnist_dir):
    cfg = tiny_cfg(tmp_path, "max_epochs = 3\ndropout_rate = 0.3\n")
    assert train_run(tmp_path, mnist_dir, "full", cfg=cfg) == 0
    assert train_run(tmp_path, mnist_dir, "part", "--max-epochs", "1", cfg=cfg) == 0
    assert train_run(tmp_path, mnist_dir, "part", "--resume",
                     str(tmp_path / "part" / "checkpoints" / "epoch_001.mbac"), cfg=cfg) == 0
    full = (tmp_path / "full" / "metrics.csv").read_text()
    assert (tmp_path / "part" / "metrics.csv").read_text() == full


def test_memorise_small_set(tmp_path, mnist_dir):
    cfg = tiny_cfg(tmp_path, "val_fraction = 0\nmax_epochs = 40\nbase_lr = 0.02\n")
    assert train_run(tmp_path, mnist_dir, "mem", cfg=cfg) == 0
    assert main(["eval", "--checkpoint", str(tmp_path / "mem" / "last.mbac"),
                 "--data-dir", str(mnist_dir), "--split", "train"]) == 0
    assert json.loads((tmp_path / "mem" / "eval.json").read_text())["error_rate"] == 0.0


def test_inspect_params_prints_count(capsys):
    assert main(["inspect", "params", "--config", preset_cfg("shallow_vanilla")]) == 0
    assert "93,024" in capsys.readouterr().out
    assert main(["inspect", "params", "--config", preset_cfg("shallow_mba")]) == 0
    assert "369,888" in capsys.readouterr().out


def test_inspect_mapping_untrained(tmp_path):
    out = tmp_path / "m.csv"
    assert main(["inspect", "mapping", "--config", preset_cfg("shallow_mba"), "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    bps = [float(v) for v in lines[2].split("=", 1)[1].split()]
    np.testing.assert_allclose(sorted(bps), [-0.75, -0.25, 0.25, 0.75], atol=1e-12)
    assert lines[3] == "x,u" and len(lines) == 4 + 601


def test_inspect_bad_indices_exit_2(tmp_path, capsys):
    cfg = preset_cfg("shallow_mba")
    assert main(["inspect", "mapping", "--config", cfg, "--indices", "0,0,9,9",
                 "--out", str(tmp_path / "m.csv")]) == 2
    assert main(["inspect", "mapping", "--config", cfg, "--indices", "0,0,1"]) == 2
    assert main(["inspect", "mapping", "--config", cfg, "--layer", "7"]) == 2


def test_inspect_hist(trained, mnist_dir, tmp_path):
    out = tmp_path / "h.csv"
    assert main(["inspect", "hist", "--checkpoint", str(trained / "last.mbac"), "--data-dir",
                 str(mnist_dir), "--samples", "20", "--bins", "50", "--out", str(out)]) == 0
    rows = out.read_text().splitlines()
    assert rows[0] == "bin_left,bin_right,count" and len(rows) == 1 + 50 + 2
    # first MBA input is 4 channels at 14 x 14 after pooling
    assert sum(int(r.rsplit(",", 1)[1]) for r in rows[1:]) == 20 * 4 * 14 * 14


def test_mnist_preset_smoke(tmp_path, mnist_dir):
    code = main(["train", "--config", preset_cfg("mnist_shallow_mba"), "--data-dir", str(mnist_dir),
                 "--out", str(tmp_path / "desk"), "--max-epochs", "1"])
    assert code == 0
    assert list((tmp_path / "desk" / "checkpoints").glob("*.mbac"))
