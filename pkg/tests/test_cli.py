import pytest

from dgc.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from dgc.data import load_manifest
from dgc.trainer import load_checkpoint

SMALL = """\
image_size = 16
synthetic_size = 16
encoder_widths = 8,16
encoder_kernels = 3,3
encoder_strides = 2,2
latent_dim = 16
n_labels = 4
prevalence = 0.25
frequencies = 2,3,2.5,3.5
amplitude = 0.2
epochs = 4
batch_size = 16
lr = 0.01
n_train = 160
n_val = 40
n_test = 40
"""


@pytest.fixture
def small_cfg(tmp_path):
    p = tmp_path / "small.cfg"
    p.write_text(SMALL)
    return str(p)


def _body(path):
    """CSV content without the comment header."""
    return [ln for ln in path.read_text().splitlines() if not ln.startswith("#")]


def test_gen_data_writes_reproducible_dataset(tmp_path, small_cfg):
    for name in ("a", "b"):
        assert main(["gen-data", "--config", small_cfg, "--out", str(tmp_path / name)]) == EXIT_OK
    for f in ("manifest.csv", "train.csv", "val.csv", "test.csv", "train.txt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    train = load_manifest(tmp_path / "a" / "train.csv")
    assert len(train) == 160 and train.n_labels == 4
    assert (tmp_path / "a" / train.records[0].image_path).is_file()
    head = (tmp_path / "a" / "train.csv").read_text()
    assert "# config.data_seed=0" in head and "# config.lr=0.01" in head
    pgm = (tmp_path / "a" / train.records[0].image_path).read_bytes()
    assert b"# config.data_seed=0" in pgm
    ids = [set(load_manifest(tmp_path / "a" / f"{s}.csv").patients()) for s in ("train", "val", "test")]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])


def test_train_then_eval(tmp_path, small_cfg, capsys):
    data, run, ev = tmp_path / "data", tmp_path / "run", tmp_path / "ev"
    assert main(["gen-data", "--config", small_cfg, "--out", str(data)]) == EXIT_OK
    args = ["train", "--config", small_cfg, "--train", str(data / "train.csv"), "--val", str(data / "val.csv")]
    assert main(args + ["--out", str(run), "--mode", "deterministic", "--seed", "3"]) == EXIT_OK
    ckpt = load_checkpoint(run / "checkpoint.dgc")
    assert ckpt.config.init_seed == 3 and ckpt.config.shuffle_seed == 4 and ckpt.model.mode == "deterministic"
    assert _body(run / "history.csv")[0] == "epoch,train_loss,val_mean_auc,wall_seconds"
    assert "wall_seconds=" in (run / "run.log").read_text()

    ev_args = ["eval", "--checkpoint", str(run / "checkpoint.dgc"), "--manifest", str(data / "train.csv"), "--svg"]
    assert main(ev_args + ["--out", str(ev)]) == EXIT_OK
    rows = _body(ev / "auc.csv")
    mean = float(rows[-1].split(",")[2])
    assert mean > 0.95
    assert (ev / "roc.svg").read_text().startswith("<svg")
    assert "# checkpoint.init_seed=3" in (ev / "roc.csv").read_text()

    # same command again: CSV artifacts are byte-identical
    first = {f: (ev / f).read_bytes() for f in ("roc.csv", "auc.csv")}
    assert main(ev_args + ["--out", str(ev)]) == EXIT_OK
    assert first == {f: (ev / f).read_bytes() for f in ("roc.csv", "auc.csv")}
    run2 = tmp_path / "run2"
    assert main(args + ["--out", str(run2), "--mode", "deterministic", "--seed", "3"]) == EXIT_OK
    assert (run / "checkpoint.dgc").read_bytes() == (run2 / "checkpoint.dgc").read_bytes()


def test_compare_table_shape(tmp_path, small_cfg, capsys):
    out = tmp_path / "cmp"
    assert main(["compare", "--config", small_cfg, "--seeds", "2", "--eval-noise-std", "0.1", "--out", str(out)]) == EXIT_OK
    rows = _body(out / "compare.csv")
    assert rows[0] == "run,label,auc_mean,auc_std,delta,n_repeats"
    assert len(rows) - 1 == 2 * (4 + 1)
    assert {r.split(",")[0] for r in rows[1:]} == {"generative", "deterministic"}
    assert "# eval_noise_std=0.1" in (out / "compare.csv").read_text()
    assert "non-inferiority" in capsys.readouterr().out
    first = (out / "compare.csv").read_bytes()
    assert main(["compare", "--config", small_cfg, "--seeds", "2", "--eval-noise-std", "0.1", "--out", str(out)]) == EXIT_OK
    assert (out / "compare.csv").read_bytes() == first


def test_grad_check_command(capsys):
    assert main(["grad-check", "--seeds", "1"]) == EXIT_OK
    assert "0 failing" in capsys.readouterr().out


def test_usage_errors(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("epocs = 3\n")
    assert main(["train", "--config", str(bad), "--train", "x", "--val", "y"]) == EXIT_USAGE
    assert "unknown key" in capsys.readouterr().err
    assert main(["bogus"]) == EXIT_USAGE
    assert main([]) == EXIT_USAGE
    assert main(["eval", "--checkpoint", str(tmp_path / "none.dgc"), "--manifest", "m.csv"]) == EXIT_USAGE


def test_corrupt_checkpoint_is_runtime_error(tmp_path, small_cfg, capsys):
    data = tmp_path / "data"
    main(["gen-data", "--config", small_cfg, "--out", str(data)])
    ck = tmp_path / "bad.dgc"
    ck.write_bytes(b"DGC1\x01\x00\x00\x00\xff")
    code = main(["eval", "--checkpoint", str(ck), "--manifest", str(data / "val.csv"), "--out", str(tmp_path / "e")])
    assert code == EXIT_RUNTIME
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and "corrupt" in err[0]
