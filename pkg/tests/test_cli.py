import csv
import json

import numpy as np
import pytest

from coreecho.cli import EXIT_CHECK, EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from coreecho.data import VideoDataset
from coreecho.training import load_checkpoint

SMALL = ["--clip-frames", "8", "--stride", "2", "--widths", "4,8", "--temporal-strides", "2,2",
         "--embed-dim", "8", "--batch-size", "8", "--seed", "0"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def kv(text):
    return dict(line.split("=", 1) for line in text.splitlines() if "=" in line and " " not in line)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A synthetic dataset plus one trained and one untrained checkpoint, shared by the module."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "d"), "--splits", "32,8,16", "--seed", "1",
                 "--frames-min", "16", "--frames-max", "24"]) == EXIT_OK
    assert main(["train", "--data", str(root / "d"), "--out", str(root / "r"), *SMALL, "--stage1-epochs", "20",
                 "--stage2-epochs", "2", "--lr", "1e-3", "--step-size", "100"]) == EXIT_OK
    assert main(["train", "--data", str(root / "d"), "--out", str(root / "u"), *SMALL, "--stage1-epochs", "0",
                 "--stage2-epochs", "0"]) == EXIT_OK
    return root


def test_synth_deterministic_and_manifest(tmp_path, capsys):
    for name in ("a", "b"):
        code, out, _ = run(capsys, "synth", "--out", tmp_path / name, "--count", 12, "--seed", 4,
                           "--frames-min", 16, "--frames-max", 20)
        assert code == EXIT_OK and kv(out)["videos"] == "12"
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f
    rows = list(csv.DictReader(open(tmp_path / "a" / "FileList.csv")))
    assert len(rows) == 12
    ds = VideoDataset.load(tmp_path / "a")
    assert len(ds) == 12 and all(10 <= y <= 80 for y in ds.labels)


def test_synth_usage_errors(tmp_path, capsys):
    assert run(capsys, "synth", "--out", tmp_path / "x", "--count", 0)[0] == EXIT_USAGE
    assert run(capsys, "synth", "--out", tmp_path / "x", "--splits", "1,2")[0] == EXIT_USAGE


def test_train_outputs(workdir):
    r = workdir / "r"
    assert {"checkpoint.crck", "last.crck", "log.jsonl", "config.effective", "val_metrics.json"} <= \
        {p.name for p in r.iterdir()}
    records = [json.loads(line) for line in (r / "log.jsonl").read_text().splitlines()]
    assert [rec["stage"] for rec in records] == ["stage1"] * 20 + ["stage2"] * 2
    assert "embed_dim = 8" in (r / "config.effective").read_text()
    assert json.loads((r / "val_metrics.json").read_text())["n"] == 8


def test_train_same_seed_identical(workdir, tmp_path):
    for name in ("a", "b"):
        assert main(["train", "--data", str(workdir / "d"), "--out", str(tmp_path / name), *SMALL,
                     "--stage1-epochs", "2", "--stage2-epochs", "1"]) == EXIT_OK
    a = (tmp_path / "a" / "checkpoint.crck").read_bytes()
    assert a == (tmp_path / "b" / "checkpoint.crck").read_bytes()


def test_checkpoint_cadence_and_resume_do_not_change_result(workdir, tmp_path):
    flags = [*SMALL, "--stage1-epochs", "3", "--stage2-epochs", "1"]
    assert main(["train", "--data", str(workdir / "d"), "--out", str(tmp_path / "full"), *flags]) == EXIT_OK
    assert load_checkpoint(tmp_path / "full" / "last.crck").meta
    assert main(["train", "--data", str(workdir / "d"), "--out", str(tmp_path / "part"), *flags,
                 "--checkpoint-every", "2"]) == EXIT_OK
    assert main(["train", "--data", str(workdir / "d"), "--out", str(tmp_path / "res"), *flags,
                 "--resume", str(tmp_path / "full" / "last.crck")]) == EXIT_OK
    final = (tmp_path / "full" / "checkpoint.crck").read_bytes()
    assert (tmp_path / "part" / "checkpoint.crck").read_bytes() == final
    assert (tmp_path / "res" / "checkpoint.crck").read_bytes() == final


def test_probe_keeps_encoder(workdir, tmp_path, capsys):
    code, out, _ = run(capsys, "probe", "--from", workdir / "r" / "checkpoint.crck", "--data", workdir / "d",
                       "--out", tmp_path / "p", *SMALL, "--transfer-epochs", 2)
    assert code == EXIT_OK
    info = kv(out)
    assert info["encoder_unchanged"] == "True"
    assert info["encoder_checksum_before"] == info["encoder_checksum_after"]


def test_finetune_random_init(workdir, tmp_path, capsys):
    code, out, _ = run(capsys, "finetune", "--init", "random", "--data", workdir / "d", "--out", tmp_path / "f",
                       *SMALL, "--transfer-epochs", 1)
    assert code == EXIT_OK and kv(out)["encoder_unchanged"] == "False"
    assert run(capsys, "probe", "--data", workdir / "d", "--out", tmp_path / "g")[0] == EXIT_USAGE


def test_eval(workdir, tmp_path, capsys):
    code, out, _ = run(capsys, "eval", "--ckpt", workdir / "r" / "checkpoint.crck", "--data", workdir / "d",
                       "--clips", 1, "--out", tmp_path / "e")
    assert code == EXIT_OK
    info = kv(out)
    assert info["n"] == "16" and float(info["MAE"]) >= 0
    assert json.loads((tmp_path / "e" / "test_metrics.json").read_text())["n"] == 16
    assert run(capsys, "eval", "--ckpt", workdir / "r" / "checkpoint.crck", "--data", workdir / "d",
               "--clips", 0)[0] == EXIT_USAGE


def test_embed_csv(workdir, tmp_path, capsys):
    path = tmp_path / "emb.csv"
    code, out, _ = run(capsys, "embed", "--ckpt", workdir / "r" / "checkpoint.crck", "--data", workdir / "d",
                       "--csv", path)
    assert code == EXIT_OK and "rows=16 dim=8" in out
    rows = list(csv.reader(open(path)))
    assert len(rows) == 17 and len(rows[0]) == 10


def test_diagnose_trained_beats_untrained(workdir, tmp_path, capsys):
    rates = {}
    for m in ("r", "u"):
        code, out, _ = run(capsys, "diagnose", "--ckpt", workdir / m / "checkpoint.crck", "--data",
                           workdir / "d", "--k", 3, "--triplets", 20000, "--out", tmp_path / m)
        assert code == EXIT_OK
        rates[m] = float(kv(out)["triplet_violation_rate"])
        assert (tmp_path / m / "continuity.json").exists()
    assert rates["r"] < rates["u"]


def test_gradcheck_passes(capsys):
    code, out, _ = run(capsys, "gradcheck", "--entries", 3)
    assert code == EXIT_OK and kv(out)["passed"] == "True"
    assert run(capsys, "gradcheck", "--dtype", "float32")[0] == EXIT_USAGE


def test_gradcheck_flags_failure(capsys):
    # a tolerance below float64 finite-difference accuracy must fail with the check exit code
    assert run(capsys, "gradcheck", "--entries", 3, "--tolerance", 1e-30)[0] == EXIT_CHECK


def test_saliency(workdir, tmp_path, capsys):
    ds = VideoDataset.load(workdir / "d")
    vid = ds.split("test")[0].id
    code, _, _ = run(capsys, "saliency", "--ckpt", workdir / "r" / "checkpoint.crck", "--data", workdir / "d",
                     "--ids", vid, "--out", tmp_path / "s")
    assert code == EXIT_OK
    sal = np.load(tmp_path / "s" / f"saliency_{vid}.npy")
    assert sal.shape == (8, 32, 32, 3) and sal.max() == 1.0
    assert run(capsys, "saliency", "--ckpt", workdir / "r" / "checkpoint.crck", "--data", workdir / "d",
               "--ids", "nope", "--out", tmp_path / "s")[0] == EXIT_DATA


def test_data_and_usage_exit_codes(workdir, tmp_path, capsys):
    assert run(capsys, "train", "--data", tmp_path / "missing", "--out", tmp_path / "o")[0] == EXIT_DATA
    assert run(capsys, "eval", "--ckpt", tmp_path / "missing.crck", "--data", workdir / "d")[0] == EXIT_DATA
    (tmp_path / "bad.crck").write_bytes(b"JUNK")
    assert run(capsys, "eval", "--ckpt", tmp_path / "bad.crck", "--data", workdir / "d")[0] == EXIT_DATA
    assert run(capsys, "train", "--data", workdir / "d", "--out", tmp_path / "o", "--plan", "magic")[0] == EXIT_USAGE
    (tmp_path / "c.cfg").write_text("nonsense = 1\n")
    assert run(capsys, "train", "--data", workdir / "d", "--out", tmp_path / "o",
               "--config", tmp_path / "c.cfg")[0] == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == EXIT_USAGE
