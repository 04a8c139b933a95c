import csv

import pytest

from sodnet.cli import main

TINY = ["--set", "encoder.stage_dims=4,8,16,32", "--set", "encoder.window=4", "--set", "decoder.r=1",
        "--set", "decoder.d_mab=8", "--set", "decoder.window=4", "--set", "train.epochs=1",
        "--set", "train.batch=4", "--set", "train.image_size=16"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--synthetic", "10", "--seed", "1", "--out", str(out), "--quiet", *TINY]) == 0
    return out


def test_train_writes_run_files(trained):
    names = {p.name for p in trained.iterdir()}
    assert names == {"checkpoint.m3nt", "checkpoint.m3nt.cfg", "train_log.csv", "data"}


def test_infer_then_eval(trained, tmp_path):
    pred = tmp_path / "pred"
    assert main(["infer", "--checkpoint", str(trained / "checkpoint.m3nt"), "--images", str(trained / "data"),
                 "--out", str(pred)]) == 0
    assert len(list(pred.glob("*.pgm"))) == 10
    report = tmp_path / "report.csv"
    assert main(["eval", "--pred", str(pred), "--gt", str(trained / "data"), "--out", str(report)]) == 0
    rows = list(csv.reader(report.open()))
    assert len(rows) >= 11
    assert (tmp_path / "report_curves.csv").exists()


def test_infer_is_deterministic(trained, tmp_path):
    for d in ("a", "b"):
        main(["infer", "--checkpoint", str(trained / "checkpoint.m3nt"), "--images", str(trained / "data"),
              "--out", str(tmp_path / d), "--all-levels"])
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.pgm"))
    assert len(files) == 40
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_gen_data(tmp_path):
    assert main(["gen-data", "--synthetic", "3", "--size", "32", "--out", str(tmp_path)]) == 0
    assert len(list((tmp_path / "images").glob("*.ppm"))) == 3
    assert len(list((tmp_path / "masks").glob("*.pgm"))) == 3


def test_gradcheck_ops(capsys):
    assert main(["gradcheck", "--scope", "ops", "--seeds", "1"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "matmul" in out


def test_usage_errors_exit_1(tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["bogus"])
    assert info.value.code == 1
    assert main(["train", "--out", str(tmp_path), "--set", "decoder.windw=3"]) == 1
    assert main(["train", "--out", str(tmp_path), "--set", "nokey"]) == 1
    assert main(["train", "--out", str(tmp_path)]) == 1
    assert main(["gen-data", "--out", str(tmp_path)]) == 1


def test_data_errors_exit_2(tmp_path):
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "o"), *TINY]) == 2
    (tmp_path / "bad.m3nt").write_bytes(b"junk")
    assert main(["infer", "--checkpoint", str(tmp_path / "bad.m3nt"), "--images", str(tmp_path),
                 "--out", str(tmp_path / "p")]) == 2


def test_wrong_image_size_exits_2(trained, tmp_path):
    main(["gen-data", "--synthetic", "1", "--size", "40", "--out", str(tmp_path / "d")])
    assert main(["infer", "--checkpoint", str(trained / "checkpoint.m3nt"), "--images", str(tmp_path / "d"),
                 "--out", str(tmp_path / "p")]) == 2


def test_numerical_failure_exits_3(tmp_path, monkeypatch):
    import sodnet.cli as cli
    from sodnet.tensor import NumericalError

    def boom(*a, **k):
        raise NumericalError("loss diverged")

    monkeypatch.setattr(cli, "train", boom)
    assert main(["train", "--synthetic", "2", "--out", str(tmp_path), *TINY]) == 3
