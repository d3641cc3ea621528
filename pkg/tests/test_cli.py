import csv
import json

import pytest
import yaml

from resflow.checkpoint import read_header
from resflow.cli import main
from resflow.dataset import load_data_dir
from resflow.synthgen import GeneratorConfig, generate

QUICK = {"generator": {"num_days": 40}, "window": {"input_days": 3, "horizon_days": 2},
         "train": {"max_epochs": 3, "patience": 2},
         "evaluate": {"input_days": [3], "horizons": [2], "settings": [2]},
         "ablate": {"input_days": 3, "horizon_days": 2}}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "quick.yaml").write_text(yaml.safe_dump(QUICK))
    assert main(["generate", "--config", str(root / "quick.yaml"), "--out", str(root / "data")]) == 0
    return root


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_generate_round_trip(workdir):
    entrance, log = load_data_dir(workdir / "data")
    attendance, log0 = generate(GeneratorConfig(num_days=40))
    assert (entrance.values == attendance.values).all()
    assert len(log) == len(log0)
    manifest = json.loads((workdir / "data" / "manifest.json").read_text())
    assert manifest["seed"] == 3407


def test_generate_is_byte_identical(workdir, tmp_path):
    main(["generate", "--config", str(workdir / "quick.yaml"), "--out", str(tmp_path)])
    for name in ("entrance.csv", "reservations.csv", "manifest.json"):
        assert (tmp_path / name).read_bytes() == (workdir / "data" / name).read_bytes()


def test_generate_zero_days_is_usage_error(tmp_path):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("generator: {num_days: 0}\n")
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert not (tmp_path / "o").exists()


def test_seed_flag_overrides_env(workdir, tmp_path, monkeypatch):
    monkeypatch.setenv("RESFLOW_SEED", "5")
    main(["generate", "--config", str(workdir / "quick.yaml"), "--out", str(tmp_path / "a")])
    main(["generate", "--config", str(workdir / "quick.yaml"), "--seed", "3407",
          "--out", str(tmp_path / "b")])
    assert json.loads((tmp_path / "a" / "manifest.json").read_text())["seed"] == 5
    assert ((tmp_path / "b" / "entrance.csv").read_bytes()
            == (workdir / "data" / "entrance.csv").read_bytes())


def test_train_and_predict(workdir):
    ck = workdir / "full.ckpt"
    cfg = str(workdir / "quick.yaml")
    assert main(["train", "--config", cfg, "--data", str(workdir / "data"), "--out", str(ck)]) == 0
    assert (workdir / "train_log.csv").exists()
    out = workdir / "forecast.csv"
    assert main(["predict", "--checkpoint", str(ck), "--data", str(workdir / "data"),
                 "--issue-date", "2025-05-20", "--out", str(out)]) == 0
    rows = _rows(out)
    assert rows[0] == ["target_date", "slot", "channel", "yhat", "baseline", "gate", "smoothed"]
    assert len(rows) - 1 == 2 * 14 * 2
    for r in rows[1:]:
        gate = float(r[5])
        assert 0 < gate < 1 and float(r[4]) >= 0


def test_predict_without_history_is_window_error(workdir):
    ck = workdir / "full.ckpt"
    if not ck.exists():
        pytest.skip("depends on test_train_and_predict")
    code = main(["predict", "--checkpoint", str(ck), "--data", str(workdir / "data"),
                 "--issue-date", "2025-05-01", "--out", str(workdir / "x.csv")])
    assert code == 1


def test_train_no_af_variant_metadata(workdir):
    ck = workdir / "noaf.ckpt"
    assert main(["train", "--config", str(workdir / "quick.yaml"), "--variant", "no-af",
                 "--data", str(workdir / "data"), "--out", str(ck)]) == 0
    header, _ = read_header(ck)
    assert header["extra"]["head"] == "plain" and header["extra"]["variant"] == "w/o AF"
    assert header["model_config"]["use_adaptive_fusion"] is False
    out = workdir / "noaf.csv"
    main(["predict", "--checkpoint", str(ck), "--data", str(workdir / "data"),
          "--issue-date", "2025-05-20", "--out", str(out)])
    assert _rows(out)[0] == ["target_date", "slot", "channel", "yhat"]


def test_missing_data_dir_exit_code(workdir, capsys):
    assert main(["train", "--data", str(workdir / "nope"), "--out", str(workdir / "m")]) == 2
    assert "does not exist" in capsys.readouterr().err


def test_unknown_variant_is_usage_error(workdir):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--variant", "bogus", "--data", "x", "--out", "y"])
    assert exc.value.code == 2


def test_evaluate_one_row_per_variant(workdir):
    out = workdir / "report.csv"
    assert main(["evaluate", "--config", str(workdir / "quick.yaml"), "--data",
                 str(workdir / "data"), "--variant", "full", "--variant", "dec-only",
                 "--out", str(out)]) == 0
    rows = _rows(out)
    assert [r[0] for r in rows[1:]] == ["Full", "DecOnly"]
    assert all(r[1] == "two" for r in rows[1:])


def test_ablate_five_rows(workdir):
    out = workdir / "ablation.csv"
    assert main(["ablate", "--config", str(workdir / "quick.yaml"), "--data",
                 str(workdir / "data"), "--out", str(out), "--jobs", "2"]) == 0
    assert [r[0] for r in _rows(out)[1:]] == ["Full", "w/o Inv", "DecOnly", "w/o AF",
                                               "DecOnly w/o AF"]


def test_correlate_lossless_lag0_is_one(tmp_path):
    cfg = tmp_path / "lossless.yaml"
    cfg.write_text(yaml.safe_dump({"generator": {"num_days": 40, "reschedule_prob": 0.0,
                                                 "noshow_prob": 0.0, "reservation_rate": 1.0}}))
    main(["generate", "--config", str(cfg), "--out", str(tmp_path / "d")])
    assert main(["correlate", "--config", str(cfg), "--data", str(tmp_path / "d"),
                 "--out", str(tmp_path / "corr.csv")]) == 0
    rows = [r for r in _rows(tmp_path / "corr.csv")[1:] if r[0] == "reservations" and r[2] == "0"]
    assert rows and all(abs(float(r[3]) - 1.0) < 1e-12 for r in rows)
