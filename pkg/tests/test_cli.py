import json
import subprocess
import sys

import numpy as np
import pytest

from koda import cli
from koda import data as D
from koda import model as M
from koda import spectral as S

TINY = ["--trajectories", "6", "--lookback", "20", "--horizon", "20", "--tau", "10", "--segments", "2",
        "--latent-dim", "4", "--channel-mode", "joint", "--instance-norm", "false", "--stage1-epochs", "1",
        "--stage2-epochs", "1", "--steps-per-epoch", "2", "--batch-size", "8", "--val-samples", "8",
        "--train-stride", "5", "--eval-stride", "5"]


def test_seed_is_mandatory(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["state-predict", "--dataset", "pendulum"])
    assert exc.value.code == 2
    assert "--seed" in capsys.readouterr().err


def test_simulate_writes_csv(tmp_path):
    assert cli.main(["simulate", "--system", "lorenz63", "--trajectories", "2", "--steps", "30",
                     "--seed", "4", "--output-dir", str(tmp_path)]) == 0
    s = D.ingest_csv(tmp_path / "lorenz63_001.csv")
    assert s.values.shape == (30, 3)
    spec = D.default_spec("lorenz63", steps=30)
    np.testing.assert_array_equal(s.values, D.simulate(spec, 2, 4)[1].values)


def test_fit_filter(tmp_path):
    t = np.arange(500)
    D.to_csv(D.Series(np.sin(2 * np.pi * t / 12)[:, None]), tmp_path / "s.csv")
    out = tmp_path / "f.json"
    assert cli.main(["fit-filter", "--dataset", str(tmp_path / "s.csv"), "--tau", "24",
                     "--dominance-fraction", "0.2", "--output", str(out)]) == 0
    mask = S.SpectralFilter.load(out).keep_mask
    assert mask[0, 0] and mask[0, 2]


def test_config_file_with_flag_override(tmp_path):
    cfg = {"dataset": "pendulum", "latent_dim": 8, "train": {"stage1_epochs": 7}}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    args = cli.build_parser().parse_args(["forecast", "--config", str(tmp_path / "c.json"), "--seed", "3",
                                          "--repeats", "2", "--latent-dim", "6", "--learning-rate", "0.01",
                                          "--alphas", "0,0.5"])
    c = cli.experiment_config(args, "forecast")
    assert c.latent_dim == 6 and c.seeds == [3, 4] and c.alphas == [0, 0.5]
    assert c.train == {"stage1_epochs": 7, "learning_rate": 0.01}


def test_train_then_forecast_checkpoint(tmp_path):
    ckpt = tmp_path / "m.npz"
    assert cli.main(["train", "--dataset", "pendulum", "--seed", "0", "--output", str(ckpt)] + TINY) == 0
    assert ckpt.exists() and ckpt.with_suffix(".filter.json").exists()
    p = M.ModelParams.load(ckpt)
    assert p.config.window.latent_dim == 4
    code = cli.main(["forecast", "--dataset", "pendulum", "--seed", "0", "--checkpoint", str(ckpt),
                     "--output-dir", str(tmp_path / "r")] + TINY)
    assert code == 0
    assert (tmp_path / "r" / "forecast-pendulum.metrics.csv").exists()


def test_failing_checks_give_nonzero_exit_and_report_rerun(tmp_path, capsys):
    out = tmp_path / "r"
    # a barely trained model cannot meet the state bounds
    code = cli.main(["state-predict", "--dataset", "pendulum", "--seed", "1", "--train-steps", "60",
                     "--forecast-steps", "40", "--output-dir", str(out)] + TINY)
    assert code == 1
    assert "FAIL pendulum full 100xMSE" in capsys.readouterr().out
    manifest = out / "state-pendulum.manifest.json"
    code = cli.main(["report", str(manifest), "--rerun", "--output-dir", str(tmp_path / "again")])
    text = capsys.readouterr().out
    assert "rerun metrics identical" in text
    assert code == 1  # the recorded checks still fail


def test_bad_input_reports_error(tmp_path, capsys):
    code = cli.main(["forecast", "--dataset", str(tmp_path / "missing.csv"), "--seed", "0"] + TINY)
    assert code == 2
    assert "error" in capsys.readouterr().err


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "koda", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "state-predict" in r.stdout
