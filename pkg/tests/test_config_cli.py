import csv
import json

import numpy as np
import pytest
import yaml

from convkern import cli, config, gram
from convkern.data import CIFAR_TEST, CIFAR_TRAIN, save_cifar_batch

NOISE = {"source": "noise", "height": 6, "width": 6, "channels": 2, "n_train": 30, "n_test": 12}


def small_cfg(tmp_path, **kw):
    d = {"preset": "exp-exp-2layer", "data": dict(NOISE), "out": str(tmp_path / "run"),
         "arch": {"layers": [
             {"patch": 3, "kernel": {"kind": "exponential", "sigma": 0.6}, "pooling": {"kind": "gaussian", "s": 2}},
             {"patch": 3, "kernel": {"kind": "polynomial", "degree": 2}, "pooling": {"kind": "gaussian", "s": 3}},
         ]}}
    d.update(kw)
    p = tmp_path / "cfg.yaml"
    p.write_text(yaml.safe_dump(d))
    return p


@pytest.mark.parametrize("name", sorted(config.PRESETS))
def test_presets_validate(name):
    cfg = config.preset(name, data={"downsample": 2})
    arch = cfg.arch()
    assert arch.grid.extents == (16, 16) and arch.channels == 3


def test_preset_strides_full_size():
    arch = config.preset("exp-exp-2layer").arch()
    assert [l.pooling.stride for l in arch.layers] == [2, 4]
    assert arch.out_grid.extents == (4, 4)


def test_rejections():
    with pytest.raises(config.ConfigError, match="unknown keys"):
        config.preset("exp-exp-2layer", krr={"lamda": 1.0})
    with pytest.raises(config.ConfigError, match="unknown preset"):
        config.preset("nope")
    with pytest.raises(config.ConfigError, match="schema_version"):
        config.preset("exp-exp-2layer", schema_version=2)
    with pytest.raises(config.ConfigError, match="stride"):
        config.from_dict({"arch": {"layers": [{"patch": 3, "kernel": {"kind": "linear"},
                                               "pooling": {"kind": "dirac", "stride": 5}}]}})
    with pytest.raises(config.ConfigError):
        config.preset("exp-exp-2layer", data={"downsample": 3})
    with pytest.raises(config.ConfigError):
        config.preset("exp-exp-2layer", threads=0)


def test_yaml_roundtrip(tmp_path):
    cfg = config.load(small_cfg(tmp_path))
    again = config.from_dict(yaml.safe_load(cfg.to_yaml()))
    assert again.raw == cfg.raw and again.arch().fingerprint == cfg.arch().fingerprint


def test_data_root_env(monkeypatch, tmp_path):
    monkeypatch.setenv(config.DATA_ENV, str(tmp_path))
    assert config.preset("exp-exp-2layer").data_root() == tmp_path


def test_pipeline_and_reproducibility(tmp_path):
    p = small_cfg(tmp_path)
    assert cli.main(["pipeline", "--config", str(p)]) == 0
    run = tmp_path / "run"
    m = json.loads((run / "metrics.json").read_text())
    assert 0 < m["accuracy"] <= 1 and m["schema_version"] == 1
    assert set(m["timings"]) == {"data", "gram", "cross_gram", "krr"}
    assert config.load(run / "config.yaml").raw == config.load(p).raw
    first = {f: (run / f).read_bytes() for f in ("gram.ckg", "model.ckk", "config.yaml")}
    assert cli.main(["pipeline", "--config", str(p), "--out", str(tmp_path / "run2"),
                     "--threads", "3"]) == 0
    for f, b in first.items():
        if f != "config.yaml":
            assert (tmp_path / "run2" / f).read_bytes() == b


def test_stepwise_commands(tmp_path):
    p = small_cfg(tmp_path)
    out = tmp_path / "steps"
    assert cli.main(["data", "prep", "--config", str(p), "--out", str(out)]) == 0
    tr, te = out / "train.ckd", out / "test.ckd"
    assert cli.main(["gram", "compute", "--config", str(p), "--data", str(tr), "--out", str(out)]) == 0
    assert cli.main(["gram", "verify", "--gram", str(out / "gram.ckg")]) == 0
    assert cli.main(["gram", "eig", "--gram", str(out / "gram.ckg"), "--top", "5", "--out", str(out)]) == 0
    assert cli.main(["gram", "cross", "--config", str(p), "--data", str(tr), "--test", str(te),
                     "--out", str(out)]) == 0
    assert cli.main(["krr", "fit", "--gram", str(out / "gram.ckg"), "--data", str(tr),
                     "--lambda", "1e-6", "--out", str(out)]) == 0
    assert cli.main(["krr", "eval", "--model", str(out / "model.ckk"), "--cross", str(out / "cross.npz"),
                     "--data", str(te), "--out", str(out)]) == 0
    m = json.loads((out / "metrics.json").read_text())
    assert 0 <= m["accuracy"] <= 1
    with open(out / "eigen.csv") as f:
        assert len(list(csv.DictReader(f))) == 5


def test_fake_cifar_pipeline(tmp_path, monkeypatch):
    rng = np.random.default_rng(0)
    root = tmp_path / "cifar"
    root.mkdir()
    for name in CIFAR_TRAIN + CIFAR_TEST:
        save_cifar_batch(root / name, rng.integers(0, 10, 8), rng.integers(0, 256, (8, 3072)))
    monkeypatch.setenv(config.DATA_ENV, str(root))
    cfg = {"preset": "exp-poly2-2layer", "data": {"n_train": 20, "n_test": 6, "downsample": 4},
           "out": str(tmp_path / "c")}
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump(cfg))
    assert cli.main(["pipeline", "--config", str(p)]) == 0
    m = json.loads((tmp_path / "c" / "metrics.json").read_text())
    assert m["n_train"] == 20 and 0 <= m["accuracy"] <= 1


def test_missing_cifar_is_a_labelled_error(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(config.DATA_ENV, str(tmp_path / "absent"))
    assert cli.main(["pipeline", "--preset", "exp-exp-2layer", "--out", str(tmp_path / "x")]) == 2
    assert "[data]" in capsys.readouterr().err


def test_invalid_config_fails_before_compute(tmp_path, capsys):
    p = small_cfg(tmp_path, arch={"layers": [{"patch": 3, "kernel": {"kind": "linear"},
                                              "pooling": {"kind": "dirac", "stride": 4}}]})
    assert cli.main(["pipeline", "--config", str(p)]) == 2
    assert not (tmp_path / "run").exists()


def test_verify_cli(tmp_path):
    assert cli.main(["verify", "oracle", "--cases", "20", "--out", str(tmp_path)]) == 0
    v = json.loads((tmp_path / "verify_oracle.json").read_text())
    assert v["passed"]
    assert cli.main(["verify", "oracle", "--cases", "20", "--inject-fault", "--out", str(tmp_path)]) == 1
    assert cli.main(["verify", "norms", "--out", str(tmp_path)]) == 0


def test_figures_epq(tmp_path):
    assert cli.main(["figures", "epq", "--out", str(tmp_path)]) == 0
    with open(tmp_path / "epq_dirac_p4_q0.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 400
    nz = {(int(r["a"]), int(r["b"])) for r in rows if float(r["value"]) != 0}
    # h1 has radius 2: a Dirac at 0 lights the 5x5 block around (p, q)
    assert nz == {((4 + i) % 20, j % 20) for i in range(-2, 3) for j in range(-2, 3)}
    assert cli.main(["figures", "epq", "--signal", "constant", "--out", str(tmp_path)]) == 0


def test_figures_curves(tmp_path):
    rows = [{"arch": a, "n": n, "seed": s, "lambda": 0.1, "excess_risk": e, "n_positions": 4}
            for a, e0 in (("pool", 1.0), ("nopool", 2.0)) for n in (10, 20) for s in (0, 1)
            for e in [e0 / n + s * 1e-3]]
    src = tmp_path / "curves.csv"
    cli._write_csv(src, rows)
    assert cli.main(["figures", "curves", "--curves", str(src), "--out", str(tmp_path)]) == 0
    with open(tmp_path / "curves_summary.csv") as f:
        assert len(list(csv.DictReader(f))) == 4


def test_global_flags_anywhere(tmp_path):
    a = cli.build_parser().parse_args(["--seed", "3", "verify", "norms"])
    b = cli.build_parser().parse_args(["verify", "norms", "--seed", "3"])
    assert a.seed == b.seed == 3
