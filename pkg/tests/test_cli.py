import hashlib
import json

import pytest

from bnnshift import cli
from bnnshift.experiments import PROTOCOLS

FAST = {"inference": {"hmc": {"num_iterations": 60, "burn_in": 10, "pilot_rounds": 2}, "map": {"epochs": 200}},
        "analysis": {"thresholds": {"ks_max": 1.0, "z_max": 100, "ratio_range": [0.01, 100]}}}


def _merge(a, b):
    out = dict(a)
    for k, v in b.items():
        out[k] = _merge(a[k], v) if isinstance(v, dict) and isinstance(a.get(k), dict) else v
    return out


def _write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg), encoding="utf-8")
    return str(p)


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_registry_covers_every_criterion():
    rows = cli.registry()
    assert rows
    assert sorted(r[0] for r in rows) == list(range(1, 16))
    for crit, name, desc in rows:
        cfg = cli.load_config(name)
        assert cfg["name"] == name and cfg["criterion"] == crit and desc
        assert cfg["protocol"] in PROTOCOLS


def test_list_command(capsys):
    assert cli.main(["list"]) == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert len(out) == 15 and "lemma1_dead_feature" in out[2]


def test_negative_variance_is_rejected(tmp_path, capsys):
    cfg = cli.bundled_config("lemma1_dead_feature")
    cfg["prior"]["variance"] = -1.0
    assert cli.main(["run", _write(tmp_path, cfg), "--out", str(tmp_path / "o")]) == 2
    assert "prior.variance" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


@pytest.mark.parametrize("edit, field", [
    (lambda c: c.pop("seed"), "<root>"),
    (lambda c: c.update(extra=1), "<root>"),
    (lambda c: c["model"].update(kind="rnn"), "model.kind"),
    (lambda c: c["inference"]["hmc"].update(step_size=0), "inference.hmc.step_size"),
])
def test_schema_errors_name_the_field(tmp_path, capsys, edit, field):
    cfg = cli.bundled_config("lemma1_dead_feature")
    edit(cfg)
    assert cli.main(["run", _write(tmp_path, cfg)]) == 2
    assert capsys.readouterr().err.startswith(f"config error: {field}")


def test_bad_json_and_missing_files(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text("{not json", encoding="utf-8")
    assert cli.main(["run", str(p)]) == 2
    assert cli.main(["run", "no_such_config"]) == 2
    cfg = cli.bundled_config("lemma1_dead_feature")
    cfg["data"] = {"idx": {k: str(tmp_path / f"{k}.idx")
                           for k in ("train_images", "train_labels", "test_images", "test_labels")}}
    assert cli.main(["run", _write(tmp_path, cfg)]) == 2
    assert "data.idx.train_images: file" in capsys.readouterr().err


def test_bad_seed_flag():
    with pytest.raises(SystemExit) as e:
        cli.main(["run", "lemma1_dead_feature", "--seed", "-3"])
    assert e.value.code == 2


def test_config_hash_is_canonical():
    a = {"b": 1, "a": {"y": 2.0, "x": [1, 2]}}
    b = {"a": {"x": [1, 2], "y": 2.0}, "b": 1}
    assert cli.config_hash(a) == cli.config_hash(b)
    assert cli.config_hash(a) != cli.config_hash({**a, "b": 2})


def test_run_writes_outputs_and_reruns_identically(tmp_path):
    cfg = _merge(cli.bundled_config("lemma1_dead_feature"), FAST)
    path = _write(tmp_path, cfg)
    outs = [tmp_path / "r1", tmp_path / "r2"]
    for o in outs:
        assert cli.main(["run", path, "--out", str(o), "--seed", "5"]) == 0
    report = json.loads((outs[0] / "report.json").read_text())
    assert report["seed"] == 5 and report["status"] == "complete" and not report["partial"]
    assert report["config_hash"] == cli.config_hash(dict(cfg, seed=5))
    assert "wall_clock" not in json.dumps(report)
    assert (outs[0] / "run.log").read_text().startswith("wall_clock_seconds")
    for rel in ("report.json", "metrics.csv", "projections.csv", "chains/hmc.json", "chains/hmc.bin"):
        assert _sha(outs[0] / rel) == _sha(outs[1] / rel), rel
    header = (outs[0] / "projections.csv").read_text().splitlines()[0]
    assert "passed" in header


def test_runtime_failure_writes_partial_report(tmp_path, monkeypatch, capsys):
    def boom(cfg, seed=None):
        raise RuntimeError("sampler exploded")

    monkeypatch.setattr(cli, "run_protocol", boom)
    assert cli.main(["run", "lemma1_grid", "--out", str(tmp_path)]) == 1
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["partial"] and report["status"] == "failed"
    assert "sampler exploded" in report["error"]
    assert "runtime error" in capsys.readouterr().err


def test_standard_protocol(tmp_path):
    cfg = {
        "name": "standard_demo", "criterion": 0, "description": "demo", "protocol": "standard", "seed": 1,
        "model": {"kind": "mlp", "input_shape": [4], "hidden": [4], "n_out": 2},
        "prior": {"family": "gaussian", "variance": 1.0},
        "data": {"shape": 4, "n_train": 80, "n_test": 100,
                 "dependence": {"kind": "affine", "c": [1.0, 0.5, -1.0, 0.0], "c0": 0.2}},
        "inference": {"hmc": {"trajectory": "pi_sigma_half", "step_size": 0.05, "num_iterations": 60},
                      "map": {"epochs": 100}, "ensemble": {"members": 2}},
        "corruption": {"kind": "pca_noise", "magnitudes": [0, 1, 4], "lowest": 1},
    }
    cli.validate(cfg)
    report = cli.execute(cfg, tmp_path)
    assert report["status"] == "complete"
    preds = {r["predictor"] for r in report["metrics"]}
    assert preds == {"bma", "map", "ensemble"}
    assert any(p["source"] == "map" for p in report["projections"])


def test_standard_protocol_on_idx_files(tmp_path):
    import numpy as np

    from bnnshift.data import write_idx

    gen = np.random.default_rng(0)
    files = {}
    for split, n in (("train", 40), ("test", 20)):
        labels = gen.integers(0, 2, n)
        imgs = gen.integers(0, 100, (n, 4, 4)) + 150 * labels[:, None, None]
        for kind, arr in (("images", imgs), ("labels", labels)):
            files[f"{split}_{kind}"] = str(tmp_path / f"{split}_{kind}.idx")
            write_idx(files[f"{split}_{kind}"], arr)
    cfg = {
        "name": "idx_demo", "criterion": 0, "description": "demo", "protocol": "standard", "seed": 0,
        "model": {"kind": "cnn", "input_shape": [4, 4, 1], "kernel": 2, "filters": 2, "n_out": 2},
        "prior": {"family": "gaussian", "variance": 1.0},
        "data": {"idx": files},
        "inference": {"map": {"epochs": 200, "lr": 0.05}},
    }
    path = _write(tmp_path, cfg)
    assert cli.main(["run", path, "--out", str(tmp_path / "out")]) == 0
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert report["metrics"][0]["accuracy"] > 0.9
