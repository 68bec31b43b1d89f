import csv
import json
import shutil

import numpy as np
import pytest
import torch

from sfseg.checkpoint import load_checkpoint, load_cpae_for, save_checkpoint
from sfseg.cli import EXIT_CONFIG, EXIT_DEPENDENCY, main
from sfseg.config import ExperimentConfig
from sfseg.cpae import CpaeModel, CpaeSpec
from sfseg.errors import ConfigError, DependencyError, LockError, ShapeError
from sfseg.pipeline import VENDOR_SECTIONS, VENDOR_STAGES, planned_stages, run_stages
from sfseg.report import flatten, parse_cell
from sfseg.soman import SomanModel

TINY_CFG = {
    "seed": 1,
    "data": {"spec": {"resolution": [32, 64]}, "n_source_train": 12, "n_source_val": 6, "n_target_train": 6,
             "n_target_test": 6},
    "selection": {"candidates": ["A", "B", "E", "W1"], "tau": -1.0, "max_k": 2},
    "routings": ["ERM", "DEpp", "LOpp"],
    "training": {"baseline": {"iters": 3, "batch_size": 2}, "vendor": {"iters": 3, "batch_size": 2},
                 "cpae": {"iters": 2, "batch_size": 2}, "ksweep_iters": 2, "widths": [6, 8, 8],
                 "strides": [1, 2, 2]},
    "adaptation": {"rounds": 2, "iters_per_round": 2, "batch_size": 2, "infer_cpae": True},
    "eval": {"scales": [0.75, 1.0]},
}


def tiny(tmp_path, **over):
    d = json.loads(json.dumps(TINY_CFG))
    d.update(over)
    d["output_dir"] = str(tmp_path / "run")
    return ExperimentConfig.from_dict(d)


@pytest.fixture(scope="module")
def finished(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("pipe")
    cfg = tiny(tmp)
    run_stages(cfg, planned_stages(cfg))
    return cfg, tmp / "run"


def test_all_artifacts(finished):
    cfg, root = finished
    man = json.loads((root / "manifest.json").read_text())
    assert set(man["stages"]) == set(planned_stages(cfg))
    vendor_hash = ExperimentConfig.hash_of({k: cfg.to_dict()[k] for k in VENDOR_SECTIONS})
    for stage, rec in man["stages"].items():
        want = vendor_hash if stage in VENDOR_STAGES else cfg.hash()
        assert rec["config_hash"] == want and rec["wall_time_s"] >= 0
        assert all((root / o).exists() for o in rec["outputs"])
    for name in ("risk_gap.png", "ksweep.png", "rounds.png", "metrics.csv", "ablation.csv", "per_head.csv"):
        assert (root / "reports" / name).exists(), name
    assert not (root / ".lock").exists()
    # target training images carry no labels on disk
    assert not list((root / "data" / "target_train").glob("*label*"))


def test_ablation_rows(finished):
    _, root = finished
    rows = list(csv.reader(open(root / "reports" / "ablation.csv")))
    names = [r[0] for r in rows[1:]]
    assert {"single-source", "ERM", "DE++", "LO++", "LO++ w/ cPAE"} <= set(names)


def test_csv_equals_json(finished):
    _, root = finished
    metrics = json.loads((root / "reports" / "metrics.json").read_text())
    rows = list(csv.reader(open(root / "reports" / "metrics.csv")))[1:]
    flat = dict(flatten(metrics))
    assert len(rows) == len(flat)
    for k, v in rows:
        assert parse_cell(v) == flat[k] or (isinstance(flat[k], str) and v == flat[k]), k


def test_lineage_recorded(finished):
    _, root = finished
    m, _ = load_checkpoint(root / "checkpoints" / "online_LOpp_cPAE.pt", "soman")
    assert [e["stage"] for e in m.lineage] == ["vendor-train", "adapt", "adapt-online"]
    metrics = json.loads((root / "reports" / "metrics.json").read_text())
    assert [e["stage"] for e in metrics["online"]["lineage"]] == ["vendor-train", "adapt", "adapt-online"]


def test_pseudo_provenance(finished):
    _, root = finished
    idx = json.loads((root / "pseudo" / "target_train" / "index.json").read_text())
    prov = idx["provenance"]
    assert prov["cpae_used"] and len(prov["thresholds"]["values"]) == 8


def test_resume_skips(finished, tmp_path):
    cfg, root = finished
    before = json.loads((root / "manifest.json").read_text())
    run_stages(cfg, ["evaluate"], resume=True)
    after = json.loads((root / "manifest.json").read_text())
    assert after["stages"]["evaluate"] == before["stages"]["evaluate"]


def test_resume_keeps_vendor_stages(finished, tmp_path):
    cfg, root = finished
    copy = tmp_path / "copy"
    shutil.copytree(root, copy)
    d = cfg.to_dict()
    d["output_dir"] = str(copy)
    d["adaptation"]["lambda_ent"] = 0.01
    cfg2 = ExperimentConfig.from_dict(d)
    before = json.loads((copy / "manifest.json").read_text())["stages"]
    run_stages(cfg2, planned_stages(cfg2), resume=True)
    after = json.loads((copy / "manifest.json").read_text())["stages"]
    for stage in VENDOR_STAGES:
        assert after[stage] == before[stage], stage
    assert after["adapt"]["config_hash"] == cfg2.hash() != before["adapt"]["config_hash"]


def test_dependency_error(tmp_path):
    cfg = tiny(tmp_path)
    with pytest.raises(DependencyError) as e:
        run_stages(cfg, ["adapt"])
    assert "target_train" in str(e.value)
    run_stages(cfg, ["generate"])
    with pytest.raises(DependencyError) as e:
        run_stages(cfg, ["adapt"])
    assert "checkpoints" in str(e.value)
    with pytest.raises(DependencyError):
        run_stages(cfg, ["report"])


def test_source_free_adapt(finished, tmp_path):
    cfg, root = finished
    copy = tmp_path / "copy"
    shutil.copytree(root, copy)
    for split in ("source_train", "source_val"):
        shutil.rmtree(copy / "data" / split)
    cfg2 = ExperimentConfig.from_dict({**cfg.to_dict(), "output_dir": str(copy)})
    run_stages(cfg2, ["adapt", "adapt-online", "evaluate"])
    a = json.loads((root / "reports" / "metrics.json").read_text())
    b = json.loads((copy / "reports" / "metrics.json").read_text())
    assert a == b


def test_lock(tmp_path):
    cfg = tiny(tmp_path)
    (tmp_path / "run").mkdir()
    (tmp_path / "run" / ".lock").write_text("123")
    with pytest.raises(LockError):
        run_stages(cfg, ["generate"])


@pytest.mark.parametrize("patch,field", [
    ({"adaptation": {"retain_fraction": 2.0}}, "adaptation.retain_fraction"),
    ({"adaptation": {"roundz": 2}}, "adaptation.roundz"),
    ({"adaptation": {"class_weighting": "inverse"}}, "adaptation.class_weighting"),
    ({"training": {"vendor": {"iters": "ten"}}}, "training.vendor.iters"),
    ({"routings": ["ERM", "XX"]}, "routings"),
    ({"data": {"spec": {"num_classes": 1}}}, "data.spec.num_classes"),
    ({"colour": 1}, "colour"),
])
def test_config_errors(patch, field):
    with pytest.raises(ConfigError) as e:
        ExperimentConfig.from_dict(patch)
    assert e.value.field == field


def test_config_roundtrip():
    cfg = ExperimentConfig()
    back = ExperimentConfig.from_dict(json.loads(cfg.to_json()))
    assert back == cfg and back.hash() == cfg.hash()


def test_checkpoint_roundtrip(tmp_path):
    m = SomanModel(8, 2, "LOpp", [3, 1], seed=4)
    m.lineage.append({"stage": "x"})
    save_checkpoint(tmp_path / "m.pt", m, "abc")
    r, payload = load_checkpoint(tmp_path / "m.pt", "soman", "abc")
    assert r.metadata() == m.metadata() and payload["config_hash"] == "abc"
    assert all(torch.equal(m.state_dict()[k], r.state_dict()[k]) for k in m.state_dict())
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "m.pt", "soman", "other")
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "m.pt", "cpae")
    q = CpaeModel(CpaeSpec(8, 32, 4))
    save_checkpoint(tmp_path / "q.pt", q)
    with pytest.raises(ShapeError):
        load_cpae_for(tmp_path / "q.pt", m)
    with pytest.raises(DependencyError):
        load_checkpoint(tmp_path / "none.pt")


def test_cli(tmp_path, capsys):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(TINY_CFG))
    out = str(tmp_path / "cli")
    assert main(["--config", str(path), "--output-dir", out, "adapt"]) == EXIT_DEPENDENCY
    assert main(["generate", "--config", str(path), "--output-dir", out, "--seed", "3"]) == 0
    cfg = json.loads((tmp_path / "cli" / "config.json").read_text())
    assert cfg["seed"] == 3
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"adaptation": {"rounds": 0}}))
    assert main(["--config", str(bad), "--output-dir", out, "generate"]) == EXIT_CONFIG
    assert "adaptation.rounds" in capsys.readouterr().err
    assert main(["--config", str(path), "--output-dir", out, "adapt", "--rounds", "0"]) == EXIT_CONFIG
