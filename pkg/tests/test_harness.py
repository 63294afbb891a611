import csv
import json

import numpy as np
import pytest
import yaml

from calmix import calibration as cal
from calmix.ensembles import load_checkpoint
from calmix.harness import cli, report
from calmix.harness.config import (ConfigError, ExperimentConfig, expand_grid, load_document,
                                   parse_overrides)
from calmix.harness.runner import load_records, run, run_seed

TINY = {
    "dataset": {"samples_per_cluster": 40},
    "ensemble": {"K": 2, "hidden": [16]},
    "train": {"epochs": 4, "lr_decay_epochs": [2], "batch_size": 32},
    "eval": {"intensities": [1, 5]},
    "seeds": [0, 1],
}


def tiny(**sections):
    doc = json.loads(json.dumps(TINY))
    for key, value in sections.items():
        if isinstance(value, dict):
            doc.setdefault(key, {}).update(value)
        else:
            doc[key] = value
    return ExperimentConfig.from_dict(doc)


# -- config -------------------------------------------------------------------

def test_hash_tracks_semantic_fields():
    base = tiny()
    assert base.config_hash() == tiny().config_hash()
    assert tiny(train={"epochs": 5, "lr_decay_epochs": [2], "batch_size": 32}).config_hash() \
        != base.config_hash()
    # knobs the strategy ignores, seeds and paths leave the hash alone
    assert tiny(augment={"alpha": 0.3}).config_hash() == base.config_hash()
    assert tiny(seeds=[7], output_dir="elsewhere", name="x").config_hash() == base.config_hash()
    assert tiny(augment={"strategy": "label_smooth", "alpha": 0.3}).config_hash() != \
        tiny(augment={"strategy": "label_smooth", "alpha": 0.2}).config_hash()
    assert tiny(augment={"strategy": "mixup", "a": 1}).config_hash() == \
        tiny(augment={"strategy": "mixup", "a": 1.0}).config_hash()


@pytest.mark.parametrize("doc", [
    {"augment": {"strategy": "cutmix"}},
    {"augment": {"strategy": "mixup", "a": 0}},
    {"augment": {"strategy": "label_smooth", "alpha": 1.0}},
    {"seeds": []},
    {"ensemble": {"mode": "swa"}},
    {"ensemble": {"size": 3}},
    {"epochs": 3},
    {"train": {"epochs": 10, "lr_decay_epochs": [12]}},
    {"eval": {"intensities": [0]}},
])
def test_invalid_configs_rejected(doc):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(doc)


def test_overrides_and_grid(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump({"name": "g", **TINY, "grid": {"augment.strategy": ["none"]}}))
    over = parse_overrides(["--train.epochs", "3", "--augment.a=0.5",
                            "--grid.ensemble.mode", "[deep, batch_ensemble]"])
    assert over == {"train.epochs": 3, "augment.a": 0.5, "grid.ensemble.mode": ["deep", "batch_ensemble"]}
    configs = expand_grid(load_document(path, over))
    assert [c.label for c in configs] == ["g-none-deep", "g-none-batch_ensemble"]
    assert all(c.train.epochs == 3 and c.augment.a == 0.5 for c in configs)
    with pytest.raises(ConfigError):
        parse_overrides(["--train.epochs"])
    with pytest.raises(ConfigError):
        expand_grid({"grid": {"augment.strategy": "mixup"}})


def test_config_yaml_round_trip():
    cfg = tiny(augment={"strategy": "camixup"}, name="rt")
    from calmix.harness.config import dump_yaml
    assert ExperimentConfig.from_dict(yaml.safe_load(dump_yaml(cfg))) == cfg


# -- running ------------------------------------------------------------------

@pytest.fixture(scope="module")
def grid_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("runs")
    configs = [tiny(name=s, augment={"strategy": s}) for s in
               ("none", "mixup", "camixup", "forgetting_camixup")]
    run(configs, out)
    return out


def test_run_writes_artifacts(grid_dir):
    manifest = json.loads((grid_dir / "manifest.json").read_text())
    assert len(manifest["records"]) == 8
    cell = grid_dir / "camixup" / "seed_0"
    for name in ("record.json", "report.json", "reliability.csv", "policy_log.csv",
                 "checkpoint.npz", "timing.json"):
        assert (cell / name).exists(), name
    assert (grid_dir / "camixup" / "config.yaml").exists()
    with open(cell / "policy_log.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4 * 5
    record = json.loads((cell / "record.json").read_text())
    assert record["status"] == "ok"
    assert len(record["corrupted"]["cells"]) == 5 * 2
    assert record["temperature"]["fit_nll_at_T"] <= record["temperature"]["fit_nll_at_1"] + 1e-9


def test_forgetting_log(grid_dir):
    with open(grid_dir / "forgetting_camixup" / "seed_1" / "forgetting.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert {float(r["coeff"]) for r in rows} <= {0.0, 1.0}
    assert {r["member"] for r in rows} == {"0", "1"}


def test_outputs_parse_back(grid_dir):
    cell = grid_dir / "camixup" / "seed_0"
    rep = cal.CalibrationReport.from_dict(json.loads((cell / "report.json").read_text()))
    assert json.loads(rep.to_json()) == json.loads((cell / "report.json").read_text())
    record = json.loads((cell / "record.json").read_text())
    assert rep.ece == record["clean"]["ece"]
    with open(cell / "reliability.csv") as fh:
        rel = [(float(r["bin_mid"]), float(r["gap"]), int(r["count"])) for r in csv.DictReader(fh)]
    assert rel == [(b["bin_mid"], b["gap"], b["count"]) for b in record["reliability"]]
    model, state = load_checkpoint(cell / "checkpoint.npz")
    assert model.K == 2 and state["policy_flags"].shape == (5,)


def test_rerun_is_bitwise_identical(grid_dir, tmp_path):
    cfg = tiny(name="camixup", augment={"strategy": "camixup"}, seeds=[0])
    run_seed(cfg, 0, tmp_path)
    for name in ("record.json", "report.json", "reliability.csv", "policy_log.csv"):
        assert (tmp_path / "camixup" / "seed_0" / name).read_bytes() == \
            (grid_dir / "camixup" / "seed_0" / name).read_bytes()


def test_parallel_matches_serial(tmp_path, monkeypatch):
    cfg = tiny(name="mixup", augment={"strategy": "mixup"})
    serial = run(cfg, tmp_path / "a", workers=1)
    monkeypatch.setenv("CALMIX_WORKERS", "2")
    parallel = run(cfg, tmp_path / "b")
    assert serial == parallel


def test_single_member_none_is_plain_model(tmp_path):
    cfg = tiny(name="solo", ensemble={"K": 1}, seeds=[0])
    record = run(cfg, tmp_path)[0]
    assert len(record["members"]["ece"]) == 1
    assert record["members"]["ece"][0] == record["clean"]["ece"]


def test_divergence_aborts_seed_and_continues(tmp_path):
    cfg = tiny(name="boom", train={"base_lr": 1e200}, seeds=[0, 1])
    with np.errstate(all="ignore"):
        records = run(cfg, tmp_path)
    assert [r["status"] for r in records] == ["aborted", "aborted"]
    assert "non-finite" in records[0]["error"]
    assert len(load_records(tmp_path)) == 2


# -- reporting ----------------------------------------------------------------

def test_compare_table(grid_dir):
    rows = report.compare_dir(grid_dir, "none")
    assert [r["name"] for r in rows] == ["camixup", "forgetting_camixup", "mixup", "none"]
    base = rows[-1]
    assert all(base[f"{m}_delta"] == 0 for m in report.METRICS)
    assert (grid_dir / "compare.txt").read_text().startswith("name")
    back = report.read_rows(grid_dir / "compare.csv")
    assert float(back[0]["ece_mean"]) == rows[0]["ece_mean"]


def test_compare_marks_missing_corruption(tmp_path):
    cfg = tiny(name="clean-only", eval={"corruption_families": []}, seeds=[0])
    run(cfg, tmp_path)
    rows = report.compare(load_records(tmp_path), "clean-only")
    assert rows[0]["cA_mean"] is None and rows[0]["cE_delta"] is None
    assert "absent" in report.format_table(rows)


def test_compare_rejects_mixed_datasets(grid_dir):
    records = load_records(grid_dir)
    records[0] = dict(records[0], dataset_hash="other")
    with pytest.raises(report.ReportError):
        report.compare(records, "none")
    with pytest.raises(report.ReportError):
        report.compare(load_records(grid_dir), "nope")


def test_plot_data_schemas(grid_dir):
    rel = report.read_rows(report.emit_plot_data(grid_dir, "reliability"))
    assert list(rel[0]) == ["bin_mid", "gap", "count", "strategy", "seed"]
    assert len(rel) == 8 * 15

    shift = report.read_rows(report.emit_plot_data(grid_dir, "shift_curve"))
    assert list(shift[0])[:4] == ["strategy", "intensity", "accuracy", "ece"]
    assert [r["intensity"] for r in shift if r["strategy"] == "none"] == ["0", "1", "5"]

    pol = report.read_rows(report.emit_plot_data(grid_dir, "policy_counts"))
    assert {r["strategy"] for r in pol} == {"camixup"}
    assert all(0 <= int(r["epochs_enabled"]) <= int(r["total_epochs"]) == 4 for r in pol)
    assert len(pol) == 2 * 5

    with pytest.raises(report.ReportError):
        report.emit_plot_data(grid_dir, "histogram")


# -- CLI ------------------------------------------------------------------------

def test_cli_end_to_end(tmp_path, capsys):
    path = tmp_path / "exp.yaml"
    doc = {"name": "cli", **TINY, "seeds": [0], "output_dir": str(tmp_path / "out"),
           "grid": {"augment.strategy": ["none", "camixup"]}}
    path.write_text(yaml.safe_dump(doc))
    assert cli.main(["run", str(path), "--train.epochs", "3"]) == 0
    assert json.loads((tmp_path / "out" / "cli-none" / "seed_0" / "record.json").read_text())["epochs"] == 3
    assert cli.main(["compare", str(tmp_path / "out"), "--baseline", "cli-none"]) == 0
    assert "cli-camixup" in capsys.readouterr().out
    assert cli.main(["plot-data", str(tmp_path / "out"), "--kind", "policy_counts"]) == 0


def test_cli_errors(tmp_path, capsys):
    assert cli.main(["run", str(tmp_path / "missing.yaml")]) != 0
    bad = tmp_path / "bad.yaml"
    bad.write_text("augment: {strategy: cutmix}\n")
    assert cli.main(["run", str(bad)]) != 0
    assert "cutmix" in capsys.readouterr().err
    assert cli.main(["compare", str(tmp_path), "--baseline", "x"]) != 0
    with pytest.raises(SystemExit) as exc:
        cli.main(["plot-data", str(tmp_path), "--kind", "nope"])
    assert exc.value.code != 0
