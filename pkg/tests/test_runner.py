import json
from pathlib import Path

import pytest
import yaml

from ntl.errors import ValidationError
from ntl.runner import ExperimentConfig, parse_config, report, run_experiment
from ntl.runner.cli import CONFIG_KEYS, cli, flag_name, main
from ntl.runner.pipelines import summarize
from ntl.runner.report import OWNERSHIP_COLUMNS

TINY = {
    "dataset": {"n_samples": 200, "n_test": 50},
    "model": {"widths": [8, 8, 8, 16], "hidden": 16},
    "ntl": {"epochs": 1, "batch_size": 32},
    "seeds": [1, 2],
}


def tiny(tmp_path, **kw):
    data = {**TINY, "mode": "supervised", "output_dir": str(tmp_path), **kw}
    return parse_config(data)


def _write(tmp_path, cfg: dict) -> str:
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


def test_yaml_roundtrip_byte_identical(tmp_path):
    cfg = tiny(tmp_path, mode="authorization", patch={"v": 30}, aug={"dis_list": [0.1, 0.5]})
    text = cfg.to_yaml()
    again = ExperimentConfig.from_yaml(text)
    assert again == cfg and again.to_yaml() == text


def test_validation_lists_every_field():
    with pytest.raises(ValidationError) as info:
        parse_config({"mode": "nope", "threshold": "abc", "ntl": {"bogus": 1}})
    msg = str(info.value)
    assert "mode" in msg and "threshold" in msg and "ntl.bogus" in msg


@pytest.mark.parametrize("data, needle", [
    ({"mode": "ownership"}, "patch"),
    ({"mode": "authorization", "patch": {}}, "aug"),
    ({"mode": "supervised", "seeds": []}, "seeds"),
    ({"mode": "supervised", "attacks": [{"method": "ftal"}]}, "ownership"),
    ({"mode": "ownership", "patch": {}, "attacks": [{"method": "distill"}]}, "distill"),
    ({"mode": "supervised", "ntl": {"epochs": -1}}, "epochs"),
    ({"mode": "ownership", "patch": {"v": 300}}, "patch"),
])
def test_mode_requirements(data, needle):
    with pytest.raises(ValidationError, match=needle):
        parse_config(data)


def test_flag_names_cover_every_key():
    assert flag_name("ntl.learning_rate") == "--ntl-learning-rate"
    opts = {o for p in cli.commands["train"].params for o in p.opts}
    assert all(flag_name(k) in opts for k in CONFIG_KEYS)
    assert CONFIG_KEYS["seeds"] is True and CONFIG_KEYS["ntl.epochs"] is False


def test_run_dir_layout_and_summary(tmp_path):
    art = run_experiment(tiny(tmp_path))
    names = sorted(p.name for p in art.run_dir.iterdir())
    assert names == ["config.yaml", "seed-1", "seed-2", "status.json", "summary.json"]
    for seed in (1, 2):
        files = {p.name for p in (art.run_dir / f"seed-{seed}").iterdir()}
        assert {"report.json", "history.jsonl", "model.ckpt"} <= files
    assert json.loads((art.run_dir / "status.json").read_text())["state"] == "complete"
    assert ExperimentConfig.from_yaml(art.config_path.read_text()) == tiny(tmp_path)
    assert art.summary["source_acc"]["n"] == 2


def test_history_bit_reproducible(tmp_path):
    a = run_experiment(tiny(tmp_path, seeds=[3]))
    b = run_experiment(tiny(tmp_path, seeds=[3]))
    assert a.run_dir != b.run_dir
    assert (a.run_dir / "seed-3/history.jsonl").read_bytes() == (b.run_dir / "seed-3/history.jsonl").read_bytes()


def test_summarize_mean_and_std():
    s = summarize({1: {"acc": 0.5, "seed": 1, "nested": {"x": 1.0}}, 2: {"acc": 0.7, "seed": 2, "nested": {"x": 3.0}}})
    assert s["acc"]["mean"] == pytest.approx(0.6) and s["acc"]["std"] == pytest.approx(0.1414213562)
    assert s["nested.x"]["mean"] == 2.0 and "seed" not in s


def test_cli_train_and_report(tmp_path, capsys):
    path = _write(tmp_path, TINY)
    code = main(["train", "--config", path, "--mode", "supervised", "--output-dir", str(tmp_path / "runs"),
                 "--seeds", "4", "--ntl-learning-rate", "0.001"])
    assert code == 0
    out = json.loads(capsys.readouterr().out)
    run_dir = Path(out["run_dir"])
    cfg = ExperimentConfig.from_yaml((run_dir / "config.yaml").read_text())
    assert cfg.seeds == [4] and cfg.ntl.learning_rate == 0.001
    assert main(["report", str(run_dir)]) == 0
    assert "source/target accuracy" in capsys.readouterr().out
    assert main(["report", "--tsv", str(run_dir)]) == 0
    assert "\t" in capsys.readouterr().out


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["train", "--mode", "ownership", "--output-dir", str(tmp_path)]) == 2
    assert main(["train", "--mode", "supervised", "--threshold", "abc"]) == 2
    assert main(["train", "--no-such-flag", "1"]) == 2
    assert main(["report"]) == 2
    # a pipeline failure: the configured dataset root does not exist
    code = main(["train", "--mode", "supervised", "--output-dir", str(tmp_path / "fail"), "--seeds", "1",
                 "--dataset-source", "mnist", "--dataset-target", "usps", "--dataset-root", str(tmp_path / "none")])
    assert code == 1
    (run_dir,) = (tmp_path / "fail").iterdir()
    assert json.loads((run_dir / "status.json").read_text())["state"] == "failed"
    assert main(["report", str(run_dir)]) == 1
    capsys.readouterr()


def test_env_overrides(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("NTL_OUTPUT_DIR", str(tmp_path / "env"))
    path = _write(tmp_path, {**TINY, "seeds": [1]})
    assert main(["train", "--config", path, "--mode", "supervised", "--output-dir", str(tmp_path / "flag")]) == 0
    assert Path(json.loads(capsys.readouterr().out)["run_dir"]).parent == tmp_path / "env"
    monkeypatch.setenv("NTL_THREADS", "zero")
    assert main(["train", "--config", path, "--mode", "supervised"]) == 2
    capsys.readouterr()


def _fake_run(root: Path, name: str, mode: str, summary: dict) -> Path:
    d = root / name
    d.mkdir()
    (d / "status.json").write_text(json.dumps({"state": "complete", "mode": mode}))
    (d / "summary.json").write_text(json.dumps(summary))
    return d


def test_ownership_report_has_eight_columns(tmp_path):
    stat = {"mean": 0.9, "std": 0.01, "n": 3}
    summary = {f"{key}.{m}": stat for _, key in OWNERSHIP_COLUMNS for m in ("acc_with_patch", "acc_without_patch")}
    d = _fake_run(tmp_path, "own", "ownership", summary)
    tsv = report([d])["tsv"].splitlines()
    header = tsv[1].split("\t")
    assert header[1:] == ["Supervised", "NTL", "FTAL", "RTAL", "EWC", "AU", "Overwriting", "Pruning"]
    row = tsv[2].split("\t")
    assert len(row) == 9 and row[1] == "0.9000±0.0100 / 0.9000±0.0100"


def test_report_missing_cells_render_dash(tmp_path):
    d = _fake_run(tmp_path, "auth", "authorization",
                  {"authorized_acc": {"mean": 0.9, "std": 0.0, "n": 1},
                   "unauthorized_accs.target/clean": {"mean": 0.1, "std": 0.0, "n": 1}})
    text = report([d])["text"]
    assert "0.9000" in text and "target/clean" in text
    own = _fake_run(tmp_path, "own", "ownership", {})
    assert " - / - " in report([own])["text"]


def test_report_rejects_empty_and_incomplete(tmp_path):
    from ntl.errors import IncompleteRun

    with pytest.raises(ValidationError):
        report([])
    d = tmp_path / "partial"
    d.mkdir()
    (d / "status.json").write_text(json.dumps({"state": "running", "mode": "supervised"}))
    with pytest.raises(IncompleteRun):
        report([d])
