import csv
import json

import pytest

from moelab import __version__
from moelab.cli import main


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--seed", "0", "--out", str(root / "data")]) == 0
    assert main(["plant", "--data", str(root / "data"), "--plan", "shallow", "--out", str(root / "model")]) == 0
    return root


def _args(root, *rest):
    return ["--model", str(root / "model" / "model.moem"), "--data", str(root / "data"), *rest]


def _read(path):
    return path.read_bytes()


def test_gen_data_outputs(workdir):
    names = sorted(p.name for p in (workdir / "data").iterdir())
    assert names == ["dataset.jsonl", "manifest.json", "relations.json", "timing.json", "tokenizer.json"]
    manifest = json.loads((workdir / "data" / "manifest.json").read_text())
    assert manifest["command"] == "gen-data" and manifest["seed"] == 0
    assert "dataset.jsonl" in manifest["outputs"]


def test_same_seed_runs_are_byte_identical(workdir, tmp_path):
    assert main(["gen-data", "--seed", "0", "--out", str(tmp_path / "data")]) == 0
    assert main(["plant", "--data", str(tmp_path / "data"), "--plan", "shallow", "--out", str(tmp_path / "m")]) == 0
    for f in ["dataset.jsonl", "tokenizer.json", "relations.json"]:
        assert _read(tmp_path / "data" / f) == _read(workdir / "data" / f)
    for f in ["model.moem", "plan.json", "plant_report.json"]:
        assert _read(tmp_path / "m" / f) == _read(workdir / "model" / f)
    a = json.loads((tmp_path / "m" / "manifest.json").read_text())
    b = json.loads((workdir / "model" / "manifest.json").read_text())
    assert a["outputs"] == b["outputs"]
    assert sorted(a["inputs"].values()) == sorted(b["inputs"].values())
    first = _read(tmp_path / "m" / "manifest.json")
    assert main(["plant", "--data", str(tmp_path / "data"), "--plan", "shallow", "--out", str(tmp_path / "m")]) == 0
    assert _read(tmp_path / "m" / "manifest.json") == first


def test_eval_with_interventions(workdir, tmp_path):
    assert main(["eval", *_args(workdir, "--out", str(tmp_path / "e0"))]) == 0
    base = json.loads((tmp_path / "e0" / "eval.json").read_text())
    assert base["mrr"] == 1.0
    plan = json.loads((workdir / "model" / "plan.json").read_text())
    rel, slot = next(iter(plan["refinement"].items()))
    blk = f"{slot['layer']}:{slot['expert']}"
    assert main(["eval", *_args(workdir, "--relation", rel, "--block", blk, "--out", str(tmp_path / "e1"))]) == 0
    assert json.loads((tmp_path / "e1" / "eval.json").read_text())["mrr"] < 0.5


def test_attribute_and_topk_zero(workdir, tmp_path):
    assert main(["attribute", *_args(workdir, "--relation", "country_capital", "--topk", "20",
                                     "--out", str(tmp_path / "a"))]) == 0
    rows = list(csv.DictReader((tmp_path / "a" / "attribution.csv").open()))
    assert len(rows) == 20 and rows[0]["rank"] == "1"
    assert main(["attribute", *_args(workdir, "--relation", "country_capital", "--topk", "0",
                                     "--out", str(tmp_path / "b"))]) == 0
    assert (tmp_path / "b" / "attribution.csv").read_text().count("\n") == 1


def test_ablate_sizes(workdir, tmp_path):
    assert main(["ablate", *_args(workdir, "--relation", "country_capital", "--sizes", "1,5",
                                  "--out", str(tmp_path / "s"))]) == 0
    rows = list(csv.DictReader((tmp_path / "s" / "sweep.csv").open()))
    assert [r["n_blocked"] for r in rows] == ["0", "1", "5"]
    assert main(["ablate", *_args(workdir, "--relation", "country_capital", "--sizes", "",
                                  "--out", str(tmp_path / "t"))]) == 0
    assert len(list(csv.DictReader((tmp_path / "t" / "sweep.csv").open()))) == 1


def test_causal(workdir, tmp_path):
    plan = json.loads((workdir / "model" / "plan.json").read_text())
    slot = plan["refinement"]["country_capital"]
    assert main(["causal", *_args(workdir, "--relation", "country_capital", "--head", "0:0",
                                  "--expert", f"{slot['layer']}:{slot['expert']}", "--ig-steps", "16",
                                  "--ig-prompts", "2", "--out", str(tmp_path / "c"))]) == 0
    out = json.loads((tmp_path / "c" / "causal.json").read_text())
    assert out["forcing"]["recovery_ratio"] == pytest.approx(1.0)
    assert 0.0 < out["ig"]["head_attribution_fraction"] <= 1.0


def test_report_is_idempotent(workdir, tmp_path):
    args = ["report", "--inputs", f"small={workdir / 'model' / 'model.moem'}", "--data", str(workdir / "data")]
    assert main([*args, "--out", str(tmp_path / "r1")]) == 0
    assert main([*args, "--out", str(tmp_path / "r2")]) == 0
    t1 = (tmp_path / "r1" / "table1.csv").read_bytes()
    assert t1 == (tmp_path / "r2" / "table1.csv").read_bytes()
    assert t1.decode().split("\n")[0].startswith("model,hit_at_10,mrr,total_ffn_gain")
    for f in ["curve.csv", "correlation.csv", "stages.json"]:
        assert (tmp_path / "r1" / "small" / f).read_bytes() == (tmp_path / "r2" / "small" / f).read_bytes()


@pytest.mark.parametrize("extra, code", [
    (["--relation", "no_such_relation"], 2),
    (["--block", "0:99"], 2),
    (["--mode", "sideways"], 2),
    (["--block", "zero"], 2),
])
def test_eval_usage_errors(workdir, tmp_path, extra, code):
    assert main(["eval", *_args(workdir, *extra, "--out", str(tmp_path / "x"))]) == code


def test_missing_input_and_capacity(tmp_path):
    assert main(["eval", "--model", str(tmp_path / "nope.moem"), "--data", str(tmp_path),
                 "--out", str(tmp_path / "o")]) == 2
    assert main(["gen-data", "--vocab", "10", "--out", str(tmp_path / "d")]) == 3


def test_empty_routing_exit_code(workdir, tmp_path):
    blocks = [x for e in range(16) for x in ("--block", f"1:{e}")]
    assert main(["eval", *_args(workdir, *blocks, "--out", str(tmp_path / "x"))]) == 4


def test_version_and_help_json(capsys):
    assert main(["--version"]) == 0
    assert __version__ in capsys.readouterr().out
    assert main(["--help-json"]) == 0
    tree = json.loads(capsys.readouterr().out)
    assert {"gen-data", "plant", "eval", "attribute", "ablate", "causal", "report"} <= set(tree["commands"])
