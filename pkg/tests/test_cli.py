import argparse
import json
import subprocess
import sys

import pytest

from kneurons.cli import main, parse_layers, parse_t_grid

SETS = ["--prompts", "france-capital-en-1", "--prompts", "france-capital-en-2"]


@pytest.fixture(scope="module")
def toy_path(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy")
    assert main(["make-toy", "--out", str(out), "--prompts", "france-capital-en-1",
                 "--prompts", "france-capitale-fr", "--prompts", "germany-capital-en",
                 "--prompts", "cow-eats-grass-en"]) == 0
    return out / "toy.json"


def read(path):
    return json.loads(path.read_text())


def test_t_grid_parsing():
    assert parse_t_grid("0:0.5:0.05") == pytest.approx([round(0.05 * k, 2) for k in range(11)])
    assert parse_t_grid("0.2") == [0.2]
    assert parse_layers("1,3") == (0, 2)
    with pytest.raises(argparse.ArgumentTypeError):
        parse_t_grid("0.5:0:0.1")


def test_usage_error_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["stats", "--steps", "many"])
    assert exc.value.code == 2


def test_runtime_error_exits_1_with_json(tmp_path, capsys):
    code = main(["stats", "--out", str(tmp_path), "--model", str(tmp_path / "missing"),
                 "--prompts", "france-capital-en-1"])
    assert code == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "load" and err["message"]


def test_missing_model_is_argument_error(tmp_path, capsys):
    assert main(["stats", "--out", str(tmp_path), "--prompts", "france-capital-en-1"]) == 1
    assert json.loads(capsys.readouterr().err)["error"] == "argument"


def test_attribute_then_stats_from_maps(tmp_path, toy_path):
    out = tmp_path / "r"
    assert main(["attribute", "--out", str(out), "--model", str(toy_path),
                 "--prompts", "germany-capital-en", "--steps", "5", "--jobs", "2"]) == 0
    maps = sorted((out / "maps").glob("*.json"))
    assert len(maps) == 7
    doc = read(maps[0])
    assert doc["schema"] == "kneurons.attribution_map" and doc["manifest"] == "manifest.json"
    assert main(["stats", "--out", str(tmp_path / "s"), "--maps", str(out / "maps")]) == 0
    stats = read(tmp_path / "s" / "stats.json")
    assert stats["n_prompts"] == 7 and len(stats["mean"]) == 4


def test_jobs_do_not_change_results(tmp_path, toy_path):
    for jobs in ("1", "3"):
        assert main(["attribute", "--out", str(tmp_path / jobs), "--model", str(toy_path),
                     "--prompts", "cow-eats-grass-en", "--steps", "4", "--jobs", jobs]) == 0
    for f in (tmp_path / "1" / "maps").glob("*.json"):
        assert f.read_bytes() == (tmp_path / "3" / "maps" / f.name).read_bytes()


def test_results_byte_identical_and_manifest(tmp_path, toy_path):
    args = ["overlap", "--model", str(toy_path), "--a", "france-capital-en-1",
            "--b", "germany-capital-en", "--steps", "5"]
    assert main(args + ["--out", str(tmp_path / "x")]) == 0
    assert main(args + ["--out", str(tmp_path / "y")]) == 0
    assert (tmp_path / "x" / "overlap.json").read_bytes() == (tmp_path / "y" / "overlap.json").read_bytes()
    manifest = read(tmp_path / "x" / "manifest.json")
    assert manifest["command"] == "overlap" and manifest["outputs"] == ["overlap.json"]
    assert str(toy_path) in manifest["inputs"] and "created" in manifest
    assert len(read(tmp_path / "x" / "overlap.json")["t_grid"]) == 11


def test_refine_and_suppress(tmp_path, toy_path):
    assert main(["refine", "--out", str(tmp_path), "--model", str(toy_path),
                 "--prompts", "france-capital-en-1", "--t", "0.5", "--steps", "5"]) == 0
    refined = read(tmp_path / "refine.json")
    assert refined["size"] >= 1 and refined["layer_index_base"] == 1
    assert main(["suppress", "--out", str(tmp_path), "--model", str(toy_path),
                 "--prompts", "france-capital-en-1", "--t", "0.5", "--steps", "5",
                 "--trials", "5"]) == 0
    reports = read(tmp_path / "suppress.json")["reports"]
    assert len(reports) == 7
    # every prompt but the first contains the planted trigger word
    assert all(r["attributed_drop"] > r["mean_random_drop"] for r in reports[1:])


def test_select_rejects_grid(tmp_path, toy_path, capsys):
    assert main(["select", "--out", str(tmp_path), "--model", str(toy_path),
                 "--prompts", "cow-eats-grass-en", "--t", "0:0.2:0.1"]) == 1


def test_layer_overlap(tmp_path, toy_path):
    assert main(["layer-overlap", "--out", str(tmp_path), "--model", str(toy_path),
                 "--a", "france-capital-en-1", "--b", "france-capitale-fr", "--t", "0.2",
                 "--steps", "5"]) == 0
    doc = read(tmp_path / "layer_overlap.json")
    assert doc["layers"] == [1, 2, 3, 4]


def test_grammar_convert_and_probe(tmp_path):
    src = tmp_path / "corpus.tab"
    src.write_text(
        "pattern\tconstr_id\tsent_id\tclass\tform\tn_attr\tlen_prefix\tsent\n"
        "p\t1\t0\tcorrect\tw5\t1\t2\tw3 w4 w5\n"
        "p\t1\t0\twrong\tw6\t1\t2\tw3 w4 w6\n"
        "p\t2\t0\tcorrect\tw5\t0\t1\tw3 w5\n"
        "p\t2\t0\twrong\tw6\t0\t1\tw3 w6\n")
    dst = tmp_path / "agree.jsonl"
    assert main(["grammar", "convert", str(src), str(dst), "--out", str(tmp_path / "c")]) == 0
    assert len(dst.read_text().splitlines()) == 2
    toy = tmp_path / "toy.json"
    toy.write_text(json.dumps({"kind": "toy", "layer_count": 2, "intermediate_dim": 4,
                               "vocab_size": 10, "planted": [
                                   {"layer": 1, "neuron_index": 0, "trigger": [3],
                                    "value_token": 5, "strength": 2.0}]}))
    out = tmp_path / "g"
    assert main(["grammar", "probe", "--out", str(out), "--model", str(toy),
                 "--data", str(dst), "--steps", "5"]) == 0
    doc = read(out / "grammar.json")
    assert doc["n_examples"] == 2 and sorted(doc["strata"]) == ["0", "1"]
    assert doc["global_max"]["good"] > doc["global_max"]["bad"]
    assert main(["plot", "--out", str(out), "--in", str(out / "grammar.json"),
                 "--what", "counts", "--name", "counts.png"]) == 0
    assert (out / "counts.png").stat().st_size > 0


def test_plot_overlap(tmp_path, toy_path):
    assert main(["overlap", "--out", str(tmp_path), "--model", str(toy_path),
                 "--a", "germany-capital-en", "--b", "cow-eats-grass-en", "--steps", "3"]) == 0
    assert main(["plot", "--out", str(tmp_path), "--in", str(tmp_path / "overlap.json")]) == 0
    assert (tmp_path / "figure.svg").read_text().lstrip().startswith("<?xml")


def test_toy_verify_small(tmp_path):
    assert main(["toy-verify", "--out", str(tmp_path), "--seeds", "5", "--trials", "5"]) == 0
    assert read(tmp_path / "toy_verify.json")["passed"] is True


def test_console_script_runs():
    proc = subprocess.run([sys.executable, "-m", "kneurons.cli", "--version"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip() == "0.1.0"
