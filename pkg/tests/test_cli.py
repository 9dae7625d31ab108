"""Command line runner: outputs, manifests, determinism and error handling."""

import json
import math
import subprocess
import sys

import pytest

from gwrwre import __version__
from gwrwre.cli import RunManifest, build_parser, classify_config, main, run
from gwrwre.config import example_config, validate
from gwrwre.csvio import read_csv, read_records

SMALL = """
seed = 3
[tree]
offspring = [[1, 0.5], [2, 0.5]]
[kernel]
variant = "iid"
values = [0.4, 1.5]
[simulate]
horizon = 400
replicas = 24
[ray]
n = [4, 8]
replicas = 500
[ldp]
lambdas = [0.0, 0.5, 1.0]
k_pieces = 8
[phase_diagram.x]
path = "classify.b"
values = [1.2, 1.5, 2.0]
"""

CHAIN = """
[kernel]
variant = "finite"
weights = [0.5, 2.0]
matrix = [[0.5, 0.5], [0.3, 0.7]]
[ray]
n = [3]
replicas = 300
x_star = {label = "1"}
[ldp]
lambdas = [0.0, 1.0]
k_pieces = 8
"""


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.toml"
    path.write_text(SMALL)
    return path


def run_main(args, out):
    return main(list(args) + ["--out", str(out)])


def test_classify_example_transient(tmp_path, capsys):
    assert run_main(["classify", "--example", "iid a=1, b=2"], tmp_path) == 0
    rec = read_records(tmp_path / "classify.csv")[0]
    assert rec["verdict"] == "Transient" and rec["criterion"] == "iid"
    assert rec["margin"] == pytest.approx(math.log(2))
    assert "verdict:   Transient" in capsys.readouterr().out


def test_simulate_twice_identical_bytes(tmp_path, small_config):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_main(["simulate", "--config", str(small_config)], a) == 0
    assert run_main(["simulate", "--config", str(small_config)], b) == 0
    assert (a / "simulate.csv").read_bytes() == (b / "simulate.csv").read_bytes()
    rows = read_records(a / "simulate.csv")
    assert [r["replica"] for r in rows] == list(range(24))
    assert {r["outcome"] for r in rows} <= {"ReturnedToRoot", "AliveAtHorizon"}


def test_seed_changes_simulation(tmp_path, small_config):
    run_main(["simulate", "--config", str(small_config)], tmp_path / "a")
    run_main(["simulate", "--config", str(small_config), "--seed", "4"], tmp_path / "b")
    assert (tmp_path / "a" / "simulate.csv").read_bytes() != (tmp_path / "b" / "simulate.csv").read_bytes()


@pytest.mark.parametrize("sub,files", [
    ("simulate", ["simulate.csv"]),
    ("ray", ["ray.csv"]),
    ("ldp", ["ldp.csv", "ldp_variational.csv"]),
    ("classify", ["classify.csv"]),
    ("phase-diagram", ["phase_diagram.csv"]),
])
def test_outputs_identical_across_thread_counts(tmp_path, small_config, sub, files):
    for threads in (1, 3):
        assert run_main([sub, "--config", str(small_config), "--threads", str(threads)],
                        tmp_path / f"t{threads}") == 0
    for name in files:
        assert (tmp_path / "t1" / name).read_bytes() == (tmp_path / "t3" / name).read_bytes()


def test_csv_header_carries_hash_schema_and_config(tmp_path, small_config):
    run_main(["ray", "--config", str(small_config)], tmp_path)
    meta, columns, rows = read_csv(tmp_path / "ray.csv")
    cfg = validate(__import__("tomli").loads(SMALL)) if sys.version_info < (3, 11) else None
    if cfg is not None:
        assert meta["config_hash"] == cfg.hash()
    assert meta["subcommand"] == "ray" and meta["seed"] == 3 and meta["version"] == __version__
    assert meta["config"]["kernel"]["values"] == [0.4, 1.5]
    assert [c for c, _ in columns] == ["n", "estimate", "stderr", "rate", "rate_stderr", "annealed_rate"]
    assert [r[0] for r in rows] == [4, 8]
    for _, p, se, rate, _, annealed in rows:
        assert 0 < p < 1 and se >= 0
        assert rate <= annealed + 1e-12


def test_manifest_accumulates_subcommands(tmp_path, small_config):
    run_main(["simulate", "--config", str(small_config)], tmp_path)
    run_main(["classify", "--config", str(small_config)], tmp_path)
    data = json.loads((tmp_path / "manifest.json").read_text())
    assert set(data) == {"config_hash", "seed", "version", "files", "wall_clock"}
    assert data["files"] == {"simulate": ["simulate.csv"], "classify": ["classify.csv"]}
    assert data["seed"] == 3 and data["version"] == __version__
    assert set(data["wall_clock"]) == {"simulate", "classify"}
    # a different seed starts a fresh manifest
    run_main(["classify", "--config", str(small_config), "--seed", "9"], tmp_path)
    data = json.loads((tmp_path / "manifest.json").read_text())
    assert data["files"] == {"classify": ["classify.csv"]} and data["seed"] == 9


def test_phase_diagram_sign_change_at_half(tmp_path):
    cfg = example_config("iid a=1, b=2")
    cfg = validate({**cfg.model_dump(mode="json"),
                    "phase_diagram": {"x": {"path": "kernel.a",
                                            "values": {"start": 0.1, "stop": 1.0, "num": 10}}}})
    manifest = run("phase-diagram", cfg, str(tmp_path))
    assert manifest.files == {"phase-diagram": ["phase_diagram.csv"]}
    rows = read_records(tmp_path / "phase_diagram.csv")
    for r in rows:
        a = r["kernel.a"]
        assert r["margin"] == pytest.approx(math.log(2 * a), abs=1e-9)
        if a < 0.5 - 1e-9:
            assert r["verdict"] == "Recurrent"
        elif a > 0.5 + 1e-9:
            assert r["verdict"] == "Transient"
        else:
            assert r["verdict"] == "Indeterminate"


def test_phase_diagram_marks_out_of_scope_points(tmp_path):
    cfg = validate({"kernel": {"variant": "point-mass", "a": 0.5},
                    "phase_diagram": {"x": {"path": "kernel.a", "values": [-1.0, 0.8]}}})
    run("phase-diagram", cfg, str(tmp_path))
    rows = read_records(tmp_path / "phase_diagram.csv")
    assert rows[0]["verdict"] == "OutOfScope" and math.isnan(rows[0]["margin"])
    assert rows[1]["verdict"] == "Transient"


def test_once_reinforced_example_classifies_transient():
    rep = classify_config(example_config("once-reinforced delta=1, b=3"))
    assert rep.verdict == "Transient" and rep.margin == pytest.approx(math.log(3))


def test_constant_threshold_fallback():
    cfg = validate({"kernel": {"variant": "iid", "values": [0.3, 2.0], "probs": [0.99, 0.01]},
                    "reinforcement": {"L": 0.25, "p": 0.5, "threshold": 0.5},
                    "classify": {"b": 1.1}})
    # the reinforced criterion only certifies transience; positive recurrence needs the fallback
    rep = classify_config(cfg)
    assert rep.criterion == "constant-threshold" and rep.verdict == "PositiveRecurrent"
    assert math.isfinite(rep.inputs["return_time_bound"])


def test_markov_config_and_ray_with_start_law(tmp_path):
    path = tmp_path / "chain.toml"
    path.write_text(CHAIN)
    for sub in ("classify", "ray", "ldp"):
        assert run_main([sub, "--config", str(path)], tmp_path) == 0
    rec = read_records(tmp_path / "classify.csv")[0]
    assert rec["criterion"].startswith("markov")
    assert json.loads(rec["inputs"])["b"] == 2.0
    ldp = read_records(tmp_path / "ldp.csv")
    assert ldp[0]["cgf"] == pytest.approx(0.0, abs=1e-12) and ldp[0]["method"].startswith("perron")
    var = read_records(tmp_path / "ldp_variational.csv")[0]
    assert var["status"] in ("ok", "gap-out-of-tolerance")
    assert var["value"] <= var["infimum"] + 1e-9


def test_green_columns(tmp_path):
    cfg = validate({**example_config("iid a=1, b=3").model_dump(mode="json"),
                    "classify": {"b": 3, "green": True, "green_replicas": 50, "green_n_max": 3}})
    run("classify", cfg, str(tmp_path))
    rec = read_records(tmp_path / "classify.csv")[0]
    assert rec["green_n_star"] == 1 and rec["green_product"] == pytest.approx(1.5)


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text('[kernel]\nvariant = "point-mass"\na = -1\n[simulate]\nhorizon = 0\n')
    assert run_main(["simulate", "--config", str(bad)], tmp_path) == 2
    err = capsys.readouterr().err
    assert "kernel.point-mass.a:" in err and "simulate.horizon:" in err


def test_threads_must_be_positive(tmp_path, small_config):
    assert run_main(["simulate", "--config", str(small_config), "--threads", "0"], tmp_path) == 2


def test_missing_config_file_exit_code(tmp_path):
    assert run_main(["classify", "--config", str(tmp_path / "none.toml")], tmp_path) == 3


def test_model_refusal_exit_code(tmp_path, capsys):
    path = tmp_path / "frozen.toml"
    path.write_text('[kernel]\nvariant = "finite"\nweights = [0.5, 2.0]\nmatrix = [[1, 0], [0, 1]]\n')
    assert run_main(["classify", "--config", str(path)], tmp_path) == 1
    assert "error:" in capsys.readouterr().err


def test_parser_requires_one_source():
    parser = build_parser()
    with pytest.raises(SystemExit):
        parser.parse_args(["classify"])
    with pytest.raises(SystemExit):
        parser.parse_args(["classify", "--config", "a", "--example", "iid a=1, b=2"])
    with pytest.raises(ValueError):
        run("nope", example_config("iid a=1, b=2"), None)


def test_manifest_json_round_trip():
    m = RunManifest("abc", 1, "0.1", {"ray": ["ray.csv"]}, {"ray": 0.5})
    assert json.loads(m.to_json())["files"] == {"ray": ["ray.csv"]}


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "gwrwre.cli", "classify", "--example", "iid a=0.2, b=3",
                           "--out", str(tmp_path)], capture_output=True, text=True, check=False)
    assert proc.returncode == 0, proc.stderr
    assert "Recurrent" in proc.stdout
