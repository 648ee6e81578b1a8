import csv
import json
import math

import pytest

from pregate_moe import __version__
from pregate_moe.cli import COMMANDS, ExperimentConfig, main
from pregate_moe.workload import generate_trace, save_trace

SMALL = {"num_requests": 40, "samples_per_domain": 32, "distill_steps": 10, "vocab_size": 64,
         "analyze_tokens": 2000, "capacities": [2, 3]}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(SMALL))
    return path


def run(command, out, *extra):
    return main([command, "--out", str(out), *map(str, extra)])


def rows(path):
    with open(path, encoding="utf-8") as f:
        return list(csv.DictReader(line for line in f if not line.startswith("#")))


def files(out):
    return {p.name: p.read_bytes() for p in sorted(out.iterdir())}


class TestSubcommands:
    def test_refactor(self, tmp_path, config):
        assert run("refactor", tmp_path, "--config", config) == 0
        report = json.loads("".join((tmp_path / "refactor_report.json").read_text().splitlines(True)[1:]))
        assert report["dense_equivalence_max_rel_error"] < 1e-6
        assert report["distill_loss_final"] < report["distill_loss_initial"]

    def test_gen_trace_and_simulate(self, tmp_path, config):
        assert run("gen-trace", tmp_path, "--config", config, "--seed", 3) == 0
        trace = tmp_path / "trace.tsv"
        assert trace.read_text().startswith("#pregate-trace v1 N=8 K=1 seed=3")
        assert run("simulate", tmp_path, "--config", config, "--trace", trace,
                   "--scheduler", "fifo", "--cache", "lru", "--capacity", 3) == 0
        (row,) = rows(tmp_path / "metrics.csv")
        assert row["scheduler"] == "fifo" and row["cache_policy"] == "lru" and row["capacity"] == "3"

    def test_expert_aware_has_fewer_unique_experts(self, tmp_path, config):
        trace = tmp_path / "t.tsv"
        save_trace(generate_trace(80, 30.0, seed=5), trace)
        unique = {}
        for sched in ("expert-aware", "decode-priority"):
            out = tmp_path / sched
            assert run("simulate", out, "--config", config, "--trace", trace, "--scheduler", sched) == 0
            unique[sched] = float(rows(out / "metrics.csv")[0]["mean_unique_experts"])
        assert unique["expert-aware"] < unique["decode-priority"]

    def test_cache_bench_ordering(self, tmp_path, config):
        assert run("cache-bench", tmp_path, "--config", config) == 0
        ratio = {(r["policy"], r["capacity"]): float(r["hit_ratio"]) for r in rows(tmp_path / "cache_bench.csv")}
        for k in ("2", "3"):
            assert ratio[("belady", k)] >= ratio[("lru", k)]
            assert ratio[("belady", k)] >= ratio[("random", k)]

    def test_analyze_full_locality(self, tmp_path, config):
        assert run("analyze", tmp_path, "--config", config, "--locality", 1.0) == 0
        for r in rows(tmp_path / "mutual_information.csv"):
            assert math.isclose(float(r["mi_bits"]), float(r["h_prev_bits"]), abs_tol=1e-6)
        text = (tmp_path / "temporal_distance.csv").read_text()
        assert "follow_last_fraction=1.000000" in text and "distance1_fraction=1.000000" in text

    def test_analyze_layerwise(self, tmp_path, config):
        cfg = tmp_path / "lw.json"
        cfg.write_text(json.dumps({**SMALL, "analyze_source": "layerwise"}))
        assert run("analyze", tmp_path / "o", "--config", cfg) == 0
        assert (tmp_path / "o" / "transition_l3.csv").exists()

    def test_report(self, tmp_path, config):
        assert run("simulate", tmp_path, "--config", config) == 0
        assert run("report", tmp_path, "--config", config) == 0
        assert "expert-aware" in (tmp_path / "report.txt").read_text()

    def test_report_without_results(self, tmp_path):
        assert run("report", tmp_path) == 1


class TestValidation:
    def test_d_above_hidden(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"hidden": 8, "expert_hidden": 9}))
        assert run("refactor", tmp_path, "--config", cfg) == 1
        assert "expert_hidden" in capsys.readouterr().err

    def test_unknown_field(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"colour": 1}))
        assert run("simulate", tmp_path, "--config", cfg) == 1
        assert "colour" in capsys.readouterr().err

    def test_bad_flag_value(self, tmp_path):
        assert run("simulate", tmp_path, "--scheduler", "lifo") == 1

    def test_locality_out_of_range(self, tmp_path, capsys):
        assert run("gen-trace", tmp_path, "--locality", 1.5) == 1
        assert "locality" in capsys.readouterr().err

    def test_missing_trace(self, tmp_path):
        assert run("simulate", tmp_path, "--trace", tmp_path / "nope.tsv") == 1

    def test_malformed_trace(self, tmp_path, capsys):
        bad = tmp_path / "bad.tsv"
        bad.write_text("")
        assert run("simulate", tmp_path, "--trace", bad) == 1
        assert "missing header" in capsys.readouterr().err

    def test_expert_count_mismatch(self, tmp_path, config):
        trace = tmp_path / "t.tsv"
        save_trace(generate_trace(3, 10.0, seed=1), trace)
        assert run("simulate", tmp_path, "--trace", trace, "--num-experts", 4) == 1

    def test_flags_override_config(self, tmp_path):
        from pregate_moe.cli import build_parser, resolve_config

        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"seed": 4, "arrival_rate": 12.0}))
        args = build_parser().parse_args(["simulate", "--config", str(cfg), "--seed", "9"])
        resolved = resolve_config(args)
        assert resolved.seed == 9 and resolved.arrival_rate == 12.0

    def test_seed_range(self):
        with pytest.raises(ValueError, match="seed"):
            ExperimentConfig(seed=2 ** 64).validate()


class TestDeterminism:
    @pytest.mark.parametrize("command", [c for c in COMMANDS if c != "report"])
    def test_byte_identical(self, tmp_path, config, command):
        a, b = tmp_path / "a", tmp_path / "b"
        assert run(command, a, "--config", config, "--seed", 7) == 0
        assert run(command, b, "--config", config, "--seed", 7) == 0
        assert files(a) == files(b)

    def test_headers(self, tmp_path, config):
        out = tmp_path / "out"
        for command in COMMANDS:
            assert run(command, out, "--config", config) == 0
        header = f"# pregate-moe {__version__} config="
        for p in out.iterdir():
            if p.suffix == ".pgw":
                assert header.encode() in p.read_bytes()[:200]
            elif p.name == "trace.tsv":
                assert f"tool=pregate-moe-{__version__}" in p.read_text()
            else:
                assert p.read_text().startswith(header), p.name
