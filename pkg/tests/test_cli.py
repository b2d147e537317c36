"""CLI: subcommands, config validation, determinism, fault injection."""

import json

import pytest

from spsim.cli import main

SMALL_SCENARIO = {
    "topology": {"nodes": 2, "gpus_per_node": 2},
    "model": "7b",
    "workload": {"seq_len": 64},
    "seed": 3,
}


def write_config(tmp_path, payload, name="scenario.json"):
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return str(path)


def run_cli(*argv):
    return main(list(argv))


class TestConfigHandling:
    def test_unknown_top_level_key(self, tmp_path, capsys):
        cfg = write_config(tmp_path, {"modle": "7b"})
        assert run_cli("plan", "--config", cfg) == 2
        assert "unknown key 'scenario.modle'" in capsys.readouterr().err

    def test_corrupted_strategy_kind_names_the_key(self, tmp_path, capsys):
        cfg = write_config(tmp_path, {"strategy": {"kind": "ringg"}})
        assert run_cli("plan", "--config", cfg) == 2
        err = capsys.readouterr().err
        assert "strategy.kind" in err and "ringg" in err

    def test_invalid_json_reports_line(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text('{"model": }')
        assert run_cli("plan", "--config", str(path)) == 2
        assert ":1:" in capsys.readouterr().err

    def test_unknown_model_lists_available(self, tmp_path, capsys):
        cfg = write_config(tmp_path, {"model": "70b"})
        assert run_cli("plan", "--config", cfg) == 2
        err = capsys.readouterr().err
        assert "1.5b" in err and "7b" in err and "8b" in err

    def test_unknown_workload_key(self, tmp_path, capsys):
        cfg = write_config(tmp_path, {"workload": {"seqlen": 10}})
        assert run_cli("plan", "--config", cfg) == 2
        assert "workload.seqlen" in capsys.readouterr().err


class TestVerify:
    def test_default_small_scenario_passes(self, tmp_path, capsys):
        cfg = write_config(tmp_path, SMALL_SCENARIO)
        out = tmp_path / "verify.csv"
        assert run_cli("verify", "--config", cfg, "--out", str(out)) == 0
        lines = out.read_text().splitlines()
        assert lines[0].startswith("check,strategy")
        assert lines[-1].startswith("# spsim")
        body = [l for l in lines[1:-1]]
        strategies = {l.split(",")[1] for l in body}
        assert len(strategies) >= 4
        assert all(",pass," in l for l in body)

    def test_injected_fault_fails_and_names_rank_step(self, tmp_path, capsys):
        cfg = write_config(tmp_path, {**SMALL_SCENARIO, "inject_fault_message": 0})
        out = tmp_path / "verify.csv"
        assert run_cli("verify", "--config", cfg, "--out", str(out)) == 1
        text = out.read_text()
        assert ",FAIL," in text
        assert "tampered message from rank" in text
        assert "at step" in text


class TestDeterminism:
    @pytest.mark.parametrize("command,extra", [
        ("verify", ()),
        ("simulate", ()),
        ("profile", ("--model", "1.5b")),
        ("plan", ()),
        ("infer", ()),
    ])
    def test_rerun_is_byte_identical(self, tmp_path, command, extra):
        cfg = write_config(tmp_path, SMALL_SCENARIO)
        out_a = tmp_path / "a.out"
        out_b = tmp_path / "b.out"
        assert run_cli(command, "--config", cfg, "--out", str(out_a), *extra) == 0
        assert run_cli(command, "--config", cfg, "--out", str(out_b), *extra) == 0
        assert out_a.read_bytes() == out_b.read_bytes()
        if command == "simulate":
            assert (tmp_path / "a.out.commlog.csv").read_bytes() == \
                (tmp_path / "b.out.commlog.csv").read_bytes()

    def test_different_seed_changes_verify_output(self, tmp_path):
        cfg = write_config(tmp_path, SMALL_SCENARIO)
        out_a = tmp_path / "a.csv"
        out_b = tmp_path / "b.csv"
        assert run_cli("verify", "--config", cfg, "--out", str(out_a)) == 0
        assert run_cli("verify", "--config", cfg, "--out", str(out_b), "--seed", "9") == 0
        assert out_a.read_bytes() != out_b.read_bytes()


class TestSimulate:
    def test_timeline_monotone_per_strategy(self, tmp_path):
        cfg = write_config(tmp_path, SMALL_SCENARIO)
        out = tmp_path / "sim.csv"
        assert run_cli("simulate", "--config", cfg, "--out", str(out)) == 0
        rows = [l.split(",") for l in out.read_text().splitlines()[1:-1]]
        by_strategy = {}
        for row in rows:
            by_strategy.setdefault(row[0], []).append((int(row[1]), float(row[2])))
        for strategy, pts in by_strategy.items():
            pts.sort()
            times = [t for _, t in pts]
            assert all(b >= a for a, b in zip(times, times[1:])), strategy

    def test_commlog_dump_matches_schema(self, tmp_path):
        cfg = write_config(tmp_path, SMALL_SCENARIO)
        out = tmp_path / "sim.csv"
        assert run_cli("simulate", "--config", cfg, "--out", str(out)) == 0
        lines = (tmp_path / "sim.csv.commlog.csv").read_text().splitlines()
        assert lines[0] == "step,kind,src,dst,bytes,link"
        assert len(lines) > 2
        for line in lines[1:-1]:
            fields = line.split(",")
            assert fields[1] in ("p2p", "a2a")
            assert fields[5] in ("intra", "inter")

    def test_two_stage_sidecar_from_samples_file(self, tmp_path):
        samples = tmp_path / "samples.txt"
        samples.write_text("".join(f"{i} 8 {260 + 20 * i}\n" for i in range(8)))
        cfg = write_config(tmp_path, {
            **SMALL_SCENARIO,
            "workload": {"seq_len": 64, "samples_file": str(samples)},
        })
        out = tmp_path / "sim.csv"
        assert run_cli("simulate", "--config", cfg, "--out", str(out)) == 0
        lines = (tmp_path / "sim.csv.twostage.csv").read_text().splitlines()
        assert lines[0] == "sp_degree,one_stage_s,two_stage_s,gain"
        for line in lines[1:-1]:
            sp_degree, one, two, gain = line.split(",")
            assert float(two) <= float(one)
            assert float(gain) >= 0.0


class TestProfileAndPlan:
    def test_profile_reproduces_table_within_tolerance(self, tmp_path):
        out = tmp_path / "profile.csv"
        assert run_cli("profile", "--model", "7b", "--out", str(out)) == 0
        rows = [l.split(",") for l in out.read_text().splitlines()[1:-1]]
        assert len(rows) == 5 * 4  # five frame counts, four components
        assert all(float(row[5]) < 0.02 for row in rows)

    def test_profile_unknown_model_is_config_error(self, capsys):
        assert run_cli("profile", "--model", "405b") == 2
        assert "available" in capsys.readouterr().err

    def test_profile_without_published_rows_is_config_error(self, capsys):
        assert run_cli("profile", "--model", "8b") == 2
        assert "no measured complexity rows" in capsys.readouterr().err

    def test_plan_on_two_node_default_prints_8x2(self, capsys):
        assert run_cli("plan") == 0
        out = capsys.readouterr().out
        assert "a2a = 8" in out and "p2p = 2" in out

    def test_strategy_flag_overrides(self, tmp_path):
        cfg = write_config(tmp_path, SMALL_SCENARIO)
        out = tmp_path / "sim.csv"
        assert run_cli("simulate", "--config", cfg, "--out", str(out),
                       "--strategy", "zigzag_ring") == 0
        log_lines = (tmp_path / "sim.csv.commlog.csv").read_text().splitlines()
        kinds = {l.split(",")[1] for l in log_lines[1:-1]}
        assert kinds == {"p2p"}


class TestInfer:
    def test_emits_both_modes_with_idle_pattern(self, tmp_path):
        cfg = write_config(tmp_path, SMALL_SCENARIO)
        out = tmp_path / "infer.csv"
        assert run_cli("infer", "--config", cfg, "--out", str(out)) == 0
        rows = [l.split(",") for l in out.read_text().splitlines()[1:-1]]
        pipeline = [r for r in rows if r[0] == "pipeline"]
        sp = [r for r in rows if r[0] == "sp"]
        assert len(pipeline) == len(sp) == 4
        # pipeline devices idle most of the time; SP devices never idle
        assert all(float(r[3]) > float(r[2]) for r in pipeline)
        assert all(float(r[3]) == 0.0 for r in sp)
