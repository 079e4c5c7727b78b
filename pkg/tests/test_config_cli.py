import json
import os
import subprocess
import sys

import pytest
from hypothesis import given
from hypothesis import strategies as st

from numasched.cli import main
from numasched.config import (
    DaemonConfig,
    config_to_dict,
    parse_config,
    serialize_config,
)
from numasched.errors import ConfigError

FIXTURE = os.path.join(os.path.dirname(__file__), "fixtures", "crowded_host")


class TestParseConfig:
    def test_empty_object_is_defaults(self):
        assert parse_config("{}") == DaemonConfig()

    def test_full_example(self):
        cfg = parse_config(json.dumps({
            "interval_ms": 250,
            "targets": ["ferret"],
            "importance": [{"match": "ferret", "weight": 2.0}, {"pid": 42, "weight": 3}],
            "pins": [{"match": "mysqld", "cpus": "0-3"}],
            "thresholds": {"imbalance": 0.3},
            "dry_run": True,
            "log_format": "json",
        }))
        assert cfg.interval == 0.25
        assert cfg.importance_table().lookup(42, "x") == 3.0
        assert cfg.pins[0].cpus == frozenset({0, 1, 2, 3})
        assert cfg.thresholds.imbalance == 0.3 and cfg.thresholds.idle == DaemonConfig().thresholds.idle

    @pytest.mark.parametrize("doc, needle", [
        ({"interval_ms": 0}, "interval_ms"),
        ({"interval_ms": 1.5}, "interval_ms"),
        ({"bogus": 1}, "bogus"),
        ({"importance": [{"match": "x"}]}, "importance[0].weight"),
        ({"importance": [{"weight": 2}]}, "importance[0]"),
        ({"pins": [{"pid": 3, "cpus": "3-1"}]}, "pins[0].cpus"),
        ({"thresholds": {"imbalance": -1}}, "thresholds.imbalance"),
        ({"log_format": "xml"}, "log_format"),
        ({"dry_run": "yes"}, "dry_run"),
    ])
    def test_errors_name_key(self, doc, needle):
        with pytest.raises(ConfigError) as exc:
            parse_config(json.dumps(doc))
        assert needle in str(exc.value)

    def test_not_json(self):
        with pytest.raises(ConfigError):
            parse_config("{interval_ms: 3")

    def test_default_targets_follow_importance(self):
        cfg = parse_config(json.dumps({"importance": [{"match": "ferret", "weight": 2},
                                                      {"pid": 7, "weight": 2}]}))
        flt = cfg.pid_filter()
        assert flt.wants(7, "vips") and flt.wants(9, "ferret") and not flt.wants(9, "vips")

    @given(
        st.integers(1, 10**6),
        st.lists(st.from_regex(r"[a-z]{1,8}", fullmatch=True), max_size=3),
        st.lists(st.tuples(st.integers(1, 10**5), st.floats(0.1, 10, allow_nan=False)),
                 max_size=3),
        st.lists(st.tuples(st.from_regex(r"[a-z]{1,6}", fullmatch=True),
                           st.sets(st.integers(0, 63), min_size=1)), max_size=3),
        st.floats(0, 2), st.booleans(), st.sampled_from(["text", "json"]),
    )
    def test_round_trip(self, interval, targets, importance, pins, imbalance, dry, fmt):
        doc = {
            "interval_ms": interval,
            "targets": targets,
            "importance": [{"pid": p, "weight": w} for p, w in importance],
            "pins": [{"match": m, "cpus": sorted(c)} for m, c in pins],
            "thresholds": {"imbalance": imbalance},
            "dry_run": dry,
            "log_format": fmt,
        }
        cfg = parse_config(json.dumps(doc))
        again = parse_config(serialize_config(cfg))
        assert again == cfg
        assert config_to_dict(again) == config_to_dict(cfg)


def run_cli(*args, cwd=None):
    return subprocess.run([sys.executable, "-m", "numasched", *args], capture_output=True,
                          text=True, cwd=cwd, timeout=120)


class TestSimulateCommand:
    def test_all_policies(self, tmp_path, capsys):
        out = tmp_path / "r.json"
        assert main(["simulate", "mixed_crowded", "--horizon", "1000", "--out", str(out)]) == 0
        doc = json.loads(out.read_text())
        assert len(doc["results"]) == 4
        summary = capsys.readouterr().out
        assert summary.startswith("mixed-crowded-4x10: noop makespan=")
        assert "proposed makespan=" in summary

    def test_byte_identical(self):
        a = run_cli("simulate", "mixed_crowded", "--horizon", "300")
        b = run_cli("simulate", "mixed_crowded", "--horizon", "300")
        assert a.returncode == b.returncode == 0
        assert a.stdout == b.stdout and a.stdout

    def test_single_policy(self, capsys):
        assert main(["simulate", "calibration", "--policy", "noop", "--horizon", "50"]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert [r["policy"] for r in doc["results"]] == ["noop"]

    def test_zero_horizon(self):
        with pytest.raises(SystemExit) as exc:
            main(["simulate", "mixed_crowded", "--horizon", "0"])
        assert exc.value.code == 2

    def test_bad_scenario(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text('{"topology": {"nodes": []}, "tasks": []}')
        assert main(["simulate", str(bad)]) == 2
        assert main(["simulate", str(tmp_path / "missing.json")]) == 2
        assert "bad scenario" in capsys.readouterr().err


class TestOtherCommands:
    def test_check_topology_fixture(self, capsys):
        assert main(["check-topology", "--sysfs-root", os.path.join(FIXTURE, "sys")]) == 0
        topo = json.loads(capsys.readouterr().out)
        assert len(topo["nodes"]) == 4

    def test_check_topology_missing(self, tmp_path):
        assert main(["check-topology", "--sysfs-root", str(tmp_path)]) == 2

    def test_bad_interval_flag(self):
        with pytest.raises(SystemExit) as exc:
            main(["daemon", "--interval", "0"])
        assert exc.value.code == 2

    def test_daemon_bad_config(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text('{"interval_ms": -5}')
        assert main(["daemon", "--config", str(cfg)]) == 2

    def test_module_entry_point_help(self):
        res = run_cli("--help")
        assert res.returncode == 0 and "simulate" in res.stdout
