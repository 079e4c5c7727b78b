import json
import os

import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from numasched.errors import BackendError, ConfigError
from numasched.hostsim import (
    PARSEC_PROFILES,
    SimBackend,
    SimHost,
    SimTask,
    effective_rate,
    experiment_document,
    load_scenario,
    read_scenario,
    render_procfs,
    render_sysfs,
    run_all,
    run_policy_experiment,
    scenario_from_dict,
    sim_step,
)
from numasched.hostsim.render import numa_maps_text
from numasched.procmon import parse_numa_maps
from numasched.topology import build_topology

from _support import sim_hosts

ONE = build_topology([[0, 1]], [1000])
TWO = build_topology([[0, 1], [2, 3]], [1000, 1000])


def minimal(**task):
    doc = {
        "topology": {"nodes": [{"id": 0, "cores": [0], "mem_total_pages": 100}]},
        "tasks": [dict({"pid": 1, "work_total": 10}, **task)],
    }
    return doc


class TestScenario:
    def test_minimal_defaults(self):
        host = scenario_from_dict(minimal())
        t = host.task(1)
        assert (t.importance, t.base_rate, t.access_intensity) == (1.0, 1.0, 0.5)
        assert t.affinity == frozenset({0})
        assert host.params.alpha == 0.5 and host.params.beta == 1.0

    def test_bundled_scenario(self):
        host, _ = read_scenario("mixed_crowded")
        assert len(host.tasks) == 8
        assert len(host.topology.nodes) == 4
        assert all(len(n.core_ids) == 10 for n in host.topology.nodes)
        cpu = [t for t in host.tasks if t.access_intensity == 0.1]
        mem = [t for t in host.tasks if t.access_intensity >= 0.9]
        assert len(cpu) == len(mem) == 4
        # everything starts on node 0; canneal's high data exchange spills half to node 1
        for t in host.tasks:
            assert t.pages.get(0, 0) >= t.total_pages // 2
        assert sum(t.importance > 1 for t in host.tasks) == 4

    def test_page_on_missing_node(self):
        with pytest.raises(ConfigError, match=r"tasks\[0\]\.pages"):
            scenario_from_dict(minimal(pages={"3": 5}))

    @pytest.mark.parametrize("task, field", [
        ({"pid": "x"}, "tasks[0].pid"),
        ({"access_intensity": 2}, "tasks[0].access_intensity"),
        ({"affinity": [9]}, "tasks[0].affinity"),
        ({"profile": "nope"}, "tasks[0].profile"),
        ({"work_total": 0}, "tasks[0]"),
    ])
    def test_errors_name_field(self, task, field):
        with pytest.raises(ConfigError) as exc:
            scenario_from_dict(minimal(**task))
        assert field in str(exc.value)

    def test_bad_json(self):
        with pytest.raises(ConfigError):
            load_scenario("{")

    def test_profile_mapping(self):
        doc = minimal(profile="canneal", access_intensity=0.5, pages={"0": 10})
        doc["topology"]["nodes"].append({"id": 1, "cores": [1], "mem_total_pages": 100})
        t = scenario_from_dict(doc).task(1)
        assert t.access_intensity == pytest.approx(0.7)
        assert t.pages == {0: 5, 1: 5}

    def test_table_profiles(self):
        assert PARSEC_PROFILES["canneal"].sharing == "high"
        assert PARSEC_PROFILES["canneal"].exchange == "high"
        assert PARSEC_PROFILES["canneal"].granularity == "fine"
        assert PARSEC_PROFILES["blackscholes"].exchange == "low"
        assert len(PARSEC_PROFILES) == 12


def task(pid, pages, affinity, ai=1.0, rate=1.0, work=100.0, **kw):
    return SimTask(pid, work, pages, frozenset(affinity), access_intensity=ai, base_rate=rate,
                   **kw)


class TestRate:
    def test_sole_local_task_full_speed(self):
        host = SimHost(ONE, [task(1, {0: 500}, {0})])
        host.assign_cores()
        assert effective_rate(host.task(1), host) == 1.0

    def test_fully_remote_no_excess(self):
        host = SimHost(TWO, [task(1, {1: 100}, {0}), task(2, {0: 100}, {2}, ai=0.0)])
        host.assign_cores()
        # pressures equal, so only the remote penalty applies
        assert effective_rate(host.task(1), host) == pytest.approx(0.5)

    def test_calibration_over_ninety_percent(self):
        host, _ = read_scenario("calibration")
        host.assign_cores()
        probe = host.task(1)
        assert probe.access_intensity == 1.0 and host.task(1).pages == {1: 100}
        assert effective_rate(probe, host) <= 0.1 * probe.base_rate

    def test_requires_running_core(self):
        with pytest.raises(ValueError):
            effective_rate(task(1, {0: 1}, {0}), SimHost(ONE, [task(1, {0: 1}, {0})]))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 5000), st.integers(0, 5000), st.floats(0, 1))
    def test_more_competitor_pages_never_faster(self, base, extra, ai):
        def rate(competitor):
            host = SimHost(TWO, [task(1, {0: 200}, {0}, ai=ai),
                                 task(2, {0: competitor}, {1}, ai=0.0)])
            host.assign_cores()
            return effective_rate(host.task(1), host)
        assert rate(base + extra) <= rate(base) + 1e-12


class TestStep:
    def test_one_task_advances(self):
        host = SimHost(ONE, [task(1, {0: 1}, {0}, ai=0.0, rate=10.0)])
        sim_step(host, 1.0)
        assert host.task(1).work_done == 10.0
        assert host.time == 1.0

    def test_core_claim_lower_pid_first(self):
        host = SimHost(ONE, [task(2, {}, {0}, ai=0.0), task(1, {}, {0}, ai=0.0)])
        sim_step(host, 1.0)
        assert host.task(1).work_done == 1.0 and host.task(2).work_done == 0.0

    def test_finished_stops(self):
        host = SimHost(ONE, [task(1, {}, {0}, ai=0.0, work=1.5)])
        for _ in range(4):
            sim_step(host, 1.0)
        t = host.task(1)
        assert t.work_done == 1.5 and t.completed_at == pytest.approx(1.5)
        assert render_procfs(host) == {}

    def test_ticks_follow_run_time(self):
        host = SimHost(ONE, [task(1, {}, {0}, ai=0.0)])
        for _ in range(7):
            sim_step(host, 0.1)
        assert host.task(1).utime_ticks == 70

    def test_bad_dt(self):
        with pytest.raises(ValueError):
            sim_step(SimHost(ONE, []), 0)


class TestRender:
    def test_numa_maps_token(self):
        assert "N0=5" in numa_maps_text(task(1, {0: 5}, {0}))

    def test_empty_host(self):
        assert render_procfs(SimHost(ONE, [])) == {}

    def test_two_node_dirs(self):
        tree = render_sysfs(SimHost(TWO, []))
        assert sorted({p.split("/")[3] for p in tree}) == ["node0", "node1"]

    def test_single_node_distance(self):
        tree = render_sysfs(SimHost(ONE, []))
        assert tree["devices/system/node/node0/distance"] == "10\n"

    @settings(max_examples=100, deadline=None)
    @given(sim_hosts())
    def test_numa_maps_round_trip(self, case):
        host, _ = case
        for t in host.tasks:
            assert dict(parse_numa_maps(numa_maps_text(t)).per_node_pages) == t.resident()


class TestBackend:
    def test_migrate_counts(self):
        host = SimHost(TWO, [task(1, {0: 5, 1: 2}, {0})])
        assert SimBackend(host).migrate_pages(1, {0}, 1) == 0
        assert host.task(1).pages == {0: 0, 1: 7}

    def test_empty_affinity(self):
        host = SimHost(TWO, [task(1, {0: 5}, {0})])
        with pytest.raises(BackendError):
            SimBackend(host).set_affinity(1, set())

    def test_unknown_pid(self):
        with pytest.raises(BackendError):
            SimBackend(SimHost(TWO, [])).current_affinity(5)

    def test_set_and_read_affinity(self):
        host = SimHost(TWO, [task(1, {0: 5}, {0})])
        b = SimBackend(host)
        b.set_affinity(1, {2, 3})
        assert b.current_affinity(1) == frozenset({2, 3})
        assert [c[0] for c in b.mutations] == ["set_affinity"]

    @settings(max_examples=100, deadline=None,
              suppress_health_check=[HealthCheck.too_slow])
    @given(sim_hosts(max_tasks=4), st.lists(st.tuples(
        st.sampled_from(["migrate", "affinity", "step"]), st.integers(0, 3),
        st.sets(st.integers(0, 3)), st.integers(0, 3)), max_size=15))
    def test_page_conservation(self, case, ops):
        host, _ = case
        totals = {t.pid: t.total_pages for t in host.tasks}
        backend = SimBackend(host)
        nodes = len(host.topology.nodes)
        cores = list(host.topology.all_cores)
        for op, idx, nodeset, target in ops:
            pid = host.tasks[idx % len(host.tasks)].pid
            try:
                if op == "migrate":
                    backend.migrate_pages(pid, {n % nodes for n in nodeset}, target % nodes)
                elif op == "affinity":
                    backend.set_affinity(pid, {cores[n % len(cores)] for n in nodeset})
                else:
                    sim_step(host, 0.5)
            except BackendError:
                pass
        assert {t.pid: t.total_pages for t in host.tasks} == totals


def local_scenario():
    return {
        "topology": {"nodes": [{"id": 0, "cores": "0-1", "mem_total_pages": 1000},
                               {"id": 1, "cores": "2-3", "mem_total_pages": 1000}]},
        "tasks": [
            {"pid": 1, "work_total": 20, "pages": {"0": 50}, "affinity": [0],
             "access_intensity": 0.9},
            {"pid": 2, "work_total": 20, "pages": {"1": 50}, "affinity": [2],
             "access_intensity": 0.9},
        ],
    }


class TestExperiment:
    def test_uncontended_all_tie(self):
        results = run_all(local_scenario(), 100.0)
        assert len({json.dumps(r.to_dict()["completion_times"]) for r in results}) == 1
        # equal work so neither finishes early and unbalances the other's node
        assert results[0].completion_times == {1: pytest.approx(20.0), 2: pytest.approx(20.0)}

    def test_horizon_must_be_positive(self):
        with pytest.raises(ValueError):
            run_policy_experiment(local_scenario(), "noop", 0)

    def test_unknown_policy(self):
        with pytest.raises(ValueError):
            run_policy_experiment(local_scenario(), "magic", 10)

    def test_proposed_beats_noop_on_important_tasks(self):
        host, _ = read_scenario("mixed_crowded")
        noop = run_policy_experiment(host, "noop", 1000)
        proposed = run_policy_experiment(host, "proposed", 1000)
        assert proposed.important_mean < noop.important_mean
        assert proposed.reports > 0

    def test_deterministic_document(self):
        host, _ = read_scenario("mixed_crowded")
        a = experiment_document(run_all(host, 400), host.name, 400)
        b = experiment_document(run_all(host, 400), host.name, 400)
        assert a == b
        doc = json.loads(a)
        assert [r["policy"] for r in doc["results"]] == \
            ["noop", "static-pin", "auto-balance", "proposed"]

    def test_unfinished_within_horizon(self):
        result = run_policy_experiment(local_scenario(), "noop", 15.0)
        assert result.completion_times[2] is None and result.makespan is None

    def test_bundled_scenarios_listed(self):
        from numasched.hostsim import builtin_scenarios
        assert {"calibration", "mixed_crowded"} <= set(builtin_scenarios())
        path = os.path.join(os.path.dirname(__import__("numasched").__file__),
                            "hostsim", "scenarios", "mixed_crowded.json")
        host, _ = read_scenario(path)
        assert host.name == "mixed-crowded-4x10"
