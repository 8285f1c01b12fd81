from __future__ import annotations

import random
from fractions import Fraction

import pytest

from flowcache import model
from flowcache.engine import Engine
from flowcache.mining import RuleSet, Thresholds, mine
from flowcache.recommend import (
    MatchDomainError,
    NodeStatus,
    Suggestion,
    check,
    estimate_time,
    parameter_match,
    rank,
    storage_plan,
)
from flowcache.store import Store
from helpers import (
    ScriptedTimer,
    ab_params,
    chain_graph,
    chain_registry,
    corpus_registry,
    random_graph,
    record_for_graph,
    simple_module,
    store_output,
)


class TestParameterMatch:
    def setup_method(self):
        self.registry = chain_registry(3)

    def states(self, graph, nodes):
        return [
            (graph.state(n).module_id, dict(graph.state(n).params)) for n in nodes
        ]

    def test_identical_sequences(self):
        g = chain_graph(self.registry)
        seq = self.states(g, ("n1", "n2", "n3"))
        assert parameter_match(seq, seq, self.registry) == 100

    def test_one_of_two_params(self):
        g1 = chain_graph(self.registry, length=1)
        g2 = chain_graph(self.registry, overrides={"n1": {"b": 9}}, length=1)
        assert parameter_match(
            self.states(g1, ("n1",)), self.states(g2, ("n1",)), self.registry
        ) == 50

    def test_hand_counted_eight_of_ten(self):
        # Modules with 2, 3, and 5 params; 8 of the 10 values equal.
        from flowcache.model import ModuleRegistry, ParamSpec

        def params(n):
            return tuple(ParamSpec(f"p{i}", "int", 0) for i in range(n))

        registry = ModuleRegistry(
            [
                simple_module("w1", params=params(2)),
                simple_module("w2", params=params(3)),
                simple_module("w3", params=params(5)),
            ]
        )
        cand = [
            ("w1", {"p0": 0, "p1": 0}),
            ("w2", {"p0": 0, "p1": 0, "p2": 0}),
            ("w3", {"p0": 0, "p1": 0, "p2": 0, "p3": 0, "p4": 0}),
        ]
        comp = [
            ("w1", {"p0": 0, "p1": 1}),          # 1 of 2 params differs
            ("w2", {"p0": 0, "p1": 0, "p2": 1}),  # 1 of 3 differs
            ("w3", {"p0": 0, "p1": 0, "p2": 0, "p3": 0, "p4": 0}),
        ]
        assert parameter_match(cand, comp, registry) == 80

    def test_module_mismatch_raises(self):
        g = chain_graph(self.registry)
        with pytest.raises(MatchDomainError):
            parameter_match(
                self.states(g, ("n1", "n2")), self.states(g, ("n2", "n1")), self.registry
            )

    def test_non_affecting_params_excluded(self):
        from flowcache.model import ModuleRegistry, ParamSpec

        registry = ModuleRegistry(
            [
                simple_module(
                    "m",
                    params=(
                        ParamSpec("a", "int", 0),
                        ParamSpec("threads", "int", 1, affects_output=False),
                    ),
                )
            ]
        )
        cand = [("m", {"a": 1, "threads": 4})]
        comp = [("m", {"a": 1, "threads": 16})]
        assert parameter_match(cand, comp, registry) == 100


class TestEstimateTime:
    def setup_method(self):
        self.registry = chain_registry(1)
        self.graph = chain_graph(self.registry, length=1)
        self.digest = self.graph.state("n1").state_digest

    def test_exact_state_mean(self):
        history = [
            record_for_graph(self.graph, "r1", exec_times={"n1": 100}),
            record_for_graph(self.graph, "r2", exec_times={"n1": 300}),
        ]
        est = estimate_time("m1", self.digest, history)
        assert (est.ms, est.fallback) == (200, False)

    def test_module_mean_fallback(self):
        other = chain_graph(self.registry, overrides={"n1": {"a": 42}}, length=1)
        history = [record_for_graph(other, "r1", exec_times={"n1": 500})]
        est = estimate_time("m1", self.digest, history)
        assert (est.ms, est.fallback) == (500, True)

    def test_unknown_without_history(self):
        est = estimate_time("m1", self.digest, [])
        assert est.ms is None

    def test_skipped_events_not_counted(self):
        history = [
            record_for_graph(self.graph, "r1", exec_times={"n1": 100}),
            record_for_graph(self.graph, "r2", outcomes={"n1": "skipped-loaded"}),
        ]
        est = estimate_time("m1", self.digest, history)
        assert est.ms == 100


def sug(pct, saved=None, created=0, sid="s"):
    return Suggestion(
        target_node="n",
        sid=sid,
        fingerprint="sha256:0",
        param_match_pct=pct,
        est_exec_time_ms=None if saved is None else saved + 10,
        est_fallback=False,
        load_time_ms=10,
        time_saved_ms=saved,
        load_warning=False,
        rule_confidence=None,
        created_at=created,
    )


class TestRank:
    def test_match_percent_first(self):
        out = rank([sug(80), sug(100)])
        assert [s.param_match_pct for s in out] == [100, 80]

    def test_time_saved_breaks_ties(self):
        out = rank([sug(100, saved=50), sug(100, saved=500)])
        assert [s.time_saved_ms for s in out] == [500, 50]

    def test_recency_breaks_remaining_ties(self):
        out = rank([sug(100, saved=50, created=1), sug(100, saved=50, created=9)])
        assert [s.created_at for s in out] == [9, 1]

    def test_fully_tied_preserves_input_order(self):
        a, b = sug(100, saved=50, sid="first"), sug(100, saved=50, sid="second")
        assert [s.sid for s in rank([a, b])] == ["first", "second"]

    def test_unknown_saving_sorts_after_known(self):
        out = rank([sug(100, saved=None), sug(100, saved=1)])
        assert [s.time_saved_ms for s in out] == [1, None]


class TestCheck:
    def setup_method(self):
        self.registry = chain_registry(2)
        self.graph = chain_graph(self.registry, length=2)

    def test_empty_store(self, store):
        status, suggestions = check(
            self.graph, "n2", RuleSet(), store, registry=self.registry
        )
        assert status is NodeStatus.CHECKED_NOT_FOUND
        assert suggestions == []

    def test_exact_fingerprint_yields_load_data(self, store):
        store_output(store, self.graph, "n2", "out0", self.registry)
        status, suggestions = check(
            self.graph, "n2", RuleSet(), store, registry=self.registry
        )
        assert status is NodeStatus.LOAD_DATA
        assert suggestions[0].param_match_pct == 100
        assert suggestions[0].fingerprint == str(
            model.fingerprint(self.graph, "n2", "out0", self.registry)
        )

    def test_one_of_four_params_differs_is_75(self, store):
        # Two modules with two params each: four params, one changed.
        candidate = chain_graph(self.registry, overrides={"n2": {"b": 9}}, length=2)
        store_output(store, candidate, "n2", "out0", self.registry)
        status, suggestions = check(
            self.graph, "n2", RuleSet(), store, registry=self.registry
        )
        assert status is NodeStatus.CHECKED_FOUND
        assert [s.param_match_pct for s in suggestions] == [75]
        assert suggestions[0].differing_params == (("m2", "b", 9, 2),)

    def test_unrelated_structure_ignored(self, store):
        other_registry = chain_registry(3)
        other = chain_graph(other_registry, length=3)
        store_output(store, other, "n3", "out0", other_registry)
        status, suggestions = check(
            self.graph, "n2", RuleSet(), store, registry=self.registry
        )
        assert status is NodeStatus.CHECKED_NOT_FOUND

    def test_load_warning_tracks_estimate(self, tmp_path):
        # Save takes 5 s, so the fresh entry's load estimate is 5000 ms,
        # far above the 1 ms history mean: warning must be set.
        slow = Store(tmp_path / "slow", timer=ScriptedTimer([5.0, 0.0]))
        store_output(slow, self.graph, "n2", "out0", self.registry)
        history = [
            record_for_graph(self.graph, "r1", exec_times={"n1": 1, "n2": 1})
        ]
        _, suggestions = check(
            self.graph, "n2", RuleSet(), slow,
            registry=self.registry, history=history,
        )
        s = suggestions[0]
        assert s.load_warning and s.time_saved_ms is not None and s.time_saved_ms < 0

        fast = Store(tmp_path / "fast", timer=ScriptedTimer([0.0, 0.0]))
        store_output(fast, self.graph, "n2", "out0", self.registry)
        _, suggestions = check(
            self.graph, "n2", RuleSet(), fast,
            registry=self.registry, history=history,
        )
        assert not suggestions[0].load_warning

    def test_warning_suppressed_without_estimate(self, tmp_path):
        slow = Store(tmp_path / "slow", timer=ScriptedTimer([5.0, 0.0]))
        store_output(slow, self.graph, "n2", "out0", self.registry)
        _, suggestions = check(
            self.graph, "n2", RuleSet(), slow, registry=self.registry, history=[]
        )
        assert suggestions[0].est_exec_time_ms is None
        assert not suggestions[0].load_warning

    def test_status_label_rules_on_random_corpus(self, tmp_path):
        registry = corpus_registry()
        rng = random.Random(31)
        thresholds = Thresholds(min_support=1, min_confidence=Fraction(0))
        for trial in range(10):
            store = Store(tmp_path / f"s{trial}")
            graph = random_graph(rng, registry, max_nodes=6)
            engine = Engine(
                registry, store, resolver=lambda r: b"seed", thresholds=thresholds
            )
            result = engine.run(graph)
            # A perturbed copy: bump one node's param.
            victim = rng.choice(sorted(graph.nodes))
            nodes = dict(graph.nodes)
            state = graph.state(victim)
            params = dict(state.params)
            params["a"] += 10
            nodes[victim] = model.canonical_state(
                registry.get(state.module_id), params
            )
            perturbed = model.WorkflowGraph(
                "wf-p", nodes, graph.edges, dict(graph.input_bindings),
                graph.declared_outputs,
            )
            for g in (graph, perturbed):
                for node in g.nodes:
                    status, suggestions = check(
                        g, node, result.rules, store, registry=registry
                    )
                    exact = [s for s in suggestions if s.param_match_pct == 100]
                    if status is NodeStatus.LOAD_DATA:
                        assert exact
                    elif status is NodeStatus.CHECKED_FOUND:
                        assert suggestions and not exact
                    else:
                        assert not suggestions
                    # Exact-match soundness.
                    fps = {
                        str(model.fingerprint(g, node, p.name, registry))
                        for p in registry.get(g.state(node).module_id).output_ports
                    }
                    for s in suggestions:
                        assert (s.param_match_pct == 100) == (s.fingerprint in fps)

    def test_suggestion_completeness_and_uniqueness(self, tmp_path):
        registry = chain_registry(3)
        store = Store(tmp_path / "s")
        variants = [{}, {"n2": {"a": 5}}, {"n3": {"b": 7}}, {"n1": {"a": 2}}]
        for i, overrides in enumerate(variants):
            g = chain_graph(registry, f"wf{i}", overrides=overrides)
            store_output(store, g, "n3", "out0", registry, payload=bytes([i]))
        composed = chain_graph(registry, "probe")
        _, suggestions = check(composed, "n3", RuleSet(), store, registry=registry)
        # Brute-force oracle: every stored entry whose module-id sequence
        # matches the composed prefix must appear exactly once.
        composed_modules = [
            le.module_id for le in model.lineage(composed, "n3", registry)
        ]
        expected = {
            e.sid
            for e in store.live_entries()
            if [x["module_id"] for x in e.lineage] == composed_modules
        }
        got = [s.sid for s in suggestions]
        assert sorted(got) == sorted(expected)
        assert len(got) == len(set(got)) == 4


class TestStoragePlan:
    def setup_method(self):
        self.registry = chain_registry(4)
        # History crafted so prefix confidences descend with depth:
        # (m1)=4/4, (m1,m2)=3/4, (m1,m2,m3)=2/4, (m1..m4)=1/4.
        self.full = chain_graph(self.registry, "full", length=4)
        self.history = [
            record_for_graph(chain_graph(self.registry, "a", length=4), "r1"),
            record_for_graph(chain_graph(self.registry, "b", length=3), "r2"),
            record_for_graph(chain_graph(self.registry, "c", length=2), "r3"),
            record_for_graph(chain_graph(self.registry, "d", length=1), "r4"),
        ]
        self.rules = mine(self.history)

    def test_all_rules_below_threshold_empty_plan(self, store):
        thresholds = Thresholds(min_support=99)
        plan = storage_plan(
            self.full, self.rules, thresholds, store, registry=self.registry
        )
        assert plan.entries == ()

    def test_meeting_thresholds_planned(self, store):
        thresholds = Thresholds(min_support=2, min_confidence=Fraction(1, 2))
        plan = storage_plan(
            self.full, self.rules, thresholds, store, registry=self.registry
        )
        planned_nodes = [e.node_id for e in plan.entries]
        assert planned_nodes == ["n1", "n2", "n3"]
        by_node = {e.node_id: e for e in plan.entries}
        assert by_node["n2"].rule.support == 3
        assert by_node["n2"].rule.confidence == Fraction(3, 4)

    def test_already_stored_not_replanned(self, store):
        thresholds = Thresholds(min_support=1, min_confidence=Fraction(0))
        store_output(store, self.full, "n2", "out0", self.registry)
        plan = storage_plan(
            self.full, self.rules, thresholds, store, registry=self.registry
        )
        assert "n2" not in [e.node_id for e in plan.entries]

    def test_same_sequence_new_state_planned_uniquely(self, store):
        thresholds = Thresholds(min_support=1, min_confidence=Fraction(0))
        stored = chain_graph(self.registry, "s1", length=2)
        store_output(store, stored, "n2", "out0", self.registry)
        tuned = chain_graph(self.registry, "s2", overrides={"n2": {"b": 9}}, length=2)
        rules = mine(
            self.history + [record_for_graph(tuned, "r5")]
        )
        plan = storage_plan(tuned, rules, thresholds, store, registry=self.registry)
        fps = [e.fingerprint for e in plan.entries if e.node_id == "n2"]
        assert fps == [str(model.fingerprint(tuned, "n2", "out0", self.registry))]
        assert fps[0] != str(model.fingerprint(stored, "n2", "out0", self.registry))

    def test_threshold_sweep_descending_chain(self, store):
        previous: set | None = None
        for conf in (Fraction(1), Fraction(3, 4), Fraction(1, 2), Fraction(1, 4), Fraction(0)):
            thresholds = Thresholds(min_support=1, min_confidence=conf)
            plan = storage_plan(
                self.full, self.rules, thresholds, store, registry=self.registry
            )
            nodes = {(e.node_id, e.port) for e in plan.entries}
            if previous is not None:
                assert previous <= nodes  # lower threshold plans at least as much
            previous = nodes
        # And the top of the sweep is strictly smaller than the bottom.
        top = storage_plan(
            self.full, self.rules, Thresholds(1, Fraction(1)), store, registry=self.registry
        )
        bottom = storage_plan(
            self.full, self.rules, Thresholds(1, Fraction(0)), store, registry=self.registry
        )
        assert len(top.entries) < len(bottom.entries)

    def test_support_sweep_monotone(self, store):
        previous = None
        for support in (1, 2, 3, 4, 5):
            plan = storage_plan(
                self.full,
                self.rules,
                Thresholds(min_support=support, min_confidence=Fraction(0)),
                store,
                registry=self.registry,
            )
            nodes = {(e.node_id, e.port) for e in plan.entries}
            if previous is not None:
                assert nodes <= previous
            previous = nodes

    def test_completed_nodes_filter(self, store):
        thresholds = Thresholds(min_support=1, min_confidence=Fraction(0))
        plan = storage_plan(
            self.full, self.rules, thresholds, store,
            registry=self.registry, completed_nodes={"n1"},
        )
        assert [e.node_id for e in plan.entries] == ["n1"]
