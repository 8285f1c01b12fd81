from __future__ import annotations

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowcache.model import (
    DataRegistry,
    DatasetRef,
    Edge,
    InvalidGraphError,
    ModuleRegistry,
    ParamKindError,
    ParamSpec,
    UnknownNodeError,
    UnknownParamError,
    WorkflowFormatError,
    WorkflowGraph,
    canonical_state,
    enumerate_rule_candidates,
    fingerprint,
    structure_digest,
    validate_graph,
    workflow_from_doc,
    workflow_to_doc,
)
from helpers import (
    DS1,
    DS2,
    ab_params,
    chain_graph,
    chain_registry,
    corpus_registry,
    random_graph,
    simple_module,
)


class TestCanonicalState:
    def setup_method(self):
        self.module = simple_module("m", params=ab_params())

    def test_all_defaults(self):
        state = canonical_state(self.module, {})
        assert dict(state.params) == {"a": 1, "b": 2}

    def test_single_override_changes_digest(self):
        default = canonical_state(self.module, {})
        overridden = canonical_state(self.module, {"b": 5})
        assert dict(overridden.params) == {"a": 1, "b": 5}
        assert overridden.state_digest != default.state_digest

    def test_override_order_insensitive(self):
        s1 = canonical_state(self.module, {"a": 3, "b": 4})
        s2 = canonical_state(self.module, {"b": 4, "a": 3})
        assert s1.state_digest == s2.state_digest
        assert s1 == s2

    def test_idempotent(self):
        s1 = canonical_state(self.module, {"b": 7})
        s2 = canonical_state(self.module, dict(s1.params))
        assert s1 == s2

    def test_unknown_param(self):
        with pytest.raises(UnknownParamError):
            canonical_state(self.module, {"zzz": 1})

    @pytest.mark.parametrize("value", [True, "1", 1.5, None])
    def test_kind_mismatch_int(self, value):
        with pytest.raises(ParamKindError):
            canonical_state(self.module, {"a": value})

    def test_float_coercion_and_nan(self):
        module = simple_module("mf", params=(ParamSpec("x", "float", 0.5),))
        state = canonical_state(module, {"x": 2})
        assert state.params["x"] == 2.0
        with pytest.raises(ParamKindError):
            canonical_state(module, {"x": float("nan")})

    def test_enum_checked_against_choices(self):
        module = simple_module(
            "me", params=(ParamSpec("mode", "enum", "fast", choices=("fast", "slow")),)
        )
        assert canonical_state(module, {"mode": "slow"}).params["mode"] == "slow"
        with pytest.raises(ParamKindError):
            canonical_state(module, {"mode": "medium"})

    @given(
        a=st.integers(-1000, 1000),
        b=st.integers(-1000, 1000),
        include=st.sets(st.sampled_from(["a", "b"])),
    )
    def test_property_idempotent_order_insensitive(self, a, b, include):
        module = simple_module("m", params=ab_params())
        overrides = {k: v for k, v in (("a", a), ("b", b)) if k in include}
        state = canonical_state(module, overrides)
        again = canonical_state(module, dict(reversed(list(overrides.items()))))
        assert state == again
        assert canonical_state(module, dict(state.params)) == state


class TestValidateGraph:
    def test_minimal_valid_graph(self):
        registry = ModuleRegistry([simple_module("m1", params=ab_params())])
        graph = WorkflowGraph(
            "wf",
            {"n1": canonical_state(registry.get("m1"), {})},
            (),
            {("n1", "in0"): DS1},
            (("n1", "out0"),),
        )
        assert validate_graph(graph, registry) == []

    def test_smallest_cycle_reported_once(self):
        registry = chain_registry(2)
        nodes = {
            "A": canonical_state(registry.get("m1"), {}),
            "B": canonical_state(registry.get("m2"), {}),
        }
        graph = WorkflowGraph(
            "wf",
            nodes,
            (Edge("A", "out0", "B", "in0"), Edge("B", "out0", "A", "in0")),
        )
        cycles = [v for v in validate_graph(graph, registry) if v.kind == "cycle"]
        assert len(cycles) == 1
        assert set(cycles[0].nodes) == {"A", "B"}

    def test_five_node_chain_one_unbound_port(self):
        # Hand audit of the 5-node chain: n1.in0 has no source once the
        # dataset binding is dropped; n2..n5 are each fed by one edge.
        registry = chain_registry(5)
        graph = chain_graph(registry, length=5)
        unbound_graph = WorkflowGraph(
            graph.workflow_id, dict(graph.nodes), graph.edges, {}, graph.declared_outputs
        )
        violations = validate_graph(unbound_graph, registry)
        assert [v.kind for v in violations] == ["unbound-input"]
        assert violations[0].nodes == ("n1",)

    def test_format_mismatch(self):
        registry = ModuleRegistry(
            [
                simple_module("mtext", fmt="text", params=()),
                simple_module("mblob", fmt="blob", params=()),
            ]
        )
        nodes = {
            "n1": canonical_state(registry.get("mtext"), {}),
            "n2": canonical_state(registry.get("mblob"), {}),
        }
        graph = WorkflowGraph(
            "wf",
            nodes,
            (Edge("n1", "out0", "n2", "in0"),),
            {("n1", "in0"): DatasetRef("T", "text", "")},
        )
        kinds = {v.kind for v in validate_graph(graph, registry)}
        assert kinds == {"format-mismatch"}

    def test_dangling_edge_and_duplicate_binding(self):
        registry = chain_registry(2)
        nodes = {
            "n1": canonical_state(registry.get("m1"), {}),
            "n2": canonical_state(registry.get("m2"), {}),
        }
        graph = WorkflowGraph(
            "wf",
            nodes,
            (Edge("n1", "out0", "n2", "in0"), Edge("ghost", "out0", "n2", "in0")),
            {("n1", "in0"): DS1, ("n2", "in0"): DS2},
        )
        kinds = sorted(v.kind for v in validate_graph(graph, registry))
        assert "dangling-edge" in kinds
        assert "duplicate-binding" in kinds

    def test_matches_toposort_oracle_on_random_graphs(self):
        # Independent oracle: Kahn peeling implemented here from scratch.
        def kahn_accepts(graph):
            indeg = {n: 0 for n in graph.nodes}
            for e in graph.edges:
                if e.dst in indeg and e.src in indeg:
                    indeg[e.dst] += 1
            frontier = [n for n, d in indeg.items() if d == 0]
            seen = 0
            while frontier:
                n = frontier.pop()
                seen += 1
                for e in graph.edges:
                    if e.src == n and e.dst in indeg:
                        indeg[e.dst] -= 1
                        if indeg[e.dst] == 0:
                            frontier.append(e.dst)
            return seen == len(graph.nodes)

        registry = corpus_registry()
        rng = random.Random(7)
        for trial in range(60):
            graph = random_graph(rng, registry, max_nodes=10)
            assert validate_graph(graph, registry) == []
            assert kahn_accepts(graph)
            if len(graph.nodes) >= 2 and graph.edges:
                # Inject a back edge to the first edge's source; replace
                # one of its input sources so only the cycle is at fault.
                e0 = graph.edges[0]
                src_mod = registry.get(graph.state(e0.src).module_id)
                victim_port = src_mod.input_ports[0].name
                edges = [
                    e
                    for e in graph.edges
                    if not (e.dst == e0.src and e.dst_port == victim_port)
                ]
                bindings = {
                    k: v
                    for k, v in graph.input_bindings.items()
                    if k != (e0.src, victim_port)
                }
                edges.append(Edge(e0.dst, "out0", e0.src, victim_port))
                cyclic = WorkflowGraph(
                    "wf-cyclic", dict(graph.nodes), tuple(edges), bindings,
                    graph.declared_outputs,
                )
                has_cycle_violation = any(
                    v.kind == "cycle" for v in validate_graph(cyclic, registry)
                )
                assert has_cycle_violation == (not kahn_accepts(cyclic))


class TestFingerprint:
    def setup_method(self):
        self.registry = chain_registry(3)

    def test_deterministic(self):
        graph = chain_graph(self.registry)
        f1 = fingerprint(graph, "n1", "out0", self.registry)
        f2 = fingerprint(graph, "n1", "out0", self.registry)
        assert f1 == f2

    def test_ancestor_param_changes_digest(self):
        base = fingerprint(chain_graph(self.registry), "n3", "out0", self.registry)
        changed = fingerprint(
            chain_graph(self.registry, overrides={"n1": {"a": 9}}),
            "n3",
            "out0",
            self.registry,
        )
        assert base != changed

    def test_insertion_order_invariant(self):
        graph = chain_graph(self.registry)
        nodes_rev = dict(reversed(list(graph.nodes.items())))
        edges_rev = tuple(reversed(graph.edges))
        shuffled = WorkflowGraph(
            graph.workflow_id, nodes_rev, edges_rev,
            dict(graph.input_bindings), graph.declared_outputs,
        )
        for node in graph.nodes:
            assert fingerprint(graph, node, "out0", self.registry) == fingerprint(
                shuffled, node, "out0", self.registry
            )

    def test_randomized_insertion_orders(self):
        registry = corpus_registry()
        rng = random.Random(11)
        graph = random_graph(rng, registry, max_nodes=10)
        reference = {
            node: fingerprint(graph, node, "out0", registry) for node in graph.nodes
        }
        for _ in range(100):
            items = list(graph.nodes.items())
            edges = list(graph.edges)
            rng.shuffle(items)
            rng.shuffle(edges)
            shuffled = WorkflowGraph(
                graph.workflow_id, dict(items), tuple(edges),
                dict(graph.input_bindings), graph.declared_outputs,
            )
            for node, expected in reference.items():
                assert fingerprint(shuffled, node, "out0", registry) == expected

    def test_node_ids_do_not_matter(self):
        g1 = chain_graph(self.registry)
        renamed_nodes = {f"x{i}": g1.nodes[f"n{i}"] for i in (1, 2, 3)}
        g2 = WorkflowGraph(
            "other",
            renamed_nodes,
            (Edge("x1", "out0", "x2", "in0"), Edge("x2", "out0", "x3", "in0")),
            {("x1", "in0"): DS1},
            (("x3", "out0"),),
        )
        assert fingerprint(g1, "n3", "out0", self.registry) == fingerprint(
            g2, "x3", "out0", self.registry
        )

    def test_dataset_change_changes_digest(self):
        g1 = chain_graph(self.registry, dataset=DS1)
        g2 = chain_graph(self.registry, dataset=DS2)
        assert fingerprint(g1, "n3", "out0", self.registry) != fingerprint(
            g2, "n3", "out0", self.registry
        )

    def test_non_affecting_param_excluded(self):
        params = (ParamSpec("a", "int", 1), ParamSpec("threads", "int", 1, affects_output=False))
        registry = ModuleRegistry([simple_module("m1", params=params)])
        base = WorkflowGraph(
            "wf",
            {"n1": canonical_state(registry.get("m1"), {})},
            (),
            {("n1", "in0"): DS1},
        )
        tuned = WorkflowGraph(
            "wf",
            {"n1": canonical_state(registry.get("m1"), {"threads": 8})},
            (),
            {("n1", "in0"): DS1},
        )
        assert base.nodes["n1"].state_digest != tuned.nodes["n1"].state_digest
        assert fingerprint(base, "n1", "out0", registry) == fingerprint(
            tuned, "n1", "out0", registry
        )

    def test_unknown_node_and_port(self):
        graph = chain_graph(self.registry)
        with pytest.raises(UnknownNodeError):
            fingerprint(graph, "missing", "out0", self.registry)
        with pytest.raises(UnknownNodeError):
            fingerprint(graph, "n1", "nope", self.registry)

    def test_invalid_graph_rejected(self):
        registry = chain_registry(2)
        graph = WorkflowGraph(
            "wf",
            {
                "A": canonical_state(registry.get("m1"), {}),
                "B": canonical_state(registry.get("m2"), {}),
            },
            (Edge("A", "out0", "B", "in0"), Edge("B", "out0", "A", "in0")),
        )
        with pytest.raises(InvalidGraphError):
            fingerprint(graph, "A", "out0", registry)

    def test_sensitivity_over_random_graphs(self):
        registry = corpus_registry()
        rng = random.Random(23)
        mutated_cases = 0
        for trial in range(40):
            graph = random_graph(rng, registry, max_nodes=12)
            target = rng.choice(sorted(graph.nodes))
            from flowcache.model import upstream_closure

            closure = upstream_closure(graph, target)
            base = fingerprint(graph, target, "out0", registry)

            # Param mutation inside the closure.
            victim = rng.choice(sorted(closure))
            state = graph.state(victim)
            new_params = dict(state.params)
            new_params["a"] = new_params["a"] + 1
            nodes = dict(graph.nodes)
            nodes[victim] = canonical_state(
                registry.get(state.module_id), new_params
            )
            mutated = WorkflowGraph(
                graph.workflow_id, nodes, graph.edges,
                dict(graph.input_bindings), graph.declared_outputs,
            )
            assert fingerprint(mutated, target, "out0", registry) != base
            mutated_cases += 1

            # Dataset mutation, when the closure has a binding.
            bound = [k for k in graph.input_bindings if k[0] in closure]
            if bound:
                key = rng.choice(sorted(bound))
                bindings = dict(graph.input_bindings)
                bindings[key] = DatasetRef("D-new", "blob", "")
                mutated = WorkflowGraph(
                    graph.workflow_id, dict(graph.nodes), graph.edges,
                    bindings, graph.declared_outputs,
                )
                assert fingerprint(mutated, target, "out0", registry) != base

            # Edge mutation: replace one closure edge with a dataset binding.
            closure_edges = [
                e for e in graph.edges if e.dst in closure and e.src in closure
            ]
            if closure_edges:
                e = rng.choice(closure_edges)
                edges = tuple(x for x in graph.edges if x != e)
                bindings = dict(graph.input_bindings)
                bindings[(e.dst, e.dst_port)] = DS1
                mutated = WorkflowGraph(
                    graph.workflow_id, dict(graph.nodes), edges,
                    bindings, graph.declared_outputs,
                )
                assert fingerprint(mutated, target, "out0", registry) != base
        assert mutated_cases == 40


class TestRuleCandidates:
    def test_linear_chain(self):
        registry = chain_registry(2)
        graph = chain_graph(registry, length=2)
        cands = enumerate_rule_candidates(graph, registry)
        assert [(c.dataset_id, c.path) for c in cands] == [
            ("D1", ("n1",)),
            ("D1", ("n1", "n2")),
        ]

    def test_single_source_node(self):
        registry = chain_registry(1)
        graph = chain_graph(registry, length=1)
        cands = enumerate_rule_candidates(graph, registry)
        assert len(cands) == 1
        assert cands[0].sequence[0][0] == "m1"

    def test_diamond_matches_recursive_enumerator(self):
        registry = ModuleRegistry(
            [
                simple_module("src", params=()),
                simple_module("left", params=()),
                simple_module("right", params=()),
                simple_module("join", n_inputs=2, params=()),
            ]
        )
        nodes = {
            "n1": canonical_state(registry.get("src"), {}),
            "n2": canonical_state(registry.get("left"), {}),
            "n3": canonical_state(registry.get("right"), {}),
            "n4": canonical_state(registry.get("join"), {}),
        }
        graph = WorkflowGraph(
            "wf",
            nodes,
            (
                Edge("n1", "out0", "n2", "in0"),
                Edge("n1", "out0", "n3", "in0"),
                Edge("n2", "out0", "n4", "in0"),
                Edge("n3", "out0", "n4", "in1"),
            ),
            {("n1", "in0"): DS1},
            (("n4", "out0"),),
        )

        # Independent recursive path enumerator.
        succs: dict[str, list[str]] = {}
        for e in graph.edges:
            succs.setdefault(e.src, []).append(e.dst)

        def walk(node, path):
            path = path + (node,)
            yield path
            for nxt in succs.get(node, []):
                yield from walk(nxt, path)

        expected = {("D1", p) for p in walk("n1", ())}
        got = {(c.dataset_id, c.path) for c in enumerate_rule_candidates(graph, registry)}
        assert got == expected
        assert len(got) == 5  # (n1), (n1 n2), (n1 n3), (n1 n2 n4), (n1 n3 n4)

    def test_invalid_graph_rejected(self):
        registry = chain_registry(2)
        graph = WorkflowGraph(
            "wf",
            {
                "A": canonical_state(registry.get("m1"), {}),
                "B": canonical_state(registry.get("m2"), {}),
            },
            (Edge("A", "out0", "B", "in0"), Edge("B", "out0", "A", "in0")),
        )
        with pytest.raises(InvalidGraphError):
            enumerate_rule_candidates(graph, registry)


class TestStructureDigest:
    def test_param_change_keeps_structure(self):
        registry = chain_registry(3)
        g1 = chain_graph(registry)
        g2 = chain_graph(registry, overrides={"n2": {"b": 99}})
        assert structure_digest(g1, "n3", "out0", registry) == structure_digest(
            g2, "n3", "out0", registry
        )
        assert fingerprint(g1, "n3", "out0", registry) != fingerprint(
            g2, "n3", "out0", registry
        )

    def test_dataset_change_changes_structure(self):
        registry = chain_registry(3)
        g1 = chain_graph(registry, dataset=DS1)
        g2 = chain_graph(registry, dataset=DS2)
        assert structure_digest(g1, "n3", "out0", registry) != structure_digest(
            g2, "n3", "out0", registry
        )


class TestWorkflowDoc:
    def test_round_trip(self):
        registry = chain_registry(3)
        datasets = DataRegistry([DS1])
        graph = chain_graph(registry, overrides={"n2": {"a": 5}})
        doc = workflow_to_doc(graph)
        rebuilt = workflow_from_doc(doc, registry, datasets)
        assert workflow_to_doc(rebuilt) == doc
        assert fingerprint(rebuilt, "n3", "out0", registry) == fingerprint(
            graph, "n3", "out0", registry
        )

    def test_unknown_fields_rejected(self):
        registry = chain_registry(1)
        datasets = DataRegistry([DS1])
        doc = workflow_to_doc(chain_graph(registry, length=1))
        doc["surprise"] = 1
        with pytest.raises(WorkflowFormatError):
            workflow_from_doc(doc, registry, datasets)

    def test_unknown_nested_field_rejected(self):
        registry = chain_registry(1)
        datasets = DataRegistry([DS1])
        doc = workflow_to_doc(chain_graph(registry, length=1))
        doc["nodes"][0]["color"] = "green"
        with pytest.raises(WorkflowFormatError):
            workflow_from_doc(doc, registry, datasets)

    def test_duplicate_node_rejected(self):
        registry = chain_registry(1)
        datasets = DataRegistry([DS1])
        doc = workflow_to_doc(chain_graph(registry, length=1))
        doc["nodes"].append(dict(doc["nodes"][0]))
        with pytest.raises(WorkflowFormatError):
            workflow_from_doc(doc, registry, datasets)
