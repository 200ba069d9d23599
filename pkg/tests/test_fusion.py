import numpy as np
import pytest

from oracles import rel_err

from bnfuse import execute, fusion, graph as G
from bnfuse.fusion import FusionLevel
from bnfuse.ops import BNParams, ConvParams
from bnfuse.tensor import Rng

LEVELS = list(FusionLevel)


def signature(g: G.Graph):
    """Structural fingerprint: kinds plus the shapes flowing through edges."""
    return [
        (n.kind, tuple(g.slots[s].shape for s in n.inputs), tuple(g.slots[s].shape for s in n.outputs))
        for n in g.nodes
    ]


def exec_pair(g, seed=11):
    rng = Rng(seed)
    x = rng.uniform(g.slots[g.inputs[0]].shape, -1.0, 1.0)
    acts = execute.forward(g, x)
    loss = {s: rng.normal(g.slots[s].shape) for s in g.outputs}
    grads = execute.backward(g, acts, loss)
    return x, acts, loss, grads


def bn_relu_conv_graph(c=3, with_leading_conv=True):
    return G.build_toy_chain(G.single_bn_toy(batch=2), seed=1)


class TestFission:
    def test_one_bn_becomes_two_subnodes(self):
        g = bn_relu_conv_graph()
        g2 = fusion.apply_fission(g)
        assert len(g2.nodes_of_kind(G.BN)) == 0
        assert len(g2.nodes_of_kind(G.SUBBN1)) == 1
        assert len(g2.nodes_of_kind(G.SUBBN2)) == 1
        _, acts, loss, grads = exec_pair(g)
        _, acts2, _, grads2 = exec_pair(g2)
        for s in g.outputs:
            assert rel_err(acts.get(s), acts2.get(s)) < 1e-5
        for k in grads.params:
            assert rel_err(grads.params[k], grads2.params[k], floor=1e-5) < 1e-3

    def test_bn_free_graph_unchanged(self):
        g = G.Graph()
        x = g.new_slot((1, 2, 4, 4), name="x")
        g.inputs = [x]
        p = ConvParams(in_c=2, out_c=2, kh=1, kw=1,
                       weights=np.eye(2, dtype=np.float32).reshape(2, 2, 1, 1), name="c")
        g.register_conv(p)
        y = g.new_slot((1, 2, 4, 4))
        g.add_node(G.CONV, G.ConvAttrs(conv=p), [x], [y], name="c")
        g.outputs = [y]
        g2 = fusion.apply_fission(g)
        assert signature(g2) == signature(g)

    def test_densenet_micro_doubles_bn_nodes(self):
        g = G.build_densenet(G.densenet_micro(batch=2))
        n_bn = len(g.nodes_of_kind(G.BN))
        g2 = fusion.apply_fission(g)
        assert len(g2.nodes_of_kind(G.SUBBN1)) == n_bn
        assert len(g2.nodes_of_kind(G.SUBBN2)) == n_bn
        _, acts, loss, grads = exec_pair(g)
        _, acts2, _, _ = exec_pair(g2)
        for s in g.outputs:
            assert rel_err(acts.get(s), acts2.get(s)) < 1e-5


class TestRCF:
    def test_chain_fuses_to_clip_on_read(self):
        g = bn_relu_conv_graph()
        g2 = fusion.apply_rcf(g)
        assert len(g2.nodes_of_kind(G.RELU)) == 0
        fused_convs = [n for n in g2.nodes_of_kind(G.CONV) if n.attrs.clip_input]
        assert len(fused_convs) == 1
        _, acts, _, _ = exec_pair(g)
        _, acts2, _, _ = exec_pair(g2)
        for s in g.outputs:
            assert rel_err(acts.get(s), acts2.get(s)) < 1e-6

    def test_fanout_relu_not_fused(self):
        # relu output feeds a conv and a pool: must stay standalone
        g = G.Graph()
        x = g.new_slot((1, 2, 4, 4), name="x")
        g.inputs = [x]
        r = g.new_slot((1, 2, 4, 4))
        g.add_node(G.RELU, None, [x], [r], name="relu")
        b1 = g.new_slot((1, 2, 4, 4))
        b2 = g.new_slot((1, 2, 4, 4))
        g.add_node(G.SPLIT, G.SplitAttrs(2), [r], [b1, b2], name="split")
        p = ConvParams(in_c=2, out_c=2, kh=1, kw=1, name="c")
        g.register_conv(p)
        y1 = g.new_slot((1, 2, 4, 4))
        g.add_node(G.CONV, G.ConvAttrs(conv=p), [b1], [y1], name="c")
        y2 = g.new_slot((1, 2, 2, 2))
        g.add_node(G.POOL, G.PoolAttrs(k=2), [b2], [y2], name="pool")
        g.outputs = [y1, y2]
        g2 = fusion.apply_rcf(g)
        assert len(g2.nodes_of_kind(G.RELU)) == 1

    def test_conv_then_relu_not_fused(self):
        # wrong order: conv before relu is not the RCF pattern
        g = G.Graph()
        x = g.new_slot((1, 2, 4, 4), name="x")
        g.inputs = [x]
        p = ConvParams(in_c=2, out_c=2, kh=1, kw=1, name="c")
        g.register_conv(p)
        t = g.new_slot((1, 2, 4, 4))
        g.add_node(G.CONV, G.ConvAttrs(conv=p), [x], [t], name="c")
        y = g.new_slot((1, 2, 4, 4))
        g.add_node(G.RELU, None, [t], [y], name="relu")
        g.outputs = [y]
        g2 = fusion.apply_rcf(g)
        assert len(g2.nodes_of_kind(G.RELU)) == 1
        assert not any(n.attrs.clip_input for n in g2.nodes_of_kind(G.CONV))


class TestMVF:
    def test_flags_onepass(self):
        g = bn_relu_conv_graph()
        g2 = fusion.apply_mvf(g)
        assert all(n.attrs.onepass for n in g2.nodes_of_kind(G.BN))
        _, acts, _, _ = exec_pair(g)
        _, acts2, _, _ = exec_pair(g2)
        for s in g.outputs:
            assert rel_err(acts.get(s), acts2.get(s)) < 1e-5


class TestBNFF:
    def test_chain_becomes_two_fused_nodes(self):
        g = bn_relu_conv_graph()
        g2, plan = fusion.plan(g, FusionLevel.BNFF)
        kinds = [n.kind for n in g2.nodes]
        assert kinds == [G.FUSED_CONV_STATS, G.FUSED_NRC]
        assert plan.unfused_bn_ids == []
        _, acts, loss, grads = exec_pair(g)
        _, acts2, _, grads2 = exec_pair(g2)
        for s in g.outputs:
            assert rel_err(acts.get(s), acts2.get(s), floor=1e-4) < 1e-4
        for k in grads.params:
            assert rel_err(grads.params[k], grads2.params[k], floor=1e-4) < 1e-3

    def test_densenet_micro_boundary_vs_internal(self):
        # internal BNs (after the 1x1 conv) fully fuse; CPL-entry and
        # transition BNs keep a standalone statistics node under plain BNFF
        g = G.build_densenet(G.densenet_micro(batch=2))
        g2, plan = fusion.plan(g, FusionLevel.BNFF)
        n_blocks, n_cpl = 2, 3
        n_entry = n_blocks * n_cpl
        n_trans = n_blocks - 1
        assert len(plan.unfused_bn_ids) == n_entry + n_trans
        assert len(g2.nodes_of_kind(G.SUBBN1)) == n_entry + n_trans
        assert len(g2.nodes_of_kind(G.SUBBN2)) == 0

    def test_two_cpl_plan_counts(self):
        # 2 CPLs in one block: exactly 2 fully-fused BNs, 2 boundary BNs
        spec = G.ModelSpec(family="densenet", blocks=(2,), growth_rate=4,
                           input_dims=(2, 8, 6, 6))
        g = G.build_densenet(spec)
        g2, plan = fusion.plan(g, FusionLevel.BNFF)
        n_bn = len(g.nodes_of_kind(G.BN))
        assert n_bn == 4
        assert len(plan.unfused_bn_ids) == 2
        fully = [b for b in plan.bn_map if b not in plan.unfused_bn_ids]
        assert len(fully) == 2

    def test_gradients_match_baseline(self):
        g = G.build_densenet(G.densenet_micro(batch=2))
        _, _, loss, grads = exec_pair(g)
        g2, _ = fusion.plan(g, FusionLevel.BNFF)
        _, _, _, grads2 = exec_pair(g2)
        for k in grads.params:
            assert rel_err(grads.params[k], grads2.params[k], floor=1e-4) < 1e-3, k


class TestICF:
    def test_densenet_micro_no_standalone_subbn(self):
        g = G.build_densenet(G.densenet_micro(batch=2))
        g2, plan = fusion.plan(g, FusionLevel.BNFF_ICF)
        assert len(g2.nodes_of_kind(G.SUBBN1)) == 0
        assert len(g2.nodes_of_kind(G.SUBBN2)) == 0
        assert plan.unfused_bn_ids == []
        assert len(g2.nodes_of_kind(G.FUSED_CONCAT_STATS)) > 0

    def test_equivalence_at_icf(self):
        g = G.build_densenet(G.densenet_micro(batch=2))
        _, acts, loss, grads = exec_pair(g)
        g2, _ = fusion.plan(g, FusionLevel.BNFF_ICF)
        _, acts2, _, grads2 = exec_pair(g2)
        for s in g.outputs:
            assert rel_err(acts.get(s), acts2.get(s), floor=1e-4) < 1e-4
        for k in grads.params:
            assert rel_err(grads.params[k], grads2.params[k], floor=1e-4) < 1e-3

    def test_resnet_ews_entries_stay_standalone(self):
        # no concat ahead of the entry BNs: forward statistics stay put,
        # backward dx folds into the split gradient sum (defer flag)
        g = G.build_resnet(G.resnet_micro(batch=2))
        bnff, _ = fusion.plan(g, FusionLevel.BNFF)
        icf, plan = fusion.plan(g, FusionLevel.BNFF_ICF)
        assert len(icf.nodes_of_kind(G.FUSED_CONCAT_STATS)) == 0
        ews_fed = [n for n in icf.nodes_of_kind(G.SUBBN1)]
        assert len(ews_fed) >= 1
        assert all(n.attrs.defer_backward for n in ews_fed)
        assert plan.count("split-grad-fuse") == len(ews_fed)

    def test_resnet_icf_equivalence(self):
        g = G.build_resnet(G.resnet_micro(batch=2))
        _, acts, loss, grads = exec_pair(g)
        g2, _ = fusion.plan(g, FusionLevel.BNFF_ICF)
        _, acts2, _, grads2 = exec_pair(g2)
        for s in g.outputs:
            assert rel_err(acts.get(s), acts2.get(s), floor=1e-4) < 1e-4
        for k in grads.params:
            assert rel_err(grads.params[k], grads2.params[k], floor=1e-4) < 1e-3


class TestPlan:
    def test_baseline_identity(self):
        g = G.build_densenet(G.densenet_micro(batch=2))
        g2, plan = fusion.plan(g, FusionLevel.BASELINE)
        assert plan.rewrites == []
        assert signature(g2) == signature(g)

    def test_icf_describe_reports_no_unfused(self):
        g = G.build_densenet(G.densenet_micro(batch=2))
        _, plan = fusion.plan(g, FusionLevel.BNFF_ICF)
        assert "unfused BNs: none" in plan.describe()

    @pytest.mark.parametrize("level", LEVELS)
    def test_idempotent(self, level):
        g = G.build_densenet(G.densenet_micro(batch=2))
        g1, _ = fusion.plan(g, level)
        g2, _ = fusion.plan(g1, level)
        assert signature(g2) == signature(g1)

    @pytest.mark.parametrize("family", ["densenet", "resnet"])
    def test_io_signature_preserved(self, family):
        spec = G.densenet_micro(batch=2) if family == "densenet" else G.resnet_micro(batch=2)
        g = G.build_model(spec)
        for level in LEVELS:
            g2, _ = fusion.plan(g, level)
            assert g2.inputs == g.inputs
            assert g2.outputs == g.outputs
            for s in g.inputs + g.outputs:
                assert g2.slots[s].shape == g.slots[s].shape

    @pytest.mark.parametrize("family", ["densenet", "resnet"])
    def test_node_count_monotone_nonincreasing(self, family):
        spec = G.densenet_micro(batch=2) if family == "densenet" else G.resnet_micro(batch=2)
        g = G.build_model(spec)
        counts = []
        for level in LEVELS:
            g2, _ = fusion.plan(g, level)
            sweeping = [n for n in g2.nodes if n.kind not in (G.SPLIT, G.CONCAT, G.FUSED_CONCAT_STATS)
                        or (n.kind == G.CONCAT and n.attrs.physical)]
            counts.append(len(sweeping))
        assert counts == sorted(counts, reverse=True)

    def test_params_shared_by_reference(self):
        g = G.build_densenet(G.densenet_micro(batch=2))
        g2, _ = fusion.plan(g, FusionLevel.BNFF)
        for name in g.params:
            assert g2.params[name] is g.params[name]

    def test_worker_count_does_not_change_results(self):
        g = G.build_densenet(G.densenet_micro(batch=4))
        g2, _ = fusion.plan(g, FusionLevel.BNFF_ICF)
        rng = Rng(2)
        x = rng.uniform(g.slots[g.inputs[0]].shape, -1.0, 1.0)
        loss = {s: rng.normal(g.slots[s].shape) for s in g.outputs}
        ref_acts = execute.forward(g2, x, ctx=execute.ExecCtx(workers=1))
        ref_grads = execute.backward(g2, ref_acts, loss, ctx=execute.ExecCtx(workers=1))
        acts = execute.forward(g2, x, ctx=execute.ExecCtx(workers=3))
        grads = execute.backward(g2, acts, loss, ctx=execute.ExecCtx(workers=3))
        for s in g.outputs:
            assert np.array_equal(ref_acts.get(s), acts.get(s))
        for k in ref_grads.params:
            assert np.array_equal(ref_grads.params[k], grads.params[k])


class TestEquivalenceSweep:
    """Semantics preservation across seeds (the fused == unfused property)."""

    @pytest.mark.parametrize("seed", range(4))
    def test_all_levels_match_baseline(self, seed):
        spec = G.ModelSpec(family="densenet", blocks=(2,), growth_rate=4,
                           input_dims=(2, 8, 8, 8))
        g = G.build_densenet(spec, seed=seed)
        x, acts, loss, grads = exec_pair(g, seed=100 + seed)
        for level in LEVELS[1:]:
            g2, _ = fusion.plan(g, level)
            acts2 = execute.forward(g2, x)
            grads2 = execute.backward(g2, acts2, loss)
            for s in g.outputs:
                assert rel_err(acts.get(s), acts2.get(s), floor=1e-4) < 1e-4
            for k in grads.params:
                assert rel_err(grads.params[k], grads2.params[k], floor=1e-4) < 1e-3
