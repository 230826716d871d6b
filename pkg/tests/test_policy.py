import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from fdcheck import max_relative_error
from mmfl import nn
from mmfl.instance import GeneratorSpec, GtspInstance, generate_dataset, generate_instance, validate_tour, tour_cost
from mmfl.policy import (
    DecodingError,
    MMFLPolicy,
    PolicyConfig,
    load_policy,
    rollout_count,
    save_policy,
)

TOY = PolicyConfig(embed_dim=8, heads=2, graph_layers=1, image_layers=1, fusion_layers=1, bottleneck_tokens=3)
SMALL = PolicyConfig(embed_dim=16, heads=2, graph_layers=2, image_layers=1, fusion_layers=2, bottleneck_tokens=4)


def inst(seed, n=20, m=4, family="random"):
    return generate_instance(GeneratorSpec(n, m, family, seed))


@pytest.fixture(scope="module")
def policy():
    return MMFLPolicy(SMALL, seed=1, dtype=torch.float64)


# ----------------------------------------------------------------- config


def test_config_validation():
    with pytest.raises(nn.ConfigError, match="divisible"):
        PolicyConfig(embed_dim=10, heads=3)
    with pytest.raises(nn.ConfigError):
        PolicyConfig(graph_layers=0)
    with pytest.raises(nn.ConfigError):
        PolicyConfig(logit_clip=0)


def test_default_config_values():
    c = PolicyConfig()
    assert (c.embed_dim, c.heads, c.bottleneck_tokens, c.patch_size, c.logit_clip) == (128, 8, 10, 16, 10.0)
    assert (c.fusion_weight, c.context_weight) == (0.5, 0.3)


def test_rollout_count():
    assert rollout_count(100) == 25 and rollout_count(20) == 5 and rollout_count(3) == 1


# ---------------------------------------------------------------- encoders


def test_encoder_shapes(policy):
    x = inst(0, n=100, m=10)
    b = policy.prepare([x, inst(1, n=100, m=10)])
    enc = policy.encode(b)
    assert enc.h_graph.shape == (2, 100, 16)
    assert enc.h_image.shape == (2, 4, 16)
    assert enc.h_fused.shape == (2, 100, 16) and enc.g.shape == (2, 16)
    assert all(torch.isfinite(t).all() for t in (enc.h_graph, enc.h_image, enc.h_fused, enc.g))


def test_fused_and_context_formulas(policy):
    enc = policy.encode(policy.prepare([inst(3)]))
    img = enc.h_image_out.mean(dim=1, keepdim=True)
    assert torch.allclose(enc.h_fused, enc.h_graph_out + 0.5 * img, atol=1e-14)
    assert torch.allclose(enc.g, enc.h_graph_out.mean(dim=1) + 0.3 * img[:, 0], atol=1e-14)


def test_single_patch_image(policy):
    b = policy.prepare([inst(2, n=20)])
    assert b.patches.shape == (1, 1, 256)
    assert policy.encode(b).h_image.shape == (1, 1, 16)


def test_graph_encoder_is_permutation_equivariant(policy):
    x = inst(4, n=12, m=3)
    perm = np.r_[0, np.random.default_rng(0).permutation(np.arange(1, 12))]
    y = GtspInstance(x.coords[perm], x.cluster_of[perm], x.m)
    hx = policy.encode_graph(policy.prepare([x]))[0]
    hy = policy.encode_graph(policy.prepare([y]))[0]
    assert torch.allclose(hx[perm], hy, atol=1e-12)


def test_identical_nodes_get_identical_embeddings(policy):
    x = GtspInstance([(0.1, 0.1), (0.5, 0.5), (0.5, 0.5), (0.9, 0.2)], [0, 1, 1, 2], 3)
    h = policy.encode_graph(policy.prepare([x]))[0]
    assert torch.equal(h[1], h[2])


def test_zero_patches_differ_by_position(policy):
    zeros = torch.zeros(1, 4, 256, dtype=torch.float64)
    coords = torch.tensor([[0, 0], [0.5, 0], [0, 0.5], [0.5, 0.5]], dtype=torch.float64)
    z = policy.encode_image(zeros, coords)[0]
    for i in range(4):
        for j in range(i + 1, 4):
            assert not torch.allclose(z[i], z[j])


def test_fusion_attention_sees_bottleneck_rows(policy, monkeypatch):
    seen = []
    real = nn.multi_head_attention

    def spy(q, k, v, *args, **kw):
        seen.append((q.shape[1], k.shape[1]))
        return real(q, k, v, *args, **kw)

    b = policy.prepare([inst(0, n=100, m=10)])
    h_graph = policy.encode_graph(b)
    h_image = policy.encode_image(b.patches, b.patch_coords)
    monkeypatch.setattr(nn, "multi_head_attention", spy)
    policy.fuse(h_graph, h_image)
    # per layer: graph side queries n+n_b rows against N+n_b, then the reverse
    assert seen == [(104, 8), (8, 104)] * SMALL.fusion_layers


def test_disable_fusion_is_identity_bypass():
    p = MMFLPolicy(PolicyConfig(**{**SMALL.to_dict(), "disable_fusion": True}), seed=1)
    enc = p.encode(p.prepare([inst(5)]))
    assert torch.equal(enc.h_fused, enc.h_graph)
    assert torch.equal(enc.g, enc.h_graph.mean(dim=-2))


def test_disable_image_ignores_image():
    p = MMFLPolicy(PolicyConfig(**{**SMALL.to_dict(), "disable_image": True}), seed=1)
    x = inst(6, n=100, m=10)
    b = p.prepare([x])
    assert b.patches is None
    base = p.encode(b)
    assert base.h_image_out is None
    # even a batch that carries image patches (real or zeroed) gives the same output
    for fill in (1.0, 0.0):
        b.patches = torch.full((1, 4, 256), fill, dtype=torch.float64)
        b.patch_coords = torch.tensor([[0, 0], [0.5, 0], [0, 0.5], [0.5, 0.5]], dtype=torch.float64)
        enc = p.encode(b)
        assert torch.equal(enc.h_fused, base.h_fused) and torch.equal(enc.g, base.g)


# ----------------------------------------------------------------- decoder


def test_rollouts_start_at_depot_with_distinct_second_nodes(policy):
    x = inst(7, n=40, m=8)
    res = policy.rollout(x, 10, "greedy")
    assert all(r.tour.nodes[0] == 0 for r in res)
    seconds = [r.tour.nodes[1] for r in res]
    assert len(set(seconds)) == 10
    d = x.distances[0].copy()
    d[x.cluster_of == x.cluster_of[0]] = np.inf
    assert seconds == list(np.argsort(d, kind="stable")[:10])


def test_rollout_rewards_match_costs(policy):
    x = inst(8, n=30, m=6)
    for r in policy.rollout(x, 7, "greedy"):
        assert validate_tour(x, r.tour.nodes).ok
        assert abs(r.reward + tour_cost(x, r.tour.nodes)) <= 1e-9


def test_greedy_is_deterministic(policy):
    x = inst(9)
    assert [r.tour for r in policy.rollout(x, 5)] == [r.tour for r in policy.rollout(x, 5)]


def test_greedy_solve_is_min_over_rollouts(policy):
    x = inst(10, n=40, m=8)
    res = policy.rollout(x, rollout_count(40))
    assert policy.greedy_solve(x).cost == min(r.tour.cost for r in res)


def test_greedy_solve_many_matches_single(policy):
    data = generate_dataset(GeneratorSpec(20, 4, "scale", 3), 3) + [inst(11, n=30, m=5)]
    many = policy.greedy_solve_many(data)
    for x, t in zip(data, many):
        assert t == policy.greedy_solve(x)


def test_k_is_clamped_with_warning(policy, caplog):
    x = GtspInstance([(0, 0), (0.1, 0), (1, 0), (1, 1)], [0, 0, 1, 2], 3)
    res = policy.rollout(x, 5)
    assert len(res) == 2
    assert "clamped" in caplog.text


def test_sampling_uses_generator(policy):
    x = inst(12, n=40, m=10)
    g1, g2 = torch.Generator().manual_seed(3), torch.Generator().manual_seed(3)
    a = policy.rollout(x, 4, "sample", g1)
    b = policy.rollout(x, 4, "sample", g2)
    assert [r.tour for r in a] == [r.tour for r in b]
    for r in a:
        assert validate_tour(x, r.tour.nodes).ok


def test_step_invariants(policy):
    x = inst(13, n=30, m=6)
    r = policy.rollout_batch([x], 5, "sample", torch.Generator().manual_seed(0), record=True)
    assert len(r.trace) == x.m - 1
    for step in r.trace:
        p = step.probs
        assert torch.all(p[~step.eligible] == 0)
        assert torch.allclose(p.sum(-1), torch.ones(1, 5, dtype=p.dtype), atol=1e-6)
        live = step.logits[step.eligible]
        assert live.abs().max() <= 10


def test_equal_logits_give_uniform_probabilities():
    p = MMFLPolicy(TOY, seed=0)
    for t in p.store.params.values():
        t.data.zero_()
    x = inst(14, n=12, m=4)
    r = p.rollout_batch([x], 1, "greedy", record=True)
    first = r.trace[0]
    e = int(first.eligible.sum())
    assert torch.all(first.probs[first.eligible] == 1.0 / e)


def test_greedy_ties_go_to_lowest_index():
    p = MMFLPolicy(TOY, seed=0)
    for t in p.store.params.values():
        t.data.zero_()
    x = GtspInstance([(0, 0), (0.9, 0.9), (0.2, 0), (0.5, 0.5), (0.6, 0.1)], [0, 1, 2, 1, 2], 3)
    (res,) = p.rollout(x, 1)
    # step 1 is forced to the nearest eligible node (2); step 2 sees equal logits over cluster 1
    assert res.tour.nodes == (0, 2, 1)


def test_log_prob_matches_fresh_forward_pass(policy):
    x = inst(15, n=24, m=6)
    with torch.no_grad():
        r = policy.rollout_batch([x], 6, "sample", torch.Generator().manual_seed(1))
        again = policy.rollout_batch([x], 6, actions=r.tours)
    assert torch.equal(again.tours, r.tours)
    assert torch.allclose(again.step_log_probs.exp(), r.step_log_probs.exp(), atol=1e-6)
    assert torch.all(r.step_log_probs[:, :, 0] == 0)


def test_teacher_forcing_rejects_bad_actions(policy):
    x = inst(16, n=12, m=3)
    bad = torch.tensor([[[0, 1, 1]]])
    with pytest.raises(DecodingError):
        policy.rollout_batch([x], 1, actions=bad)


def test_batch_shape_mismatch_rejected(policy):
    with pytest.raises(ValueError, match="group_by_shape"):
        policy.prepare([inst(0, n=20), inst(0, n=21)])


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32), family=st.sampled_from(["random", "proximity", "density", "hybrid", "mixed", "small"]))
def test_untrained_policy_is_always_feasible(seed, family):
    p = MMFLPolicy(TOY, seed=seed % 1000)
    spec = GeneratorSpec(80, None if family in ("mixed", "small") else 8, family, seed)
    x = generate_instance(spec)
    for r in p.rollout(x, 4, "sample", torch.Generator().manual_seed(seed % 1000)):
        assert validate_tour(x, r.tour.nodes).ok


# ------------------------------------------------------------- gradients


def test_policy_loss_gradient_matches_finite_differences():
    p = MMFLPolicy(TOY, seed=3, dtype=torch.float64)
    # zero biases put the single patch (coords 0, 0) exactly on a ReLU kink,
    # where central differences are meaningless; move them off it
    g = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for name, t in p.store.items():
            if name.endswith(".bias"):
                t.copy_(0.1 * torch.randn(t.shape, generator=g, dtype=torch.float64))
    x = inst(17, n=8, m=4)
    with torch.no_grad():
        r = p.rollout_batch([x], 2, "sample", torch.Generator().manual_seed(0))
    actions = r.tours

    def loss():
        return -p.rollout_batch([x], 2, actions=actions).log_prob.sum()

    assert max_relative_error(loss, list(p.store.params.values())) < 1e-4


# ------------------------------------------------------------ checkpoint


def test_policy_checkpoint_round_trip(tmp_path):
    p = MMFLPolicy(SMALL, seed=5, dtype=torch.float32)
    save_policy(tmp_path / "p.ckpt", p, 4, {"note": 1})
    q, header = load_policy(tmp_path / "p.ckpt")
    assert q.config == SMALL and header["epoch"] == 4 and q.dtype == torch.float32
    x = inst(18)
    assert p.greedy_solve(x) == q.greedy_solve(x)


def test_float32_and_float64_init_agree():
    a = MMFLPolicy(SMALL, seed=2, dtype=torch.float32)
    b = MMFLPolicy(SMALL, seed=2, dtype=torch.float64)
    for k in a.store.params:
        assert torch.equal(a.store[k], b.store[k].float())
    assert math.isfinite(a.greedy_solve(inst(19)).cost)
