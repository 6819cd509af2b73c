import math

import numpy as np
import pytest
import torch

from gradcheck import AC2_CONFIG, finite_difference_check, make_problem
from oracles import dense_causal_attention, gelu
from wavemoe.exceptions import ConfigError, ContractError, NumericError
from wavemoe.losses import joint_loss
from wavemoe.model import (
    TINY_CONFIG,
    DualExpert,
    ModelConfig,
    count_parameters,
    expert_apply,
    init_model,
    load_balance_loss,
    loss_and_gradients,
    meta_model,
    parameter_counts,
    select_experts,
    sparse_causal_attention,
    topk_causal_keep,
)

def rand_attention(n, d=8, heads=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    h = torch.randn(n, d, generator=g, dtype=torch.float64)
    ws = [torch.randn(d, d, generator=g, dtype=torch.float64) / math.sqrt(d) for _ in range(4)]
    return h, ws, heads


# -- config and counts --------------------------------------------------------

@pytest.mark.parametrize("bad", [
    dict(hidden_size=30, n_heads=4), dict(top_k_experts=9), dict(patch_length=6),
    dict(n_layers=0), dict(expert_activation="relu"), dict(load_balance_coeff=-1.0),
])
def test_invalid_config(bad):
    with pytest.raises(ConfigError):
        ModelConfig(**bad)


def test_base_defaults():
    c = ModelConfig()
    assert (c.n_layers, c.n_heads, c.n_experts, c.top_k_experts, c.hidden_size, c.ffn_dim,
            c.patch_length, c.top_k_attention) == (12, 12, 8, 2, 384, 1536, 8, 10)


def test_init_is_deterministic(tiny_config):
    a, b = init_model(tiny_config), init_model(tiny_config)
    for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(p, q), n
    c = init_model(ModelConfig(**{**TINY_CONFIG, "seed": 1}))
    assert not torch.equal(a.time_embed.weight, c.time_embed.weight)


def test_init_ranges(tiny_model):
    for name, p in tiny_model.named_parameters():
        assert torch.isfinite(p).all()
        if name.endswith("bias"):
            assert not p.any()
        elif p.ndim == 1:
            assert torch.equal(p, torch.ones_like(p))
        else:
            assert p.abs().max() <= 1 / math.sqrt(p.shape[1])


def test_base_counts():
    counts = parameter_counts(ModelConfig())
    assert counts["total"] == 230_100_496
    assert counts["activated"] == 102_698_512
    assert abs(counts["total"] / 226e6 - 1) <= 0.15
    assert abs(counts["activated"] / 100e6 - 1) <= 0.15
    enum = count_parameters(meta_model(ModelConfig()))
    assert enum == {"total": counts["total"], "activated": counts["activated"]}


@pytest.mark.parametrize("overrides", [
    {}, {"use_shared_expert": False}, {"expert_activation": "gelu"},
    {"hidden_size": 16, "ffn_dim": 48, "router_hidden": 8}, {"n_experts": 6, "top_k_experts": 3},
])
def test_tiny_counts_match_formula(overrides):
    config = ModelConfig(**{**TINY_CONFIG, **overrides})
    counts = parameter_counts(config)
    assert count_parameters(init_model(config)) == {"total": counts["total"], "activated": counts["activated"]}


def test_tiny_count_hand_formula():
    # d=32, P=8, E=4, k=2, SwiGLU experts of width 32, shared width 64, router 64->32->4
    d, P = 32, 8
    layer = 8 * d * d + 4 * d + (2 * d * d + d * 4) + 2 * 3 * d * 64
    expert = 2 * 3 * d * 32
    fixed = 2 * (P * d + d) + 2 * (d * P + P) + 2 * d
    c = parameter_counts(ModelConfig(**TINY_CONFIG))
    assert c["total"] == fixed + 2 * (layer + 4 * expert) == 95_888
    assert c["activated"] == fixed + 2 * (layer + 2 * expert) == 71_312


# -- attention ----------------------------------------------------------------

def test_attention_single_token():
    h, (wq, wk, wv, wo), heads = rand_attention(1)
    out, keep = sparse_causal_attention(h, wq, wk, wv, wo, heads, k=3)
    torch.testing.assert_close(out, h @ wv.T @ wo.T, atol=1e-14, rtol=0)


@pytest.mark.parametrize("n", [1, 2, 5, 9])
def test_attention_dense_when_k_covers(n):
    h, (wq, wk, wv, wo), heads = rand_attention(n, seed=n)
    out, _ = sparse_causal_attention(h, wq, wk, wv, wo, heads, k=n)
    ref = dense_causal_attention(h.numpy(), wq.numpy(), wk.numpy(), wv.numpy(), wo.numpy(), heads)
    assert np.abs(out.numpy() - ref).max() < 1e-12


def test_attention_drops_bottom_key():
    n, heads = 3, 2
    h, (wq, wk, wv, wo), _ = rand_attention(n, seed=7)
    out, keep = sparse_causal_attention(h, wq, wk, wv, wo, heads, k=2)
    d = h.shape[1]
    hd = d // heads
    q, k = (h @ wq.T).numpy(), (h @ wk.T).numpy()
    drop = [[set() for _ in range(n)] for _ in range(heads)]
    for head in range(heads):
        sl = slice(head * hd, (head + 1) * hd)
        s = q[2, sl] @ k[:3, sl].T
        drop[head][2] = {int(np.argmin(s))}
    ref = dense_causal_attention(h.numpy(), wq.numpy(), wk.numpy(), wv.numpy(), wo.numpy(), heads, drop)
    assert np.abs(out.numpy() - ref).max() < 1e-12
    assert keep[..., 2, :].sum().item() == 2 * heads


def test_attention_rows_are_sparse_distributions():
    h, (wq, wk, wv, wo), heads = rand_attention(20, seed=3)
    _, keep, w = sparse_causal_attention(h, wq, wk, wv, wo, heads, k=4, return_weights=True)
    future = torch.ones(20, 20, dtype=torch.bool).triu(1)
    assert torch.all(w[..., future] == 0)
    assert torch.all((w > 0).sum(-1) <= 4)
    assert torch.allclose(w.sum(-1), torch.ones(heads, 20, dtype=torch.float64), atol=1e-12)


def test_topk_ties_go_to_lower_index():
    keep = topk_causal_keep(torch.zeros(1, 6, 6), 2)
    expected = torch.tensor([[1, 0, 0, 0, 0, 0], [1, 1, 0, 0, 0, 0]] + [[1, 1, 0, 0, 0, 0]] * 4, dtype=torch.bool)
    assert torch.equal(keep[0], expected)
    s = torch.tensor([[[0.0, 1, 1, 1]]]).expand(1, 4, 4)
    assert torch.equal(topk_causal_keep(s, 2)[0, 3], torch.tensor([False, True, True, False]))


def test_topk_matches_sort_reference():
    g = torch.Generator().manual_seed(0)
    s = torch.randint(0, 4, (50, 12, 12), generator=g).double()  # many ties
    keep = topk_causal_keep(s, 5)
    causal = torch.ones(12, 12, dtype=torch.bool).tril()
    masked = s.masked_fill(~causal, float("-inf"))
    order = torch.sort(masked, dim=-1, descending=True, stable=True).indices[..., :5]
    ref = torch.zeros_like(keep).scatter_(-1, order, True) & causal
    assert torch.equal(keep, ref)


# -- routing and experts ------------------------------------------------------

def test_route_equal_logits():
    ids, gates = select_experts(torch.zeros(1, 4), 2)
    assert ids.tolist() == [[0, 1]] and gates.tolist() == [[0.5, 0.5]]


def test_route_closed_form():
    ids, gates = select_experts(torch.tensor([[2.0, 1.0, 0.0, -1.0]], dtype=torch.float64), 2)
    e = math.e
    assert ids.tolist() == [[0, 1]]
    assert abs(gates[0, 0].item() - e / (e + 1)) < 1e-15 and abs(gates[0, 1].item() - 1 / (e + 1)) < 1e-15


def test_gates_sum_to_one():
    g = torch.Generator().manual_seed(0)
    ids, gates = select_experts(torch.randn(1000, 8, generator=g, dtype=torch.float64), 2)
    assert torch.all(gates > 0)
    assert (gates.sum(-1) - 1).abs().max() < 1e-9
    assert torch.all(ids[:, 0] != ids[:, 1])


def test_expert_zero_weights():
    ex = DualExpert(4, 6, "gelu")
    for p in ex.parameters():
        torch.nn.init.zeros_(p)
    t, w = expert_apply(torch.randn(3, 4), torch.randn(3, 4), ex)
    assert not t.any() and not w.any()


def test_expert_branch_independence():
    ex = DualExpert(4, 6, "swiglu")
    th = torch.randn(3, 4)
    t1, _ = expert_apply(th, torch.randn(3, 4), ex)
    t2, _ = expert_apply(th, torch.randn(3, 4), ex)
    assert torch.equal(t1, t2)


def test_gelu_expert_hand_example():
    ex = DualExpert(2, 2, "gelu", dtype=torch.float64)
    with torch.no_grad():
        ex.time_branch.up.weight.copy_(torch.tensor([[1.0, 0.0], [0.5, -1.0]]))
        ex.time_branch.down.weight.copy_(torch.tensor([[1.0, 2.0], [0.0, -1.0]]))
    x = torch.tensor([[1.0, 2.0]], dtype=torch.float64)
    t, _ = expert_apply(x, torch.zeros(1, 2, dtype=torch.float64), ex)
    h1, h2 = gelu(1.0), gelu(0.5 - 2.0)
    assert abs(t[0, 0].item() - (h1 + 2 * h2)) < 1e-12
    assert abs(t[0, 1].item() + h2) < 1e-12
    # x * Phi(x) at 1 and -1.5, from normal tables
    assert abs(h1 - 0.841344746069) < 1e-11 and abs(h2 + 0.100210801903) < 1e-11


def test_balance_loss_uniform_and_collapsed():
    g = torch.Generator().manual_seed(0)
    logits = torch.randn(10_000, 4, generator=g, dtype=torch.float64)
    ids, _ = select_experts(logits, 2)
    uniform = load_balance_loss(torch.softmax(logits, -1), ids, 4).item()
    assert abs(uniform - 2.0) / 2.0 < 0.05
    skew = logits.clone()
    skew[:, 0] += 10.0
    ids, _ = select_experts(skew, 2)
    collapsed = load_balance_loss(torch.softmax(skew, -1), ids, 4).item()
    assert (ids == 0).any(-1).all()
    assert collapsed > uniform


# -- forward ------------------------------------------------------------------

def _tokens(n, P=8, batch=None, seed=0):
    g = torch.Generator().manual_seed(seed)
    shape = (n, P) if batch is None else (batch, n, P)
    return (torch.randn(*shape, generator=g, dtype=torch.float64),
            torch.randn(*shape, generator=g, dtype=torch.float64))


def test_forward_shapes(tiny_model):
    t, w = _tokens(64)
    tr = tiny_model(t, w)
    assert tr.time_predictions.shape == tr.wavelet_predictions.shape == (63, 8)
    assert len(tr.routing) == 2 and tr.routing[0].expert_ids.shape == (64, 2)


def test_forward_shape_mismatch(tiny_model):
    t, w = _tokens(8)
    with pytest.raises(ContractError):
        tiny_model(t, w[:4])
    with pytest.raises(ContractError):
        tiny_model(t[:, :4], w[:, :4])


@pytest.mark.parametrize("j0", [0, 5, 14])
def test_forward_causality(tiny_model, j0):
    t, w = _tokens(16, seed=j0)
    ref = tiny_model(t, w)
    t2, w2 = t.clone(), w.clone()
    t2[j0 + 1:] += torch.randn_like(t2[j0 + 1:])
    w2[j0 + 1:] -= 1.0
    out = tiny_model(t2, w2)
    assert (out.time_out[:j0 + 1] - ref.time_out[:j0 + 1]).abs().max() < 1e-9
    assert (out.wavelet_out[:j0 + 1] - ref.wavelet_out[:j0 + 1]).abs().max() < 1e-9


def test_expert_permutation_symmetry(tiny_config):
    model = init_model(tiny_config, dtype=torch.float64)
    perm_model = init_model(tiny_config, dtype=torch.float64)
    perm = [2, 0, 3, 1]
    with torch.no_grad():
        for blk, pblk in zip(model.blocks, perm_model.blocks):
            for new, old in enumerate(perm):
                pblk.moe.experts[new].load_state_dict(blk.moe.experts[old].state_dict())
            pblk.moe.router.out.weight.copy_(blk.moe.router.out.weight[perm])
    t, w = _tokens(24, batch=2)
    a, b = model(t, w), perm_model(t, w)
    assert (a.time_out - b.time_out).abs().max() < 1e-9
    assert (a.wavelet_out - b.wavelet_out).abs().max() < 1e-9


def test_forward_bitwise_deterministic(tiny_config):
    t, w = _tokens(32, batch=2)
    a = init_model(tiny_config)(t.float(), w.float())
    b = init_model(tiny_config)(t.float(), w.float())
    assert torch.equal(a.time_out, b.time_out) and torch.equal(a.wavelet_out, b.wavelet_out)


def test_shared_routing_same_experts_for_both_pathways(tiny_model):
    """Rows handed to each expert's time branch are the rows handed to its wavelet branch."""
    seen = {}
    moe = tiny_model.blocks[0].moe
    inputs = {}
    moe.register_forward_pre_hook(lambda m, a: inputs.update(t=a[0].reshape(-1, a[0].shape[-1]),
                                                             w=a[1].reshape(-1, a[1].shape[-1])))

    def hook(key):
        def fn(module, args):
            seen[key] = args[0]
        return fn

    for e, ex in enumerate(moe.experts):
        ex.time_branch.register_forward_pre_hook(hook(("t", e)))
        ex.wavelet_branch.register_forward_pre_hook(hook(("w", e)))
    t, w = _tokens(32, batch=3, seed=9)
    tr = tiny_model(t, w)
    ids = tr.routing[0].expert_ids.reshape(-1, 2)
    for e in range(4):
        expected = set(torch.nonzero((ids == e).any(-1)).flatten().tolist())
        if not expected:
            continue

        def rows(x, table):
            return {int(torch.nonzero((table == r).all(-1))[0]) for r in x}

        assert rows(seen[("t", e)], inputs["t"]) == expected
        assert rows(seen[("w", e)], inputs["w"]) == expected


# -- gradients ----------------------------------------------------------------

def test_finite_difference_gradients():
    model, batch = make_problem(seed=3)
    res = finite_difference_check(model, batch, n_samples=60, seed=3)
    assert max(r[4] for r in res) < 1e-4


def test_zero_wavelet_weight_zeroes_wavelet_head_grads():
    model, batch = make_problem(wavelet_loss_weight=0.0)
    _, parts, grads = loss_and_gradients(model, batch)
    assert not grads["wavelet_head.weight"].any() and not grads["wavelet_head.bias"].any()
    assert grads["time_head.weight"].abs().sum() > 0
    assert parts["wavelet"] > 0


def test_unselected_expert_has_zero_gradient():
    model, batch = make_problem(load_balance_coeff=0.0)
    with torch.no_grad():
        sel = model(batch.time_patches, batch.wavelet_patches).selections
    for s in sel:
        s["expert_ids"] = torch.zeros_like(s["expert_ids"])
        s["expert_ids"][..., 1] = 1
    _, _, grads = loss_and_gradients(model, batch, selections=sel)
    for name, g in grads.items():
        if ".experts.3." in name or ".experts.2." in name:
            assert not g.any(), name
    assert grads["blocks.0.moe.experts.0.time_branch.up.weight"].abs().sum() > 0


def test_balance_coeff_zero_contributes_nothing():
    model, batch = make_problem(load_balance_coeff=0.0)
    tr = model(batch.time_patches, batch.wavelet_patches)
    total, parts = joint_loss(tr, batch, model.config)
    assert total.item() == parts["time"] + parts["wavelet"]
    assert parts["balance"] > 0


def test_non_finite_loss_raises():
    model, batch = make_problem()
    with torch.no_grad():
        model.time_head.bias[0] = float("nan")
    with pytest.raises(NumericError):
        loss_and_gradients(model, batch)


def test_ac2_config_is_tiny():
    c = ModelConfig(**AC2_CONFIG)
    assert (c.n_layers, c.n_heads, c.n_experts, c.hidden_size, c.patch_length, c.top_k_attention) == (2, 2, 4, 16, 8, 4)
