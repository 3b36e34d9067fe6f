"""Adapter variants: initialization, forwards against algebraic oracles,
merge semantics, parameter accounting, and checkpoint round-trips."""

import json
import math

import numpy as np
import numpy.testing as npt
import pytest

from adapterforge import adapters as adp
from adapterforge import autodiff as ad
from adapterforge.autodiff import Tensor
from adapterforge.errors import (
    ConfigError,
    NotMergeableError,
    StateError,
    VariantError,
)

RNG = np.random.default_rng(20260809)


def spec_for(variant, rank=3, heads=3, alpha=12.0, dropout=0.0, seed=5):
    return adp.AdapterSpec(
        variant=variant,
        rank=rank,
        num_heads=1 if variant == adp.VANILLA else heads,
        alpha=alpha,
        dropout_p=dropout,
        top_k=2 if variant == adp.MULTI_ADAPTER else None,
        seed=seed,
    )


def random_state(variant, m=6, n=5, rank=3, heads=3, alpha=12.0, dropout=0.0, seed=5):
    state = adp.init_adapter(spec_for(variant, rank, heads, alpha, dropout, seed), m, n,
                             base_weight=RNG.normal(size=(m, n)))
    for tensor in state.A + state.B:
        tensor.data[:] = RNG.normal(size=tensor.shape)
    if state.router is not None:
        state.router.data[:] = RNG.normal(size=state.router.shape) * 0.3
    return state


# ---------------------------------------------------------------------------
# spec validation


def test_spec_rejects_bad_values():
    with pytest.raises(ConfigError):
        adp.AdapterSpec(variant="mystery", rank=2)
    with pytest.raises(ConfigError):
        adp.AdapterSpec(variant=adp.VANILLA, rank=0)
    with pytest.raises(ConfigError):
        adp.AdapterSpec(variant=adp.VANILLA, rank=2, num_heads=3)
    with pytest.raises(ConfigError):
        adp.AdapterSpec(variant=adp.MULTI_ADAPTER, rank=2, num_heads=2)  # missing top_k
    with pytest.raises(ConfigError):
        adp.AdapterSpec(variant=adp.MULTI_ADAPTER, rank=2, num_heads=2, top_k=3)
    with pytest.raises(ConfigError):
        adp.AdapterSpec(variant=adp.VANILLA, rank=2, dropout_p=1.0)
    with pytest.raises(ConfigError):
        adp.AdapterSpec(variant=adp.VANILLA, rank=2, top_k=1)
    with pytest.raises(ConfigError):
        # dropout is only defined for the randomized and sum variants
        adp.AdapterSpec(variant=adp.MULTI_HEAD_ROUTED, rank=2, num_heads=2, dropout_p=0.2)


def test_init_rejects_rank_beyond_layer():
    with pytest.raises(ConfigError, match="rank"):
        adp.init_adapter(spec_for(adp.VANILLA, rank=9), m=8, n=16)


# ---------------------------------------------------------------------------
# initialization


def test_init_vanilla_forward_equals_frozen_at_start():
    w = RNG.normal(size=(6, 5))
    state = adp.init_adapter(spec_for(adp.VANILLA), 6, 5, base_weight=w)
    x = RNG.normal(size=(5, 4))
    out = adp.vanilla_forward(state, Tensor(x))
    npt.assert_array_equal(out.data, w @ x)


def test_init_deterministic_per_seed():
    a = adp.init_adapter(spec_for(adp.MULTI_HEAD_RANDOMIZED), 6, 5)
    b = adp.init_adapter(spec_for(adp.MULTI_HEAD_RANDOMIZED), 6, 5)
    for ta, tb in zip(a.A + a.B, b.A + b.B):
        npt.assert_array_equal(ta.data, tb.data)
    c = adp.init_adapter(spec_for(adp.MULTI_HEAD_RANDOMIZED, seed=6), 6, 5)
    assert not np.array_equal(a.B[0].data, c.B[0].data)


def test_init_randomized_heads_pairwise_distinct():
    state = adp.init_adapter(spec_for(adp.MULTI_HEAD_RANDOMIZED), 6, 5)
    flat = [b.data.reshape(-1) for b in state.B]
    for i in range(3):
        for j in range(i + 1, 3):
            assert not np.array_equal(flat[i], flat[j])


def test_init_head_and_router_zeroing_per_variant():
    for variant in (adp.VANILLA, adp.MULTI_ADAPTER, adp.MULTI_HEAD_ROUTED):
        state = adp.init_adapter(spec_for(variant), 6, 5)
        for b in state.B:
            npt.assert_array_equal(b.data, 0.0)
    for variant in (adp.MULTI_HEAD_RANDOMIZED, adp.MULTI_HEAD_SUM):
        state = adp.init_adapter(spec_for(variant), 6, 5)
        for b in state.B:
            assert np.abs(b.data).max() > 0
            assert np.abs(b.data).std() < 0.1  # N(0, 1e-4) scale
    routed = adp.init_adapter(spec_for(adp.MULTI_HEAD_ROUTED), 6, 5)
    npt.assert_array_equal(routed.router.data, 0.0)


def test_init_trainability_flags():
    state = adp.init_adapter(spec_for(adp.MULTI_HEAD_ROUTED), 6, 5,
                             base_weight=RNG.normal(size=(6, 5)))
    assert not state.W.requires_grad
    assert all(p.requires_grad for p in state.trainable())
    assert state.router is not None and state.router.requires_grad


def test_router_presence_per_variant():
    for variant in adp.VARIANTS:
        state = adp.init_adapter(spec_for(variant), 6, 5)
        if variant in adp.ROUTED_VARIANTS:
            assert state.router is not None
        else:
            assert state.router is None


def test_multiadapter_stores_one_down_projection_per_expert():
    state = adp.init_adapter(spec_for(adp.MULTI_ADAPTER), 6, 5)
    assert len(state.A) == 3
    shared = adp.init_adapter(spec_for(adp.MULTI_HEAD_SUM), 6, 5)
    assert len(shared.A) == 1


# ---------------------------------------------------------------------------
# vanilla forward


def test_vanilla_forward_matches_merged_algebra():
    state = random_state(adp.VANILLA)
    x = RNG.normal(size=(5, 7))
    out = adp.vanilla_forward(state, Tensor(x))
    expected = (state.W.data + (state.spec.alpha / state.spec.rank)
                * state.B[0].data @ state.A[0].data) @ x
    npt.assert_allclose(out.data, expected, atol=1e-10)


def test_vanilla_identity_composition():
    # W = 0, A embeds the first r coordinates, B lifts them back, alpha = r
    r, n, m = 3, 5, 5
    state = adp.init_adapter(adp.AdapterSpec(variant=adp.VANILLA, rank=r, alpha=float(r)), m, n)
    state.A[0].data[:] = np.eye(r, n)
    state.B[0].data[:] = np.eye(m, r)
    x = RNG.normal(size=(n, 4))
    out = adp.vanilla_forward(state, Tensor(x))
    expected = np.zeros((m, 4))
    expected[:r] = x[:r]
    npt.assert_allclose(out.data, expected, atol=1e-12)


def test_vanilla_forward_variant_check():
    state = random_state(adp.MULTI_HEAD_SUM)
    with pytest.raises(VariantError):
        adp.vanilla_forward(state, Tensor(RNG.normal(size=(5, 2))))


# ---------------------------------------------------------------------------
# routed forwards


def test_routed_uniform_router_equal_heads_reduces_to_vanilla():
    state = random_state(adp.MULTI_HEAD_ROUTED)
    state.router.data[:] = 0.0
    for b in state.B[1:]:
        b.data[:] = state.B[0].data
    vanilla = adp.init_adapter(spec_for(adp.VANILLA), 6, 5, base_weight=state.W.data)
    vanilla.A[0].data[:] = state.A[0].data
    vanilla.B[0].data[:] = state.B[0].data
    x = Tensor(RNG.normal(size=(5, 9)))
    npt.assert_allclose(adp.multihead_routed_forward(state, x, mode="eval").data,
                        adp.vanilla_forward(vanilla, x).data, atol=1e-12)


def test_routed_single_head_bit_equals_vanilla():
    state = adp.init_adapter(adp.AdapterSpec(variant=adp.MULTI_HEAD_ROUTED, rank=3,
                                             num_heads=1, alpha=12.0, seed=5), 6, 5,
                             base_weight=RNG.normal(size=(6, 5)))
    state.A[0].data[:] = RNG.normal(size=(3, 5))
    state.B[0].data[:] = RNG.normal(size=(6, 3))
    state.router.data[:] = RNG.normal(size=(1, 5))
    vanilla = adp.init_adapter(spec_for(adp.VANILLA), 6, 5, base_weight=state.W.data)
    vanilla.A[0].data[:] = state.A[0].data
    vanilla.B[0].data[:] = state.B[0].data
    x = Tensor(RNG.normal(size=(5, 9)))
    routed = adp.multihead_routed_forward(state, x, mode="eval").data
    plain = adp.vanilla_forward(vanilla, x).data
    npt.assert_array_equal(routed, plain)


def test_routed_hand_weighted_mixture():
    # router logits (ln 2, 0) -> weights (2/3, 1/3); B1 = 2 B2 gives delta
    # (alpha/r) * (5/3) * B2 A x
    m, n, r = 4, 5, 2
    state = adp.init_adapter(adp.AdapterSpec(variant=adp.MULTI_HEAD_ROUTED, rank=r,
                                             num_heads=2, alpha=6.0, seed=3), m, n)
    b2 = RNG.normal(size=(m, r))
    state.B[0].data[:] = 2.0 * b2
    state.B[1].data[:] = b2
    state.A[0].data[:] = RNG.normal(size=(r, n))
    x = np.zeros((n, 1))
    x[0, 0] = 1.0
    state.router.data[:] = 0.0
    state.router.data[0, 0] = math.log(2.0)
    out = adp.multihead_routed_forward(state, Tensor(x), mode="eval").data
    expected = (6.0 / r) * (5.0 / 3.0) * (b2 @ (state.A[0].data @ x))
    npt.assert_allclose(out, expected, atol=1e-12)


def test_routed_missing_router_raises_state_error():
    state = random_state(adp.MULTI_HEAD_ROUTED)
    state.router = None
    with pytest.raises(StateError):
        adp.multihead_routed_forward(state, Tensor(RNG.normal(size=(5, 2))))


def test_randomized_dropout_train_vs_eval():
    state = random_state(adp.MULTI_HEAD_RANDOMIZED, dropout=0.4)
    x = Tensor(RNG.normal(size=(5, 16)))
    train_a = adp.multihead_routed_forward(state, x, mode="train", step=1).data
    train_b = adp.multihead_routed_forward(state, x, mode="train", step=1).data
    npt.assert_array_equal(train_a, train_b)  # masks keyed by (seed, step, layer, head)
    train_c = adp.multihead_routed_forward(state, x, mode="train", step=2).data
    assert not np.array_equal(train_a, train_c)
    eval_a = adp.multihead_routed_forward(state, x, mode="eval", step=1).data
    eval_b = adp.multihead_routed_forward(state, x, mode="eval", step=99).data
    npt.assert_array_equal(eval_a, eval_b)


# ---------------------------------------------------------------------------
# multi-adapter forward


def test_multiadapter_topk_equals_full_softmax_when_k_is_n():
    state = random_state(adp.MULTI_ADAPTER)
    state.spec = adp.AdapterSpec(variant=adp.MULTI_ADAPTER, rank=3, num_heads=3,
                                 alpha=12.0, top_k=3, seed=5)
    x = Tensor(RNG.normal(size=(5, 6)))
    got = adp.multiadapter_forward(state, x).data
    logits = state.router.data @ x.data
    weights = np.exp(logits - logits.max(axis=0)) / np.exp(logits - logits.max(axis=0)).sum(axis=0)
    expected = state.W.data @ x.data
    for i in range(3):
        expected = expected + (12.0 / 3) * (state.B[i].data @ (state.A[i].data @ x.data)) * weights[i]
    npt.assert_allclose(got, expected, atol=1e-10)


def test_multiadapter_top1_uses_single_expert_with_unit_weight():
    state = random_state(adp.MULTI_ADAPTER)
    state.spec = adp.AdapterSpec(variant=adp.MULTI_ADAPTER, rank=3, num_heads=3,
                                 alpha=12.0, top_k=1, seed=5)
    x = RNG.normal(size=(5, 4))
    got = adp.multiadapter_forward(state, Tensor(x)).data
    logits = state.router.data @ x
    winners = logits.argmax(axis=0)
    expected = state.W.data @ x
    for j, winner in enumerate(winners):
        expected[:, j] += (12.0 / 3) * (state.B[winner].data @ (state.A[winner].data @ x[:, j]))
    npt.assert_allclose(got, expected, atol=1e-10)


def test_multiadapter_tie_breaks_to_lowest_expert_index():
    state = random_state(adp.MULTI_ADAPTER)
    state.spec = adp.AdapterSpec(variant=adp.MULTI_ADAPTER, rank=3, num_heads=3,
                                 alpha=12.0, top_k=1, seed=5)
    state.router.data[:] = 0.0  # every expert ties; expert 0 must win
    x = RNG.normal(size=(5, 3))
    got = adp.multiadapter_forward(state, Tensor(x)).data
    expected = state.W.data @ x + (12.0 / 3) * (state.B[0].data @ (state.A[0].data @ x))
    npt.assert_allclose(got, expected, atol=1e-12)


# ---------------------------------------------------------------------------
# summed multi-head forward


def test_sum_variant_equal_heads_multiplies_by_head_count():
    state = random_state(adp.MULTI_HEAD_SUM)
    for b in state.B[1:]:
        b.data[:] = state.B[0].data
    x = RNG.normal(size=(5, 6))
    got = adp.multihead_sum_forward(state, Tensor(x), mode="eval").data
    expected = state.W.data @ x + (12.0 / 3) * 3 * (state.B[0].data @ (state.A[0].data @ x))
    npt.assert_allclose(got, expected, atol=1e-10)


def test_sum_variant_equals_scaled_uniform_routing():
    state = random_state(adp.MULTI_HEAD_SUM)
    routed = adp.init_adapter(spec_for(adp.MULTI_HEAD_ROUTED), 6, 5, base_weight=state.W.data)
    routed.A[0].data[:] = state.A[0].data
    for rb, sb in zip(routed.B, state.B):
        rb.data[:] = sb.data
    routed.router.data[:] = 0.0  # uniform weights 1/N
    x = Tensor(RNG.normal(size=(5, 8)))
    summed = adp.multihead_sum_forward(state, x, mode="eval").data
    uniform = adp.multihead_routed_forward(routed, x, mode="eval").data
    base = state.W.data @ x.data
    npt.assert_allclose(summed - base, 3 * (uniform - base), atol=1e-10)


def test_sum_variant_zero_dropout_train_equals_eval():
    state = random_state(adp.MULTI_HEAD_SUM, dropout=0.0)
    x = Tensor(RNG.normal(size=(5, 8)))
    npt.assert_array_equal(adp.multihead_sum_forward(state, x, mode="train").data,
                           adp.multihead_sum_forward(state, x, mode="eval").data)


def test_all_variants_zero_heads_give_frozen_output():
    x = RNG.normal(size=(5, 6))
    for variant in adp.VARIANTS:
        state = random_state(variant)
        for b in state.B:
            b.data[:] = 0.0
        out = adp.adapter_forward(state, Tensor(x), mode="eval")
        npt.assert_allclose(out.data, state.W.data @ x, atol=1e-12)


# ---------------------------------------------------------------------------
# gradients through every variant forward


@pytest.mark.parametrize("variant", adp.VARIANTS)
def test_variant_forward_grad_check(variant):
    rng = np.random.default_rng(11)
    for trial in range(20):
        dropout = 0.3 if variant in adp.DROPOUT_VARIANTS and trial % 2 else 0.0
        state = adp.init_adapter(spec_for(variant, rank=2, heads=3, dropout=dropout,
                                          seed=trial), 4, 5,
                                 base_weight=rng.normal(size=(4, 5)))
        for tensor in state.A + state.B:
            tensor.data[:] = rng.normal(size=tensor.shape)
        if state.router is not None:
            state.router.data[:] = rng.normal(size=state.router.shape) * 0.5
        x = Tensor(rng.normal(size=(5, 3)))
        weights = Tensor(rng.normal(size=(4, 3)))

        def program():
            out = adp.adapter_forward(state, x, mode="train", step=trial, layer_id=0)
            return ad.reduce_sum(ad.mul(out, weights))

        err = ad.grad_check(program, state.trainable(), eps=1e-5)
        assert err <= 1e-4, f"{variant} trial {trial}: {err}"


# ---------------------------------------------------------------------------
# merge


def test_merge_zero_update_returns_base():
    state = adp.init_adapter(spec_for(adp.VANILLA), 6, 5, base_weight=RNG.normal(size=(6, 5)))
    npt.assert_array_equal(adp.merge(state).merged.data, state.W.data)


@pytest.mark.parametrize("variant", [adp.VANILLA, adp.MULTI_HEAD_SUM])
def test_merge_matches_eval_forward_on_random_probes(variant):
    state = random_state(variant, dropout=0.2 if variant == adp.MULTI_HEAD_SUM else 0.0)
    merged = adp.merge(state).merged.data
    x = RNG.normal(size=(5, 100))
    with ad.no_grad():
        eval_out = adp.adapter_forward(state, Tensor(x), mode="eval").data
    assert np.abs(merged @ x - eval_out).max() <= 1e-10


@pytest.mark.parametrize("variant", adp.ROUTED_VARIANTS)
def test_merge_rejects_routed_variants(variant):
    state = random_state(variant)
    with pytest.raises(NotMergeableError, match="input-dependent routing"):
        adp.merge(state)


# ---------------------------------------------------------------------------
# parameter accounting


def test_param_count_hand_cases():
    assert adp.trainable_param_count(spec_for(adp.VANILLA, rank=4), 64, 64) == 512
    routed = adp.AdapterSpec(variant=adp.MULTI_HEAD_ROUTED, rank=4, num_heads=3)
    assert adp.trainable_param_count(routed, 64, 64) == 256 + 768 + 192
    summed = adp.AdapterSpec(variant=adp.MULTI_HEAD_SUM, rank=4, num_heads=3)
    assert adp.trainable_param_count(summed, 64, 64) == 1024


@pytest.mark.parametrize("variant", adp.VARIANTS)
@pytest.mark.parametrize("dim_m", [8, 16, 64])
@pytest.mark.parametrize("dim_n", [8, 16, 64])
@pytest.mark.parametrize("heads", [1, 2, 3, 4])
def test_param_count_matches_enumerated_entries(variant, dim_m, dim_n, heads):
    if variant == adp.VANILLA and heads != 1:
        pytest.skip("vanilla is single-head by definition")
    spec = adp.AdapterSpec(variant=variant, rank=4, num_heads=heads,
                           top_k=min(2, heads) if variant == adp.MULTI_ADAPTER else None)
    state = adp.init_adapter(spec, dim_m, dim_n)
    assert adp.trainable_param_count(spec, dim_m, dim_n) == sum(
        p.data.size for p in state.trainable())


def test_matched_vanilla_ranks():
    dims = [(64, 32), (8, 64)]
    routed = adp.AdapterSpec(variant=adp.MULTI_HEAD_ROUTED, rank=4, num_heads=3)
    budget = sum(adp.trainable_param_count(routed, m, n) for m, n in dims)
    ranks = adp.matched_vanilla_ranks(budget, dims)
    total = sum(r * (m + n) for r, (m, n) in zip(ranks, dims))
    assert total <= budget
    assert all(r <= min(m, n) for r, (m, n) in zip(ranks, dims))
    # one step larger must overflow the budget (tight fit)
    bigger = [min(r + 1, min(m, n)) for r, (m, n) in zip(ranks, dims)]
    if bigger != ranks:
        assert sum(r * (m + n) for r, (m, n) in zip(bigger, dims)) > budget


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip_bit_identical(tmp_path):
    for variant in adp.VARIANTS:
        state = random_state(variant)
        path = tmp_path / f"{variant}.json"
        adp.save_checkpoint([state], path)
        loaded = adp.load_checkpoint(path)[0]
        npt.assert_array_equal(loaded.W.data, state.W.data)
        for a, b in zip(loaded.A + loaded.B, state.A + state.B):
            npt.assert_array_equal(a.data, b.data)
        if state.router is None:
            assert loaded.router is None
        else:
            npt.assert_array_equal(loaded.router.data, state.router.data)
        assert loaded.spec == state.spec


def test_checkpoint_document_layout(tmp_path):
    state = random_state(adp.MULTI_HEAD_ROUTED)
    path = tmp_path / "ckpt.json"
    adp.save_checkpoint([state], path)
    doc = json.loads(path.read_text())
    layer = doc["layers"][0]
    assert layer["variant"] == adp.MULTI_HEAD_ROUTED
    assert set(layer["spec"]) == {"rank", "num_heads", "alpha", "dropout_p", "top_k", "seed"}
    assert layer["W"]["shape"] == [6, 5]
    assert isinstance(layer["A"], list) and isinstance(layer["B"], list)
    # arrays are base64 little-endian float64
    import base64
    raw = np.frombuffer(base64.b64decode(layer["W"]["data"]), dtype="<f8")
    npt.assert_array_equal(raw.reshape(6, 5), state.W.data)


def test_checkpoint_missing_field_raises(tmp_path):
    state = random_state(adp.VANILLA)
    doc = adp.state_to_doc(state)
    del doc["A"]
    with pytest.raises(ConfigError, match="A"):
        adp.state_from_doc(doc)
