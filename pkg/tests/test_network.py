import math

import numpy as np
import pytest

from attlist.config import ABLATION_VARIANTS, AblationConfig, TrainConfig, ablation_variant
from attlist.errors import DimensionError
from attlist.models import PAD, Split
from attlist.services.dataio import ProfileBuilder
from attlist.services.network import (
    AttListScorer,
    ParameterSet,
    encode_lists,
    encode_users,
    forward,
    positional_item_repr,
    self_attention,
    vanilla_aggregate,
)
from attlist.services.tensor import Tensor, add, gradient_check, make_rng
from attlist.services.training import bce_loss, l2_penalty


def random_params(ds, config, seed, std=0.5):
    """Every parameter drawn from N(0, std), padding row kept at zero."""
    rng = make_rng(seed, 99)
    shapes = ParameterSet.initialize(ds.n_users, ds.n_lists, ds.n_items, config).arrays()
    arrays = {name: rng.normal(0.0, std, size=a.shape) for name, a in shapes.items()}
    arrays["E"][0] = 0.0
    return ParameterSet.from_arrays(arrays)


# parameters

def test_parameter_shapes(tiny_ds, tiny_config):
    params = ParameterSet.initialize(4, 6, 8, tiny_config)
    assert params["E"].shape == (9, 4)
    assert params["O"].shape == (3, 4)
    assert params["W_I"].shape == (4, 4)
    assert params["user_emb"].shape == (4, 4)
    assert params["list_emb"].shape == (6, 4)
    assert params["W_1"].shape == (5, 12)
    assert params["W_2"].shape == (1, 5)
    assert params["b_2"].shape == (1,)
    assert (params["E"].values[0] == 0).all()
    assert "W_Q_item" not in params


def test_ablation_controls_allocation(tiny_config):
    no_vanilla = ablation_variant(tiny_config, "-VanillaAttention")
    params = ParameterSet.initialize(4, 6, 8, no_vanilla)
    assert "W_I" not in params and "u_L" not in params

    projections = ablation_variant(tiny_config, "+LinearProjections")
    params = ParameterSet.initialize(4, 6, 8, projections)
    for name in ("W_Q_item", "W_K_item", "W_V_item", "W_Q_list", "W_K_list", "W_V_list"):
        assert params[name].shape == (4, 4)


def test_check_shapes_rejects_other_dataset(tiny_config):
    params = ParameterSet.initialize(4, 6, 8, tiny_config)
    with pytest.raises(DimensionError):
        params.check_shapes(4, 7, 8, tiny_config)


# positional item representation

def test_padding_row_is_zero_without_positions(tiny_config):
    params = ParameterSet.initialize(4, 6, 8, tiny_config)
    ab = AblationConfig(use_position=False)
    z = positional_item_repr(np.array([7, 0]), params, ab).values
    assert np.array_equal(z[0], params["E"].values[7])
    assert (z[1] == 0).all()
    assert (positional_item_repr(np.array([0, 0, 0]), params, ab).values == 0).all()


def test_same_item_at_two_positions(tiny_config):
    params = ParameterSet.initialize(4, 6, 8, tiny_config)
    z = positional_item_repr(np.array([7, 7]), params, AblationConfig()).values
    O = params["O"].values
    assert np.allclose(z[1] - z[0], O[1] - O[0], atol=1e-12)


# self-attention

def test_self_attention_small_case():
    Z = Tensor([[1.0], [0.0]])
    out, F = self_attention(Z, None, ParameterSet({}), AblationConfig())
    assert F == pytest.approx(np.array([[0.7311, 0.2689], [0.5, 0.5]]), abs=1e-4)
    assert out.values == pytest.approx(np.array([[1.7311], [0.5]]), abs=1e-4)


def test_self_attention_disabled_is_identity():
    Z = Tensor(np.arange(6.0).reshape(3, 2))
    out, F = self_attention(Z, None, ParameterSet({}), AblationConfig(use_self_attention=False))
    assert out is Z
    assert np.array_equal(F, np.eye(3))


def test_self_attention_single_row():
    Z = Tensor([[0.3, -1.2]])
    out, F = self_attention(Z, None, ParameterSet({}), AblationConfig())
    assert F.tolist() == [[1.0]]
    assert np.allclose(out.values, 2 * Z.values)


def test_self_attention_without_residual():
    Z = Tensor([[1.0], [0.0]])
    out, _ = self_attention(Z, None, ParameterSet({}), AblationConfig(use_residual=False))
    assert out.values == pytest.approx(np.array([[0.7311], [0.5]]), abs=1e-4)


# vanilla attention

def level_params(d, rng, zero=False):
    W = np.zeros((d, d)) if zero else rng.normal(size=(d, d))
    b = np.zeros(d) if zero else rng.normal(size=d)
    return ParameterSet.from_arrays({"W_I": W, "b_I": b, "u_I": rng.normal(size=d)})


def test_zero_parameters_give_masked_mean():
    rng = make_rng(1)
    H = Tensor(rng.normal(size=(3, 2)))
    mask = np.array([True, True, False])
    vector, weights = vanilla_aggregate(H, H, mask, "item", level_params(2, rng, zero=True),
                                        AblationConfig())
    assert weights.values == pytest.approx([0.5, 0.5, 0.0])
    assert vector.values == pytest.approx(H.values[:2].mean(axis=0))


def test_single_row_gets_all_weight():
    rng = make_rng(2)
    H = Tensor(rng.normal(size=(1, 2)))
    vector, weights = vanilla_aggregate(H, H, None, "item", level_params(2, rng), AblationConfig())
    assert weights.values.tolist() == [1.0]
    assert np.allclose(vector.values, H.values[0])


def test_vanilla_attention_matches_direct_evaluation():
    rng = make_rng(3)
    params = level_params(2, rng)
    H = rng.normal(size=(3, 2))
    V = rng.normal(size=(3, 2))
    vector, _ = vanilla_aggregate(Tensor(H), Tensor(V), None, "item", params, AblationConfig())

    W, b, u = (params[k].values for k in ("W_I", "b_I", "u_I"))
    logits = np.array([u @ np.tanh(W @ h + b) for h in H])
    weights = np.exp(logits) / np.exp(logits).sum()
    assert vector.values == pytest.approx(weights @ V, abs=1e-12)


def test_mean_pooling_without_vanilla_attention():
    H = Tensor(np.arange(6.0).reshape(3, 2))
    vector, weights = vanilla_aggregate(H, H, None, "item", ParameterSet({}),
                                        AblationConfig(use_vanilla_attention=False))
    assert np.allclose(weights.values, 1 / 3)
    assert np.allclose(vector.values, [2.0, 3.0])


# full forward pass

def test_zero_output_layer_gives_one_half(tiny_ds, tiny_config):
    params = random_params(tiny_ds, tiny_config, seed=0)
    params["W_2"].values[:] = 0.0
    params["b_2"].values[:] = 0.0
    batch = ProfileBuilder(tiny_ds, 2, 3).batch([0, 1, 2, 3], [4, 0, 3, 1])
    trace = forward(batch, params, tiny_config)
    assert np.array_equal(trace.r_hat, np.full(4, 0.5))


def test_empty_inputs_collapse_to_bias_path(dataset_factory, tiny_config):
    # list 0 is empty and is the user's only list, so the profile is empty too
    ds = dataset_factory([[], [1, 2]], [(0, 0, Split.train), (1, 1, Split.train)])
    config = tiny_config.model_copy(update={
        "ablation": AblationConfig(use_id_embeddings=False, use_position=False),
    })
    params = random_params(ds, config, seed=1)
    trace = forward(ProfileBuilder(ds, 2, 3).batch([0], [0]), params, config)

    assert (trace.x == 0).all() and (trace.y == 0).all()
    W_2, b_1, b_2 = (params[k].values for k in ("W_2", "b_1", "b_2"))
    expected = 1 / (1 + math.exp(-(W_2 @ np.maximum(b_1, 0) + b_2)[0]))
    assert trace.r_hat[0] == pytest.approx(expected, abs=1e-12)


def _softmax(logits, live):
    z = np.where(live, logits, -np.inf)
    e = np.where(live, np.exp(z - z.max()), 0.0)
    return e / e.sum()


def _level(Z, live, W, b, u, pool_refined):
    """One self-attentive aggregation level written out row by row."""
    m, d = Z.shape
    if not live.any():
        return np.zeros(d)
    S = Z @ Z.T / math.sqrt(d)
    F = np.array([_softmax(S[i], live) for i in range(m)])
    R = Z + F @ Z
    logits = np.array([u @ np.tanh(W @ R[i] + b) for i in range(m)])
    return _softmax(logits, live) @ (R if pool_refined else Z)


def reference_score(params, items, profile, slot_mask, user, lst, M):
    P = {k: v.values for k, v in params.items()}

    def list_vector(ids):
        Z = P["E"][ids] + P["O"][:M]
        return _level(Z, ids != PAD, P["W_I"], P["b_I"], P["u_I"], pool_refined=True)

    y = list_vector(items)
    Y = np.stack([list_vector(ids) for ids in profile])
    x = _level(Y, slot_mask, P["W_L"], P["b_L"], P["u_L"], pool_refined=False)
    p = x + P["user_emb"][user]
    q = y + P["list_emb"][lst]
    h0 = np.concatenate([p * q, q, p])
    h1 = np.maximum(P["W_1"] @ h0 + P["b_1"], 0.0)
    return 1 / (1 + math.exp(-(P["W_2"] @ h1 + P["b_2"])[0]))


def test_forward_matches_straight_line_reference(dataset_factory, tiny_config):
    for instance in range(100):
        rng = make_rng(instance, 7)
        containment = [
            rng.choice(np.arange(1, 7), size=int(rng.integers(0, 6))).tolist() for _ in range(5)
        ]
        containment[0] = [6]
        rows = [
            (u, lst, Split.train)
            for u in range(3) for lst in range(5) if rng.random() < 0.5
        ] or [(0, 0, Split.train)]
        ds = dataset_factory(containment, rows, n_users=3)
        params = random_params(ds, tiny_config, seed=instance)

        users = np.repeat(np.arange(3), 5)
        lists = np.tile(np.arange(5), 3)
        batch = ProfileBuilder(ds, tiny_config.N, tiny_config.M).batch(users, lists)
        got = forward(batch, params, tiny_config).r_hat

        for k in range(len(batch)):
            expected = reference_score(
                params, batch.list_items[k], batch.profile_items[k],
                batch.profile_slot_mask[k], users[k], lists[k], tiny_config.M,
            )
            assert got[k] == pytest.approx(expected, abs=1e-10)


def test_attention_weights_are_normalized(tiny_ds, tiny_config):
    params = random_params(tiny_ds, tiny_config, seed=2)
    users = np.repeat(np.arange(4), 6)
    lists = np.tile(np.arange(6), 4)
    trace = forward(ProfileBuilder(tiny_ds, 2, 3).batch(users, lists), params, tiny_config)
    assert np.allclose(trace.alpha.sum(axis=-1), 1.0, atol=1e-9)
    assert np.allclose(trace.beta.sum(axis=-1), 1.0, atol=1e-9)
    assert np.allclose(trace.item_F.sum(axis=-1), 1.0, atol=1e-9)
    assert ((trace.r_hat > 0) & (trace.r_hat < 1)).all()


def test_list_vector_ignores_item_order_without_positions(tiny_ds, tiny_config):
    config = tiny_config.model_copy(update={"ablation": AblationConfig(use_position=False)})
    params = random_params(tiny_ds, config, seed=3)
    mask = np.ones((1, 3), dtype=bool)
    y1, _, _ = encode_lists(np.array([[1, 2, 3]]), mask, params, config.ablation)
    y2, _, _ = encode_lists(np.array([[3, 1, 2]]), mask, params, config.ablation)
    assert np.allclose(y1.values, y2.values, atol=1e-9)


def test_extra_padding_changes_nothing(tiny_ds):
    config = TrainConfig(d=4, D=5, N=2, M=5)
    params = random_params(tiny_ds, config, seed=4)
    short = np.array([[4, 2, 7]])
    long = np.array([[4, 2, 7, PAD, PAD]])
    y_short, _, _ = encode_lists(short, short != PAD, params, config.ablation)
    y_long, _, _ = encode_lists(long, long != PAD, params, config.ablation)
    assert np.allclose(y_short.values, y_long.values, rtol=0, atol=1e-12)


def test_every_ablation_variant_runs(tiny_ds, tiny_config):
    batch = ProfileBuilder(tiny_ds, 2, 3).batch([0, 1, 2, 3], [4, 0, 3, 1])
    for name in ABLATION_VARIANTS:
        config = ablation_variant(tiny_config, name)
        params = ParameterSet.initialize(4, 6, 8, config)
        r_hat = forward(batch, params, config).r_hat
        assert r_hat.shape == (4,)
        assert ((r_hat > 0) & (r_hat < 1)).all()


def test_every_ablation_switch_changes_the_output(tiny_ds, tiny_config):
    """Same weights under each variant; none of them may leave r_hat untouched."""
    superset = ablation_variant(tiny_config, "+LinearProjections")
    params = random_params(tiny_ds, superset, seed=8)
    batch = ProfileBuilder(tiny_ds, 2, 3).batch([0, 1, 2, 3], [4, 0, 3, 1])
    full = forward(batch, params, tiny_config).r_hat
    for name in ABLATION_VARIANTS:
        if name == "full":
            continue
        r_hat = forward(batch, params, ablation_variant(tiny_config, name)).r_hat
        assert np.abs(r_hat - full).max() > 1e-6, name


def test_user_vector_ignores_profile_order(tiny_ds):
    config = TrainConfig(d=4, D=5, N=3, M=3)
    params = random_params(tiny_ds, config, seed=9)
    # user 0 has a padded third slot, user 1 a full profile
    batch = ProfileBuilder(tiny_ds, 3, 3).batch([0, 1], [5, 5])
    x, *_ = encode_users(batch.profile_items, batch.profile_item_mask, batch.profile_slot_mask,
                         params, config.ablation)
    for perm in ([2, 0, 1], [1, 0, 2], [2, 1, 0]):
        moved, *_ = encode_users(batch.profile_items[:, perm], batch.profile_item_mask[:, perm],
                                 batch.profile_slot_mask[:, perm], params, config.ablation)
        assert np.allclose(moved.values, x.values, rtol=0, atol=1e-9)


def test_dropout_only_in_training(tiny_ds, tiny_config):
    config = tiny_config.model_copy(update={"gamma": 0.5})
    params = random_params(tiny_ds, config, seed=5)
    batch = ProfileBuilder(tiny_ds, 2, 3).batch([0, 1, 2, 3], [4, 0, 3, 1])
    inference = forward(batch, params, config).r_hat
    assert np.array_equal(inference, forward(batch, params, tiny_config).r_hat)

    first = forward(batch, params, config, training=True, seed=(0, 1, 0)).r_hat
    again = forward(batch, params, config, training=True, seed=(0, 1, 0)).r_hat
    other = forward(batch, params, config, training=True, seed=(0, 1, 1)).r_hat
    assert np.array_equal(first, again)
    assert not np.array_equal(first, inference)
    assert not np.array_equal(first, other)


def test_full_loss_gradients(tiny_ds, tiny_config):
    """Every parameter of the tiny model against central differences."""
    params = random_params(tiny_ds, tiny_config, seed=6)
    batch = ProfileBuilder(tiny_ds, 2, 3).batch([0, 1, 2, 3], [1, 3, 0, 2], [1, 1, 0, 0])

    def loss():
        trace = forward(batch, params, tiny_config, training=False)
        return add(bce_loss(trace.prediction, batch.labels), l2_penalty(params, tiny_config.lam))

    report = gradient_check(loss, params, step=1e-5, tolerance=1e-4)
    assert set(report.errors) == set(params)
    assert report.max_error <= 1e-4


def test_scorer_matches_forward(tiny_ds, tiny_config):
    params = random_params(tiny_ds, tiny_config, seed=7)
    builder = ProfileBuilder(tiny_ds, 2, 3)
    scorer = AttListScorer(params, tiny_config, builder)
    # lists outside the user's train profile, so no candidate gets excluded
    for user, lst in [(0, 4), (0, 3), (2, 0), (3, 3)]:
        expected = forward(builder.batch([user], [lst]), params, tiny_config).r_hat[0]
        assert scorer.score_user(user)[lst] == pytest.approx(expected, abs=1e-12)
