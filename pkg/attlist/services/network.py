"""
The AttList scoring network.

Items of a list are embedded (plus a position embedding), re-mixed by
self-attention and pooled by vanilla attention into a list vector y_l. The
lists in a user's profile go through the same two steps one level up to give
x_u. ID embeddings are added to both sides and a two-layer network turns
[p ⊙ q; q; p] into a preference score in (0, 1).
"""
import logging
import math
from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from attlist.config import AblationConfig, TrainConfig
from attlist.errors import DegenerateInputError, DimensionError
from attlist.models import PaddedProfileBatch
from attlist.services.tensor import (
    Tensor,
    add,
    add_bias,
    concat,
    dropout,
    gather,
    make_rng,
    matmul,
    multiply,
    relu,
    reshape,
    row_softmax,
    scale,
    sigmoid,
    tanh,
    transpose,
)

logger = logging.getLogger(__name__)

INIT_STREAM = 31
DROPOUT_STREAM = 32

# range for embedding-style initialization
EMBED_RANGE = 0.05

LEVEL_PARAMS = {
    "item": ("W_I", "b_I", "u_I"),
    "list": ("W_L", "b_L", "u_L"),
}


class ParameterSet(Mapping):
    """
    Named learnable tensors. Only what the ablation switches actually use is
    allocated, so every tensor here gets a gradient from the loss.
    """

    def __init__(self, tensors: dict[str, Tensor]):
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    @classmethod
    def initialize(
        cls, n_users: int, n_lists: int, n_items: int, config: TrainConfig, seed: int | None = None
    ) -> "ParameterSet":
        rng = make_rng(config.seed if seed is None else seed, INIT_STREAM)
        d, D, M = config.d, config.D, config.M
        ab = config.ablation

        def embedding(rows, cols):
            return rng.uniform(-EMBED_RANGE, EMBED_RANGE, size=(rows, cols))

        def glorot(rows, cols):
            limit = math.sqrt(6.0 / (rows + cols))
            return rng.uniform(-limit, limit, size=(rows, cols))

        arrays = {"E": embedding(n_items + 1, d)}
        # padding row stays exactly zero
        arrays["E"][0] = 0.0
        if ab.use_position:
            arrays["O"] = embedding(M, d)
        if ab.use_vanilla_attention:
            for W, b, u in LEVEL_PARAMS.values():
                arrays[W] = glorot(d, d)
                arrays[b] = np.zeros(d)
                # u can't start at zero or the attention logits never move
                arrays[u] = rng.uniform(-EMBED_RANGE, EMBED_RANGE, size=d)
        if ab.use_id_embeddings:
            arrays["user_emb"] = embedding(n_users, d)
            arrays["list_emb"] = embedding(n_lists, d)
        if ab.use_self_attention and ab.use_linear_projections:
            for level in LEVEL_PARAMS:
                for kind in "QKV":
                    arrays[f"W_{kind}_{level}"] = glorot(d, d)
        arrays["W_1"] = glorot(D, 3 * d)
        arrays["b_1"] = np.zeros(D)
        arrays["W_2"] = glorot(1, D)
        arrays["b_2"] = np.zeros(1)
        return cls.from_arrays(arrays)

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "ParameterSet":
        return cls({
            name: Tensor(np.array(values, dtype=np.float64), requires_grad=True, name=name)
            for name, values in arrays.items()
        })

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.values.copy() for name, t in self.tensors.items()}

    def zero_grad(self):
        for t in self.tensors.values():
            t.zero_grad()

    def freeze_padding(self):
        """Drop any gradient that reached the padding embedding row."""
        E = self.tensors["E"]
        if E.grad is not None:
            E.grad[0] = 0.0

    def check_shapes(self, n_users: int, n_lists: int, n_items: int, config: TrainConfig):
        expected = ParameterSet.initialize(n_users, n_lists, n_items, config)
        for name, t in expected.items():
            if name not in self.tensors or self.tensors[name].shape != t.shape:
                got = self.tensors[name].shape if name in self.tensors else ()
                raise DimensionError(f"parameter {name}", t.shape, got)


@dataclass
class ForwardTrace:
    """
    Internals of one forward pass over B examples. Traces of lists alone or of
    profiles alone leave the other side empty.

    profile_item_F / profile_alpha are per profile list; list_F / beta are the
    list-level self-attention and pooling weights. prediction keeps the graph.
    """
    batch: PaddedProfileBatch
    item_F: np.ndarray | None = None
    alpha: np.ndarray | None = None
    profile_item_F: np.ndarray | None = None
    profile_alpha: np.ndarray | None = None
    list_F: np.ndarray | None = None
    beta: np.ndarray | None = None
    y: np.ndarray | None = None
    x: np.ndarray | None = None
    p: np.ndarray | None = None
    q: np.ndarray | None = None
    prediction: Tensor | None = None

    @property
    def r_hat(self) -> np.ndarray | None:
        return None if self.prediction is None else self.prediction.values


class DropoutContext:
    """Carries the dropout rate, training flag and generator through one pass."""

    def __init__(self, gamma: float = 0.0, training: bool = False, rng=None):
        self.gamma = gamma
        self.training = training
        self.rng = rng

    def __call__(self, x: Tensor) -> Tensor:
        return dropout(x, self.gamma, self.training, self.rng)


INFERENCE = DropoutContext()


def _check_live(mask, where: str):
    if mask is not None and not np.asarray(mask, dtype=bool).any(axis=-1).all():
        raise DegenerateInputError(f"{where}: every position of some row is masked")


def _safe_mask(mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unmask rows that are entirely padding so softmax stays defined; report which were live."""
    live = mask.any(axis=-1)
    return mask | ~live[..., None], live


def _zero_dead_rows(vectors: Tensor, live: np.ndarray) -> Tensor:
    if live.all():
        return vectors
    keep = np.broadcast_to(live[..., None].astype(np.float64), vectors.shape).copy()
    return multiply(vectors, Tensor(keep))


def positional_item_repr(
    item_ids, params: ParameterSet, config: AblationConfig, drop: DropoutContext = INFERENCE
) -> Tensor:
    """Z_l: item embedding plus position embedding for each slot (…, M) -> (…, M, d)."""
    ids = np.asarray(item_ids, dtype=np.int64)
    z = drop(gather(params["E"], ids))
    if config.use_position:
        positions = np.broadcast_to(np.arange(ids.shape[-1]), ids.shape)
        z = add(z, drop(gather(params["O"], positions)))
    return z


def self_attention(
    Z: Tensor,
    mask,
    params: ParameterSet,
    config: AblationConfig,
    level: str = "item",
    drop: DropoutContext = INFERENCE,
) -> tuple[Tensor, np.ndarray]:
    """
    Scaled dot-product self-attention with a residual connection.
    Returns the refined rows and the score matrix F.
    """
    mask = None if mask is None else np.asarray(mask, dtype=bool)
    _check_live(mask, "self_attention")
    m, d = Z.shape[-2], Z.shape[-1]
    if not config.use_self_attention:
        eye = np.broadcast_to(np.eye(m), Z.shape[:-2] + (m, m)).copy()
        return Z, eye

    if config.use_linear_projections:
        Q = matmul(Z, params[f"W_Q_{level}"])
        K = matmul(Z, params[f"W_K_{level}"])
        V = matmul(Z, params[f"W_V_{level}"])
    else:
        Q = K = V = Z

    scores = scale(matmul(Q, transpose(K)), 1.0 / math.sqrt(d))
    key_mask = mask[..., None, :] if (config.mask_padding and mask is not None) else None
    F = row_softmax(scores, key_mask)
    refined = matmul(drop(F), V)
    out = add(Z, refined) if config.use_residual else refined
    return out, F.values


def vanilla_aggregate(
    H_refined: Tensor,
    H_values: Tensor,
    mask,
    level: str,
    params: ParameterSet,
    config: AblationConfig,
) -> tuple[Tensor, Tensor]:
    """
    Softmax of u^T tanh(W h + b) over the rows of H_refined, used to weight the
    rows of H_values. Uniform weights (mean pooling) without vanilla attention.
    """
    if H_refined.shape != H_values.shape:
        raise DimensionError("vanilla_aggregate", H_refined.shape, H_values.shape)
    mask = None if mask is None else np.asarray(mask, dtype=bool)
    _check_live(mask, "vanilla_aggregate")
    softmax_mask = mask if config.mask_padding else None
    lead, (m, d) = H_refined.shape[:-2], H_refined.shape[-2:]

    if config.use_vanilla_attention:
        W, b, u = (params[name] for name in LEVEL_PARAMS[level])
        hidden = tanh(add_bias(matmul(H_refined, transpose(W)), b))
        logits = reshape(matmul(hidden, reshape(u, (d, 1))), lead + (m,))
    else:
        logits = Tensor(np.zeros(lead + (m,)))
    weights = row_softmax(logits, softmax_mask)

    pooled = matmul(reshape(weights, lead + (1, m)), H_values)
    return reshape(pooled, lead + (d,)), weights


def encode_lists(
    item_ids, item_mask, params: ParameterSet, config: AblationConfig,
    drop: DropoutContext = INFERENCE,
):
    """
    Item-level aggregation for a batch of lists (B, M).
    Returns y (B, d), item self-attention scores (B, M, M) and alpha (B, M).
    """
    item_mask = np.asarray(item_mask, dtype=bool)
    safe, live = _safe_mask(item_mask)
    Z = positional_item_repr(item_ids, params, config, drop)
    refined, F = self_attention(Z, safe, params, config, "item", drop)
    y, alpha = vanilla_aggregate(refined, refined, safe, "item", params, config)
    if config.mask_padding:
        y = _zero_dead_rows(y, live)
    return y, F, alpha.values


def encode_users(
    profile_items, profile_item_mask, slot_mask, params: ParameterSet, config: AblationConfig,
    drop: DropoutContext = INFERENCE,
):
    """
    List-level aggregation over each user's profile (B, N, M).
    Users without a single profile list get x_u = 0.
    """
    profile_items = np.asarray(profile_items, dtype=np.int64)
    B, N, M = profile_items.shape
    slot_mask = np.asarray(slot_mask, dtype=bool)

    y, item_F, alpha = encode_lists(
        profile_items.reshape(B * N, M),
        np.asarray(profile_item_mask, dtype=bool).reshape(B * N, M),
        params, config, drop,
    )
    Y = drop(reshape(y, (B, N, y.shape[-1])))

    safe, live = _safe_mask(slot_mask)
    refined, list_F = self_attention(Y, safe, params, config, "list", drop)
    values = refined if config.aggregate_refined_at_list_level else Y
    x, beta = vanilla_aggregate(refined, values, safe, "list", params, config)
    x = _zero_dead_rows(x, live)
    return x, item_F.reshape(B, N, M, M), alpha.reshape(B, N, M), list_F, beta.values


def predict(p: Tensor, q: Tensor, params: ParameterSet, drop: DropoutContext = INFERENCE) -> Tensor:
    """h0 = [p ⊙ q; q; p], h1 = ReLU(W_1 h0 + b_1), r = sigmoid(W_2 h1 + b_2)."""
    h0 = concat([multiply(p, q), q, p], axis=-1)
    h1 = drop(relu(add_bias(matmul(h0, transpose(params["W_1"])), params["b_1"])))
    out = add_bias(matmul(h1, transpose(params["W_2"])), params["b_2"])
    return sigmoid(reshape(out, (out.shape[0],)))


def forward(
    batch: PaddedProfileBatch,
    params: ParameterSet,
    config: TrainConfig,
    training: bool = False,
    seed: int | tuple = 0,
) -> ForwardTrace:
    """Score every (user, candidate list) example of the batch."""
    ab = config.ablation
    stream = seed if isinstance(seed, tuple) else (seed,)
    drop = DropoutContext(config.gamma, training, make_rng(*stream, DROPOUT_STREAM))

    y, item_F, alpha = encode_lists(batch.list_items, batch.list_item_mask, params, ab, drop)
    y = drop(y)
    x, profile_F, profile_alpha, list_F, beta = encode_users(
        batch.profile_items, batch.profile_item_mask, batch.profile_slot_mask, params, ab, drop
    )
    x = drop(x)

    if ab.use_id_embeddings:
        p = add(x, gather(params["user_emb"], batch.users))
        q = add(y, gather(params["list_emb"], batch.lists))
    else:
        p, q = x, y

    prediction = predict(p, q, params, drop)
    return ForwardTrace(
        item_F=item_F,
        alpha=alpha,
        profile_item_F=profile_F,
        profile_alpha=profile_alpha,
        list_F=list_F,
        beta=beta,
        y=y.values,
        x=x.values,
        p=p.values,
        q=q.values,
        prediction=prediction,
        batch=batch,
    )


class AttListScorer:
    """
    Inference-time scorer. List vectors q_l don't depend on the user and user
    vectors p_u don't depend on the candidate, so both are computed once and
    only the prediction layer runs per (user, list).
    """
    name = "attlist"

    def __init__(self, params: ParameterSet, config: TrainConfig, builder, chunk: int = 256):
        self.params = params
        self.config = config
        self.builder = builder
        ab = config.ablation
        n_lists = builder.list_matrix.shape[0]
        n_users = len(builder.train_lists)

        q_parts = []
        for start in range(0, n_lists, chunk):
            idx = np.arange(start, min(start + chunk, n_lists))
            y, _, _ = encode_lists(builder.list_matrix[idx], builder.list_mask[idx], params, ab)
            if ab.use_id_embeddings:
                y = add(y, gather(params["list_emb"], idx))
            q_parts.append(y.values)
        self.Q = np.concatenate(q_parts) if q_parts else np.zeros((0, config.d))

        p_parts = []
        for start in range(0, n_users, chunk):
            idx = np.arange(start, min(start + chunk, n_users))
            items, item_mask, slot_mask = builder.profile_matrix(builder.user_profiles(idx))
            x, *_ = encode_users(items, item_mask, slot_mask, params, ab)
            if ab.use_id_embeddings:
                x = add(x, gather(params["user_emb"], idx))
            p_parts.append(x.values)
        self.P = np.concatenate(p_parts) if p_parts else np.zeros((0, config.d))

    def score_user(self, user: int) -> np.ndarray:
        q = Tensor(self.Q)
        p = Tensor(np.broadcast_to(self.P[user], self.Q.shape).copy())
        return predict(p, q, self.params).values
