"""
Self-attention score export for heatmaps.

One JSON record per traced example: the candidate list's item-level score
grid and pooling weights, and the user's list-level grid with the item-level
grids of every profile list. Grids only cover real (unpadded) positions when
padding is masked, so each row sums to 1.
"""
import numpy as np

from attlist.config import TrainConfig
from attlist.logging import RecordWriter
from attlist.models import InteractionDataset
from attlist.services.network import ForwardTrace, ParameterSet, encode_lists, encode_users


def trace_lists(lists, params: ParameterSet, config: TrainConfig, builder) -> ForwardTrace:
    """Item-level internals of the given lists, no user involved."""
    batch = builder.lists_only(lists)
    y, F, alpha = encode_lists(batch.list_items, batch.list_item_mask, params, config.ablation)
    return ForwardTrace(batch=batch, item_F=F, alpha=alpha, y=y.values)


def trace_users(users, params: ParameterSet, config: TrainConfig, builder) -> ForwardTrace:
    """Profile internals of the given users, no candidate involved."""
    batch = builder.users_only(users)
    x, profile_F, profile_alpha, list_F, beta = encode_users(
        batch.profile_items, batch.profile_item_mask, batch.profile_slot_mask,
        params, config.ablation,
    )
    return ForwardTrace(
        batch=batch,
        profile_item_F=profile_F,
        profile_alpha=profile_alpha,
        list_F=list_F,
        beta=beta,
        x=x.values,
    )


def _grid(F: np.ndarray, mask: np.ndarray, mask_padding: bool):
    if not mask_padding:
        return F
    keep = np.flatnonzero(mask)
    return F[np.ix_(keep, keep)]


def _weights(w: np.ndarray, mask: np.ndarray, mask_padding: bool):
    return w if not mask_padding else w[np.flatnonzero(mask)]


def _list_record(ds, lst, items, mask, F, alpha, mask_padding):
    shown = items if not mask_padding else items[mask]
    return {
        "list": ds.list_ids[lst],
        "items": [ds.item_id(int(i)) for i in shown],
        "F": _grid(F, mask, mask_padding),
        "alpha": _weights(alpha, mask, mask_padding),
    }


def attention_records(trace: ForwardTrace, ds: InteractionDataset, config: TrainConfig):
    """Yield one export record per example in the trace."""
    mask_padding = config.ablation.mask_padding
    b = trace.batch
    for k in range(len(b)):
        record = {"user": None, "list": None}
        if trace.alpha is not None and b.lists[k] >= 0:
            record["list"] = ds.list_ids[b.lists[k]]
            record["candidate"] = _list_record(
                ds, b.lists[k], b.list_items[k], b.list_item_mask[k],
                trace.item_F[k], trace.alpha[k], mask_padding,
            )
        if trace.beta is not None and b.users[k] >= 0:
            slots = b.profile_slot_mask[k]
            record["user"] = ds.user_ids[b.users[k]]
            record["profile"] = {
                "lists": [ds.list_ids[lst] for lst in b.profile_lists[k][slots]],
                "F": _grid(trace.list_F[k], slots, mask_padding),
                "beta": _weights(trace.beta[k], slots, mask_padding),
                "members": [
                    _list_record(
                        ds, b.profile_lists[k][n], b.profile_items[k, n],
                        b.profile_item_mask[k, n], trace.profile_item_F[k, n],
                        trace.profile_alpha[k, n], mask_padding,
                    )
                    for n in np.flatnonzero(slots)
                ],
            }
        if trace.prediction is not None:
            record["score"] = float(trace.r_hat[k])
        yield record


def export_attention(
    trace: ForwardTrace, sink, ds: InteractionDataset, config: TrainConfig, append: bool = False
) -> int:
    """Write the trace's score grids to a path or stream. Returns the record count."""
    count = 0
    with RecordWriter(sink, append=append) as writer:
        for record in attention_records(trace, ds, config):
            writer.write(record)
            count += 1
    return count


def diagonal_contrast(F: np.ndarray) -> tuple[float, float]:
    """Mean diagonal and mean off-diagonal score of a square grid."""
    m = F.shape[0]
    diag = float(np.trace(F)) / m
    if m == 1:
        return diag, 0.0
    off = (float(F.sum()) - float(np.trace(F))) / (m * (m - 1))
    return diag, off
