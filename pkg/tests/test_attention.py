import io

import numpy as np
import pytest

from attlist.config import AblationConfig
from attlist.logging import read_records
from attlist.models import Split
from attlist.services.attention import (
    attention_records,
    diagonal_contrast,
    export_attention,
    trace_lists,
    trace_users,
)
from attlist.services.dataio import ProfileBuilder
from attlist.services.network import ParameterSet


@pytest.fixture
def tiny_model(tiny_ds, tiny_config):
    params = ParameterSet.initialize(tiny_ds.n_users, tiny_ds.n_lists, tiny_ds.n_items, tiny_config)
    return params, ProfileBuilder(tiny_ds, tiny_config.N, tiny_config.M)


def test_list_grids_are_row_normalized(tiny_ds, tiny_config, tiny_model):
    params, builder = tiny_model
    trace = trace_lists([0, 2, 3], params, tiny_config, builder)
    records = list(attention_records(trace, tiny_ds, tiny_config))
    assert [r["list"] for r in records] == ["l0", "l2", "l3"]
    for record in records:
        F = np.asarray(record["candidate"]["F"])
        assert F.shape == (len(record["candidate"]["items"]),) * 2
        assert np.allclose(F.sum(axis=1), 1.0)
        assert sum(record["candidate"]["alpha"]) == pytest.approx(1.0)
    # list 2 holds four items but M is 3
    assert records[1]["candidate"]["items"] == ["i4", "i5", "i6"]
    assert np.asarray(records[2]["candidate"]["F"]).tolist() == [[1.0]]


def test_duplicate_items_attend_alike_without_positions(dataset_factory, tiny_config):
    ds = dataset_factory([[1, 1, 2]], [(0, 0, Split.train)])
    config = tiny_config.model_copy(update={"ablation": AblationConfig(use_position=False)})
    params = ParameterSet.initialize(ds.n_users, ds.n_lists, ds.n_items, config)
    trace = trace_lists([0], params, config, ProfileBuilder(ds, config.N, config.M))
    F = trace.item_F[0]
    assert np.allclose(F[0], F[1])


def test_user_profile_trace(tiny_ds, tiny_config, tiny_model):
    params, builder = tiny_model
    trace = trace_users([1, 3], params, tiny_config, builder)
    records = list(attention_records(trace, tiny_ds, tiny_config))
    assert records[0]["user"] == "u1"
    # user 1 has three train lists, N = 2 keeps the latest two
    assert records[0]["profile"]["lists"] == ["l3", "l4"]
    assert sum(records[0]["profile"]["beta"]) == pytest.approx(1.0)
    assert len(records[0]["profile"]["members"]) == 2
    assert records[1]["profile"]["lists"] == ["l0"]
    assert "candidate" not in records[0]


def test_export_writes_one_line_per_example(tiny_ds, tiny_config, tiny_model, tmp_path):
    params, builder = tiny_model
    trace = trace_lists([0, 1, 4, 5], params, tiny_config, builder)
    path = tmp_path / "attention.jsonl"
    assert export_attention(trace, path, tiny_ds, tiny_config) == 4
    assert len(read_records(path)) == 4

    stream = io.StringIO()
    export_attention(trace, stream, tiny_ds, tiny_config)
    assert stream.getvalue().count("\n") == 4


def test_diagonal_contrast():
    diag, off = diagonal_contrast(np.array([[0.8, 0.2], [0.4, 0.6]]))
    assert diag == pytest.approx(0.7)
    assert off == pytest.approx(0.3)
    assert diagonal_contrast(np.array([[1.0]])) == (1.0, 0.0)
