import struct
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedprune.data import (
    Dataset,
    PartitionPlan,
    export_csv,
    generate_synthetic,
    label_entropy,
    load_idx,
    partition,
    partition_indices,
    write_idx,
)
from fedprune.errors import FormatError, InputError
from fedprune.nn import Batch, backward, evaluate, init_params, mlp, sgd_step


def test_synthetic_is_deterministic_and_balanced():
    a = generate_synthetic(103, 5, 4, seed=7)
    b = generate_synthetic(103, 5, 4, seed=7)
    assert np.array_equal(a.inputs, b.inputs) and np.array_equal(a.labels, b.labels)
    counts = np.bincount(a.labels, minlength=4)
    assert counts.max() - counts.min() <= 1
    assert not np.array_equal(a.inputs, generate_synthetic(103, 5, 4, seed=8).inputs)


def test_synthetic_image_shape():
    ds = generate_synthetic(10, 12, 2, seed=0, image_shape=(3, 2, 2))
    assert ds.inputs.shape == (10, 3, 2, 2)
    with pytest.raises(InputError):
        generate_synthetic(10, 12, 2, seed=0, image_shape=(5, 5))


def test_two_separated_classes_are_learned_quickly():
    ds = generate_synthetic(200, 2, 2, seed=3, spread=0.3, separation=3.0)
    spec = mlp(2, [8], 2)
    params = init_params(spec, 0)
    batch = Batch(ds.inputs, ds.labels)
    for _ in range(50):
        grads = backward(spec, params, batch)
        params = sgd_step(params, grads, 0.5)
    acc, _ = evaluate(spec, params, ds)
    assert acc > 0.95


def test_dataset_rejects_bad_labels():
    with pytest.raises(InputError):
        Dataset(np.zeros((2, 3)), np.array([0, 3]), 3)
    with pytest.raises(InputError):
        Dataset(np.zeros((2, 3)), np.array([0]), 3)


def test_export_csv(tmp_path):
    ds = generate_synthetic(4, 3, 2, seed=0)
    export_csv(ds, tmp_path / "d.csv")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0] == "x0,x1,x2,label"
    assert len(lines) == 5
    assert float(lines[1].split(",")[0]) == ds.inputs[0, 0]


# ---------------------------------------------------------------------------
# IDX


def _idx_pair(tmp_path, images, labels):
    write_idx(tmp_path / "img", images)
    write_idx(tmp_path / "lab", labels)
    return tmp_path / "img", tmp_path / "lab"


def test_idx_all_zero_file(tmp_path):
    paths = _idx_pair(tmp_path, np.zeros((3, 28, 28)), np.zeros(3))
    ds = load_idx(*paths)
    assert ds.inputs.shape == (3, 1, 28, 28)
    assert ds.inputs.dtype == np.float64 and not ds.inputs.any()
    assert ds.labels.tolist() == [0, 0, 0]


def test_idx_values_scaled_to_unit_interval(tmp_path):
    img = np.array([[[0, 255], [51, 102]]])
    ds = load_idx(*_idx_pair(tmp_path, img, [7]), classes=10)
    assert ds.inputs[0, 0].tolist() == [[0.0, 1.0], [0.2, 0.4]]
    assert ds.classes == 10


def test_idx_header_is_big_endian(tmp_path):
    write_idx(tmp_path / "img", np.zeros((2, 3, 4)))
    raw = (tmp_path / "img").read_bytes()
    assert struct.unpack(">4I", raw[:16]) == (0x803, 2, 3, 4)


def test_idx_truncated_payload(tmp_path):
    img, lab = _idx_pair(tmp_path, np.ones((2, 4, 4)), [1, 2])
    img.write_bytes(img.read_bytes()[:-5])
    with pytest.raises(FormatError) as err:
        load_idx(img, lab)
    assert err.value.offset == 16 + 27


def test_idx_bad_magic(tmp_path):
    img, lab = _idx_pair(tmp_path, np.ones((2, 4, 4)), [1, 2])
    with pytest.raises(FormatError) as err:
        load_idx(lab, img)  # swapped
    assert err.value.offset == 0


def test_idx_short_header_and_count_mismatch(tmp_path):
    (tmp_path / "tiny").write_bytes(b"\x00\x00")
    with pytest.raises(FormatError):
        load_idx(tmp_path / "tiny", tmp_path / "tiny")
    img, lab = _idx_pair(tmp_path, np.ones((2, 4, 4)), [1, 2, 3])
    with pytest.raises(FormatError):
        load_idx(img, lab)


# ---------------------------------------------------------------------------
# partitioning


def _flatten(parts):
    return np.concatenate([np.concatenate([tr, te]) for tr, te in parts])


def test_single_client_iid_gets_everything():
    ds = generate_synthetic(50, 3, 4, seed=0)
    parts = partition_indices(ds, PartitionPlan("iid", 1))
    assert sorted(_flatten(parts).tolist()) == list(range(50))
    tr, te = parts[0]
    assert len(te) == 10 and len(tr) == 40


def test_skewed_clients_hold_at_most_five_classes():
    ds = generate_synthetic(2000, 3, 10, seed=1)
    for (tr, te) in partition(ds, PartitionPlan("skewed_niid", 20, seed=4)):
        assert len(set(tr.labels) | set(te.labels)) <= 5


@settings(max_examples=40, deadline=None)
@given(
    n=st.integers(40, 400),
    classes=st.integers(2, 10),
    clients=st.integers(1, 10),
    scheme=st.sampled_from(["iid", "skewed_niid"]),
    cpc=st.integers(1, 6),
    seed=st.integers(0, 10_000),
)
def test_partition_is_an_exact_multiset_split(n, classes, clients, scheme, cpc, seed):
    ds = generate_synthetic(n, 2, classes, seed=seed)
    try:
        parts = partition_indices(ds, PartitionPlan(scheme, clients, classes_per_client=cpc, seed=seed))
    except InputError:
        return  # infeasible ownership draw is reported, not silently patched
    flat = _flatten(parts)
    assert sorted(flat.tolist()) == list(range(n))
    union = Counter(ds.labels[flat].tolist())
    assert union == Counter(ds.labels.tolist())
    for tr, te in parts:
        assert len(tr) >= 1 and len(te) >= 1
        assert not set(tr) & set(te)


def test_skew_lowers_label_entropy():
    ds = generate_synthetic(3000, 3, 10, seed=2)
    iid = partition(ds, PartitionPlan("iid", 20, seed=0))
    skew = partition(ds, PartitionPlan("skewed_niid", 20, classes_per_client=2, seed=0))
    mean_h = lambda parts: np.mean([label_entropy(tr) for tr, _ in parts])
    assert mean_h(skew) < mean_h(iid) - 0.5
    assert mean_h(skew) <= np.log(2) + 1e-12


def test_partition_is_deterministic_per_seed():
    ds = generate_synthetic(300, 3, 6, seed=0)
    plan = PartitionPlan("skewed_niid", 8, classes_per_client=3, seed=11)
    a, b = partition_indices(ds, plan), partition_indices(ds, plan)
    assert all(np.array_equal(x[0], y[0]) and np.array_equal(x[1], y[1]) for x, y in zip(a, b))


def test_partition_plan_validation():
    with pytest.raises(InputError):
        PartitionPlan("dirichlet", 3)
    with pytest.raises(InputError):
        PartitionPlan("iid", 0)
    with pytest.raises(InputError):
        PartitionPlan("iid", 2, train_fraction=1.0)
    with pytest.raises(InputError):
        partition_indices(generate_synthetic(5, 2, 2, seed=0), PartitionPlan("iid", 10))
