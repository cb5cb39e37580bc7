import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from efc.data import (
    CsvSchema,
    LabeledDataset,
    SchemaError,
    SyntheticBlobSpec,
    fit_normalization,
    generate_blobs,
    load_csv,
    make_plan,
    normalize,
    split_tasks,
    task_sizes,
    write_csv,
)


def test_zero_std_gives_class_means():
    train, _ = generate_blobs(SyntheticBlobSpec(num_classes=3, input_dim=4, std=0.0, train_per_class=5))
    for c in range(3):
        rows = train.x[train.y == c]
        assert np.all(rows == rows[0])


def test_well_separated_pair_is_linearly_separable():
    train, test = generate_blobs(SyntheticBlobSpec(num_classes=2, input_dim=8, mean_scale=5.0, std=0.5, seed=1))
    design = np.hstack([train.x, np.ones((len(train), 1))])
    coef = np.linalg.lstsq(design, 2.0 * train.y - 1, rcond=None)[0]
    pred = (np.hstack([test.x, np.ones((len(test), 1))]) @ coef > 0).astype(int)
    assert np.mean(pred == test.y) >= 0.99


def test_same_seed_same_data():
    a = generate_blobs(SyntheticBlobSpec(seed=3))
    b = generate_blobs(SyntheticBlobSpec(seed=3))
    c = generate_blobs(SyntheticBlobSpec(seed=4))
    assert a[0].x.tobytes() == b[0].x.tobytes() and a[1].x.tobytes() == b[1].x.tobytes()
    assert not np.array_equal(a[0].x, c[0].x)


def test_train_and_eval_differ():
    train, test = generate_blobs(SyntheticBlobSpec(num_classes=2, train_per_class=5, eval_per_class=5))
    assert not np.array_equal(train.x, test.x)
    assert (train.split, test.split) == ("train", "eval")


def test_invalid_spec():
    with pytest.raises(ValueError):
        generate_blobs(SyntheticBlobSpec(num_classes=0))


def test_csv_single_row(tmp_path):
    path = tmp_path / "one.csv"
    path.write_text("1.0,2.0,0\n")
    ds = load_csv(path, CsvSchema(2, 3))
    np.testing.assert_array_equal(ds.x, [[1.0, 2.0]])
    assert ds.y.tolist() == [0]


def test_csv_header(tmp_path):
    path = tmp_path / "h.csv"
    path.write_text("a,b,label\n1.0,2.0,1\n")
    assert len(load_csv(path, CsvSchema(2, 3, has_header=True))) == 1
    with pytest.raises(SchemaError, match=":1:"):
        load_csv(path, CsvSchema(2, 3))


def test_csv_errors_carry_line_numbers(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("1.0,2.0,0\n1.0,0\n")
    with pytest.raises(SchemaError, match=":2: expected 3 fields"):
        load_csv(path, CsvSchema(2, 3))
    path.write_text("1.0,2.0,0\n1.0,2.0,7\n")
    with pytest.raises(SchemaError, match=":2: label 7"):
        load_csv(path, CsvSchema(2, 3))


@pytest.mark.parametrize("header", [False, True])
def test_csv_round_trip(tmp_path, header):
    train, _ = generate_blobs(SyntheticBlobSpec(num_classes=3, input_dim=5, train_per_class=4))
    path = tmp_path / "rt.csv"
    write_csv(train, path, header=header)
    back = load_csv(path, CsvSchema(5, 3, has_header=header))
    np.testing.assert_array_equal(back.x, train.x)
    np.testing.assert_array_equal(back.y, train.y)


def test_normalization_uses_train_only():
    train, test = generate_blobs(SyntheticBlobSpec(num_classes=3, input_dim=4, mean_scale=3.0))
    stats = fit_normalization(train)
    np.testing.assert_allclose(stats.mean, train.x.mean(axis=0))
    normed = normalize(test, stats)
    np.testing.assert_allclose(normed.x, (test.x - train.x.mean(axis=0)) / train.x.std(axis=0))
    np.testing.assert_allclose(normalize(train, stats).x.std(axis=0), 1.0)


def test_cold_sizes():
    assert task_sizes(20, 5, "cold") == [4] * 5
    assert task_sizes(10, 3, "cold") == [4, 3, 3]


def test_warm_sizes():
    assert task_sizes(20, 5, "warm", 0.5) == [10, 3, 3, 2, 2]


def test_bad_step_counts():
    with pytest.raises(ValueError):
        task_sizes(3, 4, "cold")
    with pytest.raises(ValueError):
        task_sizes(10, 2, "tepid")


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 30), st.data(), st.sampled_from(["cold", "warm"]), st.integers(0, 1000))
def test_split_is_a_partition(num_classes, data, mode, seed):
    steps = data.draw(st.integers(1, num_classes))
    plan = make_plan(num_classes, steps, mode, seed)
    assert sum(plan.class_counts) == num_classes
    rng = np.random.default_rng(seed)
    y = rng.integers(0, num_classes, 200)
    ds = LabeledDataset(rng.standard_normal((200, 3)), y)
    parts = split_tasks(ds, plan)
    assert sum(len(p) for p in parts) == 200
    seen = set()
    for part, classes in zip(parts, plan.tasks):
        assert set(part.y.tolist()) <= set(classes)
        assert not seen & set(classes)
        seen |= set(classes)
    merged = np.concatenate([p.x for p in parts])
    assert sorted(map(tuple, merged)) == sorted(map(tuple, ds.x))
    np.testing.assert_array_equal(np.sort(plan.column_of), np.arange(num_classes))


def test_plan_depends_on_seed():
    assert make_plan(20, 5, "cold", 0).tasks != make_plan(20, 5, "cold", 1).tasks
    assert make_plan(20, 5, "cold", 0).tasks == make_plan(20, 5, "cold", 0).tasks


def test_split_rejects_foreign_labels():
    plan = make_plan(4, 2, "cold", 0)
    with pytest.raises(SchemaError):
        split_tasks(LabeledDataset(np.zeros((1, 2)), np.array([9])), plan)
