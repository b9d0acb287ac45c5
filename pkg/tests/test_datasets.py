import numpy as np
import pytest

from divqat import containers
from divqat.datasets import (DistributionRelation, TaskSpec, adversary_variant, export_csv, fraction_outside_regions,
                             generate, import_external, load_dataset, save_dataset, write_idx)
from divqat.errors import ConfigError, DatasetFormatError
from divqat.training import TrainConfig, error_rate, train_float


def keys(x):
    return {row.tobytes() for row in np.asarray(x).reshape(len(x), -1)}


@pytest.fixture(scope="module")
def task():
    return TaskSpec(n_train=1000, n_test=400, seed=2)


@pytest.fixture(scope="module")
def ds(task):
    return generate(task)


def test_determinism_bytes(task, tmp_path):
    a, b = tmp_path / "a.dqds", tmp_path / "b.dqds"
    save_dataset(generate(task), a)
    save_dataset(generate(task), b)
    assert a.read_bytes() == b.read_bytes()


@pytest.mark.parametrize("kind,shape", [("textured_patches", (1, 8, 8)), ("gaussian_blobs", (12,)),
                                        ("ring_patterns", (2,))])
def test_balance_range_disjoint(kind, shape):
    d = generate(TaskSpec(kind=kind, input_shape=shape, n_train=1000, n_test=333))
    assert np.all(np.abs(d.class_counts("train") - 100) <= 1)
    assert np.all(np.abs(d.class_counts("test") - 33.3) <= 1)
    for s in (d.train, d.test):
        assert s.x.min() >= 0 and s.x.max() <= 1
    assert not keys(d.train.x) & keys(d.test.x)


def test_far_blobs_linear_probe():
    from divqat.nn import Dense, Model

    d = generate(TaskSpec(kind="gaussian_blobs", num_classes=2, input_shape=(6,), n_train=400, n_test=400,
                          separation=12.0, noise=0.5))
    probe = Model([Dense(6, 2)], (6,))
    train_float(probe, d, TrainConfig(epochs=20), seed=0)
    assert error_rate(probe, d.test.x, d.test.y) <= 0.02


def test_spec_validation():
    with pytest.raises(ConfigError):
        TaskSpec(num_classes=1)
    with pytest.raises(ConfigError):
        TaskSpec(kind="spirals")
    with pytest.raises(ConfigError):
        TaskSpec(kind="ring_patterns", input_shape=(3,))
    with pytest.raises(ConfigError):
        DistributionRelation("far")


@pytest.mark.parametrize("relation", ["in_distribution", "near_distribution", "out_of_distribution"])
def test_variants_never_reuse_victim_samples(task, ds, relation):
    sur = adversary_variant(task, relation, seed=4, n=800)
    assert sur.x.shape == (800,) + task.input_shape
    assert not keys(sur.x) & (keys(ds.train.x) | keys(ds.test.x))
    assert sur.x.min() >= 0 and sur.x.max() <= 1


def test_ood_outside_regions(task):
    sur = adversary_variant(task, "out_of_distribution", seed=1, n=2000)
    assert fraction_outside_regions(task, sur.x) >= 0.99
    assert fraction_outside_regions(task, generate(task).test.x) < 0.5


def test_near_distribution_accuracy_between(small_task, trained_float):
    task = TaskSpec(n_train=2000, n_test=500, seed=5)
    assert error_rate(trained_float, small_task.test.x, small_task.test.y) < 0.2
    m = trained_float
    acc = {}
    for rel in ("in_distribution", "near_distribution", "out_of_distribution"):
        sur = adversary_variant(task, DistributionRelation(rel, 2.0), seed=1, n=3000)
        acc[rel] = 1 - error_rate(m, sur.x, sur.reference_labels)
    assert acc["out_of_distribution"] < acc["near_distribution"] < acc["in_distribution"]


# persistence and import

@pytest.mark.parametrize("fmt", ["binary", "json"])
def test_container_round_trip(ds, tmp_path, fmt):
    path = tmp_path / f"d.{fmt}"
    save_dataset(ds, path, fmt)
    back = load_dataset(path)
    assert np.array_equal(back.train.x, ds.train.x) and np.array_equal(back.test.y, ds.test.y)
    assert back.input_shape == ds.input_shape


def test_binary_and_json_agree(tmp_path):
    arrays = {"w": np.arange(6, dtype=np.float32).reshape(2, 3) / 7, "y": np.array([1, -2], dtype=np.int32)}
    b = containers.loads_binary(containers.dumps_binary("checkpoint", {"a": 1}, arrays))
    j = containers.loads_json(containers.dumps_json("checkpoint", {"a": 1}, arrays))
    for name in arrays:
        assert b[1][name].tobytes() == j[1][name].tobytes() == arrays[name].tobytes()


def test_container_kind_and_corruption(ds, tmp_path):
    path = tmp_path / "d.bin"
    save_dataset(ds, path, "binary")
    with pytest.raises(DatasetFormatError):
        containers.load(path, "checkpoint")
    blob = path.read_bytes()
    (tmp_path / "cut.bin").write_bytes(blob[:len(blob) // 2])
    with pytest.raises(DatasetFormatError):
        load_dataset(tmp_path / "cut.bin")


def test_csv_four_rows(tmp_path):
    p = tmp_path / "small.csv"
    p.write_text("a,b,label\n0.1,0.2,0\n0.3,0.4,1\n0.5,0.6,0\n0.7,0.8,1\n")
    d = import_external(p)
    assert len(d.train) == 4 and d.input_shape == (2,) and d.num_classes == 2


def test_csv_round_trip(ds, tmp_path):
    p = tmp_path / "d.csv"
    export_csv(ds, p)
    back = import_external(p)
    assert np.array_equal(back.train.x, ds.train.x) and np.array_equal(back.test.x, ds.test.x)
    assert np.array_equal(back.train.y, ds.train.y) and back.input_shape == ds.input_shape


def test_csv_malformed_line(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("a,b,label\n0.1,0.2,0\n0.3,oops,1\n")
    with pytest.raises(DatasetFormatError, match="line 3"):
        import_external(p)
    p.write_text("a,b,label\n0.1,0.2,0\n0.3,1\n")
    with pytest.raises(DatasetFormatError, match="line 3"):
        import_external(p)


def test_idx_import_and_truncation(tmp_path):
    imgs = (np.arange(2 * 3 * 3) * 10 % 256).astype(np.uint8).reshape(2, 3, 3)
    write_idx(tmp_path / "x.idx", imgs)
    write_idx(tmp_path / "y.idx", np.array([0, 1], dtype=np.uint8))
    d = import_external(tmp_path / "x.idx", "idx", labels_path=tmp_path / "y.idx")
    assert d.input_shape == (1, 3, 3)
    np.testing.assert_allclose(d.train.x[0, 0], imgs[0] / 255.0, rtol=1e-6)
    blob = (tmp_path / "x.idx").read_bytes()
    (tmp_path / "t.idx").write_bytes(blob[:-4])
    with pytest.raises(DatasetFormatError, match="byte offset"):
        import_external(tmp_path / "t.idx", "idx", labels_path=tmp_path / "y.idx")
