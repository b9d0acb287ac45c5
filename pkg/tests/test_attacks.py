import numpy as np
import pytest
from hypothesis import given, strategies as st

from divqat.attacks import (AttackBudget, DataFreeConfig, TransferSet, VictimOracle, datafree_attack,
                            evaluate_extraction, knockoff_attack)
from divqat.datasets import DistributionRelation, TaskSpec, adversary_variant, generate
from divqat.defenses import DefenseConfig
from divqat.errors import BudgetExhausted, ConfigError, UsageError
from divqat.nn import build_model
from divqat.optim import SgdConfig
from divqat.training import TrainConfig, train_float

TASK = TaskSpec(n_train=2000, n_test=500, seed=5)


class CountingOracle:
    """Wraps an oracle and records every batch the attack submits."""

    def __init__(self, inner):
        self.inner = inner
        self.sent = []
        self.input_shape = inner.input_shape
        self.num_classes = inner.num_classes

    @property
    def remaining(self):
        return self.inner.remaining

    @property
    def query_count(self):
        return self.inner.query_count

    def predict(self, x):
        self.sent.append(len(x))
        return self.inner.predict(x)


# oracle

def test_oracle_counts_and_refuses(trained_float, small_task):
    o = VictimOracle(trained_float, budget=250)
    p = o.predict(small_task.test.x[:100])
    assert o.query_count == 100 and p.shape == (100, 10)
    np.testing.assert_allclose(p.sum(axis=1), 1, atol=1e-6)
    o.predict(small_task.test.x[:150])
    with pytest.raises(BudgetExhausted):
        o.predict(small_task.test.x[:1])
    assert o.query_count == 250 and o.remaining == 0


@given(st.lists(st.integers(0, 40), max_size=12), st.integers(0, 200))
def test_oracle_accounting_property(trained_float, small_task, sizes, budget):
    o = VictimOracle(trained_float, budget=budget)
    served = 0
    for n in sizes:
        try:
            o.predict(small_task.test.x[:n])
            served += n
        except BudgetExhausted:
            pass
        assert o.query_count == served <= budget
    assert sum(o.batch_sizes) == o.query_count


def test_oracle_applies_defense(trained_float, small_task):
    x = small_task.test.x[:50]
    plain = VictimOracle(trained_float).predict(x)
    noisy = VictimOracle(trained_float, DefenseConfig(kind="random_noise", eps=0.2), seed=1).predict(x)
    assert not np.allclose(plain, noisy)
    np.testing.assert_allclose(noisy.sum(axis=1), 1, atol=1e-6)


def test_budget_validation():
    with pytest.raises(ConfigError):
        AttackBudget(0)
    with pytest.raises(ConfigError):
        DataFreeConfig(directions=0)


# knockoff

def test_budget_zero_gives_chance_student(trained_float, small_task):
    o = VictimOracle(trained_float, budget=0)
    res = knockoff_attack(o, small_task.train, "mini_conv", 0)
    err, _ = evaluate_extraction(trained_float, res.student, small_task.test)
    assert o.query_count == 0 and len(res.transfer) == 0
    assert abs(err - 0.9) <= 0.05


def test_knockoff_accounting_and_truncation(trained_float):
    sur = adversary_variant(TASK, "out_of_distribution", seed=0, n=600)
    inner = VictimOracle(trained_float, budget=250)
    o = CountingOracle(inner)
    res = knockoff_attack(o, sur, "mlp", 500, TrainConfig(epochs=1))
    assert res.truncated
    assert o.sent == [100, 100, 50]
    assert sum(o.sent) == inner.query_count == len(res.transfer) == 250
    assert inner.query_count <= 250


def test_knockoff_deterministic(trained_float):
    sur = adversary_variant(TASK, "out_of_distribution", seed=0, n=300)
    runs = [knockoff_attack(VictimOracle(trained_float), sur, "mini_conv", 300, TrainConfig(epochs=2), seed=3)
            for _ in range(2)]
    assert np.array_equal(runs[0].transfer.inputs, runs[1].transfer.inputs)
    assert np.array_equal(runs[0].transfer.labels, runs[1].transfer.labels)
    assert runs[0].student.checksum() == runs[1].student.checksum()


def test_transfer_set_round_trip(tmp_path, rng):
    ts = TransferSet((1, 2, 2), 3)
    ts.add(rng.random((4, 1, 2, 2)).astype(np.float32), np.full((4, 3), 1 / 3))
    for fmt in ("binary", "json"):
        path = tmp_path / f"t.{fmt}"
        ts.save(path, fmt)
        back = TransferSet.load(path)
        assert back.inputs.tobytes() == ts.inputs.tobytes() and back.labels.tobytes() == ts.labels.tobytes()
    with pytest.raises(UsageError):
        ts.add(np.zeros((2, 1, 2, 2)), np.zeros((3, 3)))


def test_self_distillation():
    # a cleaner task: on the noisy default task two students agree on
    # training inputs but their boundaries differ in the overlap regions
    ds = generate(TaskSpec(n_train=2000, n_test=500, seed=5, noise=0.6))
    victim = build_model("mini_conv", ds.input_shape, ds.num_classes, seed=0)
    train_float(victim, ds, TrainConfig(epochs=30, optimizer=SgdConfig(learning_rate=0.05)), seed=0)
    res = knockoff_attack(VictimOracle(victim), ds.train, "mini_conv", len(ds.train.x), seed=0)
    _, dis = evaluate_extraction(victim, res.student, ds.test)
    assert dis <= 0.05


@pytest.fixture(scope="module")
def budget_curve(trained_float, small_task):
    out = {}
    for seed in range(3):
        sur = adversary_variant(TASK, "out_of_distribution", seed=seed, n=5000)
        for b in (100, 1000, 5000):
            res = knockoff_attack(VictimOracle(trained_float, budget=b), sur, "mini_conv", b, seed=seed)
            out[seed, b] = evaluate_extraction(trained_float, res.student, small_task.test)[0]
    return out


def test_error_non_increasing_in_budget(budget_curve):
    med = [np.median([budget_curve[s, b] for s in range(3)]) for b in (100, 1000, 5000)]
    assert med[0] >= med[1] >= med[2]


def test_ood_surrogate_harder_than_near(trained_float, small_task, budget_curve):
    near = []
    for seed in range(3):
        sur = adversary_variant(TASK, DistributionRelation("near_distribution", 2.0), seed=seed, n=1000)
        res = knockoff_attack(VictimOracle(trained_float), sur, "mini_conv", 1000, seed=seed)
        near.append(evaluate_extraction(trained_float, res.student, small_task.test)[0])
    assert np.median([budget_curve[s, 1000] for s in range(3)]) > np.median(near)


# data-free

def test_datafree_truncated_below_one_round(trained_float):
    cfg = DataFreeConfig(rounds=3, batch_size=10)
    o = VictimOracle(trained_float)
    res = datafree_attack(o, "generator", "mini_conv", cfg.round_cost() - 1, cfg)
    assert res.truncated and o.query_count == 0


def test_datafree_accounting(trained_float):
    cfg = DataFreeConfig(rounds=4, batch_size=10, train=TrainConfig(epochs=1))
    inner = VictimOracle(trained_float, budget=10_000)
    o = CountingOracle(inner)
    res = datafree_attack(o, "generator", "mlp", 3 * cfg.round_cost() + 5, cfg)
    assert res.truncated
    assert sum(o.sent) == inner.query_count == 3 * cfg.round_cost()
    assert len(res.transfer) == 3 * cfg.student_steps * cfg.batch_size


def test_datafree_frozen_generator_beats_chance(trained_float):
    cfg = DataFreeConfig(rounds=40, generator_lr=0.0)
    o = VictimOracle(trained_float)
    res = datafree_attack(o, "generator", "mini_conv", 40 * cfg.round_cost(), cfg, seed=2)
    x, probs = res.transfer.inputs, res.transfer.labels
    agree = np.mean(res.student.predict_logits(x).argmax(1) == probs.argmax(1))
    assert agree > 0.1 + 0.1


# evaluate_extraction

def test_identical_student_no_disagreement(trained_float, small_task):
    _, dis = evaluate_extraction(trained_float, trained_float, small_task.test)
    assert dis == 0


def test_constant_student_balanced():
    y = np.repeat(np.arange(10), 10)
    const = np.zeros((100, 10))
    const[:, 3] = 1
    err, _ = evaluate_extraction(const, const, (np.zeros((100, 1)), y))
    assert err == pytest.approx(0.9)


@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4), st.integers(0, 4)), min_size=20, max_size=20))
def test_matches_brute_force(rows):
    y = np.array([r[0] for r in rows])
    s = np.eye(5)[[r[1] for r in rows]]
    v = np.eye(5)[[r[2] for r in rows]]
    err, dis = evaluate_extraction(v, s, (np.zeros((20, 1)), y))
    assert err == sum(r[1] != r[0] for r in rows) / 20
    assert dis == sum(r[1] != r[2] for r in rows) / 20


def test_empty_test_set():
    with pytest.raises(UsageError):
        evaluate_extraction(np.zeros((0, 3)), np.zeros((0, 3)), (np.zeros((0, 1)), np.zeros(0)))
