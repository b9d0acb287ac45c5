"""End-to-end acceptance criteria on the default desk task.

Each test carries a ``criterion`` mark; the terminal summary prints one
PASS/FAIL line per criterion. The expensive experiments share one cache,
so victims, selections and surrogates are trained once.
"""
import math
import zlib

import numpy as np
import pytest

from divqat import defenses as D
from divqat import harness as H
from divqat import losses
from divqat import tensor as T
from divqat.attacks import VictimOracle, evaluate_extraction
from divqat.gradcheck import finite_difference_check
from divqat.nn import Conv2d, Dense, Flatten, Model, ReLU, Sigmoid, build_model
from divqat.quant import FakeQuantState, Observer, QuantSpec, compute_qparams, fake_quantize, ste_surrogate

SEEDS = [0, 1, 2]
METHODS = [{"kind": "qat"}, {"kind": "divqat"}]
DEFENSES = [{"kind": "none"}, {"kind": "reverse_sigmoid"}, {"kind": "deception"}]


@pytest.fixture(scope="module")
def cache():
    return H.SharedCache()


@pytest.fixture(scope="module")
def knockoff_run(cache, tmp_path_factory):
    out = tmp_path_factory.mktemp("knockoff")
    cfg = {"version": 1, "quant_method": METHODS, "defense": DEFENSES, "attack": {"kind": "knockoff"},
           "seeds": SEEDS}
    reps = H.run_experiment(cfg, out_dir=out, cache=cache)
    return reps, out


@pytest.fixture(scope="module")
def datafree_run(cache, tmp_path_factory):
    out = tmp_path_factory.mktemp("datafree")
    cfg = {"version": 1, "quant_method": METHODS, "attack": {"kind": "datafree"}, "seeds": SEEDS}
    reps = H.run_experiment(cfg, out_dir=out, cache=cache)
    return reps, out


def pick(reps, quant, defense="none"):
    rows = [r for r in reps if r.quant_method == quant and r.defense == defense]
    assert len(rows) == len(SEEDS) and all(r.status == "ok" for r in rows), [r.error for r in rows]
    return rows


def median(rows, field):
    return float(np.median([getattr(r, field) for r in rows]))


def gap(reps, defense="none"):
    return median(pick(reps, "divqat-sel", defense), "adversary_error") - \
        median(pick(reps, "qat", defense), "adversary_error")


# 1

@pytest.mark.criterion(1, "alpha=0 DivQAT is bit-identical to QAT at every epoch")
def test_alpha_zero_reduction(cache):
    pipe = H.Pipeline(H.parse_config({"version": 1, "seeds": [0]}), 0, cache)
    qat, qat_hist = pipe.quantized(None)
    div, div_hist = pipe.quantized(0.0)
    assert len(qat_hist) == len(div_hist) > 0
    assert [r["checksum"] for r in qat_hist] == [r["checksum"] for r in div_hist]
    for a, b in zip(qat.parameters(), div.parameters()):
        assert a.data.tobytes() == b.data.tobytes()


# 2

def _check(targets, fn, n=60):
    rep = finite_difference_check(targets, fn, epsilon=1e-6, tolerance=1e-3, n_coords=n)
    assert rep.checked >= 50 and rep.passed, rep.failures[:3]


LAYERS = {
    "dense": (lambda r: [Dense(6, 8, rng=r)], (4, 6)),
    "conv2d": (lambda r: [Conv2d(2, 3, 3, 1, rng=r), Flatten()], (2, 2, 5, 5)),
    "relu": (lambda r: [ReLU()], (6, 10)),
    "sigmoid": (lambda r: [Sigmoid()], (6, 10)),
    "flatten": (lambda r: [Flatten()], (3, 2, 3, 4)),
}


@pytest.mark.criterion(2, "finite differences agree on every layer, STE, CE, KL and the DivQAT loss")
@pytest.mark.parametrize("name", list(LAYERS))
def test_gradcheck_layers(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    make, shape = LAYERS[name]
    model = Model(make(rng), shape[1:]).astype(np.float64)
    x = rng.normal(size=shape)
    if name == "relu":
        x = np.where(np.abs(x) < 0.05, 0.3, x)  # away from the kink
    x = T.Tensor(x, requires_grad=True)
    w = rng.normal(size=model(x).shape)
    _check(list(model.named_parameters()) + [("input", x)], lambda _: T.tsum(model(x) * w))


@pytest.mark.criterion(2, "finite differences agree on every layer, STE, CE, KL and the DivQAT loss")
@pytest.mark.parametrize("which", ["ste", "cross_entropy", "kl_divergence", "divqat_loss"])
def test_gradcheck_losses(which):
    rng = np.random.default_rng(7)
    if which == "ste":
        state = FakeQuantState(np.float32(0.1), 0, -16, 15)
        x = T.Tensor(np.linspace(-2.33, 2.27, 60), requires_grad=True)
        w = np.linspace(1, 2, 60)
        with ste_surrogate():
            _check([("x", x)], lambda _: T.tsum(fake_quantize(x, state) * w))
        return
    z = T.Tensor(rng.normal(size=(6, 10)), requires_grad=True)
    y = rng.integers(0, 10, 6)
    p_large = rng.dirichlet(np.ones(10), 6)
    fn = {
        "cross_entropy": lambda _: losses.cross_entropy(z, y),
        "kl_divergence": lambda _: losses.kl_divergence(z, p_large),
        "divqat_loss": lambda _: losses.divqat_loss(y, z, p_large, 0.7)[0],
    }[which]
    _check([("z", z)], fn)


# 3

@pytest.mark.criterion(3, "median final KL(f_Q||f_L) is non-decreasing over alpha {0, 0.1, 0.5, 1.0}")
def test_kl_grows_with_alpha(cache):
    cfg = {"version": 1, "quant_method": {"kind": "divqat", "alpha_grid": [0, 0.1, 0.5, 1.0]}, "seeds": SEEDS}
    _, series = H.sweep_alpha(cfg, cache)
    kl = series["kl_train"]
    print("alpha", series["alpha"], "median KL", [round(v, 4) for v in kl])
    assert all(a <= b for a, b in zip(kl, kl[1:]))


# 4

@pytest.mark.criterion(4, "knockoff: DivQAT adversary error >= QAT + 2 points, defender cost <= 5 points")
def test_knockoff_direction(knockoff_run):
    reps, _ = knockoff_run
    qat, div = pick(reps, "qat"), pick(reps, "divqat-sel")
    adv_gap = gap(reps)
    def_gap = median(div, "defender_error") - median(qat, "defender_error")
    print(f"knockoff adversary gap {adv_gap:.2f}, defender gap {def_gap:.2f}")
    assert adv_gap >= 2
    assert def_gap <= 5


# 5

@pytest.mark.criterion(5, "data-free: DivQAT harms the adversary, at least as much as knockoff")
def test_datafree_direction(knockoff_run, datafree_run):
    ko, df = gap(knockoff_run[0]), gap(datafree_run[0])
    print(f"data-free gap {df:.2f}, knockoff gap {ko:.2f}")
    assert df > 0
    assert df >= ko


# 6

@pytest.mark.criterion(6, "DivQAT+RS >= QAT+RS and DivQAT+DCP >= QAT+DCP in adversary error")
@pytest.mark.parametrize("defense", ["reverse_sigmoid", "deception"])
def test_defense_stacking(knockoff_run, defense):
    g = gap(knockoff_run[0], defense)
    print(f"{defense} stacking gap {g:.2f}")
    assert g >= 0


# 7

@pytest.mark.criterion(7, "every calibrated defense and selected DivQAT model has held-out l1 <= 0.6")
def test_l1_budget_compliance(knockoff_run, datafree_run):
    checked = 0
    for _, out in (knockoff_run, datafree_run):
        for path in (out / "reports.csv", out / "reports.json"):
            for row in H.load_report(path):
                if row["seed"] == "median":
                    continue
                assert row["status"] == "ok"
                if row["defense"] != "none":
                    assert row["defense_l1_mean"] <= 0.6
                    checked += 1
                if row["quant_method"] == "divqat-sel":
                    assert row["quant_l1_mean"] <= 0.6
                    checked += 1
    assert checked >= 2 * (2 * 2 + 2) * len(SEEDS)


# 8

def _invariants(x, state, bits, axis):
    y = fake_quantize(x, state)
    assert np.array_equal(fake_quantize(y, state), y)
    s = state.scale.astype(np.float64)
    if axis is not None:
        s = s.reshape((-1,) + (1,) * (x.ndim - 1))
    ulp = 2 * np.finfo(np.float32).eps * np.abs(x.astype(np.float64))
    assert np.all(np.abs(y.astype(np.float64) - x) <= s / 2 + ulp)
    rows = y if axis is not None else [y]
    assert all(len(np.unique(r)) <= 2 ** bits for r in rows)
    if np.all(state.zero_point == 0):
        assert np.all(fake_quantize(np.zeros_like(x), state) == 0)


@pytest.mark.criterion(8, "fake-quant invariants over 10k random tensors per scheme and profile")
@pytest.mark.parametrize("profile", ["server", "mobile"])
@pytest.mark.parametrize("role", ["weight", "activation"])
def test_quantization_invariants(profile, role):
    rng = np.random.default_rng(zlib.crc32(f"accept/{profile}/{role}".encode()))
    axis = 0 if (profile == "server" and role == "weight") else None
    for _ in range(10_000):
        bits = int(rng.integers(2, 9))
        shape = (int(rng.integers(1, 5)), int(rng.integers(1, 9)))
        scale = 10 ** rng.uniform(-3, 2)
        x = (rng.standard_normal(shape) * scale + rng.normal() * scale).astype(np.float32)
        ob = Observer(axis=axis)
        ob.update(x)
        _invariants(x, compute_qparams(ob, QuantSpec(bit_width=bits, profile=profile), role), bits, axis)


# 9

def _softmax_row(z):
    e = [math.exp(v - max(z)) for v in z]
    return [v / sum(e) for v in e]


@pytest.mark.criterion(9, "metrics match brute-force oracles to 1e-6 on 100 instances")
def test_metric_oracles():
    rng = np.random.default_rng(99)
    for _ in range(100):
        n, k = int(rng.integers(1, 6)), int(rng.integers(2, 7))
        z = rng.normal(0, 3, (n, k))
        y = rng.integers(0, k, n)
        p_large = rng.dirichlet(np.ones(k), n)
        q = [_softmax_row(list(row)) for row in z]
        ce = sum(-math.log(max(q[i][y[i]], 1e-7)) for i in range(n)) / n
        kl = sum(sum(q[i][j] * (math.log(max(q[i][j], 1e-7)) - math.log(max(p_large[i][j], 1e-7)))
                     for j in range(k)) for i in range(n)) / n
        assert abs(losses.cross_entropy(T.Tensor(z), y).item() - ce) <= 1e-6
        assert abs(losses.kl_divergence(T.Tensor(z), p_large).item() - kl) <= 1e-6
        l1 = D.l1_distance(np.array(q), p_large)
        for i in range(n):
            assert abs(l1[i] - sum(abs(q[i][j] - p_large[i][j]) for j in range(k))) <= 1e-6
        student, victim = rng.normal(size=(n, k)), rng.normal(size=(n, k))
        err, dis = evaluate_extraction(victim, student, (np.zeros((n, 1)), y))
        s_top = [max(range(k), key=lambda j: student[i][j]) for i in range(n)]
        v_top = [max(range(k), key=lambda j: victim[i][j]) for i in range(n)]
        assert abs(err - sum(s_top[i] != y[i] for i in range(n)) / n) <= 1e-6
        assert abs(dis - sum(s_top[i] != v_top[i] for i in range(n)) / n) <= 1e-6


# 10

SMALL = {"version": 1, "quant_method": [{"kind": "qat"}, {"kind": "divqat", "alpha": 0.5}],
         "defense": [{"kind": "reverse_sigmoid"}, {"kind": "random_noise"}],
         "attack": {"kind": "knockoff", "budget": 1000}, "seeds": [0]}


@pytest.mark.criterion(10, "probability outputs lie on the simplex; reruns give byte-identical reports")
def test_simplex_and_determinism(tmp_path, cache):
    pipe = H.Pipeline(H.parse_config({"version": 1, "seeds": [0]}), 0, cache)
    x = pipe.heldout().x
    victims = [pipe.float_model()[0], pipe.quantized(None)[0], build_model("mlp", (1, 8, 8), 10, seed=1)]
    cfgs = [D.DefenseConfig(), D.DefenseConfig(kind="reverse_sigmoid", beta=0.3),
            D.DefenseConfig(kind="deception", strength=0.7), D.DefenseConfig(kind="random_noise", eps=0.3),
            D.DefenseConfig(kind="topk_truncation", k=2)]
    for m in victims:
        p = m.predict_proba(x)
        served = [p] + [D.apply_defense(c, p, np.random.default_rng(0)) for c in cfgs]
        served += [VictimOracle(m, c, seed=3).predict(x[:200]) for c in cfgs]
        for s in served:
            assert np.all(s >= 0) and np.all(np.abs(s.sum(axis=1) - 1) <= 1e-6)
    for d in ("a", "b"):
        H.run_experiment(SMALL, out_dir=tmp_path / d)  # fresh cache each time
    for name in ("reports.csv", "reports.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


# 11

@pytest.mark.criterion(11, "query_count equals submitted batch sizes and stays within budget")
def test_query_accounting(knockoff_run, datafree_run):
    attack_budget = {"knockoff": 5000, "datafree": H.AttackModel(kind="datafree").resolved_budget()}
    n = 0
    for reps, _ in (knockoff_run, datafree_run):
        for r in reps:
            # the pipeline fails the cell if query_count != sum of batch sizes
            assert r.status == "ok"
            kind = r.attack.split("-")[0]
            assert 0 < r.query_count <= attack_budget[kind]
            n += 1
    assert n == len(SEEDS) * (len(METHODS) * len(DEFENSES) + len(METHODS))
