"""Output-perturbation defenses on probability vectors and an l1 budget calibrator.

Every transform takes a batch ``[N, K]`` (or a single ``[K]`` vector) of
probabilities and returns rows on the simplex. Zero strength is the exact
identity for each defense.
"""
from collections import namedtuple
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, UsageError

PROB_FLOOR = 1e-7
KINDS = ("none", "reverse_sigmoid", "deception", "random_noise", "topk_truncation")
STRENGTH = {"reverse_sigmoid": "beta", "deception": "strength", "random_noise": "eps", "topk_truncation": "k"}
UPPER = {"reverse_sigmoid": 1.0, "deception": 1.0, "random_noise": 1.0}

Calibrated = namedtuple("Calibrated", "config mean_l1 max_l1")


@dataclass
class DefenseConfig:
    kind: str = "none"
    beta: float = 0.0
    gamma: float = 0.5
    strength: float = 0.0
    eps: float = 0.0
    k: int = 0
    l1_budget: float = 0.6
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown defense kind {self.kind!r}")
        if self.beta < 0 or self.gamma <= 0:
            raise ConfigError("reverse_sigmoid needs beta >= 0 and gamma > 0")
        if not 0 <= self.strength <= 1:
            raise ConfigError("deception strength must lie in [0, 1]")
        if self.eps < 0:
            raise ConfigError("random_noise eps must be >= 0")
        if self.k < 0:
            raise ConfigError("topk_truncation k must be >= 1")
        if self.l1_budget < 0:
            raise ConfigError("l1_budget must be nonnegative")

    @property
    def parameter(self):
        name = STRENGTH.get(self.kind)
        return None if name is None else getattr(self, name)

    def with_parameter(self, value):
        d = asdict(self)
        d[STRENGTH[self.kind]] = value
        return DefenseConfig(**d)

    def to_dict(self):
        return asdict(self)


def _rows(p):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim not in (1, 2):
        raise UsageError(f"expected a probability vector or batch, got shape {p.shape}")
    return p


def _renormalize(r):
    return r / r.sum(axis=-1, keepdims=True)


def l1_distance(p, q):
    """Sum of absolute per-class differences; one value per row for batches."""
    p, q = _rows(p), _rows(q)
    if p.shape != q.shape:
        raise UsageError(f"shape mismatch: {p.shape} vs {q.shape}")
    return np.abs(p - q).sum(axis=-1)


def apply_reverse_sigmoid(p, beta, gamma=0.5):
    p = _rows(p)
    if beta == 0:
        return p.copy()
    pc = np.clip(p, PROB_FLOOR, 1 - PROB_FLOOR)
    z = gamma * np.log(pc / (1 - pc))
    r = p - beta * (1 / (1 + np.exp(-z)) - 0.5)
    return _renormalize(np.clip(r, PROB_FLOOR, 1.0))


def _rank_order(p):
    # descending by value, lower index first among ties
    return np.argsort(-p, axis=-1, kind="stable")


def apply_deception(p, strength):
    """Swap the non-top probabilities into reversed rank order, blended by ``strength``.

    The top class keeps its value; the runner-up receives the smallest
    remaining value, the next one the second smallest, and so on.
    """
    p = _rows(p)
    if strength == 0:
        return p.copy()
    flat = p.reshape(-1, p.shape[-1])
    order = _rank_order(flat)
    d = np.empty_like(flat)
    rows = np.arange(len(flat))[:, None]
    vals = np.take_along_axis(flat, order, axis=1)
    rest = order[:, 1:]
    d[rows[:, 0], order[:, 0]] = vals[:, 0]
    d[rows, rest] = vals[:, 1:][:, ::-1]
    q = _renormalize((1 - strength) * flat + strength * d)
    return q.reshape(p.shape)


def apply_random_noise(p, eps, rng):
    """Add uniform noise in ``[-eps, eps]``, clip at the floor and renormalize.

    ``rng`` is a numpy Generator, or a pre-drawn array of unit draws in
    ``[-1, 1]`` with the shape of ``p`` (used to hold the noise fixed
    while a calibrator varies ``eps``).
    """
    p = _rows(p)
    if eps == 0:
        return p.copy()
    u = rng if isinstance(rng, np.ndarray) else rng.uniform(-1.0, 1.0, size=p.shape)
    return _renormalize(np.clip(p + eps * u, PROB_FLOOR, 1.0))


def truncate_topk(p, k):
    p = _rows(p)
    n_cls = p.shape[-1]
    if not 1 <= k <= n_cls:
        raise UsageError(f"k must lie in [1, {n_cls}], got {k}")
    if k == n_cls:
        return p.copy()
    flat = p.reshape(-1, n_cls)
    drop = _rank_order(flat)[:, k:]
    out = flat.copy()
    np.put_along_axis(out, drop, 0.0, axis=1)
    return _renormalize(out).reshape(p.shape)


def apply_defense(config, p, rng=None):
    """Dispatch on ``config.kind``; ``rng`` is only consumed by random_noise."""
    if config.kind == "none":
        return _rows(p).copy()
    if config.kind == "reverse_sigmoid":
        return apply_reverse_sigmoid(p, config.beta, config.gamma)
    if config.kind == "deception":
        return apply_deception(p, config.strength)
    if config.kind == "random_noise":
        if rng is None:
            rng = np.random.default_rng(config.seed)
        return apply_random_noise(p, config.eps, rng)
    k = config.k or _rows(p).shape[-1]
    return truncate_topk(p, k)


def _clean_probs(victim, heldout):
    if callable(getattr(victim, "predict_proba", None)):
        return np.asarray(victim.predict_proba(heldout), dtype=np.float64)
    if callable(victim):
        return np.asarray(victim(heldout), dtype=np.float64)
    return _rows(victim)


def calibrate_to_budget(defense_kind, victim, heldout_inputs, l1_budget=0.6, gamma=0.5, seed=0, iters=40):
    """Strongest defense parameter whose mean held-out l1 stays within ``l1_budget``.

    ``victim`` is a model, a callable returning probabilities, or an array
    of clean probabilities. Continuous parameters are bisected; top-k scans
    k downwards. Reverse sigmoid additionally rejects any beta that flips an
    argmax on the held-out set. Returns ``Calibrated(config, mean_l1, max_l1)``.
    """
    if defense_kind not in KINDS:
        raise ConfigError(f"unknown defense kind {defense_kind!r}")
    if l1_budget < 0:
        raise ConfigError("l1_budget must be nonnegative")
    p = _clean_probs(victim, heldout_inputs)
    if p.ndim != 2 or len(p) == 0:
        raise UsageError("calibration needs a nonempty held-out set")
    base = DefenseConfig(kind=defense_kind, gamma=gamma, l1_budget=l1_budget, seed=seed)
    if defense_kind == "none" or l1_budget == 0:
        return Calibrated(DefenseConfig(kind="none", l1_budget=l1_budget, seed=seed), 0.0, 0.0)
    top = p.argmax(axis=1)
    draws = np.random.default_rng(seed).uniform(-1.0, 1.0, size=p.shape)

    def measure(value):
        cfg = base.with_parameter(value)
        q = apply_random_noise(p, value, draws) if defense_kind == "random_noise" else apply_defense(cfg, p)
        d = l1_distance(p, q)
        ok = d.mean() <= l1_budget
        if defense_kind == "reverse_sigmoid":
            ok = ok and np.array_equal(q.argmax(axis=1), top)
        return ok, cfg, d

    if defense_kind == "topk_truncation":
        best = None
        for k in range(p.shape[1], 0, -1):
            ok, cfg, d = measure(k)
            if not ok:
                break
            best = (cfg, d)
        cfg, d = best
        return Calibrated(cfg, float(d.mean()), float(d.max()))

    hi = UPPER[defense_kind]
    ok, cfg, d = measure(hi)
    if ok:
        return Calibrated(cfg, float(d.mean()), float(d.max()))
    lo_val, best = 0.0, measure(0.0)
    for _ in range(iters):
        mid = 0.5 * (lo_val + hi)
        res = measure(mid)
        if res[0]:
            lo_val, best = mid, res
        else:
            hi = mid
    _, cfg, d = best
    return Calibrated(cfg, float(d.mean()), float(d.max()))
