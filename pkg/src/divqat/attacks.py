"""Model-extraction attacks that reach the victim only through a soft-label oracle."""
from dataclasses import asdict, dataclass, field

import numpy as np

from . import containers
from . import losses
from . import tensor as T
from .defenses import DefenseConfig, apply_defense
from .errors import BudgetExhausted, ConfigError, UsageError
from .nn import build_model
from .optim import SGD, SgdConfig
from .tensor import no_grad
from .training import TrainConfig, _fit


class VictimOracle:
    """Black-box prediction API with exact query accounting.

    Only :meth:`predict` reaches the victim. A request that would push
    ``query_count`` past ``budget`` is refused whole with
    :class:`BudgetExhausted`.
    """

    def __init__(self, model, defense=None, budget=None, seed=0):
        if budget is not None and budget < 0:
            raise ConfigError("oracle budget must be nonnegative")
        defense = defense or DefenseConfig()
        rng = np.random.default_rng(seed)

        def answer(x):
            return apply_defense(defense, model.predict_proba(x), rng)

        self._answer = answer
        self.defense = defense
        self.budget = budget
        self.query_count = 0
        self.batch_sizes = []
        self.input_shape = model.input_shape
        self.num_classes = model.num_classes

    @property
    def remaining(self):
        return None if self.budget is None else self.budget - self.query_count

    def predict(self, x):
        x = np.asarray(x, dtype=np.float32)
        n = len(x)
        if self.budget is not None and self.query_count + n > self.budget:
            raise BudgetExhausted(n, self.query_count, self.budget)
        self.query_count += n
        self.batch_sizes.append(n)
        if n == 0:
            return np.zeros((0, self.num_classes))
        return self._answer(x)


@dataclass
class AttackBudget:
    max_queries: int = 5000

    def __post_init__(self):
        if self.max_queries < 1:
            raise ConfigError("max_queries must be >= 1")


def _budget_value(budget):
    return budget.max_queries if isinstance(budget, AttackBudget) else int(budget)


class TransferSet:
    """Query inputs and the soft labels the oracle returned, in query order."""

    def __init__(self, input_shape, num_classes):
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self._x, self._y = [], []

    def add(self, x, probs):
        if len(x) != len(probs):
            raise UsageError("inputs and labels disagree in length")
        self._x.append(np.asarray(x, dtype=np.float32))
        self._y.append(np.asarray(probs, dtype=np.float64))

    @property
    def inputs(self):
        if not self._x:
            return np.zeros((0,) + self.input_shape, dtype=np.float32)
        return np.concatenate(self._x)

    @property
    def labels(self):
        if not self._y:
            return np.zeros((0, self.num_classes))
        return np.concatenate(self._y)

    def __len__(self):
        return sum(len(a) for a in self._x)

    def save(self, path, fmt=None):
        meta = {"input_shape": list(self.input_shape), "num_classes": self.num_classes}
        containers.save(path, "transfer", meta, {"inputs": self.inputs, "labels": self.labels}, fmt)

    @classmethod
    def load(cls, path):
        header, arrays = containers.load(path, "transfer")
        ts = cls(header["meta"]["input_shape"], header["meta"]["num_classes"])
        ts.add(arrays["inputs"], arrays["labels"])
        return ts


@dataclass
class AttackResult:
    student: object
    history: list
    transfer: TransferSet
    query_count: int
    truncated: bool = False
    generator: object = None


def _soft_ce(model, xb, tb):
    logits = model(xb)
    loss = losses.soft_cross_entropy(logits, tb)
    return loss, logits, {"ce": loss.item()}


def knockoff_attack(oracle, surrogate_data, student_arch, budget, train_cfg=None, seed=0, query_batch=100):
    """Query the oracle on surrogate inputs, then fit a student to the soft labels.

    Collection stops at ``budget`` or at the end of the surrogate pool. If the
    oracle's own cap is lower, the last batch is trimmed to what remains and
    training proceeds on the collected prefix with ``truncated`` set.
    """
    budget = _budget_value(budget)
    if budget < 0:
        raise ConfigError("budget must be nonnegative")
    x_pool = np.asarray(getattr(surrogate_data, "x", surrogate_data), dtype=np.float32)
    rng = np.random.default_rng([seed, 0])
    order = rng.permutation(len(x_pool))[:budget]
    transfer = TransferSet(oracle.input_shape, oracle.num_classes)
    truncated = False
    for start in range(0, len(order), query_batch):
        xb = x_pool[order[start:start + query_batch]]
        left = getattr(oracle, "remaining", None)
        if left is not None and left < len(xb):
            # spend what is left, then stop
            xb, truncated = xb[:left], True
            if not len(xb):
                break
        try:
            probs = oracle.predict(xb)
        except BudgetExhausted:
            truncated = True
            break
        transfer.add(xb, probs)
        if truncated:
            break
    student = build_model(student_arch, oracle.input_shape, oracle.num_classes, seed=int(rng.integers(2**31)))
    history = []
    if len(transfer):
        cfg = train_cfg or TrainConfig(epochs=30)
        history = _fit(student, transfer.inputs, transfer.labels, cfg, int(rng.integers(2**31)), _soft_ce)
    student.eval()
    return AttackResult(student, history, transfer, oracle.query_count, truncated)


@dataclass
class DataFreeConfig:
    latent_dim: int = 16
    batch_size: int = 50
    rounds: int = 800
    student_steps: int = 5
    generator_steps: int = 1
    directions: int = 2
    probe_step: float = 1e-2
    student_lr: float = 0.01
    generator_lr: float = 1e-3
    student_loss: str = "forward_kl"
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=10, optimizer=SgdConfig(learning_rate=0.01)))

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        if min(self.latent_dim, self.batch_size, self.directions) < 1 or self.rounds < 0:
            raise ConfigError("latent_dim, batch_size and directions must be >= 1, rounds >= 0")
        if self.probe_step <= 0:
            raise ConfigError("probe_step must be positive")
        if self.student_loss not in ("reverse_kl", "forward_kl"):
            raise ConfigError(f"unknown student_loss {self.student_loss!r}")

    def round_cost(self):
        probes = 2 * self.directions * self.batch_size * self.generator_steps
        return probes + self.student_steps * self.batch_size

    def to_dict(self):
        return asdict(self)


def _l1_per_sample(student, x, victim_probs):
    with no_grad():
        s = student.predict_proba(x)
    return np.abs(s - victim_probs).sum(axis=1)


def _zeroth_order_grad(oracle, student, x, cfg, rng):
    """Central-difference estimate of d l1(student, victim) / dx per sample.

    Each of the ``directions`` unit probes costs two victim queries per sample.
    """
    n = len(x)
    flat = x.reshape(n, -1).astype(np.float64)
    d = flat.shape[1]
    grad = np.zeros_like(flat)
    h = cfg.probe_step
    for _ in range(cfg.directions):
        u = rng.standard_normal((n, d))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        plus = (flat + h * u).reshape(x.shape).astype(np.float32)
        minus = (flat - h * u).reshape(x.shape).astype(np.float32)
        f_plus = _l1_per_sample(student, plus, oracle.predict(plus))
        f_minus = _l1_per_sample(student, minus, oracle.predict(minus))
        grad += ((f_plus - f_minus) / (2 * h))[:, None] * u
    return (grad * d / cfg.directions).reshape(x.shape)


def _kl_loss(model, xb, tb):
    logits = model(xb)
    loss = losses.kl_divergence(logits, tb)
    return loss, logits, {"kl": loss.item()}


def _forward_kl_loss(model, xb, tb):
    # KL(victim || student) = soft cross-entropy minus the victim entropy
    logits = model(xb)
    loss = losses.soft_cross_entropy(logits, tb)
    return loss, logits, {"kl": loss.item()}


def datafree_attack(oracle, generator_arch, student_arch, budget, cfg=None, seed=0):
    """Generator-driven extraction without any natural query data.

    Each round takes a generator step that ascends the student/victim l1
    disagreement (victim slope by zeroth-order probes) and then student
    steps fitting the victim's soft labels on fresh generated batches
    (forward KL by default, ``student_loss="reverse_kl"`` for the other
    direction). Every
    answered query is kept; once the rounds end the student is refit on the
    whole collection. If the remaining budget cannot pay for a full round
    the run stops and ``truncated`` is set.
    """
    cfg = cfg or DataFreeConfig()
    budget = _budget_value(budget)
    rng = np.random.default_rng([seed, 1])
    shape = oracle.input_shape
    generator = build_model(generator_arch, shape, 1, seed=int(rng.integers(2**31)), latent_dim=cfg.latent_dim)
    student = build_model(student_arch, shape, oracle.num_classes, seed=int(rng.integers(2**31)))
    gen_opt = SGD(generator.parameters(), SgdConfig(learning_rate=cfg.generator_lr, weight_decay=0.0, cosine=False))
    stu_opt = SGD(student.parameters(), SgdConfig(learning_rate=cfg.student_lr, weight_decay=5e-4, cosine=False))
    student_loss = _kl_loss if cfg.student_loss == "reverse_kl" else _forward_kl_loss
    transfer = TransferSet(shape, oracle.num_classes)
    history = []
    spent = 0
    truncated = False

    def generate(z, train):
        generator.train() if train else generator.eval()
        out = generator(z)
        return T.reshape(out, (len(z),) + shape)

    for r in range(cfg.rounds):
        remaining = budget - spent
        if oracle.remaining is not None:
            remaining = min(remaining, oracle.remaining)
        if remaining < cfg.round_cost():
            truncated = True
            break
        before = oracle.query_count
        for _ in range(cfg.generator_steps):
            z = rng.standard_normal((cfg.batch_size, cfg.latent_dim)).astype(np.float32)
            generator.zero_grad()
            x = generate(z, True)
            g = _zeroth_order_grad(oracle, student, x.data, cfg, rng)
            # ascend: minimize -<x, g>
            obj = T.tsum(x * (-g / cfg.batch_size).astype(np.float32))
            obj.backward()
            gen_opt.step(r)
        disagreement = []
        for _ in range(cfg.student_steps):
            z = rng.standard_normal((cfg.batch_size, cfg.latent_dim)).astype(np.float32)
            with no_grad():
                x = generate(z, False).data
            probs = oracle.predict(x)
            transfer.add(x, probs)
            student.train()
            student.zero_grad()
            loss, logits, _ = student_loss(student, x, probs)
            loss.backward()
            stu_opt.step(r)
            disagreement.append(float(np.mean(logits.data.argmax(1) != probs.argmax(1))))
        spent += oracle.query_count - before
        history.append({"round": r + 1, "kl": loss.item(), "query_disagreement": float(np.mean(disagreement)),
                        "queries": oracle.query_count})
    if len(transfer) and cfg.train.epochs:
        history += _fit(student, transfer.inputs, transfer.labels, cfg.train, int(rng.integers(2**31)), student_loss)
    student.eval()
    return AttackResult(student, history, transfer, oracle.query_count, truncated, generator)


def evaluate_extraction(victim, student, test_set):
    """``(adversary_error, disagreement)`` as fractions in [0, 1].

    ``victim`` and ``student`` are models or precomputed probability/logit
    arrays; ``test_set`` is a Split or an ``(x, y)`` pair.
    """
    x, y = (test_set.x, test_set.y) if hasattr(test_set, "x") else test_set
    y = np.asarray(y)
    if len(y) == 0:
        raise UsageError("cannot evaluate on an empty test set")

    def top1(m):
        out = m.predict_logits(x) if hasattr(m, "predict_logits") else np.asarray(m)
        if out.shape[0] != len(y):
            raise UsageError("prediction count does not match the test set")
        return out.argmax(axis=1)

    s, v = top1(student), top1(victim)
    return float(np.mean(s != y)), float(np.mean(s != v))
