"""Declarative experiment runner: victim training, quantization, defense, attack, metrics.

An experiment is a cross product of quantization methods, defenses and
attacks, run once per seed. Every random stream is derived from
``(seed, phase)`` where the phase names a shared stage, so a cell re-run in
isolation reproduces the same bytes, and two cells that share a stage (the
float victim, the QAT reference, the attacker's student) consume identical
randomness.
"""
import csv
import hashlib
import io
import itertools
import json
import math
import os
import statistics
import time
import traceback
from dataclasses import asdict, dataclass, fields
from typing import List, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from . import attacks as A
from . import defenses as D
from .checkpoint import save_checkpoint
from .datasets import DistributionRelation, TaskSpec, adversary_variant, generate
from .errors import ConfigError, UsageError
from .nn import build_model
from .optim import SgdConfig
from .quant import QuantSpec, prepare_qat, ptq
from .training import DivQatConfig, TrainConfig, error_rate, mean_kl, train_divqat, train_float, train_qat, write_history

CONFIG_VERSION = 1


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class TaskModel(_Strict):
    kind: Literal["gaussian_blobs", "ring_patterns", "textured_patches"] = "textured_patches"
    num_classes: int = Field(10, ge=2)
    input_shape: List[int] = [1, 8, 8]
    n_train: int = Field(2000, ge=1)
    n_test: int = Field(1000, ge=1)
    seed: int = 0
    noise: float = Field(0.8, gt=0)
    separation: float = Field(6.0, gt=0)

    def spec(self):
        d = self.model_dump()
        d["input_shape"] = tuple(d["input_shape"])
        return TaskSpec(**d)


class OptimModel(_Strict):
    learning_rate: float = Field(0.01, ge=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(5e-4, ge=0)
    nesterov: bool = False
    cosine: bool = True

    def sgd(self):
        return SgdConfig(**self.model_dump())


class TrainModel(_Strict):
    epochs: int = Field(30, ge=0)
    batch_size: int = Field(64, ge=1)
    optimizer: OptimModel = OptimModel(learning_rate=0.05)

    def config(self):
        return TrainConfig(self.epochs, self.batch_size, self.optimizer.sgd())


class QuantTrainModel(_Strict):
    epochs: int = Field(10, ge=0)
    batch_size: int = Field(64, ge=1)
    # a small step keeps the divergence runaway slow enough to monitor
    optimizer: OptimModel = OptimModel(learning_rate=0.001)
    epsilon_floor: float = Field(1e-7, gt=0)


class QuantSpecModel(_Strict):
    bit_width: int = Field(8, ge=2, le=8)
    profile: Literal["server", "mobile"] = "server"
    observer: Literal["minmax", "moving_average"] = "minmax"
    observer_momentum: float = Field(0.1, gt=0, le=1)
    warmup_fraction: float = Field(0.2, ge=0, le=1)

    def spec(self):
        return QuantSpec(**self.model_dump())


DEFAULT_GRID = (0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 2.0, 3.0)


class QuantMethodModel(_Strict):
    kind: Literal["large", "ptq", "qat", "divqat"] = "qat"
    alpha: Optional[float] = Field(None, ge=0)
    alpha_grid: Optional[List[float]] = None
    snapshot_interval: int = Field(4, ge=0)
    l1_budget: float = Field(0.6, ge=0, le=2)
    max_error_increase: float = Field(4.0, ge=0, le=100)
    calibration_samples: int = Field(1000, ge=1)

    @field_validator("alpha_grid")
    @classmethod
    def _grid(cls, v):
        if v is not None and any(a < 0 for a in v):
            raise ValueError("alpha_grid values must be nonnegative")
        return v

    @model_validator(mode="after")
    def _alpha_choice(self):
        if self.kind == "divqat" and self.alpha is not None and self.alpha_grid is not None:
            raise ValueError("give either alpha or alpha_grid, not both")
        return self

    def grid(self):
        g = self.alpha_grid if self.alpha_grid is not None else DEFAULT_GRID
        return sorted(set(float(a) for a in g))

    def label(self):
        if self.kind != "divqat":
            return self.kind
        return f"divqat-a{self.alpha:g}" if self.alpha is not None else "divqat-sel"


class DefenseModel(_Strict):
    kind: Literal["none", "reverse_sigmoid", "deception", "random_noise", "topk_truncation"] = "none"
    beta: float = Field(0.0, ge=0)
    gamma: float = Field(0.5, gt=0)
    strength: float = Field(0.0, ge=0, le=1)
    eps: float = Field(0.0, ge=0)
    k: int = Field(0, ge=0)
    l1_budget: float = Field(0.6, ge=0, le=2)
    calibrate: bool = True

    def label(self):
        return self.kind


class DataFreeModel(_Strict):
    latent_dim: int = Field(16, ge=1)
    batch_size: int = Field(50, ge=1)
    rounds: int = Field(800, ge=0)
    student_steps: int = Field(5, ge=1)
    generator_steps: int = Field(1, ge=1)
    directions: int = Field(2, ge=1)
    probe_step: float = Field(1e-2, gt=0)
    student_lr: float = Field(0.01, ge=0)
    generator_lr: float = Field(1e-3, ge=0)
    student_loss: Literal["forward_kl", "reverse_kl"] = "forward_kl"
    replay_epochs: int = Field(10, ge=0)

    def config(self):
        d = self.model_dump()
        epochs = d.pop("replay_epochs")
        train = TrainConfig(epochs=epochs, optimizer=SgdConfig(learning_rate=self.student_lr))
        return A.DataFreeConfig(train=train, **d)


class AttackModel(_Strict):
    kind: Literal["none", "knockoff", "datafree"] = "none"
    relation: Literal["in_distribution", "near_distribution", "out_of_distribution"] = "out_of_distribution"
    shift: float = Field(2.0, gt=0)
    budget: Optional[int] = Field(None, ge=0)
    student_arch: Literal["mini_conv", "mini_conv_wide", "mlp"] = "mini_conv"
    generator_arch: Literal["generator"] = "generator"
    student_training: TrainModel = TrainModel()
    datafree: DataFreeModel = DataFreeModel()

    def resolved_budget(self):
        if self.budget is not None:
            return self.budget
        return 5000 if self.kind == "knockoff" else self.datafree.rounds * self.datafree.config().round_cost()

    def label(self):
        if self.kind == "none":
            return "none"
        return f"{self.kind}-{self.student_arch}-{self.resolved_budget()}"


def _listify(v):
    return v if isinstance(v, list) else [v]


class ExperimentConfig(_Strict):
    version: Literal[1]
    name: str = "experiment"
    task: TaskModel = TaskModel()
    victim_arch: Literal["mini_conv", "mini_conv_wide", "mlp"] = "mini_conv"
    float_training: TrainModel = TrainModel()
    quant_training: QuantTrainModel = QuantTrainModel()
    quant_spec: QuantSpecModel = QuantSpecModel()
    quant_method: Union[QuantMethodModel, List[QuantMethodModel]] = QuantMethodModel()
    defense: Union[DefenseModel, List[DefenseModel]] = DefenseModel()
    attack: Union[AttackModel, List[AttackModel]] = AttackModel()
    seeds: List[int] = [0, 1, 2]
    heldout_size: int = Field(500, ge=1)
    output_dir: Optional[str] = None
    workers: int = Field(1, ge=1)

    @field_validator("seeds")
    @classmethod
    def _seeds(cls, v):
        if not v:
            raise ValueError("seeds must be nonempty")
        if len(set(v)) != len(v):
            raise ValueError("seeds must be distinct")
        return v

    def cells(self):
        out = []
        for q, d, a in itertools.product(_listify(self.quant_method), _listify(self.defense), _listify(self.attack)):
            out.append(Cell(self, q, d, a))
        ids = [c.id for c in out]
        if len(set(ids)) != len(ids):
            raise ConfigError("two cells resolve to the same configuration")
        return out


def load_config(path):
    """Parse and validate a JSON config file; raises ConfigError on any problem."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(raw)


def parse_config(raw):
    from pydantic import ValidationError

    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from None


def _canon(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def derive_seed(master, *phase):
    """32-bit seed for one named phase under one master seed."""
    digest = hashlib.sha256(_canon([master, *phase]).encode()).digest()
    return int.from_bytes(digest[:4], "little")


class Cell:
    def __init__(self, config, quant, defense, attack):
        self.config = config
        self.quant = quant
        self.defense = defense
        self.attack = attack
        body = {k: v for k, v in config.model_dump().items()
                if k not in ("quant_method", "defense", "attack", "seeds", "output_dir", "workers", "name")}
        body.update(quant=quant.model_dump(), defense=defense.model_dump(), attack=attack.model_dump())
        short = hashlib.sha256(_canon(body).encode()).hexdigest()[:8]
        self.id = f"{quant.label()}__{defense.label()}__{attack.label()}-{short}"


# -- metrics record ---------------------------------------------------------

@dataclass
class MetricsReport:
    cell_id: str
    seed: object
    status: str = "ok"
    quant_method: str = ""
    defense: str = ""
    attack: str = ""
    defender_error: Optional[float] = None
    adversary_error: Optional[float] = None
    disagreement: Optional[float] = None
    quant_l1_mean: Optional[float] = None
    quant_l1_max: Optional[float] = None
    defense_l1_mean: Optional[float] = None
    defense_l1_max: Optional[float] = None
    alpha: Optional[float] = None
    selected_step: Optional[int] = None
    defense_strength: Optional[float] = None
    kl_train: Optional[float] = None
    kl_test: Optional[float] = None
    query_count: Optional[int] = None
    truncated: Optional[bool] = None
    victim_checksum: Optional[str] = None
    error: Optional[str] = None

    def validate(self):
        for name in ("defender_error", "adversary_error", "disagreement"):
            v = getattr(self, name)
            if v is not None and not 0 <= v <= 100:
                raise UsageError(f"{name}={v} outside [0, 100]")
        for name in ("quant_l1_mean", "quant_l1_max", "defense_l1_mean", "defense_l1_max"):
            v = getattr(self, name)
            if v is not None and not 0 <= v <= 2 + 1e-9:
                raise UsageError(f"{name}={v} outside [0, 2]")
        return self

    def to_dict(self):
        return asdict(self)


COLUMNS = [f.name for f in fields(MetricsReport)]
NUMERIC = ("defender_error", "adversary_error", "disagreement", "quant_l1_mean", "quant_l1_max",
           "defense_l1_mean", "defense_l1_max", "alpha", "selected_step", "defense_strength", "kl_train",
           "kl_test", "query_count")


def _pct(x):
    return 100.0 * float(x)


# -- pipeline ---------------------------------------------------------------

class SharedCache(dict):
    """Memo of shared-phase results keyed by (phase, canonical config)."""

    def get_or(self, key, fn):
        k = _canon(key)
        if k not in self:
            self[k] = fn()
        return self[k]


class Pipeline:
    """All phases for one seed. Phase results shared between cells live in ``cache``."""

    def __init__(self, config, seed, cache=None):
        self.config = config
        self.seed = seed
        self.cache = cache if cache is not None else SharedCache()
        self.task = config.task.spec()

    def _key(self, *parts):
        return [self.seed, self.config.task.model_dump(), self.config.victim_arch,
                self.config.float_training.model_dump(), *parts]

    def dataset(self):
        return self.cache.get_or(["dataset", self.config.task.model_dump()], lambda: generate(self.task))

    def heldout(self):
        def make():
            s = derive_seed(self.seed, "heldout")
            return adversary_variant(self.task, "in_distribution", s, self.config.heldout_size)
        return self.cache.get_or(["heldout", self.seed, self.config.task.model_dump(), self.config.heldout_size], make)

    def float_model(self):
        def make():
            ds = self.dataset()
            model = build_model(self.config.victim_arch, ds.input_shape, ds.num_classes,
                                seed=derive_seed(self.seed, "victim", "init"))
            history = train_float(model, ds, self.config.float_training.config(), derive_seed(self.seed, "victim", "train"))
            return model, history
        return self.cache.get_or(self._key("float"), make)

    def _quant_cfg(self, alpha):
        qt = self.config.quant_training
        return DivQatConfig(alpha=alpha, epochs=qt.epochs, batch_size=qt.batch_size, optimizer=qt.optimizer.sgd(),
                            epsilon_floor=qt.epsilon_floor)

    def quantized(self, alpha):
        """QAT (alpha None) or DivQAT model trained from the float victim, with history."""
        def make():
            large, _ = self.float_model()
            spec = self.config.quant_spec.spec()
            q = prepare_qat(large, spec)
            seed = derive_seed(self.seed, "quant", "train")
            if alpha is None:
                return train_qat(q, self.dataset(), self._quant_cfg(0.0), seed)
            return train_divqat(q, large, self.dataset(), self._quant_cfg(alpha), seed)
        return self.cache.get_or(self._key("quant", self.config.quant_training.model_dump(),
                                           self.config.quant_spec.model_dump(), alpha), make)

    def ptq_model(self, method):
        def make():
            large, _ = self.float_model()
            x = self.dataset().train.x[:method.calibration_samples]
            return ptq(large, self.config.quant_spec.spec(), [x[i:i + 500] for i in range(0, len(x), 500)])
        return self.cache.get_or(self._key("ptq", self.config.quant_spec.model_dump(), method.calibration_samples), make)

    def quant_stats(self, model):
        """Held-out l1 to the QAT reference and error change, plus KL to the float model."""
        ref, _ = self.quantized(None)
        held = self.heldout()
        pr, pm = ref.predict_proba(held.x), model.predict_proba(held.x)
        l1 = D.l1_distance(pr, pm)
        err_ref = np.mean(pr.argmax(1) != held.reference_labels)
        err = np.mean(pm.argmax(1) != held.reference_labels)
        return {"l1_mean": float(l1.mean()), "l1_max": float(l1.max()), "error_increase": _pct(err - err_ref)}

    def kl(self, model):
        large, _ = self.float_model()
        ds = self.dataset()
        return mean_kl(model, large, ds.train.x), mean_kl(model, large, ds.test.x)

    def _feasible(self, stats, method):
        return stats["l1_mean"] <= method.l1_budget and stats["error_increase"] <= method.max_error_increase

    def select_alpha(self, method):
        """Most divergent quantized model that stays within the selection constraints.

        A candidate is feasible when its held-out l1 to QAT is within
        ``l1_budget`` and its held-out error rises by at most
        ``max_error_increase`` points. The grid is trained in ascending
        order up to the first infeasible alpha; that run is repeated with
        the constraints checked every ``snapshot_interval`` steps, because
        the divergence term tends to switch abruptly from negligible to
        collapse and the useful models sit inside that transition. Returns
        ``(choice, trials)`` with ``choice = {"alpha", "step", "l1_mean"}``;
        ``step`` is None for a fully trained grid model.
        """
        key = self._key("select", method.model_dump(), self.config.quant_training.model_dump(),
                        self.config.quant_spec.model_dump())

        def make():
            trials, best = [], None

            def consider(alpha, step, model, stats):
                nonlocal best
                ok = self._feasible(stats, method)
                trials.append({"alpha": alpha, "step": step, "feasible": bool(ok), **stats})
                if ok and (best is None or stats["l1_mean"] > best[0]["l1_mean"]):
                    best = ({"alpha": alpha, "step": step, "l1_mean": stats["l1_mean"]}, model)
                return ok

            cliff = None
            for a in method.grid():
                model = self.quantized(a)[0]
                if not consider(a, None, model, self.quant_stats(model)):
                    cliff = a
                    break
            if cliff is not None and method.snapshot_interval:
                large, _ = self.float_model()
                q = prepare_qat(large, self.config.quant_spec.spec())
                train_divqat(q, large, self.dataset(), self._quant_cfg(cliff), derive_seed(self.seed, "quant", "train"),
                             on_step=lambda step, m: consider(cliff, step, m, self.quant_stats(m)),
                             step_interval=method.snapshot_interval)
            if best is None:
                raise ConfigError("no alpha in the grid meets the selection constraints")
            return best, trials
        return self.cache.get_or(key, make)

    def victim(self, method):
        """Returns ``(model, info)`` where info carries alpha, l1 stats and histories."""
        if method.kind == "large":
            model, hist = self.float_model()
            return model, {"alpha": None, "history": hist}
        if method.kind == "ptq":
            model = self.ptq_model(method)
            return model, {"alpha": None, "history": [], **self.quant_stats(model)}
        if method.kind == "qat":
            model, hist = self.quantized(None)
            return model, {"alpha": None, "history": hist, **self.quant_stats(model)}
        if method.alpha is not None:
            model, hist = self.quantized(method.alpha)
            return model, {"alpha": method.alpha, "history": hist, "trials": [], **self.quant_stats(model)}
        (choice, model), trials = self.select_alpha(method)
        hist = self.quantized(choice["alpha"])[1] if choice["step"] is None else []
        return model, {"alpha": choice["alpha"], "step": choice["step"], "history": hist, "trials": trials,
                       **self.quant_stats(model)}

    def defense(self, victim, dmodel):
        if dmodel.kind == "none":
            return D.Calibrated(D.DefenseConfig(), None, None)
        seed = derive_seed(self.seed, "defense")
        if not dmodel.calibrate:
            cfg = D.DefenseConfig(kind=dmodel.kind, beta=dmodel.beta, gamma=dmodel.gamma, strength=dmodel.strength,
                                  eps=dmodel.eps, k=dmodel.k, l1_budget=dmodel.l1_budget, seed=seed)
            p = victim.predict_proba(self.heldout().x)
            d = D.l1_distance(p, D.apply_defense(cfg, p))
            return D.Calibrated(cfg, float(d.mean()), float(d.max()))
        return D.calibrate_to_budget(dmodel.kind, victim, self.heldout().x, dmodel.l1_budget, gamma=dmodel.gamma,
                                     seed=seed)

    def attack(self, victim, defense_cfg, amodel):
        budget = amodel.resolved_budget()
        oracle = A.VictimOracle(victim, defense_cfg, budget=budget, seed=derive_seed(self.seed, "oracle"))
        seed = derive_seed(self.seed, "attack", amodel.kind)
        if amodel.kind == "knockoff":
            rel = DistributionRelation(amodel.relation, amodel.shift)
            sur = self.cache.get_or(["surrogate", self.seed, self.config.task.model_dump(), amodel.relation,
                                     amodel.shift, budget],
                                    lambda: adversary_variant(self.task, rel, derive_seed(self.seed, "surrogate"), budget))
            result = A.knockoff_attack(oracle, sur, amodel.student_arch, budget, amodel.student_training.config(), seed)
        else:
            result = A.datafree_attack(oracle, amodel.generator_arch, amodel.student_arch, budget,
                                       amodel.datafree.config(), seed)
        if sum(oracle.batch_sizes) != oracle.query_count or oracle.query_count > budget:
            raise RuntimeError("oracle accounting violated")
        return result, oracle

    def run_cell(self, cell, run_dir=None):
        rep = MetricsReport(cell.id, self.seed, quant_method=cell.quant.label(), defense=cell.defense.label(),
                            attack=cell.attack.label())
        victim, info = self.victim(cell.quant)
        ds = self.dataset()
        rep.alpha = info.get("alpha")
        rep.selected_step = info.get("step")
        if cell.quant.kind != "large":
            rep.quant_l1_mean, rep.quant_l1_max = info["l1_mean"], info["l1_max"]
            rep.kl_train, rep.kl_test = self.kl(victim)
        cal = self.defense(victim, cell.defense)
        if cell.defense.kind != "none":
            rep.defense_l1_mean, rep.defense_l1_max = cal.mean_l1, cal.max_l1
            rep.defense_strength = float(cal.config.parameter) if cal.config.kind != "none" else 0.0
        rng = np.random.default_rng(derive_seed(self.seed, "evaluate"))
        served = D.apply_defense(cal.config, victim.predict_proba(ds.test.x), rng)
        rep.defender_error = _pct(np.mean(served.argmax(1) != ds.test.y))
        rep.victim_checksum = victim.checksum()
        result = None
        if cell.attack.kind != "none":
            result, oracle = self.attack(victim, cal.config, cell.attack)
            if victim.checksum() != rep.victim_checksum:
                raise RuntimeError("victim parameters changed during the attack")
            adv, dis = A.evaluate_extraction(served, result.student, ds.test)
            rep.adversary_error, rep.disagreement = _pct(adv), _pct(dis)
            rep.query_count = oracle.query_count
            rep.truncated = result.truncated
        rep.validate()
        if run_dir is not None:
            write_artifacts(run_dir, rep, victim, info, cal, result, self.seed)
        return rep


def write_artifacts(run_dir, rep, victim, info, cal, result, seed):
    ck = os.path.join(run_dir, "checkpoints")
    os.makedirs(ck, exist_ok=True)
    save_checkpoint(victim, os.path.join(ck, "victim.dqckpt"), seed=seed)
    if result is not None:
        save_checkpoint(result.student, os.path.join(ck, "student.dqckpt"), seed=seed)
        result.transfer.save(os.path.join(ck, "transfer.dqxfer"))
    write_history([{**r, "phase": "victim"} for r in info.get("history", [])], os.path.join(run_dir, "history.jsonl"))
    extra = {"defense": cal.config.to_dict(), "alpha_trials": info.get("trials", [])}
    with open(os.path.join(run_dir, "report.json"), "w") as fh:
        fh.write(_canon_pretty({**rep.to_dict(), **extra}))


def _canon_pretty(obj):
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def _run_seed(config, seed, cells, out_dir, cache):
    pipe = Pipeline(config, seed, cache)
    reports, timing = [], {}
    for cell in cells:
        t0 = time.perf_counter()
        run_dir = os.path.join(out_dir, cell.id, str(seed)) if out_dir else None
        try:
            rep = pipe.run_cell(cell, run_dir)
        except Exception as exc:  # per-cell failure record; other cells go on
            rep = MetricsReport(cell.id, seed, status="error", quant_method=cell.quant.label(),
                                defense=cell.defense.label(), attack=cell.attack.label(),
                                error=f"{type(exc).__name__}: {exc}")
            if run_dir:
                os.makedirs(run_dir, exist_ok=True)
                with open(os.path.join(run_dir, "error.txt"), "w") as fh:
                    fh.write(traceback.format_exc())
        timing[f"{cell.id}/{seed}"] = time.perf_counter() - t0
        reports.append(rep)
    return reports, timing


def _worker(args):
    config_json, seed, out_dir = args
    config = ExperimentConfig.model_validate_json(config_json)
    return _run_seed(config, seed, config.cells(), out_dir, None)


def run_experiment(config, out_dir=None, cache=None):
    """Run every cell for every seed; returns MetricsReports ordered by (cell, seed).

    With ``workers > 1`` seeds run in separate processes (each with its own
    cache). Wall-clock seconds go to ``timing.json`` next to the reports so
    the reports themselves stay byte-reproducible.
    """
    if isinstance(config, dict):
        config = parse_config(config)
    out_dir = out_dir or config.output_dir
    cells = config.cells()
    timing = {}
    by_seed = {}
    if config.workers > 1 and len(config.seeds) > 1:
        from concurrent.futures import ProcessPoolExecutor

        jobs = [(config.model_dump_json(), s, out_dir) for s in config.seeds]
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            for s, (reps, t) in zip(config.seeds, pool.map(_worker, jobs)):
                by_seed[s] = reps
                timing.update(t)
    else:
        cache = cache if cache is not None else SharedCache()
        for s in config.seeds:
            by_seed[s], t = _run_seed(config, s, cells, out_dir, cache)
            timing.update(t)
    reports = [by_seed[s][i] for i in range(len(cells)) for s in config.seeds]
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        emit_report(reports, os.path.join(out_dir, "reports.csv"), "csv")
        emit_report(reports, os.path.join(out_dir, "reports.json"), "json")
        with open(os.path.join(out_dir, "timing.json"), "w") as fh:
            json.dump(timing, fh, sort_keys=True, indent=1)
    return reports


# -- reports ----------------------------------------------------------------

def _median(values):
    vals = [v for v in values if v is not None and not (isinstance(v, float) and math.isnan(v))]
    return statistics.median(vals) if vals else None


def aggregate(reports):
    """One median row per cell over its successful seeds, in first-seen cell order."""
    order, groups = [], {}
    for r in reports:
        if r.cell_id not in groups:
            order.append(r.cell_id)
            groups[r.cell_id] = []
        if r.status == "ok":
            groups[r.cell_id].append(r)
    rows = []
    for cid in order:
        rs = groups[cid]
        first = next((r for r in reports if r.cell_id == cid), None)
        agg = MetricsReport(cid, "median", status="ok" if rs else "error", quant_method=first.quant_method,
                            defense=first.defense, attack=first.attack)
        for name in NUMERIC:
            setattr(agg, name, _median([getattr(r, name) for r in rs]))
        if agg.query_count is not None:
            agg.query_count = float(agg.query_count)
        agg.truncated = any(r.truncated for r in rs) if any(r.truncated is not None for r in rs) else None
        rows.append(agg)
    return rows


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def report_rows(reports):
    return [r.to_dict() for r in reports] + [r.to_dict() for r in aggregate(reports)]


def emit_report(reports, path, fmt=None):
    """Write per-seed rows followed by per-cell median rows, columns in fixed order."""
    fmt = fmt or ("json" if str(path).endswith(".json") else "csv")
    rows = report_rows(reports)
    if fmt == "json":
        text = json.dumps({"columns": COLUMNS, "rows": rows}, sort_keys=True, indent=1) + "\n"
    elif fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for row in rows:
            w.writerow([_cell(row[c]) for c in COLUMNS])
        text = buf.getvalue()
    else:
        raise UsageError(f"unknown report format {fmt!r}")
    with open(path, "w") as fh:
        fh.write(text)
    return path


def _parse_cell(name, text):
    if text == "":
        return None
    if name == "truncated":
        return text == "true"
    if name in NUMERIC:
        return float(text) if any(ch in text for ch in ".eEn") else int(text)
    if name == "seed":
        return int(text) if text.lstrip("-").isdigit() else text
    return text


def load_report(path):
    """Rows (dicts) from a CSV or JSON report; numbers decode to the exact emitted values."""
    with open(path) as fh:
        text = fh.read()
    if str(path).endswith(".json"):
        return json.loads(text)["rows"]
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    return [{h: _parse_cell(h, v) for h, v in zip(header, rec)} for rec in reader]


def reports_from_rows(rows):
    return [MetricsReport(**row) for row in rows if row["seed"] != "median"]


# -- alpha sweep ------------------------------------------------------------

def sweep_alpha(config, cache=None, out_dir=None):
    """Train DivQAT at every grid alpha (per seed) and evaluate it.

    Returns ``(rows, series)``: one row per (alpha, seed) with defender
    error, adversary error and disagreement (if an attack is configured) and
    the final KL to the float model on training and test inputs; ``series``
    holds the per-alpha medians.
    """
    if isinstance(config, dict):
        config = parse_config(config)
    method = _listify(config.quant_method)[0]
    if method.kind != "divqat" or method.alpha_grid is None:
        raise UsageError("sweep_alpha needs quant_method kind divqat with an alpha_grid")
    grid = method.grid()
    if not grid:
        raise UsageError("alpha_grid is empty")
    cache = cache if cache is not None else SharedCache()
    attack = _listify(config.attack)[0]
    defense = _listify(config.defense)[0]
    rows = []
    for a in grid:
        cell_cfg = config.model_copy(update={"quant_method": QuantMethodModel(kind="divqat", alpha=a),
                                             "defense": defense, "attack": attack})
        cell = cell_cfg.cells()[0]
        for s in config.seeds:
            rep = Pipeline(cell_cfg, s, cache).run_cell(cell)
            rows.append({"alpha": a, "seed": s, "defender_error": rep.defender_error,
                         "adversary_error": rep.adversary_error, "disagreement": rep.disagreement,
                         "kl_train": rep.kl_train, "kl_test": rep.kl_test, "quant_l1_mean": rep.quant_l1_mean})
    keys = ("defender_error", "adversary_error", "disagreement", "kl_train", "kl_test", "quant_l1_mean")
    series = {"alpha": grid}
    for k in keys:
        series[k] = [_median([r[k] for r in rows if r["alpha"] == a]) for a in grid]
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "sweep.csv"), "w") as fh:
            w = csv.writer(fh, lineterminator="\n")
            cols = ["alpha", "seed", *keys]
            w.writerow(cols)
            for r in rows:
                w.writerow([_cell(r[c]) for c in cols])
        with open(os.path.join(out_dir, "sweep_series.json"), "w") as fh:
            fh.write(_canon_pretty(series))
    return rows, series
