"""Seeded training loop, evaluation and the regime ablation."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import REGIMES, TrainConfig
from .data import DomainDataset, Standardizer
from .losses import Batch, LossReport, total_objective
from .nn import Models, Mode, build_models
from .uncertainty import mc_entropy


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, report: LossReport):
        super().__init__(f"non-finite loss at step {step}: {report.to_dict()}")
        self.step = step
        self.report = report


class GradientLeak(RuntimeError):
    pass


def lambda_schedule(kind: str, progress: float, gamma: float = 10.0) -> float:
    """Multiplier on the adversarial weights at training progress in [0, 1]."""
    if kind == "constant":
        return 1.0
    if kind == "rampup":
        return 2.0 / (1.0 + math.exp(-gamma * progress)) - 1.0
    raise ValueError(f"unknown lambda schedule {kind!r}")


@dataclass
class Metrics:
    step: int
    epoch: int
    source_acc: float
    target_acc: float
    mean_entropy_source: float
    mean_entropy_target: float
    losses: LossReport
    ramp: float
    wall_ms: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


@dataclass
class TrainResult:
    models: Models
    history: list[Metrics]
    standardizer: Standardizer
    config: TrainConfig
    step_reports: list[LossReport] = field(default_factory=list)

    @property
    def final(self) -> Metrics:
        return self.history[-1]


# ---------------------------------------------------------------------------
# optimisers
# ---------------------------------------------------------------------------


class Sgd:
    """SGD with heavy-ball momentum: ``v = mu*v + g; p -= lr*v``."""

    def __init__(self, params: list[Tensor], lr: float, momentum: float):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in params]

    def step(self, grads: ad.GradientMap) -> None:
        for p, v in zip(self.params, self.velocity):
            g = grads.get(p.node.id)
            v *= self.momentum
            if g is not None:
                v += g
            p.data -= self.lr * v


class Adam:
    def __init__(self, params: list[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self, grads: ad.GradientMap) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = grads.get(p.node.id)
            if g is None:
                continue
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(config: TrainConfig, params: list[Tensor]):
    if config.optimizer == "adam":
        return Adam(params, config.learning_rate)
    return Sgd(params, config.learning_rate, config.momentum)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def evaluate(models: Models, ds: DomainDataset, T: int, seed, standardizer: Standardizer | None = None):
    """(accuracy, mean predictive entropy) on a labeled dataset.

    Accuracy uses deterministic-mode argmax; entropy uses ``T`` dropout
    samples drawn from ``np.random.default_rng(seed)``.
    """
    y = ds.known_labels
    if y is None:
        raise ValueError(f"evaluate: dataset {ds.name!r} has no labels")
    x = ds.inputs if standardizer is None else standardizer(ds.inputs)
    f = models.extractor(x, Mode.DETERMINISTIC)
    logits = models.classifier(f, Mode.DETERMINISTIC)
    acc = float(np.mean(np.argmax(logits.data, axis=1) == y))
    _, entropy_u = mc_entropy(Tensor(f.data), models.classifier, T, np.random.default_rng(seed))
    return acc, float(np.mean(entropy_u.data))


def eval_seed(config_seed: int, step: int) -> list[int]:
    return [config_seed, step, 0xE7A1]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def check_stop_gradient(parts: dict, models: Models) -> None:
    """Raise if the generator-fit loss reaches the extractor or classifier."""
    if "l_g" not in parts:
        return
    grads = ad.backward(parts["l_g"])
    for net in (models.extractor, models.classifier):
        for name, p in net.parameters():
            if grads.has(p) and np.any(grads.of(p) != 0):
                raise GradientLeak(f"generator loss leaks gradient into {name}")


def train(
    config: TrainConfig,
    source: DomainDataset,
    target: DomainDataset,
    target_eval: DomainDataset | None = None,
    on_metrics=None,
) -> TrainResult:
    """Train all networks jointly; returns models and the metrics history.

    ``target`` is stripped of labels before training.  Evaluation uses
    ``target_eval`` (default: ``target`` itself with its quarantined labels).
    ``on_metrics`` is called with each :class:`Metrics` as it is recorded.
    """
    if source.labels is None:
        raise ValueError("train: source dataset must be labeled")
    if source.dim != target.dim:
        raise ValueError(f"train: source dim {source.dim} != target dim {target.dim}")
    target_eval = target if target_eval is None else target_eval
    train_target = target.unlabeled()

    ss = np.random.SeedSequence(config.seed)
    init_ss, batch_ss, noise_ss = ss.spawn(3)
    batch_rng = np.random.default_rng(batch_ss)
    noise_rng = np.random.default_rng(noise_ss)

    standardizer = Standardizer.fit(source.inputs)
    xs = standardizer(source.inputs)
    ys = source.labels
    xt = standardizer(train_target.inputs)
    num_classes = source.num_classes
    models = build_models(source.dim, num_classes, config.dropout_rate, int(init_ss.generate_state(1)[0]))
    params = [p for _, p in models.parameters()]
    opt = make_optimizer(config, params)

    ns, nt = len(xs), len(xt)
    steps_per_epoch = math.ceil(ns / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    history: list[Metrics] = []
    reports: list[LossReport] = []
    t0 = time.perf_counter()

    def record(step: int, epoch: int, report: LossReport, ramp: float):
        seed = eval_seed(config.seed, step)
        src_acc, src_ent = evaluate(models, source, config.eval_mc_samples, seed, standardizer)
        tgt_acc, tgt_ent = evaluate(models, target_eval, config.eval_mc_samples, seed, standardizer)
        wall = (time.perf_counter() - t0) * 1e3 if config.record_wall_time else 0.0
        m = Metrics(step, epoch, src_acc, tgt_acc, src_ent, tgt_ent, report, ramp, wall)
        history.append(m)
        if on_metrics is not None:
            on_metrics(m)

    step = 0
    report = LossReport()
    ramp = 0.0
    for epoch in range(config.epochs):
        order = batch_rng.permutation(ns)
        for b in range(steps_per_epoch):
            idx_s = order[b * config.batch_size:(b + 1) * config.batch_size]
            idx_t = batch_rng.choice(nt, size=min(len(idx_s), nt), replace=False)
            batch = Batch(xs[idx_s], ys[idx_s], xt[idx_t])
            ramp = lambda_schedule(config.lambda_schedule, step / total_steps, config.ramp_gamma)
            objective, report, parts = total_objective(batch, models, config, noise_rng, ramp)
            if not (np.isfinite(objective.item()) and report.is_finite()):
                raise TrainingDiverged(step, report)
            reports.append(report)
            if config.debug_checks and step % config.debug_checks == 0:
                check_stop_gradient(parts, models)
            grads = ad.backward(objective)
            opt.step(grads)
            step += 1
            if config.eval_every and step % config.eval_every == 0 and step != total_steps:
                record(step, epoch, report, ramp)
    record(step, config.epochs - 1, report, ramp)
    return TrainResult(models, history, standardizer, config, reports)


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

ABLATION_COLUMNS = ("regime", "seed", "target_acc", "source_acc", "target_entropy", "source_entropy")


@dataclass
class AblationRow:
    regime: str
    seed: int
    target_acc: float
    source_acc: float
    target_entropy: float
    source_entropy: float


def _run_one(args) -> AblationRow:
    config, source, target, target_eval = args
    final = train(config, source, target, target_eval).final
    return AblationRow(
        config.regime, config.seed, final.target_acc, final.source_acc,
        final.mean_entropy_target, final.mean_entropy_source,
    )


def run_ablation(
    base_config: TrainConfig,
    source: DomainDataset,
    target: DomainDataset,
    seeds: list[int],
    regimes=REGIMES,
    target_eval: DomainDataset | None = None,
    jobs: int = 1,
) -> list[AblationRow]:
    """Train every (regime, seed) pair; rows are regime-major, seed-minor."""
    if not seeds:
        raise ValueError("run_ablation: seed list is empty")
    tasks = [
        (base_config.with_regime(r).replace(seed=int(s)), source, target, target_eval)
        for r in regimes
        for s in seeds
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_one, tasks))
    return [_run_one(t) for t in tasks]


def summarize(rows: list[AblationRow]) -> list[dict]:
    """Per regime: median and interquartile range of target accuracy and entropy."""
    out = []
    for regime in dict.fromkeys(r.regime for r in rows):
        acc = np.array([r.target_acc for r in rows if r.regime == regime])
        ent = np.array([r.target_entropy for r in rows if r.regime == regime])
        aq1, amed, aq3 = np.percentile(acc, [25, 50, 75])
        eq1, emed, eq3 = np.percentile(ent, [25, 50, 75])
        out.append({
            "regime": regime, "runs": len(acc),
            "target_acc_median": float(amed), "target_acc_iqr": float(aq3 - aq1),
            "target_entropy_median": float(emed), "target_entropy_iqr": float(eq3 - eq1),
        })
    return out


def _fmt(v) -> str:
    return format(float(v), ".17g")


def ablation_csv(rows: list[AblationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_COLUMNS)
    for r in rows:
        w.writerow([r.regime, r.seed] + [_fmt(getattr(r, c)) for c in ABLATION_COLUMNS[2:]])
    return buf.getvalue()


def summary_csv(summary: list[dict]) -> str:
    buf = io.StringIO()
    cols = ["regime", "runs", "target_acc_median", "target_acc_iqr", "target_entropy_median", "target_entropy_iqr"]
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for s in summary:
        w.writerow([s["regime"], s["runs"]] + [_fmt(s[c]) for c in cols[2:]])
    return buf.getvalue()
