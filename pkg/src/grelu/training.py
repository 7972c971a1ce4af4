"""Full-batch training, evaluation and the repeated-split protocols."""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .activations import TABLE_ONE, ActivationSpec
from .adaptive import VARIANTS, GReluParams, make_variant
from .autodiff import Tensor, add, backward, nll_loss, scale, sum_squares
from .graph import DataSplit, Graph, random_split
from .models import ModelConfig, ModelSpec, Propagation, build_model, model_forward

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    """Training loss became NaN or infinite."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    learning_rate: float = 0.01
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    per_class: int = 20
    test_size: int = 1000

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class RunResult:
    seed: int
    final_train_acc: float
    final_test_acc: float
    epoch_times_ms: np.ndarray
    loss_curve: np.ndarray
    grelu_params: GReluParams | None = None

    @property
    def seconds(self) -> float:
        return float(np.sum(self.epoch_times_ms) / 1000.0)


@dataclass
class ProtocolResult:
    runs: list[RunResult]
    mean: float
    std: float
    best: float
    label: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        """Result document: dataset, backbone, activation, k, runs, mean, std, best."""
        return {
            "dataset": self.label.get("dataset", ""),
            "backbone": self.label.get("backbone", ""),
            "activation": self.label.get("activation", ""),
            "k": self.label.get("k"),
            "runs": [{"seed": r.seed, "test_acc": r.final_test_acc, "train_acc": r.final_train_acc,
                      "seconds": r.seconds} for r in self.runs],
            "mean": self.mean,
            "std": self.std,
            "best": self.best,
        }


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: AdamState, cfg: TrainConfig,
              decay_mask: list[bool] | None = None) -> AdamState:
    """One Adam update in place; L2 decay is added to the gradient first."""
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.data.shape != g.shape:
            raise ValueError(f"gradient {g.shape} does not match parameter {p.data.shape}")
        if decay_mask is not None and decay_mask[i] and cfg.weight_decay:
            g = g + cfg.weight_decay * p.data
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        p.data = p.data - cfg.learning_rate * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + cfg.eps)
    return state


# ---------------------------------------------------------------------------
# training


def evaluate(logits, labels, mask) -> float:
    """Fraction of masked nodes whose argmax logit (first on ties) is the label."""
    mask = np.asarray(mask, dtype=np.int64)
    if mask.size == 0:
        raise ValueError("evaluate on an empty mask")
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return float(np.mean(np.argmax(z[mask], axis=1) == np.asarray(labels)[mask]))


def train_one(model: ModelSpec, g: Graph | Propagation, split: DataSplit, cfg: TrainConfig,
              seed: int) -> RunResult:
    prop = g if isinstance(g, Propagation) else Propagation.of(g, model.self_loops)
    graph = prop.context.graph
    labels = graph.labels
    params = model.parameters()
    decayed = {id(p) for p in model.decayed_parameters()}
    mask = [id(p) in decayed for p in params]
    state = AdamState.zeros(params)
    rng = np.random.default_rng(seed)
    times = np.zeros(cfg.epochs)
    losses = np.zeros(cfg.epochs)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        logits = model_forward(model, prop, train_mode=True, seed=rng)
        loss = nll_loss(logits, labels, split.train)
        value = float(loss.data[0, 0])
        if cfg.weight_decay:
            value += 0.5 * cfg.weight_decay * sum(float(np.sum(p.data ** 2)) for p, m in zip(params, mask) if m)
        if not np.isfinite(value):
            raise DivergenceError(f"loss became {value} at epoch {epoch} (seed {seed})")
        grads = backward(loss)
        adam_step(params, [grads.get(p, np.zeros_like(p.data)) for p in params], state, cfg, mask)
        times[epoch] = (time.perf_counter() - t0) * 1000.0
        losses[epoch] = value
    logits = model_forward(model, prop, train_mode=False)
    if not np.all(np.isfinite(logits.data)):
        raise DivergenceError(f"non-finite logits after training (seed {seed})")
    snap = next((a.last_params for a in model.activations() if getattr(a, "last_params", None)), None)
    return RunResult(seed, evaluate(logits, labels, split.train), evaluate(logits, labels, split.test),
                     times, losses, snap)


def regularized_loss(model: ModelSpec, logits: Tensor, labels, train, weight_decay: float) -> Tensor:
    """Training loss with the L2 term on the tape (for gradient checks)."""
    loss = nll_loss(logits, labels, train)
    for p in model.decayed_parameters():
        loss = add(loss, scale(sum_squares(p), 0.5 * weight_decay))
    return loss


def _summary(accs) -> tuple[float, float, float]:
    accs = np.asarray(accs, dtype=np.float64)
    std = float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0
    return float(np.mean(accs)), std, float(np.max(accs))


def _one_run(args) -> RunResult:
    model_cfg, g, cfg, seed, split_seed = args
    split = random_split(g, split_seed, cfg.per_class, cfg.test_size)
    model = build_model(model_cfg, g.features.cols, g.num_classes, seed)
    return train_one(model, Propagation.of(g, model.self_loops), split, cfg, seed)


def worker_count(requested: int | None = None) -> int:
    cap = int(os.environ.get("GRELU_THREADS", "1") or 1)
    n = cap if requested is None else min(requested, cap)
    return max(1, n)


def run_protocol(model_cfg: ModelConfig, g: Graph, cfg: TrainConfig, n_runs: int = 10,
                 seed: int = 0, workers: int | None = None, seeds: list[int] | None = None) -> ProtocolResult:
    """Repeat training over fresh splits and initializations seeded ``seed + i``.

    ``seeds`` overrides the seed list (repeating a seed repeats the run).
    """
    if seeds is None:
        if n_runs < 1:
            raise ValueError("n_runs must be >= 1")
        seeds = [seed + i for i in range(n_runs)]
    jobs = [(model_cfg, g, cfg, s, s) for s in seeds]
    n = worker_count(workers)
    if n > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(n, len(jobs))) as pool:
            runs = list(pool.map(_one_run, jobs))
    else:
        runs = [_one_run(j) for j in jobs]
    mean, std, best = _summary([r.final_test_acc for r in runs])
    act = model_cfg.activation
    label = {"dataset": g.name, "backbone": model_cfg.backbone, "activation": act.label,
             "k": act.grelu.K if act.kind == "grelu" else None}
    return ProtocolResult(runs, mean, std, best, label)


def grelu_config(model_cfg: ModelConfig, variant: str = "A", **overrides) -> ModelConfig:
    base = model_cfg.activation.grelu if model_cfg.activation.kind == "grelu" else None
    keep = {}
    if base is not None:
        keep = {"node_scale": base.node_scale, "diffusion": base.diffusion, "input_source": base.input_source}
    keep.update(overrides)
    return replace(model_cfg, activation=ActivationSpec("grelu", grelu=make_variant(variant, **keep)))


def k_sweep(model_cfg: ModelConfig, g: Graph, cfg: TrainConfig, ks=(2, 3, 4, 5, 6, 7),
            n_runs: int = 10, seed: int = 0, workers: int | None = None) -> list[dict]:
    rows = []
    for k in ks:
        if k < 1:
            raise ValueError(f"K must be >= 1, got {k}")
        res = run_protocol(grelu_config(model_cfg, "A", K=k), g, cfg, n_runs, seed, workers)
        rows.append({"k": k, "mean": res.mean, "std": res.std, "best": res.best, "result": res})
    return rows


ABLATION_ROWS = tuple(VARIANTS) + ("ReLU", "SGC")


def ablation_suite(model_cfg: ModelConfig, g: Graph, cfg: TrainConfig, n_runs: int = 10,
                   seed: int = 0, workers: int | None = None, rows=ABLATION_ROWS) -> list[dict]:
    """Variants A-G plus the ReLU and SGC baselines on shared seeds and splits."""
    table = []
    for name in rows:
        if name == "ReLU":
            mc = replace(model_cfg, backbone="gcn", activation=ActivationSpec("relu"))
            kind, k = "Non-linear", None
        elif name == "SGC":
            mc = replace(model_cfg, backbone="sgc", activation=ActivationSpec("identity"),
                         propagation_depth=model_cfg.layers)
            kind, k = "Linear", None
        else:
            mc = grelu_config(model_cfg, name)
            k = mc.activation.grelu.K
            kind = "Linear" if k == 1 else "Non-linear"
        res = run_protocol(mc, g, cfg, n_runs, seed, workers)
        table.append({"model": name if name in ("ReLU", "SGC") else f"GReLU-{name}", "type": kind,
                      "k": k, "mean": res.mean, "std": res.std, "best": res.best, "result": res})
    return table


def runtime_bench(model_cfg: ModelConfig, g: Graph, cfg: TrainConfig,
                  activations=TABLE_ONE, seed: int = 0, repeats: int = 1, warmup: bool = True) -> list[dict]:
    """Wall-clock of ``cfg.epochs`` training epochs per activation, run serially.

    With ``repeats > 1`` the activations are timed round-robin and each row
    keeps its fastest round, which damps scheduler noise on shared machines.
    ``warmup`` runs a few untimed epochs first so import and cache effects do
    not land on the first activation.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    split = random_split(g, seed, cfg.per_class, cfg.test_size)
    configs = []
    for kind in activations:
        spec = ActivationSpec(kind)
        if kind == "grelu" and model_cfg.activation.kind == "grelu":
            spec = model_cfg.activation
        configs.append((kind, replace(model_cfg, activation=spec)))
    props = {}

    def timed(mc, c):
        model = build_model(mc, g.features.cols, g.num_classes, seed)
        if model.self_loops not in props:
            props[model.self_loops] = Propagation.of(g, model.self_loops)
        t0 = time.perf_counter()
        res = train_one(model, props[model.self_loops], split, c, seed)
        return time.perf_counter() - t0, res

    if warmup and configs and cfg.epochs:
        for _, mc in configs:
            timed(mc, replace(cfg, epochs=min(cfg.epochs, 3)))
    best = {}
    for _ in range(repeats):
        for kind, mc in configs:
            total, res = timed(mc, cfg)
            if kind not in best or total < best[kind][0]:
                best[kind] = (total, res)
    rows = []
    for kind, _ in configs:
        total, res = best[kind]
        rows.append({"activation": kind, "seconds": total, "epochs_per_sec": cfg.epochs / total if total else 0.0,
                     "epoch_times_ms": res.epoch_times_ms.tolist(), "test_acc": res.final_test_acc})
    return rows


def config_dict(cfg) -> dict:
    return asdict(cfg)
