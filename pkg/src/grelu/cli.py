"""Command-line entry point.

    grelu <train|ablate|sweep-k|inspect|bench|gen> --config cfg.json
          [--seed-override N] [--out PATH] [--serial]

Exit codes: 0 success, 1 configuration error, 2 dataset error, 3 numeric
divergence.  ``GRELU_THREADS`` caps the number of worker processes.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .activations import TABLE_ONE, ActivationSpec
from .adaptive import inspect_csv, inspect_rows, make_variant
from .diffusion import DiffusionConfig
from .graph import GraphFormatError, SplitError, load_graph, save_graph, synthetic_sbm
from .models import ModelConfig
from .training import (
    DivergenceError,
    TrainConfig,
    ablation_suite,
    k_sweep,
    run_protocol,
    runtime_bench,
)

log = logging.getLogger("grelu")

EXIT_CONFIG, EXIT_DATASET, EXIT_DIVERGED = 1, 2, 3


class ConfigError(ValueError):
    pass


_GRELU_KEYS = {"variant", "K", "teleport", "node_scale", "input_source", "max_terms", "tolerance",
               "stop_gradient"}
_ACT_KEYS = {"kind", "slope", "elu_alpha"}
_GEN_KEYS = {"blocks", "nodes_per_block", "p_in", "p_out", "feat_dim", "seed", "noise"}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


@dataclass
class ExperimentConfig:
    dataset_dir: str | None = None
    backbone: str = "gcn"
    hidden: int = 16
    layers: int = 2
    dropout: float = 0.5
    propagation_depth: int = 2
    self_loops: bool | None = None
    activation: dict | str = "relu"
    grelu: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    runs: int = 10
    seed: int = 0
    ks: list = field(default_factory=lambda: [2, 3, 4, 5, 6, 7])
    activations: list = field(default_factory=lambda: list(TABLE_ONE))
    variants: list | None = None
    output: str | None = None
    snapshot: str | None = None
    sample: int = 1000
    generate: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**doc)
        _reject(cfg.grelu, _GRELU_KEYS, "grelu")
        _reject(cfg.train, _TRAIN_KEYS, "train")
        _reject(cfg.generate, _GEN_KEYS, "generate")
        if isinstance(cfg.activation, dict):
            _reject(cfg.activation, _ACT_KEYS, "activation")
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        return cls.from_dict(doc)

    def activation_spec(self) -> ActivationSpec:
        act = {"kind": self.activation} if isinstance(self.activation, str) else dict(self.activation)
        kind = act.pop("kind", "relu")
        try:
            if str(kind).lower() == "grelu":
                return ActivationSpec("grelu", grelu=self.grelu_config(), **act)
            return ActivationSpec(kind, **act)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad activation: {exc}") from None

    def grelu_config(self, variant: str | None = None, K: int | None = None):
        g = dict(self.grelu)
        tag = variant or g.pop("variant", "A")
        g.pop("variant", None)
        diff = {}
        for key, name in (("teleport", "teleport"), ("max_terms", "max_terms"),
                          ("tolerance", "tolerance"), ("stop_gradient", "stop_gradient")):
            if key in g:
                diff[name] = g.pop(key)
        if K is not None:
            g["K"] = K
        try:
            return make_variant(tag, diffusion=DiffusionConfig(**diff), **g)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad grelu section: {exc}") from None

    def model_config(self) -> ModelConfig:
        try:
            return ModelConfig(backbone=self.backbone, hidden=self.hidden, layers=self.layers,
                               activation=self.activation_spec(), dropout=self.dropout,
                               propagation_depth=self.propagation_depth, self_loops=self.self_loops)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(**self.train)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad train section: {exc}") from None


def _reject(section, allowed, name):
    if not isinstance(section, dict):
        raise ConfigError(f"'{name}' must be an object")
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in '{name}': {sorted(unknown)}")


def _graph(cfg: ExperimentConfig):
    if not cfg.dataset_dir:
        raise ConfigError("config needs 'dataset_dir'")
    return load_graph(cfg.dataset_dir)


def _out_path(args, cfg: ExperimentConfig) -> Path | None:
    p = args.out or cfg.output
    return Path(p) if p else None


def _emit_json(doc, path: Path | None) -> None:
    text = json.dumps(doc, indent=2, sort_keys=False) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _emit_table(doc, header, rows, path: Path | None) -> None:
    _emit_json(doc, path)
    text = _csv_text(header, rows)
    if path is None:
        sys.stdout.write(text)
    else:
        path.with_suffix(".csv").write_text(text)


def _workers(args) -> int | None:
    return 1 if args.serial else None


def _seeds(args, cfg):
    if args.seed_override is not None:
        return 1, args.seed_override
    return cfg.runs, cfg.seed


def cmd_train(args, cfg: ExperimentConfig) -> int:
    g = _graph(cfg)
    mc, tc = cfg.model_config(), cfg.train_config()
    n, seed = _seeds(args, cfg)
    res = run_protocol(mc, g, tc, n_runs=n, seed=seed, workers=_workers(args))
    _emit_json(res.to_json(), _out_path(args, cfg))
    if cfg.snapshot:
        snap = res.runs[0].grelu_params
        if snap is None:
            raise ConfigError("'snapshot' needs a GReLU activation")
        alpha, beta = snap.composed()
        meta = {"dataset": g.name, "activation": mc.activation.label, "K": snap.K, "seed": res.runs[0].seed}
        path = Path(cfg.snapshot)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            np.savez(fh, alpha=alpha, beta=beta, meta=json.dumps(meta))
    return 0


def cmd_ablate(args, cfg: ExperimentConfig) -> int:
    g = _graph(cfg)
    n, seed = _seeds(args, cfg)
    rows = tuple(cfg.variants) if cfg.variants else None
    kw = {"rows": rows} if rows else {}
    table = ablation_suite(cfg.model_config(), g, cfg.train_config(), n, seed, _workers(args), **kw)
    doc = {"dataset": g.name, "rows": [{k: r[k] for k in ("model", "type", "k", "mean", "std", "best")}
                                        | {"runs": r["result"].to_json()["runs"]} for r in table]}
    csv_rows = [(r["model"], r["type"], "" if r["k"] is None else r["k"], repr(r["mean"]), repr(r["std"]))
                for r in table]
    _emit_table(doc, ("model", "type", "k", "mean", "std"), csv_rows, _out_path(args, cfg))
    return 0


def cmd_sweep_k(args, cfg: ExperimentConfig) -> int:
    g = _graph(cfg)
    n, seed = _seeds(args, cfg)
    mc = replace(cfg.model_config(), activation=ActivationSpec("grelu", grelu=cfg.grelu_config()))
    rows = k_sweep(mc, g, cfg.train_config(), cfg.ks, n, seed, _workers(args))
    doc = {"dataset": g.name, "rows": [{"k": r["k"], "mean": r["mean"], "std": r["std"], "best": r["best"],
                                        "runs": r["result"].to_json()["runs"]} for r in rows]}
    _emit_table(doc, ("k", "mean", "std"), [(r["k"], repr(r["mean"]), repr(r["std"])) for r in rows],
                _out_path(args, cfg))
    return 0


def cmd_inspect(args, cfg: ExperimentConfig) -> int:
    if not cfg.snapshot:
        raise ConfigError("config needs 'snapshot'")
    path = Path(cfg.snapshot)
    if not path.is_file():
        raise ConfigError(f"snapshot {path} not found")
    with np.load(path) as data:
        alpha, beta = data["alpha"], data["beta"]
    seed = args.seed_override if args.seed_override is not None else cfg.seed
    try:
        rows = inspect_rows(alpha, beta, cfg.sample, seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    text = inspect_csv(rows)
    out = _out_path(args, cfg)
    if out is None:
        sys.stdout.write(text)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
    return 0


def cmd_bench(args, cfg: ExperimentConfig) -> int:
    g = _graph(cfg)
    seed = args.seed_override if args.seed_override is not None else cfg.seed
    mc = cfg.model_config()
    if mc.activation.kind != "grelu":
        mc = replace(mc, activation=ActivationSpec("grelu", grelu=cfg.grelu_config()))
    rows = runtime_bench(mc, g, cfg.train_config(), tuple(cfg.activations), seed)
    _emit_json({"dataset": g.name, "serial": True, "epochs": cfg.train_config().epochs, "rows": rows},
               _out_path(args, cfg))
    return 0


def cmd_gen(args, cfg: ExperimentConfig) -> int:
    params = {"blocks": 4, "nodes_per_block": 25, "p_in": 0.3, "p_out": 0.02, "feat_dim": 16, "seed": 0}
    params.update(cfg.generate)
    if args.seed_override is not None:
        params["seed"] = args.seed_override
    out = _out_path(args, cfg)
    if out is None:
        raise ConfigError("gen needs --out or 'output'")
    try:
        g = synthetic_sbm(**params)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad generate section: {exc}") from None
    save_graph(g, out)
    return 0


COMMANDS = {
    "train": cmd_train,
    "ablate": cmd_ablate,
    "sweep-k": cmd_sweep_k,
    "inspect": cmd_inspect,
    "bench": cmd_bench,
    "gen": cmd_gen,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="grelu", description=__doc__.split("\n\n")[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="experiment config (JSON)")
    p.add_argument("--seed-override", type=int, default=None, help="run a single seed")
    p.add_argument("--out", default=None, help="output path (JSON; CSV tables next to it)")
    p.add_argument("--serial", action="store_true", help="disable worker processes")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=os.environ.get("GRELU_LOGLEVEL", "WARNING"))
    try:
        cfg = ExperimentConfig.load(args.config)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (GraphFormatError, SplitError) as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return EXIT_DATASET
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
