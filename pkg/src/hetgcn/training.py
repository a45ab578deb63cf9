"""Run configuration, training loop and batch prediction."""

from __future__ import annotations

import contextlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .decoder import LossConfig, PredictionSet, compute_loss, to_prediction_sets
from .graph import DynamicHeteroGraph, GraphBatch, GraphConfig, assemble_dynamic_graph
from .metrics import evaluate
from .model import HeteroGCN, ModelConfig
from .optim import AdamState, adam_step, load_checkpoint, save_checkpoint
from .scenario import Scenario, normalize_scenario

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # graph
    tau: int = 5
    n_snapshots: int = 4
    k_nearest: int = 6
    delta_aa: float = 50.0
    segment_len: float = 5.0
    opposing_angle_deg: float = 120.0
    # model
    d: int = 128
    gcm_layers: int = 2
    n_modes: int = 6
    variant: str = "hetero_dynamic"
    t_future: int = 30
    coord_scale: float = 0.1
    # loss
    goal_weight: float = 1.0
    reg_weight: float = 1.0
    score_weight: float = 1.0
    margin: float = 0.2
    all_agents: bool = False
    # optimizer
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 128
    epochs: int = 40
    save_every: int = 0
    # run
    seed: int = 0
    precision: str = "float64"
    workers: int = 1

    def __post_init__(self):
        checks = [
            (self.tau >= 1 and self.n_snapshots >= 1, "tau and n_snapshots must be >= 1"),
            (self.k_nearest >= 1, "k_nearest must be >= 1"),
            (self.delta_aa > 0 and self.segment_len > 0, "delta_aa and segment_len must be > 0"),
            (0 < self.opposing_angle_deg <= 180, "opposing_angle_deg must be in (0, 180]"),
            (self.d >= 1 and self.gcm_layers >= 1 and self.n_modes >= 1, "d, gcm_layers, n_modes must be >= 1"),
            (self.t_future >= 2, "t_future must be >= 2"),
            (self.lr >= 0 and 0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0,
             "invalid Adam hyperparameters"),
            (self.batch_size >= 1 and self.epochs >= 0 and self.save_every >= 0,
             "batch_size >= 1, epochs >= 0, save_every >= 0"),
            (min(self.goal_weight, self.reg_weight, self.score_weight) >= 0
             and max(self.goal_weight, self.reg_weight, self.score_weight) > 0,
             "loss weights must be >= 0 with one > 0"),
            (self.precision in ("float64", "float32"), "precision must be float64 or float32"),
            (self.workers >= 1, "workers must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        try:
            self.model().encoder()
            self.model().decoder()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def t_hist(self) -> int:
        return self.tau * self.n_snapshots

    def graph(self) -> GraphConfig:
        return GraphConfig(self.tau, self.n_snapshots, self.k_nearest, self.delta_aa,
                           self.segment_len, self.opposing_angle_deg)

    def model(self) -> ModelConfig:
        return ModelConfig(self.d, self.gcm_layers, self.variant, self.n_modes, self.tau,
                           self.t_future, self.coord_scale)

    def loss(self) -> LossConfig:
        return LossConfig(self.goal_weight, self.reg_weight, self.score_weight, self.margin)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for k, v in d.items():
            kw[k] = _coerce(known[k].type, v, k)
        return cls(**kw)


def _coerce(type_name, value, key: str):
    t = type_name if isinstance(type_name, str) else type_name.__name__
    try:
        if t == "bool":
            if isinstance(value, str):
                if value.lower() in ("1", "true", "yes", "on"):
                    return True
                if value.lower() in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            return bool(value)
        if t == "int":
            return int(value)
        if t == "float":
            return float(value)
        return str(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {t}") from None


def read_config_file(path: str | Path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (x.strip() for x in line.split("=", 1))
        out[key] = value
    return out


@contextlib.contextmanager
def single_threaded(enabled: bool = True):
    """Pin BLAS to one thread so floating point reductions are reproducible."""
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=1):
        yield


# ---------------------------------------------------------------------------- data


def check_dataset(scenarios: Sequence[Scenario], cfg: RunConfig) -> None:
    if not scenarios:
        raise ConfigError("dataset is empty")
    for s in scenarios:
        if s.t_hist != cfg.t_hist:
            raise ConfigError(f"scenario {s.scenario_id!r}: t_hist={s.t_hist} but "
                              f"tau*n_snapshots={cfg.t_hist}")
        if s.t_future != cfg.t_future:
            raise ConfigError(f"scenario {s.scenario_id!r}: t_future={s.t_future} but config "
                              f"t_future={cfg.t_future}")


def build_graphs(scenarios: Sequence[Scenario], cfg: RunConfig,
                 deterministic: bool = True) -> list[DynamicHeteroGraph]:
    gcfg = cfg.graph()

    def one(s: Scenario) -> DynamicHeteroGraph:
        return assemble_dynamic_graph(normalize_scenario(s), gcfg)

    if cfg.workers > 1 and not deterministic:
        with ThreadPoolExecutor(cfg.workers) as pool:
            return list(pool.map(one, scenarios))
    return [one(s) for s in scenarios]


def target_rows(graphs: Sequence[DynamicHeteroGraph], batch: GraphBatch, all_agents: bool):
    """Agent rows that contribute to the loss, with their ground truth."""
    if not all_agents:
        rows = batch.focal_rows
    else:
        rows = np.flatnonzero(batch.future_mask.all(axis=1))
    if not batch.future_mask[rows].all():
        raise ConfigError("a target agent lacks ground truth for some future frame")
    return rows, batch.future[rows]


# ---------------------------------------------------------------------------- train / predict


@dataclass
class TrainResult:
    model: HeteroGCN
    history: list[dict]


def train(scenarios: Sequence[Scenario], cfg: RunConfig, out_dir: str | Path | None = None,
          on_epoch: Callable[[dict], None] | None = None, deterministic: bool = True,
          initial_params: dict | None = None) -> TrainResult:
    """Mini-batch Adam training; returns the model and the per-epoch log.

    Every epoch appends ``{epoch, loss, goal, reg, score}`` (batch-size
    weighted means). After the last epoch the training set is predicted
    with the final parameters and a ``final`` record holding the training
    metrics is appended. With ``out_dir`` the log is written as
    line-delimited JSON and checkpoints as ``checkpoint`` (plus
    ``checkpoint_epoch{n}`` every ``save_every`` epochs).
    """
    check_dataset(scenarios, cfg)
    ad.set_default_dtype(cfg.precision)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = open(out / "train_log.jsonl", "w")
    else:
        log_file = None

    history: list[dict] = []

    def emit(rec: dict) -> None:
        history.append(rec)
        if log_file is not None:
            log_file.write(json.dumps(rec, sort_keys=True) + "\n")
            log_file.flush()
        if on_epoch is not None:
            on_epoch(rec)

    try:
        with single_threaded(deterministic):
            graphs = build_graphs(scenarios, cfg, deterministic)
            model = HeteroGCN(cfg.model(), seed=cfg.seed)
            if initial_params is not None:
                model.params.load(initial_params)
            state = AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
            rng = np.random.default_rng(cfg.seed + 1)
            loss_cfg = cfg.loss()
            names = list(model.params)
            for epoch in range(1, cfg.epochs + 1):
                order = rng.permutation(len(graphs))
                sums = {"loss": 0.0, "goal": 0.0, "reg": 0.0, "score": 0.0}
                n_seen = 0
                for start in range(0, len(order), cfg.batch_size):
                    members = [graphs[i] for i in order[start:start + cfg.batch_size]]
                    batch = GraphBatch.from_graphs(members)
                    rows, gt = target_rows(members, batch, cfg.all_agents)
                    with ad.Tape() as tape:
                        pred = model.forward(batch, rows)
                        total, parts, _ = compute_loss(pred, gt, loss_cfg)
                    ad.backward(total, tape, model.params.values())
                    grads = {k: model.params[k].grad for k in names}
                    adam_step(model.params, grads, state)
                    w = len(members)
                    sums["loss"] += float(total.data) * w
                    for k in ("goal", "reg", "score"):
                        sums[k] += float(parts[k].data) * w
                    n_seen += w
                rec = {"epoch": epoch, **{k: v / n_seen for k, v in sums.items()}}
                log.info("epoch %d loss %.4f", epoch, rec["loss"])
                emit(rec)
                if out is not None and cfg.save_every and epoch % cfg.save_every == 0:
                    save_checkpoint(out / f"checkpoint_epoch{epoch}", model.params, cfg.to_dict())
            preds = predict_graphs(model, graphs, cfg.batch_size)
            gts = [g.future[g.focal_index] for g in graphs]
            ks = sorted({1, cfg.n_modes})
            report = evaluate(preds, gts, ks)
            emit({"final": True, "epochs": cfg.epochs, "train_metrics": report.to_dict()})
            if out is not None:
                save_checkpoint(out / "checkpoint", model.params, cfg.to_dict())
    finally:
        if log_file is not None:
            log_file.close()
    return TrainResult(model, history)


def predict_graphs(model: HeteroGCN, graphs: Sequence[DynamicHeteroGraph],
                   batch_size: int = 128) -> list[PredictionSet]:
    """Focal-agent predictions, one per graph, in input order."""
    out: list[PredictionSet] = []
    for start in range(0, len(graphs), batch_size):
        members = list(graphs[start:start + batch_size])
        batch = GraphBatch.from_graphs(members)
        pred = model.forward(batch)
        out.extend(to_prediction_sets(
            pred,
            agent_ids=[g.agent_ids[g.focal_index] for g in members],
            scenario_ids=[g.scenario_id for g in members],
        ))
    return out


def load_model(checkpoint: str | Path) -> tuple[HeteroGCN, RunConfig]:
    values, config = load_checkpoint(checkpoint)
    cfg = RunConfig.from_dict(config)
    ad.set_default_dtype(cfg.precision)
    model = HeteroGCN(cfg.model(), seed=cfg.seed)
    model.params.load(values)
    return model, cfg


def predict_scenarios(model: HeteroGCN, cfg: RunConfig, scenarios: Sequence[Scenario],
                      deterministic: bool = True) -> list[PredictionSet]:
    """Predict the focal agent of each scenario in the normalized frame."""
    for s in scenarios:
        if s.t_hist != cfg.t_hist:
            raise ConfigError(f"scenario {s.scenario_id!r}: t_hist={s.t_hist}, model expects "
                              f"{cfg.t_hist}")
    with single_threaded(deterministic):
        graphs = build_graphs(scenarios, replace(cfg, workers=1) if deterministic else cfg,
                              deterministic)
        return predict_graphs(model, graphs, cfg.batch_size)
