"""Displacement metrics at K and k-means self-ensembling of predictions."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .decoder import PredictionSet

MISS_THRESHOLD_M = 2.0


@dataclass
class MetricsReport:
    """Scenario-averaged metrics keyed by K."""

    min_ade: dict[int, float] = field(default_factory=dict)
    min_fde: dict[int, float] = field(default_factory=dict)
    miss_rate: dict[int, float] = field(default_factory=dict)
    b_min_fde: dict[int, float] = field(default_factory=dict)
    n_scenarios: int = 0
    per_scenario: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        out = {"n_scenarios": self.n_scenarios}
        for k in sorted(self.min_ade):
            out[f"K={k}"] = {
                "min_ade": self.min_ade[k],
                "min_fde": self.min_fde[k],
                "miss_rate": self.miss_rate[k],
                "b_min_fde": self.b_min_fde[k],
            }
        return out


def top_k_modes(pred: PredictionSet, k: int) -> np.ndarray:
    """Indices of the ``k`` most probable modes (stable: lower index wins ties)."""
    if pred.n_modes < k:
        raise ValueError(f"prediction has {pred.n_modes} modes, need at least {k}")
    return np.argsort(-pred.probabilities, kind="stable")[:k]


def scenario_errors(pred: PredictionSet, gt: np.ndarray, k: int) -> dict:
    """Per-scenario minADE, minFDE, miss flag and Brier-minFDE over the top-k modes."""
    gt = np.asarray(gt, dtype=float)
    if pred.trajectories.shape[1:] != gt.shape:
        raise ValueError(f"trajectory shape {pred.trajectories.shape[1:]} != ground truth {gt.shape}")
    idx = top_k_modes(pred, k)
    dist = np.linalg.norm(pred.trajectories[idx] - gt[None], axis=-1)   # (k, T)
    ade = dist.mean(axis=1)
    fde = dist[:, -1]
    best = int(np.argmin(fde))
    p = float(pred.probabilities[idx[best]])
    return {
        "min_ade": float(ade.min()),
        "min_fde": float(fde[best]),
        "miss": bool(fde[best] > MISS_THRESHOLD_M),
        "b_min_fde": float(fde[best] + (1.0 - p) ** 2),
        "best_mode": int(idx[best]),
    }


def evaluate(preds: Sequence[PredictionSet], gts: Sequence[np.ndarray], ks=(1, 6)) -> MetricsReport:
    """Average the per-scenario errors for each K in ``ks``."""
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} ground truths")
    if isinstance(ks, int):
        ks = (ks,)
    report = MetricsReport(n_scenarios=len(preds))
    rows = [{"scenario_id": p.scenario_id} for p in preds]
    for k in ks:
        errs = [scenario_errors(p, g, k) for p, g in zip(preds, gts)]
        n = max(len(errs), 1)
        report.min_ade[k] = sum(e["min_ade"] for e in errs) / n
        report.min_fde[k] = sum(e["min_fde"] for e in errs) / n
        report.miss_rate[k] = sum(e["miss"] for e in errs) / n
        report.b_min_fde[k] = sum(e["b_min_fde"] for e in errs) / n
        for row, e in zip(rows, errs):
            row.update({f"min_ade@{k}": e["min_ade"], f"min_fde@{k}": e["min_fde"],
                        f"miss@{k}": int(e["miss"]), f"b_min_fde@{k}": e["b_min_fde"]})
    report.per_scenario = rows
    return report


# ---------------------------------------------------------------------------- ensemble


def _farthest_point_init(x: np.ndarray, weights: np.ndarray, k: int, rng) -> np.ndarray:
    first = int(rng.choice(len(x), p=weights / weights.sum())) if weights.sum() > 0 else 0
    centers = [first]
    d = np.linalg.norm(x - x[first], axis=1)
    for _ in range(1, k):
        nxt = int(np.argmax(d))
        centers.append(nxt)
        d = np.minimum(d, np.linalg.norm(x - x[nxt], axis=1))
    return x[centers].copy()


def kmeans(x: np.ndarray, k: int, weights=None, seed: int = 0, max_iter: int = 50):
    """Lloyd's algorithm with farthest-point seeding.

    Returns ``(centers, labels)``. The first center is drawn with the given
    seed (proportional to ``weights``); every later one is the point
    farthest from the chosen set. An empty cluster keeps its old center.
    """
    x = np.asarray(x, dtype=float)
    w = np.ones(len(x)) if weights is None else np.asarray(weights, dtype=float)
    rng = np.random.default_rng(seed)
    centers = _farthest_point_init(x, w, k, rng)
    labels = np.full(len(x), -1)
    for _ in range(max_iter):
        d = np.linalg.norm(x[:, None, :] - centers[None], axis=2)
        new = np.argmin(d, axis=1)
        if np.array_equal(new, labels):
            break
        labels = new
        for c in range(k):
            members = labels == c
            if members.any():
                centers[c] = x[members].mean(axis=0)
    return centers, labels


def ensemble(submodel_outputs: Sequence[PredictionSet], n_out: int = 6, seed: int = 0,
             goals_only: bool = False) -> PredictionSet:
    """Merge the pooled modes of several predictions into ``n_out`` modes.

    Modes are clustered with k-means on flattened trajectories (or on goals
    only); the mean trajectory of each cluster becomes an output mode and
    its probability is the summed member probability, renormalized. When
    fewer than ``n_out`` distinct modes exist, the distinct modes are
    returned and the most probable one is duplicated to fill the gap; the
    result is flagged ``degenerate``.
    """
    if not submodel_outputs:
        raise ValueError("need at least one prediction to ensemble")
    traj = np.concatenate([p.trajectories for p in submodel_outputs])
    prob = np.concatenate([p.probabilities for p in submodel_outputs])
    T = traj.shape[1]
    flat = traj.reshape(len(traj), -1)
    # canonical order makes the result independent of submodel order
    order = np.lexsort(np.column_stack([flat, prob]).T[::-1])
    traj, flat, prob = traj[order], flat[order], prob[order]
    feats = flat[:, -2:] if goals_only else flat
    first = submodel_outputs[0]

    distinct, inverse = np.unique(flat, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    if len(distinct) < n_out:
        p = np.bincount(inverse, weights=prob, minlength=len(distinct))
        p = p / p.sum() if p.sum() > 0 else np.full(len(distinct), 1.0 / len(distinct))
        top = int(np.argmax(p))
        copies = n_out - len(distinct) + 1
        out_traj = [distinct[i] for i in range(len(distinct)) if i != top] + [distinct[top]] * copies
        out_p = [p[i] for i in range(len(distinct)) if i != top] + [p[top] / copies] * copies
        centers = np.asarray(out_traj).reshape(n_out, T, 2)
        probs = np.asarray(out_p)
        degenerate = True
    else:
        kcenters, labels = kmeans(feats, n_out, weights=prob, seed=seed)
        centers = np.stack([
            traj[labels == c].mean(axis=0) if (labels == c).any()
            else traj[int(np.argmin(np.linalg.norm(feats - kcenters[c], axis=1)))]
            for c in range(n_out)
        ])
        probs = np.array([prob[labels == c].sum() for c in range(n_out)])
        probs = probs / probs.sum() if probs.sum() > 0 else np.full(n_out, 1.0 / n_out)
        degenerate = False
    rank = np.argsort(-probs, kind="stable")
    centers, probs = centers[rank], probs[rank]
    return PredictionSet(
        goals=centers[:, -1].copy(),
        trajectories=centers,
        scores=np.log(np.maximum(probs, 1e-300)),
        probabilities=probs,
        agent_id=first.agent_id,
        scenario_id=first.scenario_id,
        degenerate=degenerate,
    )
