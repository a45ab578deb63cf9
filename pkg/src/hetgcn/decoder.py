"""Goal-based three-branch prediction head and the training loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .layers import init_mlp, mlp
from .optim import ParamStore


@dataclass(frozen=True)
class DecoderConfig:
    d: int = 128
    n_modes: int = 6
    t_future: int = 30
    coord_scale: float = 0.1

    def __post_init__(self):
        if self.n_modes < 1:
            raise ValueError("n_modes must be >= 1")
        if self.t_future < 2:
            raise ValueError("t_future must be >= 2")


@dataclass(frozen=True)
class LossConfig:
    goal_weight: float = 1.0
    reg_weight: float = 1.0
    score_weight: float = 1.0
    margin: float = 0.2

    def __post_init__(self):
        ws = (self.goal_weight, self.reg_weight, self.score_weight)
        if min(ws) < 0 or max(ws) <= 0:
            raise ValueError("loss weights must be >= 0 with at least one > 0")


@dataclass
class Prediction:
    """Decoder output for ``n`` target agents (autodiff tensors).

    goals ``(n, K, 2)``, trajectories ``(n, K, T, 2)`` whose last step is
    the goal, scores ``(n, K)`` and probabilities ``(n, K)``.
    """

    goals: ad.Tensor
    trajectories: ad.Tensor
    scores: ad.Tensor
    probabilities: ad.Tensor


@dataclass(frozen=True)
class PredictionSet:
    """Plain-array prediction for one agent: K modes of T states each."""

    goals: np.ndarray           # (K, 2)
    trajectories: np.ndarray    # (K, T, 2), last state == goal
    scores: np.ndarray          # (K,)
    probabilities: np.ndarray   # (K,)
    agent_id: str = ""
    scenario_id: str = ""
    degenerate: bool = False

    @property
    def n_modes(self) -> int:
        return self.goals.shape[0]

    def to_dict(self) -> dict:
        d = {
            "scenario_id": self.scenario_id,
            "agent_id": self.agent_id,
            "modes": [
                {
                    "goal": g.tolist(),
                    "trajectory": tr.tolist(),
                    "score": float(s),
                    "probability": float(p),
                }
                for g, tr, s, p in zip(self.goals, self.trajectories, self.scores, self.probabilities)
            ],
        }
        if self.degenerate:
            d["degenerate"] = True
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PredictionSet":
        modes = d["modes"]
        if not modes:
            raise ValueError("prediction has no modes")
        return cls(
            goals=np.array([m["goal"] for m in modes], dtype=float),
            trajectories=np.array([m["trajectory"] for m in modes], dtype=float),
            scores=np.array([m["score"] for m in modes], dtype=float),
            probabilities=np.array([m["probability"] for m in modes], dtype=float),
            agent_id=d.get("agent_id", ""),
            scenario_id=d.get("scenario_id", ""),
            degenerate=bool(d.get("degenerate", False)),
        )


def init_decoder(store: ParamStore, cfg: DecoderConfig) -> None:
    d, K, T = cfg.d, cfg.n_modes, cfg.t_future
    init_mlp(store, "decoder.goal", [d, d, 2 * K])
    init_mlp(store, "decoder.goal_embed", [2, d, d])
    init_mlp(store, "decoder.reg", [2 * d, d, 2 * (T - 1)])
    init_mlp(store, "decoder.step_embed", [2, d])
    init_mlp(store, "decoder.score", [2 * d, d, 1])


def predict(h, params, cfg: DecoderConfig) -> Prediction:
    """Decode agent features ``h`` ``(n, d)`` into K scored trajectories.

    The scoring branch sees the agent feature and the mean step embedding of
    each trajectory; its trajectory input is detached so the score loss
    never reaches the goal and regression branches.
    """
    n, d = h.shape
    if d != cfg.d:
        raise ad.ShapeError(f"decoder expects width {cfg.d}, got features of shape {h.shape}")
    K, T = cfg.n_modes, cfg.t_future
    unit = 1.0 / cfg.coord_scale
    goals_s = ad.reshape(mlp(params, "decoder.goal", h, 2), (n * K, 2))
    h_rep = ad.gather_rows(h, np.repeat(np.arange(n), K))
    goal_emb = mlp(params, "decoder.goal_embed", goals_s, 2)
    steps_s = mlp(params, "decoder.reg", ad.concat([h_rep, goal_emb]), 2)
    traj_s = ad.concat([steps_s, goals_s])                       # (n K, 2 T)

    flat = ad.detach(ad.reshape(traj_s, (n * K * T, 2)))
    emb = mlp(params, "decoder.step_embed", flat, 1, final_relu=True)
    summary = ad.mean_axis(ad.reshape(emb, (n * K, T, cfg.d)), 1)
    scores = ad.reshape(mlp(params, "decoder.score", ad.concat([h_rep, summary]), 2), (n, K))

    goals = ad.scale(ad.reshape(goals_s, (n, K, 2)), unit)
    traj = ad.scale(ad.reshape(traj_s, (n, K, T, 2)), unit)
    return Prediction(goals, traj, scores, ad.softmax(scores))


def to_prediction_sets(pred: Prediction, agent_ids=None, scenario_ids=None) -> list[PredictionSet]:
    out = []
    for i in range(pred.goals.shape[0]):
        out.append(PredictionSet(
            goals=pred.goals.data[i].copy(),
            trajectories=pred.trajectories.data[i].copy(),
            scores=pred.scores.data[i].copy(),
            probabilities=pred.probabilities.data[i].copy(),
            agent_id="" if agent_ids is None else agent_ids[i],
            scenario_id="" if scenario_ids is None else scenario_ids[i],
        ))
    return out


def smooth_l1_2d(diff):
    """Per-row smooth-l1 of 2-vectors (sum over the two coordinates)."""
    return ad.sum_axis(ad.smooth_l1(diff), -1)


def select_modes(goals: np.ndarray, gt_final: np.ndarray) -> np.ndarray:
    """Index of the mode with the smallest smooth-l1 goal error, lowest index on ties."""
    x = np.abs(goals - gt_final[:, None, :])
    err = np.where(x < 1.0, 0.5 * x * x, x - 0.5).sum(axis=-1)
    return np.argmin(err, axis=1)


def compute_loss(pred: Prediction, gt, cfg: LossConfig = LossConfig()):
    """Weighted goal, regression and max-margin score loss.

    ``gt`` is ``(n, T, 2)``. Returns ``(total, parts, k_star)`` where
    ``parts`` maps ``goal``/``reg``/``score`` to scalar tensors.
    """
    gt = np.asarray(gt, dtype=float)
    n, K = pred.scores.shape
    T = pred.trajectories.shape[2]
    if T < 2:
        raise ValueError("need at least 2 future states")
    if K < 1:
        raise ValueError("need at least one mode")
    if gt.shape != (n, T, 2):
        raise ad.ShapeError(f"ground truth shape {gt.shape}, expected {(n, T, 2)}")
    k_star = select_modes(pred.goals.data, gt[:, -1])
    flat = np.arange(n) * K + k_star

    goals = ad.gather_rows(ad.reshape(pred.goals, (n * K, 2)), flat)
    l_goal = ad.mean_all(smooth_l1_2d(ad.sub(goals, gt[:, -1])))

    steps = ad.gather_rows(ad.reshape(pred.trajectories, (n * K, T * 2)), flat)
    steps = ad.reshape(ad.slice_cols(steps, 0, 2 * (T - 1)), (n * (T - 1), 2))
    l_reg = ad.mean_all(smooth_l1_2d(ad.sub(steps, gt[:, :-1].reshape(-1, 2))))

    if K > 1:
        q_star = ad.gather_rows(ad.reshape(pred.scores, (n * K, 1)), flat)
        hinge = ad.relu(ad.add(ad.sub(pred.scores, q_star), cfg.margin))
        others = np.ones((n, K))
        others[np.arange(n), k_star] = 0.0
        l_score = ad.scale(ad.sum_all(ad.mul(hinge, others)), 1.0 / (n * (K - 1)))
    else:
        l_score = ad.Tensor(0.0)

    total = ad.add(ad.add(ad.scale(l_goal, cfg.goal_weight), ad.scale(l_reg, cfg.reg_weight)),
                   ad.scale(l_score, cfg.score_weight))
    return total, {"goal": l_goal, "reg": l_reg, "score": l_score}, k_star
