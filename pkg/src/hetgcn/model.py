"""Encoder + decoder wiring and parameter bookkeeping."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .decoder import DecoderConfig, Prediction, init_decoder, predict
from .encoder import VARIANTS, EncoderConfig, encode_scenario, init_encoder
from .graph import GraphBatch
from .optim import ParamStore


@dataclass(frozen=True)
class ModelConfig:
    d: int = 128
    gcm_layers: int = 2
    variant: str = "hetero_dynamic"
    n_modes: int = 6
    tau: int = 5
    t_future: int = 30
    coord_scale: float = 0.1

    def encoder(self) -> EncoderConfig:
        return EncoderConfig(self.d, self.gcm_layers, self.variant, self.tau, self.coord_scale)

    def decoder(self) -> DecoderConfig:
        return DecoderConfig(self.d, self.n_modes, self.t_future, self.coord_scale)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


class HeteroGCN:
    """Learnable parameters plus the forward pass for a batch of graphs."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.enc_cfg = cfg.encoder()
        self.dec_cfg = cfg.decoder()
        self.params = ParamStore(seed)
        init_encoder(self.params, self.enc_cfg)
        init_decoder(self.params, self.dec_cfg)

    def num_parameters(self) -> int:
        return self.params.count()

    def forward(self, batch: GraphBatch, rows=None) -> Prediction:
        """Predict for agent ``rows`` of the batch (default: each graph's focal agent)."""
        h_agent, _ = encode_scenario(batch, self.params, self.enc_cfg)
        rows = batch.focal_rows if rows is None else np.asarray(rows)
        return predict(ad.gather_rows(h_agent, rows), self.params, self.dec_cfg)


def count_parameters(cfg: ModelConfig) -> int:
    return HeteroGCN(cfg).num_parameters()


def matched_width(target: int, cfg: ModelConfig, max_d: int = 512) -> int:
    """Hidden width for ``cfg.variant`` whose parameter count is closest to ``target``."""
    best_d, best_gap = cfg.d, None
    for d in range(1, max_d + 1):
        n = count_parameters(ModelConfig(**{**cfg.to_dict(), "d": d}))
        gap = abs(n - target)
        if best_gap is None or gap < best_gap:
            best_d, best_gap = d, gap
        if n > target:
            break
    return best_d


__all__ = ["ModelConfig", "HeteroGCN", "VARIANTS", "count_parameters", "matched_width"]
