"""Heterogeneous graph convolutional recurrent encoder.

Node features live in one global matrix with the agent rows first and the
lane rows after them; edges are translated into that index space before
message passing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .graph import EDGE_ENDPOINTS, LANE_FEATURES, GraphBatch
from .layers import gru, init_gru, init_linear, init_mlp, linear, mlp
from .optim import ParamStore

VARIANTS = ("hetero_dynamic", "homo_dynamic", "hetero_static", "homo_static")
POS_FEATURES = 4


@dataclass(frozen=True)
class EncoderConfig:
    d: int = 128
    gcm_layers: int = 2
    variant: str = "hetero_dynamic"
    tau: int = 5
    # metres are multiplied by this before entering the network
    coord_scale: float = 0.1

    def __post_init__(self):
        if self.d < 1 or self.gcm_layers < 1:
            raise ValueError("d and gcm_layers must be >= 1")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")

    @property
    def heterogeneous(self) -> bool:
        return self.variant.startswith("hetero")

    @property
    def dynamic(self) -> bool:
        return self.variant.endswith("dynamic")


def init_encoder(store: ParamStore, cfg: EncoderConfig) -> None:
    d = cfg.d
    init_mlp(store, "motion.mlp_pos", [POS_FEATURES, d, d])
    init_mlp(store, "motion.mlp_disp", [2 * cfg.tau, d, d])
    init_gru(store, "motion.gru_pos", d, d)
    init_gru(store, "motion.gru_disp", d, d)
    init_linear(store, "motion.fuse", 2 * d, d)
    for i, n_in in enumerate((LANE_FEATURES, d)):
        init_linear(store, f"map.layer{i}.self", n_in, d, bias=False)
        init_linear(store, f"map.layer{i}.neigh", n_in, d, bias=False)
    edge_keys = range(4) if cfg.heterogeneous else [None]
    node_keys = range(2) if cfg.heterogeneous else [None]
    for layer in range(cfg.gcm_layers):
        for r in edge_keys:
            name = _edge_name(layer, r)
            store.square(f"{name}.q", d)
            init_linear(store, f"{name}.psi", d + 2, d)
            init_mlp(store, f"{name}.f", [2 * d, d, d])
        for z in node_keys:
            name = _node_name(layer, z)
            init_linear(store, f"{name}.nu", d, d)
            store.weight(f"{name}.w", 2 * d, d)


def _edge_name(layer: int, r: int | None) -> str:
    return f"gcm.layer{layer}.edge" + ("" if r is None else str(r))


def _node_name(layer: int, z: int | None) -> str:
    return f"gcm.layer{layer}.node" + ("" if z is None else str(z))


# ---------------------------------------------------------------------------- motion


def encode_motion(features, params, cfg: EncoderConfig) -> list:
    """Motion features ``M_1 .. M_P`` from per-snapshot raw agent features.

    Position and displacement columns pass through their own shared 2-layer
    MLP, then their own GRU across snapshots; a linear layer fuses the two
    hidden states. Output ``p`` only depends on inputs ``1..p``.
    """
    out = []
    h_pos = h_disp = None
    for x in features:
        x = np.asarray(x.data if isinstance(x, ad.Tensor) else x) * cfg.coord_scale
        if x.shape[1] != POS_FEATURES + 2 * cfg.tau:
            raise ad.ShapeError(
                f"agent features have width {x.shape[1]}, expected {POS_FEATURES + 2 * cfg.tau}")
        # cos/sin columns are already unitless
        x = x.copy()
        x[:, 2:4] /= cfg.coord_scale
        e_pos = mlp(params, "motion.mlp_pos", x[:, :POS_FEATURES], 2)
        e_disp = mlp(params, "motion.mlp_disp", x[:, POS_FEATURES:], 2)
        if h_pos is None:
            zeros = np.zeros((x.shape[0], cfg.d))
            h_pos, h_disp = ad.Tensor(zeros), ad.Tensor(zeros)
        h_pos = gru(params, "motion.gru_pos", e_pos, h_pos)
        h_disp = gru(params, "motion.gru_disp", e_disp, h_disp)
        out.append(linear(params, "motion.fuse", ad.concat([h_pos, h_disp])))
    return out


# ---------------------------------------------------------------------------- map


def encode_map(lane_features, lane_edges, params, cfg: EncoderConfig):
    """Two GraphSage-style layers over the lane graph.

    ``h' = relu(h W_self + mean_{j in N(i)} h_j W_neigh)`` with ``N(i)`` the
    predecessors and successors of ``i``; isolated nodes get a zero mean.
    """
    feats = np.asarray(lane_features, dtype=float) * cfg.coord_scale
    m = feats.shape[0]
    if m == 0:
        raise ValueError("lane graph is empty")
    e = np.asarray(lane_edges, dtype=np.int64).reshape(-1, 2)
    src = np.concatenate([e[:, 0], e[:, 1]])
    dst = np.concatenate([e[:, 1], e[:, 0]])
    deg = np.bincount(dst, minlength=m).astype(float)
    inv_deg = np.where(deg > 0, 1.0 / np.maximum(deg, 1.0), 0.0)[:, None]
    h = ad.Tensor(feats)
    for i in range(2):
        neigh = ad.mul(ad.segment_sum(ad.gather_rows(h, src), dst, m), inv_deg)
        h = ad.relu(ad.add(linear(params, f"map.layer{i}.self", h),
                           linear(params, f"map.layer{i}.neigh", neigh)))
    return h


# ---------------------------------------------------------------------------- convolution


def global_edges(edges_by_type, n_agents: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Translate typed edge lists into ``(src, dst)`` rows of the global node matrix."""
    out = []
    for r, e in enumerate(edges_by_type):
        e = np.asarray(e, dtype=np.int64).reshape(-1, 2)
        zs, zd = EDGE_ENDPOINTS[r]
        out.append((e[:, 0] + (n_agents if zs else 0), e[:, 1] + (n_agents if zd else 0)))
    return out


def _messages(h, coords, src, dst, params, name: str, n_nodes: int, cfg: EncoderConfig):
    hi = ad.gather_rows(h, dst)
    hj = ad.gather_rows(h, src)
    sim = ad.mul(ad.matmul(hi, params[f"{name}.q"]), hj)
    disp = (coords[dst] - coords[src]) * cfg.coord_scale
    rel = ad.relu(linear(params, f"{name}.psi", ad.concat([sim, disp])))
    msg = mlp(params, f"{name}.f", ad.concat([hj, rel]), 2)
    return ad.segment_max(msg, dst, n_nodes)


def hetero_conv(h, n_agents: int, coords, typed_edges, params, layer: int, cfg: EncoderConfig):
    """One heterogeneous graph convolution over the global node matrix ``h``.

    ``typed_edges`` holds four ``(src, dst)`` global index arrays. Messages
    are max-aggregated per edge type and summed across types; the update
    uses a per-node-type transform with an identity shortcut. The
    homogeneous form shares one parameter set and aggregates over the union
    of all edges.
    """
    n_nodes = h.shape[0]
    coords = np.asarray(coords, dtype=float)
    terms = []
    if cfg.heterogeneous:
        for r, (src, dst) in enumerate(typed_edges):
            if len(src):
                terms.append(_messages(h, coords, src, dst, params, _edge_name(layer, r),
                                       n_nodes, cfg))
    else:
        src = np.concatenate([s for s, _ in typed_edges])
        dst = np.concatenate([t for _, t in typed_edges])
        if len(src):
            terms.append(_messages(h, coords, src, dst, params, _edge_name(layer, None),
                                   n_nodes, cfg))
    if terms:
        total = terms[0]
        for t in terms[1:]:
            total = ad.add(total, t)
        msg = ad.relu(total)
    else:
        msg = ad.Tensor(np.zeros((n_nodes, cfg.d)))

    blocks = []
    for z, (lo, hi) in enumerate(((0, n_agents), (n_agents, n_nodes))):
        if hi == lo:
            continue
        name = _node_name(layer, z if cfg.heterogeneous else None)
        h_z = ad.slice_rows(h, lo, hi)
        nu = ad.relu(linear(params, f"{name}.nu", h_z))
        pre = ad.matmul(ad.concat([nu, ad.slice_rows(msg, lo, hi)]), params[f"{name}.w"])
        blocks.append(ad.relu(ad.add(pre, h_z)))
    return blocks[0] if len(blocks) == 1 else ad.concat(blocks, axis=0)


def gcm(h, n_agents, coords, typed_edges, params, cfg: EncoderConfig):
    for layer in range(cfg.gcm_layers):
        h = hetero_conv(h, n_agents, coords, typed_edges, params, layer, cfg)
    return h


def encode_scenario(batch: GraphBatch, params, cfg: EncoderConfig):
    """Run the recurrent encoder; returns ``(agent rows, lane rows)`` of ``H_P``.

    Dynamic variants add the motion features of snapshot ``p`` to the agent
    state and apply the shared GCM on that snapshot's edges. Static variants
    use the last snapshot's topology for every pass; the first pass starts
    from the final motion state and each further pass consumes the previous
    output.
    """
    n_a = batch.n_agents
    motion = encode_motion(batch.agent_features, params, cfg)
    h_lane = encode_map(batch.lane_features, batch.lane_edges, params, cfg)
    if cfg.dynamic:
        h_agent = ad.Tensor(np.zeros((n_a, cfg.d)))
        for p in range(batch.n_snapshots):
            h_agent = ad.add(h_agent, motion[p])
            coords = np.concatenate([batch.agent_coords[p], batch.lane_coords])
            edges = global_edges(batch.snapshot_edges[p], n_a)
            h = gcm(ad.concat([h_agent, h_lane], axis=0), n_a, coords, edges, params, cfg)
            h_agent, h_lane = ad.slice_rows(h, 0, n_a), ad.slice_rows(h, n_a, h.shape[0])
    else:
        coords = np.concatenate([batch.agent_coords[-1], batch.lane_coords])
        edges = global_edges(batch.snapshot_edges[-1], n_a)
        h_agent = motion[-1]
        for _ in range(batch.n_snapshots):
            h = gcm(ad.concat([h_agent, h_lane], axis=0), n_a, coords, edges, params, cfg)
            h_agent, h_lane = ad.slice_rows(h, 0, n_a), ad.slice_rows(h, n_a, h.shape[0])
    return h_agent, h_lane
