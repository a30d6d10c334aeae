"""Equivariant/invariant feature pipeline.

All ops work on a batch of scenes sharing the vehicle count M:

    G  (B, M, C, 2)   equivariant features, absolute frame, meters
    h  (B, M, D)      invariant features
    c  (B, M, M, Q)   relation weights (diagonal unused)

Every map that touches an equivariant feature is a bias-free matrix acting on
the channel axis, so ``G -> G R + t`` commutes with the whole pipeline.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .scene import Scene, resample_route

# Parameter roles that consume equivariant features; these must never carry a bias.
EQUIVARIANT_MAPS = ("init_g", "ra", "nl_q", "nl_k", "dec")

# Below this speed (meters per step) a heading is undefined and its angle is 0.
MIN_STEP = 1e-6


@dataclass
class ModelConfig:
    C: int = 64
    D: int = 64
    Q: int = 4
    K: int = 6
    N: int = 4
    T_p: int = 4
    T_f: int = 6

    def validate(self):
        for name in ("C", "D", "Q", "K", "T_f"):
            if getattr(self, name) < 1:
                raise ValueError(f"model.{name} must be >= 1")
        if self.N < 0:
            raise ValueError("model.N must be >= 0")
        if self.T_p < 3:
            raise ValueError("model.T_p must be >= 3")
        if self.C < 2:
            raise ValueError("model.C must be >= 2 (route embedding rows)")


@dataclass
class SceneBatch:
    past: np.ndarray      # (B, M, T_p, 2)
    future: np.ndarray    # (B, M, T_f, 2)
    route: np.ndarray     # (B, C, 2)

    @property
    def size(self):
        return self.past.shape[0]

    @property
    def num_vehicles(self):
        return self.past.shape[1]


def make_batch(scenes, C: int) -> SceneBatch:
    ms = {s.num_vehicles for s in scenes}
    if len(ms) != 1:
        raise ValueError(f"a batch needs a single vehicle count, got {sorted(ms)}")
    return SceneBatch(
        past=np.stack([s.past for s in scenes]),
        future=np.stack([s.future for s in scenes]),
        route=np.stack([resample_route(s.route, C) for s in scenes]),
    )


# ------------------------------------------------------------- params


def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _mlp(params, rng, prefix, n_in, n_hidden, n_out):
    params[f"{prefix}.w1"] = _uniform(rng, n_in, (n_in, n_hidden))
    params[f"{prefix}.b1"] = _uniform(rng, n_in, (n_hidden,))
    params[f"{prefix}.w2"] = _uniform(rng, n_hidden, (n_hidden, n_out))
    params[f"{prefix}.b2"] = _uniform(rng, n_hidden, (n_out,))


def init_params(cfg: ModelConfig, seed: int = 0) -> "OrderedDict[str, np.ndarray]":
    """Uniform(+-1/sqrt(fan_in)) initialization of every weight."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    C, D, Q = cfg.C, cfg.D, cfg.Q
    p = OrderedDict()
    p["init_g"] = _uniform(rng, cfg.T_p, (C, cfg.T_p))
    _mlp(p, rng, "init_h", 2 * cfg.T_p - 3, D, D)
    _mlp(p, rng, "rel", 2 * D + 1, D, Q)
    for l in range(cfg.N):
        b = f"block{l}"
        p[f"{b}.ra"] = _uniform(rng, C, (C, C))
        _mlp(p, rng, f"{b}.att", D, D, C)
        for q in range(Q):
            _mlp(p, rng, f"{b}.e{q}", 2 * D + C, D, C)
        p[f"{b}.nl_q"] = _uniform(rng, C, (C, C))
        p[f"{b}.nl_k"] = _uniform(rng, C, (C, C))
        _mlp(p, rng, f"{b}.m", 2 * D + C, D, D)
        _mlp(p, rng, f"{b}.h", 2 * D, D, D)
    for k in range(cfg.K):
        p[f"dec{k}"] = _uniform(rng, C, (cfg.T_f + 1, C))
    return p


def param_count(cfg: ModelConfig) -> int:
    C, D, Q, N, K = cfg.C, cfg.D, cfg.Q, cfg.N, cfg.K

    def mlp(i, h, o):
        return i * h + h + h * o + o

    per_block = (C * C + mlp(D, D, C) + Q * mlp(2 * D + C, D, C) + 2 * C * C
                 + mlp(2 * D + C, D, D) + mlp(2 * D, D, D))
    return (C * cfg.T_p + mlp(2 * cfg.T_p - 3, D, D) + mlp(2 * D + 1, D, Q)
            + N * per_block + K * (cfg.T_f + 1) * C)


def is_equivariant_map(name: str) -> bool:
    role = name.split(".")[-1]
    return name == "init_g" or role in ("ra", "nl_q", "nl_k") or name.startswith("dec")


def constants(params) -> dict:
    """Wrap raw arrays as untracked tensors (inference path)."""
    return {k: tn.const(v) for k, v in params.items()}


def mlp2(x, p, prefix):
    hidden = tn.tanh(tn.linear(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
    return tn.linear(hidden, p[f"{prefix}.w2"], p[f"{prefix}.b2"])


# ------------------------------------------------------ initialization


def motion_features(past: np.ndarray) -> np.ndarray:
    """Per-vehicle step lengths and signed turning angles, (..., 2*T_p - 3)."""
    vel = np.diff(past, axis=-2)                           # (..., T_p-1, 2)
    speed = np.linalg.norm(vel, axis=-1)
    a, b = vel[..., :-1, :], vel[..., 1:, :]
    cross = a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
    dot = a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1]
    angle = np.arctan2(cross, dot)
    valid = (speed[..., :-1] >= MIN_STEP) & (speed[..., 1:] >= MIN_STEP)
    angle = np.where(valid, angle, 0.0)
    return np.concatenate([speed, angle], axis=-1)


def init_equivariant(past: np.ndarray, p, centered: bool = True):
    """G_i = W (X_i - Xbar) + Xbar with Xbar the mean of all past positions."""
    B, M, T, _ = past.shape
    if centered:
        center = past.reshape(B, -1, 2).mean(axis=1)               # (B, 2)
        rel = past - center[:, None, None, :]
        G = tn.matmul(p["init_g"], tn.const(rel))
        return G + tn.const(np.broadcast_to(center[:, None, None, :], G.shape))
    return tn.matmul(p["init_g"], tn.const(past))


def init_invariant(past: np.ndarray, p):
    return mlp2(tn.const(motion_features(past)), p, "init_h")


def _pair_features(h, dist):
    """[h_i; h_j; dist_ij] for all ordered pairs -> (B, M, M, 2D + F)."""
    M = h.shape[1]
    hi = tn.expand(h, 2, M)
    hj = tn.expand(h, 1, M)
    return tn.concat([hi, hj, dist], axis=-1)


def infer_relations(h, G, p):
    """Relation weights c_ij over Q categories from invariant inputs."""
    rho = tn.mean(G, axis=2)                                       # (B, M, 2)
    dist = tn.rowwise_l2norm(tn.pairwise_diff(rho))                # (B, M, M)
    feats = _pair_features(h, tn.expand(dist, -1, 1))
    return tn.softmax(mlp2(feats, p, "rel"))


# -------------------------------------------------------------- blocks


def _vehicle_mean(G):
    return tn.expand(tn.mean(G, axis=1), 1, G.shape[1])


def route_attraction(G, route, l: int, p):
    """Pull only the ego row toward the route: G_0 += W_ra (L - G_0)."""
    route = tn._as_tensor(route)
    g0 = tn.take(G, 0, axis=1)                                     # (B, C, 2)
    if route.shape != g0.shape:
        raise tn.ShapeError(f"route_attraction: route {route.shape} vs ego feature {g0.shape}")
    g0 = g0 + tn.matmul(p[f"block{l}.ra"], route - g0)
    return tn.concat([tn.expand(g0, 1, 1), tn.take(G, slice(1, None), axis=1)], axis=1)


def inner_aggregation(G, h, l: int, p):
    gbar = _vehicle_mean(G)
    gate = tn.sigmoid(mlp2(h, p, f"block{l}.att"))                 # (B, M, C)
    return tn.expand(gate, -1, 2) * (G - gbar) + gbar


def neighbor_aggregation(G, h, c, l: int, p, Q: int):
    B, M, C, _ = G.shape
    if M < 2:
        return G
    diff = tn.pairwise_diff(G)                                     # (B, M, M, C, 2)
    feats = _pair_features(h, tn.rowwise_l2norm(diff))
    e = None
    for q in range(Q):
        weight = tn.expand(tn.take(c, q, axis=-1), -1, C)          # (B, M, M, C)
        w = weight * mlp2(feats, p, f"block{l}.e{q}")
        e = w if e is None else e + w
    msg = tn.sum(tn.expand(e, -1, 2) * diff, axis=2)               # diagonal diff is zero
    return G + tn.scale(msg, 1.0 / (M - 1))


def equivariant_nonlinearity(G, l: int, p):
    gbar = _vehicle_mean(G)
    centered = G - gbar
    q = tn.matmul(p[f"block{l}.nl_q"], centered)
    k = tn.matmul(p[f"block{l}.nl_k"], centered)
    return tn.mirror(q, k) + gbar


def invariant_update(G, h, l: int, p):
    B, M = h.shape[:2]
    D = h.shape[2]
    if M > 1:
        dist = tn.rowwise_l2norm(tn.pairwise_diff(G))              # (B, M, M, C)
        msg = mlp2(_pair_features(h, dist), p, f"block{l}.m")      # (B, M, M, D)
        off_diag = np.broadcast_to((1.0 - np.eye(M))[None, :, :, None], msg.shape)
        pmsg = tn.sum(msg * tn.const(off_diag), axis=2)
    else:
        pmsg = tn.const(np.zeros((B, M, D)))
    return mlp2(tn.concat([h, pmsg], axis=-1), p, f"block{l}.h")


def forward(batch: SceneBatch, p, cfg: ModelConfig, route_attraction_on: bool = True,
            equivariant_init: bool = True):
    """Run initialization and the N update blocks; returns (G, h)."""
    G = init_equivariant(batch.past, p, centered=equivariant_init)
    h = init_invariant(batch.past, p)
    if cfg.N == 0:
        return G, h
    c = infer_relations(h, G, p)
    route = tn.const(batch.route)
    for l in range(cfg.N):
        if route_attraction_on:
            G = route_attraction(G, route, l, p)
        G = inner_aggregation(G, h, l, p)
        G = neighbor_aggregation(G, h, c, l, p, cfg.Q)
        G = equivariant_nonlinearity(G, l, p)
        h = invariant_update(G, h, l, p)
    return G, h


def scene_batch(scene: Scene, C: int) -> SceneBatch:
    return make_batch([scene], C)
