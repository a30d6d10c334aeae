"""Multi-modal joint decoding, mode scores and ego plan selection."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn

SCORE_MODES = ("paper", "invariant")


def decode(G, p, K: int, T_f: int):
    """K parallel bias-free decoders -> (modes (B, K, M, T_f+1, 2), center (B, 2)).

    Each decoder maps the per-channel deviation from the vehicle mean; the
    result is re-anchored at the centroid of that mean (a single point).
    """
    B, M, C, _ = G.shape
    gbar = tn.mean(G, axis=1)                                      # (B, C, 2)
    center = tn.mean(gbar, axis=1)                                 # (B, 2)
    dev = G - tn.expand(gbar, 1, M)
    W = tn.concat([p[f"dec{k}"] for k in range(K)], axis=0)         # (K(T_f+1), C)
    y = tn.reshape(tn.matmul(W, dev), (B, M, K, T_f + 1, 2))
    y = tn.transpose(y, (0, 2, 1, 3, 4))
    c = center
    for axis, n in ((1, K), (2, M), (3, T_f + 1)):
        c = tn.expand(c, axis, n)
    return y + c, center


def mode_scores(modes, center=None, score_mode: str = "paper"):
    """Per-vehicle mode scores (B, M, K) from the indicator point.

    ``paper``: mean of the two coordinates of the indicator point.
    ``invariant``: negative distance of the indicator point from ``center``.
    """
    ind = tn.take(modes, -1, axis=3)                               # (B, K, M, 2)
    if score_mode == "paper":
        s = tn.mean(ind, axis=-1)
    elif score_mode == "invariant":
        if center is None:
            raise ValueError("invariant scoring needs the decoder center")
        K, M = ind.shape[1], ind.shape[2]
        rel = ind - tn.expand(tn.expand(center, 1, K), 2, M)
        s = tn.scale(tn.rowwise_l2norm(rel), -1.0)
    else:
        raise ValueError(f"unknown score mode {score_mode!r}; expected one of {SCORE_MODES}")
    return tn.transpose(s, (0, 2, 1))


@dataclass
class Plan:
    trajectory: np.ndarray   # (T_f, 2)
    mode_index: int
    scores: np.ndarray       # (K,)


def ego_scores(scores):
    return tn.take(scores, 0, axis=1)                              # (B, K)


def select_index(scores) -> np.ndarray:
    """Argmax over ego scores per batch row, lowest index on ties."""
    s = scores.data if isinstance(scores, tn.Tensor) else np.asarray(scores)
    if s.ndim == 3:
        s = s[:, 0]
    return tn.argmax(s, axis=-1)


def ego_trajectories(modes):
    """(B, K, T_f, 2): ego rows without the indicator point."""
    T = modes.shape[3] - 1
    return tn.take(tn.take(modes, 0, axis=2), slice(0, T), axis=2)


def select_plan(modes, scores) -> list[Plan]:
    """One plan per batch row: the ego trajectory of the highest-scoring mode."""
    m = modes.data if isinstance(modes, tn.Tensor) else np.asarray(modes)
    s = scores.data if isinstance(scores, tn.Tensor) else np.asarray(scores)
    idx = select_index(s)
    T = m.shape[3] - 1
    return [Plan(trajectory=m[b, idx[b], 0, :T].copy(), mode_index=int(idx[b]),
                 scores=s[b, 0].copy()) for b in range(m.shape[0])]
