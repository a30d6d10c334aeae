import math

import numpy as np
import pytest

from eqplan import decode as dc
from eqplan import model as md
from eqplan import tensor as tn
from eqplan.scene import rotation


def dec_params(rng, K, T_f, C):
    return {f"dec{k}": tn.const(rng.normal(size=(T_f + 1, C))) for k in range(K)}


def test_equal_features_decode_to_center(rng):
    g = rng.normal(size=(1, 1, 5, 2))
    G = np.repeat(g, 3, axis=1)
    modes, center = dc.decode(tn.const(G), dec_params(rng, 2, 6, 5), 2, 6)
    assert modes.shape == (1, 2, 3, 7, 2)
    np.testing.assert_allclose(modes.data, np.broadcast_to(center.data[:, None, None, None], modes.shape),
                               atol=1e-12)
    np.testing.assert_allclose(center.data[0], g[0, 0].mean(axis=0), atol=1e-12)


def test_single_mode_forces_selection(rng):
    G = rng.normal(size=(1, 3, 5, 2))
    modes, center = dc.decode(tn.const(G), dec_params(rng, 1, 6, 5), 1, 6)
    assert modes.shape[1] == 1
    (plan,) = dc.select_plan(modes, dc.mode_scores(modes, center))
    assert plan.mode_index == 0
    assert plan.trajectory.shape == (6, 2)


def test_per_mode_equivariance(rng):
    G = rng.normal(scale=10, size=(1, 4, 6, 2))
    p = dec_params(rng, 3, 6, 6)
    r = np.random.default_rng(3)
    th, ts = r.uniform(-math.pi, math.pi, 100), r.uniform(-100, 100, (100, 2))
    y0 = dc.decode(tn.const(G), p, 3, 6)[0].data[0]
    Gm = np.stack([G[0] @ rotation(a) + t for a, t in zip(th, ts)])
    y1 = dc.decode(tn.const(Gm), p, 3, 6)[0].data
    for i in range(100):
        np.testing.assert_allclose((y1[i] - ts[i]) @ rotation(-th[i]), y0, atol=1e-9)


def _modes_with_indicator(points):
    """modes (1, K, 1, 2, 2): one vehicle, one real step + indicator point."""
    K = len(points)
    m = np.zeros((1, K, 1, 2, 2))
    m[0, :, 0, 1] = points
    return tn.const(m)


def test_paper_score_is_coordinate_mean():
    s = dc.mode_scores(_modes_with_indicator([[4.0, 2.0]])).data
    assert s.shape == (1, 1, 1)
    assert s[0, 0, 0] == 3.0


def test_translation_shifts_scores_uniformly(rng):
    pts = rng.normal(size=(4, 2))
    t = np.array([3.5, -1.25])
    s0 = dc.mode_scores(_modes_with_indicator(pts)).data[0, 0]
    s1 = dc.mode_scores(_modes_with_indicator(pts + t)).data[0, 0]
    np.testing.assert_allclose(s1 - s0, t.mean(), atol=1e-12)
    assert np.argmax(s0) == np.argmax(s1)


def test_invariant_scorer_is_invariant(rng):
    G = rng.normal(scale=10, size=(1, 4, 6, 2))
    p = dec_params(rng, 3, 6, 6)
    modes, center = dc.decode(tn.const(G), p, 3, 6)
    s0 = dc.mode_scores(modes, center, "invariant").data
    r = np.random.default_rng(9)
    for _ in range(100):
        th, t = r.uniform(-math.pi, math.pi), r.uniform(-100, 100, 2)
        m1, c1 = dc.decode(tn.const(G @ rotation(th) + t), p, 3, 6)
        np.testing.assert_allclose(dc.mode_scores(m1, c1, "invariant").data, s0, atol=1e-9)


def test_unknown_score_mode():
    with pytest.raises(ValueError):
        dc.mode_scores(_modes_with_indicator([[0.0, 0.0]]), score_mode="bogus")


def test_select_tie_breaks_to_lowest_index():
    modes = np.zeros((1, 3, 2, 7, 2))
    scores = np.zeros((1, 2, 3))
    scores[0, 0] = [0.2, 0.9, 0.9]
    (plan,) = dc.select_plan(modes, scores)
    assert plan.mode_index == 1


def test_selection_under_translation(rng):
    G = rng.normal(scale=10, size=(1, 4, 6, 2))
    p = dec_params(rng, 4, 6, 6)
    modes, center = dc.decode(tn.const(G), p, 4, 6)
    (plan0,) = dc.select_plan(modes, dc.mode_scores(modes, center))
    t = np.array([12.0, -40.0])
    m1, c1 = dc.decode(tn.const(G + t), p, 4, 6)
    (plan1,) = dc.select_plan(m1, dc.mode_scores(m1, c1))
    assert plan1.mode_index == plan0.mode_index
    np.testing.assert_allclose(plan1.trajectory, plan0.trajectory + t, atol=1e-9)


def test_plan_excludes_indicator_point(rng):
    modes = rng.normal(size=(1, 2, 3, 7, 2))
    scores = np.array([[[1.0, 0.0]] * 3])
    (plan,) = dc.select_plan(modes, scores)
    np.testing.assert_array_equal(plan.trajectory, modes[0, 0, 0, :6])
