"""Open-loop metrics, constant-velocity baseline and the equivariance sweep."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _accel
from . import decode as dc
from . import model as md
from .scene import Scene, apply_se2, inverse_transform_points, resample_route

ROW_FIELDS = ("scene", "scenario", "l2_3s", "l2_avg", "cr_3s", "cr_avg",
              "minL2_avg", "minL2_3s", "selection_miss", "mode_index")
METRICS = ("l2_3s", "l2_avg", "cr_3s", "cr_avg", "minL2_avg", "minL2_3s")


def l2_metrics(plan, gt):
    """(L2 at the final step, L2 averaged over all steps); batched over leading axes."""
    plan, gt = np.asarray(plan, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if plan.shape != gt.shape:
        raise ValueError(f"plan {plan.shape} and ground truth {gt.shape} differ in shape")
    d = np.linalg.norm(plan - gt, axis=-1)
    return d[..., -1], d.mean(axis=-1)


def collision_steps(plan, sv_futures, r_coll: float = 1.0):
    """Boolean (T,) or (S, T): plan center within 2 * r_coll of any SV center."""
    if not r_coll > 0:
        raise ValueError("r_coll must be positive")
    plan = np.asarray(plan, dtype=np.float64)
    sv = np.asarray(sv_futures, dtype=np.float64)
    single = plan.ndim == 2
    if single:
        plan, sv = plan[None], sv[None]
    hits = _accel.collision_scan(plan, sv, 2.0 * r_coll)
    return hits[0] if single else hits


def collision_rate(plan, sv_futures, r_coll: float = 1.0):
    """(fraction of scenes colliding at the final step, mean per-step collision fraction).

    ``plan`` is (T, 2) for one scene or (S, T, 2); ``sv_futures`` (J, T, 2) or (S, J, T, 2).
    """
    hits = np.atleast_2d(collision_steps(plan, sv_futures, r_coll)).astype(np.float64)
    return float(hits[:, -1].mean()), float(hits.mean(axis=0).mean())


def min_sv_errors(modes, gt_svs):
    """Joint minimum over modes of SV errors: (minL2_avg, minL2_3s).

    ``modes`` (K, M, T+1, 2) for one scene, ``gt_svs`` (M-1, T, 2).
    """
    T = gt_svs.shape[1]
    d = np.linalg.norm(modes[:, 1:, :T] - gt_svs[None], axis=-1)   # (K, M-1, T)
    return float(d.mean(axis=(1, 2)).min()), float(d[:, :, -1].mean(axis=1).min())


def baseline_constant_velocity(scene: Scene, t_future: int | None = None) -> np.ndarray:
    """Extrapolate the ego's last observed step for T_f steps."""
    past = scene.past[0]
    if past.shape[0] < 2:
        raise ValueError("constant-velocity baseline needs at least 2 past points")
    T = scene.future.shape[1] if t_future is None else t_future
    step = past[-1] - past[-2]
    return past[-1] + np.arange(1, T + 1)[:, None] * step


# ---------------------------------------------------------------- inference


def predict(scenes, params, cfg: md.ModelConfig, score_mode="paper", route_attraction=True,
            equivariant_init=True, chunk: int = 256):
    """Run the model on scenes (any vehicle counts); returns per-scene
    (modes (K, M, T_f+1, 2), scores (M, K), center (2,)) in input order."""
    p = md.constants(params)
    out = [None] * len(scenes)
    groups = {}
    for i, s in enumerate(scenes):
        groups.setdefault(s.num_vehicles, []).append(i)
    for idx in groups.values():
        for j in range(0, len(idx), chunk):
            part = idx[j:j + chunk]
            batch = md.make_batch([scenes[i] for i in part], cfg.C)
            modes, scores, center = _run(batch, p, cfg, score_mode, route_attraction, equivariant_init)
            for b, i in enumerate(part):
                out[i] = (modes[b], scores[b], center[b])
    return out


def _run(batch, p, cfg, score_mode, route_attraction, equivariant_init):
    G, _ = md.forward(batch, p, cfg, route_attraction_on=route_attraction,
                      equivariant_init=equivariant_init)
    modes, center = dc.decode(G, p, cfg.K, cfg.T_f)
    scores = dc.mode_scores(modes, center, score_mode)
    return modes.data, scores.data, center.data


# ------------------------------------------------------------------ report


@dataclass
class EvalReport:
    l2_3s: float
    l2_avg: float
    cr_3s: float
    cr_avg: float
    minL2_avg: float
    minL2_3s: float
    selection_accuracy: float
    rows: list = field(default_factory=list)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("rows")
        d["scenes"] = len(self.rows)
        return d

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=ROW_FIELDS)
            w.writeheader()
            for r in self.rows:
                w.writerow(r)


def evaluate(scenes, params, cfg: md.ModelConfig, score_mode="paper", route_attraction=True,
             equivariant_init=True, r_coll: float = 1.0, collide_with: str = "gt") -> EvalReport:
    """Open-loop metrics of the selected ego plan on every scene.

    ``collide_with`` picks the SV futures for the collision check: ground
    truth (``"gt"``) or the SV rows of the selected mode (``"pred"``).
    """
    scenes = list(scenes)
    if not scenes:
        raise ValueError("cannot evaluate an empty dataset")
    if collide_with not in ("gt", "pred"):
        raise ValueError("collide_with must be 'gt' or 'pred'")
    outs = predict(scenes, params, cfg, score_mode, route_attraction, equivariant_init)
    rows = []
    for i, (scene, (modes, scores, _)) in enumerate(zip(scenes, outs)):
        T = scene.future.shape[1]
        k = int(dc.select_index(scores[None])[0])
        plan = modes[k, 0, :T]
        gt = scene.future[0]
        l2_3s, l2_avg = l2_metrics(plan, gt)
        others = scene.future[1:] if collide_with == "gt" else modes[k, 1:, :T]
        hits = collision_steps(plan, others, r_coll)
        closest = int(np.argmin(np.linalg.norm(modes[:, 0, :T] - gt, axis=-1).mean(axis=-1)))
        mn_avg, mn_3s = min_sv_errors(modes, scene.future[1:])
        rows.append({
            "scene": i, "scenario": scene.scenario or "",
            "l2_3s": float(l2_3s), "l2_avg": float(l2_avg),
            "cr_3s": float(hits[-1]), "cr_avg": float(hits.mean()),
            "minL2_avg": mn_avg, "minL2_3s": mn_3s,
            "selection_miss": float(k != closest), "mode_index": k,
        })
    agg = {m: float(np.mean([r[m] for r in rows])) for m in METRICS}
    acc = 1.0 - float(np.mean([r["selection_miss"] for r in rows]))
    return EvalReport(**agg, selection_accuracy=acc, rows=rows)


# ------------------------------------------------------------------- sweep


@dataclass
class StabilityCurve:
    theta_deg: np.ndarray          # (n,)
    mode_deviation: np.ndarray     # (n,) max over modes, vehicles, steps and translations
    plan_deviation: np.ndarray     # (n,) max pointwise L2 of the selected ego plan
    flips: np.ndarray              # (n,) selections that changed mode index

    @property
    def max_mode_deviation(self):
        return float(self.mode_deviation.max()) if self.mode_deviation.size else 0.0

    def write_csv(self, path, column: str = "mode"):
        values = self.mode_deviation if column == "mode" else self.plan_deviation
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["theta_deg", "deviation_m"])
            for th, v in zip(self.theta_deg, values):
                w.writerow([f"{th:g}", repr(float(v))])


def default_theta_grid():
    return np.arange(1, 360, dtype=np.float64)


def translation_draws(n: int, seed: int = 0, bound: float = 100.0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.uniform(-bound, bound, size=(n, 2))


def equivariance_sweep(scene: Scene, params, cfg: md.ModelConfig, thetas_deg=None,
                       translations=None, score_mode="paper", route_attraction=True,
                       equivariant_init=True, chunk: int = 128) -> StabilityCurve:
    """Plan on rotated (and optionally translated) copies of ``scene``, map the
    outputs back with the inverse transform and measure the deviation from the
    untransformed run.

    Pure rotations are always included; every row of ``translations`` adds one
    more roto-translated copy per angle.
    """
    thetas = default_theta_grid() if thetas_deg is None else np.asarray(thetas_deg, dtype=np.float64)
    shifts = [np.zeros(2)]
    if translations is not None:
        shifts += [np.asarray(t, dtype=np.float64) for t in translations]
    p = md.constants(params)
    kw = dict(score_mode=score_mode, route_attraction=route_attraction, equivariant_init=equivariant_init)
    base_modes, base_scores, _ = _run(md.make_batch([scene], cfg.C), p, cfg, **kw)
    base_modes, base_k = base_modes[0], int(dc.select_index(base_scores)[0])
    T = cfg.T_f
    base_plan = base_modes[base_k, 0, :T]

    jobs = [(i, th, t) for i, th in enumerate(thetas) for t in shifts]
    mode_dev = np.zeros(len(thetas))
    plan_dev = np.zeros(len(thetas))
    flips = np.zeros(len(thetas), dtype=np.int64)
    for j in range(0, len(jobs), chunk):
        part = jobs[j:j + chunk]
        identity = [th == 0.0 and not np.any(t) for _, th, t in part]
        moved = [apply_se2(scene, math.radians(th), t) for _, th, t in part]
        batch = md.SceneBatch(
            past=np.stack([s.past for s in moved]),
            future=np.stack([s.future for s in moved]),
            route=np.stack([resample_route(s.route, cfg.C) for s in moved]),
        )
        modes, scores, _ = _run(batch, p, cfg, **kw)
        ks = dc.select_index(scores)
        for b, (i, th, t) in enumerate(part):
            if identity[b]:
                # the identity element: the baseline itself
                continue
            back = inverse_transform_points(modes[b], math.radians(th), t)
            md_ = float(np.linalg.norm(back - base_modes, axis=-1).max())
            pd_ = float(np.linalg.norm(back[ks[b], 0, :T] - base_plan, axis=-1).max())
            mode_dev[i] = max(mode_dev[i], md_)
            plan_dev[i] = max(plan_dev[i], pd_)
            flips[i] += int(ks[b] != base_k)
    return StabilityCurve(theta_deg=thetas, mode_deviation=mode_dev, plan_deviation=plan_dev, flips=flips)
