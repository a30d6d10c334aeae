"""Scene data model, route resampling, SE(2) action, synthetic generator and IO."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

SCENARIOS = ("straight", "left-turn", "right-turn", "intersection-yield")
TURNING = ("left-turn", "right-turn")


class SceneValidationError(ValueError):
    pass


@dataclass
class Scene:
    past: np.ndarray     # (M, T_p, 2)
    future: np.ndarray   # (M, T_f, 2)
    route: np.ndarray    # (P, 2)
    dt: float = 0.5
    ego_index: int = 0
    scenario: str | None = None

    @property
    def num_vehicles(self) -> int:
        return self.past.shape[0]

    def validate(self, t_past=None, t_future=None):
        if self.ego_index != 0:
            raise SceneValidationError(f"ego index must be 0, got {self.ego_index}")
        if self.past.ndim != 3 or self.past.shape[2] != 2:
            raise SceneValidationError(f"past must be (M, T_p, 2), got {self.past.shape}")
        if self.future.shape[0] != self.past.shape[0] or self.future.shape[2:] != (2,):
            raise SceneValidationError(f"future must be (M, T_f, 2), got {self.future.shape}")
        if self.past.shape[0] < 2:
            raise SceneValidationError(f"scene needs at least 2 vehicles, got {self.past.shape[0]}")
        if t_past is not None and self.past.shape[1] != t_past:
            raise SceneValidationError(f"expected {t_past} past points, got {self.past.shape[1]}")
        if t_future is not None and self.future.shape[1] != t_future:
            raise SceneValidationError(f"expected {t_future} future points, got {self.future.shape[1]}")
        if route_length(self.route) <= 0.0:
            raise SceneValidationError("route has zero arc length")
        for name in ("past", "future", "route"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise SceneValidationError(f"{name} contains non-finite values")
        if not self.dt > 0:
            raise SceneValidationError(f"dt must be positive, got {self.dt}")

    def equals(self, other: "Scene") -> bool:
        return (np.array_equal(self.past, other.past)
                and np.array_equal(self.future, other.future)
                and np.array_equal(self.route, other.route)
                and self.dt == other.dt and self.ego_index == other.ego_index
                and self.scenario == other.scenario)


@dataclass
class Dataset:
    scenes: list = field(default_factory=list)
    split: str = "train"
    seed: int | None = None

    def __len__(self):
        return len(self.scenes)

    def __iter__(self):
        return iter(self.scenes)


# ----------------------------------------------------------- geometry


def rotation(theta: float) -> np.ndarray:
    """Right-acting rotation: row vectors map as p @ R."""
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, s], [-s, c]])


def transform_points(points, theta, t):
    return np.asarray(points) @ rotation(theta) + np.asarray(t, dtype=np.float64)


def inverse_transform_points(points, theta, t):
    return (np.asarray(points) - np.asarray(t, dtype=np.float64)) @ rotation(-theta)


def apply_se2(scene: Scene, theta: float, t=(0.0, 0.0)) -> Scene:
    """Map every past, future and route point p to p R(theta) + t."""
    return Scene(
        past=transform_points(scene.past, theta, t),
        future=transform_points(scene.future, theta, t),
        route=transform_points(scene.route, theta, t),
        dt=scene.dt, ego_index=scene.ego_index, scenario=scene.scenario,
    )


def route_length(polyline) -> float:
    p = np.asarray(polyline, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] < 2:
        return 0.0
    return float(np.linalg.norm(np.diff(p, axis=0), axis=1).sum())


def resample_route(polyline, count: int) -> np.ndarray:
    """Resample a polyline to ``count`` points equally spaced in arc length."""
    p = np.asarray(polyline, dtype=np.float64)
    if count < 2:
        raise SceneValidationError(f"route sample count must be >= 2, got {count}")
    if p.ndim != 2 or p.shape[1] != 2 or p.shape[0] < 2:
        raise SceneValidationError(f"route must be a (P>=2, 2) polyline, got shape {p.shape}")
    seg = np.linalg.norm(np.diff(p, axis=0), axis=1)
    total = seg.sum()
    if not total > 0:
        raise SceneValidationError("degenerate route: all points identical")
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    targets = np.linspace(0.0, total, count)
    idx = np.clip(np.searchsorted(cum, targets, side="right") - 1, 0, len(seg) - 1)
    # skip zero-length segments: searchsorted lands on the last vertex with that arc length
    frac = np.where(seg[idx] > 0, (targets - cum[idx]) / np.where(seg[idx] > 0, seg[idx], 1.0), 0.0)
    out = p[idx] + frac[:, None] * (p[idx + 1] - p[idx])
    out[0] = p[0]
    out[-1] = p[-1]
    return out


# ---------------------------------------------------------- generator


@dataclass
class GeneratorConfig:
    num_scenes: int = 256
    t_past: int = 4
    t_future: int = 6
    dt: float = 0.5
    min_vehicles: int = 3
    max_vehicles: int = 5
    min_speed: float = 4.0
    max_speed: float = 14.0
    min_turn_radius: float = 10.0
    max_turn_radius: float = 30.0
    noise_std: float = 0.05
    weight_straight: float = 0.25
    weight_left_turn: float = 0.25
    weight_right_turn: float = 0.25
    weight_intersection_yield: float = 0.25
    yield_decel: float = 3.0
    yield_margin: float = 0.25       # arrival-time gap (s) below which right of way is a coin flip
    route_extension: float = 40.0
    random_pose: bool = False

    def weights(self) -> np.ndarray:
        w = np.array([self.weight_straight, self.weight_left_turn,
                      self.weight_right_turn, self.weight_intersection_yield], dtype=np.float64)
        return w / w.sum()

    def validate(self):
        bad = []
        if self.num_scenes < 0:
            bad.append("num_scenes")
        if self.t_past < 3:
            bad.append("t_past")
        if self.t_future < 1:
            bad.append("t_future")
        if not self.dt > 0:
            bad.append("dt")
        if not (2 <= self.min_vehicles <= self.max_vehicles <= 8):
            bad += ["min_vehicles", "max_vehicles"]
        if not (2.0 <= self.min_speed <= self.max_speed <= 20.0):
            bad += ["min_speed", "max_speed"]
        if not (8.0 <= self.min_turn_radius <= self.max_turn_radius <= 60.0):
            bad += ["min_turn_radius", "max_turn_radius"]
        if not self.noise_std >= 0:
            bad.append("noise_std")
        ws = [self.weight_straight, self.weight_left_turn, self.weight_right_turn,
              self.weight_intersection_yield]
        if any(w < 0 for w in ws) or sum(ws) <= 0:
            bad.append("weight_*")
        if not self.yield_decel > 0:
            bad.append("yield_decel")
        if not self.yield_margin >= 0:
            bad.append("yield_margin")
        if not self.route_extension >= 30.0:
            bad.append("route_extension")
        if bad:
            raise SceneValidationError("invalid generator config: " + ", ".join(bad))


class _Lane:
    """Straight approach, optional circular arc of +-90 degrees, straight exit.

    Starts at ``origin`` heading along ``heading``; ``turn`` is +1 (left),
    -1 (right) or 0 (straight).
    """

    def __init__(self, origin, heading, turn=0, approach=0.0, radius=20.0):
        self.origin = np.asarray(origin, dtype=np.float64)
        self.heading = heading
        self.turn = turn
        self.approach = approach
        self.radius = radius
        self.arc = 0.5 * math.pi * radius if turn else 0.0

    def point(self, s: float) -> np.ndarray:
        d = np.array([math.cos(self.heading), math.sin(self.heading)])
        if not self.turn or s <= self.approach:
            return self.origin + s * d
        start = self.origin + self.approach * d
        normal = self.turn * np.array([-d[1], d[0]])
        center = start + self.radius * normal
        phi = min(s - self.approach, self.arc) / self.radius
        rel = start - center
        c, sn = math.cos(self.turn * phi), math.sin(self.turn * phi)
        p = center + np.array([c * rel[0] - sn * rel[1], sn * rel[0] + c * rel[1]])
        if s - self.approach <= self.arc:
            return p
        h = self.heading + self.turn * 0.5 * math.pi
        return p + (s - self.approach - self.arc) * np.array([math.cos(h), math.sin(h)])

    def points(self, s) -> np.ndarray:
        return np.array([self.point(float(v)) for v in np.atleast_1d(s)])

    def polyline(self, s0: float, s1: float, step: float = 1.0) -> np.ndarray:
        n = max(2, int(math.ceil((s1 - s0) / step)) + 1)
        return self.points(np.linspace(s0, s1, n))


def _sample_scene(cfg: GeneratorConfig, rng: np.random.Generator) -> Scene:
    tp, tf, dt = cfg.t_past, cfg.t_future, cfg.dt
    kind = SCENARIOS[rng.choice(len(SCENARIOS), p=cfg.weights())]
    m = int(rng.integers(cfg.min_vehicles, cfg.max_vehicles + 1))
    steps = np.arange(tp + tf) - (tp - 1)          # current step is 0
    v = rng.uniform(cfg.min_speed, cfg.max_speed)

    # ego lane starts at the ego's first past position
    back = v * dt * (tp - 1)
    if kind in TURNING:
        turn = 1 if kind == "left-turn" else -1
        radius = rng.uniform(cfg.min_turn_radius, cfg.max_turn_radius)
        approach = back + rng.uniform(0.0, 0.6) * v * dt * tf
        ego_lane = _Lane((-back, 0.0), 0.0, turn, approach, radius)
    else:
        ego_lane = _Lane((-back, 0.0), 0.0)

    ego_s = v * dt * (steps + tp - 1)
    partner = None
    if kind == "intersection-yield":
        # crossing lane through a conflict point ahead of the ego
        ego_arrival = dt * rng.uniform(2.0, 4.0)
        sv_arrival = dt * rng.uniform(2.0, 4.0)
        conflict = v * ego_arrival
        # whoever is clearly first goes; near-simultaneous arrivals are ambiguous
        gap = ego_arrival - sv_arrival
        coin = bool(rng.integers(0, 2))
        ego_yields = gap > 0 if abs(gap) >= cfg.yield_margin else coin
        vs = rng.uniform(cfg.min_speed, cfg.max_speed)
        side = 1 if rng.integers(0, 2) else -1
        s_conf = vs * sv_arrival
        cross = _Lane((conflict, -side * (s_conf + vs * dt * (tp - 1))), side * 0.5 * math.pi)
        sv_s = vs * dt * (steps + tp - 1)
        fut = np.clip(steps, 0, None) * dt
        decel_ego = cfg.yield_decel if ego_yields else 0.0
        decel_sv = 0.0 if ego_yields else cfg.yield_decel
        ego_s = ego_s - _braking_offset(v, decel_ego, fut)
        sv_s = sv_s - _braking_offset(vs, decel_sv, fut)
        partner = cross.points(sv_s)

    ego = ego_lane.points(ego_s)
    vehicles = [ego]
    if partner is not None:
        vehicles.append(partner)
    while len(vehicles) < m:
        vehicles.append(_sample_sv(cfg, rng, steps))
    traj = np.stack(vehicles)

    route_end = ego_s[-1] + cfg.route_extension
    route = ego_lane.polyline(0.0, route_end, step=2.0)

    if cfg.random_pose:
        theta = rng.uniform(-math.pi, math.pi)
        t = rng.uniform(-200.0, 200.0, size=2)
        traj = transform_points(traj, theta, t)
        route = transform_points(route, theta, t)

    past = traj[:, :tp].copy()
    if cfg.noise_std > 0:
        past = past + rng.normal(0.0, cfg.noise_std, size=past.shape)
    return Scene(past=past, future=traj[:, tp:].copy(), route=route, dt=dt, scenario=kind)


def _braking_offset(v, decel, t):
    """Distance lost against constant speed when braking from t=0 to a stop."""
    if decel <= 0:
        return np.zeros_like(t)
    t_stop = v / decel
    tc = np.minimum(t, t_stop)
    travelled = v * tc - 0.5 * decel * tc * tc
    return v * t - travelled


def _sample_sv(cfg, rng, steps):
    dt, tp = cfg.dt, cfg.t_past
    vs = rng.uniform(cfg.min_speed, cfg.max_speed)
    heading = rng.choice([0.0, math.pi, 0.5 * math.pi, -0.5 * math.pi]) + rng.normal(0.0, 0.05)
    for _ in range(20):
        origin = rng.uniform([-40.0, -40.0], [40.0, 40.0])
        if np.hypot(*origin) > 8.0:
            break
    if rng.uniform() < 0.3:
        lane = _Lane(origin, heading, int(rng.choice([-1, 1])),
                     rng.uniform(0.0, 20.0), rng.uniform(cfg.min_turn_radius, cfg.max_turn_radius))
    else:
        lane = _Lane(origin, heading)
    return lane.points(vs * dt * (steps + tp - 1))


def generate_synthetic(config: GeneratorConfig, seed: int, split: str = "train") -> Dataset:
    """Deterministic synthetic dataset; scene ``i`` uses its own random substream."""
    config.validate()
    scenes = [_sample_scene(config, np.random.default_rng([seed, i]))
              for i in range(config.num_scenes)]
    return Dataset(scenes=scenes, split=split, seed=seed)


# --------------------------------------------------------------- file IO


def scene_to_record(scene: Scene) -> dict:
    rec = {
        "vehicles": np.concatenate([scene.past, scene.future], axis=1).tolist(),
        "route": np.asarray(scene.route).tolist(),
        "ego": scene.ego_index,
        "dt": scene.dt,
    }
    if scene.scenario is not None:
        rec["scenario"] = scene.scenario
    return rec


def save_scenes(dataset, path):
    scenes = dataset.scenes if isinstance(dataset, Dataset) else list(dataset)
    with open(path, "w", encoding="utf-8") as fh:
        for s in scenes:
            fh.write(json.dumps(scene_to_record(s)) + "\n")


def _parse_line(line, lineno, t_past, t_future):
    where = f"line {lineno}"
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as e:
        raise SceneValidationError(f"{where}: malformed record ({e.msg})") from None
    if not isinstance(rec, dict):
        raise SceneValidationError(f"{where}: record must be an object")
    for key in ("vehicles", "route", "ego", "dt"):
        if key not in rec:
            raise SceneValidationError(f"{where}: missing field '{key}'")
    try:
        vehicles = [np.asarray(v, dtype=np.float64) for v in rec["vehicles"]]
    except (TypeError, ValueError):
        raise SceneValidationError(f"{where}: field 'vehicles' is not numeric") from None
    expected = t_past + t_future
    for i, v in enumerate(vehicles):
        if v.ndim != 2 or v.shape[1] != 2:
            raise SceneValidationError(f"{where}: field 'vehicles[{i}]' must be a list of [x, y] pairs")
        if v.shape[0] != expected:
            raise SceneValidationError(
                f"{where}: field 'vehicles[{i}]' expected {expected} points, got {v.shape[0]}")
    try:
        route = np.asarray(rec["route"], dtype=np.float64)
    except (TypeError, ValueError):
        raise SceneValidationError(f"{where}: field 'route' is not numeric") from None
    if route.ndim != 2 or route.shape[1:] != (2,):
        raise SceneValidationError(f"{where}: field 'route' must be a list of [x, y] pairs")
    if not vehicles:
        raise SceneValidationError(f"{where}: field 'vehicles' is empty")
    traj = np.stack(vehicles)
    try:
        scene = Scene(past=traj[:, :t_past].copy(), future=traj[:, t_past:].copy(), route=route,
                      dt=float(rec["dt"]), ego_index=int(rec["ego"]), scenario=rec.get("scenario"))
        scene.validate(t_past, t_future)
    except SceneValidationError as e:
        raise SceneValidationError(f"{where}: {e}") from None
    return scene


def load_scenes(path, t_past: int = 4, t_future: int = 6, split: str = "train") -> Dataset:
    scenes = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                scenes.append(_parse_line(line, lineno, t_past, t_future))
    return Dataset(scenes=scenes, split=split)
