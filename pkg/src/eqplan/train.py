"""Loss, Adam, learning-rate schedule, training loop and checkpoints."""
from __future__ import annotations

import json
import logging
import os
import tempfile
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import decode as dc
from . import model as md
from . import tensor as tn

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "eqplan-checkpoint"
CHECKPOINT_VERSION = 1
PLAN_TARGETS = ("selected", "closest")


class NumericError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class Ablation:
    prediction_loss: bool = True
    route_attraction: bool = True
    equivariant_init: bool = True


@dataclass
class TrainConfig:
    epochs: int = 400
    batch_size: int = 512
    lr0: float = 5e-4
    lr_decay: float = 0.8
    lr_decay_every: int = 2
    alpha: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    plan_target: str = "selected"
    checkpoint_every: int = 1
    ablation: Ablation = field(default_factory=Ablation)

    def validate(self):
        if self.epochs < 0:
            raise ValueError("train.epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("train.batch_size must be >= 1")
        if not (self.lr0 > 0 and self.lr_decay > 0 and self.lr_decay_every >= 1):
            raise ValueError("train.lr0, train.lr_decay and train.lr_decay_every must be positive")
        if self.alpha < 0:
            raise ValueError("train.alpha must be >= 0")
        if self.plan_target not in PLAN_TARGETS:
            raise ValueError(f"train.plan_target must be one of {PLAN_TARGETS}")


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """Rate used during ``epoch`` (0-based): lr0 * decay ** (epoch // every)."""
    return cfg.lr0 * cfg.lr_decay ** (epoch // cfg.lr_decay_every)


# ----------------------------------------------------------------- losses


def ego_errors(ego_trajs: np.ndarray, gt_ego: np.ndarray) -> np.ndarray:
    """Average L2 of every ego mode, (B, K)."""
    return np.linalg.norm(ego_trajs - gt_ego[:, None], axis=-1).mean(axis=-1)


def loss_plan(modes, scores, gt_ego, index=None):
    """Mean L2 between the selected ego mode and ground truth, per scene (B,).

    ``index`` overrides the argmax selection (closest-mode training variant).
    """
    ego = dc.ego_trajectories(modes)
    if index is None:
        index = dc.select_index(scores)
    chosen = tn.gather(ego, index)                                  # (B, T_f, 2)
    return tn.mean(tn.rowwise_l2norm(chosen - tn.const(gt_ego)), axis=-1)


def loss_wta(scores, modes, gt_ego):
    """Cross-entropy pulling the selector toward the closest ego mode.

    Returns ``(loss (B,), miss (B,))`` where ``miss`` is 0 when the argmax
    already picks the closest mode and 1 otherwise.
    """
    es = dc.ego_scores(scores) if scores.ndim == 3 else scores
    closest = tn.argmin(ego_errors(dc.ego_trajectories(modes).data, gt_ego), axis=-1)
    onehot = np.zeros(es.shape)
    onehot[np.arange(es.shape[0]), closest] = 1.0
    ce = tn.scale(tn.sum(tn.log_softmax(es) * tn.const(onehot), axis=-1), -1.0)
    miss = (dc.select_index(es.data) != closest).astype(np.float64)
    return ce, miss


def loss_pred(modes, gt_svs):
    """Joint minimum over modes of the mean SV L2 error, per scene (B,)."""
    T = modes.shape[3] - 1
    sv = tn.take(tn.take(modes, slice(1, None), axis=2), slice(0, T), axis=3)   # (B, K, M-1, T, 2)
    K = sv.shape[1]
    target = np.broadcast_to(gt_svs[:, None], sv.shape)
    err = tn.rowwise_l2norm(sv - tn.const(target))                  # (B, K, M-1, T)
    per_mode = tn.mean(tn.mean(err, axis=-1), axis=-1)              # (B, K)
    best = tn.argmin(per_mode, axis=-1)
    if K == 1:
        return tn.take(per_mode, 0, axis=1)
    return tn.gather(per_mode, best)


def total_loss(l_plan, l_wta, l_pred, alpha: float, prediction_loss: bool = True):
    """Batch mean of L_plan + L_wta + alpha * L_pred."""
    per_scene = l_plan + l_wta
    if prediction_loss and l_pred is not None and alpha != 0.0:
        per_scene = per_scene + tn.scale(l_pred, alpha)
    return tn.mean(per_scene, axis=0)


def batch_loss(batch: md.SceneBatch, p, cfg: md.ModelConfig, tcfg: TrainConfig,
               score_mode: str = "paper"):
    """Forward, decode and score one batch; returns (loss tensor, stats dict)."""
    ab = tcfg.ablation
    G, _ = md.forward(batch, p, cfg, route_attraction_on=ab.route_attraction,
                      equivariant_init=ab.equivariant_init)
    modes, center = dc.decode(G, p, cfg.K, cfg.T_f)
    scores = dc.mode_scores(modes, center, score_mode)
    es = dc.ego_scores(scores)
    gt_ego = batch.future[:, 0]
    index = None
    if tcfg.plan_target == "closest":
        index = tn.argmin(ego_errors(dc.ego_trajectories(modes).data, gt_ego), axis=-1)
    lp = loss_plan(modes, es, gt_ego, index)
    lw, miss = loss_wta(es, modes, gt_ego)
    lpred = loss_pred(modes, batch.future[:, 1:]) if ab.prediction_loss else None
    loss = total_loss(lp, lw, lpred, tcfg.alpha, ab.prediction_loss)
    stats = {
        "plan": float(lp.data.mean()),
        "wta": float(lw.data.mean()),
        "pred": float(lpred.data.mean()) if lpred is not None else 0.0,
        "miss": float(miss.mean()),
    }
    return loss, stats


# -------------------------------------------------------------- optimizer


class Adam:
    def __init__(self, params, cfg: TrainConfig):
        self.beta1, self.beta2, self.eps = cfg.beta1, cfg.beta2, cfg.eps
        self.m = OrderedDict((k, np.zeros_like(v)) for k, v in params.items())
        self.v = OrderedDict((k, np.zeros_like(v)) for k, v in params.items())
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k in params:
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            params[k] = params[k] - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


# ---------------------------------------------------------------- batching


def prepare(scenes, C: int):
    """Group scenes by vehicle count once; routes are resampled here."""
    from .scene import resample_route

    past = [s.past for s in scenes]
    future = [s.future for s in scenes]
    route = [resample_route(s.route, C) for s in scenes]
    return past, future, route


def epoch_batches(counts, batch_size: int, seed: int, epoch: int):
    """Shuffled mini-batches of scene indices; each batch has one vehicle count."""
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(counts))
    buckets = OrderedDict()
    for i in order:
        buckets.setdefault(counts[i], []).append(int(i))
    batches = []
    for idx in buckets.values():
        batches += [idx[j:j + batch_size] for j in range(0, len(idx), batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


def _stack(prepared, idx):
    past, future, route = prepared
    return md.SceneBatch(past=np.stack([past[i] for i in idx]),
                         future=np.stack([future[i] for i in idx]),
                         route=np.stack([route[i] for i in idx]))


def gradient(batch, params, cfg, tcfg, score_mode):
    tape = tn.Tape()
    p = tape.params(params)
    loss, stats = batch_loss(batch, p, cfg, tcfg, score_mode)
    if not np.isfinite(loss.data):
        bad = tn.first_nonfinite(tape)
        where = f"op '{bad.op}'" + (f" ({bad.name})" if bad is not None and bad.name else "")
        raise NumericError(f"non-finite loss; first non-finite tensor at {where}")
    return float(loss.data), tn.backward(tape, loss), stats


# ------------------------------------------------------------------- train


def train(dataset, cfg: md.ModelConfig, tcfg: TrainConfig, score_mode: str = "paper",
          out_dir=None, resume=None, run_config=None):
    """Train from scratch (or from a checkpoint) and return (params, history).

    History holds one record per epoch with the mean batch losses. When
    ``out_dir`` is given, a checkpoint and ``history.jsonl`` are written there.
    """
    tcfg.validate()
    scenes = dataset.scenes if hasattr(dataset, "scenes") else list(dataset)
    if not scenes:
        raise ValueError("training needs a non-empty dataset")
    if resume is not None:
        ck = load_checkpoint(resume)
        _check_compatible(ck, cfg)
        params, opt, start = ck["params"], ck["optimizer"], ck["epoch"]
        opt.beta1, opt.beta2, opt.eps = tcfg.beta1, tcfg.beta2, tcfg.eps
    else:
        params = md.init_params(cfg, tcfg.seed)
        opt, start = Adam(params, tcfg), 0
    prepared = prepare(scenes, cfg.C)
    counts = [s.num_vehicles for s in scenes]
    history = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        hist_path = out / "history.jsonl"
        if resume is None or not hist_path.exists():
            _write_history_header(hist_path, tcfg, cfg, score_mode)
        if tcfg.epochs == start:
            save_checkpoint(out / "checkpoint.npz", params, opt, start, cfg, tcfg, score_mode, run_config)
    for epoch in range(start, tcfg.epochs):
        lr = learning_rate(tcfg, epoch)
        totals = {"loss": 0.0, "plan": 0.0, "wta": 0.0, "pred": 0.0, "miss": 0.0}
        n = 0
        for idx in epoch_batches(counts, tcfg.batch_size, tcfg.seed, epoch):
            loss, grads, stats = gradient(_stack(prepared, idx), params, cfg, tcfg, score_mode)
            opt.step(params, grads, lr)
            w = len(idx)
            totals["loss"] += loss * w
            for k, v in stats.items():
                totals[k] += v * w
            n += w
        rec = {"epoch": epoch + 1, "lr": lr, **{k: v / n for k, v in totals.items()}}
        history.append(rec)
        log.info("epoch %d lr %.3g loss %.4f plan %.4f", epoch + 1, lr, rec["loss"], rec["plan"])
        if out is not None:
            with open(out / "history.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec) + "\n")
            if (epoch + 1) % tcfg.checkpoint_every == 0 or epoch + 1 == tcfg.epochs:
                save_checkpoint(out / "checkpoint.npz", params, opt, epoch + 1, cfg, tcfg,
                                score_mode, run_config)
    return params, history


def _write_history_header(path, tcfg, cfg, score_mode):
    header = {"header": True, "ablation": asdict(tcfg.ablation), "model": asdict(cfg),
              "score_mode": score_mode, "plan_target": tcfg.plan_target, "alpha": tcfg.alpha}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")


# -------------------------------------------------------------- checkpoints


def save_checkpoint(path, params, opt: Adam, epoch: int, cfg: md.ModelConfig,
                    tcfg: TrainConfig, score_mode: str = "paper", run_config=None):
    """Atomic write: serialize to a temp file in the same directory, then rename."""
    path = Path(path)
    meta = {
        "format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
        "epoch": epoch, "step": opt.t, "model": asdict(cfg), "train": asdict(tcfg),
        "score_mode": score_mode, "param_names": list(params),
    }
    if run_config is not None:
        meta["run_config"] = run_config
    arrays = {"__meta__": np.array(json.dumps(meta))}
    for k, v in params.items():
        arrays[f"param/{k}"] = v
        arrays[f"adam_m/{k}"] = opt.m[k]
        arrays[f"adam_v/{k}"] = opt.v[k]
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> dict:
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["__meta__"]))
            if meta.get("format") != CHECKPOINT_FORMAT:
                raise CheckpointError(f"{path}: not an eqplan checkpoint")
            if meta.get("version") != CHECKPOINT_VERSION:
                raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('version')}"
                                      f" (expected {CHECKPOINT_VERSION})")
            names = meta["param_names"]
            params = OrderedDict((k, z[f"param/{k}"].copy()) for k in names)
            m = OrderedDict((k, z[f"adam_m/{k}"].copy()) for k in names)
            v = OrderedDict((k, z[f"adam_v/{k}"].copy()) for k in names)
    except CheckpointError:
        raise
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt or unreadable checkpoint ({e})") from None
    train_meta = dict(meta["train"])
    ablation = Ablation(**train_meta.pop("ablation"))
    tcfg = TrainConfig(**train_meta, ablation=ablation)
    opt = Adam(params, tcfg)
    opt.m, opt.v, opt.t = m, v, int(meta["step"])
    return {"params": params, "optimizer": opt, "epoch": int(meta["epoch"]),
            "model": md.ModelConfig(**meta["model"]), "train": tcfg,
            "score_mode": meta.get("score_mode", "paper"), "meta": meta}


def _check_compatible(ck, cfg: md.ModelConfig):
    if asdict(ck["model"]) != asdict(cfg):
        raise CheckpointError(f"model config {asdict(cfg)} does not match checkpoint {asdict(ck['model'])}")
    expected = md.init_params(cfg, 0)
    for k, v in expected.items():
        if k not in ck["params"] or ck["params"][k].shape != v.shape:
            raise CheckpointError(f"checkpoint parameter {k!r} missing or misshapen")
