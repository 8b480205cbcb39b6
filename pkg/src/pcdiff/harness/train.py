"""Training loop with exact resume, best/last checkpoints and NaN aborts."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import __version__
from .. import degrade as G
from .. import diffusion as D
from .. import model as M
from .. import numerics as nx
from ..layers import Params
from .config import RunConfig, RunManifest, write_atomic

log = logging.getLogger(__name__)


class NumericalFailure(RuntimeError):
    """Training produced a non-finite loss; a dump of the batch was written."""


@dataclass
class TrainItem:
    name: str
    ctx: M.Context
    x0: np.ndarray


def scene_dirs(dataset) -> list[Path]:
    root = Path(dataset)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and p.name.startswith("scene_"))
    if not dirs:
        raise FileNotFoundError(f"{root} holds no scene_#### directories")
    return dirs


def load_items(cfg: RunConfig) -> list[TrainItem]:
    mcfg = cfg.model()
    items = []
    for d in scene_dirs(cfg.dataset):
        pair = G.read_pair(d)
        ctx = M.Context.build(pair.input_cloud, pair.input_image, pair.camera, mcfg)
        items.append(TrainItem(d.name, ctx, ctx.normalize(pair.target_cloud, cfg.d)))
    return items


def schedule_of(cfg: RunConfig) -> D.NoiseSchedule:
    return D.make_schedule(cfg.T, cfg.beta_min, cfg.beta_max)


def new_params(cfg: RunConfig) -> Params:
    return M.build_params(cfg.model(), nx.RngStreams(cfg.seed).fresh("init"))


def new_optimizer(cfg: RunConfig) -> nx.OptimizerState:
    kind = cfg.optimizer
    return nx.OptimizerState(kind=kind, learning_rate=cfg.learning_rate,
                             momentum=cfg.momentum if kind == "sgd-momentum" else 0.0)


def learning_rate(cfg: RunConfig, step: int) -> float:
    total = cfg.epochs * cfg.steps_per_epoch
    start = cfg.lr_decay_start * total
    if step < start or total <= start:
        return cfg.learning_rate
    frac = (step - start) / (total - start)
    return cfg.learning_rate + frac * (cfg.lr_final - cfg.learning_rate)


def draw_t(cfg: RunConfig, rng: np.random.Generator) -> int:
    if cfg.small_t_fraction > 0 and rng.random() < cfg.small_t_fraction:
        return int(rng.integers(1, cfg.small_t_max + 1))
    return int(rng.integers(1, cfg.T + 1))


# checkpoints: parameters, optimiser moments and progress counters in one container


def checkpoint_arrays(params: Params, opt: nx.OptimizerState, epoch: int,
                      losses: list[float], best: float) -> dict[str, np.ndarray]:
    arrays = params.arrays()
    for i, m in enumerate(opt.first):
        arrays[f"opt/first/{i:04d}"] = m
    for i, v in enumerate(opt.second):
        arrays[f"opt/second/{i:04d}"] = v
    # counters as float32 are exact far beyond any desk-scale run
    arrays["state/step"] = np.array([opt.step_count], dtype=np.float32)
    arrays["state/epoch"] = np.array([epoch], dtype=np.float32)
    arrays["state/best"] = np.array([best], dtype=np.float32)
    arrays["state/losses"] = np.array(losses, dtype=np.float32).reshape(-1)
    return arrays


def restore(arrays: dict[str, np.ndarray], params: Params, opt: nx.OptimizerState):
    params.load_arrays(arrays)
    n = len(params)
    opt.first = [arrays[f"opt/first/{i:04d}"].copy() for i in range(n) if f"opt/first/{i:04d}" in arrays]
    opt.second = [arrays[f"opt/second/{i:04d}"].copy() for i in range(n) if f"opt/second/{i:04d}" in arrays]
    opt.step_count = int(arrays["state/step"][0])
    return int(arrays["state/epoch"][0]), [float(x) for x in arrays["state/losses"]], \
        float(arrays["state/best"][0])


def _abort(out: Path, item: TrainItem, t: int, eps: np.ndarray, step: int, err: Exception):
    path = out / "nan_dump.npz"
    np.savez(path, x0=item.x0, eps=eps, t=np.array(t), step=np.array(step),
             input_positions=item.ctx.input_positions)
    raise NumericalFailure(f"non-finite loss at step {step} on {item.name} (t={t}): {err}; "
                           f"batch dumped to {path}")


def train(cfg: RunConfig, resume: bool = False, items: list[TrainItem] | None = None,
          on_epoch=None) -> tuple[Params, RunManifest]:
    """Run (or resume) training; writes checkpoints, losses and manifest under ``cfg.out``."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    items = load_items(cfg) if items is None else items
    mcfg = cfg.model()
    sched = schedule_of(cfg)
    params = new_params(cfg)
    opt = new_optimizer(cfg)
    epoch0, losses, best = 0, [], float("inf")
    if resume and (out / "last.ckpt").exists():
        epoch0, losses, best = restore(nx.load(out / "last.ckpt"), params, opt)
        log.info("resumed at epoch %d (step %d)", epoch0, opt.step_count)
    write_atomic(out / "config.json", cfg.to_json())

    streams = nx.RngStreams(cfg.seed).child("train")
    plist = params.list()
    t_start = time.perf_counter()
    for epoch in range(epoch0, cfg.epochs):
        epoch_loss = []
        for _ in range(cfg.steps_per_epoch):
            step = opt.step_count
            rng = streams.fresh(f"step/{step}")  # a function of the step alone, so resume is exact
            opt.learning_rate = learning_rate(cfg, step)
            total = None
            cache = {}
            for b in range(cfg.batch):
                item = items[(step * cfg.batch + b) % len(items)]
                t = draw_t(cfg, rng)
                eps = rng.standard_normal(item.x0.shape).astype(np.float32)
                try:
                    if item.name not in cache:
                        cache[item.name] = M.compute_conditions(params, mcfg, item.ctx)
                    conds = cache[item.name]
                    loss = D.training_loss(
                        lambda x, tt: M.predict_eps(params, mcfg, item.ctx, conds, x, tt, cfg.T),
                        item.x0, t, eps, sched)
                    if not np.isfinite(loss.item()):
                        raise FloatingPointError("loss is not finite")
                except FloatingPointError as e:
                    _abort(out, item, t, eps, step, e)
                total = loss if total is None else nx.add(total, loss)
            total = nx.mul(total, 1.0 / cfg.batch)
            total.backward()
            bad = [p.name for p in plist if p.grad is not None and not np.isfinite(p.grad).all()]
            if bad:
                _abort(out, item, t, eps, step, FloatingPointError(f"non-finite gradient in {bad[0]}"))
            nx.optimizer_step(opt, plist)
            epoch_loss.append(total.item())
        # float32 like the checkpoint that stores them, so a resumed history matches exactly
        losses.append(float(np.float32(np.mean(epoch_loss))))
        log.info("epoch %d loss %.5f", epoch + 1, losses[-1])
        if on_epoch is not None:
            on_epoch(epoch + 1, losses[-1])
        arrays = checkpoint_arrays(params, opt, epoch + 1, losses, min(best, losses[-1]))
        if losses[-1] < best:
            best = losses[-1]
            nx.save(out / "best.ckpt", arrays)
        nx.save(out / "last.ckpt", arrays)

    write_atomic(out / "losses.csv", "epoch,loss\n" + "".join(
        f"{i + 1},{v:.8g}\n" for i, v in enumerate(losses)))
    manifest = RunManifest(cfg.hash(), G.tree_hash(cfg.dataset) if cfg.dataset else "",
                           params.count(), losses, None,
                           round(time.perf_counter() - t_start, 3), __version__)
    manifest.save(out / "manifest.json")
    return params, manifest


def load_model(checkpoint, cfg: RunConfig) -> Params:
    params = new_params(cfg)
    params.load_arrays(nx.load(checkpoint))
    return params
