"""Training loop, checkpoints and retrieval evaluation.

Checkpoint directory layout::

    <dir>/weights.npz      model parameters and buffers (keys backbone.*, pee.*, gee.*, cea.*)
                           plus objective.* (the learnable InfoNCE temperature)
    <dir>/optimizer.pt     AdamW and LR-scheduler state
    <dir>/config.yaml      the full TrainConfig
    <dir>/state.json       step counter and last evaluation record

Per-step randomness (batch draw, augmentation, dropout) is derived from
``(seed, step)`` alone, so a run resumed from step ``t`` sees exactly the
data and masks an uninterrupted run would have seen at step ``t + 1``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch

from mean_cvgl.backbone import ImageBatch, load_archive, save_archive
from mean_cvgl.config import ConfigError, TrainConfig
from mean_cvgl.data import DatasetIndex, augment, sample_batch, stack_view
from mean_cvgl.losses import LossBundle, Objective
from mean_cvgl.metrics import EmbeddingIndex, RetrievalReport, retrieval_report
from mean_cvgl.model import MEAN, build_model, split_output

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
DTYPES = {"float32": torch.float32, "float64": torch.float64}


class NonFiniteLossError(FloatingPointError):
    def __init__(self, component: str, step: Optional[int] = None):
        self.component = component
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite {component} loss{where}")


@dataclass
class TrainState:
    config: TrainConfig
    model: MEAN
    objective: Objective
    optimizer: torch.optim.Optimizer
    scheduler: torch.optim.lr_scheduler.LRScheduler
    step: int = 0
    last_metrics: dict = field(default_factory=dict)

    @property
    def dtype(self):
        return DTYPES[self.config.dtype]


def make_state(config: TrainConfig) -> TrainState:
    config.validate()
    dtype = DTYPES[config.dtype]
    model = build_model(config.model, config.seed, dtype)
    objective = Objective(config.loss).to(dtype)
    params = [p for p in list(model.parameters()) + list(objective.parameters()) if p.requires_grad]
    optimizer = torch.optim.AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    steps = config.steps
    if config.schedule == "cosine":
        factor = lambda s: 0.5 * (1.0 + math.cos(math.pi * min(s, steps) / steps))  # noqa: E731
    else:
        factor = lambda s: 1.0  # noqa: E731
    scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, factor)
    return TrainState(config, model, objective, optimizer, scheduler)


def step_streams(seed: int, step: int):
    """Independent numpy and torch random streams for one training step."""
    rng = np.random.default_rng([seed, step])
    gen = torch.Generator().manual_seed(int(np.random.default_rng([seed, step, 1]).integers(2**62)))
    return rng, gen


def train_step(model: MEAN, objective: Objective, batch_pair, optimizer,
               generator: Optional[torch.Generator] = None, step: Optional[int] = None) -> LossBundle:
    """One forward/backward/update on a class-aligned drone/satellite batch pair."""
    drone, sat = batch_pair
    if not torch.equal(drone.labels, sat.labels):
        raise ValueError("drone and satellite batches are not class-aligned")
    model.train()
    objective.train()
    # one pass over both views so batch-norm statistics are shared, as at inference
    out = model(torch.cat([drone.pixels, sat.pixels]), generator)
    out_d, out_s = split_output(out, len(drone))
    bundle = objective(out_d, out_s, drone.labels)
    for name in ("cda", "infonce", "ce", "total"):
        if not torch.isfinite(getattr(bundle, name)):
            raise NonFiniteLossError(name, step)
    optimizer.zero_grad(set_to_none=True)
    bundle.total.backward()
    optimizer.step()
    return LossBundle(*(t.detach() for t in (bundle.cda, bundle.infonce, bundle.ce, bundle.total)))


def _draw(state: TrainState, index: DatasetIndex, store, step: int):
    cfg = state.config
    rng, gen = step_streams(cfg.seed, step)
    drone, sat = sample_batch(index, store, cfg.batch_classes, rng, state.dtype)
    if not cfg.augment.is_identity:
        drone = ImageBatch(augment(drone.pixels, cfg.augment, gen), drone.view, drone.labels)
        sat = ImageBatch(augment(sat.pixels, cfg.augment, gen), sat.view, sat.labels)
    return (drone, sat), gen


def run_step(state: TrainState, index: DatasetIndex, store) -> LossBundle:
    step = state.step + 1
    batch, gen = _draw(state, index, store, step)
    bundle = train_step(state.model, state.objective, batch, state.optimizer, gen, step)
    state.scheduler.step()
    state.step = step
    return bundle


# -- evaluation -------------------------------------------------------------------


def embed_view(model: MEAN, index: DatasetIndex, store, view: str, dtype=torch.float32) -> EmbeddingIndex:
    batch = stack_view(index, store, view, dtype)
    vectors = model.embed(batch.pixels).double().numpy()
    return EmbeddingIndex(vectors, batch.labels.numpy(), view)


def evaluate(model: MEAN, index: DatasetIndex, store, direction: str = "drone->satellite",
             gallery_index: Optional[DatasetIndex] = None, ks=(1, 5, 10)) -> RetrievalReport:
    """Retrieval report for one direction; queries come from ``index``, gallery from ``gallery_index`` (default: same)."""
    dtype = next(model.parameters()).dtype
    gallery_index = gallery_index or index
    if direction == "drone->satellite":
        q, g = embed_view(model, index, store, "drone", dtype), embed_view(model, gallery_index, store, "satellite", dtype)
    elif direction == "satellite->drone":
        q, g = embed_view(model, index, store, "satellite", dtype), embed_view(model, gallery_index, store, "drone", dtype)
    else:
        raise ValueError(f"unknown direction {direction!r}")
    return retrieval_report(q, g, direction, ks)


def evaluate_both(model, index, store, gallery_index=None) -> Dict[str, RetrievalReport]:
    return {d: evaluate(model, index, store, d, gallery_index) for d in ("drone->satellite", "satellite->drone")}


def _eval_record(step: int, bundle: Optional[LossBundle], reports) -> dict:
    rec = {"step": step}
    if bundle is not None:
        rec.update(bundle.as_floats())
    for direction, rep in reports.items():
        tag = "d2s" if direction.startswith("drone") else "s2d"
        for k, v in sorted(rep.recall_at.items()):
            rec[f"{tag}_R@{k}"] = v
        rec[f"{tag}_AP"] = rep.ap
    return rec


# -- checkpoints ------------------------------------------------------------------


def save_checkpoint(state: TrainState, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    weights = dict(state.model.state_dict())
    weights.update({f"objective.{k}": v for k, v in state.objective.state_dict().items()})
    save_archive(d / "weights.npz", weights, {"kind": "mean-model", "step": state.step,
                                               "descriptor_dim": state.model.descriptor_dim})
    torch.save({"optimizer": state.optimizer.state_dict(), "scheduler": state.scheduler.state_dict()},
               d / "optimizer.pt")
    state.config.save(d / "config.yaml")
    (d / "state.json").write_text(json.dumps(
        {"format_version": CHECKPOINT_VERSION, "step": state.step, "last_metrics": state.last_metrics}, indent=2))
    return d


def load_checkpoint(directory, config: Optional[TrainConfig] = None) -> TrainState:
    """Restore a TrainState. If ``config`` is given it must describe the same architecture."""
    d = Path(directory)
    saved = TrainConfig.load(d / "config.yaml")
    if config is not None and config.model != saved.model:
        raise ConfigError("checkpoint architecture does not match the supplied config")
    cfg = config or saved
    state = make_state(cfg)
    weights, manifest = load_archive(d / "weights.npz")
    if manifest.get("descriptor_dim") not in (None, state.model.descriptor_dim):
        raise ConfigError("checkpoint descriptor dimension does not match the config")
    obj = {k[len("objective."):]: v for k, v in weights.items() if k.startswith("objective.")}
    model_w = {k: v for k, v in weights.items() if not k.startswith("objective.")}
    try:
        state.model.load_state_dict(model_w)
        state.objective.load_state_dict(obj)
    except RuntimeError as exc:
        raise ConfigError(f"checkpoint does not fit the model: {str(exc).splitlines()[0]}") from None
    opt = torch.load(d / "optimizer.pt", weights_only=False)
    state.optimizer.load_state_dict(opt["optimizer"])
    state.scheduler.load_state_dict(opt["scheduler"])
    meta = json.loads((d / "state.json").read_text())
    state.step = meta["step"]
    state.last_metrics = meta.get("last_metrics", {})
    return state


def evaluate_checkpoint(directory, index: DatasetIndex, store, direction: str,
                        config: Optional[TrainConfig] = None, gallery_index=None) -> RetrievalReport:
    state = load_checkpoint(directory, config)
    return evaluate(state.model, index, store, direction, gallery_index)


# -- fit ---------------------------------------------------------------------------


@dataclass
class FitResult:
    state: TrainState
    history: List[dict]
    metrics: List[dict]
    checkpoint: Optional[Path] = None


def fit(config: TrainConfig, index: DatasetIndex, store, eval_index: Optional[DatasetIndex] = None,
        out_dir=None, resume=None, stop_at: Optional[int] = None) -> FitResult:
    """Train for ``config.steps`` steps, evaluating every ``config.eval_every`` steps and at the end.

    ``eval_index`` defaults to the training split. Losses for every step go to
    ``history``; one record per evaluation goes to ``metrics`` (and to
    ``<out_dir>/metrics.jsonl`` when an output directory is given).
    ``stop_at`` ends the run early (used to simulate interruptions).
    """
    config.validate()
    eligible = sum(1 for c in index.classes if index.drone.get(c) and index.satellite.get(c))
    if eligible < config.batch_classes:
        raise ValueError(f"dataset has {eligible} usable classes, fewer than batch_classes={config.batch_classes}")
    if max(index.label_of(c) for c in index.classes) >= config.model.num_classes:
        raise ConfigError(f"dataset has {len(index.classes)} classes but the model has {config.model.num_classes}")
    state = load_checkpoint(resume, config) if resume else make_state(config)
    eval_index = eval_index or index
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        config.save(out / "config.yaml")
    history, metrics = [], []
    last = min(config.steps, stop_at) if stop_at else config.steps
    while state.step < last:
        bundle = run_step(state, index, store)
        history.append({"step": state.step, **bundle.as_floats()})
        is_eval = (config.eval_every and state.step % config.eval_every == 0) or state.step == config.steps
        if is_eval:
            rec = _eval_record(state.step, bundle, evaluate_both(state.model, eval_index, store))
            state.last_metrics = rec
            metrics.append(rec)
            log.info("step %d %s", state.step, rec)
            if out:
                with open(out / "metrics.jsonl", "a") as fh:
                    fh.write(json.dumps(rec) + "\n")
        if out and config.checkpoint_every and state.step % config.checkpoint_every == 0:
            save_checkpoint(state, out / f"step_{state.step:06d}")
    ckpt = save_checkpoint(state, out / "final") if out else None
    return FitResult(state, history, metrics, ckpt)
