"""Optimizers, LookAhead, the training step and the fit loop."""
from __future__ import annotations

import contextlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import data as data_mod
from . import losses
from .network import ModelConfig, forward_full, init_params
from .params import ParamStore

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 8
    optimizer: str = "adam"          # adam | sgd
    lr: float = 2e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lookahead_k: int = 5
    lookahead_alpha: float = 0.5
    clip_norm: float = 5.0           # <= 0 disables clipping
    augment: bool = False
    seed: int = 0
    deterministic: bool = False
    checkpoint_every: int = 0        # epochs; 0 keeps only best and last
    eval_every: int = 1
    loss_kernel: int = 15
    loss_gain: float = 5.0

    def __post_init__(self):
        if self.lookahead_k < 1:
            raise ValueError(f"lookahead_k must be >= 1, got {self.lookahead_k}")
        if not 0 < self.lookahead_alpha <= 1:
            raise ValueError(f"lookahead_alpha must be in (0, 1], got {self.lookahead_alpha}")
        if self.lr < 0:
            raise ValueError(f"lr must be non-negative, got {self.lr}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}


# ---------------------------------------------------------------------------
# optimizers over name -> array mappings; updates replace arrays, never mutate

class SGD:
    def __init__(self, lr: float, momentum: float = 0.9):
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: ParamStore, grads: Mapping[str, np.ndarray]) -> None:
        for name, g in grads.items():
            v = self.velocity.get(name)
            v = g if v is None else self.momentum * v + g
            self.velocity[name] = v
            params[name] = (params[name] - self.lr * v).astype(params[name].dtype)


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: ParamStore, grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for name, g in grads.items():
            m = self.m.get(name, 0.0) * self.beta1 + (1 - self.beta1) * g
            v = self.v.get(name, 0.0) * self.beta2 + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            params[name] = (params[name] - update).astype(params[name].dtype)


class Lookahead:
    """Every ``k`` inner steps: slow <- slow + alpha (fast - slow); fast <- slow."""

    def __init__(self, inner, params: ParamStore, k: int = 5, alpha: float = 0.5):
        self.inner = inner
        self.k = k
        self.alpha = alpha
        self.counter = 0
        self.slow = {name: arr.copy() for name, arr in params.items()}

    def step(self, params: ParamStore, grads: Mapping[str, np.ndarray]) -> None:
        self.inner.step(params, grads)
        self.counter += 1
        if self.counter % self.k:
            return
        a = self.alpha
        for name, fast in params.items():
            # (1 - a) * slow + a * fast is exactly fast when a == 1
            slow = ((1 - a) * self.slow[name] + a * fast).astype(fast.dtype)
            self.slow[name] = slow
            params[name] = slow.copy()


def make_optimizer(config: TrainConfig, params: ParamStore) -> Lookahead:
    if config.optimizer == "adam":
        inner = Adam(config.lr, config.beta1, config.beta2, config.adam_eps)
    else:
        inner = SGD(config.lr, config.momentum)
    return Lookahead(inner, params, config.lookahead_k, config.lookahead_alpha)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(math.fsum(float(np.vdot(g, g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for name in grads:
            grads[name] = grads[name] * np.asarray(factor, dtype=grads[name].dtype)
    return norm


def first_nonfinite(named: Mapping[str, np.ndarray]) -> str | None:
    for name, arr in named.items():
        if not np.all(np.isfinite(arr)):
            return name
    return None


# ---------------------------------------------------------------------------
# threads and determinism

@contextlib.contextmanager
def thread_limits(deterministic: bool = False):
    """Cap BLAS threads from CMMLP_THREADS; deterministic mode forces one thread."""
    env = os.environ.get("CMMLP_THREADS")
    limit = 1 if deterministic else (int(env) if env else None)
    if limit is None:
        yield
        return
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=limit):
        yield


def deterministic_from_env(default: bool = False) -> bool:
    return os.environ.get("CMMLP_DETERMINISTIC", "1" if default else "0") == "1"


# ---------------------------------------------------------------------------
# steps

def sample_loss_graph(sample: data_mod.Sample, model: ModelConfig, config: TrainConfig,
                      shapes: Mapping[str, tuple]) -> ad.Graph:
    image = sample.image
    mask = sample.mask

    def fn(**params):
        out = forward_full(ad.Tensor(image, dtype=ad.default_dtype()), params, model)
        fn.outputs = out
        report = losses.total_loss(mask, out.masks, kernel_size=config.loss_kernel,
                                   weight_gain=config.loss_gain)
        fn.report = report
        return report.total

    return ad.Graph(fn, shapes)


def train_step(params: ParamStore, batch: Sequence[data_mod.Sample], config: TrainConfig,
               model: ModelConfig, optimizer: Lookahead) -> tuple[ParamStore, dict]:
    """One optimizer update from the mean loss over ``batch`` (samples in order)."""
    if not batch:
        raise ValueError("empty batch")
    shapes = params.shapes()
    total_grads: dict[str, np.ndarray] | None = None
    summaries = []
    for sample in batch:
        graph = sample_loss_graph(sample, model, config, shapes)
        loss = ad.forward(graph, params)
        report = graph.fn.report
        if not np.isfinite(loss.item()):
            bad = first_nonfinite({f"M{i}": m.data for i, m in enumerate(graph.fn.outputs.masks)})
            bad = bad or first_nonfinite(params) or "loss"
            raise NumericError(f"non-finite loss on sample {sample.id}; first non-finite tensor: {bad}")
        grads = ad.backward(graph, loss)
        summaries.append(report.summary())
        if total_grads is None:
            total_grads = grads
        else:
            for k in total_grads:
                total_grads[k] = total_grads[k] + grads[k]
    n = len(batch)
    mean_grads = {k: g / np.asarray(n, dtype=g.dtype) for k, g in total_grads.items()}
    bad = first_nonfinite(mean_grads)
    if bad:
        raise NumericError(f"non-finite gradient for {bad}")
    grad_norm = clip_by_global_norm(mean_grads, config.clip_norm)
    optimizer.step(params, mean_grads)
    summary = {
        "loss": math.fsum(s["total"] for s in summaries) / n,
        "branches": [math.fsum(s["branches"][i] for s in summaries) / n
                     for i in range(len(summaries[0]["branches"]))],
        "iou": math.fsum(sum(s["iou"]) for s in summaries) / n,
        "bce": math.fsum(sum(s["bce"]) for s in summaries) / n,
        "grad_norm": grad_norm,
    }
    return params, summary


# ---------------------------------------------------------------------------
# inference and evaluation

def predict(params: Mapping[str, np.ndarray], image: np.ndarray, model: ModelConfig) -> np.ndarray:
    """Foreground probability map (H, W)."""
    tensors = {k: ad.Tensor(v) for k, v in params.items()}
    out = forward_full(ad.Tensor(image, dtype=ad.default_dtype()), tensors, model)
    return out.final.data[0]


def evaluate(params, samples: Sequence[data_mod.Sample], model: ModelConfig,
             threshold: float = 0.5) -> list[losses.MetricReport]:
    return [losses.metrics(predict(params, s.image, model), s.mask[0], threshold) for s in samples]


# ---------------------------------------------------------------------------
# fit loop

@dataclass
class FitResult:
    params: ParamStore        # best checkpoint
    last: ParamStore
    history: list[dict]
    best_epoch: int


def fit(train_set: Sequence[data_mod.Sample], val_set: Sequence[data_mod.Sample],
        config: TrainConfig, model: ModelConfig, out_dir=None,
        params: ParamStore | None = None,
        on_epoch: Callable[[dict], None] | None = None) -> FitResult:
    if not train_set:
        raise ValueError("fit needs a non-empty training set")
    size = train_set[0].image.shape[-1]
    if params is None:
        params = init_params(model, size, config.seed)
    optimizer = make_optimizer(config, params)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "history.jsonl").write_text("")
    history: list[dict] = []
    best_score, best_epoch, best = -math.inf, 0, params.copy()
    rng = np.random.default_rng(config.seed)
    step = 0
    with thread_limits(config.deterministic):
        for epoch in range(1, config.epochs + 1):
            t0 = time.perf_counter()
            order = rng.permutation(len(train_set))
            summaries = []
            for start in range(0, len(order), config.batch_size):
                batch = [train_set[i] for i in order[start:start + config.batch_size]]
                if config.augment:
                    batch = [data_mod.augment(s, [config.seed, epoch, int(i)])
                             for s, i in zip(batch, order[start:start + config.batch_size])]
                params, summary = train_step(params, batch, config, model, optimizer)
                summaries.append(summary)
                step += 1
            record = {
                "epoch": epoch,
                "step": step,
                "loss": math.fsum(s["loss"] for s in summaries) / len(summaries),
                "iou": math.fsum(s["iou"] for s in summaries) / len(summaries),
                "bce": math.fsum(s["bce"] for s in summaries) / len(summaries),
            }
            evaluate_now = (config.eval_every > 0 and epoch % config.eval_every == 0) \
                or epoch == config.epochs
            if evaluate_now:
                if val_set:
                    val = losses.aggregate(evaluate(params, val_set, model))
                    record.update(val_dice=val.dice, val_miou=val.miou, val_mae=val.mae,
                                  val_mpa=val.mpa)
                    score = val.dice
                else:
                    score = -record["loss"]
                if score > best_score:
                    best_score, best_epoch, best = score, epoch, params.copy()
            if not config.deterministic:
                record["seconds"] = round(time.perf_counter() - t0, 3)
            history.append(record)
            log.info("epoch %d loss %.4f%s", epoch, record["loss"],
                     f" val_dice {record['val_dice']:.4f}" if "val_dice" in record else "")
            if out_dir is not None:
                with open(out_dir / "history.jsonl", "a") as fh:
                    fh.write(json.dumps(record, sort_keys=True) + "\n")
                if config.checkpoint_every and epoch % config.checkpoint_every == 0:
                    params.save(out_dir / f"epoch_{epoch:04d}.cmml")
            if on_epoch is not None:
                on_epoch(record)
    if out_dir is not None:
        best.save(out_dir / "checkpoint.cmml")
        params.save(out_dir / "last.cmml")
    return FitResult(best, params.copy(), history, best_epoch)
