"""Finite-difference gradient suites for primitives, blocks and the full model."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import acre, losses, mfi, network, nn
from . import autodiff as ad
from .autodiff import Graph, GradcheckReport

SCOPES = ("primitive", "block", "full")
DEFAULT_TOLERANCE = {"primitive": 1e-5, "block": 1e-4, "full": 1e-4}


@dataclass
class CheckResult:
    name: str
    reports: list[GradcheckReport]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.reports)

    @property
    def max_rel_err(self) -> float:
        return max(r.max_rel_err for r in self.reports)


def _weighted(y: ad.Tensor, seed: int = 7) -> ad.Tensor:
    return ad.sum_all(y * np.random.default_rng(seed).normal(size=y.shape))


def _run(name: str, fn: Callable, bind: dict, tolerance: float, leaves=None,
         max_elements: int | None = None) -> CheckResult:
    graph = Graph(fn, {k: v.shape for k, v in bind.items()})
    leaves = sorted(graph.grad_leaves) if leaves is None else leaves
    reports = [ad.gradcheck(graph, bind, leaf, tolerance, max_elements=max_elements, seed=1)
               for leaf in leaves]
    return CheckResult(name, reports)


# ---------------------------------------------------------------------------
# primitives

PRIMITIVES: dict[str, tuple[Callable, int]] = {
    "add": (lambda a, b: a + b, 2),
    "sub": (lambda a, b: a - b, 2),
    "mul": (lambda a, b: a * b, 2),
    "div": (lambda a, b: ad.div(a, ad.exp(b)), 2),
    "exp": (lambda a: ad.exp(a * 0.5), 1),
    "log": (lambda a: ad.log(ad.exp(a) + 1.0), 1),
    "sigmoid": (ad.sigmoid, 1),
    "relu": (ad.relu, 1),
    "softmax": (lambda a: ad.softmax(a, axis=-1), 1),
    "transpose": (lambda a: a.transpose(tuple(reversed(range(a.ndim)))), 1),
    "reshape": (lambda a: a.reshape(-1), 1),
    "sum": (lambda a: ad.sum_all(a * a), 1),
    "bce_with_logits": (lambda a: ad.bce_with_logits(a, np.arange(a.size).reshape(a.shape) % 2), 1),
    "einsum": (lambda a, b: ad.einsum("ij,kj->ik", a.reshape((a.shape[0], -1)),
                                      b.reshape((b.shape[0], -1))), 2),
    "concat": (lambda a, b: ad.concat([a, b * 2.0], axis=0), 2),
}

SHAPED_PRIMITIVES: dict[str, tuple[Callable, dict]] = {
    "conv2d": (lambda x, w, b: ad.conv2d(x, w, b, stride=1, padding=1),
               {"x": (2, 5, 5), "w": (3, 2, 3, 3), "b": (3,)}),
    "conv2d_stride2": (lambda x, w, b: ad.conv2d(x, w, b, stride=2, padding=1),
                       {"x": (2, 6, 6), "w": (2, 2, 3, 3), "b": (2,)}),
    "conv2d_1x1": (lambda x, w, b: ad.conv2d(x, w, b), {"x": (3, 4, 4), "w": (2, 3, 1, 1), "b": (2,)}),
    "resize_up": (lambda x: ad.resize_bilinear(x, (7, 6)), {"x": (2, 3, 3)}),
    "resize_down": (lambda x: ad.resize_bilinear(x, (2, 3)), {"x": (1, 6, 8)}),
    "fc_axis0": (lambda x, w, b: nn.fc_axis(x, 0, w, b), {"x": (4, 3, 2), "w": (4, 4), "b": (4,)}),
    "fc_axis1": (lambda x, w, b: nn.fc_axis(x, 1, w, b), {"x": (2, 5, 3), "w": (5, 5), "b": (5,)}),
    "take": (lambda x: ad.take(x, 0, 1, 3), {"x": (4, 2, 2)}),
}

PRIMITIVE_SHAPES = ((3,), (2, 5), (2, 3, 4))


def primitive_checks(tolerance: float = 1e-5, seed: int = 0) -> Iterator[CheckResult]:
    rng = np.random.default_rng(seed)
    for name, (fn, arity) in PRIMITIVES.items():
        names = ["a", "b"][:arity]
        for shape in PRIMITIVE_SHAPES:
            bind = {n: rng.uniform(-1, 1, size=shape) for n in names}
            if name == "relu":
                # keep inputs away from the kink
                bind["a"] = np.where(np.abs(bind["a"]) < 0.05, 0.3, bind["a"])
            yield _run(f"{name}{shape}", lambda fn=fn, names=names, **t: _weighted(fn(*[t[n] for n in names])),
                       bind, tolerance)
    for name, (fn, shapes) in SHAPED_PRIMITIVES.items():
        bind = {k: rng.normal(size=s) for k, s in shapes.items()}
        yield _run(name, lambda fn=fn, **t: _weighted(fn(**t)), bind, tolerance)


# ---------------------------------------------------------------------------
# composite blocks

def _params(specs, rng, scale=0.5) -> dict[str, np.ndarray]:
    return {k: rng.normal(size=s.shape) * scale for k, s in specs.items()}


def block_checks(tolerance: float = 1e-4, seed: int = 0) -> Iterator[CheckResult]:
    rng = np.random.default_rng(seed)
    C, S = 4, 8
    x = rng.normal(size=(C, S, S))

    bind = {"x": x, "w": rng.normal(size=(4, 4)), "b": rng.normal(size=4)}
    yield _run("global_mlp", lambda x, w, b: _weighted(mfi.global_mlp(x, 2, {"w": w, "b": b})),
               bind, tolerance)
    bind = {"x": x, "w": rng.normal(size=(16, 16)) * 0.5, "b": rng.normal(size=16)}
    yield _run("local_mlp", lambda x, w, b: _weighted(mfi.local_mlp(x, 4, {"w": w, "b": b})),
               bind, tolerance)
    bind = {"x": x, "global.w": rng.normal(size=(4, 4)), "global.b": rng.normal(size=4),
            "local.w": rng.normal(size=(16, 16)) * 0.5, "local.b": rng.normal(size=16)}
    yield _run("cascade_mlp", lambda x, **p: _weighted(mfi.cascade_mlp(x, (2, 4), p)), bind, tolerance)

    schedule = mfi.CascadeSchedule.for_side(S)
    for variant in mfi.VARIANTS:
        bind = _params(mfi.param_specs(C, schedule), rng)
        bind["F"] = rng.normal(size=(C, S, S))
        yield _run(f"mfi_block[{variant}]",
                   lambda F, variant=variant, **p: _weighted(mfi.mfi_block(F, schedule, p, variant)),
                   bind, tolerance)

    attn = {k[len("attn."):]: v for k, v in _params(acre.param_specs(3), rng).items() if k.startswith("attn.")}
    attn["x"] = rng.normal(size=(3, 4, 5))
    yield _run("axial_attention", lambda x, **p: _weighted(acre.axial_attention(x, p)), attn, tolerance)

    bind = _params(acre.param_specs(2), rng)
    bind["F"] = rng.normal(size=(2, 4, 4))
    bind["m"] = rng.normal(size=(1, 2, 2))
    yield _run("acre_block", lambda F, m, **p: _weighted(acre.acre_block(F, m, p)), bind, tolerance)

    cfg = network.ModelConfig(widths=(2, 2, 3, 4, 5), decoder_channels=3, use_mfi=False)
    dec = {k[len("dec."):]: v for k, v in _params(network.param_specs(cfg, 64), rng).items()
           if k.startswith("dec.")}
    for name, (c, s) in zip(("f1", "f2", "f3"), zip(cfg.branch_channels, (2, 4, 8))):
        dec[name] = rng.normal(size=(c, s, s))
    yield _run("partial_decode",
               lambda f1, f2, f3, **p: _weighted(network.partial_decode(f1, f2, f3, p, cfg)),
               dec, tolerance)

    g = np.zeros((1, 16, 16), dtype=np.uint8)
    g[:, 4:11, 3:12] = 1
    bind = {f"m{i}": rng.normal(size=(1, s, s)) for i, s in enumerate((2, 4, 8, 16))}
    yield _run("total_loss", lambda **m: losses.total_loss(g, [m[f"m{i}"] for i in range(4)]).total,
               bind, tolerance)


# ---------------------------------------------------------------------------
# whole model

TINY = network.ModelConfig(widths=(2, 2, 2, 2, 2), decoder_channels=2)


def full_checks(tolerance: float = 1e-4, seed: int = 3, max_elements: int = 4,
                settings=("full", "w/o-ACRE", "MFI-CP")) -> Iterator[CheckResult]:
    """Loss of forward_full at 64x64 with tiny widths; each leaf on a sampled subset."""
    for setting in settings:
        rng = np.random.default_rng(seed)
        cfg = TINY.ablate(setting)
        specs = network.param_specs(cfg, 64)
        bind = _params(specs, rng, scale=0.4)
        bind["image"] = rng.uniform(size=(3, 64, 64))
        target = np.zeros((1, 64, 64), dtype=np.uint8)
        target[:, 20:44, 16:40] = 1

        def fn(image, cfg=cfg, target=target, **p):
            return losses.total_loss(target, network.forward_full(image, p, cfg).masks).total

        yield _run(f"forward_full[{setting}]", fn, bind, tolerance,
                   leaves=["image", *sorted(specs)], max_elements=max_elements)


def run_scope(scope: str, tolerance: float | None = None) -> list[CheckResult]:
    if scope not in SCOPES:
        raise ValueError(f"unknown gradcheck scope {scope!r}; choose from {SCOPES}")
    tol = DEFAULT_TOLERANCE[scope] if tolerance is None else tolerance
    suite = {"primitive": primitive_checks, "block": block_checks, "full": full_checks}[scope]
    with ad.precision("wide"):
        return list(suite(tol))
