"""Command-line entry point: gen, train, eval, predict, gradcheck, ablate.

Exit codes: 0 ok, 1 usage or config error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import checks, config as cfgmod, data, losses, network, training
from .autodiff import ShapeError
from .config import ConfigError, RunConfig
from .params import CheckpointError, ParamStore

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
CONFIG_NAME = "config.cfg"

log = logging.getLogger("cmmlp")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# helpers

def resolve_config(path, overrides=()) -> RunConfig:
    run = cfgmod.load(path) if path else RunConfig()
    run = cfgmod.parse_overrides(overrides, run)
    if training.deterministic_from_env():
        run = replace(run, train=replace(run.train, deterministic=True))
    return run


def config_for_checkpoint(checkpoint, path=None) -> RunConfig:
    path = Path(path) if path else Path(checkpoint).parent / CONFIG_NAME
    if not path.exists():
        raise UsageError(f"no config given and {path} does not exist; pass --config")
    return cfgmod.load(path)


def load_checkpoint(path, run: RunConfig) -> ParamStore:
    params = ParamStore.load(path)
    specs = network.param_specs(run.model, run.data.size)
    if set(specs) != set(params):
        missing = sorted(set(specs) - set(params))
        extra = sorted(set(params) - set(specs))
        raise CheckpointError(f"{path} does not match the model config "
                              f"(missing {missing[:3]}, unexpected {extra[:3]})")
    for name, spec in specs.items():
        if params[name].shape != spec.shape:
            raise CheckpointError(f"{path}: {name} has shape {params[name].shape}, expected {spec.shape}")
    return params


def load_samples(root, run: RunConfig) -> list[data.Sample]:
    if not root:
        raise UsageError("no data directory given (use --data or data.root)")
    return data.load_root(root, run.data.size)


def train_and_eval_sets(samples, run: RunConfig):
    if run.data.eval_on_train:
        return list(samples), list(samples), list(samples)
    return data.split(samples, run.data.split, run.data.split_seed)


def write_report(rows: dict[str, losses.MetricReport], per_image: list[str], out) -> str:
    table = losses.format_table(rows)
    if out:
        out = Path(out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(table + "\n")
        out.with_suffix(".jsonl").write_text("".join(line + "\n" for line in per_image))
    return table


# ---------------------------------------------------------------------------
# commands

def cmd_gen(args) -> int:
    spec_dict = {}
    if args.spec:
        try:
            spec_dict = json.loads(Path(args.spec).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise data.DataError(f"cannot read spec {args.spec}: {exc}") from exc
    for key in ("seed", "count", "size"):
        if getattr(args, key) is not None:
            spec_dict[key] = getattr(args, key)
    spec = data.SynthSpec.from_dict(spec_dict)
    samples = data.generate(spec)
    data.write_dir(samples, args.out, spec)
    print(f"wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    run = resolve_config(args.config, args.set)
    if args.data:
        run = replace(run, data=replace(run.data, root=str(args.data)))
    samples = load_samples(run.data.root, run)
    train_set, val_set, _ = train_and_eval_sets(samples, run)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.save(run, out / CONFIG_NAME)
    result = training.fit(train_set, val_set, run.train, run.model, out_dir=out)
    last = result.history[-1]
    print(f"trained {len(result.history)} epochs; final loss {last['loss']:.4f}; "
          f"best epoch {result.best_epoch}; checkpoint {out / 'checkpoint.cmml'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.oracle:
        run = resolve_config(args.config, args.set)
        samples = load_samples(args.data, run)
        reports = [losses.metrics(s.mask[0].astype(np.float64), s.mask[0], args.threshold) for s in samples]
        name = "oracle"
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint unless --oracle is given")
        run = cfgmod.parse_overrides(args.set, config_for_checkpoint(args.checkpoint, args.config))
        params = load_checkpoint(args.checkpoint, run)
        samples = load_samples(args.data, run)
        with training.thread_limits(training.deterministic_from_env()):
            reports = training.evaluate(params, samples, run.model, args.threshold)
        name = Path(args.checkpoint).stem
    per_image = [r.to_json(id=s.id) for s, r in zip(samples, reports)]
    print(write_report({name: losses.aggregate(reports)}, per_image, args.out))
    return EXIT_OK


def _read_image(path, size: int) -> tuple[np.ndarray, tuple[int, int]]:
    try:
        im = Image.open(path)
        im.load()
    except (OSError, ValueError) as exc:
        raise data.DataError(f"unreadable image {path}: {exc}") from exc
    im = im.convert("RGB")
    original = im.size
    if im.size != (size, size):
        im = im.resize((size, size), Image.BILINEAR)
    return np.asarray(im, dtype=np.float32).transpose(2, 0, 1) / 255.0, original


def cmd_predict(args) -> int:
    run = cfgmod.parse_overrides(args.set, config_for_checkpoint(args.checkpoint, args.config))
    params = load_checkpoint(args.checkpoint, run)
    image, original = _read_image(args.image, run.data.size)
    prob = training.predict(params, image, run.model)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    prob_im = Image.fromarray(np.round(prob * 255).astype(np.uint8), mode="L")
    if prob_im.size != original:
        prob_im = prob_im.resize(original, Image.BILINEAR)
    prob_im.save(out)
    binary = np.asarray(prob_im) >= 128
    base = np.asarray(Image.open(args.image).convert("RGB"), dtype=np.float32)
    tint = np.array([255.0, 0.0, 0.0])
    base[binary] = 0.5 * base[binary] + 0.5 * tint
    overlay = out.with_name(out.stem + "_overlay.png")
    Image.fromarray(base.astype(np.uint8), mode="RGB").save(overlay)
    print(f"wrote {out} and {overlay}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = checks.run_scope(args.scope, args.tolerance)
    failed = 0
    for r in results:
        status = "ok" if r.passed else "FAIL"
        failed += not r.passed
        print(f"{status:4}  {r.name:28s}  max_rel_err={r.max_rel_err:.3e}")
    print(f"{len(results) - failed}/{len(results)} checks passed ({args.scope})")
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_ablate(args) -> int:
    run = resolve_config(args.config, args.set)
    if args.data:
        run = replace(run, data=replace(run.data, root=str(args.data)))
    settings = [s.strip() for s in args.settings.split(",") if s.strip()]
    unknown = [s for s in settings if s not in network.ABLATIONS]
    if not settings or unknown:
        raise UsageError(f"unknown ablation settings {unknown}; known: {sorted(network.ABLATIONS)}")
    samples = load_samples(run.data.root, run)
    train_set, val_set, test_set = train_and_eval_sets(samples, run)
    eval_set = test_set or val_set or train_set
    rows, per_image = {}, []
    for setting in settings:
        model = run.model.ablate(setting)
        log.info("ablation %s: %d parameters", setting, network.param_count(model, run.data.size))
        result = training.fit(train_set, val_set, run.train, model)
        reports = training.evaluate(result.params, eval_set, model)
        rows[setting] = losses.aggregate(reports)
        per_image += [r.to_json(id=s.id, setting=setting) for s, r in zip(eval_set, reports)]
    table = write_report(rows, per_image, args.out)
    if args.out:
        cfgmod.save(run, Path(args.out).with_suffix(".cfg"))
    print(table)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cmmlp", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default="WARNING", help="logging level (default WARNING)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def overrides(p):
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="config override, e.g. train.epochs=10 (repeatable)")

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--spec", help="JSON synth spec (as written to spec.json)")
    p.add_argument("--seed", type=int)
    p.add_argument("--count", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config")
    p.add_argument("--data", help="dataset root with images/ and masks/")
    p.add_argument("--out", required=True)
    overrides(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--config", help=f"defaults to {CONFIG_NAME} next to the checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="report table path; per-image records go to the .jsonl sibling")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--oracle", action="store_true", help="score the ground-truth masks themselves")
    overrides(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict a mask for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="probability PNG; the overlay goes to *_overlay.png")
    overrides(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--scope", choices=checks.SCOPES, default="primitive")
    p.add_argument("--tolerance", type=float)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train and compare ablation settings")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--settings", required=True, help="comma-separated, e.g. full,w/o-ACRE")
    p.add_argument("--out")
    overrides(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"cmmlp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (data.DataError, CheckpointError, ShapeError, FileNotFoundError) as exc:
        print(f"cmmlp: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except training.NumericError as exc:
        print(f"cmmlp: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
