"""Command-line entry point: gen, train, sample, eval, oracle, degrade.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np

from .. import degrade as G
from .. import diffusion as D
from .. import geometry as geo
from .. import metrics as MT
from .. import model as M
from .. import numerics as nx
from . import oracles, plots
from .config import ConfigError, RunConfig, write_atomic
from .train import NumericalFailure, load_model, scene_dirs, schedule_of, train


EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class UsageError(Exception):
    pass


class ConfigMismatch(ValueError):
    """A checkpoint was trained under different model or schedule keys."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _bool(s: str) -> bool:
    v = s.lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}")


def _config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run configuration (override --config)")
    for f in fields(RunConfig):
        if f.name in ("seed", "out"):
            continue
        base = f.type.split(" | ")[0] if isinstance(f.type, str) else f.type
        conv = {"int": int, "float": float, "bool": _bool, "str": str}.get(base, str)
        g.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=conv,
                       default=argparse.SUPPRESS, metavar=base.upper())


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    p.add_argument("--config", type=Path, help="flat JSON run configuration")
    p.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    _config_flags(p)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pcdiff", description="Conditioned point-cloud diffusion toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen", help="synthesize scenes and degraded pairs")
    _common(s)

    s = sub.add_parser("train", help="train the noise predictor")
    _common(s)
    s.add_argument("--resume", action="store_true", help="continue from <out>/last.ckpt")

    s = sub.add_parser("sample", help="run the reverse process for each pair")
    _common(s)
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--pair", type=Path, action="append", default=[],
                   help="pair directory (repeatable); defaults to every scene in --dataset")
    s.add_argument("--ablate", action="append", default=[], choices=M.ABLATIONS)

    s = sub.add_parser("eval", help="score predictions against targets")
    _common(s)
    s.add_argument("--pred", type=Path, required=True)
    s.add_argument("--gt", type=Path, required=True)
    s.add_argument("--pred-name", default="output.ply")
    s.add_argument("--gt-name", default="target.ply")
    s.add_argument("--alpha", type=float, default=40.0)
    s.add_argument("--tau", type=float, default=None, help="F1 threshold (default 1%% of gt radius)")
    s.add_argument("--resample-n", type=int, default=2048)
    s.add_argument("--colors", action="store_true", help="also report colour MSE")

    s = sub.add_parser("oracle", help="run reference checks")
    _common(s)
    s.add_argument("--suite", action="append", choices=oracles.SUITES, default=[])
    s.add_argument("--inject-bug", action="store_true",
                   help="negative control: corrupt one backward rule")

    s = sub.add_parser("degrade", help="apply a degradation to an existing target")
    _common(s)
    s.add_argument("--input", type=Path, required=True,
                   help="directory with target.ply, image.ppm and camera.json")
    return p


def resolve_config(args: argparse.Namespace, base: RunConfig | None = None) -> RunConfig:
    doc = (base or RunConfig()).to_dict()
    if args.config is not None:
        if not args.config.exists():
            raise UsageError(f"config file {args.config} does not exist")
        doc.update(RunConfig.load(args.config).to_dict())
    names = {f.name for f in fields(RunConfig)}
    doc.update({k: v for k, v in vars(args).items() if k in names})
    return RunConfig.from_dict(doc)


# gen


def _gen_one(job):
    cfg_doc, i = job
    cfg = RunConfig.from_dict(cfg_doc)
    kinds = cfg.kinds()
    kind = kinds[i % len(kinds)]
    scene_seed = int(nx.RngStreams(cfg.seed).fresh(f"scene/{i}").integers(2**31))
    cloud, image, camera = G.synth_scene(kind, cfg.n_gt, seed=scene_seed, image_size=cfg.image_size)
    spec = cfg.degradation(scene_seed)
    d = Path(cfg.out) / f"scene_{i:04d}"
    G.write_pair(d, G.make_pair(cloud, image, camera, spec), spec, {"kind": kind})
    return d.name, G.tree_hash(d)


def workers() -> int:
    try:
        return max(1, int(os.environ.get("PF_THREADS", "1")))
    except ValueError:
        raise UsageError("PF_THREADS must be an integer") from None


def cmd_gen(cfg: RunConfig, args) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg.to_dict(), i) for i in range(cfg.scenes)]
    n = min(workers(), len(jobs))
    if n > 1:
        with ProcessPoolExecutor(n) as ex:
            hashes = dict(ex.map(_gen_one, jobs))
    else:
        hashes = dict(map(_gen_one, jobs))
    # the destination is left out so a dataset hashes the same wherever it is written
    doc = {k: v for k, v in cfg.to_dict().items() if k != "out"}
    digest = hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()
    manifest = {"config_hash": digest, "scenes": hashes, "task": cfg.task,
                "degradation": {k: v for k, v in cfg.degradation(0).to_dict().items() if k != "seed"}}
    write_atomic(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    write_atomic(out / "config.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(hashes)} pairs to {out}")
    return 0


# train


def cmd_train(cfg: RunConfig, args) -> int:
    if not cfg.dataset:
        raise UsageError("train needs --dataset")
    _, manifest = train(cfg, resume=args.resume)
    plots.loss_curve(manifest.epoch_losses, Path(cfg.out) / "loss_curve.png")
    print(f"trained {len(manifest.epoch_losses)} epochs; final loss {manifest.epoch_losses[-1]:.5f}")
    return 0


# sample


def n_out_for(cfg: RunConfig, pair: G.SamplePair) -> int:
    if cfg.n_out is not None and cfg.ratio is not None:
        raise UsageError("give either --n-out or --ratio, not both")
    if cfg.n_out is not None:
        n = cfg.n_out
    elif cfg.ratio is not None:
        n = int(round(cfg.ratio * pair.input_cloud.n))
    else:
        n = pair.target_cloud.n
    if n < 1:
        raise UsageError(f"output cardinality must be positive, got {n}")
    return n


def sample_pair(params, cfg: RunConfig, pair: G.SamplePair, seed_name: str,
                ablate: tuple[str, ...] = ()) -> geo.PointCloud:
    mcfg = cfg.model()
    ctx = M.Context.build(pair.input_cloud, pair.input_image, pair.camera, mcfg)
    fn = M.eps_function(params, mcfg, ctx, cfg.T, ablate)
    rng = nx.RngStreams(cfg.seed).fresh(f"sample/{seed_name}")
    x = D.sample(fn, n_out_for(cfg, pair), cfg.d, cfg.sampling_steps(), schedule_of(cfg), rng)
    out = ctx.denormalize(x)
    if cfg.d == 3 and pair.input_cloud.has_colors:
        # geometry-only model: carry input colours over by nearest input point
        idx, _ = MT.nearest(out.positions.astype(np.float64),
                            pair.input_cloud.positions.astype(np.float64))
        out = geo.PointCloud(out.positions, pair.input_cloud.features[idx])
    return out


def _checkpoint_config(path: Path) -> RunConfig | None:
    p = path.parent / "config.json"
    return RunConfig.load(p) if p.exists() else None


def cmd_sample(cfg: RunConfig, args) -> int:
    if not args.checkpoint.exists():
        raise FileNotFoundError(f"checkpoint {args.checkpoint} does not exist")
    trained = _checkpoint_config(args.checkpoint)
    if trained is not None:
        diff = cfg.model_mismatch(trained)
        if diff:
            raise ConfigMismatch("checkpoint was trained with a different configuration: " + ", ".join(
                f"{k} (checkpoint {getattr(trained, k)!r}, run {getattr(cfg, k)!r})" for k in diff))
    params = load_model(args.checkpoint, cfg)
    pairs = args.pair or (scene_dirs(cfg.dataset) if cfg.dataset else [])
    if not pairs:
        raise UsageError("sample needs --pair or --dataset")
    out = Path(cfg.out)
    for d in pairs:
        pair = G.read_pair(d)
        cloud = sample_pair(params, cfg, pair, d.name, tuple(args.ablate))
        (out / d.name).mkdir(parents=True, exist_ok=True)
        geo.write_ply(out / d.name / "output.ply", cloud)
        prov = {"seed": cfg.seed, "steps": cfg.sampling_steps(), "T": cfg.T, "n_out": cloud.n,
                "pair": d.name, "ablate": sorted(args.ablate),
                "checkpoint_sha256": hashlib.sha256(args.checkpoint.read_bytes()).hexdigest()}
        write_atomic(out / d.name / "provenance.json", json.dumps(prov, indent=2, sort_keys=True) + "\n")
        print(f"{d.name}: {cloud.n} points")
    return 0


# eval

METRIC_KEYS = ("cd", "dcd", "emd", "f1", "precision", "recall")


def evaluate_dirs(pred: Path, gt: Path, pred_name: str, gt_name: str, alpha: float,
                  tau: float | None, resample_n: int, colors: bool, seed: int = 0) -> dict:
    gt_scenes = sorted(p.parent.name for p in gt.glob(f"*/{gt_name}"))
    pred_scenes = sorted(p.parent.name for p in pred.glob(f"*/{pred_name}"))
    if not gt_scenes:
        raise FileNotFoundError(f"no */{gt_name} under {gt}")
    for name in gt_scenes:
        if name not in pred_scenes:
            raise FileNotFoundError(f"missing prediction {pred / name / pred_name}")
    for name in pred_scenes:
        if name not in gt_scenes:
            raise FileNotFoundError(f"missing target {gt / name / gt_name}")
    rows = []
    for name in gt_scenes:
        p = geo.read_ply(pred / name / pred_name)
        g = geo.read_ply(gt / name / gt_name)
        rep = MT.evaluate(p, g, alpha, tau, resample_n, seed, colors)
        rows.append({"pair": name} | rep.to_dict())
    keys = METRIC_KEYS + (("color_mse",) if colors else ())
    report = {k: float(np.mean([r[k] for r in rows])) for k in keys}
    report["std"] = {k: float(np.std([r[k] for r in rows])) for k in keys}
    report["params"] = {"alpha": alpha, "tau": tau if tau is not None else "0.01*gt_radius",
                        "resample_n": resample_n}
    report["pairs"] = rows
    return report


def cmd_eval(cfg: RunConfig, args) -> int:
    report = evaluate_dirs(args.pred, args.gt, args.pred_name, args.gt_name, args.alpha, args.tau,
                           args.resample_n, args.colors, cfg.seed)
    out = Path(cfg.out)
    write_atomic(out / "report.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    buf = io.StringIO()
    keys = ["pair", *METRIC_KEYS] + (["color_mse"] if args.colors else [])
    w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in report["pairs"]:
        w.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in r.items()})
    write_atomic(out / "metrics.csv", buf.getvalue())
    plots.metric_bars(report["pairs"], out / "metrics.png")
    first = report["pairs"][0]["pair"]
    plots.cloud_overlay(geo.read_ply(args.pred / first / args.pred_name).positions,
                        geo.read_ply(args.gt / first / args.gt_name).positions,
                        out / f"{first}.png", title=first)
    print(" ".join(f"{k}={report[k]:.5g}" for k in keys[1:]))
    return 0


# oracle


def cmd_oracle(cfg: RunConfig, args) -> int:
    results = oracles.run(args.suite or oracles.SUITES, cfg.seed, args.inject_bug)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.suite:<8} {r.name:<32} "
              f"measured={r.measured:.3e} tol={r.tolerance:.1e}  {r.detail}")
    if "out" in vars(args):
        write_atomic(Path(cfg.out) / "oracle.json",
                     json.dumps([r.to_dict() for r in results], indent=2) + "\n")
    return 0 if all(r.passed for r in results) else EXIT_NUMERIC


# degrade


def cmd_degrade(cfg: RunConfig, args) -> int:
    src = args.input
    target = geo.read_ply(src / "target.ply")
    image = G.read_ppm(src / "image.ppm")
    camera = geo.Camera.load(src / "camera.json")
    spec = cfg.degradation(cfg.seed)
    pair = G.make_pair(target, image, camera, spec)
    G.write_pair(cfg.out, pair, spec)
    print(f"{target.n} -> {pair.input_cloud.n} points in {cfg.out}")
    return 0


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "sample": cmd_sample, "eval": cmd_eval,
            "oracle": cmd_oracle, "degrade": cmd_degrade}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        base = None
        if args.command == "sample" and args.config is None and args.checkpoint.exists():
            base = _checkpoint_config(args.checkpoint)
        cfg = resolve_config(args, base)
        return COMMANDS[args.command](cfg, args)
    except (UsageError, ConfigError) as e:
        print(f"pcdiff {args.command}: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalFailure, FloatingPointError) as e:
        print(f"pcdiff {args.command}: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, KeyError) as e:
        print(f"pcdiff {args.command}: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
