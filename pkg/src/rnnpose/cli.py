"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .aebaseline import GroupingParams
from .assocrnn import AssociationRNN
from .evaluation import baseline_predict, compare, evaluate, render_heatmaps
from .oraclefeat import FeatureBundle, NoiseConfig, multiscale_average, synthesize_features, synthesize_multiscale
from .scenedata import SceneConfig, SceneError, generate_scenes, read_scenes, write_scenes
from .tensorio import FormatError
from .trainer import NumericError, TrainConfig, load_config, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("rnnpose")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_synthetic_spec(spec: str) -> tuple[SceneConfig, int, int]:
    """``synthetic:count=500,seed=7,n=1-4,overlap=0.3,J=5,m=32`` -> (config, count, seed)."""
    body = spec.split(":", 1)[1] if spec.startswith("synthetic:") else spec
    cfg, count, seed = SceneConfig(), 100, 0
    for item in filter(None, (s.strip() for s in body.split(","))):
        key, _, value = item.partition("=")
        if key == "count":
            count = int(value)
        elif key == "seed":
            seed = int(value)
        elif key == "n":
            lo, _, hi = value.partition("-")
            cfg = replace(cfg, n_range=(int(lo), int(hi or lo)))
        elif key == "overlap":
            cfg = replace(cfg, overlap_fraction=float(value))
        elif key == "J":
            cfg = replace(cfg, joint_count=int(value))
        elif key == "m":
            cfg = replace(cfg, map_size=int(value))
        elif key == "sep":
            cfg = replace(cfg, min_separation=float(value))
        else:
            raise UsageError(f"unknown synthetic spec key {key!r}")
    return cfg, count, seed


def load_scene_source(spec: str):
    if spec.startswith("synthetic:"):
        cfg, count, seed = parse_synthetic_spec(spec)
        return generate_scenes(seed, count, cfg), seed
    return read_scenes(spec), 0


def _bundles(scenes, model: AssociationRNN, seed: int, multiscale: bool) -> list[FeatureBundle]:
    cfg = model.config
    seeds = np.random.SeedSequence([seed, 1]).generate_state(max(len(scenes), 1), dtype=np.uint32)
    out = []
    for scene, s in zip(scenes, seeds):
        if multiscale:
            out.append(multiscale_average(synthesize_multiscale(scene, NoiseConfig(), int(s), stacks=cfg.stacks,
                                                                feature_channels=cfg.feature_channels)))
        else:
            out.append(synthesize_features(scene, NoiseConfig(), int(s), cfg.stacks, cfg.feature_channels))
    return out


def load_model(path: str) -> AssociationRNN:
    model = AssociationRNN.load(path)
    bad = [p.name for p in model.parameters() if not np.all(np.isfinite(p.data))]
    if bad:
        raise NumericError(f"{path}: non-finite weights in {', '.join(bad)}")
    return model


def cmd_train(args) -> int:
    config = load_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    result = train(config, args.out)
    for rec in result.epochs:
        print(f"epoch {rec['epoch']}: total {rec['mean_total']:.4f} val-count-acc {rec['val_count_accuracy']:.3f}")
    print(f"checkpoint: {result.checkpoint}")
    print(f"metrics: {result.metrics}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_model(args.checkpoint)
    scenes, seed = load_scene_source(args.scenes)
    bundles = _bundles(scenes, model, args.feature_seed if args.feature_seed is not None else seed, args.multiscale)
    report = evaluate(model, scenes, bundles, product_decode=args.product_decode, workers=args.workers)
    print(report.summary())
    for thr, ap in report.ap_by_threshold.items():
        print(f"  AP@{thr:.2f} {ap:.4f}")
    return EXIT_OK


def cmd_infer(args) -> int:
    model = load_model(args.checkpoint)
    bundle = FeatureBundle.load(args.features)
    preds = model.infer(bundle, cap=args.cap)
    print(f"persons: {len(preds)}")
    for i, p in enumerate(preds):
        print(f"person {i}: stop confidence {p.stop_confidence:.4f}")
        if args.render:
            render_heatmaps(p.maps, Path(args.render) / f"person{i:02d}")
    return EXIT_OK


def cmd_baseline(args) -> int:
    bundle = FeatureBundle.load(args.features)
    params = GroupingParams(nms_window=args.nms_window, embedding_threshold=args.embedding_threshold,
                            detection_threshold=args.detection_threshold)
    poses, count = baseline_predict(bundle, params)
    print(f"persons: {count}")
    for i, (person, score) in enumerate(poses):
        joints = " ".join(f"({j.x:g},{j.y:g})" if j.visible else "(-)" for j in person.joints)
        print(f"person {i}: score {score:.4f} joints {joints}")
    return EXIT_OK


def cmd_compare(args) -> int:
    model = load_model(args.checkpoint)
    scenes, seed = load_scene_source(args.scenes)
    bundles = _bundles(scenes, model, seed, False)
    result = compare(model, scenes, bundles, GroupingParams(embedding_threshold=args.embedding_threshold))
    text = result.format()
    Path(args.out).write_text(text)
    print(text.split("\n\n")[0])
    return EXIT_OK


def cmd_gen_scenes(args) -> int:
    if args.spec.startswith("synthetic:"):
        cfg, _, seed = parse_synthetic_spec(args.spec)
    else:
        tc = load_config(args.spec)
        cfg, seed = tc.scene, tc.seed
    if args.seed is not None:
        seed = args.seed
    scenes = generate_scenes(seed, args.count, cfg)
    write_scenes(args.out, scenes)
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return EXIT_OK


def cmd_gen_features(args) -> int:
    scenes = read_scenes(args.scenes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(args.seed).generate_state(max(len(scenes), 1), dtype=np.uint32)
    for i, (scene, s) in enumerate(zip(scenes, seeds)):
        synthesize_features(scene, NoiseConfig(), int(s), args.stacks, args.feature_channels).save(out / f"scene{i:05d}.bin")
    print(f"wrote {len(scenes)} bundles to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rnnpose", description="Recurrent person-by-person pose association.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train the association RNN")
    t.add_argument("--config", help="key = value config file (see README)")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", default="runs/train")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="AP and person-count accuracy of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--scenes", required=True, help="fixture path or synthetic:count=N,seed=S,n=LO-HI,overlap=F")
    e.add_argument("--multiscale", action="store_true", help="average confidence maps over scales 1, 0.75, 1.25")
    e.add_argument("--product-decode", action="store_true", help="argmax of prediction times aggregate confidence")
    e.add_argument("--feature-seed", type=int)
    e.add_argument("--workers", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="run the RNN on one feature bundle")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--features", required=True)
    i.add_argument("--render", help="directory for per-person PGM heatmaps")
    i.add_argument("--cap", type=int, default=20)
    i.set_defaults(func=cmd_infer)

    b = sub.add_parser("baseline", help="associative-embedding grouping on one feature bundle")
    b.add_argument("--features", required=True)
    b.add_argument("--embedding-threshold", type=float, default=0.5)
    b.add_argument("--nms-window", type=int, default=3)
    b.add_argument("--detection-threshold", type=float, default=0.1)
    b.set_defaults(func=cmd_baseline)

    c = sub.add_parser("compare", help="RNN vs baseline on identical features")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--scenes", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--embedding-threshold", type=float, default=0.5)
    c.set_defaults(func=cmd_compare)

    g = sub.add_parser("gen-scenes", help="write a synthetic scene fixture")
    g.add_argument("--spec", required=True, help="config file or synthetic:... spec")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_scenes)

    f = sub.add_parser("gen-features", help="write oracle feature bundles for a scene fixture")
    f.add_argument("--scenes", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--stacks", type=int, default=2)
    f.add_argument("--feature-channels", type=int, default=8)
    f.set_defaults(func=cmd_gen_features)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SceneError, FormatError, OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
