"""Decoding heatmaps to poses, OKS-based AP, baseline comparison, PGM output."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .aebaseline import GroupingParams, group_scene
from .assocrnn import AssociationRNN
from .oraclefeat import FeatureBundle
from .scenedata import DEFAULT_KAPPA, Joint, Person, Scene, object_scale, oks

TAU = 0.015
OKS_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)

Prediction = tuple[Person, float]


@dataclass
class DecodedPose:
    joints: np.ndarray  # [J, 4]: x, y, score, present

    @property
    def present(self) -> np.ndarray:
        return self.joints[:, 3] > 0

    @property
    def score(self) -> float:
        """Mean score of present joints (0 when none are present)."""
        mask = self.present
        return float(self.joints[mask, 2].mean()) if mask.any() else 0.0

    def to_person(self) -> Person:
        return Person(tuple(Joint(float(x), float(y), bool(p)) for x, y, _, p in self.joints))


def decode(pred: np.ndarray, aggregate: np.ndarray | None = None, tau: float = TAU) -> DecodedPose:
    """Argmax per joint map, optionally of ``pred * aggregate``; absent below ``tau``.

    The score is the value of ``pred`` itself at the chosen location.
    """
    if not 0 < tau < 1:
        raise ValueError("tau must lie in (0, 1)")
    pred = np.asarray(pred, dtype=np.float64)
    jc, h, w = pred.shape
    target = pred if aggregate is None else pred * np.asarray(aggregate, dtype=np.float64)
    flat = np.argmax(target.reshape(jc, -1), axis=1)
    ys, xs = np.divmod(flat, w)
    scores = pred[np.arange(jc), ys, xs]
    return DecodedPose(np.stack([xs, ys, scores, scores >= tau], axis=1).astype(np.float64))


@dataclass
class EvalReport:
    ap: float
    ap50: float
    ap_by_threshold: dict[float, float]
    person_count_accuracy: float
    mean_count_error: float  # mean |predicted - true|
    mean_signed_count_error: float = 0.0
    scenes: int = 0
    per_scene_counts: list[tuple[int, int]] = field(default_factory=list, repr=False)

    def summary(self) -> str:
        return (f"AP {self.ap:.4f}  AP50 {self.ap50:.4f}  count-acc {self.person_count_accuracy:.4f}  "
                f"count-MAE {self.mean_count_error:.4f}  count-bias {self.mean_signed_count_error:+.4f}  "
                f"scenes {self.scenes}")


def _match_scene(gts: Sequence[Person], preds: Sequence[Prediction], thr: float, kappa) -> list[tuple[float, bool]]:
    """Greedy COCO matching within one scene; returns (score, is_tp) per prediction."""
    order = sorted(range(len(preds)), key=lambda i: -preds[i][1])
    ious = np.array([[oks(preds[i][0], g, object_scale(g), kappa) for g in gts] for i in order]).reshape(len(order), len(gts))
    taken = np.zeros(len(gts), dtype=bool)
    out = []
    for row, i in enumerate(order):
        best, best_g = thr, -1
        for g in range(len(gts)):
            if not taken[g] and ious[row, g] >= best:
                best, best_g = ious[row, g], g
        if best_g >= 0:
            taken[best_g] = True
        out.append((preds[i][1], best_g >= 0))
    return out


def average_precision(results: Sequence[tuple[float, bool]], total_gt: int) -> float:
    """101-point interpolated AP from (score, is_tp) pairs pooled over scenes."""
    if total_gt == 0:
        return float("nan")
    if not results:
        return 0.0
    scores = np.array([s for s, _ in results])
    tps = np.array([t for _, t in results], dtype=np.float64)
    order = np.argsort(-scores, kind="mergesort")
    tp = np.cumsum(tps[order])
    fp = np.cumsum(1.0 - tps[order])
    recall = tp / total_gt
    precision = tp / (tp + fp)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(sampled.mean())


def evaluate_poses(scenes: Sequence[Scene], predictions: Sequence[Sequence[Prediction]],
                   counts: Sequence[int] | None = None, kappa=DEFAULT_KAPPA) -> EvalReport:
    """AP over OKS thresholds 0.50:0.05:0.95 plus person-count statistics.

    ``counts`` overrides the predicted person count per scene (defaults to the
    number of predictions).
    """
    if len(scenes) != len(predictions):
        raise ValueError("one prediction list per scene required")
    total_gt = sum(s.n for s in scenes)
    by_thr = {}
    for thr in OKS_THRESHOLDS:
        pooled: list[tuple[float, bool]] = []
        for scene, preds in zip(scenes, predictions):
            pooled.extend(_match_scene(scene.persons, preds, thr, kappa))
        by_thr[float(thr)] = average_precision(pooled, total_gt)
    counts = [len(p) for p in predictions] if counts is None else list(counts)
    diffs = np.array([c - s.n for c, s in zip(counts, scenes)], dtype=np.float64)
    return EvalReport(
        ap=float(np.mean(list(by_thr.values()))),
        ap50=by_thr[0.5],
        ap_by_threshold=by_thr,
        person_count_accuracy=float(np.mean(diffs == 0)) if len(diffs) else float("nan"),
        mean_count_error=float(np.mean(np.abs(diffs))) if len(diffs) else float("nan"),
        mean_signed_count_error=float(np.mean(diffs)) if len(diffs) else float("nan"),
        scenes=len(scenes),
        per_scene_counts=[(s.n, c) for s, c in zip(scenes, counts)],
    )


# ---------------------------------------------------------------------------
# predictors


def rnn_predict(model: AssociationRNN, bundle: FeatureBundle, product_decode: bool = False, tau: float = TAU,
                cap: int | None = None) -> tuple[list[Prediction], int]:
    """Decoded poses of one scene and the number of unrolled persons."""
    preds = model.infer(bundle, cap=cap)
    aggregate = bundle.mean_confidence() if product_decode else None
    poses = []
    for p in preds:
        d = decode(p.maps, aggregate, tau)
        if d.present.any():
            poses.append((d.to_person(), d.score))
    return poses, len(preds)


def baseline_predict(bundle: FeatureBundle, params: GroupingParams = GroupingParams(),
                     order: Sequence[int] | None = None) -> tuple[list[Prediction], int]:
    poses = group_scene(bundle.confidence, bundle.embeddings, params, order)
    return poses, len(poses)


def run_predictor(predict: Callable[[FeatureBundle], tuple[list[Prediction], int]],
                  bundles: Sequence[FeatureBundle], workers: int = 1) -> tuple[list[list[Prediction]], list[int]]:
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(predict, bundles))
    else:
        results = [predict(b) for b in bundles]
    return [r[0] for r in results], [r[1] for r in results]


def evaluate(model: AssociationRNN, scenes: Sequence[Scene], bundles: Sequence[FeatureBundle],
             product_decode: bool = False, tau: float = TAU, kappa=DEFAULT_KAPPA, workers: int = 1) -> EvalReport:
    preds, counts = run_predictor(lambda b: rnn_predict(model, b, product_decode, tau), bundles, workers)
    return evaluate_poses(scenes, preds, counts, kappa)


def evaluate_baseline(scenes: Sequence[Scene], bundles: Sequence[FeatureBundle],
                      params: GroupingParams = GroupingParams(), kappa=DEFAULT_KAPPA,
                      order: Sequence[int] | None = None) -> EvalReport:
    preds, counts = run_predictor(lambda b: baseline_predict(b, params, order), bundles)
    return evaluate_poses(scenes, preds, counts, kappa)


@dataclass
class Comparison:
    rnn: EvalReport
    baseline: EvalReport
    count_deltas: list[tuple[int, int, int]]  # (true n, rnn count, baseline count)

    def format(self) -> str:
        lines = ["pipeline  " + "AP      AP50    count-acc  count-MAE  count-bias",
                 *(f"{name:<9} {r.ap:.4f}  {r.ap50:.4f}  {r.person_count_accuracy:.4f}     "
                   f"{r.mean_count_error:.4f}     {r.mean_signed_count_error:+.4f}"
                   for name, r in (("rnn", self.rnn), ("baseline", self.baseline))),
                 "", "scene  n  rnn  baseline"]
        lines += [f"{i:5d}  {n}  {a:3d}  {b:8d}" for i, (n, a, b) in enumerate(self.count_deltas)]
        return "\n".join(lines) + "\n"


def compare(model: AssociationRNN, scenes: Sequence[Scene], bundles: Sequence[FeatureBundle],
            params: GroupingParams = GroupingParams(), product_decode: bool = False) -> Comparison:
    """Both pipelines on identical feature bundles."""
    rnn = evaluate(model, scenes, bundles, product_decode)
    base = evaluate_baseline(scenes, bundles, params)
    deltas = [(n, a, b) for (n, a), (_, b) in zip(rnn.per_scene_counts, base.per_scene_counts)]
    return Comparison(rnn, base, deltas)


# ---------------------------------------------------------------------------
# portable graymap output


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    """Binary PGM, values in [0, 1] mapped linearly to 0..255."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = np.rint(img * 255.0).astype(np.uint8)
    h, w = data.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while end < len(raw) and not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    # exactly one whitespace byte separates the header from pixel data
    data = np.frombuffer(raw[pos + 1:pos + 1 + w * h], dtype=np.uint8).reshape(h, w)
    return data.astype(np.float64) / maxval


def render_heatmaps(maps: np.ndarray, out_dir: str | Path, prefix: str = "joint") -> list[Path]:
    """One PGM per joint map plus a clipped sum composite."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for j, m in enumerate(np.asarray(maps)):
        p = out / f"{prefix}{j:02d}.pgm"
        write_pgm(p, m)
        paths.append(p)
    p = out / f"{prefix}_sum.pgm"
    write_pgm(p, np.asarray(maps).sum(axis=0))
    paths.append(p)
    return paths
