"""Adam, the per-scene training step, and the seeded training loop."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Iterator, Sequence, get_args, get_origin, get_type_hints

import numpy as np

from . import diffcore as dc
from .assocrnn import AssociationRNN, RnnConfig
from .matchloss import LossBreakdown, assemble_loss
from .oraclefeat import FeatureBundle, NoiseConfig, synthesize_features
from .scenedata import DEFAULT_SIGMA, Scene, SceneConfig, generate_synthetic_scene, read_scenes, render_gt_heatmaps

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


@dataclass(frozen=True)
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    lr_schedule: tuple[tuple[int, float], ...] = ((0, 1e-4), (4, 1e-5))
    epochs: int = 5
    unroll_cap: int = 6
    batch_size: int = 1
    adam: AdamConfig = AdamConfig()
    seed: int = 0
    clip_norm: float = 5.0
    train_scenes: int = 2000
    val_scenes: int = 100
    scene_fixture: str = ""  # overrides synthetic scenes when set
    sigma: float = DEFAULT_SIGMA
    loss_reduction: str = "mean"
    zero_confidence: bool = False
    zero_embeddings: bool = False
    scene: SceneConfig = SceneConfig()
    noise: NoiseConfig = NoiseConfig()
    model: RnnConfig = RnnConfig()

    def __post_init__(self):
        sched = tuple((int(e), float(r)) for e, r in self.lr_schedule)
        object.__setattr__(self, "lr_schedule", sched)
        if not sched or sched[0][0] != 0:
            raise ValueError("lr_schedule must start at epoch 0")
        for (e0, r0), (e1, r1) in zip(sched, sched[1:]):
            if e1 <= e0 or r1 > r0:
                raise ValueError("lr_schedule epochs must increase and rates must not increase")
        if any(r <= 0 for _, r in sched):
            raise ValueError("learning rates must be positive")
        if self.batch_size != 1:
            raise ValueError("only batch_size 1 is supported")
        if self.loss_reduction not in ("mean", "sum"):
            raise ValueError("loss_reduction must be 'mean' or 'sum'")

    def lr_at(self, epoch: int) -> float:
        lr = self.lr_schedule[0][1]
        for start, rate in self.lr_schedule:
            if epoch >= start:
                lr = rate
        return lr


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int, lr: float,
              config: AdamConfig = AdamConfig()) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Bias-corrected Adam update; returns ``(param, m, v)`` as new arrays."""
    if t < 1:
        raise ValueError("Adam step index starts at 1")
    m = config.beta1 * m + (1.0 - config.beta1) * grad
    v = config.beta2 * v + (1.0 - config.beta2) * grad * grad
    m_hat = m / (1.0 - config.beta1**t)
    v_hat = v / (1.0 - config.beta2**t)
    return param - lr * m_hat / (np.sqrt(v_hat) + config.eps), m, v


class Adam:
    def __init__(self, params: Sequence[dc.Parameter], config: AdamConfig = AdamConfig()):
        self.params = [p for p in params if p.trainable]
        self.config = config
        self.state = AdamState()

    def step(self, lr: float) -> None:
        st = self.state
        st.t += 1
        for p in self.params:
            m = st.m.get(p.name, np.zeros_like(p.data))
            v = st.v.get(p.name, np.zeros_like(p.data))
            p.data, st.m[p.name], st.v[p.name] = adam_step(p.data, p.grad, m, v, st.t, lr, self.config)

    def zero_grad(self) -> None:
        dc.zero_grad(self.params)


def clip_gradients(params: Sequence[dc.Parameter], max_norm: float) -> float:
    """Scale gradients to global norm ``max_norm``; returns the norm before clipping."""
    norm = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            p.grad = p.grad * scale
    return norm


# ---------------------------------------------------------------------------
# training


def prepare_features(features: FeatureBundle, config: TrainConfig) -> FeatureBundle:
    if config.zero_confidence or config.zero_embeddings:
        return features.with_zeroed(config.zero_confidence, config.zero_embeddings)
    return features


def compute_loss(model: AssociationRNN, scene: Scene, features: FeatureBundle, config: TrainConfig,
                 rng: np.random.Generator) -> LossBreakdown:
    preds = model.unroll(features, "train", n_true=scene.n, cap=config.unroll_cap, rng=rng)
    for i, p in enumerate(preds):
        if not (np.all(np.isfinite(p.heatmaps.data)) and np.isfinite(p.stop.item())):
            raise NumericError(f"non-finite prediction at unroll step {i}")
    gt = render_gt_heatmaps(scene, config.sigma)
    return assemble_loss(gt, [p.heatmaps for p in preds], [p.stop for p in preds], config.loss_reduction)


def train_step(model: AssociationRNN, scene: Scene, features: FeatureBundle, optimizer: Adam, lr: float,
               config: TrainConfig, rng: np.random.Generator, tag: str = "") -> dict[str, float]:
    """One forward/backward/update on a single scene."""
    if scene.n < 1:
        raise ValueError("train_step needs a scene with at least one person")
    optimizer.zero_grad()
    try:
        losses = compute_loss(model, scene, features, config, rng)
    except (dc.ContractError, NumericError) as exc:
        raise NumericError(f"{tag}: {exc}") from exc
    total = losses.total.item()
    if not math.isfinite(total):
        raise NumericError(f"{tag}: non-finite loss {total} (joints {losses.joints.item()}, stop {losses.stop.item()})")
    dc.backward(losses.total)
    norm = clip_gradients(optimizer.params, config.clip_norm)
    if not math.isfinite(norm):
        raise NumericError(f"{tag}: non-finite gradient norm")
    optimizer.step(lr)
    return {
        "total": total,
        "joints": losses.joints.item(),
        "stop": losses.stop.item(),
        "n_hat": losses.n_hat,
        "grad_norm": norm,
        "clipped": bool(config.clip_norm > 0 and norm > config.clip_norm),
    }


def _seed_streams(seed: int):
    scene_ss, val_ss, noise_ss, order_ss, init_ss = np.random.SeedSequence(seed).spawn(5)
    return scene_ss, val_ss, noise_ss, order_ss, init_ss


def training_scenes(config: TrainConfig) -> tuple[list[Scene], list[Scene]]:
    """Training and held-out validation scenes for ``config``."""
    scene_ss, val_ss, *_ = _seed_streams(config.seed)
    if config.scene_fixture:
        scenes = [s for s in read_scenes(config.scene_fixture) if s.n >= 1]
        n_val = min(config.val_scenes, len(scenes) // 5)
        return scenes[n_val:], scenes[:n_val]
    tr = scene_ss.generate_state(config.train_scenes, dtype=np.uint32)
    va = val_ss.generate_state(config.val_scenes, dtype=np.uint32)
    return ([generate_synthetic_scene(int(s), config.scene) for s in tr],
            [generate_synthetic_scene(int(s), config.scene) for s in va])


def scene_features(scene: Scene, seed: int, config: TrainConfig) -> FeatureBundle:
    m = config.model
    return synthesize_features(scene, config.noise, seed, m.stacks, m.feature_channels, config.sigma)


def _feature_seeds(config: TrainConfig, epoch: int, count: int) -> np.ndarray:
    noise_ss = _seed_streams(config.seed)[2]
    return np.random.SeedSequence(noise_ss.entropy, spawn_key=noise_ss.spawn_key + (epoch,)).generate_state(count, dtype=np.uint32)


@dataclass
class TrainResult:
    checkpoint: Path
    metrics: Path
    epochs: list[dict]


def count_accuracy(model: AssociationRNN, scenes: Sequence[Scene], bundles: Sequence[FeatureBundle]) -> float:
    if not scenes:
        return float("nan")
    hits = sum(len(model.infer(b)) == s.n for s, b in zip(scenes, bundles))
    return hits / len(scenes)


def train(config: TrainConfig, out_dir: str | Path, model: AssociationRNN | None = None) -> TrainResult:
    """Train from scratch (or continue ``model``) writing per-epoch checkpoints and a metrics log."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    metrics_path = out / "metrics.jsonl"
    metrics_path.write_text("")
    scenes, val = training_scenes(config)
    if not scenes:
        raise ValueError("no training scenes")
    _, val_ss, _, order_ss, init_ss = _seed_streams(config.seed)
    if model is None:
        model = AssociationRNN(config.model, seed=int(init_ss.generate_state(1)[0]))
    opt = Adam(model.parameters(), config.adam)
    order_rng = np.random.default_rng(order_ss)
    unroll_rng = np.random.default_rng(init_ss.spawn(1)[0])
    val_seeds = np.random.SeedSequence(val_ss.entropy, spawn_key=val_ss.spawn_key + (0,)).generate_state(max(len(val), 1), dtype=np.uint32)
    val_bundles = [prepare_features(scene_features(s, int(q), config), config) for s, q in zip(val, val_seeds)]

    history = []
    step = 0
    ckpt = out / "final.ckpt"
    with metrics_path.open("a") as mlog:
        for epoch in range(config.epochs):
            lr = config.lr_at(epoch)
            order = order_rng.permutation(len(scenes))
            seeds = _feature_seeds(config, epoch, len(scenes))
            sums = {"total": 0.0, "joints": 0.0, "stop": 0.0}
            clipped = 0
            for idx in order:
                scene = scenes[idx]
                feats = prepare_features(scene_features(scene, int(seeds[idx]), config), config)
                rec = train_step(model, scene, feats, opt, lr, config, unroll_rng,
                                 tag=f"epoch {epoch} step {step} scene {idx} feature-seed {int(seeds[idx])}")
                step += 1
                clipped += rec["clipped"]
                for k in sums:
                    sums[k] += rec[k]
                mlog.write(json.dumps({"epoch": epoch, "step": step, "joints_loss": rec["joints"],
                                       "stop_loss": rec["stop"], "total": rec["total"], "lr": lr,
                                       "clipped": rec["clipped"]}) + "\n")
            acc = count_accuracy(model, val, val_bundles)
            summary = {"kind": "epoch", "epoch": epoch, "lr": lr, "clipped_steps": clipped,
                       "val_count_accuracy": acc, **{f"mean_{k}": v / len(scenes) for k, v in sums.items()}}
            mlog.write(json.dumps(summary) + "\n")
            mlog.flush()
            history.append(summary)
            log.info("epoch %d: %s", epoch, summary)
            model.save(out / f"epoch{epoch}.ckpt")
    model.save(ckpt)
    return TrainResult(ckpt, metrics_path, history)


# ---------------------------------------------------------------------------
# flat key=value config files


def _coerce(tp, raw: str):
    origin = get_origin(tp)
    if tp is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if tp in (int, float, str):
        return tp(raw)
    if origin is tuple:
        args = get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis and get_origin(args[0]) is tuple:
            # lr_schedule style: "0:1e-4, 4:1e-5"
            inner = get_args(args[0])
            pairs = []
            for item in raw.split(","):
                a, b = item.split(":")
                pairs.append((inner[0](a.strip()), inner[1](b.strip())))
            return tuple(pairs)
        parts = [p.strip() for p in raw.split(",")]
        if len(parts) != len(args):
            raise ValueError(f"expected {len(args)} comma-separated values, got {raw!r}")
        return tuple(_coerce(a, p) for a, p in zip(args, parts))
    raise ValueError(f"unsupported field type {tp}")


def _apply(obj, items: dict[str, str], prefix: str = ""):
    hints = get_type_hints(type(obj))
    changes = {}
    for f in fields(obj):
        key = prefix + f.name
        tp = hints[f.name]
        value = getattr(obj, f.name)
        if is_dataclass(value):
            sub = {k: v for k, v in items.items() if k.startswith(key + ".")}
            if sub:
                changes[f.name] = _apply(value, sub, key + ".")
        elif key in items:
            changes[f.name] = _coerce(tp, items[key])
    return replace(obj, **changes) if changes else obj


def _known_keys(obj, prefix: str = "") -> set[str]:
    keys = set()
    for f in fields(obj):
        value = getattr(obj, f.name)
        if is_dataclass(value):
            keys |= _known_keys(value, prefix + f.name + ".")
        else:
            keys.add(prefix + f.name)
    return keys


def parse_config(text: str, base: TrainConfig = TrainConfig()) -> TrainConfig:
    """Parse ``key = value`` lines (``#`` comments, dotted keys for nested sections)."""
    items: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        items[key] = value
    unknown = set(items) - _known_keys(base)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return _apply(base, items)


def format_config(config: TrainConfig) -> str:
    lines = []

    def emit(obj, prefix=""):
        for f in fields(obj):
            value = getattr(obj, f.name)
            key = prefix + f.name
            if is_dataclass(value):
                emit(value, key + ".")
            elif isinstance(value, tuple) and value and isinstance(value[0], tuple):
                lines.append(f"{key} = " + ", ".join(f"{a}:{b!r}" for a, b in value))
            elif isinstance(value, tuple):
                lines.append(f"{key} = " + ", ".join(repr(v) for v in value))
            else:
                lines.append(f"{key} = {value}")

    emit(config)
    return "\n".join(lines) + "\n"


def load_config(path: str | Path) -> TrainConfig:
    return parse_config(Path(path).read_text())


def iter_metrics(path: str | Path) -> Iterator[dict]:
    with Path(path).open() as fh:
        for line in fh:
            if line.strip():
                yield json.loads(line)
