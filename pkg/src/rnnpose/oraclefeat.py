"""Synthetic stand-in for a trained detection backbone.

Given a ground-truth :class:`~rnnpose.scenedata.Scene` this produces what a
trained associative-embedding network would emit: noisy per-joint confidence
maps for several stacks, one scalar tag map per joint, and a few dense
intermediate feature channels.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from .diffcore import ContractError
from . import tensorio
from .scenedata import DEFAULT_SIGMA, Scene, gaussian_map

BUNDLE_MAGIC = b"RPFB"
BUNDLE_VERSION = 1

TAG_SPACING = 1.0
# strictly inside a quarter spacing, so tags of different persons differ by more than half a spacing
_JITTER_BOUND = TAG_SPACING / 4 * (1.0 - 1e-6)


@dataclass(frozen=True)
class NoiseConfig:
    peak_jitter: float = 0.25
    amplitude_noise: float = 0.3
    clutter_rate: float = 0.5
    embed_noise: float = 0.15
    clutter_amplitude: tuple[float, float] = (0.15, 0.6)

    def __post_init__(self):
        for name in ("peak_jitter", "amplitude_noise", "clutter_rate", "embed_noise"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


ZERO_NOISE = NoiseConfig(0.0, 0.0, 0.0, 0.0)


@dataclass
class FeatureBundle:
    confidence: np.ndarray  # [S, J, m, m]
    embeddings: np.ndarray  # [J, m, m]
    intermediate: np.ndarray  # [f, m, m]
    # (stack, joint, x, y, amplitude) of every spurious peak; not serialized
    clutter: list[tuple[int, int, float, float, float]] = field(default_factory=list, repr=False)

    def __post_init__(self):
        s, j, m, m2 = self.confidence.shape
        if m != m2 or s < 1:
            raise ValueError(f"bad confidence shape {self.confidence.shape}")
        if self.embeddings.shape != (j, m, m):
            raise ValueError(f"embeddings shape {self.embeddings.shape} != {(j, m, m)}")
        if self.intermediate.ndim != 3 or self.intermediate.shape[1:] != (m, m) or self.intermediate.shape[0] < 1:
            raise ValueError(f"bad intermediate shape {self.intermediate.shape}")

    @property
    def stacks(self) -> int:
        return self.confidence.shape[0]

    @property
    def joint_count(self) -> int:
        return self.confidence.shape[1]

    @property
    def map_size(self) -> int:
        return self.confidence.shape[2]

    @property
    def feature_channels(self) -> int:
        return self.intermediate.shape[0]

    def mean_confidence(self) -> np.ndarray:
        return self.confidence.mean(axis=0)

    def with_zeroed(self, confidence: bool = False, embeddings: bool = False) -> "FeatureBundle":
        return FeatureBundle(
            np.zeros_like(self.confidence) if confidence else self.confidence,
            np.zeros_like(self.embeddings) if embeddings else self.embeddings,
            self.intermediate,
        )

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        tensorio.write_header(buf, BUNDLE_MAGIC, BUNDLE_VERSION)
        tensorio.write_records(buf, {
            "confidence": self.confidence,
            "embeddings": self.embeddings,
            "intermediate": self.intermediate,
        })
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "FeatureBundle":
        src = io.BytesIO(data)
        tensorio.read_header(src, BUNDLE_MAGIC, (BUNDLE_VERSION,))
        rec = tensorio.read_records(src)
        try:
            return cls(rec["confidence"], rec["embeddings"], rec["intermediate"])
        except KeyError as exc:
            raise tensorio.FormatError(f"bundle missing record {exc}") from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "FeatureBundle":
        return cls.from_bytes(Path(path).read_bytes())


def synthesize_features(
    scene: Scene,
    noise: NoiseConfig = NoiseConfig(),
    rng_seed: int = 0,
    stacks: int = 2,
    feature_channels: int = 8,
    sigma: float = DEFAULT_SIGMA,
) -> FeatureBundle:
    """Emulate front-end outputs for ``scene``.

    Person ``k`` (1-based, scene order) is tagged ``k * TAG_SPACING`` plus a
    per-joint offset drawn from N(0, embed_noise) and clipped to just inside a
    quarter of the tag spacing, painted on its joint map within ``2 * sigma`` of the
    joint.
    """
    if stacks < 1 or feature_channels < 1:
        raise ValueError("stacks and feature_channels must be >= 1")
    rng = np.random.default_rng(rng_seed)
    m, jc = scene.map_size, scene.joint_count
    conf = np.zeros((stacks, jc, m, m))
    clutter: list[tuple[int, int, float, float, float]] = []
    for s in range(stacks):
        for j in range(jc):
            for person in scene.persons:
                joint = person.joints[j]
                if not joint.visible:
                    continue
                dx, dy = rng.normal(0.0, noise.peak_jitter, 2) if noise.peak_jitter > 0 else (0.0, 0.0)
                amp = rng.uniform(1.0 - noise.amplitude_noise, 1.0) if noise.amplitude_noise > 0 else 1.0
                np.maximum(conf[s, j], amp * gaussian_map(m, joint.x + dx, joint.y + dy, sigma), out=conf[s, j])
            count = rng.poisson(noise.clutter_rate) if noise.clutter_rate > 0 else 0
            for _ in range(count):
                cx, cy = rng.uniform(0, m - 1, 2)
                amp = rng.uniform(*noise.clutter_amplitude)
                np.maximum(conf[s, j], amp * gaussian_map(m, cx, cy, sigma), out=conf[s, j])
                clutter.append((s, j, float(cx), float(cy), float(amp)))
    np.clip(conf, 0.0, 1.0, out=conf)

    n = scene.n
    if noise.embed_noise > 0:
        emb = rng.uniform(0.0, (n + 1) * TAG_SPACING, (jc, m, m))
    else:
        emb = np.zeros((jc, m, m))
    yy, xx = np.mgrid[0:m, 0:m].astype(np.float64)
    radius = 2.0 * sigma
    for j in range(jc):
        best = np.full((m, m), np.inf)
        for k, person in enumerate(scene.persons):
            joint = person.joints[j]
            if not joint.visible:
                continue
            jitter = 0.0
            if noise.embed_noise > 0:
                jitter = float(np.clip(rng.normal(0.0, noise.embed_noise), -_JITTER_BOUND, _JITTER_BOUND))
            d = np.hypot(xx - joint.x, yy - joint.y)
            mask = (d <= radius) & (d < best)
            emb[j][mask] = (k + 1) * TAG_SPACING + jitter
            best = np.where(mask, d, best)

    n_coord = min(2, feature_channels)
    fields = []
    for _ in range(feature_channels - n_coord):
        f = gaussian_filter(rng.standard_normal((m, m)), 2.0, mode="wrap")
        fields.append(f / (f.std() + 1e-12))
    coords = [xx / max(m - 1, 1), yy / max(m - 1, 1)][:n_coord]
    inter = np.stack(fields + coords)
    return FeatureBundle(conf, emb, inter, clutter)


def _resample(maps: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resampling ``[..., m', m'] -> [..., size, size]`` preserving grid coordinates."""
    src = maps.shape[-1]
    if src == size:
        return maps.copy()
    f = src / size
    g = np.arange(size, dtype=np.float64) * f
    yy, xx = np.meshgrid(g, g, indexing="ij")
    flat = maps.reshape(-1, src, src)
    out = np.stack([map_coordinates(a, [yy, xx], order=1, mode="nearest") for a in flat])
    return out.reshape(maps.shape[:-2] + (size, size))


def synthesize_multiscale(
    scene: Scene,
    noise: NoiseConfig = NoiseConfig(),
    rng_seed: int = 0,
    scales: Sequence[float] = (1.0, 0.75, 1.25),
    stacks: int = 2,
    feature_channels: int = 8,
    sigma: float = DEFAULT_SIGMA,
) -> list[FeatureBundle]:
    """Bundles for ``scene`` rendered at each scale and resampled back to the unit grid.

    The first entry must be scale 1.0; it supplies embeddings and
    intermediate features to :func:`multiscale_average`.
    """
    if not scales or scales[0] != 1.0:
        raise ValueError("scales must start with the unit scale 1.0")
    seeds = np.random.SeedSequence(rng_seed).generate_state(len(scales), dtype=np.uint32)
    out = []
    for scale, seed in zip(scales, seeds):
        if scale == 1.0:
            out.append(synthesize_features(scene, noise, int(seed), stacks, feature_channels, sigma))
            continue
        scaled = scene.scaled(scale)
        b = synthesize_features(scaled, noise, int(seed), stacks, feature_channels, sigma * scaled.map_size / scene.map_size)
        m = scene.map_size
        out.append(FeatureBundle(
            np.clip(_resample(b.confidence, m), 0.0, 1.0), _resample(b.embeddings, m), _resample(b.intermediate, m)
        ))
    return out


def multiscale_average(bundles: Sequence[FeatureBundle]) -> FeatureBundle:
    """Mean confidence over bundles; tags and features from the first (unit-scale) bundle."""
    if not bundles:
        raise ContractError("multiscale_average: empty bundle list")
    shape = bundles[0].confidence.shape
    for b in bundles:
        if b.confidence.shape != shape:
            raise ContractError(f"multiscale_average: shape {b.confidence.shape} != {shape}")
    if len(bundles) == 1:
        return bundles[0]
    conf = np.mean([b.confidence for b in bundles], axis=0)
    return FeatureBundle(conf, bundles[0].embeddings, bundles[0].intermediate)
