"""Ground-truth scenes: persons, Gaussian heatmaps, COCO parsing, synthesis, OKS.

Coordinates are in map-grid units with ``x`` the column and ``y`` the row, so a
joint at ``(x, y)`` peaks at ``maps[j, round(y), round(x)]``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

COCO_KEYPOINTS = (
    "nose", "left_eye", "right_eye", "left_ear", "right_ear",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
)

# Joint subsets for J < 17 are prefixes of this ordering; J=5 gives
# nose, shoulders and hips.
JOINT_PRIORITY = (0, 5, 6, 11, 12, 7, 8, 13, 14, 9, 10, 15, 16, 1, 2, 3, 4)

DEFAULT_SIGMA = 1.5
DEFAULT_KAPPA = 0.1

FIXTURE_MAGIC = "rnnpose-scenes"
FIXTURE_VERSION = 1


class SceneError(ValueError):
    """Invalid scene data or unsatisfiable generation request."""


class ParseError(SceneError):
    """Malformed annotation input; the message names the offending path."""


def joint_subset(joint_count: int) -> tuple[int, ...]:
    """COCO keypoint indices used for a model with ``joint_count`` joints."""
    if not 1 <= joint_count <= len(COCO_KEYPOINTS):
        raise SceneError(f"joint_count must be in [1, 17], got {joint_count}")
    if joint_count == len(COCO_KEYPOINTS):
        return tuple(range(len(COCO_KEYPOINTS)))
    return tuple(sorted(JOINT_PRIORITY[:joint_count]))


@dataclass(frozen=True)
class Joint:
    x: float
    y: float
    visible: bool = True


@dataclass(frozen=True)
class Person:
    joints: tuple[Joint, ...]

    def __post_init__(self):
        object.__setattr__(self, "joints", tuple(self.joints))

    @property
    def visible_count(self) -> int:
        return sum(j.visible for j in self.joints)

    def bbox(self) -> tuple[float, float, float, float]:
        """(x0, y0, x1, y1) over visible joints."""
        pts = [(j.x, j.y) for j in self.joints if j.visible]
        if not pts:
            raise SceneError("person has no visible joints")
        xs, ys = zip(*pts)
        return min(xs), min(ys), max(xs), max(ys)

    def as_array(self) -> np.ndarray:
        """``[J, 3]`` array of (x, y, visible)."""
        return np.array([(j.x, j.y, float(j.visible)) for j in self.joints], dtype=np.float64)


@dataclass(frozen=True)
class Scene:
    persons: tuple[Person, ...]
    map_size: int = 32
    joint_count: int = 5

    def __post_init__(self):
        object.__setattr__(self, "persons", tuple(self.persons))
        for k, p in enumerate(self.persons):
            if len(p.joints) != self.joint_count:
                raise SceneError(f"person {k} has {len(p.joints)} joints, expected {self.joint_count}")
            if p.visible_count == 0:
                raise SceneError(f"person {k} has no visible joints")
            for j in p.joints:
                if j.visible and not (0 <= j.x < self.map_size and 0 <= j.y < self.map_size):
                    raise SceneError(f"person {k}: joint ({j.x}, {j.y}) outside {self.map_size}x{self.map_size} grid")

    @property
    def n(self) -> int:
        return len(self.persons)

    def permuted(self, order: Sequence[int]) -> "Scene":
        return Scene(tuple(self.persons[i] for i in order), self.map_size, self.joint_count)

    def scaled(self, factor: float) -> "Scene":
        """Same scene on a ``round(m * factor)`` grid."""
        m = max(1, int(round(self.map_size * factor)))
        f = m / self.map_size
        persons = []
        for p in self.persons:
            joints = [Joint(min(j.x * f, m - 1.0), min(j.y * f, m - 1.0), j.visible) for j in p.joints]
            persons.append(Person(tuple(joints)))
        return Scene(tuple(persons), m, self.joint_count)


# ---------------------------------------------------------------------------
# heatmaps


def gaussian_map(m: int, x: float, y: float, sigma: float) -> np.ndarray:
    grid = np.arange(m, dtype=np.float64)
    gx = np.exp(-((grid - x) ** 2) / (2.0 * sigma * sigma))
    gy = np.exp(-((grid - y) ** 2) / (2.0 * sigma * sigma))
    return gy[:, None] * gx[None, :]


def person_heatmaps(person: Person, map_size: int, sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    if sigma <= 0:
        raise SceneError("sigma must be positive")
    maps = np.zeros((len(person.joints), map_size, map_size))
    for j, joint in enumerate(person.joints):
        if joint.visible:
            maps[j] = gaussian_map(map_size, joint.x, joint.y, sigma)
    return maps


def render_gt_heatmaps(scene: Scene, sigma: float = DEFAULT_SIGMA) -> list[np.ndarray]:
    """One ``[J, m, m]`` Gaussian stack per person, rendered independently."""
    return [person_heatmaps(p, scene.map_size, sigma) for p in scene.persons]


def render_aggregate_heatmaps(scene: Scene, sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """Per-joint pixelwise maximum over all persons' maps."""
    out = np.zeros((scene.joint_count, scene.map_size, scene.map_size))
    for maps in render_gt_heatmaps(scene, sigma):
        np.maximum(out, maps, out=out)
    return out


# ---------------------------------------------------------------------------
# OKS


def object_scale(person: Person, min_area: float = 1.0) -> float:
    """sqrt of the visible-joint bounding-box area, floored at ``min_area``."""
    x0, y0, x1, y1 = person.bbox()
    return math.sqrt(max((x1 - x0) * (y1 - y0), min_area))


def oks(pred: Person, gt: Person, scale: float, kappa: float | Sequence[float] = DEFAULT_KAPPA) -> float:
    """Object keypoint similarity; joints absent in ``pred`` score 0."""
    if scale <= 0:
        raise SceneError("scale must be positive")
    g = gt.as_array()
    p = pred.as_array()
    if g.shape != p.shape:
        raise SceneError(f"joint count mismatch: {p.shape[0]} vs {g.shape[0]}")
    vis = g[:, 2] > 0
    if not vis.any():
        raise SceneError("OKS undefined: ground truth has no visible joints")
    k = np.broadcast_to(np.asarray(kappa, dtype=np.float64), (g.shape[0],))
    d2 = (p[:, 0] - g[:, 0]) ** 2 + (p[:, 1] - g[:, 1]) ** 2
    sim = np.exp(-d2 / (2.0 * scale * scale * k * k))
    sim = np.where(p[:, 2] > 0, sim, 0.0)
    return float(sim[vis].mean())


# ---------------------------------------------------------------------------
# COCO keypoints


@dataclass
class CocoParseResult:
    scenes: list[Scene]
    image_ids: list[int]
    clamped: int = 0
    dropped_persons: int = 0


def _require(obj, key, path):
    if not isinstance(obj, dict) or key not in obj:
        raise ParseError(f"{path}: missing key {key!r}")
    return obj[key]


def parse_coco_keypoints(
    source: bytes | str | dict,
    map_size: int = 32,
    joint_count: int = 5,
    keypoints: Sequence[int] | None = None,
) -> CocoParseResult:
    """Build one :class:`Scene` per annotated image from COCO keypoint JSON.

    Pixel coordinates are scaled by ``map_size / max(width, height)``.  Joints
    with ``v > 0`` are visible; persons with no visible selected joint are
    dropped.  Out-of-grid coordinates are clamped and counted.
    """
    if isinstance(source, dict):
        doc = source
    else:
        try:
            doc = json.loads(source)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise ParseError(f"$: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ParseError("$: top level must be an object")
    selected = tuple(keypoints) if keypoints is not None else joint_subset(joint_count)
    if len(selected) != joint_count:
        raise ParseError(f"$: {len(selected)} keypoint indices given for joint_count={joint_count}")

    anns = _require(doc, "annotations", "$")
    if not isinstance(anns, list):
        raise ParseError("$.annotations: expected a list")
    sizes: dict[int, tuple[float, float]] = {}
    for i, img in enumerate(doc.get("images", [])):
        path = f"$.images[{i}]"
        try:
            sizes[int(_require(img, "id", path))] = (
                float(_require(img, "width", path)),
                float(_require(img, "height", path)),
            )
        except (TypeError, ValueError) as exc:
            raise ParseError(f"{path}: non-numeric field ({exc})") from exc

    persons_by_image: dict[int, list[Person]] = {}
    clamped = 0
    dropped = 0
    hi = np.nextafter(float(map_size), 0.0)
    for i, ann in enumerate(anns):
        path = f"$.annotations[{i}]"
        image_id = _require(ann, "image_id", path)
        kps = _require(ann, "keypoints", path)
        if not isinstance(kps, list) or len(kps) % 3 or len(kps) // 3 <= max(selected):
            raise ParseError(f"{path}.keypoints: expected flat [x, y, v] triples covering index {max(selected)}")
        try:
            image_id = int(image_id)
            triples = np.asarray(kps, dtype=np.float64).reshape(-1, 3)
        except (TypeError, ValueError) as exc:
            raise ParseError(f"{path}.keypoints: non-numeric entry ({exc})") from exc
        if image_id not in sizes:
            raise ParseError(f"$.images: no entry with id {image_id} (referenced by {path})")
        w, h = sizes[image_id]
        if w <= 0 or h <= 0:
            raise ParseError(f"$.images[id={image_id}]: non-positive size")
        s = map_size / max(w, h)
        joints = []
        for k in selected:
            x, y, v = triples[k]
            if v > 0:
                gx, gy = x * s, y * s
                cx, cy = min(max(gx, 0.0), hi), min(max(gy, 0.0), hi)
                if (cx, cy) != (gx, gy):
                    clamped += 1
                joints.append(Joint(float(cx), float(cy), True))
            else:
                joints.append(Joint(0.0, 0.0, False))
        person = Person(tuple(joints))
        persons_by_image.setdefault(image_id, [])
        if person.visible_count == 0:
            dropped += 1
            continue
        persons_by_image[image_id].append(person)

    scenes, ids = [], []
    for image_id in sorted(persons_by_image):
        persons = persons_by_image[image_id]
        if persons:
            scenes.append(Scene(tuple(persons), map_size, joint_count))
            ids.append(image_id)
    return CocoParseResult(scenes, ids, clamped, dropped)


def scenes_to_coco(scenes: Sequence[Scene], keypoints: Sequence[int] | None = None) -> dict:
    """Inverse of :func:`parse_coco_keypoints` with images sized to the grid."""
    out = {"images": [], "annotations": [], "categories": [{"id": 1, "name": "person", "keypoints": list(COCO_KEYPOINTS)}]}
    ann_id = 1
    for image_id, scene in enumerate(scenes, start=1):
        selected = tuple(keypoints) if keypoints is not None else joint_subset(scene.joint_count)
        out["images"].append({"id": image_id, "width": scene.map_size, "height": scene.map_size})
        for person in scene.persons:
            flat = [0.0] * (3 * len(COCO_KEYPOINTS))
            for k, joint in zip(selected, person.joints):
                if joint.visible:
                    flat[3 * k:3 * k + 3] = [joint.x, joint.y, 2]
            out["annotations"].append({"id": ann_id, "image_id": image_id, "category_id": 1, "keypoints": flat,
                                       "num_keypoints": person.visible_count})
            ann_id += 1
    return out


# ---------------------------------------------------------------------------
# line-oriented fixture format
#
#   rnnpose-scenes 1 <map_size> <joint_count>
#   scene <n>
#   x y v x y v ...        (one line per person, J triples)


def format_scenes(scenes: Sequence[Scene]) -> str:
    if not scenes:
        raise SceneError("cannot write an empty scene list")
    m, jc = scenes[0].map_size, scenes[0].joint_count
    lines = [f"{FIXTURE_MAGIC} {FIXTURE_VERSION} {m} {jc}"]
    for scene in scenes:
        if (scene.map_size, scene.joint_count) != (m, jc):
            raise SceneError("all scenes in a fixture must share map_size and joint_count")
        lines.append(f"scene {scene.n}")
        for p in scene.persons:
            lines.append(" ".join(f"{j.x!r} {j.y!r} {int(j.visible)}" for j in p.joints))
    return "\n".join(lines) + "\n"


def parse_scenes(text: str) -> list[Scene]:
    rows = [ln.strip() for ln in text.splitlines()]
    rows = [r for r in rows if r and not r.startswith("#")]
    if not rows:
        raise ParseError("fixture: empty input")
    head = rows[0].split()
    if len(head) != 4 or head[0] != FIXTURE_MAGIC:
        raise ParseError("fixture line 1: bad header")
    if int(head[1]) != FIXTURE_VERSION:
        raise ParseError(f"fixture line 1: unsupported version {head[1]}")
    m, jc = int(head[2]), int(head[3])
    scenes: list[Scene] = []
    i = 1
    while i < len(rows):
        parts = rows[i].split()
        if len(parts) != 2 or parts[0] != "scene":
            raise ParseError(f"fixture record {i}: expected 'scene <n>'")
        n = int(parts[1])
        persons = []
        for k in range(n):
            i += 1
            if i >= len(rows):
                raise ParseError(f"fixture record {i}: truncated scene")
            vals = rows[i].split()
            if len(vals) != 3 * jc:
                raise ParseError(f"fixture record {i}: expected {3 * jc} values, got {len(vals)}")
            joints = tuple(Joint(float(vals[3 * q]), float(vals[3 * q + 1]), vals[3 * q + 2] != "0") for q in range(jc))
            persons.append(Person(joints))
        scenes.append(Scene(tuple(persons), m, jc))
        i += 1
    return scenes


def write_scenes(path: str | Path, scenes: Sequence[Scene]) -> None:
    Path(path).write_text(format_scenes(scenes))


def read_scenes(path: str | Path) -> list[Scene]:
    return parse_scenes(Path(path).read_text())


# ---------------------------------------------------------------------------
# synthetic stick figures


@dataclass(frozen=True)
class SceneConfig:
    n_range: tuple[int, int] = (1, 4)
    joint_count: int = 5
    map_size: int = 32
    min_separation: float = 2.0
    overlap_fraction: float = 0.3
    height_range: tuple[float, float] = (0.4, 0.6)  # figure height as a fraction of map_size
    snap_to_grid: bool = True
    max_persons: int = 12
    retries: int = 400


def _rot(angle: float) -> np.ndarray:
    return np.array([math.sin(angle), -math.cos(angle)])


def _skeleton(rng: np.random.Generator, height: float) -> np.ndarray:
    """17 COCO joints of an upright figure with the pelvis at the origin."""
    lean = rng.uniform(-0.3, 0.3)
    up = _rot(lean)
    right = np.array([-up[1], up[0]])
    pts = np.zeros((17, 2))
    hip_w = rng.uniform(0.10, 0.14) * height
    sho_w = rng.uniform(0.16, 0.22) * height
    neck = up * 0.42 * height
    pts[11] = right * hip_w
    pts[12] = -right * hip_w
    pts[5] = neck + right * sho_w
    pts[6] = neck - right * sho_w
    nose = neck + _rot(lean + rng.uniform(-0.35, 0.35)) * 0.2 * height
    pts[0] = nose
    pts[1] = nose + up * 0.04 * height + right * 0.035 * height
    pts[2] = nose + up * 0.04 * height - right * 0.035 * height
    pts[3] = nose + right * 0.07 * height
    pts[4] = nose - right * 0.07 * height
    for sho, elb, wri, side in ((5, 7, 9, 1.0), (6, 8, 10, -1.0)):
        a1 = math.pi + side * rng.uniform(0.1, 1.4)
        a2 = a1 + side * rng.uniform(-0.6, 0.6)
        pts[elb] = pts[sho] + _rot(lean + a1) * 0.17 * height
        pts[wri] = pts[elb] + _rot(lean + a2) * 0.15 * height
    for hip, kne, ank, side in ((11, 13, 15, 1.0), (12, 14, 16, -1.0)):
        a1 = math.pi + side * rng.uniform(-0.1, 0.45)
        a2 = a1 + rng.uniform(-0.3, 0.3)
        pts[kne] = pts[hip] + _rot(lean + a1) * 0.25 * height
        pts[ank] = pts[kne] + _rot(lean + a2) * 0.25 * height
    if rng.random() < 0.5:
        # mirror: figure faces away
        pts[:, 0] = -pts[:, 0]
    return pts


def _boxes_intersect(a, b) -> bool:
    return a[0] <= b[2] and b[0] <= a[2] and a[1] <= b[3] and b[1] <= a[3]


def _box(pts: np.ndarray):
    return pts[:, 0].min(), pts[:, 1].min(), pts[:, 0].max(), pts[:, 1].max()


def generate_synthetic_scene(rng_seed: int, config: SceneConfig = SceneConfig()) -> Scene:
    """Deterministically sample a scene of stick figures.

    With probability ``overlap_fraction`` (and n >= 2) the first two sampled
    figures get intersecting bounding boxes; every other figure's box is
    disjoint from all others.  Joints of different persons are always at
    least ``min_separation`` apart.  Person order is shuffled at the end.
    """
    lo, hi = config.n_range
    if not 1 <= lo <= hi <= config.max_persons:
        raise SceneError(f"n_range {config.n_range} must lie within [1, {config.max_persons}]")
    rng = np.random.default_rng(rng_seed)
    m = config.map_size
    subset = list(joint_subset(config.joint_count))
    n = int(rng.integers(lo, hi + 1))
    overlap = n >= 2 and rng.random() < config.overlap_fraction
    margin = 1.0

    for _attempt in range(20):
        placed: list[np.ndarray] = []
        ok = True
        for k in range(n):
            for _ in range(config.retries):
                height = rng.uniform(*config.height_range) * m
                pts = _skeleton(rng, height)[subset]
                x0, y0, x1, y1 = _box(pts)
                if x1 - x0 > m - 2 * margin - 1 or y1 - y0 > m - 2 * margin - 1:
                    continue
                lo_off = np.array([margin - x0, margin - y0])
                hi_off = np.array([m - 1 - margin - x1, m - 1 - margin - y1])
                if overlap and k == 1:
                    # centre near the partner so the boxes can intersect
                    px0, py0, px1, py1 = _box(placed[0])
                    target = np.array([(px0 + px1) / 2, (py0 + py1) / 2])
                    spread = np.array([(px1 - px0 + x1 - x0) / 2, (py1 - py0 + y1 - y0) / 2])
                    off = target - np.array([(x0 + x1) / 2, (y0 + y1) / 2]) + rng.uniform(-spread, spread)
                    off = np.clip(off, lo_off, hi_off)
                else:
                    off = rng.uniform(lo_off, hi_off)
                cand = pts + off
                if config.snap_to_grid:
                    cand = np.round(cand)
                box = _box(cand)
                if any(np.min(np.linalg.norm(cand[:, None] - q[None], axis=2)) < config.min_separation for q in placed):
                    continue
                if overlap and k == 1:
                    if not _boxes_intersect(box, _box(placed[0])):
                        continue
                elif any(_boxes_intersect(box, _box(q)) for q in placed):
                    continue
                placed.append(cand)
                break
            else:
                ok = False
                break
        if ok:
            break
    else:
        raise SceneError(f"could not place {n} persons on a {m}x{m} grid (seed {rng_seed})")

    order = rng.permutation(n)
    persons = tuple(Person(tuple(Joint(float(x), float(y), True) for x, y in placed[i])) for i in order)
    return Scene(persons, m, config.joint_count)


def generate_scenes(seed: int, count: int, config: SceneConfig = SceneConfig()) -> list[Scene]:
    seeds = np.random.SeedSequence(seed).generate_state(count, dtype=np.uint32)
    return [generate_synthetic_scene(int(s), config) for s in seeds]
