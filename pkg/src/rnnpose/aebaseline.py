"""Heuristic associative-embedding grouping (the post-processing the RNN replaces).

Pipeline: per-joint NMS and thresholding, then a greedy pass over joint types
that matches each type's detections to the running person groups by tag
distance with the Hungarian solver.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.ndimage import maximum_filter

from .matchloss import hungarian
from .scenedata import Joint, Person


@dataclass(frozen=True)
class JointCandidate:
    joint_type: int
    x: int
    y: int
    score: float
    embedding: float


@dataclass(frozen=True)
class GroupingParams:
    nms_window: int = 3
    detection_threshold: float = 0.1
    embedding_threshold: float = 0.5
    max_candidates_per_joint: int = 10

    def __post_init__(self):
        if self.nms_window < 1 or self.max_candidates_per_joint < 1:
            raise ValueError("nms_window and max_candidates_per_joint must be positive")
        if self.detection_threshold <= 0 or self.embedding_threshold <= 0:
            raise ValueError("thresholds must be positive")


@dataclass
class Group:
    joints: dict[int, JointCandidate] = field(default_factory=dict)

    @property
    def score(self) -> float:
        return sum(c.score for c in self.joints.values())

    @property
    def mean_embedding(self) -> float:
        return float(np.mean([c.embedding for c in self.joints.values()]))

    def to_person(self, joint_count: int) -> Person:
        joints = []
        for j in range(joint_count):
            c = self.joints.get(j)
            joints.append(Joint(float(c.x), float(c.y), True) if c else Joint(0.0, 0.0, False))
        return Person(tuple(joints))

    def pose_score(self) -> float:
        """Mean detection score of the grouped joints."""
        return self.score / len(self.joints)


def nms_candidates(confidence: np.ndarray, embeddings: np.ndarray, params: GroupingParams = GroupingParams()
                   ) -> list[list[JointCandidate]]:
    """Local maxima per joint map above the detection threshold, best first."""
    confidence = np.asarray(confidence, dtype=np.float64)
    if confidence.ndim == 4:
        confidence = confidence.mean(axis=0)
    out = []
    for j, heat in enumerate(confidence):
        peaks = maximum_filter(heat, size=params.nms_window, mode="constant", cval=-np.inf)
        ys, xs = np.nonzero((heat == peaks) & (heat >= params.detection_threshold))
        scores = heat[ys, xs]
        # stable sort: ties keep row-major order
        order = np.argsort(-scores, kind="stable")[: params.max_candidates_per_joint]
        out.append([JointCandidate(j, int(xs[i]), int(ys[i]), float(scores[i]), float(embeddings[j, ys[i], xs[i]]))
                    for i in order])
    return out


def greedy_group(candidates: Sequence[Sequence[JointCandidate]], params: GroupingParams = GroupingParams(),
                 order: Sequence[int] | None = None) -> list[Group]:
    """Assign candidates to groups one joint type at a time.

    Cost is ``|tag - group mean tag|``; matches above the embedding threshold
    are rejected and start new groups.  Exact cost ties go to the group with
    the higher cumulative score.
    """
    order = list(range(len(candidates))) if order is None else list(order)
    groups: list[Group] = []
    for j in order:
        cands = list(candidates[j])
        if not cands:
            continue
        if not groups:
            groups.extend(Group({j: c}) for c in cands)
            continue
        means = np.array([g.mean_embedding for g in groups])
        scores = np.array([g.score for g in groups])
        dist = np.abs(np.array([c.embedding for c in cands])[:, None] - means[None, :])
        # secondary key below any genuine cost difference
        eps = 1e-9 / (1.0 + scores.max())
        cost = dist - eps * scores[None, :]
        assignment = hungarian(cost)
        matched = set()
        fresh = []
        for r, g in assignment.pairs:
            if dist[r, g] <= params.embedding_threshold:
                groups[g].joints[j] = cands[r]
                matched.add(r)
        for r, c in enumerate(cands):
            if r not in matched:
                fresh.append(Group({j: c}))
        groups.extend(fresh)
    return groups


def group_scene(confidence: np.ndarray, embeddings: np.ndarray, params: GroupingParams = GroupingParams(),
                order: Sequence[int] | None = None) -> list[tuple[Person, float]]:
    """Poses with their scores, ready for evaluation."""
    cands = nms_candidates(confidence, embeddings, params)
    jc = len(cands)
    return [(g.to_person(jc), g.pose_score()) for g in greedy_group(cands, params, order)]
