"""Action classifier and the mixed pose/interaction loss.

Pose classes are mutually exclusive (softmax), interaction classes are
independent (sigmoid); both feed a per-class binary cross-entropy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import Linear
from .optim import Parameter
from .tensor import Tensor

PROB_CLAMP = 1e-7


@dataclass
class ActionLabel:
    """One-hot pose over P classes plus a multi-hot interaction vector."""

    pose: np.ndarray
    interactions: np.ndarray

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64)
        self.interactions = np.asarray(self.interactions, dtype=np.float64)
        if self.pose.ndim != 1 or int(round(self.pose.sum())) != 1 or \
                not np.all((self.pose == 0) | (self.pose == 1)):
            raise ValueError("pose must be one-hot")
        if not np.all((self.interactions == 0) | (self.interactions == 1)):
            raise ValueError("interactions must be binary")

    @classmethod
    def from_indices(cls, pose_class: int, interaction_bits, num_pose: int) -> "ActionLabel":
        pose = np.zeros(num_pose)
        pose[pose_class] = 1.0
        return cls(pose=pose, interactions=np.asarray(interaction_bits, dtype=np.float64))

    @property
    def pose_class(self) -> int:
        return int(self.pose.argmax())


@dataclass
class ActionScores:
    pose_probs: np.ndarray
    interaction_probs: np.ndarray

    def __post_init__(self):
        if not np.allclose(self.pose_probs.sum(axis=-1), 1.0, atol=1e-9):
            raise ValueError("pose probabilities must sum to 1")


class ActionHead:
    """Global average pool over the map, one linear layer, softmax on the
    pose logit group and sigmoid on the interaction group."""

    def __init__(self, in_dim: int, num_pose: int, num_interactions: int,
                 rng: np.random.Generator, name: str = "head"):
        if num_pose < 1 or num_interactions < 0:
            raise ValueError("need >=1 pose class and >=0 interaction classes")
        self.num_pose = num_pose
        self.num_interactions = num_interactions
        self.fc = Linear(in_dim, num_pose + num_interactions, rng, f"{name}.fc")

    def _split(self, logits: Tensor) -> tuple[Tensor, Tensor]:
        p = self.num_pose
        pose = T.softmax(logits[..., :p], axis=logits.ndim - 1)
        inter = T.sigmoid(logits[..., p:])
        return pose, inter

    def logits_from_maps(self, maps: Tensor) -> Tensor:
        pooled = T.mean_over_axis(T.mean_over_axis(maps, maps.ndim - 1), maps.ndim - 2)
        return self.fc(pooled)

    def classify_maps(self, maps: Tensor) -> tuple[Tensor, Tensor]:
        """[.., N, d, H, W] -> pose probs [.., N, P] and interaction probs
        [.., N, I]."""
        return self._split(self.logits_from_maps(maps))

    def classify_vectors(self, vecs: Tensor) -> tuple[Tensor, Tensor]:
        return self._split(self.fc(vecs))

    def parameters(self) -> list[Parameter]:
        return self.fc.parameters()


def bce_loss(pose_probs: Tensor, inter_probs: Tensor,
             pose_targets: np.ndarray, inter_targets: np.ndarray) -> Tensor:
    """Per-class BCE on both groups, mean over classes, then actors, then
    any leading batch axis. Probabilities are clamped to
    [1e-7, 1 - 1e-7] for numerical safety."""
    pose_targets = np.asarray(pose_targets, dtype=np.float64)
    inter_targets = np.asarray(inter_targets, dtype=np.float64)
    if pose_probs.shape != pose_targets.shape or inter_probs.shape != inter_targets.shape:
        raise ValueError("label shape mismatch")

    def group_bce(probs: Tensor, targets: np.ndarray) -> Tensor:
        p = T.clip_values(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
        t = Tensor(targets)
        term = T.add(T.mul(t, T.log(p)), T.mul(1.0 - targets, T.log(T.sub(1.0, p))))
        return T.mean_over_axis(T.mul(term, -1.0), probs.ndim - 1)

    per_actor = group_bce(pose_probs, pose_targets)
    if inter_targets.shape[-1] > 0:
        per_actor = T.add(per_actor, group_bce(inter_probs, inter_targets))
    while per_actor.ndim > 0:
        per_actor = T.mean_over_axis(per_actor, per_actor.ndim - 1)
    return per_actor
