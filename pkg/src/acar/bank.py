"""Actor-context feature bank: archived per-actor relation maps across
video time, plus the actor-vector-only variant kept for ablation.

Built in a second pass with a frozen pretrained model (no gradient ever
flows into archived features), then queried by time window at train and
inference time. Persisted in the checkpoint container with entry names
"bank/<video>/<time>/<actor>" and a tab-separated sidecar index.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import load_tensors, save_tensors

KIND_ACFB = "acfb"   # first-order relation maps [d, H, W]
KIND_LFB = "lfb"     # pooled actor vectors [C]

_KIND_CODES = {KIND_ACFB: 0.0, KIND_LFB: 1.0}


@dataclass
class FeatureBankEntry:
    video_id: str
    time_s: int
    actor_id: int
    feature: np.ndarray

    def __post_init__(self):
        if not np.isfinite(self.feature).all():
            raise ValueError("bank feature must be finite")


@dataclass
class FeatureBank:
    kind: str = KIND_ACFB
    window_w: int = 3
    entries: dict = field(default_factory=dict)   # (video_id, time_s) -> [entry...]

    def __post_init__(self):
        if self.kind not in (KIND_ACFB, KIND_LFB):
            raise ValueError(f"unknown bank kind {self.kind!r}")
        if self.window_w < 0:
            raise ValueError("window must be >= 0")

    def add(self, entry: FeatureBankEntry) -> None:
        self.entries.setdefault((entry.video_id, entry.time_s), []).append(entry)

    def times(self, video_id: str) -> list[int]:
        return sorted(t for v, t in self.entries if v == video_id)

    def retrieve_window(self, video_id: str, t: int, w: int | None = None,
                        ) -> list[FeatureBankEntry]:
        """All entries with time in [t-w, t+w], ordered by (time, actor).

        The window clips to the archived video span; an empty result is
        allowed and left to the caller.
        """
        w = self.window_w if w is None else w
        if w < 0:
            raise ValueError("window must be >= 0")
        hits = []
        for dt in range(t - w, t + w + 1):
            for entry in self.entries.get((video_id, dt), []):
                hits.append(entry)
        hits.sort(key=lambda e: (e.time_s, e.actor_id))
        return hits

    def stacked_window(self, video_id: str, t: int, w: int | None = None,
                       ) -> np.ndarray | None:
        """Window entries stacked on a leading axis, or None when empty."""
        hits = self.retrieve_window(video_id, t, w)
        if not hits:
            return None
        return np.stack([e.feature for e in hits], axis=0)

    def save(self, path) -> None:
        tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
        tensors["meta/kind"] = np.array([_KIND_CODES[self.kind]])
        tensors["meta/window"] = np.array([float(self.window_w)])
        index_lines = []
        for video_id, time_s in sorted(self.entries):
            for entry in sorted(self.entries[(video_id, time_s)], key=lambda e: e.actor_id):
                name = f"bank/{entry.video_id}/{entry.time_s}/{entry.actor_id}"
                tensors[name] = entry.feature
                index_lines.append(f"{entry.video_id}\t{entry.time_s}\t{entry.actor_id}\t{name}")
        save_tensors(path, tensors)
        with open(str(path) + ".index", "w", encoding="utf-8") as fh:
            fh.write("\n".join(index_lines) + ("\n" if index_lines else ""))

    @classmethod
    def load(cls, path) -> "FeatureBank":
        tensors = load_tensors(path)
        code = float(tensors.pop("meta/kind")[0])
        window = int(tensors.pop("meta/window")[0])
        kind = KIND_LFB if code == _KIND_CODES[KIND_LFB] else KIND_ACFB
        bank = cls(kind=kind, window_w=window)
        for name, arr in tensors.items():
            if not name.startswith("bank/"):
                raise ValueError(f"unexpected record {name!r} in bank file")
            _, video_id, time_s, actor_id = name.split("/")
            bank.add(FeatureBankEntry(video_id=video_id, time_s=int(time_s),
                                      actor_id=int(actor_id), feature=arr))
        return bank


def build_bank(model, videos, kind: str = KIND_ACFB, window_w: int = 3,
               stride_s: int = 1) -> FeatureBank:
    """Run the frozen model over every sampled clip of every video and
    archive per-actor features (one extraction pass per (video, time))."""
    if not videos:
        raise ValueError("cannot build a bank from an empty video list")
    bank = FeatureBank(kind=kind, window_w=window_w)
    for video in videos:
        for t in range(0, len(video.scenes), stride_s):
            feats = model.archive_features(video, t, kind)
            for actor_id, feat in enumerate(feats):
                bank.add(FeatureBankEntry(video_id=video.video_id, time_s=t,
                                          actor_id=actor_id, feature=feat))
    return bank
