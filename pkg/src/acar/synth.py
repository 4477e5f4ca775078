"""Synthetic scene generator with second-order labels.

Scenes are G x G grids of object types with N actors on distinct cells,
each carrying one attribute bit. Labels are built so that:

* the pose class of actor i depends only on (a_i, object at i's own cell)
  and is therefore first-order decodable;
* the interaction bit of actor i is XOR(a_j, object at j's cell == target)
  for j the nearest other actor -- a function of the partner's relation
  with the context, undecodable from actor i's own features alone.

Videos span `video_len` seconds of grids. Actor cells are blank except at
the cue time; with delay k > 0 the cue sits k seconds before the labeled
key frame, so the in-clip context carries no cue and only a feature bank
spanning the delay can recover it. A configurable fraction of videos keeps
the cue in-clip (delay 0) so relation operators without long-term support
retain a learnable component.

Dataset files are line-delimited text with a "#ACARSYN v1" header; one
scene per line, labels only on key frames ("-" otherwise).
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .head import ActionLabel
from .roi import BoundingBox

POSE_CLASSES = 4        # 2 * attribute + own-cell-matches-target
INTERACTION_CLASSES = 1

DATASET_HEADER = "#ACARSYN v1"


@dataclass
class SceneGenConfig:
    grid_size: int = 8
    object_types: int = 4
    actors: int = 3
    count: int = 100
    delay_k: int = 0
    noise: float = 0.0
    video_len: int | None = None
    inclip_fraction: float = 0.0
    target_type: int = 1
    # minimum gap (cell units) between each actor's nearest and
    # second-nearest partner distance; 0 disables the constraint
    nearest_margin: float = 0.0

    def __post_init__(self):
        if self.grid_size < 3:
            raise ValueError("grid_size must be >= 3")
        if self.object_types < 3:
            raise ValueError("need >= 3 object types (blank, target, decoy)")
        if not 0 < self.target_type < self.object_types:
            raise ValueError("target_type must be a non-blank object type")
        if self.actors < 1 or self.actors > self.grid_size ** 2:
            raise ValueError("bad actor count")
        if self.delay_k < 0:
            raise ValueError("delay_k must be >= 0")
        if not 0.0 <= self.inclip_fraction <= 1.0:
            raise ValueError("inclip_fraction must be in [0, 1]")
        if self.video_len is not None and self.video_len <= self.delay_k:
            raise ValueError("video_len must exceed delay_k")

    @property
    def resolved_video_len(self) -> int:
        if self.video_len is not None:
            return self.video_len
        return 1 if self.delay_k == 0 else 2 * self.delay_k

    @property
    def context_channels(self) -> int:
        # object one-hots + x/y coordinate channels + presence + attribute
        return self.object_types + 4


@dataclass
class LabelRule:
    target_type: int = 1
    delay_k: int = 0


@dataclass
class SceneActor:
    cell: int
    attr: int
    box: BoundingBox


@dataclass
class SyntheticScene:
    grid: np.ndarray           # [G, G] int object types
    actors: list[SceneActor]
    time_s: int = 0
    video_id: str = "v0"

    def __post_init__(self):
        cells = [a.cell for a in self.actors]
        if len(set(cells)) != len(cells):
            raise ValueError("actor positions must be distinct")


@dataclass
class VideoSample:
    video_id: str
    scenes: list[SyntheticScene]      # ordered by time_s = 0..L-1
    key_time: int
    labels: list[ActionLabel] | None  # per actor, at the key frame
    cue_time: int = 0

    @property
    def key_scene(self) -> SyntheticScene:
        return self.scenes[self.key_time]


def cell_box(cell: int, grid_size: int) -> BoundingBox:
    r, c = divmod(cell, grid_size)
    g = float(grid_size)
    return BoundingBox(x1=c / g, y1=r / g, x2=(c + 1) / g, y2=(r + 1) / g)


def nearest_partner(actors: list[SceneActor], i: int, grid_size: int) -> int | None:
    """Index of the other actor closest by cell-center distance; ties go to
    the lowest actor id."""
    if len(actors) < 2:
        return None
    ri, ci = divmod(actors[i].cell, grid_size)
    best, best_d = None, None
    for j, actor in enumerate(actors):
        if j == i:
            continue
        rj, cj = divmod(actor.cell, grid_size)
        d = (ri - rj) ** 2 + (ci - cj) ** 2
        if best_d is None or d < best_d:
            best, best_d = j, d
    return best


def oracle_label(scenes: list[SyntheticScene], key_time: int,
                 rule: LabelRule) -> list[ActionLabel]:
    """Brute-force evaluation of the label rule at the key frame.

    Pose: 2 * a_i + [object at i's cell == target] on the key grid.
    Interaction: XOR(a_j, [object at j's cell == target]) on the grid at
    key_time - delay_k, with j the nearest other actor (0 when alone).
    """
    if not 0 <= key_time < len(scenes):
        raise ValueError("key_time outside the video")
    cue_time = key_time - rule.delay_k
    if cue_time < 0:
        raise ValueError("cue time before the start of the video")
    key = scenes[key_time]
    cue = scenes[cue_time]
    g = key.grid.shape[0]
    labels = []
    for i, actor in enumerate(key.actors):
        own = int(key.grid[divmod(actor.cell, g)])
        pose = 2 * actor.attr + int(own == rule.target_type)
        j = nearest_partner(key.actors, i, g)
        if j is None:
            bit = 0
        else:
            partner = key.actors[j]
            match = int(cue.grid[divmod(partner.cell, g)]) == rule.target_type
            bit = partner.attr ^ int(match)
        labels.append(ActionLabel.from_indices(pose, [bit], POSE_CLASSES))
    return labels


def _decoy_type(rng: np.random.Generator, cfg: SceneGenConfig) -> int:
    choices = [t for t in range(1, cfg.object_types) if t != cfg.target_type]
    return int(choices[rng.integers(0, len(choices))])


def _margin_ok(cells: np.ndarray, g: int, margin: float) -> bool:
    if margin <= 0.0 or len(cells) < 3:
        return True
    pos = np.stack([cells // g, cells % g], axis=1).astype(float)
    for i in range(len(cells)):
        d = np.sqrt(((pos - pos[i]) ** 2).sum(axis=1))
        d[i] = np.inf
        ranked = np.sort(d)
        if ranked[1] - ranked[0] < margin:
            return False
    return True


def _sample_cells(rng: np.random.Generator, cfg: SceneGenConfig) -> np.ndarray:
    for _ in range(1000):
        cells = rng.choice(cfg.grid_size ** 2, size=cfg.actors, replace=False)
        if _margin_ok(cells, cfg.grid_size, cfg.nearest_margin):
            return cells
    raise ValueError("nearest_margin too strict for this grid/actor count")


def generate(seed: int, cfg: SceneGenConfig) -> list[VideoSample]:
    """Deterministic dataset of labeled videos; per-video rngs are derived
    as seed XOR index."""
    rule = LabelRule(target_type=cfg.target_type, delay_k=cfg.delay_k)
    length = cfg.resolved_video_len
    videos = []
    for v in range(cfg.count):
        rng = np.random.default_rng(seed ^ v)
        video_id = f"v{v:05d}"
        delay = cfg.delay_k
        if cfg.delay_k > 0 and rng.random() < cfg.inclip_fraction:
            delay = 0
        key_time = 0 if length == 1 else int(rng.integers(cfg.delay_k, length))
        cue_time = key_time - delay

        cells = _sample_cells(rng, cfg)
        attrs = rng.integers(0, 2, size=cfg.actors)
        actors = [SceneActor(cell=int(c), attr=int(a), box=cell_box(int(c), cfg.grid_size))
                  for c, a in zip(cells, attrs)]
        cues = [cfg.target_type if rng.random() < 0.5 else _decoy_type(rng, cfg)
                for _ in range(cfg.actors)]

        scenes = []
        for t in range(length):
            grid = rng.integers(0, cfg.object_types, size=(cfg.grid_size, cfg.grid_size))
            for a, cue_obj in zip(actors, cues):
                grid[divmod(a.cell, cfg.grid_size)] = cue_obj if t == cue_time else 0
            scenes.append(SyntheticScene(grid=grid.astype(np.int64), actors=actors,
                                         time_s=t, video_id=video_id))

        per_key_rule = LabelRule(target_type=cfg.target_type, delay_k=delay)
        labels = oracle_label(scenes, key_time, per_key_rule)
        videos.append(VideoSample(video_id=video_id, scenes=scenes, key_time=key_time,
                                  labels=labels, cue_time=cue_time))
    return videos


# -- feature rendering -----------------------------------------------------


def render_frame(scene: SyntheticScene, object_types: int, height: int,
                 width: int) -> np.ndarray:
    """One [C,H,W] frame: object one-hots upsampled to the pixel grid,
    normalized x/y coordinate channels, and presence/attribute channels
    filled only inside each actor's own box."""
    g = scene.grid.shape[0]
    c = object_types + 4
    frame = np.zeros((c, height, width), dtype=np.float64)
    row_cell = (np.arange(height) * g) // height
    col_cell = (np.arange(width) * g) // width
    cell_type = scene.grid[np.ix_(row_cell, col_cell)]
    for t in range(object_types):
        frame[t] = cell_type == t
    frame[object_types] = ((np.arange(width) + 0.5) / width)[None, :]
    frame[object_types + 1] = ((np.arange(height) + 0.5) / height)[:, None]
    for actor in scene.actors:
        r0 = int(np.floor(actor.box.y1 * height + 1e-9))
        r1 = int(np.ceil(actor.box.y2 * height - 1e-9))
        c0 = int(np.floor(actor.box.x1 * width + 1e-9))
        c1 = int(np.ceil(actor.box.x2 * width - 1e-9))
        frame[object_types + 2, r0:r1, c0:c1] = 1.0
        frame[object_types + 3, r0:r1, c0:c1] = float(actor.attr)
    return frame


def render_clip(video: VideoSample, object_types: int, height: int, width: int,
                clip_len: int = 2, start: int | None = None,
                noise: float = 0.0, rng: np.random.Generator | None = None,
                ) -> np.ndarray:
    """[T,C,H,W] clip beginning at `start` (default: the key frame); frames
    past the end of the video repeat the last one."""
    t0 = video.key_time if start is None else start
    frames = []
    for dt in range(clip_len):
        t = min(t0 + dt, len(video.scenes) - 1)
        frames.append(render_frame(video.scenes[t], object_types, height, width))
    clip = np.stack(frames, axis=0)
    if noise > 0.0:
        if rng is None:
            raise ValueError("feature noise needs an rng")
        clip = clip + rng.normal(0.0, noise, size=clip.shape)
    return clip


def render_features(scene: SyntheticScene, object_types: int, height: int,
                    width: int, clip_len: int = 2,
                    ) -> tuple[np.ndarray, list[BoundingBox], list[int]]:
    """Single-scene convenience: a clip of repeated frames plus the actor
    boxes and attribute bits."""
    frame = render_frame(scene, object_types, height, width)
    clip = np.repeat(frame[None], clip_len, axis=0)
    return clip, [a.box for a in scene.actors], [a.attr for a in scene.actors]


# -- dataset file I/O -------------------------------------------------------


def _format_labels(labels: list[ActionLabel] | None) -> str:
    if labels is None:
        return "-"
    parts = []
    for lab in labels:
        bits = "".join(str(int(b)) for b in lab.interactions)
        parts.append(f"{lab.pose_class},{bits}")
    return ";".join(parts)


def _parse_labels(text: str, num_pose: int) -> list[ActionLabel] | None:
    if text == "-":
        return None
    labels = []
    for part in text.split(";"):
        pose_s, bits = part.split(",")
        labels.append(ActionLabel.from_indices(int(pose_s), [int(ch) for ch in bits],
                                               num_pose))
    return labels


def save_dataset(path, videos: list[VideoSample], cfg: SceneGenConfig) -> None:
    buf = io.StringIO()
    buf.write(DATASET_HEADER + "\n")
    buf.write(f"#config grid={cfg.grid_size} types={cfg.object_types} "
              f"actors={cfg.actors} delay={cfg.delay_k} target={cfg.target_type} "
              f"video_len={cfg.resolved_video_len} pose_classes={POSE_CLASSES} "
              f"inter_classes={INTERACTION_CLASSES}\n")
    for video in videos:
        for scene in video.scenes:
            grid = " ".join(str(int(x)) for x in scene.grid.ravel())
            actors = ";".join(
                f"{a.cell},{a.attr},{a.box.x1!r},{a.box.y1!r},{a.box.x2!r},{a.box.y2!r}"
                for a in scene.actors)
            labels = _format_labels(video.labels if scene.time_s == video.key_time else None)
            buf.write(f"{video.video_id}\t{scene.time_s}\t{grid}\t{actors}\t{labels}\n")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(buf.getvalue())


class DatasetError(ValueError):
    pass


def load_dataset(path) -> tuple[list[VideoSample], dict]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != DATASET_HEADER:
        raise DatasetError(f"missing {DATASET_HEADER!r} header")
    meta: dict = {}
    rows = []
    for line in lines[1:]:
        if not line:
            continue
        if line.startswith("#config"):
            for kv in line[len("#config"):].split():
                k, v = kv.split("=")
                meta[k] = int(v)
            continue
        if line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 5:
            raise DatasetError(f"expected 5 tab-separated fields, got {len(fields)}")
        rows.append(fields)

    num_pose = meta.get("pose_classes", POSE_CLASSES)
    by_video: dict[str, list] = {}
    order: list[str] = []
    for video_id, time_s, grid_s, actors_s, labels_s in rows:
        if video_id not in by_video:
            by_video[video_id] = []
            order.append(video_id)
        by_video[video_id].append((int(time_s), grid_s, actors_s, labels_s))

    videos = []
    for video_id in order:
        entries = sorted(by_video[video_id], key=lambda e: e[0])
        scenes, key_time, labels = [], None, None
        for time_s, grid_s, actors_s, labels_s in entries:
            vals = np.array([int(x) for x in grid_s.split()], dtype=np.int64)
            g = int(round(np.sqrt(vals.size)))
            if g * g != vals.size:
                raise DatasetError("grid is not square")
            actors = []
            for spec in actors_s.split(";"):
                cell_s, attr_s, x1, y1, x2, y2 = spec.split(",")
                actors.append(SceneActor(
                    cell=int(cell_s), attr=int(attr_s),
                    box=BoundingBox(float(x1), float(y1), float(x2), float(y2))))
            scenes.append(SyntheticScene(grid=vals.reshape(g, g), actors=actors,
                                         time_s=time_s, video_id=video_id))
            parsed = _parse_labels(labels_s, num_pose)
            if parsed is not None:
                if key_time is not None:
                    raise DatasetError(f"multiple key frames in {video_id}")
                key_time, labels = time_s, parsed
        if key_time is None:
            raise DatasetError(f"no key frame in {video_id}")
        delay = meta.get("delay", 0)
        videos.append(VideoSample(video_id=video_id, scenes=scenes, key_time=key_time,
                                  labels=labels, cue_time=max(key_time - delay, 0)))
    return videos, meta
