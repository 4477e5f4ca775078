"""Model assembly and the training/evaluation loop.

A model is the chain detector-stub -> rendered clip -> temporal pooling ->
learned 3x3 adapter -> RoI actor vectors -> (variant-specific relation
operators) -> action head. Variants:

    baseline     actor vectors straight into the classifier (no context)
    first_order  actor-context encoding + classifier, no cross-actor op
    hr2o         + stacked non-local relation blocks (self-attention)
    avg / rn     alternative operator instantiations
    actor_first  attention between actors before context encoding
    acar         hr2o with cross-attention into an archived feature bank
    lfb          cross-attention into a bank of plain actor vectors
"""

from __future__ import annotations

import zlib
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .bank import KIND_ACFB, KIND_LFB, FeatureBank
from .checkpoint import load_tensors, save_tensors
from .head import ActionHead, ActionScores, bce_loss
from .layers import Conv2d
from .metrics import Detection, GroundTruth, evaluate_detections
from .optim import OptimizerConfig, Parameter, sgd_step
from .relation import (ActorFirstOperator, FirstOrderEncoder, HR2OConfig,
                       NonLocalStack, RelationPairOperator, average_relation)
from .roi import BoundingBox, actor_vectors, bilinear_matrix, temporal_pool
from .synth import (INTERACTION_CLASSES, POSE_CLASSES, SyntheticScene,
                    VideoSample, render_clip)
from .tensor import Tensor

VARIANTS = ("baseline", "first_order", "hr2o", "acar", "avg", "rn",
            "actor_first", "lfb")


@dataclass
class ModelConfig:
    variant: str = "hr2o"
    hr2o: HR2OConfig = field(default_factory=HR2OConfig)
    bank_w: int = 3
    detector_threshold: float = 0.85
    detector_noise: float = 0.0
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 0
    feature_h: int = 16
    feature_w: int = 16
    clip_len: int = 2
    feature_noise: float = 0.0
    pose_classes: int = POSE_CLASSES
    inter_classes: int = INTERACTION_CLASSES
    roi_out: int = 7
    roi_sampling: int = 2

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.bank_w < 0:
            raise ValueError("bank_w must be >= 0")
        if not 0.0 <= self.detector_threshold <= 1.0:
            raise ValueError("detector_threshold must be in [0, 1]")

    @property
    def uses_bank(self) -> bool:
        return self.variant in ("acar", "lfb")


def detector_stub(scene: SyntheticScene, rng: np.random.Generator | None = None,
                  noise: float = 0.0, threshold: float = 0.85,
                  training: bool = True) -> tuple[list[BoundingBox], list[int]]:
    """Ground-truth boxes with optional score noise. Training keeps every
    box; inference drops scores <= threshold."""
    boxes = []
    for actor in scene.actors:
        score = 1.0
        if noise > 0.0:
            if rng is None:
                raise ValueError("score noise needs an rng")
            score = float(np.clip(1.0 - abs(rng.normal(0.0, noise)), 0.0, 1.0))
        b = actor.box
        boxes.append(BoundingBox(b.x1, b.y1, b.x2, b.y2, score=score))
    kept = list(range(len(boxes))) if training else \
        [i for i, b in enumerate(boxes) if b.score > threshold]
    return boxes, kept


class ACARModel:
    """One variant of the action-localization network."""

    def __init__(self, cfg: ModelConfig, context_channels: int,
                 rng: np.random.Generator):
        self.cfg = cfg
        self.context_channels = context_channels
        c, d = context_channels, cfg.hr2o.d
        k, depth, drop = cfg.hr2o.kernel, cfg.hr2o.depth, cfg.hr2o.dropout_p
        self.adapter = Conv2d.identity(c, 3, rng, "adapter")
        self.encoder = None
        self.operator = None
        if cfg.variant in ("first_order", "hr2o", "avg", "rn", "acar", "lfb"):
            self.encoder = FirstOrderEncoder(c, c, d, rng, kernel=k, name="encoder")
        if cfg.variant == "hr2o":
            self.operator = NonLocalStack(d, depth, rng, kernel=k, dropout_p=drop,
                                          name="hr2o")
        elif cfg.variant == "acar":
            self.operator = NonLocalStack(d, depth, rng, kernel=k, dropout_p=drop,
                                          kv_channels=d, name="cross")
        elif cfg.variant == "lfb":
            self.operator = NonLocalStack(d, depth, rng, kernel=k, dropout_p=drop,
                                          kv_channels=c, name="cross")
        elif cfg.variant == "rn":
            self.operator = RelationPairOperator(c, c, d, rng, name="rn")
        elif cfg.variant == "actor_first":
            self.operator = ActorFirstOperator(c, c, d, rng, depth=depth, kernel=k,
                                               dropout_p=drop, name="actor_first")
        head_dim = c if cfg.variant == "baseline" else d
        self.head = ActionHead(head_dim, cfg.pose_classes, cfg.inter_classes, rng)
        self.fallbacks = 0   # bank windows that came back empty

    def parameters(self) -> list[Parameter]:
        params = self.adapter.parameters()
        if self.encoder is not None:
            params += self.encoder.parameters()
        if self.operator is not None:
            params += self.operator.parameters()
        return params + self.head.parameters()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((p.name, p.data.copy()) for p in self.parameters())

    def load_state_dict(self, state: dict, strict: bool = True) -> None:
        for p in self.parameters():
            if p.name in state:
                if state[p.name].shape != p.data.shape:
                    raise ValueError(f"shape mismatch for {p.name}")
                p.data[...] = state[p.name]
            elif strict:
                raise KeyError(f"missing parameter {p.name}")

    # -- forward ----------------------------------------------------------

    def context_map(self, clips: Tensor) -> Tensor:
        return self.adapter(temporal_pool(clips))

    def forward_batch(self, clips: np.ndarray, mats: np.ndarray,
                      kv: np.ndarray | None = None, training: bool = False,
                      rng: np.random.Generator | None = None,
                      ) -> tuple[Tensor, Tensor, list[np.ndarray]]:
        """clips [B,T,C,H,W] + RoI matrices [B,N,out^2,H*W] (+ stacked bank
        windows [B,M,...]) -> pose probs [B,N,P], interaction probs [B,N,I],
        and per-block attention arrays."""
        cfg = self.cfg
        x = self.context_map(Tensor(clips))
        acts = actor_vectors(x, mats, out=cfg.roi_out)
        atts: list[np.ndarray] = []

        if cfg.variant == "baseline":
            pose, inter = self.head.classify_vectors(acts)
            return pose, inter, atts

        if cfg.variant == "actor_first":
            maps, atts = self.operator(acts, x, training=training, rng=rng)
            pose, inter = self.head.classify_maps(maps)
            return pose, inter, atts

        f = self.encoder(acts, x)
        if cfg.variant == "first_order":
            maps = f
        elif cfg.variant == "hr2o":
            maps, atts = self.operator(f, training=training, rng=rng)
        elif cfg.variant == "avg":
            maps = average_relation(f)
        elif cfg.variant == "rn":
            maps = self.operator(acts, x, f)
        else:                       # acar / lfb cross-attention
            if kv is None:
                # Empty window: fall back to self-attention over the
                # current clip's own features.
                self.fallbacks += 1
                kv_t = f if cfg.variant == "acar" else \
                    T.reshape(acts, acts.shape + (1, 1))
            else:
                kv_t = Tensor(kv if kv.ndim >= 4 else kv[..., None, None])
            maps, atts = self.operator(f, kv=kv_t, training=training, rng=rng)
        pose, inter = self.head.classify_maps(maps)
        return pose, inter, atts

    def forward_scene(self, clip: np.ndarray, boxes: list[BoundingBox],
                      bank: FeatureBank | None = None, video_id: str = "v0",
                      time_s: int = 0, training: bool = False,
                      rng: np.random.Generator | None = None,
                      ) -> tuple[list[ActionScores], list[np.ndarray]]:
        """Single-clip convenience wrapper returning per-actor scores."""
        cfg = self.cfg
        h, w = cfg.feature_h, cfg.feature_w
        mats = np.stack([bilinear_matrix(b, h, w, cfg.roi_out, cfg.roi_sampling)
                         for b in boxes])[None]
        kv = None
        if cfg.uses_bank and bank is not None:
            kv_arr = bank.stacked_window(video_id, time_s, cfg.bank_w)
            kv = kv_arr[None] if kv_arr is not None else None
        pose, inter, atts = self.forward_batch(clip[None], mats, kv=kv,
                                               training=training, rng=rng)
        scores = [ActionScores(pose_probs=pose.data[0, i].copy(),
                               interaction_probs=inter.data[0, i].copy())
                  for i in range(len(boxes))]
        return scores, [a[0] for a in atts]

    # -- bank support -------------------------------------------------------

    def archive_features(self, video: VideoSample, t: int, kind: str) -> list[np.ndarray]:
        """Frozen-forward features for the bank: first-order maps (acfb) or
        pooled actor vectors (lfb)."""
        cfg = self.cfg
        scene = video.scenes[t]
        if not scene.actors:
            return []
        object_types = self.context_channels - 4
        noise_rng = None
        if cfg.feature_noise > 0.0:
            key = zlib.crc32(f"{video.video_id}/{t}".encode()) ^ (cfg.seed & 0xFFFFFFFF)
            noise_rng = np.random.default_rng(key)
        clip = render_clip(video, object_types, cfg.feature_h, cfg.feature_w,
                           clip_len=cfg.clip_len, start=t,
                           noise=cfg.feature_noise, rng=noise_rng)
        boxes = [a.box for a in scene.actors]
        mats = np.stack([bilinear_matrix(b, cfg.feature_h, cfg.feature_w,
                                         cfg.roi_out, cfg.roi_sampling)
                         for b in boxes])[None]
        with T.no_grad():
            x = self.context_map(Tensor(clip[None]))
            acts = actor_vectors(x, mats, out=cfg.roi_out)
            if kind == KIND_LFB:
                return [acts.data[0, i].copy() for i in range(len(boxes))]
            if self.encoder is None:
                raise ValueError("this variant has no first-order encoder to archive")
            f = self.encoder(acts, x)
            return [f.data[0, i].copy() for i in range(len(boxes))]


# -- sample preparation -------------------------------------------------------


@dataclass
class PreparedSample:
    video_id: str
    time_s: int
    clip: np.ndarray                 # [T, C, H, W]
    boxes: list[BoundingBox]
    mats: np.ndarray                 # [N, out^2, H*W]
    pose_idx: np.ndarray             # [N]
    inter_bits: np.ndarray           # [N, I]
    window_m: int = 0                # bank entries in this sample's window


def prepare_samples(videos: list[VideoSample], cfg: ModelConfig,
                    object_types: int, detector_rng: np.random.Generator,
                    bank: FeatureBank | None = None) -> list[PreparedSample]:
    """Render key-frame clips, draw detector scores, precompute RoI
    matrices and collect label arrays."""
    samples = []
    for video in videos:
        if video.labels is None:
            raise ValueError(f"video {video.video_id} has no labeled key frame")
        scene = video.key_scene
        noise_rng = None
        if cfg.feature_noise > 0.0:
            key = zlib.crc32(f"{video.video_id}/{video.key_time}".encode())
            noise_rng = np.random.default_rng(key ^ (cfg.seed & 0xFFFFFFFF))
        clip = render_clip(video, object_types, cfg.feature_h, cfg.feature_w,
                           clip_len=cfg.clip_len, start=video.key_time,
                           noise=cfg.feature_noise, rng=noise_rng)
        boxes, _ = detector_stub(scene, rng=detector_rng, noise=cfg.detector_noise,
                                 threshold=cfg.detector_threshold, training=True)
        mats = np.stack([bilinear_matrix(b, cfg.feature_h, cfg.feature_w,
                                         cfg.roi_out, cfg.roi_sampling)
                         for b in boxes])
        pose_idx = np.array([lab.pose_class for lab in video.labels], dtype=np.int64)
        bits = np.stack([lab.interactions for lab in video.labels])
        window_m = 0
        if bank is not None:
            window_m = len(bank.retrieve_window(video.video_id, video.key_time,
                                                cfg.bank_w))
        samples.append(PreparedSample(video_id=video.video_id, time_s=video.key_time,
                                      clip=clip, boxes=boxes, mats=mats,
                                      pose_idx=pose_idx, inter_bits=bits,
                                      window_m=window_m))
    return samples


def _one_hot(idx: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros(idx.shape + (n,))
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


def _batch_arrays(samples: list[PreparedSample], actor_sel: list[list[int]],
                  bank: FeatureBank | None, cfg: ModelConfig):
    clips = np.stack([s.clip for s in samples])
    mats = np.stack([s.mats[sel] for s, sel in zip(samples, actor_sel)])
    pose = np.stack([s.pose_idx[sel] for s, sel in zip(samples, actor_sel)])
    bits = np.stack([s.inter_bits[sel] for s, sel in zip(samples, actor_sel)])
    kv = None
    if bank is not None and samples[0].window_m > 0:
        kv = np.stack([bank.stacked_window(s.video_id, s.time_s, cfg.bank_w)
                       for s in samples])
    return clips, mats, pose, bits, kv


# -- training -----------------------------------------------------------------


def metrics_line(epoch: int, split: str, loss: float, pose_acc: float,
                 inter_acc: float, map_value: float) -> str:
    return (f"{epoch}\t{split}\t{loss:.6f}\t{pose_acc:.6f}"
            f"\t{inter_acc:.6f}\t{map_value:.6f}")


class _Accumulator:
    """Pools probabilities/targets across batches for accuracy and mAP."""

    def __init__(self, num_pose: int):
        self.num_pose = num_pose
        self.pose_hits = 0
        self.inter_hits = 0
        self.actors = 0
        self.inter_bits = 0
        self.dets: list[Detection] = []
        self.gts: list[GroundTruth] = []

    def add_batch(self, samples, actor_sel, pose_probs, inter_probs, pose_idx, bits):
        self.pose_hits += int((pose_probs.argmax(-1) == pose_idx).sum())
        self.inter_hits += int(((inter_probs > 0.5) == (bits > 0.5)).sum())
        self.actors += pose_idx.size
        self.inter_bits += bits.size
        p = self.num_pose
        for si, (sample, sel) in enumerate(zip(samples, actor_sel)):
            frame = (sample.video_id, sample.time_s)
            for ai, actor in enumerate(sel):
                box = sample.boxes[actor]
                for c in range(pose_probs.shape[-1]):
                    self.dets.append(Detection(box=box, class_id=c,
                                               score=box.score * pose_probs[si, ai, c],
                                               frame=frame))
                for c in range(inter_probs.shape[-1]):
                    self.dets.append(Detection(box=box, class_id=p + c,
                                               score=box.score * inter_probs[si, ai, c],
                                               frame=frame))

    def add_ground_truth(self, samples):
        p = self.num_pose
        for sample in samples:
            frame = (sample.video_id, sample.time_s)
            for ai, box in enumerate(sample.boxes):
                self.gts.append(GroundTruth(box=box, class_id=int(sample.pose_idx[ai]),
                                            frame=frame))
                for c in range(sample.inter_bits.shape[-1]):
                    if sample.inter_bits[ai, c] > 0.5:
                        self.gts.append(GroundTruth(box=box, class_id=p + c, frame=frame))

    def result(self) -> dict:
        _, map_value = evaluate_detections(self.dets, self.gts) if self.gts else ({}, 0.0)
        return {
            "pose_acc": self.pose_hits / max(self.actors, 1),
            "inter_acc": self.inter_hits / max(self.inter_bits, 1),
            "map": map_value,
        }


def _grouped_batches(samples: list[PreparedSample], order: np.ndarray,
                     batch_size: int, inference: bool, threshold: float):
    """Deterministic batches of same-shape samples: grouped by (actor
    count, bank window size). Yields (sample list, per-sample actor ids)."""
    groups: dict[tuple[int, int], list[tuple[PreparedSample, list[int]]]] = {}
    group_order: list[tuple[int, int]] = []
    for idx in order:
        s = samples[idx]
        sel = [i for i, b in enumerate(s.boxes) if b.score > threshold] \
            if inference else list(range(len(s.boxes)))
        if not sel:
            continue
        key = (len(sel), s.window_m)
        if key not in groups:
            groups[key] = []
            group_order.append(key)
        groups[key].append((s, sel))
    for key in group_order:
        bucket = groups[key]
        for lo in range(0, len(bucket), batch_size):
            chunk = bucket[lo:lo + batch_size]
            yield [c[0] for c in chunk], [c[1] for c in chunk]


def evaluate_model(model: ACARModel, samples: list[PreparedSample],
                   bank: FeatureBank | None = None, batch_size: int = 64,
                   inference: bool = True) -> dict:
    """Inference-mode metrics: detector threshold applied, dropout off."""
    cfg = model.cfg
    acc = _Accumulator(cfg.pose_classes)
    acc.add_ground_truth(samples)
    losses, weights = [], []
    threshold = cfg.detector_threshold if inference else -1.0
    order = np.arange(len(samples))
    with T.no_grad():
        for batch, sel in _grouped_batches(samples, order, batch_size,
                                           inference, threshold):
            clips, mats, pose_idx, bits, kv = _batch_arrays(batch, sel, bank, cfg)
            pose, inter, _ = model.forward_batch(clips, mats, kv=kv, training=False)
            loss = bce_loss(pose, inter, _one_hot(pose_idx, cfg.pose_classes), bits)
            losses.append(loss.item())
            weights.append(len(batch))
            acc.add_batch(batch, sel, pose.data, inter.data, pose_idx, bits)
    out = acc.result()
    out["loss"] = float(np.average(losses, weights=weights)) if losses else 0.0
    return out


def train_model(cfg: ModelConfig, context_channels: int,
                train_samples: list[PreparedSample],
                val_samples: list[PreparedSample],
                epochs: int, batch_size: int,
                bank: FeatureBank | None = None,
                early_stop_acc: float | None = None,
                ) -> tuple[ACARModel, list[str], list[dict]]:
    """SGD training; returns the model, the metrics-log lines and the
    per-epoch validation history. Deterministic given cfg.seed."""
    if cfg.uses_bank and bank is None:
        raise ValueError(f"variant {cfg.variant} needs a feature bank")
    seq = np.random.SeedSequence(cfg.seed)
    init_rng, drop_rng, shuffle_rng = (np.random.default_rng(s) for s in seq.spawn(3))
    model = ACARModel(cfg, context_channels, init_rng)
    params = model.parameters()

    lines: list[str] = []
    history: list[dict] = []
    step = 0
    for epoch in range(epochs):
        order = shuffle_rng.permutation(len(train_samples))
        train_acc = _Accumulator(cfg.pose_classes)
        train_acc.add_ground_truth(train_samples)
        epoch_losses, epoch_weights = [], []
        for batch, sel in _grouped_batches(train_samples, order, batch_size,
                                           inference=False, threshold=-1.0):
            clips, mats, pose_idx, bits, kv = _batch_arrays(batch, sel, bank, cfg)
            pose, inter, _ = model.forward_batch(clips, mats, kv=kv, training=True,
                                                 rng=drop_rng)
            loss = bce_loss(pose, inter, _one_hot(pose_idx, cfg.pose_classes), bits)
            model.zero_grad()
            loss.backward()
            sgd_step(params, [p.grad for p in params], cfg.optimizer, step)
            step += 1
            epoch_losses.append(loss.item())
            epoch_weights.append(len(batch))
            train_acc.add_batch(batch, sel, pose.data, inter.data, pose_idx, bits)

        train_stats = train_acc.result()
        train_loss = float(np.average(epoch_losses, weights=epoch_weights))
        lines.append(metrics_line(epoch, "train", train_loss, train_stats["pose_acc"],
                                  train_stats["inter_acc"], train_stats["map"]))
        val_stats = evaluate_model(model, val_samples, bank=bank,
                                   batch_size=batch_size)
        lines.append(metrics_line(epoch, "val", val_stats["loss"],
                                  val_stats["pose_acc"], val_stats["inter_acc"],
                                  val_stats["map"]))
        history.append(val_stats)
        if early_stop_acc is not None and val_stats["inter_acc"] >= early_stop_acc:
            break
    return model, lines, history


# -- checkpoint meta ----------------------------------------------------------


def save_model(path, model: ACARModel) -> None:
    cfg = model.cfg
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    tensors["meta/variant"] = np.array([float(VARIANTS.index(cfg.variant))])
    tensors["meta/hr2o"] = np.array([cfg.hr2o.d, cfg.hr2o.depth, cfg.hr2o.dropout_p,
                                     cfg.hr2o.kernel], dtype=np.float64)
    tensors["meta/head"] = np.array([cfg.pose_classes, cfg.inter_classes], dtype=np.float64)
    tensors["meta/render"] = np.array([cfg.feature_h, cfg.feature_w, cfg.clip_len,
                                       cfg.feature_noise], dtype=np.float64)
    tensors["meta/channels"] = np.array([float(model.context_channels)])
    tensors["meta/detector"] = np.array([cfg.detector_threshold, cfg.detector_noise])
    tensors["meta/bank"] = np.array([float(cfg.bank_w)])
    tensors["meta/roi"] = np.array([cfg.roi_out, cfg.roi_sampling], dtype=np.float64)
    tensors["meta/seed"] = np.array([float(cfg.seed)])
    for name, arr in model.state_dict().items():
        tensors[f"param/{name}"] = arr
    save_tensors(path, tensors)


def load_model(path) -> ACARModel:
    tensors = load_tensors(path)
    variant = VARIANTS[int(tensors["meta/variant"][0])]
    d, depth, dropout_p, kernel = tensors["meta/hr2o"]
    pose_c, inter_c = tensors["meta/head"]
    h, w, clip_len, noise = tensors["meta/render"]
    thr, det_noise = tensors["meta/detector"]
    cfg = ModelConfig(
        variant=variant,
        hr2o=HR2OConfig(d=int(d), depth=int(depth), dropout_p=float(dropout_p),
                        kernel=int(kernel)),
        bank_w=int(tensors["meta/bank"][0]),
        detector_threshold=float(thr),
        detector_noise=float(det_noise),
        seed=int(tensors["meta/seed"][0]),
        feature_h=int(h), feature_w=int(w), clip_len=int(clip_len),
        feature_noise=float(noise),
        pose_classes=int(pose_c), inter_classes=int(inter_c),
        roi_out=int(tensors["meta/roi"][0]),
        roi_sampling=int(tensors["meta/roi"][1]),
    )
    model = ACARModel(cfg, int(tensors["meta/channels"][0]), np.random.default_rng(0))
    state = {name[len("param/"):]: arr for name, arr in tensors.items()
             if name.startswith("param/")}
    model.load_state_dict(state)
    return model
