"""Actor-context-actor relation reasoning at desk scale.

A numpy-backed f64 autograd core, first-order actor-context encoding,
higher-order relation operators (non-local / relation-network / average),
an archived feature bank with cross-attention, a synthetic scene generator
whose interaction labels require second-order reasoning, and frame-mAP
evaluation with attention-map export.
"""

from .bank import KIND_ACFB, KIND_LFB, FeatureBank, FeatureBankEntry, build_bank
from .checkpoint import load_tensors, save_tensors
from .head import ActionHead, ActionLabel, ActionScores, bce_loss
from .metrics import (Detection, GroundTruth, average_precision,
                      evaluate_detections, export_attention, frame_map, iou)
from .optim import OptimizerConfig, Parameter, learning_rate, sgd_step
from .pipeline import (ACARModel, ModelConfig, detector_stub, evaluate_model,
                       load_model, prepare_samples, save_model, train_model)
from .relation import (ActorFirstOperator, AttentionTensor, FirstOrderEncoder,
                       HR2OConfig, NonLocalBlock, NonLocalStack,
                       RelationFeatureMap, RelationPairOperator,
                       average_relation)
from .roi import (ActorFeature, BoundingBox, extract_actor_features, roi_align,
                  temporal_pool)
from .synth import (LabelRule, SceneGenConfig, SyntheticScene, VideoSample,
                    generate, load_dataset, oracle_label, render_features,
                    save_dataset)
from .tensor import NonFiniteError, Tensor, grad_check, no_grad

__version__ = "0.1.0"
