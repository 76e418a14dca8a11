"""Open-world instance detection with background-erasing augmentation and decoupled training."""
from .annotations import (CategorySplit, Dataset, ImageSample, InstanceAnnotation, apply_split, load_coco,
                          rasterize_mask, to_class_agnostic)
from .backerase import BackEraseConfig, SynthesizedSample, gaussian_smooth, sample_background_patch, synthesize, \
    synthesize_external
from .detector import DetectorConfig, build_detector, ioa, iou
from .inference import Detection, InferenceConfig, class_agnostic_score, infer, nms
from .openworld_eval import EvalConfig, EvalReport, average_precision, average_recall, evaluate, match_greedy
from .trainer import Schedule, TrainMode, train, training_step

__version__ = "0.1.0"
