"""Two-stage pedestrian detection: a zone gate followed by a sliding-window classifier."""

from .classifiers import (
    Classifier,
    build_pedestrian_classifier,
    build_zone_classifier,
    load_weights,
    save_weights,
)
from .data import AnnotatedFrame, CropSet, LabeledCrop, SynthConfig, load_dataset, save_dataset, synth_generate
from .detection import Detection, PipelineConfig, PipelineTrace, PotentialZone, detect, find, merge_cross_zone, nms, seek
from .errors import (
    ConfigError,
    DataError,
    DivergenceError,
    NumericError,
    SeekFindError,
    ShapeError,
    WeightsFormatError,
)
from .evaluation import EvalReport, match_and_score, stage_recall, stride_sweep, timing_breakdown
from .geometry import BoundingBox, iou
from .inception import InceptionBlock, InceptionConfig
from .training import LossCurve, TrainConfig, compare_activations, mine_hard_negatives, train

__version__ = "0.1.0"
