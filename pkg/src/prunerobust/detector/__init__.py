from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .decode import decode_detections, nms
from .estimator import GridDetector, derive_seed, sgd_step
from .loss import GridTargets, LossResult, NumericFault, build_targets, detection_loss, smooth_l1
from .model import DetectorModel, GridOutput, InputShapeError

__all__ = [
    "CheckpointError", "load_checkpoint", "save_checkpoint",
    "DetectorModel", "GridDetector", "GridOutput", "GridTargets", "InputShapeError", "LossResult",
    "NumericFault", "build_targets", "decode_detections", "derive_seed", "detection_loss", "nms",
    "sgd_step", "smooth_l1",
]
