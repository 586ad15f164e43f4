"""Quality-guided joint training for mixed-quality face recognition."""

from .classification import ClassifierProxies, adaface_logits, adaface_margins, classification_loss, gst
from .config import TrainConfig, baseline, load_config
from .contrastive import ProxyQueue, compensate, contrastive_loss, enqueue, scm_mask
from .quality import QualityState, partition, quality_indicator, to_unit, update_stats
from .diagnostics import diagnose
from .toy import run_toy, toy_config, toy_data
from .train import TrainState, fit, train_step

__version__ = "0.1.0"

__all__ = [
    "ClassifierProxies", "adaface_logits", "adaface_margins", "classification_loss", "gst",
    "TrainConfig", "baseline", "load_config",
    "ProxyQueue", "compensate", "contrastive_loss", "enqueue", "scm_mask",
    "QualityState", "partition", "quality_indicator", "to_unit", "update_stats",
    "diagnose", "run_toy", "toy_config", "toy_data",
    "TrainState", "fit", "train_step",
]
