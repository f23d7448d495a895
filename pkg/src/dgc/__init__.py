"""Generative multi-label image classifier on a small numpy autodiff engine."""

from .autodiff import Tape, Tensor, backward, grad_check
from .data import Manifest, SyntheticSpec, generate_synthetic, load_manifest, split_patient_level
from .metrics import auc, compare_report, roc_curve, roc_report
from .model import DETERMINISTIC, GENERATIVE, DgcModel, ModelConfig, forward_baseline, forward_eval, forward_train, init_model
from .trainer import evaluate, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
