"""Open-set recognition with angular-margin one-vs-rest losses and Jacobian-norm diagnostics."""
from .data import OsrDataset, gen_blobs, load_idx, split_known_unknown
from .embedding import EmbeddingNet, MlpConfig, OsrModel, PrototypeBank
from .losses import LossConfig, combined_loss
from .osr_eval import auc, detection_score, diagnose, jacobian_norm, jnd
from .runner import ExperimentConfig, parse_config, run_experiment
from .training import AugmentPolicy, TrainConfig, train

__version__ = "0.1.0"
