"""Two weighted, inconsistency-reduced classifiers for partial domain adaptation."""
from .data import DomainDataset, DomainPair, PdaTaskSpec, gen_blobs, load_idx, make_blob_task, paired_batches
from .errors import ConfigError, ContractError, DataError, DimensionError, FormatError, NumericError
from .losses import cross_entropy, estimate_weights, inconsistency_loss, total_loss, weighted_cross_entropy
from .metrics import MetricsRecord, accuracy, divergence_proxy, export_features, weight_quality
from .nn import SGD, Adam, ClassifierPair, MlpClassifier, OptimizerConfig, forward_probs, init_pair
from .tensor import Tensor, argmax_rows, no_grad, softmax_rows
from .trainer import MethodVariant, TrainLog, TrainSchedule, run

__version__ = "0.1.0"
