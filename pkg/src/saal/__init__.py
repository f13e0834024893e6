"""Self-auxiliary asymmetric multi-task learning on a small numpy autodiff core."""
from .datasets import MultiTaskDataset, SyntheticSpec, generate_planted_asymmetric, generate_symmetric_positive, load_csv
from .diffcore import Graph, backward, evaluate, numerical_gradient
from .errors import (ConfigError, ContractError, DegenerateGroupError, DimensionError, NumericError, ParseError,
                     SaalError, TrainingError)
from .metrics import ImprovementReport, relative_improvement
from .model import ArchitectureConfig, MtlModel, Route, TaskSpec, build_model, forward, predict_primary
from .relationships import RelationshipMatrix, enumerate_pairwise, gradient_angle, lookahead_loss, spearman
from .strategies import CoefficientSet, normalize, saal_enumeration, saal_weight_update
from .trainer import TrainerConfig, compare_batch_runtimes, measure_batch_runtime, train_run

__version__ = "0.1.0"
