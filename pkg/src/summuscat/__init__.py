"""Two-step spatiotemporal meta-learning with a multi-scale CP-factor model.

General training learns shared parameters across stations under a graph
Laplacian penalty; each station then fine-tunes them on its own recent
history. Hot loops live in a compiled extension with a numpy fallback, see
:mod:`summuscat.kernels`.
"""

__version__ = "0.1.0"

from .errors import (DataFormatError, DatasetIOError, DivergenceError, NumericError, ParameterError, ShapeError,
                     SumError)
from .tensor import (CPFactors, DegenerateCPFactors, DenseTensor3, ParamSchema, ParamVector, cp_reconstruct,
                     cp_reconstruct_degenerate, devectorize, vectorize)
from .graph import StationSet, TaskGraph, build_graph, gaussian_adjacency, laplacian_trace, laplacian_trace_grad
from .models import LinearModel, Model, make_model
from .muscat import (MuscatHyper, MuscatModel, MuscatParams, baseline_joint_config, effective_scale_weights,
                     muscat_grad, muscat_loss, muscat_predict)
from .trainer import (GeneralTrainConfig, TaskSet, TaskTrainConfig, TrainReport, TrainState, inner_update,
                      outer_step, sample_time_index, train_general, train_task_specific)
from .data import (CokrigeSchedule, Dataset, SyntheticConfig, generate_synthetic, load_dataset,
                   make_cokrige_schedule, save_dataset, split_train_test)
from .evaluation import RunReport, TepResult, cokrige_sweep, detect_tep, export_task_usage, mae
from . import kernels

__all__ = [name for name in dir() if not name.startswith("_")]
