"""Neural-network compression with L-C accuracy recovery and GP-guided sparsity search."""
from netcompress.datasets import Dataset, load_csv, load_dataset
from netcompress.exceptions import (CompressionError, ConfigError, NumericError, SchemeError,
                                    SearchError, ShapeError, ThinningError)
from netcompress.gp import GPRegressor, matern52
from netcompress.graph import plan_thinning, thin, trace_graph
from netcompress.lc import LCCompressor, LcConfig, direct_compression, lc_run
from netcompress.metrics import count_flops, memory_footprint, synthetic_curve
from netcompress.schemes import (BlockPrune, Compose, FilterPrune, NeuronPrune, Prune, Quantize,
                                 decompress, project)
from netcompress.search import TwoStageSearch, stage1_level_set, stage2_optimize
from netcompress.tensor_net import Model, TrainConfig, load_model, mlp, save_model, train

__version__ = "0.1.0"

__all__ = [
    "BlockPrune", "Compose", "CompressionError", "ConfigError", "Dataset", "FilterPrune", "GPRegressor",
    "LCCompressor", "LcConfig", "Model", "NeuronPrune", "NumericError", "Prune", "Quantize",
    "SchemeError", "SearchError", "ShapeError", "ThinningError", "TrainConfig", "TwoStageSearch",
    "count_flops", "decompress", "direct_compression", "lc_run", "load_csv", "load_dataset", "load_model", "matern52",
    "memory_footprint", "mlp", "plan_thinning", "project", "save_model", "stage1_level_set",
    "stage2_optimize", "synthetic_curve", "thin", "trace_graph", "train",
]
