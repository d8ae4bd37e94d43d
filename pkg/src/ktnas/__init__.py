"""Knowledge tracing with multimodal fusion and cell architecture search."""
from .numcore import Adam, Tensor, backward
from .data import ColumnMap, InteractionRecord, parse_interactions
from .metrics import PredictionTrace, auc, mcnemar, r2, weighted_auc
from .search import SearchConfig, smbo_search

__version__ = "0.1.0"
