"""Training-free sparsity allocation for small decoder-only transformers."""

from .engine import ActivationProfile, LayerId, capture_profile, forward_logits, normalize_profile
from .estimator import SparsityPruner
from .evaluation import perplexity, sweep
from .exceptions import StageError, StorageError, ValidationError
from .masking import SaliencyScores, SparsityMask, achieved_sparsity, score_magnitude, score_wanda, topk_mask
from .model_store import ModelBundle, ModelDims, TokenStream, generate_model, generate_tokens, read_model, write_model
from .neuronal import LambdaSet, neuron_alignment, run_neuronal, select_block_plan, select_row_plan
from .pipeline import prune
from .schedules import OwlConfig, SparsityPlan, linear_schedule, mean_correct, owl_schedule, uniform_schedule

__version__ = "0.1.0"
