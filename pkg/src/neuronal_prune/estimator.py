"""scikit-learn style front end.

``SparsityPruner.fit(model, calib)`` learns a mask; ``transform(model)``
returns the sparse model.  Hyperparameters follow the usual estimator
contract so ``get_params``/``set_params``/``clone`` work.
"""

from __future__ import annotations

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .engine import check_mask_shapes
from .evaluation import perplexity
from .exceptions import ValidationError
from .model_store import ModelBundle, TokenStream
from .neuronal import LambdaSet
from .pipeline import prune


def check_model(model):
    if not isinstance(model, ModelBundle):
        raise ValidationError(f"expected a ModelBundle, got {type(model).__name__}")
    return model


def check_tokens(tokens, model=None, min_len=1):
    if not isinstance(tokens, TokenStream):
        raise ValidationError(f"expected a TokenStream, got {type(tokens).__name__}")
    if len(tokens) < min_len:
        raise ValidationError(f"need at least {min_len} tokens, got {len(tokens)}")
    if model is not None and tokens.vocab > model.dims.vocab:
        raise ValidationError(f"token vocab {tokens.vocab} exceeds model vocab {model.dims.vocab}")
    return tokens


class SparsityPruner(TransformerMixin, BaseEstimator):
    """Training-free unstructured pruner with selectable sparsity allocation.

    Parameters
    ----------
    scorer : {"magnitude", "wanda"}
        Per-weight saliency.
    topup : {"uniform", "linear", "exp", "log", "owl", "neuronal", "neuronal-block"}
        How sparsity is spread over blocks (and rows, for ``"neuronal"``).
    sparsity : float
        Global fraction of prunable weights to remove.
    lam : float
        Window half-width for the fixed schedules.
    lambda_set : sequence of float or LambdaSet, optional
        Candidate windows for the neuronal modes; defaults to the standard 13-value set.
    seq_len, calib_windows : int
        Window length, and how many leading windows drive the lambda search.
    owl_multiplier : float
        Outlier threshold multiple for ``topup="owl"``.
    n_jobs : int
        Threads used to evaluate lambda candidates; results do not depend on it.

    Attributes
    ----------
    mask_ : SparsityMask
    report_ : PruneReport
    """

    def __init__(
        self,
        scorer="wanda",
        topup="neuronal",
        sparsity=0.7,
        lam=0.08,
        lambda_set=None,
        seq_len=64,
        calib_windows=8,
        owl_multiplier=5.0,
        n_jobs=1,
    ):
        self.scorer = scorer
        self.topup = topup
        self.sparsity = sparsity
        self.lam = lam
        self.lambda_set = lambda_set
        self.seq_len = seq_len
        self.calib_windows = calib_windows
        self.owl_multiplier = owl_multiplier
        self.n_jobs = n_jobs

    def _lambda_set(self):
        if self.lambda_set is None or isinstance(self.lambda_set, LambdaSet):
            return self.lambda_set
        return LambdaSet.from_block(self.lambda_set)

    def fit(self, X, y=None):
        model = check_model(X)
        calib = None if y is None else check_tokens(y, model, min_len=2)
        self.mask_, self.report_ = prune(
            model,
            scorer=self.scorer,
            topup=self.topup,
            sparsity=self.sparsity,
            calib=calib,
            seq_len=self.seq_len,
            calib_windows=self.calib_windows,
            lam=self.lam,
            lambda_set=self._lambda_set(),
            owl_multiplier=self.owl_multiplier,
            n_jobs=self.n_jobs,
        )
        self.n_prunable_params_ = model.prunable_param_count()
        return self

    def transform(self, X):
        check_is_fitted(self, "mask_")
        model = check_model(X)
        check_mask_shapes(model, self.mask_)
        return self.mask_.apply(model)

    def score(self, X, y):
        """Negative perplexity of the pruned ``X`` on tokens ``y`` (higher is better)."""
        check_is_fitted(self, "mask_")
        model = check_model(X)
        return -perplexity(model, self.mask_, check_tokens(y, model), self.seq_len)
