"""scikit-learn style wrappers around the caption scorer and the NCE toy model.

Both estimators follow the usual conventions: hyperparameters are plain
constructor arguments (so ``get_params``/``set_params``/``clone`` work),
learned state lives in attributes with a trailing underscore and is
created only by ``fit``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, DensityMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .corpus import DEFAULT_MAX_LEN, Caption, Dataset
from .evaluation import DEFAULT_KS, mean_log_likelihood, self_retrieval
from .nce import NceProblem, ToyDensityModel, nce_fit
from .scorer import ScorerParams, batch_log_prob, decode_beam, decode_greedy
from .train import TrainConfig, train


class CaptionScorer(BaseEstimator):
    """Image-conditioned caption scorer trained by MLE or a contrastive objective.

    ``fit`` takes a :class:`~clcap.corpus.Dataset`; ``predict`` and
    ``score_samples`` take feature matrices of shape (n_images, d).

    Contrastive objectives need a pretrained starting point: pass
    ``init_params`` (typically ``mle_model.params_``). The same parameters
    serve as the frozen reference.

    Args:
        objective: one of mle, cl, cl_p, cl_n, cl_diff, il.
        hidden_dim: width of the image and token projections.
        n_val: images held out from the end of the training set for
            early stopping.
        init_scale: half-width of the uniform random initialization.
    """

    def __init__(self, objective: str = "mle", hidden_dim: int = 16, learning_rate: float = 1e-3,
                 batch_size: int = 64, max_epochs: int = 50, patience: int = 5, min_delta: float = 1e-4,
                 K: int = 5, nu: float = 1.0, reference_replacement: str = "off", max_runs: int = 2,
                 grad_clip: float | None = None, n_val: int = 10, init_scale: float = 0.1,
                 init_params: ScorerParams | None = None, beam_width: int = 1,
                 max_len: int = DEFAULT_MAX_LEN, seed: int = 0):
        self.objective = objective
        self.hidden_dim = hidden_dim
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.min_delta = min_delta
        self.K = K
        self.nu = nu
        self.reference_replacement = reference_replacement
        self.max_runs = max_runs
        self.grad_clip = grad_clip
        self.n_val = n_val
        self.init_scale = init_scale
        self.init_params = init_params
        self.beam_width = beam_width
        self.max_len = max_len
        self.seed = seed

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            objective=self.objective, learning_rate=self.learning_rate, batch_size=self.batch_size,
            max_epochs=self.max_epochs, patience=self.patience, min_delta=self.min_delta, K=self.K,
            nu=self.nu, seed=self.seed, reference_replacement=self.reference_replacement,
            max_runs=self.max_runs, grad_clip=self.grad_clip,
        )

    def fit(self, X: Dataset, y=None, validation: Dataset | None = None) -> "CaptionScorer":
        """Train on ``X``; ``validation`` defaults to the last ``n_val`` images of ``X``."""
        if not isinstance(X, Dataset):
            raise TypeError(f"fit expects a clcap Dataset, got {type(X).__name__}")
        config = self._train_config()
        if validation is None:
            X, validation = X.split(self.n_val)
        if config.uses_reference and self.init_params is None:
            raise ValueError(f"objective {config.objective!r} needs init_params from an MLE-pretrained model")
        if self.init_params is not None:
            init = self.init_params.copy()
        else:
            init = ScorerParams.random(X.feature_dim, self.hidden_dim, len(X.vocab), seed=self.seed,
                                       scale=self.init_scale)
        result = train(X, validation, config, init)
        self.params_ = result.params
        self.history_ = result.history
        self.vocab_ = X.vocab
        self.n_features_in_ = X.feature_dim
        return self

    def _features(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, model expects {self.n_features_in_}")
        return X

    def predict(self, X) -> list[Caption]:
        """Decoded caption for each row of ``X``."""
        X = self._features(X)
        if self.beam_width == 1:
            return [decode_greedy(self.params_, x, self.max_len) for x in X]
        return [decode_beam(self.params_, x, self.beam_width, self.max_len) for x in X]

    def score_samples(self, X, captions) -> np.ndarray:
        """``ln p(captions[i] | X[i])`` for aligned rows."""
        X = self._features(X)
        if len(captions) != X.shape[0]:
            raise ValueError("need exactly one caption per row of X")
        return batch_log_prob(self.params_, X, list(captions))

    def score(self, X: Dataset, y=None) -> float:
        """Mean log-likelihood of the ground-truth captions of ``X``."""
        check_is_fitted(self, "params_")
        return mean_log_likelihood(self.params_, X)

    def self_retrieval(self, X: Dataset, ks=DEFAULT_KS):
        check_is_fitted(self, "params_")
        return self_retrieval(self.params_, X, ks=ks, beam_width=self.beam_width, max_len=self.max_len)


class NCEDensityEstimator(DensityMixin, BaseEstimator):
    """Density on the finite support ``{0, ..., n_support - 1}`` fitted by NCE.

    Args:
        noise_probs: noise distribution; uniform over ``n_support`` when None.
        n_support: support size, inferred from ``noise_probs`` or the data.
        noise_ratio: noise samples drawn per observed sample.
    """

    def __init__(self, noise_probs=None, n_support: int | None = None, noise_ratio: float = 1.0,
                 steps: int = 500, learning_rate: float = 1.0, seed: int = 0):
        self.noise_probs = noise_probs
        self.n_support = n_support
        self.noise_ratio = noise_ratio
        self.steps = steps
        self.learning_rate = learning_rate
        self.seed = seed

    @staticmethod
    def _samples(X) -> np.ndarray:
        X = check_array(X, dtype=None, ensure_2d=False).ravel()
        if not np.issubdtype(X.dtype, np.integer):
            if not np.all(X == np.round(X)):
                raise ValueError("samples must be integer support indices")
            X = X.astype(np.int64)
        return X

    def fit(self, X, y=None) -> "NCEDensityEstimator":
        X = self._samples(X)
        if self.noise_probs is not None:
            noise = np.asarray(self.noise_probs, dtype=np.float64)
        else:
            S = self.n_support if self.n_support is not None else int(X.max()) + 1
            noise = np.full(max(S, 2), 1.0 / max(S, 2))
        if not self.noise_ratio > 0:
            raise ValueError("noise_ratio must be > 0")
        n_noise = max(1, int(round(self.noise_ratio * X.size)))
        rng = np.random.default_rng(self.seed)
        y_noise = rng.choice(noise.size, size=n_noise, p=noise / noise.sum())
        problem = NceProblem(X, y_noise, np.log(noise))
        self.model_ = nce_fit(problem, ToyDensityModel(np.log(noise)), steps=self.steps, lr=self.learning_rate)
        self.log_weights_ = self.model_.log_weights
        self.probabilities_ = self.model_.normalized()
        self.n_support_ = noise.size
        return self

    def score_samples(self, X) -> np.ndarray:
        """Normalized log-density of each sample."""
        check_is_fitted(self, "probabilities_")
        X = self._samples(X)
        if X.min() < 0 or X.max() >= self.n_support_:
            raise ValueError(f"samples outside the support of size {self.n_support_}")
        return np.log(self.probabilities_[X])

    def score(self, X, y=None) -> float:
        return float(self.score_samples(X).sum())
