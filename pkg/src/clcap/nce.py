"""Noise-contrastive estimation on finite discrete supports.

The model holds unnormalized log-weights ``ln p_m(u)``; classifying
observed samples against samples from a known noise distribution with the
same saturation used by the contrastive caption objectives recovers the
normalized density.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .objectives import log_one_minus_saturate, log_saturate, saturate


@dataclass
class ToyDensityModel:
    log_weights: np.ndarray

    def __post_init__(self):
        self.log_weights = np.array(self.log_weights, dtype=np.float64)
        if self.log_weights.ndim != 1 or self.log_weights.size < 2:
            raise ValueError("support must have at least 2 points")
        if not np.all(np.isfinite(self.log_weights)):
            raise ValueError("log_weights must be finite")

    @property
    def support_size(self) -> int:
        return self.log_weights.size

    def normalized(self) -> np.ndarray:
        w = np.exp(self.log_weights - self.log_weights.max())
        return w / w.sum()


@dataclass
class NceProblem:
    """Observed samples, noise samples and the noise log-probabilities.

    Samples are integer indices into the support. The noise distribution
    only needs to be strictly positive; it is not renormalized.
    """

    observed: np.ndarray
    noise: np.ndarray
    reference_log_prob: np.ndarray

    def __post_init__(self):
        self.reference_log_prob = np.array(self.reference_log_prob, dtype=np.float64)
        if not np.all(np.isfinite(self.reference_log_prob)):
            raise ValueError("reference probabilities must be strictly positive")
        S = self.reference_log_prob.size
        self.observed = np.asarray(self.observed, dtype=np.int64)
        self.noise = np.asarray(self.noise, dtype=np.int64)
        if self.observed.size == 0 or self.noise.size == 0:
            raise ValueError("need at least one observed and one noise sample")
        for name, arr in (("observed", self.observed), ("noise", self.noise)):
            if arr.min() < 0 or arr.max() >= S:
                raise ValueError(f"{name} sample outside the support of size {S}")

    @property
    def support_size(self) -> int:
        return self.reference_log_prob.size

    @property
    def nu(self) -> float:
        return self.noise.size / self.observed.size

    @classmethod
    def sample(cls, true_p, noise_p, n_observed: int, n_noise: int | None = None,
               seed: int = 0) -> "NceProblem":
        true_p = np.asarray(true_p, dtype=np.float64)
        noise_p = np.asarray(noise_p, dtype=np.float64)
        if true_p.shape != noise_p.shape:
            raise ValueError("true and noise distributions need the same support")
        if n_observed < 1 or (n_noise is not None and n_noise < 1):
            raise ValueError("sample counts must be >= 1")
        if np.any(noise_p <= 0):
            raise ValueError("noise distribution must be strictly positive")
        rng = np.random.default_rng(seed)
        S = true_p.size
        x = rng.choice(S, size=n_observed, p=true_p / true_p.sum())
        y = rng.choice(S, size=n_observed if n_noise is None else n_noise, p=noise_p / noise_p.sum())
        return cls(x, y, np.log(noise_p))


def nce_objective(model: ToyDensityModel, problem: NceProblem) -> tuple[float, np.ndarray]:
    """Joint log-probability of the observed/noise labels and its gradient."""
    if model.support_size != problem.support_size:
        raise ValueError("model and problem supports differ")
    S = problem.support_size
    cx = np.bincount(problem.observed, minlength=S).astype(np.float64)
    cy = np.bincount(problem.noise, minlength=S).astype(np.float64)
    nu = problem.nu
    g = model.log_weights - problem.reference_log_prob
    value = float(cx @ log_saturate(g, nu) + cy @ log_one_minus_saturate(g, nu))
    h = saturate(g, nu)
    return value, cx * (1.0 - h) - cy * h


def nce_fit(problem: NceProblem, init: ToyDensityModel | None = None, steps: int = 500,
            lr: float = 1.0) -> ToyDensityModel:
    """Plain gradient ascent on the NCE objective divided by the observed count."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if init is None:
        init = ToyDensityModel(problem.reference_log_prob)
    w = init.log_weights.copy()
    scale = lr / problem.observed.size
    for _ in range(steps):
        _, grad = nce_objective(ToyDensityModel(w), problem)
        w += scale * grad
    return ToyDensityModel(w)


def total_variation(p, q) -> float:
    return 0.5 * float(np.abs(np.asarray(p, dtype=np.float64) - np.asarray(q, dtype=np.float64)).sum())
