"""Minibatch Adam training with validation-based stopping.

Objectives are maximized by running Adam on their negation. Each epoch
draws ``K`` fresh negative sets for the contrastive family, shuffles the
positives and slices both into aligned minibatches.
"""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from . import checkpoint as ckpt
from .corpus import Dataset
from .objectives import (CONTRASTIVE, DEFAULT_K, DEFAULT_NU, OBJECTIVES, mismatched_images,
                         replica_objective, sample_negatives)
from .scorer import ScorerParams

logger = logging.getLogger(__name__)

# fine-tuning rate used for full-size captioners; selectable, not the default here
FULL_SCALE_LEARNING_RATE = 1e-6
REPLACEMENT_MODES = ("off", "every_saturation")


class NumericalError(FloatingPointError):
    """Training produced a non-finite value; ``state`` is the last finite snapshot."""

    def __init__(self, message: str, state: "TrainState"):
        super().__init__(message)
        self.state = state


@dataclass
class TrainConfig:
    objective: str = "mle"
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 64
    max_epochs: int = 50
    patience: int = 5
    min_delta: float = 1e-4
    K: int = DEFAULT_K
    nu: float = DEFAULT_NU
    seed: int = 0
    reference_replacement: str = "off"
    max_runs: int = 2
    grad_clip: float | None = None

    def __post_init__(self):
        self.objective = self.objective.replace("-", "_")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}; choose from {OBJECTIVES}")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not self.nu > 0:
            raise ValueError("nu must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        if self.reference_replacement not in REPLACEMENT_MODES:
            raise ValueError(f"reference_replacement must be one of {REPLACEMENT_MODES}")
        if self.max_runs < 1:
            raise ValueError("max_runs must be >= 1")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValueError("grad_clip must be > 0")

    @property
    def uses_reference(self) -> bool:
        return self.objective in CONTRASTIVE

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainState:
    target: ScorerParams
    reference: ScorerParams | None
    best_target: ScorerParams
    adam_m: np.ndarray
    adam_v: np.ndarray
    rng: np.random.Generator
    step: int = 0
    adam_t: int = 0
    epoch: int = 0
    run: int = 1
    best_validation: float = np.inf
    epochs_since_improvement: int = 0
    run_start_validation: float = np.nan
    run_improvements: list[float] = field(default_factory=list)
    stopped: bool = False

    @classmethod
    def initial(cls, init: ScorerParams, reference: ScorerParams | None, seed: int) -> "TrainState":
        return cls(
            target=init.copy(),
            reference=None if reference is None else reference.copy(),
            best_target=init.copy(),
            adam_m=np.zeros(init.size),
            adam_v=np.zeros(init.size),
            rng=np.random.default_rng(np.random.SeedSequence([seed, 0xC1])),
        )

    def copy(self) -> "TrainState":
        return copy.deepcopy(self)


class TrainResult(NamedTuple):
    params: ScorerParams
    history: list[dict]
    state: TrainState


def adam_update(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int,
                lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> int:
    """One bias-corrected Adam step on ``param`` (in place) for a loss gradient.

    Returns the new step count.
    """
    t += 1
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return t


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


class _Split:
    """Positives and fixed sampling schedule for one dataset split."""

    VAL_TAG = 0x7A1

    def __init__(self, dataset: Dataset, config: TrainConfig):
        self.dataset = dataset
        self.features = dataset.features
        self.positives = dataset.positives()
        self.n_neg = max(1, int(round(config.nu * len(self.positives))))
        self.fixed_negatives = None
        if config.objective == "il":
            self.fixed_negatives = mismatched_images(dataset, self.positives,
                                                     _derived_seed(config.seed, 0x11))

    def negative_sets(self, config: TrainConfig, *tag: int) -> list:
        if not config.uses_reference:
            return []
        return [sample_negatives(self.dataset, self.positives, _derived_seed(config.seed, *tag, k), self.n_neg)
                for k in range(config.K)]

    def objective(self, config, target, reference, negative_sets, with_grad=False):
        value = replica_objective(config.objective, target, reference, self.features, self.positives,
                                  negative_sets, config.nu, self.fixed_negatives)
        return value if with_grad else value.total


def _minibatches(split: _Split, config: TrainConfig, perm: np.ndarray, negative_sets: list):
    T_m = len(split.positives)
    for a in range(0, T_m, config.batch_size):
        idx = perm[a:a + config.batch_size]
        pos = [split.positives[i] for i in idx]
        neg_idx = [i + r * T_m for r in range(-(-split.n_neg // T_m)) for i in idx if i + r * T_m < split.n_neg]
        negs = [[ys[j] for j in neg_idx] for ys in negative_sets]
        fixed = None if split.fixed_negatives is None else [split.fixed_negatives[i] for i in idx]
        yield pos, negs, fixed


def replace_reference(state: TrainState, config: TrainConfig) -> TrainState:
    """Start a new run with the best target so far as both reference and target."""
    if not config.uses_reference:
        raise ValueError(f"objective {config.objective!r} has no reference model to replace")
    new = state.copy()
    new.reference = state.best_target.copy()
    new.target = state.best_target.copy()
    new.adam_m[:] = 0.0
    new.adam_v[:] = 0.0
    new.adam_t = 0
    new.run = state.run + 1
    new.epochs_since_improvement = 0
    return new


def train(dataset_train: Dataset, dataset_val: Dataset, config: TrainConfig, init: ScorerParams,
          reference_init: ScorerParams | None = None, state: TrainState | None = None,
          on_epoch_end: Callable[[TrainState, dict], None] | None = None,
          wall_time: bool = False) -> TrainResult:
    """Train ``init`` on ``dataset_train`` with early stopping on ``dataset_val``.

    Contrastive objectives use ``reference_init`` (default: a copy of
    ``init``) as the frozen reference. Passing a ``state`` (e.g. from
    :func:`load_checkpoint`) resumes that run exactly; training continues
    until ``config.max_epochs`` epochs have been completed in total.

    Returns the best-by-validation parameters, the per-epoch history and
    the final state. Raises :class:`NumericalError` on non-finite values.
    """
    if init.d != dataset_train.feature_dim or init.V != len(dataset_train.vocab):
        raise ValueError(f"model dims {init.dims} do not match the training data "
                         f"(d={dataset_train.feature_dim}, V={len(dataset_train.vocab)})")
    if state is None:
        if config.uses_reference and reference_init is None:
            reference_init = init
        state = TrainState.initial(init, reference_init if config.uses_reference else None, config.seed)
    else:
        state = state.copy()

    tr = _Split(dataset_train, config)
    va = _Split(dataset_val, config)
    val_negs = va.negative_sets(config, _Split.VAL_TAG)

    def validate(st):
        value = va.objective(config, st.target, st.reference, val_negs)
        if not np.isfinite(value):
            raise NumericalError("non-finite validation objective", st)
        return value

    if np.isnan(state.run_start_validation):
        state.run_start_validation = validate(state)
        state.best_validation = -state.run_start_validation

    history: list[dict] = []
    lr = config.learning_rate
    while not state.stopped and state.epoch < config.max_epochs:
        t0 = time.perf_counter()
        epoch = state.epoch + 1
        negative_sets = tr.negative_sets(config, epoch, state.run)
        perm = state.rng.permutation(len(tr.positives))
        for pos, negs, fixed in _minibatches(tr, config, perm, negative_sets):
            value = replica_objective(config.objective, state.target, state.reference, tr.features,
                                      pos, negs, config.nu, fixed)
            grad = -value.grad.vector
            if not (np.isfinite(value.total) and np.all(np.isfinite(grad))):
                raise NumericalError(f"non-finite objective at step {state.step}", state)
            if config.grad_clip is not None:
                norm = float(np.linalg.norm(grad))
                if norm > config.grad_clip:
                    grad *= config.grad_clip / norm
            state.adam_t = adam_update(state.target.vector, grad, state.adam_m, state.adam_v, state.adam_t,
                                       lr, config.adam_beta1, config.adam_beta2, config.adam_eps)
            state.step += 1
        if not np.all(np.isfinite(state.target.vector)):
            raise NumericalError(f"non-finite parameters after epoch {epoch}", state)
        state.epoch = epoch

        train_obj = tr.objective(config, state.target, state.reference, negative_sets)
        val_obj = validate(state)
        record = {
            "epoch": epoch,
            "run": state.run,
            "train_obj": float(train_obj),
            "val_obj": float(val_obj),
            "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3) if wall_time else None,
        }
        history.append(record)

        loss = -val_obj
        if loss < state.best_validation - config.min_delta:
            state.best_validation = loss
            state.best_target = state.target.copy()
            state.epochs_since_improvement = 0
        else:
            state.epochs_since_improvement += 1
        logger.debug("epoch %d run %d train %.6f val %.6f", epoch, state.run, train_obj, val_obj)
        if on_epoch_end is not None:
            on_epoch_end(state, record)

        if state.epochs_since_improvement >= config.patience:
            state.run_improvements.append(-state.best_validation - state.run_start_validation)
            if config.reference_replacement == "every_saturation" and state.run < config.max_runs:
                state = replace_reference(state, config)
                state.run_start_validation = validate(state)
                state.best_validation = -state.run_start_validation
            else:
                state.stopped = True
    return TrainResult(state.best_target.copy(), history, state)


def _param_header(params: ScorerParams) -> dict:
    return {"dims": params.dims}


def save_params(params: ScorerParams, path, seed: int | None = None, objective: str | None = None,
                step: int = 0, extra: dict | None = None) -> None:
    header = {**(extra or {}), "kind": "params", **_param_header(params), "seed": seed,
              "objective": objective, "step": step}
    ckpt.write_sections(path, header, {"target": params.vector})


def save_checkpoint(state: TrainState, path, config: TrainConfig | None = None,
                    extra: dict | None = None) -> None:
    """Write the full training state (parameters, Adam moments, RNG, counters).

    ``extra`` adds caller-defined header fields (e.g. a vocabulary digest).
    """
    sections = {"target": state.target.vector, "best_target": state.best_target.vector,
                "adam_m": state.adam_m, "adam_v": state.adam_v}
    if state.reference is not None:
        sections["reference"] = state.reference.vector
    header = {
        **(extra or {}),
        "kind": "train_state",
        **_param_header(state.target),
        "seed": None if config is None else config.seed,
        "objective": None if config is None else config.objective,
        "config": None if config is None else config.to_dict(),
        "step": state.step,
        "adam_t": state.adam_t,
        "epoch": state.epoch,
        "run": state.run,
        "best_validation": None if not np.isfinite(state.best_validation) else state.best_validation,
        "epochs_since_improvement": state.epochs_since_improvement,
        "run_start_validation": None if np.isnan(state.run_start_validation) else state.run_start_validation,
        "run_improvements": list(state.run_improvements),
        "stopped": state.stopped,
        "rng": state.rng.bit_generator.state,
    }
    ckpt.write_sections(path, header, sections)


def _check_dims(header: dict, expected: dict | None, path) -> dict:
    dims = header["dims"]
    if expected is not None:
        for key, val in expected.items():
            if dims.get(key) != val:
                raise ckpt.CheckpointError(f"{path}: checkpoint has {key}={dims.get(key)}, expected {val}")
    return dims


def read_header(path) -> dict:
    return ckpt.read_sections(path)[0]


def load_params(path, expected_dims: dict | None = None) -> ScorerParams:
    """Target parameters from either a parameter file or a training-state file."""
    header, sections = ckpt.read_sections(path)
    dims = _check_dims(header, expected_dims, path)
    return ScorerParams(dims["d"], dims["h"], dims["V"], sections["target"])


def load_checkpoint(path, expected_dims: dict | None = None) -> TrainState:
    header, sections = ckpt.read_sections(path)
    dims = _check_dims(header, expected_dims, path)

    def params(name):
        return ScorerParams(dims["d"], dims["h"], dims["V"], sections[name])

    if header.get("kind") != "train_state":
        raise ckpt.CheckpointError(f"{path}: holds parameters only, not a training state")
    bitgen = getattr(np.random, header["rng"]["bit_generator"])()
    bitgen.state = header["rng"]
    best_val = header["best_validation"]
    start_val = header["run_start_validation"]
    return TrainState(
        target=params("target"),
        reference=params("reference") if "reference" in sections else None,
        best_target=params("best_target"),
        adam_m=sections["adam_m"].copy(),
        adam_v=sections["adam_v"].copy(),
        rng=np.random.Generator(bitgen),
        step=header["step"],
        adam_t=header["adam_t"],
        epoch=header["epoch"],
        run=header["run"],
        best_validation=np.inf if best_val is None else best_val,
        epochs_since_improvement=header["epochs_since_improvement"],
        run_start_validation=np.nan if start_val is None else start_val,
        run_improvements=list(header["run_improvements"]),
        stopped=header["stopped"],
    )
