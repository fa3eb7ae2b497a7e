import hashlib
import math

import numpy as np
import pytest

from clcap.checkpoint import MAGIC, CheckpointError
from clcap.corpus import generate_synthetic
from clcap.objectives import cl_objective
from clcap.scorer import ScorerParams
from clcap.train import (NumericalError, TrainConfig, TrainState, adam_update, load_checkpoint, load_params,
                         replace_reference, save_checkpoint, save_params, train)


@pytest.fixture(scope="module")
def data():
    ds = generate_synthetic(24, 5, 3, 0.7, seed=2)
    return ds.split(8)


def fresh(ds, h=3, seed=0):
    return ScorerParams.random(ds.feature_dim, h, len(ds.vocab), seed=seed)


@pytest.fixture(scope="module")
def pretrained(data):
    tr, va = data
    res = train(tr, va, TrainConfig(objective="mle", learning_rate=1e-2, max_epochs=30, patience=30), fresh(tr))
    return res.params


class TestAdam:
    def test_quadratic_first_two_steps(self):
        # loss (x - 3)^2 / 2 from x = 0, lr 0.1, default betas; worked by hand
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        x = np.zeros(1)
        m, v = np.zeros(1), np.zeros(1)
        t = adam_update(x, x - 3.0, m, v, 0, lr, b1, b2, eps)
        # m = -0.3, v = 0.009, bias-corrected -3 and 9: step = -0.1 * 3 / (3 + eps)
        assert t == 1
        x1 = 0.1 * 3.0 / (3.0 + eps)
        assert x[0] == pytest.approx(x1, abs=1e-15)
        g2 = x1 - 3.0
        t = adam_update(x, x - 3.0, m, v, t, lr, b1, b2, eps)
        m2 = 0.9 * -0.3 + 0.1 * g2
        v2 = 0.999 * 0.009 + 0.001 * g2 * g2
        x2 = x1 - lr * (m2 / (1 - 0.81)) / (math.sqrt(v2 / (1 - 0.998001)) + eps)
        assert t == 2
        assert m[0] == pytest.approx(m2, abs=1e-15) and v[0] == pytest.approx(v2, abs=1e-15)
        assert x[0] == pytest.approx(x2, abs=1e-14)

    def test_zero_lr(self):
        x = np.array([1.0, 2.0])
        adam_update(x, np.array([5.0, -5.0]), np.zeros(2), np.zeros(2), 0, 0.0)
        assert x.tolist() == [1.0, 2.0]


class TestConfig:
    @pytest.mark.parametrize("kwargs", [dict(learning_rate=-1), dict(patience=0), dict(K=0), dict(nu=0),
                                        dict(objective="gan"), dict(reference_replacement="always"),
                                        dict(batch_size=0), dict(grad_clip=0.0)])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)

    def test_dash_names(self):
        assert TrainConfig(objective="cl-n").objective == "cl_n"


class TestTraining:
    def test_mle_nll_decreases(self):
        ds = generate_synthetic(10, 4, 3, 0.7, seed=0)
        tr, va = ds.split(3)
        config = TrainConfig(objective="mle", learning_rate=1e-2, max_epochs=200, patience=200, batch_size=64)
        res = train(tr, va, config, fresh(tr))
        obj = [r["train_obj"] for r in res.history]
        improved = sum(b > a for a, b in zip(obj, obj[1:]))
        assert len(obj) == 200 and improved >= 0.95 * (len(obj) - 1)

    def test_deterministic(self, data, pretrained):
        tr, va = data
        config = TrainConfig(objective="cl", learning_rate=3e-3, max_epochs=4, patience=10, seed=5)
        a = train(tr, va, config, pretrained)
        b = train(tr, va, config, pretrained)
        assert a.params.vector.tobytes() == b.params.vector.tobytes()
        assert a.history == b.history
        assert all(r["wall_ms"] is None for r in a.history)

    @pytest.mark.parametrize("objective", ["mle", "cl", "cl_n", "il"])
    def test_zero_lr_keeps_init(self, data, pretrained, objective):
        tr, va = data
        res = train(tr, va, TrainConfig(objective=objective, learning_rate=0.0, max_epochs=3, patience=5), pretrained)
        assert res.params.vector.tobytes() == pretrained.vector.tobytes()
        assert res.state.target.vector.tobytes() == pretrained.vector.tobytes()

    def test_patience_stops(self, data, pretrained):
        tr, va = data
        res = train(tr, va, TrainConfig(objective="cl", learning_rate=0.0, max_epochs=50, patience=3), pretrained)
        assert len(res.history) == 3 and res.state.stopped

    def test_reference_frozen_between_replacements(self, data, pretrained):
        tr, va = data
        digests = []

        def check(state, record):
            digests.append((state.run, hashlib.sha256(state.reference.vector.tobytes()).hexdigest()))

        # a coarse min_delta makes each run saturate within a few epochs
        config = TrainConfig(objective="cl", learning_rate=1e-2, max_epochs=40, patience=2, min_delta=5e-3,
                             reference_replacement="every_saturation", max_runs=3)
        res = train(tr, va, config, pretrained, on_epoch_end=check)
        by_run: dict = {}
        for run, digest in digests:
            by_run.setdefault(run, set()).add(digest)
        assert all(len(s) == 1 for s in by_run.values())
        assert by_run[1] == {hashlib.sha256(pretrained.vector.tobytes()).hexdigest()}
        assert res.state.run > 1

    def test_replacement_resets_to_identity(self, data, pretrained):
        tr, va = data
        config = TrainConfig(objective="cl", learning_rate=1e-2, max_epochs=3, patience=10)
        state = train(tr, va, config, pretrained).state
        new = replace_reference(state, config)
        assert new.run == 2 and new.adam_t == 0 and not new.adam_m.any() and not new.adam_v.any()
        assert new.reference == state.best_target and new.target == state.best_target
        value = cl_objective(new.target, new.reference, va, K=5, nu=1.0)
        assert value.total == pytest.approx(2 * math.log(0.5), abs=1e-12)

    def test_replacement_needs_reference(self, data):
        tr, va = data
        state = TrainState.initial(fresh(tr), None, 0)
        with pytest.raises(ValueError):
            replace_reference(state, TrainConfig(objective="mle"))

    def test_replacement_off_never_runs_twice(self, data, pretrained):
        tr, va = data
        res = train(tr, va, TrainConfig(objective="cl", learning_rate=1e-2, max_epochs=30, patience=2), pretrained)
        assert {r["run"] for r in res.history} == {1}

    def test_numerical_abort(self, data):
        tr, va = data
        bad = fresh(tr)
        bad.vector[0] = np.nan
        with pytest.raises(NumericalError) as info:
            train(tr, va, TrainConfig(objective="mle", max_epochs=2), bad)
        assert isinstance(info.value.state, TrainState)

    def test_dimension_check(self, data):
        tr, va = data
        with pytest.raises(ValueError):
            train(tr, va, TrainConfig(), ScorerParams.random(tr.feature_dim + 1, 2, len(tr.vocab)))

    def test_grad_clip_runs(self, data, pretrained):
        tr, va = data
        res = train(tr, va, TrainConfig(objective="cl", learning_rate=1e-2, max_epochs=2, grad_clip=1e-3),
                    pretrained)
        assert np.all(np.isfinite(res.params.vector))


class TestCheckpoint:
    def test_resume_is_bit_exact(self, data, pretrained, tmp_path):
        tr, va = data
        config = TrainConfig(objective="cl", learning_rate=3e-3, max_epochs=5, patience=50, seed=1)
        full = train(tr, va, config, pretrained)
        first = train(tr, va, TrainConfig(**{**config.to_dict(), "max_epochs": 2}), pretrained)
        save_checkpoint(first.state, tmp_path / "s.ckpt", config)
        state = load_checkpoint(tmp_path / "s.ckpt")
        rest = train(tr, va, config, state.target, state=state)
        assert rest.state.target.vector.tobytes() == full.state.target.vector.tobytes()
        assert rest.params.vector.tobytes() == full.params.vector.tobytes()
        assert rest.state.adam_m.tobytes() == full.state.adam_m.tobytes()
        assert first.history + rest.history == full.history

    def test_state_roundtrip(self, data, pretrained, tmp_path):
        tr, va = data
        state = train(tr, va, TrainConfig(objective="cl", max_epochs=2), pretrained).state
        save_checkpoint(state, tmp_path / "s.ckpt")
        again = load_checkpoint(tmp_path / "s.ckpt")
        assert again.target == state.target and again.reference == state.reference
        assert again.rng.bit_generator.state == state.rng.bit_generator.state
        assert (again.step, again.adam_t, again.epoch, again.run) == (state.step, state.adam_t, state.epoch, state.run)
        assert again.best_validation == state.best_validation

    def test_params_roundtrip_and_layout(self, tmp_path):
        p = ScorerParams.random(3, 2, 6, seed=0)
        save_params(p, tmp_path / "p.ckpt", seed=0, objective="mle")
        raw = (tmp_path / "p.ckpt").read_bytes()
        assert raw.startswith(MAGIC)
        n = int.from_bytes(raw[len(MAGIC):len(MAGIC) + 8], "little")
        payload = raw[len(MAGIC) + 8 + n:]
        assert payload == p.vector.astype("<f8").tobytes()
        assert load_params(tmp_path / "p.ckpt") == p

    def test_truncated(self, tmp_path):
        p = ScorerParams.random(3, 2, 6, seed=0)
        save_params(p, tmp_path / "p.ckpt")
        raw = (tmp_path / "p.ckpt").read_bytes()
        (tmp_path / "p.ckpt").write_bytes(raw[:-9])
        with pytest.raises(CheckpointError):
            load_params(tmp_path / "p.ckpt")

    def test_corrupt_byte(self, tmp_path):
        p = ScorerParams.random(3, 2, 6, seed=0)
        save_params(p, tmp_path / "p.ckpt")
        raw = bytearray((tmp_path / "p.ckpt").read_bytes())
        raw[-3] ^= 0xFF
        (tmp_path / "p.ckpt").write_bytes(bytes(raw))
        with pytest.raises(CheckpointError):
            load_params(tmp_path / "p.ckpt")

    def test_not_a_checkpoint(self, tmp_path):
        (tmp_path / "x").write_bytes(b"hello")
        with pytest.raises(CheckpointError):
            load_params(tmp_path / "x")

    def test_wrong_vocab_size(self, tmp_path):
        save_params(ScorerParams.random(3, 2, 6, seed=0), tmp_path / "p.ckpt")
        with pytest.raises(CheckpointError):
            load_params(tmp_path / "p.ckpt", {"V": 7})

    def test_params_file_is_not_a_state(self, tmp_path):
        save_params(ScorerParams.random(3, 2, 6, seed=0), tmp_path / "p.ckpt")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "p.ckpt")
