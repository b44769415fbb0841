"""Optimizer oracle traces, training-loop behavior, evaluation plumbing."""

import numpy as np
import pytest

from weakmtl import data, gradcheck, losses, model, train
from weakmtl.data import Vocabulary
from weakmtl.errors import InvalidConfig, NumericsError
from weakmtl.train import OptimizerState, TrainConfig

from conftest import TINY_ARCH

HOP_S = 0.02


def scalar_params(value=1.0):
    arch = gradcheck.TINY_ARCH
    p = model.ModelParams(arch, None, {"w": np.array([value], dtype=np.float64)}, {})
    return p


def radam_oracle_trace(grads, lr, b1, b2, eps):
    """Independent scalar trace of the rectified-Adam update rule."""
    theta, m, v = 0.0, 0.0, 0.0
    rho_inf = 2.0 / (1.0 - b2) - 1.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        rho_t = rho_inf - 2 * t * b2**t / (1 - b2**t)
        if rho_t > 4.0:
            r = np.sqrt(
                ((rho_t - 4) * (rho_t - 2) * rho_inf) / ((rho_inf - 4) * (rho_inf - 2) * rho_t)
            )
            theta -= lr * r * m_hat / (np.sqrt(v / (1 - b2**t)) + eps)
        else:
            theta -= lr * m_hat
        out.append(theta)
    return out


class TestOptimizer:
    def test_zero_gradient_keeps_params(self):
        p = scalar_params(3.0)
        state = OptimizerState()
        cfg = TrainConfig(epochs=1)
        train.optimizer_step(p, {"w": np.zeros(1)}, state, cfg)
        assert p.arrays["w"][0] == 3.0
        assert state.step == 1

    def test_plain_adam_first_step(self):
        p = scalar_params(0.0)
        cfg = TrainConfig(rectified=False, lr=0.01, epochs=1, grad_clip=0.0)
        train.optimizer_step(p, {"w": np.ones(1)}, OptimizerState(), cfg)
        expected = -0.01 * 1.0 / (1.0 + 1e-8)
        np.testing.assert_allclose(p.arrays["w"][0], expected, rtol=1e-9)

    def test_radam_matches_scalar_trace(self):
        lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
        grads = [1.0, -0.5, 2.0, 0.25, 1.5, -1.0, 0.75]
        p = scalar_params(0.0)
        cfg = TrainConfig(rectified=True, lr=lr, beta1=b1, beta2=b2, eps=eps, epochs=1, grad_clip=0.0)
        state = OptimizerState()
        got = []
        for g in grads:
            train.optimizer_step(p, {"w": np.array([g])}, state, cfg)
            got.append(p.arrays["w"][0])
        np.testing.assert_allclose(got, radam_oracle_trace(grads, lr, b1, b2, eps), rtol=1e-7)

    def test_rectification_kicks_in_at_step_five(self):
        # While rho_t <= 4 (steps 1-4 at beta2=0.999) the update has no
        # variance term: constant gradient 1 moves the param by exactly lr.
        p = scalar_params(0.0)
        cfg = TrainConfig(rectified=True, lr=0.1, epochs=1, grad_clip=0.0)
        state = OptimizerState()
        deltas = []
        for _ in range(5):
            before = p.arrays["w"][0]
            train.optimizer_step(p, {"w": np.ones(1)}, state, cfg)
            deltas.append(before - p.arrays["w"][0])
        np.testing.assert_allclose(deltas[:4], 0.1, rtol=1e-12)
        assert deltas[4] < 0.1  # variance-rectified step is damped

    def test_non_finite_gradient_rejected(self):
        p = scalar_params()
        with pytest.raises(NumericsError, match="w"):
            train.optimizer_step(p, {"w": np.array([np.nan])}, OptimizerState(), TrainConfig(epochs=1))

    def test_grad_clip_scales_to_max_norm(self):
        grads = {"a": np.array([3.0, 4.0])}
        clipped, norm = train.clip_global_norm(grads, 1.0)
        assert norm == pytest.approx(5.0)
        np.testing.assert_allclose(clipped["a"], [0.6, 0.8])


class _PoisonBatch:
    """Batch stub whose unlisted fields raise on access."""

    def __init__(self, **fields):
        self.__dict__["_fields"] = fields

    def __getattr__(self, name):
        if name in self._fields:
            return self._fields[name]
        raise AssertionError(f"loss must not read batch.{name}")


class TestModeIsolation:
    def _outputs(self, rng, pooling="at"):
        params = model.init_params(gradcheck.TINY_ARCH, pooling, 0)
        x = rng.standard_normal((2, 8, 8)).astype(np.float32)
        out, _ = model.forward(params, x, mode="train")
        return out

    def test_asc_only_reads_scene_labels_only(self, rng):
        out = self._outputs(rng)
        scene = np.zeros((2, 3), dtype=np.float32)
        scene[:, 0] = 1.0
        batch = _PoisonBatch(scene_onehot=scene)
        total, l_scene, l_event, _ = train.compute_loss_and_grads(
            out, batch, "asc-only", losses.LossWeights()
        )
        assert total == l_scene and l_event == 0.0

    def test_sed_only_reads_weak_labels_only(self, rng):
        out = self._outputs(rng)
        weak = np.zeros((2, 3), dtype=np.float32)
        weak[:, 1] = 1.0
        batch = _PoisonBatch(weak=weak)
        total, l_scene, l_event, _ = train.compute_loss_and_grads(
            out, batch, "sed-only", losses.LossWeights()
        )
        assert total == l_event and l_scene == 0.0

    def test_mtl_weak_never_reads_strong_roll(self, rng):
        out = self._outputs(rng)
        scene = np.zeros((2, 3), dtype=np.float32)
        scene[:, 0] = 1.0
        weak = np.zeros((2, 3), dtype=np.float32)
        batch = _PoisonBatch(scene_onehot=scene, weak=weak)
        train.compute_loss_and_grads(out, batch, "mtl-weak", losses.LossWeights())


def _quick_cfg(**kw):
    defaults = dict(mode="mtl-weak", pooling="at", epochs=1, batch_size=4, seed=0)
    defaults.update(kw)
    return TrainConfig(**defaults)


class TestTrainLoop:
    def test_loss_decreases_in_fifty_steps(self, rng):
        arch = gradcheck.TINY_ARCH
        ok = 0
        for seed in range(10):
            srng = np.random.default_rng(seed)
            params = model.init_params(arch, "at", seed)
            x = srng.standard_normal((4, 8, 8)).astype(np.float32)
            scene = np.zeros((4, 3), dtype=np.float32)
            scene[np.arange(4), srng.integers(0, 3, 4)] = 1.0
            weak = (srng.uniform(size=(4, 3)) < 0.5).astype(np.float32)
            weights = losses.LossWeights()
            cfg = TrainConfig(epochs=1, lr=1e-3)
            state = OptimizerState()
            first = last = None
            for _ in range(50):
                out, cache = model.forward(params, x, mode="train")
                total, _, _, (ds, df, db) = train.compute_loss_and_grads(
                    out, _PoisonBatch(scene_onehot=scene, weak=weak), "mtl-weak", weights
                )
                grads = model.backward(params, cache, ds, df, db)
                grads, _ = train.clip_global_norm(grads, cfg.grad_clip)
                train.optimizer_step(params, grads, state, cfg)
                first = total if first is None else first
                last = total
            ok += last <= first
        assert ok >= 9

    def test_asc_only_leaves_event_branch_at_init(self, tiny_corpus, tmp_path):
        cfg = _quick_cfg(mode="asc-only")
        params, _ = train.train_loop(
            tiny_corpus["annotations"], None, tiny_corpus["feats"], TINY_ARCH, cfg,
            Vocabulary(), tmp_path / "asc", hop_s=HOP_S,
        )
        init = model.init_params(TINY_ARCH, cfg.effective_pooling, cfg.seed)
        for name in params.arrays:
            if name.startswith("event."):
                assert np.array_equal(params.arrays[name], init.arrays[name]), name
            elif name.startswith(("scene.", "shared.")) and name.endswith(".w"):
                assert not np.array_equal(params.arrays[name], init.arrays[name]), name

    def test_deterministic_checkpoints(self, tiny_corpus, tmp_path):
        cfg = _quick_cfg(epochs=2, seed=11)
        train_anns, eval_anns = data.train_eval_split(tiny_corpus["annotations"], 0.25, 11)
        for d in ("r1", "r2"):
            train.train_loop(
                train_anns, eval_anns, tiny_corpus["feats"], TINY_ARCH, cfg,
                Vocabulary(), tmp_path / d, hop_s=HOP_S,
            )
        assert (tmp_path / "r1" / "final.ckpt").read_bytes() == (tmp_path / "r2" / "final.ckpt").read_bytes()
        assert (tmp_path / "r1" / "best.ckpt").read_bytes() == (tmp_path / "r2" / "best.ckpt").read_bytes()
        assert (tmp_path / "r1" / "log.csv").read_text() == (tmp_path / "r2" / "log.csv").read_text()

    def test_mtl_strong_requires_hop(self, tiny_corpus, tmp_path):
        with pytest.raises(InvalidConfig):
            train.train_loop(
                tiny_corpus["annotations"], None, tiny_corpus["feats"], TINY_ARCH,
                _quick_cfg(mode="mtl-strong"), Vocabulary(), tmp_path / "x",
            )

    def test_mtl_strong_runs(self, tiny_corpus, tmp_path):
        params, history = train.train_loop(
            tiny_corpus["annotations"], None, tiny_corpus["feats"], TINY_ARCH,
            _quick_cfg(mode="mtl-strong"), Vocabulary(), tmp_path / "strong", hop_s=HOP_S,
        )
        assert params.pooling is None  # strong-label training has no MIL head
        assert all(np.isfinite(row["loss_total"]) for row in history)

    def test_max_steps_stops_early(self, tiny_corpus, tmp_path):
        _, history = train.train_loop(
            tiny_corpus["annotations"], None, tiny_corpus["feats"], TINY_ARCH,
            _quick_cfg(epochs=50), Vocabulary(), tmp_path / "ms", hop_s=HOP_S, max_steps=3,
        )
        assert history[-1]["step"] == 3

    def test_log_csv_columns(self, tiny_corpus, tmp_path):
        train.train_loop(
            tiny_corpus["annotations"], None, tiny_corpus["feats"], TINY_ARCH,
            _quick_cfg(), Vocabulary(), tmp_path / "log", hop_s=HOP_S,
        )
        header = (tmp_path / "log" / "log.csv").read_text().splitlines()[0]
        assert header == "epoch,step,loss_total,loss_scene,loss_event,lr"


class TestEvaluate:
    def test_idempotent_and_in_range(self, tiny_corpus):
        params = model.init_params(TINY_ARCH, "at", 5)
        args = (tiny_corpus["annotations"], tiny_corpus["feats"], Vocabulary(), HOP_S)
        r1 = train.evaluate(params, *args)
        r2 = train.evaluate(params, *args)
        assert r1 == r2
        for v in (r1.scene_micro_f, r1.scene_macro_f, r1.event_micro_f, r1.event_macro_f):
            assert 0.0 <= v <= 1.0

    def test_untrained_scene_micro_near_chance(self, tiny_corpus):
        micros = []
        for seed in range(10):
            params = model.init_params(TINY_ARCH, "at", seed)
            rep = train.evaluate(
                params, tiny_corpus["annotations"], tiny_corpus["feats"], Vocabulary(), HOP_S
            )
            micros.append(rep.scene_micro_f)
        assert 0.10 <= np.mean(micros) <= 0.40

    def test_checkpoint_roundtrip_same_report(self, tiny_corpus, tmp_path):
        params = model.init_params(TINY_ARCH, "mp", 6)
        path = tmp_path / "m.ckpt"
        model.save_checkpoint(path, params)
        loaded = model.load_checkpoint(path)
        args = (tiny_corpus["annotations"], tiny_corpus["feats"], Vocabulary(), HOP_S)
        assert train.evaluate(params, *args) == train.evaluate(loaded, *args)

    def test_mode_limits_report(self, tiny_corpus):
        params = model.init_params(TINY_ARCH, "at", 7)
        rep = train.evaluate(
            params, tiny_corpus["annotations"], tiny_corpus["feats"], Vocabulary(), HOP_S,
            mode="asc-only",
        )
        assert rep.scene_micro_f is not None
        assert rep.event_micro_f is None and rep.per_event_f == {}
