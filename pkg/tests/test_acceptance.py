"""Acceptance suite: one test per release criterion, with timing budgets.

The published absolute scores of the reference experiments are NOT
reproducible here: they require the original recorded corpora and full-scale
training. The property-based checks below (gradient suite, pooling laws,
metric oracle equivalence, loss pinpoints, overfit sanity, synthetic trend
check, determinism, shape contract) substitute for them.
"""

import math
import statistics
import time
from contextlib import contextmanager

import numpy as np
import pytest

from weakmtl import cli, data, dsp, gradcheck, losses, metrics, milpool, model, train
from weakmtl.data import Vocabulary
from weakmtl.milpool import PoolingKind
from weakmtl.model import ArchConfig
from weakmtl.train import TrainConfig

from conftest import record_criterion


@contextmanager
def criterion(number, label):
    try:
        yield
    except BaseException:
        record_criterion(number, label, False)
        raise
    record_criterion(number, label, True)


DSPC = dsp.DspConfig(n_mels=32)
VOCAB = Vocabulary()


def _build_corpus(root, n_clips, seed, clip_seconds):
    corpus = root / "corpus"
    feats = root / "feats"
    data.synth_corpus(corpus, n_clips=n_clips, seed=seed, clip_seconds=clip_seconds)
    anns = data.load_annotations(corpus / "annotations.jsonl", VOCAB)
    feats.mkdir()
    for ann in anns:
        fm = dsp.extract_features(dsp.read_wav(corpus / ann.source), DSPC)
        dsp.write_feature_file(data.feature_path(feats, ann.clip_id), fm)
    data.save_annotations(feats / "annotations.jsonl", anns)
    return feats, anns, fm.n_frames


def _tiny_arch(n_frames):
    return ArchConfig(
        n_mels=32, n_frames=n_frames, shared_channels=8, scene_channels=8,
        gru_hidden=4, fc_hidden=8, n_scenes=4, n_events=25,
        freq_pools=(8, 2, 2), scene_time_pool=25,
    )


def test_criterion_1_non_reproducibility_statement():
    """The reference tables' absolute numbers are out of scope by design."""
    with criterion(1, "absolute reference scores substituted by property checks"):
        # The sweep covers the same row set as the reference comparison table;
        # everything this suite asserts about quality is relative or synthetic.
        assert set(cli.SWEEP_ROWS) == {
            ("asc-only", "none"), ("sed-only", "at"), ("mtl-weak", "none"),
            ("mtl-weak", "mp"), ("mtl-weak", "ap"), ("mtl-weak", "es"), ("mtl-weak", "at"),
        }


def test_criterion_2_gradient_suite():
    with criterion(2, "gradcheck: all kernels/poolings/losses < 1e-4, model < 1e-3, 20 seeds, < 60 s"):
        t0 = time.time()
        results = gradcheck.run(n_seeds=20)
        elapsed = time.time() - t0
        expected_ops = {
            "conv2d", "batch_norm", "leaky_relu", "max_pool2d", "global_max_pool",
            "gru_bidirectional", "linear", "softmax", "sigmoid",
            "pool_mp", "pool_ap", "pool_es", "pool_at",
            "loss_scene_ce", "loss_event_bce_strong", "loss_event_weak", "full_model",
        }
        assert set(results) == expected_ops
        for op, (err, tol) in results.items():
            assert err < tol, f"{op}: {err:.3e} >= {tol}"
        assert elapsed < 60.0, f"gradient suite took {elapsed:.1f}s"


def test_criterion_3_pooling_laws():
    with criterion(3, "pooling bounds/ordering/constants/uniform-AT/permutation on 1000 vectors, < 5 s"):
        t0 = time.time()
        rng = np.random.default_rng(77)
        vectors = [rng.uniform(-5, 5, int(rng.integers(1, 201))) for _ in range(1000)]
        vectors += [np.full(int(rng.integers(1, 201)), c) for c in (-5.0, -1.0, 0.0, 2.5, 5.0)]
        for x in vectors:
            t = len(x)
            a = rng.uniform(-3, 3, t)
            mp = milpool.pool_max(x)
            ap = milpool.pool_avg(x)
            es = milpool.pool_expsoftmax(x)
            at = milpool.pool_attention(x, a)
            lo, hi = x.min(), x.max()
            for y in (mp, ap, es, at):
                assert lo - 1e-9 <= y <= hi + 1e-9
            assert ap <= es + 1e-9
            assert es <= mp + 1e-9
            if hi == lo:  # constant vector: every kind equals the constant
                for y in (mp, ap, es, at):
                    assert abs(y - lo) <= 1e-9
            assert abs(milpool.pool_attention(x, np.zeros(t)) - ap) <= 1e-7
            perm = rng.permutation(t)
            assert abs(milpool.pool_max(x[perm]) - mp) <= 1e-7
            assert abs(milpool.pool_avg(x[perm]) - ap) <= 1e-7
            assert abs(milpool.pool_expsoftmax(x[perm]) - es) <= 1e-7
            assert abs(milpool.pool_attention(x[perm], a[perm]) - at) <= 1e-7
        elapsed = time.time() - t0
        assert elapsed < 5.0, f"pooling laws took {elapsed:.1f}s"


def _f1_oracle(tp, fp, fn):
    return 0.0 if 2 * tp + fp + fn == 0 else 2.0 * tp / (2 * tp + fp + fn)


def _scene_oracle(pred, true):
    classes = sorted(set(pred) | set(true))
    pooled = [0, 0, 0]
    per = []
    for c in classes:
        tp = sum(1 for p, t in zip(pred, true) if p == c and t == c)
        fp = sum(1 for p, t in zip(pred, true) if p == c and t != c)
        fn = sum(1 for p, t in zip(pred, true) if p != c and t == c)
        pooled = [pooled[0] + tp, pooled[1] + fp, pooled[2] + fn]
        per.append(_f1_oracle(tp, fp, fn))
    return _f1_oracle(*pooled), sum(per) / len(per)


def _event_oracle(pred, true):
    t, m = pred.shape
    pooled = [0, 0, 0]
    per = []
    for j in range(m):
        tp = fp = fn = 0
        for i in range(t):
            tp += bool(pred[i, j]) and bool(true[i, j])
            fp += bool(pred[i, j]) and not true[i, j]
            fn += (not pred[i, j]) and bool(true[i, j])
        pooled = [pooled[0] + tp, pooled[1] + fp, pooled[2] + fn]
        per.append(_f1_oracle(tp, fp, fn))
    return _f1_oracle(*pooled), sum(per) / m


def test_criterion_4_metric_oracle_equivalence():
    with criterion(4, "scene/event scores equal brute-force confusion oracle on 200 instances, < 5 s"):
        t0 = time.time()
        rng = np.random.default_rng(99)
        for _ in range(200):
            n_clips = int(rng.integers(1, 21))
            n_classes = int(rng.integers(2, 7))
            pred = rng.integers(0, n_classes, n_clips)
            true = rng.integers(0, n_classes, n_clips)
            got = metrics.scene_scores(pred, true)
            want = _scene_oracle(pred.tolist(), true.tolist())
            assert got[0] == want[0] and got[1] == want[1]

            t = int(rng.integers(1, 51))
            m = int(rng.integers(1, 7))
            p = (rng.uniform(size=(t, m)) < 0.35).astype(np.uint8)
            z = (rng.uniform(size=(t, m)) < 0.35).astype(np.uint8)
            micro, macro, _ = metrics.event_frame_scores(p, z)
            o_micro, o_macro = _event_oracle(p, z)
            assert micro == o_micro and macro == o_macro
        elapsed = time.time() - t0
        assert elapsed < 5.0, f"metric oracle took {elapsed:.1f}s"


def test_criterion_5_loss_pinpoints():
    with criterion(5, "loss pinpoint values match direct evaluation within 1e-6"):
        y = np.array([0.1, 0.2, 0.6, 0.1])
        z = np.array([0.0, 0.0, 1.0, 0.0])
        assert abs(losses.scene_ce(y, z) - (-math.log(0.6))) < 1e-6

        assert abs(losses.scene_ce(np.full(4, 0.25), np.eye(4)[0]) - math.log(4.0)) < 1e-6

        assert abs(
            losses.event_bce_strong(np.array([[0.5]]), np.array([[1.0]])) - math.log(2.0)
        ) < 1e-6

        got = losses.event_weak_loss(np.full((2, 1), 0.5), np.array([0.5]), np.array([1.0]), 0.5, 0.05)
        assert abs(got - 1.05 * math.log(2.0)) < 1e-6


def test_criterion_6_overfit_sanity(tmp_path):
    with criterion(6, "mtl-weak overfits 8 clips: loss < 0.05 within 2000 steps, scene acc 100%, < 5 min"):
        t0 = time.time()
        feats, anns, n_frames = _build_corpus(tmp_path, n_clips=8, seed=42, clip_seconds=1.0)
        arch = _tiny_arch(n_frames)
        cfg = TrainConfig(mode="mtl-weak", pooling="at", lr=5e-3, epochs=2000, batch_size=8, seed=0)
        params, history = train.train_loop(
            anns, None, feats, arch, cfg, VOCAB, tmp_path / "run",
            hop_s=DSPC.hop_seconds, max_steps=2000,
        )
        losses_seen = [row["loss_total"] for row in history]
        first_below = next((i + 1 for i, v in enumerate(losses_seen) if v < 0.05), None)
        assert first_below is not None and first_below <= 2000, (
            f"min loss {min(losses_seen):.4f} never dropped below 0.05"
        )
        batch = next(data.make_batches(anns, feats, 8, VOCAB))
        out, _ = model.forward(params, batch.features, mode="eval")
        acc = np.mean(np.argmax(out.scene_probs, 1) == np.argmax(batch.scene_onehot, 1))
        assert acc == 1.0
        elapsed = time.time() - t0
        assert elapsed < 300.0, f"overfit run took {elapsed:.1f}s"


TREND_EPOCHS = 24
TREND_SEEDS = 5


@pytest.mark.slow
def test_criterion_7_trend_check(tmp_path):
    label = (
        "trend: median scene micro-F mtl-weak(AT) >= CNN(ASC) and median event "
        "macro-F mtl-weak(AT) >= CNN-BiGRU(SED), within 1pp, 500 clips, 5 seeds"
    )
    with criterion(7, label):
        t0 = time.time()
        feats, anns, n_frames = _build_corpus(tmp_path, n_clips=500, seed=2024, clip_seconds=2.5)
        arch = ArchConfig(
            n_mels=32, n_frames=n_frames, shared_channels=16, scene_channels=16,
            gru_hidden=8, fc_hidden=16, n_scenes=4, n_events=25,
            freq_pools=(8, 2, 2), scene_time_pool=25,
        )
        scores = {"mtl-weak": [], "asc-only": [], "sed-only": []}
        for seed in range(TREND_SEEDS):
            train_anns, eval_anns = data.train_eval_split(anns, 0.278, seed)
            for mode in scores:
                cfg = TrainConfig(
                    mode=mode, pooling="at", epochs=TREND_EPOCHS, batch_size=8, seed=seed
                )
                out_dir = tmp_path / f"{mode}-s{seed}"
                train.train_loop(
                    train_anns, eval_anns, feats, arch, cfg, VOCAB, out_dir,
                    hop_s=DSPC.hop_seconds,
                )
                # Final checkpoints keep the comparison symmetric across modes
                # (the multitask eval loss is event-dominated, so best-by-loss
                # selection would pick SED-best epochs for the MTL runs only).
                final = model.load_checkpoint(out_dir / "final.ckpt")
                rep = train.evaluate(
                    final, eval_anns, feats, VOCAB, DSPC.hop_seconds, mode=mode
                )
                scores[mode].append(rep)
        med_scene_mtl = statistics.median(r.scene_micro_f for r in scores["mtl-weak"])
        med_scene_asc = statistics.median(r.scene_micro_f for r in scores["asc-only"])
        med_event_mtl = statistics.median(r.event_macro_f for r in scores["mtl-weak"])
        med_event_sed = statistics.median(r.event_macro_f for r in scores["sed-only"])
        print(
            f"\ntrend medians: scene micro mtl={med_scene_mtl:.4f} asc={med_scene_asc:.4f}; "
            f"event macro mtl={med_event_mtl:.4f} sed={med_event_sed:.4f}"
        )
        assert med_scene_mtl >= med_scene_asc - 0.01, (med_scene_mtl, med_scene_asc)
        assert med_event_mtl >= med_event_sed - 0.01, (med_event_mtl, med_event_sed)
        elapsed = time.time() - t0
        assert elapsed < 3600.0, f"trend check took {elapsed:.0f}s"


def test_criterion_8_determinism(tmp_path, tiny_corpus):
    with criterion(8, "bit-identical checkpoints/metrics per seed; bit-exact file round-trips"):
        cfg = TrainConfig(mode="mtl-weak", pooling="at", epochs=2, batch_size=4, seed=9)
        train_anns, eval_anns = data.train_eval_split(tiny_corpus["annotations"], 0.25, 9)
        reports = []
        for name in ("d1", "d2"):
            params, _ = train.train_loop(
                train_anns, eval_anns, tiny_corpus["feats"],
                ArchConfig(n_mels=32, n_frames=100, shared_channels=8, scene_channels=8,
                           gru_hidden=4, fc_hidden=8, freq_pools=(8, 2, 2), scene_time_pool=25),
                cfg, VOCAB, tmp_path / name, hop_s=0.02,
            )
            reports.append(
                train.evaluate(params, eval_anns, tiny_corpus["feats"], VOCAB, 0.02)
            )
        assert (tmp_path / "d1" / "final.ckpt").read_bytes() == (tmp_path / "d2" / "final.ckpt").read_bytes()
        assert (tmp_path / "d1" / "best.ckpt").read_bytes() == (tmp_path / "d2" / "best.ckpt").read_bytes()
        assert reports[0] == reports[1]

        # feature file round-trip, bit-exact
        rng = np.random.default_rng(5)
        fm = dsp.FeatureMap(rng.standard_normal((33, 17)).astype(np.float32))
        f1, f2 = tmp_path / "a.lmel", tmp_path / "b.lmel"
        dsp.write_feature_file(f1, fm)
        dsp.write_feature_file(f2, dsp.read_feature_file(f1))
        assert f1.read_bytes() == f2.read_bytes()

        # checkpoint round-trip, bit-exact
        params = model.init_params(gradcheck.TINY_ARCH, "at", 3)
        c1, c2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        model.save_checkpoint(c1, params)
        model.save_checkpoint(c2, model.load_checkpoint(c1))
        assert c1.read_bytes() == c2.read_bytes()


def test_criterion_9_shape_contract():
    with criterion(9, "default architecture reproduces every published dimension"):
        arch = ArchConfig()
        chain = arch.shape_chain()
        assert chain["input"] == (500, 64)
        assert chain["shared_out"] == (128, 500, 2)
        assert chain["scene_time_out"] == 20
        assert chain["frame_logits"] == (500, 25)
        assert chain["scene_out"] == 4
        assert chain["bag_logits"] == 25
        # the pooled-dimension divisibility is enforced at construction
        with pytest.raises(Exception):
            ArchConfig(n_mels=63)
        with pytest.raises(Exception):
            ArchConfig(n_frames=499)
        # parameter shapes follow the chain
        params = model.init_params(arch, PoolingKind.AT, 0)
        assert params.arrays["shared.conv0.w"].shape == (128, 1, 3, 3)
        assert params.arrays["scene.conv0.w"].shape == (256, 128, 3, 3)
        assert params.arrays["event.gru_f.w_x"].shape == (256, 96)
        assert params.arrays["event.fc1.w"].shape == (32, 25)
        assert params.arrays["scene.fc1.w"].shape == (32, 4)
        assert params.arrays["event.attn.w"].shape == (64, 25)
