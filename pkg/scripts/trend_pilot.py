"""Pilot for the trend acceptance run: times one seed of each mode."""

import sys
import time
from pathlib import Path

from weakmtl import data, dsp, model, train
from weakmtl.data import Vocabulary
from weakmtl.model import ArchConfig
from weakmtl.train import TrainConfig

ROOT = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("/tmp/trend_pilot")
N_CLIPS = int(sys.argv[2]) if len(sys.argv) > 2 else 500
EPOCHS = int(sys.argv[3]) if len(sys.argv) > 3 else 12
SEEDS = [int(s) for s in sys.argv[4].split(",")] if len(sys.argv) > 4 else [0]

CLIP_S = 2.5
N_MELS = 32
DSPC = dsp.DspConfig(n_mels=N_MELS)


def build_data():
    corpus = ROOT / "corpus"
    feats = ROOT / "feats"
    vocab = Vocabulary()
    if not (feats / "annotations.jsonl").exists():
        t0 = time.time()
        data.synth_corpus(corpus, n_clips=N_CLIPS, seed=2024, clip_seconds=CLIP_S)
        anns = data.load_annotations(corpus / "annotations.jsonl", vocab)
        feats.mkdir(parents=True, exist_ok=True)
        for ann in anns:
            fm = dsp.extract_features(dsp.read_wav(corpus / ann.source), DSPC)
            dsp.write_feature_file(data.feature_path(feats, ann.clip_id), fm)
        data.save_annotations(feats / "annotations.jsonl", anns)
        print(f"data built in {time.time()-t0:.0f}s, T={fm.n_frames}", flush=True)
    return feats, data.load_annotations(feats / "annotations.jsonl", vocab), vocab


def run_cell(feats, anns, vocab, mode, pooling, seed):
    arch = ArchConfig(
        n_mels=N_MELS, n_frames=125, shared_channels=16, scene_channels=16,
        gru_hidden=8, fc_hidden=16, n_scenes=4, n_events=25,
        freq_pools=(8, 2, 2), scene_time_pool=25,
    )
    tcfg = TrainConfig(mode=mode, pooling=pooling, epochs=EPOCHS, batch_size=8, seed=seed)
    train_anns, eval_anns = data.train_eval_split(anns, 0.278, seed)
    out = ROOT / f"{mode}-{pooling}-s{seed}"
    t0 = time.time()
    train.train_loop(train_anns, eval_anns, feats, arch, tcfg, vocab, out, hop_s=DSPC.hop_seconds)
    best = model.load_checkpoint(out / "best.ckpt")
    rep = train.evaluate(best, eval_anns, feats, vocab, DSPC.hop_seconds, mode=mode)
    print(
        f"{mode:9s} {pooling} seed {seed}: scene_micro={rep.scene_micro_f} "
        f"scene_macro={rep.scene_macro_f} event_micro={rep.event_micro_f} "
        f"event_macro={rep.event_macro_f}  [{time.time()-t0:.0f}s]",
        flush=True,
    )
    return rep


def main():
    feats, anns, vocab = build_data()
    for seed in SEEDS:
        run_cell(feats, anns, vocab, "mtl-weak", "at", seed)
        run_cell(feats, anns, vocab, "asc-only", "at", seed)
        run_cell(feats, anns, vocab, "sed-only", "at", seed)


if __name__ == "__main__":
    main()
