"""Synthetic recordings in, int8 recording-level decisions out.

The generator adds a small extra bump after each beat (in both the ECG and
the heart-sound channel) for abnormal recordings, so the task is learnable
by the small CNN in a few epochs. The walk-through:

    write a corpus to disk -> load -> windows -> train -> QAT -> int8 -> evaluate

Run: python3 demos/02_synthetic_end_to_end.py   (about a minute on one core)
"""

import tempfile
from pathlib import Path

import numpy as np

from cardiofuse.preprocess import preprocess_corpus, stack
from cardiofuse.quant import accumulator_audit, save_quant_weights
from cardiofuse.signal_io import load_corpus
from cardiofuse.synthetic import SyntheticConfig, synth_corpus, write_corpus
from cardiofuse.train import TrainConfig, evaluate_records, fit

cfg = SyntheticConfig(min_duration_s=9.0, max_duration_s=14.0)

with tempfile.TemporaryDirectory() as tmp:
    # the same on-disk layout as the real corpus: .hea/.dat for ECG, .wav for PCG
    write_corpus(synth_corpus(24, seed=1, cfg=cfg), tmp)
    print("files:", sorted(p.name for p in Path(tmp).iterdir())[:5], "...")
    records, excluded = load_corpus(tmp)
print(f"loaded {len(records)} recordings, excluded {len(excluded)}")

train_windows = preprocess_corpus(records)
x, y = stack(train_windows)
print(f"{len(x)} windows of width {x.shape[1]}, abnormal fraction {y.mean():.2f}")

# an unseen corpus for evaluation
test_windows = preprocess_corpus(synth_corpus(16, seed=2, cfg=cfg))

tc = TrainConfig(epochs=20, affine_grid=None, qat_epochs=4, seed=0)
model, qm, history = fit(train_windows, tc)
print("loss:", " ".join(f"{v:.3f}" for v in history[::4]))

for name, m in (("float", model), ("int8", qm)):
    metrics, decisions = evaluate_records(m, test_windows)
    print(f"{name:5s} accuracy {metrics.accuracy:.3f} sensitivity {metrics.sensitivity:.3f} "
          f"specificity {metrics.specificity:.3f} auc {metrics.auc:.3f}")

# the learned per-modality input scaling
print("affine scale (ECG, PCG):", np.round(model.affine.params["scale"], 3))

# the deployable artifact
blob = save_quant_weights(qm)
print(f"int8 weight file: {len(blob)} bytes")
print(f"largest int32 accumulator bound: {max(accumulator_audit(qm).values())} (limit {2**31 - 1})")
