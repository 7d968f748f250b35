"""A live stream with a sliding vote, and when local inference saves power.

A recording that turns abnormal halfway through is replayed one window per
second. The vote over the last N windows flips once enough abnormal windows
arrive, and only then are the buffered windows sent over the radio.

Run: python3 demos/03_stream_and_energy.py
"""

from dataclasses import replace

import numpy as np

from cardiofuse.preprocess import preprocess_corpus
from cardiofuse.signal_io import Label, PairedRecord, Signal
from cardiofuse.stream import PROFILES, CostProfile, compare_energy, format_event_log, simulate_stream
from cardiofuse.synthetic import SyntheticConfig, synth_corpus, synth_record
from cardiofuse.train import TrainConfig, fit

cfg = SyntheticConfig(min_duration_s=9.0, max_duration_s=12.0)
model, _, _ = fit(preprocess_corpus(synth_corpus(20, seed=3, cfg=cfg)),
                  TrainConfig(epochs=20, affine_grid=None, seed=0))

# stitch 10 s of a normal recording to 10 s of an abnormal one
rng = np.random.default_rng(4)
long_cfg = replace(cfg, min_duration_s=10.0, max_duration_s=10.0)
a = synth_record("n", Label.NORMAL, rng, long_cfg)
b = synth_record("a", Label.ABNORMAL, rng, long_cfg)
join = lambda s, t: Signal(np.concatenate([s.samples, t.samples]), s.rate, s.modality)
record = PairedRecord("onset", join(a.ecg, b.ecg), join(a.pcg, b.pcg), Label.ABNORMAL)

events = simulate_stream(record, model, N=5)
print(format_event_log(events), end="")
sent = [e for e in events if e.kind == "transmit"]
print(f"{sum(e.kind == 'infer' for e in events)} inferences, {len(sent)} transmission(s), "
      f"{sum(e.payload['bytes'] for e in sent)} bytes sent")

# power: always-on inference against streaming everything
print()
for name, profile in PROFILES.items():
    r = compare_energy(profile)
    print(f"{name:8s} inference {r.ml_power_mW:.3f} mW vs radio {r.radio_power_mW:.3f} mW "
          f"-> savings {r.savings_fraction:+.1%}")

# with anomalies present the radio is also on part of the time
for duty in (0.0, 0.1, 0.3, 0.5):
    r = compare_energy(CostProfile(anomaly_duty=duty))
    print(f"anomaly duty {duty:.1f}: system {r.system_power_mW:.3f} mW (streaming {r.radio_power_mW:.3f} mW)")
print(f"break-even anomaly duty for the NPU profile: {compare_energy(PROFILES['npu']).breakeven_anomaly_duty:.3f}")
