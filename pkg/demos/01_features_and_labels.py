"""From audio to training targets and back.

Synthesizes a small labelled soundscape, turns it into log-mel features,
encodes the annotation as frame targets, and decodes the targets back into
events. Run with ``python demos/01_features_and_labels.py``.
"""

import tempfile
from pathlib import Path

import numpy as np

from fdylka.data_io import DESED_CLASSES, SynthSpec, synth_generate
from fdylka.dsp import corpus_stats, featurize_file, normalize
from fdylka.evaluation import DecodeConfig, decode, encode_events, event_f1

work = Path(tempfile.mkdtemp(prefix="fdylka_demo_"))

# %% A tiny synthetic corpus: three classes, one to three events per clip
spec = SynthSpec(clip_count=4, classes=DESED_CLASSES[:3], seed=7)
res = synth_generate(spec, work / "synth")
print("clips:", res.clip_ids)
for e in res.events[:5]:
    print(f"  {e.clip_id}  {e.onset:6.3f}-{e.offset:6.3f}s  {e.label}")

# %% Log-mel features: 10 s at 16 kHz gives 1001 frames of 128 bands
feats = {c: featurize_file(res.audio_dir / f"{c}.wav") for c in res.clip_ids}
first = feats[res.clip_ids[0]]
print("feature shape:", first.shape, "range:", first.min().round(2), first.max().round(2))

# Normalization statistics are pooled over the whole corpus, not per clip.
stats = corpus_stats(feats.values())
x = normalize(first, stats)
print(f"corpus mean {stats.mean:.3f}, std {stats.std:.3f}; normalized clip mean {x.mean():.3f}")

# %% Frame targets live on the 250-frame output grid (40 ms per frame)
classes = spec.classes
clip = res.clip_ids[0]
events = [e for e in res.events if e.clip_id == clip]
targets = encode_events(events, classes)
print("target grid:", targets.shape, "active frames per class:", targets.sum(axis=0))

# %% Decoding thresholds, median-filters and converts runs back into events
decoded = decode(targets, classes, DecodeConfig(), clip)
for e in decoded:
    print(f"  decoded {e.onset:6.3f}-{e.offset:6.3f}s  {e.label}")
print("event F1 against the annotation:", event_f1(events, decoded).f1)

# A noisy prediction: flip 5% of the frames and see the median filter cope.
rng = np.random.default_rng(0)
noisy = np.abs(targets - (rng.random(targets.shape) < 0.05))
print("F1 after 5% frame noise:", round(event_f1(events, decode(noisy, classes, clip_id=clip)).f1, 3))
