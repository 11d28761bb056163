"""
Synthetic accident scenarios
============================

Generate one scenario, look at its temporal windows and texts, and save a
strip of frames from the three segments.
"""

from pathlib import Path

import numpy as np
from PIL import Image

from adversa.scenario import generate_scenario, partition_segments, sample_clip

out = Path("demo-output")
out.mkdir(exist_ok=True)

s = generate_scenario(7)
print("frames:", s.frames.shape)
print("annotation:", s.annotation)
for name, text in s.texts.strings().items():
    print(f"  {name:8s} {text}")

# before the accident, reasoning window, accident window
v_o, v_r, v_a = partition_segments(s)
print("segments:", v_o, v_r, v_a)

rng = np.random.default_rng(0)
strip = []
for seg in (v_o, v_r, v_a):
    clip = sample_clip(s, seg, rng)
    strip.append(np.concatenate(list(clip.frames[::5]), axis=1))
img = (np.concatenate(strip, axis=0) * 255).astype(np.uint8)
Image.fromarray(img).save(out / "scenario_strip.png")
print("wrote", out / "scenario_strip.png")
