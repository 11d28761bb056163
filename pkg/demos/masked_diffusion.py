"""
Object-aware masked diffusion
=============================

Train a small denoiser for a few steps, then edit a reasoning clip with the
prevention text and measure how much of the change stays inside the boxes.
"""

import numpy as np
import torch

from adversa.abductive import TextEncoder
from adversa.metrics import background_fidelity
from adversa.oavd import GenerationRequest, TrainConfig, generate, new_model, train_oavd
from adversa.scenario import clip_tracks, corpus_seeds, generate_scenario, partition_segments, sample_clip
from adversa.unet import UNetConfig

torch.manual_seed(0)
scenarios = [generate_scenario(s) for s in corpus_seeds(0, 16)]

text = TextEncoder()
unet = UNetConfig(base_channels=16, channel_mult=(1, 2), heads=2, context_dim=text.embed.embedding_dim)
cfg = TrainConfig(steps=40, batch_size=2, log_every=10)
model = new_model(text, unet, cfg)
for row in train_oavd(scenarios[:12], model, cfg):
    print(row)

s = scenarios[-1]
_, v_r, _ = partition_segments(s)
clip = sample_clip(s, v_r, np.random.default_rng(0))
tracks = clip_tracks(s.tracks, clip)

# low strength keeps most of the source clip
for strength in (0.3, 1.0):
    req = GenerationRequest(clip.frames, s.texts.t_p, tracks, steps=10, strength=strength, seed=0)
    edited = generate(req, model)
    bg, obj = background_fidelity(clip.frames, edited, tracks)
    print(f"strength {strength}: background error {bg:.3f}, object error {obj:.3f}")
