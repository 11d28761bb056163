"""
Abductive text-video alignment
==============================

Train the small video/text encoders for a few hundred steps and ask which of
four texts best explains a held-out reasoning clip.
"""

import numpy as np
import torch

from adversa.abductive import AbductiveCLIP, ClipCorpus, ClipTrainConfig, retrieval_accuracy, train_abductive_clip
from adversa.scenario import corpus_seeds

torch.manual_seed(0)
corpus = ClipCorpus.generate(corpus_seeds(0, 160))
train, held = corpus.subset(range(128)), corpus.subset(range(128, 160))

model = AbductiveCLIP()
print("before training:", retrieval_accuracy(model, held, seed=0))

model, history = train_abductive_clip(train, ClipTrainConfig(steps=300, log_every=50), model)
for row in history:
    print(f"step {row['step']:4d}  loss {row['total']:.3f}  tau {row['tau']:.3f}")

# chance is 0.25: t_r against three distractor texts
print("after training:", retrieval_accuracy(model, held, seed=0))
