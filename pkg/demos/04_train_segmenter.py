"""Train a small mask predictor on synthetic cells and score it on held-out
images.

Run: python3 demos/04_train_segmenter.py   (about a minute on CPU)
"""

import numpy as np

from papnet.data import generate_synthetic
from papnet.imaging import BinaryMask
from papnet.unet import (UNetModel, UNetTrainConfig, predict_mask, prepare_target,
                         seg_metrics, unet_train)

samples = generate_synthetic(60, seed=9)
train, held_out = samples[:48], samples[48:]

model = UNetModel(base_width=4, rng=np.random.default_rng(0))
cfg = UNetTrainConfig(epochs=5, batch_size=8, learning_rate=3e-3, blur_sigma=None)
model, log = unet_train(model, train, cfg, seed=1)
for entry in log:
    print(f"epoch {entry['epoch']}: loss {entry['loss']:.4f} dice {entry['dice']:.4f}")

dices = []
for s in held_out:
    mask = predict_mask(model, s.image, blur_sigma=None)
    truth = BinaryMask((prepare_target(s.truth_mask)[0, 0] * 255).astype(np.uint8))
    dices.append(seg_metrics(mask, truth).dice)
print(f"held-out dice: mean {np.mean(dices):.4f}, min {np.min(dices):.4f}")
