"""Class activation heatmaps from a quickly trained classifier.

Run: python3 demos/06_activation_maps.py   (about two minutes on CPU)
"""

from pathlib import Path

import numpy as np

from papnet.classifier import ClassifierModel, TrainConfig, grad_cam, train_fold
from papnet.data import CLASS_ORDER, AugmentConfig, generate_synthetic
from papnet.imaging import RasterImage, encode_png, normalize01

out = Path(__file__).parent / "out"
out.mkdir(exist_ok=True)

samples = generate_synthetic(60, seed=21)
items = [(s.id, normalize01(s.image)[0], CLASS_ORDER.index(s.binary_label))
         for s in samples]
model = ClassifierModel(rng=np.random.default_rng(0), filters=(8, 16, 32), dense_units=16)
cfg = TrainConfig(epochs=4, batch_size=8, learning_rate=2e-3)
model, logs, preds = train_fold(model, items[:48], items[48:], cfg,
                                AugmentConfig(enabled=False), seed=5, fold=0)
print(f"final train accuracy {logs[-1].train_accuracy:.3f}")

sample_id, x, label_idx = items[48]
for cls in (0, 1):
    heat, raw = grad_cam(model, x[None, ...], target_class=cls)
    png = RasterImage((heat * 255).astype(np.uint8)[..., None])
    name = f"cam_{CLASS_ORDER[cls]}.png"
    (out / name).write_bytes(encode_png(png))
    print(f"{name}: peak {heat.max():.2f}, focus area {(heat > 0.5).mean():.2%}")
print(f"true label of the probed sample: {CLASS_ORDER[label_idx]}")
