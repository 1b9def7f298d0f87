"""Classical preprocessing chain on one synthetic cell image: grayscale,
blur, adaptive threshold, morphological cleanup, and masking — a no-learning
baseline segmentation compared against the ground truth.

Run: python3 demos/02_classical_imaging.py  (writes PNGs into demos/out/)
"""

from pathlib import Path

import numpy as np

from papnet.data import generate_synthetic
from papnet.imaging import (BinaryMask, adaptive_threshold, apply_mask, encode_png,
                            gaussian_blur, mask_to_image, morph, resize_bilinear,
                            to_grayscale)
from papnet.unet import seg_metrics

out = Path(__file__).parent / "out"
out.mkdir(exist_ok=True)

sample = generate_synthetic(1, seed=7)[0]
img = resize_bilinear(sample.image, 128, 128)
(out / "original.png").write_bytes(encode_png(img))

gray = to_grayscale(img)
blurred = gaussian_blur(gray, sigma=1.0)
(out / "blurred.png").write_bytes(encode_png(blurred))

# threshold marks pixels brighter than their neighborhood (the background);
# the cell is the complement, cleaned up by open+close
bright = adaptive_threshold(blurred, block=31, offset_c=-8.0)
cell = BinaryMask((255 - bright.values).astype(np.uint8))
cell = morph(morph(cell, "open", 2), "close", 2)
(out / "classical_mask.png").write_bytes(encode_png(mask_to_image(cell)))
(out / "truth_mask.png").write_bytes(encode_png(mask_to_image(sample.truth_mask)))
(out / "masked.png").write_bytes(encode_png(apply_mask(img, cell)))

quality = seg_metrics(cell, sample.truth_mask)
print(f"classical segmentation vs truth: dice {quality.dice:.3f}, iou {quality.iou:.3f}")
print(f"wrote {len(list(out.glob('*.png')))} images to {out}")
