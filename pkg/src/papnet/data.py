"""Dataset handling: Herlev ingestion, synthetic generation, fold planning,
and training-time augmentation.

Sample trees on disk are class folders of images with optional ``-d``
companion files carrying ground-truth masks. Every random draw goes through
``derive_rng`` so results never depend on iteration or thread order.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imaging import BinaryMask, RasterImage, decode_image, encode_png, mask_to_image
from .tensor import Tensor

NORMAL = "Normal"
ABNORMAL = "Abnormal"
CLASS_ORDER = (NORMAL, ABNORMAL)  # index 1 (Abnormal) is the positive class

HERLEV_CLASS_MAP = {
    "normal_superficiel": NORMAL,
    "normal_intermediate": NORMAL,
    "normal_columnar": NORMAL,
    "light_dysplastic": ABNORMAL,
    "moderate_dysplastic": ABNORMAL,
    "severe_dysplastic": ABNORMAL,
    "carcinoma_in_situ": ABNORMAL,
}
HERLEV_EXPECTED = {NORMAL: 242, ABNORMAL: 675}

SYNTHETIC_ORIGIN = "synthetic"
SYNTHETIC_DIRS = {NORMAL: "synthetic_normal", ABNORMAL: "synthetic_abnormal"}

# nucleus/cytoplasm area ratio above which a synthetic cell counts as abnormal
NUCLEUS_RATIO_THRESHOLD = 0.35

_IMAGE_SUFFIXES = (".bmp", ".png")


def _stable_key(value) -> int:
    """64-bit key for seeding that is stable across processes and runs."""
    if isinstance(value, (int, np.integer)):
        return int(value) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.blake2b(str(value).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def derive_rng(*keys) -> np.random.Generator:
    """Generator seeded from a tuple of keys (ints or strings).

    Workers derive their stream as derive_rng(global_seed, fold, epoch,
    sample_id), so parallel scheduling never changes any result.
    """
    return np.random.default_rng(np.random.SeedSequence([_stable_key(k) for k in keys]))


@dataclass
class ImageSample:
    """One cell image with its binary label and optional ground-truth mask."""
    id: str
    image: RasterImage
    binary_label: str
    origin_class: str
    truth_mask: BinaryMask | None = None

    def __post_init__(self):
        if self.binary_label not in CLASS_ORDER:
            raise ValueError(f"binary_label must be one of {CLASS_ORDER}, got {self.binary_label!r}")
        expected = HERLEV_CLASS_MAP.get(self.origin_class)
        if expected is not None and expected != self.binary_label:
            raise ValueError(
                f"sample {self.id}: origin class {self.origin_class!r} maps to "
                f"{expected}, not {self.binary_label}")
        if self.truth_mask is not None:
            if (self.truth_mask.height, self.truth_mask.width) != (self.image.height, self.image.width):
                raise ValueError(
                    f"sample {self.id}: mask {self.truth_mask.height}x{self.truth_mask.width} "
                    f"does not match image {self.image.height}x{self.image.width}")


@dataclass(frozen=True)
class FoldPlan:
    """Deterministic stratified assignment of every sample id to one fold."""
    k: int
    assignment: dict[str, int]
    seed: int

    def fold_of(self, sample_id: str) -> int:
        return self.assignment[sample_id]

    def test_ids(self, fold: int) -> set[str]:
        return {sid for sid, f in self.assignment.items() if f == fold}

    def train_ids(self, fold: int) -> set[str]:
        return {sid for sid, f in self.assignment.items() if f != fold}


@dataclass(frozen=True)
class AugmentConfig:
    hflip_p: float = 0.5
    vflip_p: float = 0.5
    rotations: tuple[int, ...] = (0, 90, 180, 270)
    contrast_range: tuple[float, float] = (0.8, 1.2)
    enabled: bool = True
    balance_minority: bool = False

    def __post_init__(self):
        if not (0.0 <= self.hflip_p <= 1.0 and 0.0 <= self.vflip_p <= 1.0):
            raise ValueError(f"flip probabilities must be in [0,1], got {self.hflip_p}, {self.vflip_p}")
        if not self.rotations or any(r not in (0, 90, 180, 270) for r in self.rotations):
            raise ValueError(f"rotations must be a non-empty subset of 0/90/180/270, got {self.rotations}")
        lo, hi = self.contrast_range
        if not (0 < lo <= 1.0 <= hi):
            raise ValueError(f"contrast_range must satisfy 0 < lo <= 1 <= hi, got {self.contrast_range}")


def _list_images(folder: Path) -> list[Path]:
    files = [p for p in sorted(folder.iterdir())
             if p.suffix.lower() in _IMAGE_SUFFIXES and not p.stem.lower().endswith("-d")]
    return files


def _companion_mask_path(image_path: Path) -> Path | None:
    for suffix in (".bmp", ".BMP", ".png", ".PNG"):
        cand = image_path.with_name(image_path.stem + "-d" + suffix)
        if cand.exists():
            return cand
    return None


def mask_from_annotation(annot: RasterImage) -> BinaryMask:
    """Binarize an annotation image: background is the dominant border color,
    everything else is foreground (255)."""
    px = annot.pixels
    border = np.concatenate([px[0], px[-1], px[:, 0], px[:, -1]], axis=0)
    colors, counts = np.unique(border.reshape(-1, annot.channels), axis=0, return_counts=True)
    background = colors[counts.argmax()]
    fg = np.any(px != background, axis=2)
    return BinaryMask(np.where(fg, 255, 0).astype(np.uint8))


def _load_sample(image_path: Path, sample_id: str, origin_class: str,
                 binary_label: str) -> ImageSample:
    img = decode_image(image_path.read_bytes())
    mask = None
    mask_path = _companion_mask_path(image_path)
    if mask_path is not None:
        mask = mask_from_annotation(decode_image(mask_path.read_bytes()))
    return ImageSample(sample_id, img, binary_label, origin_class, mask)


def ingest_herlev(root) -> tuple[list[ImageSample], dict]:
    """Load the seven-class Herlev tree, mapping classes to Normal/Abnormal.

    Returns (samples, manifest). A count differing from the published
    242/675 split is a manifest warning, not an error.
    """
    root = Path(root)
    missing = [name for name in HERLEV_CLASS_MAP if not (root / name).is_dir()]
    if missing:
        raise ValueError(f"not a Herlev tree: {root} is missing folders {sorted(missing)}")
    samples = []
    entries = []
    for origin in sorted(HERLEV_CLASS_MAP):
        label = HERLEV_CLASS_MAP[origin]
        for path in _list_images(root / origin):
            sid = f"{origin}/{path.stem}"
            sample = _load_sample(path, sid, origin, label)
            samples.append(sample)
            entries.append({
                "id": sid,
                "relative_path": str(path.relative_to(root)),
                "origin_class": origin,
                "binary_label": label,
                "has_truth_mask": sample.truth_mask is not None,
            })
    manifest = build_manifest(entries, expected=HERLEV_EXPECTED)
    return samples, manifest


def build_manifest(entries: list[dict], expected: dict | None = None) -> dict:
    per_class = {}
    binary = {NORMAL: 0, ABNORMAL: 0}
    for e in entries:
        per_class[e["origin_class"]] = per_class.get(e["origin_class"], 0) + 1
        binary[e["binary_label"]] += 1
    warnings = []
    if expected:
        for label, want in expected.items():
            if binary[label] != want:
                warnings.append(
                    f"{label} count {binary[label]} differs from expected {want}")
    return {
        "samples": entries,
        "counts_by_origin": per_class,
        "counts_by_label": binary,
        "total": len(entries),
        "warnings": warnings,
    }


def write_manifest(manifest: dict, path) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _ellipse_interior(h: int, w: int, cx: float, cy: float, a: float, b: float,
                      theta: float) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w]
    dx = xs - cx
    dy = ys - cy
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _textured_background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Smooth low-frequency texture plus fine grain, float in [0, 255]."""
    from .imaging import resize_bilinear_float

    base = rng.uniform(150.0, 200.0)
    coarse = resize_bilinear_float(rng.normal(0.0, 14.0, size=(8, 8)), h, w)
    grain = rng.normal(0.0, 5.0, size=(h, w))
    return base + coarse + grain


def generate_synthetic(n: int, seed: int, size: int = 128) -> list[ImageSample]:
    """Desk-scale stand-in cells: one elliptical cytoplasm with a darker
    nucleus on a textured background.

    The label is fixed analytically before rendering: Abnormal iff the
    nucleus/cytoplasm area ratio exceeds NUCLEUS_RATIO_THRESHOLD. The truth
    mask is the cytoplasm ellipse.
    """
    if n <= 0:
        raise ValueError(f"sample count must be positive, got {n}")
    samples = []
    for i in range(n):
        rng = derive_rng(seed, "synthetic", i)
        cx = size / 2 + rng.uniform(-8, 8)
        cy = size / 2 + rng.uniform(-8, 8)
        a_c = rng.uniform(30.0, 44.0)
        b_c = rng.uniform(30.0, 44.0)
        theta_c = rng.uniform(0.0, np.pi)
        s_a = rng.uniform(0.30, 0.90)
        s_b = rng.uniform(0.30, 0.90)
        # keep a visible margin around the decision threshold so the label is
        # learnable from the rendered pixels, not lost to rasterization noise
        while 0.32 < s_a * s_b < 0.39:
            s_a = rng.uniform(0.30, 0.90)
            s_b = rng.uniform(0.30, 0.90)
        ratio = s_a * s_b  # pi * a * b cancels
        label = ABNORMAL if ratio > NUCLEUS_RATIO_THRESHOLD else NORMAL
        theta_n = rng.uniform(0.0, np.pi)
        wiggle = 0.4 * (1.0 - max(s_a, s_b)) * min(a_c, b_c)
        ncx = cx + rng.uniform(-wiggle, wiggle)
        ncy = cy + rng.uniform(-wiggle, wiggle)

        cyto = _ellipse_interior(size, size, cx, cy, a_c, b_c, theta_c)
        nucleus = _ellipse_interior(size, size, ncx, ncy, a_c * s_a, b_c * s_b, theta_n) & cyto

        img = np.empty((size, size, 3), dtype=np.float64)
        background = _textured_background(rng, size, size)
        # pale background, pink-ish cytoplasm, dark purple nucleus
        tints = ((1.00, 1.00, 0.98), (0.88, 0.62, 0.75), (0.40, 0.28, 0.50))
        for ch in range(3):
            img[..., ch] = background * tints[0][ch]
            img[..., ch][cyto] = background[cyto] * tints[1][ch]
            img[..., ch][nucleus] = background[nucleus] * tints[2][ch]
        pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)
        mask = BinaryMask(np.where(cyto, 255, 0).astype(np.uint8))
        sid = f"{SYNTHETIC_DIRS[label]}/{i:05d}"
        samples.append(ImageSample(sid, RasterImage(pixels), label, SYNTHETIC_ORIGIN, mask))
    return samples


def write_synthetic_tree(samples: list[ImageSample], root) -> dict:
    """Write samples as a PNG tree mirroring the Herlev layout (class folders,
    ``-d`` mask companions) plus a manifest.json."""
    root = Path(root)
    entries = []
    for s in samples:
        rel = Path(s.id + ".png")
        path = root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_png(s.image))
        if s.truth_mask is not None:
            mask_path = path.with_name(path.stem + "-d.png")
            mask_path.write_bytes(encode_png(mask_to_image(s.truth_mask)))
        entries.append({
            "id": s.id,
            "relative_path": str(rel),
            "origin_class": s.origin_class,
            "binary_label": s.binary_label,
            "has_truth_mask": s.truth_mask is not None,
        })
    manifest = build_manifest(entries)
    write_manifest(manifest, root / "manifest.json")
    return manifest


def load_synthetic_tree(root) -> tuple[list[ImageSample], dict]:
    root = Path(root)
    present = [d for d in SYNTHETIC_DIRS.values() if (root / d).is_dir()]
    if not present:
        raise ValueError(f"not a synthetic tree: {root} has no {sorted(SYNTHETIC_DIRS.values())} folders")
    samples = []
    entries = []
    for label, folder in sorted(SYNTHETIC_DIRS.items()):
        if not (root / folder).is_dir():
            continue
        for path in _list_images(root / folder):
            sid = f"{folder}/{path.stem}"
            sample = _load_sample(path, sid, SYNTHETIC_ORIGIN, label)
            samples.append(sample)
            entries.append({
                "id": sid,
                "relative_path": str(path.relative_to(root)),
                "origin_class": SYNTHETIC_ORIGIN,
                "binary_label": label,
                "has_truth_mask": sample.truth_mask is not None,
            })
    return samples, build_manifest(entries)


def load_tree(root) -> tuple[list[ImageSample], dict]:
    """Load either a Herlev tree or a synthetic tree, whichever is present."""
    root = Path(root)
    if all((root / name).is_dir() for name in HERLEV_CLASS_MAP):
        return ingest_herlev(root)
    if any((root / d).is_dir() for d in SYNTHETIC_DIRS.values()):
        return load_synthetic_tree(root)
    raise ValueError(
        f"{root} is neither a Herlev tree (seven class folders) nor a "
        f"synthetic tree ({sorted(SYNTHETIC_DIRS.values())})")


def plan_stratified_kfold(samples: list[ImageSample], k: int = 5, seed: int = 0) -> FoldPlan:
    """Per-class seeded shuffle then round-robin fold assignment.

    Per-class fold counts differ by at most one; identical (seed, id set)
    always reproduces the identical plan.
    """
    if k < 2:
        raise ValueError(f"k must be at least 2, got {k}")
    by_label: dict[str, list[str]] = {}
    for s in samples:
        by_label.setdefault(s.binary_label, []).append(s.id)
    if len(set(sid for ids in by_label.values() for sid in ids)) != len(samples):
        raise ValueError("duplicate sample ids in fold planning input")
    assignment: dict[str, int] = {}
    for label in sorted(by_label):
        ids = sorted(by_label[label])
        if len(ids) < k:
            raise ValueError(
                f"class {label!r} has only {len(ids)} samples, cannot split into {k} folds")
        rng = derive_rng(seed, "foldplan", label)
        rng.shuffle(ids)
        for pos, sid in enumerate(ids):
            assignment[sid] = pos % k
    return FoldPlan(k=k, assignment=assignment, seed=seed)


def augment(x: Tensor, cfg: AugmentConfig, rng: np.random.Generator) -> Tensor:
    """Random flip / right-angle rotation / contrast jitter of a CHW tensor.

    Contrast maps v -> clamp(mean + f*(v - mean), 0, 1) around the per-image
    mean with f uniform in cfg.contrast_range. Disabled config is identity.
    """
    if x.ndim != 3:
        raise ValueError(f"augment expects a CHW tensor, got shape {x.shape}")
    if not cfg.enabled:
        return x.copy()
    out = x
    if rng.random() < cfg.hflip_p:
        out = out[:, :, ::-1]
    if rng.random() < cfg.vflip_p:
        out = out[:, ::-1, :]
    quarter_turns = cfg.rotations[rng.integers(len(cfg.rotations))] // 90
    if quarter_turns:
        out = np.rot90(out, quarter_turns, axes=(1, 2))
    f = rng.uniform(cfg.contrast_range[0], cfg.contrast_range[1])
    mean = out.mean(dtype=np.float64)
    out = np.clip(mean + f * (out.astype(np.float64) - mean), 0.0, 1.0)
    return np.ascontiguousarray(out.astype(x.dtype))
