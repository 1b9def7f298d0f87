"""Binary cell classifier: three conv+pool blocks, a 128-unit dense layer with
dropout, and a 2-way softmax head, trained fold-by-fold with Adam + L2.

Also hosts the cross-validation driver and gradient-weighted class activation
maps computed from the last pooled conv feature map.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import checkpoint, evaluation
from .data import (ABNORMAL, CLASS_ORDER, AugmentConfig, FoldPlan, ImageSample,
                   augment, derive_rng)
from .imaging import RasterImage, apply_mask, normalize01, resize_bilinear, resize_bilinear_float
from .optim import AdamState, LossValue, adam_step, l2_penalty, softmax_cross_entropy
from .tensor import (LayerParams, Tensor, conv2d_backward, conv2d_forward,
                     conv2d_forward_cols, conv_params,
                     dense_backward, dense_forward, dense_params, dropout,
                     glorot_uniform, maxpool2_backward, maxpool2_forward, relu,
                     relu_backward)
from .unet import UNetModel, UNetTrainConfig, predict_mask, unet_train

CNN_MAGIC = "PAPCNN01"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    l2_lambda: float = 1e-4


@dataclass(frozen=True)
class EpochLog:
    fold: int
    epoch: int
    train_loss: float
    train_accuracy: float
    val_accuracy: float


@dataclass(frozen=True)
class Prediction:
    sample_id: str
    probabilities: tuple[float, float]  # (Normal, Abnormal), sums to 1
    predicted: str

    @staticmethod
    def from_probs(sample_id: str, probs) -> "Prediction":
        # ties go to Abnormal: a coin-flip must not read as healthy
        label = ABNORMAL if probs[1] >= probs[0] else CLASS_ORDER[0]
        return Prediction(sample_id, (float(probs[0]), float(probs[1])), label)


class ClassifierModel:
    def __init__(self, rng: np.random.Generator | None = None,
                 filters: tuple[int, int, int] = (32, 64, 128), dense_units: int = 128,
                 in_channels: int = 3, input_size: int = 128, num_classes: int = 2,
                 dropout_rate: float = 0.5, dtype=np.float32):
        if input_size % 8:
            raise ValueError(f"input_size must be divisible by 8, got {input_size}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.filters = tuple(filters)
        self.dense_units = dense_units
        self.in_channels = in_channels
        self.input_size = input_size
        self.num_classes = num_classes
        self.dropout_rate = dropout_rate
        f1, f2, f3 = self.filters
        self.conv1 = conv_params(in_channels, f1, 3, rng, dtype)
        self.conv2 = conv_params(f1, f2, 3, rng, dtype)
        self.conv3 = conv_params(f2, f3, 3, rng, dtype)
        self.flat_features = f3 * (input_size // 8) ** 2
        self.dense1 = dense_params(self.flat_features, dense_units, rng, dtype)
        # the softmax head does not feed a ReLU: Glorot keeps early logits tame
        w2 = glorot_uniform((dense_units, num_classes), dense_units, num_classes, rng, dtype)
        self.dense2 = LayerParams(w2, np.zeros(num_classes, dtype=dtype))

    def params(self) -> list[LayerParams]:
        return [self.conv1, self.conv2, self.conv3, self.dense1, self.dense2]

    def parameter_count(self) -> int:
        return sum(p.weights.size + p.bias.size for p in self.params())


def classify_forward(model: ClassifierModel, batch: Tensor, training: bool = False,
                     rng: np.random.Generator | None = None):
    """Returns (logits, cache); the cache keeps what backward and CAM need,
    including the final pooled conv activations."""
    if batch.ndim != 4 or batch.shape[1] != model.in_channels:
        raise ValueError(
            f"expected input shaped (B, {model.in_channels}, H, W), got {batch.shape}")
    if training and rng is None:
        raise ValueError("training-mode forward needs an rng for dropout")
    cache = {"x": batch, "training": training}
    cur = batch
    for name, conv in (("c1", model.conv1), ("c2", model.conv2), ("c3", model.conv3)):
        z, cols = conv2d_forward_cols(cur, conv, 1, 1)
        a = relu(z)
        pooled, idx = maxpool2_forward(a)
        cache[name] = (cur, z, a.shape, idx, cols)
        cur = pooled
    cache["cam_activations"] = cur  # (B, f3, S/8, S/8), post-ReLU post-pool
    flat = cur.reshape(cur.shape[0], -1)
    cache["flat"] = flat
    z4 = dense_forward(flat, model.dense1)
    a4 = relu(z4)
    dropped, mask = dropout(a4, model.dropout_rate, rng, training)
    cache["d1"] = (z4, a4, dropped, mask)
    logits = dense_forward(dropped, model.dense2)
    return logits, cache


def classify_backward(model: ClassifierModel, cache, grad_logits: Tensor,
                      need_input_grad: bool = False) -> Tensor | None:
    """Fills parameter grads; returns the input-batch gradient only on request."""
    z4, a4, dropped, mask = cache["d1"]
    g = dense_backward(dropped, model.dense2, grad_logits)
    g = g * mask
    g = relu_backward(z4, g)
    g = dense_backward(cache["flat"], model.dense1, g)
    g = g.reshape(cache["cam_activations"].shape)
    for name, conv in (("c3", model.conv3), ("c2", model.conv2), ("c1", model.conv1)):
        x_in, z, a_shape, idx, cols = cache[name]
        g = maxpool2_backward(idx, g, a_shape)
        g = relu_backward(z, g)
        g = conv2d_backward(x_in, conv, g, 1, 1, cols=cols,
                            need_input_grad=need_input_grad or name != "c1")
    return g


def _grad_at_cam(model: ClassifierModel, cache, grad_logits: Tensor) -> Tensor:
    """Gradient of the selected logits w.r.t. the pooled conv3 activations,
    computed without touching any parameter grad buffers."""
    z4, _, _, mask = cache["d1"]
    g = grad_logits @ model.dense2.weights.T
    g = g * mask
    g = relu_backward(z4, g)
    g = g @ model.dense1.weights.T
    return g.reshape(cache["cam_activations"].shape)


def grad_cam(model: ClassifierModel, image: Tensor, target_class: int):
    """Gradient-weighted activation map for one image.

    Returns (heatmap, raw_map): the raw map is the ReLU'd, max-normalized
    channel combination at feature-map resolution; the heatmap is its
    bilinear upsample to the input resolution, in [0, 1].
    """
    if image.ndim != 4 or image.shape[0] != 1:
        raise ValueError(f"grad_cam expects a single image (1, C, H, W), got {image.shape}")
    if target_class not in range(model.num_classes):
        raise ValueError(f"target_class must be in [0, {model.num_classes}), got {target_class}")
    logits, cache = classify_forward(model, image, training=False)
    grad_logits = np.zeros_like(logits)
    grad_logits[0, target_class] = 1.0
    grads = _grad_at_cam(model, cache, grad_logits)
    activations = cache["cam_activations"][0]
    weights = grads[0].mean(axis=(1, 2))
    raw = np.maximum((weights[:, None, None] * activations).sum(axis=0), 0.0)
    peak = raw.max()
    if peak > 0:
        raw = raw / peak
    heat = resize_bilinear_float(raw.astype(np.float64), image.shape[2], image.shape[3])
    return np.clip(heat, 0.0, 1.0).astype(np.float32), raw.astype(np.float32)


def _as_batch(items: list[tuple[str, Tensor, int]], picks, num_classes: int,
              aug_cfg: AugmentConfig | None, seed: int, fold: int, epoch: int):
    xs = []
    onehot = np.zeros((len(picks), num_classes), dtype=np.float32)
    for row, i in enumerate(picks):
        sid, x, label_idx = items[i]
        if aug_cfg is not None and aug_cfg.enabled:
            x = augment(x, aug_cfg, derive_rng(seed, fold, epoch, sid))
        xs.append(x[None, ...])
        onehot[row, label_idx] = 1.0
    return np.concatenate(xs, axis=0), onehot


def _accuracy(logits: Tensor, onehot: Tensor) -> float:
    # replicate the tie-to-Abnormal rule used by Prediction
    pred = np.where(logits[:, 1] >= logits[:, 0], 1, 0)
    truth = onehot.argmax(axis=1)
    return float((pred == truth).mean())


def _predict_batched(model: ClassifierModel, items, batch_size: int) -> list[Prediction]:
    preds = []
    for start in range(0, len(items), batch_size):
        chunk = items[start:start + batch_size]
        x = np.concatenate([it[1][None, ...] for it in chunk], axis=0)
        logits, _ = classify_forward(model, x, training=False)
        shifted = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(shifted)
        probs /= probs.sum(axis=1, keepdims=True)
        for it, p in zip(chunk, probs):
            preds.append(Prediction.from_probs(it[0], p))
    return preds


def train_fold(model: ClassifierModel, train_items: list[tuple[str, Tensor, int]],
               val_items: list[tuple[str, Tensor, int]], train_cfg: TrainConfig,
               aug_cfg: AugmentConfig, seed: int, fold: int
               ) -> tuple[ClassifierModel, list[EpochLog], list[Prediction]]:
    """One cross-validation fold: shuffled mini-batch Adam training with
    augmentation on the training split only, then final val predictions.

    ``train_items``/``val_items`` are (sample_id, CHW tensor in [0,1],
    class index) triples and must be disjoint by id.
    """
    if not train_items or not val_items:
        raise ValueError("train and val splits must both be non-empty")
    train_ids = {sid for sid, _, _ in train_items}
    val_ids = [sid for sid, _, _ in val_items]
    overlap = train_ids & set(val_ids)
    if overlap:
        raise ValueError(f"train/val splits share ids, e.g. {sorted(overlap)[:3]}")

    work = list(train_items)
    if aug_cfg.balance_minority:
        counts = {}
        for _, _, label_idx in work:
            counts[label_idx] = counts.get(label_idx, 0) + 1
        if len(counts) == 2:
            minority = min(counts, key=counts.get)
            pool = [it for it in work if it[2] == minority]
            deficit = max(counts.values()) - counts[minority]
            for j in range(deficit):
                sid, x, label_idx = pool[j % len(pool)]
                work.append((f"{sid}#dup{j}", x, label_idx))

    params = model.params()
    state = AdamState(params, learning_rate=train_cfg.learning_rate)
    logs = []
    n = len(work)
    for epoch in range(train_cfg.epochs):
        order = derive_rng(seed, fold, epoch, "shuffle").permutation(n)
        losses = []
        accs = []
        for batch_no, start in enumerate(range(0, n, train_cfg.batch_size)):
            picks = order[start:start + train_cfg.batch_size]
            x, onehot = _as_batch(work, picks, model.num_classes, aug_cfg, seed, fold, epoch)
            drop_rng = derive_rng(seed, fold, epoch, batch_no, "dropout")
            logits, cache = classify_forward(model, x, training=True, rng=drop_rng)
            data_loss, grad_logits = softmax_cross_entropy(logits, onehot)
            for p in params:
                p.zero_grads()
            classify_backward(model, cache, grad_logits)
            loss = LossValue(data_loss, l2_penalty(params, train_cfg.l2_lambda))
            adam_step(params, state)
            losses.append(loss.total)
            accs.append(_accuracy(logits, onehot))
        val_preds = _predict_batched(model, val_items, train_cfg.batch_size)
        truth = {sid: label_idx for sid, _, label_idx in val_items}
        val_acc = float(np.mean([
            CLASS_ORDER.index(p.predicted) == truth[p.sample_id] for p in val_preds]))
        logs.append(EpochLog(fold=fold, epoch=epoch, train_loss=float(np.mean(losses)),
                             train_accuracy=float(np.mean(accs)), val_accuracy=val_acc))
    final_preds = _predict_batched(model, val_items, train_cfg.batch_size)
    return model, logs, final_preds


@dataclass(frozen=True)
class CrossvalConfig:
    seed: int = 0
    input_size: int = 128
    filters: tuple[int, int, int] = (32, 64, 128)
    dense_units: int = 128
    dropout_rate: float = 0.5
    train: TrainConfig = TrainConfig()
    aug: AugmentConfig = AugmentConfig()
    unet_base_width: int = 16
    unet_train: UNetTrainConfig = UNetTrainConfig()
    refine_masks: bool = True
    workers: int | None = None


@dataclass
class FoldArtifacts:
    fold: int
    model: ClassifierModel
    unet: UNetModel | None
    val_masks: dict[str, object]  # sample id -> BinaryMask (segmented mode only)
    logs: list[EpochLog]
    predictions: list[Prediction]


@dataclass
class CrossvalResult:
    report: evaluation.RunReport
    folds: list[FoldArtifacts]


def _prepare_rgb(image: RasterImage, input_size: int) -> RasterImage:
    return resize_bilinear(image, input_size, input_size)


def _run_one_fold(fold: int, samples: list[ImageSample], plan: FoldPlan, mode: str,
                  cfg: CrossvalConfig, resized: dict[str, RasterImage]) -> FoldArtifacts:
    val_ids = plan.test_ids(fold)
    train_samples = [s for s in samples if s.id not in val_ids]
    val_samples = [s for s in samples if s.id in val_ids]

    unet_model = None
    val_masks: dict[str, object] = {}
    if mode == "segmented":
        supervised = [s for s in train_samples if s.truth_mask is not None]
        if not supervised:
            raise ValueError(
                f"fold {fold}: segmented mode needs truth masks in the training partition")
        # every fold starts from the same seed-derived init so fold-to-fold
        # differences reflect the data split, not init luck
        unet_model = UNetModel(base_width=cfg.unet_base_width,
                               rng=derive_rng(cfg.seed, "unet-init"))
        unet_model, _ = unet_train(unet_model, supervised, cfg.unet_train,
                                   seed=_stable_fold_seed(cfg.seed, fold))

        def masked_input(sample: ImageSample) -> Tensor:
            mask = predict_mask(unet_model, sample.image, cfg.unet_train.input_size,
                                cfg.unet_train.blur_sigma, cfg.unet_train.threshold,
                                cfg.refine_masks)
            if sample.id in val_ids:
                val_masks[sample.id] = mask
            return normalize01(apply_mask(resized[sample.id], mask))[0]

        make_input = masked_input
    else:
        def make_input(sample: ImageSample) -> Tensor:
            return normalize01(resized[sample.id])[0]

    label_idx = {s.id: CLASS_ORDER.index(s.binary_label) for s in samples}
    train_items = [(s.id, make_input(s), label_idx[s.id]) for s in train_samples]
    val_items = [(s.id, make_input(s), label_idx[s.id]) for s in val_samples]

    model = ClassifierModel(rng=derive_rng(cfg.seed, "classifier-init"),
                            filters=cfg.filters, dense_units=cfg.dense_units,
                            input_size=cfg.input_size, dropout_rate=cfg.dropout_rate)
    model, logs, preds = train_fold(model, train_items, val_items, cfg.train, cfg.aug,
                                    cfg.seed, fold)
    return FoldArtifacts(fold=fold, model=model, unet=unet_model, val_masks=val_masks,
                         logs=logs, predictions=preds)


def _stable_fold_seed(seed: int, fold: int) -> int:
    return (seed * 1000003 + fold) & 0x7FFFFFFF


def run_crossval(samples: list[ImageSample], fold_plan: FoldPlan, pipeline_mode: str,
                 cfg: CrossvalConfig) -> CrossvalResult:
    """Train and evaluate one model per fold; pool and average the results.

    In segmented mode each fold trains its own mask predictor on that fold's
    training partition (truth masks supervise only the segmenter; the
    classifier sees masked images, never the truth masks).
    """
    if pipeline_mode not in ("raw", "segmented"):
        raise ValueError(f"pipeline_mode must be 'raw' or 'segmented', got {pipeline_mode!r}")
    ids = {s.id for s in samples}
    if ids != set(fold_plan.assignment):
        raise ValueError("fold plan does not cover exactly the provided samples")

    resized = {s.id: _prepare_rgb(s.image, cfg.input_size) for s in samples}
    truth_label = {s.id: s.binary_label for s in samples}

    folds = list(range(fold_plan.k))
    n_workers = cfg.workers or 1
    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=min(n_workers, fold_plan.k)) as pool:
            artifacts = list(pool.map(
                lambda f: _run_one_fold(f, samples, fold_plan, pipeline_mode, cfg, resized),
                folds))
    else:
        artifacts = [_run_one_fold(f, samples, fold_plan, pipeline_mode, cfg, resized)
                     for f in folds]

    fold_results = []
    epoch_logs = []
    for art in artifacts:
        matrix = evaluation.confusion(art.predictions, truth_label)
        fold_results.append(evaluation.FoldResult(
            fold=art.fold, confusion=matrix,
            metrics=evaluation.metrics_from_matrix(matrix)))
        epoch_logs.extend(art.logs)
    report = evaluation.aggregate(fold_results, mode=pipeline_mode,
                                  fold_plan_seed=fold_plan.seed, k=fold_plan.k,
                                  epoch_logs=epoch_logs)
    return CrossvalResult(report=report, folds=artifacts)


def save_classifier(model: ClassifierModel, path) -> None:
    tensors = []
    for p in model.params():
        tensors.extend((p.weights, p.bias))
    config = [model.in_channels, model.input_size, *model.filters,
              model.dense_units, model.num_classes]
    checkpoint.save_checkpoint(path, CNN_MAGIC, config, tensors)


def load_classifier(path) -> ClassifierModel:
    config, tensors = checkpoint.load_checkpoint(path, CNN_MAGIC)
    in_channels, input_size, f1, f2, f3, dense_units, num_classes = config
    model = ClassifierModel(filters=(f1, f2, f3), dense_units=dense_units,
                            in_channels=in_channels, input_size=input_size,
                            num_classes=num_classes)
    params = model.params()
    if len(tensors) != 2 * len(params):
        raise ValueError(f"checkpoint holds {len(tensors)} tensors, expected {2 * len(params)}")
    for i, p in enumerate(params):
        w, b = tensors[2 * i], tensors[2 * i + 1]
        if w.shape != p.weights.shape or b.shape != p.bias.shape:
            raise ValueError(f"checkpoint tensor {i} shape mismatch: {w.shape} vs {p.weights.shape}")
        p.weights[...] = w
        p.bias[...] = b
    return model
