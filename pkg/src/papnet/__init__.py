"""Segment-then-classify engine for cervical-cell images.

Numpy-only numerics: the convolution, pooling, dense, dropout, and Adam
kernels live in this package and are verified against brute-force oracles in
the test suite.
"""

from .classifier import (ClassifierModel, CrossvalConfig, EpochLog, Prediction,
                         TrainConfig, classify_forward, grad_cam, load_classifier,
                         run_crossval, save_classifier, train_fold)
from .data import (ABNORMAL, CLASS_ORDER, NORMAL, AugmentConfig, FoldPlan, ImageSample,
                   augment, derive_rng, generate_synthetic, ingest_herlev, load_tree,
                   plan_stratified_kfold, write_synthetic_tree)
from .evaluation import (ConfusionMatrix2, FoldResult, MetricsReport, RunReport,
                         aggregate, compare_runs, confusion, metrics_from_matrix)
from .imaging import (BinaryMask, RasterImage, adaptive_threshold, apply_mask,
                      decode_image, encode_png, gaussian_blur, morph, normalize01,
                      rescale255, resize_bilinear, to_grayscale)
from .optim import (AdamState, LossValue, adam_step, binary_cross_entropy_pixelwise,
                    finite_difference_check, l2_penalty, softmax_cross_entropy)
from .tensor import (LayerParams, Tensor, conv2d_backward, conv2d_forward, dense_backward,
                     dense_forward, dropout, maxpool2_backward, maxpool2_forward, relu,
                     relu_backward, sigmoid)
from .unet import (SegMetrics, UNetModel, UNetTrainConfig, binarize, load_unet,
                   predict_mask, save_unet, seg_metrics, unet_forward, unet_train)

__version__ = "0.1.0"
