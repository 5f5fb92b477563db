"""Bi-directional attention network for full-reference quality assessment of super-resolved images."""

from .data import ImageRecord, PatchPair, SplitSpec, extract_patches, load_annotations, load_image, split_dataset, synth_fixture
from .metrics import EvalReport, LogisticParams, evaluate, fit_logistic5, krcc, plcc, psnr, rmse, srcc, ssim
from .model import MODES, ModelConfig, ModelParams, forward, init_model, probe_features
from .tensor import Tensor, backward
from .train import TrainConfig, TrainLog, load_model, predict_images, save_model, sgd_step, train

__version__ = "0.1.0"
