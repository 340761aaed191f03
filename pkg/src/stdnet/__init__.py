"""Video crowd counting with dilated spatiotemporal dense blocks, in plain NumPy."""

from .blocks import BlockConfig, bilinear_upsample, dstb_forward, dsb_forward, dtb_forward
from .density import DensityMap, DotAnnotations, adaptive_sigmas, hflip, knn_mean_distance, render_density
from .losses import LossReport, PRLConfig, mae_mse, pixelwise_l2, prl, smoothing_kernel
from .model import ModelConfig, count_params, forward, init_params
from .optim import AdamState, adam_step, lr_at
from .train import TrainConfig, evaluate, train

__version__ = "0.1.0"
