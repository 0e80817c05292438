"""dilkit: distortion-invariant training paradigms for image restoration at
desk scale.

The package bundles a self-contained float64 autodiff engine, a tiny
residual conv restoration network, counterfactual degradation synthesis
(noise / blur / compression / hybrids), five training rules (plain risk
minimization plus serial/parallel x first/second-order invariant variants),
PSNR/SSIM evaluation across unseen distortion degrees, and a verification
suite wiring the math to runnable checks.
"""

from .autodiff import (Graph, ParamVector, ShapeError, Tensor, backward,
                       conv2d, flat_grad, forward_op, hvp)
from .config import DatasetConfig, ExperimentConfig, load_config
from .degrade import (CleanImage, ConfounderSet, DistortionSpec, PatchPair,
                      apply_distortion, awgn, counterfactual_augment,
                      gaussian_blur, gaussian_kernel, hybrid, jpeg_quant,
                      read_ppm, sample_batch, synth_clean_image, write_ppm)
from .metrics import EvalReport, EvalRow, evaluate, psnr, rgb_to_y, ssim
from .model import (NetConfig, RestorationNet, forward, init, load_checkpoint,
                    param_count, save_checkpoint, with_params)
from .optim import (AdamState, StepReport, TrainConfig, adam_step, loss,
                    meta_gradient, train, virtual_update)
from .verify import VerifyResult, run_all

__version__ = "0.1.0"
