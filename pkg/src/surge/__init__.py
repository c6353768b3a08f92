"""4x GAN super-resolution with divergence-based, dynamically weighted losses."""
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import (Batch, DatasetManifest, Image, PatchPair, bicubic_downscale, bicubic_upscale,
                   load_image, make_epoch_batches, save_image)
from .discriminator import Discriminator, DiscriminatorConfig
from .estimator import SuperResolver
from .exceptions import (ConfigurationError, DecodeError, FormatError, IntegrityError,
                         NumericalDivergenceError, PreconditionError, ShapeError, SurgeError)
from .generator import Generator, GeneratorConfig, parameter_count
from .gw import CouplingMatrix, GwSolverParams, gw_distance
from .losses import (LossReport, adversarial_loss_g, discriminator_loss, dynamic_combine,
                     gradient_penalty, gw_loss, js_divergence, js_loss)
from .metrics import MetricReport, evaluate_pairs, psnr, ssim
from .training import TrainConfig, Trainer, evaluate, evaluate_bicubic, train

__version__ = "0.1.0"
