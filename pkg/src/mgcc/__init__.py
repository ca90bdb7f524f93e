"""Semi-supervised ultrasound lesion segmentation with multi-level
global-context cross-consistency, trained on real plus diffusion-generated
unlabeled images."""

from .backbone import (ForwardOutputs, MgccNet, NetworkConfig, PerturbationSpec,
                       initialize_parameters, perturb)
from .data import (AugmentationConfig, DatasetSplit, MixedBatch, Sample, ToyGenConfig,
                   augment, compose_batches, generate_toy, load_directory, make_splits,
                   partition_labels)
from .errors import CheckpointError, ConfigError, DataError, NumericalError
from .ldm import (DDIMConfig, DenoiserConfig, DiffusionSchedule, VAEConfig, VAE, Denoiser,
                  ddim_sample, denoiser_loss, forward_diffuse, linear_beta_schedule,
                  synthesize, train_denoiser, train_vae)
from .objective import (LossReport, WarmupSchedule, bce_dice, consistency_loss, lambda_at,
                        supervised_loss, total_loss)
from .trainer import (MetricRecord, OptimConfig, TrainState, evaluate, fit, init_train_state,
                      load_checkpoint, poly_lr, save_checkpoint, train_step)

__version__ = "0.1.0"
