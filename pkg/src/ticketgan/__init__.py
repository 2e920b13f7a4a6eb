"""Sparse GAN tickets for data-efficient training: IMP with rewinding, feature-level
adversarial augmentation, differentiable data augmentation and evaluation metrics."""

from .losses import LossSpec, discriminator_loss, generator_loss
from .models import ModelSpec, build_discriminator, build_gan, build_generator
from .sparsity import MaskPair, global_magnitude_prune, rewind, run_imp
from .advaug import AdvConfig, adv_discriminator_loss, adv_generator_loss, augmented_train_step, pgd_feature_perturb
from .training import TrainConfig, TrainState, train_step
from .metrics import fit_gaussian, frechet_distance, inception_score

__version__ = "0.1.0"
