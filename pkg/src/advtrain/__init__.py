"""Adversarial training from first principles.

FGSM/BIM l-infinity attacks, vanilla / FGSM-Adv / BIM(N)-Adv training and the
epoch-carried single-step regime, on a numpy CNN with hand-written gradients.
"""

from .attacks import AttackConfig, bim, clip_to_budget, fgsm, fgsm_step, input_gradient
from .data import load_split, make_batches
from .evaluation import accuracy, build_report, intermediate_curve, sweep_iterations
from .model import build_default_arch, checkpoint_load, checkpoint_save, init_params, predict
from .regimes import RegimeConfig, train

__version__ = "0.1.0"
