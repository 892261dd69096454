"""Convolutional sparse coding layers with a learnable sparsity strength.

Unrolled FISTA sparse coding, exact reverse-mode gradients through the
unroll, a compression-excitation training objective and test-time lambda
correction under input noise. Pure numpy.
"""
from .adapt import AdaptConfig, adapt_lambda, bn_only_adapt, frozen_param_hash, recompute_bn_stats
from .data import (CorruptionSpec, DataError, LabeledDataset, SynthSpec, corrupt_gaussian, load_cifar,
                   normalize, synth_dataset)
from .fista import FistaConfig, FistaTrace, csc_objective, csc_solve, fista_momentum, soft_threshold
from .loss import cross_entropy, ib_loss, project_lambda
from .network import Network, build_network, load_checkpoint, network_backward, network_forward, save_checkpoint
from .tensor_ops import ConvDict, ShapeError, dict_analyze, dict_synthesize, lipschitz_estimate
from .training import DivergenceError, LambdaTrajectory, TrainConfig, evaluate, train
from .unroll import UnrollGradients, lambda_grad_forward, unroll_backward

__version__ = "0.1.0"
