"""Federated robustness propagation with dual batch normalization.

A deterministic federated-learning simulator where adversarially trained
users share robustness with standard-training users by copying debiased
noise-BN statistics, and a per-user kernel SVM on logits picks the BN path
at inference.
"""

from .adversary import AttackConfig, pgd_attack
from .datagen import LabeledDataset, make_domains, partition_users, split_train_val
from .detector import (DetectorDataset, DetectorModel, build_detector_dataset,
                       fit_svm, robust_predict)
from .dual_bn import DBNState, dbn_forward, export_stats, import_noise_stats
from .federation import (FederationConfig, UserState, aggregate, count_flops,
                         local_train_round, run_federated_training)
from .harness import ExperimentConfig, evaluate, run_experiment
from .nn import Model, build_mlp, forward, loss_and_grad, sgd_step
from .propagation import (PropagationConfig, StatBundle, debias_copy,
                          propagate, similarity_weights)

__version__ = "0.1.0"
