"""Desk-scale merge experiments on small tanh MLPs trained on synthetic cluster tasks."""

from .experiment import (
    ExperimentConfig,
    ExperimentRecord,
    ExpertSet,
    MethodConfig,
    SpectrumRow,
    cka_delta_study,
    merge_models,
    run_pairwise_experiment,
    spectrum_experiment,
    spectrum_from_experts,
    spectrum_summary,
    train_experts,
    trajectory_experiment,
)
from .model import ToyModel, evaluate, forward, init_model, train
from .tasks import ToyDataset, ToyTaskSpec, generate_task
