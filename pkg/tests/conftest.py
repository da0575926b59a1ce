import pytest

from seqdeobf.experiment import ExperimentConfig, config_from_mapping

TINY_RUN = {
    "n_a": 16,
    "n_b": 10,
    "redlock_trials": 4,
    "include_benchmarks": False,
    "scas": {"widths": [16, 24], "epochs": 3},
    "nmt": {"epochs": 2, "optimizer": "adam", "lr": 0.003},
    "nmt_model": {"emb": 16, "hidden": 32},
    "ea": {"population": 4, "generations": 2},
}


@pytest.fixture
def tiny_config() -> ExperimentConfig:
    return config_from_mapping(TINY_RUN)
