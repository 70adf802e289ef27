import numpy as np
import pytest

from ctta.model_config import AdaptationConfig, ModelConfig, PretrainConfig
from ctta.model_scenario import BaseTask, DomainSegment, DomainSpec, ScenarioConfig
from ctta.networks import TestDGModel
from ctta.pretrain_source import pretrain_source
from ctta.run_scenario import run_scenario


@pytest.fixture(scope="session")
def task():
    return BaseTask()


@pytest.fixture(scope="session")
def pretrained(task, tmp_path_factory):
    """One source model shared by every harness test; loaded fresh from disk per run."""
    path = tmp_path_factory.mktemp("source") / "checkpoint.json"
    result = pretrain_source(task, ModelConfig(), PretrainConfig(), seed=0, output_path=path)
    return result


@pytest.fixture(scope="session")
def checkpoint_path(pretrained):
    return str(pretrained.checkpoint_path)


@pytest.fixture
def model():
    return TestDGModel.init(ModelConfig(), seed=0)


@pytest.fixture
def adapt_cfg():
    return AdaptationConfig(queue_capacity=32, num_prototypes=8)


@pytest.fixture(scope="session")
def tiny_scenario():
    return ScenarioConfig(
        name="tiny",
        domains=[
            DomainSegment(domain=DomainSpec(family="additive-noise", severity=3), batches=3),
            DomainSegment(domain=DomainSpec(family="affine-contrast", severity=3), batches=3),
        ],
        batch_size=32,
    )


@pytest.fixture(scope="session")
def tiny_report(checkpoint_path, tiny_scenario):
    return run_scenario(checkpoint_path, tiny_scenario, AdaptationConfig(queue_capacity=32, num_prototypes=8))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
