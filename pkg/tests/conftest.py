from collections import OrderedDict

import numpy as np
import pytest
import torch

from gradflow.datasets import SyntheticSpec, synth_generate
from gradflow.flow import FlowConfig, actnorm_init, build_model
from gradflow.numerics import SeededRng


def perturbed(model, scale=0.05, seed=123):
    """Give every parameter small random values so no coupling is an identity."""
    gen = torch.Generator().manual_seed(seed)
    model.params = OrderedDict(
        (k, v + scale * torch.randn(v.shape, generator=gen, dtype=v.dtype)) for k, v in model.params.items()
    )
    return model


def desk_model(precision="float32", seed=0, init=True, perturb=0.0):
    cfg = FlowConfig(precision=precision)
    model = build_model(cfg, SeededRng(seed, 1))
    if init:
        actnorm_init(model, synth_generate(SyntheticSpec("correlated-field"), 64, seed=seed))
    if perturb:
        perturbed(model, perturb, seed)
    return model


@pytest.fixture
def flat_batch():
    return synth_generate(SyntheticSpec("flat-blob"), 32, seed=3)


@pytest.fixture
def noise_batch():
    return synth_generate(SyntheticSpec("white-noise"), 32, seed=4)


@pytest.fixture
def rng():
    return np.random.default_rng(20240531)


@pytest.fixture(scope="session")
def flat_run(tmp_path_factory):
    """A glow-desk checkpoint trained 3 epochs on flat-blob images, plus held-out data."""
    from gradflow.training import TrainConfig, checkpoint_path, load_checkpoint, train

    d = tmp_path_factory.mktemp("flat-run")
    model = build_model(FlowConfig(), SeededRng(0, 1))
    train(model, synth_generate(SyntheticSpec("flat-blob"), 2000, seed=31), TrainConfig(batch_size=64, epochs=3), checkpoint_dir=d)
    return {
        "path": checkpoint_path(d, 3),
        "checkpoint": load_checkpoint(checkpoint_path(d, 3)),
        "fit": synth_generate(SyntheticSpec("flat-blob"), 500, seed=32),
        "id": synth_generate(SyntheticSpec("flat-blob"), 300, seed=33),
        "noise": synth_generate(SyntheticSpec("white-noise"), 300, seed=34),
        "field": synth_generate(SyntheticSpec("correlated-field"), 300, seed=35),
    }


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
