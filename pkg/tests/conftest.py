import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tlab.scorer import ModelConfig, init_parameters, parse_layers

settings.register_profile(
    "tlab", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("tlab")


@pytest.fixture
def small_config():
    return ModelConfig(
        input_dim=3,
        vocab_size=3,
        enc_layers=parse_layers("tanh_rnn(4),linear(3)"),
        dec_embed_dim=2,
        dec_hidden_dim=3,
        joint_dim=4,
        aux_layer_indices=(1,),
        seed=5,
    )


@pytest.fixture
def small_params(small_config):
    return init_parameters(small_config)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# verdict lines recorded by the acceptance tests, echoed at the end of the run
ACCEPTANCE_LINES = []


@pytest.fixture
def verdict(capsys):
    def record(number, name, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'} [{number:2d}] {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("[")[1].split("]")[0])):
            terminalreporter.write_line(line)
