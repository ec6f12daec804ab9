import numpy as np
import pytest

from webface import nn_core
from webface.nn_core import CONV, FC, LOCAL, MAXPOOL, LayerSpec, NetworkConfig


def tiny_config(num_classes=4, bottleneck=6, size=12):
    """Every layer kind at gradient-check scale: 12 -> 10 -> 5 -> 4 -> 3 -> F7 -> F8."""
    return NetworkConfig(
        input_dims=(size, size, 1),
        layers=[
            LayerSpec(CONV, 3, (3, 3), 1, True, "C1"),
            LayerSpec(MAXPOOL, 0, (2, 2), 2, False, "M2"),
            LayerSpec(CONV, 3, (2, 2), 1, True, "C3"),
            LayerSpec(LOCAL, 2, (2, 2), 1, True, "L4"),
            LayerSpec(FC, bottleneck, None, 1, True, "F7"),
            LayerSpec(FC, num_classes, None, 1, False, "F8"),
        ],
        bottleneck_dim=bottleneck,
        num_classes=num_classes,
    )


@pytest.fixture
def tiny_net():
    return nn_core.build_network(tiny_config(), 0, np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def trained_small():
    """A quickly trained desk-scale net on 30 synthetic identities (shared, read-only)."""
    from webface.data import SynthConfig, generate_synthetic

    ds = generate_synthetic(
        SynthConfig(num_identities=30, images_per_identity=12, image_size=32, target_fraction=0.33, rng_seed=5)
    )
    names = sorted(ds.split("source_train"))
    x, y, _ = ds.gather(ds.split("source_train"), names)
    net = nn_core.build_network(nn_core.default_config(64, len(names)), 5)
    net, hist = nn_core.train(net, x, y, nn_core.TrainConfig(learning_rate=0.02, epochs=10, rng_seed=5))
    return ds, net, names, hist


ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
