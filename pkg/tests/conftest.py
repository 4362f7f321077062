import numpy as np
import pytest

from anatomask import tensor as T


@pytest.fixture(autouse=True)
def _float64_debug():
    T.set_debug(True)
    T.set_default_dtype(np.float64)
    yield
    T.set_default_dtype(np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def one_hot_masks(labels, k):
    return (np.asarray(labels)[..., None, :, :] == np.arange(k)[:, None, None]).astype(np.float64)


TINY = dict(image_size=16, n_slices=2, classes=3, base_channels=8, spade_hidden=8, disc_channels=4,
            disc_layers=2, steps=4, ckpt_every=2, noise_sites=(0, 1))


def tiny_config(**kw):
    from anatomask.config import RunConfig

    return RunConfig(**{**TINY, **kw})


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    from anatomask.phantom import generate_phantom, write_dataset

    root = tmp_path_factory.mktemp("phantoms")
    samples = [generate_phantom(100 + i, (4, 16, 16), 3) for i in range(7)]
    write_dataset(root, samples, seed=0)
    return root


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not any(mod.RESULTS.values()):
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
