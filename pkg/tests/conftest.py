import numpy as np
import pytest

from aeae.data import synth_dataset
from aeae.models import TrainConfig, build_autoencoder, build_classifier, train_autoencoder, train_classifier


@pytest.fixture(scope="session")
def small_data():
    """12x12 shapes, split into train and held-out halves."""
    ds = synth_dataset(count=600, seed=11, size=12, noise=0.02, contrast=(0.3, 0.5))
    return ds.split(400)


@pytest.fixture(scope="session")
def small_classifier(small_data):
    train, _ = small_data
    model = build_classifier(train.image_shape, 5, seed=3)
    model, _ = train_classifier(model, train.images, train.labels, TrainConfig(learning_rate=0.01, epochs=15, seed=3))
    return model


@pytest.fixture(scope="session")
def small_autoencoder(small_data):
    train, _ = small_data
    model = build_autoencoder(train.image_shape, 8, seed=4)
    model, _ = train_autoencoder(model, train.images, TrainConfig(learning_rate=0.01, epochs=15, seed=4))
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance reporting: one PASS/FAIL line per criterion at the end of the run

_CRITERIA: dict[int, list] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.failed):
        return
    doc = (item.function.__doc__ or item.name).strip().splitlines()[0]
    entry = _CRITERIA.setdefault(marker.args[0], [True, doc])
    entry[0] = entry[0] and rep.passed and not rep.skipped


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, doc = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {doc}")


# a pipeline small enough to run several times per session
TINY = [
    "dataset.count=260",
    "dataset.size=8",
    "dataset.contrast=0.3,0.5",
    "dataset.train=140",
    "dataset.fit=60",
    "dataset.test=60",
    "dataset.attack=12",
    "classifier.epochs=40",
    "classifier.learning_rate=0.01",
    "autoencoder.filters=8",
    "autoencoder.epochs=30",
    "attacks.fgsm=0.3",
    "attacks.bim=0.3",
    "attacks.pgd=0.3",
    "attacks.pgd_iterations=5",
    "attacks.deepfool_iterations=10",
    "attacks.cw_steps=20",
    "attacks.cw_binary_steps=2",
    "detector.trees=25",
    "detector.subsample=64",
    "detector.scatter=pgd_eps0.3",
]


def tiny_args(out, *extra):
    args = ["--out", str(out)]
    for item in TINY:
        args += ["--set", item]
    return args + list(extra)
