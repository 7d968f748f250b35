import numpy as np
import pytest
from hypothesis import settings

from cardiofuse.model import ModelConfig, build_cnn
from cardiofuse.preprocess import preprocess_corpus
from cardiofuse.synthetic import SyntheticConfig, synth_corpus, synth_windows

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def randomize_bn(model, seed=0):
    """Give every batch-norm layer non-trivial affine parameters and running statistics."""
    rng = np.random.default_rng(seed)
    for _, layer in model.named_layers():
        if "running_mean" in layer.buffers:
            c = layer.params["gamma"].shape
            dt = layer.params["gamma"].dtype
            layer.params["gamma"] = rng.uniform(0.5, 1.5, c).astype(dt)
            layer.params["beta"] = rng.normal(0, 0.3, c).astype(dt)
            layer.buffers["running_mean"] = rng.normal(0, 0.3, c).astype(dt)
            layer.buffers["running_var"] = rng.uniform(0.5, 2.0, c).astype(dt)
    return model


@pytest.fixture
def cnn():
    return build_cnn(ModelConfig(), seed=0)


@pytest.fixture(scope="session")
def toy_windows():
    return synth_windows(64, seed=0)


@pytest.fixture(scope="session")
def short_corpus():
    """Twelve 9-10 s synthetic recordings, half abnormal."""
    return synth_corpus(12, seed=5, cfg=SyntheticConfig(min_duration_s=9.0, max_duration_s=10.0))


@pytest.fixture(scope="session")
def short_corpus_windows(short_corpus):
    return preprocess_corpus(short_corpus)
