import numpy as np
import pytest
import torch

from rivid.synth import SynthSpec, synth_corpus


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """4 identities x 4 images at 32x16 (two train ids, two test ids)."""
    out = tmp_path_factory.mktemp("tiny")
    corpus = synth_corpus(SynthSpec(n_identities=4, images_per_identity=4, canonical_size=(32, 16), seed=3), out)
    return out, corpus


def random_image(rng, h=16, w=8):
    return rng.random((h, w, 3))


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
