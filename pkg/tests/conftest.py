import numpy as np
import pytest

from dintq.tensorio import SynthSpec, save_capsules, synth_capsule


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def synth_manifest(tmp_path):
    caps = [
        synth_capsule(SynthSpec(8, 16, profile="expanding", seed=k, lengths=(32, 128, 512),
                                token_budget=512, name=f"layer{k}"))
        for k in range(3)
    ]
    return save_capsules(caps, tmp_path / "fixture")
