import numpy as np
import pytest
import torch
from hypothesis import settings

from slamdimm.core import MODALITY_ORDER, ModalityId, MultiModalVolume, Volume
from slamdimm.phantom import PhantomSpec, generate_phantom_case

settings.register_profile("suite", max_examples=25, deadline=None)
settings.load_profile("suite")


TINY_ARCH = dict(
    base_channels=8,
    residual_subblocks=1,
    latent_channels=16,
    time_embedding_dim=32,
    image_size=(32, 32),
)


@pytest.fixture(scope="session")
def phantom_case():
    return generate_phantom_case(PhantomSpec(seed=5, noise_level=0.01))


@pytest.fixture(scope="session")
def clean_phantom_case():
    return generate_phantom_case(PhantomSpec(seed=5, noise_level=0.0))


@pytest.fixture(scope="session")
def tiny_case():
    """A 32x32x12 case, small enough for per-test network forwards."""
    return generate_phantom_case(
        PhantomSpec(height=32, width=32, depth=12, noise_level=0.01, seed=2)
    )


def make_case(shape=(8, 8, 6), case_id="case", with_mask=True, seed=0) -> MultiModalVolume:
    rng = np.random.default_rng(seed)
    volumes = {
        m: Volume(data=rng.random(shape).astype(np.float32), modality=m)
        for m in MODALITY_ORDER
    }
    mask = None
    if with_mask:
        mask = (rng.random(shape) > 0.8).astype(np.uint8)
    return MultiModalVolume(volumes=volumes, case_id=case_id, seg_mask=mask)


def seeded(seed: int = 0) -> torch.Generator:
    return torch.Generator(device="cpu").manual_seed(seed)
