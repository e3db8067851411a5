import numpy as np
import pytest
import torch

from mscfusion.model import EncoderSpec, ModelConfig, build_model
from mscfusion.synthdata import LatentSpec, generate_dataset


def toy_encoder_spec(repr_dim: int = 8) -> EncoderSpec:
    """Smallest spec with a valid interior local layer (side 8, L=3, l=2)."""
    return EncoderSpec(
        input_side=8, channels=(4, 6, 8), local_layer=2, repr_dim=repr_dim
    )


@pytest.fixture
def toy_spec() -> EncoderSpec:
    return toy_encoder_spec()


@pytest.fixture
def toy_model():
    config = ModelConfig(
        encoder=toy_encoder_spec(),
        local_head=True,
        global_head_hidden=0,
        decoder=True,
        n_classes=2,
    )
    return build_model(config, seed=7).double()


@pytest.fixture(scope="session")
def tiny_manifest():
    """40 subjects, side 16, 2 classes, with a hold-out set."""
    spec = LatentSpec(volume_side=16, seed=11)
    return generate_dataset(spec, 40, folds=5, holdout_frac=0.25)


def random_outputs(rng, b=3, s=4, d=8, side=8, with_recon=False, with_logits=False):
    """Random double-precision tensors shaped like projected model outputs."""
    out = {}
    for m in ("m1", "m2"):
        entry = {
            "locals": rng.normal(size=(b, s, d)),
            "z": rng.normal(size=(b, d)),
        }
        if with_recon:
            entry["x"] = rng.uniform(size=(b, 1, side, side, side))
            entry["recon"] = rng.uniform(size=(b, 1, side, side, side))
        if with_logits:
            entry["logits"] = rng.normal(size=(b, 2))
        out[m] = entry
    return out


def to_modality_outputs(raw):
    from mscfusion.objectives import ModalityOutputs

    out = {}
    for m, entry in raw.items():
        out[m] = ModalityOutputs(
            locals_proj=torch.as_tensor(entry["locals"], dtype=torch.float64),
            global_proj=torch.as_tensor(entry["z"], dtype=torch.float64),
            x=(
                torch.as_tensor(entry["x"], dtype=torch.float64)
                if "x" in entry
                else None
            ),
            recon=(
                torch.as_tensor(entry["recon"], dtype=torch.float64)
                if "recon" in entry
                else None
            ),
            logits=(
                torch.as_tensor(entry["logits"], dtype=torch.float64)
                if "logits" in entry
                else None
            ),
        )
    return out
