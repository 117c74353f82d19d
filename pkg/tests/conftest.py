import numpy as np
import pytest
import torch

from cocoseg import synthdata
from cocoseg.models import ModelConfig
from cocoseg.trainer import TrainConfig

# Two CPU threads is the sandbox default; pin it so determinism assertions
# about repeated runs are meaningful.
torch.set_num_threads(max(1, torch.get_num_threads()))


TINY_FRACTIONS = {"labeled_train": 0.25, "unlabeled_train": 0.25, "val": 0.25, "test": 0.25}


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Small 4-case dataset shared by trainer/CLI tests."""
    root = tmp_path_factory.mktemp("tiny_data")
    config = synthdata.SynthConfig(seed=7, n_cases=4, slices_per_case=3, image_size=(32, 32))
    manifest, _ = synthdata.generate_dataset(config, root, TINY_FRACTIONS)
    return manifest


def tiny_train_config(manifest_path: str, **overrides) -> TrainConfig:
    model = ModelConfig(
        image_size=(32, 32),
        cnn_base_channels=4,
        cnn_depth=3,
        attn_embed_dim=8,
        attn_heads=2,
        attn_blocks=1,
        attn_patch=4,
        tap_scales=((32, 32), (16, 16), (8, 8)),
        proj_hidden=16,
        proj_out=8,
    )
    defaults = dict(
        manifest=str(manifest_path),
        seed=0,
        iterations=4,
        batch_size=4,
        val_every=2,
        patch_sizes=(4, 4, 4),
        model=model,
    )
    defaults.update(overrides)
    return TrainConfig(**defaults)
