import numpy as np
import pytest

from fabseg.config import finetune_train_defaults, prompter_train_defaults
from fabseg.data import SegmentationDataset, crop_tiles, generate_synthetic_scene
from fabseg.prompter import PrompterConfig
from fabseg.sam import SamConfig
from fabseg.trainer import train_prompter

SMALL_PROMPTER = PrompterConfig(backbone_channels=(8, 8, 16, 16), aspp_channels=16, decoder_channels=16,
                                low_level_channels=8, input_size=(32, 32))
SMALL_SAM = SamConfig(input_size=(32, 32), patch_size=8, embed_dim=16, encoder_depth=1, encoder_heads=2,
                      prompt_dim=16, decoder_depth=1, decoder_heads=2, decoder_mlp_dim=32)


def tiles_from_scenes(n_scenes, size, tile, parcels=4):
    ims, rs, bs = [], [], []
    for s in range(n_scenes):
        im, r, b = generate_synthetic_scene(s, parcels, size)
        ims += crop_tiles(im, tile).tiles
        rs += crop_tiles(r, tile).tiles
        bs += crop_tiles(b, tile).tiles
    return SegmentationDataset(list(range(len(ims))), np.stack(ims), np.stack(rs), np.stack(bs))


@pytest.fixture(scope="session")
def tiny_dataset():
    """Four 32-pixel tiles cut from one synthetic scene."""
    return tiles_from_scenes(1, 64, 32)


@pytest.fixture(scope="session")
def small_prompter_config():
    return SMALL_PROMPTER


@pytest.fixture(scope="session")
def small_sam_config():
    return SMALL_SAM


@pytest.fixture(scope="session")
def tiny_prompter_ckpt(tiny_dataset):
    return train_prompter(prompter_train_defaults(iterations=20, batch_size=4), tiny_dataset, SMALL_PROMPTER)


@pytest.fixture(scope="session")
def network_reports():
    from fabseg.verification import network_gradient_reports

    return {r.worst_parameter: r for r in network_gradient_reports()}


@pytest.fixture
def quick_finetune():
    return finetune_train_defaults(epochs=2, batch_size=2)
