import pytest

from ccreid.datamodel import INDEX_FILENAME, LabelVocabulary, load_index
from ccreid.losses import LossConfig
from ccreid.preprocess import AugmentConfig
from ccreid.synthdata import SynthConfig, generate
from ccreid.train import TrainConfig, train


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory):
    """A small rendered dataset shared across tests: 4 people, 2 outfits,
    4 images per outfit, 2 cameras, 64x32 frames."""
    root = tmp_path_factory.mktemp("tiny_data")
    cfg = SynthConfig(num_identities=4, outfits_per_identity=2,
                      images_per_outfit=4, num_cameras=2,
                      image_height=64, image_width=32, seed=123)
    generate(cfg, root)
    return root


@pytest.fixture(scope="session")
def tiny_index(tiny_root):
    return load_index(tiny_root / INDEX_FILENAME)


@pytest.fixture
def toy_vocab():
    """Five labels, one per part plus background; shirt and pants are clothes."""
    return LabelVocabulary(
        names=["background", "hair", "shirt", "pants", "shoes"],
        clothes_labels={2, 3},
        part_groups={0: {1}, 1: {2}, 2: {3}, 3: {4}},
        background_labels={0},
    ).validate()


def small_model_cfg(**overrides):
    cfg = dict(stage_channels=[8, 16], blocks_per_stage=1, last_stage_stride=1,
               input_height=64, input_width=32, classifier_kind="conv_gap",
               streams=("r", "h", "b"))
    cfg.update(overrides)
    return cfg


def fast_train_cfg(**overrides):
    cfg = dict(epochs=2, ids_per_batch=2, images_per_id=2, base_lr=1e-3,
               warmup_epochs=1, decay_epochs=(), seed=0, checkpoint_every=0)
    cfg.update(overrides)
    return TrainConfig(**cfg)


def fast_aug_cfg(**overrides):
    cfg = dict(target_height=64, target_width=32, crop_padding=2,
               erase_probability=0.25)
    cfg.update(overrides)
    return AugmentConfig(**cfg)


@pytest.fixture(scope="session")
def fast_run(tiny_index, tmp_path_factory):
    """One short training run shared by tests that only need a trained model."""
    run_dir = tmp_path_factory.mktemp("fast_run")
    result = train(tiny_index, fast_train_cfg(), LossConfig(), fast_aug_cfg(),
                   run_dir, model_cfg=small_model_cfg())
    return result
