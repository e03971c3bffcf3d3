import pytest
import torch

from ntscc.config import (
    ArchConfig,
    RunConfig,
    config_from_dict,
    config_to_dict,
    load_config,
    save_config,
)
from ntscc.data import (
    DatasetHandle,
    center_crop_multiple,
    load_image,
    random_crop,
    save_image,
    synthesize_toy_corpus,
)
from ntscc.errors import ConfigError


class TestConfig:
    def test_round_trip_through_yaml(self, tmp_path):
        cfg = RunConfig()
        cfg.train.iterations = 123
        cfg.arch.bottleneck = 64
        save_config(cfg, tmp_path / "c.yaml")
        loaded = load_config(tmp_path / "c.yaml")
        assert loaded == cfg

    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError, match="unknown"):
            config_from_dict({"no_such_field": 1})
        with pytest.raises(ConfigError, match="unknown"):
            config_from_dict({"arch": {"bottleneck": 8, "typo_field": 2}})

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.yaml")

    def test_dict_round_trip(self):
        cfg = RunConfig()
        assert config_from_dict(config_to_dict(cfg)) == cfg

    def test_arch_invariants(self):
        with pytest.raises(ConfigError):
            ArchConfig(blocks_per_stage=(1, 1, 1))
        with pytest.raises(ConfigError):
            ArchConfig(d_max=8, sideinfo_bits=4)  # cannot carry rate 15
        with pytest.raises(ConfigError):
            ArchConfig(context_input="bogus")

    def test_snr_table_spacing_enforced(self):
        from ntscc.config import RateControl

        with pytest.raises(ConfigError):
            RateControl(snr_table_db=(0.0, 2.0, 4.0))

    def test_crop_multiple_enforced(self):
        from ntscc.config import TrainConfig

        with pytest.raises(ConfigError):
            TrainConfig(crop_size=50)


class TestImagesAndDatasets:
    def test_save_load_round_trip(self, tmp_path):
        x = torch.rand(3, 20, 24)
        save_image(x, tmp_path / "img.png")
        back = load_image(tmp_path / "img.png")
        assert back.shape == (3, 20, 24)
        assert float((back - x).abs().max()) <= (0.5 / 255.0) + 1e-6

    def test_grayscale_converted_to_rgb(self, tmp_path):
        import numpy as np
        from PIL import Image

        Image.fromarray(np.zeros((16, 16), dtype=np.uint8), mode="L").save(
            tmp_path / "g.png")
        img = load_image(tmp_path / "g.png")
        assert img.shape == (3, 16, 16)

    def test_center_crop_multiple(self):
        x = torch.rand(3, 130, 200)
        out = center_crop_multiple(x, 64)
        assert out.shape == (3, 128, 192)
        with pytest.raises(ConfigError):
            center_crop_multiple(torch.rand(3, 32, 32), 64)

    def test_random_crop_deterministic(self):
        x = torch.rand(3, 64, 64)
        c1 = random_crop(x, 32, torch.Generator().manual_seed(3))
        c2 = random_crop(x, 32, torch.Generator().manual_seed(3))
        assert torch.equal(c1, c2)
        with pytest.raises(ConfigError):
            random_crop(torch.rand(3, 16, 16), 32, torch.Generator())

    def test_dataset_ordering_deterministic(self, tmp_path):
        synthesize_toy_corpus(tmp_path, n_images=5, size=64, seed=0)
        d1 = DatasetHandle(tmp_path)
        d2 = DatasetHandle(tmp_path)
        assert d1.paths == d2.paths
        assert len(d1) == 5

    def test_missing_or_empty_dataset_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            DatasetHandle(tmp_path / "nope")
        empty = tmp_path / "empty"
        empty.mkdir()
        with pytest.raises(ConfigError):
            DatasetHandle(empty)

    def test_batch_sampling_shapes(self, tmp_path):
        synthesize_toy_corpus(tmp_path, n_images=4, size=64, seed=1)
        ds = DatasetHandle(tmp_path)
        batch = ds.sample_batch(3, 32, torch.Generator().manual_seed(0))
        assert batch.shape == (3, 3, 32, 32)
        assert float(batch.min()) >= 0.0 and float(batch.max()) <= 1.0
