import numpy as np
import pytest

import dataset
from errors import ConfigError, MissingInput
from phantom import generate_dataset


@pytest.fixture
def phantom_root(tmp_path, small_phantom_cfg):
    generate_dataset(small_phantom_cfg, tmp_path, counts=(2, 1, 1))
    return tmp_path


def test_load_split_returns_normalized_samples(phantom_root):
    samples = dataset.load_split(phantom_root, "train", "wall")
    assert [s.case_id for s in samples] == ["case_0000", "case_0001"]
    for s in samples:
        assert abs(float(s.image.data.mean())) < 1e-4
        assert s.label.count > 0
        assert s.image.same_geometry(s.label)


def test_load_splits_covers_every_split(phantom_root):
    splits = dataset.load_splits(phantom_root, "cavity", workers=2)
    assert {k: len(v) for k, v in splits.items()} == {"train": 2, "val": 1, "test": 1}


def test_unknown_split_and_label(phantom_root):
    with pytest.raises(ConfigError):
        dataset.load_split(phantom_root, "holdout", "wall")
    with pytest.raises(ConfigError):
        dataset.load_case(phantom_root, "case_0000", "scar")


def test_missing_inputs(phantom_root, tmp_path_factory):
    with pytest.raises(MissingInput):
        dataset.read_manifest(tmp_path_factory.mktemp("empty"))
    (phantom_root / "case_0001" / "wall.raw").unlink()
    with pytest.raises(MissingInput):
        dataset.load_case(phantom_root, "case_0001", "wall")
    # the cavity of the same case is still readable
    assert dataset.load_case(phantom_root, "case_0001", "cavity").label.count > 0


def test_manifest_without_splits(tmp_path):
    (tmp_path / "manifest.json").write_text("{}")
    with pytest.raises(ConfigError):
        dataset.read_manifest(tmp_path)


def test_image_is_float32(phantom_root):
    sample = dataset.load_case(phantom_root, "case_0000", "cavity")
    assert sample.image.data.dtype == np.float32
