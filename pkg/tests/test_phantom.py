import json

import numpy as np
import pytest
from scipy import ndimage

from errors import InvalidConfig
from metrics import dice
from phantom import MAX_WALL_FRACTION, PhantomConfig, ball, case_id, case_rng, generate_case, generate_dataset
from volume_io import load_mask, load_volume


def test_same_generator_state_gives_identical_case(small_phantom_cfg):
    a = generate_case(small_phantom_cfg, case_rng(small_phantom_cfg, 3))
    b = generate_case(small_phantom_cfg, case_rng(small_phantom_cfg, 3))
    for name in ("image", "cavity", "wall"):
        assert getattr(a, name).data.tobytes() == getattr(b, name).data.tobytes()
    assert a.meta == b.meta


@pytest.mark.parametrize("index", range(8))
def test_wall_is_a_thin_disjoint_shell(small_phantom_cfg, index):
    case = generate_case(small_phantom_cfg, case_rng(small_phantom_cfg, index))
    cavity = case.cavity.data.astype(bool)
    wall = case.wall.data.astype(bool)
    assert cavity.any() and wall.any()
    assert not (cavity & wall).any()
    reach = ndimage.binary_dilation(cavity, structure=ball(case.meta["thickness_vox"]))
    assert not (wall & ~reach).any()
    assert dice(case.wall, case.cavity) < 0.2


def test_default_wall_stays_under_a_tenth_of_the_volume():
    cfg = PhantomConfig()
    for i in range(5):
        case = generate_case(cfg, case_rng(cfg, i))
        assert 0 < case.wall.count < MAX_WALL_FRACTION * case.wall.data.size
        assert case.meta["wall_fraction"] == case.wall.count / case.wall.data.size
        # the same bound taken against the cavity would not hold for a closed shell
        assert case.wall.count > MAX_WALL_FRACTION * case.cavity.count


def test_noiseless_case_is_piecewise_constant(small_phantom_cfg):
    from dataclasses import replace
    cfg = replace(small_phantom_cfg, sigma=0.0, notch_probability=0.0)
    case = generate_case(cfg, np.random.default_rng(1))
    assert sorted(np.unique(case.image.data).tolist()) == pytest.approx([0.0, 0.35, 1.0])
    assert case.meta["notch"] is None


def test_notch_only_removes_wall(small_phantom_cfg):
    from dataclasses import replace
    plain = generate_case(replace(small_phantom_cfg, notch_probability=0.0), np.random.default_rng(5))
    notched = generate_case(replace(small_phantom_cfg, notch_probability=1.0), np.random.default_rng(5))
    assert np.array_equal(plain.cavity.data, notched.cavity.data)
    assert not (notched.wall.data & ~plain.wall.data.astype(bool)).any()
    assert notched.wall.count < plain.wall.count
    assert notched.meta["notch"] is not None


@pytest.mark.parametrize("kwargs", [
    {"radius_range": (0.4, 0.45)},
    {"dims": (4, 16, 16)},
    {"thickness": (0, 1)},
    {"mu_wall": 2.0},
    {"counts": (0, 1, 1)},
    {"notch_probability": 1.5},
])
def test_invalid_configs(kwargs):
    with pytest.raises(InvalidConfig):
        PhantomConfig(**kwargs)


def test_config_dict_round_trip(small_phantom_cfg):
    assert PhantomConfig.from_dict(small_phantom_cfg.to_dict()) == small_phantom_cfg
    with pytest.raises(InvalidConfig):
        PhantomConfig.from_dict({"colour": "red"})


def test_generate_dataset_layout(tmp_path, small_phantom_cfg):
    manifest = generate_dataset(small_phantom_cfg, tmp_path)
    assert manifest["splits"] == {
        "train": [case_id(i) for i in range(4)],
        "val": [case_id(i) for i in range(4, 6)],
        "test": [case_id(i) for i in range(6, 8)],
    }
    on_disk = json.loads((tmp_path / "manifest.json").read_text())
    assert on_disk == manifest
    for cid in manifest["cases"]:
        image = load_volume(tmp_path / cid / "image")
        wall = load_mask(tmp_path / cid / "wall")
        assert image.dims == wall.dims == small_phantom_cfg.dims
    with pytest.raises(InvalidConfig):
        generate_dataset(small_phantom_cfg, tmp_path / "bad", counts=(0, 1, 1))


def test_generation_is_reproducible_across_worker_counts(tmp_path, small_phantom_cfg):
    generate_dataset(small_phantom_cfg, tmp_path / "a", counts=(2, 1, 1), workers=1)
    generate_dataset(small_phantom_cfg, tmp_path / "b", counts=(2, 1, 1), workers=3)
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
