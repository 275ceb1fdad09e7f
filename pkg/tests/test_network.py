import json

import numpy as np
import pytest

import autodiff as ad
from autodiff import Tensor, backward, grad_check
from errors import InvalidSpec, ManifestMismatch, SpecMismatch, UnknownTag
from network import (
    ModelSpec,
    StageSpec,
    binarize,
    build_model,
    checkpoint_exists,
    load_checkpoint,
    load_model,
    plan_downsampling,
    save_checkpoint,
    set_trainable,
    transfer_weights,
)


def test_full_scale_layout():
    spec = ModelSpec.full()
    assert spec.is_full_scale()
    assert spec.widths() == [32, 64, 128, 256, 512, 512, 512]
    shapes = spec.plan_shapes((44, 256, 256))
    assert shapes[0] == (44, 256, 256)
    assert shapes[-1][1:] == (4, 4)
    # depth stops halving once it drops below 8
    assert [s[0] for s in shapes] == [44, 22, 11, 6, 6, 6, 6]


def test_full_scale_decoder_widths_follow_skips():
    layout = {name: shape for name, shape, _, _, _ in ModelSpec.full().parameter_layout()}
    assert layout["dec.stage6.conv1.weight"] == (512, 1024, 3, 3, 3)
    assert layout["dec.stage1.conv1.weight"] == (32, 96, 3, 3, 3)
    assert layout["head.conv.weight"] == (1, 32, 1, 1, 1)
    assert layout["head.conv.bias"] == (1,)
    assert layout["enc.stage3.block0.conv2.weight"] == (128, 16, 3, 3, 3)


def test_every_parameter_has_one_known_tag(tiny_spec):
    model = build_model(tiny_spec, seed=0)
    assert set(model.params.tags()) == set(tiny_spec.stage_tags())
    assert all(p.name.startswith("enc.stage2.block") for p in model.params.by_tag("bottleneck"))
    assert model.params.by_tag("enc.stage2")


def test_cardinality_must_divide_widths():
    spec = ModelSpec(stages=(StageSpec(6), StageSpec(12, 1, (True, True, True))), cardinality=4)
    with pytest.raises(InvalidSpec):
        spec.validate()


def test_plan_downsampling_respects_min_extent():
    assert plan_downsampling((6, 32, 32), 3, min_extent=8) == [
        (False, False, False), (False, True, True), (False, True, True)]


def test_build_is_deterministic(tiny_spec):
    a = build_model(tiny_spec, seed=5).params.snapshot()
    b = build_model(tiny_spec, seed=5).params.snapshot()
    c = build_model(tiny_spec, seed=6).params.snapshot()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_forward_shapes_odd_extent():
    spec = ModelSpec.desk((9, 8, 8), n_stages=3, scale=0.25, cardinality=2)
    model = build_model(spec, seed=0)
    x = Tensor(np.random.default_rng(0).standard_normal((2, 1, 9, 8, 8)))
    assert model(x).shape == (2, 1, 9, 8, 8)


def test_forward_rejects_wrong_channels(tiny_spec):
    model = build_model(tiny_spec, seed=0)
    with pytest.raises(SpecMismatch):
        model(Tensor(np.zeros((1, 2, 8, 8, 8))))


def test_predict_and_binarize(tiny_spec, rng):
    model = build_model(tiny_spec, seed=0)
    prob = model.predict(rng.standard_normal((8, 8, 8)))
    assert prob.shape == (8, 8, 8)
    assert ((prob >= 0) & (prob <= 1)).all()
    assert binarize(np.array([0.49, 0.5, 0.51])).tolist() == [0, 1, 1]


def test_whole_model_gradients_float64(tiny_spec, rng):
    model = build_model(tiny_spec, seed=1, dtype=np.float64)
    x = Tensor(rng.standard_normal((1, 1, 8, 8, 8)), dtype=np.float64)
    cotangent = Tensor(rng.standard_normal((1, 1, 8, 8, 8)), dtype=np.float64)
    params = [model.params["head.conv.weight"].tensor, model.params["dec.stage1.norm1.gamma"].tensor,
              model.params["enc.stage2.block0.conv2.weight"].tensor]

    def f(*_):
        return ad.sum(ad.mul(model(x), cotangent))

    report = grad_check(f, params, h=1e-5, max_entries=12)
    assert report.max_error < 1e-4, report.errors


def test_frozen_parameters_get_no_gradient(tiny_spec, rng):
    model = build_model(tiny_spec, seed=0)
    set_trainable(model.params, ["enc.stage1", "enc.stage2"], False)
    backward(ad.mean(model(Tensor(rng.standard_normal((1, 1, 8, 8, 8))))))
    for p in model.params:
        if p.stage_tag.startswith("enc."):
            assert p.tensor.grad is None
        else:
            assert p.tensor.grad is not None
    with pytest.raises(UnknownTag):
        set_trainable(model.params, ["enc.stage9"], True)


def test_transfer_keeps_body_and_reinitializes_head(tiny_spec):
    source = build_model(tiny_spec, seed=1).params
    target = build_model(tiny_spec, seed=2).params
    moved = transfer_weights(source, target, reinit_head=True, seed=7)
    for p in moved:
        if p.stage_tag == "head":
            assert not np.array_equal(p.data, source[p.name].data)
        else:
            assert np.array_equal(p.data, source[p.name].data)
    again = transfer_weights(source, target, reinit_head=True, seed=7)
    assert np.array_equal(again["head.conv.weight"].data, moved["head.conv.weight"].data)
    kept = transfer_weights(source, target, reinit_head=False, seed=7)
    assert np.array_equal(kept["head.conv.weight"].data, source["head.conv.weight"].data)


def test_transfer_rejects_other_architecture(tiny_spec):
    other = ModelSpec.desk((8, 8, 8), n_stages=3, scale=0.25, cardinality=2)
    with pytest.raises(SpecMismatch):
        transfer_weights(build_model(other, 0).params, build_model(tiny_spec, 0).params, True, 0)


def test_checkpoint_round_trip(tmp_path, tiny_spec):
    model = build_model(tiny_spec, seed=3)
    set_trainable(model.params, ["enc.stage1"], False)
    save_checkpoint(model.params, tmp_path / "ckpt")
    assert checkpoint_exists(tmp_path / "ckpt")
    loaded = load_checkpoint(tmp_path / "ckpt.manifest.json")
    assert loaded.names() == model.params.names()
    for p in model.params:
        q = loaded[p.name]
        assert q.data.tobytes() == p.data.tobytes()
        assert q.stage_tag == p.stage_tag
        assert q.trainable == p.trainable
    assert load_model(tmp_path / "ckpt").spec.fingerprint() == tiny_spec.fingerprint()


def test_checkpoint_bytes_are_reproducible(tmp_path, tiny_spec):
    save_checkpoint(build_model(tiny_spec, seed=3).params, tmp_path / "a")
    save_checkpoint(build_model(tiny_spec, seed=3).params, tmp_path / "b")
    assert (tmp_path / "a.weights.raw").read_bytes() == (tmp_path / "b.weights.raw").read_bytes()
    assert (tmp_path / "a.manifest.json").read_bytes() == (tmp_path / "b.manifest.json").read_bytes()


def test_truncated_checkpoint_raises(tmp_path, tiny_spec):
    save_checkpoint(build_model(tiny_spec, seed=3).params, tmp_path / "ckpt")
    weights = tmp_path / "ckpt.weights.raw"
    weights.write_bytes(weights.read_bytes()[:-8])
    with pytest.raises(ManifestMismatch):
        load_checkpoint(tmp_path / "ckpt")


def test_checkpoint_with_renamed_parameter_raises(tmp_path, tiny_spec):
    save_checkpoint(build_model(tiny_spec, seed=3).params, tmp_path / "ckpt")
    manifest_path = tmp_path / "ckpt.manifest.json"
    manifest = json.loads(manifest_path.read_text())
    manifest["parameters"][0]["name"] = "enc.stage1.renamed"
    manifest_path.write_text(json.dumps(manifest))
    with pytest.raises(ManifestMismatch):
        load_checkpoint(tmp_path / "ckpt")


def _shift_second(entries):
    entries[1]["offset"] = entries[0]["offset"] + 1


def _push_last_past_end(entries):
    entries[-1]["offset"] += 1


def _negative_offset(entries):
    entries[0]["offset"] = -1


def _wrong_count(entries):
    entries[0]["count"] += 1


def _float_offset(entries):
    entries[0]["offset"] = 0.0


@pytest.mark.parametrize("corrupt", [_shift_second, _push_last_past_end, _negative_offset, _wrong_count,
                                     _float_offset])
def test_checkpoint_entries_must_tile_the_payload(tmp_path, tiny_spec, corrupt):
    save_checkpoint(build_model(tiny_spec, seed=3).params, tmp_path / "ckpt")
    manifest_path = tmp_path / "ckpt.manifest.json"
    manifest = json.loads(manifest_path.read_text())
    corrupt(manifest["parameters"])
    manifest_path.write_text(json.dumps(manifest))
    with pytest.raises(ManifestMismatch):
        load_checkpoint(tmp_path / "ckpt")


@pytest.mark.parametrize("seed", range(100))
def test_random_checkpoints_round_trip(tmp_path, tiny_spec, seed):
    params = build_model(tiny_spec, seed=seed).params
    save_checkpoint(params, tmp_path / "ckpt")
    loaded = load_checkpoint(tmp_path / "ckpt")
    for p in params:
        assert loaded[p.name].data.tobytes() == p.data.tobytes()


def test_fingerprint_tracks_architecture(tiny_spec):
    same = ModelSpec.from_dict(tiny_spec.to_dict())
    assert same.fingerprint() == tiny_spec.fingerprint()
    wider = ModelSpec.desk((8, 8, 8), n_stages=2, scale=0.5, cardinality=2)
    assert wider.fingerprint() != tiny_spec.fingerprint()
