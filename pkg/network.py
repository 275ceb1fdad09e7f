"""
ResNeXt-encoder 3D U-Net built from a declarative ModelSpec.

Every parameter carries exactly one stage tag (enc.stageK, bottleneck,
dec.stageK, head) so freezing can be driven by tag sets, and a ParameterSet
can be checkpointed and transferred between the cavity and wall tasks.

Checkpoint format: ``<name>.manifest.json`` (names, shapes, stage tags,
trainable flags, model spec) plus ``<name>.weights.raw`` holding every
tensor as little-endian float32, concatenated in manifest order.
"""
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Set, Tuple

import numpy as np

import autodiff as ad
from autodiff import Tensor
from errors import InvalidSpec, IoFailure, ManifestMismatch, SpecMismatch, UnknownTag
from volume_io import atomic_write_bytes

logger = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "leaky_relu")
FULL_CHANNELS = (32, 64, 128, 256, 512, 512, 512)


@dataclass(frozen=True)
class StageSpec:
    channels: int
    blocks: int = 1
    # stride-2 entry conv per axis (z, y, x)
    downsample: Tuple[bool, bool, bool] = (False, False, False)


def plan_downsampling(input_dims: Sequence[int], n_stages: int, min_extent: int = 8) -> List[Tuple[bool, bool, bool]]:
    """Stage 1 keeps full resolution; later stages halve an axis while its extent is >= min_extent."""
    dims = list(input_dims)
    flags = [(False, False, False)]
    for _ in range(1, n_stages):
        f = tuple(n >= min_extent for n in dims)
        dims = [(n + 1) // 2 if down else n for n, down in zip(dims, f)]
        flags.append(f)
    return flags


@dataclass(frozen=True)
class ModelSpec:
    stages: Tuple[StageSpec, ...]
    base_channels: int = 32
    cardinality: int = 8
    in_channels: int = 1
    out_channels: int = 1
    activation: str = "leaky_relu"
    leaky_slope: float = 0.01
    # multiplies every stage width for desk-scale runs
    scale: float = 1.0
    norm_eps: float = 1e-5

    @classmethod
    def full(cls, roi_size: Sequence[int] = (44, 256, 256), scale: float = 1.0, cardinality: int = 8) -> "ModelSpec":
        flags = plan_downsampling(roi_size, len(FULL_CHANNELS), min_extent=8)
        stages = tuple(StageSpec(c, 1, f) for c, f in zip(FULL_CHANNELS, flags))
        return cls(stages=stages, base_channels=32, cardinality=cardinality, scale=scale)

    @classmethod
    def desk(cls, roi_size: Sequence[int] = (32, 32, 32), n_stages: int = 4, scale: float = 0.25,
             cardinality: int = 2, max_channels: int = 128) -> "ModelSpec":
        channels = [min(32 * 2 ** i, max_channels) for i in range(n_stages)]
        flags = plan_downsampling(roi_size, n_stages, min_extent=4)
        stages = tuple(StageSpec(c, 1, f) for c, f in zip(channels, flags))
        return cls(stages=stages, base_channels=32, cardinality=cardinality, scale=scale)

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    def widths(self) -> List[int]:
        return [max(1, int(round(s.channels * self.scale))) for s in self.stages]

    def is_full_scale(self) -> bool:
        return self.scale == 1.0 and tuple(s.channels for s in self.stages) == FULL_CHANNELS

    def validate(self) -> None:
        if not self.stages:
            raise InvalidSpec("model needs at least one encoder stage")
        if self.activation not in ACTIVATIONS:
            raise InvalidSpec(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.cardinality < 1 or self.in_channels < 1 or self.out_channels < 1:
            raise InvalidSpec("cardinality and channel counts must be positive")
        if self.scale <= 0:
            raise InvalidSpec("scale must be positive")
        for i, (stage, width) in enumerate(zip(self.stages, self.widths()), start=1):
            if stage.blocks < 0:
                raise InvalidSpec(f"stage {i}: negative block count")
            if len(stage.downsample) != 3:
                raise InvalidSpec(f"stage {i}: downsample needs one flag per axis")
            if width % self.cardinality:
                raise InvalidSpec(f"stage {i}: {width} channels not divisible by cardinality {self.cardinality}")

    def plan_shapes(self, input_dims: Sequence[int]) -> List[Tuple[int, int, int]]:
        """Spatial extent after each encoder stage."""
        dims = tuple(int(n) for n in input_dims)
        out = []
        for stage in self.stages:
            stride = tuple(2 if d else 1 for d in stage.downsample)
            dims = ad.conv_output_shape(dims, 3, stride, 1)
            out.append(dims)
        return out

    def parameter_layout(self) -> List[Tuple[str, Tuple[int, ...], str, str, int]]:
        """(name, shape, stage_tag, init, fan_in) for every parameter, in build order."""
        self.validate()
        widths = self.widths()
        n = self.n_stages
        card = self.cardinality
        layout = []

        def conv(prefix, tag, cout, cin, k, groups=1, bias=False):
            fan_in = (cin // groups) * k ** 3
            layout.append((f"{prefix}.weight", (cout, cin // groups, k, k, k), tag, "he", fan_in))
            if bias:
                layout.append((f"{prefix}.bias", (cout,), tag, "bias", fan_in))

        def norm(prefix, tag, c):
            layout.append((f"{prefix}.gamma", (c,), tag, "ones", 0))
            layout.append((f"{prefix}.beta", (c,), tag, "zeros", 0))

        cin = self.in_channels
        for i, width in enumerate(widths, start=1):
            stage = f"enc.stage{i}"
            conv(f"{stage}.entry.conv", stage, width, cin, 3)
            norm(f"{stage}.entry.norm", stage, width)
            block_tag = "bottleneck" if i == n else stage
            for b in range(self.stages[i - 1].blocks):
                block = f"{stage}.block{b}"
                conv(f"{block}.conv1", block_tag, width, width, 1)
                norm(f"{block}.norm1", block_tag, width)
                conv(f"{block}.conv2", block_tag, width, width, 3, groups=card)
                norm(f"{block}.norm2", block_tag, width)
                conv(f"{block}.conv3", block_tag, width, width, 1)
                norm(f"{block}.norm3", block_tag, width)
            cin = width

        for k in range(n - 1, 0, -1):
            stage = f"dec.stage{k}"
            conv(f"{stage}.conv1", stage, widths[k - 1], widths[k] + widths[k - 1], 3)
            norm(f"{stage}.norm1", stage, widths[k - 1])
            conv(f"{stage}.conv2", stage, widths[k - 1], widths[k - 1], 3)
            norm(f"{stage}.norm2", stage, widths[k - 1])

        conv("head.conv", "head", self.out_channels, widths[0], 1, bias=True)
        return layout

    def stage_tags(self) -> List[str]:
        tags = [f"enc.stage{i}" for i in range(1, self.n_stages + 1)]
        tags.append("bottleneck")
        tags += [f"dec.stage{k}" for k in range(self.n_stages - 1, 0, -1)]
        tags.append("head")
        return tags

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [{"channels": s.channels, "blocks": s.blocks, "downsample": list(s.downsample)}
                       for s in self.stages]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        try:
            stages = tuple(StageSpec(int(s["channels"]), int(s.get("blocks", 1)),
                                     tuple(bool(f) for f in s.get("downsample", (False, False, False))))
                           for s in d.pop("stages"))
            spec = cls(stages=stages, **d)
        except (KeyError, TypeError) as e:
            raise InvalidSpec(f"malformed model spec: {e}") from e
        spec.validate()
        return spec

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def tag_sort_key(tag: str) -> Tuple[int, int]:
    if tag.startswith("enc.stage"):
        return 0, int(tag[len("enc.stage"):])
    if tag == "bottleneck":
        return 1, 0
    if tag.startswith("dec.stage"):
        return 2, -int(tag[len("dec.stage"):])
    return 3, 0


class Parameter:
    """A named tensor with its freeze group."""

    def __init__(self, name: str, tensor: Tensor, stage_tag: str, trainable: bool = True):
        self.name = name
        self.tensor = tensor
        self.stage_tag = stage_tag
        self.trainable = trainable

    @property
    def trainable(self) -> bool:
        return self.tensor.requires_grad

    @trainable.setter
    def trainable(self, value: bool) -> None:
        # frozen tensors drop out of the tape entirely
        self.tensor.requires_grad = bool(value)
        if value and self.tensor.grad is None:
            self.tensor.grad = np.zeros_like(self.tensor.data)
        elif not value:
            self.tensor.grad = None

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data


class ParameterSet:
    """Ordered, uniquely named parameters, each with exactly one stage tag."""

    def __init__(self, params: Iterable[Parameter], spec: Optional[ModelSpec] = None):
        self._params: Dict[str, Parameter] = {}
        for p in params:
            if p.name in self._params:
                raise InvalidSpec(f"duplicate parameter name {p.name}")
            if not p.stage_tag:
                raise InvalidSpec(f"parameter {p.name} has no stage tag")
            self._params[p.name] = p
        self.spec = spec

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> List[str]:
        return list(self._params)

    def tags(self) -> List[str]:
        return sorted({p.stage_tag for p in self}, key=tag_sort_key)

    def by_tag(self, tag: str) -> List[Parameter]:
        return [p for p in self if p.stage_tag == tag]

    def trainable_tags(self) -> List[str]:
        return sorted({p.stage_tag for p in self if p.trainable}, key=tag_sort_key)

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self}

    def zero_grad(self) -> None:
        for p in self:
            p.tensor.zero_grad()

    def copy(self) -> "ParameterSet":
        return ParameterSet(
            (Parameter(p.name, Tensor(p.data, requires_grad=p.trainable, dtype=p.data.dtype),
                       p.stage_tag, p.trainable) for p in self),
            spec=self.spec)

    def num_values(self) -> int:
        return int(sum(p.data.size for p in self))


def _initial_value(init: str, shape, fan_in: int, rng: np.random.Generator, dtype) -> np.ndarray:
    if init == "he":
        return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
    if init == "bias":
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(dtype)
    if init == "ones":
        return np.ones(shape, dtype=dtype)
    return np.zeros(shape, dtype=dtype)


class UNet3D:
    """Executable forward pass over a ParameterSet laid out by a ModelSpec."""

    def __init__(self, spec: ModelSpec, params: ParameterSet):
        spec.validate()
        self.spec = spec
        self.params = params

    def with_params(self, params: ParameterSet) -> "UNet3D":
        return UNet3D(self.spec, params)

    def _t(self, name: str) -> Tensor:
        return self.params[name].tensor

    def _act(self, x: Tensor) -> Tensor:
        if self.spec.activation == "relu":
            return ad.relu(x)
        return ad.leaky_relu(x, self.spec.leaky_slope)

    def _conv_norm_act(self, x: Tensor, conv: str, norm: str, stride=1, padding=1, groups=1, act=True) -> Tensor:
        x = ad.conv3d(x, self._t(f"{conv}.weight"), stride=stride, padding=padding, groups=groups)
        x = ad.instance_norm3d(x, self._t(f"{norm}.gamma"), self._t(f"{norm}.beta"), self.spec.norm_eps)
        return self._act(x) if act else x

    def _resnext_block(self, x: Tensor, prefix: str) -> Tensor:
        h = self._conv_norm_act(x, f"{prefix}.conv1", f"{prefix}.norm1", padding=0)
        h = self._conv_norm_act(h, f"{prefix}.conv2", f"{prefix}.norm2", padding=1, groups=self.spec.cardinality)
        h = self._conv_norm_act(h, f"{prefix}.conv3", f"{prefix}.norm3", padding=0, act=False)
        return self._act(ad.add(h, x))

    def forward(self, x: Tensor) -> Tensor:
        """[N, in_channels, D, H, W] -> logits [N, out_channels, D, H, W]."""
        if x.data.ndim != 5 or x.shape[1] != self.spec.in_channels:
            raise SpecMismatch(f"expected input [N,{self.spec.in_channels},D,H,W], got {x.shape}")
        skips = []
        for i, stage in enumerate(self.spec.stages, start=1):
            prefix = f"enc.stage{i}"
            stride = tuple(2 if d else 1 for d in stage.downsample)
            x = self._conv_norm_act(x, f"{prefix}.entry.conv", f"{prefix}.entry.norm", stride=stride)
            for b in range(stage.blocks):
                x = self._resnext_block(x, f"{prefix}.block{b}")
            skips.append(x)

        y = skips[-1]
        for k in range(self.spec.n_stages - 1, 0, -1):
            factors = tuple(2 if d else 1 for d in self.spec.stages[k].downsample)
            skip = skips[k - 1]
            y = ad.upsample_trilinear(y, factors)
            y = ad.crop_spatial(y, skip.shape[2:])
            y = ad.concat([y, skip], axis=1)
            y = self._conv_norm_act(y, f"dec.stage{k}.conv1", f"dec.stage{k}.norm1")
            y = self._conv_norm_act(y, f"dec.stage{k}.conv2", f"dec.stage{k}.norm2")

        return ad.conv3d(y, self._t("head.conv.weight"), self._t("head.conv.bias"))

    __call__ = forward

    def predict(self, image: np.ndarray) -> np.ndarray:
        """Sigmoid probabilities for a [D,H,W] or [N,1,D,H,W] array, without a tape."""
        arr = np.asarray(image)
        squeeze = arr.ndim == 3
        if squeeze:
            arr = arr[None, None]
        dtype = next(iter(self.params)).data.dtype
        with ad.no_grad():
            prob = ad.sigmoid(self.forward(Tensor(arr, dtype=dtype))).data
        return prob[0, 0] if squeeze else prob


def binarize(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """p >= threshold is foreground."""
    return (prob >= threshold).astype(np.uint8)


def build_model(spec: ModelSpec, seed: int, dtype=np.float32) -> UNet3D:
    """He-initialized model; the same (spec, seed) always gives bitwise-identical parameters."""
    rng = np.random.default_rng(seed)
    params = [
        Parameter(name, Tensor(_initial_value(init, shape, fan_in, rng, dtype), requires_grad=True, dtype=dtype), tag)
        for name, shape, tag, init, fan_in in spec.parameter_layout()
    ]
    model = UNet3D(spec, ParameterSet(params, spec=spec))
    logger.debug("built model with %d tensors (%d values)", len(model.params), model.params.num_values())
    return model


def _check_compatible(source: ParameterSet, target: ParameterSet) -> None:
    if set(source.names()) != set(target.names()):
        missing = sorted(set(source.names()) ^ set(target.names()))[:5]
        raise SpecMismatch(f"parameter names differ (e.g. {missing})")
    for p in source:
        q = target[p.name]
        if p.data.shape != q.data.shape or p.stage_tag != q.stage_tag:
            raise SpecMismatch(f"parameter {p.name}: {p.data.shape}/{p.stage_tag} vs {q.data.shape}/{q.stage_tag}")
    if source.spec is not None and target.spec is not None and source.spec.fingerprint() != target.spec.fingerprint():
        raise SpecMismatch("source and target were built from different model specs")


def transfer_weights(source: ParameterSet, target: ParameterSet, reinit_head: bool, seed: int) -> ParameterSet:
    """Copy every non-head tensor from source; optionally give the target a fresh head."""
    _check_compatible(source, target)
    rng = np.random.default_rng(seed)
    layout = {name: (shape, init, fan_in) for name, shape, _, init, fan_in in
              (target.spec or source.spec).parameter_layout()} if reinit_head else {}
    out = []
    for q in target:
        dtype = q.data.dtype
        if reinit_head and q.stage_tag == "head":
            shape, init, fan_in = layout[q.name]
            value = _initial_value(init, shape, fan_in, rng, dtype)
        else:
            value = source[q.name].data.astype(dtype)
        out.append(Parameter(q.name, Tensor(value, requires_grad=True, dtype=dtype), q.stage_tag))
    return ParameterSet(out, spec=target.spec or source.spec)


def set_trainable(params: ParameterSet, stage_tags: Iterable[str], trainable: bool) -> None:
    """Flip the trainable flag of exactly the parameters carrying the given tags."""
    stage_tags = set(stage_tags)
    unknown = stage_tags - set(params.tags())
    if unknown:
        raise UnknownTag(f"unknown stage tags: {sorted(unknown)}")
    for p in params:
        if p.stage_tag in stage_tags:
            p.trainable = trainable


# --- checkpoints -----------------------------------------------------------

def _checkpoint_paths(path) -> Tuple[Path, Path]:
    path = Path(path)
    name = path.name
    for suffix in (".manifest.json", ".weights.raw"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
    return path.parent / f"{name}.manifest.json", path.parent / f"{name}.weights.raw"


def checkpoint_exists(path) -> bool:
    manifest, weights = _checkpoint_paths(path)
    return manifest.is_file() and weights.is_file()


def save_checkpoint(params: ParameterSet, path) -> None:
    manifest_path, weights_path = _checkpoint_paths(path)
    entries, chunks, offset = [], [], 0
    for p in params:
        data = np.ascontiguousarray(p.data, dtype="<f4")
        entries.append({"name": p.name, "shape": list(data.shape), "stage_tag": p.stage_tag,
                        "trainable": p.trainable, "offset": offset, "count": int(data.size)})
        chunks.append(data.tobytes(order="C"))
        offset += int(data.size)
    manifest = {
        "format": "c2w-checkpoint",
        "version": 1,
        "dtype": "f32",
        "payload_bytes": offset * 4,
        "spec": params.spec.to_dict() if params.spec is not None else None,
        "spec_fingerprint": params.spec.fingerprint() if params.spec is not None else None,
        "parameters": entries,
    }
    atomic_write_bytes(weights_path, b"".join(chunks))
    atomic_write_bytes(manifest_path, (json.dumps(manifest, indent=1) + "\n").encode())


def _check_extents(entries, n_values: int, manifest_path) -> None:
    """Each entry's slice lies inside the payload and no two slices overlap."""
    spans = []
    for e in entries:
        offset, count = e.get("offset"), e.get("count")
        if not all(isinstance(v, int) and not isinstance(v, bool) for v in (offset, count)):
            raise ManifestMismatch(f"{manifest_path}: {e.get('name')}: offset and count must be integers")
        if count != int(np.prod(e["shape"], dtype=np.int64)):
            raise ManifestMismatch(f"{manifest_path}: {e.get('name')}: count {count} "
                                   f"does not match shape {e['shape']}")
        if offset < 0 or offset + count > n_values:
            raise ManifestMismatch(f"{manifest_path}: {e.get('name')}: values [{offset}, {offset + count}) "
                                   f"outside a payload of {n_values}")
        spans.append((offset, offset + count, e["name"]))
    spans.sort()
    for (_, end, first), (start, _, second) in zip(spans, spans[1:]):
        if start < end:
            raise ManifestMismatch(f"{manifest_path}: {first} and {second} overlap in the payload")


def load_checkpoint(path) -> ParameterSet:
    manifest_path, weights_path = _checkpoint_paths(path)
    try:
        with open(manifest_path, "r") as f:
            manifest = json.load(f)
        with open(weights_path, "rb") as f:
            payload = f.read()
    except json.JSONDecodeError as e:
        raise ManifestMismatch(f"{manifest_path}: invalid JSON ({e})") from e
    except OSError as e:
        raise IoFailure(f"cannot read checkpoint {path}: {e}") from e

    try:
        entries = manifest["parameters"]
        expected = sum(int(np.prod(e["shape"], dtype=np.int64)) for e in entries) * 4
    except (KeyError, TypeError) as e:
        raise ManifestMismatch(f"{manifest_path}: malformed manifest ({e})") from e
    if len(payload) != expected or manifest.get("payload_bytes") != expected:
        raise ManifestMismatch(f"{weights_path}: payload is {len(payload)} bytes, manifest implies {expected}")

    values = np.frombuffer(payload, dtype="<f4")
    _check_extents(entries, values.size, manifest_path)
    spec = ModelSpec.from_dict(manifest["spec"]) if manifest.get("spec") else None
    params = []
    for e in entries:
        data = values[e["offset"]: e["offset"] + e["count"]].reshape(e["shape"]).astype(np.float32)
        params.append(Parameter(e["name"], Tensor(data, requires_grad=True, dtype=np.float32),
                                e["stage_tag"], bool(e.get("trainable", True))))
    pset = ParameterSet(params, spec=spec)
    if spec is not None:
        layout = {name: (tuple(shape), tag) for name, shape, tag, _, _ in spec.parameter_layout()}
        if layout != {p.name: (p.data.shape, p.stage_tag) for p in pset}:
            raise ManifestMismatch(f"{manifest_path}: parameters do not match the recorded model spec")
    return pset


def load_model(path) -> UNet3D:
    params = load_checkpoint(path)
    if params.spec is None:
        raise ManifestMismatch(f"checkpoint {path} records no model spec")
    return UNet3D(params.spec, params)
