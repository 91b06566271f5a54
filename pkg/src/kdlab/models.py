"""Capacity-laddered MLP and small-convnet families, plus checkpoint I/O.

Width factor ``w`` gives ``8*w`` hidden units per MLP layer or ``4*w``
channels per conv block; depth factor is the number of hidden layers / conv
blocks.  Conv blocks are ``conv3x3 -> relu -> avgpool2`` (pooling is skipped
once the map would shrink below 2x2); the post-relu map of each block is
exposed for attention transfer.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, FormatError, ParameterError
from .rng import stream

MLP_BASE_WIDTH = 8
CONV_BASE_CHANNELS = 4
CKPT_MAGIC = b"DLAB"
CKPT_VERSION = 1

FAMILIES = ("mlp", "convnet")


@dataclass(frozen=True)
class ModelSpec:
    family: str
    depth_factor: int
    width_factor: int
    input_shape: tuple[int, ...]
    num_classes: int
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise ParameterError(f"unknown model family {self.family!r}; expected one of {FAMILIES}")
        if self.depth_factor < 1 or self.width_factor < 1:
            raise ParameterError(
                f"depth_factor and width_factor must be positive, got {self.depth_factor}/{self.width_factor}"
            )
        if self.num_classes < 2:
            raise ParameterError(f"num_classes must be at least 2, got {self.num_classes}")
        want = 1 if self.family == "mlp" else 3
        if len(self.input_shape) != want or min(self.input_shape) < 1:
            raise ParameterError(f"{self.family} expects a {want}-d input_shape, got {self.input_shape}")

    def with_seed(self, seed: int) -> "ModelSpec":
        return ModelSpec(self.family, self.depth_factor, self.width_factor, self.input_shape, self.num_classes, seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            family=d["family"],
            depth_factor=int(d["depth_factor"]),
            width_factor=int(d["width_factor"]),
            input_shape=tuple(d["input_shape"]),
            num_classes=int(d["num_classes"]),
            init_seed=int(d.get("init_seed", 0)),
        )

    @property
    def label(self) -> str:
        return f"{self.family}-{self.depth_factor}-{self.width_factor}"


def _layer_shapes(spec: ModelSpec) -> list[tuple[str, tuple[int, ...]]]:
    shapes: list[tuple[str, tuple[int, ...]]] = []
    if spec.family == "mlp":
        width = MLP_BASE_WIDTH * spec.width_factor
        fan_in = spec.input_shape[0]
        for i in range(spec.depth_factor):
            shapes += [(f"block{i}.weight", (fan_in, width)), (f"block{i}.bias", (width,))]
            fan_in = width
    else:
        ch = CONV_BASE_CHANNELS * spec.width_factor
        c_in = spec.input_shape[0]
        for i in range(spec.depth_factor):
            shapes += [(f"block{i}.weight", (ch, c_in, 3, 3)), (f"block{i}.bias", (ch,))]
            c_in = ch
        fan_in = ch
    shapes += [("head.weight", (fan_in, spec.num_classes)), ("head.bias", (spec.num_classes,))]
    return shapes


def parameter_count(spec: ModelSpec) -> int:
    spec.validate()
    return sum(math.prod(s) for _, s in _layer_shapes(spec))


@dataclass
class Model:
    spec: ModelSpec
    params: dict[str, Tensor] = field(default_factory=dict)

    def parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def forward(self, x) -> tuple[Tensor, list[Tensor]]:
        return forward(self, x)

    def __call__(self, x) -> Tensor:
        return forward(self, x)[0]

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in self.params.items():
            v.data = np.array(state[k], dtype=np.float32)

    def clone(self) -> "Model":
        return Model(self.spec, {k: Tensor(v.data, requires_grad=True) for k, v in self.params.items()})


def build(spec: ModelSpec) -> Model:
    """Instantiate ``spec`` with He-scaled uniform weights and zero biases."""
    spec.validate()
    rng = stream(spec.init_seed, "init")
    params: dict[str, Tensor] = {}
    for name, shape in _layer_shapes(spec):
        if name.endswith(".bias"):
            arr = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = shape[0] if len(shape) == 2 else math.prod(shape[1:])
            bound = math.sqrt(6.0 / fan_in)  # variance 2/fan_in
            arr = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        params[name] = Tensor(arr, requires_grad=True)
    return Model(spec, params)


def forward(model: Model, x) -> tuple[Tensor, list[Tensor]]:
    """Return ``(logits, activation_maps)``; maps are empty for the MLP family."""
    spec = model.spec
    x = x if isinstance(x, Tensor) else Tensor(x)
    if tuple(x.shape[1:]) != spec.input_shape or x.data.ndim != len(spec.input_shape) + 1:
        raise DimensionError(f"{spec.label}: batch shape {x.shape} does not match input shape {spec.input_shape}")
    p = model.params
    maps: list[Tensor] = []
    h = x
    if spec.family == "mlp":
        for i in range(spec.depth_factor):
            h = ad.relu(ad.add_bias(ad.matmul(h, p[f"block{i}.weight"]), p[f"block{i}.bias"]))
    else:
        for i in range(spec.depth_factor):
            h = ad.relu(ad.add_bias(ad.conv2d(h, p[f"block{i}.weight"], 1, 1), p[f"block{i}.bias"]))
            maps.append(h)
            if min(h.shape[2:]) >= 4:
                h = ad.avgpool2d(h, 2)
        n, c, hh, ww = h.shape
        h = ad.mean(ad.reshape(h, (n, c, hh * ww)), axis=2)
    logits = ad.add_bias(ad.matmul(h, p["head.weight"]), p["head.bias"])
    return logits, maps


# checkpoints ---------------------------------------------------------------

def _encode(model: Model) -> bytes:
    buf = io.BytesIO()
    spec_text = json.dumps(model.spec.to_dict(), sort_keys=True).encode("utf-8")
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<H", CKPT_VERSION))
    buf.write(struct.pack("<I", len(spec_text)))
    buf.write(spec_text)
    for name, t in model.params.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", t.data.ndim))
        buf.write(struct.pack(f"<{t.data.ndim}I", *t.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return buf.getvalue()


def checkpoint_digest(model: Model) -> str:
    return hashlib.sha256(_encode(model)).hexdigest()


def save_checkpoint(model: Model, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(_encode(model))
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated checkpoint: needed {n} bytes for {what} at offset {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load_checkpoint(path) -> Model:
    """Parse a checkpoint completely before constructing the model."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4, "magic") != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic, not a DLAB checkpoint")
    (version,) = struct.unpack("<H", r.take(2, "version"))
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        spec = ModelSpec.from_dict(json.loads(r.take(r.u32("spec length"), "spec").decode("utf-8")))
        spec.validate()
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: unreadable spec block ({exc})") from exc
    arrays: dict[str, np.ndarray] = {}
    while r.pos < len(r.data):
        name = r.take(r.u32("name length"), "name").decode("utf-8")
        rank = r.u32("rank")
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank, "extents"))
        n = math.prod(shape)
        arrays[name] = np.frombuffer(r.take(4 * n, f"payload of {name}"), dtype="<f4").reshape(shape)
    expected = dict(_layer_shapes(spec))
    got = {k: tuple(v.shape) for k, v in arrays.items()}
    if list(got) != list(expected) or any(got[k] != expected[k] for k in expected):
        raise FormatError(f"{path}: parameters disagree with spec {spec.label}")
    return Model(spec, {k: Tensor(v.astype(np.float32), requires_grad=True) for k, v in arrays.items()})
