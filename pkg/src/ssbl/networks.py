"""SS-Net (deformation estimator) and SS-SL (dual-branch segmenter).

Both are U-shaped: stride-2 3x3x3 convolutions going down, nearest-neighbour
2x upsampling followed by a 3x3x3 convolution going up, channel widths
doubling per level from ``base_channels``, leaky ReLU everywhere except the
output heads.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .autodiff import (
    Tensor,
    concat_channels,
    conv3d,
    leaky_relu,
    mul,
    softmax_channels,
    upsample_nearest2x,
)

SLOPE = 0.2
HEAD_SCALE = 1e-5
CHECKPOINT_FORMAT = "ssbl-checkpoint/1"

ParameterSet = dict[str, Tensor]


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class SSNetConfig:
    base_channels: int = 8
    depth: int = 4
    in_channels: int = 2
    out_channels: int = 3

    def __post_init__(self):
        if self.depth < 1 or self.base_channels < 1:
            raise ValueError("depth and base_channels must be >= 1")

    def widths(self) -> list[int]:
        return [self.base_channels * 2 ** level for level in range(self.depth + 1)]

    def layer_shapes(self) -> dict[str, tuple[int, int]]:
        """(in, out) channels of every convolution, in construction order."""
        w = self.widths()
        shapes = {"enc0": (self.in_channels, w[0])}
        for level in range(1, self.depth + 1):
            shapes[f"down{level}"] = (w[level - 1], w[level])
        for level in range(self.depth - 1, -1, -1):
            shapes[f"up{level}"] = (w[level + 1] + w[level], w[level])
        shapes["head"] = (w[0], self.out_channels)
        return shapes


@dataclass(frozen=True)
class SSSLConfig:
    image_in: int = 2
    motion_in: int = 3
    base_channels: int = 8
    depth: int = 3
    num_classes: int = 2
    dist_mode: str = "channel"

    def __post_init__(self):
        if self.depth < 1 or self.base_channels < 1:
            raise ValueError("depth and base_channels must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.dist_mode not in ("channel", "mask"):
            raise ValueError("dist_mode must be 'channel' or 'mask'")

    def widths(self) -> list[int]:
        return [self.base_channels * 2 ** level for level in range(self.depth + 1)]

    def layer_shapes(self) -> dict[str, tuple[int, int]]:
        w = self.widths()
        shapes = {}
        for branch, cin in (("img", self.image_in), ("mot", self.motion_in)):
            shapes[f"{branch}.enc0"] = (cin, w[0])
            for level in range(1, self.depth + 1):
                shapes[f"{branch}.down{level}"] = (w[level - 1], w[level])
        below = 2 * w[self.depth]
        for level in range(self.depth - 1, -1, -1):
            shapes[f"up{level}"] = (below + 2 * w[level], w[level])
            below = w[level]
        shapes["head"] = (w[0], self.num_classes)
        return shapes


def _config_doc(cfg) -> dict:
    return {"type": type(cfg).__name__, **asdict(cfg)}


def config_from_doc(doc: dict):
    doc = dict(doc)
    kind = doc.pop("type")
    return {"SSNetConfig": SSNetConfig, "SSSLConfig": SSSLConfig}[kind](**doc)


def parameter_shapes(cfg) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for name, (cin, cout) in cfg.layer_shapes().items():
        shapes[f"{name}.w"] = (cout, cin, 3, 3, 3)
        shapes[f"{name}.b"] = (cout,)
    return shapes


def parameter_count(cfg) -> int:
    return sum(int(np.prod(s)) for s in parameter_shapes(cfg).values())


def init_parameters(cfg, seed: int = 0) -> ParameterSet:
    """He-style Gaussian init; the output head of SS-Net starts within 1e-5 of zero."""
    rng = np.random.default_rng(seed)
    params: ParameterSet = {}
    for name, (cin, cout) in cfg.layer_shapes().items():
        fan_in = cin * 27
        if name == "head" and isinstance(cfg, SSNetConfig):
            w = rng.uniform(-HEAD_SCALE, HEAD_SCALE, (cout, cin, 3, 3, 3))
            b = rng.uniform(-HEAD_SCALE, HEAD_SCALE, cout)
        else:
            std = np.sqrt(2.0 / ((1.0 + SLOPE ** 2) * fan_in))
            w = rng.normal(0.0, std, (cout, cin, 3, 3, 3))
            b = np.zeros(cout)
        params[f"{name}.w"] = Tensor(w.astype(np.float32), requires_grad=True, name=f"{name}.w")
        params[f"{name}.b"] = Tensor(b.astype(np.float32), requires_grad=True, name=f"{name}.b")
    return params


def cast_parameters(params: ParameterSet, dtype) -> ParameterSet:
    return {k: Tensor(v.value.astype(dtype), requires_grad=v.requires_grad, name=k)
            for k, v in params.items()}


def _conv(params, name, x, stride=1, act=True):
    y = conv3d(x, params[f"{name}.w"], params[f"{name}.b"], stride=stride, padding=1)
    return leaky_relu(y, SLOPE) if act else y


def _check_divisible(shape, depth):
    unit = 2 ** depth
    if any(n % unit for n in shape):
        raise ValueError(f"spatial extents {tuple(shape)} must be divisible by 2**depth = {unit}")


def _encode(params, prefix, x, depth):
    feats = [_conv(params, f"{prefix}enc0", x)]
    for level in range(1, depth + 1):
        feats.append(_conv(params, f"{prefix}down{level}", feats[-1], stride=2))
    return feats


def ssnet_forward(params: ParameterSet, I_a: Tensor, I_b: Tensor, cfg: SSNetConfig = SSNetConfig()) -> Tensor:
    """Field on the grid of ``I_a`` that pulls ``I_b`` onto it; shape (3, X, Y, Z)."""
    if I_a.shape != I_b.shape:
        raise ValueError(f"input extents differ: {I_a.shape} vs {I_b.shape}")
    _check_divisible(I_a.shape[1:], cfg.depth)
    feats = _encode(params, "", concat_channels(I_a, I_b), cfg.depth)
    d = feats[-1]
    for level in range(cfg.depth - 1, -1, -1):
        d = _conv(params, f"up{level}", concat_channels(upsample_nearest2x(d), feats[level]))
    return _conv(params, "head", d, act=False)


def sssl_forward(params: ParameterSet, intensity: Tensor, dist_map: Tensor, field: Tensor,
                 cfg: SSSLConfig = SSSLConfig()) -> Tensor:
    """Per-voxel class probabilities (num_classes, X, Y, Z).

    The image branch sees (intensity, distance map) — or, in ``mask`` mode,
    (intensity, intensity * (1 - distance map)); the motion branch sees the
    3-component field. Encoder features of both branches are concatenated at
    every level and feed one decoder.
    """
    if not (intensity.shape[1:] == dist_map.shape[1:] == field.shape[1:]):
        raise ValueError("intensity, distance map and field extents differ")
    _check_divisible(intensity.shape[1:], cfg.depth)
    if cfg.dist_mode == "mask":
        attention = Tensor((1.0 - dist_map.value).astype(intensity.dtype))
        image_in = concat_channels(intensity, mul(intensity, attention))
    else:
        image_in = concat_channels(intensity, dist_map)
    img = _encode(params, "img.", image_in, cfg.depth)
    mot = _encode(params, "mot.", field, cfg.depth)
    d = concat_channels(img[-1], mot[-1])
    for level in range(cfg.depth - 1, -1, -1):
        d = _conv(params, f"up{level}", concat_channels(upsample_nearest2x(d), img[level], mot[level]))
    return softmax_channels(_conv(params, "head", d, act=False))


# ---------------------------------------------------------------------------
# Checkpoints: JSON manifest + one little-endian float32 buffer
# ---------------------------------------------------------------------------

def _ckpt_paths(path) -> tuple[Path, Path]:
    path = Path(path)
    if path.suffix in (".json", ".raw"):
        path = path.with_suffix("")
    return path.with_name(path.name + ".json"), path.with_name(path.name + ".raw")


def save_checkpoint(params: ParameterSet, path, cfg=None, extra: dict | None = None) -> None:
    """Write ``<path>.json`` (names, shapes, offsets, config) and ``<path>.raw``."""
    jpath, rpath = _ckpt_paths(path)
    entries, chunks, offset = [], [], 0
    for name, t in params.items():
        arr = np.ascontiguousarray(t.value, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.size
    doc = {"format": CHECKPOINT_FORMAT, "dtype": "f32", "params": entries}
    if cfg is not None:
        doc["config"] = _config_doc(cfg)
    if extra:
        doc["extra"] = extra
    jpath.parent.mkdir(parents=True, exist_ok=True)
    jpath.write_text(json.dumps(doc, indent=1) + "\n")
    rpath.write_bytes(b"".join(chunks))


@dataclass
class Checkpoint:
    params: ParameterSet
    config: object | None
    extra: dict


def load_checkpoint(path, cfg=None) -> Checkpoint:
    """Read a checkpoint; names and shapes are validated against ``cfg`` (or
    the embedded config when ``cfg`` is omitted)."""
    jpath, rpath = _ckpt_paths(path)
    if not jpath.exists() or not rpath.exists():
        raise FileNotFoundError(f"missing checkpoint {jpath.with_suffix('')}")
    doc = json.loads(jpath.read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{jpath} is not a {CHECKPOINT_FORMAT} file")
    if cfg is None and "config" in doc:
        cfg = config_from_doc(doc["config"])
    flat = np.frombuffer(rpath.read_bytes(), dtype="<f4")
    params: ParameterSet = {}
    for e in doc["params"]:
        end = e["offset"] + e["count"]
        if end > flat.size:
            raise CheckpointError(f"parameter {e['name']!r} runs past the end of {rpath}")
        arr = flat[e["offset"]:end].reshape(e["shape"]).astype(np.float32)
        params[e["name"]] = Tensor(arr, requires_grad=True, name=e["name"])
    if cfg is not None:
        expected = parameter_shapes(cfg)
        for name, shape in expected.items():
            if name not in params:
                raise CheckpointError(f"parameter {name!r} missing from checkpoint")
            if params[name].shape != shape:
                raise CheckpointError(
                    f"parameter {name!r} has shape {params[name].shape}, config expects {shape}")
        unexpected = sorted(set(params) - set(expected))
        if unexpected:
            raise CheckpointError(f"unexpected parameter {unexpected[0]!r}")
    return Checkpoint(params, cfg, doc.get("extra", {}))
