# app/network.py
"""
Module: network.py

The multi-head network: a shared convolutional encoder E (parameters
``encoder.*``), a K-way main classification head M (``main.*``) and a 4-way
rotation head P (``pretext.*``). Both heads read the same encoder output.

Encoder: for each entry of ``ArchSpec.conv_channels`` a ``k×k`` convolution
(padding ``k//2``), relu and 2×2 max pooling; then flatten, a dense layer to
``feature_dim`` and relu. No batch normalization, so forward passes are pure.

Checkpoints are a small versioned binary: ``b"SSDA1"`` followed, per named
parameter, by the name length, UTF-8 name, rank, extents (little-endian
uint32) and the raw float64 little-endian values.
"""
from __future__ import annotations

import logging
import struct
from pathlib import Path
from typing import Dict, List, Union

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator

from app import autodiff as ad
from app.autodiff import Tensor
from app.errors import ShapeError

logger = logging.getLogger(__name__)

N_ROTATIONS = 4
CHECKPOINT_MAGIC = b"SSDA1"


class ArchSpec(BaseModel):
    in_channels: int = Field(3, ge=1)
    image_size: int = Field(32, ge=4, description="Input height and width")
    conv_channels: List[int] = Field(default_factory=lambda: [16, 32], description="Output channels per conv block")
    kernel_size: int = Field(3, ge=1)
    feature_dim: int = Field(64, ge=1)
    n_classes: int = Field(5, ge=2)

    @field_validator("kernel_size")
    def validate_kernel(cls, value):
        if value % 2 == 0:
            raise ValueError("kernel_size must be odd")
        return value

    @field_validator("conv_channels")
    def validate_channels(cls, value):
        if not value or any(c < 1 for c in value):
            raise ValueError("conv_channels must be a non-empty list of positive ints")
        return value

    @model_validator(mode="after")
    def validate_geometry(self):
        if self.image_size % (2 ** len(self.conv_channels)):
            raise ValueError(f"image_size {self.image_size} must be divisible by {2 ** len(self.conv_channels)}")
        return self

    @property
    def flat_dim(self) -> int:
        side = self.image_size // 2 ** len(self.conv_channels)
        return self.conv_channels[-1] * side * side


class MultiHeadNet:
    """Named parameter tensors of E, M and P plus the architecture they follow."""

    def __init__(self, arch: ArchSpec, params: Dict[str, Tensor]):
        self.arch = arch
        self.params = params

    @property
    def feature_dim(self) -> int:
        return self.arch.feature_dim

    def _group(self, prefix: str) -> Dict[str, Tensor]:
        return {name: p for name, p in self.params.items() if name.startswith(prefix)}

    @property
    def encoder_params(self) -> Dict[str, Tensor]:
        return self._group("encoder.")

    @property
    def main_head_params(self) -> Dict[str, Tensor]:
        return self._group("main.")

    @property
    def pretext_head_params(self) -> Dict[str, Tensor]:
        return self._group("pretext.")

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def zero_grads(self) -> None:
        ad.zero_grads(self.params.values())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def copy(self) -> "MultiHeadNet":
        return MultiHeadNet.from_state(self.arch, self.state_dict())

    @classmethod
    def from_state(cls, arch: ArchSpec, state: Dict[str, np.ndarray]) -> "MultiHeadNet":
        expected = _param_shapes(arch)
        if list(state) != list(expected):
            raise ValueError(f"state names {list(state)} do not match architecture {list(expected)}")
        for name, shape in expected.items():
            if state[name].shape != shape:
                raise ShapeError(f"load {name}", state[name].shape, shape)
        return cls(arch, {name: ad.parameter(arr) for name, arr in state.items()})


def _param_shapes(arch: ArchSpec) -> Dict[str, tuple]:
    shapes: Dict[str, tuple] = {}
    c_in = arch.in_channels
    k = arch.kernel_size
    for i, c_out in enumerate(arch.conv_channels):
        shapes[f"encoder.conv{i}.weight"] = (c_out, c_in, k, k)
        shapes[f"encoder.conv{i}.bias"] = (c_out,)
        c_in = c_out
    shapes["encoder.dense.weight"] = (arch.flat_dim, arch.feature_dim)
    shapes["encoder.dense.bias"] = (arch.feature_dim,)
    shapes["main.weight"] = (arch.feature_dim, arch.n_classes)
    shapes["main.bias"] = (arch.n_classes,)
    shapes["pretext.weight"] = (arch.feature_dim, N_ROTATIONS)
    shapes["pretext.bias"] = (N_ROTATIONS,)
    return shapes


def init(seed: int, arch: ArchSpec) -> MultiHeadNet:
    """
    Build a network with He-normal weights (std ``sqrt(2 / fan_in)``) and zero biases.

    The same seed always gives bit-identical parameters.
    """
    logger.debug(f"init() called with seed={seed}, arch={arch.model_dump()}")
    rng = np.random.default_rng(seed)
    state: Dict[str, np.ndarray] = {}
    for name, shape in _param_shapes(arch).items():
        if name.endswith(".bias"):
            state[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            state[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    return MultiHeadNet.from_state(arch, state)


def encode(net: MultiHeadNet, images: Union[Tensor, np.ndarray]) -> Tensor:
    """Map ``n×C×H×W`` images to ``n×feature_dim`` features."""
    x = images if isinstance(images, Tensor) else Tensor(images)
    arch = net.arch
    expected = (arch.in_channels, arch.image_size, arch.image_size)
    if x.ndim != 4 or x.shape[1:] != expected:
        logger.error(f"encode() got images of shape {x.shape}, expected (n, {expected})")
        raise ShapeError("encode", x.shape, (-1,) + expected)
    p = net.params
    for i in range(len(arch.conv_channels)):
        x = ad.conv2d(x, p[f"encoder.conv{i}.weight"], p[f"encoder.conv{i}.bias"], stride=1, padding=arch.kernel_size // 2)
        x = ad.max_pool2d(ad.relu(x))
    x = ad.reshape(x, (x.shape[0], arch.flat_dim))
    return ad.relu(ad.add_bias(ad.matmul(x, p["encoder.dense.weight"]), p["encoder.dense.bias"]))


def _head(features: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if features.ndim != 2 or features.shape[1] != weight.shape[0]:
        raise ShapeError("head", features.shape, weight.shape)
    return ad.add_bias(ad.matmul(features, weight), bias)


def main_logits(net: MultiHeadNet, features: Tensor) -> Tensor:
    return _head(features, net.params["main.weight"], net.params["main.bias"])


def pretext_logits(net: MultiHeadNet, features: Tensor) -> Tensor:
    return _head(features, net.params["pretext.weight"], net.params["pretext.bias"])


# ----------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------
def save_checkpoint(net: MultiHeadNet, path: Union[str, Path]) -> None:
    chunks = [CHECKPOINT_MAGIC]
    for name, arr in net.state_dict().items():
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)) + encoded)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))
    logger.info(f"Saved checkpoint {path}")


def load_checkpoint(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        logger.error(f"{path} is not a checkpoint")
        raise ValueError(f"{path}: missing {CHECKPOINT_MAGIC!r} header")
    state: Dict[str, np.ndarray] = {}
    pos = len(CHECKPOINT_MAGIC)
    try:
        while pos < len(raw):
            (name_len,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            count = int(np.prod(shape))
            state[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(shape)
            pos += 8 * count
    except (struct.error, ValueError) as exc:
        raise ValueError(f"{path}: truncated checkpoint") from exc
    return state


def arch_from_state(state: Dict[str, np.ndarray], image_size: int) -> ArchSpec:
    """Recover the ``ArchSpec`` that produced a checkpoint."""
    conv = [state[name] for name in state if name.startswith("encoder.conv") and name.endswith(".weight")]
    if not conv or "main.weight" not in state:
        raise ValueError("checkpoint is missing encoder or head parameters")
    return ArchSpec(
        in_channels=conv[0].shape[1],
        image_size=image_size,
        conv_channels=[w.shape[0] for w in conv],
        kernel_size=conv[0].shape[2],
        feature_dim=state["main.weight"].shape[0],
        n_classes=state["main.weight"].shape[1],
    )


def load_net(path: Union[str, Path], image_size: int) -> MultiHeadNet:
    state = load_checkpoint(path)
    return MultiHeadNet.from_state(arch_from_state(state, image_size), state)
