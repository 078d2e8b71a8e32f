"""Model abstraction, toy teacher/student CNNs and the checkpoint format.

The toy networks classify *where* a blob sits, which a translation-invariant
conv stack followed by global average pooling cannot do on its own. Each
model therefore appends two intensity-gated coordinate channels,
``mean_c(image) * x`` and ``mean_c(image) * y`` with x, y in [-1, 1], before
the first convolution. Gating keeps features silent on dark background, so a
zero image still yields the pure bias response and Score-CAM masks remove
the positional signal together with the pixels.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from pathlib import Path
from typing import Any, Callable

import numpy as np
import torch
import torch.nn as nn

CKPT_MAGIC = b"XKDCKPT\x00"
CKPT_VERSION = 1
INIT_SCHEME = "fan_in_uniform"


class ModelHandle(nn.Module):
    """Base class for anything the pipeline can train, distill or explain.

    Subclasses set ``name``, ``input_shape`` (C, H, W), ``num_classes`` and
    ``capture_layers`` (ordered ids of submodules whose outputs are
    post-nonlinearity feature maps). Adapters around external networks only
    need to fill these in and implement ``forward``.
    """

    name: str
    input_shape: tuple[int, int, int]
    num_classes: int
    capture_layers: tuple[str, ...]
    arch: dict[str, Any]

    def __init__(self):
        super().__init__()
        self.frozen = False

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    @property
    def last_conv_layer(self) -> str:
        return self.capture_layers[-1]

    def capture_module(self, layer: str) -> nn.Module:
        if layer not in self.capture_layers:
            raise KeyError(f"unknown layer {layer!r} for model {self.name!r}; choose from {list(self.capture_layers)}")
        return self.get_submodule(layer)

    def train(self, mode: bool = True):
        # frozen models stay in inference mode no matter what the caller asks
        return super().train(mode and not self.frozen)


class CoordChannels(nn.Module):
    def __init__(self, height: int, width: int):
        super().__init__()
        self.height = height
        self.width = width

    def forward(self, x):
        h, w = self.height, self.width
        ys = torch.linspace(-1.0, 1.0, h, dtype=x.dtype).view(h, 1).expand(h, w)
        xs = torch.linspace(-1.0, 1.0, w, dtype=x.dtype).view(1, w).expand(h, w)
        lum = x.mean(dim=1, keepdim=True)
        return torch.cat([x, lum * xs, lum * ys], dim=1)


class ToyCNN(ModelHandle):
    """Conv/ReLU blocks, optional max-pools, global average pool, dropout, linear head."""

    def __init__(
        self,
        name: str,
        num_classes: int,
        widths: tuple[int, ...],
        pool_after: tuple[int, ...] = (),
        in_channels: int = 3,
        image_size: int = 32,
        coord: bool = True,
        dropout: float = 0.2,
    ):
        super().__init__()
        self.name = name
        self.num_classes = num_classes
        self.input_shape = (in_channels, image_size, image_size)
        self.arch = dict(
            name=name,
            num_classes=num_classes,
            widths=list(widths),
            pool_after=list(pool_after),
            in_channels=in_channels,
            image_size=image_size,
            coord=coord,
            dropout=dropout,
        )
        self.coord = CoordChannels(image_size, image_size) if coord else None

        layers: list[tuple[str, nn.Module]] = []
        ids = []
        c_in = in_channels + (2 if coord else 0)
        for i, width in enumerate(widths, start=1):
            block = nn.Sequential(nn.Conv2d(c_in, width, 3, padding=1), nn.ReLU())
            layers.append((f"conv{i}", block))
            ids.append(f"features.conv{i}")
            if i in pool_after:
                layers.append((f"pool{i}", nn.MaxPool2d(2)))
            c_in = width
        self.features = nn.Sequential()
        for key, mod in layers:
            self.features.add_module(key, mod)
        self.capture_layers = tuple(ids)
        self.drop = nn.Dropout(dropout)
        self.head = nn.Linear(c_in, num_classes)

    def forward(self, x):
        if self.coord is not None:
            x = self.coord(x)
        x = self.features(x)
        x = x.mean(dim=(2, 3))
        return self.head(self.drop(x))


def init_fan_in_uniform(model: nn.Module, seed: int) -> None:
    """U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias; head bias zero."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for mod in model.modules():
            if isinstance(mod, (nn.Conv2d, nn.Linear)):
                fan_in = mod.weight[0].numel()
                bound = 1.0 / math.sqrt(fan_in)
                mod.weight.copy_(torch.rand(mod.weight.shape, generator=gen, dtype=mod.weight.dtype) * 2 * bound - bound)
                if mod.bias is not None:
                    mod.bias.copy_(torch.rand(mod.bias.shape, generator=gen, dtype=mod.bias.dtype) * 2 * bound - bound)
        head = getattr(model, "head", None)
        if isinstance(head, nn.Linear) and head.bias is not None:
            head.bias.zero_()


TEACHER_ARCH = dict(widths=(16, 32, 32, 64), pool_after=(1, 2))
STUDENT_ARCH = dict(widths=(16, 32), pool_after=(1,))


def build_toy_teacher(seed: int = 0, num_classes: int = 3, in_channels: int = 3, image_size: int = 32, dropout: float = 0.2) -> ToyCNN:
    model = ToyCNN("toy_teacher", num_classes, in_channels=in_channels, image_size=image_size, dropout=dropout, **TEACHER_ARCH)
    init_fan_in_uniform(model, seed)
    return model


def build_toy_student(seed: int = 0, num_classes: int = 3, in_channels: int = 3, image_size: int = 32, dropout: float = 0.2) -> ToyCNN:
    model = ToyCNN("toy_student", num_classes, in_channels=in_channels, image_size=image_size, dropout=dropout, **STUDENT_ARCH)
    init_fan_in_uniform(model, seed)
    return model


REGISTRY: dict[str, Callable[..., ModelHandle]] = {
    "toy_teacher": build_toy_teacher,
    "toy_student": build_toy_student,
}


def build_model(name: str, **kwargs) -> ModelHandle:
    try:
        factory = REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown model {name!r}; registered: {sorted(REGISTRY)}") from None
    return factory(**kwargs)


def _as_input(model: ModelHandle, images) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(images) if not isinstance(images, torch.Tensor) else images)
    dtype = next(model.parameters()).dtype
    x = x.to(dtype)
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(model.input_shape):
        raise ValueError(f"expected images of shape [B, {', '.join(map(str, model.input_shape))}], got {list(x.shape)}")
    if not torch.isfinite(x).all():
        raise ValueError("images contain non-finite values")
    return x


def forward(model: ModelHandle, images) -> np.ndarray:
    """Inference-mode logits as a float64 ``[B, C]`` array."""
    x = _as_input(model, images)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            out = model(x)
    finally:
        model.train(was_training)
    return out.double().numpy()


def forward_with_activations(model: ModelHandle, images, layer: str) -> tuple[np.ndarray, np.ndarray]:
    """Logits plus the ``[B, K, H', W']`` feature maps of ``layer``."""
    module = model.capture_module(layer)
    x = _as_input(model, images)
    store = {}
    hook = module.register_forward_hook(lambda m, i, o: store.__setitem__("a", o.detach()))
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            out = model(x)
    finally:
        hook.remove()
        model.train(was_training)
    return out.double().numpy(), store["a"].double().numpy()


def freeze(model: ModelHandle) -> ModelHandle:
    model.requires_grad_(False)
    model.frozen = True
    model.eval()
    return model


def parameter_hash(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in model.named_parameters():
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def config_hash(obj: Any) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def save_checkpoint(model: ModelHandle, path, metadata: dict | None = None) -> Path:
    """Write ``magic | u32 version | u32 header length | JSON header | raw params``.

    Parameters are stored little-endian in ``named_parameters`` order, with
    their names, shapes and dtype listed in the header.
    """
    path = Path(path)
    params = [(n, p.detach().cpu().contiguous().numpy()) for n, p in model.named_parameters()]
    dtype = params[0][1].dtype.newbyteorder("<").str
    header = {
        "arch": model.arch,
        "model": model.name,
        "dtype": dtype,
        "params": [[n, list(a.shape)] for n, a in params],
        "parameter_hash": parameter_hash(model),
        "metadata": {"init": INIT_SCHEME, **(metadata or {})},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(blob)))
        fh.write(blob)
        for _, a in params:
            fh.write(a.astype(dtype, copy=False).tobytes())
    return path


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh, path)


def _read_header(fh, path):
    if fh.read(len(CKPT_MAGIC)) != CKPT_MAGIC:
        raise ValueError(f"{path} is not an xkd checkpoint")
    version, n = struct.unpack("<II", fh.read(8))
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    return json.loads(fh.read(n).decode())


def load_checkpoint(path) -> tuple[ToyCNN, dict]:
    with open(path, "rb") as fh:
        header = _read_header(fh, path)
        arch = dict(header["arch"])
        model = ToyCNN(
            arch.pop("name"),
            arch.pop("num_classes"),
            widths=tuple(arch.pop("widths")),
            pool_after=tuple(arch.pop("pool_after")),
            **arch,
        )
        dtype = np.dtype(header["dtype"])
        named = dict(model.named_parameters())
        with torch.no_grad():
            for name, shape in header["params"]:
                count = int(np.prod(shape)) if shape else 1
                a = np.frombuffer(fh.read(count * dtype.itemsize), dtype=dtype).reshape(shape)
                named[name].copy_(torch.from_numpy(a.astype(dtype.newbyteorder("="))))
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after parameter blob")
    if model.parameter_count and parameter_hash(model) != header["parameter_hash"]:
        raise ValueError(f"{path}: parameter hash mismatch")
    return model, header
