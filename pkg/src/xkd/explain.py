"""Score-CAM saliency, teacher/student heatmap alignment and overlay rendering.

Score-CAM sub-choices: bilinear upsampling (``align_corners=False``),
per-channel min-max normalization with constant channels dropped, the
all-zero mask as baseline, and the post-sigmoid probability of the target
class as the channel score.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .losses import sigmoid
from .models import ModelHandle, forward, forward_with_activations

SIDECAR_TAG = "# xkd-heatmap v1"
OVERLAY_ALPHA = 0.5


@dataclass
class HeatMap:
    values: np.ndarray
    target_class: int
    source_model: str
    source_layer: str
    degenerate: bool = False
    channel_weights: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.values.shape)


@dataclass
class AlignmentScore:
    pearson: float
    iou_at_half: float
    pointing_hit: bool | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _upsample(acts: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(acts, dtype=np.float64))[None]
    return F.interpolate(t, size=size, mode="bilinear", align_corners=False)[0].numpy()


def _minmax(a: np.ndarray) -> np.ndarray:
    lo, hi = a.min(), a.max()
    return (a - lo) / (hi - lo)


def _class_prob(model: ModelHandle, x: np.ndarray, target_class: int, batch_size: int) -> np.ndarray:
    out = [forward(model, x[i : i + batch_size])[:, target_class] for i in range(0, len(x), batch_size)]
    return sigmoid(np.concatenate(out))


def score_cam_from_activations(
    model: ModelHandle,
    image: np.ndarray,
    target_class: int,
    activations: np.ndarray,
    layer: str = "",
    batch_size: int = 32,
) -> HeatMap:
    """Score-CAM given an already captured ``[K, H', W']`` activation stack."""
    image = np.asarray(image, dtype=np.float64)
    if not 0 <= target_class < model.num_classes:
        raise IndexError(f"target class {target_class} out of range for {model.num_classes} classes")
    acts = np.asarray(activations, dtype=np.float64)
    if acts.ndim != 3:
        raise ValueError(f"activations must be [K, H, W], got shape {acts.shape}")
    H, W = image.shape[1:]
    zero = HeatMap(np.zeros((H, W)), target_class, model.name, layer, degenerate=True, channel_weights=np.zeros(0))

    # Canonical channel order: the result is then exactly (bitwise)
    # independent of how the caller ordered the channels.
    flat = acts.reshape(len(acts), -1)
    acts = acts[np.lexsort(flat.T[::-1])]

    up = _upsample(acts, (H, W))
    lo = up.reshape(len(up), -1).min(axis=1)
    hi = up.reshape(len(up), -1).max(axis=1)
    live = hi > lo
    if not live.any():
        warnings.warn(f"all activation channels of {model.name}:{layer} are constant; returning a zero heatmap")
        return zero
    up = up[live]
    norm = (up - lo[live, None, None]) / (hi - lo)[live, None, None]

    masked = image[None] * norm[:, None]
    scores = _class_prob(model, masked, target_class, batch_size)
    baseline = _class_prob(model, np.zeros_like(image)[None], target_class, 1)[0]
    z = scores - baseline
    w = np.exp(z - z.max())
    w /= w.sum()

    cam = np.maximum(np.tensordot(w, up, axes=1), 0.0)
    if cam.max() <= cam.min():
        return HeatMap(np.zeros((H, W)), target_class, model.name, layer, degenerate=True, channel_weights=w)
    return HeatMap(_minmax(cam), target_class, model.name, layer, channel_weights=w)


def score_cam(model: ModelHandle, image, target_class: int, layer: str | None = None, batch_size: int = 32) -> HeatMap:
    """Score-CAM heatmap at input resolution, normalized to ``[0, 1]``.

    ``layer`` defaults to the model's last convolutional capture layer.
    """
    layer = layer or model.last_conv_layer
    image = np.asarray(image, dtype=np.float64)
    if not 0 <= target_class < model.num_classes:
        raise IndexError(f"target class {target_class} out of range for {model.num_classes} classes")
    _, acts = forward_with_activations(model, image[None], layer)
    return score_cam_from_activations(model, image, target_class, acts[0], layer, batch_size)


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a.ravel() - a.mean()
    b = b.ravel() - b.mean()
    den = np.sqrt(np.dot(a, a) * np.dot(b, b))
    if den == 0:
        return 0.0
    return float(np.clip(np.dot(a, b) / den, -1.0, 1.0))


def _half_max_mask(v: np.ndarray) -> np.ndarray:
    m = v.max()
    if m <= 0:
        return np.zeros(v.shape, dtype=bool)
    return v >= 0.5 * m


def in_box(point: tuple[int, int], box: Sequence[int]) -> bool:
    """``point`` is (row, col); ``box`` is inclusive ``[x0, y0, x1, y1]``."""
    r, c = point
    x0, y0, x1, y1 = box
    return bool(x0 <= c <= x1 and y0 <= r <= y1)


def peak(v: np.ndarray) -> tuple[int, int]:
    r, c = np.unravel_index(int(np.argmax(v)), v.shape)
    return int(r), int(c)


def pointing_hit(hm: HeatMap | np.ndarray, box: Sequence[int]) -> bool:
    v = hm.values if isinstance(hm, HeatMap) else np.asarray(hm)
    return in_box(peak(v), box)


def alignment(t_map: HeatMap | np.ndarray, s_map: HeatMap | np.ndarray, region: Sequence[int] | None = None) -> AlignmentScore:
    """Pearson correlation, IoU of half-max masks and (optionally) the student's pointing hit."""
    t = t_map.values if isinstance(t_map, HeatMap) else np.asarray(t_map, dtype=np.float64)
    s = s_map.values if isinstance(s_map, HeatMap) else np.asarray(s_map, dtype=np.float64)
    if t.shape != s.shape:
        raise ValueError(f"heatmap shapes differ: {t.shape} vs {s.shape}")
    mt, ms = _half_max_mask(t), _half_max_mask(s)
    union = np.logical_or(mt, ms).sum()
    iou = float(np.logical_and(mt, ms).sum() / union) if union else 0.0
    hit = None if region is None else pointing_hit(s, region)
    return AlignmentScore(_pearson(t, s), iou, hit)


def heatmap_entropy(hm: HeatMap | np.ndarray) -> float:
    """Shannon entropy (nats) of the map read as a spatial distribution."""
    v = hm.values if isinstance(hm, HeatMap) else np.asarray(hm, dtype=np.float64)
    total = v.sum()
    if total <= 0:
        return 0.0
    p = v.ravel() / total
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def _jet_lut() -> np.ndarray:
    # piecewise-linear jet: blue -> cyan -> yellow -> red, 256 entries
    x = np.linspace(0.0, 1.0, 256)
    r = np.clip(1.5 - np.abs(4 * x - 3), 0, 1)
    g = np.clip(1.5 - np.abs(4 * x - 2), 0, 1)
    b = np.clip(1.5 - np.abs(4 * x - 1), 0, 1)
    return np.round(np.stack([r, g, b], axis=1) * 255).astype(np.uint8)


COLORMAP = _jet_lut()


def to_rgb8(image) -> np.ndarray:
    a = np.asarray(image, dtype=np.float64)
    if a.ndim == 3 and a.shape[0] in (1, 3):
        a = a.transpose(1, 2, 0)
    if a.ndim == 2:
        a = a[..., None]
    if a.shape[2] == 1:
        a = np.repeat(a, 3, axis=2)
    return np.round(np.clip(a, 0, 1) * 255).astype(np.uint8)


def overlay(hm: HeatMap, image) -> np.ndarray:
    rgb = to_rgb8(image).astype(np.float64)
    idx = np.round(np.clip(hm.values, 0, 1) * 255).astype(np.int64)
    color = COLORMAP[idx].astype(np.float64)
    return np.round((1 - OVERLAY_ALPHA) * rgb + OVERLAY_ALPHA * color).astype(np.uint8)


def render_heatmap(maps: HeatMap | Sequence[HeatMap], image, path) -> Path:
    """Write ``original | overlay_1 | overlay_2 ...`` as one PNG; first map is the teacher.

    A raw-value sidecar ``<stem>.<model>.heatmap.txt`` is written next to it per map.
    """
    maps = [maps] if isinstance(maps, HeatMap) else list(maps)
    rgb = to_rgb8(image)
    for hm in maps:
        if hm.shape != rgb.shape[:2]:
            raise ValueError(f"heatmap shape {hm.shape} does not match image {rgb.shape[:2]}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    panels = [rgb] + [overlay(hm, image) for hm in maps]
    Image.fromarray(np.concatenate(panels, axis=1)).save(path)
    for hm in maps:
        save_heatmap(hm, path.with_name(f"{path.stem}.{hm.source_model}.heatmap.txt"))
    return path


def save_heatmap(hm: HeatMap, path) -> Path:
    path = Path(path)
    header = "\n".join(
        [
            SIDECAR_TAG,
            f"# shape {hm.shape[0]} {hm.shape[1]}",
            f"# class {hm.target_class}",
            f"# model {hm.source_model}",
            f"# layer {hm.source_layer}",
            f"# degenerate {int(hm.degenerate)}",
        ]
    )
    body = "\n".join(" ".join(f"{v:.17g}" for v in row) for row in hm.values)
    path.write_text(header + "\n" + body + "\n")
    return path


def load_heatmap(path) -> HeatMap:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != SIDECAR_TAG:
        raise ValueError(f"{path} is not a heatmap sidecar")
    meta = {}
    rows = []
    for line in lines[1:]:
        if line.startswith("# "):
            key, _, val = line[2:].partition(" ")
            meta[key] = val
        elif line.strip():
            rows.append([float(v) for v in line.split()])
    h, w = map(int, meta["shape"].split())
    values = np.array(rows, dtype=np.float64).reshape(h, w)
    return HeatMap(values, int(meta["class"]), meta["model"], meta["layer"], bool(int(meta["degenerate"])))


def append_report(path, record: dict) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
