"""Image augmentation pipeline and the three augmenter modes.

Images are float tensors of shape (B, C, H, W) with values in [0, 1]. Frame
stacks are handled by treating each consecutive group of three channels as one
RGB frame: geometric ops move every frame identically and colour ops shift
every frame of an image by the same hue.

All random parameters are drawn from a ``numpy.random.Generator`` so that a
seeded generator fully determines the output.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

from .dataio import ContextTargetPair


class AugmentMode(str, enum.Enum):
    BOTH = "both"
    CONTEXT_ONLY = "context_only"
    NONE = "none"


# op name -> (parameter name, default, (low, high))
OP_PARAMS = {
    "translate": ("max_frac", 0.05, (0.0, 1.0)),
    "rotate": ("max_deg", 5.0, (0.0, 180.0)),
    "gaussian_blur": ("sigma_px", 1.0, (0.0, 10.0)),
    "color_jitter": ("max_hue_rad", 0.15, (0.0, math.pi)),
    "erase": ("max_area_frac", 0.05, (0.0, 1.0)),
    "flip_lr": ("p", 0.5, (0.0, 1.0)),
    "gaussian_noise": ("std", 0.02, (0.0, 1.0)),
}


@dataclass(frozen=True)
class AugOp:
    name: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in OP_PARAMS:
            raise ValueError(f"unknown augmentation op {self.name!r}")
        key, default, (lo, hi) = OP_PARAMS[self.name]
        params = dict(self.params)
        params.setdefault(key, default)
        allowed = {key, "fill"} if self.name == "erase" else {key}
        unknown = set(params) - allowed
        if unknown:
            raise ValueError(f"unknown parameters {sorted(unknown)} for op {self.name!r}")
        value = float(params[key])
        if not lo <= value <= hi:
            raise ValueError(f"{self.name}.{key}={value} outside [{lo}, {hi}]")
        params[key] = value
        object.__setattr__(self, "params", params)

    @property
    def magnitude(self) -> float:
        return self.params[OP_PARAMS[self.name][0]]


@dataclass(frozen=True)
class AugmentationSpec:
    ops: tuple = ()
    mode: AugmentMode = AugmentMode.BOTH

    def __post_init__(self):
        object.__setattr__(self, "ops", tuple(self.ops))
        object.__setattr__(self, "mode", AugmentMode(self.mode))

    @classmethod
    def from_config(cls, entries, mode=AugmentMode.BOTH) -> "AugmentationSpec":
        """Build from a list of ``{"op": name, "params": {...}}`` entries."""
        ops = []
        for e in entries:
            unknown = set(e) - {"op", "params"}
            if unknown:
                raise ValueError(f"unknown keys {sorted(unknown)} in augmentation entry")
            ops.append(AugOp(e["op"], dict(e.get("params", {}))))
        return cls(tuple(ops), mode)

    def to_config(self) -> list:
        return [{"op": op.name, "params": dict(op.params)} for op in self.ops]

    def with_mode(self, mode) -> "AugmentationSpec":
        return replace(self, mode=AugmentMode(mode))


def default_augmentations(mode=AugmentMode.BOTH) -> AugmentationSpec:
    """Translation 5%, rotation 5 degrees, blur sigma 1px, hue jitter 0.15 rad."""
    return AugmentationSpec((AugOp("translate", {"max_frac": 0.05}),
                             AugOp("rotate", {"max_deg": 5.0}),
                             AugOp("gaussian_blur", {"sigma_px": 1.0}),
                             AugOp("color_jitter", {"max_hue_rad": 0.15})), mode)


def discriminator_augmentations() -> AugmentationSpec:
    """Erase, blur, noise and rotation; the set used for GAIL discriminators on the bench."""
    return AugmentationSpec((AugOp("erase", {"max_area_frac": 0.05}),
                             AugOp("gaussian_blur", {"sigma_px": 1.0}),
                             AugOp("gaussian_noise", {"std": 0.02}),
                             AugOp("rotate", {"max_deg": 5.0})), AugmentMode.BOTH)


# ---------------------------------------------------------------------------
# functional ops


def warp(images: torch.Tensor, matrices: torch.Tensor) -> torch.Tensor:
    """Bilinear warp with zero padding.

    ``matrices`` is (B, 2, 3) and maps *output* pixel coordinates (x, y) to
    *input* pixel coordinates, with pixel centres at integer positions.
    """
    B, C, H, W = images.shape
    ys, xs = torch.meshgrid(torch.arange(H, dtype=images.dtype),
                            torch.arange(W, dtype=images.dtype), indexing="ij")
    ones = torch.ones_like(xs)
    coords = torch.stack([xs, ys, ones], dim=-1).reshape(1, H * W, 3)
    src = coords @ matrices.to(images.dtype).transpose(1, 2)  # (B, HW, 2)
    gx = (2 * src[..., 0] + 1) / W - 1
    gy = (2 * src[..., 1] + 1) / H - 1
    grid = torch.stack([gx, gy], dim=-1).reshape(B, H, W, 2)
    return F.grid_sample(images, grid, mode="bilinear", padding_mode="zeros", align_corners=False)


def translate_images(images: torch.Tensor, shifts) -> torch.Tensor:
    """Shift each image by ``shifts[i] = (dx, dy)`` pixels (positive = right/down)."""
    shifts = torch.as_tensor(np.asarray(shifts), dtype=images.dtype).reshape(-1, 2)
    m = torch.zeros(len(images), 2, 3, dtype=images.dtype)
    m[:, 0, 0] = 1
    m[:, 1, 1] = 1
    m[:, :, 2] = -shifts
    return warp(images, m)


def rotate_images(images: torch.Tensor, degrees) -> torch.Tensor:
    """Rotate each image about its centre by ``degrees[i]`` (counter-clockwise on screen)."""
    B, C, H, W = images.shape
    theta = torch.as_tensor(np.asarray(degrees), dtype=images.dtype).reshape(-1) * math.pi / 180
    cx, cy = (W - 1) / 2, (H - 1) / 2
    cos, sin = torch.cos(theta), torch.sin(theta)
    # inverse rotation: output -> input; y axis points down on screen
    m = torch.zeros(B, 2, 3, dtype=images.dtype)
    m[:, 0, 0] = cos
    m[:, 0, 1] = -sin
    m[:, 1, 0] = sin
    m[:, 1, 1] = cos
    m[:, 0, 2] = cx - cos * cx + sin * cy
    m[:, 1, 2] = cy - sin * cx - cos * cy
    return warp(images, m)


def gaussian_kernel1d(sigma: float, dtype=torch.float32) -> torch.Tensor:
    radius = max(1, int(math.ceil(3 * sigma)))
    x = torch.arange(-radius, radius + 1, dtype=dtype)
    k = torch.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(images: torch.Tensor, sigma: float) -> torch.Tensor:
    """Separable Gaussian blur with edge replication, applied per channel."""
    if sigma <= 0:
        return images
    C = images.shape[1]
    k = gaussian_kernel1d(sigma, images.dtype)
    r = len(k) // 2
    x = F.pad(images, (r, r, r, r), mode="replicate")
    x = F.conv2d(x, k.view(1, 1, 1, -1).expand(C, 1, 1, -1), groups=C)
    return F.conv2d(x, k.view(1, 1, -1, 1).expand(C, 1, -1, 1), groups=C)


def rgb_to_hsv(rgb: torch.Tensor) -> torch.Tensor:
    """(..., 3, H, W) RGB in [0,1] -> HSV with hue in [0, 1)."""
    r, g, b = (c.contiguous() for c in rgb.unbind(-3))
    maxc = torch.maximum(torch.maximum(r, g), b)
    minc = torch.minimum(torch.minimum(r, g), b)
    delta = maxc - minc
    inv = torch.where(delta > 0, delta, torch.ones_like(delta)).reciprocal()
    s = torch.where(maxc > 0, delta / maxc.clamp_min(1e-30), torch.zeros_like(maxc))
    h = torch.where(maxc == r, (g - b) * inv,
                    torch.where(maxc == g, (b - r) * inv + 2.0, (r - g) * inv + 4.0))
    h = torch.where(delta > 0, torch.remainder(h / 6.0, 1.0), torch.zeros_like(h))
    return torch.stack([h, s, maxc], dim=-3)


def hsv_to_rgb(hsv: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`rgb_to_hsv`: channel n is v - v*s*clamp(min(k, 4 - k), 0, 1), k = (n + 6h) mod 6."""
    h, s, v = hsv.unbind(-3)
    out = []
    for n in (5.0, 3.0, 1.0):
        k = (n + 6.0 * h) % 6.0
        out.append(v - v * s * torch.minimum(k, 4.0 - k).clamp(0.0, 1.0))
    return torch.stack(out, dim=-3)


def shift_hue(images: torch.Tensor, radians) -> torch.Tensor:
    """Rotate the hue of every RGB frame in each image by ``radians[i]`` (mod 2*pi)."""
    B, C, H, W = images.shape
    if C % 3:
        raise ValueError(f"hue jitter needs a multiple of 3 channels, got {C}")
    frames = images.reshape(B, C // 3, 3, H, W)
    hsv = rgb_to_hsv(frames)
    delta = torch.as_tensor(np.asarray(radians), dtype=images.dtype).reshape(B, 1, 1, 1)
    hue = (hsv[:, :, 0] + delta / (2 * math.pi)) % 1.0
    hsv = torch.stack([hue, hsv[:, :, 1], hsv[:, :, 2]], dim=2)
    return hsv_to_rgb(hsv).reshape(B, C, H, W)


def erase_boxes(images: torch.Tensor, boxes, fill) -> torch.Tensor:
    """Fill ``boxes[i] = (top, left, height, width)`` with per-channel ``fill``."""
    out = images.clone()
    fill = torch.as_tensor(fill, dtype=images.dtype).reshape(-1, images.shape[1], 1, 1)
    for i, (top, left, h, w) in enumerate(np.asarray(boxes, dtype=np.int64)):
        if h > 0 and w > 0:
            out[i, :, top:top + h, left:left + w] = fill[i if len(fill) > 1 else 0]
    return out


# ---------------------------------------------------------------------------
# parameter draws


def draw_params(spec: AugmentationSpec, batch_shape, rng: np.random.Generator) -> list:
    """Per-op random parameters for a batch; one independent draw per image."""
    B, C, H, W = batch_shape
    params = []
    for op in spec.ops:
        m = op.magnitude
        if op.name == "translate":
            params.append(rng.uniform(-m, m, size=(B, 2)) * np.array([W, H]))
        elif op.name == "rotate":
            params.append(rng.uniform(-m, m, size=B))
        elif op.name == "color_jitter":
            params.append(rng.uniform(-m, m, size=B))
        elif op.name == "flip_lr":
            params.append(rng.random(B) < m)
        elif op.name == "erase":
            area = rng.uniform(0, m, size=B) * H * W
            aspect = np.exp(rng.uniform(np.log(0.3), np.log(1 / 0.3), size=B))
            h = np.clip(np.round(np.sqrt(area * aspect)), 0, H).astype(int)
            w = np.clip(np.round(np.sqrt(area / aspect)), 0, W).astype(int)
            top = (rng.random(B) * (H - h + 1)).astype(int)
            left = (rng.random(B) * (W - w + 1)).astype(int)
            params.append(np.stack([top, left, h, w], axis=1))
        elif op.name == "gaussian_noise":
            params.append(rng.standard_normal((B, C, H, W)) * m)
        else:  # gaussian_blur has no random parameters
            params.append(None)
    return params


def apply_with_params(spec: AugmentationSpec, batch: torch.Tensor, params: list) -> torch.Tensor:
    x = batch
    for op, p in zip(spec.ops, params):
        if op.magnitude == 0:
            continue
        if op.name == "translate":
            x = translate_images(x, p)
        elif op.name == "rotate":
            x = rotate_images(x, p)
        elif op.name == "gaussian_blur":
            x = gaussian_blur(x, op.magnitude)
        elif op.name == "color_jitter":
            x = shift_hue(x, p)
        elif op.name == "flip_lr":
            mask = torch.as_tensor(p).view(-1, 1, 1, 1)
            x = torch.where(mask, x.flip(-1), x)
        elif op.name == "erase":
            fill = op.params.get("fill")
            if fill is None:
                fill = x.mean(dim=(2, 3))
            x = erase_boxes(x, p, fill)
        elif op.name == "gaussian_noise":
            x = x + torch.as_tensor(p, dtype=x.dtype)
    return x.clamp(0.0, 1.0)


def apply_augmentations(spec: AugmentationSpec, batch: torch.Tensor,
                        rng: np.random.Generator) -> torch.Tensor:
    """Augment a (B, C, H, W) batch; output has the same shape and dtype, clamped to [0, 1]."""
    if batch.ndim != 4:
        raise ValueError("expected a (B, C, H, W) batch")
    if not spec.ops:
        return batch
    return apply_with_params(spec, batch, draw_params(spec, batch.shape, rng))


def augment_pair_batch(spec: AugmentationSpec, context: torch.Tensor, target,
                       rng: np.random.Generator):
    """Apply the augmenter mode to batched contexts and (image) targets.

    Non-image targets (e.g. actions) pass through untouched.
    """
    mode = spec.mode
    if mode == AugmentMode.NONE:
        return context, target
    context = apply_augmentations(spec, context, rng)
    if mode == AugmentMode.BOTH and isinstance(target, torch.Tensor) and target.ndim == 4:
        target = apply_augmentations(spec, target, rng)
    return context, target


def _hwc_to_tensor(a: np.ndarray) -> torch.Tensor:
    a = np.asarray(a)
    scale = 255.0 if a.dtype == np.uint8 else 1.0
    return torch.from_numpy(a.astype(np.float32) / scale).permute(2, 0, 1).unsqueeze(0)


def _tensor_to_hwc(t: torch.Tensor, like: np.ndarray) -> np.ndarray:
    a = t[0].permute(1, 2, 0).numpy()
    if like.dtype == np.uint8:
        return np.round(a * 255.0).astype(np.uint8)
    return a.astype(like.dtype)


def apply_pair(spec: AugmentationSpec, pair: ContextTargetPair,
               rng: np.random.Generator) -> ContextTargetPair:
    """Augment a single (H, W, C) pair according to ``spec.mode``.

    BOTH draws independent parameters for context and target; CONTEXT_ONLY
    leaves the target untouched; NONE returns the pair unchanged.
    """
    if spec.mode == AugmentMode.NONE:
        return pair
    ctx = _tensor_to_hwc(apply_augmentations(spec, _hwc_to_tensor(pair.context), rng), pair.context)
    tgt = pair.target
    if spec.mode == AugmentMode.BOTH and np.ndim(tgt) == 3:
        tgt = _tensor_to_hwc(apply_augmentations(spec, _hwc_to_tensor(tgt), rng), tgt)
    return replace(pair, context=ctx, target=tgt)
