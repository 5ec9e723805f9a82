"""Encoders, decoders and the checkpoint format.

Networks take float tensors laid out (B, C, H, W) in [0, 1]; use
:func:`obs_to_tensor` to convert channel-last uint8 observations.

The encoder is the part of a network that computes the representation z and
is kept for transfer. Everything else a representation learner needs
(projection heads, image decoders, action fusion, inverse-dynamics heads) is a
decoder and never enters an encoder checkpoint.
"""
from __future__ import annotations

import copy
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataio import ActionSpace

REPR_DIM = 128
LOGVAR_MIN, LOGVAR_MAX = -10.0, 2.0


def obs_to_tensor(obs, dtype=torch.float32) -> torch.Tensor:
    """Channel-last uint8 observations (B, H, W, C) -> float (B, C, H, W) in [0, 1]."""
    obs = np.asarray(obs)
    if obs.ndim == 3:
        obs = obs[None]
    x = torch.from_numpy(np.ascontiguousarray(obs)).permute(0, 3, 1, 2)
    if obs.dtype == np.uint8:
        return x.to(dtype) / 255.0
    return x.to(dtype)


def he_init_(module: nn.Module) -> nn.Module:
    """He-normal weights and zero biases for every conv/linear layer in ``module``."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
    return module


def mlp(in_dim: int, hidden_dim: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(in_dim, hidden_dim), nn.ReLU(), nn.Linear(hidden_dim, out_dim))


class Encoder(nn.Module):
    """Small conv trunk for stacked observations of up to 64x64 pixels.

    The first layer is a patchify convolution whose kernel and stride equal one
    eighth of the image height (one grid cell on the bench renders).
    """

    def __init__(self, obs_shape, repr_dim: int = REPR_DIM, gaussian: bool = False):
        super().__init__()
        H, W, C = (int(s) for s in obs_shape)
        self.obs_shape = (H, W, C)
        self.repr_dim = repr_dim
        self.gaussian = gaussian
        patch = max(1, H // 8)
        self.trunk = nn.Sequential(
            nn.Conv2d(C, 32, kernel_size=patch, stride=patch), nn.ReLU(),
            nn.Conv2d(32, 32, kernel_size=3, padding=1), nn.ReLU(),
            nn.Conv2d(32, 64, kernel_size=3, stride=2, padding=1), nn.ReLU(),
            nn.Flatten(),
        )
        with torch.no_grad():
            n_feat = self.trunk(torch.zeros(1, C, H, W)).shape[1]
        self.head = nn.Linear(n_feat, repr_dim)
        self.logvar_head = None
        he_init_(self)
        # built after the mean path so that path initialises exactly like a deterministic encoder
        if gaussian:
            self.logvar_head = he_init_(nn.Linear(n_feat, repr_dim))

    def config(self) -> dict:
        return {"obs_shape": list(self.obs_shape), "repr_dim": self.repr_dim,
                "gaussian": self.gaussian}

    def forward(self, x: torch.Tensor):
        if x.shape[1:] != (self.obs_shape[2], self.obs_shape[0], self.obs_shape[1]):
            raise ValueError(f"encoder expects (B, {self.obs_shape[2]}, {self.obs_shape[0]}, "
                             f"{self.obs_shape[1]}) input, got {tuple(x.shape)}")
        h = self.trunk(x)
        if not self.gaussian:
            return self.head(h)
        return self.head(h), self.logvar_head(h).clamp(LOGVAR_MIN, LOGVAR_MAX)

    def deterministic(self) -> "Encoder":
        """Copy that outputs z (the mean, for Gaussian encoders); the transfer artifact."""
        out = Encoder(self.obs_shape, self.repr_dim, gaussian=False)
        state = {k: v for k, v in self.state_dict().items() if not k.startswith("logvar_head.")}
        out.load_state_dict(state)
        return out


def encode(encoder: Encoder, obs_batch: torch.Tensor):
    return encoder(obs_batch)


def representation(encoder: Encoder, obs_batch: torch.Tensor) -> torch.Tensor:
    """Deterministic z: the vector output, or the mean of a Gaussian encoder."""
    out = encoder(obs_batch)
    return out[0] if isinstance(out, tuple) else out


def sample_latent(mean: torch.Tensor, log_variance: torch.Tensor,
                  generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Reparameterised draw z = mean + exp(log_variance / 2) * eps."""
    eps = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
    return mean + torch.exp(0.5 * log_variance) * eps


class MomentumEncoder(nn.Module):
    """Context encoder plus an EMA target copy that never receives gradients."""

    def __init__(self, context: Encoder, alpha: float = 0.999):
        super().__init__()
        if not 0.0 <= alpha <= 1.0:
            raise ValueError("momentum alpha must lie in [0, 1]")
        self.context = context
        self.target = copy.deepcopy(context)
        for p in self.target.parameters():
            p.requires_grad_(False)
        self.alpha = alpha

    def forward(self, x):
        return self.context(x)

    @torch.no_grad()
    def encode_target(self, x):
        return self.target(x)


@torch.no_grad()
def momentum_update(state: MomentumEncoder) -> MomentumEncoder:
    """theta_target <- alpha * theta_target + (1 - alpha) * theta_context, in place."""
    ctx = dict(state.context.named_parameters())
    tgt = dict(state.target.named_parameters())
    if ctx.keys() != tgt.keys():
        raise ValueError("context and target encoders have different parameters")
    for name, pt in tgt.items():
        pc = ctx[name]
        if pc.shape != pt.shape:
            raise ValueError(f"shape mismatch for {name}: {pc.shape} vs {pt.shape}")
        pt.mul_(state.alpha).add_(pc, alpha=1.0 - state.alpha)
    return state


@dataclass(frozen=True)
class ProjectionHeadConfig:
    mode: str = "symmetric"  # symmetric | asymmetric | none
    hidden_dim: int = 256
    output_dim: int = 128

    def __post_init__(self):
        if self.mode not in ("symmetric", "asymmetric", "none"):
            raise ValueError(f"unknown projection mode {self.mode!r}")
        if self.hidden_dim < 1 or self.output_dim < 1:
            raise ValueError("projection dims must be positive")


class ProjectionHead(nn.Module):
    kind = "projection"

    def __init__(self, config: ProjectionHeadConfig, in_dim: int = REPR_DIM):
        super().__init__()
        self.config = config
        self.heads = nn.ModuleDict()
        if config.mode == "symmetric":
            self.heads["shared"] = mlp(in_dim, config.hidden_dim, config.output_dim)
        elif config.mode == "asymmetric":
            self.heads["context"] = mlp(in_dim, config.hidden_dim, config.output_dim)
            self.heads["target"] = mlp(in_dim, config.hidden_dim, config.output_dim)
        he_init_(self)

    def forward(self, z: torch.Tensor, side: str = "context") -> torch.Tensor:
        if side not in ("context", "target"):
            raise ValueError(f"side must be 'context' or 'target', got {side!r}")
        mode = self.config.mode
        if mode == "none":
            return z
        return self.heads["shared" if mode == "symmetric" else side](z)


def project(head: ProjectionHead, z_batch: torch.Tensor, side: str) -> torch.Tensor:
    return head(z_batch, side)


class ImageDecoder(nn.Module):
    """Linear layer to a coarse feature map followed by three stride-2 transposed convs."""
    kind = "image_reconstruction"

    def __init__(self, obs_shape, in_dim: int = REPR_DIM):
        super().__init__()
        H, W, C = (int(s) for s in obs_shape)
        self.obs_shape = (H, W, C)
        self.h0, self.w0 = max(1, -(-H // 8)), max(1, -(-W // 8))
        self.fc = nn.Linear(in_dim, 64 * self.h0 * self.w0)
        self.deconv = nn.Sequential(
            nn.ConvTranspose2d(64, 64, 4, stride=2, padding=1), nn.ReLU(),
            nn.ConvTranspose2d(64, 32, 4, stride=2, padding=1), nn.ReLU(),
        )
        self.out = nn.ConvTranspose2d(32, C, 4, stride=2, padding=1)
        he_init_(self)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        h = F.relu(self.fc(z)).view(-1, 64, self.h0, self.w0)
        x = self.out(self.deconv(h))
        H, W, _ = self.obs_shape
        if x.shape[-2:] != (H, W):
            x = x[..., :H, :W]
        return x


def reconstruct_image(decoder: ImageDecoder, z_batch: torch.Tensor) -> torch.Tensor:
    if getattr(decoder, "kind", None) != "image_reconstruction":
        raise TypeError("reconstruct_image needs an image-reconstruction decoder")
    return decoder(z_batch)


def action_features(actions: torch.Tensor, space: ActionSpace, dtype=torch.float32) -> torch.Tensor:
    """One-hot for discrete actions, the raw vector for continuous ones."""
    if space.discrete:
        actions = torch.as_tensor(actions).long()
        if actions.ndim != 1:
            raise ValueError("discrete actions must be a 1-d index batch")
        if actions.numel() and (actions.min() < 0 or actions.max() >= space.size):
            raise ValueError(f"action outside discrete({space.size})")
        return F.one_hot(actions, space.size).to(dtype)
    actions = torch.as_tensor(actions, dtype=dtype)
    if actions.ndim != 2 or actions.shape[1] != space.size:
        raise ValueError(f"continuous actions must have shape (B, {space.size})")
    return actions


class ActionFusion(nn.Module):
    """Concatenates z with an action embedding and maps back to a latent of size ``repr_dim``."""
    kind = "action_conditioned"

    def __init__(self, action_space: ActionSpace, repr_dim: int = REPR_DIM):
        super().__init__()
        self.action_space = action_space
        self.fuse = nn.Sequential(nn.Linear(repr_dim + action_space.size, repr_dim), nn.ReLU())
        he_init_(self)

    def forward(self, z: torch.Tensor, actions) -> torch.Tensor:
        a = action_features(actions, self.action_space, z.dtype)
        if len(a) != len(z):
            raise ValueError("batch size mismatch between latents and actions")
        return self.fuse(torch.cat([z, a], dim=1))


def fuse_action(decoder: ActionFusion, z_batch, action_batch) -> torch.Tensor:
    if getattr(decoder, "kind", None) != "action_conditioned":
        raise TypeError("fuse_action needs an action-conditioned decoder")
    return decoder(z_batch, action_batch)


class InverseActionHead(nn.Module):
    """Predicts a_t from (z_t, z_{t+1}): logits, or (mean, log_std) for continuous actions."""
    kind = "inverse_action_head"

    def __init__(self, action_space: ActionSpace, repr_dim: int = REPR_DIM, hidden_dim: int = 256):
        super().__init__()
        self.action_space = action_space
        out = action_space.size * (1 if action_space.discrete else 2)
        self.net = mlp(2 * repr_dim, hidden_dim, out)
        he_init_(self)

    def forward(self, z_t: torch.Tensor, z_t1: torch.Tensor):
        out = self.net(torch.cat([z_t, z_t1], dim=1))
        if self.action_space.discrete:
            return out
        mean, log_std = out.chunk(2, dim=1)
        return mean, log_std


def predict_inverse_action(decoder: InverseActionHead, z_t, z_t1):
    if getattr(decoder, "kind", None) != "inverse_action_head":
        raise TypeError("predict_inverse_action needs an inverse-dynamics head")
    return decoder(z_t, z_t1)


# ---------------------------------------------------------------------------
# checkpoints
#
# layout: b"REPILCKP" | u32 version | u32 manifest length | manifest JSON |
#         float32 little-endian tensor payloads in manifest order

CKPT_MAGIC = b"REPILCKP"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, groups: dict, meta: Optional[dict] = None) -> None:
    """Write named parameter arrays, tagged by group ("encoder", "decoder", "head", ...)."""
    tensors, payload = [], []
    for group, module in groups.items():
        state = module.state_dict() if isinstance(module, nn.Module) else module
        for name, value in state.items():
            arr = np.asarray(value.detach().cpu().numpy() if torch.is_tensor(value) else value,
                             dtype="<f4")
            tensors.append({"name": f"{group}.{name}", "group": group, "shape": list(arr.shape)})
            payload.append(arr.tobytes())
    manifest = {
        "version": CKPT_VERSION,
        "tensors": tensors,
        "groups": {g: [t["name"] for t in tensors if t["group"] == g] for g in groups},
        "meta": meta or {},
    }
    header = json.dumps(manifest).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(header)) + header
                     + b"".join(payload))


def read_checkpoint_manifest(path) -> dict:
    return _read_checkpoint(path, manifest_only=True)[0]


def load_checkpoint(path):
    """Return ``(manifest, {group: {name: float32 tensor}})``."""
    return _read_checkpoint(path)


def _read_checkpoint(path, manifest_only=False):
    blob = Path(path).read_bytes()
    if blob[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    version, n = struct.unpack("<II", blob[8:16])
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    manifest = json.loads(blob[16:16 + n])
    if manifest_only:
        return manifest, None
    offset = 16 + n
    groups: dict = {g: {} for g in manifest["groups"]}
    for t in manifest["tensors"]:
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        end = offset + 4 * count
        if end > len(blob):
            raise CheckpointError("checkpoint payload is truncated")
        arr = np.frombuffer(blob[offset:end], dtype="<f4").reshape(t["shape"]).copy()
        offset = end
        groups[t["group"]][t["name"][len(t["group"]) + 1:]] = torch.from_numpy(arr)
    return manifest, groups


def save_encoder(path, encoder: Encoder, meta: Optional[dict] = None) -> None:
    save_checkpoint(path, {"encoder": encoder}, {"encoder": encoder.config(), **(meta or {})})


def load_encoder(path) -> Encoder:
    manifest, groups = load_checkpoint(path)
    cfg = manifest["meta"]["encoder"]
    enc = Encoder(cfg["obs_shape"], cfg["repr_dim"], cfg["gaussian"])
    enc.load_state_dict(groups["encoder"])
    return enc
