"""Policy and discriminator networks built around the shared encoder architecture."""
from __future__ import annotations

from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.distributions import Categorical, Independent, Normal

from ..dataio import ActionSpace
from ..models import REPR_DIM, Encoder, action_features, he_init_, representation


class Policy(nn.Module):
    """pi(a | x): encoder followed by one linear layer, plus a linear value head.

    For discrete actions the head produces categorical logits; for continuous
    actions it produces the Gaussian mean and a state-independent log std.
    Only ``encoder`` and ``head`` take part in BC; ``value_head`` serves PPO.
    A Gaussian encoder is used through its mean, so it can be shared with a
    variational RepL objective during joint training.
    """

    def __init__(self, obs_shape, action_space: ActionSpace, encoder: Optional[Encoder] = None,
                 repr_dim: int = REPR_DIM):
        super().__init__()
        if encoder is None:
            encoder = Encoder(obs_shape, repr_dim)
        if encoder.repr_dim != repr_dim:
            raise ValueError(f"encoder emits {encoder.repr_dim} dims, head expects {repr_dim}")
        self.obs_shape = tuple(obs_shape)
        self.action_space = action_space
        self.encoder = encoder
        self.head = he_init_(nn.Linear(repr_dim, action_space.size))
        self.log_std = None if action_space.discrete else nn.Parameter(torch.zeros(action_space.size))
        self.value_head = he_init_(nn.Linear(repr_dim, 1))

    def bc_parameters(self):
        """Parameters of pi(a|x): the encoder's z path and the head."""
        params = [p for n, p in self.encoder.named_parameters() if not n.startswith("logvar_head.")]
        params += list(self.head.parameters())
        return params + ([self.log_std] if self.log_std is not None else [])

    def encode(self, obs: torch.Tensor) -> torch.Tensor:
        return representation(self.encoder, obs)

    def distribution_from_z(self, z: torch.Tensor):
        out = self.head(z)
        if self.action_space.discrete:
            return Categorical(logits=out)
        return Independent(Normal(out, self.log_std.exp().expand_as(out)), 1)

    def distribution(self, obs: torch.Tensor):
        return self.distribution_from_z(self.encode(obs))

    def forward(self, obs: torch.Tensor):
        return self.head(self.encode(obs))

    def value(self, obs: torch.Tensor) -> torch.Tensor:
        return self.value_head(self.encode(obs)).squeeze(-1)

    def dist_and_value(self, obs: torch.Tensor):
        z = self.encode(obs)
        return self.distribution_from_z(z), self.value_head(z).squeeze(-1)

    @torch.no_grad()
    def act(self, obs: torch.Tensor, greedy: bool = True,
            generator: Optional[torch.Generator] = None) -> torch.Tensor:
        out = self(obs)
        if self.action_space.discrete:
            if greedy:
                return out.argmax(dim=-1)
            return torch.multinomial(F.softmax(out, -1), 1, generator=generator).squeeze(-1)
        if greedy:
            return out
        noise = torch.randn(out.shape, generator=generator, dtype=out.dtype)
        return out + noise * self.log_std.exp()


def sample_actions(dist, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Draw from a policy distribution with an explicit generator (for reproducible rollouts)."""
    if isinstance(dist, Categorical):
        return torch.multinomial(dist.probs, 1, generator=generator).squeeze(-1)
    base = dist.base_dist
    return base.loc + base.scale * torch.randn(base.loc.shape, generator=generator)


class Discriminator(nn.Module):
    """Logit of D(x, a), the probability that (x, a) came from the policy rather than the expert."""

    def __init__(self, obs_shape, action_space: ActionSpace, encoder: Optional[Encoder] = None,
                 repr_dim: int = REPR_DIM, hidden_dim: int = 256):
        super().__init__()
        if encoder is None:
            encoder = Encoder(obs_shape, repr_dim)
        self.action_space = action_space
        self.encoder = encoder
        self.head = he_init_(nn.Sequential(
            nn.Linear(repr_dim + action_space.size, hidden_dim), nn.ReLU(), nn.Linear(hidden_dim, 1)))

    def forward(self, obs: torch.Tensor, actions) -> torch.Tensor:
        z = representation(self.encoder, obs)
        a = action_features(torch.as_tensor(actions), self.action_space, z.dtype)
        return self.head(torch.cat([z, a], dim=-1)).squeeze(-1)
