"""Named points in the RepL design space."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Optional

from ..augment import AugmentationSpec, AugmentMode, default_augmentations
from ..models import ProjectionHeadConfig

LOSSES = ("info_nce", "vae", "dynamics_mse", "inverse_dynamics_nll", "ceb")
PAIR_CONSTRUCTORS = ("identity", "temporal_offset")

CONTRASTIVE_BATCH = 384
OTHER_BATCH = 64


@dataclass(frozen=True)
class RepLAlgorithmSpec:
    name: str
    pair_constructor: str = "identity"
    offset: int = 0
    with_action: bool = False
    dual_frame_context: bool = False
    augmentation: AugmentationSpec = field(default_factory=lambda: default_augmentations(AugmentMode.NONE))
    loss: str = "info_nce"
    projection: ProjectionHeadConfig = ProjectionHeadConfig("none")
    momentum: Optional[float] = None
    queue_size: int = 4096
    similarity: str = "dot"
    temperature: float = 0.1
    beta: float = 1e-6
    # CEB compression weight gamma = exp(-rho); rho annealed linearly unless ceb_gamma is fixed
    ceb_rho_start: float = 100.0
    ceb_rho_end: float = 1.0
    ceb_gamma: Optional[float] = None
    batch_size: int = OTHER_BATCH
    training_batches: int = 5000
    learning_rate: float = 1e-4
    repr_dim: int = 128

    def __post_init__(self):
        self.validate()

    @property
    def augment_mode(self) -> AugmentMode:
        return self.augmentation.mode

    @property
    def pair_offset(self) -> int:
        return self.offset if self.pair_constructor == "temporal_offset" else 0

    @property
    def gaussian_encoder(self) -> bool:
        return self.loss in ("vae", "ceb")

    def validate(self) -> None:
        if self.pair_constructor not in PAIR_CONSTRUCTORS:
            raise ValueError(f"unknown pair constructor {self.pair_constructor!r}")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.pair_constructor == "identity" and (self.offset or self.with_action):
            raise ValueError("identity pairs carry no offset or action")
        if self.offset < 0:
            raise ValueError("temporal offset must be non-negative")
        if self.loss == "inverse_dynamics_nll" and not (
                self.pair_constructor == "temporal_offset" and self.offset == 1
                and self.dual_frame_context and self.with_action):
            raise ValueError("inverse dynamics needs (o_t, o_t+1) contexts at offset 1 with actions")
        if self.loss == "dynamics_mse" and not (
                self.pair_constructor == "temporal_offset" and self.with_action):
            raise ValueError("dynamics needs temporal pairs with the action as extra context")
        if self.dual_frame_context and self.loss != "inverse_dynamics_nll":
            raise ValueError("dual-frame contexts are only used by inverse dynamics")
        if self.momentum is not None and not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")
        if self.momentum is not None and self.loss != "info_nce":
            raise ValueError("momentum encoders are only wired for the contrastive loss")
        if self.batch_size < 1 or self.training_batches < 0 or self.learning_rate <= 0:
            raise ValueError("batch size, training batches and learning rate must be positive")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    def with_overrides(self, **kw) -> "RepLAlgorithmSpec":
        return replace(self, **kw)

    def to_config(self) -> dict:
        d = asdict(self)
        d["augmentation"] = {"mode": self.augmentation.mode.value,
                             "ops": self.augmentation.to_config()}
        d["projection"] = asdict(self.projection)
        return {k: v for k, v in d.items() if v is not None}

    @classmethod
    def from_config(cls, d: dict) -> "RepLAlgorithmSpec":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown RepL keys {sorted(unknown)}")
        if "augmentation" in d:
            a = d["augmentation"]
            d["augmentation"] = AugmentationSpec.from_config(a.get("ops", []), a.get("mode", "both"))
        if "projection" in d:
            d["projection"] = ProjectionHeadConfig(**d["projection"])
        return cls(**d)


def _contrastive(**kw) -> RepLAlgorithmSpec:
    base = dict(augmentation=default_augmentations(AugmentMode.BOTH), loss="info_nce",
                batch_size=CONTRASTIVE_BATCH)
    base.update(kw)
    return RepLAlgorithmSpec(**base)


def _simclr(name="SimCLR", **kw) -> RepLAlgorithmSpec:
    base = dict(name=name, pair_constructor="identity",
                projection=ProjectionHeadConfig("symmetric"))
    base.update(kw)
    return _contrastive(**base)


_REGISTRY = {
    "TemporalCPC": lambda: _contrastive(name="TemporalCPC", pair_constructor="temporal_offset",
                                        offset=8),
    "SimCLR": lambda: _simclr(),
    "VAE": lambda: RepLAlgorithmSpec(name="VAE", loss="vae", beta=1e-6, batch_size=OTHER_BATCH),
    "Dynamics": lambda: RepLAlgorithmSpec(name="Dynamics", pair_constructor="temporal_offset",
                                          offset=1, with_action=True, loss="dynamics_mse"),
    "InverseDynamics": lambda: RepLAlgorithmSpec(
        name="InverseDynamics", pair_constructor="temporal_offset", offset=1, with_action=True,
        dual_frame_context=True, loss="inverse_dynamics_nll"),
    # SimCLR ablations
    "SimCLR-AsymmetricProjection": lambda: _simclr(
        "SimCLR-AsymmetricProjection", projection=ProjectionHeadConfig("asymmetric")),
    "SimCLR-NoProjection": lambda: _simclr("SimCLR-NoProjection",
                                           projection=ProjectionHeadConfig("none")),
    "SimCLR-CEB": lambda: _simclr("SimCLR-CEB", loss="ceb", projection=ProjectionHeadConfig("none")),
    "SimCLR-Momentum": lambda: _simclr("SimCLR-Momentum", momentum=0.999),
}

MAIN_ALGORITHMS = ("TemporalCPC", "SimCLR", "VAE", "Dynamics", "InverseDynamics")
ABLATIONS = ("SimCLR-AsymmetricProjection", "SimCLR-NoProjection", "SimCLR-CEB", "SimCLR-Momentum")


def algorithm_names() -> tuple:
    return tuple(_REGISTRY)


def build_named_algorithm(name: str, **overrides) -> RepLAlgorithmSpec:
    lookup = {k.lower(): k for k in _REGISTRY}
    key = lookup.get(name.lower())
    if key is None:
        raise KeyError(f"unknown RepL algorithm {name!r}; known: {', '.join(_REGISTRY)}")
    spec = _REGISTRY[key]()
    return spec.with_overrides(**overrides) if overrides else spec
