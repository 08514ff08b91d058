from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

VARIANTS = ("m2m", "single_task", "shared_bottom", "mmoe")


@dataclass
class ModelConfig:
    """Architecture hyperparameters for M2M and the baselines."""

    n_scenarios: int = 5
    n_tasks: int = 5
    seq_len: int = 40
    behavior_vocab: list[int] = field(default_factory=lambda: [32, 32, 32])
    performance_vocab: list[int] = field(default_factory=lambda: [32, 32, 32, 32])
    scenario_vocab: list[int] = field(default_factory=lambda: [5, 32, 32])
    profile_vocab: list[int] = field(default_factory=lambda: [8] * 8 + [10])
    n_dense: int = 7
    d_input: int = 16
    d_pos: int = 8
    n_heads: int = 2
    d_view: int = 256
    n_experts: int = 4
    d_task: int = 16  # task-id embedding width before the anchor feed-forward
    d_scenario: int = 64  # scenario knowledge width
    scenario_hidden: list[int] = field(default_factory=lambda: [64])
    meta_dim: int = 64  # width of the meta-generated layers
    meta_depth: int = 3
    tower_layers: int = 2
    expert_profile: bool = True  # advertiser profile embeddings join F before the experts
    slope: float = 0.01
    link: str = "softplus"  # or "exp"
    disable_meta_attention: bool = False
    disable_meta_tower: bool = False
    disable_transformer: bool = False
    variant: str = "m2m"
    baseline_hidden: int | None = None  # None: matched to the M2M parameter budget
    seed: int = 0

    @property
    def d_behavior(self) -> int:
        return len(self.behavior_vocab) * self.d_input + self.d_pos

    @property
    def d_performance(self) -> int:
        return len(self.performance_vocab) * self.d_input + self.d_pos

    @property
    def d_fused(self) -> int:
        return self.d_behavior + self.d_performance + self.n_dense

    @property
    def d_expert_in(self) -> int:
        return self.d_fused + (len(self.profile_vocab) * self.d_input if self.expert_profile else 0)

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.link not in ("softplus", "exp"):
            raise ValueError(f"unknown link {self.link!r}")
        for name in ("d_behavior", "d_performance"):
            if getattr(self, name) % self.n_heads:
                raise ValueError(f"{name}={getattr(self, name)} is not divisible by {self.n_heads} heads")
        if min(self.n_experts, self.meta_depth, self.meta_dim, self.d_scenario, self.seq_len) < 1:
            raise ValueError("experts, meta depth/width, scenario width and T must be positive")
        if self.tower_layers < 0:
            raise ValueError("tower_layers must be >= 0")
        if len(self.scenario_vocab) < 1 or self.scenario_vocab[0] < self.n_scenarios:
            raise ValueError("first scenario attribute must index the scenario")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_vocab(cls, vocab: dict, **overrides) -> "ModelConfig":
        return cls(
            behavior_vocab=list(vocab["behavior"]),
            performance_vocab=list(vocab["performance"]),
            scenario_vocab=list(vocab["scenario_attrs"]),
            profile_vocab=list(vocab["profile"]),
            n_dense=int(vocab["n_dense"]),
            **overrides,
        )


@dataclass
class LossConfig:
    task_weights: list[float] | None = None  # None: 1.0 for every task
    reg_weight: float = 1e-4

    def weights(self, m: int) -> list[float]:
        w = [1.0] * m if self.task_weights is None else list(self.task_weights)
        if len(w) != m or any(x < 0 for x in w):
            raise ValueError("task weights must be nonnegative, one per task")
        if self.reg_weight < 0:
            raise ValueError("regularization weight must be nonnegative")
        return w


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 256
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.998
    eps: float = 1e-9
    clip: tuple[float, float] = (-3.0, 3.0)
    seed: int = 0
    eval_batch_size: int = 2048
    ema_decay: float = 0.0  # > 0: validate and keep a moving average of the weights
    loss: LossConfig = field(default_factory=LossConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        loss = LossConfig(**d.pop("loss", {}))
        if "clip" in d:
            d["clip"] = tuple(d["clip"])
        return cls(loss=loss, **d)


def config_hash(obj) -> str:
    """Short stable hash of a JSON-serializable config."""
    if hasattr(obj, "to_dict"):
        obj = obj.to_dict()
    elif hasattr(obj, "__dataclass_fields__"):
        obj = asdict(obj)
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=list)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
