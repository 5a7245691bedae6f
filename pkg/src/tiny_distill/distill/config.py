"""Hyperparameter containers for distillation, adapters and training."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

from ..errors import ConfigError


def _from_dict(cls, d: dict, nested=None):
    nested = nested or {}
    names = {f.name for f in fields(cls)}
    extra = set(d) - names
    if extra:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(extra)}")
    kwargs = dict(d)
    for key, sub in nested.items():
        if key in kwargs and isinstance(kwargs[key], dict):
            kwargs[key] = sub.from_dict(kwargs[key])
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


@dataclass(frozen=True)
class LayerMap:
    """Student layer l reads teacher layer ``stride * l + offset``."""

    stride: int = 3
    offset: int = 4

    def __post_init__(self):
        if not isinstance(self.stride, int) or self.stride < 1:
            raise ConfigError("layer map stride must be a positive integer")
        if not isinstance(self.offset, int) or self.offset < 0:
            raise ConfigError("layer map offset must be a non-negative integer")

    def __call__(self, layer: int) -> int:
        return self.stride * layer + self.offset

    def validate(self, student_layers: int, teacher_layers: int) -> list[int]:
        targets = [self(layer) for layer in range(student_layers)]
        if targets and targets[-1] >= teacher_layers:
            raise ConfigError(
                f"layer map {self.stride}l+{self.offset} sends student layer {student_layers - 1} "
                f"to teacher layer {targets[-1]}, but the teacher has {teacher_layers} layers"
            )
        return targets

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return _from_dict(cls, d)


def layer_map_apply(layer_map: LayerMap, layer: int, teacher_layers: int | None = None) -> int:
    if layer < 0:
        raise ConfigError("student layer index must be non-negative")
    g = layer_map(layer)
    if teacher_layers is not None and g >= teacher_layers:
        raise ConfigError(f"student layer {layer} maps to teacher layer {g} >= {teacher_layers}")
    return g


@dataclass(frozen=True)
class DistillConfig:
    alpha: tuple[float, ...] | None = None
    gamma: tuple[float, ...] | None = None
    tau: float = 2.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    tau_sq_scale: bool = False
    layer_map: LayerMap = field(default_factory=LayerMap)

    def __post_init__(self):
        if self.alpha is not None:
            object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        if self.gamma is not None:
            object.__setattr__(self, "gamma", tuple(float(g) for g in self.gamma))
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        lams = (self.lambda1, self.lambda2, self.lambda3)
        if any(v < 0 for v in lams):
            raise ConfigError("loss weights must be non-negative")
        if not any(v > 0 for v in lams):
            raise ConfigError("at least one of lambda1..lambda3 must be positive")
        for name in ("alpha", "gamma"):
            w = getattr(self, name)
            if w is not None and any(v < 0 for v in w):
                raise ConfigError(f"{name} weights must be non-negative")

    @property
    def lambdas(self) -> tuple[float, float, float]:
        return (self.lambda1, self.lambda2, self.lambda3)

    def resolved(self, student_layers: int) -> "DistillConfig":
        """Fill per-layer weights with 1.0 and check their lengths."""
        alpha = self.alpha if self.alpha is not None else (1.0,) * student_layers
        gamma = self.gamma if self.gamma is not None else (1.0,) * student_layers
        if len(alpha) != student_layers or len(gamma) != student_layers:
            raise ConfigError(
                f"alpha/gamma lengths ({len(alpha)}, {len(gamma)}) must equal student depth {student_layers}"
            )
        return DistillConfig(alpha, gamma, self.tau, self.lambda1, self.lambda2, self.lambda3, self.tau_sq_scale, self.layer_map)

    def with_lambdas(self, l1, l2, l3) -> "DistillConfig":
        return DistillConfig(self.alpha, self.gamma, self.tau, l1, l2, l3, self.tau_sq_scale, self.layer_map)

    def to_dict(self):
        d = asdict(self)
        d["alpha"] = list(self.alpha) if self.alpha is not None else None
        d["gamma"] = list(self.gamma) if self.gamma is not None else None
        return d

    @classmethod
    def from_dict(cls, d):
        return _from_dict(cls, d, {"layer_map": LayerMap})


LORA_TARGETS = {"Q": "wq", "V": "wv"}


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 4
    scale: float = 1.0
    targets: tuple[str, ...] = ("Q", "V")

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(self.targets))
        if not isinstance(self.rank, int) or self.rank < 1:
            raise ConfigError("LoRA rank must be a positive integer")
        if not self.scale > 0:
            raise ConfigError("LoRA scale must be positive")
        if not self.targets or not set(self.targets) <= set(LORA_TARGETS) or len(set(self.targets)) != len(self.targets):
            raise ConfigError(f"LoRA targets must be a non-empty subset of {sorted(LORA_TARGETS)}, got {self.targets}")

    def to_dict(self):
        d = asdict(self)
        d["targets"] = list(self.targets)
        return d

    @classmethod
    def from_dict(cls, d):
        return _from_dict(cls, d)


@dataclass(frozen=True)
class TrainConfig:
    steps: int
    batch_size: int
    seq_len: int
    learning_rate: float
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float | None = 1.0
    log_interval: int = 10
    schedule: str = "constant"
    warmup_steps: int = 0

    def __post_init__(self):
        if not isinstance(self.steps, int) or self.steps < 0:
            raise ConfigError("steps must be a non-negative integer")
        for name in ("batch_size", "seq_len", "log_interval"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigError("invalid Adam moment settings")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError("grad_clip must be positive or null")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be non-negative")

    def lr_at(self, step: int) -> float:
        lr = self.learning_rate
        if self.warmup_steps and step < self.warmup_steps:
            return lr * (step + 1) / self.warmup_steps
        if self.schedule == "cosine" and self.steps > self.warmup_steps:
            import math

            frac = (step - self.warmup_steps) / (self.steps - self.warmup_steps)
            return lr * 0.5 * (1 + math.cos(math.pi * frac))
        return lr

    @property
    def tokens_per_step(self) -> int:
        return self.batch_size * self.seq_len

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return _from_dict(cls, d)
