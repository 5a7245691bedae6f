"""Run configuration: one YAML document, validated in full before any stage."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from ..data import VocabLayout
from ..distill import DistillConfig, LoraConfig, TrainConfig
from ..errors import ConfigError
from ..transformer import ModelConfig, widths_compatible

STAGES = ("teacher", "correct", "distill")
CORPORA = ("pretrain", "target", "expressive", "interleaved")


def _strict(cls, d, where):
    if d is None:
        d = {}
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a mapping")
    names = {f.name for f in fields(cls)}
    extra = set(d) - names
    if extra:
        raise ConfigError(f"{where}: unknown keys {sorted(extra)}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass(frozen=True)
class CorpusSpec:
    n_sequences: int
    seq_len: int = 65
    heldout_sequences: int = 200
    source_seed: int | None = None

    def __post_init__(self):
        if self.n_sequences < 1 or self.seq_len < 2 or self.heldout_sequences < 1:
            raise ConfigError("corpus sizes must be positive and seq_len >= 2")


@dataclass(frozen=True)
class ExpressiveSpec:
    n_sequences: int
    phonetic_len: int = 54
    pitch_period: int = 5
    heldout_sequences: int = 200

    def __post_init__(self):
        if self.n_sequences < 1 or self.phonetic_len < 1 or self.pitch_period < 1:
            raise ConfigError("expressive corpus sizes must be positive")


@dataclass(frozen=True)
class InterleaveSpec:
    n_utterances: int
    utterance_len: int = 50
    word_len: int = 5
    heldout_utterances: int = 200
    pattern_probs: tuple[float, ...] = (0.2, 0.2, 0.2, 0.2, 0.2)

    def __post_init__(self):
        object.__setattr__(self, "pattern_probs", tuple(float(p) for p in self.pattern_probs))
        if len(self.pattern_probs) != 5 or abs(sum(self.pattern_probs) - 1) > 1e-6 or min(self.pattern_probs) < 0:
            raise ConfigError("pattern_probs must be 5 non-negative numbers summing to 1")


@dataclass(frozen=True)
class ItemSpec:
    n_items: int = 1000
    ctx_len: int = 30
    cont_len: int = 20


@dataclass(frozen=True)
class DataConfig:
    concentration: float
    pretrain: CorpusSpec
    target: CorpusSpec | None = None
    expressive: ExpressiveSpec | None = None
    interleaved: InterleaveSpec | None = None
    cloze: ItemSpec = field(default_factory=ItemSpec)
    style: ItemSpec | None = None

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("data must be a mapping")
        extra = set(d) - {f.name for f in fields(cls)}
        if extra:
            raise ConfigError(f"data: unknown keys {sorted(extra)}")
        if "pretrain" not in d or "concentration" not in d:
            raise ConfigError("data needs 'concentration' and 'pretrain'")
        opt = lambda key, typ: _strict(typ, d[key], f"data.{key}") if d.get(key) is not None else None  # noqa: E731
        return cls(
            concentration=float(d["concentration"]),
            pretrain=_strict(CorpusSpec, d["pretrain"], "data.pretrain"),
            target=opt("target", CorpusSpec),
            expressive=opt("expressive", ExpressiveSpec),
            interleaved=opt("interleaved", InterleaveSpec),
            cloze=_strict(ItemSpec, d.get("cloze"), "data.cloze"),
            style=opt("style", ItemSpec),
        )


@dataclass(frozen=True)
class PipelineConfig:
    teacher_corpus: str = "pretrain"
    distill_corpus: str = "pretrain"
    distill_teacher: str = "teacher"
    baseline_init: str = "scratch"
    checkpoint_every: int = 50

    def __post_init__(self):
        for key in ("teacher_corpus", "distill_corpus"):
            if getattr(self, key) not in CORPORA:
                raise ConfigError(f"pipeline.{key} must be one of {CORPORA}")
        if self.distill_teacher not in ("teacher", "teacher_corrected"):
            raise ConfigError("pipeline.distill_teacher must be 'teacher' or 'teacher_corrected'")
        if self.baseline_init not in ("scratch", "pruned"):
            raise ConfigError("pipeline.baseline_init must be 'scratch' or 'pruned'")
        if self.checkpoint_every < 1:
            raise ConfigError("pipeline.checkpoint_every must be positive")


@dataclass(frozen=True)
class RunConfig:
    seed: int
    out_dir: str
    layout: VocabLayout
    data: DataConfig
    teacher: ModelConfig
    student: ModelConfig
    distill: DistillConfig
    lora: LoraConfig
    train: dict  # stage name -> TrainConfig
    pipeline: PipelineConfig

    def source_seed(self, corpus: str) -> int:
        spec = getattr(self.data, corpus)
        if spec is not None and getattr(spec, "source_seed", None) is not None:
            return spec.source_seed
        return self.seed if corpus != "target" else self.seed + 1000

    def to_dict(self) -> dict:
        d = {
            "seed": self.seed,
            "out_dir": self.out_dir,
            "layout": self.layout.to_dict(),
            "data": _plain(asdict(self.data)),
            "teacher": self.teacher.to_dict(),
            "student": self.student.to_dict(),
            "distill": self.distill.to_dict(),
            "lora": self.lora.to_dict(),
            "train": {k: v.to_dict() for k, v in self.train.items()},
            "pipeline": asdict(self.pipeline),
        }
        d["data"]["pretrain"]["source_seed"] = self.source_seed("pretrain")
        if self.data.target is not None:
            d["data"]["target"]["source_seed"] = self.source_seed("target")
        return d

    def dump(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            yaml.safe_dump(self.to_dict(), f, sort_keys=True)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


TOP_KEYS = {"seed", "out_dir", "layout", "data", "teacher", "student", "distill", "lora", "train", "pipeline"}


def parse_config(raw: dict, seed: int | None = None, out_dir: str | None = None) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    extra = set(raw) - TOP_KEYS
    if extra:
        raise ConfigError(f"unknown top-level keys {sorted(extra)}")
    for key in ("data", "teacher", "student", "train"):
        if key not in raw:
            raise ConfigError(f"config is missing '{key}'")
    run_seed = int(seed if seed is not None else raw.get("seed", 0))
    layout = VocabLayout.from_dict(raw.get("layout") or {})
    data = DataConfig.from_dict(raw["data"])
    if not data.concentration > 0:
        raise ConfigError("data.concentration must be positive")

    teacher_d = dict(raw["teacher"])
    teacher_d.setdefault("vocab_size", layout.vocab_size)
    teacher = ModelConfig.from_dict(teacher_d)
    student_d = {**{k: v for k, v in teacher.to_dict().items() if k != "n_layers"}, **raw["student"]}
    student = ModelConfig.from_dict(student_d)
    if teacher.vocab_size != layout.vocab_size:
        raise ConfigError(f"teacher vocab_size {teacher.vocab_size} != layout vocab {layout.vocab_size}")
    if not widths_compatible(teacher, student):
        raise ConfigError("student must share vocab_size, d_model, n_heads and rope_base with the teacher")

    dcfg = DistillConfig.from_dict(raw.get("distill") or {}).resolved(student.n_layers)
    dcfg.layer_map.validate(student.n_layers, teacher.n_layers)
    lora = LoraConfig.from_dict(raw.get("lora") or {})
    if lora.rank >= teacher.d_model:
        raise ConfigError("lora.rank must be below d_model")

    train_raw = raw["train"]
    if not isinstance(train_raw, dict):
        raise ConfigError("train must be a mapping of stage -> settings")
    extra = set(train_raw) - set(STAGES)
    if extra:
        raise ConfigError(f"train: unknown stages {sorted(extra)}")
    train = {}
    for stage in STAGES:
        if stage not in train_raw:
            raise ConfigError(f"train.{stage} is required")
        d = dict(train_raw[stage])
        d.setdefault("seed", run_seed)
        tc = TrainConfig.from_dict(d)
        model = student if stage == "distill" else teacher
        if tc.seq_len > model.max_seq_len:
            raise ConfigError(f"train.{stage}.seq_len exceeds max_seq_len")
        train[stage] = tc

    pipeline = _strict(PipelineConfig, raw.get("pipeline"), "pipeline")
    for key in ("teacher_corpus", "distill_corpus"):
        if getattr(data, getattr(pipeline, key)) is None:
            raise ConfigError(f"pipeline.{key} names a corpus that data does not generate")
    if pipeline.distill_teacher == "teacher_corrected" and data.target is None:
        raise ConfigError("teacher correction needs a data.target corpus")
    if data.style is not None and data.expressive is None:
        raise ConfigError("style items need data.expressive settings")
    if data.style is not None and data.style.cont_len < data.expressive.pitch_period:
        raise ConfigError("data.style.cont_len must cover a pitch window")

    return RunConfig(
        seed=run_seed,
        out_dir=str(out_dir if out_dir is not None else raw.get("out_dir", "runs/default")),
        layout=layout,
        data=data,
        teacher=teacher,
        student=student,
        distill=dcfg,
        lora=lora,
        train=train,
        pipeline=pipeline,
    )


def load_config(path, seed: int | None = None, out_dir: str | None = None) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        with p.open() as f:
            raw = yaml.safe_load(f)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: invalid YAML: {exc}") from None
    return parse_config(raw, seed=seed, out_dir=out_dir)


def with_train(cfg: RunConfig, stage: str, **changes) -> RunConfig:
    train = dict(cfg.train)
    train[stage] = replace(train[stage], **changes)
    return replace(cfg, train=train)
