"""Token id ranges shared by every corpus and model."""

from __future__ import annotations

from dataclasses import asdict, dataclass

from ..errors import ConfigError, DomainError

RANGES = ("phonetic", "pitch", "style", "text")


@dataclass(frozen=True)
class VocabLayout:
    """Contiguous ranges in the order phonetic, pitch, style, text, then the
    [SPEECH] and [TEXT] markers."""

    n_phonetic: int = 100
    n_pitch: int = 8
    n_style: int = 4
    n_text: int = 40

    def __post_init__(self):
        for name in ("n_phonetic", "n_pitch", "n_style", "n_text"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.n_pitch % self.n_style:
            raise ConfigError("n_pitch must be a multiple of n_style (one pitch register per style)")

    def start(self, name: str) -> int:
        off = 0
        for r in RANGES:
            if r == name:
                return off
            off += getattr(self, f"n_{r}")
        raise KeyError(name)

    def span(self, name: str) -> range:
        s = self.start(name)
        return range(s, s + getattr(self, f"n_{name}"))

    @property
    def speech_marker(self) -> int:
        return self.start("text") + self.n_text

    @property
    def text_marker(self) -> int:
        return self.speech_marker + 1

    @property
    def vocab_size(self) -> int:
        return self.text_marker + 1

    @property
    def pitch_per_style(self) -> int:
        return self.n_pitch // self.n_style

    def register(self, style_index: int) -> range:
        """Pitch ids reserved for style ``style_index``."""
        k = self.pitch_per_style
        base = self.start("pitch") + style_index * k
        return range(base, base + k)

    def style_token(self, style_index: int) -> int:
        if not 0 <= style_index < self.n_style:
            raise DomainError(f"style index {style_index} out of range")
        return self.start("style") + style_index

    def classify(self, token: int) -> str:
        if 0 <= token < self.speech_marker:
            for r in RANGES:
                if token in self.span(r):
                    return r
        if token == self.speech_marker:
            return "speech_marker"
        if token == self.text_marker:
            return "text_marker"
        raise DomainError(f"token {token} lies outside the layout")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        extra = set(d) - {"n_phonetic", "n_pitch", "n_style", "n_text"}
        if extra:
            raise ConfigError(f"unknown layout keys: {sorted(extra)}")
        return cls(**d)
