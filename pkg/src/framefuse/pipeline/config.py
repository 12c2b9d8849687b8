from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields

from ..context import HEADS
from ..gates import EXPANSION, SQUEEZE, ConfigurationError, GateParadigm

CALCULATORS = ("meanP", "excitation+meanP", "aggregation", "excitation+aggregation", "seqLSTM", "seqTransf", "tight")


@dataclass
class TrainConfig:
    calculator: str = "excitation+aggregation"
    head: str = "aggregation"  # seqLSTM / seqTransf only
    excitation_paradigm: str = SQUEEZE
    aggregation_paradigm: str = SQUEEZE
    pre_excite: bool = True  # tight only
    r: int = 4
    k: int = 4
    epochs: int = 5
    batch_size: int = 128
    lr: float = 1e-4
    backbone_lr: float = 1e-7  # kept for parity; embeddings are frozen so it is never used
    temperature: float = 0.05
    learn_temperature: bool = False
    seed: int = 0
    frames: int = 12
    channels: int = 32
    lstm_layers: int = 1
    transformer_layers: int = 4
    heads: int = 8
    residual: bool = True
    init: str = "uniform"
    early_stop: bool = False
    eval_every: int = 1

    def __post_init__(self):
        if self.calculator not in CALCULATORS:
            raise ConfigurationError(f"unknown calculator {self.calculator!r}; choose from {CALCULATORS}")
        if self.calculator in ("seqLSTM", "seqTransf") and self.head not in HEADS:
            raise ConfigurationError(f"unknown head {self.head!r}; choose from {HEADS}")
        for name in ("excitation_paradigm", "aggregation_paradigm"):
            if getattr(self, name) not in (SQUEEZE, EXPANSION):
                raise ConfigurationError(f"{name} must be squeeze or expansion")
        if self.init not in ("uniform", "zero"):
            raise ConfigurationError("init must be 'uniform' or 'zero'")
        for name in ("r", "k", "batch_size", "frames", "channels", "lstm_layers", "transformer_layers", "heads", "eval_every"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if self.temperature <= 0 or self.lr < 0:
            raise ConfigurationError("temperature must be positive and lr non-negative")

    @property
    def uses_excitation(self) -> bool:
        if self.calculator in ("seqLSTM", "seqTransf"):
            return self.head.startswith("excitation")
        if self.calculator == "tight":
            return self.pre_excite
        return self.calculator.startswith("excitation")

    @property
    def uses_aggregation(self) -> bool:
        if self.calculator in ("seqLSTM", "seqTransf"):
            return self.head.endswith("aggregation")
        return self.calculator.endswith("aggregation")

    def paradigm(self, kind: str) -> GateParadigm:
        return GateParadigm(kind, self.r if kind == SQUEEZE else self.k)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


# The twelve calculator variants used for gradient checks and the acceptance sweep.
VARIANTS = {
    "meanP": dict(calculator="meanP"),
    "squeeze-excitation+meanP": dict(calculator="excitation+meanP", excitation_paradigm=SQUEEZE),
    "expansion-excitation+meanP": dict(calculator="excitation+meanP", excitation_paradigm=EXPANSION),
    "squeeze-aggregation": dict(calculator="aggregation", aggregation_paradigm=SQUEEZE),
    "expansion-aggregation": dict(calculator="aggregation", aggregation_paradigm=EXPANSION),
    "squeeze&squeeze": dict(calculator="excitation+aggregation", excitation_paradigm=SQUEEZE, aggregation_paradigm=SQUEEZE),
    "expansion&expansion": dict(
        calculator="excitation+aggregation", excitation_paradigm=EXPANSION, aggregation_paradigm=EXPANSION
    ),
    "squeeze&expansion": dict(calculator="excitation+aggregation", excitation_paradigm=SQUEEZE, aggregation_paradigm=EXPANSION),
    "expansion&squeeze": dict(calculator="excitation+aggregation", excitation_paradigm=EXPANSION, aggregation_paradigm=SQUEEZE),
    "seqLSTM+expansion-aggregation": dict(calculator="seqLSTM", head="aggregation", aggregation_paradigm=EXPANSION),
    "seqTransf+expansion-aggregation": dict(calculator="seqTransf", head="aggregation", aggregation_paradigm=EXPANSION),
    "tight+squeeze-excitation": dict(calculator="tight", pre_excite=True, excitation_paradigm=SQUEEZE),
}


def variant_config(name: str, **overrides) -> TrainConfig:
    if name not in VARIANTS:
        raise ConfigurationError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
    return TrainConfig(**{**VARIANTS[name], **overrides})
