"""Run configuration: level geometry, loss weights, schedules, optimizer.

Dimensions must strictly increase up the hierarchy and stay even (the
compressors concatenate two LSTM directions of half the target size).  The
seed is mandatory: determinism is a feature, not an option.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field


@dataclass
class LevelConfig:
    name: str
    dim: int
    cap: int = 0          # slots for sequences of this level's nodes (0: top level)
    n_layers: int = 2
    n_heads: int = 2
    ff_mult: int = 4


def default_levels():
    return [
        LevelConfig("token", 32, 16),
        LevelConfig("sentence", 48, 8),
        LevelConfig("paragraph", 64, 8),
        LevelConfig("document", 96),
    ]


def _weight_grid(value=1.0):
    return {"recon": value, "mlm": value, "coherence": value}


@dataclass
class RunConfig:
    seed: int
    levels: list = field(default_factory=default_levels)
    # corpus
    min_freq: int = 1
    max_vocab: int = 4096
    batch_size: int = 4
    # losses; each family weight is a float or a {level_name: float} dict
    mlm_rate: float = 0.15
    loss_weights: dict = field(default_factory=_weight_grid)
    ae_eps0: float = 0.1
    staged: bool = False
    # coherence checker / generator depth (shared architecture family)
    head_layers: int = 2
    # PNDB
    pndb_mode: str = "off"            # off | pool_all | leave_one_out
    pndb_questions: int = 4
    pndb_filters: int = 16
    # GAN
    gan_mode: str = "off"             # off | post | cc
    gan_steps: int = 0
    # optimizer / schedule
    lr: float = 1e-3
    gan_lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    steps: int = 2000
    checkpoint_every: int = 500
    # generation
    edit_eps: float = 0.1
    edit_steps: int = 3
    noise_ema: float = 0.99
    sigma_floor: float = 1e-3
    # optional default paths (CLI flags take precedence)
    corpus_dir: str = None
    vocab_path: str = None
    out_dir: str = None

    def __post_init__(self):
        if isinstance(self.levels, list) and self.levels and isinstance(self.levels[0], dict):
            self.levels = [LevelConfig(**lv) for lv in self.levels]
        self.validate()

    # -- helpers -----------------------------------------------------------------

    @property
    def level_names(self):
        return tuple(lv.name for lv in self.levels)

    def level(self, name):
        for lv in self.levels:
            if lv.name == name:
                return lv
        raise KeyError(name)

    @property
    def caps(self):
        return {lv.name: lv.cap for lv in self.levels if lv.cap}

    def child_levels(self):
        """Levels that appear as sequences inside a parent (all but the top)."""
        return self.levels[:-1]

    def pairs(self):
        """(child, parent) level pairs, bottom-up."""
        return list(zip(self.levels[:-1], self.levels[1:]))

    def validate(self):
        if self.seed is None:
            raise ValueError("seed is mandatory")
        if len(self.levels) < 2:
            raise ValueError("need at least two levels")
        for lo, hi in zip(self.levels, self.levels[1:]):
            if hi.dim <= lo.dim:
                raise ValueError(
                    f"dimensions must strictly increase: {lo.name}={lo.dim} !< {hi.name}={hi.dim}")
        for lv in self.levels:
            if lv.dim % 2 != 0:
                raise ValueError(f"{lv.name}: dimension must be even, got {lv.dim}")
            if lv is not self.levels[-1] and lv.cap < 2:
                raise ValueError(f"{lv.name}: cap must be >= 2 (content + EoS)")
        if not 0.0 < self.mlm_rate < 1.0:
            raise ValueError("mlm_rate must be in (0, 1)")
        flat_weights = []
        for family, w in self.loss_weights.items():
            if family not in ("recon", "mlm", "coherence"):
                raise ValueError(f"unknown loss family {family!r}")
            values = list(w.values()) if isinstance(w, dict) else [w]
            if any(v < 0 for v in values):
                raise ValueError(f"loss weight {family} must be >= 0")
            flat_weights.extend(values)
        if not flat_weights or all(v == 0 for v in flat_weights):
            raise ValueError("at least one loss component must be enabled")
        if self.pndb_mode not in ("off", "pool_all", "leave_one_out"):
            raise ValueError(f"unknown pndb_mode {self.pndb_mode!r}")
        if self.pndb_mode != "off":
            if self.pndb_filters % 8 != 0:
                raise ValueError("pndb_filters must be divisible by 8")
            if self.pndb_questions >= self.levels[0].cap:
                raise ValueError("pndb_questions must be < the token cap")
        if self.gan_mode not in ("off", "post", "cc"):
            raise ValueError(f"unknown gan_mode {self.gan_mode!r}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.edit_eps <= 1.0:
            raise ValueError("edit_eps must lie in [0, 1]")

    def weight(self, family, level_name):
        w = self.loss_weights.get(family, 1.0)
        if isinstance(w, dict):
            return float(w.get(level_name, 1.0))
        return float(w)

    def ae_eps(self, step):
        """Linear decay from ae_eps0 to zero over the first half of training."""
        half = max(1, self.steps // 2)
        return self.ae_eps0 * max(0.0, 1.0 - step / half)

    # -- (de)serialization ---------------------------------------------------------

    def to_json(self):
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))

    @classmethod
    def from_file(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())
