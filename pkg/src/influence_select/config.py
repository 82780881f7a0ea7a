"""Run configuration: one documented key-value file plus flag overrides.

The file format is ``section.key = value`` lines; ``#`` starts a comment.
Overrides passed as ``--set section.key=value`` win over the file. Every
command output carries a fingerprint of the fully resolved configuration so
reruns can be checked for byte-identity.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields

from .bandit import BanditConfig
from .errors import UsageError
from .model import ModelConfig
from .trainer import TrainConfig


@dataclass
class PathsConfig:
    embeddings: str = "embeddings.bin"
    embedding_format: str = "binary"
    tokens: str = "tokens.tsv"
    reference: str = "reference.tsv"
    output_dir: str = "out"


@dataclass
class ClusteringConfig:
    k: int = 64
    seed: int = 0
    max_iters: int = 100
    tol: float = 0.0
    normalize: bool = False


@dataclass
class InfluenceConfig:
    damping: float = 1e-3
    sketch_dim: int = 256
    sketch_seed: int = 0
    use_sketch: bool = False
    layers: str = "qkv-joint,attn-out,mlp-1,mlp-2"  # tracked-layer kinds

    def kinds(self) -> tuple[str, ...]:
        return tuple(s.strip() for s in self.layers.split(",") if s.strip())


@dataclass
class SelectionConfig:
    budget: int = 500
    seed: int = 0


@dataclass
class ModelSection:
    vocab_size: int = 256
    hidden_dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_context: int = 64
    mlp_ratio: float = 8.0 / 3.0
    rope_base: float = 10000.0
    init_seed: int = 0

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            vocab_size=self.vocab_size,
            hidden_dim=self.hidden_dim,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            max_context=self.max_context,
            mlp_ratio=self.mlp_ratio,
            rope_base=self.rope_base,
        )


@dataclass
class SimConfig:
    arms: int = 20
    steps: int = 1000
    trials: int = 20
    alpha: float = 1.0
    sigma: float = 1.0
    members_per_arm: int = 400
    best_mean: float = 2.5
    spread: float = 1.8
    seed: int = 0


@dataclass
class OracleConfig:
    candidates: int = 40
    damping: float = 1e-3
    seed: int = 0
    # tiny dims so the dense cap holds
    vocab_size: int = 13
    hidden_dim: int = 12
    n_layers: int = 1
    n_heads: int = 2
    seq_len: int = 8
    n_sequences: int = 12


@dataclass
class ReportConfig:
    baseline_seed: int = 0


@dataclass
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    clustering: ClusteringConfig = field(default_factory=ClusteringConfig)
    bandit: BanditConfig = field(default_factory=BanditConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    influence: InfluenceConfig = field(default_factory=InfluenceConfig)
    model: ModelSection = field(default_factory=ModelSection)
    trainer: TrainConfig = field(default_factory=TrainConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    report: ReportConfig = field(default_factory=ReportConfig)
    workers: int = 1


_SECTIONS = {
    "paths": PathsConfig,
    "clustering": ClusteringConfig,
    "bandit": BanditConfig,
    "selection": SelectionConfig,
    "influence": InfluenceConfig,
    "model": ModelSection,
    "trainer": TrainConfig,
    "sim": SimConfig,
    "oracle": OracleConfig,
    "report": ReportConfig,
}


def _parse_value(text: str, typ):
    text = text.strip()
    if typ is bool:
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"cannot parse boolean from {text!r}")
    if typ is int:
        try:
            return int(text)
        except ValueError as exc:
            raise UsageError(f"cannot parse integer from {text!r}") from exc
    if typ is float:
        try:
            return float(text)
        except ValueError as exc:
            raise UsageError(f"cannot parse float from {text!r}") from exc
    return text


def apply_assignment(cfg: RunConfig, key: str, value: str) -> None:
    """Set ``section.field`` (or top-level ``workers``) from its text form."""
    key = key.strip()
    if key == "workers":
        cfg.workers = _parse_value(value, int)
        return
    if "." not in key:
        raise UsageError(f"config key {key!r} must look like section.field")
    section, name = key.split(".", 1)
    if section not in _SECTIONS:
        raise UsageError(f"unknown config section {section!r}")
    target = getattr(cfg, section)
    if (section, name) not in _FIELD_TYPES:
        raise UsageError(f"unknown config key {section}.{name}")
    setattr(target, name, _parse_value(value, _FIELD_TYPES[(section, name)]))


def _field_types():
    out = {}
    for sec, cls in _SECTIONS.items():
        probe = cls()
        for f in fields(cls):
            out[(sec, f.name)] = type(getattr(probe, f.name))
    return out


_FIELD_TYPES = _field_types()


def load_config(path: str | None, overrides: list[str] = ()) -> RunConfig:
    """Build a RunConfig from an optional file plus key=value overrides."""
    cfg = RunConfig()
    assignments: list[tuple[str, str]] = []
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise UsageError(f"{path}:{lineno}: expected 'section.key = value'")
                key, value = line.split("=", 1)
                assignments.append((key, value))
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"override {item!r} must look like section.key=value")
        key, value = item.split("=", 1)
        assignments.append((key, value))
    for key, value in assignments:
        apply_assignment(cfg, key, value)
    # re-run validation hooks that only fire on construction
    cfg.bandit.__post_init__()
    cfg.trainer.__post_init__()
    return cfg


def canonical_text(cfg: RunConfig) -> str:
    """Sorted section.key = value serialization used for fingerprinting."""
    lines = [f"workers = {cfg.workers}"]
    for sec in sorted(_SECTIONS):
        target = getattr(cfg, sec)
        for f in sorted(fields(target), key=lambda f: f.name):
            v = getattr(target, f.name)
            if isinstance(v, float):
                lines.append(f"{sec}.{f.name} = {v:.17g}")
            else:
                lines.append(f"{sec}.{f.name} = {v}")
    return "\n".join(sorted(lines)) + "\n"


def fingerprint(cfg: RunConfig) -> str:
    return hashlib.sha256(canonical_text(cfg).encode("utf-8")).hexdigest()[:16]
