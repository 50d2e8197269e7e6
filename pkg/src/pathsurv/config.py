"""Run configuration: flat key=value files, defaults, and fingerprints.

Every tunable in the pipeline lives in ``RunConfig`` with a default, so a
run is fully described by (config file, overrides). The resolved config is
serialized next to every artifact and hashed into a fingerprint; checkpoints
refuse to load under a different fingerprint.

File format: one ``key = value`` per line, ``#`` starts a comment, blank
lines ignored.
"""

import dataclasses
import hashlib
from dataclasses import dataclass
from typing import Union

from .errors import ConfigError

__all__ = ["RunConfig", "SynthSpec", "parse_kv_file", "format_kv"]

MODES = (
    "full",
    "no_hom",
    "no_intra_attn",
    "no_inter_attn",
    "mean_pool_both",
    "monolithic",
)

_BOOL_WORDS = {
    "true": True,
    "false": False,
    "1": True,
    "0": False,
    "yes": True,
    "no": False,
}


def parse_kv_file(path: str) -> dict:
    """Read a flat key=value file into a string dict."""
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, value = line.split("=", 1)
            key = key.strip()
            if not key:
                raise ConfigError(f"{path}:{lineno}: empty key")
            if key in out:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            out[key] = value.strip()
    return out


def format_kv(pairs: dict) -> str:
    """Canonical serialization: sorted keys, repr-stable values."""
    lines = []
    for key in sorted(pairs):
        value = pairs[key]
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def _coerce(name: str, text: str, target_type):
    if target_type is bool:
        word = text.lower()
        if word not in _BOOL_WORDS:
            raise ConfigError(f"{name}: expected a boolean, got {text!r}")
        return _BOOL_WORDS[word]
    try:
        return target_type(text)
    except ValueError as exc:
        raise ConfigError(
            f"{name}: expected {target_type.__name__}, got {text!r}"
        ) from exc


class _KvConfig:
    """Shared plumbing for dataclass configs backed by key=value files."""

    @classmethod
    def from_mapping(cls, mapping: dict):
        fields = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, text in mapping.items():
            if key not in fields:
                raise ConfigError(f"unknown config key {key!r}")
            target = fields[key]
            if isinstance(target, str):
                target = {"int": int, "float": float, "str": str, "bool": bool}[
                    target
                ]
            kwargs[key] = _coerce(key, text, target)
        config = cls(**kwargs)
        config.validate()
        return config

    @classmethod
    def from_file(cls, path: str, overrides: dict = None):
        mapping = parse_kv_file(path)
        mapping.update(overrides or {})
        return cls.from_mapping(mapping)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        return format_kv(self.to_dict())

    def fingerprint(self) -> str:
        """sha256 of the canonical serialization of every resolved field."""
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def validate(self):
        raise NotImplementedError


@dataclass
class RunConfig(_KvConfig):
    """All pipeline knobs. Defaults reproduce the reference protocol."""

    # Data layout: file names resolved inside the CLI --data directory.
    expression_file: str = "expression.tsv"
    cnv_file: str = "cnv.tsv"
    mutation_file: str = "mutation.tsv"
    clinical_file: str = "clinical.csv"
    survival_file: str = "survival.csv"
    mapping_file: str = "mapping.tsv"
    edges_file: str = "edges.tsv"
    cohort_name: str = "cohort"

    # Preprocessing.
    expression_log1p: bool = False  # inputs assumed pre-logged by default

    # Graph compilation.
    add_reverse_edges: bool = False  # reversed copies under "rev:<relation>"

    # Architecture.
    d_hidden: int = 32
    heads: int = 2
    layers: int = 2
    d_context: int = 8
    mlp_hidden: int = 16
    activation: str = "tanh"
    mode: str = "full"

    # Optimization.
    seed: int = 7
    folds: int = 5
    epochs: int = 100
    learning_rate: float = 1e-3
    batch_size: int = 32
    l2: float = 0.1

    # Evaluation and reporting.
    horizon: str = "median"  # or a positive number of days
    stratify: str = "median"  # or "tertiles"
    top_pathways: int = 10
    top_genes: int = 10
    eval_chunk: int = 64
    workers: int = 1

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(
                f"mode must be one of {', '.join(MODES)}; got {self.mode!r}"
            )
        if self.activation != "tanh":
            raise ConfigError("activation: only 'tanh' is implemented")
        if self.stratify not in ("median", "tertiles"):
            raise ConfigError("stratify must be 'median' or 'tertiles'")
        if self.horizon != "median":
            try:
                value = float(self.horizon)
            except ValueError:
                raise ConfigError(
                    "horizon must be 'median' or a positive number"
                ) from None
            if value <= 0:
                raise ConfigError("horizon must be positive")
        for name in ("d_hidden", "heads", "layers", "d_context", "mlp_hidden",
                     "epochs", "batch_size", "top_pathways", "top_genes",
                     "eval_chunk", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.d_hidden % self.heads != 0:
            raise ConfigError("d_hidden must be divisible by heads")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.l2 < 0:
            raise ConfigError("l2 must be nonnegative")

    def horizon_days(self) -> Union[float, None]:
        """Fixed horizon in days, or None for the median rule."""
        return None if self.horizon == "median" else float(self.horizon)


@dataclass
class SynthSpec(_KvConfig):
    """Synthetic cohort description for the `synth` subcommand."""

    n_patients: int = 300
    n_pathways: int = 20
    genes_per_pathway: int = 15
    edges_per_pathway: int = 30
    causal_pathways: str = "P001"  # comma-separated pathway ids
    effect_size: float = 1.5
    censoring_rate: float = 0.3
    mutation_rate: float = 0.3

    def validate(self):
        for name in ("n_pathways", "genes_per_pathway", "edges_per_pathway"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.n_patients < 2:
            raise ConfigError("n_patients must be >= 2")
        if self.genes_per_pathway < 2:
            raise ConfigError("genes_per_pathway must be >= 2")
        if not 0.0 <= self.censoring_rate < 1.0:
            raise ConfigError("censoring_rate must be in [0, 1)")
        if not 0.0 <= self.mutation_rate <= 1.0:
            raise ConfigError("mutation_rate must be in [0, 1]")
        if self.effect_size < 0:
            raise ConfigError("effect_size must be nonnegative")
        ids = {f"P{k:03d}" for k in range(self.n_pathways)}
        for pid in self.causal_ids():
            if pid not in ids:
                # An id outside the generated range would silently plant
                # no signal at all.
                raise ConfigError(
                    f"causal pathway {pid!r} not among the generated ids "
                    f"P000..P{self.n_pathways - 1:03d}"
                )
        if not self.causal_ids():
            raise ConfigError("causal_pathways lists no ids")

    def causal_ids(self) -> list:
        return [p.strip() for p in self.causal_pathways.split(",") if p.strip()]
