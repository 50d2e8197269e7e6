"""Model parameter container, seeded initialization, and checkpoint IO.

Parameters live in a flat name -> array dict with a fixed creation order so
initialization draws and optimizer updates are reproducible. Names follow
``group.leaf`` with leaf ``W*`` for weight matrices (L2-regularized),
``b*`` for biases, and ``w*`` for attention score vectors; the pathway
embedding table is ``embed``.

Checkpoints are versioned pickles that embed the resolved config text and
its fingerprint plus whatever extras the harness supplies (preprocessing
statistics, risk cutpoints, the compiled library); loading verifies the
format tag, version, and fingerprint.
"""

import pickle
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, DataError
from .modulation import EMBED_DIM, H0_DIM

__all__ = [
    "ModelParams",
    "init_params",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_FORMAT",
]

CHECKPOINT_FORMAT = "pathsurv-checkpoint"
CHECKPOINT_VERSION = 1

M_BAR_DIM = 2
MOD_OUT_DIM = 2


@dataclass
class ModelParams:
    """Ordered name -> float64 array mapping plus the shape metadata the
    forward pass needs (dims, relation count, pathway count)."""

    arrays: dict
    meta: dict = field(default_factory=dict)

    def names(self) -> list:
        return list(self.arrays)

    def regularized_names(self) -> list:
        """Weight matrices and attention vectors; never biases or the
        embedding table."""
        return [
            name
            for name in self.arrays
            if name != "embed" and name.rsplit(".", 1)[-1][0] in ("W", "w")
        ]

    def copy(self) -> "ModelParams":
        return ModelParams(
            {k: v.copy() for k, v in self.arrays.items()}, dict(self.meta)
        )

    def l2_norms(self) -> dict:
        return {n: float(np.linalg.norm(self.arrays[n]))
                for n in self.regularized_names()}


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_params(
    seed: int,
    n_pathways: int,
    n_relations: int,
    d_clinical: int,
    d_hidden: int = 32,
    heads: int = 2,
    layers: int = 2,
    d_context: int = 8,
    mlp_hidden: int = 16,
) -> ModelParams:
    """Draw all parameters in a fixed order from one seeded generator.

    Weight matrices are Xavier-uniform, biases zero, the embedding table
    uniform in [-0.1, 0.1], and the modulation output layer exactly zero so
    training starts at identity modulation.
    """
    if d_hidden % heads != 0:
        raise ConfigError("d_hidden must be divisible by heads")
    rng = np.random.default_rng(seed)
    arrays = {}

    def mat(name, fan_in, fan_out):
        arrays[name] = _xavier(rng, fan_in, fan_out)

    def bias(name, width):
        arrays[name] = np.zeros((1, width))

    arrays["embed"] = rng.uniform(-0.1, 0.1, size=(n_pathways, EMBED_DIM))
    mat("clin.W1", d_clinical, mlp_hidden)
    bias("clin.b1", mlp_hidden)
    mat("clin.W2", mlp_hidden, d_context)
    bias("clin.b2", d_context)
    mat("path.W1", EMBED_DIM + M_BAR_DIM, mlp_hidden)
    bias("path.b1", mlp_hidden)
    mat("path.W2", mlp_hidden, EMBED_DIM)
    bias("path.b2", EMBED_DIM)
    mat("mod.W1", M_BAR_DIM + EMBED_DIM + d_context, mlp_hidden)
    bias("mod.b1", mlp_hidden)
    arrays["mod.W2"] = np.zeros((mlp_hidden, MOD_OUT_DIM))
    bias("mod.b2", MOD_OUT_DIM)
    mat("lift.W", H0_DIM, d_hidden)
    bias("lift.b", d_hidden)
    for layer in range(layers):
        for r in range(n_relations):
            for leaf in ("Wk", "Wq", "Wv", "Wm"):
                mat(f"hgt{layer}.r{r}.{leaf}", d_hidden, d_hidden)
    mat("attn.Wg", d_hidden, d_hidden)
    mat("attn.wg", d_hidden, 1)
    mat("attn.Wp", d_hidden, d_hidden)
    mat("attn.wp", d_hidden, 1)
    mat("fuse.W1", d_hidden + d_context, d_hidden)
    bias("fuse.b1", d_hidden)
    mat("fuse.W2", d_hidden, 1)
    bias("fuse.b2", 1)

    meta = {
        "n_pathways": n_pathways,
        "n_relations": n_relations,
        "d_clinical": d_clinical,
        "d_hidden": d_hidden,
        "heads": heads,
        "layers": layers,
        "d_context": d_context,
        "mlp_hidden": mlp_hidden,
    }
    return ModelParams(arrays, meta)


def save_checkpoint(
    path: str,
    params: ModelParams,
    fingerprint: str,
    config_text: str,
    extras: Optional[dict] = None,
):
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "fingerprint": fingerprint,
        "config_text": config_text,
        "meta": dict(params.meta),
        "arrays": {k: v for k, v in params.arrays.items()},
        "extras": extras or {},
    }
    with open(path, "wb") as fh:
        pickle.dump(payload, fh)


def load_checkpoint(path: str, expect_fingerprint: Optional[str] = None):
    """Load (params, fingerprint, config_text, extras); refuse a checkpoint
    whose fingerprint does not match the expected one."""
    with open(path, "rb") as fh:
        payload = pickle.load(fh)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path}: not a model checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: checkpoint version unsupported")
    if expect_fingerprint is not None and payload["fingerprint"] != expect_fingerprint:
        raise ConfigError(
            f"{path}: checkpoint fingerprint {payload['fingerprint'][:12]}... "
            f"does not match the active config {expect_fingerprint[:12]}..."
        )
    params = ModelParams(
        {k: np.asarray(v, dtype=np.float64) for k, v in payload["arrays"].items()},
        dict(payload["meta"]),
    )
    return params, payload["fingerprint"], payload["config_text"], payload["extras"]
