"""Context-conditioned expression modulation and initial node states.

Each gene's expression is rescaled by range-controlled FiLM coefficients
computed from three context levels: the gene's own genomic state (cnv,
mutation), a pathway context from a learned pathway embedding plus the mean
genomic state of the pathway's genes, and an encoded clinical vector.

  gamma = 1 + 0.5 * tanh(gamma_hat)   in (0.5, 1.5)
  beta  = 2 * tanh(beta_hat)          in (-2, 2)
  x_tilde = gamma * x_expr + beta

The fused initial node state has exactly 16 columns in the fixed layout
[x_tilde, x_expr, x_cnv, x_mut, gamma, beta, e_k (8), m_bar (2)]. The
modulation network's output layer starts at zero, so an untrained model
applies the identity (gamma = 1, beta = 0).

All functions build nodes on a caller-owned tape; ``nodes`` maps parameter
names to tape input ids (see params.init_params for the catalogue).
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import SegmentMap, Tape
from .graphs import HierarchicalBatch

__all__ = ["EMBED_DIM", "H0_DIM", "HomResult", "clinical_context", "modulate"]

EMBED_DIM = 8  # forced by the 16-column state: 6 scalar slots + m_bar (2)
H0_DIM = 16


@dataclass
class HomResult:
    """Tape node ids for every published intermediate of the modulation
    stage. ``gamma``/``beta`` are None in identity mode."""

    z: int
    m_bar: int
    pathway_context: int
    embeddings: int
    gamma: Optional[int]
    beta: Optional[int]
    x_tilde: int
    h0: int


def clinical_context(tape: Tape, nodes: dict, clinical: np.ndarray) -> int:
    """z_i = f_clin(c_i): one tanh hidden layer, tanh-bounded output."""
    c = tape.input(np.asarray(clinical, dtype=np.float64))
    hidden = tape.tanh(tape.add(tape.matmul(c, nodes["clin.W1"]), nodes["clin.b1"]))
    return tape.tanh(tape.add(tape.matmul(hidden, nodes["clin.W2"]), nodes["clin.b2"]))


def _mlp_tanh(tape: Tape, x: int, nodes: dict, prefix: str) -> int:
    hidden = tape.tanh(
        tape.add(tape.matmul(x, nodes[f"{prefix}.W1"]), nodes[f"{prefix}.b1"])
    )
    return tape.tanh(
        tape.add(tape.matmul(hidden, nodes[f"{prefix}.W2"]), nodes[f"{prefix}.b2"])
    )


def modulate(
    tape: Tape,
    nodes: dict,
    batch: HierarchicalBatch,
    z: int,
    identity: bool = False,
) -> HomResult:
    """Build gamma, beta, x_tilde, and the fused h0 for one batch.

    ``identity=True`` (the no_hom ablation) emits the constant layout
    [x_expr, x_expr, x_cnv, x_mut, 1, 0, e_k, m_bar] without running the
    modulation network.
    """
    n = batch.n_nodes
    x_expr = tape.input(batch.node_x[:, 0:1])
    x_cnv = tape.input(batch.node_x[:, 1:2])
    x_mut = tape.input(batch.node_x[:, 2:3])
    m = tape.concat_cols(x_cnv, x_mut)

    gene_map = batch.gene_to_pathway
    m_bar = tape.segment_mean(m, gene_map)
    k = tape.value(nodes["embed"]).shape[0]
    e = tape.gather_rows(nodes["embed"], SegmentMap(batch.pathway_index, k))
    p = _mlp_tanh(tape, tape.concat_cols(e, m_bar), nodes, "path")

    per_node = SegmentMap(gene_map.index, batch.n_instances)
    e_g = tape.gather_rows(e, per_node)
    m_bar_g = tape.gather_rows(m_bar, per_node)

    if identity:
        ones = tape.input(np.ones((n, 1)))
        zeros = tape.input(np.zeros((n, 1)))
        h0 = tape.concat_cols(
            x_expr, x_expr, x_cnv, x_mut, ones, zeros, e_g, m_bar_g
        )
        return HomResult(z, m_bar, p, e, None, None, x_expr, h0)

    p_g = tape.gather_rows(p, per_node)
    patient_map = batch.gene_to_patient()
    z_g = tape.gather_rows(z, SegmentMap(patient_map.index, batch.n_patients))
    ctx = tape.concat_cols(m, p_g, z_g)
    hidden = tape.tanh(
        tape.add(tape.matmul(ctx, nodes["mod.W1"]), nodes["mod.b1"])
    )
    raw = tape.add(tape.matmul(hidden, nodes["mod.W2"]), nodes["mod.b2"])

    pick_gamma = tape.input(np.array([[1.0], [0.0]]))
    pick_beta = tape.input(np.array([[0.0], [1.0]]))
    gamma_hat = tape.matmul(raw, pick_gamma)
    beta_hat = tape.matmul(raw, pick_beta)
    one = tape.input(np.ones((1, 1)))
    gamma = tape.add(tape.scale(tape.tanh(gamma_hat), 0.5), one)
    beta = tape.scale(tape.tanh(beta_hat), 2.0)
    x_tilde = tape.add(tape.mul(gamma, x_expr), beta)

    h0 = tape.concat_cols(
        x_tilde, x_expr, x_cnv, x_mut, gamma, beta, e_g, m_bar_g
    )
    return HomResult(z, m_bar, p, e, gamma, beta, x_tilde, h0)
