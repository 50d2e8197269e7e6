"""Relation-typed message passing, dual attention pooling, and risk head.

The forward pass runs on one tape over a collated batch:

  h0 (modulation) -> linear lift to d_h -> L typed attention layers ->
  gene-to-pathway attention -> pathway-to-patient attention ->
  concat with clinical context -> scalar risk theta per patient.

Attention inside a layer is scaled dot-product per relation and head with
one joint softmax over all incoming edges of a target node, regardless of
relation. Per-relation edge blocks are computed separately and placed into
the full edge ordering with injective segment sums, so the whole layer
stays inside the autodiff primitive set. Isolated nodes pass through the
residual unchanged.

Ablation modes swap stages: ``no_hom`` freezes modulation at identity,
``no_intra_attn``/``no_inter_attn``/``mean_pool_both`` replace the
respective softmax pooling with segment means, and ``monolithic`` (built on
the merged single-graph library) feeds mean-pooled node states straight to
the patient head.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import SegmentMap, Tape
from .config import MODES
from .errors import ConfigError, DataError
from .graphs import HierarchicalBatch
from .modulation import HomResult, clinical_context, modulate
from .params import ModelParams

__all__ = ["ForwardResult", "forward", "run_forward", "hgt_layer"]


@dataclass
class ForwardResult:
    """Tape node ids for every published quantity of one forward pass.
    ``alpha``/``pi``/``pathway_vectors`` are None when the mode removes the
    corresponding stage."""

    theta: int
    z: int
    node_states: int
    pathway_vectors: Optional[int]
    alpha: Optional[int]
    pi: Optional[int]
    patient_vectors: int
    hom: HomResult


def _head_selectors(tape: Tape, d_hidden: int, heads: int):
    """Constant 0/1 matrices: column-block sum (d_h x H) and its transpose
    for expanding per-head weights back to d_h columns."""
    d_head = d_hidden // heads
    blocks = np.zeros((d_hidden, heads))
    for h in range(heads):
        blocks[h * d_head : (h + 1) * d_head, h] = 1.0
    return tape.input(blocks), tape.input(blocks.T.copy())


def hgt_layer(
    tape: Tape,
    nodes: dict,
    batch: HierarchicalBatch,
    h: int,
    layer: int,
    d_hidden: int,
    heads: int,
) -> int:
    """One relation-typed attention layer with residual update."""
    n = batch.n_nodes
    total_edges = int(batch.edge_dst_all.size)
    if total_edges == 0:
        return h
    d_head = d_hidden // heads
    head_sum, head_expand = _head_selectors(tape, d_hidden, heads)

    scores_all = None
    messages_all = None
    for r in range(len(batch.edge_src_by_rel)):
        src = batch.edge_src_by_rel[r]
        if src.size == 0:
            continue
        dst = batch.edge_dst_by_rel[r]
        h_src = tape.gather_rows(h, SegmentMap(src, n))
        h_dst = tape.gather_rows(h, SegmentMap(dst, n))
        prefix = f"hgt{layer}.r{r}"
        queries = tape.matmul(h_dst, nodes[f"{prefix}.Wq"])
        keys = tape.matmul(h_src, nodes[f"{prefix}.Wk"])
        values = tape.matmul(h_src, nodes[f"{prefix}.Wv"])
        messages = tape.matmul(values, nodes[f"{prefix}.Wm"])
        scores = tape.scale(
            tape.matmul(tape.mul(queries, keys), head_sum),
            1.0 / np.sqrt(d_head),
        )
        # Place this relation's contiguous block into the full edge order.
        offset = int(batch.edge_offsets[r])
        place = SegmentMap(
            np.arange(offset, offset + src.size, dtype=np.int64), total_edges
        )
        placed_scores = tape.segment_sum(scores, place)
        placed_messages = tape.segment_sum(messages, place)
        scores_all = (
            placed_scores
            if scores_all is None
            else tape.add(scores_all, placed_scores)
        )
        messages_all = (
            placed_messages
            if messages_all is None
            else tape.add(messages_all, placed_messages)
        )

    by_target = SegmentMap(batch.edge_dst_all, n)
    alpha = tape.segment_softmax(scores_all, by_target)
    weighted = tape.mul(tape.matmul(alpha, head_expand), messages_all)
    aggregated = tape.segment_sum(weighted, by_target)
    return tape.add(tape.tanh(aggregated), h)


def _attention_pool(
    tape: Tape, x: int, seg: SegmentMap, w_proj: int, w_score: int, width: int
):
    """Score, softmax within segments, weighted sum. Returns (pooled,
    attention) node ids."""
    scores = tape.matmul(tape.tanh(tape.matmul(x, w_proj)), w_score)
    attention = tape.segment_softmax(scores, seg)
    tiled = tape.matmul(attention, tape.input(np.ones((1, width))))
    pooled = tape.segment_sum(tape.mul(tiled, x), seg)
    return pooled, attention


def forward(
    tape: Tape, nodes: dict, batch: HierarchicalBatch, params: ModelParams,
    mode: str = "full",
) -> ForwardResult:
    """Full forward pass for one batch under an ablation mode."""
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    meta = params.meta
    if len(batch.edge_src_by_rel) != meta["n_relations"]:
        raise DataError(
            f"batch carries {len(batch.edge_src_by_rel)} relations but the "
            f"model was built for {meta['n_relations']}"
        )
    d_hidden = meta["d_hidden"]

    z = clinical_context(tape, nodes, batch.clinical)
    hom = modulate(tape, nodes, batch, z, identity=(mode == "no_hom"))
    h = tape.add(tape.matmul(hom.h0, nodes["lift.W"]), nodes["lift.b"])
    for layer in range(meta["layers"]):
        h = hgt_layer(tape, nodes, batch, h, layer, d_hidden, meta["heads"])

    alpha = pi = pathway_vectors = None
    if mode == "monolithic":
        patient_vectors = tape.segment_mean(h, batch.gene_to_patient())
    else:
        if mode in ("no_intra_attn", "mean_pool_both"):
            pathway_vectors = tape.segment_mean(h, batch.gene_to_pathway)
        else:
            pathway_vectors, alpha = _attention_pool(
                tape, h, batch.gene_to_pathway,
                nodes["attn.Wg"], nodes["attn.wg"], d_hidden,
            )
        if mode in ("no_inter_attn", "mean_pool_both"):
            patient_vectors = tape.segment_mean(
                pathway_vectors, batch.pathway_to_patient
            )
        else:
            patient_vectors, pi = _attention_pool(
                tape, pathway_vectors, batch.pathway_to_patient,
                nodes["attn.Wp"], nodes["attn.wp"], d_hidden,
            )

    fused = tape.concat_cols(patient_vectors, z)
    hidden = tape.tanh(
        tape.add(tape.matmul(fused, nodes["fuse.W1"]), nodes["fuse.b1"])
    )
    theta = tape.add(tape.matmul(hidden, nodes["fuse.W2"]), nodes["fuse.b2"])
    return ForwardResult(
        theta=theta,
        z=z,
        node_states=h,
        pathway_vectors=pathway_vectors,
        alpha=alpha,
        pi=pi,
        patient_vectors=patient_vectors,
        hom=hom,
    )


def run_forward(params: ModelParams, batch: HierarchicalBatch, mode: str = "full"):
    """Fresh tape, parameter input nodes, one forward pass.

    Returns (tape, nodes, result); callers keep building on the tape (loss)
    or just read values off the result.
    """
    tape = Tape()
    nodes = {name: tape.input(arr) for name, arr in params.arrays.items()}
    return tape, nodes, forward(tape, nodes, batch, params, mode)
