"""Pathway topology library, per-patient packages, and batch collation.

The library is compiled once from the gene-pathway mapping and the typed
edge file and never touches patient data. Patient packages instantiate a
pathway iff at least one of its genes has at least one observed modality;
zero-fill of unobserved entries happens exactly here, nowhere else.

Batches concatenate variable-size pathway instances without padding and
carry three index maps: gene to pathway instance, pathway instance to
patient, and their composition gene to patient.
"""

import logging
import pickle
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional, Sequence

import numpy as np

from .autodiff import SegmentMap
from .errors import DataError
from .omics import AlignedCohort

__all__ = [
    "PathwayTopology",
    "TopologyLibrary",
    "PatientPackage",
    "HierarchicalBatch",
    "load_relation_synonyms",
    "load_pathway_catalogue",
    "build_monolithic_graph",
    "build_patient_package",
    "collate_batch",
    "save_library",
    "load_library",
]

logger = logging.getLogger(__name__)

LIBRARY_FORMAT = "pathsurv-library"
LIBRARY_VERSION = 1


@dataclass
class PathwayTopology:
    """One pathway: lexicographically ordered genes and typed directed
    edges in local coordinates, sorted by (relation, src, dst)."""

    pathway_id: str
    genes: list
    edge_src: np.ndarray
    edge_dst: np.ndarray
    edge_rel: np.ndarray

    @property
    def n_edges(self) -> int:
        return int(self.edge_src.size)


@dataclass
class TopologyLibrary:
    """Patient-invariant pathway catalogue with a shared relation
    vocabulary. ``pre_filter_count`` records the catalogue size before the
    two-gene minimum dropped anything."""

    pathways: list
    relations: list
    pre_filter_count: int

    @property
    def K(self) -> int:
        return len(self.pathways)

    def pathway_ids(self) -> list:
        return [p.pathway_id for p in self.pathways]


def load_relation_synonyms(path: Optional[str] = None) -> dict:
    """Load the raw-to-canonical relation label table."""
    if path is None:
        text = (
            resources.files("pathsurv.data")
            .joinpath("relation_synonyms.tsv")
            .read_text(encoding="utf-8")
        )
    else:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    table = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"synonym table line {lineno}: expected 2 columns")
        table[parts[0].strip().lower()] = parts[1].strip().lower()
    return table


def _normalize_relation(label: str, synonyms: dict) -> str:
    label = label.strip().lower()
    if not label:
        raise DataError("empty relation label")
    return synonyms.get(label, label)


def _read_tsv(path: str, n_cols: int, what: str) -> list:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != n_cols:
                raise DataError(
                    f"{path}:{lineno}: {what} row needs {n_cols} columns"
                )
            rows.append([p.strip() for p in parts])
    return rows


def load_pathway_catalogue(
    mapping_path: str,
    edges_path: str,
    gene_universe: Optional[Sequence[str]] = None,
    synonyms: Optional[dict] = None,
    add_reverse_edges: bool = False,
) -> TopologyLibrary:
    """Compile the topology library.

    Mapping rows are (pathway_id, gene_id); edge rows are (pathway_id, src,
    dst, relation). Genes are filtered to ``gene_universe`` when given;
    edges keep only endpoints that survive; pathways below two genes are
    dropped. Duplicate edges within a pathway dedup with a log line.
    Self-loops are kept. ``add_reverse_edges`` appends reversed copies
    under the distinct relation ``rev:<label>``.
    """
    if synonyms is None:
        synonyms = load_relation_synonyms()
    universe = None if gene_universe is None else set(gene_universe)

    members = {}
    order = []
    for pathway_id, gene in _read_tsv(mapping_path, 2, "mapping"):
        if pathway_id not in members:
            members[pathway_id] = set()
            order.append(pathway_id)
        members[pathway_id].add(gene)
    if not members:
        raise DataError(f"{mapping_path}: empty mapping")

    edges = {pid: [] for pid in members}
    for pathway_id, src, dst, label in _read_tsv(edges_path, 4, "edge"):
        if pathway_id not in members:
            raise DataError(
                f"{edges_path}: edge references unknown pathway {pathway_id!r}"
            )
        relation = _normalize_relation(label, synonyms)
        edges[pathway_id].append((src, dst, relation))
        if add_reverse_edges:
            edges[pathway_id].append((dst, src, f"rev:{relation}"))

    pre_filter_count = len(order)
    kept_ids = []
    kept_genes = {}
    kept_edges = {}
    relation_labels = set()
    for pid in sorted(order):
        genes = sorted(
            members[pid] if universe is None else members[pid] & universe
        )
        if len(genes) < 2:
            continue
        gene_set = set(genes)
        unique = set()
        dropped_dupes = 0
        for src, dst, relation in edges[pid]:
            if src not in gene_set or dst not in gene_set:
                continue
            if (src, dst, relation) in unique:
                dropped_dupes += 1
                continue
            unique.add((src, dst, relation))
            relation_labels.add(relation)
        if dropped_dupes:
            logger.info(
                "pathway %s: dropped %d duplicate edges", pid, dropped_dupes
            )
        kept_ids.append(pid)
        kept_genes[pid] = genes
        kept_edges[pid] = unique
    if not kept_ids:
        raise DataError("empty library: no pathway kept two mapped genes")

    relations = sorted(relation_labels)
    rel_index = {r: i for i, r in enumerate(relations)}
    pathways = []
    for pid in kept_ids:
        genes = kept_genes[pid]
        local = {g: i for i, g in enumerate(genes)}
        triples = sorted(
            (rel_index[r], local[s], local[d]) for s, d, r in kept_edges[pid]
        )
        pathways.append(
            PathwayTopology(
                pathway_id=pid,
                genes=genes,
                edge_src=np.array([t[1] for t in triples], dtype=np.int64),
                edge_dst=np.array([t[2] for t in triples], dtype=np.int64),
                edge_rel=np.array([t[0] for t in triples], dtype=np.int64),
            )
        )
    return TopologyLibrary(pathways, relations, pre_filter_count)


def build_monolithic_graph(library: TopologyLibrary) -> TopologyLibrary:
    """Merge the whole catalogue into a single deduplicated topology.

    Used only by the monolithic ablation baseline, which feeds the merged
    graph straight to the patient head.
    """
    if not library.pathways:
        raise DataError("empty library")
    genes = sorted({g for p in library.pathways for g in p.genes})
    local = {g: i for i, g in enumerate(genes)}
    merged = set()
    for p in library.pathways:
        for s, d, r in zip(p.edge_src, p.edge_dst, p.edge_rel):
            merged.add((int(r), local[p.genes[int(s)]], local[p.genes[int(d)]]))
    triples = sorted(merged)
    topology = PathwayTopology(
        pathway_id="__merged__",
        genes=genes,
        edge_src=np.array([t[1] for t in triples], dtype=np.int64),
        edge_dst=np.array([t[2] for t in triples], dtype=np.int64),
        edge_rel=np.array([t[0] for t in triples], dtype=np.int64),
    )
    return TopologyLibrary([topology], list(library.relations),
                           library.pre_filter_count)


@dataclass
class PatientPackage:
    """One patient's instantiated pathways with materialized features.

    ``features[j]`` is |V_k| x 3 in column order [expression, cnv,
    mutation] for the pathway at global index ``pathway_index[j]``;
    unobserved entries are exactly 0 from this point on.
    """

    patient_id: str
    pathway_index: np.ndarray
    features: list
    clinical: np.ndarray
    survival: object


def build_patient_package(
    cohort: AlignedCohort,
    patient_id: str,
    library: TopologyLibrary,
    clinical_vector: np.ndarray,
) -> PatientPackage:
    """Instantiate every pathway with at least one observed modality.

    A pathway where all three modalities are unobserved for every gene is
    omitted from the package entirely.
    """
    try:
        col = cohort.patient_ids.index(patient_id)
    except ValueError:
        raise DataError(f"unknown patient {patient_id!r}") from None
    row_of = {g: i for i, g in enumerate(cohort.gene_universe)}
    matrices = (cohort.expression, cohort.cnv, cohort.mutation)
    kept = []
    features = []
    for k, pathway in enumerate(library.pathways):
        rows = np.array([row_of[g] for g in pathway.genes if g in row_of],
                        dtype=np.int64)
        if rows.size != len(pathway.genes):
            missing = [g for g in pathway.genes if g not in row_of]
            raise DataError(
                f"pathway {pathway.pathway_id}: genes outside the cohort "
                f"universe: {', '.join(missing[:3])}"
            )
        x = np.zeros((len(pathway.genes), 3))
        observed = False
        for m, matrix in enumerate(matrices):
            mask = matrix.present_mask[rows, col]
            x[:, m] = np.where(mask, matrix.values[rows, col], 0.0)
            observed = observed or bool(mask.any())
        if observed:
            kept.append(k)
            features.append(x)
    record_index = cohort.patient_ids.index(patient_id)
    return PatientPackage(
        patient_id=patient_id,
        pathway_index=np.array(kept, dtype=np.int64),
        features=features,
        clinical=np.asarray(clinical_vector, dtype=np.float64).reshape(-1),
        survival=cohort.survival[record_index],
    )


@dataclass
class HierarchicalBatch:
    """Collated minibatch: concatenated nodes plus the three index maps.

    Edges are stored relation-major: ``edge_src_by_rel[r]`` and
    ``edge_dst_by_rel[r]`` hold global node indices for relation r, and the
    full edge ordering (for joint attention) is the concatenation of those
    blocks; ``edge_offsets[r]`` is the block start.
    """

    patient_ids: list
    node_x: np.ndarray
    edge_src_by_rel: list
    edge_dst_by_rel: list
    edge_offsets: np.ndarray
    edge_dst_all: np.ndarray
    gene_to_pathway: SegmentMap
    pathway_to_patient: SegmentMap
    pathway_index: np.ndarray
    clinical: np.ndarray
    survival: list
    library: TopologyLibrary = field(repr=False, default=None)

    @property
    def n_nodes(self) -> int:
        return self.node_x.shape[0]

    @property
    def n_instances(self) -> int:
        return self.pathway_index.size

    @property
    def n_patients(self) -> int:
        return len(self.patient_ids)

    def gene_to_patient(self) -> SegmentMap:
        return self.gene_to_pathway.compose(self.pathway_to_patient)


def collate_batch(
    packages: Sequence[PatientPackage], library: TopologyLibrary
) -> HierarchicalBatch:
    """Concatenate packages in (patient order, pathway order).

    Node offsets accumulate across pathway instances; per-relation edge
    lists concatenate across instances so each relation occupies one
    contiguous block of the global edge ordering.
    """
    if not packages:
        raise DataError("empty batch")
    dims = {p.clinical.shape[0] for p in packages}
    if len(dims) != 1:
        raise DataError("inconsistent clinical dimensionality in batch")

    n_rel = len(library.relations)
    node_blocks = []
    gene_seg = []
    path_seg = []
    path_index = []
    src_by_rel = [[] for _ in range(n_rel)]
    dst_by_rel = [[] for _ in range(n_rel)]
    offset = 0
    instance = 0
    for b, package in enumerate(packages):
        for k, x in zip(package.pathway_index, package.features):
            topology = library.pathways[int(k)]
            n = len(topology.genes)
            if x.shape != (n, 3):
                raise DataError(
                    f"package {package.patient_id}: feature block shape "
                    f"{x.shape} does not match pathway {topology.pathway_id}"
                )
            node_blocks.append(x)
            gene_seg.append(np.full(n, instance, dtype=np.int64))
            path_seg.append(b)
            path_index.append(int(k))
            for r in range(n_rel):
                sel = topology.edge_rel == r
                if sel.any():
                    src_by_rel[r].append(topology.edge_src[sel] + offset)
                    dst_by_rel[r].append(topology.edge_dst[sel] + offset)
            offset += n
            instance += 1
    if instance == 0:
        raise DataError("batch has no instantiated pathways")

    edge_src_by_rel = [
        np.concatenate(blocks) if blocks else np.zeros(0, dtype=np.int64)
        for blocks in src_by_rel
    ]
    edge_dst_by_rel = [
        np.concatenate(blocks) if blocks else np.zeros(0, dtype=np.int64)
        for blocks in dst_by_rel
    ]
    counts = np.array([a.size for a in edge_src_by_rel], dtype=np.int64)
    edge_offsets = np.concatenate(([0], np.cumsum(counts)[:-1]))
    edge_dst_all = (
        np.concatenate(edge_dst_by_rel)
        if counts.sum() > 0
        else np.zeros(0, dtype=np.int64)
    )
    return HierarchicalBatch(
        patient_ids=[p.patient_id for p in packages],
        node_x=np.concatenate(node_blocks, axis=0),
        edge_src_by_rel=edge_src_by_rel,
        edge_dst_by_rel=edge_dst_by_rel,
        edge_offsets=edge_offsets,
        edge_dst_all=edge_dst_all,
        gene_to_pathway=SegmentMap(np.concatenate(gene_seg), instance),
        pathway_to_patient=SegmentMap(
            np.array(path_seg, dtype=np.int64), len(packages)
        ),
        pathway_index=np.array(path_index, dtype=np.int64),
        clinical=np.stack([p.clinical for p in packages]),
        survival=[p.survival for p in packages],
        library=library,
    )


def save_library(library: TopologyLibrary, path: str):
    """Persist the compiled library as a versioned binary."""
    payload = {
        "format": LIBRARY_FORMAT,
        "version": LIBRARY_VERSION,
        "relations": list(library.relations),
        "pre_filter_count": library.pre_filter_count,
        "pathways": [
            {
                "pathway_id": p.pathway_id,
                "genes": list(p.genes),
                "edge_src": p.edge_src,
                "edge_dst": p.edge_dst,
                "edge_rel": p.edge_rel,
            }
            for p in library.pathways
        ],
    }
    with open(path, "wb") as fh:
        pickle.dump(payload, fh)


def load_library(path: str) -> TopologyLibrary:
    with open(path, "rb") as fh:
        payload = pickle.load(fh)
    if not isinstance(payload, dict) or payload.get("format") != LIBRARY_FORMAT:
        raise DataError(f"{path}: not a compiled pathway library")
    if payload.get("version") != LIBRARY_VERSION:
        raise DataError(
            f"{path}: library version {payload.get('version')} unsupported"
        )
    pathways = [
        PathwayTopology(
            pathway_id=item["pathway_id"],
            genes=list(item["genes"]),
            edge_src=np.asarray(item["edge_src"], dtype=np.int64),
            edge_dst=np.asarray(item["edge_dst"], dtype=np.int64),
            edge_rel=np.asarray(item["edge_rel"], dtype=np.int64),
        )
        for item in payload["pathways"]
    ]
    return TopologyLibrary(
        pathways, list(payload["relations"]), int(payload["pre_filter_count"])
    )
