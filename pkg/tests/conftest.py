"""Shared builders for the test suite.

Random instances are always drawn from seeded generators so every test is
reproducible; the helpers here construct small in-memory pathway libraries
and patient batches without touching disk.
"""

import os

import numpy as np
import pytest

from pathsurv.graphs import (
    HierarchicalBatch,
    PathwayTopology,
    PatientPackage,
    TopologyLibrary,
    collate_batch,
)
from pathsurv.params import init_params
from pathsurv.survival import SurvivalRecord

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


def fixture_path(*parts) -> str:
    return os.path.join(FIXTURES, *parts)


def make_topology(pathway_id, n_genes, edges, prefix="G"):
    """Topology with genes named {prefix}{pathway_id}_{i} and explicit
    (rel, src, dst) triples in local coordinates."""
    genes = sorted(f"{prefix}{pathway_id}_{i:03d}" for i in range(n_genes))
    triples = sorted(edges)
    rel = np.array([t[0] for t in triples], dtype=np.int64)
    src = np.array([t[1] for t in triples], dtype=np.int64)
    dst = np.array([t[2] for t in triples], dtype=np.int64)
    return PathwayTopology(
        pathway_id=pathway_id, genes=genes,
        edge_src=src, edge_dst=dst, edge_rel=rel,
    )


def random_library(rng, n_pathways=4, relations=("activation", "inhibition"),
                   min_genes=3, max_genes=8, edge_factor=1.5,
                   allow_isolated=True):
    """Random small library: per pathway, a random gene count and random
    typed edges (self-loop-free, possibly leaving isolated nodes)."""
    pathways = []
    for k in range(n_pathways):
        n = int(rng.integers(min_genes, max_genes + 1))
        n_edges = int(max(1, round(edge_factor * n)))
        seen = set()
        for _ in range(n_edges):
            s, d = rng.integers(0, n, size=2)
            if s == d:
                continue
            r = int(rng.integers(0, len(relations)))
            seen.add((r, int(s), int(d)))
        if not allow_isolated and not seen:
            seen.add((0, 0, 1 % n))
        pathways.append(make_topology(f"P{k:03d}", n, seen))
    return TopologyLibrary(
        pathways=pathways, relations=list(relations),
        pre_filter_count=n_pathways,
    )


def random_packages(rng, library, n_patients=5, d_clinical=4,
                    drop_rate=0.0, censor_rate=0.3):
    """Random patient packages over a library; ``drop_rate`` removes whole
    pathway instances per patient (never all of them)."""
    packages = []
    for b in range(n_patients):
        kept = [k for k in range(library.K) if rng.random() >= drop_rate]
        if not kept:
            kept = [int(rng.integers(0, library.K))]
        features = [
            np.column_stack([
                rng.standard_normal(len(library.pathways[k].genes)),
                rng.integers(-2, 3, size=len(library.pathways[k].genes)).astype(float),
                rng.integers(0, 2, size=len(library.pathways[k].genes)).astype(float),
            ])
            for k in kept
        ]
        event = int(rng.random() >= censor_rate)
        packages.append(PatientPackage(
            patient_id=f"PT{b:03d}",
            pathway_index=np.array(kept, dtype=np.int64),
            features=features,
            clinical=rng.standard_normal(d_clinical),
            survival=SurvivalRecord(
                patient_id=f"PT{b:03d}",
                time=float(rng.uniform(0.1, 100.0)),
                event=event,
            ),
        ))
    return packages


def random_batch(rng, n_pathways=4, n_patients=5, d_clinical=4,
                 relations=("activation", "inhibition"), drop_rate=0.0):
    library = random_library(rng, n_pathways=n_pathways, relations=relations)
    packages = random_packages(
        rng, library, n_patients=n_patients, d_clinical=d_clinical,
        drop_rate=drop_rate,
    )
    return library, packages, collate_batch(packages, library)


def small_params(seed, library, d_clinical=4, d_hidden=8, heads=2,
                 layers=2, d_context=4, mlp_hidden=6):
    return init_params(
        seed,
        n_pathways=library.K,
        n_relations=len(library.relations),
        d_clinical=d_clinical,
        d_hidden=d_hidden,
        heads=heads,
        layers=layers,
        d_context=d_context,
        mlp_hidden=mlp_hidden,
    )


def records_from(times, events):
    return [
        SurvivalRecord(patient_id=f"P{i:03d}", time=float(t), event=int(e))
        for i, (t, e) in enumerate(zip(times, events))
    ]


@pytest.fixture
def rng():
    return np.random.default_rng(20260814)
