"""Pathway catalogue compilation, patient packaging, and batching tests."""

import numpy as np
import pytest

from conftest import make_topology, random_library, random_packages
from pathsurv.errors import DataError
from pathsurv.graphs import (
    TopologyLibrary,
    build_monolithic_graph,
    build_patient_package,
    collate_batch,
    load_library,
    load_pathway_catalogue,
    load_relation_synonyms,
    save_library,
)
from pathsurv.omics import ClinicalTable, OmicsMatrix, align_cohort
from pathsurv.survival import SurvivalRecord


def write_catalogue(tmp_path, mapping_rows, edge_rows):
    mapping = tmp_path / "mapping.tsv"
    mapping.write_text("".join(f"{p}\t{g}\n" for p, g in mapping_rows))
    edges = tmp_path / "edges.tsv"
    edges.write_text(
        "".join(f"{p}\t{s}\t{d}\t{r}\n" for p, s, d, r in edge_rows)
    )
    return str(mapping), str(edges)


class TestCatalogueLoader:
    def test_compiles_sorted_topologies(self, tmp_path):
        mapping, edges = write_catalogue(
            tmp_path,
            [("W1", "B"), ("W1", "A"), ("W1", "C"), ("W0", "X"), ("W0", "Y")],
            [
                ("W1", "C", "A", "activation"),
                ("W1", "A", "B", "inhibition"),
                ("W0", "X", "Y", "binding"),
            ],
        )
        library = load_pathway_catalogue(mapping, edges)
        assert library.pathway_ids() == ["W0", "W1"]  # lexicographic
        assert library.relations == ["activation", "binding", "inhibition"]
        w1 = library.pathways[1]
        assert w1.genes == ["A", "B", "C"]  # lexicographic
        # triples sorted by (relation, src, dst) in local coordinates
        np.testing.assert_array_equal(w1.edge_rel, [0, 2])
        np.testing.assert_array_equal(w1.edge_src, [2, 0])
        np.testing.assert_array_equal(w1.edge_dst, [0, 1])

    def test_synonyms_normalize_labels(self, tmp_path):
        mapping, edges = write_catalogue(
            tmp_path,
            [("P1", "A"), ("P1", "B")],
            [("P1", "A", "B", "activates"), ("P1", "B", "A", "ACTIVATION")],
        )
        library = load_pathway_catalogue(mapping, edges)
        assert library.relations == ["activation"]
        assert library.pathways[0].n_edges == 2

    def test_duplicate_edges_dedup(self, tmp_path):
        mapping, edges = write_catalogue(
            tmp_path,
            [("P1", "A"), ("P1", "B")],
            [
                ("P1", "A", "B", "activation"),
                ("P1", "A", "B", "activates"),  # same after normalization
                ("P1", "A", "B", "inhibition"),  # distinct relation survives
            ],
        )
        library = load_pathway_catalogue(mapping, edges)
        assert library.pathways[0].n_edges == 2

    def test_universe_filter_drops_endpoints_and_small_pathways(self, tmp_path):
        mapping, edges = write_catalogue(
            tmp_path,
            [("P1", "A"), ("P1", "B"), ("P1", "C"), ("P2", "D"), ("P2", "E")],
            [("P1", "A", "C", "binding"), ("P2", "D", "E", "binding")],
        )
        library = load_pathway_catalogue(
            mapping, edges, gene_universe=["A", "B", "D"]
        )
        # P2 keeps one gene -> dropped; P1 keeps A,B but loses the A-C edge
        assert library.pathway_ids() == ["P1"]
        assert library.pathways[0].genes == ["A", "B"]
        assert library.pathways[0].n_edges == 0
        assert library.pre_filter_count == 2

    def test_reverse_edges_get_their_own_relation(self, tmp_path):
        mapping, edges = write_catalogue(
            tmp_path,
            [("P1", "A"), ("P1", "B")],
            [("P1", "A", "B", "activation")],
        )
        library = load_pathway_catalogue(mapping, edges, add_reverse_edges=True)
        assert library.relations == ["activation", "rev:activation"]
        p = library.pathways[0]
        assert p.n_edges == 2
        fwd = (p.edge_rel == 0)
        np.testing.assert_array_equal(p.edge_src[fwd], [0])
        np.testing.assert_array_equal(p.edge_dst[~fwd], [0])

    def test_unknown_pathway_in_edges_rejected(self, tmp_path):
        mapping, edges = write_catalogue(
            tmp_path, [("P1", "A"), ("P1", "B")],
            [("P9", "A", "B", "binding")],
        )
        with pytest.raises(DataError, match="unknown pathway"):
            load_pathway_catalogue(mapping, edges)

    def test_empty_library_rejected(self, tmp_path):
        mapping, edges = write_catalogue(tmp_path, [("P1", "A")], [])
        with pytest.raises(DataError, match="empty library"):
            load_pathway_catalogue(mapping, edges)

    def test_self_loops_kept(self, tmp_path):
        mapping, edges = write_catalogue(
            tmp_path, [("P1", "A"), ("P1", "B")],
            [("P1", "A", "A", "binding")],
        )
        library = load_pathway_catalogue(mapping, edges)
        assert library.pathways[0].n_edges == 1

    def test_bundled_synonyms_load(self):
        table = load_relation_synonyms()
        assert table["activates"] == "activation"
        assert table["inhibits"] == "inhibition"


class TestMonolithicGraph:
    def test_merges_and_dedups(self, tmp_path):
        mapping, edges = write_catalogue(
            tmp_path,
            [("P1", "A"), ("P1", "B"), ("P2", "B"), ("P2", "C")],
            [
                ("P1", "A", "B", "activation"),
                ("P2", "B", "C", "activation"),
                ("P2", "C", "B", "inhibition"),
            ],
        )
        library = load_pathway_catalogue(mapping, edges)
        mono = build_monolithic_graph(library)
        assert mono.K == 1
        merged = mono.pathways[0]
        assert merged.pathway_id == "__merged__"
        assert merged.genes == ["A", "B", "C"]
        assert merged.n_edges == 3
        assert mono.relations == library.relations

    def test_shared_edge_dedup_across_pathways(self, tmp_path):
        mapping, edges = write_catalogue(
            tmp_path,
            [("P1", "A"), ("P1", "B"), ("P2", "A"), ("P2", "B")],
            [("P1", "A", "B", "binding"), ("P2", "A", "B", "binding")],
        )
        mono = build_monolithic_graph(load_pathway_catalogue(mapping, edges))
        assert mono.pathways[0].n_edges == 1


def cohort_for_packaging():
    genes = ["A", "B", "C", "D"]
    expr = OmicsMatrix(
        "expression", genes, ["P1", "P2"],
        np.arange(8, dtype=float).reshape(4, 2),
        np.array([
            [True, False],
            [True, False],
            [False, True],
            [False, False],
        ]),
    )
    clinical = ClinicalTable(["P1", "P2"], {"age": ["1", "2"]})
    survival = [SurvivalRecord("P1", 5.0, 1), SurvivalRecord("P2", 7.0, 0)]
    return align_cohort(expr, None, None, clinical, survival, genes)


class TestPatientPackage:
    def test_drops_fully_unobserved_pathways(self):
        cohort = cohort_for_packaging()
        library = TopologyLibrary(
            pathways=[
                make_topology("K0", 2, [(0, 0, 1)], prefix=""),
                make_topology("K1", 2, [(0, 0, 1)], prefix=""),
            ],
            relations=["activation"],
            pre_filter_count=2,
        )
        # rename genes to hit the cohort universe
        library.pathways[0].genes = ["A", "B"]
        library.pathways[1].genes = ["C", "D"]
        p1 = build_patient_package(cohort, "P1", library, np.zeros(2))
        # P1 observes A,B only: pathway K1 (C,D) fully unobserved -> absent
        np.testing.assert_array_equal(p1.pathway_index, [0])
        assert len(p1.features) == 1
        p2 = build_patient_package(cohort, "P2", library, np.zeros(2))
        np.testing.assert_array_equal(p2.pathway_index, [1])
        # unobserved D within the kept pathway zero-fills
        np.testing.assert_array_equal(p2.features[0][:, 0], [5.0, 0.0])

    def test_unknown_patient_rejected(self):
        cohort = cohort_for_packaging()
        library = random_library(np.random.default_rng(0), n_pathways=1)
        library.pathways[0].genes = ["A", "B", "C", "D"][: len(library.pathways[0].genes)]
        with pytest.raises(DataError, match="unknown patient"):
            build_patient_package(cohort, "PX", library, np.zeros(2))

    def test_gene_outside_universe_rejected(self):
        cohort = cohort_for_packaging()
        library = TopologyLibrary(
            pathways=[make_topology("K0", 2, [(0, 0, 1)], prefix="")],
            relations=["activation"],
            pre_filter_count=1,
        )
        library.pathways[0].genes = ["A", "ZZZ"]
        with pytest.raises(DataError, match="outside the cohort universe"):
            build_patient_package(cohort, "P1", library, np.zeros(2))


class TestCollateBatch:
    def test_offsets_and_maps(self, rng):
        library = random_library(rng, n_pathways=3)
        packages = random_packages(rng, library, n_patients=4)
        batch = collate_batch(packages, library)
        sizes = [len(library.pathways[int(k)].genes)
                 for p in packages for k in p.pathway_index]
        assert batch.n_nodes == sum(sizes)
        assert batch.n_instances == len(sizes)
        assert batch.n_patients == 4
        # gene_to_pathway: instance ids are consecutive per (patient, pathway)
        expected = np.concatenate([
            np.full(n, i, dtype=np.int64) for i, n in enumerate(sizes)
        ])
        np.testing.assert_array_equal(batch.gene_to_pathway.index, expected)
        # node features concatenate in the same order
        stacked = np.concatenate(
            [x for p in packages for x in p.features], axis=0
        )
        np.testing.assert_array_equal(batch.node_x, stacked)

    def test_relation_blocks_contiguous_and_global(self, rng):
        library = random_library(rng, n_pathways=4,
                                 relations=("activation", "inhibition", "binding"))
        packages = random_packages(rng, library, n_patients=3)
        batch = collate_batch(packages, library)
        n_rel = len(library.relations)
        counts = [batch.edge_src_by_rel[r].size for r in range(n_rel)]
        np.testing.assert_array_equal(
            batch.edge_offsets, np.concatenate(([0], np.cumsum(counts)[:-1]))
        )
        np.testing.assert_array_equal(
            batch.edge_dst_all, np.concatenate(batch.edge_dst_by_rel)
        )
        for r in range(n_rel):
            if counts[r]:
                assert batch.edge_src_by_rel[r].max() < batch.n_nodes

    def test_edges_stay_within_instance(self, rng):
        """No collated edge may cross pathway-instance boundaries."""
        for _ in range(20):
            library = random_library(rng)
            packages = random_packages(rng, library, n_patients=3,
                                       drop_rate=0.3)
            batch = collate_batch(packages, library)
            seg = batch.gene_to_pathway.index
            for r in range(len(library.relations)):
                src = batch.edge_src_by_rel[r]
                dst = batch.edge_dst_by_rel[r]
                np.testing.assert_array_equal(seg[src], seg[dst])

    def test_gene_to_patient_composition(self, rng):
        library = random_library(rng, n_pathways=3)
        packages = random_packages(rng, library, n_patients=3, drop_rate=0.4)
        batch = collate_batch(packages, library)
        composed = batch.gene_to_patient()
        manual = batch.pathway_to_patient.index[batch.gene_to_pathway.index]
        np.testing.assert_array_equal(composed.index, manual)
        assert composed.segment_count == 3

    def test_empty_batch_rejected(self, rng):
        library = random_library(rng)
        with pytest.raises(DataError):
            collate_batch([], library)

    def test_inconsistent_clinical_rejected(self, rng):
        library = random_library(rng)
        a = random_packages(rng, library, n_patients=1, d_clinical=3)
        b = random_packages(rng, library, n_patients=1, d_clinical=5)
        with pytest.raises(DataError, match="clinical"):
            collate_batch(a + b, library)


class TestLibraryPersistence:
    def test_round_trip(self, tmp_path, rng):
        library = random_library(rng, n_pathways=5)
        path = str(tmp_path / "lib.bin")
        save_library(library, path)
        back = load_library(path)
        assert back.pathway_ids() == library.pathway_ids()
        assert back.relations == library.relations
        assert back.pre_filter_count == library.pre_filter_count
        for a, b in zip(back.pathways, library.pathways):
            assert a.genes == b.genes
            np.testing.assert_array_equal(a.edge_src, b.edge_src)
            np.testing.assert_array_equal(a.edge_dst, b.edge_dst)
            np.testing.assert_array_equal(a.edge_rel, b.edge_rel)

    def test_rejects_foreign_pickle(self, tmp_path):
        import pickle

        path = tmp_path / "junk.bin"
        path.write_bytes(pickle.dumps({"hello": 1}))
        with pytest.raises(DataError, match="not a compiled pathway library"):
            load_library(str(path))

    def test_rejects_future_version(self, tmp_path, rng):
        import pickle

        from pathsurv.graphs import LIBRARY_FORMAT

        path = tmp_path / "v9.bin"
        path.write_bytes(pickle.dumps({"format": LIBRARY_FORMAT, "version": 9}))
        with pytest.raises(DataError, match="version"):
            load_library(str(path))
