"""Omics matrix IO, cohort alignment, and fold-internal preprocessing.

Matrices are TSV (genes in rows, patients in columns, empty cell = missing);
clinical and survival tables are CSV. Missingness travels as a boolean mask
from parse time until graph materialization; nothing here zero-fills.

The preprocessing split matters: ``fit_preprocessor`` looks only at a
training patient subset, ``apply_preprocessor`` transforms a whole cohort
with those frozen statistics. Tests assert that perturbing test-fold values
cannot change the fitted parameters.
"""

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DataError
from .survival import SurvivalRecord

__all__ = [
    "OmicsMatrix",
    "ClinicalTable",
    "ClinicalSchema",
    "AlignedCohort",
    "PreprocessParams",
    "parse_matrix",
    "serialize_matrix",
    "parse_clinical",
    "parse_survival",
    "align_cohort",
    "fit_preprocessor",
    "apply_preprocessor",
    "encode_clinical",
]

MODALITIES = ("expression", "cnv", "mutation")
CNV_LEVELS = (-2.0, -1.0, 0.0, 1.0, 2.0)
STD_FLOOR = 1e-8


@dataclass
class OmicsMatrix:
    """One modality: gene x patient values plus an observed-entry mask."""

    modality: str
    gene_ids: list
    patient_ids: list
    values: np.ndarray
    present_mask: np.ndarray

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise DataError(f"unknown modality {self.modality!r}")
        shape = (len(self.gene_ids), len(self.patient_ids))
        if self.values.shape != shape or self.present_mask.shape != shape:
            raise DataError(f"{self.modality}: value/mask shape mismatch")


def _check_unique(ids: Sequence[str], what: str, path: str):
    seen = set()
    for item in ids:
        if item in seen:
            raise DataError(f"{path}: duplicate {what} id {item!r}")
        seen.add(item)


def parse_matrix(path: str, modality: str, allow_counts: bool = False) -> OmicsMatrix:
    """Parse a gene x patient TSV.

    Domain checks are strict: mutation values must be 0/1 unless
    ``allow_counts`` admits raw nonnegative counts (binarized later by
    ``apply_preprocessor``); CNV values must sit on the five-level scale.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    if not rows or len(rows[0]) < 2:
        raise DataError(f"{path}: missing header or patient columns")
    patient_ids = [p.strip() for p in rows[0][1:]]
    _check_unique(patient_ids, "patient", path)
    width = len(rows[0])
    gene_ids = []
    values = np.zeros((len(rows) - 1, len(patient_ids)))
    mask = np.zeros_like(values, dtype=bool)
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != width:
            raise DataError(f"{path}:{r}: ragged row ({len(row)} != {width} cells)")
        gene_ids.append(row[0].strip())
        for c, cell in enumerate(row[1:]):
            cell = cell.strip()
            if cell == "":
                continue
            try:
                value = float(cell)
            except ValueError as exc:
                raise DataError(f"{path}:{r}: bad numeric {cell!r}") from exc
            if not math.isfinite(value):
                raise DataError(f"{path}:{r}: non-finite value {cell!r}")
            values[r - 2, c] = value
            mask[r - 2, c] = True
    _check_unique(gene_ids, "gene", path)

    if modality == "mutation":
        observed = values[mask]
        if allow_counts:
            if observed.size and observed.min() < 0:
                raise DataError(f"{path}: negative mutation count")
        elif not np.isin(observed, (0.0, 1.0)).all():
            raise DataError(
                f"{path}: mutation values outside {{0,1}}; "
                "pass raw counts with the binarize flag"
            )
    elif modality == "cnv":
        observed = values[mask]
        if not np.isin(observed, CNV_LEVELS).all():
            bad = observed[~np.isin(observed, CNV_LEVELS)][0]
            raise DataError(f"{path}: CNV value {bad:g} outside the -2..+2 scale")
    return OmicsMatrix(modality, gene_ids, patient_ids, values, mask)


def serialize_matrix(matrix: OmicsMatrix, path: str):
    """Write the TSV form; missing entries become empty cells."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("gene_id\t" + "\t".join(matrix.patient_ids) + "\n")
        for g, gene in enumerate(matrix.gene_ids):
            cells = [
                "%.10g" % matrix.values[g, p] if matrix.present_mask[g, p] else ""
                for p in range(len(matrix.patient_ids))
            ]
            fh.write(gene + "\t" + "\t".join(cells) + "\n")


@dataclass
class ClinicalTable:
    """Raw clinical covariates: per-column string cells, '' = missing."""

    patient_ids: list
    columns: dict  # name -> list of str, aligned with patient_ids

    def row(self, patient_id: str) -> dict:
        idx = self.patient_ids.index(patient_id)
        return {name: cells[idx] for name, cells in self.columns.items()}


def parse_clinical(path: str) -> ClinicalTable:
    """Parse a CSV whose first column is patient_id."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or not rows[0] or rows[0][0] != "patient_id":
        raise DataError(f"{path}: first header column must be patient_id")
    names = [h.strip() for h in rows[0][1:]]
    _check_unique(names, "clinical field", path)
    patient_ids = []
    columns = {name: [] for name in names}
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != len(rows[0]):
            raise DataError(f"{path}:{r}: ragged row")
        patient_ids.append(row[0].strip())
        for name, cell in zip(names, row[1:]):
            columns[name].append(cell.strip())
    _check_unique(patient_ids, "patient", path)
    return ClinicalTable(patient_ids, columns)


def parse_survival(path: str) -> list:
    """Parse patient_id,time,event CSV into SurvivalRecords."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [h.strip() for h in rows[0][:3]] != ["patient_id", "time", "event"]:
        raise DataError(f"{path}: header must be patient_id,time,event")
    records = []
    for r, row in enumerate(rows[1:], start=2):
        if len(row) < 3:
            raise DataError(f"{path}:{r}: ragged row")
        try:
            records.append(
                SurvivalRecord(row[0].strip(), float(row[1]), int(row[2]))
            )
        except ValueError as exc:
            raise DataError(f"{path}:{r}: bad time/event") from exc
    _check_unique([r.patient_id for r in records], "patient", path)
    return records


@dataclass
class ClinicalSchema:
    """Field order, kinds, and categorical level sets for encoding c_i."""

    numeric_fields: list  # ordered names
    categorical_fields: list  # ordered (name, sorted level list) pairs

    def slot_names(self) -> list:
        slots = list(self.numeric_fields)
        for name, levels in self.categorical_fields:
            slots.extend(f"{name}={level}" for level in levels)
            slots.append(f"{name}=unknown")
        return slots

    @staticmethod
    def infer(table: ClinicalTable) -> "ClinicalSchema":
        """Call a column numeric when every non-missing cell parses as a
        float; otherwise categorical with sorted observed levels."""
        numeric, categorical = [], []
        for name in table.columns:
            cells = [c for c in table.columns[name] if c != ""]
            try:
                for c in cells:
                    float(c)
                numeric.append(name)
            except ValueError:
                categorical.append((name, sorted(set(cells))))
        return ClinicalSchema(numeric, categorical)


@dataclass
class AlignedCohort:
    """All inputs reindexed to one (gene universe, patient) coordinate
    system. The gene universe is the full mapping-induced gene list; genes
    absent from a matrix carry an all-false mask row."""

    patient_ids: list
    gene_universe: list
    expression: OmicsMatrix
    cnv: OmicsMatrix
    mutation: OmicsMatrix
    clinical: ClinicalTable
    schema: ClinicalSchema
    survival: list

    def survival_for(self, patient_ids: Sequence[str]) -> list:
        by_id = {r.patient_id: r for r in self.survival}
        return [by_id[p] for p in patient_ids]


def _reindex(matrix: Optional[OmicsMatrix], modality: str, genes: list,
             patients: list) -> OmicsMatrix:
    values = np.zeros((len(genes), len(patients)))
    mask = np.zeros_like(values, dtype=bool)
    if matrix is not None:
        g_pos = {g: i for i, g in enumerate(matrix.gene_ids)}
        p_pos = {p: i for i, p in enumerate(matrix.patient_ids)}
        g_rows = [(i, g_pos[g]) for i, g in enumerate(genes) if g in g_pos]
        p_cols = [(j, p_pos[p]) for j, p in enumerate(patients) if p in p_pos]
        for i, gi in g_rows:
            for j, pj in p_cols:
                values[i, j] = matrix.values[gi, pj]
                mask[i, j] = matrix.present_mask[gi, pj]
    return OmicsMatrix(modality, list(genes), list(patients), values, mask)


def align_cohort(
    expression: OmicsMatrix,
    cnv: Optional[OmicsMatrix],
    mutation: Optional[OmicsMatrix],
    clinical: ClinicalTable,
    survival: Sequence[SurvivalRecord],
    mapping_genes: Sequence[str],
    schema: Optional[ClinicalSchema] = None,
) -> AlignedCohort:
    """Build the shared coordinate system.

    Patients: clinical-and-survival intersection, lexicographic. Genes: the
    mapping-induced universe, lexicographic; a mapped gene missing from
    every matrix stays in the universe with a fully-false mask so pathway
    shapes never depend on which cohort is loaded.
    """
    patients = sorted(
        set(clinical.patient_ids) & {r.patient_id for r in survival}
    )
    if not patients:
        raise DataError("no patient has both clinical and survival annotations")
    genes = sorted(set(mapping_genes))
    if not genes:
        raise DataError("empty gene universe: mapping lists no genes")

    order = {p: i for i, p in enumerate(clinical.patient_ids)}
    kept = ClinicalTable(
        patients,
        {
            name: [cells[order[p]] for p in patients]
            for name, cells in clinical.columns.items()
        },
    )
    by_id = {r.patient_id: r for r in survival}
    return AlignedCohort(
        patient_ids=patients,
        gene_universe=genes,
        expression=_reindex(expression, "expression", genes, patients),
        cnv=_reindex(cnv, "cnv", genes, patients),
        mutation=_reindex(mutation, "mutation", genes, patients),
        clinical=kept,
        schema=schema or ClinicalSchema.infer(kept),
        survival=[by_id[p] for p in patients],
    )


@dataclass
class PreprocessParams:
    """Standardization statistics, fit on training folds only."""

    gene_mean: np.ndarray
    gene_std: np.ndarray
    log1p: bool
    clinical_mean: dict = field(default_factory=dict)
    clinical_std: dict = field(default_factory=dict)
    provenance: str = ""

    def digest(self) -> str:
        """Stable content hash for leakage assertions."""
        import hashlib

        h = hashlib.sha256()
        h.update(self.gene_mean.tobytes())
        h.update(self.gene_std.tobytes())
        h.update(b"1" if self.log1p else b"0")
        for name in sorted(self.clinical_mean):
            h.update(name.encode())
            h.update(np.float64(self.clinical_mean[name]).tobytes())
            h.update(np.float64(self.clinical_std[name]).tobytes())
        return h.hexdigest()


def fit_preprocessor(
    cohort: AlignedCohort,
    train_patients: Sequence[str],
    log1p: bool = False,
    provenance: str = "",
) -> PreprocessParams:
    """Per-gene expression mean/std over observed training entries.

    Population (divide-by-n) standard deviation, floored at 1e-8; a gene
    with no observed training entry gets mean 0 and the floor. Clinical
    numeric fields get the same treatment.
    """
    train_patients = list(train_patients)
    if not train_patients:
        raise DataError("empty training subset")
    known = set(cohort.patient_ids)
    for p in train_patients:
        if p not in known:
            raise DataError(f"unknown training patient {p!r}")
    cols = [cohort.patient_ids.index(p) for p in train_patients]

    values = cohort.expression.values[:, cols]
    mask = cohort.expression.present_mask[:, cols]
    if log1p:
        if (values[mask] < 0).any():
            raise DataError("negative expression under log1p; inputs not raw counts")
        values = np.where(mask, np.log1p(values), 0.0)
    counts = mask.sum(axis=1)
    safe = np.maximum(counts, 1)
    mean = (values * mask).sum(axis=1) / safe
    var = (((values - mean[:, None]) * mask) ** 2).sum(axis=1) / safe
    mean = np.where(counts > 0, mean, 0.0)
    std = np.maximum(np.where(counts > 0, np.sqrt(var), 0.0), STD_FLOOR)

    cmean, cstd = {}, {}
    pos = {p: i for i, p in enumerate(cohort.clinical.patient_ids)}
    rows = [pos[p] for p in train_patients]
    for name in cohort.schema.numeric_fields:
        cells = cohort.clinical.columns[name]
        observed = np.array(
            [float(cells[i]) for i in rows if cells[i] != ""], dtype=np.float64
        )
        if observed.size:
            cmean[name] = float(observed.mean())
            cstd[name] = float(max(observed.std(), STD_FLOOR))
        else:
            cmean[name], cstd[name] = 0.0, STD_FLOOR
    return PreprocessParams(mean, std, log1p, cmean, cstd, provenance)


def apply_preprocessor(
    cohort: AlignedCohort, params: PreprocessParams
) -> AlignedCohort:
    """Standardize expression, binarize mutation; masks untouched.

    CNV was domain-checked at parse time so it passes through. Still no
    zero-fill: unobserved entries keep value 0 with mask false, and the
    mask decides downstream.
    """
    if params.gene_mean.shape[0] != len(cohort.gene_universe):
        raise DataError("preprocessor fit on a different gene universe")
    expr = cohort.expression
    values = expr.values
    if params.log1p:
        if (values[expr.present_mask] < 0).any():
            raise DataError("negative expression under log1p")
        values = np.where(expr.present_mask, np.log1p(values), 0.0)
    standardized = np.where(
        expr.present_mask,
        (values - params.gene_mean[:, None]) / params.gene_std[:, None],
        0.0,
    )
    new_expr = OmicsMatrix(
        "expression", expr.gene_ids, expr.patient_ids, standardized,
        expr.present_mask.copy(),
    )
    mut = cohort.mutation
    new_mut = OmicsMatrix(
        "mutation", mut.gene_ids, mut.patient_ids,
        np.where(mut.present_mask & (mut.values != 0), 1.0, 0.0),
        mut.present_mask.copy(),
    )
    return AlignedCohort(
        patient_ids=cohort.patient_ids,
        gene_universe=cohort.gene_universe,
        expression=new_expr,
        cnv=cohort.cnv,
        mutation=new_mut,
        clinical=cohort.clinical,
        schema=cohort.schema,
        survival=cohort.survival,
    )


def encode_clinical(
    cohort: AlignedCohort, params: PreprocessParams
) -> np.ndarray:
    """Encode c_i: standardized numerics, one-hot categoricals with an
    explicit unknown slot. Missing numerics sit at the training mean
    (encoded 0). Returns an (n_patients x d) matrix in cohort order."""
    schema = cohort.schema
    slots = schema.slot_names()
    out = np.zeros((len(cohort.patient_ids), len(slots)))
    col = 0
    for name in schema.numeric_fields:
        cells = cohort.clinical.columns[name]
        mean = params.clinical_mean.get(name, 0.0)
        std = params.clinical_std.get(name, STD_FLOOR)
        for i, cell in enumerate(cells):
            out[i, col] = 0.0 if cell == "" else (float(cell) - mean) / std
        col += 1
    for name, levels in schema.categorical_fields:
        cells = cohort.clinical.columns[name]
        index = {level: k for k, level in enumerate(levels)}
        for i, cell in enumerate(cells):
            slot = index.get(cell, len(levels)) if cell != "" else len(levels)
            out[i, col + slot] = 1.0
        col += len(levels) + 1
    return out
