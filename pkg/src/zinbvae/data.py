"""Count-matrix ingestion, covariate assembly, gene selection, splitting, and
the synthetic-data simulator.

File formats (documented here and in the README):

* counts CSV: header row ``cell_id,<gene>,<gene>,...``; one row per cell,
  first field the cell id, remaining fields non-negative integers.
* covariates CSV: header ``cell_id[,batch][,label][,<qc>...]``; ``batch`` and
  ``label`` are optional string columns, every remaining column is a numeric
  QC covariate. Rows are matched to the count matrix by cell id.
* MatrixMarket: ``coordinate integer`` format, 1-indexed, rows = cells,
  with sidecar files listing one gene name / cell id per line.

Loaders reject rather than coerce: NaN, negative, or non-integer counts are
parse errors carrying a line number.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .distributions import sample_gamma
from .errors import DataError
from .serialize import read_array_container, write_array_container


@dataclass
class ExpressionMatrix:
    """Cells x genes matrix of non-negative integer counts with identifiers
    and optional per-cell annotations."""

    counts: np.ndarray
    gene_names: list[str]
    cell_ids: list[str]
    labels: list[str] | None = None
    batch_ids: list[str] | None = None
    qc: np.ndarray | None = None
    qc_names: list[str] | None = None

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.float64)
        if self.counts.ndim != 2:
            raise DataError("counts must be a 2-D matrix")
        if not np.all(np.isfinite(self.counts)):
            raise DataError("counts contain non-finite values")
        if np.any(self.counts < 0):
            raise DataError("counts contain negative values")
        if np.any(self.counts != np.floor(self.counts)):
            raise DataError("counts contain non-integer values")
        n, g = self.counts.shape
        if len(self.gene_names) != g:
            raise DataError(f"{len(self.gene_names)} gene names for {g} gene columns")
        if len(self.cell_ids) != n:
            raise DataError(f"{len(self.cell_ids)} cell ids for {n} cell rows")
        if len(set(self.gene_names)) != g:
            raise DataError("duplicate gene names")
        for name, attr in (("labels", self.labels), ("batch_ids", self.batch_ids)):
            if attr is not None and len(attr) != n:
                raise DataError(f"{name} length {len(attr)} != {n} cells")
        if self.qc is not None:
            self.qc = np.asarray(self.qc, dtype=np.float64)
            if self.qc.shape[0] != n:
                raise DataError("qc table row count != cells")
            if not np.all(np.isfinite(self.qc)):
                raise DataError("qc table contains non-finite values")
            if self.qc_names is not None and len(self.qc_names) != self.qc.shape[1]:
                raise DataError("qc_names length != qc columns")

    @property
    def n_cells(self) -> int:
        return self.counts.shape[0]

    @property
    def n_genes(self) -> int:
        return self.counts.shape[1]

    def subset_cells(self, idx) -> "ExpressionMatrix":
        idx = np.asarray(idx)
        pick = lambda seq: [seq[i] for i in idx] if seq is not None else None
        return ExpressionMatrix(
            counts=self.counts[idx],
            gene_names=list(self.gene_names),
            cell_ids=pick(self.cell_ids),
            labels=pick(self.labels),
            batch_ids=pick(self.batch_ids),
            qc=self.qc[idx] if self.qc is not None else None,
            qc_names=list(self.qc_names) if self.qc_names is not None else None,
        )

    def subset_genes(self, idx) -> "ExpressionMatrix":
        idx = np.asarray(idx)
        return ExpressionMatrix(
            counts=self.counts[:, idx],
            gene_names=[self.gene_names[i] for i in idx],
            cell_ids=list(self.cell_ids),
            labels=list(self.labels) if self.labels is not None else None,
            batch_ids=list(self.batch_ids) if self.batch_ids is not None else None,
            qc=self.qc.copy() if self.qc is not None else None,
            qc_names=list(self.qc_names) if self.qc_names is not None else None,
        )


# ---------------------------------------------------------------------------
# loaders / writers
# ---------------------------------------------------------------------------


def load_csv(path) -> ExpressionMatrix:
    """Dense counts CSV; see the module docstring for the layout."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [
            (no, ln.rstrip("\n"))
            for no, ln in enumerate(fh, start=1)
            if ln.strip() and not ln.startswith("#")
        ]
    if not lines:
        raise DataError(f"{path}: empty file")
    header_no, header_line = lines[0]
    header = header_line.split(",")
    if len(header) < 2:
        raise DataError(f"{path}: line {header_no}: header needs a cell-id column plus gene columns")
    gene_names = header[1:]
    cell_ids, rows = [], []
    for lineno, line in lines[1:]:
        fields = line.split(",")
        if len(fields) != len(header):
            raise DataError(
                f"{path}: line {lineno}: expected {len(header)} fields, got {len(fields)}"
            )
        cell_ids.append(fields[0])
        try:
            values = [float(v) for v in fields[1:]]
        except ValueError as err:
            raise DataError(f"{path}: line {lineno}: non-numeric count: {err}") from err
        for v in values:
            if not np.isfinite(v):
                raise DataError(f"{path}: line {lineno}: non-finite count")
            if v < 0:
                raise DataError(f"{path}: line {lineno}: negative count {v:g}")
            if v != int(v):
                raise DataError(f"{path}: line {lineno}: non-integer count {v:g}")
        rows.append(values)
    return ExpressionMatrix(
        counts=np.array(rows, dtype=np.float64),
        gene_names=gene_names,
        cell_ids=cell_ids,
    )


def save_csv(matrix: ExpressionMatrix, path, header_comment: str | None = None):
    with open(path, "w", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        fh.write("cell_id," + ",".join(matrix.gene_names) + "\n")
        for cid, row in zip(matrix.cell_ids, matrix.counts):
            fh.write(cid + "," + ",".join(str(int(v)) for v in row) + "\n")


def load_mtx(matrix_path, genes_path, cells_path) -> ExpressionMatrix:
    """MatrixMarket coordinate integer counts (rows = cells, 1-indexed)."""
    gene_names = _read_name_file(genes_path)
    cell_ids = _read_name_file(cells_path)
    with open(matrix_path, "r", encoding="utf-8") as fh:
        raw = fh.readlines()
    if not raw or not raw[0].startswith("%%MatrixMarket"):
        raise DataError(f"{matrix_path}: line 1: missing %%MatrixMarket banner")
    banner = raw[0].split()
    if len(banner) < 4 or banner[1] != "matrix" or banner[2] != "coordinate":
        raise DataError(f"{matrix_path}: line 1: only coordinate matrices are supported")
    if banner[3] not in ("integer", "real"):
        raise DataError(f"{matrix_path}: line 1: unsupported value type {banner[3]!r}")
    body = [
        (i + 1, ln.strip()) for i, ln in enumerate(raw[1:], start=1) if ln.strip() and not ln.startswith("%")
    ]
    if not body:
        raise DataError(f"{matrix_path}: missing size line")
    size_lineno, size_line = body[0]
    try:
        n_rows, n_cols, n_entries = (int(v) for v in size_line.split())
    except ValueError as err:
        raise DataError(f"{matrix_path}: line {size_lineno}: bad size line: {err}") from err
    if n_rows != len(cell_ids):
        raise DataError(f"{matrix_path}: {n_rows} rows but {len(cell_ids)} cell ids")
    if n_cols != len(gene_names):
        raise DataError(f"{matrix_path}: {n_cols} columns but {len(gene_names)} gene names")
    counts = np.zeros((n_rows, n_cols), dtype=np.float64)
    entries = body[1:]
    if len(entries) != n_entries:
        raise DataError(
            f"{matrix_path}: size line declares {n_entries} entries, found {len(entries)}"
        )
    for lineno, line in entries:
        parts = line.split()
        if len(parts) != 3:
            raise DataError(f"{matrix_path}: line {lineno}: expected 'row col value'")
        try:
            i, j = int(parts[0]), int(parts[1])
            v = float(parts[2])
        except ValueError as err:
            raise DataError(f"{matrix_path}: line {lineno}: {err}") from err
        if not (1 <= i <= n_rows and 1 <= j <= n_cols):
            raise DataError(f"{matrix_path}: line {lineno}: index ({i},{j}) out of range")
        if not np.isfinite(v) or v < 0 or v != int(v):
            raise DataError(f"{matrix_path}: line {lineno}: invalid count {parts[2]}")
        counts[i - 1, j - 1] = v
    return ExpressionMatrix(counts=counts, gene_names=gene_names, cell_ids=cell_ids)


def _read_name_file(path) -> list[str]:
    with open(path, "r", encoding="utf-8") as fh:
        names = [ln.strip() for ln in fh if ln.strip()]
    if not names:
        raise DataError(f"{path}: empty name file")
    return names


def load_covariates_csv(path, matrix: ExpressionMatrix) -> ExpressionMatrix:
    """Attach a covariates sidecar (batch / label / QC columns) to a matrix,
    matching rows by cell id. Returns a new ExpressionMatrix."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise DataError(f"{path}: empty file")
    header = lines[0].split(",")
    if header[0] != "cell_id":
        raise DataError(f"{path}: line 1: first column must be cell_id")
    columns = header[1:]
    by_id: dict[str, list[str]] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split(",")
        if len(fields) != len(header):
            raise DataError(f"{path}: line {lineno}: expected {len(header)} fields")
        by_id[fields[0]] = fields[1:]
    missing = [cid for cid in matrix.cell_ids if cid not in by_id]
    if missing:
        raise DataError(f"{path}: missing covariate rows for cell ids {missing[:5]}")
    batch_idx = columns.index("batch") if "batch" in columns else None
    label_idx = columns.index("label") if "label" in columns else None
    qc_cols = [i for i in range(len(columns)) if i not in (batch_idx, label_idx)]
    batch_ids = [] if batch_idx is not None else None
    labels = [] if label_idx is not None else None
    qc_rows = []
    for cid in matrix.cell_ids:
        row = by_id[cid]
        if batch_idx is not None:
            batch_ids.append(row[batch_idx])
        if label_idx is not None:
            labels.append(row[label_idx])
        try:
            qc_rows.append([float(row[i]) for i in qc_cols])
        except ValueError as err:
            raise DataError(f"{path}: cell {cid}: non-numeric QC value: {err}") from err
    qc = np.array(qc_rows, dtype=np.float64) if qc_cols else None
    return ExpressionMatrix(
        counts=matrix.counts,
        gene_names=matrix.gene_names,
        cell_ids=matrix.cell_ids,
        labels=labels,
        batch_ids=batch_ids,
        qc=qc,
        qc_names=[columns[i] for i in qc_cols] if qc_cols else None,
    )


def save_covariates_csv(matrix: ExpressionMatrix, path, header_comment: str | None = None):
    columns = []
    if matrix.batch_ids is not None:
        columns.append("batch")
    if matrix.labels is not None:
        columns.append("label")
    qc_names = matrix.qc_names or (
        [f"qc{i}" for i in range(matrix.qc.shape[1])] if matrix.qc is not None else []
    )
    columns.extend(qc_names)
    with open(path, "w", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        fh.write("cell_id," + ",".join(columns) + "\n")
        for i, cid in enumerate(matrix.cell_ids):
            row = [cid]
            if matrix.batch_ids is not None:
                row.append(matrix.batch_ids[i])
            if matrix.labels is not None:
                row.append(matrix.labels[i])
            if matrix.qc is not None:
                row.extend(repr(float(v)) for v in matrix.qc[i])
            fh.write(",".join(row) + "\n")


# ---------------------------------------------------------------------------
# covariate assembly / gene selection / splitting
# ---------------------------------------------------------------------------


def build_covariates(matrix: ExpressionMatrix) -> tuple[np.ndarray | None, list[str]]:
    """Per-cell covariate matrix: one-hot batch indicator concatenated with
    z-scored QC columns. Returns (array or None, column names). Zero-variance
    QC columns standardize to all-zeros."""
    blocks, names = [], []
    if matrix.batch_ids is not None:
        categories = sorted(set(matrix.batch_ids))
        if len(categories) > 1:
            onehot = np.zeros((matrix.n_cells, len(categories)))
            index = {c: j for j, c in enumerate(categories)}
            for i, b in enumerate(matrix.batch_ids):
                onehot[i, index[b]] = 1.0
            blocks.append(onehot)
            names.extend(f"batch={c}" for c in categories)
    if matrix.qc is not None and matrix.qc.shape[1] > 0:
        mean = matrix.qc.mean(axis=0)
        std = matrix.qc.std(axis=0)
        safe = np.where(std > 0, std, 1.0)
        z = (matrix.qc - mean) / safe
        z[:, std == 0] = 0.0
        blocks.append(z)
        names.extend(matrix.qc_names or [f"qc{i}" for i in range(matrix.qc.shape[1])])
    if not blocks:
        return None, []
    return np.concatenate(blocks, axis=1), names


def select_variable_genes(matrix: ExpressionMatrix, k: int) -> ExpressionMatrix:
    """Keep the k genes with the largest variance of log(1+x); ties break
    alphabetically by gene name; original column order is preserved."""
    if k > matrix.n_genes:
        raise ValueError(f"k={k} exceeds {matrix.n_genes} genes")
    if k < 1:
        raise ValueError("k must be >= 1")
    variances = np.log1p(matrix.counts).var(axis=0)
    order = sorted(range(matrix.n_genes), key=lambda j: (-variances[j], matrix.gene_names[j]))
    keep = sorted(order[:k])
    return matrix.subset_genes(keep)


def split_indices(n: int, heldout_fraction: float, seed: int):
    """Seeded uniform split of range(n) into sorted (train, heldout) index
    arrays; disjoint and exhaustive."""
    if not 0.0 < heldout_fraction < 1.0:
        raise ValueError("heldout_fraction must be in (0, 1)")
    n_held = int(round(heldout_fraction * n))
    if n_held == 0 or n_held == n:
        raise ValueError(f"heldout_fraction {heldout_fraction} leaves one side empty for n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[n_held:]), np.sort(perm[:n_held])


def split(matrix: ExpressionMatrix, heldout_fraction: float, seed: int):
    """Seeded uniform cell split into (train, heldout) matrices."""
    train_idx, held_idx = split_indices(matrix.n_cells, heldout_fraction, seed)
    return matrix.subset_cells(train_idx), matrix.subset_cells(held_idx)


# ---------------------------------------------------------------------------
# simulator
# ---------------------------------------------------------------------------


@dataclass
class SimulationSpec:
    """Ground-truth generative configuration for synthetic data.

    The latent vector is drawn around one of ``n_groups`` cluster centers;
    the gene mean is exp(baseline + z @ loadings + group fold + batch offset);
    dispersion and zero-inflation are per-gene draws from the given ranges.
    """

    n_cells: int
    n_genes: int
    latent_dim: int = 2
    n_groups: int = 1
    group_separation: float = 3.0
    theta_range: tuple = (2.0, 20.0)
    pi_range: tuple = (0.1, 0.4)
    baseline_log_mean_range: tuple = (0.0, 2.0)
    loading_scale: float = 0.6
    n_batches: int = 1
    batch_effect_scale: float = 0.0
    group_centers: np.ndarray | None = None
    group_log_fold: np.ndarray | None = None

    def __post_init__(self):
        if self.n_cells < 1 or self.n_genes < 1 or self.latent_dim < 1:
            raise ValueError("n_cells, n_genes, latent_dim must be >= 1")
        if self.n_groups < 1 or self.n_batches < 1:
            raise ValueError("n_groups and n_batches must be >= 1")
        if self.theta_range[0] <= 0 or self.pi_range[0] < 0 or self.pi_range[1] > 1:
            raise ValueError("theta_range must be positive, pi_range within [0, 1]")


@dataclass
class SimTruth:
    """Everything the simulator knows: latent draws, per-entry parameters, the
    dropout mask, and the generative parameters themselves."""

    z: np.ndarray
    mu: np.ndarray
    theta: np.ndarray
    pi: np.ndarray
    h: np.ndarray
    y: np.ndarray
    group_of: np.ndarray
    batch_of: np.ndarray
    baseline: np.ndarray
    loadings: np.ndarray
    centers: np.ndarray
    log_fold: np.ndarray
    batch_offsets: np.ndarray

    def conditional_log_mu(self, z: np.ndarray, group: int, batch: int) -> np.ndarray:
        """log mean for latent rows z under this cell's group/batch constants."""
        z = np.atleast_2d(z)
        return (
            self.baseline
            + z @ self.loadings
            + self.log_fold[group]
            + self.batch_offsets[batch]
        )

    def save(self, path):
        write_array_container(
            path,
            {
                "z": self.z,
                "mu": self.mu,
                "theta": self.theta,
                "pi": self.pi,
                "h": self.h.astype(np.float64),
                "y": self.y,
                "group_of": self.group_of.astype(np.float64),
                "batch_of": self.batch_of.astype(np.float64),
                "baseline": self.baseline,
                "loadings": self.loadings,
                "centers": self.centers,
                "log_fold": self.log_fold,
                "batch_offsets": self.batch_offsets,
            },
            extra_header={"kind": "simulation_truth"},
        )

    @classmethod
    def load(cls, path) -> "SimTruth":
        header, arrays = read_array_container(path)
        if header.get("kind") != "simulation_truth":
            raise DataError(f"{path}: container is not simulation truth")
        return cls(
            z=arrays["z"],
            mu=arrays["mu"],
            theta=arrays["theta"],
            pi=arrays["pi"],
            h=arrays["h"].astype(bool),
            y=arrays["y"],
            group_of=arrays["group_of"].astype(int),
            batch_of=arrays["batch_of"].astype(int),
            baseline=arrays["baseline"],
            loadings=arrays["loadings"],
            centers=arrays["centers"],
            log_fold=arrays["log_fold"],
            batch_offsets=arrays["batch_offsets"],
        )


def simulate(spec: SimulationSpec, rng: np.random.Generator):
    """Run the generative process forward: latent draw around a group center,
    Gamma -> Poisson for the count, Bernoulli dropout zeroing.

    Returns (ExpressionMatrix, SimTruth); the matrix carries group labels,
    batch ids, and a log-depth QC column.
    """
    n, g, d = spec.n_cells, spec.n_genes, spec.latent_dim
    baseline = rng.uniform(*spec.baseline_log_mean_range, size=g)
    loadings = rng.normal(scale=spec.loading_scale, size=(d, g))
    theta = np.exp(rng.uniform(np.log(spec.theta_range[0]), np.log(spec.theta_range[1]), size=g))
    pi = rng.uniform(*spec.pi_range, size=g)
    if spec.group_centers is not None:
        centers = np.asarray(spec.group_centers, dtype=np.float64)
        if centers.shape != (spec.n_groups, d):
            raise ValueError(f"group_centers must have shape ({spec.n_groups}, {d})")
    else:
        centers = rng.normal(scale=spec.group_separation, size=(spec.n_groups, d))
        if spec.n_groups == 1:
            centers = np.zeros((1, d))
    if spec.group_log_fold is not None:
        log_fold = np.asarray(spec.group_log_fold, dtype=np.float64)
        if log_fold.shape != (spec.n_groups, g):
            raise ValueError(f"group_log_fold must have shape ({spec.n_groups}, {g})")
    else:
        log_fold = np.zeros((spec.n_groups, g))
    batch_offsets = (
        rng.normal(scale=spec.batch_effect_scale, size=(spec.n_batches, g))
        if spec.batch_effect_scale > 0
        else np.zeros((spec.n_batches, g))
    )

    group_of = rng.integers(0, spec.n_groups, size=n)
    batch_of = rng.integers(0, spec.n_batches, size=n)
    z = centers[group_of] + rng.standard_normal((n, d))
    log_mu = baseline + z @ loadings + log_fold[group_of] + batch_offsets[batch_of]
    log_mu = np.clip(log_mu, -30.0, 30.0)
    mu = np.exp(log_mu)
    w = sample_gamma(theta, theta / mu, rng)
    y = rng.poisson(w).astype(np.float64)
    h = rng.random((n, g)) < pi
    counts = np.where(h, 0.0, y)

    matrix = ExpressionMatrix(
        counts=counts,
        gene_names=[f"g{j:04d}" for j in range(g)],
        cell_ids=[f"c{i:06d}" for i in range(n)],
        labels=[f"group{k}" for k in group_of],
        batch_ids=[f"batch{b}" for b in batch_of],
        qc=np.log1p(counts.sum(axis=1))[:, None],
        qc_names=["log_depth"],
    )
    truth = SimTruth(
        z=z,
        mu=mu,
        theta=theta,
        pi=pi,
        h=h,
        y=y,
        group_of=group_of,
        batch_of=batch_of,
        baseline=baseline,
        loadings=loadings,
        centers=centers,
        log_fold=log_fold,
        batch_offsets=batch_offsets,
    )
    return matrix, truth
