"""Feature-space diagnostics: eigenspectrum, PC-ID, and cosine-similarity maps.

The intrinsic dimensionality (PC-ID) of an embedding set is the smallest
number of principal components whose normalized eigenvalues sum to at least
0.9. Cosine-similarity matrices are sorted by class so that within-class
similarity sits in diagonal blocks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, NumericError

PCID_ENERGY = 0.9
# slack for eigenvalue ties at the energy threshold (exact-arithmetic reading)
_PCID_TIE_EPS = 1e-12


def symmetric_eig(m, tol=1e-12, max_sweeps=100):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi sweeps.

    Parameters
    ----------
    m : array-like, shape (N, N)
        Symmetric matrix (asymmetry beyond ~1e-8 relative is rejected).
    tol : float
        Stop once the off-diagonal Frobenius norm falls below
        ``tol * ||m||_F``.
    max_sweeps : int
        Sweep budget; exceeding it raises NumericError.

    Returns
    -------
    (eigenvalues, eigenvectors)
        Eigenvalues descending; eigenvectors as the columns of an orthonormal
        matrix, ordered to match.
    """
    a = np.array(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ConfigError(f"matrix must be square, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise DataError("matrix contains non-finite entries")
    n = a.shape[0]
    scale = max(1.0, float(np.abs(a).max()))
    asym = float(np.abs(a - a.T).max())
    if asym > 1e-8 * scale:
        raise DataError(
            f"matrix is not symmetric: max |a - a^T| = {asym:.3e} "
            f"exceeds tolerance {1e-8 * scale:.3e}"
        )
    a = (a + a.T) / 2.0
    v = np.eye(n)
    if n == 1:
        return a[0, :1].copy(), v
    fro = float(np.linalg.norm(a))
    threshold = tol * fro

    def offdiag_norm():
        # summed directly over off-diagonal entries; subtracting the diagonal
        # from the total Frobenius mass would cancel catastrophically
        od = a.copy()
        np.fill_diagonal(od, 0.0)
        return float(np.linalg.norm(od))

    for _ in range(max_sweeps):
        if offdiag_norm() <= threshold:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                small = 100.0 * abs(apq)
                if (
                    abs(a[p, p]) + small == abs(a[p, p])
                    and abs(a[q, q]) + small == abs(a[q, q])
                ):
                    # pivot is negligible at working precision; drop it
                    a[p, q] = a[q, p] = 0.0
                    continue
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                if tau >= 0:
                    t = 1.0 / (tau + math.sqrt(1.0 + tau * tau))
                else:
                    t = -1.0 / (-tau + math.sqrt(1.0 + tau * tau))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = t * c
                app, aqq = a[p, p], a[q, q]
                rp = a[p].copy()
                rq = a[q].copy()
                a[p] = c * rp - s * rq
                a[q] = s * rp + c * rq
                cp = a[:, p].copy()
                cq = a[:, q].copy()
                a[:, p] = c * cp - s * cq
                a[:, q] = s * cp + c * cq
                # exact annihilation; diagonal via the stable update formulas
                a[p, q] = a[q, p] = 0.0
                a[p, p] = app - t * apq
                a[q, q] = aqq + t * apq
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        final_off = offdiag_norm()
        if final_off > threshold:
            raise NumericError(
                f"Jacobi eigensolver did not converge within {max_sweeps} sweeps "
                f"(off-diagonal norm {final_off:.3e}, threshold {threshold:.3e})"
            )
    vals = np.diag(a).copy()
    order = np.argsort(-vals, kind="stable")
    return vals[order], v[:, order]


@dataclass(frozen=True)
class SpectrumReport:
    """Covariance spectrum of a feature set plus its PC-ID.

    ``cumulative[k-1]`` is the fraction of total eigenvalue mass carried by
    the top k components; ``pc_id`` is the smallest k reaching 0.9.
    ``degenerate`` marks an (all-identical-samples) zero covariance, where
    pc_id is reported as 0.
    """

    eigenvalues: np.ndarray
    normalized: np.ndarray
    cumulative: np.ndarray
    pc_id: int
    dim: int
    normalize_features: bool
    cov_trace: float
    degenerate: bool = False


def covariance_spectrum(fs, normalize_features=True):
    """Spectrum and PC-ID of the (optionally L2-normalized) feature covariance.

    Covariance is the mean-centered second-moment matrix divided by n-1.
    When the sample count is below the feature dimension, the equivalent
    Gram eigenproblem is solved instead; the nonzero spectrum is identical.
    """
    if fs.n_samples < 2:
        raise ConfigError("covariance needs at least 2 samples")
    x = fs.features
    if normalize_features:
        norms = np.linalg.norm(x, axis=1)
        zero = np.flatnonzero(norms == 0)
        if zero.size:
            raise DataError(f"sample {int(zero[0])} has zero norm")
        x = x / norms[:, None]
    xc = x - x.mean(axis=0)
    n, d = xc.shape
    if n < d:
        cov = xc @ xc.T / (n - 1)
    else:
        cov = xc.T @ xc / (n - 1)
    cov = (cov + cov.T) / 2.0
    trace = float(np.trace(cov))
    vals, _ = symmetric_eig(cov)
    floor = -1e-10 * max(1.0, float(np.abs(vals).max()) if vals.size else 1.0)
    if vals.min(initial=0.0) < floor:
        raise NumericError(
            f"covariance eigenvalue {vals.min():.3e} below clamp floor {floor:.3e}"
        )
    vals = np.maximum(vals, 0.0)
    total = float(vals.sum())
    if total <= 0.0:
        zeros = np.zeros_like(vals)
        return SpectrumReport(
            eigenvalues=vals,
            normalized=zeros,
            cumulative=zeros.copy(),
            pc_id=0,
            dim=vals.size,
            normalize_features=normalize_features,
            cov_trace=trace,
            degenerate=True,
        )
    normalized = vals / total
    cumulative = np.cumsum(normalized)
    pc_id = int(np.argmax(cumulative >= PCID_ENERGY - _PCID_TIE_EPS)) + 1
    return SpectrumReport(
        eigenvalues=vals,
        normalized=normalized,
        cumulative=cumulative,
        pc_id=pc_id,
        dim=vals.size,
        normalize_features=normalize_features,
        cov_trace=trace,
    )


@dataclass(frozen=True)
class SimilarityReport:
    """Pairwise cosine similarities with rows/columns grouped by class.

    ``class_boundaries[c]`` is the (start, end) row range of class c;
    ``sample_indices`` maps rows back to the source FeatureSet.
    """

    matrix: np.ndarray
    row_classes: np.ndarray
    class_boundaries: tuple
    within_mean: float
    between_mean: float
    sample_indices: np.ndarray


def cosine_matrix(fs, max_per_class, seed=0):
    """Class-sorted cosine-similarity matrix over a per-class subsample.

    ``within_mean`` averages the off-diagonal same-class entries and
    ``between_mean`` the cross-class entries; tight, well-separated classes
    show a large gap between the two.
    """
    if max_per_class < 1:
        raise ConfigError(f"max_per_class must be >= 1, got {max_per_class}")
    if fs.n_samples < 2:
        raise ConfigError("cosine matrix needs at least 2 samples")
    rng = np.random.default_rng(seed)
    chosen = []
    for c in range(fs.class_count):
        idx = fs.class_indices(c)
        if idx.size > max_per_class:
            idx = np.sort(rng.choice(idx, size=max_per_class, replace=False))
        chosen.append(idx)
    sel = np.concatenate(chosen)
    z = fs.features[sel]
    norms = np.linalg.norm(z, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise DataError(f"sample {int(sel[zero[0]])} has zero norm")
    zn = z / norms[:, None]
    mat = zn @ zn.T
    row_classes = fs.labels[sel]
    boundaries = []
    start = 0
    for c in range(fs.class_count):
        size = chosen[c].size
        boundaries.append((start, start + size))
        start += size
    same = row_classes[:, None] == row_classes[None, :]
    offdiag = ~np.eye(sel.size, dtype=bool)
    within_cells = same & offdiag
    between_cells = ~same
    within = float(mat[within_cells].mean()) if within_cells.any() else float("nan")
    between = float(mat[between_cells].mean()) if between_cells.any() else float("nan")
    return SimilarityReport(
        matrix=mat,
        row_classes=row_classes,
        class_boundaries=tuple(boundaries),
        within_mean=within,
        between_mean=between,
        sample_indices=sel,
    )


# ---------------------------------------------------------------------------
# plot-ready emission used by the `diagnose` CLI subcommand
# ---------------------------------------------------------------------------


def write_spectrum_csv(report, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("k,eigenvalue,normalized,cumulative\n")
        for k in range(report.dim):
            fh.write(
                f"{k + 1},{report.eigenvalues[k]!r},{report.normalized[k]!r},"
                f"{report.cumulative[k]!r}\n"
            )


def write_pcid_json(report, path, version):
    import json

    doc = {
        "pc_id": report.pc_id,
        "dim": report.dim,
        "normalize_features": report.normalize_features,
        "cov_trace": report.cov_trace,
        "degenerate": report.degenerate,
        "energy_threshold": PCID_ENERGY,
        "version": version,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def write_cosine_csv(report, path):
    """Matrix CSV with a leading class-of-column metadata row and trailing
    comment lines carrying the within/between means."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("class_of_column," + ",".join(str(int(c)) for c in report.row_classes))
        fh.write("\n")
        for row in report.matrix:
            fh.write(",".join(repr(float(x)) for x in row) + "\n")
        fh.write(f"# within_mean,{report.within_mean!r}\n")
        fh.write(f"# between_mean,{report.between_mean!r}\n")
