"""Functional principal component analysis for sparse longitudinal samples.

The pipeline pools observations across subjects: a local-linear fit of the
pooled scatter gives the mean curve; a local-plane fit of pairwise raw
covariances (diagonal pairs excluded, because their noise does not cancel)
gives the covariance surface; the surface diagonal, refitted in rotated
coordinates and compared against a fit of the raw diagonal, gives the
observation-noise variance. Eigenfunctions come from the trapezoid
discretization of the covariance operator, and per-subject component scores
are best linear predictors given the subject's noisy observations, which
stay well defined with as few as one observation per subject.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import (
    Interval,
    PooledPoints,
    RegularGrid,
    SparseFunctionalSample,
    SubjectRecord,
    pooled_points,
)
from .errors import DataError, FitError
from .smoothing import (
    BandwidthSelection,
    Kernel,
    SmoothFlags,
    bin_scatter_2d,
    get_kernel,
    interp_bilinear,
    interp_linear,
    local_diag_rotated,
    local_linear_1d,
    local_linear_2d,
    select_bandwidth_1d,
    select_bandwidth_2d,
)

__all__ = [
    "FpcaConfig",
    "MeanEstimate",
    "RawCovariances",
    "CovarianceEstimate",
    "EigenSystem",
    "FpcaModel",
    "ScorePrediction",
    "estimate_mean",
    "raw_covariances",
    "estimate_covariance",
    "estimate_noise_variance",
    "eigendecompose",
    "pace_scores",
    "select_ncomp",
    "fit_fpca",
]

# Default bandwidth candidates, expressed as fractions of the domain length.
MEAN_BANDWIDTH_FRACTIONS = (0.05, 0.075, 0.11, 0.16, 0.24, 0.35)
COV_BANDWIDTH_FRACTIONS = (0.08, 0.12, 0.18, 0.27, 0.40)

# Sign convention: eigenfunctions integrate to a nonnegative value; when the
# integral is essentially zero the largest-magnitude grid value is positive.
_SIGN_INTEGRAL_TOL = 1e-8


@dataclass(frozen=True)
class FpcaConfig:
    """Fitting controls for one functional sample.

    ``mean_bandwidth`` and ``cov_bandwidth`` may be fixed; when None they are
    selected from candidate fractions of the domain length. ``ncomp`` fixed
    or selected by ``ncomp_method`` (aic or cv) up to ``max_components``.
    """

    n_grid: int = 51
    kernel: str = "epanechnikov"
    mean_bandwidth: float | None = None
    cov_bandwidth: float | None = None
    mean_bandwidth_fractions: tuple[float, ...] = MEAN_BANDWIDTH_FRACTIONS
    cov_bandwidth_fractions: tuple[float, ...] = COV_BANDWIDTH_FRACTIONS
    bandwidth_objective: str = "gcv"
    ncomp: int | None = None
    ncomp_method: str = "aic"
    max_components: int = 10
    eigen_floor: float = 1e-10
    bin_threshold: int = 20000

    def __post_init__(self):
        if self.n_grid < 2:
            raise DataError(f"n_grid must be >= 2, got {self.n_grid}")
        if self.ncomp is not None and self.ncomp < 1:
            raise DataError(f"ncomp must be >= 1, got {self.ncomp}")
        if self.max_components < 1:
            raise DataError(f"max_components must be >= 1, got {self.max_components}")
        if self.ncomp_method not in ("aic", "cv"):
            raise DataError(f"ncomp_method must be 'aic' or 'cv', got {self.ncomp_method!r}")
        if self.bandwidth_objective not in ("gcv", "loso-cv"):
            raise DataError(
                f"bandwidth_objective must be 'gcv' or 'loso-cv', got {self.bandwidth_objective!r}"
            )
        get_kernel(self.kernel)


@dataclass(frozen=True)
class MeanEstimate:
    grid: RegularGrid
    values: np.ndarray
    bandwidth: float

    def at(self, t: np.ndarray) -> np.ndarray:
        return interp_linear(self.grid.points, self.values, t)


@dataclass(frozen=True)
class RawCovariances:
    """Pairwise residual products, split into off-diagonal and diagonal parts.

    Off-diagonal entries are ordered pairs (l1 != l2) so the scatter is
    symmetric in its two coordinates; diagonal entries are squared residuals
    at single observations and carry the noise variance on top of the
    surface.
    """

    s1: np.ndarray
    s2: np.ndarray
    value: np.ndarray
    subject: np.ndarray
    diag_t: np.ndarray
    diag_value: np.ndarray
    diag_subject: np.ndarray

    @property
    def n_pairs(self) -> int:
        return int(self.value.size)


@dataclass(frozen=True)
class CovarianceEstimate:
    grid: RegularGrid
    surface: np.ndarray
    bandwidth: float
    binned: bool = False

    def at(self, t1: np.ndarray, t2: np.ndarray) -> np.ndarray:
        return interp_bilinear(self.grid.points, self.grid.points, self.surface, t1, t2)


@dataclass(frozen=True)
class EigenSystem:
    """Orthonormal eigenpairs of a discretized covariance operator.

    ``functions`` has one row per component, sampled on ``grid``;
    rows are orthonormal under the grid's trapezoid weights.
    """

    grid: RegularGrid
    eigenvalues: np.ndarray
    functions: np.ndarray

    @property
    def n_retained(self) -> int:
        return int(self.eigenvalues.size)

    def functions_at(self, t: np.ndarray, n: int | None = None) -> np.ndarray:
        rows = self.functions if n is None else self.functions[:n]
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if rows.shape[0] == 0:
            return np.empty((0, t.size))
        return np.vstack([interp_linear(self.grid.points, row, t) for row in rows])

    def variance_fractions(self) -> np.ndarray:
        total = float(self.eigenvalues.sum())
        return self.eigenvalues / total if total > 0 else np.zeros_like(self.eigenvalues)


@dataclass(frozen=True)
class ScorePrediction:
    """Best-linear-predictor component scores for one subject.

    ``omega`` is the conditional covariance of the score vector given the
    subject's observations; with no observations it equals diag(eigenvalues)
    and the scores are zero (population mean fallback, ``no_data`` set).
    """

    scores: np.ndarray
    sigma_u: np.ndarray
    h: np.ndarray
    omega: np.ndarray
    ridged: bool = False
    omega_clipped: bool = False
    no_data: bool = False


@dataclass(frozen=True)
class FpcaModel:
    """Fitted marginal model for one functional variable."""

    grid: RegularGrid
    mean: np.ndarray
    surface: np.ndarray
    noise_var: float
    eigenvalues: np.ndarray
    eigenfunctions: np.ndarray
    n_components: int
    mean_bandwidth: float
    cov_bandwidth: float
    selection: dict = field(default_factory=dict)
    n_subjects: int = 0
    flags: SmoothFlags = field(default_factory=SmoothFlags)

    def mean_at(self, t: np.ndarray) -> np.ndarray:
        return interp_linear(self.grid.points, self.mean, t)

    def surface_at(self, t1: np.ndarray, t2: np.ndarray) -> np.ndarray:
        return interp_bilinear(self.grid.points, self.grid.points, self.surface, t1, t2)

    def eigenfunctions_at(self, t: np.ndarray, n: int | None = None) -> np.ndarray:
        n = self.n_components if n is None else n
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if n == 0:
            return np.empty((0, t.size))
        return np.vstack([
            interp_linear(self.grid.points, row, t) for row in self.eigenfunctions[:n]
        ])

    @property
    def eigensystem(self) -> EigenSystem:
        return EigenSystem(self.grid, self.eigenvalues, self.eigenfunctions)


def _default_candidates(fractions: Sequence[float], length: float) -> list[float]:
    return [f * length for f in fractions]


def estimate_mean(
    sample: SparseFunctionalSample,
    grid: RegularGrid,
    bandwidth: float | None = None,
    kernel: Kernel | str = "epanechnikov",
    candidates: Sequence[float] | None = None,
    objective: str = "gcv",
    flags: SmoothFlags | None = None,
) -> MeanEstimate:
    """Mean curve by local-linear smoothing of the pooled scatter.

    Every observation enters with equal weight. With ``bandwidth`` None the
    bandwidth is chosen from ``candidates`` (defaults: fractions of the
    domain length) by the requested objective.
    """
    kern = get_kernel(kernel) if isinstance(kernel, str) else kernel
    pooled = pooled_points(sample)
    if pooled.times.size == 0:
        raise DataError("cannot estimate a mean from a sample with no observations")
    if bandwidth is None:
        cands = (
            list(candidates)
            if candidates is not None
            else _default_candidates(MEAN_BANDWIDTH_FRACTIONS, sample.domain.length)
        )
        sel = select_bandwidth_1d(
            pooled.times,
            pooled.values,
            cands,
            grid.points,
            kern,
            objective=objective,
            subject_index=pooled.subject_index,
            flags=flags,
        )
        bandwidth = float(sel.chosen)
    values = local_linear_1d(
        pooled.times, pooled.values, grid.points, bandwidth, kern, flags=flags
    )
    return MeanEstimate(grid, values, float(bandwidth))


def raw_covariances(sample: SparseFunctionalSample, mean: MeanEstimate) -> RawCovariances:
    """All pairwise residual products, subject by subject.

    The mean is interpolated to each observation time. Subjects contribute
    L(L-1) ordered off-diagonal pairs and L diagonal entries; subjects with
    a single observation feed only the diagonal.
    """
    s1_parts, s2_parts, v_parts, idx_parts = [], [], [], []
    dt_parts, dv_parts, di_parts = [], [], []
    for i, subj in enumerate(sample.subjects):
        L = subj.n_obs
        if L == 0:
            continue
        resid = subj.values - mean.at(subj.times)
        dt_parts.append(subj.times)
        dv_parts.append(resid * resid)
        di_parts.append(np.full(L, i, dtype=np.intp))
        if L < 2:
            continue
        tt1, tt2 = np.meshgrid(subj.times, subj.times, indexing="ij")
        rr = np.outer(resid, resid)
        off = ~np.eye(L, dtype=bool)
        s1_parts.append(tt1[off])
        s2_parts.append(tt2[off])
        v_parts.append(rr[off])
        idx_parts.append(np.full(L * (L - 1), i, dtype=np.intp))

    def cat(parts, dtype=float):
        return np.concatenate(parts) if parts else np.empty(0, dtype=dtype)

    return RawCovariances(
        s1=cat(s1_parts),
        s2=cat(s2_parts),
        value=cat(v_parts),
        subject=cat(idx_parts, np.intp),
        diag_t=cat(dt_parts),
        diag_value=cat(dv_parts),
        diag_subject=cat(di_parts, np.intp),
    )


def estimate_covariance(
    raw: RawCovariances,
    grid: RegularGrid,
    bandwidth: float,
    kernel: Kernel | str = "epanechnikov",
    bin_threshold: int = 20000,
    flags: SmoothFlags | None = None,
) -> CovarianceEstimate:
    """Covariance surface by local-plane smoothing of off-diagonal pairs.

    One bandwidth serves both axes (the surface is symmetric, so anisotropic
    smoothing buys nothing). The fitted surface is symmetrized. Scatters
    larger than ``bin_threshold`` are pre-aggregated onto the grid nodes.
    """
    kern = get_kernel(kernel) if isinstance(kernel, str) else kernel
    if raw.n_pairs == 0:
        raise FitError("covariance", "no subject contributes an off-diagonal pair")
    x1, x2, z, w = raw.s1, raw.s2, raw.value, None
    binned = raw.n_pairs > bin_threshold
    if binned:
        x1, x2, z, w = bin_scatter_2d(x1, x2, z, grid.points, grid.points)
    surface = local_linear_2d(
        x1, x2, z, grid.points, grid.points, (bandwidth, bandwidth), kern, weights=w, flags=flags
    )
    surface = 0.5 * (surface + surface.T)
    return CovarianceEstimate(grid, surface, float(bandwidth), binned=binned)


def estimate_noise_variance(
    raw: RawCovariances,
    grid: RegularGrid,
    bandwidth: float,
    kernel: Kernel | str = "epanechnikov",
    flags: SmoothFlags | None = None,
) -> float:
    """Observation-noise variance from the diagonal inflation.

    The raw diagonal carries surface-plus-noise; the rotated diagonal fit of
    off-diagonal pairs carries the surface alone. Their difference is
    integrated over the middle half of the domain (boundary fits are the
    least reliable) and scaled back to a per-point variance. Negative
    estimates truncate to zero.
    """
    kern = get_kernel(kernel) if isinstance(kernel, str) else kernel
    if raw.diag_t.size == 0:
        raise FitError("noise_variance", "no observations to fit the raw diagonal")
    if raw.n_pairs == 0:
        raise FitError("noise_variance", "no off-diagonal pairs for the surface diagonal")
    lo, hi = grid.interval.lo, grid.interval.hi
    length = grid.interval.length
    mid = RegularGrid(
        Interval(lo + 0.25 * length, hi - 0.25 * length),
        max(2, grid.n_points // 2 + 1),
    )
    v_hat = local_linear_1d(
        raw.diag_t, raw.diag_value, mid.points, bandwidth, kern, flags=flags
    )
    g_diag = local_diag_rotated(
        raw.s1, raw.s2, raw.value, mid.points, bandwidth, kern, flags=flags
    )
    est = 2.0 / length * mid.integrate(v_hat - g_diag)
    if est < 0 and flags is not None:
        flags.note(f"noise variance truncated to 0 (raw estimate {est:.3e})")
    return max(0.0, float(est))


def eigendecompose(
    cov: CovarianceEstimate,
    floor: float = 1e-10,
    flags: SmoothFlags | None = None,
) -> EigenSystem:
    """Eigenpairs of the covariance surface under trapezoid quadrature.

    The surface matrix is scaled symmetrically by the square-root quadrature
    weights so a standard symmetric eigensolve yields functions orthonormal
    in the quadrature inner product. Eigenvalues at or below ``floor`` times
    the largest are dropped (the smoothed surface need not be positive
    semi-definite; trailing noise components carry no signal).
    """
    w = cov.grid.trapezoid_weights
    sq = np.sqrt(w)
    a = sq[:, None] * cov.surface * sq[None, :]
    a = 0.5 * (a + a.T)
    lam, vec = np.linalg.eigh(a)
    lam = lam[::-1]
    vec = vec[:, ::-1]
    if lam.size == 0 or lam[0] <= 0:
        raise FitError("eigendecompose", "covariance surface has no positive eigenvalue")
    keep = lam > floor * lam[0]
    n_dropped = int((~keep).sum())
    if n_dropped and flags is not None:
        flags.note(f"dropped {n_dropped} eigenvalue(s) at or below the floor")
    lam = lam[keep]
    funcs = (vec[:, keep] / sq[:, None]).T

    weights = cov.grid.trapezoid_weights
    for r in range(funcs.shape[0]):
        integral = float(funcs[r] @ weights)
        if abs(integral) >= _SIGN_INTEGRAL_TOL:
            if integral < 0:
                funcs[r] = -funcs[r]
        elif funcs[r][np.argmax(np.abs(funcs[r]))] < 0:
            funcs[r] = -funcs[r]
    return EigenSystem(cov.grid, lam, funcs)


def _repair_spd(sigma: np.ndarray) -> tuple[np.ndarray, bool]:
    """Ridge an observation covariance whose linear solve would be unstable.

    Interpolating a smoothed surface between grid nodes can dent its
    positive-definiteness slightly, so the matrix may be mildly indefinite.
    That is harmless for an LU solve as long as every eigenvalue stays well
    away from zero, so repair triggers only when the smallest eigenvalue
    magnitude falls below 1e-12 of the largest (near-duplicate observation
    times with a zero noise estimate, for example). The fix adds the ridge
    1e-8 * trace / size to the diagonal, which leaves the repaired matrix
    with smallest eigenvalue at or above 1e-12 * trace.
    """
    sym = 0.5 * (sigma + sigma.T)
    lam = np.linalg.eigvalsh(sym)
    amax = float(np.max(np.abs(lam))) if lam.size else 0.0
    amin = float(np.min(np.abs(lam))) if lam.size else 0.0
    if amax > 0.0 and amin > 1e-12 * amax:
        return sym, False
    size = max(sym.shape[0], 1)
    ridge = 1e-8 * max(float(np.trace(sym)), amax, np.finfo(float).tiny) / size
    return sym + ridge * np.eye(sym.shape[0]), True


def _project_psd(m: np.ndarray) -> tuple[np.ndarray, bool]:
    """Clip negative eigenvalues of a symmetric matrix to zero."""
    sym = 0.5 * (m + m.T)
    lam, vec = np.linalg.eigh(sym)
    if lam.size == 0 or lam[0] >= 0:
        return sym, False
    clipped = (vec * np.maximum(lam, 0.0)[None, :]) @ vec.T
    return 0.5 * (clipped + clipped.T), True


def pace_scores(
    model: FpcaModel,
    times: np.ndarray,
    values: np.ndarray,
    n_components: int | None = None,
) -> ScorePrediction:
    """Conditional-expectation component scores for one subject.

    Computes E[score | observations] under the fitted Gaussian working
    model: scores = D Psi (Sigma_U)^-1 (U - mu), where Sigma_U is the
    model's own covariance of the observation vector, Psi D Psi^T plus
    noise variance on the diagonal, and D Psi stacks eigenvalue-scaled
    eigenfunction values. Building Sigma_U from the retained components
    keeps it positive definite by construction; interpolating the smoothed
    surface between grid nodes instead can go mildly indefinite and
    destabilize both the scores and the component-count selection.
    ``omega`` is the matching conditional covariance D - H Sigma_U^-1 H^T,
    projected onto the PSD cone if rounding pushed it off.

    Subjects with zero observations fall back to zero scores with
    omega = diag(eigenvalues).
    """
    m = model.n_components if n_components is None else int(n_components)
    if m < 1 or m > model.eigenvalues.size:
        raise ValueError(
            f"n_components must be in [1, {model.eigenvalues.size}], got {m}"
        )
    t = np.asarray(times, dtype=float).ravel()
    u = np.asarray(values, dtype=float).ravel()
    if t.size != u.size:
        raise ValueError("times and values lengths differ")
    rho = model.eigenvalues[:m]
    d = np.diag(rho)
    if t.size == 0:
        return ScorePrediction(
            scores=np.zeros(m),
            sigma_u=np.empty((0, 0)),
            h=np.empty((m, 0)),
            omega=d,
            no_data=True,
        )
    psi = model.eigenfunctions_at(t, m)
    resid = u - model.mean_at(t)
    sigma_u = psi.T @ (rho[:, None] * psi) + model.noise_var * np.eye(t.size)
    sigma_u, ridged = _repair_spd(sigma_u)
    h = rho[:, None] * psi
    alpha = np.linalg.solve(sigma_u, resid)
    scores = h @ alpha
    omega = d - h @ np.linalg.solve(sigma_u, h.T)
    omega, clipped = _project_psd(omega)
    return ScorePrediction(
        scores=scores,
        sigma_u=sigma_u,
        h=h,
        omega=omega,
        ridged=ridged,
        omega_clipped=clipped,
    )


def _subject_score_table(
    model: FpcaModel, sample: SparseFunctionalSample, n_components: int
) -> list[tuple[SubjectRecord, np.ndarray, np.ndarray, np.ndarray]]:
    """Per-subject (record, scores, residuals, eigenfunction values) table."""
    out = []
    for subj in sample.subjects:
        if subj.n_obs:
            pred = pace_scores(model, subj.times, subj.values, n_components)
            scores = pred.scores
            resid = subj.values - model.mean_at(subj.times)
            psi = model.eigenfunctions_at(subj.times, n_components)
        else:
            scores = np.zeros(n_components)
            resid = np.empty(0)
            psi = np.empty((n_components, 0))
        out.append((subj, scores, resid, psi))
    return out


def _aic_curve(
    model: FpcaModel, sample: SparseFunctionalSample, max_m: int
) -> np.ndarray:
    """Gaussian pseudo-likelihood AIC for component counts 1..max_m.

    The per-subject deviance uses residuals after removing the fitted
    truncated trajectory at the subject's own times; the penalty adds the
    component count. The noise variance enters both the quadratic weight and
    the log term; an exact zero is floored at a scale-aware epsilon so the
    log stays finite.
    """
    diag_scale = float(np.mean(np.diag(model.surface)))
    sigma2 = max(model.noise_var, 1e-8 * max(diag_scale, 0.0), 1e-300)
    table = _subject_score_table(model, sample, max_m)
    aic = np.zeros(max_m)
    log2pi = math.log(2.0 * math.pi)
    for m in range(1, max_m + 1):
        total = 0.0
        for subj, scores, resid, psi in table:
            if subj.n_obs == 0:
                continue
            r = resid - scores[:m] @ psi[:m]
            total += (
                float(r @ r) / (2.0 * sigma2)
                + 0.5 * subj.n_obs * log2pi
                + 0.5 * subj.n_obs * math.log(sigma2)
            )
        aic[m - 1] = total + m
    return aic


def _cv_curve(
    sample: SparseFunctionalSample,
    config: FpcaConfig,
    model: FpcaModel,
    max_m: int,
) -> np.ndarray:
    """Leave-one-subject-out prediction error for component counts 1..max_m.

    Mean and eigenfunctions are re-estimated without the held-out subject,
    reusing the full-sample bandwidths and noise variance (re-selecting
    bandwidths inside the loop would multiply the cost for little gain).
    """
    kern = get_kernel(config.kernel)
    grid = model.grid
    cv = np.zeros(max_m)
    for i, subj in enumerate(sample.subjects):
        if subj.n_obs == 0:
            continue
        rest = SparseFunctionalSample(
            sample.domain,
            tuple(s for j, s in enumerate(sample.subjects) if j != i),
        )
        if all(s.n_obs < 2 for s in rest.subjects):
            continue
        mean_i = estimate_mean(rest, grid, bandwidth=model.mean_bandwidth, kernel=kern)
        raw_i = raw_covariances(rest, mean_i)
        cov_i = estimate_covariance(
            raw_i, grid, model.cov_bandwidth, kern, bin_threshold=config.bin_threshold
        )
        try:
            eig_i = eigendecompose(cov_i, floor=config.eigen_floor)
        except FitError:
            continue
        m_avail = min(max_m, eig_i.n_retained)
        model_i = FpcaModel(
            grid=grid,
            mean=mean_i.values,
            surface=cov_i.surface,
            noise_var=model.noise_var,
            eigenvalues=eig_i.eigenvalues,
            eigenfunctions=eig_i.functions,
            n_components=m_avail,
            mean_bandwidth=model.mean_bandwidth,
            cov_bandwidth=model.cov_bandwidth,
        )
        pred = pace_scores(model_i, subj.times, subj.values, m_avail)
        resid = subj.values - mean_i.at(subj.times)
        psi = model_i.eigenfunctions_at(subj.times, m_avail)
        for m in range(1, max_m + 1):
            mm = min(m, m_avail)
            r = resid - pred.scores[:mm] @ psi[:mm]
            cv[m - 1] += float(r @ r)
    return cv


def select_ncomp(
    sample: SparseFunctionalSample,
    model: FpcaModel,
    method: str = "aic",
    max_components: int = 10,
    config: FpcaConfig | None = None,
) -> tuple[int, dict]:
    """Pick the component count by AIC (default) or leave-one-subject-out CV.

    Returns the argmin count and a record of the criterion curve. Ties go to
    the smaller count.
    """
    max_m = min(max_components, model.eigenvalues.size)
    if max_m < 1:
        raise FitError("select_ncomp", "no retained eigenvalues to choose from")
    if method == "aic":
        curve = _aic_curve(model, sample, max_m)
    elif method == "cv":
        curve = _cv_curve(sample, config or FpcaConfig(), model, max_m)
    else:
        raise ValueError(f"unknown ncomp method {method!r}")
    n = int(np.argmin(curve)) + 1
    return n, {"method": method, "criterion": [float(v) for v in curve], "chosen": n}


def fit_fpca(
    sample: SparseFunctionalSample,
    config: FpcaConfig = FpcaConfig(),
    flags: SmoothFlags | None = None,
    stage_prefix: str = "",
) -> FpcaModel:
    """Fit the full marginal model: mean, surface, noise, eigenpairs, count.

    Raises FitError with a stage name (optionally prefixed, so a joint fit
    can distinguish predictor from response stages) when any step cannot
    proceed.
    """
    flags = flags if flags is not None else SmoothFlags()
    kern = get_kernel(config.kernel)
    grid = RegularGrid(sample.domain, config.n_grid)

    if all(s.n_obs < 2 for s in sample.subjects):
        raise FitError(
            stage_prefix + "covariance",
            "need at least one subject with 2 or more observations",
        )

    def run(stage, fn):
        try:
            return fn()
        except FitError:
            raise
        except (ValueError, np.linalg.LinAlgError) as exc:
            raise FitError(stage_prefix + stage, str(exc)) from exc

    mean = run(
        "mean",
        lambda: estimate_mean(
            sample,
            grid,
            bandwidth=config.mean_bandwidth,
            kernel=kern,
            candidates=_default_candidates(
                config.mean_bandwidth_fractions, sample.domain.length
            ),
            objective=config.bandwidth_objective,
            flags=flags,
        ),
    )
    raw = run("raw_covariances", lambda: raw_covariances(sample, mean))

    def pick_cov_bandwidth():
        if config.cov_bandwidth is not None:
            return float(config.cov_bandwidth)
        cands = _default_candidates(config.cov_bandwidth_fractions, sample.domain.length)
        x1, x2, z, w = raw.s1, raw.s2, raw.value, None
        subj = raw.subject
        if config.bandwidth_objective == "gcv" and raw.n_pairs > config.bin_threshold:
            x1, x2, z, w = bin_scatter_2d(x1, x2, z, grid.points, grid.points)
            subj = None
        sel = select_bandwidth_2d(
            x1,
            x2,
            z,
            [(c, c) for c in cands],
            grid.points,
            grid.points,
            kern,
            weights=w,
            objective=config.bandwidth_objective,
            subject_index=subj,
            flags=flags,
        )
        return float(sel.chosen[0])

    h_cov = run("covariance_bandwidth", pick_cov_bandwidth)
    cov = run(
        "covariance",
        lambda: estimate_covariance(
            raw, grid, h_cov, kern, bin_threshold=config.bin_threshold, flags=flags
        ),
    )
    sigma2 = run(
        "noise_variance",
        lambda: estimate_noise_variance(raw, grid, h_cov, kern, flags=flags),
    )
    eig = run("eigendecompose", lambda: eigendecompose(cov, floor=config.eigen_floor, flags=flags))

    model = FpcaModel(
        grid=grid,
        mean=mean.values,
        surface=cov.surface,
        noise_var=sigma2,
        eigenvalues=eig.eigenvalues,
        eigenfunctions=eig.functions,
        n_components=min(
            config.ncomp if config.ncomp is not None else eig.n_retained,
            eig.n_retained,
        ),
        mean_bandwidth=mean.bandwidth,
        cov_bandwidth=cov.bandwidth,
        selection={},
        n_subjects=sample.n_subjects,
        flags=flags,
    )
    if config.ncomp is not None:
        if config.ncomp > eig.n_retained:
            flags.note(
                f"requested {config.ncomp} components, only {eig.n_retained} retained"
            )
        info = {"method": "fixed", "chosen": model.n_components}
        return replace(model, selection=info)
    n, info = run(
        "select_ncomp",
        lambda: select_ncomp(
            sample, model, config.ncomp_method, config.max_components, config
        ),
    )
    return replace(model, n_components=n, selection=info)
