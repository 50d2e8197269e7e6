"""Cox partial-likelihood objective and survival estimators.

Implements the training loss plus the evaluation suite: concordance index,
time-dependent AUC, Kaplan-Meier product-limit curves, the log-rank test,
a Newton-Raphson Cox proportional-hazards fitter with Wald inference, and
risk-group stratification.

Conventions used throughout:
  * the risk set at an event time t is ``{j : t_j >= t}`` (the failing
    patient is in their own risk set);
  * tied event times follow the Breslow convention: tied events share the
    same full risk set;
  * censored records (event = 0) contribute to risk sets but never to
    event terms.
"""

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autodiff import SegmentMap, Tape
from .errors import DataError, NoEventsError, NumericError

__all__ = [
    "SurvivalRecord",
    "CoxFit",
    "KmCurve",
    "cox_loss",
    "cox_nll_value",
    "concordance_index",
    "time_dependent_auc",
    "kaplan_meier",
    "log_rank_test",
    "chi2_sf",
    "fit_coxph",
    "stratify_risk",
]


@dataclass(frozen=True)
class SurvivalRecord:
    """One patient's follow-up: time in days and event indicator (1 = event,
    0 = censored)."""

    patient_id: str
    time: float
    event: int

    def __post_init__(self):
        if self.time < 0:
            raise DataError(f"negative survival time for {self.patient_id}")
        if self.event not in (0, 1):
            raise DataError(f"event indicator must be 0/1 for {self.patient_id}")


def _times_events(records: Sequence[SurvivalRecord]):
    times = np.array([r.time for r in records], dtype=np.float64)
    events = np.array([r.event for r in records], dtype=np.int64)
    return times, events


def breslow_risk_sets(records: Sequence[SurvivalRecord]):
    """Unique event times with tie counts and shared risk sets.

    Returns ``(unique_times, tie_counts, risk_sets)`` where ``risk_sets[k]``
    is the index array ``{j : t_j >= unique_times[k]}``.
    """
    times, events = _times_events(records)
    event_times = np.unique(times[events == 1])
    tie_counts = np.array(
        [int(np.sum((times == t) & (events == 1))) for t in event_times],
        dtype=np.int64,
    )
    risk_sets = [np.flatnonzero(times >= t) for t in event_times]
    return event_times, tie_counts, risk_sets


def cox_loss(
    tape: Tape,
    theta: int,
    records: Sequence[SurvivalRecord],
    lam: float = 0.0,
    regularized: Sequence[int] = (),
) -> int:
    """Negative Cox partial log-likelihood as a tape node, plus optional L2.

    ``theta`` must be an (n x 1) node aligned with ``records``. The penalty
    ``lam * sum ||W||^2`` ranges over the nodes in ``regularized`` (weight
    matrices only; the caller excludes biases and embeddings).

    Raises ``NoEventsError`` when no record has an event, so a batch sampler
    can resample.
    """
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    n = tape.value(theta).shape[0]
    if n != len(records):
        raise ValueError("theta and records are misaligned")
    times, events = _times_events(records)
    event_idx = np.flatnonzero(events == 1)
    if event_idx.size == 0:
        raise NoEventsError("no events in batch; partial likelihood undefined")

    event_terms = tape.gather_rows(theta, SegmentMap(event_idx, n))
    to_scalar = SegmentMap(np.zeros(event_idx.size, dtype=np.int64), 1)
    sum_events = tape.segment_sum(event_terms, to_scalar)

    _, tie_counts, risk_sets = breslow_risk_sets(records)
    lse = tape.logsumexp_sets(theta, risk_sets)
    counts = tape.input(tie_counts.astype(np.float64).reshape(-1, 1))
    weighted = tape.mul(lse, counts)
    sum_lse = tape.segment_sum(
        weighted, SegmentMap(np.zeros(len(risk_sets), dtype=np.int64), 1)
    )

    loss = tape.add(tape.neg(sum_events), sum_lse)
    if lam > 0 and regularized:
        penalty = None
        for node in regularized:
            ss = tape.sum_squares(node)
            penalty = ss if penalty is None else tape.add(penalty, ss)
        loss = tape.add(loss, tape.scale(penalty, lam))
    return loss


def cox_nll_value(
    theta: np.ndarray, records: Sequence[SurvivalRecord]
) -> float:
    """Plain-array negative partial log-likelihood (no penalty, no tape).

    Used for epoch bookkeeping where no gradient is needed; agrees with
    ``cox_loss`` at lam = 0.
    """
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    times, events = _times_events(records)
    if not np.any(events == 1):
        raise NoEventsError("no events; partial likelihood undefined")
    total = -float(theta[events == 1].sum())
    _, tie_counts, risk_sets = breslow_risk_sets(records)
    for d, rows in zip(tie_counts, risk_sets):
        sub = theta[rows]
        peak = sub.max()
        total += float(d) * (peak + math.log(np.exp(sub - peak).sum()))
    return total


def concordance_index(
    scores: np.ndarray, records: Sequence[SurvivalRecord]
) -> float:
    """Harrell's concordance over comparable pairs.

    A pair (i, j) is comparable when ``t_i < t_j`` and patient i had an
    event. Concordant pairs (higher score for the earlier event) count 1,
    score ties count 0.5. The quadratic scan doubles as its own oracle at
    this scale.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    times, events = _times_events(records)
    concordant = 0.0
    comparable = 0
    for i in range(len(records)):
        if events[i] != 1:
            continue
        for j in range(len(records)):
            if times[i] < times[j]:
                comparable += 1
                if scores[i] > scores[j]:
                    concordant += 1.0
                elif scores[i] == scores[j]:
                    concordant += 0.5
    if comparable == 0:
        raise DataError("no comparable pairs for concordance")
    return concordant / comparable


def time_dependent_auc(
    scores: np.ndarray,
    records: Sequence[SurvivalRecord],
    horizon: Optional[float] = None,
) -> float:
    """Cumulative/dynamic AUC at a horizon (default: median observed time).

    Cases are events with ``t <= horizon``; controls are patients observed
    beyond the horizon. Ties in score count 0.5. No censoring weights.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    times, events = _times_events(records)
    if horizon is None:
        horizon = float(np.median(times))
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    cases = np.flatnonzero((events == 1) & (times <= horizon))
    controls = np.flatnonzero(times > horizon)
    if cases.size == 0 or controls.size == 0:
        raise DataError(
            f"empty case or control set at horizon {horizon:g} "
            f"({cases.size} cases, {controls.size} controls)"
        )
    wins = 0.0
    for i in cases:
        for j in controls:
            if scores[i] > scores[j]:
                wins += 1.0
            elif scores[i] == scores[j]:
                wins += 0.5
    return wins / (cases.size * controls.size)


@dataclass
class KmCurve:
    """Product-limit estimate: step values at sorted unique event times."""

    times: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray

    def survival_at(self, t: float) -> float:
        """S(t); 1.0 before the first event time."""
        idx = np.searchsorted(self.times, t, side="right") - 1
        return 1.0 if idx < 0 else float(self.survival[idx])


def kaplan_meier(records: Sequence[SurvivalRecord]) -> KmCurve:
    """Kaplan-Meier estimator S(t) = prod_{t_k <= t} (1 - d_k / n_k).

    Censored patients leave the risk set after their recorded time and do
    not introduce steps.
    """
    if not records:
        raise DataError("empty record list")
    times, events = _times_events(records)
    event_times = np.unique(times[events == 1])
    at_risk = np.empty(event_times.size, dtype=np.int64)
    d = np.empty(event_times.size, dtype=np.int64)
    surv = np.empty(event_times.size, dtype=np.float64)
    s = 1.0
    for k, t in enumerate(event_times):
        at_risk[k] = int(np.sum(times >= t))
        d[k] = int(np.sum((times == t) & (events == 1)))
        s *= 1.0 - d[k] / at_risk[k]
        surv[k] = s
    return KmCurve(times=event_times, survival=surv, at_risk=at_risk, events=d)


def _regularized_gamma_p(a: float, x: float) -> float:
    """Lower regularized incomplete gamma P(a, x) by series expansion."""
    term = 1.0 / a
    total = term
    n = a
    for _ in range(500):
        n += 1.0
        term *= x / n
        total += term
        if abs(term) < abs(total) * 1e-16:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))

def _regularized_gamma_q(a: float, x: float) -> float:
    """Upper regularized incomplete gamma Q(a, x) by Lentz continued
    fraction; accurate for x >= a + 1."""
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 500):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return h * math.exp(-x + a * math.log(x) - math.lgamma(a))


def chi2_sf(x: float, df: int) -> float:
    """Chi-square survival function P(X > x) with ``df`` degrees of freedom.

    Evaluated as the upper regularized incomplete gamma Q(df/2, x/2),
    switching between the series and continued-fraction expansions at the
    usual x < a + 1 boundary.
    """
    if df < 1:
        raise ValueError("df must be >= 1")
    if x <= 0:
        return 1.0
    a = 0.5 * df
    half = 0.5 * x
    if half < a + 1.0:
        return min(1.0, max(0.0, 1.0 - _regularized_gamma_p(a, half)))
    return min(1.0, max(0.0, _regularized_gamma_q(a, half)))


def log_rank_test(
    records: Sequence[SurvivalRecord], group_labels: Sequence
) -> tuple[float, float]:
    """Log-rank test across two or more groups.

    Observed-minus-expected event counts with the hypergeometric variance
    (covariance matrix for k groups, using the first k-1 groups); the
    statistic is referred to a chi-square with (groups - 1) degrees of
    freedom.
    """
    if len(group_labels) != len(records):
        raise ValueError("labels and records are misaligned")
    labels = np.asarray(group_labels)
    groups = sorted(set(labels.tolist()))
    if len(groups) < 2:
        raise DataError("log-rank test requires at least two groups")
    times, events = _times_events(records)
    membership = np.stack([labels == g for g in groups])  # G x n bool
    if membership.sum(axis=1).min() == 0:
        raise DataError("log-rank test: a group has zero members")

    event_times = np.unique(times[events == 1])
    g = len(groups)
    observed = np.zeros(g - 1)
    expected = np.zeros(g - 1)
    cov = np.zeros((g - 1, g - 1))
    for t in event_times:
        at_risk = times >= t
        n = int(at_risk.sum())
        d = int(np.sum((times == t) & (events == 1)))
        if n <= 1:
            # No variance contribution; O-E is still well defined but a
            # single-patient risk set contributes none.
            pass
        n_g = membership[:, at_risk].sum(axis=1).astype(np.float64)
        d_g = np.array(
            [
                int(np.sum((times == t) & (events == 1) & membership[i]))
                for i in range(g)
            ],
            dtype=np.float64,
        )
        frac = n_g / n
        observed += d_g[: g - 1]
        expected += d * frac[: g - 1]
        if n > 1:
            scale = d * (n - d) / (n - 1.0)
            for i in range(g - 1):
                for j in range(g - 1):
                    delta = 1.0 if i == j else 0.0
                    cov[i, j] += scale * frac[i] * (delta - frac[j])

    diff = observed - expected
    if np.allclose(diff, 0.0) :
        return 0.0, 1.0
    try:
        sol = np.linalg.solve(cov, diff)
    except np.linalg.LinAlgError:
        sol, *_ = np.linalg.lstsq(cov, diff, rcond=None)
    stat = float(diff @ sol)
    stat = max(stat, 0.0)
    return stat, chi2_sf(stat, g - 1)


@dataclass
class CoxFit:
    """Newton-fitted Cox proportional-hazards model with Wald inference."""

    coef: np.ndarray
    se: np.ndarray
    hazard_ratio: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    z: np.ndarray
    p_values: np.ndarray
    log_likelihood: float
    converged: bool
    iterations: int
    names: list = field(default_factory=list)


def _cox_ll_score_info(beta, x, records):
    """Breslow log partial likelihood with gradient and observed information.

    All inner sums subtract the per-risk-set max of the linear predictor, so
    the evaluation is shift-stable even for diverging coefficients.
    """
    eta = x @ beta
    _, tie_counts, risk_sets = breslow_risk_sets(records)
    times, events = _times_events(records)
    event_rows = np.flatnonzero(events == 1)
    ll = float(eta[event_rows].sum())
    score = x[event_rows].sum(axis=0)
    info = np.zeros((x.shape[1], x.shape[1]))
    for d, rows in zip(tie_counts, risk_sets):
        sub = eta[rows]
        peak = sub.max()
        w = np.exp(sub - peak)
        w_sum = w.sum()
        ll -= float(d) * (peak + math.log(w_sum))
        xw = x[rows].T @ w / w_sum
        score -= d * xw
        xxw = (x[rows].T * w) @ x[rows] / w_sum
        info += d * (xxw - np.outer(xw, xw))
    return ll, score, info


def fit_coxph(
    covariates: np.ndarray,
    records: Sequence[SurvivalRecord],
    names: Optional[Sequence[str]] = None,
    max_iter: int = 50,
    tol: float = 1e-8,
    max_step: float = 5.0,
) -> CoxFit:
    """Maximize the Breslow partial likelihood by Newton-Raphson.

    Convergence when ``max |score| < tol`` or after ``max_iter`` iterations
    (then flagged, not fatal: monotone-likelihood data diverges and is
    reported with ``converged=False``). Steps are halved if the likelihood
    would decrease and capped at ``max_step`` in norm. Standard errors come
    from the inverse observed information; confidence bounds are
    ``exp(coef +- 1.96 se)`` and p-values are two-sided Wald.
    """
    x = np.asarray(covariates, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n, p = x.shape
    if n != len(records):
        raise ValueError("covariates and records are misaligned")
    if names is None:
        names = [f"x{j}" for j in range(p)]
    const = [names[j] for j in range(p) if np.ptp(x[:, j]) == 0.0]
    if const:
        raise DataError(f"constant covariates rejected: {', '.join(const)}")
    if np.linalg.matrix_rank(x) < p:
        raise DataError("covariate matrix is rank deficient")
    if n <= p:
        raise DataError("need more patients than covariates")
    if not any(r.event for r in records):
        raise NoEventsError("no events; Cox fit undefined")

    beta = np.zeros(p)
    ll, score, info = _cox_ll_score_info(beta, x, records)
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        if np.max(np.abs(score)) < tol:
            converged = True
            break
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError as exc:
            raise NumericError("singular information matrix") from exc
        norm = np.linalg.norm(step)
        if norm > max_step:
            step *= max_step / norm
        # Step halving keeps the likelihood monotone.
        for _ in range(30):
            candidate = beta + step
            new_ll, new_score, new_info = _cox_ll_score_info(candidate, x, records)
            if new_ll >= ll - 1e-12:
                break
            step *= 0.5
        beta, ll, score, info = candidate, new_ll, new_score, new_info
    else:
        converged = np.max(np.abs(score)) < tol

    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError as exc:
        raise NumericError("singular information matrix at optimum") from exc
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    with np.errstate(divide="ignore"):
        z = np.where(se > 0, beta / se, np.inf * np.sign(beta))
    p_values = np.array([math.erfc(abs(v) / math.sqrt(2.0)) for v in z])
    # Monotone-likelihood data yields enormous standard errors; the upper
    # confidence bound overflowing to +inf is the honest answer.
    with np.errstate(over="ignore"):
        hr = np.exp(beta)
        lower = np.exp(beta - 1.96 * se)
        upper = np.exp(beta + 1.96 * se)
    return CoxFit(
        coef=beta,
        se=se,
        hazard_ratio=hr,
        ci_lower=lower,
        ci_upper=upper,
        z=z,
        p_values=p_values,
        log_likelihood=ll,
        converged=bool(converged),
        iterations=iterations,
        names=list(names),
    )


def stratify_risk(
    scores: np.ndarray,
    scheme: str = "median",
    cutpoints: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Assign risk-group labels from score cutpoints.

    With ``cutpoints=None`` the cutpoints are fit from ``scores`` (training
    distribution): the median for a 2-group split or the tertile quantiles
    for 3 groups. Scores tied with a cutpoint go to the lower group. Returns
    ``(labels, cutpoints)`` so test-time calls can reuse training cutpoints.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if scheme not in ("median", "tertiles"):
        raise ValueError(f"unknown stratification scheme {scheme!r}")
    if cutpoints is None:
        if np.ptp(scores) == 0.0:
            raise DataError("degenerate scores: all equal, no cutpoints")
        if scheme == "median":
            cutpoints = np.array([np.median(scores)])
        else:
            cutpoints = np.quantile(scores, [1.0 / 3.0, 2.0 / 3.0])
    cutpoints = np.asarray(cutpoints, dtype=np.float64)
    labels = np.zeros(scores.size, dtype=np.int64)
    for c in cutpoints:
        labels += scores > c
    return labels, cutpoints
