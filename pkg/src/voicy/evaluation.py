"""Listening-test statistics and objective proxies.

Scores are JSON lines, one :class:`ScoreRecord` each; reports are
tab-separated tables with a header row.
"""

from __future__ import annotations

import itertools
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import stats

METRICS = ("naturalness", "similarity")
CLEAN = "clean"
EXACT_THRESHOLD = 25


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class ScoreRecord:
    system: str
    utterance_id: str
    rater_id: str
    metric: str
    score: float
    snr_db: float | str | None = None

    def __post_init__(self):
        if self.metric not in METRICS:
            raise EvalError(f"unknown metric {self.metric!r}; expected one of {METRICS}")
        if not 0.0 <= float(self.score) <= 100.0:
            raise EvalError(f"score {self.score} outside [0, 100]")
        if isinstance(self.snr_db, str) and self.snr_db != CLEAN:
            raise EvalError(f"snr_db must be a number or {CLEAN!r}, got {self.snr_db!r}")


def read_scores(path) -> list[ScoreRecord]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(ScoreRecord(**json.loads(line)))
            except (json.JSONDecodeError, TypeError, EvalError) as exc:
                raise EvalError(f"{path}:{lineno}: {exc}") from None
    return out


def write_scores(records, path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps({k: v for k, v in asdict(r).items() if v is not None}) + "\n")


def read_snr_map(path) -> dict:
    """TSV ``utterance_id<TAB>snr_db`` (with header); ``clean`` is accepted as a value."""
    out = {}
    lines = Path(path).read_text().splitlines()
    for lineno, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise EvalError(f"{path}:{lineno}: expected 2 tab-separated fields")
        out[parts[0]] = CLEAN if parts[1] == CLEAN else float(parts[1])
    return out


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float
    n_effective: int
    mode: str

    __test__ = False  # keep pytest from collecting this class


def signed_ranks(x, y) -> tuple[np.ndarray, np.ndarray]:
    """Average ranks of ``|x - y|`` and the sign of each nonzero difference."""
    d = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    d = d[d != 0]
    return stats.rankdata(np.abs(d)), np.sign(d)


def _exact_p(ranks: np.ndarray, w_plus: float) -> float:
    # ranks are multiples of 1/2, so doubled ranks are integers and the
    # distribution of the doubled W+ is a subset-sum count
    doubled = np.rint(2 * ranks).astype(np.int64)
    total = int(doubled.sum())
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in doubled:
        counts[r:] = counts[r:] + counts[: total + 1 - r].copy()
    observed = abs(int(round(4 * w_plus)) - total)
    sums = np.arange(total + 1)
    extreme = np.abs(2 * sums - total) >= observed
    return float(sum(counts[extreme]) / (2 ** len(doubled)))


def _approx_p(ranks: np.ndarray, w_plus: float) -> float:
    n = len(ranks)
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_counts**3 - tie_counts)) / 48.0
    if var <= 0:
        return 1.0
    z = max(abs(w_plus - mean) - 0.5, 0.0) / math.sqrt(var)
    return float(min(1.0, 2.0 * stats.norm.sf(z)))


def wilcoxon_signed_rank(x, y, mode: str = "auto", exact_threshold: int = EXACT_THRESHOLD) -> TestResult:
    """Two-sided paired test on ``x - y``.

    ``mode`` is ``exact``, ``normal_approx`` or ``auto`` (exact up to
    ``exact_threshold`` nonzero pairs).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or x.size < 1:
        raise EvalError("paired samples must be 1-D with equal, non-zero length")
    ranks, signs = signed_ranks(x, y)
    n = len(ranks)
    if n == 0:
        raise EvalError("degenerate sample: all differences are zero")
    w_plus = float(ranks[signs > 0].sum())
    if mode == "auto":
        mode = "exact" if n <= exact_threshold else "normal_approx"
    if mode == "exact":
        if n > exact_threshold:
            raise EvalError(f"exact mode limited to {exact_threshold} nonzero pairs, got {n}")
        p = _exact_p(ranks, w_plus)
    elif mode == "normal_approx":
        p = _approx_p(ranks, w_plus)
    else:
        raise EvalError(f"unknown mode {mode!r}")
    return TestResult(w_plus, p, n, mode)


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SummaryRow:
    system: str
    metric: str
    mean: float
    ci_half_width: float | None
    n: int


def mean_ci(scores) -> tuple[float, float | None]:
    """Mean and 95 % Student-t half-width (``None`` for a single score)."""
    a = np.asarray(scores, dtype=float)
    mean = float(a.mean())
    if a.size < 2:
        return mean, None
    half = stats.t.ppf(0.975, a.size - 1) * a.std(ddof=1) / math.sqrt(a.size)
    return mean, float(half)


def _grouped(records) -> dict:
    groups = defaultdict(list)
    for r in records:
        groups[(r.system, r.metric)].append(float(r.score))
    return groups


def mushra_summary(records) -> list[SummaryRow]:
    if not records:
        raise EvalError("no score records")
    rows = []
    for (system, metric), scores in sorted(_grouped(records).items()):
        # sorting makes the floating-point sum independent of record order
        mean, half = mean_ci(sorted(scores))
        rows.append(SummaryRow(system, metric, mean, half, len(scores)))
    return rows


@dataclass(frozen=True)
class BucketRow:
    bucket: str
    system: str
    metric: str
    mean: float | None
    n: int


def bucket_labels(edges) -> list[str]:
    return [f"[{_fmt(a)},{_fmt(b)})" for a, b in zip(edges[:-1], edges[1:])]


def _fmt(v: float) -> str:
    return f"{v:g}"


def assign_bucket(snr, edges) -> str | None:
    if snr == CLEAN:
        return CLEAN
    i = int(np.searchsorted(edges, snr, side="right")) - 1
    if 0 <= i < len(edges) - 1:
        return bucket_labels(edges)[i]
    return None


def snr_bucket_report(records, snr_map: dict, edges) -> list[BucketRow]:
    """Mean score per (SNR bucket, system, metric).

    Buckets are half-open ``[lo, hi)``; ``clean`` utterances form their own
    bucket. Numeric buckets (including empty ones, ``n = 0``) are emitted
    whenever at least one scored utterance is not clean.
    """
    edges = [float(e) for e in edges]
    if any(b <= a for a, b in zip(edges[:-1], edges[1:])):
        raise EvalError(f"bucket edges must be strictly increasing, got {edges}")
    if not records:
        raise EvalError("no score records")
    members = defaultdict(list)
    any_numeric = False
    for r in records:
        if r.utterance_id not in snr_map:
            raise EvalError(f"utterance {r.utterance_id!r} has no SNR entry")
        snr = snr_map[r.utterance_id]
        bucket = assign_bucket(snr, edges)
        if bucket is None:
            raise EvalError(f"utterance {r.utterance_id!r} SNR {snr} lies outside the bucket edges {edges}")
        any_numeric |= bucket != CLEAN
        members[(bucket, r.system, r.metric)].append(float(r.score))

    labels = (bucket_labels(edges) if any_numeric else []) + (
        [CLEAN] if any(k[0] == CLEAN for k in members) else []
    )
    groups = sorted({(r.system, r.metric) for r in records})
    rows = []
    for label in labels:
        for system, metric in groups:
            scores = members.get((label, system, metric), [])
            mean = mean_ci(sorted(scores))[0] if scores else None
            rows.append(BucketRow(label, system, metric, mean, len(scores)))
    return rows


@dataclass(frozen=True)
class PairwiseRow:
    metric: str
    system_a: str
    system_b: str
    n_pairs: int
    statistic: float | None
    p_value: float | None
    mode: str


def pairwise_wilcoxon(records) -> list[PairwiseRow]:
    """Test every ordered pair of systems on scores matched by (utterance, rater)."""
    table = defaultdict(dict)
    for r in records:
        table[(r.metric, r.system)][(r.utterance_id, r.rater_id)] = float(r.score)
    rows = []
    for metric in sorted({r.metric for r in records}):
        systems = sorted({s for m, s in table if m == metric})
        for a, b in itertools.permutations(systems, 2):
            keys = sorted(table[(metric, a)].keys() & table[(metric, b)].keys())
            xa = [table[(metric, a)][k] for k in keys]
            xb = [table[(metric, b)][k] for k in keys]
            try:
                res = wilcoxon_signed_rank(xa, xb) if keys else None
            except EvalError:
                res = None
            if res is None:
                rows.append(PairwiseRow(metric, a, b, len(keys), None, None, "degenerate"))
            else:
                rows.append(PairwiseRow(metric, a, b, len(keys), res.statistic, res.p_value, res.mode))
    return rows


def write_table(rows, path) -> None:
    """TSV with the dataclass field names as header; ``None`` becomes ``NA``."""
    if not rows:
        Path(path).write_text("")
        return
    names = list(asdict(rows[0]))
    lines = ["\t".join(names)]
    for row in rows:
        lines.append("\t".join(_cell(v) for v in asdict(row).values()))
    Path(path).write_text("\n".join(lines) + "\n")


def _cell(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, float):
        return repr(v)
    return str(v)


# ---------------------------------------------------------------------------
# objective proxies
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ObjectiveScores:
    mel_mse: float
    speaker_cosine: float


def mel_mse(a, b) -> float:
    a = getattr(a, "values", a)
    b = getattr(b, "values", b)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise EvalError(f"frame mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def objective_proxies(converted, reference_clean, target_ref_mel, state) -> ObjectiveScores:
    from .model import encode_speaker

    mse = mel_mse(converted, reference_clean)
    cos = float(encode_speaker(converted, state) @ encode_speaker(target_ref_mel, state))
    return ObjectiveScores(mse, cos)
