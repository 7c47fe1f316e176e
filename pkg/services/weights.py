from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple
import logging

import numpy as np
import pandas as pd

from .condmean import support_levels
from .errors import DegenerateTreatmentError, FrameError, IvGapError
from .estimators import CoefEstimate, check_relevance, subsample_ols
from .inference import ratio_se
from .projection import ResidualizedFrame, TAU_RANK

logger = logging.getLogger(__name__)

LEVEL_COLUMNS = ["level", "ols_weight", "ols_se", "iv_weight", "iv_se"]
GROUP_COLUMNS = ["group", "share", "ols_weight", "ols_se", "iv_weight", "iv_se", "subsample_ols", "subsample_se"]


@dataclass(frozen=True)
class LevelWeight:
    level: float
    ols_weight: float
    ols_se: float
    iv_weight: float
    iv_se: float
    width: float
    frequency: float


@dataclass
class WeightProfile:
    rows: List[LevelWeight]
    mode: str
    merged: List[Tuple[float, float]] = field(default_factory=list)

    @property
    def levels(self) -> List[float]:
        return [row.level for row in self.rows]

    @property
    def ols_weights(self) -> np.ndarray:
        return np.array([row.ols_weight for row in self.rows])

    @property
    def iv_weights(self) -> np.ndarray:
        return np.array([row.iv_weight for row in self.rows])

    def table(self) -> pd.DataFrame:
        return pd.DataFrame([{c: getattr(row, c) for c in LEVEL_COLUMNS} for row in self.rows], columns=LEVEL_COLUMNS)


def _merge_targets(levels: np.ndarray, frequency: np.ndarray, floor: float) -> Dict[int, int]:
    """Map each reportable level index (≥ 1) to the level that absorbs its interval mass"""
    candidates = list(range(1, len(levels)))
    reported = [j for j in candidates if frequency[j] >= floor]
    if not reported:
        reported = [candidates[-1]]
    target = {}
    for j in candidates:
        if j in reported:
            target[j] = j
            continue
        above = [r for r in reported if r > j]
        target[j] = above[0] if above else max(r for r in reported if r < j)
    return target


def treatment_level_weights(rframe: ResidualizedFrame, bin_floor: float = 0.0) -> WeightProfile:
    """Total OLS and IV weight on each treatment interval (x_{j−1}, x_j]"""
    frame = rframe.frame
    weights, clusters = frame.weights, frame.clusters
    levels = support_levels(frame.x, weights)
    if len(levels) < 2:
        raise DegenerateTreatmentError("treatment takes a single value; no level weights")
    denominator_iv = check_relevance(rframe)

    did = rframe.mode == "did-rd"
    widths = np.diff(levels)
    indicators = np.column_stack([(frame.x >= level).astype(float) for level in levels[1:]])
    resid_steps = rframe.projector.residuals(indicators)
    iv_steps = indicators if did else resid_steps
    frequency = np.array([np.sum(weights[frame.x == level]) for level in levels]) / weights.sum()
    target = _merge_targets(levels, frequency, bin_floor)

    merged = [(float(levels[j]), float(levels[t])) for j, t in sorted(target.items()) if t != j]
    if merged:
        logger.info(f"Merged sparse treatment levels below share {bin_floor:g}: {merged}")

    ols_den = rframe.x_t * rframe.x_t
    iv_den = rframe.iv_regressor * rframe.z_t
    rows = []
    for t in sorted(set(target.values())):
        sources = [j for j, into in sorted(target.items()) if into == t]
        ols_term = sum(widths[j - 1] * resid_steps[:, j - 1] for j in sources)
        iv_term = sum(widths[j - 1] * iv_steps[:, j - 1] for j in sources)
        ols_w, ols_se = ratio_se(ols_term * rframe.x_t, ols_den, weights, clusters)
        iv_w, iv_se = ratio_se(iv_term * rframe.z_t, iv_den, weights, clusters)
        rows.append(LevelWeight(
            level=float(levels[t]),
            ols_weight=ols_w,
            ols_se=ols_se,
            iv_weight=iv_w,
            iv_se=iv_se,
            width=float(sum(widths[j - 1] for j in sources)),
            frequency=float(sum(frequency[j] for j in sources)),
        ))
    logger.info(f"Level weights on {len(rows)} levels (IV denominator {denominator_iv:.6g})")
    return WeightProfile(rows, rframe.mode, merged)


@dataclass(frozen=True)
class GroupWeightRow:
    group: str
    share: float
    ols_weight: float
    ols_se: float
    iv_weight: float
    iv_se: float
    subsample: Optional[CoefEstimate] = None

    def as_record(self) -> dict:
        return {
            "group": self.group,
            "share": self.share,
            "ols_weight": self.ols_weight,
            "ols_se": self.ols_se,
            "iv_weight": self.iv_weight,
            "iv_se": self.iv_se,
            "subsample_ols": self.subsample.value if self.subsample else None,
            "subsample_se": self.subsample.se if self.subsample else None,
        }


def _in_span(rframe: ResidualizedFrame, indicator: np.ndarray) -> bool:
    resid = rframe.projector.residuals(indicator)
    norm = np.sqrt(np.sum(rframe.weights * indicator ** 2))
    return float(np.sqrt(np.sum(rframe.weights * resid ** 2))) <= TAU_RANK * norm


def group_weights(
    rframe: ResidualizedFrame,
    groups: Sequence,
    labels: Optional[Sequence[str]] = None,
    with_subsample: bool = False,
) -> List[GroupWeightRow]:
    """Population share, OLS weight and IV weight of each group of a row partition"""
    frame = rframe.frame
    weights, clusters = frame.weights, frame.clusters
    groups = np.asarray([str(g) for g in groups], dtype=object)
    if groups.shape != (frame.n,):
        raise FrameError("grouping must assign every row to a group")
    labels = list(labels) if labels is not None else sorted(set(groups))
    unknown = set(groups) - set(labels)
    if unknown:
        raise FrameError(f"grouping does not cover rows labelled {sorted(unknown)}")
    check_relevance(rframe)

    did = rframe.mode == "did-rd"
    ols_num = rframe.x_t * rframe.x_t
    iv_den = rframe.iv_regressor * rframe.z_t
    if did:
        projected = rframe.projector.project(frame.x * rframe.z_t).fitted
    total = weights.sum()

    rows = []
    for label in labels:
        member = (groups == label).astype(float)
        if np.sum(weights * member) <= 0:
            raise FrameError(f"group '{label}' is empty")
        share = float(np.sum(weights * member)) / total
        ols_w, ols_se = ratio_se(member * ols_num, ols_num, weights, clusters)
        if did and not _in_span(rframe, member):
            iv_w, iv_se = ratio_se(member * projected, iv_den, weights, clusters)
        else:
            iv_w, iv_se = ratio_se(member * iv_den, iv_den, weights, clusters)

        subsample = None
        if with_subsample:
            try:
                subsample = subsample_ols(frame, groups == label)
            except IvGapError as e:
                logger.warning(f"Subsample OLS for group '{label}' failed: {e.message}")
        rows.append(GroupWeightRow(label, share, ols_w, ols_se, iv_w, iv_se, subsample))
    logger.info(f"Group weights for {len(rows)} groups")
    return rows


@dataclass(frozen=True)
class NegativeWeightSummary:
    count: int
    total: float


def negative_weights(rows: Sequence[GroupWeightRow]) -> NegativeWeightSummary:
    negative = [row.iv_weight for row in rows if row.iv_weight < 0]
    return NegativeWeightSummary(len(negative), float(sum(negative)))


@dataclass
class WeightReport:
    levels: pd.DataFrame
    groups: Optional[pd.DataFrame]
    negative: Optional[NegativeWeightSummary]
    mode: str
    merged: List[Tuple[float, float]]

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "levels": self.levels.to_dict(orient="records"),
            "groups": self.groups.to_dict(orient="records") if self.groups is not None else [],
            "negative_iv_weights": (
                {"count": self.negative.count, "sum": self.negative.total} if self.negative else None
            ),
            "merged_levels": [list(pair) for pair in self.merged],
        }


def weight_report(profile: WeightProfile, groups: Optional[Sequence[GroupWeightRow]] = None) -> WeightReport:
    """Level table, group table and the negative-weight summary"""
    group_table = None
    negative = None
    if groups:
        group_table = pd.DataFrame([row.as_record() for row in groups], columns=GROUP_COLUMNS)
        negative = negative_weights(groups)
        if negative.count:
            logger.info(f"{negative.count} groups carry negative IV weight, summing to {negative.total:.6g}")
    return WeightReport(profile.table(), group_table, negative, profile.mode, list(profile.merged))
