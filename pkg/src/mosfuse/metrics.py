"""MSE / LCC / SRCC / KTAU at utterance and system level, plus zoom-in subsets.

Tables are pandas DataFrames keyed by ``dataset_id, system_id,
utterance_id``; truths carry ``mos`` and predictions ``pred_mos``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np
import pandas as pd
from scipy.stats import kendalltau, rankdata

KEY = ["dataset_id", "utterance_id"]


class UndefinedCorrelationError(ValueError):
    pass


class TableMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class MetricReport:
    level: str
    mse: float
    lcc: float
    srcc: float
    ktau: float
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def _check(x: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch {x.size} vs {y.size}")
    if x.size < 2:
        raise UndefinedCorrelationError(f"need at least 2 items, got {x.size}")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise UndefinedCorrelationError("zero-variance input")
    return x, y


def mse(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return float(np.mean((x - y) ** 2))


def lcc(x, y) -> float:
    x, y = _check(x, y)
    dx, dy = x - x.mean(), y - y.mean()
    denom = math.sqrt(np.dot(dx, dx) * np.dot(dy, dy))
    if not denom > 0 or not math.isfinite(denom):
        raise UndefinedCorrelationError("variance underflows or overflows")
    r = float(np.dot(dx, dy) / denom)
    return max(-1.0, min(1.0, r))


def srcc(x, y) -> float:
    """Spearman: Pearson correlation of average ranks."""
    x, y = _check(x, y)
    return lcc(rankdata(x), rankdata(y))


def ktau(x, y, variant: str = "b") -> float:
    """Kendall tau-b (tie-corrected) or tau-a."""
    x, y = _check(x, y)
    tau_b = float(kendalltau(x, y, variant="b").statistic)
    if variant == "b":
        return tau_b
    if variant != "a":
        raise ValueError(f"unknown Kendall variant {variant!r}")
    n0 = x.size * (x.size - 1) / 2
    tx = sum(c * (c - 1) / 2 for c in np.unique(x, return_counts=True)[1])
    ty = sum(c * (c - 1) / 2 for c in np.unique(y, return_counts=True)[1])
    return tau_b * math.sqrt((n0 - tx) * (n0 - ty)) / n0


def _report(level: str, pred: np.ndarray, truth: np.ndarray, ktau_variant: str) -> MetricReport:
    return MetricReport(
        level=level,
        mse=mse(pred, truth),
        lcc=lcc(pred, truth),
        srcc=srcc(pred, truth),
        ktau=ktau(pred, truth, ktau_variant),
        n=int(len(pred)),
    )


def _merge(preds: pd.DataFrame, truths: pd.DataFrame) -> pd.DataFrame:
    p_keys = set(map(tuple, preds[KEY].to_numpy()))
    t_keys = set(map(tuple, truths[KEY].to_numpy()))
    if len(p_keys) != len(preds) or len(t_keys) != len(truths):
        raise TableMismatchError("duplicate (dataset_id, utterance_id) keys")
    if p_keys != t_keys:
        only_p, only_t = p_keys - t_keys, t_keys - p_keys
        raise TableMismatchError(
            f"unmatched ids: {len(only_p)} only in predictions, {len(only_t)} only in truths"
            + (f", e.g. {sorted(only_p or only_t)[0]}" if only_p or only_t else "")
        )
    merged = truths.merge(preds, on=KEY, suffixes=("", "_pred"))
    if "system_id_pred" in merged:
        bad = merged[merged["system_id"] != merged["system_id_pred"]]
        if len(bad):
            raise TableMismatchError(
                f"system {bad.iloc[0]['system_id_pred']!r} in predictions not in truths for {tuple(bad.iloc[0][KEY])}"
            )
    return merged


def utterance_metrics(preds: pd.DataFrame, truths: pd.DataFrame, ktau_variant: str = "b") -> MetricReport:
    m = _merge(preds, truths)
    return _report("utterance", m["pred_mos"].to_numpy(), m["mos"].to_numpy(), ktau_variant)


def system_means(table: pd.DataFrame, column: str) -> pd.Series:
    return table.groupby(["dataset_id", "system_id"], sort=True)[column].mean()


def system_metrics(preds: pd.DataFrame, truths: pd.DataFrame, ktau_variant: str = "b") -> MetricReport:
    """Metrics over per-system means of predictions and truths."""
    m = _merge(preds, truths)
    if m.groupby(["dataset_id", "system_id"]).ngroups < 2:
        raise UndefinedCorrelationError("need at least 2 systems")
    return _report("system", system_means(m, "pred_mos").to_numpy(), system_means(m, "mos").to_numpy(), ktau_variant)


def zoom_subset(truths: pd.DataFrame, rate: float) -> Set[Tuple[str, str]]:
    """The ``ceil(rate * n_systems)`` systems with the highest mean true MOS.

    Ties at the cut go to the lexically smaller system id.
    """
    if not 0 < rate <= 1:
        raise ValueError(f"zoom rate must be in (0, 1], got {rate}")
    if len(truths) == 0:
        raise ValueError("empty truth table")
    means = system_means(truths, "mos").reset_index()
    means = means.sort_values(["mos", "system_id", "dataset_id"], ascending=[False, True, True], kind="mergesort")
    n_keep = max(1, math.ceil(rate * len(means) - 1e-9))
    return set(zip(means["dataset_id"][:n_keep], means["system_id"][:n_keep]))


def restrict(table: pd.DataFrame, systems: Iterable[Tuple[str, str]]) -> pd.DataFrame:
    keys = set(systems)
    mask = [(d, s) in keys for d, s in zip(table["dataset_id"], table["system_id"])]
    return table[mask]


def evaluate(
    preds: pd.DataFrame,
    truths: pd.DataFrame,
    levels: Sequence[str] = ("utterance", "system"),
    zoom_rates: Sequence[float] = (1.0,),
    ktau_variant: str = "b",
) -> List[dict]:
    """One report dict per (zoom rate, level) condition."""
    out = []
    for rate in zoom_rates:
        systems = zoom_subset(truths, rate)
        t = restrict(truths, systems)
        p = restrict(preds, systems) if "system_id" in preds else preds.merge(t[KEY], on=KEY)
        for level in levels:
            fn = utterance_metrics if level == "utterance" else system_metrics
            entry = {"zoom": rate, **fn(p, t, ktau_variant).to_dict()}
            out.append(entry)
    return out


def truth_table(labels) -> pd.DataFrame:
    return pd.DataFrame(
        [(lab.dataset_id, lab.system_id, lab.utterance_id, lab.mos) for lab in labels],
        columns=["dataset_id", "system_id", "utterance_id", "mos"],
    )


def read_table(path, score_column: Optional[str] = None) -> pd.DataFrame:
    """Read a manifest or prediction CSV as a metrics table."""
    df = pd.read_csv(path, dtype={"dataset_id": str, "system_id": str, "utterance_id": str})
    if score_column is not None and score_column not in df:
        raise TableMismatchError(f"{path}: missing column {score_column!r}")
    return df
