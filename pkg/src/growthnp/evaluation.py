"""Test-set metrics: test loss, surprise, query-volume Dice and threshold curves."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .data import MAX_CONTEXT, MIN_CONTEXT, TimedObservation, Trajectory
from .model import GrowthNP, observations_to_tensors
from .objective import LossConfig, cross_entropy_loss, gaussian_kl, soft_dice_loss

CASE_COLUMNS = (
    "subject_id",
    "num_context",
    "target_index",
    "target_time",
    "test_loss",
    "surprise",
    "query_volume_dice",
    "predictive_dice",
    "true_overlap",
)
METRICS = ("test_loss", "surprise", "query_volume_dice", "predictive_dice", "true_overlap")
DEFAULT_THRESHOLDS = tuple(np.round(np.arange(0.1, 1.0001, 0.05), 2)) + (1.01,)


def dice_coefficient(a: np.ndarray, b: np.ndarray, classes: str = "whole") -> float:
    """Dice overlap of two label maps.

    ``whole`` compares the union of all foreground labels; ``per_class``
    averages over foreground classes present in either map. Two empty
    inputs score 1.
    """
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if classes == "whole":
        fa, fb = a > 0, b > 0
        total = int(fa.sum()) + int(fb.sum())
        return 1.0 if total == 0 else 2.0 * int((fa & fb).sum()) / total
    if classes == "per_class":
        labels = sorted((set(np.unique(a)) | set(np.unique(b))) - {0})
        if not labels:
            return 1.0
        return float(np.mean([dice_coefficient(a == c, b == c) for c in labels]))
    raise ValueError(f"classes must be 'whole' or 'per_class', got {classes!r}")


def mean_sem(values: Sequence[float]) -> tuple[float, float]:
    """Mean and standard error of the mean (sample std / sqrt(n))."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return math.nan, math.nan
    sem = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else math.nan
    return float(v.mean()), sem


@dataclass
class TestCase:
    subject_id: str
    context: list[TimedObservation]
    target: TimedObservation
    target_index: int
    true_overlap: float

    @property
    def num_context(self) -> int:
        return len(self.context)


@dataclass
class CaseResult:
    subject_id: str
    num_context: int
    target_index: int
    target_time: float
    test_loss: float
    surprise: float
    query_volume_dice: float
    predictive_dice: float
    true_overlap: float

    def row(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class ThresholdPoint:
    threshold: float
    n_cases: int
    # None marks an empty subset.
    predictive_dice: Optional[float]
    query_volume_dice: Optional[float]
    predictive_threshold: Optional[float]


@dataclass
class MetricsReport:
    cases: list[CaseResult]
    aggregates: dict[str, tuple[float, float]]
    curve: list[ThresholdPoint]
    meta: dict = field(default_factory=dict)


def build_test_cases(
    test_set: Sequence[Trajectory], context_sizes: Sequence[int] = range(MIN_CONTEXT, MAX_CONTEXT + 1)
) -> list[TestCase]:
    """All (context prefix, later target) pairs with nonzero true overlap."""
    cases = []
    dropped = 0
    for traj in test_set:
        obs = traj.observations
        for k in context_sizes:
            for j in range(k, len(obs)):
                overlap = dice_coefficient(obs[j].segmentation, obs[k - 1].segmentation)
                if overlap == 0.0:
                    dropped += 1
                    continue
                cases.append(TestCase(traj.subject_id, list(obs[:k]), obs[j], j, overlap))
    if not cases:
        raise ValueError(
            f"no usable test cases from {len(test_set)} trajectories "
            f"(context sizes {list(context_sizes)}, {dropped} dropped for zero overlap)"
        )
    return cases


def select_by_volume(samples: np.ndarray, truth: np.ndarray) -> int:
    """Index of the hard segmentation whose foreground count is closest to the truth (first on ties)."""
    volumes = (np.asarray(samples) > 0).reshape(len(samples), -1).sum(1)
    return int(np.argmin(np.abs(volumes - int((truth > 0).sum()))))


def _tensors(model: GrowthNP, observations):
    dtype = next(model.parameters()).dtype
    return observations_to_tensors(observations, dtype)


@torch.no_grad()
def _case_state(model: GrowthNP, case: TestCase):
    ci, cs, ct = _tensors(model, case.context)
    ti, ts, tt = _tensors(model, [case.target])
    grids, mu, sigma = model.encode(torch.cat([ci, ti], 1), torch.cat([cs, ts], 1), torch.cat([ct, tt], 1))
    n = case.num_context
    prior = model.aggregate_global(mu[:, :n], sigma[:, :n])
    posterior = model.aggregate_global(mu, sigma)
    skips = model.attend({s: g[:, :n] for s, g in grids.items()}, ct, tt)
    return prior, posterior, skips, tt, ts


@torch.no_grad()
def evaluate_surprise(model: GrowthNP, case: TestCase) -> float:
    prior, posterior, *_ = _case_state(model, case)
    return float(gaussian_kl(posterior, prior)[0])


@torch.no_grad()
def evaluate_case_loss(model: GrowthNP, case: TestCase, loss_config: LossConfig, generator: torch.Generator) -> float:
    """Objective restricted to the target point, z drawn from the posterior."""
    prior, posterior, skips, tt, ts = _case_state(model, case)
    z = posterior.rsample(generator=generator)
    logits = model.decode(z, tt, skips)
    ce = cross_entropy_loss(logits, ts, loss_config.class_weights)
    dice = soft_dice_loss(logits, ts, loss_config.dice_smooth)
    return float(ce + dice + loss_config.beta * gaussian_kl(posterior, prior).mean())


def evaluate_test_loss(
    model: GrowthNP, cases: Sequence[TestCase], loss_config: LossConfig = LossConfig(), seed: int = 0
) -> tuple[float, float]:
    gen = torch.Generator().manual_seed(seed)
    return mean_sem([evaluate_case_loss(model, c, loss_config, gen) for c in cases])


@torch.no_grad()
def _decode_prior_samples(model, prior, skips, tt, n_samples, generator, chunk: int = 50):
    zs = prior.sample(n_samples, generator=generator)[:, 0]  # [S, L]
    out = []
    for start in range(0, n_samples, chunk):
        z = zs[start : start + chunk]
        s = z.shape[0]
        sk = None if skips is None else {k: v.expand(s, *v.shape[1:]) for k, v in skips.items()}
        logits = model.decode(z, tt.expand(s, -1), sk)
        out.append(logits[:, 0].argmax(1).numpy())
    return np.concatenate(out)


@torch.no_grad()
def query_volume_dice(
    model: GrowthNP, case: TestCase, n_samples: int = 100, generator: Optional[torch.Generator] = None
) -> float:
    if n_samples < 1:
        raise ValueError(f"n_samples must be at least 1, got {n_samples}")
    prior, _, skips, tt, _ = _case_state(model, case)
    samples = _decode_prior_samples(model, prior, skips, tt, n_samples, generator)
    truth = case.target.segmentation
    return dice_coefficient(samples[select_by_volume(samples, truth)], truth)


@torch.no_grad()
def mean_prediction(model: GrowthNP, context: Sequence[TimedObservation], query_times) -> np.ndarray:
    """Hard segmentations decoded at z = prior mean; [Q, H, W]."""
    ci, cs, ct = _tensors(model, context)
    grids, prior = model.context_state(ci, cs, ct)
    tq = torch.as_tensor(np.asarray(query_times, dtype=np.float64)[None], dtype=ct.dtype)
    logits = model.decode(prior.mu, tq, model.attend(grids, ct, tq))
    return logits[0].argmax(1).numpy()


@torch.no_grad()
def evaluate_case(
    model: GrowthNP,
    case: TestCase,
    loss_config: LossConfig = LossConfig(),
    n_samples: int = 100,
    generator: Optional[torch.Generator] = None,
) -> CaseResult:
    prior, posterior, skips, tt, ts = _case_state(model, case)
    kl = gaussian_kl(posterior, prior)
    z = posterior.rsample(generator=generator)
    logits = model.decode(z, tt, skips)
    test_loss = (
        cross_entropy_loss(logits, ts, loss_config.class_weights)
        + soft_dice_loss(logits, ts, loss_config.dice_smooth)
        + loss_config.beta * kl.mean()
    )
    truth = case.target.segmentation
    mean_seg = model.decode(prior.mu, tt, skips)[0, 0].argmax(0).numpy()
    samples = _decode_prior_samples(model, prior, skips, tt, n_samples, generator)
    qvd = dice_coefficient(samples[select_by_volume(samples, truth)], truth)
    return CaseResult(
        subject_id=case.subject_id,
        num_context=case.num_context,
        target_index=case.target_index,
        target_time=case.target.time,
        test_loss=float(test_loss),
        surprise=float(kl[0]),
        query_volume_dice=qvd,
        predictive_dice=dice_coefficient(mean_seg, truth),
        true_overlap=case.true_overlap,
    )


def threshold_curve(results: Sequence[CaseResult], thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> list[ThresholdPoint]:
    """Mean scores over cases whose true overlap lies below each threshold."""
    overlap = np.array([r.true_overlap for r in results])
    pred = np.array([r.predictive_dice for r in results])
    qvd = np.array([r.query_volume_dice for r in results])
    curve = []
    for tau in thresholds:
        sel = overlap < tau
        n = int(sel.sum())
        if n == 0:
            curve.append(ThresholdPoint(float(tau), 0, None, None, None))
            continue
        curve.append(
            ThresholdPoint(float(tau), n, float(pred[sel].mean()), float(qvd[sel].mean()), float(overlap[sel].mean()))
        )
    return curve


def aggregate(results: Sequence[CaseResult]) -> dict[str, tuple[float, float]]:
    return {m: mean_sem([getattr(r, m) for r in results]) for m in METRICS}


def evaluate_all(
    model: GrowthNP,
    test_set: Sequence[Trajectory],
    seed: int = 0,
    n_samples: int = 100,
    loss_config: LossConfig = LossConfig(),
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
) -> MetricsReport:
    model.eval()
    cases = build_test_cases(test_set)
    gen = torch.Generator().manual_seed(seed)
    results = [evaluate_case(model, c, loss_config, n_samples, gen) for c in cases]
    return MetricsReport(
        cases=results,
        aggregates=aggregate(results),
        curve=threshold_curve(results, thresholds),
        meta={"seed": seed, "n_samples": n_samples, "n_cases": len(results), "n_subjects": len(test_set)},
    )


# --- report files -------------------------------------------------------------


def _fmt(v):
    if v is None:
        return "NA"
    if isinstance(v, float):
        return repr(v)
    return v


def write_cases_csv(results: Sequence[CaseResult], path: Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CASE_COLUMNS)
        for r in results:
            row = r.row()
            w.writerow([_fmt(row[c]) for c in CASE_COLUMNS])


def read_cases_csv(path: Path) -> list[CaseResult]:
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out.append(
                CaseResult(
                    subject_id=row["subject_id"],
                    num_context=int(row["num_context"]),
                    target_index=int(row["target_index"]),
                    **{k: float(row[k]) for k in ("target_time",) + METRICS},
                )
            )
    return out


CURVE_COLUMNS = ("threshold", "n_cases", "predictive_dice", "query_volume_dice", "predictive_threshold")


def write_curve_csv(curve: Sequence[ThresholdPoint], path: Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CURVE_COLUMNS)
        for p in curve:
            w.writerow([_fmt(getattr(p, c)) for c in CURVE_COLUMNS])


def read_curve_csv(path: Path) -> list[ThresholdPoint]:
    def val(s):
        return None if s == "NA" else float(s)

    with open(path, newline="") as f:
        return [
            ThresholdPoint(
                float(r["threshold"]),
                int(r["n_cases"]),
                val(r["predictive_dice"]),
                val(r["query_volume_dice"]),
                val(r["predictive_threshold"]),
            )
            for r in csv.DictReader(f)
        ]


def write_report(report: MetricsReport, out_dir: Path) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "cases": out_dir / "cases.csv",
        "curve": out_dir / "threshold_curve.csv",
        "summary": out_dir / "summary.json",
    }
    write_cases_csv(report.cases, paths["cases"])
    write_curve_csv(report.curve, paths["curve"])
    summary = {
        "meta": report.meta,
        "metrics": {m: {"mean": mu, "sem": sem} for m, (mu, sem) in report.aggregates.items()},
    }
    paths["summary"].write_text(json.dumps(summary, indent=2, allow_nan=True))
    return paths
