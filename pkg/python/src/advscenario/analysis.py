"""Scenario metrics, effectiveness scoring and collision clustering.

Macroscopic metrics count collisions and lane changes over a batch of
generated scenarios; microscopic metrics give exact action ranges and
fixed-width histograms per role. Collisions are labeled with a geometric
taxonomy and, independently, clustered with PCA + k-means so the two views
can be compared.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .adversarial import ScenarioRecord
from .artifacts import atomic_write, write_csv, write_json
from .errors import DomainError
from .kernel import CollisionEvent, ContactSide

logger = logging.getLogger(__name__)

ROLES = ("agent", "av", "background")
ACCEL_BIN = 0.25
STEER_BIN = 0.05
HIGH_SPEED_CLOSING = 15.0
LOW_SPEED_CLOSING = 3.0
KMEANS_MAX_ITER = 300


@dataclass
class MetricsReport:
    runs: int
    collision_rate_av: float
    collision_rate_other: float
    lane_change_count: int
    mean_r_adv: float
    mean_r_nat: float
    ranges: Dict[str, Dict[str, Tuple[float, float]]] = field(default_factory=dict)
    histograms: pd.DataFrame = field(default_factory=pd.DataFrame)

    def effectiveness(self, w_n: float, w_a: float) -> float:
        """Naturalness is the mean R_nat, adversariality the AV collision rate."""
        return effectiveness(self.mean_r_nat, self.collision_rate_av, w_n, w_a)

    def to_dict(self) -> dict:
        return {
            "runs": self.runs,
            "collision_rate_av": self.collision_rate_av,
            "collision_rate_other": self.collision_rate_other,
            "lane_change_count": self.lane_change_count,
            "mean_r_adv": self.mean_r_adv,
            "mean_r_nat": self.mean_r_nat,
            "ranges": {role: {q: list(r) for q, r in qs.items()} for role, qs in self.ranges.items()},
        }


def _lane_changes(lanes: Sequence[Optional[int]]) -> int:
    known = [lane for lane in lanes if lane is not None]
    return sum(1 for a, b in zip(known, known[1:]) if a != b)


def macro_metrics(records: Sequence[ScenarioRecord]) -> Tuple[float, float, int]:
    """(AV collision rate, other collision rate, total agent lane changes).

    A run that hits the AV under test and another vehicle on the same step
    counts as an AV collision.

    Raises:
        DomainError: If no records are given.
    """
    if not records:
        raise DomainError("macro_metrics needs at least one scenario record")
    av = sum(1 for r in records if r.collided_with_av)
    other = sum(1 for r in records if r.collided_with_other and not r.collided_with_av)
    lane_changes = sum(_lane_changes(r.agent_lanes()) for r in records)
    return av / len(records), other / len(records), lane_changes


def histogram(values: np.ndarray, width: float) -> pd.DataFrame:
    """Counts and densities over bins of the given width aligned at multiples of it."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return pd.DataFrame(columns=["bin_left", "bin_right", "count", "density"])
    lo = math.floor(values.min() / width)
    hi = max(math.floor(values.max() / width) + 1, lo + 1)
    edges = np.arange(lo, hi + 1) * width
    counts, _ = np.histogram(values, bins=edges)
    return pd.DataFrame({
        "bin_left": edges[:-1],
        "bin_right": edges[1:],
        "count": counts,
        "density": counts / (values.size * width),
    })


def micro_metrics(records: Sequence[ScenarioRecord], accel_bin: float = ACCEL_BIN,
                  steer_bin: float = STEER_BIN) -> Tuple[Dict[str, Dict[str, Tuple[float, float]]], pd.DataFrame]:
    """Exact accel/steering ranges and histograms per role.

    Roles without any applied control are left out.
    """
    controls = pd.concat([r.role_controls() for r in records], ignore_index=True) if records else pd.DataFrame()
    ranges: Dict[str, Dict[str, Tuple[float, float]]] = {}
    tables = []
    for role in ROLES:
        if controls.empty:
            break
        rows = controls[controls["role"] == role]
        if rows.empty:
            continue
        ranges[role] = {}
        for quantity, width in (("accel", accel_bin), ("steering", steer_bin)):
            values = rows[quantity].to_numpy(dtype=np.float64)
            ranges[role][quantity] = (float(values.min()), float(values.max()))
            hist = histogram(values, width)
            hist.insert(0, "quantity", quantity)
            hist.insert(0, "role", role)
            tables.append(hist)
    columns = ["role", "quantity", "bin_left", "bin_right", "count", "density"]
    histograms = pd.concat(tables, ignore_index=True) if tables else pd.DataFrame(columns=columns)
    return ranges, histograms


def metrics_report(records: Sequence[ScenarioRecord]) -> MetricsReport:
    rate_av, rate_other, lane_changes = macro_metrics(records)
    ranges, histograms = micro_metrics(records)
    rewards = [step for r in records for step in r.rewards]
    return MetricsReport(
        runs=len(records),
        collision_rate_av=rate_av,
        collision_rate_other=rate_other,
        lane_change_count=lane_changes,
        mean_r_adv=float(np.mean([s["r_adv"] for s in rewards])) if rewards else 0.0,
        mean_r_nat=float(np.mean([s["r_nat"] for s in rewards])) if rewards else 0.0,
        ranges=ranges,
        histograms=histograms,
    )


def effectiveness(naturalness: float, adversariality: float, w_n: float, w_a: float) -> float:
    """Weighted sum w_n * N + w_a * A. Weights are not normalized."""
    return w_n * naturalness + w_a * adversariality


def effectiveness_gain(proposed: float, baseline: float) -> float:
    """Relative improvement of the proposed score over the baseline.

    Raises:
        DomainError: If the baseline score is zero.
    """
    if baseline == 0:
        raise DomainError("Effectiveness gain is undefined for a zero baseline score")
    return (proposed - baseline) / abs(baseline)


@dataclass
class PcaResult:
    scores: np.ndarray
    basis: np.ndarray
    mean: np.ndarray
    explained_variance: np.ndarray
    explained_variance_ratio: np.ndarray

    def reconstruct(self, scores: Optional[np.ndarray] = None) -> np.ndarray:
        scores = self.scores if scores is None else scores
        return scores @ self.basis.T + self.mean


def pca_reduce(features: np.ndarray, k: int = 2) -> PcaResult:
    """Project mean-centered rows onto the top-k covariance eigenvectors.

    Each basis vector has its first non-negligible component positive.

    Raises:
        DomainError: If k is outside [1, n_rows] or [1, n_columns].
    """
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    n, d = x.shape
    if not 1 <= k <= min(n, d):
        raise DomainError(f"PCA needs 1 <= k <= min(rows, columns); got k={k} for a {n}x{d} matrix")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / max(n - 1, 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:k]
    basis = eigvecs[:, order]
    for j in range(k):
        pivot = np.flatnonzero(np.abs(basis[:, j]) > 1e-12)
        if pivot.size and basis[pivot[0], j] < 0:
            basis[:, j] = -basis[:, j]
    variance = np.clip(eigvals[order], 0.0, None)
    total = np.clip(eigvals, 0.0, None).sum()
    ratio = variance / total if total > 0 else np.zeros(k)
    return PcaResult(centered @ basis, basis, mean, variance, ratio)


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    iterations: int
    inertia_history: List[float]


def _sq_distances(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    chosen = [int(rng.integers(n))]
    closest = ((x - x[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=closest / total))
        else:
            remaining = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(remaining))
        chosen.append(nxt)
        closest = np.minimum(closest, ((x - x[nxt]) ** 2).sum(axis=1))
    return x[chosen].copy()


def kmeans_cluster(scores: np.ndarray, k: int, seed: int = 0, max_iter: int = KMEANS_MAX_ITER) -> KMeansResult:
    """k-means++ seeding then Lloyd iterations until assignments stop changing.

    An emptied cluster is re-seeded at the point farthest from its centroid.

    Raises:
        DomainError: If there are fewer rows than clusters or k < 1.
    """
    x = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    n = len(x)
    if k < 1 or n < k:
        raise DomainError(f"k-means needs 1 <= K <= n; got K={k} for {n} point(s)")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(x, k, rng)
    labels = _sq_distances(x, centroids).argmin(axis=1)
    history: List[float] = []
    iterations = 0
    for iterations in range(1, max_iter + 1):
        for j in range(k):
            members = labels == j
            if members.any():
                centroids[j] = x[members].mean(axis=0)
        for j in range(k):
            if not (labels == j).any():
                dist = ((x - centroids[labels]) ** 2).sum(axis=1)
                sizes = np.bincount(labels, minlength=k)
                dist[sizes[labels] <= 1] = -1.0
                far = int(dist.argmax())
                centroids[j] = x[far]
                labels[far] = j
        new = _sq_distances(x, centroids).argmin(axis=1)
        history.append(float(((x - centroids[new]) ** 2).sum()))
        if np.array_equal(new, labels):
            break
        labels = new
    return KMeansResult(labels, centroids, history[-1], iterations, history)


class CollisionLabel(IntEnum):
    REAR_END = 0
    SIDE_SWIPE_LEFT = 1
    SIDE_SWIPE_RIGHT = 2
    FRONT_CUT_IN = 3
    BRAKING_FRONT_IMPACT = 4
    SIDE_CONTACT = 5
    HEAD_ON = 6
    HIGH_SPEED_REAR = 7
    T_SHAPED = 8
    REAR_TO_REAR = 9

    @property
    def counter_intuitive(self) -> bool:
        return self >= CollisionLabel.HIGH_SPEED_REAR

    @property
    def semantic_name(self) -> str:
        return self.name.lower().replace("_", "-")


_SIDES = (ContactSide.LEFT, ContactSide.RIGHT)


def closing_speed(event: CollisionEvent) -> float:
    """Approach speed along the line between the two centers."""
    p = np.asarray(event.relative_position, dtype=np.float64)
    v = np.asarray(event.relative_velocity, dtype=np.float64)
    dist = float(np.linalg.norm(p))
    if dist == 0.0:
        return float(np.linalg.norm(v))
    return max(-float(p @ v) / dist, 0.0)


def _rear_contact(event: CollisionEvent) -> ContactSide:
    """Contact side of whichever vehicle is behind along the mean heading."""
    lat, lon = event.relative_position
    half = event.relative_heading / 2
    ahead = lon * math.cos(half) + lat * math.sin(half)
    if ahead == 0.0:
        first_behind = event.ids[0] < event.ids[1]
    else:
        first_behind = ahead > 0
    return event.contact_sides[0] if first_behind else event.contact_sides[1]


def label_collision_type(event: CollisionEvent) -> CollisionLabel:
    """Geometric collision type from contact sides, heading bucket and closing speed.

    Symmetric in the two vehicles: an event and its swapped view get the
    same label.
    """
    sides = set(event.contact_sides)
    theta = abs(event.relative_heading)
    if sides == {ContactSide.REAR}:
        return CollisionLabel.REAR_TO_REAR
    if theta >= 3 * math.pi / 4:
        return CollisionLabel.HEAD_ON
    if theta >= math.pi / 4:
        if ContactSide.FRONT in sides and sides & set(_SIDES):
            return CollisionLabel.T_SHAPED
        return CollisionLabel.SIDE_CONTACT
    if sides == {ContactSide.FRONT, ContactSide.REAR}:
        closing = closing_speed(event)
        if closing > HIGH_SPEED_CLOSING:
            return CollisionLabel.HIGH_SPEED_REAR
        if closing < LOW_SPEED_CLOSING:
            return CollisionLabel.BRAKING_FRONT_IMPACT
        return CollisionLabel.REAR_END
    if sides == {ContactSide.LEFT, ContactSide.RIGHT}:
        if _rear_contact(event) is ContactSide.LEFT:
            return CollisionLabel.SIDE_SWIPE_LEFT
        return CollisionLabel.SIDE_SWIPE_RIGHT
    if ContactSide.FRONT in sides and sides & set(_SIDES):
        return CollisionLabel.FRONT_CUT_IN
    return CollisionLabel.SIDE_CONTACT


@dataclass
class ClusterLabelReport:
    events: pd.DataFrame
    label_ratios: Dict[int, float]
    cross_table: pd.DataFrame

    @property
    def counter_intuitive_share(self) -> float:
        return sum(ratio for label, ratio in self.label_ratios.items()
                   if CollisionLabel(label).counter_intuitive)

    @property
    def empty(self) -> bool:
        return self.events.empty


EVENT_COLUMNS = ["run", "step", "other", "with_av", "label", "name", "counter_intuitive", "cluster"]


def agent_collisions(records: Sequence[ScenarioRecord]) -> List[Tuple[ScenarioRecord, CollisionEvent]]:
    """Agent collisions, each expressed in the agent's body frame."""
    found = []
    for record in records:
        for event in record.collisions:
            if not event.involves(record.agent_id):
                continue
            if event.ids[0] != record.agent_id:
                event = event.swapped()
            found.append((record, event))
    return found


def cluster_label_report(records: Sequence[ScenarioRecord], k: int = 10, seed: int = 0,
                         pca_k: int = 2) -> ClusterLabelReport:
    """Geometric labels plus PCA + k-means clusters for every agent collision.

    K and the PCA dimension shrink to the number of events when there are
    fewer events than requested.
    """
    pairs = agent_collisions(records)
    if not pairs:
        logger.info("No agent collisions to cluster")
        return ClusterLabelReport(pd.DataFrame(columns=EVENT_COLUMNS), {int(label): 0.0 for label in CollisionLabel},
                                  pd.DataFrame())
    features = np.stack([event.features() for _, event in pairs])
    labels = [label_collision_type(event) for _, event in pairs]
    n = len(pairs)
    if n < k:
        logger.warning("Only %d collision(s); clustering with K=%d instead of %d", n, n, k)
    pca = pca_reduce(features, min(pca_k, n, features.shape[1]))
    clusters = kmeans_cluster(pca.scores, min(k, n), seed)
    events = pd.DataFrame({
        "run": [r.run for r, _ in pairs],
        "step": [e.step_index for _, e in pairs],
        "other": [e.ids[1] for _, e in pairs],
        "with_av": [e.ids[1] == r.av_id for r, e in pairs],
        "label": [int(label) for label in labels],
        "name": [label.semantic_name for label in labels],
        "counter_intuitive": [label.counter_intuitive for label in labels],
        "cluster": clusters.assignments,
    })
    for j in range(pca.scores.shape[1]):
        events[f"pc{j + 1}"] = pca.scores[:, j]
    counts = events["label"].value_counts()
    ratios = {int(label): float(counts.get(int(label), 0)) / n for label in CollisionLabel}
    cross = pd.crosstab(events["cluster"], events["label"])
    return ClusterLabelReport(events, ratios, cross)


def _fmt_range(r: Optional[Tuple[float, float]]) -> str:
    return "n/a" if r is None else f"[{r[0]:.2f}, {r[1]:.2f}]"


def format_report(report: MetricsReport, title: str = "Scenario metrics") -> str:
    lines = [
        title,
        f"  runs                     {report.runs}",
        f"  collision rate (AV)      {report.collision_rate_av:.2%}",
        f"  collision rate (others)  {report.collision_rate_other:.2%}",
        f"  lane changes             {report.lane_change_count}",
        f"  mean R_adv / R_nat       {report.mean_r_adv:.4f} / {report.mean_r_nat:.4f}",
    ]
    for role, quantities in report.ranges.items():
        lines.append(f"  {role:<10} accel {_fmt_range(quantities.get('accel'))} m/s^2, "
                     f"steering {_fmt_range(quantities.get('steering'))} rad")
    return "\n".join(lines)


def compare_reports(proposed: MetricsReport, baseline: MetricsReport,
                    weights: Optional[Tuple[float, float]] = None,
                    names: Tuple[str, str] = ("proposed", "baseline")) -> str:
    """Side-by-side summary of two batches; effectiveness rows only when weights are given."""
    width = max(len(names[0]), len(names[1]), 18)
    rows = [
        ("collision rate (AV)", f"{proposed.collision_rate_av:.2%}", f"{baseline.collision_rate_av:.2%}"),
        ("collision rate (others)", f"{proposed.collision_rate_other:.2%}", f"{baseline.collision_rate_other:.2%}"),
        ("lane changes", str(proposed.lane_change_count), str(baseline.lane_change_count)),
        ("mean R_nat", f"{proposed.mean_r_nat:.4f}", f"{baseline.mean_r_nat:.4f}"),
    ]
    for role in ROLES:
        if role in proposed.ranges or role in baseline.ranges:
            for quantity in ("accel", "steering"):
                rows.append((f"{role} {quantity}",
                             _fmt_range(proposed.ranges.get(role, {}).get(quantity)),
                             _fmt_range(baseline.ranges.get(role, {}).get(quantity))))
    if weights is not None:
        e_p, e_b = proposed.effectiveness(*weights), baseline.effectiveness(*weights)
        rows.append(("effectiveness", f"{e_p:.4f}", f"{e_b:.4f}"))
        if e_b != 0:
            rows.append(("effectiveness gain", f"{effectiveness_gain(e_p, e_b):+.2%}", ""))
    lines = [f"{'metric':<26}{names[0]:>{width}}{names[1]:>{width}}"]
    lines += [f"{label:<26}{a:>{width}}{b:>{width}}" for label, a, b in rows]
    return "\n".join(lines)


def write_analysis(out_dir: Union[str, Path], report: MetricsReport, clusters: ClusterLabelReport,
                   config_hash: str, weights: Optional[Tuple[float, float]] = None) -> List[Path]:
    """metrics.json, summary.txt, histograms.csv, collisions.csv and cluster_labels.csv."""
    out = Path(out_dir)
    body = report.to_dict()
    body["config_hash"] = config_hash
    body["label_ratios"] = {str(k): v for k, v in clusters.label_ratios.items()}
    body["counter_intuitive_share"] = clusters.counter_intuitive_share
    summary = format_report(report)
    if weights is not None:
        body["effectiveness"] = report.effectiveness(*weights)
        summary += f"\n  effectiveness            {body['effectiveness']:.4f}"
    paths = [
        write_json(out / "metrics.json", body),
        write_csv(out / "histograms.csv", report.histograms),
        write_csv(out / "collisions.csv", clusters.events),
        write_csv(out / "cluster_labels.csv", clusters.cross_table.reset_index()),
    ]
    paths.append(atomic_write(out / "summary.txt", summary + "\n"))
    return paths
