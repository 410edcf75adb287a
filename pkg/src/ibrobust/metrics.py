"""Perturbation-norm analytics, accuracy drops, target-hit counts, aggregation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatch, SizeMismatch

DEFAULT_PIXEL_THRESHOLD = 1.0 / 255.0  # one 8-bit quantization step


@dataclass(frozen=True)
class NormTriple:
    """Perturbation summary: share of touched pixels, L2 and Linf magnitude.

    ``l0_frac`` counts spatial pixels whose largest per-channel change
    exceeds the threshold, divided by the pixel count (H*W). The norm
    inequality linf <= l2 <= sqrt(element count) * linf holds over the flat
    difference (element count, not pixel count, so RGB inputs satisfy it).
    """

    l0_frac: float
    l2: float
    linf: float


def perturbation_norms(x: np.ndarray, x_adv: np.ndarray,
                       pixel_threshold: float = DEFAULT_PIXEL_THRESHOLD) -> NormTriple:
    x = np.asarray(x)
    x_adv = np.asarray(x_adv)
    if x.shape != x_adv.shape:
        raise ShapeMismatch(f"shapes differ: {x.shape} vs {x_adv.shape}")
    if x.ndim != 3:
        raise ShapeMismatch("perturbation_norms expects a single (C, H, W) image")
    diff = x_adv.astype(np.float64) - x.astype(np.float64)
    per_pixel = np.abs(diff).max(axis=0)
    l0 = float((per_pixel > pixel_threshold).sum() / per_pixel.size)
    flat = diff.reshape(-1)
    l2 = float(np.sqrt((flat * flat).sum()))
    linf = float(np.abs(flat).max()) if flat.size else 0.0
    return NormTriple(l0_frac=l0, l2=l2, linf=linf)


@dataclass(frozen=True)
class RobustnessRow:
    tier: str
    objective: str
    attack: str
    clean_acc: float
    adv_acc: float

    @property
    def drop_points(self) -> float:
        return (self.clean_acc - self.adv_acc) * 100.0


def accuracy_drop(model, clean_set, adv_set, labels, attack: str = "") -> RobustnessRow:
    """Top-1 accuracies on paired clean/adversarial sets and the drop in points."""
    clean_set = np.asarray(clean_set)
    adv_set = np.asarray(adv_set)
    if len(clean_set) != len(adv_set) or len(clean_set) != len(labels):
        raise SizeMismatch(
            f"paired sets differ in size: {len(clean_set)}, {len(adv_set)}, {len(labels)}"
        )
    clean_acc = float((model.predict(clean_set) == labels).mean())
    adv_acc = float((model.predict(adv_set) == labels).mean())
    return RobustnessRow(
        tier=model.spec.tier,
        objective=model.spec.objective,
        attack=attack,
        clean_acc=clean_acc,
        adv_acc=adv_acc,
    )


def target_hits(predictions, target_label: int) -> int:
    predictions = np.asarray(predictions)
    if predictions.size == 0:
        raise SizeMismatch("target_hits needs at least one prediction")
    return int((predictions == target_label).sum())


@dataclass
class NormSummary:
    count: int
    l0_frac_mean: float
    l2_mean: float
    linf_mean: float
    l0_frac_std: float
    l2_std: float
    linf_std: float


def summarize_norms(triples: list[NormTriple]) -> NormSummary | None:
    if not triples:
        return None
    arr = np.array([[t.l0_frac, t.l2, t.linf] for t in triples], dtype=np.float64)
    mean = arr.mean(axis=0)
    std = arr.std(axis=0)
    return NormSummary(len(triples), *(float(v) for v in mean), *(float(v) for v in std))


@dataclass
class ExperimentReport:
    """Aggregated robustness table, norm statistics, bitrates, and hit counts.

    Keys are (tier, objective, attack) triples; ``norms`` holds the
    all-samples average and ``norms_successful`` the successful-only average
    (whether failed attacks belong in norm averages is reported both ways).
    """

    rows: dict[tuple, RobustnessRow] = field(default_factory=dict)
    norms: dict[tuple, NormSummary] = field(default_factory=dict)
    norms_successful: dict[tuple, NormSummary] = field(default_factory=dict)
    bpp: dict[tuple, float] = field(default_factory=dict)
    hits: dict[tuple, int] = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def keyed(d, fn=lambda v: v):
            return {"|".join(k): fn(v) for k, v in sorted(d.items())}

        return {
            "robustness": keyed(
                self.rows,
                lambda r: {
                    "clean_acc": r.clean_acc,
                    "adv_acc": r.adv_acc,
                    "drop_points": r.drop_points,
                },
            ),
            "norms": keyed(self.norms, vars),
            "norms_successful": keyed(self.norms_successful, vars),
            "bpp": keyed(self.bpp),
            "hits": keyed(self.hits),
            "provenance": dict(sorted(self.provenance.items())),
        }


def aggregate(rows: list[RobustnessRow],
              norm_triples: dict[tuple, list[tuple[NormTriple, bool]]],
              bpp: dict[tuple, float] | None = None,
              hits: dict[tuple, int] | None = None,
              provenance: dict | None = None) -> ExperimentReport:
    """Pure aggregation; output is independent of input ordering.

    ``norm_triples`` maps (tier, objective, attack) to a list of
    (NormTriple, success) pairs.
    """
    report = ExperimentReport()
    for row in sorted(rows, key=lambda r: (r.tier, r.objective, r.attack)):
        report.rows[(row.tier, row.objective, row.attack)] = row
    for key in sorted(norm_triples):
        pairs = norm_triples[key]
        summary = summarize_norms([t for t, _ in pairs])
        if summary is not None:
            report.norms[key] = summary
        ok = summarize_norms([t for t, success in pairs if success])
        if ok is not None:
            report.norms_successful[key] = ok
    report.bpp = dict(sorted((bpp or {}).items()))
    report.hits = dict(sorted((hits or {}).items()))
    report.provenance = dict(sorted((provenance or {}).items()))
    return report
