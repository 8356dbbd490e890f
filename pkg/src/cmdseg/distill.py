"""Class-confusion knowledge distillation.

Per-class pre-softmax activations are averaged over every pixel of that
class, temperature-softmaxed into a probability row, and the rows of the
two modalities are pulled together with a symmetric KL loss. Classes
without any pixel in a batch are marked absent, never imputed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, stack


@dataclass
class LogitsBatch:
    """Pre-softmax logits (N,C,H,W) with matching integer labels (N,H,W)."""

    logits: Tensor
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        n, c, h, w = self.logits.shape
        if self.labels.shape != (n, h, w):
            raise ValueError(f"labels shape {self.labels.shape} does not match logits {(n, h, w)}")
        if self.labels.min() < 0 or self.labels.max() >= c:
            raise ValueError(f"labels must lie in [0, {c})")

    @property
    def num_classes(self) -> int:
        return self.logits.shape[1]


@dataclass
class ConfusionDistribution:
    """Row-stochastic distilled prediction distributions, one row per class.

    Absent rows (no pixels of that class in the batch) are None.
    """

    rows: list[Tensor | None]
    temperature: float

    @property
    def num_classes(self) -> int:
        return len(self.rows)

    @property
    def present(self) -> list[bool]:
        return [r is not None for r in self.rows]

    def matrix(self) -> np.ndarray:
        """Dense C x C copy with NaN rows for absent classes."""
        c = self.num_classes
        out = np.full((c, c), np.nan)
        for i, r in enumerate(self.rows):
            if r is not None:
                out[i] = r.data
        return out


def distill_class_logits(batch: LogitsBatch) -> tuple[list[Tensor | None], list[bool]]:
    """Average the C-channel logits over all pixels of each class.

    Returns per-class vectors z_c in R^C (None where the class has no
    pixels) plus the presence mask. The average is differentiable:
    gradient 1/|S_c| spreads over member pixels of each channel.
    """
    c = batch.num_classes
    vectors: list[Tensor | None] = []
    for cls in range(c):
        mask = (batch.labels == cls)
        count = int(mask.sum())
        if count == 0:
            vectors.append(None)
            continue
        m = Tensor(mask[:, None, :, :].astype(np.float64))
        z = (batch.logits * m).sum(axes=(0, 2, 3)) * (1.0 / count)
        vectors.append(z)
    return vectors, [v is not None for v in vectors]


def temperature_softmax(z: Tensor, temperature: float) -> Tensor:
    """softmax(z / T), computed with max-subtraction; T=1 is ordinary softmax."""
    if temperature < 1.0:
        raise ValueError("temperature must be >= 1")
    shift = float(z.data.max())  # constant shift, no gradient needed
    e = ((z - shift) * (1.0 / temperature)).exp()
    return e / e.sum()


def distill(batch: LogitsBatch, temperature: float) -> ConfusionDistribution:
    """Full distillation: per-class averages then temperature softmax rows."""
    vectors, _present = distill_class_logits(batch)
    rows = [temperature_softmax(z, temperature) if z is not None else None for z in vectors]
    return ConfusionDistribution(rows=rows, temperature=temperature)


@dataclass
class KdLoss:
    value: Tensor
    mutual_classes: int

    @property
    def degenerate(self) -> bool:
        """True when no class was present in both modalities (value is 0)."""
        return self.mutual_classes == 0


def kd_loss(q_a: ConfusionDistribution, q_b: ConfusionDistribution) -> KdLoss:
    """Symmetric KL between matching confusion rows, averaged over the
    classes present on BOTH sides. Gradient flows into both arguments."""
    if q_a.num_classes != q_b.num_classes:
        raise ValueError("confusion distributions disagree on class count")
    if q_a.temperature != q_b.temperature:
        raise ValueError("confusion distributions disagree on temperature")
    terms: list[Tensor] = []
    for ra, rb in zip(q_a.rows, q_b.rows):
        if ra is None or rb is None:
            continue
        # both ratios computed directly so the loss is bitwise symmetric
        terms.append((ra * (ra / rb).log()).sum() + (rb * (rb / ra).log()).sum())
    if not terms:
        return KdLoss(value=Tensor(0.0), mutual_classes=0)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return KdLoss(value=total * (1.0 / len(terms)), mutual_classes=len(terms))


# -- snapshot text records --------------------------------------------

def format_snapshot(iteration: int, modality: str, q: ConfusionDistribution) -> str:
    """One text record: iteration, modality tag, C, presence mask, row-major probs."""
    c = q.num_classes
    lines = [f"snapshot iter={iteration} modality={modality} C={c} T={q.temperature!r}",
             "present " + " ".join("1" if p else "0" for p in q.present)]
    for row in q.rows:
        if row is None:
            lines.append("absent")
        else:
            lines.append(" ".join(repr(float(v)) for v in row.data))
    return "\n".join(lines) + "\n"


def parse_snapshots(text: str) -> list[dict]:
    """Parse concatenated snapshot records back into dicts with numpy matrices."""
    records = []
    lines = iter(text.splitlines())
    for line in lines:
        if not line.startswith("snapshot "):
            continue
        fields = dict(kv.split("=") for kv in line.split()[1:])
        c = int(fields["C"])
        present = [v == "1" for v in next(lines).split()[1:]]
        mat = np.full((c, c), np.nan)
        for i in range(c):
            row = next(lines)
            if row != "absent":
                mat[i] = [float(v) for v in row.split()]
        records.append({"iteration": int(fields["iter"]), "modality": fields["modality"],
                        "temperature": float(fields["T"]), "present": present, "matrix": mat})
    return records
