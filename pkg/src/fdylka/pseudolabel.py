"""Strong pseudo-labels from ensembled predictions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, InputError
from .model import ClipPrediction

FRAME_THRESHOLD = 0.5
CLIP_THRESHOLD = 0.7


@dataclass
class PseudoLabelGrid:
    clip_id: str
    labels: np.ndarray  # (frames, classes) of 0/1
    source: str = "in_domain"


def ensemble(preds) -> ClipPrediction:
    """Element-wise mean of strong grids and weak vectors."""
    preds = list(preds)
    if not preds:
        raise InputError("cannot ensemble an empty list of predictions")
    strong = np.asarray(preds[0].strong, dtype=np.float64)
    weak = np.asarray(preds[0].weak, dtype=np.float64)
    for p in preds[1:]:
        if np.shape(p.strong) != strong.shape or np.shape(p.weak) != weak.shape:
            raise ContractError(
                f"prediction shapes differ: {np.shape(p.strong)} vs {strong.shape}"
            )
    # averaging offsets from the first member keeps identical inputs exact
    k = len(preds)
    s = strong + sum(np.asarray(p.strong) - strong for p in preds[1:]) / k
    w = weak + sum(np.asarray(p.weak) - weak for p in preds[1:]) / k
    return ClipPrediction(np.array(s, dtype=np.float64), np.array(w, dtype=np.float64), preds[0].clip_id)


def label_in_domain(p: ClipPrediction, threshold: float = FRAME_THRESHOLD) -> PseudoLabelGrid:
    """Cells strictly above the frame threshold become 1."""
    labels = (np.asarray(p.strong) > threshold).astype(np.int8)
    return PseudoLabelGrid(p.clip_id, labels, "in_domain")


def label_external(
    p: ClipPrediction,
    weak_label,
    frame_threshold: float = FRAME_THRESHOLD,
    clip_threshold: float = CLIP_THRESHOLD,
) -> PseudoLabelGrid:
    """Confidence-gated labels for externally weak-labelled clips.

    A cell is 1 only when its frame probability exceeds ``frame_threshold``,
    the clip-level probability of its class exceeds ``clip_threshold`` and
    the clip's given weak label for that class is 1.
    """
    strong = np.asarray(p.strong)
    weak = np.asarray(p.weak)
    wl = np.asarray(weak_label)
    if weak.shape != (strong.shape[1],) or wl.shape != weak.shape:
        raise ContractError(
            f"weak shapes {weak.shape}/{wl.shape} do not match {strong.shape[1]} classes"
        )
    gate = (weak > clip_threshold) & (wl == 1)
    labels = ((strong > frame_threshold) & gate[None, :]).astype(np.int8)
    return PseudoLabelGrid(p.clip_id, labels, "external")
