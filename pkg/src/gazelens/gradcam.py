"""Grad-CAM heatmaps for the MiniVgg classifier.

The score for "relevant" is the pre-sigmoid logit and the score for
"irrelevant" is its negation. Channel weights are the spatial means of the
score's gradient at a conv block's output; the map is the ReLU of the
weighted channel sum, upsampled bilinearly and scaled to max 1.

Per-class averages can be taken in two ways. With ``target="output"`` every
image is explained through the network's single output, the relevance
score, so an irrelevant image shows where its relevant-looking evidence
sits. With ``target="label"`` each image is explained through its own
class score.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .core import RelevanceLabel
from .errors import DimMismatch, EmptySet, ShapeMismatch, StorageError, UntrainedModel
from .nn import Network
from .render import ScanpathImage, image_to_array, write_png


@dataclass(frozen=True)
class Heatmap:
    values: np.ndarray  # (h, w) in [0, 1]
    trial_id: str = ""

    @property
    def h(self) -> int:
        return self.values.shape[0]

    @property
    def w(self) -> int:
        return self.values.shape[1]


def normalize(values: np.ndarray) -> np.ndarray:
    """Scale so the maximum is 1; an all-zero map stays zero."""
    v = np.maximum(np.asarray(values, dtype=np.float64), 0.0)
    m = v.max() if v.size else 0.0
    return v / m if m > 0 else np.zeros_like(v)


def bilinear_upsample(m: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize with edge clamping."""
    h, w = m.shape

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    r0, r1, fr = axis(h, out_h)
    c0, c1, fc = axis(w, out_w)
    rows = m[r0] * (1 - fr)[:, None] + m[r1] * fr[:, None]
    return rows[:, c0] * (1 - fc)[None, :] + rows[:, c1] * fc[None, :]


def _target_sign(target) -> float:
    if isinstance(target, (int, np.integer)):
        return 1.0 if int(target) == 1 else -1.0
    return 1.0 if RelevanceLabel(target) is RelevanceLabel.RELEVANT else -1.0


def raw_gradcam(model: Network, X: np.ndarray, targets: Sequence, block: int = -1) -> np.ndarray:
    """Rectified, unnormalized maps at the chosen block's output resolution, shape (N, h, w)."""
    if not getattr(model, "trained", False):
        raise UntrainedModel("Grad-CAM needs a trained model")
    if not hasattr(model, "block_ends"):
        raise ShapeMismatch("model has no conv blocks")
    X = np.asarray(X, dtype=model.dtype)
    if X.ndim == 3:
        X = X[None]
    split = model.block_ends[block] + 1
    acts, _ = model.forward(X, stop=split)
    head = model.layers[split:-1]  # up to the logit, sigmoid excluded
    h = acts
    caches = []
    for layer in head:
        h, c = layer.forward(h, train=False)
        caches.append(c)
    signs = np.array([_target_sign(t) for t in targets], dtype=model.dtype).reshape(-1, 1)
    if len(signs) != len(X):
        raise ShapeMismatch(f"{len(X)} images but {len(signs)} targets")
    d = np.broadcast_to(signs, h.shape).astype(model.dtype)
    for layer, c in zip(reversed(head), reversed(caches)):
        d, _ = layer.backward(c, d)
    alpha = d.astype(np.float64).mean(axis=(2, 3))  # (N, K)
    cam = np.einsum("nk,nkhw->nhw", alpha, acts.astype(np.float64))
    return np.maximum(cam, 0.0)


def gradcam_batch(model: Network, X: np.ndarray, targets: Sequence, block: int = -1,
                  upsample: bool = True, trial_ids: Optional[Sequence[str]] = None) -> list[Heatmap]:
    raw = raw_gradcam(model, X, targets, block)
    H, W = np.asarray(X).shape[-2:]
    ids = list(trial_ids) if trial_ids is not None else [""] * len(raw)
    out = []
    for m, tid in zip(raw, ids):
        if upsample:
            m = bilinear_upsample(m, H, W)
        out.append(Heatmap(normalize(m), tid))
    return out


def gradcam(model: Network, image: Union[ScanpathImage, np.ndarray], target, block: int = -1,
            upsample: bool = True, trial_id: str = "") -> Heatmap:
    """Heatmap of the image regions driving ``target`` (a RelevanceLabel or 0/1)."""
    x = image_to_array(image, model.dtype.type) if isinstance(image, ScanpathImage) else np.asarray(image)
    return gradcam_batch(model, x[None] if x.ndim == 3 else x, [target], block, upsample, [trial_id])[0]


def average_heatmap(maps: Iterable[Heatmap], trial_id: str = "average") -> Heatmap:
    maps = list(maps)
    if not maps:
        raise EmptySet("no heatmaps to average")
    shape = maps[0].values.shape
    for m in maps:
        if m.values.shape != shape:
            raise DimMismatch(f"heatmap {m.trial_id!r} is {m.values.shape}, expected {shape}")
    return Heatmap(normalize(np.mean(np.stack([m.values for m in maps]), axis=0)), trial_id)


TARGET_MODES = ("output", "label")


def class_heatmaps(model: Network, X: np.ndarray, labels: Sequence, target: str = "output", block: int = -1,
                   trial_ids: Optional[Sequence[str]] = None,
                   batch_size: int = 64) -> tuple[list[Heatmap], dict[RelevanceLabel, Heatmap]]:
    """Per-image heatmaps and the average heatmap of each class present in ``labels``."""
    if target not in TARGET_MODES:
        raise ValueError(f"target must be one of {TARGET_MODES}, got {target!r}")
    labs = [RelevanceLabel.RELEVANT if _target_sign(v) > 0 else RelevanceLabel.IRRELEVANT for v in labels]
    ids = list(trial_ids) if trial_ids is not None else [""] * len(labs)
    maps: list[Heatmap] = []
    for a in range(0, len(labs), batch_size):
        tg = [1 if target == "output" else lab for lab in labs[a:a + batch_size]]
        maps += gradcam_batch(model, X[a:a + batch_size], tg, block, trial_ids=ids[a:a + batch_size])
    averages = {}
    for lab in (RelevanceLabel.RELEVANT, RelevanceLabel.IRRELEVANT):
        sel = [m for m, v in zip(maps, labs) if v is lab]
        if sel:
            averages[lab] = average_heatmap(sel, f"average-{lab.value}")
    return maps, averages


def ramp_colors(values: np.ndarray) -> np.ndarray:
    """Blue (0) to red (1) colour ramp, float RGB in [0, 255]."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.stack([255.0 * v, np.zeros_like(v), 255.0 * (1.0 - v)], axis=-1)


def overlay(img: ScanpathImage, hm: Heatmap, alpha: float = 0.5) -> ScanpathImage:
    if (img.h, img.w) != hm.values.shape:
        raise DimMismatch(f"image {img.h}x{img.w} vs heatmap {hm.h}x{hm.w}")
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must be in [0, 1]")
    blend = (1 - alpha) * img.array().astype(np.float64) + alpha * ramp_colors(hm.values)
    return ScanpathImage.from_array(np.floor(blend + 0.5).astype(np.uint8))


def heatmap_image(hm: Heatmap) -> ScanpathImage:
    return ScanpathImage.from_array(np.floor(ramp_colors(hm.values) + 0.5).astype(np.uint8))


def write_heatmap_png(hm: Heatmap, path) -> None:
    write_png(heatmap_image(hm), path)


REGIONS = ("left", "center", "right", "top", "middle", "bottom")


def region_mass(hm: Heatmap) -> dict[str, float]:
    """Fraction of total heat in each vertical and horizontal third."""
    v = hm.values
    total = float(v.sum())
    h, w = v.shape
    cb = [0, w // 3, (2 * w) // 3, w]
    rb = [0, h // 3, (2 * h) // 3, h]
    if total <= 0:
        return {k: 0.0 for k in REGIONS}
    cols = [float(v[:, cb[i]:cb[i + 1]].sum()) / total for i in range(3)]
    rows = [float(v[rb[i]:rb[i + 1], :].sum()) / total for i in range(3)]
    return dict(zip(REGIONS, cols + rows))


def write_region_mass_csv(path, entries: Iterable[tuple[str, Heatmap]]) -> None:
    """One row per (name, heatmap) with its six region-mass fractions."""
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("name",) + REGIONS)
            for name, hm in entries:
                rm = region_mass(hm)
                w.writerow([name] + [repr(rm[k]) for k in REGIONS])
    except OSError as e:
        raise StorageError(f"cannot write region summary {path}: {e}") from e
