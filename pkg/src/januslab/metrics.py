"""View-consistency metrics: adjacent-view perceptual-proxy distance,
a mechanical multi-face (Janus) detector, and a per-azimuth alignment curve.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .prompt import BACK, FRONT, SIDE, TOP, ViewBinConfig
from .render import ImageBuffer
from .scoremodel import TemplateSet


def _data(img) -> np.ndarray:
    return img.data if isinstance(img, ImageBuffer) else np.asarray(img, dtype=np.float64)


def _downsample2(a: np.ndarray) -> np.ndarray:
    h, w = a.shape[:2]
    return a[:h - h % 2, :w - w % 2].reshape(h // 2, 2, w // 2, 2, -1).mean(axis=(1, 3))


def pyramid_mad(a, b, levels: int = 3) -> float:
    """Mean absolute difference averaged over a blur-and-downsample pyramid.

    Symmetric, non-negative, and zero iff the images are equal; the coarse
    levels make it respond to structure rather than per-pixel noise, which
    is the role LPIPS plays at full scale.
    """
    x, y = _data(a), _data(b)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    total = 0.0
    for lvl in range(levels):
        total += float(np.abs(x - y).mean())
        if lvl < levels - 1:
            if min(x.shape[0], x.shape[1]) < 2:
                total += (levels - 1 - lvl) * float(np.abs(x - y).mean())
                break
            x, y = _downsample2(x), _downsample2(y)
    return total / levels


def mean_abs(a, b) -> float:
    x, y = _data(a), _data(b)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    return float(np.abs(x - y).mean())


_DISTANCES = {"pyramid_mad": pyramid_mad, "mean_abs": mean_abs}


def register_distance(name: str, fn) -> None:
    _DISTANCES[name] = fn


def get_distance(name: str):
    try:
        return _DISTANCES[name]
    except KeyError:
        raise ValueError(f"unknown distance {name!r}; "
                         f"known: {sorted(_DISTANCES)}")


def adjacent_consistency(images, distance=pyramid_mad) -> float:
    """Mean distance over all adjacent pairs of the cyclic turntable."""
    if len(images) < 2:
        raise ValueError("need at least 2 images")
    n = len(images)
    return sum(distance(images[k], images[(k + 1) % n]) for k in range(n)) / n


def _ncc(a: np.ndarray, b: np.ndarray) -> float:
    x = a.reshape(-1) - a.mean()
    y = b.reshape(-1) - b.mean()
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx < 1e-12 or ny < 1e-12:
        return 0.0
    return float(x @ y / (nx * ny))


def turntable_azimuths_deg(n_views: int) -> np.ndarray:
    return np.arange(n_views) * 360.0 / n_views


def janus_score(images, templates: TemplateSet, match_threshold: float = 0.6,
                bin_cfg: ViewBinConfig | None = None,
                elevation_deg: float = 15.0) -> tuple:
    """Count view bins whose renders show the canonical face.

    Per azimuth bin, the detector takes the max normalized cross-correlation
    between each image's face-patch region and the canonical template's face
    patch, both measured relative to a featureless baseline (the clean
    template of the bin opposite the canonical one) so the shared silhouette
    does not register as a face. Success means the face appears in the
    canonical bin and nowhere else.
    """
    bin_cfg = bin_cfg or ViewBinConfig()
    canon_patch = templates.patch(templates.mean(templates.canonical, ()))
    opposite = {FRONT: BACK, BACK: FRONT, SIDE: FRONT, TOP: FRONT}
    baseline = templates.patch(
        templates.mean(opposite[templates.canonical], ()))
    signature = canon_patch - baseline
    azs = turntable_azimuths_deg(len(images))
    best = {}
    for az, img in zip(azs, images):
        d = _data(img)
        if d.shape != templates.image_shape:
            raise ValueError("image/template shape mismatch")
        bin_name = bin_cfg.assign(float(az), elevation_deg)
        c = _ncc(templates.patch(d) - baseline, signature)
        best[bin_name] = max(best.get(bin_name, -1.0), c)
    face_bins = {b for b, c in best.items() if c > match_threshold}
    success = face_bins == {templates.canonical}
    return len(face_bins), success


def template_similarity_curve(images, templates: TemplateSet, bin_name: str,
                              distance=pyramid_mad, words=()) -> np.ndarray:
    """Similarity (negative distance) of every turntable image to one bin's
    template under the given active words; a well-formed scene peaks inside
    that bin."""
    tpl = templates.mean(bin_name, words)
    return np.array([-distance(img, tpl) for img in images])


def similarity_peak_bin(curve, bin_cfg: ViewBinConfig | None = None,
                        elevation_deg: float = 15.0) -> str:
    """Bin-granularity location of a similarity curve's maximum: the view
    bin with the highest mean similarity. Robust to per-azimuth noise that
    makes the raw argmax flicker between near-tied neighbors."""
    bin_cfg = bin_cfg or ViewBinConfig()
    azs = turntable_azimuths_deg(len(curve))
    sums = {}
    for az, val in zip(azs, curve):
        b = bin_cfg.assign(float(az), elevation_deg)
        sums.setdefault(b, []).append(val)
    return max(sums, key=lambda b: float(np.mean(sums[b])))


def view_alignment_curve(images, templates: TemplateSet,
                         bin_cfg: ViewBinConfig | None = None,
                         elevation_deg: float = 15.0,
                         distance=pyramid_mad) -> np.ndarray:
    """Similarity (negative distance) of each turntable image to the clean
    template of its own view bin."""
    bin_cfg = bin_cfg or ViewBinConfig()
    azs = turntable_azimuths_deg(len(images))
    out = np.empty(len(images))
    for i, (az, img) in enumerate(zip(azs, images)):
        bin_name = bin_cfg.assign(float(az), elevation_deg)
        if (bin_name, ()) not in templates.templates:
            raise ValueError(f"no template for bin {bin_name!r}")
        out[i] = -distance(img, templates.mean(bin_name, ()))
    return out


@dataclass
class MetricReport:
    run_id: str
    a_dist: float
    janus_bin_count: int
    janus_success: bool
    alignment_curve: np.ndarray
    per_bin_alignment: dict

    def summary_row(self) -> list:
        row = [self.run_id, repr(self.a_dist), self.janus_bin_count,
               int(self.janus_success)]
        for name in sorted(self.per_bin_alignment):
            row.append(repr(self.per_bin_alignment[name]))
        return row


def evaluate_turntable(run_id: str, images, templates: TemplateSet,
                       bin_cfg: ViewBinConfig | None = None,
                       elevation_deg: float = 15.0,
                       distance=pyramid_mad,
                       match_threshold: float = 0.6) -> MetricReport:
    bin_cfg = bin_cfg or ViewBinConfig()
    a_dist = adjacent_consistency(images, distance)
    bin_count, success = janus_score(images, templates, match_threshold,
                                     bin_cfg, elevation_deg)
    curve = view_alignment_curve(images, templates, bin_cfg, elevation_deg, distance)
    azs = turntable_azimuths_deg(len(images))
    per_bin = {}
    for az, sim in zip(azs, curve):
        per_bin.setdefault(bin_cfg.assign(float(az), elevation_deg), []).append(sim)
    per_bin = {k: float(np.mean(v)) for k, v in per_bin.items()}
    return MetricReport(run_id, a_dist, bin_count, success, curve, per_bin)


def write_report_csv(reports, path) -> None:
    reports = list(reports)
    bins = sorted(reports[0].per_bin_alignment) if reports else []
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["run_id", "a_dist", "janus_bin_count", "janus_success"]
                        + [f"align_{b.replace(' ', '_')}" for b in bins])
        for r in reports:
            writer.writerow(r.summary_row())


def write_curve_csv(report: MetricReport, path) -> None:
    azs = turntable_azimuths_deg(len(report.alignment_curve))
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["azimuth_deg", "similarity"])
        for az, s in zip(azs, report.alignment_curve):
            writer.writerow([repr(float(az)), repr(float(s))])
