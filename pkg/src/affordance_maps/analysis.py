"""Affordance-map images and run-metric aggregation.

An affordance map is obtained by probing the vision network at the centre
of every raster cell. The resulting codes are reduced to (at most) three
principal components, min-max normalised per component and written as RGB.
Metric aggregation follows the usual box-plot convention: median,
quartiles (linear interpolation between order statistics) and whiskers
reaching the furthest points within 1.5 IQR of the box.
"""
from __future__ import annotations

import csv
import glob
import os
import re
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import env_sim
from .models import CheckpointError, load_checkpoint

METRIC_FIELDS = ("setting", "seed", "run", "val_nll", "pred_nll", "mean_dist", "success", "fog_touched")
WHISKER_IQR = 1.5


class UnsupportedModelError(ValueError):
    pass


# -- probing and PCA ------------------------------------------------------------

def probe_codes(model, spec, chunk=2048):
    """Context code at every raster cell centre, shaped ``(rows, cols, dim_c)``."""
    centers = spec.cell_centers().reshape(-1, 2)
    views = env_sim.local_views(spec, centers)
    if model.dim_c == 0:
        codes = np.zeros((len(centers), 0))
    else:
        codes = np.concatenate([model.context(views[i:i + chunk]) for i in range(0, len(views), chunk)])
    return codes.reshape(spec.rows, spec.cols, model.dim_c)


@dataclass
class PCABasis:
    mean: np.ndarray
    components: np.ndarray  # (k, dim_c), rows sorted by decreasing variance
    variances: np.ndarray

    @property
    def n_components(self):
        return len(self.components)

    def project(self, codes):
        codes = np.asarray(codes, dtype=np.float64)
        return (codes - self.mean) @ self.components.T


def fit_pca(codes, n_components=3):
    """Principal axes of a code set via the eigen-decomposition of its covariance.

    Each axis is oriented so that its largest-magnitude loading is positive,
    which makes the basis (and every image rendered with it) deterministic.
    """
    x = np.asarray(codes, dtype=np.float64)
    x = x.reshape(-1, x.shape[-1])
    if x.shape[1] == 0:
        raise UnsupportedModelError("cannot run PCA on zero-dimensional codes")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / len(x)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals, kind="stable")[::-1]
    k = min(n_components, x.shape[1])
    comps = evecs[:, order[:k]].T.copy()
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    return PCABasis(mean, comps, np.clip(evals[order[:k]], 0.0, None))


def normalize_components(proj):
    """Min-max scale every component to [0, 1]; flat components become 0.5."""
    proj = np.asarray(proj, dtype=np.float64)
    flat = proj.reshape(-1, proj.shape[-1])
    lo = flat.min(axis=0)
    hi = flat.max(axis=0)
    span = hi - lo
    out = np.full_like(proj, 0.5)
    ok = span > 1e-12 * np.maximum(1.0, np.abs(hi))
    out[..., ok] = (proj[..., ok] - lo[ok]) / span[ok]
    return out


def codes_to_rgb(codes, basis=None):
    """Map ``(..., dim_c)`` codes to RGB in [0, 1].

    One principal component renders as grey levels; with two, the blue
    channel stays at mid level.
    """
    codes = np.asarray(codes, dtype=np.float64)
    if codes.shape[-1] == 0:
        raise UnsupportedModelError("models without context codes have no affordance map")
    basis = basis if basis is not None else fit_pca(codes)
    values = normalize_components(basis.project(codes))
    k = values.shape[-1]
    if k == 1:
        return np.repeat(values, 3, axis=-1)
    rgb = np.full(values.shape[:-1] + (3,), 0.5)
    rgb[..., :k] = values[..., :3]
    return rgb


# -- images -----------------------------------------------------------------------

@dataclass
class AffordanceMapImage:
    """Codes and colours per raster cell; row 0 is the bottom of the arena."""

    codes: np.ndarray
    rgb: np.ndarray
    basis: PCABasis = field(repr=False)

    def pixels(self):
        """8-bit image with the arena's top edge in the first row."""
        return np.round(np.clip(self.rgb[::-1], 0.0, 1.0) * 255.0).astype(np.uint8)

    def save(self, path):
        write_ppm(path, self.pixels())


def write_ppm(path, pixels):
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError("expected an (H, W, 3) image")
    h, w, _ = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


def read_ppm(path):
    with open(path, "rb") as f:
        data = f.read()
    parts = data.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P6" or parts[3] != b"255":
        raise ValueError(f"{path}: not an 8-bit binary PPM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][:w * h * 3], dtype=np.uint8).reshape(h, w, 3)


def _as_model(model_or_path):
    return load_checkpoint(model_or_path) if isinstance(model_or_path, (str, os.PathLike)) else model_or_path


def render_affordance_map(model_or_path, spec, path=None, basis=None):
    """Probe every cell, colour the codes by PCA and optionally write a PPM."""
    model = _as_model(model_or_path)
    if model.dim_c == 0:
        raise UnsupportedModelError("models without context codes have no affordance map")
    codes = probe_codes(model, spec)
    basis = basis if basis is not None else fit_pca(codes)
    image = AffordanceMapImage(codes, codes_to_rgb(codes, basis), basis)
    if path is not None:
        image.save(path)
    return image


_EPOCH_RE = re.compile(r"ckpt_epoch(\d+)\.json$")


def list_checkpoints(directory):
    """``[(epoch, path)]`` for every checkpoint file in ``directory``, by epoch."""
    found = []
    for path in glob.glob(os.path.join(directory, "ckpt_epoch*.json")):
        m = _EPOCH_RE.search(path)
        if m:
            found.append((int(m.group(1)), path))
    return sorted(found)


def render_epoch_series(directory, spec, out_dir=None):
    """Render every checkpoint with one PCA basis fitted on the final epoch.

    Gaps in the epoch numbering and unreadable files are skipped with a
    warning. Returns ``[(epoch, image)]``.
    """
    entries = list_checkpoints(directory)
    if not entries:
        raise FileNotFoundError(f"no checkpoints in {directory}")
    present = {e for e, _ in entries}
    for e in range(entries[-1][0] + 1):
        if e not in present:
            warnings.warn(f"checkpoint for epoch {e} is missing; skipped", stacklevel=2)
    models = []
    for epoch, path in entries:
        try:
            models.append((epoch, load_checkpoint(path)))
        except CheckpointError as exc:
            warnings.warn(f"skipping unreadable checkpoint {path}: {exc}", stacklevel=2)
    if not models:
        raise FileNotFoundError(f"no readable checkpoints in {directory}")
    final = models[-1][1]
    if final.dim_c == 0:
        raise UnsupportedModelError("models without context codes have no affordance map")
    basis = fit_pca(probe_codes(final, spec))
    series = []
    for epoch, model in models:
        path = os.path.join(out_dir, f"map_epoch{epoch:03d}.ppm") if out_dir else None
        series.append((epoch, render_affordance_map(model, spec, path, basis)))
    return series


def separation_along_pc1(codes, inside):
    """Distance between region means on the first principal axis, in pooled std units.

    ``inside`` marks the cells of one region (e.g. obstacle interiors); all
    other cells form the second region.
    """
    codes = np.asarray(codes, dtype=np.float64)
    inside = np.asarray(inside, dtype=bool).reshape(-1)
    flat = codes.reshape(-1, codes.shape[-1])
    if inside.all() or not inside.any():
        raise ValueError("both regions need at least one cell")
    pc1 = fit_pca(flat, 1).project(flat)[:, 0]
    a, b = pc1[inside], pc1[~inside]
    dof = len(a) + len(b) - 2
    pooled = np.sqrt(((len(a) - 1) * a.var(ddof=1 if len(a) > 1 else 0)
                      + (len(b) - 1) * b.var(ddof=1 if len(b) > 1 else 0)) / max(dof, 1))
    gap = abs(a.mean() - b.mean())
    if pooled == 0:
        return np.inf if gap > 0 else 0.0
    return float(gap / pooled)


def obstacle_cells(spec):
    """Cells whose centre lies inside any obstacle."""
    centers = spec.cell_centers()
    mask = np.zeros(centers.shape[:2], dtype=bool)
    c, r = spec.circles("obstacle")
    for center, radius in zip(c, r):
        mask |= ((centers - center) ** 2).sum(-1) < radius ** 2
    return mask


# -- metrics ----------------------------------------------------------------------

@dataclass
class RunRecord:
    setting: str
    seed: int
    run: int
    val_nll: float
    pred_nll: float
    mean_dist: float
    success: bool
    fog_touched: bool

    @property
    def clean_success(self):
        """Reached the target without ever entering fog."""
        return bool(self.success) and not bool(self.fog_touched)


@dataclass
class BoxStats:
    n: int
    median: float
    q1: float
    q3: float
    lower_bound: float
    upper_bound: float
    whisker_low: float
    whisker_high: float
    outliers: list


def box_stats(values):
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ValueError("need at least one value")
    q1, med, q3 = np.quantile(v, [0.25, 0.5, 0.75], method="linear")
    iqr = q3 - q1
    lo, hi = q1 - WHISKER_IQR * iqr, q3 + WHISKER_IQR * iqr
    inside = v[(v >= lo) & (v <= hi)]
    return BoxStats(int(v.size), float(med), float(q1), float(q3), float(lo), float(hi),
                    float(inside.min()), float(inside.max()),
                    [float(x) for x in v[(v < lo) | (v > hi)]])


@dataclass
class SettingSummary:
    setting: str
    n_runs: int
    success_ratio: float
    stats: dict


def aggregate_metrics(records):
    """Per-setting box statistics and success ratios, in first-seen setting order."""
    records = list(records)
    if not records:
        raise ValueError("no run records to aggregate")
    order, groups = [], {}
    for r in records:
        if r.setting not in groups:
            order.append(r.setting)
            groups[r.setting] = []
        groups[r.setting].append(r)
    out = []
    for name in order:
        rs = groups[name]
        stats = {}
        for key in ("val_nll", "pred_nll", "mean_dist"):
            vals = [getattr(r, key) for r in rs if np.isfinite(getattr(r, key))]
            if vals:
                stats[key] = box_stats(vals)
        ratio = float(np.mean([r.clean_success for r in rs]))
        out.append(SettingSummary(name, len(rs), ratio, stats))
    return out


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_metrics_csv(path, records):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for r in records:
            d = asdict(r)
            w.writerow([_fmt(d[k]) for k in METRIC_FIELDS])


def read_metrics_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [
        RunRecord(r["setting"], int(r["seed"]), int(r["run"]), float(r["val_nll"]), float(r["pred_nll"]),
                  float(r["mean_dist"]), r["success"] == "1", r["fog_touched"] == "1")
        for r in rows
    ]


SUMMARY_FIELDS = ("setting", "metric", "n", "median", "q1", "q3", "whisker_low", "whisker_high", "n_outliers",
                  "success_ratio")


def write_summary_csv(path, summary):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SUMMARY_FIELDS)
        for s in summary:
            for metric, b in s.stats.items():
                w.writerow([s.setting, metric, b.n] + [_fmt(x) for x in
                           (b.median, b.q1, b.q3, b.whisker_low, b.whisker_high)]
                           + [len(b.outliers), _fmt(s.success_ratio)])
