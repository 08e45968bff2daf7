"""Deterministic PNG heatmaps of sampled fields."""

from __future__ import annotations

from pathlib import Path
from typing import Optional

import numpy as np

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .fields import load_field  # noqa: E402

STYLES = {
    # style: (quantity, scaling, colormap)
    "density": ("abs2", "minmax", "magma"),
    "modulus": ("abs", "minmax", "magma"),
    "real": ("real", "symmetric", "RdBu_r"),
    "imag": ("imag", "symmetric", "RdBu_r"),
}
SCALINGS = ("minmax", "symmetric")
_CMAPS = {"minmax": "magma", "symmetric": "RdBu_r"}


def _limits(a: np.ndarray, scaling: str):
    if scaling == "minmax":
        lo, hi = float(np.min(a)), float(np.max(a))
        if hi <= lo:
            return lo, lo + 1.0
        return lo, hi
    if scaling == "symmetric":
        m = float(np.max(np.abs(a)))
        return (-m, m) if m > 0 else (-1.0, 1.0)
    raise ValueError(f"unknown scaling {scaling!r}; expected one of {SCALINGS}")


def render_array(a: np.ndarray, path, scaling: str = "minmax", title: Optional[str] = None,
                 extent=None, cmap: Optional[str] = None, dpi: int = 100) -> Path:
    """Write ``a[ix, iy]`` as a heatmap (x to the right, y up)."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or not np.all(np.isfinite(a)):
        raise ValueError("heatmap input must be a finite 2-d array")
    vmin, vmax = _limits(a, scaling)
    fig, ax = plt.subplots(figsize=(5, 4.2), dpi=dpi)
    im = ax.imshow(a.T, origin="lower", cmap=cmap or _CMAPS[scaling], vmin=vmin, vmax=vmax,
                   extent=extent, interpolation="nearest")
    fig.colorbar(im, ax=ax)
    if title:
        ax.set_title(title, fontsize=9)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path


def render_heatmap(field_path, out_path, style: str = "density") -> Path:
    """Render a field file with one of the fixed ``STYLES``."""
    if style not in STYLES:
        raise ValueError(f"unknown style {style!r}; expected one of {sorted(STYLES)}")
    u = load_field(field_path)
    qty, scaling, cmap = STYLES[style]
    v = u.values
    a = {"abs2": np.abs(v) ** 2, "abs": np.abs(v), "real": v.real, "imag": v.imag}[qty]
    L = u.grid.side_length
    return render_array(a, out_path, scaling, title=f"{style} ({u.bc.tag()}, M={u.grid.points_per_side})",
                        extent=(-L / 2, L / 2, -L / 2, L / 2), cmap=cmap)


def count_zeros(density: np.ndarray, threshold: float = 0.05) -> int:
    """Number of isolated local minima of a density below ``threshold * max``.

    Periodic wrap is assumed (cell fields).
    """
    d = np.asarray(density, dtype=float)
    m = d.max()
    if m <= 0:
        return 0
    is_min = np.ones_like(d, dtype=bool)
    for sx in (-1, 0, 1):
        for sy in (-1, 0, 1):
            if sx or sy:
                is_min &= d <= np.roll(np.roll(d, sx, axis=0), sy, axis=1)
    return int(np.sum(is_min & (d < threshold * m)))
