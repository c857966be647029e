"""Equirectangular projection geometry and lateral distortion measures.

An ERP plane of width ``W`` wraps a sphere of radius ``R = W / 2pi``.  A
latitude row at axial height ``h`` above the (south) pole is a circle of
radius ``sqrt(h (W/pi - h))``; sampled with ``n`` pixels its pixel pitch is
that circumference over ``n``, while the ERP row always has pitch ``W / n``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class ErpSpec:
    W: float
    n: int
    h: float
    n_prime: float = 1.0

    def __post_init__(self):
        if self.n < 1:
            raise DomainError(f"n must be >= 1, got {self.n}")
        if not 0 <= self.n_prime <= self.n:
            raise DomainError(f"n_prime must lie in [0, n], got {self.n_prime}")
        _check_height(self.W, self.h)


@dataclass(frozen=True)
class SphereDir:
    longitude: float
    latitude: float


def _check_height(W: float, h) -> None:
    h = np.asarray(h, dtype=float)
    if W <= 0:
        raise DomainError(f"W must be positive, got {W}")
    if np.any(h < 0) or np.any(h > W / math.pi):
        raise DomainError(f"h must lie in [0, W/pi] = [0, {W / math.pi}]")


def pixel_width(spec: ErpSpec) -> float:
    """Sphere-row pixel pitch ``(2pi/n) sqrt(h (W/pi - h))``."""
    return _pixel_width(spec.W, spec.n, spec.h)


def _pixel_width(W, n, h):
    _check_height(W, h)
    # max() guards the tiny negative products float rounding gives at the poles
    return (2.0 * np.pi / n) * np.sqrt(np.maximum(h * (W / np.pi - h), 0.0))


def distortion_coefficient(spec: ErpSpec) -> float:
    """Lateral distortion ``(n'/n) (W - 2pi sqrt(h (W/pi - h)))`` across ``n'`` pixels."""
    return _distortion(spec.W, spec.n, spec.n_prime, spec.h)


def _distortion(W, n, n_prime, h):
    _check_height(W, h)
    return (n_prime / n) * (W - 2.0 * np.pi * np.sqrt(np.maximum(h * (W / np.pi - h), 0.0)))


def sphere_row_width(W: float, n: int, h: float) -> float:
    """Independent 3-D evaluation: latitude-circle circumference over ``n``.

    Places the sphere centre at height ``R`` above the pole and measures the
    circle cut at height ``h`` by Pythagoras, without using the ERP formula.
    """
    R = W / (2.0 * math.pi)
    radius = math.sqrt(max(R * R - (R - h) ** 2, 0.0))
    return 2.0 * math.pi * radius / n


# -- pixel <-> direction mappings ------------------------------------------

def erp_to_dir(u, v, W_px: int, H_px: int) -> SphereDir:
    if not (0 <= u < W_px and 0 <= v < H_px):
        raise DomainError(f"pixel ({u}, {v}) outside {W_px}x{H_px}")
    lon, lat = erp_to_dir_grid(np.asarray(u, float), np.asarray(v, float), W_px, H_px)
    return SphereDir(float(lon), float(lat))


def erp_to_dir_grid(u: np.ndarray, v: np.ndarray, W_px: int, H_px: int):
    """Vectorised pixel-centre mapping: returns ``(longitude, latitude)`` arrays."""
    lon = 2.0 * np.pi * (u + 0.5) / W_px - np.pi
    lat = np.pi / 2.0 - np.pi * (v + 0.5) / H_px
    return lon, lat


def dir_to_erp(d: SphereDir, W_px: int, H_px: int) -> tuple[float, float]:
    """Continuous inverse of :func:`erp_to_dir` (pixel coordinates, not rounded)."""
    u = (d.longitude + np.pi) * W_px / (2.0 * np.pi) - 0.5
    v = (np.pi / 2.0 - d.latitude) * H_px / np.pi - 0.5
    return float(u), float(v)


def focal_length(W_px: int, hfov: float) -> float:
    if not 0 < hfov < math.pi:
        raise DomainError(f"hfov must lie in (0, pi), got {hfov}")
    return (W_px / 2.0) / math.tan(hfov / 2.0)


def pinhole_to_dir(u, v, W_px: int, H_px: int, hfov: float) -> SphereDir:
    lon, lat = pinhole_to_dir_grid(np.asarray(u, float), np.asarray(v, float), W_px, H_px, hfov)
    return SphereDir(float(lon), float(lat))


def pinhole_to_dir_grid(u: np.ndarray, v: np.ndarray, W_px: int, H_px: int, hfov: float):
    """Perspective ray through each pixel centre; principal axis at (0, 0), y up."""
    f = focal_length(W_px, hfov)
    x = (u + 0.5 - W_px / 2.0) / f
    y = -(v + 0.5 - H_px / 2.0) / f
    lon = np.arctan2(x, 1.0)
    lat = np.arctan2(y, np.sqrt(x * x + 1.0))
    return lon, lat


def dir_to_pinhole(d: SphereDir, W_px: int, H_px: int, hfov: float) -> tuple[float, float]:
    f = focal_length(W_px, hfov)
    cl = math.cos(d.latitude)
    dx, dy, dz = cl * math.sin(d.longitude), math.sin(d.latitude), cl * math.cos(d.longitude)
    if dz <= 0:
        raise DomainError("direction is behind the camera")
    u = dx / dz * f + W_px / 2.0 - 0.5
    v = -dy / dz * f + H_px / 2.0 - 0.5
    return u, v


def angle_from_axis(lon, lat):
    """Angle between a direction and the pinhole principal axis."""
    return np.arccos(np.clip(np.cos(lat) * np.cos(lon), -1.0, 1.0))


# -- report ----------------------------------------------------------------

def distortion_report(W: float, n: int, rows: int, n_prime: float = 1.0) -> list[tuple[float, float, float]]:
    """Sample ``rows`` heights at row centres of ``(0, W/pi)``.

    Row centres ``h_k = (k + 0.5) W / (pi rows)`` are symmetric about the
    equator; for odd ``rows`` the middle row sits exactly on it.
    """
    if rows < 2:
        raise DomainError("rows must be >= 2")
    top = W / math.pi
    table = []
    for k in range(rows):
        h = (k + 0.5) * top / rows
        if 2 * k + 1 == rows:
            h = W / (2.0 * math.pi)
        table.append((h, float(_pixel_width(W, n, h)), float(_distortion(W, n, n_prime, h))))
    return table


def write_report_csv(table, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("h,width,dis\n")
        for h, w, d in table:
            fh.write(f"{h:.9g},{w:.9g},{d:.9g}\n")
