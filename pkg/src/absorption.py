"""
Lambert-Beer depth profiles and radial weights.

All functions work on plain node arrays so that the same code serves full
assembly (all nodes) and DEIM sampling (a handful of nodes). Each depth
profile is returned together with its derivative with respect to alpha.
"""
from typing import Tuple

import numpy as np

from .exceptions import DomainError
from .models import AbsorptionProfile, Geometry, RadialExtent, SourceQuadrature, VolWeightSign


def _layer_arrays(geometry: Geometry, absorption: AbsorptionProfile):
    bounds = np.asarray(geometry.layer_bounds, dtype=float)
    mu = np.asarray(absorption.layer_coefficients(geometry), dtype=float)
    # d mu / d alpha per layer
    mu_alpha = np.zeros_like(mu)
    mu_alpha[geometry.rpe_layer] = absorption.mu_rpe_ref
    return bounds, mu, mu_alpha


def _covered(z: np.ndarray, bounds: np.ndarray) -> np.ndarray:
    """Length of [0, z] inside each layer, shape (len(z), n_layers)."""
    lo, hi = bounds[:-1], bounds[1:]
    return np.clip(np.asarray(z, dtype=float)[..., None] - lo, 0.0, hi - lo)


def optical_depth(z, geometry: Geometry, absorption: AbsorptionProfile) -> Tuple[np.ndarray, np.ndarray]:
    """tau(z) = int_0^z mu and its alpha-derivative."""
    bounds, mu, mu_alpha = _layer_arrays(geometry, absorption)
    covered = _covered(z, bounds)
    return covered @ mu, covered @ mu_alpha


def absorption_at(z, geometry: Geometry, absorption: AbsorptionProfile) -> Tuple[np.ndarray, np.ndarray]:
    """mu(z) and d mu / d alpha; a node on a layer boundary belongs to the deeper layer."""
    bounds, mu, mu_alpha = _layer_arrays(geometry, absorption)
    z = np.asarray(z, dtype=float)
    layer = np.searchsorted(bounds, z, side="right") - 1
    inside = (layer >= 0) & (layer < len(mu))
    layer = np.clip(layer, 0, len(mu) - 1)
    return np.where(inside, mu[layer], 0.0), np.where(inside, mu_alpha[layer], 0.0)


def total_optical_depth(geometry: Geometry, absorption: AbsorptionProfile) -> float:
    tau, _ = optical_depth(np.array([geometry.depth]), geometry, absorption)
    return float(tau[0])


def _require_positive(absorption: AbsorptionProfile) -> None:
    if not absorption.alpha > 0:
        raise DomainError(f"alpha must be positive, got {absorption.alpha}")


def source_depth_profile(
    z: np.ndarray,
    dz: float,
    geometry: Geometry,
    absorption: AbsorptionProfile,
    quadrature: SourceQuadrature = SourceQuadrature.CELL,
) -> Tuple[np.ndarray, np.ndarray]:
    """Absorbed fraction per unit depth, mu e^{-tau}, at the nodes ``z`` (1/m).

    ``cell`` returns the exact average over the dual cell [z - dz/2, z + dz/2],
    so the profile integrates to 1 - e^{-tau} on any grid; ``point`` samples
    mu(z) e^{-tau(z)} at the node.
    """
    _require_positive(absorption)
    z = np.asarray(z, dtype=float)
    if quadrature is SourceQuadrature.POINT:
        mu, mu_a = absorption_at(z, geometry, absorption)
        tau, tau_a = optical_depth(z, geometry, absorption)
        att = np.exp(-tau)
        return mu * att, (mu_a - mu * tau_a) * att
    lo, hi = z - 0.5 * dz, z + 0.5 * dz
    tau_lo, tau_a_lo = optical_depth(lo, geometry, absorption)
    tau_hi, tau_a_hi = optical_depth(hi, geometry, absorption)
    e_lo, e_hi = np.exp(-tau_lo), np.exp(-tau_hi)
    return (e_lo - e_hi) / dz, (tau_a_hi * e_hi - tau_a_lo * e_lo) / dz


def volume_depth_weights(
    z: np.ndarray,
    dz: float,
    geometry: Geometry,
    absorption: AbsorptionProfile,
    sign: VolWeightSign = VolWeightSign.PLUS,
    quadrature: SourceQuadrature = SourceQuadrature.CELL,
) -> Tuple[np.ndarray, np.ndarray]:
    """Unnormalised depth quadrature weights of mu e^{s tau} over [z_b, z_e] and their alpha-derivatives."""
    _require_positive(absorption)
    s = sign.factor
    z = np.asarray(z, dtype=float)
    lo = np.clip(z - 0.5 * dz, geometry.z_b, geometry.z_e)
    hi = np.clip(z + 0.5 * dz, geometry.z_b, geometry.z_e)
    if quadrature is SourceQuadrature.POINT:
        mu, mu_a = absorption_at(z, geometry, absorption)
        tau, tau_a = optical_depth(z, geometry, absorption)
        growth = np.exp(s * tau)
        width = hi - lo
        return mu * growth * width, (mu_a + s * mu * tau_a) * growth * width
    tau_lo, tau_a_lo = optical_depth(lo, geometry, absorption)
    tau_hi, tau_a_hi = optical_depth(hi, geometry, absorption)
    g_lo, g_hi = np.exp(s * tau_lo), np.exp(s * tau_hi)
    return (g_hi - g_lo) / s, tau_a_hi * g_hi - tau_a_lo * g_lo


def normalized_volume_depth_weights(h: np.ndarray, dh: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """w = h / sum(h) and its derivative by the quotient rule."""
    total, dtotal = h.sum(), dh.sum()
    if not total > 0:
        raise DomainError("volume-temperature weights vanish; no absorption inside [z_b, z_e]")
    return h / total, (dh * total - h * dtotal) / total ** 2


def annulus_areas(r: np.ndarray, dr: float) -> np.ndarray:
    """Areas of the dual annuli [max(r - dr/2, 0), r + dr/2] around radial nodes."""
    r = np.asarray(r, dtype=float)
    inner = np.maximum(r - 0.5 * dr, 0.0)
    outer = r + 0.5 * dr
    return np.pi * (outer ** 2 - inner ** 2)


def _areas_inside(r: np.ndarray, dr: float, radius: float) -> np.ndarray:
    inner = np.minimum(np.maximum(np.asarray(r, dtype=float) - 0.5 * dr, 0.0), radius)
    outer = np.minimum(np.asarray(r, dtype=float) + 0.5 * dr, radius)
    return np.pi * (outer ** 2 - inner ** 2)


def source_radial_profile(
    r: np.ndarray, dr: float, r_inner: float, quadrature: SourceQuadrature = SourceQuadrature.CELL
) -> np.ndarray:
    """chi_I / (pi R_I^2) per radial node (1/m^2)."""
    spot = np.pi * r_inner ** 2
    if quadrature is SourceQuadrature.POINT:
        return (np.asarray(r) <= r_inner).astype(float) / spot
    return _areas_inside(r, dr, r_inner) / annulus_areas(r, dr) / spot


def radial_mean_weights(
    r: np.ndarray,
    dr: float,
    r_inner: float,
    extent: RadialExtent = RadialExtent.FULL,
    quadrature: SourceQuadrature = SourceQuadrature.CELL,
) -> np.ndarray:
    """Area weights 2 pi r dr of x_mean, normalised to unit sum."""
    r = np.asarray(r, dtype=float)
    if extent is RadialExtent.FULL:
        areas = annulus_areas(r, dr)
    elif quadrature is SourceQuadrature.POINT:
        areas = annulus_areas(r, dr) * (r <= r_inner)
    else:
        areas = _areas_inside(r, dr, r_inner)
    return areas / areas.sum()
