"""
Full-order axisymmetric heat-diffusion model of the irradiated fundus.

The temperature increase x(r, z) lives on the interior nodes of a uniform
(r, z) lattice; r = R, z = 0 and z = depth are homogeneous Dirichlet
boundaries and the axis r = 0 is a state row. States are ordered radial-major:
flat = i * (n_z - 1) + (j - 1).
"""
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional

import numpy as np
import scipy.sparse as sparse
from scipy.sparse.linalg import splu, spsolve

from .absorption import (
    annulus_areas,
    normalized_volume_depth_weights,
    radial_mean_weights,
    source_depth_profile,
    source_radial_profile,
    volume_depth_weights,
)
from .config import OpticsConfig
from .exceptions import ConfigurationError, DomainError, NumericalError
from .models import AbsorptionProfile, Geometry, MaterialConstants
from .utils.logger import get_logger

logger = get_logger(__name__)


@dataclass(frozen=True)
class Grid:
    """Uniform axisymmetric lattice; n_r and n_z count cells."""
    r_outer: float
    depth: float
    n_r: int
    n_z: int

    @classmethod
    def uniform(cls, r_outer: float, depth: float, n_r: int, n_z: int) -> "Grid":
        if n_r < 1 or n_z < 2:
            raise ConfigurationError(f"grid needs n_r >= 1 and n_z >= 2, got {n_r}, {n_z}")
        return cls(float(r_outer), float(depth), int(n_r), int(n_z))

    @property
    def dr(self) -> float:
        return self.r_outer / self.n_r

    @property
    def dz(self) -> float:
        return self.depth / self.n_z

    @property
    def max_cell_size(self) -> float:
        return max(self.dr, self.dz)

    @property
    def r(self) -> np.ndarray:
        """Radial coordinates of state nodes (axis included, r = R excluded)."""
        return np.arange(self.n_r) * self.dr

    @property
    def z(self) -> np.ndarray:
        """Depth coordinates of state nodes (both Dirichlet ends excluded)."""
        return np.arange(1, self.n_z) * self.dz

    @property
    def n_depth(self) -> int:
        return self.n_z - 1

    @property
    def n(self) -> int:
        return self.n_r * self.n_depth

    @property
    def dirichlet_mask(self) -> np.ndarray:
        """Boolean (n_r + 1, n_z + 1) lattice mask, True on boundary nodes."""
        mask = np.zeros((self.n_r + 1, self.n_z + 1), dtype=bool)
        mask[-1, :] = True
        mask[:, 0] = True
        mask[:, -1] = True
        return mask

    def flat_index(self, i: int, j: int) -> int:
        """State index of lattice node (i, j), 0 <= i < n_r, 1 <= j < n_z."""
        if not (0 <= i < self.n_r and 1 <= j < self.n_z):
            raise IndexError(f"lattice node ({i}, {j}) is not a state node")
        return i * self.n_depth + (j - 1)

    def lattice_index(self, flat):
        """Inverse of :meth:`flat_index`; accepts arrays."""
        flat = np.asarray(flat)
        return flat // self.n_depth, flat % self.n_depth + 1

    def cell_volumes(self) -> np.ndarray:
        """Dual-cell volumes, the weights of the discrete L2 inner product."""
        return np.kron(annulus_areas(self.r, self.dr), np.full(self.n_depth, self.dz))

    def to_lattice(self, x: np.ndarray) -> np.ndarray:
        """State vector as an (n_r, n_z - 1) array."""
        return np.asarray(x).reshape(self.n_r, self.n_depth)


def build_grid(geometry: Geometry, n_r: int, n_z: int) -> Grid:
    """Lattice over [0, R] x [0, depth] for a validated geometry."""
    geometry.check()
    if n_r < 4:
        raise ConfigurationError(f"n_r must be >= 4, got {n_r}")
    if n_z < geometry.n_layers + 2:
        raise ConfigurationError(f"n_z must be >= {geometry.n_layers + 2}, got {n_z}")
    grid = Grid.uniform(geometry.r_outer, geometry.depth, n_r, n_z)
    logger.debug(f"Built {n_r}x{n_z} grid with n={grid.n} (dr={grid.dr:.3e} m, dz={grid.dz:.3e} m)")
    return grid


def _tridiagonal(lower: np.ndarray, diag: np.ndarray, upper: np.ndarray) -> sparse.csr_matrix:
    n = len(diag)
    if n == 1:
        return sparse.csr_matrix(diag.reshape(1, 1))
    return sparse.diags([lower, diag, upper], [-1, 0, 1], shape=(n, n), format="csr")


def _radial_operator(n_r: int, dr: float) -> sparse.csr_matrix:
    """(1/r) d/dr (r d/dr) with symmetric axis closure and x(R) = 0."""
    i = np.arange(n_r, dtype=float)
    diag = np.full(n_r, -2.0 / dr ** 2)
    upper = np.zeros(max(n_r - 1, 0))
    lower = np.zeros(max(n_r - 1, 0))
    # axis: (1/r) x_r -> x_rr, so x_rr + x_r / r -> 2 x_rr with x_{-1} = x_1
    diag[0] = -4.0 / dr ** 2
    if n_r > 1:
        upper[0] = 4.0 / dr ** 2
        upper[1:] = (i[1:-1] + 0.5) / (i[1:-1] * dr ** 2)
        lower[:] = (i[1:] - 0.5) / (i[1:] * dr ** 2)
    return _tridiagonal(lower, diag, upper)


def _depth_operator(n_depth: int, dz: float) -> sparse.csr_matrix:
    ones = np.ones(n_depth) / dz ** 2
    return _tridiagonal(ones[:-1], -2.0 * ones, ones[:-1])


def assemble_system_matrix(grid: Grid, material: MaterialConstants) -> sparse.csc_matrix:
    """Discretised (k / (rho C_p)) Laplacian with homogeneous Dirichlet boundary."""
    lap = sparse.kron(_radial_operator(grid.n_r, grid.dr), sparse.identity(grid.n_depth)) + sparse.kron(
        sparse.identity(grid.n_r), _depth_operator(grid.n_depth, grid.dz)
    )
    return (material.diffusivity * lap).tocsc()


def _optics(optics: Optional[OpticsConfig]) -> OpticsConfig:
    return optics if optics is not None else OpticsConfig()


def assemble_input_vector(
    grid: Grid,
    absorption: AbsorptionProfile,
    geometry: Geometry,
    material: MaterialConstants = MaterialConstants(),
    optics: Optional[OpticsConfig] = None,
    derivative: bool = False,
):
    """Lambert-Beer source per watt, b_full(alpha) in K/(s W).

    With ``derivative=True`` returns ``(b, db/dalpha)``.
    """
    optics = _optics(optics)
    radial = source_radial_profile(grid.r, grid.dr, geometry.r_inner, optics.source_quadrature)
    g, dg = source_depth_profile(grid.z, grid.dz, geometry, absorption, optics.source_quadrature)
    scale = 1.0 / material.volumetric_heat_capacity
    b = np.kron(radial, g) * scale
    if derivative:
        return b, np.kron(radial, dg) * scale
    return b


def assemble_vol_output(
    grid: Grid,
    absorption: AbsorptionProfile,
    geometry: Geometry,
    optics: Optional[OpticsConfig] = None,
    derivative: bool = False,
):
    """Volume-temperature functional c_vol(alpha), normalised to unit weight sum.

    With ``derivative=True`` returns ``(c, dc/dalpha)``.
    """
    optics = _optics(optics)
    radial = radial_mean_weights(
        grid.r, grid.dr, geometry.r_inner, optics.vol_radial_extent, optics.source_quadrature
    )
    h, dh = volume_depth_weights(
        grid.z, grid.dz, geometry, absorption, optics.vol_weight_sign, optics.source_quadrature
    )
    w, dw = normalized_volume_depth_weights(h, dh)
    c = np.kron(radial, w)
    if derivative:
        return c, np.kron(radial, dw)
    return c


def assemble_peak_output(grid: Grid, geometry: Geometry) -> np.ndarray:
    """Point evaluation at (r = 0, z_center), linear in depth between nodes."""
    z = grid.z
    zc = geometry.z_center
    if not z[0] <= zc <= z[-1]:
        raise ConfigurationError(f"z_center={zc} outside the state nodes [{z[0]}, {z[-1]}]")
    c = np.zeros(grid.n)
    s = (zc - z[0]) / grid.dz
    j = int(np.floor(s))
    theta = s - j
    if abs(theta) < 1e-9 or j == len(z) - 1:
        c[grid.flat_index(0, j + 1)] = 1.0
    elif abs(1.0 - theta) < 1e-9:
        c[grid.flat_index(0, j + 2)] = 1.0
    else:
        c[grid.flat_index(0, j + 1)] = 1.0 - theta
        c[grid.flat_index(0, j + 2)] = theta
    return c


@dataclass
class FullOrderModel:
    """High-dimensional continuous-time model x' = A x + b(alpha) u."""
    grid: Grid
    geometry: Geometry
    material: MaterialConstants
    absorption: AbsorptionProfile
    optics: OpticsConfig
    a_full: sparse.csc_matrix
    b_full: np.ndarray
    c_vol: np.ndarray
    c_peak: np.ndarray
    mass: np.ndarray
    _factors: Dict[float, object] = field(default_factory=dict, repr=False)

    @property
    def n(self) -> int:
        return self.grid.n

    @property
    def alpha(self) -> float:
        return self.absorption.alpha

    def factorize(self, dt: float):
        """Sparse LU of (I - dt A), computed once per step size."""
        if not dt > 0:
            raise DomainError(f"dt must be positive, got {dt}")
        lu = self._factors.get(dt)
        if lu is None:
            try:
                lu = splu(sparse.identity(self.n, format="csc") - dt * self.a_full)
            except RuntimeError as e:
                raise NumericalError(f"(I - dt A) is singular for dt={dt}") from e
            self._factors[dt] = lu
        return lu

    def with_alpha(self, alpha: float) -> "FullOrderModel":
        """Same grid and system matrix (and cached factors), new absorption."""
        absorption = self.absorption.with_alpha(alpha)
        return FullOrderModel(
            grid=self.grid,
            geometry=self.geometry,
            material=self.material,
            absorption=absorption,
            optics=self.optics,
            a_full=self.a_full,
            b_full=assemble_input_vector(self.grid, absorption, self.geometry, self.material, self.optics),
            c_vol=assemble_vol_output(self.grid, absorption, self.geometry, self.optics),
            c_peak=self.c_peak,
            mass=self.mass,
            _factors=self._factors,
        )

    def y_vol(self, x: np.ndarray) -> float:
        return float(self.c_vol @ x)

    def y_peak(self, x: np.ndarray) -> float:
        return float(self.c_peak @ x)

    def steady_state(self, u: float) -> np.ndarray:
        """Solve A x = -b u."""
        return spsolve(-self.a_full, self.b_full * u)

    def step(self, x: np.ndarray, u: float, dt: float) -> np.ndarray:
        return step_full(self, x, u, dt)


def build_full_model(
    geometry: Geometry,
    material: MaterialConstants,
    absorption: AbsorptionProfile,
    grid: Grid,
    optics: Optional[OpticsConfig] = None,
    dts: Iterable[float] = (),
) -> FullOrderModel:
    """Assemble all operators and pre-factorize for the given step sizes."""
    optics = _optics(optics)
    model = FullOrderModel(
        grid=grid,
        geometry=geometry,
        material=material,
        absorption=absorption,
        optics=optics,
        a_full=assemble_system_matrix(grid, material),
        b_full=assemble_input_vector(grid, absorption, geometry, material, optics),
        c_vol=assemble_vol_output(grid, absorption, geometry, optics),
        c_peak=assemble_peak_output(grid, geometry),
        mass=grid.cell_volumes(),
    )
    for dt in dts:
        model.factorize(dt)
    logger.info(f"Assembled full-order model: n={grid.n}, alpha={absorption.alpha:.4f}")
    return model


def step_full(model: FullOrderModel, x: np.ndarray, u: float, dt: float) -> np.ndarray:
    """One implicit-Euler step: (I - dt A)^{-1} (x + dt b u)."""
    return model.factorize(dt).solve(x + (dt * u) * model.b_full)


def implicit_euler_spectral_radius(model: FullOrderModel, dt: float, iters: int = 300, seed: int = 0) -> float:
    """Power iteration on (I - dt A)^{-1} in the cell-volume inner product.

    (I - dt A)^{-1} is self-adjoint in that inner product, so the Rayleigh
    quotient approaches the spectral radius from below.
    """
    lu = model.factorize(dt)
    w = model.mass
    x = np.random.default_rng(seed).random(model.n)
    estimate = 0.0
    for _ in range(iters):
        y = lu.solve(x)
        estimate = float((x * w) @ y / ((x * w) @ x))
        x = y / np.sqrt((y * w) @ y)
    return estimate
