"""
Parametric model order reduction: POD global basis + DEIM for the
alpha-dependent input and volume-output vectors, then implicit Euler.

The axisymmetric operator is self-adjoint in the cell-volume inner product
(W), so projection uses the W-orthogonal projector P = (V^T W V)^{-1} V^T W.
This keeps the reduced operator stable for any basis V; with W = I it is
plain Galerkin projection with V^T.
"""
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg as la

from .absorption import (
    normalized_volume_depth_weights,
    radial_mean_weights,
    source_depth_profile,
    source_radial_profile,
    volume_depth_weights,
)
from .config import MorConfig, OpticsConfig, SimulationConfig
from .exceptions import ArtifactError, AssemblyError, NumericalError, RankError
from .models import AbsorptionProfile, Geometry, MaterialConstants
from .physical_model import FullOrderModel, Grid, build_full_model, build_grid
from .utils.logger import get_logger

logger = get_logger(__name__)

ARTIFACT_FORMAT_VERSION = 1


@dataclass
class SnapshotSet:
    """State, input-vector and output-weight snapshots over a parameter grid."""
    alphas: np.ndarray
    states: np.ndarray
    b_snapshots: np.ndarray
    c_snapshots: np.ndarray
    samples_per_alpha: int


@dataclass
class PodBasis:
    v: np.ndarray
    singular_values: np.ndarray
    energy_ratio: float

    @property
    def rank(self) -> int:
        return self.v.shape[1]


@dataclass
class DeimOperator:
    """Greedy DEIM: f ~ interp @ f[idx]."""
    u_deim: np.ndarray
    idx: np.ndarray
    interp: np.ndarray

    @property
    def order(self) -> int:
        return len(self.idx)

    def approximate(self, vector: np.ndarray) -> np.ndarray:
        return self.interp @ np.asarray(vector)[self.idx]


def default_excitation(u_max: float, n_steps: int, n_pulses: int = 10, seed: int = 0) -> np.ndarray:
    """Step at u_max for the first half, then a random-amplitude pulse train."""
    u = np.zeros(n_steps)
    half = n_steps // 2
    u[:half] = u_max
    if n_pulses > 0 and n_steps - half >= 2 * n_pulses:
        rng = np.random.default_rng(seed)
        slot = (n_steps - half) // n_pulses
        for p, amplitude in enumerate(rng.uniform(0.0, u_max, size=n_pulses)):
            start = half + p * slot
            u[start:start + max(slot // 2, 1)] = amplitude
    return u


def collect_snapshots(
    full_model_factory: Callable[[float], FullOrderModel],
    alphas: Sequence[float],
    excitation: np.ndarray,
    dt: float,
) -> SnapshotSet:
    """Simulate the full model for every alpha and stack the states after each step."""
    alphas = np.asarray(alphas, dtype=float)
    if alphas.size == 0:
        raise AssemblyError("at least one training alpha is required")
    states, b_cols, c_cols = [], [], []
    for alpha in alphas:
        model = full_model_factory(float(alpha))
        x = np.zeros(model.n)
        trajectory = np.empty((model.n, len(excitation)))
        for k, u in enumerate(excitation):
            x = model.step(x, float(u), dt)
            trajectory[:, k] = x
        if not np.all(np.isfinite(trajectory)):
            raise AssemblyError(f"non-finite states while sampling alpha={alpha}")
        states.append(trajectory)
        b_cols.append(model.b_full)
        c_cols.append(model.c_vol)
        logger.debug(f"Collected {len(excitation)} snapshots at alpha={alpha:.4f}")
    return SnapshotSet(
        alphas=alphas,
        states=np.hstack(states),
        b_snapshots=np.column_stack(b_cols),
        c_snapshots=np.column_stack(c_cols),
        samples_per_alpha=len(excitation),
    )


def numerical_rank(singular_values: np.ndarray, rtol: float = 1e-9) -> int:
    if singular_values.size == 0 or singular_values[0] <= 0:
        return 0
    return int(np.sum(singular_values > rtol * singular_values[0]))


def pod(snapshots: np.ndarray, rank: int, rtol: float = 1e-9) -> PodBasis:
    """Leading left singular vectors of the snapshot matrix."""
    u, s, _ = np.linalg.svd(np.asarray(snapshots, dtype=float), full_matrices=False)
    available = numerical_rank(s, rtol)
    if rank > available:
        raise RankError(f"requested POD rank {rank} exceeds numerical rank {available}")
    energy = s ** 2
    ratio = float(energy[:rank].sum() / energy.sum())
    return PodBasis(v=u[:, :rank].copy(), singular_values=s, energy_ratio=ratio)


def deim(snapshots: np.ndarray, order: int, rtol: float = 1e-9) -> DeimOperator:
    """DEIM basis from the vector snapshots and greedy interpolation indices."""
    u, s, _ = np.linalg.svd(np.asarray(snapshots, dtype=float), full_matrices=False)
    available = numerical_rank(s, rtol)
    if order > available:
        raise RankError(f"DEIM order {order} exceeds numerical rank {available}")
    basis = u[:, :order]
    idx = [int(np.argmax(np.abs(basis[:, 0])))]
    for col in range(1, order):
        coeffs = np.linalg.solve(basis[idx, :col], basis[idx, col])
        residual = basis[:, col] - basis[:, :col] @ coeffs
        idx.append(int(np.argmax(np.abs(residual))))
    idx = np.asarray(idx, dtype=np.int64)
    if len(np.unique(idx)) != order:
        raise NumericalError("DEIM selected a duplicate interpolation index")
    sampled = basis[idx, :]
    if np.linalg.cond(sampled) > 1e14:
        raise NumericalError("DEIM sampled submatrix is singular")
    interp = np.linalg.solve(sampled.T, basis.T).T
    return DeimOperator(u_deim=basis.copy(), idx=idx, interp=interp)


@dataclass
class ReducedModel:
    """Discrete-time parametric surrogate x+ = a_d x + b(alpha) u.

    b(alpha) and c_vol(alpha) are evaluated from a handful of entries of the
    full-order vectors (the DEIM rows), computed directly from the optics.
    """
    a_d: np.ndarray
    b_proj: np.ndarray
    c_proj: np.ndarray
    c_peak_r: np.ndarray
    dt: float
    idx_b: np.ndarray
    idx_c: np.ndarray
    v: np.ndarray
    mass: np.ndarray
    grid: Grid
    geometry: Geometry
    material: MaterialConstants
    optics: OpticsConfig
    clamp: Tuple[float, float] = (0.2, 2.0)
    metadata: Dict = field(default_factory=dict)

    def __post_init__(self):
        self.idx_b = np.asarray(self.idx_b, dtype=np.int64)
        self.idx_c = np.asarray(self.idx_c, dtype=np.int64)
        i_b, j_b = self.grid.lattice_index(self.idx_b)
        i_c, j_c = self.grid.lattice_index(self.idx_c)
        quad = self.optics.source_quadrature
        self._b_radial = source_radial_profile(self.grid.r, self.grid.dr, self.geometry.r_inner, quad)[i_b]
        self._b_depth = self.grid.z[j_b - 1]
        self._c_radial = radial_mean_weights(
            self.grid.r, self.grid.dr, self.geometry.r_inner, self.optics.vol_radial_extent, quad
        )[i_c]
        self._c_depth_rows = j_c - 1
        self._absorption = AbsorptionProfile(
            mu_rpe_ref=self.optics.mu_rpe_ref, mu_choroid=self.optics.mu_choroid
        )
        gram = self.v.T @ (self.mass[:, None] * self.v)
        self._projector = np.linalg.solve(gram, (self.mass[:, None] * self.v).T)

    @property
    def rank(self) -> int:
        return self.a_d.shape[0]

    def clamp_alpha(self, alpha: float) -> Tuple[float, bool]:
        lo, hi = self.clamp
        clamped = min(max(float(alpha), lo), hi)
        return clamped, clamped != float(alpha)

    def _alpha(self, alpha: float) -> float:
        value, clamped = self.clamp_alpha(alpha)
        if clamped:
            logger.warning(f"alpha={alpha:.4f} clamped to {value:.4f}")
        return value

    def _b_entries(self, alpha: float) -> Tuple[np.ndarray, np.ndarray]:
        g, dg = source_depth_profile(
            self._b_depth, self.grid.dz, self.geometry, self._absorption.with_alpha(alpha),
            self.optics.source_quadrature,
        )
        scale = self._b_radial / self.material.volumetric_heat_capacity
        return scale * g, scale * dg

    def _c_entries(self, alpha: float) -> Tuple[np.ndarray, np.ndarray]:
        h, dh = volume_depth_weights(
            self.grid.z, self.grid.dz, self.geometry, self._absorption.with_alpha(alpha),
            self.optics.vol_weight_sign, self.optics.source_quadrature,
        )
        w, dw = normalized_volume_depth_weights(h, dh)
        rows = self._c_depth_rows
        return self._c_radial * w[rows], self._c_radial * dw[rows]

    def b(self, alpha: float) -> np.ndarray:
        return self.b_proj @ self._b_entries(self._alpha(alpha))[0]

    def c_vol(self, alpha: float) -> np.ndarray:
        return self._c_entries(self._alpha(alpha))[0] @ self.c_proj

    def derivatives(self, alpha: float) -> Tuple[np.ndarray, np.ndarray]:
        alpha = self._alpha(alpha)
        db = self.b_proj @ self._b_entries(alpha)[1]
        dc = self._c_entries(alpha)[1] @ self.c_proj
        return db, dc

    def step(self, x: np.ndarray, u: float, alpha: float) -> np.ndarray:
        return self.a_d @ x + self.b(alpha) * u

    def steady_state_gain(self, alpha: float) -> float:
        """Static gain u -> y_peak, c_peak (I - a_d)^{-1} b(alpha)."""
        x = np.linalg.solve(np.eye(self.rank) - self.a_d, self.b(alpha))
        return float(self.c_peak_r @ x)

    def reduce_state(self, x_full: np.ndarray) -> np.ndarray:
        """Reduced coordinates of a full state (W-orthogonal projection)."""
        return self._projector @ x_full

    def lift(self, x_r: np.ndarray) -> np.ndarray:
        return self.v @ x_r

    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.a_d))))


def eval_b(reduced: ReducedModel, alpha: float) -> np.ndarray:
    return reduced.b(alpha)


def eval_cvol(reduced: ReducedModel, alpha: float) -> np.ndarray:
    return reduced.c_vol(alpha)


def eval_derivatives(reduced: ReducedModel, alpha: float) -> Tuple[np.ndarray, np.ndarray]:
    return reduced.derivatives(alpha)


def reduce_and_discretize(
    full_model: FullOrderModel,
    pod_basis: PodBasis,
    deim_b: DeimOperator,
    deim_c: DeimOperator,
    dt: float,
    clamp: Tuple[float, float] = (0.2, 2.0),
    metadata: Optional[Dict] = None,
) -> ReducedModel:
    """Project, apply DEIM and discretise with implicit Euler."""
    v = pod_basis.v
    w = full_model.mass
    wv = w[:, None] * v
    gram = v.T @ wv
    a_r = np.linalg.solve(gram, wv.T @ (full_model.a_full @ v))
    system = np.eye(v.shape[1]) - dt * a_r
    if np.linalg.cond(system) > 1e12:
        raise NumericalError("(I - dt A_r) is not invertible")
    a_d = np.linalg.inv(system)
    projector = np.linalg.solve(gram, wv.T)
    b_proj = dt * a_d @ (projector @ deim_b.interp)
    c_proj = deim_c.interp.T @ v
    reduced = ReducedModel(
        a_d=a_d,
        b_proj=b_proj,
        c_proj=c_proj,
        c_peak_r=full_model.c_peak @ v,
        dt=float(dt),
        idx_b=deim_b.idx,
        idx_c=deim_c.idx,
        v=v,
        mass=w,
        grid=full_model.grid,
        geometry=full_model.geometry,
        material=full_model.material,
        optics=full_model.optics,
        clamp=tuple(clamp),
        metadata=dict(metadata or {}),
    )
    radius = reduced.spectral_radius()
    if not radius < 1.0:
        raise NumericalError(f"reduced model is unstable: spectral radius {radius:.6f}")
    return reduced


def step_response_error(
    full_model: FullOrderModel, reduced: ReducedModel, alpha: float, u: float, n_steps: int
) -> Dict[str, float]:
    """Relative sup-norm output errors of the reduced vs full step response."""
    full = full_model.with_alpha(alpha)
    x = np.zeros(full.n)
    x_r = np.zeros(reduced.rank)
    b_r, c_r = reduced.b(alpha), reduced.c_vol(alpha)
    y_full = np.empty((n_steps, 2))
    y_red = np.empty((n_steps, 2))
    for k in range(n_steps):
        x = full.step(x, u, reduced.dt)
        x_r = reduced.a_d @ x_r + b_r * u
        y_full[k] = full.y_vol(x), full.y_peak(x)
        y_red[k] = c_r @ x_r, reduced.c_peak_r @ x_r
    scale = np.max(np.abs(y_full), axis=0)
    err = np.max(np.abs(y_red - y_full), axis=0) / np.where(scale > 0, scale, 1.0)
    return {"y_vol": float(err[0]), "y_peak": float(err[1])}


def build_reduced_model(sim: SimulationConfig, dt: float, full_model: Optional[FullOrderModel] = None) -> ReducedModel:
    """Offline pipeline: snapshots -> POD -> DEIM -> reduced discrete model."""
    mor: MorConfig = sim.mor
    if full_model is None:
        grid = build_grid(sim.geometry, sim.grid.n_r, sim.grid.n_z)
        absorption = AbsorptionProfile(
            alpha=mor.training_alphas[0], mu_rpe_ref=sim.optics.mu_rpe_ref, mu_choroid=sim.optics.mu_choroid
        )
        full_model = build_full_model(sim.geometry, sim.material, absorption, grid, sim.optics, dts=(dt,))
    lo, hi = sim.estimator.clamp
    if mor.training_alphas[0] > lo or mor.training_alphas[-1] < hi:
        logger.warning(
            f"Training alphas [{mor.training_alphas[0]}, {mor.training_alphas[-1]}] do not cover "
            f"the estimator clamp [{lo}, {hi}]; DEIM extrapolates outside"
        )
    n_steps = int(round(mor.snapshot_duration_s / dt))
    excitation = default_excitation(mor.snapshot_u_max, n_steps, mor.n_pulses, mor.excitation_seed)
    snapshots = collect_snapshots(full_model.with_alpha, mor.training_alphas, excitation, dt)
    basis = pod(snapshots.states, mor.rank, mor.rank_rtol)
    deim_ops = []
    for name, data, order in (("b", snapshots.b_snapshots, mor.deim_order_b), ("c_vol", snapshots.c_snapshots, mor.deim_order_c)):
        available = numerical_rank(np.linalg.svd(data, compute_uv=False), mor.rank_rtol)
        if order > available:
            logger.warning(f"DEIM order for {name} reduced from {order} to numerical rank {available}")
            order = available
        deim_ops.append(deim(data, order, mor.rank_rtol))
    metadata = {
        "training_alphas": list(mor.training_alphas),
        "energy_ratio": basis.energy_ratio,
        "pod_singular_values": basis.singular_values[: 2 * mor.rank].tolist(),
        "deim_order_b": deim_ops[0].order,
        "deim_order_c": deim_ops[1].order,
        "n_full": full_model.n,
    }
    reduced = reduce_and_discretize(full_model, basis, deim_ops[0], deim_ops[1], dt, sim.estimator.clamp, metadata)
    logger.info(
        f"Built reduced model: r={reduced.rank}, dt={dt * 1e3:.1f} ms, energy ratio={basis.energy_ratio:.8f}, "
        f"DEIM orders b={deim_ops[0].order} c={deim_ops[1].order}, spectral radius={reduced.spectral_radius():.6f}"
    )
    return reduced


_ARRAY_FIELDS = ("a_d", "b_proj", "c_proj", "c_peak_r", "idx_b", "idx_c", "v", "mass")


def save_reduced_model(reduced: ReducedModel, path: Path) -> Path:
    """Write the reduced model as a versioned .npz archive (bit-exact arrays)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format_version": ARTIFACT_FORMAT_VERSION,
        "dt": reduced.dt,
        "clamp": list(reduced.clamp),
        "grid": {"r_outer": reduced.grid.r_outer, "depth": reduced.grid.depth, "n_r": reduced.grid.n_r, "n_z": reduced.grid.n_z},
        "geometry": reduced.geometry.model_dump(mode="json"),
        "material": reduced.material.model_dump(mode="json"),
        "optics": reduced.optics.model_dump(mode="json"),
        "metadata": reduced.metadata,
    }
    arrays = {name: getattr(reduced, name) for name in _ARRAY_FIELDS}
    try:
        with open(path, "wb") as f:
            np.savez(f, header=np.array(json.dumps(header)), **arrays)
    except OSError as e:
        raise ArtifactError(f"cannot write reduced model to {path}: {e}") from e
    logger.info(f"Saved reduced model to {path}")
    return path


def load_reduced_model(path: Path, expected_dt: Optional[float] = None) -> ReducedModel:
    """Read an artifact written by :func:`save_reduced_model`."""
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(str(data["header"]))
            arrays = {name: data[name] for name in _ARRAY_FIELDS}
    except (OSError, KeyError, ValueError) as e:
        raise ArtifactError(f"cannot read reduced model from {path}: {e}") from e
    if header.get("format_version") != ARTIFACT_FORMAT_VERSION:
        raise ArtifactError(f"{path}: unsupported artifact version {header.get('format_version')}")
    if expected_dt is not None and not np.isclose(header["dt"], expected_dt, rtol=1e-12, atol=0.0):
        raise ArtifactError(
            f"{path}: artifact step {header['dt'] * 1e3:g} ms does not match the scenario step {expected_dt * 1e3:g} ms"
        )
    g = header["grid"]
    reduced = ReducedModel(
        grid=Grid.uniform(g["r_outer"], g["depth"], g["n_r"], g["n_z"]),
        geometry=Geometry.model_validate(header["geometry"]),
        material=MaterialConstants.model_validate(header["material"]),
        optics=OpticsConfig.model_validate(header["optics"]),
        dt=float(header["dt"]),
        clamp=tuple(header["clamp"]),
        metadata=header["metadata"],
        **arrays,
    )
    logger.info(f"Loaded reduced model from {path} (dt={reduced.dt * 1e3:g} ms, r={reduced.rank})")
    return reduced
