"""Static trap analysis: pseudopotential, minimum, secular frequencies and
axial modes of linear ion crystals.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .constants import AMU, COULOMB_K, E_CHARGE


# --------------------------------------------------------------------------
# species and drive
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class IonSpecies:
    mass_amu: float
    charge: int = 1
    label: str = ""

    def __post_init__(self):
        if not self.mass_amu > 0:
            raise ValueError("IonSpecies.mass_amu must be > 0")
        if self.charge == 0:
            raise ValueError("IonSpecies.charge must be nonzero")

    @property
    def mass(self) -> float:
        return self.mass_amu * AMU

    @property
    def q(self) -> float:
        return self.charge * E_CHARGE


_ELECTRON_AMU = 5.48579909065e-4
CA40 = IonSpecies(39.962590863 - _ELECTRON_AMU, 1, "40Ca+")
CAO = IonSpecies(39.962590863 + 15.994914620 - _ELECTRON_AMU, 1, "CaO+")
SPECIES = {"40Ca+": CA40, "Ca+": CA40, "CaO+": CAO}


def species_from(value) -> IonSpecies:
    """Resolve a label or ``{"mass_amu", "charge", "label"}`` mapping."""
    if isinstance(value, IonSpecies):
        return value
    if isinstance(value, str):
        try:
            return SPECIES[value]
        except KeyError:
            raise ValueError(f"unknown species {value!r}; known: {sorted(SPECIES)}") from None
    return IonSpecies(**value)


@dataclass(frozen=True)
class DriveConfig:
    rf_amplitude: float = 200.0
    rf_frequency: float = 12.155e6
    rf_phase: float = 0.0
    dc_voltages: dict = field(default_factory=lambda: {"dc2": 35.0, "dc8": 35.0})
    rf_group: str = "rf"

    def __post_init__(self):
        if not self.rf_frequency > 0:
            raise ValueError("DriveConfig.rf_frequency must be > 0")
        if self.rf_amplitude < 0:
            raise ValueError("DriveConfig.rf_amplitude must be >= 0")

    @property
    def omega(self) -> float:
        return 2 * math.pi * self.rf_frequency

    def with_dc(self, **volts) -> "DriveConfig":
        dc = dict(self.dc_voltages)
        dc.update(volts)
        return DriveConfig(self.rf_amplitude, self.rf_frequency, self.rf_phase, dc,
                           self.rf_group)


class IdealQuadrupole:
    """Analytic stand-in for a basis: ``rf`` gives ``phi = (x^2 - y^2)/(2 r0^2)``
    per volt, ``axial`` gives ``phi = (z^2 - (x^2 + y^2)/2)/(2 r0^2)`` per volt,
    ``bias_z`` a uniform field of 1 V/m along ``-z``.
    """

    groups = ("rf", "axial", "bias_z")

    def __init__(self, r0: float = 1e-3):
        self.r0 = r0

    def _terms(self, p):
        x, y, z = p[:, 0], p[:, 1], p[:, 2]
        s = 1 / (2 * self.r0 ** 2)
        return {
            "rf": (s * (x * x - y * y), -2 * s * np.stack([x, -y, 0 * z], 1)),
            "axial": (s * (z * z - 0.5 * (x * x + y * y)),
                      -2 * s * np.stack([-0.5 * x, -0.5 * y, z], 1)),
            "bias_z": (z, np.stack([0 * x, 0 * y, -1 + 0 * z], 1)),
        }

    def potential_at(self, points, voltages, use_grids=True):
        p = np.atleast_2d(np.asarray(points, float))
        t = self._terms(p)
        phi = sum((v * t[g][0] for g, v in voltages.items()), np.zeros(len(p)))
        return phi, np.zeros(len(p), bool)

    def field_at(self, points, voltages, use_grids=True):
        p = np.atleast_2d(np.asarray(points, float))
        t = self._terms(p)
        E = sum((v * t[g][1] for g, v in voltages.items()), np.zeros((len(p), 3)))
        return E, np.zeros(len(p), bool)

    def linear_model(self):
        """Per-volt ``(A, b)`` with ``E_g = A_g x + b_g``, in ``groups`` order."""
        s = 1 / self.r0 ** 2
        A = np.zeros((3, 3, 3))
        A[0] = -s * np.diag([1.0, -1.0, 0.0])
        A[1] = -s * np.diag([-0.5, -0.5, 1.0])
        b = np.zeros((3, 3))
        b[2, 2] = -1.0
        return A, b

    def field_source(self):
        from .dynamics import FieldSource, LinearFieldModel
        return FieldSource.from_linear(LinearFieldModel(*self.linear_model()))


# --------------------------------------------------------------------------
# pseudopotential
# --------------------------------------------------------------------------

class GuardZoneError(ValueError):
    """Evaluation point lies inside a conductor guard zone."""


def _fields(points, drive, basis, use_grids):
    rf = {drive.rf_group: drive.rf_amplitude} if drive.rf_amplitude else {}
    dc = {g: v for g, v in drive.dc_voltages.items() if v != 0.0}
    pts = np.atleast_2d(np.asarray(points, float))
    if rf:
        E, g1 = basis.field_at(pts, rf, use_grids=use_grids)
    else:
        E, g1 = np.zeros((len(pts), 3)), np.zeros(len(pts), bool)
    if dc:
        phi, g2 = basis.potential_at(pts, dc, use_grids=use_grids)
    else:
        phi, g2 = np.zeros(len(pts)), np.zeros(len(pts), bool)
    return E, phi, g1 | g2


def pseudopotential(points, species: IonSpecies, drive: DriveConfig, basis,
                    use_grids: bool = False, strict: bool = True):
    """Time-averaged potential energy (J) ``q^2|E_rf|^2/(4 m Omega^2) + q phi_dc``.

    ``E_rf`` is the RF field amplitude at ``drive.rf_amplitude``.  Returns an
    array for an (N, 3) input and a float for a single point.  With
    ``strict`` a point in a guard zone raises :class:`GuardZoneError`.
    """
    single = np.ndim(points) == 1
    E, phi, guard = _fields(points, drive, basis, use_grids)
    if strict and guard.any():
        raise GuardZoneError(f"{int(guard.sum())} point(s) inside a conductor guard zone")
    q, m = species.q, species.mass
    U = q * q * np.einsum("ij,ij->i", E, E) / (4 * m * drive.omega ** 2) + q * phi
    return float(U[0]) if single else U


def pseudopotential_ev(points, species, drive, basis, **kw):
    return pseudopotential(points, species, drive, basis, **kw) / E_CHARGE


_OFFS = None


def _stencil():
    global _OFFS
    if _OFFS is None:
        offs = [np.zeros(3)]
        for i in range(3):
            e = np.eye(3)[i]
            offs += [e, -e]
        for i in range(3):
            for j in range(i + 1, 3):
                ei, ej = np.eye(3)[i], np.eye(3)[j]
                offs += [ei + ej, ei - ej, -ei + ej, -ei - ej]
        _OFFS = np.array(offs)
    return _OFFS


def _grad_hess(fun, x, h):
    """Central-difference gradient and Hessian from one batched call."""
    offs = _stencil()
    f = fun(x + h * offs)
    f0 = f[0]
    g = np.zeros(3)
    H = np.zeros((3, 3))
    for i in range(3):
        fp, fm = f[1 + 2 * i], f[2 + 2 * i]
        g[i] = (fp - fm) / (2 * h)
        H[i, i] = (fp - 2 * f0 + fm) / (h * h)
    k = 7
    for i in range(3):
        for j in range(i + 1, 3):
            pp, pm, mp, mm = f[k:k + 4]
            H[i, j] = H[j, i] = (pp - pm - mp + mm) / (4 * h * h)
            k += 4
    return g, H


class MinimumError(RuntimeError):
    pass


class SaddleError(MinimumError):
    """Stationary point whose Hessian is not positive definite."""

    def __init__(self, message, eigenvalues, axes):
        super().__init__(message)
        self.eigenvalues = eigenvalues
        self.axes = axes


EV_PER_MM = E_CHARGE / 1e-3


def fd_step(scale: float = 1e-3) -> float:
    return max(1e-7, 1e-4 * scale)


def find_minimum(species, drive, basis, start=(0.0, 0.0, 0.0), scale: float = 1e-3,
                 gtol: float = 1e-6 * EV_PER_MM, max_iter: int = 50,
                 use_grids: bool = False) -> np.ndarray:
    """Newton iteration on the pseudopotential with finite-difference derivatives.

    Converged when the gradient norm is below ``gtol`` (J/m, default
    1e-6 eV/mm).  Raises :class:`SaddleError` if the Hessian at the
    stationary point is indefinite, :class:`MinimumError` otherwise.
    """
    fun = lambda p: pseudopotential(p, species, drive, basis, use_grids=use_grids)
    x = np.asarray(start, float).copy()
    h = fd_step(scale)
    for _ in range(max_iter):
        g, H = _grad_hess(fun, x, h)
        w, V = np.linalg.eigh(H)
        gn = float(np.linalg.norm(g))
        if gn <= gtol:
            if w.min() <= 0:
                raise SaddleError(f"stationary point at {x} is a saddle "
                                  f"(eigenvalues {w})", w, V)
            return x
        # Newton on positive curvature directions, bounded step otherwise
        wa = np.where(w > 0, w, np.abs(w) + gn / (0.1 * scale))
        step = -V @ ((V.T @ g) / wa)
        sn = np.linalg.norm(step)
        if sn > 0.2 * scale:
            step *= 0.2 * scale / sn
        x = x + step
    raise MinimumError(f"no minimum after {max_iter} Newton steps; last |grad| = "
                       f"{gn / EV_PER_MM:.3e} eV/mm at {x}")


@dataclass
class SecularResult:
    """Secular frequencies and Mathieu equivalents at the pseudopotential minimum.

    ``frequencies`` are ordinary frequencies (Hz) sorted to match ``axes``;
    ``axial_index`` picks the axis closest to ``z``.
    """

    position: np.ndarray
    frequencies: np.ndarray
    axes: np.ndarray
    axial_index: int
    mathieu_q: np.ndarray
    mathieu_a: np.ndarray
    hessian: np.ndarray
    richardson_delta: float
    species: IonSpecies | None = None

    @property
    def axial(self) -> float:
        return float(self.frequencies[self.axial_index])

    @property
    def radial(self) -> np.ndarray:
        return np.delete(self.frequencies, self.axial_index)

    @property
    def omegas(self) -> np.ndarray:
        return 2 * math.pi * self.frequencies

    def report(self) -> dict:
        return {
            "position_m": self.position.tolist(),
            "axial_frequency_Hz": self.axial,
            "radial_frequencies_Hz": self.radial.tolist(),
            "axial_frequency_kHz": self.axial / 1e3,
            "radial_frequencies_kHz": (self.radial / 1e3).tolist(),
            "principal_axes": self.axes.T.tolist(),
            "frequencies_Hz": self.frequencies.tolist(),
            "mathieu_q": self.mathieu_q.tolist(),
            "mathieu_a": self.mathieu_a.tolist(),
            "hessian_richardson_rel_delta": self.richardson_delta,
        }


def _field_hessians(x, drive, basis, h, use_grids):
    """Hessians of the RF (at amplitude) and DC potentials from field differences."""
    pts = np.concatenate([x + h * np.eye(3), x - h * np.eye(3)])
    rf = {drive.rf_group: drive.rf_amplitude} if drive.rf_amplitude else {}
    dc = {g: v for g, v in drive.dc_voltages.items() if v != 0.0}
    out = []
    for volts in (rf, dc):
        if not volts:
            out.append(np.zeros((3, 3)))
            continue
        E, _ = basis.field_at(pts, volts, use_grids=use_grids)
        J = (E[:3] - E[3:]) / (2 * h)  # J[i, j] = dE_j/dx_i
        out.append(-0.5 * (J + J.T))
    return out


def secular_frequencies(species, drive, basis, start=(0.0, 0.0, 0.0), scale: float = 1e-3,
                        use_grids: bool = False) -> SecularResult:
    """Eigen-decomposition of the pseudopotential Hessian at its minimum."""
    x = find_minimum(species, drive, basis, start, scale, use_grids=use_grids)
    fun = lambda p: pseudopotential(p, species, drive, basis, use_grids=use_grids)
    h = fd_step(scale)
    _, H = _grad_hess(fun, x, h)
    _, H2 = _grad_hess(fun, x, 2 * h)
    delta = float(np.abs(H - H2).max() / np.abs(H).max())
    H = 0.5 * (H + H.T)
    w, V = np.linalg.eigh(H)
    if w.min() <= 0:
        k = int(np.argmin(w))
        raise SaddleError(f"unstable along axis {V[:, k]} (eigenvalue {w[k]:.3e})", w, V)
    # canonical orientation: largest component positive
    for k in range(3):
        if V[np.argmax(np.abs(V[:, k])), k] < 0:
            V[:, k] *= -1
    m, q, Om = species.mass, species.q, drive.omega
    freqs = np.sqrt(w / m) / (2 * math.pi)
    Hrf, Hdc = _field_hessians(x, drive, basis, 10 * h, use_grids)
    # |q| that reproduces the RF share of the curvature along each axis
    qm = np.array([2 * q * np.linalg.norm(Hrf @ V[:, k]) / (m * Om ** 2) for k in range(3)])
    am = np.array([4 * q * (V[:, k] @ Hdc @ V[:, k]) / (m * Om ** 2) for k in range(3)])
    axial = int(np.argmax(np.abs(V[2, :])))
    return SecularResult(x, freqs, V, axial, qm, am, H, delta, species)


# --------------------------------------------------------------------------
# linear crystals
# --------------------------------------------------------------------------

@dataclass
class CrystalConfig:
    """Ions ordered along ``z`` in a common axial curvature ``phi''`` (V/m^2)."""

    species: list
    positions: np.ndarray
    curvature: float

    @property
    def charges(self):
        return np.array([s.q for s in self.species])

    @property
    def masses(self):
        return np.array([s.mass for s in self.species])


@dataclass
class ModeSpectrum:
    """Axial normal modes sorted by frequency.

    ``vectors[:, k]`` is mode ``k`` in mass-weighted coordinates (Euclidean
    orthonormal); ``displacements`` are the same modes in metres, orthonormal
    under the mass metric ``u^T M u = 1``.
    """

    omegas: np.ndarray
    vectors: np.ndarray
    displacements: np.ndarray

    @property
    def frequencies(self) -> np.ndarray:
        return self.omegas / (2 * math.pi)


def axial_curvature(species: IonSpecies, omega_ax: float) -> float:
    """``phi''`` (V/m^2) giving angular axial frequency ``omega_ax`` for ``species``."""
    return species.mass * omega_ax ** 2 / species.q


def _crystal_energy_derivs(z, q, curv):
    n = len(z)
    g = q * curv * z
    H = np.diag(q * curv)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            d = z[i] - z[j]
            a = COULOMB_K * q[i] * q[j]
            g[i] -= a * np.sign(d) / d ** 2
            c = 2 * a / abs(d) ** 3
            H[i, i] += c
            H[i, j] -= c
    return g, H


def equilibrium_positions(species, omega_ax: float, reference: IonSpecies | None = None):
    """Axial equilibrium of a linear chain in a harmonic well.

    ``omega_ax`` is the angular axial frequency of ``reference`` (default the
    first ion).  Returns a :class:`CrystalConfig`; positions are ascending.
    """
    species = [species_from(s) for s in species]
    n = len(species)
    if n == 0:
        raise ValueError("empty crystal")
    ref = reference or species[0]
    curv = axial_curvature(ref, omega_ax)
    q = np.array([s.q for s in species])
    if np.any(q * curv <= 0):
        raise ValueError("all ions must be confined (same-sign charge and curvature)")
    if n == 1:
        return CrystalConfig(species, np.zeros(1), curv)
    ell = (COULOMB_K * E_CHARGE / curv) ** (1 / 3)
    z = np.linspace(-1, 1, n) * ell * (0.5 * n) ** 0.6
    fchar = COULOMB_K * E_CHARGE ** 2 / ell ** 2
    for _ in range(200):
        g, H = _crystal_energy_derivs(z, q, curv)
        step = np.linalg.solve(H, g)
        # keep the ordering: never move an ion more than a third of its gap
        gaps = np.diff(z)
        lim = np.full(n, np.inf)
        lim[:-1] = np.minimum(lim[:-1], gaps / 3)
        lim[1:] = np.minimum(lim[1:], gaps / 3)
        scale = min(1.0, float(np.min(lim / np.maximum(np.abs(step), 1e-300))))
        z = z - scale * step
        if np.linalg.norm(g) <= 1e-13 * fchar and scale == 1.0:
            break
    g, _ = _crystal_energy_derivs(z, q, curv)
    if np.linalg.norm(g) > 1e-12 * fchar:
        raise RuntimeError("crystal equilibrium did not converge")
    return CrystalConfig(species, z, curv)


def normal_modes(crystal: CrystalConfig) -> ModeSpectrum:
    """Axial modes from the mass-weighted Hessian of the chain energy."""
    q, m = crystal.charges, crystal.masses
    _, H = _crystal_energy_derivs(crystal.positions, q, crystal.curvature)
    s = 1 / np.sqrt(m)
    D = s[:, None] * H * s[None, :]
    w, V = np.linalg.eigh(0.5 * (D + D.T))
    if w.min() <= 0:
        raise ValueError("crystal Hessian is not positive definite")
    for k in range(V.shape[1]):
        if V[np.argmax(np.abs(V[:, k])), k] < 0:
            V[:, k] *= -1
    return ModeSpectrum(np.sqrt(w), V, s[:, None] * V)


@dataclass
class MassEstimate:
    mass_amu: float
    sigma_amu: float
    identifiable: bool = True
    reason: str = ""

    def report(self) -> dict:
        return {"mass_amu": self.mass_amu, "sigma_amu": self.sigma_amu,
                "identifiable": self.identifiable, "reason": self.reason}


def mode_frequency(known: IonSpecies, dark_mass_amu: float, omega_ax: float,
                   mode_index: int, dark_charge: int = 1) -> float:
    """Frequency (Hz) of mode ``mode_index`` of a two-ion [known, dark] chain."""
    dark = IonSpecies(dark_mass_amu, dark_charge, "dark")
    cr = equilibrium_positions([known, dark], omega_ax, reference=known)
    return float(normal_modes(cr).frequencies[mode_index])


def infer_dark_mass(frequency: float, sigma: float, known: IonSpecies, omega_ax: float,
                    mode_index: int, dark_charge: int = 1,
                    bracket=(1.0, 500.0)) -> MassEstimate:
    """Invert the two-ion mode frequency for the mass of the dark ion.

    ``omega_ax`` is the angular single-ion axial frequency of ``known``.
    The charge is assumed (default +1); only ``q/m`` is observable.
    """
    f = lambda m: mode_frequency(known, m, omega_ax, mode_index, dark_charge) - frequency
    lo, hi = bracket
    flo, fhi = f(lo), f(hi)
    if flo * fhi > 0:
        return MassEstimate(math.nan, math.nan, False,
                            f"frequency {frequency:.6g} Hz outside the mode-{mode_index} "
                            f"branch over [{lo}, {hi}] amu")
    m = brentq(f, lo, hi, xtol=1e-12, rtol=1e-14, maxiter=200)
    dm = 1e-4 * m
    slope = (f(m + dm) - f(m - dm)) / (2 * dm)
    return MassEstimate(m, abs(sigma / slope) if slope else math.inf)
