"""Periodic geometry and potential-energy models.

Every potential works on batches: ``q`` has shape ``(..., dim_q)`` and ``z``
has shape ``(..., dim_z)``.  The single-state helpers :func:`energy` and
:func:`gradient` wrap the batch versions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

TWO_PI = 2.0 * math.pi


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class Periodic:
    length: float
    lo: float = 0.0

    def __post_init__(self):
        if not self.length > 0:
            raise ValueError(f"periodic length must be > 0, got {self.length}")

    @property
    def hi(self) -> float:
        return self.lo + self.length

    @property
    def size(self) -> float:
        return self.length

    def apply(self, x):
        return wrap(x, self.length, self.lo)

    def to_dict(self) -> dict:
        return {"kind": "periodic", "length": self.length, "lo": self.lo}


@dataclass(frozen=True)
class Reflected:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"reflected interval needs lo < hi, got [{self.lo}, {self.hi}]")

    @property
    def size(self) -> float:
        return self.hi - self.lo

    def apply(self, x):
        return reflect(x, self.lo, self.hi)

    def to_dict(self) -> dict:
        return {"kind": "reflected", "lo": self.lo, "hi": self.hi}


Domain = Union[Periodic, Reflected]


def domain_from_dict(d: dict) -> Domain:
    kind = d.get("kind")
    if kind == "periodic":
        return Periodic(float(d["length"]), float(d.get("lo", 0.0)))
    if kind == "reflected":
        return Reflected(float(d["lo"]), float(d["hi"]))
    raise ValueError(f"unknown domain kind {kind!r}")


@dataclass(frozen=True)
class BoxSpec:
    dim_q: int
    dim_z: int
    box_length_q: float
    z_domain: Domain

    def __post_init__(self):
        if self.dim_z < 1:
            raise ValueError("dim_z must be >= 1")
        if not self.box_length_q > 0:
            raise ValueError("box_length_q must be > 0")


@dataclass
class ExtendedState:
    q: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        self.z = np.asarray(self.z, dtype=float)


@dataclass
class ForcePair:
    grad_q: np.ndarray
    grad_z: np.ndarray


def wrap(x, length: float, lo: float = 0.0):
    """Map periodic coordinates into ``[lo, lo + length)``."""
    y = np.mod(np.asarray(x, dtype=float) - lo, length)
    # np.mod can return `length` itself for tiny negative inputs
    y = np.where(y >= length, 0.0, y)
    return y + lo


def reflect(x, lo: float, hi: float):
    """Fold coordinates back into ``[lo, hi]`` by repeated mirror reflection."""
    width = hi - lo
    y = np.mod(np.asarray(x, dtype=float) - lo, 2.0 * width)
    y = np.where(y > width, 2.0 * width - y, y)
    return np.clip(y + lo, lo, hi)


def min_image(a, b, length: float):
    """Displacement ``a - b`` reduced to ``[-length/2, length/2)``.

    A separation of exactly half a box maps to ``-length/2``.
    """
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    return d - length * np.floor(d / length + 0.5)


def wrap_state(box: BoxSpec, s: ExtendedState) -> ExtendedState:
    q = wrap(s.q, box.box_length_q)
    z = s.z
    if isinstance(box.z_domain, Periodic):
        z = box.z_domain.apply(z)
    return ExtendedState(q, z)


# ---------------------------------------------------------------------------
# Potentials


class Potential:
    """Base class: subclasses implement batched energy and gradient."""

    kind = "abstract"

    def box(self) -> BoxSpec:
        raise NotImplementedError

    def energy_batch(self, q: np.ndarray, z: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def gradient_batch(self, q: np.ndarray, z: np.ndarray):
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError

    def _check(self, q, z):
        box = self.box()
        q = np.asarray(q, dtype=float)
        z = np.asarray(z, dtype=float)
        if q.shape[-1] != box.dim_q or z.shape[-1] != box.dim_z:
            raise DimensionMismatch(
                f"{self.kind}: expected q[..., {box.dim_q}] and z[..., {box.dim_z}], "
                f"got {q.shape} and {z.shape}"
            )
        return q, z


@dataclass(frozen=True)
class ToyModel3D(Potential):
    """Three-dimensional metastable toy potential on the 2π-periodic torus.

    The reaction coordinates are ``z = (x1, x2)`` and the orthogonal
    coordinate is ``q = (x3,)``.
    """

    kind = "toy"

    def box(self) -> BoxSpec:
        return BoxSpec(1, 2, TWO_PI, Periodic(TWO_PI))

    def energy_batch(self, q, z):
        q, z = self._check(q, z)
        x1, x2, x3 = z[..., 0], z[..., 1], q[..., 0]
        return (
            -np.sin(3 * x1) * np.sin(x2) * np.cos(x3 - 1)
            + np.cos(3 * x2 + 2) * (0.5 + np.cos(x3 - 2))
            + 2 * np.sin(2 * x1 + 0.5) * np.cos(x3)
            - 5 * np.cos(x1) * np.cos(x2) * np.cos(x3 + 1)
        )

    def gradient_batch(self, q, z):
        q, z = self._check(q, z)
        x1, x2, x3 = z[..., 0], z[..., 1], q[..., 0]
        s3x1, c3x1 = np.sin(3 * x1), np.cos(3 * x1)
        sx1, cx1 = np.sin(x1), np.cos(x1)
        sx2, cx2 = np.sin(x2), np.cos(x2)
        cm1, sm1 = np.cos(x3 - 1), np.sin(x3 - 1)
        cm2, sm2 = np.cos(x3 - 2), np.sin(x3 - 2)
        cp1, sp1 = np.cos(x3 + 1), np.sin(x3 + 1)
        c3, s3 = np.cos(x3), np.sin(x3)
        a2, b2 = np.cos(3 * x2 + 2), np.sin(3 * x2 + 2)
        d1 = -3 * c3x1 * sx2 * cm1 + 4 * np.cos(2 * x1 + 0.5) * c3 + 5 * sx1 * cx2 * cp1
        d2 = -s3x1 * cx2 * cm1 - 3 * b2 * (0.5 + cm2) + 5 * cx1 * sx2 * cp1
        d3 = (
            s3x1 * sx2 * sm1
            - a2 * sm2
            - 2 * np.sin(2 * x1 + 0.5) * s3
            + 5 * cx1 * cx2 * sp1
        )
        return d3[..., None], np.stack([d1, d2], axis=-1)

    def to_dict(self) -> dict:
        return {"kind": "toy"}


@dataclass(frozen=True)
class PolymerRing(Potential):
    """Polymer ring of ``n_polymer`` beads in a 2D solvent of WCA particles.

    Particle positions are flattened into ``q`` as ``(x_0, y_0, x_1, y_1, ...)``;
    the first ``n_polymer`` particles form the ring.  ``z_i`` is the extended
    coordinate attached to the bond between beads ``i`` and ``i + 1``.
    """

    n_particles: int
    n_polymer: int
    eps: float = 1.0
    sigma: float = 0.5
    r0: float | None = None
    r1: float | None = None
    omega: float = 1.0
    h: float = 3.0
    delta: float = 0.01
    z_lo: float = -0.2
    z_hi: float = 1.2
    wca_form: str = "continuous"
    box_length: float | None = None

    kind = "polymer"

    def __post_init__(self):
        if self.n_polymer < 3:
            raise ValueError("PolymerRing needs n_polymer >= 3")
        if self.n_polymer >= self.n_particles:
            raise ValueError("PolymerRing needs n_polymer < n_particles")
        for name in ("eps", "sigma", "omega", "h", "delta"):
            if not getattr(self, name) > 0:
                raise ValueError(f"PolymerRing.{name} must be > 0")
        if self.wca_form not in ("continuous", "literal"):
            raise ValueError("wca_form must be 'continuous' or 'literal'")
        if self.r0 is None:
            object.__setattr__(self, "r0", 2.0 ** (1.0 / 6.0) * self.sigma)
        if self.r1 is None:
            object.__setattr__(self, "r1", self.r0)
        if self.box_length is None:
            object.__setattr__(self, "box_length", math.sqrt(self.n_particles))
        n, d = self.n_particles, self.n_polymer
        ii, jj = np.triu_indices(n, k=1)
        keep = jj >= d  # at least one solvent member (jj > ii)
        object.__setattr__(self, "_pair_i", ii[keep])
        object.__setattr__(self, "_pair_j", jj[keep])

    @property
    def theta_d(self) -> float:
        return math.pi * (1.0 - 2.0 / self.n_polymer)

    def box(self) -> BoxSpec:
        return BoxSpec(2 * self.n_particles, self.n_polymer, self.box_length,
                       Reflected(self.z_lo, self.z_hi))

    # -- pair and bonded terms, as functions of scalar distances

    def wca(self, r):
        r = np.asarray(r, dtype=float)
        sr6 = (self.sigma / r) ** 6
        if self.wca_form == "continuous":
            v = 4 * self.eps * (sr6 * sr6 - sr6) + self.eps
        else:
            v = self.eps * (1.0 + sr6 * sr6 - sr6)
        return np.where(r <= self.r0, v, 0.0)

    def wca_deriv(self, r):
        r = np.asarray(r, dtype=float)
        sr6 = (self.sigma / r) ** 6
        scale = 4.0 if self.wca_form == "continuous" else 1.0
        dv = scale * self.eps * (-12 * sr6 * sr6 + 6 * sr6) / r
        return np.where(r <= self.r0, dv, 0.0)

    def double_well(self, r):
        u = (2 * np.asarray(r, dtype=float) - 2 * self.r1 - self.omega) / self.omega
        return self.h * (1 - u * u) ** 2

    def double_well_deriv(self, r):
        u = (2 * np.asarray(r, dtype=float) - 2 * self.r1 - self.omega) / self.omega
        return -8 * self.h * u * (1 - u * u) / self.omega

    def extended(self, z, r):
        return 0.5 / self.delta * (z - (r - self.r1) / self.omega) ** 2

    def angle_energy(self, cos_theta):
        c = np.clip(cos_theta, -1.0, 1.0)
        return 0.5 * (c - math.cos(self.theta_d)) ** 2

    # -- geometry helpers

    def _positions(self, q):
        return q.reshape(q.shape[:-1] + (self.n_particles, 2))

    def _bonds(self, x):
        d = self.n_polymer
        poly = x[..., :d, :]
        b = min_image(np.roll(poly, -1, axis=-2), poly, self.box_length)
        r = np.sqrt(np.sum(b * b, axis=-1))
        return b, r

    def energy_batch(self, q, z):
        q, z = self._check(q, z)
        x = self._positions(q)
        disp = min_image(x[..., self._pair_i, :], x[..., self._pair_j, :], self.box_length)
        rp = np.sqrt(np.sum(disp * disp, axis=-1))
        e = np.sum(self.wca(rp), axis=-1)
        b, r = self._bonds(x)
        e = e + np.sum(self.double_well(r) + self.extended(z, r), axis=-1)
        bn = np.roll(b, -1, axis=-2)
        rn = np.roll(r, -1, axis=-1)
        cos_t = -np.sum(b * bn, axis=-1) / (r * rn)
        return e + np.sum(self.angle_energy(cos_t), axis=-1)

    def gradient_batch(self, q, z):
        q, z = self._check(q, z)
        x = self._positions(q)
        n, d = self.n_particles, self.n_polymer
        gx = np.zeros_like(x)

        # solvent pairs; the force routine avoids np.add.at for speed
        disp = min_image(x[..., self._pair_i, :], x[..., self._pair_j, :], self.box_length)
        rp = np.sqrt(np.sum(disp * disp, axis=-1))
        fp = (self.wca_deriv(rp) / rp)[..., None] * disp
        gx = gx + _scatter_pairs(fp, self._pair_i, self._pair_j, n)

        # bonds: b_i = x_{i+1} - x_i
        b, r = self._bonds(x)
        stretch = z - (r - self.r1) / self.omega
        dvdr = self.double_well_deriv(r) - stretch / (self.delta * self.omega)
        gb = (dvdr / r)[..., None] * b  # dV/db_i

        # angles at bead i+1 between -b_i and b_{i+1}
        bn = np.roll(b, -1, axis=-2)
        rn = np.roll(r, -1, axis=-1)
        dot = np.sum(b * bn, axis=-1)
        cos_t = -dot / (r * rn)
        dvdc = np.clip(cos_t, -1.0, 1.0) - math.cos(self.theta_d)
        dc_db = -(bn / (r * rn)[..., None]) - (cos_t / (r * r))[..., None] * b
        dc_dbn = -(b / (r * rn)[..., None]) - (cos_t / (rn * rn))[..., None] * bn
        gb = gb + dvdc[..., None] * dc_db + np.roll(dvdc[..., None] * dc_dbn, 1, axis=-2)

        # dV/dx_i = dV/db_{i-1} - dV/db_i
        gpoly = np.roll(gb, 1, axis=-2) - gb
        gx[..., :d, :] += gpoly
        grad_q = gx.reshape(q.shape)
        return grad_q, stretch / self.delta

    def initial_state(self, rng: np.random.Generator | None = None,
                      jitter: float = 0.05) -> ExtendedState:
        """Compact regular polygon plus solvent on a jittered lattice.

        Solvent sites closer than ``1.5 * r0`` to a bead are discarded; the
        remaining sites nearest the box corner are used in row-major order.
        """
        d, n, L = self.n_polymer, self.n_particles, self.box_length
        radius = self.r1 / (2 * math.sin(math.pi / d))
        ang = 2 * math.pi * np.arange(d) / d
        centre = np.array([L / 2, L / 2])
        poly = centre + radius * np.stack([np.cos(ang), np.sin(ang)], axis=-1)
        k = int(math.ceil(math.sqrt(n))) + 1
        while True:
            g = (np.arange(k) + 0.5) * L / k
            sites = np.stack(np.meshgrid(g, g, indexing="ij"), axis=-1).reshape(-1, 2)
            dist = np.sqrt(np.sum(min_image(sites[:, None, :], poly[None], L) ** 2, axis=-1))
            sites = sites[np.min(dist, axis=1) > 1.5 * self.r0]
            if len(sites) >= n - d:
                break
            k += 1
        sites = sites[: n - d]
        if rng is not None and jitter > 0:
            sites = sites + rng.uniform(-jitter, jitter, size=sites.shape) * L / k
        x = np.concatenate([poly, sites], axis=0)
        return ExtendedState(wrap(x.reshape(-1), L), np.zeros(d))

    def to_dict(self) -> dict:
        return {
            "kind": "polymer", "n_particles": self.n_particles, "n_polymer": self.n_polymer,
            "eps": self.eps, "sigma": self.sigma, "r0": self.r0, "r1": self.r1,
            "omega": self.omega, "h": self.h, "delta": self.delta, "z_lo": self.z_lo,
            "z_hi": self.z_hi, "wca_form": self.wca_form, "box_length": self.box_length,
        }


def _scatter_pairs(fp, ii, jj, n):
    """Accumulate ``+fp`` onto particle ``ii`` and ``-fp`` onto ``jj``."""
    lead = fp.shape[:-2]
    flat = fp.reshape((-1,) + fp.shape[-2:])
    nb = flat.shape[0]
    out = np.empty((nb, n, 2))
    offs = (np.arange(nb) * n)[:, None]
    idx_i = (offs + ii).ravel()
    idx_j = (offs + jj).ravel()
    for c in range(2):
        w = flat[..., c].ravel()
        acc = np.bincount(idx_i, weights=w, minlength=nb * n)
        acc -= np.bincount(idx_j, weights=w, minlength=nb * n)
        out[..., c] = acc.reshape(nb, n)
    return out.reshape(lead + (n, 2))


# -- separable test potential


@dataclass(frozen=True)
class FourierProfile:
    """``a(x) = sum_k cos_k cos(2πkx/L) + sin_k sin(2πkx/L)``, k = 1, 2, ..."""

    cos: tuple = ()
    sin: tuple = ()
    length: float = 1.0

    def _k(self, n):
        return TWO_PI * np.arange(1, n + 1) / self.length

    def value(self, x):
        x = np.asarray(x, dtype=float)[..., None]
        out = 0.0
        if self.cos:
            out = out + np.sum(np.asarray(self.cos) * np.cos(self._k(len(self.cos)) * x), axis=-1)
        if self.sin:
            out = out + np.sum(np.asarray(self.sin) * np.sin(self._k(len(self.sin)) * x), axis=-1)
        return out + np.zeros(x.shape[:-1])

    def deriv(self, x):
        x = np.asarray(x, dtype=float)[..., None]
        out = 0.0
        if self.cos:
            k = self._k(len(self.cos))
            out = out - np.sum(np.asarray(self.cos) * k * np.sin(k * x), axis=-1)
        if self.sin:
            k = self._k(len(self.sin))
            out = out + np.sum(np.asarray(self.sin) * k * np.cos(k * x), axis=-1)
        return out + np.zeros(x.shape[:-1])

    def to_dict(self):
        return {"kind": "fourier", "cos": list(self.cos), "sin": list(self.sin),
                "length": self.length}


@dataclass(frozen=True)
class PLProfile:
    """Periodic piecewise-linear profile given by its values on a uniform grid."""

    values: tuple
    length: float = 1.0

    def _locate(self, x):
        v = np.asarray(self.values, dtype=float)
        m = len(v)
        u = wrap(x, self.length) / self.length * m
        cell = np.minimum(np.floor(u).astype(int), m - 1)
        return v, cell, u - cell, m

    def value(self, x):
        v, cell, t, m = self._locate(x)
        return v[cell] * (1 - t) + v[(cell + 1) % m] * t

    def deriv(self, x):
        v, cell, _, m = self._locate(x)
        return (v[(cell + 1) % m] - v[cell]) * m / self.length

    def to_dict(self):
        return {"kind": "pl", "values": list(self.values), "length": self.length}


def profile_from_dict(d: dict):
    if d["kind"] == "fourier":
        return FourierProfile(tuple(d.get("cos", ())), tuple(d.get("sin", ())),
                              float(d.get("length", 1.0)))
    if d["kind"] == "pl":
        return PLProfile(tuple(d["values"]), float(d.get("length", 1.0)))
    raise ValueError(f"unknown profile kind {d['kind']!r}")


@dataclass(frozen=True)
class SeparableTest(Potential):
    """``V(q, z) = sum_j a_j(z_j) + w_amp * sum_k cos(2π q_k / L_q)``.

    The free energy is exactly ``sum_j a_j`` up to a constant.
    """

    profiles: tuple
    dim_q: int = 2
    w_amp: float = 1.0
    q_length: float = 1.0
    z_length: float = 1.0

    kind = "separable"

    def box(self) -> BoxSpec:
        return BoxSpec(self.dim_q, len(self.profiles), self.q_length, Periodic(self.z_length))

    def free_energy(self, z):
        z = np.asarray(z, dtype=float)
        return sum(p.value(z[..., j]) for j, p in enumerate(self.profiles))

    def energy_batch(self, q, z):
        q, z = self._check(q, z)
        w = self.w_amp * np.sum(np.cos(TWO_PI * q / self.q_length), axis=-1)
        return self.free_energy(z) + w

    def gradient_batch(self, q, z):
        q, z = self._check(q, z)
        gq = -self.w_amp * TWO_PI / self.q_length * np.sin(TWO_PI * q / self.q_length)
        gz = np.stack([p.deriv(z[..., j]) for j, p in enumerate(self.profiles)], axis=-1)
        return gq, gz

    def to_dict(self) -> dict:
        return {"kind": "separable", "profiles": [p.to_dict() for p in self.profiles],
                "dim_q": self.dim_q, "w_amp": self.w_amp, "q_length": self.q_length,
                "z_length": self.z_length}


def potential_from_dict(d: dict) -> Potential:
    kind = d.get("kind")
    if kind == "toy":
        return ToyModel3D()
    if kind == "polymer":
        kw = {k: v for k, v in d.items() if k != "kind"}
        return PolymerRing(**kw)
    if kind == "separable":
        return SeparableTest(
            tuple(profile_from_dict(p) for p in d["profiles"]),
            dim_q=int(d.get("dim_q", 2)), w_amp=float(d.get("w_amp", 1.0)),
            q_length=float(d.get("q_length", 1.0)), z_length=float(d.get("z_length", 1.0)),
        )
    raise ValueError(f"unknown potential kind {kind!r}")


# ---------------------------------------------------------------------------
# single-state API


def energy(spec: Potential, s: ExtendedState) -> float:
    return float(spec.energy_batch(s.q, s.z))


def gradient(spec: Potential, s: ExtendedState) -> ForcePair:
    gq, gz = spec.gradient_batch(s.q, s.z)
    return ForcePair(np.asarray(gq, dtype=float), np.asarray(gz, dtype=float))


def fd_check(spec: Potential, s: ExtendedState, step: float = 1e-6) -> float:
    """Max relative deviation between analytic and central-difference gradients.

    The deviation is measured in the sup norm over all coordinates and
    normalised by the sup norm of the analytic gradient (floored at 1).
    """
    x = np.concatenate([s.q, s.z])
    nq = s.q.size
    n = x.size
    # all 2n perturbed states evaluated as one batch
    pert = np.repeat(x[None, :], 2 * n, axis=0)
    idx = np.arange(n)
    pert[2 * idx, idx] += step
    pert[2 * idx + 1, idx] -= step
    e = spec.energy_batch(pert[:, :nq], pert[:, nq:])
    fd = (e[0::2] - e[1::2]) / (2 * step)
    g = gradient(spec, s)
    an = np.concatenate([g.grad_q, g.grad_z])
    scale = max(float(np.max(np.abs(an))), 1.0)
    return float(np.max(np.abs(an - fd)) / scale)
