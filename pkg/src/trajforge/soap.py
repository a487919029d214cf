"""SOAP power-spectrum descriptors for periodic structures.

Neighbour density around each atom: one unnormalized Gaussian of width
``sigma`` per neighbour (periodic images included), restricted to the
sphere of radius ``r_cut``. The density is expanded in ``n_max`` radial
functions times real spherical harmonics up to ``l_max``; the per-atom
power spectrum is averaged over atoms ("outer" averaging).

Radial basis: the span of the polynomials (r_cut - r)^(a+2), a = 1..n_max,
orthonormalized in order (Gram-Schmidt) under the r^2 dr measure on
[0, r_cut]. That orthonormal set is (r_cut - r)^3 times Jacobi polynomials
P_k^(6,2) of x = 2 r / r_cut - 1, which is how it is evaluated here.

Angular integrals are analytic: a Gaussian at distance d contributes
4 pi exp(-(r-d)^2 / 2 sigma^2) [e^-x i_l(x)] Y_lm(d_hat), x = r d / sigma^2,
to the radial profile of c_nlm; the remaining radial integral uses
Gauss-Legendre quadrature.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np
from scipy import special

from .elements import atomic_number


class SoapError(ValueError):
    pass


class EmptyStructure(SoapError):
    pass


class NumericalOverflow(SoapError):
    pass


MIN_CELL_VOLUME = 1e-6  # Å^3
# Gaussian weights below this contribute < 1e-18 relative and are skipped
GAUSS_FLOOR = 1e-18


@dataclass(frozen=True)
class SoapParams:
    r_cut: float = 5.0
    n_max: int = 8
    l_max: int = 6
    sigma: float = 0.5
    averaging: str = "outer"
    # neighbours up to r_cut + padding * sigma contribute density inside r_cut
    padding: float = 6.0
    n_radial_quad: int = 120

    def __post_init__(self):
        if not self.r_cut > 0:
            raise ValueError("r_cut must be > 0")
        if self.n_max < 1:
            raise ValueError("n_max must be >= 1")
        if self.l_max < 0:
            raise ValueError("l_max must be >= 0")
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")
        if self.averaging != "outer":
            raise ValueError("only 'outer' averaging is supported")

    def to_dict(self):
        return asdict(self)


# --------------------------------------------------------------------------
# radial basis

def _jacobi_norm(k, a=6, b=2):
    return (2.0 ** (a + b + 1) / (2 * k + a + b + 1)
            * math.exp(math.lgamma(k + a + 1) + math.lgamma(k + b + 1)
                       - math.lgamma(k + a + b + 1) - math.lgamma(k + 1)))


def radial_basis(r, r_cut, n_max):
    """Orthonormal radial functions g_0..g_{n_max-1} evaluated at ``r``.

    Returns an array of shape (n_max,) + r.shape; zero outside [0, r_cut].
    """
    r = np.asarray(r, dtype=float)
    x = 2.0 * r / r_cut - 1.0
    out = np.empty((n_max,) + r.shape)
    envelope = np.where(r < r_cut, (r_cut - r) ** 3, 0.0)
    for k in range(n_max):
        norm = math.sqrt(r_cut ** 9 * _jacobi_norm(k) / 512.0)
        out[k] = envelope * special.eval_jacobi(k, 6, 2, x) / norm
    return out


@lru_cache(maxsize=32)
def _radial_grid(r_cut, n_max, n_quad):
    x, w = np.polynomial.legendre.leggauss(n_quad)
    r = 0.5 * r_cut * (x + 1.0)
    w = 0.5 * r_cut * w
    # weights folded with r^2 and the basis: (n_max, n_quad)
    gw = radial_basis(r, r_cut, n_max) * (w * r * r)
    r.setflags(write=False)
    gw.setflags(write=False)
    return r, gw


def _ive_half(l, x):
    return np.sqrt(np.pi / (2.0 * x)) * special.ive(l + 0.5, x)


def scaled_spherical_in(l_max, x):
    """e^-x i_l(x) for l = 0..l_max; shape (l_max+1,) + x.shape.

    The top two orders come from scipy; lower orders follow from the
    downward recurrence i_{l-1} = i_{l+1} + (2l+1)/x i_l, which is stable.
    """
    x = np.asarray(x, dtype=float)
    out = np.zeros((l_max + 1,) + x.shape)
    pos = x > 0
    out[0][~pos] = 1.0
    xp = x[pos]
    if xp.size == 0:
        return out
    if l_max == 0:
        out[0][pos] = _ive_half(0, xp)
        return out
    vals = np.empty((l_max + 1, xp.size))
    vals[l_max] = _ive_half(l_max, xp)
    vals[l_max - 1] = _ive_half(l_max - 1, xp)
    for l in range(l_max - 1, 0, -1):
        vals[l - 1] = vals[l + 1] + (2 * l + 1) / xp * vals[l]
    # recurrence cannot recover orders that underflowed at very small x
    lost = vals[l_max - 1] == 0.0
    if lost.any():
        for l in range(l_max + 1):
            vals[l][lost] = _ive_half(l, xp[lost])
    out[:, pos] = vals
    return out


# --------------------------------------------------------------------------
# real spherical harmonics


def real_sph_harm(l_max, vectors):
    """Real spherical harmonics Y_lm(v_hat), packed as (len(v), l_max+1, 2 l_max+1).

    Index m + l_max holds order m; unused slots are zero. Zero vectors get
    only the l = 0 component.
    """
    v = np.asarray(vectors, dtype=float).reshape(-1, 3)
    r = np.linalg.norm(v, axis=1)
    safe = np.where(r > 0, r, 1.0)
    cos_t = np.clip(np.where(r > 0, v[:, 2] / safe, 1.0), -1.0, 1.0)
    theta = np.arccos(cos_t)
    phi = np.arctan2(v[:, 1], v[:, 0])
    out = np.zeros((len(v), l_max + 1, 2 * l_max + 1))
    for l in range(l_max + 1):
        y0 = special.sph_harm_y(l, 0, theta, phi)
        out[:, l, l_max] = y0.real
        for m in range(1, l + 1):
            y = special.sph_harm_y(l, m, theta, phi)
            sign = (-1) ** m
            out[:, l, l_max + m] = math.sqrt(2.0) * sign * y.real
            out[:, l, l_max - m] = math.sqrt(2.0) * sign * y.imag
    zero = r == 0
    if zero.any():
        out[zero] = 0.0
        out[zero, 0, l_max] = 0.5 / math.sqrt(math.pi)
    return out


# --------------------------------------------------------------------------
# neighbours


def cell_volume(lattice):
    return float(np.linalg.det(np.asarray(lattice, dtype=float)))


def _canonical_order(species, positions, frac):
    """Atom order independent of the input permutation (species, then coordinates)."""
    z = np.array([atomic_number(s) for s in species])
    return np.lexsort((positions[:, 2], positions[:, 1], positions[:, 0], z))


def neighbour_images(lattice, frac, radius):
    """Translations covering every image within ``radius`` of any wrapped atom."""
    lattice = np.asarray(lattice, dtype=float)
    vol = abs(np.linalg.det(lattice))
    a, b, c = lattice
    heights = [vol / np.linalg.norm(np.cross(b, c)),
               vol / np.linalg.norm(np.cross(c, a)),
               vol / np.linalg.norm(np.cross(a, b))]
    reach = [int(math.ceil(radius / h)) + 1 for h in heights]
    grid = np.stack(np.meshgrid(*(np.arange(-n, n + 1) for n in reach), indexing="ij"), -1)
    return grid.reshape(-1, 3).astype(float) @ lattice


class Soap:
    """Descriptor calculator with a fixed element set (fixes the vector layout)."""

    def __init__(self, elements, params: SoapParams = SoapParams()):
        self.params = params
        self.elements = sorted(set(elements), key=atomic_number)
        if not self.elements:
            raise ValueError("element set must be non-empty")
        self.index = {el: i for i, el in enumerate(self.elements)}
        S, n = len(self.elements), params.n_max
        self.pairs = [(a, b) for a in range(S) for b in range(a, S)]
        self.nn = [(i, j) for i in range(n) for j in range(i, n)]

    @property
    def n_features(self):
        return len(self.pairs) * len(self.nn) * (self.params.l_max + 1)

    def feature_labels(self):
        return [(self.elements[a], self.elements[b], n, k, l)
                for a, b in self.pairs for n, k in self.nn
                for l in range(self.params.l_max + 1)]

    def coefficients(self, lattice, species, positions):
        """Expansion coefficients c[atom, species, n, l, m] (atoms in canonical order)."""
        p = self.params
        lattice = np.asarray(lattice, dtype=float)
        positions = np.asarray(positions, dtype=float)
        if len(species) == 0:
            raise EmptyStructure("structure has no atoms")
        vol = cell_volume(lattice)
        if not vol > MIN_CELL_VOLUME:
            raise NumericalOverflow(f"cell volume {vol!r} below {MIN_CELL_VOLUME} Å^3")
        unknown = set(species) - set(self.index)
        if unknown:
            raise SoapError(f"species {sorted(unknown)} outside the descriptor element set")

        frac = np.linalg.solve(lattice.T, positions.T).T
        frac = frac - np.floor(frac)
        wrapped = frac @ lattice
        order = _canonical_order(species, wrapped, frac)
        wrapped = wrapped[order]
        spec_idx = np.array([self.index[species[i]] for i in order])

        radius = p.r_cut + p.padding * p.sigma
        shifts = neighbour_images(lattice, frac, radius)
        images = (wrapped[None, :, :] + shifts[:, None, :]).reshape(-1, 3)
        image_species = np.tile(spec_idx, len(shifts))

        r_grid, gw = _radial_grid(p.r_cut, p.n_max, p.n_radial_quad)
        L, M = p.l_max + 1, 2 * p.l_max + 1
        S = len(self.elements)
        coeffs = np.zeros((len(wrapped), S, p.n_max, L, M))
        inv2s2 = 1.0 / (2.0 * p.sigma ** 2)
        for i, centre in enumerate(wrapped):
            d_vec = images - centre
            d = np.sqrt(np.einsum("ij,ij->i", d_vec, d_vec))
            keep = d < radius
            d_vec, d, sp = d_vec[keep], d[keep], image_species[keep]
            # radial profile per neighbour, per l, on the quadrature grid
            gauss = np.exp(-((r_grid[None, :] - d[:, None]) ** 2) * inv2s2)
            # Bessel factors only where the Gaussian has not underflowed
            live = gauss > GAUSS_FLOOR
            bessel = np.zeros((L,) + gauss.shape)              # (L, nb, Q)
            bessel[:, live] = scaled_spherical_in(
                p.l_max, (d[:, None] * r_grid[None, :])[live] / p.sigma ** 2)
            radial = np.einsum("lbq,bq,nq->bnl", bessel, gauss, gw)   # (nb, n, L)
            ylm = real_sph_harm(p.l_max, d_vec)                # (nb, L, M)
            contrib = 4.0 * np.pi * radial[:, :, :, None] * ylm[:, None, :, :]
            for s in range(S):
                mask = sp == s
                if mask.any():
                    coeffs[i, s] = contrib[mask].sum(axis=0)
        return coeffs

    def power_spectrum(self, coeffs):
        """Per-atom power spectra, shape (n_atoms, n_features)."""
        p = np.einsum("aunlm,avklm->auvnkl", coeffs, coeffs)
        a_idx = np.array([a for a, _ in self.pairs])
        b_idx = np.array([b for _, b in self.pairs])
        n_idx = np.array([n for n, _ in self.nn])
        k_idx = np.array([k for _, k in self.nn])
        sel = p[:, a_idx, b_idx]                      # (atoms, pairs, n, k, L)
        sel = sel[:, :, n_idx, k_idx]                 # (atoms, pairs, nn, L)
        return sel.reshape(len(coeffs), -1)

    def per_atom(self, frame_or_lattice, species=None, positions=None):
        lattice, species, positions = _unpack(frame_or_lattice, species, positions)
        return self.power_spectrum(self.coefficients(lattice, species, positions))

    def descriptor(self, frame_or_lattice, species=None, positions=None):
        per_atom = self.per_atom(frame_or_lattice, species, positions)
        return per_atom.mean(axis=0)


def _unpack(frame_or_lattice, species, positions):
    if species is None:
        fr = frame_or_lattice
        return fr.lattice, list(fr.species), fr.positions
    return frame_or_lattice, list(species), positions


def soap_descriptor(frame, params: SoapParams = SoapParams(), elements=None):
    """Outer-averaged SOAP vector of one frame over ``elements`` (default: its own species)."""
    return Soap(elements or frame.species, params).descriptor(frame)
