"""High-precision energy oracles shared by the test modules."""

import mpmath as mp
import numpy as np
from scipy import constants as sc

from iontrap.electrode_field import SecularTriple
from iontrap.ion_dynamics import HarmonicForces, minimize_energy
from iontrap.normal_modes import assemble_hessian

K_E2 = sc.e ** 2 / (4 * np.pi * sc.epsilon_0)


@mp.workdps(50)
def mp_hessian(energy, x, h):
    """Central second differences of ``energy`` evaluated in 50-digit arithmetic."""
    h = mp.mpf(h)
    n = len(x)
    x = [mp.mpf(v) for v in x]
    out = np.empty((n, n))
    for i in range(n):
        for j in range(i, n):
            def e(di, dj):
                y = list(x)
                y[i] += di * h
                y[j] += dj * h
                return energy(y)
            v = (e(1, 1) - e(1, -1) - e(-1, 1) + e(-1, -1)) / (4 * h * h)
            out[i, j] = out[j, i] = float(v)
    return out


def mp_harmonic_energy(masses, omegas, centers, charges):
    """Lab-frame harmonic wells plus pairwise Coulomb energy, flat 3N coordinates."""
    ke2 = mp.mpf(K_E2)

    def energy(flat):
        n = len(masses)
        r = [flat[3 * i:3 * i + 3] for i in range(n)]
        e = mp.mpf(0)
        for i in range(n):
            for a in range(3):
                e += mp.mpf(masses[i]) * mp.mpf(omegas[i][a]) ** 2 * (r[i][a] - mp.mpf(centers[i][a])) ** 2 / 2
            for j in range(i + 1, n):
                d = mp.sqrt(sum((r[i][a] - r[j][a]) ** 2 for a in range(3)))
                e += ke2 * charges[i] * charges[j] / d
        return e
    return energy


def mp_chain_energy(chain):
    """Dimensionless quartic-well chain energy."""
    def energy(v):
        n = len(v)
        e = mp.mpf(0)
        for k in range(n):
            du = v[k] - mp.mpf(chain.centers[k])
            e += mp.mpf(chain.rho[k]) * du ** 2 + mp.mpf(chain.alpha[k]) * du ** 4
            for p in range(k + 1, n):
                e += 2 / abs(v[k] - v[p])
        return e
    return energy


def harmonic_crystal(species, omegas, centers, guess=None):
    """Equilibrium, sites and assembled Hessian of ions in lab-aligned harmonic wells."""
    omegas = np.broadcast_to(np.asarray(omegas, float), (len(species), 3))
    centers = np.asarray(centers, float)
    model = HarmonicForces(species, omegas, centers)
    pos = minimize_energy(model, centers if guess is None else guess, length_scale=1e-8)
    sites = [SecularTriple(o, np.eye(3), p) for o, p in zip(omegas, pos)]
    return pos, sites, assemble_hessian(sites, pos, species)
