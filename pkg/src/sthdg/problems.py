"""Analytic solutions and boundary data for the two wave experiments.

Fields follow the mixed first-order variables q = -grad(phi) and
v = -d(phi)/dt; the wave height is the restriction of v to the free
surface x2 = 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .mesh import EdgeTag

__all__ = [
    "HarmonicWave",
    "WaveMakerSpec",
    "dispersion_omega",
    "calibrate_phi0",
    "analytic_fields",
    "wavemaker_flux",
    "HarmonicWaveProblem",
    "WaveMakerProblem",
]


def dispersion_omega(k: float) -> float:
    """Frequency of a unit-depth linear gravity wave: omega^2 = k tanh k."""
    if k <= 0:
        raise ValueError(f"wave number must be positive, got {k}")
    return math.sqrt(k * math.tanh(k))


def calibrate_phi0(target_zeta_max: float, k: float) -> float:
    """Potential amplitude giving a wave-height maximum of ``target_zeta_max``."""
    if target_zeta_max < 0:
        raise ValueError("target amplitude must be nonnegative")
    return target_zeta_max / (dispersion_omega(k) * math.cosh(k))


@dataclass(frozen=True)
class HarmonicWave:
    """Time-harmonic linear wave phi = phi0 cosh(k(x2+1)) cos(omega t - k x1).

    Valid on a unit-depth strip x2 in [-1, 0]; omega satisfies the
    dispersion relation omega^2 = k tanh(k).
    """

    phi0: float
    k: float

    @property
    def omega(self) -> float:
        return dispersion_omega(self.k)

    @property
    def lambda_w(self) -> float:
        return 2.0 * math.pi / self.k

    @property
    def zeta_max(self) -> float:
        return self.phi0 * self.omega * math.cosh(self.k)

    @classmethod
    def from_wavelength(cls, lambda_w: float, zeta_max: float) -> "HarmonicWave":
        k = 2.0 * math.pi / lambda_w
        return cls(phi0=calibrate_phi0(zeta_max, k), k=k)

    def phi(self, x, t):
        x = np.asarray(x, dtype=float)
        t = np.asarray(t, dtype=float)
        ch = np.cosh(self.k * (x[..., 1] + 1.0))
        return self.phi0 * ch * np.cos(self.omega * t - self.k * x[..., 0])

    def q(self, x, t):
        """Velocity q = -grad(phi), shape (..., 2)."""
        x = np.asarray(x, dtype=float)
        t = np.asarray(t, dtype=float)
        arg = self.omega * t - self.k * x[..., 0]
        ch = np.cosh(self.k * (x[..., 1] + 1.0))
        sh = np.sinh(self.k * (x[..., 1] + 1.0))
        q1 = -self.phi0 * self.k * ch * np.sin(arg)
        q2 = -self.phi0 * self.k * sh * np.cos(arg)
        return np.stack([q1, q2], axis=-1)

    def v(self, x, t):
        """Time derivative variable v = -d(phi)/dt."""
        x = np.asarray(x, dtype=float)
        t = np.asarray(t, dtype=float)
        ch = np.cosh(self.k * (x[..., 1] + 1.0))
        return self.phi0 * self.omega * ch * np.sin(self.omega * t - self.k * x[..., 0])

    def zeta(self, x1, t):
        x1 = np.asarray(x1, dtype=float)
        return self.phi0 * self.omega * math.cosh(self.k) * np.sin(
            self.omega * np.asarray(t, dtype=float) - self.k * x1)


def analytic_fields(wave: HarmonicWave, x, t):
    """Evaluate (phi, q, v, zeta) of the harmonic wave at points and times."""
    x = np.asarray(x, dtype=float)
    return (wave.phi(x, t), wave.q(x, t), wave.v(x, t),
            wave.zeta(x[..., 0], t))


@dataclass(frozen=True)
class WaveMakerSpec:
    """Piston wave maker acting on the x1 = 0 wall of a rectangular tank."""

    a: float = 0.05
    f: float = 1.8138
    domain: tuple = (0.0, 10.0, 1.0)     # (L, R, H)
    T_final: float = 53.4
    dt: float = 0.2


def wavemaker_flux(spec: WaveMakerSpec, t, literal: bool = False):
    """Prescribed normal flux g(t) for q.n on the wave-maker wall.

    The default is g(t) = a sin(f t), the real part of i a exp(-i f t),
    which sustains the wave train.  ``literal=True`` selects the decaying
    envelope a exp(-a f t) instead (the printed formula taken at face
    value, kept for comparison).
    """
    t = np.asarray(t, dtype=float)
    if literal:
        return spec.a * np.exp(-spec.a * spec.f * t)
    return spec.a * np.sin(spec.f * t)


class HarmonicWaveProblem:
    """Initial and boundary data for the periodic harmonic-wave runs."""

    has_analytic = True

    def __init__(self, wave: HarmonicWave):
        self.wave = wave

    def initial_q(self, x):
        return self.wave.q(x, 0.0)

    def initial_zeta(self, x1):
        return self.wave.zeta(x1, 0.0)

    def facet_flux(self, tag: EdgeTag):
        # bottom satisfies q.n = 0 exactly (sinh vanishes at x2 = -1)
        return None

    def exact_q(self, x, t):
        return self.wave.q(x, t)

    def exact_v(self, x, t):
        return self.wave.v(x, t)

    def exact_zeta(self, x1, t):
        return self.wave.zeta(x1, t)


class WaveMakerProblem:
    """Quiescent tank driven through the wave-maker wall."""

    has_analytic = False

    def __init__(self, spec: WaveMakerSpec | None = None, literal: bool = False):
        self.spec = spec if spec is not None else WaveMakerSpec()
        self.literal = literal

    def initial_q(self, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (2,))

    def initial_zeta(self, x1):
        return np.zeros_like(np.asarray(x1, dtype=float))

    def facet_flux(self, tag: EdgeTag):
        if tag == EdgeTag.WAVE_MAKER:
            spec, literal = self.spec, self.literal

            def g(x, t):
                return np.broadcast_to(wavemaker_flux(spec, t, literal),
                                       np.asarray(x)[..., 0].shape).copy()

            return g
        return None
