"""Taylor-weighted point spread function used by the scatterer renderer.

The renderer models each image axis as a band-limited aperture shaded with a
Taylor window.  The window is the classic cosine series

    W(xi) = 1 + sum_m c_m cos(2 pi m xi),   xi in [-1/2, 1/2],

and its transform gives the spatial impulse response in closed form as a sum
of shifted sinc kernels, so the PSF can be evaluated exactly at arbitrary
(off-grid) offsets without an interpolation table.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.optimize import brentq

__all__ = ["taylor_coefficients", "taylor_window_value", "TaylorPsf", "taylor_psf"]


def taylor_coefficients(sidelobe_db: float, nbar: int) -> np.ndarray:
    """Cosine-series coefficients ``c_1 .. c_{nbar-1}`` of a Taylor window.

    Parameters
    ----------
    sidelobe_db : float
        Peak sidelobe level in dB; the sign is ignored (``-35`` and ``35``
        mean the same window).
    nbar : int
        Number of near-in sidelobes held at the design level.
    """
    if nbar < 2:
        raise ValueError(f"nbar must be >= 2, got {nbar}")
    sll = abs(float(sidelobe_db))
    a = np.arccosh(10.0 ** (sll / 20.0)) / np.pi
    # Mainlobe dilation factor that stitches the Chebyshev-like near region
    # onto the sinc-like far region.
    sigma2 = nbar**2 / (a**2 + (nbar - 0.5) ** 2)
    m = np.arange(1, nbar, dtype=float)
    coefs = np.empty(nbar - 1)
    sign = 1.0
    for i, mi in enumerate(m):
        num = np.prod(1.0 - mi**2 / (sigma2 * (a**2 + (m - 0.5) ** 2)))
        den = np.prod(1.0 - mi**2 / m[m != mi] ** 2)
        coefs[i] = sign * num / den
        sign = -sign
    return coefs


def taylor_window_value(xi, coefs):
    """Evaluate the window at normalized frequency ``xi`` in [-1/2, 1/2]."""
    xi = np.asarray(xi, dtype=float)
    m = np.arange(1, len(coefs) + 1, dtype=float)
    return 1.0 + np.cos(2.0 * np.pi * xi[..., None] * m) @ coefs


class TaylorPsf:
    """Impulse response of a Taylor-shaded band, peak-normalized to 1.

    ``value(u)`` evaluates the response at offset ``u`` expressed in band
    units (u = distance * band_cycles_per_meter).  ``halfwidth_u`` is the
    offset where the response crosses -3 dB, so a sensor with resolution
    ``rho`` uses band ``2 * halfwidth_u / rho`` cycles per meter and its
    -3 dB mainlobe width comes out exactly ``rho``.
    """

    def __init__(self, sidelobe_db: float = -35.0, nbar: int = 4):
        self.sidelobe_db = -abs(float(sidelobe_db))
        self.nbar = int(nbar)
        self.coefs = taylor_coefficients(sidelobe_db, nbar)
        # peak is exactly 1 at u=0; the -3 dB crossing lies inside the first
        # sinc lobe for every usable sidelobe level.
        self.halfwidth_u = brentq(
            lambda u: self.value(u) - 2.0 ** (-0.5), 1e-9, 1.0, xtol=1e-14
        )

    def value(self, u):
        """PSF at offset ``u`` in band units; real, even, value(0) == 1."""
        u = np.asarray(u, dtype=float)
        out = np.sinc(u)
        for m, c in enumerate(self.coefs, start=1):
            out = out + 0.5 * c * (np.sinc(u - m) + np.sinc(u + m))
        return out

    def band_cycles(self, resolution: float) -> float:
        """Band width (cycles/meter) giving a -3 dB width of ``resolution``."""
        return 2.0 * self.halfwidth_u / float(resolution)

    def spatial_value(self, distance, resolution: float):
        """PSF at ``distance`` meters for a -3 dB width of ``resolution``."""
        return self.value(np.asarray(distance, dtype=float) * self.band_cycles(resolution))

    def window_at(self, freq, resolution: float):
        """Window amplitude at spatial frequency ``freq`` (cycles/meter).

        Zero outside the band that realizes ``resolution``.
        """
        freq = np.asarray(freq, dtype=float)
        band = self.band_cycles(resolution)
        inside = np.abs(freq) <= band / 2.0
        out = np.zeros_like(freq)
        out[inside] = taylor_window_value(freq[inside] / band, self.coefs)
        return out


@lru_cache(maxsize=16)
def taylor_psf(sidelobe_db: float, nbar: int) -> TaylorPsf:
    """Cached PSF factory; construction solves for the -3 dB crossing once."""
    return TaylorPsf(sidelobe_db, nbar)
