"""Brute-force reference forces for periodic cuboid boxes.

Used only for verification.  Works from positions alone with the minimum
image convention, so it shares no cell, referral or transform machinery
with the production passes.
"""

from __future__ import annotations

import numpy as np


def minimum_image_forces(positions, box, epsilon=1.0, sigma=1.0, r_cut=2.5):
    """All-pairs truncated-shifted LJ forces.

    Returns ``(forces, per-molecule energy with pair energies split in half,
    number of pairs inside r_cut)``.  ``box`` must exceed ``2 * r_cut`` on
    every axis for the minimum image to be the only image in range.
    """
    x = np.asarray(positions, dtype=float)
    box = np.asarray(box, dtype=float)
    if np.any(box <= 2.0 * r_cut):
        raise ValueError("box must be larger than twice the cut-off on every axis")
    n = len(x)
    F = np.zeros((n, 3))
    E = np.zeros(n)
    count = 0
    rc2 = r_cut * r_cut
    s6c = (sigma / r_cut) ** 6
    shift = 4.0 * epsilon * (s6c * s6c - s6c)
    for i in range(n - 1):
        d = x[i] - x[i + 1:]
        d -= box * np.round(d / box)
        r2 = (d * d).sum(axis=1)
        m = r2 < rc2
        if not m.any():
            continue
        s2 = sigma * sigma / r2[m]
        s6 = s2 ** 3
        u = 4.0 * epsilon * (s6 * s6 - s6) - shift
        fr = 24.0 * epsilon * (2.0 * s6 * s6 - s6) / r2[m]
        f = fr[:, None] * d[m]
        j = np.flatnonzero(m) + i + 1
        F[i] += f.sum(axis=0)
        np.subtract.at(F, j, f)
        E[i] += 0.5 * u.sum()
        np.add.at(E, j, 0.5 * u)
        count += int(m.sum())
    return F, E, count
