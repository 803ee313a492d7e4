from __future__ import annotations

import numpy as np


def composite_alpha(ordered) -> np.ndarray:
    """Front-to-back alpha compositing of ``(color, alpha)`` samples.

    ``C = sum_i c_i a_i prod_{j<i} (1 - a_j)``; an empty list gives black.
    """
    out = np.zeros(3)
    transmittance = 1.0
    for color, alpha in ordered:
        out = out + np.asarray(color, dtype=float) * (alpha * transmittance)
        transmittance *= 1.0 - alpha
    return out
