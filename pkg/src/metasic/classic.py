"""Model-based baselines: stage-wise interference cancellation and a
brute-force joint maximum-likelihood oracle for small alphabets.

The stage-wise detector gets the channel coefficient as ground truth: it
decodes the strongest device first by minimum distance, subtracts the
reconstructed contribution, and moves on. Residual interference from later
devices is treated as noise at each stage.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .phy import Constellation, _check_powers, draw_transmissions, snr_db_to_sigma2

ML_ORACLE_MAX_TUPLES = 4096


@dataclass(frozen=True)
class ClassicDetector:
    """Stage-wise canceller with known powers and channel."""

    constellation: Constellation
    powers: np.ndarray
    h: complex = 1.0 + 0.0j

    def __post_init__(self) -> None:
        object.__setattr__(self, "powers", _check_powers(self.powers))
        object.__setattr__(self, "h", complex(self.h))

    @property
    def n_devices(self) -> int:
        return self.powers.size


def sic_detect_batch(y, det: ClassicDetector) -> np.ndarray:
    """Stage-wise detection of many samples; returns (n, L) symbol indices.

    Stage l picks argmin_g |r - h*sqrt(P_l)*g|^2 and subtracts the decoded
    contribution from the running residual. np.argmin resolves distance
    ties toward the lowest constellation index.
    """
    y = np.asarray(y, dtype=np.complex128)
    r = y.copy()
    pts = det.constellation.points
    out = np.empty((y.size, det.n_devices), dtype=np.intp)
    for l, p in enumerate(det.powers):
        cand = det.h * np.sqrt(p) * pts
        d = np.abs(r[:, None] - cand[None, :]) ** 2
        out[:, l] = np.argmin(d, axis=1)
        r = r - cand[out[:, l]]
    return out


def sic_detect(y, det: ClassicDetector) -> tuple[int, ...]:
    """Stage-wise detection of a single received sample."""
    return tuple(int(i) for i in sic_detect_batch(np.array([y]), det)[0])


def _tuple_table(det: ClassicDetector):
    """All M^L symbol tuples in lexicographic order plus their channel inputs."""
    m = det.constellation.order
    n_tuples = m ** det.n_devices
    if n_tuples > ML_ORACLE_MAX_TUPLES:
        raise ValueError(
            f"{n_tuples} candidate tuples exceed the oracle limit of "
            f"{ML_ORACLE_MAX_TUPLES}"
        )
    tuples = np.array(
        list(itertools.product(range(m), repeat=det.n_devices)), dtype=np.intp
    )
    composite = det.constellation.points[tuples] @ np.sqrt(det.powers)
    return tuples, composite


def ml_oracle_detect_batch(y, det: ClassicDetector) -> np.ndarray:
    """Joint maximum-likelihood decisions by exhaustive enumeration.

    Ties resolve to the lexicographically smallest tuple because the
    candidates are enumerated in lexicographic order.
    """
    y = np.asarray(y, dtype=np.complex128)
    tuples, composite = _tuple_table(det)
    d = np.abs(y[:, None] - det.h * composite[None, :]) ** 2
    return tuples[np.argmin(d, axis=1)]


def ml_oracle_detect(y, det: ClassicDetector) -> tuple[int, ...]:
    return tuple(int(i) for i in ml_oracle_detect_batch(np.array([y]), det)[0])


def _ser_from_decisions(decisions, truth) -> np.ndarray:
    return (decisions != truth).mean(axis=0)


def classic_ser(det: ClassicDetector, snr_db: float, n_symbols: int,
                seed: int, chunk: int = 200_000) -> np.ndarray:
    """Monte-Carlo symbol error rate per device over fresh transmissions."""
    if n_symbols < 1:
        raise ValueError("need at least one symbol")
    sigma2 = snr_db_to_sigma2(snr_db, float(det.powers.sum()))
    rng = np.random.default_rng(seed)
    errors = np.zeros(det.n_devices)
    done = 0
    while done < n_symbols:
        n = min(chunk, n_symbols - done)
        idx, y = draw_transmissions(n, det.constellation, det.powers, det.h,
                                    sigma2, rng)
        dec = sic_detect_batch(y, det)
        errors += (dec != idx).sum(axis=0)
        done += n
    return errors / n_symbols
