"""Physical layer: power-domain superposition, AWGN channel, pilot data.

Several devices transmit simultaneously on the same resource; the channel
input is the power-weighted sum of their symbols and the receiver sees it
through a complex channel coefficient plus circularly-symmetric Gaussian
noise. Labelled pilot sets for groups of training devices and for a target
device are generated here, deterministically per seed.

Received samples are carried as complex numbers and presented to the
neural detectors as (real, imaginary) pairs, even though the stock BPSK
setup with h = +-1 is purely real; the two-wide input is what fixes the
detector's parameter count.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class Constellation:
    """Symbol alphabet with unit mean power."""

    points: np.ndarray

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=np.complex128)
        object.__setattr__(self, "points", pts)
        if pts.ndim != 1 or pts.size < 1:
            raise ValueError("constellation needs at least one point")
        if len(set(pts.tolist())) != pts.size:
            raise ValueError("constellation points must be distinct")
        mean_power = float(np.mean(np.abs(pts) ** 2))
        if abs(mean_power - 1.0) > 1e-12:
            raise ValueError(f"mean power is {mean_power}, expected 1")

    @property
    def order(self) -> int:
        return self.points.size


def bpsk() -> Constellation:
    """Binary alphabet {+1, -1} on the real axis."""
    return Constellation(np.array([1.0 + 0.0j, -1.0 + 0.0j]))


def _check_powers(powers) -> np.ndarray:
    powers = np.asarray(powers, dtype=np.float64)
    if powers.ndim != 1 or powers.size < 1:
        raise ValueError("need at least one device power")
    if np.any(powers <= 0):
        raise ValueError("powers must be positive")
    if np.any(np.diff(powers) >= 0):
        raise ValueError("powers must be strictly descending")
    return powers


@dataclass(frozen=True)
class DeviceGroupConfig:
    """Per-group transmit powers (strictly descending) and channel."""

    powers: np.ndarray
    h: complex = 1.0 + 0.0j

    def __post_init__(self) -> None:
        object.__setattr__(self, "powers", _check_powers(self.powers))
        object.__setattr__(self, "h", complex(self.h))

    @property
    def n_devices(self) -> int:
        return self.powers.size


@dataclass(frozen=True)
class NoiseModel:
    """Complex AWGN with total variance sigma2 (sigma2/2 per component)."""

    sigma2: float

    def __post_init__(self) -> None:
        if self.sigma2 < 0:
            raise ValueError("noise variance must be >= 0")


def superpose(symbols, powers) -> complex:
    """Channel input: sum over devices of sqrt(P_l) * x_l."""
    symbols = np.asarray(symbols, dtype=np.complex128)
    powers = _check_powers(powers)
    if symbols.shape != powers.shape:
        raise ValueError("one symbol per device power is required")
    return complex(np.sqrt(powers) @ symbols)


def transmit(x, h, noise: NoiseModel, rng: np.random.Generator):
    """y = h*x + n with n circularly-symmetric, sigma2/2 per component.

    `x` may be a scalar or an array of channel inputs.
    """
    x = np.asarray(x, dtype=np.complex128)
    scale = np.sqrt(noise.sigma2 / 2.0)
    n = scale * (rng.standard_normal(x.shape) + 1j * rng.standard_normal(x.shape))
    y = complex(h) * x + n
    return complex(y) if y.ndim == 0 else y


def snr_db_to_sigma2(snr_db: float, total_power: float) -> float:
    """Noise variance for a given SNR against the total superimposed power.

    With unit-power symbols the received signal power is sum(P_l), so
    sigma2 = sum(P_l) / 10^(snr_db/10).
    """
    if total_power <= 0:
        raise ValueError("total power must be positive")
    return float(total_power) / 10.0 ** (float(snr_db) / 10.0)


@dataclass
class PilotSet:
    """Labelled pilot transmissions for one device group.

    symbols holds constellation indices, shape (n, L); received holds the
    corresponding channel outputs.
    """

    symbols: np.ndarray
    received: np.ndarray
    group_id: int = 0
    h: complex = 1.0 + 0.0j
    snr_db: float = 0.0

    def __post_init__(self) -> None:
        self.symbols = np.asarray(self.symbols, dtype=np.intp)
        self.received = np.asarray(self.received, dtype=np.complex128)
        if self.symbols.ndim != 2:
            raise ValueError("symbols must be an (n, L) index array")
        if self.received.shape != (self.symbols.shape[0],):
            raise ValueError("one received sample per pilot is required")
        if np.any(self.symbols < 0):
            raise ValueError("symbol indices must be >= 0")
        self.h = complex(self.h)

    @property
    def size(self) -> int:
        return self.symbols.shape[0]

    @property
    def n_devices(self) -> int:
        return self.symbols.shape[1]

    def rx_features(self) -> np.ndarray:
        """Received samples as (n, 2) real features [Re y, Im y]."""
        return np.column_stack([self.received.real, self.received.imag])

    def take(self, n: int) -> "PilotSet":
        """The first n pilots as a new set."""
        if not 1 <= n <= self.size:
            raise ValueError(f"cannot take {n} pilots from a set of {self.size}")
        return PilotSet(self.symbols[:n].copy(), self.received[:n].copy(),
                        self.group_id, self.h, self.snr_db)


@dataclass
class MetaDataset:
    """Pilot sets of K training device groups sharing one link setup."""

    constellation: Constellation
    powers: np.ndarray
    groups: list[PilotSet] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.powers = _check_powers(self.powers)
        for g in self.groups:
            if g.n_devices != self.powers.size:
                raise ValueError("all groups must use the same device count")
            if np.any(g.symbols >= self.constellation.order):
                raise ValueError("symbol index out of constellation range")

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    def group_config(self, k: int) -> DeviceGroupConfig:
        return DeviceGroupConfig(self.powers, self.groups[k].h)


def draw_transmissions(n: int, constellation: Constellation, powers, h,
                       sigma2: float, rng: np.random.Generator):
    """n i.i.d. uniform symbol tuples pushed through the channel.

    Returns (indices (n, L), received (n,)).
    """
    powers = _check_powers(powers)
    idx = rng.integers(0, constellation.order, size=(n, powers.size))
    x = constellation.points[idx] @ np.sqrt(powers)
    scale = np.sqrt(sigma2 / 2.0)
    noise = scale * (rng.standard_normal(n) + 1j * rng.standard_normal(n))
    return idx, complex(h) * x + noise


def gen_meta_dataset(K: int, N: int, constellation: Constellation, powers,
                     snr_db: float, seed: int) -> MetaDataset:
    """Pilot sets for K training groups, N pilots each.

    The first K/2 groups see a channel of +1 and the rest -1; K must be
    even so the split is exact. Each group draws from its own seed stream
    derived from (seed, group index), so group k's pilots do not depend on
    K.
    """
    if K < 1:
        raise ValueError("need at least one device group")
    if K % 2 != 0:
        raise ValueError("device-group count must be even for the +-1 channel split")
    if N < 1:
        raise ValueError("need at least one pilot per group")
    powers = _check_powers(powers)
    sigma2 = snr_db_to_sigma2(snr_db, float(powers.sum()))
    groups = []
    for k in range(K):
        h = 1.0 + 0.0j if k < K // 2 else -1.0 + 0.0j
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(k,)))
        idx, y = draw_transmissions(N, constellation, powers, h, sigma2, rng)
        groups.append(PilotSet(idx, y, group_id=k, h=h, snr_db=snr_db))
    return MetaDataset(constellation, powers, groups)


def gen_target_pilots(P: int, constellation: Constellation, powers,
                      h, snr_db: float, seed: int) -> PilotSet:
    """P labelled pilots from a target device.

    When h is None the channel is drawn uniformly from {+1, -1} before the
    pilots (so the draw order is part of the seed contract).
    """
    if P < 1:
        raise ValueError("need at least one pilot")
    powers = _check_powers(powers)
    rng = np.random.default_rng(seed)
    if h is None:
        h = 1.0 + 0.0j if rng.random() < 0.5 else -1.0 + 0.0j
    sigma2 = snr_db_to_sigma2(snr_db, float(powers.sum()))
    idx, y = draw_transmissions(P, constellation, powers, h, sigma2, rng)
    return PilotSet(idx, y, group_id=-1, h=h, snr_db=snr_db)


# --- CSV interchange -------------------------------------------------------
# Columns: group_id, pilot_index, sym_dev1..sym_devL, y_re, y_im, h_re,
# h_im, snr_db. One row per pilot.


def save_pilot_csv(path, pilot_sets: Sequence[PilotSet]) -> None:
    """Write pilot sets to CSV, one row per pilot."""
    pilot_sets = list(pilot_sets)
    if not pilot_sets:
        raise ValueError("nothing to save")
    n_dev = pilot_sets[0].n_devices
    header = ["group_id", "pilot_index"]
    header += [f"sym_dev{l + 1}" for l in range(n_dev)]
    header += ["y_re", "y_im", "h_re", "h_im", "snr_db"]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for ps in pilot_sets:
            if ps.n_devices != n_dev:
                raise ValueError("pilot sets disagree on device count")
            for i in range(ps.size):
                row = [ps.group_id, i]
                row += [int(s) for s in ps.symbols[i]]
                row += [repr(float(ps.received[i].real)),
                        repr(float(ps.received[i].imag)),
                        repr(float(ps.h.real)), repr(float(ps.h.imag)),
                        repr(float(ps.snr_db))]
                w.writerow(row)


def load_pilot_csv(path) -> list[PilotSet]:
    """Read pilot sets written by save_pilot_csv, grouped by group_id."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        sym_cols = [c for c in header if c.startswith("sym_dev")]
        n_dev = len(sym_cols)
        if header[: 2 + n_dev + 5] != (
            ["group_id", "pilot_index"] + [f"sym_dev{l + 1}" for l in range(n_dev)]
            + ["y_re", "y_im", "h_re", "h_im", "snr_db"]
        ):
            raise ValueError(f"unrecognised pilot CSV header in {path}")
        by_group: dict[int, list] = {}
        meta: dict[int, tuple] = {}
        for row in reader:
            gid = int(row[0])
            syms = [int(v) for v in row[2 : 2 + n_dev]]
            y = complex(float(row[2 + n_dev]), float(row[3 + n_dev]))
            h = complex(float(row[4 + n_dev]), float(row[5 + n_dev]))
            snr = float(row[6 + n_dev])
            by_group.setdefault(gid, []).append((syms, y))
            meta[gid] = (h, snr)
    out = []
    for gid in by_group:
        syms = np.array([r[0] for r in by_group[gid]], dtype=np.intp)
        ys = np.array([r[1] for r in by_group[gid]], dtype=np.complex128)
        h, snr = meta[gid]
        out.append(PilotSet(syms, ys, group_id=gid, h=h, snr_db=snr))
    return out


def save_meta_dataset_csv(path, dataset: MetaDataset) -> None:
    save_pilot_csv(path, dataset.groups)


def load_meta_dataset_csv(path, constellation: Constellation, powers) -> MetaDataset:
    return MetaDataset(constellation, np.asarray(powers, dtype=np.float64),
                       load_pilot_csv(path))
