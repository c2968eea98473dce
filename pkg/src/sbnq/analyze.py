"""Numerical experiments behind the three figures, emitted as CSV reports.

* ``fig1``: how much of a standard Gaussian falls inside [-4, 4].
* ``fig2``: histogram of floor-quantized shift-based batch norm of N(100, 1000).
* ``fig3``: output std after dividing by sigma with multiply+shift vs. shift only.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .quantcore import CLIP, SbnqParams, ap2, mulshift_from_scale, round_half_away, sbnq_int

EXPERIMENTS = ("fig1", "fig2", "fig3")
MULSHIFT_BITS = 16


@dataclass
class ExperimentReport:
    name: str
    columns: list[str]
    rows: list[tuple]
    params: dict = field(default_factory=dict)

    def column(self, name: str) -> np.ndarray:
        i = self.columns.index(name)
        return np.array([r[i] for r in self.rows])

    def to_csv(self) -> str:
        buf = io.StringIO()
        for k, v in self.params.items():
            buf.write(f"# {k}={v!r}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])
        return buf.getvalue()

    def write(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / f"{self.name}_seed{self.params.get('seed', 0)}.csv"
        path.write_text(self.to_csv())
        return path


def gaussian_coverage(samples: int = 10**6, seed: int = 0, std: float = 1.0) -> ExperimentReport:
    """Histogram of N(0, std) over 100 bins on [-6, 6] and the fraction inside [-4, 4]."""
    if samples < 10**4:
        raise ValueError("need at least 10^4 samples")
    x = np.random.default_rng(seed).normal(0.0, std, samples)
    counts, edges = np.histogram(x, bins=100, range=(-6.0, 6.0))
    inside = float(np.mean(np.abs(x) <= CLIP))
    rows = [(float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(100)]
    return ExperimentReport("fig1", ["bin_lo", "bin_hi", "count"], rows,
                            {"seed": seed, "samples": samples, "std": std, "in_range_fraction": inside})


def sbn_histogram(mean: float = 100.0, std: float = 1000.0, samples: int = 10**6, seed: int = 0) -> ExperimentReport:
    """Unit-bin histogram of floor((x - round(mu_hat)) / 2^ap2(sigma_hat)).

    Computed on the integer path: act = floor(x), then (act - bias) >> shift
    with a 31-bit output range so nothing saturates. Since bias is an integer,
    floor(floor(x) - bias) / 2^s) equals floor((x - bias) / 2^s).
    """
    if not std > 0:
        raise ValueError("std must be positive")
    x = np.random.default_rng(seed).normal(mean, std, samples)
    mu_hat, sigma_hat = float(x.mean()), float(x.std())
    shift = ap2(sigma_hat)  # raises on zero spread
    if shift < 0:
        raise ValueError("sigma below 1/sqrt(2) needs a left shift")
    params = SbnqParams([int(round_half_away(mu_hat))], [shift], signed_output=True, bits=32)
    q = sbnq_int(np.floor(x).astype(np.int64), params, channel=0)
    values, counts = np.unique(q, return_counts=True)
    rows = [(int(v), int(c)) for v, c in zip(values, counts)]
    return ExperimentReport("fig2", ["value", "count"], rows,
                            {"seed": seed, "samples": samples, "mean": mean, "std": std,
                             "mu_hat": mu_hat, "sigma_hat": sigma_hat, "shift": shift})


def default_grid() -> np.ndarray:
    return np.round(np.arange(0.0, 6.0 + 1e-9, 0.05), 10)


def shift_vs_mulshift(exponents=None, samples: int = 10**5, seed: int = 0) -> ExperimentReport:
    """Output std of x / sigma_hat approximated two ways, for sigma = 2^e.

    mul-shift: x * M >> m with M = round(2^m / sigma_hat).
    shift-only: x >> ap2(sigma_hat).
    The ideal output std is 1. Divisions are evaluated without flooring so the
    numbers measure the divisor approximation alone.
    """
    exponents = default_grid() if exponents is None else np.asarray(exponents, dtype=np.float64)
    rng = np.random.default_rng(seed)
    rows = []
    for e in exponents:
        sigma = 2.0 ** float(e)
        x = rng.normal(0.0, sigma, samples)
        sigma_hat = float(x.std())
        ms = mulshift_from_scale(sigma_hat, MULSHIFT_BITS)
        std_mul = float(ms.apply(x).std())
        std_shift = float((x / 2.0 ** ap2(sigma_hat)).std())
        rows.append((float(e), sigma, sigma_hat, ms.multiplier, ms.shift_amount, std_mul, std_shift))
    return ExperimentReport(
        "fig3",
        ["exponent", "sigma", "sigma_hat", "multiplier", "mul_shift_bits", "std_mulshift", "std_shiftonly"],
        rows, {"seed": seed, "samples": samples, "points": len(rows)},
    )


def run(name: str, seed: int = 0, samples: int | None = None) -> ExperimentReport:
    if name == "fig1":
        return gaussian_coverage(samples or 10**6, seed)
    if name == "fig2":
        return sbn_histogram(100.0, 1000.0, samples or 10**6, seed)
    if name == "fig3":
        return shift_vs_mulshift(None, samples or 10**5, seed)
    raise KeyError(f"unknown experiment {name!r}; choose from {', '.join(EXPERIMENTS)}")
