"""Rate-distortion bookkeeping: PSNR, RD curves and their CSV form, and
BD-rate (average relative rate difference between two curves at equal
quality, from cubic fits of log-rate against PSNR)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, FormatError

RD_CSV_HEADER = "mode,lambda,bpp,rmse,psnr"


def psnr_from_rmse(rmse):
    """Peak signal-to-noise ratio in dB for signals on [0, 1]."""
    if not rmse > 0:
        raise ContractError("psnr_from_rmse: rmse must be positive")
    return 20.0 * math.log10(1.0 / rmse)


def bits_per_pixel(total_bits, height, width):
    if height < 1 or width < 1:
        raise ContractError("bits_per_pixel: dimensions must be >= 1")
    if total_bits < 0:
        raise ContractError("bits_per_pixel: negative bit count")
    return total_bits / (height * width)


@dataclass(frozen=True)
class RDPoint:
    mode: str
    lam: float
    bpp: float
    rmse: float
    psnr: float

    @classmethod
    def make(cls, mode, lam, bpp, rmse):
        return cls(mode=mode, lam=lam, bpp=bpp, rmse=rmse,
                   psnr=psnr_from_rmse(rmse))

    def __post_init__(self):
        if self.bpp <= 0:
            raise ContractError("RDPoint: bpp must be positive")
        if self.rmse <= 0:
            raise ContractError("RDPoint: rmse must be positive")


@dataclass(frozen=True)
class RDCurve:
    points: tuple

    def __post_init__(self):
        if len(self.points) < 2:
            raise ContractError("RDCurve needs at least 2 points")
        rates = [p.bpp for p in self.points]
        if any(b <= a for a, b in zip(rates, rates[1:])):
            raise ContractError("RDCurve: rates must be strictly increasing")

    @classmethod
    def from_points(cls, points):
        ordered = tuple(sorted(points, key=lambda p: p.bpp))
        return cls(points=ordered)

    @property
    def rates(self):
        return np.array([p.bpp for p in self.points])

    @property
    def qualities(self):
        return np.array([p.psnr for p in self.points])


def bd_rate(reference, test):
    """Average rate difference of `test` against `reference` at equal PSNR, in
    percent (negative = test needs fewer bits). Cubic fit of log10(rate) as a
    function of PSNR, integrated in closed form over the shared PSNR span."""
    for curve in (reference, test):
        if len(curve.points) < 4:
            raise ContractError("bd_rate needs >= 4 points per curve")
    lo = max(reference.qualities.min(), test.qualities.min())
    hi = min(reference.qualities.max(), test.qualities.max())
    if hi <= lo:
        raise ContractError("bd_rate: curves share no PSNR range")
    avg = {}
    for name, curve in (("ref", reference), ("test", test)):
        coeffs = np.polyfit(curve.qualities, np.log10(curve.rates), 3)
        integral = np.polyint(coeffs)
        avg[name] = (np.polyval(integral, hi) - np.polyval(integral, lo)) / (hi - lo)
    return float((10.0 ** (avg["test"] - avg["ref"]) - 1.0) * 100.0)


def utilization(bd_test_vs_lower, bd_upper_vs_lower):
    """Share of the ideal rate-saving margin actually captured, in percent:
    how much of the gap between upper and lower baselines the tested codec
    closes. Both inputs are BD-rates against the lower baseline."""
    if bd_upper_vs_lower >= 0:
        raise ContractError(
            "utilization: the upper bound must save rate against the baseline "
            "(its BD-rate must be negative)"
        )
    return float(bd_test_vs_lower / bd_upper_vs_lower * 100.0)


# ---------------------------------------------------------------------------
# CSV form; floats are written with repr so parse -> emit is byte-identical


def rd_csv(points):
    lines = [RD_CSV_HEADER]
    for p in points:
        lines.append(f"{p.mode},{p.lam!r},{p.bpp!r},{p.rmse!r},{p.psnr!r}")
    return "\n".join(lines) + "\n"


def parse_rd_csv(text):
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != RD_CSV_HEADER:
        raise FormatError(f"RD CSV must start with header '{RD_CSV_HEADER}'")
    points = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != 5:
            raise FormatError(f"RD CSV line {lineno}: expected 5 fields")
        mode = parts[0]
        try:
            lam, bpp, rmse, psnr = (float(v) for v in parts[1:])
        except ValueError as exc:
            raise FormatError(f"RD CSV line {lineno}: bad number") from exc
        points.append(RDPoint(mode=mode, lam=lam, bpp=bpp, rmse=rmse, psnr=psnr))
    return points


def write_rd_csv(path, points):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(rd_csv(points))


def read_rd_csv(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_rd_csv(fh.read())
