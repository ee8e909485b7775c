"""Reference evapotranspiration (FAO-56 Penman-Monteith), crop coefficients,
crop water requirement and the water requirement satisfaction index (WRSI).

All functions are scalar and pure. Monthly time steps: soil heat flux is 0.
"""
from __future__ import annotations

import calendar
import csv
import io
import math
from dataclasses import dataclass
from importlib import resources
from typing import Iterable, NamedTuple


class ClimateError(ValueError):
    pass


class YearMonth(NamedTuple):
    year: int
    month: int

    @classmethod
    def parse(cls, text: str) -> "YearMonth":
        try:
            y, m = text.strip().split("-")
            ym = cls(int(y), int(m))
        except ValueError:
            raise ClimateError(f"expected YYYY-MM, got {text!r}") from None
        if not 1 <= ym.month <= 12:
            raise ClimateError(f"month out of range in {text!r}")
        return ym

    def __str__(self):
        return f"{self.year:04d}-{self.month:02d}"

    @property
    def days(self) -> int:
        return calendar.monthrange(self.year, self.month)[1]

    def shift(self, n: int) -> "YearMonth":
        k = self.year * 12 + self.month - 1 + n
        return YearMonth(k // 12, k % 12 + 1)


def month_range(first: YearMonth, last: YearMonth) -> list[YearMonth]:
    if last < first:
        raise ClimateError(f"month range {first}..{last} is reversed")
    out = [first]
    while out[-1] < last:
        out.append(out[-1].shift(1))
    return out


@dataclass(frozen=True)
class ClimateRecord:
    year_month: YearMonth
    tair_c: float
    ea_kpa: float
    net_sw: float
    net_lw: float
    wind_2m: float
    aet_mm_day: float

    def __post_init__(self):
        for name in ("tair_c", "ea_kpa", "net_sw", "net_lw", "wind_2m", "aet_mm_day"):
            if not math.isfinite(getattr(self, name)):
                raise ClimateError(f"{name} must be finite")
        if not -60 <= self.tair_c <= 60:
            raise ClimateError(f"air temperature {self.tair_c} C outside [-60, 60]")
        if self.ea_kpa < 0:
            raise ClimateError("vapor pressure must be >= 0")
        if self.wind_2m < 0:
            raise ClimateError("wind speed must be >= 0")
        if self.aet_mm_day < 0:
            raise ClimateError("actual evapotranspiration must be >= 0")


@dataclass(frozen=True)
class SiteRecord:
    lat: float
    lon: float
    elevation_m: float

    def __post_init__(self):
        if not (math.isfinite(self.elevation_m) and -430 <= self.elevation_m <= 9000):
            raise ClimateError(f"elevation {self.elevation_m} m outside [-430, 9000]")


_SLOPE_COEF = 17.27 * 237.3


def sat_vapor_pressure(t_c: float) -> float:
    """Saturation vapor pressure, kPa."""
    return 0.6108 * math.exp(17.27 * t_c / (t_c + 237.3))


def slope_svp(t_c: float) -> float:
    """Slope of the saturation vapor pressure curve, kPa/degC.

    Exact derivative of :func:`sat_vapor_pressure`; the usual 4098 is this
    coefficient rounded.
    """
    return _SLOPE_COEF * sat_vapor_pressure(t_c) / (t_c + 237.3) ** 2


def atmospheric_pressure(elevation_m: float) -> float:
    """kPa."""
    return 101.3 * ((293.0 - 0.0065 * elevation_m) / 293.0) ** 5.26


def psychrometric_const(elevation_m: float) -> float:
    """kPa/degC."""
    return 0.000665 * atmospheric_pressure(elevation_m)


def penman_monteith(c: ClimateRecord, s: SiteRecord) -> float:
    """Grass-reference evapotranspiration, mm/day.

    Net longwave is positive outgoing. A negative vapor pressure deficit
    (supersaturated input) is treated as 0.
    """
    t = c.tair_c
    delta = slope_svp(t)
    gamma = psychrometric_const(s.elevation_m)
    rn = c.net_sw - c.net_lw
    deficit = max(sat_vapor_pressure(t) - c.ea_kpa, 0.0)
    u2 = c.wind_2m
    num = 0.408 * delta * rn + gamma * (900.0 / (t + 273.0)) * u2 * deficit
    den = delta + gamma * (1.0 + 0.34 * u2)
    return max(num / den, 0.0)


def wind_at_2m(speed: float, height_m: float) -> float:
    """Log-profile adjustment of a wind speed measured at ``height_m`` to 2 m."""
    if height_m == 2.0:
        return speed
    return speed * 4.87 / math.log(67.8 * height_m - 5.42)


# -- crops -------------------------------------------------------------------

@dataclass(frozen=True)
class CropSpec:
    name: str
    kc_init: float
    kc_mid: float
    kc_end: float
    planting_month: int
    months_init: int
    months_dev: int
    months_mid: int
    months_late: int

    def __post_init__(self):
        if min(self.kc_init, self.kc_mid, self.kc_end) <= 0:
            raise ClimateError(f"{self.name}: crop coefficients must be > 0")
        if not 1 <= self.planting_month <= 12:
            raise ClimateError(f"{self.name}: planting month must be 1..12")
        if self.months_init < 1 or self.months_mid < 1 or self.months_dev < 0 \
                or self.months_late < 0:
            raise ClimateError(f"{self.name}: initial and mid stages need >= 1 month, "
                               "development and late >= 0")
        if self.season_months > 12:
            raise ClimateError(f"{self.name}: season longer than 12 months")

    @property
    def season_months(self) -> int:
        return self.months_init + self.months_dev + self.months_mid + self.months_late

    def season_offset(self, month: int) -> int | None:
        """Months since planting for calendar ``month``, or None when dormant."""
        k = (month - self.planting_month) % 12
        return k if k < self.season_months else None

    def season_start(self, ym: YearMonth) -> YearMonth | None:
        k = self.season_offset(ym.month)
        return None if k is None else ym.shift(-k)


def kc_at(crop: CropSpec, t: float) -> float:
    """Crop coefficient ``t`` months after planting, piecewise linear in time."""
    a = crop.months_init
    b = a + crop.months_dev
    c = b + crop.months_mid
    if t < a:
        return crop.kc_init
    if t < b:
        return crop.kc_init + (t - a) / crop.months_dev * (crop.kc_mid - crop.kc_init)
    if t < c or crop.months_late == 0:
        return crop.kc_mid
    return crop.kc_mid + (t - c) / crop.months_late * (crop.kc_end - crop.kc_mid)


def kc_for(crop: CropSpec, month: int) -> float | None:
    """Crop coefficient at the midpoint of calendar ``month``; None when dormant."""
    k = crop.season_offset(month)
    if k is None:
        return None
    return kc_at(crop, k + 0.5)


CROP_COLUMNS = ("name", "kc_init", "kc_mid", "kc_end", "planting_month",
                "months_init", "months_dev", "months_mid", "months_late")


def read_crop_table(text: str) -> dict[str, CropSpec]:
    reader = csv.DictReader(io.StringIO(text))
    if list(reader.fieldnames or []) != list(CROP_COLUMNS):
        raise ClimateError(f"crop table columns must be {','.join(CROP_COLUMNS)}")
    crops = {}
    for n, row in enumerate(reader, start=2):
        try:
            spec = CropSpec(
                name=row["name"].strip(),
                kc_init=float(row["kc_init"]), kc_mid=float(row["kc_mid"]),
                kc_end=float(row["kc_end"]),
                planting_month=int(row["planting_month"]),
                months_init=int(row["months_init"]), months_dev=int(row["months_dev"]),
                months_mid=int(row["months_mid"]), months_late=int(row["months_late"]),
            )
        except (TypeError, ValueError) as e:
            raise ClimateError(f"crop table line {n}: {e}") from None
        if spec.name in crops:
            raise ClimateError(f"crop table line {n}: duplicate crop {spec.name!r}")
        crops[spec.name] = spec
    return crops


def default_crops() -> dict[str, CropSpec]:
    text = resources.files("simseed").joinpath("data/crops.csv").read_text(encoding="utf-8")
    return read_crop_table(text)


# -- water requirement and WRSI ----------------------------------------------

def water_requirement(pet_mm_day: float, kc: float) -> float:
    return pet_mm_day * kc


def wrsi_monthly(aet_mm_day: float, wr_mm_day: float, cap: bool = False) -> float | None:
    """100 * AET / WR; None when WR is 0."""
    if aet_mm_day < 0 or wr_mm_day < 0:
        raise ClimateError("AET and WR must be non-negative")
    if wr_mm_day == 0:
        return None
    v = 100.0 * (aet_mm_day / wr_mm_day)
    return min(v, 100.0) if cap else v


def wrsi_seasonal(months: Iterable[tuple[YearMonth, float, float]],
                  cap: bool = False) -> float | None:
    """Day-weighted seasonal WRSI from (month, aet, wr) rows of in-season months.

    Returns None when the season's total requirement is 0.
    """
    months = list(months)
    if not months:
        raise ClimateError("seasonal WRSI needs at least one in-season month")
    aet = math.fsum(a * ym.days for ym, a, _ in months)
    wr = math.fsum(w * ym.days for ym, _, w in months)
    return wrsi_monthly(aet, wr, cap)
