"""Station records: CSV/JSON ingest, gap filling and local solar time."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

MINUTES_PER_DAY = 1440


class IngestError(ValueError):
    """Raised for malformed or inconsistent station input."""


@dataclass(frozen=True)
class SolarClock:
    """Phase of the diurnal cycle across longitude.

    ``theta`` is minutes per degree, ``phi`` the direction in which local
    time moves (westward by default).
    """

    theta: float = 4.0
    phi: tuple[float, float] = (-1.0, 0.0)

    def __post_init__(self):
        if self.theta < 0:
            raise ValueError("theta must be nonnegative")
        if not np.isclose(max(abs(self.phi[0]), abs(self.phi[1])), 1.0):
            raise ValueError("phi must have unit max-norm")


@dataclass(frozen=True)
class StationRecord:
    site_id: str
    lon: float
    lat: float
    elev: float
    temps: np.ndarray

    def __post_init__(self):
        if not -180.0 <= self.lon <= 180.0:
            raise IngestError(f"site {self.site_id}: longitude {self.lon} out of range")
        if not -90.0 <= self.lat <= 90.0:
            raise IngestError(f"site {self.site_id}: latitude {self.lat} out of range")

    @property
    def n_missing(self) -> int:
        return int(np.isnan(self.temps).sum())


@dataclass(frozen=True)
class StationSet:
    records: tuple[StationRecord, ...]
    radiation: np.ndarray
    sunrise_sunset: np.ndarray  # (n_days, 2) minute-of-day at the central site
    central_lon: float
    central_id: str = ""
    central_lat: float | None = None
    clock: SolarClock = field(default_factory=SolarClock)

    def __post_init__(self):
        T = len(self.radiation)
        for rec in self.records:
            if len(rec.temps) != T:
                raise IngestError(f"site {rec.site_id}: length {len(rec.temps)} != {T}")
        ss = np.asarray(self.sunrise_sunset)
        if ss.size and np.any(ss[:, 0] >= ss[:, 1]):
            raise IngestError("sunrise must precede sunset on every day")

    @property
    def T(self) -> int:
        return len(self.radiation)

    @property
    def n(self) -> int:
        return len(self.records)

    @property
    def site_ids(self) -> list[str]:
        return [r.site_id for r in self.records]

    @property
    def temps(self) -> np.ndarray:
        """(n, T) matrix of temperatures."""
        return np.vstack([r.temps for r in self.records])

    @property
    def lonlat(self) -> np.ndarray:
        return np.array([[r.lon, r.lat] for r in self.records])

    @property
    def elev(self) -> np.ndarray:
        return np.array([r.elev for r in self.records])

    @property
    def n_missing(self) -> int:
        return sum(r.n_missing for r in self.records)

    @property
    def ref_lat(self) -> float:
        if self.central_lat is not None:
            return self.central_lat
        return float(np.mean(self.lonlat[:, 1]))

    def phase_offsets(self) -> np.ndarray:
        """Per-site local-time offsets in minutes relative to the central site."""
        return np.array([
            local_phase_offset(self.clock, r.lon, self.central_lon, r.lat, self.ref_lat)
            for r in self.records
        ])

    def subset(self, ids) -> "StationSet":
        keep = [r for r in self.records if r.site_id in set(ids)]
        return replace(self, records=tuple(keep))

    def with_temps(self, temps: np.ndarray) -> "StationSet":
        recs = tuple(replace(r, temps=np.asarray(t, dtype=float)) for r, t in zip(self.records, temps))
        return replace(self, records=recs)

    def filled(self) -> "StationSet":
        return self.with_temps([fill_missing_linear(r.temps) for r in self.records])


def local_phase_offset(clock: SolarClock, site_lon: float, ref_lon: float,
                       site_lat: float = 0.0, ref_lat: float = 0.0) -> float:
    """Minutes by which local solar time lags the reference site.

    Positive for sites west of the reference with the default clock.
    """
    d = np.array([site_lon - ref_lon, site_lat - ref_lat])
    return float(clock.theta * d @ np.asarray(clock.phi))


def fill_missing_linear(series) -> np.ndarray:
    """Replace NaN gaps by linear interpolation between present neighbours."""
    x = np.array(series, dtype=float)
    gaps = np.isnan(x)
    if not gaps.any():
        return x
    if gaps[0] or gaps[-1]:
        raise IngestError("series has a gap at its boundary; truncate the record first")
    idx = np.arange(len(x))
    x[gaps] = np.interp(idx[gaps], idx[~gaps], x[~gaps])
    return x


def load_station_csv(path, meta_path=None) -> StationSet:
    """Read a station CSV plus its sidecar metadata JSON.

    The CSV has a header ``minute,<site ids...>,radiation`` and one row per
    minute (1-based, contiguous). Empty cells are missing values.
    """
    path = Path(path)
    meta_path = Path(meta_path) if meta_path is not None else path.with_suffix(".json")
    meta = json.loads(meta_path.read_text())

    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestError(f"{path}: empty file") from None
        if len(header) < 3 or header[0] != "minute" or header[-1] != "radiation":
            raise IngestError(f"{path}: header must be minute,<sites...>,radiation")
        site_ids = header[1:-1]
        rows = []
        seen = set()
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise IngestError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                minute = int(row[0])
                vals = [float(c) if c.strip() else np.nan for c in row[1:]]
            except ValueError as exc:
                raise IngestError(f"{path}:{lineno}: {exc}") from None
            if minute in seen:
                raise IngestError(f"{path}:{lineno}: duplicate minute index {minute}")
            seen.add(minute)
            rows.append((minute, vals))

    rows.sort(key=lambda r: r[0])
    minutes = np.array([r[0] for r in rows])
    if len(minutes) and not np.array_equal(minutes, np.arange(1, len(minutes) + 1)):
        raise IngestError(f"{path}: minute index must run 1..T without holes")
    values = np.array([r[1] for r in rows], dtype=float).reshape(len(rows), len(header) - 1)

    sites_meta = {s["id"]: s for s in meta.get("sites", [])}
    records = []
    for k, sid in enumerate(site_ids):
        if sid not in sites_meta:
            raise IngestError(f"site {sid} has no entry in {meta_path}")
        m = sites_meta[sid]
        records.append(StationRecord(sid, float(m["lon"]), float(m["lat"]),
                                     float(m.get("elev", 0.0)), values[:, k]))
    central = meta.get("central", {})
    days = meta.get("days", [])
    ss = np.array([[d["sunrise"], d["sunset"]] for d in days], dtype=float).reshape(-1, 2)
    clock = SolarClock()
    if "clock" in meta:
        clock = SolarClock(float(meta["clock"]["theta"]), tuple(meta["clock"]["phi"]))
    return StationSet(
        records=tuple(records),
        radiation=values[:, -1],
        sunrise_sunset=ss,
        central_lon=float(central.get("lon", np.mean([r.lon for r in records]))),
        central_id=str(central.get("id", "")),
        central_lat=float(central["lat"]) if "lat" in central else None,
        clock=clock,
    )


def _fmt(v: float) -> str:
    return "" if np.isnan(v) else repr(float(v))


def write_station_csv(data: StationSet, path, meta_path=None) -> None:
    """Write ``data`` in the format read by :func:`load_station_csv`."""
    path = Path(path)
    meta_path = Path(meta_path) if meta_path is not None else path.with_suffix(".json")
    temps = data.temps
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["minute", *data.site_ids, "radiation"])
        for t in range(data.T):
            w.writerow([t + 1, *(_fmt(v) for v in temps[:, t]), _fmt(data.radiation[t])])
    meta_path.write_text(json.dumps(station_meta(data), indent=1))


def station_meta(data: StationSet) -> dict:
    central = {"id": data.central_id, "lon": data.central_lon}
    if data.central_lat is not None:
        central["lat"] = data.central_lat
    return {
        "sites": [{"id": r.site_id, "lon": r.lon, "lat": r.lat, "elev": r.elev} for r in data.records],
        "central": central,
        "days": [{"sunrise": float(a), "sunset": float(b)} for a, b in data.sunrise_sunset],
        "clock": {"theta": data.clock.theta, "phi": list(data.clock.phi)},
    }


def save_dataset(data: StationSet, path) -> None:
    """Binary dataset artifact (numpy ``.npz`` container)."""
    with open(path, "wb") as fh:
        np.savez(fh, temps=data.temps, radiation=data.radiation,
                 meta=np.array(json.dumps(station_meta(data))))


def load_dataset(path) -> StationSet:
    with np.load(path, allow_pickle=False) as z:
        temps = z["temps"]
        radiation = z["radiation"]
        meta = json.loads(str(z["meta"]))
    sites = meta["sites"]
    records = tuple(StationRecord(s["id"], s["lon"], s["lat"], s["elev"], temps[k])
                    for k, s in enumerate(sites))
    central = meta["central"]
    ss = np.array([[d["sunrise"], d["sunset"]] for d in meta["days"]], dtype=float).reshape(-1, 2)
    return StationSet(records, radiation, ss, float(central["lon"]), str(central.get("id", "")),
                      central.get("lat"), SolarClock(meta["clock"]["theta"], tuple(meta["clock"]["phi"])))


KM_PER_DEGREE = 111.0


def project_km(lonlat, ref_lat: float) -> np.ndarray:
    """Local equirectangular projection of (lon, lat) degrees to km."""
    lonlat = np.atleast_2d(np.asarray(lonlat, dtype=float))
    scale = np.array([KM_PER_DEGREE * np.cos(np.deg2rad(ref_lat)), KM_PER_DEGREE])
    return lonlat * scale
