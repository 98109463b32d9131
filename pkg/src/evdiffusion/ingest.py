"""Turn raw charging-session records into the two training corpora.

Rate signals are treated as zero-order-hold step functions: each sample
holds until the next one, and the last sample holds for one typical
sampling interval (never past ``done_charging_time``). All binning is by
time-weighted mean, so bin totals reproduce the integral of the signal.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta, timezone
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

CURVE_LENGTH = 720  # 12 h at 1-min resolution
PROFILE_LENGTH = 288  # one day at 5-min resolution
NOMINAL_VOLTAGE = 208.0

CSV_COLUMNS = ("session_id", "station_id", "connection_time", "done_charging_time", "kwh_delivered", "rate_points")


@dataclass
class SessionRecord:
    session_id: str
    station_id: str
    connection_time: datetime
    done_charging_time: datetime
    kwh_delivered: float
    rate_times: np.ndarray  # epoch seconds
    rate_values: np.ndarray

    @property
    def signal_end(self) -> float:
        """Epoch second where the held signal stops."""
        t = self.rate_times
        done = self.done_charging_time.timestamp()
        if len(t) == 0:
            return done
        hold = float(np.median(np.diff(t))) if len(t) > 1 else done - t[-1]
        return min(t[-1] + max(hold, 0.0), max(done, t[-1]))

    def integral(self) -> float:
        """Integral of the rate signal in rate-units x hours."""
        if len(self.rate_times) == 0:
            return 0.0
        edges = np.append(self.rate_times, self.signal_end)
        return float((np.diff(edges) * self.rate_values).sum() / 3600.0)


@dataclass
class IngestReport:
    skipped_rows: list[tuple[int, str]] = field(default_factory=list)
    truncated_curves: int = 0
    dropped_short: int = 0
    empty_days: list[str] = field(default_factory=list)
    voltage: float = NOMINAL_VOLTAGE
    rate_unit: str = "A"

    def lines(self) -> list[str]:
        out = [
            f"rate_unit = {self.rate_unit}",
            f"nominal_voltage = {self.voltage!r}",
            f"skipped_rows = {len(self.skipped_rows)}",
            f"truncated_curves = {self.truncated_curves}",
            f"dropped_short_curves = {self.dropped_short}",
        ]
        out += [f"skipped_line.{ln} = {why}" for ln, why in self.skipped_rows]
        return out


class IngestError(ValueError):
    pass


# -- parsing ------------------------------------------------------------------

def _parse_time(value) -> datetime:
    if isinstance(value, (int, float)):
        return datetime.fromtimestamp(float(value), tz=timezone.utc)
    s = str(value).strip()
    try:
        return datetime.fromtimestamp(float(s), tz=timezone.utc)
    except ValueError:
        pass
    dt = datetime.fromisoformat(s.replace("Z", "+00:00"))
    return dt if dt.tzinfo else dt.replace(tzinfo=timezone.utc)


def _parse_points(value) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(value, list):
        pairs = [(float(a), float(b)) for a, b in value]
    else:
        pairs = []
        for item in str(value).split(";"):
            item = item.strip()
            if item:
                a, b = item.split(":")
                pairs.append((float(a), float(b)))
    pairs.sort()
    arr = np.array(pairs, dtype=np.float64).reshape(-1, 2)
    return arr[:, 0], arr[:, 1]


def _record_from_fields(row: dict) -> SessionRecord:
    conn = _parse_time(row["connection_time"])
    done = _parse_time(row["done_charging_time"])
    kwh = float(row["kwh_delivered"])
    times, values = _parse_points(row["rate_points"])
    if done < conn:
        raise ValueError("done_charging_time precedes connection_time")
    if kwh < 0:
        raise ValueError("negative kwh_delivered")
    if np.any(values < 0) or not np.all(np.isfinite(values)):
        raise ValueError("invalid rate values")
    if len(times) and (times[0] < conn.timestamp() or times[-1] > done.timestamp()):
        raise ValueError("rate signal outside [connection_time, done_charging_time]")
    if len(np.unique(times)) != len(times):
        raise ValueError("duplicate rate timestamps")
    return SessionRecord(str(row["session_id"]), str(row["station_id"]), conn, done, kwh, times, values)


def parse_sessions(path, report: IngestReport | None = None) -> list[SessionRecord]:
    """Read an ACN-style CSV (or JSON-lines) session export.

    Malformed rows are logged with their line number, recorded in
    ``report`` and skipped. Records come back sorted by connection time,
    then session id.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise IngestError(f"cannot read {path}: {exc}") from exc
    report = report if report is not None else IngestReport()

    rows: list[tuple[int, dict]] = []
    stripped = text.lstrip()
    if path.suffix in (".jsonl", ".json") or stripped.startswith("{"):
        for ln, line in enumerate(text.splitlines(), 1):
            if line.strip():
                try:
                    rows.append((ln, json.loads(line)))
                except json.JSONDecodeError as exc:
                    report.skipped_rows.append((ln, f"bad json: {exc.msg}"))
    elif stripped:
        reader = csv.DictReader(text.splitlines())
        missing = set(CSV_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise IngestError(f"{path}: missing columns {sorted(missing)}")
        for ln, row in enumerate(reader, 2):
            rows.append((ln, row))

    records = []
    for ln, row in rows:
        try:
            records.append(_record_from_fields(row))
        except (KeyError, ValueError, TypeError) as exc:
            report.skipped_rows.append((ln, str(exc)))
    for ln, why in report.skipped_rows:
        log.warning("%s:%d skipped: %s", path, ln, why)
    if not records:
        raise IngestError(f"{path}: zero valid rows")
    records.sort(key=lambda r: (r.connection_time, r.session_id))
    return records


# -- binning ------------------------------------------------------------------

def _cumulative(rec: SessionRecord):
    """Breakpoints and cumulative integral (rate x seconds) of the held signal."""
    edges = np.append(rec.rate_times, rec.signal_end)
    cum = np.concatenate([[0.0], np.cumsum(np.diff(edges) * rec.rate_values)])
    return edges, cum


def bin_means(rec: SessionRecord, bin_edges: np.ndarray) -> np.ndarray:
    """Time-weighted mean of the held signal over each [edge_k, edge_k+1)."""
    edges, cum = _cumulative(rec)
    F = np.interp(bin_edges, edges, cum, left=0.0, right=cum[-1])
    return np.diff(F) / np.diff(bin_edges)


@dataclass
class ChargingCurve:
    values: np.ndarray
    valid_len: int
    session_id: str = ""


def build_battery_curves(
    sessions: list[SessionRecord],
    report: IngestReport | None = None,
    length: int = CURVE_LENGTH,
    step_seconds: float = 60.0,
) -> list[ChargingCurve]:
    """1-min curves starting at the first rate sample, zero padded to ``length``."""
    report = report if report is not None else IngestReport()
    curves = []
    for rec in sessions:
        if len(rec.rate_times) == 0:
            raise IngestError(f"session {rec.session_id} has no rate signal")
        start = rec.rate_times[0]
        duration = rec.signal_end - start
        if duration < step_seconds:
            report.dropped_short += 1
            continue
        n_bins = int(np.ceil(duration / step_seconds - 1e-9))
        if n_bins > length:
            report.truncated_curves += 1
            n_bins = length
        edges = start + step_seconds * np.arange(n_bins + 1)
        values = np.zeros(length)
        values[:n_bins] = bin_means(rec, edges)
        curves.append(ChargingCurve(values, n_bins, rec.session_id))
    return curves


@dataclass
class StationProfile:
    values: np.ndarray
    day: date
    station_id: str
    label: int = 0


def to_kw(rates: np.ndarray, unit: str, voltage: float) -> np.ndarray:
    if unit == "kW":
        return rates
    if unit == "A":
        return rates * voltage / 1000.0
    raise ValueError(f"unknown rate unit {unit!r}")


def build_station_profiles(
    sessions: list[SessionRecord],
    station_id: str,
    label: int = 0,
    rate_unit: str = "A",
    voltage: float = NOMINAL_VOLTAGE,
    length: int = PROFILE_LENGTH,
) -> list[StationProfile]:
    """Daily aggregate power (kW) of one station on a 5-min grid.

    Each bin is the mean total power over the bin. Calendar days are UTC
    days of the timestamps; a session crossing midnight contributes to both
    days. Only days touched by at least one session are returned.
    """
    step = 86400.0 / length
    totals: dict[date, np.ndarray] = {}
    for rec in sessions:
        if rec.station_id != station_id or len(rec.rate_times) == 0:
            continue
        kw = SessionRecord(rec.session_id, rec.station_id, rec.connection_time, rec.done_charging_time,
                           rec.kwh_delivered, rec.rate_times, to_kw(rec.rate_values, rate_unit, voltage))
        first = datetime.fromtimestamp(rec.rate_times[0], tz=timezone.utc).date()
        last = datetime.fromtimestamp(kw.signal_end, tz=timezone.utc).date()
        day = first
        while day <= last:
            midnight = datetime(day.year, day.month, day.day, tzinfo=timezone.utc).timestamp()
            edges = midnight + step * np.arange(length + 1)
            part = bin_means(kw, edges)
            if np.any(part > 0):
                totals.setdefault(day, np.zeros(length))
                totals[day] += part
            day += timedelta(days=1)
    return [StationProfile(totals[d], d, station_id, label) for d in sorted(totals)]


def station_labels(sessions: list[SessionRecord], mapping: dict[str, int] | None = None) -> dict[str, int]:
    """Station-id -> label index; unspecified stations get indices in sorted order."""
    if mapping:
        return dict(mapping)
    return {s: i for i, s in enumerate(sorted({r.station_id for r in sessions}))}
