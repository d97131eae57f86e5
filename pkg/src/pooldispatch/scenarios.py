"""Scenario definitions: JSON-described experiment setups, synthetic
order streams, and trip-record CSV ingestion.

A scenario JSON file looks like::

    {
      "name": "desk",
      "workers": 20, "capacity": 3, "patience": 5, "horizon": 30,
      "speed_kmh": 60.0, "extent_km": [10.0, 10.0], "seeds": [1, 2, 3],
      "source": {"kind": "synthetic", "rate": 4.0, "distribution": "uniform"}
    }

``source.kind`` may instead be ``csv`` with a ``path`` field pointing at
a trip table with header
``request_step,pickup_x_km,pickup_y_km,drop_x_km,drop_y_km`` and an
optional trailing ``deadline_step`` column.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .sim import OrderState, World, WorldConfig, build_order

TRIP_HEADER = ["request_step", "pickup_x_km", "pickup_y_km", "drop_x_km", "drop_y_km"]
TRIP_HEADER_DEADLINE = TRIP_HEADER + ["deadline_step"]


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    workers: int
    capacity: int
    patience: int
    horizon: int
    speed_kmh: float
    extent: tuple[float, float]
    seeds: tuple[int, ...]
    kind: str  # synthetic | csv
    rate: float = 0.0
    hotspots: tuple[tuple[float, float], ...] | None = None
    hotspot_sigma: float = 1.0
    csv_path: str | None = None

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise ConfigError("horizon must be at least 1")
        if self.kind not in ("synthetic", "csv"):
            raise ConfigError("scenario source must be synthetic or csv")
        if self.kind == "synthetic" and self.rate < 0:
            raise ConfigError("arrival rate must be non-negative")
        if self.kind == "csv" and not self.csv_path:
            raise ConfigError("csv scenarios need a path")
        if not self.seeds:
            raise ConfigError("scenario needs at least one seed")
        if self.hotspots is not None and (not self.hotspots or self.hotspot_sigma <= 0):
            raise ConfigError("hotspots need centers and a positive sigma")

    def world_config(self) -> WorldConfig:
        return WorldConfig(
            n_workers=self.workers,
            capacity=self.capacity,
            extent=self.extent,
            speed_kmh=self.speed_kmh,
            horizon=self.horizon,
            patience=self.patience,
        )


def desk_scenario_path() -> Path:
    """The pinned desk-scale scenario shipped with the package."""
    return Path(str(resources.files("pooldispatch").joinpath("data/desk.json")))


def scenario_from_dict(raw: dict, base_dir: Path | None = None) -> ScenarioSpec:
    try:
        source = raw["source"]
        kind = source["kind"]
        extent = tuple(float(v) for v in raw["extent_km"])
        if len(extent) != 2:
            raise ConfigError("extent_km must hold two lengths")
        hotspots = None
        sigma = 1.0
        rate = 0.0
        csv_path = None
        if kind == "synthetic":
            rate = float(source["rate"])
            dist = source.get("distribution", "uniform")
            if isinstance(dist, dict):
                if dist.get("kind") != "hotspots":
                    raise ConfigError(f"unknown spatial distribution {dist!r}")
                hotspots = tuple((float(x), float(y)) for x, y in dist["centers"])
                sigma = float(dist.get("sigma", 1.0))
            elif dist != "uniform":
                raise ConfigError(f"unknown spatial distribution {dist!r}")
        elif kind == "csv":
            csv_path = source["path"]
            if base_dir is not None and not Path(csv_path).is_absolute():
                csv_path = str(base_dir / csv_path)
        return ScenarioSpec(
            name=str(raw.get("name", "unnamed")),
            workers=int(raw["workers"]),
            capacity=int(raw["capacity"]),
            patience=int(raw["patience"]),
            horizon=int(raw["horizon"]),
            speed_kmh=float(raw["speed_kmh"]),
            extent=extent,
            seeds=tuple(int(s) for s in raw["seeds"]),
            kind=kind,
            rate=rate,
            hotspots=hotspots,
            hotspot_sigma=sigma,
            csv_path=csv_path,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid scenario: {exc}") from exc


def load_scenario(path) -> ScenarioSpec:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read scenario {path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path} is not valid JSON: {exc}") from exc
    return scenario_from_dict(raw, base_dir=path.parent)


# ---------------------------------------------------------------------------
# order streams


def _draw_point(spec: ScenarioSpec, rng) -> tuple[float, float]:
    w, h = spec.extent
    if spec.hotspots is None:
        return float(rng.uniform(0, w)), float(rng.uniform(0, h))
    cx, cy = spec.hotspots[rng.integers(len(spec.hotspots))]
    x = float(np.clip(rng.normal(cx, spec.hotspot_sigma), 0, w))
    y = float(np.clip(rng.normal(cy, spec.hotspot_sigma), 0, h))
    return x, y


def synth_scenario(spec: ScenarioSpec, rng) -> list[OrderState]:
    """Poisson arrivals per step with origins and destinations drawn from
    the configured spatial distribution.  Deterministic per rng state."""
    orders = []
    oid = 0
    for t in range(spec.horizon):
        for _ in range(int(rng.poisson(spec.rate))):
            origin = _draw_point(spec, rng)
            dest = _draw_point(spec, rng)
            orders.append(build_order(oid, origin, dest, t, spec.speed_kmh, spec.patience))
            oid += 1
    return orders


def load_trip_csv(path, spec: ScenarioSpec) -> list[OrderState]:
    """Parse, validate, and sort a trip table.  Rows must fall inside the
    scenario extent and horizon; missing deadlines are synthesized with
    the simulator's rule."""
    path = Path(path)
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read trips {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: missing header") from None
        if header not in (TRIP_HEADER, TRIP_HEADER_DEADLINE):
            raise DataError(f"{path}: unexpected header {header!r}")
        has_deadline = header == TRIP_HEADER_DEADLINE
        w, h = spec.extent
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                t = int(row[0])
                px, py, dx, dy = (float(v) for v in row[1:5])
                deadline = None
                if has_deadline and row[5].strip():
                    deadline = float(row[5])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            if not (0 <= t < spec.horizon):
                raise DataError(f"{path}:{lineno}: request step {t} outside the horizon")
            for name, v, hi in (("pickup_x", px, w), ("pickup_y", py, h),
                                ("drop_x", dx, w), ("drop_y", dy, h)):
                if not 0 <= v <= hi:
                    raise DataError(f"{path}:{lineno}: {name}={v} outside the extent")
            rows.append((t, (px, py), (dx, dy), deadline))
    rows.sort(key=lambda r: r[0])
    return [
        build_order(i, origin, dest, t, spec.speed_kmh, spec.patience, deadline=deadline)
        for i, (t, origin, dest, deadline) in enumerate(rows)
    ]


# ---------------------------------------------------------------------------
# world construction


def make_world(spec: ScenarioSpec, seed: int, episode: int = 0) -> World:
    """Deterministic world for (spec, seed, episode): one rng stream draws
    the order arrivals (synthetic case) and then the worker placement."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, episode)))
    if spec.kind == "synthetic":
        orders = synth_scenario(spec, rng)
    else:
        orders = load_trip_csv(spec.csv_path, spec)
    return World(spec.world_config(), orders, rng)


def env_factory(spec: ScenarioSpec, seed: int):
    """Episode-indexed world builder for the trainers."""

    def build(episode: int) -> World:
        return make_world(spec, seed, episode)

    return build
