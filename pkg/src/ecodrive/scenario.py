"""Traffic scenario definitions: geometry, signal plans, factor grids, demand.

A scenario is one concrete valuation of every factor that shapes eco-driving
benefits at a single signalized intersection. Vehicles are fed through
synthetic ghost approaches (one per incoming approach) so that arrivals reach
the control-active intersection in realistic platoons rather than as a uniform
stream.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field, asdict, replace

from ecodrive.util import substream

SCHEMA_VERSION = 1

SEASONS = ("summer", "fall", "winter", "spring")
WEATHERS = ("clear", "rain", "snow")
HOUR_TYPES = ("peak", "offpeak")
INTENTS = ("left", "straight", "right")

# AADT share attributable to a single hour of the given kind.
PEAK_HOUR_FRACTION = 0.084
OFFPEAK_HOUR_FRACTION = 0.055

# Mean (temperature degC, relative humidity pct) per (season, weather).
CLIMATE_TABLE = {
    ("summer", "clear"): (30.0, 45.0),
    ("summer", "rain"): (25.0, 80.0),
    ("summer", "snow"): (18.0, 70.0),
    ("fall", "clear"): (15.0, 55.0),
    ("fall", "rain"): (12.0, 80.0),
    ("fall", "snow"): (2.0, 75.0),
    ("winter", "clear"): (2.0, 50.0),
    ("winter", "rain"): (4.0, 85.0),
    ("winter", "snow"): (-3.0, 75.0),
    ("spring", "clear"): (18.0, 50.0),
    ("spring", "rain"): (14.0, 78.0),
    ("spring", "snow"): (0.0, 70.0),
}

# Ghost feeder signal defaults: fixed, documented, configurable per spec file.
GHOST_GREEN_S = 30.0
GHOST_YELLOW_S = 3.0
GHOST_RED_S = 30.0
DEFAULT_YELLOW_S = 3.0

MAX_LANE_LENGTH_M = 750.0
MAX_LANE_COUNT = 7
SIGNAL_COMM_RANGE_M = 750.0  # I2V signal information reach

# Auto-tuned green durations are searched on this grid.
GREEN_SEARCH_MIN_S = 15.0
GREEN_SEARCH_MAX_S = 45.0
GREEN_SEARCH_STEP_S = 5.0


class ConfigurationError(ValueError):
    """Raised when a grid, spec, or graph fails validation."""


@dataclass(frozen=True)
class Approach:
    """One directed road segment entering or leaving an intersection."""

    lane_count: int
    lane_length: float  # m
    speed_limit: float  # m/s
    road_grade: float = 0.0  # percent grade
    is_ghost: bool = False

    def validate(self) -> None:
        if not (1 <= self.lane_count <= MAX_LANE_COUNT):
            raise ConfigurationError(f"lane_count {self.lane_count} outside [1, {MAX_LANE_COUNT}]")
        if not (0.0 < self.lane_length <= MAX_LANE_LENGTH_M):
            raise ConfigurationError(f"lane_length {self.lane_length} outside (0, {MAX_LANE_LENGTH_M}]")
        if self.speed_limit <= 0.0:
            raise ConfigurationError("speed_limit must be positive")
        if not (self.road_grade == self.road_grade and abs(self.road_grade) < 1e9):
            raise ConfigurationError("road_grade must be finite")


@dataclass(frozen=True)
class SignalPlan:
    """Fixed-time plan: ordered phases of (green_s, yellow_s, red_s).

    Phases occupy consecutive windows; an approach assigned to phase i sees
    green/yellow only inside phase i's window and red everywhere else, so a
    phase's red_s also covers clearance time. Cycle length is the sum of all
    phase durations.
    """

    phases: tuple[tuple[float, float, float], ...]
    offset_s: float = 0.0

    @property
    def cycle_length_s(self) -> float:
        return sum(g + y + r for g, y, r in self.phases)

    def validate(self) -> None:
        if not self.phases:
            raise ConfigurationError("signal plan needs at least one phase")
        for g, y, r in self.phases:
            if g <= 0 or y < 0 or r < 0:
                raise ConfigurationError(f"bad phase durations ({g}, {y}, {r})")

    def _phase_start(self, phase_index: int) -> float:
        return sum(g + y + r for g, y, r in self.phases[:phase_index])

    def state_at(self, t: float, phase_index: int) -> str:
        """Signal aspect 'G', 'Y' or 'R' for the given phase at time t."""
        g, y, _ = self.phases[phase_index]
        local = (t + self.offset_s) % self.cycle_length_s - self._phase_start(phase_index)
        if 0.0 <= local < g:
            return "G"
        if g <= local < g + y:
            return "Y"
        return "R"

    def time_left_in_state(self, t: float, phase_index: int) -> float:
        g, y, r = self.phases[phase_index]
        cycle = self.cycle_length_s
        local = (t + self.offset_s) % cycle - self._phase_start(phase_index)
        if 0.0 <= local < g:
            return g - local
        if g <= local < g + y:
            return g + y - local
        # red: time until this phase's next green onset
        local_c = local % cycle  # may be negative before the phase window
        return (cycle - local_c) % cycle or cycle

    def time_to_green(self, t: float, phase_index: int, cycle_index: int) -> float:
        """Seconds until the cycle_index-th future green onset (1 = next)."""
        cycle = self.cycle_length_s
        start = self._phase_start(phase_index)
        local = (t + self.offset_s - start) % cycle
        to_next = (cycle - local) % cycle or cycle
        return to_next + (cycle_index - 1) * cycle


@dataclass(frozen=True)
class IntersectionGeometry:
    """Approach layout of one intersection plus its turn heuristic."""

    incoming_approaches: tuple[Approach, ...]
    outgoing_approaches: tuple[Approach, ...]
    phase_count: int
    turn_policy: float = 0.05  # inflow fraction per available turn movement

    def validate(self) -> None:
        if not self.incoming_approaches or not self.outgoing_approaches:
            raise ConfigurationError("need at least one incoming and one outgoing approach")
        if not (2 <= self.phase_count <= 8):
            raise ConfigurationError(f"phase_count {self.phase_count} outside [2, 8]")
        if not (0.0 <= self.turn_policy <= 0.5):
            raise ConfigurationError("turn_policy outside [0, 0.5]")
        for a in self.incoming_approaches + self.outgoing_approaches:
            a.validate()

    def paired_outgoing(self, incoming_index: int) -> int:
        # every incoming approach has one non-conflicting outgoing partner
        return incoming_index % len(self.outgoing_approaches)


@dataclass(frozen=True)
class ScenarioSpec:
    """Complete factor valuation for one traffic scenario."""

    geometry: IntersectionGeometry
    control_signal: SignalPlan
    ghost_signals: tuple[SignalPlan, ...]  # one per incoming approach
    inflows: tuple[float, ...]  # veh/h per incoming approach
    penetration: float
    temperature_c: float
    humidity_pct: float
    season: str
    weather: str
    hour_type: str
    fleet_mix: tuple[tuple[tuple[str, str, int], float], ...]  # ((vtype, fuel, age), weight)
    seed: int
    scenario_id: str = ""

    def validate(self) -> None:
        self.geometry.validate()
        self.control_signal.validate()
        if len(self.ghost_signals) != len(self.geometry.incoming_approaches):
            raise ConfigurationError("one ghost signal per incoming approach required")
        for plan in self.ghost_signals:
            plan.validate()
        if len(self.inflows) != len(self.geometry.incoming_approaches):
            raise ConfigurationError("one inflow per incoming approach required")
        if any(q < 0 for q in self.inflows):
            raise ConfigurationError("inflows must be >= 0")
        if not (0.0 < self.penetration <= 1.0):
            raise ConfigurationError("penetration outside (0, 1]")
        if self.season not in SEASONS or self.weather not in WEATHERS or self.hour_type not in HOUR_TYPES:
            raise ConfigurationError("unknown season/weather/hour_type")
        total = sum(w for _, w in self.fleet_mix)
        if abs(total - 1.0) > 1e-9:
            raise ConfigurationError(f"fleet_mix weights sum to {total}, expected 1")

    def approach_phase(self, incoming_index: int) -> int:
        return incoming_index % len(self.control_signal.phases)


DEFAULT_FLEET_MIX = ((("passenger_car", "gasoline", 1), 1.0),)


def single_phase_plan(green_s: float, red_s: float, yellow_s: float = DEFAULT_YELLOW_S,
                      offset_s: float = 0.0) -> SignalPlan:
    return SignalPlan(phases=((float(green_s), float(yellow_s), float(red_s)),), offset_s=offset_s)


def default_ghost_plan(offset_s: float = 0.0) -> SignalPlan:
    return single_phase_plan(GHOST_GREEN_S, GHOST_RED_S, GHOST_YELLOW_S, offset_s)


def climate_for(season: str, weather: str) -> tuple[float, float]:
    try:
        return CLIMATE_TABLE[(season, weather)]
    except KeyError:
        raise ConfigurationError(f"no climate entry for ({season}, {weather})") from None


def aadt_to_hourly(aadt: float, hour_type: str) -> float:
    """Convert annual average daily traffic to a single-hour flow (veh/h)."""
    if aadt < 0:
        raise ConfigurationError("aadt must be >= 0")
    if hour_type == "peak":
        return PEAK_HOUR_FRACTION * aadt
    if hour_type == "offpeak":
        return OFFPEAK_HOUR_FRACTION * aadt
    raise ConfigurationError(f"unknown hour_type {hour_type!r}")


# ---------------------------------------------------------------------------
# Factor grids

GRID_FACTORS = (
    "approach_count", "lane_count", "lane_length", "speed_limit", "road_grade",
    "inflow", "green", "red", "ghost_offset", "penetration", "season",
    "weather", "hour_type",
)


@dataclass(frozen=True)
class FactorGrid:
    """Curated valuations per factor; scenarios are draws from the product."""

    approach_count: tuple[int, ...] = (1,)
    lane_count: tuple[int, ...] = (1,)
    lane_length: tuple[float, ...] = (400.0,)
    speed_limit: tuple[float, ...] = (15.0,)
    road_grade: tuple[float, ...] = (0.0,)
    inflow: tuple[float, ...] = (300.0,)
    green: tuple[float, ...] = (25.0,)
    red: tuple[float, ...] = (40.0,)
    ghost_offset: tuple[float, ...] = (0.0,)  # fraction of ghost cycle
    penetration: tuple[float, ...] = (1.0,)
    season: tuple[str, ...] = ("summer",)
    weather: tuple[str, ...] = ("clear",)
    hour_type: tuple[str, ...] = ("peak",)
    fleet_mix: tuple[tuple[tuple[str, str, int], float], ...] = DEFAULT_FLEET_MIX

    def validate(self) -> None:
        for name in GRID_FACTORS:
            if len(getattr(self, name)) == 0:
                raise ConfigurationError(f"factor {name!r} has no valuations")

    def size(self) -> int:
        n = 1
        for name in GRID_FACTORS:
            n *= len(getattr(self, name))
        return n


def _spec_from_valuation(v: dict, fleet_mix, seed: int, scenario_id: str) -> ScenarioSpec:
    n = v["approach_count"]
    approach = Approach(lane_count=v["lane_count"], lane_length=v["lane_length"],
                        speed_limit=v["speed_limit"], road_grade=v["road_grade"])
    outgoing = replace(approach, road_grade=-approach.road_grade)
    phase_count = max(2, min(8, n))
    control = single_phase_plan(v["green"], v["red"])
    ghost_offset_s = v["ghost_offset"] * default_ghost_plan().cycle_length_s
    temperature, humidity = climate_for(v["season"], v["weather"])
    spec = ScenarioSpec(
        geometry=IntersectionGeometry(
            incoming_approaches=(approach,) * n,
            outgoing_approaches=(outgoing,) * n,
            phase_count=phase_count,
        ),
        control_signal=control,
        ghost_signals=tuple(default_ghost_plan(ghost_offset_s) for _ in range(n)),
        inflows=(v["inflow"],) * n,
        penetration=v["penetration"],
        temperature_c=temperature,
        humidity_pct=humidity,
        season=v["season"],
        weather=v["weather"],
        hour_type=v["hour_type"],
        fleet_mix=fleet_mix,
        seed=seed,
        scenario_id=scenario_id,
    )
    spec.validate()
    return spec


def sample_scenarios(grid: FactorGrid, count: int, seed: int) -> list[ScenarioSpec]:
    """Draw `count` scenarios uniformly from the grid. Pure in (grid, count, seed)."""
    grid.validate()
    if count < 1:
        raise ConfigurationError("count must be >= 1")
    rng = substream(seed, "scenario-sampling")
    specs = []
    for i in range(count):
        valuation = {name: getattr(grid, name)[rng.integers(len(getattr(grid, name)))]
                     for name in GRID_FACTORS}
        specs.append(_spec_from_valuation(valuation, grid.fleet_mix,
                                          seed=int(rng.integers(2**31 - 1)),
                                          scenario_id=f"s{seed}-{i:06d}"))
    return specs


def enumerate_grid(grid: FactorGrid, seed: int = 0) -> list[ScenarioSpec]:
    """Every combination of factor valuations, in deterministic grid order."""
    grid.validate()
    names = GRID_FACTORS
    values = [getattr(grid, n) for n in names]
    specs = []
    for i, combo in enumerate(itertools.product(*values)):
        valuation = dict(zip(names, combo))
        specs.append(_spec_from_valuation(valuation, grid.fleet_mix,
                                          seed=seed + i, scenario_id=f"g{i:06d}"))
    return specs


def desk_proxy_grid() -> FactorGrid:
    """The bundled single-lane proxy intersection used by the acceptance suite."""
    return FactorGrid()


def desk_proxy_spec(penetration: float = 1.0, seed: int = 0) -> ScenarioSpec:
    spec = enumerate_grid(desk_proxy_grid(), seed=seed)[0]
    return replace(spec, penetration=penetration, seed=seed, scenario_id=f"proxy-p{penetration}")


# ---------------------------------------------------------------------------
# Serialization (versioned, human readable, field-exact round trip)

def serialize_spec(spec: ScenarioSpec) -> str:
    doc = {"schema": SCHEMA_VERSION, "spec": asdict(spec)}
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _tuplify(x):
    if isinstance(x, list):
        return tuple(_tuplify(v) for v in x)
    return x


def parse_spec(text: str) -> ScenarioSpec:
    doc = json.loads(text)
    if doc.get("schema") != SCHEMA_VERSION:
        raise ConfigurationError(f"unsupported scenario schema {doc.get('schema')!r}")
    d = doc["spec"]
    geometry = IntersectionGeometry(
        incoming_approaches=tuple(Approach(**a) for a in d["geometry"]["incoming_approaches"]),
        outgoing_approaches=tuple(Approach(**a) for a in d["geometry"]["outgoing_approaches"]),
        phase_count=d["geometry"]["phase_count"],
        turn_policy=d["geometry"]["turn_policy"],
    )
    spec = ScenarioSpec(
        geometry=geometry,
        control_signal=SignalPlan(phases=_tuplify(d["control_signal"]["phases"]),
                                  offset_s=d["control_signal"]["offset_s"]),
        ghost_signals=tuple(SignalPlan(phases=_tuplify(p["phases"]), offset_s=p["offset_s"])
                            for p in d["ghost_signals"]),
        inflows=tuple(d["inflows"]),
        penetration=d["penetration"],
        temperature_c=d["temperature_c"],
        humidity_pct=d["humidity_pct"],
        season=d["season"],
        weather=d["weather"],
        hour_type=d["hour_type"],
        fleet_mix=_tuplify(d["fleet_mix"]),
        seed=d["seed"],
        scenario_id=d["scenario_id"],
    )
    spec.validate()
    return spec


def parse_grid(text: str) -> FactorGrid:
    doc = json.loads(text)
    if doc.get("schema") != SCHEMA_VERSION:
        raise ConfigurationError(f"unsupported grid schema {doc.get('schema')!r}")
    kwargs = {k: _tuplify(v) for k, v in doc["grid"].items()}
    grid = FactorGrid(**kwargs)
    grid.validate()
    return grid


def serialize_grid(grid: FactorGrid) -> str:
    return json.dumps({"schema": SCHEMA_VERSION, "grid": asdict(grid)}, indent=2, sort_keys=True) + "\n"


def tune_signal(spec: ScenarioSpec, horizon: int = 400, warmup: int = 50,
                greens: tuple[float, ...] | None = None) -> SignalPlan:
    """Pick the green-duration grid point maximizing baseline throughput.

    Exhaustive over the 15-45 s (step 5 s) grid per control phase; ghost plans
    stay at their defaults. Ties resolve toward the shorter cycle, then grid
    order. Multi-phase plans share a common green to keep the search bounded.
    """
    from ecodrive import microsim  # local import: microsim depends on this module

    if greens is None:
        steps = int((GREEN_SEARCH_MAX_S - GREEN_SEARCH_MIN_S) / GREEN_SEARCH_STEP_S) + 1
        greens = tuple(GREEN_SEARCH_MIN_S + i * GREEN_SEARCH_STEP_S for i in range(steps))

    best = None  # (throughput, -cycle, -grid_index, plan)
    for idx, g in enumerate(greens):
        phases = tuple((float(g), y, r) for _, y, r in spec.control_signal.phases)
        plan = SignalPlan(phases=phases, offset_s=spec.control_signal.offset_s)
        candidate = replace(spec, control_signal=plan)
        _, metrics = microsim.run_episode(candidate, controller=None, horizon=horizon,
                                          warmup=warmup, log=False)
        key = (metrics.throughput, -plan.cycle_length_s, -idx)
        if best is None or key > best[0]:
            best = (key, plan)
    return best[1]
