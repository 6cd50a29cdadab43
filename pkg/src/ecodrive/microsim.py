"""Discrete-time microscopic traffic engine (dt = 0.5 s).

One engine instance owns one world: a control-active intersection whose
incoming approaches are each fed by a signalized ghost approach. Vehicles
spawn at ghost sources from a Poisson process, follow IDM (or a control
policy's acceleration overrides), change lanes by rule, and are logged per
step. Everything is bit-deterministic for a fixed (spec, controller, seed).
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, replace

from ecodrive import emissions
from ecodrive.scenario import Approach, ScenarioSpec, SignalPlan
from ecodrive.util import stable_unit_float, substream

DT_S = 0.5
A_MIN = -4.5   # m/s^2, emergency braking floor
A_MAX = 3.0    # m/s^2
IDM_DELTA = 4.0
VEHICLE_LENGTH_M = 5.0
QUEUE_SPEED_MPS = 0.1      # below this a vehicle counts as queued/waiting
GHOST_LENGTH_M = 300.0
SPAWN_CLEARANCE_M = 7.0    # entry must be clear this far to release a spawn
SENSING_RANGE_M = 100.0
LC_LOOKAHEAD_M = 200.0     # strategic lane-change zone before the stop line
LC_SPEED_GAIN_MPS = 2.0    # tactical advantage threshold
LC_COOLDOWN_STEPS = 8
GUARD_DECEL = 2.0          # m/s^2 assumed self-braking in the safety envelope
GUARD_LEAD_DECEL = 4.5     # m/s^2 assumed worst-case leader braking

DEFAULT_HORIZON_STEPS = 1500
DEFAULT_WARMUP_STEPS = 50

SEGMENTS = ("ghost", "in", "out")


@dataclass(frozen=True)
class IDMParams:
    """Car-following parameters; all strictly positive."""

    v0: float     # desired velocity, m/s
    s0: float     # jam headway, m
    T: float      # time headway, s
    alpha: float  # max acceleration, m/s^2
    beta: float   # comfortable deceleration, m/s^2
    delta: float = IDM_DELTA

    def validate(self) -> None:
        if min(self.v0, self.s0, self.T, self.alpha, self.beta, self.delta) <= 0:
            raise ValueError(f"IDM parameters must be positive: {self}")


def idm_accel(v: float, params: IDMParams, gap: float | None = None,
              leader_speed: float = 0.0, v0_cap: float | None = None) -> float:
    """IDM acceleration; leaderless when gap is None (free-road term only).

    A non-positive gap is the collision regime and returns the emergency
    floor; callers log it as a fault.
    """
    v0 = params.v0 if v0_cap is None else min(params.v0, v0_cap)
    free = params.alpha * (1.0 - (v / v0) ** params.delta)
    if gap is None:
        return max(A_MIN, min(A_MAX, free))
    if gap <= 0.0:
        return A_MIN
    dv = v - leader_speed
    s_star = params.s0 + max(0.0, v * params.T + v * dv / (2.0 * math.sqrt(params.alpha * params.beta)))
    a = params.alpha * (1.0 - (v / v0) ** params.delta - (s_star / gap) ** 2)
    return max(A_MIN, min(A_MAX, a))


def safe_speed(v_leader: float, gap: float, dt: float = DT_S,
               b_self: float = GUARD_DECEL, b_leader: float = GUARD_LEAD_DECEL) -> float:
    """Krauss-style velocity cap that keeps the gap nonnegative next step."""
    if gap <= 0.0:
        return 0.0
    stop_dist = gap + v_leader * v_leader / (2.0 * b_leader)
    bt = b_self * dt
    return max(0.0, -bt + math.sqrt(bt * bt + 2.0 * b_self * stop_dist))


# ---------------------------------------------------------------------------
# Network

@dataclass(frozen=True)
class Chain:
    """Ghost feeder -> incoming approach -> outgoing approach for one inflow."""

    index: int
    ghost: Approach
    ghost_plan: SignalPlan
    incoming: Approach
    phase_index: int
    outgoing: Approach
    inflow_vph: float

    def approach(self, segment: str) -> Approach:
        return {"ghost": self.ghost, "in": self.incoming, "out": self.outgoing}[segment]


@dataclass(frozen=True)
class SimNetwork:
    chains: tuple[Chain, ...]
    control_signal: SignalPlan


def build_ghost_network(spec: ScenarioSpec, ghost_length: float = GHOST_LENGTH_M) -> SimNetwork:
    """One synthetic ghost feeder per incoming approach, vehicles spawn there."""
    spec.validate()
    chains = []
    for i, inc in enumerate(spec.geometry.incoming_approaches):
        ghost = Approach(lane_count=inc.lane_count, lane_length=ghost_length,
                         speed_limit=inc.speed_limit, road_grade=0.0, is_ghost=True)
        out = spec.geometry.outgoing_approaches[spec.geometry.paired_outgoing(i)]
        chains.append(Chain(index=i, ghost=ghost, ghost_plan=spec.ghost_signals[i],
                            incoming=inc, phase_index=spec.approach_phase(i),
                            outgoing=out, inflow_vph=spec.inflows[i]))
    return SimNetwork(chains=tuple(chains), control_signal=spec.control_signal)


# ---------------------------------------------------------------------------
# Vehicles and world state

@dataclass
class Vehicle:
    vid: int
    chain: int
    segment: str
    lane: int
    pos: float  # m along segment (front bumper)
    vel: float
    acc: float
    route_intent: str
    is_controlled: bool
    key: emissions.Key
    driver: IDMParams
    lc_cooldown: int = 0

    def state_tuple(self):
        return (self.vid, self.chain, self.segment, self.lane, self.pos, self.vel, self.acc)


@dataclass
class SimFault:
    t: float
    kind: str
    vehicles: tuple[int, ...]
    detail: str


@dataclass
class TrajectoryLog:
    """Per-step vehicle records plus the scheduled-but-unspawned backlog."""

    rows: list[tuple] = field(default_factory=list)  # (t, veh, lane, pos, vel, acc, ctrl, signal)
    backlog_counts: list[tuple[float, int]] = field(default_factory=list)
    dt: float = DT_S

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("t,veh,lane,pos,vel,acc,ctrl,signal\n")
        for t, veh, lane, pos, vel, acc, ctrl, sig in self.rows:
            buf.write(f"{t!r},{veh},{lane},{pos!r},{vel!r},{acc!r},{int(ctrl)},{sig}\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TrajectoryLog":
        log = cls()
        lines = text.strip().splitlines()
        if not lines or lines[0] != "t,veh,lane,pos,vel,acc,ctrl,signal":
            raise ValueError("not a trajectory CSV (bad header)")
        for line in lines[1:]:
            t, veh, lane, pos, vel, acc, ctrl, sig = line.split(",")
            log.rows.append((float(t), int(veh), lane, float(pos), float(vel),
                             float(acc), bool(int(ctrl)), sig))
        return log


@dataclass
class EpisodeMetrics:
    throughput: int = 0
    emissions_g: float = 0.0
    queue_ratio: float = 0.0
    mean_wait_s: float = 0.0
    preceding_wait_s: float = 0.0
    mean_speed: float = 0.0
    collisions: int = 0
    spawned: int = 0
    exited: int = 0
    backlog_remaining: int = 0
    horizon: int = 0
    warmup: int = 0

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


class World:
    """Mutable simulation state; single threaded, owned by one engine run."""

    def __init__(self, spec: ScenarioSpec, emitter=None, ghost_length: float = GHOST_LENGTH_M):
        spec.validate()
        self.spec = spec
        self.net = build_ghost_network(spec, ghost_length)
        self.emitter = emitter if emitter is not None else emissions.OracleEmitter()
        self.t = 0.0
        self.step_count = 0
        self.lanes: dict[tuple[int, str, int], list[Vehicle]] = {}
        for chain in self.net.chains:
            for seg in SEGMENTS:
                for lane in range(chain.approach(seg).lane_count):
                    self.lanes[(chain.index, seg, lane)] = []
        self.vehicles: dict[int, Vehicle] = {}
        self._next_vid = 0
        self._arrival_rng = [substream(spec.seed, "arrivals", c.index) for c in self.net.chains]
        self._vehicle_rng = [substream(spec.seed, "vehicles", c.index) for c in self.net.chains]
        self._next_arrival = [self._draw_arrival(c.index, 0.0) for c in self.net.chains]
        self.backlog: list[list[float]] = [[] for _ in self.net.chains]
        self.faults: list[SimFault] = []
        self.last_step_emissions: dict[int, float] = {}
        self.preempted: set[int] = set()
        # counters
        self.spawned = 0
        self.exited = 0
        self.throughput = 0
        self._populations = None

    # -- spawning ------------------------------------------------------------

    def _draw_arrival(self, chain_index: int, after: float) -> float:
        inflow = self.net.chains[chain_index].inflow_vph
        if inflow <= 0.0:
            return math.inf
        return after + self._arrival_rng[chain_index].exponential(3600.0 / inflow)

    def _driver_populations(self):
        if self._populations is None:
            from ecodrive import calibration  # deferred: calibration builds on this module

            self._populations = calibration.default_populations()
        return self._populations

    def _make_vehicle(self, chain_index: int, lane: int) -> Vehicle:
        from ecodrive import calibration

        rng = self._vehicle_rng[chain_index]
        vid = self._next_vid
        self._next_vid += 1
        u = rng.random()
        acc_w = 0.0
        key = self.spec.fleet_mix[-1][0]
        for k, w in self.spec.fleet_mix:
            acc_w += w
            if u < acc_w:
                key = k
                break
        heavy = key[0] in ("bus", "truck")
        pop = self._driver_populations()["heavy" if heavy else "car"]
        driver = calibration.sample_driver(pop, seed=int(rng.integers(2**31 - 1)))
        u_turn = stable_unit_float("intent", vid, self.spec.seed)
        p = self.spec.geometry.turn_policy
        intent = "left" if u_turn < p else ("right" if u_turn < 2 * p else "straight")
        controlled = stable_unit_float("ctrl", vid, self.spec.seed) < self.spec.penetration
        return Vehicle(vid=vid, chain=chain_index, segment="ghost", lane=lane, pos=0.0,
                       vel=0.0, acc=0.0, route_intent=intent, is_controlled=controlled,
                       key=key, driver=driver)

    def _try_spawn(self, chain_index: int) -> bool:
        chain = self.net.chains[chain_index]
        best_lane, best_gap, leader = None, -1.0, None
        for lane in range(chain.ghost.lane_count):
            vehicles = self.lanes[(chain_index, "ghost", lane)]
            rear = vehicles[0] if vehicles else None
            gap = (rear.pos - VEHICLE_LENGTH_M) if rear else chain.ghost.lane_length
            if gap > best_gap:
                best_lane, best_gap, leader = lane, gap, rear
        if best_gap < SPAWN_CLEARANCE_M:
            return False
        veh = self._make_vehicle(chain_index, best_lane)
        limit = chain.ghost.speed_limit
        if leader is None:
            veh.vel = limit
        else:
            veh.vel = min(limit, safe_speed(leader.vel, best_gap))
        veh.pos = 0.0
        self.lanes[(chain_index, "ghost", best_lane)].insert(0, veh)
        self.vehicles[veh.vid] = veh
        self.spawned += 1
        return True

    # -- signals ---------------------------------------------------------------

    def signal_state(self, chain_index: int, segment: str) -> str:
        chain = self.net.chains[chain_index]
        if segment == "ghost":
            return chain.ghost_plan.state_at(self.t, 0)
        if segment == "in":
            return self.net.control_signal.state_at(self.t, chain.phase_index)
        return "-"  # outgoing approaches end without a signal

    # -- neighbor queries --------------------------------------------------------

    def _next_segment(self, segment: str) -> str | None:
        return {"ghost": "in", "in": "out", "out": None}[segment]

    def leader_of(self, veh: Vehicle) -> tuple[Vehicle | None, float]:
        """Same-lane leader (possibly in the next segment) and bumper gap."""
        vehicles = self.lanes[(veh.chain, veh.segment, veh.lane)]
        idx = vehicles.index(veh)
        if idx + 1 < len(vehicles):
            lead = vehicles[idx + 1]
            return lead, lead.pos - veh.pos - VEHICLE_LENGTH_M
        nxt = self._next_segment(veh.segment)
        if nxt is None:
            return None, math.inf
        chain = self.net.chains[veh.chain]
        lane = min(veh.lane, chain.approach(nxt).lane_count - 1)
        ahead = self.lanes[(veh.chain, nxt, lane)]
        if not ahead:
            return None, math.inf
        lead = ahead[0]
        seg_len = chain.approach(veh.segment).lane_length
        return lead, (seg_len - veh.pos) + lead.pos - VEHICLE_LENGTH_M

    def follower_of(self, veh: Vehicle) -> tuple[Vehicle | None, float]:
        vehicles = self.lanes[(veh.chain, veh.segment, veh.lane)]
        idx = vehicles.index(veh)
        if idx > 0:
            back = vehicles[idx - 1]
            return back, veh.pos - back.pos - VEHICLE_LENGTH_M
        return None, math.inf

    def adjacent_neighbors(self, veh: Vehicle, lane: int) -> tuple[Vehicle | None, Vehicle | None]:
        """(leader, follower) in the given lane of the vehicle's segment."""
        vehicles = self.lanes.get((veh.chain, veh.segment, lane))
        if vehicles is None:
            return None, None
        lead = follow = None
        for other in vehicles:
            if other.pos >= veh.pos:
                lead = other
                break
            follow = other
        return lead, follow

    # -- signal stop constraint ----------------------------------------------

    def _stop_line_gap(self, veh: Vehicle) -> float | None:
        """Distance to a stop line the vehicle must treat as a standing leader."""
        if veh.segment == "out":
            return None
        state = self.signal_state(veh.chain, veh.segment)
        if state == "G":
            return None
        seg_len = self.net.chains[veh.chain].approach(veh.segment).lane_length
        dist = seg_len - veh.pos
        if state == "Y":
            # proceed if stopping would exceed comfortable braking
            required = veh.vel * veh.vel / (2.0 * max(dist, 1e-6))
            if required > veh.driver.beta:
                return None
        return dist


def collect_world(spec: ScenarioSpec, **kwargs) -> World:
    return World(spec, **kwargs)


# ---------------------------------------------------------------------------
# Lane changing

@dataclass(frozen=True)
class LaneChange:
    target_lane: int
    reason: str  # strategic | tactical | regulatory


def _required_lane(veh: Vehicle, lane_count: int) -> int | None:
    if veh.route_intent == "left":
        return lane_count - 1
    if veh.route_intent == "right":
        return 0
    return None


def _gap_acceptable(world: World, veh: Vehicle, lane: int) -> bool:
    lead, follow = world.adjacent_neighbors(veh, lane)
    if lead is not None:
        gap = lead.pos - veh.pos - VEHICLE_LENGTH_M
        if gap <= 0.0:
            return False
        if idm_accel(veh.vel, veh.driver, gap, lead.vel) < -veh.driver.beta:
            return False
    if follow is not None:
        gap = veh.pos - follow.pos - VEHICLE_LENGTH_M
        if gap <= 0.0:
            return False
        # cooperative symmetry: the new follower must not be forced to brake hard
        if idm_accel(follow.vel, follow.driver, gap, veh.vel) < -follow.driver.beta:
            return False
    return True


def lane_change_decision(world: World, veh: Vehicle) -> LaneChange | None:
    """Rule-based lane selection: route necessity, speed gain, keep right."""
    lane_count = world.net.chains[veh.chain].approach(veh.segment).lane_count
    if lane_count < 2 or veh.segment != "in":
        return None
    seg_len = world.net.chains[veh.chain].incoming.lane_length
    dist_to_line = seg_len - veh.pos

    required = _required_lane(veh, lane_count)
    if required is not None and veh.lane != required and dist_to_line <= LC_LOOKAHEAD_M:
        step = 1 if required > veh.lane else -1
        target = veh.lane + step
        if _gap_acceptable(world, veh, target):
            return LaneChange(target, "strategic")
        return None

    if veh.lc_cooldown > 0:
        return None

    lead, _ = world.leader_of(veh)
    limit = world.net.chains[veh.chain].approach(veh.segment).speed_limit
    if lead is not None and lead.segment == veh.segment and lead.pos - veh.pos <= SENSING_RANGE_M:
        current_speed = min(lead.vel, limit)
        best = None
        for target in (veh.lane + 1, veh.lane - 1):
            if not (0 <= target < lane_count):
                continue
            if required is not None and dist_to_line <= LC_LOOKAHEAD_M and target != required:
                continue
            t_lead, _ = world.adjacent_neighbors(veh, target)
            t_speed = limit if (t_lead is None or t_lead.pos - veh.pos > SENSING_RANGE_M) \
                else min(t_lead.vel, limit)
            gain = t_speed - current_speed
            if gain > LC_SPEED_GAIN_MPS and _gap_acceptable(world, veh, target):
                if best is None or gain > best[0]:
                    best = (gain, target)
        if best is not None:
            return LaneChange(best[1], "tactical")

    # keep right when the right lane is free and the route does not need this lane
    if veh.lane > 0 and (required is None or required < veh.lane or dist_to_line > LC_LOOKAHEAD_M):
        r_lead, _ = world.adjacent_neighbors(veh, veh.lane - 1)
        free = r_lead is None or (r_lead.pos - veh.pos > SENSING_RANGE_M) or r_lead.vel >= veh.vel
        if free and (lead is None or lead.pos - veh.pos > SENSING_RANGE_M) \
                and _gap_acceptable(world, veh, veh.lane - 1):
            return LaneChange(veh.lane - 1, "regulatory")
    return None


# ---------------------------------------------------------------------------
# Stepping

def _guard_cap(world: World, veh: Vehicle) -> float:
    """Maximum next-step velocity that respects leader and signal."""
    lead, gap = world.leader_of(veh)
    cap = math.inf
    if lead is not None:
        cap = safe_speed(lead.vel, gap)
    stop_gap = world._stop_line_gap(veh)
    if stop_gap is not None:
        cap = min(cap, safe_speed(0.0, stop_gap, b_leader=math.inf))
    return cap


def step(world: World, actions: dict[int, float] | None = None, record=None,
         collect_metrics: bool = True, accumulators=None) -> None:
    """Advance the world by one dt. `actions` maps controlled vids to accel."""
    actions = actions or {}
    for vid in actions:
        veh = world.vehicles.get(vid)
        if veh is not None and not veh.is_controlled:
            raise ValueError(f"acceleration override for uncontrolled vehicle {vid}")

    world.preempted.clear()
    world.last_step_emissions.clear()

    # 1) decisions from the synchronous pre-step state
    plans: list[tuple[Vehicle, float, LaneChange | None]] = []
    for key_lane, vehicles in world.lanes.items():
        for veh in vehicles:
            maneuver = lane_change_decision(world, veh)
            if maneuver is not None and veh.vid in actions:
                world.preempted.add(veh.vid)
            if maneuver is None and veh.vid in actions:
                a = max(A_MIN, min(A_MAX, actions[veh.vid]))
            else:
                lead, gap = world.leader_of(veh)
                limit = world.net.chains[veh.chain].approach(veh.segment).speed_limit
                a = idm_accel(veh.vel, veh.driver,
                              gap=None if lead is None else gap,
                              leader_speed=0.0 if lead is None else lead.vel,
                              v0_cap=limit)
                stop_gap = world._stop_line_gap(veh)
                if stop_gap is not None:
                    a = min(a, idm_accel(veh.vel, veh.driver, gap=stop_gap,
                                         leader_speed=0.0, v0_cap=limit))
            plans.append((veh, a, maneuver))

    # 2) lane swaps (instantaneous), then kinematics with the safety envelope
    for veh, _, maneuver in plans:
        if maneuver is None:
            continue
        world.lanes[(veh.chain, veh.segment, veh.lane)].remove(veh)
        veh.lane = maneuver.target_lane
        veh.lc_cooldown = LC_COOLDOWN_STEPS
        target = world.lanes[(veh.chain, veh.segment, veh.lane)]
        at = 0
        while at < len(target) and target[at].pos < veh.pos:
            at += 1
        target.insert(at, veh)

    exits: list[Vehicle] = []
    for veh, a, maneuver in plans:
        if maneuver is not None:
            # the lane-change model owns this step's longitudinal control
            lead, gap = world.leader_of(veh)
            limit = world.net.chains[veh.chain].approach(veh.segment).speed_limit
            a = idm_accel(veh.vel, veh.driver,
                          gap=None if lead is None else gap,
                          leader_speed=0.0 if lead is None else lead.vel, v0_cap=limit)
        limit = world.net.chains[veh.chain].approach(veh.segment).speed_limit
        v_new = max(0.0, min(veh.vel + a * DT_S, limit, _guard_cap(world, veh)))
        veh.acc = (v_new - veh.vel) / DT_S
        veh.vel = v_new
        veh.pos += v_new * DT_S
        if veh.lc_cooldown > 0:
            veh.lc_cooldown -= 1

    # 3) segment transitions and exits (front vehicles first)
    for key_lane in list(world.lanes):
        chain_index, segment, lane = key_lane
        chain = world.net.chains[chain_index]
        seg_len = chain.approach(segment).lane_length
        vehicles = world.lanes[key_lane]
        while vehicles and vehicles[-1].pos >= seg_len:
            veh = vehicles[-1]
            state = world.signal_state(chain_index, segment)
            nxt = world._next_segment(segment)
            if segment != "out" and state == "R":
                # hard red-light guard: never cross on red
                veh.pos = seg_len - 0.01
                veh.vel = 0.0
                break
            vehicles.pop()
            if nxt is None:
                veh.segment = "exit"
                world.exited += 1
                exits.append(veh)
                del world.vehicles[veh.vid]
                continue
            if segment == "in" and world.step_count >= getattr(world, "_warmup_steps", 0):
                world.throughput += 1
            veh.pos -= seg_len
            veh.segment = nxt
            veh.lane = min(veh.lane, chain.approach(nxt).lane_count - 1)
            world.lanes[(chain_index, nxt, veh.lane)].insert(0, veh)

    # 4) collision scan (faults are recorded, never silently ignored)
    for key_lane, vehicles in world.lanes.items():
        for back, front in zip(vehicles, vehicles[1:]):
            if front.pos - back.pos < VEHICLE_LENGTH_M - 1e-9:
                world.faults.append(SimFault(world.t, "collision", (back.vid, front.vid),
                                             f"overlap in {key_lane}"))

    # 5) arrivals and spawning
    t_next = world.t + DT_S
    for i, chain in enumerate(world.net.chains):
        while world._next_arrival[i] <= t_next:
            world.backlog[i].append(world._next_arrival[i])
            world._next_arrival[i] = world._draw_arrival(i, world._next_arrival[i])
        while world.backlog[i]:
            if not world._try_spawn(i):
                break
            world.backlog[i].pop(0)

    world.t = t_next
    world.step_count += 1

    # 6) per-vehicle emissions for this step (reward + metric substrate)
    spec = world.spec
    for key_lane, vehicles in world.lanes.items():
        _, segment, _ = key_lane
        grade = world.net.chains[key_lane[0]].approach(segment).road_grade
        for veh in vehicles:
            e = world.emitter.step_emission(veh.key, veh.vel, veh.acc, grade,
                                            spec.temperature_c, spec.humidity_pct, DT_S)
            world.last_step_emissions[veh.vid] = e

    if record is not None:
        for key_lane, vehicles in world.lanes.items():
            chain_index, segment, lane = key_lane
            sig = world.signal_state(chain_index, segment)
            lane_id = f"{chain_index}:{segment}:{lane}"
            for veh in vehicles:
                record.rows.append((world.t, veh.vid, lane_id, veh.pos, veh.vel,
                                    veh.acc, veh.is_controlled, sig))
        record.backlog_counts.append((world.t, sum(len(b) for b in world.backlog)))

    if accumulators is not None and collect_metrics:
        accumulators.accumulate(world)


class _MetricAccumulators:
    def __init__(self, world: World):
        self.emissions_g = 0.0
        self.queue_ratio_sum = 0.0
        self.queue_steps = 0
        self.wait_s = 0.0
        self.ghost_wait_s = 0.0
        self.speed_sum = 0.0
        self.speed_n = 0
        self.seen: set[int] = set()
        self.ghost_seen: set[int] = set()
        self.backlog_scheduled: set[float] = set()

    def accumulate(self, world: World) -> None:
        ratio_sum, ratio_n = 0.0, 0
        for chain in world.net.chains:
            seg_len = chain.incoming.lane_length
            for lane in range(chain.incoming.lane_count):
                q = 0.0
                for veh in world.lanes[(chain.index, "in", lane)]:
                    if veh.vel < QUEUE_SPEED_MPS:
                        q = max(q, seg_len - veh.pos)
                ratio_sum += q / seg_len
                ratio_n += 1
        self.queue_ratio_sum += ratio_sum / max(1, ratio_n)
        self.queue_steps += 1

        for key_lane, vehicles in world.lanes.items():
            _, segment, _ = key_lane
            for veh in vehicles:
                self.seen.add(veh.vid)
                if segment == "ghost":
                    self.ghost_seen.add(veh.vid)
                if veh.vel < QUEUE_SPEED_MPS:
                    self.wait_s += DT_S
                    if segment == "ghost":
                        self.ghost_wait_s += DT_S
                if segment in ("in", "out"):
                    self.emissions_g += world.last_step_emissions.get(veh.vid, 0.0)
                    self.speed_sum += veh.vel
                    self.speed_n += 1
        backlog_n = sum(len(b) for b in world.backlog)
        for sched in (t for b in world.backlog for t in b):
            self.backlog_scheduled.add(sched)
        self.wait_s += backlog_n * DT_S
        self.ghost_wait_s += backlog_n * DT_S


def run_episode(spec: ScenarioSpec, controller=None, horizon: int = DEFAULT_HORIZON_STEPS,
                warmup: int = DEFAULT_WARMUP_STEPS, emitter=None, log: bool = True,
                ghost_length: float = GHOST_LENGTH_M) -> tuple[TrajectoryLog, EpisodeMetrics]:
    """Simulate warmup + horizon steps; warmup is excluded from all metrics."""
    world = World(spec, emitter=emitter, ghost_length=ghost_length)
    world._warmup_steps = warmup
    record = TrajectoryLog() if log else None
    acc = _MetricAccumulators(world)
    total = warmup + horizon
    for k in range(total):
        actions = controller.act(world) if controller is not None else {}
        step(world, actions, record=record,
             collect_metrics=(k >= warmup), accumulators=acc)
        if controller is not None and hasattr(controller, "post_step"):
            controller.post_step(world)

    n_seen = len(acc.seen) + len(acc.backlog_scheduled - {0.0})
    n_ghost = len(acc.ghost_seen) + len(acc.backlog_scheduled - {0.0})
    metrics = EpisodeMetrics(
        throughput=world.throughput,
        emissions_g=acc.emissions_g,
        queue_ratio=acc.queue_ratio_sum / max(1, acc.queue_steps),
        mean_wait_s=acc.wait_s / max(1, n_seen),
        preceding_wait_s=acc.ghost_wait_s / max(1, n_ghost),
        mean_speed=acc.speed_sum / max(1, acc.speed_n),
        collisions=len([f for f in world.faults if f.kind == "collision"]),
        spawned=world.spawned,
        exited=world.exited,
        backlog_remaining=sum(len(b) for b in world.backlog),
        horizon=horizon,
        warmup=warmup,
    )
    return (record if record is not None else TrajectoryLog()), metrics
