"""Road geometry, surrounding-vehicle prediction and classification, and
scenario configuration loading."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .params import AdmmOptions, DecisionWeights, SolverParams, StageOneOptions, TrajWeights
from .vehicle import EgoState, VehicleParams


class ScenarioError(ValueError):
    """Configuration parse or invariant failure; message names the field."""


@dataclass(frozen=True)
class Lane:
    """One lane of a straight multi-lane road; id 1 is the leftmost lane."""

    id: int
    center_y: float
    width: float
    speed_limit: float

    def __post_init__(self) -> None:
        if self.id < 1:
            raise ScenarioError(f"lane id must be positive, got {self.id}")
        if self.width <= 0.0:
            raise ScenarioError(f"lane {self.id}: width must be positive")
        if self.speed_limit <= 0.0:
            raise ScenarioError(f"lane {self.id}: speed_limit must be positive")

    def contains_lateral(self, py: float) -> bool:
        return abs(py - self.center_y) <= 0.5 * self.width


@dataclass(frozen=True)
class SvState:
    """Surrounding-vehicle snapshot: constant-velocity point with a footprint."""

    id: int
    px: float
    py: float
    vx: float
    vy: float
    length: float
    width: float

    def __post_init__(self) -> None:
        if self.length <= 0.0 or self.width <= 0.0:
            raise ScenarioError(f"sv {self.id}: length and width must be positive")

    def at_time(self, t: float) -> "SvState":
        """Constant-velocity propagation by t seconds."""
        return dataclasses.replace(self, px=self.px + t * self.vx, py=self.py + t * self.vy)


@dataclass(frozen=True)
class SvPrediction:
    """Constant-velocity rollout of one SV on the decision grid."""

    sv_id: int
    states: tuple[SvState, ...]

    def __post_init__(self) -> None:
        for k in range(len(self.states) - 1):
            a, b = self.states[k], self.states[k + 1]
            if abs((b.px - a.px) - (self.states[1].px - self.states[0].px)) > 1e-9:
                raise ScenarioError(f"sv {self.sv_id}: prediction is not constant-velocity")


def predict_sv(sv: SvState, horizon: int, dt: float) -> SvPrediction:
    """Constant-velocity rollout over `horizon` steps of length dt."""
    if dt <= 0.0:
        raise ScenarioError("dt must be positive")
    return SvPrediction(sv.id, tuple(sv.at_time(k * dt) for k in range(horizon)))


@dataclass(frozen=True)
class LaneAssignment:
    """Per-lane lead (LV) and rear (NV) vehicles at one decision step."""

    lv: dict[int, SvState]
    nv: dict[int, SvState]


def lane_of(py: float, road: tuple[Lane, ...]) -> Lane:
    """Bin a lateral position to the nearest lane center (ties: lower id).

    Raises ScenarioError when the position is outside every lane's extent.
    """
    if not any(lane.contains_lateral(py) for lane in road):
        raise ScenarioError(f"lateral position {py:.3f} m is outside all lanes")
    return min(road, key=lambda lane: (abs(py - lane.center_y), lane.id))


def classify_svs(
    ev: EgoState,
    predictions: list[SvPrediction],
    road: tuple[Lane, ...],
    tau: int,
) -> LaneAssignment:
    """LV/NV assignment per lane at decision step tau.

    The LV of a lane is the SV in it with the smallest px strictly ahead of
    the EV; the NV is the one with the largest px at or behind the EV.
    """
    lv: dict[int, SvState] = {}
    nv: dict[int, SvState] = {}
    for pred in predictions:
        s = pred.states[tau]
        lane = lane_of(s.py, road)
        if s.px > ev.px:
            cur = lv.get(lane.id)
            if cur is None or s.px < cur.px:
                lv[lane.id] = s
        else:
            cur = nv.get(lane.id)
            if cur is None or s.px > cur.px:
                nv[lane.id] = s
    return LaneAssignment(lv=lv, nv=nv)


def reference_velocity(lane: Lane, assignment: LaneAssignment) -> float:
    """min(lane speed limit, that lane's LV longitudinal velocity)."""
    lead = assignment.lv.get(lane.id)
    if lead is None:
        return lane.speed_limit
    return min(lane.speed_limit, lead.vx)


@dataclass(frozen=True)
class Horizon:
    """Decision grid (T, dt_decision) and trajectory grid (N, dt_traj)."""

    T: int
    dt_decision: float
    N: int
    dt_traj: float

    def __post_init__(self) -> None:
        if self.T < 1 or self.N < 1:
            raise ScenarioError("horizon: T and N must be >= 1")
        if self.dt_decision <= 0.0 or self.dt_traj <= 0.0:
            raise ScenarioError("horizon: steps must be positive")
        if abs(self.T * self.dt_decision - self.N * self.dt_traj) > 1e-9:
            raise ScenarioError(
                "horizon: T*dt_decision must equal N*dt_traj "
                f"({self.T * self.dt_decision} != {self.N * self.dt_traj})"
            )

    @property
    def steps_per_decision(self) -> int:
        return round(self.dt_decision / self.dt_traj)


@dataclass(frozen=True)
class ScenarioConfig:
    """A fully validated scenario: road, actors, horizons, weights, solver."""

    road: tuple[Lane, ...]
    ev_init: EgoState
    svs: tuple[SvState, ...]
    horizon: Horizon
    decision_weights: DecisionWeights = DecisionWeights()
    traj_weights: TrajWeights = TrajWeights()
    stage_one: StageOneOptions = StageOneOptions()
    admm: AdmmOptions = AdmmOptions()
    solver: SolverParams = SolverParams()
    vehicle: VehicleParams = VehicleParams()
    roles: dict[int, str] = field(default_factory=dict)
    name: str = ""

    def __post_init__(self) -> None:
        ids = [lane.id for lane in self.road]
        if ids != list(range(1, len(self.road) + 1)):
            raise ScenarioError(f"road: lane ids must be contiguous 1..L, got {ids}")
        centers = [lane.center_y for lane in self.road]
        decreasing = all(a > b for a, b in zip(centers, centers[1:]))
        increasing = all(a < b for a, b in zip(centers, centers[1:]))
        if len(self.road) > 1 and not (decreasing or increasing):
            raise ScenarioError("road: lane centers must be strictly monotone in id")
        sv_ids = [sv.id for sv in self.svs]
        if len(set(sv_ids)) != len(sv_ids):
            raise ScenarioError("svs: duplicate vehicle ids")

    @property
    def max_speed_limit(self) -> float:
        return max(lane.speed_limit for lane in self.road)

    def lane_by_id(self, lane_id: int) -> Lane:
        return self.road[lane_id - 1]

    def ev_lane(self) -> Lane:
        return lane_of(self.ev_init.py, self.road)

    def predictions(self, horizon: int | None = None) -> list[SvPrediction]:
        T = self.horizon.T if horizon is None else horizon
        return [predict_sv(sv, T, self.horizon.dt_decision) for sv in self.svs]

    def at_time(self, t: float, ev: EgoState) -> "ScenarioConfig":
        """Scenario re-rooted at time t with the realized EV state."""
        return dataclasses.replace(
            self, ev_init=ev, svs=tuple(sv.at_time(t) for sv in self.svs)
        )


def _require(mapping: dict, key: str, ctx: str):
    if key not in mapping:
        raise ScenarioError(f"{ctx}: missing field '{key}'")
    return mapping[key]


def _build_dataclass(cls, data: dict, ctx: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ScenarioError(f"{ctx}: unknown fields {sorted(unknown)}")
    try:
        return cls(**data)
    except AssertionError as exc:
        raise ScenarioError(f"{ctx}: {exc}") from exc


def scenario_from_dict(doc: dict, name: str = "") -> ScenarioConfig:
    """Validate a parsed configuration document into a ScenarioConfig."""
    road = tuple(
        Lane(
            id=int(_require(entry, "id", "road")),
            center_y=float(_require(entry, "center_y", "road")),
            width=float(_require(entry, "width", "road")),
            speed_limit=float(_require(entry, "speed_limit", "road")),
        )
        for entry in _require(doc, "road", "scenario")
    )
    ev_doc = _require(doc, "ev", "scenario")
    ev = EgoState(
        px=float(_require(ev_doc, "px", "ev")),
        py=float(_require(ev_doc, "py", "ev")),
        theta=float(ev_doc.get("theta", 0.0)),
        v=float(_require(ev_doc, "v", "ev")),
    )
    svs = []
    roles: dict[int, str] = {}
    for entry in doc.get("svs", []):
        sv = SvState(
            id=int(_require(entry, "id", "svs")),
            px=float(_require(entry, "px", "svs")),
            py=float(_require(entry, "py", "svs")),
            vx=float(_require(entry, "vx", "svs")),
            vy=float(entry.get("vy", 0.0)),
            length=float(entry.get("length", 4.5)),
            width=float(entry.get("width", 2.0)),
        )
        svs.append(sv)
        if "role" in entry:
            roles[sv.id] = str(entry["role"])
    hz = _require(doc, "horizon", "scenario")
    horizon = Horizon(
        T=int(_require(hz, "T", "horizon")),
        dt_decision=float(_require(hz, "dt_decision", "horizon")),
        N=int(_require(hz, "N", "horizon")),
        dt_traj=float(_require(hz, "dt_traj", "horizon")),
    )
    weights = doc.get("weights", {})
    solver_doc = dict(doc.get("solver", {}))
    admm_doc = solver_doc.pop("admm", {})
    return ScenarioConfig(
        road=road,
        ev_init=ev,
        svs=tuple(svs),
        horizon=horizon,
        decision_weights=_build_dataclass(
            DecisionWeights, weights.get("decision", {}), "weights.decision"
        ),
        traj_weights=_build_dataclass(
            TrajWeights, weights.get("trajectory", {}), "weights.trajectory"
        ),
        stage_one=_build_dataclass(StageOneOptions, doc.get("stage_one", {}), "stage_one"),
        admm=_build_dataclass(AdmmOptions, admm_doc, "solver.admm"),
        solver=_build_dataclass(SolverParams, solver_doc, "solver"),
        vehicle=_build_dataclass(VehicleParams, doc.get("vehicle", {}), "vehicle"),
        roles=roles,
        name=name,
    )


def load_scenario(path: str | Path) -> ScenarioConfig:
    """Load and validate a scenario configuration file (JSON)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario file {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: invalid JSON: {exc}") from exc
    return scenario_from_dict(doc, name=path.stem)
