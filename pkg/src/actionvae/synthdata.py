"""Synthetic driving data: maneuver-family trajectory generator and file I/O.

Trajectories live in a target-centric frame: the origin is the vehicle's
current position and the heading points along +y.  Each sample is produced
by picking a maneuver family, sampling its kinematic parameters, and rolling
out constant-curvature arc segments under a trapezoidal speed profile.
Scenario features are a low-dimensional hand-designed descriptor of the
situation (speed, short history, road geometry, layout) generated
consistently with the chosen family.

Family labels are kept on the samples for *evaluation only*; the training
view exposes nothing but (trajectory, scenario) arrays.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractViolation, DataFormatError

# Frame/clock conventions shared by the whole artifact.
DT = 0.2                    # seconds between waypoints
HORIZON = 30                # waypoints per trajectory
NOISE_SIGMA = 0.15          # per-waypoint position noise, meters
V_MAX = 16.0                # kinematic sanity bound on speed, m/s

LAYOUTS = ("straight", "four-way", "three-way", "turn-lane", "parking")
SCENARIO_DIM = 4 + len(LAYOUTS) + 2

DEFAULT_FAMILIES = ("straight-slow", "straight-fast", "left-turn",
                    "right-turn", "u-turn", "lane-change")


@dataclass
class Trajectory:
    """T future positions (x_east, y_north) in meters, target-centric."""

    waypoints: np.ndarray  # (T, 2)

    def __post_init__(self):
        self.waypoints = np.asarray(self.waypoints, dtype=np.float64)
        if self.waypoints.ndim != 2 or self.waypoints.shape[1] != 2:
            raise ContractViolation(
                f"waypoints must be (T, 2), got {self.waypoints.shape}")
        if not np.all(np.isfinite(self.waypoints)):
            raise ContractViolation("non-finite waypoint")

    @property
    def horizon(self) -> int:
        return self.waypoints.shape[0]

    def flat(self) -> np.ndarray:
        return self.waypoints.reshape(-1)

    def max_spacing(self) -> float:
        steps = np.diff(self.waypoints, axis=0)
        if len(steps) == 0:
            return 0.0
        return float(np.max(np.hypot(steps[:, 0], steps[:, 1])))


@dataclass
class ScenarioFeatures:
    """Fixed-length scenario descriptor.

    Layout: [speed, hist_dx, hist_dy, road_curvature,
             one-hot layout (5), lane_offset, lead_gap]
    """

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (SCENARIO_DIM,):
            raise ContractViolation(
                f"scenario must have dim {SCENARIO_DIM}, "
                f"got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ContractViolation("non-finite scenario feature")
        onehot = self.values[4:4 + len(LAYOUTS)]
        if abs(onehot.sum() - 1.0) > 1e-9 or np.any(onehot < 0):
            raise ContractViolation("layout block is not one-hot")

    @property
    def speed(self) -> float:
        return float(self.values[0])

    @property
    def road_curvature(self) -> float:
        return float(self.values[3])

    @property
    def layout(self) -> str:
        return LAYOUTS[int(np.argmax(self.values[4:4 + len(LAYOUTS)]))]


@dataclass
class LabeledSample:
    sample_id: int
    scenario: ScenarioFeatures
    trajectory: Trajectory
    hidden_label: int  # maneuver family index: evaluation only


@dataclass
class TrainingView:
    """Label-free arrays handed to the training code.

    There is deliberately no label field on this type.
    """

    x: np.ndarray  # (N, 2T) flattened trajectories
    s: np.ndarray  # (N, SCENARIO_DIM)

    def __len__(self) -> int:
        return self.x.shape[0]


@dataclass
class Dataset:
    samples: list[LabeledSample]
    family_names: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def horizon(self) -> int:
        return self.samples[0].trajectory.horizon if self.samples else 0

    def training_view(self) -> TrainingView:
        x = np.array([s.trajectory.flat() for s in self.samples])
        s = np.array([s.scenario.values for s in self.samples])
        return TrainingView(x=x, s=s)

    def labels(self) -> np.ndarray:
        return np.array([s.hidden_label for s in self.samples], dtype=int)

    def subset(self, indices) -> "Dataset":
        return Dataset([self.samples[i] for i in indices], self.family_names)


@dataclass
class FamilySpec:
    name: str
    weight: float
    # Optional pinned parameters (e.g. {"speed": 10.0}); anything not
    # pinned is sampled from the family's default range.
    params: dict = field(default_factory=dict)


@dataclass
class GenConfig:
    n_samples: int
    families: list[FamilySpec]
    noise_sigma: float = NOISE_SIGMA
    dt: float = DT
    horizon: int = HORIZON

    def __post_init__(self):
        if self.n_samples < 1:
            raise ConfigError("n_samples must be >= 1")
        if len(self.families) < 2:
            raise ConfigError("need at least 2 maneuver families")
        weights = np.array([f.weight for f in self.families], dtype=float)
        if np.any(weights < 0):
            raise ConfigError("family weights must be non-negative")
        if weights.sum() <= 0:
            raise ConfigError("family weights sum to zero")
        for f in self.families:
            if f.name not in _FAMILY_BUILDERS:
                raise ConfigError(f"unknown maneuver family {f.name!r}")
        if self.noise_sigma < 0 or self.dt <= 0 or self.horizon < 2:
            raise ConfigError("bad generator scalars")


def default_fixture_config(n_samples: int = 20000) -> GenConfig:
    """The 6-family fixture used throughout the artifact."""
    weights = {"straight-slow": 1.0, "straight-fast": 1.0, "left-turn": 1.0,
               "right-turn": 1.0, "u-turn": 0.8, "lane-change": 1.0}
    fams = [FamilySpec(name, weights[name]) for name in DEFAULT_FAMILIES]
    return GenConfig(n_samples=n_samples, families=fams)


# ---------------------------------------------------------------------------
# Kinematics: constant-curvature arcs in closed form.
# ---------------------------------------------------------------------------

def arc_positions(arc_lengths: np.ndarray, segments) -> np.ndarray:
    """Positions at the given cumulative arc lengths along a segment chain.

    segments: list of (curvature 1/m, segment_length m); the final segment
    may have length np.inf.  Start pose is the origin heading +y.
    """
    s = np.asarray(arc_lengths, dtype=np.float64)
    out = np.zeros((s.shape[0], 2))
    pos = np.zeros(2)
    heading = 0.0  # radians off +y; positive rotates toward -x (left)
    start = 0.0
    for kappa, length in segments:
        in_seg = (s >= start) & (s <= start + length)
        local = s[in_seg] - start
        out[in_seg] = pos + _arc_offset(local, kappa, heading)
        if not np.isfinite(length):
            break
        pos = pos + _arc_offset(np.array([length]), kappa, heading)[0]
        heading += kappa * length
        start += length
    return out


def _arc_offset(local_s: np.ndarray, kappa: float,
                heading: float) -> np.ndarray:
    """Displacement after arc length local_s at constant curvature."""
    if abs(kappa) < 1e-12:
        direction = np.array([-np.sin(heading), np.cos(heading)])
        return local_s[:, None] * direction[None, :]
    phi = heading + kappa * local_s
    dx = (np.cos(phi) - np.cos(heading)) / kappa
    dy = (np.sin(phi) - np.sin(heading)) / kappa
    return np.stack([dx, dy], axis=1)


def trapezoid_arc_length(t: np.ndarray, v0: float, v1: float,
                         t_ramp: float) -> np.ndarray:
    """Distance covered by time t when speed ramps v0 -> v1 then holds."""
    t = np.asarray(t, dtype=np.float64)
    if t_ramp <= 0:
        return v1 * t
    ramp = np.minimum(t, t_ramp)
    accel = (v1 - v0) / t_ramp
    dist = v0 * ramp + 0.5 * accel * ramp ** 2
    return dist + v1 * np.maximum(t - t_ramp, 0.0)


# ---------------------------------------------------------------------------
# Maneuver families.
# ---------------------------------------------------------------------------

def _pick_layout(rng, names, probs) -> str:
    return names[rng.choice(len(names), p=np.asarray(probs) / np.sum(probs))]


def _straight(rng, p, lo, hi, layouts, layout_probs, gap_lo, gap_hi):
    v0 = p.get("speed", rng.uniform(lo, hi))
    v1 = p.get("cruise_speed", np.clip(v0 + rng.uniform(-1.0, 1.0), 1.0, hi))
    return {
        "v0": v0, "v1": v1,
        "t_ramp": p.get("ramp_time", rng.uniform(0.5, 2.0)),
        "segments": [(0.0, np.inf)],
        "layout": p.get("layout", _pick_layout(rng, layouts, layout_probs)),
        "kappa": 0.0,
        "lane_offset": rng.normal(0.0, 0.15),
        "lead_gap": rng.uniform(gap_lo, gap_hi),
    }


def _straight_slow(rng, p):
    return _straight(rng, p, 3.0, 6.0,
                     ("straight", "four-way", "three-way"), (0.6, 0.2, 0.2),
                     4.0, 15.0)


def _straight_fast(rng, p):
    return _straight(rng, p, 9.0, 14.0,
                     ("straight", "three-way"), (0.9, 0.1), 20.0, 60.0)


def _turn(rng, p, sign):
    radius = p.get("radius", rng.uniform(7.0, 12.0))
    # Fast enough that the quarter-circle completes within the horizon.
    v0 = p.get("speed", rng.uniform(max(3.0, 0.28 * radius), 4.8))
    v1 = p.get("cruise_speed", v0 * rng.uniform(0.95, 1.25))
    kappa = sign / radius
    return {
        "v0": v0, "v1": v1,
        "t_ramp": p.get("ramp_time", rng.uniform(0.5, 2.0)),
        "segments": [(kappa, np.pi * radius / 2.0), (0.0, np.inf)],
        "layout": p.get("layout", _pick_layout(
            rng, ("turn-lane", "four-way", "three-way"), (0.5, 0.3, 0.2))),
        "kappa": kappa,
        "lane_offset": rng.normal(0.0, 0.15),
        "lead_gap": rng.uniform(15.0, 50.0),
    }


def _left_turn(rng, p):
    return _turn(rng, p, +1.0)


def _right_turn(rng, p):
    return _turn(rng, p, -1.0)


def _u_turn(rng, p):
    v0 = p.get("speed", rng.uniform(2.2, 3.4))
    # Radius small enough that the half-circle fits in the horizon.
    r_hi = min(5.5, 0.9 * v0 * HORIZON * DT / np.pi)
    radius = p.get("radius", rng.uniform(3.5, max(3.6, r_hi)))
    kappa = 1.0 / radius
    return {
        "v0": v0, "v1": p.get("cruise_speed", v0),
        "t_ramp": 0.0,
        "segments": [(kappa, np.pi * radius), (0.0, np.inf)],
        "layout": p.get("layout", _pick_layout(
            rng, ("turn-lane", "four-way"), (0.6, 0.4))),
        "kappa": kappa,
        "lane_offset": rng.normal(0.0, 0.15),
        "lead_gap": rng.uniform(10.0, 40.0),
    }


def _lane_change(rng, p):
    v0 = p.get("speed", rng.uniform(8.0, 13.0))
    v1 = p.get("cruise_speed", v0 * rng.uniform(0.95, 1.1))
    direction = p.get("direction", rng.choice([-1.0, 1.0]))
    length = p.get("maneuver_length", rng.uniform(25.0, 35.0))
    offset = 3.5
    # Small-angle S-curve: opposite arcs producing ~offset lateral shift.
    kappa = direction * 4.0 * offset / length ** 2
    return {
        "v0": v0, "v1": v1,
        "t_ramp": p.get("ramp_time", rng.uniform(0.5, 1.5)),
        "segments": [(kappa, length / 2.0), (-kappa, length / 2.0),
                     (0.0, np.inf)],
        "layout": "straight",
        "kappa": 0.0,
        "lane_offset": direction * offset,
        "lead_gap": rng.uniform(8.0, 25.0),
    }


_FAMILY_BUILDERS = {
    "straight-slow": _straight_slow,
    "straight-fast": _straight_fast,
    "left-turn": _left_turn,
    "right-turn": _right_turn,
    "u-turn": _u_turn,
    "lane-change": _lane_change,
}


# ---------------------------------------------------------------------------
# Generation.
# ---------------------------------------------------------------------------

def generate_dataset(config: GenConfig, seed: int) -> Dataset:
    """Deterministic per (config, seed)."""
    rng = np.random.default_rng(seed)
    weights = np.array([f.weight for f in config.families], dtype=float)
    weights = weights / weights.sum()
    times = (np.arange(config.horizon) + 1) * config.dt
    samples = []
    for i in range(config.n_samples):
        fam_idx = int(rng.choice(len(config.families), p=weights))
        spec = config.families[fam_idx]
        fam = _FAMILY_BUILDERS[spec.name](rng, spec.params)
        arc = trapezoid_arc_length(times, fam["v0"], fam["v1"],
                                   fam["t_ramp"])
        pts = arc_positions(arc, fam["segments"])
        if config.noise_sigma > 0:
            noise = rng.normal(0.0, config.noise_sigma, size=pts.shape)
            bound = 4.0 * config.noise_sigma
            pts = pts + np.clip(noise, -bound, bound)
        traj = Trajectory(pts)
        limit = V_MAX * config.dt + 8.0 * config.noise_sigma
        if traj.max_spacing() > limit:
            raise ContractViolation(
                f"waypoint spacing {traj.max_spacing():.3f} exceeds "
                f"kinematic bound {limit:.3f}")
        samples.append(LabeledSample(
            sample_id=i,
            scenario=_scenario_features(rng, fam),
            trajectory=traj,
            hidden_label=fam_idx,
        ))
    return Dataset(samples, tuple(f.name for f in config.families))


def _scenario_features(rng, fam) -> ScenarioFeatures:
    v0 = fam["v0"]
    # Displacement over the past second, extrapolating the first segment
    # backwards at the current speed.
    first_kappa = fam["segments"][0][0]
    hist = -_arc_offset(np.array([-v0]), first_kappa, 0.0)[0]
    # Road curvature is observable from lane geometry only in a dedicated
    # turn lane; plain intersections leave the maneuver ambiguous.
    road_curv = fam["kappa"] if fam["layout"] == "turn-lane" else 0.0
    onehot = np.zeros(len(LAYOUTS))
    onehot[LAYOUTS.index(fam["layout"])] = 1.0
    values = np.concatenate([
        [v0 + rng.normal(0.0, 0.05)],
        hist + rng.normal(0.0, 0.02, size=2),
        [road_curv],
        onehot,
        [fam["lane_offset"], min(fam["lead_gap"], 50.0)],
    ])
    return ScenarioFeatures(values)


# ---------------------------------------------------------------------------
# File I/O: one JSON object per line.
# ---------------------------------------------------------------------------

def write_dataset(dataset: Dataset, path) -> None:
    with open(path, "w") as fh:
        for s in dataset.samples:
            record = {
                "id": s.sample_id,
                "scenario": s.scenario.values.tolist(),
                "trajectory": s.trajectory.waypoints.tolist(),
                "label": s.hidden_label,
            }
            fh.write(json.dumps(record) + "\n")


def read_dataset(path) -> Dataset:
    samples = []
    horizon = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(
                    f"{path}: line {lineno}: malformed record: {exc}"
                ) from exc
            missing = {"id", "scenario", "trajectory", "label"} - set(rec)
            if missing:
                raise DataFormatError(
                    f"{path}: line {lineno}: missing keys {sorted(missing)}")
            try:
                scenario = ScenarioFeatures(np.array(rec["scenario"],
                                                     dtype=np.float64))
                traj = Trajectory(np.array(rec["trajectory"],
                                           dtype=np.float64))
            except (ContractViolation, ValueError) as exc:
                raise DataFormatError(
                    f"{path}: line {lineno}: {exc}") from exc
            if horizon is None:
                horizon = traj.horizon
            elif traj.horizon != horizon:
                raise DataFormatError(
                    f"{path}: line {lineno}: trajectory has "
                    f"{traj.horizon} waypoints, expected {horizon}")
            samples.append(LabeledSample(int(rec["id"]), scenario, traj,
                                         int(rec["label"])))
    return Dataset(samples)
