"""Scene ingestion, frame transforms, windowing, and synthetic scene generation.

A Scene is a time-indexed set of pedestrian and vehicle tracks in one planar
frame (meters, east-x / north-y, angles in radians). All operations are pure:
they return new scenes and never mutate their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

PED = "ped"
VEH = "veh"

T_OBS = 8
T_PRED = 12
WALK_SPEED = 1.4  # m/s, nominal free-walking speed


class SceneFormatError(ValueError):
    """Malformed scene/pose record; carries the offending line number."""

    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class MissingPoseError(KeyError):
    """A track references a frame with no ego pose."""


@dataclass
class AgentTrack:
    agent_id: str
    kind: str  # "ped" | "veh"
    frames: np.ndarray  # [m] int64, strictly increasing
    xy: np.ndarray      # [m, 2] float64

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.int64)
        self.xy = np.asarray(self.xy, dtype=np.float64).reshape(-1, 2)
        if self.kind not in (PED, VEH):
            raise ValueError(f"unknown agent kind {self.kind!r}")
        if len(self.frames) != len(self.xy):
            raise ValueError("frames and coordinates disagree in length")
        if len(self.frames) > 1 and not np.all(np.diff(self.frames) > 0):
            raise ValueError(f"track {self.agent_id}: frame indices must strictly increase")


@dataclass
class Scene:
    scene_id: str
    frame_rate: float
    tracks: list[AgentTrack] = field(default_factory=list)
    frame_range: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.frame_rate <= 0:
            raise ValueError("frame_rate must be positive")
        lo, hi = self.frame_range
        for t in self.tracks:
            if len(t.frames) and (t.frames[0] < lo or t.frames[-1] > hi):
                raise ValueError(f"track {t.agent_id} outside frame_range {self.frame_range}")

    def frame_axis(self) -> np.ndarray:
        """Sorted distinct frame indices observed by any track."""
        if not self.tracks:
            return np.empty(0, dtype=np.int64)
        return np.unique(np.concatenate([t.frames for t in self.tracks]))


@dataclass
class EgoPose:
    frame_index: int
    x: float
    y: float
    heading: float


@dataclass
class SequenceSample:
    """One 20-step window: 8 observed steps, 12 future steps.

    Pedestrians present in any observed step are included (with per-step
    masks); a pedestrian is a prediction target only when present in all 20
    steps. Vehicles carry observation-period data only. Absent entries are
    zero-filled and masked out.
    """

    scene_id: str
    start_frame: int
    ped_ids: list[str]
    veh_ids: list[str]
    ped_obs: np.ndarray      # [n_p, T_OBS, 2]
    ped_future: np.ndarray   # [n_p, T_PRED, 2]
    ped_mask: np.ndarray     # [n_p, T_OBS + T_PRED] bool
    veh_obs: np.ndarray      # [n_v, T_OBS, 2]
    veh_mask: np.ndarray     # [n_v, T_OBS] bool

    @property
    def n_ped(self) -> int:
        return self.ped_obs.shape[0]

    @property
    def n_veh(self) -> int:
        return self.veh_obs.shape[0]

    @property
    def targets(self) -> np.ndarray:
        """Boolean row mask of pedestrians present at all 20 steps."""
        return self.ped_mask.all(axis=1)


@dataclass
class SynthConfig:
    """Knobs for the synthetic crossing-scene generator.

    Pedestrians cross a horizontal road corridor while vehicles drive along
    it; a repulsive term (gain / distance^2, aimed away from each vehicle's
    near-future position) bends pedestrian paths whenever a vehicle is
    within ``repulsion_radius``.
    """

    n_ped: tuple[int, int] = (2, 4)
    n_veh: tuple[int, int] = (1, 2)
    veh_speed: tuple[float, float] = (3.0, 6.0)
    repulsion_gain: float = 6.0
    repulsion_radius: float = 6.0
    goal_gain: float = 1.0
    noise_sigma: float = 0.03
    duration: int = 24
    frame_rate: float = 2.5
    seed: int = 0

    def __post_init__(self):
        if self.duration < 2:
            raise ValueError("duration must be at least 2 frames")
        if self.repulsion_gain < 0 or self.goal_gain < 0:
            raise ValueError("gains must be non-negative")
        if self.repulsion_radius <= 0:
            raise ValueError("repulsion radius must be positive")


# ---------------------------------------------------------------------------
# frame transforms


def to_global_frame(scene: Scene, poses: list[EgoPose]) -> Scene:
    """Map ego-local coordinates to the global frame: t + Rot(heading) @ p."""
    by_frame = {p.frame_index: p for p in poses}
    tracks = []
    for t in scene.tracks:
        out = np.empty_like(t.xy)
        for i, f in enumerate(t.frames):
            pose = by_frame.get(int(f))
            if pose is None:
                raise MissingPoseError(f"no ego pose for frame {int(f)} (track {t.agent_id})")
            ch, sh = np.cos(pose.heading), np.sin(pose.heading)
            x, y = t.xy[i]
            out[i, 0] = pose.x + ch * x - sh * y
            out[i, 1] = pose.y + sh * x + ch * y
        tracks.append(AgentTrack(t.agent_id, t.kind, t.frames.copy(), out))
    return Scene(scene.scene_id, scene.frame_rate, tracks, scene.frame_range)


def range_filter(scene: Scene, poses: list[EgoPose], radius: float = 75.0) -> Scene:
    """Drop samples farther than ``radius`` from the ego position at that frame.

    Applied to global-frame scenes at ingestion; tracks left empty vanish.
    """
    by_frame = {p.frame_index: p for p in poses}
    tracks = []
    for t in scene.tracks:
        keep = np.ones(len(t.frames), dtype=bool)
        for i, f in enumerate(t.frames):
            pose = by_frame.get(int(f))
            if pose is None:
                raise MissingPoseError(f"no ego pose for frame {int(f)} (track {t.agent_id})")
            keep[i] = np.hypot(t.xy[i, 0] - pose.x, t.xy[i, 1] - pose.y) <= radius
        if keep.any():
            tracks.append(AgentTrack(t.agent_id, t.kind, t.frames[keep], t.xy[keep]))
    return Scene(scene.scene_id, scene.frame_rate, tracks, scene.frame_range)


def resample(scene: Scene, keep_every: int = 4) -> Scene:
    """Keep frames whose index is congruent to the first frame mod ``keep_every``."""
    if keep_every < 1:
        raise ValueError(f"keep_every must be >= 1, got {keep_every}")
    if keep_every == 1:
        return scene
    first = scene.frame_range[0]
    tracks = []
    for t in scene.tracks:
        keep = (t.frames - first) % keep_every == 0
        if keep.any():
            tracks.append(AgentTrack(t.agent_id, t.kind, t.frames[keep], t.xy[keep]))
    return Scene(scene.scene_id, scene.frame_rate / keep_every, tracks, scene.frame_range)


def displacements(points: np.ndarray) -> np.ndarray:
    """Per-step displacement along the second-to-last axis; step 0 is (0, 0)."""
    pts = np.asarray(points, dtype=np.float64)
    out = np.zeros_like(pts)
    out[..., 1:, :] = pts[..., 1:, :] - pts[..., :-1, :]
    return out


def window_sequences(scene: Scene, t_obs: int = T_OBS, t_pred: int = T_PRED,
                     skip: int = 1) -> list[SequenceSample]:
    """Cut a (resampled) scene into fixed-length windows at stride ``skip``.

    The time axis is the sorted union of track frame indices. Windows with no
    pedestrian present at all ``t_obs + t_pred`` steps are dropped.
    """
    length = t_obs + t_pred
    axis = scene.frame_axis()
    samples: list[SequenceSample] = []
    if len(axis) < length:
        return samples
    peds = [t for t in scene.tracks if t.kind == PED]
    vehs = [t for t in scene.tracks if t.kind == VEH]
    ped_idx = [{int(f): i for i, f in enumerate(t.frames)} for t in peds]
    veh_idx = [{int(f): i for i, f in enumerate(t.frames)} for t in vehs]
    for start in range(0, len(axis) - length + 1, skip):
        frames = axis[start:start + length]
        picked = []  # (track, per-step row indices)
        for t, idx in zip(peds, ped_idx):
            rows = [idx.get(int(f), -1) for f in frames]
            if any(r >= 0 for r in rows[:t_obs]):
                picked.append((t, rows))
        if not picked:
            continue
        n_p = len(picked)
        ped_obs = np.zeros((n_p, t_obs, 2))
        ped_future = np.zeros((n_p, t_pred, 2))
        ped_mask = np.zeros((n_p, length), dtype=bool)
        for i, (track, rows) in enumerate(picked):
            for s, r in enumerate(rows):
                if r < 0:
                    continue
                ped_mask[i, s] = True
                if s < t_obs:
                    ped_obs[i, s] = track.xy[r]
                else:
                    ped_future[i, s - t_obs] = track.xy[r]
        if not ped_mask.all(axis=1).any():
            continue  # no prediction target in this window
        picked_v = []
        for t, idx in zip(vehs, veh_idx):
            rows = [idx.get(int(f), -1) for f in frames[:t_obs]]
            if any(r >= 0 for r in rows):
                picked_v.append((t, rows))
        n_v = len(picked_v)
        veh_obs = np.zeros((n_v, t_obs, 2))
        veh_mask = np.zeros((n_v, t_obs), dtype=bool)
        for j, (track, rows) in enumerate(picked_v):
            for s, r in enumerate(rows):
                if r >= 0:
                    veh_mask[j, s] = True
                    veh_obs[j, s] = track.xy[r]
        samples.append(SequenceSample(
            scene.scene_id, int(frames[0]),
            [t.agent_id for t, _ in picked], [t.agent_id for t, _ in picked_v],
            ped_obs, ped_future, ped_mask, veh_obs, veh_mask))
    return samples


# ---------------------------------------------------------------------------
# synthetic scenes


def synth_generate(cfg: SynthConfig) -> Scene:
    """Generate one crossing scene with known pedestrian-vehicle coupling.

    Identical config (including seed) yields a bit-identical scene.
    """
    rng = np.random.default_rng(cfg.seed)
    dt = 1.0 / cfg.frame_rate
    t_ahead = 0.8  # seconds of vehicle look-ahead for the repulsion target
    n_p = int(rng.integers(cfg.n_ped[0], cfg.n_ped[1] + 1))
    n_v = int(rng.integers(cfg.n_veh[0], cfg.n_veh[1] + 1))

    side = rng.choice([-1.0, 1.0], size=n_p)
    ped_pos = np.stack([rng.uniform(-8, 8, n_p), side * rng.uniform(4, 10, n_p)], axis=1)
    goals = np.stack([rng.uniform(-8, 8, n_p), -side * rng.uniform(4, 10, n_p)], axis=1)

    lane = rng.choice([-1.5, 1.5], size=n_v)
    direction = np.where(lane < 0, 1.0, -1.0)
    speed = rng.uniform(cfg.veh_speed[0], cfg.veh_speed[1], n_v)
    # place each vehicle so it reaches the crossing zone inside the scene
    pass_time = rng.uniform(0.25, 0.9, n_v) * cfg.duration * dt
    veh_pos = np.stack([-direction * speed * pass_time, lane], axis=1)
    heading = np.where(direction > 0, 0.0, np.pi)
    curvature = rng.uniform(-0.004, 0.004, n_v) * (rng.random(n_v) < 0.5)

    ped_hist = np.empty((cfg.duration, n_p, 2))
    veh_hist = np.empty((cfg.duration, n_v, 2))
    for f in range(cfg.duration):
        veh_hist[f] = veh_pos
        ped_hist[f] = ped_pos
        veh_vel = np.stack([speed * np.cos(heading), speed * np.sin(heading)], axis=1)
        # pedestrians: goal attraction plus vehicle repulsion
        vel = np.zeros((n_p, 2))
        for i in range(n_p):
            to_goal = goals[i] - ped_pos[i]
            dist_goal = np.hypot(*to_goal)
            if dist_goal > 1e-9:
                step_cap = min(WALK_SPEED, dist_goal / dt)
                vel[i] = cfg.goal_gain * step_cap * to_goal / dist_goal
            if cfg.repulsion_gain > 0:
                for j in range(n_v):
                    ahead = veh_pos[j] + veh_vel[j] * t_ahead
                    away = ped_pos[i] - ahead
                    dist = np.hypot(*away)
                    if dist < cfg.repulsion_radius and dist > 1e-9:
                        # softened inverse square keeps the deflection smooth
                        vel[i] += cfg.repulsion_gain * away / ((0.5 + dist) ** 2 * dist)
            speed_i = np.hypot(*vel[i])
            if speed_i > 2.2:
                vel[i] *= 2.2 / speed_i  # pedestrians cannot sprint faster
        ped_pos = ped_pos + vel * dt
        heading = heading + curvature * speed * dt
        veh_pos = veh_pos + veh_vel * dt

    if cfg.noise_sigma > 0:
        ped_hist = ped_hist + rng.normal(0.0, cfg.noise_sigma, ped_hist.shape)
        veh_hist = veh_hist + rng.normal(0.0, cfg.noise_sigma, veh_hist.shape)

    frames = np.arange(cfg.duration, dtype=np.int64)
    tracks = [AgentTrack(f"p{i}", PED, frames, ped_hist[:, i]) for i in range(n_p)]
    tracks += [AgentTrack(f"v{j}", VEH, frames, veh_hist[:, j]) for j in range(n_v)]
    return Scene(f"synth-{cfg.seed}", cfg.frame_rate, tracks, (0, cfg.duration - 1))


def synth_corpus(cfg: SynthConfig, n_scenes: int, seed_base: int | None = None) -> list[Scene]:
    """Generate ``n_scenes`` scenes with consecutive seeds from ``seed_base``."""
    base = cfg.seed if seed_base is None else seed_base
    return [synth_generate(replace(cfg, seed=base + k)) for k in range(n_scenes)]


# ---------------------------------------------------------------------------
# scene and pose files


def save_scene_records(scenes: list[Scene], path) -> None:
    """Line-delimited text: `#scene <id> <rate>` then frame/agent/kind/x/y rows."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for scene in scenes:
            if any(ch.isspace() for ch in scene.scene_id):
                raise ValueError(f"scene id {scene.scene_id!r} contains whitespace")
            fh.write(f"#scene {scene.scene_id} {scene.frame_rate!r}\n")
            rows = []
            for t in scene.tracks:
                for f, (x, y) in zip(t.frames, t.xy):
                    rows.append((int(f), t.agent_id, t.kind, float(x), float(y)))
            rows.sort(key=lambda r: (r[0], r[1]))
            for f, aid, kind, x, y in rows:
                fh.write(f"{f}\t{aid}\t{kind}\t{x!r}\t{y!r}\n")


def load_scene_records(path) -> list[Scene]:
    """Parse the scene text format; malformed lines raise with their number."""
    scenes: list[Scene] = []
    current: dict | None = None

    def flush():
        if current is None:
            return
        tracks = []
        for (aid, kind), (frames, xs, ys) in current["agents"].items():
            tracks.append(AgentTrack(aid, kind, np.array(frames), np.column_stack([xs, ys])))
        frame_range = (0, 0)
        if tracks:
            frame_range = (min(int(t.frames[0]) for t in tracks),
                           max(int(t.frames[-1]) for t in tracks))
        scenes.append(Scene(current["id"], current["rate"], tracks, frame_range))

    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#scene"):
                parts = line.split()
                if len(parts) != 3:
                    raise SceneFormatError(lineno, f"bad scene header {line!r}")
                flush()
                try:
                    current = {"id": parts[1], "rate": float(parts[2]), "agents": {}}
                except ValueError:
                    raise SceneFormatError(lineno, f"bad frame rate in {line!r}") from None
                continue
            if line.startswith("#"):
                continue
            if current is None:
                raise SceneFormatError(lineno, "record before any #scene header")
            parts = line.split("\t")
            if len(parts) != 5:
                raise SceneFormatError(lineno, f"expected 5 tab-separated fields, got {len(parts)}")
            frame_s, aid, kind, x_s, y_s = parts
            if kind not in (PED, VEH):
                raise SceneFormatError(lineno, f"unknown kind {kind!r}")
            try:
                frame, x, y = int(frame_s), float(x_s), float(y_s)
            except ValueError:
                raise SceneFormatError(lineno, f"bad numeric field in {line!r}") from None
            slot = current["agents"].setdefault((aid, kind), ([], [], []))
            slot[0].append(frame)
            slot[1].append(x)
            slot[2].append(y)
    flush()
    return scenes


def save_pose_records(poses_by_scene: dict[str, list[EgoPose]], path) -> None:
    """Sidecar ego poses: `#poses <scene_id>` then frame/x/y/heading rows."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for scene_id, poses in poses_by_scene.items():
            fh.write(f"#poses {scene_id}\n")
            for p in sorted(poses, key=lambda p: p.frame_index):
                fh.write(f"{p.frame_index}\t{p.x!r}\t{p.y!r}\t{p.heading!r}\n")


def load_pose_records(path) -> dict[str, list[EgoPose]]:
    out: dict[str, list[EgoPose]] = {}
    current: list[EgoPose] | None = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#poses"):
                parts = line.split()
                if len(parts) != 2:
                    raise SceneFormatError(lineno, f"bad pose header {line!r}")
                current = out.setdefault(parts[1], [])
                continue
            if current is None:
                raise SceneFormatError(lineno, "pose record before any #poses header")
            parts = line.split("\t")
            if len(parts) != 4:
                raise SceneFormatError(lineno, f"expected 4 tab-separated fields, got {len(parts)}")
            try:
                current.append(EgoPose(int(parts[0]), float(parts[1]),
                                       float(parts[2]), float(parts[3])))
            except ValueError:
                raise SceneFormatError(lineno, f"bad numeric field in {line!r}") from None
    return out


# ---------------------------------------------------------------------------
# sample datasets (windowed sequences on disk)


def split_scenes(scenes: list[Scene], val_frac: float = 0.1, seed: int = 0,
                 test_frac: float = 0.0) -> tuple[list[Scene], list[Scene], list[Scene]]:
    """Seeded shuffle, then train/val(/test) split by scene."""
    order = np.random.default_rng(seed).permutation(len(scenes))
    n_val = int(round(val_frac * len(scenes)))
    n_test = int(round(test_frac * len(scenes)))
    val = [scenes[i] for i in order[:n_val]]
    test = [scenes[i] for i in order[n_val:n_val + n_test]]
    train = [scenes[i] for i in order[n_val + n_test:]]
    return train, val, test


def save_samples(samples: list[SequenceSample], path) -> None:
    """Flat .npz layout: concatenated agent arrays plus per-sample offsets."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ped_off = np.zeros(len(samples) + 1, dtype=np.int64)
    veh_off = np.zeros(len(samples) + 1, dtype=np.int64)
    for i, s in enumerate(samples):
        ped_off[i + 1] = ped_off[i] + s.n_ped
        veh_off[i + 1] = veh_off[i] + s.n_veh
    def cat(attr, shape):
        arrs = [getattr(s, attr) for s in samples]
        return np.concatenate(arrs, axis=0) if arrs else np.zeros((0,) + shape)
    np.savez(
        path,
        ped_offsets=ped_off, veh_offsets=veh_off,
        ped_obs=cat("ped_obs", (T_OBS, 2)), ped_future=cat("ped_future", (T_PRED, 2)),
        ped_mask=cat("ped_mask", (T_OBS + T_PRED,)),
        veh_obs=cat("veh_obs", (T_OBS, 2)), veh_mask=cat("veh_mask", (T_OBS,)),
        ped_ids=np.array([i for s in samples for i in s.ped_ids], dtype=object),
        veh_ids=np.array([i for s in samples for i in s.veh_ids], dtype=object),
        scene_ids=np.array([s.scene_id for s in samples], dtype=object),
        start_frames=np.array([s.start_frame for s in samples], dtype=np.int64),
    )


def load_samples(path) -> list[SequenceSample]:
    with np.load(path, allow_pickle=True) as z:
        ped_off, veh_off = z["ped_offsets"], z["veh_offsets"]
        out = []
        for i in range(len(ped_off) - 1):
            p0, p1 = int(ped_off[i]), int(ped_off[i + 1])
            v0, v1 = int(veh_off[i]), int(veh_off[i + 1])
            out.append(SequenceSample(
                str(z["scene_ids"][i]), int(z["start_frames"][i]),
                [str(s) for s in z["ped_ids"][p0:p1]], [str(s) for s in z["veh_ids"][v0:v1]],
                z["ped_obs"][p0:p1].copy(), z["ped_future"][p0:p1].copy(),
                z["ped_mask"][p0:p1].copy(), z["veh_obs"][v0:v1].copy(),
                z["veh_mask"][v0:v1].copy()))
    return out


def scene_equal(a: Scene, b: Scene) -> bool:
    """Structural equality with order-insensitive tracks."""
    if (a.scene_id, a.frame_rate, a.frame_range) != (b.scene_id, b.frame_rate, b.frame_range):
        return False
    da = {(t.agent_id, t.kind): t for t in a.tracks}
    db = {(t.agent_id, t.kind): t for t in b.tracks}
    if set(da) != set(db):
        return False
    for key, ta in da.items():
        tb = db[key]
        if not np.array_equal(ta.frames, tb.frames) or not np.array_equal(ta.xy, tb.xy):
            return False
    return True
