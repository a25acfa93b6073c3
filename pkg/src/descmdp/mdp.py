"""Descriptor-based pick/place MDP.

State is the image of the most recent grasp (the held descriptor) plus a
one-hot of the most recent place.  Actions are the sampled grasp candidates
(encoded by their descriptor images) or one of a fixed set of place poses.
Picks always succeed; places are scored quasi-statically from the released
object's clearance and tilt.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from . import grasping, scenegen, sensing
from .descriptor import STANDARD, DescriptorConfig, DescriptorEncoder, extract
from .geometry import Pose, rot_x, rot_y
from .grasping import GraspCandidate, HandModel

TWO_STEP_ISOLATION = "two_step_isolation"
TWO_STEP_CLUTTER = "two_step_clutter"
MULTI_STEP_ISOLATION = "multi_step_isolation"
SCENARIOS = (TWO_STEP_ISOLATION, TWO_STEP_CLUTTER, MULTI_STEP_ISOLATION)
MAX_TIME = {TWO_STEP_ISOLATION: 2, TWO_STEP_CLUTTER: 2, MULTI_STEP_ISOLATION: 10}

EMPTY_HAND, HOLDING, PLACED, GOAL, FELL_OVER = "empty_hand", "holding", "placed", "goal", "fell_over"
ABSORBING = (GOAL, FELL_OVER)
REACH_GRASP, REACH_PLACE = "reach_grasp", "reach_place"
BINARY, EXP_FALLOFF = "binary", "exp_falloff"


class ContractViolation(RuntimeError):
    """An MDP call made outside its preconditions (illegal or post-terminal action)."""


# ------------------------------------------------------------------ place set

@dataclass(frozen=True)
class Box:
    """Open-topped container used as the multi-step goal; floor at table height."""
    center: tuple
    half_size: float = 0.09
    rim_height: float = 0.08

    def inside_opening(self, points, floor: float, tol: float = 1e-9) -> bool:
        """Every point below the rim must be within the opening's footprint."""
        low = points[points[:, 2] < floor + self.rim_height]
        if len(low) == 0:
            return True
        d = np.abs(low[:, :2] - np.asarray(self.center)[None, :])
        return bool(np.all(d <= self.half_size + tol))


@dataclass(frozen=True)
class PlaceSet:
    temp_places: tuple = ()
    final_places: tuple = ()
    box: Box | None = None

    def __post_init__(self):
        if not self.final_places:
            raise ValueError("at least one final place is required")
        for a in self.temp_places:
            for b in self.final_places:
                if a.allclose(b, 1e-12):
                    raise ValueError("temp and final places must be disjoint")

    @property
    def n_temp(self) -> int:
        return len(self.temp_places)

    def __len__(self):
        return len(self.temp_places) + len(self.final_places)

    def pose(self, index: int) -> Pose:
        if index < self.n_temp:
            return self.temp_places[index]
        return self.final_places[index - self.n_temp]

    def is_temp(self, index: int) -> bool:
        return index < self.n_temp

    def within(self, workspace) -> bool:
        lo, hi = (np.asarray(w) for w in workspace)
        ps = [p.translation for p in (*self.temp_places, *self.final_places)]
        return all(np.all(t >= lo) and np.all(t <= hi) for t in ps)

    def one_hot(self, index: int | None) -> np.ndarray:
        v = np.zeros(len(self), dtype=np.float32)
        if index is not None:
            v[index] = 1.0
        return v


FLIP = rot_x(np.pi)  # hand axis pointing down
APPROACH_DOWN = rot_y(np.pi / 2)  # approach (+x) pointing down, hand axis along world +x
# top-down final pose for the box: approach -z, closing +y, hand axis +x
BOX_ROTATION = np.column_stack([[0, 0, -1.0], [0, 1.0, 0], [1.0, 0, 0]])


def two_step_places(workspace=scenegen.DEFAULT_WORKSPACE, table_height: float = 0.0,
                    heights=(0.04, 0.07, 0.10, 0.13)) -> PlaceSet:
    """Final tabletop poses at several hand heights, hand axis up or flipped down."""
    c = 0.5 * (np.asarray(workspace[0]) + np.asarray(workspace[1]))
    finals = []
    for rot in (np.eye(3), FLIP):
        for h in heights:
            finals.append(Pose(rot, [c[0], c[1], table_height + h]))
    return PlaceSet((), tuple(finals), None)


def multi_step_places(workspace=scenegen.DEFAULT_WORKSPACE, table_height: float = 0.0,
                      temp_heights=(0.04, 0.08), box_heights=(0.05, 0.08, 0.11, 0.14),
                      box_offset=(0.0, 0.12)) -> PlaceSet:
    """Tabletop temp poses (as held, or rotated so the approach points down) plus box finals.

    The box stands beside the sensed area, so it is never rendered and never
    obstructs grasps; only the place scoring sees it.
    """
    c = 0.5 * (np.asarray(workspace[0]) + np.asarray(workspace[1]))
    temps = []
    for rot in (np.eye(3), APPROACH_DOWN):
        for h in temp_heights:
            temps.append(Pose(rot, [c[0], c[1], table_height + h]))
    bx, by = c[0] + box_offset[0], c[1] + box_offset[1]
    finals = [Pose(BOX_ROTATION, [bx, by, table_height + h]) for h in box_heights]
    return PlaceSet(tuple(temps), tuple(finals), Box((float(bx), float(by))))


def place_pose_for(object_in_hand: Pose, place: Pose) -> Pose:
    """World pose of the released object: hand target composed with the grasp-time offset."""
    return place @ object_in_hand


# ----------------------------------------------------------------- episodes

@dataclass(frozen=True)
class EpisodeConfig:
    scenario: str = TWO_STEP_ISOLATION
    category: str = scenegen.BOTTLE
    max_time: int | None = None
    reward_mode: str = BINARY
    n_objects: int = 7  # clutter only
    m: int = 100  # grasp candidates per sensing step
    descriptor: DescriptorConfig = STANDARD
    hand: HandModel = HandModel()
    mask_temp: bool = False  # ablation: hide temporary places
    tau: float = 0.01  # exp_falloff decay length
    falloff_start: float = 0.02
    max_clearance: float = 0.03
    penetration_tol: float = 0.01
    max_tilt: float = float(np.deg2rad(20.0))

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.category not in scenegen.CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")
        if self.reward_mode not in (BINARY, EXP_FALLOFF):
            raise ValueError(f"unknown reward mode {self.reward_mode!r}")
        if self.max_time is None:
            object.__setattr__(self, "max_time", MAX_TIME[self.scenario])
        if self.max_time != MAX_TIME[self.scenario]:
            raise ValueError(f"{self.scenario} requires max_time={MAX_TIME[self.scenario]}")
        if self.m < 1:
            raise ValueError("m must be >= 1")

    @property
    def multi_step(self) -> bool:
        return self.scenario == MULTI_STEP_ISOLATION

    def place_set(self, workspace=scenegen.DEFAULT_WORKSPACE, table_height: float = 0.0) -> PlaceSet:
        if self.multi_step:
            return multi_step_places(workspace, table_height)
        return two_step_places(workspace, table_height)


@dataclass(frozen=True)
class EpisodeSeeds:
    object_seeds: tuple
    pose_seed: int
    sample_seed: int

    def to_dict(self) -> dict:
        return {"object_seeds": list(self.object_seeds), "pose_seed": self.pose_seed,
                "sample_seed": self.sample_seed}

    @classmethod
    def from_dict(cls, d) -> "EpisodeSeeds":
        return cls(tuple(d["object_seeds"]), d["pose_seed"], d["sample_seed"])


def draw_episode_seeds(rng: np.random.Generator, config: EpisodeConfig, split: str = "train") -> EpisodeSeeds:
    pool = scenegen.TRAIN_SEEDS if split == "train" else scenegen.TEST_SEEDS
    n = config.n_objects if config.scenario == TWO_STEP_CLUTTER else 1
    objs = tuple(int(s) for s in rng.choice(np.asarray(pool), size=n, replace=False))
    return EpisodeSeeds(objs, int(rng.integers(2**31)), int(rng.integers(2**31)))


@dataclass
class MdpState:
    held_image: np.ndarray  # (S, S, C); zero when nothing has been grasped
    last_place: np.ndarray  # one-hot over places; zero when the last action was not a place
    phase: str = EMPTY_HAND
    held_raw: object = None  # Descriptor of the held grasp, if any
    steps: int = 0

    @classmethod
    def initial(cls, shape, n_places: int) -> "MdpState":
        return cls(np.zeros(shape, np.float32), np.zeros(n_places, np.float32))

    @property
    def absorbing(self) -> bool:
        return self.phase in ABSORBING

    def encoding(self):
        return self.held_image, self.last_place

    def digest(self) -> str:
        h = hashlib.sha256(self.phase.encode())
        h.update(np.ascontiguousarray(self.held_image, np.float32).tobytes())
        h.update(np.ascontiguousarray(self.last_place, np.float32).tobytes())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class MdpAction:
    kind: str
    grasp_index: int | None = None
    place_index: int | None = None
    grasp_image: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.kind == REACH_GRASP:
            if self.grasp_index is None or self.place_index is not None or self.grasp_image is None:
                raise ValueError("grasp actions need a grasp index and image only")
        elif self.kind == REACH_PLACE:
            if self.place_index is None or self.grasp_index is not None:
                raise ValueError("place actions need a place index only")
        else:
            raise ValueError(f"unknown action kind {self.kind!r}")

    @property
    def index(self) -> int:
        return self.grasp_index if self.kind == REACH_GRASP else self.place_index

    def encoding(self, image_shape, n_places: int):
        if self.kind == REACH_GRASP:
            return self.grasp_image, np.zeros(n_places, np.float32)
        v = np.zeros(n_places, np.float32)
        v[self.place_index] = 1.0
        return np.zeros(image_shape, np.float32), v

    def to_dict(self) -> dict:
        return {"kind": self.kind, "index": int(self.index)}


def legal_actions(state: MdpState, candidate_images, place_set: PlaceSet,
                  mask_temp: bool = False) -> list:
    if state.phase in ABSORBING:
        return []
    if state.phase in (EMPTY_HAND, PLACED):
        return [MdpAction(REACH_GRASP, grasp_index=i, grasp_image=img)
                for i, img in enumerate(candidate_images)]
    start = place_set.n_temp if mask_temp else 0
    return [MdpAction(REACH_PLACE, place_index=i) for i in range(start, len(place_set))]


@dataclass
class Observation:
    grid: sensing.OccupancyGrid
    cloud: sensing.PointCloud


@dataclass
class StepResult:
    reward: float
    state: MdpState
    terminal: bool
    candidates: list | None
    info: dict


def hand_points(hand: HandModel, pose: Pose, aperture: float | None = None) -> np.ndarray:
    """World corners of the finger and palm boxes."""
    c, h = hand.boxes(aperture)
    signs = np.array(np.meshgrid([-1, 1], [-1, 1], [-1, 1], indexing="ij")).reshape(3, -1).T
    local = (c[:, None, :] + signs[None, :, :] * h[:, None, :]).reshape(-1, 3)
    return pose.apply(local)


class PickPlaceEnv:
    """One environment instance per episode stream; not safe for concurrent ``step`` calls."""

    def __init__(self, config: EpisodeConfig, image_size: int | None = None,
                 table_height: float = 0.0, workspace=scenegen.DEFAULT_WORKSPACE):
        self.config = config
        self._done = False
        dcfg = config.descriptor if image_size is None else config.descriptor.with_image_size(image_size)
        self.descriptor_config = dcfg
        self.encoder = DescriptorEncoder(dcfg.cuboid, dcfg.image_size)
        self.table_height = table_height
        self.workspace = workspace
        self.place_set = config.place_set(workspace, table_height)
        self.state = None
        self.scene = None

    @property
    def n_places(self) -> int:
        return len(self.place_set)

    @property
    def image_shape(self) -> tuple:
        return self.descriptor_config.shape

    # ------------------------------------------------------------- sensing
    def _spawn(self, seeds: EpisodeSeeds) -> scenegen.Scene:
        cfg = self.config
        if cfg.scenario == TWO_STEP_CLUTTER:
            return scenegen.spawn_clutter(cfg.category, cfg.n_objects, seeds.object_seeds,
                                          seeds.pose_seed, self.table_height, self.workspace)
        return scenegen.spawn_isolation(cfg.category, seeds.object_seeds[0], seeds.pose_seed,
                                        self.table_height, self.workspace)

    def _sense(self):
        grid = sensing.observe(self.scene)
        cloud = sensing.remove_table_plane(sensing.extract_cloud(grid), self.table_height)
        self.observation = Observation(grid, cloud)
        seed = self.seeds.sample_seed + 7919 * self._sense_count
        self._sense_count += 1
        self.candidates = grasping.sample_grasps(cloud, grid, self.config.hand, self.config.m, seed)
        tree = cKDTree(cloud.points) if len(cloud.points) else None
        self.descriptors = [extract(cloud, c.pose, self.descriptor_config, tree)
                            for c in self.candidates]
        self.candidate_images = self.encoder.transform(self.descriptors)
        return self.candidates

    # ----------------------------------------------------------------- API
    def reset(self, seeds: EpisodeSeeds, scene: scenegen.Scene | None = None):
        self.seeds = seeds
        self._sense_count = 0
        self.scene = scene if scene is not None else self._spawn(seeds)
        self.held_id = None
        self.object_in_hand = None
        self.held_candidate = None
        self.state = MdpState.initial(self.image_shape, self.n_places)
        self.trace = []
        self._sense()
        # nothing graspable: the episode is over before it starts
        self._done = not self.candidates
        return self.state, self.candidates, self.observation

    def legal_actions(self) -> list:
        if self.state.phase in (EMPTY_HAND, PLACED) and self.state.steps >= self.config.max_time:
            return []
        return legal_actions(self.state, self.candidate_images, self.place_set, self.config.mask_temp)

    def step(self, action: MdpAction) -> StepResult:
        state = self.state
        if state is None:
            raise ContractViolation("reset() must be called before step()")
        if self._done:
            raise ContractViolation("step() called on a terminated episode")
        legal = self.legal_actions()
        if not any(a.kind == action.kind and a.index == action.index for a in legal):
            raise ContractViolation(f"illegal action {action.kind}[{action.index}] in phase {state.phase}")
        pre_hash = state.digest()
        if action.kind == REACH_GRASP:
            result = self._grasp(action)
        else:
            result = self._place(action)
        result.state.steps = state.steps + 1
        if not result.terminal:
            out_of_time = result.state.steps >= self.config.max_time
            no_grasps = result.state.phase in (EMPTY_HAND, PLACED) and not self.candidates
            if out_of_time or no_grasps:
                result.terminal = True
                result.info["timeout" if out_of_time else "no_candidates"] = True
        self.state = result.state
        self._done = result.terminal
        self.trace.append({"state_hash": pre_hash, "action": action.to_dict(),
                           "reward": float(result.reward), "terminal": bool(result.terminal)})
        return result

    @property
    def done(self) -> bool:
        return self._done

    # ------------------------------------------------------------ dynamics
    def _grasp(self, action: MdpAction) -> StepResult:
        cand: GraspCandidate = self.candidates[action.grasp_index]
        obj_id = grasping.grasped_object(self.scene, cand, self.config.hand)
        stable = obj_id is not None
        if obj_id is None:
            obj_id = grasping.nearest_object(self.scene, cand)
        obj = self.scene.get(obj_id)
        self.held_id = obj_id
        self.held_candidate = cand
        self.object_in_hand = cand.pose.inverse() @ obj.pose
        nxt = MdpState(np.array(action.grasp_image, np.float32, copy=True),
                       np.zeros(self.n_places, np.float32), HOLDING,
                       self.descriptors[action.grasp_index])
        return StepResult(0.0, nxt, False, None, {"object_id": obj_id, "stable": stable})

    def _place(self, action: MdpAction) -> StepResult:
        cfg = self.config
        idx = action.place_index
        place = self.place_set.pose(idx)
        obj = self.scene.get(self.held_id).with_pose(place_pose_for(self.object_in_hand, place))
        verts = obj.world_vertices()
        clearance = float(verts[:, 2].min() - self.table_height)
        up = obj.pose.rotation[:, 2]
        tilt = float(np.arccos(np.clip(up[2], -1.0, 1.0)))
        hpts = hand_points(cfg.hand, place, self.held_candidate.aperture)
        info = {"clearance": clearance, "tilt": tilt, "temp": self.place_set.is_temp(idx)}
        penetrates = clearance < -cfg.penetration_tol or hpts[:, 2].min() < self.table_height - cfg.penetration_tol
        low_enough = clearance <= cfg.max_clearance
        prev = self.state
        if self.place_set.is_temp(idx):
            ok = low_enough and not penetrates
            info["success"] = False
            if not ok:
                return StepResult(0.0, self._absorb(FELL_OVER, prev), True, None, info)
            settled = scenegen.settle(obj, self.table_height)
            self.scene = self.scene.replace_object(settled)
            self.held_id = None
            self.object_in_hand = None
            self._sense()
            nxt = MdpState(prev.held_image, self.place_set.one_hot(idx), PLACED, prev.held_raw)
            info["rest"] = scenegen.classify_rest(settled)
            return StepResult(0.0, nxt, False, self.candidates, info)
        # a tilt of at most max_tilt also implies the up axes point the same way (dot > 0)
        upright = tilt <= cfg.max_tilt and up[2] > 0
        fits = True
        box = self.place_set.box
        if box is not None:
            fits = (box.inside_opening(verts, self.table_height)
                    and box.inside_opening(hpts, self.table_height))
        info["upright"], info["fits"] = upright, fits
        shape_ok = upright and fits and not penetrates
        success = shape_ok and low_enough
        info["success"] = success
        if cfg.reward_mode == BINARY:
            reward = 1.0 if success else 0.0
            phase = GOAL if success else FELL_OVER
        else:
            reward = float(np.exp(-max(0.0, clearance - cfg.falloff_start) / cfg.tau)) if shape_ok else 0.0
            phase = GOAL if shape_ok else FELL_OVER
        self.scene = self.scene.replace_object(obj)
        return StepResult(reward, self._absorb(phase, prev), True, None, info)

    def _absorb(self, phase: str, prev: MdpState) -> MdpState:
        return MdpState(prev.held_image, np.zeros(self.n_places, np.float32), phase, prev.held_raw)

    def episode_record(self) -> dict:
        return {"seeds": self.seeds.to_dict(), "trace": list(self.trace)}


def replace_config(config: EpisodeConfig, **kw) -> EpisodeConfig:
    return replace(config, **kw)
