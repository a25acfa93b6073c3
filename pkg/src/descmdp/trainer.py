"""Batch Sarsa: epsilon-greedy rollouts, a replay database relabeled every round, and SGD refits."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import multiprocessing
import time
from dataclasses import asdict, dataclass, field
from functools import partial
from pathlib import Path

import numpy as np

from . import mdp
from .mdp import EpisodeConfig, EpisodeSeeds, MdpAction, PickPlaceEnv
from .qnet import NetConfig, QBatch, QNetwork, QValueRegressor, SgdConfig, save_weights
from .scenegen import SceneGenerationError

log = logging.getLogger(__name__)

METRICS_COLUMNS = ("round", "epsilon", "db_size", "mean_loss", "rollout_success",
                   "eval_success", "nongoal_places", "wall_seconds")


class TrainingError(RuntimeError):
    """A contract violation during training, tagged with the round and seed for replay."""


# ---------------------------------------------------------------- schedule

@dataclass(frozen=True)
class TrainSchedule:
    n_rounds: int = 70
    n_episodes: int = 1000
    epsilon_start: float = 1.0
    epsilon_end: float = 0.10
    epsilon_decay_rounds: int = 18
    final_zero_rounds: int = 5
    gamma: float = 0.95
    capacity: int = 25_000

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if not (0.0 <= self.epsilon_end <= self.epsilon_start <= 1.0):
            raise ValueError("need 0 <= epsilon_end <= epsilon_start <= 1")
        if self.n_rounds < 1 or self.n_episodes < 1 or self.capacity < 1:
            raise ValueError("rounds, episodes and capacity must be positive")
        if self.epsilon_decay_rounds < 1 or self.final_zero_rounds < 0:
            raise ValueError("invalid exploration schedule")


def epsilon_at(round_: int, schedule: TrainSchedule) -> float:
    """Linear decay to epsilon_end at ``epsilon_decay_rounds``, held, then zero at the end."""
    if not 1 <= round_ <= schedule.n_rounds:
        raise ValueError(f"round {round_} outside 1..{schedule.n_rounds}")
    if round_ > schedule.n_rounds - schedule.final_zero_rounds:
        return 0.0
    if round_ >= schedule.epsilon_decay_rounds:
        return schedule.epsilon_end
    frac = (round_ - 1) / (schedule.epsilon_decay_rounds - 1)
    return schedule.epsilon_start + frac * (schedule.epsilon_end - schedule.epsilon_start)


# ---------------------------------------------------------------- database

NONE = -1  # encodes "zero image" / "no place" in serialized experiences


@dataclass(frozen=True)
class Experience:
    """(s, a, r, s', a') with images referenced by id in the database's image store."""
    s: tuple  # (image id, place index)
    a: tuple
    r: float
    s_next: tuple
    a_next: tuple | None
    terminal: bool
    round_added: int

    def __post_init__(self):
        if self.terminal and self.a_next is not None:
            raise ValueError("terminal experiences carry no next action")
        if not self.terminal and self.a_next is None:
            raise ValueError("non-terminal experiences need the executed next action")
        if not 0.0 <= self.r <= 1.0:
            raise ValueError(f"reward {self.r} outside [0, 1]")


class ReplayDatabase:
    """Ordered experiences plus a shared, reference-counted image store."""

    def __init__(self, capacity: int, image_shape: tuple, n_places: int):
        self.capacity = int(capacity)
        self.image_shape = tuple(image_shape)
        self.n_places = int(n_places)
        self.experiences: list = []
        self.images: dict = {}
        self._next_id = 0
        self.labels = np.zeros(0)
        self._zero = np.zeros(self.image_shape, np.float32)

    def __len__(self):
        return len(self.experiences)

    def add_image(self, image) -> int:
        i = self._next_id
        self._next_id += 1
        self.images[i] = np.asarray(image, np.float32)
        return i

    def image(self, image_id: int) -> np.ndarray:
        return self._zero if image_id == NONE else self.images[image_id]

    def place(self, index: int) -> np.ndarray:
        v = np.zeros(self.n_places, np.float32)
        if index != NONE:
            v[index] = 1.0
        return v

    def add(self, exp: Experience):
        self.experiences.append(exp)

    def prune(self) -> int:
        """Drop the oldest experiences beyond capacity; returns the number removed."""
        extra = len(self.experiences) - self.capacity
        if extra <= 0:
            return 0
        del self.experiences[:extra]
        live = set()
        for e in self.experiences:
            for enc in (e.s, e.a, e.s_next, e.a_next):
                if enc is not None:
                    live.add(enc[0])
        for k in [k for k in self.images if k not in live]:
            del self.images[k]
        return extra

    def encode(self, pairs) -> QBatch:
        """Stack (state, action) encoding pairs into network inputs."""
        pairs = list(pairs)
        s_img = np.stack([self.image(s[0]) for s, _ in pairs]) if pairs else np.zeros((0,) + self.image_shape, np.float32)
        a_img = np.stack([self.image(a[0]) for _, a in pairs]) if pairs else np.zeros((0,) + self.image_shape, np.float32)
        s_pl = np.stack([self.place(s[1]) for s, _ in pairs]) if pairs else np.zeros((0, self.n_places), np.float32)
        a_pl = np.stack([self.place(a[1]) for _, a in pairs]) if pairs else np.zeros((0, self.n_places), np.float32)
        return QBatch(s_img, s_pl, a_img, a_pl)

    def dataset(self) -> "_DbView":
        return _DbView(self)


class _DbView:
    """Lazy (s, a) inputs over the database for minibatch gathering."""

    def __init__(self, db: ReplayDatabase):
        self.db = db

    def __len__(self):
        return len(self.db)

    def take(self, idx) -> QBatch:
        ex = self.db.experiences
        return self.db.encode((ex[int(i)].s, ex[int(i)].a) for i in np.atleast_1d(idx))


def q_of(net: QNetwork, db: ReplayDatabase, s, a) -> float:
    """Canonical single-pair Q used for labels."""
    b = db.encode([(s, a)])
    return float(net.forward(b.s_img, b.s_place, b.a_img, b.a_place)[0])


def label_database(net: QNetwork, db: ReplayDatabase, gamma: float) -> np.ndarray:
    """Sarsa targets r + gamma * Q(s', a') from the current weights (r alone when terminal)."""
    targets = np.empty(len(db))
    for i, e in enumerate(db.experiences):
        if e.terminal:
            targets[i] = e.r
        else:
            targets[i] = e.r + gamma * q_of(net, db, e.s_next, e.a_next)
    db.labels = targets
    return targets


# ---------------------------------------------------------------- policies

def action_encodings(actions, image_shape, n_places):
    imgs = np.zeros((len(actions),) + tuple(image_shape), np.float32)
    places = np.zeros((len(actions), n_places), np.float32)
    for i, a in enumerate(actions):
        if a.kind == mdp.REACH_GRASP:
            imgs[i] = a.grasp_image
        else:
            places[i, a.place_index] = 1.0
    return imgs, places


def greedy_index(net: QNetwork, state: mdp.MdpState, actions, image_shape, n_places) -> int:
    imgs, places = action_encodings(actions, image_shape, n_places)
    q = net.q_values(state.held_image, state.last_place, imgs, places)
    return int(np.argmax(q))  # first maximum: ties go to the lowest index


def select_action(net: QNetwork, state: mdp.MdpState, actions, epsilon: float, rng,
                  image_shape=None, n_places=None) -> MdpAction:
    """Epsilon-greedy over ``actions``; one uniform draw decides exploration."""
    if not actions:
        raise ValueError("no legal actions")
    image_shape = state.held_image.shape if image_shape is None else image_shape
    n_places = len(state.last_place) if n_places is None else n_places
    explore = rng.random() < epsilon
    if explore:
        return actions[int(rng.integers(len(actions)))]
    return actions[greedy_index(net, state, actions, image_shape, n_places)]


# ---------------------------------------------------------------- rollouts

@dataclass
class EpisodeResult:
    seeds: EpisodeSeeds
    success: bool
    reward: float
    length: int
    nongoal_places: int
    trace: list
    transitions: list = field(default_factory=list)  # (s, a, r, s', a', terminal), images inline
    skipped: bool = False
    retries: int = 0
    scene: dict | None = None  # initial scene record

    def record(self) -> dict:
        return {"seeds": self.seeds.to_dict(), "success": self.success, "reward": self.reward,
                "length": self.length, "nongoal_places": self.nongoal_places,
                "retries": self.retries, "trace": self.trace, "scene": self.scene}


def rollout(env: PickPlaceEnv, seeds: EpisodeSeeds, policy, rng, collect: bool = False) -> EpisodeResult:
    """Run one episode; ``policy(env, state, legal, rng) -> MdpAction``.

    With ``collect`` each transition is kept with its images so the caller
    can commit it to a database.
    """
    state, _, _ = env.reset(seeds)
    scene = env.scene.to_record()
    transitions = []
    success, total, nongoal = False, 0.0, 0
    if env.done:
        return EpisodeResult(seeds, False, 0.0, 0, 0, list(env.trace), scene=scene)
    legal = env.legal_actions()
    action = policy(env, state, legal, rng)
    while True:
        s_enc = (state.held_image, state.last_place)
        res = env.step(action)
        total += res.reward
        if res.info.get("temp") and res.state.phase == mdp.PLACED:
            nongoal += 1
        if res.terminal:
            success = bool(res.info.get("success", False))
            if collect:
                transitions.append((s_enc, action, res.reward, None, None, True))
            break
        legal = env.legal_actions()
        nxt = policy(env, res.state, legal, rng)
        if collect:
            transitions.append((s_enc, action, res.reward,
                                (res.state.held_image, res.state.last_place), nxt, False))
        state, action = res.state, nxt
    return EpisodeResult(seeds, success, total, len(env.trace), nongoal, list(env.trace),
                         transitions, scene=scene)


def learned_policy(net: QNetwork, epsilon: float):
    def policy(env, state, legal, rng):
        return select_action(net, state, legal, epsilon, rng, env.image_shape, env.n_places)
    return policy


def episode_rngs(master_seed: int, round_: int, episode: int, attempt: int = 0):
    """Independent generators for scene seeds and policy draws of one episode."""
    ss = np.random.SeedSequence([int(master_seed), int(round_), int(episode), int(attempt)])
    a, b = ss.spawn(2)
    return np.random.default_rng(a), np.random.default_rng(b)


def eval_rngs(eval_seed: int, trial: int, attempt: int = 0):
    ss = np.random.SeedSequence([int(eval_seed), 10**6 + int(trial), int(attempt)])
    a, b = ss.spawn(2)
    return np.random.default_rng(a), np.random.default_rng(b)


def run_episode_with_retries(env, rng_factory, policy, split, collect, max_retries: int = 5):
    for attempt in range(max_retries + 1):
        seed_rng, pol_rng = rng_factory(attempt)
        seeds = mdp.draw_episode_seeds(seed_rng, env.config, split)
        try:
            res = rollout(env, seeds, policy, pol_rng, collect)
            res.retries = attempt
            return res
        except SceneGenerationError as exc:
            log.warning("scene generation failed for %s (%s); reseeding", seeds, exc)
    raise TrainingError(f"scene generation failed {max_retries + 1} times")


class _Buffer:
    """Maps an episode's images to database ids; equal images within an episode share one id."""

    def __init__(self, db: ReplayDatabase):
        self.db = db

    def commit(self, transitions, round_: int) -> int:
        ids = {}

        def img_id(arr):
            if not np.any(arr):
                return NONE
            key = hashlib.sha1(np.ascontiguousarray(arr, np.float32).tobytes()).digest()
            if key not in ids:
                ids[key] = self.db.add_image(arr)
            return ids[key]

        def state_enc(enc):
            img, place = enc
            hot = np.flatnonzero(place)
            return (img_id(img), int(hot[0]) if len(hot) else NONE)

        def action_enc(a: MdpAction):
            if a.kind == mdp.REACH_GRASP:
                return (img_id(a.grasp_image), NONE)
            return (NONE, int(a.place_index))

        for s, a, r, s2, a2, term in transitions:
            self.db.add(Experience(state_enc(s), action_enc(a), float(r),
                                   NONE_STATE if s2 is None else state_enc(s2),
                                   None if a2 is None else action_enc(a2), bool(term), round_))
        return len(transitions)


NONE_STATE = (NONE, NONE)


@dataclass
class RoundMetrics:
    round: int
    epsilon: float
    db_size: int
    mean_loss: float
    rollout_success: float
    eval_success: float | None
    nongoal_places: float
    wall_seconds: float
    skipped: int = 0

    def row(self) -> dict:
        d = asdict(self)
        d.pop("skipped")
        d["eval_success"] = "" if self.eval_success is None else self.eval_success
        return d


_WORKER = {}


def _episode_job(i):
    w = _WORKER
    return run_episode_with_retries(w["env"], partial(w["factory"], i), w["policy"], w["split"],
                                    w["collect"])


def map_episodes(env, policy, rng_factory, n: int, split: str, collect: bool, jobs: int = 1) -> list:
    """Run ``n`` independent episodes; ``rng_factory(i, attempt)`` seeds episode ``i``.

    With ``jobs > 1`` episodes run in forked worker processes. Every episode
    owns its generators and the policy is frozen during the call, so results
    (returned in episode order) do not depend on ``jobs``.
    """
    if jobs < 1:
        raise ValueError("jobs must be >= 1")
    if jobs == 1 or n <= 1:
        return [run_episode_with_retries(env, partial(rng_factory, i), policy, split, collect)
                for i in range(n)]
    _WORKER.update(env=env, policy=policy, factory=rng_factory, split=split, collect=collect)
    try:
        with multiprocessing.get_context("fork").Pool(min(jobs, n)) as pool:
            return pool.map(_episode_job, range(n))
    finally:
        _WORKER.clear()


def run_round(env: PickPlaceEnv, net: QNetwork, db: ReplayDatabase, schedule: TrainSchedule,
              round_: int, master_seed: int, n_episodes: int | None = None, jobs: int = 1):
    """Roll out one round of epsilon-greedy episodes and append their experiences in order."""
    eps = epsilon_at(round_, schedule)
    n = schedule.n_episodes if n_episodes is None else n_episodes
    results = map_episodes(env, learned_policy(net, eps), partial(episode_rngs, master_seed, round_),
                           n, "train", True, jobs)
    buf = _Buffer(db)
    for res in results:
        buf.commit(res.transitions, round_)
        res.transitions = []
    return results


def evaluate_policy(env: PickPlaceEnv, policy, n_trials: int, eval_seed: int = 12345,
                    jobs: int = 1) -> list:
    """Episodes on held-out object seeds; identical seeds for every policy given ``eval_seed``."""
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    return map_episodes(env, policy, partial(eval_rngs, eval_seed), n_trials, "test", False, jobs)


# ---------------------------------------------------------------- training

@dataclass
class TrainSettings:
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    sgd: SgdConfig = field(default_factory=SgdConfig)
    net: NetConfig = field(default_factory=NetConfig)
    n_eval: int = 100
    eval_every: int = 0  # 0: evaluate after the final round only
    master_seed: int = 0
    eval_seed: int = 12345
    deterministic: bool = True


@dataclass
class TrainResult:
    net: QNetwork
    db: ReplayDatabase
    metrics: list
    episodes: list
    eval_results: list
    weights_path: Path | None = None
    metrics_path: Path | None = None


def write_metrics(path, metrics) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS, lineterminator="\n")
        w.writeheader()
        for m in metrics:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in m.row().items()})


def make_env(settings: TrainSettings) -> PickPlaceEnv:
    return PickPlaceEnv(settings.episode, image_size=settings.net.image_size)


def check_settings(settings: TrainSettings, env: PickPlaceEnv):
    net = settings.net
    if net.place_dim != env.n_places:
        raise ValueError(f"network place_dim {net.place_dim} != {env.n_places} places")
    if (net.image_size, net.image_size, net.channels) != env.image_shape:
        raise ValueError("network input shape does not match descriptor images")


def train(settings: TrainSettings, out_dir=None, on_round=None, inspect=None,
          jobs: int = 1) -> TrainResult:
    """Algorithm loop: rollouts, prune, relabel, SGD; checkpoints and metrics each round.

    ``inspect(round, net, db, targets, results)`` runs after labeling and before
    the SGD phase, so audits see exactly the labels the network is fit to.
    ``jobs`` sets the number of rollout processes; it never changes results.
    """
    env = make_env(settings)
    check_settings(settings, env)
    sched = settings.schedule
    reg = QValueRegressor(**settings.net.to_dict(), learning_rate=settings.sgd.learning_rate,
                          momentum=settings.sgd.momentum, batch_size=settings.sgd.batch_size,
                          iterations=settings.sgd.iterations_per_round, seed=settings.sgd.seed,
                          warm_start=True)
    reg._init()
    net = reg.net_
    db = ReplayDatabase(sched.capacity, env.image_shape, env.n_places)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    metrics, episodes, eval_results = [], [], []
    for rnd in range(1, sched.n_rounds + 1):
        t0 = time.perf_counter()
        eps = epsilon_at(rnd, sched)
        try:
            results = run_round(env, net, db, sched, rnd, settings.master_seed, jobs=jobs)
        except mdp.ContractViolation as exc:
            raise TrainingError(f"round {rnd}, master seed {settings.master_seed}: {exc}") from exc
        db.prune()
        if len(db) > db.capacity:
            raise TrainingError("database exceeds capacity after prune")
        targets = label_database(net, db, sched.gamma)
        if inspect is not None:
            inspect(rnd, net, db, targets, results)
        loss = float("nan")
        if len(db):
            reg.fit(db.dataset(), targets)
            loss = float(np.mean(reg.loss_curve_)) if reg.loss_curve_ else float("nan")
        ev = None
        last = rnd == sched.n_rounds
        if settings.n_eval > 0 and (last or (settings.eval_every and rnd % settings.eval_every == 0)):
            eval_results = evaluate_policy(env, learned_policy(net, 0.0), settings.n_eval,
                                           settings.eval_seed, jobs)
            ev = float(np.mean([r.success for r in eval_results]))
        wall = 0.0 if settings.deterministic else time.perf_counter() - t0
        m = RoundMetrics(rnd, eps, len(db), loss, float(np.mean([r.success for r in results])),
                         ev, float(np.mean([r.nongoal_places for r in results])), wall,
                         sum(r.retries for r in results))
        metrics.append(m)
        episodes.extend((rnd, r) for r in results)
        log.info("round %d eps=%.2f db=%d loss=%.4g rollout=%.3f eval=%s nongoal=%.3f",
                 rnd, eps, len(db), loss, m.rollout_success, ev, m.nongoal_places)
        if out is not None:
            save_weights(net, out / "checkpoints" / f"round_{rnd:03d}.qnw")
            write_metrics(out / "metrics.csv", metrics)
        if on_round is not None:
            on_round(m)
    result = TrainResult(net, db, metrics, episodes, eval_results)
    if out is not None:
        result.weights_path = out / "weights.qnw"
        save_weights(net, result.weights_path)
        result.metrics_path = out / "metrics.csv"
        write_metrics(result.metrics_path, metrics)
        with open(out / "episodes.jsonl", "w") as fh:
            for rnd, r in episodes:
                fh.write(json.dumps({"round": rnd, **r.record()}) + "\n")
    return result
