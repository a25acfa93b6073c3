import numpy as np
import pytest

from descmdp import mdp
from descmdp import scenegen as sg
from descmdp.descriptor import extract
from descmdp.geometry import Pose, rot_x, rot_z
from descmdp.grasping import GraspCandidate

SMALL_IMG = 12


def _env(scenario=mdp.TWO_STEP_ISOLATION, category=sg.BOTTLE, **kw):
    cfg = mdp.EpisodeConfig(scenario=scenario, category=category, m=kw.pop("m", 10), **kw)
    return mdp.PickPlaceEnv(cfg, image_size=SMALL_IMG)


def _seeds(rng, env, split="train"):
    return mdp.draw_episode_seeds(rng, env.config, split)


def _inject(env, poses):
    """Replace the sampled candidates with hand-built ones."""
    env.candidates = [GraspCandidate(p, env.config.hand.max_aperture) for p in poses]
    env.descriptors = [extract(env.observation.cloud, p, env.descriptor_config) for p in poses]
    env.candidate_images = env.encoder.transform(env.descriptors)


def _upright_scene(category=sg.BOTTLE, object_seed=3):
    return sg.spawn_isolation(category, object_seed, 5, kind=sg.UPRIGHT)


def _centered_grasp(scene, height, rot=np.eye(3)):
    c = scene.objects[0].pose.translation
    return Pose(rot, [c[0], c[1], scene.table_height + height])


def _grasp_then_place(env, scene, grasp_height, place_index):
    env.reset(mdp.EpisodeSeeds((3,), 5, 0), scene=scene)
    _inject(env, [_centered_grasp(scene, grasp_height)])
    r1 = env.step(env.legal_actions()[0])
    assert r1.state.phase == mdp.HOLDING and r1.reward == 0.0 and not r1.terminal
    act = next(a for a in env.legal_actions() if a.place_index == place_index)
    return env.step(act)


# -------------------------------------------------------------- reset

def test_initial_state_is_zero():
    env = _env()
    state, cands, obs = env.reset(_seeds(np.random.default_rng(0), env))
    assert state.phase == mdp.EMPTY_HAND
    assert not state.held_image.any() and not state.last_place.any()
    assert state.held_image.shape == (SMALL_IMG, SMALL_IMG, 12)
    assert len(state.last_place) == env.n_places


@pytest.mark.slow
def test_isolation_resets_have_candidates():
    # lying bottles whose far flank faces away from both cameras yield no antipodal pair
    env = _env(m=50)
    rng = np.random.default_rng(11)
    nonempty = 0
    for _ in range(500):
        _, cands, _ = env.reset(_seeds(rng, env))
        nonempty += bool(cands)
    assert nonempty >= 475


def test_clutter_has_seven_objects():
    env = _env(mdp.TWO_STEP_CLUTTER, sg.MUG)
    seeds = _seeds(np.random.default_rng(2), env)
    assert len(seeds.object_seeds) == 7
    for attempt in range(10):
        try:
            env.reset(mdp.EpisodeSeeds(seeds.object_seeds, seeds.pose_seed + attempt, seeds.sample_seed))
            break
        except sg.SceneGenerationError:
            continue
    assert len(env.scene.objects) == 7


def test_test_split_uses_held_out_objects():
    env = _env()
    rng = np.random.default_rng(0)
    for _ in range(50):
        assert _seeds(rng, env, "test").object_seeds[0] in sg.TEST_SEEDS
        assert _seeds(rng, env, "train").object_seeds[0] in sg.TRAIN_SEEDS


# -------------------------------------------------------------- step examples

def test_side_grasp_and_upright_place_succeeds():
    env = _env()
    res = _grasp_then_place(env, _upright_scene(), 0.04, 0)  # final 0: hand up, height 0.04
    assert res.reward == 1.0 and res.terminal and res.state.phase == mdp.GOAL
    assert abs(res.info["clearance"]) < 1e-9 and res.info["tilt"] < 1e-9


def test_flipped_place_falls_over():
    env = _env(category=sg.MUG)
    res = _grasp_then_place(env, _upright_scene(sg.MUG), 0.04, 4)  # final 4: hand flipped
    assert res.reward == 0.0 and res.state.phase == mdp.FELL_OVER
    assert res.info["tilt"] == pytest.approx(np.pi)


@pytest.mark.parametrize("mode,reward,phase", [(mdp.BINARY, 0.0, mdp.FELL_OVER),
                                               (mdp.EXP_FALLOFF, np.exp(-3.0), mdp.GOAL)])
def test_reward_modes_at_five_centimeters(mode, reward, phase):
    env = _env(reward_mode=mode)
    res = _grasp_then_place(env, _upright_scene(), 0.05, 2)  # place height 0.10
    assert res.info["clearance"] == pytest.approx(0.05, abs=1e-9)
    assert res.reward == pytest.approx(reward, rel=1e-9)
    assert res.state.phase == phase
    if mode == mdp.EXP_FALLOFF:
        assert res.reward == pytest.approx(0.0498, abs=1e-4)


def test_rewards_in_range():
    for mode in (mdp.BINARY, mdp.EXP_FALLOFF):
        for height, idx in ((0.04, 0), (0.04, 1), (0.07, 3), (0.04, 4)):
            env = _env(reward_mode=mode)
            r = _grasp_then_place(env, _upright_scene(), height, idx).reward
            assert 0.0 <= r <= 1.0
            if mode == mdp.BINARY:
                assert r in (0.0, 1.0)


def test_absorbing_and_illegal_actions():
    env = _env()
    res = _grasp_then_place(env, _upright_scene(), 0.04, 0)
    assert res.terminal and env.done and env.legal_actions() == []
    with pytest.raises(mdp.ContractViolation):
        env.step(mdp.MdpAction(mdp.REACH_PLACE, place_index=0))
    env.reset(mdp.EpisodeSeeds((3,), 5, 0), scene=_upright_scene())
    with pytest.raises(mdp.ContractViolation):
        env.step(mdp.MdpAction(mdp.REACH_PLACE, place_index=0))  # nothing held yet
    with pytest.raises(mdp.ContractViolation):
        mdp.PickPlaceEnv(env.config).step(mdp.MdpAction(mdp.REACH_PLACE, place_index=0))


def test_temp_place_resenses_and_records_place():
    env = _env(mdp.MULTI_STEP_ISOLATION, sg.MUG)
    scene = _upright_scene(sg.MUG, 4)
    env.reset(mdp.EpisodeSeeds((4,), 5, 0), scene=scene)
    _inject(env, [_centered_grasp(scene, 0.04)])
    env.step(env.legal_actions()[0])
    res = env.step(next(a for a in env.legal_actions() if a.place_index == 0))
    assert res.state.phase == mdp.PLACED and not res.terminal and res.reward == 0.0
    assert res.state.last_place.tolist() == env.place_set.one_hot(0).tolist()
    assert res.candidates is env.candidates and res.state.held_image.any()
    assert all(a.kind == mdp.REACH_GRASP for a in env.legal_actions())


def test_box_goal_needs_top_grasp():
    env = _env(mdp.MULTI_STEP_ISOLATION, sg.BOTTLE)
    ps = env.place_set
    first_box = ps.n_temp
    # side grasp (hand axis up) placed with the top-down box rotation tips the object
    res = _grasp_then_place(env, _upright_scene(), 0.04, first_box)
    assert res.state.phase == mdp.FELL_OVER
    # a top-down grasp from above lowers the upright object straight into the box
    scene = _upright_scene()
    env.reset(mdp.EpisodeSeeds((3,), 5, 0), scene=scene)
    top = sg_top = scene.objects[0].world_vertices()[:, 2].max()
    box_h = [p.translation[2] for p in ps.final_places]
    k = int(np.argmin([abs(h - (top - 0.02)) for h in box_h]))
    grasp_h = box_h[k]
    _inject(env, [_centered_grasp(scene, grasp_h, mdp.BOX_ROTATION)])
    env.step(env.legal_actions()[0])
    res = env.step(next(a for a in env.legal_actions() if a.place_index == first_box + k))
    assert res.info["fits"] and res.info["upright"], res.info
    assert res.reward == 1.0 and res.state.phase == mdp.GOAL
    assert sg_top > 0


# -------------------------------------------------------------- legal actions

def test_legal_action_counts():
    shape = (SMALL_IMG, SMALL_IMG, 12)
    temps = tuple(Pose(np.eye(3), [0.1 * i, 0, 0.05]) for i in range(4))
    finals = tuple(Pose(np.eye(3), [0.1 * i, 0.2, 0.05]) for i in range(3))
    ps = mdp.PlaceSet(temps, finals)
    images = np.zeros((40,) + shape, np.float32)
    s = mdp.MdpState.initial(shape, len(ps))
    assert len(mdp.legal_actions(s, images, ps)) == 40
    s.phase = mdp.HOLDING
    assert len(mdp.legal_actions(s, images, ps)) == 7
    assert len(mdp.legal_actions(s, images, ps, mask_temp=True)) == 3
    s.phase = mdp.GOAL
    assert mdp.legal_actions(s, images, ps) == []
    s.phase = mdp.PLACED
    assert len(mdp.legal_actions(s, images, ps)) == 40


def test_action_invariants():
    img = np.ones((SMALL_IMG, SMALL_IMG, 12), np.float32)
    with pytest.raises(ValueError):
        mdp.MdpAction(mdp.REACH_GRASP, grasp_index=0)
    with pytest.raises(ValueError):
        mdp.MdpAction(mdp.REACH_PLACE, place_index=1, grasp_index=0)
    a = mdp.MdpAction(mdp.REACH_PLACE, place_index=2)
    ai, ap = a.encoding(img.shape, 8)
    assert not ai.any() and ap.tolist() == [0, 0, 1, 0, 0, 0, 0, 0]
    g = mdp.MdpAction(mdp.REACH_GRASP, grasp_index=0, grasp_image=img)
    gi, gp = g.encoding(img.shape, 8)
    assert gi.all() and not gp.any()


def test_place_sets():
    two = mdp.two_step_places()
    multi = mdp.multi_step_places()
    assert len(two) == 8 and two.n_temp == 0 and two.within(sg.DEFAULT_WORKSPACE)
    assert multi.n_temp == 4 and len(multi.final_places) == 4 and multi.box is not None
    assert multi.within(sg.DEFAULT_WORKSPACE)
    with pytest.raises(ValueError):
        mdp.PlaceSet((two.final_places[0],), two.final_places)


def test_config_max_time():
    assert mdp.EpisodeConfig().max_time == 2
    assert mdp.EpisodeConfig(scenario=mdp.MULTI_STEP_ISOLATION).max_time == 10
    with pytest.raises(ValueError):
        mdp.EpisodeConfig(max_time=3)


# -------------------------------------------------------------- place_pose_for

def test_place_pose_examples():
    assert mdp.place_pose_for(Pose.identity(), Pose.identity()).allclose(Pose.identity(), 0.0)
    off = Pose(np.eye(3), [0, 0, -0.04])
    hand = Pose(rot_z(0.3), [0.1, 0.2, 0.3])
    obj = mdp.place_pose_for(off, hand)
    assert obj.translation[2] == pytest.approx(hand.translation[2] - 0.04)
    # regrasp at the same relative pose and place at the same target reproduces the pose
    grasp = Pose(rot_x(0.4) @ rot_z(1.1), [0.3, -0.1, 0.2])
    in_hand = grasp.inverse() @ obj
    again = mdp.place_pose_for(in_hand, grasp)
    assert again.allclose(obj, 1e-9)


# -------------------------------------------------------------- episodes

def _random_episode(env, rng):
    env.reset(_seeds(rng, env))
    steps = 0
    while not env.done:
        acts = env.legal_actions()
        env.step(acts[int(rng.integers(len(acts)))])
        steps += 1
    return steps


@pytest.mark.parametrize("scenario,category,limit", [(mdp.TWO_STEP_ISOLATION, sg.BOTTLE, 2),
                                                     (mdp.MULTI_STEP_ISOLATION, sg.MUG, 10)])
def test_episode_length_bounds(scenario, category, limit):
    env = _env(scenario, category)
    rng = np.random.default_rng(4)
    for _ in range(5):
        n = _random_episode(env, rng)
        assert n <= limit
        # no reward after the terminal step
        assert all(t["reward"] == 0.0 for t in env.trace[:-1])


def test_replay_from_seeds_and_actions():
    env = _env(mdp.MULTI_STEP_ISOLATION, sg.MUG)
    rng = np.random.default_rng(9)
    _random_episode(env, rng)
    rec = env.episode_record()
    replay = _env(mdp.MULTI_STEP_ISOLATION, sg.MUG)
    replay.reset(mdp.EpisodeSeeds.from_dict(rec["seeds"]))
    for t in rec["trace"]:
        a = next(x for x in replay.legal_actions()
                 if x.kind == t["action"]["kind"] and x.index == t["action"]["index"])
        replay.step(a)
    assert replay.trace == rec["trace"]
