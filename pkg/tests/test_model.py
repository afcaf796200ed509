import numpy as np
import pytest

from dagnet import autodiff as ad
from dagnet.autodiff import Tensor, gradcheck
from dagnet.data import Scene, generate_synthetic
from dagnet.goals import SceneGrid
from dagnet.model import (DISPOSITION_DIM, DagNet, GraphOptions, ModelConfig, ModelVariant, SceneBatch, rollout,
                          training_loss)
from dagnet.nn import Adam, clip_grad_norm

SMALL = dict(hidden=8, latent=4, features=8, head_hidden=8, goal_hidden=8, graph_hidden=2, heads=2)
GRAPH = GraphOptions(threshold=3.0)


def small_model(variant="dagnet", n_cells=16, seed=0, **kw):
    return DagNet(ModelConfig(variant=variant, n_cells=n_cells, seed=seed, **{**SMALL, **kw}))


def batch_of(seed=0, n_scenes=2, n_agents=3, T=10, grid=(4, 4), window=3):
    return SceneBatch.from_scenes(generate_synthetic(seed, n_scenes, n_agents, T), grid, window)


def loss_of(model, batch, graph=GRAPH, seed=0, **kw):
    loss, metrics = training_loss(model, batch, np.random.default_rng(seed), graph, **kw)
    return loss.item(), metrics


# -- variant contracts ------------------------------------------------------

def test_variant_flags():
    assert not ModelVariant("vanilla").uses_goals and not ModelVariant("vanilla").uses_hidden_graph
    assert not ModelVariant("avrnn").uses_goals and ModelVariant("avrnn").uses_hidden_graph
    assert ModelVariant("dagnet").uses_goals and ModelVariant("dagnet").uses_hidden_graph
    with pytest.raises(ValueError):
        ModelVariant("transformer")


def test_goal_free_weights_do_not_depend_on_grid_size():
    for variant in ("vanilla", "avrnn"):
        a, b = small_model(variant, n_cells=1), small_model(variant, n_cells=100)
        sa, sb = a.state_dict(), b.state_dict()
        assert sa.keys() == sb.keys()
        assert all(np.array_equal(sa[k], sb[k]) for k in sa)


@pytest.mark.parametrize("variant", ["vanilla", "avrnn"])
def test_goal_free_variants_ignore_goals(variant):
    model = small_model(variant)
    batch = batch_of()
    base_loss, _ = loss_of(model, batch)
    base_roll = rollout(model, batch, 4, 6, GRAPH)
    rng = np.random.default_rng(5)
    batch.goals = rng.dirichlet(np.ones(16), size=batch.goals.shape[:2])
    assert loss_of(model, batch)[0] == base_loss
    assert np.array_equal(rollout(model, batch, 4, 6, GRAPH), base_roll)
    # a completely different grid changes nothing either
    other = batch_of(grid=(1, 1), window=1)
    assert loss_of(model, other)[0] == base_loss
    assert np.array_equal(rollout(model, other, 4, 6, GRAPH), base_roll)


def test_vanilla_ignores_topology():
    model = small_model("vanilla")
    batch = batch_of()
    base_loss, _ = loss_of(model, batch)
    base_roll = rollout(model, batch, 4, 6, GRAPH)
    for graph in (GraphOptions(0.0, "distance"), GraphOptions(np.inf, "complete"), GraphOptions(0.5, "distance")):
        assert loss_of(model, batch, graph)[0] == base_loss
        assert np.array_equal(rollout(model, batch, 4, 6, graph), base_roll)


def test_avrnn_uses_topology_and_dagnet_uses_goals():
    av = small_model("avrnn")
    batch = batch_of()
    assert loss_of(av, batch, GraphOptions(0.0))[0] != loss_of(av, batch, GraphOptions(np.inf))[0]
    dag = small_model("dagnet")
    base = loss_of(dag, batch)[0]
    batch.goals = np.roll(batch.goals, 1, axis=-1)
    assert loss_of(dag, batch)[0] != base


def test_dagnet_needs_goals():
    batch = batch_of()
    batch.goals = None
    with pytest.raises(ValueError, match="goals"):
        loss_of(small_model("dagnet"), batch)
    with pytest.raises(ValueError, match="truth"):
        rollout(small_model("dagnet"), batch, 4, 6, GRAPH, goal_source="truth")


# -- individual heads -------------------------------------------------------

def test_zero_weights_give_standard_heads():
    model = small_model("dagnet", n_cells=9)
    for p in model.parameters():
        p.data = np.zeros_like(p.data)
    h = Tensor(np.random.default_rng(0).normal(size=(5, 8)))
    goal = np.eye(9)[[0, 3, 8, 1, 1]]
    prior = model.prior_step(h, goal)
    assert np.array_equal(prior.mean.data, np.zeros((5, 4)))
    assert np.array_equal(prior.log_var.data, np.zeros((5, 4)))
    out = model.decode_step(np.ones((5, 4)), h, goal)
    assert np.array_equal(out.mean.data, np.zeros((5, 2)))
    proposed = model.propose_goal(goal, np.ones((5, DISPOSITION_DIM)), h)
    np.testing.assert_allclose(proposed.data, np.full((5, 9), 1 / 9), rtol=0, atol=1e-15)


def test_goal_changes_prior():
    model = small_model("dagnet", n_cells=9)
    h = Tensor(np.zeros((1, 8)))
    a = model.prior_step(h, np.eye(9)[[2]])
    b = model.prior_step(h, np.eye(9)[[7]])
    assert not np.array_equal(a.mean.data, b.mean.data)


def test_goal_head_outputs_distributions():
    model = small_model("dagnet", n_cells=9)
    rng = np.random.default_rng(1)
    batch = batch_of(n_scenes=1, n_agents=4)
    h = Tensor(rng.normal(size=(4, 8)))
    proposed = model.propose_goal(np.full((4, 9), 1 / 9), rng.normal(size=(4, DISPOSITION_DIM)), h)
    refined = model.refine_goals(proposed, batch.topology(batch.positions[:, 0], batch.mask[:, 0], np.inf))
    for g in (proposed.data, refined.data):
        assert (g >= 0).all()
        np.testing.assert_allclose(g.sum(axis=1), 1.0, atol=1e-12)


def test_disposition_is_invariant_to_order_of_others():
    rng = np.random.default_rng(2)
    scene = generate_synthetic(3, 1, 6, 5)[0]
    batch = SceneBatch.from_scenes([scene])
    pos = rng.uniform(0, 10, (6, 2))
    present = np.ones(6, dtype=bool)
    present[4] = False
    base = batch.disposition(pos, present)
    perm = rng.permutation(6)
    moved = batch.disposition(pos[perm], present[perm])
    assert np.array_equal(moved, base[perm])
    # the lone-agent case has no companions
    lonely = batch.disposition(pos, np.eye(6, dtype=bool)[0])
    assert np.array_equal(lonely[0], np.zeros(DISPOSITION_DIM))


def test_single_goal_cell_has_zero_cross_entropy():
    model = small_model("dagnet", n_cells=1)
    batch = batch_of(grid=(1, 1), window=2)
    _, metrics = loss_of(model, batch)
    assert metrics["ce"] == 0.0


def _copy_with_zero_goal_columns(src: DagNet, dst: DagNet) -> None:
    state = src.state_dict()
    target = dst.state_dict()
    for name, value in target.items():
        if name in state and state[name].shape == value.shape:
            target[name] = state[name]
        elif name in state:  # first layer of a goal-conditioned head: extra goal columns
            w = np.zeros_like(value)
            w[:, :state[name].shape[1]] = state[name]
            target[name] = w
    dst.load_state_dict(target)
    if dst.hidden_refiner is not None:
        dst.hidden_refiner.set_passthrough()


def test_single_agent_reduces_to_plain_recurrent_model():
    scene = generate_synthetic(4, 1, 1, 8)
    batch = SceneBatch.from_scenes(scene, (3, 3), 2)
    vanilla = small_model("vanilla", n_cells=9)
    for variant in ("avrnn", "dagnet"):
        other = small_model(variant, n_cells=9, seed=7)
        _copy_with_zero_goal_columns(vanilla, other)
        _, mv = loss_of(vanilla, batch)
        _, mo = loss_of(other, batch)
        assert mo["nll"] == pytest.approx(mv["nll"], abs=1e-12)
        assert mo["kl"] == pytest.approx(mv["kl"], abs=1e-12)
        np.testing.assert_allclose(rollout(other, batch, 3, 5, GRAPH), rollout(vanilla, batch, 3, 5, GRAPH),
                                   rtol=0, atol=1e-12)


# -- loss -------------------------------------------------------------------

class ZeroNoise:
    """Stands in for a generator: the latent sample becomes the posterior mean."""

    def standard_normal(self, shape):
        return np.zeros(shape)


def test_loss_is_average_over_agents():
    model = small_model("avrnn")
    one = batch_of(n_scenes=1, n_agents=3)
    two = SceneBatch.from_scenes(generate_synthetic(0, 1, 3, 10) * 2, (4, 4), 3)
    # two identical, disjoint copies of a scene give the same per-agent loss
    a = training_loss(model, one, ZeroNoise(), GRAPH)[0].item()
    b = training_loss(model, two, ZeroNoise(), GRAPH)[0].item()
    assert b == pytest.approx(a, rel=1e-12)


def test_masked_agent_steps_do_not_contribute():
    model = small_model("avrnn")
    scene = generate_synthetic(0, 1, 3, 10)[0]
    batch = SceneBatch.from_scenes([scene], (4, 4), 3)
    base = loss_of(model, batch)[0]
    scene.mask[2, 6:] = False
    altered = scene.positions.copy()
    altered[2, 6:] = 1e3
    masked = SceneBatch.from_scenes([Scene(altered, scene.mask, grid=scene.grid)], (4, 4), 3)
    reference = SceneBatch.from_scenes([Scene(scene.positions, scene.mask, grid=scene.grid)], (4, 4), 3)
    assert loss_of(model, masked)[0] == loss_of(model, reference)[0]
    assert loss_of(model, reference)[0] != base


def test_non_finite_loss_names_the_step():
    model = small_model("vanilla")
    batch = batch_of()
    model.dec.layers[-1].bias.data[0] = np.nan
    with pytest.raises(FloatingPointError, match="time-step 1"):
        loss_of(model, batch)


def test_full_loss_gradient_small_scene():
    rng = np.random.default_rng(0)
    model = DagNet(ModelConfig(hidden=4, latent=2, features=4, head_hidden=4, goal_hidden=4, graph_hidden=2,
                               heads=2, n_cells=4))
    for _, p in model.named_parameters():
        if p.data.ndim == 1:  # keep away from ReLU kinks at exactly-zero inputs
            p.data = rng.normal(0, 0.1, p.shape)
    batch = SceneBatch.from_scenes(generate_synthetic(1, 1, 2, 4), (2, 2), 2)
    fn = lambda: training_loss(model, batch, np.random.default_rng(0), GRAPH)[0]
    assert gradcheck(fn, model.parameters()) < 1e-4


def test_elbo_decreases_under_adam():
    monotone = 0
    for seed in range(10):
        model = small_model("dagnet", seed=seed)
        batch = batch_of(seed=seed, n_scenes=1, n_agents=3, T=8)
        opt = Adam(model.named_parameters(), lr=1e-4)
        losses = []
        for _ in range(50):
            with ad.Tape():
                loss, _ = training_loss(model, batch, np.random.default_rng(0), GRAPH)
            opt.zero_grad()
            ad.backward(loss)
            clip_grad_norm(model.parameters(), 10.0)
            opt.step()
            losses.append(loss.item())
        monotone += all(b < a for a, b in zip(losses, losses[1:]))
    assert monotone >= 9


# -- roll-outs --------------------------------------------------------------

@pytest.mark.parametrize("T_obs,T_pred", [(8, 12), (10, 40)])
def test_rollout_shapes(T_obs, T_pred):
    model = small_model("dagnet")
    batch = batch_of(T=T_obs + T_pred)
    pred, goals = rollout(model, batch, T_obs, T_pred, GRAPH, return_goals=True)
    assert pred.shape == (6, T_pred, 2)
    assert goals.shape == (6, T_obs - 1 + T_pred, 16)
    assert np.isfinite(pred).all()


def test_rollout_only_needs_the_prefix():
    model = small_model("dagnet")
    full = batch_of(T=20)
    short = SceneBatch.from_scenes([s.window(0, 8) for s in generate_synthetic(0, 2, 3, 20)], (4, 4), 3)
    assert np.array_equal(rollout(model, full, 8, 12, GRAPH), rollout(model, short, 8, 12, GRAPH))
    with pytest.raises(ValueError, match="prefix too short"):
        rollout(model, short, 9, 12, GRAPH)
    with pytest.raises(ValueError):
        rollout(model, short, 1, 12, GRAPH)


def test_rollout_is_deterministic():
    model = small_model("dagnet")
    batch = batch_of()
    assert np.array_equal(rollout(model, batch, 4, 6, GRAPH), rollout(model, batch, 4, 6, GRAPH))
    a = rollout(model, batch, 4, 6, GRAPH, deterministic=False, rng=np.random.default_rng(3))
    b = rollout(model, batch, 4, 6, GRAPH, deterministic=False, rng=np.random.default_rng(3))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, rollout(model, batch, 4, 6, GRAPH))
    with pytest.raises(ValueError, match="rng"):
        rollout(model, batch, 4, 6, GRAPH, deterministic=False)


@pytest.mark.parametrize("variant", ["vanilla", "avrnn", "dagnet"])
def test_rollout_is_permutation_equivariant(variant):
    model = small_model(variant)
    scene = generate_synthetic(6, 1, 5, 12)[0]
    perm = np.random.default_rng(0).permutation(5)
    moved = Scene(scene.positions[perm], scene.mask[perm], grid=scene.grid)
    a = rollout(model, SceneBatch.from_scenes([scene], (4, 4), 3), 5, 7, GRAPH)
    b = rollout(model, SceneBatch.from_scenes([moved], (4, 4), 3), 5, 7, GRAPH)
    assert np.array_equal(b, a[perm])


def test_scenes_in_a_batch_do_not_interact():
    model = small_model("dagnet")
    scenes = generate_synthetic(8, 3, 3, 10)
    together = rollout(model, SceneBatch.from_scenes(scenes, (4, 4), 3), 4, 6, GraphOptions(np.inf))
    for k, s in enumerate(scenes):
        alone = rollout(model, SceneBatch.from_scenes([s], (4, 4), 3), 4, 6, GraphOptions(np.inf))
        np.testing.assert_allclose(together[3 * k:3 * k + 3], alone, rtol=0, atol=1e-12)


def test_batch_rejects_mixed_lengths():
    a = generate_synthetic(0, 1, 2, 8)
    b = generate_synthetic(0, 1, 2, 9)
    with pytest.raises(ValueError, match="length"):
        SceneBatch.from_scenes(a + b)


def test_grid_defaults_to_bounding_box():
    scene = Scene(np.array([[[0.0, 0.0], [4.0, 2.0]]]), np.ones((1, 2), dtype=bool))
    batch = SceneBatch.from_scenes([scene], (2, 2), 1)
    g = batch.grids[0]
    assert isinstance(g, SceneGrid) and (g.rows, g.cols) == (2, 2)
    assert g.x_min <= 0 and g.x_max >= 4 and g.y_min <= 0 and g.y_max >= 2
