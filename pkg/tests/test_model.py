import numpy as np
import pytest

from seqdiff import model as M
from seqdiff.model import Checkpoint, TinyDenoiser, TinyDenoiserConfig, ema_update
from seqdiff.schedules import DiscreteNoiseGrid, LossWeighting, NoiseSchedule, Parameterization
from seqdiff.training import Objective, make_training_batch, _loss_core


@pytest.fixture(scope="module")
def cfg():
    return TinyDenoiserConfig(
        data_dim=2, num_frames=5, embed_dim=24, num_heads=3, num_blocks=2,
        action_vocab=4, seed=3,
    )


@pytest.fixture(scope="module")
def trained_like_params(cfg):
    params = M.init_params(cfg)
    rng = np.random.default_rng(0)
    params["w_out"] = rng.standard_normal(params["w_out"].shape) * 0.1
    params["b_out"] = rng.standard_normal(params["b_out"].shape) * 0.1
    return params


def test_config_validation():
    with pytest.raises(M.ModelError):
        TinyDenoiserConfig(data_dim=1, num_frames=4, embed_dim=30, num_heads=4)
    with pytest.raises(M.ModelError):
        TinyDenoiserConfig(data_dim=0, num_frames=4)


def test_zero_initialized_head_outputs_zero(cfg, rng):
    params = M.init_params(cfg)
    x = rng.standard_normal((3, 5, 2))
    out = M.forward(cfg, params, x, 0.4)
    np.testing.assert_array_equal(out, 0.0)


def test_batch_permutation_equivariance(cfg, trained_like_params, rng):
    x = rng.standard_normal((6, 5, 2))
    k = rng.uniform(0.1, 0.9, size=(6, 5))
    acts = rng.integers(0, 4, size=(6, 5))
    out = M.forward(cfg, trained_like_params, x, k, acts)
    perm = rng.permutation(6)
    out_p = M.forward(cfg, trained_like_params, x[perm], k[perm], acts[perm])
    np.testing.assert_array_equal(out_p, out[perm])


def test_forward_determinism(cfg, trained_like_params, rng):
    x = rng.standard_normal((2, 5, 2))
    a = M.forward(cfg, trained_like_params, x, 0.5)
    b = M.forward(cfg, trained_like_params, x, 0.5)
    np.testing.assert_array_equal(a, b)


def test_shape_and_vocab_errors(cfg, trained_like_params):
    with pytest.raises(M.ModelError):
        M.forward(cfg, trained_like_params, np.zeros((2, 5, 3)), 0.5)
    with pytest.raises(M.ModelError):
        M.forward(cfg, trained_like_params, np.zeros((2, 9, 2)), 0.5)
    with pytest.raises(M.ModelError):
        M.forward(cfg, trained_like_params, np.zeros((2, 5, 2)), np.zeros((3, 5)))
    with pytest.raises(M.ModelError):
        M.forward(
            cfg, trained_like_params, np.zeros((2, 5, 2)), 0.5,
            actions=np.full((2, 5), 9),
        )
    no_actions = TinyDenoiserConfig(data_dim=2, num_frames=5, embed_dim=24,
                                    num_heads=3, num_blocks=1)
    with pytest.raises(M.ModelError):
        M.forward(no_actions, M.init_params(no_actions), np.zeros((2, 5, 2)), 0.5,
                  actions=np.zeros((2, 5), dtype=int))


def test_variable_length_windows(cfg, trained_like_params, rng):
    x = rng.standard_normal((2, 3, 2))
    out = M.forward(cfg, trained_like_params, x, 0.5)
    assert out.shape == (2, 3, 2)


def test_gradients_match_finite_differences(cfg, trained_like_params):
    schedule = NoiseSchedule("cosine")
    grid = DiscreteNoiseGrid(schedule, 8)
    weighting = LossWeighting()
    rng = np.random.default_rng(1)
    x0 = rng.standard_normal((4, 5, 2))
    acts = rng.integers(0, 4, size=(4, 5))
    x_k, k, eps, mask = make_training_batch(
        x0, Objective(kind="dfot"), grid, schedule, np.random.default_rng(42)
    )
    params = trained_like_params

    def loss_of(p):
        pred = M.forward(cfg, p, x_k, k, acts)
        val, _ = _loss_core(pred, x0, x_k, eps, k, mask, weighting, schedule,
                            Parameterization.V)
        return val

    pred, cache = M.forward(cfg, params, x_k, k, acts, with_cache=True)
    _, dpred = _loss_core(pred, x0, x_k, eps, k, mask, weighting, schedule,
                          Parameterization.V)
    grads, _ = M.backward(cfg, params, cache, dpred)

    rng_pick = np.random.default_rng(9)
    names = sorted(params)
    h = 1e-4
    for _ in range(40):
        name = names[rng_pick.integers(len(names))]
        idx = tuple(rng_pick.integers(s) for s in params[name].shape)
        plus = {n: v.copy() for n, v in params.items()}
        minus = {n: v.copy() for n, v in params.items()}
        plus[name][idx] += h
        minus[name][idx] -= h
        fd = (loss_of(plus) - loss_of(minus)) / (2 * h)
        an = grads[name][idx]
        assert abs(fd - an) / max(abs(fd), abs(an), 1e-8) < 1e-3, (name, idx)


def test_every_input_frame_reaches_the_loss(cfg, trained_like_params):
    # perturbing any single input frame must change the parameter gradients:
    # all tokens carry loss signal, none are dead conditioning slots
    schedule = NoiseSchedule("cosine")
    grid = DiscreteNoiseGrid(schedule, 8)
    weighting = LossWeighting()
    x0 = np.random.default_rng(4).standard_normal((2, 5, 2))
    x_k, k, eps, mask = make_training_batch(
        x0, Objective(kind="dfot"), grid, schedule, np.random.default_rng(8)
    )

    def grads_for(x_in):
        pred, cache = M.forward(cfg, trained_like_params, x_in, k, with_cache=True)
        _, dpred = _loss_core(pred, x0, x_k, eps, k, mask, weighting, schedule,
                              Parameterization.V)
        g, _ = M.backward(cfg, trained_like_params, cache, dpred)
        return g

    base = grads_for(x_k)
    for t in range(5):
        bumped = x_k.copy()
        bumped[0, t, 0] += 0.31
        diff = max(
            np.abs(base[name] - grads_for(bumped)[name]).max() for name in base
        )
        assert diff > 1e-9, f"frame {t} does not influence the loss gradient"


def test_ema_update_rules(cfg):
    params = {"w": np.array([1.0])}
    shadow = {"w": np.array([0.0])}
    assert ema_update(params, shadow, 0.5)["w"][0] == pytest.approx(0.5)
    np.testing.assert_array_equal(ema_update(params, shadow, 0.0)["w"], params["w"])
    with pytest.raises(M.ModelError):
        ema_update(params, shadow, 1.0)
    # repeated updates with constant params close the gap monotonically
    gap = 1.0
    cur = shadow
    for _ in range(5):
        cur = ema_update(params, cur, 0.5)
        new_gap = abs(params["w"][0] - cur["w"][0])
        assert new_gap < gap
        gap = new_gap


def test_checkpoint_roundtrip_bits(cfg, tmp_path):
    ckpt = Checkpoint.initialize(cfg)
    ckpt.step = 17
    path_a = tmp_path / "a.sqtf"
    path_b = tmp_path / "b.sqtf"
    ckpt.save(path_a)
    loaded = Checkpoint.load(path_a)
    assert loaded.step == 17
    assert loaded.config == cfg
    for name in ckpt.params:
        np.testing.assert_array_equal(loaded.params[name], ckpt.params[name])
        np.testing.assert_array_equal(loaded.ema[name], ckpt.ema[name])
    loaded.save(path_b)
    assert path_a.read_bytes() == path_b.read_bytes()


def test_checkpoint_shadow_shape_guard(cfg):
    params = M.init_params(cfg)
    bad_ema = {n: v.copy() for n, v in params.items()}
    bad_ema["w_in"] = np.zeros((1, 1))
    with pytest.raises(M.ModelError):
        Checkpoint(config=cfg, params=params, ema=bad_ema)


def test_model_wrapper_uses_ema_by_default(cfg):
    ckpt = Checkpoint.initialize(cfg)
    ckpt.params = {n: v + 1.0 for n, v in ckpt.params.items()}
    sampling_model = ckpt.model()
    assert sampling_model.params is ckpt.ema
    training_view = ckpt.model(use_ema=False)
    assert training_view.params is ckpt.params
    assert isinstance(sampling_model, TinyDenoiser)
