import numpy as np
import pytest

from plcd import encoder as enc
from plcd import rmac
from plcd.dataspace import DRONE, ImageRecord
from plcd.seeds import substream


def make_record(rng, shape=(2, 3, 3), rid=1):
    return ImageRecord(rid, DRONE, 1, 1, rng.standard_normal(shape))


def make_params(dim=4, input_dim=18, classes=3, seed=0, tanh=False):
    return enc.init_params("drone", dim, input_dim, classes,
                           substream(seed, "test.params"), tanh=tanh)


def test_forward_zero_params_zero_embedding():
    rng = substream(1, "t")
    params = make_params()
    params.weight[:] = 0.0
    params.bias[:] = 0.0
    rec = make_record(rng)
    assert np.array_equal(enc.forward(params, rec), np.zeros(4))


def test_forward_identity_weight_returns_flat_map():
    rng = substream(2, "t")
    rec = make_record(rng)
    params = enc.EncoderParams(
        role="drone", weight=np.eye(18), bias=np.zeros(18),
        classifier_weight=np.zeros((3, 18)), classifier_bias=np.zeros(3))
    assert np.allclose(enc.forward(params, rec), rec.featmap.ravel())


def test_forward_deterministic():
    rng = substream(3, "t")
    params = make_params(seed=5)
    rec = make_record(rng)
    assert np.array_equal(enc.forward(params, rec), enc.forward(params, rec))


def test_forward_dim_mismatch():
    rng = substream(4, "t")
    params = make_params(input_dim=10)
    with pytest.raises(ValueError, match="input_dim"):
        enc.forward(params, make_record(rng))


def test_embed_map_returns_featmap():
    rng = substream(5, "t")
    rec = make_record(rng)
    assert enc.embed_map(make_params(), rec) is rec.featmap


def test_sgd_zero_momentum_unit_rate_zeroes_params():
    params = make_params(seed=6)
    state = enc.new_sgd_state(params, lr_head=1.0, lr_body=1.0, momentum=0.0)
    grads = enc.new_grads(params)
    grads.weight += params.weight
    grads.bias += params.bias
    grads.classifier_weight += params.classifier_weight
    grads.classifier_bias += params.classifier_bias
    enc.sgd_step(params, grads, state)
    for arr in (params.weight, params.bias, params.classifier_weight,
                params.classifier_bias):
        assert np.allclose(arr, 0.0)


def test_sgd_two_steps_constant_gradient():
    # v2 = mu * (-lr g) - lr g = -1.9 lr g for mu = 0.9
    params = make_params(seed=7)
    w0 = params.weight.copy()
    g = np.ones_like(params.weight)
    state = enc.new_sgd_state(params, lr_head=0.0, lr_body=0.01, momentum=0.9,
                              decay_epoch=1000)
    for _ in range(2):
        grads = enc.new_grads(params)
        grads.weight += g
        enc.sgd_step(params, grads, state)
    # p2 = p0 + v1 + v2 = p0 - lr g - 1.9 lr g
    assert np.allclose(params.weight, w0 - 0.01 * g - 1.9 * 0.01 * g)
    assert np.allclose(state.velocity["weight"], -1.9 * 0.01 * g)


def test_lr_decays_once_after_decay_epoch():
    params = make_params()
    state = enc.new_sgd_state(params, lr_head=0.01, lr_body=0.001,
                              momentum=0.0, decay_epoch=40, decay_factor=0.1)
    state.epoch = 39
    assert state.rate("weight") == pytest.approx(0.001)
    assert state.rate("classifier_weight") == pytest.approx(0.01)
    state.epoch = 40
    assert state.rate("weight") == pytest.approx(0.0001)
    assert state.rate("classifier_weight") == pytest.approx(0.001)
    state.epoch = 90  # multiplied once, not per epoch
    assert state.rate("weight") == pytest.approx(0.0001)


def test_sgd_matches_plain_gd_when_momentum_zero():
    rng = substream(8, "t")
    params = make_params(seed=9)
    reference = params.weight.copy()
    state = enc.new_sgd_state(params, lr_head=0.05, lr_body=0.05, momentum=0.0,
                              decay_epoch=1000)
    for _ in range(5):
        g = rng.standard_normal(params.weight.shape)
        grads = enc.new_grads(params)
        grads.weight += g
        enc.sgd_step(params, grads, state)
        reference -= 0.05 * g
    assert np.allclose(params.weight, reference)


def test_sgd_rejects_non_finite_gradient():
    params = make_params()
    state = enc.new_sgd_state(params, 0.01, 0.001)
    grads = enc.new_grads(params)
    grads.weight[0, 0] = np.nan
    with pytest.raises(ValueError, match="weight"):
        enc.sgd_step(params, grads, state)


def test_check_gradients_quadratic():
    rng = substream(10, "t")
    p = rng.standard_normal(7)

    def loss_fn(params):
        (x,) = params
        return 0.5 * float(x @ x), [x.copy()]

    assert enc.check_gradients(loss_fn, [p], epsilon=1e-6) < 1e-8


def test_check_gradients_rejects_bad_epsilon():
    with pytest.raises(ValueError, match="epsilon"):
        enc.check_gradients(lambda p: (0.0, [np.zeros(1)]), [np.zeros(1)], epsilon=0.0)


def test_checkpoint_round_trip(tmp_path):
    params = make_params(dim=5, input_dim=12, classes=4, seed=11, tanh=True)
    path = tmp_path / "enc.txt"
    enc.save_params(path, params)
    loaded = enc.load_params(path, tanh=True)
    assert loaded.role == params.role
    for name in ("weight", "bias", "classifier_weight", "classifier_bias"):
        assert np.array_equal(getattr(loaded, name), getattr(params, name))
    # byte identity across a load/save cycle
    second = tmp_path / "enc2.txt"
    enc.save_params(second, loaded)
    assert path.read_bytes() == second.read_bytes()


def test_checkpoint_header_format(tmp_path):
    params = make_params(dim=5, input_dim=12, classes=4)
    path = tmp_path / "enc.txt"
    enc.save_params(path, params)
    header = path.read_text().splitlines()[0]
    assert header == "#plcd-enc v1 drone 5 12 4"


def test_params_digest_tracks_content():
    params = make_params(seed=12)
    before = enc.params_digest(params)
    assert before == enc.params_digest(params.copy())
    params.weight[0, 0] += 1.0
    assert enc.params_digest(params) != before


def test_region_projection_full_map_is_block_mean():
    params = make_params(dim=4, input_dim=18)
    cells = np.arange(9)
    proj = enc.region_projection(params, (2, 3, 3), cells)
    manual = params.weight.reshape(4, 2, 9).mean(axis=2)
    assert np.allclose(proj, manual)


def test_patch_embed_matches_projector_row():
    rng = substream(13, "t")
    params = make_params(dim=4, input_dim=18, tanh=True)
    grid = rmac.region_grid(3, (1, 2), width_table={1: 3, 2: 2}, reference_side=3)
    cells_list = [rmac.region_cells(r, (2, 3, 3)) for r in grid]
    projector = enc.RegionProjector(params, (2, 3, 3), cells_list)
    pooled = rng.standard_normal((len(grid), 2))
    batch = projector.embed(pooled)
    for i, cells in enumerate(cells_list):
        single = enc.patch_embed(params, pooled[i], (2, 3, 3), cells)
        assert np.allclose(single, batch[i])


def test_normalized_embed_backward_matches_fd():
    rng = substream(14, "t")
    x = rng.standard_normal(18)
    target = rng.standard_normal(4)

    def loss_fn(arrs):
        params = enc.EncoderParams("d", arrs[0], arrs[1],
                                   np.zeros((3, 4)), np.zeros(3), tanh=True)
        grads = enc.new_grads(params)
        e = enc.embed_vector(params, x, normalize=True)
        diff = e - target
        enc.embed_backward(params, x, 2.0 * diff, grads, normalized=True)
        return float(diff @ diff), [grads.weight, grads.bias,
                                    grads.classifier_weight, grads.classifier_bias]

    p = make_params(tanh=True)
    err = enc.check_gradients(
        loss_fn, [p.weight, p.bias, p.classifier_weight, p.classifier_bias], 1e-6)
    assert err < 1e-6
