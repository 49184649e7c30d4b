from __future__ import annotations

import math

import numpy as np
import pytest

from helpers import octant_targets, smooth_blob_volume
from volnav.block_encoder import (
    BlockEncoderModel,
    BlockEncodingContext,
    BlockTrainConfig,
    ViewEmbedding,
    cosine_loss,
    encode_block,
    encode_view,
    load_block_encoder,
    pool_view_embedding,
    resample_lattice,
    reward_block,
    reward_image,
    save_block_encoder,
    train_block_encoder,
)
from volnav.camera import Viewpoint, icosphere_viewpoints, to_camera_frame
from volnav.embedding import ReferenceProvider
from volnav.errors import ConfigurationError, NumericError
from volnav.render import Image
from volnav.volume import Volume, block_voxels, partition


def toy_setup(n=32, grid=(2, 2, 2), seed=3):
    vol = smooth_blob_volume(n, seed=seed)
    g = partition(vol, grid)
    return vol, g


def overview_frame(vol, q=(1.0, 0, 0, 0), factor=3.0):
    q = np.asarray(q, float)
    vp = Viewpoint(tuple(q / np.linalg.norm(q)), depth=factor * vol.bounding_radius)
    return to_camera_frame(vp, radius=vol.bounding_radius)


def test_resample_identity_and_constant():
    rng = np.random.default_rng(0)
    block = rng.random((16, 16, 16))
    assert np.array_equal(resample_lattice(block, 16), block)
    for shape in [(8, 8, 8), (16, 16, 16), (32, 32, 64), (5, 9, 13)]:
        const = np.full(shape, 0.37)
        out = resample_lattice(const, 16)
        assert out.shape == (16, 16, 16)
        assert np.all(out == 0.37)


def test_resample_matches_point_oracle():
    rng = np.random.default_rng(1)
    block = rng.random((4, 4, 4))
    out = resample_lattice(block, 8)
    # lattice cell 0 center maps to source coordinate -0.25 -> clamped corner mix
    # check an interior lattice point against direct trilinear arithmetic
    u = (3 + 0.5) * 4 / 8 - 0.5  # = 1.25 on every axis
    i0, f = 1, 0.25
    acc = 0.0
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                wgt = ((f if dx else 1 - f) * (f if dy else 1 - f) * (f if dz else 1 - f))
                acc += wgt * block[i0 + dx, i0 + dy, i0 + dz]
    assert out[3, 3, 3] == pytest.approx(acc, abs=1e-12)


def test_encode_block_zero_model_zero_everything():
    model = BlockEncoderModel(pos_scale=4.0, seed=0)
    for p in model.params():
        p.values[...] = 0.0
    e = encode_block(model, np.zeros((8, 8, 8)), np.zeros(3))
    assert np.all(e == 0.0)


def test_encode_block_deterministic_and_position_sensitive():
    model = BlockEncoderModel(pos_scale=4.0, seed=1)
    rng = np.random.default_rng(2)
    block = rng.random((8, 8, 8))
    a = encode_block(model, block, np.array([0.0, 0.0, 2.0]))
    b = encode_block(model, block, np.array([0.0, 0.0, 2.0]))
    assert np.array_equal(a, b)
    c = encode_block(model, block, np.array([1.5, -0.5, 3.0]))
    assert not np.allclose(a, c)


def test_encode_view_single_block_equals_block_embedding():
    vol, grid = toy_setup(grid=(1, 1, 1))
    model = BlockEncoderModel(pos_scale=4 * vol.bounding_radius, seed=2)
    frame = overview_frame(vol)
    ve = encode_view(model, vol, grid, frame)
    assert ve.block_ids == (0,)
    from volnav.camera import project_block

    e = encode_block(model, block_voxels(vol, grid.blocks[0]),
                     project_block(grid.blocks[0], frame))
    assert np.allclose(ve.vector, e, atol=1e-12)


def test_encode_view_two_blocks_hand_average():
    vol, grid = toy_setup(grid=(2, 2, 2))
    model = BlockEncoderModel(pos_scale=4 * vol.bounding_radius, seed=3)
    frame = overview_frame(vol)
    ve = encode_view(model, vol, grid, frame)
    if len(ve.block_ids) < 2:
        pytest.skip("overview should see several blocks")
    from volnav.camera import project_block

    singles = [
        encode_block(model, block_voxels(vol, grid.blocks[i]),
                     project_block(grid.blocks[i], frame))
        for i in ve.block_ids
    ]
    want = np.zeros_like(singles[0])
    for s in singles:
        want += s
    want /= len(singles)
    assert np.allclose(ve.vector, want, atol=1e-9)


def test_encode_view_empty_visibility_sentinel():
    vol, grid = toy_setup()
    model = BlockEncoderModel(pos_scale=4 * vol.bounding_radius, seed=4)
    R = vol.bounding_radius
    away = Viewpoint((1.0, 0, 0, 0), depth=4 * R, look_at=(0.0, 0.0, -8 * R))
    frame = to_camera_frame(away, radius=R)
    ve = encode_view(model, vol, grid, frame)
    assert ve.empty
    assert np.all(ve.vector == 0.0)
    assert ve.block_ids == ()


def test_pooling_permutation_invariance_exact():
    rng = np.random.default_rng(5)
    rows = rng.normal(size=(6, 16))
    ids = [12, 3, 45, 7, 30, 22]
    base = pool_view_embedding(rows, ids)
    for _ in range(10):
        perm = rng.permutation(6)
        again = pool_view_embedding(rows[perm], [ids[i] for i in perm])
        assert np.array_equal(base, again)


def test_cosine_loss_values_and_gradient():
    e = np.array([1.0, 0.0, 0.0])
    assert cosine_loss(e, np.array([2.0, 0.0, 0.0]))[0] == pytest.approx(0.0, abs=1e-12)
    assert cosine_loss(e, np.array([0.0, 3.0, 0.0]))[0] == pytest.approx(1.0, abs=1e-12)
    assert cosine_loss(e, np.array([-1.0, 0.0, 0.0]))[0] == pytest.approx(2.0, abs=1e-12)
    with pytest.raises(NumericError):
        cosine_loss(np.zeros(3), e)

    rng = np.random.default_rng(6)
    x = rng.normal(size=5)
    t = rng.normal(size=5)
    loss, grad = cosine_loss(x, t)
    eps = 1e-6
    num = np.zeros_like(x)
    for i in range(5):
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        num[i] = (cosine_loss(xp, t)[0] - cosine_loss(xm, t)[0]) / (2 * eps)
    assert np.max(np.abs(grad - num) / (np.abs(grad) + np.abs(num) + 1e-8)) < 1e-4


def test_cosine_loss_gradient_through_model_finite_difference():
    # two-block view: perturb every model parameter and compare to analytic
    vol, grid = toy_setup(n=8, grid=(2, 1, 1))
    model = BlockEncoderModel(pos_scale=4.0, lattice=8, seed=7)
    frame = overview_frame(vol)
    from volnav.camera import project_block, visible_blocks

    vis = visible_blocks(grid, frame)[:2]
    context = BlockEncodingContext(vol, grid, model.lattice)
    positions = np.stack([project_block(grid.blocks[i], frame) for i in vis])
    rng = np.random.default_rng(8)
    target = rng.normal(size=768)

    def loss_value():
        fused, _ = model.encode_batch(context.lattices[vis], positions)
        return cosine_loss(pool_view_embedding(fused, vis), target)[0]

    fused, caches = model.encode_batch(context.lattices[vis], positions)
    loss, grad_e = cosine_loss(pool_view_embedding(fused, vis), target)
    model.zero_grad()
    model.backward_batch(caches, np.tile(grad_e / len(vis), (len(vis), 1)))

    eps = 1e-5
    rng_pick = np.random.default_rng(9)
    for p in model.params():
        flat = p.values.ravel()
        idxs = rng_pick.choice(flat.size, size=min(6, flat.size), replace=False)
        for i in idxs:
            keep = flat[i]
            flat[i] = keep + eps
            lp = loss_value()
            flat[i] = keep - eps
            lm = loss_value()
            flat[i] = keep
            num = (lp - lm) / (2 * eps)
            ana = p.grad.ravel()[i]
            assert abs(ana - num) / (abs(ana) + abs(num) + 1e-8) < 1e-4, p.name


def test_train_fixed_point_and_zero_lr():
    vol, grid = toy_setup(n=16, grid=(2, 2, 2))
    model = BlockEncoderModel(pos_scale=4 * vol.bounding_radius, lattice=8, seed=10)
    vps = icosphere_viewpoints(0, 2.0 * vol.bounding_radius)
    context = BlockEncodingContext(vol, grid, model.lattice)
    targets = []
    for vp in vps.viewpoints:
        frame = to_camera_frame(vp, radius=vol.bounding_radius)
        targets.append(encode_view(model, vol, grid, frame, context).vector)
    res = train_block_encoder(model, vol, grid, vps, np.stack(targets),
                              BlockTrainConfig(steps=5, learning_rate=0.0, seed=0))
    assert all(loss == pytest.approx(0.0, abs=1e-12) for loss in res.loss_curve)


def test_train_overfits_single_viewpoint():
    vol, grid = toy_setup(n=16, grid=(1, 1, 1))
    model = BlockEncoderModel(pos_scale=4 * vol.bounding_radius, lattice=8, seed=11)
    vps = icosphere_viewpoints(0, 2.0 * vol.bounding_radius)
    one = type(vps)((vps.viewpoints[0],), (vps.provenance[0],))
    rng = np.random.default_rng(12)
    target = rng.normal(size=768)
    target /= np.linalg.norm(target)
    res = train_block_encoder(model, vol, grid, one, target[None],
                              BlockTrainConfig(steps=400, learning_rate=3e-3, seed=0))
    assert res.final_loss < 1e-4


def test_train_loss_drops_on_octant_task():
    vol, grid = toy_setup(n=32, grid=(2, 2, 2))
    model = BlockEncoderModel(pos_scale=4 * vol.bounding_radius, seed=13)
    vps = icosphere_viewpoints(1, 2.5 * vol.bounding_radius)
    targets = octant_targets(vps.viewpoints, seed=13)
    res = train_block_encoder(model, vol, grid, vps, targets,
                              BlockTrainConfig(steps=300, learning_rate=1e-3, seed=0))
    assert res.loss_curve[-1] < 0.6 * res.loss_curve[0]


def test_batched_training_gradient_matches_per_viewpoint_loop():
    vol, grid = toy_setup(n=16, grid=(2, 2, 2))
    model = BlockEncoderModel(pos_scale=4 * vol.bounding_radius, lattice=8, seed=20)
    vps = icosphere_viewpoints(0, 2.0 * vol.bounding_radius)
    rng = np.random.default_rng(21)
    targets = rng.normal(size=(len(vps), 768))
    cfg = BlockTrainConfig(steps=1, batch_size=4, learning_rate=0.0, seed=5)

    # reference: straightforward per-viewpoint accumulation with the same batch
    ref = BlockEncoderModel(pos_scale=model.pos_scale, lattice=8, seed=20)
    context = BlockEncodingContext(vol, grid, 8)
    from volnav.camera import project_block, visible_blocks

    frames = [to_camera_frame(v, cfg.fov, cfg.aspect, vol.bounding_radius)
              for v in vps.viewpoints]
    vis_sets = [sorted(visible_blocks(grid, f)) for f in frames]
    usable = [i for i, v in enumerate(vis_sets) if v]
    batch = np.random.default_rng(cfg.seed).choice(usable, size=4, replace=False)
    ref.zero_grad()
    for i in batch:
        vis = vis_sets[i]
        positions = np.stack([project_block(grid.blocks[j], frames[i]) for j in vis])
        fused, caches = ref.encode_batch(context.lattices[vis], positions)
        _, grad_e = cosine_loss(pool_view_embedding(fused, vis), targets[i])
        ref.backward_batch(caches, np.tile(grad_e / len(vis), (len(vis), 1)) / 4)
    ref_grads = [p.grad.copy() for p in ref.params()]

    train_block_encoder(model, vol, grid, vps, targets, cfg)
    for p, want in zip(model.params(), ref_grads):
        assert np.allclose(p.grad, want, atol=1e-12), p.name


def test_view_scorer_matches_encode_view():
    from volnav.block_encoder import ViewScorer

    vol, grid = toy_setup(n=16, grid=(2, 2, 2))
    model = BlockEncoderModel(pos_scale=4 * vol.bounding_radius, lattice=8, seed=22)
    scorer = ViewScorer(model, vol, grid)
    rng = np.random.default_rng(23)
    goal = rng.normal(size=768)
    for _ in range(5):
        frame = overview_frame(vol, rng.normal(size=4))
        ve = encode_view(model, vol, grid, frame)
        fast = scorer.embed(frame)
        assert ve.block_ids == fast.block_ids
        assert np.allclose(ve.vector, fast.vector, atol=1e-12)
        assert scorer.reward(frame, goal) == pytest.approx(
            reward_block(model, vol, grid, frame, goal), abs=1e-12
        )


def test_train_rejects_all_empty_visibility():
    vol, grid = toy_setup()
    model = BlockEncoderModel(pos_scale=4 * vol.bounding_radius, seed=14)
    R = vol.bounding_radius
    away = Viewpoint((1.0, 0, 0, 0), depth=4 * R, look_at=(0.0, 0.0, -8 * R))
    from volnav.camera import Provenance, ViewpointSet

    vps = ViewpointSet((away,), (Provenance("uniform"),))
    with pytest.raises(ConfigurationError):
        train_block_encoder(model, vol, grid, vps, np.ones((1, 768)))


def test_reward_block_self_orthogonal_antipodal():
    vol, grid = toy_setup()
    model = BlockEncoderModel(pos_scale=4 * vol.bounding_radius, seed=15)
    frame = overview_frame(vol)
    ve = encode_view(model, vol, grid, frame)
    assert reward_block(model, vol, grid, frame, ve.vector) == pytest.approx(1.0)
    assert reward_block(model, vol, grid, frame, -ve.vector) == pytest.approx(-1.0)
    perp = np.zeros(768)
    k = int(np.argmin(np.abs(ve.vector)))
    perp[k] = 1.0
    perp -= ve.vector * (ve.vector @ perp) / (ve.vector @ ve.vector)
    assert reward_block(model, vol, grid, frame, perp) == pytest.approx(0.0, abs=1e-9)


def test_reward_block_empty_visibility_is_minus_one():
    vol, grid = toy_setup()
    model = BlockEncoderModel(pos_scale=4 * vol.bounding_radius, seed=16)
    R = vol.bounding_radius
    away = Viewpoint((1.0, 0, 0, 0), depth=4 * R, look_at=(0.0, 0.0, -8 * R))
    frame = to_camera_frame(away, radius=R)
    assert reward_block(model, vol, grid, frame, np.ones(768)) == -1.0


def test_reward_bounds_and_scale_invariance():
    vol, grid = toy_setup()
    model = BlockEncoderModel(pos_scale=4 * vol.bounding_radius, seed=17)
    rng = np.random.default_rng(18)
    goal = rng.normal(size=768)
    context = BlockEncodingContext(vol, grid, model.lattice)
    frames = [overview_frame(vol, rng.normal(size=4)) for _ in range(10)]
    rewards = [reward_block(model, vol, grid, f, goal, context) for f in frames]
    assert all(-1.0 <= r <= 1.0 for r in rewards)
    scaled = [reward_block(model, vol, grid, f, 37.5 * goal, context) for f in frames]
    assert int(np.argmax(rewards)) == int(np.argmax(scaled))
    assert np.allclose(rewards, scaled, atol=1e-12)


def test_reward_image_matches_identity_and_interface():
    provider = ReferenceProvider()
    px = np.zeros((8, 8, 4))
    px[..., 0] = 0.5
    px[..., 3] = 1.0
    img = Image(8, 8, px)
    goal = provider.embed_image(img)
    assert reward_image(provider, img, goal) == pytest.approx(1.0)


def test_save_load_round_trip(tmp_path):
    vol, grid = toy_setup()
    model = BlockEncoderModel(pos_scale=4 * vol.bounding_radius, lattice=8, seed=19)
    path = tmp_path / "encoder.ckpt"
    save_block_encoder(model, path, meta={"grid_dims": [2, 2, 2], "provider": "reference"})
    again, manifest = load_block_encoder(path)
    assert manifest["grid_dims"] == [2, 2, 2]
    assert manifest["provider"] == "reference"
    assert manifest["feature_dim"] == 128 and manifest["pos_dim"] == 32
    assert again.lattice == 8 and again.pos_scale == model.pos_scale
    for a, b in zip(model.params(), again.params()):
        assert np.array_equal(a.values, b.values)
    frame = overview_frame(vol)
    assert np.array_equal(encode_view(model, vol, grid, frame).vector,
                          encode_view(again, vol, grid, frame).vector)
