import numpy as np
import pytest

from keydyn import autodiff as ad
from keydyn.core import Se2Transform, se2_apply
from keydyn.dynamics import (AugmentationUnsupported, DynamicsModel, LatentTrajectory, NonFiniteLoss, TrainConfig,
                             augment, forward, init_model, loss_and_grads, multi_step_loss, rollout, rollout_batch,
                             split, train)
from keydyn.latent import init_alpha
from keydyn.vision import DimensionMismatch


def _tiny(method="SDS", K=3, hidden=8, seed=0, residual=True):
    rng = np.random.default_rng(seed)
    return init_model(method, K * 3 + 2, rng, hidden, K, residual=residual)


def _traj(T=12, K=3, seed=0, space="world"):
    rng = np.random.default_rng(seed)
    pts = np.cumsum(0.01 * rng.standard_normal((T + 1, K, 3)), axis=0)
    rob = np.cumsum(0.01 * rng.standard_normal((T + 1, 2)), axis=0)
    return LatentTrajectory(pts, rob, 0.05 * rng.standard_normal((T, 2)), space)


def test_forward_matches_numpy_oracle():
    m = _tiny(residual=False)
    rng = np.random.default_rng(1)
    z, zp, a = rng.standard_normal(11), rng.standard_normal(11), rng.standard_normal(2)
    W1, b1, W2, b2, W3, b3 = m.params
    x = np.concatenate([z, z - zp, a])
    want = np.maximum(np.maximum(x @ W1 + b1, 0) @ W2 + b2, 0) @ W3 + b3
    assert np.allclose(forward(m, z, zp, a), want, atol=1e-12)
    r = _tiny(residual=True)
    r.params = m.params
    assert np.allclose(forward(r, z, zp, a), z + want, atol=1e-12)


def test_forward_dimension_checks():
    m = _tiny()
    with pytest.raises(DimensionMismatch):
        forward(m, np.zeros(10), np.zeros(11), np.zeros(2))
    with pytest.raises(DimensionMismatch):
        forward(m, np.zeros(11), np.zeros(11), np.zeros(3))
    with pytest.raises(ValueError):
        DynamicsModel("WDS", 11, m.params)


def test_rollout_composes_forward():
    m = _tiny(seed=2)
    rng = np.random.default_rng(3)
    z0, zp, acts = rng.standard_normal(11), rng.standard_normal(11), rng.standard_normal((4, 2))
    out = rollout(m, z0, zp, acts)
    cur, prev = z0, zp
    for h in range(4):
        nxt = forward(m, cur, prev, acts[h])
        assert np.allclose(out[h], nxt)
        prev, cur = cur, nxt
    assert out.shape == (4, 11)
    with pytest.raises(ValueError):
        rollout(m, z0, zp, np.zeros((0, 2)))
    batch = rollout_batch(m, z0, zp, acts[None].repeat(3, axis=0))
    assert batch.dtype == np.float32 and np.allclose(batch[2], out, atol=1e-4)


def test_multi_step_loss_zero_on_model_generated_data():
    m = _tiny(seed=4)
    rng = np.random.default_rng(5)
    H = 3
    z_prev, z0 = rng.standard_normal(11), rng.standard_normal(11)
    acts = rng.standard_normal((H + 1, 2))
    zs = np.vstack([z_prev, z0, rollout(m, z0, z_prev, acts[1:])])
    pts, rob = zs[:, :9].reshape(-1, 3, 3), zs[:, 9:]
    loss = multi_step_loss(m, m.params, None, pts[None], rob[None], acts[None], H)
    assert float(loss) == pytest.approx(0.0, abs=1e-20)
    # a constant offset on every target adds its squared norm per step
    shifted = pts + 0.1
    loss = multi_step_loss(m, m.params, None, shifted[None], rob[None], acts[None], 1)
    nxt = forward(m, zs[1] + np.r_[np.full(9, 0.1), 0, 0], zs[0] + np.r_[np.full(9, 0.1), 0, 0], acts[1])
    assert float(loss) == pytest.approx(np.sum((nxt - zs[2] - np.r_[np.full(9, 0.1), 0, 0]) ** 2))
    with pytest.raises(ValueError):
        multi_step_loss(m, m.params, None, pts[None, :3], rob[None, :3], acts[None], H)


@pytest.mark.parametrize("method", ["SDS", "WSDS"])
def test_loss_gradient_check(method):
    m = _tiny(method, hidden=6, seed=6)
    if m.alpha is not None:
        m.alpha = m.alpha + 0.3 * np.random.default_rng(0).standard_normal(m.alpha.shape)
    tr = _traj(T=6, seed=7)
    pts, rob, act = tr.points[None, :5], tr.robot[None, :5], tr.actions[None, :4]
    n = len(m.params)

    def f(p):
        return multi_step_loss(m, p[:n], p[n] if m.alpha is not None else None, pts, rob, act, 3)

    params = list(m.params) + ([m.alpha] if m.alpha is not None else [])
    rep = ad.grad_check(f, params)
    assert rep["max_rel_err"] < 1e-4
    loss, grads = loss_and_grads(m, pts, rob, act, 3)
    assert len(grads) == len(params) and loss == pytest.approx(float(f(params)))
    if m.alpha is not None:
        assert np.abs(grads[-1]).max() > 0


def test_augment_identity_and_equivariance():
    tr = _traj()
    same = augment(tr, transform=Se2Transform.identity())
    assert np.allclose(same.points, tr.points) and np.allclose(same.actions, tr.actions)
    t = Se2Transform(0.1, -0.2, 0.7)
    out = augment(tr, transform=t)
    assert np.allclose(out.points[..., 2], tr.points[..., 2])
    # relative geometry is preserved
    d0 = np.linalg.norm(tr.points[:, 0, :2] - tr.robot, axis=1)
    d1 = np.linalg.norm(out.points[:, 0, :2] - out.robot, axis=1)
    assert np.allclose(d0, d1)
    assert np.allclose(np.linalg.norm(out.actions, axis=1), np.linalg.norm(tr.actions, axis=1))
    assert np.allclose(out.robot, se2_apply(t, tr.robot))
    with pytest.raises(AugmentationUnsupported):
        augment(_traj(space="pixel"), np.random.default_rng(0))


def test_split():
    tr, te = split(20, 0.1, np.random.default_rng(0))
    assert len(tr) == 18 and len(te) == 2 and not set(tr) & set(te)
    tr, te = split(1, 0.1, np.random.default_rng(0))
    assert list(tr) == [0] and len(te) == 0


def _data(n=6):
    return [_traj(T=10, seed=s) for s in range(n)]


def test_train_zero_epochs_and_determinism():
    cfg = TrainConfig(epochs=0, hidden=8, horizon=2, batch_size=8)
    m, curves = train(_data(), "SDS", cfg)
    assert curves == [] and np.isfinite(m.meta["best_test_loss"])
    cfg = TrainConfig(epochs=3, hidden=8, horizon=2, batch_size=8, lr=1e-3)
    a, ca = train(_data(), "WSDS", cfg)
    b, cb = train(_data(), "WSDS", cfg)
    assert ca == cb and all(np.array_equal(p, q) for p, q in zip(a.params, b.params))
    assert np.array_equal(a.alpha, b.alpha)
    assert len(ca) == 3 and a.meta["best_test_loss"] <= min(c[2] for c in ca)


def test_train_reduces_loss_and_keeps_best():
    cfg = TrainConfig(epochs=15, hidden=16, horizon=2, batch_size=4, lr=1e-3, augment=False)
    m, curves = train(_data(8), "SDS", cfg, dtype=np.float64)
    assert curves[-1][1] < curves[0][1]
    assert m.meta["best_test_loss"] <= min(c[2] for c in curves)


def test_train_rejects_bad_input():
    with pytest.raises(ValueError):
        train([], "SDS")
    with pytest.raises(ValueError):
        train([_traj(T=2)] * 3, "SDS", TrainConfig(epochs=1, hidden=4, horizon=5))
    with pytest.raises(AugmentationUnsupported):
        train([_traj(space="pixel")] * 3, "SDS", TrainConfig(epochs=1, hidden=4, horizon=2))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_raises():
    bad = _data(4)
    bad[0].points[3, 0, 0] = 1e200
    bad[1].points[3, 0, 0] = 1e200
    bad[2].points[3, 0, 0] = 1e200
    bad[3].points[3, 0, 0] = 1e200
    with pytest.raises(NonFiniteLoss):
        train(bad, "SDS", TrainConfig(epochs=1, hidden=4, horizon=2, augment=False), dtype=np.float32)


def test_init_alpha_shape():
    m = _tiny("WDS", K=4)
    assert m.alpha.shape == (4, 4) and np.array_equal(m.alpha, init_alpha(4, 3.0))
