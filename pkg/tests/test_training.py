import numpy as np
import pytest

from partialpde import masking as mk
from partialpde import model as md
from partialpde import pdegen as pg
from partialpde import tensor as T
from partialpde import training as tr
from partialpde.tensor import Tensor


@pytest.fixture(autouse=True)
def reset_tape():
    yield
    T.active_tape().reset()


# -- losses ------------------------------------------------------------------------

def test_loss_zero_when_exact():
    pred = Tensor(np.ones((1, 4, 4, 2)))
    target = np.ones((1, 4, 4, 2))
    mask = np.ones((1, 4, 4))
    assert float(tr.masked_one_step_loss(pred, target, mask).data) == 0.0


def test_loss_ignores_unobserved_error():
    target = np.zeros((1, 4, 4, 1))
    mask = np.ones((1, 4, 4))
    mask[0, :2] = 0.0
    pred_arr = np.zeros((1, 4, 4, 1))
    pred_arr[0, :2] = 99.0  # error only where unobserved
    loss = tr.masked_one_step_loss(Tensor(pred_arr), target, mask)
    assert float(loss.data) == 0.0


def test_loss_direct_average():
    # error 1 at half of the observed points -> loss 0.5
    mask = np.ones((1, 4, 4))
    target = np.zeros((1, 4, 4, 1))
    pred_arr = np.zeros((1, 4, 4, 1))
    pred_arr[0, :2, :, 0] = 1.0
    loss = tr.masked_one_step_loss(Tensor(pred_arr), target, mask)
    assert float(loss.data) == pytest.approx(0.5)


def test_loss_rejects_empty_mask():
    with pytest.raises(ValueError):
        tr.masked_one_step_loss(Tensor(np.zeros((1, 2, 2, 1))),
                                np.zeros((1, 2, 2, 1)), np.zeros((1, 2, 2)))


def test_loss_gradient_confined_to_observed_points():
    rng = np.random.default_rng(0)
    mask = (rng.random((1, 4, 4)) > 0.5).astype(np.float64)
    mask[0, 0, 0] = 1.0
    pred = Tensor(rng.normal(size=(1, 4, 4, 1)), requires_grad=True)
    target = rng.normal(size=(1, 4, 4, 1))
    loss = tr.masked_one_step_loss(pred, target, mask)
    grads = T.backward(loss)
    g = grads[pred][0, ..., 0]
    assert np.all(g[mask[0] == 0.0] == 0.0)
    assert np.any(g[mask[0] == 1.0] != 0.0)

    # perturbing the target at unobserved points leaves the loss unchanged
    target2 = target.copy()
    target2[0, mask[0] == 0.0] += 123.0
    with T.no_grad():
        a = tr.masked_one_step_loss(Tensor(pred.data), target, mask)
        b = tr.masked_one_step_loss(Tensor(pred.data), target2, mask)
    assert float(a.data) == float(b.data)


def test_consistency_identical_is_zero():
    p = np.random.default_rng(1).normal(size=(1, 4, 4, 1))
    assert float(tr.consistency_loss(p, Tensor(p.copy())).data) == 0.0


def test_consistency_constant_offset():
    clean = np.zeros((1, 4, 4, 1))
    masked = Tensor(np.full((1, 4, 4, 1), 0.3))
    assert float(tr.consistency_loss(clean, masked).data) == pytest.approx(0.09)


def test_consistency_gradient_only_through_masked_branch():
    clean = Tensor(np.zeros((2, 2, 2, 1)), requires_grad=True)
    with T.no_grad():
        clean_eval = Tensor(clean.data)
    masked = Tensor(np.ones((2, 2, 2, 1)), requires_grad=True)
    loss = tr.consistency_loss(clean_eval, masked)
    grads = T.backward(loss)
    assert masked in grads and np.any(grads[masked] != 0.0)
    assert clean not in grads  # never entered the tape


# -- optimizer ----------------------------------------------------------------------

def tiny_state(value=0.0):
    cfg = md.ModelConfig(layers=1, channels=2, heads=1, latent_tokens=1,
                         history=1)
    params = md.ModelParams(cfg, seed=0)
    name = "out.b"
    params[name].data = np.full(params[name].shape, value, dtype=np.float32)
    return tr.TrainState(params), name


def test_adamw_zero_gradient_no_decay_keeps_parameters():
    state, name = tiny_state(1.5)
    before = state.params[name].data.copy()
    cfg = tr.TrainConfig(weight_decay=0.0)
    tr.adamw_step(state, {name: np.zeros_like(before)}, lr=0.1, cfg=cfg)
    assert np.array_equal(state.params[name].data, before)


def test_adamw_first_step_closed_form():
    state, name = tiny_state(0.0)
    cfg = tr.TrainConfig(weight_decay=0.0)
    g = np.full(state.params[name].shape, 0.7, dtype=np.float64)
    tr.adamw_step(state, {name: g}, lr=0.01, cfg=cfg)
    want = -0.01 * 0.7 / (abs(0.7) + cfg.adam_eps)
    assert np.allclose(state.params[name].data, want, rtol=1e-6)


def test_adamw_decoupled_decay_only():
    state, name = tiny_state(2.0)
    cfg = tr.TrainConfig(weight_decay=0.01)
    tr.adamw_step(state, {name: np.zeros(state.params[name].shape)}, lr=0.1,
                  cfg=cfg)
    assert np.allclose(state.params[name].data, 2.0 * (1 - 0.1 * 0.01))


def test_adamw_nan_gradient_names_group():
    state, name = tiny_state(0.0)
    bad = np.full(state.params[name].shape, np.nan)
    with pytest.raises(tr.TrainingDiverged, match=name):
        tr.adamw_step(state, {name: bad}, lr=0.1, cfg=tr.TrainConfig())


def test_one_cycle_endpoints():
    cfg = tr.TrainConfig(learning_rate=1e-3)
    total = 1000
    assert tr.one_cycle_lr(0, total, cfg) == pytest.approx(1e-3 / 25)
    t_peak = int(round(0.3 * (total - 1)))
    assert tr.one_cycle_lr(t_peak, total, cfg) == pytest.approx(1e-3)
    assert tr.one_cycle_lr(total - 1, total, cfg) == pytest.approx(1e-3 / 1e4)
    # continuity around the peak
    a = tr.one_cycle_lr(t_peak - 1, total, cfg)
    b = tr.one_cycle_lr(t_peak + 1, total, cfg)
    assert abs(a - 1e-3) < 1e-4 and abs(b - 1e-3) < 1e-4


# -- full-model gradient --------------------------------------------------------------

def mpt_loss_for_grad(params, coords, frames, targets, masks, aug, clean, lam):
    # `clean` is the gradient-stopped consistency target: fixed while the
    # parameters are perturbed, exactly as in one optimizer step
    pred = md.lano_forward(coords, frames, aug, params)
    loss = tr.masked_one_step_loss(pred, targets, masks)
    return loss + tr.consistency_loss(clean, pred) * lam


def test_full_mpt_loss_gradient_matches_finite_differences():
    from util import rel_err

    with T.precision(np.float64):
        cfg = md.ModelConfig(layers=2, channels=8, heads=2, latent_tokens=2,
                             history=2, phys_channels=1, mlp_ratio=1.0)
        params = md.ModelParams(cfg, seed=0)
        # break the zero-init so every branch carries gradient
        rng = np.random.default_rng(1)
        for i in range(cfg.layers):
            params[f"L{i}.merge_w"].data = rng.normal(size=(8, 8)) * 0.2
        gh = gw = 5
        coords = tr._grid_coords(gh, gw)
        frames = rng.normal(size=(1, 2, gh, gw, 1))
        targets = rng.normal(size=(1, gh, gw, 1))
        m = mk.gen_pointwise_mask(gh, gw, 0.3, seed=3).grid[None].astype(float)
        m_aug, _ = mk.mpt_augment(
            mk.ObservationMask(m[0].astype(np.uint8), mk.POINTWISE, 0.3, 0, 3),
            0.2, seed=4)
        aug = m_aug.grid[None].astype(float)

        with T.no_grad():
            clean = md.lano_forward(coords, frames, m, params).data.copy()

        loss = mpt_loss_for_grad(params, coords, frames, targets, m, aug,
                                 clean, 0.1)
        grads = T.backward(loss)

        def f(_):
            with T.no_grad():
                val = mpt_loss_for_grad(params, coords, frames, targets, m,
                                        aug, clean, 0.1)
            return float(val.data)

        step = 1e-5
        checked = 0
        rng2 = np.random.default_rng(7)
        for name, p in params.items():
            g = grads[p]
            flat = p.data.reshape(-1)
            gflat = g.reshape(-1)
            idxs = rng2.choice(flat.size, size=min(4, flat.size), replace=False)
            fd_vec, an_vec = [], []
            for i in idxs:
                orig = flat[i]
                flat[i] = orig + step
                fp = f(None)
                flat[i] = orig - step
                fm = f(None)
                flat[i] = orig
                fd_vec.append((fp - fm) / (2 * step))
                an_vec.append(gflat[i])
                checked += 1
            fd_vec, an_vec = np.array(fd_vec), np.array(an_vec)
            # group-wise relative error; the floor is the FD resolution at
            # this step size, tiny gradients below it cannot be resolved
            scale = max(np.abs(fd_vec).max(), np.abs(an_vec).max(), 1e-6)
            err = np.abs(fd_vec - an_vec).max() / scale
            assert err < 1e-4, (name, err)
        assert checked > 50


# -- training loop ---------------------------------------------------------------------

def tiny_dataset(n_train=4, n_val=2, t_steps=4, hw=8, seed0=0):
    grid = pg.GridGeometry(hw, hw)
    mk_traj = lambda s: pg.solve_diffusion_reaction(grid, seed=s, t_steps=t_steps,
                                                    dt=0.02)
    return {
        "train": [mk_traj(seed0 + i) for i in range(n_train)],
        "val": [mk_traj(seed0 + 100 + i) for i in range(n_val)],
    }


def tiny_model_cfg(**kw):
    base = dict(layers=1, channels=8, heads=2, latent_tokens=2, history=2,
                phys_channels=2, mlp_ratio=1.0)
    base.update(kw)
    return md.ModelConfig(**base)


def test_train_runs_and_writes_artifacts(tmp_path):
    splits = tiny_dataset()
    cfg = tiny_model_cfg()
    tcfg = tr.TrainConfig(epochs=2, batch_size=4, seed=0)
    spec = tr.MaskSpec(mk.PATCHWISE, 0.25, 4)
    res = tr.train_on_splits(splits, (8, 8), spec, cfg, tcfg, tmp_path / "run")
    assert res.checkpoint_path.exists()
    assert res.metrics_path.exists()
    lines = res.metrics_path.read_text().splitlines()
    assert lines[0] == "epoch,step,lr,train_loss,val_rel_l2,wall_seconds"
    assert len(lines) == 3
    assert np.isfinite(res.best_val)


def test_train_seed_reproducible_metrics(tmp_path):
    splits = tiny_dataset()
    cfg = tiny_model_cfg()
    spec = tr.MaskSpec(mk.PATCHWISE, 0.25, 4)

    def run(out):
        tcfg = tr.TrainConfig(epochs=2, batch_size=4, seed=7)
        return tr.train_on_splits(splits, (8, 8), spec, cfg, tcfg, out)

    r1 = run(tmp_path / "a")
    r2 = run(tmp_path / "b")

    def stripped(path):
        rows = path.read_text().splitlines()
        return ["," .join(r.split(",")[:-1]) for r in rows]  # drop wall_seconds

    assert stripped(r1.metrics_path) == stripped(r2.metrics_path)
    assert r1.checkpoint_path.read_bytes() == r2.checkpoint_path.read_bytes()


def test_train_mpt_off_is_plain_supervised(tmp_path):
    # flag semantics: no augmentation and no consistency branch
    splits = tiny_dataset(n_train=2, n_val=1)
    cfg = tiny_model_cfg()
    spec = tr.MaskSpec(mk.POINTWISE, 0.2, 0)
    tcfg = tr.TrainConfig(epochs=1, batch_size=4, seed=3, mpt_enabled=False,
                          consistency_weight=0.0)
    res = tr.train_on_splits(splits, (8, 8), spec, cfg, tcfg, tmp_path / "off")
    assert res.checkpoint_path.exists()


def test_supervised_set_independent_of_artificial_mask():
    m = mk.gen_patchwise_mask(8, 8, 0.25, 4, seed=0)
    for s in range(5):
        m_aug, h_hat = mk.mpt_augment(m, 0.4, seed=s)
        # supervision uses m, which augmentation never touches
        assert np.array_equal(m.grid, m.grid | (1 - h_hat.grid) * m.grid)
        assert np.all(m_aug.grid <= m.grid)


def test_single_step_descends_on_frozen_batch():
    rng = np.random.default_rng(5)
    cfg = tiny_model_cfg(phys_channels=1)
    params = md.ModelParams(cfg, seed=1)
    state = tr.TrainState(params)
    coords = tr._grid_coords(8, 8)
    frames = rng.normal(size=(4, cfg.history, 8, 8, 1)).astype(np.float32)
    targets = rng.normal(size=(4, 8, 8, 1)).astype(np.float32)
    masks = np.ones((4, 8, 8), dtype=np.float32)

    def loss_value():
        with T.no_grad():
            pred = md.lano_forward(coords, frames, masks, params)
            return float(tr.masked_one_step_loss(pred, targets, masks).data)

    before = loss_value()
    pred = md.lano_forward(coords, frames, masks, params)
    loss = tr.masked_one_step_loss(pred, targets, masks)
    grads_t = T.backward(loss)
    grads = {name: grads_t[t] for name, t in params.items() if t in grads_t}
    tr.adamw_step(state, grads, lr=1e-6, cfg=tr.TrainConfig(weight_decay=0.0))
    after = loss_value()
    assert after < before


def test_train_rejects_short_trajectories():
    with pytest.raises(ValueError):
        tr.make_pairs(2, t_all=3, history=3)
