"""Training phases, early stopping, sweeps, Pareto filtering."""

import os

import numpy as np
import pytest
from conftest import conv_spec
from hypothesis import given, settings
from hypothesis import strategies as st

from pit import data, export, oracles, search
from pit.model import BlockSpec, NetworkSpec, TaskHead, build


def tiny_spec(c_out=4, f=4):
    blocks = [BlockSpec([conv_spec(c_out, f, act="relu")], residual="none")]
    return NetworkSpec(1, 16, blocks, TaskHead("classification", 2))


def tiny_data(n=256, seed=0):
    ds = data.synth_dilated_task(n, t=16, lags=(0, 2), noise_std=0.05,
                                 rng_seed=seed)
    return data.split(ds, (0.7, 0.15, 0.15), rng_seed=seed)


def quick_cfg(**kw):
    base = dict(batch_size=64, warmup=search.epochs(3),
                search_patience=3, search_max_epochs=12,
                finetune=search.epochs(2), rng_seed=0)
    base.update(kw)
    return search.SearchConfig(**base)


# ------------------------------------------------------------ config


def test_phase_validation():
    with pytest.raises(ValueError, match="exactly one"):
        search.Phase(n_epochs=3, patience=2)
    with pytest.raises(ValueError, match="exactly one"):
        search.Phase()
    with pytest.raises(ValueError, match="patience"):
        search.to_convergence(0)
    assert search.epochs(0).n_epochs == 0


def test_config_validation():
    with pytest.raises(ValueError, match="lambda"):
        quick_cfg(lam=-1.0)
    with pytest.raises(ValueError, match="cost kind"):
        quick_cfg(reg_kind="latency")
    with pytest.raises(ValueError, match="batch_size"):
        quick_cfg(batch_size=0)
    with pytest.raises(ValueError, match="learning rates"):
        quick_cfg(lr_masks=0.0)
    with pytest.raises(ValueError, match="patience"):
        quick_cfg(search_patience=0)


# ------------------------------------------------------------ warmup


def test_zero_warmup_changes_nothing():
    model = build(tiny_spec(), 0)
    before = {k: v.copy() for k, v in model.state_dict().items()}
    history = search.warmup(model, tiny_data(), quick_cfg(warmup=search.epochs(0)))
    assert history == []
    for k, v in model.state_dict().items():
        assert np.array_equal(v, before[k]), k


def test_warmup_reduces_loss_and_freezes_masks():
    model = build(tiny_spec(), 0)
    masks_before = {k: v.data.copy() for k, v in model.named_mask_params()}
    history = search.warmup(model, tiny_data(), quick_cfg(warmup=search.epochs(6)))
    assert history[-1].task_loss < history[0].task_loss
    assert all(r.phase == "warmup" and r.reg_loss == 0.0 for r in history)
    for k, v in model.named_mask_params():
        assert np.array_equal(v.data, masks_before[k]), k


def test_warmup_rejects_empty_dataset():
    ds = tiny_data().retagged(np.full(256, "test", dtype="<U5"))
    with pytest.raises(ValueError, match="empty training split"):
        search.warmup(build(tiny_spec(), 0), ds, quick_cfg())


def test_warmup_checkpoint_restarts_identically(tmp_path):
    ds = tiny_data()
    model = build(tiny_spec(), 0)
    search.warmup(model, ds, quick_cfg())
    ckpt = str(tmp_path / "w.pitd")
    data.save_tensors(ckpt, model.state_dict())
    a, b = build(tiny_spec(), 0), build(tiny_spec(), 0)
    a.load_state_dict(data.load_tensors(ckpt))
    b.load_state_dict(data.load_tensors(ckpt))
    for (k, ta), (_, tb) in zip(a.named_params(), b.named_params()):
        assert np.array_equal(ta.data, tb.data), k


def test_warmup_convergence_respects_patience():
    model = build(tiny_spec(), 0)
    cfg = quick_cfg(warmup=search.to_convergence(2, max_epochs=40))
    history = search.warmup(model, tiny_data(), cfg)
    vals = [r.val_loss for r in history]
    best = int(np.argmin(vals))
    assert len(vals) - 1 <= best + 2


# ------------------------------------------------------------ search


def prepared(lam, seed=0, **kw):
    ds = tiny_data(seed=seed)
    cfg = quick_cfg(lam=lam, rng_seed=seed, **kw)
    model = build(tiny_spec(), seed)
    search.warmup(model, ds, cfg)
    return model, ds, cfg


def arch_shape(arch):
    return [(tuple(la.kept_channels), la.receptive_field, la.dilation,
             la.eliminated) for la in arch.layers]


def test_lambda_zero_keeps_seed_architecture():
    model, ds, cfg = prepared(lam=0.0)
    seed_arch = export.extract(model)
    _, history = search.search(model, ds, cfg)
    arch = export.extract(model)
    assert arch_shape(arch) == arch_shape(seed_arch)
    assert arch.params_weights_only == seed_arch.params_weights_only
    assert search.FLAG_ACCURACY_ONLY in history[0].flags


def test_huge_lambda_flags_cost_only():
    model, ds, cfg = prepared(lam=1e6, search_max_epochs=2)
    _, history = search.search(model, ds, cfg)
    assert search.FLAG_COST_ONLY in history[0].flags
    assert all(r.phase == "search" for r in history)


def test_moderate_lambda_prunes():
    model, ds, cfg = prepared(lam=3e-4, search_max_epochs=30,
                              search_patience=5, lr_masks=0.01)
    seed_params = export.extract(model).params_weights_only
    search.search(model, ds, cfg)
    assert export.extract(model).params_weights_only < seed_params


def test_search_is_deterministic(tmp_path):
    ds = tiny_data()
    cfg = quick_cfg(lam=1e-4, search_max_epochs=6, search_patience=2)
    model = build(tiny_spec(), 0)
    search.warmup(model, ds, cfg)
    ckpt = str(tmp_path / "w.pitd")
    data.save_tensors(ckpt, model.state_dict())

    def run():
        m = build(tiny_spec(), 0)
        m.load_state_dict(data.load_tensors(ckpt))
        _, history = search.search(m, ds, cfg)
        return history, arch_shape(export.extract(m))

    h1, a1 = run()
    h2, a2 = run()
    assert a1 == a2
    assert h1 == h2  # bit-identical floats, not approximately equal


def test_search_restores_best_epoch_and_stops_in_time():
    model, ds, cfg = prepared(lam=1e-4, search_patience=2,
                              search_max_epochs=40)
    _, history = search.search(model, ds, cfg)
    vals = [r.val_loss for r in history]
    best = int(np.argmin(vals))
    assert len(vals) - 1 <= best + cfg.search_patience
    _, _, xv, yv = search._splits(ds)
    val_loss, _ = search.evaluate(model, xv, yv)
    assert val_loss == pytest.approx(vals[best], rel=1e-6)


def test_search_keeps_frozen_mask_heads_at_one():
    model, ds, cfg = prepared(lam=1e-3, search_max_epochs=8,
                              search_patience=3, lr_masks=0.05)
    search.search(model, ds, cfg)
    for unit in model.iter_units():
        if getattr(unit, "mask", None) is None:
            continue
        assert unit.mask.beta.data[0] == 1.0
        assert unit.mask.gamma.data[0] == 1.0


# ------------------------------------------------------------ finetune


def test_finetune_freezes_masks_and_reports_metric():
    model, ds, cfg = prepared(lam=1e-4, search_max_epochs=4,
                              search_patience=2)
    search.search(model, ds, cfg)
    masks = {k: v.data.copy() for k, v in model.named_mask_params()}
    result = search.finetune(model, ds, cfg)
    for k, v in model.named_mask_params():
        assert np.array_equal(v.data, masks[k]), k
    assert result.metric_name == "accuracy"
    assert 0.0 <= result.test_metric <= 1.0
    assert all(r.phase == "finetune" for r in result.history)


def test_finetune_falls_back_to_val_without_test_rows():
    ds = data.split(data.synth_dilated_task(128, t=16, lags=(0, 2),
                                            rng_seed=1), (0.8, 0.2),
                    rng_seed=1)
    model = build(tiny_spec(), 1)
    result = search.finetune(model, ds, quick_cfg(finetune=search.epochs(1)))
    assert "no-test-split" in result.flags
    assert result.test_metric == result.val_metric


def test_finetune_from_scratch_keeps_architecture():
    model, ds, cfg = prepared(lam=3e-4, search_max_epochs=10,
                              search_patience=3, lr_masks=0.01)
    search.search(model, ds, cfg)
    before = arch_shape(export.extract(model))
    w_searched = model.blocks[0].units[0].w.data.copy()
    search.finetune(model, ds, cfg, from_scratch=True)
    assert arch_shape(export.extract(model)) == before
    assert not np.array_equal(model.blocks[0].units[0].w.data, w_searched)


# ------------------------------------------------------------ pareto


def point(metric, cost, name="accuracy", i=0):
    return search.ParetoPoint(lam=float(i), reg_kind="size",
                              metric_name=name, metric_value=metric,
                              params=cost, macs=cost * 10, arch=None)


def test_pareto_simple_domination():
    pts = [point(90.0, 1000), point(91.0, 900)]
    assert search.pareto_filter(pts) == [pts[1]]


def test_pareto_trade_off_keeps_both():
    pts = [point(90.0, 1000), point(91.0, 1200)]
    assert search.pareto_filter(pts) == pts


def test_pareto_duplicate_keeps_earliest():
    pts = [point(90.0, 1000, i=0), point(90.0, 1000, i=1)]
    assert search.pareto_filter(pts) == [pts[0]]


def test_pareto_mixed_metrics_rejected():
    with pytest.raises(ValueError, match="mixed metric"):
        search.pareto_filter([point(1.0, 10), point(1.0, 10, name="mae")])


def test_pareto_mae_direction():
    pts = [point(0.5, 1000, name="mae"), point(0.4, 1200, name="mae"),
           point(0.6, 800, name="mae")]
    # cheaper-but-worse and pricier-but-better both survive
    assert search.pareto_filter(pts) == pts


@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5)),
                min_size=0, max_size=24),
       st.booleans())
@settings(max_examples=200, deadline=None)
def test_pareto_matches_bruteforce_oracle(pairs, higher):
    name = "accuracy" if higher else "mae"
    pts = [point(float(m), c, name=name, i=i)
           for i, (m, c) in enumerate(pairs)]
    got = search.pareto_filter(pts)
    want = oracles.dominance_bruteforce(
        pts, lambda p: p.metric_value, lambda p: p.params, higher)
    assert got == want


# ------------------------------------------------------------ sweep


def test_sweep_dedups_and_writes_artifacts(tmp_path):
    ds = tiny_data()
    cfg = quick_cfg(search_max_epochs=3, search_patience=2,
                    finetune=search.epochs(1))
    result = search.sweep(tiny_spec(), ds, [0.0, 1e-4, 0.0], cfg,
                          str(tmp_path))
    assert len(result.points) == 2
    assert result.failures == []
    assert (tmp_path / "warmup_s0.pitd").exists()
    assert (tmp_path / "warmup_s0.pitd.json").exists()
    for p in result.points:
        assert p.params == p.arch.params_weights_only
        rundir = os.path.dirname(p.checkpoint_path)
        for name in ("model.pitd", "model.pitd.json", "arch.ini",
                     "history.jsonl"):
            assert os.path.exists(os.path.join(rundir, name))
    assert all(f in result.points for f in result.front)
    assert len(result.front) >= 1


def test_sweep_records_partial_failures(tmp_path):
    ds = tiny_data()
    cfg = quick_cfg(search_max_epochs=2, search_patience=1,
                    finetune=search.epochs(0))
    result = search.sweep(tiny_spec(), ds, [-1.0, 0.0], cfg, str(tmp_path))
    assert len(result.failures) == 1
    assert result.failures[0].lam == -1.0
    assert "lambda" in result.failures[0].error
    assert len(result.points) == 1


def test_sweep_reuses_existing_warmup_checkpoint(tmp_path):
    ds = tiny_data()
    cfg = quick_cfg(search_max_epochs=2, search_patience=1,
                    finetune=search.epochs(0))
    r1 = search.sweep(tiny_spec(), ds, [0.0], cfg, str(tmp_path))
    stamp = (tmp_path / "warmup_s0.pitd").stat().st_mtime_ns
    r2 = search.sweep(tiny_spec(), ds, [1e-4], cfg, str(tmp_path))
    assert (tmp_path / "warmup_s0.pitd").stat().st_mtime_ns == stamp
    assert r1.warmup_checkpoint == r2.warmup_checkpoint


def test_history_and_points_jsonl_round_trip(tmp_path):
    import json
    records = [search.EpochRecord("search", 0, 1.0, 0.5, 0.9, 0.8, ())]
    hpath = str(tmp_path / "h.jsonl")
    search.dump_history(hpath, records)
    row = json.loads(open(hpath).read().strip())
    assert row["phase"] == "search" and row["reg_loss"] == 0.5
    ppath = str(tmp_path / "p.jsonl")
    pts = [point(0.9, 100, i=3), point(0.8, 200, i=4)]
    search.dump_points(ppath, pts, front=[pts[0]])
    rows = [json.loads(l) for l in open(ppath)]
    assert rows[0]["lambda"] == 3.0 and rows[0]["params"] == 100
    assert rows[0]["on_front"] and not rows[1]["on_front"]
    assert "arch" not in rows[0]


def test_checkpoint_sidecar_round_trip(tmp_path):
    model = build(tiny_spec(), 0)
    model.blocks[0].units[0].mask.alpha.data[:] = [1, 0, 1, 0]
    path = str(tmp_path / "m.pitd")
    search.write_checkpoint(path, model, 0)
    back = search.load_checkpoint(path)
    assert export.count(back) == export.count(model)
    for (k, a), (_, b) in zip(model.named_params(), back.named_params()):
        assert np.array_equal(a.data, b.data), k
    assert arch_shape(export.extract(back)) == arch_shape(export.extract(model))


def test_parallel_sweep_matches_sequential(tmp_path):
    ds = tiny_data(n=128)
    cfg = quick_cfg(lam=0.0, search_max_epochs=2, search_patience=1,
                    finetune=search.epochs(1), batch_size=64)
    seq = search.sweep(tiny_spec(), ds, [0.0, 1e-4], cfg,
                       str(tmp_path / "seq"))
    par = search.sweep(tiny_spec(), ds, [0.0, 1e-4], cfg,
                       str(tmp_path / "par"), workers=2)
    assert [p.lam for p in seq.points] == [p.lam for p in par.points]
    for a, b in zip(seq.points, par.points):
        assert a.metric_value == b.metric_value
        assert (a.params, a.macs) == (b.params, b.macs)


# ------------------------------------------------------------ regression head


def test_regression_task_uses_mae():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((64, 1, 8)).astype(np.float32)
    y = x[:, :, -1].astype(np.float32)
    ds = data.Dataset(data.T.Tensor(x), y,
                      np.full(64, "train", dtype="<U5"),
                      np.zeros(1, np.float32), np.ones(1, np.float32))
    ds = data.split(ds, (0.8, 0.2), stratified=False)
    blocks = [BlockSpec([conv_spec(2, 3)], residual="none")]
    model = build(NetworkSpec(1, 8, blocks, TaskHead("regression", 1)), 0)
    cfg = quick_cfg(warmup=search.epochs(2), finetune=search.epochs(1))
    history = search.warmup(model, ds, cfg)
    assert history[-1].task_loss < history[0].task_loss * 2
    result = search.finetune(model, ds, cfg)
    assert result.metric_name == "mae"
