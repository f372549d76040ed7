import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from todinv.denoiser import CfgConfig, ConstantDenoiser, ToyDenoiser
from todinv.editing import EditTask
from todinv.embedding_space import GROUPS, EditClass, LayerGroup, SharingMode, encode_prompt
from todinv.inversion import (MaskOverride, NumericalError, TodinvConfig, fixed_point_residual,
                              naive_ddim_invert, optimize_timestep, residual_grad, source_grid, todinv_invert)
from todinv.scheduler import ScheduleError, build_schedule

APP, STR = LayerGroup.APPEARANCE, LayerGroup.STRUCTURE
PROMPT = "a red square on a light background"


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return ToyDenoiser().double().eval()


def _z0(seed=0):
    return torch.randn(4, 16, 16, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def _invert(model, T=5, **kw):
    config = TodinvConfig(T=T, **kw)
    params = model.schedule(T)
    cfg = CfgConfig.for_handle(model, 7.5, "source")
    return todinv_invert(_z0(), PROMPT, None, config, params, model, cfg), params, cfg


def test_config_validation():
    for bad in (dict(K=-1), dict(delta=0), dict(lr=0), dict(T=0), dict(reduction="max")):
        with pytest.raises(ValueError):
            TodinvConfig(**bad)


def test_mask_overrides():
    c = TodinvConfig(T=3, edit_class=EditClass.STRUCTURE_EDIT)
    assert {g for _, g in c.mask()} == {APP}
    assert {g for _, g in TodinvConfig(T=3, edit_class="structure", mask_override="reverse").mask()} == {STR}
    assert len(TodinvConfig(T=3, edit_class="structure", mask_override=MaskOverride.NO_TOPO).mask()) == 6


@settings(max_examples=20, deadline=None)
@given(T=st.integers(1, 12), seed=st.integers(0, 1000))
def test_constant_prediction_is_an_exact_fixed_point(T, seed):
    # a prediction that ignores z_t makes the plain inversion step exact
    value = torch.randn(4, 16, 16, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    handle = ConstantDenoiser(value)
    params = build_schedule(T=T)
    res = todinv_invert(_z0(seed), PROMPT, None, TodinvConfig(T=T), params, handle,
                        CfgConfig.for_handle(handle, 1.0))
    assert max(res.final_residuals) < 1e-24
    assert res.total_steps == 0


def test_stopping_rule_and_best_iterate(model):
    res, _, _ = _invert(model, K=4, delta=1e-12)
    for i, t in enumerate(res.timesteps):
        trace = res.residual_trace[i]
        assert res.steps_used[i] == len(trace) <= 4
        assert res.optimized_residuals[i] < 1e-12 or res.steps_used[i] == 4 or res.nan_flags[i]
        assert res.optimized_residuals[i] == min([res.initial_residuals[i], *trace])
        assert res.final_residuals[i] <= res.initial_residuals[i]


def test_loose_delta_skips_optimization(model):
    res, _, _ = _invert(model, delta=1e6)
    assert res.total_steps == 0
    assert res.final_residuals == res.initial_residuals


def test_zero_budget_matches_naive(model):
    res, params, cfg = _invert(model, K=0)
    naive = naive_ddim_invert(_z0(), source_grid(PROMPT, params, model, torch.float64), params, model, cfg)
    assert res.total_steps == 0
    assert torch.equal(res.z_T, naive.z_T)
    assert res.final_residuals == naive.final_residuals


def test_final_residual_recomputes_from_returned_grid(model):
    res, params, cfg = _invert(model, K=3, delta=1e-12)
    cfg1 = CfgConfig(1.0, cfg.uncond_embedding, cfg.negative)
    for i, t in enumerate(res.timesteps):
        _, r = fixed_point_residual(res.trajectory[i], res.trajectory[i + 1], res.grid, t, params, model, cfg1)
        assert r == pytest.approx(res.final_residuals[i], rel=1e-12, abs=1e-18)


@pytest.mark.parametrize("edit_class,frozen", [(EditClass.STRUCTURE_EDIT, STR), (EditClass.APPEARANCE_EDIT, APP)])
def test_unselected_cells_stay_at_source(model, edit_class, frozen):
    res, _, _ = _invert(model, K=3, delta=1e-12, edit_class=edit_class)
    g = res.grid
    for r in range(g.T):
        assert torch.equal(g.cell(r, frozen), g.snapshot_cell(r, frozen))
    assert any(not torch.equal(g.cell(r, g2), g.snapshot_cell(r, g2)) for r in range(g.T) for g2 in GROUPS)


def test_task_overrides_config_class(model):
    task = EditTask("x", "x", PROMPT, "a red disk on a light background", "change object")
    params = model.schedule(3)
    res = todinv_invert(_z0(), PROMPT, task, TodinvConfig(T=3, K=2, delta=1e-12), params, model,
                        CfgConfig.for_handle(model, 7.5, "source"))
    assert all(torch.equal(res.grid.cell(r, STR), res.grid.snapshot_cell(r, STR)) for r in range(3))


def test_no_topo_optimizes_more_cells(model):
    def changed(res):
        g = res.grid
        return sum(not torch.equal(g.cell(r, grp), g.snapshot_cell(r, grp)) for r in range(g.T) for grp in GROUPS)
    masked, _, _ = _invert(model, K=2, delta=1e-12, edit_class="appearance")
    free, _, _ = _invert(model, K=2, delta=1e-12, edit_class="appearance", mask_override="no_topo")
    assert changed(masked) < changed(free)


@pytest.mark.parametrize("mode", list(SharingMode))
def test_shared_grids_keep_confinement(model, mode):
    res, _, _ = _invert(model, K=2, delta=1e-12, edit_class="appearance", sharing_mode=mode)
    g = res.grid
    assert all(torch.equal(g.cell(r, APP), g.snapshot_cell(r, APP)) for r in range(g.T))


def test_one_small_step_decreases_residual(model):
    """Nearly every small step against the gradient lowers the residual."""
    params = model.schedule(10)
    cfg = CfgConfig.for_handle(model, 1.0)
    emb = encode_prompt(PROMPT, dtype=torch.float64)
    gen = torch.Generator().manual_seed(3)
    wins = 0
    for trial in range(100):
        t = params.inversion_timesteps[trial % params.T]
        z_prev = torch.randn(4, 16, 16, generator=gen, dtype=torch.float64)
        z_t = z_prev + 0.1 * torch.randn(4, 16, 16, generator=gen, dtype=torch.float64)
        cells = {g: emb + 0.05 * torch.randn(emb.shape, generator=gen, dtype=torch.float64) for g in GROUPS}
        r0, grads = residual_grad(z_prev, z_t, cells, t, params, model, cfg)
        norm = math.sqrt(sum(float((d ** 2).sum()) for d in grads.values()))
        stepped = {g: cells[g] - 1e-4 * grads[g] / norm for g in GROUPS}
        r1, _ = residual_grad(z_prev, z_t, stepped, t, params, model, cfg, wrt=())
        wins += r1 < r0
    assert wins >= 95


def test_nan_prediction_raises():
    handle = ConstantDenoiser(torch.full((4, 16, 16), float("nan"), dtype=torch.float64))
    params = build_schedule(T=3)
    with pytest.raises(NumericalError) as e:
        todinv_invert(_z0(), PROMPT, None, TodinvConfig(T=3), params, handle, CfgConfig.for_handle(handle, 1.0))
    assert e.value.timestep == params.inversion_timesteps[0]


def test_frozen_grid_and_schedule_checks(model):
    params = model.schedule(3)
    cfg = CfgConfig.for_handle(model, 1.0)
    grid = source_grid(PROMPT, params, model, torch.float64).freeze()
    t = params.inversion_timesteps[0]
    with pytest.raises(RuntimeError):
        optimize_timestep(_z0(), _z0(1), grid, TodinvConfig(T=3).mask(), t, TodinvConfig(T=3), params, model, cfg)
    with pytest.raises(ScheduleError):
        todinv_invert(_z0(), PROMPT, None, TodinvConfig(T=4), params, model, cfg)
    with pytest.raises(ValueError):
        fixed_point_residual(_z0(), torch.zeros(3), grid, t, params, model, cfg)
