import json
import math

import numpy as np
import pytest
import torch

from todinv.denoiser import (CfgConfig, ConstantDenoiser, GaussianOracleDenoiser, LatentDataset, ToyDenoiser,
                             TrainConfig, build_toy_model, guided_prediction, layer_group_of, load_weights,
                             predict_noise, save_weights, train_toy)
from todinv.embedding_space import GROUPS, LayerGroup, encode_prompt, init_grid
from todinv.scheduler import add_noise, build_schedule
from todinv.toydata import shapes_dataset


def _model(**kw):
    torch.manual_seed(0)
    return ToyDenoiser(**kw).double()


def _cells(prompt="a red square on a light background"):
    e = encode_prompt(prompt)
    return {g: e for g in GROUPS}


def test_shapes_and_layer_table():
    m = _model()
    z = torch.randn(2, 4, 16, 16, dtype=torch.float64)
    assert m(z, _cells(), 500).shape == z.shape
    assert m(z[0], _cells(), 500).shape == z[0].shape
    assert m.layer_tags == [LayerGroup.APPEARANCE] * 2 + [LayerGroup.STRUCTURE] * 3 + [LayerGroup.APPEARANCE] * 2
    assert m.block_resolutions() == [16, 8, 4, 2, 4, 8, 16]
    with pytest.raises(IndexError):
        layer_group_of(7, m)
    with pytest.raises(ValueError):
        ToyDenoiser(resolution=12)


def test_each_group_reaches_the_output():
    m = _model()
    z = torch.randn(4, 16, 16, dtype=torch.float64)
    base = m(z, _cells(), 300)
    for g in GROUPS:
        c = _cells()
        c[g] = encode_prompt("something else entirely")
        assert not torch.allclose(m(z, c, 300), base)


def test_unconditioned_group_is_ignored():
    m = _model(conditioned_groups=[LayerGroup.STRUCTURE])
    z = torch.randn(4, 16, 16, dtype=torch.float64)
    c = _cells()
    c[LayerGroup.APPEARANCE] = encode_prompt("other")
    assert torch.equal(m(z, c, 300), m(z, _cells(), 300))


def test_cfg_scale_one_is_conditional():
    m = _model()
    z = torch.randn(4, 16, 16, dtype=torch.float64)
    cfg = CfgConfig.for_handle(m, 1.0)
    assert torch.equal(guided_prediction(m, z, _cells(), 100, cfg), m(z, _cells(), 100))


def test_cfg_extrapolates():
    m = _model()
    z = torch.randn(4, 16, 16, dtype=torch.float64)
    cfg = CfgConfig.for_handle(m, 7.5)
    cond = m(z, _cells(), 100)
    null = {g: cfg.uncond_embedding for g in GROUPS}
    uncond = m(z, null, 100)
    torch.testing.assert_close(guided_prediction(m, z, _cells(), 100, cfg), uncond + 7.5 * (cond - uncond))
    src = _cells("a light background")
    with_src = guided_prediction(m, z, _cells(), 100, cfg, uncond_cells=src)
    torch.testing.assert_close(with_src, m(z, src, 100) + 7.5 * (cond - m(z, src, 100)))


def test_cfg_validation():
    with pytest.raises(ValueError):
        CfgConfig(0.5, torch.zeros(8, 64))
    with pytest.raises(ValueError):
        CfgConfig(2.0, torch.zeros(8, 64), negative="other")


def test_predict_noise_checks_cell_shape():
    m = _model()
    grid = init_grid(encode_prompt("x", dim=32), 2)
    with pytest.raises(ValueError, match="do not match"):
        predict_noise(m, torch.zeros(4, 16, 16, dtype=torch.float64), grid, 0)


def test_gaussian_oracle_gain_is_the_regression_slope():
    # E[eps | z_t] for Gaussian data is linear in z_t; a least-squares fit finds the slope
    p = build_schedule(T=10)
    sigma = 0.7
    oracle = GaussianOracleDenoiser(p.alpha_bar, sigma)
    rng = np.random.default_rng(0)
    for t in (0, 250, 600, 990):
        z0 = sigma * rng.standard_normal(200_000)
        eps = rng.standard_normal(200_000)
        zt = add_noise(z0, eps, t, p)
        slope = float(zt @ eps / (zt @ zt))
        resid = eps - slope * zt
        stderr = math.sqrt(resid.var() / (zt @ zt))
        assert abs(slope - oracle.gain(t)) < 5 * stderr


def test_constant_denoiser():
    m = ConstantDenoiser(torch.full((4, 16, 16), 0.5, dtype=torch.float64))
    out = m(torch.randn(4, 16, 16, dtype=torch.float64), _cells(), 10)
    assert torch.equal(out, torch.full((4, 16, 16), 0.5, dtype=torch.float64))


def test_weights_round_trip(tmp_path):
    m = _model()
    save_weights(m, tmp_path / "w.bin")
    m2 = load_weights(tmp_path / "w.bin")
    z = torch.randn(4, 16, 16, dtype=torch.float64)
    assert torch.equal(m(z, _cells(), 42), m2(z, _cells(), 42))
    assert m2.schedule(50).same_schedule(m.schedule(50))
    (tmp_path / "bad.bin").write_bytes(b"nope" + bytes(20))
    with pytest.raises(ValueError):
        load_weights(tmp_path / "bad.bin")
    with pytest.raises(FileNotFoundError):
        load_weights(tmp_path / "missing.bin")


def test_training_is_deterministic_and_finite():
    lat, prompts = shapes_dataset(48, seed=3)
    data = LatentDataset(lat, prompts)
    cfg = TrainConfig(batch_size=16)
    logs = [[], []]
    a = train_toy(data, 2, seed=5, config=cfg, dtype=torch.float32, log=logs[0])
    b = train_toy(data, 2, seed=5, config=cfg, dtype=torch.float32, log=logs[1])
    for (k, v), (_, w) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(v, w), k
    assert logs[0] == logs[1] and all(math.isfinite(r["loss"]) for r in logs[0])
    with pytest.raises(ValueError):
        train_toy(LatentDataset(lat[:0], []), 1)
    with pytest.raises(ValueError):
        train_toy(data, 0)


def test_build_toy_model_seeded():
    a = build_toy_model(TrainConfig(), 16, 4, 11, torch.float64)
    b = build_toy_model(TrainConfig(), 16, 4, 11, torch.float64)
    assert all(torch.equal(x, y) for x, y in zip(a.parameters(), b.parameters()))


def test_trained_model_beats_untrained(toy_weights):
    """Held-out loss recorded by train-toy improves on the untrained baseline."""
    held = json.loads((toy_weights.parent / "heldout.json").read_text())
    assert held["trained"] < 0.5 * held["untrained"]
    log = (toy_weights.parent / "train_log.tsv").read_text().splitlines()[1:]
    losses = [float(line.split("\t")[1]) for line in log]
    assert all(math.isfinite(x) for x in losses) and losses[-1] < losses[0]
