import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from referee.core import ContractError
from referee.s2w import (
    ConditioningFeatures,
    FlowItem,
    InternalConsistencyError,
    S2WConfig,
    S2WModel,
    S2WState,
    WaveItem,
    flow_forward,
    flow_inverse,
    kl_standard_normal,
    lsgan_d_loss,
    lsgan_g_loss,
    multi_resolution_stft_loss,
    s2w_infer,
    stage1_train,
    stage2_loss,
    stage2_train,
    wave_decode,
    wave_encode,
    wave_encoder_hash,
)
from referee.utils import hash_tensors, make_adam

from conftest import tiny_s2w_config, tone
from oracles import numeric_jacobian, randomize_couplings


def _model(seed=0, **kw):
    torch.manual_seed(seed)
    return S2WModel(tiny_s2w_config(**kw)).eval()


def _cond(t, rng):
    return ConditioningFeatures(rng.standard_normal(t), rng.standard_normal(t))


def test_config_hop():
    assert S2WConfig().hop == 240
    with pytest.raises(ValueError):
        S2WConfig(latent_channels=3)


# ---------------------------------------------------------------- wave VAE


def test_wave_encode_shapes_and_positivity(rng):
    model = _model()
    lat = wave_encode(model, rng.standard_normal(2400), torch.Generator().manual_seed(0))
    assert tuple(lat.z.shape) == (4, 10)
    assert bool((lat.z_sigma > 0).all())


def test_wave_encode_pads_to_hop(rng):
    lat = wave_encode(_model(), rng.standard_normal(2401), torch.Generator().manual_seed(0))
    assert lat.z.shape[1] == 11


def test_wave_encode_deterministic(rng):
    model, x = _model(), rng.standard_normal(2400)
    a = wave_encode(model, x, torch.Generator().manual_seed(3)).z
    b = wave_encode(model, x, torch.Generator().manual_seed(3)).z
    assert torch.equal(a, b)


def test_wave_encode_empty():
    with pytest.raises(ContractError):
        wave_encode(_model(), np.zeros(0))


def test_wave_decode_length_and_zero_latent():
    model = _model()
    y = wave_decode(model, torch.zeros(4, 10))
    assert y.shape == (2400,)
    assert torch.isfinite(y).all()
    with pytest.raises(ContractError):
        wave_decode(model, torch.zeros(5, 10))


# ---------------------------------------------------------------- flow


def test_identity_initialized_flow(rng):
    model = _model()
    z = torch.as_tensor(rng.standard_normal((4, 12)), dtype=torch.float32)
    u, ld = flow_forward(model, z, torch.zeros(4, 12), _cond(12, rng))
    assert torch.equal(u, z)
    assert ld.item() == 0.0


def test_flow_length_mismatch(rng):
    model = _model()
    with pytest.raises(ContractError):
        flow_forward(model, torch.zeros(4, 12), torch.zeros(4, 11), _cond(12, rng))
    with pytest.raises(ContractError):
        flow_forward(model, torch.zeros(4, 12), None, _cond(10, rng))


def test_flow_round_trip(rng):
    model = _model(latent_channels=8, coupling_layers=4)
    randomize_couplings(model, 0.1, seed=0)
    for _ in range(10):
        z = torch.as_tensor(rng.standard_normal((8, 20)), dtype=torch.float32)
        cond = _cond(20, rng)
        with torch.no_grad():
            u, _ = flow_forward(model, z, None, cond)
            back = flow_inverse(model, u, cond)
        assert (back - z).abs().max().item() < 1e-4


def test_log_det_is_sum_of_layer_log_scales(rng):
    model = _model(latent_channels=8, coupling_layers=4)
    randomize_couplings(model, 0.1, seed=1)
    z = torch.as_tensor(rng.standard_normal((8, 6)), dtype=torch.float32)
    cond = _cond(6, rng)
    with torch.no_grad():
        _, total, layers = flow_forward(model, z, None, cond, return_layers=True)
        # recompute each layer's log-scales independently
        x = z[None]
        expected = 0.0
        mask = torch.ones(1, 1, 6)
        for layer in model.flow.layers:
            keep, _ = layer._split(x)
            log_s, _ = layer._stats(keep, cond.tensor(), mask)
            expected += log_s.sum().item()
            x, _ = layer(x, cond.tensor(), mask)
    assert len(layers) == 4
    assert total.item() == pytest.approx(sum(l.item() for l in layers), rel=1e-6)
    assert total.item() == pytest.approx(expected, rel=1e-5)


def test_log_det_dense_jacobian(rng):
    model = _model(latent_channels=2, coupling_layers=4).double()
    randomize_couplings(model, 0.3, seed=2)
    cond = torch.as_tensor(rng.standard_normal((2, 2)), dtype=torch.float64)
    z = torch.as_tensor(rng.standard_normal((2, 2)), dtype=torch.float64)
    with torch.no_grad():
        _, ld = flow_forward(model, z, None, cond)
        jac = numeric_jacobian(lambda zz: flow_forward(model, zz, None, cond)[0], z)
    sign, logabs = np.linalg.slogdet(jac)
    assert sign > 0
    assert abs(ld.item() - logabs) / abs(logabs) < 1e-3


# ---------------------------------------------------------------- losses


def test_kl_zero_for_standard_normal():
    assert kl_standard_normal(torch.zeros(2, 4, 5), torch.ones(2, 4, 5)).item() == 0.0


def test_lsgan_wave_losses():
    assert lsgan_d_loss([torch.ones(3)], [torch.zeros(3)]).item() == 0.0
    assert lsgan_g_loss([torch.ones(3), torch.ones(2)]).item() == 0.0
    assert lsgan_d_loss([torch.zeros(3)], [torch.ones(3)]).item() == 2.0


def test_mr_stft_zero_on_identity(rng):
    x = torch.as_tensor(rng.standard_normal((1, 4800)), dtype=torch.float32)
    assert multi_resolution_stft_loss(x, x, S2WConfig().stft_resolutions).item() == 0.0


def test_stage2_loss_closed_form_gaussian(rng):
    """Identity flow with prior = q: loss is the mean negative log-density of z under q."""
    t, c = 4, 2
    mu = rng.standard_normal((1, c, t))
    sigma = np.exp(rng.standard_normal((1, c, t)) * 0.3)
    z = mu + sigma * rng.standard_normal((1, c, t))
    expected = -np.mean(norm.logpdf(z, loc=mu, scale=sigma))
    model = _model(latent_channels=c).double()
    cond = torch.as_tensor(rng.standard_normal((1, 2, t)))
    mask = torch.ones(1, 1, t, dtype=torch.float64)
    u, log_det = model.flow(torch.as_tensor(z), cond, mask)
    loss = stage2_loss(u, log_det, torch.as_tensor(mu), torch.as_tensor(np.log(sigma)), mask)
    assert loss.item() == pytest.approx(expected, rel=1e-12)


# ---------------------------------------------------------------- training


def _wave_items(n=2, frames=20):
    items = []
    for i in range(n):
        x = tone(150.0 * (i + 1), frames * 240 / 24000).astype(np.float32)
        items.append(WaveItem(x, np.full(frames, np.log(150.0 * (i + 1)), dtype=np.float32)))
    return items


def test_stage1_zero_steps():
    state = S2WState(_model())
    before = hash_tensors(state.model.state_dict().items())
    stage1_train(state, _wave_items(), 0)
    assert state.stage1_steps == 0
    assert hash_tensors(state.model.state_dict().items()) == before
    with pytest.raises(ValueError):
        stage1_train(state, [], 1)


def test_stage1_short_run_logs():
    state = S2WState(_model())
    rows = []
    stage1_train(state, _wave_items(), 3, batch_size=2, segment_frames=8, log=lambda s, r: rows.append((s, r)))
    assert [s for s, _ in rows] == [1, 2, 3]
    assert set(rows[0][1]) == {"recon", "kl", "adv", "f0", "d", "g"}
    assert state.stage1_steps == 3


def _flow_items(rng, n=2, frames=12):
    out = []
    for _ in range(n):
        ppg = rng.random((frames, 8)).astype(np.float32)
        ppg /= ppg.sum(1, keepdims=True)
        wav = rng.standard_normal(frames * 240).astype(np.float32) * 0.1
        out.append(FlowItem(wav, ppg, _cond(frames, rng)))
    return out


def test_stage2_zero_steps_and_freeze(rng):
    state = S2WState(_model())
    enc = wave_encoder_hash(state.model)
    full = hash_tensors(state.model.state_dict().items())
    stage2_train(state, _flow_items(rng), 0)
    assert hash_tensors(state.model.state_dict().items()) == full
    rows = []
    stage2_train(state, _flow_items(rng), 5, batch_size=2, log=lambda s, r: rows.append(r["nll"]))
    assert wave_encoder_hash(state.model) == enc
    assert len(rows) == 5 and all(np.isfinite(rows))
    assert all(p.requires_grad for p in state.model.wave_encoder.parameters())


def test_stage2_rejects_encoder_in_optimizer(rng):
    state = S2WState(_model())
    state.flow_opt = make_adam(state.model.parameters(), 1e-3)
    with pytest.raises(InternalConsistencyError):
        stage2_train(state, _flow_items(rng), 1)


def test_flow_item_length_contract(rng):
    with pytest.raises(ContractError):
        FlowItem(np.zeros(2400), np.zeros((10, 8)), _cond(9, rng))


# ---------------------------------------------------------------- inference

_INFER_MODEL = None


def _infer_model():
    global _INFER_MODEL
    if _INFER_MODEL is None:
        _INFER_MODEL = _model(seed=5)
        randomize_couplings(_INFER_MODEL, 0.05, seed=5)
    return _INFER_MODEL


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 60), st.floats(0.0, 1.0))
def test_infer_length_law(t, temperature):
    rng = np.random.default_rng(t)
    ppg = rng.random((t, 8))
    wav = s2w_infer(_infer_model(), ppg / ppg.sum(1, keepdims=True), _cond(t, rng), temperature,
                    torch.Generator().manual_seed(0))
    assert wav.shape == (t * 240,)


def test_infer_temperature_zero_deterministic(rng):
    ppg = rng.random((100, 8))
    cond = _cond(100, rng)
    a = s2w_infer(_infer_model(), ppg, cond, 0.0)
    b = s2w_infer(_infer_model(), ppg, cond, 0.0)
    assert a.shape == (24000,)
    assert a.tobytes() == b.tobytes()


def test_infer_length_mismatch(rng):
    with pytest.raises(ContractError):
        s2w_infer(_infer_model(), rng.random((10, 8)), _cond(9, rng), 0.0)
