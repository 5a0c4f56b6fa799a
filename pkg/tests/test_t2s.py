import numpy as np
import pytest
import torch
import torch.nn.functional as F

from referee.core import ContractError, PhonemeSequence, StyleDescriptors, StyleId
from referee.t2s import (
    T2SConfig,
    T2SOutput,
    build_model,
    cln,
    collate,
    partition_parameters,
    ppg_for_synthesis,
    pretrain,
    t2s_forward,
    t2s_losses,
    teacher_forward,
)
from referee.utils import hash_tensors

from conftest import small_t2s_config
from oracles import central_difference, cln_gradient_errors

# ---------------------------------------------------------------- CLN


def test_cln_identity_modulation_is_layer_norm(rng):
    x = torch.as_tensor(rng.standard_normal((6, 16)))
    s = torch.as_tensor(rng.standard_normal(4))
    out = cln(x, s, torch.zeros(16, 4, dtype=torch.float64), torch.ones(16, dtype=torch.float64),
              torch.zeros(16, 4, dtype=torch.float64), torch.zeros(16, dtype=torch.float64))
    torch.testing.assert_close(out, F.layer_norm(x, (16,), eps=1e-5), rtol=1e-12, atol=1e-12)


def test_cln_constant_row_gives_bias(rng):
    x = torch.full((3, 8), 2.5, dtype=torch.float64)
    s = torch.as_tensor(rng.standard_normal(4))
    ws, bs = torch.as_tensor(rng.standard_normal((8, 4))), torch.as_tensor(rng.standard_normal(8))
    wt, bt = torch.as_tensor(rng.standard_normal((8, 4))), torch.as_tensor(rng.standard_normal(8))
    out = cln(x, s, ws, bs, wt, bt)
    torch.testing.assert_close(out, (wt @ s + bt).expand(3, 8), rtol=0, atol=0)


def test_cln_dimension_mismatch():
    with pytest.raises(ContractError):
        cln(torch.zeros(2, 8), torch.zeros(4), torch.zeros(6, 4), torch.zeros(6), torch.zeros(6, 4), torch.zeros(6))


@pytest.mark.parametrize("seed", range(5))
def test_cln_gradients(seed):
    ex, es = cln_gradient_errors(seed)
    assert ex < 1e-3 and es < 1e-3


# ---------------------------------------------------------------- forward


@pytest.fixture(scope="module")
def full_model():
    cfg = T2SConfig(num_phones=40, num_styles=4, dropout=0.0)
    return build_model(cfg, seed=0).eval()


def _teacher(durs, ppg_dim, voiced=None, rng=None):
    rng = rng or np.random.default_rng(0)
    p = len(durs)
    t = int(sum(durs))
    ppg = rng.random((t, ppg_dim)).astype(np.float32)
    ppg /= ppg.sum(1, keepdims=True)
    return StyleDescriptors(
        ppg, rng.standard_normal(p), rng.standard_normal(p), durs,
        np.ones(p, bool) if voiced is None else voiced, 0, np.arange(p) % 8,
    )


def test_teacher_forced_shape(full_model):
    text = PhonemeSequence((1, 2, 3, 4, 5), 40)
    out = t2s_forward(full_model, text, StyleId(1), _teacher([1, 2, 3, 1, 1], 218))
    assert tuple(out.ppg.shape) == (1, 8, 218)
    assert tuple(out.encoding.shape) == (1, 5, 256)


def test_inference_unit_durations(full_model):
    model = build_model(full_model.cfg, seed=0).eval()
    with torch.no_grad():
        model.duration_predictor.out.weight.zero_()
        model.duration_predictor.out.bias.zero_()
    out = t2s_forward(model, PhonemeSequence((1, 2, 3, 4, 5), 40), StyleId(0))
    assert out.durations.tolist() == [[1, 1, 1, 1, 1]]
    assert out.ppg.shape[1] == 5


def test_styles_change_output(full_model):
    text = PhonemeSequence((3, 1, 4, 1, 5), 40)
    with torch.no_grad():
        a = t2s_forward(full_model, text, StyleId(0), _teacher([2, 2, 2, 2, 2], 218))
        b = t2s_forward(full_model, text, StyleId(1), _teacher([2, 2, 2, 2, 2], 218))
    assert not torch.equal(a.ppg, b.ppg)


def test_forward_deterministic(full_model):
    text = PhonemeSequence((3, 1, 4), 40)
    with torch.no_grad():
        a = t2s_forward(full_model, text, StyleId(2))
        b = t2s_forward(full_model, text, StyleId(2))
    assert torch.equal(a.ppg, b.ppg)


def test_empty_sequence_rejected(full_model):
    with pytest.raises(ContractError):
        full_model(torch.zeros(1, 0, dtype=torch.long), torch.tensor([0]), torch.tensor([0]))


def test_inventory_mismatch(full_model):
    with pytest.raises(ContractError):
        t2s_forward(full_model, PhonemeSequence((1,), 41), StyleId(0))


def test_ppg_length_matches_expansion():
    model = build_model(small_t2s_config(2), seed=1).eval()
    rng = np.random.default_rng(5)
    for _ in range(20):
        p = int(rng.integers(1, 9))
        durs = rng.integers(0, 5, size=p)
        durs[0] = max(durs[0], 1)
        phones = torch.as_tensor(rng.integers(0, 8, size=p))[None]
        with torch.no_grad():
            out = model(phones, torch.tensor([p]), torch.tensor([1]), durations=torch.as_tensor(durs)[None])
            free = model(phones, torch.tensor([p]), torch.tensor([1]))
        assert out.ppg.shape[1] == int(durs.sum())
        assert free.ppg.shape[1] == int(free.durations.sum())


# ---------------------------------------------------------------- losses


def _output_from(batch, **override):
    fields = dict(
        ppg=batch.ppg.clone(),
        frame_lens=batch.frame_lens,
        encoding=torch.zeros(1),
        log_duration=torch.log(torch.clamp(batch.durations, min=1).float()),
        pitch=batch.pitch.clone(),
        energy=batch.energy.clone(),
        durations=batch.durations,
        phone_lens=batch.phone_lens,
    )
    fields.update(override)
    return T2SOutput(**fields)


def test_losses_zero_on_identity():
    batch = collate([_teacher([1, 2, 0, 3], 8)])
    losses = t2s_losses(_output_from(batch), batch)
    assert all(v.item() == 0.0 for v in losses.values())


def test_pitch_offset_mse_is_one():
    batch = collate([_teacher([1, 2, 2, 3], 8)])
    losses = t2s_losses(_output_from(batch, pitch=batch.pitch + 1), batch)
    assert losses["pitch_mse"].item() == pytest.approx(1.0, abs=1e-6)


def test_unvoiced_pitch_masked():
    batch = collate([_teacher([1, 2, 2], 8, voiced=np.zeros(3, bool))])
    losses = t2s_losses(_output_from(batch, pitch=batch.pitch + 5), batch)
    assert losses["pitch_mse"].item() == 0.0


def test_loss_shape_mismatch():
    batch = collate([_teacher([1, 2], 8)])
    with pytest.raises(ContractError):
        t2s_losses(_output_from(batch, ppg=batch.ppg[:, :2]), batch)


def test_full_loss_gradient_subset():
    """Autograd vs central differences on 10 sampled scalar parameters, float64."""
    model = build_model(small_t2s_config(2), seed=2).double()
    rng = np.random.default_rng(11)
    batch = collate([_teacher([2, 1, 3], 8, rng=rng), _teacher([1, 4], 8, rng=rng)], torch.float64)
    batch.styles = torch.tensor([0, 1])
    model.train()

    def total():
        return t2s_losses(teacher_forward(model, batch), batch)["total"]

    model.zero_grad()
    total().backward()
    params = [p for _, p in model.named_parameters()]
    picks = []
    while len(picks) < 10:
        pi = int(rng.integers(len(params)))
        idx = int(rng.integers(params[pi].numel()))
        if params[pi].grad is not None and abs(params[pi].grad.view(-1)[idx].item()) > 1e-6:
            picks.append((pi, idx))
    with torch.no_grad():
        for pi, idx in picks:
            p = params[pi]
            analytic = p.grad.view(-1)[idx].item()
            single = p.view(-1)[idx : idx + 1]
            numeric = central_difference(total, single).item()
            assert abs(analytic - numeric) / max(abs(analytic), abs(numeric)) < 1e-2


# ---------------------------------------------------------------- partition and training


def test_partition_exact():
    model = build_model(small_t2s_config(2), seed=0)
    part = partition_parameters(model)
    names = [n for n, _ in model.named_parameters()]
    assert set(part.adaptable).isdisjoint(part.frozen)
    assert sorted(part.adaptable + part.frozen) == sorted(names)
    assert "style_embedding.weight" in part.adaptable
    assert "encoder.0.norm1.scale.weight" in part.adaptable
    assert "pitch_predictor.out.weight" in part.adaptable
    assert "phone_embedding.weight" in part.frozen
    assert "encoder.0.attn.in_proj_weight" in part.frozen
    assert "pitch_proj.weight" in part.frozen


def test_pretrain_zero_steps_no_op(toy8):
    model = build_model(small_t2s_config(2), seed=0)
    before = hash_tensors(model.state_dict().items())
    state = pretrain(model, toy8.descs, 0)
    assert state.step == 0
    assert hash_tensors(model.state_dict().items()) == before


def test_pretrain_bit_identical_runs(toy8):
    hashes = []
    for _ in range(2):
        model = build_model(small_t2s_config(2), seed=4)
        pretrain(model, toy8.descs, 10, seed=4)
        hashes.append(hash_tensors(model.state_dict().items()))
    assert hashes[0] == hashes[1]


def test_ppg_for_synthesis_rows():
    p = ppg_for_synthesis(np.array([[0.5, -0.2, 1.5], [-1.0, -1.0, -1.0]]))
    np.testing.assert_allclose(p.sum(1), 1.0, atol=1e-6)
    assert p.min() >= 0 and p.max() <= 1
