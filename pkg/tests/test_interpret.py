import numpy as np
import pytest
import torch

from protodiff import interpret
from protodiff.interpret import (EmergenceTrace, extrapolate_sweep, interpolate,
                                 lerp, manipulate, reconstruct, slerp,
                                 trace_emergence, visualize_prototype)
from protodiff.protonet import receptive_field
from protodiff.rng import stream
from protodiff.samplers import ddim_generate, ddim_invert, uniform_steps

from conftest import make_tiny_model


@pytest.fixture(scope="module")
def model():
    return make_tiny_model(seed=21)


@pytest.fixture(scope="module")
def images():
    return torch.as_tensor(stream(22, "imgs").uniform(-1, 1, (6, 3, 16, 16)),
                           dtype=torch.float32)


def test_slerp_endpoints_and_norm_preservation():
    gen = stream(0, "slerp")
    a = torch.as_tensor(gen.standard_normal(32))
    b = torch.as_tensor(gen.standard_normal(32))
    b = b / b.norm() * a.norm()  # equal norms
    assert torch.allclose(slerp(a, b, 0.0), a, atol=1e-6)
    assert torch.allclose(slerp(a, b, 1.0), b, atol=1e-6)
    for lam in (0.25, 0.5, 0.75):
        out = slerp(a, b, lam)
        assert abs(out.norm() - a.norm()) < 1e-5


def test_slerp_parallel_falls_back_to_lerp():
    a = torch.ones(8)
    out = slerp(a, 2.0 * a, 0.5)
    assert torch.allclose(out, 1.5 * a, atol=1e-6)


def test_slerp_rejects_degenerate_vectors():
    a = torch.ones(4)
    with pytest.raises(ValueError):
        slerp(a, -a, 0.5)
    with pytest.raises(ValueError):
        slerp(a, torch.zeros(4), 0.5)


def test_lerp_endpoints():
    a, b = torch.zeros(3), torch.ones(3)
    assert torch.equal(lerp(a, b, 0.0), a)
    assert torch.equal(lerp(a, b, 1.0), b)


def test_reconstruct_shapes_and_range(model, images):
    recon, variations = reconstruct(images[:2], model, n_variations=2,
                                    rng=stream(1, "rec"), n_steps=8)
    assert recon.shape == (2, 3, 16, 16)
    assert len(variations) == 2
    assert recon.min() >= -1 and recon.max() <= 1
    for v in variations:
        assert v.min() >= -1 and v.max() <= 1


def test_reconstruct_zero_variations(model, images):
    recon, variations = reconstruct(images[:1], model, n_variations=0,
                                    rng=stream(2, "rec"), n_steps=8)
    assert variations == []
    assert recon.shape == (1, 3, 16, 16)


def test_manipulate_empty_edit_equals_reconstruction(model, images):
    x0 = images[:1]
    edited = manipulate(x0, [], model, mode="ddim", n_steps=8)
    with torch.no_grad():
        s = model.activation(x0)
    steps = uniform_steps(model.sched.T, 8)
    recon = ddim_generate(ddim_invert(x0, s, model, steps), s, model, steps)
    assert torch.equal(edited, recon)


def test_manipulate_validates(model, images):
    with pytest.raises(ValueError):
        manipulate(images[:1], [(99, 1.0)], model, n_steps=4)
    with pytest.raises(ValueError):
        manipulate(images[:1], [(0, -1.0)], model, n_steps=4)
    with pytest.raises(ValueError):
        manipulate(images[:1], [(0, 1.0)], model, mode="ancestral", n_steps=4)
    with pytest.raises(ValueError):
        manipulate(images[:1], [(0, 1.0)], model, mode="warp", n_steps=4)


def test_manipulate_ancestral_mode_runs(model, images):
    out = manipulate(images[:1], [(0, 2.0)], model, mode="ancestral",
                     rng=stream(3, "anc"))
    assert out.shape == (1, 3, 16, 16)


def test_interpolate_endpoints_are_reconstructions(model, images):
    frames = interpolate(images[0], images[1], 4, model, n_steps=8)
    assert frames.shape == (4, 3, 16, 16)
    recon_a, _ = reconstruct(images[:1], model, 0, stream(4, "r"), n_steps=8)
    recon_b, _ = reconstruct(images[1:2], model, 0, stream(5, "r"), n_steps=8)
    assert torch.allclose(frames[0], recon_a[0], atol=1e-5)
    assert torch.allclose(frames[-1], recon_b[0], atol=1e-5)


def test_interpolate_needs_two_frames(model, images):
    with pytest.raises(ValueError):
        interpolate(images[0], images[1], 1, model)


def test_extrapolate_sweep_contract(model, images):
    frames = extrapolate_sweep(images[:2], 1, [0.0, 1.0, 3.0], model, n_steps=6)
    assert len(frames) == 3
    for f in frames:
        assert f.shape == (2, 3, 16, 16)
        assert torch.isfinite(f).all()
        assert f.min() >= -1 and f.max() <= 1
    with pytest.raises(ValueError):
        extrapolate_sweep(images[:1], 1, [1.0, 0.5], model)  # unsorted
    with pytest.raises(ValueError):
        extrapolate_sweep(images[:1], 1, [0.0, 5.0], model)  # out of range
    # override flag permits the paper-range excursion
    frames = extrapolate_sweep(images[:1], 1, [0.0, 5.0], model, n_steps=4,
                               allow_out_of_range=True)
    assert len(frames) == 2


def test_extrapolate_current_value_is_reconstruction(model, images):
    x0 = images[:1]
    with torch.no_grad():
        s = model.activation(x0)
    current = float(s[0, 2])
    frames = extrapolate_sweep(x0, 2, [current], model, n_steps=8)
    recon = manipulate(x0, [], model, mode="ddim", n_steps=8)
    assert torch.allclose(frames[0], recon, atol=1e-6)


def test_visualize_prototype_noop_amplification(model, images):
    # reference set = {base}: the cap equals the base score, so the edit
    # changes nothing and the render equals the plain reconstruction
    x0 = images[:1]
    card = visualize_prototype(1, x0, model, x0[0], n_steps=8)
    recon = manipulate(x0, [], model, mode="ddim", n_steps=8)
    assert torch.equal(card.image, recon[0])
    assert card.cap == pytest.approx(card.base_similarity)


def test_visualize_prototype_card_geometry(model, images):
    card = visualize_prototype(2, images, model, images[0], n_steps=8)
    top, left, h, w = card.patch_rect
    assert 0 <= top and top + h <= 16
    assert 0 <= left and left + w <= 16
    # rectangle must be exactly the receptive field of the argmin location
    with torch.no_grad():
        _, locs = model.activation_with_locs(card.image.unsqueeze(0))
    assert card.patch_rect == receptive_field(tuple(locs[0, 2]), model.encoder.cfg)


def test_visualize_prototype_validates(model, images):
    with pytest.raises(ValueError):
        visualize_prototype(99, images, model, images[0])
    with pytest.raises(ValueError):
        visualize_prototype(0, images[:0], model, images[0])


def test_model_parameters_untouched_by_edits(model, images):
    before = {k: v.clone() for k, v in model.encoder.state_dict().items()}
    bank_before = model.bank.detach().clone()
    manipulate(images[:1], [(0, 2.0)], model, mode="ddim", n_steps=4)
    visualize_prototype(0, images, model, images[0], n_steps=4)
    extrapolate_sweep(images[:1], 0, [0.5], model, n_steps=4)
    assert torch.equal(model.bank.detach(), bank_before)
    for k, v in model.encoder.state_dict().items():
        assert torch.equal(v, before[k])


def test_trace_telescoping_identity(model, images):
    x_T = torch.as_tensor(stream(6, "xT").standard_normal((1, 3, 16, 16)),
                          dtype=torch.float32)
    with torch.no_grad():
        s = model.activation(images[:1])
    tr = trace_emergence(model, s, x_T, record_every=2, n_steps=10)
    total = tr.interval_deltas().sum(axis=1)
    direct = tr.scores[:, -1] - tr.scores[:, 0]
    assert np.allclose(total, direct, atol=1e-9)


def test_trace_pair_records_delta(model, images):
    x_T = torch.as_tensor(stream(7, "xT").standard_normal((1, 3, 16, 16)),
                          dtype=torch.float32)
    with torch.no_grad():
        s = model.activation(images[:1])
    s_enh = s.clone()
    s_enh[:, 0] = 3.0
    tr = trace_emergence(model, s, x_T, record_every=2, s_enhanced=s_enh,
                         n_steps=10)
    assert tr.deltas is not None
    assert tr.deltas.shape == tr.scores.shape
    assert np.array_equal(tr.deltas, tr.enhanced_scores - tr.scores)
    assert "emerged" in tr.summary


def test_trace_noise_start_has_low_spread(model):
    # at t = T the x0 estimate of pure noise gives near-baseline scores
    # with limited spread across prototypes
    gen = stream(8, "noise")
    spreads = []
    for k in range(4):
        x_T = torch.as_tensor(gen.standard_normal((1, 3, 16, 16)),
                              dtype=torch.float32)
        s = torch.as_tensor(gen.random((1, model.m)), dtype=torch.float32)
        tr = trace_emergence(model, s, x_T, record_every=model.sched.T,
                             n_steps=10)
        first_col = tr.scores[:, 0]
        spreads.append(first_col.std())
    assert np.mean(spreads) < 1.0


def test_trace_csv_roundtrip(tmp_path, model, images):
    x_T = torch.as_tensor(stream(9, "xT").standard_normal((1, 3, 16, 16)),
                          dtype=torch.float32)
    with torch.no_grad():
        s = model.activation(images[:1])
    tr = trace_emergence(model, s, x_T, record_every=4, n_steps=8)
    path = tmp_path / "trace.csv"
    tr.write_csv(path)
    lines = path.read_text().strip().splitlines()
    header = lines[0].split(",")
    assert header[0] == "prototype_index"
    assert len(header) == 1 + len(tr.timesteps)
    assert len(lines) == 1 + model.m
    with pytest.raises(ValueError):
        tr.write_csv(path, which="delta")  # no pair data recorded


def test_emergence_trace_summary_structure():
    scores = np.array([[0.0, 0.0, 0.5, 1.0], [0.0, 0.0, 0.0, 0.1]])
    tr = EmergenceTrace(timesteps=[40, 30, 20, 10], scores=scores)
    summary = interpret._emergence_summary(tr, 40)
    assert summary["emerged"]
    assert summary["first_emergence_timestep"] == 20
    assert summary["after_first_20pct"]
