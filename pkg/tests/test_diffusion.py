import json

import numpy as np
import pytest
import torch

from conftest import TINY_T, randomize, tiny_clip_spec, tiny_image_spec
from fairylab.adapters import AdapterBank, AdapterContext, LowRankAdapter
from fairylab.archive import checksum
from fairylab.diffusion import (Checkpoint, Denoiser, Example, FitConfig, NoiseSchedule, NonFiniteLossError, fit,
                                forward_diffuse, sample, training_loss)
from fairylab.diffusion.train import loss_decreased
from fairylab.timesteps import TimestepSampler


# ---------------------------------------------------------------- schedule and forward process

def test_schedule_shape_and_monotone():
    s = NoiseSchedule()
    assert s.T == 200 and s.betas.shape == (201,)
    assert s.alpha_bars[0] == 1.0
    assert torch.all(s.alpha_bars[1:] < s.alpha_bars[:-1])
    assert s.alpha_bars[1] > 0.99
    r = NoiseSchedule.rescaled(200)
    assert r.alpha_bars[1] > 0.99 and r.alpha_bars[-1] < 1e-4 < s.alpha_bars[-1]
    np.testing.assert_allclose(r.betas[1:].numpy(), np.linspace(5e-4, 0.1, 200), rtol=1e-12)


def test_schedule_round_trip():
    r = NoiseSchedule.rescaled(50)
    assert torch.equal(NoiseSchedule.from_dict(r.to_dict()).alpha_bars, r.alpha_bars)


def test_forward_diffuse_limits():
    g = torch.Generator().manual_seed(0)
    z, eps = torch.randn(4, 3, 8, 8, generator=g), torch.randn(4, 3, 8, 8, generator=g)
    s = NoiseSchedule()
    assert torch.equal(forward_diffuse(z, 0, eps, s, allow_zero=True), z)
    dead = NoiseSchedule(T=200, beta_start=0.5, beta_end=0.9)
    assert dead.alpha_bars[-1] < 1e-30
    assert torch.allclose(forward_diffuse(z, 200, eps, dead), eps, atol=1e-12)


def test_forward_diffuse_errors():
    s = NoiseSchedule()
    z = torch.zeros(2, 3, 4, 4)
    with pytest.raises(ValueError, match="shape"):
        forward_diffuse(z, 5, torch.zeros(2, 3, 4, 5), s)
    for bad in (0, 201, torch.tensor([1, 300])):
        with pytest.raises(ValueError, match="out of range"):
            forward_diffuse(z, bad, torch.zeros_like(z), s)


@pytest.mark.parametrize("t", [1, 50, 120, 200])
def test_forward_diffuse_variance_monte_carlo(t):
    s = NoiseSchedule()
    g = torch.Generator().manual_seed(t)
    n = 10_000
    eps = torch.randn(n, 1, 1, 1, generator=g, dtype=torch.float64)
    zt = forward_diffuse(torch.zeros_like(eps), torch.full((n,), t), eps, s)
    assert torch.equal(zt, (1 - s.alpha_bars[t]).sqrt() * eps)
    target = float(1 - s.alpha_bars[t])
    sd = target * (2 / (n - 1)) ** 0.5
    assert abs(float(zt.var()) - target) < 3 * sd


# ---------------------------------------------------------------- loss

class _Wired(torch.nn.Module):
    def __init__(self, eps, k):
        super().__init__()
        self.eps, self.k = eps, k

    def forward(self, x_t, t, c, first=None, ctx=None):
        return self.eps + self.k


@pytest.mark.parametrize("k", [0.0, 0.5, -1.25])
def test_loss_constant_offset(k):
    g = torch.Generator().manual_seed(1)
    z, eps = torch.randn(3, 3, 8, 8, generator=g), torch.randn(3, 3, 8, 8, generator=g)
    loss = training_loss(_Wired(eps, k), z, None, torch.tensor([1, 5, 9]), eps, NoiseSchedule(T=10))
    assert float(loss) == pytest.approx(k * k, abs=1e-12)


def test_loss_matches_straight_line_oracle(tiny_image_model, tiny_schedule):
    model = randomize(tiny_image_model.double())
    g = torch.Generator().manual_seed(2)
    z = torch.rand(4, 3, 8, 8, generator=g, dtype=torch.float64) * 2 - 1
    eps = torch.randn(z.shape, generator=g, dtype=torch.float64)
    t = torch.tensor([1, 4, 11, 20])
    c = torch.randint(1, 30, (4, 10), generator=g)
    loss = training_loss(model, z, c, t, eps, tiny_schedule)
    # independent forward process from numpy cumulative products
    k = 1000 / TINY_T
    betas = np.concatenate([[0.0], np.linspace(1e-4 * k, min(0.02 * k, 0.999), TINY_T)])
    ab = np.cumprod(1 - betas)[t.numpy()][:, None, None, None]
    zt = np.sqrt(ab) * z.numpy() + np.sqrt(1 - ab) * eps.numpy()
    with torch.no_grad():
        pred = model(torch.from_numpy(zt), t, c).numpy()
    ref = np.mean((eps.numpy() - pred) ** 2)
    assert loss.item() == pytest.approx(ref, rel=1e-10)


def test_preconditioning_matches_closed_form(tiny_image_model, tiny_schedule):
    """With the residual network zeroed the prediction is the linear noise estimate."""
    model = tiny_image_model.double()
    x = torch.randn(2, 3, 8, 8, dtype=torch.float64)
    t = torch.tensor([3, 17])
    out = model(x, t, torch.zeros(2, 10, dtype=torch.long))  # head is zero at init
    ab = tiny_schedule.alpha_bars[t].reshape(-1, 1, 1, 1)
    expected = (1 - ab).sqrt() / (0.25 * ab + 1 - ab) * x
    assert torch.allclose(out, expected, atol=1e-12)
    plain = Denoiser(tiny_image_spec(data_std=None), tiny_schedule).double()
    assert torch.all(plain(x, t, torch.zeros(2, 10, dtype=torch.long)) == 0)


# ---------------------------------------------------------------- gradient check

def _directional_check(loss_fn, params, n_dirs=20, h=1e-6, seed=0):
    g = torch.Generator().manual_seed(seed)
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params)
    worst = 0.0
    for _ in range(n_dirs):
        dirs = [torch.randn(p.shape, generator=g, dtype=torch.float64) for p in params]
        norm = torch.sqrt(sum((d ** 2).sum() for d in dirs))
        dirs = [d / norm for d in dirs]
        analytic = float(sum((gr * d).sum() for gr, d in zip(grads, dirs)))
        with torch.no_grad():
            for p, d in zip(params, dirs):
                p.add_(h * d)
            up = float(loss_fn())
            for p, d in zip(params, dirs):
                p.sub_(2 * h * d)
            down = float(loss_fn())
            for p, d in zip(params, dirs):
                p.add_(h * d)
        numeric = (up - down) / (2 * h)
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12))
    return worst


def _fixed_batch(spec, seed=3):
    g = torch.Generator().manual_seed(seed)
    shape = (3, 3, spec.size, spec.size) if spec.kind == "image" else (3, spec.frames, 3, spec.size, spec.size)
    z = torch.rand(shape, generator=g, dtype=torch.float64) * 2 - 1
    eps = torch.randn(shape, generator=g, dtype=torch.float64)
    t = torch.tensor([2, 9, 18])
    c = torch.randint(1, 30, (3, 10), generator=g)
    return z, eps, t, c


def test_gradient_check_base_parameters(tiny_schedule):
    torch.manual_seed(0)
    model = randomize(Denoiser(tiny_image_spec(), tiny_schedule).double(), seed=4)
    params = list(model.parameters())
    assert sum(p.numel() for p in params) <= 2000
    z, eps, t, c = _fixed_batch(model.spec)
    worst = _directional_check(lambda: training_loss(model, z, c, t, eps, tiny_schedule), params)
    assert worst < 1e-4, worst


def test_gradient_check_masked_dora_factors(tiny_schedule):
    torch.manual_seed(0)
    model = randomize(Denoiser(tiny_image_spec(), tiny_schedule).double(), seed=5)
    g = torch.Generator().manual_seed(6)
    bank = AdapterBank()
    for sid in model.token_sites():
        W = model.sites()[sid].weight.detach()
        a = LowRankAdapter.create(sid, W, 2, variant="dora", masked=True, generator=g)
        a.A = torch.randn(a.A.shape, generator=g, dtype=torch.float64) * 0.3
        a.B = a.B.double()
        bank.add(a, "style")
    model.install(bank)
    params = list(bank.named_tensors().values())
    for p in params:
        p.requires_grad_(True)
    z, eps, t, c = _fixed_batch(model.spec)
    mask = (torch.rand(3, 16, generator=g) < 0.5).to(torch.float64)
    ctx = AdapterContext(token_mask=mask, phase="train")
    worst = _directional_check(lambda: training_loss(model, z, c, t, eps, tiny_schedule, ctx=ctx), params)
    assert worst < 1e-4, worst


def test_gradient_check_clip_model(tiny_schedule):
    torch.manual_seed(0)
    model = randomize(Denoiser(tiny_clip_spec(), tiny_schedule).double(), seed=7)
    params = list(model.parameters())
    assert sum(p.numel() for p in params) <= 2000
    z, eps, t, c = _fixed_batch(model.spec)
    worst = _directional_check(lambda: training_loss(model, z, c, t, eps, tiny_schedule, first_frame=z[:, 0]),
                               params)
    assert worst < 1e-4, worst


# ---------------------------------------------------------------- sampling

def _cond(n):
    return torch.randint(1, 30, (n, 10), generator=torch.Generator().manual_seed(11))


def test_sampling_deterministic(tiny_image_model, tiny_schedule):
    model = randomize(tiny_image_model, scale=0.1)
    a = sample(model, _cond(2), tiny_schedule, torch.Generator().manual_seed(5))
    b = sample(model, _cond(2), tiny_schedule, torch.Generator().manual_seed(5))
    assert torch.equal(a, b) and a.abs().max() <= 1


def test_inpaint_all_ones_returns_reference(tiny_image_model, tiny_schedule):
    model = randomize(tiny_image_model, scale=0.1)
    ref = torch.rand(2, 3, 8, 8) * 2 - 1
    out = sample(model, _cond(2), tiny_schedule, torch.Generator().manual_seed(5), inpaint_ref=ref,
                 inpaint_mask=torch.ones(2, 8, 8))
    assert torch.equal(out, ref)


def test_inpaint_all_zeros_is_unconditional(tiny_image_model, tiny_schedule):
    model = randomize(tiny_image_model, scale=0.1)
    ref = torch.rand(2, 3, 8, 8) * 2 - 1
    free = sample(model, _cond(2), tiny_schedule, torch.Generator().manual_seed(5))
    out = sample(model, _cond(2), tiny_schedule, torch.Generator().manual_seed(5), inpaint_ref=ref,
                 inpaint_mask=torch.zeros(2, 8, 8))
    assert torch.equal(out, free)


def test_partial_inpaint_preserves_known_region(tiny_image_model, tiny_schedule):
    model = randomize(tiny_image_model, scale=0.1)
    ref = torch.rand(1, 3, 8, 8) * 2 - 1
    mask = torch.zeros(1, 8, 8)
    mask[:, 2:6, 3:7] = 1
    out = sample(model, _cond(1), tiny_schedule, torch.Generator().manual_seed(5), inpaint_ref=ref,
                 inpaint_mask=mask)
    known = mask.bool()[:, None].expand_as(ref)
    assert torch.equal(out[known], ref[known])
    assert not torch.equal(out[~known], ref[~known])


def test_clip_sampling_first_frame_and_length(tiny_clip_model, tiny_schedule):
    model = randomize(tiny_clip_model, scale=0.1)
    first = torch.rand(2, 3, 8, 8) * 2 - 1
    out = sample(model, _cond(2), tiny_schedule, torch.Generator().manual_seed(1), first_frame=first, frames=3)
    assert out.shape == (2, 3, 3, 8, 8) and torch.equal(out[:, 0], first)
    with pytest.raises(ValueError):
        sample(model, _cond(2), tiny_schedule, torch.Generator().manual_seed(1), first_frame=first, frames=9)
    with pytest.raises(ValueError):
        sample(model, _cond(2), tiny_schedule, torch.Generator().manual_seed(1))


# ---------------------------------------------------------------- training loop

def _clip_example(seed=0):
    from fairylab.corpus import generate_motion_clip, random_style
    from fairylab.frames import image_to_tensor

    clip = generate_motion_clip(random_style(0, 0), "walk-cycle", 4, (32, 32), rng_seed=seed)
    small = clip.images().reshape(4, 8, 4, 8, 4, 3).mean(axis=(2, 4))  # 4x4 block average to 8x8
    x0 = torch.stack([image_to_tensor(f) for f in small])
    return Example(x0, torch.tensor([22, 1] + [0] * 8))


def test_fit_empty_trainable_changes_nothing(tiny_clip_model, tiny_schedule):
    before = {k: checksum(v) for k, v in tiny_clip_model.state_dict().items()}
    ckpt = fit(tiny_clip_model, [_clip_example()], TimestepSampler.uniform(TINY_T), [], 5,
               FitConfig(batch_size=2), schedule=tiny_schedule)
    assert {k: checksum(v) for k, v in tiny_clip_model.state_dict().items()} == before
    assert len(ckpt.loss_history) == 5 and ckpt.optimizer is None


def test_fit_loss_decreases_on_one_clip(tiny_clip_model, tiny_schedule):
    ckpt = fit(tiny_clip_model, [_clip_example()], TimestepSampler.uniform(TINY_T), "base", 200,
               FitConfig(lr=3e-3, batch_size=4), schedule=tiny_schedule)
    h = ckpt.loss_history
    assert np.median(h[-20:]) < np.median(h[:20])
    assert loss_decreased(h)


def test_fit_resume_is_seamless(tmp_path, tiny_schedule):
    data = [_clip_example(0), _clip_example(1)]
    sampler = TimestepSampler.uniform(TINY_T)
    cfg = FitConfig(lr=3e-3, batch_size=2, seed=4)
    torch.manual_seed(0)
    full = fit(Denoiser(tiny_clip_spec(), tiny_schedule), data, sampler, "base", 12, cfg, schedule=tiny_schedule)
    torch.manual_seed(0)
    fit(Denoiser(tiny_clip_spec(), tiny_schedule), data, sampler, "base", 7, cfg, schedule=tiny_schedule,
        checkpoint_dir=tmp_path / "ck")
    part = Checkpoint.load(tmp_path / "ck")
    resumed = fit(part.build_model(), data, sampler, "base", 5, cfg, schedule=tiny_schedule, resume=part)
    assert resumed.loss_history == full.loss_history
    assert resumed.step == 12
    for k, v in full.weights.items():
        assert torch.equal(resumed.weights[k], v)


def test_fit_nan_aborts_with_dump(tmp_path, tiny_clip_model, tiny_schedule):
    with torch.no_grad():
        tiny_clip_model.pos.fill_(float("nan"))
    with pytest.raises(NonFiniteLossError) as info:
        fit(tiny_clip_model, [_clip_example()], TimestepSampler.uniform(TINY_T), "base", 3, FitConfig(batch_size=2),
            schedule=tiny_schedule, checkpoint_dir=tmp_path)
    assert info.value.diagnostics["step"] == 0
    assert "t" in json.loads((tmp_path / "nan_dump.json").read_text())


def test_fit_rejects_mismatched_sampler(tiny_clip_model, tiny_schedule):
    with pytest.raises(ValueError, match="disagree"):
        fit(tiny_clip_model, [_clip_example()], TimestepSampler.uniform(TINY_T + 1), "base", 1,
            schedule=tiny_schedule)


def test_checkpoint_round_trip(tmp_path, tiny_image_model, tiny_schedule):
    model = randomize(tiny_image_model, scale=0.1)
    ckpt = Checkpoint(model.spec, tiny_schedule, {k: v.clone() for k, v in model.state_dict().items()}, step=3,
                      loss_history=[1.0, 0.5])
    ckpt.save(tmp_path)
    back = Checkpoint.load(tmp_path)
    assert back.spec == model.spec and back.schedule.to_dict() == tiny_schedule.to_dict()
    x = torch.rand(1, 3, 8, 8)
    t, c = torch.tensor([4]), _cond(1)
    assert torch.equal(back.build_model()(x, t, c), model(x, t, c))
