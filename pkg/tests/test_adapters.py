import numpy as np
import pytest
import torch

from fairylab.adapters import (AdapterBank, AdapterContext, AdapterError, LowRankAdapter, TokenMask, adapter_delta,
                               dora_forward, dora_weight, downsample_mask, dropout_B, lora_forward,
                               masked_adapter_forward)
from fairylab.archive import ArchiveError


def _lora(W, A, B, **kw):
    return LowRankAdapter("s", A, B, **kw)


def _dora(W, A, B, g=None, **kw):
    g = W.norm(dim=0).clone() if g is None else g
    return LowRankAdapter("s", A, B, variant="dora", magnitude=g, **kw)


def test_lora_hand_example():
    W = torch.eye(2, dtype=torch.float64)
    A = torch.tensor([[1.0], [0.0]], dtype=torch.float64)
    B = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
    y = lora_forward(W, _lora(W, A, B), torch.tensor([3.0, 4.0], dtype=torch.float64))
    assert y.tolist() == [7.0, 4.0]


def test_lora_zero_adapter_is_identity():
    g = torch.Generator().manual_seed(0)
    W = torch.randn(6, 5, generator=g)
    x = torch.randn(4, 5, generator=g)
    a = LowRankAdapter.create("s", W, 2, generator=g)
    assert torch.equal(lora_forward(W, a, x), torch.nn.functional.linear(x, W))


def test_rank_bound_of_product():
    g = torch.Generator().manual_seed(1)
    for l in (1, 2, 3):
        A, B = torch.randn(8, l, generator=g), torch.randn(l, 7, generator=g)
        assert torch.linalg.matrix_rank(A @ B) <= l


def test_shape_errors():
    W = torch.randn(4, 3)
    with pytest.raises(AdapterError):
        LowRankAdapter("s", torch.zeros(4, 2), torch.zeros(1, 3))
    with pytest.raises(AdapterError):
        LowRankAdapter("s", torch.zeros(4, 3), torch.zeros(3, 3))  # rank not below min(m, n)
    a = LowRankAdapter("s", torch.zeros(4, 1), torch.zeros(1, 3))
    with pytest.raises(AdapterError):
        lora_forward(W, a, torch.randn(2, 5))


def test_dora_identity_init():
    g = torch.Generator().manual_seed(2)
    W = torch.randn(12, 9, generator=g, dtype=torch.float64)
    x = torch.randn(5, 9, generator=g, dtype=torch.float64)
    a = LowRankAdapter.create("s", W, 3, variant="dora", generator=g)
    ref = x @ W.T
    out = dora_forward(W, a, x)
    assert (out - ref).norm() / ref.norm() <= 1e-6


def test_dora_magnitude_doubling():
    g = torch.Generator().manual_seed(3)
    W = torch.randn(6, 5, generator=g, dtype=torch.float64)
    A, B = torch.randn(6, 2, generator=g, dtype=torch.float64), torch.randn(2, 5, generator=g, dtype=torch.float64)
    x = torch.randn(3, 5, generator=g, dtype=torch.float64)
    mag = torch.rand(5, generator=g, dtype=torch.float64) + 0.5
    y1 = dora_forward(W, _dora(W, A, B, mag), x)
    y2 = dora_forward(W, _dora(W, A, B, 2 * mag), x)
    assert torch.allclose(y2, 2 * y1, rtol=0, atol=1e-12)


def test_dora_matches_straight_line_oracle():
    rng = np.random.default_rng(4)
    W, A, B = rng.normal(size=(5, 4)), rng.normal(size=(5, 2)), rng.normal(size=(2, 4))
    g, x = rng.random(4) + 0.1, rng.normal(size=4)
    # normalise each input column of W + AB, scale by g, multiply
    V = W + A @ B
    y_ref = np.zeros(5)
    for j in range(4):
        col = V[:, j] / np.sqrt(np.sum(V[:, j] ** 2))
        y_ref += g[j] * col * x[j]
    t = lambda a: torch.tensor(a, dtype=torch.float64)
    y = dora_forward(t(W), _dora(t(W), t(A), t(B), t(g)), t(x))
    assert np.allclose(y.numpy(), y_ref, rtol=1e-12, atol=1e-12)


def test_dora_zero_norm_column():
    W = torch.zeros(3, 3, dtype=torch.float64)
    W[:, 0] = 1.0
    a = LowRankAdapter("s", torch.zeros(3, 1, dtype=torch.float64), torch.zeros(1, 3, dtype=torch.float64),
                       variant="dora", magnitude=torch.ones(3, dtype=torch.float64))
    with pytest.raises(AdapterError, match="zero-norm"):
        dora_weight(W, a)
    a.dora_eps = 1e-8
    assert torch.isfinite(dora_weight(W, a)).all()


def test_dropout_expectation():
    g = torch.Generator().manual_seed(5)
    B = torch.randn(3, 4, generator=g, dtype=torch.float64)
    for p in (0.1, 0.3):
        n = 100_000
        acc = torch.zeros_like(B)
        for _ in range(n):
            acc += dropout_B(B, p, g)
        rel = ((acc / n - B) / B).abs().max()
        assert rel < 0.01, (p, float(rel))
        draws = torch.stack([dropout_B(B, p, g) for _ in range(200)])
        assert set(torch.unique(draws / B).round(decimals=9).tolist()) <= {0.0, round(1 / (1 - p), 9)}


def test_dropout_zero_is_identity():
    B = torch.randn(2, 3)
    assert dropout_B(B, 0.0) is B


def test_mask_partition_float64():
    g = torch.Generator().manual_seed(6)
    W = torch.randn(7, 6, generator=g, dtype=torch.float64)
    x = torch.randn(2, 16, 6, generator=g, dtype=torch.float64)
    for variant in ("lora", "dora"):
        a = LowRankAdapter.create("s", W, 3, variant=variant, generator=g)
        a.A = torch.randn(7, 3, generator=g, dtype=torch.float64)
        m = TokenMask((torch.rand(16, generator=g) < 0.4).to(torch.float64), (4, 4))
        base = x @ W.T
        tr = masked_adapter_forward(W, a, x, m, "train") - base
        inf = masked_adapter_forward(W, a, x, m, "infer") - base
        full = adapter_delta(W, a, x)
        if variant == "lora":
            assert torch.allclose(tr + inf, full, rtol=0, atol=1e-12)
        # exactly one phase contributes per token
        on = m.values.bool()
        assert torch.all(tr[:, ~on] == 0) and torch.all(inf[:, on] == 0)
        assert torch.allclose(tr[:, on], full[:, on], atol=1e-12)
        assert torch.allclose(inf[:, ~on], full[:, ~on], atol=1e-12)


def test_mask_extremes():
    g = torch.Generator().manual_seed(7)
    W = torch.randn(5, 4, generator=g)
    a = LowRankAdapter("s", torch.randn(5, 2, generator=g), torch.randn(2, 4, generator=g))
    x = torch.randn(4, 4, generator=g)
    ones, zeros = TokenMask(torch.ones(4), (2, 2)), TokenMask(torch.zeros(4), (2, 2))
    assert torch.equal(masked_adapter_forward(W, a, x, ones, "train"), lora_forward(W, a, x))
    assert torch.equal(masked_adapter_forward(W, a, x, zeros, "train"), x @ W.T)
    with pytest.raises(AdapterError):
        masked_adapter_forward(W, a, x, TokenMask(torch.ones(9), (3, 3)), "train")
    with pytest.raises(AdapterError):
        masked_adapter_forward(W, a, x, ones, "train", token_wise=False)
    with pytest.raises(AdapterError):
        masked_adapter_forward(W, a, x, ones, "sample")


def test_downsample_mask_rules():
    assert torch.equal(downsample_mask(np.ones((8, 8)), (4, 4)).values, torch.ones(16))
    m = np.zeros((8, 8))
    m[0, :2] = 1  # exactly half of the top-left 2x2 block
    tm = downsample_mask(m, (4, 4)).values
    assert tm[0] == 1 and tm[1:].sum() == 0
    m[0, 1] = 0  # a quarter
    assert downsample_mask(m, (4, 4)).values[0] == 0
    with pytest.raises(AdapterError):
        downsample_mask(np.ones((10, 10)), (4, 4))


def test_downsample_mask_brute_force():
    rng = np.random.default_rng(8)
    for _ in range(50):
        H = int(rng.choice([8, 16, 32]))
        h = int(rng.choice([d for d in (1, 2, 4, 8) if H % d == 0]))
        m = (rng.random((H, H)) < rng.random()).astype(np.uint8)
        k = H // h
        ref = []
        for i in range(h):
            for j in range(h):
                count = sum(int(m[i * k + a, j * k + b]) for a in range(k) for b in range(k))
                ref.append(1.0 if 2 * count >= k * k else 0.0)
        assert downsample_mask(m, (h, h)).values.tolist() == ref


def test_token_mask_must_be_binary():
    with pytest.raises(AdapterError):
        TokenMask(torch.tensor([0.0, 0.5, 1.0, 1.0]), (2, 2))


def _two_role_bank():
    g = torch.Generator().manual_seed(9)
    W = torch.randn(6, 5, generator=g)
    ident = LowRankAdapter.create("site.a", W, 2, dropout_p=0.1, generator=g)
    ident.A = torch.randn(6, 2, generator=g)
    bank = AdapterBank()
    bank.add(ident, "identity")
    bank.add(LowRankAdapter("site.a", ident.A, torch.randn(2, 5, generator=g), dropout_p=0.1), "motion")
    bank.add(LowRankAdapter.create("site.b", W, 3, variant="dora", masked=True, generator=g), "style")
    return bank


def test_bank_round_trip_and_aliasing(tmp_path):
    bank = _two_role_bank()
    bank.save(tmp_path / "bank")
    loaded = AdapterBank.load(tmp_path / "bank")
    for k, t in bank.named_tensors().items():
        assert torch.equal(loaded.named_tensors()[k], t)
    ida, mo = loaded.get("site.a", "identity"), loaded.get("site.a", "motion")
    assert ida.A is mo.A
    ida.A[0, 0] += 1.0
    assert mo.A[0, 0] == ida.A[0, 0]
    st = loaded.get("site.b", "style")
    assert st.variant == "dora" and st.masked and torch.equal(st.magnitude, bank.get("site.b", "style").magnitude)


def test_bank_truncated_archive(tmp_path):
    _two_role_bank().save(tmp_path / "bank")
    blob = (tmp_path / "bank" / "tensors.bin").read_bytes()
    (tmp_path / "bank" / "tensors.bin").write_bytes(blob[: len(blob) // 2])
    with pytest.raises(ArchiveError):
        AdapterBank.load(tmp_path / "bank")


def test_bank_version_and_dangling_reference(tmp_path):
    import json

    _two_role_bank().save(tmp_path / "bank")
    path = tmp_path / "bank" / "adapters.json"
    doc = json.loads(path.read_text())
    doc["adapters"][1]["shared_A_key"] = "nope/identity/A"
    path.write_text(json.dumps(doc))
    with pytest.raises(ArchiveError, match="dangling"):
        AdapterBank.load(tmp_path / "bank")
    doc["version"] = 99
    path.write_text(json.dumps(doc))
    with pytest.raises(ArchiveError, match="version"):
        AdapterBank.load(tmp_path / "bank")


def test_bank_clone_keeps_aliasing_and_is_independent():
    bank = _two_role_bank()
    twin = bank.clone()
    assert twin.get("site.a", "identity").A is twin.get("site.a", "motion").A
    twin.get("site.a", "motion").B.add_(1.0)
    assert not torch.equal(twin.get("site.a", "motion").B, bank.get("site.a", "motion").B)


def test_bank_rules():
    bank = _two_role_bank()
    W = torch.randn(6, 5)
    with pytest.raises(AdapterError):
        bank.add(LowRankAdapter.create("site.b", W, 2), "style")
    with pytest.raises(AdapterError):
        bank.add(LowRankAdapter.create("site.a", W, 2), "motion")  # must share A_id
    with pytest.raises(AdapterError):
        bank.add(LowRankAdapter.create("site.c", W, 2), "texture")


def test_base_path_purity_when_disabled(tiny_image_model):
    from conftest import randomize

    model = randomize(tiny_image_model)
    x = torch.randn(2, 3, 8, 8)
    t = torch.tensor([3, 7])
    c = torch.zeros(2, 10, dtype=torch.long)
    ref = model(x, t, c)
    bank = AdapterBank()
    g = torch.Generator().manual_seed(0)
    for sid, site in model.sites().items():
        a = LowRankAdapter.create(sid, site.weight.detach(), 2, generator=g)
        a.A = torch.randn_like(a.A)
        bank.add(a, "style")
    model.install(bank)
    assert not torch.equal(model(x, t, c), ref)
    bank.set_enabled(enabled=False)
    assert torch.equal(model(x, t, c), ref)
    model.install(None)
    assert torch.equal(model(x, t, c), ref)


def test_masked_adapter_needs_token_site(tiny_image_model):
    W = tiny_image_model.sites()["time_mlp.in"].weight.detach()
    bank = AdapterBank()
    bank.add(LowRankAdapter.create("time_mlp.in", W, 2, masked=True), "style")
    with pytest.raises(AdapterError, match="token-wise"):
        tiny_image_model.install(bank)


def test_masked_adapter_needs_mask_at_forward(tiny_image_model):
    site = tiny_image_model.sites()["head"]
    bank = AdapterBank()
    bank.add(LowRankAdapter.create("head", site.weight.detach(), 2, masked=True), "style")
    tiny_image_model.install(bank)
    with pytest.raises(AdapterError, match="token mask"):
        tiny_image_model(torch.zeros(1, 3, 8, 8), torch.tensor([1]), torch.zeros(1, 10, dtype=torch.long),
                         ctx=AdapterContext())
