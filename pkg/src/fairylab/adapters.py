"""Low-rank adapter algebra: LoRA, DoRA, dropout-masked factors and the
token-masked propagation adapter.

Shape convention follows ``y = W x + A B x`` with ``W`` of shape (m, n),
``A`` (m, l) and ``B`` (l, n). Batched inputs carry ``n`` on the last axis.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .archive import ArchiveError, load_tensors, save_tensors

log = logging.getLogger(__name__)

BANK_VERSION = 1
ROLES = ("style", "identity", "motion")
VARIANTS = ("lora", "dora")
PHASES = ("train", "infer")


class AdapterError(ValueError):
    pass


class LowRankAdapter:
    """Factors of one adapter at one insertion site.

    ``A`` and ``B`` are leaf tensors; the trainer flips ``requires_grad``.
    ``masked`` marks a propagation adapter whose input is token-masked.
    """

    def __init__(self, site_id: str, A: torch.Tensor, B: torch.Tensor, dropout_p: float = 0.0,
                 variant: str = "lora", magnitude: torch.Tensor | None = None, masked: bool = False,
                 dora_eps: float | None = None):
        if variant not in VARIANTS:
            raise AdapterError(f"unknown adapter variant {variant!r}")
        m, l = A.shape
        l2, n = B.shape
        if l != l2:
            raise AdapterError(f"A is {tuple(A.shape)} but B is {tuple(B.shape)}")
        if not l < min(m, n):
            raise AdapterError(f"rank {l} must be below min({m}, {n})")
        if not 0.0 <= dropout_p < 1.0:
            raise AdapterError("dropout_p must lie in [0, 1)")
        if variant == "dora":
            if magnitude is None or magnitude.shape != (n,):
                raise AdapterError(f"dora adapter needs a length-{n} magnitude vector")
            if not bool((magnitude > 0).all()):
                raise AdapterError("dora magnitude must be strictly positive")
        self.site_id = site_id
        self.A = A
        self.B = B
        self.dropout_p = float(dropout_p)
        self.variant = variant
        self.magnitude = magnitude
        self.masked = masked
        self.dora_eps = dora_eps

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @classmethod
    def create(cls, site_id: str, W: torch.Tensor, rank: int, *, variant: str = "lora", dropout_p: float = 0.0,
               masked: bool = False, generator: torch.Generator | None = None,
               shared_A: torch.Tensor | None = None, zero_B: bool = False) -> "LowRankAdapter":
        """Fresh adapter for base weight ``W``; a no-op at initialisation.

        Default init is ``A = 0`` with a random ``B``. With ``shared_A`` the
        given tensor is reused by reference and ``B`` starts at zero instead.
        """
        m, n = W.shape
        with torch.no_grad():
            if shared_A is not None:
                A = shared_A
                B = torch.zeros(rank, n, dtype=W.dtype)
            else:
                A = torch.zeros(m, rank, dtype=W.dtype)
                if zero_B:
                    B = torch.zeros(rank, n, dtype=W.dtype)
                else:
                    B = torch.randn(rank, n, generator=generator, dtype=W.dtype) / n ** 0.5
            magnitude = W.detach().norm(dim=0).clone() if variant == "dora" else None
        return cls(site_id, A, B, dropout_p, variant, magnitude, masked)

    def tensors(self) -> dict[str, torch.Tensor]:
        out = {"A": self.A, "B": self.B}
        if self.magnitude is not None:
            out["magnitude"] = self.magnitude
        return out


def dropout_B(B: torch.Tensor, p: float, generator: torch.Generator | None = None) -> torch.Tensor:
    """``B * M_p / (1 - p)`` with a fresh Bernoulli keep-mask."""
    if p == 0.0:
        return B
    keep = torch.rand(B.shape, generator=generator, dtype=B.dtype) >= p
    return B * keep.to(B.dtype) / (1.0 - p)


def _effective_B(adapter: LowRankAdapter, training: bool, generator) -> torch.Tensor:
    return dropout_B(adapter.B, adapter.dropout_p, generator) if training else adapter.B


def dora_weight(W: torch.Tensor, adapter: LowRankAdapter, B: torch.Tensor | None = None) -> torch.Tensor:
    """``g * (W + AB) / ||W + AB||_col`` with per-column (input-dim) norms."""
    V = W + adapter.A @ (adapter.B if B is None else B)
    norms = V.norm(dim=0)
    if adapter.dora_eps is not None:
        norms = norms.clamp_min(adapter.dora_eps)
    elif bool((norms == 0).any()):
        raise AdapterError(f"zero-norm column in DoRA direction at site {adapter.site_id}")
    return V * (adapter.magnitude / norms)


def adapter_delta(W: torch.Tensor, adapter: LowRankAdapter, x: torch.Tensor, training: bool = False,
                  generator: torch.Generator | None = None) -> torch.Tensor:
    """Adapter branch output, i.e. ``y - W x`` for the adapter alone."""
    B = _effective_B(adapter, training, generator)
    if adapter.variant == "lora":
        return F.linear(F.linear(x, B), adapter.A)
    return F.linear(x, dora_weight(W, adapter, B) - W)


def lora_forward(W: torch.Tensor, adapter: LowRankAdapter, x: torch.Tensor, training: bool = False,
                 generator: torch.Generator | None = None) -> torch.Tensor:
    if adapter.variant != "lora":
        raise AdapterError("lora_forward needs a lora adapter")
    if x.shape[-1] != W.shape[1] or adapter.A.shape[0] != W.shape[0] or adapter.B.shape[1] != W.shape[1]:
        raise AdapterError("shape mismatch between W, adapter and x")
    B = _effective_B(adapter, training, generator)
    return F.linear(x, W) + F.linear(F.linear(x, B), adapter.A)


def dora_forward(W: torch.Tensor, adapter: LowRankAdapter, x: torch.Tensor, training: bool = False,
                 generator: torch.Generator | None = None) -> torch.Tensor:
    if adapter.variant != "dora":
        raise AdapterError("dora_forward needs a dora adapter")
    if x.shape[-1] != W.shape[1]:
        raise AdapterError("shape mismatch between W and x")
    return F.linear(x, dora_weight(W, adapter, _effective_B(adapter, training, generator)))


@dataclass
class TokenMask:
    """Binary per-token mask, shape (tokens,) or (batch, tokens)."""

    values: torch.Tensor
    grid: tuple[int, int]
    provenance: str = "pixel mask, block coverage >= 0.5"

    def __post_init__(self):
        if not bool(((self.values == 0) | (self.values == 1)).all()):
            raise AdapterError("token mask must be binary")
        if self.values.shape[-1] != self.grid[0] * self.grid[1]:
            raise AdapterError("token mask length does not match its grid")

    def __len__(self):
        return self.values.shape[-1]

    def complement(self) -> "TokenMask":
        return TokenMask(1 - self.values, self.grid, self.provenance + ", complemented")


def downsample_mask(pixel_mask, grid: tuple[int, int]) -> TokenMask:
    """Token = 1 iff its pixel block is at least half foreground.

    Accepts (H, W) or (N, H, W); tokens are row-major over the ``grid``.
    """
    m = torch.as_tensor(pixel_mask)
    if m.ndim not in (2, 3):
        raise AdapterError("pixel mask must be (H, W) or (N, H, W)")
    H, W = m.shape[-2:]
    h, w = grid
    if H % h or W % w:
        raise AdapterError(f"pixel grid {H}x{W} not divisible by token grid {h}x{w}")
    batched = m.reshape(-1, 1, H, W).to(torch.float64)
    cover = F.avg_pool2d(batched, (H // h, W // w))
    tokens = (cover >= 0.5).to(torch.float32).reshape(-1, h * w)
    if m.ndim == 2:
        tokens = tokens[0]
    return TokenMask(tokens, (h, w))


def masked_adapter_forward(W: torch.Tensor, adapter: LowRankAdapter, x_tokens: torch.Tensor, mask: TokenMask,
                           phase: str, training: bool = False, generator: torch.Generator | None = None,
                           token_wise: bool = True) -> torch.Tensor:
    """``y = W x + PA(x * m)`` in train phase, ``W x + PA(x * (1 - m))`` in infer phase.

    ``x_tokens`` is (..., tokens, n). The base path is never masked.
    """
    if not token_wise:
        raise AdapterError(f"site {adapter.site_id} is not token-wise; masked adapters cannot be installed there")
    if phase not in PHASES:
        raise AdapterError(f"phase must be one of {PHASES}")
    if x_tokens.shape[-2] != len(mask):
        raise AdapterError(f"mask has {len(mask)} tokens, input has {x_tokens.shape[-2]}")
    m = mask.values if phase == "train" else 1 - mask.values
    xm = x_tokens * m.to(x_tokens.dtype)[..., None]
    return F.linear(x_tokens, W) + adapter_delta(W, adapter, xm, training, generator)


@dataclass
class AdapterContext:
    """Per-forward adapter state handed down to every site."""

    token_mask: torch.Tensor | None = None  # (N, tokens) aligned with the site token axis
    phase: str = "infer"
    training: bool = False
    generator: torch.Generator | None = None


@dataclass
class BankEntry:
    adapter: LowRankAdapter
    role: str
    enabled: bool = True


@dataclass
class AdapterBank:
    """site_id -> adapters, each tagged with a role and an enable flag."""

    entries: dict[str, list[BankEntry]] = field(default_factory=dict)
    train_roles: set[str] = field(default_factory=set)  # roles whose dropout is live while training

    def add(self, adapter: LowRankAdapter, role: str, enabled: bool = True) -> BankEntry:
        if role not in ROLES:
            raise AdapterError(f"unknown role {role!r}")
        here = self.entries.setdefault(adapter.site_id, [])
        if role == "style" and any(e.role == "style" for e in here):
            raise AdapterError(f"site {adapter.site_id} already has a style adapter")
        if role in ("identity", "motion"):
            for e in here:
                if e.role in ("identity", "motion") and e.adapter.A is not adapter.A:
                    raise AdapterError(f"identity/motion adapters at {adapter.site_id} must share one A tensor")
        entry = BankEntry(adapter, role, enabled)
        here.append(entry)
        return entry

    def at(self, site_id: str) -> list[BankEntry]:
        return self.entries.get(site_id, [])

    def get(self, site_id: str, role: str) -> LowRankAdapter:
        for e in self.at(site_id):
            if e.role == role:
                return e.adapter
        raise KeyError((site_id, role))

    def roles(self) -> set[str]:
        return {e.role for es in self.entries.values() for e in es}

    def set_enabled(self, roles=None, enabled: bool = True):
        for es in self.entries.values():
            for e in es:
                if roles is None or e.role in roles:
                    e.enabled = enabled

    def named_tensors(self) -> dict[str, torch.Tensor]:
        """Unique tensors keyed ``site/role/factor``; a shared A appears once."""
        out, seen = {}, set()
        for site in sorted(self.entries):
            for e in self.entries[site]:
                for factor, t in e.adapter.tensors().items():
                    if id(t) in seen:
                        continue
                    seen.add(id(t))
                    out[f"{site}/{e.role}/{factor}"] = t
        return out

    def keys(self, roles=None, factors=None) -> list[str]:
        keys = []
        for k in self.named_tensors():
            _, role, factor = k.rsplit("/", 2)
            if (roles is None or role in roles) and (factors is None or factor in factors):
                keys.append(k)
        return keys

    def clone(self) -> "AdapterBank":
        """Deep copy that keeps shared-A aliasing."""
        memo: dict[int, torch.Tensor] = {}

        def cp(t):
            if t is None:
                return None
            if id(t) not in memo:
                memo[id(t)] = t.detach().clone()
            return memo[id(t)]

        new = AdapterBank(train_roles=set(self.train_roles))
        for site, es in self.entries.items():
            for e in es:
                a = e.adapter
                new.entries.setdefault(site, []).append(BankEntry(
                    LowRankAdapter(a.site_id, cp(a.A), cp(a.B), a.dropout_p, a.variant, cp(a.magnitude),
                                   a.masked, a.dora_eps), e.role, e.enabled))
        return new

    def save(self, directory) -> Path:
        d = Path(directory)
        keys: dict[int, str] = {}
        tensors: dict[str, torch.Tensor] = {}
        records = []
        for site in sorted(self.entries):
            for i, e in enumerate(self.entries[site]):
                a = e.adapter
                rec = {"site_id": site, "role": e.role, "rank": a.rank, "dropout_p": a.dropout_p,
                       "variant": a.variant, "masked": a.masked, "enabled": e.enabled, "dora_eps": a.dora_eps,
                       "shared_A_key": None}
                for factor, t in a.tensors().items():
                    if id(t) in keys:
                        rec[f"{factor}_key"] = keys[id(t)]
                        if factor == "A":
                            rec["shared_A_key"] = keys[id(t)]
                        continue
                    k = f"{site}/{e.role}/{factor}"
                    keys[id(t)] = k
                    tensors[k] = t
                    rec[f"{factor}_key"] = k
                records.append(rec)
        save_tensors(d, tensors)
        manifest = {"version": BANK_VERSION, "train_roles": sorted(self.train_roles), "adapters": records}
        (d / "adapters.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
        return d

    @classmethod
    def load(cls, directory) -> "AdapterBank":
        d = Path(directory)
        try:
            manifest = json.loads((d / "adapters.json").read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ArchiveError(f"cannot read adapter manifest in {d}: {exc}") from exc
        if manifest.get("version") != BANK_VERSION:
            raise ArchiveError(f"adapter bank version {manifest.get('version')} != {BANK_VERSION}")
        tensors = load_tensors(d)
        for t in tensors.values():
            t.requires_grad_(False)

        def fetch(key):
            if key is None:
                return None
            if key not in tensors:
                raise ArchiveError(f"dangling tensor reference {key!r}")
            return tensors[key]

        bank = cls(train_roles=set(manifest.get("train_roles", [])))
        for rec in manifest["adapters"]:
            if rec.get("shared_A_key") is not None:
                fetch(rec["shared_A_key"])
            a = LowRankAdapter(rec["site_id"], fetch(rec["A_key"]), fetch(rec["B_key"]), rec["dropout_p"],
                               rec["variant"], fetch(rec.get("magnitude_key")), rec.get("masked", False),
                               rec.get("dora_eps"))
            if a.rank != rec["rank"]:
                raise ArchiveError(f"rank mismatch for {rec['site_id']}")
            bank.add(a, rec["role"], rec.get("enabled", True))
        return bank


class AdaptedLinear(nn.Linear):
    """``nn.Linear`` with a stable site id and an optional adapter bank hook."""

    def __init__(self, in_features: int, out_features: int, site_id: str, token_wise: bool, bias: bool = True):
        super().__init__(in_features, out_features, bias=bias)
        self.site_id = site_id
        self.token_wise = token_wise
        self.bank: AdapterBank | None = None

    def forward(self, x: torch.Tensor, ctx: AdapterContext | None = None) -> torch.Tensor:
        y = F.linear(x, self.weight, self.bias)
        if self.bank is None:
            return y
        ctx = ctx or AdapterContext()
        for e in self.bank.at(self.site_id):
            if not e.enabled:
                continue
            a = e.adapter
            xa = x
            if a.masked:
                if ctx.token_mask is None:
                    raise AdapterError(f"masked adapter at {self.site_id} needs a token mask")
                if ctx.phase not in PHASES:
                    raise AdapterError(f"phase must be one of {PHASES}")
                if ctx.token_mask.shape[-1] != x.shape[-2]:
                    raise AdapterError(f"mask has {ctx.token_mask.shape[-1]} tokens, site {self.site_id} has {x.shape[-2]}")
                m = ctx.token_mask if ctx.phase == "train" else 1 - ctx.token_mask
                xa = x * m.to(x.dtype)[..., None]
            live = ctx.training and e.role in self.bank.train_roles
            y = y + adapter_delta(self.weight, a, xa, live, ctx.generator)
        return y
