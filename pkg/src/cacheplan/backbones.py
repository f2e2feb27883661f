"""Deterministic backbones with per-module gating.

Three kinds share one forward contract:

* ``toy_dit``    - a small pre-norm MHSA/FFN transformer stack,
* ``toy_dual``   - a dual-stream/single-stream variant with five gated
                   module families, the dual-stream attention family
                   governing two sub-sites per layer,
* ``scripted``   - an oracle whose module outputs follow closed-form
                   sequences with known change rates, independent of the
                   propagated state.

Every gated site either computes its output (and overwrites the cache slot)
or substitutes the cached tensor, as directed by the per-step gate. Weights
are seeded, so (kind, seed, dims) fully determine all parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .gating import COMPUTE, REUSE, GateDirective, ModuleCache, SiteTouch

TOY_DIT_FAMILIES = ("mhsa", "ffn")
TOY_DUAL_FAMILIES = ("dual_attn", "dual_ff", "dual_context_ff", "single_attn", "single_ff")

# Effective cost (in matmul-flop equivalents) of one elementwise pass and of
# one division/abs-heavy pass; keeps the analytic tables proportional to
# wall time on commodity CPUs. STEP_DISPATCH covers the fixed per-executed-
# step cost (interpreter dispatch, cache bookkeeping, buffer churn).
ELEM_COST = 16
HARD_COST = 48
STEP_DISPATCH_FLOPS = 30_000_000


class CacheMissError(RuntimeError):
    pass


@dataclass(frozen=True)
class FamilyRegistry:
    """Gated module families of one backbone.

    ``hook_count_per_layer`` gives the number of gated sub-sites one plan
    entry of that family governs in each layer (2 for the dual-stream
    attention family). ``tie_groups`` lists families that must share one
    threshold and identical plan slices.
    """

    families: tuple[str, ...]
    hook_count_per_layer: dict[str, int]
    tie_groups: tuple[frozenset[str], ...] = ()

    def __post_init__(self):
        seen: set[str] = set()
        for group in self.tie_groups:
            for fam in group:
                if fam not in self.families:
                    raise ValueError(f"tie group names unknown family {fam!r}")
                if fam in seen:
                    raise ValueError(f"family {fam!r} appears in more than one tie group")
                seen.add(fam)
        for fam in self.families:
            if self.hook_count_per_layer.get(fam, 0) < 1:
                raise ValueError(f"hook count for family {fam!r} must be >= 1")

    def sub_sites_per_layer(self) -> int:
        return sum(self.hook_count_per_layer[f] for f in self.families)

    def tie_group_of(self, family: str) -> frozenset[str]:
        for group in self.tie_groups:
            if family in group:
                return group
        return frozenset((family,))


@dataclass(frozen=True)
class BackboneConfig:
    kind: str  # toy_dit | toy_dual | scripted
    layers: int
    tokens: int
    channels: int
    heads: int = 4
    cond_classes: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("toy_dit", "toy_dual", "scripted"):
            raise ValueError(f"unknown backbone kind {self.kind!r}")
        for name in ("layers", "tokens", "channels", "heads", "cond_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.channels % self.heads != 0:
            raise ValueError(f"channels={self.channels} not divisible by heads={self.heads}")


def _layer_norm(h: np.ndarray) -> np.ndarray:
    mu = h.mean(axis=-1, keepdims=True)
    var = h.var(axis=-1, keepdims=True)
    return (h - mu) / np.sqrt(var + 1e-6)


def _gelu(u: np.ndarray) -> np.ndarray:
    # algebraic gate: smooth, monotone, and much cheaper than exp/tanh so
    # wall time stays proportional to the analytic cost table
    v = np.abs(u)
    v *= 1.702
    v += 1.0
    out = np.divide(u, v, out=v)
    out *= 0.851  # 0.5 * 1.702
    out += 0.5
    out *= u
    return out


def _attn_weights(scores: np.ndarray) -> np.ndarray:
    # algebraic stand-in for softmax: positive smooth weights, rows sum to 1
    den = np.abs(scores)
    den += 1.0
    w = np.divide(scores, den, out=den)
    w += 1.0
    w /= w.sum(axis=-1, keepdims=True)
    return w


def _multi_head(q: np.ndarray, k: np.ndarray, v: np.ndarray, heads: int) -> np.ndarray:
    nq, d = q.shape
    nk = k.shape[0]
    dh = d // heads
    qh = q.reshape(nq, heads, dh).transpose(1, 0, 2)
    kh = k.reshape(nk, heads, dh).transpose(1, 0, 2)
    vh = v.reshape(nk, heads, dh).transpose(1, 0, 2)
    w = _attn_weights(qh @ kh.transpose(0, 2, 1) / math.sqrt(dh))
    out = w @ vh
    return out.transpose(1, 0, 2).reshape(nq, d)


def _sinusoid(t: int, channels: int) -> np.ndarray:
    half = channels // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    ang = t * freqs
    emb = np.concatenate([np.sin(ang), np.cos(ang)])
    if emb.size < channels:
        emb = np.concatenate([emb, np.zeros(channels - emb.size)])
    return emb


class _BackboneBase:
    cfg: BackboneConfig
    registry: FamilyRegistry
    site_flops: dict[str, int]  # per sub-site, per layer
    overhead_flops: int  # non-gated glue per executed step

    def step_flops(self, touched: list[SiteTouch]) -> int:
        total = self.overhead_flops
        for touch in touched:
            if touch.action == COMPUTE:
                total += self.site_flops[touch.family]
        return total

    def full_step_flops(self) -> int:
        per_layer = sum(self.site_flops[f] * self.registry.hook_count_per_layer[f]
                        for f in self.registry.families)
        return self.overhead_flops + self.cfg.layers * per_layer

    def baseline_flops(self, steps: int) -> int:
        return steps * self.full_step_flops()

    def describe(self) -> dict:
        c = self.cfg
        return {"kind": c.kind, "layers": c.layers, "tokens": c.tokens,
                "channels": c.channels, "heads": c.heads,
                "cond_classes": c.cond_classes, "seed": c.seed}

    def _check_cond(self, cond: int) -> None:
        if not 0 <= cond < self.cfg.cond_classes:
            raise ValueError(f"cond {cond} out of range [0, {self.cfg.cond_classes})")

    def _resolve_site(self, t: int, layer: int, family: str, sub_site: int,
                      compute: Callable[[], np.ndarray], gate: GateDirective,
                      cache: ModuleCache, touched: list[SiteTouch], on_site) -> np.ndarray:
        if gate.wants_reuse(layer, family):
            value = cache.get(layer, family, sub_site)
            if value is None:
                raise CacheMissError(
                    f"REUSE with empty cache slot at (t={t}, l={layer}, s={family}[{sub_site}])")
            action = REUSE
        else:
            value = compute()
            cache.put(layer, family, sub_site, value)
            action = COMPUTE
        touched.append(SiteTouch(layer, family, sub_site, action))
        if on_site is not None:
            on_site(t, layer, family, sub_site, value, action)
        return value


class ToyDiTBackbone(_BackboneBase):
    """Pre-norm MHSA + FFN stack with additive time/class conditioning."""

    def __init__(self, cfg: BackboneConfig):
        self.cfg = cfg
        self.registry = FamilyRegistry(
            families=TOY_DIT_FAMILIES,
            hook_count_per_layer={"mhsa": 1, "ffn": 1})
        n, d = cfg.tokens, cfg.channels
        rng = np.random.default_rng(cfg.seed)
        bound = 1.0 / math.sqrt(d)
        hidden = 2 * d

        def w(*shape):
            return rng.uniform(-bound, bound, size=shape)

        self.blocks = []
        for _ in range(cfg.layers):
            self.blocks.append({
                "wq": w(d, d), "wk": w(d, d), "wv": w(d, d), "wo": w(d, d),
                "w1": w(d, hidden), "b1": w(hidden), "w2": w(hidden, d), "b2": w(d),
            })
        self.class_emb = w(cfg.cond_classes, d)
        self.w_head = w(d, d)
        heads = cfg.heads
        self.site_flops = {
            "mhsa": (8 * n * d * d + 4 * n * n * d
                     + ELEM_COST * (11 * n * d + 5 * heads * n * n)
                     + HARD_COST * 2 * heads * n * n),
            "ffn": (4 * n * d * hidden
                    + ELEM_COST * (9 * n * d + 5 * n * hidden)
                    + HARD_COST * n * hidden),
        }
        self.overhead_flops = 2 * n * d * d + ELEM_COST * 64 * n * d + STEP_DISPATCH_FLOPS

    def _attn(self, h: np.ndarray, layer: int) -> np.ndarray:
        p = self.blocks[layer]
        hn = _layer_norm(h)
        out = _multi_head(hn @ p["wq"], hn @ p["wk"], hn @ p["wv"], self.cfg.heads)
        return out @ p["wo"]

    def _ffn(self, h: np.ndarray, layer: int) -> np.ndarray:
        p = self.blocks[layer]
        return _gelu(_layer_norm(h) @ p["w1"] + p["b1"]) @ p["w2"] + p["b2"]

    def _embed(self, x: np.ndarray, cond: int, t: int, sigma: float | None) -> np.ndarray:
        # Conditioning is a function of the noise level when available, so
        # activations move with the schedule's increments, not the raw index.
        val = 40.0 * sigma if sigma is not None else float(t)
        return x + _sinusoid(val, self.cfg.channels) + self.class_emb[cond]

    def reference_forward(self, x: np.ndarray, cond: int, t: int,
                          sigma: float | None = None) -> np.ndarray:
        self._check_cond(cond)
        h = self._embed(x, cond, t, sigma)
        for l in range(self.cfg.layers):
            h = h + self._attn(h, l)
            h = h + self._ffn(h, l)
        return _layer_norm(h) @ self.w_head

    def forward_step(self, x: np.ndarray, cond: int, t: int, gate: GateDirective,
                     cache: ModuleCache, on_site=None, sigma: float | None = None):
        self._check_cond(cond)
        touched: list[SiteTouch] = []
        h = self._embed(x, cond, t, sigma)
        for l in range(self.cfg.layers):
            attn = self._resolve_site(t, l, "mhsa", 0, lambda h=h, l=l: self._attn(h, l),
                                      gate, cache, touched, on_site)
            h = h + attn
            ffn = self._resolve_site(t, l, "ffn", 0, lambda h=h, l=l: self._ffn(h, l),
                                     gate, cache, touched, on_site)
            h = h + ffn
        return _layer_norm(h) @ self.w_head, touched


class ToyDualBackbone(_BackboneBase):
    """Dual-stream block (image + context) followed by a single-stream block.

    Per layer the gated sites are: the two dual-stream attentions (one family
    entry, two sub-sites), the two dual-stream feed-forwards, and the
    single-stream attention and feed-forward acting on the concatenated
    token sequence.
    """

    def __init__(self, cfg: BackboneConfig):
        self.cfg = cfg
        self.registry = FamilyRegistry(
            families=TOY_DUAL_FAMILIES,
            hook_count_per_layer={"dual_attn": 2, "dual_ff": 1, "dual_context_ff": 1,
                                  "single_attn": 1, "single_ff": 1})
        n, d = cfg.tokens, cfg.channels
        rng = np.random.default_rng(cfg.seed)
        bound = 1.0 / math.sqrt(d)
        hidden = 2 * d

        def w(*shape):
            return rng.uniform(-bound, bound, size=shape)

        self.blocks = []
        for _ in range(cfg.layers):
            self.blocks.append({
                "img_qkv": (w(d, d), w(d, d), w(d, d)), "img_wo": w(d, d),
                "ctx_qkv": (w(d, d), w(d, d), w(d, d)), "ctx_wo": w(d, d),
                "img_ff": (w(d, hidden), w(hidden), w(hidden, d), w(d)),
                "ctx_ff": (w(d, hidden), w(hidden), w(hidden, d), w(d)),
                "single_qkv": (w(d, d), w(d, d), w(d, d)), "single_wo": w(d, d),
                "single_ff": (w(d, hidden), w(hidden), w(hidden, d), w(d)),
            })
        self.class_emb = w(cfg.cond_classes, d)
        self.ctx_base = w(n, d)
        self.ctx_class_emb = w(cfg.cond_classes, d)
        self.w_head = w(d, d)
        heads = cfg.heads
        self.site_flops = {
            "dual_attn": (8 * n * d * d + 8 * n * n * d
                          + ELEM_COST * (11 * n * d + 10 * heads * n * n)
                          + HARD_COST * 4 * heads * n * n),
            "dual_ff": (4 * n * d * hidden
                        + ELEM_COST * (9 * n * d + 5 * n * hidden)
                        + HARD_COST * n * hidden),
            "dual_context_ff": (4 * n * d * hidden
                                + ELEM_COST * (9 * n * d + 5 * n * hidden)
                                + HARD_COST * n * hidden),
            "single_attn": (16 * n * d * d + 16 * n * n * d
                            + ELEM_COST * (22 * n * d + 20 * heads * n * n)
                            + HARD_COST * 8 * heads * n * n),
            "single_ff": (8 * n * d * hidden
                          + ELEM_COST * (18 * n * d + 10 * n * hidden)
                          + HARD_COST * 2 * n * hidden),
        }
        self.overhead_flops = 2 * n * d * d + ELEM_COST * 96 * n * d + STEP_DISPATCH_FLOPS

    @staticmethod
    def _ff(h: np.ndarray, params) -> np.ndarray:
        w1, b1, w2, b2 = params
        return _gelu(_layer_norm(h) @ w1 + b1) @ w2 + b2

    def _dual_attn_pair(self, x: np.ndarray, c: np.ndarray, layer: int):
        p = self.blocks[layer]
        hx, hc = _layer_norm(x), _layer_norm(c)
        qx, kx, vx = (hx @ m for m in p["img_qkv"])
        qc, kc, vc = (hc @ m for m in p["ctx_qkv"])
        k = np.concatenate([kx, kc])
        v = np.concatenate([vx, vc])
        attn_img = _multi_head(qx, k, v, self.cfg.heads) @ p["img_wo"]
        attn_ctx = _multi_head(qc, k, v, self.cfg.heads) @ p["ctx_wo"]
        return attn_img, attn_ctx

    def _single_attn(self, u: np.ndarray, layer: int) -> np.ndarray:
        p = self.blocks[layer]
        hn = _layer_norm(u)
        q, k, v = (hn @ m for m in p["single_qkv"])
        return _multi_head(q, k, v, self.cfg.heads) @ p["single_wo"]

    def _streams(self, x: np.ndarray, cond: int, t: int, sigma: float | None):
        val = 40.0 * sigma if sigma is not None else float(t)
        emb = _sinusoid(val, self.cfg.channels)
        img = x + emb + self.class_emb[cond]
        ctx = self.ctx_base + emb + self.ctx_class_emb[cond]
        return img, ctx

    def reference_forward(self, x: np.ndarray, cond: int, t: int,
                          sigma: float | None = None) -> np.ndarray:
        self._check_cond(cond)
        n = self.cfg.tokens
        img, ctx = self._streams(x, cond, t, sigma)
        for l in range(self.cfg.layers):
            attn_img, attn_ctx = self._dual_attn_pair(img, ctx, l)
            img = img + attn_img
            ctx = ctx + attn_ctx
            img = img + self._ff(img, self.blocks[l]["img_ff"])
            ctx = ctx + self._ff(ctx, self.blocks[l]["ctx_ff"])
            u = np.concatenate([img, ctx])
            u = u + self._single_attn(u, l)
            u = u + self._ff(u, self.blocks[l]["single_ff"])
            img, ctx = u[:n], u[n:]
        return _layer_norm(img) @ self.w_head

    def forward_step(self, x: np.ndarray, cond: int, t: int, gate: GateDirective,
                     cache: ModuleCache, on_site=None, sigma: float | None = None):
        self._check_cond(cond)
        n = self.cfg.tokens
        touched: list[SiteTouch] = []
        img, ctx = self._streams(x, cond, t, sigma)
        for l in range(self.cfg.layers):
            # One dual_attn plan entry governs both attention sub-sites; the
            # pair is computed jointly but cached per sub-site.
            if gate.wants_reuse(l, "dual_attn"):
                pair = (None, None)
            else:
                pair = self._dual_attn_pair(img, ctx, l)
            attn_img = self._resolve_site(t, l, "dual_attn", 0, lambda: pair[0],
                                          gate, cache, touched, on_site)
            attn_ctx = self._resolve_site(t, l, "dual_attn", 1, lambda: pair[1],
                                          gate, cache, touched, on_site)
            img = img + attn_img
            ctx = ctx + attn_ctx
            ff_img = self._resolve_site(t, l, "dual_ff", 0,
                                        lambda img=img, l=l: self._ff(img, self.blocks[l]["img_ff"]),
                                        gate, cache, touched, on_site)
            img = img + ff_img
            ff_ctx = self._resolve_site(t, l, "dual_context_ff", 0,
                                        lambda ctx=ctx, l=l: self._ff(ctx, self.blocks[l]["ctx_ff"]),
                                        gate, cache, touched, on_site)
            ctx = ctx + ff_ctx
            u = np.concatenate([img, ctx])
            attn_s = self._resolve_site(t, l, "single_attn", 0,
                                        lambda u=u, l=l: self._single_attn(u, l),
                                        gate, cache, touched, on_site)
            u = u + attn_s
            ff_s = self._resolve_site(t, l, "single_ff", 0,
                                      lambda u=u, l=l: self._ff(u, self.blocks[l]["single_ff"]),
                                      gate, cache, touched, on_site)
            u = u + ff_s
            img, ctx = u[:n], u[n:]
        return _layer_norm(img) @ self.w_head, touched


class ScriptedProfile:
    """Assigns each (layer, family) a change ratio, optionally varying in t.

    The generated site sequences have first differences whose consecutive L1
    ratios equal the assigned ratio exactly, which makes measured rates
    checkable against a closed form.
    """

    def __init__(self, rate_of: Callable[[int, str, int], float],
                 net_rate_of: Callable[[int], float] | None = None,
                 amplitude: float = 1.0, config: dict | None = None):
        self.rate_of = rate_of
        self.net_rate_of = net_rate_of if net_rate_of is not None else (lambda t: 1.0)
        self.amplitude = float(amplitude)
        self.config = config

    @classmethod
    def uniform(cls, r: float, net: float | None = None) -> "ScriptedProfile":
        net_r = r if net is None else net
        return cls(lambda l, fam, t: r, lambda t: net_r,
                   config={"ratio": r, "net_ratio": net_r})

    @classmethod
    def per_family(cls, ratios: dict[str, float], net: float = 1.0) -> "ScriptedProfile":
        return cls(lambda l, fam, t: ratios[fam], lambda t: net,
                   config={"ratios": dict(ratios), "net_ratio": net})

    @classmethod
    def from_config(cls, cfg: dict) -> "ScriptedProfile":
        net = float(cfg.get("net_ratio", cfg.get("ratio", 1.0)))
        if "ratios" in cfg:
            ratios = {k: float(v) for k, v in cfg["ratios"].items()}
            return cls(lambda l, fam, t: ratios[fam], lambda t: net, config=dict(cfg))
        if "piecewise" in cfg:
            # piecewise: list of [start_t, ratio]; applies from start_t onward
            pieces = sorted((int(s), float(r)) for s, r in cfg["piecewise"])

            def rate(l, fam, t, pieces=pieces):
                r = pieces[0][1]
                for start, val in pieces:
                    if t >= start:
                        r = val
                return r

            return cls(rate, lambda t: net, config=dict(cfg))
        return cls.uniform(float(cfg.get("ratio", 1.0)), net)

    def describe(self) -> dict | str:
        return self.config if self.config is not None else "<callable profile>"


class ScriptedBackbone(_BackboneBase):
    """Oracle backbone: module outputs follow the profile, not the input.

    Each site emits ``base + amplitude * growth(t) * direction`` where the
    direction tensor is entrywise positive, so L1 norms of differences add
    across any stale gap. The network output is the scripted net sequence
    plus the mean of the effective (cached or fresh) site tensors, which
    lets a plan replay be checked by pure arithmetic.
    """

    def __init__(self, cfg: BackboneConfig, profile: ScriptedProfile):
        self.cfg = cfg
        self.profile = profile
        self.registry = FamilyRegistry(
            families=TOY_DIT_FAMILIES,
            hook_count_per_layer={"mhsa": 1, "ffn": 1})
        n, d = cfg.tokens, cfg.channels
        rng = np.random.default_rng(cfg.seed)
        self.site_base = {}
        self.site_dir = {}
        for l in range(cfg.layers):
            for fam in self.registry.families:
                self.site_base[(l, fam)] = rng.standard_normal((n, d))
                self.site_dir[(l, fam)] = rng.uniform(0.5, 1.5, size=(n, d))
        self.net_base = rng.standard_normal((n, d))
        self.net_dir = rng.uniform(0.5, 1.5, size=(n, d))
        hidden = 2 * d  # nominal costs, mirroring the toy stack
        self.site_flops = {"mhsa": 8 * n * d * d + 4 * n * n * d
                                   + ELEM_COST * 5 * cfg.heads * n * n,
                           "ffn": 4 * n * d * hidden + ELEM_COST * 5 * n * hidden}
        self.overhead_flops = 2 * n * d * d

    def _growth(self, t: int, rate_at: Callable[[int], float]) -> float:
        g, delta = 0.0, 1.0
        for k in range(t):
            if k > 0:
                r = rate_at(k)
                if r <= 0.0:
                    raise ValueError(f"scripted ratio must be positive, got {r} at t={k}")
                delta *= r
            g += delta
        return g

    def site_value(self, layer: int, family: str, t: int) -> np.ndarray:
        g = self._growth(t, lambda k: self.profile.rate_of(layer, family, k))
        return self.site_base[(layer, family)] + self.profile.amplitude * g * self.site_dir[(layer, family)]

    def net_value(self, t: int) -> np.ndarray:
        g = self._growth(t, self.profile.net_rate_of)
        return self.net_base + self.profile.amplitude * g * self.net_dir

    def reference_forward(self, x: np.ndarray, cond: int, t: int,
                          sigma: float | None = None) -> np.ndarray:
        total = np.zeros((self.cfg.tokens, self.cfg.channels))
        count = 0
        for l in range(self.cfg.layers):
            for fam in self.registry.families:
                total += self.site_value(l, fam, t)
                count += 1
        return self.net_value(t) + total / count

    def forward_step(self, x: np.ndarray, cond: int, t: int, gate: GateDirective,
                     cache: ModuleCache, on_site=None, sigma: float | None = None):
        touched: list[SiteTouch] = []
        total = np.zeros((self.cfg.tokens, self.cfg.channels))
        count = 0
        for l in range(self.cfg.layers):
            for fam in self.registry.families:
                val = self._resolve_site(t, l, fam, 0,
                                         lambda l=l, fam=fam: self.site_value(l, fam, t),
                                         gate, cache, touched, on_site)
                total += val
                count += 1
        return self.net_value(t) + total / count, touched

    def describe(self) -> dict:
        out = super().describe()
        out["profile"] = self.profile.describe()
        return out


def build_backbone(cfg: BackboneConfig, profile: ScriptedProfile | None = None):
    """Construct a backbone; ``profile`` is required for the scripted kind."""
    if cfg.kind == "toy_dit":
        return ToyDiTBackbone(cfg)
    if cfg.kind == "toy_dual":
        return ToyDualBackbone(cfg)
    if profile is None:
        raise ValueError("scripted backbone requires a ScriptedProfile")
    return ScriptedBackbone(cfg, profile)


def scripted_rates(profile: ScriptedProfile, layers: int, steps: int,
                   families: tuple[str, ...] = TOY_DIT_FAMILIES):
    """Analytic per-family rate matrices for a scripted profile."""
    from .rates import RateMatrix, interior_mask

    out = {}
    mask = interior_mask(steps)
    for fam in families:
        values = np.zeros((steps, layers))
        for t in range(1, steps - 1):
            for l in range(layers):
                r = profile.rate_of(l, fam, t)
                if r <= 0.0:
                    raise ValueError(f"scripted ratio must be positive, got {r}")
                values[t, l] = r
        out[fam] = RateMatrix(family=fam, values=values, defined_mask=mask.copy())
    return out
