"""Differentiable blocks of the noise estimator and the two-stream coupling wrapper.

Conventions: parameters live in one flat ``dict[str, ndarray]`` and each block
reads the keys under its prefix. A forward returns ``(out, cache)``; the
matching backward takes the cache, accumulates parameter gradients into a
``grads`` dict in place and returns the input gradient (plus a time-embedding
gradient where the block is time-conditioned).

Each ``*_branch`` is the residual part of a block, i.e. ``block(x) = x +
branch(x)``. Branches serve as the coupling functions g1/g2 so that a coupling
with zero-initialised output layers is exactly the identity.
"""

from __future__ import annotations

import math

import numpy as np

from .grid import concat_channels, conv2d, conv2d_backward, pixel_shuffle, pixel_unshuffle

TEMB_DIM = 32
GN_EPS = 1e-5


def accumulate(grads: dict, name: str, value) -> None:
    if name in grads:
        grads[name] += value
    else:
        grads[name] = np.array(value, copy=True)


def n_groups(c: int, groups: int = 8) -> int:
    g = min(groups, c)
    while c % g:
        g -= 1
    return g


# ---------------------------------------------------------------- init


def _normal(rng, shape, std, dtype):
    return (rng.standard_normal(shape) * std).astype(dtype)


def init_time_embed(params, rng, pre="temb", dtype=np.float32):
    params[f"{pre}.w"] = _normal(rng, (TEMB_DIM, TEMB_DIM), 1.0 / np.sqrt(TEMB_DIM), dtype)
    params[f"{pre}.b"] = np.zeros(TEMB_DIM, dtype)


def init_residual(params, rng, pre, c, dtype=np.float32):
    params[f"{pre}.gn.scale"] = np.ones(c, dtype)
    params[f"{pre}.gn.shift"] = np.zeros(c, dtype)
    params[f"{pre}.conv.w"] = np.zeros((3, 3, c, c), dtype)
    params[f"{pre}.conv.b"] = np.zeros(c, dtype)
    for k in ("gamma", "beta"):
        params[f"{pre}.{k}.w"] = np.zeros((TEMB_DIM, c), dtype)
        params[f"{pre}.{k}.b"] = np.zeros(c, dtype)


def init_attention(params, rng, pre, c, dtype=np.float32):
    for k in ("q", "k", "v"):
        params[f"{pre}.{k}.w"] = _normal(rng, (c, c), 1.0 / np.sqrt(c), dtype)
    # no key bias: it shifts each score row by a constant, which softmax ignores
    params[f"{pre}.q.b"] = np.zeros(c, dtype)
    params[f"{pre}.v.b"] = np.zeros(c, dtype)
    params[f"{pre}.o.w"] = np.zeros((c, c), dtype)
    params[f"{pre}.o.b"] = np.zeros(c, dtype)


def init_injector(params, rng, pre, c, r, ctx_channels=2, dtype=np.float32):
    if c % (r * r):
        raise ValueError(f"injector at scale r={r} needs channels divisible by {r * r}, got {c}")
    cu = c // (r * r)
    params[f"{pre}.conv1.w"] = _normal(rng, (1, 1, cu, 1), 1.0 / np.sqrt(cu), dtype)
    params[f"{pre}.conv1.b"] = np.zeros(1, dtype)
    params[f"{pre}.conv2.w"] = np.zeros((3, 3, 2 + ctx_channels, cu), dtype)
    params[f"{pre}.conv2.b"] = np.zeros(cu, dtype)


# ---------------------------------------------------------------- time embedding


def sinusoid(t: float, dtype=np.float64) -> np.ndarray:
    half = TEMB_DIM // 2
    freqs = 10.0 ** (-4.0 * np.arange(half) / (half - 1))
    ang = float(t) * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)]).astype(dtype)


def time_embed(t, params, pre="temb"):
    w = params[f"{pre}.w"]
    feats = sinusoid(t, w.dtype)
    return feats @ w + params[f"{pre}.b"], feats


def time_embed_backward(dtemb, feats, params, grads, pre="temb"):
    accumulate(grads, f"{pre}.w", np.outer(feats, dtemb))
    accumulate(grads, f"{pre}.b", dtemb)


# ---------------------------------------------------------------- elementwise pieces


def _group_mean(per_channel, g, n):
    # per-channel sums -> per-group mean, broadcast back to channels
    c = per_channel.shape[0]
    return np.repeat(per_channel.reshape(g, c // g).sum(axis=1) / n, c // g)


def group_norm(x, scale, shift, groups):
    h, w, c = x.shape
    g = n_groups(c, groups)
    n = h * w * (c // g)
    x2 = x.reshape(h * w, c)
    mean = _group_mean(x2.sum(axis=0), g, n).astype(x.dtype, copy=False)
    d = x2 - mean
    var = _group_mean((d * d).sum(axis=0), g, n).astype(x.dtype, copy=False)
    rstd = 1.0 / np.sqrt(var + GN_EPS)
    xhat = (d * rstd).reshape(h, w, c)
    return xhat * scale + shift, (xhat, rstd)


def group_norm_backward(dy, cache, scale, groups):
    xhat, rstd = cache
    h, w, c = xhat.shape
    g = n_groups(c, groups)
    n = h * w * (c // g)
    dy2 = dy.reshape(h * w, c)
    xh = xhat.reshape(h * w, c)
    dshift = dy2.sum(axis=0)
    dscale = (dy2 * xh).sum(axis=0)
    # group sums of dxhat and dxhat * xhat, where dxhat = dy * scale
    s1 = _group_mean(dshift * scale, g, 1).astype(dy.dtype, copy=False)
    s2 = _group_mean(dscale * scale, g, 1).astype(dy.dtype, copy=False)
    dx = (rstd / n) * (n * (dy2 * scale) - s1 - xh * s2)
    return dx.reshape(h, w, c), dscale, dshift


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x):
    return x * _sigmoid(x)


def silu_backward(dy, x):
    s = _sigmoid(x)
    return dy * (s * (1.0 + x * (1.0 - s)))


# ---------------------------------------------------------------- residual


def residual_branch(x, temb, params, pre, groups=8):
    """FiLM-conditioned ``conv3x3(silu(groupnorm(x))) * (1 + gamma) + beta``."""
    c = x.shape[2]
    if params[f"{pre}.conv.w"].shape[2] != c:
        raise ValueError(f"residual block {pre}: input {x.shape} vs kernel {params[pre + '.conv.w'].shape}")
    n, gn_cache = group_norm(x, params[f"{pre}.gn.scale"], params[f"{pre}.gn.shift"], groups)
    a = silu(n)
    cv = conv2d(a, params[f"{pre}.conv.w"], 1, "same", params[f"{pre}.conv.b"])
    gamma = temb @ params[f"{pre}.gamma.w"] + params[f"{pre}.gamma.b"]
    beta = temb @ params[f"{pre}.beta.w"] + params[f"{pre}.beta.b"]
    out = cv * (1.0 + gamma) + beta
    return out, {"gn": gn_cache, "n": n, "a": a, "cv": cv, "gamma": gamma, "temb": temb}


def residual_branch_backward(dout, cache, params, pre, grads, groups=8):
    temb, gamma, cv = cache["temb"], cache["gamma"], cache["cv"]
    c = dout.shape[2]
    dgamma = (dout * cv).reshape(-1, c).sum(axis=0)
    dbeta = dout.reshape(-1, c).sum(axis=0)
    accumulate(grads, f"{pre}.gamma.w", np.outer(temb, dgamma))
    accumulate(grads, f"{pre}.gamma.b", dgamma)
    accumulate(grads, f"{pre}.beta.w", np.outer(temb, dbeta))
    accumulate(grads, f"{pre}.beta.b", dbeta)
    dtemb = params[f"{pre}.gamma.w"] @ dgamma + params[f"{pre}.beta.w"] @ dbeta
    da, dk, db = conv2d_backward(cache["a"], params[f"{pre}.conv.w"], dout * (1.0 + gamma), 1, "same")
    accumulate(grads, f"{pre}.conv.w", dk)
    accumulate(grads, f"{pre}.conv.b", db)
    dn = silu_backward(da, cache["n"])
    dx, dscale, dshift = group_norm_backward(dn, cache["gn"], params[f"{pre}.gn.scale"], groups)
    accumulate(grads, f"{pre}.gn.scale", dscale)
    accumulate(grads, f"{pre}.gn.shift", dshift)
    return dx, dtemb


def residual_block(x, temb, params, pre, groups=8):
    return x + residual_branch(x, temb, params, pre, groups)[0]


# ---------------------------------------------------------------- attention


def attention_branch(x, params, pre, max_positions=256):
    """Single-head spatial self-attention over all h*w positions (output projection only)."""
    h, w, c = x.shape
    n = h * w
    if n > max_positions:
        raise ValueError(f"attention block {pre}: {h}x{w} exceeds the {max_positions}-position cap")
    X = x.reshape(n, c)
    q = X @ params[f"{pre}.q.w"] + params[f"{pre}.q.b"]
    k = X @ params[f"{pre}.k.w"]
    v = X @ params[f"{pre}.v.w"] + params[f"{pre}.v.b"]
    s = (q @ k.T) / math.sqrt(c)
    s -= s.max(axis=1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=1, keepdims=True)
    o = p @ v
    out = (o @ params[f"{pre}.o.w"] + params[f"{pre}.o.b"]).reshape(h, w, c)
    return out, {"X": X, "q": q, "k": k, "v": v, "p": p, "o": o}


def attention_branch_backward(dout, cache, params, pre, grads):
    h, w, c = dout.shape
    X, q, k, v, p, o = (cache[key] for key in ("X", "q", "k", "v", "p", "o"))
    d = dout.reshape(h * w, c)
    accumulate(grads, f"{pre}.o.w", o.T @ d)
    accumulate(grads, f"{pre}.o.b", d.sum(axis=0))
    do = d @ params[f"{pre}.o.w"].T
    dp = do @ v.T
    dv = p.T @ do
    ds = p * (dp - (dp * p).sum(axis=1, keepdims=True)) / math.sqrt(c)
    dq = ds @ k
    dk = ds.T @ q
    dX = np.zeros_like(X)
    for name, dz in (("q", dq), ("k", dk), ("v", dv)):
        accumulate(grads, f"{pre}.{name}.w", X.T @ dz)
        if name != "k":
            accumulate(grads, f"{pre}.{name}.b", dz.sum(axis=0))
        dX += dz @ params[f"{pre}.{name}.w"].T
    return dX.reshape(h, w, c)


def attention_block(x, params, pre, max_positions=256):
    return x + attention_branch(x, params, pre, max_positions)[0]


# ---------------------------------------------------------------- injector


def injector_branch(x, ctx, params, pre):
    """Lift ``x`` to full resolution, fuse with back-projection and environment, fold back.

    ``ctx`` is ``(backprojection, env, r)`` with full-resolution grids.
    """
    backproj, env, r = ctx
    up = pixel_shuffle(x, r)
    if up.shape[:2] != backproj.shape[:2]:
        raise ValueError(f"injector {pre}: lifted features {up.shape} do not match context {backproj.shape}")
    z1 = conv2d(up, params[f"{pre}.conv1.w"], 1, "valid", params[f"{pre}.conv1.b"])
    cat = concat_channels([z1, backproj.astype(z1.dtype, copy=False), env.astype(z1.dtype, copy=False)])
    z2 = conv2d(cat, params[f"{pre}.conv2.w"], 1, "same", params[f"{pre}.conv2.b"])
    return pixel_unshuffle(z2, r), {"up": up, "cat": cat, "r": r}


def injector_branch_backward(dout, cache, params, pre, grads):
    r = cache["r"]
    dz2 = pixel_shuffle(dout, r)
    dcat, dk2, db2 = conv2d_backward(cache["cat"], params[f"{pre}.conv2.w"], dz2, 1, "same")
    accumulate(grads, f"{pre}.conv2.w", dk2)
    accumulate(grads, f"{pre}.conv2.b", db2)
    dz1 = dcat[:, :, :1]
    dup, dk1, db1 = conv2d_backward(cache["up"], params[f"{pre}.conv1.w"], dz1, 1, "valid")
    accumulate(grads, f"{pre}.conv1.w", dk1)
    accumulate(grads, f"{pre}.conv1.b", db1)
    return pixel_unshuffle(dup, r)


def injector(x, ctx, params, pre):
    return x + injector_branch(x, ctx, params, pre)[0]


# ---------------------------------------------------------------- coupling

KINDS = ("residual", "attention", "injector")


def branch_forward(kind, x, aux, params, pre, groups=8, max_positions=256):
    temb, ctx = aux
    if kind == "residual":
        return residual_branch(x, temb, params, pre, groups)
    if kind == "attention":
        return attention_branch(x, params, pre, max_positions)
    if kind == "injector":
        return injector_branch(x, ctx, params, pre)
    raise ValueError(f"unknown coupling kind {kind!r}")


def branch_backward(kind, dout, cache, params, pre, grads, groups=8):
    """Returns ``(dx, dtemb)``; ``dtemb`` is None for blocks that ignore time."""
    if kind == "residual":
        return residual_branch_backward(dout, cache, params, pre, grads, groups)
    if kind == "attention":
        return attention_branch_backward(dout, cache, params, pre, grads), None
    return injector_branch_backward(dout, cache, params, pre, grads), None


def init_coupling(params, rng, pre, kind, c, r=1, dtype=np.float32):
    if c % 2:
        raise ValueError(f"coupling {pre} needs an even channel count, got {c}")
    for g in ("g1", "g2"):
        if kind == "residual":
            init_residual(params, rng, f"{pre}.{g}", c // 2, dtype)
        elif kind == "attention":
            init_attention(params, rng, f"{pre}.{g}", c // 2, dtype)
        elif kind == "injector":
            init_injector(params, rng, f"{pre}.{g}", c // 2, r, dtype=dtype)
        else:
            raise ValueError(f"unknown coupling kind {kind!r}")


class Coupling:
    """Additive two-stream coupling ``y1 = u1 + g1(u2); y2 = u2 + g2(y1)``."""

    def __init__(self, kind: str, pre: str, groups: int = 8, max_positions: int = 256):
        if kind not in KINDS:
            raise ValueError(f"unknown coupling kind {kind!r}")
        self.kind, self.pre = kind, pre
        self.groups, self.max_positions = groups, max_positions

    def _g(self, which, x, aux, params):
        return branch_forward(self.kind, x, aux, params, f"{self.pre}.{which}", self.groups, self.max_positions)

    def _g_back(self, which, d, cache, params, grads):
        return branch_backward(self.kind, d, cache, params, f"{self.pre}.{which}", grads, self.groups)

    @staticmethod
    def _halves(x):
        c = x.shape[2]
        if c % 2:
            raise ValueError(f"coupling needs an even channel count, got shape {x.shape}")
        return x[:, :, :c // 2], x[:, :, c // 2:]

    def forward(self, x, aux, params, keep_cache=False):
        u1, u2 = self._halves(x)
        g1, c1 = self._g("g1", u2, aux, params)
        y1 = u1 + g1
        g2, c2 = self._g("g2", y1, aux, params)
        y2 = u2 + g2
        y = concat_channels([y1, y2])
        return y, ((c1, c2) if keep_cache else None)

    def inverse(self, y, aux, params):
        y1, y2 = self._halves(y)
        u2 = y2 - self._g("g2", y1, aux, params)[0]
        u1 = y1 - self._g("g1", u2, aux, params)[0]
        return concat_channels([u1, u2])

    def backward_cached(self, dy, cache, params, grads):
        """Backprop through stored branch caches. Returns ``(dx, dtemb)``."""
        c1, c2 = cache
        dy1, dy2 = self._halves(dy)
        dtemb = None
        d, dt = self._g_back("g2", dy2, c2, params, grads)
        dtemb = _add(dtemb, dt)
        dy1 = dy1 + d
        d, dt = self._g_back("g1", dy1, c1, params, grads)
        dtemb = _add(dtemb, dt)
        return concat_channels([dy1, dy2 + d]), dtemb

    def backward(self, y, dy, aux, params, grads, ledger=None):
        """Reconstruct the input from ``y`` and backprop, recomputing branch internals.

        Returns ``(x, dx, dtemb)``. Branch caches live only while their own
        vector-Jacobian product is formed.
        """
        y1, y2 = self._halves(y)
        dy1, dy2 = self._halves(dy)
        dtemb = None
        g2, c2 = self._g("g2", y1, aux, params)
        handle = ledger.register("module-internal", c2) if ledger is not None else None
        u2 = y2 - g2
        d, dt = self._g_back("g2", dy2, c2, params, grads)
        if handle is not None:
            ledger.release(handle)
        del c2, g2
        dtemb = _add(dtemb, dt)
        dy1 = dy1 + d
        g1, c1 = self._g("g1", u2, aux, params)
        handle = ledger.register("module-internal", c1) if ledger is not None else None
        u1 = y1 - g1
        d, dt = self._g_back("g1", dy1, c1, params, grads)
        if handle is not None:
            ledger.release(handle)
        dtemb = _add(dtemb, dt)
        return concat_channels([u1, u2]), concat_channels([dy1, dy2 + d]), dtemb


def _add(a, b):
    if b is None:
        return a
    return b if a is None else a + b


def coupling_forward(x, module: Coupling, aux, params):
    return module.forward(x, aux, params)[0]


def coupling_inverse(y, module: Coupling, aux, params):
    return module.inverse(y, aux, params)


def coupling_backward(y, dy, module: Coupling, aux, params, grads, ledger=None):
    """Input gradient via reconstruction; parameter gradients accumulate into ``grads``."""
    _, dx, dtemb = module.backward(y, dy, aux, params, grads, ledger)
    return dx, dtemb
