"""Composed coupling-layer diffeomorphism with random Fourier feature couplings.

Every layer splits its input into a pass-through part ``a`` (``mask`` True)
and a transformed part ``b``::

    a' = a
    b' = b * exp(s(a)) + t(a)

with ``s(a) = phi(a) @ w_scale`` and ``t(a) = phi(a) @ w_translate`` where
``phi`` is a frozen random Fourier feature map. Layers are applied in index
order, so ``layers[0]`` sees the raw input.

All functions accept a single point of shape ``(n,)`` or a batch ``(N, n)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._kernels import cos_sin, layer_backward, layer_eval, layer_features
from ._kernels import potential_pullback as _potential_pullback_kernel
from .core import AffineNormalizer
from .errors import CorruptFile, DimensionMismatch, GoalSingularity, VersionMismatch

FORMAT_VERSION = 1
EPS_GOAL = 1e-3
POTENTIALS = ("euclidean", "quadratic")


@dataclass(eq=False)
class RffFrame:
    """Frozen random Fourier feature frequencies and phases."""

    alphas: np.ndarray  # (m, d_in)
    betas: np.ndarray  # (m,)
    lengthscale: float

    def __post_init__(self):
        self.alphas = np.asarray(self.alphas, dtype=float)
        self.betas = np.asarray(self.betas, dtype=float)
        if self.alphas.ndim != 2 or self.betas.shape != (self.alphas.shape[0],):
            raise DimensionMismatch(
                f"alphas must be (m, d_in) and betas (m,); got {self.alphas.shape}, {self.betas.shape}"
            )
        if not self.lengthscale > 0:
            raise ValueError("lengthscale must be positive")

    @classmethod
    def sample(cls, rng: np.random.Generator, m: int, d_in: int, lengthscale: float):
        alphas = rng.normal(0.0, 1.0 / lengthscale, size=(m, d_in))
        betas = rng.uniform(0.0, 2.0 * np.pi, size=m)
        return cls(alphas, betas, lengthscale)

    @property
    def m(self) -> int:
        return self.alphas.shape[0]

    @property
    def d_in(self) -> int:
        return self.alphas.shape[1]

    @property
    def amplitude(self) -> float:
        return math.sqrt(2.0 / self.m)


@dataclass(eq=False)
class CouplingLayer:
    mask: np.ndarray  # bool (n,), True marks pass-through dimensions
    frame: RffFrame
    w_scale: np.ndarray  # (m, d_out)
    w_translate: np.ndarray  # (m, d_out)

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        self.a_idx = np.flatnonzero(self.mask)
        self.b_idx = np.flatnonzero(~self.mask)
        if len(self.a_idx) == 0 or len(self.b_idx) == 0:
            raise DimensionMismatch("mask must select a nonempty pass-through and transformed part")
        if self.frame.d_in != len(self.a_idx):
            raise DimensionMismatch(
                f"frame expects {self.frame.d_in} inputs, mask passes {len(self.a_idx)}"
            )
        shape = (self.frame.m, len(self.b_idx))
        self.w_scale = np.asarray(self.w_scale, dtype=float).reshape(shape)
        self.w_translate = np.asarray(self.w_translate, dtype=float).reshape(shape)

    @property
    def n(self) -> int:
        return len(self.mask)

    @property
    def d_in(self) -> int:
        return len(self.a_idx)

    @property
    def d_out(self) -> int:
        return len(self.b_idx)

    @property
    def n_params(self) -> int:
        return 2 * self.w_scale.size


def alternating_masks(n: int, K: int) -> list[np.ndarray]:
    """Masks whose pass-through set flips every layer.

    The first layer passes ``floor(n/2)`` dimensions through: the even
    indices when ``n`` is even, the odd ones when ``n`` is odd.
    """
    if n < 2:
        raise DimensionMismatch("coupling layers need n >= 2")
    first = np.arange(n) % 2 == (0 if n % 2 == 0 else 1)
    return [first if k % 2 == 0 else ~first for k in range(K)]


class DiffeoModel:
    """Learnable diffeomorphism plus the data normalization and goal."""

    def __init__(self, layers, normalizer=None, goal_x=None, seed=None, potential="euclidean"):
        self.layers = list(layers)
        if not self.layers:
            raise ValueError("a model needs at least one layer")
        n = self.layers[0].n
        m = self.layers[0].frame.m
        for k, layer in enumerate(self.layers):
            if layer.n != n:
                raise DimensionMismatch(f"layer {k} has dimension {layer.n}, expected {n}")
            if layer.frame.m != m:
                raise DimensionMismatch(f"layer {k} has {layer.frame.m} features, expected {m}")
        for k in range(1, len(self.layers)):
            if not np.array_equal(self.layers[k].mask, ~self.layers[k - 1].mask):
                raise CorruptFile(f"mask of layer {k} is not the complement of layer {k - 1}")
        if potential not in POTENTIALS:
            raise ValueError(f"unknown potential {potential!r}")
        self.normalizer = normalizer if normalizer is not None else AffineNormalizer.identity(n)
        if self.normalizer.dim != n:
            raise DimensionMismatch("normalizer dimension does not match the layers")
        goal = np.zeros(n) if goal_x is None else np.asarray(goal_x, dtype=float)
        if goal.shape != (n,):
            raise DimensionMismatch(f"goal must have shape ({n},)")
        self.goal_x = goal
        self.seed = seed
        self.potential = potential
        self._goal_y = None
        self._packed = None

    @classmethod
    def create(cls, n, K=10, m=200, lengthscale=0.45, seed=0, normalizer=None,
               goal_x=None, potential="euclidean"):
        """Identity-initialized model with frames drawn from ``seed``."""
        rng = np.random.default_rng(seed)
        layers = []
        for mask in alternating_masks(n, K):
            d_in = int(mask.sum())
            frame = RffFrame.sample(rng, m, d_in, lengthscale)
            zeros = np.zeros((m, n - d_in))
            layers.append(CouplingLayer(mask, frame, zeros, zeros.copy()))
        return cls(layers, normalizer, goal_x, seed, potential)

    @property
    def dim(self) -> int:
        return self.layers[0].n

    @property
    def K(self) -> int:
        return len(self.layers)

    @property
    def m(self) -> int:
        return self.layers[0].frame.m

    @property
    def lengthscale(self) -> float:
        return self.layers[0].frame.lengthscale

    @property
    def n_params(self) -> int:
        return sum(layer.n_params for layer in self.layers)

    @property
    def goal_y(self) -> np.ndarray:
        if self._goal_y is None:
            self._goal_y = forward(self, self.goal_x)
        return self._goal_y

    def params(self) -> np.ndarray:
        """Flat copy of all learnable weights, layer by layer (scale then translate)."""
        chunks = []
        for layer in self.layers:
            chunks.append(layer.w_scale.ravel())
            chunks.append(layer.w_translate.ravel())
        return np.concatenate(chunks)

    def set_params(self, theta) -> None:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise DimensionMismatch(f"expected {self.n_params} parameters, got {theta.shape}")
        i = 0
        for layer in self.layers:
            size = layer.w_scale.size
            layer.w_scale = theta[i:i + size].reshape(layer.w_scale.shape).copy()
            i += size
            layer.w_translate = theta[i:i + size].reshape(layer.w_translate.shape).copy()
            i += size
        self._goal_y = None
        self._packed = None

    def set_goal(self, goal_x) -> None:
        goal = np.asarray(goal_x, dtype=float)
        if goal.shape != (self.dim,):
            raise DimensionMismatch(f"goal must have shape ({self.dim},)")
        self.goal_x = goal
        self._goal_y = None

    def to_dict(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            "dim": self.dim,
            "K": self.K,
            "m": self.m,
            "lengthscale": self.lengthscale,
            "seed": self.seed,
            "potential": self.potential,
            "goal_x": self.goal_x.tolist(),
            "normalizer": self.normalizer.to_dict(),
            "layers": [
                {
                    "mask": layer.mask.tolist(),
                    "alphas": layer.frame.alphas.tolist(),
                    "betas": layer.frame.betas.tolist(),
                    "w_scale": layer.w_scale.ravel().tolist(),
                    "w_translate": layer.w_translate.ravel().tolist(),
                }
                for layer in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DiffeoModel":
        version = d.get("version")
        if version != FORMAT_VERSION:
            raise VersionMismatch(f"unsupported model format version {version!r}")
        try:
            n = int(d["dim"])
            lengthscale = float(d["lengthscale"])
            layers = []
            for k, item in enumerate(d["layers"]):
                mask = np.asarray(item["mask"], dtype=bool)
                if mask.shape != (n,):
                    raise DimensionMismatch(f"layer {k} mask has length {mask.size}, expected {n}")
                frame = RffFrame(np.asarray(item["alphas"], dtype=float),
                                 np.asarray(item["betas"], dtype=float), lengthscale)
                d_out = int((~mask).sum())
                ws = np.asarray(item["w_scale"], dtype=float)
                wt = np.asarray(item["w_translate"], dtype=float)
                if ws.size != frame.m * d_out or wt.size != frame.m * d_out:
                    raise DimensionMismatch(f"layer {k} weights do not match m * d_out")
                layers.append(CouplingLayer(mask, frame, ws, wt))
            if len(layers) != int(d["K"]):
                raise CorruptFile(f"file declares K={d['K']} but holds {len(layers)} layers")
            normalizer = AffineNormalizer.from_dict(d["normalizer"])
            return cls(layers, normalizer, d["goal_x"], d.get("seed"),
                       d.get("potential", "euclidean"))
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptFile(f"malformed model file: {exc}") from exc


# -- features ------------------------------------------------------------------


def rff_features(frame: RffFrame, z) -> np.ndarray:
    """Cosine features ``sqrt(2/m) cos(alpha_i . z + beta_i)``; shape ``(..., m)``."""
    z = np.asarray(z, dtype=float)
    return frame.amplitude * cos_sin(z @ frame.alphas.T + frame.betas)[0]


def rff_feature_jacobian(frame: RffFrame, z) -> np.ndarray:
    """Derivative of the features with respect to ``z``; shape ``(..., m, d_in)``."""
    z = np.asarray(z, dtype=float)
    sn = cos_sin(z @ frame.alphas.T + frame.betas)[1]
    return -frame.amplitude * sn[..., None] * frame.alphas


def _as_batch(z, n):
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != n:
        raise DimensionMismatch(f"expected trailing dimension {n}, got shape {z.shape}")
    return z.reshape(-1, n), z.shape


@dataclass
class _LayerCache:
    """Intermediates of one layer evaluated on a batch."""

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray  # cos(proj)
    s: np.ndarray
    e: np.ndarray  # exp(s)
    t: np.ndarray
    sn: np.ndarray = field(default=None)  # sin(proj)
    ds_da: np.ndarray = field(default=None)  # (N, d_out, d_in)
    dt_da: np.ndarray = field(default=None)


def _slope_basis(layer):
    """Matrices mapping sin(proj) to flattened ds/da and dt/da.

    ``basis[i, j * d_in + l] = -sqrt(2/m) * alpha[i, l] * w[i, j]``.
    """
    fr = layer.frame
    m = fr.m
    bs = (-fr.amplitude) * (layer.w_scale[:, :, None] * fr.alphas[:, None, :]).reshape(m, -1)
    bt = (-fr.amplitude) * (layer.w_translate[:, :, None] * fr.alphas[:, None, :]).reshape(m, -1)
    return bs, bt


def _layer_eval(layer: CouplingLayer, z: np.ndarray, derivs: bool = False) -> _LayerCache:
    fr = layer.frame
    a = z[:, layer.a_idx]
    b = z[:, layer.b_idx]
    if derivs:
        s, t, ds_da, dt_da = layer_eval(a, fr.alphas, fr.betas, fr.amplitude,
                                        layer.w_scale, layer.w_translate)
        return _LayerCache(a, b, None, s, np.exp(s), t, None, ds_da, dt_da)
    phi = rff_features(fr, a)
    s = phi @ layer.w_scale
    t = phi @ layer.w_translate
    return _LayerCache(a, b, phi / fr.amplitude, s, np.exp(s), t)


def _scale_translate(layer, a):
    fr = layer.frame
    s, t, _ = layer_features(np.ascontiguousarray(a), fr.alphas, fr.betas, fr.amplitude,
                             layer.w_scale, layer.w_translate, np.zeros((fr.m, 0)))
    return s, t


# -- single layer --------------------------------------------------------------


def layer_forward(layer: CouplingLayer, z) -> np.ndarray:
    zb, shape = _as_batch(z, layer.n)
    s, t = _scale_translate(layer, zb[:, layer.a_idx])
    out = zb.copy()
    out[:, layer.b_idx] = zb[:, layer.b_idx] * np.exp(s) + t
    return out.reshape(shape)


def layer_inverse(layer: CouplingLayer, z) -> np.ndarray:
    zb, shape = _as_batch(z, layer.n)
    s, t = _scale_translate(layer, zb[:, layer.a_idx])
    out = zb.copy()
    out[:, layer.b_idx] = (zb[:, layer.b_idx] - t) * np.exp(-s)
    return out.reshape(shape)


def _dense_layer_jacobian(layer, cache):
    N = len(cache.a)
    n = layer.n
    J = np.zeros((N, n, n))
    J[:, np.arange(n), np.arange(n)] = 1.0
    bi, ai = layer.b_idx, layer.a_idx
    J[:, bi, bi] = cache.e
    cross = (cache.b * cache.e)[:, :, None] * cache.ds_da + cache.dt_da
    J[:, bi[:, None], ai[None, :]] = cross
    return J


def layer_jacobian(layer: CouplingLayer, z) -> np.ndarray:
    """Dense ``(n, n)`` Jacobian in the original coordinate order."""
    zb, shape = _as_batch(z, layer.n)
    J = _dense_layer_jacobian(layer, _layer_eval(layer, zb, derivs=True))
    return J.reshape(shape[:-1] + (layer.n, layer.n))


def _inv_jac_step(layer, cache, u):
    """Solve ``J_layer w = u`` using the block-triangular structure."""
    ua = u[:, layer.a_idx]
    ub = u[:, layer.b_idx]
    sig = np.einsum("njl,nl->nj", cache.ds_da, ua)
    tau = np.einsum("njl,nl->nj", cache.dt_da, ua)
    w = u.copy()
    w[:, layer.b_idx] = (ub - tau) / cache.e - cache.b * sig
    return w, sig, tau


# -- composed map ----------------------------------------------------------------


def _forward_pass_fused(model, z):
    """``_forward_pass`` with derivatives, through the compiled feature kernel.

    Feature tables are not cached; the backward pass recomputes them blockwise.
    """
    caches = []
    for layer in model.layers:
        fr = layer.frame
        a = z[:, layer.a_idx]
        b = z[:, layer.b_idx]
        bs, bt = _slope_basis(layer)
        s, t, slopes = layer_features(a, fr.alphas, fr.betas, fr.amplitude,
                                             layer.w_scale, layer.w_translate, np.hstack([bs, bt]))
        half = bs.shape[1]
        shape = (len(z), layer.d_out, layer.d_in)
        e = np.exp(s)
        caches.append(_LayerCache(a, b, None, s, e, t, None, slopes[:, :half].reshape(shape),
                                  slopes[:, half:].reshape(shape)))
        z = z.copy()
        z[:, layer.b_idx] = b * e + t
    return z, caches


def _forward_pass(model, z, derivs):
    caches = []
    for layer in model.layers:
        cache = _layer_eval(layer, z, derivs)
        z = z.copy()
        z[:, layer.b_idx] = cache.b * cache.e + cache.t
        caches.append(cache)
    return z, caches


def forward(model: DiffeoModel, x) -> np.ndarray:
    """Map demonstration-space points to latent space."""
    xb, shape = _as_batch(x, model.dim)
    z = xb
    for layer in model.layers:
        s, t = _scale_translate(layer, z[:, layer.a_idx])
        z = z.copy()
        z[:, layer.b_idx] = z[:, layer.b_idx] * np.exp(s) + t
    return z.reshape(shape)


def inverse(model: DiffeoModel, y) -> np.ndarray:
    yb, shape = _as_batch(y, model.dim)
    z = yb
    for layer in reversed(model.layers):
        s, t = _scale_translate(layer, z[:, layer.a_idx])
        z = z.copy()
        z[:, layer.b_idx] = (z[:, layer.b_idx] - t) * np.exp(-s)
    return z.reshape(shape)


def jacobian(model: DiffeoModel, x) -> np.ndarray:
    """Chain-rule product of the layer Jacobians, ``J_K ... J_1``."""
    xb, shape = _as_batch(x, model.dim)
    _, caches = _forward_pass(model, xb, derivs=True)
    J = None
    for layer, cache in zip(model.layers, caches):
        Jk = _dense_layer_jacobian(layer, cache)
        J = Jk if J is None else Jk @ J
    return J.reshape(shape[:-1] + (model.dim, model.dim))


def _pullback_from_caches(model, caches, v):
    u = v
    for layer, cache in zip(reversed(model.layers), reversed(caches)):
        u, _, _ = _inv_jac_step(layer, cache, u)
    return u


def pullback_velocity(model: DiffeoModel, x, v_latent) -> np.ndarray:
    """``J(x)^-1 v_latent``, one triangular solve per layer, no dense matrix."""
    xb, shape = _as_batch(x, model.dim)
    vb = np.broadcast_to(np.asarray(v_latent, dtype=float), shape).reshape(-1, model.dim)
    _, caches = _forward_pass(model, xb, derivs=True)
    return _pullback_from_caches(model, caches, vb).reshape(shape)


def forward_with_pullback(model: DiffeoModel, x, latent_field):
    """Return ``(y, J(x)^-1 latent_field(y))`` from a single forward sweep."""
    xb, shape = _as_batch(x, model.dim)
    y, caches = _forward_pass(model, xb, derivs=True)
    v = latent_field(y)
    return y.reshape(shape), _pullback_from_caches(model, caches, v).reshape(shape)


def _packed_layers(model: DiffeoModel):
    """Layer data stacked into arrays padded to ``n`` columns, cached until ``set_params``."""
    if model._packed is None:
        model._packed = _pack(model)
    return model._packed


def _pack(model):
    K, n, m = model.K, model.dim, model.m
    a_idx = np.zeros((K, n), dtype=np.int64)
    b_idx = np.zeros((K, n), dtype=np.int64)
    d_in = np.zeros(K, dtype=np.int64)
    d_out = np.zeros(K, dtype=np.int64)
    alphas = np.zeros((K, m, n))
    betas = np.zeros((K, m))
    ws = np.zeros((K, m, n))
    wt = np.zeros((K, m, n))
    for k, layer in enumerate(model.layers):
        di, do = layer.d_in, layer.d_out
        a_idx[k, :di] = layer.a_idx
        b_idx[k, :do] = layer.b_idx
        d_in[k], d_out[k] = di, do
        alphas[k, :, :di] = layer.frame.alphas
        betas[k] = layer.frame.betas
        ws[k, :, :do] = layer.w_scale
        wt[k, :, :do] = layer.w_translate
    return a_idx, b_idx, d_in, d_out, alphas, betas, model.layers[0].frame.amplitude, ws, wt


def potential_pullback(model: DiffeoModel, x, kind: str, radius: float = 0.0):
    """Field of a built-in potential pulled back through the model.

    Returns ``(f, distance)`` for a batch ``(N, n)``: ``f = J(x)^-1 v(psi(x))``
    with ``v`` the unit direction to the latent goal (``"euclidean"``) or
    ``-(psi(x) - goal)`` (``"quadratic"``), and ``distance`` the latent
    distance to the goal. Rows with ``distance <= radius`` get zero.
    """
    if kind not in POTENTIALS:
        raise ValueError(f"unknown potential {kind!r}")
    xb = np.ascontiguousarray(x, dtype=float)
    if xb.ndim != 2 or xb.shape[1] != model.dim:
        raise DimensionMismatch(f"expected an (N, {model.dim}) batch, got {xb.shape}")
    return _potential_pullback_kernel(xb, *_packed_layers(model), model.goal_y,
                                      kind == "quadratic", float(radius))


# -- training objective --------------------------------------------------------


def _latent_direction(d, kind):
    if kind == "euclidean":
        return -d / np.linalg.norm(d, axis=1, keepdims=True)
    return -d


def loss_gradient(model: DiffeoModel, batch, l2: float = 0.0, eps_goal: float = EPS_GOAL,
                  potential: str | None = None):
    """Mean squared velocity error plus ``l2 * |theta|^2``, and its exact gradient.

    ``batch`` is a pair ``(X, Xdot)`` of ``(N, n)`` arrays in normalized
    coordinates. The gradient is taken through the forward map, the latent
    field (including the dependence of the latent goal on the weights) and
    the layer-wise inverse-Jacobian solve.
    """
    X, Xdot = (np.asarray(a, dtype=float) for a in batch)
    if X.ndim != 2 or X.shape != Xdot.shape or len(X) == 0:
        raise DimensionMismatch("batch must be two nonempty (N, n) arrays of equal shape")
    kind = potential or model.potential
    N, n = X.shape
    layers = model.layers
    K = len(layers)

    z_all, caches = _forward_pass_fused(model, np.vstack([X, model.goal_x[None, :]]))
    y, y_goal = z_all[:N], z_all[N]
    d = y - y_goal
    dist = np.linalg.norm(d, axis=1)
    if np.any(dist <= eps_goal):
        raise GoalSingularity(
            f"{int(np.sum(dist <= eps_goal))} batch point(s) lie within {eps_goal} of the latent goal"
        )
    v = _latent_direction(d, kind)

    # inverse-Jacobian chain on the data rows: us[k] = J_k^-1 ... J_{K-1}^-1 v
    rows = [_LayerCache(c.a[:N], c.b[:N], None, c.s[:N], c.e[:N], c.t[:N], None,
                        c.ds_da[:N], c.dt_da[:N]) for c in caches]
    us = [None] * (K + 1)
    sig_tau = [None] * K
    us[K] = v
    for k in reversed(range(K)):
        us[k], sig, tau = _inv_jac_step(layers[k], rows[k], us[k + 1])
        sig_tau[k] = (sig, tau)
    resid = us[0] - Xdot
    data_loss = float(np.sum(resid * resid) / N)

    grads_s = [np.zeros_like(layer.w_scale) for layer in layers]
    grads_t = [np.zeros_like(layer.w_translate) for layer in layers]

    # reverse through the inverse-Jacobian chain (layer 0 produced us[0])
    extras = [None] * K
    ubar = 2.0 * resid / N
    for k in range(K):
        layer, rc = layers[k], rows[k]
        ai, bi = layer.a_idx, layer.b_idx
        uin = us[k + 1]
        ua, ub = uin[:, ai], uin[:, bi]
        sig, tau = sig_tau[k]
        g = ubar[:, bi]
        sig_bar = -rc.b * g
        tau_bar = -g / rc.e
        nxt = ubar.copy()
        nxt[:, bi] = g / rc.e
        nxt[:, ai] += (np.einsum("njl,nj->nl", rc.ds_da, sig_bar)
                       + np.einsum("njl,nj->nl", rc.dt_da, tau_bar))
        ds_bar = sig_bar[:, :, None] * ua[:, None, :]
        dt_bar = tau_bar[:, :, None] * ua[:, None, :]
        b_bar = -g * sig
        s_bar = -g * (ub - tau) / rc.e
        extras[k] = (ds_bar.reshape(N, -1), dt_bar.reshape(N, -1), b_bar, s_bar)
        ubar = nxt
    v_bar = ubar

    if kind == "euclidean":
        vhat = d / dist[:, None]
        d_bar = -(v_bar - vhat * np.sum(vhat * v_bar, axis=1, keepdims=True)) / dist[:, None]
    else:
        d_bar = -v_bar
    zbar = np.zeros((N + 1, n))
    zbar[:N] = d_bar
    zbar[N] = -d_bar.sum(axis=0)

    # reverse through the forward map, merging the chain's dependence on z_k
    for k in reversed(range(K)):
        layer, cache = layers[k], caches[k]
        fr = layer.frame
        ai, bi = layer.a_idx, layer.b_idx
        ds_bar, dt_bar, b_bar, s_bar_u = extras[k]
        h = zbar[:, bi]
        s_bar = h * cache.b * cache.e
        s_bar[:N] += s_bar_u
        nxt = zbar.copy()
        nxt[:, bi] = h * cache.e
        nxt[:N, bi] += b_bar
        # ds/da and dt/da are linear in sin(proj) through the slope basis
        slope_bar = np.hstack([ds_bar, dt_bar])
        a_bar, g_s, g_t, g_basis = layer_backward(
            np.ascontiguousarray(cache.a), s_bar, np.ascontiguousarray(h), slope_bar, fr.alphas,
            fr.betas, fr.amplitude, layer.w_scale, layer.w_translate, np.hstack(_slope_basis(layer)))
        half = ds_bar.shape[1]
        shape3 = (fr.m, layer.d_out, layer.d_in)
        coef = -fr.amplitude * fr.alphas[:, None, :]
        grads_s[k] += g_s + np.sum(g_basis[:, :half].reshape(shape3) * coef, axis=2)
        grads_t[k] += g_t + np.sum(g_basis[:, half:].reshape(shape3) * coef, axis=2)
        nxt[:, ai] += a_bar
        zbar = nxt

    grad = np.concatenate([np.concatenate([gs.ravel(), gt.ravel()])
                           for gs, gt in zip(grads_s, grads_t)])
    loss = data_loss
    if l2:
        theta = model.params()
        loss += l2 * float(theta @ theta)
        grad = grad + 2.0 * l2 * theta
    return loss, grad
