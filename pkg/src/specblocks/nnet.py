"""Small double-precision MLP kernel with hand-written derivatives.

Only what block training needs is implemented: forward evaluation, the
input gradient of a scalar network, the parameter gradient of a
directional input derivative ``d/dtheta <grad_x f(x), v>`` (forward
tangent propagated through the reverse pass), and AdamW with a step-decay
schedule.

Arrays use the row convention ``z = h @ W + b`` with ``W`` of shape
``(fan_in, fan_out)``; inputs may carry a leading batch axis.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf, expit

from .errors import InvalidArgumentError, NumericError

__all__ = [
    "ACTIVATIONS",
    "MlpParams",
    "init_mlp",
    "mlp_forward",
    "mlp_input_gradient",
    "grad_param_of_directional_input_gradient",
    "ForwardCache",
    "forward_cache",
    "input_gradient_from_cache",
    "directional_param_grad_from_cache",
    "OptimizerState",
    "adamw_init",
    "adamw_step",
    "scheduler_epoch",
]

_SQRT2 = np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _gelu(z):
    return 0.5 * z * (1.0 + erf(z / _SQRT2))


def _gelu_d1(z):
    return 0.5 * (1.0 + erf(z / _SQRT2)) + z * _INV_SQRT2PI * np.exp(-0.5 * z * z)


def _gelu_d2(z):
    return _INV_SQRT2PI * np.exp(-0.5 * z * z) * (2.0 - z * z)


def _tanh_d1(z):
    return 1.0 - np.tanh(z) ** 2


def _tanh_d2(z):
    t = np.tanh(z)
    return -2.0 * t * (1.0 - t * t)


def _softplus(z):
    return np.logaddexp(0.0, z)


def _softplus_d2(z):
    s = expit(z)
    return s * (1.0 - s)


# (sigma, sigma', sigma'')
ACTIVATIONS = {
    "gelu": (_gelu, _gelu_d1, _gelu_d2),
    "tanh": (np.tanh, _tanh_d1, _tanh_d2),
    "softplus": (_softplus, expit, _softplus_d2),
}


@dataclass
class MlpParams:
    layers: list  # [(W, b), ...]
    activation: str = "gelu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise InvalidArgumentError(f"unknown activation {self.activation!r}")
        self.layers = [(np.asarray(W, dtype=np.float64), np.asarray(b, dtype=np.float64))
                       for W, b in self.layers]
        for (W0, _), (W1, _) in zip(self.layers, self.layers[1:]):
            if W0.shape[1] != W1.shape[0]:
                raise InvalidArgumentError(f"layer shapes {W0.shape} and {W1.shape} do not chain")
        for W, b in self.layers:
            if b.shape != (W.shape[1],):
                raise InvalidArgumentError("bias shape does not match weight fan-out")

    @property
    def widths(self) -> list[int]:
        return [self.layers[0][0].shape[0]] + [W.shape[1] for W, _ in self.layers]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[1]

    def arrays(self) -> list[np.ndarray]:
        """Flat parameter list ``[W1, b1, W2, b2, ...]`` (views, not copies)."""
        return [x for W, b in self.layers for x in (W, b)]

    def set_arrays(self, arrays):
        it = iter(arrays)
        self.layers = [(np.array(next(it)), np.array(next(it))) for _ in self.layers]

    def copy(self) -> "MlpParams":
        return MlpParams([(W.copy(), b.copy()) for W, b in self.layers], self.activation)

    def to_dict(self) -> dict:
        return {"activation": self.activation,
                "layers": [{"W": W.tolist(), "b": b.tolist()} for W, b in self.layers]}

    @classmethod
    def from_dict(cls, d) -> "MlpParams":
        return cls([(np.array(l["W"], dtype=float), np.array(l["b"], dtype=float)) for l in d["layers"]],
                   d["activation"])


INIT_SCHEMES = ("he_uniform", "fan_in_uniform")


def init_mlp(widths, activation="gelu", seed=0, rng=None, scheme: str = "he_uniform") -> MlpParams:
    """Random initial parameters.

    ``"he_uniform"``: weights ``U(-sqrt(6/fan_in), sqrt(6/fan_in))``, zero biases.
    ``"fan_in_uniform"``: weights and biases ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``
    (the common default for dense layers).
    """
    if scheme not in INIT_SCHEMES:
        raise InvalidArgumentError(f"unknown init scheme {scheme!r}; choose from {INIT_SCHEMES}")
    rng = np.random.default_rng(seed) if rng is None else rng
    layers = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        if scheme == "he_uniform":
            lim = np.sqrt(6.0 / fan_in)
            layers.append((rng.uniform(-lim, lim, size=(fan_in, fan_out)), np.zeros(fan_out)))
        else:
            lim = 1.0 / np.sqrt(fan_in)
            W = rng.uniform(-lim, lim, size=(fan_in, fan_out))
            layers.append((W, rng.uniform(-lim, lim, size=fan_out)))
    return MlpParams(layers, activation)


@dataclass
class ForwardCache:
    x: np.ndarray
    zs: list  # pre-activations of hidden layers
    hs: list  # h_0 = x, h_l = sigma(z_l)
    out: np.ndarray
    single: bool
    d1s: list | None = None  # sigma'(z_l), filled on first use


def _d1s(p: MlpParams, cache: ForwardCache) -> list:
    if cache.d1s is None:
        d1 = ACTIVATIONS[p.activation][1]
        cache.d1s = [d1(z) for z in cache.zs]
    return cache.d1s


def forward_cache(p: MlpParams, x) -> ForwardCache:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.shape[-1] != p.widths[0]:
        raise InvalidArgumentError(f"input width {X.shape[-1]} != {p.widths[0]}")
    sigma = ACTIVATIONS[p.activation][0]
    h, zs, hs = X, [], [X]
    for W, b in p.layers[:-1]:
        z = h @ W + b
        h = sigma(z)
        zs.append(z)
        hs.append(h)
    W, b = p.layers[-1]
    return ForwardCache(X, zs, hs, h @ W + b, single)


def mlp_forward(p: MlpParams, x) -> np.ndarray:
    c = forward_cache(p, x)
    return c.out[0] if c.single else c.out


def _backward_seeds(p: MlpParams, cache: ForwardCache):
    """``g_l = d f / d z_l`` for every hidden layer (scalar output)."""
    d1s = _d1s(p, cache)
    B = cache.out.shape[0]
    W = p.layers[-1][0]
    up = np.broadcast_to(W[:, 0], (B, W.shape[0]))
    gs = [None] * len(cache.zs)
    for l in range(len(cache.zs) - 1, -1, -1):
        gs[l] = up * d1s[l]
        up = gs[l] @ p.layers[l][0].T
    return gs, up  # up == grad_x f


def input_gradient_from_cache(p: MlpParams, cache: ForwardCache):
    if p.out_dim != 1:
        raise InvalidArgumentError("input gradient needs a scalar-output network")
    if not cache.zs:
        W = p.layers[0][0]
        return [], np.broadcast_to(W[:, 0], cache.x.shape).copy()
    return _backward_seeds(p, cache)


def mlp_input_gradient(p: MlpParams, x) -> np.ndarray:
    """Reverse-mode ``grad_x f(x)`` of a scalar network."""
    c = forward_cache(p, x)
    _, g = input_gradient_from_cache(p, c)
    return g[0] if c.single else g


def directional_param_grad_from_cache(p: MlpParams, cache: ForwardCache, gs, v) -> list[np.ndarray]:
    """Parameter gradient of ``sum_batch <grad_x f(x_b), v_b>`` as ``[dW1, db1, ...]``.

    Forward-over-reverse: tangents ``zdot`` of the forward pass in direction
    ``v`` are pushed through the backward recursion for ``g_l``.
    """
    v = np.asarray(v, dtype=np.float64)
    V = v[None, :] if v.ndim == 1 else v
    if V.shape != cache.x.shape:
        raise InvalidArgumentError(f"direction shape {V.shape} != input shape {cache.x.shape}")
    d2 = ACTIVATIONS[p.activation][2]
    L = len(p.layers)
    if L == 1:
        W, b = p.layers[0]
        return [V.sum(axis=0)[:, None] * np.ones((1, W.shape[1])), np.zeros_like(b)]

    # forward tangents
    hdots, zdots = [V], []
    for l, (W, _) in enumerate(p.layers[:-1]):
        zd = hdots[-1] @ W
        zdots.append(zd)
        hdots.append(_d1s(p, cache)[l] * zd)

    # tangent of the backward seeds, top layer down
    grads = [None] * (2 * L)
    W_last = p.layers[-1][0]
    # f is affine in the top hidden state, so only its tangent enters there
    grads[2 * (L - 1)] = hdots[L - 1].sum(axis=0)[:, None]
    grads[2 * (L - 1) + 1] = np.zeros(1)
    B = V.shape[0]
    up = np.broadcast_to(W_last[:, 0], (B, W_last.shape[0]))
    updot = np.zeros_like(up)
    for l in range(L - 2, -1, -1):
        z, g, W = cache.zs[l], gs[l], p.layers[l][0]
        gdot = updot * _d1s(p, cache)[l] + up * d2(z) * zdots[l]
        grads[2 * l] = cache.hs[l].T @ gdot + hdots[l].T @ g
        grads[2 * l + 1] = gdot.sum(axis=0)
        up = g @ W.T
        updot = gdot @ W.T
    return grads


def grad_param_of_directional_input_gradient(p: MlpParams, x, v) -> list[np.ndarray]:
    """``d/dtheta <grad_x f_theta(x), v>``, summed over a leading batch axis."""
    if p.out_dim != 1:
        raise InvalidArgumentError("directional gradient needs a scalar-output network")
    c = forward_cache(p, x)
    gs, _ = input_gradient_from_cache(p, c)
    return directional_param_grad_from_cache(p, c, gs, v)


# ---------------------------------------------------------------------------
# AdamW with step decay
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: list
    v: list
    step: int = 0
    lr: float = 1e-3
    base_lr: float = 1e-3
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    step_size: int = 50
    gamma: float = 1.0
    epoch: int = 0
    extra: dict = field(default_factory=dict)


def adamw_init(params, lr=1e-3, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8,
               step_size=50, gamma=1.0) -> OptimizerState:
    return OptimizerState([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params],
                          0, lr, lr, weight_decay, tuple(betas), eps, int(step_size), gamma)


def adamw_step(params, grads, opt: OptimizerState):
    """One decoupled-weight-decay Adam update, in place; returns ``(params, opt)``."""
    if len(params) != len(grads) or len(params) != len(opt.m):
        raise InvalidArgumentError("parameter / gradient / moment lists differ in length")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient", location=opt.step)
    b1, b2 = opt.betas
    opt.step += 1
    bc1 = 1.0 - b1 ** opt.step
    bc2 = 1.0 - b2 ** opt.step
    for p, g, m, v in zip(params, grads, opt.m, opt.v):
        if p.shape != g.shape:
            raise InvalidArgumentError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if opt.weight_decay:
            p *= 1.0 - opt.lr * opt.weight_decay
        p -= (opt.lr / bc1) * m / (np.sqrt(v / bc2) + opt.eps)
    return params, opt


def scheduler_epoch(opt: OptimizerState) -> float:
    """Advance the epoch counter; the learning rate decays by ``gamma`` every ``step_size`` epochs."""
    opt.epoch += 1
    opt.lr = opt.base_lr * opt.gamma ** (opt.epoch // opt.step_size)
    return opt.lr
