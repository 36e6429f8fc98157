"""Invertible density model built from affine coupling blocks.

Each block permutes the dimensions, keeps the first half fixed, and applies
``y2 = x2 * exp(s_hat(x1)) + t(x1)`` to the second half, where ``s_hat`` is
the raw subnet output squashed as ``c * tanh(s / c)`` to keep ``exp`` tame.
The Jacobian is triangular, so the log-determinant is just the sum of
``s_hat`` terms, and the change-of-variables formula against a standard
normal prior gives exact log-densities.

Training minimizes mean negative log-likelihood with minibatch Adam; the
gradients are hand-derived reverse-mode passes through the coupling algebra
and the fully connected subnets, so the module has no autodiff dependency.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encode import EmbeddingSet

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class FlowConfig:
    n_blocks: int = 8
    hidden: int = 256
    clamp: float = 2.0
    learning_rate: float = 1e-3
    batch_size: int = 128
    epochs: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.n_blocks < 1 or self.hidden < 1:
            raise ValueError("n_blocks and hidden must be >= 1")
        if self.clamp <= 0:
            raise ValueError("clamp must be > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")


@dataclass
class Mlp:
    """Two hidden tanh layers; the pieces are plain arrays so the training
    loop can treat every parameter uniformly."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray

    def params(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]


@dataclass
class CouplingBlock:
    perm: np.ndarray  # (d,) a bijection of range(d)
    s_net: Mlp
    t_net: Mlp

    def __post_init__(self):
        if sorted(self.perm.tolist()) != list(range(len(self.perm))):
            raise ValueError("perm must be a bijection of the dimensions")


@dataclass
class NfModel:
    d: int
    clamp: float
    blocks: list[CouplingBlock] = field(default_factory=list)

    @property
    def n_parameters(self) -> int:
        return sum(p.size for p in self.params())

    def params(self) -> list[np.ndarray]:
        out = []
        for b in self.blocks:
            out.extend(b.s_net.params())
            out.extend(b.t_net.params())
        return out

    def copy(self) -> "NfModel":
        return NfModel(
            d=self.d,
            clamp=self.clamp,
            blocks=[
                CouplingBlock(
                    perm=b.perm.copy(),
                    s_net=Mlp(*(p.copy() for p in b.s_net.params())),
                    t_net=Mlp(*(p.copy() for p in b.t_net.params())),
                )
                for b in self.blocks
            ],
        )

    def log_density(self, z: np.ndarray) -> float | np.ndarray:
        return nf_log_density(self, z)


class FlowDivergenceError(RuntimeError):
    """Raised when the training loss stops being finite; carries the last
    finite model state and the loss trace up to the failure."""

    def __init__(self, message: str, model: NfModel, trace: list[float]):
        super().__init__(message)
        self.model = model
        self.trace = trace


def _split_sizes(d: int) -> tuple[int, int]:
    return (d + 1) // 2, d // 2


def _mlp_forward(net: Mlp, x: np.ndarray):
    h1 = np.tanh(x @ net.w1 + net.b1)
    h2 = np.tanh(h1 @ net.w2 + net.b2)
    out = h2 @ net.w3 + net.b3
    return out, (x, h1, h2)


def _mlp_backward(net: Mlp, cache, dout: np.ndarray):
    x, h1, h2 = cache
    dw3 = h2.T @ dout
    db3 = dout.sum(axis=0)
    dh2 = (dout @ net.w3.T) * (1.0 - h2**2)
    dw2 = h1.T @ dh2
    db2 = dh2.sum(axis=0)
    dh1 = (dh2 @ net.w2.T) * (1.0 - h1**2)
    dw1 = x.T @ dh1
    db1 = dh1.sum(axis=0)
    dx = dh1 @ net.w1.T
    return dx, [dw1, db1, dw2, db2, dw3, db3]


def _forward_batch(model: NfModel, X: np.ndarray, keep_cache: bool = False):
    n, d = X.shape
    d1, _ = _split_sizes(d)
    c = model.clamp
    logdet = np.zeros(n)
    x = X
    caches = []
    for block in model.blocks:
        xp = x[:, block.perm]
        x1, x2 = xp[:, :d1], xp[:, d1:]
        s_raw, s_cache = _mlp_forward(block.s_net, x1)
        t_out, t_cache = _mlp_forward(block.t_net, x1)
        th = np.tanh(s_raw / c)
        sh = c * th
        exp_sh = np.exp(sh)
        y2 = x2 * exp_sh + t_out
        logdet += sh.sum(axis=1)
        x = np.concatenate([x1, y2], axis=1)
        if keep_cache:
            caches.append((x2, th, exp_sh, s_cache, t_cache))
    return x, logdet, caches


def _backward_batch(model: NfModel, caches, gy: np.ndarray, glogdet: np.ndarray):
    """Reverse-mode pass; returns parameter gradients in ``model.params()``
    order. ``gy`` is the loss gradient at the flow output, ``glogdet`` the
    per-sample gradient on the total log-determinant."""
    d1, _ = _split_sizes(model.d)
    c = model.clamp
    per_block: list[list[np.ndarray]] = []
    for block, cache in zip(reversed(model.blocks), reversed(caches)):
        x2, th, exp_sh, s_cache, t_cache = cache
        gy1 = gy[:, :d1]
        gy2 = gy[:, d1:]
        gsh = gy2 * x2 * exp_sh + glogdet[:, None]
        gs_raw = gsh * (1.0 - th**2)
        gx1_s, s_grads = _mlp_backward(block.s_net, s_cache, gs_raw)
        gx1_t, t_grads = _mlp_backward(block.t_net, t_cache, gy2)
        gx1 = gy1 + gx1_s + gx1_t
        gx2 = gy2 * exp_sh
        gxp = np.concatenate([gx1, gx2], axis=1)
        gx = np.empty_like(gxp)
        gx[:, block.perm] = gxp
        gy = gx
        per_block.append(s_grads + t_grads)
    grads: list[np.ndarray] = []
    for block_grads in reversed(per_block):
        grads.extend(block_grads)
    return grads


def nf_forward(model: NfModel, z: np.ndarray):
    """Map latent points to the prior space; returns (u, logdet)."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    X = z.reshape(1, -1) if single else z
    if X.shape[1] != model.d:
        raise ValueError(f"dimension mismatch: model d={model.d}, input d={X.shape[1]}")
    u, logdet, _ = _forward_batch(model, X)
    if single:
        return u[0], float(logdet[0])
    return u, logdet


def nf_inverse(model: NfModel, u: np.ndarray) -> np.ndarray:
    """Exact algebraic inverse of :func:`nf_forward`."""
    u = np.asarray(u, dtype=np.float64)
    single = u.ndim == 1
    Y = u.reshape(1, -1) if single else u
    if Y.shape[1] != model.d:
        raise ValueError(f"dimension mismatch: model d={model.d}, input d={Y.shape[1]}")
    d1, _ = _split_sizes(model.d)
    c = model.clamp
    x = Y
    for block in reversed(model.blocks):
        y1, y2 = x[:, :d1], x[:, d1:]
        s_raw, _ = _mlp_forward(block.s_net, y1)
        sh = c * np.tanh(s_raw / c)
        t_out, _ = _mlp_forward(block.t_net, y1)
        x2 = (y2 - t_out) * np.exp(-sh)
        xp = np.concatenate([y1, x2], axis=1)
        prev = np.empty_like(xp)
        prev[:, block.perm] = xp
        x = prev
    return x[0] if single else x


def nf_log_density(model: NfModel, z: np.ndarray) -> float | np.ndarray:
    """log p(z) = log N(u; 0, I) + logdet with (u, logdet) = forward(z)."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    X = z.reshape(1, -1) if single else z
    if X.shape[1] != model.d:
        raise ValueError(f"dimension mismatch: model d={model.d}, input d={X.shape[1]}")
    u, logdet, _ = _forward_batch(model, X)
    out = -0.5 * np.sum(u**2, axis=1) - 0.5 * model.d * LOG_2PI + logdet
    return float(out[0]) if single else out


def nll_and_grads(model: NfModel, X: np.ndarray):
    """Mean negative log-likelihood of a batch and its parameter gradients."""
    n = X.shape[0]
    u, logdet, caches = _forward_batch(model, X, keep_cache=True)
    nll = 0.5 * np.sum(u**2) / n + 0.5 * model.d * LOG_2PI - logdet.sum() / n
    gu = u / n
    glogdet = np.full(n, -1.0 / n)
    grads = _backward_batch(model, caches, gu, glogdet)
    return float(nll), grads


def _build_mlp(d_in: int, hidden: int, d_out: int, rng, out_scale: float) -> Mlp:
    def lin(nin, nout, scale):
        return rng.normal(0.0, scale / np.sqrt(nin), size=(nin, nout))

    return Mlp(
        w1=lin(d_in, hidden, 1.0),
        b1=np.zeros(hidden),
        w2=lin(hidden, hidden, 1.0),
        b2=np.zeros(hidden),
        w3=lin(hidden, d_out, out_scale) if out_scale > 0 else np.zeros((hidden, d_out)),
        b3=np.zeros(d_out),
    )


def flow_init(d: int, cfg: FlowConfig) -> NfModel:
    """Fresh model with seeded permutations; output layers start at zero so
    the flow begins as a pure permutation (identity density)."""
    if d < 2:
        raise ValueError("flows need d >= 2")
    rng = np.random.default_rng([cfg.seed, 0])
    d1, d2 = _split_sizes(d)
    blocks = []
    for _ in range(cfg.n_blocks):
        perm = rng.permutation(d)
        blocks.append(
            CouplingBlock(
                perm=perm,
                s_net=_build_mlp(d1, cfg.hidden, d2, rng, out_scale=0.0),
                t_net=_build_mlp(d1, cfg.hidden, d2, rng, out_scale=0.0),
            )
        )
    return NfModel(d=d, clamp=cfg.clamp, blocks=blocks)


def random_flow(
    d: int,
    n_blocks: int = 4,
    hidden: int = 32,
    clamp: float = 2.0,
    seed: int = 0,
    scale: float = 0.5,
) -> NfModel:
    """Fully random flow (nonzero output layers); used to exercise the
    forward/inverse/gradient algebra away from the identity."""
    if d < 2:
        raise ValueError("flows need d >= 2")
    rng = np.random.default_rng(seed)
    d1, d2 = _split_sizes(d)
    blocks = []
    for _ in range(n_blocks):
        blocks.append(
            CouplingBlock(
                perm=rng.permutation(d),
                s_net=_build_mlp(d1, hidden, d2, rng, out_scale=scale),
                t_net=_build_mlp(d1, hidden, d2, rng, out_scale=scale),
            )
        )
    return NfModel(d=d, clamp=clamp, blocks=blocks)


def _as_normal_matrix(train) -> np.ndarray:
    if isinstance(train, EmbeddingSet):
        if not all(r.normal_flag for r in train.rows):
            raise ValueError("training set must contain normal rows only")
        return train.matrix()
    return np.asarray(train, dtype=np.float64)


def nf_fit(train, cfg: FlowConfig | None = None) -> tuple[NfModel, list[float]]:
    """Train by minibatch Adam; returns (model, per-epoch mean NLL trace).

    Deterministic for a fixed seed: initialization, permutations, and the
    epoch shuffles all come from generators derived from ``cfg.seed``. A
    non-finite batch loss aborts with :class:`FlowDivergenceError` carrying
    the last finite state.
    """
    cfg = cfg or FlowConfig()
    X = _as_normal_matrix(train)
    n, d = X.shape
    if n < cfg.batch_size:
        raise ValueError(f"need at least batch_size={cfg.batch_size} rows, got {n}")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite training data")

    model = flow_init(d, cfg)
    params = model.params()
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0
    rng = np.random.default_rng([cfg.seed, 1])
    trace: list[float] = []
    snapshot = model.copy()

    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for lo in range(0, n, cfg.batch_size):
            batch = X[order[lo : lo + cfg.batch_size]]
            nb = batch.shape[0]
            u, logdet, caches = _forward_batch(model, batch, keep_cache=True)
            loss = 0.5 * np.sum(u**2) / nb + 0.5 * d * LOG_2PI - logdet.sum() / nb
            if not np.isfinite(loss):
                raise FlowDivergenceError(
                    "training loss is no longer finite", snapshot, trace
                )
            grads = _backward_batch(model, caches, u / nb, np.full(nb, -1.0 / nb))
            epoch_loss += loss * nb
            step += 1
            bc1 = 1.0 - beta1**step
            bc2 = 1.0 - beta2**step
            for p, g, mi, vi in zip(params, grads, m, v):
                mi *= beta1
                mi += (1.0 - beta1) * g
                vi *= beta2
                vi += (1.0 - beta2) * g**2
                p -= cfg.learning_rate * (mi / bc1) / (np.sqrt(vi / bc2) + eps)
        trace.append(epoch_loss / n)
        snapshot = model.copy()
    return model, trace
