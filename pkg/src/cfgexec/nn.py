"""Dense tensor ops for the model: activations, embedding, bidirectional GRU,
time pooling, layer normalization, dropout, and a finite-difference gradient
checker.

Every forward op has a matching hand-derived backward; the checker in
`finite_diff_check` is the safety net that keeps the two in sync. Ops are
pure functions over numpy arrays; f32 is the training precision, f64 the
verification precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

PAD_ID = 0
UNK_ID = 1
BOS_ID = 2
EOS_ID = 3


class NumericError(RuntimeError):
    """Raised when an op produces NaN/Inf or a contract is violated."""


def ensure_finite(name: str, x: np.ndarray) -> np.ndarray:
    if not np.isfinite(x).all():
        raise NumericError(f"nan-detected: non-finite values in {name}")
    return x


# ---------------------------------------------------------------------------
# activations


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh(x: np.ndarray) -> np.ndarray:
    return np.tanh(x)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


ACTIVATIONS: dict[str, tuple[Callable[[np.ndarray], np.ndarray],
                             Callable[[np.ndarray, np.ndarray], np.ndarray]]] = {
    # name -> (phi, dphi(out, pre) evaluated from the forward output/preactivation)
    "tanh": (tanh, lambda out, pre: 1.0 - out * out),
    "sigmoid": (sigmoid, lambda out, pre: out * (1.0 - out)),
    "relu": (relu, lambda out, pre: (pre > 0).astype(pre.dtype)),
}


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    if x.shape[-1] != w.shape[0]:
        raise NumericError(f"shape-mismatch: {x.shape} @ {w.shape}")
    y = x @ w
    if b is not None:
        y = y + b
    return y


# ---------------------------------------------------------------------------
# embedding


def embed(ids: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Look up rows of the embedding table; row PAD_ID is held at zero."""
    if ids.min() < 0 or ids.max() >= table.shape[0]:
        raise NumericError(
            f"id-out-of-range: ids in [{ids.min()}, {ids.max()}] vs table {table.shape[0]}"
        )
    return table[ids]


def embed_backward(ids: np.ndarray, d_out: np.ndarray, vocab_size: int) -> np.ndarray:
    """Scatter-add of upstream gradients into table rows; pad row stays frozen."""
    h = d_out.shape[-1]
    grad = np.zeros((vocab_size, h), dtype=d_out.dtype)
    np.add.at(grad, ids.reshape(-1), d_out.reshape(-1, h))
    grad[PAD_ID] = 0.0
    return grad


# ---------------------------------------------------------------------------
# layer normalization (per-row, eps inside the square root)

LN_EPS = 1e-5


@dataclass
class LayerNormCache:
    x_hat: np.ndarray
    inv_std: np.ndarray
    gain: np.ndarray


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> tuple[np.ndarray, LayerNormCache]:
    mu = x.mean(axis=-1, keepdims=True)
    d = x - mu
    var = (d * d).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LN_EPS)
    x_hat = d * inv_std
    return gain * x_hat + bias, LayerNormCache(x_hat, inv_std, gain)


def layer_norm_backward(d_out: np.ndarray, cache: LayerNormCache) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (dx, dgain, dbias)."""
    x_hat, inv_std, gain = cache.x_hat, cache.inv_std, cache.gain
    dgain = (d_out * x_hat).reshape(-1, x_hat.shape[-1]).sum(axis=0)
    dbias = d_out.reshape(-1, x_hat.shape[-1]).sum(axis=0)
    dxh = d_out * gain
    mean_dxh = dxh.mean(axis=-1, keepdims=True)
    mean_dxh_xh = (dxh * x_hat).mean(axis=-1, keepdims=True)
    dx = inv_std * (dxh - mean_dxh - x_hat * mean_dxh_xh)
    return dx, dgain, dbias


# ---------------------------------------------------------------------------
# time pooling over the token dimension


@dataclass
class PoolCache:
    mode: str
    mask: np.ndarray
    lengths: np.ndarray
    argmax: np.ndarray | None
    shape: tuple[int, ...]


def time_pool(x: np.ndarray, mode: str, mask: np.ndarray) -> tuple[np.ndarray, PoolCache]:
    """Pool (n, v, h) block states over real (unmasked) positions to (n, h)."""
    lengths = mask.sum(axis=1)
    if (lengths == 0).any():
        raise NumericError("all-pad-node: a block has no real token positions")
    m = mask[:, :, None].astype(x.dtype)
    if mode == "avg":
        pooled = (x * m).sum(axis=1) / lengths[:, None].astype(x.dtype)
        return pooled, PoolCache("avg", mask, lengths, None, x.shape)
    if mode == "max":
        neg = np.where(m > 0, x, np.array(-np.inf, dtype=x.dtype))
        arg = neg.argmax(axis=1)  # (n, h)
        pooled = np.take_along_axis(x, arg[:, None, :], axis=1)[:, 0, :]
        return pooled, PoolCache("max", mask, lengths, arg, x.shape)
    raise ValueError(f"unknown pool mode {mode!r}")


def time_pool_backward(d_out: np.ndarray, cache: PoolCache) -> np.ndarray:
    dx = np.zeros(cache.shape, dtype=d_out.dtype)
    if cache.mode == "avg":
        scale = d_out / cache.lengths[:, None].astype(d_out.dtype)
        dx += scale[:, None, :] * cache.mask[:, :, None].astype(d_out.dtype)
        return dx
    np.put_along_axis(dx, cache.argmax[:, None, :], d_out[:, None, :], axis=1)
    return dx


# ---------------------------------------------------------------------------
# dropout (inverted scaling; identity at eval)


def dropout_mask(shape: tuple[int, ...], rate: float, rng: np.random.Generator,
                 dtype: np.dtype) -> np.ndarray:
    keep = (rng.random(shape) >= rate).astype(dtype)
    return keep / np.asarray(1.0 - rate, dtype=dtype)


# ---------------------------------------------------------------------------
# GRU (reset-before-candidate), one direction, vectorized across nodes


@dataclass
class GruStepCache:
    x: np.ndarray
    h_prev: np.ndarray
    r: np.ndarray
    u: np.ndarray
    c: np.ndarray
    mask: np.ndarray


def gru_cell(x: np.ndarray, h_prev: np.ndarray, p: Mapping[str, np.ndarray],
             prefix: str) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """One GRU step: returns (h_new, r, u, c); the gate values feed the backward."""
    r = sigmoid(x @ p[f"{prefix}_Wr"] + h_prev @ p[f"{prefix}_Ur"] + p[f"{prefix}_br"])
    u = sigmoid(x @ p[f"{prefix}_Wu"] + h_prev @ p[f"{prefix}_Uu"] + p[f"{prefix}_bu"])
    c = np.tanh(x @ p[f"{prefix}_Wc"] + (r * h_prev) @ p[f"{prefix}_Uc"] + p[f"{prefix}_bc"])
    h = (1.0 - u) * h_prev + u * c
    return h, r, u, c


def _gru_direction(x: np.ndarray, mask: np.ndarray, p: Mapping[str, np.ndarray],
                   prefix: str, reverse: bool) -> tuple[np.ndarray, list[GruStepCache]]:
    n, v, h_in = x.shape
    h_dim = p[f"{prefix}_Ur"].shape[0]
    h = np.zeros((n, h_dim), dtype=x.dtype)
    out = np.zeros((n, v, h_dim), dtype=x.dtype)
    caches: list[GruStepCache] = []
    steps = range(v - 1, -1, -1) if reverse else range(v)
    for t in steps:
        m = mask[:, t].astype(x.dtype)[:, None]
        xt = x[:, t, :]
        h_new, r, u, c = gru_cell(xt, h, p, prefix)
        caches.append(GruStepCache(xt, h, r, u, c, m))
        out[:, t, :] = m * h_new
        h = m * h_new + (1.0 - m) * h
    return out, caches


def gru_direction_backward(d_out: np.ndarray, caches: list[GruStepCache],
                           p: Mapping[str, np.ndarray], prefix: str,
                           reverse: bool) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """BPTT for one direction; returns (dx, parameter grads)."""
    n, v, _ = d_out.shape
    grads = {f"{prefix}_{k}": np.zeros_like(p[f"{prefix}_{k}"])
             for k in ("Wr", "Wu", "Wc", "Ur", "Uu", "Uc", "br", "bu", "bc")}
    dx = np.zeros((n, v, caches[0].x.shape[1]), dtype=d_out.dtype)
    dh_carry = np.zeros((n, p[f"{prefix}_Ur"].shape[0]), dtype=d_out.dtype)
    steps = range(v - 1, -1, -1) if reverse else range(v)
    for idx, t in reversed(list(enumerate(steps))):
        cch = caches[idx]
        m = cch.mask
        dh_new = (d_out[:, t, :] + dh_carry) * m
        dh_prev = dh_carry * (1.0 - m)
        du = dh_new * (cch.c - cch.h_prev)
        dc = dh_new * cch.u
        dh_prev_cell = dh_new * (1.0 - cch.u)
        dpre_c = dc * (1.0 - cch.c * cch.c)
        grads[f"{prefix}_Wc"] += cch.x.T @ dpre_c
        grads[f"{prefix}_Uc"] += (cch.r * cch.h_prev).T @ dpre_c
        grads[f"{prefix}_bc"] += dpre_c.sum(axis=0)
        drh = dpre_c @ p[f"{prefix}_Uc"].T
        dr = drh * cch.h_prev
        dh_prev_cell = dh_prev_cell + drh * cch.r
        dxt = dpre_c @ p[f"{prefix}_Wc"].T
        dpre_u = du * cch.u * (1.0 - cch.u)
        grads[f"{prefix}_Wu"] += cch.x.T @ dpre_u
        grads[f"{prefix}_Uu"] += cch.h_prev.T @ dpre_u
        grads[f"{prefix}_bu"] += dpre_u.sum(axis=0)
        dxt += dpre_u @ p[f"{prefix}_Wu"].T
        dh_prev_cell = dh_prev_cell + dpre_u @ p[f"{prefix}_Uu"].T
        dpre_r = dr * cch.r * (1.0 - cch.r)
        grads[f"{prefix}_Wr"] += cch.x.T @ dpre_r
        grads[f"{prefix}_Ur"] += cch.h_prev.T @ dpre_r
        grads[f"{prefix}_br"] += dpre_r.sum(axis=0)
        dxt += dpre_r @ p[f"{prefix}_Wr"].T
        dh_prev_cell = dh_prev_cell + dpre_r @ p[f"{prefix}_Ur"].T
        dx[:, t, :] = dxt
        dh_carry = dh_prev + dh_prev_cell
    return dx, grads


@dataclass
class BiGruCache:
    fwd: list[GruStepCache]
    bwd: list[GruStepCache]
    concat: np.ndarray
    mask: np.ndarray


def bigru_forward(x: np.ndarray, params: Mapping[str, np.ndarray],
                  mask: np.ndarray) -> tuple[np.ndarray, BiGruCache]:
    """Bidirectional GRU over (n, v, h) inputs, mixed back to h per position.

    Masked positions pass the hidden state through unchanged, so the reversed
    pass walks exactly the real token prefix of each block. Output positions
    under the mask are zero.
    """
    if mask.sum(axis=1).min() == 0:
        raise NumericError("all-pad-node: a block has no real token positions")
    out_f, cache_f = _gru_direction(x, mask, params, "gruf", reverse=False)
    out_b, cache_b = _gru_direction(x, mask, params, "grub", reverse=True)
    concat = np.concatenate([out_f, out_b], axis=-1)
    mixed = concat @ params["mix_W"] + params["mix_b"]
    mixed = mixed * mask[:, :, None].astype(x.dtype)
    return mixed, BiGruCache(cache_f, cache_b, concat, mask)


def bigru_backward(d_out: np.ndarray, cache: BiGruCache,
                   params: Mapping[str, np.ndarray]) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Returns (dx over the embedded input, grads for GRU and mixing params)."""
    h = params["mix_b"].shape[0]
    d_mixed = d_out * cache.mask[:, :, None].astype(d_out.dtype)
    flat = d_mixed.reshape(-1, h)
    grads = {
        "mix_W": cache.concat.reshape(-1, cache.concat.shape[-1]).T @ flat,
        "mix_b": flat.sum(axis=0),
    }
    d_concat = d_mixed @ params["mix_W"].T
    d_f = d_concat[..., : d_concat.shape[-1] // 2]
    d_b = d_concat[..., d_concat.shape[-1] // 2 :]
    dx_f, g_f = gru_direction_backward(d_f, cache.fwd, params, "gruf", reverse=False)
    dx_b, g_b = gru_direction_backward(d_b, cache.bwd, params, "grub", reverse=True)
    grads.update(g_f)
    grads.update(g_b)
    return dx_f + dx_b, grads


# ---------------------------------------------------------------------------
# parameter store


@dataclass
class ParamStore:
    """Named parameters with matching gradient buffers and a seeded RNG.

    `frozen` maps a parameter name to a boolean mask of entries excluded from
    updates and finite-difference probing (the pad embedding row).
    """

    params: dict[str, np.ndarray]
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    frozen: dict[str, np.ndarray] = field(default_factory=dict)
    rng: np.random.Generator = field(default_factory=np.random.default_rng)

    def __post_init__(self) -> None:
        names = list(self.params)
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        for name, value in self.params.items():
            if name not in self.grads:
                self.grads[name] = np.zeros_like(value)
            if self.grads[name].shape != value.shape:
                raise ValueError(f"gradient shape mismatch for {name!r}")

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def accumulate(self, grads: Mapping[str, np.ndarray], scale: float = 1.0) -> None:
        for name, g in grads.items():
            self.grads[name] += scale * g.astype(self.grads[name].dtype, copy=False)

    def copy(self) -> "ParamStore":
        return ParamStore(
            params={k: v.copy() for k, v in self.params.items()},
            grads={k: v.copy() for k, v in self.grads.items()},
            frozen={k: v.copy() for k, v in self.frozen.items()},
            rng=self.rng,
        )


# ---------------------------------------------------------------------------
# finite differences


def finite_diff_check(
    loss_fn: Callable[[dict[str, np.ndarray]], tuple[float, dict[str, np.ndarray]]],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-4,
    frozen: Mapping[str, np.ndarray] | None = None,
) -> dict[str, float]:
    """Compare analytic gradients against central finite differences.

    loss_fn takes a parameter dict and returns (loss, grads); it must be
    deterministic (any sampling frozen by seed). Returns the worst relative
    error |a - n| / max(|a|, |n|, 1e-8) per parameter. Frozen entries are
    skipped. Raises NumericError("nondeterministic-loss") when two
    evaluations at the same point disagree.
    """
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    loss1, grads = loss_fn({k: v.copy() for k, v in base.items()})
    loss2, _ = loss_fn({k: v.copy() for k, v in base.items()})
    if loss1 != loss2:
        raise NumericError(f"nondeterministic-loss: {loss1!r} != {loss2!r}")
    worst: dict[str, float] = {}
    for name, value in base.items():
        skip = frozen.get(name) if frozen else None
        err = 0.0
        flat = value.reshape(-1)
        for i in range(flat.size):
            if skip is not None and skip.reshape(-1)[i]:
                continue
            orig = flat[i]
            flat[i] = orig + eps
            lp, _ = loss_fn({k: v.copy() for k, v in base.items()})
            flat[i] = orig - eps
            lm, _ = loss_fn({k: v.copy() for k, v in base.items()})
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * eps)
            analytic = float(grads[name].reshape(-1)[i])
            denom = max(abs(analytic), abs(numeric), 1e-8)
            err = max(err, abs(analytic - numeric) / denom)
        worst[name] = err
    return worst
