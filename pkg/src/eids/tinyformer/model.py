"""Numeric core of the classifier: parameters, forward pass, loss and backward pass.

Shapes use ``B`` batch, ``N`` padded flow length, ``d`` packet bytes,
``d_m`` hidden width, ``h`` heads of width ``d_h`` and ``c`` classes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import encodings as enc
from .config import REFERENCE_PARAM_COUNT, ModelConfig


class ShapeMismatch(ValueError):
    pass


class NonFiniteActivation(FloatingPointError):
    def __init__(self, layer: str):
        super().__init__(f"non-finite activation in {layer}")
        self.layer = layer


@dataclass
class ModelWeights:
    config: ModelConfig
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def copy(self) -> "ModelWeights":
        return ModelWeights(self.config, {k: v.copy() for k, v in self.params.items()},
                            {k: v.copy() for k, v in self.buffers.items()})

    def predict_proba(self, X, M, T) -> np.ndarray:
        return forward(self, X, M, T)[0]


def _block_shapes(cfg: ModelConfig, l: int) -> dict[str, tuple[int, ...]]:
    p = f"block{l}."
    return {
        p + "W_q": (cfg.d_m, cfg.inner), p + "b_q": (cfg.inner,),
        p + "W_k": (cfg.d_m, cfg.inner), p + "b_k": (cfg.inner,),
        p + "W_v": (cfg.d_m, cfg.inner), p + "b_v": (cfg.inner,),
        p + "W_o": (cfg.inner, cfg.d_m), p + "b_o": (cfg.d_m,),
        p + "ln1_gamma": (cfg.d_m,), p + "ln1_beta": (cfg.d_m,),
        p + "W_ff1": (cfg.d_m, cfg.d_ff), p + "b_ff1": (cfg.d_ff,),
        p + "W_ff2": (cfg.d_ff, cfg.d_m), p + "b_ff2": (cfg.d_m,),
        p + "ln2_gamma": (cfg.d_m,), p + "ln2_beta": (cfg.d_m,),
    }


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name and shape of every trainable tensor, in archive order."""
    shapes = {"input_proj.W": (cfg.d, cfg.d_m), "input_proj.b": (cfg.d_m,)}
    for l in range(cfg.L):
        shapes.update(_block_shapes(cfg, l))
    shapes.update({"head.W": (cfg.d_m, cfg.c), "head.b": (cfg.c,)})
    if cfg.pe_family == "fourier":
        shapes["pe.freqs"] = (cfg.d_m // 2,)
    return shapes


def init_weights(cfg: ModelConfig, seed: int = 0) -> ModelWeights:
    """Glorot-uniform matrices, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    dtype = np.dtype(cfg.dtype)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[1]
        if name == "pe.freqs":
            value = enc.init_fourier_freqs(cfg.d_m, cfg.theta_base)
        elif leaf.endswith("gamma"):
            value = np.ones(shape)
        elif len(shape) == 2:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            value = rng.uniform(-limit, limit, size=shape)
        else:
            value = np.zeros(shape)
        params[name] = value.astype(dtype)
    buffers = {}
    if cfg.pe_kind == "sin":
        buffers["pe.table"] = enc.pe_sinusoidal(np.arange(cfg.N), cfg.d_m, cfg.theta_base).astype(dtype)
    return ModelWeights(cfg, params, buffers)


def count_params(weights: ModelWeights, include_pe: bool = False) -> int:
    """Trainable parameter count; the sinusoidal table is never counted."""
    return sum(v.size for k, v in weights.params.items() if include_pe or not k.startswith("pe."))


def param_breakdown(weights: ModelWeights) -> dict[str, int]:
    """Parameter counts grouped as input projection, Q/K/V, output projection, FFN, norms, head."""
    groups = {"input_proj": 0, "qkv": 0, "out_proj": 0, "ffn1": 0, "ffn2": 0, "layer_norm": 0, "head": 0}
    for name, value in weights.params.items():
        leaf = name.rsplit(".", 1)[1]
        if name.startswith("input_proj"):
            groups["input_proj"] += value.size
        elif name.startswith("head"):
            groups["head"] += value.size
        elif leaf[-1] in "qkv" and leaf[:2] in ("W_", "b_"):
            groups["qkv"] += value.size
        elif leaf.endswith("_o"):
            groups["out_proj"] += value.size
        elif leaf.endswith("ff1"):
            groups["ffn1"] += value.size
        elif leaf.endswith("ff2"):
            groups["ffn2"] += value.size
        elif leaf.startswith("ln"):
            groups["layer_norm"] += value.size
    return groups


def check_reference_count(weights: ModelWeights) -> None:
    if weights.config.is_reference() and count_params(weights) != REFERENCE_PARAM_COUNT:
        raise ShapeMismatch(f"reference configuration must have {REFERENCE_PARAM_COUNT} "
                            f"parameters, found {count_params(weights)}")


# --------------------------------------------------------------------------
# forward


def _dropout(shape, p: float, rng, dtype):
    keep = rng.random(shape) >= p
    return keep.astype(dtype) / dtype.type(1.0 - p)


def _layer_norm(x, gamma, beta, eps):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return xhat * gamma + beta, (xhat, inv)


def _layer_norm_backward(dy, gamma, cache):
    xhat, inv = cache
    dxhat = dy * gamma
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    red = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(axis=red), dy.sum(axis=red)


def _softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def positions_for(cfg: ModelConfig, M: np.ndarray, T: np.ndarray) -> np.ndarray:
    """Indices 0..N-1 for the static encodings, scaled timestamps for the dynamic ones."""
    if cfg.dynamic:
        return np.where(M, T, 0.0) * cfg.time_scale
    return np.broadcast_to(np.arange(M.shape[1], dtype=np.float64), M.shape)


@dataclass
class ForwardTrace:
    X: np.ndarray
    M: np.ndarray
    positions: np.ndarray
    train: bool
    acts: dict = field(default_factory=dict)
    blocks: list = field(default_factory=list)

    def attention(self, layer: int = 0) -> np.ndarray:
        """Attention weights ``(B, h, N, N)`` of one block, before dropout."""
        return self.blocks[layer]["A"]


def forward(weights: ModelWeights, X, M, T=None, train: bool = False, rng=None):
    """Class probabilities ``(B, c)`` and the trace needed by :func:`backward`.

    ``X`` is ``(B, N', d)`` with ``N' <= N``, ``M`` the boolean validity mask
    and ``T`` the relative timestamps (only read by the dynamic encodings).
    Dropout is active only with ``train=True`` and needs ``rng``.
    """
    cfg, P = weights.config, weights.params
    dt = weights.dtype
    X = np.asarray(X, dtype=dt)
    M = np.asarray(M, dtype=bool)
    if X.ndim != 3 or X.shape[2] != cfg.d or X.shape[1] > cfg.N or M.shape != X.shape[:2]:
        raise ShapeMismatch(f"expected (B, <= {cfg.N}, {cfg.d}) input with matching mask, "
                            f"got {X.shape} and {M.shape}")
    if not M.any(axis=1).all():
        raise ShapeMismatch("every flow needs at least one valid packet")
    T = np.zeros(M.shape) if T is None else np.asarray(T, dtype=np.float64)
    B, N, _ = X.shape
    drop = train and cfg.p_drop > 0
    if drop and rng is None:
        raise ValueError("training-mode forward needs an rng for dropout")

    pos = positions_for(cfg, M, T)
    tr = ForwardTrace(X, M, pos, train)
    e = X @ P["input_proj.W"] + P["input_proj.b"]
    family = cfg.pe_family
    if family == "sin":
        pe = (weights.buffers["pe.table"][:N] if not cfg.dynamic
              else enc.pe_sinusoidal(pos, cfg.d_m, cfg.theta_base).astype(dt))
        e = e + pe
    elif family == "fourier":
        e = e + enc.pe_fourier(pos, P["pe.freqs"]).astype(dt)
    if family == "rope":
        thetas = enc.rope_thetas(cfg.d_h, cfg.d_m, cfg.theta_base, cfg.rope_style)
        cos, sin = enc.rope_angles(pos[:, None, :], thetas)
        tr.acts["rope"] = (cos.astype(dt), sin.astype(dt))
    if drop:
        tr.acts["D_in"] = _dropout(e.shape, cfg.p_drop, rng, dt)
        e = e * tr.acts["D_in"]
    _finite(e, "input_proj")

    key_ok = M[:, None, None, :]
    scale = dt.type(1.0 / np.sqrt(cfg.d_h))
    H = e
    for l in range(cfg.L):
        p = f"block{l}."
        c = {"H": H}

        def heads(z):
            return z.reshape(B, N, cfg.h, cfg.d_h).transpose(0, 2, 1, 3)

        Q = heads(H @ P[p + "W_q"] + P[p + "b_q"])
        K = heads(H @ P[p + "W_k"] + P[p + "b_k"])
        V = heads(H @ P[p + "W_v"] + P[p + "b_v"])
        if family == "rope":
            cos, sin = tr.acts["rope"]
            Q = enc.rope_apply(Q, cos, sin)
            K = enc.rope_apply(K, cos, sin)
        S = np.where(key_ok, (Q @ K.transpose(0, 1, 3, 2)) * scale, -np.inf)
        A = _softmax(S)
        Ad = A
        if drop:
            c["D_att"] = _dropout(A.shape, cfg.p_drop, rng, dt)
            Ad = A * c["D_att"]
        O = (Ad @ V).transpose(0, 2, 1, 3).reshape(B, N, cfg.inner)
        Y = O @ P[p + "W_o"] + P[p + "b_o"]
        if drop:
            c["D_o"] = _dropout(Y.shape, cfg.p_drop, rng, dt)
            Y = Y * c["D_o"]
        Z1, c["ln1"] = _layer_norm(H + Y, P[p + "ln1_gamma"], P[p + "ln1_beta"], cfg.ln_eps)
        F1 = Z1 @ P[p + "W_ff1"] + P[p + "b_ff1"]
        G = np.maximum(F1, 0)
        F2 = G @ P[p + "W_ff2"] + P[p + "b_ff2"]
        if drop:
            c["D_ff"] = _dropout(F2.shape, cfg.p_drop, rng, dt)
            F2 = F2 * c["D_ff"]
        H, c["ln2"] = _layer_norm(Z1 + F2, P[p + "ln2_gamma"], P[p + "ln2_beta"], cfg.ln_eps)
        c.update(Q=Q, K=K, V=V, A=A, Ad=Ad, O=O, Z1=Z1, F1=F1, G=G)
        tr.blocks.append(c)
        _finite(H, f"block{l}")

    w = M.astype(dt)[:, :, None]
    count = w.sum(axis=1)
    pooled = (H * w).sum(axis=1) / count
    logits = pooled @ P["head.W"] + P["head.b"]
    probs = _softmax(logits)
    _finite(probs, "head")
    tr.acts.update(pooled=pooled, count=count, w=w, logits=logits)
    return probs, tr


def _finite(x, layer):
    if not np.all(np.isfinite(x)):
        raise NonFiniteActivation(layer)


# --------------------------------------------------------------------------
# loss


def edl_weights(lengths, decay: float = 0.1) -> np.ndarray:
    return np.exp(-decay * np.asarray(lengths, dtype=np.float64))


def edl_loss(probs, labels, lengths, normalize: bool = False, weights=None, decay: float = 0.1) -> float:
    """Early-detection loss: ``sum_i exp(-0.1 n_i) * CE_i``.

    ``normalize`` divides by the weight total; ``weights`` overrides the
    length-derived weights.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if not (len(probs) == len(labels) == len(lengths)):
        raise ValueError("probabilities, labels and lengths differ in batch size")
    w = edl_weights(lengths, decay) if weights is None else np.asarray(weights, dtype=np.float64)
    ce = -np.log(np.maximum(probs[np.arange(len(labels)), labels], np.finfo(np.float64).tiny))
    total = float((w * ce).sum())
    return total / w.sum() if normalize and w.sum() > 0 else total


def edl_logit_grad(probs, labels, lengths, normalize: bool = False, weights=None,
                   decay: float = 0.1) -> np.ndarray:
    """Gradient of :func:`edl_loss` with respect to the logits."""
    labels = np.asarray(labels)
    w = edl_weights(lengths, decay) if weights is None else np.asarray(weights, dtype=np.float64)
    if normalize and w.sum() > 0:
        w = w / w.sum()
    g = np.array(probs, dtype=np.float64)
    g[np.arange(len(labels)), labels] -= 1.0
    return (g * w[:, None]).astype(probs.dtype)


# --------------------------------------------------------------------------
# backward


def backward(weights: ModelWeights, trace: ForwardTrace, dlogits) -> dict[str, np.ndarray]:
    """Gradients of every trainable tensor given ``dL/dlogits``; dropout masks come from the trace."""
    cfg, P = weights.config, weights.params
    dt = weights.dtype
    a = trace.acts
    dlogits = np.asarray(dlogits, dtype=dt)
    B, N = trace.M.shape
    grads = {
        "head.W": a["pooled"].T @ dlogits,
        "head.b": dlogits.sum(axis=0),
    }
    dpooled = dlogits @ P["head.W"].T
    dH = dpooled[:, None, :] * a["w"] / a["count"][:, None, :]
    scale = dt.type(1.0 / np.sqrt(cfg.d_h))
    family = cfg.pe_family

    def flat(z):
        return z.reshape(-1, z.shape[-1])

    for l in reversed(range(cfg.L)):
        p = f"block{l}."
        c = trace.blocks[l]
        dR2, grads[p + "ln2_gamma"], grads[p + "ln2_beta"] = _layer_norm_backward(dH, P[p + "ln2_gamma"], c["ln2"])
        dF2 = dR2 * c["D_ff"] if "D_ff" in c else dR2
        grads[p + "W_ff2"] = flat(c["G"]).T @ flat(dF2)
        grads[p + "b_ff2"] = flat(dF2).sum(axis=0)
        dF1 = (dF2 @ P[p + "W_ff2"].T) * (c["F1"] > 0)
        grads[p + "W_ff1"] = flat(c["Z1"]).T @ flat(dF1)
        grads[p + "b_ff1"] = flat(dF1).sum(axis=0)
        dZ1 = dR2 + dF1 @ P[p + "W_ff1"].T
        dR1, grads[p + "ln1_gamma"], grads[p + "ln1_beta"] = _layer_norm_backward(dZ1, P[p + "ln1_gamma"], c["ln1"])
        dY = dR1 * c["D_o"] if "D_o" in c else dR1
        grads[p + "W_o"] = flat(c["O"]).T @ flat(dY)
        grads[p + "b_o"] = flat(dY).sum(axis=0)
        dO = (dY @ P[p + "W_o"].T).reshape(B, N, cfg.h, cfg.d_h).transpose(0, 2, 1, 3)
        dAd = dO @ c["V"].transpose(0, 1, 3, 2)
        dV = c["Ad"].transpose(0, 1, 3, 2) @ dO
        dA = dAd * c["D_att"] if "D_att" in c else dAd
        A = c["A"]
        dS = A * (dA - (dA * A).sum(axis=-1, keepdims=True)) * scale
        dQ = dS @ c["K"]
        dK = dS.transpose(0, 1, 3, 2) @ c["Q"]
        if family == "rope":
            cos, sin = trace.acts["rope"]
            dQ = enc.rope_apply(dQ, cos, sin, inverse=True)
            dK = enc.rope_apply(dK, cos, sin, inverse=True)
        H = flat(c["H"])
        dH = dR1
        for name, dz in (("q", dQ), ("k", dK), ("v", dV)):
            dz = dz.transpose(0, 2, 1, 3).reshape(B, N, cfg.inner)
            grads[p + "W_" + name] = H.T @ flat(dz)
            grads[p + "b_" + name] = flat(dz).sum(axis=0)
            dH = dH + dz @ P[p + "W_" + name].T

    dE = dH * a["D_in"] if "D_in" in a else dH
    if family == "fourier":
        grads["pe.freqs"] = enc.pe_fourier_freq_grad(trace.positions, P["pe.freqs"], dE).astype(dt)
    grads["input_proj.W"] = flat(trace.X).T @ flat(dE)
    grads["input_proj.b"] = flat(dE).sum(axis=0)
    a["dE"] = dE
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteActivation(f"gradient of {name}")
    return {k: grads[k].astype(dt, copy=False) for k in P}


def input_grad(weights: ModelWeights, trace: ForwardTrace) -> np.ndarray:
    """``dL/dX`` after :func:`backward` has run on ``trace``."""
    return trace.acts["dE"] @ weights.params["input_proj.W"].T


def loss_and_grads(weights: ModelWeights, X, M, T, labels, lengths=None, train: bool = False,
                   rng=None, normalize: bool = False, loss_weights=None):
    """One forward/backward pass under the early-detection loss."""
    lengths = M.sum(axis=1) if lengths is None else lengths
    probs, trace = forward(weights, X, M, T, train=train, rng=rng)
    loss = edl_loss(probs, labels, lengths, normalize, loss_weights)
    grads = backward(weights, trace, edl_logit_grad(probs, labels, lengths, normalize, loss_weights))
    return loss, grads, probs
