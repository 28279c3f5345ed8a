"""Pre-norm transformer encoder for masked-token prediction, numpy only.

Every parameter gradient is derived by hand.  Attention goes through the
blocked kernels for sigmoid and through the dense reference for softmax.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy.special import erf, expit

from ..jagged import JaggedBatch
from ..kernel import TileConfig, blocked_backward_dkdv, blocked_backward_dq, blocked_forward
from ..reference import AttentionConfig, dense_backward, dense_forward, dense_scores, dense_weights

PAD_ID = 0
MASK_ID = 1
N_SPECIAL = 2


class TokenRangeError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 2
    d_model: int = 32
    heads: int = 2
    ffn_mult: int = 4
    vocab_size: int = 32
    max_len: int = 64
    mechanism: Literal["softmax", "sigmoid"] = "sigmoid"
    prenorm: bool = True
    dropout: float = 0.0
    init_std: float = 0.02
    ln_eps: float = 1e-5
    # None: b = -log(n) per sequence
    sigmoid_bias: float | None = None
    block_m: int = 16
    block_n: int = 16

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.vocab_size <= N_SPECIAL:
            raise ValueError("vocab must hold the pad and mask tokens plus at least one symbol")
        if self.mechanism not in ("softmax", "sigmoid"):
            raise ValueError(f"unknown mechanism {self.mechanism!r}")
        if not self.prenorm:
            raise ValueError("only the pre-norm layout is implemented")
        if self.dropout != 0.0:
            raise ValueError("dropout is not supported")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    def attention(self) -> AttentionConfig:
        if self.mechanism == "softmax":
            return AttentionConfig.softmax()
        if self.sigmoid_bias is None:
            return AttentionConfig("sigmoid", bias_mode="log_seq_len")
        return AttentionConfig("sigmoid", bias_mode="fixed", bias=self.sigmoid_bias)

    def tiles(self) -> TileConfig:
        return TileConfig(self.block_m, self.block_n)


@dataclass
class MaskedBatch:
    """Masked-LM batch: ``inputs`` carry MASK at ``loss_mask`` positions,
    ``targets`` hold the original tokens.  Positions past ``lengths`` are PAD."""

    inputs: np.ndarray
    targets: np.ndarray
    lengths: np.ndarray
    loss_mask: np.ndarray

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.inputs, self.targets, self.lengths, self.loss_mask):
            h.update(np.ascontiguousarray(a).astype("<i8").tobytes())
        return h.hexdigest()[:16]

    @property
    def valid(self) -> np.ndarray:
        return np.arange(self.inputs.shape[1])[None, :] < self.lengths[:, None]


@dataclass
class EncoderModel:
    cfg: EncoderConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, cfg: EncoderConfig, seed: int = 0) -> "EncoderModel":
        rng = np.random.default_rng(seed)
        d, f, V = cfg.d_model, cfg.d_model * cfg.ffn_mult, cfg.vocab_size

        def normal(*shape):
            return rng.normal(0.0, cfg.init_std, shape)

        p = {"tok_emb": normal(V, d), "pos_emb": normal(cfg.max_len, d)}
        for i in range(cfg.layers):
            p[f"l{i}.ln1_g"] = np.ones(d)
            p[f"l{i}.ln1_b"] = np.zeros(d)
            for name in ("wq", "wk", "wv", "wo"):
                p[f"l{i}.{name}"] = normal(d, d)
                p[f"l{i}.b{name[1]}"] = np.zeros(d)
            p[f"l{i}.ln2_g"] = np.ones(d)
            p[f"l{i}.ln2_b"] = np.zeros(d)
            p[f"l{i}.w1"] = normal(d, f)
            p[f"l{i}.b1"] = np.zeros(f)
            p[f"l{i}.w2"] = normal(f, d)
            p[f"l{i}.b2"] = np.zeros(d)
        p["lnf_g"] = np.ones(d)
        p["lnf_b"] = np.zeros(d)
        p["head_w"] = normal(d, V)
        p["head_b"] = np.zeros(V)
        return cls(cfg, p)

    def copy(self) -> "EncoderModel":
        return EncoderModel(self.cfg, {k: v.copy() for k, v in self.params.items()})

    def with_config(self, **changes) -> "EncoderModel":
        from dataclasses import replace

        return EncoderModel(replace(self.cfg, **changes), {k: v.copy() for k, v in self.params.items()})

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())


# ---------------------------------------------------------------- building blocks


def _layernorm(x, g, b, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _layernorm_backward(dy, g, cache):
    xhat, rstd = cache
    dxhat = dy * g
    dg = np.sum(dy * xhat, axis=(0, 1))
    db = np.sum(dy, axis=(0, 1))
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _gelu(u):
    return 0.5 * u * (1.0 + erf(u / _SQRT2))


def _gelu_grad(u):
    return 0.5 * (1.0 + erf(u / _SQRT2)) + u * _INV_SQRT_2PI * np.exp(-0.5 * u * u)


def _split_heads(x, H):
    Z, L, d = x.shape
    return x.reshape(Z, L, H, d // H)


def _merge_heads(x):
    Z, L, H, dh = x.shape
    return x.reshape(Z, L, H * dh)


def check_tokens(cfg: EncoderConfig, batch: MaskedBatch) -> None:
    for name in ("inputs", "targets"):
        t = getattr(batch, name)
        if t.min() < 0 or t.max() >= cfg.vocab_size:
            raise TokenRangeError(f"{name} hold ids outside [0, {cfg.vocab_size})")
    if batch.inputs.shape[1] > cfg.max_len:
        raise TokenRangeError(f"sequence length {batch.inputs.shape[1]} exceeds max_len {cfg.max_len}")


def attention_stats(batch: JaggedBatch, acfg: AttentionConfig) -> tuple[float, float]:
    """``(max |score|, max weight derivative)`` over valid (query, key) pairs.

    The weight derivative is the diagonal Jacobian entry ``p(1 - p)``.
    """
    s = dense_scores(batch, acfg)
    finite = np.isfinite(s)
    max_abs = float(np.max(np.abs(s[finite]))) if finite.any() else 0.0
    p = dense_weights(batch, acfg) if acfg.mechanism == "softmax" else expit(s)
    deriv = float(np.max((p * (1.0 - p))[finite])) if finite.any() else 0.0
    return max_abs, deriv


# ---------------------------------------------------------------- forward / backward


def model_forward(model: EncoderModel, batch: MaskedBatch, *, instrument: bool = False):
    """Logits ``[Z, L, V]`` and a cache for :func:`model_backward`.

    ``cache["loss"]`` is the mean cross-entropy over masked positions and
    ``cache["token_ce"]`` the per-position cross-entropy (zero elsewhere).
    """
    cfg, p = model.cfg, model.params
    check_tokens(cfg, batch)
    Z, L = batch.inputs.shape
    H = cfg.heads
    acfg = cfg.attention()
    tiles = cfg.tiles()
    valid = batch.valid
    vmask = valid[:, :, None, None]

    x = p["tok_emb"][batch.inputs] + p["pos_emb"][:L][None]
    layers = []
    stats = []
    for i in range(cfg.layers):
        pre = f"l{i}."
        h1, ln1 = _layernorm(x, p[pre + "ln1_g"], p[pre + "ln1_b"], cfg.ln_eps)
        q = np.where(vmask, _split_heads(h1 @ p[pre + "wq"] + p[pre + "bq"], H), 0.0)
        k = np.where(vmask, _split_heads(h1 @ p[pre + "wk"] + p[pre + "bk"], H), 0.0)
        v = np.where(vmask, _split_heads(h1 @ p[pre + "wv"] + p[pre + "bv"], H), 0.0)
        jb = JaggedBatch(q, k, v, batch.lengths, batch.lengths)
        if acfg.mechanism == "sigmoid":
            a, _ = blocked_forward(jb, acfg, tiles)
        else:
            a = dense_forward(jb, acfg)
        if instrument:
            stats.append(attention_stats(jb, acfg))
        a = _merge_heads(a)
        x_mid = x + a @ p[pre + "wo"] + p[pre + "bo"]
        h2, ln2 = _layernorm(x_mid, p[pre + "ln2_g"], p[pre + "ln2_b"], cfg.ln_eps)
        u = h2 @ p[pre + "w1"] + p[pre + "b1"]
        g = _gelu(u)
        x_out = x_mid + g @ p[pre + "w2"] + p[pre + "b2"]
        layers.append(dict(h1=h1, ln1=ln1, jb=jb, a=a, ln2=ln2, h2=h2, u=u, g=g))
        x = x_out

    hf, lnf = _layernorm(x, p["lnf_g"], p["lnf_b"], cfg.ln_eps)
    logits = hf @ p["head_w"] + p["head_b"]

    shifted = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1))
    logp_target = np.take_along_axis(shifted, batch.targets[..., None], axis=-1)[..., 0] - logz
    lm = batch.loss_mask & valid
    count = max(int(lm.sum()), 1)
    token_ce = np.where(lm, -logp_target, 0.0)
    loss = float(token_ce.sum() / count)

    cache = dict(
        batch=batch, layers=layers, hf=hf, lnf=lnf, logits=logits, loss=loss,
        token_ce=token_ce, loss_mask=lm, count=count, stats=stats,
    )
    return logits, cache


def model_backward(model: EncoderModel, cache: dict) -> dict[str, np.ndarray]:
    """Gradients of ``cache["loss"]`` with respect to every parameter."""
    cfg, p = model.cfg, model.params
    batch = cache["batch"]
    Z, L = batch.inputs.shape
    acfg = cfg.attention()
    tiles = cfg.tiles()
    vmask = batch.valid[:, :, None, None]
    grads: dict[str, np.ndarray] = {}

    logits = cache["logits"]
    probs = np.exp(logits - logits.max(axis=-1, keepdims=True))
    probs /= probs.sum(axis=-1, keepdims=True)
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, batch.targets[..., None], 1.0, axis=-1)
    dlogits = (probs - onehot) * (cache["loss_mask"][..., None] / cache["count"])

    hf = cache["hf"]
    grads["head_w"] = hf.reshape(-1, cfg.d_model).T @ dlogits.reshape(-1, cfg.vocab_size)
    grads["head_b"] = dlogits.sum(axis=(0, 1))
    dhf = dlogits @ p["head_w"].T
    dx, grads["lnf_g"], grads["lnf_b"] = _layernorm_backward(dhf, p["lnf_g"], cache["lnf"])

    for i in reversed(range(cfg.layers)):
        pre = f"l{i}."
        c = cache["layers"][i]
        flat = lambda t: t.reshape(-1, t.shape[-1])  # noqa: E731

        # MLP residual branch
        grads[pre + "w2"] = flat(c["g"]).T @ flat(dx)
        grads[pre + "b2"] = dx.sum(axis=(0, 1))
        du = (dx @ p[pre + "w2"].T) * _gelu_grad(c["u"])
        grads[pre + "w1"] = flat(c["h2"]).T @ flat(du)
        grads[pre + "b1"] = du.sum(axis=(0, 1))
        dh2 = du @ p[pre + "w1"].T
        dln, grads[pre + "ln2_g"], grads[pre + "ln2_b"] = _layernorm_backward(dh2, p[pre + "ln2_g"], c["ln2"])
        dx_mid = dx + dln

        # attention residual branch
        grads[pre + "wo"] = flat(c["a"]).T @ flat(dx_mid)
        grads[pre + "bo"] = dx_mid.sum(axis=(0, 1))
        da = _split_heads(dx_mid @ p[pre + "wo"].T, cfg.heads)
        jb = c["jb"]
        if acfg.mechanism == "sigmoid":
            dq, _ = blocked_backward_dq(jb, acfg, tiles, da)
            dk, dv, _ = blocked_backward_dkdv(jb, acfg, tiles, da)
        else:
            dq, dk, dv = dense_backward(jb, acfg, da)
        dh1 = np.zeros_like(c["h1"])
        for name, dt in (("q", dq), ("k", dk), ("v", dv)):
            dt = _merge_heads(np.where(vmask, dt, 0.0))
            grads[pre + "w" + name] = flat(c["h1"]).T @ flat(dt)
            grads[pre + "b" + name] = dt.sum(axis=(0, 1))
            dh1 += dt @ p[pre + "w" + name].T
        dln, grads[pre + "ln1_g"], grads[pre + "ln1_b"] = _layernorm_backward(dh1, p[pre + "ln1_g"], c["ln1"])
        dx = dx_mid + dln

    grads["tok_emb"] = np.zeros_like(p["tok_emb"])
    np.add.at(grads["tok_emb"], batch.inputs.reshape(-1), dx.reshape(-1, cfg.d_model))
    grads["pos_emb"] = np.zeros_like(p["pos_emb"])
    grads["pos_emb"][:L] = dx.sum(axis=0)
    return {k: grads[k] for k in p}


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    return float(math.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def model_gradcheck(model: EncoderModel, batch: MaskedBatch, h: float = 1e-5) -> dict[str, float]:
    """Per-parameter relative error of the analytic gradient against central
    differences of the loss.

    The denominator is floored at the largest gradient entry anywhere in the
    model, so parameters whose true gradient is exactly zero (e.g. the key
    bias under softmax, which is shift invariant) are judged on the model's
    gradient scale instead of on rounding noise.
    """
    from ..analysis import finite_diff_gradient, rel_err

    _, cache = model_forward(model, batch)
    grads = model_backward(model, cache)
    numeric = {}
    for name, value in model.params.items():
        def loss_at(x, name=name):
            probe = EncoderModel(model.cfg, {**model.params, name: x})
            return model_forward(probe, batch)[1]["loss"]

        numeric[name] = finite_diff_gradient(loss_at, value, h)
    scale = max(max(float(np.max(np.abs(g))) for g in grads.values()),
                max(float(np.max(np.abs(g))) for g in numeric.values()))
    return {name: rel_err(grads[name], numeric[name], floor=scale) for name in grads}
