"""Dense tensor primitives for the encoder-decoder network.

Tensors are plain :class:`torch.Tensor` objects; reverse-mode differentiation
is delegated to torch autograd through :func:`backward`.  Everything here is a
pure function except :func:`adam_step`, which updates parameters in place.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import torch

from satnmt.errors import InvalidArgument, NumericalError

MASK_VALUE = -1e9


def positional_encoding(max_pos: int, d_model: int,
                        dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Sinusoidal table of shape ``(max_pos, d_model)``."""
    if d_model % 2:
        raise InvalidArgument(f"d_model must be even, got {d_model}")
    if max_pos < 1:
        raise InvalidArgument(f"max_pos must be >= 1, got {max_pos}")
    pos = torch.arange(max_pos, dtype=torch.float64).unsqueeze(1)
    two_i = torch.arange(0, d_model, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, two_i / d_model)
    table = torch.empty(max_pos, d_model, dtype=torch.float64)
    table[:, 0::2] = torch.sin(angle)
    table[:, 1::2] = torch.cos(angle)
    return table.to(dtype)


def scaled_dot_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
                         mask: torch.Tensor | None = None,
                         return_weights: bool = False):
    """softmax(q k^T / sqrt(d_k)) v over the last two dimensions.

    ``mask`` is boolean (True = visible) and must broadcast to ``(..., n, m)``.
    Masked keys receive exactly zero weight.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise InvalidArgument(
            f"attention shape mismatch: q{tuple(q.shape)} k{tuple(k.shape)} v{tuple(v.shape)}")
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    if mask is not None:
        if mask.shape[-1] != k.shape[-2] or mask.shape[-2] not in (1, q.shape[-2]):
            raise InvalidArgument(
                f"mask shape {tuple(mask.shape)} does not match scores {tuple(scores.shape)}")
        if not bool(mask.any(-1).all()):
            raise InvalidArgument("mask has a row with no visible key")
        scores = scores.masked_fill(~mask, MASK_VALUE)
    weights = torch.softmax(scores, dim=-1)
    out = weights @ v
    return (out, weights) if return_weights else out


def multi_head_attention(x_q: torch.Tensor, x_kv: torch.Tensor,
                         mask: torch.Tensor | None,
                         w_q: torch.Tensor, w_k: torch.Tensor, w_v: torch.Tensor,
                         w_o: torch.Tensor, h: int) -> torch.Tensor:
    """Multi-head attention with packed per-head projections.

    ``w_q``/``w_k``/``w_v`` are ``(d_model, h*d_k)``; head ``i`` owns columns
    ``i*d_k:(i+1)*d_k``.  ``x_q`` is ``(..., n, d_model)``, ``x_kv`` is
    ``(..., m, d_model)`` and ``mask`` broadcasts to ``(..., n, m)``.
    """
    d_model = x_q.shape[-1]
    for name, w in (("w_q", w_q), ("w_k", w_k), ("w_v", w_v)):
        if w.shape[0] != d_model or w.shape[1] % h:
            raise InvalidArgument(f"{name} has shape {tuple(w.shape)}, incompatible with h={h}")
    if x_kv.shape[-1] != d_model or w_o.shape != (w_v.shape[1], d_model):
        raise InvalidArgument("multi-head attention shape mismatch")

    def split(x: torch.Tensor) -> torch.Tensor:
        *lead, n, width = x.shape
        return x.reshape(*lead, n, h, width // h).transpose(-3, -2)

    q, k, v = split(x_q @ w_q), split(x_kv @ w_k), split(x_kv @ w_v)
    if mask is not None:
        mask = mask.unsqueeze(-3)  # broadcast over heads
    heads = scaled_dot_attention(q, k, v, mask)
    *lead, _, n, d_v = heads.shape
    concat = heads.transpose(-3, -2).reshape(*lead, n, h * d_v)
    return concat @ w_o


def ffn(x: torch.Tensor, w1: torch.Tensor, b1: torch.Tensor,
        w2: torch.Tensor, b2: torch.Tensor) -> torch.Tensor:
    if (x.shape[-1] != w1.shape[0] or w1.shape[1] != b1.shape[0]
            or w2.shape[0] != w1.shape[1] or w2.shape[1] != b2.shape[0]):
        raise InvalidArgument("ffn shape mismatch")
    return torch.relu(x @ w1 + b1) @ w2 + b2


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor,
               eps: float = 1e-6) -> torch.Tensor:
    mean = x.mean(-1, keepdim=True)
    var = ((x - mean) ** 2).mean(-1, keepdim=True)
    return gain * (x - mean) / torch.sqrt(var + eps) + bias


def dropout(x: torch.Tensor, p: float, generator: torch.Generator | None) -> torch.Tensor:
    """Inverted dropout driven by an explicit generator; identity when p == 0."""
    if p <= 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= p
    return x * keep / (1.0 - p)


def label_smoothed_cross_entropy(logits: torch.Tensor, targets: torch.Tensor,
                                 smooth_mass: float, pad_id: int = 0) -> torch.Tensor:
    """Mean cross-entropy against the smoothed target distribution.

    The target gets ``1 - smooth_mass``; every other class gets
    ``smooth_mass / (V - 1)``.  Positions whose target is ``pad_id`` are
    excluded from the mean.
    """
    if not 0.0 <= smooth_mass < 1.0:
        raise InvalidArgument(f"smooth_mass must lie in [0, 1), got {smooth_mass}")
    V = logits.shape[-1]
    if targets.numel() and (int(targets.min()) < 0 or int(targets.max()) >= V):
        raise InvalidArgument("target id out of vocabulary range")
    logp = torch.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    if smooth_mass > 0.0:
        other = -(logp.sum(-1)) - nll
        loss = (1.0 - smooth_mass) * nll + smooth_mass / (V - 1) * other
    else:
        loss = nll
    keep = targets != pad_id
    count = keep.sum()
    if int(count) == 0:
        return loss.sum() * 0.0
    return (loss * keep).sum() / count


def smoothed_target_entropy(V: int, smooth_mass: float) -> float:
    """Minimum attainable value of :func:`label_smoothed_cross_entropy`."""
    terms = [1.0 - smooth_mass] + [smooth_mass / (V - 1)] * (V - 1)
    return -sum(p * math.log(p) for p in terms if p > 0)


def backward(loss: torch.Tensor,
             params: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Gradients of a scalar ``loss`` w.r.t. every tensor in ``params``.

    Aliased tensors (shared weights) receive the same, fully accumulated
    gradient under each of their names.  Unreachable tensors get zeros.
    """
    if loss.numel() != 1:
        raise InvalidArgument(f"backward needs a scalar root, got shape {tuple(loss.shape)}")
    unique: dict[int, torch.Tensor] = {}
    for t in params.values():
        unique.setdefault(id(t), t)
    tensors = list(unique.values())
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    by_id = {id(t): (g if g is not None else torch.zeros_like(t))
             for t, g in zip(tensors, grads)}
    return {name: by_id[id(t)] for name, t in params.items()}


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    t: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


def adam_step(params: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor],
              state: OptimizerState, lr: float) -> None:
    """One bias-corrected Adam update, in place.

    Shared tensors are updated once, under the first name that refers to them.
    Raises :class:`NumericalError` before touching anything if a gradient is
    non-finite.
    """
    seen: set[int] = set()
    names = []
    for name, p in params.items():
        if id(p) in seen:
            continue
        seen.add(id(p))
        g = grads[name]
        if g.shape != p.shape:
            raise InvalidArgument(f"gradient shape mismatch for {name}")
        if not bool(torch.isfinite(g).all()):
            raise NumericalError(f"non-finite gradient for {name}")
        names.append(name)

    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    with torch.no_grad():
        for name in names:
            p, g = params[name], grads[name]
            m = state.m.get(name)
            if m is None:
                m = state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            v = state.v[name]
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            m_hat = m / c1
            v_hat = v / c2
            p.sub_(lr * m_hat / (v_hat.sqrt() + state.eps))
