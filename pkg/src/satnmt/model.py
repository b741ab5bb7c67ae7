"""Encoder-decoder network with group-size-aware decoder wiring.

The same code path serves the plain Transformer (``K == 1``: strict mask,
one-step shift) and the semi-autoregressive variant (``K > 1``: relaxed mask,
K-step shift).  Parameters live in a flat name -> tensor mapping so they can
be averaged, serialized and partially copied without module machinery.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import TYPE_CHECKING, Iterator

import torch

from satnmt import masks
from satnmt import tensor_core as tc
from satnmt.errors import ConfigMismatch, InvalidArgument

if TYPE_CHECKING:
    from satnmt.data import Checkpoint

PAD, BOS, EOS, UNK = 0, 1, 2, 3

SHARING_MODES = ("shared-all", "shared-target-only", "none")


@dataclass(frozen=True)
class HyperParams:
    src_vocab: int
    tgt_vocab: int
    d_model: int = 64
    N: int = 2
    h: int = 4
    d_ff: int = 256
    K: int = 1
    dropout: float = 0.1
    label_smoothing: float = 0.1
    sharing: str = "shared-all"
    scale_embedding: bool = True
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    warmup: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.h:
            raise InvalidArgument(f"d_model={self.d_model} not divisible by h={self.h}")
        if self.d_model % 2:
            raise InvalidArgument("d_model must be even for the sinusoidal table")
        if self.K < 1:
            raise InvalidArgument(f"K must be >= 1, got {self.K}")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidArgument(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.sharing not in SHARING_MODES:
            raise InvalidArgument(f"unknown sharing mode {self.sharing!r}")
        if self.sharing == "shared-all" and self.src_vocab != self.tgt_vocab:
            raise InvalidArgument("shared-all needs equal source and target vocab sizes")

    def replace(self, **changes) -> "HyperParams":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "HyperParams":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        unknown = set(d) - set(types)
        if unknown:
            raise ConfigMismatch(f"unknown hyperparameters: {sorted(unknown)}")
        return cls(**d)


def _attn_shapes(prefix: str, d: int) -> dict[str, tuple[int, ...]]:
    return {f"{prefix}.{w}": (d, d) for w in ("wq", "wk", "wv", "wo")}


def _ln_shapes(prefix: str, d: int) -> dict[str, tuple[int, ...]]:
    return {f"{prefix}.gain": (d,), f"{prefix}.bias": (d,)}


def _ffn_shapes(prefix: str, d: int, d_ff: int) -> dict[str, tuple[int, ...]]:
    return {f"{prefix}.w1": (d, d_ff), f"{prefix}.b1": (d_ff,),
            f"{prefix}.w2": (d_ff, d), f"{prefix}.b2": (d,)}


def param_shapes(hp: HyperParams) -> dict[str, tuple[int, ...]]:
    """Every parameter name (aliases included) and its shape, in init order."""
    d = hp.d_model
    shapes = {"src_embed": (hp.src_vocab, d), "tgt_embed": (hp.tgt_vocab, d),
              "out_proj": (hp.tgt_vocab, d)}
    for i in range(hp.N):
        p = f"enc.{i}"
        shapes.update(_attn_shapes(f"{p}.self_attn", d))
        shapes.update(_ln_shapes(f"{p}.ln1", d))
        shapes.update(_ffn_shapes(f"{p}.ffn", d, hp.d_ff))
        shapes.update(_ln_shapes(f"{p}.ln2", d))
    for i in range(hp.N):
        p = f"dec.{i}"
        shapes.update(_attn_shapes(f"{p}.self_attn", d))
        shapes.update(_ln_shapes(f"{p}.ln1", d))
        shapes.update(_attn_shapes(f"{p}.cross_attn", d))
        shapes.update(_ln_shapes(f"{p}.ln2", d))
        shapes.update(_ffn_shapes(f"{p}.ffn", d, hp.d_ff))
        shapes.update(_ln_shapes(f"{p}.ln3", d))
    return shapes


def alias_groups(hp: HyperParams) -> list[tuple[str, ...]]:
    if hp.sharing == "shared-all":
        return [("src_embed", "tgt_embed", "out_proj")]
    if hp.sharing == "shared-target-only":
        return [("tgt_embed", "out_proj")]
    return []


def canonical_names(hp: HyperParams) -> list[str]:
    """Parameter names with aliases collapsed onto the first member of each group."""
    dropped = {name for group in alias_groups(hp) for name in group[1:]}
    return [name for name in param_shapes(hp) if name not in dropped]


def param_count(hp: HyperParams) -> int:
    """Closed-form number of distinct learned scalars."""
    d, f, N = hp.d_model, hp.d_ff, hp.N
    embed = {"shared-all": hp.src_vocab * d,
             "shared-target-only": hp.src_vocab * d + hp.tgt_vocab * d,
             "none": hp.src_vocab * d + 2 * hp.tgt_vocab * d}[hp.sharing]
    attn, ln, ff = 4 * d * d, 2 * d, 2 * d * f + f + d
    return embed + N * (attn + 2 * ln + ff) + N * (2 * attn + 3 * ln + ff)


class ModelParams:
    """Name -> tensor mapping where aliased names share one tensor object."""

    def __init__(self, tensors: dict[str, torch.Tensor]):
        self.tensors = tensors

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def unique(self) -> dict[str, torch.Tensor]:
        """First name of every distinct tensor."""
        seen: set[int] = set()
        out = {}
        for name, t in self.tensors.items():
            if id(t) not in seen:
                seen.add(id(t))
                out[name] = t
        return out

    def _map(self, fn) -> "ModelParams":
        new: dict[int, torch.Tensor] = {}
        out = {}
        for name, t in self.tensors.items():
            if id(t) not in new:
                new[id(t)] = fn(t)
            out[name] = new[id(t)]
        return ModelParams(out)

    def clone(self) -> "ModelParams":
        return self._map(lambda t: t.detach().clone())

    def to(self, dtype: torch.dtype) -> "ModelParams":
        return self._map(lambda t: t.detach().to(dtype).clone())

    def requires_grad_(self, flag: bool = True) -> "ModelParams":
        for t in self.unique().values():
            t.requires_grad_(flag)
        return self

    @property
    def dtype(self) -> torch.dtype:
        return next(iter(self.tensors.values())).dtype

    @classmethod
    def from_canonical(cls, hp: HyperParams, tensors: dict[str, torch.Tensor]) -> "ModelParams":
        """Rebuild aliases from a mapping holding only canonical names."""
        expected = canonical_names(hp)
        if set(tensors) != set(expected):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise ConfigMismatch(f"tensor names do not match architecture "
                                 f"(missing={missing}, unexpected={extra})")
        shapes = param_shapes(hp)
        for name in expected:
            if tuple(tensors[name].shape) != shapes[name]:
                raise ConfigMismatch(f"{name}: shape {tuple(tensors[name].shape)} "
                                     f"!= expected {shapes[name]}")
        full = dict(tensors)
        for group in alias_groups(hp):
            for name in group[1:]:
                full[name] = full[group[0]]
        return cls({name: full[name] for name in shapes})


def init_params(hp: HyperParams, seed: int | None = None,
                dtype: torch.dtype = torch.float32) -> ModelParams:
    """Truncated-normal(0.02) matrices, zero biases, unit layer-norm gains."""
    gen = torch.Generator().manual_seed(hp.seed if seed is None else seed)
    tensors = {}
    for name, shape in param_shapes(hp).items():
        if name.endswith(".gain"):
            t = torch.ones(shape, dtype=torch.float64)
        elif len(shape) == 1:
            t = torch.zeros(shape, dtype=torch.float64)
        else:
            t = torch.empty(shape, dtype=torch.float64)
            torch.nn.init.trunc_normal_(t, std=0.02, a=-0.04, b=0.04, generator=gen)
        tensors[name] = t.to(dtype)
    canon = {name: tensors[name] for name in canonical_names(hp)}
    return ModelParams.from_canonical(hp, canon)


@lru_cache(maxsize=8)
def _pe_table(max_pos: int, d_model: int, dtype: torch.dtype) -> torch.Tensor:
    return tc.positional_encoding(max_pos, d_model, dtype)


def positional_table(n: int, d_model: int, dtype: torch.dtype) -> torch.Tensor:
    size = 256
    while size < n:
        size *= 2
    return _pe_table(size, d_model, dtype)[:n]


def _embed(ids: torch.Tensor, table: torch.Tensor, hp: HyperParams) -> torch.Tensor:
    x = table[ids]
    if hp.scale_embedding:
        x = x * math.sqrt(hp.d_model)
    return x + positional_table(ids.shape[-1], hp.d_model, table.dtype)


def _mha(x_q, x_kv, mask, params: ModelParams, prefix: str, h: int):
    return tc.multi_head_attention(x_q, x_kv, mask, params[f"{prefix}.wq"],
                                   params[f"{prefix}.wk"], params[f"{prefix}.wv"],
                                   params[f"{prefix}.wo"], h)


def _ln(x, params: ModelParams, prefix: str):
    return tc.layer_norm(x, params[f"{prefix}.gain"], params[f"{prefix}.bias"])


def _ffn(x, params: ModelParams, prefix: str):
    return tc.ffn(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"],
                  params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def encode(src: torch.Tensor, params: ModelParams, hp: HyperParams,
           train_mode: bool = False, generator: torch.Generator | None = None):
    """Encode a ``(B, m)`` batch of source ids.

    Returns ``(states, src_mask)`` with states ``(B, m, d_model)`` and a
    boolean ``(B, m)`` mask that is False at padding.
    """
    if src.dim() == 1:
        src = src.unsqueeze(0)
    if src.shape[-1] == 0:
        raise InvalidArgument("empty source sequence")
    if int(src.min()) < 0 or int(src.max()) >= hp.src_vocab:
        raise InvalidArgument("source id out of vocabulary range")
    src_mask = src != PAD
    if not bool(src_mask.any(-1).all()):
        raise InvalidArgument("source sentence consists only of padding")
    p = hp.dropout if train_mode else 0.0
    x = tc.dropout(_embed(src, params["src_embed"], hp), p, generator)
    attn_mask = src_mask[:, None, :]
    for i in range(hp.N):
        pre = f"enc.{i}"
        a = _mha(x, x, attn_mask, params, f"{pre}.self_attn", hp.h)
        x = _ln(x + tc.dropout(a, p, generator), params, f"{pre}.ln1")
        f = _ffn(x, params, f"{pre}.ffn")
        x = _ln(x + tc.dropout(f, p, generator), params, f"{pre}.ln2")
    return x, src_mask


def decoder_forward(dec_inputs: torch.Tensor, enc_states: torch.Tensor,
                    src_mask: torch.Tensor, self_mask: torch.Tensor,
                    params: ModelParams, hp: HyperParams, train_mode: bool = False,
                    generator: torch.Generator | None = None) -> torch.Tensor:
    """Logits ``(B, n, tgt_vocab)`` for decoder inputs ``(B, n)``.

    ``self_mask`` is the ``(n, n)`` boolean visibility matrix; logits at
    position t depend only on inputs j with ``self_mask[t, j]`` set.
    """
    if dec_inputs.dim() == 1:
        dec_inputs = dec_inputs.unsqueeze(0)
    n = dec_inputs.shape[-1]
    if tuple(self_mask.shape) != (n, n):
        raise InvalidArgument(f"self mask {tuple(self_mask.shape)} does not match length {n}")
    p = hp.dropout if train_mode else 0.0
    x = tc.dropout(_embed(dec_inputs, params["tgt_embed"], hp), p, generator)
    cross_mask = src_mask[:, None, :]
    for i in range(hp.N):
        pre = f"dec.{i}"
        a = _mha(x, x, self_mask, params, f"{pre}.self_attn", hp.h)
        x = _ln(x + tc.dropout(a, p, generator), params, f"{pre}.ln1")
        c = _mha(x, enc_states, cross_mask, params, f"{pre}.cross_attn", hp.h)
        x = _ln(x + tc.dropout(c, p, generator), params, f"{pre}.ln2")
        f = _ffn(x, params, f"{pre}.ffn")
        x = _ln(x + tc.dropout(f, p, generator), params, f"{pre}.ln3")
    return x @ params["out_proj"].transpose(0, 1)


def self_mask_for(n: int, K: int) -> torch.Tensor:
    return masks.strict_causal_mask(n) if K == 1 else masks.relaxed_causal_mask(n, K)


class SATModel:
    """Bundles hyperparameters and parameters behind the interface decoders use."""

    def __init__(self, hp: HyperParams, params: ModelParams | None = None):
        self.hp = hp
        self.params = params if params is not None else init_params(hp)

    @property
    def K(self) -> int:
        return self.hp.K

    @property
    def tgt_vocab(self) -> int:
        return self.hp.tgt_vocab

    def encode(self, src, train_mode=False, generator=None):
        return encode(src, self.params, self.hp, train_mode, generator)

    def decoder_forward(self, dec_inputs, enc_states, src_mask, self_mask,
                        train_mode=False, generator=None):
        return decoder_forward(dec_inputs, enc_states, src_mask, self_mask,
                               self.params, self.hp, train_mode, generator)

    def teacher_forced_logits(self, src: torch.Tensor, tgt: torch.Tensor,
                              K: int | None = None, train_mode: bool = False,
                              generator: torch.Generator | None = None) -> torch.Tensor:
        """Logits for every target position given the gold targets ``(B, n)``."""
        K = self.hp.K if K is None else K
        enc, src_mask = self.encode(src, train_mode, generator)
        dec_in = masks.shift_targets_batch(tgt, K, BOS)
        return self.decoder_forward(dec_in, enc, src_mask, self_mask_for(tgt.shape[-1], K),
                                    train_mode, generator)

    def loss(self, src: torch.Tensor, tgt: torch.Tensor, train_mode: bool = False,
             generator: torch.Generator | None = None) -> torch.Tensor:
        logits = self.teacher_forced_logits(src, tgt, train_mode=train_mode,
                                            generator=generator)
        return tc.label_smoothed_cross_entropy(logits, tgt, self.hp.label_smoothing, PAD)


def init_from_teacher(teacher: "Checkpoint", student_hp: HyperParams,
                      seed: int | None = None) -> ModelParams:
    """Student parameters: encoder, embeddings and pre-softmax copied from the teacher.

    Every other tensor (the whole decoder stack) is freshly initialized from
    the student's seed.
    """
    t_hp = teacher.hp
    for field_name in ("d_model", "src_vocab", "tgt_vocab", "N", "d_ff", "h"):
        if getattr(t_hp, field_name) != getattr(student_hp, field_name):
            raise ConfigMismatch(
                f"teacher {field_name}={getattr(t_hp, field_name)} but student has "
                f"{getattr(student_hp, field_name)}")
    student = init_params(student_hp, seed, dtype=teacher.params.dtype)
    copied = teacher_copied_names(student_hp)
    out = {}
    for name in canonical_names(student_hp):
        if name in copied:
            group = next((g for g in alias_groups(student_hp) if g[0] == name), (name,))
            sources = {id(teacher.params[g]) for g in group}
            if len(sources) > 1 and any(
                    not torch.equal(teacher.params[g], teacher.params[group[0]]) for g in group):
                raise ConfigMismatch(f"student shares {group} but teacher weights differ")
            out[name] = teacher.params[name].detach().clone()
        else:
            out[name] = student[name]
    return ModelParams.from_canonical(student_hp, out)


def teacher_copied_names(hp: HyperParams) -> set[str]:
    """Names (aliases included) that :func:`init_from_teacher` copies."""
    return {name for name in param_shapes(hp)
            if name in ("src_embed", "tgt_embed", "out_proj") or name.startswith("enc.")}
