"""Vocabularies, parallel corpora, token-budget batching and checkpoint I/O."""

from __future__ import annotations

import random
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from satnmt.errors import CheckpointFormatError, ConfigMismatch, InvalidArgument
from satnmt.model import BOS, EOS, PAD, UNK, HyperParams, ModelParams, canonical_names
from satnmt.tensor_core import OptimizerState

RESERVED = ("<pad>", "<s>", "</s>", "<unk>")
TOKENIZERS = ("word", "char")


def tokenize(line: str, mode: str = "word") -> list[str]:
    if mode == "word":
        return line.split()
    if mode == "char":
        return [c for c in line.strip() if not c.isspace()]
    raise InvalidArgument(f"unknown tokenizer mode {mode!r}")


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:4]) != RESERVED:
            raise InvalidArgument("vocabulary must start with the reserved tokens")
        self.tokens = list(tokens)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise InvalidArgument("duplicate token in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def encode(self, tokens: Iterable[str], add_eos: bool = True) -> list[int]:
        ids = [self.index.get(tok, UNK) for tok in tokens]
        if add_eos:
            ids.append(EOS)
        return ids

    def decode(self, ids: Iterable[int]) -> list[str]:
        """Tokens up to (excluding) the first terminator; pad and bos are dropped."""
        out = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            out.append(self.tokens[i])
        return out

    def save(self, path) -> None:
        Path(path).write_text("".join(tok + "\n" for tok in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


def build_vocab(sentences: Iterable[Sequence[str]], max_size: int) -> Vocab:
    """Reserved tokens, then by descending frequency with lexicographic ties."""
    if max_size <= len(RESERVED):
        raise InvalidArgument(f"max_size must exceed {len(RESERVED)}")
    counts = Counter(tok for sent in sentences for tok in sent if tok not in RESERVED)
    if not counts:
        raise InvalidArgument("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts, key=lambda tok: (-counts[tok], tok))
    return Vocab(list(RESERVED) + ranked[: max_size - len(RESERVED)])


@dataclass
class ParallelCorpus:
    src: list[list[str]]
    tgt: list[list[str]]

    def __post_init__(self):
        if len(self.src) != len(self.tgt):
            raise InvalidArgument(f"line count mismatch: {len(self.src)} vs {len(self.tgt)}")

    def __len__(self) -> int:
        return len(self.src)

    def token_counts(self) -> tuple[int, int]:
        return sum(map(len, self.src)), sum(map(len, self.tgt))

    def subset(self, idx: Sequence[int]) -> "ParallelCorpus":
        return ParallelCorpus([self.src[i] for i in idx], [self.tgt[i] for i in idx])


def read_lines(path) -> list[str]:
    return Path(path).read_text(encoding="utf-8").splitlines()


def load_parallel(src_path, tgt_path, mode: str = "word",
                  max_len: int | None = 64) -> ParallelCorpus:
    """Read line-aligned files, dropping pairs with an empty or over-long side."""
    src_lines, tgt_lines = read_lines(src_path), read_lines(tgt_path)
    if len(src_lines) != len(tgt_lines):
        raise InvalidArgument(f"{src_path} and {tgt_path} differ in line count")
    src, tgt = [], []
    for s, t in zip(src_lines, tgt_lines):
        s_tok, t_tok = tokenize(s, mode), tokenize(t, mode)
        if not s_tok or not t_tok:
            continue
        if max_len is not None and (len(s_tok) > max_len or len(t_tok) > max_len):
            continue
        src.append(s_tok)
        tgt.append(t_tok)
    return ParallelCorpus(src, tgt)


def write_parallel(corpus: ParallelCorpus, src_path, tgt_path) -> None:
    Path(src_path).write_text("".join(" ".join(s) + "\n" for s in corpus.src), encoding="utf-8")
    Path(tgt_path).write_text("".join(" ".join(t) + "\n" for t in corpus.tgt), encoding="utf-8")


def pad_batch(seqs: Sequence[Sequence[int]], pad: int = PAD) -> torch.Tensor:
    width = max(len(s) for s in seqs)
    out = torch.full((len(seqs), width), pad, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return out


def batch_by_tokens(lengths: Sequence[int], budget: int,
                    seed: int | None = None) -> list[list[int]]:
    """Group sentence indices into batches whose padded size fits ``budget``.

    ``lengths[i]`` is the padded length sentence ``i`` needs (e.g. the max of
    its source and target lengths).  Sentences are length-bucketed so each
    batch holds similar lengths; a batch costs ``len(batch) * max length``.
    A sentence longer than the budget gets a batch of its own.  With a seed,
    ties within a length and the batch order are shuffled deterministically.
    """
    if budget < 1:
        raise InvalidArgument("budget must be >= 1")
    order = list(range(len(lengths)))
    rng = random.Random(seed) if seed is not None else None
    if rng is not None:
        rng.shuffle(order)
    order.sort(key=lambda i: lengths[i])
    batches: list[list[int]] = []
    current: list[int] = []
    width = 0
    for i in order:
        new_width = max(width, lengths[i])
        if current and new_width * (len(current) + 1) > budget:
            batches.append(current)
            current, new_width = [], lengths[i]
        current.append(i)
        width = new_width
    if current:
        batches.append(current)
    if rng is not None:
        rng.shuffle(batches)
    return batches


@dataclass
class EncodedCorpus:
    """A corpus turned into id sequences, each terminated by eos."""

    src: list[list[int]]
    tgt: list[list[int]]

    @classmethod
    def from_corpus(cls, corpus: ParallelCorpus, src_vocab: Vocab,
                    tgt_vocab: Vocab) -> "EncodedCorpus":
        return cls([src_vocab.encode(s) for s in corpus.src],
                   [tgt_vocab.encode(t) for t in corpus.tgt])

    def __len__(self) -> int:
        return len(self.src)

    def lengths(self) -> list[int]:
        return [max(len(s), len(t)) for s, t in zip(self.src, self.tgt)]

    def tensors(self, idx: Sequence[int]) -> tuple[torch.Tensor, torch.Tensor]:
        return pad_batch([self.src[i] for i in idx]), pad_batch([self.tgt[i] for i in idx])


def make_toy_corpus(n_pairs: int, vocab_size: int = 32, min_len: int = 4,
                    max_len: int = 16, task: str = "reverse",
                    seed: int = 0) -> ParallelCorpus:
    """Synthetic copy/reverse pairs over symbols ``w0..w{vocab_size-1}``.

    ``task`` is ``copy``, ``reverse`` or ``mixed`` (the first source token
    is then ``@copy`` or ``@rev`` and the target omits it).
    """
    if task not in ("copy", "reverse", "mixed"):
        raise InvalidArgument(f"unknown toy task {task!r}")
    rng = np.random.default_rng(seed)
    symbols = [f"w{i}" for i in range(vocab_size)]
    src, tgt = [], []
    for _ in range(n_pairs):
        n = int(rng.integers(min_len, max_len + 1))
        sent = [symbols[i] for i in rng.integers(0, vocab_size, size=n)]
        kind = task if task != "mixed" else ("copy" if rng.random() < 0.5 else "reverse")
        out = list(sent) if kind == "copy" else sent[::-1]
        if task == "mixed":
            sent = ["@copy" if kind == "copy" else "@rev"] + sent
        src.append(sent)
        tgt.append(out)
    return ParallelCorpus(src, tgt)


# --- checkpoints -----------------------------------------------------------

MAGIC = b"SATCKPT1"
VERSION = 1
_F32, _I64 = 0, 1


@dataclass
class Checkpoint:
    hp: HyperParams
    params: ModelParams
    step: int = 0
    opt_state: OptimizerState | None = None
    extra: dict[str, str] = field(default_factory=dict)


def _hp_text(hp: HyperParams, extra: dict[str, str]) -> bytes:
    lines = [f"{k} = {v!r}" for k, v in hp.to_dict().items()]
    lines += [f"extra.{k} = {v!r}" for k, v in extra.items()]
    return "\n".join(lines).encode("utf-8")


def _parse_hp_text(text: str) -> tuple[HyperParams, dict[str, str]]:
    import ast

    values, extra = {}, {}
    for line in text.splitlines():
        key, _, raw = line.partition(" = ")
        value = ast.literal_eval(raw)
        if key.startswith("extra."):
            extra[key[len("extra."):]] = value
        else:
            values[key] = value
    return HyperParams.from_dict(values), extra


def _pack_record(name: str, array: np.ndarray, code: int) -> bytes:
    name_b = name.encode("utf-8")
    head = struct.pack("<H", len(name_b)) + name_b + struct.pack("<BB", code, array.ndim)
    head += struct.pack(f"<{array.ndim}Q", *array.shape)
    dt = "<f4" if code == _F32 else "<i8"
    return head + np.ascontiguousarray(array, dtype=dt).tobytes()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write the little-endian binary container; see :func:`load_checkpoint`."""
    records = []
    for name, t in ckpt.params.unique().items():
        records.append(_pack_record(f"param.{name}", t.detach().cpu().numpy(), _F32))
    opt = ckpt.opt_state
    if opt is not None:
        records.append(_pack_record("opt.t", np.array([opt.t]), _I64))
        for name in opt.m:
            records.append(_pack_record(f"opt.m.{name}", opt.m[name].numpy(), _F32))
            records.append(_pack_record(f"opt.v.{name}", opt.v[name].numpy(), _F32))
    header = _hp_text(ckpt.hp, ckpt.extra)
    blob = bytearray(MAGIC)
    blob += struct.pack("<I", VERSION)
    blob += struct.pack("<I", len(header)) + header
    blob += struct.pack("<Q", ckpt.step)
    blob += struct.pack("<I", len(records))
    for r in records:
        blob += r
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(bytes(blob))
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointFormatError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, expect_hp: HyperParams | None = None) -> Checkpoint:
    """Read a checkpoint; raises on bad magic, truncation or name mismatch.

    ``expect_hp`` optionally pins the architecture: the file's tensor names
    must match the names it implies (K and training settings may differ).
    """
    r = _Reader(Path(path).read_bytes())
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    (hlen,) = r.unpack("<I")
    try:
        hp, extra = _parse_hp_text(r.take(hlen).decode("utf-8"))
    except (ValueError, SyntaxError, TypeError) as exc:
        raise CheckpointFormatError(f"{path}: corrupt header ({exc})") from exc
    (step,) = r.unpack("<Q")
    (count,) = r.unpack("<I")
    params, m, v, opt_t = {}, {}, {}, None
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        code, ndim = r.unpack("<BB")
        shape = r.unpack(f"<{ndim}Q")
        dt = np.dtype("<f4") if code == _F32 else np.dtype("<i8")
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(size * dt.itemsize), dtype=dt).reshape(shape)
        if name.startswith("param."):
            params[name[6:]] = torch.from_numpy(arr.astype(np.float32))
        elif name == "opt.t":
            opt_t = int(arr[0])
        elif name.startswith("opt.m."):
            m[name[6:]] = torch.from_numpy(arr.astype(np.float32))
        elif name.startswith("opt.v."):
            v[name[6:]] = torch.from_numpy(arr.astype(np.float32))
        else:
            raise CheckpointFormatError(f"{path}: unknown record {name!r}")
    if r.pos != len(r.data):
        raise CheckpointFormatError(f"{path}: trailing bytes")
    if expect_hp is not None and set(canonical_names(expect_hp)) != set(params):
        raise ConfigMismatch(f"{path}: tensor names do not match the expected architecture")
    model_params = ModelParams.from_canonical(hp, params)
    opt = None
    if opt_t is not None:
        opt = OptimizerState(hp.beta1, hp.beta2, hp.adam_eps, opt_t, m, v)
    return Checkpoint(hp, model_params, int(step), opt, extra)
