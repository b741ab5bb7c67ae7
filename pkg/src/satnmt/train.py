"""Training loop, learning-rate schedule, checkpoint averaging and distillation."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import torch

from satnmt import tensor_core as tc
from satnmt.data import (Checkpoint, EncodedCorpus, ParallelCorpus, Vocab, batch_by_tokens,
                         save_checkpoint)
from satnmt.decode import SearchConfig, batch_decode, default_max_len
from satnmt.errors import ConfigMismatch, InvalidArgument, NumericalError
from satnmt.model import PAD, HyperParams, ModelParams, SATModel, init_from_teacher

log = logging.getLogger(__name__)


def lr_schedule(step: int, d_model: int, warmup: int) -> float:
    """Inverse-square-root schedule with linear warmup."""
    if step < 1:
        raise InvalidArgument(f"step must be >= 1, got {step}")
    if warmup < 1:
        raise InvalidArgument(f"warmup must be >= 1, got {warmup}")
    return d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


@dataclass
class TrainConfig:
    hp: HyperParams
    steps: int = 2000
    batch_tokens: int = 1000
    ckpt_interval: int = 500
    avg_last: int = 5
    lr_scale: float = 1.0
    kd_mode: str = "none"          # "none" or "word"
    teacher_path: str | None = None
    distilled: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise InvalidArgument("steps must be >= 1")
        if self.avg_last < 1:
            raise InvalidArgument("avg_last must be >= 1")
        if self.ckpt_interval < 1 or self.ckpt_interval > self.steps:
            raise InvalidArgument("ckpt_interval must lie in 1..steps")
        if self.kd_mode not in ("none", "word"):
            raise InvalidArgument(f"unknown kd_mode {self.kd_mode!r}")


@dataclass
class TrainResult:
    checkpoints: list[Checkpoint]
    metrics: list[tuple[int, float, float, int]] = field(default_factory=list)
    timing: list[tuple[int, float]] = field(default_factory=list)

    def averaged(self, count: int) -> ModelParams:
        return average_checkpoints(self.checkpoints[-count:])


def dropout_generator(seed: int, step: int) -> torch.Generator:
    """Generator keyed on (seed, step) so any step can be replayed in isolation."""
    return torch.Generator().manual_seed((seed * 1_000_003 + step) % (2 ** 63))


def _batch_stream(corpus: EncodedCorpus, budget: int, seed: int):
    lengths = corpus.lengths()
    epoch = 0
    while True:
        for batch in batch_by_tokens(lengths, budget, seed=seed * 7919 + epoch):
            yield batch
        epoch += 1


def word_kd_loss(student_logits: torch.Tensor, teacher_logits: torch.Tensor,
                 targets: torch.Tensor) -> torch.Tensor:
    """Mean KL(teacher || student) over non-pad target positions."""
    t_logp = torch.log_softmax(teacher_logits, -1)
    s_logp = torch.log_softmax(student_logits, -1)
    kl = (t_logp.exp() * (t_logp - s_logp)).sum(-1)
    keep = targets != PAD
    return (kl * keep).sum() / keep.sum().clamp(min=1)


def train_loop(config: TrainConfig, corpus: EncodedCorpus,
               params: ModelParams | None = None, out_dir: str | Path | None = None,
               teacher: SATModel | None = None,
               on_step: Callable[[int, float], None] | None = None) -> TrainResult:
    """Teacher-forced training with relaxed mask and K-step shifted inputs.

    A checkpoint is kept every ``ckpt_interval`` steps (and written to
    ``out_dir`` as ``ckpt_<step>.bin`` when given).  Given the same seed the
    run, and therefore the metrics log, is bit-for-bit reproducible.
    """
    if len(corpus) == 0:
        raise InvalidArgument("empty training corpus")
    hp = config.hp
    if config.kd_mode == "word" and teacher is None:
        raise InvalidArgument("word-level distillation needs a teacher model")
    model = SATModel(hp, params.clone() if params is not None else None)
    weights = model.params.unique()
    for t in weights.values():
        t.requires_grad_(True)
    state = tc.OptimizerState(hp.beta1, hp.beta2, hp.adam_eps)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    result = TrainResult([])
    batches = _batch_stream(corpus, config.batch_tokens, hp.seed)
    t_last = time.perf_counter()
    for step in range(1, config.steps + 1):
        idx = next(batches)
        src, tgt = corpus.tensors(idx)
        gen = dropout_generator(hp.seed, step)
        if config.kd_mode == "word":
            logits = model.teacher_forced_logits(src, tgt, train_mode=True, generator=gen)
            with torch.no_grad():
                t_logits = teacher.teacher_forced_logits(src, tgt, K=1)
            loss = word_kd_loss(logits, t_logits, tgt)
        else:
            loss = model.loss(src, tgt, train_mode=True, generator=gen)
        loss_value = loss.item()
        if not math.isfinite(loss_value):
            raise NumericalError(f"non-finite loss {loss_value} at step {step}")
        grads = tc.backward(loss, weights)
        lr = config.lr_scale * lr_schedule(step, hp.d_model, hp.warmup)
        tc.adam_step(weights, grads, state, lr)
        tokens = int((tgt != PAD).sum())
        result.metrics.append((step, loss_value, lr, tokens))
        now = time.perf_counter()
        result.timing.append((step, tokens / max(now - t_last, 1e-12)))
        t_last = now
        if on_step is not None:
            on_step(step, loss_value)
        if step % config.ckpt_interval == 0:
            ckpt = Checkpoint(hp, model.params.clone(), step, _snapshot(state))
            result.checkpoints.append(ckpt)
            if out is not None:
                save_checkpoint(ckpt, out / f"ckpt_{step}.bin")
            log.info("step %d loss %.4f lr %.2e", step, loss_value, lr)
    if out is not None:
        write_metrics(result, out)
    return result


def _snapshot(state: tc.OptimizerState) -> tc.OptimizerState:
    return tc.OptimizerState(state.beta1, state.beta2, state.eps, state.t,
                             {k: v.clone() for k, v in state.m.items()},
                             {k: v.clone() for k, v in state.v.items()})


def write_metrics(result: TrainResult, out_dir: Path) -> None:
    """``metrics.tsv`` is deterministic; throughput goes to ``timing.tsv``."""
    lines = ["step\tloss\tlr\ttokens"]
    lines += [f"{s}\t{loss:.9g}\t{lr:.9g}\t{tok}" for s, loss, lr, tok in result.metrics]
    (out_dir / "metrics.tsv").write_text("\n".join(lines) + "\n")
    lines = ["step\ttokens_per_sec"] + [f"{s}\t{tps:.1f}" for s, tps in result.timing]
    (out_dir / "timing.tsv").write_text("\n".join(lines) + "\n")


def average_checkpoints(checkpoints: Sequence[Checkpoint | ModelParams]) -> ModelParams:
    """Elementwise mean of every named tensor (accumulated in float64)."""
    if not checkpoints:
        raise InvalidArgument("nothing to average")
    plist = [c.params if isinstance(c, Checkpoint) else c for c in checkpoints]
    first = plist[0]
    names = list(first.unique())
    for p in plist[1:]:
        if list(p.unique()) != names:
            raise ConfigMismatch("checkpoints have different tensor names")
        for name in names:
            if p[name].shape != first[name].shape:
                raise ConfigMismatch(f"{name}: shape mismatch between checkpoints")
    averaged = {}
    for name in names:
        total = torch.zeros(first[name].shape, dtype=torch.float64)
        for p in plist:
            total += p[name].detach().double()
        averaged[name] = (total / len(plist)).to(first[name].dtype)
    # rebuild aliases from the first checkpoint's layout
    alias = {id(t): name for name, t in reversed(list(first.items()))}
    return ModelParams({name: averaged[alias[id(t)]] for name, t in first.items()})


def distill(teacher: Checkpoint, sources: Sequence[Sequence[str]], src_vocab: Vocab,
            tgt_vocab: Vocab, beam_size: int = 4, batch_size: int = 64,
            max_len=default_max_len) -> list[list[str]]:
    """Replace each target with the teacher's best beam output for its source."""
    if len(src_vocab) != teacher.hp.src_vocab or len(tgt_vocab) != teacher.hp.tgt_vocab:
        raise ConfigMismatch("vocabulary sizes do not match the teacher checkpoint")
    if beam_size < 1:
        raise InvalidArgument("beam_size must be >= 1")
    model = SATModel(teacher.hp, teacher.params)
    ids = [src_vocab.encode(s) for s in sources]
    with torch.inference_mode():
        results = batch_decode(model, ids, teacher.hp.K,
                               SearchConfig(beam_size, max_len), batch_size)
    return [tgt_vocab.decode(r.tokens) for r in results]


@dataclass
class PipelineResult:
    teacher: TrainResult
    distilled: ParallelCorpus
    student: TrainResult


def distillation_pipeline(corpus: ParallelCorpus, src_vocab: Vocab, tgt_vocab: Vocab,
                          teacher_config: TrainConfig, student_config: TrainConfig,
                          beam_size: int = 4, init_student: bool = True,
                          out_dir: str | Path | None = None) -> PipelineResult:
    """Train a K=1 teacher, beam-decode the training set, train the student on it."""
    if teacher_config.hp.K != 1:
        raise InvalidArgument("the teacher must be autoregressive (K=1)")
    out = Path(out_dir) if out_dir is not None else None
    encoded = EncodedCorpus.from_corpus(corpus, src_vocab, tgt_vocab)
    teacher_run = train_loop(teacher_config, encoded,
                             out_dir=out / "teacher" if out else None)
    teacher_ckpt = Checkpoint(teacher_config.hp, teacher_run.averaged(teacher_config.avg_last),
                              teacher_config.steps)
    targets = distill(teacher_ckpt, corpus.src, src_vocab, tgt_vocab, beam_size)
    keep = [i for i, t in enumerate(targets) if t]
    distilled = ParallelCorpus([corpus.src[i] for i in keep], [targets[i] for i in keep])
    init = init_from_teacher(teacher_ckpt, student_config.hp) if init_student else None
    student_run = train_loop(student_config,
                             EncodedCorpus.from_corpus(distilled, src_vocab, tgt_vocab),
                             params=init, out_dir=out / "student" if out else None)
    return PipelineResult(teacher_run, distilled, student_run)
