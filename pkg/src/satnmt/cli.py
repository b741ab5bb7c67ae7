"""Command-line entry point: ``satnmt <command> [--config FILE] [flags]``.

Configuration is a flat set of keys.  Values come from the schema defaults,
then an optional ``key = value`` config file, then ``--set key=value`` and
the dedicated flags.  Exit codes: 0 success, 2 usage/config error, 3
numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from dataclasses import dataclass
from pathlib import Path

import torch

from satnmt import data, decode, evaluate, train
from satnmt.errors import (CheckpointFormatError, ConfigMismatch, InvalidArgument,
                           NumericalError)
from satnmt.model import HyperParams, SATModel, init_from_teacher

log = logging.getLogger("satnmt")


class ConfigError(Exception):
    pass


def _bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _opt_str(raw: str) -> str | None:
    return raw or None


# key -> (parser, default)
SCHEMA = {
    "src_train": (_opt_str, None), "tgt_train": (_opt_str, None),
    "src_test": (_opt_str, None), "tgt_test": (_opt_str, None),
    "tokenizer": (str, "word"), "max_sentence_len": (int, 64),
    "vocab_size": (int, 1000), "shared_vocab": (_bool, True),
    "vocab_src": (_opt_str, None), "vocab_tgt": (_opt_str, None),
    "d_model": (int, 64), "layers": (int, 2), "heads": (int, 4), "d_ff": (int, 256),
    "k": (int, 1), "dropout": (float, 0.1), "label_smoothing": (float, 0.1),
    "sharing": (str, "shared-all"), "scale_embedding": (_bool, True),
    "beta1": (float, 0.9), "beta2": (float, 0.98), "adam_eps": (float, 1e-9),
    "warmup": (int, 200), "seed": (int, 0),
    "steps": (int, 2000), "batch_tokens": (int, 1000), "ckpt_interval": (int, 500),
    "avg_last": (int, 5), "lr_scale": (float, 0.3), "kd_mode": (str, "none"),
    "init_from_teacher": (_opt_str, None),
    "checkpoint": (_opt_str, None), "beam": (int, 1), "batch": (int, 32),
    "max_len": (int, 0), "min_len": (int, 0),
    "hyp": (_opt_str, None), "ref": (_opt_str, None),
    "positionwise": (_bool, False), "max_position": (int, 32),
    "bench_k": (str, "1,2,4,6"), "bench_checkpoints": (str, ""),
    "bench_batches": (str, "1"), "repetitions": (int, 3),
    "teacher_steps": (int, 0), "distill_beam": (int, 4),
    "toy_pairs": (int, 20000), "toy_test_pairs": (int, 500), "toy_vocab": (int, 32),
    "toy_min_len": (int, 4), "toy_max_len": (int, 16), "toy_task": (str, "reverse"),
    "out": (_opt_str, None),
}


@dataclass
class RunConfig:
    values: dict

    def __getattr__(self, key):
        try:
            return self.values[key]
        except KeyError:
            raise AttributeError(key) from None

    def hyperparams(self, src_vocab: int, tgt_vocab: int, **overrides) -> HyperParams:
        fields = dict(src_vocab=src_vocab, tgt_vocab=tgt_vocab, d_model=self.d_model,
                      N=self.layers, h=self.heads, d_ff=self.d_ff, K=self.k,
                      dropout=self.dropout, label_smoothing=self.label_smoothing,
                      sharing=self.sharing, scale_embedding=self.scale_embedding,
                      beta1=self.beta1, beta2=self.beta2, adam_eps=self.adam_eps,
                      warmup=self.warmup, seed=self.seed)
        fields.update(overrides)
        return HyperParams(**fields)

    def train_config(self, hp: HyperParams, steps: int | None = None) -> train.TrainConfig:
        steps = steps or self.steps
        return train.TrainConfig(hp, steps=steps, batch_tokens=self.batch_tokens,
                                 ckpt_interval=min(self.ckpt_interval, steps),
                                 avg_last=self.avg_last, lr_scale=self.lr_scale,
                                 kd_mode=self.kd_mode,
                                 teacher_path=self.init_from_teacher)

    def max_len_rule(self):
        return self.max_len if self.max_len > 0 else decode.default_max_len


def _parse_value(key: str, raw: str):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    parser, _ = SCHEMA[key]
    try:
        return parser(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from exc


def parse_config_file(path: str) -> dict:
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        values[key.strip()] = _parse_value(key.strip(), raw)
    return values


FLAG_KEYS = ("seed", "k", "beam", "batch", "steps", "init_from_teacher", "out")


def load_run_config(args: argparse.Namespace) -> RunConfig:
    values = {key: default for key, (_, default) in SCHEMA.items()}
    if args.config:
        values.update(parse_config_file(args.config))
    for item in args.set or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        values[key.strip()] = _parse_value(key.strip(), raw)
    for key in FLAG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            values[key] = value
    if getattr(args, "positionwise", False):
        values["positionwise"] = True
    return RunConfig(values)


def _require(cfg: RunConfig, *keys: str, files: bool = True) -> None:
    for key in keys:
        value = cfg.values.get(key)
        if value is None:
            raise ConfigError(f"missing required setting {key!r}")
        if files and key != "out" and not Path(value).is_file():
            raise ConfigError(f"{key}: no such file {value}")


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _vocab_paths(cfg: RunConfig, checkpoint: str) -> tuple[Path, Path]:
    base = Path(checkpoint).parent
    src = Path(cfg.vocab_src) if cfg.vocab_src else base / "vocab.src"
    tgt = Path(cfg.vocab_tgt) if cfg.vocab_tgt else base / "vocab.tgt"
    for p in (src, tgt):
        if not p.is_file():
            raise ConfigError(f"vocabulary file not found: {p}")
    return src, tgt


def _load_model(cfg: RunConfig, checkpoint: str):
    ckpt = data.load_checkpoint(checkpoint)
    src_path, tgt_path = _vocab_paths(cfg, checkpoint)
    src_vocab, tgt_vocab = data.Vocab.load(src_path), data.Vocab.load(tgt_path)
    if len(src_vocab) != ckpt.hp.src_vocab or len(tgt_vocab) != ckpt.hp.tgt_vocab:
        raise ConfigMismatch(f"vocabulary sizes ({len(src_vocab)}, {len(tgt_vocab)}) do not "
                             f"match checkpoint ({ckpt.hp.src_vocab}, {ckpt.hp.tgt_vocab})")
    return ckpt, SATModel(ckpt.hp, ckpt.params), src_vocab, tgt_vocab


def _decode_lines(cfg: RunConfig, model, src_vocab, tgt_vocab, lines, K, beam, batch):
    ids = [src_vocab.encode(data.tokenize(line, cfg.tokenizer)) for line in lines]
    search = decode.SearchConfig(beam, cfg.max_len_rule(), cfg.min_len)
    with torch.inference_mode():
        results = decode.batch_decode(model, ids, K, search, batch)
    return [" ".join(tgt_vocab.decode(r.tokens)) for r in results], results


def _build_vocabs(cfg: RunConfig, corpus: data.ParallelCorpus):
    if cfg.init_from_teacher:
        src_p, tgt_p = _vocab_paths(cfg, cfg.init_from_teacher)
        return data.Vocab.load(src_p), data.Vocab.load(tgt_p)
    if cfg.shared_vocab:
        shared = data.build_vocab(corpus.src + corpus.tgt, cfg.vocab_size)
        return shared, shared
    return (data.build_vocab(corpus.src, cfg.vocab_size),
            data.build_vocab(corpus.tgt, cfg.vocab_size))


def _finish_training(cfg, result: train.TrainResult, hp, out: Path) -> None:
    count = min(cfg.avg_last, len(result.checkpoints))
    averaged = data.Checkpoint(hp, result.averaged(count), result.checkpoints[-1].step)
    data.save_checkpoint(averaged, out / "averaged.bin")


# --- commands ---------------------------------------------------------------

def cmd_make_toy_corpus(cfg: RunConfig) -> int:
    _require(cfg, "out")
    out = _out_dir(cfg)
    kwargs = dict(vocab_size=cfg.toy_vocab, min_len=cfg.toy_min_len,
                  max_len=cfg.toy_max_len, task=cfg.toy_task)
    data.write_parallel(data.make_toy_corpus(cfg.toy_pairs, seed=cfg.seed, **kwargs),
                        out / "train.src", out / "train.tgt")
    data.write_parallel(data.make_toy_corpus(cfg.toy_test_pairs, seed=cfg.seed + 1, **kwargs),
                        out / "test.src", out / "test.tgt")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    _require(cfg, "src_train", "tgt_train")
    _require(cfg, "out", files=False)
    if cfg.init_from_teacher:
        _require(cfg, "init_from_teacher")
    corpus = data.load_parallel(cfg.src_train, cfg.tgt_train, cfg.tokenizer,
                                cfg.max_sentence_len)
    if not len(corpus):
        raise ConfigError("training corpus is empty after filtering")
    src_vocab, tgt_vocab = _build_vocabs(cfg, corpus)
    hp = cfg.hyperparams(len(src_vocab), len(tgt_vocab))
    tcfg = cfg.train_config(hp)
    init = None
    teacher_model = None
    if cfg.init_from_teacher:
        teacher = data.load_checkpoint(cfg.init_from_teacher)
        init = init_from_teacher(teacher, hp)
        if cfg.kd_mode == "word":
            teacher_model = SATModel(teacher.hp, teacher.params)
    out = _out_dir(cfg)
    src_vocab.save(out / "vocab.src")
    tgt_vocab.save(out / "vocab.tgt")
    encoded = data.EncodedCorpus.from_corpus(corpus, src_vocab, tgt_vocab)
    result = train.train_loop(tcfg, encoded, params=init, out_dir=out, teacher=teacher_model)
    _finish_training(cfg, result, hp, out)
    return 0


def cmd_decode(cfg: RunConfig) -> int:
    _require(cfg, "checkpoint", "src_test")
    _require(cfg, "out", files=False)
    ckpt, model, src_vocab, tgt_vocab = _load_model(cfg, cfg.checkpoint)
    lines = data.read_lines(cfg.src_test)
    K = cfg.k if cfg.values.get("_k_given") else ckpt.hp.K
    outputs, _ = _decode_lines(cfg, model, src_vocab, tgt_vocab, lines, K, cfg.beam, cfg.batch)
    out = Path(cfg.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("".join(line + "\n" for line in outputs), encoding="utf-8")
    return 0


def cmd_distill(cfg: RunConfig) -> int:
    _require(cfg, "checkpoint", "src_train")
    _require(cfg, "out", files=False)
    ckpt, _, src_vocab, tgt_vocab = _load_model(cfg, cfg.checkpoint)
    lines = data.read_lines(cfg.src_train)
    sources = [data.tokenize(line, cfg.tokenizer) for line in lines]
    beam = cfg.beam if cfg.values.get("_beam_given") else cfg.distill_beam
    targets = train.distill(ckpt, sources, src_vocab, tgt_vocab, beam, cfg.batch,
                            cfg.max_len_rule())
    out = _out_dir(cfg)
    shutil.copyfile(cfg.src_train, out / "distill.src")
    (out / "distill.tgt").write_text("".join(" ".join(t) + "\n" for t in targets),
                                     encoding="utf-8")
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    _require(cfg, "out", files=False)
    lines = []
    if cfg.hyp or cfg.ref:
        _require(cfg, "hyp", "ref")
        hyps = [data.tokenize(x, cfg.tokenizer) for x in data.read_lines(cfg.hyp)]
        refs = [data.tokenize(x, cfg.tokenizer) for x in data.read_lines(cfg.ref)]
        report = evaluate.bleu(hyps, refs)
        rep = evaluate.repetition_stats(hyps)
        lines += [str(report),
                  f"repetitions (descriptive): consecutive={rep.consecutive_duplicates} "
                  f"repeated_bigrams={rep.repeated_bigrams} tokens={rep.tokens}"]
    if cfg.positionwise:
        _require(cfg, "checkpoint", "src_test", "tgt_test")
        ckpt, model, src_vocab, tgt_vocab = _load_model(cfg, cfg.checkpoint)
        srcs = [src_vocab.encode(data.tokenize(x, cfg.tokenizer))
                for x in data.read_lines(cfg.src_test)]
        tgts = [tgt_vocab.encode(data.tokenize(x, cfg.tokenizer))
                for x in data.read_lines(cfg.tgt_test)]
        ce = evaluate.position_wise_cross_entropy(model, srcs, tgts, cfg.max_position)
        lines.append("position\tcross_entropy")
        lines += [f"{t}\t{v:.6f}" for t, v in enumerate(ce)]
        lines.append(str(evaluate.periodicity_summary(ce, ckpt.hp.K)))
    if not lines:
        raise ConfigError("eval needs hyp/ref files and/or --positionwise")
    out = Path(cfg.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines[:2]))
    return 0


def _int_list(raw: str) -> list[int]:
    try:
        return [int(x) for x in raw.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {raw!r}") from exc


def _bench_models(cfg: RunConfig) -> dict[int, str]:
    if cfg.bench_checkpoints:
        pairs = {}
        for item in cfg.bench_checkpoints.split(","):
            k, sep, path = item.partition(":")
            if not sep:
                raise ConfigError("bench_checkpoints expects K:path entries")
            pairs[int(k)] = path.strip()
        return pairs
    _require(cfg, "checkpoint")
    return {k: cfg.checkpoint for k in _int_list(cfg.bench_k)}


def cmd_bench(cfg: RunConfig) -> int:
    _require(cfg, "src_test")
    _require(cfg, "out", files=False)
    paths = _bench_models(cfg)
    if 1 not in paths:
        raise ConfigError("benchmark needs a K=1 baseline")
    for p in paths.values():
        if not Path(p).is_file():
            raise ConfigError(f"no such checkpoint {p}")
    loaded = {k: _load_model(cfg, p) for k, p in paths.items()}
    lines = data.read_lines(cfg.src_test)
    src_vocab = loaded[1][2]
    srcs = [src_vocab.encode(data.tokenize(x, cfg.tokenizer)) for x in lines]
    search = decode.SearchConfig(cfg.beam, cfg.max_len_rule(), cfg.min_len)
    batches = _int_list(cfg.bench_batches)
    if cfg.values.get("_batch_given"):
        batches = [cfg.batch]
    cells = decode.measure_latency({k: m[1] for k, m in loaded.items()}, srcs, batches,
                                   search, cfg.repetitions)
    out = _out_dir(cfg)
    (out / "latency.txt").write_text(decode.format_latency(cells))
    (out / "latency.tsv").write_text(decode.format_latency(cells, "\t"))
    if cfg.tgt_test:
        refs = [data.tokenize(x, cfg.tokenizer) for x in data.read_lines(cfg.tgt_test)]
        runs = {}
        for k, (_, model, sv, tv) in loaded.items():
            hyps, _ = _decode_lines(cfg, model, sv, tv, lines, k, cfg.beam, batches[0])
            latency = next(c.mean_ms for c in cells if c.K == k and c.batch == batches[0])
            label = "Transformer" if k == 1 else f"SAT K={k}"
            runs[k] = evaluate.RunSummary(label, k, cfg.beam,
                                          evaluate.bleu(hyps, refs).bleu, latency)
        rows = evaluate.speed_quality_report(runs.pop(1), [runs[k] for k in sorted(runs)])
        (out / "report.txt").write_text(evaluate.format_report(rows))
        (out / "report.tsv").write_text(evaluate.format_report(rows, "\t"))
        print(evaluate.format_report(rows), end="")
    print(decode.format_latency(cells), end="")
    return 0


def cmd_pipeline(cfg: RunConfig) -> int:
    """Teacher training, sequence-level distillation and student training in one go."""
    _require(cfg, "src_train", "tgt_train")
    _require(cfg, "out", files=False)
    corpus = data.load_parallel(cfg.src_train, cfg.tgt_train, cfg.tokenizer,
                                cfg.max_sentence_len)
    src_vocab, tgt_vocab = _build_vocabs(cfg, corpus)
    t_hp = cfg.hyperparams(len(src_vocab), len(tgt_vocab), K=1)
    s_hp = cfg.hyperparams(len(src_vocab), len(tgt_vocab))
    out = _out_dir(cfg)
    result = train.distillation_pipeline(
        corpus, src_vocab, tgt_vocab, cfg.train_config(t_hp, cfg.teacher_steps or None),
        cfg.train_config(s_hp), beam_size=cfg.distill_beam, out_dir=out)
    for name, run, hp in (("teacher", result.teacher, t_hp), ("student", result.student, s_hp)):
        src_vocab.save(out / name / "vocab.src")
        tgt_vocab.save(out / name / "vocab.tgt")
        _finish_training(cfg, run, hp, out / name)
    data.write_parallel(result.distilled, out / "distill.src", out / "distill.tgt")
    return 0


COMMANDS = {
    "make-toy-corpus": cmd_make_toy_corpus, "train": cmd_train, "decode": cmd_decode,
    "distill": cmd_distill, "eval": cmd_eval, "bench": cmd_bench, "pipeline": cmd_pipeline,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="satnmt", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="key = value configuration file")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override any configuration key (repeatable)")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--k", type=int, help="group size")
    parser.add_argument("--beam", type=int, help="beam size (1 = greedy)")
    parser.add_argument("--batch", type=int, help="sentences per decoding batch")
    parser.add_argument("--steps", type=int)
    parser.add_argument("--init-from-teacher", dest="init_from_teacher", metavar="PATH")
    parser.add_argument("--positionwise", action="store_true")
    parser.add_argument("--out", metavar="PATH")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_run_config(args)
        for key in ("k", "beam", "batch"):
            if getattr(args, key) is not None:
                cfg.values[f"_{key}_given"] = True
        return COMMANDS[args.command](cfg)
    except (ConfigError, ConfigMismatch, InvalidArgument, CheckpointFormatError,
            FileNotFoundError) as exc:
        print(f"satnmt: error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"satnmt: numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
