import pytest

from satnmt import data
from satnmt.cli import SCHEMA, main, parse_config_file, ConfigError

SMALL = ["--set", "d_model=16", "--set", "layers=1", "--set", "heads=2", "--set", "d_ff=32",
         "--set", "warmup=10", "--set", "batch_tokens=200", "--set", "ckpt_interval=10",
         "--set", "avg_last=2"]


@pytest.fixture(scope="module")
def toy_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy")
    assert main(["make-toy-corpus", "--out", str(out), "--set", "toy_pairs=120",
                 "--set", "toy_test_pairs=15", "--set", "toy_vocab=8",
                 "--set", "toy_max_len=6"]) == 0
    return out


@pytest.fixture(scope="module")
def trained(toy_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    args = ["train", "--out", str(out), "--steps", "30", "--seed", "1",
            "--set", f"src_train={toy_dir / 'train.src'}",
            "--set", f"tgt_train={toy_dir / 'train.tgt'}"] + SMALL
    assert main(args) == 0
    return out, args


def test_config_file_parsing(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nsteps = 5  # trailing\nshared_vocab = false\n\n")
    assert parse_config_file(str(cfg)) == {"steps": 5, "shared_vocab": False}
    cfg.write_text("nonsense_key = 1\n")
    with pytest.raises(ConfigError):
        parse_config_file(str(cfg))
    assert "k" in SCHEMA and "out" in SCHEMA


def test_unknown_key_and_missing_corpus_exit_2(tmp_path):
    out = tmp_path / "never"
    assert main(["train", "--out", str(out), "--set", "bogus=1"]) == 2
    assert main(["train", "--out", str(out), "--set", f"src_train={tmp_path / 'no.src'}",
                 "--set", f"tgt_train={tmp_path / 'no.tgt'}"]) == 2
    assert not out.exists()


def test_train_outputs(trained):
    out, _ = trained
    ckpts = sorted(p.name for p in out.glob("ckpt_*.bin"))
    assert ckpts == ["ckpt_10.bin", "ckpt_20.bin", "ckpt_30.bin"]
    for name in ("averaged.bin", "metrics.tsv", "timing.tsv", "vocab.src", "vocab.tgt"):
        assert (out / name).is_file()


def test_train_rerun_same_metrics(trained, tmp_path):
    out, args = trained
    again = tmp_path / "again"
    args = list(args)
    args[args.index("--out") + 1] = str(again)
    assert main(args) == 0
    assert (again / "metrics.tsv").read_text() == (out / "metrics.tsv").read_text()


def test_decode_modes(trained, toy_dir, tmp_path):
    out, _ = trained
    base = ["decode", "--set", f"checkpoint={out / 'averaged.bin'}",
            "--set", f"src_test={toy_dir / 'test.src'}"]
    assert main(base + ["--beam", "1", "--out", str(tmp_path / "a.txt")]) == 0
    assert main(base + ["--beam", "1", "--batch", "1", "--out", str(tmp_path / "b.txt")]) == 0
    assert (tmp_path / "a.txt").read_text() == (tmp_path / "b.txt").read_text()
    assert main(base + ["--beam", "3", "--k", "2", "--out", str(tmp_path / "c.txt")]) == 0
    n_in = len(data.read_lines(toy_dir / "test.src"))
    for name in ("a.txt", "c.txt"):
        assert len(data.read_lines(tmp_path / name)) == n_in


def test_decode_vocab_mismatch_exit_2(trained, toy_dir, tmp_path):
    out, _ = trained
    bad = tmp_path / "vocab.bad"
    data.Vocab(list(data.RESERVED) + ["zz"]).save(bad)
    assert main(["decode", "--set", f"checkpoint={out / 'averaged.bin'}",
                 "--set", f"src_test={toy_dir / 'test.src'}", "--set", f"vocab_src={bad}",
                 "--out", str(tmp_path / "x.txt")]) == 2


def test_distill_and_eval(trained, toy_dir, tmp_path):
    out, _ = trained
    dist = tmp_path / "dist"
    assert main(["distill", "--set", f"checkpoint={out / 'averaged.bin'}",
                 "--set", f"src_train={toy_dir / 'train.src'}", "--beam", "2",
                 "--out", str(dist)]) == 0
    assert (dist / "distill.src").read_bytes() == (toy_dir / "train.src").read_bytes()
    assert len(data.read_lines(dist / "distill.tgt")) == len(data.read_lines(toy_dir / "train.src"))
    report = tmp_path / "bleu.txt"
    assert main(["eval", "--set", f"hyp={toy_dir / 'test.tgt'}",
                 "--set", f"ref={toy_dir / 'test.tgt'}", "--out", str(report)]) == 0
    assert report.read_text().startswith("BLEU = 100.00")
    pw = tmp_path / "pw.txt"
    assert main(["eval", "--positionwise", "--set", f"checkpoint={out / 'averaged.bin'}",
                 "--set", f"src_test={toy_dir / 'test.src'}",
                 "--set", f"tgt_test={toy_dir / 'test.tgt'}", "--set", "max_position=8",
                 "--out", str(pw)]) == 0
    assert "position\tcross_entropy" in pw.read_text()


def test_bench_k1_row_is_baseline(trained, toy_dir, tmp_path):
    out, _ = trained
    bench = tmp_path / "bench"
    assert main(["bench", "--set", f"checkpoint={out / 'averaged.bin'}",
                 "--set", f"src_test={toy_dir / 'test.src'}",
                 "--set", f"tgt_test={toy_dir / 'test.tgt'}", "--set", "bench_k=1,2,4,6",
                 "--set", "bench_batches=1,4", "--out", str(bench)]) == 0
    rows = [line.split("\t") for line in (bench / "latency.tsv").read_text().splitlines()]
    assert rows[0] == ["K", "batch", "mean_ms", "invocations", "speedup_vs_K1"]
    assert [r[4] for r in rows[1:] if r[0] == "1"] == ["1.00", "1.00"]
    report = (bench / "report.tsv").read_text().splitlines()
    assert len(report) == 5 and report[1].split("\t")[-1] == "1.00x"


def test_init_from_teacher_flag(trained, toy_dir, tmp_path):
    out, _ = trained
    student = tmp_path / "student"
    assert main(["train", "--out", str(student), "--steps", "10", "--k", "2",
                 "--init-from-teacher", str(out / "averaged.bin"),
                 "--set", f"src_train={toy_dir / 'train.src'}",
                 "--set", f"tgt_train={toy_dir / 'train.tgt'}"] + SMALL) == 0
    ckpt = data.load_checkpoint(student / "ckpt_10.bin")
    assert ckpt.hp.K == 2
    assert main(["train", "--out", str(tmp_path / "bad"), "--steps", "10",
                 "--init-from-teacher", str(tmp_path / "missing.bin"),
                 "--set", f"src_train={toy_dir / 'train.src'}",
                 "--set", f"tgt_train={toy_dir / 'train.tgt'}"] + SMALL) == 2


def test_divergence_exit_3(toy_dir, tmp_path):
    assert main(["train", "--out", str(tmp_path / "div"), "--steps", "10",
                 "--set", f"src_train={toy_dir / 'train.src'}",
                 "--set", f"tgt_train={toy_dir / 'train.tgt'}",
                 "--set", "lr_scale=1e30"] + SMALL) == 3


def test_pipeline_command(toy_dir, tmp_path):
    out = tmp_path / "kd"
    assert main(["pipeline", "--out", str(out), "--steps", "10", "--k", "2",
                 "--set", "teacher_steps=20", "--set", "distill_beam=2",
                 "--set", f"src_train={toy_dir / 'train.src'}",
                 "--set", f"tgt_train={toy_dir / 'train.tgt'}"] + SMALL) == 0
    assert (out / "teacher" / "averaged.bin").is_file()
    assert (out / "student" / "averaged.bin").is_file()
    assert data.load_checkpoint(out / "student" / "averaged.bin").hp.K == 2
