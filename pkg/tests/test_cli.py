import subprocess
import sys
import warnings

import numpy as np
import pytest

from milfuse import cli, config
from milfuse.branch import load_params
from milfuse.checkpoint import read_tensors
from milfuse.errors import ValidationError

STAGE1 = ["--in-dim", "32", "--hidden-dim", "64", "--attn-dim", "8", "--max-epochs", "3", "--min-epochs", "1",
          "--patience", "1"]
STAGE2 = ["--stage2-hidden-dim", "16", "--stage2-attn-dim", "8"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert run("synth", "--out", out, "--seed", 7, "--samples-per-class", 10, "--dim", 32) == 0
    return out


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_help_lists_defaults(capsys):
    parser = cli.build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    for name, p in sub.choices.items():
        text = p.format_help()
        for action in p._actions:
            if action.dest in config.KEYS and config.KEYS[action.dest].default is not None:
                assert f"(default: {config.KEYS[action.dest].default})" in " ".join(action.help.split())
        assert "--help" in text
    out = subprocess.run([sys.executable, "-m", "milfuse", "crossval", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "--folds" in out.stdout


def test_synth_layout_and_determinism(data, tmp_path):
    assert (data / "manifest.tsv").is_file() and (data / "split.txt").is_file()
    assert (data / "bags" / "syn00_he.milf").is_file()
    assert "seed = 7" in (data / "effective_config.txt").read_text()
    other = tmp_path / "again"
    assert run("synth", "--out", other, "--seed", 7, "--samples-per-class", 10, "--dim", 32) == 0
    a, b = tree_bytes(other), tree_bytes(data)
    # the echoed config records the output path itself
    assert a.pop("effective_config.txt") != b.pop("effective_config.txt")
    assert a == b


def test_synth_refuses_existing_dir(data, tmp_path, capsys):
    assert run("synth", "--out", data, "--seed", 7) == 2
    assert "--force" in capsys.readouterr().err
    dst = tmp_path / "d"
    assert run("synth", "--out", dst, "--samples-per-class", 10, "--dim", 8) == 0
    assert run("synth", "--out", dst, "--samples-per-class", 10, "--dim", 8, "--force") == 0


def test_synth_three_classes_rejected(tmp_path, capsys):
    assert run("synth", "--out", tmp_path / "x", "--classes", 3) == 2
    assert "4 classes" in capsys.readouterr().err
    assert not (tmp_path / "x").exists() or not any((tmp_path / "x").iterdir())


def test_config_file_and_flag_precedence(tmp_path):
    conf = tmp_path / "run.conf"
    conf.write_text("# small run\nsamples_per_class = 12\ndim = 16   # tiny\nseed = 3\n")
    assert run("synth", "--config", conf, "--out", tmp_path / "d", "--seed", 4) == 0
    echoed = config.load_config(tmp_path / "d" / "effective_config.txt")
    assert echoed["samples_per_class"] == 12 and echoed["dim"] == 16 and echoed["seed"] == 4


def test_config_unknown_key(tmp_path, capsys):
    conf = tmp_path / "bad.conf"
    conf.write_text("learning_rate = 0.1\n")
    assert run("synth", "--config", conf, "--out", tmp_path / "d") == 2
    assert "unknown key 'learning_rate'" in capsys.readouterr().err


def test_config_parse_errors():
    with pytest.raises(ValidationError, match="expected"):
        config.parse_config_text("lr 0.1")
    with pytest.raises(ValidationError, match="bad value"):
        config.parse_config_text("folds = many")
    assert config.parse_config_text("l2_normalize = yes")["l2_normalize"] is True


def test_missing_split_file(data, tmp_path, capsys):
    missing = tmp_path / "nope.txt"
    code = run("train-branch", "--modality", "ihc", "--manifest", data / "manifest.tsv", "--split", missing,
               "--out", tmp_path / "b.ckpt", *STAGE1)
    assert code == 2
    assert str(missing) in capsys.readouterr().err


def test_missing_required_setting(capsys):
    assert run("split", "--out", "x") == 2
    assert "--manifest" in capsys.readouterr().err


def test_resume_bit_exact(data, tmp_path):
    common = ["--modality", "he", "--manifest", data / "manifest.tsv", "--split", data / "split.txt",
              "--in-dim", 32, "--hidden-dim", 64, "--attn-dim", 8, "--min-epochs", 6]
    assert run("train-branch", *common, "--max-epochs", 6, "--out", tmp_path / "full.ckpt") == 0
    assert run("train-branch", *common, "--max-epochs", 2, "--out", tmp_path / "part.ckpt") == 0
    assert run("train-branch", *common, "--max-epochs", 6, "--out", tmp_path / "part.ckpt", "--resume") == 0
    for suffix in ("", ".opt", ".history.tsv"):
        assert (tmp_path / f"full.ckpt{suffix}").read_bytes() == (tmp_path / f"part.ckpt{suffix}").read_bytes()


def test_divergence_exit_code(data, tmp_path, capsys):
    with np.errstate(all="ignore"), warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        code = run("train-branch", "--modality", "he", "--manifest", data / "manifest.tsv", "--split",
                   data / "split.txt", "--out", tmp_path / "b.ckpt", *STAGE1, "--lr", 1e300,
                   "--weight-decay", 0)
    assert code == 3
    assert "[train-he]" in capsys.readouterr().err
    assert (tmp_path / "b.ckpt.partial").is_file()


def test_stage_by_stage_chain(data, tmp_path, capsys):
    m, s = data / "manifest.tsv", data / "split.txt"
    for mod in ("he", "ihc"):
        assert run("train-branch", "--modality", mod, "--manifest", m, "--split", s,
                   "--out", tmp_path / f"{mod}.ckpt", *STAGE1) == 0
        assert run("extract-embeddings", "--manifest", m, "--ckpt", tmp_path / f"{mod}.ckpt", "--modality", mod,
                   "--out", tmp_path / f"emb_{mod}") == 0
    z = read_tensors(tmp_path / "emb_he" / "syn00.emb")["Z"]
    assert z.shape == (4, 64)
    assert run("fuse", "--manifest", m, "--he-embeddings", tmp_path / "emb_he", "--ihc-embeddings",
               tmp_path / "emb_ihc", "--hidden-dim", 64, "--out", tmp_path / "fused") == 0
    fm = tmp_path / "fused" / "fused_manifest.tsv"
    assert fm.read_text().splitlines()[0] == "slide_id\tlabel\tfused_path"
    assert run("train-fused", "--manifest", fm, "--split", s, "--out", tmp_path / "fused.ckpt",
               "--max-epochs", 2, *STAGE2) == 0
    assert load_params(tmp_path / "fused.ckpt").in_dim == 1024
    capsys.readouterr()
    assert run("evaluate", "--manifest", fm, "--split", s, "--ckpt", tmp_path / "fused.ckpt",
               "--modality", "fused", "--out", tmp_path / "m.tsv") == 0
    assert capsys.readouterr().out.startswith("FUSED\tACC")
    assert (tmp_path / "m.tsv").read_text().startswith("model\tacc\tauc_macro")


@pytest.fixture(scope="module")
def cv_dir(data, tmp_path_factory):
    out = tmp_path_factory.mktemp("cv") / "cv"
    assert run("crossval", "--manifest", data / "manifest.tsv", "--out", out, "--folds", 2, "--seed", 5,
               *STAGE1, *STAGE2) == 0
    return out


def test_crossval_outputs(cv_dir):
    assert {p.name for p in cv_dir.iterdir()} >= {"fold_0", "fold_1", "summary.tsv", "folds.tsv",
                                                   "effective_config.txt"}
    rows = [line.split("\t")[0] for line in (cv_dir / "summary.tsv").read_text().splitlines()]
    assert rows == ["model", "HE", "IHC", "FUSED"]


def test_crossval_refuses_existing(data, cv_dir):
    assert run("crossval", "--manifest", data / "manifest.tsv", "--out", cv_dir, "--folds", 1) == 2


def test_train_branch_reproduces_crossval_fold(data, cv_dir, tmp_path):
    assert run("train-branch", "--modality", "ihc", "--manifest", data / "manifest.tsv",
               "--split", cv_dir / "fold_1" / "split.txt", "--out", tmp_path / "ihc.ckpt", *STAGE1) == 0
    assert (tmp_path / "ihc.ckpt").read_bytes() == (cv_dir / "fold_1" / "ihc.ckpt").read_bytes()


def test_gradcheck_pass_fail_and_reproducible(capsys):
    assert run("gradcheck", "--configs", 8, "--seed", 42) == 0
    first = capsys.readouterr().out
    assert "PASS" in first
    assert run("gradcheck", "--configs", 8, "--seed", 42) == 0
    second = capsys.readouterr().out
    table = lambda text: [line for line in text.splitlines() if "configurations (" not in line]
    assert table(first) == table(second)
    assert run("gradcheck", "--configs", 4, "--tolerance", 1e-12) == 1
    assert "worst seed" in capsys.readouterr().out
