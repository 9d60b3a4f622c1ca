from pathlib import Path

import pytest

from varietyid.cli import GEN_OPTS, REPORT_OPTS, TRAIN_OPTS, main
from varietyid.dataset import check_splits, read_manifest

GEN_SMALL = ["--regions", "4", "--sentences", "3", "--repeats", "2", "--feature-dim", "6",
             "--latent-dim", "4", "--frames-mean", "5", "--seed", "7"]
TRAIN_SMALL = ["--epochs", "2", "--batch-size", "8", "--hidden-dim", "8", "--lr", "3e-3"]


def tree_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "corpus"
    assert main(["gen", "--out", str(out), *GEN_SMALL]) == 0
    return out


@pytest.fixture(scope="module")
def trained(corpus):
    runs = corpus.parent / "runs"
    for name, regime in (("clf", "clf"), ("ms_ft", "ctr-ft")):
        rc = main(["train", "--corpus", str(corpus), "--out", str(runs / name), "--regime", regime,
                   "--loss", "ms", "--seeds", "1,2", *TRAIN_SMALL])
        assert rc == 0
    return runs


# -- gen ---------------------------------------------------------------------


def test_gen_outputs(corpus):
    m = read_manifest(corpus)
    check_splits(m)
    assert len(m.regions) == 4
    assert (corpus / "splits.txt").exists() and (corpus / "config.used").exists()
    assert "regions = 4" in (corpus / "config.used").read_text()


def test_gen_rerun_byte_identical(corpus, tmp_path):
    again = tmp_path / "corpus"
    assert main(["gen", "--out", str(again), *GEN_SMALL]) == 0
    a, b = tree_bytes(corpus), tree_bytes(again)
    a["config.used"] = a["config.used"].replace(str(corpus).encode(), b"X")
    b["config.used"] = b["config.used"].replace(str(again).encode(), b"X")
    assert a == b


def test_gen_from_config_file(tmp_path, corpus):
    conf = tmp_path / "gen.conf"
    conf.write_text("regions = 4\nsentences = 3\nrepeats = 2\nfeature_dim = 6\nlatent_dim = 4\n"
                    "frames_mean = 5\nseed = 99\n")
    out = tmp_path / "c"
    # Flag overrides the file's seed.
    assert main(["gen", "--config", str(conf), "--seed", "7", "--out", str(out)]) == 0
    assert (out / "manifest.txt").read_bytes() == (corpus / "manifest.txt").read_bytes()


def test_gen_missing_out(capsys):
    assert main(["gen", "--regions", "3"]) == 2
    err = capsys.readouterr().err
    assert "usage:" in err and "--out" in err


def test_gen_invalid_config(tmp_path):
    assert main(["gen", "--out", str(tmp_path / "x"), "--cities-per-region", "2"]) == 2
    assert main(["gen", "--out", str(tmp_path / "x"), "--regions", "many"]) == 2


def test_unknown_config_key(tmp_path, capsys):
    conf = tmp_path / "bad.conf"
    conf.write_text("regoins = 4\n")
    assert main(["gen", "--config", str(conf), "--out", str(tmp_path / "x")]) == 2
    assert "regoins" in capsys.readouterr().err


# -- train -------------------------------------------------------------------


def test_train_outputs(trained):
    run = trained / "ms_ft"
    for s in (1, 2):
        d = run / f"seed_{s}"
        for name in ("config.used", "best.ckpt", "epoch_1.ckpt", "epoch_2.ckpt", "metrics.tsv",
                     "test_report.tsv", "embeddings.slv1", "embeddings.labels"):
            assert (d / name).exists(), name
        assert f"seed = {s}" in (d / "config.used").read_text()
    assert "n_runs=2" in (run / "test_report.tsv").read_text()
    assert "regime = ctr-ft" in (run / "config.used").read_text()


def test_train_rerun_byte_identical(corpus, trained, tmp_path):
    again = tmp_path / "clf"
    assert main(["train", "--corpus", str(corpus), "--out", str(again), "--regime", "clf",
                 "--loss", "ms", "--seeds", "1,2", *TRAIN_SMALL]) == 0
    a, b = tree_bytes(trained / "clf"), tree_bytes(again)
    strip = lambda d, root: {k: v.replace(str(root).encode(), b"X") for k, v in d.items()}
    assert strip(a, trained / "clf") == strip(b, again)


def test_train_batch_of_one_with_contrastive(corpus, tmp_path, capsys):
    rc = main(["train", "--corpus", str(corpus), "--out", str(tmp_path / "r"), "--regime", "ctr-pt",
               "--loss", "sc", "--batch-size", "1"])
    assert rc == 2
    assert "contrastive requires batch >= 2" in capsys.readouterr().err


def test_train_unknown_loss(corpus, tmp_path, capsys):
    rc = main(["train", "--corpus", str(corpus), "--out", str(tmp_path / "r"), "--loss", "npair"])
    assert rc == 2
    err = capsys.readouterr().err
    assert "sc, tm, ms" in err


def test_train_missing_corpus_is_runtime_error(tmp_path):
    assert main(["train", "--corpus", str(tmp_path / "nope"), "--out", str(tmp_path / "r")]) == 1


# -- report ------------------------------------------------------------------


def test_report_outputs(trained, tmp_path):
    out = tmp_path / "rep"
    rc = main(["report", "--runs", str(trained / "clf"), str(trained / "ms_ft"), "--out", str(out),
               "--tsne", "--confusion", "--perplexity", "5", "--tsne-iter", "300"])
    assert rc == 0
    lines = (out / "report.tsv").read_text().splitlines()
    assert lines[0].split("\t") == ["run", "loss", "ctr_pt", "ctr_ft", "clf_ft", "n_runs", "accuracy", "macro_f1"]
    clf, ft = (dict(zip(lines[0].split("\t"), l.split("\t"))) for l in lines[1:])
    assert (clf["ctr_pt"], clf["ctr_ft"], clf["clf_ft"], clf["loss"]) == ("✗", "✗", "✓", "-")
    assert (ft["ctr_pt"], ft["ctr_ft"], ft["clf_ft"], ft["loss"]) == ("✗", "✓", "✓", "ms")
    assert ft["n_runs"] == "2" and "±" in ft["macro_f1"]
    for name in ("clf", "ms_ft"):
        for kind in ("tsne", "confusion"):
            assert (out / f"{kind}_{name}.svg").read_text().startswith("<?xml")
            assert (out / f"{kind}_{name}.png").read_bytes()[:4] == b"\x89PNG"
    assert (out / "report.config.used").exists()


def test_report_rerun_byte_identical(trained, tmp_path):
    args = ["--runs", str(trained / "ms_ft"), "--tsne", "--confusion", "--perplexity", "5",
            "--tsne-iter", "260"]
    assert main(["report", "--out", str(tmp_path / "a"), *args]) == 0
    assert main(["report", "--out", str(tmp_path / "b"), *args]) == 0
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    for d, root in ((a, tmp_path / "a"), (b, tmp_path / "b")):
        d["report.config.used"] = d["report.config.used"].replace(str(root).encode(), b"X")
    assert a == b


def test_report_without_runs(tmp_path):
    assert main(["report", "--out", str(tmp_path)]) == 2


def test_report_without_png(trained, tmp_path):
    out = tmp_path / "nopng"
    assert main(["report", "--runs", str(trained / "clf"), "--out", str(out), "--confusion",
                 "--png", "false"]) == 0
    assert (out / "confusion_clf.svg").exists() and not (out / "confusion_clf.png").exists()


# -- help --------------------------------------------------------------------


@pytest.mark.parametrize("command,opts", [("gen", GEN_OPTS), ("train", TRAIN_OPTS), ("report", REPORT_OPTS)])
def test_help_documents_every_flag(command, opts, capsys):
    with pytest.raises(SystemExit) as exc:
        main([command, "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for o in opts:
        assert o.option in text, o.option
