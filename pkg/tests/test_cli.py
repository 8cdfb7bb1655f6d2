import json

import pytest

from peftocr.cli import main

TINY_CFG = "model.embed_dim=16\nmodel.head_count=2\nmodel.ffn_dim=32\nmodel.encoder_layers=1\nmodel.decoder_layers=1\n"


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY_CFG, encoding="utf-8")
    assert main(["gen-data", "--out", str(root / "pre"), "--lines", "20", "--max-len", "3", "--seed", "1",
                 "--printed-only"]) == 0
    assert main(["gen-data", "--out", str(root / "mix"), "--lines", "30", "--max-len", "3", "--seed", "2"]) == 0
    assert main(["pretrain", "--data", str(root / "pre"), "--out", str(root / "base.ckpt"), "--config", str(cfg),
                 "--epochs", "2", "--batch", "8", "--log", str(root / "pre.log")]) == 0
    return root


def test_gen_data_statistics(workspace, capsys):
    assert main(["gen-data", "--out", str(workspace / "again"), "--lines", "30", "--max-len", "3", "--seed", "2"]) == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats["train"]["count"] == 27 and stats["val"]["count"] == 3
    assert (workspace / "again" / "manifest.tsv").read_bytes() == (workspace / "mix" / "manifest.tsv").read_bytes()


def test_train_eval_merge_count(workspace, capsys):
    ws = workspace
    assert main(["train", "--base", str(ws / "base.ckpt"), "--data", str(ws / "mix"), "--out", str(ws / "ft.ckpt"),
                 "--strategy", "dora/lora", "--rank", "2", "--epochs", "1", "--batch", "8", "--lr", "1e-3",
                 "--log", str(ws / "ft.log")]) == 0
    assert (ws / "ft.log").read_text().startswith("# strategy=dora/lora")
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(ws / "ft.ckpt"), "--data", str(ws / "mix"), "--out",
                 str(ws / "ft.tsv")]) == 0
    table = capsys.readouterr().out
    assert table.splitlines()[0].split()[:3] == ["subset", "samples", "CER"]
    assert main(["merge", "--checkpoint", str(ws / "ft.ckpt"), "--out", str(ws / "merged.ckpt")]) == 0
    assert main(["eval", "--checkpoint", str(ws / "merged.ckpt"), "--data", str(ws / "mix"), "--out",
                 str(ws / "merged.tsv")]) == 0
    assert (ws / "merged.tsv").read_text() == (ws / "ft.tsv").read_text()
    capsys.readouterr()
    assert main(["count-params", "--checkpoint", str(ws / "base.ckpt"), "--strategy", "dora/lora", "--rank", "2",
                 "--format", "tsv"]) == 0
    header, row = capsys.readouterr().out.splitlines()
    fields = dict(zip(header.split("\t"), row.split("\t")))
    assert fields["encoder"] == "dora" and fields["adapter_sites"] == "11"


def test_report_formats(workspace, capsys):
    tsv = workspace / "r.tsv"
    tsv.write_text("subset\tCER\nmixed\t0.5\n", encoding="utf-8")
    assert main(["report", str(tsv), "--format", "csv"]) == 0
    assert capsys.readouterr().out == "subset,CER\nmixed,0.5\n"
    assert main(["report", str(tsv)]) == 0
    assert "-----" in capsys.readouterr().out


def test_ablate_small(workspace, capsys):
    out = workspace / "ablation.tsv"
    assert main(["ablate", "--base", str(workspace / "base.ckpt"), "--data", str(workspace / "mix"), "--out",
                 str(out), "--rank", "2", "--epochs", "1", "--batch", "8", "--max-steps", "1"]) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 12 and "DLoRA" in out.read_text()


@pytest.mark.parametrize(
    "argv, code",
    [
        ([], 1),
        (["train", "--strategy", "dora"], 1),
        (["bogus"], 1),
        (["eval", "--checkpoint", "missing.ckpt", "--data", "missing"], 2),
        (["ablate", "--base", "missing.ckpt", "--data", "missing", "--out", "x"], 2),
    ],
)
def test_exit_codes(argv, code, capsys):
    with pytest.raises(SystemExit) if code == 1 else _null():
        result = main(argv)
    if code != 1:
        assert result == code


def test_validation_errors(workspace, capsys):
    ws = workspace
    assert main(["count-params", "--checkpoint", str(ws / "base.ckpt"), "--strategy", "dora/lora"]) == 2
    bad = ws / "bad.cfg"
    bad.write_text("rank=abc\n")
    assert main(["train", "--base", str(ws / "base.ckpt"), "--data", str(ws / "mix"), "--out", str(ws / "x.ckpt"),
                 "--config", str(bad)]) == 2
    assert "line 1" in capsys.readouterr().err


def test_divergence_exit_code(workspace, capsys):
    ws = workspace
    code = main(["train", "--base", str(ws / "base.ckpt"), "--data", str(ws / "mix"), "--out", str(ws / "nan.ckpt"),
                 "--strategy", "full_ft/full_ft", "--epochs", "1", "--lr", "1e308"])
    assert code == 3
    assert "non-finite" in capsys.readouterr().err
    from peftocr import checkpoint

    last, _, _ = checkpoint.load(ws / "nan.ckpt.lastgood")
    base, _, _ = checkpoint.load(ws / "base.ckpt")
    assert all((last.params[k] == base.params[k]).all() for k in base.params)


class _null:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False
