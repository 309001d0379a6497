import json

import numpy as np
import pytest

from betternet.cli import main, parse_variants, read_manifest, run_ablation
from betternet.config import VARIANTS, apply_variant, parse_config
from betternet.data import list_folder, load_gray, load_mask
from betternet.errors import ConfigError
from betternet.train import format_lr, train

SMALL_CFG = """\
# small fast run
model.input_size = 32
model.encoder_widths = 4, 8, 8, 8, 8
model.decoder_initial_filters = 4
model.filter_schedule = constant
model.encoder_frozen = false
schedule.lr_start = 1e-3
train.epochs = 2
train.batch_size = 2
train.seed = 5
data.synth.size = 32
data.synth.count = 8
data.synth.seed = 1
data.split = 0.5, 0.25, 0.25
"""


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text(SMALL_CFG)
    return p


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    return train(parse_config(SMALL_CFG), out)


# ---------------------------------------------------------------- config


def test_parse_defaults_follow_other_fields():
    cfg = parse_config(SMALL_CFG)
    assert cfg.schedule.total_epochs == 2
    assert cfg.dataset.resize_to == 32
    assert cfg.model.encoder_widths == (4, 8, 8, 8, 8)
    assert cfg.dataset.split == (0.5, 0.25, 0.25)
    assert cfg.batch_size == 2 and cfg.seed == 5


@pytest.mark.parametrize(
    "line,needle",
    [
        ("model.colour = 3", "unknown key"),
        ("train.speed = 3", "unknown key"),
        ("optim.lr = 1", "unknown section"),
        ("just words", "key = value"),
        ("model.input_size = big", "model.input_size"),
        ("loss.alpha = 2", "alpha"),
    ],
)
def test_bad_line_reports_line_number(line, needle):
    text = SMALL_CFG + line + "\n"
    lineno = len(text.splitlines())
    with pytest.raises(ConfigError) as exc:
        parse_config(text, "run.cfg")
    assert needle in str(exc.value)
    if needle != "alpha":
        assert f"run.cfg:{lineno}:" in str(exc.value)


def test_resize_must_match_input():
    with pytest.raises(ConfigError, match="resize_to"):
        parse_config(SMALL_CFG + "data.resize_to = 64\n")


def test_variant_deltas_touch_only_their_flags():
    cfg = parse_config(SMALL_CFG)
    base = cfg.model
    na, ns, npre = (apply_variant(cfg, v).model for v in ("no_attention", "no_skips", "no_pretrain"))
    assert (na.channel, na.spatial, na.se) == (False, False, True)
    assert ns.use_skips is False
    assert npre.encoder_checkpoint == ""
    assert apply_variant(cfg, "full").model == base
    for m, changed in ((na, {"channel", "spatial"}), (ns, {"use_skips"})):
        diff = {k for k in vars(base) if getattr(base, k) != getattr(m, k)}
        assert diff == changed
    with pytest.raises(ConfigError):
        apply_variant(cfg, "no_decoder")


def test_parse_variants():
    assert parse_variants("full, no_skips") == ["full", "no_skips"]
    assert set(parse_variants(",".join(VARIANTS))) == set(VARIANTS)
    with pytest.raises(ConfigError, match="duplicate"):
        parse_variants("full,no_skips,full")
    with pytest.raises(ConfigError, match="unknown"):
        parse_variants("full,bogus")


# ---------------------------------------------------------------- training


def test_format_lr():
    assert format_lr(1e-4) == "1.0e-4"
    assert format_lr(1e-7) == "1.0e-7"
    assert format_lr(5.005e-5) == "5.005e-5"


def test_train_outputs(trained):
    out = trained.out_dir
    names = {p.name for p in out.iterdir()}
    assert {"initial.ckpt", "best.ckpt", "final.ckpt", "train_log.csv", "test_metrics.csv"} <= names
    lines = (out / "train_log.csv").read_text().splitlines()
    assert lines[0] == "epoch,lr,train_loss,val_mdice,val_miou"
    assert len(lines) == 3
    assert lines[1].startswith("0,1.0e-3,")
    assert len(trained.history) == 2
    assert trained.test_report.count == 2


def test_train_is_deterministic(trained, tmp_path):
    train(parse_config(SMALL_CFG), tmp_path)
    for name in ("train_log.csv", "test_metrics.csv", "final.ckpt"):
        assert (tmp_path / name).read_bytes() == (trained.out_dir / name).read_bytes()


def test_epochs_zero_writes_initial_only(tmp_path):
    train(parse_config(SMALL_CFG + "train.epochs = 0\n"), tmp_path / "z")
    assert sorted(p.name for p in (tmp_path / "z").iterdir()) == ["initial.ckpt"]


def test_checkpoint_cadence(tmp_path):
    train(parse_config(SMALL_CFG + "train.checkpoint_every = 1\ndata.split = 1, 0, 0\n"), tmp_path)
    names = {p.name for p in tmp_path.iterdir()}
    assert {"epoch_0001.ckpt", "epoch_0002.ckpt"} <= names
    assert "test_metrics.csv" not in names
    rows = (tmp_path / "train_log.csv").read_text().splitlines()[1:]
    assert all(r.endswith(",nan,nan") for r in rows)


def test_default_lr_column_starts_at_1e4(tmp_path):
    text = SMALL_CFG.replace("schedule.lr_start = 1e-3\n", "").replace("train.epochs = 2", "train.epochs = 1")
    train(parse_config(text), tmp_path)
    assert (tmp_path / "train_log.csv").read_text().splitlines()[1].startswith("0,1.0e-4,")


def test_ablation_full_row_matches_train_then_eval(trained, tmp_path):
    rows = run_ablation(parse_config(SMALL_CFG), ["full"], tmp_path)
    assert len(rows) == 1
    m = trained.test_report.means
    assert (rows[0]["mdice"], rows[0]["miou"], rows[0]["fwb"]) == (m["mdice"], m["miou"], m["fwb"])
    lines = (tmp_path / "ablation.csv").read_text().splitlines()
    assert lines[0] == "variant,miou,mdice,fwb" and lines[1].startswith("full,")


# ---------------------------------------------------------------- command line


def test_cli_invalid_config_writes_nothing(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text(SMALL_CFG + "model.nope = 1\n")
    out = tmp_path / "out"
    assert main(["train", "-c", str(bad), "-o", str(out)]) == 2
    assert not out.exists()
    assert f"bad.cfg:{len(SMALL_CFG.splitlines()) + 1}" in capsys.readouterr().err


def test_cli_exit_codes(tmp_path):
    assert main(["train", "-c", str(tmp_path / "missing.cfg")]) == 3
    missing_data = tmp_path / "folder.cfg"
    missing_data.write_text(SMALL_CFG + f"data.source = folder\ndata.root = {tmp_path / 'none'}\n")
    assert main(["train", "-c", str(missing_data), "-o", str(tmp_path / "o")]) == 3
    assert main(["ablate", "-c", str(missing_data), "-v", "full,full"]) == 2
    bad_ckpt = tmp_path / "x.ckpt"
    bad_ckpt.write_bytes(b"garbage")
    assert main(["eval", "-m", str(bad_ckpt), "-d", str(tmp_path)]) == 3


def test_cli_numeric_failure_exit_code(tmp_path, cfg_file):
    cfg_file.write_text(SMALL_CFG + "schedule.lr_start = 1e300\nschedule.lr_end = 1e299\ntrain.epochs = 3\n")
    with np.errstate(all="ignore"):
        assert main(["train", "-c", str(cfg_file), "-o", str(tmp_path / "o")]) == 4


def test_cli_synth(tmp_path):
    out = tmp_path / "ds"
    assert main(["synth", "--seed", "3", "--count", "5", "--size", "32", "-o", str(out)]) == 0
    assert len(list_folder(out)) == 5
    params = read_manifest(out / "manifest.json")
    assert (params.seed, params.count, params.size) == (3, 5, 32)
    assert json.loads((out / "manifest.json").read_text())["files"]
    first = {p.name: p.read_bytes() for p in (out / "images").iterdir()}
    assert main(["synth", "--seed", "3", "--count", "5", "--size", "32", "-o", str(out)]) == 3
    assert main(["synth", "--seed", "3", "--count", "5", "--size", "32", "-o", str(out), "--force"]) == 0
    assert first == {p.name: p.read_bytes() for p in (out / "images").iterdir()}


def test_cli_eval_and_predict(trained, tmp_path, capsys):
    data = tmp_path / "ds"
    assert main(["synth", "--seed", "1", "--count", "2", "--size", "32", "-o", str(data)]) == 0
    capsys.readouterr()
    ckpt = str(trained.out_dir / "final.ckpt")
    report = tmp_path / "report.csv"
    assert main(["eval", "-m", ckpt, "-d", str(data), "-o", str(report)]) == 0
    lines = report.read_text().splitlines()
    assert lines[0] == "# threshold=0.500000 morph=none"
    assert lines[-1].startswith("MEAN,") and len(lines) == 5
    assert main(["eval", "-m", ckpt, "-d", str(data), "--threshold", "0.3", "--morph", "open:1"]) == 0
    assert capsys.readouterr().out.startswith("# threshold=0.300000 morph=open:1")

    image = sorted((data / "images").iterdir())[0]
    outs = []
    for k in range(2):
        d = tmp_path / f"pred{k}"
        assert main(["predict", "-m", ckpt, "-i", str(image), "-o", str(d)]) == 0
        outs.append(d)
    prob = load_gray(outs[0] / f"{image.stem}_prob.pgm")
    mask = load_mask(outs[0] / f"{image.stem}_mask.pgm")
    assert prob.min() >= 0 and prob.max() <= 1
    assert set(np.unique(mask)) <= {0.0, 1.0}
    for name in (f"{image.stem}_prob.pgm", f"{image.stem}_mask.pgm"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    assert main(["predict", "-m", ckpt, "-i", str(tmp_path / "nope.ppm"), "-o", str(tmp_path)]) == 3


def test_cli_eval_config_split_and_empty(trained, cfg_file, tmp_path):
    ckpt = str(trained.out_dir / "final.ckpt")
    out = tmp_path / "r.csv"
    assert main(["eval", "-m", ckpt, "-c", str(cfg_file), "--split", "val", "-o", str(out)]) == 0
    assert out.read_text().splitlines()[-1].startswith("MEAN,")
    cfg_file.write_text(SMALL_CFG.replace("0.5, 0.25, 0.25", "1, 0, 0"))
    assert main(["eval", "-m", ckpt, "-c", str(cfg_file), "--split", "test"]) == 2

