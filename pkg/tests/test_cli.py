import json

import pytest

from dgnet import cli
from dgnet.config import (
    ConfigError, dump_config, load_config_file, make_config, net_fingerprint, parse_config_text,
    resolve_config, set_key,
)


def test_precedence_defaults_file_flags(tmp_path):
    conf = tmp_path / "run.conf"
    conf.write_text("# desk overrides\nseed = 7\ntrain.total_iters = 50\nweights.lambda_img = 3\n")
    cfg = resolve_config("desk", str(conf), {"seed": 11, "train.total_iters": None})
    assert cfg.seed == 11  # flag beats file
    assert cfg.train.total_iters == 50  # file beats default
    assert cfg.weights.lambda_img == 3.0
    assert cfg.weights.lambda_id == 0.5  # default survives


def test_profile_from_file(tmp_path):
    conf = tmp_path / "run.conf"
    conf.write_text("profile = full\n")
    assert resolve_config(None, str(conf)).net.backbone == "resnet50"
    assert resolve_config("desk", str(conf)).net.backbone == "resnet18"


def test_set_key_types_and_errors():
    cfg = make_config("desk")
    set_key(cfg, "train.flip", "no")
    set_key(cfg, "train.adam_betas", "0.5, 0.9")
    set_key(cfg, "net.height", "128")
    assert cfg.train.flip is False and cfg.train.adam_betas == (0.5, 0.9) and cfg.net.height == 128
    with pytest.raises(ConfigError) as err:
        set_key(cfg, "train.bogus", "1")
    assert err.value.key == "train.bogus"
    with pytest.raises(ConfigError):
        set_key(cfg, "nosuch.key", "1")
    with pytest.raises(ConfigError):
        set_key(cfg, "train", "1")
    with pytest.raises(ConfigError):
        set_key(cfg, "seed", "seven")
    with pytest.raises(ConfigError):
        make_config("huge")


def test_dump_roundtrip(tmp_path):
    cfg = make_config("desk")
    cfg.seed = 5
    cfg.train.adam_betas = (0.1, 0.2)
    path = tmp_path / "dump.conf"
    path.write_text(dump_config(cfg))
    again = load_config_file(make_config("desk"), path)
    assert dump_config(again) == dump_config(cfg)
    with pytest.raises(ConfigError):
        parse_config_text("no equals sign here")


def test_fingerprint_ignores_pretrained_path():
    a, b = make_config("desk").net, make_config("desk").net
    b.pretrained = "/some/weights.pt"
    assert net_fingerprint(a) == net_fingerprint(b)
    b.struct_channels = 64
    assert net_fingerprint(a) != net_fingerprint(b)


def test_unknown_key_exit_code(capsys):
    code = cli.main(["make-toy", "--out", "unused", "--set", "train.bogus=1"])
    assert code == 2
    assert "train.bogus" in capsys.readouterr().err


def test_missing_data_is_an_error(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv(cli.DATA_ENV, raising=False)
    assert cli.main(["train-teacher", "--profile", "desk", "--out", str(tmp_path / "t")]) == 1
    assert cli.DATA_ENV in capsys.readouterr().err


def test_make_toy_cli_deterministic(tmp_path):
    assert cli.main(["make-toy", "--out", str(tmp_path / "a"), "--seed", "2"]) == 0
    assert cli.main(["make-toy", "--out", str(tmp_path / "b"), "--seed", "2"]) == 0
    read = lambda root: sorted((p.relative_to(root).as_posix(), p.read_bytes()) for p in root.rglob("*.png"))
    assert read(tmp_path / "a") == read(tmp_path / "b")
    assert len(read(tmp_path / "a")) == 32
    assert cli.main(["make-toy", "--out", str(tmp_path / "a")]) == 1


def test_out_lock_rejects_concurrent_use(tmp_path):
    with cli.out_lock(tmp_path):
        with pytest.raises(cli.CliError):
            with cli.out_lock(tmp_path):
                pass
    with cli.out_lock(tmp_path):
        pass


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "toy"
    assert cli.main(["make-toy", "--out", str(data)]) == 0
    common = ["--profile", "desk", "--data", str(data), "--set", "train.teacher_iters=5"]
    assert cli.main(["train-teacher", *common, "--out", str(root / "teacher")]) == 0
    assert cli.main(["train", *common, "--out", str(root / "train"), "--iters", "4",
                     "--teacher", str(root / "teacher" / "teacher.pt"),
                     "--set", "train.checkpoint_every=2", "--set", "weights.warmup_start_iter=1",
                     "--set", "weights.warmup_len_iters=2"]) == 0
    return root, common


def test_train_outputs(tiny_run):
    root, _ = tiny_run
    train = root / "train"
    names = {p.name for p in train.iterdir()}
    assert {"ckpt_000002.pt", "ckpt_000004.pt", "final.pt", "metrics.tsv", "config.resolved.txt"} <= names
    assert ".lock" not in names
    rows = (train / "metrics.tsv").read_text().splitlines()
    assert {r.split("\t")[0] for r in rows} == {"0", "1", "2", "3"}
    assert "train.total_iters = 4" in (train / "config.resolved.txt").read_text()


def test_generate_interpolate_and_eval(tiny_run):
    root, common = tiny_run
    ckpt = str(root / "train" / "final.pt")
    out = root / "eval"
    assert cli.main(["generate", *common, "--checkpoint", ckpt, "--grid", "2x3", "--out", str(out)]) == 0
    assert (out / "swap_grid_2x3.png").exists()
    assert cli.main(["interpolate", *common, "--checkpoint", ckpt, "--mode", "structure", "--steps", "4",
                     "--out", str(out)]) == 0
    assert (out / "interpolate_structure_4.png").exists()
    assert cli.main(["eval-reid", *common, "--checkpoint", ckpt, "--out", str(out)]) == 0
    metrics = json.loads((out / "reid_metrics.json").read_text())
    assert 0 <= metrics["rank1"] <= 1 and 0 <= metrics["mAP"] <= 1
    assert (out / "query_embeddings.npy").exists()
    assert cli.main(["eval-gen", *common, "--checkpoint", ckpt, "--teacher",
                     str(root / "teacher" / "teacher.pt"), "--out", str(out)]) == 0
    gen = json.loads((out / "gen_metrics.json").read_text())
    assert gen["fid"] >= -1e-6 and gen["fid_embedder"] == "teacher"


def test_bad_grid_and_checkpoint(tiny_run, capsys):
    root, common = tiny_run
    ckpt = str(root / "train" / "final.pt")
    assert cli.main(["generate", *common, "--checkpoint", ckpt, "--grid", "two", "--out",
                     str(root / "bad")]) == 2
    assert cli.main(["generate", *common, "--checkpoint", str(root / "nope.pt"), "--out",
                     str(root / "bad")]) == 1
    teacher = str(root / "teacher" / "teacher.pt")
    assert cli.main(["generate", *common, "--checkpoint", teacher, "--out", str(root / "bad")]) == 1
    assert "error" in capsys.readouterr().err
