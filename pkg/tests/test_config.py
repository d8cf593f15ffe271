import pytest

from hmbpan import config as C
from hmbpan.training import TrainConfig

TEXT = """
# comment line
model.n_res_blocks = 3
model.share_hmb = false     # alias
loss.alpha = 0.01
loss.phi_seed = 99
train.lr0 = 1e-3
train.batch_size = 4
data.index = runs/index.json
data.val_fraction = 0.2
"""


def test_parse_values():
    s = C.parse_config(TEXT)
    assert s["model"] == {"n_res_blocks": 3, "share_hmb": False}
    assert s["data"]["index"] == "runs/index.json"
    assert s["train"]["lr0"] == 1e-3 and isinstance(s["train"]["batch_size"], int)


def test_build_train_config():
    cfg = C.build_train_config(C.parse_config(TEXT), seed=7)
    assert cfg.model.n_res_blocks == 3 and cfg.model.share_hmb_across_bands is False
    assert cfg.loss.alpha == 0.01 and cfg.phi_seed == 99
    assert cfg.seed == 7 and cfg.val_fraction == 0.2 and cfg.batch_size == 4
    assert C.build_train_config({}) == TrainConfig()


@pytest.mark.parametrize("text", [
    "model.n_res_blocks 3",
    "n_res_blocks = 3",
    "weird.key = 1",
    "model.a.b = 1",
])
def test_syntax_errors(text):
    with pytest.raises(C.ConfigFileError, match=":1:"):
        C.parse_config(text)


@pytest.mark.parametrize("text", [
    "model.colour = 1",
    "model.s = 2",
    "train.batch_size = 0",
    "data.where = x",
    "train.model = 1",
])
def test_semantic_errors(text):
    with pytest.raises(C.ConfigFileError):
        C.build_train_config(C.parse_config(text))


def test_snapshot_rebuilds_config(tmp_path):
    cfg = C.build_train_config(C.parse_config(TEXT), seed=3)
    snap = C.train_config_snapshot(cfg, {"index": "x/index.json"})
    path = tmp_path / "run.cfg"
    path.write_text(C.format_config(snap))
    sections = C.load_config(path)
    assert C.build_train_config(sections) == cfg
    assert sections["data"]["index"] == "x/index.json"


def test_missing_file(tmp_path):
    with pytest.raises(C.ConfigFileError):
        C.load_config(tmp_path / "nope.cfg")
