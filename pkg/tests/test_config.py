import re
from pathlib import Path

import pytest

from foci.backbone import ConfigError
from foci.config import EvalConfig, default_config, dump_config, load_config, parse_config


def test_defaults_round_trip_through_text():
    for name in ("desk", "paper"):
        cfg = default_config(name)
        assert parse_config(dump_config(cfg)) == cfg


def test_empty_file_is_desk_preset():
    cfg = parse_config("")
    assert cfg == default_config("desk")
    assert cfg.eval == EvalConfig(0.25, 0.45, 0.25)


def test_overrides():
    cfg = parse_config("""
[network]
preset = desk
anchors = 0.5,0.5; 1,2
sac_taps = 1,0,1,0
leaky_slope = 0.2

[train]
learning_rate = 0.01
epochs = 3

[synth]
count_max = 7

[eval]
iou_threshold = 0.5

[paths]
data = /tmp/data
""")
    assert cfg.network.anchors == ((0.5, 0.5), (1.0, 2.0))
    assert cfg.network.head_out_channels == 2 * 6
    assert cfg.network.sac_taps == (True, False, True, False)
    assert cfg.network.leaky_slope == 0.2
    assert (cfg.train.learning_rate, cfg.train.epochs, cfg.train.batch_size) == (0.01, 3, 8)
    assert cfg.synth.count_max == 7
    assert cfg.eval.iou_threshold == 0.5
    assert cfg.paths == {"data": "/tmp/data"}


def test_paper_preset():
    cfg = parse_config("[network]\npreset = paper\n")
    assert cfg.network.input_resolution == 512 and cfg.network.grid == 32
    assert cfg.train.learning_rate == 1e-5


@pytest.mark.parametrize("text,match", [
    ("[nets]\nx = 1\n", "unknown section"),
    ("[network]\nwidth = 3\n", "unknown key 'width'"),
    ("[train]\nlr = 3\n", "unknown key 'lr'"),
    ("[network]\npreset = tiny\n", "unknown network preset"),
    ("[train]\nepochs = many\n", "epochs"),
    ("[eval]\niou_threshold = 1.5\n", r"\[0, 1\]"),
    ("[eval]\nconf_threshold = -0.1\n", r"\[0, 1\]"),
    ("[network]\nanchors = 1,1; 0,2\n", "anchors"),
    ("[train]\nbatch_size = 0\n", "batch_size"),
    ("just text\n", "section"),
])
def test_rejections(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text, "test.cfg")


def test_missing_file_names_path(tmp_path):
    with pytest.raises(ConfigError, match="nope.cfg"):
        load_config(tmp_path / "nope.cfg")


def test_load_from_disk(tmp_path):
    (tmp_path / "a.cfg").write_text("[synth]\nseed = 12\n")
    assert load_config(tmp_path / "a.cfg").synth.seed == 12


def test_readme_example_is_the_desk_default():
    text = (Path(__file__).parents[1] / "README.md").read_text()
    block = re.search(r"```ini\n(.*?)```", text, re.S).group(1)
    assert parse_config(block, "README.md") == default_config("desk")
