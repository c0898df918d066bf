import pytest
from hypothesis import given
from hypothesis import strategies as st

from sic.config import ConfigError, RunConfig, format_config, load_config, parse_config


def test_parse_with_comments_and_lists():
    cfg = parse_config(
        """
        # run
        data_dir = data   # trailing comment
        out_dir=runs/a
        epochs = 3
        betas = 0.8, 0.99
        channels = 8,16
        bias = -2.5
        """
    )
    assert cfg.data_dir == "data" and cfg.out_dir == "runs/a"
    assert cfg.epochs == 3 and cfg.betas == (0.8, 0.99) and cfg.channels == (8, 16)
    tc = cfg.train_config()
    assert tc.bias == -2.5 and tc.head_config(4).bias == -2.5


@pytest.mark.parametrize(
    "text, match",
    [
        ("data_dir=a\nout_dir=b\nlearnin_rate=1", "unknown key"),
        ("data_dir=a\nout_dir=b\nepochs=1\nepochs=2", "duplicate"),
        ("data_dir=a\nout_dir=b\nepochs=ten", "cannot parse"),
        ("data_dir=a\nout_dir=b\njust words", "expected"),
        ("out_dir=b", "missing required"),
        ("data_dir=a\nout_dir=b\ntemperature=0", "temperature"),
        ("data_dir=a\nout_dir=b\nchannels=8,0", "positive"),
    ],
)
def test_rejections(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


def test_load_missing_file():
    with pytest.raises(ConfigError, match="cannot read"):
        load_config("/nonexistent.cfg")


@given(st.integers(1, 100), st.floats(1e-5, 1.0), st.floats(-5, 5), st.integers(1, 5))
def test_format_parse_round_trip(epochs, lr, bias, n_s):
    cfg = RunConfig("d", "o", learning_rate=lr, epochs=epochs, bias=bias, n_support=n_s)
    assert parse_config(format_config(cfg)) == cfg
