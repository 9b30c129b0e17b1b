import pytest

from selfy import config as C
from selfy.extraction import MlpHead, SoftArgmaxHead


def test_defaults_build():
    cfg = C.build()
    assert cfg.net.selfy.window.temporal_offsets == (-2, -1, 0, 1, 2)
    assert cfg.net.stages == ((16, 1), (32, 2), (64, 2))
    assert cfg.train_count == 2000 and cfg.test_count == 500 and cfg.data.seed == 42
    assert cfg.severities == (1, 2, 3, 4, 5, 6)


def test_single_offset_reproduces_the_one_offset_setup():
    cfg = C.build({"window.offsets": "1"})
    assert cfg.net.selfy.window.temporal_offsets == (1,)
    assert cfg.net.selfy.window.extents == (1, 9, 9)


def test_parse_text_sections_comments_ranges():
    text = """
    # comment
    [window]
    offsets = -1..1   # trailing comment
    d_u = 2
    train.lr = 0.05
    """
    v = C.parse_text(text)
    assert v == {"window.offsets": "-1..1", "window.d_u": "2", "train.lr": "0.05"}
    cfg = C.build(v)
    assert cfg.net.selfy.window.temporal_offsets == (-1, 0, 1) and cfg.train.lr == 0.05


@pytest.mark.parametrize("text", ["nonsense", "window.zz = 1", "[train]\nfoo = 2"])
def test_parse_errors(text):
    with pytest.raises(C.UsageError):
        C.parse_text(text)


@pytest.mark.parametrize(
    "key,value",
    [
        ("window.offsets", "2..1"),
        ("window.d_u", "x"),
        ("net.block", "nonlocal"),
        ("selfy.head", "fft"),
        ("train.lr", "-1"),
        ("eval.severities", "0..3"),
        ("eval.kinds", "fog"),
        ("bench.shape", "8 14 14"),
        ("data.train_count", "0"),
        ("selfy.integration_kernel", "3 3"),
        ("net.use_tsm", "maybe"),
    ],
)
def test_invalid_values_are_usage_errors(key, value):
    with pytest.raises(C.UsageError):
        C.build({key: value})


def test_alternatives_only_in_sweep():
    with pytest.raises(C.UsageError, match="sweep"):
        C.build({"train.lr": "0.1, 0.01"})
    base = C.resolve({"train.lr": "0.1, 0.01", "window.offsets": "-2..2, 1"})
    runs = C.expand_sweep(base)
    assert len(runs) == 4
    assert {(r["train.lr"], r["window.offsets"]) for r in runs} == {("0.1", "-2..2"), ("0.1", "1"), ("0.01", "-2..2"), ("0.01", "1")}
    assert C.sweep_label(runs[0], base) == "window.offsets=-2..2 train.lr=0.1"
    assert C.sweep_label(C.resolve(), C.resolve()) == "base"


def test_head_selection():
    assert isinstance(C.build({"selfy.head": "mlp"}).net.selfy.head, MlpHead)
    head = C.build({"selfy.head": "soft_argmax", "selfy.tau": "0.5"}).net.selfy.head
    assert isinstance(head, SoftArgmaxHead) and head.tau == 0.5


def test_to_text_roundtrip():
    cfg = C.build({"train.lr": "0.2", "net.stages": "8:1 16:2 16:2"})
    again = C.build(C.parse_text(cfg.to_text()))
    assert again.values == cfg.values and again.net == cfg.net


def test_describe_lists_every_key():
    text = C.describe_fields()
    assert all(k in text for k in C.FIELDS)


def test_bench_threads_default_to_cores():
    assert C.build().bench.worker_threads() >= 1
    assert C.build({"bench.threads": "3"}).bench.worker_threads() == 3


def test_parse_file_missing(tmp_path):
    with pytest.raises(C.UsageError):
        C.parse_file(tmp_path / "nope.cfg")
