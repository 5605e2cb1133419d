import pytest

from covertlab.config import ConfigError, derive_seed, load_config


def test_defaults_validate():
    cfg = load_config()
    assert cfg.signature.block_size == 5000
    assert cfg.distributed.workers == 8


def test_file_and_override_precedence(tmp_path):
    p = tmp_path / "run.ini"
    p.write_text("seed = 9\n\n[svm]\nbox_constraint = 4\n[eval]\nchannels = cpu  # only one\n")
    cfg = load_config(p)
    assert cfg.seed == 9 and cfg.svm.box_constraint == 4.0 and cfg.eval.channels == "cpu"
    cfg = load_config(p, {"svm.box_constraint": "2.5", "seed": None})
    assert cfg.svm.box_constraint == 2.5 and cfg.seed == 9


@pytest.mark.parametrize("key,value,msg", [
    ("svm.box_constraint", "0", "svm.box_constraint"),
    ("channel.value_high", "95", "channel.value_high"),
    ("eval.channels", "cpu,disk", "eval.channels"),
    ("signature.block_size", "abc", "signature.block_size"),
    ("svm.nope", "1", "svm.nope"),
])
def test_errors_name_field(key, value, msg):
    with pytest.raises(ConfigError, match=msg):
        load_config(overrides={key: value})


def test_derive_seed_stable_and_distinct():
    assert derive_seed(0, "a", 1) == derive_seed(0, "a", 1)
    assert len({derive_seed(0, "a"), derive_seed(0, "b"), derive_seed(1, "a")}) == 3
    assert 0 <= derive_seed(123, "x") < 2**63
