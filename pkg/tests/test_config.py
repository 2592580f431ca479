import pytest

from mebqat.config import (
    ConfigError,
    RunConfig,
    config_from_mapping,
    dump_config,
    parse_config_text,
    resolve_defaults,
)

SAMPLE = """
# dotted keys and section headers may be mixed
[run]
engine = mebqat
seed = 7

[tasks]
weight_bits = [1, 2, 4, 8, FP]
minor_weight_bits = [1]

train.epochs = 5
train.batch_size = 32
eval.tasks = ["2,2", "FP,FP"]
optimizer.lr = 1e-3
telemetry.wall_clock = false
"""


def test_parse_sections_and_dotted_keys():
    values = parse_config_text(SAMPLE)
    assert values["run.engine"] == "mebqat"
    assert values["run.seed"] == 7
    assert values["tasks.weight_bits"] == [1, 2, 4, 8, "FP"]
    assert values["eval.tasks"] == ["2,2", "FP,FP"]
    assert values["optimizer.lr"] == 1e-3
    assert values["telemetry.wall_clock"] is False


def test_config_from_mapping():
    cfg = config_from_mapping(parse_config_text(SAMPLE))
    assert cfg.engine == "mebqat"
    assert cfg.seed == 7
    assert cfg.weight_bits == (1, 2, 4, 8, "FP")
    assert cfg.epochs == 5


def test_unknown_key_is_named():
    with pytest.raises(ConfigError, match="tasks.weight_widths"):
        config_from_mapping({"tasks.weight_widths": [2]})


def test_type_errors_name_the_field():
    with pytest.raises(ConfigError, match="train.epochs"):
        config_from_mapping({"run.engine": "qat", "train.epochs": "many"})
    with pytest.raises(ConfigError, match="run.engine"):
        config_from_mapping({"run.engine": "sgd"})


def test_episodic_engines_need_holdout():
    with pytest.raises(ConfigError, match="holdout"):
        config_from_mapping({"run.engine": "mebqat-pn"})


def test_idx_source_needs_paths():
    with pytest.raises(ConfigError, match="train_images"):
        config_from_mapping({"run.engine": "qat", "data.source": "idx"})


def test_malformed_line_reports_position():
    with pytest.raises(ConfigError, match="line 2"):
        parse_config_text("[run]\nnonsense without equals\n")


def test_resolved_dump_is_explicit_and_reparsable():
    cfg = config_from_mapping(parse_config_text(SAMPLE))
    resolve_defaults(cfg, num_classes=10, image_size=28)
    text = dump_config(cfg)
    assert "kind = conv8-reduced" in text  # engine default now explicit
    assert "width = 10" in text
    assert "query_shots = 5" in text
    reparsed = config_from_mapping(parse_config_text(text))
    assert reparsed == cfg


def test_defaults_per_engine():
    pn = config_from_mapping(
        {"run.engine": "mebqat-pn", "data.holdout_classes": 5}
    )
    resolve_defaults(pn, num_classes=20, image_size=20)
    assert pn.model_kind == "conv4-pn"
    assert pn.model_width == 64
    assert pn.query_shots == 15

    maml = config_from_mapping(
        {"run.engine": "mebqat-maml", "data.holdout_classes": 5, "episode.ways": 7}
    )
    resolve_defaults(maml, num_classes=20, image_size=20)
    assert maml.model_kind == "conv5-maml"
    assert maml.model_width == 7
    assert maml.query_shots == 5


def test_activation_bits_default_to_weight_bits():
    cfg = config_from_mapping({"run.engine": "mebqat", "tasks.weight_bits": [2, 4]})
    resolve_defaults(cfg, num_classes=3, image_size=16)
    assert cfg.activation_bits == (2, 4)
