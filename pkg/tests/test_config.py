"""Flat config parsing and cross-field validation."""
import pytest

from multirate.config import ExperimentConfig, load_config, parse_config_text
from multirate.errors import ConfigError


def cfg_from(text):
    return ExperimentConfig.from_mapping(parse_config_text(text))


# ---------------------------------------------------------------- parsing


def test_parse_basics():
    text = """
    # a comment
    dataset.kind = spiral
    optimizer.h = 0.5
    model.hidden = [64, 32]
    model.bias = true
    out.dir = runs/exp one
    """
    flat = parse_config_text(text)
    assert flat["dataset.kind"] == "spiral"
    assert flat["optimizer.h"] == 0.5
    assert flat["model.hidden"] == [64, 32]
    assert flat["model.bias"] is True
    # bare strings that are not JSON fall through verbatim
    assert flat["out.dir"] == "runs/exp one"


def test_parse_rejects_duplicates_and_bad_lines():
    with pytest.raises(ConfigError, match="line 3"):
        parse_config_text("a.b = 1\nc.d = 2\na.b = 3")
    with pytest.raises(ConfigError, match="line 1"):
        parse_config_text("just words")
    with pytest.raises(ConfigError, match="empty key"):
        parse_config_text("= 5")


def test_values_keep_json_types():
    flat = parse_config_text('x = "quoted"\ny = null\nz = 1e-3')
    assert flat["x"] == "quoted"
    assert flat["y"] is None
    assert flat["z"] == 1e-3


# ---------------------------------------------------------------- defaults


def test_defaults_minimal_config():
    cfg = cfg_from("")
    assert cfg.dataset_kind == "spiral"
    assert cfg.optimizer_mode == "vanilla"
    assert cfg.partition_mode == "all-fast"
    assert cfg.h == 0.1 and cfg.k == 1 and cfg.momentum == 0.9
    assert cfg.hidden == (64,) and cfg.loss == "cross-entropy"
    assert cfg.seeds == (0,) and cfg.epochs == 1
    assert cfg.lr_decay == "none"
    assert cfg.eval_sets == ("train", "test")


def test_patch_dataset_defaults_extra_eval_sets():
    cfg = cfg_from("dataset.kind = patch")
    assert cfg.eval_sets == ("train", "test", "clean", "patch-only", "augmented")


def test_int_values_coerce_to_float_fields():
    cfg = cfg_from("optimizer.h = 1\ndataset.noise_std = 0")
    assert cfg.h == 1.0 and isinstance(cfg.h, float)
    assert cfg.spiral_noise_std == 0.0


# ---------------------------------------------------------------- validation


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown keys"):
        cfg_from("optimizer.stepsize = 0.1")


def test_type_errors():
    with pytest.raises(ConfigError, match="optimizer.h"):
        cfg_from('optimizer.h = "fast"')
    with pytest.raises(ConfigError, match="optimizer.k"):
        cfg_from("optimizer.k = 2.5")
    with pytest.raises(ConfigError, match="model.bias"):
        cfg_from("model.bias = 1")
    with pytest.raises(ConfigError, match="model.hidden"):
        cfg_from("model.hidden = [64, true]")


def test_range_errors():
    for line in ("optimizer.h = 0", "optimizer.h = -0.1", "optimizer.k = 0",
                 "optimizer.momentum = 1.0", "train.epochs = -1", "train.batch_size = 0",
                 "model.hidden = [0]", "seeds = []", "sweep.k = [2, 0]"):
        with pytest.raises(ConfigError):
            cfg_from(line)


def test_enum_errors():
    for line in ("dataset.kind = cifar", "model.activation = gelu", "model.loss = hinge",
                 "partition.mode = columns", "optimizer.mode = adam",
                 "train.lr_decay = cosine", "eval.sets = [\"valid\"]",
                 "partition.bias_variant = hidden"):
        with pytest.raises(ConfigError):
            cfg_from(line)


def test_lr_decay_accepts_linear():
    assert cfg_from("train.lr_decay = linear").lr_decay == "linear"


def test_weight_decay_number_or_list():
    assert cfg_from("optimizer.weight_decay = 0.01").weight_decay == 0.01
    assert cfg_from("optimizer.weight_decay = [0.0, 0.1]").weight_decay == [0.0, 0.1]
    with pytest.raises(ConfigError, match="weight_decay"):
        cfg_from("optimizer.weight_decay = true")
    with pytest.raises(ConfigError, match="weight_decay"):
        cfg_from('optimizer.weight_decay = "lots"')


# ---------------------------------------------------------------- mode matrix


def multirate_lines(extra=""):
    return f"optimizer.mode = multirate\npartition.mode = layerwise\n{extra}"


def test_mode_combinations():
    cfg = cfg_from(multirate_lines("optimizer.k = 5"))
    assert cfg.optimizer_mode == "multirate" and cfg.k == 5
    with pytest.raises(ConfigError, match="slow tier"):
        cfg_from("optimizer.mode = multirate")  # default all-fast has none
    with pytest.raises(ConfigError, match="all-fast"):
        cfg_from("optimizer.mode = vanilla\npartition.mode = layerwise")
    with pytest.raises(ConfigError, match="random-subset"):
        cfg_from("optimizer.mode = random-subset\npartition.mode = layerwise")
    with pytest.raises(ConfigError, match="probs"):
        cfg_from("optimizer.mode = random-subset\npartition.mode = random-subset")
    ok = cfg_from("optimizer.mode = random-subset\npartition.mode = random-subset\n"
                  "partition.probs = [0.8, 0.5]")
    assert ok.probs == (0.8, 0.5)
    with pytest.raises(ConfigError, match="groups"):
        cfg_from(multirate_lines().replace("layerwise", "multi-tier"))
    ok = cfg_from("optimizer.mode = multirate\npartition.mode = multi-tier\n"
                  "partition.groups = [[1], [0]]\npartition.ratios = [5]")
    assert ok.groups == ((1,), (0,)) and ok.ratios == (5,)
    with pytest.raises(ConfigError, match="slow_stepsize"):
        cfg_from("optimizer.mode = composite")
    ok = cfg_from("optimizer.mode = composite\noptimizer.slow_stepsize = 0.5\noptimizer.k = 5")
    assert ok.slow_stepsize == 0.5
    with pytest.raises(ConfigError, match="noise_gammas"):
        cfg_from("optimizer.mode = noise")
    ok = cfg_from("optimizer.mode = noise\noptimizer.noise_gammas = [1.0]\n"
                  "optimizer.noise_taus = [0.1]")
    assert ok.noise_gammas == (1.0,) and ok.noise_taus == (0.1,)


def test_eval_sets_patch_only_guard():
    with pytest.raises(ConfigError, match="patch"):
        cfg_from('eval.sets = ["clean"]')
    ok = cfg_from('dataset.kind = patch\neval.sets = ["clean", "patch-only"]')
    assert ok.eval_sets == ("clean", "patch-only")


def test_file_dataset_needs_path():
    with pytest.raises(ConfigError, match="dataset.path"):
        cfg_from("dataset.kind = file")
    cfg = cfg_from("dataset.kind = file\ndataset.path = data/ds.bin")
    assert cfg.file_path == "data/ds.bin"


# ---------------------------------------------------------------- files


def test_load_config_roundtrip(tmp_path):
    path = tmp_path / "exp.cfg"
    path.write_text("optimizer.h = 0.25\nseeds = [1, 2]\nsweep.k = [1, 5]\n")
    cfg = load_config(path)
    assert cfg.h == 0.25 and cfg.seeds == (1, 2) and cfg.sweep_k == (1, 5)
    assert cfg.raw["optimizer.h"] == 0.25
