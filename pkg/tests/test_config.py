import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dfquant.config import (
    OUT_ENV,
    PRESETS,
    RunConfig,
    from_dict,
    parse_config,
    parse_overrides,
    parse_text,
    replace,
    resolve_output,
    serialize,
    to_dict,
    write_effective,
)
from dfquant.errors import ParseError, ValidationError


def test_empty_file_gives_defaults(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("")
    cfg = parse_config(p)
    assert cfg == from_dict({}) == RunConfig()
    assert cfg.causal.lam == 0.1 and cfg.quantization.bits_weights == 4


def test_roundtrip(tmp_path):
    cfg = from_dict({"seed": 9, "causal": {"lambda": 0.3, "critic_lr": 1e-4},
                     "schedule": {"generator_betas": [0.4, 0.99]}})
    path = write_effective(cfg, tmp_path)
    assert parse_config(path) == cfg
    assert parse_text(serialize(cfg)) == to_dict(cfg)


@settings(max_examples=40, deadline=None)
@given(lam=st.floats(0, 100, allow_nan=False), bits=st.integers(2, 32),
       seed=st.integers(0, 2**31 - 1), m=st.integers(2, 6))
def test_roundtrip_property(lam, bits, seed, m):
    cfg = from_dict({"seed": seed, "causal": {"lambda": lam, "interventions_m": m},
                     "quantization": {"bits_weights": bits, "bits_activations": bits}})
    assert from_dict(parse_text(serialize(cfg))) == cfg


@pytest.mark.parametrize("data,field", [
    ({"quantization": {"bits_weights": 1}}, "quantization.bits_weights"),
    ({"quantization": {"bits_activations": 33}}, "quantization.bits_activations"),
    ({"causal": {"lambda": -1}}, "causal.lambda"),
    ({"causal": {"interventions_m": 1}}, "causal.interventions_m"),
    ({"causal": {"beta": 0}}, "causal.beta"),
    ({"schedule": {"batch_size": 1}}, "schedule.batch_size"),
    ({"model": {"arch": "vgg"}}, "model.arch"),
    ({"preset": "nope"}, "preset"),
])
def test_validation_names_field(data, field):
    with pytest.raises(ValidationError, match=field.replace(".", r"\.")):
        from_dict(data)


def test_unknown_keys_rejected():
    with pytest.raises(ValidationError, match="causal.lamda"):
        from_dict({"causal": {"lamda": 0.2}})
    with pytest.raises(ValidationError, match="extra"):
        from_dict({"extra": 1})


def test_type_errors():
    with pytest.raises(ValidationError):
        from_dict({"seed": "seven"})
    with pytest.raises(ValidationError):
        from_dict({"quantization": {"freeze_bn": "yes"}})
    with pytest.raises(ValidationError):
        from_dict({"causal": "high"})


def test_parse_error_has_position(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("causal:\n  lambda: [1, 2\nseed: 3\n")
    with pytest.raises(ParseError, match="line"):
        parse_config(p)
    with pytest.raises(ParseError):
        parse_config(tmp_path / "missing.yaml")
    with pytest.raises(ParseError):
        parse_text("- a\n- b\n")


def test_overrides():
    ov = parse_overrides(["causal.lambda=0.5", "seed=3", "generator.normalization.mean=[0,0,0]"])
    assert ov == {"causal": {"lambda": 0.5}, "seed": 3,
                  "generator": {"normalization": {"mean": [0, 0, 0]}}}
    cfg = from_dict({"causal": {"lambda": 0.1}}, ov)
    assert cfg.causal.lam == 0.5 and cfg.seed == 3
    with pytest.raises(ParseError):
        parse_overrides(["novalue"])


def test_presets_apply_and_yield():
    cfg = from_dict({"preset": "paper_cifar", "schedule": {"epochs": 3}})
    assert cfg.model.arch == "resnet20" and cfg.schedule.iterations_per_epoch == 200
    assert cfg.schedule.epochs == 3
    assert set(PRESETS) >= {"desk", "paper_cifar", "paper_imagenet"}


def test_replace_and_output_env(monkeypatch, tmp_path):
    cfg = replace(RunConfig(), causal={"lambda": 2.0})
    assert cfg.causal.lam == 2.0
    monkeypatch.setenv(OUT_ENV, str(tmp_path))
    assert resolve_output("runs/x") == tmp_path / "runs/x"
    assert resolve_output("/abs/x").as_posix() == "/abs/x"
    monkeypatch.delenv(OUT_ENV)
    assert resolve_output("runs/x").as_posix() == "runs/x"
