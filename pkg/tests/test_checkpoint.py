import numpy as np
import pytest

from src.core.checkpoint import (
    CheckpointFormatError,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
)
from src.core.set_classifier import SetClassifierConfig, SetClassifierModel


def test_round_trip_is_bit_exact(small_model, tmp_path):
    path = save_checkpoint(small_model, tmp_path / "nested" / "model.sckp")
    restored = load_checkpoint(path)
    assert restored.config == small_model.config
    original = small_model.named_parameters()
    for name, p in restored.named_parameters().items():
        assert p.data.tobytes() == original[name].data.tobytes()
    assert encode_checkpoint(restored) == path.read_bytes()


def test_restored_model_gives_identical_logits(small_model, rng):
    features = rng.normal(size=(6, 6))
    restored = model_from_checkpoint(encode_checkpoint(small_model))
    assert np.array_equal(restored.forward(features).set_logits.data, small_model.forward(features).set_logits.data)


def test_header_carries_config(small_model):
    config, values = decode_checkpoint(encode_checkpoint(small_model))
    assert (config.input_dim, config.model_dim, config.heads) == (6, 16, 4)
    assert config.feedforward_dim == 64
    assert values["cls_token"].shape == (16,)


def test_bad_magic_is_rejected(small_model):
    payload = b"XXXX" + encode_checkpoint(small_model)[4:]
    with pytest.raises(CheckpointFormatError, match="magic"):
        decode_checkpoint(payload)


def test_unknown_version_is_rejected(small_model):
    payload = bytearray(encode_checkpoint(small_model))
    payload[4] = 99
    with pytest.raises(CheckpointFormatError, match="version"):
        decode_checkpoint(bytes(payload))


def test_truncation_and_trailing_bytes_are_rejected(small_model):
    payload = encode_checkpoint(small_model)
    with pytest.raises(CheckpointFormatError, match="truncated"):
        decode_checkpoint(payload[:-3])
    with pytest.raises(CheckpointFormatError, match="trailing"):
        decode_checkpoint(payload + b"\x00")


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "absent.sckp")


def test_default_limits_keep_the_base_layout(small_model):
    assert encode_checkpoint(small_model)[4:8] == (1).to_bytes(4, "little")


def test_non_default_limits_survive_a_round_trip(rng, tmp_path):
    config = SetClassifierConfig(input_dim=3, model_dim=8, heads=2, encoder_layers=1, num_classes=4,
                                 max_length=40, layer_norm_eps=1e-6)
    model = SetClassifierModel(config, seed=4)
    payload = encode_checkpoint(model)
    assert payload[4:8] == (2).to_bytes(4, "little")
    restored = load_checkpoint(save_checkpoint(model, tmp_path / "limits.sckp"))
    assert restored.config == config
    features = rng.normal(size=(5, 3))
    assert np.array_equal(restored.forward(features).set_logits.data, model.forward(features).set_logits.data)
