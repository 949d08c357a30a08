import json
import struct

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from vfmtok.ar import ARConfig, ARModel
from vfmtok.cli import main
from vfmtok.data import (SyntheticDatasetSpec, gen_synthetic_dataset, load_dataset, read_ppm, save_dataset,
                         write_ppm)
from vfmtok.errors import ConfigError, ContractError, FormatError
from vfmtok.io import (Checkpoint, MetricsWriter, ar_from_checkpoint, config_from_text, config_to_text,
                       decode_checkpoint, encode_checkpoint, load_checkpoint, load_tokens, model_checkpoint,
                       read_metrics, save_checkpoint, save_tokens, tokenizer_from_checkpoint)
from vfmtok.metrics import toy_frechet
from vfmtok.model import TokenizerConfig, VFMTokenizer
from vfmtok.suite import micro_tokenizer_config
from vfmtok.trainer import linear_probe


# -- checkpoints --------------------------------------------------------------
def test_checkpoint_layout_by_hand():
    ck = Checkpoint({"a": np.array([[1.0, 2.0]], np.float32)})
    raw = encode_checkpoint(ck)
    expect = b"VFMT" + struct.pack("<II", 1, 1) + struct.pack("<H", 1) + b"a" + bytes([0, 2]) + \
        struct.pack("<II", 1, 2) + struct.pack("<2f", 1.0, 2.0)
    assert raw == expect


def test_checkpoint_roundtrip_full_model(tmp_path):
    tok = VFMTokenizer(micro_tokenizer_config())
    ar = ARModel(ARConfig(vocab=16, n_classes=3, layers=1, width=16, heads=2, seq_len=4))
    path = tmp_path / "m.vfmt"
    save_checkpoint(path, model_checkpoint(tok, ar))
    ck = load_checkpoint(path)
    tok2, ar2 = tokenizer_from_checkpoint(ck), ar_from_checkpoint(ck)
    for k, v in tok.state_dict().items():
        assert np.array_equal(v, tok2.state_dict()[k])
    for k, v in ar.state_dict().items():
        assert np.array_equal(v, ar2.state_dict()[k])
    assert encode_checkpoint(model_checkpoint(tok2, ar2)) == path.read_bytes()
    assert any(k.startswith("frozen_encoder.") for k in ck.tensors)
    assert any(k.startswith("quantizer.") for k in ck.tensors)
    assert any(k.startswith("region_tokenizer.") for k in ck.tensors)
    assert any(k.startswith("ar.") for k in ck.tensors)


_f32 = hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4),
                  elements=st.floats(-1e6, 1e6, width=32))


@settings(max_examples=50, deadline=None)
@given(st.dictionaries(st.text("abc._xyz", min_size=1, max_size=8), _f32, max_size=4))
def test_checkpoint_roundtrip_property(tensors):
    raw = encode_checkpoint(Checkpoint(tensors))
    back = decode_checkpoint(raw)
    assert set(back.tensors) == set(tensors)
    for k, v in tensors.items():
        assert back.tensors[k].shape == v.shape
        assert back.tensors[k].tobytes() == v.tobytes()
    assert encode_checkpoint(back) == raw


def test_truncated_checkpoint_names_offset(tmp_path):
    raw = encode_checkpoint(model_checkpoint(VFMTokenizer(micro_tokenizer_config())))
    for cut in (3, 11, 40, len(raw) - 1):
        with pytest.raises(FormatError, match="offset"):
            decode_checkpoint(raw[:cut])


def test_bad_magic_version_and_dtype_rejected():
    raw = bytearray(encode_checkpoint(Checkpoint({"w": np.zeros(2, np.float32)})))
    with pytest.raises(FormatError, match="magic"):
        decode_checkpoint(b"XXXX" + bytes(raw[4:]))
    bad_ver = bytes(raw[:4]) + struct.pack("<I", 9) + bytes(raw[8:])
    with pytest.raises(FormatError, match="version"):
        decode_checkpoint(bad_ver)
    raw[12 + 2 + 1] = 7  # dtype byte of the first entry
    with pytest.raises(FormatError, match="dtype"):
        decode_checkpoint(bytes(raw))


def test_checkpoint_refuses_float64():
    with pytest.raises(FormatError):
        encode_checkpoint(Checkpoint({"w": np.zeros(2)}))


# -- configs, tokens, metrics -------------------------------------------------
def test_config_text_roundtrip():
    cfg = TokenizerConfig(num_tokens=64, tap_layers=(2, 4), attention_kind="windowed", lam=0.0, shared_vit=False)
    assert config_from_text(TokenizerConfig, config_to_text(cfg)) == cfg


def test_config_errors():
    with pytest.raises(ConfigError):
        config_from_text(TokenizerConfig, "no_such_key = 3\n")
    with pytest.raises(ConfigError):
        config_from_text(TokenizerConfig, "num_tokens = many\n")
    with pytest.raises(ConfigError):
        config_from_text(TokenizerConfig, "just a line\n")


def test_token_file_roundtrip_and_layout(tmp_path):
    idx = np.array([[1, 2, 3], [4, 5, 6]])
    path = tmp_path / "t.vftk"
    save_tokens(path, [7, 0], idx, vocab=8)
    raw = path.read_bytes()
    assert raw[:4] == b"VFTK" and struct.unpack_from("<IIII", raw, 4) == (1, 3, 8, 2)
    assert struct.unpack_from("<4I", raw, 20) == (7, 1, 2, 3)
    cls, got, vocab = load_tokens(path)
    np.testing.assert_array_equal(got, idx)
    np.testing.assert_array_equal(cls, [7, 0])
    path.write_bytes(raw[:-2])
    with pytest.raises(FormatError):
        load_tokens(path)
    with pytest.raises(FormatError):
        save_tokens(tmp_path / "x.vftk", [0], [[9]], vocab=8)


def test_metrics_jsonl(tmp_path):
    path = tmp_path / "m.jsonl"
    with MetricsWriter(path) as mw:
        mw({"run_id": "a", "step": 0, "loss": 1.0})
        mw({"run_id": "a", "step": 1, "loss": 0.5})
        mw({"run_id": "b", "step": 0, "loss": 2.0})
        with pytest.raises(FormatError):
            mw({"run_id": "a", "step": 1, "loss": 0.4})
    assert [r["step"] for r in read_metrics(path)] == [0, 1, 0]


# -- Fréchet ------------------------------------------------------------------
def _frechet_sqrtm(a, b):
    """Independent route: scipy's general matrix square root of the covariance product."""
    ma, mb = a.mean(0), b.mean(0)
    ca, cb = np.cov(a, rowvar=False), np.cov(b, rowvar=False)
    root = scipy.linalg.sqrtm(ca @ cb).real
    return float(((ma - mb) ** 2).sum() + np.trace(ca + cb - 2 * root))


def test_frechet_identical_sets_zero_and_symmetric():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(300, 6)), rng.normal(0.3, 1.2, size=(400, 6))
    assert toy_frechet(a, a) < 1e-6
    assert abs(toy_frechet(a, b) - toy_frechet(b, a)) < 1e-6


def test_frechet_gaussian_closed_form():
    rng = np.random.default_rng(1)
    d = toy_frechet(rng.normal(0, 1, size=10_000), rng.normal(1, 1, size=10_000))
    assert abs(d - 1.0) < 0.1


def test_frechet_matches_sqrtm_route():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(500, 5)) @ rng.normal(size=(5, 5))
    b = rng.normal(0.5, 1, size=(500, 5)) @ rng.normal(size=(5, 5))
    assert toy_frechet(a, b) == pytest.approx(_frechet_sqrtm(a, b), rel=1e-6)


def test_frechet_needs_enough_samples():
    with pytest.raises(ContractError):
        toy_frechet(np.zeros((4, 4)), np.zeros((10, 4)))


# -- dataset ------------------------------------------------------------------
def test_dataset_deterministic_and_in_range():
    spec = SyntheticDatasetSpec(images_per_class=5)
    a, b = gen_synthetic_dataset(spec), gen_synthetic_dataset(spec)
    assert a.images.tobytes() == b.images.tobytes()
    x = a.float_images()
    assert x.min() >= 0 and x.max() <= 1 and x.shape == (40, 32, 32, 3)
    assert len(a.train_idx) == 36 and len(a.val_idx) == 4
    assert not set(a.train_idx) & set(a.val_idx)


def test_dataset_rejects_too_many_classes():
    with pytest.raises(ConfigError):
        gen_synthetic_dataset(SyntheticDatasetSpec(n_classes=17))


def test_raw_pixel_probe_beats_chance():
    ds = gen_synthetic_dataset(SyntheticDatasetSpec(images_per_class=40))
    (xt, yt), (xv, yv) = ds.train, ds.val
    assert linear_probe(xt.reshape(len(xt), -1), yt, xv.reshape(len(xv), -1), yv) > 0.3


def test_ppm_and_dataset_roundtrip(tmp_path):
    ds = gen_synthetic_dataset(SyntheticDatasetSpec(images_per_class=2))
    write_ppm(tmp_path / "x.ppm", ds.images[0])
    np.testing.assert_array_equal(read_ppm(tmp_path / "x.ppm"), ds.images[0])
    (tmp_path / "bad.ppm").write_bytes(b"P6\n32 32\n255\n" + b"\0" * 10)
    with pytest.raises(FormatError, match="byte"):
        read_ppm(tmp_path / "bad.ppm")
    save_dataset(ds, tmp_path / "ds")
    back = load_dataset(tmp_path / "ds")
    np.testing.assert_array_equal(back.images, ds.images)
    np.testing.assert_array_equal(back.val_idx, ds.val_idx)


# -- CLI ----------------------------------------------------------------------
SMALL = """image_size = 32
patch_size = 8
embed_dim = 16
enc_layers = 2
enc_heads = 2
tap_layers = 1, 2
proj_dim = 16
num_tokens = 4
deform_depth = 1
n_points = 2
codebook_size = 16
code_dim = 4
dec_depth = 1
dec_heads = 2
n_registers = 2
dec_channels = 8
batch_size = 8
"""


def test_cli_unknown_and_missing(tmp_path, capsys):
    assert main(["frobnicate"]) == 1
    assert main([]) == 1
    assert main(["generate", "--ckpt", str(tmp_path / "missing.vfmt")]) == 1
    assert "not found" in capsys.readouterr().err


def test_cli_gradcheck_exit_zero(capsys):
    assert main(["gradcheck", "--seeds", "1"]) == 0
    assert "passed" in capsys.readouterr().out


def test_cli_pipeline(tmp_path, capsys):
    cfg = tmp_path / "tok.txt"
    cfg.write_text(SMALL)
    data, out = tmp_path / "data", tmp_path / "run"
    common = ["--out", str(out)]
    # 24 validation images: enough for a Fréchet estimate in the 16-wide feature space
    assert main(["gen-data", "--out", str(data), "--images-per-class", "30"]) == 0
    assert main(["train-tok", "--config", str(cfg), "--data", str(data), "--steps", "2"] + common) == 0
    ckpt = str(out / "tokenizer.vfmt")
    assert main(["tokenize", "--ckpt", ckpt, "--data", str(data)] + common) == 0
    arcfg = tmp_path / "ar.txt"
    arcfg.write_text("layers = 1\nwidth = 16\nheads = 2\nbatch_size = 8\n")
    assert main(["train-ar", "--ckpt", ckpt, "--config", str(arcfg), "--steps", "2"] + common) == 0
    model = str(out / "model.vfmt")
    assert main(["generate", "--ckpt", model, "--n", "3", "--cfg-scale", "2.0"] + common) == 0
    assert len(list((out / "samples").glob("*.ppm"))) == 3
    capsys.readouterr()
    assert main(["eval", "--ckpt", ckpt, "--data", str(data)] + common) == 0
    rec = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert {"mse", "frechet", "usage", "probe_acc"} <= set(rec)
    steps = [r["step"] for r in read_metrics(out / "tokenizer_metrics.jsonl")]
    assert steps == [0, 1]


def test_cli_ablate(tmp_path, capsys):
    cfg = tmp_path / "tok.txt"
    cfg.write_text(SMALL)
    args = ["ablate", "--matrix", "use_registers", "--config", str(cfg), "--steps", "1",
            "--images-per-class", "30", "--out", str(tmp_path)]
    assert main(args) == 0
    lines = [json.loads(x) for x in capsys.readouterr().out.strip().splitlines()]
    assert len(lines) == 2 and all("mse" in r for r in lines)
