import numpy as np
import pytest
import torch

from unifault.config import EncoderConfig, VARIANTS
from unifault.data import MultichannelWindow
from unifault.encoder import (
    EmbeddingBatch,
    SignalEncoder,
    count_parameters,
    encode,
    init_encoder,
    load_checkpoint,
    read_checkpoint_config,
    save_checkpoint,
)
from unifault.errors import (
    CheckpointMagicError,
    CheckpointMismatchError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigurationError,
    NumericError,
    ShapeError,
)

from conftest import make_window

TINY = EncoderConfig(input_length=64, patch_size=8, model_dim=16, num_layers=2, num_heads=2)


def _random_batch(rng, n=4, length=64):
    return rng.normal(size=(n, length)).astype(np.float32)


# ---------------------------------------------------------------------------
# configuration and parameter accounting


def test_config_validation():
    with pytest.raises(ConfigurationError):
        EncoderConfig(input_length=100, patch_size=16)  # not divisible
    with pytest.raises(ConfigurationError):
        EncoderConfig(model_dim=10, num_heads=4)
    with pytest.raises(ConfigurationError):
        EncoderConfig(num_layers=0)


def test_closed_form_count_matches_independent_arithmetic():
    # d=8, N=1, heads=2, patch=16, ffn=4, length=1024
    cfg = EncoderConfig(input_length=1024, patch_size=16, model_dim=8, num_layers=1, num_heads=2)
    d, fd, tokens = 8, 32, 64
    oracle = (
        1 * (4 * (d * d + d) + 2 * d * fd + fd + d + 4 * d)
        + 16 * d + d
        + tokens * d
        + 2 * d
        + (d * d + d)
    )
    assert cfg.parameter_count() == oracle
    assert count_parameters(init_encoder(cfg, 0)) == oracle


def test_variant_budgets_within_3_percent():
    lite = count_parameters(init_encoder(VARIANTS["lite"], 0))
    base = count_parameters(init_encoder(VARIANTS["base"], 0))
    assert abs(lite - 823_000) / 823_000 < 0.03
    assert abs(base - 6_400_000) / 6_400_000 < 0.03


def test_doubling_width_roughly_quadruples_per_layer_count():
    def per_layer(d):
        cfg = EncoderConfig(input_length=64, patch_size=8, model_dim=d, num_layers=1, num_heads=2)
        cfg2 = EncoderConfig(input_length=64, patch_size=8, model_dim=d, num_layers=2, num_heads=2)
        return cfg2.parameter_count() - cfg.parameter_count()

    ratio = per_layer(64) / per_layer(32)
    assert 3.5 < ratio < 4.5


def test_count_is_invariant_to_parameter_values():
    model = init_encoder(TINY, 0)
    before = count_parameters(model)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(1.0)
    assert count_parameters(model) == before


# ---------------------------------------------------------------------------
# initialization


def test_init_deterministic_in_seed():
    a = init_encoder(TINY, 5)
    b = init_encoder(TINY, 5)
    c = init_encoder(TINY, 6)
    for (na, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(pa, pb), na
    assert any(
        not torch.equal(pa, pc) for (_, pa), (_, pc) in zip(a.named_parameters(), c.named_parameters())
    )


def test_init_scheme():
    model = init_encoder(TINY, 1)
    state = dict(model.named_parameters())
    assert torch.all(state["blocks.0.norm_attn.weight"] == 1.0)
    assert torch.all(state["blocks.0.norm_attn.bias"] == 0.0)
    assert torch.all(state["patch_proj.bias"] == 0.0)
    w = state["patch_proj.weight"]
    assert 0.0 < w.std().item() < 0.05
    assert state["pos_table"].std().item() > 0.0


# ---------------------------------------------------------------------------
# encode


def test_encode_shapes_and_pooling():
    rng = np.random.default_rng(0)
    model = init_encoder(TINY, 2)
    out = encode(model, _random_batch(rng, n=5), want_tokens=True)
    assert isinstance(out, EmbeddingBatch)
    assert out.pooled.shape == (5, 16)
    assert out.tokens.shape == (5, 8, 16)
    assert torch.allclose(out.pooled, out.tokens.mean(dim=1), atol=1e-6)


def test_encode_multichannel_concatenates_in_channel_order():
    rng = np.random.default_rng(1)
    model = init_encoder(TINY, 2)
    arr = rng.normal(size=(3, 2, 64)).astype(np.float32)
    out = encode(model, arr)
    assert out.pooled.shape == (3, 32)
    per_channel_0 = encode(model, arr[:, 0, :]).pooled
    per_channel_1 = encode(model, arr[:, 1, :]).pooled
    assert torch.equal(out.pooled[:, :16], per_channel_0)
    assert torch.equal(out.pooled[:, 16:], per_channel_1)


def test_encode_multichannel_windows():
    rng = np.random.default_rng(2)
    model = init_encoder(TINY, 2)
    mws = []
    for i in range(3):
        channels = tuple(
            make_window(
                rng.normal(size=64),
                window_id=f"r{i}#w0000#c{c}",
                channel=c,
                label=1,
                recording=f"r{i}",
            )
            for c in range(2)
        )
        mws.append(MultichannelWindow(per_channel=channels))
    out = encode(model, mws)
    assert out.pooled.shape == (3, 32)


def test_encode_deterministic():
    rng = np.random.default_rng(3)
    model = init_encoder(TINY, 4)
    x = _random_batch(rng)
    a = encode(model, x).pooled
    b = encode(model, x).pooled
    assert torch.equal(a, b)


def test_attention_rows_sum_to_one():
    rng = np.random.default_rng(4)
    model = init_encoder(TINY, 5)
    x = torch.as_tensor(_random_batch(rng, n=3))
    sink: list = []
    with torch.no_grad():
        model(x, attn_sink=sink)
    assert len(sink) == TINY.num_layers
    for weights in sink:
        assert weights.shape == (3, TINY.num_heads, 8, 8)
        sums = weights.sum(dim=-1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)


def test_patch_permutation_changes_output():
    rng = np.random.default_rng(5)
    model = init_encoder(TINY, 6)
    x = _random_batch(rng, n=1)
    patches = x.reshape(1, 8, 8)
    permuted = patches[:, ::-1, :].reshape(1, 64).copy()
    a = encode(model, x).pooled
    b = encode(model, permuted).pooled
    assert not torch.allclose(a, b)


def test_encode_input_validation():
    model = init_encoder(TINY, 7)
    with pytest.raises(ShapeError):
        encode(model, np.zeros((2, 32), dtype=np.float32))
    bad = np.zeros((1, 64), dtype=np.float32)
    bad[0, 0] = np.nan
    with pytest.raises(NumericError):
        encode(model, bad)
    with pytest.raises(ShapeError):
        encode(model, np.zeros((2, 2, 2, 2), dtype=np.float32))


def test_gradients_match_finite_differences_on_sampled_entries():
    """Spot check; the acceptance suite sweeps every parameter."""
    cfg = EncoderConfig(input_length=32, patch_size=8, model_dim=8, num_layers=1, num_heads=2)
    model = init_encoder(cfg, 8, dtype=torch.float64)
    rng = np.random.default_rng(9)
    x = torch.as_tensor(rng.normal(size=(3, 32)))
    direction = torch.as_tensor(rng.normal(size=(8,)))

    def loss_fn() -> torch.Tensor:
        projected = model.project(model(x)[1])  # engages every parameter
        return ((projected @ direction) ** 2).mean()

    loss = loss_fn()
    loss.backward()
    h = 1e-6
    names = [n for n, _ in model.named_parameters()]
    params = dict(model.named_parameters())
    checked = 0
    for name in names:
        p = params[name]
        flat = p.detach().reshape(-1)
        for k in rng.choice(flat.numel(), size=min(4, flat.numel()), replace=False):
            with torch.no_grad():
                orig = flat[k].item()
                flat[k] = orig + h
                up = loss_fn().item()
                flat[k] = orig - h
                down = loss_fn().item()
                flat[k] = orig
            fd = (up - down) / (2 * h)
            an = p.grad.reshape(-1)[k].item()
            assert abs(an - fd) <= 1e-4 * max(abs(an), abs(fd), 1e-6), name
            checked += 1
    assert checked > 30


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_bit_identical(tmp_path):
    rng = np.random.default_rng(10)
    model = init_encoder(TINY, 11)
    x = _random_batch(rng)
    before = encode(model, x).pooled
    path = tmp_path / "model.ufck"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert loaded.cfg == TINY
    for (name, pa), (_, pb) in zip(model.named_parameters(), loaded.named_parameters()):
        assert torch.equal(pa, pb), name
    after = encode(loaded, x).pooled
    assert torch.equal(before, after)


def test_checkpoint_save_is_deterministic(tmp_path):
    model = init_encoder(TINY, 12)
    p1, p2 = tmp_path / "a.ufck", tmp_path / "b.ufck"
    save_checkpoint(model, p1)
    save_checkpoint(model, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_error_taxonomy(tmp_path):
    model = init_encoder(TINY, 13)
    path = tmp_path / "model.ufck"
    save_checkpoint(model, path)
    raw = bytearray(path.read_bytes())

    bad_magic = tmp_path / "magic.ufck"
    corrupted = bytearray(raw)
    corrupted[:4] = b"XXXX"
    bad_magic.write_bytes(bytes(corrupted))
    with pytest.raises(CheckpointMagicError):
        load_checkpoint(bad_magic)

    bad_version = tmp_path / "version.ufck"
    corrupted = bytearray(raw)
    corrupted[4] = 42
    bad_version.write_bytes(bytes(corrupted))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(bad_version)

    truncated = tmp_path / "short.ufck"
    truncated.write_bytes(bytes(raw[: len(raw) // 2]))
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(truncated)

    trailing = tmp_path / "long.ufck"
    trailing.write_bytes(bytes(raw) + b"\x00\x00")
    with pytest.raises(CheckpointMismatchError):
        load_checkpoint(trailing)


def test_checkpoint_config_mismatch(tmp_path):
    model = init_encoder(TINY, 14)
    path = tmp_path / "tiny.ufck"
    save_checkpoint(model, path)
    with pytest.raises(CheckpointMismatchError):
        load_checkpoint(path, expected_cfg=VARIANTS["base"])
    assert read_checkpoint_config(path) == TINY
    loaded = load_checkpoint(path, expected_cfg=TINY)
    assert loaded.cfg == TINY
