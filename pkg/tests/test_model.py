import numpy as np
import pytest

from mdsvit import tensor as T
from mdsvit.exceptions import ConfigError, ShapeError
from mdsvit.metrics import combined_loss
from mdsvit.model import (
    DecoderHead,
    MergeNet,
    ModelConfig,
    TransformerEncoder,
    build_model,
    count_parameters,
    parameter_norms,
)
from mdsvit.tensor import Tensor
from mdsvit.training import AdamW

from oracles import encoder_straight


@pytest.fixture(scope="module")
def toy_model():
    return build_model("toy", seed=0)


def _zero_encoder_body(enc):
    for layer in enc.layers:
        for name, p in layer.named_parameters():
            if name.startswith(("msa.", "mlp.")):
                p.data[:] = 0


# -- encoder ------------------------------------------------------------------

def test_encoder_zero_blocks_give_projection_plus_pos(rng):
    enc = TransformerEncoder(8, 12, 3, (3, 4), seed=0)
    _zero_encoder_body(enc)
    x = rng.normal(size=(2, 8, 3, 4)).astype(np.float32)
    out = enc(Tensor(x)).data
    z0 = enc.embed(Tensor(x)).data
    assert np.array_equal(out, z0.transpose(0, 2, 1).reshape(2, 12, 3, 4))
    wconv = enc.proj.weight.data[:, :, 0, 0]
    tokens = x.reshape(2, 8, 12).transpose(0, 2, 1) @ wconv.T + enc.proj.bias.data + enc.pos.data
    assert np.allclose(z0, tokens, atol=1e-6)


def test_encoder_is_sensitive_to_positions(rng):
    enc = TransformerEncoder(4, 8, 2, (2, 3), seed=0)
    x = Tensor(rng.normal(size=(1, 4, 2, 3)).astype(np.float32))
    before = enc(x).data
    enc.pos.data[0] += 1.0
    assert not np.allclose(before, enc(x).data)


def test_encoder_matches_straight_line_oracle(rng):
    enc = TransformerEncoder(16, 32, 4, (6, 8), seed=3).astype(np.float64)
    x = rng.normal(size=(1, 16, 6, 8))
    assert np.max(np.abs(enc(Tensor(x)).data - encoder_straight(enc, x))) < 1e-5


def test_encoder_grid_mismatch():
    with pytest.raises(ShapeError):
        TransformerEncoder(4, 8, 2, (2, 3), seed=0)(T.zeros((1, 4, 3, 3)))


# -- decoder ------------------------------------------------------------------

def _decoder(seed=0):
    return DecoderHead(8, [8, 4, 4, 4, 4, 4, 1], num_upsamples=3, seed=seed)


def test_decoder_layer_inputs_trace(rng):
    dec = _decoder()
    deep = Tensor(rng.normal(size=(1, 8, 2, 3)).astype(np.float32))
    s1 = T.ones((1, 8, 4, 6))
    s2 = T.ones((1, 4, 8, 12))
    trace = []
    out = dec(deep, s1, s2, trace=trace)
    assert [t.shape[2:] for t in trace] == [(2, 3), (4, 6), (8, 12), (16, 24), (16, 24), (16, 24), (16, 24)]
    assert out.shape == (1, 1, 16, 24)
    assert np.all((out.data > 0) & (out.data < 1))


def test_all_ones_skips_are_identity(rng):
    deep = Tensor(rng.normal(size=(1, 8, 2, 3)).astype(np.float32))
    ones1, ones2 = T.ones((1, 8, 4, 6)), T.ones((1, 4, 8, 12))
    a = _decoder(1)
    plain = a.block(0, deep)
    plain = T.upsample_bilinear(plain, 2)
    plain = T.upsample_bilinear(a.block(1, plain), 2)
    trace = []
    a(deep, ones1, ones2, trace=trace)
    assert np.allclose(trace[2].data, plain.data, atol=1e-6)


def test_zero_first_skip_zeroes_layer_two_input(rng):
    dec = _decoder()
    trace = []
    dec(Tensor(rng.normal(size=(1, 8, 2, 3)).astype(np.float32)), T.zeros((1, 8, 4, 6)), T.ones((1, 4, 8, 12)), trace)
    assert np.array_equal(trace[1].data, np.zeros((1, 8, 4, 6)))


def test_decoder_skip_shape_mismatch():
    with pytest.raises(ShapeError):
        _decoder()(T.zeros((1, 8, 2, 3)), T.ones((1, 8, 2, 3)), T.ones((1, 4, 8, 12)))


# -- merge --------------------------------------------------------------------

def test_merge_range_and_order_sensitivity(rng):
    mn = MergeNet([16, 32, 32, 16, 8, 4, 1], seed=0)
    m1 = Tensor(rng.uniform(size=(1, 1, 8, 8)).astype(np.float32))
    m2 = Tensor(rng.uniform(size=(1, 1, 8, 8)).astype(np.float32))
    a = mn(m1, m2).data
    assert a.shape == (1, 1, 8, 8) and np.all((a > 0) & (a < 1))
    assert not np.allclose(a, mn(m2, m1).data)


def test_merge_input_shape_check():
    with pytest.raises(ShapeError):
        MergeNet([4, 4, 4, 4, 4, 4, 1])(T.zeros((1, 1, 4, 4)), T.zeros((1, 1, 4, 5)))


def test_merge_learns_pixelwise_mean(rng):
    mn = MergeNet([16, 32, 32, 16, 8, 4, 1], seed=0)
    m1 = rng.uniform(0.1, 0.9, size=(4, 1, 16, 16)).astype(np.float32)
    m2 = rng.uniform(0.1, 0.9, size=(4, 1, 16, 16)).astype(np.float32)
    target = 0.5 * (m1 + m2)
    opt = AdamW(mn.named_parameters(), lr=3e-3)
    for _ in range(200):
        opt.zero_grad()
        diff = mn(Tensor(m1), Tensor(m2)) - Tensor(target)
        (diff * diff).mean().backward()
        opt.step()
    mn.eval()
    pred = mn(Tensor(m1), Tensor(m2)).data
    assert np.mean((pred - target) ** 2) < 1e-3


# -- whole model ----------------------------------------------------------------

def test_toy_model_maps(toy_model, rng):
    x = Tensor(rng.uniform(size=(2, 3, 96, 128)).astype(np.float32))
    with T.no_grad():
        out = toy_model(x, "merged")
    assert set(out) == {"map1", "map2", "merged"}
    for m in out.values():
        assert m.shape == (2, 1, 96, 128)
        assert np.all((m.data > 0) & (m.data < 1))


def test_dual_mode_has_no_merged(toy_model):
    with T.no_grad():
        assert set(toy_model(T.zeros((1, 3, 96, 128)))) == {"map1", "map2"}
    with pytest.raises(ValueError):
        toy_model(T.zeros((1, 3, 96, 128)), "fused")


def test_wrong_resolution(toy_model):
    with pytest.raises(ShapeError, match="rebuild"):
        toy_model(T.zeros((1, 3, 64, 64)))


def test_model_determinism(rng):
    x = Tensor(rng.uniform(size=(1, 3, 96, 128)).astype(np.float32))
    with T.no_grad():
        a = build_model("toy", seed=3).eval()(x)["map1"].data
        b = build_model("toy", seed=3).eval()(x)["map1"].data
    assert np.array_equal(a, b)


def test_parameter_accounting(toy_model):
    counts = count_parameters(toy_model)
    parts = counts["backbone"] + counts["encoders"] + counts["decoders"] + counts["merge"]
    assert counts["total"] == parts == toy_model.num_parameters()
    assert counts["total"] <= 2_000_000


def test_paper_merge_parameter_count():
    mn = MergeNet(ModelConfig.preset_config("paper").merge_channels, seed=0)
    assert mn.num_parameters() == 408_481


def test_config_round_trip():
    cfg = ModelConfig.preset_config("toy", (64, 96))
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_config_errors():
    with pytest.raises(ConfigError):
        ModelConfig.preset_config("huge")
    with pytest.raises(ConfigError):
        ModelConfig.preset_config("toy", (100, 128))
    bad = ModelConfig.preset_config("toy")
    bad.decoder_channels = [32, 32, 16, 16, 8, 8, 1]
    with pytest.raises(ConfigError):
        bad.validate()


def test_every_component_receives_gradient(rng):
    model = build_model("toy", seed=0)
    x = Tensor(rng.uniform(size=(2, 3, 96, 128)).astype(np.float32))
    gt = Tensor(rng.uniform(size=(2, 1, 96, 128)).astype(np.float32))
    out = model(x, "merged")
    (combined_loss(out["map1"], gt) + combined_loss(out["map2"], gt) + combined_loss(out["merged"], gt)).backward()
    norms = parameter_norms(model)
    assert all(v > 0 for v in norms.values()), norms
