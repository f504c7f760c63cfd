import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stalign.encoders import EmbeddingSet
from stalign.errors import ConfigError, DataError, ShapeError
from stalign.fusion import AbfnConfig, ConcatFusion, FusionNetwork, abfn_forward, cross_attend, fuse
from stalign.numerics import Rng, Tensor


def _net(s=4, l=4, seed=0):
    net = FusionNetwork(AbfnConfig(tokens=s, token_dim=l), Rng(seed, "f"))
    net.astype(np.float64)
    return net


def test_cross_attention_weights_are_a_distribution_over_context_tokens():
    rng = np.random.default_rng(0)
    s, l = 3, 4
    w = [Tensor(rng.normal(size=(l, l))) for _ in range(3)]
    z, weights = cross_attend(Tensor(rng.normal(size=(5, s * l))), Tensor(rng.normal(size=(5, s * l))),
                              *w, s, l, return_weights=True)
    assert z.shape == (5, s, l) and weights.shape == (5, s, s)
    np.testing.assert_allclose(weights.data.sum(axis=-1), 1.0, rtol=1e-12)


def test_cross_attention_matches_per_pair_loop():
    rng = np.random.default_rng(1)
    s, l = 2, 4
    wq, wk, wv = (rng.normal(size=(l, l)) for _ in range(3))
    q, c = rng.normal(size=(3, s * l)), rng.normal(size=(3, s * l))
    z = cross_attend(Tensor(q), Tensor(c), Tensor(wq), Tensor(wk), Tensor(wv), s, l).data
    for p in range(3):
        qt, ct = q[p].reshape(s, l), c[p].reshape(s, l)
        logits = (qt @ wq) @ (ct @ wk).T / np.sqrt(l)
        att = np.exp(logits - logits.max(axis=1, keepdims=True))
        att /= att.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(z[p], att @ (ct @ wv), rtol=1e-12)


def test_fuse_halves_and_flattens():
    z_i = Tensor(np.ones((2, 3, 4)))
    z_g = Tensor(np.ones((2, 3, 4)) * 2)
    w_i, w_g = Tensor(np.eye(4)[:, :2]), Tensor(np.eye(4)[:, 2:])
    out = fuse(z_i, z_g, w_i, w_g).data
    assert out.shape == (2, 12)
    np.testing.assert_array_equal(out[0, :4], [1, 1, 2, 2])
    with pytest.raises(ShapeError):
        fuse(z_i, z_g, Tensor(np.eye(4)), w_g)


def test_fusion_network_shapes_and_single_vectors():
    net = _net()
    rng = np.random.default_rng(2)
    img, gene = rng.normal(size=(6, 16)), rng.normal(size=(6, 16))
    batch = net(Tensor(img), Tensor(gene)).data
    assert batch.shape == (6, 16)
    single = net(Tensor(img[2]), Tensor(gene[2])).data
    np.testing.assert_allclose(single, batch[2], rtol=1e-12)
    with pytest.raises(ShapeError):
        net(Tensor(img), Tensor(gene[:3]))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 16))
def test_fusion_is_per_pair(seed):
    """Row order of the batch never mixes information between pairs."""
    net = _net(seed=seed % 7)
    rng = np.random.default_rng(seed)
    img, gene = rng.normal(size=(5, 16)), rng.normal(size=(5, 16))
    perm = rng.permutation(5)
    out = net(Tensor(img), Tensor(gene)).data
    np.testing.assert_allclose(net(Tensor(img[perm]), Tensor(gene[perm])).data, out[perm], rtol=1e-12)


def test_concat_fusion_is_concatenation_then_linear():
    fusion = ConcatFusion(3, Rng(0))
    fusion.proj.bias.data = np.arange(3.0, dtype=np.float32)
    img, gene = np.array([[1.0, 2.0, 3.0]]), np.array([[4.0, 5.0, 6.0]])
    expected = np.concatenate([img, gene], axis=1) @ fusion.proj.weight.data + fusion.proj.bias.data
    np.testing.assert_allclose(fusion(Tensor(img), Tensor(gene)).data, expected, rtol=1e-6)


def test_abfn_forward_checks_ids_and_level():
    net = _net()
    vecs = np.random.default_rng(3).normal(size=(2, 16))
    a = EmbeddingSet("spot_image", ["a", "b"], vecs)
    g = EmbeddingSet("spot_gene", ["a", "b"], vecs)
    fused = abfn_forward(a, g, net, "niche")
    assert fused.role == "fused_niche" and fused.ids == ["a", "b"]
    with pytest.raises(DataError, match="'b'"):
        abfn_forward(a, EmbeddingSet("spot_gene", ["a", "c"], vecs), net)
    with pytest.raises(ConfigError):
        abfn_forward(a, g, net, "tissue")


def test_abfn_config_validation():
    with pytest.raises(ConfigError, match="even"):
        AbfnConfig(tokens=4, token_dim=3).validate()
    with pytest.raises(ConfigError, match="embed_dim"):
        AbfnConfig(tokens=4, token_dim=4).validate(embed_dim=32)
