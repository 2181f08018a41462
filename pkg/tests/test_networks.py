import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dpn import autodiff as ad
from dpn.autodiff import Tensor
from dpn.config import ArchConfig
from dpn.losses import kl_standard_normal, mse
from dpn.networks import (VAE, ActionDecoder, ConvEncoder, DpnModel, Dynamics, InferenceNet,
                          InverseModel, PosteriorGaussian, decode_actions, dynamics_step, encode,
                          infer_posterior, inverse_forward, sample_latents, vae_forward)

from fdcheck import check_fd

OBS = (1, 6, 6)


@pytest.fixture
def encoder(micro_arch, rng):
    return ConvEncoder(OBS, micro_arch, rng)


def test_encoder_shape_determinism_and_range(encoder, rng):
    o = rng.uniform(size=OBS)
    a, b = encode(Tensor(o), encoder).data, encode(Tensor(o.copy()), encoder).data
    assert a.shape == (8,)
    assert np.array_equal(a, b)
    batch = encode(Tensor(rng.uniform(size=(5,) + OBS)), encoder).data
    assert batch.shape == (5, 8)
    assert np.all(np.abs(batch) <= 1.0)


def test_encoder_latent_dim_is_twice_channels(rng):
    arch = ArchConfig(conv_channels=[3, 8], conv_strides=[2, 1])
    enc = ConvEncoder((2, 9, 9), arch, rng)
    assert enc.latent_dim == 16
    assert encode(Tensor(rng.uniform(size=(2, 9, 9))), enc).shape == (16,)


def test_encoder_rejects_wrong_shape(encoder):
    with pytest.raises(ad.ShapeError):
        encoder(Tensor(np.zeros((1, 7, 6))))


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, OBS, elements=st.floats(-1e3, 1e3)))
def test_encoder_bounded_for_any_finite_image(obs):
    enc = ConvEncoder(OBS, ArchConfig(conv_channels=[3, 2], conv_strides=[1, 2]),
                      np.random.default_rng(0))
    out = enc(Tensor(obs)).data
    assert np.all(np.isfinite(out)) and np.all(np.abs(out) <= 1.0)


def test_encoder_gradient(encoder, rng):
    o = Tensor(rng.uniform(size=(2,) + OBS))
    w = Tensor(rng.normal(size=(2, 8)))
    check_fd(lambda: (encoder(o) * w).sum(), encoder.parameters())


def test_dynamics_zero_weights_give_zero(rng):
    dyn = Dynamics(4, 2, 8, rng)
    for p in dyn.parameters():
        p.data[...] = 0.0
    out = dynamics_step(Tensor(rng.normal(size=4)), Tensor(rng.normal(size=2)), dyn)
    assert np.array_equal(out.data, np.zeros(4))


def test_dynamics_jacobian_wrt_z_and_params(rng):
    dyn = Dynamics(4, 2, 8, rng)
    x = ad.parameter(rng.normal(size=4))
    z = ad.parameter(rng.normal(size=2))
    w = Tensor(rng.normal(size=4))
    check_fd(lambda: (dynamics_step(x, z, dyn) * w).sum(), [z, x] + dyn.parameters())
    assert np.all(np.isfinite(dynamics_step(Tensor(np.full(4, 1e6)), z, dyn).data))
    with pytest.raises(ad.ShapeError):
        dyn(Tensor(np.ones(3)), z)


def test_inference_factorized_and_floored(rng):
    inf = InferenceNet(2, 3, 4, rng)
    a = rng.uniform(-1, 1, size=(5, 2))
    a[3] = a[1]
    post = infer_posterior(Tensor(a), inf)
    np.testing.assert_array_equal(post.means.data[1], post.means.data[3])
    np.testing.assert_array_equal(post.stds.data[1], post.stds.data[3])
    assert np.all(post.stds.data >= 1e-4)
    # perturbing a_{t'} leaves the parameters at t unchanged
    b = a.copy()
    b[0] += 0.5
    other = infer_posterior(Tensor(b), inf)
    np.testing.assert_array_equal(other.means.data[1:], post.means.data[1:])
    np.testing.assert_array_equal(other.stds.data[1:], post.stds.data[1:])
    assert not np.array_equal(other.means.data[0], post.means.data[0])


def test_inference_floor_under_extreme_inputs(rng):
    inf = InferenceNet(2, 3, 4, rng)
    inf.sigma.b.data[:] = -1e4
    assert np.all(infer_posterior(Tensor(np.zeros((2, 2))), inf).stds.data >= 1e-4)


def test_inference_mu_head_gradient(rng):
    inf = InferenceNet(2, 3, 4, rng)
    a = Tensor(rng.uniform(-1, 1, size=(3, 2)))
    w = Tensor(rng.normal(size=(3, 3)))
    check_fd(lambda: (inf(a).means * w).sum() + inf(a).stds.sum(), inf.parameters())


def test_sample_latents_contract(rng):
    mu, sd = Tensor(rng.normal(size=(3, 2))), Tensor(np.full((3, 2), 1e-4))
    post = PosteriorGaussian(mu, sd)
    assert np.array_equal(sample_latents(post, Tensor(np.zeros((3, 2)))).data, mu.data)
    big = np.full((3, 2), 1e3)
    np.testing.assert_allclose(sample_latents(post, Tensor(big)).data, mu.data + 1e-4 * big)
    with pytest.raises(ad.ShapeError):
        sample_latents(post, Tensor(np.zeros((2, 2))))


def test_sample_latents_monte_carlo_mean(rng):
    mu, sd = np.array([0.3, -1.2]), np.array([0.5, 2.0])
    post = PosteriorGaussian(Tensor(mu), Tensor(sd))
    z = sample_latents(PosteriorGaussian(Tensor(np.tile(mu, (100_000, 1))),
                                         Tensor(np.tile(sd, (100_000, 1)))),
                       Tensor(rng.standard_normal((100_000, 2)))).data
    se = sd / np.sqrt(len(z))
    assert np.all(np.abs(z.mean(axis=0) - mu) < 3 * se)
    assert post.means.shape == (2,)


def test_sample_latents_gradient_flows_to_phi(rng):
    inf = InferenceNet(2, 2, 4, rng)
    a, eps = Tensor(rng.uniform(-1, 1, (3, 2))), Tensor(rng.normal(size=(3, 2)))
    check_fd(lambda: ad.square(sample_latents(inf(a), eps)).sum(), inf.parameters())


def test_decoder_per_timestep_and_zero_weights(rng):
    dec = ActionDecoder(2, 2, 4, rng)
    z = rng.normal(size=(4, 2))
    perm = np.array([2, 0, 3, 1])
    out = decode_actions(Tensor(z), dec).data
    np.testing.assert_array_equal(decode_actions(Tensor(z[perm]), dec).data, out[perm])
    check_fd(lambda: ad.square(dec(Tensor(z))).sum(), dec.parameters())
    for layer in dec.net.layers:
        layer.w.data[:] = 0.0
    dec.net.layers[-1].b.data[:] = [0.25, -0.5]
    np.testing.assert_array_equal(decode_actions(Tensor(z), dec).data, np.tile([0.25, -0.5], (4, 1)))


def test_vae_shapes_kl_and_gradient(micro_arch, rng):
    vae = VAE(OBS, micro_arch, rng)
    obs = Tensor(rng.uniform(size=(2,) + OBS))
    noise = Tensor(rng.normal(size=(2, 3)))
    z, recon, kl = vae_forward(obs, vae, noise)
    assert recon.shape == obs.shape and z.shape == (2, 3)
    single = vae_forward(Tensor(obs.data[0]), vae, Tensor(noise.data[0]))
    assert single[1].shape == OBS
    assert np.all((recon.data >= 0) & (recon.data <= 1))
    assert kl_standard_normal(Tensor(np.zeros(3)), Tensor(np.ones(3))).item() == 0.0
    # zero-initialized biases put dead ReLU units exactly on the kink; move off it
    for bias in vae.dec_biases:
        bias.data[:] = rng.uniform(0.05, 0.2, bias.shape)

    def elbo():
        _, r, k = vae_forward(obs, vae, noise)
        return 0.5 * ad.square(r - obs).sum() + k

    check_fd(elbo, vae.parameters())


def test_vae_odd_sizes_reconstruct_shape(rng):
    arch = ArchConfig(conv_channels=[2], conv_strides=[1], vae_latent=2, vae_channels=2)
    vae = VAE((3, 7, 9), arch, rng)
    _, recon, _ = vae_forward(Tensor(rng.uniform(size=(3, 7, 9))), vae, Tensor(np.zeros(2)))
    assert recon.shape == (3, 7, 9)


def test_inverse_model_contract_and_gradient(micro_arch, rng):
    model = InverseModel(OBS, 2, micro_arch, rng)
    o = Tensor(rng.uniform(size=OBS))
    e_t, e_n, pred, nxt = inverse_forward(o, o, model)
    np.testing.assert_array_equal(e_t.data, e_n.data)
    assert pred.shape == (2,) and nxt.shape == e_t.shape

    o1, o2 = Tensor(rng.uniform(size=(3,) + OBS)), Tensor(rng.uniform(size=(3,) + OBS))
    act = Tensor(rng.uniform(-1, 1, (3, 2)))

    def loss():
        _, e2, p, nh = inverse_forward(o1, o2, model, act)
        return mse(p, act) + mse(nh, e2)

    check_fd(loss, model.parameters())


def test_dpn_model_parameter_groups(micro_arch, rng):
    model = DpnModel(OBS, 2, micro_arch, 3, 0.05, rng)
    names = model.named_parameters()
    for prefix in ("encoder.", "dynamics.", "decoder.", "inference."):
        assert any(n.startswith(prefix) for n in names)
    assert np.array_equal(names["alphas"].data, np.full(3, 0.05))
    state = model.state_arrays()
    other = DpnModel(OBS, 2, micro_arch, 3, 0.05, np.random.default_rng(99))
    other.load_arrays(state)
    for k, v in other.state_arrays().items():
        assert np.array_equal(v, state[k])
    with pytest.raises(KeyError):
        other.load_arrays({})
