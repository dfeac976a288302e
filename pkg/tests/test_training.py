import numpy as np
import pytest

from nre.data import synth_blobs
from nre.errors import NumericError
from nre.nn import Affine, Network, Relu, mlp
from nre.similarity import LatentTable, encode_all, kmeans
from nre.training import (
    LossWeights,
    TrainConfig,
    _mine_epoch,
    build_autoencoder,
    nre_loss,
    pretrain_ae,
    relational_terms,
    train_nre,
)
from oracles import finite_diff_grad, max_rel_error, within_class_mean_cosine


class TestLossWeights:
    def test_simplex_enforced(self):
        with pytest.raises(ValueError, match="sum to 1"):
            LossWeights(0.5, 0.5, 0.5)

    def test_nonnegative(self):
        with pytest.raises(ValueError, match="nonnegative"):
            LossWeights(1.2, -0.1, -0.1)

    def test_degenerate_corner_allowed(self):
        w = LossWeights(1.0, 0.0, 0.0)
        assert w.as_tuple() == (1.0, 0.0, 0.0)

    def test_warns_when_reconstruction_not_dominant(self):
        with pytest.warns(UserWarning, match="dominate"):
            LossWeights(0.2, 0.4, 0.4)

    def test_no_warning_when_dominant(self, recwarn):
        LossWeights(0.5, 0.25, 0.25)
        assert not [w for w in recwarn if issubclass(w.category, UserWarning)]


class TestTrainConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(t=0)
        with pytest.raises(ValueError):
            TrainConfig(refresh_interval=0)
        with pytest.raises(ValueError):
            TrainConfig(query_mode="sometimes")


def _identity_net(dim, frozen=False, with_relu=True):
    layers = [Affine(np.eye(dim, dtype=np.float32), np.zeros(dim, dtype=np.float32))]
    if with_relu:
        layers.append(Relu())
    return Network(layers, frozen=frozen)


def _const_net(out_values):
    out = np.asarray(out_values, dtype=np.float32)
    return Network([Affine(np.zeros((out.size, out.size), dtype=np.float32), out)])


class TestRelationalLoss:
    def test_hand_computed_value(self):
        # One sample; latents sit on known directions so every similarity is
        # 1/sqrt(2) or 0/1 and the total works out by hand to 0.41716.
        u = np.array([[0.70710678, 0.70710678]])
        a = np.array([[1.0, 0.0]])
        nbr = np.array([[[0.0, 1.0]]])
        far = np.array([[[1.0, 0.0]]])
        t1, t2, t3, *_ = relational_terms(u, a, nbr, far)
        loss = 0.5 * t1[0] + 0.2 * t2[0] + 0.3 * t3[0]
        assert loss == pytest.approx(0.41716, abs=1e-4)

    def test_hand_computed_value_through_networks(self):
        x = np.array([[1.0, 0.0]], dtype=np.float32)
        encoder = _identity_net(2, with_relu=False)
        decoder = _const_net([0.70710678, 0.70710678])
        sim = _identity_net(2, frozen=True)
        terms, _, _ = nre_loss(x, encoder, decoder, sim,
                               np.array([[[0.0, 1.0]]], dtype=np.float32),
                               np.array([[[1.0, 0.0]]], dtype=np.float32),
                               LossWeights(0.5, 0.2, 0.3))
        assert terms.loss == pytest.approx(0.41716, abs=1e-4)

    def test_pure_reconstruction_weights_zero_loss_at_fixpoint(self):
        x = np.array([[0.3, 0.7], [0.9, 0.1]], dtype=np.float32)
        encoder = _identity_net(2, with_relu=False)
        decoder = _identity_net(2, with_relu=False)
        sim = _identity_net(2, frozen=True)
        terms, _, _ = nre_loss(x, encoder, decoder, sim, None, None, LossWeights(1.0, 0.0, 0.0))
        assert terms.loss == pytest.approx(0.0, abs=1e-12)
        assert terms.term2 == 0.0 and terms.term3 == 0.0

    def test_colinear_neighbor_zeroes_middle_term(self):
        x = np.array([[0.5, 0.5]], dtype=np.float32)
        encoder = _identity_net(2, with_relu=False)
        decoder = _identity_net(2, with_relu=False)
        sim = _identity_net(2, frozen=True)
        with pytest.warns(UserWarning):
            weights = LossWeights(0.0, 1.0, 0.0)
        nbr = np.array([[[1.0, 1.0]]], dtype=np.float32)  # colinear with x
        terms, _, _ = nre_loss(x, encoder, decoder, sim, nbr, None, weights)
        assert terms.loss == pytest.approx(0.0, abs=1e-12)

    def test_t_mismatch_rejected(self):
        x = np.array([[0.5, 0.5]], dtype=np.float32)
        encoder = _identity_net(2, with_relu=False)
        decoder = _identity_net(2, with_relu=False)
        sim = _identity_net(2, frozen=True)
        with pytest.raises(ValueError, match="differ"):
            nre_loss(x, encoder, decoder, sim,
                     np.zeros((1, 2, 2), dtype=np.float32),
                     np.zeros((1, 3, 2), dtype=np.float32),
                     LossWeights(0.5, 0.25, 0.25))

    def test_requires_frozen_similarity_encoder(self):
        x = np.array([[0.5, 0.5]], dtype=np.float32)
        net = _identity_net(2, with_relu=False)
        with pytest.raises(ValueError, match="frozen"):
            nre_loss(x, net, _identity_net(2, with_relu=False), _identity_net(2),
                     None, None, LossWeights(1.0, 0.0, 0.0))

    @staticmethod
    def draw_smooth_setup(seed):
        """Random nets/inputs whose relu pre-activations (through every
        path, including the frozen similarity encoder on both x and the
        reconstruction) stay clear of the kink, so central differences are
        a valid oracle."""
        from oracles import relu_margin

        d_in, d_lat, t = 5, 3, 2
        for attempt in range(100):
            rng = np.random.default_rng([seed, attempt])
            encoder = mlp([d_in, 4, d_lat], hidden="relu", final="relu", rng=rng, dtype=np.float64)
            decoder = mlp([d_lat, 4, d_in], hidden="relu", final="sigmoid", rng=rng, dtype=np.float64)
            sim = mlp([d_in, 4, d_lat], hidden="relu", final="relu", rng=rng,
                      dtype=np.float64).copy(frozen=True)
            x = rng.uniform(0.1, 0.9, size=(3, d_in))
            nbr = rng.uniform(0.0, 1.0, size=(3, t, d_lat))
            far = rng.uniform(0.0, 1.0, size=(3, t, d_lat))
            h = encoder.forward(x)
            x_rec = decoder.forward(h)
            u = sim.forward(x_rec)
            margin = min(relu_margin(encoder, x), relu_margin(decoder, h),
                         relu_margin(sim, x), relu_margin(sim, x_rec))
            if margin > 1e-3 and np.linalg.norm(u, axis=1).min() > 1e-2:
                return encoder, decoder, sim, x, nbr, far
        raise AssertionError("could not draw a kink-free configuration")

    @pytest.mark.parametrize("seed", range(12))
    def test_gradients_match_finite_differences_through_frozen_path(self, seed):
        encoder, decoder, sim, x, nbr, far = self.draw_smooth_setup(seed)
        weights = LossWeights(0.5, 0.2, 0.3)

        terms, enc_grads, dec_grads = nre_loss(x, encoder, decoder, sim, nbr, far, weights)

        def loss_at(params_net, p, pv):
            saved = p.copy()
            p[...] = pv
            t_, _, _ = nre_loss(x, encoder, decoder, sim, nbr, far, weights)
            p[...] = saved
            return t_.loss

        for net, grads in ((encoder, enc_grads), (decoder, dec_grads)):
            for p, g in zip(net.parameters(), grads):
                fd = finite_diff_grad(lambda pv, p=p, net=net: loss_at(net, p, pv), p)
                assert max_rel_error(g, fd) < 1e-4

    def test_loss_bounded(self):
        rng = np.random.default_rng(3)
        t = 3
        weights = LossWeights(0.5, 0.25, 0.25)
        encoder = mlp([4, 3], hidden="relu", final="relu", rng=rng)
        decoder = mlp([3, 4], hidden="relu", final="sigmoid", rng=rng)
        sim = mlp([4, 3], hidden="relu", final="relu", rng=rng).copy(frozen=True)
        for _ in range(10):
            x = rng.uniform(0, 1, size=(4, 4)).astype(np.float32)
            nbr = rng.uniform(0, 1, size=(4, t, 3)).astype(np.float32)
            far = rng.uniform(0, 1, size=(4, t, 3)).astype(np.float32)
            terms, _, _ = nre_loss(x, encoder, decoder, sim, nbr, far, weights)
            assert 0.0 <= terms.loss <= weights.lam1 + t * (weights.lam2 + weights.lam3)


class TestPretrain:
    def test_loss_decreases(self, blobs):
        _, _, hist = pretrain_ae(blobs, [12, 8, 4], epochs=5, lr=0.005, seed=0, batch_size=30)
        assert hist[4] < hist[0]

    def test_determinism(self, blobs):
        a = pretrain_ae(blobs, [12, 8, 4], epochs=3, lr=0.005, seed=1, batch_size=30)
        b = pretrain_ae(blobs, [12, 8, 4], epochs=3, lr=0.005, seed=1, batch_size=30)
        for pa, pb in zip(a[0].parameters() + a[1].parameters(),
                          b[0].parameters() + b[1].parameters()):
            assert np.array_equal(pa, pb)

    def test_architecture_dim_checked(self, blobs):
        with pytest.raises(ValueError, match="input dim"):
            pretrain_ae(blobs, [10, 4], epochs=1, lr=0.01, seed=0)

    def test_divergence_raises(self, blobs):
        with pytest.raises(NumericError):
            pretrain_ae(blobs, [12, 8, 4], epochs=30, lr=1e12, seed=0, batch_size=30)


class TestTrainNRE:
    def test_pure_reconstruction_skips_mining(self, blobs):
        # T larger than the dataset would make mining fail; with the
        # reconstruction-only weights it must never be attempted.
        enc, dec, _ = pretrain_ae(blobs, [12, 8, 4], epochs=2, lr=0.005, seed=0, batch_size=30)
        cfg = TrainConfig(epochs=1, batch_size=30, lr=1e-4, t=10_000, k=2, seed=0)
        records = []
        train_nre((enc, dec), blobs, cfg, LossWeights(1.0, 0.0, 0.0),
                  on_epoch=lambda r, m: records.append(r))
        assert records[0]["term2"] == 0.0 and records[0]["term3"] == 0.0

    def test_determinism_bitwise(self, blobs):
        enc, dec, _ = pretrain_ae(blobs, [12, 8, 4], epochs=2, lr=0.005, seed=0, batch_size=30)
        cfg = TrainConfig(epochs=2, batch_size=30, lr=1e-3, t=2, k=3, seed=5)
        w = LossWeights(0.5, 0.25, 0.25)
        m1 = train_nre((enc, dec), blobs, cfg, w)
        m2 = train_nre((enc, dec), blobs, cfg, w)
        for a, b in zip(m1.encoder.parameters() + m1.decoder.parameters(),
                        m2.encoder.parameters() + m2.decoder.parameters()):
            assert np.array_equal(a, b)

    def test_similarity_encoder_untouched(self, blobs):
        enc, dec, _ = pretrain_ae(blobs, [12, 8, 4], epochs=2, lr=0.005, seed=0, batch_size=30)
        cfg = TrainConfig(epochs=2, batch_size=30, lr=1e-3, t=1, k=3, seed=0)
        model = train_nre((enc, dec), blobs, cfg, LossWeights(0.5, 0.25, 0.25))
        assert model.sim_encoder.fingerprint() == enc.fingerprint()
        # but the trainable encoder moved away from its initialization
        moved = any(not np.array_equal(a, b) for a, b in
                    zip(model.encoder.parameters(), enc.parameters()))
        assert moved

    def test_loss_stays_in_bound(self, blobs):
        enc, dec, _ = pretrain_ae(blobs, [12, 8, 4], epochs=2, lr=0.005, seed=0, batch_size=30)
        t = 2
        cfg = TrainConfig(epochs=3, batch_size=30, lr=1e-3, t=t, k=3, seed=0)
        w = LossWeights(0.5, 0.25, 0.25)
        records = []
        train_nre((enc, dec), blobs, cfg, w, on_epoch=lambda r, m: records.append(r))
        bound = w.lam1 + t * (w.lam2 + w.lam3)
        assert all(0.0 <= r["loss"] <= bound for r in records)

    def test_within_class_similarity_improves(self, blobs):
        # The point of the method at toy scale: relational fine-tuning makes
        # same-class latents more aligned than the plain autoencoder's.
        enc, dec, _ = pretrain_ae(blobs, [12, 10, 5], epochs=30, lr=0.005, seed=0, batch_size=30)
        cfg = TrainConfig(epochs=30, batch_size=30, lr=1e-3, t=1, k=3, seed=0)
        model = train_nre((enc, dec), blobs, cfg, LossWeights(0.5, 0.25, 0.25))
        base = within_class_mean_cosine(enc.forward(blobs.flat()), blobs.labels)
        tuned = within_class_mean_cosine(model.encode(blobs.flat()), blobs.labels)
        assert tuned >= base

    def test_reconstruction_not_ruined(self, blobs):
        # Relational fine-tuning must keep reconstructions within 2x of the
        # plain autoencoder's mean squared error.
        enc, dec, _ = pretrain_ae(blobs, [12, 10, 5], epochs=30, lr=0.005, seed=0, batch_size=30)
        cfg = TrainConfig(epochs=20, batch_size=30, lr=1e-4, t=1, k=3, seed=0)
        model = train_nre((enc, dec), blobs, cfg, LossWeights(0.5, 0.2, 0.3))
        x = blobs.flat()
        base_err = float(np.mean((dec.forward(enc.forward(x)) - x) ** 2))
        tuned_err = float(np.mean((model.reconstruct(x) - x) ** 2))
        assert tuned_err <= 2.0 * base_err
        assert tuned_err >= 0.0


class TestMineEpoch:
    def test_neighbors_at_least_as_similar_as_faraway(self, blobs):
        enc, _, _ = pretrain_ae(blobs, [12, 8, 4], epochs=2, lr=0.005, seed=0, batch_size=30)
        table = encode_all(enc.copy(frozen=True), blobs)
        clusters = kmeans(table, 4, seed=0)
        nbr, far = _mine_epoch(table, clusters, table.latents, t=2, seed=0,
                               refresh_index=0, exclude_self=True)
        lat = table.latents.astype(np.float64)
        norms = np.linalg.norm(lat, axis=1)
        unit = np.divide(lat, norms[:, None], out=np.zeros_like(lat),
                         where=norms[:, None] != 0)
        for i in range(len(table)):
            sims = unit @ unit[i]
            assert sims[nbr[i]].min() >= sims[far[i]].max() - 1e-12
            assert i not in nbr[i] and i not in far[i]

    def test_repair_path_on_adversarial_clusters(self):
        # Force a violation: two angularly interleaved "clusters" where a
        # random faraway draw can beat the same-cluster neighbor, then check
        # the exact-scan repair restores the ordering.
        rng = np.random.default_rng(0)
        angles = np.sort(rng.uniform(0, np.pi / 2, 40))
        lat = np.stack([np.cos(angles), np.sin(angles)], axis=1).astype(np.float32)
        table = LatentTable(latents=lat, dataset_id="arc", fingerprint="f")
        clusters = kmeans(table, 8, seed=1)
        nbr, far = _mine_epoch(table, clusters, table.latents, t=1, seed=0,
                               refresh_index=0, exclude_self=True)
        unit = lat / np.linalg.norm(lat, axis=1, keepdims=True)
        for i in range(40):
            sims = unit.astype(np.float64) @ unit[i].astype(np.float64)
            assert sims[nbr[i]].min() >= sims[far[i]].max() - 1e-12
