import numpy as np
import pytest

from conftest import clean_gradient_instance, fd_gradients, max_rel_error

from ip2cp import embedder as em
from ip2cp.errors import (
    DataError,
    ModelFileError,
    NotAModelFileError,
    NumericsError,
    ShapeError,
)
from ip2cp.patches import LabeledPatch
from ip2cp.raster import BinaryLabel


def tiny_arch():
    return em.ArchConfig(input_size=8, in_channels=3, conv_channels=(4, 6))


def make_patches(rng, count=12, size=8, spread=0.25):
    """Two well-separated synthetic clusters (dark vs bright patches)."""
    out = []
    for i in range(count):
        if i % 2 == 0:
            base = rng.uniform(0.0, spread, (size, size, 3))
            label = BinaryLabel.NO_DAMAGE
        else:
            base = rng.uniform(1.0 - spread, 1.0, (size, size, 3))
            label = BinaryLabel.WITH_DAMAGE
        out.append(LabeledPatch(base, label, (f"p{i}", 0, 0)))
    return out


# ---------------------------------------------------------------------------
# init_net
# ---------------------------------------------------------------------------


def test_init_deterministic_and_zero_biases():
    cfg = em.TrainConfig(seed=3)
    a = em.init_net(cfg, np.random.default_rng(3))
    b = em.init_net(cfg, np.random.default_rng(3))
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert np.array_equal(pa, pb)
    for layer in a.conv_layers:
        assert np.all(layer.bias == 0)
    assert np.all(a.fc_bias == 0)


def test_init_uniform_fan_in_bounds_and_mean():
    # a single conv layer with > 1e5 weights pins the distribution
    arch = em.ArchConfig(input_size=8, in_channels=64, conv_channels=(64,),
                         kernel_size=3)
    net = em.init_net(em.TrainConfig(embed_dim=2), np.random.default_rng(11), arch)
    w = net.conv_layers[0].weights.astype(np.float64)
    assert w.size >= 1e5 * 0.3
    bound = np.sqrt(6.0 / (64 * 9))
    assert np.abs(w).max() <= bound
    # pool weights from several seeds to pass 1e5 draws
    samples = [w.ravel()]
    for seed in (12, 13):
        n = em.init_net(em.TrainConfig(embed_dim=2), np.random.default_rng(seed), arch)
        samples.append(n.conv_layers[0].weights.astype(np.float64).ravel())
    pooled = np.concatenate(samples)
    assert pooled.size >= 1e5
    se = bound / np.sqrt(3.0 * pooled.size)
    assert abs(pooled.mean()) < 3 * se


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def test_forward_zero_input_zero_bias_gives_zero():
    net = em.init_net(em.TrainConfig(embed_dim=3), np.random.default_rng(0), tiny_arch())
    emb = em.forward(net, np.zeros((8, 8, 3)))
    assert np.all(emb.coords == 0.0)


def test_forward_hand_computed_tiny_net():
    # one 1x1 unit kernel, zero bias, 2x2 input of constant 0.5:
    # conv -> 0.5 everywhere, relu -> 0.5, pool -> 0.5, fc [[2],[-3]] + (0.5,-0.25)
    layer = em.ConvLayer(
        np.ones((1, 1, 1, 1), dtype=np.float64),
        np.zeros(1, dtype=np.float64),
        stride=1,
        padding=0,
    )
    net = em.EmbedderNet(
        [layer],
        np.asarray([[2.0], [-3.0]]),
        np.asarray([0.5, -0.25]),
        input_size=2,
        in_channels=1,
    )
    emb = em.forward(net, np.full((2, 2, 1), 0.5))
    assert emb.coords.tolist() == [1.5, -1.75]


def test_forward_output_dimension(rng):
    for dim in (1, 2, 5):
        net = em.init_net(em.TrainConfig(embed_dim=dim), rng, tiny_arch())
        emb = em.forward(net, rng.uniform(0, 1, (8, 8, 3)))
        assert emb.coords.shape == (dim,)


def test_forward_shape_mismatch(rng):
    net = em.init_net(em.TrainConfig(), rng, tiny_arch())
    with pytest.raises(ShapeError):
        em.forward(net, rng.uniform(0, 1, (16, 16, 3)))


def test_embed_matrix_matches_forward(rng):
    net = em.init_net(em.TrainConfig(), rng, tiny_arch())
    arrays = [rng.uniform(0, 1, (8, 8, 3)).astype(np.float32).astype(np.float64)
              for _ in range(5)]
    matrix = em.embed_matrix(net, arrays)
    for row, arr in zip(matrix, arrays):
        assert np.allclose(row, em.forward(net, arr).coords, atol=1e-6)


# ---------------------------------------------------------------------------
# contrastive loss
# ---------------------------------------------------------------------------


def test_loss_anchor_values():
    e = lambda *c: em.Embedding(np.asarray(c, dtype=np.float64))
    assert em.contrastive_loss(e(0.3, -0.7), e(0.3, -0.7), True, 2.0) == 0.0
    assert em.contrastive_loss(e(0.0, 0.0), e(2.0, 1.0), False, 2.0) == 0.0  # d2 = 5
    assert em.contrastive_loss(e(0.0, 0.0), e(1.0, 0.0), False, 2.0) == 1.0
    assert em.contrastive_loss(e(0.0, 0.0), e(1.0, 1.0), True, 2.0) == 2.0


def test_loss_nonnegative_and_zero_conditions(rng):
    for _ in range(200):
        a = em.Embedding(rng.normal(0, 1, 2))
        b = em.Embedding(rng.normal(0, 1, 2))
        same = bool(rng.random() < 0.5)
        margin = float(rng.uniform(0.5, 3.0))
        loss = em.contrastive_loss(a, b, same, margin)
        d2 = float(np.sum((a.coords - b.coords) ** 2))
        assert loss >= 0.0
        if loss == 0.0:
            assert (same and d2 == 0.0) or (not same and d2 >= margin)


def test_loss_symmetric_and_translation_invariant(rng):
    a = em.Embedding(rng.normal(0, 1, 3))
    b = em.Embedding(rng.normal(0, 1, 3))
    shift = rng.normal(0, 1, 3)
    for same in (True, False):
        assert em.contrastive_loss(a, b, same, 2.0) == em.contrastive_loss(b, a, same, 2.0)
        assert em.contrastive_loss(a, b, same, 2.0) == pytest.approx(
            em.contrastive_loss(
                em.Embedding(a.coords + shift), em.Embedding(b.coords + shift), same, 2.0
            ),
            rel=1e-12,
        )


def test_loss_dimension_mismatch():
    with pytest.raises(ShapeError):
        em.contrastive_loss(
            em.Embedding(np.zeros(2)), em.Embedding(np.zeros(3)), True, 2.0
        )


# ---------------------------------------------------------------------------
# loss_and_grad
# ---------------------------------------------------------------------------


def test_grad_zero_when_hinge_inactive(rng):
    net, a, b, _ = clean_gradient_instance(99)
    # push embeddings far apart by scaling fc weights, then check a
    # different-class pair with d2 > margin has exactly zero gradient
    net.fc_weights *= 50.0
    ea, eb = em.forward(net, a), em.forward(net, b)
    d2 = float(np.sum((ea.coords - eb.coords) ** 2))
    assert d2 > 2.0
    loss, grads = em.loss_and_grad(net, (a, b, False), 2.0)
    assert loss == 0.0
    for g in grads:
        assert np.all(g == 0.0)


def test_grad_zero_for_identical_same_pair(rng):
    net, a, _, _ = clean_gradient_instance(5)
    loss, grads = em.loss_and_grad(net, (a, a, True), 2.0)
    assert loss == 0.0
    for g in grads:
        assert np.all(g == 0.0)


def test_grad_matches_finite_differences_sample():
    for seed in range(6):
        net, a, b, same = clean_gradient_instance(seed)
        loss, grads = em.loss_and_grad(net, (a, b, same), 2.0)
        assert loss == pytest.approx(
            em.contrastive_loss(em.forward(net, a), em.forward(net, b), same, 2.0),
            rel=1e-12,
        )
        numeric = fd_gradients(net, a, b, same, 2.0)
        assert max_rel_error(grads, numeric) < 1e-5


def test_grad_symmetric_in_pair_order():
    net, a, b, same = clean_gradient_instance(17)
    loss_ab, _ = em.loss_and_grad(net, (a, b, same), 2.0)
    loss_ba, _ = em.loss_and_grad(net, (b, a, same), 2.0)
    assert loss_ab == pytest.approx(loss_ba, rel=1e-12)


# ---------------------------------------------------------------------------
# sample_pairs
# ---------------------------------------------------------------------------


def test_sample_pairs_balance_and_determinism(rng):
    pool = make_patches(rng, count=10)
    pairs = em.sample_pairs(pool, 4, np.random.default_rng(0))
    assert sum(1 for _, _, s in pairs if s) == 2
    assert sum(1 for _, _, s in pairs if not s) == 2
    again = em.sample_pairs(pool, 4, np.random.default_rng(0))
    assert pairs == again
    for i, j, same in pairs:
        same_label = pool[i].label == pool[j].label
        assert same_label == same


def test_sample_pairs_requires_both_classes(rng):
    single = [p for p in make_patches(rng) if p.label == BinaryLabel.NO_DAMAGE]
    with pytest.raises(DataError):
        em.sample_pairs(single, 4, np.random.default_rng(0))


def test_sample_pairs_uniform_frequency(rng):
    pool = make_patches(rng, count=20)
    counts = np.zeros(len(pool))
    draws = 10_000
    gen = np.random.default_rng(123)
    total_pairs = 0
    while total_pairs < draws:
        for i, j, _ in em.sample_pairs(pool, 50, gen):
            counts[i] += 1
            counts[j] += 1
        total_pairs += 50
    expected = counts.sum() / len(pool)
    se = np.sqrt(expected)
    assert np.all(np.abs(counts - expected) < 3 * se)


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def test_train_zero_epochs_returns_initialized_net(rng):
    pool = make_patches(rng)
    cfg = em.TrainConfig(epochs=0, seed=4)
    net, stats = em.train(pool, cfg, arch=tiny_arch())
    fresh = em.init_net(cfg, np.random.default_rng(4), tiny_arch())
    for a, b in zip(net.parameters(), fresh.parameters()):
        assert np.array_equal(a, b)
    assert stats.epoch_losses == []


def test_train_descends_on_separable_clusters(rng):
    pool = make_patches(rng, count=24)
    cfg = em.TrainConfig(epochs=12, batch_pairs=16, seed=5)
    net, stats = em.train(pool, cfg, arch=tiny_arch())
    assert stats.epoch_losses[-1] < stats.epoch_losses[0]
    assert len(stats.epoch_losses) == 12
    assert all(pos + neg == 2 * 16 for pos, neg in stats.pair_counts)


def test_train_deterministic(rng):
    pool = make_patches(rng, count=10)
    cfg = em.TrainConfig(epochs=3, batch_pairs=8, seed=9)
    net1, stats1 = em.train(pool, cfg, arch=tiny_arch())
    net2, stats2 = em.train(pool, cfg, arch=tiny_arch())
    for a, b in zip(net1.parameters(), net2.parameters()):
        assert np.array_equal(a, b)
    assert stats1.epoch_losses == stats2.epoch_losses


def test_train_with_augmentation_runs_and_is_deterministic(rng):
    pool = make_patches(rng, count=10)
    cfg = em.TrainConfig(epochs=2, batch_pairs=8, seed=2)
    net1, _ = em.train(pool, cfg, arch=tiny_arch(), augment_online=True)
    net2, _ = em.train(pool, cfg, arch=tiny_arch(), augment_online=True)
    for a, b in zip(net1.parameters(), net2.parameters()):
        assert np.array_equal(a, b)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_aborts_on_non_finite_loss(rng):
    pool = make_patches(rng, count=10)
    cfg = em.TrainConfig(epochs=5, batch_pairs=8, seed=1, learning_rate=1e30)
    with pytest.raises(NumericsError, match=r"epoch \d+, batch \d+"):
        em.train(pool, cfg, arch=tiny_arch())


def test_train_requires_both_classes(rng):
    pool = [p for p in make_patches(rng) if p.label == BinaryLabel.WITH_DAMAGE]
    with pytest.raises(DataError):
        em.train(pool, em.TrainConfig(epochs=1), arch=tiny_arch())


def test_train_stats_csv(rng):
    pool = make_patches(rng)
    net, stats = em.train(pool, em.TrainConfig(epochs=2, batch_pairs=4, seed=0),
                          arch=tiny_arch())
    lines = stats.to_csv().splitlines()
    assert lines[0] == "epoch,mean_loss,pos_pairs,neg_pairs"
    assert len(lines) == 3


# ---------------------------------------------------------------------------
# embed_all
# ---------------------------------------------------------------------------


def test_embed_all_empty_and_singleton(rng):
    net = em.init_net(em.TrainConfig(), rng, tiny_arch())
    assert em.embed_all(net, []) == []
    patch = make_patches(rng, count=2)[0]
    single = em.embed_all(net, [patch])
    assert len(single) == 1
    assert np.array_equal(single[0].coords, em.forward(net, patch.pixels).coords)


def test_embed_all_is_elementwise(rng):
    net = em.init_net(em.TrainConfig(), rng, tiny_arch())
    pool = make_patches(rng, count=6)
    out = em.embed_all(net, pool)
    perm = [3, 1, 5, 0, 2, 4]
    permuted = em.embed_all(net, [pool[i] for i in perm])
    for k, i in enumerate(perm):
        assert np.array_equal(permuted[k].coords, out[i].coords)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def test_save_load_round_trip_bit_exact(tmp_path, rng):
    net = em.init_net(em.TrainConfig(embed_dim=4, seed=8), rng, tiny_arch())
    path = tmp_path / "model.bin"
    em.save_net(net, path)
    loaded = em.load_net(path)
    assert loaded.input_size == net.input_size
    assert loaded.in_channels == net.in_channels
    assert loaded.embed_dim == net.embed_dim
    for a, b in zip(net.parameters(), loaded.parameters()):
        assert a.dtype == b.dtype == np.float32
        assert np.array_equal(a.view(np.uint32), b.view(np.uint32))
    em.save_net(loaded, tmp_path / "again.bin")
    assert path.read_bytes() == (tmp_path / "again.bin").read_bytes()


def test_load_rejects_bad_magic(tmp_path):
    (tmp_path / "bad.bin").write_bytes(b"NOTMODEL" + b"\x00" * 64)
    with pytest.raises(NotAModelFileError, match="not a model file"):
        em.load_net(tmp_path / "bad.bin")


def test_load_rejects_wrong_version(tmp_path, rng):
    net = em.init_net(em.TrainConfig(), rng, tiny_arch())
    path = tmp_path / "model.bin"
    em.save_net(net, path)
    data = bytearray(path.read_bytes())
    data[8] = 99  # version field follows the 8-byte magic
    path.write_bytes(bytes(data))
    with pytest.raises(ModelFileError, match="version"):
        em.load_net(path)


def test_load_rejects_truncation_with_byte_counts(tmp_path, rng):
    net = em.init_net(em.TrainConfig(), rng, tiny_arch())
    path = tmp_path / "model.bin"
    em.save_net(net, path)
    full = path.read_bytes()
    path.write_bytes(full[: len(full) // 2])
    with pytest.raises(ModelFileError, match=r"expected \d+ bytes.*got \d+"):
        em.load_net(path)


def test_load_rejects_inconsistent_shapes(tmp_path, rng):
    net = em.init_net(em.TrainConfig(), rng, tiny_arch())
    # fc sized for the wrong flat dimension
    broken = em.EmbedderNet.__new__(em.EmbedderNet)
    broken.conv_layers = net.conv_layers
    broken.fc_weights = np.zeros((2, 7), dtype=np.float32)
    broken.fc_bias = np.zeros(2, dtype=np.float32)
    broken.input_size = net.input_size
    broken.in_channels = net.in_channels
    path = tmp_path / "model.bin"
    em.save_net(broken, path)
    with pytest.raises(ModelFileError, match="inconsistent"):
        em.load_net(path)


def test_net_validation_rejects_bad_compositions():
    with pytest.raises(ShapeError):
        em.EmbedderNet(
            [em.ConvLayer(np.zeros((4, 3, 3, 3), dtype=np.float32),
                          np.zeros(4, dtype=np.float32), 1, 1)],
            np.zeros((2, 99), dtype=np.float32),
            np.zeros(2, dtype=np.float32),
            input_size=8,
            in_channels=3,
        )
    with pytest.raises(DataError):
        em.EmbedderNet(
            [em.ConvLayer(np.full((4, 3, 3, 3), np.nan, dtype=np.float32),
                          np.zeros(4, dtype=np.float32), 1, 1)],
            np.zeros((2, 64), dtype=np.float32),
            np.zeros(2, dtype=np.float32),
            input_size=8,
            in_channels=3,
        )
