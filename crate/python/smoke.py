"""End-to-end smoke test for the ssgan_py extension module.

Build it first, e.g. `maturin develop -m crates/py/Cargo.toml`, or
`cargo build --release -p ssgan-py --features extension-module` and copy
`target/release/libssgan_py.so` to `ssgan_py.so` somewhere on PYTHONPATH.
"""

import tempfile

import numpy as np

import ssgan_py as ss


def check_rotation():
    images, labels = ss.synthetic_glyphs(8, size=8, seed=1)
    assert images.shape == (8, 3, 8, 8) and images.dtype == np.float32
    assert labels.shape == (8,) and labels.dtype == np.int64
    assert images.min() >= -1.0 and images.max() <= 1.0

    x = images[0]
    assert np.array_equal(ss.rotate(x, 4), x)
    assert np.array_equal(ss.rotate(ss.rotate(x, 1), 3), x)
    assert np.array_equal(ss.rotate(x, 1), np.rot90(x, 1, axes=(1, 2)))

    rot, rot_labels = ss.rotation_batch(images)
    assert rot.shape == (8, 3, 8, 8)
    assert rot_labels.tolist() == [0, 0, 1, 1, 2, 2, 3, 3]
    assert np.array_equal(rot[2], ss.rotate(images[0], 1))


def check_losses():
    rng = np.random.default_rng(0)
    real = rng.normal(size=8).astype(np.float32)
    fake = rng.normal(size=8).astype(np.float32)
    logits = rng.normal(size=(8, 4)).astype(np.float32)
    labels = np.arange(8, dtype=np.int64) % 4

    plain = ss.discriminator_loss(real, fake, beta=0.0)
    assert plain == ss.discriminator_loss(real, fake, logits, labels, beta=0.0)
    term = ss.rotation_term(logits, labels)
    with_rot = ss.discriminator_loss(real, fake, logits, labels, beta=1.0)
    assert abs(with_rot - (plain - term)) < 1e-5

    g = ss.generator_loss(fake, alpha=0.0)
    assert abs(g - np.mean(np.log1p(np.exp(-fake.astype(np.float64))))) < 1e-5
    assert ss.generator_loss(fake, loss="hinge", alpha=0.0) == np.float32(-fake.mean())


def check_fid():
    rng = np.random.default_rng(1)
    feats = rng.normal(size=(200, 5))
    mu, sigma = ss.gaussian_stats(feats)
    assert np.allclose(mu, feats.mean(0)) and np.allclose(sigma, np.cov(feats, rowvar=False))
    assert abs(ss.frechet_distance(mu, sigma, mu, sigma)) < 1e-8
    shift = np.arange(5, dtype=np.float64)
    assert abs(ss.frechet_distance(mu, sigma, mu + shift, sigma) - shift @ shift) < 1e-8


TINY = [
    ("total_steps", "4"),
    ("batch_size", "8"),
    ("eval_interval", "2"),
    ("checkpoint_interval", "2"),
    ("sample_interval", "0"),
    ("arch.image_size", "8"),
    ("arch.g_width", "8"),
    ("arch.d_width", "8"),
    ("arch.latent_dim", "8"),
    ("dataset", '{ kind = "synthetic", eval_n = 40, shapes = { n = 64, size = 8 } }'),
    ("fid.samples", "16"),
    ("fid.extractor_train.image_size", "8"),
    ("fid.extractor_train.widths", "[4, 4, 4]"),
    ("fid.extractor_train.steps", "3"),
]


def check_training():
    cfg = ss.Config()
    for key, value in TINY:
        cfg = cfg.set(key, value)
    assert cfg.variant == "ssgan"
    with tempfile.TemporaryDirectory() as root:
        a = ss.train(cfg, f"{root}/a")
        b = ss.train(cfg, f"{root}/b")
        assert a["status"]["status"] == "completed", a["status"]
        assert a["final_step"] == 4 and a["config_hash"] == cfg.hash
        assert [r["fid"] for r in a["fid"]] == [r["fid"] for r in b["fid"]]

        images, _ = ss.synthetic_glyphs(4, size=8, seed=2)
        logits = ss.discriminate(f"{root}/a", images)
        assert logits.shape[0] == 4 and np.all(np.isfinite(logits))

        rows = ss.probe([f"{root}/a", f"{root}/b"], probe_toml="epochs = 3\ndecay_every = 2")
        assert sorted(r["block"] for r in rows) == ["block0", "block1", "block2", "block3"]
        assert all(0.0 <= r["top1_mean"] <= 1.0 and len(r["seeds"]) == 2 for r in rows)


def check_forgetting():
    toml = "\n".join(
        [
            "batch_size = 8",
            "eval_interval = 2",
            "eval_per_class = 4",
            "post_switch_window = 2",
            "[schedule]",
            "num_classes = 2",
            "steps_per_task = 4",
            "[arch]",
            "image_size = 8",
            "d_width = 8",
            "[dataset]",
            'kind = "synthetic"',
            "eval_n = 40",
            "[dataset.shapes]",
            "n = 80",
            "size = 8",
        ]
    )
    trace = ss.forgetting("with_selfsup", toml, seed=0)
    assert trace["variant"] == "with_selfsup"
    assert [r["step"] for r in trace["rows"]] == [0, 2, 4, 6, 8]
    assert trace["switches"] == [4, 8]


if __name__ == "__main__":
    for check in (check_rotation, check_losses, check_fid, check_training, check_forgetting):
        check()
        print(f"{check.__name__}: ok")
    print("smoke: PASS")
