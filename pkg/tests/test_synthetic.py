import numpy as np

from fsaudit.synthetic import SyntheticSpec, make_corpus


def test_corpus_shape_and_range():
    recs = make_corpus(SyntheticSpec(n_users=5, n_images=3, size=20, seed=1))
    assert [r.user_id for r in recs] == [f"id{u:04d}" for u in range(5)]
    for r in recs:
        assert len(r) == 3
        for im in r.images:
            assert im.pixels.shape == (3, 20, 20) and im.pixels.dtype == np.float32
            assert 0.0 <= im.pixels.min() and im.pixels.max() <= 1.0


def test_corpus_seeded():
    a = make_corpus(SyntheticSpec(n_users=3, n_images=2, size=12, seed=4))
    b = make_corpus(SyntheticSpec(n_users=3, n_images=2, size=12, seed=4))
    c = make_corpus(SyntheticSpec(n_users=3, n_images=2, size=12, seed=5))
    assert all(np.array_equal(x.pixels, y.pixels) for r, s in zip(a, b) for x, y in zip(r.images, s.images))
    assert not np.array_equal(a[0].images[0].pixels, c[0].images[0].pixels)


def test_same_identity_closer_than_other_identities():
    recs = make_corpus(SyntheticSpec(n_users=10, n_images=8, size=24, seed=0))
    flat = [np.stack([im.pixels.ravel() for im in r.images]) for r in recs]
    within = np.mean([np.mean((f[:, None] - f[None]) ** 2) for f in flat])
    across = np.mean([np.mean((flat[i][:, None] - flat[j][None]) ** 2) for i in range(10) for j in range(10) if i != j])
    assert within < across


def test_spec_dict_round_trip():
    s = SyntheticSpec(n_users=7, variability=(0.5, 1.0))
    assert SyntheticSpec.from_dict(s.to_dict()) == s
