import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from fsaudit.data import (
    DatasetSplit, FaceImage, IdentityRecord, as_pool, check_feasible, image_index, load_dataset, preprocess,
    sample_episode, split,
)
from fsaudit.errors import ConfigurationError, InfeasibleSampleError, SplitError
from fsaudit.synthetic import SyntheticSpec, make_corpus, write_corpus


def _records(n_users, n_images, size=4, seed=0):
    rng = np.random.default_rng(seed)
    return [
        IdentityRecord(f"u{u:03d}", [
            FaceImage(rng.random((3, size, size), dtype=np.float32), f"u{u:03d}", f"{i:03d}.png")
            for i in range(n_images)
        ])
        for u in range(n_users)
    ]


# --- loading ----------------------------------------------------------------

def test_load_three_users_four_images(tmp_path):
    write_corpus(make_corpus(SyntheticSpec(n_users=3, n_images=4, size=12)), tmp_path)
    recs = load_dataset(tmp_path)
    assert [r.user_id for r in recs] == ["id0000", "id0001", "id0002"]
    assert all(len(r) == 4 for r in recs)
    assert [im.image_id for im in recs[0].images] == sorted(im.image_id for im in recs[0].images)
    px = recs[0].images[0].pixels
    assert px.shape == (3, 12, 12) and px.min() >= 0 and px.max() <= 1


def test_load_empty_root(tmp_path):
    assert load_dataset(tmp_path) == []


def test_load_missing_root(tmp_path):
    with pytest.raises(ConfigurationError):
        load_dataset(tmp_path / "nope")


def test_load_skips_corrupt_file_with_one_warning(tmp_path):
    write_corpus(make_corpus(SyntheticSpec(n_users=1, n_images=10, size=12)), tmp_path)
    victim = sorted((tmp_path / "id0000").iterdir())[3]
    victim.write_bytes(victim.read_bytes()[:20])  # truncated PNG
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        recs = load_dataset(tmp_path)
    assert len(recs[0]) == 9
    assert len([w for w in caught if "undecodable" in str(w.message)]) == 1


def test_load_decodes_rgb_from_grayscale(tmp_path):
    d = tmp_path / "alice"
    d.mkdir()
    Image.fromarray(np.full((5, 5), 255, np.uint8), mode="L").save(d / "a.png")
    (im,) = load_dataset(tmp_path)[0].images
    assert im.pixels.shape == (3, 5, 5)
    assert np.allclose(im.pixels, 1.0)


# --- preprocessing ------------------------------------------------------------

def test_preprocess_drops_samples_and_resizes():
    recs = _records(3, 6, size=8)
    recs[1] = IdentityRecord(recs[1].user_id, recs[1].images[:3])
    out = preprocess(recs, min_images=5, keep=4, size=6, seed=0)
    assert [r.user_id for r in out] == ["u000", "u002"]
    assert all(len(r) == 4 for r in out)
    assert all(im.pixels.shape == (3, 6, 6) for r in out for im in r.images)
    assert all(0 <= im.pixels.min() and im.pixels.max() <= 1 for r in out for im in r.images)


def test_preprocess_keep_equal_to_count_is_identity_except_resize():
    recs = _records(2, 5, size=6)
    out = preprocess(recs, min_images=5, keep=5, size=6, seed=3)
    for a, b in zip(recs, out):
        assert [im.image_id for im in a.images] == [im.image_id for im in b.images]
        assert all(np.array_equal(x.pixels, y.pixels) for x, y in zip(a.images, b.images))


def test_preprocess_is_seeded():
    recs = _records(4, 10)
    ids = lambda out: [sorted(im.image_id for im in r.images) for r in out]  # noqa: E731
    assert ids(preprocess(recs, 10, 5, 4, seed=9)) == ids(preprocess(recs, 10, 5, 4, seed=9))


def test_preprocess_rejects_keep_above_min():
    with pytest.raises(ConfigurationError):
        preprocess(_records(1, 3), min_images=3, keep=4)


def test_table1_umdfaces_counts():
    # U=200 users x I=100 images -> 4,000 shadow-training images per half
    recs = [IdentityRecord(f"u{u}", [FaceImage(np.zeros((3, 1, 1), np.float32), f"u{u}", str(i)) for i in range(100)])
            for u in range(200)]
    sp = split(recs, seed=0)
    for h in (sp.target, sp.aux):
        assert sum(len(v) for v in h.train_ids.values()) == 4000
        assert len(h.mem_users) == 80 and len(h.nonmem_users) == 20


# --- splitting ------------------------------------------------------------

def check_split_invariants(sp: DatasetSplit, recs) -> None:
    t, a = set(sp.target.users), set(sp.aux.users)
    assert not t & a
    assert t | a == {r.user_id for r in recs}
    by_user = {r.user_id: {im.image_id for im in r.images} for r in recs}
    for h in (sp.target, sp.aux):
        assert not set(h.mem_users) & set(h.nonmem_users)
        assert set(h.train_ids) == set(h.nontrain_ids) == set(h.mem_users)
        assert set(h.nonmem_ids) == set(h.nonmem_users)
        n_half = len(h.users)
        assert len(h.mem_users) == int(np.floor(0.8 * n_half + 1e-9))
        for u in h.mem_users:
            tr, nt = set(h.train_ids[u]), set(h.nontrain_ids[u])
            assert not tr & nt
            assert tr | nt == by_user[u]
            assert len(tr) == len(by_user[u]) // 2
        for u in h.nonmem_users:
            assert set(h.nonmem_ids[u]) == by_user[u]
    assert len(sp.target.users) == len(recs) // 2


def test_split_small_arithmetic():
    recs = _records(10, 4)
    sp = split(recs, seed=1)
    assert len(sp.target.users) == 5
    assert len(sp.target.mem_users) == 4 and len(sp.target.nonmem_users) == 1
    for u in sp.target.mem_users:
        assert len(sp.target.train_ids[u]) == 2 and len(sp.target.nontrain_ids[u]) == 2
    check_split_invariants(sp, recs)


@settings(max_examples=30, deadline=None)
@given(n_users=st.integers(10, 40), n_images=st.integers(2, 9), seed=st.integers(0, 2**31))
def test_split_invariants_property(n_users, n_images, seed):
    recs = _records(n_users, n_images, size=1)
    check_split_invariants(split(recs, seed), recs)


def test_split_count_algebra():
    recs = _records(30, 10, size=1)
    sp = split(recs, seed=4)
    for h in (sp.target, sp.aux):
        n = sum(len(h.train_ids[u]) + len(h.nontrain_ids[u]) for u in h.mem_users)
        assert abs(n - 0.8 * len(h.users) * 10) <= len(h.users)


def test_split_too_few_users_names_cell():
    with pytest.raises(SplitError, match="at least 10"):
        split(_records(9, 4), seed=0)


def test_split_deterministic_and_manifest_round_trip(tmp_path):
    recs = _records(20, 6, size=1)
    a, b = split(recs, 5), split(recs, 5)
    assert a.to_manifest() == b.to_manifest()
    assert split(recs, 6).to_manifest() != a.to_manifest()
    path = tmp_path / "split.tsv"
    a.save(path)
    back = DatasetSplit.load(path)
    assert back.to_manifest() == a.to_manifest()
    assert back.target.mem_users == a.target.mem_users
    line = a.manifest_lines()[0].split("\t")
    assert len(line) == 4 and line[0] in ("target", "aux")


def test_role_of_and_pools(tiny_split, tiny_index):
    h = tiny_split.target
    for u in h.mem_users:
        assert h.role_of(u) == "member"
    for u in h.nonmem_users:
        assert h.role_of(u) == "nonmember"
    with pytest.raises(KeyError):
        h.role_of("nobody")
    train, audit = h.train_pool(tiny_index), h.auditor_pool(tiny_index)
    for u, ims in train.items():
        assert not {im.image_id for im in ims} & {im.image_id for im in audit[u]}


# --- episodes -------------------------------------------------------------

def check_episode(ep, k, shots, q):
    assert ep.k == k and len(set(ep.user_ids)) == k
    for u, sup, qs in zip(ep.user_ids, ep.support, ep.queries):
        assert len(sup) == shots and len(qs) == q
        assert all(im.user_id == u for im in sup + qs)
        assert not {im.image_id for im in sup} & {im.image_id for im in qs}
        assert len({im.image_id for im in sup + qs}) == shots + q


def test_forced_single_pair():
    pool = as_pool(_records(1, 2))
    ep = sample_episode(pool, 1, 1, 1, seed=0)
    assert {ep.support[0][0].image_id, ep.queries[0][0].image_id} == {"000.png", "001.png"}


def test_default_episode_shape():
    ep = sample_episode(as_pool(_records(8, 10)), 5, 5, 5, seed=0)
    check_episode(ep, 5, 5, 5)
    assert sum(map(len, ep.support)) == 25 and sum(map(len, ep.queries)) == 25


def test_thousand_episodes_cover_all_subsets():
    pool = as_pool(_records(6, 4, size=1))
    rng = np.random.default_rng(0)
    seen = set()
    for _ in range(1000):
        ep = sample_episode(pool, 5, 2, 2, rng)
        check_episode(ep, 5, 2, 2)
        seen.add(frozenset(ep.user_ids))
    assert seen == {frozenset(c) for c in itertools.combinations(sorted(pool), 5)}


def test_infeasible_names_limiting_user():
    pool = as_pool(_records(3, 5))
    pool["u001"] = pool["u001"][:2]
    with pytest.raises(InfeasibleSampleError, match="u001"):
        sample_episode(pool, 3, 2, 2, seed=0)
    with pytest.raises(InfeasibleSampleError):
        check_feasible(pool, 4, 1)


def test_image_index_keys(tiny_records):
    idx = image_index(tiny_records)
    assert len(idx) == sum(len(r) for r in tiny_records)
    im = tiny_records[2].images[3]
    assert idx[im.key] is im
