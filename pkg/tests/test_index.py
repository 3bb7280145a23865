import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lsfnet.errors import DataError, FormatError
from lsfnet.index import (
    VOTE_EPS,
    Candidate,
    build_index,
    classify,
    load_index,
    make_family,
    query_knn,
    save_index,
    soft_vote,
)


def exhaustive_bucket(matrix, members, ids, y, k):
    """Project with explicit dot products, sort every member by (distance, id)."""
    a = matrix.tolist()
    qy = [math.fsum(ai * yi for ai, yi in zip(row, y)) for row in a]
    scored = []
    for vec, vid in zip(members, ids):
        px = [math.fsum(ai * xi for ai, xi in zip(row, vec)) for row in a]
        scored.append((math.sqrt(math.fsum((p - q) ** 2 for p, q in zip(px, qy))), vid))
    return sorted(scored)[:k]


def test_family_deterministic():
    np.testing.assert_array_equal(make_family(5, 8, 3).matrix, make_family(5, 8, 3).matrix)
    assert not np.array_equal(make_family(5, 8, 3).matrix, make_family(5, 8, 4).matrix)


def test_family_zero_vector():
    np.testing.assert_array_equal(make_family(7, 4, 0)(np.zeros(4)), np.zeros(7))


def test_family_shape():
    fam = make_family(50, 64, 1)
    assert fam.matrix.shape == (50, 64)
    assert np.all(np.linalg.norm(fam.matrix, axis=1) > 0)


def test_family_rejects_empty():
    with pytest.raises(DataError):
        make_family(0, 4, 0)


def test_one_vector_per_class():
    idx = build_index(np.eye(3), [0, 1, 2], n_hashes=4)
    assert idx.bucket_sizes() == [1, 1, 1]
    assert idx.n_classes == 3


def test_duplicates_are_kept(rng):
    v = rng.normal(size=5)
    idx = build_index(np.vstack([v, v, rng.normal(size=5)]), [0, 0, 1], n_hashes=3)
    p = idx.buckets[0].projections
    assert idx.bucket_sizes() == [2, 1]
    np.testing.assert_array_equal(p[0], p[1])


def test_bucket_sizes_match_counts(rng):
    y = rng.integers(0, 6, 200)
    idx = build_index(rng.normal(size=(200, 16)), y, n_hashes=10, seed=9)
    assert idx.bucket_sizes() == np.bincount(y, minlength=6).tolist()
    for c, b in enumerate(idx.buckets):
        assert b.family.seed == 9 + c
        np.testing.assert_array_equal(b.family.matrix, make_family(10, 16, 9 + c).matrix)


def test_empty_class_rejected(rng):
    with pytest.raises(DataError, match="class 1"):
        build_index(rng.normal(size=(4, 3)), [0, 0, 2, 2], n_hashes=2)


def test_k_clipped_to_bucket_size(rng):
    x = rng.normal(size=(4, 6))
    idx = build_index(x, [0, 1, 1, 1], n_hashes=5, video_ids=list("abcd"))
    cands = query_knn(idx, rng.normal(size=6), k=5)
    assert [c.video_id for c in cands if c.label == 0] == ["a"]
    assert len(cands) == 4


def test_exact_match_has_zero_distance(rng):
    x = rng.normal(size=(30, 8))
    y = rng.integers(0, 3, 30)
    y[:3] = [0, 1, 2]
    idx = build_index(x, y, n_hashes=6, video_ids=[f"v{i:02d}" for i in range(30)])
    for i in range(30):
        cands = [c for c in query_knn(idx, x[i], k=3) if c.label == y[i]]
        assert cands[0].distance == 0.0
        assert f"v{i:02d}" in {c.video_id for c in cands if c.distance == 0.0}


@pytest.mark.parametrize("n_hashes", [10, 30, 50])
@pytest.mark.parametrize("k", [1, 5, 50])
def test_knn_matches_exhaustive_sort(rng, n_hashes, k):
    m = int(rng.integers(20, 201))
    x = rng.normal(size=(m, 12))
    y = rng.integers(0, 4, m)
    y[:4] = np.arange(4)
    ids = [f"id{i:03d}" for i in range(m)]
    idx = build_index(x, y, n_hashes=n_hashes, seed=5, video_ids=ids)
    query = rng.normal(size=12)
    got = query_knn(idx, query, k)
    for c in range(4):
        members = np.flatnonzero(y == c)
        want = exhaustive_bucket(idx.buckets[c].family.matrix, x[members], [ids[i] for i in members], query, k)
        mine = [(cand.distance, cand.video_id) for cand in got if cand.label == c]
        assert [v for _, v in mine] == [v for _, v in want]
        np.testing.assert_allclose([d for d, _ in mine], [d for d, _ in want], rtol=1e-12, atol=1e-12)


def test_distance_ties_broken_by_video_id():
    x = np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
    idx = build_index(x, [0, 0, 0], n_hashes=3, video_ids=["z", "a", "m"], n_classes=1)
    assert [c.video_id for c in query_knn(idx, np.zeros(2), k=3)] == ["a", "m", "z"]


def test_query_width_mismatch(rng):
    idx = build_index(rng.normal(size=(4, 3)), [0, 1, 0, 1], n_hashes=2)
    with pytest.raises(DataError):
        query_knn(idx, np.zeros(4), 1)


def test_vote_one_hot():
    vote = soft_vote([Candidate("a", 3, 0.5), Candidate("b", 3, 2.0)], 5)
    np.testing.assert_array_equal(vote.confidences, [0, 0, 0, 1, 0])
    assert vote.predicted == 3


def test_vote_tie_goes_to_lower_class():
    vote = soft_vote([Candidate("a", 1, 2.0), Candidate("b", 0, 2.0)], 2)
    np.testing.assert_allclose(vote.confidences, [0.5, 0.5], atol=1e-15)
    assert vote.predicted == 0


def test_vote_inverse_distance_weights():
    vote = soft_vote([Candidate("a", 0, 1.0), Candidate("b", 1, 3.0)], 2)
    w0, w1 = 1 / (1 + VOTE_EPS), 1 / (3 + VOTE_EPS)
    np.testing.assert_allclose(vote.confidences, [w0 / (w0 + w1), w1 / (w0 + w1)], rtol=1e-15)
    np.testing.assert_allclose(vote.confidences, [0.75, 0.25], atol=1e-8)
    assert vote.predicted == 0


def test_vote_rejects_empty():
    with pytest.raises(DataError):
        soft_vote([], 3)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.floats(0, 1e3)), min_size=1, max_size=40),
       st.permutations(range(5)))
def test_vote_confidences_normalized_and_equivariant(cands, perm):
    base = soft_vote([Candidate(str(i), c, d) for i, (c, d) in enumerate(cands)], 5)
    assert np.all(base.confidences >= 0)
    assert abs(base.confidences.sum() - 1.0) < 1e-9
    relabeled = soft_vote([Candidate(str(i), perm[c], d) for i, (c, d) in enumerate(cands)], 5)
    np.testing.assert_allclose(relabeled.confidences[list(perm)], base.confidences, rtol=1e-12, atol=1e-15)


def test_classify_composition_oracle(rng):
    x = rng.normal(size=(20, 6))
    y = np.arange(20) % 3
    ids = [f"t{i}" for i in range(20)]
    idx = build_index(x, y, n_hashes=8, seed=2, video_ids=ids)
    for _ in range(10):
        q = rng.normal(size=6)
        weights = [0.0, 0.0, 0.0]
        for c in range(3):
            members = np.flatnonzero(y == c)
            for d, _ in exhaustive_bucket(idx.buckets[c].family.matrix, x[members], [ids[i] for i in members], q, 4):
                weights[c] += 1 / (d + VOTE_EPS)
        total = math.fsum(weights)
        vote = classify(idx, q, 4)
        np.testing.assert_allclose(vote.confidences, [w / total for w in weights], rtol=1e-10)
        assert vote.predicted == int(np.argmax(weights))


def test_classify_deterministic(rng):
    idx = build_index(rng.normal(size=(30, 5)), np.arange(30) % 3, n_hashes=7)
    q = rng.normal(size=5)
    a, b = classify(idx, q, 5), classify(idx, q, 5)
    assert a.confidences.tobytes() == b.confidences.tobytes() and a.predicted == b.predicted


def test_agreement_with_exact_1nn(rng):
    dim, classes, sigma = 64, 6, 1.0
    centres = rng.normal(size=(classes, dim))
    # push centroids to >= 10 sigma apart
    centres *= 10 * sigma / min(np.linalg.norm(centres[i] - centres[j])
                                for i in range(classes) for j in range(i + 1, classes))
    centres *= 1.01
    ytr = np.arange(300) % classes
    xtr = centres[ytr] + sigma * rng.normal(size=(300, dim)) / np.sqrt(dim)
    yte = rng.integers(0, classes, 200)
    xte = centres[yte] + sigma * rng.normal(size=(200, dim)) / np.sqrt(dim)
    idx = build_index(xtr, ytr, n_hashes=50, seed=11)
    nn = ytr[np.argmin(((xte[:, None, :] - xtr[None]) ** 2).sum(-1), axis=1)]
    pred = np.array([classify(idx, q, 64).predicted for q in xte])
    assert np.mean(pred == nn) >= 0.9


def test_index_file_round_trip(tmp_path, rng):
    x = rng.normal(size=(25, 7))
    y = np.arange(25) % 3
    idx = build_index(x, y, n_hashes=5, seed=4, video_ids=[f"vid-{i}" for i in range(25)],
                      class_names=["a", "b", "ç"], k_default=9)
    save_index(idx, tmp_path / "i.lsfi")
    back = load_index(tmp_path / "i.lsfi")
    assert back.class_names == ("a", "b", "ç")
    assert back.k_default == 9 and back.seed == 4 and back.dim == 7
    q = rng.normal(size=7)
    assert query_knn(back, q) == query_knn(idx, q)
    for b1, b2 in zip(back.buckets, idx.buckets):
        assert b1.projections.tobytes() == b2.projections.tobytes()
        assert b1.family.matrix.tobytes() == b2.family.matrix.tobytes()


def test_index_file_rejects_corruption(tmp_path, rng):
    idx = build_index(rng.normal(size=(6, 3)), [0, 1, 0, 1, 0, 1], n_hashes=2)
    save_index(idx, tmp_path / "i.lsfi")
    raw = (tmp_path / "i.lsfi").read_bytes()
    (tmp_path / "i.lsfi").write_bytes(b"LSFD" + raw[4:])
    with pytest.raises(FormatError, match="expected 'LSFI'"):
        load_index(tmp_path / "i.lsfi")
    (tmp_path / "i.lsfi").write_bytes(raw[:-3])
    with pytest.raises(FormatError, match="truncated"):
        load_index(tmp_path / "i.lsfi")
