import hashlib
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fairbios.errors import BadConfig
from fairbios.featurize import (
    FeatureVector,
    FeaturizerConfig,
    featurize,
    featurize_batch,
    read_triplets,
    stable_hash,
    to_csr,
    write_triplets,
)

words = st.lists(st.text(alphabet="abcdefghij", min_size=1, max_size=6), max_size=30).map(" ".join)


def hash_oracle(token, seed):
    h = hashlib.blake2b(token.encode(), digest_size=8, key=seed.to_bytes(8, "little"))
    return int.from_bytes(h.digest(), "little")


def test_hash_matches_blake2b_definition():
    for tok in ("a", "nurse", "a b", "über"):
        for seed in (0, 1, 2 ** 63):
            assert stable_hash(tok, seed) == hash_oracle(tok, seed)


def test_empty_text_is_zero_vector():
    v = featurize("", FeaturizerConfig())
    assert v.nnz == 0 and v.dim == 2 ** 18


def test_unigram_counts():
    cfg = FeaturizerConfig(dim=2 ** 18, ngram_max=1, normalize=False, hash_seed=5)
    v = featurize("a b a", cfg)
    ia, ib = hash_oracle("a", 5) % cfg.dim, hash_oracle("b", 5) % cfg.dim
    expected = {ia: 2.0, ib: 1.0} if ia != ib else {ia: 3.0}
    assert dict(v.entries()) == expected


def test_bigrams_included():
    cfg = FeaturizerConfig(dim=2 ** 20, ngram_max=2, normalize=False)
    v = featurize("x y z", cfg)
    expected = sorted(hash_oracle(g, 0) % cfg.dim for g in ("x", "y", "z", "x y", "y z"))
    assert v.indices.tolist() == expected and v.values.tolist() == [1.0] * 5


@given(words)
def test_invariants(text):
    cfg = FeaturizerConfig(dim=2 ** 10, ngram_max=3)
    v = featurize(text, cfg)
    assert np.all(np.diff(v.indices) > 0) and np.all(v.indices < cfg.dim)
    assert np.all(v.values >= 0)
    if v.nnz:
        assert abs(np.sum(v.values ** 2) - 1.0) <= 1e-9


def test_batch_elementwise_and_order():
    cfg = FeaturizerConfig()
    assert featurize_batch([], cfg) == []
    assert featurize_batch(["x", "y"], cfg) == [featurize("x", cfg), featurize("y", cfg)]


def test_batch_parallel_equals_serial():
    rng = np.random.default_rng(0)
    vocab = [f"w{chr(97 + i % 26)}{chr(97 + i // 26 % 26)}" for i in range(500)]
    texts = [" ".join(rng.choice(vocab, size=rng.integers(0, 20))) for _ in range(10_000)]
    cfg = FeaturizerConfig(dim=2 ** 16)
    serial = featurize_batch(texts, cfg)
    parallel = featurize_batch(texts, cfg, workers=2)
    assert len(serial) == len(parallel)
    assert all(a == b for a, b in zip(serial, parallel))


@settings(max_examples=25)
@given(st.lists(words, max_size=8), st.randoms())
def test_batch_permutation_equivariance(texts, rnd):
    cfg = FeaturizerConfig(dim=2 ** 12)
    order = list(range(len(texts)))
    rnd.shuffle(order)
    out = featurize_batch(texts, cfg)
    shuffled = featurize_batch([texts[i] for i in order], cfg)
    assert all(shuffled[k] == out[i] for k, i in enumerate(order))


def test_deterministic_across_processes():
    code = ("from fairbios.featurize import *; v = featurize('the quick brown fox', FeaturizerConfig(hash_seed=9));"
            "print(v.indices.tolist(), v.values.tolist())")
    a = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout
    b = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True,
                       env={"PYTHONHASHSEED": "123", "PATH": ""}).stdout
    v = featurize("the quick brown fox", FeaturizerConfig(hash_seed=9))
    assert a == b == f"{v.indices.tolist()} {v.values.tolist()}\n"


def test_collision_rate_small():
    vocab = [f"word{i}" for i in range(1000)]
    idx = {hash_oracle(w, 0) % 2 ** 18 for w in vocab}
    assert (1000 - len(idx)) / 1000 < 0.01


def test_config_validation():
    for bad in (dict(dim=3), dict(dim=1), dict(ngram_max=4), dict(hash_seed=-1)):
        with pytest.raises(BadConfig):
            FeaturizerConfig(**bad)
    assert FeaturizerConfig().fingerprint() == FeaturizerConfig().fingerprint()
    assert FeaturizerConfig().fingerprint() != FeaturizerConfig(hash_seed=1).fingerprint()


def test_triplets_round_trip(tmp_path):
    cfg = FeaturizerConfig(dim=2 ** 12)
    vecs = featurize_batch(["a b c", "", "c d d"], cfg)
    write_triplets(tmp_path / "x.csv", vecs)
    back = read_triplets(tmp_path / "x.csv", cfg.dim, n_rows=3)
    assert back == vecs


def test_to_csr():
    cfg = FeaturizerConfig(dim=2 ** 8)
    vecs = featurize_batch(["a b", "", "c"], cfg)
    X = to_csr(vecs)
    assert X.shape == (3, 256)
    for i, v in enumerate(vecs):
        assert np.array_equal(X[i].toarray()[0], v.to_dense())
