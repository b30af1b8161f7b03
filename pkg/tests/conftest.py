import numpy as np
import pytest

from fedrec.data import Catalog, ItemMeta, UserSequence, synth_heterogeneous


@pytest.fixture
def movie_catalog():
    return Catalog([
        ItemMeta("m1", "The Shawshank Redemption", ("Thriller",)),
        ItemMeta("m2", "Ex Machina", ("Sci-Fi", "Thriller")),
        ItemMeta("m3", "Unchained", ("Drama", "Western")),
        ItemMeta("m4", "Whiplash", ("Drama",)),
        ItemMeta("m5", "The Green Mile (1999)", ("Drama",)),
        ItemMeta("m6", "Pulp Fiction (1994)", ("Crime",)),
        ItemMeta("m7", "Seven (1995)", ("Thriller", "Crime")),
        ItemMeta("m8", "Plain Title", ()),
    ])


@pytest.fixture
def tiny_catalog():
    return Catalog([ItemMeta(f"i{j}", f"title {j}", ("war",) if j % 2 else ("drama", "romance")) for j in range(6)])


@pytest.fixture(scope="session")
def small_fixture():
    """Three clients on disjoint item blocks; small enough for per-test training."""
    return synth_heterogeneous(3, 12, 20, 4, seed=7, n_test_users=15)


def random_sequences(rng: np.random.Generator, catalog: Catalog, n: int, prefix: str = "u"):
    ids = catalog.item_ids
    out = []
    for u in range(n):
        length = int(rng.integers(1, 6))
        hist = tuple(ids[i] for i in rng.integers(len(ids), size=length))
        out.append(UserSequence(f"{prefix}{u:03d}", hist, ids[int(rng.integers(len(ids)))]))
    return out


def pytest_terminal_summary(terminalreporter):
    from _acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
