"""Synthetic data helpers shared by the test suite."""

import numpy as np

from straq import Catalog, Schema

SESSIONS_CSV = """URL,City,Browser,SessionTime
cnn.com,New York,Firefox,15
yahoo.com,New York,Firefox,20
google.com,Berkeley,Firefox,85
google.com,New York,Safari,82
bing.com,Cambridge,IE,22
"""

SESSIONS_SCHEMA = "URL:string,City:string,Browser:string,SessionTime:integer"


def add_sessions(catalog: Catalog, tmp_path, name="sessions"):
    path = tmp_path / f"{name}.csv"
    path.write_text(SESSIONS_CSV)
    return catalog.ingest_csv(path, name, SESSIONS_SCHEMA)


def skewed_sizes(n_rows: int, n_groups: int, exponent: float = 1.2) -> np.ndarray:
    """Group sizes following a power law, scaled to roughly n_rows total."""
    raw = 1.0 / np.arange(1, n_groups + 1) ** exponent
    sizes = np.maximum((raw / raw.sum() * n_rows).astype(np.int64), 1)
    return sizes


def add_skewed_table(catalog: Catalog, name: str, n_rows: int, n_groups: int,
                     seed: int, exponent: float = 1.2, value_sigma: float = 10.0,
                     dyadic: bool = False):
    """A (g integer, v float) table with power-law group sizes.

    With dyadic=True the values are multiples of 1/64 below 2**20, so any
    summation order produces bit-identical float64 totals (used by exactness
    tests to keep float non-associativity out of the comparison).
    """
    rng = np.random.default_rng(seed)
    sizes = skewed_sizes(n_rows, n_groups, exponent)
    g = np.repeat(np.arange(len(sizes), dtype=np.int64), sizes)
    n = len(g)
    v = rng.normal(100.0, value_sigma, n) + g * 0.01
    if dyadic:
        v = np.round(np.abs(v) * 64.0) / 64.0
    perm = rng.permutation(n)
    schema = Schema((("g", "integer"), ("v", "float")))
    handle = catalog.add_table(name, schema, {"g": g[perm], "v": v[perm]})
    return handle, sizes
