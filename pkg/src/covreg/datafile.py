"""JSON dataset files (schema 1).

Layout::

    {"schema": 1, "family": "linear" | "network_ar", "n": .., "p": .., "K": ..,
     "Y": n x p,
     "X": n x K x p x p            (linear)
          n x (K-1) x p vectors    (linear with "outer_product": true; identity prepended)
          n x p x p                (network_ar),
     "names": optional list of K component names}

Matrices asymmetric by at most 1e-9 are symmetrised with a warning; larger
asymmetries are rejected.  :func:`dump` writes a canonical form, so loading
and saving a file produced by :func:`dump` reproduces it byte for byte.
"""

import json
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, DimensionMismatch
from .model import Dataset, LinearFamily, NetworkARFamily, from_vectors

log = logging.getLogger(__name__)

SCHEMA = 1
SYM_LOAD_TOL = 1e-9


@dataclass
class DatasetFile:
    family: object
    X: np.ndarray
    Y: np.ndarray
    vectors: Optional[np.ndarray] = None
    names: tuple = ()

    @property
    def dataset(self):
        return Dataset(self.family, self.X, self.Y)

    def to_dict(self):
        fam = self.family
        d = {
            "schema": SCHEMA,
            "family": fam.kind,
            "n": int(self.Y.shape[0]),
            "p": int(fam.p),
            "K": int(fam.K),
            "Y": self.Y.tolist(),
        }
        if self.vectors is not None:
            d["outer_product"] = True
            d["X"] = self.vectors.tolist()
        else:
            d["X"] = self.X.tolist()
        if self.names:
            d["names"] = list(self.names)
        return d


def _require(doc, key, kind):
    if key not in doc:
        raise ConfigError(key, "missing")
    v = doc[key]
    if kind is int and (isinstance(v, bool) or not isinstance(v, int) or v < 1):
        raise ConfigError(key, f"must be a positive integer, got {v!r}")
    return v


def _array(doc, key, shape):
    try:
        a = np.asarray(doc[key], dtype=float)
    except (ValueError, TypeError) as exc:
        raise ConfigError(key, f"not a numeric array ({exc})") from None
    if a.shape != shape:
        raise ConfigError(key, f"expected shape {shape}, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ConfigError(key, "contains non-finite values")
    return a


def _symmetrize_checked(X, key):
    asym = float(np.max(np.abs(X - np.swapaxes(X, -1, -2)), initial=0.0))
    if asym > SYM_LOAD_TOL:
        raise DimensionMismatch(f"{key}: matrices are not symmetric (max asymmetry {asym:.3e})")
    if asym > 0:
        log.warning("%s: symmetrising matrices with asymmetry %.3e", key, asym)
        X = 0.5 * (X + np.swapaxes(X, -1, -2))
    return X


def from_dict(doc):
    if not isinstance(doc, dict):
        raise ConfigError("dataset", "top level must be a JSON object")
    schema = doc.get("schema", SCHEMA)
    if schema != SCHEMA:
        raise ConfigError("schema", f"unsupported schema {schema!r}")
    kind = _require(doc, "family", str)
    n, p, K = (_require(doc, k, int) for k in ("n", "p", "K"))
    Y = _array(doc, "Y", (n, p))
    names = tuple(doc.get("names", ()))
    if names and len(names) != K:
        raise ConfigError("names", f"expected {K} names, got {len(names)}")
    if kind == "linear":
        if doc.get("outer_product", False):
            vectors = _array(doc, "X", (n, K - 1, p))
            family, X = from_vectors(vectors, intercept=True)
            family = LinearFamily(K, p, names)
            return DatasetFile(family, X, Y, vectors, names)
        X = _symmetrize_checked(_array(doc, "X", (n, K, p, p)), "X")
        return DatasetFile(LinearFamily(K, p, names), X, Y, None, names)
    if kind == "network_ar":
        if K != 2:
            raise ConfigError("K", "network_ar has K = 2")
        X = _symmetrize_checked(_array(doc, "X", (n, p, p)), "X")
        return DatasetFile(NetworkARFamily(p), X, Y, None, names)
    raise ConfigError("family", f"unknown family {kind!r}")


def load(path):
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError("dataset", f"invalid JSON ({exc})") from None
    df = from_dict(doc)
    df.dataset  # validate against the family
    return df


def dumps(df):
    return json.dumps(df.to_dict(), sort_keys=True, separators=(",", ":")) + "\n"


def dump(df, path):
    with open(path, "w") as fh:
        fh.write(dumps(df))


def from_dataset(dataset, names=()):
    return DatasetFile(dataset.family, dataset.X, dataset.Y, None, tuple(names))
