"""Fixed-length feature vectors for the Meta, SPLT, BD, TLS and SS views."""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field
from typing import IO, Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import EmptyTrainingSet, UnknownView
from .ingest import FlowRecord
from .tls import TlsHandshakeSummary, hexcode, parse_hexcode

VIEWS = ("Meta", "SPLT", "BD", "TLS", "SS")
META_NAMES = ("ib", "ob", "ip", "op", "sp", "dp", "duration")

LENGTH_BIN_WIDTH = 150
TIME_BIN_WIDTH = 50
N_BINS = 10


def parse_views(text: str | Iterable[str]) -> tuple[str, ...]:
    """Normalize "Meta+SPLT+BD" (or an iterable of names) to canonical order."""
    names = text.replace(",", "+").split("+") if isinstance(text, str) else list(text)
    names = [n.strip() for n in names if n.strip()]
    lookup = {v.lower(): v for v in VIEWS}
    out = set()
    for n in names:
        if n.lower() not in lookup:
            raise UnknownView(f"unknown view {n!r}; expected one of {'+'.join(VIEWS)}")
        out.add(lookup[n.lower()])
    if not out:
        raise UnknownView("empty view set")
    return tuple(v for v in VIEWS if v in out)


def views_name(views: Iterable[str]) -> str:
    return "+".join(parse_views(views))


# ---------------------------------------------------------------- Meta


def meta_features(flow: FlowRecord) -> np.ndarray:
    return np.array(
        [flow.ib, flow.ob, flow.ip, flow.op, flow.sp, flow.dp, flow.duration],
        dtype=float,
    )


@dataclass(frozen=True)
class ScalerStats:
    mean: tuple[float, ...]
    std: tuple[float, ...]

    def apply(self, v: np.ndarray) -> np.ndarray:
        return (np.asarray(v, dtype=float) - np.asarray(self.mean)) / np.asarray(self.std)

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std), "variance": "population"}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ScalerStats":
        return cls(tuple(float(x) for x in d["mean"]), tuple(float(x) for x in d["std"]))


def fit_scaler(X) -> ScalerStats:
    """Column means and population standard deviations (0 replaced by 1)."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise EmptyTrainingSet("cannot fit a scaler on zero rows")
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return ScalerStats(tuple(mean.tolist()), tuple(std.tolist()))


def apply_scaler(stats: ScalerStats, v) -> np.ndarray:
    return stats.apply(v)


# ---------------------------------------------------------------- SPLT


@dataclass(frozen=True)
class MarkovFeatures:
    length_matrix: np.ndarray
    time_matrix: np.ndarray

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.length_matrix.ravel(), self.time_matrix.ravel()])


def _transition_matrix(states: Sequence[int], bins: int) -> np.ndarray:
    A = np.zeros((bins, bins))
    for a, b in zip(states, states[1:]):
        A[a, b] += 1.0
    rows = A.sum(axis=1, keepdims=True)
    np.divide(A, rows, out=A, where=rows > 0)
    return A


def splt_markov(
    flow: FlowRecord,
    length_bin_width: int = LENGTH_BIN_WIDTH,
    time_bin_width: int = TIME_BIN_WIDTH,
    bins: int = N_BINS,
) -> MarkovFeatures:
    """Row-normalized bin-transition matrices of packet lengths and gaps."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    lengths = [min(abs(n) // length_bin_width, bins - 1) for n, _ in flow.splt]
    gaps = [min(max(g, 0) // time_bin_width, bins - 1) for _, g in flow.splt]
    return MarkovFeatures(_transition_matrix(lengths, bins), _transition_matrix(gaps, bins))


# ---------------------------------------------------------------- BD


def byte_distribution(flow: FlowRecord) -> np.ndarray:
    counts = np.asarray(flow.byte_counts, dtype=float)
    total = counts.sum()
    return counts / total if total > 0 else counts


# ---------------------------------------------------------------- TLS


@dataclass(frozen=True)
class FeatureDictionary:
    """Frozen code -> column maps, ordered by ascending hex code."""

    suite_index: Mapping[int, int]
    ext_index: Mapping[int, int]
    built_from: str = ""
    counts: Mapping[str, int] = field(default_factory=dict)

    @property
    def n_suites(self) -> int:
        return len(self.suite_index)

    @property
    def n_extensions(self) -> int:
        return len(self.ext_index)

    @property
    def tls_length(self) -> int:
        return self.n_suites + self.n_extensions + 1

    @classmethod
    def from_codes(cls, suites: Iterable[int], extensions: Iterable[int], built_from: str = "") -> "FeatureDictionary":
        return cls(
            {c: i for i, c in enumerate(sorted(set(suites)))},
            {c: i for i, c in enumerate(sorted(set(extensions)))},
            built_from,
        )

    def to_dict(self) -> dict:
        return {
            "suites": [hexcode(c) for c in sorted(self.suite_index, key=self.suite_index.get)],
            "extensions": [hexcode(c) for c in sorted(self.ext_index, key=self.ext_index.get)],
            "built_from": self.built_from,
            "counts": dict(sorted(self.counts.items())),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeatureDictionary":
        suites = [parse_hexcode(c) for c in d["suites"]]
        exts = [parse_hexcode(c) for c in d["extensions"]]
        return cls(
            {c: i for i, c in enumerate(suites)},
            {c: i for i, c in enumerate(exts)},
            d.get("built_from", ""),
            dict(d.get("counts", {})),
        )


def fit_dictionary(flows: Iterable[FlowRecord], built_from: str = "") -> FeatureDictionary:
    suite_counts: Counter = Counter()
    ext_counts: Counter = Counter()
    for flow in flows:
        if flow.tls is None:
            continue
        suite_counts.update(flow.tls.offered_ciphersuites)
        ext_counts.update(flow.tls.advertised_extensions)
    d = FeatureDictionary.from_codes(suite_counts, ext_counts, built_from)
    counts = {f"suite_{hexcode(c)}": n for c, n in suite_counts.items()}
    counts.update({f"ext_{hexcode(c)}": n for c, n in ext_counts.items()})
    return FeatureDictionary(d.suite_index, d.ext_index, built_from, counts)


def tls_client_features(
    summary: Optional[TlsHandshakeSummary],
    dictionary: FeatureDictionary,
    dropped: Optional[Counter] = None,
) -> tuple[np.ndarray, np.ndarray, float]:
    """(suite bits, extension bits, client key bits); unknown codes are dropped."""
    suites = np.zeros(dictionary.n_suites)
    exts = np.zeros(dictionary.n_extensions)
    if summary is None:
        return suites, exts, 0.0
    for code in summary.offered_ciphersuites:
        idx = dictionary.suite_index.get(code)
        if idx is None:
            if dropped is not None:
                dropped[f"suite_{hexcode(code)}"] += 1
        else:
            suites[idx] = 1.0
    for code in summary.advertised_extensions:
        idx = dictionary.ext_index.get(code)
        if idx is None:
            if dropped is not None:
                dropped[f"ext_{hexcode(code)}"] += 1
        else:
            exts[idx] = 1.0
    return suites, exts, float(summary.client_public_key_bits or 0)


# ---------------------------------------------------------------- assembly


def view_length(view: str, dictionary: Optional[FeatureDictionary] = None, bins: int = N_BINS) -> int:
    if view == "Meta":
        return len(META_NAMES)
    if view == "SPLT":
        return 2 * bins * bins
    if view == "BD":
        return 256
    if view == "TLS":
        if dictionary is None:
            raise ValueError("TLS view needs a feature dictionary")
        return dictionary.tls_length
    if view == "SS":
        return 1
    raise UnknownView(view)


def completeness(views: Iterable[str], flow: FlowRecord) -> dict[str, bool]:
    """Which requested views had their inputs present for this flow."""
    mask = {}
    for v in parse_views(views):
        if v == "TLS":
            mask[v] = flow.tls is not None
        elif v == "SS":
            mask[v] = flow.tls is not None and flow.tls.certificate is not None
        else:
            mask[v] = True
    return mask


def assemble(
    views: Iterable[str],
    flow: FlowRecord,
    dictionary: Optional[FeatureDictionary] = None,
    scaler: Optional[ScalerStats] = None,
    bins: int = N_BINS,
    length_bin_width: int = LENGTH_BIN_WIDTH,
    time_bin_width: int = TIME_BIN_WIDTH,
    dropped: Optional[Counter] = None,
) -> np.ndarray:
    """Concatenate the requested views in the fixed order Meta, SPLT, BD, TLS, SS.

    Meta is standardized when a scaler is given. Missing TLS data or a
    missing certificate contribute zeros.
    """
    parts = []
    for v in parse_views(views):
        if v == "Meta":
            m = meta_features(flow)
            parts.append(scaler.apply(m) if scaler is not None else m)
        elif v == "SPLT":
            parts.append(splt_markov(flow, length_bin_width, time_bin_width, bins).flatten())
        elif v == "BD":
            parts.append(byte_distribution(flow))
        elif v == "TLS":
            if dictionary is None:
                raise ValueError("TLS view needs a feature dictionary")
            s, e, k = tls_client_features(flow.tls, dictionary, dropped)
            parts.append(np.concatenate([s, e, [k]]))
        elif v == "SS":
            cert = flow.tls.certificate if flow.tls is not None else None
            parts.append(np.array([1.0 if cert is not None and cert.self_signed else 0.0]))
    return np.concatenate(parts)


def column_names(views: Iterable[str], dictionary: Optional[FeatureDictionary] = None, bins: int = N_BINS) -> list[str]:
    names: list[str] = []
    for v in parse_views(views):
        if v == "Meta":
            names += [f"meta_{n}" for n in META_NAMES]
        elif v == "SPLT":
            for kind in ("len", "time"):
                names += [f"splt_{kind}_{i}_{j}" for i in range(bins) for j in range(bins)]
        elif v == "BD":
            names += [f"bd_0x{b:02x}" for b in range(256)]
        elif v == "TLS":
            assert dictionary is not None
            names += [f"suite_{hexcode(c)}" for c in sorted(dictionary.suite_index, key=dictionary.suite_index.get)]
            names += [f"ext_{hexcode(c)}" for c in sorted(dictionary.ext_index, key=dictionary.ext_index.get)]
            names.append("key_bits")
        elif v == "SS":
            names.append("self_signed")
    return names


@dataclass(frozen=True)
class FeatureSpace:
    """Everything needed to turn flows into model inputs."""

    views: tuple[str, ...]
    dictionary: Optional[FeatureDictionary] = None
    scaler: Optional[ScalerStats] = None
    bins: int = N_BINS
    length_bin_width: int = LENGTH_BIN_WIDTH
    time_bin_width: int = TIME_BIN_WIDTH

    @property
    def length(self) -> int:
        return sum(view_length(v, self.dictionary, self.bins) for v in self.views)

    def vector(self, flow: FlowRecord, dropped: Optional[Counter] = None) -> np.ndarray:
        return assemble(
            self.views,
            flow,
            self.dictionary,
            self.scaler,
            self.bins,
            self.length_bin_width,
            self.time_bin_width,
            dropped,
        )

    def matrix(self, flows: Sequence[FlowRecord], dropped: Optional[Counter] = None) -> np.ndarray:
        X = np.empty((len(flows), self.length))
        for i, flow in enumerate(flows):
            X[i] = self.vector(flow, dropped)
        return X

    def column_names(self) -> list[str]:
        return column_names(self.views, self.dictionary, self.bins)

    def to_dict(self) -> dict:
        return {
            "views": list(self.views),
            "bins": self.bins,
            "length_bin_width": self.length_bin_width,
            "time_bin_width": self.time_bin_width,
            "dictionary": self.dictionary.to_dict() if self.dictionary is not None else None,
            "scaler": self.scaler.to_dict() if self.scaler is not None else None,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeatureSpace":
        return cls(
            views=parse_views(d["views"]),
            dictionary=FeatureDictionary.from_dict(d["dictionary"]) if d.get("dictionary") else None,
            scaler=ScalerStats.from_dict(d["scaler"]) if d.get("scaler") else None,
            bins=int(d.get("bins", N_BINS)),
            length_bin_width=int(d.get("length_bin_width", LENGTH_BIN_WIDTH)),
            time_bin_width=int(d.get("time_bin_width", TIME_BIN_WIDTH)),
        )


def fit_space(views: Iterable[str], flows: Sequence[FlowRecord], built_from: str = "", **markov) -> FeatureSpace:
    """Fit the dictionary and Meta scaler on ``flows`` (a training split)."""
    views = parse_views(views)
    if not flows:
        raise EmptyTrainingSet("no training flows")
    dictionary = fit_dictionary(flows, built_from) if "TLS" in views else None
    scaler = fit_scaler(np.stack([meta_features(f) for f in flows])) if "Meta" in views else None
    return FeatureSpace(views, dictionary, scaler, **markov)


def write_csv(fp: IO[str], X: np.ndarray, names: Sequence[str], labels: Optional[Sequence] = None) -> None:
    w = csv.writer(fp)
    w.writerow(list(names) + (["label"] if labels is not None else []))
    for i, row in enumerate(np.asarray(X)):
        cells = [repr(float(x)) for x in row]
        if labels is not None:
            cells.append(labels[i])
        w.writerow(cells)
