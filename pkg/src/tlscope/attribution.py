"""Family attribution for single flows and per-host time windows."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import IO, Iterable, Optional, Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyWindow
from .features import FeatureDictionary, tls_client_features
from .ingest import FlowRecord
from .learn import LinearModel

DEFAULT_WINDOW_SECS = 300.0


def flow_id(flow: FlowRecord) -> str:
    return f"{flow.sa}:{flow.sp}-{flow.da}:{flow.dp}@{flow.start_us}"


@dataclass(frozen=True)
class FamilyVerdict:
    scope: object  # flow id, or (host, window start in seconds)
    family: str
    probabilities: dict
    votes: dict = field(default_factory=dict)
    flows: tuple = ()

    def to_dict(self) -> dict:
        scope = list(self.scope) if isinstance(self.scope, tuple) else self.scope
        return {"scope": scope, "family": self.family, "probs": self.probabilities, "votes": self.votes or None}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))


def _flow_vector(model: LinearModel, flow: FlowRecord) -> np.ndarray:
    if model.space is None:
        raise DimensionMismatch("model carries no feature space; cannot vectorize flows")
    return model.space.vector(flow)


def attribute_flow(model: LinearModel, flow: FlowRecord) -> FamilyVerdict:
    p = model.predict_proba(_flow_vector(model, flow))[0]
    best = int(np.argmax(p))
    return FamilyVerdict(
        scope=flow_id(flow),
        family=model.class_labels[best],
        probabilities={c: float(v) for c, v in zip(model.class_labels, p)},
        flows=(flow_id(flow),),
    )


def majority(prob_rows: np.ndarray) -> tuple[int, np.ndarray, np.ndarray]:
    """Winning class index for a window of per-flow probability rows.

    Each flow votes for its argmax. Vote ties go to the larger summed
    probability, then to the lowest class index.
    """
    prob_rows = np.atleast_2d(prob_rows)
    votes = np.bincount(np.argmax(prob_rows, axis=1), minlength=prob_rows.shape[1])
    mass = prob_rows.sum(axis=0)
    top = np.flatnonzero(votes == votes.max())
    top_mass = mass[top]
    winner = int(top[np.flatnonzero(top_mass == top_mass.max())[0]])
    return winner, votes, mass


def attribute_window(
    model: LinearModel,
    flows: Sequence[FlowRecord],
    window_start: Optional[float] = None,
) -> FamilyVerdict:
    if not flows:
        raise EmptyWindow("no flows in window")
    X = np.stack([_flow_vector(model, f) for f in flows])
    P = model.predict_proba(X)
    winner, votes, _ = majority(P)
    host = flows[0].host
    start = window_start if window_start is not None else min(f.start_time for f in flows)
    mean = P.mean(axis=0)
    return FamilyVerdict(
        scope=(host, start),
        family=model.class_labels[winner],
        probabilities={c: float(v) for c, v in zip(model.class_labels, mean)},
        votes={c: int(v) for c, v in zip(model.class_labels, votes) if v},
        flows=tuple(flow_id(f) for f in flows),
    )


def host_windows(
    flows: Iterable[FlowRecord],
    window_secs: float = DEFAULT_WINDOW_SECS,
    stride_secs: Optional[float] = None,
) -> list[tuple[str, float, list[FlowRecord]]]:
    """Group flows into per-host windows keyed by the initiator address.

    Windows start at each host's first flow and advance by ``stride_secs``
    (default: the window length, i.e. tumbling). A flow belongs to every
    window whose [start, start + window) interval contains its start time.
    Empty windows are omitted.
    """
    stride = window_secs if stride_secs is None else stride_secs
    if window_secs <= 0 or stride <= 0:
        raise ValueError("window and stride must be positive")
    by_host: dict[str, list[FlowRecord]] = {}
    for f in flows:
        by_host.setdefault(f.host, []).append(f)
    out = []
    w_us = round(window_secs * 1_000_000)
    s_us = round(stride * 1_000_000)
    for host in sorted(by_host):
        hf = sorted(by_host[host], key=lambda f: (f.start_us, f.sp, f.da, f.dp))
        origin = hf[0].start_us
        buckets: dict[int, list[FlowRecord]] = {}
        for f in hf:
            off = f.start_us - origin
            last = off // s_us
            first = max(0, -(-(off - w_us + 1) // s_us))
            for n in range(first, last + 1):
                buckets.setdefault(n, []).append(f)
        for n in sorted(buckets):
            out.append((host, (origin + n * s_us) / 1_000_000, buckets[n]))
    return out


def attribute_windows(
    model: LinearModel,
    flows: Iterable[FlowRecord],
    window_secs: float = DEFAULT_WINDOW_SECS,
    stride_secs: Optional[float] = None,
) -> list[FamilyVerdict]:
    return [attribute_window(model, wf, start) for _, start, wf in host_windows(flows, window_secs, stride_secs)]


# ---------------------------------------------------------------- similarity


@dataclass(frozen=True)
class FamilyProfile:
    family: str
    mean_vector: np.ndarray
    flow_count: int


KEY_BITS_UNIT = 1024.0


def family_profiles(flows: Iterable[FlowRecord], dictionary: FeatureDictionary) -> list[FamilyProfile]:
    """Mean TLS client vector (suite bits, extension bits, key size) per label.

    Key size enters in units of 1024 bits so it stays commensurate with the
    0/1 coordinates.
    """
    groups: dict[str, list[np.ndarray]] = {}
    for f in flows:
        if f.label is None or f.tls is None:
            continue
        s, e, k = tls_client_features(f.tls, dictionary)
        groups.setdefault(f.label, []).append(np.concatenate([s, e, [k / KEY_BITS_UNIT]]))
    return [FamilyProfile(fam, np.mean(vs, axis=0), len(vs)) for fam, vs in sorted(groups.items())]


def similarity_matrix(profiles: Sequence[FamilyProfile], lam: float = 1.0) -> np.ndarray:
    """S[i, j] = exp(-lam * squared Euclidean distance between family means)."""
    if not profiles:
        return np.zeros((0, 0))
    dims = {p.mean_vector.shape for p in profiles}
    if len(dims) != 1:
        raise DimensionMismatch(f"profile vectors differ in shape: {sorted(dims)}")
    M = np.stack([p.mean_vector for p in profiles])
    diff = M[:, None, :] - M[None, :, :]
    S = np.exp(-lam * np.sum(diff * diff, axis=2))
    return S


def write_similarity_csv(fp: IO[str], profiles: Sequence[FamilyProfile], S: np.ndarray) -> None:
    w = csv.writer(fp)
    names = [p.family for p in profiles]
    w.writerow(["family"] + names)
    for name, row in zip(names, S):
        w.writerow([name] + [f"{x:.6f}" for x in row])
