"""Per-label prevalence tables for TLS parameters, ports and certificates."""

from __future__ import annotations

from collections import Counter
from typing import Iterable, Optional, Sequence

from .features import fit_dictionary
from .ingest import FlowRecord
from .tls import CodeRegistry, SchannelConfig, default_registry, hexcode, is_schannel_xp
from .attribution import family_profiles, similarity_matrix


def histogram(values: Iterable, order=None) -> dict:
    """Percentages of each distinct value; they sum to 100 unless empty."""
    counts = Counter(values)
    total = sum(counts.values())
    if not total:
        return {}
    keys = sorted(counts, key=order) if order else sorted(counts, key=lambda k: (-counts[k], str(k)))
    return {str(k): 100.0 * counts[k] / total for k in keys}


def prevalence(code_lists: Sequence[Sequence[int]]) -> dict:
    """Percent of sessions listing each code (sessions can list many)."""
    n = len(code_lists)
    if not n:
        return {}
    counts = Counter(c for codes in code_lists for c in set(codes))
    return {hexcode(c): 100.0 * counts[c] / n for c in sorted(counts, key=lambda c: (-counts[c], c))}


def _bucket_missing(v):
    return "none" if v is None else v


def label_section(flows: Sequence[FlowRecord], registry: CodeRegistry) -> dict:
    tls_flows = [f for f in flows if f.tls is not None]
    summaries = [f.tls for f in tls_flows]
    certs = [s.certificate for s in summaries]
    num_first = lambda k: (k == "none", int(k) if k != "none" else 0)  # noqa: E731
    return {
        "flows": len(flows),
        "tls_flows": len(tls_flows),
        "offered_ciphersuites": prevalence([s.offered_ciphersuites for s in summaries]),
        "advertised_extensions": prevalence([s.advertised_extensions for s in summaries]),
        "selected_ciphersuite": histogram(
            hexcode(s.selected_ciphersuite) if s.selected_ciphersuite is not None else "none" for s in summaries
        ),
        "selected_extensions": prevalence([s.selected_extensions for s in summaries]),
        "client_key_bits": histogram((_bucket_missing(s.client_public_key_bits) for s in summaries), num_first),
        "validity_days": histogram((_bucket_missing(c.validity_days if c else None) for c in certs), num_first),
        "san_count": histogram((_bucket_missing(c.san_count if c else None) for c in certs), num_first),
        "self_signed": histogram("none" if c is None else str(c.self_signed).lower() for c in certs),
        "subjects": histogram(c.subject for c in certs if c is not None),
        "names": {
            hexcode(c): registry.suite_name(c)
            for c in sorted({c for s in summaries for c in s.offered_ciphersuites})
        },
    }


def port_table(flows: Iterable[FlowRecord]) -> dict:
    """Share of TLS flows per destination port, most common first."""
    return histogram(f.dp for f in flows if f.tls is not None)


def build_report(
    flows: Sequence[FlowRecord],
    registry: Optional[CodeRegistry] = None,
    xp_config: Optional[SchannelConfig] = None,
    exclude_xp: bool = False,
) -> dict:
    """Prevalence tables per label (unlabeled flows go under "unlabeled").

    With ``exclude_xp``, sessions whose offered suite list is a configured
    XP SChannel list are dropped first and the config version is recorded.
    """
    registry = registry or default_registry()
    dropped = 0
    if exclude_xp:
        if xp_config is None:
            xp_config = SchannelConfig.load()
        kept = []
        for f in flows:
            if f.tls is not None and is_schannel_xp(f.tls, xp_config):
                dropped += 1
            else:
                kept.append(f)
        flows = kept
    groups: dict[str, list[FlowRecord]] = {}
    for f in flows:
        groups.setdefault(f.label if f.label is not None else "unlabeled", []).append(f)
    return {
        "registry": registry.version,
        "xp_config": xp_config.version if exclude_xp else None,
        "xp_excluded": dropped,
        "ports": port_table(flows),
        "labels": {label: label_section(groups[label], registry) for label in sorted(groups)},
    }


def similarity(flows: Sequence[FlowRecord], lam: float = 1.0):
    """Family profiles and their similarity matrix over TLS client features."""
    labeled = [f for f in flows if f.label is not None and f.tls is not None]
    profiles = family_profiles(labeled, fit_dictionary(labeled, "similarity"))
    return profiles, similarity_matrix(profiles, lam)


def render_text(report: dict, top: int = 10) -> str:
    lines = [f"registry {report['registry']}"]
    if report.get("xp_config"):
        lines.append(f"xp config {report['xp_config']} ({report['xp_excluded']} sessions excluded)")
    lines.append("")
    lines.append("Port    Share of TLS flows")
    for port, pct in report["ports"].items():
        lines.append(f"{port:<8}{pct:6.1f}%")
    for label, sec in report["labels"].items():
        lines.append("")
        lines.append(f"== {label}: {sec['flows']} flows, {sec['tls_flows']} TLS")
        for key in ("offered_ciphersuites", "advertised_extensions", "selected_ciphersuite", "client_key_bits",
                    "validity_days", "san_count", "self_signed"):
            items = list(sec[key].items())[:top]
            lines.append(f"  {key}: " + ", ".join(f"{k} {v:.1f}%" for k, v in items))
    return "\n".join(lines) + "\n"
