"""Synthetic cross-domain sequence benchmark and the per-frame feature file.

Each frame is ``x_t = s + u_t^(k) + eps_t``: a per-video static vector drawn
around a domain-specific mean, a class template that is centred over time,
and i.i.d. Gaussian noise. Domains differ only in the static mean, so all
class information is temporal.
"""
from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import SENTINEL_UNLABELED, SOURCE, TARGET, VideoBatch

FEATURE_MAGIC = b"MTFV"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIIIIBB")
HEADER_SIZE = _HEADER.size


class GeneratorError(ValueError):
    pass


class FeatureFormatError(ValueError):
    pass


@dataclass
class GeneratorSpec:
    d: int = 32
    T: int = 16
    K: int = 4
    n_per_domain: dict | int = dataclasses.field(
        default_factory=lambda: {"train": 256, "eval": 256})
    static_source_mean: list | None = None
    static_target_mean: list | None = None
    static_scale: float = 2.0
    dynamic_sigma: float = 1.0
    class_patterns: list | None = None
    seed: int = 0

    # shift between default domain means, in units of static_scale
    SHIFT = 5.0

    def counts(self) -> dict[str, int]:
        if isinstance(self.n_per_domain, int):
            return {"train": self.n_per_domain, "eval": self.n_per_domain}
        return {"train": int(self.n_per_domain.get("train", 0)),
                "eval": int(self.n_per_domain.get("eval", 0))}

    def resolved(self) -> "ResolvedSpec":
        """Fill defaults (means, templates) and check the spec invariants."""
        if self.d < 1 or self.T < 1 or self.K < 2:
            raise GeneratorError("need d >= 1, T >= 1, K >= 2")
        if self.static_scale < 0 or self.dynamic_sigma < 0:
            raise GeneratorError("static_scale and dynamic_sigma must be >= 0")
        if any(n < 0 for n in self.counts().values()):
            raise GeneratorError("n_per_domain counts must be >= 0")
        rng = np.random.default_rng([self.seed, 0xD0])
        if self.static_source_mean is None:
            src = np.zeros(self.d)
        else:
            src = _vector(self.static_source_mean, self.d, "static_source_mean")
        if self.static_target_mean is None:
            direction = rng.normal(size=self.d)
            direction /= np.linalg.norm(direction)
            tgt = src + self.SHIFT * self.static_scale * direction
        else:
            tgt = _vector(self.static_target_mean, self.d, "static_target_mean")
        if self.class_patterns is None:
            patterns = make_class_patterns(self.K, self.T, self.d, rng)
        else:
            patterns = np.asarray(self.class_patterns, dtype=np.float64)
            if patterns.shape != (self.K, self.T, self.d):
                raise GeneratorError(
                    f"class_patterns: shape {patterns.shape}, expected {(self.K, self.T, self.d)}")
        if np.abs(patterns.mean(axis=1)).max() > 1e-9:
            raise GeneratorError("class_patterns: templates must have zero temporal mean")
        guard = 4 * self.dynamic_sigma * np.sqrt(self.d)
        gaps = [np.linalg.norm(patterns[i] - patterns[j])
                for i in range(self.K) for j in range(i + 1, self.K)]
        if min(gaps) <= guard:
            raise GeneratorError(
                f"class_patterns: min pairwise distance {min(gaps):.3g} <= 4*sigma*sqrt(d) = {guard:.3g}")
        return ResolvedSpec(self, src, tgt, patterns)

    @classmethod
    def from_dict(cls, data: dict) -> "GeneratorSpec":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise GeneratorError(f"unknown generator fields: {sorted(unknown)}")
        return cls(**data)


@dataclass
class ResolvedSpec:
    spec: GeneratorSpec
    source_mean: np.ndarray
    target_mean: np.ndarray
    patterns: np.ndarray


def _vector(v, d, name):
    arr = np.asarray(v, dtype=np.float64)
    if arr.shape != (d,):
        raise GeneratorError(f"{name}: length {arr.shape}, expected ({d},)")
    return arr


def make_class_patterns(K: int, T: int, d: int, rng: np.random.Generator) -> np.ndarray:
    """Random templates, centred over time, scaled to unit RMS per entry."""
    pats = rng.normal(size=(K, T, d))
    pats -= pats.mean(axis=1, keepdims=True)
    if T > 1:
        pats /= np.sqrt((pats ** 2).mean(axis=(1, 2), keepdims=True))
    return pats


@dataclass
class DomainSplit:
    batch: VideoBatch
    statics: np.ndarray  # ground-truth s per sample, [N, d]


@dataclass
class DomainPair:
    source: dict[str, DomainSplit]
    target: dict[str, DomainSplit]
    resolved: ResolvedSpec


def _sample_domain(res: ResolvedSpec, mean: np.ndarray, n: int, domain: int,
                   rng: np.random.Generator) -> DomainSplit:
    spec = res.spec
    labels = rng.integers(0, spec.K, size=n)
    statics = mean + spec.static_scale * rng.normal(size=(n, spec.d))
    noise = spec.dynamic_sigma * rng.normal(size=(n, spec.T, spec.d))
    x = statics[:, None, :] + res.patterns[labels] + noise
    return DomainSplit(VideoBatch(x, labels, np.full(n, domain)), statics)


def generate_domain_pair(spec: GeneratorSpec) -> DomainPair:
    res = spec.resolved()
    counts = spec.counts()
    source, target = {}, {}
    for j, split in enumerate(("train", "eval")):
        source[split] = _sample_domain(res, res.source_mean, counts[split], SOURCE,
                                       np.random.default_rng([spec.seed, 1, j]))
        target[split] = _sample_domain(res, res.target_mean, counts[split], TARGET,
                                       np.random.default_rng([spec.seed, 2, j]))
    return DomainPair(source, target, res)


# -- feature file ------------------------------------------------------------

def encode_features(batch: VideoBatch, domain: int | None = None) -> bytes:
    n, T, d = batch.x.shape
    labels = batch.class_label
    has_labels = bool(n) and bool((labels != SENTINEL_UNLABELED).all())
    if domain is None:
        domain = int(batch.domain_label[0]) if n else SOURCE
    head = _HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, n, T, d, int(has_labels), domain)
    body = np.ascontiguousarray(batch.x, dtype="<f4").tobytes()
    tail = np.ascontiguousarray(labels, dtype="<u4").tobytes() if has_labels else b""
    return head + body + tail


def decode_features(blob: bytes) -> VideoBatch:
    if len(blob) < HEADER_SIZE:
        raise FeatureFormatError(f"header: need {HEADER_SIZE} bytes, file has {len(blob)}")
    magic, version, n, T, d, has_labels, domain = _HEADER.unpack_from(blob, 0)
    if magic != FEATURE_MAGIC:
        raise FeatureFormatError(f"magic: expected {FEATURE_MAGIC!r}, got {magic!r}")
    if version != FEATURE_VERSION:
        raise FeatureFormatError(f"version: expected {FEATURE_VERSION}, got {version}")
    if has_labels not in (0, 1):
        raise FeatureFormatError(f"has_labels: expected 0 or 1, got {has_labels}")
    if domain not in (SOURCE, TARGET):
        raise FeatureFormatError(f"domain: expected 0 or 1, got {domain}")
    n_payload = n * T * d * 4
    expected = HEADER_SIZE + n_payload + (4 * n if has_labels else 0)
    if len(blob) < HEADER_SIZE + n_payload:
        raise FeatureFormatError(f"payload: truncated, need {n_payload} bytes after header")
    if len(blob) != expected:
        raise FeatureFormatError(f"labels: file length {len(blob)}, expected {expected}")
    x = np.frombuffer(blob, dtype="<f4", count=n * T * d, offset=HEADER_SIZE)
    x = x.astype(np.float64).reshape(n, T, d)
    if has_labels:
        labels = np.frombuffer(blob, dtype="<u4", count=n, offset=HEADER_SIZE + n_payload)
        labels = labels.astype(np.int64)
    else:
        labels = np.full(n, SENTINEL_UNLABELED)
    return VideoBatch(x, labels, np.full(n, domain))


def write_feature_file(batch: VideoBatch, path: str | Path, domain: int | None = None) -> None:
    Path(path).write_bytes(encode_features(batch, domain))


def read_feature_file(path: str | Path) -> VideoBatch:
    return decode_features(Path(path).read_bytes())
