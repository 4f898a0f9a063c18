"""Synthetic attribute images: each binary attribute switches on a localized pattern."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import Rng

MAGIC = b"PNDS"
FORMAT_VERSION = 1


def default_templates(height: int = 8, width: int = 8) -> list[np.ndarray]:
    """Four disjoint bar/blob masks on an 8x8 grid (top bar, right bar, blob, bottom bar)."""
    if (height, width) != (8, 8):
        raise ValueError("default templates are defined for 8x8 images")
    masks = [np.zeros((8, 8)) for _ in range(4)]
    masks[0][0:2, :] = 1.0
    masks[1][2:8, 6:8] = 1.0
    masks[2][3:6, 1:4] = 1.0
    masks[3][6:8, 0:5] = 1.0
    return [mk.ravel() for mk in masks]


@dataclass
class SyntheticSpec:
    """``sample = sum_k label_k * amplitude * template_k + background + noise``."""

    height: int = 8
    width: int = 8
    n_attributes: int = 4
    amplitude: float = 2.0
    background: float = -1.0
    noise_std: float = 0.1
    probs: list = field(default_factory=lambda: [0.5, 0.5, 0.5, 0.5])
    # (i, j, rho): correlation between attribute i and j; i must precede j
    correlations: list = field(default_factory=lambda: [(0, 1, 0.7)])
    templates: list | None = None

    def __post_init__(self):
        if self.templates is None:
            self.templates = default_templates(self.height, self.width)[: self.n_attributes]
        self.templates = [np.asarray(t, dtype=np.float64).ravel() for t in self.templates]
        self.correlations = [tuple(c) for c in self.correlations]
        self.validate()

    @property
    def sample_dim(self) -> int:
        return self.height * self.width

    def validate(self) -> None:
        if len(self.templates) != self.n_attributes or len(self.probs) != self.n_attributes:
            raise ValueError("need one template and one probability per attribute")
        if any(t.size != self.sample_dim for t in self.templates):
            raise ValueError("template size does not match the image size")
        if np.linalg.matrix_rank(np.stack(self.templates)) < self.n_attributes:
            raise ValueError("templates must be linearly independent")
        if not all(0.0 < p < 1.0 for p in self.probs):
            raise ValueError("attribute probabilities must lie in (0, 1)")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        seen = set()
        for i, j, rho in self.correlations:
            if not 0 <= i < j < self.n_attributes or j in seen:
                raise ValueError(f"bad correlation pair {(i, j)}")
            seen.add(j)
            p11 = self._joint(i, j, rho)
            pi, pj = self.probs[i], self.probs[j]
            if not (max(0.0, pi + pj - 1.0) <= p11 <= min(pi, pj)):
                raise ValueError(f"correlation {rho} infeasible for probabilities {pi}, {pj}")

    def _joint(self, i, j, rho):
        pi, pj = self.probs[i], self.probs[j]
        return pi * pj + rho * np.sqrt(pi * (1 - pi) * pj * (1 - pj))

    def to_dict(self) -> dict:
        return {"height": self.height, "width": self.width, "n_attributes": self.n_attributes,
                "amplitude": self.amplitude, "background": self.background, "noise_std": self.noise_std,
                "probs": list(map(float, self.probs)),
                "correlations": [[int(i), int(j), float(r)] for i, j, r in self.correlations],
                "templates": [t.tolist() for t in self.templates]}

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        return cls(**d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class Dataset:
    samples: np.ndarray
    labels: np.ndarray
    split: str = "train"
    seed: int | None = None
    spec_hash: str = ""

    def __post_init__(self):
        if len(self.samples) != len(self.labels):
            raise ValueError("sample and label counts differ")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be binary")

    def __len__(self):
        return len(self.samples)

    def split_at(self, n_train: int) -> tuple["Dataset", "Dataset"]:
        return (Dataset(self.samples[:n_train], self.labels[:n_train], "train", self.seed, self.spec_hash),
                Dataset(self.samples[n_train:], self.labels[n_train:], "test", self.seed, self.spec_hash))


def sample_labels(spec: SyntheticSpec, n: int, rng: Rng) -> np.ndarray:
    u = rng.uniform(size=(n, spec.n_attributes))
    labels = (u < np.asarray(spec.probs)).astype(np.uint8)
    for i, j, rho in spec.correlations:
        pi, pj = spec.probs[i], spec.probs[j]
        p11 = spec._joint(i, j, rho)
        p_given_1 = p11 / pi
        p_given_0 = (pj - p11) / (1 - pi)
        labels[:, j] = u[:, j] < np.where(labels[:, i] == 1, p_given_1, p_given_0)
    return labels


def generate(spec: SyntheticSpec, n: int, seed: int, split: str = "train") -> Dataset:
    if n < 1:
        raise ValueError("n must be at least 1")
    spec.validate()
    rng = Rng(seed)
    labels = sample_labels(spec, n, rng.child(0))
    templates = np.stack(spec.templates)
    samples = spec.background + spec.amplitude * labels.astype(np.float64) @ templates
    if spec.noise_std > 0:
        samples = samples + rng.child(1).normal(size=samples.shape, scale=spec.noise_std)
    return Dataset(samples, labels, split, seed, spec.hash())


@dataclass
class AttributeStats:
    mu: np.ndarray
    sigma: np.ndarray
    cov: np.ndarray

    def correlation(self) -> np.ndarray:
        s = np.where(self.sigma > 0, self.sigma, 1.0)
        return self.cov / np.outer(s, s)

    def to_dict(self) -> dict:
        return {"mu": self.mu.tolist(), "sigma": self.sigma.tolist(), "cov": self.cov.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "AttributeStats":
        return cls(np.asarray(d["mu"]), np.asarray(d["sigma"]), np.asarray(d["cov"]))


def attribute_stats(ds: Dataset, classifier_logits=None) -> AttributeStats:
    """Mean, standard deviation and covariance of labels (or of supplied logits)."""
    values = np.asarray(ds.labels if classifier_logits is None else classifier_logits, dtype=np.float64)
    if len(values) == 0:
        raise ValueError("empty dataset")
    mu = values.mean(axis=0)
    centered = values - mu
    cov = centered.T @ centered / len(values)
    cov = 0.5 * (cov + cov.T)
    return AttributeStats(mu, np.sqrt(np.diag(cov)), cov)


def save_dataset(ds: Dataset, path) -> None:
    n, dim = ds.samples.shape
    header = json.dumps({"version": FORMAT_VERSION, "n": n, "sample_dim": dim,
                         "n_attributes": ds.labels.shape[1], "seed": ds.seed,
                         "spec_hash": ds.spec_hash, "split": ds.split}, sort_keys=True).encode()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(np.ascontiguousarray(ds.samples, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ds.labels, dtype=np.uint8).tobytes())


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a dataset file")
    (hlen,) = struct.unpack("<Q", raw[4:12])
    header = json.loads(raw[12:12 + hlen])
    if header.get("version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {header.get('version')}")
    n, dim, k = header["n"], header["sample_dim"], header["n_attributes"]
    off = 12 + hlen
    expected = off + 8 * n * dim + n * k
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    samples = np.frombuffer(raw, dtype="<f8", count=n * dim, offset=off).reshape(n, dim).astype(np.float64)
    labels = np.frombuffer(raw, dtype=np.uint8, count=n * k, offset=off + 8 * n * dim).reshape(n, k).copy()
    return Dataset(samples, labels, header.get("split", "train"), header.get("seed"), header.get("spec_hash", ""))
