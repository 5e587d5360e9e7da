from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

SENTINEL_UNLABELED = -1
SOURCE, TARGET = 0, 1


@dataclass
class VideoBatch:
    """A set of per-frame feature sequences ``x[B, T, d]`` with labels.

    ``class_label`` uses ``SENTINEL_UNLABELED`` for samples whose label must
    not be seen by training. ``pseudo_label`` is only read when
    ``pseudo_active`` is set.
    """
    x: np.ndarray
    class_label: np.ndarray
    domain_label: np.ndarray
    pseudo_label: np.ndarray | None = None
    pseudo_active: bool = False

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 3:
            raise ValueError(f"x must be [B, T, d], got shape {self.x.shape}")
        n = self.x.shape[0]
        self.class_label = np.asarray(self.class_label, dtype=np.int64).reshape(n)
        self.domain_label = np.asarray(self.domain_label, dtype=np.int64).reshape(n)
        if not np.isin(self.domain_label, (SOURCE, TARGET)).all():
            raise ValueError("domain_label must be 0 (source) or 1 (target)")
        if self.pseudo_label is not None:
            self.pseudo_label = np.asarray(self.pseudo_label, dtype=np.int64).reshape(n)

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def T(self) -> int:
        return self.x.shape[1]

    @property
    def d(self) -> int:
        return self.x.shape[2]

    def subset(self, idx) -> "VideoBatch":
        return VideoBatch(
            x=self.x[idx], class_label=self.class_label[idx], domain_label=self.domain_label[idx],
            pseudo_label=None if self.pseudo_label is None else self.pseudo_label[idx],
            pseudo_active=self.pseudo_active)

    def unlabeled(self) -> "VideoBatch":
        return replace(self, class_label=np.full(len(self), SENTINEL_UNLABELED),
                       pseudo_label=None, pseudo_active=False)

    def supervision(self) -> tuple[np.ndarray, np.ndarray]:
        """Indices and labels of samples that carry a training label."""
        labels = self.class_label.copy()
        if self.pseudo_active and self.pseudo_label is not None:
            take = (labels == SENTINEL_UNLABELED) & (self.pseudo_label >= 0)
            labels[take] = self.pseudo_label[take]
        idx = np.flatnonzero(labels != SENTINEL_UNLABELED)
        return idx, labels[idx]


def concat(a: VideoBatch, b: VideoBatch) -> VideoBatch:
    def cat_pseudo():
        if a.pseudo_label is None and b.pseudo_label is None:
            return None
        pa = a.pseudo_label if a.pseudo_label is not None else np.full(len(a), SENTINEL_UNLABELED)
        pb = b.pseudo_label if b.pseudo_label is not None else np.full(len(b), SENTINEL_UNLABELED)
        return np.concatenate([pa, pb])

    return VideoBatch(np.concatenate([a.x, b.x]), np.concatenate([a.class_label, b.class_label]),
                      np.concatenate([a.domain_label, b.domain_label]), cat_pseudo(),
                      a.pseudo_active or b.pseudo_active)
