"""Rationale supervisor: a contrastively trained text encoder.

The supervisor embeds rationale texts with hashed sparse features and a dense
linear projection whose rows start orthonormal. Training pulls together pairs
of rationales that should look alike (unbiased ones sharing a gold label,
biased ones sharing the same gold/predicted situation) and pushes apart pairs
that should not (a sample's biased vs. unbiased rationale, biased rationales
from different situations). Similarity is the dot product of the projected,
unit-normalized embeddings.
"""

from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .core import Rationale, RationaleKind, RationaleStore
from .features import HashedTextFeaturizer

__all__ = [
    "PairClass",
    "RationalePair",
    "PairBatch",
    "RationaleSupervisor",
    "build_pairs",
    "contrastive_loss",
    "loss_from_sims",
    "contrastive_loss_gradient",
    "save_model",
    "load_model",
    "EmptyPositivesError",
    "TrainingError",
    "CheckpointError",
    "CHECKPOINT_VERSION",
]

log = logging.getLogger("srvf.supervisor")

CHECKPOINT_VERSION = 1


class EmptyPositivesError(ValueError):
    """The contrastive loss needs at least one positive pair."""


class TrainingError(RuntimeError):
    """Training diverged or hit a non-finite value."""


class CheckpointError(ValueError):
    """A model checkpoint failed validation or could not be read."""


class PairClass(str, enum.Enum):
    """The four training pair categories.

    Positive: SAME_GOLD_UNBIASED, SAME_BIAS_SITUATION.
    Negative: SAME_SAMPLE_BIASED_VS_UNBIASED, DIFFERENT_BIAS_SITUATIONS.
    """

    SAME_GOLD_UNBIASED = "same_gold_unbiased"
    SAME_BIAS_SITUATION = "same_bias_situation"
    SAME_SAMPLE_BIASED_VS_UNBIASED = "same_sample_biased_vs_unbiased"
    DIFFERENT_BIAS_SITUATIONS = "different_bias_situations"

    @property
    def is_positive(self) -> bool:
        return self in (PairClass.SAME_GOLD_UNBIASED, PairClass.SAME_BIAS_SITUATION)


@dataclass(frozen=True)
class RationalePair:
    first: Rationale
    second: Rationale
    kind: PairClass


@dataclass(frozen=True)
class PairBatch:
    positives: tuple[RationalePair, ...]
    negatives: tuple[RationalePair, ...]

    def __len__(self) -> int:
        return len(self.positives) + len(self.negatives)


# Enumerating beyond this many candidate pairs switches to seeded sampling.
PAIR_ENUMERATION_CUTOFF = 1_000_000


def _situation(store: RationaleStore, r: Rationale) -> tuple[str, str]:
    return (store.gold_of(r.sample_id).name, r.predicted.name)


def classify_pair(store: RationaleStore, a: Rationale, b: Rationale) -> PairClass | None:
    """Which training category, if any, the unordered pair (a, b) falls into."""
    both_unbiased = a.kind is RationaleKind.UNBIASED and b.kind is RationaleKind.UNBIASED
    both_biased = a.kind is RationaleKind.BIASED and b.kind is RationaleKind.BIASED
    if both_unbiased:
        if a.sample_id != b.sample_id and store.gold_of(a.sample_id) == store.gold_of(b.sample_id):
            return PairClass.SAME_GOLD_UNBIASED
        return None
    if both_biased:
        if _situation(store, a) == _situation(store, b):
            if a.sample_id != b.sample_id:
                return PairClass.SAME_BIAS_SITUATION
            return None
        return PairClass.DIFFERENT_BIAS_SITUATIONS
    if a.sample_id == b.sample_id:
        return PairClass.SAME_SAMPLE_BIASED_VS_UNBIASED
    return None


def build_pairs(
    store: RationaleStore,
    seed: int = 0,
    max_pairs_per_class: int | None = None,
    enumeration_cutoff: int = PAIR_ENUMERATION_CUTOFF,
) -> PairBatch:
    """Form all training pairs from a store, grouped into positives and negatives.

    All pairs of every class are enumerated while the candidate count stays
    under ``enumeration_cutoff``; above it, each class is down-sampled
    uniformly (seeded) to ``max_pairs_per_class``.
    """
    rationales = list(store.rationales())
    n = len(rationales)
    by_class: dict[PairClass, list[RationalePair]] = {c: [] for c in PairClass}
    total_candidates = n * (n - 1) // 2
    for i in range(n):
        for j in range(i + 1, n):
            kind = classify_pair(store, rationales[i], rationales[j])
            if kind is not None:
                by_class[kind].append(RationalePair(rationales[i], rationales[j], kind))

    if total_candidates > enumeration_cutoff:
        quota = max_pairs_per_class or 100_000
        rng = np.random.default_rng(seed)
        for cls, pairs in by_class.items():
            if len(pairs) > quota:
                keep = rng.choice(len(pairs), size=quota, replace=False)
                keep.sort()
                by_class[cls] = [pairs[k] for k in keep]

    for cls, pairs in by_class.items():
        if not pairs:
            log.warning("pair class %s is empty for this store", cls.value)

    positives = tuple(
        p for cls in (PairClass.SAME_GOLD_UNBIASED, PairClass.SAME_BIAS_SITUATION)
        for p in by_class[cls]
    )
    negatives = tuple(
        p
        for cls in (
            PairClass.SAME_SAMPLE_BIASED_VS_UNBIASED,
            PairClass.DIFFERENT_BIAS_SITUATIONS,
        )
        for p in by_class[cls]
    )
    return PairBatch(positives=positives, negatives=negatives)


def loss_from_sims(pos_sims: Sequence[float], neg_sims: Sequence[float], tau: float) -> float:
    """Contrastive loss over raw similarities.

    -log of: the mean exponentiated positive similarity over the summed
    exponentiated similarities of all pairs, with everything scaled by 1/tau.
    Computed via log-sum-exp so large |sim|/tau cannot overflow.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    pos = np.asarray(pos_sims, dtype=np.float64) / tau
    neg = np.asarray(neg_sims, dtype=np.float64) / tau
    if pos.size == 0:
        raise EmptyPositivesError("contrastive loss needs at least one positive pair")
    allv = np.concatenate([pos, neg])

    def lse(x: np.ndarray) -> float:
        m = float(np.max(x))
        return m + math.log(float(np.sum(np.exp(x - m))))

    return lse(allv) - lse(pos) + math.log(pos.size)


def _dloss_dsims(
    pos_sims: np.ndarray, neg_sims: np.ndarray, tau: float
) -> tuple[np.ndarray, np.ndarray]:
    """Partial derivatives of loss_from_sims w.r.t. each similarity."""
    pos = pos_sims / tau
    neg = neg_sims / tau
    allv = np.concatenate([pos, neg])
    m = np.max(allv)
    e_all = np.exp(allv - m)
    soft_all = e_all / np.sum(e_all)
    mp = np.max(pos)
    e_pos = np.exp(pos - mp)
    soft_pos = e_pos / np.sum(e_pos)
    d_pos = (soft_all[: pos.size] - soft_pos) / tau
    d_neg = soft_all[pos.size:] / tau
    return d_pos, d_neg


class RationaleSupervisor(BaseEstimator, TransformerMixin):
    """Hashed-feature linear encoder trained with the contrastive objective.

    Follows the usual estimator conventions: hyper-parameters are plain
    constructor arguments (visible through ``get_params``), ``fit`` trains on a
    :class:`RationaleStore` and returns ``self``, and ``transform`` maps a list
    of texts to an (n, dim) embedding matrix. An unfitted instance already
    embeds with its seeded orthonormal initial projection, which is what makes
    untrained similarity scores meaningful enough to compare against.
    """

    def __init__(
        self,
        dim: int = 128,
        feature_space: int = 2**18,
        ngram_range: tuple[int, int] = (3, 5),
        hash_seed: int = 17,
        normalize: bool = True,
        tau: float = 0.2,
        epochs: int = 50,
        batch_size: int = 128,
        learning_rate: float = 1e-2,
        seed: int = 0,
        max_pairs_per_class: int | None = None,
    ):
        self.dim = dim
        self.feature_space = feature_space
        self.ngram_range = ngram_range
        self.hash_seed = hash_seed
        self.normalize = normalize
        self.tau = tau
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.seed = seed
        self.max_pairs_per_class = max_pairs_per_class

    # -- validation and lazy state ------------------------------------------------

    def _validate(self) -> None:
        if self.dim < 1:
            raise ValueError("dim must be at least 1")
        if self.feature_space < self.dim:
            raise ValueError("feature_space must be at least dim")
        if self.tau <= 0 or not math.isfinite(self.tau):
            raise ValueError("tau must be a positive finite number")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        lo, hi = self.ngram_range
        if lo < 1 or hi < lo:
            raise ValueError(f"bad ngram_range {self.ngram_range!r}")

    def _featurizer(self) -> HashedTextFeaturizer:
        cached = getattr(self, "_feat", None)
        if (
            cached is None
            or cached.feature_space != self.feature_space
            or cached.ngram_range != tuple(self.ngram_range)
            or cached.hash_seed != self.hash_seed
        ):
            cached = HashedTextFeaturizer(self.feature_space, tuple(self.ngram_range), self.hash_seed)
            self._feat = cached
        return cached

    def _initial_projection(self) -> np.ndarray:
        """Seeded (feature_space, dim) matrix whose dim columns are orthonormal.

        Stored feature-major so that embedding a text gathers contiguous rows.
        The dim x feature_space view (rows of the projection proper) is then
        orthonormal-by-rows.
        """
        rng = np.random.default_rng(self.seed)
        m = rng.standard_normal((self.feature_space, self.dim))
        gram = m.T @ m
        vals, vecs = np.linalg.eigh(gram)
        inv_sqrt = vecs @ np.diag(1.0 / np.sqrt(vals)) @ vecs.T
        return m @ inv_sqrt

    def _ensure_projection(self) -> np.ndarray:
        self._validate()
        proj = getattr(self, "projection_", None)
        if proj is None:
            proj = self._initial_projection()
            self.projection_ = proj
        return proj

    # -- embedding ----------------------------------------------------------------

    def embed(self, text: str) -> np.ndarray:
        """Project one text to a dim-vector (unit-normalized by default)."""
        proj = self._ensure_projection()
        idx, vals = self._featurizer().features(text)
        z = vals @ proj[idx]
        if self.normalize:
            norm = float(np.linalg.norm(z))
            if norm == 0.0:
                raise ValueError("text embedded to the zero vector; cannot normalize")
            z = z / norm
        return z

    def transform(self, texts: Iterable[str]) -> np.ndarray:
        texts = list(texts)
        out = np.empty((len(texts), self.dim), dtype=np.float64)
        for i, t in enumerate(texts):
            if not isinstance(t, str):
                raise TypeError(f"texts[{i}] is {type(t).__name__}, expected str")
            out[i] = self.embed(t)
        return out

    def sim(self, a: str, b: str) -> float:
        """Similarity of two texts: dot product of their embeddings."""
        return float(np.dot(self.embed(a), self.embed(b)))

    # -- training -----------------------------------------------------------------

    def fit(self, store: RationaleStore, y: None = None) -> "RationaleSupervisor":
        """Train the projection on a store's pairs with minibatch gradient descent.

        Deterministic given the seed: the projection restarts from its seeded
        initialization and batch order is driven by a private generator. The
        weight updates are applied in the span of the training features (the
        full matrix is only touched when materializing the result), which keeps
        each step independent of the bucket-space size.
        """
        self._validate()
        batch = build_pairs(store, seed=self.seed, max_pairs_per_class=self.max_pairs_per_class)
        if not batch.positives:
            raise EmptyPositivesError("store yields no positive training pairs")

        texts: list[str] = []
        text_id: dict[str, int] = {}
        for r in store.rationales():
            if r.text not in text_id:
                text_id[r.text] = len(texts)
                texts.append(r.text)

        pos_idx = np.asarray(
            [(text_id[p.first.text], text_id[p.second.text]) for p in batch.positives]
        )
        neg_idx = np.asarray(
            [(text_id[p.first.text], text_id[p.second.text]) for p in batch.negatives],
            dtype=np.int64,
        ).reshape(-1, 2)

        feat = self._featurizer()
        x = feat.matrix(texts)
        # restart from the seeded initialization so fit is deterministic
        proj = self._initial_projection()
        self.projection_ = proj

        z = x @ proj  # (n_texts, dim)
        coeff = np.zeros((len(texts), self.dim))  # accumulated row-space updates
        gram = (x @ x.T).toarray()  # (n_texts, n_texts); tiny next to x itself

        rng = np.random.default_rng(self.seed)
        n_pos, n_neg = len(pos_idx), len(neg_idx)
        n_batches = max(1, min(math.ceil((n_pos + n_neg) / self.batch_size), n_pos))

        for epoch in range(self.epochs):
            pos_order = rng.permutation(n_pos)
            neg_order = rng.permutation(n_neg) if n_neg else np.empty(0, dtype=np.int64)
            pos_chunks = np.array_split(pos_order, n_batches)
            neg_chunks = np.array_split(neg_order, n_batches)
            epoch_loss = 0.0
            for pc, nc in zip(pos_chunks, neg_chunks):
                loss, rows, grad_rows = self._step(z, pos_idx[pc], neg_idx[nc])
                epoch_loss += loss * (len(pc) + len(nc))
                if not math.isfinite(loss):
                    raise TrainingError(f"non-finite loss at epoch {epoch}")
                step = self.learning_rate * grad_rows
                coeff[rows] -= step
                # z tracks x @ (proj + x.T @ coeff) without touching proj itself
                z -= gram[:, rows] @ step
            denom = n_pos + n_neg
            log.info(
                "train epoch=%d mean_loss=%.6f", epoch, epoch_loss / denom if denom else 0.0
            )

        # materialize: proj += x.T @ coeff, one scatter per unique text
        for t, row in zip(texts, coeff):
            idx, vals = feat.features(t)
            proj[idx] += np.outer(vals, row)
        self.projection_ = proj
        self.n_pairs_ = n_pos + n_neg
        return self

    def _step(
        self, z: np.ndarray, pos: np.ndarray, neg: np.ndarray
    ) -> tuple[float, np.ndarray, np.ndarray]:
        """One minibatch: loss, the unique text rows involved, and dL/dz rows."""
        pairs = np.concatenate([pos, neg]) if len(neg) else pos
        rows = np.unique(pairs)
        remap = {r: i for i, r in enumerate(rows)}
        zr = z[rows]
        if self.normalize:
            norms = np.linalg.norm(zr, axis=1, keepdims=True)
            if np.any(norms == 0.0):
                raise TrainingError("a training text embedded to the zero vector")
            er = zr / norms
        else:
            er = zr
        li = np.asarray([remap[i] for i, _ in pairs])
        ri = np.asarray([remap[j] for _, j in pairs])
        sims = np.einsum("ij,ij->i", er[li], er[ri])
        n_pos = len(pos)
        loss = loss_from_sims(sims[:n_pos], sims[n_pos:], self.tau)
        d_pos, d_neg = _dloss_dsims(sims[:n_pos], sims[n_pos:], self.tau)
        dsim = np.concatenate([d_pos, d_neg])

        de = np.zeros_like(er)
        np.add.at(de, li, dsim[:, None] * er[ri])
        np.add.at(de, ri, dsim[:, None] * er[li])
        if self.normalize:
            inner = np.einsum("ij,ij->i", de, er)
            dz = (de - inner[:, None] * er) / norms
        else:
            dz = de
        return loss, rows, dz


def contrastive_loss(model: RationaleSupervisor, batch: PairBatch) -> float:
    """Loss of a pair batch under the model's current projection."""
    pos = [model.sim(p.first.text, p.second.text) for p in batch.positives]
    neg = [model.sim(p.first.text, p.second.text) for p in batch.negatives]
    return loss_from_sims(pos, neg, model.tau)


def contrastive_loss_gradient(
    model: RationaleSupervisor, batch: PairBatch
) -> tuple[float, np.ndarray]:
    """Loss and its dense analytic gradient w.r.t. the projection.

    Returns the gradient as a (feature_space, dim) array matching the layout
    of ``projection_``. Intended for small models (verification, debugging);
    ``fit`` applies the same math without densifying.
    """
    proj = model._ensure_projection()
    feat = model._featurizer()

    texts: list[str] = []
    text_id: dict[str, int] = {}
    for p in batch.positives + batch.negatives:
        for t in (p.first.text, p.second.text):
            if t not in text_id:
                text_id[t] = len(texts)
                texts.append(t)
    feats = [feat.features(t) for t in texts]
    z = np.stack([vals @ proj[idx] for idx, vals in feats])
    if model.normalize:
        norms = np.linalg.norm(z, axis=1, keepdims=True)
        if np.any(norms == 0.0):
            raise ValueError("a text embedded to the zero vector")
        e = z / norms
    else:
        e = z

    li = np.asarray([text_id[p.first.text] for p in batch.positives + batch.negatives])
    ri = np.asarray([text_id[p.second.text] for p in batch.positives + batch.negatives])
    sims = np.einsum("ij,ij->i", e[li], e[ri])
    n_pos = len(batch.positives)
    loss = loss_from_sims(sims[:n_pos], sims[n_pos:], model.tau)
    d_pos, d_neg = _dloss_dsims(sims[:n_pos], sims[n_pos:], model.tau)
    dsim = np.concatenate([d_pos, d_neg])

    de = np.zeros_like(e)
    np.add.at(de, li, dsim[:, None] * e[ri])
    np.add.at(de, ri, dsim[:, None] * e[li])
    if model.normalize:
        inner = np.einsum("ij,ij->i", de, e)
        dz = (de - inner[:, None] * e) / norms
    else:
        dz = de

    grad = np.zeros_like(proj)
    for (idx, vals), row in zip(feats, dz):
        grad[idx] += np.outer(vals, row)
    return loss, grad


def save_model(model: RationaleSupervisor, path: str | Path) -> None:
    """Write a JSON checkpoint: version, encoder config, tau, projection rows."""
    proj = model._ensure_projection()
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": {
            "dim": model.dim,
            "feature_space": model.feature_space,
            "ngram_range": list(model.ngram_range),
            "hash_seed": model.hash_seed,
            "normalize": model.normalize,
        },
        "tau": model.tau,
        # row-major over the (dim, feature_space) projection
        "projection": proj.T.tolist(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_model(path: str | Path) -> RationaleSupervisor:
    """Read a checkpoint, validating shape and hyper-parameters before use."""
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        version = payload["version"]
        config = payload["config"]
        tau = payload["tau"]
        rows = payload["projection"]
        dim = int(config["dim"])
        feature_space = int(config["feature_space"])
        ngram_range = tuple(int(v) for v in config["ngram_range"])
        hash_seed = int(config["hash_seed"])
        normalize = bool(config["normalize"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint {path} is missing or mistypes a field: {exc}") from exc
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version!r}")
    if not (isinstance(tau, (int, float)) and tau > 0 and math.isfinite(tau)):
        raise CheckpointError("checkpoint tau must be a positive finite number")
    proj = np.asarray(rows, dtype=np.float64)
    if proj.shape != (dim, feature_space):
        raise CheckpointError(
            f"projection shape {proj.shape} does not match config "
            f"({dim}, {feature_space})"
        )
    if not np.all(np.isfinite(proj)):
        raise CheckpointError("projection contains non-finite values")
    model = RationaleSupervisor(
        dim=dim,
        feature_space=feature_space,
        ngram_range=ngram_range,
        hash_seed=hash_seed,
        normalize=normalize,
        tau=float(tau),
    )
    model.projection_ = np.ascontiguousarray(proj.T)
    return model
