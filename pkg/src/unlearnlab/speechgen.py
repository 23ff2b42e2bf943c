"""Synthetic speech-like corpus: keyword templates plus speaker offsets plus noise.

Every utterance carries both a keyword and a speaker label, so the two label
sets share the same features. Speaker ids are balanced across the corpus.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

TASKS = ("keyword", "speaker")


@dataclass(frozen=True)
class GenSpec:
    num_keywords: int = 12
    num_speakers: int = 20
    frames: int = 10
    feature_dim: int = 32
    samples_per_class: int = 50
    noise_sigma: float = 2.0
    keyword_scale: float = 3.0
    speaker_scale: float = 1.0
    seed: int = 0

    def validate(self):
        for name in ("num_keywords", "num_speakers", "frames", "feature_dim", "samples_per_class"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not (self.keyword_scale > 0 and self.speaker_scale > 0):
            raise ValueError("keyword_scale and speaker_scale must be positive")


@dataclass
class Corpus:
    frames: np.ndarray  # (N, T, d)
    keyword_labels: np.ndarray
    speaker_labels: np.ndarray
    ids: np.ndarray
    num_keywords: int
    num_speakers: int

    def __len__(self):
        return len(self.ids)

    @property
    def frame_count(self):
        return self.frames.shape[1]

    @property
    def feature_dim(self):
        return self.frames.shape[2]

    def labels(self, task):
        if task == "keyword":
            return self.keyword_labels
        if task == "speaker":
            return self.speaker_labels
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")

    def num_classes(self, task):
        return self.num_keywords if task == "keyword" else self.num_speakers

    def features(self):
        """Mean-pooled (N, d) feature matrix, cached."""
        if getattr(self, "_pooled", None) is None:
            self._pooled = self.frames.mean(axis=1)
        return self._pooled

    def equals(self, other):
        return (
            self.num_keywords == other.num_keywords
            and self.num_speakers == other.num_speakers
            and np.array_equal(self.frames, other.frames)
            and np.array_equal(self.keyword_labels, other.keyword_labels)
            and np.array_equal(self.speaker_labels, other.speaker_labels)
            and np.array_equal(self.ids, other.ids)
        )


@dataclass
class Partition:
    train_ids: np.ndarray
    test_ids: np.ndarray
    forget_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    retain_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    task: str = "keyword"


@dataclass(frozen=True)
class ForgetSpec:
    mode: str = "sample"
    ratio: float = 0.05
    target_class: int = 0
    seed: int = 0

    def validate(self):
        if self.mode not in ("sample", "class"):
            raise ValueError(f"forget mode must be 'sample' or 'class', got {self.mode!r}")
        if self.mode == "sample" and not 0.0 <= self.ratio <= 0.10:
            raise ValueError(f"forget ratio must be in [0, 0.10], got {self.ratio}")


def generate(spec: GenSpec) -> Corpus:
    spec.validate()
    K, S, T, d = spec.num_keywords, spec.num_speakers, spec.frames, spec.feature_dim
    n = K * spec.samples_per_class
    rng = np.random.default_rng(spec.seed)
    templates = rng.standard_normal((K, T, d))
    offsets = rng.standard_normal((S, d))
    keywords = np.repeat(np.arange(K), spec.samples_per_class)
    speakers = rng.permutation(np.arange(n) % S)
    noise = rng.standard_normal((n, T, d)) * spec.noise_sigma
    frames = (
        templates[keywords] * spec.keyword_scale
        + offsets[speakers][:, None, :] * spec.speaker_scale
        + noise
    )
    return Corpus(frames, keywords, speakers, np.arange(n, dtype=np.int64), K, S)


def featurize(frames):
    """Mean-pool a (T, d) utterance to a d-vector."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise ValueError("featurize needs a non-empty (T, d) frame matrix")
    return frames.mean(axis=0)


def split(corpus, test_fraction, seed, task="keyword"):
    """Stratified train/test split by the task label."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    if len(corpus) == 0:
        raise ValueError("cannot split an empty corpus")
    labels = corpus.labels(task)
    rng = np.random.default_rng(seed)
    test = []
    for c in np.unique(labels):
        members = corpus.ids[labels == c]
        members = members[rng.permutation(len(members))]
        test.extend(members[: int(round(test_fraction * len(members)))].tolist())
    test_ids = np.array(sorted(test), dtype=np.int64)
    train_ids = np.setdiff1d(corpus.ids, test_ids)
    return Partition(train_ids=train_ids, test_ids=test_ids, task=task)


def select_forget(partition, spec: ForgetSpec, labels):
    """Fill in D_f / D_r. ``labels`` is indexed by utterance id."""
    spec.validate()
    if len(partition.forget_ids):
        raise ValueError("partition already has a forget set")
    train = partition.train_ids
    labels = np.asarray(labels)
    if spec.mode == "sample":
        k = int(round(spec.ratio * len(train)))
        rng = np.random.default_rng(spec.seed)
        forget = np.sort(rng.choice(train, size=k, replace=False)) if k else np.zeros(0, np.int64)
    else:
        forget = train[labels[train] == spec.target_class]
        if len(forget) == 0:
            raise ValueError(f"class {spec.target_class} has no training samples")
    retain = np.setdiff1d(train, forget)
    return Partition(train, partition.test_ids, forget.astype(np.int64), retain, partition.task)


CORPUS_HEADER_PREFIX = "# unlearnlab-corpus"


def corpus_to_text(corpus):
    """Delimited text: header lines then ``id,keyword,speaker,f_0..f_{T*d-1}`` per row."""
    T, d = corpus.frame_count, corpus.feature_dim
    buf = io.StringIO()
    buf.write(f"{CORPUS_HEADER_PREFIX} K={corpus.num_keywords} S={corpus.num_speakers} T={T} d={d}\n")
    buf.write(",".join(["id", "keyword_label", "speaker_label"] + [f"f{i}" for i in range(T * d)]) + "\n")
    flat = corpus.frames.reshape(len(corpus), T * d)
    for i in range(len(corpus)):
        vals = ",".join(repr(float(v)) for v in flat[i])
        buf.write(f"{corpus.ids[i]},{corpus.keyword_labels[i]},{corpus.speaker_labels[i]},{vals}\n")
    return buf.getvalue()


def corpus_from_text(text):
    lines = text.splitlines()
    if not lines or not lines[0].startswith(CORPUS_HEADER_PREFIX):
        raise ValueError("missing corpus header line")
    meta = dict(tok.split("=") for tok in lines[0][len(CORPUS_HEADER_PREFIX):].split())
    K, S, T, d = (int(meta[k]) for k in ("K", "S", "T", "d"))
    rows = [ln.split(",") for ln in lines[2:] if ln.strip()]
    ids = np.array([int(r[0]) for r in rows], dtype=np.int64)
    kw = np.array([int(r[1]) for r in rows], dtype=np.int64)
    sp = np.array([int(r[2]) for r in rows], dtype=np.int64)
    frames = np.array([[float(v) for v in r[3:]] for r in rows], dtype=np.float64)
    if frames.shape[1:] != (T * d,):
        raise ValueError(f"expected {T * d} feature values per row")
    if not np.array_equal(ids, np.arange(len(ids))):
        raise ValueError("sample ids must be 0..N-1 in order")
    if kw.size and (kw.min() < 0 or kw.max() >= K or sp.min() < 0 or sp.max() >= S):
        raise ValueError("label outside the header's class counts")
    return Corpus(frames.reshape(len(rows), T, d), kw, sp, ids, K, S)
