"""Records, gear-v1 files, batching and the synthetic biased generator."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from gear.errors import ConfigError, IngestionError, ParseError
from gear.rng import make_rng

FORMAT_VERSION = "gear-v1"
MODALITIES = ("text", "audio", "video")


@dataclass
class MultimodalRecord:
    id: str
    text: list[int]
    audio: np.ndarray
    video: np.ndarray
    label: float
    meta: dict | None = None

    def __post_init__(self):
        self.audio = np.asarray(self.audio, dtype=np.float64)
        self.video = np.asarray(self.video, dtype=np.float64)
        self.text = [int(t) for t in self.text]
        if not -3.0 <= self.label <= 3.0:
            raise IngestionError(f"record {self.id}: label {self.label} outside [-3, 3]")

    def to_json(self) -> dict:
        out = {
            "id": self.id,
            "text": list(self.text),
            "audio": self.audio.tolist(),
            "video": self.video.tolist(),
            "label": float(self.label),
        }
        if self.meta is not None:
            out["meta"] = self.meta
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, MultimodalRecord):
            return NotImplemented
        return (self.id == other.id and self.text == other.text and self.label == other.label
                and np.array_equal(self.audio, other.audio)
                and np.array_equal(self.video, other.video) and self.meta == other.meta)


@dataclass
class DatasetManifest:
    vocab_size: int
    d_a: int
    d_v: int
    max_len_text: int = 0
    max_len_audio: int = 0
    max_len_video: int = 0
    split: str = ""
    record_count: int = 0
    format_version: str = FORMAT_VERSION
    splits: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = asdict(self)
        d.pop("split")
        d.pop("record_count")
        return d


def validate_record(rec: MultimodalRecord, manifest: DatasetManifest) -> None:
    for name, mat, dim in (("audio", rec.audio, manifest.d_a), ("video", rec.video, manifest.d_v)):
        if mat.ndim != 2 or mat.shape[1] != dim:
            raise IngestionError(
                f"record {rec.id}: {name} has shape {mat.shape}, manifest declares width {dim}")
    if rec.text and (min(rec.text) < 0 or max(rec.text) >= manifest.vocab_size):
        raise IngestionError(f"record {rec.id}: token id outside vocab of {manifest.vocab_size}")


def _record_from_json(obj: dict) -> MultimodalRecord:
    return MultimodalRecord(
        id=str(obj["id"]), text=obj["text"],
        audio=np.asarray(obj["audio"], dtype=np.float64),
        video=np.asarray(obj["video"], dtype=np.float64),
        label=float(obj["label"]), meta=obj.get("meta"),
    )


def write_dataset(out_dir, manifest: DatasetManifest, splits: dict[str, Sequence[MultimodalRecord]]) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for split, recs in splits.items():
        write_split(out / f"{split}.jsonl", recs)
    manifest = DatasetManifest(**{**asdict(manifest), "splits": {
        **manifest.splits, **{s: {"count": len(r)} for s, r in splits.items()}}})
    for split, recs in splits.items():
        for r in recs:
            manifest.max_len_text = max(manifest.max_len_text, len(r.text))
            manifest.max_len_audio = max(manifest.max_len_audio, r.audio.shape[0])
            manifest.max_len_video = max(manifest.max_len_video, r.video.shape[0])
    (out / "manifest.json").write_text(json.dumps(manifest.to_json(), indent=2, sort_keys=True) + "\n")
    return out


def write_split(path, records: Sequence[MultimodalRecord]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), separators=(",", ":")) + "\n")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot read manifest {path}: {exc}") from exc
    if obj.get("format_version") != FORMAT_VERSION:
        raise ParseError(f"unrecognized format version {obj.get('format_version')!r}")
    known = {k: obj[k] for k in DatasetManifest.__dataclass_fields__ if k in obj}
    return DatasetManifest(**known)


def load_dataset(path, split: str | None = None, manifest: DatasetManifest | None = None
                 ) -> tuple[DatasetManifest, list[MultimodalRecord]]:
    """Load ``<split>.jsonl`` (or a directory plus ``split``) with its manifest."""
    path = Path(path)
    if path.is_dir():
        if split is None:
            raise ConfigError("a split name is required when loading from a directory")
        path = path / f"{split}.jsonl"
    split = split or path.stem
    if manifest is None:
        manifest = read_manifest(path.parent / "manifest.json")
    if not path.exists():
        raise IngestionError(f"missing split file {path}")
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = _record_from_json(json.loads(line))
            except IngestionError:
                raise
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"malformed record: {exc}", line=lineno) from exc
            validate_record(rec, manifest)
            records.append(rec)
    expected = manifest.splits.get(split, {}).get("count")
    if expected is not None and expected != len(records):
        raise IngestionError(f"manifest declares {expected} {split} records, file has {len(records)}")
    m = DatasetManifest(**{**asdict(manifest), "split": split, "record_count": len(records)})
    return m, records


# -- array view used by the model -------------------------------------------

@dataclass
class ArrayBatch:
    """Dense, padded arrays for a set of records."""

    ids: list[str]
    text_bow: np.ndarray          # n x vocab, rows are token frequencies (mean-pool weights)
    audio: np.ndarray             # n x l_a x d_a, zero padded
    audio_mask: np.ndarray        # n x l_a, 1/len on valid steps
    video: np.ndarray
    video_mask: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    def take(self, idx) -> "ArrayBatch":
        idx = np.asarray(idx, dtype=np.int64)
        return ArrayBatch([self.ids[i] for i in idx], self.text_bow[idx], self.audio[idx],
                          self.audio_mask[idx], self.video[idx], self.video_mask[idx],
                          self.labels[idx])


def _pad(mats: list[np.ndarray], width: int) -> tuple[np.ndarray, np.ndarray]:
    n = len(mats)
    length = max([m.shape[0] for m in mats], default=0)
    length = max(length, 1)
    out = np.zeros((n, length, width))
    weights = np.zeros((n, length))
    for i, m in enumerate(mats):
        if m.shape[0]:
            out[i, : m.shape[0]] = m
            weights[i, : m.shape[0]] = 1.0 / m.shape[0]
    return out, weights


def to_arrays(records: Sequence[MultimodalRecord], manifest: DatasetManifest) -> ArrayBatch:
    n = len(records)
    bow = np.zeros((n, manifest.vocab_size))
    for i, r in enumerate(records):
        if r.text:
            np.add.at(bow[i], np.asarray(r.text, dtype=np.int64), 1.0 / len(r.text))
    audio, amask = _pad([r.audio.reshape(-1, manifest.d_a) for r in records], manifest.d_a)
    video, vmask = _pad([r.video.reshape(-1, manifest.d_v) for r in records], manifest.d_v)
    labels = np.array([r.label for r in records], dtype=np.float64)
    return ArrayBatch([r.id for r in records], bow, audio, amask, video, vmask, labels)


def epoch_order(n: int, seed: int, epoch: int, shuffle: bool = True) -> np.ndarray:
    if not shuffle:
        return np.arange(n)
    return make_rng(seed, "batches", epoch).permutation(n)


def batch_iter(records: Sequence, n: int, seed: int = 0, shuffle: bool = True,
               epoch: int = 0) -> Iterator[list]:
    """Yield consecutive batches of size ``n`` (last one may be short)."""
    if n < 1:
        raise ConfigError("batch size must be >= 1")
    order = epoch_order(len(records), seed, epoch, shuffle)
    for start in range(0, len(order), n):
        yield [records[i] for i in order[start:start + n]]


def batch_indices(n_records: int, n: int, seed: int = 0, shuffle: bool = True,
                  epoch: int = 0) -> Iterator[np.ndarray]:
    if n < 1:
        raise ConfigError("batch size must be >= 1")
    order = epoch_order(n_records, seed, epoch, shuffle)
    for start in range(0, n_records, n):
        yield order[start:start + n]


# -- synthetic generator ----------------------------------------------------

@dataclass
class SyntheticSpec:
    """Knobs for the planted-bias generator.

    Text strengths are per-token emission probabilities (sentiment tokens
    and the bias token); audio/video strengths scale unit directions in
    feature space. With ``bias_magnitude`` the bias attribute also carries
    |s| (bias-word intensity level, bias-direction length), so only its
    sign is unreliable.
    """

    n_train: int = 4000
    n_test: int = 1000
    rho: float = 0.9
    d_a: int = 8
    d_v: int = 8
    l_t: int = 8
    l_a: int = 4
    l_v: int = 4
    robust_strength: dict = field(default_factory=lambda: {"text": 0.25, "audio": 0.6, "video": 0.6})
    bias_strength: dict = field(default_factory=lambda: {"text": 1.0, "audio": 2.0, "video": 2.0})
    feature_sigma: float = 1.0
    noise_sigma: float = 0.3
    n_levels: int = 3
    words_per_level: int = 3
    bias_words: int = 2
    bias_magnitude: bool = True
    n_filler: int = 24
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError(f"rho must lie in [0, 1], got {self.rho}")
        defaults = {"robust_strength": {"text": 0.25, "audio": 0.6, "video": 0.6},
                    "bias_strength": {"text": 1.0, "audio": 2.0, "video": 2.0}}
        for kind in ("robust_strength", "bias_strength"):
            table = {**defaults[kind], **getattr(self, kind)}
            setattr(self, kind, table)
            for m in MODALITIES:
                if table.get(m, 0.0) < 0:
                    raise ConfigError(f"{kind}[{m}] must be >= 0")
        if self.n_train < 0 or self.n_test < 0:
            raise ConfigError("record counts must be >= 0")
        if min(self.d_a, self.d_v) < 2:
            raise ConfigError("d_a and d_v must be >= 2 to hold the robust and bias directions")

    @classmethod
    def from_dict(cls, obj: dict) -> "SyntheticSpec":
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown synthetic spec fields: {sorted(unknown)}")
        base = cls()
        obj = dict(obj)
        for kind in ("robust_strength", "bias_strength"):
            if kind in obj:
                obj[kind] = {**getattr(base, kind), **obj[kind]}
        return cls(**obj)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class VocabLayout:
    """Token-id ranges: sentiment words by polarity and level, bias words, fillers."""

    n_levels: int
    words_per_level: int
    bias_words: int
    n_filler: int
    bias_levels: int = 1

    @property
    def n_sentiment(self) -> int:
        return 2 * self.n_levels * self.words_per_level

    @property
    def n_bias(self) -> int:
        return 2 * self.bias_levels * self.bias_words

    @property
    def size(self) -> int:
        return self.n_sentiment + self.n_bias + self.n_filler

    def sentiment_word(self, positive: bool, level: int, which: int) -> int:
        base = 0 if positive else self.n_levels * self.words_per_level
        return base + level * self.words_per_level + which

    def bias_word(self, positive: bool, which: int, level: int = 0) -> int:
        half = self.bias_levels * self.bias_words
        return self.n_sentiment + (0 if positive else half) + level * self.bias_words + which

    def filler(self, which: int) -> int:
        return self.n_sentiment + self.n_bias + which

    def is_bias_word(self, tok: int) -> bool:
        return self.n_sentiment <= tok < self.n_sentiment + self.n_bias

    def bias_word_sign(self, tok: int) -> int:
        return 1 if tok < self.n_sentiment + self.n_bias // 2 else -1


def vocab_layout(spec: SyntheticSpec) -> VocabLayout:
    return VocabLayout(spec.n_levels, spec.words_per_level, spec.bias_words, spec.n_filler,
                       bias_levels=spec.n_levels if spec.bias_magnitude else 1)


def _directions(d: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    q, _ = np.linalg.qr(rng.standard_normal((d, 2)))
    return q[:, 0], q[:, 1]


def synthetic_manifest(spec: SyntheticSpec) -> DatasetManifest:
    return DatasetManifest(vocab_size=vocab_layout(spec).size, d_a=spec.d_a, d_v=spec.d_v,
                           max_len_text=spec.l_t, max_len_audio=spec.l_a, max_len_video=spec.l_v)


def _sign(x: float) -> int:
    return 1 if x >= 0 else -1


def generate_synthetic(spec: SyntheticSpec) -> tuple[list[MultimodalRecord], list[MultimodalRecord]]:
    """Draw train and IID-test records with per-modality planted bias.

    Each modality's bias attribute agrees with sign(y) with probability
    ``rho``, independently of the other modalities.
    """
    layout = vocab_layout(spec)
    geo = make_rng(spec.seed, "directions")
    dirs = {"audio": _directions(spec.d_a, geo), "video": _directions(spec.d_v, geo)}
    out = []
    for split, n in (("train", spec.n_train), ("test", spec.n_test)):
        rng = make_rng(spec.seed, "records", split)
        records = []
        for i in range(n):
            records.append(_draw_record(f"{split}-{i:06d}", spec, layout, dirs, rng))
        out.append(records)
    return out[0], out[1]


def draw_sentiment(rng: np.random.Generator) -> float:
    return float(rng.uniform(-3.0, 3.0))


def synthesize_one(spec: SyntheticSpec, s: float, rid: str = "probe", stream: int = 0) -> MultimodalRecord:
    """One record with a caller-chosen latent sentiment ``s``."""
    geo = make_rng(spec.seed, "directions")
    dirs = {"audio": _directions(spec.d_a, geo), "video": _directions(spec.d_v, geo)}
    return _draw_record(rid, spec, vocab_layout(spec), dirs, make_rng(spec.seed, "probe", stream), s=s)


def _draw_record(rid, spec: SyntheticSpec, layout: VocabLayout, dirs, rng, s: float | None = None):
    if s is None:
        s = draw_sentiment(rng)
    y = s + (rng.normal(0.0, spec.noise_sigma) if spec.noise_sigma > 0 else 0.0)
    y = float(min(3.0, max(-3.0, y)))
    sgn = _sign(s)
    level = min(spec.n_levels - 1, int(abs(s) / 3.0 * spec.n_levels))
    # bias alignment is against the observed label sign, so rho=1 is exact even with noise
    y_sgn = _sign(y)
    bias_attr = {}
    for m in MODALITIES:
        bias_attr[m] = y_sgn if rng.random() < spec.rho else -y_sgn

    tokens = []
    p_sent = min(1.0, spec.robust_strength["text"])
    for _ in range(spec.l_t - 1):
        if rng.random() < p_sent:
            tokens.append(layout.sentiment_word(sgn > 0, level, int(rng.integers(spec.words_per_level))))
        else:
            tokens.append(layout.filler(int(rng.integers(spec.n_filler))))
    if rng.random() < min(1.0, spec.bias_strength["text"]):
        tokens.append(layout.bias_word(bias_attr["text"] > 0, int(rng.integers(spec.bias_words)),
                                       level if spec.bias_magnitude else 0))
    else:
        tokens.append(layout.filler(int(rng.integers(spec.n_filler))))
    order = rng.permutation(len(tokens))
    tokens = [tokens[j] for j in order]

    mats = {}
    for m, length, d in (("audio", spec.l_a, spec.d_a), ("video", spec.l_v, spec.d_v)):
        robust_dir, bias_dir = dirs[m]
        bias_len = spec.bias_strength[m] * (abs(s) / 3.0 if spec.bias_magnitude else 1.0)
        centre = (spec.robust_strength[m] * s / 3.0) * robust_dir + bias_len * bias_attr[m] * bias_dir
        noise = rng.normal(0.0, spec.feature_sigma, size=(length, d)) if spec.feature_sigma > 0 \
            else np.zeros((length, d))
        mats[m] = centre[None, :] + noise

    meta = {
        "s": s,
        "robust_attr": {m: sgn for m in MODALITIES},
        "biased_attr": bias_attr,
    }
    return MultimodalRecord(rid, tokens, mats["audio"], mats["video"], y, meta)


def bias_label_agreement(records: Sequence[MultimodalRecord]) -> dict[str, float]:
    """Fraction of records whose planted bias sign equals the label sign, per modality."""
    if not records:
        return {m: float("nan") for m in MODALITIES}
    out = {}
    for m in MODALITIES:
        agree = [r.meta["biased_attr"][m] == _sign(r.label) for r in records if r.meta]
        out[m] = float(np.mean(agree)) if agree else float("nan")
    return out


def bias_label_correlation(records: Sequence[MultimodalRecord]) -> dict[str, float]:
    """Pearson correlation between planted bias sign and label sign, per modality."""
    out = {}
    for m in MODALITIES:
        pairs = [(r.meta["biased_attr"][m], _sign(r.label)) for r in records if r.meta]
        if len(pairs) < 2:
            out[m] = float("nan")
            continue
        a, b = np.array(pairs, dtype=np.float64).T
        if a.std() == 0 or b.std() == 0:
            out[m] = 1.0 if np.all(a == b) else (-1.0 if np.all(a == -b) else float("nan"))
        else:
            out[m] = float(np.corrcoef(a, b)[0, 1])
    return out


def split_validation(records: Sequence, fraction: float, seed: int) -> tuple[list, list]:
    n_val = int(math.floor(len(records) * fraction))
    order = make_rng(seed, "val-split").permutation(len(records))
    val_idx = set(order[:n_val].tolist())
    train = [r for i, r in enumerate(records) if i not in val_idx]
    val = [r for i, r in enumerate(records) if i in val_idx]
    return train, val
