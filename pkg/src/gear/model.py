"""The debiasing network.

Each modality has a robust and a biased extractor with identical
architecture. Their latents are concatenated and fed to a robust and a
biased linear layer; the half of the concatenation that belongs to the
*other* path is gradient-stopped, which is what confines the prediction
losses to the robust parameters and the bias losses to the biased ones.
"""
from __future__ import annotations

import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from gear.autodiff import (
    Tensor,
    add,
    concat_last,
    matmul,
    mul,
    relu,
    reshape,
    row_softmax,
    stack,
    stop_gradient,
    sum_,
    take_rows,
    transpose,
)
from gear.data import MODALITIES, ArrayBatch, DatasetManifest, MultimodalRecord, to_arrays
from gear.errors import ConfigError, IngestionError, ParseError
from gear.rng import make_rng

KAPPAS = ("R", "B")
CKPT_FORMAT = "gear-ckpt-v1"


@dataclass
class ModelConfig:
    vocab_size: int
    d_a: int
    d_v: int
    d_s: int = 32
    heads: int = 4
    d_text: int = 32
    d_hidden: int = 32

    def __post_init__(self):
        if self.heads < 1 or self.d_s % self.heads:
            raise ConfigError(f"heads={self.heads} must divide d_s={self.d_s}")
        if min(self.vocab_size, self.d_a, self.d_v, self.d_s, self.d_text, self.d_hidden) < 1:
            raise ConfigError("model dimensions must be positive")

    @classmethod
    def for_manifest(cls, manifest: DatasetManifest, **kw) -> "ModelConfig":
        return cls(vocab_size=manifest.vocab_size, d_a=manifest.d_a, d_v=manifest.d_v, **kw)


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


@dataclass
class LatentBatch:
    robust: dict[str, Tensor]
    biased: dict[str, Tensor]
    labels: np.ndarray
    biased_swapped: dict[str, Tensor] = field(default_factory=dict)
    swap_perm: dict[str, np.ndarray] = field(default_factory=dict)
    labels_swapped: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class FeatureBatch:
    robust: dict[str, Tensor]
    biased: dict[str, Tensor]
    robust_swapped: dict[str, Tensor]
    biased_swapped: dict[str, Tensor]


def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class GearModel:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        c = config
        for kappa in KAPPAS:
            for m in MODALITIES:
                rng = make_rng(seed, "init", "enc", kappa, m)
                pre = f"enc.{kappa}.{m}"
                if m == "text":
                    self._add(f"{pre}.emb", rng.standard_normal((c.vocab_size, c.d_text)))
                    self._add(f"{pre}.W", _uniform(rng, (c.d_text, c.d_s), c.d_text))
                    self._add(f"{pre}.b", _uniform(rng, (c.d_s,), c.d_text))
                else:
                    d_in = c.d_a if m == "audio" else c.d_v
                    self._add(f"{pre}.W_in", _uniform(rng, (d_in, c.d_hidden), d_in))
                    self._add(f"{pre}.b_in", _uniform(rng, (c.d_hidden,), d_in))
                    self._add(f"{pre}.W", _uniform(rng, (c.d_hidden, c.d_s), c.d_hidden))
                    self._add(f"{pre}.b", _uniform(rng, (c.d_s,), c.d_hidden))
                rng = make_rng(seed, "init", "lin", kappa, m)
                self._add(f"lin.{kappa}.{m}.W", _uniform(rng, (2 * c.d_s, c.d_s), 2 * c.d_s))
                self._add(f"lin.{kappa}.{m}.b", _uniform(rng, (c.d_s,), 2 * c.d_s))
        rng = make_rng(seed, "init", "fusion")
        for name in ("Wq", "Wk", "Wv", "Wo"):
            self._add(f"fusion.{name}", _uniform(rng, (c.d_s, c.d_s), c.d_s))
        self._add("cls.w", _uniform(rng, (3 * c.d_s, 1), 3 * c.d_s))
        self._add("cls.b", _uniform(rng, (1,), 3 * c.d_s))
        for m in MODALITIES:
            rng = make_rng(seed, "init", "bias_head", m)
            self._add(f"bias_head.{m}.w", _uniform(rng, (c.d_s, 1), c.d_s))
            self._add(f"bias_head.{m}.b", _uniform(rng, (1,), c.d_s))

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value, grad_enabled=True, name=name)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    # -- parameter groups ---------------------------------------------------
    @staticmethod
    def is_biased_param(name: str) -> bool:
        return name.startswith(("enc.B.", "lin.B.", "bias_head."))

    def robust_params(self) -> list[Tensor]:
        return [p for n, p in self.params.items() if not self.is_biased_param(n)]

    def biased_params(self) -> list[Tensor]:
        return [p for n, p in self.params.items() if self.is_biased_param(n)]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    # -- extractors -----------------------------------------------------------
    def _encode_one(self, kappa: str, m: str, batch: ArrayBatch) -> Tensor:
        pre = f"enc.{kappa}.{m}"
        p = self.params
        if m == "text":
            pooled = matmul(Tensor(batch.text_bow), p[f"{pre}.emb"])
        else:
            x = batch.audio if m == "audio" else batch.video
            w = batch.audio_mask if m == "audio" else batch.video_mask
            h = relu(add(matmul(Tensor(x), p[f"{pre}.W_in"]), p[f"{pre}.b_in"]))
            pooled = sum_(mul(h, w[:, :, None]), axis=1)
        return add(matmul(pooled, p[f"{pre}.W"]), p[f"{pre}.b"])

    def encode(self, batch: ArrayBatch) -> LatentBatch:
        """Robust and biased latents for every modality (no swap yet)."""
        if len(batch) == 0:
            raise IngestionError("cannot encode an empty batch")
        c = self.config
        if batch.text_bow.shape[1] != c.vocab_size or batch.audio.shape[2] != c.d_a \
                or batch.video.shape[2] != c.d_v:
            raise IngestionError(
                f"batch dims (vocab={batch.text_bow.shape[1]}, d_a={batch.audio.shape[2]}, "
                f"d_v={batch.video.shape[2]}) do not match model ({c.vocab_size}, {c.d_a}, {c.d_v})")
        robust = {m: self._encode_one("R", m, batch) for m in MODALITIES}
        biased = {m: self._encode_one("B", m, batch) for m in MODALITIES}
        return LatentBatch(robust=robust, biased=biased, labels=batch.labels)

    def encode_records(self, records: list[MultimodalRecord], manifest: DatasetManifest) -> LatentBatch:
        return self.encode(to_arrays(records, manifest))

    # -- disentangling linears ----------------------------------------------
    def _linear(self, kappa: str, m: str, v: Tensor) -> Tensor:
        p = self.params
        return relu(add(matmul(v, p[f"lin.{kappa}.{m}.W"]), p[f"lin.{kappa}.{m}.b"]))

    def robust_feature(self, m: str, v_r: Tensor, v_b: Tensor) -> Tensor:
        return self._linear("R", m, concat_last([v_r, stop_gradient(v_b)]))

    def biased_feature(self, m: str, v_r: Tensor, v_b: Tensor) -> Tensor:
        return self._linear("B", m, concat_last([stop_gradient(v_r), v_b]))

    def disentangle(self, lat: LatentBatch, with_swapped: bool = True) -> FeatureBatch:
        fr, fb, frh, fbh = {}, {}, {}, {}
        for m in MODALITIES:
            v_r, v_b = lat.robust[m], lat.biased[m]
            fr[m] = self.robust_feature(m, v_r, v_b)
            fb[m] = self.biased_feature(m, v_r, v_b)
            if with_swapped:
                v_bh = lat.biased_swapped.get(m, v_b)
                if v_bh is v_b:
                    frh[m], fbh[m] = fr[m], fb[m]
                else:
                    frh[m] = self.robust_feature(m, v_r, v_bh)
                    fbh[m] = self.biased_feature(m, v_r, v_bh)
        return FeatureBatch(fr, fb, frh, fbh)

    # -- fusion and heads ----------------------------------------------------
    def fuse_robust(self, f_t: Tensor, f_a: Tensor, f_v: Tensor, return_attention: bool = False):
        """Multi-head self-attention over the three robust features; returns batch x 3*d_s."""
        c = self.config
        p = self.params
        n = f_t.shape[0]
        u, h = c.heads, c.d_s // c.heads
        m_mat = stack([f_t, f_a, f_v], axis=1)                       # n x 3 x d_s

        def heads_of(w: Tensor) -> Tensor:
            x = reshape(matmul(m_mat, w), (n, 3, u, h))
            return transpose(x, (0, 2, 1, 3))                        # n x U x 3 x h

        q, k, v = heads_of(p["fusion.Wq"]), heads_of(p["fusion.Wk"]), heads_of(p["fusion.Wv"])
        scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(c.d_s))
        att = row_softmax(scores)
        o = matmul(att, v)                                           # n x U x 3 x h
        o = reshape(transpose(o, (0, 2, 1, 3)), (n, 3, c.d_s))       # [O_1 ... O_U] per row
        m_hat = matmul(o, p["fusion.Wo"])
        f_o = reshape(m_hat, (n, 3 * c.d_s))
        return (f_o, att) if return_attention else f_o

    def predict_sentiment(self, f_o: Tensor) -> Tensor:
        n = f_o.shape[0]
        return reshape(add(matmul(f_o, self.params["cls.w"]), self.params["cls.b"]), (n,))

    def predict_bias(self, m: str, f_b: Tensor) -> Tensor:
        n = f_b.shape[0]
        p = self.params
        return reshape(add(matmul(f_b, p[f"bias_head.{m}.w"]), p[f"bias_head.{m}.b"]), (n,))

    # -- inference -------------------------------------------------------------
    def predict(self, batch: ArrayBatch) -> np.ndarray:
        """Robust-path sentiment prediction with swap disabled."""
        if len(batch) == 0:
            return np.zeros(0)
        lat = self.encode(batch)
        fr = {m: self.robust_feature(m, lat.robust[m], lat.biased[m]) for m in MODALITIES}
        f_o = self.fuse_robust(fr["text"], fr["audio"], fr["video"])
        return self.predict_sentiment(f_o).data.copy()

    # -- persistence ---------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise ParseError(f"checkpoint missing parameters: {sorted(missing)}")
        for n, p in self.params.items():
            arr = np.asarray(state[n], dtype=np.float64)
            if arr.shape != p.shape:
                raise ParseError(f"checkpoint shape for {n} is {arr.shape}, expected {p.shape}")
            p.data = arr.copy()

    def save(self, path, extra: dict | None = None) -> None:
        meta = {"format": CKPT_FORMAT, "model_config": asdict(self.config),
                "config_hash": config_hash(extra if extra is not None else asdict(self.config)),
                "extra": extra or {}}
        buf = io.BytesIO()
        np.savez(buf, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
                 **self.state_dict())
        Path(path).write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path) -> tuple["GearModel", dict]:
        try:
            with np.load(Path(path), allow_pickle=False) as z:
                meta = json.loads(z["__meta__"].tobytes().decode())
                state = {k: z[k] for k in z.files if k != "__meta__"}
        except (OSError, ValueError, KeyError) as exc:
            raise ParseError(f"cannot read checkpoint {path}: {exc}") from exc
        if meta.get("format") != CKPT_FORMAT:
            raise ParseError(f"unrecognized checkpoint format {meta.get('format')!r}")
        model = cls(ModelConfig(**meta["model_config"]))
        model.load_state_dict(state)
        return model, meta


def swap_perm(n: int, rng: np.random.Generator | None, enabled: bool) -> np.ndarray:
    """Uniform permutation of the batch (self-maps allowed) or identity."""
    if not enabled or n <= 1 or rng is None:
        return np.arange(n)
    return rng.permutation(n)


def swap_biased(lat: LatentBatch, rng: np.random.Generator | None, enabled: bool,
                independent: bool = False) -> LatentBatch:
    """Fill in swapped biased latents and labels.

    One permutation is shared by all modalities unless ``independent``.
    """
    n = lat.labels.shape[0]
    shared = swap_perm(n, rng, enabled)
    for m in MODALITIES:
        perm = swap_perm(n, rng, enabled) if independent else shared
        lat.swap_perm[m] = perm
        if np.array_equal(perm, np.arange(n)):
            lat.biased_swapped[m] = lat.biased[m]
        else:
            lat.biased_swapped[m] = take_rows(lat.biased[m], perm)
        lat.labels_swapped[m] = lat.labels[perm]
    return lat
