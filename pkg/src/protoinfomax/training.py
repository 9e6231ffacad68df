"""Episodic training loop, optimizer, and checkpoint persistence.

One update step = one episode: the loss aggregates all of the episode's
target queries, whose count is set by ``batch_size`` (split between ID
and OOD queries roughly 5:2, the ratio of the evaluation defaults).
Validation runs after every epoch on a held-out-domain corpus; the
checkpoint with the best validation ID accuracy (1 - CER_id) is kept.
A non-finite loss aborts training and returns the last good checkpoint.

Checkpoints are a small versioned binary container: magic, format
version, a JSON metadata block (train config, encoder shape, vocabulary,
validation snapshot), then named float64 tensors, raw little-endian.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import numerics as nm
from . import protomax as pm
from .corpus import Corpus, Episode, EpisodeSpec, sample_episode
from .encoder import EncoderConfig, EncoderParams, GRUWeights, encode_batch, encode_keywords_batch, init_encoder
from .evaluation import compute_metrics, score_meta_test, select_threshold
from .features import IdfTable, Vocabulary, build_vocab, extract_keywords, fit_idf, tokenize

MAGIC = b"PIMXCKPT"
FORMAT_VERSION = 1
MAX_EPOCHS = 60


class CheckpointFormatError(ValueError):
    """Corrupt or truncated checkpoint container."""


class CheckpointVersionError(ValueError):
    """Checkpoint written by an incompatible format version."""


@dataclass
class ModelAssets:
    """Fitted lexical state a checkpoint must carry to score new text."""

    vocab: Vocabulary
    idf: IdfTable


@dataclass
class TrainConfig:
    model: str = "protoinfomax"
    epochs: int = MAX_EPOCHS
    episodes_per_epoch: int = 100
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    n_way: int = 2
    k_shot: int = 10
    n_id_queries: int | None = None
    n_ood_queries: int | None = None
    margin: float = pm.DEFAULT_MARGIN
    grad_clip: float = 5.0
    d_emb: int = 100
    hidden: int = 100
    attn_queries: int = 5
    max_len: int = 64
    max_vocab: int | None = None

    def __post_init__(self):
        if self.model not in pm.MODEL_TAGS:
            raise ValueError(f"unknown model {self.model!r}; expected one of {pm.MODEL_TAGS}")
        if not (1 <= self.epochs <= MAX_EPOCHS):
            raise ValueError(f"epochs must be in [1, {MAX_EPOCHS}]")
        for name in ("episodes_per_epoch", "batch_size", "n_way", "k_shot"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def episode_spec(self) -> EpisodeSpec:
        """Query counts derive from batch_size unless set explicitly."""
        n_ood = self.n_ood_queries
        if n_ood is None:
            n_ood = max(1, round(self.batch_size * 2 / 7))
        n_id = self.n_id_queries
        if n_id is None:
            n_id = max(1, self.batch_size - n_ood)
        return EpisodeSpec(
            n_classes=self.n_way, k_shot=self.k_shot, n_id_queries=n_id, n_ood_queries=n_ood,
            seed=self.seed,
        )

    def encoder_config(self, vocab_size: int) -> EncoderConfig:
        return EncoderConfig(
            vocab_size=vocab_size, d_emb=self.d_emb, hidden=self.hidden,
            attn_queries=self.attn_queries, max_len=self.max_len,
        )


@dataclass
class Checkpoint:
    model: str
    params: EncoderParams
    assets: ModelAssets
    train_config: dict
    epoch: int = 0
    val_metrics: dict = field(default_factory=dict)


@dataclass
class EpochLogRow:
    epoch: int
    loss: float
    val_eer: float
    val_cer_id: float
    val_cer_all: float


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[EpochLogRow]
    diverged: bool = False


class Adam:
    """Adaptive-moment optimizer with global-norm clipping and frozen rows."""

    def __init__(self, named_params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, frozen_rows: dict[str, tuple[int, ...]] | None = None):
        self.named_params = list(named_params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.frozen_rows = frozen_rows or {}
        self.t = 0
        self._m = [np.zeros_like(t.data) for _, t in self.named_params]
        self._v = [np.zeros_like(t.data) for _, t in self.named_params]

    def zero_grad(self) -> None:
        for _, t in self.named_params:
            t.zero_grad()

    def step(self, grad_clip: float | None = None) -> float:
        """Apply one update from accumulated gradients; returns the global
        gradient norm before clipping."""
        grads = []
        for name, t in self.named_params:
            g = np.zeros_like(t.data) if t.grad is None else t.grad
            rows = self.frozen_rows.get(name)
            if rows is not None and g is t.grad:
                g = g.copy()
                g[list(rows)] = 0.0
            grads.append(g)
        norm = nm.global_norm(grads)
        if grad_clip is not None and norm > grad_clip and norm > 0.0:
            scale = grad_clip / norm
            grads = [g * scale for g in grads]
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for (name, t), g, m, v in zip(self.named_params, grads, self._m, self._v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            t.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        return norm


def encode_episode(episode: Episode, params: EncoderParams, assets: ModelAssets,
                   k_shot: int, need_keywords: bool) -> pm.EpisodeEncodings:
    """Tokenize and encode a whole episode in one batch, then slice."""
    support = [s for cls in episode.support for s in cls]
    id_sents = [s for s, _ in episode.id_queries]
    sents = support + id_sents + list(episode.ood_queries)
    toks = [tokenize(s.text, assets.vocab, params.config.max_len) for s in sents]
    enc = encode_batch(toks, params)
    n_sup, n_id = len(support), len(id_sents)
    cut1, cut2 = n_sup, n_sup + n_id
    out = pm.EpisodeEncodings(
        n_classes=len(episode.class_labels),
        k_shot=k_shot,
        support=nm.slice_axis(enc, 0, 0, cut1),
        id_queries=nm.slice_axis(enc, 0, cut1, cut2),
        ood_queries=nm.slice_axis(enc, 0, cut2, len(sents)),
        id_labels=np.array([ci for _, ci in episode.id_queries], dtype=np.intp),
    )
    if need_keywords:
        kw = [extract_keywords(t, assets.idf) for t in toks]
        kenc = encode_keywords_batch(kw, params)
        out.support_kw = nm.slice_axis(kenc, 0, 0, cut1)
        out.id_queries_kw = nm.slice_axis(kenc, 0, cut1, cut2)
        out.ood_queries_kw = nm.slice_axis(kenc, 0, cut2, len(sents))
    return out


def _snapshot(params: EncoderParams) -> dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in params.parameters()}


def _restore(params: EncoderParams, snap: dict[str, np.ndarray]) -> None:
    for name, t in params.parameters():
        t.data = snap[name].copy()


def _validate(params, assets, val_corpus, spec, seed):
    records = score_meta_test(params, assets, val_corpus, spec, seed=seed)
    tau = select_threshold(records).tau
    report = compute_metrics(records, tau)
    return report


def train(config: TrainConfig, train_corpus: Corpus, val_corpus: Corpus) -> TrainResult:
    """Full training run; deterministic for a fixed config and corpora."""
    vocab = build_vocab(train_corpus, max_size=config.max_vocab)
    idf = fit_idf(train_corpus, vocab, max_len=config.max_len)
    assets = ModelAssets(vocab=vocab, idf=idf)
    params = init_encoder(config.encoder_config(len(vocab)), seed=config.seed)
    optimizer = Adam(params.parameters(), lr=config.learning_rate,
                     frozen_rows=params.frozen_rows)
    spec = config.episode_spec()
    need_kw = config.model == "protoinfomaxpp"

    log: list[EpochLogRow] = []
    best_snap = _snapshot(params)
    best_acc = -1.0
    best_epoch = 0
    best_val: dict = {}
    diverged = False

    for epoch in range(config.epochs):
        losses = []
        for i in range(config.episodes_per_epoch):
            rng = np.random.default_rng([config.seed, epoch, i])
            episode = sample_episode(train_corpus, spec, rng)
            optimizer.zero_grad()
            with nm.Tape() as tape:
                batch = encode_episode(episode, params, assets, spec.k_shot, need_kw)
                loss = pm.episode_loss(config.model, batch, margin=config.margin)
                value = loss.item()
                if not np.isfinite(value):
                    diverged = True
                    break
                tape.backward(loss.total)
            optimizer.step(grad_clip=config.grad_clip)
            losses.append(value)
        if diverged:
            break
        report = _validate(params, assets, val_corpus, spec, seed=config.seed)
        log.append(
            EpochLogRow(
                epoch=epoch,
                loss=float(np.mean(losses)),
                val_eer=report.eer,
                val_cer_id=report.cer_id,
                val_cer_all=report.cer_all,
            )
        )
        acc = 1.0 - report.cer_id
        if acc > best_acc:
            best_acc = acc
            best_snap = _snapshot(params)
            best_epoch = epoch
            best_val = {"eer": report.eer, "cer_id": report.cer_id, "cer_all": report.cer_all}

    _restore(params, best_snap)
    checkpoint = Checkpoint(
        model=config.model,
        params=params,
        assets=assets,
        train_config=asdict(config),
        epoch=best_epoch,
        val_metrics=best_val,
    )
    return TrainResult(checkpoint=checkpoint, log=log, diverged=diverged)


def save_epoch_log(log, path) -> None:
    """CSV columns: epoch,loss,val_eer,val_cer_id,val_cer_all."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,loss,val_eer,val_cer_id,val_cer_all\n")
        for row in log:
            fh.write(
                f"{row.epoch},{row.loss!r},{row.val_eer!r},{row.val_cer_id!r},{row.val_cer_all!r}\n"
            )


# ------------------------------------------------------------- checkpoint IO

def _named_tensors(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    out = [(name, t.data) for name, t in ckpt.params.parameters()]
    out.append(("idf_values", ckpt.assets.idf.values))
    return out


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    meta = {
        "model": ckpt.model,
        "train_config": ckpt.train_config,
        "encoder": {
            "vocab_size": ckpt.params.config.vocab_size,
            "d_emb": ckpt.params.config.d_emb,
            "hidden": ckpt.params.config.hidden,
            "attn_queries": ckpt.params.config.attn_queries,
            "max_len": ckpt.params.config.max_len,
        },
        "vocab": ckpt.assets.vocab.tokens,
        "idf_documents": ckpt.assets.idf.n_documents,
        "epoch": ckpt.epoch,
        "val_metrics": ckpt.val_metrics,
    }
    blob = json.dumps(meta, sort_keys=True, ensure_ascii=False).encode("utf-8")
    tensors = _named_tensors(ckpt)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointFormatError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        if _read_exact(fh, len(MAGIC), "magic") != MAGIC:
            raise CheckpointFormatError(f"{path} is not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != FORMAT_VERSION:
            raise CheckpointVersionError(f"format version {version}, supported: {FORMAT_VERSION}")
        (meta_len,) = struct.unpack("<Q", _read_exact(fh, 8, "metadata length"))
        meta = json.loads(_read_exact(fh, meta_len, "metadata").decode("utf-8"))
        (n_tensors,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(n_tensors):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "tensor name length"))
            name = _read_exact(fh, name_len, "tensor name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(fh, 1, "tensor rank"))
            dims = [
                struct.unpack("<I", _read_exact(fh, 4, "tensor dims"))[0] for _ in range(rank)
            ]
            count = int(np.prod(dims)) if dims else 1
            raw = _read_exact(fh, count * 8, f"tensor {name!r} data")
            tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).astype(np.float64)

    enc_meta = meta["encoder"]
    config = EncoderConfig(
        vocab_size=enc_meta["vocab_size"],
        d_emb=enc_meta["d_emb"],
        hidden=enc_meta["hidden"],
        attn_queries=enc_meta["attn_queries"],
        max_len=enc_meta["max_len"],
    )

    def tensor(name: str) -> nm.Tensor:
        if name not in tensors:
            raise CheckpointFormatError(f"checkpoint is missing tensor {name!r}")
        return nm.Tensor(tensors[name], requires_grad=True)

    def direction(prefix: str) -> GRUWeights:
        return GRUWeights(**{k: tensor(f"{prefix}.{k}") for k in
                             ("wz", "wr", "wh", "uz", "ur", "uh", "bz", "br", "bh")})

    params = EncoderParams(
        config=config,
        embedding=tensor("embedding"),
        fwd=direction("fwd"),
        bwd=direction("bwd"),
        attn_q=tensor("attn_q"),
        kw_proj=tensor("kw_proj") if "kw_proj" in tensors else None,
    )
    vocab = Vocabulary(list(meta["vocab"]))
    idf = IdfTable(values=tensors["idf_values"], n_documents=meta["idf_documents"])
    return Checkpoint(
        model=meta["model"],
        params=params,
        assets=ModelAssets(vocab=vocab, idf=idf),
        train_config=meta["train_config"],
        epoch=meta["epoch"],
        val_metrics=meta["val_metrics"],
    )
