"""Stochastic multi-source training.

Every iteration picks one learning source uniformly at random, draws a batch
with replacement from that source's labeled tracks, crops a fixed-length
chunk from each track, and applies one Adam update to the shared chain plus
that source's branch and head. An epoch is l*m iterations, where l is the
iteration count needed to visit the training set once at the configured
batch size and m is the number of sources. For the `self` source the batch
is balanced pairs: half two disjoint crops of one track, half crops of two
different tracks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import arch, nn, tensorio


class TrainerError(RuntimeError):
    pass


@dataclass
class TrainingCorpus:
    """Standardized spectrogram tensors plus per-source factor labels."""

    spectrograms: dict
    labels: dict
    train_ids: list
    val_ids: list

    def __post_init__(self) -> None:
        overlap = set(self.train_ids) & set(self.val_ids)
        if overlap:
            raise TrainerError(f"train/validation split overlaps: {sorted(overlap)[:3]}")
        for source, table in self.labels.items():
            missing = [t for t in table if t not in self.spectrograms]
            if missing:
                raise TrainerError(f"source {source!r} labels unknown tracks: {missing[:3]}")

    @property
    def sources(self) -> tuple:
        return tuple(s for s in arch.SOURCES if s == "self" or s in self.labels)

    def labeled_ids(self, source: str, ids) -> list:
        if source == "self":
            return list(ids)
        table = self.labels[source]
        return [t for t in ids if t in table]

    def content_hash(self) -> str:
        digest_parts = []
        for track in sorted(self.spectrograms):
            digest_parts.append(np.asarray(self.spectrograms[track], dtype=np.float32))
        for source in sorted(self.labels):
            for track in sorted(self.labels[source]):
                digest_parts.append(np.asarray(self.labels[source][track], dtype=np.float64))
        ids_blob = ("|".join(sorted(self.spectrograms)) + "#" + "|".join(self.train_ids)).encode()
        return tensorio.hash_bytes(ids_blob, tensorio.hash_arrays(digest_parts).encode())


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    learning_rate: float = nn.DEFAULT_LEARNING_RATE
    l2: float = nn.DEFAULT_L2
    chunk: int = 216
    seed: int = 0
    val_interval: int = 0  # every k epochs; 0 disables validation passes

    def __post_init__(self) -> None:
        if min(self.epochs, self.batch_size, self.chunk) < 1:
            raise TrainerError("epochs, batch size and chunk must be positive")
        if self.learning_rate <= 0 or self.l2 < 0:
            raise TrainerError("bad optimizer settings")


@dataclass
class TrainResult:
    net: arch.BranchedNetwork
    loss_log: list
    val_log: list
    manifest: dict = field(default_factory=dict)


def crop_chunk(x, chunk: int, rng) -> np.ndarray:
    """Contiguous random slice of `chunk` frames, all channels and bands."""
    values = x.values if hasattr(x, "values") else np.asarray(x)
    frames = values.shape[1]
    if frames < chunk:
        raise TrainerError(f"too few frames: {frames} < {chunk}")
    offset = int(rng.integers(0, frames - chunk + 1))
    return values[:, offset : offset + chunk, :]


def center_chunk(x, chunk: int) -> np.ndarray:
    values = x.values if hasattr(x, "values") else np.asarray(x)
    frames = values.shape[1]
    if frames < chunk:
        raise TrainerError(f"too few frames: {frames} < {chunk}")
    offset = (frames - chunk) // 2
    return values[:, offset : offset + chunk, :]


def sample_self_batch(corpus: TrainingCorpus, batch_size: int, rng, chunk: int = 216):
    """Balanced same/different-track pair batch.

    Returns (left, right, labels, pairs): label 1 pairs are two
    non-overlapping crops of one track, label 0 pairs come from two distinct
    tracks; `pairs` lists the (left, right) track ids.
    """
    if batch_size % 2 != 0:
        raise TrainerError("pair batches need an even batch size")
    ids = [t for t in corpus.train_ids if corpus.spectrograms[t].shape[1] >= chunk]
    if len(ids) < 2:
        raise TrainerError("need at least two tracks for pair sampling")
    long_ids = [t for t in ids if corpus.spectrograms[t].shape[1] >= 2 * chunk]
    if not long_ids:
        raise TrainerError(f"no track long enough for two disjoint {chunk}-frame crops")
    half = batch_size // 2
    left, right, labels, pairs = [], [], [], []
    for _ in range(half):
        track = long_ids[int(rng.integers(len(long_ids)))]
        values = corpus.spectrograms[track]
        frames = values.shape[1]
        first = int(rng.integers(0, frames - 2 * chunk + 1))
        second = int(rng.integers(first + chunk, frames - chunk + 1))
        if rng.random() < 0.5:
            first, second = second, first
        left.append(values[:, first : first + chunk, :])
        right.append(values[:, second : second + chunk, :])
        labels.append(1)
        pairs.append((track, track))
    for _ in range(half):
        i = int(rng.integers(len(ids)))
        j = int(rng.integers(len(ids) - 1))
        if j >= i:
            j += 1
        left.append(crop_chunk(corpus.spectrograms[ids[i]], chunk, rng))
        right.append(crop_chunk(corpus.spectrograms[ids[j]], chunk, rng))
        labels.append(0)
        pairs.append((ids[i], ids[j]))
    return np.stack(left), np.stack(right), np.array(labels), pairs


def _merge_grads(a, b):
    if a is None:
        return b
    for table_a, table_b in zip(a, b):
        for key, value in table_b.items():
            table_a[key] = table_a[key] + value if key in table_a else value
    return a


def _pair_targets(labels: np.ndarray) -> np.ndarray:
    targets = np.zeros((labels.size, 2))
    targets[np.arange(labels.size), labels] = 1.0
    return targets


class _ChainOptimizers:
    def __init__(self, net: arch.BranchedNetwork, cfg: TrainConfig):
        self.states = {
            name: nn.AdamState(params, learning_rate=cfg.learning_rate)
            for name, layers, params in net.chains()
            if layers
        }
        self.l2 = cfg.l2

    def step(self, name, params, grads):
        nn.adam_step(params, grads, self.states[name], l2=self.l2)


def _source_step(net, corpus, cfg, source, rng, optimizers, mode="train"):
    """One forward/backward/update on a batch from `source`; returns loss."""
    if source == "self":
        left, right, labels, _ = sample_self_batch(corpus, cfg.batch_size, rng, cfg.chunk)
        left = left.astype(net.dtype)
        right = right.astype(net.dtype)
        feats_l, caches_l = net.feature_forward(left, source, mode=mode, rng=rng)
        feats_r, caches_r = net.feature_forward(right, source, mode=mode, rng=rng)
        concat = np.concatenate([feats_l, feats_r], axis=1)
        probs, head_cache = nn.forward(net.head_layers[source], net.head_params[source], concat, mode=mode, rng=rng)
        loss, grad_logits = nn.kl_loss(_pair_targets(labels), probs)
        if mode != "train":
            return loss
        head_grads, grad_concat = nn.backward(head_cache, grad_logits, from_logits=True)
        d = feats_l.shape[1]
        shared_grads, branch_grads = None, None
        for caches, grad_feat in ((caches_l, grad_concat[:, :d]), (caches_r, grad_concat[:, d:])):
            grad = grad_feat.astype(net.dtype)
            for cache in reversed(caches):
                chain_grads, grad = nn.backward(cache, grad)
                if cache.layers is net.shared_layers:
                    shared_grads = _merge_grads(shared_grads, chain_grads)
                else:
                    branch_grads = _merge_grads(branch_grads, chain_grads)
        optimizers.step(f"head:{source}", net.head_params[source], head_grads)
        if branch_grads is not None:
            optimizers.step(f"branch:{source}", net.branch_params[source], branch_grads)
        if shared_grads is not None:
            optimizers.step("shared", net.shared_params, shared_grads)
        return loss

    labeled = corpus.labeled_ids(source, corpus.train_ids)
    if not labeled:
        raise TrainerError(f"no labeled training tracks for source {source!r}")
    picks = rng.integers(len(labeled), size=cfg.batch_size)
    tracks = [labeled[int(i)] for i in picks]
    batch = np.stack([crop_chunk(corpus.spectrograms[t], cfg.chunk, rng) for t in tracks]).astype(net.dtype)
    targets = np.stack([corpus.labels[source][t] for t in tracks])
    feats, caches = net.feature_forward(batch, source, mode=mode, rng=rng)
    probs, head_cache = nn.forward(net.head_layers[source], net.head_params[source], feats, mode=mode, rng=rng)
    loss, grad_logits = nn.kl_loss(targets, probs)
    if mode != "train":
        return loss
    head_grads, grad_feat = nn.backward(head_cache, grad_logits, from_logits=True)
    grad = grad_feat.astype(net.dtype)
    shared_grads, branch_grads = None, None
    for cache in reversed(caches):
        chain_grads, grad = nn.backward(cache, grad)
        if cache.layers is net.shared_layers:
            shared_grads = chain_grads
        else:
            branch_grads = chain_grads
    optimizers.step(f"head:{source}", net.head_params[source], head_grads)
    if branch_grads is not None:
        optimizers.step(f"branch:{source}", net.branch_params[source], branch_grads)
    if shared_grads is not None:
        optimizers.step("shared", net.shared_params, shared_grads)
    return loss


def validation_loss(net, corpus, cfg, source) -> float:
    """Eval-mode loss over the validation set (dropout off, running stats)."""
    ids = corpus.labeled_ids(source, corpus.val_ids)
    if source == "self" or not ids:
        return math.nan
    batch = np.stack([center_chunk(corpus.spectrograms[t], cfg.chunk) for t in ids]).astype(net.dtype)
    targets = np.stack([corpus.labels[source][t] for t in ids])
    feats, _ = net.feature_forward(batch, source, mode="eval")
    probs, _ = nn.forward(net.head_layers[source], net.head_params[source], feats, mode="eval")
    loss, _ = nn.kl_loss(targets, probs)
    return loss


def train(net: arch.BranchedNetwork, corpus: TrainingCorpus, cfg: TrainConfig) -> TrainResult:
    """Run the stochastic multi-source loop; updates `net` in place."""
    missing = [s for s in net.sources if s not in corpus.sources]
    if missing:
        raise TrainerError(f"corpus lacks sources {missing}")
    rng = np.random.default_rng(cfg.seed)
    optimizers = _ChainOptimizers(net, cfg)
    sources = net.sources
    m = len(sources)
    per_pass = max(1, math.ceil(len(corpus.train_ids) / cfg.batch_size))
    iterations_per_epoch = per_pass * m

    loss_log, val_log = [], []
    iteration = 0
    for epoch in range(1, cfg.epochs + 1):
        for _ in range(iterations_per_epoch):
            iteration += 1
            source = sources[int(rng.integers(m))]
            loss = _source_step(net, corpus, cfg, source, rng, optimizers)
            if not math.isfinite(loss):
                snapshot = {"iteration": iteration, "source": source, "recent": loss_log[-5:]}
                raise TrainerError(f"non-finite loss at iteration {iteration} (source {source}): {snapshot}")
            loss_log.append((iteration, source, float(loss)))
        if cfg.val_interval and epoch % cfg.val_interval == 0:
            for source in sources:
                val_log.append((epoch, source, float(validation_loss(net, corpus, cfg, source))))

    manifest = build_manifest(net, corpus, cfg)
    return TrainResult(net=net, loss_log=loss_log, val_log=val_log, manifest=manifest)


def build_manifest(net: arch.BranchedNetwork, corpus: TrainingCorpus, cfg: TrainConfig) -> dict:
    spec = net.spec
    return {
        "strategy": spec.kind,
        "sources": ",".join(spec.sources),
        "feature_width": spec.feature_width,
        "factor_dim": spec.factor_dim,
        "in_channels": spec.in_channels,
        "pair_head": "concat-fc-relu-fc2-softmax",
        "init_seed": net.init_seed,
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "learning_rate": cfg.learning_rate,
        "l2": cfg.l2,
        "chunk": cfg.chunk,
        "train_seed": cfg.seed,
        "corpus_hash": corpus.content_hash(),
    }
