"""Sequence sampling, Adam optimization, pretraining, and finetuning.

Training sequences are sampled from each recording with maximal overlap: one
sequence per start index, stride 1, so a recording of n epochs yields
n - L + 1 sequences and every epoch appears in up to L of them. Minibatches
are reshuffled every training epoch from a per-epoch derived seed.

Finetuning trains only the parameter groups left trainable by the freeze
mask, evaluates fused-inference accuracy on the validation cohort every
``eval_every`` steps, stops once ``early_stop_patience`` steps pass without a
strictly better validation accuracy, and returns the best-on-validation
parameters (the initial checkpoint counts as a candidate).

All randomness flows from one root seed through fixed-tag substreams
(init / shuffle / dropout / split), so runs are bit-reproducible for a fixed
seed and thread count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import evaluation, network, spectrogram
from .dataio import Recording, TooShortRecording
from .network import HyperParams, ModelParams

STREAM_INIT = 1
STREAM_SHUFFLE = 2
STREAM_DROPOUT = 3
STREAM_SPLIT = 4


def substream(seed: int, *tags: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *tags])))


@dataclass
class TrainConfig:
    epochs: int = 10                 # passes over the sequence pool
    batch_size: int = 32             # sequences per minibatch
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 5.0
    early_stop_patience: int = 50    # steps without improvement
    eval_every: int = 10             # steps between validation evaluations
    seed: int = 0
    reset_optimizer: bool = True     # fresh Adam moments at finetune start

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs must be >= 0, batch_size >= 1, lr > 0")
        if self.early_stop_patience < 0 or self.eval_every < 1:
            raise ValueError("early_stop_patience must be >= 0 and eval_every >= 1")


@dataclass
class SequenceSample:
    """L consecutive epochs of one recording, with one-hot labels."""

    rec_id: str
    start: int
    images: np.ndarray   # (L, F, T) view into the recording's image cache
    onehot: np.ndarray   # (L, n_classes) view
    labels: np.ndarray   # (L,) int view


@dataclass
class PreparedRecording:
    rec_id: str
    images: np.ndarray   # (n, F, T) float32
    labels: np.ndarray   # (n,) int64
    onehot: np.ndarray = field(init=False)

    def __post_init__(self):
        self.onehot = network.one_hot(self.labels).astype(np.float32)


def prepare_recording(rec: Recording) -> PreparedRecording:
    images = spectrogram.recording_images(rec.samples, rec.n_epochs)
    return PreparedRecording(rec.subject_id, images, rec.epoch_labels.copy())


def prepare_recordings(recordings) -> list[PreparedRecording]:
    return [prepare_recording(r) for r in recordings]


def make_sequences(rec, seq_len: int, images: np.ndarray | None = None) -> list[SequenceSample]:
    """All maximal-overlap sequences of a recording (stride 1)."""
    if isinstance(rec, PreparedRecording):
        prepared = rec
    else:
        if images is None:
            prepared = prepare_recording(rec)
        else:
            prepared = PreparedRecording(rec.subject_id, np.asarray(images), rec.epoch_labels.copy())
    n = prepared.labels.shape[0]
    if n < seq_len:
        raise TooShortRecording(
            f"recording {prepared.rec_id!r} has {n} epochs, sequences need >= {seq_len}"
        )
    return [
        SequenceSample(
            rec_id=prepared.rec_id,
            start=s,
            images=prepared.images[s : s + seq_len],
            onehot=prepared.onehot[s : s + seq_len],
            labels=prepared.labels[s : s + seq_len],
        )
        for s in range(n - seq_len + 1)
    ]


def sequence_pool(prepared, seq_len: int) -> list[SequenceSample]:
    pool = []
    for rec in prepared:
        pool.extend(make_sequences(rec, seq_len))
    return pool


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(tensors, grads, state: AdamState, cfg: TrainConfig) -> None:
    """One Adam update over the named tensors, in place.

    Gradients are jointly rescaled to a global norm of at most
    ``cfg.clip_norm`` before the moment updates. Tensors without an entry in
    ``grads`` (frozen groups) are untouched.
    """
    live = [(name, t) for name, t in tensors.items() if name in grads]
    if not live:
        return
    norm_sq = 0.0
    for name, _ in live:
        g = grads[name]
        norm_sq += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    norm = np.sqrt(norm_sq)
    scale = cfg.clip_norm / norm if norm > cfg.clip_norm else 1.0
    state.t += 1
    bc1 = 1.0 - cfg.beta1**state.t
    bc2 = 1.0 - cfg.beta2**state.t
    for name, tensor in live:
        g = np.asarray(grads[name], dtype=tensor.data.dtype) * scale
        if name not in state.m:
            state.m[name] = np.zeros_like(tensor.data)
            state.v[name] = np.zeros_like(tensor.data)
        m, v = state.m[name], state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        tensor.data -= cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------


def _assemble(batch):
    images = np.stack([s.images for s in batch])
    onehot = np.stack([s.onehot for s in batch])
    return images, onehot


def training_step(params: ModelParams, batch, cfg: TrainConfig, state: AdamState,
                  dropout_rng) -> float:
    """Forward, backward, clip, Adam. Returns the batch loss."""
    images, onehot = _assemble(batch)
    params.zero_grad()
    result = network.build_forward(
        params, images, labels=onehot, training=True, rng=dropout_rng
    )
    trainable = params.trainable()
    if trainable:  # with everything frozen there is no graph to backpropagate
        result.loss.backward()
        grads = {name: t.grad for name, t in trainable.items() if t.grad is not None}
        adam_step(trainable, grads, state, cfg)
    return float(result.loss.data)


def _iter_minibatches(pool, batch_size: int, seed: int, max_epochs: int | None):
    epoch_idx = 0
    while max_epochs is None or epoch_idx < max_epochs:
        order = substream(seed, STREAM_SHUFFLE, epoch_idx).permutation(len(pool))
        for s in range(0, len(order), batch_size):
            yield epoch_idx, [pool[i] for i in order[s : s + batch_size]]
        epoch_idx += 1


def pretrain(cohort, hp: HyperParams, cfg: TrainConfig, log_fn=None) -> ModelParams:
    """Train from random init for a fixed number of epochs; no early stop."""
    if not cohort:
        raise ValueError("pretrain needs a nonempty cohort")
    pool = sequence_pool(prepare_recordings(cohort), hp.seq_len)
    params = ModelParams.init_random(hp, [cfg.seed, STREAM_INIT])
    state = AdamState()
    dropout_rng = substream(cfg.seed, STREAM_DROPOUT)
    step = 0
    for epoch_idx, batch in _iter_minibatches(pool, cfg.batch_size, cfg.seed, cfg.epochs):
        loss = training_step(params, batch, cfg, state, dropout_rng)
        step += 1
        if log_fn:
            log_fn(f"{step}\t{epoch_idx}\t{loss:.6f}")
    return params


def run_steps(params: ModelParams, pool, cfg: TrainConfig, n_steps: int,
              state: AdamState | None = None, log_fn=None) -> AdamState:
    """Run exactly ``n_steps`` minibatch steps on ``params`` (no early stop,
    no best-checkpoint selection). Used by freezing-contract checks."""
    state = state or AdamState()
    dropout_rng = substream(cfg.seed, STREAM_DROPOUT)
    it = _iter_minibatches(pool, cfg.batch_size, cfg.seed, max_epochs=None)
    for step in range(1, n_steps + 1):
        epoch_idx, batch = next(it)
        loss = training_step(params, batch, cfg, state, dropout_rng)
        if log_fn:
            log_fn(f"{step}\t{epoch_idx}\t{loss:.6f}")
    return state


def cohort_accuracy(params: ModelParams, prepared) -> float:
    """Pooled fused-inference accuracy over prepared recordings."""
    correct = 0
    total = 0
    for rec in prepared:
        _, pred = evaluation.predict_recording(params, rec.images)
        correct += int(np.sum(pred == rec.labels))
        total += rec.labels.shape[0]
    return correct / total if total else 0.0


def finetune(init: ModelParams, mask, train_cohort, val_cohort, cfg: TrainConfig,
             log_fn=None, optimizer_state: AdamState | None = None) -> ModelParams:
    """Early-stopped partial finetuning; returns the best-on-validation params.

    ``mask`` maps canonical parameter names to trainability. Improvement is a
    strictly higher validation accuracy; patience is counted in steps from the
    last improvement (the initial checkpoint is candidate number zero).
    Adam moments start fresh unless ``cfg.reset_optimizer`` is off and a
    prior ``optimizer_state`` is supplied (checkpoints do not carry one).
    """
    params = init.copy()
    params.set_trainable(mask)
    hp = params.hp
    pool = sequence_pool(prepare_recordings(train_cohort), hp.seq_len)
    val_prepared = (
        val_cohort if val_cohort and isinstance(val_cohort[0], PreparedRecording)
        else prepare_recordings(val_cohort)
    )
    if cfg.reset_optimizer or optimizer_state is None:
        state = AdamState()
    else:
        state = optimizer_state
    dropout_rng = substream(cfg.seed, STREAM_DROPOUT)

    best_acc = cohort_accuracy(params, val_prepared)
    best_params = params.copy()
    best_step = 0
    if log_fn:
        log_fn(f"0\t0\tnan\t{best_acc:.6f}")

    step = 0
    for epoch_idx, batch in _iter_minibatches(pool, cfg.batch_size, cfg.seed, cfg.epochs):
        loss = training_step(params, batch, cfg, state, dropout_rng)
        step += 1
        if step % cfg.eval_every == 0:
            acc = cohort_accuracy(params, val_prepared)
            if log_fn:
                log_fn(f"{step}\t{epoch_idx}\t{loss:.6f}\t{acc:.6f}")
            if acc > best_acc:
                best_acc = acc
                best_params = params.copy()
                best_step = step
        elif log_fn:
            log_fn(f"{step}\t{epoch_idx}\t{loss:.6f}")
        if step - best_step >= cfg.early_stop_patience:
            break
    return best_params
