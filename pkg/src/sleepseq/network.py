"""The sequence-to-sequence staging network and its loss.

Architecture, end to end: each epoch's 129x29 log-power image is reweighted by
a learnable nonnegative filterbank (frequency reduction F -> M), encoded by a
bidirectional GRU over the 29 spectral columns, and pooled into one epoch
feature vector by additive attention. The L epoch vectors of a sequence then
pass through a second bidirectional GRU (the sequence-level RNN), a linear
projection, and a softmax that emits one stage distribution per epoch.

The training objective is the sequence classification loss: cross entropy
summed over the batch's sequences and over the L epochs of each sequence,
divided by L, plus an L2 penalty (lambda/2)*sum(theta^2) over the parameters
that are currently trainable.

Parameter tensors live in a :class:`ModelParams` dict keyed by canonical
names (``filterbank.V``, ``ernn.fwd.Wz``, ..., ``softmax.b``); the same names
key checkpoints and freeze masks. The filterbank is stored as the free matrix
V with W_fb = softplus(V), which keeps every filter weight nonnegative after
any gradient step.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nm
from .numerics import ShapeMismatch, Tensor
from .spectrogram import EpochImage

GATE_SUFFIXES = ("Wz", "Uz", "bz", "Wr", "Ur", "br", "Wh", "Uh", "bh")
N_CLASSES = 5

CHECKPOINT_MAGIC = "sleepseq-checkpoint v1"


@dataclass
class HyperParams:
    """Model sizes and training-time regularization settings."""

    freq_bins: int = 129      # F, fixed by the spectrogram frontend
    n_filters: int = 32       # M, filterbank size (M < F)
    ernn_hidden: int = 64     # per-direction epoch-level GRU units
    seqrnn_hidden: int = 64   # per-direction sequence-level GRU units
    seq_len: int = 20         # L, epochs per input sequence
    dropout: float = 0.25
    l2_lambda: float = 1e-3
    n_classes: int = N_CLASSES

    def __post_init__(self):
        if not 0 < self.n_filters < self.freq_bins:
            raise ValueError(
                f"n_filters must satisfy 0 < M < F={self.freq_bins}, got {self.n_filters}"
            )
        if self.seq_len < 1:
            raise ValueError("seq_len must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.l2_lambda < 0:
            raise ValueError("l2_lambda must be >= 0")
        if self.n_classes != N_CLASSES:
            raise ValueError("the staging problem is fixed at 5 classes")

    @property
    def arnn_out_dim(self) -> int:
        return 2 * self.ernn_hidden

    @property
    def seq_out_dim(self) -> int:
        return 2 * self.seqrnn_hidden


def _gru_shapes(in_dim: int, hidden: int) -> dict:
    shapes = {}
    for suffix in GATE_SUFFIXES:
        if suffix.startswith("W"):
            shapes[suffix] = (in_dim, hidden)
        elif suffix.startswith("U"):
            shapes[suffix] = (hidden, hidden)
        else:
            shapes[suffix] = (hidden,)
    return shapes


def param_shapes(hp: HyperParams) -> dict[str, tuple]:
    """Canonical parameter names with shapes, in checkpoint order."""
    da, do = hp.arnn_out_dim, hp.seq_out_dim
    shapes: dict[str, tuple] = {"filterbank.V": (hp.freq_bins, hp.n_filters)}
    for direction in ("fwd", "bwd"):
        for suffix, shape in _gru_shapes(hp.n_filters, hp.ernn_hidden).items():
            shapes[f"ernn.{direction}.{suffix}"] = shape
    shapes["ernn.out.W_ha"] = (2 * hp.ernn_hidden, da)
    shapes["ernn.out.b_a"] = (da,)
    shapes["att.W"] = (da, da)
    shapes["att.b"] = (da,)
    shapes["att.u"] = (da,)
    for direction in ("fwd", "bwd"):
        for suffix, shape in _gru_shapes(da, hp.seqrnn_hidden).items():
            shapes[f"seqrnn.{direction}.{suffix}"] = shape
    shapes["seqrnn.out.W_ho"] = (2 * hp.seqrnn_hidden, do)
    shapes["seqrnn.out.b_o"] = (do,)
    shapes["softmax.W"] = (do, hp.n_classes)
    shapes["softmax.b"] = (hp.n_classes,)
    return shapes


# parameter-struct views used by the single-instance ops ---------------------


@dataclass
class FilterbankParams:
    W_fb: np.ndarray  # F x M, nonnegative

    def __post_init__(self):
        self.W_fb = np.asarray(self.W_fb)
        if np.any(self.W_fb < 0):
            raise ValueError("filterbank weights must be nonnegative")


@dataclass
class GRUCellParams:
    Wz: np.ndarray
    Uz: np.ndarray
    bz: np.ndarray
    Wr: np.ndarray
    Ur: np.ndarray
    br: np.ndarray
    Wh: np.ndarray
    Uh: np.ndarray
    bh: np.ndarray

    @classmethod
    def zeros(cls, in_dim: int, hidden: int, dtype=np.float64) -> "GRUCellParams":
        shapes = _gru_shapes(in_dim, hidden)
        return cls(**{k: np.zeros(v, dtype=dtype) for k, v in shapes.items()})


@dataclass
class AttentionParams:
    W: np.ndarray
    b: np.ndarray
    u: np.ndarray


class ModelParams:
    """All parameter tensors, keyed by canonical name in checkpoint order."""

    def __init__(self, hp: HyperParams, tensors: dict[str, Tensor]):
        self.hp = hp
        expected = param_shapes(hp)
        if list(tensors.keys()) != list(expected.keys()):
            raise ShapeMismatch("parameter set does not match the canonical name list")
        for name, shape in expected.items():
            if tuple(tensors[name].data.shape) != shape:
                raise ShapeMismatch(
                    f"parameter {name}: shape {tensors[name].data.shape} vs expected {shape}"
                )
        self._tensors = dict(tensors)

    # construction -----------------------------------------------------
    @classmethod
    def init_random(cls, hp: HyperParams, seed: int, dtype=np.float32) -> "ModelParams":
        """Glorot-uniform matrices, zero biases (update-gate biases 1.0),
        and a filterbank initialized near M triangular filters."""
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
        tensors = {}
        for name, shape in param_shapes(hp).items():
            if name == "filterbank.V":
                data = _triangular_filterbank_init(hp.freq_bins, hp.n_filters)
            elif name.endswith(".bz"):
                data = np.ones(shape)
            elif name == "att.u":
                limit = np.sqrt(6.0 / (shape[0] + 1))
                data = rng.uniform(-limit, limit, size=shape)
            elif len(shape) == 1:
                data = np.zeros(shape)
            else:
                limit = np.sqrt(6.0 / (shape[0] + shape[1]))
                data = rng.uniform(-limit, limit, size=shape)
            tensors[name] = nm.parameter(data, dtype=dtype)
        return cls(hp, tensors)

    @classmethod
    def from_arrays(cls, hp: HyperParams, arrays: dict[str, np.ndarray], dtype=None) -> "ModelParams":
        tensors = {
            name: nm.parameter(np.array(arrays[name], copy=True), dtype=dtype)
            for name in param_shapes(hp)
        }
        return cls(hp, tensors)

    # access -----------------------------------------------------------
    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def names(self):
        return list(self._tensors.keys())

    def items(self):
        return self._tensors.items()

    def tensors(self) -> dict[str, Tensor]:
        return self._tensors

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self._tensors.items()}

    @property
    def dtype(self):
        return self._tensors["filterbank.V"].data.dtype

    def copy(self) -> "ModelParams":
        tensors = {}
        for name, t in self._tensors.items():
            c = nm.Tensor(t.data.copy(), requires_grad=t.requires_grad)
            tensors[name] = c
        return ModelParams(self.hp, tensors)

    def astype(self, dtype) -> "ModelParams":
        tensors = {
            name: nm.Tensor(t.data.astype(dtype), requires_grad=t.requires_grad)
            for name, t in self._tensors.items()
        }
        return ModelParams(self.hp, tensors)

    # trainability -------------------------------------------------------
    def set_trainable(self, mask) -> None:
        """``mask`` is a bool, or a dict of canonical-name -> bool."""
        if isinstance(mask, bool):
            for t in self._tensors.values():
                t.requires_grad = mask
            return
        unknown = set(mask) - set(self._tensors)
        if unknown:
            raise KeyError(f"freeze mask names unknown parameters: {sorted(unknown)}")
        for name, t in self._tensors.items():
            t.requires_grad = bool(mask[name])

    def trainable(self) -> dict[str, Tensor]:
        return {k: t for k, t in self._tensors.items() if t.requires_grad}

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.zero_grad()

    # struct views -------------------------------------------------------
    def filterbank(self) -> FilterbankParams:
        v = self._tensors["filterbank.V"].data
        w = np.where(v > 30.0, v, np.log1p(np.exp(np.minimum(v, 30.0))))
        return FilterbankParams(w)

    def gru_cell(self, section: str, direction: str) -> GRUCellParams:
        return GRUCellParams(
            **{s: self._tensors[f"{section}.{direction}.{s}"].data for s in GATE_SUFFIXES}
        )

    def attention(self) -> AttentionParams:
        return AttentionParams(
            W=self._tensors["att.W"].data,
            b=self._tensors["att.b"].data,
            u=self._tensors["att.u"].data,
        )


def _triangular_filterbank_init(f_bins: int, m_filters: int) -> np.ndarray:
    """Softplus pre-image of M triangular filters spread over the F bins."""
    points = np.linspace(0.0, f_bins - 1, m_filters + 2)
    w = np.zeros((f_bins, m_filters))
    bins = np.arange(f_bins, dtype=np.float64)
    for m in range(m_filters):
        left, center, right = points[m], points[m + 1], points[m + 2]
        rise = (bins - left) / max(center - left, 1e-9)
        fall = (right - bins) / max(right - center, 1e-9)
        w[:, m] = np.clip(np.minimum(rise, fall), 0.0, 1.0)
    # floor keeps softplus'(V) away from zero so off-triangle weights stay trainable
    w = np.maximum(w, 0.05)
    return np.log(np.expm1(w))  # softplus inverse


# ---------------------------------------------------------------------------
# graph builders
# ---------------------------------------------------------------------------


def _gru_direction(params, prefix: str, feat: Tensor, seq_steps: int, reverse: bool):
    """Unroll one GRU direction over axis 1 of ``feat`` (B, T, in).

    Gate math: z = sigmoid(Wz x + Uz h + bz), r likewise, candidate
    h~ = tanh(Wh x + bh + r * (Uh h)), h = (1 - z) * h_prev + z * h~.
    Input projections for all steps are batched up front.
    """
    Wz, Uz, bz = params[f"{prefix}.Wz"], params[f"{prefix}.Uz"], params[f"{prefix}.bz"]
    Wr, Ur, br = params[f"{prefix}.Wr"], params[f"{prefix}.Ur"], params[f"{prefix}.br"]
    Wh, Uh, bh = params[f"{prefix}.Wh"], params[f"{prefix}.Uh"], params[f"{prefix}.bh"]
    pz = nm.add(nm.matmul(feat, Wz), bz)
    pr = nm.add(nm.matmul(feat, Wr), br)
    ph = nm.add(nm.matmul(feat, Wh), bh)
    batch = feat.data.shape[0]
    hidden = Uz.data.shape[0]
    h = nm.zeros((batch, hidden), dtype=feat.data.dtype)
    states = [None] * seq_steps
    order = range(seq_steps - 1, -1, -1) if reverse else range(seq_steps)
    for t in order:
        z = nm.sigmoid(nm.add(nm.take_index(pz, t, 1), nm.matmul(h, Uz)))
        r = nm.sigmoid(nm.add(nm.take_index(pr, t, 1), nm.matmul(h, Ur)))
        cand = nm.tanh(nm.add(nm.take_index(ph, t, 1), nm.mul(r, nm.matmul(h, Uh))))
        h = nm.add(nm.mul(nm.sub(1.0, z), h), nm.mul(z, cand))
        states[t] = h
    return states


def _encode_epochs(params, hp, img_btf: Tensor, training: bool, rng):
    """ARNN: filterbank -> bidirectional epoch GRU -> attention pooling.

    ``img_btf`` is (B, T, F); returns the pooled feature (B, 2*ernn_hidden)
    and the attention weights (B, T).
    """
    w_fb = nm.softplus(params["filterbank.V"])
    feat = nm.matmul(img_btf, w_fb)  # (B, T, M)
    feat = nm.dropout(feat, hp.dropout, rng=rng, training=training)
    t_steps = feat.data.shape[1]
    h_fwd = _gru_direction(params, "ernn.fwd", feat, t_steps, reverse=False)
    h_bwd = _gru_direction(params, "ernn.bwd", feat, t_steps, reverse=True)
    w_ha, b_a = params["ernn.out.W_ha"], params["ernn.out.b_a"]
    outs = [
        nm.add(nm.matmul(nm.concat([h_bwd[t], h_fwd[t]], axis=1), w_ha), b_a)
        for t in range(t_steps)
    ]
    att_w, att_b, att_u = params["att.W"], params["att.b"], params["att.u"]
    u_col = nm.reshape(att_u, (att_u.data.shape[0], 1))
    scores = [
        nm.matmul(nm.tanh(nm.add(nm.matmul(a, att_w), att_b)), u_col) for a in outs
    ]
    alphas = nm.softmax(nm.concat(scores, axis=1), axis=1)  # (B, T)
    pooled = nm.weighted_sum(alphas, outs)
    pooled = nm.dropout(pooled, hp.dropout, rng=rng, training=training)
    return pooled, alphas


def _sequence_head(params, hp, xs: Tensor, training: bool, rng, bypass_seqrnn: bool):
    """SeqRNN over epoch features (N, L, Da) giving per-epoch logits."""
    seq_len = xs.data.shape[1]
    if bypass_seqrnn:
        outs = [nm.take_index(xs, i, 1) for i in range(seq_len)]
    else:
        h_fwd = _gru_direction(params, "seqrnn.fwd", xs, seq_len, reverse=False)
        h_bwd = _gru_direction(params, "seqrnn.bwd", xs, seq_len, reverse=True)
        w_ho, b_o = params["seqrnn.out.W_ho"], params["seqrnn.out.b_o"]
        outs = [
            nm.add(nm.matmul(nm.concat([h_bwd[i], h_fwd[i]], axis=1), w_ho), b_o)
            for i in range(seq_len)
        ]
    w_sm, b_sm = params["softmax.W"], params["softmax.b"]
    logits = []
    for o in outs:
        o = nm.dropout(o, hp.dropout, rng=rng, training=training)
        logits.append(nm.add(nm.matmul(o, w_sm), b_sm))
    return logits


@dataclass
class ForwardResult:
    loss: Tensor | None
    logits: list
    probs: np.ndarray       # (N, L, C)
    attention: Tensor | None


def _np_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=-1, keepdims=True)


def one_hot(labels: np.ndarray, n_classes: int = N_CLASSES) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros(labels.shape + (n_classes,), dtype=np.float64)
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


def build_forward(
    params: ModelParams,
    images: np.ndarray,
    labels=None,
    training: bool = False,
    rng=None,
    bypass_seqrnn: bool = False,
    l2_lambda: float | None = None,
) -> ForwardResult:
    """Run the full network on a batch of sequences.

    ``images`` is (N, L, F, T); ``labels`` (N, L) integer stages or (N, L, C)
    one-hot. When labels are given the sequence loss is built on the graph.
    """
    hp = params.hp
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[2] != hp.freq_bins:
        raise ShapeMismatch(
            f"images must be (N, L, {hp.freq_bins}, T), got {images.shape}"
        )
    n_seq, seq_len, f_bins, t_frames = images.shape
    flat = images.reshape(n_seq * seq_len, f_bins, t_frames)
    img_btf = nm.constant(
        np.ascontiguousarray(flat.transpose(0, 2, 1), dtype=params.dtype)
    )
    pooled, alphas = _encode_epochs(params, hp, img_btf, training, rng)
    xs = nm.reshape(pooled, (n_seq, seq_len, pooled.data.shape[1]))
    logits = _sequence_head(params, hp, xs, training, rng, bypass_seqrnn)
    probs = np.stack([_np_softmax(l.data) for l in logits], axis=1)

    loss = None
    if labels is not None:
        targets = np.asarray(labels)
        if targets.ndim == 2:
            targets = one_hot(targets, hp.n_classes)
        if targets.shape != (n_seq, seq_len, hp.n_classes):
            raise ShapeMismatch(
                f"labels must be ({n_seq}, {seq_len}, {hp.n_classes}), got {targets.shape}"
            )
        ce = None
        for i in range(seq_len):
            term = nm.cross_entropy_with_logits(logits[i], targets[:, i, :])
            ce = term if ce is None else nm.add(ce, term)
        loss = nm.mul(ce, 1.0 / seq_len)
        lam = hp.l2_lambda if l2_lambda is None else l2_lambda
        if lam > 0:
            reg = None
            for t in params.trainable().values():
                sq = nm.l2_norm_squared(t)
                reg = sq if reg is None else nm.add(reg, sq)
            if reg is not None:
                loss = nm.add(loss, nm.mul(reg, lam / 2.0))
    return ForwardResult(loss=loss, logits=logits, probs=probs, attention=alphas)


def predict_proba(params: ModelParams, images: np.ndarray) -> np.ndarray:
    """Inference-mode per-epoch stage probabilities, (N, L, C)."""
    with nm.no_grad():
        return build_forward(params, images, training=False).probs


def sequence_loss(
    images, labels, params: ModelParams, l2_lambda: float | None = None,
    training: bool = False, rng=None,
) -> float:
    """Scalar sequence classification loss for a batch."""
    result = build_forward(
        params, images, labels=labels, training=training, rng=rng, l2_lambda=l2_lambda
    )
    return float(result.loss.data)


# ---------------------------------------------------------------------------
# single-instance operations (thin wrappers over the graph builders)
# ---------------------------------------------------------------------------


def filterbank_apply(image, w_fb) -> np.ndarray:
    """Apply a nonnegative filterbank to one F x T image, giving M x T."""
    values = image.values if isinstance(image, EpochImage) else np.asarray(image)
    fb = w_fb.W_fb if isinstance(w_fb, FilterbankParams) else np.asarray(w_fb)
    if values.ndim != 2 or fb.ndim != 2 or values.shape[0] != fb.shape[0]:
        raise ShapeMismatch(
            f"filterbank_apply: image {values.shape} vs weights {fb.shape}"
        )
    return (fb.T @ values)


def gru_step(x: np.ndarray, h_prev: np.ndarray, cell: GRUCellParams) -> np.ndarray:
    """One GRU step on plain vectors (reference surface for the cell math)."""
    x = np.asarray(x, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    if x.shape[0] != cell.Wz.shape[0] or h_prev.shape[0] != cell.Uz.shape[0]:
        raise ShapeMismatch(
            f"gru_step: x {x.shape}, h {h_prev.shape} vs Wz {cell.Wz.shape}, Uz {cell.Uz.shape}"
        )
    with nm.no_grad():
        xt = nm.constant(x[None, :])
        ht = nm.constant(h_prev[None, :])
        z = nm.sigmoid(nm.add(nm.add(nm.matmul(xt, nm.constant(cell.Wz)), nm.constant(cell.bz)),
                              nm.matmul(ht, nm.constant(cell.Uz))))
        r = nm.sigmoid(nm.add(nm.add(nm.matmul(xt, nm.constant(cell.Wr)), nm.constant(cell.br)),
                              nm.matmul(ht, nm.constant(cell.Ur))))
        cand = nm.tanh(nm.add(nm.add(nm.matmul(xt, nm.constant(cell.Wh)), nm.constant(cell.bh)),
                              nm.mul(r, nm.matmul(ht, nm.constant(cell.Uh)))))
        h = nm.add(nm.mul(nm.sub(1.0, z), ht), nm.mul(z, cand))
    return h.data[0]


def _cell_tensor_dict(prefix: str, cell: GRUCellParams) -> dict[str, Tensor]:
    return {f"{prefix}.{s}": nm.constant(getattr(cell, s)) for s in GATE_SUFFIXES}


def ernn_encode(fb_out: np.ndarray, cell_fwd: GRUCellParams, cell_bwd: GRUCellParams,
                w_ha: np.ndarray, b_a: np.ndarray) -> np.ndarray:
    """Encode one M x T filterbank output into T output vectors (T, Da)."""
    fb_out = np.asarray(fb_out, dtype=np.float64)
    t_steps = fb_out.shape[1]
    with nm.no_grad():
        feat = nm.constant(fb_out.T[None, :, :])  # (1, T, M)
        tensors = {**_cell_tensor_dict("f.fwd", cell_fwd), **_cell_tensor_dict("f.bwd", cell_bwd)}
        h_fwd = _gru_direction(tensors, "f.fwd", feat, t_steps, reverse=False)
        h_bwd = _gru_direction(tensors, "f.bwd", feat, t_steps, reverse=True)
        outs = [
            nm.add(nm.matmul(nm.concat([h_bwd[t], h_fwd[t]], axis=1), nm.constant(w_ha)),
                   nm.constant(b_a))
            for t in range(t_steps)
        ]
    return np.stack([o.data[0] for o in outs], axis=0)


def attention_pool(a_seq: np.ndarray, att: AttentionParams):
    """Pool T output vectors (T, Da) into one feature; returns (x, alphas)."""
    a_seq = np.asarray(a_seq, dtype=np.float64)
    with nm.no_grad():
        scores = np.tanh(a_seq @ att.W + att.b) @ att.u
        e = scores - scores.max()
        alphas = np.exp(e) / np.exp(e).sum()
        pooled = alphas @ a_seq
    return pooled, alphas


def arnn_forward(image, params: ModelParams, mode: str = "infer", rng=None) -> np.ndarray:
    """Full ARNN on one epoch image; dropout only in 'train' mode."""
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    values = image.values if isinstance(image, EpochImage) else np.asarray(image)
    training = mode == "train"
    with nm.no_grad():
        img = nm.constant(values.T[None, :, :].astype(params.dtype))
        pooled, _ = _encode_epochs(params.tensors(), params.hp, img, training, rng)
    return pooled.data[0]


def seqrnn_forward(xs: np.ndarray, cell_fwd: GRUCellParams, cell_bwd: GRUCellParams,
                   w_ho: np.ndarray, b_o: np.ndarray) -> np.ndarray:
    """Sequence-level bidirectional GRU over (L, Da) features, giving (L, Do)."""
    xs = np.asarray(xs, dtype=np.float64)
    seq_len = xs.shape[0]
    with nm.no_grad():
        feat = nm.constant(xs[None, :, :])
        tensors = {**_cell_tensor_dict("s.fwd", cell_fwd), **_cell_tensor_dict("s.bwd", cell_bwd)}
        h_fwd = _gru_direction(tensors, "s.fwd", feat, seq_len, reverse=False)
        h_bwd = _gru_direction(tensors, "s.bwd", feat, seq_len, reverse=True)
        outs = [
            nm.add(nm.matmul(nm.concat([h_bwd[i], h_fwd[i]], axis=1), nm.constant(w_ho)),
                   nm.constant(b_o))
            for i in range(seq_len)
        ]
    return np.stack([o.data[0] for o in outs], axis=0)


def classify(o: np.ndarray, w_sm: np.ndarray, b_sm: np.ndarray) -> np.ndarray:
    """Softmax over W o + b; rows are probability 5-vectors."""
    o = np.asarray(o, dtype=np.float64)
    return _np_softmax(o @ w_sm + b_sm)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_HP_FIELDS = (
    "freq_bins", "n_filters", "ernn_hidden", "seqrnn_hidden",
    "seq_len", "dropout", "l2_lambda", "n_classes",
)


def save_checkpoint(path, params: ModelParams) -> None:
    """Text manifest (hyperparameters + parameter names/shapes), blank line,
    then all parameters as little-endian float32 in manifest order."""
    hp = params.hp
    buf = io.StringIO()
    buf.write(CHECKPOINT_MAGIC + "\n")
    for name in _HP_FIELDS:
        buf.write(f"{name}: {getattr(hp, name)!r}\n")
    for name, t in params.items():
        dims = " ".join(str(d) for d in t.data.shape)
        buf.write(f"param: {name} {dims}\n")
    buf.write("\n")
    with open(path, "wb") as fh:
        fh.write(buf.getvalue().encode("utf-8"))
        for _, t in params.items():
            fh.write(t.data.astype("<f4").tobytes())


def load_checkpoint(path) -> ModelParams:
    raw = Path(path).read_bytes()
    sep = raw.find(b"\n\n")
    if sep < 0:
        raise ShapeMismatch(f"{path}: no blank line terminating the manifest")
    lines = raw[:sep].decode("utf-8").splitlines()
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise ShapeMismatch(f"{path}: not a {CHECKPOINT_MAGIC} file")
    hp_fields = {}
    manifest = []
    for line in lines[1:]:
        key, value = line.split(":", 1)
        key, value = key.strip(), value.strip()
        if key == "param":
            parts = value.split()
            manifest.append((parts[0], tuple(int(d) for d in parts[1:])))
        else:
            hp_fields[key] = value
    hp = HyperParams(
        freq_bins=int(hp_fields["freq_bins"]),
        n_filters=int(hp_fields["n_filters"]),
        ernn_hidden=int(hp_fields["ernn_hidden"]),
        seqrnn_hidden=int(hp_fields["seqrnn_hidden"]),
        seq_len=int(hp_fields["seq_len"]),
        dropout=float(hp_fields["dropout"]),
        l2_lambda=float(hp_fields["l2_lambda"]),
        n_classes=int(hp_fields["n_classes"]),
    )
    expected = param_shapes(hp)
    if [m[0] for m in manifest] != list(expected.keys()):
        raise ShapeMismatch(f"{path}: manifest parameter names are not canonical")
    for name, dims in manifest:
        if dims != expected[name]:
            raise ShapeMismatch(
                f"{path}: parameter {name} has shape {dims}, expected {expected[name]}"
            )
    blob = raw[sep + 2 :]
    total = sum(int(np.prod(dims)) for _, dims in manifest)
    if len(blob) != total * 4:
        raise ShapeMismatch(
            f"{path}: blob holds {len(blob) // 4} floats, manifest declares {total}"
        )
    flat = np.frombuffer(blob, dtype="<f4")
    arrays = {}
    offset = 0
    for name, dims in manifest:
        size = int(np.prod(dims))
        arrays[name] = flat[offset : offset + size].reshape(dims).astype(np.float32)
        offset += size
    return ModelParams.from_arrays(hp, arrays, dtype=np.float32)
