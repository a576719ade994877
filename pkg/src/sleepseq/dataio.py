"""Recording ingestion, preparation, and synthetic cohort generation.

On-disk recording format (``.rec``, little-endian): a UTF-8 text header of
``key: value`` lines terminated by one blank line, with fields

    subject_id, channel, sample_rate, n_epochs, lights_off, lights_on,
    label_codes  (comma-separated integers, one per epoch, 0..4)

followed by ``n_epochs * 3000`` IEEE-754 32-bit floats of signal. A cohort is
a directory of ``.rec`` files plus a ``manifest`` text file with one
``filename<TAB>subject_id`` line per recording.

Preparation mirrors the usual polysomnography pipeline: raw 8-category labels
are mapped to the five-stage set (N4 merged into N3, MOVEMENT/UNKNOWN epochs
dropped), 20 s epochs are expanded to 30 s by borrowing 5 s of context on each
side, signals are resampled to 100 Hz, and only the in-bed part between the
lights-off and lights-on marks is kept.

The synthetic cohort generator stands in for real source/target cohorts: each
stage gets a band-power profile, epochs are colored noise matching the profile,
stage sequences follow a Markov chain with 0.85 self-transition, and a
configurable DomainShift (frequency warp, band mixing, noise floor) emulates
channel mismatch between cohorts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path

import numpy as np
from scipy.signal import upfirdn

EPOCH_SAMPLES = 3000
TARGET_RATE = 100


class StageLabel(IntEnum):
    """The five scoring classes, with fixed class indices."""

    W = 0
    N1 = 1
    N2 = 2
    N3 = 3
    REM = 4


class RawLabel(IntEnum):
    """Eight-category raw annotation set."""

    W = 0
    N1 = 1
    N2 = 2
    N3 = 3
    N4 = 4
    REM = 5
    MOVEMENT = 6
    UNKNOWN = 7


class MalformedHeader(ValueError):
    pass


class SampleCountMismatch(ValueError):
    pass


class UnknownLabelCode(ValueError):
    pass


class MisalignedLightsIndex(ValueError):
    pass


class UnsupportedRate(ValueError):
    pass


class TooShortRecording(ValueError):
    """Recording has fewer epochs than one input sequence needs."""


@dataclass
class Recording:
    """One prepared continuous single-channel recording at 100 Hz."""

    subject_id: str
    channel_name: str
    sample_rate: int
    samples: np.ndarray
    epoch_labels: np.ndarray
    lights_off_idx: int
    lights_on_idx: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        self.epoch_labels = np.asarray(self.epoch_labels, dtype=np.int64)
        self.validate()

    @property
    def n_epochs(self) -> int:
        return int(self.epoch_labels.shape[0])

    def validate(self) -> None:
        if self.sample_rate != TARGET_RATE:
            raise MalformedHeader(
                f"sample_rate: prepared recordings must be {TARGET_RATE} Hz, got {self.sample_rate}"
            )
        if self.samples.ndim != 1:
            raise MalformedHeader("samples: must be a 1-D signal")
        n = self.epoch_labels.shape[0]
        if self.samples.shape[0] != n * EPOCH_SAMPLES:
            raise SampleCountMismatch(
                f"samples: {self.samples.shape[0]} samples for {n} epochs, "
                f"expected {n * EPOCH_SAMPLES}"
            )
        bad = (self.epoch_labels < 0) | (self.epoch_labels > 4)
        if np.any(bad):
            raise UnknownLabelCode(
                f"epoch_labels: code {int(self.epoch_labels[np.argmax(bad)])} outside 0..4"
            )
        if not 0 <= self.lights_off_idx < self.lights_on_idx <= self.samples.shape[0]:
            raise MalformedHeader(
                f"lights_off/lights_on: invalid span [{self.lights_off_idx}, "
                f"{self.lights_on_idx}) for {self.samples.shape[0]} samples"
            )

    def epoch(self, k: int) -> np.ndarray:
        return self.samples[k * EPOCH_SAMPLES : (k + 1) * EPOCH_SAMPLES]


# ---------------------------------------------------------------------------
# .rec file and cohort directory I/O
# ---------------------------------------------------------------------------

_HEADER_FIELDS = (
    "subject_id",
    "channel",
    "sample_rate",
    "n_epochs",
    "lights_off",
    "lights_on",
    "label_codes",
)


def save_recording(rec: Recording, path) -> None:
    header = (
        f"subject_id: {rec.subject_id}\n"
        f"channel: {rec.channel_name}\n"
        f"sample_rate: {rec.sample_rate}\n"
        f"n_epochs: {rec.n_epochs}\n"
        f"lights_off: {rec.lights_off_idx}\n"
        f"lights_on: {rec.lights_on_idx}\n"
        f"label_codes: {','.join(str(int(c)) for c in rec.epoch_labels)}\n"
        "\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8"))
        fh.write(rec.samples.astype("<f4").tobytes())


def load_recording(path) -> Recording:
    raw = Path(path).read_bytes()
    sep = raw.find(b"\n\n")
    if sep < 0:
        raise MalformedHeader(f"{path}: no blank line terminating the header")
    fields = {}
    for line in raw[:sep].decode("utf-8", errors="replace").splitlines():
        if ":" not in line:
            raise MalformedHeader(f"{path}: header line without ':' separator: {line!r}")
        key, value = line.split(":", 1)
        fields[key.strip()] = value.strip()
    for name in _HEADER_FIELDS:
        if name not in fields:
            raise MalformedHeader(f"{path}: missing header field '{name}'")

    def _int_field(name):
        try:
            return int(fields[name])
        except ValueError:
            raise MalformedHeader(f"{path}: field '{name}' is not an integer: {fields[name]!r}")

    sample_rate = _int_field("sample_rate")
    n_epochs = _int_field("n_epochs")
    lights_off = _int_field("lights_off")
    lights_on = _int_field("lights_on")
    if sample_rate != TARGET_RATE:
        raise MalformedHeader(f"{path}: field 'sample_rate' must be {TARGET_RATE}, got {sample_rate}")

    codes = []
    for tok in fields["label_codes"].split(","):
        tok = tok.strip()
        if tok == "":
            continue
        try:
            code = int(tok)
        except ValueError:
            raise UnknownLabelCode(f"{path}: label code {tok!r} is not an integer")
        if not 0 <= code <= 4:
            raise UnknownLabelCode(f"{path}: label code {code} outside 0..4")
        codes.append(code)
    if len(codes) != n_epochs:
        raise MalformedHeader(
            f"{path}: field 'label_codes' has {len(codes)} entries for n_epochs={n_epochs}"
        )

    payload = raw[sep + 2 :]
    expected = n_epochs * EPOCH_SAMPLES * 4
    if len(payload) != expected:
        raise SampleCountMismatch(
            f"{path}: payload holds {len(payload) // 4} samples, "
            f"expected 3000 x {n_epochs} = {n_epochs * EPOCH_SAMPLES}"
        )
    samples = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    return Recording(
        subject_id=fields["subject_id"],
        channel_name=fields["channel"],
        sample_rate=sample_rate,
        samples=samples,
        epoch_labels=np.asarray(codes, dtype=np.int64),
        lights_off_idx=lights_off,
        lights_on_idx=lights_on,
    )


def save_cohort(recordings, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for rec in recordings:
        fname = f"{rec.subject_id}.rec"
        save_recording(rec, directory / fname)
        lines.append(f"{fname}\t{rec.subject_id}")
    (directory / "manifest").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return directory


def load_cohort(directory) -> list[Recording]:
    directory = Path(directory)
    manifest = directory / "manifest"
    if not manifest.exists():
        raise MalformedHeader(f"{directory}: cohort manifest not found")
    recordings = []
    for line in manifest.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        fname = line.split("\t")[0]
        recordings.append(load_recording(directory / fname))
    return recordings


# ---------------------------------------------------------------------------
# label mapping and epoch geometry
# ---------------------------------------------------------------------------

_RAW_TO_STAGE = {
    RawLabel.W: StageLabel.W,
    RawLabel.N1: StageLabel.N1,
    RawLabel.N2: StageLabel.N2,
    RawLabel.N3: StageLabel.N3,
    RawLabel.N4: StageLabel.N3,
    RawLabel.REM: StageLabel.REM,
}


def map_stage_labels(raw):
    """Map raw 8-category labels to the 5-stage set.

    N4 merges into N3; MOVEMENT and UNKNOWN epochs are excluded. Returns the
    kept stage labels and a mask that is False exactly at excluded positions.
    """
    stages = []
    kept = np.ones(len(raw), dtype=bool)
    for i, lab in enumerate(raw):
        lab = RawLabel(lab)
        if lab in (RawLabel.MOVEMENT, RawLabel.UNKNOWN):
            kept[i] = False
        else:
            stages.append(_RAW_TO_STAGE[lab])
    return stages, kept


def trim_in_bed(rec: Recording) -> Recording:
    """Restrict a recording to [lights_off, lights_on). Idempotent."""
    off, on = rec.lights_off_idx, rec.lights_on_idx
    if off % EPOCH_SAMPLES or on % EPOCH_SAMPLES:
        raise MisalignedLightsIndex(
            f"lights indices ({off}, {on}) must be multiples of {EPOCH_SAMPLES}"
        )
    samples = rec.samples[off:on]
    labels = rec.epoch_labels[off // EPOCH_SAMPLES : on // EPOCH_SAMPLES]
    return Recording(
        subject_id=rec.subject_id,
        channel_name=rec.channel_name,
        sample_rate=rec.sample_rate,
        samples=samples.copy(),
        epoch_labels=labels.copy(),
        lights_off_idx=0,
        lights_on_idx=samples.shape[0],
    )


def expand_epochs_20_to_30(samples, labels_20s, subject_id="", channel_name=""):
    """Expand consecutive 20 s epochs to 30 s by adding 5 s context per side.

    The k-th source epoch covers samples [2000k, 2000k+2000); its expanded
    version covers [2000k-500, 2000k+2500). Boundary epochs without full
    context are dropped (silently, but counted). Returns (Recording, dropped).
    """
    samples = np.asarray(samples, dtype=np.float32)
    labels = [StageLabel(l) for l in labels_20s]
    n20 = len(labels)
    src_len = 20 * TARGET_RATE
    if samples.shape[0] < n20 * src_len:
        raise SampleCountMismatch(
            f"{samples.shape[0]} samples cannot hold {n20} epochs of {src_len}"
        )
    pieces, kept_labels, dropped = [], [], 0
    half = 5 * TARGET_RATE
    for k in range(n20):
        start = k * src_len - half
        stop = k * src_len + src_len + half
        if start < 0 or stop > samples.shape[0]:
            dropped += 1
            continue
        pieces.append(samples[start:stop])
        kept_labels.append(int(labels[k]))
    out = np.concatenate(pieces) if pieces else np.zeros(0, dtype=np.float32)
    rec = Recording(
        subject_id=subject_id,
        channel_name=channel_name,
        sample_rate=TARGET_RATE,
        samples=out,
        epoch_labels=np.asarray(kept_labels, dtype=np.int64),
        lights_off_idx=0,
        lights_on_idx=out.shape[0],
    ) if pieces else None
    if rec is None:
        raise SampleCountMismatch("all epochs dropped: no context available")
    return rec, dropped


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

_MAX_UP = 64


def _design_lowpass(virtual_rate: float, down: int) -> np.ndarray:
    """Windowed-sinc lowpass: passband edge 45 Hz, stopband edge 50 Hz.

    Kaiser window sized for >= 50 dB stopband; the half-length is rounded up
    to a multiple of ``down`` so the group delay lands on an output sample.
    """
    atten = 50.0
    beta = 0.1102 * (atten - 8.7)
    trans = 2.0 * np.pi * (50.0 - 45.0) / virtual_rate
    half_min = int(np.ceil((atten - 7.95) / (2.285 * trans) / 2.0))
    half = down * int(np.ceil(half_min / down))
    n = np.arange(-half, half + 1)
    fc = 47.5  # midpoint of the 45..50 Hz transition band
    h = (2.0 * fc / virtual_rate) * np.sinc(2.0 * fc * n / virtual_rate)
    h *= np.kaiser(2 * half + 1, beta)
    return h


def resample_to_100hz(samples, src_rate) -> np.ndarray:
    """Rational polyphase resampling to 100 Hz with a 45 Hz anti-alias filter.

    Each polyphase branch is normalized to unit DC gain, so constant signals
    pass through exactly; input edges are extended by sample replication so
    boundary output samples see no zero padding.
    """
    samples = np.asarray(samples)
    if float(src_rate) != int(src_rate) or int(src_rate) < TARGET_RATE:
        raise UnsupportedRate(f"source rate must be an integer >= 100 Hz, got {src_rate}")
    src = int(src_rate)
    if src == TARGET_RATE:
        return samples.copy()
    g = math.gcd(TARGET_RATE, src)
    up, down = TARGET_RATE // g, src // g
    if up > _MAX_UP:
        raise UnsupportedRate(
            f"rate {src} needs interpolation factor {up} > {_MAX_UP}; "
            "use a rate with a larger common divisor with 100"
        )
    x = samples.astype(np.float64, copy=False)
    h = _design_lowpass(float(src * up), down)
    half = (h.shape[0] - 1) // 2
    # exact unit DC gain per polyphase branch
    for p in range(up):
        h[p::up] /= h[p::up].sum()
    # edge-replicate padding; a multiple of `down` keeps output alignment exact
    pad = down * int(np.ceil((half / up + 1) / down))
    xpad = np.concatenate([np.full(pad, x[0]), x, np.full(pad, x[-1])])
    y = upfirdn(h, xpad, up, down)
    start = (pad * up + half) // down
    out_len = int(round(samples.shape[0] * TARGET_RATE / src))
    out = y[start : start + out_len]
    if out.shape[0] < out_len:  # pragma: no cover - padding is sized to avoid this
        out = np.pad(out, (0, out_len - out.shape[0]), mode="edge")
    return out.astype(samples.dtype, copy=False)


# ---------------------------------------------------------------------------
# synthetic cohorts
# ---------------------------------------------------------------------------

DEFAULT_BAND_EDGES = ((0.5, 4.0), (4.0, 8.0), (8.0, 12.0), (12.0, 16.0), (16.0, 35.0))

# rows in StageLabel order; each stage has one clearly dominant band
DEFAULT_STAGE_BAND_POWER = np.array(
    [
        [0.6, 0.6, 6.0, 0.8, 2.0],  # W: alpha dominant
        [1.0, 5.0, 1.0, 0.6, 0.6],  # N1: theta
        [2.0, 1.0, 0.8, 5.0, 0.6],  # N2: sigma
        [8.0, 1.5, 0.5, 0.5, 0.3],  # N3: delta
        [1.2, 2.0, 0.7, 0.7, 4.5],  # REM: theta/beta mix
    ]
)

_RFFT_FREQS = np.fft.rfftfreq(EPOCH_SAMPLES, d=1.0 / TARGET_RATE)


@dataclass
class DomainShift:
    """Channel-mismatch model applied when synthesizing a target cohort.

    ``freq_warp`` stretches the spectral profile (power that lived at f moves
    to warp*f), ``band_mixing`` linearly mixes per-band power levels before
    synthesis, and ``noise_floor`` adds broadband noise power.
    """

    freq_warp: float = 1.0
    band_mixing: np.ndarray | None = None
    noise_floor: float = 0.0

    def __post_init__(self):
        if self.freq_warp <= 0:
            raise ValueError(f"freq_warp must be positive, got {self.freq_warp}")
        if self.noise_floor < 0:
            raise ValueError(f"noise_floor must be >= 0, got {self.noise_floor}")
        if self.band_mixing is not None:
            self.band_mixing = np.asarray(self.band_mixing, dtype=np.float64)

    @classmethod
    def identity(cls) -> "DomainShift":
        return cls()


@dataclass
class SyntheticCohortConfig:
    n_subjects: int
    epochs_per_subject: int
    rng_seed: int
    band_edges: tuple = DEFAULT_BAND_EDGES
    stage_band_power: np.ndarray = field(default_factory=lambda: DEFAULT_STAGE_BAND_POWER.copy())
    stage_band_std: np.ndarray | None = None
    mismatch: DomainShift = field(default_factory=DomainShift.identity)
    baseline_power: float = 0.01
    self_transition: float = 0.85
    subject_prefix: str = "subj"
    channel_name: str = "synthetic"

    def __post_init__(self):
        if self.n_subjects < 2:
            raise ValueError(f"n_subjects must be >= 2, got {self.n_subjects}")
        if self.epochs_per_subject < 1:
            raise ValueError("epochs_per_subject must be >= 1")
        self.stage_band_power = np.asarray(self.stage_band_power, dtype=np.float64)
        if self.stage_band_power.shape != (5, len(self.band_edges)):
            raise ValueError(
                f"stage_band_power must be 5x{len(self.band_edges)}, "
                f"got {self.stage_band_power.shape}"
            )
        if np.any(self.stage_band_power <= 0):
            raise ValueError("all stage band powers must be > 0")
        if self.stage_band_std is None:
            self.stage_band_std = 0.25 * self.stage_band_power
        self.stage_band_std = np.asarray(self.stage_band_std, dtype=np.float64)
        if not 0.0 < self.self_transition < 1.0:
            raise ValueError("self_transition must be in (0, 1)")
        if self.mismatch.band_mixing is not None and self.mismatch.band_mixing.shape != (
            len(self.band_edges),
            len(self.band_edges),
        ):
            raise ValueError("band_mixing must be square over the band set")

    def with_mismatch(self, mismatch: DomainShift) -> "SyntheticCohortConfig":
        return replace(self, mismatch=mismatch)


def _markov_stages(rng, n_epochs: int, self_p: float) -> np.ndarray:
    stages = np.empty(n_epochs, dtype=np.int64)
    stages[0] = rng.integers(5)
    for i in range(1, n_epochs):
        if rng.random() < self_p:
            stages[i] = stages[i - 1]
        else:
            step = rng.integers(4)  # uniform over the four other stages
            stages[i] = (stages[i - 1] + 1 + step) % 5
    return stages


def _synth_epoch(rng, levels, cfg: SyntheticCohortConfig) -> np.ndarray:
    shift = cfg.mismatch
    if shift.band_mixing is not None:
        levels = shift.band_mixing @ levels
    u = _RFFT_FREQS / shift.freq_warp
    psd = np.full(_RFFT_FREQS.shape[0], cfg.baseline_power)
    for (lo, hi), lev in zip(cfg.band_edges, levels):
        psd[(u >= lo) & (u < hi)] = lev
    psd = psd + shift.noise_floor
    amp = np.sqrt(psd)
    re = rng.standard_normal(amp.shape[0])
    im = rng.standard_normal(amp.shape[0])
    spec = amp * (re + 1j * im) / np.sqrt(2.0)
    spec[0] = 0.0
    spec[-1] = amp[-1] * re[-1]
    return (np.fft.irfft(spec, n=EPOCH_SAMPLES) * np.sqrt(EPOCH_SAMPLES)).astype(np.float32)


def generate_synthetic_cohort(cfg: SyntheticCohortConfig) -> list[Recording]:
    """Deterministically synthesize a cohort of recordings from ``cfg``."""
    root = np.random.SeedSequence(cfg.rng_seed)
    recordings = []
    for s, child in enumerate(root.spawn(cfg.n_subjects)):
        rng = np.random.Generator(np.random.PCG64(child))
        stages = _markov_stages(rng, cfg.epochs_per_subject, cfg.self_transition)
        epochs = []
        for stage in stages:
            mean = cfg.stage_band_power[stage]
            std = cfg.stage_band_std[stage]
            levels = np.maximum(mean + std * rng.standard_normal(mean.shape[0]), 0.05 * mean)
            epochs.append(_synth_epoch(rng, levels, cfg))
        samples = np.concatenate(epochs)
        recordings.append(
            Recording(
                subject_id=f"{cfg.subject_prefix}{s:03d}",
                channel_name=cfg.channel_name,
                sample_rate=TARGET_RATE,
                samples=samples,
                epoch_labels=stages,
                lights_off_idx=0,
                lights_on_idx=samples.shape[0],
            )
        )
    return recordings
