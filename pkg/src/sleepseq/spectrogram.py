"""Log-power time-frequency images for 30 s epochs.

A 3000-sample epoch (30 s at 100 Hz) is framed into 2 s Hamming windows with
50% overlap (hop 100 samples), each frame zero-padded to a 256-point FFT.
The one-sided squared magnitude gives 129 frequency bins and the framing
yields exactly 29 columns (last frame starts at sample 2800), so the output
image is always 129x29. Values are natural log of (power + 1e-12); no
per-recording or per-bin normalization happens here, spectral reweighting is
the job of the network's learnable filterbank.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EPOCH_SAMPLES = 3000
SAMPLE_RATE = 100
WIN_LEN = 200
HOP = 100
NFFT = 256
N_BINS = 129
N_FRAMES = 29
LOG_EPS = 1e-12

# symmetric Hamming: 0.54 - 0.46 cos(2 pi n / (N-1))
_WINDOW = 0.54 - 0.46 * np.cos(2.0 * np.pi * np.arange(WIN_LEN) / (WIN_LEN - 1))
_FRAME_IDX = np.arange(N_FRAMES)[:, None] * HOP + np.arange(WIN_LEN)[None, :]


class WrongEpochLength(ValueError):
    """Epoch does not contain exactly 3000 samples."""


@dataclass
class EpochImage:
    """One epoch's 129x29 log-power image plus its source epoch index."""

    values: np.ndarray
    epoch_index: int = field(default=-1)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.shape != (N_BINS, N_FRAMES):
            raise WrongEpochLength(
                f"EpochImage must be {N_BINS}x{N_FRAMES}, got {self.values.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("EpochImage contains non-finite values")


def batch_logpower(epochs: np.ndarray) -> np.ndarray:
    """STFT log-power for a batch of epochs, shape (n, 3000) -> (n, 129, 29)."""
    epochs = np.asarray(epochs, dtype=np.float64)
    if epochs.ndim == 1:
        epochs = epochs[None, :]
    if epochs.shape[-1] != EPOCH_SAMPLES:
        raise WrongEpochLength(
            f"expected {EPOCH_SAMPLES} samples per epoch, got {epochs.shape[-1]}"
        )
    frames = epochs[:, _FRAME_IDX] * _WINDOW          # (n, 29, 200)
    spec = np.fft.rfft(frames, n=NFFT, axis=-1)       # (n, 29, 129)
    power = spec.real**2 + spec.imag**2
    return np.log(power + LOG_EPS).transpose(0, 2, 1)  # (n, 129, 29)


def stft_logpower(epoch: np.ndarray, epoch_index: int = -1) -> EpochImage:
    """Transform one 3000-sample epoch into its log-power image."""
    epoch = np.asarray(epoch, dtype=np.float64)
    if epoch.ndim != 1 or epoch.shape[0] != EPOCH_SAMPLES:
        raise WrongEpochLength(
            f"expected a 1-D epoch of {EPOCH_SAMPLES} samples, got shape {epoch.shape}"
        )
    return EpochImage(batch_logpower(epoch[None, :])[0], epoch_index)


def recording_images(samples: np.ndarray, n_epochs: int) -> np.ndarray:
    """Images for all epochs of a prepared recording, float32 (n, 129, 29)."""
    samples = np.asarray(samples)
    if samples.shape[0] != n_epochs * EPOCH_SAMPLES:
        raise WrongEpochLength(
            f"recording has {samples.shape[0]} samples, expected {n_epochs * EPOCH_SAMPLES}"
        )
    epochs = samples.reshape(n_epochs, EPOCH_SAMPLES)
    return batch_logpower(epochs).astype(np.float32)


def dump_image_csv(image: EpochImage | np.ndarray, path) -> None:
    """Debug dump: rows are frequency bins, columns are frames."""
    values = image.values if isinstance(image, EpochImage) else np.asarray(image)
    np.savetxt(path, values, delimiter=",", fmt="%.8e")
