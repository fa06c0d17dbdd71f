"""MFCC extraction for first-pass pseudo-labeling.

Pipeline: preemphasis -> Hann window -> squared-magnitude FFT -> HTK-scale
mel filterbank -> floored log -> orthonormal DCT-II, optionally followed by
first/second order deltas. All math is float64 and fully deterministic.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class MfccConfig:
    window: int = 400
    hop: int = 160
    num_mel: int = 26
    num_ceps: int = 13
    fft_size: int = 512
    preemphasis: float = 0.97
    floor: float = 1e-10
    deltas: bool = True

    def __post_init__(self):
        if self.window > self.fft_size:
            raise ValueError("window must not exceed fft_size")
        if self.hop < 1:
            raise ValueError("hop must be >= 1")
        if self.num_ceps > self.num_mel:
            raise ValueError("num_ceps must not exceed num_mel")

    @property
    def dim(self) -> int:
        return 3 * self.num_ceps if self.deltas else self.num_ceps


@dataclass
class FeatureSequence:
    """T x D frame matrix plus provenance."""

    frames: np.ndarray
    frame_rate: float
    meta: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError("frames must be a T x D matrix with T >= 1")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("frames contain non-finite values")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_centers(num_mel: int, sample_rate: int) -> np.ndarray:
    """Center frequency (Hz) of each triangular mel filter."""
    edges = np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2.0), num_mel + 2)
    return mel_to_hz(edges[1:-1])


def mel_filterbank(num_mel: int, fft_size: int, sample_rate: int) -> np.ndarray:
    """num_mel x (fft_size//2 + 1) triangular filters sampled at bin frequencies."""
    edges_hz = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2.0), num_mel + 2))
    bin_hz = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    fb = np.zeros((num_mel, bin_hz.size))
    for j in range(num_mel):
        lo, mid, hi = edges_hz[j], edges_hz[j + 1], edges_hz[j + 2]
        up = (bin_hz - lo) / (mid - lo)
        down = (hi - bin_hz) / (hi - mid)
        fb[j] = np.maximum(0.0, np.minimum(up, down))
    return fb


def dct_matrix(num_out: int, num_in: int) -> np.ndarray:
    """Orthonormal DCT-II rows (row 0 scaled by 1/sqrt(2))."""
    i = np.arange(num_out)[:, None]
    j = np.arange(num_in)[None, :]
    mat = np.sqrt(2.0 / num_in) * np.cos(np.pi * i * (2 * j + 1) / (2.0 * num_in))
    mat[0] /= np.sqrt(2.0)
    return mat


def frame_count(num_samples: int, window: int, hop: int) -> int:
    return 1 + (num_samples - window) // hop


def log_mel_energies(waveform, cfg: MfccConfig) -> np.ndarray:
    """T x num_mel floored log mel energies (the pre-DCT representation)."""
    x = waveform.samples
    if x.size < cfg.window:
        raise ValueError(
            f"waveform has {x.size} samples, shorter than one window ({cfg.window})"
        )
    pre = np.empty_like(x)
    pre[0] = x[0]
    pre[1:] = x[1:] - cfg.preemphasis * x[:-1]
    t = frame_count(x.size, cfg.window, cfg.hop)
    idx = np.arange(cfg.window)[None, :] + cfg.hop * np.arange(t)[:, None]
    frames = pre[idx] * np.hanning(cfg.window)[None, :]
    power = np.abs(np.fft.rfft(frames, n=cfg.fft_size, axis=1)) ** 2
    fb = mel_filterbank(cfg.num_mel, cfg.fft_size, waveform.sample_rate)
    return np.log(np.maximum(power @ fb.T, cfg.floor))


def _deltas(ceps: np.ndarray, width: int = 2) -> np.ndarray:
    """Regression deltas over +-width frames, edge frames replicated."""
    t = ceps.shape[0]
    padded = np.concatenate([ceps[:1].repeat(width, axis=0), ceps, ceps[-1:].repeat(width, axis=0)])
    num = np.zeros_like(ceps)
    for w in range(1, width + 1):
        num += w * (padded[width + w : width + w + t] - padded[width - w : width - w + t])
    return num / (2.0 * sum(w * w for w in range(1, width + 1)))


def mfcc(waveform, cfg: MfccConfig | None = None, meta: str = "") -> FeatureSequence:
    """Extract MFCC features; D = num_ceps (x3 with deltas)."""
    cfg = cfg or MfccConfig()
    logmel = log_mel_energies(waveform, cfg)
    ceps = logmel @ dct_matrix(cfg.num_ceps, cfg.num_mel).T
    if cfg.deltas:
        d1 = _deltas(ceps)
        d2 = _deltas(d1)
        ceps = np.concatenate([ceps, d1, d2], axis=1)
    return FeatureSequence(ceps, waveform.sample_rate / cfg.hop, meta=meta)


def frame_labels_align(features: FeatureSequence, labels, tolerance: int = 2):
    """Truncate features and labels to their common length.

    Off-by-one or two frame-count differences come from framing conventions;
    anything larger means the pairing is wrong and is rejected.
    """
    tf, tl = features.num_frames, len(labels.labels)
    if abs(tf - tl) > tolerance:
        raise ValueError(
            f"feature/label length mismatch beyond tolerance: {tf} frames vs {tl} labels"
        )
    t = min(tf, tl)
    out_feats = FeatureSequence(features.frames[:t], features.frame_rate, features.meta)
    out_labels = labels.truncated(t)
    return out_feats, out_labels


# ---------------------------------------------------------------------------
# Feature dumps: {id}.f32 float32 little-endian row-major blob + {id}.json


def save_features(out_dir, uid: str, features: FeatureSequence) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{uid}.f32").write_bytes(
        features.frames.astype("<f4").tobytes(order="C")
    )
    sidecar = {
        "id": uid,
        "T": features.num_frames,
        "D": features.dim,
        "frame_rate": features.frame_rate,
    }
    (out_dir / f"{uid}.json").write_text(json.dumps(sidecar) + "\n", encoding="utf-8")


def load_features(out_dir, uid: str) -> FeatureSequence:
    out_dir = Path(out_dir)
    sidecar = json.loads((out_dir / f"{uid}.json").read_text(encoding="utf-8"))
    raw = np.frombuffer((out_dir / f"{uid}.f32").read_bytes(), dtype="<f4")
    frames = raw.astype(np.float64).reshape(sidecar["T"], sidecar["D"])
    return FeatureSequence(frames, sidecar["frame_rate"], meta=sidecar["id"])
