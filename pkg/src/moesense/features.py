"""Feature extraction from CSI streams.

Two feature families feed the detection experts: the normalized Doppler
energy distribution of the temporal amplitude variation, and order/moment
statistics of the amplitude series. Both operate on the subcarrier-averaged
amplitude, so a stream reduces to one real time series before analysis.

The Pearson correlation here is also the gating primitive used to match
incoming features against per-expert template centroids.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, FormatError, InputError
from .simulate import CsiStream, amplitude_series

AMP_STATS_LENGTH = 6

# Fixed bin count keeps feature vectors comparable across rates; the top
# frequency clips to Nyquist when the stream rate is low. The default span
# tracks the generator's Doppler band so bins spend their resolution where
# target lines actually fall.
DEFAULT_DOPPLER_BINS = 25
DEFAULT_DOPPLER_MAX_HZ = 62.5

_ZERO_ENERGY_EPS = 1e-15


class FeatureKind(enum.Enum):
    DOPPLER_ENERGY = "doppler"
    AMPLITUDE_STATS = "amp_stats"


@dataclass(frozen=True, eq=False)
class FeatureVector:
    kind: FeatureKind
    values: np.ndarray
    source_rate: float

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class DopplerConfig:
    """Uniform energy bins over [0, max_freq_hz]."""

    num_bins: int = DEFAULT_DOPPLER_BINS
    max_freq_hz: float = DEFAULT_DOPPLER_MAX_HZ

    def __post_init__(self) -> None:
        if self.num_bins < 2:
            raise ConfigurationError(f"num_bins must be >= 2, got {self.num_bins}")
        if self.max_freq_hz <= 0:
            raise ConfigurationError(f"max_freq_hz must be positive, got {self.max_freq_hz}")

    def clipped_to_rate(self, packet_rate: float) -> "DopplerConfig":
        """Same bin count with the top frequency clipped to Nyquist."""
        return DopplerConfig(self.num_bins, min(self.max_freq_hz, packet_rate / 2.0))


def mean_amplitude_series(stream: CsiStream) -> np.ndarray:
    """Subcarrier-averaged amplitude, one value per packet."""
    return amplitude_series(stream).mean(axis=1)


def extract_doppler(stream: CsiStream, cfg: DopplerConfig | None = None) -> FeatureVector:
    """Binned, normalized spectral energy of the amplitude variation.

    The mean-removed subcarrier-averaged amplitude is Fourier transformed,
    its magnitude-squared spectrum accumulated into `cfg.num_bins` uniform
    bins over [0, cfg.max_freq_hz], and the result normalized to sum 1.
    A constant stream has no dynamic energy and yields the all-zero vector.
    """
    if cfg is None:
        cfg = DopplerConfig().clipped_to_rate(stream.packet_rate)
    if stream.num_packets < 8:
        raise InputError(f"need at least 8 packets, got {stream.num_packets}")
    if cfg.max_freq_hz > stream.packet_rate / 2.0:
        raise ConfigurationError(
            f"max_freq_hz {cfg.max_freq_hz} above Nyquist for rate {stream.packet_rate}"
        )

    series = mean_amplitude_series(stream)
    centered = series - series.mean()
    spectrum = np.abs(np.fft.rfft(centered)) ** 2
    freqs = np.fft.rfftfreq(len(centered), d=1.0 / stream.packet_rate)

    bin_width = cfg.max_freq_hz / cfg.num_bins
    in_band = freqs <= cfg.max_freq_hz
    idx = np.minimum((freqs[in_band] / bin_width).astype(int), cfg.num_bins - 1)
    energy = np.zeros(cfg.num_bins)
    np.add.at(energy, idx, spectrum[in_band])

    total = energy.sum()
    if total >= _ZERO_ENERGY_EPS:
        energy /= total
    else:
        energy[:] = 0.0
    return FeatureVector(FeatureKind.DOPPLER_ENERGY, energy, stream.packet_rate)


def extract_amp_stats(stream: CsiStream) -> FeatureVector:
    """[mean, population variance, MAD, median, Q1, Q3] of the amplitude series."""
    if stream.num_packets < 2:
        raise InputError(f"need at least 2 packets, got {stream.num_packets}")
    series = mean_amplitude_series(stream)
    mean = series.mean()
    q1, median, q3 = np.quantile(series, [0.25, 0.5, 0.75])
    values = np.array([
        mean,
        series.var(),
        np.abs(series - mean).mean(),
        median,
        q1,
        q3,
    ])
    return FeatureVector(FeatureKind.AMPLITUDE_STATS, values, stream.packet_rate)


def pearson(a: Sequence[float] | np.ndarray, b: Sequence[float] | np.ndarray) -> float:
    """Pearson correlation coefficient; 0.0 when either input has zero variance."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise InputError(f"length mismatch: {x.shape} vs {y.shape}")
    if x.size < 2:
        raise InputError(f"need at least 2 points, got {x.size}")
    # ptp == 0 catches constant inputs exactly, before mean-subtraction
    # rounding can manufacture a spurious nonzero variance
    if np.ptp(x) == 0.0 or np.ptp(y) == 0.0:
        return 0.0
    xc = x - x.mean()
    yc = y - y.mean()
    vx = float(xc @ xc)
    vy = float(yc @ yc)
    if vx <= 0.0 or vy <= 0.0:
        return 0.0
    return float(xc @ yc) / math.sqrt(vx * vy)


# ---------------------------------------------------------------------------
# CSV row codec (template-library interchange)
# ---------------------------------------------------------------------------

def feature_to_jsonable(fv: FeatureVector) -> dict:
    return {
        "kind": fv.kind.value,
        "source_rate": float(fv.source_rate),
        "values": [float(v) for v in fv.values],
    }


def feature_from_jsonable(d: dict) -> FeatureVector:
    return FeatureVector(FeatureKind(d["kind"]), np.asarray(d["values"], dtype=np.float64),
                         float(d["source_rate"]))


def feature_to_row(fv: FeatureVector) -> list[str]:
    return [fv.kind.value, repr(float(fv.source_rate))] + [repr(float(v)) for v in fv.values]


def feature_from_row(row: Sequence[str]) -> FeatureVector:
    if len(row) < 3:
        raise FormatError(f"feature row too short: {row!r}")
    try:
        kind = FeatureKind(row[0])
        rate = float(row[1])
        values = np.array([float(v) for v in row[2:]])
    except ValueError as exc:
        raise FormatError(f"malformed feature row: {exc}") from exc
    return FeatureVector(kind, values, rate)
