"""Synthetic RSVP epochs with a block-dependent (drowsiness-like) nuisance.

Every epoch is ``evoked + nuisance + pink noise`` on a 20-channel montage:

* a visual evoked response (P1/N1 pair, 100 and 170 ms after each stimulus of
  the 5 Hz stream), strongest occipitally and spreading forward, present in
  every epoch; at 5 Hz the P1 to the next-but-one stimulus lands at 300 ms,
  on top of the target response;
* on target epochs only, a Gaussian P300-like deflection of ``erp_amplitude``
  peaking at ``erp_latency_s`` on ``erp_channels``;
* independent 1/sqrt(f)-shaped Gaussian noise per channel with standard
  deviation ``noise_sigma``.

The nuisance grows monotonically with the block index, ``level(b) =
nuisance_strength * (b - 1) / (n_blocks - 1)``:

``amplitude_attenuation``
    all stimulus-locked activity (evoked response and P300) is scaled by
    ``1 - level(b)``;
``alpha_power``
    a 10 Hz rhythm with Gaussian quadrature amplitudes (standard deviation
    ``alpha_amplitude * level(b)``) is added to every channel;
``baseline_drift``
    a deterministic offset plus linear ramp of size ``drift_amplitude *
    level(b)`` is added to every channel.

All of these keep the data Gaussian given (block, label), which is what lets
:func:`bayes_auc_oracle` compute the optimal detector exactly.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .dataset import EpochSet
from .errors import ConfigError

CHANNEL_NAMES = ("Fp1", "Fp2", "F7", "F3", "Fz", "F4", "F8", "T3", "C3", "Cz",
                 "C4", "T4", "T5", "P3", "Pz", "P4", "T6", "O1", "O2", "Oz")
# visual evoked response falls off from occipital towards frontal sites
VEP_WEIGHTS = (0.05, 0.05, 0.1, 0.1, 0.1, 0.1, 0.1, 0.3, 0.3, 0.3,
               0.3, 0.3, 0.7, 0.6, 0.6, 0.6, 0.7, 1.0, 1.0, 1.0)
NUISANCE_MODES = ("amplitude_attenuation", "alpha_power", "baseline_drift")


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    n_blocks: int = 5
    trials_per_block: int = 100
    stimuli_per_trial: int = 15
    channels: int = 20
    samples: int = 180
    sample_rate_hz: float = 300.0
    erp_amplitude: float = 8.0
    erp_latency_s: float = 0.30
    erp_width_s: float = 0.08
    erp_channels: tuple = (8, 9, 10, 13, 14, 15)
    noise_sigma: float = 10.0
    nuisance_strength: float = 0.0
    nuisance_mode: str = "amplitude_attenuation"
    vep_amplitude: float = 20.0
    vep_weights: tuple | None = None
    stimulus_rate_hz: float = 5.0
    alpha_amplitude: float = 10.0
    alpha_hz: float = 10.0
    drift_amplitude: float = 10.0

    def validate(self):
        if self.nuisance_mode not in NUISANCE_MODES:
            raise ConfigError(f"nuisance_mode must be one of {NUISANCE_MODES}, got {self.nuisance_mode!r}")
        window = self.samples / self.sample_rate_hz
        if self.erp_latency_s + 2 * self.erp_width_s > window or self.erp_latency_s - 2 * self.erp_width_s < 0:
            raise ConfigError(f"ERP at {self.erp_latency_s}s +- 2*{self.erp_width_s}s does not fit a {window}s window")
        for name in ("n_blocks", "trials_per_block", "stimuli_per_trial", "channels", "samples"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.noise_sigma < 0 or self.nuisance_strength < 0:
            raise ConfigError("noise_sigma and nuisance_strength must be non-negative")
        for ch in self.erp_channels:
            if not 0 <= ch < self.channels:
                raise ConfigError(f"channel index {ch} outside 0..{self.channels - 1}")
        if self.vep_weights is not None and len(self.vep_weights) != self.channels:
            raise ConfigError(f"vep_weights needs {self.channels} entries, got {len(self.vep_weights)}")
        return self

    @property
    def epochs_per_block(self):
        return self.trials_per_block * self.stimuli_per_trial

    def to_dict(self):
        d = asdict(self)
        d["erp_channels"] = list(self.erp_channels)
        if self.vep_weights is not None:
            d["vep_weights"] = list(self.vep_weights)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("erp_channels", "vep_weights"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


# ----------------------------------------------------------------- model components


def nuisance_level(cfg: SynthConfig, block):
    if cfg.n_blocks == 1:
        return 0.0
    return cfg.nuisance_strength * (block - 1) / (cfg.n_blocks - 1)


def _times(cfg):
    return np.arange(cfg.samples) / cfg.sample_rate_hz


def erp_template(cfg: SynthConfig):
    """(C, T) target deflection with unit peak on every ERP channel."""
    t = _times(cfg)
    wave = np.exp(-0.5 * ((t - cfg.erp_latency_s) / cfg.erp_width_s) ** 2)
    out = np.zeros((cfg.channels, cfg.samples))
    out[list(cfg.erp_channels)] = wave
    return out


def vep_template(cfg: SynthConfig):
    """(C, T) evoked response to the stimulus stream, unit P1 amplitude."""
    t = _times(cfg)
    period = 1.0 / cfg.stimulus_rate_hz
    wave = np.zeros_like(t)
    # earlier stimuli whose responses still overlap the window are included
    for onset in np.arange(-3 * period, t[-1] + period / 2, period):
        lag = t - onset
        wave += np.exp(-0.5 * ((lag - 0.10) / 0.02) ** 2) - 0.8 * np.exp(-0.5 * ((lag - 0.17) / 0.03) ** 2)
    return vep_weights(cfg)[:, None] * wave[None, :]


def vep_weights(cfg: SynthConfig):
    if cfg.vep_weights is not None:
        return np.asarray(cfg.vep_weights, dtype=np.float64)
    if cfg.channels == len(VEP_WEIGHTS):
        return np.asarray(VEP_WEIGHTS)
    return np.linspace(0.05, 1.0, cfg.channels)


def _pink_gain(cfg):
    """Real-FFT magnitude profile of the noise filter, scaled to unit output variance."""
    t = cfg.samples
    freqs = np.fft.rfftfreq(t, d=1.0 / cfg.sample_rate_hz)
    gain = np.empty_like(freqs)
    gain[1:] = 1.0 / np.sqrt(freqs[1:])
    gain[0] = gain[1] if t > 1 else 1.0
    full = np.concatenate([gain, gain[1:(t + 1) // 2][::-1]])  # full symmetric spectrum
    return gain / np.sqrt(np.mean(full ** 2))


def pink_noise(white, cfg: SynthConfig):
    """Shape white noise (..., T) to a 1/sqrt(f) magnitude spectrum with std ``noise_sigma``."""
    spec = np.fft.rfft(white, axis=-1) * _pink_gain(cfg)
    return cfg.noise_sigma * np.fft.irfft(spec, n=cfg.samples, axis=-1)


def _alpha_basis(cfg):
    t = _times(cfg)
    return np.cos(2 * np.pi * cfg.alpha_hz * t), np.sin(2 * np.pi * cfg.alpha_hz * t)


def block_mean(cfg: SynthConfig, block, target):
    """Deterministic (C, T) part of an epoch for a given block and class."""
    level = nuisance_level(cfg, block)
    gain = 1.0 - level if cfg.nuisance_mode == "amplitude_attenuation" else 1.0
    mean = gain * cfg.vep_amplitude * vep_template(cfg)
    if target:
        mean = mean + gain * cfg.erp_amplitude * erp_template(cfg)
    if cfg.nuisance_mode == "baseline_drift":
        ramp = 1.0 + _times(cfg) / (cfg.samples / cfg.sample_rate_hz)
        mean = mean + cfg.drift_amplitude * level * ramp[None, :]
    return mean


def alpha_scale(cfg: SynthConfig, block):
    return cfg.alpha_amplitude * nuisance_level(cfg, block) if cfg.nuisance_mode == "alpha_power" else 0.0


def _low_rank_basis(cfg, block):
    """(k, C, T) directions along which an epoch has extra Gaussian variance, with their scales."""
    dirs, scales = [], []
    a = alpha_scale(cfg, block)
    if a > 0:
        cos, sin = _alpha_basis(cfg)
        ones = np.ones((cfg.channels, 1))
        dirs += [ones * cos, ones * sin]
        scales += [a, a]
    return dirs, scales


def _random_part(cfg, block, rng, n):
    """Zero-mean stochastic part of ``n`` epochs: pink noise plus any alpha rhythm."""
    white = rng.standard_normal((n, cfg.channels, cfg.samples))
    out = pink_noise(white, cfg)
    dirs, scales = _low_rank_basis(cfg, block)
    if dirs:
        q = rng.standard_normal((n, len(dirs)))
        for i, (d, sc) in enumerate(zip(dirs, scales)):
            out += sc * q[:, i, None, None] * d
    return out


# ------------------------------------------------------------------------ generation


def _epoch_rng(seed, block, index):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, block, index)))


def target_positions(cfg: SynthConfig, block):
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0, block)))
    return rng.integers(0, cfg.stimuli_per_trial, size=cfg.trials_per_block)


def generate(cfg: SynthConfig) -> EpochSet:
    """Deterministic under ``cfg``; each epoch draws from its own (seed, block, index) stream."""
    cfg.validate()
    if cfg.nuisance_mode == "amplitude_attenuation" and cfg.nuisance_strength >= 1:
        warnings.warn("nuisance_strength >= 1 removes the evoked response entirely in the last block",
                      stacklevel=2)
    per_block = cfg.epochs_per_block
    data = np.empty((cfg.n_blocks * per_block, cfg.channels, cfg.samples), dtype=np.float32)
    labels = np.zeros(cfg.n_blocks * per_block, dtype=np.int64)
    blocks = np.repeat(np.arange(1, cfg.n_blocks + 1), per_block)
    for b in range(1, cfg.n_blocks + 1):
        lab = np.zeros((cfg.trials_per_block, cfg.stimuli_per_trial), dtype=np.int64)
        lab[np.arange(cfg.trials_per_block), target_positions(cfg, b)] = 1
        lab = lab.reshape(-1)
        means = (block_mean(cfg, b, False), block_mean(cfg, b, True))
        start = (b - 1) * per_block
        for i in range(per_block):
            noise = _random_part(cfg, b, _epoch_rng(cfg.seed, b, i), 1)[0]
            data[start + i] = means[lab[i]] + noise
        labels[start:start + per_block] = lab
    return EpochSet(data, labels, blocks, sample_rate_hz=cfg.sample_rate_hz,
                    meta={"synth": cfg.to_dict(), "channel_names": list(CHANNEL_NAMES[:cfg.channels])})


# ---------------------------------------------------------------------------- oracle


class _GaussianMixtureDetector:
    """Exact log-likelihood ratio target vs non-target, mixed over the given blocks."""

    def __init__(self, cfg, blocks):
        self.cfg = cfg
        self.blocks = list(blocks)
        sigma = max(cfg.noise_sigma, 1e-9)
        gain = _pink_gain(cfg) * sigma
        self.inv_gain = 1.0 / gain
        self.means = {b: (self.whiten(block_mean(cfg, b, False)), self.whiten(block_mean(cfg, b, True)))
                      for b in self.blocks}
        self.low_rank = {}
        for b in self.blocks:
            dirs, scales = _low_rank_basis(cfg, b)
            if not dirs:
                continue
            v = np.stack([sc * self.whiten(d).ravel() for d, sc in zip(dirs, scales)], axis=1)
            chol = np.linalg.cholesky(np.eye(v.shape[1]) + v.T @ v)
            self.low_rank[b] = (v, chol, 2 * np.log(np.diag(chol)).sum())

    def whiten(self, x):
        """Apply the inverse square root of the (circulant, per-channel) noise covariance."""
        return np.fft.irfft(np.fft.rfft(x, axis=-1) * self.inv_gain, n=self.cfg.samples, axis=-1)

    def _loglik(self, r, block):
        # r: (n, C*T) whitened residuals; constant terms shared by all blocks dropped
        quad = np.einsum("ij,ij->i", r, r)
        if block in self.low_rank:
            v, chol, logdet = self.low_rank[block]
            proj = np.linalg.solve(chol, (r @ v).T)
            quad = quad - np.einsum("ij,ij->j", proj, proj)
            return -0.5 * quad - 0.5 * logdet
        return -0.5 * quad

    def score(self, x):
        w = self.whiten(np.asarray(x, dtype=np.float64)).reshape(len(x), -1)
        ll = {0: [], 1: []}
        for b in self.blocks:
            for cls in (0, 1):
                ll[cls].append(self._loglik(w - self.means[b][cls].ravel(), b))
        log_t = np.logaddexp.reduce(np.stack(ll[1]), axis=0)
        log_n = np.logaddexp.reduce(np.stack(ll[0]), axis=0)
        return log_t - log_n


def bayes_auc_oracle(cfg: SynthConfig, blocks=None, n_draws=100_000, seed=None, chunk=2_000):
    """Monte-Carlo AUC of the optimal (likelihood-ratio) detector on raw epochs.

    ``blocks`` defaults to the last two (the usual held-out blocks), weighted
    equally. Noise is Gaussian with a known circulant covariance, so the
    statistic is a whitened matched filter against each block's template,
    combined across blocks by log-sum-exp. No detector operating on the same
    epochs, or on any transform of them such as normalization, has a higher
    expected AUC.
    """
    from .evaluation import auc

    cfg.validate()
    if blocks is None:
        blocks = list(range(max(1, cfg.n_blocks - 1), cfg.n_blocks + 1))
    detector = _GaussianMixtureDetector(cfg, blocks)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed if seed is None else seed, spawn_key=(2,)))
    scores, labels = [], []
    per_cell = math.ceil(n_draws / (2 * len(blocks)))
    for b in blocks:
        for cls in (0, 1):
            mean = block_mean(cfg, b, bool(cls))
            left = per_cell
            while left > 0:
                n = min(chunk, left)
                x = mean + _random_part(cfg, b, rng, n)
                scores.append(detector.score(x))
                labels.append(np.full(n, cls))
                left -= n
    return auc(np.concatenate(scores), np.concatenate(labels))
