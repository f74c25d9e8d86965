"""Observable preprocessing: delay embedding, trimming, frequency counting."""

from dataclasses import dataclass, field

import numpy as np
from scipy import signal as sps

from .errors import InvalidArgumentError
from .mechsys import Trajectory


@dataclass(frozen=True)
class EmbeddingConfig:
    """Delay-embedding configuration.

    delay_dimension p and delay_step are in samples; the effective delay is
    ``delay_step * dt``. ``channels`` selects observable columns (labels or
    indices); empty means all. Samples before ``trim_time`` are discarded
    first.
    """

    delay_dimension: int
    delay_step: int = 1
    channels: tuple = ()
    trim_time: float = 0.0

    def __post_init__(self):
        if self.delay_dimension < 1:
            raise InvalidArgumentError("delay_dimension must be >= 1")
        if self.delay_step < 1:
            raise InvalidArgumentError("delay_step must be >= 1")
        if self.trim_time < 0:
            raise InvalidArgumentError("trim_time must be >= 0")
        object.__setattr__(self, "channels", tuple(self.channels))


@dataclass(frozen=True)
class EmbeddedDataset:
    """A set of trajectories sharing one embedding space."""

    trajectories: tuple
    source_config: EmbeddingConfig = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        trajs = tuple(self.trajectories)
        if not trajs:
            raise InvalidArgumentError("dataset needs at least one trajectory")
        dim = trajs[0].n_channels
        dt = trajs[0].dt
        for tr in trajs:
            if tr.n_channels != dim:
                raise InvalidArgumentError("trajectories disagree in dimension")
            if abs(tr.dt - dt) > 1e-9 * dt:
                raise InvalidArgumentError("trajectories disagree in dt")
            if not np.all(np.isfinite(tr.states)):
                raise InvalidArgumentError("dataset contains non-finite samples")
        object.__setattr__(self, "trajectories", trajs)

    @property
    def dt(self):
        return self.trajectories[0].dt

    @property
    def dimension(self):
        return self.trajectories[0].n_channels

    def pooled_states(self):
        return np.vstack([tr.states for tr in self.trajectories])


def trim_transient(traj, trim_time):
    """Drop samples with t < trim_time, keeping original time stamps."""
    if len(traj.times) == 0:
        raise InvalidArgumentError("empty trajectory")
    if trim_time >= traj.times[-1]:
        raise InvalidArgumentError(
            f"trim_time {trim_time} leaves no samples "
            f"(final time {traj.times[-1]})")
    keep = traj.times >= trim_time
    return Trajectory(times=traj.times[keep], states=traj.states[keep],
                      channel_labels=traj.channel_labels)


def default_trim_time(spectrum, ssm_pair_count, factor=3.0):
    """Reproducible transient-trim default: factor / |Re lambda_{m+1}|.

    Returns 0.0 when no faster mode exists (all modes retained).
    """
    if ssm_pair_count >= spectrum.n_modes:
        return 0.0
    lam = spectrum.mode_eigenvalue(ssm_pair_count + 1)
    return factor / abs(lam.real)


def delay_embed(traj, cfg):
    """Delay-embed selected channels of a trajectory.

    For each selected channel s, sample i of the output contains
    ``(s(t_i), s(t_i + D), ..., s(t_i + (p-1) D))`` with
    ``D = delay_step * dt``; channels are concatenated. Output length is the
    (trimmed) input length minus ``(p - 1) * delay_step``.
    """
    work = trim_transient(traj, cfg.trim_time) if cfg.trim_time > 0 else traj
    if cfg.channels:
        work = work.select_channels(list(cfg.channels))
    p = cfg.delay_dimension
    step = cfg.delay_step
    n = work.n_samples
    n_out = n - (p - 1) * step
    if n_out < 1:
        raise InvalidArgumentError(
            f"need at least {(p - 1) * step + 1} samples after trimming, "
            f"have {n}")
    cols = []
    labels = []
    for c in range(work.n_channels):
        s = work.states[:, c]
        base = work.channel_labels[c]
        for k in range(p):
            cols.append(s[k * step: k * step + n_out])
            labels.append(base if k == 0 else f"{base}+{k}d")
    return Trajectory(times=work.times[:n_out], states=np.column_stack(cols),
                      channel_labels=tuple(labels))


def check_embedding_dimension(m, p):
    """Delay-embedding dimension test: sufficient iff p > 4m.

    Proceeding with an insufficient p is allowed; callers record the flag in
    model metadata.
    """
    if m < 1:
        raise InvalidArgumentError("m must be >= 1")
    return "sufficient" if p > 4 * m else "insufficient"


def count_dominant_frequencies(traj, channel=0, threshold_db=30.0):
    """Count distinct spectral peaks of one channel.

    Welch-averaged power spectrum; a frequency counts when it is a local
    maximum within threshold_db of the strongest peak. Returns 0 for an
    all-zero signal.
    """
    x = traj.channel(channel)
    if len(x) < 256:
        raise InvalidArgumentError("need at least 256 samples")
    if np.max(np.abs(x)) == 0.0:
        return 0
    fs = 1.0 / traj.dt
    nperseg = min(len(x), 1024)
    freqs, pxx = sps.welch(x, fs=fs, nperseg=nperseg)
    pxx = np.maximum(pxx, np.max(pxx) * 1e-300)
    pdb = 10.0 * np.log10(pxx)
    floor = pdb.max() - threshold_db
    peaks, _ = sps.find_peaks(pdb, height=floor)
    return int(len(peaks))


def spectrogram_csv(traj, channel, path, nperseg=256):
    """Export a spectrogram (for plotting only) as CSV: t, f, power columns."""
    x = traj.channel(channel)
    fs = 1.0 / traj.dt
    freqs, times, sxx = sps.spectrogram(x, fs=fs, nperseg=min(nperseg, len(x)))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("t,f,power\n")
        for i, t in enumerate(times):
            for j, f in enumerate(freqs):
                fh.write(f"{t:.17g},{f:.17g},{sxx[j, i]:.17g}\n")


def sampling_time_warning(dt_effective, frequencies, rel_tol=0.01):
    """Frequencies whose half-period nearly matches the embedding delay.

    Returns the list of offending frequencies (rad/s); the caller decides
    whether to warn. A delay near a half-period of a linear mode makes the
    delay map nearly degenerate for that mode.
    """
    bad = []
    for w in np.atleast_1d(frequencies):
        if w <= 0:
            continue
        half_period = np.pi / w
        k = max(1, round(dt_effective / half_period))
        if abs(dt_effective - k * half_period) < rel_tol * half_period:
            bad.append(float(w))
    return bad
