"""Multichannel EEG-like signal handling: loading, synthesis, splitting, noise.

Datasets are immutable collections of fixed-shape windows. All randomness is
driven by explicit seeds so every dataset-producing operation is reproducible.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numutil import round_half_up

NOISE_KINDS = ("amplitude_scale", "time_shift", "dc_shift", "gaussian")

# Default parameter ranges per noise kind: (min, max).
DEFAULT_NOISE_RANGES = {
    "amplitude_scale": (0.5, 2.0),
    "time_shift": (-50.0, 50.0),
    "dc_shift": (-10.0, 10.0),
    "gaussian": (0.0, 0.2),
}


class DataError(ValueError):
    """Raised for malformed datasets, manifests, or generator specs."""


@dataclass(frozen=True)
class EegWindow:
    """One C-channel, L-step signal segment with optional metadata."""

    samples: np.ndarray  # shape (C, L), microvolt scale
    sampling_rate: float
    label: int | None = None
    subject_id: str | None = None

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 2 or samples.shape[0] < 1 or samples.shape[1] < 1:
            raise DataError(f"window samples must be a C x L matrix, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise DataError("window contains non-finite sample values")
        if not self.sampling_rate > 0:
            raise DataError(f"sampling_rate must be positive, got {self.sampling_rate}")
        object.__setattr__(self, "samples", samples)

    @property
    def num_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def num_steps(self) -> int:
        return self.samples.shape[1]


@dataclass(frozen=True)
class EegDataset:
    """Ordered collection of windows sharing channel count, length, and rate."""

    windows: tuple[EegWindow, ...]
    name: str = "dataset"

    def __post_init__(self):
        windows = tuple(self.windows)
        if windows:
            first = windows[0]
            for i, w in enumerate(windows):
                if w.samples.shape != first.samples.shape:
                    raise DataError(
                        f"window {i} of {self.name!r} has shape {w.samples.shape}, "
                        f"expected {first.samples.shape}"
                    )
                if w.sampling_rate != first.sampling_rate:
                    raise DataError(
                        f"window {i} of {self.name!r} has sampling rate {w.sampling_rate}, "
                        f"expected {first.sampling_rate}"
                    )
        object.__setattr__(self, "windows", windows)

    def __len__(self) -> int:
        return len(self.windows)

    def __iter__(self):
        return iter(self.windows)

    @property
    def num_channels(self) -> int:
        return self.windows[0].num_channels

    @property
    def num_steps(self) -> int:
        return self.windows[0].num_steps

    @property
    def sampling_rate(self) -> float:
        return self.windows[0].sampling_rate

    def stacked(self) -> np.ndarray:
        """All windows as one (n, C, L) array."""
        return np.stack([w.samples for w in self.windows])

    def labels(self) -> np.ndarray:
        """Labels as an int array; raises if any window is unlabeled."""
        labels = [w.label for w in self.windows]
        if any(lab is None for lab in labels):
            raise DataError(f"dataset {self.name!r} has unlabeled windows")
        return np.asarray(labels, dtype=np.int64)

    def subject_ids(self) -> list[str]:
        ids = [w.subject_id for w in self.windows]
        if any(s is None for s in ids):
            raise DataError(f"dataset {self.name!r} has windows without subject_id")
        return ids  # type: ignore[return-value]

    def subset(self, indices, name: str | None = None) -> "EegDataset":
        return EegDataset(tuple(self.windows[i] for i in indices), name or self.name)


@dataclass(frozen=True)
class NoiseSpec:
    """One perturbation kind with its parameter range."""

    kind: str
    min_value: float | None = None
    max_value: float | None = None

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise DataError(f"unknown noise kind {self.kind!r}, expected one of {NOISE_KINDS}")
        lo, hi = DEFAULT_NOISE_RANGES[self.kind]
        if self.min_value is None:
            object.__setattr__(self, "min_value", lo)
        if self.max_value is None:
            object.__setattr__(self, "max_value", hi)
        if self.min_value > self.max_value:  # type: ignore[operator]
            raise DataError(f"noise range has min {self.min_value} > max {self.max_value}")


@dataclass(frozen=True)
class SplitSpec:
    """Train/val/test fractions plus the unit they apply to."""

    train_fraction: float = 0.7
    val_fraction: float = 0.15
    test_fraction: float = 0.15
    mode: str = "random"  # "random" or "subject_wise"

    def __post_init__(self):
        fractions = (self.train_fraction, self.val_fraction, self.test_fraction)
        if any(not 0 < f < 1 for f in fractions):
            raise DataError(f"split fractions must each lie in (0, 1), got {fractions}")
        if abs(sum(fractions) - 1.0) > 1e-9:
            raise DataError(f"split fractions must sum to 1, got {sum(fractions)}")
        if self.mode not in ("random", "subject_wise"):
            raise DataError(f"unknown split mode {self.mode!r}")


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator config for band-separable synthetic signals.

    Each window is a sum of band-limited sinusoids whose frequency band is
    determined by the class label, scaled by a per-subject amplitude factor
    drawn once per subject, plus white noise. Classes are therefore linearly
    separable in relative band power by construction.
    """

    n: int = 512
    channels: int = 4
    length: int = 128
    sampling_rate: float = 128.0
    classes: int = 2
    subjects: int = 8
    seed: int = 0
    waves_per_window: int = 3
    noise_std: float = 0.5
    subject_scale_range: tuple[float, float] = (0.5, 2.0)
    min_band_hz: float = 4.0

    def __post_init__(self):
        for name in ("n", "channels", "length", "classes", "subjects"):
            if getattr(self, name) < 1:
                raise DataError(f"synthetic spec field {name!r} must be >= 1")
        if self.sampling_rate <= 0:
            raise DataError("sampling_rate must be positive")
        if self.noise_std < 0:
            raise DataError("noise_std must be nonnegative")


def class_frequency_bands(spec: SyntheticSpec) -> list[tuple[float, float]]:
    """Disjoint frequency band (lo, hi) in Hz for each class.

    Bands tile [min_band_hz, 0.45 * sampling_rate] evenly, with a 10% guard
    gap at each band edge so neighboring classes never share frequencies.
    """
    lo = spec.min_band_hz
    hi = 0.45 * spec.sampling_rate
    if hi <= lo:
        raise DataError(f"sampling rate {spec.sampling_rate} too low for band layout")
    width = (hi - lo) / spec.classes
    gap = 0.1 * width
    return [(lo + c * width + gap, lo + (c + 1) * width - gap) for c in range(spec.classes)]


def synthesize_dataset(spec: SyntheticSpec) -> EegDataset:
    """Generate a labeled synthetic dataset, deterministic in spec.seed.

    Window i gets label ``i % classes`` and subject ``i // classes % subjects``
    so every subject sees a balanced class mix.
    """
    rng = np.random.default_rng(spec.seed)
    bands = class_frequency_bands(spec)
    scale_lo, scale_hi = spec.subject_scale_range
    subject_scales = rng.uniform(scale_lo, scale_hi, size=spec.subjects)
    t = np.arange(spec.length) / spec.sampling_rate

    windows = []
    for i in range(spec.n):
        label = i % spec.classes
        subject = (i // spec.classes) % spec.subjects
        band_lo, band_hi = bands[label]
        freqs = rng.uniform(band_lo, band_hi, size=spec.waves_per_window)
        amps = rng.uniform(0.8, 1.2, size=spec.waves_per_window)
        phases = rng.uniform(0, 2 * np.pi, size=(spec.waves_per_window, spec.channels))
        signal = np.zeros((spec.channels, spec.length))
        for k in range(spec.waves_per_window):
            signal += amps[k] * np.sin(2 * np.pi * freqs[k] * t[None, :] + phases[k][:, None])
        signal *= subject_scales[subject]
        signal += rng.normal(0.0, spec.noise_std, size=signal.shape)
        windows.append(
            EegWindow(
                samples=signal,
                sampling_rate=spec.sampling_rate,
                label=label,
                subject_id=f"S{subject:03d}",
            )
        )
    return EegDataset(tuple(windows), name="synthetic")


def load_dataset(path: str | Path, fmt: str = "csv_manifest") -> EegDataset:
    """Load a dataset from a manifest of per-window signal files.

    The manifest is UTF-8 CSV with header ``path,label,subject``; each row
    points at a text matrix of C rows by L columns (comma- or whitespace-
    separated). Paths are resolved relative to the manifest location.
    """
    if fmt != "csv_manifest":
        raise DataError(f"unsupported dataset format {fmt!r}")
    manifest = Path(path)
    if not manifest.is_file():
        raise DataError(f"manifest file not found: {manifest}")

    windows: list[EegWindow] = []
    expected_shape: tuple[int, int] | None = None
    sampling_rate = 1.0
    with manifest.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"path", "label", "subject"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise DataError(
                f"manifest {manifest} must have header columns {sorted(required)}, "
                f"got {reader.fieldnames}"
            )
        for row_index, row in enumerate(reader):
            signal_path = (manifest.parent / row["path"]).resolve()
            if not signal_path.is_file():
                raise DataError(f"manifest row {row_index}: signal file not found: {signal_path}")
            samples = _read_signal_matrix(signal_path, row_index)
            if expected_shape is None:
                expected_shape = samples.shape
            elif samples.shape != expected_shape:
                raise DataError(
                    f"manifest row {row_index} ({row['path']}): shape {samples.shape} "
                    f"does not match {expected_shape} from earlier rows"
                )
            label = int(row["label"]) if row["label"] not in ("", None) else None
            subject = row["subject"] or None
            if row.get("sampling_rate"):
                sampling_rate = float(row["sampling_rate"])
            try:
                windows.append(
                    EegWindow(samples, sampling_rate=sampling_rate, label=label, subject_id=subject)
                )
            except DataError as exc:
                raise DataError(f"manifest row {row_index} ({row['path']}): {exc}") from exc
    if not windows:
        raise DataError(f"manifest {manifest} lists no windows")
    return EegDataset(tuple(windows), name=manifest.stem)


def _read_signal_matrix(path: Path, row_index: int) -> np.ndarray:
    text = path.read_text(encoding="utf-8")
    delimiter = "," if "," in text.splitlines()[0] else None
    try:
        samples = np.loadtxt(path, delimiter=delimiter, ndmin=2)
    except ValueError as exc:
        raise DataError(f"manifest row {row_index} ({path.name}): cannot parse matrix: {exc}") from exc
    if not np.all(np.isfinite(samples)):
        bad = np.argwhere(~np.isfinite(samples))[0]
        raise DataError(
            f"manifest row {row_index} ({path.name}): non-finite value at "
            f"channel {bad[0]}, step {bad[1]}"
        )
    return samples


def split(
    dataset: EegDataset, spec: SplitSpec, seed: int
) -> tuple[EegDataset, EegDataset, EegDataset]:
    """Partition into (train, val, test).

    subject_wise mode allocates whole subjects to splits; random mode
    allocates windows. Val/test counts are rounded to nearest (ties up)
    and the remainder goes to train.
    """
    rng = np.random.default_rng(seed)
    if spec.mode == "subject_wise":
        subjects = sorted(set(dataset.subject_ids()))
        if len(subjects) < 3:
            raise DataError(
                f"subject_wise split needs >= 3 distinct subjects, got {len(subjects)}"
            )
        order = rng.permutation(len(subjects))
        shuffled = [subjects[i] for i in order]
        n_val = round_half_up(spec.val_fraction * len(subjects))
        n_test = round_half_up(spec.test_fraction * len(subjects))
        if n_val + n_test >= len(subjects):
            raise DataError("split fractions leave no subjects for training")
        val_subjects = set(shuffled[:n_val])
        test_subjects = set(shuffled[n_val : n_val + n_test])
        groups: dict[str, list[int]] = {"train": [], "val": [], "test": []}
        for i, w in enumerate(dataset.windows):
            if w.subject_id in val_subjects:
                groups["val"].append(i)
            elif w.subject_id in test_subjects:
                groups["test"].append(i)
            else:
                groups["train"].append(i)
    else:
        order = rng.permutation(len(dataset))
        n_val = round_half_up(spec.val_fraction * len(dataset))
        n_test = round_half_up(spec.test_fraction * len(dataset))
        if n_val + n_test >= len(dataset):
            raise DataError("split fractions leave no windows for training")
        groups = {
            "val": list(order[:n_val]),
            "test": list(order[n_val : n_val + n_test]),
            "train": list(order[n_val + n_test :]),
        }
    return (
        dataset.subset(groups["train"], f"{dataset.name}-train"),
        dataset.subset(groups["val"], f"{dataset.name}-val"),
        dataset.subset(groups["test"], f"{dataset.name}-test"),
    )


def apply_noise(window: EegWindow, spec: NoiseSpec, magnitude: float, seed: int) -> EegWindow:
    """Perturb one window at a severity in [0, 1].

    Magnitude 0 is the identity for every kind; magnitude 1 exercises the
    full parameter range of the spec. Severity scales each kind's parameter
    away from its neutral point:

    - amplitude_scale: one scalar factor drawn uniformly from the interval
      whose ends interpolate from 1.0 toward (min, max) as magnitude grows.
    - time_shift: circular rotation by a step count drawn uniformly from
      [round(magnitude * min), round(magnitude * max)].
    - dc_shift: deterministic offset of magnitude * max added everywhere.
    - gaussian: i.i.d. additive noise with sigma = min + magnitude * (max - min).
    """
    if not 0.0 <= magnitude <= 1.0:
        raise DataError(f"noise magnitude must lie in [0, 1], got {magnitude}")
    rng = np.random.default_rng(seed)
    lo, hi = float(spec.min_value), float(spec.max_value)  # type: ignore[arg-type]
    samples = window.samples

    if spec.kind == "amplitude_scale":
        scale = rng.uniform(1.0 + magnitude * (lo - 1.0), 1.0 + magnitude * (hi - 1.0))
        out = samples * scale
    elif spec.kind == "time_shift":
        shift_lo = round_half_up(magnitude * lo)
        shift_hi = round_half_up(magnitude * hi)
        shift = int(rng.integers(shift_lo, shift_hi + 1))
        out = np.roll(samples, shift, axis=1)
    elif spec.kind == "dc_shift":
        out = samples + magnitude * hi
    elif spec.kind == "gaussian":
        sigma = lo + magnitude * (hi - lo)
        out = samples + rng.normal(0.0, sigma, size=samples.shape)
    else:  # pragma: no cover - NoiseSpec already validates
        raise DataError(f"unknown noise kind {spec.kind!r}")

    return EegWindow(out, window.sampling_rate, window.label, window.subject_id)


def perturb_dataset(
    dataset: EegDataset, spec: NoiseSpec, magnitude: float, seed: int
) -> EegDataset:
    """Apply one noise kind to every window with per-window derived seeds."""
    seeds = np.random.SeedSequence(seed).generate_state(len(dataset))
    windows = tuple(
        apply_noise(w, spec, magnitude, int(s)) for w, s in zip(dataset.windows, seeds)
    )
    return EegDataset(windows, name=f"{dataset.name}-{spec.kind}")
