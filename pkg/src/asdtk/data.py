"""Dataset manifests, synthetic machine-sound generation, and batching.

The synthetic corpus mirrors the layout of real machine-monitoring data:
several machine types, a handful of machine IDs per type, normal-only
training clips, and a test split with both normal and anomalous clips.
Every (machine_type, machine_id) pair is one classification label.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .dsp import Waveform, write_wav
from .errors import ManifestError

MANIFEST_COLUMNS = ("path", "machine_type", "machine_id", "split", "condition")
SPLITS = ("train", "test")
CONDITIONS = ("normal", "anomaly")
ANOMALY_KINDS = ("detuned", "bursts", "bandnoise")

# canonical machine-type names; synthetic corpora with more types continue
# as type6, type7, ...
MACHINE_TYPE_NAMES = ("fan", "pump", "slider", "valve", "toycar", "toyconveyor")


@dataclass(frozen=True)
class ClipRecord:
    path: str
    machine_type: str
    machine_id: int
    split: str
    condition: str

    @property
    def label(self) -> tuple:
        return (self.machine_type, self.machine_id)


@dataclass(frozen=True)
class Manifest:
    records: tuple
    class_map: dict  # (machine_type, machine_id) -> class index
    root: Path  # directory clip paths are relative to

    @property
    def num_classes(self) -> int:
        return len(self.class_map)

    @property
    def train_records(self) -> list:
        return [r for r in self.records if r.split == "train"]

    @property
    def test_records(self) -> list:
        return [r for r in self.records if r.split == "test"]

    def resolve(self, record: ClipRecord) -> Path:
        return self.root / record.path

    def class_index(self, record: ClipRecord) -> int:
        return self.class_map[record.label]


def build_class_map(records) -> dict:
    labels = sorted({r.label for r in records})
    return {label: i for i, label in enumerate(labels)}


def manifest_from_records(records, root) -> Manifest:
    records = tuple(records)
    if not records:
        raise ManifestError("no records")
    class_map = build_class_map(records)
    if len(class_map) < 2:
        raise ManifestError(f"need at least 2 classes, found {len(class_map)}")
    return Manifest(records, class_map, Path(root))


def parse_manifest(path) -> Manifest:
    """Read and validate a manifest CSV; clip paths are relative to it."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError("no records") from None
        if tuple(h.strip() for h in header) != MANIFEST_COLUMNS:
            raise ManifestError(f"expected header {','.join(MANIFEST_COLUMNS)}, got {','.join(header)}", line=1)
        records = []
        seen = set()
        for line_no, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(MANIFEST_COLUMNS):
                raise ManifestError(f"expected {len(MANIFEST_COLUMNS)} fields, got {len(row)}", line=line_no)
            clip_path, machine_type, machine_id, split, condition = (f.strip() for f in row)
            if split not in SPLITS:
                raise ManifestError(f"unknown split {split!r}", line=line_no)
            if condition not in CONDITIONS:
                raise ManifestError(f"unknown condition {condition!r}", line=line_no)
            if split == "train" and condition == "anomaly":
                raise ManifestError("anomaly rows are not allowed in the train split", line=line_no)
            try:
                machine_id = int(machine_id)
            except ValueError:
                raise ManifestError(f"machine_id must be an integer, got {machine_id!r}", line=line_no) from None
            record = ClipRecord(clip_path, machine_type, machine_id, split, condition)
            if record in seen:
                raise ManifestError(f"duplicate row for {clip_path!r}", line=line_no)
            seen.add(record)
            records.append(record)
    if not records:
        raise ManifestError("no records")
    return manifest_from_records(records, path.parent)


def write_manifest(records, path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for r in records:
            writer.writerow([r.path, r.machine_type, r.machine_id, r.split, r.condition])


# ---------------------------------------------------------------------------
# synthetic clips


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for one synthetic clip.

    A normal clip and its anomalous counterpart differ only in
    (anomaly_kind, anomaly_strength); everything else, including the
    random draws for the base signal, is shared.
    """

    machine_type: str
    machine_id: int
    base_freq: float
    seed: int
    n_harmonics: int = 3
    harmonic_decay: float = 0.6
    mod_depth: float = 0.25
    mod_rate: float = 3.0
    noise_level: float = 0.1
    anomaly_kind: str = "detuned"
    anomaly_strength: float = 0.0
    duration: float = 2.0
    sample_rate: int = 16000

    def __post_init__(self):
        if self.base_freq <= 0 or self.duration <= 0 or self.sample_rate <= 0:
            raise ManifestError("base_freq, duration, and sample_rate must be positive")
        if self.n_harmonics < 1:
            raise ManifestError("n_harmonics must be >= 1")
        if self.anomaly_strength < 0:
            raise ManifestError("anomaly_strength must be >= 0")
        if self.anomaly_kind not in ANOMALY_KINDS:
            raise ManifestError(f"unknown anomaly kind {self.anomaly_kind!r}")

    def as_anomaly(self, strength: float) -> "SynthSpec":
        return replace(self, anomaly_strength=strength)


def _perturbation(spec: SynthSpec, t: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if spec.anomaly_kind == "detuned":
        # inharmonic partial a third of an octave off the 3rd harmonic
        freq = spec.base_freq * 3.0 * 2.0 ** (1.0 / 3.0)
        return np.sin(2.0 * np.pi * freq * t + rng.uniform(0.0, 2.0 * np.pi))
    if spec.anomaly_kind == "bursts":
        n = t.size
        out = np.zeros(n)
        width = max(1, int(0.030 * spec.sample_rate))
        for _ in range(4):
            start = rng.integers(0, max(1, n - width))
            envelope = np.exp(-np.arange(width) / (0.25 * width))
            out[start:start + width] += 3.0 * envelope * rng.standard_normal(width)
        return out
    # bandnoise: white noise confined to a band well above the harmonics
    white = rng.standard_normal(t.size)
    spectrum = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(t.size, 1.0 / spec.sample_rate)
    lo = min(4.0 * spec.base_freq, 0.35 * spec.sample_rate)
    hi = min(6.5 * spec.base_freq, 0.45 * spec.sample_rate)
    spectrum[(freqs < lo) | (freqs > hi)] = 0.0
    band = np.fft.irfft(spectrum, n=t.size)
    rms = np.sqrt(np.mean(band ** 2))
    return 1.5 * band / max(rms, 1e-12)


def synth_clip(spec: SynthSpec) -> Waveform:
    """Render a clip deterministically from its spec and seed."""
    n = round(spec.duration * spec.sample_rate)
    t = np.arange(n) / spec.sample_rate
    base_ss, anomaly_ss = np.random.SeedSequence(spec.seed).spawn(2)
    rng = np.random.Generator(np.random.PCG64(base_ss))

    x = np.zeros(n)
    for h in range(1, spec.n_harmonics + 1):
        amp = spec.harmonic_decay ** (h - 1)
        x += amp * np.sin(2.0 * np.pi * spec.base_freq * h * t + rng.uniform(0.0, 2.0 * np.pi))
    if spec.mod_depth > 0:
        x *= 1.0 + spec.mod_depth * np.sin(2.0 * np.pi * spec.mod_rate * t + rng.uniform(0.0, 2.0 * np.pi))
    if spec.noise_level > 0:
        x += spec.noise_level * rng.standard_normal(n)
    if spec.anomaly_strength > 0:
        anomaly_rng = np.random.Generator(np.random.PCG64(anomaly_ss))
        x = x + spec.anomaly_strength * _perturbation(spec, t, anomaly_rng)

    peak = np.abs(x).max()
    if peak > 0.9:
        x = x * (0.9 / peak)
    return Waveform(x, spec.sample_rate)


def machine_type_name(index: int) -> str:
    if index < len(MACHINE_TYPE_NAMES):
        return MACHINE_TYPE_NAMES[index]
    return f"type{index}"


def default_spec(type_index: int, machine_id: int, n_ids: int, seed: int,
                 duration: float = 2.0, anomaly_strength: float = 0.0) -> SynthSpec:
    """Per-class recipe: distinct base frequency, per-type timbre and anomaly kind."""
    class_index = type_index * n_ids + machine_id
    return SynthSpec(
        machine_type=machine_type_name(type_index),
        machine_id=machine_id,
        base_freq=110.0 * 1.32 ** class_index,
        seed=seed,
        n_harmonics=3 + type_index % 3,
        harmonic_decay=0.5 + 0.08 * (type_index % 4),
        mod_depth=0.25,
        mod_rate=2.0 + 1.5 * type_index,
        noise_level=0.1,
        anomaly_kind=ANOMALY_KINDS[type_index % len(ANOMALY_KINDS)],
        anomaly_strength=anomaly_strength,
        duration=duration,
    )


def _clip_seed(master_seed: int, *key: int) -> int:
    state = np.random.SeedSequence(entropy=master_seed, spawn_key=tuple(key)).generate_state(2)
    return int(state[0]) | (int(state[1]) << 32)


def write_corpus(out_dir, n_types: int, n_ids: int, train_clips: int, seed: int,
                 duration: float = 2.0, test_clips: int | None = None,
                 anomaly_strength: float = 0.4) -> Path:
    """Render a synthetic corpus to WAV files and return the manifest path.

    Per (type, id): `train_clips` normal training clips plus `test_clips`
    normal and `test_clips` anomalous test clips (default train_clips//4,
    at least 1).
    """
    if n_types < 1 or n_ids < 1 or train_clips < 1:
        raise ManifestError("need at least one type, id, and training clip")
    out_dir = Path(out_dir)
    if test_clips is None:
        test_clips = max(1, train_clips // 4)

    records = []
    for t in range(n_types):
        for i in range(n_ids):
            plan = [("train", "normal", train_clips), ("test", "normal", test_clips), ("test", "anomaly", test_clips)]
            for split_i, (split, condition, count) in enumerate(plan):
                cond_i = CONDITIONS.index(condition)
                for k in range(count):
                    spec = default_spec(
                        t, i, n_ids,
                        seed=_clip_seed(seed, t, i, split_i, cond_i, k),
                        duration=duration,
                        anomaly_strength=anomaly_strength if condition == "anomaly" else 0.0,
                    )
                    rel = Path("audio") / f"{spec.machine_type}_id{i}" / f"{split}_{condition}_{k:04d}.wav"
                    target = out_dir / rel
                    target.parent.mkdir(parents=True, exist_ok=True)
                    write_wav(target, synth_clip(spec))
                    records.append(ClipRecord(rel.as_posix(), spec.machine_type, i, split, condition))

    manifest_path = out_dir / "manifest.csv"
    write_manifest(records, manifest_path)
    return manifest_path


# ---------------------------------------------------------------------------
# batching


def make_batches(manifest: Manifest, batch_size: int, epoch_seed: int) -> list:
    """One seeded random pass over the train split; the short tail batch is kept.

    Returns lists of indices into `manifest.train_records`.
    """
    if batch_size < 2:
        raise ManifestError(f"batch_size must be >= 2 for mixup partners, got {batch_size}")
    n = len(manifest.train_records)
    if n == 0:
        raise ManifestError("train split is empty")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(epoch_seed)))
    order = rng.permutation(n)
    return [order[i:i + batch_size].tolist() for i in range(0, n, batch_size)]
