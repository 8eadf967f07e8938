"""Spectra data model, CSV/manifest ingestion, masking, shot averaging and triplet sampling.

On-disk layout of a dataset directory::

    spectra.csv     header ``wavelength,<sample_id_1>,...``; one row per bin
    manifest.json   {sample_id: {"target_id", "location_id", "shot_index",
                                 optional "SiO2", "TiO2", ..., "K2O"}}

All randomness uses numpy's PCG64 bit generator seeded through
``numpy.random.SeedSequence``; see :func:`rng_for`.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import DataError, EmptySpectrumError, FormatError, GridError, GroupingError, SamplingError

OXIDES: Tuple[str, ...] = ("SiO2", "TiO2", "Al2O3", "FeOT", "MgO", "CaO", "Na2O", "K2O")

# Bands (nm) excluded by default before any modelling.
DEFAULT_MASK_BANDS: Tuple[Tuple[float, float], ...] = (
    (240.811, 246.635),
    (338.457, 340.797),
    (382.13, 387.859),
    (473.184, 492.427),
    (849.0, 905.574),
)

SPECTRA_FILE = "spectra.csv"
MANIFEST_FILE = "manifest.json"

SeedLike = Union[int, Sequence[int], np.random.SeedSequence]


def rng_for(seed: SeedLike, *stream: int) -> np.random.Generator:
    """Return a PCG64 generator for ``seed`` and an optional named sub-stream.

    ``rng_for(7, 2, 5)`` always yields the same stream, independent of any
    other stream derived from seed 7.
    """
    if isinstance(seed, np.random.SeedSequence):
        ss = seed
        if stream:
            ss = np.random.SeedSequence(ss.entropy, spawn_key=tuple(ss.spawn_key) + tuple(stream))
    else:
        entropy = [int(s) for s in np.atleast_1d(seed)]
        if any(e < 0 for e in entropy):
            raise ValueError("seeds must be non-negative")
        ss = np.random.SeedSequence(entropy, spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass
class Spectrum:
    """One laser shot: wavelength grid, intensities and provenance."""

    wavelengths: np.ndarray
    intensities: np.ndarray
    target_id: str
    location_id: int = 0
    shot_index: int = 0
    sample_id: str = ""

    def __post_init__(self):
        self.wavelengths = np.asarray(self.wavelengths, dtype=np.float64)
        self.intensities = np.asarray(self.intensities, dtype=np.float64)
        if self.wavelengths.ndim != 1 or self.intensities.ndim != 1:
            raise DataError("wavelengths and intensities must be 1-D")
        if self.wavelengths.shape != self.intensities.shape:
            raise DataError(
                f"length mismatch: {self.wavelengths.size} wavelengths vs {self.intensities.size} intensities"
            )
        if self.wavelengths.size == 0:
            raise EmptySpectrumError("spectrum has no bins")
        if np.any(np.diff(self.wavelengths) <= 0):
            raise GridError("wavelengths must be strictly increasing")
        if not np.all(np.isfinite(self.intensities)):
            raise DataError(f"non-finite intensity in sample {self.sample_id or self.target_id!r}")

    def __len__(self) -> int:
        return self.intensities.size

    def with_intensities(self, values) -> "Spectrum":
        return replace(self, intensities=np.asarray(values, dtype=np.float64))


@dataclass(frozen=True)
class WavelengthMask:
    bands: Tuple[Tuple[float, float], ...] = ()

    def __post_init__(self):
        bands = tuple((float(lo), float(hi)) for lo, hi in self.bands)
        for lo, hi in bands:
            if not lo <= hi:
                raise ValueError(f"mask band [{lo}, {hi}] has lo > hi")
        object.__setattr__(self, "bands", bands)

    @classmethod
    def default(cls) -> "WavelengthMask":
        return cls(DEFAULT_MASK_BANDS)

    @classmethod
    def from_file(cls, path) -> "WavelengthMask":
        """Read one ``lo,hi`` pair per line; blank lines and ``#`` comments are skipped."""
        bands = []
        for n, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 2:
                raise FormatError(f"{path}:{n}: expected 'lo,hi', got {line!r}")
            try:
                bands.append((float(parts[0]), float(parts[1])))
            except ValueError as exc:
                raise FormatError(f"{path}:{n}: {exc}") from None
        return cls(tuple(bands))

    def keep(self, wavelengths: np.ndarray) -> np.ndarray:
        """Boolean vector: True for bins outside every band."""
        wl = np.asarray(wavelengths, dtype=np.float64)
        inside = np.zeros(wl.shape, dtype=bool)
        for lo, hi in self.bands:
            inside |= (wl >= lo) & (wl <= hi)
        return ~inside


@dataclass
class Dataset:
    """Immutable collection of spectra on one shared wavelength grid.

    ``labels`` maps target_id to an 8-vector of oxide wt% in :data:`OXIDES` order.
    """

    samples: List[Spectrum]
    grid: np.ndarray
    labels: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        for s in self.samples:
            if s.wavelengths is not self.grid and not np.array_equal(s.wavelengths, self.grid):
                raise GridError(f"sample {s.sample_id!r} is not on the dataset grid")
        present = {s.target_id for s in self.samples}
        for t, v in self.labels.items():
            if t not in present:
                raise DataError(f"labelled target {t!r} has no samples")
            if np.shape(v) != (len(OXIDES),):
                raise DataError(f"labels for {t!r} must have {len(OXIDES)} entries")
        self._matrix = None

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def n_bins(self) -> int:
        return self.grid.size

    @property
    def target_ids(self) -> List[str]:
        return sorted({s.target_id for s in self.samples})

    def intensity_matrix(self) -> np.ndarray:
        """(n_samples, n_bins) float64 array, cached; treat as read-only."""
        if self._matrix is None:
            m = np.stack([s.intensities for s in self.samples]) if self.samples else np.zeros((0, self.n_bins))
            m.setflags(write=False)
            self._matrix = m
        return self._matrix

    def target_index(self) -> Dict[str, np.ndarray]:
        """Sample indices per target id, in sample order."""
        out: Dict[str, List[int]] = {}
        for i, s in enumerate(self.samples):
            out.setdefault(s.target_id, []).append(i)
        return {t: np.asarray(v, dtype=np.int64) for t, v in sorted(out.items())}

    def groups(self) -> Dict[Tuple[str, int], List[int]]:
        """Sample indices per (target_id, location_id), sorted by key."""
        out: Dict[Tuple[str, int], List[int]] = {}
        for i, s in enumerate(self.samples):
            out.setdefault((s.target_id, s.location_id), []).append(i)
        return dict(sorted(out.items()))

    def label(self, target_id: str, oxide: str) -> float:
        return float(self.labels[target_id][OXIDES.index(oxide)])


# ---------------------------------------------------------------- ingestion

def _read_table(path: Path) -> Tuple[List[str], np.ndarray, np.ndarray]:
    text = path.read_text()
    first = text.split("\n", 1)[0]
    header = next(csv.reader([first]))
    header = [h.strip() for h in header]
    if len(header) < 2 or header[0] != "wavelength":
        raise FormatError(f"{path}: header must start with 'wavelength' and name at least one sample")
    ids = header[1:]
    if len(set(ids)) != len(ids) or any(not i for i in ids):
        raise FormatError(f"{path}: duplicate or empty sample ids in header")
    try:
        table = np.loadtxt(io.StringIO(text), delimiter=",", skiprows=1, ndmin=2, dtype=np.float64)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if table.shape[0] == 0:
        raise FormatError(f"{path}: no data rows")
    if table.shape[1] != len(header):
        raise FormatError(f"{path}: expected {len(header)} columns, found {table.shape[1]}")
    bad = ~np.all(np.isfinite(table), axis=1)
    if bad.any():
        row = int(np.argmax(bad))
        raise DataError(f"{path}: non-finite value in data row {row + 1} (line {row + 2})")
    grid = table[:, 0]
    if np.any(np.diff(grid) <= 0):
        raise GridError(f"{path}: wavelength column must be strictly increasing")
    return ids, grid, table[:, 1:]


def _parse_manifest(path: Path) -> Dict[str, dict]:
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: {exc}") from None
    if not isinstance(raw, dict):
        raise FormatError(f"{path}: manifest must be a JSON object keyed by sample id")
    return raw


def load_dataset(path, format: str = "csv", manifest=None) -> Dataset:
    """Load a dataset from a spectra-table CSV (or a directory of them) plus manifest.

    ``path`` may be a single CSV file or a directory; in the directory case
    every ``spectra*.csv`` file is loaded and the grids must agree exactly.
    The manifest defaults to ``manifest.json`` next to the table(s).
    """
    if format != "csv":
        raise ValueError(f"unsupported format {format!r}")
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("spectra*.csv"))
        if not files:
            raise FileNotFoundError(f"no spectra*.csv files in {path}")
        root = path
    else:
        if not path.exists():
            raise FileNotFoundError(path)
        files = [path]
        root = path.parent
    manifest_path = Path(manifest) if manifest is not None else root / MANIFEST_FILE
    if not manifest_path.exists():
        raise FileNotFoundError(manifest_path)
    meta = _parse_manifest(manifest_path)

    grid = None
    samples: List[Spectrum] = []
    labels: Dict[str, np.ndarray] = {}
    seen = set()
    for f in files:
        ids, g, values = _read_table(f)
        if grid is None:
            grid = g
        elif not np.array_equal(grid, g):
            raise GridError(f"{f}: wavelength grid differs from {files[0]}")
        for col, sid in enumerate(ids):
            if sid in seen:
                raise FormatError(f"{f}: sample id {sid!r} appears in more than one column")
            seen.add(sid)
            entry = meta.get(sid)
            if not isinstance(entry, dict) or "target_id" not in entry:
                raise FormatError(f"{manifest_path}: no manifest entry with target_id for sample {sid!r}")
            try:
                target = str(entry["target_id"])
                loc = int(entry.get("location_id", 0))
                shot = int(entry.get("shot_index", 0))
            except (TypeError, ValueError) as exc:
                raise FormatError(f"{manifest_path}: sample {sid!r}: {exc}") from None
            samples.append(Spectrum(grid, values[:, col].copy(), target, loc, shot, sid))
            present = [ox for ox in OXIDES if ox in entry]
            if present:
                if len(present) != len(OXIDES):
                    missing = sorted(set(OXIDES) - set(present))
                    raise FormatError(f"{manifest_path}: sample {sid!r} is missing oxides {missing}")
                vec = np.array([float(entry[ox]) for ox in OXIDES])
                if not np.all(np.isfinite(vec)):
                    raise DataError(f"{manifest_path}: non-finite oxide label for sample {sid!r}")
                if target in labels and not np.array_equal(labels[target], vec):
                    raise DataError(f"{manifest_path}: conflicting labels for target {target!r}")
                labels[target] = vec
    return Dataset(samples, grid, labels)


def _fmt(x: float) -> str:
    return repr(float(x))


def save_dataset(d: Dataset, directory, name: str = SPECTRA_FILE) -> Tuple[Path, Path]:
    """Write ``d`` as spectra table + manifest; loading the result gives back ``d``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ids = [s.sample_id or f"s{i}" for i, s in enumerate(d.samples)]
    if len(set(ids)) != len(ids):
        raise DataError("sample ids must be unique to serialise a dataset")
    write_table(directory / name, d.grid, ids, d.intensity_matrix())
    manifest = {}
    for sid, s in zip(ids, d.samples):
        entry = {"target_id": s.target_id, "location_id": int(s.location_id), "shot_index": int(s.shot_index)}
        if s.target_id in d.labels:
            entry.update({ox: float(v) for ox, v in zip(OXIDES, d.labels[s.target_id])})
        manifest[sid] = entry
    mpath = directory / MANIFEST_FILE
    mpath.write_text(json.dumps(manifest, indent=1) + "\n")
    return directory / name, mpath


def table_lines(grid: np.ndarray, ids: Sequence[str], matrix: np.ndarray,
                leading: Optional[Tuple[str, str]] = None) -> List[str]:
    """Lines of a spectra table (header first); ``matrix`` is (n_samples, n_bins).

    ``leading`` optionally prepends a constant column ``(name, value)``.
    """
    head = ["wavelength", *ids]
    if leading:
        head.insert(0, leading[0])
    lines = [",".join(head)]
    prefix = leading[1] + "," if leading else ""
    cols = np.asarray(matrix, dtype=np.float64).T
    for w, row in zip(grid, cols):
        lines.append(prefix + ",".join([_fmt(w), *map(_fmt, row)]))
    return lines


def write_table(path, grid: np.ndarray, ids: Sequence[str], matrix: np.ndarray):
    Path(path).write_text("\n".join(table_lines(grid, ids, matrix)) + "\n")


# ---------------------------------------------------------------- transforms

def apply_mask(s: Spectrum, m: WavelengthMask) -> Spectrum:
    keep = m.keep(s.wavelengths)
    if not keep.any():
        raise EmptySpectrumError("mask removes every bin of the spectrum")
    if keep.all():
        return s
    return replace(s, wavelengths=s.wavelengths[keep], intensities=s.intensities[keep])


def mask_dataset(d: Dataset, m: WavelengthMask) -> Dataset:
    keep = m.keep(d.grid)
    if not keep.any():
        raise EmptySpectrumError("mask removes every bin of the grid")
    if keep.all():
        return d
    grid = d.grid[keep]
    samples = [replace(s, wavelengths=grid, intensities=s.intensities[keep]) for s in d.samples]
    return Dataset(samples, grid, dict(d.labels))


def shot_average(group: Sequence[Spectrum]) -> Spectrum:
    """Per-bin arithmetic mean of repeated shots at one target location."""
    if len(group) == 0:
        raise ValueError("cannot average an empty group")
    first = group[0]
    for s in group[1:]:
        if s.target_id != first.target_id or s.location_id != first.location_id:
            raise GroupingError(
                f"mixed group: ({first.target_id!r}, {first.location_id}) vs ({s.target_id!r}, {s.location_id})"
            )
        if not np.array_equal(s.wavelengths, first.wavelengths):
            raise GridError("shots in a group must share one wavelength grid")
    if len(group) == 1:
        return first
    mean = np.mean(np.stack([s.intensities for s in group]), axis=0)
    return replace(first, intensities=mean)


def shot_averages(d: Dataset) -> List[Spectrum]:
    """One averaged spectrum per (target, location), sorted by that key."""
    return [shot_average([d.samples[i] for i in idx]) for idx in d.groups().values()]


# ---------------------------------------------------------------- triplets

@dataclass(frozen=True)
class TripletBatch:
    """Sample indices into a Dataset.

    ``alignment_sets`` has shape (batch, n_align). Row ``i`` of all three
    arrays refers to samples of pairwise-distinct targets.
    """

    anchors: np.ndarray
    noise_sources: np.ndarray
    alignment_sets: np.ndarray

    def __len__(self) -> int:
        return int(self.anchors.shape[0])


def make_triplets(d: Dataset, batch: int, n_align: int = 1, seed: SeedLike = 0) -> TripletBatch:
    """Draw ``batch`` tuples (anchor j, noise source k, alignment partners k').

    Each tuple uses ``2 + n_align`` distinct targets, chosen uniformly without
    replacement within the tuple; tuples are independent (with replacement
    across the batch). Within a chosen target a sample is picked uniformly.
    """
    if batch < 1 or n_align < 1:
        raise ValueError("batch and n_align must be positive")
    by_target = d.target_index()
    n_t = len(by_target)
    need = 2 + n_align
    if n_t < need:
        raise SamplingError(f"need at least {need} distinct targets for n_align={n_align}, dataset has {n_t}")
    rng = rng_for(seed)
    # a uniformly random ordered subset of size `need` per row
    keys = rng.random((batch, n_t))
    chosen = np.argsort(keys, axis=1, kind="stable")[:, :need]
    counts = np.array([len(v) for v in by_target.values()])
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    flat = np.concatenate(list(by_target.values()))
    offsets = np.floor(rng.random((batch, need)) * counts[chosen]).astype(np.int64)
    picks = flat[starts[chosen] + offsets]
    return TripletBatch(picks[:, 0].copy(), picks[:, 1].copy(), picks[:, 2:].copy())


def check_triplets(d: Dataset, tb: TripletBatch) -> bool:
    """True iff every tuple in ``tb`` uses pairwise-distinct targets."""
    targets = np.array([s.target_id for s in d.samples], dtype=object)
    for j, k, ks in zip(tb.anchors, tb.noise_sources, tb.alignment_sets):
        ts = [targets[j], targets[k], *targets[ks]]
        if len(set(ts)) != len(ts):
            return False
    return True

