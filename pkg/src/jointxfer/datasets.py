"""Datasets: manifest loading, synthetic two-domain data, k-fold splits and
mini-batch / cross-dataset pair sampling."""

import csv
import logging
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import audio
from .errors import (ConfigError, DataError, DimensionError, EmptyManifestError,
                     MissingFileError, TooShortError, UnknownLabelError)
from .losses import pair_label

EMOTIONS = ("anger", "disgust", "fear", "happiness", "sadness", "surprise")
IMAGE_SIZE = 64
RAW_MAGIC = b"JXU8"

log = logging.getLogger(__name__)


@dataclass
class Dataset:
    """Materialized samples ``x [N,3,S,S]`` with integer labels.

    ``groups`` ties samples to a source item: each audio segment carries the
    index of its utterance; visual samples are their own group.
    """
    name: str
    modality: str
    x: np.ndarray
    labels: np.ndarray
    ids: list = field(default_factory=list)
    groups: np.ndarray = None
    class_names: tuple = EMOTIONS

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.modality not in ("visual", "audio"):
            raise ConfigError(f"modality must be visual or audio, got {self.modality!r}")
        if len(self.labels) == 0:
            raise DataError(f"dataset {self.name!r} is empty")
        if self.x.shape[0] != len(self.labels):
            raise DimensionError(f"{self.x.shape[0]} samples but {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= len(self.class_names):
            raise DataError(f"labels out of range in dataset {self.name!r}")
        if not self.ids:
            self.ids = [f"{self.name}-{i}" for i in range(len(self.labels))]
        if self.groups is None:
            self.groups = np.arange(len(self.labels))
        self.groups = np.asarray(self.groups, dtype=np.int64)

    def __len__(self):
        return len(self.labels)

    def subset(self, indices, name=None):
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(name or self.name, self.modality, self.x[idx], self.labels[idx],
                       [self.ids[i] for i in idx], self.groups[idx], self.class_names)

    def class_counts(self):
        return np.bincount(self.labels, minlength=len(self.class_names))


# ---------------------------------------------------------------------------
# image decoding
# ---------------------------------------------------------------------------

def write_raw_u8(path, img):
    """Raw image file: b"JXU8", u32 height, u32 width, u32 channels, then
    row-major (H, W, C) uint8 payload."""
    img = np.asarray(img, dtype=np.uint8)
    if img.ndim == 2:
        img = img[:, :, None]
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC + struct.pack("<III", *img.shape) + img.tobytes())


def read_raw_u8(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != RAW_MAGIC or len(blob) < 16:
        raise DataError(f"{path}: not a raw u8 tensor file")
    h, w, c = struct.unpack_from("<III", blob, 4)
    if len(blob) != 16 + h * w * c:
        raise DataError(f"{path}: payload size mismatch")
    return np.frombuffer(blob, np.uint8, offset=16).reshape(h, w, c)


def read_image(path):
    """Decode to a float ``(H, W, 3)`` array on the 0-255 scale."""
    if str(path).endswith(".u8t"):
        img = read_raw_u8(path)
    else:
        from PIL import Image
        with Image.open(path) as im:
            img = np.asarray(im.convert("RGB"))
    img = img.astype(np.float64)
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    if img.shape[2] != 3:
        raise DataError(f"{path}: expected 1 or 3 channels, got {img.shape[2]}")
    return img


def bilinear_resize(img, out_h, out_w):
    """Bilinear resize of ``(H, W, C)`` with half-pixel centers and edge clamp."""
    h, w = img.shape[:2]

    def axis(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    y0, y1, fy = axis(out_h, h)
    x0, x1, fx = axis(out_w, w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def load_image_tensor(path, size=IMAGE_SIZE):
    """Image file -> ``[3, size, size]`` in [0, 1]."""
    img = bilinear_resize(read_image(path), size, size)
    return (img / 255.0).transpose(2, 0, 1)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def load_manifest(path, name=None):
    """Load a ``path,label`` CSV. Paths are relative to the manifest.

    Rows are reported by their line number in the file (header is line 1).
    WAV rows are routed through the audio front end; an utterance too short
    for one segment is skipped with a warning.
    """
    path = os.fspath(path)
    if not os.path.exists(path):
        raise MissingFileError(f"manifest {path} not found")
    base = os.path.dirname(os.path.abspath(path))
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != ["path", "label"]:
        raise DataError(f"{path}: line 1: expected header 'path,label'")
    body = [(i, r) for i, r in enumerate(rows[1:], start=2) if any(c.strip() for c in r)]
    if not body:
        raise EmptyManifestError(f"{path}: manifest has no rows")
    index = {n: i for i, n in enumerate(EMOTIONS)}
    entries = []
    for line, row in body:
        if len(row) != 2:
            raise DataError(f"{path}: line {line}: expected 2 columns, got {len(row)}")
        rel, label = row[0].strip(), row[1].strip().lower()
        if label not in index:
            raise UnknownLabelError(f"{path}: line {line}: unknown label {row[1].strip()!r}")
        full = os.path.join(base, rel)
        if not os.path.exists(full):
            raise MissingFileError(f"{path}: line {line}: file {rel} not found")
        entries.append((line, rel, full, index[label]))
    kinds = {e[2].lower().endswith(".wav") for e in entries}
    if len(kinds) > 1:
        raise DataError(f"{path}: manifest mixes audio and image files")
    name = name or os.path.splitext(os.path.basename(path))[0]
    if kinds.pop():
        return _load_audio_entries(entries, name, path)
    xs = [load_image_tensor(full) for _, _, full, _ in entries]
    return Dataset(name, "visual", np.stack(xs), [e[3] for e in entries],
                   [e[1] for e in entries])


def _load_audio_entries(entries, name, path):
    xs, labels, ids, groups = [], [], [], []
    for utt, (line, rel, full, label) in enumerate(entries):
        try:
            segs = audio.extract_segments(audio.read_wav(full), utterance_id=rel)
        except TooShortError as exc:
            log.warning("%s: line %d: skipping utterance: %s", path, line, exc)
            continue
        except DataError as exc:
            raise DataError(f"{path}: line {line}: {exc}") from exc
        for s in segs:
            xs.append(s.data.transpose(2, 0, 1))
            labels.append(label)
            ids.append(f"{rel}@{s.start_frame}")
            groups.append(utt)
    if not xs:
        raise EmptyManifestError(f"{path}: no utterance long enough for a segment")
    return Dataset(name, "audio", np.stack(xs), labels, ids, np.array(groups))


def write_manifest(path, rel_paths, labels):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "label"])
        for p, l in zip(rel_paths, labels):
            w.writerow([p, EMOTIONS[l]])


# ---------------------------------------------------------------------------
# synthetic two-domain data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    classes: int = 6
    per_class: int = 40
    shift: float = 0.5
    noise: float = 0.3
    size: int = IMAGE_SIZE


def _class_templates(rng, classes, size):
    """One smooth colored pattern per class in roughly [-1, 1]."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    temps = np.zeros((classes, 3, size, size))
    for c in range(classes):
        for _ in range(3):
            cy, cx = rng.uniform(0.2, 0.8, 2)
            r = rng.uniform(0.08, 0.2)
            color = rng.uniform(-1, 1, 3)
            blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
            temps[c] += color[:, None, None] * blob
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(3, 6)
        grating = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)))
        temps[c] += 0.4 * rng.uniform(-1, 1, 3)[:, None, None] * grating
    return temps


def _style(x, shift):
    """Dataset-level appearance change: translation, color mixing, contrast
    and brightness, all zero at ``shift == 0``."""
    if shift == 0:
        return x
    size = x.shape[-1]
    x = np.roll(x, int(round(0.2 * size * shift)), axis=-1)
    perm = np.roll(np.eye(3), 1, axis=0)
    mix = (1 - shift) * np.eye(3) + shift * perm
    x = np.einsum("ij,...jhw->...ihw", mix, x)
    return (1 - 0.4 * shift) * x + 0.3 * shift


def synth_generate(spec=SynthSpec(), seed=0):
    """Two visual datasets over the same classes that differ in style.

    Dataset A uses the raw templates; B applies :func:`_style` with
    ``spec.shift``. Each sample adds amplitude jitter, a small translation and
    pixel noise, all proportional to ``spec.noise``. Pixel values are clipped
    to [0, 1]. A and B share sample draws, so with ``shift == 0`` and
    ``noise == 0`` they coincide.
    """
    if spec.per_class < 2:
        raise ConfigError("per_class must be >= 2")
    root = np.random.default_rng(seed)
    temps = _class_templates(np.random.default_rng(root.integers(2 ** 63)), spec.classes, spec.size)
    out = []
    for tag, shift in (("A", 0.0), ("B", spec.shift)):
        rng = np.random.default_rng(root.integers(2 ** 63))
        xs, labels = [], []
        for c in range(spec.classes):
            for _ in range(spec.per_class):
                amp = 1.0 + 0.3 * spec.noise * rng.standard_normal()
                dy, dx = np.round(2 * spec.noise * rng.standard_normal(2)).astype(int)
                x = amp * np.roll(temps[c], (dy, dx), axis=(-2, -1))
                x = x + 0.5 * spec.noise * rng.standard_normal(x.shape)
                xs.append(np.clip(0.5 + 0.25 * _style(x, shift), 0.0, 1.0))
                labels.append(c)
        x = np.stack(xs)
        out.append(Dataset(f"synth-{tag}", "visual", x, labels,
                           [f"synth-{tag}-{i}" for i in range(len(labels))],
                           class_names=EMOTIONS[:spec.classes] if spec.classes <= 6 else
                           tuple(f"class{i}" for i in range(spec.classes))))
    return out[0], out[1]


@dataclass(frozen=True)
class SynthAudioSpec:
    classes: int = 6
    per_class: int = 12
    min_seconds: float = 0.7
    max_seconds: float = 1.3
    noise: float = 0.05
    shift: float = 0.0
    sample_rate: int = 16000


def synth_waveforms(spec=SynthAudioSpec(), seed=0, variant=0):
    """Voiced, speech-like utterances whose class sets the pitch contour,
    formant positions and loudness rhythm.

    Class styles depend on ``seed`` only; ``variant`` draws a fresh set of
    utterances of the same classes. ``spec.shift`` models a different
    speaker pool / channel: higher pitch, raised formants and a tilt toward
    high frequencies. Returns ``(Waveform, label)`` in class-major order.
    """
    if spec.per_class < 1:
        raise ConfigError("per_class must be >= 1")
    crng = np.random.default_rng([seed, 0])
    rng = np.random.default_rng([seed, 1 + variant])
    sr = spec.sample_rate
    styles = [dict(f0=crng.uniform(100, 300), glide=crng.uniform(-0.4, 0.4),
                   formants=np.sort(crng.uniform(300, 3500, 3)),
                   am_rate=crng.uniform(2, 8))
              for _ in range(spec.classes)]
    out = []
    for c, st in enumerate(styles):
        for _ in range(spec.per_class):
            n = int(rng.uniform(spec.min_seconds, spec.max_seconds) * sr)
            t = np.arange(n) / sr
            f0 = (st["f0"] * (1 + 0.3 * spec.shift) * rng.uniform(0.92, 1.08)
                  * (1 + st["glide"] * t / t[-1]))
            phase = 2 * np.pi * np.cumsum(f0) / sr
            formants = st["formants"] * (1 + 0.15 * spec.shift) * rng.uniform(0.95, 1.05, 3)
            sig = np.zeros(n)
            for h in range(1, 40):
                fh = h * f0
                gain = sum(np.exp(-0.5 * ((fh - f) / 120.0) ** 2) for f in formants)
                gain = gain * (fh < 0.45 * sr) / h ** (0.5 - 0.4 * spec.shift)
                sig += gain * np.sin(h * phase)
            env = 0.6 + 0.4 * np.sin(2 * np.pi * st["am_rate"] * t + rng.uniform(0, 2 * np.pi))
            sig = sig * env
            sig = 0.5 * sig / np.max(np.abs(sig)) + spec.noise * rng.standard_normal(n)
            out.append((audio.Waveform(np.clip(sig, -1.0, 1.0), sr), c))
    return out


def synth_audio(spec=SynthAudioSpec(), seed=0, name="synth-audio", variant=0):
    """Run :func:`synth_waveforms` through the front end into a segment
    dataset (one group per utterance)."""
    xs, labels, ids, groups = [], [], [], []
    for utt, (w, label) in enumerate(synth_waveforms(spec, seed, variant)):
        for s in audio.extract_segments(w, utterance_id=f"utt{utt:04d}"):
            xs.append(s.data.transpose(2, 0, 1))
            labels.append(label)
            ids.append(f"{s.utterance_id}@{s.start_frame}")
            groups.append(utt)
    names = EMOTIONS[:spec.classes] if spec.classes <= 6 else \
        tuple(f"class{i}" for i in range(spec.classes))
    return Dataset(name, "audio", np.stack(xs), labels, ids, np.array(groups), names)


def save_waveforms(items, directory):
    """Write ``(Waveform, label)`` items as WAV files plus ``manifest.csv``."""
    os.makedirs(directory, exist_ok=True)
    rels = []
    for i, (w, _) in enumerate(items):
        rel = f"{i:05d}.wav"
        audio.write_wav(os.path.join(directory, rel), w)
        rels.append(rel)
    path = os.path.join(directory, "manifest.csv")
    write_manifest(path, rels, [label for _, label in items])
    return path


def save_dataset(ds, directory):
    """Write ``ds`` as raw u8 images plus ``manifest.csv`` under ``directory``."""
    os.makedirs(directory, exist_ok=True)
    rels = []
    for i, x in enumerate(ds.x):
        rel = f"{i:05d}.u8t"
        img = np.round(np.clip(x, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
        write_raw_u8(os.path.join(directory, rel), img)
        rels.append(rel)
    path = os.path.join(directory, "manifest.csv")
    write_manifest(path, rels, ds.labels)
    return path


# ---------------------------------------------------------------------------
# k-fold
# ---------------------------------------------------------------------------

def kfold_split(ds, k=5, seed=0):
    """Stratified partition into ``k`` folds of sample indices.

    Stratification runs over groups (utterances for audio) so segments of one
    utterance never straddle folds. Classes are dealt round-robin with a
    running offset, giving fold sizes within one group of each other.
    """
    groups, first = np.unique(ds.groups, return_index=True)
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}")
    if k > len(groups):
        raise ConfigError(f"k={k} exceeds the {len(groups)} available items")
    glabels = ds.labels[first]
    rng = np.random.default_rng(seed)
    order = []
    for c in np.unique(glabels):
        order.extend(rng.permutation(groups[glabels == c]))
    fold_of_group = {g: i % k for i, g in enumerate(order)}
    assign = np.array([fold_of_group[g] for g in ds.groups])
    return [np.flatnonzero(assign == f) for f in range(k)]


def train_val_split(ds, k=5, fold=0, seed=0):
    """Fold ``fold`` is validation, the other ``k-1`` folds are training."""
    folds = kfold_split(ds, k, seed)
    if not 0 <= fold < k:
        raise ConfigError(f"fold {fold} outside [0,{k})")
    train = np.sort(np.concatenate([f for i, f in enumerate(folds) if i != fold]))
    return ds.subset(train, f"{ds.name}-train"), ds.subset(folds[fold], f"{ds.name}-val")


# ---------------------------------------------------------------------------
# mini-batches and pairs
# ---------------------------------------------------------------------------

class MiniBatchSampler:
    """Index batches without replacement inside an epoch; the order is
    reshuffled whenever the dataset is exhausted."""

    def __init__(self, n, batch_size, rng):
        if n <= 0:
            raise DataError("cannot sample from an empty dataset")
        self.n = n
        self.batch_size = batch_size
        self.rng = rng
        self._order = rng.permutation(n)
        self._pos = 0

    def next(self):
        out = []
        while len(out) < self.batch_size:
            if self._pos == self.n:
                self._order = self.rng.permutation(self.n)
                self._pos = 0
            take = min(self.batch_size - len(out), self.n - self._pos)
            out.extend(self._order[self._pos:self._pos + take])
            self._pos += take
        return np.array(out, dtype=np.int64)


@dataclass
class PairBatch:
    """Two mini-batches and the full cross product of their pairs."""
    x_a: np.ndarray
    x_b: np.ndarray
    labels_a: np.ndarray
    labels_b: np.ndarray

    def __post_init__(self):
        y = self.pair_labels
        assert y.shape == (len(self.labels_a), len(self.labels_b))

    @property
    def pair_labels(self):
        return (self.labels_a[:, None] == self.labels_b[None, :]).astype(np.int64)

    @property
    def pairs(self):
        return [(self.x_a[i], self.x_b[j], int(la), int(lb), pair_label(la, lb))
                for i, la in enumerate(self.labels_a)
                for j, lb in enumerate(self.labels_b)]

    def __len__(self):
        return len(self.labels_a) * len(self.labels_b)


class PairSampler:
    def __init__(self, ds_i, ds_j, k, rng):
        self.ds_i, self.ds_j = ds_i, ds_j
        self.a = MiniBatchSampler(len(ds_i), k, rng)
        self.b = MiniBatchSampler(len(ds_j), k, rng)

    def next(self):
        ia, ib = self.a.next(), self.b.next()
        return PairBatch(self.ds_i.x[ia], self.ds_j.x[ib],
                         self.ds_i.labels[ia], self.ds_j.labels[ib])


def sample_pair_batches(ds_i, ds_j, k=2, rng=None):
    """One K-sample mini-batch from each dataset -> ``K*K`` pairs."""
    rng = rng if rng is not None else np.random.default_rng()
    return PairSampler(ds_i, ds_j, k, rng).next()
