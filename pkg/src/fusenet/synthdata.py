"""Synthetic multimodal identification data, tuple sampling, translation
augmentation and train-split channel normalization.

Every subject owns one procedurally generated template per modality (a mix
of oriented bands and blobs on top of a modality-wide base pattern).  Samples
are the template after integer jitter, occlusion patches and additive noise,
clipped to [0, 1].  Per-modality noise levels set how hard each trait is.
"""
import os
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .tensor import ConfigurationError, load_checkpoint, save_checkpoint

SPLITS = ("train", "test")


@dataclass(frozen=True)
class NoiseProfile:
    """Corruption knobs for one modality."""

    noise: float = 0.3        # std of additive Gaussian noise
    occlusions: int = 1       # max number of zeroed square patches
    occlusion_size: int = 6
    jitter: int = 1           # max integer shift in pixels

    def __post_init__(self):
        if self.noise < 0 or self.occlusions < 0 or self.occlusion_size < 0 or self.jitter < 0:
            raise ConfigurationError(f"noise profile values must be non-negative: {self}")


@dataclass
class SyntheticDataset:
    modalities: List[str]
    num_subjects: int
    image_shape: Tuple[int, int, int]
    seed: int
    images: Dict[str, Dict[str, np.ndarray]]     # split -> modality -> (n, C, H, W)
    labels: Dict[str, Dict[str, np.ndarray]]     # split -> modality -> (n,)
    profiles: Dict[str, NoiseProfile] = field(default_factory=dict)
    counts: Dict[str, Tuple[int, int]] = field(default_factory=dict)  # modality -> (train, test) per subject
    separation: float = 0.5
    dual_template: Tuple[str, ...] = ()
    channel_means: Optional[Dict[str, np.ndarray]] = None

    def split_sizes(self) -> Dict[str, Dict[str, int]]:
        return {s: {m: len(self.labels[s][m]) for m in self.modalities} for s in SPLITS}


@dataclass
class SampleSet:
    subject_id: int
    images: Dict[str, np.ndarray]
    split: str


@dataclass
class TupleSet:
    """Index tuples into one split: ``index[m][i]`` is the sample of modality m
    used by tuple i, whose label is ``labels[i]``."""

    split: str
    index: Dict[str, np.ndarray]
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)

    def gather(self, dataset: SyntheticDataset) -> Dict[str, np.ndarray]:
        return {m: dataset.images[self.split][m][ix] for m, ix in self.index.items()}

    def sample_set(self, dataset: SyntheticDataset, i: int) -> SampleSet:
        return SampleSet(int(self.labels[i]),
                         {m: dataset.images[self.split][m][ix[i]] for m, ix in self.index.items()}, self.split)


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def _pattern(rng, h, w, bands=3, blobs=3) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.zeros((h, w))
    for _ in range(bands):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(1.5, 5.0) * 2 * np.pi / max(h, w)
        phase = rng.uniform(0, 2 * np.pi)
        img += np.sin(freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    for _ in range(blobs):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        s = rng.uniform(0.08, 0.2) * max(h, w)
        img += 2.0 * rng.choice([-1.0, 1.0]) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    img -= img.mean()
    return img / (img.std() + 1e-12)


def subject_templates(seed: int, subject: int, modality_index: int, shape, separation: float,
                      dual: bool = False) -> List[np.ndarray]:
    """Template(s) for one (subject, modality); reproducible from the key."""
    c, h, w = shape
    base = _pattern(_rng(seed, 1, modality_index), h, w)
    out = []
    for sub in range(2 if dual else 1):
        own = _pattern(_rng(seed, 2, modality_index, subject, sub), h, w)
        t = 0.5 + 0.15 * ((1 - separation) * base + separation * own)
        out.append(np.clip(np.broadcast_to(t, (c, h, w)), 0.0, 1.0))
    return out


def shift_image(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Integer translation with zero fill; ``img`` is (..., H, W)."""
    h, w = img.shape[-2:]
    out = np.zeros_like(img)
    if abs(dy) >= h or abs(dx) >= w:
        return out
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[..., yd, xd] = img[..., ys, xs]
    return out


def corrupt(template: np.ndarray, profile: NoiseProfile, rng: np.random.Generator) -> np.ndarray:
    c, h, w = template.shape
    img = template
    if profile.jitter:
        dy, dx = rng.integers(-profile.jitter, profile.jitter + 1, size=2)
        # shift around the mid-grey background rather than zero-filling
        img = shift_image(img - 0.5, int(dy), int(dx)) + 0.5
    img = img.copy()
    if profile.occlusions and profile.occlusion_size:
        for _ in range(rng.integers(0, profile.occlusions + 1)):
            s = profile.occlusion_size
            y0, x0 = rng.integers(0, h - s + 1), rng.integers(0, w - s + 1)
            img[:, y0:y0 + s, x0:x0 + s] = 0.0
    if profile.noise:
        img = img + rng.normal(0.0, profile.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_dataset(num_subjects: int, modalities: Sequence[str], samples_per_subject: Union[int, Mapping] = 10,
                     noise: Union[float, NoiseProfile, Mapping] = 0.3, seed: int = 0,
                     image_shape=(1, 32, 32), separation: float = 0.5, dual_template: Sequence[str] = (),
                     dtype=np.float64) -> SyntheticDataset:
    """Draw disjoint train and test samples for every subject and modality.

    ``samples_per_subject`` is per split, either one int or a mapping
    ``modality -> int | (train, test)``.  ``noise`` is a float, a
    :class:`NoiseProfile`, or a mapping of either per modality.
    """
    modalities = list(modalities)
    if num_subjects < 2:
        raise ConfigurationError("num_subjects must be >= 2")
    if not modalities:
        raise ConfigurationError("at least one modality required")
    profiles = {}
    for m in modalities:
        p = noise[m] if isinstance(noise, Mapping) else noise
        if isinstance(p, (int, float)):
            p = NoiseProfile(noise=float(p))
        if not isinstance(p, NoiseProfile):
            raise ConfigurationError(f"invalid noise profile for {m}: {p!r}")
        profiles[m] = p
    counts = {}
    for m in modalities:
        c = samples_per_subject[m] if isinstance(samples_per_subject, Mapping) else samples_per_subject
        c = (int(c), int(c)) if np.isscalar(c) else tuple(int(v) for v in c)
        if min(c) < 1 or sum(c) < 2:
            raise ConfigurationError(f"{m}: need >= 1 sample per split, got {c}")
        counts[m] = c
    image_shape = tuple(int(v) for v in image_shape)
    images = {s: {} for s in SPLITS}
    labels = {s: {} for s in SPLITS}
    for mi, m in enumerate(modalities):
        for si, split in enumerate(SPLITS):
            n_per = counts[m][si]
            arr = np.empty((num_subjects * n_per,) + image_shape, dtype=dtype)
            lab = np.repeat(np.arange(num_subjects), n_per)
            for subj in range(num_subjects):
                temps = subject_templates(seed, subj, mi, image_shape, separation, m in dual_template)
                rng = _rng(seed, 3, mi, si, subj)
                for j in range(n_per):
                    t = temps[rng.integers(len(temps))] if len(temps) > 1 else temps[0]
                    arr[subj * n_per + j] = corrupt(t, profiles[m], rng)
            images[split][m] = arr
            labels[split][m] = lab
    return SyntheticDataset(modalities, num_subjects, image_shape, seed, images, labels, profiles, counts,
                            separation, tuple(dual_template))


def sample_tuples(dataset: SyntheticDataset, tuples_per_subject: int, seed: int = 0,
                  splits=SPLITS) -> Dict[str, TupleSet]:
    """For every subject draw ``tuples_per_subject`` tuples per split, pairing
    that subject's samples across modalities uniformly with replacement."""
    out = {}
    for si, split in enumerate(splits):
        rng = _rng(seed, 4, si)
        index = {m: np.empty(dataset.num_subjects * tuples_per_subject, dtype=np.int64)
                 for m in dataset.modalities}
        labels = np.repeat(np.arange(dataset.num_subjects), tuples_per_subject)
        for m in dataset.modalities:
            lab = dataset.labels[split][m]
            for subj in range(dataset.num_subjects):
                pool = np.flatnonzero(lab == subj)
                if pool.size == 0:
                    raise ValueError(f"subject {subj} has no {m} sample in the {split} split")
                sl = slice(subj * tuples_per_subject, (subj + 1) * tuples_per_subject)
                index[m][sl] = pool[rng.integers(0, pool.size, tuples_per_subject)]
        out[split] = TupleSet(split, index, labels)
    return out


def tuple_count(num_subjects: int, tuples_per_subject: int) -> int:
    return num_subjects * tuples_per_subject


@dataclass(frozen=True)
class AugmentConfig:
    sigmas: Tuple[float, ...] = (2.5, 5.0)
    draws_per_sigma: int = 10
    mu: float = 0.0
    clamp: float = 3.0  # shifts are clamped to +-clamp*sigma

    @property
    def count(self) -> int:
        return self.draws_per_sigma * len(self.sigmas)


def translation_offsets(config: AugmentConfig, rng: np.random.Generator, rounded=True) -> np.ndarray:
    """(count, 2) array of (dy, dx) draws, ``draws_per_sigma`` rows per sigma."""
    rows = []
    for s in config.sigmas:
        d = rng.normal(config.mu, s, size=(config.draws_per_sigma, 2)) if s > 0 else \
            np.full((config.draws_per_sigma, 2), config.mu)
        if s > 0:
            d = np.clip(d, config.mu - config.clamp * s, config.mu + config.clamp * s)
        rows.append(d)
    out = np.concatenate(rows, axis=0)
    return np.rint(out).astype(np.int64) if rounded else out


def augment_translate(image: np.ndarray, config: AugmentConfig = AugmentConfig(), seed: int = 0) -> List[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [shift_image(image, int(dy), int(dx)) for dy, dx in translation_offsets(config, rng)]


def augment_set(images: np.ndarray, labels: np.ndarray, config: AugmentConfig = AugmentConfig(), seed: int = 0,
                keep_original=True):
    """Augment every image of an (n, C, H, W) stack; labels are repeated."""
    out, lab = [], []
    for i, (img, y) in enumerate(zip(images, labels)):
        if keep_original:
            out.append(img)
            lab.append(y)
        aug = augment_translate(img, config, seed=int(np.random.SeedSequence([seed, i]).generate_state(1)[0]))
        out.extend(aug)
        lab.extend([y] * len(aug))
    return np.stack(out), np.asarray(lab)


def normalize_channels(dataset: SyntheticDataset) -> Tuple[SyntheticDataset, Dict[str, np.ndarray]]:
    """Subtract per-channel means computed on the train split from both splits."""
    means = {}
    images = {s: {} for s in SPLITS}
    for m in dataset.modalities:
        train = dataset.images["train"][m]
        if len(train) == 0:
            raise ConfigurationError(f"{m}: empty train split")
        mu = train.mean(axis=(0, 2, 3))
        means[m] = mu
        for s in SPLITS:
            images[s][m] = dataset.images[s][m] - mu[None, :, None, None]
    out = SyntheticDataset(dataset.modalities, dataset.num_subjects, dataset.image_shape, dataset.seed, images,
                           dataset.labels, dataset.profiles, dataset.counts, dataset.separation,
                           dataset.dual_template, means)
    return out, means


# snapshots -------------------------------------------------------------------

def _manifest(dataset: SyntheticDataset) -> str:
    lines = [f"seed = {dataset.seed}", f"subjects = {dataset.num_subjects}",
             f"modalities = {', '.join(dataset.modalities)}",
             f"image_shape = {', '.join(str(v) for v in dataset.image_shape)}",
             f"separation = {dataset.separation!r}",
             f"dual_template = {', '.join(dataset.dual_template)}"]
    for m in dataset.modalities:
        p = dataset.profiles[m]
        lines.append(f"noise.{m} = {p.noise!r}, {p.occlusions}, {p.occlusion_size}, {p.jitter}")
        lines.append(f"counts.{m} = {dataset.counts[m][0]}, {dataset.counts[m][1]}")
    for s, sizes in dataset.split_sizes().items():
        lines.append(f"size.{s} = " + ", ".join(f"{m}:{n}" for m, n in sizes.items()))
    return "\n".join(lines) + "\n"


def save_snapshot(dataset: SyntheticDataset, directory) -> None:
    """Manifest text plus one checkpoint-format file per (split, modality)."""
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "manifest.txt"), "w") as fh:
        fh.write(_manifest(dataset))
    for s in SPLITS:
        for m in dataset.modalities:
            imgs, labs = dataset.images[s][m], dataset.labels[s][m]
            entries = {f"{s}/{m}/{int(labs[i])}/{i}": imgs[i] for i in range(len(labs))}
            save_checkpoint(os.path.join(directory, f"{s}_{m}.bin"), entries)


def read_manifest(directory) -> Dict[str, str]:
    out = {}
    with open(os.path.join(directory, "manifest.txt")) as fh:
        for line in fh:
            if "=" in line:
                k, v = line.split("=", 1)
                out[k.strip()] = v.strip()
    return out


def regenerate_from_manifest(directory) -> SyntheticDataset:
    man = read_manifest(directory)
    mods = [m.strip() for m in man["modalities"].split(",")]
    profiles, counts = {}, {}
    for m in mods:
        nz, occ, size, jit = [v.strip() for v in man[f"noise.{m}"].split(",")]
        profiles[m] = NoiseProfile(float(nz), int(occ), int(size), int(jit))
        counts[m] = tuple(int(v) for v in man[f"counts.{m}"].split(","))
    dual = tuple(v.strip() for v in man.get("dual_template", "").split(",") if v.strip())
    return generate_dataset(int(man["subjects"]), mods, counts, profiles, int(man["seed"]),
                            tuple(int(v) for v in man["image_shape"].split(",")), float(man["separation"]), dual)


def load_snapshot(directory) -> SyntheticDataset:
    ds = regenerate_from_manifest(directory)
    for s in SPLITS:
        for m in ds.modalities:
            entries = load_checkpoint(os.path.join(directory, f"{s}_{m}.bin"))
            ds.images[s][m] = np.stack(list(entries.values()))
            ds.labels[s][m] = np.array([int(k.split("/")[2]) for k in entries])
    return ds
