"""
Synthetic speech-like corpus, noise generators, SNR mixing and manifests.

Clean utterances are sequences of token bursts: every letter owns a fixed set of
two or three sinusoidal "formants" under a Hann envelope, and a space token is
rendered as silence. Noise comes from seven parametric generators split into a
stationary and a non-stationary family.
"""

import json
import logging
import multiprocessing
import os
import string
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from itertools import product
from math import gcd
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import soundfile as sf
from scipy import signal

from .config import NON_STATIONARY_NOISE_TYPES, STATIONARY_NOISE_TYPES
from .errors import DegenerateInputError, InvalidArgumentError, UnsupportedAudioError
from .vocab import SPECIAL_SYMBOLS, Vocab

SAMPLE_RATE = 16000
SPLITS = ("train", "valid", "test")
NOISE_TYPES = tuple(STATIONARY_NOISE_TYPES + NON_STATIONARY_NOISE_TYPES)
FORMANT_GAINS = (0.5, 0.3, 0.2)
# distinct noise recordings per type, train pool vs. test pool
NOISE_CLIPS_PER_TYPE = {"train": 10, "test": 8}

logger = logging.getLogger(__name__)
_VOCAB = Vocab()


@dataclass
class Utterance:
    id: str
    samples: np.ndarray
    transcript: str
    duration_s: float

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if not np.all(np.isfinite(self.samples)):
            raise InvalidArgumentError(f"Utterance {self.id} has non-finite samples")
        if len(self.samples) != round(self.duration_s * SAMPLE_RATE):
            raise InvalidArgumentError(
                f"Utterance {self.id}: {len(self.samples)} samples does not match "
                f"duration {self.duration_s}s at {SAMPLE_RATE} Hz"
            )
        _VOCAB.validate(self.transcript)


@dataclass
class NoiseClip:
    id: str
    noise_type: str
    samples: np.ndarray

    def __post_init__(self):
        if self.noise_type not in NOISE_TYPES:
            raise InvalidArgumentError(f"Unknown noise type {self.noise_type!r}")
        if rms(self.samples) == 0.0:
            raise DegenerateInputError(f"Noise clip {self.id} has zero power")

    @property
    def is_stationary(self) -> bool:
        return self.noise_type in STATIONARY_NOISE_TYPES


@dataclass
class NoisyPair:
    clean: Utterance
    noisy_samples: np.ndarray
    snr_db: float
    noise_id: str
    seed: int

    def __post_init__(self):
        if len(self.noisy_samples) != len(self.clean.samples):
            raise InvalidArgumentError("Noisy and clean signals differ in length")


@dataclass
class ManifestEntry:
    id: str
    path: str
    clean_path: str
    transcript: str
    split: str
    snr_db: float
    noise_type: str
    noise_id: str
    seed: int


@dataclass
class Manifest:
    entries: List[ManifestEntry]
    corpus_seed: int
    root: Path = field(default_factory=lambda: Path("."))

    def split(self, name: str) -> List[ManifestEntry]:
        return [entry for entry in self.entries if entry.split == name]

    def resolve(self, relative_path: str) -> Path:
        return self.root / relative_path

    def validate(self) -> None:
        """Check that splits are disjoint and every path resolves."""
        seen: Dict[str, str] = {}
        for entry in self.entries:
            if entry.id in seen and seen[entry.id] != entry.split:
                raise InvalidArgumentError(
                    f"Utterance {entry.id} appears in both {seen[entry.id]} and {entry.split}"
                )
            seen[entry.id] = entry.split
            for rel in (entry.path, entry.clean_path):
                if not self.resolve(rel).exists():
                    raise InvalidArgumentError(f"Manifest path does not resolve: {rel}")

    def write(self, out_dir: Path) -> List[Path]:
        """Write one JSON document per split; output is byte-stable for a given corpus."""
        out_dir = Path(out_dir)
        paths = []
        for split_name in SPLITS:
            document = {
                "corpus_seed": self.corpus_seed,
                "split": split_name,
                "entries": [_entry_record(e) for e in self.split(split_name)],
            }
            path = out_dir / f"{split_name}.json"
            with open(path, "w") as f:
                f.write(json.dumps(document, indent=2, sort_keys=True) + "\n")
            paths.append(path)
        return paths

    @classmethod
    def load(cls, manifest_dir) -> "Manifest":
        manifest_dir = Path(manifest_dir)
        entries: List[ManifestEntry] = []
        corpus_seed = None
        for split_name in SPLITS:
            path = manifest_dir / f"{split_name}.json"
            if not path.exists():
                continue
            with open(path) as f:
                document = json.load(f)
            corpus_seed = document["corpus_seed"]
            for record in document["entries"]:
                entries.append(ManifestEntry(split=split_name, **record))
        if corpus_seed is None:
            raise InvalidArgumentError(f"No manifest documents found in {manifest_dir}")
        return cls(entries=entries, corpus_seed=corpus_seed, root=manifest_dir)


def _entry_record(entry: ManifestEntry) -> Dict[str, Any]:
    record = asdict(entry)
    record.pop("split")
    return record


def rms(samples: np.ndarray) -> float:
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        return 0.0
    return float(np.sqrt(np.mean(samples ** 2)))


def achieved_snr_db(clean: np.ndarray, noisy: np.ndarray) -> float:
    """SNR of ``noisy`` relative to ``clean`` over the full utterance."""
    clean = np.asarray(clean, dtype=np.float64)
    noise = np.asarray(noisy, dtype=np.float64) - clean
    return float(10.0 * np.log10(np.mean(clean ** 2) / np.mean(noise ** 2)))


def derive_seed(*parts: int) -> int:
    """Deterministic 32-bit seed from a tuple of non-negative integers."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def token_formants(token: str) -> Tuple[float, ...]:
    """Formant frequencies (Hz) assigned to a vocabulary symbol; letters come first."""
    i = (_VOCAB.index(token) - len(SPECIAL_SYMBOLS)) % len(_VOCAB)
    f1 = 200.0 + 110.0 * i
    f2 = 3200.0 + 130.0 * ((7 * i) % 26)
    if i % 2 == 0:
        return (f1, f2, 6800.0 + 30.0 * i)
    return (f1, f2)


def render_token(token: str, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    if token == " ":
        return np.zeros(n_samples)
    t = np.arange(n_samples) / SAMPLE_RATE
    burst = np.zeros(n_samples)
    for freq, gain in zip(token_formants(token), FORMANT_GAINS):
        phase = rng.uniform(0.0, 2.0 * np.pi)
        burst += gain * np.sin(2.0 * np.pi * freq * t + phase)
    scale = rng.uniform(0.6, 0.9)
    return scale * burst * signal.windows.hann(n_samples, sym=False)


def synth_clean(token_count: int, seed: int, alphabet: str = string.ascii_lowercase,
                token_duration_s: float = 0.08, word_break_prob: float = 0.25,
                utterance_id: Optional[str] = None) -> Utterance:
    """
    Render a deterministic clean utterance of ``token_count`` tokens.

    A space token never starts or ends an utterance and never repeats, so every
    word-boundary symbol separates two words.
    """
    if token_count < 1:
        raise InvalidArgumentError(f"token_count must be >= 1, got {token_count}")
    rng = np.random.default_rng(seed)
    tokens: List[str] = []
    for i in range(token_count):
        can_break = 0 < i < token_count - 1 and tokens[-1] != " "
        if can_break and rng.random() < word_break_prob:
            tokens.append(" ")
        else:
            tokens.append(str(rng.choice(list(alphabet))))

    n_token = int(round(token_duration_s * SAMPLE_RATE))
    samples = np.concatenate([render_token(tok, n_token, rng) for tok in tokens])
    return Utterance(
        id=utterance_id or f"synth-{seed}",
        samples=samples,
        transcript="".join(tokens),
        duration_s=len(samples) / SAMPLE_RATE,
    )


def _bandpassed_noise(rng: np.random.Generator, n: int, low: Optional[float],
                      high: Optional[float], order: int = 4) -> np.ndarray:
    white = rng.standard_normal(n)
    if low and high:
        sos = signal.butter(order, [low, high], btype="bandpass", fs=SAMPLE_RATE, output="sos")
    elif high:
        sos = signal.butter(order, high, btype="lowpass", fs=SAMPLE_RATE, output="sos")
    elif low:
        sos = signal.butter(order, low, btype="highpass", fs=SAMPLE_RATE, output="sos")
    else:
        return white
    return signal.sosfilt(sos, white)


def _tones(n: int, freqs: Iterable[float], gains: Iterable[float], rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / SAMPLE_RATE
    out = np.zeros(n)
    for freq, gain in zip(freqs, gains):
        out += gain * np.sin(2.0 * np.pi * freq * t + rng.uniform(0.0, 2.0 * np.pi))
    return out


def _babble(rng: np.random.Generator, n: int, talkers: int) -> np.ndarray:
    out = np.zeros(n)
    token_samples = int(round(0.08 * SAMPLE_RATE))
    count = n // token_samples + 2
    for _ in range(talkers):
        talker = synth_clean(count, int(rng.integers(2 ** 31)), word_break_prob=0.3).samples
        offset = int(rng.integers(token_samples))
        out += np.roll(talker, offset)[:n] * rng.uniform(0.5, 1.0)
    # syllabic-rate amplitude modulation
    t = np.arange(n) / SAMPLE_RATE
    modulation = 1.0 + 0.5 * np.sin(2.0 * np.pi * rng.uniform(2.0, 5.0) * t)
    return out * modulation


def _impulses(rng: np.random.Generator, n: int, rate_hz: float, decay_s: float) -> np.ndarray:
    out = np.zeros(n)
    hits = rng.random(n) < rate_hz / SAMPLE_RATE
    tail = int(decay_s * SAMPLE_RATE * 5)
    envelope = np.exp(-np.arange(tail) / (decay_s * SAMPLE_RATE))
    for start in np.nonzero(hits)[0]:
        stop = min(n, start + tail)
        out[start:stop] += rng.uniform(0.5, 1.5) * envelope[: stop - start] * rng.standard_normal(stop - start)
    return out


def _render_noise(noise_type: str, n: int, rng: np.random.Generator) -> np.ndarray:
    if noise_type == "traffic":
        x = _bandpassed_noise(rng, n, None, 600.0) + 0.3 * _bandpassed_noise(rng, n, 600.0, 3000.0)
    elif noise_type == "metro":
        x = _bandpassed_noise(rng, n, 100.0, 2500.0) + 0.05 * _tones(n, [300.0, 600.0], [1.0, 0.5], rng)
    elif noise_type == "car":
        x = _bandpassed_noise(rng, n, None, 300.0) + 0.05 * _tones(n, [90.0, 180.0, 270.0], [1.0, 0.6, 0.3], rng)
    elif noise_type == "babble":
        x = _babble(rng, n, talkers=6)
    elif noise_type == "airport_station":
        chime = _tones(n, [880.0, 1320.0], [1.0, 0.7], rng)
        gate = (np.sin(2.0 * np.pi * 0.25 * np.arange(n) / SAMPLE_RATE) > 0.7).astype(float)
        x = _babble(rng, n, talkers=3) + 0.3 * chime * gate + 0.1 * _bandpassed_noise(rng, n, 200.0, 4000.0)
    elif noise_type == "ac_vacuum":
        t = np.arange(n) / SAMPLE_RATE
        swell = 1.0 + 0.8 * np.sin(2.0 * np.pi * rng.uniform(0.2, 0.5) * t)
        whine = signal.chirp(t, f0=1200.0, t1=t[-1] if n > 1 else 1.0, f1=1800.0, method="linear")
        x = swell * _bandpassed_noise(rng, n, 500.0, None) + 0.1 * whine
    elif noise_type == "cafe":
        x = _babble(rng, n, talkers=4) + 0.5 * _impulses(rng, n, rate_hz=3.0, decay_s=0.01)
    else:
        raise InvalidArgumentError(f"Unknown noise type {noise_type!r}")
    level = rms(x)
    if level == 0.0:
        raise DegenerateInputError(f"Generated {noise_type} noise is silent")
    return 0.1 * x / level


def generate_noise(noise_type: str, duration_s: float, seed: int,
                   clip_id: Optional[str] = None) -> NoiseClip:
    """Render one parametric noise clip at 16 kHz."""
    n = int(round(duration_s * SAMPLE_RATE))
    if n < 1:
        raise InvalidArgumentError(f"Noise duration too short: {duration_s}s")
    rng = np.random.default_rng(seed)
    samples = _render_noise(noise_type, n, rng)
    return NoiseClip(id=clip_id or f"{noise_type}-{seed}", noise_type=noise_type, samples=samples)


def mix_at_snr(clean: np.ndarray, noise: np.ndarray, snr_db: float, seed: int) -> np.ndarray:
    """
    Mix ``noise`` into ``clean`` at ``snr_db`` measured over full-utterance RMS.

    The noise is read circularly from a seed-drawn offset, which crops long clips
    and tiles short ones.
    """
    clean = np.asarray(clean, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if rms(clean) == 0.0:
        raise DegenerateInputError("Clean signal is silent; SNR is undefined")
    if rms(noise) == 0.0:
        raise DegenerateInputError("Noise signal is silent; SNR is undefined")

    rng = np.random.default_rng(seed)
    offset = int(rng.integers(len(noise)))
    segment = noise[(offset + np.arange(len(clean))) % len(noise)]
    segment_rms = rms(segment)
    if segment_rms == 0.0:
        raise DegenerateInputError("Selected noise segment is silent")

    gain = rms(clean) / (segment_rms * 10.0 ** (snr_db / 20.0))
    return clean + gain * segment


def make_noisy_pair(clean: Utterance, noise: NoiseClip, snr_db: float, seed: int) -> NoisyPair:
    noisy = mix_at_snr(clean.samples, noise.samples, snr_db, seed)
    return NoisyPair(clean=clean, noisy_samples=noisy, snr_db=float(snr_db), noise_id=noise.id, seed=seed)


def write_wav(path, samples: np.ndarray) -> None:
    sf.write(str(path), np.asarray(samples, dtype=np.float64), SAMPLE_RATE, subtype="PCM_16")


def read_wav(path) -> np.ndarray:
    """Read a 16 kHz mono 16-bit PCM wav written by this module."""
    samples, sample_rate = sf.read(str(path), dtype="float64")
    if sample_rate != SAMPLE_RATE:
        raise UnsupportedAudioError(f"{path}: expected {SAMPLE_RATE} Hz, got {sample_rate}")
    return samples


def ingest_wav(path, transcript: Optional[str] = None,
               utterance_id: Optional[str] = None) -> Utterance:
    """
    Load an external 16-bit PCM mono wav as an Utterance, resampling to 16 kHz.

    Without an explicit transcript a sidecar ``<name>.txt`` is read.
    """
    path = Path(path)
    try:
        info = sf.info(str(path))
    except RuntimeError as e:
        raise UnsupportedAudioError(f"Cannot read {path}: {e}") from e
    if info.subtype != "PCM_16":
        raise UnsupportedAudioError(f"{path}: unsupported encoding {info.subtype}, expected PCM_16")
    if info.channels != 1:
        raise UnsupportedAudioError(f"{path}: {info.channels} channels, expected mono")

    samples, sample_rate = sf.read(str(path), dtype="float64")
    if sample_rate != SAMPLE_RATE:
        divisor = gcd(SAMPLE_RATE, sample_rate)
        samples = signal.resample_poly(samples, SAMPLE_RATE // divisor, sample_rate // divisor)
        logger.info(f"Resampled {path.name} from {sample_rate} Hz to {SAMPLE_RATE} Hz")
    samples = np.clip(samples, -1.0, 1.0)

    if transcript is None:
        sidecar = path.with_suffix(".txt")
        if not sidecar.exists():
            raise InvalidArgumentError(f"No transcript given and no sidecar {sidecar.name}")
        transcript = sidecar.read_text().strip().lower()

    return Utterance(
        id=utterance_id or path.stem,
        samples=samples,
        transcript=transcript,
        duration_s=len(samples) / SAMPLE_RATE,
    )


@lru_cache(maxsize=128)
def _noise_pool_clip(corpus_seed: int, pool: str, noise_type: str, index: int,
                     duration_s: float) -> NoiseClip:
    seed = derive_seed(corpus_seed, 1 + SPLITS.index(pool), NOISE_TYPES.index(noise_type), index)
    return generate_noise(noise_type, duration_s, seed, clip_id=f"{noise_type}-{pool}-{index}")


def _plan_entries(corpus_cfg: Dict[str, Any]) -> List[Dict[str, Any]]:
    """Decide id, seed and noise condition of every utterance (cheap, single process)."""
    corpus_seed = int(corpus_cfg.get("seed", 0))
    noise_types = list(corpus_cfg.get("noise_types", NOISE_TYPES))
    train_snrs = list(corpus_cfg.get("train_snrs", [0, 5, 10, 15, 20, 25]))
    test_snrs = list(corpus_cfg.get("test_snrs", [0, 5, 10, 15, 20]))
    lo, hi = corpus_cfg.get("tokens_per_utterance", [4, 8])
    for noise_type in noise_types:
        if noise_type not in NOISE_TYPES:
            raise InvalidArgumentError(f"Unknown noise type {noise_type!r}")

    jobs = []
    for split_index, split_name in enumerate(SPLITS):
        count = int(corpus_cfg.get("splits", {}).get(split_name, 0))
        conditions = list(product(noise_types, test_snrs))
        pool = "test" if split_name == "test" else "train"
        for i in range(count):
            seed = derive_seed(corpus_seed, 100 + split_index, i)
            rng = np.random.default_rng(seed)
            token_count = int(rng.integers(lo, hi + 1))
            if split_name == "train":
                noise_type = noise_types[int(rng.integers(len(noise_types)))]
                snr_db = float(train_snrs[int(rng.integers(len(train_snrs)))])
            else:
                noise_type, snr_db = conditions[i % len(conditions)]
            jobs.append({
                "id": f"{split_name}-{i:05d}",
                "split": split_name,
                "seed": seed,
                "token_count": token_count,
                "noise_type": noise_type,
                "snr_db": float(snr_db),
                "noise_index": int(rng.integers(NOISE_CLIPS_PER_TYPE[pool])),
                "pool": pool,
                "corpus_seed": corpus_seed,
                "alphabet": corpus_cfg.get("token_alphabet", string.ascii_lowercase),
                "token_duration_s": float(corpus_cfg.get("token_duration_s", 0.08)),
                "word_break_prob": float(corpus_cfg.get("word_break_prob", 0.25)),
                "noise_duration_s": float(corpus_cfg.get("noise_duration_s", 4.0)),
            })
    return jobs


def _render_entry(job: Dict[str, Any], out_dir: str) -> ManifestEntry:
    """Render and write one (clean, noisy) wav pair; runs inside a worker."""
    clean = synth_clean(job["token_count"], job["seed"], alphabet=job["alphabet"],
                        token_duration_s=job["token_duration_s"],
                        word_break_prob=job["word_break_prob"], utterance_id=job["id"])
    noise = _noise_pool_clip(job["corpus_seed"], job["pool"], job["noise_type"],
                             job["noise_index"], job["noise_duration_s"])
    pair = make_noisy_pair(clean, noise, job["snr_db"], job["seed"])

    # a shared gain keeps the pair inside 16-bit range without changing its SNR
    peak = max(np.max(np.abs(pair.noisy_samples)), np.max(np.abs(clean.samples)))
    gain = 0.99 / peak if peak > 0.99 else 1.0

    rel_dir = Path("wavs") / job["split"]
    clean_rel = rel_dir / f"{job['id']}.clean.wav"
    noisy_rel = rel_dir / f"{job['id']}.noisy.wav"
    write_wav(Path(out_dir) / clean_rel, clean.samples * gain)
    write_wav(Path(out_dir) / noisy_rel, pair.noisy_samples * gain)
    return ManifestEntry(
        id=job["id"], path=noisy_rel.as_posix(), clean_path=clean_rel.as_posix(),
        transcript=clean.transcript, split=job["split"], snr_db=job["snr_db"],
        noise_type=job["noise_type"], noise_id=noise.id, seed=job["seed"],
    )


def _render_entry_star(args: Tuple[Dict[str, Any], str]) -> ManifestEntry:
    return _render_entry(*args)


def build_manifest(corpus_cfg: Dict[str, Any], out_dir) -> Manifest:
    """
    Generate the synthetic corpus under ``out_dir`` and write its manifests.

    Utterances are rendered in parallel when ``corpus.workers`` > 1; the manifest
    itself is assembled and written by the calling process only.
    """
    out_dir = Path(out_dir)
    try:
        for split_name in SPLITS:
            os.makedirs(out_dir / "wavs" / split_name, exist_ok=True)
    except OSError as e:
        raise InvalidArgumentError(f"Cannot write corpus to {out_dir}: {e}") from e

    jobs = _plan_entries(corpus_cfg)
    workers = int(corpus_cfg.get("workers", 1))
    logger.info(f"Rendering {len(jobs)} utterances into {out_dir} with {workers} worker(s)")
    if workers > 1:
        with multiprocessing.Pool(workers) as pool:
            entries = pool.map(_render_entry_star, [(job, str(out_dir)) for job in jobs])
    else:
        entries = [_render_entry(job, str(out_dir)) for job in jobs]

    manifest = Manifest(entries=entries, corpus_seed=int(corpus_cfg.get("seed", 0)), root=out_dir)
    manifest.write(out_dir)
    logger.info(f"Wrote manifests for {len(entries)} utterances to {out_dir}")
    return manifest


def noise_family(noise_type: str) -> str:
    return "stationary" if noise_type in STATIONARY_NOISE_TYPES else "non_stationary"


def load_pairs(manifest: Manifest, split: str) -> List[Tuple[ManifestEntry, np.ndarray, np.ndarray]]:
    """Read (entry, noisy, clean) sample arrays for every entry of a split."""
    pairs = []
    for entry in manifest.split(split):
        noisy = read_wav(manifest.resolve(entry.path))
        clean = read_wav(manifest.resolve(entry.clean_path))
        pairs.append((entry, noisy, clean))
    return pairs


def transcripts_roundtrip(transcripts: Sequence[str]) -> bool:
    """True when every transcript survives encode/decode through the vocabulary."""
    return all(_VOCAB.decode(_VOCAB.encode(text)) == text for text in transcripts)
