"""Deterministic synthetic-speaker corpus, mini-batch sampling, augmentation.

Each speaker is a fixed set of four formant oscillators with per-speaker
phases; utterances differ by per-utterance frequency jitter and additive
noise. Every waveform is a pure function of (seed, speaker id, utterance
index), so serial and parallel generation produce identical bits.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ContractError, GenerationError

SAMPLE_RATE = 16000
MIN_FORMANT_GAP_HZ = 40.0
_FORMANT_BANDS = ((200.0, 800.0), (900.0, 1800.0), (1900.0, 2800.0), (2900.0, 3800.0))

# domain tags keep the per-purpose RNG streams disjoint
_TAG_SPEAKER, _TAG_UTTERANCE, _TAG_AUGMENT = 0, 1, 2


def _rng(*entropy) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


@dataclass(frozen=True)
class CorpusConfig:
    n_train_speakers: int = 20
    n_eval_speakers: int = 8
    utterances_per_speaker: int = 12
    sample_len: int = 6561
    snr_db: float = 20.0
    jitter_hz: float = 0.5
    seed: int = 1234


@dataclass
class SyntheticSpeaker:
    id: int
    formant_freqs: np.ndarray   # 4 frequencies in (50, 4000) Hz
    formant_amps: np.ndarray    # 4 positive amplitudes
    base_jitter: float          # per-utterance frequency perturbation scale (Hz)
    phases: np.ndarray          # per-formant phase, fixed across utterances


@dataclass
class NoiseConfig:
    snr_db_range: tuple = (10.0, 20.0)
    gain_range: tuple = (0.9, 1.1)


@dataclass
class MiniBatchPair:
    m: np.ndarray          # (S, U/2, T)
    m_prime: np.ndarray    # (S, U/2, T)
    speaker_ids: list
    mode: str              # "same_noised" | "different"
    class_ids: list = field(default_factory=list)
    utterance_ids: tuple = ((), ())   # per-half (S, U/2) index lists


class Corpus:
    def __init__(self, config: CorpusConfig, speakers: dict, waves: dict):
        self.config = config
        self.speakers = speakers            # id -> SyntheticSpeaker
        self.waves = waves                  # id -> list[np.ndarray]
        n = config.n_train_speakers
        self.train_ids = sorted(i for i in speakers if i < n)
        self.eval_ids = sorted(i for i in speakers if i >= n)

    def class_index(self, speaker_id: int) -> int:
        return self.train_ids.index(speaker_id)


def _well_separated(freqs, others):
    return all(np.max(np.abs(freqs - o.formant_freqs)) >= MIN_FORMANT_GAP_HZ
               for o in others)


def _make_speaker(cfg: CorpusConfig, sid: int, existing) -> SyntheticSpeaker:
    rng = _rng(cfg.seed, _TAG_SPEAKER, sid)
    for _ in range(100):
        freqs = np.array([rng.uniform(lo, hi) for lo, hi in _FORMANT_BANDS])
        if _well_separated(freqs, existing):
            amps = rng.uniform(0.4, 1.0, size=4) * np.array([1.0, 0.7, 0.5, 0.3])
            jitter = rng.uniform(0.5, 1.5) * cfg.jitter_hz
            phases = rng.uniform(0.0, 2.0 * np.pi, size=4)
            return SyntheticSpeaker(sid, freqs, amps, jitter, phases)
    raise GenerationError(f"could not place speaker {sid} with formants at least "
                          f"{MIN_FORMANT_GAP_HZ} Hz from every other speaker "
                          f"after 100 attempts")


def synth_utterance(cfg: CorpusConfig, speaker: SyntheticSpeaker, uidx: int) -> np.ndarray:
    """One waveform, fully determined by (cfg.seed, speaker.id, uidx)."""
    rng = _rng(cfg.seed, _TAG_UTTERANCE, speaker.id, uidx)
    t = np.arange(cfg.sample_len) / SAMPLE_RATE
    jitter = rng.normal(0.0, 1.0, size=4) * speaker.base_jitter
    wave = np.zeros(cfg.sample_len)
    for k in range(4):
        f = speaker.formant_freqs[k] + jitter[k]
        wave += speaker.formant_amps[k] * np.sin(2.0 * np.pi * f * t
                                                 + speaker.phases[k])
    if np.isfinite(cfg.snr_db):
        noise = rng.normal(0.0, 1.0, size=cfg.sample_len)
        p_sig = np.mean(wave ** 2)
        p_noise = p_sig / (10.0 ** (cfg.snr_db / 10.0))
        wave = wave + noise * np.sqrt(p_noise / np.mean(noise ** 2))
    return wave * (0.95 / np.max(np.abs(wave)))


def gen_corpus(cfg: CorpusConfig, workers: int = 1) -> Corpus:
    """Generate all speakers and utterances; workers > 1 parallelizes synthesis."""
    speakers: dict[int, SyntheticSpeaker] = {}
    for sid in range(cfg.n_train_speakers + cfg.n_eval_speakers):
        speakers[sid] = _make_speaker(cfg, sid, list(speakers.values()))

    jobs = [(sid, u) for sid in sorted(speakers) for u in range(cfg.utterances_per_speaker)]
    cap = int(os.environ.get("MTSV_THREADS", "0")) or None
    if cap:
        workers = min(workers, cap)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(
                lambda j: synth_utterance(cfg, speakers[j[0]], j[1]), jobs))
    else:
        results = [synth_utterance(cfg, speakers[sid], u) for sid, u in jobs]

    waves: dict[int, list] = {sid: [] for sid in speakers}
    for (sid, _), wave in zip(jobs, results):
        waves[sid].append(wave)
    return Corpus(cfg, speakers, waves)


def augment(waveform, noise_cfg: NoiseConfig, seed) -> np.ndarray:
    """Additive white noise at a random SNR plus a random gain, clamped to [-1, 1]."""
    wave = np.asarray(waveform, dtype=np.float64)
    rng = _rng(_TAG_AUGMENT, *np.atleast_1d(seed).astype(np.int64).tolist())
    lo, hi = noise_cfg.snr_db_range
    snr = lo if lo == hi else rng.uniform(lo, hi)
    out = wave.copy()
    if np.isfinite(snr):
        noise = rng.normal(0.0, 1.0, size=wave.shape)
        p_sig = np.mean(wave ** 2)
        p_noise = p_sig / (10.0 ** (snr / 10.0))
        out = out + noise * np.sqrt(p_noise / np.mean(noise ** 2))
    glo, ghi = noise_cfg.gain_range
    gain = glo if glo == ghi else rng.uniform(glo, ghi)
    return np.clip(out * gain, -1.0, 1.0)


def sample_minibatch(corpus: Corpus, s: int, u: int, mode: str, seed,
                     noise_cfg: NoiseConfig | None = None) -> MiniBatchPair:
    """Sample S speakers x U utterances and split them into (m, m').

    Mode "different": U distinct utterances per speaker, half to each side.
    Mode "same_noised": U/2 utterances; m' is an independently noised copy.
    """
    if u % 2 != 0:
        raise ContractError(f"utterances per speaker must be even, got {u}")
    if mode not in ("different", "same_noised"):
        raise ContractError(f"unknown batch mode {mode!r}")
    avail = corpus.config.utterances_per_speaker
    need = u if mode == "different" else u // 2
    if need > avail:
        raise ContractError(f"mode {mode} needs {need} utterances per speaker, "
                            f"corpus has {avail}")
    if s > len(corpus.train_ids):
        raise ContractError(f"batch wants {s} speakers, corpus has "
                            f"{len(corpus.train_ids)} training speakers")

    seed_parts = tuple(np.atleast_1d(seed).astype(np.int64).tolist())
    rng = _rng(*seed_parts)
    chosen = sorted(rng.choice(corpus.train_ids, size=s, replace=False).tolist())
    u2 = u // 2
    t = corpus.config.sample_len
    m = np.empty((s, u2, t))
    mp = np.empty((s, u2, t))
    ids_m, ids_mp = [], []
    for row, sid in enumerate(chosen):
        picks = rng.choice(avail, size=need, replace=False)
        if mode == "different":
            first, second = picks[:u2], picks[u2:]
            for col in range(u2):
                m[row, col] = corpus.waves[sid][first[col]]
                mp[row, col] = corpus.waves[sid][second[col]]
            ids_m.append(tuple(int(x) for x in first))
            ids_mp.append(tuple(int(x) for x in second))
        else:
            ncfg = noise_cfg or NoiseConfig()
            for col in range(u2):
                base = corpus.waves[sid][picks[col]]
                m[row, col] = base
                mp[row, col] = augment(base, ncfg,
                                       seed=(*seed_parts, sid, int(picks[col])))
            ids_m.append(tuple(int(x) for x in picks))
            ids_mp.append(tuple(int(x) for x in picks))
    class_ids = [corpus.class_index(sid) for sid in chosen]
    return MiniBatchPair(m=m, m_prime=mp, speaker_ids=chosen, mode=mode,
                         class_ids=class_ids, utterance_ids=(ids_m, ids_mp))


# ---------------------------------------------------------------------------
# Persistence: raw little-endian float64 arrays plus a JSON manifest

def utterance_id(sid: int, uidx: int) -> str:
    return f"spk{sid:04d}_utt{uidx:03d}"


def save_corpus(corpus: Corpus, out_dir: str) -> None:
    parent = os.path.dirname(os.path.abspath(out_dir))
    if not os.path.isdir(parent):
        raise ContractError(f"parent directory does not exist: {parent}")
    os.makedirs(out_dir, exist_ok=True)
    wave_dir = os.path.join(out_dir, "waves")
    os.makedirs(wave_dir, exist_ok=True)
    speakers = []
    for sid in sorted(corpus.speakers):
        spk = corpus.speakers[sid]
        speakers.append({
            "id": sid,
            "split": "train" if sid in corpus.train_ids else "eval",
            "utterances": len(corpus.waves[sid]),
            "formant_freqs": [float(f) for f in spk.formant_freqs],
            "formant_amps": [float(a) for a in spk.formant_amps],
            "base_jitter": float(spk.base_jitter),
            "phases": [float(p) for p in spk.phases],
        })
        for uidx, wave in enumerate(corpus.waves[sid]):
            path = os.path.join(wave_dir, utterance_id(sid, uidx) + ".f64")
            with open(path, "wb") as fh:
                fh.write(np.asarray(wave, dtype="<f8").tobytes())
    manifest = {
        "format": "mtsv-corpus-v1",
        "sample_rate": SAMPLE_RATE,
        "config": asdict(corpus.config),
        "speakers": speakers,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_corpus(in_dir: str) -> Corpus:
    with open(os.path.join(in_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "mtsv-corpus-v1":
        raise ContractError(f"unrecognized corpus manifest in {in_dir}")
    cfg = CorpusConfig(**manifest["config"])
    speakers, waves = {}, {}
    for rec in manifest["speakers"]:
        sid = rec["id"]
        speakers[sid] = SyntheticSpeaker(
            id=sid,
            formant_freqs=np.array(rec["formant_freqs"]),
            formant_amps=np.array(rec["formant_amps"]),
            base_jitter=rec["base_jitter"],
            phases=np.array(rec["phases"]),
        )
        waves[sid] = []
        for uidx in range(rec["utterances"]):
            path = os.path.join(in_dir, "waves", utterance_id(sid, uidx) + ".f64")
            with open(path, "rb") as fh:
                waves[sid].append(np.frombuffer(fh.read(), dtype="<f8").astype(np.float64))
    return Corpus(cfg, speakers, waves)
