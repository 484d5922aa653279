"""Trial construction, temporal-crop TTA, cosine scoring, and EER."""

from __future__ import annotations

import numpy as np

from .data import Corpus, utterance_id
from .errors import ContractError

# Trial: (utterance id a, utterance id b, target flag)


def crops(waveform, n: int, crop_len: int) -> np.ndarray:
    """n fixed-length crops at regular start offsets (single centered crop if n=1)."""
    wave = np.asarray(waveform, dtype=np.float64)
    t_full = wave.shape[-1]
    if t_full < crop_len:
        raise ContractError(f"waveform length {t_full} is shorter than the crop "
                            f"length {crop_len}")
    if n < 1:
        raise ContractError(f"crop count must be >= 1, got {n}")
    if n == 1:
        starts = [(t_full - crop_len) // 2]
    else:
        starts = [int(round(k * (t_full - crop_len) / (n - 1))) for k in range(n)]
    return np.stack([wave[s : s + crop_len] for s in starts])


def score_trial(emb_a, emb_b) -> float:
    """Mean cosine similarity over all crop pairs of the two utterances."""
    a = np.asarray(emb_a, dtype=np.float64)
    b = np.asarray(emb_b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ContractError("score_trial needs at least one crop per side")
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    if na.min() <= 1e-12 or nb.min() <= 1e-12:
        raise ContractError("zero-norm embedding; cosine score is undefined")
    return float(((a / na) @ (b / nb).T).mean())


def _far_frr(scores, targets):
    """FAR/FRR sampled at midpoint thresholds (plus sentinels), ascending."""
    tar = np.sort(scores[targets])
    non = np.sort(scores[~targets])
    uniq = np.unique(scores)
    mids = (uniq[:-1] + uniq[1:]) / 2.0
    ts = np.concatenate(([uniq[0] - 1.0], mids, [uniq[-1] + 1.0]))
    far = (len(non) - np.searchsorted(non, ts, side="left")) / len(non)
    frr = np.searchsorted(tar, ts, side="left") / len(tar)
    return ts, far, frr


def compute_eer(scores, targets):
    """Equal error rate and its threshold.

    Sweeps thresholds at score midpoints and linearly interpolates the
    FAR/FRR crossing, so the EER value depends only on the score ranks.
    """
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets, dtype=bool)
    if targets.all() or (~targets).all():
        raise ContractError("EER needs both target and non-target trials")
    ts, far, frr = _far_frr(scores, targets)
    diff = far - frr          # monotone non-increasing in the threshold
    i = int(np.argmax(diff <= 0.0))
    if diff[i] == 0.0 or i == 0:
        return float(far[i]), float(ts[i])
    lam = diff[i - 1] / (diff[i - 1] - diff[i])
    eer = far[i - 1] + lam * (far[i] - far[i - 1])
    thr = ts[i - 1] + lam * (ts[i] - ts[i - 1])
    return float(eer), float(thr)


def make_trials(corpus: Corpus, seed: int = 0):
    """Balanced trial list over the held-out speakers.

    All within-speaker pairs are targets; an equal number of cross-speaker
    pairs is sampled without replacement, deterministically.
    """
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, 97))))
    uids = [(sid, u) for sid in corpus.eval_ids
            for u in range(len(corpus.waves[sid]))]
    targets = []
    for sid in corpus.eval_ids:
        n = len(corpus.waves[sid])
        for u in range(n):
            for v in range(u + 1, n):
                targets.append((utterance_id(sid, u), utterance_id(sid, v), True))
    cross = [(a, b) for ai, a in enumerate(uids) for b in uids[ai + 1 :]
             if a[0] != b[0]]
    if not targets or not cross:
        raise ContractError("trial construction needs >= 2 eval speakers with "
                            ">= 2 utterances each")
    take = min(len(targets), len(cross))
    picks = rng.choice(len(cross), size=take, replace=False)
    nontargets = [(utterance_id(*cross[i][0]), utterance_id(*cross[i][1]), False)
                  for i in sorted(picks.tolist())]
    return targets + nontargets


def evaluate_model(params, embedding_fn, corpus_eval: Corpus, trial_list,
                   n_crops: int, crop_len: int):
    """Score every trial with crop-averaged cosines and return (eer, threshold).

    embedding_fn(params, crops_matrix) must map (n, crop_len) waveform crops
    to (n, D) embeddings with normalization layers in evaluation mode.
    """
    cache = {}
    for sid in corpus_eval.eval_ids:
        for uidx, wave in enumerate(corpus_eval.waves[sid]):
            c = crops(wave, n_crops, crop_len)
            emb = embedding_fn(params, c)
            cache[utterance_id(sid, uidx)] = np.asarray(
                emb.data if hasattr(emb, "data") else emb)
    scores, flags = [], []
    for a, b, target in trial_list:
        if a == b:
            raise ContractError(f"trial pairs utterance {a!r} with itself")
        scores.append(score_trial(cache[a], cache[b]))
        flags.append(bool(target))
    return compute_eer(np.array(scores), np.array(flags))


def write_trials(path: str, trials) -> None:
    with open(path, "w") as fh:
        for a, b, target in trials:
            fh.write(f"{a} {b} {1 if target else 0}\n")


def read_trials(path: str):
    trials = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            a, b, flag = line.split()
            trials.append((a, b, flag == "1"))
    return trials


def write_scores(path: str, trials, scores) -> None:
    with open(path, "w") as fh:
        for (a, b, target), s in zip(trials, scores):
            fh.write(f"{a} {b} {1 if target else 0} {s!r}\n")
