"""Utterance mixing: simulate overlapped speech inside a batch.

Each utterance is independently selected with probability p; a selected
utterance gets one chunk of another batch member (self allowed) added over
at most half of its samples, so the original speaker stays dominant and
per-frame labels from the clean audio remain valid. All draws come from a
single seeded generator consumed in a fixed order (selection, then per
selected utterance: source, length, target start, source start, gain).

Recorded MixSpec positions are 1-based to match the sampling definition of
the chunk bounds; apply/verify converts internally.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Batch, Utterance, Waveform


@dataclass(frozen=True)
class FixedGain:
    gain: float = 1.0


@dataclass(frozen=True)
class UniformSnrGain:
    """Gain drawn so the chunk sits at a uniform random SNR (dB) below/above
    the target region's energy. Falls back to unit gain on silent targets."""

    low_db: float = -5.0
    high_db: float = 5.0


GainPolicy = FixedGain | UniformSnrGain


@dataclass
class MixSpec:
    """One applied mix: batch[target][s : s+l] += gain * batch[source][s_b : s_b+l]
    with s, s_b 1-based."""

    target_index: int
    source_index: int
    mix_length: int
    target_start: int
    source_start: int
    gain: float

    def validate(self, batch_size: int, length: int) -> list[str]:
        problems = []
        half = length // 2
        if not 1 <= self.mix_length <= half:
            problems.append(f"mix_length {self.mix_length} outside [1, {half}]")
        if not 1 <= self.target_start <= length - self.mix_length:
            problems.append(f"target_start {self.target_start} out of range")
        if not 1 <= self.source_start <= length - self.mix_length:
            problems.append(f"source_start {self.source_start} out of range")
        if not 0 <= self.target_index < batch_size:
            problems.append(f"target_index {self.target_index} out of range")
        if not 0 <= self.source_index < batch_size:
            problems.append(f"source_index {self.source_index} out of range")
        if not np.isfinite(self.gain):
            problems.append("gain is not finite")
        return problems


@dataclass
class MixedBatch:
    batch: Batch
    specs: list[MixSpec]
    clean: Batch


def _chunk_gain(policy: GainPolicy, target_region, source_chunk, rng) -> float:
    if isinstance(policy, FixedGain):
        return float(policy.gain)
    snr_db = rng.uniform(policy.low_db, policy.high_db)
    target_energy = float(np.sum(target_region**2))
    chunk_energy = float(np.sum(source_chunk**2))
    if target_energy == 0.0 or chunk_energy == 0.0:
        return 1.0
    return float(np.sqrt(target_energy / chunk_energy) * 10.0 ** (-snr_db / 20.0))


def mix_batch(
    batch: Batch,
    p: float,
    gain_policy: GainPolicy | None = None,
    seed: int = 0,
    allow_self_mix: bool = True,
) -> MixedBatch:
    """Overlay a random chunk of a random batch member onto each selected
    utterance. Mixed-in chunks always come from the clean batch, so results
    do not depend on the order the selected utterances are processed."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("mixing probability must lie in [0, 1]")
    gain_policy = gain_policy if gain_policy is not None else UniformSnrGain()
    rng = np.random.default_rng(seed)
    b, length = batch.size, batch.length
    half = length // 2
    if half < 1:
        raise ValueError("batch length too short to mix (need L >= 2)")

    clean = np.stack([u.waveform.samples for u in batch.utterances])
    mixed = clean.copy()
    selected = np.nonzero(rng.random(b) < p)[0]
    specs: list[MixSpec] = []
    for target in selected:
        candidates = [i for i in range(b) if allow_self_mix or i != target]
        if not candidates:
            raise ValueError("cannot exclude self-mixing in a batch of size 1")
        source = int(candidates[rng.integers(len(candidates))])
        l = int(rng.integers(1, half + 1))
        s = int(rng.integers(1, length - l + 1))
        s_b = int(rng.integers(1, length - l + 1))
        chunk = clean[source, s_b - 1 : s_b - 1 + l]
        gain = _chunk_gain(gain_policy, clean[target, s - 1 : s - 1 + l], chunk, rng)
        mixed[target, s - 1 : s - 1 + l] += gain * chunk
        specs.append(MixSpec(int(target), source, l, s, s_b, gain))

    rate = batch.utterances[0].waveform.sample_rate
    out = [
        Utterance(u.id, Waveform(mixed[i], rate), u.speaker)
        for i, u in enumerate(batch.utterances)
    ]
    return MixedBatch(Batch(out, length), specs, batch)


@dataclass
class MixReport:
    ok: bool
    problems: list[str]


def verify_spec(mixed: MixedBatch) -> MixReport:
    """Re-derive the mixed batch from clean audio + specs and confirm
    bit-equality, plus every MixSpec bound (notably l <= L/2)."""
    batch, clean = mixed.batch, mixed.clean
    problems: list[str] = []
    for idx, spec in enumerate(mixed.specs):
        for msg in spec.validate(batch.size, batch.length):
            problems.append(f"spec {idx}: {msg}")
    if problems:
        return MixReport(False, problems)

    clean_samples = np.stack([u.waveform.samples for u in clean.utterances])
    rebuilt = clean_samples.copy()
    for spec in mixed.specs:
        s, s_b, l = spec.target_start - 1, spec.source_start - 1, spec.mix_length
        rebuilt[spec.target_index, s : s + l] += (
            spec.gain * clean_samples[spec.source_index, s_b : s_b + l]
        )
    actual = np.stack([u.waveform.samples for u in batch.utterances])
    mixed_targets = {spec.target_index for spec in mixed.specs}
    for i in range(batch.size):
        if not np.array_equal(rebuilt[i], actual[i]):
            where = "mixed region" if i in mixed_targets else "untouched utterance"
            owner = next(
                (f"spec {j}" for j, spec in enumerate(mixed.specs) if spec.target_index == i),
                "no spec",
            )
            problems.append(f"utterance {i}: {where} differs from reconstruction ({owner})")
    return MixReport(not problems, problems)


def save_mixspecs(path, batch_index: int, specs: list[MixSpec], append: bool = False) -> None:
    mode = "a" if append else "w"
    with open(Path(path), mode, encoding="utf-8") as fh:
        fh.write(json.dumps({
            "batch_index": batch_index,
            "specs": [
                {
                    "target_index": s.target_index,
                    "source_index": s.source_index,
                    "l": s.mix_length,
                    "s": s.target_start,
                    "s_b": s.source_start,
                    "gain": s.gain,
                }
                for s in specs
            ],
        }) + "\n")
